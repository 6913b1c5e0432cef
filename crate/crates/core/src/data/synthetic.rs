//! Synthetic gridded datasets with a planted driver → rainfall relation.
//!
//! Noise channels are spatially Gaussian-smoothed AR(1) fields with unit
//! marginal variance. Rainfall on day `s` is spread over the grid so that
//! its area mean is `expm1(y)` with
//!
//! ```text
//! y = offset + coeff · mean(driver over mask, day s − 1 − lag) + ε
//! ```
//!
//! so a sample whose last input day is `t` has its target linear in the
//! driver at input day `t − lag`, i.e. input step `T − 1 − lag`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::FeatureCube;
use super::manifest::{split_list, DatasetManifest, KeyValues, Provenance, DEFAULT_PRECIP_VARIABLE};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Rectangular block of grid cells, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMask {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CellMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows: (0, rows),
            cols: (0, cols),
        }
    }

    /// Top-left quadrant.
    pub fn quadrant(rows: usize, cols: usize) -> Self {
        Self {
            rows: (0, rows.div_ceil(2)),
            cols: (0, cols.div_ceil(2)),
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.rows.0..self.rows.1).contains(&row) && (self.cols.0..self.cols.1).contains(&col)
    }

    pub fn len(&self) -> usize {
        self.rows.1.saturating_sub(self.rows.0) * self.cols.1.saturating_sub(self.cols.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for CellMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{},{}:{}", self.rows.0, self.rows.1, self.cols.0, self.cols.1)
    }
}

impl FromStr for CellMask {
    type Err = Error;

    /// `r0:r1,c0:c1`
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("mask `{s}` is not `r0:r1,c0:c1`"));
        let (r, c) = s.split_once(',').ok_or_else(bad)?;
        let range = |p: &str| -> Result<(usize, usize)> {
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        };
        Ok(Self {
            rows: range(r)?,
            cols: range(c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub days: usize,
    /// Number of noise channels (the rainfall channel is added on top).
    pub channels: usize,
    /// Index of the planted driver among the noise channels.
    pub driver: usize,
    /// Planted time lag in days relative to the last input day.
    pub lag: usize,
    pub mask: CellMask,
    pub coeff: f64,
    pub noise_std: f64,
    /// Baseline of the log-space target, keeping rainfall positive.
    pub offset: f64,
    /// AR(1) day-to-day coefficient of every noise field.
    pub ar_coeff: f64,
    /// Gaussian smoothing width in cells.
    pub smoothing: f64,
    /// Amplitude of the driver field outside the mask, relative to inside.
    pub outside_gain: f64,
    /// Input sequence length the dataset is meant for; `lag` must be below it.
    pub seq_len: usize,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl SyntheticSpec {
    /// An `rows×cols` grid with the driver planted on channel 0 over the
    /// whole grid at lag 0.
    pub fn new(rows: usize, cols: usize, days: usize, channels: usize, seed: u64) -> Self {
        Self {
            grid_rows: rows,
            grid_cols: cols,
            days,
            channels,
            driver: 0,
            lag: 0,
            mask: CellMask::full(rows, cols),
            coeff: 0.5,
            noise_std: 0.1,
            offset: 2.0,
            ar_coeff: 0.5,
            smoothing: 1.0,
            outside_gain: 0.1,
            seq_len: super::sequence::DEFAULT_SEQ_LEN,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.days == 0 || self.channels == 0 {
            return Err(Error::invalid("synthetic grid, days and channels must be positive"));
        }
        if self.driver >= self.channels {
            return Err(Error::invalid(format!(
                "driver channel {} out of range for {} channels",
                self.driver, self.channels
            )));
        }
        if self.lag >= self.seq_len {
            return Err(Error::invalid(format!(
                "planted lag {} must be below the sequence length {}",
                self.lag, self.seq_len
            )));
        }
        if self.mask.is_empty() || self.mask.rows.1 > self.grid_rows || self.mask.cols.1 > self.grid_cols {
            return Err(Error::invalid(format!(
                "mask {} is empty or outside the {}×{} grid",
                self.mask, self.grid_rows, self.grid_cols
            )));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) || self.noise_std < 0.0 || self.smoothing < 0.0 {
            return Err(Error::invalid("ar_coeff must be in (-1, 1); noise_std and smoothing non-negative"));
        }
        Ok(())
    }

    pub fn variables(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.channels).map(|c| format!("x{c}")).collect();
        v.push(DEFAULT_PRECIP_VARIABLE.to_string());
        v
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let rows: usize = kv.take_parsed("grid_rows")?;
        let cols: usize = kv.take_parsed("grid_cols")?;
        let days: usize = kv.take_parsed("days")?;
        let channels: usize = kv.take_parsed("channels")?;
        let d = Self::new(rows, cols, days, channels, 0);
        let mask = match kv.take("mask") {
            None => d.mask,
            Some((_, m)) if m == "full" => CellMask::full(rows, cols),
            Some((_, m)) if m == "quadrant" => CellMask::quadrant(rows, cols),
            Some((_, m)) => m.parse()?,
        };
        let explicit_noise = kv.take("noise_std");
        let ratio = match kv.take("noise_ratio") {
            Some((line, v)) => Some(v.parse::<f64>().map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: format!("noise_ratio: {e}"),
            })?),
            None => None,
        };
        if ratio.is_some() && explicit_noise.is_some() {
            return Err(Error::invalid("give either noise_std or noise_ratio, not both"));
        }
        let noise_std = match explicit_noise {
            Some((line, v)) => v.parse::<f64>().map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: format!("noise_std: {e}"),
            })?,
            None => d.noise_std,
        };
        let spec = Self {
            driver: kv.take_parsed_or("driver", d.driver)?,
            lag: kv.take_parsed_or("lag", d.lag)?,
            mask,
            coeff: kv.take_parsed_or("coeff", d.coeff)?,
            noise_std,
            offset: kv.take_parsed_or("offset", d.offset)?,
            ar_coeff: kv.take_parsed_or("ar_coeff", d.ar_coeff)?,
            smoothing: kv.take_parsed_or("smoothing", d.smoothing)?,
            outside_gain: kv.take_parsed_or("outside_gain", d.outside_gain)?,
            seq_len: kv.take_parsed_or("seq_len", d.seq_len)?,
            start_date: match kv.take("start_date") {
                Some((_, s)) => NaiveDate::parse_from_str(&s, "%Y-%m-%d")
                    .map_err(|e| Error::invalid(format!("start_date: {e}")))?,
                None => d.start_date,
            },
            seed: kv.take_parsed_or("seed", d.seed)?,
            ..d
        };
        kv.finish()?;
        spec.validate()?;
        match ratio {
            Some(r) => spec.with_noise_ratio(r),
            None => Ok(spec),
        }
    }

    /// Copy whose noise standard deviation is `ratio` times the standard
    /// deviation of the planted log-space signal.
    pub fn with_noise_ratio(&self, ratio: f64) -> Result<Self> {
        if !(ratio >= 0.0) {
            return Err(Error::invalid(format!("noise ratio must be non-negative, got {ratio}")));
        }
        let quiet = Self {
            noise_std: 0.0,
            ..self.clone()
        };
        let signal_std = generate_synthetic(&quiet)?.signal_std;
        Ok(Self {
            noise_std: ratio * signal_std,
            ..quiet
        })
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid_rows={}", self.grid_rows)?;
        writeln!(f, "grid_cols={}", self.grid_cols)?;
        writeln!(f, "days={}", self.days)?;
        writeln!(f, "channels={}", self.channels)?;
        writeln!(f, "driver={}", self.driver)?;
        writeln!(f, "lag={}", self.lag)?;
        writeln!(f, "mask={}", self.mask)?;
        writeln!(f, "coeff={}", self.coeff)?;
        writeln!(f, "noise_std={}", self.noise_std)?;
        writeln!(f, "offset={}", self.offset)?;
        writeln!(f, "ar_coeff={}", self.ar_coeff)?;
        writeln!(f, "smoothing={}", self.smoothing)?;
        writeln!(f, "outside_gain={}", self.outside_gain)?;
        writeln!(f, "seq_len={}", self.seq_len)?;
        writeln!(f, "start_date={}", self.start_date)?;
        writeln!(f, "seed={}", self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Base cube: noise channels `x0…`, then rainfall `tp` in mm/day.
    pub cube: FeatureCube,
    /// Masked driver mean per day.
    pub driver_signal: Vec<f64>,
    /// Log-space area-mean rainfall per day.
    pub log_target: Vec<f64>,
    /// Standard deviation of `coeff · driver_signal` over the days that carry
    /// a planted target.
    pub signal_std: f64,
}

/// Normalized 1-D Gaussian kernel; a width of 0 is the identity.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable smoothing with the kernel renormalized at the borders.
fn smooth(field: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (ki, w) in kernel.iter().enumerate() {
                    let off = ki as isize - r;
                    let (ii, jj) = if along_rows {
                        (i as isize + off, j as isize)
                    } else {
                        (i as isize, j as isize + off)
                    };
                    if ii < 0 || jj < 0 || ii >= rows as isize || jj >= cols as isize {
                        continue;
                    }
                    acc += w * src[ii as usize * cols + jj as usize];
                    wsum += w;
                }
                out[i * cols + j] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Stationary standard deviation of smoothed white noise, used to bring
/// smoothed innovations back to unit variance.
fn smoothed_std(rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    // Exact per-cell variance: sum of squared effective weights.
    let n = rows * cols;
    let mut var = vec![0.0; n];
    let mut unit = vec![0.0; n];
    for src in 0..n {
        unit[src] = 1.0;
        let resp = smooth(&unit, rows, cols, kernel);
        for (v, r) in var.iter_mut().zip(&resp) {
            *v += r * r;
        }
        unit[src] = 0.0;
    }
    var.into_iter().map(f64::sqrt).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (rows, cols) = (spec.grid_rows, spec.grid_cols);
    let cells = rows * cols;
    let f = spec.channels + 1;
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let kernel = gaussian_kernel(spec.smoothing);
    let norm = smoothed_std(rows, cols, &kernel);
    let innovation_scale = (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt();

    let innovation = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let s = smooth(&white(rng, cells), rows, cols, &kernel);
        s.iter().zip(&norm).map(|(v, n)| v / n).collect()
    };

    let mut fields: Vec<Vec<f64>> = (0..spec.channels).map(|_| innovation(&mut rng)).collect();
    let mut data = vec![0.0; spec.days * cells * f];
    let mut driver_signal = Vec::with_capacity(spec.days);
    let mut log_target = Vec::with_capacity(spec.days);
    let p = spec.channels;

    for day in 0..spec.days {
        if day > 0 {
            for field in fields.iter_mut() {
                let e = innovation(&mut rng);
                for (v, e) in field.iter_mut().zip(e) {
                    *v = spec.ar_coeff * *v + innovation_scale * e;
                }
            }
        }
        let mut masked_sum = 0.0;
        for cell in 0..cells {
            let (r, c) = (cell / cols, cell % cols);
            for (ch, field) in fields.iter().enumerate() {
                let mut v = field[cell];
                if ch == spec.driver {
                    if spec.mask.contains(r, c) {
                        masked_sum += v;
                    } else {
                        v *= spec.outside_gain;
                    }
                }
                data[(day * cells + cell) * f + ch] = v;
            }
        }
        driver_signal.push(masked_sum / spec.mask.len() as f64);

        let noise = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
        let planted = day.checked_sub(1 + spec.lag).map(|src| spec.coeff * driver_signal[src]);
        let y = (spec.offset + planted.unwrap_or(0.0) + noise).max(0.0);
        log_target.push(y);

        // Zero-mean spatial pattern with |ρ| < 1 keeps every cell positive and
        // the area mean exact.
        let pattern: Vec<f64> = white(&mut rng, cells).iter().map(|z| 0.3 * z.tanh()).collect();
        let pattern = smooth(&pattern, rows, cols, &kernel);
        let pm = pattern.iter().sum::<f64>() / cells as f64;
        let mean_mm = y.exp_m1();
        for (cell, rho) in pattern.iter().enumerate() {
            data[(day * cells + cell) * f + p] = mean_mm * (1.0 + rho - pm);
        }
    }

    let planted: Vec<f64> = (1 + spec.lag..spec.days)
        .map(|d| spec.coeff * driver_signal[d - 1 - spec.lag])
        .collect();
    let signal_std = if planted.is_empty() { 0.0 } else { crate::stats::std_dev(&planted) };

    let dates: Vec<NaiveDate> = spec.start_date.iter_days().take(spec.days).collect();
    let manifest = DatasetManifest {
        grid_rows: rows,
        grid_cols: cols,
        variables: spec.variables(),
        date_start: dates[0],
        date_end: *dates.last().expect("days > 0"),
        city: "synthetic".into(),
        provenance: Provenance::Synthetic,
        months: Vec::new(),
        precip_variable: DEFAULT_PRECIP_VARIABLE.to_string(),
    };
    let cube = FeatureCube::new(dates, rows, cols, manifest.variables.clone(), data)?;
    Ok(SyntheticDataset {
        manifest,
        cube,
        driver_signal,
        log_target,
        signal_std,
    })
}

/// Parses a comma list of lags such as `1,2,3`; an empty string means none.
pub fn parse_lags(s: &str) -> Result<Vec<usize>> {
    split_list(s)
        .iter()
        .map(|v| v.parse().map_err(|e| Error::invalid(format!("lag `{v}`: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    #[test]
    fn reproducible() {
        let spec = SyntheticSpec::new(4, 5, 40, 3, 7);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.cube, b.cube);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.cube, c.cube);
    }

    #[test]
    fn area_mean_recovers_log_target() {
        let spec = SyntheticSpec::new(5, 5, 30, 2, 3);
        let ds = generate_synthetic(&spec).unwrap();
        for d in 0..spec.days {
            let ch = ds.cube.channel(d, spec.channels);
            assert!(ch.iter().all(|&v| v >= 0.0));
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            assert!((mean.ln_1p() - ds.log_target[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_correlation_is_strong_at_low_noise() {
        let mut spec = SyntheticSpec::new(6, 6, 400, 3, 11);
        spec.lag = 2;
        spec.mask = CellMask::quadrant(6, 6);
        spec.noise_std = 0.0;
        let signal_std = generate_synthetic(&spec).unwrap().signal_std;
        spec.noise_std = 0.05 * signal_std;
        let ds = generate_synthetic(&spec).unwrap();
        let n = spec.days;
        let target = &ds.log_target[1 + spec.lag..n];
        let driver = &ds.driver_signal[..n - 1 - spec.lag];
        assert!(pearson(target, driver) > 0.9);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SyntheticSpec::new(4, 4, 20, 2, 1);
        spec.lag = 7;
        assert!(spec.validate().is_err());
        spec.lag = 0;
        spec.mask = CellMask { rows: (0, 0), cols: (0, 2) };
        assert!(spec.validate().is_err());
        spec.mask = CellMask::full(4, 4);
        spec.driver = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noise_ratio_resolves_against_signal() {
        let text = "grid_rows=4\ngrid_cols=4\ndays=80\nchannels=2\nnoise_ratio=0.2\nseed=3\n";
        let spec = SyntheticSpec::parse(text, Path::new("s.txt")).unwrap();
        let quiet = generate_synthetic(&SyntheticSpec { noise_std: 0.0, ..spec.clone() }).unwrap();
        assert!((spec.noise_std - 0.2 * quiet.signal_std).abs() < 1e-15);
        assert!(SyntheticSpec::parse(&format!("{text}noise_std=0.1\n"), Path::new("s.txt")).is_err());
    }

    #[test]
    fn spec_text_roundtrip() {
        let mut spec = SyntheticSpec::new(8, 8, 600, 4, 42);
        spec.mask = CellMask::quadrant(8, 8);
        spec.lag = 3;
        let again = SyntheticSpec::parse(&spec.to_string(), Path::new("s.txt")).unwrap();
        assert_eq!(again, spec);
    }
}
