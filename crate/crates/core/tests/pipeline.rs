use std::path::Path;

use chrono::NaiveDate;
use nowcast_core::data::features::{build_lag_features, build_precip_deltas, delta_name, lag_name};
use nowcast_core::data::ingest::{export_csv, ingest_reader};
use nowcast_core::data::split::chronological_split;
use nowcast_core::data::{generate_synthetic, prepare, FeatureCube, PipelineConfig, SyntheticSpec};
use nowcast_core::rng::{stream, Stream};
use nowcast_core::stats;
use nowcast_core::train::compute_tau;
use proptest::prelude::*;
use rand::Rng;

fn integer_cube(days: usize, seed: u64) -> FeatureCube {
    let mut rng = stream(seed, Stream::Synthetic);
    let start = NaiveDate::from_ymd_opt(2001, 3, 1).unwrap();
    let dates = start.iter_days().take(days).collect();
    let data = (0..days * 2 * 3 * 2).map(|_| rng.random_range(0..50) as f64 / 4.0).collect();
    FeatureCube::new(dates, 2, 3, vec!["t2m".into(), "tp".into()], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deltas_telescope_back_to_current_rainfall(seed in 0u64..1000, days in 6usize..20) {
        let base = integer_cube(days, seed);
        let lags = [1, 2, 3];
        let cube = build_precip_deltas(&build_lag_features(&base, &lags).unwrap(), "tp", &lags).unwrap().drop_invalid();
        let tp = cube.feature_index("tp").unwrap();
        for d in 0..cube.num_days() {
            for r in 0..cube.height {
                for c in 0..cube.width {
                    let mut p = cube.get(d, r, c, cube.feature_index(&lag_name("tp", 3)).unwrap());
                    for l in (1..=3).rev() {
                        p -= cube.get(d, r, c, cube.feature_index(&delta_name("tp", l)).unwrap());
                    }
                    prop_assert_eq!(p, cube.get(d, r, c, tp));
                }
            }
        }
    }
}

#[test]
fn lag_channels_are_shifted_copies() {
    let base = integer_cube(12, 4);
    let cube = build_lag_features(&base, &[2]).unwrap();
    for d in 2..12 {
        for f in 0..2 {
            assert_eq!(cube.get(d, 1, 2, 2 + f), base.get(d - 2, 1, 2, f));
        }
    }
    assert_eq!(cube.drop_invalid().num_days(), 10);
}

#[test]
fn split_sizes_for_one_hundred() {
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    let dates: Vec<_> = start.iter_days().take(100).collect();
    let s = chronological_split(&dates, [0.7, 0.15, 0.15]).unwrap();
    assert_eq!(s.sizes(), [70, 15, 15]);
}

#[test]
fn later_values_do_not_reach_scaler_or_threshold() {
    let spec = SyntheticSpec::new(3, 3, 150, 2, 8);
    let syn = generate_synthetic(&spec).unwrap();
    let ds = prepare(syn.manifest.clone(), syn.cube.clone(), PipelineConfig::default(), None).unwrap();
    let cutoff = ds.split.train_last_date.unwrap();
    let mut cube = syn.cube.clone();
    let day_len = cube.day_len();
    for (d, date) in syn.cube.dates.iter().enumerate() {
        if *date > cutoff {
            for v in &mut cube.data[d * day_len..(d + 1) * day_len] {
                *v = *v * 7.0 + 100.0;
            }
        }
    }
    let changed = prepare(syn.manifest, cube, PipelineConfig::default(), None).unwrap();
    assert_eq!(changed.scaler, ds.scaler);
    assert_eq!(changed.split, ds.split);
    assert_eq!(changed.train(), ds.train());
    let tau = |d: &nowcast_core::data::Dataset| compute_tau(&d.train().iter().map(|s| s.y).collect::<Vec<_>>(), 90.0).unwrap();
    assert_eq!(tau(&changed), tau(&ds));
    assert_ne!(changed.test(), ds.test());
}

#[test]
fn csv_roundtrip_preserves_the_cube() {
    let spec = SyntheticSpec::new(3, 3, 30, 3, 21);
    let syn = generate_synthetic(&spec).unwrap();
    assert_eq!(syn.cube.num_features(), 4);
    let mut buf = Vec::new();
    export_csv(&syn.cube, &mut buf).unwrap();
    let back = ingest_reader(&syn.manifest, buf.as_slice(), Path::new("roundtrip.csv")).unwrap();
    assert_eq!(back.dates, syn.cube.dates);
    assert_eq!(back.features, syn.cube.features);
    assert_eq!(back.data, syn.cube.data);
}

#[test]
fn planted_driver_explains_the_target() {
    let spec = SyntheticSpec {
        noise_std: 0.0,
        lag: 2,
        ..SyntheticSpec::new(6, 6, 400, 4, 17)
    };
    let syn = generate_synthetic(&spec).unwrap();
    let drive: Vec<f64> = (0..400 - 3).map(|d| syn.driver_signal[d]).collect();
    let target: Vec<f64> = (3..400).map(|d| syn.log_target[d]).collect();
    let other: Vec<f64> = (0..400 - 3)
        .map(|d| syn.cube.channel(d, 1).iter().sum::<f64>() / 36.0)
        .collect();
    assert!(stats::pearson(&drive, &target) > 0.9);
    assert!(stats::pearson(&other, &target).abs() < 0.2);
}
