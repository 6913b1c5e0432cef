//! End-to-end preprocessing and the processed-dataset bundle.
//!
//! A bundle directory holds `manifest.txt`, `bundle.json` (feature index
//! map, scaler, split, sample index, optional synthetic descriptor and the
//! tensor table) and `bundle.bin` with the base cube in the checkpoint blob
//! layout. Loading replays the deterministic pipeline from the base cube and
//! asserts that the stored feature map and scaler are reproduced.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{build_lag_features, build_precip_deltas, FeatureCube};
use super::manifest::DatasetManifest;
use super::scaler::{robust_fit, robust_transform, ScalerParams};
use super::sequence::{assemble_sequences, SampleIndex, SequenceSample, DEFAULT_SEQ_LEN};
use super::split::{chronological_split, SplitSpec, DEFAULT_FRACTIONS};
use super::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{pack, unpack, TensorEntry};
use crate::tensor::Tensor;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST_FILE: &str = "manifest.txt";
pub const BUNDLE_INDEX_FILE: &str = "bundle.json";
pub const BUNDLE_BLOB_FILE: &str = "bundle.bin";
pub const DEFAULT_LAGS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seq_len: usize,
    pub lags: Vec<usize>,
    pub fractions: [f64; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            lags: DEFAULT_LAGS.to_vec(),
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

/// Base variables, then lag copies, then precipitation deltas, with warm-up
/// days removed.
pub fn build_features(base: &FeatureCube, precip: &str, lags: &[usize]) -> Result<FeatureCube> {
    if base.feature_index(precip).is_none() {
        return Err(Error::invalid(format!("precipitation channel `{precip}` missing")));
    }
    if lags.is_empty() {
        return Ok(base.clone());
    }
    let lagged = build_lag_features(base, lags)?;
    let widened = build_precip_deltas(&lagged, precip, lags)?;
    let kept = widened.drop_invalid();
    debug_assert!(!kept.has_nan());
    Ok(kept)
}

/// A processed dataset ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub config: PipelineConfig,
    pub base: FeatureCube,
    pub feature_names: Vec<String>,
    /// Scaled samples ordered by target date.
    pub samples: Vec<SequenceSample>,
    pub index: Vec<SampleIndex>,
    pub split: SplitSpec,
    pub scaler: ScalerParams,
    pub warnings: Vec<String>,
    pub synthetic: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn train(&self) -> &[SequenceSample] {
        &self.samples[self.split.train()]
    }

    pub fn val(&self) -> &[SequenceSample] {
        &self.samples[self.split.val()]
    }

    pub fn test(&self) -> &[SequenceSample] {
        &self.samples[self.split.test()]
    }

    pub fn partition(&self, range: Range<usize>) -> &[SequenceSample] {
        &self.samples[range]
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.manifest.grid_rows, self.manifest.grid_cols)
    }

    /// All samples before scaling, in the same order as `samples`.
    pub fn unscaled_samples(&self) -> Result<Vec<SequenceSample>> {
        let features = build_features(&self.base, &self.manifest.precip_variable, &self.config.lags)?;
        Ok(assemble_sequences(&features, self.config.seq_len, &self.manifest.precip_variable)?.samples)
    }
}

/// Features, sequences, chronological split, then a robust scaler fitted on
/// the training partition and applied to every sample.
pub fn prepare(
    manifest: DatasetManifest,
    base: FeatureCube,
    config: PipelineConfig,
    synthetic: Option<SyntheticSpec>,
) -> Result<Dataset> {
    manifest.validate()?;
    if base.features != manifest.variables {
        return Err(Error::invalid("base cube channels differ from the manifest variables"));
    }
    let features = build_features(&base, &manifest.precip_variable, &config.lags)?;
    let assembly = assemble_sequences(&features, config.seq_len, &manifest.precip_variable)?;
    let mut samples = assembly.samples;
    if samples.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} sequences of length {} available; at least 3 needed for a split{}",
            samples.len(),
            config.seq_len,
            assembly
                .warnings
                .first()
                .map(|w| format!(" ({w})"))
                .unwrap_or_default()
        )));
    }
    let dates: Vec<_> = samples.iter().map(|s| s.target_date).collect();
    let split = chronological_split(&dates, config.fractions)?;
    let scaler = robust_fit(&samples[split.train()])?;
    robust_transform(&mut samples, &scaler)?;
    Ok(Dataset {
        manifest,
        config,
        base,
        feature_names: features.features,
        samples,
        index: assembly.index,
        split,
        scaler,
        warnings: assembly.warnings,
        synthetic,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleIndex {
    format_version: u32,
    pipeline: PipelineConfig,
    feature_names: Vec<String>,
    scaler: ScalerParams,
    split: SplitSpec,
    samples: Vec<SampleIndex>,
    targets: Vec<f64>,
    synthetic: Option<SyntheticSpec>,
    tensors: Vec<TensorEntry>,
}

pub fn save_bundle(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let b = &dataset.base;
    let cube = Tensor::new(
        vec![b.num_days(), b.height, b.width, b.num_features()],
        b.data.clone(),
    )?;
    let (tensors, blob) = pack([("base_cube", &cube)]);
    let index = BundleIndex {
        format_version: BUNDLE_FORMAT_VERSION,
        pipeline: dataset.config.clone(),
        feature_names: dataset.feature_names.clone(),
        scaler: dataset.scaler.clone(),
        split: dataset.split.clone(),
        samples: dataset.index.clone(),
        targets: dataset.samples.iter().map(|s| s.y).collect(),
        synthetic: dataset.synthetic.clone(),
        tensors,
    };
    dataset.manifest.write(&dir.join(BUNDLE_MANIFEST_FILE))?;
    fs::write(dir.join(BUNDLE_INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    fs::write(dir.join(BUNDLE_BLOB_FILE), blob)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(&dir.join(BUNDLE_MANIFEST_FILE))?;
    let index_path = dir.join(BUNDLE_INDEX_FILE);
    let index: BundleIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let corrupt = |message: String| Error::Corrupt {
        path: index_path.clone(),
        message,
    };
    if index.format_version != BUNDLE_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported bundle version {}", index.format_version)));
    }
    let entry = index
        .tensors
        .iter()
        .find(|e| e.name == "base_cube")
        .ok_or_else(|| corrupt("no `base_cube` tensor".into()))?;
    let blob_path = dir.join(BUNDLE_BLOB_FILE);
    let cube = unpack(entry, &fs::read(&blob_path)?, &blob_path)?;
    let dates = manifest.dates();
    let expected = [dates.len(), manifest.grid_rows, manifest.grid_cols, manifest.variables.len()];
    if cube.shape() != expected {
        return Err(corrupt(format!(
            "base cube shape {:?} does not match manifest {:?}",
            cube.shape(),
            expected
        )));
    }
    let base = FeatureCube::new(
        dates,
        manifest.grid_rows,
        manifest.grid_cols,
        manifest.variables.clone(),
        cube.into_data(),
    )?;
    let dataset = prepare(manifest, base, index.pipeline, index.synthetic)?;
    if dataset.feature_names != index.feature_names {
        return Err(corrupt(format!(
            "feature index map mismatch: stored {:?}, rebuilt {:?}",
            index.feature_names, dataset.feature_names
        )));
    }
    if dataset.scaler != index.scaler || dataset.split != index.split || dataset.index != index.samples {
        return Err(corrupt("scaler, split or sample index differ from the stored bundle".into()));
    }
    let targets_match = dataset
        .samples
        .iter()
        .zip(&index.targets)
        .all(|(s, y)| s.y.to_bits() == y.to_bits());
    if !targets_match || index.targets.len() != dataset.samples.len() {
        return Err(corrupt("stored targets differ from the rebuilt samples".into()));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn small() -> Dataset {
        let ds = generate_synthetic(&SyntheticSpec::new(3, 3, 40, 2, 5)).unwrap();
        prepare(ds.manifest, ds.cube, PipelineConfig::default(), None).unwrap()
    }

    #[test]
    fn feature_layout() {
        let d = small();
        // 3 base (x0, x1, tp) + 3 lags × 3 + 3 deltas.
        assert_eq!(d.num_features(), 15);
        assert_eq!(d.feature_names[3], "x0_lag1");
        assert_eq!(d.feature_names[14], "tp_delta3");
        // 40 days, 3 warm-up days dropped, T = 7.
        assert_eq!(d.samples.len(), 40 - 3 - 7);
        assert_eq!(d.samples[0].x.shape(), &[7, 3, 3, 15]);
    }

    #[test]
    fn bundle_roundtrip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&d, dir.path()).unwrap();
        let again = load_bundle(dir.path()).unwrap();
        assert_eq!(again.samples, d.samples);
        assert_eq!(again.feature_names, d.feature_names);
    }

    #[test]
    fn tampered_feature_map_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&d, dir.path()).unwrap();
        let p = dir.path().join(BUNDLE_INDEX_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("x0_lag1", "x0_lagX");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Corrupt { .. })));
    }
}
