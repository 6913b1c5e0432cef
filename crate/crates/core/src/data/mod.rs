pub mod bundle;
pub mod features;
pub mod ingest;
pub mod manifest;
pub mod scaler;
pub mod sequence;
pub mod split;
pub mod synthetic;

pub use bundle::{load_bundle, prepare, save_bundle, Dataset, PipelineConfig};
pub use features::FeatureCube;
pub use manifest::DatasetManifest;
pub use scaler::ScalerParams;
pub use sequence::SequenceSample;
pub use split::SplitSpec;
pub use synthetic::{generate_synthetic, SyntheticSpec};
