//! On-disk formats, bundle validation and synthetic data.

pub mod bundle;
pub mod manifest;
pub mod pct1;
pub mod synth;

pub use bundle::{
    load_descriptions, validate_bundle, write_dataset, ClassDescriptions, DescriptionSet,
    EmbeddingBundle, Image,
};
pub use manifest::{FileEntry, Manifest, ManifestDir};
pub use pct1::{load_tensor, save_tensor};
pub use synth::{gen_synthetic, PlantRecord, SynthConfig};
