//! Synthetic face world: factor space, geometry, renderer, datasets, and the
//! frozen factor-recovery encoders everything downstream scores against.

pub mod dataset;
pub mod factors;
pub mod geometry;
pub mod oracle;
pub mod render;

pub use dataset::{generate_dataset, load_manifest, DatasetRecord};
pub use factors::{sample_factors, FactorVector, ATTRIBUTE_DEFS, IDENTITY_DEFS};
pub use geometry::{FaceGeometry, IMG_SIZE};
pub use render::{background_mask, glasses_mask, mouth_mask, render};
