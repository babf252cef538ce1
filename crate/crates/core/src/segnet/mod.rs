//! The segmentation model and the feature discriminator.

pub mod checkpoint;
mod discriminator;
mod model;

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensors};
pub use discriminator::{DiscriminatorConfig, PatchDiscriminator, LEAKY_SLOPE};
pub use model::{FeatureDropout, SegModel, SegModelConfig, SegOutput, SPATIAL_MULTIPLE};

#[cfg(test)]
mod tests;
