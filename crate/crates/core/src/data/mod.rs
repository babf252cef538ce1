//! Synthetic datasets, their on-disk format and the labeled/unlabeled split.

mod manifest;
mod pnm;
mod synth;

pub use manifest::{
    generate_blob_dataset, generate_dataset, generate_vessel_dataset, image_name, label_name,
    labeled_count, split_dataset, DatasetManifest, Sample, SampleEntry, SplitTag, MANIFEST_FILE,
};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_sample, write_sample};
pub use synth::{
    synthesize, Style, SynthSample, SyntheticSpec, BLOB_RELATIVE_TOLERANCE, CHASE_RATIOS,
    COVID_RATIOS, MAX_ATTEMPTS, RARE_CLASS_FRACTION, VESSEL_TOLERANCE,
};
