//! Synthetic tracking data, the frozen feature encoder, and annotation I/O.

pub mod annotations;
pub mod dataset;
pub mod encoder;
pub mod scene;

pub use annotations::{
    format_got10k_annotations, normalize_boxes, parse_got10k_annotations, parse_otb_annotations,
};
pub use dataset::{
    directory_checksum, read_split, read_spec, sequence_name, write_dataset, DatasetSpec,
    DatasetSummary, Split,
};
pub use encoder::{encode_frames, ToyEncoder};
pub use scene::{generate_sequence, SceneSpec, SequenceRecord};
