//! File formats: tensor files, checkpoints, dataset directories and run
//! configuration.

mod checkpoint;
mod config;
mod dataset;
mod tensor_file;

pub use checkpoint::{
    load_bank, load_task, models_checkpoint, task_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tensor_file::{
    decode, encode_f32, encode_u8, read_labels, read_tensor, write_labels, write_tensor, TensorData, DTYPE_F32,
    DTYPE_U8, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use config::{parse_entries, RunConfig};
pub use dataset::{
    read_annotation, read_dataset, read_prediction, read_subject, subject_dirs, write_dataset, write_prediction,
    write_subject, PROVENANCE_FILE,
};
