//! End-to-end model, optimizer, training loop, checkpoints and the ablation
//! runner.

mod ablation;
mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use ablation::{
    run_ablation, run_cell, sign_test, AblationReport, AblationRow, AblationSpec, Comparison,
    Variant,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{
    CameraSection, DataSection, EbfsSection, FusionSection, HeadSection, LdfaSection, LidarSection,
    ModelConfig, OptimConfig,
};
pub use model::{backward, forward, initial_gaussians, ForwardCache, Model, SceneInputs};
pub use optim::{cosine_lr, AdamW};
pub use train::{
    build_dataset, class_names, evaluate, predict_labels, prepare_scenes, run, run_on,
    synthetic_scenes, train, train_step, Dataset, MetricRecord, RunOutcome, Split, TrainState,
};
