//! Keyword spotting on the Speech Commands corpus.
//!
//! The pipeline runs from 16 kHz WAV clips through a 101 x 40 MFCC matrix
//! into one of two small CNNs (`cnn-trad-pool2`, `cnn-one-fstride4`) that
//! classify the clip into twelve labels: ten keywords, `unknown` and
//! `silence`. Everything numeric is implemented here on plain `Vec`
//! buffers with hand-written backward passes.

pub mod audio;
pub mod checkpoint;
pub mod dataset;
pub mod features;
pub mod inference;
pub mod models;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use audio::{AudioClip, AudioError};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use dataset::{assign_split, scan_dataset, Corpus, DatasetError, Manifest, Split};
pub use features::{mfcc, FeatureError, FeatureMatrix, MfccExtractor};
pub use inference::{predict_wav, InferError};
pub use models::{predict, Model, ModelError, ModelName, ModelSpec, Prediction, LABELS};
pub use nn::NnError;
pub use tensor::{Element, Parameter, Tensor};
pub use training::{evaluate, multi_seed_run, train, TrainConfig, TrainError};
