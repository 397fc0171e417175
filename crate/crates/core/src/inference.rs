//! Single-clip inference from raw WAV bytes. The CLI and the HTTP service
//! both go through here, so their outputs agree bit for bit.

use thiserror::Error;

use crate::audio::{decode_wav, fit_to_length, AudioError, CLIP_LEN};
use crate::features::{mfcc, FeatureError, FeatureMatrix};
use crate::models::{predict, Model, ModelError, Prediction};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Decode, pad or crop to one second, and extract MFCCs.
pub fn features_from_wav(bytes: &[u8]) -> Result<FeatureMatrix, InferError> {
    let clip = fit_to_length(&decode_wav(bytes)?, CLIP_LEN);
    Ok(mfcc(&clip)?)
}

pub fn predict_wav(model: &Model, bytes: &[u8]) -> Result<Prediction, InferError> {
    Ok(predict(model, &features_from_wav(bytes)?)?)
}
