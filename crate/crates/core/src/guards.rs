//! Numerical stability guards applied during training.

use autodiff::Tensor;

pub use crate::bridge::LOGIT_CLAMP;
use crate::codec::Codec;
use crate::error::{Error, Result};

pub const AUDIO_CLIP: f64 = 1.2;

/// Guarded copies of logits and audio plus the skip decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Guarded {
    pub logits: Tensor,
    pub audio: Vec<f64>,
    /// Set when the loss is not finite and the update must be skipped.
    pub skip: bool,
}

pub fn guards(logits: &Tensor, audio: &[f64], loss: f64) -> Guarded {
    Guarded {
        logits: logits.map(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)),
        audio: audio.iter().map(|v| v.clamp(-AUDIO_CLIP, AUDIO_CLIP)).collect(),
        skip: !loss.is_finite(),
    }
}

/// Fails when the codec carries layers that would track batch statistics.
pub fn ensure_no_batch_statistics(codec: &Codec) -> Result<()> {
    if codec.has_batch_statistics() {
        return Err(Error::Contract("codec contains batch-statistics layers".into()));
    }
    Ok(())
}
