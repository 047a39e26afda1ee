//! Inputs: the mel frontend, the synthetic generator and manifests.

pub mod manifest;
pub mod mel;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{pos_weights, split_manifest, Manifest, ManifestRecord, Split};
pub use mel::{chunk_spectrogram, mel_power, mel_spectrogram, AudioClip, MelConfig};
pub use synth::{synth_sample, SynthConfig};

/// One utterance across the three modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    /// Vocabulary ids, starting with the CLS id.
    pub tokens: Vec<usize>,
    /// Spectrogram chunks, each `[1, F, T]`.
    pub audio: Vec<Tensor>,
    /// RGB frames, each `[3, H, W]`.
    pub frames: Vec<Tensor>,
    /// Multi-hot labels.
    pub labels: Vec<f64>,
}

impl ModalitySample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.tokens.is_empty() || self.audio.is_empty() || self.frames.is_empty() {
            return Err(Error::InvalidArgument("every modality needs at least one element".into()));
        }
        if self.labels.len() != classes {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {classes} classes",
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Stacks equally shaped `[C, H, W]` images into `[C, S, H, W]`.
pub fn stack_sequence(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    let [c, h, w] = match *first.shape() {
        [c, h, w] => [c, h, w],
        ref sh => return Err(Error::InvalidArgument(format!("expected [C,H,W] items, got {sh:?}"))),
    };
    if items.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::InvalidArgument("sequence items differ in shape".into()));
    }
    let s = items.len();
    let plane = h * w;
    let mut data = vec![0.0; c * s * plane];
    for (si, t) in items.iter().enumerate() {
        for ci in 0..c {
            data[(ci * s + si) * plane..][..plane].copy_from_slice(&t.data()[ci * plane..][..plane]);
        }
    }
    Tensor::new(vec![c, s, h, w], data)
}
