//! Synthetic three-modality dataset with class-specific planted regions.
//!
//! Class `c` places a bright blob inside region `R_c` of every frame (a
//! 2×3 grid over the image), tones inside a class-specific band of mel
//! filters, and a two-token motif in the text. Everything else is noise
//! plus a weaker distractor blob and tone at random places, so a model has
//! to find where the evidence is rather than how much of it there is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mel::{chunk_spectrogram, mel_spectrogram, AudioClip, MelConfig};
use super::ModalitySample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Frames per sample.
    pub frames: usize,
    /// Frame height and width.
    pub frame_size: usize,
    pub audio_seconds: f64,
    pub sample_rate: u32,
    pub n_mels: usize,
    /// Spectrogram frames per chunk.
    pub chunk_len: usize,
    /// Tokens after CLS.
    pub text_len: usize,
    pub vocab: usize,
    /// Probability that the class motif appears in the text.
    pub motif_rate: f64,
    pub pixel_noise: f64,
    pub blob_amp: f64,
    pub distractor_amp: f64,
    /// Per-class colour offset on the background.
    pub tint: f64,
    pub tone_amp: f64,
    pub audio_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            frames: 2,
            frame_size: 16,
            audio_seconds: 0.8,
            sample_rate: 16000,
            n_mels: 32,
            chunk_len: 32,
            text_len: 8,
            vocab: 64,
            motif_rate: 0.75,
            pixel_noise: 0.1,
            blob_amp: 1.0,
            distractor_amp: 0.5,
            tint: 0.001,
            tone_amp: 0.05,
            audio_noise: 0.01,
        }
    }
}

/// Half-open pixel rectangle `[h0, h1) × [w0, w1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl Region {
    pub fn contains(&self, h: f64, w: f64) -> bool {
        h >= self.h0 as f64 && h < self.h1 as f64 && w >= self.w0 as f64 && w < self.w1 as f64
    }
}

const BLOB_SIGMA: f64 = 1.2;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 6 {
            return Err(Error::InvalidArgument("synthetic data supports 1..=6 classes".into()));
        }
        if self.frame_size < 6 || self.frames == 0 || self.text_len < 2 {
            return Err(Error::InvalidArgument("synthetic extents too small".into()));
        }
        if self.n_mels < 5 * self.classes + 2 {
            return Err(Error::InvalidArgument("too few mel bins for the class bands".into()));
        }
        if self.vocab < self.filler_start() + 1 {
            return Err(Error::InvalidArgument("vocabulary too small for motifs".into()));
        }
        Ok(())
    }

    /// Planted frame region for class `c`.
    pub fn region(&self, c: usize) -> Region {
        let n = self.frame_size;
        let (row, col) = (c / 3, c % 3);
        Region {
            h0: row * n / 2,
            h1: (row + 1) * n / 2,
            w0: col * n / 3,
            w1: (col + 1) * n / 3,
        }
    }

    /// Mel filters carrying class `c`'s tones.
    pub fn band(&self, c: usize) -> std::ops::Range<usize> {
        3 + 5 * c..6 + 5 * c
    }

    pub fn motif(&self, c: usize) -> [usize; 2] {
        [3 + 2 * c, 4 + 2 * c]
    }

    fn filler_start(&self) -> usize {
        3 + 2 * self.classes
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig::new(self.sample_rate, self.n_mels)
    }
}

/// A generated sample with the planted blob centre of each frame.
pub struct SynthOutput {
    pub sample: ModalitySample,
    pub blob_centers: Vec<(f64, f64)>,
}

fn add_blob(img: &mut [f64], n: usize, ch: usize, (ch_, cw): (f64, f64), amp: f64) {
    for c in 0..ch {
        for h in 0..n {
            for w in 0..n {
                let d2 = (h as f64 - ch_).powi(2) + (w as f64 - cw).powi(2);
                img[(c * n + h) * n + w] += amp * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
            }
        }
    }
}

fn sample_rng(class: usize, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ class as u64)
}

pub fn synth_sample(class: usize, seed: u64, cfg: &SynthConfig) -> Result<ModalitySample> {
    Ok(synth_sample_detailed(class, seed, cfg)?.sample)
}

pub fn synth_sample_detailed(class: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    if class >= cfg.classes {
        return Err(Error::InvalidArgument(format!("class {class} >= {}", cfg.classes)));
    }
    let mut rng = sample_rng(class, seed);
    let n = cfg.frame_size;
    let region = cfg.region(class);
    let noise = Normal::new(0.0, cfg.pixel_noise).expect("finite std");

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut centers = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let mut img = vec![0.0; 3 * n * n];
        for c in 0..3 {
            let tint = if (class + c).is_multiple_of(3) { cfg.tint } else { 0.0 };
            for v in &mut img[c * n * n..(c + 1) * n * n] {
                *v = 0.2 + tint + noise.sample(&mut rng);
            }
        }
        let center = (
            rng.random_range(region.h0 as f64 + 0.5..region.h1 as f64 - 0.5),
            rng.random_range(region.w0 as f64 + 0.5..region.w1 as f64 - 0.5),
        );
        add_blob(&mut img, n, 3, center, cfg.blob_amp);
        let distractor = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        add_blob(&mut img, n, 3, distractor, cfg.distractor_amp);
        frames.push(Tensor::new(vec![3, n, n], img)?);
        centers.push(center);
    }

    let mel = cfg.mel();
    let len = (cfg.audio_seconds * cfg.sample_rate as f64).round() as usize;
    let sr = cfg.sample_rate as f64;
    let band = cfg.band(class);
    let tones: Vec<(f64, f64)> = (0..2)
        .map(|_| {
            let j = rng.random_range(band.clone());
            (mel.center_hz(j), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let dj = loop {
        let j = rng.random_range(1..cfg.n_mels - 1);
        if !band.contains(&j) {
            break j;
        }
    };
    let distractor = (mel.center_hz(dj), rng.random_range(0.0..std::f64::consts::TAU));
    let anoise = Normal::new(0.0, cfg.audio_noise).expect("finite std");
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = tones
                .iter()
                .map(|(f, ph)| cfg.tone_amp * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            let d = 0.5 * cfg.tone_amp * (std::f64::consts::TAU * distractor.0 * t + distractor.1).sin();
            tone + d + anoise.sample(&mut rng)
        })
        .collect();
    let spec = mel_spectrogram(&AudioClip::new(samples, cfg.sample_rate)?, &mel)?;
    let audio = chunk_spectrogram(&spec, cfg.chunk_len)?;

    let mut tokens = Vec::with_capacity(cfg.text_len + 1);
    tokens.push(CLS);
    for _ in 0..cfg.text_len {
        tokens.push(rng.random_range(cfg.filler_start()..cfg.vocab));
    }
    if rng.random::<f64>() < cfg.motif_rate {
        let at = rng.random_range(1..cfg.text_len);
        let [a, b] = cfg.motif(class);
        tokens[at] = a;
        tokens[at + 1] = b;
    }

    let mut labels = vec![0.0; cfg.classes];
    labels[class] = 1.0;
    Ok(SynthOutput {
        sample: ModalitySample {
            tokens,
            audio,
            frames,
            labels,
        },
        blob_centers: centers,
    })
}
