//! Log-mel spectrogram frontend and fixed-width chunking.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty audio clip".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// STFT and filterbank settings. Window and hop are 25 ms and 12.5 ms of
/// the sample rate; the FFT length is the next power of two.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelConfig {
    pub fn new(sample_rate: u32, n_mels: usize) -> Self {
        let window = (0.025 * sample_rate as f64).round() as usize;
        let hop = (0.0125 * sample_rate as f64).round() as usize;
        Self {
            sample_rate,
            window,
            hop,
            n_fft: window.next_power_of_two(),
            n_mels,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
        }
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    fn mel_points_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// Peak frequency of mel filter `j`.
    pub fn center_hz(&self, j: usize) -> f64 {
        self.mel_points_hz()[j + 1]
    }

    /// Triangular filter weights, `[n_mels][n_fft/2 + 1]`.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let pts = self.mel_points_hz();
        let bins = self.n_fft / 2 + 1;
        let bin_hz = self.sample_rate as f64 / self.n_fft as f64;
        (0..self.n_mels)
            .map(|j| {
                let (l, c, r) = (pts[j], pts[j + 1], pts[j + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mel-filtered power spectrogram before compression, `[frames][n_mels]`.
pub fn mel_power(clip: &AudioClip, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    if clip.sample_rate() != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "clip rate {} != frontend rate {}",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    let n = clip.samples().len();
    if n < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "clip of {n} samples is shorter than one {}-sample window",
            cfg.window
        )));
    }
    let frames = cfg.frame_count(n);
    let win = hann(cfg.window);
    let fb = cfg.filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let seg = &clip.samples()[t * cfg.hop..t * cfg.hop + cfg.window];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < cfg.window { seg[i] * win[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        out.push(fb.iter().map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum()).collect());
    }
    Ok(out)
}

/// `log(1 + mel power)`, `[frames][n_mels]`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let mut m = mel_power(clip, cfg)?;
    for row in &mut m {
        for v in row.iter_mut() {
            *v = v.ln_1p();
        }
    }
    Ok(m)
}

/// Splits `[frames][F]` into `[1, F, len]` images (mel bins down, time
/// across), zero-padding the last one on the time axis.
pub fn chunk_spectrogram(frames: &[Vec<f64>], len: usize) -> Result<Vec<Tensor>> {
    if frames.is_empty() || len == 0 {
        return Err(Error::InvalidArgument("nothing to chunk".into()));
    }
    let f = frames[0].len();
    if f == 0 || frames.iter().any(|r| r.len() != f) {
        return Err(Error::InvalidArgument("ragged or empty spectrogram rows".into()));
    }
    Ok(frames
        .chunks(len)
        .map(|chunk| {
            Tensor::from_fn(vec![1, f, len], |i| {
                let (bin, t) = (i / len, i % len);
                chunk.get(t).map_or(0.0, |row| row[bin])
            })
        })
        .collect())
}
