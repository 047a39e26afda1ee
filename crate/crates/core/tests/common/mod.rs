#![allow(dead_code)]

use mesm::data::Manifest;
use mesm::harness::Dataset;
use mesm::model::RunConfig;
use mesm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model on the default synthetic data; trains in seconds per epoch.
pub const TOY: &str = "\
d_model = 32
heads = 2
layers = 2
stem_channels = 4
block_channels = 8,8,16
lr = 0.001
";

/// Tiny extents for finite-difference checks.
pub const TINY: &str = "\
d_model = 4
heads = 2
layers = 1
stem_channels = 2
block_channels = 2,2
blocks = 2
attn_width = 3
classes = 2
vocab = 16
frames = 1
frame_size = 8
audio_seconds = 0.1
n_mels = 12
chunk_len = 4
text_len = 3
";

pub fn config(base: &str, extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{base}{extra}")).unwrap()
}

/// 857 records give 600 train, 86 valid and 171 test samples.
pub fn toy_dataset(cfg: &RunConfig) -> Dataset {
    let manifest = Manifest::synthetic(cfg.samples, cfg.model.classes, 7).unwrap();
    Dataset::generate(&manifest, cfg).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Sort-and-accumulate top-p selection over one frame: indices by
/// descending score, ties by index, shortest prefix reaching `p`.
pub fn nucleus_oracle(scores: &[f64], candidates: &[bool], p: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| candidates[i]).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    if p >= 1.0 {
        for i in idx {
            keep[i] = true;
        }
        return keep;
    }
    let mut mass = 0.0;
    for i in idx {
        keep[i] = true;
        mass += scores[i];
        if mass >= p {
            break;
        }
    }
    keep
}

/// Plain loop convolution over `[C, S, H, W]`, per frame, zero-padded.
pub fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let [c, s, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [n, _, z, _] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let r = (z / 2) as isize;
    let mut out = vec![0.0; n * s * h * w];
    for o in 0..n {
        for si in 0..s {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (y, xx) = (hi as isize + dy, wi as isize + dx);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let kv = k.at(&[o, ci, (dy + r) as usize, (dx + r) as usize]);
                                acc += kv * x.at(&[ci, si, y as usize, xx as usize]);
                            }
                        }
                    }
                    out[((o * s + si) * h + hi) * w + wi] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, s, h, w], out).unwrap()
}

/// Number of active sites within the `z×z` window around each active site,
/// in row-major site order.
pub fn active_neighbours(bits: &[bool], [s, h, w]: [usize; 3], z: usize) -> Vec<u64> {
    let r = (z / 2) as isize;
    let mut out = Vec::new();
    for si in 0..s {
        for hi in 0..h {
            for wi in 0..w {
                if !bits[(si * h + hi) * w + wi] {
                    continue;
                }
                let mut a = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (y, x) = (hi as isize + dy, wi as isize + dx);
                        if y >= 0 && x >= 0 && y < h as isize && x < w as isize && bits[(si * h + y as usize) * w + x as usize] {
                            a += 1;
                        }
                    }
                }
                out.push(a);
            }
        }
    }
    out
}

pub fn random_bits(n: usize, density: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < density).collect()
}

pub mod grad;
