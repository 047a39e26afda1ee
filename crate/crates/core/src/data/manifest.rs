//! Sample manifests (JSON lines) and seeded train/valid/test splits.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    /// Multi-hot, one entry per class.
    pub labels: Vec<u8>,
    /// Generator seed for the sample.
    pub seed: u64,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Manifest {
    /// `n` class-balanced synthetic records (class `i mod classes`), split
    /// 70/10/20 with `seed`.
    pub fn synthetic(n: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        let records = (0..n)
            .map(|i| {
                let class = i % classes;
                let mut labels = vec![0; classes];
                labels[class] = 1;
                ManifestRecord {
                    id: format!("s{i:05}"),
                    split: Split::Train,
                    labels,
                    seed: splitmix(seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)),
                    class,
                }
            })
            .collect();
        split_manifest(records, [0.7, 0.1, 0.2], seed)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn classes(&self) -> usize {
        self.records.first().map_or(0, |r| r.labels.len())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut records: Vec<ManifestRecord> = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
            records.push(r);
        }
        let mut ids = std::collections::HashSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate manifest id `{}`", r.id)));
            }
        }
        if let Some(first) = records.first() {
            if records.iter().any(|r| r.labels.len() != first.labels.len()) {
                return Err(Error::Format("manifest label vectors differ in length".into()));
            }
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Split sizes for `n` records: valid and test are rounded to nearest,
/// train takes the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let valid = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    [n - valid - test, valid, test]
}

/// Seeded shuffle, then contiguous train / valid / test slices.
pub fn split_manifest(mut records: Vec<ManifestRecord>, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    if records.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "{} records is too few to split",
            records.len()
        )));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must sum to 1")));
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [train, valid, _] = split_counts(records.len(), fractions);
    for (i, r) in records.iter_mut().enumerate() {
        r.split = if i < train {
            Split::Train
        } else if i < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(Manifest { records })
}

/// Per-class `negatives / positives` over the train split. A class with no
/// positives gets `cap`.
pub fn pos_weights(manifest: &Manifest, cap: f64) -> Vec<f64> {
    let classes = manifest.classes();
    let train = manifest.split(Split::Train);
    (0..classes)
        .map(|c| {
            let pos = train.iter().filter(|r| r.labels[c] != 0).count();
            let neg = train.len() - pos;
            if pos == 0 {
                log::warn!("class {c} has no positive training samples; pos_weight set to {cap}");
                cap
            } else {
                (neg as f64 / pos as f64).min(cap)
            }
        })
        .collect()
}
