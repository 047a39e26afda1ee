//! Flat `key = value` configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::MaskGradient;
use crate::data::SynthConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Fe2e,
    Mesm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fe2e => "fe2e",
            Mode::Mesm => "mesm",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fe2e" => Ok(Mode::Fe2e),
            "mesm" => Ok(Mode::Mesm),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected fe2e or mesm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Audio => 'A',
            Modality::Visual => 'V',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A nonempty subset of the three modalities, written as letters (`TAV`,
/// `TV`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Modalities([bool; 3]);

impl Modalities {
    pub fn all() -> Self {
        Self([true; 3])
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.iter() {
            write!(f, "{}", m.letter())?;
        }
        Ok(())
    }
}

impl FromStr for Modalities {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = [false; 3];
        for ch in s.trim().chars() {
            let m = match ch.to_ascii_uppercase() {
                'T' => Modality::Text,
                'A' => Modality::Audio,
                'V' => Modality::Visual,
                _ => return Err(Error::Config(format!("unknown modality `{ch}` in `{s}`"))),
            };
            if set[m.index()] {
                return Err(Error::Config(format!("modality `{ch}` repeated in `{s}`")));
            }
            set[m.index()] = true;
        }
        if set.iter().all(|b| !b) {
            return Err(Error::Config("empty modality set".into()));
        }
        Ok(Self(set))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub mask_gradient: MaskGradient,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of convolution blocks after the stem.
    pub blocks: usize,
    pub top_p: f64,
    /// Attention width `k`.
    pub attn_width: usize,
    pub stem_channels: usize,
    /// Output channels of each block.
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub vocab: usize,
    /// Longest token sequence after CLS.
    pub max_text_len: usize,
    /// Longest frame / chunk sequence.
    pub max_seq_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pos_weight_cap: f64,
    pub modalities: Modalities,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mesm,
            mask_gradient: MaskGradient::Faithful,
            d_model: 64,
            heads: 4,
            layers: 4,
            blocks: 3,
            top_p: 0.7,
            attn_width: 8,
            stem_channels: 8,
            block_channels: vec![16, 32, 64],
            kernel: 3,
            classes: 6,
            vocab: 64,
            max_text_len: 32,
            max_seq_len: 16,
            lr: 5e-5,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            pos_weight_cap: 100.0,
            modalities: Modalities::all(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.block_channels.len() != self.blocks {
            return bad(format!(
                "{} block channel widths for {} blocks",
                self.block_channels.len(),
                self.blocks
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("attn_width", self.attn_width),
            ("stem_channels", self.stem_channels),
            ("classes", self.classes),
            ("vocab", self.vocab),
            ("max_text_len", self.max_text_len),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.block_channels.contains(&0) {
            return bad("block channel widths must be positive".into());
        }
        if self.vocab < 3 {
            return bad("vocab must hold PAD, CLS and UNK".into());
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.pos_weight_cap.is_nan() || self.pos_weight_cap <= 0.0 {
            return bad("lr must be >= 0 and pos_weight_cap > 0".into());
        }
        if self.mode == Mode::Mesm && !self.modalities.contains(Modality::Text) {
            return bad(format!(
                "mesm needs the text modality as attention query; got `{}`",
                self.modalities
            ));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn take<T: FromStr>(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = kv.remove(key) {
        *slot = v
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))?;
    }
    Ok(())
}

/// Model and data settings read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    /// Synthetic records generated by `gen-data`.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: SynthConfig::default(),
            samples: 857,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let mut c = Self::default();
        let m = &mut c.model;
        if let Some(v) = kv.remove("mode") {
            m.mode = v.parse()?;
        }
        if let Some(v) = kv.remove("mask_gradient") {
            m.mask_gradient = match v.as_str() {
                "faithful" => MaskGradient::Faithful,
                "soft" => MaskGradient::Soft,
                _ => return Err(Error::Config(format!("mask_gradient `{v}` (expected faithful or soft)"))),
            };
        }
        if let Some(v) = kv.remove("block_channels") {
            m.block_channels = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad block_channels `{v}`")))?;
        }
        if let Some(v) = kv.remove("modalities") {
            m.modalities = v.parse()?;
        }
        take(&mut kv, "d_model", &mut m.d_model)?;
        take(&mut kv, "heads", &mut m.heads)?;
        take(&mut kv, "layers", &mut m.layers)?;
        take(&mut kv, "blocks", &mut m.blocks)?;
        take(&mut kv, "top_p", &mut m.top_p)?;
        take(&mut kv, "attn_width", &mut m.attn_width)?;
        take(&mut kv, "stem_channels", &mut m.stem_channels)?;
        take(&mut kv, "kernel", &mut m.kernel)?;
        take(&mut kv, "classes", &mut m.classes)?;
        take(&mut kv, "vocab", &mut m.vocab)?;
        take(&mut kv, "max_text_len", &mut m.max_text_len)?;
        take(&mut kv, "max_seq_len", &mut m.max_seq_len)?;
        take(&mut kv, "lr", &mut m.lr)?;
        take(&mut kv, "batch_size", &mut m.batch_size)?;
        take(&mut kv, "epochs", &mut m.epochs)?;
        take(&mut kv, "seed", &mut m.seed)?;
        take(&mut kv, "pos_weight_cap", &mut m.pos_weight_cap)?;
        let d = &mut c.data;
        d.classes = m.classes;
        d.vocab = m.vocab;
        take(&mut kv, "frames", &mut d.frames)?;
        take(&mut kv, "frame_size", &mut d.frame_size)?;
        take(&mut kv, "audio_seconds", &mut d.audio_seconds)?;
        take(&mut kv, "sample_rate", &mut d.sample_rate)?;
        take(&mut kv, "n_mels", &mut d.n_mels)?;
        take(&mut kv, "chunk_len", &mut d.chunk_len)?;
        take(&mut kv, "text_len", &mut d.text_len)?;
        take(&mut kv, "motif_rate", &mut d.motif_rate)?;
        take(&mut kv, "pixel_noise", &mut d.pixel_noise)?;
        take(&mut kv, "blob_amp", &mut d.blob_amp)?;
        take(&mut kv, "distractor_amp", &mut d.distractor_amp)?;
        take(&mut kv, "tint", &mut d.tint)?;
        take(&mut kv, "tone_amp", &mut d.tone_amp)?;
        take(&mut kv, "audio_noise", &mut d.audio_noise)?;
        take(&mut kv, "samples", &mut c.samples)?;
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        c.model.validate()?;
        c.data.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialises back to the `key = value` format.
    pub fn to_kv(&self) -> String {
        let (m, d) = (&self.model, &self.data);
        let channels: Vec<String> = m.block_channels.iter().map(|c| c.to_string()).collect();
        let mask = match m.mask_gradient {
            MaskGradient::Faithful => "faithful",
            MaskGradient::Soft => "soft",
        };
        let lines = [
            format!("mode = {}", m.mode),
            format!("mask_gradient = {mask}"),
            format!("d_model = {}", m.d_model),
            format!("heads = {}", m.heads),
            format!("layers = {}", m.layers),
            format!("blocks = {}", m.blocks),
            format!("top_p = {}", m.top_p),
            format!("attn_width = {}", m.attn_width),
            format!("stem_channels = {}", m.stem_channels),
            format!("block_channels = {}", channels.join(",")),
            format!("kernel = {}", m.kernel),
            format!("classes = {}", m.classes),
            format!("vocab = {}", m.vocab),
            format!("max_text_len = {}", m.max_text_len),
            format!("max_seq_len = {}", m.max_seq_len),
            format!("lr = {}", m.lr),
            format!("batch_size = {}", m.batch_size),
            format!("epochs = {}", m.epochs),
            format!("seed = {}", m.seed),
            format!("pos_weight_cap = {}", m.pos_weight_cap),
            format!("modalities = {}", m.modalities),
            format!("frames = {}", d.frames),
            format!("frame_size = {}", d.frame_size),
            format!("audio_seconds = {}", d.audio_seconds),
            format!("sample_rate = {}", d.sample_rate),
            format!("n_mels = {}", d.n_mels),
            format!("chunk_len = {}", d.chunk_len),
            format!("text_len = {}", d.text_len),
            format!("motif_rate = {}", d.motif_rate),
            format!("pixel_noise = {}", d.pixel_noise),
            format!("blob_amp = {}", d.blob_amp),
            format!("distractor_amp = {}", d.distractor_amp),
            format!("tint = {}", d.tint),
            format!("tone_amp = {}", d.tone_amp),
            format!("audio_noise = {}", d.audio_noise),
            format!("samples = {}", self.samples),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
