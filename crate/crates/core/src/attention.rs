//! Text-conditioned spatial attention, top-p site selection and the
//! cross-modal sparse convolution block built on them.
//!
//! For a feature stack `M [C, S, H, W]` and query `q [d]`:
//!
//! ```text
//! M_q    = tanh(W_m·M + b_m ⊕ W_q·q)          (k channels, ⊕ broadcasts over S,H,W)
//! scores = softmax_{H,W}(W_i·M_q + b_i)       per frame s
//! ```
//!
//! The top-p nucleus of each frame's scores becomes a binary mask; masked
//! features then pass through two submanifold convolutions and a sparse
//! max-pool.

use std::io::Write;
use std::sync::Arc;

use crate::autodiff::{Graph, SparseVar, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::sparse::{self, BinaryMap, FlopsLedger, SiteSet, SparseFeatureMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    values: Vec<f64>,
}

impl QueryVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty query vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query vector".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Names and sizes of one attention parameter group (`W_m [k,C]`,
/// `W_q [k,d]`, `W_i [k]`, `b_m [k]`, `b_i [1]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    prefix: String,
    pub channels: usize,
    pub query_dim: usize,
    pub width: usize,
}

impl AttentionParams {
    /// Describes an existing group under `prefix` without registering it.
    pub fn named(prefix: &str, channels: usize, query_dim: usize, width: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            query_dim,
            width,
        }
    }

    /// Registers freshly initialised parameters under `prefix`.
    ///
    /// `w_m` and `w_i` start non-negative, so on the relu'd feature maps the
    /// blocks see, a site's score is nondecreasing in every channel: the
    /// initial ranking favours strongly activated sites.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        query_dim: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        let p = Self::named(prefix, channels, query_dim, width);
        let non_negative = |name: &str, shape: &[usize], fan_in: usize| {
            let mut rng = crate::params::name_rng(seed, name);
            Tensor::uniform_fan_in(shape.to_vec(), fan_in, &mut rng).map(f64::abs)
        };
        store.insert(p.w_m(), non_negative(&p.w_m(), &[width, channels], channels))?;
        store.insert_uniform(&p.w_q(), &[width, query_dim], query_dim, seed)?;
        store.insert(p.w_i(), non_negative(&p.w_i(), &[width], width))?;
        store.insert(p.b_m(), Tensor::zeros(vec![width]))?;
        store.insert(p.b_i(), Tensor::zeros(vec![1]))?;
        Ok(p)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn w_m(&self) -> String {
        format!("{}/w_m", self.prefix)
    }

    pub fn w_q(&self) -> String {
        format!("{}/w_q", self.prefix)
    }

    pub fn w_i(&self) -> String {
        format!("{}/w_i", self.prefix)
    }

    pub fn b_m(&self) -> String {
        format!("{}/b_m", self.prefix)
    }

    pub fn b_i(&self) -> String {
        format!("{}/b_i", self.prefix)
    }

    pub fn names(&self) -> [String; 5] {
        [self.w_m(), self.w_q(), self.w_i(), self.b_m(), self.b_i()]
    }
}

/// Per-frame spatial probabilities, `[S, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScoreMap {
    extents: [usize; 3],
    scores: Vec<f64>,
}

impl AttentionScoreMap {
    pub fn new(extents: [usize; 3], scores: Vec<f64>) -> Result<Self> {
        if scores.len() != extents.iter().product::<usize>() {
            return Err(shape_err("AttentionScoreMap", "score count != S·H·W"));
        }
        Ok(Self { extents, scores })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [s, h, w] => Self::new([s, h, w], t.data().to_vec()),
            ref sh => Err(shape_err("AttentionScoreMap", format!("expected [S,H,W], got {sh:?}"))),
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let plane = self.extents[1] * self.extents[2];
        &self.scores[s * plane..(s + 1) * plane]
    }

    pub fn get(&self, s: usize, h: usize, w: usize) -> f64 {
        self.scores[(s * self.extents[1] + h) * self.extents[2] + w]
    }

    /// One CSV row `s,h,w,score` per position, after a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let [ss, hh, ww] = self.extents;
        writeln!(out, "s,h,w,score")?;
        for s in 0..ss {
            for h in 0..hh {
                for w in 0..ww {
                    writeln!(out, "{s},{h},{w},{}", self.get(s, h, w))?;
                }
            }
        }
        Ok(())
    }
}

/// Binary selection over `(S, H, W)` with at least one set bit per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    map: BinaryMap,
}

impl SparseMask {
    pub fn new(map: BinaryMap) -> Result<Self> {
        let [s, h, w] = map.extents();
        for si in 0..s {
            if !map.bits()[si * h * w..(si + 1) * h * w].iter().any(|&b| b) {
                return Err(Error::InvalidArgument(format!("mask frame {si} selects nothing")));
            }
        }
        Ok(Self { map })
    }

    pub fn map(&self) -> &BinaryMap {
        &self.map
    }

    pub fn extents(&self) -> [usize; 3] {
        self.map.extents()
    }

    pub fn get(&self, s: usize, h: usize, w: usize) -> bool {
        self.map.get(s, h, w)
    }

    pub fn count(&self) -> usize {
        self.map.count_ones()
    }

    /// Plain-text PGM of frame `s`: 255 where selected, 0 elsewhere.
    pub fn write_pgm(&self, s: usize, mut out: impl Write) -> std::io::Result<()> {
        let [_, hh, ww] = self.extents();
        writeln!(out, "P2\n{ww} {hh}\n255")?;
        for h in 0..hh {
            let row: Vec<&str> = (0..ww).map(|w| if self.get(s, h, w) { "255" } else { "0" }).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }

    /// Appends `layer,s,h,w` for each selected position.
    pub fn write_csv_rows(&self, layer: &str, mut out: impl Write) -> std::io::Result<()> {
        let [ss, hh, ww] = self.extents();
        for s in 0..ss {
            for h in 0..hh {
                for w in 0..ww {
                    if self.get(s, h, w) {
                        writeln!(out, "{layer},{s},{h},{w}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Records the score computation on `g`. `m` is `[C, S, H, W]`, `q` is `[d]`;
/// returns `[S, H, W]` scores. Positions where `allowed` is false get score
/// exactly zero.
pub fn attention_scores_graph(
    g: &mut Graph,
    params: &AttentionParams,
    m: Var,
    q: Var,
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let [c, s, h, w] = match *g.shape(m) {
        [c, s, h, w] => [c, s, h, w],
        ref sh => return Err(shape_err("attention_scores", format!("expected [C,S,H,W], got {sh:?}"))),
    };
    if c != params.channels {
        return Err(shape_err(
            "attention_scores",
            format!("map channels {c} != attention channels {}", params.channels),
        ));
    }
    if g.shape(q) != [params.query_dim] {
        return Err(shape_err(
            "attention_scores",
            format!("query {:?} != [{}]", g.shape(q), params.query_dim),
        ));
    }
    let k = params.width;
    let w_m = g.param(&params.w_m())?;
    let w_q = g.param(&params.w_q())?;
    let w_i = g.param(&params.w_i())?;
    let b_m = g.param(&params.b_m())?;
    let b_i = g.param(&params.b_i())?;

    let flat = g.reshape(m, &[c, s * h * w])?;
    let proj = g.matmul(w_m, flat)?;
    let qcol = g.reshape(q, &[params.query_dim, 1])?;
    let qk = g.matmul(w_q, qcol)?;
    let qk = g.reshape(qk, &[k])?;
    let shift = g.add(qk, b_m)?;
    let pre = g.add_col_broadcast(proj, shift)?;
    let mq = g.tanh(pre);
    let w_row = g.reshape(w_i, &[1, k])?;
    let logits = g.matmul(w_row, mq)?;
    let logits = g.add_col_broadcast(logits, b_i)?;
    let logits = g.reshape(logits, &[s, h, w])?;
    g.softmax(logits, &[1, 2], allowed)
}

/// Scores for a dense map and query, without recording gradients.
pub fn attention_scores(
    m: &Tensor,
    q: &QueryVector,
    store: &ParamStore,
    params: &AttentionParams,
) -> Result<AttentionScoreMap> {
    let mut g = Graph::new(store);
    let mv = g.constant(m.clone());
    let qv = g.constant(Tensor::vector(q.values().to_vec())?);
    let out = attention_scores_graph(&mut g, params, mv, qv, None)?;
    AttentionScoreMap::from_tensor(g.value(out))
}

/// Deterministic top-p selection per frame: positions sorted by descending
/// score (ties in row-major order), keeping the shortest prefix whose mass
/// reaches `p`. `p = 1` keeps every candidate. Only positions set in
/// `allowed` are candidates.
pub fn nucleus_select(scores: &AttentionScoreMap, p: f64, allowed: Option<&BinaryMap>) -> Result<SparseMask> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top-p {p} outside (0, 1]")));
    }
    let [ss, hh, ww] = scores.extents();
    if let Some(a) = allowed {
        if a.extents() != [ss, hh, ww] {
            return Err(shape_err("nucleus_select", "allowed-map extents differ from scores"));
        }
    }
    let plane = hh * ww;
    let mut bits = vec![false; ss * plane];
    for s in 0..ss {
        let slice = scores.slice(s);
        let mut order: Vec<usize> = (0..plane)
            .filter(|&i| allowed.is_none_or(|a| a.bits()[s * plane + i]))
            .collect();
        if order.is_empty() {
            return Err(Error::InvalidArgument(format!("frame {s} has no candidate positions")));
        }
        order.sort_by(|&a, &b| slice[b].total_cmp(&slice[a]));
        let mut mass = 0.0;
        for &i in &order {
            bits[s * plane + i] = true;
            mass += slice[i];
            if p < 1.0 && mass >= p {
                break;
            }
        }
    }
    SparseMask::new(BinaryMap::new([ss, hh, ww], bits)?)
}

/// Keeps the masked positions of a dense `[C, S, H, W]` map.
pub fn apply_mask(mask: &SparseMask, m: &Tensor) -> Result<SparseFeatureMap> {
    sparse::to_sparse(m, mask.map())
}

/// How attention parameters see the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGradient {
    /// Binary mask; attention parameters receive no gradient.
    Faithful,
    /// Selected features are multiplied by their score.
    Soft,
}

/// Parameter names of one convolution block (two `z×z` convolutions) and,
/// for the sparse variant, its attention group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub attention: Option<AttentionParams>,
}

impl BlockParams {
    /// Registers the two convolutions and, when `attention` is
    /// `Some((d, k))`, an attention group over the block input.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        attention: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        let bp = Self {
            prefix: prefix.to_string(),
            in_channels,
            out_channels,
            kernel,
            attention: None,
        };
        let z2 = kernel * kernel;
        store.insert_uniform(&bp.kernel_name(1), &[out_channels, in_channels, kernel, kernel], in_channels * z2, seed)?;
        store.insert(bp.bias_name(1), Tensor::zeros(vec![out_channels]))?;
        store.insert_uniform(&bp.kernel_name(2), &[out_channels, out_channels, kernel, kernel], out_channels * z2, seed)?;
        store.insert(bp.bias_name(2), Tensor::zeros(vec![out_channels]))?;
        let attention = match attention {
            Some((d, k)) => Some(AttentionParams::register(
                store,
                &format!("{prefix}/attn"),
                in_channels,
                d,
                k,
                seed,
            )?),
            None => None,
        };
        Ok(Self { attention, ..bp })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn kernel_name(&self, i: usize) -> String {
        format!("{}/conv{i}/k", self.prefix)
    }

    pub fn bias_name(&self, i: usize) -> String {
        format!("{}/conv{i}/b", self.prefix)
    }

    pub fn layer_id(&self, i: usize) -> String {
        format!("{}/conv{i}", self.prefix)
    }
}

pub enum BlockInput {
    Dense(Var),
    Sparse(SparseVar),
}

/// What a sparse block selected, for inspection and mask dumps.
pub struct BlockTrace {
    pub scores: Var,
    pub mask: SparseMask,
}

/// Attention → top-p mask → masked features → two submanifold convolutions
/// with relu → sparse max-pool. Sparse inputs are densified (zeros at
/// inactive sites) for the score computation and their inactive sites are
/// excluded from selection.
pub fn crossmodal_block(
    g: &mut Graph,
    bp: &BlockParams,
    input: &BlockInput,
    q: Var,
    p: f64,
    mode: MaskGradient,
    ledger: &mut FlopsLedger,
) -> Result<(SparseVar, BlockTrace)> {
    let attn = bp
        .attention
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("block `{}` has no attention parameters", bp.prefix)))?;
    let (m, allowed) = match input {
        BlockInput::Dense(v) => (*v, None),
        BlockInput::Sparse(sv) => (g.densify(sv), Some(sv.sites.to_map())),
    };
    let scores = attention_scores_graph(g, attn, m, q, allowed.as_ref().map(|a| a.bits()))?;
    let score_map = AttentionScoreMap::from_tensor(g.value(scores))?;
    let mask = nucleus_select(&score_map, p, allowed.as_ref())?;
    let sites = Arc::new(SiteSet::from_map(mask.map()));
    let mut x = g.to_sparse(m, Arc::clone(&sites))?;
    if mode == MaskGradient::Soft {
        let [s, h, w] = score_map.extents();
        let sc = g.reshape(scores, &[1, s, h, w])?;
        let picked = g.to_sparse(sc, Arc::clone(&sites))?;
        let picked = g.reshape(picked.features, &[sites.len()])?;
        x.features = g.scale_rows(x.features, picked)?;
    }
    for i in 1..=2 {
        let k = g.param(&bp.kernel_name(i))?;
        let b = g.param(&bp.bias_name(i))?;
        let (y, macs) = g.submanifold_conv(&x, k, b)?;
        ledger.record(&bp.layer_id(i), macs);
        x = g.sparse_activation(&y, crate::ops::Activation::Relu);
    }
    let out = g.sparse_maxpool(&x);
    Ok((out, BlockTrace { scores, mask }))
}

/// Dense twin of [`crossmodal_block`]: two same-padded convolutions with relu
/// and a 2×2 max-pool over `[C, S, H, W]`.
pub fn dense_block(g: &mut Graph, bp: &BlockParams, x: Var, ledger: &mut FlopsLedger) -> Result<Var> {
    let pad = (bp.kernel - 1) / 2;
    let mut x = x;
    for i in 1..=2 {
        let k = g.param(&bp.kernel_name(i))?;
        let b = g.param(&bp.bias_name(i))?;
        let (y, macs) = g.conv2d(x, k, b, pad)?;
        ledger.record(&bp.layer_id(i), macs);
        x = g.relu(y);
    }
    g.maxpool2(x)
}
