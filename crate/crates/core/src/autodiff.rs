//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built for one forward evaluation. Every operation appends a
//! node holding its output value and an [`Op`] entry with whatever the
//! backward pass needs (inputs by handle, saved intermediates). Parameters are
//! read from a borrowed [`ParamStore`] snapshot; [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar output with respect
//! to every node. The tape is dropped with the graph.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Activation, ConvGeom};
use crate::params::ParamStore;
use crate::sparse::{self, ConvSpec, MacCount, Rulebook, SiteSet};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse features on the tape: a `[active, C]` node plus its site set.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub sites: Arc<SiteSet>,
    pub features: Var,
    pub channels: usize,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Act { x: Var, f: Activation },
    Softmax { x: Var, groups: Rc<Vec<usize>>, n_groups: usize },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AddColBroadcast { x: Var, v: Var },
    FramesToRows { x: Var },
    Gather { x: Var, sites: Arc<SiteSet> },
    Scatter { x: Var, sites: Arc<SiteSet> },
    SubConv { x: Var, k: Var, b: Var, rb: Arc<Rulebook>, spec: ConvSpec },
    SparsePool { x: Var, argmax: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    WeightedBce { logits: Var, labels: Vec<f64>, pos_weight: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Act { f: Activation::Relu, .. } => "relu",
            Op::Act { f: Activation::Tanh, .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::AddColBroadcast { .. } => "add_col_broadcast",
            Op::FramesToRows { .. } => "frames_to_rows",
            Op::Gather { .. } => "to_sparse",
            Op::Scatter { .. } => "densify",
            Op::SubConv { .. } => "submanifold_conv",
            Op::SparsePool { .. } => "sparse_maxpool",
            Op::ScaleRows { .. } => "scale_rows",
            Op::WeightedBce { .. } => "weighted_bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    scope: Rc<str>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    scope: Rc<str>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient at a node; `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// Gradients of every parameter read by the graph. Parameters that were
    /// read but received no gradient appear as zeros.
    pub fn into_param_grads(mut self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            let g = self.nodes[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(store.get(&name).expect("param in store").shape().to_vec()));
            out.insert(name, g);
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            scope: Rc::from(""),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Label attached to nodes recorded from now on (used in diagnostics).
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = Rc::from(scope);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            scope: Rc::clone(&self.scope),
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Reads a parameter; repeated reads of the same name share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.push(t, Op::Param, true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// First node (in evaluation order) holding a non-finite value, as
    /// `(scope, op name)`.
    pub fn first_non_finite(&self) -> Option<(String, &'static str)> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| (n.scope.to_string(), n.op.name()))
    }

    // -----------------------------------------------------------------------
    // elementwise and shape ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::from_raw(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let t = ops::pointwise(self.value(x), f);
        let ng = self.ng(&[x]);
        self.push(t, Op::Act { x, f }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    // -----------------------------------------------------------------------
    // linear algebra

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let t = ops::affine(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Affine { x, w, b }, ng))
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = ops::check_matrix("matmul", self.value(a))?;
        let (k2, n) = ops::check_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents {k} vs {k2}")));
        }
        let data = ops::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::MatMul { a, b }, ng))
    }

    /// `a [m,k] · b [n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = ops::check_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = ops::check_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("inner extents {k} vs {k2}")));
        }
        let data = ops::matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::MatMulNT { a, b }, ng))
    }

    /// `x [k,P] + v [k]` broadcast over columns.
    pub fn add_col_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (k, p) = ops::check_matrix("add_col_broadcast", self.value(x))?;
        if self.shape(v) != [k] {
            return Err(shape_err("add_col_broadcast", format!("vector {:?} vs rows {k}", self.shape(v))));
        }
        let vx = self.value(x).data();
        let vv = self.value(v).data();
        let data = (0..k * p).map(|i| vx[i] + vv[i / p]).collect();
        let ng = self.ng(&[x, v]);
        Ok(self.push(Tensor::from_raw(vec![k, p], data), Op::AddColBroadcast { x, v }, ng))
    }

    // -----------------------------------------------------------------------
    // convolution / pooling

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, pad: usize) -> Result<(Var, MacCount)> {
        let (t, macs) = ops::conv2d(self.value(x), self.value(k), self.value(b), pad)?;
        let geom = ops::conv_geom(self.value(x), self.value(k), self.value(b), pad)?;
        let ng = self.ng(&[x, k, b]);
        Ok((self.push(t, Op::Conv2d { x, k, b, geom }, ng), macs))
    }

    /// 2×2/stride-2 max-pooling over the two trailing axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (t, argmax) = ops::maxpool2(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, ng))
    }

    // -----------------------------------------------------------------------
    // normalisation

    /// Softmax over `axes` jointly. Entries where `allowed` is false get
    /// exactly zero probability and no gradient.
    pub fn softmax(&mut self, x: Var, axes: &[usize], allowed: Option<&[bool]>) -> Result<Var> {
        let (groups, n_groups) = ops::softmax_groups(self.shape(x), axes)?;
        if let Some(a) = allowed {
            if a.len() != self.value(x).numel() {
                return Err(shape_err("softmax", "allowed mask length != element count"));
            }
        }
        let y = ops::softmax_grouped(self.value(x).data(), &groups, n_groups, allowed);
        let t = Tensor::from_raw(self.shape(x).to_vec(), y);
        let ng = self.ng(&[x]);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                groups: Rc::new(groups),
                n_groups,
            },
            ng,
        ))
    }

    /// Layer norm over the trailing axis with gain `g` and shift `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err("layer_norm", format!("gain/shift must be [{d}]")));
        }
        let (y, xhat, rstd) = ops::layer_norm_raw(self.value(x).data(), d, self.value(g).data(), self.value(b).data());
        let t = Tensor::from_raw(self.shape(x).to_vec(), y);
        let ng = self.ng(&[x, g, b]);
        Ok(self.push(t, Op::LayerNorm { x, g, b, xhat, rstd }, ng))
    }

    // -----------------------------------------------------------------------
    // indexing

    /// Rows `ids` of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = ops::check_matrix("gather_rows", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::from_raw(vec![ids.len(), d], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = ops::check_matrix("slice_cols", self.value(x))?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", format!("{start}+{len} out of {c} columns")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_raw(vec![r, len], data), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = ops::check_matrix("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = ops::check_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_raw(vec![r, total], data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = ops::check_matrix("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = ops::check_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_raw(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `[C, S, H, W]` → `[S, C·H·W]`: one flattened row per sequence element.
    pub fn frames_to_rows(&mut self, x: Var) -> Result<Var> {
        let [c, s, h, w] = match *self.shape(x) {
            [c, s, h, w] => [c, s, h, w],
            ref sh => return Err(shape_err("frames_to_rows", format!("expected [C,S,H,W], got {sh:?}"))),
        };
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for ci in 0..c {
            for si in 0..s {
                let from = &src[(ci * s + si) * plane..][..plane];
                data[si * c * plane + ci * plane..][..plane].copy_from_slice(from);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_raw(vec![s, c * plane], data), Op::FramesToRows { x }, ng))
    }

    /// `x [n, C] * s [n]` row-wise.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c) = ops::check_matrix("scale_rows", self.value(x))?;
        if self.shape(s) != [n] {
            return Err(shape_err("scale_rows", format!("scales {:?} vs rows {n}", self.shape(s))));
        }
        let (vx, vs) = (self.value(x).data(), self.value(s).data());
        let data = (0..n * c).map(|i| vx[i] * vs[i / c]).collect();
        let ng = self.ng(&[x, s]);
        Ok(self.push(Tensor::from_raw(vec![n, c], data), Op::ScaleRows { x, s }, ng))
    }

    // -----------------------------------------------------------------------
    // sparse

    /// Gathers the active sites of a dense `[C, S, H, W]` node.
    pub fn to_sparse(&mut self, x: Var, sites: Arc<SiteSet>) -> Result<SparseVar> {
        let [c, s, h, w] = match *self.shape(x) {
            [c, s, h, w] => [c, s, h, w],
            ref sh => return Err(shape_err("to_sparse", format!("expected [C,S,H,W], got {sh:?}"))),
        };
        if sites.extents() != [s, h, w] {
            return Err(shape_err(
                "to_sparse",
                format!("site extents {:?} != map (S,H,W) {:?}", sites.extents(), [s, h, w]),
            ));
        }
        let data = sparse::gather(self.value(x).data(), &sites, c);
        let n = sites.len();
        let ng = self.ng(&[x]);
        let features = self.push(
            Tensor::from_raw(vec![n, c], data),
            Op::Gather {
                x,
                sites: Arc::clone(&sites),
            },
            ng,
        );
        Ok(SparseVar {
            sites,
            features,
            channels: c,
        })
    }

    /// Dense `[C, S, H, W]` view of sparse features, zeros at inactive sites.
    pub fn densify(&mut self, x: &SparseVar) -> Var {
        let [s, h, w] = x.sites.extents();
        let data = sparse::scatter(self.value(x.features).data(), &x.sites, x.channels);
        let ng = self.ng(&[x.features]);
        self.push(
            Tensor::from_raw(vec![x.channels, s, h, w], data),
            Op::Scatter {
                x: x.features,
                sites: Arc::clone(&x.sites),
            },
            ng,
        )
    }

    pub fn submanifold_conv(&mut self, x: &SparseVar, k: Var, b: Var) -> Result<(SparseVar, MacCount)> {
        let kshape = self.shape(k).to_vec();
        let spec = match kshape[..] {
            [n, m, z, z2] if z == z2 => ConvSpec::new(z, m, n)?,
            _ => return Err(shape_err("submanifold_conv", format!("kernel shape {kshape:?}"))),
        };
        if x.channels != spec.m {
            return Err(shape_err(
                "submanifold_conv",
                format!("input channels {} != kernel m {}", x.channels, spec.m),
            ));
        }
        if self.shape(b) != [spec.n] {
            return Err(shape_err("submanifold_conv", format!("bias {:?} != [{}]", self.shape(b), spec.n)));
        }
        let rb = x.sites.rulebook(spec.z);
        let n = x.sites.len();
        let out = sparse::submanifold_forward(&rb, n, self.value(x.features).data(), self.value(k).data(), self.value(b).data(), &spec);
        let macs = sparse::submanifold_macs(&x.sites, &rb, &spec);
        let ng = self.ng(&[x.features, k, b]);
        let features = self.push(
            Tensor::from_raw(vec![n, spec.n], out),
            Op::SubConv {
                x: x.features,
                k,
                b,
                rb,
                spec,
            },
            ng,
        );
        Ok((
            SparseVar {
                sites: Arc::clone(&x.sites),
                features,
                channels: spec.n,
            },
            macs,
        ))
    }

    pub fn sparse_activation(&mut self, x: &SparseVar, f: Activation) -> SparseVar {
        SparseVar {
            sites: Arc::clone(&x.sites),
            features: self.activation(x.features, f),
            channels: x.channels,
        }
    }

    pub fn sparse_maxpool(&mut self, x: &SparseVar) -> SparseVar {
        let (sites, children) = x.sites.pooled();
        let (out, argmax) = sparse::pool_forward(self.value(x.features).data(), x.channels, &children);
        let n = sites.len();
        let ng = self.ng(&[x.features]);
        let features = self.push(
            Tensor::from_raw(vec![n, x.channels], out),
            Op::SparsePool {
                x: x.features,
                argmax,
            },
            ng,
        );
        SparseVar {
            sites: Arc::new(sites),
            features,
            channels: x.channels,
        }
    }

    // -----------------------------------------------------------------------
    // loss

    /// Mean over classes of
    /// `-[w·y·log σ(ℓ) + (1-y)·log(1-σ(ℓ))]`, computed in softplus form.
    pub fn weighted_bce(&mut self, logits: Var, labels: &[f64], pos_weight: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if labels.len() != n || pos_weight.len() != n {
            return Err(shape_err(
                "weighted_bce",
                format!("{n} logits, {} labels, {} weights", labels.len(), pos_weight.len()),
            ));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(labels)
            .zip(pos_weight)
            .map(|((&l, &y), &w)| w * y * softplus(-l) + (1.0 - y) * softplus(l))
            .sum::<f64>()
            / n as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                logits,
                labels: labels.to_vec(),
                pos_weight: pos_weight.to_vec(),
            },
            ng,
        ))
    }

    // -----------------------------------------------------------------------

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_raw(self.shape(output).to_vec(), vec![1.0]));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self.param_vars.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, gy.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gy.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect();
                    acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = gy.data().iter().zip(va.data()).map(|(g, v)| g * v).collect();
                    acc(grads, *b, Tensor::from_raw(vb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                let d = gy.data().iter().map(|g| g * c).collect();
                acc(grads, *a, Tensor::from_raw(gy.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, Tensor::full(shape, gy.data()[0]));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, Tensor::from_raw(shape, gy.data().to_vec()));
            }
            Op::Act { x, f } => {
                acc(grads, *x, ops::pointwise_backward(self.value(*x), y, gy, *f));
            }
            Op::Affine { x, w, b } => {
                let (gx, gw, gb) = ops::affine_backward(self.value(*x), self.value(*w), gy);
                if self.needs(*x) {
                    acc(grads, *x, gx);
                }
                if self.needs(*w) {
                    acc(grads, *w, gw);
                }
                if self.needs(*b) {
                    acc(grads, *b, gb);
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let d = ops::matmul_nt_raw(gy.data(), vb.data(), m, n, k);
                    acc(grads, *a, Tensor::from_raw(vec![m, k], d));
                }
                if self.needs(*b) {
                    let d = ops::matmul_tn_raw(va.data(), gy.data(), m, k, n);
                    acc(grads, *b, Tensor::from_raw(vec![k, n], d));
                }
            }
            Op::MatMulNT { a, b } => {
                // y [m,n] = a [m,k] · b[n,k]ᵀ
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if self.needs(*a) {
                    let d = ops::matmul_raw(gy.data(), vb.data(), m, n, k);
                    acc(grads, *a, Tensor::from_raw(vec![m, k], d));
                }
                if self.needs(*b) {
                    let d = ops::matmul_tn_raw(gy.data(), va.data(), m, n, k);
                    acc(grads, *b, Tensor::from_raw(vec![n, k], d));
                }
            }
            Op::AddColBroadcast { x, v } => {
                let p = gy.shape()[1];
                if self.needs(*x) {
                    acc(grads, *x, gy.clone());
                }
                if self.needs(*v) {
                    let d = gy.data().chunks(p).map(|r| r.iter().sum()).collect();
                    acc(grads, *v, Tensor::from_raw(self.shape(*v).to_vec(), d));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let (gx, gk, gb) = ops::conv2d_backward_raw(geom, self.value(*x).data(), self.value(*k).data(), gy.data());
                if self.needs(*x) {
                    acc(grads, *x, Tensor::from_raw(self.shape(*x).to_vec(), gx));
                }
                if self.needs(*k) {
                    acc(grads, *k, Tensor::from_raw(self.shape(*k).to_vec(), gk));
                }
                if self.needs(*b) {
                    acc(grads, *b, Tensor::from_raw(self.shape(*b).to_vec(), gb));
                }
            }
            Op::MaxPool2 { x, argmax } | Op::SparsePool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&i, &g) in argmax.iter().zip(gy.data()) {
                    d[i] += g;
                }
                acc(grads, *x, Tensor::from_raw(self.shape(*x).to_vec(), d));
            }
            Op::Softmax { x, groups, n_groups } => {
                let d = ops::softmax_backward(y.data(), gy.data(), groups, *n_groups);
                acc(grads, *x, Tensor::from_raw(y.shape().to_vec(), d));
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let d = *y.shape().last().unwrap();
                let (gx, gg, gb) = ops::layer_norm_backward(xhat, rstd, self.value(*g).data(), gy.data(), d);
                if self.needs(*x) {
                    acc(grads, *x, Tensor::from_raw(y.shape().to_vec(), gx));
                }
                if self.needs(*g) {
                    acc(grads, *g, Tensor::from_raw(vec![d], gg));
                }
                if self.needs(*b) {
                    acc(grads, *b, Tensor::from_raw(vec![d], gb));
                }
            }
            Op::GatherRows { table, ids } => {
                let d = gy.shape()[1];
                let mut g = Tensor::zeros(self.shape(*table).to_vec());
                let gd = g.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gd[i * d + j] += gy.data()[r * d + j];
                    }
                }
                acc(grads, *table, g);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = gy.shape()[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gy.data()[i * len..(i + 1) * len]);
                }
                acc(grads, *x, Tensor::from_raw(vec![r, c], d));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (gy.shape()[0], gy.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gy.data()[i * total + off..i * total + off + w]);
                        }
                        acc(grads, p, Tensor::from_raw(vec![r, w], d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        acc(grads, p, Tensor::from_raw(self.shape(p).to_vec(), gy.data()[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::FramesToRows { x } => {
                let [c, s, h, w] = <[usize; 4]>::try_from(self.shape(*x)).unwrap();
                let plane = h * w;
                let mut d = vec![0.0; c * s * plane];
                for ci in 0..c {
                    for si in 0..s {
                        d[(ci * s + si) * plane..][..plane].copy_from_slice(&gy.data()[si * c * plane + ci * plane..][..plane]);
                    }
                }
                acc(grads, *x, Tensor::from_raw(vec![c, s, h, w], d));
            }
            Op::ScaleRows { x, s } => {
                let (n, c) = (gy.shape()[0], gy.shape()[1]);
                if self.needs(*x) {
                    let vs = self.value(*s).data();
                    let d = (0..n * c).map(|i| gy.data()[i] * vs[i / c]).collect();
                    acc(grads, *x, Tensor::from_raw(vec![n, c], d));
                }
                if self.needs(*s) {
                    let vx = self.value(*x).data();
                    let d = (0..n)
                        .map(|i| (0..c).map(|j| gy.data()[i * c + j] * vx[i * c + j]).sum())
                        .collect();
                    acc(grads, *s, Tensor::from_raw(vec![n], d));
                }
            }
            Op::Gather { x, sites } => {
                let c = self.shape(*x)[0];
                let d = sparse::scatter(gy.data(), sites, c);
                acc(grads, *x, Tensor::from_raw(self.shape(*x).to_vec(), d));
            }
            Op::Scatter { x, sites } => {
                let c = self.shape(*x)[1];
                let d = sparse::gather(gy.data(), sites, c);
                acc(grads, *x, Tensor::from_raw(self.shape(*x).to_vec(), d));
            }
            Op::SubConv { x, k, b, rb, spec } => {
                let n = self.shape(*x)[0];
                let (gx, gk, gb) = sparse::submanifold_backward(rb, n, self.value(*x).data(), self.value(*k).data(), gy.data(), spec);
                if self.needs(*x) {
                    acc(grads, *x, Tensor::from_raw(self.shape(*x).to_vec(), gx));
                }
                if self.needs(*k) {
                    acc(grads, *k, Tensor::from_raw(self.shape(*k).to_vec(), gk));
                }
                if self.needs(*b) {
                    acc(grads, *b, Tensor::from_raw(self.shape(*b).to_vec(), gb));
                }
            }
            Op::WeightedBce {
                logits,
                labels,
                pos_weight,
            } => {
                let n = labels.len() as f64;
                let g = gy.data()[0];
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(pos_weight)
                    .map(|((&l, &yv), &w)| g * (-w * yv * sigmoid(-l) + (1.0 - yv) * sigmoid(l)) / n)
                    .collect();
                acc(grads, *logits, Tensor::from_raw(self.shape(*logits).to_vec(), d));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
