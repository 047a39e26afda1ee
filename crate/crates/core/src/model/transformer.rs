//! Pre-norm transformer encoder over `[L, d]` sequences.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    prefix: String,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
}

fn linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, seed: u64) -> Result<()> {
    store.insert_uniform(&format!("{name}/w"), &[out, inp], inp, seed)?;
    store.insert(format!("{name}/b"), Tensor::zeros(vec![out]))
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}/g"), Tensor::full(vec![d], 1.0))?;
    store.insert(format!("{name}/b"), Tensor::zeros(vec![d]))
}

impl Encoder {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, layers: usize, seed: u64) -> Result<Self> {
        let e = Self {
            prefix: prefix.to_string(),
            d,
            heads,
            layers,
        };
        for l in 0..layers {
            let p = e.layer_prefix(l);
            norm(store, &format!("{p}/ln1"), d)?;
            for n in ["q", "k", "v", "o"] {
                linear(store, &format!("{p}/attn/{n}"), d, d, seed)?;
            }
            norm(store, &format!("{p}/ln2"), d)?;
            linear(store, &format!("{p}/ff1"), 4 * d, d, seed)?;
            linear(store, &format!("{p}/ff2"), d, 4 * d, seed)?;
        }
        norm(store, &format!("{prefix}/ln_out"), d)?;
        Ok(e)
    }

    fn layer_prefix(&self, l: usize) -> String {
        format!("{}/layer{l}", self.prefix)
    }

    fn affine(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&format!("{name}/w"))?;
        let b = g.param(&format!("{name}/b"))?;
        g.affine(x, w, b)
    }

    fn norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = g.param(&format!("{name}/g"))?;
        let b = g.param(&format!("{name}/b"))?;
        g.layer_norm(x, gain, b)
    }

    fn self_attention(&self, g: &mut Graph, x: Var, p: &str) -> Result<Var> {
        let q = Self::affine(g, x, &format!("{p}/attn/q"))?;
        let k = Self::affine(g, x, &format!("{p}/attn/k"))?;
        let v = Self::affine(g, x, &format!("{p}/attn/v"))?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, &[1], None)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Self::affine(g, cat, &format!("{p}/attn/o"))
    }

    /// Encodes `x [L, d]`, returning `[L, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut x = x;
        for l in 0..self.layers {
            let p = self.layer_prefix(l);
            let h = Self::norm(g, x, &format!("{p}/ln1"))?;
            let a = self.self_attention(g, h, &p)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, x, &format!("{p}/ln2"))?;
            let h = Self::affine(g, h, &format!("{p}/ff1"))?;
            let h = g.relu(h);
            let h = Self::affine(g, h, &format!("{p}/ff2"))?;
            x = g.add(x, h)?;
        }
        Self::norm(g, x, &format!("{}/ln_out", self.prefix))
    }
}
