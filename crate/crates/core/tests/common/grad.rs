//! One finite-difference case per differentiable graph operation.

use std::sync::Arc;

use mesm::attention::{attention_scores_graph, AttentionParams};
use mesm::model::transformer::Encoder;
use mesm::ops::Activation;
use mesm::{Graph, ParamStore, Result, SiteSet, Tensor, Var};
use rand::Rng;

use super::{random_bits, random_tensor, rng};

pub type Loss = Box<dyn Fn(&mut Graph) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub params: ParamStore,
    pub loss: Loss,
}

/// `Σ x ⊙ r` for a fixed random `r`, so every output entry matters.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(g.shape(x), &mut rng(seed ^ 0xfeed));
    let r = g.constant(r);
    let y = g.mul(x, r)?;
    Ok(g.sum(y))
}

/// Random entries with magnitude at least 0.2, so relu never sits on its kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = r.random_range(0.2..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Distinct values spaced far beyond the finite-difference step, shuffled.
fn well_separated(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 0.05 * n as f64).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng(seed));
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, &mut rng(seed))
}

fn case(name: &'static str, params: ParamStore, loss: impl Fn(&mut Graph) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        params,
        loss: Box::new(loss),
    }
}

fn random_sites(extents: [usize; 3], density: f64, seed: u64) -> Arc<SiteSet> {
    let n = extents.iter().product();
    let mut bits = random_bits(n, density, &mut rng(seed));
    bits[0] = true;
    Arc::new(SiteSet::from_map(&mesm::BinaryMap::new(extents, bits).unwrap()))
}

pub fn op_cases() -> Vec<GradCase> {
    let mut v = Vec::new();
    v.push(case("add", store(&[("a", rand(&[3, 4], 1)), ("b", rand(&[3, 4], 2))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.add(a, b)?;
        project(g, y, 1)
    }));
    v.push(case("mul", store(&[("a", rand(&[3, 4], 3)), ("b", rand(&[3, 4], 4))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.mul(a, b)?;
        project(g, y, 2)
    }));
    v.push(case("scale+sum", store(&[("a", rand(&[5], 5))]), |g| {
        let a = g.param("a")?;
        let y = g.scale(a, -1.7);
        let y = g.mul(y, a)?;
        Ok(g.sum(y))
    }));
    v.push(case("reshape", store(&[("a", rand(&[2, 6], 6))]), |g| {
        let a = g.param("a")?;
        let y = g.reshape(a, &[3, 4])?;
        project(g, y, 3)
    }));
    v.push(case("tanh", store(&[("a", rand(&[4, 3], 7))]), |g| {
        let a = g.param("a")?;
        let y = g.tanh(a);
        project(g, y, 4)
    }));
    v.push(case("relu", store(&[("a", away_from_zero(&[4, 3], 8))]), |g| {
        let a = g.param("a")?;
        let y = g.relu(a);
        project(g, y, 5)
    }));
    v.push(case(
        "affine",
        store(&[("x", rand(&[3, 4], 9)), ("w", rand(&[5, 4], 10)), ("b", rand(&[5], 11))]),
        |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = g.affine(x, w, b)?;
            project(g, y, 6)
        },
    ));
    v.push(case("matmul", store(&[("a", rand(&[3, 4], 12)), ("b", rand(&[4, 2], 13))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.matmul(a, b)?;
        project(g, y, 7)
    }));
    v.push(case("matmul_nt", store(&[("a", rand(&[3, 4], 14)), ("b", rand(&[2, 4], 15))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.matmul_nt(a, b)?;
        project(g, y, 8)
    }));
    v.push(case("add_col_broadcast", store(&[("x", rand(&[3, 5], 16)), ("v", rand(&[3], 17))]), |g| {
        let (x, vv) = (g.param("x")?, g.param("v")?);
        let y = g.add_col_broadcast(x, vv)?;
        project(g, y, 9)
    }));
    v.push(case(
        "conv2d",
        store(&[("x", rand(&[2, 2, 5, 5], 18)), ("k", rand(&[3, 2, 3, 3], 19)), ("b", rand(&[3], 20))]),
        |g| {
            let (x, k, b) = (g.param("x")?, g.param("k")?, g.param("b")?);
            let (y, _) = g.conv2d(x, k, b, 1)?;
            project(g, y, 10)
        },
    ));
    v.push(case("maxpool2", store(&[("x", well_separated(&[2, 2, 4, 4], 21))]), |g| {
        let x = g.param("x")?;
        let y = g.maxpool2(x)?;
        project(g, y, 11)
    }));
    v.push(case("softmax", store(&[("x", rand(&[2, 3, 4], 22))]), |g| {
        let x = g.param("x")?;
        let y = g.softmax(x, &[1, 2], None)?;
        project(g, y, 12)
    }));
    v.push(case("softmax(masked)", store(&[("x", rand(&[2, 3, 4], 23))]), |g| {
        let x = g.param("x")?;
        let allowed: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
        let y = g.softmax(x, &[1, 2], Some(&allowed))?;
        project(g, y, 13)
    }));
    v.push(case(
        "layer_norm",
        store(&[("x", rand(&[3, 6], 24)), ("g", rand(&[6], 25)), ("b", rand(&[6], 26))]),
        |g| {
            let (x, gg, b) = (g.param("x")?, g.param("g")?, g.param("b")?);
            let y = g.layer_norm(x, gg, b)?;
            project(g, y, 14)
        },
    ));
    v.push(case("gather_rows", store(&[("t", rand(&[5, 3], 27))]), |g| {
        let t = g.param("t")?;
        let y = g.gather_rows(t, &[0, 2, 2, 4])?;
        project(g, y, 15)
    }));
    v.push(case("slice_cols", store(&[("x", rand(&[3, 6], 28))]), |g| {
        let x = g.param("x")?;
        let y = g.slice_cols(x, 1, 3)?;
        project(g, y, 16)
    }));
    v.push(case("concat_cols", store(&[("a", rand(&[3, 2], 29)), ("b", rand(&[3, 4], 30))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.concat_cols(&[a, b, a])?;
        project(g, y, 17)
    }));
    v.push(case("concat_rows", store(&[("a", rand(&[1, 4], 31)), ("b", rand(&[3, 4], 32))]), |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.concat_rows(&[a, b])?;
        project(g, y, 18)
    }));
    v.push(case("frames_to_rows", store(&[("x", rand(&[2, 3, 2, 2], 33))]), |g| {
        let x = g.param("x")?;
        let y = g.frames_to_rows(x)?;
        project(g, y, 19)
    }));
    v.push(case("scale_rows", store(&[("x", rand(&[4, 3], 34)), ("s", rand(&[4], 35))]), |g| {
        let (x, s) = (g.param("x")?, g.param("s")?);
        let y = g.scale_rows(x, s)?;
        project(g, y, 20)
    }));
    v.push(case("to_sparse+densify", store(&[("x", rand(&[2, 2, 4, 4], 36))]), |g| {
        let x = g.param("x")?;
        let sv = g.to_sparse(x, random_sites([2, 4, 4], 0.5, 1))?;
        let y = g.densify(&sv);
        project(g, y, 21)
    }));
    v.push(case(
        "submanifold_conv",
        store(&[("x", rand(&[2, 2, 5, 5], 37)), ("k", rand(&[3, 2, 3, 3], 38)), ("b", rand(&[3], 39))]),
        |g| {
            let (x, k, b) = (g.param("x")?, g.param("k")?, g.param("b")?);
            let sv = g.to_sparse(x, random_sites([2, 5, 5], 0.45, 2))?;
            let (y, _) = g.submanifold_conv(&sv, k, b)?;
            project(g, y.features, 22)
        },
    ));
    v.push(case("sparse_activation", store(&[("x", rand(&[3, 1, 4, 4], 40))]), |g| {
        let x = g.param("x")?;
        let sv = g.to_sparse(x, random_sites([1, 4, 4], 0.6, 3))?;
        let y = g.sparse_activation(&sv, Activation::Tanh);
        project(g, y.features, 23)
    }));
    v.push(case("sparse_maxpool", store(&[("x", well_separated(&[2, 2, 4, 4], 41))]), |g| {
        let x = g.param("x")?;
        let sv = g.to_sparse(x, random_sites([2, 4, 4], 0.5, 4))?;
        let y = g.sparse_maxpool(&sv);
        let y = g.densify(&y);
        project(g, y, 24)
    }));
    v.push(case("weighted_bce", store(&[("l", rand(&[4], 42))]), |g| {
        let l = g.param("l")?;
        let y = g.scale(l, 3.0);
        g.weighted_bce(y, &[1.0, 0.0, 0.0, 1.0], &[2.5, 1.0, 4.0, 0.5])
    }));

    let mut attn_store = store(&[("m", rand(&[3, 2, 3, 3], 43)), ("q", rand(&[4], 44))]);
    let ap = AttentionParams::register(&mut attn_store, "attn", 3, 4, 5, 9).unwrap();
    for name in [ap.b_m(), ap.b_i()] {
        let shape = attn_store.get(&name).unwrap().shape().to_vec();
        attn_store.set(&name, rand(&shape, 45)).unwrap();
    }
    v.push(case("attention_scores", attn_store, move |g| {
        let (m, q) = (g.param("m")?, g.param("q")?);
        let allowed: Vec<bool> = (0..18).map(|i| i % 4 != 2).collect();
        let y = attention_scores_graph(g, &ap, m, q, Some(&allowed))?;
        project(g, y, 25)
    }));

    let mut enc_store = store(&[("x", rand(&[3, 4], 46))]);
    let enc = Encoder::register(&mut enc_store, "enc", 4, 2, 1, 5).unwrap();
    v.push(case("transformer", enc_store, move |g| {
        let x = g.param("x")?;
        let y = enc.forward(g, x)?;
        project(g, y, 26)
    }));
    v
}

/// Mean weighted BCE of a two-sample batch through the full model built
/// from `cfg`, over its configured modalities.
pub fn model_case(name: &'static str, cfg: mesm::model::RunConfig) -> GradCase {
    use mesm::data::synth_sample;
    let model = mesm::model::Model::new(cfg).unwrap();
    let data = &model.config.data;
    let batch: Vec<_> = [(0, 11), (1, 12)]
        .iter()
        .map(|&(c, s)| synth_sample(c % data.classes, s, data).unwrap())
        .collect();
    // zero-initialised biases on exactly-zero relu outputs would put
    // pre-activations on the relu kink; jitter moves them off it
    let mut params = model.params.clone();
    let mut r = rng(77);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let t = params.get(&name).unwrap().clone();
        let shape = t.shape().to_vec();
        let jittered: Vec<f64> = t.data().iter().map(|v| v + r.random_range(-0.05..0.05)).collect();
        params.set(&name, Tensor::new(shape, jittered).unwrap()).unwrap();
    }
    let pos_weight = vec![1.5; model.config.model.classes];
    case(name, params, move |g| {
        let mods = model.config.model.modalities;
        let mut ledger = mesm::FlopsLedger::new();
        let mut total: Option<Var> = None;
        for s in &batch {
            let f = model.forward(g, s, mods, &mut ledger)?;
            let l = g.weighted_bce(f.fused, &s.labels, &pos_weight)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(g.scale(total.expect("nonempty batch"), 0.5))
    })
}
