//! The dense (FE2E) and sparse (MESM) multimodal networks.
//!
//! Visual frames and audio chunks each go through a dense stem convolution
//! and `N` blocks: plain convolution blocks in FE2E, cross-modal sparse
//! blocks queried by the text encoding in MESM. Block outputs are flattened
//! per sequence element, projected, prefixed with a CLS embedding and
//! encoded by a transformer; text goes straight to its own transformer. Each
//! modality has a classification head and the heads are fused by a
//! softmax-weighted sum.

use std::path::Path;

use crate::attention::{crossmodal_block, dense_block, BlockInput, BlockParams, BlockTrace};
use crate::autodiff::{Graph, Var};
use crate::data::{stack_sequence, ModalitySample};
use crate::error::{shape_err, Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::sparse::FlopsLedger;
use crate::tensor::Tensor;

use super::config::{Modalities, Modality, Mode, RunConfig};
use super::transformer::Encoder;

pub const UNK: usize = 2;

/// Convolutional branch of one image-like modality.
#[derive(Clone, Debug)]
struct Branch {
    modality: Modality,
    in_shape: [usize; 3],
    blocks: Vec<BlockParams>,
    encoder: Encoder,
    flat: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    text: Encoder,
    branches: Vec<Branch>,
}

/// Per-modality and fused logits of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub per_modality: Vec<(Modality, Vec<f64>)>,
    pub fused: Vec<f64>,
}

pub struct BlockRecord {
    pub modality: Modality,
    /// 1-based block index.
    pub block: usize,
    pub trace: BlockTrace,
}

/// Graph handles produced by [`Model::forward`].
pub struct Forward {
    pub text_cls: Option<Var>,
    pub logits: Vec<(Modality, Var)>,
    pub fused: Var,
    pub blocks: Vec<BlockRecord>,
}

impl Forward {
    pub fn scores(&self, g: &Graph) -> ClassScores {
        ClassScores {
            per_modality: self
                .logits
                .iter()
                .map(|(m, v)| (*m, g.value(*v).data().to_vec()))
                .collect(),
            fused: g.value(self.fused).data().to_vec(),
        }
    }
}

fn linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, seed: u64) -> Result<()> {
    store.insert_uniform(&format!("{name}/w"), &[out, inp], inp, seed)?;
    store.insert(format!("{name}/b"), Tensor::zeros(vec![out]))
}

fn apply_linear(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}/w"))?;
    let b = g.param(&format!("{name}/b"))?;
    g.affine(x, w, b)
}

impl Model {
    /// Builds and initialises every parameter from `config.model.seed`.
    /// Parameters shared by both modes get identical values in either mode.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.model.validate()?;
        config.data.validate()?;
        let m = &config.model;
        let seed = m.seed;
        let d = m.d_model;
        let mut store = ParamStore::new();

        store.insert_uniform("text/embed", &[m.vocab, d], d, seed)?;
        store.insert_uniform("text/pos", &[m.max_text_len + 1, d], d, seed)?;
        let text = Encoder::register(&mut store, "text/enc", d, m.heads, m.layers, seed)?;
        Self::register_head(&mut store, "text", d, m.classes, seed)?;

        let data = &config.data;
        let shapes = [
            (Modality::Audio, [1, data.n_mels, data.chunk_len]),
            (Modality::Visual, [3, data.frame_size, data.frame_size]),
        ];
        let mut branches = Vec::new();
        for (modality, in_shape) in shapes {
            let name = modality.name();
            let z = m.kernel;
            store.insert_uniform(
                &format!("{name}/stem/k"),
                &[m.stem_channels, in_shape[0], z, z],
                in_shape[0] * z * z,
                seed,
            )?;
            store.insert(format!("{name}/stem/b"), Tensor::zeros(vec![m.stem_channels]))?;
            let mut blocks = Vec::new();
            let mut cin = m.stem_channels;
            let (mut h, mut w) = (in_shape[1], in_shape[2]);
            for (b, &cout) in m.block_channels.iter().enumerate() {
                let attention = (m.mode == Mode::Mesm).then_some((d, m.attn_width));
                blocks.push(BlockParams::register(
                    &mut store,
                    &format!("{name}/block{}", b + 1),
                    cin,
                    cout,
                    z,
                    attention,
                    seed,
                )?);
                cin = cout;
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            let flat = cin * h * w;
            linear(&mut store, &format!("{name}/proj"), d, flat, seed)?;
            store.insert_uniform(&format!("{name}/cls"), &[1, d], d, seed)?;
            store.insert_uniform(&format!("{name}/pos"), &[m.max_seq_len + 1, d], d, seed)?;
            let encoder = Encoder::register(&mut store, &format!("{name}/enc"), d, m.heads, m.layers, seed)?;
            Self::register_head(&mut store, name, d, m.classes, seed)?;
            branches.push(Branch {
                modality,
                in_shape,
                blocks,
                encoder,
                flat,
            });
        }
        store.insert("fusion/w", Tensor::zeros(vec![3]))?;
        Ok(Self {
            config,
            params: store,
            text,
            branches,
        })
    }

    fn register_head(store: &mut ParamStore, name: &str, d: usize, classes: usize, seed: u64) -> Result<()> {
        linear(store, &format!("{name}/head1"), d, d, seed)?;
        linear(store, &format!("{name}/head2"), classes, d, seed)
    }

    pub fn mode(&self) -> Mode {
        self.config.model.mode
    }

    /// Names of every attention parameter (empty in FE2E).
    pub fn attention_param_names(&self) -> Vec<String> {
        self.branches
            .iter()
            .flat_map(|b| b.blocks.iter())
            .filter_map(|bp| bp.attention.as_ref())
            .flat_map(|a| a.names())
            .collect()
    }

    fn head(g: &mut Graph, name: &str, cls: Var) -> Result<Var> {
        g.set_scope(&format!("{name}/head"));
        let h = apply_linear(g, cls, &format!("{name}/head1"))?;
        let h = g.relu(h);
        apply_linear(g, h, &format!("{name}/head2"))
    }

    /// Text transformer; returns the CLS output `[d]`.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let m = &self.config.model;
        g.set_scope("text/encoder");
        let mut ids: Vec<usize> = tokens.iter().map(|&t| if t < m.vocab { t } else { UNK }).collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if ids.len() > m.max_text_len + 1 {
            log::warn!("text of {} tokens truncated to {}", ids.len() - 1, m.max_text_len);
            ids.truncate(m.max_text_len + 1);
        }
        let embed = g.param("text/embed")?;
        let x = g.gather_rows(embed, &ids)?;
        let pos = g.param("text/pos")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        let x = g.add(x, p)?;
        let y = self.text.forward(g, x)?;
        let cls = g.gather_rows(y, &[0])?;
        g.reshape(cls, &[m.d_model])
    }

    /// Flattens `[C, S, h, w]` block output per element, projects to
    /// `d_model`, prefixes CLS, adds positions and encodes; returns `[d]`.
    fn encode_sequence(&self, g: &mut Graph, branch: &Branch, maps: Var) -> Result<Var> {
        let name = branch.modality.name();
        g.set_scope(&format!("{name}/encoder"));
        let rows = g.frames_to_rows(maps)?;
        let s = g.shape(rows)[0];
        if g.shape(rows)[1] != branch.flat {
            return Err(shape_err("encode_sequence", "flattened width mismatch"));
        }
        let proj = apply_linear(g, rows, &format!("{name}/proj"))?;
        let cls = g.param(&format!("{name}/cls"))?;
        let x = g.concat_rows(&[cls, proj])?;
        let pos = g.param(&format!("{name}/pos"))?;
        let positions: Vec<usize> = (0..=s).collect();
        let p = g.gather_rows(pos, &positions)?;
        let x = g.add(x, p)?;
        let y = branch.encoder.forward(g, x)?;
        let cls = g.gather_rows(y, &[0])?;
        g.reshape(cls, &[self.config.model.d_model])
    }

    fn run_branch(
        &self,
        g: &mut Graph,
        branch: &Branch,
        items: &[Tensor],
        query: Option<Var>,
        ledger: &mut FlopsLedger,
        records: &mut Vec<BlockRecord>,
    ) -> Result<Var> {
        let m = &self.config.model;
        let name = branch.modality.name();
        if items.is_empty() {
            return Err(Error::InvalidArgument(format!("{name}: empty sequence")));
        }
        if let Some(bad) = items.iter().find(|t| t.shape() != branch.in_shape) {
            return Err(shape_err(
                "model input",
                format!("{name} element {:?} != configured {:?}", bad.shape(), branch.in_shape),
            ));
        }
        let items = if items.len() > m.max_seq_len {
            log::warn!("{name}: sequence of {} truncated to {}", items.len(), m.max_seq_len);
            &items[..m.max_seq_len]
        } else {
            items
        };
        let x = g.constant(stack_sequence(items)?);
        g.set_scope(&format!("{name}/stem"));
        let k = g.param(&format!("{name}/stem/k"))?;
        let b = g.param(&format!("{name}/stem/b"))?;
        let (y, macs) = g.conv2d(x, k, b, (m.kernel - 1) / 2)?;
        ledger.record(&format!("{name}/stem"), macs);
        let stem = g.relu(y);

        let maps = match m.mode {
            Mode::Fe2e => {
                let mut x = stem;
                for bp in &branch.blocks {
                    g.set_scope(bp.prefix());
                    x = dense_block(g, bp, x, ledger)?;
                }
                x
            }
            Mode::Mesm => {
                let q = query.ok_or_else(|| {
                    Error::InvalidArgument("sparse blocks need the text encoding as query".into())
                })?;
                let mut input = BlockInput::Dense(stem);
                for (i, bp) in branch.blocks.iter().enumerate() {
                    g.set_scope(bp.prefix());
                    let (out, trace) = crossmodal_block(g, bp, &input, q, m.top_p, m.mask_gradient, ledger)?;
                    records.push(BlockRecord {
                        modality: branch.modality,
                        block: i + 1,
                        trace,
                    });
                    input = BlockInput::Sparse(out);
                }
                match input {
                    BlockInput::Sparse(sv) => g.densify(&sv),
                    BlockInput::Dense(v) => v,
                }
            }
        };
        self.encode_sequence(g, branch, maps)
    }

    /// Records the full forward pass of one sample over the modalities in
    /// `mods`.
    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &ModalitySample,
        mods: Modalities,
        ledger: &mut FlopsLedger,
    ) -> Result<Forward> {
        if mods.is_empty() {
            return Err(Error::InvalidArgument("no modality present".into()));
        }
        if self.mode() == Mode::Mesm && !mods.contains(Modality::Text) {
            return Err(Error::InvalidArgument(format!(
                "mesm needs the text modality as attention query; got `{mods}`"
            )));
        }
        let mut logits = Vec::new();
        let mut blocks = Vec::new();
        let text_cls = if mods.contains(Modality::Text) {
            let cls = self.encode_text(g, &sample.tokens)?;
            logits.push((Modality::Text, Self::head(g, "text", cls)?));
            Some(cls)
        } else {
            None
        };
        for branch in &self.branches {
            if !mods.contains(branch.modality) {
                continue;
            }
            let items = match branch.modality {
                Modality::Audio => &sample.audio,
                _ => &sample.frames,
            };
            let cls = self.run_branch(g, branch, items, text_cls, ledger, &mut blocks)?;
            logits.push((branch.modality, Self::head(g, branch.modality.name(), cls)?));
        }
        logits.sort_by_key(|(m, _)| *m);
        let fused = fuse(g, &logits)?;
        Ok(Forward {
            text_cls,
            logits,
            fused,
            blocks,
        })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, sample: &ModalitySample, mods: Modalities) -> Result<(ClassScores, FlopsLedger)> {
        let mut g = Graph::new(&self.params);
        let mut ledger = FlopsLedger::new();
        let f = self.forward(&mut g, sample, mods, &mut ledger)?;
        Ok((f.scores(&g), ledger))
    }

    /// Mean weighted BCE over a batch, with gradients accumulated into the
    /// parameter store (after clearing it). Fails on a non-finite loss,
    /// naming the first layer that produced a non-finite value.
    pub fn accumulate_gradients(
        &mut self,
        batch: &[&ModalitySample],
        pos_weight: &[f64],
        mods: Modalities,
        ledger: &mut FlopsLedger,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.params.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            let grads = {
                let mut g = Graph::new(&self.params);
                let f = self.forward(&mut g, sample, mods, ledger)?;
                g.set_scope("loss");
                let loss = g.weighted_bce(f.fused, &sample.labels, pos_weight)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    let at = g
                        .first_non_finite()
                        .map_or_else(|| "loss".to_string(), |(scope, op)| format!("{scope} ({op})"));
                    return Err(Error::NonFinite(at));
                }
                total += value;
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?.into_param_grads(&self.params)
            };
            for (name, grad) in grads {
                self.params.accumulate_grad(&name, &grad)?;
            }
        }
        Ok(total * scale)
    }

    /// One optimisation step on `batch`; returns the mean loss before the
    /// update.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        batch: &[&ModalitySample],
        pos_weight: &[f64],
        mods: Modalities,
        ledger: &mut FlopsLedger,
    ) -> Result<f64> {
        let loss = self.accumulate_gradients(batch, pos_weight, mods, ledger)?;
        adam.step(&mut self.params)?;
        Ok(loss)
    }

    /// Writes `params.bin` and `config.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(dir.join("params.bin"))?;
        std::fs::write(dir.join("config.txt"), self.config.to_kv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join("config.txt"))?;
        let mut model = Self::new(config)?;
        let params = ParamStore::load(dir.join("params.bin"))?;
        let expected: Vec<&str> = model.params.names().collect();
        let found: Vec<&str> = params.names().collect();
        if expected != found {
            return Err(Error::Format("checkpoint parameters do not match its config".into()));
        }
        for (name, p) in params.iter() {
            model.params.set(name, p.value.clone())?;
        }
        Ok(model)
    }
}

/// Softmax-weighted sum of per-modality logits, using the fusion weights of
/// the modalities present.
pub fn fuse(g: &mut Graph, logits: &[(Modality, Var)]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("fusion needs at least one modality".into()));
    }
    g.set_scope("fusion");
    let classes = g.shape(logits[0].1)[0];
    let w = g.param("fusion/w")?;
    let w = g.reshape(w, &[3, 1])?;
    let idx: Vec<usize> = logits.iter().map(|(m, _)| m.index()).collect();
    let w = g.gather_rows(w, &idx)?;
    let w = g.reshape(w, &[idx.len()])?;
    let w = g.softmax(w, &[0], None)?;
    let w = g.reshape(w, &[1, idx.len()])?;
    let rows: Vec<Var> = logits
        .iter()
        .map(|(_, v)| g.reshape(*v, &[1, classes]))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&rows)?;
    let fused = g.matmul(w, stacked)?;
    g.reshape(fused, &[classes])
}
