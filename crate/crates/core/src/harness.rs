//! Training runs, top-p sweeps, modality ablations, mask dumps and dataset
//! generation, each writing CSV artifacts into an output directory.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{pos_weights, synth_sample, Manifest, ModalitySample, Split};
use crate::error::{Error, Result};
use crate::metrics::ClassMetrics;
use crate::model::{Modalities, Mode, Model, RunConfig};
use crate::optim::{Adam, AdamConfig};
use crate::sparse::{to_sparse, BinaryMap, FlopsLedger, FlopsReport};

/// Samples of one manifest, generated once and grouped by split.
pub struct Dataset {
    pub train: Vec<ModalitySample>,
    pub valid: Vec<ModalitySample>,
    pub test: Vec<ModalitySample>,
    pub pos_weight: Vec<f64>,
}

impl Dataset {
    pub fn generate(manifest: &Manifest, config: &RunConfig) -> Result<Self> {
        if manifest.classes() != config.model.classes {
            return Err(Error::Config(format!(
                "manifest has {} classes, config {}",
                manifest.classes(),
                config.model.classes
            )));
        }
        let build = |split| -> Result<Vec<ModalitySample>> {
            manifest
                .split(split)
                .into_iter()
                .map(|r| synth_sample(r.class, r.seed, &config.data))
                .collect()
        };
        Ok(Self {
            train: build(Split::Train)?,
            valid: build(Split::Valid)?,
            test: build(Split::Test)?,
            pos_weight: pos_weights(manifest, config.model.pos_weight_cap),
        })
    }

    pub fn split(&self, split: Split) -> &[ModalitySample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Loss, metrics and MAC tally of a model over a set of samples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: ClassMetrics,
    pub ledger: FlopsLedger,
}

impl Evaluation {
    pub fn mean_wacc(&self) -> f64 {
        self.metrics.mean_wacc().unwrap_or(f64::NAN)
    }

    /// MACs of the convolution blocks only (stems excluded).
    pub fn block_flops(&self) -> FlopsReport {
        self.ledger.report_filtered(|l| l.contains("/block"))
    }

    /// Per-class WAcc and F1 followed by a `mean` row. Undefined WAcc is
    /// left empty.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("class,wacc,f1\n");
        for (c, (w, f)) in self.metrics.wacc.iter().zip(&self.metrics.f1).enumerate() {
            let w = w.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{c},{w},{f}").unwrap();
        }
        let mean = self.metrics.mean_wacc().map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "mean,{mean},{}", self.metrics.mean_f1()).unwrap();
        s
    }
}

pub fn evaluate(model: &Model, samples: &[ModalitySample], pos_weight: &[f64]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mods = model.config.model.modalities;
    let mut ledger = FlopsLedger::new();
    let mut logits = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let mut g = Graph::new(&model.params);
        let f = model.forward(&mut g, s, mods, &mut ledger)?;
        let l = g.weighted_bce(f.fused, &s.labels, pos_weight)?;
        loss += g.value(l).data()[0];
        logits.push(g.value(f.fused).data().to_vec());
        labels.push(s.labels.clone());
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        metrics: ClassMetrics::from_logits(&logits, &labels),
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_wacc: f64,
    pub valid_f1: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best mean validation WAcc.
    pub best: Model,
    pub best_epoch: usize,
    pub best_wacc: f64,
    /// Row 0 is the untrained model.
    pub rows: Vec<EpochRow>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss,valid_wacc,valid_f1\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.valid_loss, r.valid_wacc, r.valid_f1).unwrap();
        }
        s
    }
}

/// Trains for `config.model.epochs` epochs with Adam, keeping the
/// parameters with the best mean validation WAcc. With `out`, writes
/// `metrics.csv` and the best checkpoint to `out/checkpoint`.
pub fn run_train(config: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mc = &config.model;
    let mods = mc.modalities;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::InvalidArgument("train and valid splits must be nonempty".into()));
    }
    let mut model = Model::new(config.clone())?;
    let mut adam = Adam::new(AdamConfig::with_lr(mc.lr), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed ^ 0x5eed);

    let train0 = evaluate(&model, &data.train, &data.pos_weight)?;
    let valid0 = evaluate(&model, &data.valid, &data.pos_weight)?;
    let mut rows = vec![EpochRow {
        epoch: 0,
        train_loss: train0.loss,
        valid_loss: valid0.loss,
        valid_wacc: valid0.mean_wacc(),
        valid_f1: valid0.metrics.mean_f1(),
    }];
    let mut best = (model.clone(), adam.clone(), 0, valid0.mean_wacc());

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=mc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut ledger = FlopsLedger::new();
        for chunk in order.chunks(mc.batch_size) {
            let batch: Vec<&ModalitySample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let l = model.train_step(&mut adam, &batch, &data.pos_weight, mods, &mut ledger)?;
            loss_sum += l * batch.len() as f64;
        }
        let valid = evaluate(&model, &data.valid, &data.pos_weight)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            valid_loss: valid.loss,
            valid_wacc: valid.mean_wacc(),
            valid_f1: valid.metrics.mean_f1(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, valid loss {:.4}, valid WAcc {:.4}, F1 {:.4}",
            row.train_loss,
            row.valid_loss,
            row.valid_wacc,
            row.valid_f1
        );
        if row.valid_wacc > best.3 || best.3.is_nan() {
            best = (model.clone(), adam.clone(), epoch, row.valid_wacc);
        }
        rows.push(row);
    }
    let outcome = TrainOutcome {
        best: best.0,
        best_epoch: best.2,
        best_wacc: best.3,
        rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), outcome.metrics_csv())?;
        let ck = dir.join("checkpoint");
        outcome.best.save(&ck)?;
        best.1.save(&ck)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub top_p: f64,
    pub class_wacc: Vec<Option<f64>>,
    pub mean_wacc: f64,
    pub mean_f1: f64,
    /// Block-level MACs on the test split.
    pub executed: u64,
    pub dense: u64,
}

impl SweepRow {
    pub fn fraction(&self) -> f64 {
        self.executed as f64 / self.dense as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, p: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.top_p - p).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.class_wacc.len());
        let mut s = String::from("top_p");
        for c in 0..classes {
            write!(s, ",wacc_c{c}").unwrap();
        }
        s.push_str(",mean_wacc,mean_f1,executed_macs,dense_macs,fraction\n");
        for r in &self.rows {
            write!(s, "{}", r.top_p).unwrap();
            for w in &r.class_wacc {
                match w {
                    Some(v) => write!(s, ",{v}").unwrap(),
                    None => s.push(','),
                }
            }
            writeln!(s, ",{},{},{},{},{}", r.mean_wacc, r.mean_f1, r.executed, r.dense, r.fraction()).unwrap();
        }
        s
    }
}

pub fn default_p_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Trains an MESM model per `p` (shared seed) and evaluates it on the test
/// split. Rows come back sorted by `p`.
pub fn run_sweep(config: &RunConfig, data: &Dataset, p_list: &[f64], out: Option<&Path>) -> Result<SweepResult> {
    if p_list.is_empty() {
        return Err(Error::InvalidArgument("empty p list".into()));
    }
    if let Some(bad) = p_list.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "top-p {bad} outside (0, 1]; the nucleus must be nonempty"
        )));
    }
    let mut ps = p_list.to_vec();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let mut rows = Vec::with_capacity(ps.len());
    for p in ps {
        let mut cfg = config.clone();
        cfg.model.mode = Mode::Mesm;
        cfg.model.top_p = p;
        cfg.model.validate()?;
        let sub = out.map(|d| d.join(format!("p{p:.2}")));
        let outcome = run_train(&cfg, data, sub.as_deref())?;
        let eval = evaluate(&outcome.best, &data.test, &data.pos_weight)?;
        let flops = eval.block_flops();
        log::info!(
            "p = {p}: test WAcc {:.4}, block MAC fraction {:.4}",
            eval.mean_wacc(),
            flops.fraction().unwrap_or(0.0)
        );
        rows.push(SweepRow {
            top_p: p,
            class_wacc: eval.metrics.wacc.clone(),
            mean_wacc: eval.mean_wacc(),
            mean_f1: eval.metrics.mean_f1(),
            executed: flops.total.executed,
            dense: flops.total.dense,
        });
    }
    let result = SweepResult { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), result.to_csv())?;
    }
    Ok(result)
}

/// Modality subsets of the ablation table for each mode.
pub fn ablation_subsets(mode: Mode) -> Vec<Modalities> {
    let names: &[&str] = match mode {
        Mode::Fe2e => &["TAV", "TA", "TV", "VA", "T", "A", "V"],
        Mode::Mesm => &["TAV", "TA", "TV"],
    };
    names.iter().map(|n| n.parse().expect("valid subset")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub modalities: Modalities,
    pub seeds: Vec<u64>,
    pub wacc: Vec<f64>,
    pub f1: Vec<f64>,
}

impl AblationRow {
    pub fn mean_wacc(&self) -> f64 {
        self.wacc.iter().sum::<f64>() / self.wacc.len() as f64
    }

    pub fn mean_f1(&self) -> f64 {
        self.f1.iter().sum::<f64>() / self.f1.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: Mode, mods: &str) -> Option<&AblationRow> {
        let mods: Modalities = mods.parse().ok()?;
        self.rows.iter().find(|r| r.mode == mode && r.modalities == mods)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,modalities,avg_acc,avg_f1,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|x| x.to_string()).collect();
            writeln!(s, "{},{},{},{},{}", r.mode, r.modalities, r.mean_wacc(), r.mean_f1(), seeds.join(" ")).unwrap();
        }
        s
    }
}

/// Trains and tests one model per (mode, subset, seed). `cells` defaults to
/// the seven FE2E subsets followed by the three MESM subsets; MESM subsets
/// without text are rejected.
pub fn run_ablation(
    config: &RunConfig,
    data: &Dataset,
    cells: Option<&[(Mode, Modalities)]>,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let default: Vec<(Mode, Modalities)> = [Mode::Fe2e, Mode::Mesm]
        .into_iter()
        .flat_map(|m| ablation_subsets(m).into_iter().map(move |s| (m, s)))
        .collect();
    let cells = cells.unwrap_or(&default);
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    for (mode, mods) in cells {
        if *mode == Mode::Mesm && !mods.contains(crate::model::Modality::Text) {
            return Err(Error::InvalidArgument(format!(
                "mesm row `{mods}` lacks text; the sparse blocks are queried by the text encoding, so mesm needs T"
            )));
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for &(mode, mods) in cells {
        let mut row = AblationRow {
            mode,
            modalities: mods,
            seeds: seeds.to_vec(),
            wacc: Vec::new(),
            f1: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.model.mode = mode;
            cfg.model.modalities = mods;
            cfg.model.seed = seed;
            let outcome = run_train(&cfg, data, None)?;
            let eval = evaluate(&outcome.best, &data.test, &data.pos_weight)?;
            log::info!("{mode} {mods} seed {seed}: test WAcc {:.4}", eval.mean_wacc());
            row.wacc.push(eval.mean_wacc());
            row.f1.push(eval.metrics.mean_f1());
        }
        rows.push(row);
    }
    let table = AblationTable { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv())?;
    }
    Ok(table)
}

/// Writes, for every sparse block and frame / chunk of one sample, the
/// selection mask as PGM, the score map as CSV, and one `masks.csv` listing
/// the selected coordinates. Returns the files written.
pub fn dump_masks(model: &Model, sample: &ModalitySample, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    if model.mode() != Mode::Mesm {
        return Err(Error::InvalidArgument(
            "checkpoint is fe2e; only mesm models select sites".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let mut g = Graph::new(&model.params);
    let mut ledger = FlopsLedger::new();
    let f = model.forward(&mut g, sample, model.config.model.modalities, &mut ledger)?;
    let mut written = Vec::new();
    let csv_path = out.join("masks.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "layer,s,h,w")?;
    for rec in &f.blocks {
        let layer = format!("{}_block{}", rec.modality.name(), rec.block);
        rec.trace.mask.write_csv_rows(&layer, &mut csv)?;
        for s in 0..rec.trace.mask.extents()[0] {
            let path = out.join(format!("{layer}_s{s}.pgm"));
            rec.trace.mask.write_pgm(s, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            written.push(path);
        }
        let scores = crate::attention::AttentionScoreMap::from_tensor(g.value(rec.trace.scores))?;
        let path = out.join(format!("{layer}_scores.csv"));
        scores.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        written.push(path);
    }
    csv.flush()?;
    written.push(csv_path);
    Ok(written)
}

/// Writes `manifest.jsonl` with `config.samples` records, plus frame and
/// spectrogram CSV dumps of the first `dump` samples.
pub fn gen_data(config: &RunConfig, seed: u64, dump: usize, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let manifest = Manifest::synthetic(config.samples, config.model.classes, seed)?;
    manifest.save(&out.join("manifest.jsonl"))?;
    for r in manifest.records.iter().take(dump) {
        let s = synth_sample(r.class, r.seed, &config.data)?;
        for (name, items) in [("frames", &s.frames), ("audio", &s.audio)] {
            let dense = crate::data::stack_sequence(items)?;
            let [_, ss, h, w] = <[usize; 4]>::try_from(dense.shape()).expect("rank 4");
            let map = to_sparse(&dense, &BinaryMap::ones([ss, h, w]))?;
            let f = std::fs::File::create(out.join(format!("{}_{name}.csv", r.id)))?;
            map.write_csv(std::io::BufWriter::new(f))?;
        }
    }
    Ok(manifest)
}
