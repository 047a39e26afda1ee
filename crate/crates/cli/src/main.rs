use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mesm::data::{synth_sample, Manifest, Split};
use mesm::harness::{self, Dataset};
use mesm::model::{Modalities, Mode, Model, RunConfig};
use mesm::Error;

#[derive(Parser)]
#[command(name = "mesm", version, about = "Sparse cross-modal attention models on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Sample manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the modalities, e.g. `TA`.
    #[arg(long)]
    modalities: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics.csv and the best checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and test one sparse model per top-p value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated top-p values in (0, 1].
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        p_list: String,
    },
    /// Modality ablation table over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Comma-separated subsets, e.g. `TAV,T`; each yields a dense row and,
        /// for subsets with text, a sparse row.
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Write selection masks and score maps of one sample.
    DumpMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sample id from the manifest.
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic manifest and optional sample dumps.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to dump as CSV.
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::NonFinite(_)) => 3,
            CliError::Core(Error::Config(_) | Error::InvalidArgument(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` not found", path.display())))
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    require_file(&c.config, "config")?;
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.model.seed = seed;
    }
    if let Some(m) = &c.modalities {
        cfg.model.modalities = m.parse()?;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    require_file(path, "manifest")?;
    Ok(Manifest::load(path)?)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("bad {what} `{x}`"))))
        .collect()
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("unknown split `{s}`"))),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let manifest = load_manifest(&c.manifest)?;
            let data = Dataset::generate(&manifest, &cfg)?;
            let outcome = harness::run_train(&cfg, &data, Some(&c.out))?;
            info!("best epoch {} with valid WAcc {:.4}", outcome.best_epoch, outcome.best_wacc);
            println!("{}", c.out.join("metrics.csv").display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            split,
        } => {
            let split = parse_split(&split)?;
            require_file(&checkpoint.join("params.bin"), "checkpoint")?;
            let model = Model::load(&checkpoint)?;
            let manifest = load_manifest(&manifest)?;
            let data = Dataset::generate(&manifest, &model.config)?;
            let eval = harness::evaluate(&model, data.split(split), &data.pos_weight)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            std::fs::write(out.join("eval.csv"), eval.metrics_csv()).map_err(Error::from)?;
            std::fs::write(out.join("flops.csv"), format!("{}\n", eval.ledger.report())).map_err(Error::from)?;
            println!("mean WAcc {:.4}, mean F1 {:.4}", eval.mean_wacc(), eval.metrics.mean_f1());
        }
        Command::Sweep { common, p_list } => {
            let cfg = load_config(&common)?;
            let ps: Vec<f64> = parse_list(&p_list, "top-p")?;
            let manifest = load_manifest(&common.manifest)?;
            let data = Dataset::generate(&manifest, &cfg)?;
            let result = harness::run_sweep(&cfg, &data, &ps, Some(&common.out))?;
            print!("{}", result.to_csv());
        }
        Command::Ablate {
            config,
            manifest,
            out,
            seeds,
            modalities,
        } => {
            require_file(&config, "config")?;
            let cfg = RunConfig::load(&config)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let cells = modalities
                .map(|list| -> CliResult<Vec<(Mode, Modalities)>> {
                    let subsets: Vec<Modalities> = parse_list(&list, "modality subset")?;
                    let mesm = harness::ablation_subsets(Mode::Mesm);
                    let mut cells: Vec<_> = subsets.iter().map(|&s| (Mode::Fe2e, s)).collect();
                    cells.extend(subsets.iter().filter(|s| mesm.contains(s)).map(|&s| (Mode::Mesm, s)));
                    Ok(cells)
                })
                .transpose()?;
            let manifest = load_manifest(&manifest)?;
            let data = Dataset::generate(&manifest, &cfg)?;
            let table = harness::run_ablation(&cfg, &data, cells.as_deref(), &seeds, Some(&out))?;
            print!("{}", table.to_csv());
        }
        Command::DumpMasks {
            checkpoint,
            manifest,
            sample,
            out,
        } => {
            require_file(&checkpoint.join("params.bin"), "checkpoint")?;
            let model = Model::load(&checkpoint)?;
            let manifest = load_manifest(&manifest)?;
            let record = manifest
                .get(&sample)
                .ok_or_else(|| CliError::Usage(format!("sample `{sample}` not in manifest")))?;
            let s = synth_sample(record.class, record.seed, &model.config.data)?;
            let files = harness::dump_masks(&model, &s, &out)?;
            info!("wrote {} files", files.len());
        }
        Command::GenData {
            config,
            seed,
            out,
            dump,
        } => {
            let cfg = match config {
                Some(p) => {
                    require_file(&p, "config")?;
                    RunConfig::load(&p)?
                }
                None => RunConfig::default(),
            };
            let manifest = harness::gen_data(&cfg, seed, dump, &out)?;
            println!("{} samples -> {}", manifest.records.len(), out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
