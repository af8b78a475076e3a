//! `hagcn` command-line tool.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hagcn::attention::Branch;
use hagcn::autodiff::grad_check_many;
use hagcn::evaluation::{
    ablation_eval, export_masks, fuse_streams, labels_of, predict_dataset, read_scores_csv,
    write_scores_csv, EvalReport,
};
use hagcn::graph::Subset;
use hagcn::ingest::{
    assemble_batch, load_manifest, read_cache_file, write_cache_file, Augment, SkeletonSequence,
    StreamKind,
};
use hagcn::network::{load_checkpoint, save_checkpoint, Model, ModelConfig, TrainingState};
use hagcn::params::{Ctx, Mode};
use hagcn::training::{append_history, make_synthetic, train};
use hagcn::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{Overrides, RunConfig};

/// Max relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-4;
const CHECKPOINT: &str = "checkpoint.ckpt";

/// Error with its process exit status: 1 for configuration and validation
/// problems, 2 for failures while running.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            msg: msg.into(),
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            msg: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "hagcn",
    version,
    about = "Hybrid-attention GCN for skeleton action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// joint, bone, joint-motion or bone-motion.
    #[arg(long)]
    stream: Option<StreamKind>,
    /// Attention branch to switch off at evaluation: ra or rd.
    #[arg(long)]
    disable: Option<Branch>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset cache from a manifest of raw skeleton files.
    Prepare {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, history.csv and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; writes report.json and scores.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate with each attention branch switched off in turn.
    Ablate {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sum saved per-stream score files.
    Fuse {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Comma-separated stream weights.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the model gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Print the number of learnable scalars.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Write the attention masks of one layer as CSV and PGM.
    ExportMask {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = "inward")]
        subset: String,
        /// Dataset index of the sample to visualize.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset cache.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let flags = Overrides {
        seed: common.seed,
        stream: common.stream,
        disable: common.disable,
    };
    RunConfig::load(common.config.as_deref(), base, &flags)
}

fn read_data(path: &Path) -> Result<Vec<SkeletonSequence>> {
    read_cache_file(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)
        .map(|c| c.model)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n").map_err(CliError::runtime)
}

fn prepare(manifest: &Path, out: &Path) -> Result<()> {
    let entries = load_manifest(manifest)?;
    let seqs = entries
        .iter()
        .map(|e| {
            e.load()
                .map_err(|err| CliError::runtime(format!("{}: {err}", e.path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    write_cache_file(out, &seqs)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    let train_path = cfg
        .paths
        .train
        .as_deref()
        .ok_or_else(|| CliError::config("paths.train is not set"))?;
    let train_set = read_data(train_path)?;
    let val_set = match cfg.paths.val.as_deref() {
        Some(p) => read_data(p)?,
        None => Vec::new(),
    };
    cfg.echo(out)?;
    let ckpt = out.join(CHECKPOINT);
    let (mut model, mut state) = if resume {
        let c = load_checkpoint(&ckpt)?;
        if c.model.config() != &cfg.model {
            return Err(CliError::config(
                "checkpoint model differs from the configured model",
            ));
        }
        (c.model, c.training.unwrap_or_default())
    } else {
        (
            Model::new(cfg.model.clone(), cfg.seed)?,
            TrainingState::default(),
        )
    };
    let history = out.join("history.csv");
    if !resume && history.exists() {
        fs::remove_file(&history).map_err(CliError::runtime)?;
    }
    let mut io_error: Option<CliError> = None;
    let records = train(
        &mut model,
        &mut state,
        &train_set,
        &val_set,
        &cfg.train,
        &cfg.data,
        |r| {
            let val = r.val_top1.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "epoch {} lr {:.5} loss {:.4} train {:.4} val {val}",
                r.epoch + 1,
                r.lr,
                r.train_loss,
                r.train_top1
            );
            if let Err(e) = append_history(&history, std::slice::from_ref(r)) {
                io_error.get_or_insert(e.into());
            }
        },
    )?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_checkpoint(&ckpt, &model, Some(&state))?;
    if let Some(last) = records.last() {
        println!("finished epoch {} -> {}", last.epoch + 1, ckpt.display());
    }
    Ok(())
}

fn run_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let seqs = read_data(data)?;
    cfg.echo(out)?;
    let scores = predict_dataset(
        &model,
        &seqs,
        &cfg.data,
        cfg.train.eval_batch_size,
        cfg.disable,
    )?;
    let labels = labels_of(&seqs);
    let report = EvalReport::from_scores(&scores, &labels)?;
    write_scores_csv(&out.join("scores.csv"), &scores, &labels)?;
    write_report(out, &report)?;
    println!(
        "top1 {:.4} top5 {:.4} ({} samples)",
        report.top1, report.top5, report.samples
    );
    Ok(())
}

fn run_ablate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let seqs = read_data(data)?;
    cfg.echo(out)?;
    let report = ablation_eval(&model, &seqs, &cfg.data, cfg.train.eval_batch_size)?;
    write_report(out, &report)?;
    if let Some(a) = &report.ablation {
        println!(
            "full {:.4} without-ra {:.4} without-rd {:.4}",
            a.full, a.without_ra, a.without_rd
        );
    }
    Ok(())
}

fn run_fuse(scores: &[PathBuf], weights: Option<&[f64]>, out: &Path) -> Result<()> {
    let mut sets = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    for p in scores {
        let (s, l) =
            read_scores_csv(p).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
        if labels.as_ref().is_some_and(|prev| prev != &l) {
            return Err(CliError::config(format!(
                "{}: labels differ from the first score file",
                p.display()
            )));
        }
        labels = Some(l);
        sets.push(s);
    }
    let labels = labels.unwrap_or_default();
    let fused = fuse_streams(&sets, weights)?;
    let report = EvalReport::from_scores(&fused, &labels)?;
    fs::create_dir_all(out).map_err(CliError::runtime)?;
    write_scores_csv(&out.join("scores.csv"), &fused, &labels)?;
    write_report(out, &report)?;
    println!("fused top1 {:.4} top5 {:.4}", report.top1, report.top5);
    Ok(())
}

/// Checks the input and every parameter of a randomly initialized model.
fn gradcheck(cfg: &RunConfig) -> Result<f64> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let v = model.graph().num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::rand_uniform(&[2, 2, cfg.model.in_channels, 8, v], -1.0, 1.0, &mut rng);
    let names: Vec<String> = model.store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![x];
    inputs.extend(
        names
            .iter()
            .map(|n| model.store.param(n).map(|p| p.value.clone()))
            .collect::<hagcn::Result<Vec<_>>>()?,
    );
    let k = cfg.model.num_classes;
    let weights = Tensor::rand_uniform(&[2 * k], -1.0, 1.0, &mut rng).into_data();
    let report = grad_check_many(
        |tape, vars| {
            let mut ctx = Ctx::new(tape, &model.store, Mode::Train);
            for (n, v) in names.iter().zip(&vars[1..]) {
                ctx.bind(n.clone(), *v);
            }
            let y = model.logits(&mut ctx, vars[0])?;
            let y = ctx.tape.mul_const(y, weights.clone())?;
            Ok(ctx.tape.sum(y))
        },
        &inputs,
        1e-6,
        Some(8),
    )?;
    Ok(report.max_rel_error)
}

#[allow(clippy::too_many_arguments)]
fn run_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    layer: usize,
    subset: &str,
    sample: usize,
    out: &Path,
) -> Result<()> {
    let subset = Subset::parse(subset).ok_or_else(|| {
        CliError::config(format!(
            "unknown subset `{subset}` (expected identity, inward or outward)"
        ))
    })?;
    let model = load_model(checkpoint)?;
    let seqs = read_data(data)?;
    let seq = seqs.get(sample).ok_or_else(|| {
        CliError::config(format!(
            "sample {sample} out of range: the dataset has {}",
            seqs.len()
        ))
    })?;
    cfg.echo(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = assemble_batch(
        &[seq],
        cfg.data.stream,
        model.graph(),
        cfg.data.frames,
        cfg.data.persons,
        Augment::None,
        &mut rng,
    )?;
    for m in export_masks(&model, &batch.input, layer, subset, out)? {
        println!("{} {}", m.csv.display(), m.pgm.display());
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HAGCN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!("HAGCN_THREADS `{v}` is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::runtime)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare { manifest, out } => prepare(&manifest, &out),
        Command::Train {
            common,
            out,
            resume,
        } => run_train(&load_config(&common, RunConfig::default())?, &out, resume),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => run_eval(
            &load_config(&common, RunConfig::default())?,
            &checkpoint,
            &data,
            &out,
        ),
        Command::Ablate {
            common,
            checkpoint,
            data,
            out,
        } => run_ablate(
            &load_config(&common, RunConfig::default())?,
            &checkpoint,
            &data,
            &out,
        ),
        Command::Fuse {
            scores,
            weights,
            out,
        } => run_fuse(&scores, weights.as_deref(), &out),
        Command::Gradcheck { common } => {
            let base = RunConfig {
                model: ModelConfig::tiny(),
                ..RunConfig::default()
            };
            let err = gradcheck(&load_config(&common, base)?)?;
            println!("max relative error {err:.3e}");
            if err > GRADCHECK_TOL {
                return Err(CliError::runtime(format!(
                    "gradient check failed: {err:.3e} > {GRADCHECK_TOL:e}"
                )));
            }
            Ok(())
        }
        Command::Params { common } => {
            let cfg = load_config(&common, RunConfig::default())?;
            println!("{}", Model::new(cfg.model, cfg.seed)?.param_count());
            Ok(())
        }
        Command::ExportMask {
            common,
            checkpoint,
            data,
            layer,
            subset,
            sample,
            out,
        } => run_export(
            &load_config(&common, RunConfig::default())?,
            &checkpoint,
            &data,
            layer,
            &subset,
            sample,
            &out,
        ),
        Command::Synth { common, out } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let seqs = make_synthetic(&cfg.synthetic)?;
            write_cache_file(&out, &seqs)?;
            println!("wrote {} sequences to {}", seqs.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: ").trim());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
