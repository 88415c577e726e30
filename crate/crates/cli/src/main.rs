use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sweepmatch::baselines::BaselineKind;
use sweepmatch::data::{generate_phantom_dataset, read_pgm, save_sweep};
use sweepmatch::encoder::load_checkpoint;
use sweepmatch::eval::{
    evaluate_model, evaluate_ncc, simulate_queries, train, EvalReport, Splits, TrainConfig,
};
use sweepmatch::objective::AblationMode;
use sweepmatch::retrieval::{build_index, load_index, query, save_index};

const VERSION: &str = match option_env!("SWEEPMATCH_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Parser)]
#[command(name = "sweepmatch", version, about = "Ultrasound sweep frame retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `training.seed` and `evaluation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// ncc | inter-sweep | ivpp | distance-ivpp | ours
    #[arg(long, global = true, value_parser = parse_baseline)]
    baseline: Option<BaselineKind>,
    /// sce | p1 | p2 | full
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<AblationMode>,
    /// Use the desk-scale epoch budget (`training.desk_epochs`).
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom sweeps into OUT/{train,val,test}.
    GenSynth(Common),
    /// Train an encoder; writes OUT/best.swmc.
    Train(Common),
    /// Embed a sweep into an index file.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sweep directory.
        #[arg(long)]
        sweep: PathBuf,
        /// Output index path (defaults to OUT/<sweep id>.swix).
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Retrieve the closest indexed frame for a PGM image.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        /// Defaults to best.swmc next to the index.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulated-query evaluation over the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Required for every baseline except ncc.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    BaselineKind::parse(s).ok_or_else(|| format!("unknown baseline `{s}`"))
}

fn parse_ablation(s: &str) -> Result<AblationMode, String> {
    AblationMode::parse(s).ok_or_else(|| format!("unknown ablation `{s}`"))
}

fn emit(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{v}")?;
    out.flush()?;
    Ok(())
}

/// Effective configuration plus the verbatim file text.
struct Loaded {
    cfg: TrainConfig,
    source: Option<String>,
}

impl Loaded {
    fn echo(&self) -> Value {
        json!({
            "source": self.source,
            "effective": self.cfg,
        })
    }
}

fn load_config(c: &Common) -> Result<Loaded> {
    let (mut cfg, source) = match &c.config {
        Some(p) => {
            let (cfg, text) = TrainConfig::load(p)?;
            (cfg, Some(text))
        }
        None => (TrainConfig::default(), None),
    };
    if let Some(s) = c.seed {
        cfg.training.seed = s;
        cfg.evaluation.seed = s;
    }
    if let Some(b) = c.baseline {
        cfg.training.baseline = b;
    }
    if let Some(a) = c.ablation {
        cfg.training.ablation = a;
    }
    if c.desk {
        cfg.training.max_epochs = cfg.training.desk_epochs;
    }
    cfg.validate()?;
    Ok(Loaded { cfg, source })
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| anyhow!("--out DIR is required"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn gen_synth(c: &Common) -> Result<()> {
    let l = load_config(c)?;
    let out = out_dir(c)?;
    let s = &l.cfg.synth;
    let mut phantom = s.phantom.clone();
    if let Some(seed) = c.seed {
        phantom.seed = seed;
    }
    let total = s.train_sweeps + s.val_sweeps + s.test_sweeps;
    let sweeps = generate_phantom_dataset(&phantom, total)?;
    for (k, sweep) in sweeps.iter().enumerate() {
        let split = if k < s.train_sweeps {
            "train"
        } else if k < s.train_sweeps + s.val_sweeps {
            "val"
        } else {
            "test"
        };
        let dir = out.join(split).join(&sweep.id);
        save_sweep(sweep, &dir)?;
        emit(&json!({"event": "sweep", "split": split, "id": sweep.id, "frames": sweep.len(), "path": dir}))?;
    }
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let l = load_config(c)?;
    let out = out_dir(c)?;
    emit(&json!({"event": "config", "config": l.echo(), "version": VERSION}))?;
    let splits = Splits::load(&l.cfg.data)?;
    let echo = serde_json::to_string(&l.echo())?;
    let outcome = train(
        &l.cfg,
        &splits.train,
        &splits.val,
        l.cfg.training.max_epochs,
        &out,
        Some(&echo),
        &mut |rec| {
            let _ = emit(&json!({"event": "epoch", "record": rec}));
        },
    )?;
    emit(&json!({
        "event": "trained",
        "checkpoint": outcome.best_checkpoint,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "alpha": outcome.params.alpha(),
        "parameter_count": outcome.params.parameter_count(),
    }))
}

fn build_index_cmd(c: &Common, checkpoint: &Path, sweep: &Path, index: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let sweep = sweepmatch::data::load_sweep(sweep)?;
    let idx = build_index(&sweep, &ck.params)?;
    let path = match index {
        Some(p) => p.to_path_buf(),
        None => out_dir(c)?.join(format!("{}.swix", sweep.id)),
    };
    save_index(&idx, &path)?;
    emit(&json!({
        "event": "index",
        "path": path,
        "sweep_id": idx.sweep_id,
        "entries": idx.len(),
        "embedding_dim": idx.embedding_dim,
        "alpha": idx.alpha,
    }))
}

fn query_cmd(index: &Path, images: &[PathBuf], checkpoint: Option<&Path>) -> Result<()> {
    let idx = load_index(index)?;
    let ck_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => index.with_file_name("best.swmc"),
    };
    let ck = load_checkpoint(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    for path in images {
        let image = read_pgm(path)?;
        let r = query(&idx, &image, &ck.params)?;
        let mut v = serde_json::to_value(&r)?;
        v["image"] = json!(path);
        emit(&v)?;
    }
    Ok(())
}

fn evaluate_cmd(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let l = load_config(c)?;
    let cfg = &l.cfg;
    let splits = Splits::load(&cfg.data)?;
    if splits.test.is_empty() {
        bail!("no test sweeps configured");
    }
    let kind = cfg.training.baseline;
    let params = match (kind, checkpoint) {
        (BaselineKind::Ncc, _) => None,
        (_, Some(p)) => Some(load_checkpoint(p)?.params),
        (_, None) => bail!("--checkpoint is required for baseline `{}`", kind.name()),
    };
    let e = &cfg.evaluation;
    let mut reports = Vec::new();
    for (k, sweep) in splits.test.iter().enumerate() {
        let queries = simulate_queries(sweep, e.queries_per_sweep, e.half_width, &e.affine, e.seed.wrapping_add(k as u64))?;
        let report = match &params {
            None => evaluate_ncc(sweep, &queries, cfg.encoder.input_size, e.success_threshold_mm)?,
            Some(p) => {
                let index = build_index(sweep, p)?;
                evaluate_model(&index, p, &queries, e.success_threshold_mm, None)?
            }
        };
        reports.push(report);
    }
    let report = EvalReport::merge(reports, e.success_threshold_mm);
    let doc = json!({
        "event": "report",
        "baseline": kind.name(),
        "ablation": cfg.training.ablation.table_name(),
        "report": report,
        "config": l.echo(),
        "version": VERSION,
    });
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("report-{}.json", kind.name()));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    }
    emit(&doc)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(c) => gen_synth(c),
        Command::Train(c) => train_cmd(c),
        Command::BuildIndex {
            common,
            checkpoint,
            sweep,
            index,
        } => build_index_cmd(common, checkpoint, sweep, index.as_deref()),
        Command::Query {
            index,
            image,
            checkpoint,
            ..
        } => query_cmd(index, image, checkpoint.as_deref()),
        Command::Evaluate { common, checkpoint } => evaluate_cmd(common, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"event": "error", "message": e.to_string(), "causes": chain}));
            ExitCode::FAILURE
        }
    }
}
