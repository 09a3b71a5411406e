//! Command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tarnet_core::data::{synth_corpus, Partition};
use tarnet_core::gradcheck;
use tarnet_core::metrics::DEFAULT_PERMUTATIONS;

use crate::checkpoint::Checkpoint;
use crate::config::{self, RunConfig};
use crate::error::{self, Error, Result};
use crate::eval::{compare, evaluate_checkpoint};
use crate::inspect::{candidates_table, search_params, summarize};
use crate::manifest::{self, assign_splits, write_manifest, Corpus};
use crate::trainer::{train, TrainOptions};
use crate::wav::write_wav;

#[derive(Debug, Parser)]
#[command(name = "tarnet", version, about = "Multi-scale temporal speaker identification")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply to every key it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speaker corpus: WAV files plus a manifest.
    Synth(SynthArgs),
    /// Build a manifest for an existing root/<speaker>/*.wav tree.
    Ingest(IngestArgs),
    /// Train a model; writes checkpoints and an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Print layer shapes, parameter count and receptive field.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives <speaker>/<utterance>.wav and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    pub utterances: Option<usize>,
    /// Utterance length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus root holding one directory per speaker.
    #[arg(long)]
    pub root: PathBuf,
    /// Manifest to write. Defaults to <root>/manifest.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, the epoch log and config.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint; its configuration replaces --config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total number of epochs to reach.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop_seconds: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Pooling variant: asp, sp, avg or max.
    #[arg(long)]
    pub pooling: Option<String>,
    /// Encoder stages to keep, e.g. S, M, L, SM or SML.
    #[arg(long)]
    pub stages: Option<String>,
    /// Also keep epoch-<k>.ckpt every K epochs.
    #[arg(long, value_name = "K")]
    pub save_every: Option<usize>,
    /// Do not print per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Second checkpoint; runs the paired approximate randomization test.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    /// Append a summary row to this CSV file.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Write per-utterance predictions to this CSV file.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Stop gradients through the layer-norm statistics. The check must
    /// then fail; used to confirm the checker catches real bugs.
    #[arg(long)]
    pub break_gln: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Number of speaker classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub stages: Option<String>,
    /// List (C, H, D, E) grid configurations within 1% of this count.
    #[arg(long, value_name = "COUNT")]
    pub search_params: Option<f64>,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        config::usage_if(j == 0, "--jobs must be at least 1")?;
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| error::usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| dispatch(&cli))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Inspect(a) => cmd_inspect(cli, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(n) = a.speakers {
        cfg.data.speakers = n;
    }
    if let Some(n) = a.utterances {
        cfg.data.utterances_per_speaker = n;
    }
    if let Some(d) = a.duration {
        cfg.data.duration = d;
    }
    config::usage_if(cfg.data.speakers < 2, "closed-set identification needs at least 2 speakers")?;
    config::usage_if(
        cfg.data.utterances_per_speaker < 3,
        "each speaker needs at least 3 utterances to appear in every split",
    )?;
    config::usage_if(!(cfg.data.duration > 0.0), "duration must be positive")?;
    cfg.validate()?;
    let corpus = synth_corpus(&cfg.synth_config())?;
    create_dir(&a.out)?;
    cfg.dump(&a.out)?;
    let spk_width = (cfg.data.speakers - 1).to_string().len().max(2);
    let utt_width = (cfg.data.utterances_per_speaker - 1).to_string().len().max(3);
    let mut counts = vec![0usize; cfg.data.speakers];
    let mut entries = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let speaker = format!("spk{:0spk_width$}", u.speaker);
        let dir = a.out.join(&speaker);
        if counts[u.speaker] == 0 {
            create_dir(&dir)?;
        }
        let rel = format!("{speaker}/utt{:0utt_width$}.wav", counts[u.speaker]);
        counts[u.speaker] += 1;
        write_wav(&a.out.join(&rel), &u.waveform)?;
        entries.push((rel, speaker, u.duration()));
    }
    let rows = assign_splits(entries, &cfg.split_spec())?;
    let path = a.out.join("manifest.csv");
    write_manifest(&path, &rows)?;
    println!("wrote {} utterances of {} speakers to {}", rows.len(), cfg.data.speakers, path.display());
    Ok(())
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| a.root.join("manifest.csv"));
    let base = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let rows = manifest::ingest(&a.root, base, &cfg.split_spec())?;
    write_manifest(&out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.resume {
        Some(p) => {
            let c = Checkpoint::load(p)?.config;
            if let Some(s) = cli.seed {
                config::usage_if(s != c.seed, "--seed differs from the seed stored in the resumed checkpoint")?;
            }
            c
        }
        None => base_config(cli)?,
    };
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.crop_seconds {
        cfg.train.crop_seconds = v;
    }
    if let Some(v) = a.momentum {
        cfg.train.momentum = v;
    }
    if let Some(p) = &a.pooling {
        cfg.pooling.kind = p.parse::<tarnet_core::pooling::PoolingKind>()?.as_str().to_string();
    }
    if let Some(s) = &a.stages {
        cfg.restrict_stages(s)?;
    }
    cfg.validate()?;
    let corpus = Corpus::load(&a.manifest)?;
    let opts = TrainOptions {
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
        save_every: a.save_every,
        quiet: a.quiet,
    };
    let outcome = train(&cfg, &corpus, &opts)?;
    println!(
        "finished at epoch {} after {} steps; best validation top1 {}",
        outcome.epoch,
        outcome.step,
        if outcome.best_val_top1.is_finite() { format!("{:.4}", outcome.best_val_top1) } else { "n/a".into() }
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let split = Partition::parse(&a.split).map_err(|_| error::usage(format!("unknown split {:?}", a.split)))?;
    // Fail on a missing checkpoint before reading any audio.
    for p in std::iter::once(&a.checkpoint).chain(&a.compare) {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
    }
    let corpus = Corpus::load(&a.manifest)?;
    let ev = evaluate_checkpoint(&a.checkpoint, &corpus, split)?;
    print!("{}", ev.table());
    if let Some(p) = &a.summary {
        ev.append_summary(p)?;
    }
    if let Some(p) = &a.predictions {
        ev.write_predictions(&corpus, p)?;
    }
    if let Some(other) = &a.compare {
        config::usage_if(a.permutations == 0, "--permutations must be at least 1")?;
        let ev_b = evaluate_checkpoint(other, &corpus, split)?;
        print!("{}", ev_b.table());
        if let Some(p) = &a.summary {
            ev_b.append_summary(p)?;
        }
        let ar = compare(&ev, &ev_b, a.permutations, cli.seed.unwrap_or(0))?;
        println!(
            "approximate randomization: |top1 difference| {:.4}, p = {:.4} ({} permutations, seed {})",
            ar.observed, ar.p_value, ar.n_permutations, ar.seed
        );
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let report = gradcheck::run_all(cfg.seed, a.break_gln)?;
    println!("{:<48} {:>8} {:>12}", "check", "entries", "max rel err");
    for r in &report.results {
        println!(
            "{:<48} {:>8} {:>12.3e} {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("all {} checks below {:e}", report.results.len(), gradcheck::REL_TOL);
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        Err(tarnet_core::Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn cmd_inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(p) = &a.pooling {
        cfg.pooling.kind = p.parse::<tarnet_core::pooling::PoolingKind>()?.as_str().to_string();
    }
    if let Some(s) = &a.stages {
        cfg.restrict_stages(s)?;
    }
    cfg.validate()?;
    let summary = summarize(&cfg, a.classes)?;
    print!("{}", summary.text);
    if let Some(target) = a.search_params {
        config::usage_if(!(target > 0.0), "--search-params needs a positive count")?;
        let cands = search_params(&cfg.model_config(a.classes)?, target);
        print!("{}", candidates_table(target, &cands));
    }
    Ok(())
}
