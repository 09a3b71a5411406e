//! The training loop.
//!
//! Each epoch shuffles the training utterances, draws one random crop per
//! utterance and takes one SGD step per batch. The shuffle and the crop
//! offsets come from a single generator whose exact position is stored in
//! every checkpoint, so a resumed run replays the same batches.
//!
//! Per-example gradients are computed in parallel, but they are summed in
//! fixed groups of `train.grad_chunk` examples and the group sums are added
//! in batch order. The result is bit-identical for any number of threads.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use tarnet_core::data::{crop, Partition};
use tarnet_core::frontend::MelExtractor;
use tarnet_core::metrics::{argmax, topk_accuracy};
use tarnet_core::model::TarnetModel;
use tarnet_core::rng::{self, Rng, RngState};
use tarnet_core::train::{example_gradient, sgd_step, GradSum};
use tarnet_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::Corpus;

pub const EPOCH_LOG_VERSION: &str = "# tarnet epochs v1";
pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_top1,val_top5,wall_seconds";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Also keep `epoch-<k>.ckpt` every this many epochs.
    pub save_every: Option<usize>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running Top-1 on the training crops, measured before each step.
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TarnetModel,
    pub history: Vec<EpochStats>,
    pub epoch: usize,
    pub step: u64,
    pub best_val_top1: f64,
    pub stopped_early: bool,
}

/// Log-Mel features of every listed utterance, full length.
pub fn full_features(fe: &MelExtractor, corpus: &Corpus, idx: &[usize]) -> Result<Vec<Tensor>> {
    idx.par_iter()
        .map(|&i| Ok(fe.extract(&corpus.items[i].waveform)?.values))
        .collect()
}

/// Logits of the model for each feature matrix.
pub fn predict(model: &TarnetModel, feats: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    feats
        .par_iter()
        .map(|f| Ok(model.logits(f)?.into_data()))
        .collect()
}

struct State {
    model: TarnetModel,
    velocity: Option<Vec<Tensor>>,
    epoch: usize,
    step: u64,
    best_val_top1: f64,
    rng: Rng,
}

pub fn train(cfg: &RunConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tcfg = cfg.train_config();
    let speakers = corpus.labels.speakers.clone();
    let model_cfg = cfg.model_config(speakers.len())?;
    model_cfg.validate()?;
    corpus.check_closed_set()?;
    let fe = MelExtractor::new(&cfg.frontend_config())?;
    for item in &corpus.items {
        if item.waveform.sample_rate() != fe.config().sample_rate {
            return Err(tarnet_core::Error::Data(format!(
                "{} is sampled at {} Hz, the front-end expects {} Hz",
                item.path.display(),
                item.waveform.sample_rate(),
                fe.config().sample_rate
            ))
            .into());
        }
    }
    let train_idx = corpus.indices(Partition::Train);
    let val_idx = corpus.indices(Partition::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(tarnet_core::Error::Usage("training needs non-empty train and validation splits".into()).into());
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    cfg.dump(&opts.out_dir)?;

    let mut st = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.speakers != speakers {
                return Err(tarnet_core::Error::Data(format!(
                    "{} was trained on different speakers than the manifest lists",
                    path.display()
                ))
                .into());
            }
            if ck.config.model_config(speakers.len())? != model_cfg {
                return Err(tarnet_core::Error::Config(format!(
                    "{} has a different architecture from the run configuration",
                    path.display()
                ))
                .into());
            }
            truncate_log(&opts.out_dir.join("epochs.csv"), ck.epoch)?;
            State {
                model: ck.model()?,
                velocity: ck.velocity,
                epoch: ck.epoch,
                step: ck.step,
                best_val_top1: ck.best_val_top1,
                rng: ck.rng.restore(),
            }
        }
        None => {
            let st = State {
                model: TarnetModel::new(&model_cfg, cfg.seed)?,
                velocity: None,
                epoch: 0,
                step: 0,
                best_val_top1: f64::NEG_INFINITY,
                rng: rng::stream(cfg.seed, "train"),
            };
            save(cfg, &speakers, &st, &opts.out_dir.join("last.ckpt"))?;
            st
        }
    };

    let val_feats = if st.epoch < tcfg.epochs { full_features(&fe, corpus, &val_idx)? } else { Vec::new() };
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| corpus.label(i)).collect();
    let log_path = opts.out_dir.join("epochs.csv");
    let mut history = Vec::new();
    let mut stopped_early = false;
    let chunk = cfg.train.grad_chunk;

    while st.epoch < tcfg.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut st.rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let crops = batch
                .iter()
                .map(|&i| crop(&corpus.items[i].waveform, tcfg.crop_seconds, &mut st.rng))
                .collect::<tarnet_core::Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| corpus.label(i)).collect();
            let model = &st.model;
            let partials = crops
                .par_chunks(chunk)
                .zip(labels.par_chunks(chunk))
                .map(|(ws, ls)| {
                    let mut sum = GradSum::default();
                    let mut hits = 0usize;
                    for (w, &label) in ws.iter().zip(ls) {
                        let feats = fe.extract(w)?;
                        let ex = example_gradient(model, &feats.values, label)?;
                        hits += usize::from(argmax(ex.logits.data()) == label);
                        sum.add(&ex);
                    }
                    Ok((sum, hits))
                })
                .collect::<tarnet_core::Result<Vec<_>>>()?;
            let mut total = GradSum::default();
            for (part, hits) in &partials {
                total.merge(part);
                correct += hits;
            }
            loss_sum += total.loss;
            let (grads, _) = total.mean();
            sgd_step(st.model.store_mut(), &grads, &tcfg, st.step, &mut st.velocity)?;
            st.step += 1;
        }
        st.epoch += 1;

        let scores = predict(&st.model, &val_feats)?;
        let val_top1 = topk_accuracy(&scores, &val_labels, 1)?;
        let val_top5 = topk_accuracy(&scores, &val_labels, 5)?;
        let stats = EpochStats {
            epoch: st.epoch,
            train_loss: loss_sum / order.len() as f64,
            train_top1: correct as f64 / order.len() as f64,
            val_top1,
            val_top5,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if !stats.train_loss.is_finite() {
            return Err(tarnet_core::Error::Numeric(format!("training loss is {} in epoch {}", stats.train_loss, st.epoch)).into());
        }
        append_log(&log_path, &stats)?;
        if !opts.quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train top1 {:.3}  val top1 {:.3}  top5 {:.3}  {:.1}s",
                stats.epoch, stats.train_loss, stats.train_top1, stats.val_top1, stats.val_top5, stats.wall_seconds
            );
        }
        if val_top1 > st.best_val_top1 {
            st.best_val_top1 = val_top1;
            save(cfg, &speakers, &st, &opts.out_dir.join("best.ckpt"))?;
        }
        save(cfg, &speakers, &st, &opts.out_dir.join("last.ckpt"))?;
        if opts.save_every.is_some_and(|k| k > 0 && st.epoch % k == 0) {
            save(cfg, &speakers, &st, &opts.out_dir.join(format!("epoch-{}.ckpt", st.epoch)))?;
        }
        let stop = cfg.train.stop_at_train_top1 > 0.0 && stats.train_top1 >= cfg.train.stop_at_train_top1;
        history.push(stats);
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model: st.model,
        history,
        epoch: st.epoch,
        step: st.step,
        best_val_top1: st.best_val_top1,
        stopped_early,
    })
}

fn save(cfg: &RunConfig, speakers: &[String], st: &State, path: &Path) -> Result<()> {
    Checkpoint::from_model(
        cfg,
        speakers,
        &st.model,
        st.epoch,
        st.step,
        st.best_val_top1,
        RngState::capture(&st.rng),
        st.velocity.clone(),
    )
    .save(path)
}

fn append_log(path: &Path, s: &EpochStats) -> Result<()> {
    let io = |e| Error::io(path, e);
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{EPOCH_LOG_VERSION}\n{EPOCH_LOG_HEADER}").map_err(io)?;
    }
    writeln!(
        f,
        "{},{:?},{:?},{:?},{:.3}",
        s.epoch, s.train_loss, s.val_top1, s.val_top5, s.wall_seconds
    )
    .map_err(io)
}

/// Drops log rows past `epoch`, so a resumed run does not repeat epochs.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
            Some(e) => e <= epoch,
            None => true,
        })
        .collect();
    std::fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::io(path, e))
}
