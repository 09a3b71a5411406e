//! Checkpoint evaluation on one split of a corpus.
//!
//! Evaluation uses full-length utterances. Summary rows go to a CSV with
//! the version comment `# tarnet eval v1` and the columns
//! `checkpoint,split,utterances,top1,top5,precision,recall,f1`; per-utterance
//! rows use `# tarnet predictions v1` and
//! `path,speaker,predicted,ranked,top1,top5`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use tarnet_core::data::Partition;
use tarnet_core::frontend::MelExtractor;
use tarnet_core::metrics::{approx_randomization, evaluate, ArResult, EvalReport};
use tarnet_core::model::TarnetModel;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::manifest::Corpus;
use crate::trainer::{full_features, predict};

pub const EVAL_LOG_VERSION: &str = "# tarnet eval v1";
pub const EVAL_LOG_HEADER: &str = "checkpoint,split,utterances,top1,top5,precision,recall,f1";
pub const PREDICTIONS_VERSION: &str = "# tarnet predictions v1";
pub const PREDICTIONS_HEADER: &str = "path,speaker,predicted,ranked,top1,top5";

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub checkpoint: PathBuf,
    pub split: Partition,
    /// Class names of the checkpoint.
    pub speakers: Vec<String>,
    /// Corpus indices of the evaluated utterances, in manifest order.
    pub indices: Vec<usize>,
    pub report: EvalReport,
}

/// Scores `model` on every utterance of `split`.
pub fn evaluate_model(ckpt: &Checkpoint, model: &TarnetModel, corpus: &Corpus, split: Partition) -> Result<(Vec<usize>, EvalReport)> {
    let indices = corpus.indices(split);
    if indices.is_empty() {
        return Err(tarnet_core::Error::Usage(format!("the {} split is empty", split.as_str())).into());
    }
    let labels = indices
        .iter()
        .map(|&i| {
            let name = &corpus.items[i].speaker;
            ckpt.speakers.iter().position(|s| s == name).ok_or_else(|| {
                Error::from(tarnet_core::Error::Data(format!(
                    "speaker {name:?} of {} is not a class of the checkpoint",
                    corpus.items[i].path.display()
                )))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fe = MelExtractor::new(&ckpt.config.frontend_config())?;
    let feats = full_features(&fe, corpus, &indices)?;
    let scores = predict(model, &feats)?;
    Ok((indices, evaluate(&scores, &labels)?))
}

pub fn evaluate_checkpoint(path: &Path, corpus: &Corpus, split: Partition) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    let (indices, report) = evaluate_model(&ckpt, &model, corpus, split)?;
    Ok(Evaluation {
        checkpoint: path.to_path_buf(),
        split,
        speakers: ckpt.speakers,
        indices,
        report,
    })
}

/// Paired AR test on the Top-1 correctness of two evaluations of the same
/// utterances.
pub fn compare(a: &Evaluation, b: &Evaluation, n_permutations: usize, seed: u64) -> Result<ArResult> {
    if a.indices != b.indices {
        return Err(tarnet_core::Error::Usage("compared evaluations cover different utterances".into()).into());
    }
    Ok(approx_randomization(&a.report.top1_flags(), &b.report.top1_flags(), n_permutations, seed)?)
}

impl Evaluation {
    pub fn table(&self) -> String {
        let r = &self.report;
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint  {}", self.checkpoint.display());
        let _ = writeln!(s, "split       {} ({} utterances)", self.split.as_str(), self.indices.len());
        for (name, v) in [
            ("top1", r.top1),
            ("top5", r.top5),
            ("precision", r.precision),
            ("recall", r.recall),
            ("f1", r.f1),
        ] {
            let _ = writeln!(s, "{name:<11} {v:.4}");
        }
        s
    }

    pub fn csv_record(&self) -> Vec<String> {
        let r = &self.report;
        vec![
            self.checkpoint.display().to_string(),
            self.split.as_str().to_string(),
            self.indices.len().to_string(),
            format!("{:?}", r.top1),
            format!("{:?}", r.top5),
            format!("{:?}", r.precision),
            format!("{:?}", r.recall),
            format!("{:?}", r.f1),
        ]
    }

    /// Appends the summary row, writing the header first for a new file.
    pub fn append_summary(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if fresh {
            writeln!(f, "{EVAL_LOG_VERSION}\n{EVAL_LOG_HEADER}").map_err(io)?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        w.write_record(self.csv_record()).map_err(|e| Error::format(path, e.to_string()))?;
        w.flush().map_err(io)
    }

    pub fn write_predictions(&self, corpus: &Corpus, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::fs::File::create(path).map_err(io)?;
        writeln!(f, "{PREDICTIONS_VERSION}").map_err(io)?;
        let mut w = csv::Writer::from_writer(f);
        let csv_err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(PREDICTIONS_HEADER.split(',')).map_err(csv_err)?;
        for (&i, item) in self.indices.iter().zip(&self.report.items) {
            let ranked: Vec<&str> = item.ranked.iter().map(|&c| self.speakers[c].as_str()).collect();
            w.write_record([
                corpus.items[i].path.display().to_string(),
                corpus.items[i].speaker.clone(),
                ranked[0].to_string(),
                ranked.join(";"),
                u8::from(item.top1).to_string(),
                u8::from(item.top5).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)
    }
}
