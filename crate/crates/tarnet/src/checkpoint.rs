//! Checkpoint files.
//!
//! A plain-text header followed by raw little-endian `f64` data:
//!
//! ```text
//! TARNET1
//! config <n bytes>
//! <effective run configuration, TOML>
//! speakers <count>
//! <one label name per line, in class-index order>
//! epoch <completed epochs>
//! step <optimizer steps>
//! best_val_top1 <f64>
//! rng <hex seed> <stream> <word position>
//! param <name> <dims, comma separated> <offset>
//! ...
//! velocity <name> <dims> <offset>     (only when momentum state exists)
//! END <total f64 count>
//! <little-endian f64 values>
//! ```
//!
//! Offsets count `f64` values from the start of the data section.
//! Floats in the header are written in shortest round-trip form, so a save
//! and load reproduce every value bit for bit.

use std::path::Path;

use tarnet_core::model::TarnetModel;
use tarnet_core::rng::RngState;
use tarnet_core::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &str = "TARNET1";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub speakers: Vec<String>,
    pub epoch: usize,
    pub step: u64,
    pub best_val_top1: f64,
    pub rng: RngState,
    /// Parameter name and value, in store order.
    pub params: Vec<(String, Tensor)>,
    /// Momentum buffers in store order, if any.
    pub velocity: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let config = self.config.to_toml();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("config {}\n{}\n", config.len(), config));
        head.push_str(&format!("speakers {}\n", self.speakers.len()));
        for s in &self.speakers {
            head.push_str(s);
            head.push('\n');
        }
        head.push_str(&format!("epoch {}\nstep {}\nbest_val_top1 {:?}\n", self.epoch, self.step, self.best_val_top1));
        head.push_str(&format!(
            "rng {} {} {}\n",
            hex::encode(self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        ));
        let mut offset = 0usize;
        let mut arrays: Vec<&Tensor> = Vec::new();
        let mut entry = |head: &mut String, tag: &str, name: &str, t: &'_ Tensor| {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("{tag} {name} {} {offset}\n", dims.join(",")));
            offset += t.len();
        };
        for (name, t) in &self.params {
            entry(&mut head, "param", name, t);
            arrays.push(t);
        }
        if let Some(vel) = &self.velocity {
            for ((name, _), t) in self.params.iter().zip(vel) {
                entry(&mut head, "velocity", name, t);
                arrays.push(t);
            }
        }
        head.push_str(&format!("END {offset}\n"));
        let mut out = head.into_bytes();
        out.reserve(offset * 8);
        for t in arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.line()? != MAGIC {
            return Err(r.err("not a tarnet checkpoint (bad magic)"));
        }
        let n: usize = r.keyed("config")?;
        let config_bytes = r.take(n)?;
        let text = std::str::from_utf8(config_bytes).map_err(|_| r.err("configuration is not UTF-8"))?;
        let config = RunConfig::from_toml(text).map_err(|e| r.err(format!("embedded configuration: {}", e.message())))?;
        if !r.line()?.is_empty() {
            return Err(r.err("configuration block is not terminated"));
        }
        let n_spk: usize = r.keyed("speakers")?;
        let speakers = (0..n_spk).map(|_| r.line().map(str::to_string)).collect::<Result<Vec<_>>>()?;
        let epoch = r.keyed("epoch")?;
        let step = r.keyed("step")?;
        let best_val_top1 = r.keyed("best_val_top1")?;
        let rng = {
            let line = r.line()?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 || f[0] != "rng" {
                return Err(r.err(format!("expected rng line, found {line:?}")));
            }
            let mut seed = [0u8; 32];
            hex::decode_to_slice(f[1], &mut seed).map_err(|e| r.err(format!("rng seed: {e}")))?;
            RngState {
                seed,
                stream: r.num(f[2])?,
                word_pos: r.num(f[3])?,
            }
        };
        let mut entries = Vec::new();
        let total = loop {
            let line = r.line()?;
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["END", n] => break r.num::<usize>(n)?,
                [tag @ ("param" | "velocity"), name, dims, offset] => {
                    let shape = dims.split(',').map(|d| r.num(d)).collect::<Result<Vec<usize>>>()?;
                    entries.push((*tag == "velocity", name.to_string(), shape, r.num::<usize>(offset)?));
                }
                _ => return Err(r.err(format!("unexpected header line {line:?}"))),
            }
        };
        let data = r.take(total * 8)?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes after data", bytes.len() - r.pos)));
        }
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        let mut expected = 0usize;
        for (is_vel, name, shape, offset) in entries {
            let len: usize = shape.iter().product();
            if offset != expected || offset + len > total {
                return Err(r.err(format!("array {name} has offset {offset}, expected {expected}")));
            }
            expected += len;
            let values = data[offset * 8..(offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, values)?;
            if is_vel {
                let idx = velocity.len();
                if params.get(idx).map(|(n, _): &(String, Tensor)| n) != Some(&name) {
                    return Err(r.err(format!("velocity {name} does not follow parameter order")));
                }
                velocity.push(t);
            } else {
                if !velocity.is_empty() {
                    return Err(r.err("parameter listed after velocity arrays"));
                }
                params.push((name, t));
            }
        }
        if expected != total {
            return Err(r.err(format!("arrays cover {expected} values, END says {total}")));
        }
        if !velocity.is_empty() && velocity.len() != params.len() {
            return Err(r.err("velocity does not cover every parameter"));
        }
        Ok(Checkpoint {
            config,
            speakers,
            epoch,
            step,
            best_val_top1,
            rng,
            params,
            velocity: if velocity.is_empty() { None } else { Some(velocity) },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename, so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model with the stored weights. Names and shapes must
    /// match the architecture described by the embedded configuration.
    pub fn model(&self) -> Result<TarnetModel> {
        let cfg = self.config.model_config(self.speakers.len())?;
        let mut model = TarnetModel::new(&cfg, self.config.seed)?;
        let names: Vec<&str> = model.store().iter().map(|(_, p)| p.name.as_str()).collect();
        let stored: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if names != stored {
            return Err(tarnet_core::Error::Data(format!(
                "checkpoint parameters do not match the configured architecture ({} stored, {} expected)",
                stored.len(),
                names.len()
            ))
            .into());
        }
        model.store_mut().load_values(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_model(
        config: &RunConfig,
        speakers: &[String],
        model: &TarnetModel,
        epoch: usize,
        step: u64,
        best_val_top1: f64,
        rng: RngState,
        velocity: Option<Vec<Tensor>>,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            speakers: speakers.to_vec(),
            epoch,
            step,
            best_val_top1,
            rng,
            params: model.store().iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect(),
            velocity,
        }
    }
}

/// Loads a checkpoint and its model in one go.
pub fn load_model(path: &Path) -> Result<(Checkpoint, TarnetModel)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err("file is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| self.err("header is truncated"))?;
        let line = std::str::from_utf8(&rest[..n]).map_err(|_| self.err("header is not UTF-8"))?;
        self.pos += n + 1;
        Ok(line)
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("malformed number {s:?}")))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => self.num(v),
            _ => Err(self.err(format!("expected {key:?} line, found {line:?}"))),
        }
    }
}
