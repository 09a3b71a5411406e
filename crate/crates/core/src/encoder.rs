//! Bottleneck projection, the three cascaded dilation stages and their
//! channel-wise fusion.

use alloc::format;
use alloc::vec::Vec;

use crate::blocks::{default_hidden, BlockShape, Conv1x1, TcnBlock};
use crate::error::{bail, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Short,
    Mid,
    Long,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Short, Stage::Mid, Stage::Long];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Short => "short",
            Stage::Mid => "mid",
            Stage::Long => "long",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Bottleneck width `C`.
    pub channels: usize,
    /// Expanded width inside each block.
    pub hidden: usize,
    /// Depthwise kernel taps `K` (odd).
    pub taps: usize,
    pub short: Vec<usize>,
    pub mid: Vec<usize>,
    pub long: Vec<usize>,
    /// How many times each stage's dilation sequence is repeated.
    pub repeats: usize,
    /// Width `D` after fusion.
    pub fusion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 64,
            hidden: default_hidden(64),
            taps: 3,
            short: alloc::vec![1, 2],
            mid: alloc::vec![4, 8],
            long: alloc::vec![16, 32],
            repeats: 3,
            fusion: 128,
        }
    }
}

impl EncoderConfig {
    pub fn dilations(&self, stage: Stage) -> &[usize] {
        match stage {
            Stage::Short => &self.short,
            Stage::Mid => &self.mid,
            Stage::Long => &self.long,
        }
    }

    /// Stages with at least one dilation; empty stages are identity maps
    /// and do not feed the fusion layer.
    pub fn active_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| !self.dilations(*s).is_empty())
            .collect()
    }

    /// Keep only the named stages, e.g. `"S"`, `"ML"`, `"SML"`.
    pub fn restrict_stages(&mut self, spec: &str) -> Result<()> {
        let mut keep = [false; 3];
        for ch in spec.chars() {
            match ch.to_ascii_uppercase() {
                'S' => keep[0] = true,
                'M' => keep[1] = true,
                'L' => keep[2] = true,
                _ => bail!(Usage, "unknown stage '{ch}' in {spec:?}; use letters from S, M, L"),
            }
        }
        if !keep.iter().any(|k| *k) {
            bail!(Usage, "stage selection {spec:?} keeps no stage");
        }
        for (k, list) in keep.iter().zip([&mut self.short, &mut self.mid, &mut self.long]) {
            if !k {
                list.clear();
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.repeats * (self.short.len() + self.mid.len() + self.long.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.fusion == 0 {
            bail!(Config, "encoder widths must be positive");
        }
        if self.taps.is_multiple_of(2) {
            bail!(Config, "depthwise kernel size must be odd, got {}", self.taps);
        }
        if self.repeats == 0 {
            bail!(Config, "repeats must be >= 1");
        }
        if self.active_stages().is_empty() {
            bail!(Config, "at least one stage needs dilations");
        }
        if Stage::ALL.iter().any(|s| self.dilations(*s).contains(&0)) {
            bail!(Config, "dilations must be >= 1");
        }
        Ok(())
    }

    /// Frames spanned by one output frame of the last stage:
    /// `1 + (K-1) * R * sum(all dilations)`.
    pub fn receptive_field(&self) -> usize {
        let total: usize = self.short.iter().chain(&self.mid).chain(&self.long).sum();
        1 + (self.taps - 1) * self.repeats * total
    }

    pub fn stage_receptive_field(&self, stage: Stage) -> usize {
        let total: usize = self.dilations(stage).iter().sum();
        1 + (self.taps - 1) * self.repeats * total
    }
}

/// Intermediate outputs `X_S`, `X_M`, `X_L`, each `[C x T]`.
#[derive(Debug, Clone, Copy)]
pub struct StageOutputs<'t> {
    pub x_s: Var<'t>,
    pub x_m: Var<'t>,
    pub x_l: Var<'t>,
}

impl<'t> StageOutputs<'t> {
    pub fn get(&self, stage: Stage) -> Var<'t> {
        match stage {
            Stage::Short => self.x_s,
            Stage::Mid => self.x_m,
            Stage::Long => self.x_l,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: [Vec<TcnBlock>; 3],
}

impl Encoder {
    /// Blocks are created in execution order: for each stage, for each
    /// repetition, for each dilation. None share parameters.
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut stages: [Vec<TcnBlock>; 3] = Default::default();
        for stage in Stage::ALL {
            for r in 0..config.repeats {
                for &d in config.dilations(stage) {
                    let shape = BlockShape {
                        channels: config.channels,
                        hidden: config.hidden,
                        taps: config.taps,
                        dilation: d,
                    };
                    let block_name = format!("{name}.{}.r{r}.d{d}", stage.name());
                    stages[stage.index()].push(TcnBlock::new(store, &block_name, shape, rng)?);
                }
            }
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    pub fn blocks(&self, stage: Stage) -> &[TcnBlock] {
        &self.stages[stage.index()]
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut TcnBlock> {
        self.stages.iter_mut().flatten()
    }

    /// Apply one stage's block sequence (repeated `R` times); identity when
    /// the stage has no dilations.
    pub fn run_stage<'t>(&self, p: &Bound<'t>, stage: Stage, x: Var<'t>) -> Result<Var<'t>> {
        self.blocks(stage)
            .iter()
            .try_fold(x, |h, block| block.forward(p, h))
    }

    /// Strict cascade `X_S = S(X_0)`, `X_M = M(X_S)`, `X_L = L(X_M)`.
    pub fn encode<'t>(&self, p: &Bound<'t>, x0: Var<'t>) -> Result<StageOutputs<'t>> {
        let shape = x0.shape();
        if shape.len() != 2 || shape[0] != self.config.channels {
            return Err(Error::shape("encode", &[self.config.channels], &shape));
        }
        let x_s = self.run_stage(p, Stage::Short, x0)?;
        let x_m = self.run_stage(p, Stage::Mid, x_s)?;
        let x_l = self.run_stage(p, Stage::Long, x_m)?;
        Ok(StageOutputs { x_s, x_m, x_l })
    }
}

/// Project `F x T` features to `C x T` with a 1x1 convolution.
pub fn bottleneck<'t>(p: &Bound<'t>, proj: &Conv1x1, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != proj.c_in {
        return Err(Error::shape("bottleneck", &[proj.c_out, proj.c_in], &shape));
    }
    proj.forward(p, x)
}

/// `ReLU(Conv1x1([X_S || X_M || X_L]))` over the active stages, `[D x T]`.
pub fn fuse<'t>(
    p: &Bound<'t>,
    proj: &Conv1x1,
    outputs: &StageOutputs<'t>,
    stages: &[Stage],
) -> Result<Var<'t>> {
    let parts: Vec<Var<'t>> = stages.iter().map(|s| outputs.get(*s)).collect();
    let Some(first) = parts.first() else {
        bail!(Config, "fusion needs at least one stage output");
    };
    let stacked = first.tape().concat(&parts, 0)?;
    if stacked.shape()[0] != proj.c_in {
        return Err(Error::shape("fuse", &[proj.c_out, proj.c_in], &stacked.shape()));
    }
    Ok(proj.forward(p, stacked)?.relu())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_formula() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.receptive_field(), 379);
        assert_eq!(cfg.stage_receptive_field(Stage::Short), 19);
        let mut small = cfg.clone();
        small.restrict_stages("S").unwrap();
        small.repeats = 1;
        assert_eq!(small.receptive_field(), 7);
        let one = EncoderConfig {
            short: alloc::vec![1],
            mid: alloc::vec![],
            long: alloc::vec![],
            repeats: 1,
            ..cfg
        };
        assert_eq!(one.receptive_field(), 3);
    }

    #[test]
    fn stage_selection() {
        let mut cfg = EncoderConfig::default();
        cfg.restrict_stages("ml").unwrap();
        assert_eq!(cfg.active_stages(), alloc::vec![Stage::Mid, Stage::Long]);
        assert!(cfg.clone().restrict_stages("X").is_err());
        assert!(cfg.restrict_stages("").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.taps = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.short.clear();
        cfg.mid.clear();
        cfg.long.clear();
        assert!(cfg.validate().is_err());
    }
}
