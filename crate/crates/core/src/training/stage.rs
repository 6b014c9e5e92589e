use serde::{Deserialize, Serialize};

use crate::augmentation::MaskSpec;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{GradBuffer, LrSchedule, Optimizer, OptimizerKind};
use crate::params::{FreezeSet, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Masked-LM pre-training of the speech encoder on its own.
    Mlm,
    PtKd,
    AmPt,
    Ft,
    TeacherFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mlm: f64,
    pub kd: f64,
    pub ce: f64,
    pub ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mlm: 1.0, kd: 1.0, ce: 1.0, ctc: 1.0 }
    }
}

/// Data augmentation switches and mask shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaConfig {
    pub enabled: bool,
    pub token: MaskSpec,
    pub time: MaskSpec,
    pub channel: MaskSpec,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            token: MaskSpec { p: 0.02, m: 5 },
            time: MaskSpec { p: 0.04, m: 5 },
            channel: MaskSpec { p: 0.04, m: 5 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weights: LossWeights,
    pub frozen: FreezeSet,
    /// Optimizer steps; 0 means no step limit.
    pub max_steps: usize,
    /// Passes over the data; 0 means no epoch limit.
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
    pub seed: u64,
    #[serde(default)]
    pub da: DaConfig,
    /// Span mask for the masked-LM objective.
    #[serde(default = "default_mlm_mask")]
    pub mlm_mask: MaskSpec,
}

fn default_mlm_mask() -> MaskSpec {
    MaskSpec { p: 0.05, m: 10 }
}

impl StageConfig {
    fn base(stage: Stage, lr: f64, schedule: LrSchedule, frozen: &[ParamGroup]) -> Self {
        Self {
            stage,
            lr,
            schedule,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            frozen: FreezeSet::of(frozen),
            max_steps: 0,
            max_epochs: 0,
            patience: 3,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
            da: DaConfig::default(),
            mlm_mask: default_mlm_mask(),
        }
    }

    pub fn teacher_toy() -> Self {
        use ParamGroup::*;
        Self {
            max_epochs: 50,
            patience: 5,
            ..Self::base(Stage::TeacherFt, 2e-3, LrSchedule::Constant, &[QuantizerCodebook, SpeechEncoder, Am, Heads])
        }
    }

    pub fn mlm_toy() -> Self {
        use ParamGroup::*;
        Self {
            max_steps: 600,
            ..Self::base(Stage::Mlm, 1e-3, LrSchedule::LinearToZero { total_steps: 600 }, &[QuantizerCodebook, Teacher, Am])
        }
    }

    pub fn pt_kd_toy() -> Self {
        use ParamGroup::*;
        Self {
            max_steps: 600,
            ..Self::base(Stage::PtKd, 2e-3, LrSchedule::LinearToZero { total_steps: 600 }, &[QuantizerCodebook, Teacher, Am])
        }
    }

    pub fn am_pt_toy() -> Self {
        use ParamGroup::*;
        Self {
            max_steps: 2000,
            patience: 4,
            ..Self::base(Stage::AmPt, 2e-3, LrSchedule::Constant, &[QuantizerCodebook, SpeechEncoder, Teacher])
        }
    }

    pub fn ft_toy() -> Self {
        use ParamGroup::*;
        Self {
            max_epochs: 40,
            patience: 40,
            weights: LossWeights { kd: 0.1, ..LossWeights::default() },
            ..Self::base(Stage::Ft, 3e-3, LrSchedule::Anneal { gamma: 1.05 }, &[QuantizerCodebook, SpeechEncoder, Teacher])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.mlm, w.kd, w.ce, w.ctc].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let LrSchedule::Anneal { gamma } = self.schedule {
            if !(gamma >= 1.0) {
                return Err(Error::Config(format!("anneal gamma must be >= 1, got {gamma}")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_steps == 0 && self.max_epochs == 0 {
            return Err(Error::Config("a stage needs max_steps or max_epochs".into()));
        }
        for s in [self.da.token, self.da.time, self.da.channel, self.mlm_mask] {
            s.validate()?;
        }
        Ok(())
    }
}

/// One optimizer update over a minibatch: a graph per example, gradients
/// averaged, clipped, then applied to the store `store` selects. Returns the
/// mean loss.
pub(crate) fn minibatch_step<M, T>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    opt: &mut Optimizer,
    cfg: &StageConfig,
    lr: f64,
    batch: &[T],
    mut loss: impl FnMut(&M, &mut Graph, &T) -> Result<Var>,
) -> Result<f64> {
    let mut buf = GradBuffer::for_store(store(model));
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for item in batch {
        let mut g = Graph::new(cfg.frozen.clone());
        let l = loss(model, &mut g, item)?;
        total += g.value(l).item();
        let grads = g.backward(l);
        buf.accumulate(&g, &grads, scale);
    }
    buf.clip_to(cfg.clip_norm);
    opt.step(store(model), &buf, lr, &cfg.frozen);
    Ok(total * scale)
}
