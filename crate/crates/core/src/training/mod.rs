//! Training stages: encoder pre-training with distillation, acoustic-model
//! pre-training and intent fine-tuning.

pub mod am_pretrain;
pub mod data;
pub mod finetune;
pub mod pretrain;
pub mod report;
pub mod stage;

use sha2::{Digest, Sha256};

pub use am_pretrain::{run_am_pretrain, AmPtReport};
pub use data::{encode_examples, Example};
pub use finetune::{evaluate, run_finetune, EvalReport, FtReport, QualifiedTeacher};
pub use pretrain::{run_pt_kd, PtKdReport};
pub use report::{LossReport, LossTerm};
pub use stage::{DaConfig, LossWeights, Stage, StageConfig};

/// Independent stream seed for `(base, a, b)`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    for v in [base, a, b] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
