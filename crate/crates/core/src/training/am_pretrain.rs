//! CTC pre-training of the acoustic model on frozen encoder states.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{char_accuracy, ctc_target, Example};
use super::finetune::{speech_states, Augment};
use super::stage::{minibatch_step, StageConfig};
use crate::acoustic_model::AcousticModel;
use crate::autograd::Graph;
use crate::ctc::min_frames;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamGroup;
use crate::speech_encoder::SpeechEncoder;
use crate::tensor::Tensor;

/// Steps between validation passes.
pub const EVAL_EVERY: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmPtReport {
    pub steps: usize,
    pub skipped_infeasible: usize,
    pub train_loss: Vec<f64>,
    /// `(step, mean validation CTC loss)`.
    pub valid_ctc: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_valid_ctc: f64,
    pub valid_char_accuracy: f64,
}

struct CtcItem {
    states: Tensor,
    target: Vec<usize>,
    tokens: Option<crate::tokenizer_vq::TokenSequence>,
}

fn ctc_items(am: &AcousticModel, enc: &SpeechEncoder, data: &[Example], keep_tokens: bool) -> Result<(Vec<CtcItem>, usize)> {
    let mut items = Vec::new();
    let mut skipped = 0;
    for ex in data {
        let text = ex.transcript.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no transcript", ex.id)))?;
        let target = ctc_target(text)?;
        let states = speech_states(enc, &ex.tokens, Augment::Off)?;
        if min_frames(&target) > am.config().output_len(states.rows()) {
            skipped += 1;
            continue;
        }
        items.push(CtcItem { states, target, tokens: keep_tokens.then(|| ex.tokens.clone()) });
    }
    Ok((items, skipped))
}

fn mean_ctc(am: &AcousticModel, items: &[CtcItem]) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let mut g = Graph::inference();
        let x = g.constant(it.states.clone());
        let l = am.ctc_loss_graph(&mut g, x, &it.target)?;
        total += g.value(l).item();
    }
    Ok(total / items.len().max(1) as f64)
}

/// Mean greedy-decode character accuracy against the transcripts.
pub fn decode_accuracy(am: &AcousticModel, enc: &SpeechEncoder, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no examples to decode".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let text = ex.transcript.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no transcript", ex.id)))?;
        let hyp = am.greedy_decode(&speech_states(enc, &ex.tokens, Augment::Off)?)?;
        total += char_accuracy(&ctc_target(text)?, &hyp);
    }
    Ok(total / data.len() as f64)
}

/// Trains the acoustic body and CTC head with the encoder frozen and keeps
/// the parameters with the lowest validation CTC loss. Utterances too short
/// for their transcript are counted and skipped.
pub fn run_am_pretrain(
    mut am: AcousticModel,
    enc: &SpeechEncoder,
    train: &[Example],
    valid: &[Example],
    cfg: &StageConfig,
) -> Result<(AcousticModel, AmPtReport)> {
    cfg.validate()?;
    if !cfg.frozen.contains(ParamGroup::SpeechEncoder) {
        return Err(Error::Config("acoustic pre-training requires the speech encoder to be frozen".into()));
    }
    let (train_items, skipped_train) = ctc_items(&am, enc, train, cfg.da.enabled)?;
    let (valid_items, skipped_valid) = ctc_items(&am, enc, valid, false)?;
    if train_items.is_empty() || valid_items.is_empty() {
        return Err(Error::EmptyInput("no feasible CTC examples".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, am.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let best_loss = mean_ctc(&am, &valid_items)?;
    let mut best = (best_loss, 0usize, am.params().clone());
    let mut report = AmPtReport {
        steps: 0,
        skipped_infeasible: skipped_train + skipped_valid,
        train_loss: vec![],
        valid_ctc: vec![(0, best_loss)],
        best_step: 0,
        best_valid_ctc: best_loss,
        valid_char_accuracy: 0.0,
    };
    let mut stale = 0;
    let max_steps = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let epoch_len = train_items.len().div_ceil(cfg.batch_size);
    for step in 0..max_steps {
        let epoch = step / epoch_len;
        if cfg.max_epochs > 0 && epoch >= cfg.max_epochs {
            break;
        }
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train_items.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let batch: Vec<(Tensor, &[usize])> = idx
            .iter()
            .map(|&i| {
                let it = &train_items[i];
                let states = match (&it.tokens, cfg.da.enabled) {
                    (Some(t), true) => {
                        speech_states(enc, t, Augment::On(&cfg.da, super::derive_seed(cfg.seed, step as u64, i as u64)))
                    }
                    _ => Ok(it.states.clone()),
                }?;
                Ok((states, it.target.as_slice()))
            })
            .collect::<Result<_>>()?;
        let lr = cfg.schedule.rate(cfg.lr, step, epoch);
        let loss = minibatch_step(&mut am, |m| m.params_mut(), &mut opt, cfg, lr, &batch, |m, g, (s, target)| {
            let x = g.constant(s.clone());
            let l = m.ctc_loss_graph(g, x, target)?;
            Ok(g.scale(l, cfg.weights.ctc))
        })?;
        report.train_loss.push(loss);
        report.steps = step + 1;
        if report.steps.is_multiple_of(EVAL_EVERY) || report.steps == max_steps {
            let v = mean_ctc(&am, &valid_items)?;
            report.valid_ctc.push((report.steps, v));
            if v < best.0 {
                best = (v, report.steps, am.params().clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    am.params_mut().load_from(&best.2)?;
    report.best_step = best.1;
    report.best_valid_ctc = best.0;
    report.valid_char_accuracy = decode_accuracy(&am, enc, valid)?;
    Ok((am, report))
}
