//! Intent fine-tuning of the acoustic model with optional logit distillation
//! and masking augmentation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Example;
use super::derive_seed;
use super::report::{LossReport, TermAccumulator};
use super::stage::{minibatch_step, DaConfig, LossWeights, StageConfig};
use crate::acoustic_model::AcousticModel;
use crate::augmentation::{apply_channel_mask, apply_time_mask, apply_token_mask, sample_token_mask};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamGroup;
use crate::speech_encoder::SpeechEncoder;
use crate::tensor::Tensor;
use crate::text_pipeline::{cross_entropy, TextTeacher};

/// Minimum teacher validation accuracy before its logits may supervise.
pub const TEACHER_PREREQUISITE: f64 = 0.95;

#[derive(Clone, Copy, Debug)]
pub enum Augment<'a> {
    Off,
    On(&'a DaConfig, u64),
}

/// Per-token encoder states, augmented when asked: token mask, encoder,
/// time mask, channel mask.
pub fn speech_states(enc: &SpeechEncoder, tokens: &crate::tokenizer_vq::TokenSequence, aug: Augment) -> Result<Tensor> {
    match aug {
        Augment::Off => Ok(enc.forward(tokens)?.states),
        Augment::On(da, seed) => {
            if !da.enabled {
                return Ok(enc.forward(tokens)?.states);
            }
            let masked = apply_token_mask(tokens, &sample_token_mask(tokens, da.token, derive_seed(seed, 1, 0)))?;
            let h = enc.forward(&masked)?;
            let h = apply_time_mask(&h, da.time, derive_seed(seed, 2, 0));
            Ok(apply_channel_mask(&h, da.channel, derive_seed(seed, 3, 0)).states)
        }
    }
}

/// `λ_ce · CE(o^s, label) + λ_kd · |o^s - o^t|_1`; the distillation term is
/// skipped without teacher logits.
pub fn ft_loss(
    g: &mut Graph,
    am: &AcousticModel,
    states: &Tensor,
    teacher_logits: Option<&[f64]>,
    label: usize,
    w: &LossWeights,
) -> Result<(Var, Vec<(&'static str, f64, f64)>)> {
    let c = am.config().num_classes;
    if label >= c {
        return Err(Error::Label(format!("label {label} outside [0, {c})")));
    }
    let x = g.constant(states.clone());
    let f = am.features_graph(g, x)?;
    let logits = am.intent_logits_graph(g, f)?;
    let ce = cross_entropy(g, logits, label);
    let mut terms = vec![("ce", g.value(ce).item(), w.ce)];
    let mut total = g.scale(ce, w.ce);
    if let Some(t) = teacher_logits {
        if t.len() != c {
            return Err(Error::Shape(format!("teacher logits dim {} vs {c} classes", t.len())));
        }
        let tv = g.constant(Tensor::row(t.to_vec()));
        let d = g.sub(logits, tv);
        let a = g.abs(d);
        let kd = g.sum(a);
        terms.push(("kd", g.value(kd).item(), w.kd));
        let kd_w = g.scale(kd, w.kd);
        total = g.add(total, kd_w);
    }
    Ok((total, terms))
}

/// One training example for fine-tuning, states already prepared.
#[derive(Clone, Debug)]
pub struct FtItem {
    pub states: Tensor,
    pub teacher_logits: Option<Vec<f64>>,
    pub label: usize,
}

pub fn ft_step(
    am: &mut AcousticModel,
    opt: &mut Optimizer,
    batch: &[FtItem],
    cfg: &StageConfig,
    step: usize,
    epoch: usize,
) -> Result<LossReport> {
    let lr = cfg.schedule.rate(cfg.lr, step, epoch);
    let mut acc = TermAccumulator::default();
    minibatch_step(am, |m| m.params_mut(), opt, cfg, lr, batch, |m, g, it| {
        let (total, terms) = ft_loss(g, m, &it.states, it.teacher_logits.as_deref(), it.label, &cfg.weights)?;
        acc.add(&terms, g.value(total).item());
        Ok(total)
    })?;
    acc.finish(step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Speech-only accuracy: transcripts are never read. Refuses to run with
/// augmentation switched on.
pub fn evaluate_with(enc: &SpeechEncoder, am: &AcousticModel, data: &[Example], da: Option<&DaConfig>) -> Result<EvalReport> {
    if da.is_some_and(|d| d.enabled) {
        return Err(Error::AugmentationInEval);
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("no examples to evaluate".into()));
    }
    let mut correct = 0;
    for ex in data {
        let states = speech_states(enc, &ex.tokens, Augment::Off)?;
        correct += usize::from(am.predict(&states)? == ex.label);
    }
    Ok(EvalReport { accuracy: correct as f64 / data.len() as f64, correct, total: data.len() })
}

pub fn evaluate(enc: &SpeechEncoder, am: &AcousticModel, data: &[Example]) -> Result<EvalReport> {
    evaluate_with(enc, am, data, None)
}

/// Accuracy over precomputed clean states.
fn accuracy_on(am: &AcousticModel, states: &[Tensor], data: &[Example]) -> Result<f64> {
    let mut correct = 0;
    for (s, ex) in states.iter().zip(data) {
        correct += usize::from(am.predict(s)? == ex.label);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub valid_history: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// A teacher and its measured validation accuracy.
#[derive(Clone, Copy)]
pub struct QualifiedTeacher<'a> {
    pub teacher: &'a TextTeacher,
    pub valid_accuracy: f64,
}

/// Fine-tunes the acoustic model for intent classification with the encoder
/// frozen, annealing the rate per epoch, and keeps the epoch with the best
/// validation accuracy (earliest on ties).
pub fn run_finetune(
    mut am: AcousticModel,
    enc: &SpeechEncoder,
    teacher: Option<QualifiedTeacher>,
    train: &[Example],
    valid: &[Example],
    cfg: &StageConfig,
) -> Result<(AcousticModel, FtReport)> {
    cfg.validate()?;
    if !cfg.frozen.contains(ParamGroup::SpeechEncoder) {
        return Err(Error::Config("fine-tuning keeps the speech encoder frozen".into()));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput("fine-tuning needs train and validation data".into()));
    }
    let kd_on = cfg.weights.kd > 0.0;
    let teacher = if kd_on {
        let q = teacher.ok_or_else(|| Error::Config("logit distillation enabled without a teacher".into()))?;
        if q.valid_accuracy < TEACHER_PREREQUISITE {
            return Err(Error::TeacherQuality { accuracy: q.valid_accuracy, required: TEACHER_PREREQUISITE });
        }
        Some(q.teacher)
    } else {
        None
    };
    let mut tcache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut tlogits = Vec::with_capacity(train.len());
    for ex in train {
        tlogits.push(match teacher {
            None => None,
            Some(t) => {
                let text = ex.transcript.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no transcript", ex.id)))?;
                if !tcache.contains_key(text) {
                    tcache.insert(text.clone(), t.forward(&t.tokenize(text)?)?.logits);
                }
                Some(tcache[text].clone())
            }
        });
    }
    let clean: Vec<Tensor> = train.iter().map(|ex| speech_states(enc, &ex.tokens, Augment::Off)).collect::<Result<_>>()?;
    let valid_states: Vec<Tensor> =
        valid.iter().map(|ex| speech_states(enc, &ex.tokens, Augment::Off)).collect::<Result<_>>()?;

    let mut opt = Optimizer::new(cfg.optimizer, am.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = accuracy_on(&am, &valid_states, valid)?;
    let mut best = (init, 0usize, am.params().clone());
    let mut report = FtReport { epochs: 0, best_epoch: 0, best_valid_accuracy: init, valid_history: vec![init], train_loss: vec![] };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut stale = 0;
    let epochs = if cfg.max_epochs == 0 { usize::MAX } else { cfg.max_epochs };
    'outer: for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
            let batch: Vec<FtItem> = chunk
                .iter()
                .map(|&i| {
                    let states = if cfg.da.enabled {
                        speech_states(enc, &train[i].tokens, Augment::On(&cfg.da, derive_seed(cfg.seed, step as u64, i as u64)))?
                    } else {
                        clean[i].clone()
                    };
                    Ok(FtItem { states, teacher_logits: tlogits[i].clone(), label: train[i].label })
                })
                .collect::<Result<_>>()?;
            loss += ft_step(&mut am, &mut opt, &batch, cfg, step, epoch)?.total;
            n += 1;
            step += 1;
        }
        report.train_loss.push(loss / n.max(1) as f64);
        report.epochs = epoch + 1;
        let acc = accuracy_on(&am, &valid_states, valid)?;
        report.valid_history.push(acc);
        if acc > best.0 {
            best = (acc, epoch + 1, am.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    am.params_mut().load_from(&best.2)?;
    report.best_epoch = best.1;
    report.best_valid_accuracy = best.0;
    Ok((am, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic_model::{AMConfig, AMHeads, ConvSpec};
    use crate::gradcheck::check_param_gradients;
    use crate::optim::LrSchedule;
    use crate::params::FreezeSet;
    use crate::speech_encoder::SpeechEncoderConfig;
    use crate::text_pipeline::TextTeacherConfig;
    use crate::tokenizer_vq::TokenSequence;
    use rand::Rng;

    fn am_cfg() -> AMConfig {
        AMConfig {
            input_dim: 8,
            conv: vec![
                ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 2) },
                ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 1) },
            ],
            rnn_layers: 1,
            rnn_hidden: 4,
            num_classes: 3,
            ctc_alphabet: 4,
        }
    }

    fn am(seed: u64) -> AcousticModel {
        AcousticModel::new(am_cfg(), AMHeads { intent: true, ctc: false }, seed).unwrap()
    }

    fn enc() -> SpeechEncoder {
        SpeechEncoder::new(SpeechEncoderConfig { codebook_size: 6, d_model: 8, layers: 1, heads: 2, ff_dim: 8, max_len: 16 }, 2)
            .unwrap()
    }

    fn states(seed: u64, t: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, 8], (0..t * 8).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn examples(n: usize, with_text: bool) -> Vec<Example> {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let ids: Vec<usize> = (0..8).map(|j| if j % 3 == 0 { label } else { r.random_range(3..6) }).collect();
                Example {
                    id: format!("u{i}"),
                    tokens: TokenSequence::new(ids, 6).unwrap(),
                    transcript: with_text.then(|| ["ab", "ba", "aab"][label].to_string()),
                    label,
                }
            })
            .collect()
    }

    fn teacher() -> TextTeacher {
        let cfg = TextTeacherConfig { alphabet: "ab".into(), d_model: 8, layers: 1, heads: 2, ff_dim: 8, max_len: 8, num_classes: 3 };
        TextTeacher::new(cfg, 4).unwrap()
    }

    fn cfg() -> StageConfig {
        StageConfig { max_epochs: 3, batch_size: 4, ..StageConfig::ft_toy() }
    }

    #[test]
    fn ft_kd_gradients_match_finite_differences() {
        let mut m = am(1);
        assert!(m.params().num_scalars() <= 5000);
        let s = states(3, 9);
        let t = [0.3, -1.2, 0.8];
        let w = LossWeights { ce: 0.6, kd: 1.4, ..Default::default() };
        let r = check_param_gradients(&mut m, |a| a.params_mut(), &FreezeSet::none(), |a, g| {
            ft_loss(g, a, &s, Some(&t), 2, &w).unwrap().0
        });
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn kd_term_vanishes_when_logits_agree() {
        let m = am(2);
        let s = states(4, 7);
        let own = m.intent_logits(&s).unwrap();
        let mut g = Graph::inference();
        let (total, terms) = ft_loss(&mut g, &m, &s, Some(&own), 1, &LossWeights::default()).unwrap();
        assert_eq!(terms[1].1, 0.0);
        assert_eq!(g.value(total).item(), terms[0].1);
    }

    #[test]
    fn zero_kd_weight_is_plain_cross_entropy() {
        let m = am(3);
        let s = states(5, 7);
        let w = LossWeights { kd: 0.0, ..Default::default() };
        let mut g = Graph::inference();
        let (with, _) = ft_loss(&mut g, &m, &s, Some(&[5.0, -5.0, 0.0]), 0, &w).unwrap();
        let mut h = Graph::inference();
        let (without, _) = ft_loss(&mut h, &m, &s, None, 0, &w).unwrap();
        assert_eq!(g.value(with).item(), h.value(without).item());
    }

    #[test]
    fn loss_report_matches_weighted_terms() {
        let mut m = am(4);
        let batch: Vec<FtItem> =
            (0..3).map(|i| FtItem { states: states(i, 6), teacher_logits: Some(vec![0.1, 0.2, -0.3]), label: i as usize }).collect();
        let mut c = cfg();
        c.weights = LossWeights { ce: 0.3, kd: 2.5, ..Default::default() };
        let mut opt = Optimizer::new(c.optimizer, m.params());
        let r = ft_step(&mut m, &mut opt, &batch, &c, 0, 0).unwrap();
        assert!((r.total - r.weighted_sum()).abs() <= 1e-9);
        assert_eq!(r.terms.len(), 2);
    }

    #[test]
    fn freezing_everything_makes_a_step_a_no_op() {
        let mut m = am(5);
        let before = m.params().checksum();
        let batch = vec![FtItem { states: states(1, 6), teacher_logits: None, label: 1 }];
        let c = StageConfig { frozen: FreezeSet::all(), ..cfg() };
        let mut opt = Optimizer::new(c.optimizer, m.params());
        for s in 0..3 {
            ft_step(&mut m, &mut opt, &batch, &c, s, 0).unwrap();
        }
        assert_eq!(m.params().checksum(), before);
    }

    #[test]
    fn unit_gamma_is_a_constant_rate() {
        let s = LrSchedule::Anneal { gamma: 1.0 };
        for e in 0..50 {
            assert_eq!(s.rate(1e-3, e * 7, e), 1e-3);
        }
    }

    #[test]
    fn evaluation_ignores_transcripts_and_refuses_augmentation() {
        let e = enc();
        let m = am(6);
        let with = examples(12, true);
        let without = examples(12, false);
        assert_eq!(evaluate(&e, &m, &with).unwrap(), evaluate(&e, &m, &without).unwrap());
        let da = DaConfig { enabled: true, ..Default::default() };
        assert!(matches!(evaluate_with(&e, &m, &with, Some(&da)), Err(Error::AugmentationInEval)));
        assert!(evaluate_with(&e, &m, &with, Some(&DaConfig::default())).is_ok());
    }

    #[test]
    fn weak_teacher_is_refused_when_distilling() {
        let (e, t) = (enc(), teacher());
        let data = examples(6, true);
        let weak = QualifiedTeacher { teacher: &t, valid_accuracy: 0.9 };
        let r = run_finetune(am(7), &e, Some(weak), &data, &data, &cfg());
        assert!(matches!(r, Err(Error::TeacherQuality { .. })));
        let no_kd = StageConfig { weights: LossWeights { kd: 0.0, ..Default::default() }, ..cfg() };
        assert!(run_finetune(am(7), &e, Some(weak), &data, &data, &no_kd).is_ok());
    }

    #[test]
    fn distillation_needs_training_transcripts() {
        let (e, t) = (enc(), teacher());
        let q = QualifiedTeacher { teacher: &t, valid_accuracy: 1.0 };
        let r = run_finetune(am(8), &e, Some(q), &examples(6, false), &examples(6, true), &cfg());
        assert!(matches!(r, Err(Error::Pairing(_))));
    }

    #[test]
    fn encoder_must_stay_frozen() {
        let mut c = cfg();
        c.frozen.unfreeze(ParamGroup::SpeechEncoder);
        let data = examples(6, true);
        assert!(matches!(run_finetune(am(9), &enc(), None, &data, &data, &c), Err(Error::Config(_))));
    }

    #[test]
    fn fine_tuning_is_reproducible_and_keeps_best_epoch() {
        let e = enc();
        let data = examples(24, true);
        let c = StageConfig {
            max_epochs: 6,
            lr: 5e-3,
            weights: LossWeights { kd: 0.0, ..Default::default() },
            da: DaConfig { enabled: true, ..Default::default() },
            ..cfg()
        };
        let (a, ra) = run_finetune(am(10), &e, None, &data, &data, &c).unwrap();
        let (b, rb) = run_finetune(am(10), &e, None, &data, &data, &c).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_eq!(ra, rb);
        let best = ra.valid_history.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(ra.best_valid_accuracy, best);
        assert_eq!(ra.valid_history[ra.best_epoch], best);
        assert_eq!(evaluate(&e, &a, &data).unwrap().accuracy, best);
    }

    #[test]
    fn augmentation_changes_states_only_when_enabled() {
        let e = enc();
        let t = TokenSequence::new((0..14).map(|i| i % 6).collect(), 6).unwrap();
        let clean = speech_states(&e, &t, Augment::Off).unwrap();
        let off = DaConfig::default();
        assert_eq!(speech_states(&e, &t, Augment::On(&off, 1)).unwrap(), clean);
        let heavy = DaConfig {
            enabled: true,
            token: crate::augmentation::MaskSpec { p: 0.2, m: 2 },
            time: crate::augmentation::MaskSpec { p: 0.2, m: 2 },
            channel: crate::augmentation::MaskSpec { p: 0.25, m: 2 },
        };
        let a = speech_states(&e, &t, Augment::On(&heavy, 1)).unwrap();
        assert_ne!(a, clean);
        assert_eq!(a, speech_states(&e, &t, Augment::On(&heavy, 1)).unwrap());
    }
}
