//! Masked-LM pre-training of the speech encoder, optionally with CLS
//! distillation from the text teacher.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Example;
use super::report::{LossReport, TermAccumulator};
use super::stage::{minibatch_step, LossWeights, StageConfig};
use super::derive_seed;
use crate::augmentation::{sample_span_mask, MaskSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::speech_encoder::SpeechEncoder;
use crate::text_pipeline::TextTeacher;
use crate::tensor::Tensor;
use crate::tokenizer_vq::TokenSequence;

/// Smoothing window for the early-stopping rule, in steps.
pub const MLM_WINDOW: usize = 50;

/// Span mask over the non-CLS tokens with at least one masked position.
pub fn mlm_mask(len: usize, spec: MaskSpec, seed: u64) -> Vec<bool> {
    let mut m = sample_span_mask(len, spec, seed);
    if !m.iter().any(|&b| b) {
        let i = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(0..len);
        m[i] = true;
    }
    m
}

fn body_len(tokens: &TokenSequence) -> usize {
    tokens.len() - usize::from(tokens.has_cls())
}

/// `λ_mlm · MLM(masked copy) + λ_kd · |cls(clean) - teacher_cls|_1`. The
/// distillation term is skipped when `teacher_cls` is `None`.
pub fn pt_kd_loss(
    g: &mut Graph,
    enc: &SpeechEncoder,
    tokens: &TokenSequence,
    mask: &[bool],
    teacher_cls: Option<&[f64]>,
    w: &LossWeights,
) -> Result<(Var, Vec<(&'static str, f64, f64)>)> {
    let mlm = enc.mlm_loss_graph(g, tokens, mask)?;
    let mut terms = vec![("mlm", g.value(mlm).item(), w.mlm)];
    let mut total = g.scale(mlm, w.mlm);
    if let Some(t) = teacher_cls {
        let kd = cls_l1_graph(g, enc, tokens, t)?;
        terms.push(("kd", g.value(kd).item(), w.kd));
        let kd_w = g.scale(kd, w.kd);
        total = g.add(total, kd_w);
    }
    Ok((total, terms))
}

/// `|cls(tokens) - target|_1` on the graph, from an unmasked pass.
pub fn cls_l1_graph(g: &mut Graph, enc: &SpeechEncoder, tokens: &TokenSequence, target: &[f64]) -> Result<Var> {
    if target.len() != enc.config().d_model {
        return Err(Error::Shape(format!("teacher CLS dim {} vs speech dim {}", target.len(), enc.config().d_model)));
    }
    let ids = enc.input_ids(tokens)?;
    let h = enc.forward_graph(g, &ids);
    let cls = g.slice_rows(h, 0, 1);
    let t = g.constant(Tensor::row(target.to_vec()));
    let d = g.sub(cls, t);
    let a = g.abs(d);
    Ok(g.sum(a))
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Teacher CLS vectors keyed by transcript.
pub fn teacher_cls_cache(teacher: &TextTeacher, examples: &[Example]) -> Result<HashMap<String, Vec<f64>>> {
    let mut cache = HashMap::new();
    for ex in examples {
        let t = ex.transcript.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no transcript", ex.id)))?;
        if !cache.contains_key(t) {
            cache.insert(t.clone(), teacher.forward(&teacher.tokenize(t)?)?.cls);
        }
    }
    Ok(cache)
}

/// Mean L1 distance between speech and teacher CLS vectors.
pub fn mean_cls_distance(enc: &SpeechEncoder, cache: &HashMap<String, Vec<f64>>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no examples for CLS distance".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let t = ex.transcript.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no transcript", ex.id)))?;
        total += l1(&enc.cls_representation(&ex.tokens)?, &cache[t]);
    }
    Ok(total / examples.len() as f64)
}

/// One PT-KD update over a paired batch.
pub fn pt_kd_step(
    enc: &mut SpeechEncoder,
    opt: &mut Optimizer,
    batch: &[(TokenSequence, Option<Vec<f64>>)],
    cfg: &StageConfig,
    step: usize,
) -> Result<LossReport> {
    let lr = cfg.schedule.rate(cfg.lr, step, 0);
    let mut acc = TermAccumulator::default();
    let items: Vec<(usize, &(TokenSequence, Option<Vec<f64>>))> = batch.iter().enumerate().collect();
    minibatch_step(enc, |e| e.params_mut(), opt, cfg, lr, &items, |e, g, (i, (tokens, tcls))| {
        let seed = derive_seed(cfg.seed, step as u64, *i as u64);
        let mask = mlm_mask(body_len(tokens), cfg.mlm_mask, seed);
        let (total, terms) = pt_kd_loss(g, e, tokens, &mask, tcls.as_deref(), &cfg.weights)?;
        acc.add(&terms, g.value(total).item());
        Ok(total)
    })?;
    acc.finish(step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtKdReport {
    pub steps: usize,
    pub mlm: Vec<f64>,
    pub kd: Vec<f64>,
    /// Mean training MLM loss per completed window.
    pub windows: Vec<f64>,
    pub stopped_early: bool,
    pub initial_cls_l1: Option<f64>,
    pub final_cls_l1: Option<f64>,
}

/// Runs MLM (+ CLS distillation when a teacher is given) for up to
/// `max_steps`, stopping once the windowed MLM loss has risen `patience`
/// windows in a row.
pub fn run_pt_kd(
    mut enc: SpeechEncoder,
    teacher: Option<&TextTeacher>,
    train: &[Example],
    heldout: &[Example],
    cfg: &StageConfig,
) -> Result<(SpeechEncoder, PtKdReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("no pre-training examples".into()));
    }
    let cache = match teacher {
        Some(t) => Some((teacher_cls_cache(t, train)?, teacher_cls_cache(t, heldout)?)),
        None => None,
    };
    let initial = match (&cache, heldout.is_empty()) {
        (Some((_, h)), false) => Some(mean_cls_distance(&enc, h, heldout)?),
        _ => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer, enc.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = PtKdReport {
        steps: 0,
        mlm: vec![],
        kd: vec![],
        windows: vec![],
        stopped_early: false,
        initial_cls_l1: initial,
        final_cls_l1: None,
    };
    let max_steps = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let mut rises = 0;
    for step in 0..max_steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<(TokenSequence, Option<Vec<f64>>)> = order
            .drain(..cfg.batch_size.min(order.len()))
            .map(|i| {
                let ex = &train[i];
                let tcls = cache.as_ref().map(|(c, _)| c[ex.transcript.as_ref().unwrap()].clone());
                (ex.tokens.clone(), tcls)
            })
            .collect();
        let r = pt_kd_step(&mut enc, &mut opt, &batch, cfg, step)?;
        report.mlm.push(r.get("mlm").unwrap());
        if let Some(kd) = r.get("kd") {
            report.kd.push(kd);
        }
        report.steps = step + 1;
        if report.steps.is_multiple_of(MLM_WINDOW) {
            let w = report.mlm[report.mlm.len() - MLM_WINDOW..].iter().sum::<f64>() / MLM_WINDOW as f64;
            if report.windows.last().is_some_and(|&prev| w > prev) {
                rises += 1;
            } else {
                rises = 0;
            }
            report.windows.push(w);
            if rises >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let (Some((_, h)), false) = (&cache, heldout.is_empty()) {
        report.final_cls_l1 = Some(mean_cls_distance(&enc, h, heldout)?);
    }
    Ok((enc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::params::{FreezeSet, ParamGroup};
    use crate::speech_encoder::SpeechEncoderConfig;
    use rand::Rng;

    fn tiny() -> SpeechEncoder {
        SpeechEncoder::new(SpeechEncoderConfig { codebook_size: 6, d_model: 8, layers: 1, heads: 2, ff_dim: 8, max_len: 10 }, 5)
            .unwrap()
    }

    fn toks(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), 6).unwrap()
    }

    fn target(seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..8).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn grads(enc: &SpeechEncoder, build: impl Fn(&mut Graph) -> Var) -> Vec<Option<Tensor>> {
        let mut g = Graph::new(FreezeSet::none());
        let l = build(&mut g);
        let gr = g.backward(l);
        let mut out = vec![None; enc.params().len()];
        for (k, t) in g.param_grads(&gr) {
            if k.store == enc.params().uid() {
                out[k.index] = Some(t);
            }
        }
        out
    }

    #[test]
    fn pt_kd_gradients_match_finite_differences() {
        let mut enc = tiny();
        assert!(enc.params().num_scalars() <= 5000);
        let t = toks(&[1, 4, 2, 5, 0]);
        let mask = [false, true, true, false, false];
        let tc = target(1);
        let w = LossWeights { mlm: 0.7, kd: 1.3, ..Default::default() };
        let r = check_param_gradients(&mut enc, |e| e.params_mut(), &FreezeSet::none(), |e, g| {
            pt_kd_loss(g, e, &t, &mask, Some(&tc), &w).unwrap().0
        });
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn kd_term_vanishes_when_teacher_matches_speech_cls() {
        let enc = tiny();
        let t = toks(&[3, 3, 1, 0]);
        let mask = [true, false, false, true];
        let same = enc.cls_representation(&t).unwrap();
        let w = LossWeights::default();
        let mut g = Graph::inference();
        let (total, terms) = pt_kd_loss(&mut g, &enc, &t, &mask, Some(&same), &w).unwrap();
        assert_eq!(terms[1].1, 0.0);
        assert_eq!(g.value(total).item(), terms[0].1);
    }

    #[test]
    fn zero_mlm_weight_leaves_only_the_kd_gradient() {
        let enc = tiny();
        let t = toks(&[1, 2, 3, 4, 5]);
        let mask = [false, true, false, true, false];
        let tc = target(2);
        let w = LossWeights { mlm: 0.0, ..Default::default() };
        let total = grads(&enc, |g| pt_kd_loss(g, &enc, &t, &mask, Some(&tc), &w).unwrap().0);
        let kd = grads(&enc, |g| cls_l1_graph(g, &enc, &t, &tc).unwrap());
        for (i, (a, b)) in total.iter().zip(&kd).enumerate() {
            let zero = Tensor::zeros(enc.params().value(i).shape());
            let (a, b) = (a.as_ref().unwrap_or(&zero), b.as_ref().unwrap_or(&zero));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12, "param {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn teacher_dimension_must_match() {
        let enc = tiny();
        let mut g = Graph::inference();
        assert!(matches!(cls_l1_graph(&mut g, &enc, &toks(&[1, 2]), &[0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn mlm_mask_always_selects_something() {
        let spec = MaskSpec { p: 0.0, m: 3 };
        for seed in 0..50 {
            let m = mlm_mask(7, spec, seed);
            assert!(m.iter().any(|&b| b));
        }
    }

    #[test]
    fn unpaired_examples_are_rejected() {
        let teacher = crate::text_pipeline::TextTeacher::new(
            crate::text_pipeline::TextTeacherConfig {
                alphabet: "ab ".into(),
                d_model: 8,
                layers: 1,
                heads: 2,
                ff_dim: 8,
                max_len: 8,
                num_classes: 2,
            },
            0,
        )
        .unwrap();
        let ex = Example { id: "u".into(), tokens: toks(&[1, 2]), transcript: None, label: 0 };
        assert!(matches!(teacher_cls_cache(&teacher, &[ex]), Err(Error::Pairing(_))));
    }

    #[test]
    fn loss_report_total_is_weighted_sum_and_codebook_untouched() {
        let mut enc = tiny();
        let batch: Vec<(TokenSequence, Option<Vec<f64>>)> =
            (0..3).map(|i| (toks(&[i, i + 1, 2, 0, 5]), Some(target(i as u64)))).collect();
        let mut cfg = StageConfig::pt_kd_toy();
        cfg.weights = LossWeights { mlm: 0.5, kd: 2.0, ..Default::default() };
        cfg.mlm_mask = MaskSpec { p: 0.2, m: 2 };
        let mut opt = Optimizer::new(cfg.optimizer, enc.params());
        let before = enc.params().group_checksum(ParamGroup::QuantizerCodebook);
        for step in 0..3 {
            let r = pt_kd_step(&mut enc, &mut opt, &batch, &cfg, step).unwrap();
            assert!((r.total - r.weighted_sum()).abs() <= 1e-9);
        }
        assert_eq!(enc.params().group_checksum(ParamGroup::QuantizerCodebook), before);
    }
}
