//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any failed.

use std::time::{Duration, Instant};

use kdslu_core::acoustic_model::{AMConfig, AMHeads, AcousticModel, ConvSpec};
use kdslu_core::augmentation::{sample_span_mask, MaskSpec};
use kdslu_core::config::ExperimentConfig;
use kdslu_core::ctc::ctc_nll;
use kdslu_core::data_harness::{
    read_manifest, write_manifest, Corpus, IntentTriple, LabelSpace, Split, SynthConfig,
};
use kdslu_core::gradcheck::{check_param_gradients, GradCheckReport};
use kdslu_core::params::{FreezeSet, ParamGroup};
use kdslu_core::pipeline::{self, Method, Prepared, Shared};
use kdslu_core::speech_encoder::{SpeechEncoder, SpeechEncoderConfig};
use kdslu_core::tensor::Tensor;
use kdslu_core::text_pipeline::{TextTeacher, TextTeacherConfig};
use kdslu_core::tokenizer_vq::TokenSequence;
use kdslu_core::training::am_pretrain::decode_accuracy;
use kdslu_core::training::finetune::ft_loss;
use kdslu_core::training::pretrain::pt_kd_loss;
use kdslu_core::training::{encode_examples, evaluate, run_am_pretrain, run_pt_kd, Example, LossWeights};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<(bool, String), String>;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    /// Runs one criterion; `budget` of `None` means it has no runtime bound
    /// of its own.
    fn run(&mut self, id: usize, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Check) {
        eprintln!("-- criterion {id}: {name}");
        let t0 = Instant::now();
        let (mut pass, mut detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = t0.elapsed();
        self.record(id, name, &mut pass, &mut detail, elapsed, budget);
    }

    fn record(
        &mut self,
        id: usize,
        name: &'static str,
        pass: &mut bool,
        detail: &mut String,
        elapsed: Duration,
        budget: Option<Duration>,
    ) {
        if let Some(b) = budget {
            if elapsed > b {
                *pass = false;
                detail.push_str(&format!("; over budget ({:.0}s > {:.0}s)", elapsed.as_secs_f64(), b.as_secs_f64()));
            }
        }
        eprintln!("   {} {detail} [{:.1}s]", if *pass { "ok" } else { "FAILED" }, elapsed.as_secs_f64());
        self.outcomes.push(Outcome { id, name, pass: *pass, detail: detail.clone(), elapsed });
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---- 1. gradients ----------------------------------------------------------

fn tiny_encoder(seed: u64) -> SpeechEncoder {
    let cfg = SpeechEncoderConfig { codebook_size: 6, d_model: 8, layers: 1, heads: 2, ff_dim: 8, max_len: 12 };
    SpeechEncoder::new(cfg, seed).unwrap()
}

fn tiny_am(heads: AMHeads, seed: u64) -> AcousticModel {
    let cfg = AMConfig {
        input_dim: 8,
        conv: vec![
            ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 2) },
            ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 1) },
        ],
        rnn_layers: 1,
        rnn_hidden: 4,
        num_classes: 3,
        ctc_alphabet: 4,
    };
    AcousticModel::new(cfg, heads, seed).unwrap()
}

fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn gradients() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut note = |name: &str, scalars: usize, r: GradCheckReport| {
        let pass = scalars <= 5000 && r.passes(1e-3);
        ok &= pass;
        lines.push(format!("{name} {:.1e} ({scalars} params)", r.max_rel_error));
        if !pass {
            lines.push(format!("worst {}", r.worst));
        }
    };

    let toks = TokenSequence::new(vec![1, 4, 2, 5, 0, 3], 6).map_err(e)?;
    let mask = [false, true, true, false, false, true];
    let cls: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut enc = tiny_encoder(5);
    let n = enc.params().num_scalars();
    let w = LossWeights::default();
    let r = check_param_gradients(&mut enc, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
        pt_kd_loss(g, m, &toks, &mask, None, &w).unwrap().0
    });
    note("mlm", n, r);

    let w = LossWeights { mlm: 0.7, kd: 1.3, ..Default::default() };
    let r = check_param_gradients(&mut enc, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
        pt_kd_loss(g, m, &toks, &mask, Some(&cls), &w).unwrap().0
    });
    note("pt-kd", n, r);

    let mut am = tiny_am(AMHeads { intent: false, ctc: true }, 11);
    let x = random_tensor(&mut rng, 12, 8);
    let n = am.params().num_scalars();
    let r = check_param_gradients(&mut am, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
        let xv = g.constant(x.clone());
        m.ctc_loss_graph(g, xv, &[1, 3]).unwrap()
    });
    note("ctc", n, r);

    let mut am = tiny_am(AMHeads { intent: true, ctc: false }, 12);
    let s = random_tensor(&mut rng, 9, 8);
    let t = [0.3, -1.2, 0.8];
    let w = LossWeights { ce: 0.6, kd: 1.4, ..Default::default() };
    let n = am.params().num_scalars();
    let r = check_param_gradients(&mut am, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
        ft_loss(g, m, &s, Some(&t), 2, &w).unwrap().0
    });
    note("ft-kd", n, r);

    let tcfg = TextTeacherConfig {
        alphabet: "abcd ".into(),
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        max_len: 12,
        num_classes: 3,
    };
    let mut teacher = TextTeacher::new(tcfg, 13).map_err(e)?;
    let text = teacher.tokenize("bad cab").map_err(e)?;
    let n = teacher.params().num_scalars();
    let r = check_param_gradients(&mut teacher, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
        m.ce_loss_graph(g, &text, 2).unwrap()
    });
    note("teacher-ce", n, r);

    Ok((ok, lines.join(", ")))
}

// ---- 2. CTC oracle ---------------------------------------------------------

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - z));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `-log` of the summed probability of every path collapsing to `target`.
fn brute_force_nll(logp: &Tensor, target: &[usize]) -> f64 {
    let (t_len, a) = (logp.rows(), logp.cols());
    let mut terms = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            terms.push(path.iter().enumerate().map(|(t, &s)| logp.data()[t * a + s]).sum::<f64>());
        }
        let mut i = 0;
        loop {
            if i == t_len {
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                return -(m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln());
            }
            path[i] += 1;
            if path[i] < a {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn ctc_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let (mut n, mut worst, mut infeasible) = (0, 0.0f64, 0);
    for _ in 0..300 {
        let t_len = rng.random_range(1..=6);
        let a = rng.random_range(2..=4);
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..a)).collect();
        let logits = Tensor::new(vec![t_len, a], (0..t_len * a).map(|_| rng.random_range(-3.0..3.0)).collect());
        let logp = log_softmax_rows(&logits);
        let oracle = brute_force_nll(&logp, &target);
        n += 1;
        match ctc_nll(&logp, &target) {
            Ok((nll, _)) => {
                if !oracle.is_finite() {
                    return Ok((false, format!("T={t_len} A={a} {target:?}: library {nll}, oracle has no path")));
                }
                worst = worst.max((nll - oracle).abs());
            }
            Err(err) => {
                if oracle.is_finite() {
                    return Ok((false, format!("T={t_len} A={a} {target:?}: library error {err}, oracle {oracle}")));
                }
                infeasible += 1;
            }
        }
    }
    Ok((worst <= 1e-9, format!("{n} instances ({infeasible} infeasible), max |Δ log p| {worst:.2e}")))
}

// ---- 3. mask statistics ----------------------------------------------------

/// Independent sampler: Floyd's algorithm for distinct starts on a
/// different generator.
fn oracle_fraction(rng: &mut StdRng, length: usize, p: f64, m: usize) -> f64 {
    let n = ((p * length as f64) + 1e-9).floor() as usize;
    let mut starts = std::collections::BTreeSet::new();
    for j in length - n..length {
        let t = rng.random_range(0..=j);
        if !starts.insert(t) {
            starts.insert(j);
        }
    }
    let mut mask = vec![false; length];
    for s in starts {
        for b in mask.iter_mut().skip(s).take(m) {
            *b = true;
        }
    }
    mask.iter().filter(|&&b| b).count() as f64 / length as f64
}

fn mask_statistics() -> Check {
    let (length, p, m) = (1000, 0.05, 10);
    let spec = MaskSpec::new(p, m).map_err(e)?;
    let lo = (p * length as f64).floor() / length as f64;
    let hi = p * m as f64;
    let mut sum = 0.0;
    let mut violations = 0;
    for seed in 0..2000u64 {
        let mask = sample_span_mask(length, spec, seed);
        let f = mask.iter().filter(|&&b| b).count() as f64 / length as f64;
        if f < lo - 1e-12 || f > hi + 1e-12 {
            violations += 1;
        }
        sum += f;
    }
    let mean = sum / 2000.0;
    let mut rng = StdRng::seed_from_u64(3);
    let oracle = (0..20_000).map(|_| oracle_fraction(&mut rng, length, p, m)).sum::<f64>() / 20_000.0;
    let pass = violations == 0 && (mean - oracle).abs() <= 0.02;
    Ok((pass, format!("mean {mean:.4} vs oracle {oracle:.4}, bound violations {violations}/2000")))
}

// ---- 5. label codec --------------------------------------------------------

fn label_codec() -> Check {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, space, expected) in [("fsc", LabelSpace::FSC, 336), ("toy", LabelSpace::TOY, 24)] {
        let n = space.num_classes();
        let mut seen = vec![false; n];
        for a in 0..space.actions {
            for o in 0..space.objects {
                for l in 0..space.locations {
                    let t = IntentTriple::new(a, o, l);
                    let i = space.encode(t).map_err(e)?;
                    ok &= i < n && !seen[i] && space.decode(i).map_err(e)? == t;
                    seen[i] = true;
                }
            }
        }
        ok &= n == expected && seen.iter().all(|&s| s) && space.decode(n).is_err();
        details.push(format!("{name} {n}"));
    }
    Ok((ok, format!("bijective over {}", details.join(" and "))))
}

// ---- shared recipe ---------------------------------------------------------

struct Recipe {
    cfg: ExperimentConfig,
    p: Prepared,
    shared: Shared,
    teacher_accuracy: f64,
    /// Step-0 and final held-out CLS distance of the seed-0 PT-KD run.
    pt_kd_ratio: f64,
    checksums_before: Checksums,
    elapsed: Duration,
}

#[derive(Debug, PartialEq)]
struct Checksums {
    codebook: String,
    encoder_codebook_group: String,
    kd_encoder: String,
    teacher: String,
}

fn build_recipe(cfg: ExperimentConfig) -> Result<Recipe, String> {
    let t0 = Instant::now();
    let p = pipeline::prepare(&cfg).map_err(e)?;
    let (teacher, tr) = pipeline::train_teacher(&cfg, &p).map_err(e)?;
    eprintln!("   teacher valid accuracy {:.3} [{:.0}s]", tr.valid_accuracy, t0.elapsed().as_secs_f64());
    let (mlm, _) = pipeline::mlm_encoder(&cfg, &p).map_err(e)?;
    let codebook_group = mlm.params().group_checksum(ParamGroup::QuantizerCodebook);
    let teacher_sum = teacher.params().checksum();
    let (kd, kr) = pipeline::pt_kd_encoder(&cfg, &p, mlm.clone(), &teacher).map_err(e)?;
    let ratio = kr.final_cls_l1.ok_or("no held-out CLS distance")? / kr.initial_cls_l1.ok_or("no step-0 distance")?;
    eprintln!("   pt-kd ratio {ratio:.3} [{:.0}s]", t0.elapsed().as_secs_f64());
    let checksums_before = Checksums {
        codebook: p.codebook.checksum(),
        encoder_codebook_group: codebook_group,
        kd_encoder: kd.params().checksum(),
        teacher: teacher_sum,
    };
    let (am, ar) = pipeline::am_pretrain(&cfg, &p, &kd).map_err(e)?;
    eprintln!("   am-pt char accuracy {:.3} [{:.0}s]", ar.valid_char_accuracy, t0.elapsed().as_secs_f64());
    let shared = Shared {
        teacher: Some((teacher, tr.valid_accuracy)),
        mlm_encoder: mlm,
        kd_encoder: Some(kd),
        am_body: Some(am),
    };
    Ok(Recipe {
        cfg,
        p,
        shared,
        teacher_accuracy: tr.valid_accuracy,
        pt_kd_ratio: ratio,
        checksums_before,
        elapsed: t0.elapsed(),
    })
}

fn checksums_now(r: &Recipe) -> Checksums {
    let kd = r.shared.kd_encoder.as_ref().unwrap();
    Checksums {
        codebook: r.p.codebook.checksum(),
        encoder_codebook_group: kd.params().group_checksum(ParamGroup::QuantizerCodebook),
        kd_encoder: kd.params().checksum(),
        teacher: r.shared.teacher.as_ref().unwrap().0.params().checksum(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_accs(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.3}", x)).collect::<Vec<_>>().join(" ")
}

// ---- 6. PT-KD effect -------------------------------------------------------

fn pt_kd_effect(r: &Recipe) -> Check {
    let mut ratios = vec![r.pt_kd_ratio];
    let teacher = &r.shared.teacher.as_ref().unwrap().0;
    for seed in [1, 2] {
        let mut st = r.cfg.training.pt_kd.clone();
        st.seed = seed;
        let (_, rep) = run_pt_kd(r.shared.mlm_encoder.clone(), Some(teacher), &r.p.train, &r.p.valid, &st).map_err(e)?;
        ratios.push(rep.final_cls_l1.unwrap() / rep.initial_cls_l1.unwrap());
    }
    let passing = ratios.iter().filter(|&&x| x <= 0.7).count();
    Ok((passing == 3, format!("final/initial held-out CLS L1 per seed: {} ({passing}/3 <= 0.7)", fmt_accs(&ratios))))
}

// ---- 7. AM-PT effect -------------------------------------------------------

fn am_pt_effect(r: &Recipe) -> Check {
    let pairs: Vec<Example> = r.p.train.iter().take(32).cloned().collect();
    let enc = r.shared.kd_encoder.as_ref().unwrap();
    let mut st = r.cfg.training.am_pt.clone();
    st.max_steps = st.max_steps.min(2000);
    st.patience = st.max_steps;
    let am = AcousticModel::new(r.cfg.models.am.clone(), AMHeads { intent: false, ctc: true }, 7).map_err(e)?;
    let (am, rep) = run_am_pretrain(am, enc, &pairs, &pairs, &st).map_err(e)?;
    let acc = decode_accuracy(&am, enc, &pairs).map_err(e)?;
    Ok((acc >= 0.90 && rep.steps <= 2000, format!("char accuracy {acc:.3} on 32 pairs after {} steps", rep.steps)))
}

// ---- 10. DA robustness -----------------------------------------------------

fn da_robustness(seeds: &[u64]) -> Check {
    let mut cfg = ExperimentConfig::toy();
    cfg.synth = SynthConfig::far_field();
    let r = build_recipe(cfg)?;
    let (mut plain, mut da) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let train = pipeline::low_resource_subset(&r.cfg, &r.p, seed).map_err(e)?;
        for (m, out) in [(Method::AmPt, &mut plain), (Method::Da, &mut da)] {
            let (_, _, res) = pipeline::run_method(&r.cfg, &r.p, &r.shared, m, &train, seed).map_err(e)?;
            out.push(res.test_accuracy);
        }
    }
    let gain = mean(&da) - mean(&plain);
    Ok((
        gain >= 0.01,
        format!(
            "far-field test mean: no-DA {:.3} [{}], +DA {:.3} [{}], gain {:+.1} points",
            mean(&plain),
            fmt_accs(&plain),
            mean(&da),
            fmt_accs(&da),
            100.0 * gain
        ),
    ))
}

fn main() {
    let mut suite = Suite { outcomes: Vec::new() };
    suite.run(1, "gradient correctness", secs(120), gradients);
    suite.run(2, "CTC oracle equivalence", secs(30), ctc_oracle);
    suite.run(3, "mask statistics", secs(30), mask_statistics);
    suite.run(5, "label codec", secs(1), label_codec);

    let recipe = build_recipe(ExperimentConfig::toy());
    let recipe = match recipe {
        Ok(r) => Some(r),
        Err(err) => {
            for (id, name) in [(4, "freezing invariants"), (6, "PT-KD effect"), (7, "AM-PT effect"), (8, "end-to-end capability"), (9, "directional ablation"), (11, "speech-only inference")] {
                let (mut pass, mut detail) = (false, format!("recipe failed: {err}"));
                suite.record(id, name, &mut pass, &mut detail, Duration::ZERO, None);
            }
            None
        }
    };

    if let Some(r) = &recipe {
        suite.run(6, "PT-KD effect", secs(300), || pt_kd_effect(r));
        suite.run(7, "AM-PT effect", secs(300), || am_pt_effect(r));

        let mut model = None;
        let t0 = Instant::now();
        let full = (|| -> Check {
            let (am, rep, res) =
                pipeline::run_method(&r.cfg, &r.p, &r.shared, Method::Da, &r.p.train, r.cfg.seed).map_err(e)?;
            model = Some(am);
            let pass = r.teacher_accuracy >= 0.95 && res.test_accuracy >= 0.95;
            Ok((
                pass,
                format!(
                    "test accuracy {:.3} (valid {:.3}, best epoch {}), teacher prerequisite {:.3}",
                    res.test_accuracy, rep.best_valid_accuracy, rep.best_epoch, r.teacher_accuracy
                ),
            ))
        })();
        // The recipe's pre-training counts against this criterion's budget.
        let elapsed = t0.elapsed() + r.elapsed;
        let (mut pass, mut detail) = full.unwrap_or_else(|err| (false, format!("error: {err}")));
        eprintln!("-- criterion 8: end-to-end capability");
        suite.record(8, "end-to-end capability", &mut pass, &mut detail, elapsed, secs(900));

        suite.run(11, "speech-only inference", None, || {
            let am = model.as_ref().ok_or("no fine-tuned model")?;
            let enc = r.shared.kd_encoder.as_ref().unwrap();
            let with_text = evaluate(enc, am, &r.p.test).map_err(e)?;
            let tmp = tempfile::tempdir().map_err(e)?;
            let stripped = Corpus {
                label_space: r.p.corpus.label_space,
                utterances: r
                    .p
                    .corpus
                    .split(Split::Test)
                    .into_iter()
                    .map(|u| {
                        let mut u = u.clone();
                        u.transcript = None;
                        u
                    })
                    .collect(),
            };
            let path = write_manifest(&stripped, tmp.path()).map_err(e)?;
            let back = read_manifest(&path, r.cfg.synth.label_space, r.cfg.synth.feature_dim).map_err(e)?;
            if back.utterances.iter().any(|u| u.transcript.is_some()) {
                return Ok((false, "transcripts survived the round trip".into()));
            }
            let data = encode_examples(&back.split(Split::Test), &r.p.codebook, r.cfg.synth.label_space).map_err(e)?;
            let without = evaluate(enc, am, &data).map_err(e)?;
            Ok((
                without.accuracy == with_text.accuracy && without.total == with_text.total,
                format!(
                    "accuracy {:.4} with transcripts, {:.4} without ({} examples)",
                    with_text.accuracy, without.accuracy, without.total
                ),
            ))
        });

        suite.run(4, "freezing invariants", None, || {
            let after = checksums_now(r);
            let b = &r.checksums_before;
            let same = [
                ("codebook after PT-KD", b.codebook == after.codebook && b.encoder_codebook_group == after.encoder_codebook_group),
                ("speech encoder after AM-PT and FT", b.kd_encoder == after.kd_encoder),
                ("teacher after PT-KD and FT", b.teacher == after.teacher),
            ];
            let broken: Vec<_> = same.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
            Ok((
                broken.is_empty(),
                if broken.is_empty() { "all checksums bitwise unchanged".into() } else { format!("changed: {}", broken.join(", ")) },
            ))
        });

        let seeds = r.cfg.ablation.seeds.clone();
        let t0 = Instant::now();
        let ablation = (|| -> Check {
            if seeds.len() < 5 {
                return Ok((false, format!("only {} seeds configured", seeds.len())));
            }
            let mut means = Vec::new();
            let mut rows = Vec::new();
            for m in Method::STACK {
                let mut accs = Vec::new();
                for &seed in &seeds {
                    let train = pipeline::low_resource_subset(&r.cfg, &r.p, seed).map_err(e)?;
                    let (_, _, res) = pipeline::run_method(&r.cfg, &r.p, &r.shared, m, &train, seed).map_err(e)?;
                    accs.push(res.test_accuracy);
                }
                eprintln!("   {:<9} {}", m.label(), fmt_accs(&accs));
                means.push(mean(&accs));
                rows.push(format!("{} {:.1}", m.label(), 100.0 * mean(&accs)));
            }
            let monotone = means.windows(2).all(|w| w[1] >= w[0] - 0.005);
            let gain = means[4] - means[0];
            Ok((monotone && gain >= 0.02, format!("{} ({} seeds, full stack {:+.1} points)", rows.join(" / "), seeds.len(), 100.0 * gain)))
        })();
        // A standalone ablation has to pre-train as well.
        let elapsed = t0.elapsed() + r.elapsed;
        let (mut pass, mut detail) = ablation.unwrap_or_else(|err| (false, format!("error: {err}")));
        eprintln!("-- criterion 9: directional ablation");
        suite.record(9, "directional ablation", &mut pass, &mut detail, elapsed, secs(2700));

        suite.run(10, "DA robustness (far-field)", secs(1800), || da_robustness(&seeds));
    }

    suite.outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &suite.outcomes {
        println!(
            "{} {:>2}. {} - {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail,
            o.elapsed.as_secs_f64()
        );
    }
    let failed = suite.outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", suite.outcomes.len() - failed, suite.outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
