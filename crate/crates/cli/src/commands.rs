use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};
use kdslu_core::acoustic_model::AcousticModel;
use kdslu_core::checkpoint::Checkpoint;
use kdslu_core::config::ExperimentConfig;
use kdslu_core::data_harness::{read_manifest, synth_generate, write_manifest, Corpus, Split};
use kdslu_core::pipeline::{self, Method, MethodResult, Prepared, Shared};
use kdslu_core::speech_encoder::SpeechEncoder;
use kdslu_core::text_pipeline::TextTeacher;
use kdslu_core::tokenizer_vq::{fit_codebook, Codebook};
use kdslu_core::training::{encode_examples, evaluate};
use kdslu_core::Error;

use crate::cli::{AblateArgs, EvaluateArgs, FinetuneArgs};
use crate::report::AblationTable;
use crate::rundir::{RunDir, RunRecord};

pub const MANIFEST: &str = "corpus/manifest.tsv";
pub const CODEBOOK: &str = "codebook.bin";
pub const TEACHER: &str = "teacher.ckpt";
pub const VOCAB: &str = "teacher_vocab.txt";
pub const ENCODER_MLM: &str = "encoder_mlm.ckpt";
pub const ENCODER_KD: &str = "encoder_kd.ckpt";
pub const AM_PT: &str = "am_pt.ckpt";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const ABLATION_JSONL: &str = "ablation.jsonl";

pub fn am_ft_file(m: Method) -> String {
    format!("am_ft_{}.ckpt", format!("{m:?}").to_lowercase())
}

/// Path of a required upstream artifact, or a missing-dependency error
/// naming it.
fn require(dir: &RunDir, name: &str, file: &str) -> Result<PathBuf> {
    let p = dir.file(file);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingDependency { name: name.into(), path: p }.into())
    }
}

fn load_corpus(dir: &RunDir, cfg: &ExperimentConfig) -> Result<Corpus> {
    let p = require(dir, "corpus", MANIFEST)?;
    Ok(read_manifest(&p, cfg.synth.label_space, cfg.synth.feature_dim)?)
}

fn load_prepared(dir: &RunDir, cfg: &ExperimentConfig) -> Result<Prepared> {
    let codebook = Codebook::load(&require(dir, "codebook", CODEBOOK)?)?;
    let corpus = load_corpus(dir, cfg)?;
    Ok(pipeline::prepare_with(corpus, codebook, cfg)?)
}

fn load_encoder(dir: &RunDir, name: &str, file: &str) -> Result<SpeechEncoder> {
    Ok(SpeechEncoder::from_checkpoint(&Checkpoint::load(&require(dir, name, file)?)?)?)
}

fn save(dir: &RunDir, rec: &mut RunRecord, file: &str, ckpt: &Checkpoint) -> Result<()> {
    crate::rundir::write_atomic(&dir.file(file), &ckpt.to_bytes())?;
    rec.checkpoints.push(file.into());
    Ok(())
}

fn finish(dir: &RunDir, mut rec: RunRecord, t0: Instant) -> Result<RunRecord> {
    rec.wall_clock_s = t0.elapsed().as_secs_f64();
    dir.append_metrics(&rec.metric_lines())?;
    dir.append_record(&rec)?;
    Ok(rec)
}

pub fn synth(dir: &RunDir, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let t0 = Instant::now();
    let mut rec = RunRecord::new(&dir.id, "synth", cfg);
    let corpus = synth_generate(&cfg.synth)?;
    let path = write_manifest(&corpus, &dir.file("corpus")).context("writing manifest")?;
    for s in Split::ALL {
        rec.final_metrics.insert(format!("{}_utterances", s.as_str()), corpus.split(s).len() as f64);
    }
    rec.checkpoints.push(path.strip_prefix(&dir.path).unwrap_or(&path).display().to_string());
    finish(dir, rec, t0)
}

pub fn fit_codebook_cmd(dir: &RunDir, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let t0 = Instant::now();
    let mut rec = RunRecord::new(&dir.id, "fit-codebook", cfg);
    let corpus = load_corpus(dir, cfg)?;
    let frames: Vec<_> = corpus.split(Split::Train).iter().map(|u| u.frames.clone()).collect();
    let cb = fit_codebook(&frames, cfg.codebook.k, cfg.codebook.iters, cfg.codebook.seed)?;
    crate::rundir::write_atomic(&dir.file(CODEBOOK), &cb.to_bytes())?;
    rec.checkpoints.push(CODEBOOK.into());
    rec.final_metrics.insert("k".into(), cb.k() as f64);
    finish(dir, rec, t0)
}

pub fn pretrain_kd(dir: &RunDir, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let t0 = Instant::now();
    let mut rec = RunRecord::new(&dir.id, "pretrain-kd", cfg);
    let p = load_prepared(dir, cfg)?;
    let (teacher, tr) = pipeline::train_teacher(cfg, &p)?;
    rec.push_series("teacher_valid_accuracy", tr.valid_history.iter().enumerate().map(|(e, &a)| (e as u64, a)));
    rec.final_metrics.insert("teacher_valid_accuracy".into(), tr.valid_accuracy);
    save(dir, &mut rec, TEACHER, &teacher.to_checkpoint())?;
    teacher.vocab().save(&dir.file(VOCAB))?;

    let (mlm, mr) = pipeline::mlm_encoder(cfg, &p)?;
    rec.push_series("mlm_window_loss", mr.windows.iter().enumerate().map(|(i, &w)| ((i as u64 + 1) * 50, w)));
    save(dir, &mut rec, ENCODER_MLM, &mlm.to_checkpoint())?;

    let (kd, kr) = pipeline::pt_kd_encoder(cfg, &p, mlm, &teacher)?;
    rec.push_series("pt_kd_window_loss", kr.windows.iter().enumerate().map(|(i, &w)| ((i as u64 + 1) * 50, w)));
    rec.push_series("pt_kd_kd_loss", kr.kd.iter().enumerate().map(|(i, &w)| (i as u64, w)));
    for (k, v) in [("cls_l1_initial", kr.initial_cls_l1), ("cls_l1_final", kr.final_cls_l1)] {
        if let Some(v) = v {
            rec.final_metrics.insert(k.into(), v);
        }
    }
    rec.final_metrics.insert("pt_kd_steps".into(), kr.steps as f64);
    save(dir, &mut rec, ENCODER_KD, &kd.to_checkpoint())?;
    finish(dir, rec, t0)
}

pub fn pretrain_am(dir: &RunDir, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let t0 = Instant::now();
    let mut rec = RunRecord::new(&dir.id, "pretrain-am", cfg);
    let p = load_prepared(dir, cfg)?;
    let enc = load_encoder(dir, "pt-kd encoder", ENCODER_KD)?;
    let (am, r) = pipeline::am_pretrain(cfg, &p, &enc)?;
    rec.push_series("valid_ctc", r.valid_ctc.iter().map(|&(s, v)| (s as u64, v)));
    rec.final_metrics.insert("best_valid_ctc".into(), r.best_valid_ctc);
    rec.final_metrics.insert("valid_char_accuracy".into(), r.valid_char_accuracy);
    rec.final_metrics.insert("skipped_infeasible".into(), r.skipped_infeasible as f64);
    save(dir, &mut rec, AM_PT, &am.to_checkpoint())?;
    finish(dir, rec, t0)
}

/// Loads whatever the stack up to `method` needs, naming the first missing
/// artifact.
fn shared_for(dir: &RunDir, p: &Prepared, method: Method) -> Result<Shared> {
    let mlm_encoder = if method.includes(Method::PtKd) {
        // Past the baseline only the distilled encoder is read; it fills both slots.
        load_encoder(dir, "pt-kd encoder", ENCODER_KD)?
    } else {
        load_encoder(dir, "mlm encoder", ENCODER_MLM)?
    };
    let kd_encoder = method.includes(Method::PtKd).then(|| mlm_encoder.clone());
    let teacher = if method.includes(Method::FtKd) {
        let t = TextTeacher::from_checkpoint(&Checkpoint::load(&require(dir, "teacher", TEACHER)?)?)?;
        let acc = t.accuracy(&pipeline::text_pairs(&p.valid)?)?;
        Some((t, acc))
    } else {
        None
    };
    let am_body = if method.includes(Method::AmPt) {
        Some(AcousticModel::from_checkpoint(&Checkpoint::load(&require(dir, "am-pt checkpoint", AM_PT)?)?)?)
    } else {
        None
    };
    Ok(Shared { teacher, mlm_encoder, kd_encoder, am_body })
}

pub fn finetune(dir: &RunDir, cfg: &ExperimentConfig, args: &FinetuneArgs) -> Result<RunRecord> {
    let t0 = Instant::now();
    let method: Method = args.method.into();
    let mut rec = RunRecord::new(&dir.id, "finetune", cfg);
    let p = load_prepared(dir, cfg)?;
    let shared = shared_for(dir, &p, method)?;
    let train = match args.part {
        Some(i) => pipeline::low_resource_subset(cfg, &p, i as u64)?,
        None => p.train.clone(),
    };
    let (am, report, result) = pipeline::run_method(cfg, &p, &shared, method, &train, cfg.seed)?;
    rec.push_series("valid_accuracy", report.valid_history.iter().enumerate().map(|(e, &a)| (e as u64, a)));
    rec.push_series("train_loss", report.train_loss.iter().enumerate().map(|(e, &l)| (e as u64 + 1, l)));
    rec.final_metrics.insert("valid_accuracy".into(), result.valid_accuracy);
    rec.final_metrics.insert("test_accuracy".into(), result.test_accuracy);
    rec.final_metrics.insert("best_epoch".into(), result.best_epoch as f64);
    rec.final_metrics.insert("train_size".into(), train.len() as f64);
    save(dir, &mut rec, &am_ft_file(method), &am.to_checkpoint())?;
    finish(dir, rec, t0)
}

pub fn evaluate_cmd(dir: &RunDir, cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<RunRecord> {
    let t0 = Instant::now();
    let method: Method = args.method.into();
    let mut rec = RunRecord::new(&dir.id, "evaluate", cfg);
    let split = Split::from_str(&args.split)?;
    let codebook = Codebook::load(&require(dir, "codebook", CODEBOOK)?)?;
    let corpus = match &args.manifest {
        Some(m) => read_manifest(m, cfg.synth.label_space, cfg.synth.feature_dim)?,
        None => load_corpus(dir, cfg)?,
    };
    let data = encode_examples(&corpus.split(split), &codebook, cfg.synth.label_space)?;
    let (enc, am) = if args.untrained {
        (pipeline::fresh_encoder(cfg)?, pipeline::intent_model(cfg, cfg.seed, None)?)
    } else {
        let enc = if method.includes(Method::PtKd) {
            load_encoder(dir, "pt-kd encoder", ENCODER_KD)?
        } else {
            load_encoder(dir, "mlm encoder", ENCODER_MLM)?
        };
        let ckpt = require(dir, "fine-tuned model", &am_ft_file(method))?;
        (enc, AcousticModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?)
    };
    let r = evaluate(&enc, &am, &data)?;
    rec.final_metrics.insert("accuracy".into(), r.accuracy);
    rec.final_metrics.insert("correct".into(), r.correct as f64);
    rec.final_metrics.insert("total".into(), r.total as f64);
    finish(dir, rec, t0)
}

/// Outcome of an ablation: the table plus every per-seed result.
pub struct Ablation {
    pub table: AblationTable,
    pub results: Vec<MethodResult>,
    pub failures: Vec<(Method, u64, String)>,
}

/// Runs the cumulative stack for every seed. A failing seed is recorded as
/// missing for the methods it did not finish; other seeds carry on.
pub fn run_ablation(cfg: &ExperimentConfig, p: &Prepared, shared: &Shared, methods: &[Method], seeds: &[u64]) -> Ablation {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let train = match pipeline::low_resource_subset(cfg, p, seed) {
            Ok(t) => t,
            Err(e) => {
                failures.extend(methods.iter().map(|&m| (m, seed, e.to_string())));
                continue;
            }
        };
        for (i, &m) in methods.iter().enumerate() {
            match pipeline::run_method(cfg, p, shared, m, &train, seed) {
                Ok((_, _, r)) => results.push(r),
                Err(e) => {
                    failures.extend(methods[i..].iter().map(|&m| (m, seed, e.to_string())));
                    break;
                }
            }
        }
    }
    Ablation { table: AblationTable::build(methods, seeds, &results), results, failures }
}

pub fn ablate(dir: &RunDir, cfg: &ExperimentConfig, args: &AblateArgs) -> Result<(RunRecord, AblationTable)> {
    let t0 = Instant::now();
    let upto: Method = args.upto.into();
    let methods: Vec<Method> = Method::STACK.into_iter().filter(|m| upto.includes(*m)).collect();
    let seeds = if args.seeds.is_empty() { cfg.ablation.seeds.clone() } else { args.seeds.clone() };
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()).into());
    }
    let mut rec = RunRecord::new(&dir.id, "ablate", cfg);
    let p = pipeline::prepare(cfg)?;
    let shared = Shared::build(cfg, &p, upto)?;
    let out = run_ablation(cfg, &p, &shared, &methods, &seeds);
    for r in &out.table.rows {
        let key = format!("{:?}", r.method).to_lowercase();
        if let Some(m) = r.test_mean {
            rec.final_metrics.insert(format!("{key}_test_mean"), m);
        }
        if let Some(m) = r.valid_mean {
            rec.final_metrics.insert(format!("{key}_valid_mean"), m);
        }
    }
    rec.final_metrics.insert("failed_runs".into(), out.failures.len() as f64);
    for (m, s, e) in &out.failures {
        eprintln!("ablation: {} seed {s} failed: {e}", m.label());
    }
    std::fs::write(dir.file(ABLATION_TEXT), out.table.to_text())?;
    std::fs::write(dir.file(ABLATION_JSONL), out.table.to_jsonl())?;
    rec.checkpoints.extend([ABLATION_TEXT.to_string(), ABLATION_JSONL.to_string()]);
    Ok((finish(dir, rec, t0)?, out.table))
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os("KDSLU_OUT").map(PathBuf::from).unwrap_or_else(|| Path::new("runs").to_path_buf())
}
