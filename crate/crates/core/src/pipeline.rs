//! The training recipe end to end: corpus, codebook, teacher, encoder
//! pre-training, acoustic pre-training, and the cumulative ablation stack.

use serde::{Deserialize, Serialize};

use crate::acoustic_model::{AMHeads, AcousticModel};
use crate::config::ExperimentConfig;
use crate::data_harness::{make_low_resource_splits, synth_generate, Corpus, Split};
use crate::error::{Error, Result};
use crate::speech_encoder::SpeechEncoder;
use crate::text_pipeline::{finetune_teacher, TeacherReport, TextTeacher};
use crate::tokenizer_vq::{fit_codebook, Codebook};
use crate::training::{
    derive_seed, encode_examples, evaluate, run_am_pretrain, run_finetune, run_pt_kd, AmPtReport, Example, FtReport,
    PtKdReport, QualifiedTeacher, StageConfig,
};

/// Quantized splits of one synthetic corpus.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub codebook: Codebook,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let corpus = synth_generate(&cfg.synth)?;
    let train_frames: Vec<_> = corpus.split(Split::Train).iter().map(|u| u.frames.clone()).collect();
    let codebook = fit_codebook(&train_frames, cfg.codebook.k, cfg.codebook.iters, cfg.codebook.seed)?;
    prepare_with(corpus, codebook, cfg)
}

pub fn prepare_with(corpus: Corpus, codebook: Codebook, cfg: &ExperimentConfig) -> Result<Prepared> {
    let space = cfg.synth.label_space;
    let enc = |s| encode_examples(&corpus.split(s), &codebook, space);
    let (train, valid, test) = (enc(Split::Train)?, enc(Split::Valid)?, enc(Split::Test)?);
    Ok(Prepared { train, valid, test, corpus, codebook })
}

/// `(transcript, label)` pairs; every example must carry a transcript.
pub fn text_pairs(examples: &[Example]) -> Result<Vec<(String, usize)>> {
    examples
        .iter()
        .map(|e| {
            let t = e.transcript.clone().ok_or_else(|| Error::Pairing(format!("{} has no transcript", e.id)))?;
            Ok((t, e.label))
        })
        .collect()
}

pub fn train_teacher(cfg: &ExperimentConfig, p: &Prepared) -> Result<(TextTeacher, TeacherReport)> {
    let teacher = TextTeacher::new(cfg.models.teacher.clone(), derive_seed(cfg.seed, 1, 0))?;
    finetune_teacher(teacher, &text_pairs(&p.train)?, &text_pairs(&p.valid)?, &cfg.training.teacher)
}

pub fn fresh_encoder(cfg: &ExperimentConfig) -> Result<SpeechEncoder> {
    SpeechEncoder::new(cfg.models.encoder.clone(), derive_seed(cfg.seed, 2, 0))
}

/// Masked-LM pre-training from a fresh encoder: the baseline encoder.
pub fn mlm_encoder(cfg: &ExperimentConfig, p: &Prepared) -> Result<(SpeechEncoder, PtKdReport)> {
    run_pt_kd(fresh_encoder(cfg)?, None, &p.train, &[], &cfg.training.mlm)
}

/// Continues pre-training `base` with CLS distillation from `teacher`.
pub fn pt_kd_encoder(
    cfg: &ExperimentConfig,
    p: &Prepared,
    base: SpeechEncoder,
    teacher: &TextTeacher,
) -> Result<(SpeechEncoder, PtKdReport)> {
    run_pt_kd(base, Some(teacher), &p.train, &p.valid, &cfg.training.pt_kd)
}

pub fn am_pretrain(cfg: &ExperimentConfig, p: &Prepared, enc: &SpeechEncoder) -> Result<(AcousticModel, AmPtReport)> {
    let am = AcousticModel::new(cfg.models.am.clone(), AMHeads { intent: false, ctc: true }, derive_seed(cfg.seed, 3, 0))?;
    run_am_pretrain(am, enc, &p.train, &p.valid, &cfg.training.am_pt)
}

/// Intent model seeded by `seed`, optionally taking its body from `body`.
pub fn intent_model(cfg: &ExperimentConfig, seed: u64, body: Option<&AcousticModel>) -> Result<AcousticModel> {
    let mut am = AcousticModel::new(cfg.models.am.clone(), AMHeads { intent: true, ctc: false }, derive_seed(seed, 4, 0))?;
    if let Some(b) = body {
        am.load_body(b)?;
    }
    Ok(am)
}

/// One rung of the cumulative method stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    PtKd,
    FtKd,
    AmPt,
    Da,
}

impl Method {
    pub const STACK: [Method; 5] = [Method::Baseline, Method::PtKd, Method::FtKd, Method::AmPt, Method::Da];

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PtKd => "+PT-KD",
            Method::FtKd => "+FT-KD",
            Method::AmPt => "+AM-PT",
            Method::Da => "+DA",
        }
    }

    /// Whether the method is on at stack position `self` when `m` is asked.
    pub fn includes(self, m: Method) -> bool {
        m <= self
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Method::STACK
            .into_iter()
            .find(|m| norm(m.label()) == norm(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Seed-independent artifacts the stack draws on. Entries a plan never
/// needs may be left `None`.
pub struct Shared {
    pub teacher: Option<(TextTeacher, f64)>,
    pub mlm_encoder: SpeechEncoder,
    pub kd_encoder: Option<SpeechEncoder>,
    pub am_body: Option<AcousticModel>,
}

impl Shared {
    pub fn build(cfg: &ExperimentConfig, p: &Prepared, upto: Method) -> Result<Self> {
        let (mlm, _) = mlm_encoder(cfg, p)?;
        let teacher = if upto.includes(Method::PtKd) {
            let (t, r) = train_teacher(cfg, p)?;
            Some((t, r.valid_accuracy))
        } else {
            None
        };
        let kd_encoder = match &teacher {
            Some((t, _)) => Some(pt_kd_encoder(cfg, p, mlm.clone(), t)?.0),
            None => None,
        };
        let am_body = match (&kd_encoder, upto.includes(Method::AmPt)) {
            (Some(e), true) => Some(am_pretrain(cfg, p, e)?.0),
            _ => None,
        };
        Ok(Self { teacher, mlm_encoder: mlm, kd_encoder, am_body })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub seed: u64,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

/// Training subset for ablation seed `seed`: one of the low-resource parts.
pub fn low_resource_subset(cfg: &ExperimentConfig, p: &Prepared, seed: u64) -> Result<Vec<Example>> {
    let parts = make_low_resource_splits(p.train.len(), cfg.ablation.parts, cfg.ablation.split_seed)?;
    let part = &parts[(seed % parts.len() as u64) as usize];
    Ok(part.iter().map(|&i| p.train[i].clone()).collect())
}

/// Fine-tunes and evaluates the stack up to `method` on `train`.
pub fn run_method(
    cfg: &ExperimentConfig,
    p: &Prepared,
    shared: &Shared,
    method: Method,
    train: &[Example],
    seed: u64,
) -> Result<(AcousticModel, FtReport, MethodResult)> {
    let missing = |what: &str| Error::Config(format!("method {} needs {what}", method.label()));
    let enc = if method.includes(Method::PtKd) {
        shared.kd_encoder.as_ref().ok_or_else(|| missing("a PT-KD encoder"))?
    } else {
        &shared.mlm_encoder
    };
    let body = if method.includes(Method::AmPt) {
        Some(shared.am_body.as_ref().ok_or_else(|| missing("a pre-trained acoustic model"))?)
    } else {
        None
    };
    let mut ft: StageConfig = cfg.training.ft.clone();
    ft.seed = seed;
    ft.weights.kd = if method.includes(Method::FtKd) { cfg.training.ft.weights.kd } else { 0.0 };
    ft.da.enabled = method.includes(Method::Da);
    let teacher = match (&shared.teacher, ft.weights.kd > 0.0) {
        (Some((t, acc)), true) => Some(QualifiedTeacher { teacher: t, valid_accuracy: *acc }),
        (None, true) => return Err(missing("a fine-tuned teacher")),
        _ => None,
    };
    let am = intent_model(cfg, seed, body)?;
    let (am, report) = run_finetune(am, enc, teacher, train, &p.valid, &ft)?;
    let test = evaluate(enc, &am, &p.test)?;
    let result = MethodResult {
        method,
        seed,
        valid_accuracy: report.best_valid_accuracy,
        test_accuracy: test.accuracy,
        best_epoch: report.best_epoch,
    };
    Ok((am, report, result))
}
