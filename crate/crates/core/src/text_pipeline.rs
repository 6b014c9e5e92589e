//! Character-level text teacher: tokenizer, transformer encoder and intent
//! head.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::nn::{Linear, Transformer, TransformerConfig};
use crate::optim::Optimizer;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::argmax;
use crate::training::stage::{minibatch_step, StageConfig};

pub const CHECKPOINT_KIND: &str = "text_teacher";

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Characters plus PAD, UNK and CLS at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;

    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if c == '\n' || c == '\r' || c.is_uppercase() {
                return Err(Error::Config(format!("character {c:?} cannot be in the vocabulary")));
            }
            if index.insert(c, i + SPECIALS.len()).is_some() {
                return Err(Error::Config(format!("duplicate character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(Self::UNK)
    }

    /// One entry per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sp in SPECIALS {
            s.push_str(sp);
            s.push('\n');
        }
        for &c in &self.chars {
            s.push(c);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.split_last() {
            Some((&"", rest)) => rest,
            _ => &lines[..],
        };
        let mut chars = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            let line_no = i + 1;
            if i < SPECIALS.len() {
                if *line != SPECIALS[i] {
                    return Err(Error::Parse { line: line_no, message: format!("expected `{}`", SPECIALS[i]) });
                }
                continue;
            }
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(Error::Parse { line: line_no, message: "expected exactly one character".into() }),
            }
        }
        if lines.len() < SPECIALS.len() {
            return Err(Error::Parse { line: lines.len() + 1, message: "missing special entries".into() });
        }
        Self::new(chars).map_err(|e| Error::Parse { line: 0, message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Character ids, CLS not included.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextTokenSequence(Vec<usize>);

impl TextTokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases and maps each character to its id; unknown characters map to
/// UNK.
pub fn tokenize_text(text: &str, vocab: &CharVocab) -> Result<TextTokenSequence> {
    if text.is_empty() {
        return Err(Error::EmptyInput("text is empty".into()));
    }
    Ok(TextTokenSequence(text.chars().flat_map(char::to_lowercase).map(|c| vocab.id(c)).collect()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextTeacherConfig {
    /// Characters after the three specials, in id order.
    pub alphabet: String,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest input including CLS.
    pub max_len: usize,
    pub num_classes: usize,
}

impl TextTeacherConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self {
            alphabet: crate::data_harness::synth::ALPHABET.into(),
            d_model: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            max_len: 64,
            num_classes,
        }
    }

    pub fn vocab(&self) -> Result<CharVocab> {
        CharVocab::new(self.alphabet.chars())
    }

    fn transformer(&self) -> Result<TransformerConfig> {
        Ok(TransformerConfig {
            vocab_size: self.vocab()?.len(),
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("teacher needs at least two classes".into()));
        }
        self.transformer()?.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub cls: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TextTeacher {
    cfg: TextTeacherConfig,
    vocab: CharVocab,
    store: ParamStore,
    body: Transformer,
    head: Linear,
}

impl TextTeacher {
    pub fn new(cfg: TextTeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let body = Transformer::new(&mut store, "teacher", ParamGroup::Teacher, cfg.transformer()?, &mut rng);
        let head = Linear::new(&mut store, "teacher.intent", ParamGroup::Teacher, cfg.d_model, cfg.num_classes, &mut rng);
        Ok(Self { cfg, vocab, store, body, head })
    }

    pub fn config(&self) -> &TextTeacherConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn tokenize(&self, text: &str) -> Result<TextTokenSequence> {
        tokenize_text(text, &self.vocab)
    }

    /// `(cls [1, D], logits [1, C])`.
    pub fn forward_graph(&self, g: &mut Graph, tokens: &TextTokenSequence) -> Result<(Var, Var)> {
        if tokens.len() + 1 > self.cfg.max_len {
            return Err(Error::Length { len: tokens.len(), max: self.cfg.max_len - 1 });
        }
        if let Some(&t) = tokens.ids().iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Vocab { token: t, vocab: self.vocab.len() });
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CharVocab::CLS);
        ids.extend_from_slice(tokens.ids());
        let h = self.body.forward(g, &self.store, &ids);
        let cls = g.slice_rows(h, 0, 1);
        let logits = self.head.forward(g, &self.store, cls);
        Ok((cls, logits))
    }

    pub fn forward(&self, tokens: &TextTokenSequence) -> Result<TeacherOutputs> {
        let mut g = Graph::inference();
        let (cls, logits) = self.forward_graph(&mut g, tokens)?;
        Ok(TeacherOutputs { cls: g.value(cls).data().to_vec(), logits: g.value(logits).data().to_vec() })
    }

    pub fn ce_loss_graph(&self, g: &mut Graph, tokens: &TextTokenSequence, label: usize) -> Result<Var> {
        if label >= self.cfg.num_classes {
            return Err(Error::Label(format!("label {label} outside [0, {})", self.cfg.num_classes)));
        }
        let (_, logits) = self.forward_graph(g, tokens)?;
        Ok(cross_entropy(g, logits, label))
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        Ok(argmax(&self.forward(&self.tokenize(text)?)?.logits))
    }

    pub fn accuracy(&self, data: &[(String, usize)]) -> Result<f64> {
        Ok(self.score(data)?.0)
    }

    /// `(accuracy, mean cross-entropy)` over labelled texts.
    pub fn score(&self, data: &[(String, usize)]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no examples to score".into()));
        }
        let (mut hits, mut loss) = (0, 0.0);
        for (text, label) in data {
            let logits = self.forward(&self.tokenize(text)?)?.logits;
            if *label >= logits.len() {
                return Err(Error::Label(format!("label {label} outside [0, {})", logits.len())));
            }
            hits += usize::from(argmax(&logits) == *label);
            loss += crate::tensor::log_sum_exp(&logits) - logits[*label];
        }
        let n = data.len() as f64;
        Ok((hits as f64 / n, loss / n))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                config: serde_json::to_value(&self.cfg).expect("config serializes"),
                heads: vec!["intent".into()],
            },
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: TextTeacherConfig = ckpt.config_as(CHECKPOINT_KIND)?;
        let mut t = Self::new(cfg, 0)?;
        t.store.load_from(&ckpt.params)?;
        Ok(t)
    }
}

/// `-log softmax(logits)[label]` for a `[1, C]` row.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Var {
    let lp = g.log_softmax_rows(logits);
    let ll = g.pick(lp, &[(0, label)]);
    let s = g.sum(ll);
    g.scale(s, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub best_epoch: usize,
    pub valid_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub valid_history: Vec<f64>,
}

/// Trains on `(text, flat label)` pairs and returns the parameters from the
/// epoch with the highest validation accuracy. Ties go to the lower
/// validation loss.
pub fn finetune_teacher(
    mut teacher: TextTeacher,
    train: &[(String, usize)],
    valid: &[(String, usize)],
    cfg: &StageConfig,
) -> Result<(TextTeacher, TeacherReport)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput("teacher fine-tuning needs train and validation data".into()));
    }
    let c = teacher.cfg.num_classes;
    let encoded: Vec<(TextTokenSequence, usize)> = train
        .iter()
        .map(|(t, l)| {
            if *l >= c {
                return Err(Error::Label(format!("label {l} outside [0, {c})")));
            }
            Ok((teacher.tokenize(t)?, *l))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &teacher.store);
    let init = teacher.score(valid)?;
    let mut best = (init, 0usize, teacher.store.clone());
    let mut report = TeacherReport { best_epoch: 0, valid_accuracy: init.0, train_loss: vec![], valid_history: vec![init.0] };
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0;
    let mut stale = 0;
    let epochs = if cfg.max_epochs == 0 { usize::MAX } else { cfg.max_epochs };
    'outer: for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
            let lr = cfg.schedule.rate(cfg.lr, step, epoch - 1);
            let batch: Vec<&(TextTokenSequence, usize)> = chunk.iter().map(|&i| &encoded[i]).collect();
            epoch_loss += minibatch_step(&mut teacher, |t| &mut t.store, &mut opt, cfg, lr, &batch, |t, g, (toks, l)| {
                t.ce_loss_graph(g, toks, *l)
            })?;
            batches += 1;
            step += 1;
        }
        report.train_loss.push(epoch_loss / batches.max(1) as f64);
        let score = teacher.score(valid)?;
        report.valid_history.push(score.0);
        if score.0 > best.0 .0 || (score.0 == best.0 .0 && score.1 < best.0 .1) {
            best = (score, epoch, teacher.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    teacher.store.load_from(&best.2)?;
    report.best_epoch = best.1;
    report.valid_accuracy = best.0 .0;
    Ok((teacher, report))
}
