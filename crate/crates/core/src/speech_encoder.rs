//! BERT-style encoder over discrete audio tokens, trained with masked
//! language modeling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::nn::{Linear, Transformer, TransformerConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer_vq::{SpecialTokens, TokenSequence};

pub const CHECKPOINT_KIND: &str = "speech_encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechEncoderConfig {
    /// Number of acoustic codes `K`; the vocabulary adds CLS, MASK and PAD.
    pub codebook_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest input including CLS.
    pub max_len: usize,
}

impl SpeechEncoderConfig {
    pub fn toy(codebook_size: usize) -> Self {
        Self { codebook_size, d_model: 32, layers: 2, heads: 4, ff_dim: 64, max_len: 256 }
    }

    /// BERT-base shape. Documented for parity; not exercised by the tests.
    pub fn paper(codebook_size: usize) -> Self {
        Self { codebook_size, d_model: 768, layers: 12, heads: 12, ff_dim: 3072, max_len: 2048 }
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_codebook(self.codebook_size)
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            vocab_size: self.vocab_size(),
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        self.transformer().validate()
    }

    /// Closed-form parameter count: transformer plus the MLM output head.
    pub fn num_params(&self) -> usize {
        self.transformer().num_params() + Linear::num_params(self.d_model, self.codebook_size)
    }
}

/// Contextualized vectors for CLS and every input position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub cls: Vec<f64>,
    /// `[T, D]`, one row per input token (CLS excluded).
    pub states: Tensor,
}

impl HiddenSequence {
    pub fn new(cls: Vec<f64>, states: Tensor) -> Result<Self> {
        if states.shape().len() != 2 || states.cols() != cls.len() {
            return Err(Error::Shape(format!("states {:?} vs cls dim {}", states.shape(), cls.len())));
        }
        if !states.is_finite() || cls.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("hidden sequence contains non-finite values".into()));
        }
        Ok(Self { cls, states })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    cfg: SpeechEncoderConfig,
    store: ParamStore,
    body: Transformer,
    mlm_head: Linear,
}

impl SpeechEncoder {
    pub fn new(cfg: SpeechEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let body = Transformer::new(&mut store, "speech", ParamGroup::SpeechEncoder, cfg.transformer(), &mut rng);
        let mlm_head = Linear::new(&mut store, "speech.mlm_head", ParamGroup::Heads, cfg.d_model, cfg.codebook_size, &mut rng);
        Ok(Self { cfg, store, body, mlm_head })
    }

    pub fn config(&self) -> &SpeechEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mlm_head(&self) -> Linear {
        self.mlm_head
    }

    /// Input ids with CLS in front, after vocabulary and length checks. A
    /// leading CLS already present in `tokens` is kept, not doubled.
    pub fn input_ids(&self, tokens: &TokenSequence) -> Result<Vec<usize>> {
        if tokens.codebook_size() != self.cfg.codebook_size {
            return Err(Error::Vocab { token: tokens.codebook_size(), vocab: self.cfg.codebook_size });
        }
        let sp = self.cfg.specials();
        let body = if tokens.has_cls() { &tokens.tokens()[1..] } else { tokens.tokens() };
        if body.len() + 1 > self.cfg.max_len {
            return Err(Error::Length { len: body.len(), max: self.cfg.max_len - 1 });
        }
        if let Some(&t) = body.iter().find(|&&t| t >= self.cfg.vocab_size() || t == sp.cls) {
            return Err(Error::Vocab { token: t, vocab: self.cfg.vocab_size() });
        }
        let mut ids = Vec::with_capacity(body.len() + 1);
        ids.push(sp.cls);
        ids.extend_from_slice(body);
        Ok(ids)
    }

    /// `[T + 1, D]` states; row 0 is CLS.
    pub fn forward_graph(&self, g: &mut Graph, ids: &[usize]) -> Var {
        self.body.forward(g, &self.store, ids)
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<HiddenSequence> {
        let ids = self.input_ids(tokens)?;
        let mut g = Graph::inference();
        let h = self.forward_graph(&mut g, &ids);
        Ok(split_cls(g.value(h)))
    }

    pub fn cls_representation(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.cls)
    }

    /// Mean cross-entropy of the original codes at masked positions, with
    /// those positions replaced by MASK in the input.
    pub fn mlm_loss_graph(&self, g: &mut Graph, tokens: &TokenSequence, mask: &[bool]) -> Result<Var> {
        let ids = self.input_ids(tokens)?;
        let body = &ids[1..];
        if mask.len() != body.len() {
            return Err(Error::Mask(format!("mask length {} for {} tokens", mask.len(), body.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::NoMaskedPositions);
        }
        let sp = self.cfg.specials();
        let mut corrupted = ids.clone();
        let mut targets = Vec::new();
        for (i, (&m, &t)) in mask.iter().zip(body).enumerate() {
            if m {
                if t >= self.cfg.codebook_size {
                    return Err(Error::Mask(format!("position {i} holds special token {t}")));
                }
                corrupted[i + 1] = sp.mask;
                targets.push((i + 1, t));
            }
        }
        let h = self.forward_graph(g, &corrupted);
        let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
        let picked: Vec<Var> = rows.iter().map(|&r| g.slice_rows(h, r, 1)).collect();
        let hm = if picked.len() == 1 { picked[0] } else { g.concat_rows(&picked) };
        let logits = self.mlm_head.forward(g, &self.store, hm);
        let logp = g.log_softmax_rows(logits);
        let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(k, &(_, t))| (k, t)).collect();
        let ll = g.pick(logp, &idx);
        let s = g.sum(ll);
        Ok(g.scale(s, -1.0 / targets.len() as f64))
    }

    pub fn mlm_loss(&self, tokens: &TokenSequence, mask: &[bool]) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.mlm_loss_graph(&mut g, tokens, mask)?;
        Ok(g.value(l).item())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                config: serde_json::to_value(&self.cfg).expect("config serializes"),
                heads: vec!["mlm".into()],
            },
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: SpeechEncoderConfig = ckpt.config_as(CHECKPOINT_KIND)?;
        let mut enc = Self::new(cfg, 0)?;
        enc.store.load_from(&ckpt.params)?;
        Ok(enc)
    }
}

/// Splits `[T + 1, D]` encoder output into CLS and per-token states.
pub fn split_cls(h: &Tensor) -> HiddenSequence {
    let d = h.cols();
    let cls = h.row_slice(0).to_vec();
    let states = Tensor::matrix(h.rows() - 1, d, h.data()[d..].to_vec());
    HiddenSequence { cls, states }
}
