//! Convolution + bidirectional GRU stack over contextualized speech states,
//! with a max-pooled intent head and a per-step CTC head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::ctc;
use crate::error::{Error, Result};
use crate::nn::{BiGru, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{argmax, Tensor};

pub const CHECKPOINT_KIND: &str = "acoustic_model";

/// Kernel and stride are (time, feature).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AMConfig {
    pub input_dim: usize,
    pub conv: Vec<ConvSpec>,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub num_classes: usize,
    /// CTC symbols including the blank at index 0.
    pub ctc_alphabet: usize,
}

impl AMConfig {
    pub fn toy(input_dim: usize, num_classes: usize, ctc_alphabet: usize) -> Self {
        Self {
            input_dim,
            conv: vec![
                ConvSpec { channels: 4, kernel: (5, 3), stride: (2, 2) },
                ConvSpec { channels: 4, kernel: (3, 3), stride: (2, 1) },
            ],
            rnn_layers: 2,
            rnn_hidden: 32,
            num_classes,
            ctc_alphabet,
        }
    }

    /// Full-size DeepSpeech2-like shape. Documented for parity only.
    pub fn paper(input_dim: usize, num_classes: usize, ctc_alphabet: usize) -> Self {
        Self {
            input_dim,
            conv: vec![
                ConvSpec { channels: 32, kernel: (41, 11), stride: (2, 2) },
                ConvSpec { channels: 32, kernel: (21, 11), stride: (2, 1) },
            ],
            rnn_layers: 5,
            rnn_hidden: 768,
            num_classes,
            ctc_alphabet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.conv.is_empty() {
            return Err(Error::Config("acoustic model needs input_dim > 0 and at least one conv layer".into()));
        }
        for c in &self.conv {
            if c.channels == 0 || c.kernel.0 == 0 || c.kernel.1 == 0 || c.stride.0 == 0 || c.stride.1 == 0 {
                return Err(Error::Config(format!("invalid conv layer {c:?}")));
            }
        }
        if self.rnn_layers == 0 || self.rnn_hidden == 0 {
            return Err(Error::Config("recurrent layers and hidden size must be positive".into()));
        }
        if self.num_classes < 2 || self.ctc_alphabet < 2 {
            return Err(Error::Config("need at least two intent classes and two CTC symbols".into()));
        }
        Ok(())
    }

    /// Downsampled length `T'` under same-padding stride arithmetic.
    pub fn output_len(&self, t: usize) -> usize {
        self.conv.iter().fold(t, |n, c| n.div_ceil(c.stride.0))
    }

    fn feature_width(&self) -> usize {
        self.conv.iter().fold(self.input_dim, |n, c| n.div_ceil(c.stride.1))
    }

    /// Width of each row fed to the first recurrent layer.
    pub fn rnn_input_dim(&self) -> usize {
        self.conv.last().unwrap().channels * self.feature_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AMHeads {
    pub intent: bool,
    pub ctc: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AMCheckpointConfig {
    config: AMConfig,
    heads: AMHeads,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    cfg: AMConfig,
    store: ParamStore,
    convs: Vec<(usize, usize)>,
    rnns: Vec<BiGru>,
    intent: Option<Linear>,
    ctc: Option<Linear>,
}

impl AcousticModel {
    pub fn new(cfg: AMConfig, heads: AMHeads, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, c) in cfg.conv.iter().enumerate() {
            let fan_in = in_ch * c.kernel.0 * c.kernel.1;
            let w = store.add_normal(
                format!("am.conv{i}.weight"),
                ParamGroup::Am,
                &[c.channels, in_ch, c.kernel.0, c.kernel.1],
                1.0 / (fan_in as f64).sqrt(),
                &mut rng,
            );
            let b = store.add(format!("am.conv{i}.bias"), ParamGroup::Am, Tensor::zeros(&[1, c.channels]));
            convs.push((w, b));
            in_ch = c.channels;
        }
        let mut rnns = Vec::new();
        let mut width = cfg.rnn_input_dim();
        for i in 0..cfg.rnn_layers {
            rnns.push(BiGru::new(&mut store, &format!("am.rnn{i}"), ParamGroup::Am, width, cfg.rnn_hidden, &mut rng));
            width = 2 * cfg.rnn_hidden;
        }
        let mut model = Self { cfg, store, convs, rnns, intent: None, ctc: None };
        // Heads draw from their own streams so adding one never shifts another.
        if heads.intent {
            model.reset_intent_head(seed);
        }
        if heads.ctc {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xC7C);
            let (w, a) = (2 * model.cfg.rnn_hidden, model.cfg.ctc_alphabet);
            model.ctc = Some(Linear::new(&mut model.store, "am.ctc_head", ParamGroup::Heads, w, a, &mut r));
        }
        Ok(model)
    }

    /// Adds or re-initializes the intent projection.
    pub fn reset_intent_head(&mut self, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x1473);
        let (w, c) = (2 * self.cfg.rnn_hidden, self.cfg.num_classes);
        match self.intent {
            Some(head) => {
                let fresh = {
                    let mut tmp = ParamStore::new();
                    let l = Linear::new(&mut tmp, "x", ParamGroup::Heads, w, c, &mut r);
                    (tmp.value(l.weight_id()).clone(), tmp.value(l.bias_id()).clone())
                };
                *self.store.value_mut(head.weight_id()) = fresh.0;
                *self.store.value_mut(head.bias_id()) = fresh.1;
            }
            None => self.intent = Some(Linear::new(&mut self.store, "am.intent_head", ParamGroup::Heads, w, c, &mut r)),
        }
    }

    pub fn config(&self) -> &AMConfig {
        &self.cfg
    }

    pub fn heads(&self) -> AMHeads {
        AMHeads { intent: self.intent.is_some(), ctc: self.ctc.is_some() }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn intent_head(&self) -> Option<Linear> {
        self.intent
    }

    /// `[T, D]` states to `[T', 2H]` features.
    pub fn features_graph(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let v = g.value(states);
        let (t, d) = (v.rows(), v.cols());
        if v.shape().len() != 2 || d != self.cfg.input_dim {
            return Err(Error::Shape(format!("AM input {:?}, expected [T, {}]", v.shape(), self.cfg.input_dim)));
        }
        if t == 0 {
            return Err(Error::Length { len: 0, max: 0 });
        }
        let mut x = g.as_plane(states);
        let (mut h, mut w, mut ch) = (t, d, 1);
        for (spec, &(wi, bi)) in self.cfg.conv.iter().zip(&self.convs) {
            let geom = ConvGeom::same(ch, spec.channels, h, w, spec.kernel, spec.stride);
            let wv = g.param(&self.store, wi);
            let bv = g.param(&self.store, bi);
            let y = g.conv2d(x, wv, bv, geom);
            x = g.gelu(y);
            (h, w, ch) = (geom.out_h, geom.out_w, spec.channels);
        }
        let mut seq = g.conv_to_seq(x);
        for rnn in &self.rnns {
            seq = rnn.forward(g, &self.store, seq);
        }
        Ok(seq)
    }

    /// Max over time, then the intent projection: `[1, C]`.
    pub fn intent_logits_graph(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let head = self.intent.ok_or_else(|| Error::Checkpoint("acoustic model has no intent head".into()))?;
        let pooled = g.max_rows(features);
        Ok(head.forward(g, &self.store, pooled))
    }

    /// Per-step CTC scores: `[T', A]`.
    pub fn ctc_logits_graph(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let head = self.ctc.ok_or_else(|| Error::Checkpoint("acoustic model has no CTC head".into()))?;
        Ok(head.forward(g, &self.store, features))
    }

    pub fn ctc_loss_graph(&self, g: &mut Graph, states: Var, target: &[usize]) -> Result<Var> {
        let f = self.features_graph(g, states)?;
        let logits = self.ctc_logits_graph(g, f)?;
        ctc::ctc_loss(g, logits, target)
    }

    pub fn am_forward(&self, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let f = self.features_graph(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    pub fn intent_logits(&self, states: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let f = self.features_graph(&mut g, x)?;
        let l = self.intent_logits_graph(&mut g, f)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn predict(&self, states: &Tensor) -> Result<usize> {
        Ok(argmax(&self.intent_logits(states)?))
    }

    pub fn greedy_decode(&self, states: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let f = self.features_graph(&mut g, x)?;
        let l = self.ctc_logits_graph(&mut g, f)?;
        Ok(ctc::greedy_decode(g.value(l)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let heads = self.heads();
        let mut names = Vec::new();
        if heads.intent {
            names.push("intent".to_string());
        }
        if heads.ctc {
            names.push("ctc".to_string());
        }
        let cfg = AMCheckpointConfig { config: self.cfg.clone(), heads };
        Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                config: serde_json::to_value(cfg).expect("config serializes"),
                heads: names,
            },
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let c: AMCheckpointConfig = ckpt.config_as(CHECKPOINT_KIND)?;
        let mut m = Self::new(c.config, c.heads, 0)?;
        m.store.load_from(&ckpt.params)?;
        Ok(m)
    }

    /// Copies the conv and recurrent weights of `other`; heads stay as they are.
    pub fn load_body(&mut self, other: &AcousticModel) -> Result<usize> {
        if other.cfg.conv != self.cfg.conv
            || other.cfg.rnn_layers != self.cfg.rnn_layers
            || other.cfg.rnn_hidden != self.cfg.rnn_hidden
            || other.cfg.input_dim != self.cfg.input_dim
        {
            return Err(Error::Checkpoint("acoustic model bodies differ in shape".into()));
        }
        self.store.load_matching(&other.store, |p| p.group == ParamGroup::Am)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::params::FreezeSet;
    use rand::Rng;

    fn small(classes: usize) -> AMConfig {
        AMConfig {
            input_dim: 6,
            conv: vec![
                ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 2) },
                ConvSpec { channels: 2, kernel: (3, 3), stride: (2, 1) },
            ],
            rnn_layers: 1,
            rnn_hidden: 4,
            num_classes: classes,
            ctc_alphabet: 4,
        }
    }

    fn both() -> AMHeads {
        AMHeads { intent: true, ctc: true }
    }

    fn random(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_length_arithmetic() {
        let mut cfg = AMConfig::toy(32, 24, 29);
        assert_eq!(cfg.output_len(20), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let t: usize = rng.random_range(1..200);
            cfg.conv[0].stride.0 = rng.random_range(1..4);
            cfg.conv[1].stride.0 = rng.random_range(1..4);
            let (s0, s1) = (cfg.conv[0].stride.0, cfg.conv[1].stride.0);
            let closed = t.div_ceil(s0);
            let closed = closed.div_ceil(s1);
            assert_eq!(cfg.output_len(t), closed);
        }
    }

    #[test]
    fn toy_output_shape() {
        let cfg = AMConfig::toy(32, 24, 29);
        let m = AcousticModel::new(cfg.clone(), both(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = m.am_forward(&random(&mut rng, 37, 32)).unwrap();
        assert_eq!(f.shape(), &[cfg.output_len(37), 64]);
        assert!(f.is_finite());
        assert!(matches!(m.am_forward(&random(&mut rng, 5, 31)), Err(Error::Shape(_))));
    }

    #[test]
    fn reversal_changes_interior_outputs() {
        let m = AcousticModel::new(small(3), both(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 16, 6);
        let mut rows = x.to_rows();
        rows.reverse();
        let xr = Tensor::from_rows(&rows);
        let (a, b) = (m.am_forward(&x).unwrap(), m.am_forward(&xr).unwrap());
        let mid = a.rows() / 2;
        assert!(a.row_slice(mid).iter().zip(b.row_slice(mid)).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn max_pool_head_invariances() {
        let m = AcousticModel::new(small(3), both(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = random(&mut rng, 5, 8);
        let logits = |f: &Tensor| {
            let mut g = Graph::inference();
            let x = g.constant(f.clone());
            let l = m.intent_logits_graph(&mut g, x).unwrap();
            g.value(l).data().to_vec()
        };
        let base = logits(&feats);
        let rows = feats.to_rows();
        let doubled: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        assert_eq!(logits(&Tensor::from_rows(&doubled)), base);
        let mut perm = rows.clone();
        perm.rotate_left(2);
        assert_eq!(logits(&Tensor::from_rows(&perm)), base);
        // One step: pooling is the identity.
        let one = Tensor::from_rows(&rows[..1]);
        let head = m.intent_head().unwrap();
        let mut g = Graph::inference();
        let x = g.constant(one.clone());
        let direct = head.forward(&mut g, m.params(), x);
        assert_eq!(logits(&one), g.value(direct).data());
    }

    #[test]
    fn intent_gradient_matches_finite_differences() {
        let mut m = AcousticModel::new(small(3), AMHeads { intent: true, ctc: false }, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 9, 6);
        let r = check_param_gradients(&mut m, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
            let xv = g.constant(x.clone());
            let f = m.features_graph(g, xv).unwrap();
            let l = m.intent_logits_graph(g, f).unwrap();
            crate::text_pipeline::cross_entropy(g, l, 1)
        });
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut m = AcousticModel::new(small(3), AMHeads { intent: false, ctc: true }, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 12, 6);
        let r = check_param_gradients(&mut m, |m| m.params_mut(), &FreezeSet::none(), |m, g| {
            let xv = g.constant(x.clone());
            m.ctc_loss_graph(g, xv, &[1, 3]).unwrap()
        });
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn checkpoint_records_heads_and_body_transfers() {
        let m = AcousticModel::new(small(3), AMHeads { intent: false, ctc: true }, 1).unwrap();
        let ck = m.to_checkpoint();
        assert_eq!(ck.header.heads, vec!["ctc".to_string()]);
        let back = AcousticModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.heads(), m.heads());
        assert_eq!(back.params(), m.params());

        let mut ft = AcousticModel::new(small(3), AMHeads { intent: true, ctc: false }, 2).unwrap();
        let n = ft.load_body(&m).unwrap();
        assert!(n > 0);
        assert_eq!(ft.params().group_checksum(ParamGroup::Am), m.params().group_checksum(ParamGroup::Am));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 10, 6);
        assert_eq!(m.am_forward(&x).unwrap(), ft.am_forward(&x).unwrap());
        assert!(ft.greedy_decode(&x).is_err());
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let m = AcousticModel::new(small(3), both(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 20, 6);
        assert_eq!(m.greedy_decode(&x).unwrap(), m.greedy_decode(&x).unwrap());
    }
}
