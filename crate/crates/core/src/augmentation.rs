//! Span masking of audio tokens and time/channel masking of hidden states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::speech_encoder::HiddenSequence;
use crate::tokenizer_vq::TokenSequence;

/// `p` is the fraction of positions chosen as span starts, `m` the span
/// length. `p * m` bounds the masked fraction from above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub p: f64,
    #[serde(rename = "M")]
    pub m: usize,
}

impl MaskSpec {
    pub fn new(p: f64, m: usize) -> Result<Self> {
        let s = Self { p, m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("mask p must lie in [0, 1], got {}", self.p)));
        }
        if self.m == 0 {
            return Err(Error::Config("mask span length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_ratio(&self) -> f64 {
        self.p * self.m as f64
    }

    /// Number of span starts for a sequence of `length`.
    pub fn starts(&self, length: usize) -> usize {
        // The epsilon keeps products like 0.07 * 100 from flooring to 6.
        (((self.p * length as f64) + 1e-9).floor() as usize).min(length)
    }
}

/// Picks exactly `floor(p * length)` distinct starts and marks `m` positions
/// from each, truncating at the end. Spans may overlap.
pub fn sample_span_mask(length: usize, spec: MaskSpec, seed: u64) -> Vec<bool> {
    let mut mask = vec![false; length];
    let n = spec.starts(length);
    if n == 0 {
        return mask;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in rand::seq::index::sample(&mut rng, length, n) {
        mask[s..(s + spec.m).min(length)].iter_mut().for_each(|b| *b = true);
    }
    mask
}

/// Replaces masked positions with MASK. A leading CLS must stay unmasked.
pub fn apply_token_mask(tokens: &TokenSequence, mask: &[bool]) -> Result<TokenSequence> {
    if mask.len() != tokens.len() {
        return Err(Error::Mask(format!("mask length {} for {} tokens", mask.len(), tokens.len())));
    }
    if tokens.has_cls() && mask[0] {
        return Err(Error::Mask("mask covers the CLS position".into()));
    }
    let sp = tokens.specials();
    let out = tokens.tokens().iter().zip(mask).map(|(&t, &m)| if m { sp.mask } else { t }).collect();
    TokenSequence::new(out, tokens.codebook_size())
}

/// Span mask over a sequence whose optional leading CLS is never masked.
pub fn sample_token_mask(tokens: &TokenSequence, spec: MaskSpec, seed: u64) -> Vec<bool> {
    if tokens.has_cls() {
        let mut m = vec![false];
        m.extend(sample_span_mask(tokens.len() - 1, spec, seed));
        m
    } else {
        sample_span_mask(tokens.len(), spec, seed)
    }
}

/// Zeroes whole timesteps of the per-token states; CLS is untouched.
pub fn apply_time_mask(hidden: &HiddenSequence, spec: MaskSpec, seed: u64) -> HiddenSequence {
    let mut out = hidden.clone();
    for (t, m) in sample_span_mask(hidden.len(), spec, seed).into_iter().enumerate() {
        if m {
            out.states.row_slice_mut(t).fill(0.0);
        }
    }
    out
}

/// Zeroes feature channels at every timestep; CLS is untouched.
pub fn apply_channel_mask(hidden: &HiddenSequence, spec: MaskSpec, seed: u64) -> HiddenSequence {
    let mut out = hidden.clone();
    let mask = sample_span_mask(hidden.dim(), spec, seed);
    for t in 0..out.len() {
        for (v, &m) in out.states.row_slice_mut(t).iter_mut().zip(&mask) {
            if m {
                *v = 0.0;
            }
        }
    }
    out
}
