use crate::data_harness::synth::{Utterance, ALPHABET};
use crate::data_harness::LabelSpace;
use crate::error::{Error, Result};
use crate::tokenizer_vq::{encode, Codebook, TokenSequence};

/// One utterance after quantization, ready for any stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: TokenSequence,
    pub transcript: Option<String>,
    pub label: usize,
}

pub fn encode_examples(utts: &[&Utterance], codebook: &Codebook, space: LabelSpace) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            Ok(Example {
                id: u.id.clone(),
                tokens: encode(&u.frames, codebook)?,
                transcript: u.transcript.clone(),
                label: space.encode(u.intent)?,
            })
        })
        .collect()
}

/// CTC symbols for the synthetic alphabet: blank is 0, characters follow.
pub fn ctc_alphabet_size() -> usize {
    ALPHABET.chars().count() + 1
}

pub fn ctc_target(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            ALPHABET
                .chars()
                .position(|a| a == c)
                .map(|i| i + 1)
                .ok_or_else(|| Error::Vocab { token: c as usize, vocab: ctc_alphabet_size() })
        })
        .collect()
}

pub fn ctc_text(ids: &[usize]) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    ids.iter().filter_map(|&i| i.checked_sub(1).and_then(|i| chars.get(i))).collect()
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit distance / reference length`, floored at zero.
pub fn char_accuracy(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(reference, hypothesis) as f64 / reference.len() as f64).max(0.0)
}
