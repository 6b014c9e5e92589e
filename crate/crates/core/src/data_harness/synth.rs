//! Synthetic spoken-command corpus.
//!
//! Every utterance realizes an intent through a word template, then renders
//! each character as a few noisy copies of a per-character prototype frame
//! shifted by a per-speaker offset. The transcript determines the intent, so
//! a bag-of-words matcher over the lexicon is a perfect oracle.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::labels::{IntentTriple, LabelSpace};
use crate::error::{Error, Result};
use crate::tokenizer_vq::{corpus_fingerprint, FrameSequence, DEFAULT_FRAME_MS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: FrameSequence,
    /// Absent at test time when transcripts are withheld.
    pub transcript: Option<String>,
    pub intent: IntentTriple,
    pub speaker: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub label_space: LabelSpace,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn frames(&self) -> Vec<FrameSequence> {
        self.utterances.iter().map(|u| u.frames.clone()).collect()
    }

    /// Content hash over frames, transcripts, labels, speakers and splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(corpus_fingerprint(&self.frames()).to_le_bytes());
        for u in &self.utterances {
            h.update(u.id.as_bytes());
            h.update(u.transcript.as_deref().unwrap_or("").as_bytes());
            h.update([0u8]);
            for v in [u.intent.action, u.intent.object, u.intent.location, u.speaker] {
                h.update((v as u64).to_le_bytes());
            }
            h.update(u.split.as_str().as_bytes());
        }
        crate::params::hex(&h.finalize()[..16])
    }

    /// Speaker ids per split.
    pub fn speakers(&self, split: Split) -> std::collections::BTreeSet<usize> {
        self.utterances.iter().filter(|u| u.split == split).map(|u| u.speaker).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub label_space: LabelSpace,
    pub train_speakers: usize,
    pub valid_speakers: usize,
    pub test_speakers: usize,
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub test_utterances: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise_sigma: f64,
    /// Standard deviation of each speaker's offset vector.
    pub speaker_scale: f64,
    /// Reverberation-like smearing: `y_t = (1 - s) x_t + s y_{t-1}`.
    pub smear: f64,
    /// Words per slot value.
    pub synonyms: usize,
    /// Number of word-order templates in use.
    pub templates: usize,
    pub min_frames_per_char: usize,
    pub max_frames_per_char: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl SynthConfig {
    /// Default desk-scale benchmark: 24 intents, 20 speakers, 960/120/240.
    pub fn toy() -> Self {
        Self {
            label_space: LabelSpace::TOY,
            train_speakers: 14,
            valid_speakers: 2,
            test_speakers: 4,
            train_utterances: 960,
            valid_utterances: 120,
            test_utterances: 240,
            feature_dim: 16,
            noise_sigma: 0.6,
            speaker_scale: 0.6,
            smear: 0.0,
            synonyms: 2,
            templates: 3,
            min_frames_per_char: 5,
            max_frames_per_char: 6,
            seed: 0,
        }
    }

    /// Noisier, smeared variant standing in for far-field recordings.
    pub fn far_field() -> Self {
        Self { noise_sigma: 1.0, smear: 0.5, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        if !(self.noise_sigma >= 0.0 && self.speaker_scale >= 0.0) {
            return Err(Error::Config("noise_sigma and speaker_scale must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.smear) {
            return Err(Error::Config("smear must lie in [0, 1)".into()));
        }
        if self.train_utterances < self.label_space.num_classes() {
            return Err(Error::Config(format!(
                "{} training utterances give fewer than one per class ({} classes)",
                self.train_utterances,
                self.label_space.num_classes()
            )));
        }
        if self.train_speakers == 0 || self.valid_speakers == 0 || self.test_speakers == 0 {
            return Err(Error::Config("every split needs at least one speaker".into()));
        }
        if self.feature_dim == 0 || self.synonyms == 0 || self.templates == 0 || self.templates > TEMPLATES.len() {
            return Err(Error::Config("feature_dim, synonyms and templates must be positive (templates <= 4)".into()));
        }
        if self.min_frames_per_char == 0 || self.min_frames_per_char > self.max_frames_per_char {
            return Err(Error::Config("invalid frames-per-character range".into()));
        }
        Ok(())
    }

    fn split_sizes(&self) -> [(Split, usize, std::ops::Range<usize>); 3] {
        let a = self.train_speakers;
        let b = a + self.valid_speakers;
        let c = b + self.test_speakers;
        [
            (Split::Train, self.train_utterances, 0..a),
            (Split::Valid, self.valid_utterances, a..b),
            (Split::Test, self.test_utterances, b..c),
        ]
    }
}

const TEMPLATES: [&str; 4] = ["{a} {o} {l}", "{o} {a} {l}", "{l} {o} {a}", "{a} the {o} in {l}"];

const ACTION_WORDS: [[&str; 2]; 6] =
    [["on", "start"], ["off", "stop"], ["up", "raise"], ["down", "lower"], ["open", "unlock"], ["close", "shut"]];
const OBJECT_WORDS: [[&str; 2]; 5] =
    [["lamp", "light"], ["heat", "warmth"], ["music", "radio"], ["blind", "curtain"], ["fan", "cooler"]];
const LOCATION_WORDS: [[&str; 2]; 4] = [["hall", "porch"], ["den", "study"], ["bedroom", "loft"], ["garage", "shed"]];

/// Characters that may appear in transcripts.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz '";

/// Word lists and templates that realize intents as text.
#[derive(Clone, Debug)]
pub struct Grammar {
    /// `words[slot][value][synonym]`, slots ordered action, object, location.
    words: [Vec<Vec<String>>; 3],
    templates: Vec<&'static str>,
    lookup: HashMap<String, (usize, usize)>,
}

impl Grammar {
    pub fn new(space: LabelSpace, synonyms: usize, templates: usize) -> Self {
        let mut procedural = (0usize..).map(pseudo_word);
        let mut used: std::collections::HashSet<String> = std::collections::HashSet::new();
        let mut slot = |count: usize, hand: &[[&str; 2]]| -> Vec<Vec<String>> {
            (0..count)
                .map(|v| {
                    (0..synonyms)
                        .map(|s| {
                            let w = match hand.get(v).and_then(|h| h.get(s)) {
                                Some(w) => w.to_string(),
                                None => procedural.by_ref().find(|w| !used.contains(w)).unwrap(),
                            };
                            used.insert(w.clone());
                            w
                        })
                        .collect()
                })
                .collect()
        };
        let words = [
            slot(space.actions, &ACTION_WORDS),
            slot(space.objects, &OBJECT_WORDS),
            slot(space.locations, &LOCATION_WORDS),
        ];
        let mut lookup = HashMap::new();
        for (si, s) in words.iter().enumerate() {
            for (vi, syns) in s.iter().enumerate() {
                for w in syns {
                    lookup.insert(w.clone(), (si, vi));
                }
            }
        }
        Self { words, templates: TEMPLATES[..templates].to_vec(), lookup }
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn realize(&self, t: IntentTriple, template: usize, syn: [usize; 3]) -> String {
        self.templates[template]
            .replace("{a}", &self.words[0][t.action][syn[0]])
            .replace("{o}", &self.words[1][t.object][syn[1]])
            .replace("{l}", &self.words[2][t.location][syn[2]])
    }

    pub fn synonyms(&self) -> usize {
        self.words[0][0].len()
    }

    /// Bag-of-words oracle: every slot must be named exactly once.
    pub fn parse(&self, transcript: &str) -> Option<IntentTriple> {
        let mut slots: [Option<usize>; 3] = [None; 3];
        for w in transcript.split_whitespace() {
            if let Some(&(s, v)) = self.lookup.get(w) {
                if slots[s].replace(v).is_some() {
                    return None;
                }
            }
        }
        Some(IntentTriple::new(slots[0]?, slots[1]?, slots[2]?))
    }

    /// All words in the lexicon.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.words.iter().flatten().flatten().map(String::as_str)
    }
}

fn pseudo_word(k: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let c1 = C[k % C.len()];
    let v1 = V[(k / C.len()) % V.len()];
    let c2 = C[(k / (C.len() * V.len())) % C.len()];
    let v2 = V[(k / (C.len() * V.len() * C.len())) % V.len()];
    String::from_utf8(vec![c1, v1, c2, v2, b'x']).unwrap()
}

fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Per-character prototype frames, fixed by the corpus seed.
pub fn char_prototypes(cfg: &SynthConfig) -> HashMap<char, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "prototypes", 0));
    let n = Normal::new(0.0, 1.0).unwrap();
    ALPHABET.chars().map(|c| (c, (0..cfg.feature_dim).map(|_| n.sample(&mut rng)).collect())).collect()
}

/// Generates a corpus. Deterministic given the config; each utterance draws
/// from its own derived seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let grammar = Grammar::new(cfg.label_space, cfg.synonyms, cfg.templates);
    let protos = char_prototypes(cfg);
    let total_speakers = cfg.train_speakers + cfg.valid_speakers + cfg.test_speakers;
    let spk_dist = Normal::new(0.0, cfg.speaker_scale.max(0.0)).unwrap();
    let offsets: Vec<Vec<f64>> = (0..total_speakers)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "speaker", s as u64));
            (0..cfg.feature_dim).map(|_| spk_dist.sample(&mut rng)).collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
    let classes = cfg.label_space.num_classes();

    let mut utterances = Vec::new();
    for (split, count, speakers) in cfg.split_sizes() {
        // Balanced labels: class i % C, in a seeded random order.
        let mut class_order: Vec<usize> = (0..count).map(|i| i % classes).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.as_str(), u64::MAX));
        rand::seq::SliceRandom::shuffle(class_order.as_mut_slice(), &mut split_rng);
        let n_spk = speakers.len();
        for (i, &class) in class_order.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.as_str(), i as u64));
            let intent = cfg.label_space.decode(class)?;
            let speaker = speakers.start + (i % n_spk);
            let template = rng.random_range(0..grammar.num_templates());
            let syn = [
                rng.random_range(0..cfg.synonyms),
                rng.random_range(0..cfg.synonyms),
                rng.random_range(0..cfg.synonyms),
            ];
            let transcript = grammar.realize(intent, template, syn);
            let mut frames = Vec::new();
            for ch in transcript.chars() {
                let proto = &protos[&ch];
                let dur = rng.random_range(cfg.min_frames_per_char..=cfg.max_frames_per_char);
                for _ in 0..dur {
                    let f: Vec<f64> =
                        proto.iter().zip(&offsets[speaker]).map(|(p, o)| p + o + noise.sample(&mut rng)).collect();
                    frames.push(f);
                }
            }
            if cfg.smear > 0.0 {
                for t in 1..frames.len() {
                    let (prev, cur) = frames.split_at_mut(t);
                    for (c, p) in cur[0].iter_mut().zip(&prev[t - 1]) {
                        *c = (1.0 - cfg.smear) * *c + cfg.smear * p;
                    }
                }
            }
            // Stored as f32 on disk; round now so memory and disk agree.
            for f in &mut frames {
                f.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
            utterances.push(Utterance {
                id: format!("{}-{i:05}", split.as_str()),
                frames: FrameSequence::new(frames, DEFAULT_FRAME_MS)?,
                transcript: Some(transcript),
                intent,
                speaker,
                split,
            });
        }
    }
    Ok(Corpus { label_space: cfg.label_space, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { train_utterances: 48, valid_utterances: 12, test_utterances: 24, ..SynthConfig::toy() }
    }

    #[test]
    fn noiseless_single_speaker_is_deterministic_per_transcript() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            train_speakers: 1,
            synonyms: 1,
            templates: 1,
            min_frames_per_char: 3,
            max_frames_per_char: 3,
            ..small()
        };
        let c = synth_generate(&cfg).unwrap();
        let train = c.split(Split::Train);
        let mut by_text: HashMap<&str, &FrameSequence> = HashMap::new();
        let mut repeats = 0;
        for u in train {
            if let Some(prev) = by_text.insert(u.transcript.as_deref().unwrap(), &u.frames) {
                assert_eq!(prev, &u.frames);
                repeats += 1;
            }
        }
        assert!(repeats > 0);
    }

    #[test]
    fn grammar_oracle_recovers_every_intent() {
        for cfg in [small(), SynthConfig { label_space: LabelSpace::FSC, train_utterances: 400, ..small() }] {
            let c = synth_generate(&cfg).unwrap();
            let g = Grammar::new(cfg.label_space, cfg.synonyms, cfg.templates);
            for u in &c.utterances {
                assert_eq!(g.parse(u.transcript.as_deref().unwrap()), Some(u.intent), "{}", u.id);
            }
        }
    }

    #[test]
    fn speakers_are_disjoint_across_splits() {
        let c = synth_generate(&small()).unwrap();
        let (tr, va, te) = (c.speakers(Split::Train), c.speakers(Split::Valid), c.speakers(Split::Test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(tr.len(), 14);
    }

    #[test]
    fn too_few_training_utterances_is_a_config_error() {
        let cfg = SynthConfig { train_utterances: 23, ..small() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_is_stable_across_regeneration() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn lexicon_words_are_unique() {
        let g = Grammar::new(LabelSpace::FSC, 2, 4);
        let words: Vec<&str> = g.vocabulary().collect();
        let set: std::collections::HashSet<&str> = words.iter().copied().collect();
        assert_eq!(words.len(), set.len());
        assert_eq!(words.len(), 2 * (6 + 14 + 4));
    }
}
