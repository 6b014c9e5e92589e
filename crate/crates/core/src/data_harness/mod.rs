//! Synthetic corpora, manifests, labels and split protocols.

pub mod labels;
pub mod manifest;
pub mod splits;
pub mod synth;

pub use labels::{label_decode, label_encode, IntentTriple, LabelSpace};
pub use manifest::{parse_manifest, read_manifest, write_manifest, Manifest, ManifestRow, SignalFormat};
pub use splits::make_low_resource_splits;
pub use synth::{synth_generate, Corpus, Grammar, Split, SynthConfig, Utterance};
