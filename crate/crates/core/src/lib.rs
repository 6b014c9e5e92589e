//! Two-stage textual knowledge distillation for end-to-end spoken language
//! understanding, at desk scale.
//!
//! The pipeline quantizes framed audio into discrete tokens, encodes them with
//! a BERT-style speech encoder, and classifies intents with a convolutional +
//! bidirectional recurrent acoustic model. A character-level text teacher
//! supervises the speech side twice: its CLS vector during encoder
//! pre-training and its intent logits during fine-tuning.

pub mod acoustic_model;
pub mod augmentation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data_harness;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod speech_encoder;
pub mod tensor;
pub mod text_pipeline;
pub mod tokenizer_vq;
pub mod training;

pub use error::{Error, Result};
