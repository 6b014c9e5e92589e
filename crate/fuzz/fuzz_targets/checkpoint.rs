#![no_main]

use kdslu_core::acoustic_model::AcousticModel;
use kdslu_core::checkpoint::Checkpoint;
use kdslu_core::speech_encoder::SpeechEncoder;
use kdslu_core::text_pipeline::TextTeacher;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let _ = SpeechEncoder::from_checkpoint(&ckpt);
        let _ = TextTeacher::from_checkpoint(&ckpt);
        let _ = AcousticModel::from_checkpoint(&ckpt);
    }
});
