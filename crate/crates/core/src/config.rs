//! Declarative experiment configuration: one TOML file with a section per
//! stage, merged over a named preset and then dotted-path overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::acoustic_model::AMConfig;
use crate::data_harness::{LabelSpace, SynthConfig};
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::params::ParamGroup;
use crate::speech_encoder::SpeechEncoderConfig;
use crate::text_pipeline::TextTeacherConfig;
use crate::training::data::ctc_alphabet_size;
use crate::training::{Stage, StageConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected toy or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub encoder: SpeechEncoderConfig,
    pub teacher: TextTeacherConfig,
    pub am: AMConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub teacher: StageConfig,
    /// Plain masked-LM pre-training that produces the baseline encoder.
    pub mlm: StageConfig,
    pub pt_kd: StageConfig,
    pub am_pt: StageConfig,
    pub ft: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Number of low-resource parts the training split is cut into.
    pub parts: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub synth: SynthConfig,
    pub codebook: CodebookConfig,
    pub models: ModelsConfig,
    pub training: TrainingConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        let synth = SynthConfig::toy();
        let classes = synth.label_space.num_classes();
        let encoder = SpeechEncoderConfig::toy(64);
        Self {
            preset: Preset::Toy,
            seed: 0,
            codebook: CodebookConfig { k: 64, iters: 30, seed: 0 },
            models: ModelsConfig {
                am: AMConfig::toy(encoder.d_model, classes, ctc_alphabet_size()),
                teacher: TextTeacherConfig::toy(classes),
                encoder,
            },
            synth,
            training: TrainingConfig {
                teacher: StageConfig::teacher_toy(),
                mlm: StageConfig::mlm_toy(),
                pt_kd: StageConfig::pt_kd_toy(),
                am_pt: StageConfig::am_pt_toy(),
                ft: StageConfig::ft_toy(),
            },
            ablation: AblationConfig { seeds: vec![0, 1, 2, 3, 4], parts: 10, split_seed: 0 },
        }
    }

    /// Full-size shapes and the published schedules. Documented for parity;
    /// far too slow for the tests.
    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.preset = Preset::Paper;
        c.synth.label_space = LabelSpace::FSC;
        c.synth.train_speakers = 77;
        c.synth.valid_speakers = 10;
        c.synth.test_speakers = 10;
        c.synth.train_utterances = 23_132;
        c.synth.valid_utterances = 3_118;
        c.synth.test_utterances = 3_793;
        let classes = c.synth.label_space.num_classes();
        c.codebook.k = 320;
        c.models.encoder = SpeechEncoderConfig::paper(320);
        c.models.teacher = TextTeacherConfig {
            d_model: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            max_len: 512,
            ..TextTeacherConfig::toy(classes)
        };
        c.models.am = AMConfig::paper(768, classes, ctc_alphabet_size());
        let t = &mut c.training;
        for s in [&mut t.teacher, &mut t.mlm, &mut t.pt_kd, &mut t.am_pt, &mut t.ft] {
            s.batch_size = 256;
        }
        t.pt_kd.lr = 1e-6;
        t.pt_kd.max_steps = 250_000;
        t.pt_kd.schedule = LrSchedule::LinearToZero { total_steps: 250_000 };
        t.mlm.lr = 1e-6;
        t.mlm.max_steps = 250_000;
        t.mlm.schedule = LrSchedule::LinearToZero { total_steps: 250_000 };
        t.ft.lr = 1e-4;
        t.ft.max_epochs = 200;
        t.ft.patience = 200;
        t.ft.schedule = LrSchedule::Anneal { gamma: 1.05 };
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses `text` over the preset it names (or `default_preset`), then
    /// applies `key.path=value` overrides. Unknown keys are rejected.
    pub fn from_toml(text: &str, default_preset: Preset, overrides: &[(String, String)]) -> Result<Self> {
        let file: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match file.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            None => default_preset,
        };
        Self::resolve(preset, file, overrides)
    }

    pub fn resolve(preset: Preset, file: Table, overrides: &[(String, String)]) -> Result<Self> {
        let mut base = match Value::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))? {
            Value::Table(t) => t,
            _ => unreachable!("configs serialize to tables"),
        };
        merge(&mut base, file);
        for (path, value) in overrides {
            set_path(&mut base, path, parse_scalar(value))?;
        }
        let cfg: Self = Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short content hash of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::params::hex(&Sha256::digest(&json)[..6])
    }

    pub fn num_classes(&self) -> usize {
        self.synth.label_space.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.models.encoder.validate()?;
        self.models.teacher.validate()?;
        self.models.am.validate()?;
        let c = self.num_classes();
        let m = &self.models;
        if m.encoder.codebook_size != self.codebook.k {
            return Err(Error::Config(format!(
                "models.encoder.codebook_size {} differs from codebook.k {}",
                m.encoder.codebook_size, self.codebook.k
            )));
        }
        if m.teacher.num_classes != c || m.am.num_classes != c {
            return Err(Error::Config(format!("teacher and AM class counts must equal the label space size {c}")));
        }
        if m.am.input_dim != m.encoder.d_model {
            return Err(Error::Config(format!("models.am.input_dim must equal encoder d_model {}", m.encoder.d_model)));
        }
        if m.am.ctc_alphabet != ctc_alphabet_size() {
            return Err(Error::Config(format!("models.am.ctc_alphabet must be {}", ctc_alphabet_size())));
        }
        if self.codebook.k < 2 || self.codebook.iters == 0 {
            return Err(Error::Config("codebook needs k >= 2 and at least one iteration".into()));
        }
        if self.ablation.parts < 2 {
            return Err(Error::Config("ablation.parts must be at least 2".into()));
        }
        use ParamGroup::*;
        let t = &self.training;
        let rules: [(&str, &StageConfig, Stage, &[ParamGroup]); 5] = [
            ("teacher", &t.teacher, Stage::TeacherFt, &[SpeechEncoder, Am]),
            ("mlm", &t.mlm, Stage::Mlm, &[QuantizerCodebook, Teacher]),
            ("pt_kd", &t.pt_kd, Stage::PtKd, &[QuantizerCodebook, Teacher]),
            ("am_pt", &t.am_pt, Stage::AmPt, &[QuantizerCodebook, SpeechEncoder, Teacher]),
            ("ft", &t.ft, Stage::Ft, &[QuantizerCodebook, SpeechEncoder, Teacher]),
        ];
        for (name, s, stage, must_freeze) in rules {
            if s.stage != stage {
                return Err(Error::Config(format!("training.{name}.stage must be {stage:?}")));
            }
            for g in must_freeze {
                if !s.frozen.contains(*g) {
                    return Err(Error::Config(format!("training.{name} must freeze `{}`", g.name())));
                }
            }
            s.validate().map_err(|e| Error::Config(format!("training.{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Deep merge; a table carrying `kind` replaces the old one wholesale so
/// tagged variants never inherit stale fields.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_scalar(s: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {s}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(s.into()))
}

fn set_path(root: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut cur = root;
    for k in parents {
        cur = match cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{path}`: `{k}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Toy, Preset::Paper] {
            let c = ExperimentConfig::preset(p);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml(), Preset::Toy, &[]).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_file_merges_over_preset() {
        let c = ExperimentConfig::from_toml("seed = 7\n[training.ft]\nlr = 0.01\n", Preset::Toy, &[]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.ft.lr, 0.01);
        assert_eq!(c.training.ft.max_epochs, ExperimentConfig::toy().training.ft.max_epochs);
    }

    #[test]
    fn dotted_overrides_apply_after_file() {
        let o = vec![
            ("training.ft.schedule.gamma".to_string(), "1.1".to_string()),
            ("training.ft.da.enabled".to_string(), "true".to_string()),
        ];
        let c = ExperimentConfig::from_toml("", Preset::Toy, &o).unwrap();
        assert_eq!(c.training.ft.schedule, LrSchedule::Anneal { gamma: 1.1 });
        assert!(c.training.ft.da.enabled);
    }

    #[test]
    fn tagged_tables_replace_rather_than_merge() {
        let c = ExperimentConfig::from_toml("[training.pt_kd.schedule]\nkind = \"constant\"\n", Preset::Toy, &[]).unwrap();
        assert_eq!(c.training.pt_kd.schedule, LrSchedule::Constant);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[training.ft]\nlearning_rate = 0.1", "[synth]\nsigma = 0.1"] {
            assert!(matches!(ExperimentConfig::from_toml(text, Preset::Toy, &[]), Err(Error::Config(_))), "{text}");
        }
        let o = vec![("training.ft.gama".to_string(), "1.0".to_string())];
        assert!(ExperimentConfig::from_toml("", Preset::Toy, &o).is_err());
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let o = vec![("codebook.k".to_string(), "32".to_string())];
        assert!(matches!(ExperimentConfig::from_toml("", Preset::Toy, &o), Err(Error::Config(_))));
        let o = vec![("training.ft.frozen".to_string(), "[\"teacher\"]".to_string())];
        assert!(matches!(ExperimentConfig::from_toml("", Preset::Toy, &o), Err(Error::Config(_))));
    }

    #[test]
    fn preset_key_in_file_selects_base() {
        let c = ExperimentConfig::from_toml("preset = \"paper\"", Preset::Toy, &[]).unwrap();
        assert_eq!(c.training.ft.max_epochs, 200);
        assert!(ExperimentConfig::from_toml("preset = \"huge\"", Preset::Toy, &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
