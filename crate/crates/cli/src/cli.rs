use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kdslu_core::config::Preset;
use kdslu_core::pipeline::Method;

/// Textual knowledge distillation for spoken intent classification:
/// synthetic data, staged training, ablations.
///
/// Any config key can be overridden with a dotted flag, for example
/// `--training.ft.lr 0.002`, or with `--set training.ft.lr=0.002`.
#[derive(Debug, Parser)]
#[command(name = "kdslu", version)]
pub struct Cli {
    /// Experiment config (TOML). Keys it leaves out come from the preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Experiment seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root. Defaults to $KDSLU_OUT, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Base preset when the config file does not name one.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Toy,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Baseline,
    PtKd,
    FtKd,
    AmPt,
    Da,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Baseline => Method::Baseline,
            MethodArg::PtKd => Method::PtKd,
            MethodArg::FtKd => Method::FtKd,
            MethodArg::AmPt => Method::AmPt,
            MethodArg::Da => Method::Da,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and write its manifest.
    Synth,
    /// Fit the k-means codebook on the training frames.
    FitCodebook,
    /// Fine-tune the text teacher, then pre-train the speech encoder with
    /// masked LM and with CLS distillation.
    PretrainKd,
    /// CTC pre-training of the acoustic model on the distilled encoder.
    PretrainAm,
    /// Intent fine-tuning with the method stack up to `--method`.
    Finetune(FinetuneArgs),
    /// Speech-only test accuracy of a fine-tuned (or untrained) model.
    Evaluate(EvaluateArgs),
    /// Run the cumulative method stack over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Last method of the stack to enable.
    #[arg(long, value_enum, default_value = "da")]
    pub method: MethodArg,
    /// Train on one low-resource part instead of the full training split.
    #[arg(long)]
    pub part: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Which fine-tuned model to evaluate.
    #[arg(long, value_enum, default_value = "da")]
    pub method: MethodArg,
    /// Evaluate freshly initialized models instead of trained ones.
    #[arg(long)]
    pub untrained: bool,
    /// Manifest to evaluate instead of the run's own corpus.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Split of the manifest to score.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Last method of the stack to run.
    #[arg(long, value_enum, default_value = "da")]
    pub upto: MethodArg,
    /// Comma-separated seeds; overrides `ablation.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

/// Pulls `--dotted.key value` and `--dotted.key=value` pairs out of `args`,
/// leaving everything else for clap.
pub fn split_dotted_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => overrides.push((key, v)),
            None => {
                // Leave it for clap to reject as an unknown flag.
                rest.push(a);
            }
        }
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, o) =
            split_dotted_overrides(s(&["kdslu", "--training.ft.lr", "0.1", "finetune", "--synth.seed=4", "--seed", "2"]));
        assert_eq!(rest, s(&["kdslu", "finetune", "--seed", "2"]));
        assert_eq!(o, vec![("training.ft.lr".into(), "0.1".into()), ("synth.seed".into(), "4".into())]);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(s(&["kdslu", "synth", "--bogus"])).is_err());
        assert!(Cli::try_parse_from(s(&["kdslu", "finetune", "--method", "nope"])).is_err());
    }

    #[test]
    fn every_subcommand_documents_its_flags() {
        Cli::command().debug_assert();
        let mut cmd = Cli::command();
        cmd.build();
        for sub in ["synth", "fit-codebook", "pretrain-kd", "pretrain-am", "finetune", "evaluate", "ablate"] {
            let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
            for flag in ["--config", "--seed", "--out", "--preset", "--set"] {
                assert!(help.contains(flag), "{sub} help lacks {flag}");
            }
        }
        let help = cmd.find_subcommand_mut("evaluate").unwrap().render_long_help().to_string();
        for flag in ["--method", "--untrained", "--manifest", "--split"] {
            assert!(help.contains(flag));
        }
    }
}
