//! Tab-separated corpus manifests.
//!
//! ```text
//! signal_path<TAB>transcript<TAB>action<TAB>object<TAB>location<TAB>speaker_id<TAB>split<TAB>format=frames_f32le:16
//! frames/train-00000.f32<TAB>turn on lamp hall<TAB>0<TAB>0<TAB>0<TAB>3<TAB>train
//! ```
//!
//! Signal paths are relative to the manifest's directory. The header's format
//! tag says how signal files are stored: `frames_f32le:<dim>` for framed
//! features, `pcm_f32le:<sample_rate>` for raw mono audio. An empty transcript
//! field means the transcript was withheld.

use std::fs;
use std::path::{Path, PathBuf};

use super::labels::{IntentTriple, LabelSpace};
use super::synth::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::tokenizer_vq::{frame, FrameSequence, DEFAULT_FRAME_MS};

const COLUMNS: [&str; 7] = ["signal_path", "transcript", "action", "object", "location", "speaker_id", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalFormat {
    Frames { dim: usize },
    Pcm { sample_rate: u32 },
}

impl SignalFormat {
    fn tag(&self) -> String {
        match self {
            SignalFormat::Frames { dim } => format!("format=frames_f32le:{dim}"),
            SignalFormat::Pcm { sample_rate } => format!("format=pcm_f32le:{sample_rate}"),
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        let rest = tag.strip_prefix("format=")?;
        let (kind, arg) = rest.split_once(':')?;
        match kind {
            "frames_f32le" => arg.parse().ok().filter(|&d| d > 0).map(|dim| SignalFormat::Frames { dim }),
            "pcm_f32le" => arg.parse().ok().filter(|&r| r > 0).map(|sample_rate| SignalFormat::Pcm { sample_rate }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub signal_path: String,
    pub transcript: Option<String>,
    pub intent: IntentTriple,
    pub speaker: usize,
    pub split: Split,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub format: SignalFormat,
    pub rows: Vec<ManifestRow>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parses manifest text without touching signal files. Line numbers are
/// 1-based and count the header.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty manifest"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() != COLUMNS.len() + 1 || cols[..COLUMNS.len()] != COLUMNS {
        return Err(parse_err(1, format!("header must be {} followed by a format tag", COLUMNS.join(","))));
    }
    let format = SignalFormat::parse(cols[COLUMNS.len()])
        .ok_or_else(|| parse_err(1, format!("unrecognized format tag `{}`", cols[COLUMNS.len()])))?;
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
        }
        if f[0].is_empty() {
            return Err(parse_err(line, "empty signal_path"));
        }
        let num = |idx: usize| -> Result<usize> {
            f[idx].parse().map_err(|_| parse_err(line, format!("{} `{}` is not a non-negative integer", COLUMNS[idx], f[idx])))
        };
        let split = f[6].parse::<Split>().map_err(|_| parse_err(line, format!("unknown split `{}`", f[6])))?;
        rows.push(ManifestRow {
            signal_path: f[0].to_string(),
            transcript: (!f[1].is_empty()).then(|| f[1].to_string()),
            intent: IntentTriple::new(num(2)?, num(3)?, num(4)?),
            speaker: num(5)?,
            split,
            line,
        });
    }
    Ok(Manifest { format, rows })
}

pub fn render_manifest(m: &Manifest) -> Result<String> {
    let mut out = COLUMNS.join("\t");
    out.push('\t');
    out.push_str(&m.format.tag());
    out.push('\n');
    for r in &m.rows {
        let t = r.transcript.as_deref().unwrap_or("");
        if t.contains(['\t', '\n', '\r']) || r.signal_path.contains(['\t', '\n', '\r']) || r.signal_path.is_empty() {
            return Err(Error::Format(format!("row for `{}` cannot be written as a manifest line", r.signal_path)));
        }
        let i = r.intent;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.signal_path, t, i.action, i.object, i.location, r.speaker, r.split
        ));
    }
    Ok(out)
}

pub fn frames_to_bytes(frames: &FrameSequence) -> Vec<u8> {
    frames.frames().iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn frames_from_bytes(bytes: &[u8], dim: usize) -> Result<FrameSequence> {
    if dim == 0 || !bytes.len().is_multiple_of(4 * dim) {
        return Err(Error::Format(format!("{} bytes is not a whole number of {dim}-dim f32 frames", bytes.len())));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    FrameSequence::new(values.chunks(dim).map(<[f64]>::to_vec).collect(), DEFAULT_FRAME_MS)
}

fn pcm_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!("{} bytes is not a whole number of f32 samples", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

/// Writes `manifest.tsv` plus one frames file per utterance under `dir`.
/// Frames are stored as f32, so values round-trip exactly only if they were
/// already f32-representable (the generator guarantees this).
pub fn write_manifest(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let dim = corpus.utterances.first().map_or(0, |u| u.frames.dim());
    if dim == 0 {
        return Err(Error::EmptyInput("cannot write an empty corpus".into()));
    }
    fs::create_dir_all(dir.join("frames"))?;
    let mut rows = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        if u.frames.dim() != dim {
            return Err(Error::Shape(format!("utterance {} has dim {} != {dim}", u.id, u.frames.dim())));
        }
        let rel = format!("frames/{}.f32", u.id);
        fs::write(dir.join(&rel), frames_to_bytes(&u.frames))?;
        rows.push(ManifestRow {
            signal_path: rel,
            transcript: u.transcript.clone(),
            intent: u.intent,
            speaker: u.speaker,
            split: u.split,
            line: 0,
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, render_manifest(&Manifest { format: SignalFormat::Frames { dim }, rows })?)?;
    Ok(path)
}

/// Reads a manifest and the signal files it names. PCM signals are framed
/// with the default frame length into `feature_dim` bands.
pub fn read_manifest(path: &Path, label_space: LabelSpace, feature_dim: usize) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let m = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::with_capacity(m.rows.len());
    for r in m.rows {
        label_space.encode(r.intent).map_err(|e| parse_err(r.line, e.to_string()))?;
        let bytes = fs::read(base.join(&r.signal_path))?;
        let frames = match m.format {
            SignalFormat::Frames { dim } => frames_from_bytes(&bytes, dim),
            SignalFormat::Pcm { sample_rate } => {
                frame(&pcm_from_bytes(&bytes)?, sample_rate, DEFAULT_FRAME_MS, feature_dim)
            }
        }
        .map_err(|e| parse_err(r.line, format!("{}: {e}", r.signal_path)))?;
        let id = Path::new(&r.signal_path)
            .file_stem()
            .map_or_else(|| format!("line{}", r.line), |s| s.to_string_lossy().into_owned());
        utterances.push(Utterance {
            id,
            frames,
            transcript: r.transcript,
            intent: r.intent,
            speaker: r.speaker,
            split: r.split,
        });
    }
    Ok(Corpus { label_space, utterances })
}
