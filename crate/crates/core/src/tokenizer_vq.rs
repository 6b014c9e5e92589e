//! Framing and k-means vector quantization of audio features into discrete
//! 10 ms tokens.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default feature dimension of a frame.
pub const DEFAULT_FEATURE_DIM: usize = 16;
/// Default codebook size for synthetic corpora.
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;
pub const DEFAULT_FRAME_MS: f64 = 10.0;

/// Fixed-rate feature frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Vec<f64>>,
    frame_ms: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Vec<f64>>, frame_ms: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("frame sequence has no frames".into()));
        }
        let dim = frames[0].len();
        if dim == 0 {
            return Err(Error::Shape("frames must have at least one feature".into()));
        }
        if let Some(bad) = frames.iter().position(|f| f.len() != dim) {
            return Err(Error::Shape(format!("frame {bad} has dimension {} instead of {dim}", frames[bad].len())));
        }
        if frame_ms.is_nan() || frame_ms <= 0.0 {
            return Err(Error::Config(format!("frame duration must be positive, got {frame_ms}")));
        }
        Ok(Self { frames, frame_ms })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frame_ms(&self) -> f64 {
        self.frame_ms
    }
}

/// Cuts `signal` into non-overlapping frames of `floor(sample_rate * frame_ms / 1000)`
/// samples (the remainder is dropped) and reduces each frame to `dim`
/// log-energy bands of its mean-removed power spectrum.
pub fn frame(signal: &[f64], sample_rate: u32, frame_ms: f64, dim: usize) -> Result<FrameSequence> {
    if frame_ms.is_nan() || frame_ms <= 0.0 {
        return Err(Error::Config(format!("frame_ms must be positive, got {frame_ms}")));
    }
    let n = (sample_rate as f64 * frame_ms / 1000.0).floor() as usize;
    if n == 0 || signal.len() < n {
        return Err(Error::EmptyInput(format!("{} samples is shorter than one frame of {n}", signal.len())));
    }
    let bins = n / 2;
    if dim == 0 || bins < dim {
        return Err(Error::Config(format!("{n}-sample frames cannot supply {dim} bands")));
    }
    let count = signal.len() / n;
    let frames = (0..count).map(|i| band_energies(&signal[i * n..(i + 1) * n], dim)).collect();
    FrameSequence::new(frames, frame_ms)
}

fn band_energies(samples: &[f64], dim: usize) -> Vec<f64> {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = samples.iter().map(|s| s - mean).collect();
    // Bins 1..=n/2; DC is zero after mean removal.
    let bins = n / 2;
    let power: Vec<f64> = (1..=bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in centered.iter().enumerate() {
                let ang = 2.0 * PI * (k * t) as f64 / n as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            (re * re + im * im) / n as f64
        })
        .collect();
    (0..dim)
        .map(|b| {
            let lo = b * bins / dim;
            let hi = (b + 1) * bins / dim;
            let e = power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            (e + 1e-10).ln()
        })
        .collect()
}

/// Reserved token ids that follow the `K` acoustic codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: usize,
    pub mask: usize,
    pub pad: usize,
}

impl SpecialTokens {
    pub fn for_codebook(k: usize) -> Self {
        Self { cls: k, mask: k + 1, pad: k + 2 }
    }
}

/// Discrete audio codes in `[0, K)`, optionally with specials.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    codebook_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence is empty".into()));
        }
        let sp = SpecialTokens::for_codebook(codebook_size);
        for (i, &t) in tokens.iter().enumerate() {
            if t > sp.pad {
                return Err(Error::Vocab { token: t, vocab: codebook_size + 3 });
            }
            if t == sp.cls && i != 0 {
                return Err(Error::Vocab { token: t, vocab: codebook_size + 3 });
            }
        }
        Ok(Self { tokens, codebook_size })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_codebook(self.codebook_size)
    }

    pub fn has_cls(&self) -> bool {
        self.tokens[0] == self.specials().cls
    }

    /// Vocabulary size including the three specials.
    pub fn vocab_size(&self) -> usize {
        self.codebook_size + 3
    }
}

/// Learned k-means centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<Vec<f64>>,
    seed: u64,
    fingerprint: u64,
}

/// Inertia after initialisation and after every Lloyd iteration.
#[derive(Clone, Debug, Default)]
pub struct KMeansTrace {
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>, seed: u64, fingerprint: u64) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {}", centroids.len())));
        }
        let dim = centroids[0].len();
        if dim == 0 || centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("centroids must share a positive dimension".into()));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite centroid value".into()));
        }
        let mut seen = HashSet::new();
        for c in &centroids {
            if !seen.insert(bits(c)) {
                return Err(Error::Format("duplicate centroids".into()));
            }
        }
        Ok(Self { centroids, seed, fingerprint })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Nearest centroid; ties resolve to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest(&self.centroids, v).0
    }

    /// SHA-256 of the centroid bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.centroids {
            for v in c {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        crate::params::hex(&h.finalize())
    }

    /// Binary layout, little-endian: magic `KDCB`, version `u16`, dim `u32`,
    /// K `u32`, seed `u64`, fingerprint `u64`, then `K * dim` row-major `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(30 + self.k() * self.dim() * 8);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for v in self.centroids.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let version = r.u16()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let seed = r.u64()?;
        let fingerprint = r.u64()?;
        let expected = k.checked_mul(dim).and_then(|n| n.checked_mul(8));
        if expected != Some(r.remaining()) {
            return Err(Error::Format(format!("payload of {} bytes does not hold {k}x{dim} centroids", r.remaining())));
        }
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            let mut c = Vec::with_capacity(dim);
            for _ in 0..dim {
                c.push(r.f64()?);
            }
            centroids.push(c);
        }
        Codebook::new(centroids, seed, fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const CODEBOOK_MAGIC: &[u8; 4] = b"KDCB";
const CODEBOOK_VERSION: u16 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, sq_dist(&centroids[0], v));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Content hash of a corpus of frame sequences.
pub fn corpus_fingerprint(corpus: &[FrameSequence]) -> u64 {
    let mut h = Sha256::new();
    for seq in corpus {
        h.update((seq.len() as u64).to_le_bytes());
        for v in seq.frames().iter().flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments no
/// longer change or after `max_iters` iterations.
pub fn fit_codebook(corpus: &[FrameSequence], k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_traced(corpus, k, max_iters, seed).map(|(c, _)| c)
}

pub fn fit_codebook_traced(corpus: &[FrameSequence], k: usize, max_iters: usize, seed: u64) -> Result<(Codebook, KMeansTrace)> {
    if k < 2 {
        return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
    }
    let points: Vec<&[f64]> = corpus.iter().flat_map(|s| s.frames().iter().map(Vec::as_slice)).collect();
    if points.is_empty() {
        return Err(Error::EmptyInput("corpus has no frames".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("corpus frames differ in dimension".into()));
    }
    let distinct = points.iter().map(|p| bits(p)).collect::<HashSet<_>>().len();
    if distinct < k {
        return Err(Error::DegenerateCorpus { distinct, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let inertia = |c: &[Vec<f64>], a: &[usize]| -> f64 { points.iter().zip(a).map(|(p, &i)| sq_dist(&c[i], p)).sum() };
    let mut trace = KMeansTrace { inertia: vec![inertia(&centroids, &assign)], ..Default::default() };

    for _ in 0..max_iters {
        // Update: empty clusters keep their previous centroid.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        let j = inertia(&centroids, &next);
        let prev = *trace.inertia.last().unwrap();
        assert!(j <= prev * (1.0 + 1e-12) + 1e-12, "Lloyd iteration increased inertia: {prev} -> {j}");
        trace.inertia.push(j);
        trace.iterations += 1;
        let changed = next != assign;
        assign = next;
        if !changed {
            trace.converged = true;
            break;
        }
    }
    let book = Codebook::new(centroids, seed, corpus_fingerprint(corpus)).map_err(|e| match e {
        Error::Format(_) => Error::DegenerateCorpus { distinct, k },
        other => other,
    })?;
    Ok((book, trace))
}

fn kmeans_plus_plus<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        // Points at distance zero have weight zero, so centroids stay distinct.
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].to_vec();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Maps each frame to its nearest centroid.
pub fn encode(frames: &FrameSequence, codebook: &Codebook) -> Result<TokenSequence> {
    if frames.dim() != codebook.dim() {
        return Err(Error::Shape(format!("frames have dimension {}, codebook {}", frames.dim(), codebook.dim())));
    }
    let tokens = frames.frames().iter().map(|f| codebook.nearest(f)).collect();
    TokenSequence::new(tokens, codebook.k())
}
