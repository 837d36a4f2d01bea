//! Step-major trajectory data model, binary dataset serialization, token
//! pooling, and window slicing.
//!
//! A [`Trajectory`] holds one sample's hidden states for `S` denoising steps
//! in *generation order*: stored index 0 is the first (noisiest) step and
//! stored index `S-1` is the final, most-refined step. Optional per-step
//! entropy and confidence channels and an optional binary label ride along.
//!
//! # Dataset file format (little-endian)
//!
//! ```text
//! magic   "D2TRAJ01"                     8 bytes
//! version u32 = 1
//! flags   u32   bit0 entropy, bit1 confidence, bit2 labels, bit3 raw tokens
//! I       u32   sample count
//! S       u32   steps
//! D       u32   feature dim
//! L       u32   token count            (only if bit3)
//! per sample:
//!   label   u8                          (only if bit2)
//!   states  f32[S*D] step-major         (f32[S*L*D] if bit3)
//!   entropy f32[S]                      (only if bit0)
//!   conf    f32[S]                      (only if bit1)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{D2Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"D2TRAJ01";
pub const DATASET_VERSION: u32 = 1;

const FLAG_ENTROPY: u32 = 1 << 0;
const FLAG_CONFIDENCE: u32 = 1 << 1;
const FLAG_LABELS: u32 = 1 << 2;
const FLAG_RAW_TOKENS: u32 = 1 << 3;

/// One sample: `S x D` hidden states in step-major generation order, plus
/// optional per-step channels and an optional binary label (1 = unsafe).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: usize,
    dim: usize,
    states: Vec<f64>,
    pub entropy: Option<Vec<f64>>,
    pub confidence: Option<Vec<f64>>,
    pub label: Option<u8>,
}

impl Trajectory {
    pub fn new(steps: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(D2Error::Invalid("trajectory needs S >= 1 and D >= 1".into()));
        }
        if states.len() != steps * dim {
            return Err(D2Error::ShapeMismatch(format!(
                "states has {} values, expected {}x{}",
                states.len(),
                steps,
                dim
            )));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(D2Error::NonFiniteValue("trajectory states".into()));
        }
        Ok(Self { steps, dim, states, entropy: None, confidence: None, label: None })
    }

    pub fn with_entropy(mut self, entropy: Vec<f64>) -> Result<Self> {
        if entropy.len() != self.steps {
            return Err(D2Error::ShapeMismatch("entropy length != S".into()));
        }
        if !entropy.iter().all(|v| v.is_finite()) {
            return Err(D2Error::NonFiniteValue("entropy channel".into()));
        }
        self.entropy = Some(entropy);
        Ok(self)
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != self.steps {
            return Err(D2Error::ShapeMismatch("confidence length != S".into()));
        }
        if !confidence.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(D2Error::Invalid("confidence values must lie in [0,1]".into()));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn with_label(mut self, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(D2Error::Invalid("label must be 0 or 1".into()));
        }
        self.label = Some(label);
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hidden state of step `s` (stored/generation order).
    pub fn step(&self, s: usize) -> &[f64] {
        &self.states[s * self.dim..(s + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// The final, most-refined step (the single-step readout input).
    pub fn last_step(&self) -> &[f64] {
        self.step(self.steps - 1)
    }

    /// Mean over the step axis, length `D`.
    pub fn step_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for s in 0..self.steps {
            for (m, v) in mean.iter_mut().zip(self.step(s)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.steps as f64;
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }

    /// Sub-trajectory covering the inclusive step span `lo..=hi`, with
    /// channels sliced consistently and the label preserved.
    pub fn slice_window(&self, lo: usize, hi: usize) -> Result<Trajectory> {
        if lo > hi || hi >= self.steps {
            return Err(D2Error::SpanOutOfRange { lo, hi, steps: self.steps });
        }
        let states = self.states[lo * self.dim..(hi + 1) * self.dim].to_vec();
        Ok(Trajectory {
            steps: hi - lo + 1,
            dim: self.dim,
            states,
            entropy: self.entropy.as_ref().map(|e| e[lo..=hi].to_vec()),
            confidence: self.confidence.as_ref().map(|c| c[lo..=hi].to_vec()),
            label: self.label,
        })
    }
}

/// An immutable collection of trajectories sharing `S` and `D`.
/// Labels are all-present or all-absent; likewise each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Trajectory>,
    steps: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Trajectory>) -> Result<Self> {
        let first = samples.first().ok_or(D2Error::EmptyDataset)?;
        let (steps, dim) = (first.steps, first.dim);
        let has_e = first.entropy.is_some();
        let has_c = first.confidence.is_some();
        let has_l = first.label.is_some();
        for (i, t) in samples.iter().enumerate() {
            if t.steps != steps || t.dim != dim {
                return Err(D2Error::ShapeMismatch(format!(
                    "sample {i} is {}x{}, dataset is {steps}x{dim}",
                    t.steps, t.dim
                )));
            }
            if t.entropy.is_some() != has_e
                || t.confidence.is_some() != has_c
                || t.label.is_some() != has_l
            {
                return Err(D2Error::Invalid(format!(
                    "sample {i} channel/label presence differs from sample 0"
                )));
            }
        }
        Ok(Self { samples, steps, dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &Trajectory {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Trajectory] {
        &self.samples
    }

    pub fn has_entropy(&self) -> bool {
        self.samples[0].entropy.is_some()
    }

    pub fn has_confidence(&self) -> bool {
        self.samples[0].confidence.is_some()
    }

    pub fn has_labels(&self) -> bool {
        self.samples[0].label.is_some()
    }

    /// Labels of all samples; errors if the dataset is unlabeled.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.samples
            .iter()
            .map(|t| t.label.ok_or(D2Error::Invalid("dataset is unlabeled".into())))
            .collect()
    }

    /// New dataset with the selected sample indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        read_dataset(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dataset(self, path)
    }
}

/// A single sample with the token dimension retained: `S x L x D`,
/// step-major then token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    steps: usize,
    tokens: usize,
    dim: usize,
    states: Vec<f64>,
}

impl RawTrajectory {
    pub fn new(steps: usize, tokens: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if steps == 0 || tokens == 0 || dim == 0 {
            return Err(D2Error::Invalid("raw trajectory needs S, L, D >= 1".into()));
        }
        if states.len() != steps * tokens * dim {
            return Err(D2Error::ShapeMismatch(format!(
                "raw states has {} values, expected {steps}x{tokens}x{dim}",
                states.len()
            )));
        }
        if !states.iter().all(|v| v.is_finite()) {
            return Err(D2Error::NonFiniteValue("raw trajectory states".into()));
        }
        Ok(Self { steps, tokens, dim, states })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, s: usize, r: usize) -> &[f64] {
        let base = (s * self.tokens + r) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// Mean over the token axis, yielding the pooled `S x D` state matrix.
    pub fn mean_pool_tokens(&self) -> Vec<f64> {
        let mut pooled = vec![0.0; self.steps * self.dim];
        for s in 0..self.steps {
            let row = &mut pooled[s * self.dim..(s + 1) * self.dim];
            for r in 0..self.tokens {
                for (p, v) in row.iter_mut().zip(self.token(s, r)) {
                    *p += v;
                }
            }
            let inv = 1.0 / self.tokens as f64;
            for p in row {
                *p *= inv;
            }
        }
        pooled
    }
}

/// Pool a raw trajectory over its token axis. Free-function form of
/// [`RawTrajectory::mean_pool_tokens`].
pub fn mean_pool_tokens(raw: &RawTrajectory) -> Vec<f64> {
    raw.mean_pool_tokens()
}

/// A raw (token-retaining) dataset. Same per-sample channels and labels as
/// [`Dataset`], written with the raw-tokens flag set.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub samples: Vec<RawSample>,
    steps: usize,
    tokens: usize,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub states: RawTrajectory,
    pub entropy: Option<Vec<f64>>,
    pub confidence: Option<Vec<f64>>,
    pub label: Option<u8>,
}

impl RawDataset {
    pub fn new(samples: Vec<RawSample>) -> Result<Self> {
        let first = samples.first().ok_or(D2Error::EmptyDataset)?;
        let (steps, tokens, dim) =
            (first.states.steps, first.states.tokens, first.states.dim);
        for (i, s) in samples.iter().enumerate() {
            if s.states.steps != steps || s.states.tokens != tokens || s.states.dim != dim {
                return Err(D2Error::ShapeMismatch(format!("raw sample {i} shape differs")));
            }
            if s.entropy.is_some() != first.entropy.is_some()
                || s.confidence.is_some() != first.confidence.is_some()
                || s.label.is_some() != first.label.is_some()
            {
                return Err(D2Error::Invalid(format!(
                    "raw sample {i} channel/label presence differs from sample 0"
                )));
            }
        }
        Ok(Self { samples, steps, tokens, dim })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Mean-pool every sample over its token axis, preserving channels and
    /// labels.
    pub fn pool(&self) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut t =
                    Trajectory::new(self.steps, self.dim, s.states.mean_pool_tokens())?;
                if let Some(e) = &s.entropy {
                    t = t.with_entropy(e.clone())?;
                }
                if let Some(c) = &s.confidence {
                    t = t.with_confidence(c.clone())?;
                }
                if let Some(l) = s.label {
                    t = t.with_label(l)?;
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<RawDataset> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let header = Header::read(&mut r)?;
        if !header.raw {
            return Err(D2Error::Invalid(
                "file has no raw-token payload; use Dataset::read".into(),
            ));
        }
        let mut samples = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let label = header.read_label(&mut r)?;
            let states = read_f32_block(
                &mut r,
                header.steps * header.tokens * header.dim,
                "raw states",
            )?;
            let states =
                RawTrajectory::new(header.steps, header.tokens, header.dim, states)?;
            let (entropy, confidence) = header.read_channels(&mut r)?;
            samples.push(RawSample { states, entropy, confidence, label });
        }
        expect_eof(&mut r)?;
        RawDataset::new(samples)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let first = &self.samples[0];
        let header = Header {
            entropy: first.entropy.is_some(),
            confidence: first.confidence.is_some(),
            labels: first.label.is_some(),
            raw: true,
            count: self.samples.len(),
            steps: self.steps,
            dim: self.dim,
            tokens: self.tokens,
        };
        header.write(&mut w)?;
        for s in &self.samples {
            if let Some(l) = s.label {
                w.write_all(&[l])?;
            }
            write_f32_block(&mut w, &s.states.states)?;
            if let Some(e) = &s.entropy {
                write_f32_block(&mut w, e)?;
            }
            if let Some(c) = &s.confidence {
                write_f32_block(&mut w, c)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

type Channels = (Option<Vec<f64>>, Option<Vec<f64>>);

struct Header {
    entropy: bool,
    confidence: bool,
    labels: bool,
    raw: bool,
    count: usize,
    steps: usize,
    dim: usize,
    tokens: usize,
}

impl Header {
    fn read(r: &mut impl Read) -> Result<Header> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| D2Error::Truncated("missing magic".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(D2Error::BadMagic {
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(r, "version")?;
        if version != DATASET_VERSION {
            return Err(D2Error::VersionUnsupported(version));
        }
        let flags = read_u32(r, "flags")?;
        let count = read_u32(r, "sample count")? as usize;
        let steps = read_u32(r, "steps")? as usize;
        let dim = read_u32(r, "dim")? as usize;
        let raw = flags & FLAG_RAW_TOKENS != 0;
        let tokens = if raw { read_u32(r, "tokens")? as usize } else { 1 };
        if count == 0 || steps == 0 || dim == 0 || tokens == 0 {
            return Err(D2Error::Invalid("header dimensions must be >= 1".into()));
        }
        Ok(Header {
            entropy: flags & FLAG_ENTROPY != 0,
            confidence: flags & FLAG_CONFIDENCE != 0,
            labels: flags & FLAG_LABELS != 0,
            raw,
            count,
            steps,
            dim,
            tokens,
        })
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if self.entropy {
            f |= FLAG_ENTROPY;
        }
        if self.confidence {
            f |= FLAG_CONFIDENCE;
        }
        if self.labels {
            f |= FLAG_LABELS;
        }
        if self.raw {
            f |= FLAG_RAW_TOKENS;
        }
        f
    }

    fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&self.flags().to_le_bytes())?;
        w.write_all(&(self.count as u32).to_le_bytes())?;
        w.write_all(&(self.steps as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        if self.raw {
            w.write_all(&(self.tokens as u32).to_le_bytes())?;
        }
        Ok(())
    }

    fn read_label(&self, r: &mut impl Read) -> Result<Option<u8>> {
        if !self.labels {
            return Ok(None);
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| D2Error::Truncated("missing label byte".into()))?;
        if b[0] > 1 {
            return Err(D2Error::Invalid(format!("label byte {} not in {{0,1}}", b[0])));
        }
        Ok(Some(b[0]))
    }

    fn read_channels(&self, r: &mut impl Read) -> Result<Channels> {
        let entropy = if self.entropy {
            Some(read_f32_block(r, self.steps, "entropy channel")?)
        } else {
            None
        };
        let confidence = if self.confidence {
            Some(read_f32_block(r, self.steps, "confidence channel")?)
        } else {
            None
        };
        Ok((entropy, confidence))
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| D2Error::Truncated(format!("missing {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_block(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| D2Error::Truncated(format!("payload short while reading {what}")))?;
    let mut out = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(D2Error::NonFiniteValue(what.into()));
        }
        out.push(v as f64);
    }
    Ok(out)
}

fn write_f32_block(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(D2Error::Invalid("trailing bytes after declared payload".into())),
    }
}

/// Read a pooled dataset file. Files written with the raw-tokens flag are
/// rejected; load those through [`RawDataset::read`] and pool explicitly.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let header = Header::read(&mut r)?;
    if header.raw {
        return Err(D2Error::Invalid(
            "file carries raw token payload; use RawDataset::read".into(),
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let label = header.read_label(&mut r)?;
        let states = read_f32_block(&mut r, header.steps * header.dim, "states")?;
        let mut t = Trajectory::new(header.steps, header.dim, states)?;
        let (entropy, confidence) = header.read_channels(&mut r)?;
        if let Some(e) = entropy {
            t = t.with_entropy(e)?;
        }
        if let Some(c) = confidence {
            t = t.with_confidence(c)?;
        }
        if let Some(l) = label {
            t = t.with_label(l)?;
        }
        samples.push(t);
    }
    expect_eof(&mut r)?;
    Dataset::new(samples)
}

/// Write a pooled dataset file. `read_dataset(write_dataset(ds)) == ds`
/// bit-exactly for values representable in f32.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        entropy: ds.has_entropy(),
        confidence: ds.has_confidence(),
        labels: ds.has_labels(),
        raw: false,
        count: ds.len(),
        steps: ds.steps,
        dim: ds.dim,
        tokens: 1,
    };
    header.write(&mut w)?;
    for t in &ds.samples {
        if let Some(l) = t.label {
            w.write_all(&[l])?;
        }
        write_f32_block(&mut w, &t.states)?;
        if let Some(e) = &t.entropy {
            write_f32_block(&mut w, e)?;
        }
        if let Some(c) = &t.confidence {
            write_f32_block(&mut w, c)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn traj(steps: usize, dim: usize, seed: u64) -> Trajectory {
        let mut rng = crate::util::rng_from(seed);
        let states: Vec<f64> =
            (0..steps * dim).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) as f64).collect();
        let entropy: Vec<f64> = (0..steps).map(|_| (rng.gen::<f32>() * 3.0) as f64).collect();
        let confidence: Vec<f64> = (0..steps).map(|_| rng.gen::<f32>() as f64).collect();
        Trajectory::new(steps, dim, states)
            .unwrap()
            .with_entropy(entropy)
            .unwrap()
            .with_confidence(confidence)
            .unwrap()
            .with_label((seed % 2) as u8)
            .unwrap()
    }

    #[test]
    fn round_trip_small() {
        let ds = Dataset::new(vec![traj(4, 3, 1), traj(4, 3, 2)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.d2t");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn round_trip_bytes_identical_for_random_samples() {
        // 100 random samples: write -> read -> write must be byte-identical.
        let samples: Vec<Trajectory> = (0..100).map(|i| traj(6, 5, 100 + i)).collect();
        let ds = Dataset::new(samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.d2t");
        let p2 = dir.path().join("b.d2t");
        ds.write(&p1).unwrap();
        let back = Dataset::read(&p1).unwrap();
        back.write(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.d2t");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"XXXXXXXX");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match Dataset::read(&path) {
            Err(D2Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        // Header claims 10 samples but payload only holds 9.
        let ds = Dataset::new((0..9).map(|i| traj(3, 2, i)).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.d2t");
        ds.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16..20].copy_from_slice(&10u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Dataset::read(&path) {
            Err(D2Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let ds = Dataset::new(vec![traj(2, 2, 0)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.d2t");
        ds.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Dataset::read(&path) {
            Err(D2Error::VersionUnsupported(9)) => {}
            other => panic!("expected VersionUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn flags_reflect_channels() {
        let bare = Trajectory::new(2, 2, vec![0.0; 4]).unwrap();
        let ds = Dataset::new(vec![bare]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.d2t");
        ds.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(flags, 0, "no channels -> bits 0,1,2 clear");

        let labeled =
            Trajectory::new(2, 2, vec![0.0; 4]).unwrap().with_label(1).unwrap();
        let ds = Dataset::new(vec![labeled]).unwrap();
        ds.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(flags, FLAG_LABELS);
        // header 28 bytes, one label byte, 4 f32 states
        assert_eq!(bytes.len(), 28 + 1 + 16);
    }

    #[test]
    fn mean_pool_single_token_is_identity() {
        let raw = RawTrajectory::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(raw.mean_pool_tokens(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn mean_pool_constant_tokens() {
        // all tokens equal v at a step -> pooled row equals v
        let v = [7.0, -2.0];
        let mut states = Vec::new();
        for _ in 0..3 {
            states.extend_from_slice(&v);
        }
        let raw = RawTrajectory::new(1, 3, 2, states).unwrap();
        assert_eq!(raw.mean_pool_tokens(), v.to_vec());
    }

    #[test]
    fn mean_pool_two_tokens() {
        let raw = RawTrajectory::new(1, 2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(raw.mean_pool_tokens(), vec![2.0, 4.0]);
    }

    #[test]
    fn pooling_is_linear() {
        let mut rng = crate::util::rng_from(7);
        let n = 2 * 3 * 4;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (a, b) = (2.5, -1.25);
        let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        let px = RawTrajectory::new(2, 3, 4, xs).unwrap().mean_pool_tokens();
        let py = RawTrajectory::new(2, 3, 4, ys).unwrap().mean_pool_tokens();
        let pc = RawTrajectory::new(2, 3, 4, combo).unwrap().mean_pool_tokens();
        for i in 0..px.len() {
            let want = a * px[i] + b * py[i];
            let denom = want.abs().max(1.0);
            assert!((pc[i] - want).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn slice_full_span_is_identity() {
        let t = traj(4, 3, 5);
        assert_eq!(t.slice_window(0, 3).unwrap(), t);
    }

    #[test]
    fn slice_single_step() {
        let t = traj(4, 3, 5);
        let s = t.slice_window(2, 2).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.step(0), t.step(2));
    }

    #[test]
    fn slice_channels_consistently() {
        let t = traj(4, 3, 9);
        let s = t.slice_window(1, 3).unwrap();
        assert_eq!(s.entropy.as_ref().unwrap(), &t.entropy.as_ref().unwrap()[1..=3]);
        assert_eq!(
            s.confidence.as_ref().unwrap(),
            &t.confidence.as_ref().unwrap()[1..=3]
        );
        assert_eq!(s.label, t.label);
    }

    #[test]
    fn slice_out_of_range() {
        let t = traj(4, 3, 5);
        assert!(matches!(t.slice_window(1, 4), Err(D2Error::SpanOutOfRange { .. })));
        assert!(matches!(t.slice_window(3, 2), Err(D2Error::SpanOutOfRange { .. })));
    }

    #[test]
    fn slice_composition() {
        let t = traj(8, 2, 11);
        let outer = t.slice_window(2, 6).unwrap();
        let inner = outer.slice_window(1, 3).unwrap();
        assert_eq!(inner, t.slice_window(3, 5).unwrap());
    }

    #[test]
    fn raw_dataset_round_trip_and_pool() {
        let mut rng = crate::util::rng_from(3);
        let samples: Vec<RawSample> = (0..4)
            .map(|i| {
                let states: Vec<f64> =
                    (0..3 * 2 * 5).map(|_| (rng.gen::<f32>()) as f64).collect();
                RawSample {
                    states: RawTrajectory::new(3, 2, 5, states).unwrap(),
                    entropy: None,
                    confidence: None,
                    label: Some(i % 2),
                }
            })
            .collect();
        let raw = RawDataset::new(samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.d2t");
        raw.write(&path).unwrap();
        let back = RawDataset::read(&path).unwrap();
        assert_eq!(raw, back);
        // pooled dataset reads must reject the raw file
        assert!(matches!(Dataset::read(&path), Err(D2Error::Invalid(_))));
        let pooled = raw.pool().unwrap();
        assert_eq!(pooled.len(), 4);
        assert_eq!(pooled.dim(), 5);
        assert_eq!(pooled.labels().unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn mixed_label_presence_rejected() {
        let a = Trajectory::new(2, 2, vec![0.0; 4]).unwrap().with_label(0).unwrap();
        let b = Trajectory::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(Dataset::new(vec![a, b]).is_err());
    }
}
