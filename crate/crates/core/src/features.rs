//! Acoustic feature sequences: FSEQ files, speaker statistics, log-F0
//! interpolation, normalisation, frame stacking and position encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

const FSEQ_MAGIC: &[u8; 4] = b"FSQ1";
/// Lower bound on speaker standard deviations.
pub const STD_FLOOR: Real = 1e-6;

/// Channel layout of an unstacked frame: `n_mcc` mel-cepstral coefficients,
/// then log F0, coded aperiodicity and the voiced/unvoiced flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_mcc: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout { n_mcc: 28 }
    }
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.n_mcc + 3
    }
    pub fn logf0(&self) -> usize {
        self.n_mcc
    }
    pub fn aperiodicity(&self) -> usize {
        self.n_mcc + 1
    }
    pub fn vuv(&self) -> usize {
        self.n_mcc + 2
    }
    /// Number of leading channels that are speaker-normalised (MCCs + log F0).
    pub fn normalized(&self) -> usize {
        self.n_mcc + 1
    }

    /// Per-feature L1 weights: `1/I` per MCC, `1/10` log F0, `1/50` for
    /// aperiodicity and voicing.
    pub fn loss_weights(&self) -> Vec<Real> {
        let mut w = vec![1.0 / self.n_mcc as Real; self.n_mcc];
        w.extend([0.1, 0.02, 0.02]);
        w
    }
}

/// A `dim × len` matrix of frames, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    len: usize,
    pub frame_period_ms: f64,
    data: Vec<Real>,
    /// Number of frames stacked per column; 1 when not reduced.
    pub stack: usize,
}

impl FeatureSequence {
    pub fn new(dim: usize, len: usize, frame_period_ms: f64, data: Vec<Real>) -> Result<Self> {
        if data.len() != dim * len {
            return Err(Error::Shape(format!(
                "{dim}×{len} sequence with {} values",
                data.len()
            )));
        }
        Ok(FeatureSequence {
            dim,
            len,
            frame_period_ms,
            data,
            stack: 1,
        })
    }

    pub fn zeros(dim: usize, len: usize, frame_period_ms: f64) -> Self {
        FeatureSequence {
            dim,
            len,
            frame_period_ms,
            data: vec![0.0; dim * len],
            stack: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn is_reduced(&self) -> bool {
        self.stack > 1
    }
    pub fn data(&self) -> &[Real] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn get(&self, channel: usize, frame: usize) -> Real {
        self.data[channel * self.len + frame]
    }

    pub fn set(&mut self, channel: usize, frame: usize, v: Real) {
        self.data[channel * self.len + frame] = v;
    }

    pub fn channel(&self, c: usize) -> &[Real] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Real] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    /// One frame as a vector of `dim` values.
    pub fn frame(&self, t: usize) -> Vec<Real> {
        (0..self.dim).map(|c| self.get(c, t)).collect()
    }

    /// Frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len {
            return Err(Error::Shape(format!(
                "frames {start}..{} of {}",
                start + len,
                self.len
            )));
        }
        let mut data = Vec::with_capacity(self.dim * len);
        for c in 0..self.dim {
            data.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        Ok(FeatureSequence {
            dim: self.dim,
            len,
            frame_period_ms: self.frame_period_ms,
            data,
            stack: self.stack,
        })
    }

    pub fn is_voiced(&self, layout: &FeatureLayout, t: usize) -> bool {
        self.get(layout.vuv(), t) >= 0.5
    }

    fn check_layout(&self, layout: &FeatureLayout) -> Result<()> {
        if self.stack != 1 || self.dim != layout.dim() {
            return Err(Error::Shape(format!(
                "expected an unstacked {}-dim sequence, got dim {} (stack {})",
                layout.dim(),
                self.dim,
                self.stack
            )));
        }
        Ok(())
    }

    /// Fills unvoiced log-F0 slots by linear interpolation between the
    /// neighbouring voiced frames, holding the nearest voiced value at the
    /// edges.
    pub fn interpolate_logf0(&self, layout: &FeatureLayout) -> Result<Self> {
        self.check_layout(layout)?;
        let voiced: Vec<usize> = (0..self.len).filter(|&t| self.is_voiced(layout, t)).collect();
        let (&first, &last) = match (voiced.first(), voiced.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => {
                return Err(Error::InvalidArgument(
                    "cannot interpolate log F0 of an all-unvoiced utterance".into(),
                ))
            }
        };
        let mut out = self.clone();
        let f0 = layout.logf0();
        let src = self.channel(f0).to_vec();
        let dst = out.channel_mut(f0);
        dst[..first].fill(src[first]);
        dst[last + 1..].fill(src[last]);
        for pair in voiced.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for t in a + 1..b {
                let w = (t - a) as Real / (b - a) as Real;
                dst[t] = src[a] * (1.0 - w) + src[b] * w;
            }
        }
        Ok(out)
    }

    /// `x ← (x − μᵢ)/σᵢ` on the MCC and log-F0 channels.
    pub fn normalize(&self, profile: &SpeakerProfile, layout: &FeatureLayout) -> Result<Self> {
        self.affine(profile, layout, true)
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, profile: &SpeakerProfile, layout: &FeatureLayout) -> Result<Self> {
        self.affine(profile, layout, false)
    }

    fn affine(&self, profile: &SpeakerProfile, layout: &FeatureLayout, forward: bool) -> Result<Self> {
        self.check_layout(layout)?;
        if profile.mean.len() != layout.normalized() || profile.std.len() != layout.normalized() {
            return Err(Error::Shape(format!(
                "profile has {} statistics, layout normalises {} channels",
                profile.mean.len(),
                layout.normalized()
            )));
        }
        if profile.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("profile std must be positive".into()));
        }
        let mut out = self.clone();
        for c in 0..layout.normalized() {
            let (m, s) = (profile.mean[c], profile.std[c]);
            for v in out.channel_mut(c) {
                *v = if forward { (*v - m) / s } else { *v * s + m };
            }
        }
        Ok(out)
    }

    /// Stacks non-overlapping groups of `r` frames into single columns of
    /// `dim·r` channels, zero-padding the tail to a multiple of `r`. Within a
    /// column, frame `j` of the group occupies channels `j·dim..(j+1)·dim`.
    pub fn stack_reduce(&self, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("reduction factor must be ≥ 1".into()));
        }
        if r == 1 {
            return Ok(self.clone());
        }
        let n = self.len.div_ceil(r);
        let dim = self.dim * r;
        let mut data = vec![0.0; dim * n];
        for t in 0..self.len {
            let (col, j) = (t / r, t % r);
            for c in 0..self.dim {
                data[(j * self.dim + c) * n + col] = self.get(c, t);
            }
        }
        Ok(FeatureSequence {
            dim,
            len: n,
            frame_period_ms: self.frame_period_ms * r as f64,
            data,
            stack: self.stack * r,
        })
    }

    /// Inverse of [`stack_reduce`](Self::stack_reduce); `frames` trims the
    /// zero padding when the original length is known.
    pub fn unstack(&self, r: usize, frames: Option<usize>) -> Result<Self> {
        if r == 0 || self.dim % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot unstack dim {} by {r}",
                self.dim
            )));
        }
        let dim = self.dim / r;
        let full = self.len * r;
        let len = frames.unwrap_or(full);
        if len > full {
            return Err(Error::Shape(format!("{len} frames requested from {full}")));
        }
        let mut data = vec![0.0; dim * len];
        for t in 0..len {
            let (col, j) = (t / r, t % r);
            for c in 0..dim {
                data[c * len + t] = self.get(j * dim + c, col);
            }
        }
        Ok(FeatureSequence {
            dim,
            len,
            frame_period_ms: self.frame_period_ms / r as f64,
            data,
            stack: (self.stack / r).max(1),
        })
    }

    /// Adds sinusoidal position encodings to every column.
    pub fn add_position_encoding(&self) -> Self {
        let mut out = self.clone();
        add_position_encoding(&mut out.data, self.dim, self.len, 0);
        out
    }

    pub fn read_fseq(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated header"))?;
        if &magic != FSEQ_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let bad = |_| Error::format(path, "truncated header");
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let period = r.read_f64::<LittleEndian>().map_err(bad)?;
        let mut data = vec![0.0; dim * len];
        for t in 0..len {
            for c in 0..dim {
                let v = r
                    .read_f32::<LittleEndian>()
                    .map_err(|_| Error::format(path, "truncated data"))?;
                data[c * len + t] = v as Real;
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes"));
        }
        FeatureSequence::new(dim, len, period, data)
    }

    /// Writes the FSEQ container (values are stored as 32-bit floats).
    pub fn write_fseq(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(FSEQ_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.dim as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.len as u32).map_err(io)?;
        w.write_f64::<LittleEndian>(self.frame_period_ms).map_err(io)?;
        for t in 0..self.len {
            for c in 0..self.dim {
                w.write_f32::<LittleEndian>(self.get(c, t) as f32).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// `PE(pos, 2i) = sin(pos/10000^{2i/D})`, `PE(pos, 2i+1) = cos(pos/10000^{2i/D})`.
pub fn position_encoding(pos: usize, channel: usize, dim: usize) -> Real {
    let i = (channel / 2) as Real;
    let angle = pos as Real / (10000.0 as Real).powf(2.0 * i / dim as Real);
    if channel % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Adds encodings for positions `offset..offset + len` to a channel-major block.
pub fn add_position_encoding(data: &mut [Real], dim: usize, len: usize, offset: usize) {
    for c in 0..dim {
        for t in 0..len {
            data[c * len + t] += position_encoding(offset + t, c, dim);
        }
    }
}

/// Per-speaker mean and standard deviation of the MCC and log-F0 channels over
/// voiced frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    pub name: String,
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl SpeakerProfile {
    /// The identity profile (μ = 0, σ = 1).
    pub fn identity(id: usize, name: &str, layout: &FeatureLayout) -> Self {
        SpeakerProfile {
            id,
            name: name.to_string(),
            mean: vec![0.0; layout.normalized()],
            std: vec![1.0; layout.normalized()],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Population statistics over every voiced frame of `seqs`.
pub fn compute_speaker_stats(
    id: usize,
    name: &str,
    seqs: &[&FeatureSequence],
    layout: &FeatureLayout,
) -> Result<SpeakerProfile> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!("no utterances for speaker {name}")));
    }
    let k = layout.normalized();
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for s in seqs {
        s.check_layout(layout)?;
        for t in (0..s.len()).filter(|&t| s.is_voiced(layout, t)) {
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += s.get(c, t);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "speaker {name} has no voiced frames"
        )));
    }
    let mean: Vec<Real> = sum.iter().map(|v| v / count as Real).collect();
    let mut sq = vec![0.0; k];
    for s in seqs {
        for t in (0..s.len()).filter(|&t| s.is_voiced(layout, t)) {
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += (s.get(c, t) - mean[c]).powi(2);
            }
        }
    }
    let std = sq
        .iter()
        .map(|v| (v / count as Real).sqrt().max(STD_FLOOR))
        .collect();
    Ok(SpeakerProfile {
        id,
        name: name.to_string(),
        mean,
        std,
    })
}
