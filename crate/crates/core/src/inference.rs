//! Conversion: autoregressive decoding with optional forward attention,
//! identity-attention streaming conversion and output moment matching.

use serde::{Deserialize, Serialize};

use crate::features::{position_encoding, FeatureLayout, FeatureSequence, SpeakerProfile, STD_FLOOR};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::{attend, Lens, Mode, Model, NetKind, Pass};
use crate::{Error, Real, Result};

/// Window of the attention peak, in reduced frames behind and ahead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardAttentionConfig {
    pub back: usize,
    pub ahead: usize,
}

impl ForwardAttentionConfig {
    /// Rounds the window lengths in milliseconds to the nearest whole number
    /// of frames of `period_ms`, halves rounding up.
    pub fn from_ms(back_ms: f64, ahead_ms: f64, period_ms: f64) -> Result<Self> {
        if !(period_ms > 0.0) {
            return Err(Error::InvalidArgument("frame period must be positive".into()));
        }
        let frames = |ms: f64| (ms / period_ms + 0.5).floor() as usize;
        let c = ForwardAttentionConfig {
            back: frames(back_ms),
            ahead: frames(ahead_ms),
        };
        if c.back == 0 || c.ahead == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention window {back_ms}/{ahead_ms} ms is under one frame of {period_ms} ms"
            )));
        }
        Ok(c)
    }

    /// 160 ms behind and 320 ms ahead.
    pub fn standard(period_ms: f64) -> Result<Self> {
        Self::from_ms(160.0, 320.0, period_ms)
    }

    /// Inclusive source range allowed around `peak` among `n` frames.
    pub fn window(&self, peak: usize, n: usize) -> (usize, usize) {
        let lo = (peak + 1).saturating_sub(self.back);
        let hi = (peak + self.ahead - 1).min(n - 1);
        (lo.min(hi), hi)
    }
}

/// Which network produces the converted features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputSource {
    #[default]
    Reconstructor,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvertOptions {
    /// Step budget; `None` uses `ceil(1.5·N) + 10`.
    pub max_steps: Option<usize>,
    pub forward: Option<ForwardAttentionConfig>,
    pub output: OutputSource,
    /// Steps the peak must rest on the last source frame before stopping.
    pub stop_patience: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            max_steps: None,
            forward: None,
            output: OutputSource::Reconstructor,
            stop_patience: 5,
        }
    }
}

/// Dense `rows × cols` attention, row-major; rows index source frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

impl AttentionMatrix {
    pub fn get(&self, n: usize, m: usize) -> Real {
        self.data[n * self.cols + m]
    }

    pub fn column(&self, m: usize) -> Vec<Real> {
        (0..self.rows).map(|n| self.get(n, m)).collect()
    }

    /// First row holding the column maximum.
    pub fn peak(&self, m: usize) -> usize {
        argmax(&self.column(m))
    }

    pub fn nonzeros(&self, m: usize) -> usize {
        (0..self.rows).filter(|&n| self.get(n, m) != 0.0).count()
    }

    fn from_columns(rows: usize, columns: &[Vec<Real>]) -> Self {
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (m, c) in columns.iter().enumerate() {
            for (n, &v) in c.iter().enumerate() {
                data[n * cols + m] = v;
            }
        }
        AttentionMatrix { rows, cols, data }
    }

    /// Adds a leading batch axis.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.rows, self.cols], self.data.clone()).expect("consistent size")
    }
}

fn argmax(xs: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Result of an autoregressive conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    /// Converted frames from the selected network.
    pub output: FeatureSequence,
    /// Frames emitted by the decoder during the recursion.
    pub decoded: FeatureSequence,
    /// Column `m` attends for output frame `m`; column 0 belongs to the
    /// leading zero frame.
    pub attention: AttentionMatrix,
    /// Attention peak of every column.
    pub peaks: Vec<usize>,
}

fn encoded_input(x: &FeatureSequence) -> Result<Tensor> {
    Tensor::from_vec(&[1, x.dim(), x.len()], x.add_position_encoding().into_data())
}

fn check_input(model: &Model, x: &FeatureSequence) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot convert an empty sequence".into()));
    }
    if x.dim() != model.config.feat_dim {
        return Err(Error::Shape(format!(
            "input has {} channels, model expects {}",
            x.dim(),
            model.config.feat_dim
        )));
    }
    Ok(())
}

fn to_sequence(t: &Tensor, like: &FeatureSequence, skip: usize) -> Result<FeatureSequence> {
    let (_, c, n) = t.dims3()?;
    let mut data = Vec::with_capacity(c * (n - skip));
    for ch in 0..c {
        data.extend_from_slice(&t.data()[ch * n + skip..(ch + 1) * n]);
    }
    let mut s = FeatureSequence::new(c, n - skip, like.frame_period_ms, data)?;
    s.stack = like.stack;
    Ok(s)
}

/// Speaker lists for a conversion from `src` to `trg`.
fn speakers(model: &Model, src: Option<usize>, trg: Option<usize>) -> Result<(Option<[usize; 1]>, Option<[usize; 1]>)> {
    let need = |kind: NetKind, k: Option<usize>| -> Result<Option<[usize; 1]>> {
        match (kind.conditioned(model.mode()), k) {
            (true, Some(k)) if k < model.config.n_speakers => Ok(Some([k])),
            (true, Some(k)) => Err(Error::UnknownSpeaker(format!("speaker index {k} is out of range"))),
            (true, None) => Err(Error::Mode(format!("{} mode needs a {} speaker", model.mode(), kind.name()))),
            (false, _) => Ok(None),
        }
    };
    Ok((need(NetKind::SourceEncoder, src)?, need(NetKind::TargetEncoder, trg)?))
}

/// Converts normalised, stacked source frames. Speakers are ignored by
/// networks that take none in the model's mode.
pub fn convert(
    model: &mut Model,
    x: &FeatureSequence,
    src: Option<usize>,
    trg: Option<usize>,
    opts: &ConvertOptions,
) -> Result<Conversion> {
    check_input(model, x)?;
    let (sk, tk) = speakers(model, src, trg)?;
    let (sk, tk) = (sk.as_ref().map(|k| &k[..]), tk.as_ref().map(|k| &k[..]));
    let n = x.len();
    let d = model.config.feat_dim;
    let budget = opts.max_steps.unwrap_or((3 * n).div_ceil(2) + 10).max(1);
    let mut pass = Pass::eval();

    let mut tape = Tape::new();
    let xv = tape.input(encoded_input(x)?)?;
    let (keys, values) = model.src_encode(&mut tape, xv, sk, &mut pass, None)?;
    let keys = tape.value(keys).clone();
    let values = tape.value(values).clone();

    // prefix holds the zero frame followed by every emitted frame, channel-major
    let mut frames: Vec<Vec<Real>> = vec![vec![0.0; d]];
    let mut columns: Vec<Vec<Real>> = Vec::new();
    let mut peaks: Vec<usize> = Vec::new();
    let mut arrived: Option<usize> = None;

    // returns the decoder output of the last column and the reconstructor input
    let mut attend_prefix = |model: &mut Model, frames: &[Vec<Real>], columns: &mut Vec<Vec<Real>>, peaks: &mut Vec<usize>| -> Result<(Vec<Real>, Tape, Var)> {
        let m = frames.len();
        let mut prefix = vec![0.0; d * m];
        for (t, f) in frames.iter().enumerate() {
            for c in 0..d {
                prefix[c * m + t] = f[c] + position_encoding(t, c, d);
            }
        }
        let mut tape = Tape::new();
        let q_in = tape.input(Tensor::from_vec(&[1, d, m], prefix)?)?;
        let q = model.trg_encode(&mut tape, q_in, tk, &mut pass, None)?;
        let k = tape.constant(keys.clone())?;
        let a = attend(&mut tape, k, q, Lens::default())?;
        let a = tape.value(a).clone();
        let mut col: Vec<Real> = (0..n).map(|i| a.data()[i * m + m - 1]).collect();
        if let (Some(fa), Some(&prev)) = (opts.forward, peaks.last()) {
            let (lo, hi) = fa.window(prev, n);
            for (i, v) in col.iter_mut().enumerate() {
                if i < lo || i > hi {
                    *v = 0.0;
                }
            }
            let s: Real = col.iter().sum();
            if s > 0.0 {
                col.iter_mut().for_each(|v| *v /= s);
            } else {
                col.iter_mut().for_each(|v| *v = 0.0);
                col[prev.clamp(lo, hi)] = 1.0;
            }
        }
        peaks.push(argmax(&col));
        columns.push(col);
        let att = AttentionMatrix::from_columns(n, columns).to_tensor();
        let mut tape = Tape::new();
        let v = tape.constant(values.clone())?;
        let a = tape.constant(att)?;
        let r = crate::model::warp(&mut tape, v, a)?;
        let y = model.trg_decode(&mut tape, r, tk, &mut pass, None)?;
        let yv = tape.value(y);
        let last = (0..d).map(|c| yv.data()[c * m + m - 1]).collect();
        Ok((last, tape, r))
    };

    for step in 0..budget {
        let (next, _, _) = attend_prefix(model, &frames, &mut columns, &mut peaks)?;
        frames.push(next);
        let peak = *peaks.last().expect("one peak per step");
        if peak == n - 1 {
            let first = *arrived.get_or_insert(step);
            if step + 1 - first >= opts.stop_patience.max(1) {
                frames.truncate(first + 2);
                columns.truncate(first + 1);
                peaks.truncate(first + 1);
                break;
            }
        } else {
            arrived = None;
        }
    }

    // final column for the last emitted frame, then the whole-sequence output
    let (_, mut tape, r) = attend_prefix(model, &frames, &mut columns, &mut peaks)?;
    let m = frames.len();
    let mut dec = vec![0.0; d * (m - 1)];
    for (t, f) in frames.iter().skip(1).enumerate() {
        for c in 0..d {
            dec[c * (m - 1) + t] = f[c];
        }
    }
    let mut decoded = FeatureSequence::new(d, m - 1, x.frame_period_ms, dec)?;
    decoded.stack = x.stack;
    let output = match opts.output {
        OutputSource::Decoder => decoded.clone(),
        OutputSource::Reconstructor => {
            let y = model.trg_reconstruct(&mut tape, r, tk, &mut pass, None)?;
            to_sequence(tape.value(y), x, 1)?
        }
    };
    Ok(Conversion {
        output,
        decoded,
        attention: AttentionMatrix::from_columns(n, &columns),
        peaks,
    })
}

/// Streaming conversion with identity attention: values feed the target
/// networks frame by frame. Requires a real-time model.
pub fn convert_realtime(
    model: &mut Model,
    x: &FeatureSequence,
    src: Option<usize>,
    trg: Option<usize>,
    output: OutputSource,
) -> Result<FeatureSequence> {
    if model.mode() != Mode::Realtime {
        return Err(Error::Mode(format!("streaming conversion needs a realtime model, got {}", model.mode())));
    }
    check_input(model, x)?;
    let (sk, tk) = speakers(model, src, trg)?;
    let (sk, tk) = (sk.as_ref().map(|k| &k[..]), tk.as_ref().map(|k| &k[..]));
    let mut pass = Pass::eval();
    let mut tape = Tape::new();
    let xv = tape.input(encoded_input(x)?)?;
    let (_, values) = model.src_encode(&mut tape, xv, sk, &mut pass, None)?;
    let y = match output {
        OutputSource::Reconstructor => model.trg_reconstruct(&mut tape, values, tk, &mut pass, None)?,
        OutputSource::Decoder => model.trg_decode(&mut tape, values, tk, &mut pass, None)?,
    };
    to_sequence(tape.value(y), x, 0)
}

/// Rescales the normalised channels of `y` so that their voiced-frame mean
/// and standard deviation become 0 and 1, then maps them into `profile`'s
/// feature space. Frames with a voicing value of at least 0.5 count as voiced.
pub fn moment_match(y: &FeatureSequence, profile: &SpeakerProfile, layout: &FeatureLayout) -> Result<FeatureSequence> {
    if y.dim() != layout.dim() {
        return Err(Error::Shape(format!("moment matching expects {} channels, got {}", layout.dim(), y.dim())));
    }
    let voiced: Vec<usize> = (0..y.len()).filter(|&t| y.get(layout.vuv(), t) >= 0.5).collect();
    if voiced.is_empty() {
        return Err(Error::InvalidArgument("no voiced frames to match moments on".into()));
    }
    let mut out = y.clone();
    let count = voiced.len() as Real;
    for c in 0..layout.normalized() {
        let mean = voiced.iter().map(|&t| y.get(c, t)).sum::<Real>() / count;
        let var = voiced.iter().map(|&t| (y.get(c, t) - mean).powi(2)).sum::<Real>() / count;
        let std = var.sqrt().max(STD_FLOOR);
        for v in out.channel_mut(c) {
            *v = (*v - mean) / std;
        }
    }
    out.denormalize(profile, layout)
}
