//! Objective measures: DTW alignment, mel-cepstral distortion, log-F0
//! correlation and local duration ratio.

use serde::{Deserialize, Serialize};

use crate::features::{FeatureLayout, FeatureSequence};
use crate::{Error, Real, Result};

/// Points of the regression window for local slopes.
pub const LDR_WINDOW: usize = 33;

/// A monotone alignment between two sequences, as 0-based index pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl DtwPath {
    /// Checks endpoints and that every step is (1,0), (0,1) or (1,1).
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        let p = &self.pairs;
        !p.is_empty()
            && p[0] == (0, 0)
            && *p.last().unwrap() == (n - 1, m - 1)
            && p.windows(2).all(|w| {
                let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
                matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
            })
    }
}

pub fn euclidean(a: &[Real], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Minimal-cost alignment of frame lists under Euclidean local cost. Ties
/// prefer the diagonal step, then advancing in `a`.
pub fn dtw_align(a: &[Vec<Real>], b: &[Vec<Real>]) -> Result<DtwPath> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("cannot align an empty sequence".into()));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    // 0 diagonal, 1 from (i-1, j), 2 from (i, j-1)
    let mut from = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = euclidean(&a[i], &b[j]);
            if i == 0 && j == 0 {
                acc[0] = c;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut arg = 0u8;
            for (k, (pi, pj)) in [(1usize, 1usize), (1, 0), (0, 1)].into_iter().enumerate() {
                if i >= pi && j >= pj {
                    let v = acc[(i - pi) * m + (j - pj)];
                    if v < best {
                        best = v;
                        arg = k as u8;
                    }
                }
            }
            acc[i * m + j] = best + c;
            from[i * m + j] = arg;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        match from[i * m + j] {
            0 => {
                i -= 1;
                j -= 1
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        pairs,
        cost: acc[n * m - 1],
    })
}

/// MCC vectors of every frame.
pub fn mcc_frames(seq: &FeatureSequence, layout: &FeatureLayout) -> Vec<Vec<Real>> {
    (0..seq.len())
        .map(|t| (0..layout.n_mcc).map(|c| seq.get(c, t)).collect())
        .collect()
}

fn check(seq: &FeatureSequence, layout: &FeatureLayout) -> Result<()> {
    if seq.dim() != layout.dim() || seq.is_empty() {
        return Err(Error::Shape(format!(
            "metrics need non-empty unstacked {}-channel frames, got {}×{}",
            layout.dim(),
            seq.dim(),
            seq.len()
        )));
    }
    Ok(())
}

/// Aligns `converted` (first index) to `reference` (second index) on MCCs.
pub fn align(converted: &FeatureSequence, reference: &FeatureSequence, layout: &FeatureLayout) -> Result<DtwPath> {
    check(converted, layout)?;
    check(reference, layout)?;
    dtw_align(&mcc_frames(converted, layout), &mcc_frames(reference, layout))
}

/// Mel-cepstral distortion in dB, leaving out the first coefficient.
pub fn mcd(converted: &[Real], reference: &[Real]) -> f64 {
    let s: f64 = converted
        .iter()
        .zip(reference)
        .skip(1)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * s).sqrt()
}

/// Mean frame distortion along the alignment path.
pub fn utterance_mcd(converted: &FeatureSequence, reference: &FeatureSequence, path: &DtwPath, layout: &FeatureLayout) -> f64 {
    let c = mcc_frames(converted, layout);
    let r = mcc_frames(reference, layout);
    path.pairs.iter().map(|&(i, j)| mcd(&c[i], &r[j])).sum::<f64>() / path.pairs.len() as f64
}

/// Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two paired values".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant contour".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Log-F0 correlation after warping the converted contour onto reference
/// frames. Several converted frames on one reference frame are averaged and
/// their voicing flags combined with AND.
pub fn lfc(converted: &FeatureSequence, reference: &FeatureSequence, path: &DtwPath, layout: &FeatureLayout) -> Result<f64> {
    let m = reference.len();
    let mut sum = vec![0.0f64; m];
    let mut count = vec![0usize; m];
    let mut voiced = vec![true; m];
    for &(i, j) in &path.pairs {
        sum[j] += converted.get(layout.logf0(), i) as f64;
        count[j] += 1;
        voiced[j] &= converted.get(layout.vuv(), i) >= 0.5;
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for j in 0..m {
        if count[j] > 0 && voiced[j] && reference.get(layout.vuv(), j) >= 0.5 {
            x.push(sum[j] / count[j] as f64);
            y.push(reference.get(layout.logf0(), j) as f64);
        }
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two jointly voiced frames".into()));
    }
    pearson(&x, &y)
}

/// Regression slopes of converted index on reference index over every full
/// window of the path; `path.pairs` hold (converted, reference) indices.
pub fn local_slopes(path: &DtwPath) -> Vec<f64> {
    let half = LDR_WINDOW / 2;
    let pts = &path.pairs;
    if pts.len() < LDR_WINDOW {
        return Vec::new();
    }
    (half..pts.len() - half)
        .map(|j| {
            let w = &pts[j - half..=j + half];
            let n = w.len() as f64;
            let pm = w.iter().map(|&(_, p)| p as f64).sum::<f64>() / n;
            let qm = w.iter().map(|&(q, _)| q as f64).sum::<f64>() / n;
            let num: f64 = w.iter().map(|&(q, p)| (p as f64 - pm) * (q as f64 - qm)).sum();
            let den: f64 = w.iter().map(|&(_, p)| (p as f64 - pm).powi(2)).sum();
            num / den
        })
        .collect()
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Median local slope of an utterance; `None` when the path is shorter
/// than one window.
pub fn ldr(path: &DtwPath) -> Option<f64> {
    let s = local_slopes(path);
    let m = median(&s);
    if m.is_none() {
        log::warn!("alignment of {} points is shorter than the LDR window", path.pairs.len());
    }
    m
}

/// Mean of `|LDR − 1|` in percent.
pub fn ldr_deviation(ldrs: &[f64]) -> f64 {
    100.0 * ldrs.iter().map(|l| (l - 1.0).abs()).sum::<f64>() / ldrs.len().max(1) as f64
}

/// Per-feature weighted L1 per frame between equally long sequences.
pub fn weighted_l1_frames(a: &FeatureSequence, b: &FeatureSequence, layout: &FeatureLayout) -> Result<f64> {
    if a.dim() != b.dim() || a.len() != b.len() || a.dim() != layout.dim() || a.is_empty() {
        return Err(Error::Shape("weighted L1 needs equal unstacked sequences".into()));
    }
    let alpha = layout.loss_weights();
    let mut s = 0.0;
    for t in 0..a.len() {
        for (c, w) in alpha.iter().enumerate() {
            s += (w * (a.get(c, t) - b.get(c, t)).abs()) as f64;
        }
    }
    Ok(s / a.len() as f64)
}

/// Per-feature weighted L1 per path point between DTW-aligned sequences.
pub fn aligned_weighted_l1(converted: &FeatureSequence, reference: &FeatureSequence, layout: &FeatureLayout) -> Result<f64> {
    let path = align(converted, reference, layout)?;
    let alpha = layout.loss_weights();
    let mut s = 0.0;
    for &(i, j) in &path.pairs {
        for (c, w) in alpha.iter().enumerate() {
            s += (w * (converted.get(c, i) - reference.get(c, j)).abs()) as f64;
        }
    }
    Ok(s / path.pairs.len() as f64)
}

/// Mean with a normal-approximation 95% interval half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, ci95, count: n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub id: String,
    pub mcd: f64,
    pub lfc: Option<f64>,
    pub ldr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub utterances: Vec<UtteranceScores>,
    pub mcd: Summary,
    pub lfc: Summary,
    /// Per-utterance `|LDR − 1|·100`.
    pub ldr_deviation: Summary,
}

pub fn score_utterance(id: &str, converted: &FeatureSequence, reference: &FeatureSequence, layout: &FeatureLayout) -> Result<UtteranceScores> {
    let path = align(converted, reference, layout)?;
    let lfc = match lfc(converted, reference, &path, layout) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{id}: no log-F0 correlation ({e})");
            None
        }
    };
    Ok(UtteranceScores {
        id: id.to_string(),
        mcd: utterance_mcd(converted, reference, &path, layout),
        lfc,
        ldr: ldr(&path),
    })
}

impl EvaluationReport {
    pub fn from_scores(utterances: Vec<UtteranceScores>) -> Self {
        let mcd: Vec<f64> = utterances.iter().map(|u| u.mcd).collect();
        let lfc: Vec<f64> = utterances.iter().filter_map(|u| u.lfc).collect();
        let dev: Vec<f64> = utterances.iter().filter_map(|u| u.ldr).map(|l| 100.0 * (l - 1.0).abs()).collect();
        EvaluationReport {
            mcd: Summary::of(&mcd),
            lfc: Summary::of(&lfc),
            ldr_deviation: Summary::of(&dev),
            utterances,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
