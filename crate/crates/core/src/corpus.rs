//! Synthetic parallel corpora with known speaker transforms and time warps,
//! manifests and sentence-level splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureLayout, FeatureSequence};
use crate::metrics::DtwPath;
use crate::{Error, Real, Result};

/// Sinusoidal components per latent channel.
pub const COMPONENTS: usize = 4;
/// Shortest component period in canonical frames.
pub const MIN_PERIOD: f64 = 20.0;

/// How one speaker renders the shared latent content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTransform {
    pub name: String,
    /// `n_mcc × latent_dim`, row-major.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub f0_base: f64,
    pub f0_range: f64,
    /// Duration multiplier relative to the canonical sentence length.
    pub tempo: f64,
    pub aperiodicity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub speakers: Vec<SpeakerTransform>,
    pub sentences: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub latent_dim: usize,
    pub n_mcc: usize,
    pub noise: f64,
    pub frame_period_ms: f64,
    pub seed: u64,
}

/// Knobs for [`SyntheticSpec::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub speakers: usize,
    pub sentences: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub latent_dim: usize,
    pub n_mcc: usize,
    pub noise: f64,
    pub frame_period_ms: f64,
    /// Tempo factors are drawn from `[1/tempo_spread, tempo_spread]`.
    pub tempo_spread: f64,
    /// Size of the per-speaker deviation from the shared rendering matrix.
    pub speaker_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            speakers: 3,
            sentences: 40,
            min_frames: 60,
            max_frames: 90,
            latent_dim: 4,
            n_mcc: 28,
            noise: 0.05,
            frame_period_ms: 8.0,
            tempo_spread: 1.25,
            speaker_spread: 0.6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Draws speaker transforms around a shared rendering matrix.
    pub fn random(o: &SyntheticOptions) -> Result<Self> {
        if o.tempo_spread < 1.0 {
            return Err(Error::InvalidArgument("tempo spread must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (o.latent_dim as f64).sqrt();
        let shared: Vec<f64> = (0..o.n_mcc * o.latent_dim).map(|_| scale * normal.sample(&mut rng)).collect();
        let ln = o.tempo_spread.ln();
        let speakers = (0..o.speakers)
            .map(|k| SpeakerTransform {
                name: format!("spk{k}"),
                matrix: shared
                    .iter()
                    .map(|s| s + o.speaker_spread * scale * normal.sample(&mut rng))
                    .collect(),
                offset: (0..o.n_mcc).map(|_| 0.5 * normal.sample(&mut rng)).collect(),
                f0_base: rng.random_range(4.4..5.6),
                f0_range: rng.random_range(0.1..0.3),
                tempo: if ln > 0.0 { rng.random_range(-ln..ln).exp() } else { 1.0 },
                aperiodicity: rng.random_range(0.1..0.5),
            })
            .collect();
        let spec = SyntheticSpec {
            speakers,
            sentences: o.sentences,
            min_frames: o.min_frames,
            max_frames: o.max_frames,
            latent_dim: o.latent_dim,
            n_mcc: o.n_mcc,
            noise: o.noise,
            frame_period_ms: o.frame_period_ms,
            seed: o.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { n_mcc: self.n_mcc }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.speakers.is_empty() || self.sentences == 0 {
            return bad("a corpus needs speakers and sentences".into());
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return bad(format!("bad frame range {}..{}", self.min_frames, self.max_frames));
        }
        if self.latent_dim < 2 || self.n_mcc < self.latent_dim {
            return bad("latent dimension must be at least 2 and at most the MCC count".into());
        }
        if !(self.noise >= 0.0) || !(self.frame_period_ms > 0.0) {
            return bad("noise must be non-negative and the frame period positive".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.speakers {
            if !names.insert(&s.name) {
                return bad(format!("duplicate speaker {}", s.name));
            }
            if !(s.tempo > 0.0) || !s.tempo.is_finite() {
                return bad(format!("speaker {} has non-positive tempo", s.name));
            }
            if s.matrix.len() != self.n_mcc * self.latent_dim || s.offset.len() != self.n_mcc {
                return bad(format!("speaker {} transform has the wrong size", s.name));
            }
            if !full_column_rank(&s.matrix, self.n_mcc, self.latent_dim) {
                return bad(format!("speaker {} transform is not invertible", s.name));
            }
        }
        Ok(())
    }

    fn sentence_rng(&self, s: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s as u64 + 1);
        rng
    }

    /// Frame counts of sentence `s`: canonical, then per speaker.
    fn lengths(&self, canonical: usize) -> Vec<usize> {
        self.speakers
            .iter()
            .map(|sp| ((canonical as f64 * sp.tempo).round() as usize).max(2))
            .collect()
    }

    /// Renders sentence `s` for every speaker.
    pub fn render(&self, s: usize) -> Result<Vec<FeatureSequence>> {
        let mut rng = self.sentence_rng(s);
        let canonical = rng.random_range(self.min_frames..=self.max_frames);
        let comps: Vec<[(f64, f64, f64); COMPONENTS]> = (0..self.latent_dim)
            .map(|_| {
                std::array::from_fn(|_| {
                    let period = rng.random_range(MIN_PERIOD..MIN_PERIOD + 0.6 * canonical as f64);
                    (rng.random_range(0.3..0.7), period, rng.random_range(0.0..std::f64::consts::TAU))
                })
            })
            .collect();
        let latent = |u: f64| -> Vec<f64> {
            comps
                .iter()
                .map(|cs| cs.iter().map(|(a, p, ph)| a * (std::f64::consts::TAU * u / p + ph).sin()).sum())
                .collect()
        };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let layout = self.layout();
        let mut out = Vec::with_capacity(self.speakers.len());
        for (sp, n) in self.speakers.iter().zip(self.lengths(canonical)) {
            let mut seq = FeatureSequence::zeros(layout.dim(), n, self.frame_period_ms);
            for t in 0..n {
                let u = canonical_time(t, n, canonical);
                let z = latent(u);
                for c in 0..self.n_mcc {
                    let row = &sp.matrix[c * self.latent_dim..(c + 1) * self.latent_dim];
                    let v: f64 = row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>() + sp.offset[c];
                    seq.set(c, t, (v + self.noise * normal.sample(&mut rng)) as Real);
                }
                let voiced = z[self.latent_dim - 1] > -0.9;
                let f0 = sp.f0_base + sp.f0_range * z[0] + self.noise * 0.1 * normal.sample(&mut rng);
                seq.set(layout.logf0(), t, if voiced { f0 as Real } else { 0.0 });
                seq.set(layout.aperiodicity(), t, sp.aperiodicity as Real);
                seq.set(layout.vuv(), t, if voiced { 1.0 } else { 0.0 });
            }
            out.push(seq);
        }
        Ok(out)
    }

    /// Frame correspondence between two renditions of sentence `s`.
    pub fn oracle_warp(&self, s: usize, from: usize, to: usize) -> DtwPath {
        let mut rng = self.sentence_rng(s);
        let canonical = rng.random_range(self.min_frames..=self.max_frames);
        let lens = self.lengths(canonical);
        linear_warp(lens[from], lens[to])
    }
}

/// Canonical time of frame `t` of an `n`-frame rendition.
fn canonical_time(t: usize, n: usize, canonical: usize) -> f64 {
    t as f64 * (canonical - 1) as f64 / (n - 1).max(1) as f64
}

/// Monotone path hugging the straight line from (0,0) to (n−1,m−1).
pub fn linear_warp(n: usize, m: usize) -> DtwPath {
    let target = |i: usize| i as f64 * (m - 1) as f64 / (n - 1).max(1) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut pairs = vec![(0, 0)];
    while (i, j) != (n - 1, m - 1) {
        let mut best: Option<((usize, usize), f64)> = None;
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            let (a, b) = (i + di, j + dj);
            if a < n && b < m {
                let dev = (b as f64 - target(a)).abs();
                if best.is_none_or(|(_, d)| dev < d - 1e-12) {
                    best = Some(((a, b), dev));
                }
            }
        }
        (i, j) = best.expect("a step always exists before the corner").0;
        pairs.push((i, j));
    }
    DtwPath { pairs, cost: 0.0 }
}

fn full_column_rank(m: &[f64], rows: usize, cols: usize) -> bool {
    // Cholesky of the Gram matrix succeeds iff the columns are independent
    let mut g = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in 0..cols {
            g[a * cols + b] = (0..rows).map(|r| m[r * cols + a] * m[r * cols + b]).sum();
        }
    }
    let scale = (0..cols).map(|a| g[a * cols + a]).fold(0.0f64, f64::max).max(1e-300);
    for k in 0..cols {
        let d = g[k * cols + k] - (0..k).map(|p| g[k * cols + p].powi(2)).sum::<f64>();
        if d <= 1e-10 * scale {
            return false;
        }
        let d = d.sqrt();
        g[k * cols + k] = d;
        for i in k + 1..cols {
            let v = g[i * cols + k] - (0..k).map(|p| g[i * cols + p] * g[k * cols + p]).sum::<f64>();
            g[i * cols + k] = v / d;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sentence: String,
    pub speaker: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpEntry {
    pub sentence: String,
    pub from: String,
    pub to: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub speakers: Vec<String>,
    pub frame_period_ms: f64,
    pub n_mcc: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub warps: Vec<WarpEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct WarpFile {
    pairs: Vec<(usize, usize)>,
}

pub fn save_warp(path: &Path, warp: &DtwPath) -> Result<()> {
    let text = serde_json::to_string(&WarpFile { pairs: warp.pairs.clone() })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_warp(path: &Path) -> Result<DtwPath> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let w: WarpFile = serde_json::from_str(&text)?;
    Ok(DtwPath { pairs: w.pairs, cost: 0.0 })
}

/// Writes every rendition, every ordered oracle warp and `manifest.json`
/// into `dir`; all sentences are tagged as training data.
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let io = |p: &Path, e| Error::io(p, e);
    for sub in ["features", "warps"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    let mut entries = Vec::new();
    let mut warps = Vec::new();
    for s in 0..spec.sentences {
        let sentence = format!("s{s:04}");
        for (sp, seq) in spec.speakers.iter().zip(spec.render(s)?) {
            let rel = format!("features/{}_{sentence}.fseq", sp.name);
            seq.write_fseq(&dir.join(&rel))?;
            entries.push(ManifestEntry {
                sentence: sentence.clone(),
                speaker: sp.name.clone(),
                path: rel,
                split: Split::Train,
            });
        }
        for (a, from) in spec.speakers.iter().enumerate() {
            for (b, to) in spec.speakers.iter().enumerate() {
                if a == b {
                    continue;
                }
                let rel = format!("warps/{sentence}_{}_{}.json", from.name, to.name);
                save_warp(&dir.join(&rel), &spec.oracle_warp(s, a, b))?;
                warps.push(WarpEntry {
                    sentence: sentence.clone(),
                    from: from.name.clone(),
                    to: to.name.clone(),
                    path: rel,
                });
            }
        }
    }
    let manifest = Manifest {
        speakers: spec.speakers.iter().map(|s| s.name.clone()).collect(),
        frame_period_ms: spec.frame_period_ms,
        n_mcc: spec.n_mcc,
        entries,
        warps,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    let text = serde_json::to_string_pretty(spec)?;
    let p = dir.join("spec.json");
    std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    Ok(manifest)
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<&str> = self.speakers.iter().map(String::as_str).collect();
        let mut seen = BTreeSet::new();
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if !known.contains(e.speaker.as_str()) {
                return Err(Error::UnknownSpeaker(e.speaker.clone()));
            }
            if !seen.insert((&e.sentence, &e.speaker)) {
                return Err(Error::InvalidArgument(format!(
                    "sentence {} listed twice for {}",
                    e.sentence, e.speaker
                )));
            }
            if *splits.entry(&e.sentence).or_insert(e.split) != e.split {
                return Err(Error::InvalidArgument(format!("sentence {} spans both splits", e.sentence)));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { n_mcc: self.n_mcc }
    }

    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpeaker(name.to_string()))
    }

    /// Sorted sentence ids, optionally restricted to a split.
    pub fn sentences(&self, split: Option<Split>) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| &e.sentence)
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn entry(&self, sentence: &str, speaker: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.sentence == sentence && e.speaker == speaker)
            .ok_or_else(|| Error::UnknownSpeaker(format!("no utterance of {sentence} by {speaker}")))
    }

    pub fn load_features(&self, sentence: &str, speaker: &str) -> Result<FeatureSequence> {
        FeatureSequence::read_fseq(&self.root.join(&self.entry(sentence, speaker)?.path))
    }

    pub fn load_warp(&self, sentence: &str, from: &str, to: &str) -> Result<DtwPath> {
        let w = self
            .warps
            .iter()
            .find(|w| w.sentence == sentence && w.from == from && w.to == to)
            .ok_or_else(|| Error::InvalidArgument(format!("no oracle warp {sentence} {from}→{to}")))?;
        load_warp(&self.root.join(&w.path))
    }

    /// Sentence-level split: a shuffled `fraction` of sentences (rounded) is
    /// tagged for training, the rest for evaluation.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<Manifest> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train fraction {fraction} must lie in (0, 1)")));
        }
        let mut ids = self.sentences(None);
        let n_train = (fraction * ids.len() as f64).round() as usize;
        if n_train == 0 || n_train >= ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sentences are too few for a {fraction} split",
                ids.len()
            )));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train: BTreeSet<&String> = ids[..n_train].iter().collect();
        let mut out = self.clone();
        for e in &mut out.entries {
            e.split = if train.contains(&e.sentence) { Split::Train } else { Split::Eval };
        }
        Ok(out)
    }
}
