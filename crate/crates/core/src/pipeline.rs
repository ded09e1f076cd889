//! End-to-end steps shared by the command line and the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Manifest, Split};
use crate::features::{compute_speaker_stats, FeatureLayout, FeatureSequence, SpeakerProfile};
use crate::inference::{convert, convert_realtime, moment_match, Conversion};
use crate::kernel::Tape;
use crate::losses::{channel_weights, guided_weight_matrix};
use crate::metrics::{aligned_weighted_l1, score_utterance, DtwPath, EvaluationReport};
use crate::model::{Mode, Model, Pass};
use crate::trainer::{batch_forward, make_batch, BatchItem, ParallelSet, Trainer};
use crate::{Error, Real, Result};

/// Per-speaker statistics over the training split, log F0 interpolated first.
pub fn speaker_profiles(manifest: &Manifest) -> Result<Vec<SpeakerProfile>> {
    let layout = manifest.layout();
    let train = manifest.sentences(Some(Split::Train));
    manifest
        .speakers
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let seqs = train
                .iter()
                .filter(|s| manifest.entry(s, name).is_ok())
                .map(|s| manifest.load_features(s, name)?.interpolate_logf0(&layout))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FeatureSequence> = seqs.iter().collect();
            compute_speaker_stats(k, name, &refs, &layout)
        })
        .collect()
}

pub const PROFILES_FILE: &str = "profiles.json";

/// Writes every speaker profile, in index order, into `dir`.
pub fn save_profiles(dir: &Path, profiles: &[SpeakerProfile]) -> Result<()> {
    let path = dir.join(PROFILES_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(profiles)?).map_err(|e| Error::io(&path, e))
}

pub fn load_profiles(dir: &Path) -> Result<Vec<SpeakerProfile>> {
    let path = dir.join(PROFILES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let profiles: Vec<SpeakerProfile> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if profiles.iter().enumerate().any(|(k, p)| p.id != k) {
        return Err(Error::Format {
            path,
            reason: "profiles are not in speaker order".into(),
        });
    }
    Ok(profiles)
}

/// Index of the profile called `name`.
pub fn profile_index(profiles: &[SpeakerProfile], name: &str) -> Result<usize> {
    profiles
        .iter()
        .position(|p| p.name == name)
        .ok_or_else(|| Error::UnknownSpeaker(name.to_string()))
}

/// Interpolates log F0, normalises with `profile` and stacks by `r`.
pub fn prepare(raw: &FeatureSequence, profile: &SpeakerProfile, layout: &FeatureLayout, r: usize) -> Result<FeatureSequence> {
    raw.interpolate_logf0(layout)?.normalize(profile, layout)?.stack_reduce(r)
}

/// Model-ready utterances of one split. `speakers` limits the set to the
/// given indices.
pub fn parallel_set(
    manifest: &Manifest,
    profiles: &[SpeakerProfile],
    split: Split,
    r: usize,
    speakers: Option<&[usize]>,
) -> Result<ParallelSet> {
    let layout = manifest.layout();
    let mut set = ParallelSet::new(layout.dim() * r);
    for s in manifest.sentences(Some(split)) {
        for (k, name) in manifest.speakers.iter().enumerate() {
            if speakers.is_some_and(|sp| !sp.contains(&k)) || manifest.entry(&s, name).is_err() {
                continue;
            }
            let raw = manifest.load_features(&s, name)?;
            set.insert(&s, k, prepare(&raw, &profiles[k], &layout, r)?)?;
        }
    }
    Ok(set)
}

pub fn pair_indices(cfg: &RunConfig, manifest: &Manifest) -> Result<(usize, usize)> {
    Ok((manifest.speaker_index(&cfg.pair.source)?, manifest.speaker_index(&cfg.pair.target)?))
}

/// Freshly initialised model for `cfg` and the manifest's speakers.
pub fn build_model(cfg: &RunConfig, manifest: &Manifest) -> Result<Model> {
    let mc = cfg.model.resolve(cfg.features.model_dim(), manifest.speakers.len());
    Model::new(mc, cfg.model.seed)
}

pub fn build_trainer(cfg: &RunConfig, manifest: &Manifest) -> Result<Trainer> {
    if manifest.n_mcc != cfg.features.n_mcc {
        return Err(Error::Shape(format!(
            "corpus has {} MCCs, configuration expects {}",
            manifest.n_mcc, cfg.features.n_mcc
        )));
    }
    let model = build_model(cfg, manifest)?;
    let weights = channel_weights(&manifest.layout().loss_weights(), cfg.features.reduction);
    let mut t = Trainer::new(model, cfg.train_config(), weights, cfg.training_hash())?;
    t.pair = pair_indices(cfg, manifest)?;
    Ok(t)
}

/// Training utterances for `cfg`'s mode.
pub fn training_set(cfg: &RunConfig, manifest: &Manifest, profiles: &[SpeakerProfile]) -> Result<ParallelSet> {
    let pair = pair_indices(cfg, manifest)?;
    let only = [pair.0, pair.1];
    let speakers = (cfg.model.mode == Mode::Pairwise).then_some(&only[..]);
    parallel_set(manifest, profiles, Split::Train, cfg.features.reduction, speakers)
}

/// Converted features in the target speaker's raw feature space.
#[derive(Clone, Debug)]
pub struct Converted {
    pub features: FeatureSequence,
    /// Absent for streaming conversion.
    pub conversion: Option<Conversion>,
}

/// Converts a raw source utterance of speaker `src` to speaker `trg`.
pub fn convert_raw(
    model: &mut Model,
    cfg: &RunConfig,
    raw: &FeatureSequence,
    profiles: &[SpeakerProfile],
    src: usize,
    trg: usize,
) -> Result<Converted> {
    let layout = cfg.features.layout();
    let r = cfg.features.reduction;
    let profile = |k: usize| {
        profiles
            .get(k)
            .ok_or_else(|| Error::UnknownSpeaker(format!("speaker index {k} has no profile")))
    };
    let (ps, pt) = (profile(src)?, profile(trg)?);
    let x = prepare(raw, ps, &layout, r)?;
    let (y, conversion, frames) = if model.mode() == Mode::Realtime {
        let y = convert_realtime(model, &x, Some(src), Some(trg), cfg.inference.output)?;
        (y, None, Some(raw.len()))
    } else {
        let opts = cfg.inference.options(cfg.reduced_period_ms())?;
        let c = convert(model, &x, Some(src), Some(trg), &opts)?;
        (c.output.clone(), Some(c), None)
    };
    let y = y.unstack(r, frames)?;
    let features = if cfg.inference.moment_match {
        moment_match(&y, pt, &layout).or_else(|_| y.denormalize(pt, &layout))?
    } else {
        y.denormalize(pt, &layout)?
    };
    Ok(Converted { features, conversion })
}

/// One conversion of the evaluation plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionJob {
    pub sentence: String,
    pub source: String,
    pub target: String,
}

impl ConversionJob {
    pub fn file_name(&self) -> String {
        format!("{}_{}_to_{}.fseq", self.sentence, self.source, self.target)
    }
}

/// Every ordered speaker pair (or just the configured pair in pairwise mode)
/// of every evaluation sentence.
pub fn evaluation_jobs(cfg: &RunConfig, manifest: &Manifest, same_speaker: bool) -> Vec<ConversionJob> {
    let pairs: Vec<(String, String)> = if cfg.model.mode == Mode::Pairwise {
        vec![(cfg.pair.source.clone(), cfg.pair.target.clone())]
    } else {
        let sp = &manifest.speakers;
        sp.iter()
            .flat_map(|a| sp.iter().map(move |b| (a.clone(), b.clone())))
            .filter(|(a, b)| (a == b) == same_speaker)
            .collect()
    };
    manifest
        .sentences(Some(Split::Eval))
        .into_iter()
        .flat_map(|s| {
            pairs.iter().map(move |(a, b)| ConversionJob {
                sentence: s.clone(),
                source: a.clone(),
                target: b.clone(),
            })
        })
        .filter(|j| manifest.entry(&j.sentence, &j.source).is_ok() && manifest.entry(&j.sentence, &j.target).is_ok())
        .collect()
}

pub fn run_job(model: &mut Model, cfg: &RunConfig, manifest: &Manifest, profiles: &[SpeakerProfile], job: &ConversionJob) -> Result<Converted> {
    let raw = manifest.load_features(&job.sentence, &job.source)?;
    let src = manifest.speaker_index(&job.source)?;
    let trg = manifest.speaker_index(&job.target)?;
    convert_raw(model, cfg, &raw, profiles, src, trg)
}

/// Scores converted utterances against the manifest's reference renditions.
pub fn evaluate(manifest: &Manifest, converted: &[(ConversionJob, FeatureSequence)]) -> Result<EvaluationReport> {
    let layout = manifest.layout();
    let scores = converted
        .iter()
        .map(|(job, seq)| {
            let reference = manifest.load_features(&job.sentence, &job.target)?;
            score_utterance(&format!("{}:{}->{}", job.sentence, job.source, job.target), seq, &reference, &layout)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::from_scores(scores))
}

/// Weighted L1 between a conversion and the reference rendition after DTW.
pub fn conversion_error(manifest: &Manifest, job: &ConversionJob, converted: &FeatureSequence) -> Result<f64> {
    let reference = manifest.load_features(&job.sentence, &job.target)?;
    aligned_weighted_l1(converted, &reference, &manifest.layout())
}

/// Resamples `source` onto the frames of the warp's second sequence,
/// averaging every source frame mapped to the same output frame.
pub fn warp_frames(source: &FeatureSequence, warp: &DtwPath) -> Result<FeatureSequence> {
    let m = warp.pairs.last().map(|p| p.1 + 1).unwrap_or(0);
    if m == 0 || warp.pairs.iter().any(|&(i, _)| i >= source.len()) {
        return Err(Error::Shape("warp does not fit the source sequence".into()));
    }
    let mut out = FeatureSequence::zeros(source.dim(), m, source.frame_period_ms);
    let mut count = vec![0usize; m];
    for &(i, j) in &warp.pairs {
        count[j] += 1;
        for c in 0..source.dim() {
            let v = out.get(c, j) + source.get(c, i);
            out.set(c, j, v);
        }
    }
    for (j, &n) in count.iter().enumerate() {
        for c in 0..source.dim() {
            let v = out.get(c, j) / n.max(1) as Real;
            out.set(c, j, v);
        }
    }
    Ok(out)
}

/// Attention quality of teacher-forced evaluation passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Mean of the per-item diagonal attention loss.
    pub dal: f64,
    /// Mean column entropy in nats.
    pub entropy: f64,
    /// Mean per-item decoder plus reconstruction loss.
    pub l1: f64,
}

/// Runs the model in evaluation mode on each item separately and averages
/// attention measures over items.
pub fn attention_stats(trainer: &mut Trainer, set: &ParallelSet, items: &[BatchItem]) -> Result<AttentionStats> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no items to measure attention on".into()));
    }
    let weights = trainer.config.weights.clone();
    let mut acc = AttentionStats::default();
    for it in items {
        let batch = make_batch(set, std::slice::from_ref(it))?;
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let out = batch_forward(&mut trainer.model, &mut tape, &batch, &mut pass, &weights, &trainer.channel_weights)?;
        let a = tape.value(out.attention);
        let (_, n, m) = a.dims3()?;
        let guide = guided_weight_matrix(n, m, weights.nu);
        let dal: f64 = a.data().iter().zip(&guide).map(|(x, w)| (x * w) as f64).sum::<f64>() / (n * m) as f64;
        let mut entropy = 0.0;
        for col in 0..m {
            entropy -= (0..n)
                .map(|row| a.data()[row * m + col] as f64)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        acc.dal += dal;
        acc.entropy += entropy / m as f64;
        acc.l1 += out.breakdown.dec + out.breakdown.rec;
    }
    let k = items.len() as f64;
    Ok(AttentionStats {
        dal: acc.dal / k,
        entropy: acc.entropy / k,
        l1: acc.l1 / k,
    })
}

/// Trains according to `cfg`, writing checkpoints and the resolved
/// configuration into the configured checkpoint directory when set.
pub fn train(cfg: &RunConfig, manifest: &Manifest, dir: Option<&Path>) -> Result<(Trainer, Vec<SpeakerProfile>)> {
    let profiles = speaker_profiles(manifest)?;
    let set = training_set(cfg, manifest, &profiles)?;
    let mut trainer = build_trainer(cfg, manifest)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        cfg.save(&d.join("config.toml"))?;
        save_profiles(d, &profiles)?;
    }
    trainer.train(&set, dir)?;
    Ok((trainer, profiles))
}
