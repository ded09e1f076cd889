use std::path::{Path, PathBuf};

use clap::Args;
use convs2s::config::{ModelSection, RunConfig};
use convs2s::corpus::{generate, Manifest, Split, SyntheticOptions, SyntheticSpec};
use convs2s::features::FeatureSequence;
use convs2s::kernel::{grad_check_params, GradCheckOptions};
use convs2s::losses::channel_weights;
use convs2s::model::{Mode, Model, Pass};
use convs2s::pipeline::{self, ConversionJob};
use convs2s::trainer::{batch_forward, make_batch, restore_model, BatchItem, Checkpoint, ParallelSet};
use convs2s::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plot;
use crate::{Common, OnOff, Speakers};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] convs2s::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheck(Real),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "argument",
            CliError::GradCheck(_) => "numeric",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "argument" => 2,
            "shape" | "format" => 3,
            "speaker" => 4,
            "mode" | "checkpoint" => 5,
            "numeric" | "divergence" => 6,
            "io" => 7,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(convs2s::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(convs2s::Error::from)?;
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Loads `--config` (or `base`, or mode defaults), then applies environment
/// overrides and the global flags.
fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let explicit = common.config.is_some() || base.is_some();
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::for_mode(common.mode.unwrap_or(Mode::ManyToMany)),
    };
    cfg = cfg.with_env()?;
    if let Some(m) = common.mode {
        if m != cfg.model.mode {
            if explicit {
                cfg.model.mode = m;
            } else {
                cfg.model = ModelSection {
                    seed: cfg.model.seed,
                    ..ModelSection::for_mode(m)
                };
            }
        }
    }
    if let Some(s) = common.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_pair(cfg: &mut RunConfig, speakers: &Speakers) {
    if let Some(s) = &speakers.speaker_src {
        cfg.pair.source = s.clone();
    }
    if let Some(s) = &speakers.speaker_trg {
        cfg.pair.target = s.clone();
    }
}

/// Loads the manifest named by `flag` or the configuration, splitting it by
/// sentence when it carries no evaluation split yet.
fn load_manifest(cfg: &mut RunConfig, flag: &Option<PathBuf>) -> Result<Manifest> {
    let path = flag.clone().unwrap_or_else(|| cfg.paths.manifest.clone());
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage("no manifest given (use --manifest or [paths] manifest)".into()));
    }
    let m = Manifest::load(&path)?;
    cfg.paths.manifest = path;
    if m.sentences(Some(Split::Eval)).is_empty() {
        Ok(m.split(cfg.split.train_fraction, cfg.split.seed)?)
    } else {
        Ok(m)
    }
}

#[derive(Args)]
pub struct GenCorpus {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Full corpus description (JSON); the size flags are ignored when set.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

pub fn gen_corpus(common: &Common, a: GenCorpus) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| convs2s::Error::Format {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            spec.validate()?;
            spec
        }
        None => {
            let d = SyntheticOptions::default();
            SyntheticSpec::random(&SyntheticOptions {
                speakers: a.speakers.unwrap_or(d.speakers),
                sentences: a.sentences.unwrap_or(d.sentences),
                min_frames: a.min_frames.unwrap_or(d.min_frames),
                max_frames: a.max_frames.unwrap_or(d.max_frames),
                noise: a.noise.unwrap_or(d.noise),
                n_mcc: cfg.features.n_mcc,
                frame_period_ms: cfg.features.frame_period_ms,
                seed: common.seed.unwrap_or(d.seed),
                ..d
            })?
        }
    };
    if spec.n_mcc != cfg.features.n_mcc || spec.frame_period_ms != cfg.features.frame_period_ms {
        return Err(CliError::Usage(format!(
            "corpus has {} MCCs at {} ms, configuration expects {} at {} ms",
            spec.n_mcc, spec.frame_period_ms, cfg.features.n_mcc, cfg.features.frame_period_ms
        )));
    }
    create_dir(&a.out)?;
    let m = generate(&spec, &a.out)?;
    let dir = a.out.canonicalize().map_err(|e| io(&a.out, e))?;
    cfg.paths.manifest = dir.join("manifest.json");
    cfg.save(&a.out.join("config.toml"))?;
    println!(
        "wrote {} utterances of {} sentences by {} speakers to {}",
        m.entries.len(),
        spec.sentences,
        spec.speakers.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct Stats {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for the profiles and a statistics summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct SpeakerStats {
    name: String,
    train_utterances: usize,
    eval_utterances: usize,
    frames: usize,
    voiced_fraction: f64,
    mean_logf0: f64,
    std_logf0: f64,
}

pub fn stats(common: &Common, a: Stats) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    let m = load_manifest(&mut cfg, &a.manifest)?;
    let layout = m.layout();
    let profiles = pipeline::speaker_profiles(&m)?;
    let mut rows = Vec::new();
    for (k, name) in m.speakers.iter().enumerate() {
        let count = |split| m.sentences(Some(split)).iter().filter(|s| m.entry(s, name).is_ok()).count();
        let (mut frames, mut voiced) = (0usize, 0usize);
        for s in m.sentences(Some(Split::Train)) {
            if m.entry(&s, name).is_ok() {
                let f = m.load_features(&s, name)?;
                frames += f.len();
                voiced += (0..f.len()).filter(|&t| f.is_voiced(&layout, t)).count();
            }
        }
        let p = &profiles[k];
        rows.push(SpeakerStats {
            name: name.clone(),
            train_utterances: count(Split::Train),
            eval_utterances: count(Split::Eval),
            frames,
            voiced_fraction: voiced as f64 / frames.max(1) as f64,
            mean_logf0: p.mean[layout.logf0()] as f64,
            std_logf0: p.std[layout.logf0()] as f64,
        });
    }
    println!("speaker  train  eval  frames  voiced  logF0 mean  logF0 std");
    for r in &rows {
        println!(
            "{:<8} {:>5} {:>5} {:>7} {:>7.3} {:>11.4} {:>10.4}",
            r.name, r.train_utterances, r.eval_utterances, r.frames, r.voiced_fraction, r.mean_logf0, r.std_logf0
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        pipeline::save_profiles(out, &profiles)?;
        write_json(&out.join("stats.json"), &rows)?;
        cfg.save(&out.join("config.toml"))?;
    }
    Ok(())
}

#[derive(Args)]
pub struct Train {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint directory; defaults to [paths] checkpoint_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    speakers: Speakers,
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Load a checkpoint even when its configuration hash differs.
    #[arg(long)]
    force: bool,
}

pub fn train(common: &Common, a: Train) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    apply_pair(&mut cfg, &a.speakers);
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
    if out.as_os_str().is_empty() {
        return Err(CliError::Usage("no output directory (use --out or [paths] checkpoint_dir)".into()));
    }
    let m = load_manifest(&mut cfg, &a.manifest)?;
    pipeline::pair_indices(&cfg, &m)?;
    cfg.paths.checkpoint_dir = out.clone();
    create_dir(&out)?;
    cfg.save(&out.join("config.toml"))?;
    let profiles = pipeline::speaker_profiles(&m)?;
    pipeline::save_profiles(&out, &profiles)?;
    let set = pipeline::training_set(&cfg, &m, &profiles)?;
    let mut trainer = pipeline::build_trainer(&cfg, &m)?;
    if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p, Some(&trainer.config_hash), a.force)?;
        trainer.restore(&ck)?;
        log::info!("resumed from {} at iteration {}", p.display(), trainer.iteration);
    }
    log::info!(
        "training {} model with {} parameters for {} iterations",
        cfg.model.mode,
        trainer.model.param_count(),
        cfg.train.iterations
    );
    let result = trainer.train(&set, Some(&out));
    write_json(&out.join("history.json"), &trainer.history)?;
    result?;
    if let Some(last) = trainer.history.last() {
        println!("iteration {} loss {:.5}", last.iteration + 1, last.loss.total);
    }
    println!("checkpoint {}", out.join("final.ckpt").display());
    Ok(())
}

#[derive(Args)]
pub struct Convert {
    /// Training output directory (configuration, profiles, checkpoints).
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint file; defaults to final.ckpt in the model directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to [paths] output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    speakers: Speakers,
    #[arg(long, value_enum)]
    forward_attention: Option<OnOff>,
    /// Only this evaluation sentence.
    #[arg(long)]
    sentence: Option<String>,
    /// Convert one raw feature file instead of the evaluation split.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Convert each speaker to itself instead of to the others.
    #[arg(long)]
    same_speaker: bool,
    #[arg(long)]
    force: bool,
}

fn load_trained(cfg: &RunConfig, dir: &Path, checkpoint: &Option<PathBuf>, force: bool) -> Result<(Model, Vec<convs2s::features::SpeakerProfile>)> {
    let profiles = pipeline::load_profiles(dir)?;
    let mc = cfg.model.resolve(cfg.features.model_dim(), profiles.len());
    let mut model = Model::new(mc, cfg.model.seed)?;
    let path = checkpoint.clone().unwrap_or_else(|| dir.join("final.ckpt"));
    let ck = Checkpoint::load(&path, Some(&cfg.training_hash()), force)?;
    restore_model(&mut model, &ck)?;
    Ok((model, profiles))
}

pub fn convert(common: &Common, a: Convert) -> Result<()> {
    let base = RunConfig::load(&a.model.join("config.toml"))?;
    let mut cfg = resolve(common, Some(base))?;
    if let Some(f) = a.forward_attention {
        cfg.inference.forward_attention = f == OnOff::On;
    }
    let (mut model, profiles) = load_trained(&cfg, &a.model, &a.checkpoint, a.force)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    if out.as_os_str().is_empty() {
        return Err(CliError::Usage("no output directory (use --out or [paths] output_dir)".into()));
    }
    cfg.paths.output_dir = out.clone();
    create_dir(&out)?;

    let period = cfg.reduced_period_ms();
    let mut written = Vec::new();
    let mut save = |stem: &str, c: &pipeline::Converted| -> Result<()> {
        c.features.write_fseq(&out.join(format!("{stem}.fseq")))?;
        if let Some(conv) = &c.conversion {
            plot::write_pgm(&conv.attention, &out.join(format!("{stem}_attention.pgm"))).map_err(|e| io(&out, e))?;
            plot::to_sequence(&conv.attention, period)?
                .write_fseq(&out.join(format!("{stem}_attention.fseq")))?;
            log::info!("{stem}: {} frames, {} decoding steps", c.features.len(), conv.peaks.len() - 1);
        } else {
            log::info!("{stem}: {} frames", c.features.len());
        }
        written.push(stem.to_string());
        Ok(())
    };

    if let Some(input) = &a.input {
        let (Some(src), Some(trg)) = (&a.speakers.speaker_src, &a.speakers.speaker_trg) else {
            return Err(CliError::Usage("--input needs --speaker-src and --speaker-trg".into()));
        };
        let (s, t) = (pipeline::profile_index(&profiles, src)?, pipeline::profile_index(&profiles, trg)?);
        let raw = FeatureSequence::read_fseq(input)?;
        let c = pipeline::convert_raw(&mut model, &cfg, &raw, &profiles, s, t)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
        save(&format!("{stem}_{src}_to_{trg}"), &c)?;
    } else {
        let m = load_manifest(&mut cfg, &a.manifest)?;
        for name in [&a.speakers.speaker_src, &a.speakers.speaker_trg].into_iter().flatten() {
            m.speaker_index(name)?;
        }
        if cfg.model.mode == Mode::Pairwise {
            apply_pair(&mut cfg, &a.speakers);
        }
        let jobs: Vec<ConversionJob> = pipeline::evaluation_jobs(&cfg, &m, a.same_speaker)
            .into_iter()
            .filter(|j| a.sentence.as_ref().is_none_or(|s| &j.sentence == s))
            .filter(|j| a.speakers.speaker_src.as_ref().is_none_or(|s| &j.source == s))
            .filter(|j| a.speakers.speaker_trg.as_ref().is_none_or(|s| &j.target == s))
            .collect();
        if jobs.is_empty() {
            return Err(CliError::Usage("no utterance matches the requested conversion".into()));
        }
        for job in &jobs {
            let c = pipeline::run_job(&mut model, &cfg, &m, &profiles, job)?;
            let name = job.file_name();
            save(name.trim_end_matches(".fseq"), &c)?;
        }
        write_json(&out.join("jobs.json"), &jobs)?;
    }
    cfg.save(&out.join("config.toml"))?;
    println!("converted {} utterances into {}", written.len(), out.display());
    Ok(())
}

#[derive(Args)]
pub struct Evaluate {
    /// Output directory of `convert`.
    #[arg(long)]
    converted: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report directory; defaults to the converted directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn evaluate(common: &Common, a: Evaluate) -> Result<()> {
    let saved = a.converted.join("config.toml");
    let base = if common.config.is_none() && saved.exists() {
        Some(RunConfig::load(&saved)?)
    } else {
        None
    };
    let mut cfg = resolve(common, base)?;
    let m = load_manifest(&mut cfg, &a.manifest)?;
    let jobs_path = a.converted.join("jobs.json");
    let text = std::fs::read_to_string(&jobs_path).map_err(|e| io(&jobs_path, e))?;
    let jobs: Vec<ConversionJob> = serde_json::from_str(&text).map_err(|e| convs2s::Error::Format {
        path: jobs_path.clone(),
        reason: e.to_string(),
    })?;
    let converted = jobs
        .into_iter()
        .map(|j| {
            let seq = FeatureSequence::read_fseq(&a.converted.join(j.file_name()))?;
            Ok((j, seq))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = pipeline::evaluate(&m, &converted)?;
    let out = a.out.clone().unwrap_or_else(|| a.converted.clone());
    create_dir(&out)?;
    std::fs::write(out.join("report.json"), report.to_json()?).map_err(|e| io(&out, e))?;
    cfg.save(&out.join("config.toml"))?;
    println!("utterances     {}", report.utterances.len());
    println!("MCD [dB]       {:.4} ± {:.4}", report.mcd.mean, report.mcd.ci95);
    println!("LFC            {:.4} ± {:.4} ({} utterances)", report.lfc.mean, report.lfc.ci95, report.lfc.count);
    println!(
        "LDR dev. [%]   {:.4} ± {:.4} ({} utterances)",
        report.ldr_deviation.mean, report.ldr_deviation.ci95, report.ldr_deviation.count
    );
    Ok(())
}

#[derive(Args)]
pub struct Gradcheck {
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    /// Frames of the shorter test utterance.
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Speakers of the conditioned modes.
    #[arg(long, default_value_t = 3)]
    speakers: usize,
}

pub fn gradcheck(common: &Common, a: Gradcheck) -> Result<()> {
    let cfg = resolve(common, None)?;
    if a.frames < 2 || a.speakers < 2 || a.coords == 0 {
        return Err(CliError::Usage("need at least two frames, two speakers and one coordinate".into()));
    }
    let dim = cfg.features.model_dim();
    let mc = cfg.model.resolve(dim, a.speakers);
    let mut model = Model::new(mc, cfg.model.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    // move affine and embedding parameters off their initial values
    for p in model.store.iter_mut() {
        if p.name.contains("norm") || p.name.contains("embed") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let mut set = ParallelSet::new(dim);
    for (i, len) in [a.frames, a.frames + 2].into_iter().enumerate() {
        for k in 0..a.speakers {
            let data = (0..dim * (len + k % 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
            set.insert(&format!("s{i}"), k, FeatureSequence::new(dim, len + k % 2, cfg.reduced_period_ms(), data)?)?;
        }
    }
    let items = if cfg.model.mode == Mode::Pairwise {
        vec![item("s0", 0, 1), item("s1", 0, 1)]
    } else {
        vec![item("s0", 0, 1), item("s1", 1, 1)]
    };
    let batch = make_batch(&set, &items)?;
    let weights = channel_weights(&cfg.features.layout().loss_weights(), cfg.features.reduction);
    let losses = cfg.losses.clone();
    let opts = GradCheckOptions {
        max_coords: a.coords,
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let tensors = model.store.len();
    let err = grad_check_params(
        &mut model,
        |m| &mut m.store,
        |m, tape| {
            let mut pass = Pass::train(ChaCha8Rng::seed_from_u64(1));
            Ok(batch_forward(m, tape, &batch, &mut pass, &losses, &weights)?.loss)
        },
        &opts,
    )?;
    println!(
        "{} model, {} parameter tensors, {} coordinates each: max relative error {err:.3e}",
        cfg.model.mode, tensors, a.coords
    );
    if err < 1e-4 {
        Ok(())
    } else {
        Err(CliError::GradCheck(err))
    }
}

fn item(sentence: &str, src: usize, trg: usize) -> BatchItem {
    BatchItem {
        sentence: sentence.into(),
        src,
        trg,
    }
}

#[derive(Args)]
pub struct PlotAttention {
    /// Raw attention matrix written by `convert`.
    #[arg(long)]
    input: PathBuf,
    /// Image file (binary PGM).
    #[arg(long)]
    out: PathBuf,
}

pub fn plot_attention(_common: &Common, a: PlotAttention) -> Result<()> {
    let seq = FeatureSequence::read_fseq(&a.input)?;
    let att = plot::from_sequence(&seq);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    plot::write_pgm(&att, &a.out).map_err(|e| io(&a.out, e))?;
    println!("{}×{} attention matrix written to {}", att.rows, att.cols, a.out.display());
    Ok(())
}
