use convs2s::config::RunConfig;
use convs2s::inference::OutputSource;
use convs2s::model::Mode;
use convs2s::Error;

fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn defaults_carry_the_published_settings() {
    let c = RunConfig::for_mode(Mode::ManyToMany);
    assert_eq!((c.losses.rec, c.losses.dal, c.losses.oal, c.losses.iml), (1.0, 2000.0, 2000.0, 1.0));
    assert_eq!((c.losses.nu, c.losses.rho), (0.3, 0.3));
    assert_eq!(c.train.lr, 1.5e-4);
    assert_eq!(c.train.beta1, 0.9);
    assert_eq!(c.train.batch_size, 16);
    assert_eq!(c.features.reduction, 3);
    assert_eq!(c.features.n_mcc, 28);
    assert_eq!(c.reduced_period_ms(), 24.0);
    let fa = c.inference.options(c.reduced_period_ms()).unwrap();
    assert!(fa.forward.is_none());
    let mut on = c.clone();
    on.inference.forward_attention = true;
    let fa = on.inference.options(on.reduced_period_ms()).unwrap().forward.unwrap();
    assert_eq!((fa.back, fa.ahead), (7, 13));
}

#[test]
fn text_form_round_trips() {
    for mode in [Mode::Pairwise, Mode::ManyToMany, Mode::AnyToMany, Mode::Realtime] {
        let mut c = RunConfig::for_mode(mode);
        c.train.lr = 3.1e-4;
        c.losses.nu = 0.25;
        c.inference.output = OutputSource::Decoder;
        c.paths.manifest = "corpus/manifest.json".into();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
    // partial files fill in defaults
    let c = RunConfig::from_toml("[model]\nmode = \"pairwise\"\n[train]\niterations = 7\n").unwrap();
    assert_eq!(c.train.iterations, 7);
    assert_eq!(c.model.mode, Mode::Pairwise);
    assert_eq!(c.losses, RunConfig::default().losses);
}

#[test]
fn bad_files_are_rejected() {
    assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
    assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    assert!(RunConfig::from_toml("[losses]\nnu = 0.0\n").is_err());
    assert!(RunConfig::from_toml("[features]\nreduction = 0\n").is_err());
    assert!(RunConfig::from_toml("[model]\nmode = \"sideways\"\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "not = [toml").unwrap();
    assert!(matches!(RunConfig::load(&p), Err(Error::Format { .. })));
    assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(Error::Io { .. })));
}

#[test]
fn prefixed_variables_override_keys() {
    let c = RunConfig::for_mode(Mode::ManyToMany);
    let o = c
        .with_overrides(vars(&[
            ("CONVS2S_TRAIN_BATCH_SIZE", "4"),
            ("CONVS2S_LOSSES_DAL", "10.5"),
            ("CONVS2S_MODEL_MODE", "pairwise"),
            ("CONVS2S_INFERENCE_FORWARD_ATTENTION", "true"),
            ("CONVS2S_PATHS_OUTPUT_DIR", "/tmp/out"),
            ("HOME", "/root"),
        ]))
        .unwrap();
    assert_eq!(o.train.batch_size, 4);
    assert_eq!(o.losses.dal, 10.5);
    assert_eq!(o.model.mode, Mode::Pairwise);
    assert!(o.inference.forward_attention);
    assert_eq!(o.paths.output_dir.to_str(), Some("/tmp/out"));
    assert_eq!(c.with_overrides(vars(&[("PATH", "/bin")])).unwrap(), c);
    assert!(c.with_overrides(vars(&[("CONVS2S_TRAIN_NOPE", "1")])).is_err());
    assert!(c.with_overrides(vars(&[("CONVS2S_NOWHERE_LR", "1")])).is_err());
    assert!(c.with_overrides(vars(&[("CONVS2S_TRAIN_LR", "\"fast\"")])).is_err());
    assert!(c.with_overrides(vars(&[("CONVS2S_TRAIN_LR", "-2")])).is_err());
}

#[test]
fn training_hash_tracks_training_settings() {
    let c = RunConfig::for_mode(Mode::ManyToMany);
    let mut d = c.clone();
    d.inference.forward_attention = true;
    d.paths.output_dir = "elsewhere".into();
    assert_eq!(c.training_hash(), d.training_hash());
    d.train.seed = 99;
    assert_ne!(c.training_hash(), d.training_hash());
    let mut e = c.clone();
    e.losses.oal = 0.0;
    assert_ne!(c.training_hash(), e.training_hash());
}
