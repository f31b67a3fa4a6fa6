use std::collections::HashSet;
use std::path::Path;

use skws::audio::{read_wav, write_wav, AudioClip, RenderRecord, WavEncoding};
use skws::data::{mono_signal, Frontend, Prior};
use skws::pipeline::{
    evaluate_system, load_system, render, render_tag, save_system, scan, synth_corpus, ExperimentConfig, System,
    SystemSpec, TrainedSystem,
};
use skws::roomsim::RenderMode;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 11,
        clips_per_class: 16,
        speakers: 40,
        noise_seconds: 1.0,
        ..Default::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg
}

fn prepare(cfg: &ExperimentConfig, root: &Path) -> (Vec<RenderRecord>, Vec<RenderRecord>) {
    synth_corpus(cfg, root).unwrap();
    scan(cfg, root).unwrap();
    let (train, _) = render(cfg, root, RenderMode::Train, None).unwrap();
    let (test, _) = render(cfg, root, RenderMode::Test, Some(10.0)).unwrap();
    (train, test)
}

#[test]
fn six_systems_have_distinct_names() {
    let names: Vec<String> = SystemSpec::table().iter().map(SystemSpec::name).collect();
    assert_eq!(
        names,
        [
            "single",
            "cascade-2ch",
            "e2e-2ch-noprior",
            "e2e-2ch",
            "e2e-3ch-noprior",
            "e2e-3ch"
        ]
    );
    assert_eq!(names.iter().collect::<HashSet<_>>().len(), 6);
    assert_eq!(render_tag(RenderMode::Test, 3, 12, Some(2.5)), "test-3ch-12z-2.5db");
    assert_eq!(render_tag(RenderMode::Test, 2, 6, None), "test-2ch-6z-clean");
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, r#"{"sed": 1}"#).unwrap();
    assert!(ExperimentConfig::load(&p).is_err());
    std::fs::write(&p, r#"{"channels": 4}"#).unwrap();
    assert!(ExperimentConfig::load(&p).is_err());
    std::fs::write(&p, r#"{"channels": 3, "train": {"epochs": 2}}"#).unwrap();
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.train.epochs, 2);
    assert_eq!(cfg.train.batch_size, 8);
}

#[test]
fn cascade_equals_single_channel_on_beamformed_audio() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, test) = prepare(&cfg, tmp.path());
    let cascade = SystemSpec::new(System::Cascade, 2, None, Prior::Oracle).unwrap();
    let sys = TrainedSystem::untrained(&cfg, cascade, &train, 3).unwrap();
    let direct = evaluate_system(&sys, &test, Some(10.0)).unwrap();

    // beamform once, store as mono recordings, and score them with the same
    // weights behind the plain first-channel front end
    let mono_dir = tmp.path().join("mono");
    std::fs::create_dir_all(&mono_dir).unwrap();
    let mono: Vec<RenderRecord> = test
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let clip = read_wav(&r.mixture_path).unwrap();
            let y = mono_signal(&clip.to_f64(), Frontend::Gsc, r.zone, None).unwrap();
            let path = mono_dir.join(format!("{i}.wav"));
            write_wav(&path, &AudioClip::from_f64(&[y], 16_000).unwrap(), WavEncoding::Float32).unwrap();
            RenderRecord {
                mixture_path: path.to_string_lossy().into_owned(),
                channels: 1,
                ..r.clone()
            }
        })
        .collect();
    let mut single = sys.clone();
    single.spec = SystemSpec::new(System::Single, 2, None, Prior::Oracle).unwrap();
    single.features.frontend = Frontend::FirstChannel;
    let mut staged = evaluate_system(&single, &mono, Some(10.0)).unwrap();
    staged.system = direct.system.clone();
    assert_eq!(staged, direct);
}

#[test]
fn systems_reject_mismatched_recordings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, test) = prepare(&cfg, tmp.path());
    let spec3 = SystemSpec::new(System::E2e, 3, None, Prior::Oracle).unwrap();
    assert!(TrainedSystem::untrained(&cfg, spec3, &train, 0).is_err());
    let spec2 = SystemSpec::new(System::E2e, 2, None, Prior::Oracle).unwrap();
    let mut sys = TrainedSystem::untrained(&cfg, spec2, &train, 0).unwrap();
    sys.spec = spec3;
    let err = evaluate_system(&sys, &test, Some(10.0)).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn saved_systems_reload_with_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, test) = prepare(&cfg, tmp.path());
    for spec in [
        SystemSpec::new(System::E2e, 2, None, Prior::None).unwrap(),
        SystemSpec::new(System::Single, 2, None, Prior::None).unwrap(),
    ] {
        let sys = skws::pipeline::train_system(&cfg, spec, &train, 4, None).unwrap();
        assert_eq!(sys.report.as_ref().unwrap().epochs.len(), 1);
        let dir = tmp.path().join(spec.name());
        let path = save_system(&sys, &dir).unwrap();
        let back = load_system(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.features.frontend, sys.features.frontend);
        assert_eq!(back.report, sys.report);
        let a = evaluate_system(&sys, &test, Some(10.0)).unwrap();
        let b = evaluate_system(&back, &test, Some(10.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), test.len());
    }
}
