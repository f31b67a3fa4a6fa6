use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skws::net::{FeatureNorm, Model, ModelConfig};
use skws::stream::{detect_triggers, offline_posteriors, smooth_posteriors, SmootherConfig, StreamState};

fn audio(channels: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels)
        .map(|c| {
            (0..n)
                .map(|i| {
                    let t = i as f64 / 16_000.0;
                    0.3 * (2.0 * std::f64::consts::PI * (440.0 + 60.0 * c as f64) * t).sin()
                        + rng.random_range(-0.1..0.1)
                })
                .collect()
        })
        .collect()
}

fn spatial_model(channels: usize, seed: u64) -> Model<f32> {
    let mut cfg = ModelConfig::spatial(channels, 6, 4, 2).unwrap();
    cfg.init_seed = seed;
    cfg.input_scale = 6.0;
    let mut m = Model::<f32>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for id in m.params.ids().collect::<Vec<_>>() {
        let name = m.params.name(id).to_string();
        if name.ends_with(".b") || name.ends_with("b_re") || name.ends_with("b_im") {
            for v in m.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn run_stream(state: &mut StreamState<f32>, x: &[Vec<f64>], chunk: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (mut cls, mut kw) = (Vec::new(), Vec::new());
    let n = x[0].len();
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        let piece: Vec<Vec<f64>> = x.iter().map(|c| c[i..j].to_vec()).collect();
        for f in state.push(&piece).unwrap() {
            assert_eq!(f.frame, cls.len());
            cls.push(f.classes);
            kw.push(f.keywords);
        }
        i = j;
    }
    (cls, kw)
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn streaming_matches_offline_for_any_chunking() {
    let model = Arc::new(spatial_model(2, 3));
    let x = audio(2, 16_000, 7);
    let offline = offline_posteriors(&model, &x, 2).unwrap();
    assert_eq!(offline.classes.len(), 25);
    for chunk in [1, 7, 160, 1000, 16_000] {
        let mut st = StreamState::new(Arc::clone(&model), 2, SmootherConfig::default()).unwrap();
        let (cls, kw) = run_stream(&mut st, &x, chunk);
        assert!(max_diff(&cls, &offline.classes) < 1e-5, "chunk {chunk}");
        assert!(max_diff(&kw, &offline.keywords) < 1e-5, "chunk {chunk}");
        assert_eq!(st.frames_emitted(), 25);
    }
}

#[test]
fn streaming_matches_offline_three_channels() {
    let model = Arc::new(spatial_model(3, 5));
    let x = audio(3, 9_000, 9);
    let offline = offline_posteriors(&model, &x, 0).unwrap();
    let mut st = StreamState::new(model, 0, SmootherConfig::default()).unwrap();
    let (cls, _) = run_stream(&mut st, &x, 333);
    assert!(max_diff(&cls, &offline.classes) < 1e-5);
}

#[test]
fn single_channel_streaming_matches_offline() {
    let mut cfg = ModelConfig::single_channel(4, 2);
    cfg.fbank_norm = Some(FeatureNorm {
        mean: vec![-8.0; 40],
        std: vec![3.0; 40],
    });
    let model = Arc::new(Model::<f32>::new(cfg).unwrap());
    let x = audio(1, 12_000, 4);
    let offline = offline_posteriors(&model, &x, 0).unwrap();
    let mut st = StreamState::new(model, 0, SmootherConfig::default()).unwrap();
    let (cls, kw) = run_stream(&mut st, &x, 500);
    assert_eq!(cls.len(), 1 + (12_000 - 256) / 160);
    assert!(max_diff(&cls, &offline.classes) < 1e-5);
    assert!(max_diff(&kw, &offline.keywords) < 1e-5);
    assert!((st.frame_period_s() - 0.01).abs() < 1e-12);
}

#[test]
fn frames_appear_once_their_audio_has_arrived() {
    let model = Arc::new(spatial_model(2, 1));
    let x = audio(2, 2_000, 2);
    let mut st = StreamState::new(model, 1, SmootherConfig::default()).unwrap();
    let mut emitted = Vec::new();
    for n in 0..x[0].len() {
        let piece: Vec<Vec<f64>> = x.iter().map(|c| vec![c[n]]).collect();
        for f in st.push(&piece).unwrap() {
            emitted.push((f.frame, n + 1, f.time_s));
        }
    }
    // output frame s closes with STFT frame 4s, i.e. at sample 4s*160 + 256
    for (s, n, t) in emitted {
        assert_eq!(n, 4 * s * 160 + 256);
        assert!((t - n as f64 / 16_000.0).abs() < 1e-12);
    }
}

#[test]
fn streams_do_not_share_state() {
    let model = Arc::new(spatial_model(2, 8));
    let a = audio(2, 8_000, 1);
    let b = audio(2, 8_000, 2);
    let mut solo = StreamState::new(Arc::clone(&model), 1, SmootherConfig::default()).unwrap();
    let (ref_a, _) = run_stream(&mut solo, &a, 400);

    let mut sa = StreamState::new(Arc::clone(&model), 1, SmootherConfig::default()).unwrap();
    let mut sb = StreamState::new(Arc::clone(&model), 4, SmootherConfig::default()).unwrap();
    let mut got = Vec::new();
    for i in (0..8_000).step_by(400) {
        let pa: Vec<Vec<f64>> = a.iter().map(|c| c[i..i + 400].to_vec()).collect();
        let pb: Vec<Vec<f64>> = b.iter().map(|c| c[i..i + 400].to_vec()).collect();
        sb.push(&pb).unwrap();
        got.extend(sa.push(&pa).unwrap().into_iter().map(|f| f.classes));
    }
    assert_eq!(got, ref_a);
}

#[test]
fn cache_sizes_follow_dilations() {
    let model = Arc::new(spatial_model(2, 0));
    let st = StreamState::new(model, 0, SmootherConfig::default()).unwrap();
    let expect: Vec<usize> = (0..4).flat_map(|_| [4, 8, 16, 32]).collect();
    assert_eq!(st.cache_sizes(), expect);
    assert_eq!(st.cache_sizes().iter().sum::<usize>() + 1, 241);
}

#[test]
fn bad_inputs_are_rejected() {
    let model = Arc::new(spatial_model(2, 0));
    assert!(StreamState::new(Arc::clone(&model), 7, SmootherConfig::default()).is_err());
    let bad = SmootherConfig {
        default_threshold: 1.5,
        ..Default::default()
    };
    assert!(StreamState::new(Arc::clone(&model), 0, bad).is_err());
    let mut st = StreamState::new(model, 0, SmootherConfig::default()).unwrap();
    assert!(st.push(&[vec![0.0; 10]]).is_err());
    assert!(st.push(&[vec![0.0; 10], vec![0.0; 9]]).is_err());
}

#[test]
fn smoothing_matches_a_direct_mean() {
    let raw: Vec<Vec<f64>> = (0..30)
        .map(|t| vec![(t as f64 * 0.37).sin().abs(), t as f64 / 30.0])
        .collect();
    let s = smooth_posteriors(&raw, 10);
    for t in 0..30usize {
        let lo = t.saturating_sub(9);
        for j in 0..2 {
            let mean = raw[lo..=t].iter().map(|r| r[j]).sum::<f64>() / (t - lo + 1) as f64;
            assert!((s[t][j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn raw_step_fires_at_the_crossing() {
    let s: Vec<Vec<f64>> = (0..100).map(|t| vec![if t >= 50 { 0.9 } else { 0.0 }]).collect();
    let ev = detect_triggers(&s, &[0.5], 0.2, 1.0, 0.04);
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].frame, 50);
    assert_eq!(ev[0].posterior, 0.9);
    assert!(detect_triggers(&vec![vec![0.49]; 100], &[0.5], 0.2, 1.0, 0.04).is_empty());
}

#[test]
fn smoothed_step_fires_once() {
    let raw: Vec<Vec<f64>> = (0..100).map(|t| vec![if t >= 40 { 0.9 } else { 0.05 }]).collect();
    let s = smooth_posteriors(&raw, 10);
    let ev = detect_triggers(&s, &[0.5], 0.2, 1.0, 0.04);
    assert_eq!(ev.len(), 1);
    // five high frames give 0.475, six give 0.56
    assert_eq!(ev[0].frame, 45);
}

#[test]
fn refractory_period_suppresses_oscillation() {
    // alternates above/below threshold every frame for 2 s, then stays low
    let s: Vec<Vec<f64>> = (0..100)
        .map(|t| vec![if t < 50 && t % 2 == 0 { 0.9 } else { 0.1 }])
        .collect();
    let ev = detect_triggers(&s, &[0.5], 0.2, 1.0, 0.04);
    let frames: Vec<usize> = ev.iter().map(|e| e.frame).collect();
    assert_eq!(frames, vec![0, 26]);
    for w in ev.windows(2) {
        assert!(w[1].time_s - w[0].time_s >= 1.0 - 1e-9);
    }
}

proptest! {
    #[test]
    fn raising_the_threshold_never_adds_events(
        vals in prop::collection::vec(0.0f64..1.0, 1..300),
        lo in 0.25f64..0.6,
        delta in 0.0f64..0.39,
        refractory in 0.0f64..2.0,
    ) {
        let s: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
        let a = detect_triggers(&s, &[lo], 0.2, refractory, 0.04);
        let b = detect_triggers(&s, &[lo + delta], 0.2, refractory, 0.04);
        prop_assert!(b.len() <= a.len());
        for e in a.iter().chain(&b) {
            prop_assert!(e.posterior >= lo);
        }
        for w in b.windows(2) {
            prop_assert!(w[1].time_s - w[0].time_s >= refractory - 1e-9);
        }
    }

    #[test]
    fn smoothing_stays_within_input_range(vals in prop::collection::vec(0.0f64..1.0, 1..100), w in 1usize..20) {
        let raw: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for r in smooth_posteriors(&raw, w) {
            prop_assert!(r[0] >= lo - 1e-12 && r[0] <= hi + 1e-12);
        }
    }
}
