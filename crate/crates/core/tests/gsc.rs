//! Beamformer checks on synthetic plane waves built with exact frequency-domain delays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use skws::gsc::*;
use skws::roomsim::ArrayGeometry;

const FS: u32 = 16000;

/// Random band-limited (100 Hz .. `f_hi`) periodic signal of length `n`,
/// returned as its spectrum so it can be delayed exactly.
fn random_spectrum(rng: &mut ChaCha8Rng, n: usize, f_hi: f64) -> Vec<Complex64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..n / 2 {
        let f = k as f64 * FS as f64 / n as f64;
        if (100.0..f_hi).contains(&f) {
            let c = Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU));
            spec[k] = c;
            spec[n - k] = c.conj();
        }
    }
    spec
}

/// Inverse FFT of `spec` delayed by `delay` samples (circular).
fn delayed(spec: &[Complex64], delay: f64) -> Vec<f64> {
    let n = spec.len();
    let mut buf: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            c * Complex64::from_polar(1.0, -std::f64::consts::TAU * kk * delay / n as f64)
        })
        .collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn plane_wave(spec: &[Complex64], geometry: &ArrayGeometry, az: f64, scale: f64) -> Vec<Vec<f64>> {
    let d = steering_delays(geometry, az, FS).unwrap();
    d.iter()
        .map(|&di| delayed(spec, di).into_iter().map(|v| v * scale).collect())
        .collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn mid(x: &[f64]) -> &[f64] {
    &x[200..x.len() - 200]
}

#[test]
fn steered_plane_wave_passes_undistorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (geometry, az) in [
        (ArrayGeometry::linear(0.03), 30.0),
        (ArrayGeometry::triangle(0.03), 200.0),
    ] {
        let spec = random_spectrum(&mut rng, 8192, 7000.0);
        let chans = plane_wave(&spec, &geometry, az, 1.0);
        let d = steering_delays(&geometry, az, FS).unwrap();
        let y = delay_and_sum(&chans, &d).unwrap();
        // aligned with the latest microphone
        let max = d.iter().copied().fold(0.0, f64::max);
        let want = delayed(&spec, max);
        let err: Vec<f64> = mid(&y).iter().zip(mid(&want)).map(|(a, b)| a - b).collect();
        let rel = (power(&err) / power(mid(&want))).sqrt();
        assert!(rel <= 0.02, "relative error {rel}");
    }
}

#[test]
fn blocking_matrix_cancels_the_look_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = ArrayGeometry::linear(0.03);
    let spec = random_spectrum(&mut rng, 8192, 7000.0);
    let d = steering_delays(&g, 40.0, FS).unwrap();
    let chans = plane_wave(&spec, &g, 40.0, 1.0);
    let beam = delay_and_sum(&chans, &d).unwrap();
    let refs = blocking_matrix(&chans, &d).unwrap();
    let rel_db = 10.0 * (power(mid(&refs[0])) / power(mid(&beam))).log10();
    assert!(rel_db <= -40.0, "{rel_db} dB");

    // an interferer 60 degrees away leaks into the reference
    let chans = plane_wave(&spec, &g, 100.0, 1.0);
    let beam = delay_and_sum(&chans, &d).unwrap();
    let refs = blocking_matrix(&chans, &d).unwrap();
    let rel_db = 10.0 * (power(mid(&refs[0])) / power(mid(&beam))).log10();
    assert!(rel_db > -10.0, "{rel_db} dB");
}

#[test]
fn array_gain_on_uncorrelated_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (geometry, az) in [
        (ArrayGeometry::linear(0.03), 90.0),
        (ArrayGeometry::triangle(0.03), 90.0),
    ] {
        let m = geometry.num_mics();
        let spec = random_spectrum(&mut rng, 16384, 7000.0);
        let target = plane_wave(&spec, &geometry, az, 1.0);
        let noise: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..16384).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let d = steering_delays(&geometry, az, FS).unwrap();
        let t_out = delay_and_sum(&target, &d).unwrap();
        let n_out = delay_and_sum(&noise, &d).unwrap();
        let snr_in = 10.0 * (power(&target[0]) / power(&noise[0])).log10();
        let snr_out = 10.0 * (power(mid(&t_out)) / power(mid(&n_out))).log10();
        let gain = snr_out - snr_in;
        let want = 10.0 * (m as f64).log10();
        assert!((gain - want).abs() <= 1.0, "M={m}: gain {gain} want {want}");
    }
}

#[test]
fn canceller_improves_sir() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (geometry, steer, interf) in [
        (ArrayGeometry::linear(0.03), 75.0, 135.0),
        (ArrayGeometry::linear(0.03), 30.0, 90.0),
        (ArrayGeometry::triangle(0.03), 200.0, 260.0),
    ] {
        let n = 2 * FS as usize;
        let ts = random_spectrum(&mut rng, n, 7000.0);
        let is = random_spectrum(&mut rng, n, 7000.0);
        let target = plane_wave(&ts, &geometry, steer, 1.0);
        let interferer = plane_wave(&is, &geometry, interf, 1.0);
        let mix: Vec<Vec<f64>> = target
            .iter()
            .zip(&interferer)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let cfg = GscConfig::new(geometry.clone(), steer);
        let out = gsc_process_tracked(&mix, &[target.clone(), interferer.clone()], &cfg).unwrap();
        // components add back up to the output
        for t in 0..n {
            let s = out.components[0][t] + out.components[1][t];
            assert!((s - out.output[t]).abs() < 1e-9);
        }
        let sir_in = 10.0 * (power(&target[0]) / power(&interferer[0])).log10();
        let after = FS as usize..n;
        let sir_out = 10.0 * (power(&out.components[0][after.clone()]) / power(&out.components[1][after])).log10();
        println!("steer {steer} interf {interf}: SIR {sir_in:.2} -> {sir_out:.2} dB");
        assert!(sir_out - sir_in >= 3.0, "improvement {}", sir_out - sir_in);
    }
}

#[test]
fn nlms_weights_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mu in [0.1, 0.5, 1.0] {
        let mut f = Nlms::new(1, 64, mu, 1e-6);
        let mut max_norm: f64 = 0.0;
        for _ in 0..1_000_000 {
            let x = rng.random_range(-1.0..1.0);
            let d = rng.random_range(-1.0..1.0);
            f.push(&[x]);
            let e = d - f.output();
            f.update(e);
            max_norm = max_norm.max(f.weight_norm());
        }
        assert!(max_norm.is_finite() && max_norm < 10.0, "mu {mu}: {max_norm}");
    }
}
