use skws::eval::{
    absolute_gain, compare, compare_report, relative_gain, score, table_csv, utterance_prediction, EvalResult,
};

fn result(system: &str, snr: Option<f64>, accuracy: f64, params: usize) -> EvalResult {
    EvalResult {
        system: system.into(),
        snr_db: snr,
        accuracy,
        params,
        per_class_accuracy: vec![],
        confusion: vec![],
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[test]
fn published_gains_reproduce() {
    assert_eq!(round2(relative_gain(77.67, 69.86)), 11.18);
    assert_eq!(round2(absolute_gain(77.67, 72.19)), 5.48);
}

#[test]
fn comparison_uses_percentages() {
    let c = compare(
        &result("e2e", Some(0.0), 0.7767, 1),
        &result("base", Some(0.0), 0.6986, 1),
    )
    .unwrap();
    assert_eq!(round2(c.relative_pct), 11.18);
    assert_eq!(round2(c.absolute_pts), 7.81);
    assert!(compare(&result("a", Some(0.0), 0.5, 1), &result("b", Some(5.0), 0.5, 1)).is_err());
}

#[test]
fn report_pairs_only_matching_snrs() {
    let rs = [
        result("a", Some(0.0), 0.8, 1),
        result("b", Some(0.0), 0.6, 1),
        result("b", Some(5.0), 0.9, 1),
    ];
    let cmp = compare_report(&rs).unwrap();
    assert_eq!(cmp.len(), 2);
    assert!(cmp.iter().all(|c| c.snr_db == Some(0.0)));
    assert!(compare_report(&rs[..1]).is_err());
    assert!(compare_report(&[result("a", Some(0.0), 0.8, 1), result("b", Some(5.0), 0.6, 1)]).is_err());
}

#[test]
fn table_layout() {
    let rs = [
        result("single", Some(5.0), 0.5, 164_000),
        result("e2e", Some(0.0), 0.75, 279_000),
        result("single", Some(0.0), 0.25, 164_000),
        result("e2e", Some(5.0), 1.0, 279_000),
        result("e2e", None, 0.9, 279_000),
    ];
    let csv = table_csv(&rs).unwrap();
    let want = "system,params,0dB,5dB,clean,avg\n\
                single,164000,25.00,50.00,,37.50\n\
                e2e,279000,75.00,100.00,90.00,88.33\n";
    assert_eq!(csv, want);
    let dup = [result("x", Some(0.0), 0.1, 1), result("x", Some(0.0), 0.2, 1)];
    assert!(table_csv(&dup).is_err());
}

#[test]
fn scoring_validates_inputs() {
    assert!(score("s", None, 1, 3, &[0, 1], &[0]).is_err());
    assert!(score("s", None, 1, 3, &[], &[]).is_err());
    assert!(score("s", None, 1, 3, &[0, 3], &[0, 1]).is_err());
    let r = score("s", None, 1, 3, &[0, 1, 2, 2], &[0, 1, 2, 1]).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.confusion[2], vec![0, 1, 1]);
}

#[test]
fn prediction_averages_posteriors() {
    assert_eq!(utterance_prediction(&[vec![0.2, 0.3, 0.5]]), 2);
    assert_eq!(
        utterance_prediction(&[vec![0.9, 0.1, 0.0], vec![0.0, 0.6, 0.4], vec![0.0, 0.6, 0.4]]),
        1
    );
}
