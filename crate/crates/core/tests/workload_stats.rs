use kvplace_core::workload::{generate, GenParams, LengthSpec, Trace, WorkloadError};

fn gaps(trace: &Trace) -> Vec<f64> {
    let mut prev = 0.0;
    trace
        .records
        .iter()
        .map(|r| {
            let g = r.arrival_ms - prev;
            prev = r.arrival_ms;
            g
        })
        .collect()
}

fn mean_and_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean)
}

#[test]
fn poisson_gaps_have_unit_cv() {
    let t = generate(&GenParams::new(11, 6.0, 1.0, 20_000)).unwrap();
    let (mean, cv) = mean_and_cv(&gaps(&t));
    assert!((cv - 1.0).abs() < 0.05, "cv {cv}");
    assert!((mean - 10_000.0).abs() / 10_000.0 < 0.02, "mean {mean}");
}

#[test]
fn bursty_gaps_follow_requested_cv() {
    for target in [0.5, 2.0, 4.0] {
        let t = generate(&GenParams::new(3, 6.0, target, 50_000)).unwrap();
        let (_, cv) = mean_and_cv(&gaps(&t));
        assert!((cv - target).abs() / target < 0.05, "target {target} got {cv}");
    }
}

#[test]
fn mean_gap_at_fractional_rate() {
    let t = generate(&GenParams::new(5, 0.97, 1.0, 10_000)).unwrap();
    let (mean, _) = mean_and_cv(&gaps(&t));
    let expected: f64 = 60_000.0 / 0.97;
    assert!((expected - 61_855.67).abs() < 0.01);
    assert!((mean - expected).abs() / expected < 0.02, "mean {mean}");
}

#[test]
fn thousand_request_round_trip() {
    let t = generate(&GenParams::new(9, 6.0, 1.5, 1_000)).unwrap();
    let dir = std::env::temp_dir().join(format!("kvplace-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("trace.csv");
    t.save(&path).unwrap();
    let back = Trace::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(back.len(), 1_000);
    assert_eq!(back.meta, t.meta);
    for (a, b) in t.records.iter().zip(&back.records) {
        assert_eq!(a.prompt_tokens, b.prompt_tokens);
        assert_eq!(a.output_tokens, b.output_tokens);
        assert_eq!(a.arrival_ms, b.arrival_ms);
    }
}

#[test]
fn same_seed_same_trace() {
    let p = GenParams::new(42, 6.0, 1.0, 200);
    assert_eq!(generate(&p).unwrap(), generate(&p).unwrap());
    assert_ne!(generate(&p).unwrap(), generate(&GenParams::new(43, 6.0, 1.0, 200)).unwrap());
}

#[test]
fn long_request_share() {
    let base = GenParams::new(8, 6.0, 1.0, 5_000);
    let t = generate(&base.clone().with_long_requests(0.4, 6_000)).unwrap();
    let long = t.records.iter().filter(|r| r.prompt_tokens == 6_000).count() as f64 / 5_000.0;
    assert!((long - 0.4).abs() < 0.03, "share {long}");
    assert!(matches!(
        generate(&base.with_long_requests(1.5, 10)),
        Err(WorkloadError::InvalidParams(_))
    ));
}

#[test]
fn fixed_lengths_and_clamping() {
    let mut p = GenParams::new(1, 6.0, 1.0, 50);
    p.lengths = LengthSpec::Fixed { prompt: 128, output: 16 };
    let t = generate(&p).unwrap();
    assert!(t.records.iter().all(|r| r.prompt_tokens == 128 && r.output_tokens == 16));
    p.lengths = LengthSpec::LogNormal {
        prompt_mu: 12.0,
        prompt_sigma: 0.1,
        prompt_max: 1_000,
        output_mu: 0.0,
        output_sigma: 0.0,
        output_max: 5,
    };
    let t = generate(&p).unwrap();
    assert!(t.records.iter().all(|r| r.prompt_tokens == 1_000 && r.output_tokens == 1));
}

#[test]
fn rejects_bad_parameters() {
    assert!(generate(&GenParams::new(1, 0.0, 1.0, 10)).is_err());
    assert!(generate(&GenParams::new(1, 6.0, -1.0, 10)).is_err());
    assert!(Trace::parse("# x=1\n10,5,5\n5,5,5\n").is_err());
    let err = Trace::parse("# x=1\n10,5,5\n12,abc,5\n").unwrap_err();
    assert!(matches!(err, WorkloadError::Parse { line: 3, .. }), "{err}");
}
