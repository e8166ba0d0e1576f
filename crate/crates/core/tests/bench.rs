use galite_core::bench::{
    count_ops, latency_csv, linear_fit, measure_latency, opcount_csv, state_size, warm_state,
    LatencyMode, LatencySettings, LATENCY_HEADER,
};
use galite_core::{Head, HeadConfig, ModelConfig, ModelState};

fn model(head: HeadConfig, d: usize, d_h: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig { d, d_h, heads, layers, ..ModelConfig::new(8, 4, head) }
}

#[test]
fn agalite_counts_do_not_depend_on_position() {
    let cfg = model(HeadConfig::agalite(2, 3), 16, 8, 2, 2);
    let base = count_ops(&cfg, 1).unwrap();
    assert!(base.mul_adds > 0);
    for t in [10, 100, 10_000] {
        let c = count_ops(&cfg, t).unwrap();
        assert_eq!((c.mul_adds, c.activations), (base.mul_adds, base.activations), "t={t}");
    }
}

#[test]
fn windowed_counts_are_affine_in_occupancy() {
    let ms: Vec<usize> = (1..=32).map(|i| 16 * i).collect();
    let counts: Vec<f64> = ms
        .iter()
        .map(|&m| count_ops(&model(HeadConfig::windowed(m), 16, 8, 1, 1), m as u64).unwrap().mul_adds as f64)
        .collect();
    let x: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let fit = linear_fit(&x, &counts).unwrap();
    assert!(fit.r_squared > 0.999);
    assert!(counts.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));
    // Occupancy rather than capacity drives the count.
    let cfg = model(HeadConfig::windowed(256), 16, 8, 1, 1);
    assert!(count_ops(&cfg, 10).unwrap().mul_adds < count_ops(&cfg, 200).unwrap().mul_adds);
    assert_eq!(count_ops(&cfg, 300).unwrap().mul_adds, count_ops(&cfg, 256).unwrap().mul_adds);
}

#[test]
fn zero_layers_means_no_mechanism_ops() {
    for head in [HeadConfig::galite(2), HeadConfig::agalite(2, 1), HeadConfig::windowed(4)] {
        let c = count_ops(&model(head, 8, 4, 2, 0), 5).unwrap();
        assert_eq!((c.mul_adds, c.activations, c.state_scalars), (0, 0, 0));
    }
}

#[test]
fn state_size_examples() {
    let galite = state_size(&model(HeadConfig::galite(4), 64, 64, 1, 1));
    let agalite = state_size(&model(HeadConfig::agalite(4, 1), 64, 64, 1, 1));
    assert_eq!(galite, 4 * 64 * 64 + 4 * 64);
    assert_eq!(galite, 16640);
    assert_eq!(agalite, 2 * (64 + 256) + 256);
    assert_eq!(agalite, 896);
    let ratio = galite as f64 / agalite as f64;
    assert!(ratio >= 10.0 && (ratio - 18.57).abs() < 0.01, "{ratio}");
}

#[test]
fn state_size_matches_allocation() {
    for head in [
        HeadConfig::linear(),
        HeadConfig::galite(3),
        HeadConfig::agalite(2, 4),
        HeadConfig::random_sign(2),
    ] {
        let cfg = model(head, 12, 6, 3, 2);
        assert_eq!(state_size(&cfg), ModelState::zeros(&cfg, 0).scalars());
    }
    let cfg = model(HeadConfig::windowed(5), 12, 6, 3, 2);
    let full: usize = (0..cfg.layers * cfg.heads).map(|i| warm_state(&cfg.head, 6, 9, i as u64).scalars()).sum();
    assert_eq!(state_size(&cfg), full);
    assert_eq!(state_size(&cfg), 2 * 3 * 5 * 2 * 6);
}

#[test]
fn opcount_csv_schema() {
    let row = count_ops(&model(HeadConfig::agalite(2, 1), 8, 4, 1, 1), 10).unwrap();
    let csv = opcount_csv(&[row]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "mechanism,d,d_h,heads,eta,r,M,t,mul_adds,activations,state_scalars");
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&fields[..8], ["agalite", "8", "4", "1", "2", "1", "0", "10"]);
}

#[test]
fn latency_report_schema() {
    let head = Head::random(HeadConfig::agalite(1, 1), 4, 4, 0).unwrap();
    let settings = LatencySettings { reps: 30, warmup: 1, inner: 2, groups: 5 };
    let rows = measure_latency(&head, LatencyMode::Step, &[1, 100], &settings).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.reps == 30 && r.samples.len() == 30 && r.mean_ms > 0.0));
    let csv = latency_csv(&rows);
    assert!(csv.starts_with(&format!("{LATENCY_HEADER}\n")));
    assert!(csv.lines().nth(1).unwrap().starts_with("agalite,step,1,"));
    let seq = measure_latency(&head, LatencyMode::Sequence, &[3], &settings).unwrap();
    assert_eq!(seq[0].mode.name(), "sequence");
    assert!(measure_latency(&head, LatencyMode::Step, &[1], &LatencySettings { reps: 10, ..settings }).is_err());
}
