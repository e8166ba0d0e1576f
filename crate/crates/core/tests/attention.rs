use galite_core::attention::{
    agalite_step, canonical_attention, galite_step, head_step, linear_attention_step,
    windowed_attention_step,
};
use galite_core::feature_maps::{gamma_learned, phi_elu, phi_learned};
use galite_core::numerics::{finite_diff_check_with_floor, Backend, Tape, Var};
use galite_core::oracle;
use galite_core::rng;
use galite_core::{
    FeatureMapKind, Gating, Head, HeadConfig, HeadParams, HeadState, Matrix2, MechanismKind,
    Vector,
};
use rand::Rng;

fn inputs(seed: u64, t: usize, d: usize) -> Matrix2 {
    let mut r = rng::stream(seed, &[77]);
    Matrix2::from_fn(t, d, |_, _| r.random_range(-1.0..1.0))
}

fn row(m: &Matrix2, t: usize) -> Vector {
    Vector::new(m.row(t).to_vec())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn matrix_state(s: &HeadState<Matrix2>) -> (&Matrix2, &Matrix2) {
    match s {
        HeadState::Matrix(m) => (&m.c, &m.s),
        other => panic!("expected matrix state, got {}", other.kind_name()),
    }
}

/// An input whose learned key and query overlap, so the readout denominator
/// is far above the guard.
fn overlapping_input(head: &Head, seed: u64) -> Vector {
    let p = &head.params;
    (0..1000)
        .map(|i| row(&inputs(seed * 1000 + i, 1, head.d()), 0))
        .find(|x| {
            let k = phi_learned(x, &p.w_p1, &p.w_k).unwrap();
            let q = phi_learned(x, &p.w_p2, &p.w_q).unwrap();
            k.dot(&q).unwrap() > 0.05
        })
        .expect("some input has overlapping key and query")
}

/// `v · g / (g + ε)`: the readout of a state holding one write whose key
/// overlaps the query by `g`.
fn guarded(v: &[f64], g: f64) -> Vec<f64> {
    v.iter().map(|v| v * g / (g + galite_core::DENOM_EPS)).collect()
}

fn gated_overlap(head: &Head, x: &Vector) -> f64 {
    let p = &head.params;
    let k = oracle::outer_feature(x.as_slice(), &p.w_p1, &p.w_k, oracle::relu);
    let q = oracle::outer_feature(x.as_slice(), &p.w_p2, &p.w_q, oracle::relu);
    let g = oracle::outer_feature(x.as_slice(), &p.w_p3, &p.w_gamma, oracle::logistic);
    k.iter().zip(&q).zip(&g).map(|((k, q), g)| k * q * g).sum()
}

fn beta_of(head: &Head, x: &Vector) -> Vec<f64> {
    oracle::project(&head.params.w_beta, x.as_slice())
        .into_iter()
        .map(oracle::logistic)
        .collect()
}

#[test]
fn linear_first_step_and_repetition() {
    let head = Head::random(HeadConfig::linear(), 6, 4, 1).unwrap();
    let xs = inputs(1, 5, 6);
    let x = row(&xs, 0);
    let v = oracle::project(&head.params.w_v, x.as_slice());
    let (a, mut st) = head.step(&x, &head.zero_state()).unwrap();
    assert!(rel_err(a.as_slice(), &v) < 1e-6);
    for _ in 0..20 {
        let (a, next) = head.step(&x, &st).unwrap();
        assert!(rel_err(a.as_slice(), &v) < 1e-6);
        st = next;
    }
}

#[test]
fn linear_matches_kernel_attention_direct_sum() {
    for (t_len, seed) in [(6, 2), (64, 3)] {
        let head = Head::random(HeadConfig::linear(), 6, 4, seed).unwrap();
        let xs = inputs(seed, t_len, 6);
        let mut st = head.zero_state();
        let mut values = Vec::new();
        let mut keys = Vec::new();
        for t in 0..t_len {
            let x = row(&xs, t);
            values.push(oracle::project(&head.params.w_v, x.as_slice()));
            keys.push(phi_elu(&Vector::new(oracle::project(&head.params.w_k, x.as_slice()))).into_inner());
            let q = phi_elu(&Vector::new(oracle::project(&head.params.w_q, x.as_slice())));
            let (a, next) = head.step(&x, &st).unwrap();
            let want = oracle::kernel_attention(&values, &keys, q.as_slice());
            assert!(max_diff(a.as_slice(), &want) < 1e-10, "t={t}");
            st = next;
        }
    }
}

#[test]
fn galite_first_step_is_gated_value() {
    let head = Head::random(HeadConfig::galite(2), 6, 4, 4).unwrap();
    let x = overlapping_input(&head, 4);
    let v = oracle::project(&head.params.w_v, x.as_slice());
    let bv: Vec<f64> = beta_of(&head, &x).iter().zip(&v).map(|(b, v)| b * v).collect();
    let want = guarded(&bv, gated_overlap(&head, &x));
    let (a, _) = head.step(&x, &head.zero_state()).unwrap();
    assert!(rel_err(a.as_slice(), &want) < 1e-6);
}

#[test]
fn full_gates_overwrite_state() {
    let cfg = HeadConfig::galite(2).with_gating(Gating::Fixed { beta: 1.0, gamma: 1.0 });
    let head = Head::random(cfg, 6, 4, 5).unwrap();
    let mut st = head.zero_state();
    for t in 0..8 {
        let x = overlapping_input(&head, 50 + t);
        let v = oracle::project(&head.params.w_v, x.as_slice());
        let k = phi_learned(&x, &head.params.w_p1, &head.params.w_k).unwrap();
        let q = phi_learned(&x, &head.params.w_p2, &head.params.w_q).unwrap();
        let (a, next) = head.step(&x, &st).unwrap();
        let (c, s) = matrix_state(&next);
        let outer = galite_core::numerics::outer(&Vector::new(v.clone()), &k);
        assert!(c.max_abs_diff(&outer) < 1e-15);
        assert!(max_diff(s.data(), k.as_slice()) < 1e-15);
        let want = guarded(&v, k.dot(&q).unwrap());
        assert!(rel_err(a.as_slice(), &want) < 1e-12, "t={t}");
        st = next;
    }
}

#[test]
fn galite_state_matches_unrolled_sum() {
    for (t_len, seed) in [(5, 6), (32, 7)] {
        let head = Head::random(HeadConfig::galite(2), 6, 4, seed).unwrap();
        let xs = inputs(seed, t_len, 6);
        let p = &head.params;
        let (mut values, mut keys, mut betas, mut gammas) = (vec![], vec![], vec![], vec![]);
        let mut st = head.zero_state();
        for t in 0..t_len {
            let x = row(&xs, t);
            values.push(oracle::project(&p.w_v, x.as_slice()));
            keys.push(oracle::outer_feature(x.as_slice(), &p.w_p1, &p.w_k, oracle::relu));
            betas.push(beta_of(&head, &x));
            gammas.push(oracle::outer_feature(x.as_slice(), &p.w_p3, &p.w_gamma, oracle::logistic));
            st = head.step(&x, &st).unwrap().1;
        }
        let (c, s) = matrix_state(&st);
        let want_c = oracle::gated_state_unrolled(&values, &keys, &betas, &gammas);
        let want_s = oracle::gated_normalizer_unrolled(&keys, &gammas);
        assert!(c.max_abs_diff(&want_c) < 1e-10, "T={t_len}");
        assert!(max_diff(s.data(), &want_s) < 1e-10);
    }
}

#[test]
fn agalite_r1_first_step_is_gated_value() {
    let head = Head::random(HeadConfig::agalite(2, 1), 6, 4, 8).unwrap();
    let x = overlapping_input(&head, 8);
    let v = oracle::project(&head.params.w_v, x.as_slice());
    let bv: Vec<f64> = beta_of(&head, &x).iter().zip(&v).map(|(b, v)| b * v).collect();
    // Both phases are 1 at r = 1, so numerator and normalizer double.
    let want = guarded(&bv, 2.0 * gated_overlap(&head, &x));
    let (a, st) = head.step(&x, &head.zero_state()).unwrap();
    assert!(rel_err(a.as_slice(), &want) < 1e-6);
    match st {
        HeadState::Agalite(s) => assert_eq!(s.tick, 1),
        _ => panic!("wrong state"),
    }
}

#[test]
fn agalite_ungated_repetition_stays_proportional() {
    let cfg = HeadConfig::agalite(2, 1).with_gating(Gating::Ungated);
    let head = Head::random(cfg, 6, 4, 9).unwrap();
    let x = overlapping_input(&head, 9);
    let p = &head.params;
    let v = oracle::project(&p.w_v, x.as_slice());
    let mut st = head.zero_state();
    for t in 0..1000 {
        let (a, next) = head.step(&x, &st).unwrap();
        assert!(a.is_finite());
        let scale = a.as_slice().iter().zip(&v).map(|(a, v)| a * v).sum::<f64>()
            / v.iter().map(|v| v * v).sum::<f64>();
        assert!(scale > 0.0, "t={t}");
        let resid: Vec<f64> = v.iter().map(|v| v * scale).collect();
        assert!(rel_err(a.as_slice(), &resid) < 1e-9, "t={t}");
        st = next;
    }
}

#[test]
fn agalite_large_r_approaches_galite() {
    let t_len = 10;
    for seed in 0..5 {
        let galite = Head::random(HeadConfig::galite(2), 6, 4, 100 + seed).unwrap();
        // Cross terms leak in at 2/r; r far above 8T keeps them below the
        // tolerance even where the output itself is small.
        let cfg = HeadConfig::agalite(2, 1 << 16).with_derivation_scaling(true);
        let agalite = Head::new(cfg, galite.params.clone()).unwrap();
        let xs = inputs(100 + seed, t_len, 6);
        let (ag, _) = agalite.forward_steps(&xs, &agalite.zero_state()).unwrap();
        let (ga, _) = galite.forward_steps(&xs, &galite.zero_state()).unwrap();
        for t in 0..t_len {
            let e = rel_err(ag.row(t), ga.row(t));
            assert!(e < 1e-2, "seed={seed} t={t}: {e}");
        }
    }
}

#[test]
fn windowed_examples() {
    let xs = inputs(10, 6, 6);
    let one = Head::random(HeadConfig::windowed(1), 6, 4, 10).unwrap();
    let mut st = one.zero_state();
    for t in 0..6 {
        let x = row(&xs, t);
        let (a, next) = one.step(&x, &st).unwrap();
        let v = oracle::project(&one.params.w_v, x.as_slice());
        assert!(max_diff(a.as_slice(), &v) < 1e-12);
        st = next;
    }

    let two = Head::new(HeadConfig::windowed(2), one.params.clone()).unwrap();
    let (out, _) = two.forward_steps(&inputs(10, 3, 6), &two.zero_state()).unwrap();
    let p = &two.params;
    let proj = |w: &Matrix2, t: usize| oracle::project(w, xs.row(t));
    let want = oracle::softmax_attention(
        &proj(&p.w_q, 2),
        &[proj(&p.w_k, 1), proj(&p.w_k, 2)],
        &[proj(&p.w_v, 1), proj(&p.w_v, 2)],
        1.0 / 6f64.sqrt(),
    );
    assert!(max_diff(out.row(2), &want) < 1e-12);
}

#[test]
fn windowed_with_full_memory_equals_canonical() {
    for t_len in [1, 3, 9, 16] {
        let head = Head::random(HeadConfig::windowed(t_len), 6, 4, 11).unwrap();
        let xs = inputs(11 + t_len as u64, t_len, 6);
        let (out, _) = head.forward_steps(&xs, &head.zero_state()).unwrap();
        let canon = canonical_attention(&xs, &head.params).unwrap();
        assert!(out.max_abs_diff(&canon) < 1e-12, "T={t_len}");
    }
}

#[test]
fn canonical_examples() {
    let head = Head::random(HeadConfig::windowed(4), 2, 3, 12).unwrap();
    let p = &head.params;
    let x1 = Matrix2::from_rows(&[&[0.3, -0.8]]).unwrap();
    let out = canonical_attention(&x1, p).unwrap();
    assert!(max_diff(out.row(0), &oracle::project(&p.w_v, x1.row(0))) < 1e-15);

    let same = Matrix2::from_rows(&[&[0.3, -0.8], &[0.3, -0.8], &[0.3, -0.8]]).unwrap();
    let out = canonical_attention(&same, p).unwrap();
    for i in 0..3 {
        assert!(max_diff(out.row(i), &oracle::project(&p.w_v, same.row(0))) < 1e-14);
    }

    let xs = inputs(12, 3, 2);
    let out = canonical_attention(&xs, p).unwrap();
    for i in 0..3 {
        let keys: Vec<Vec<f64>> = (0..=i).map(|j| oracle::project(&p.w_k, xs.row(j))).collect();
        let values: Vec<Vec<f64>> = (0..=i).map(|j| oracle::project(&p.w_v, xs.row(j))).collect();
        let want = oracle::softmax_attention(
            &oracle::project(&p.w_q, xs.row(i)),
            &keys,
            &values,
            1.0 / 2f64.sqrt(),
        );
        assert!(max_diff(out.row(i), &want) < 1e-12);
    }
    assert!(canonical_attention(&Matrix2::zeros(2, 3), p).is_err());
}

fn all_configs() -> Vec<HeadConfig> {
    vec![
        HeadConfig::linear(),
        HeadConfig::linear().with_feature_map(FeatureMapKind::LearnedOuterRelu { eta: 2 }),
        HeadConfig::galite(2),
        HeadConfig::galite(2).with_gating(Gating::Ungated),
        HeadConfig::agalite(2, 1),
        HeadConfig::agalite(2, 2),
        HeadConfig::agalite(2, 3).with_derivation_scaling(true),
        HeadConfig::agalite(2, 3).with_feature_map(FeatureMapKind::EluPlusOne),
        HeadConfig::agalite(2, 2).with_gating(Gating::Ungated),
        HeadConfig::random_sign(2),
        HeadConfig::windowed(3),
    ]
}

fn assert_states_close(a: &HeadState<Matrix2>, b: &HeadState<Matrix2>, tol: f64) {
    let mut xs = Vec::new();
    let _ = a.map(|m| xs.extend_from_slice(m.data()));
    let mut ys = Vec::new();
    let _ = b.map(|m| ys.extend_from_slice(m.data()));
    assert!(max_diff(&xs, &ys) < tol);
    if let (HeadState::Agalite(a), HeadState::Agalite(b)) = (a, b) {
        assert_eq!(a.tick, b.tick);
    }
}

#[test]
fn sequence_equals_step_iteration() {
    for cfg in all_configs() {
        for t_len in [1, 7, 64] {
            let head = Head::random(cfg, 6, 4, 13 + t_len as u64).unwrap();
            let xs = inputs(13, t_len, 6);
            // Start from a nonzero state to exercise the carried prefix.
            let (_, warm) = head.forward_steps(&inputs(14, 3, 6), &head.zero_state()).unwrap();
            let (seq, seq_state) = head.forward_sequence(&xs, &warm).unwrap();
            let (steps, step_state) = head.forward_steps(&xs, &warm).unwrap();
            assert!(seq.max_abs_diff(&steps) < 1e-10, "{cfg:?} T={t_len}");
            assert_states_close(&seq_state, &step_state, 1e-10);
        }
    }
}

#[test]
fn sequence_equals_steps_long() {
    let head = Head::random(HeadConfig::agalite(2, 3), 6, 4, 15).unwrap();
    let xs = inputs(15, 1024, 6);
    let (seq, st) = head.forward_sequence(&xs, &head.zero_state()).unwrap();
    let (steps, _) = head.forward_steps(&xs, &head.zero_state()).unwrap();
    assert!(seq.max_abs_diff(&steps) < 1e-10);
    match st {
        HeadState::Agalite(s) => assert_eq!(s.tick, 1024),
        _ => panic!(),
    }
}

#[test]
fn forgetting_is_exact_under_constant_gates() {
    let c = 0.3;
    let cfg = HeadConfig::galite(2).with_gating(Gating::Fixed { beta: c, gamma: c });
    let head = Head::random(cfg, 6, 4, 16).unwrap();
    let mut st = head.step(&row(&inputs(16, 1, 6), 0), &head.zero_state()).unwrap().1;
    let zero = Vector::zeros(6);
    for _ in 0..30 {
        let next = head.step(&zero, &st).unwrap().1;
        let (c0, _) = matrix_state(&st);
        let (c1, _) = matrix_state(&next);
        for (a, b) in c0.data().iter().zip(c1.data()) {
            assert_eq!(*b, (1.0 - c) * (1.0 - c) * a);
        }
        st = next;
    }
}

#[test]
fn galite_state_stays_within_geometric_bound() {
    let head = Head::random(HeadConfig::galite(2), 6, 4, 17).unwrap();
    let xs = inputs(17, 10_000, 6);
    let p = &head.params;
    let mut write_max: f64 = 0.0;
    let mut keep_max: f64 = 0.0;
    for t in 0..xs.rows() {
        let x = row(&xs, t);
        let v = oracle::project(&p.w_v, x.as_slice());
        let k = phi_learned(&x, &p.w_p1, &p.w_k).unwrap();
        let g = gamma_learned(&x, &p.w_p3, &p.w_gamma).unwrap();
        let b = beta_of(&head, &x);
        for i in 0..v.len() {
            for j in 0..k.len() {
                write_max = write_max.max((b[i] * v[i] * g[j] * k[j]).abs());
                keep_max = keep_max.max((1.0 - b[i]) * (1.0 - g[j]));
            }
        }
    }
    let bound = write_max / (1.0 - keep_max);
    let mut st = head.zero_state();
    for t in 0..xs.rows() {
        st = head.step(&row(&xs, t), &st).unwrap().1;
        let (c, _) = matrix_state(&st);
        assert!(c.max_abs() <= bound, "t={t}: {} > {bound}", c.max_abs());
    }
}

#[test]
fn outputs_are_causal() {
    for cfg in all_configs() {
        let head = Head::random(cfg, 6, 4, 18).unwrap();
        let xs = inputs(18, 10, 6);
        let (base, _) = head.forward_steps(&xs, &head.zero_state()).unwrap();
        let mut bumped = xs.clone();
        bumped.set(6, 2, xs.get(6, 2) + 0.5);
        let (out, _) = head.forward_steps(&bumped, &head.zero_state()).unwrap();
        for t in 0..6 {
            assert_eq!(out.row(t), base.row(t), "{cfg:?} t={t}");
        }
        assert_ne!(out.row(6), base.row(6), "{cfg:?}");
    }
}

#[test]
fn shape_errors() {
    let head = Head::random(HeadConfig::galite(2), 6, 4, 19).unwrap();
    assert!(head.step(&Vector::zeros(5), &head.zero_state()).is_err());
    let other = HeadState::zeros(&HeadConfig::agalite(2, 1), 4, 0);
    assert!(head.step(&Vector::zeros(6), &other).is_err());
    assert!(head.forward_sequence(&Matrix2::zeros(0, 6), &head.zero_state()).is_err());
    assert!(Head::new(HeadConfig::galite(3), head.params.clone()).is_err());
    assert!(Head::new(HeadConfig::agalite(2, 0), head.params.clone()).is_err());
}

#[test]
fn named_step_functions_agree_with_head() {
    let xs = inputs(20, 4, 6);
    let galite = Head::random(HeadConfig::galite(2), 6, 4, 20).unwrap();
    let p = &galite.params;

    let HeadState::Matrix(mut gs) = galite.zero_state() else { panic!() };
    let HeadState::Agalite(mut ags) = HeadState::zeros(&HeadConfig::agalite(2, 2), 4, 0) else { panic!() };
    let HeadState::Matrix(mut ls) = HeadState::zeros(&HeadConfig::linear(), 4, 0) else { panic!() };
    let HeadState::Window(mut ws) = HeadState::zeros(&HeadConfig::windowed(2), 4, 0) else { panic!() };
    let mut head_states: Vec<(Head, HeadState<Matrix2>)> = [
        HeadConfig::galite(2),
        HeadConfig::agalite(2, 2),
        HeadConfig::linear(),
        HeadConfig::windowed(2),
    ]
    .into_iter()
    .map(|cfg| {
        let h = Head::new(cfg, p.clone()).unwrap();
        let s = h.zero_state();
        (h, s)
    })
    .collect();
    for t in 0..4 {
        let x = row(&xs, t);
        let (a0, s0) = galite_step(&x, &gs, p).unwrap();
        let (a1, s1) = agalite_step(&x, &ags, p).unwrap();
        let (a2, s2) = linear_attention_step(&x, &ls, p, FeatureMapKind::EluPlusOne).unwrap();
        let (a3, s3) = windowed_attention_step(&x, &ws, p).unwrap();
        for ((h, s), a) in head_states.iter_mut().zip([a0, a1, a2, a3]) {
            let (b, next) = h.step(&x, s).unwrap();
            assert_eq!(a, b);
            *s = next;
        }
        (gs, ags, ls, ws) = (s0, s1, s2, s3);
    }
}

/// Splits a flat parameter leaf into head weights.
fn head_vars(tape: &mut Tape, flat: Var, d: usize, d_h: usize, eta: usize) -> HeadParams<Var> {
    let mut offset = 0;
    HeadParams::from_array(HeadParams::<Matrix2>::shapes(d, d_h, eta).map(|(r, c)| {
        let v = tape.slice(&flat, offset, r, c);
        offset += r * c;
        v
    }))
}

fn flat_params(head: &Head) -> Vec<f64> {
    head.params.iter().iter().flat_map(|m| m.data().to_vec()).collect()
}

/// Worst finite-difference disagreement over every configuration, with
/// the relative-error denominator floored at `floor`.
fn worst_gradient_error(input_seed: u64, floor: f64) -> f64 {
    let (d, d_h, t_len) = (6, 4, 5);
    let xs = inputs(input_seed, t_len, d);
    let readout = Matrix2::column(vec![0.7, -0.4, 1.1, 0.25]);
    let mut worst: f64 = 0.0;
    for cfg in all_configs() {
        let head = Head::random(cfg, d, d_h, 21).unwrap();
        let theta = flat_params(&head);
        let eta = cfg.eta();
        // Window caches are constants; hold them at their unperturbed values.
        let (_, states) = (0..t_len).fold((head.zero_state(), vec![]), |(st, mut acc), t| {
            acc.push(st.clone());
            (head.step(&row(&xs, t), &st).unwrap().1, acc)
        });
        let windowed = matches!(cfg.kind, MechanismKind::Windowed { .. });
        let f = |tape: &mut Tape, flat: Var| -> Var {
            let p = head_vars(tape, flat, d, d_h, eta);
            let w = tape.constant(readout.clone());
            let mut state = head.zero_state().map(|m| tape.constant(m.clone()));
            let mut total: Option<Var> = None;
            for t in 0..t_len {
                if windowed {
                    state = states[t].map(|m| tape.constant(m.clone()));
                }
                let x = tape.constant(Matrix2::column(xs.row(t).to_vec()));
                let (a, next) = head_step(tape, &cfg, &p, &x, state);
                state = next;
                let term = tape.dot(&a, &w);
                total = Some(match total {
                    None => term,
                    Some(s) => tape.add(&s, &term),
                });
            }
            total.unwrap()
        };
        worst = worst.max(finite_diff_check_with_floor(f, &theta, 1e-5, floor));
    }
    worst
}

/// Some weights get gradients near 1e-8, where central differences at
/// h = 1e-5 carry round-off of about 1e-11. Across input draws, require
/// agreement to 1e-9 absolute for those and 1e-5 relative otherwise.
#[test]
fn gradients_match_finite_differences() {
    for seed in 21..29 {
        let err = worst_gradient_error(seed, 1e-4);
        assert!(err < 1e-5, "inputs {seed}: {err:e}");
    }
}
