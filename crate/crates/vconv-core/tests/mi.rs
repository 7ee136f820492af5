//! Mutual-information estimator: density formula anchors, the
//! triple-loop oracle for the contrastive bound, freeze semantics, and
//! calibration against analytic Gaussian MI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vconv_core::adam::{AdamConfig, AdamState};
use vconv_core::mi::{gaussian_log_density, Estimator, MiConfig};
use vconv_core::{Graph, Tensor};

const LN_2PI: f64 = 1.8378770664093453;

fn estimator_f64(dc: usize, ds: usize, hidden: usize, seed: u64) -> Estimator<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Estimator::new(MiConfig::new(dc, ds, hidden), &mut rng).unwrap()
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    l: usize,
    dc: usize,
    ds: usize,
) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let zc = (0..n)
        .map(|_| {
            let data = (0..dc * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::from_vec(&[dc, l], data).unwrap()
        })
        .collect();
    let zs = (0..n)
        .map(|_| {
            let data = (0..ds).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::from_vec(&[ds, 1], data).unwrap()
        })
        .collect();
    (zc, zs)
}

fn column(t: &Tensor<f64>, l: usize) -> Vec<f64> {
    let shape = t.shape();
    let (d, width) = (shape[0], shape[1]);
    (0..d).map(|r| t.data()[r * width + l]).collect()
}

// ── conditional density ──

#[test]
fn log_prob_of_standard_normal_at_mode() {
    let d = 4;
    let x = vec![0.0; d];
    let mu = vec![0.0; d];
    let lv = vec![0.0; d];
    let got = gaussian_log_density(&x, &mu, &lv);
    let want = -(d as f64 / 2.0) * LN_2PI;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn log_prob_matches_hand_computed_gaussian() {
    // d=1, mean 1, variance 4, x = 3: −½·ln(8π) − ½.
    let got = gaussian_log_density(&[3.0], &[1.0], &[4.0f64.ln()]);
    let want = -0.5 * (8.0 * core::f64::consts::PI).ln() - 0.5;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn log_prob_decays_away_from_the_mean() {
    let est = estimator_f64(3, 5, 16, 40);
    let zs = Tensor::from_vec(&[5, 1], vec![0.3, -0.8, 1.1, 0.0, 0.5]).unwrap();
    let (mu, _) = est.q_condition(&zs).unwrap();
    let mut prev = f64::INFINITY;
    for k in 0..6 {
        let mut frame = mu.data().to_vec();
        frame[1] += 0.5 * k as f64;
        let frame = Tensor::from_vec(&[3], frame).unwrap();
        let lp = est.q_log_prob(&frame, &zs).unwrap();
        if k > 0 {
            assert!(lp < prev, "log-density did not decrease at offset {k}");
        }
        prev = lp;
    }
}

#[test]
fn q_log_prob_checks_dimensions() {
    let est = estimator_f64(3, 5, 16, 41);
    let zs = Tensor::from_vec(&[5, 1], vec![0.0; 5]).unwrap();
    let bad = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
    assert!(est.q_log_prob(&bad, &zs).is_err());
}

// ── contrastive upper bound ──

#[test]
fn single_sample_upper_bound_is_exactly_zero() {
    let est = estimator_f64(4, 6, 16, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (zc, zs) = random_batch(&mut rng, 1, 5, 4, 6);
    assert_eq!(est.club_upper(&zc, &zs).unwrap(), 0.0);
}

/// The naive positive-minus-marginal double sum, scored one pair at a
/// time through the public density API.
fn triple_loop_oracle(est: &Estimator<f64>, zc: &[Tensor<f64>], zs: &[Tensor<f64>]) -> f64 {
    let n = zc.len();
    let l = zc[0].shape()[1];
    let mut pos = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        let (mu, lv) = est.q_condition(&zs[i]).unwrap();
        for t in 0..l {
            pos += gaussian_log_density(&column(&zc[i], t), mu.data(), lv.data());
        }
        for m in 0..n {
            for t in 0..l {
                cross += gaussian_log_density(&column(&zc[m], t), mu.data(), lv.data());
            }
        }
    }
    pos / (n * l) as f64 - cross / (n * n * l) as f64
}

#[test]
fn upper_bound_matches_triple_loop_oracle() {
    let est = estimator_f64(5, 7, 24, 44);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for round in 0..5 {
        let (zc, zs) = random_batch(&mut rng, 4, 3, 5, 7);
        let fast = est.club_upper(&zc, &zs).unwrap();
        let slow = triple_loop_oracle(&est, &zc, &zs);
        assert!(
            (fast - slow).abs() < 1e-6,
            "round {round}: {fast} vs oracle {slow}"
        );
    }
}

#[test]
fn model_facing_loss_equals_the_upper_bound() {
    let est = estimator_f64(5, 7, 24, 46);
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (zc, zs) = random_batch(&mut rng, 4, 3, 5, 7);

    let mut g = Graph::new();
    let frozen = est.bind(&mut g, false);
    let zc_v: Vec<_> = zc.iter().map(|t| g.constant(t.clone())).collect();
    let zs_v: Vec<_> = zs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = est.mi_loss(&mut g, &frozen, &zc_v, &zs_v).unwrap();
    let fast = est.club_upper(&zc, &zs).unwrap();
    assert!((g.value(loss).item() - fast).abs() < 1e-6);
}

#[test]
fn swapped_contrast_negates_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let mut cfg = MiConfig::new(4, 6, 16);
    cfg.swap_contrast = true;
    let est: Estimator<f64> = Estimator::new(cfg, &mut rng).unwrap();
    let (zc, zs) = random_batch(&mut rng, 3, 2, 4, 6);
    let mut g = Graph::new();
    let frozen = est.bind(&mut g, false);
    let zc_v: Vec<_> = zc.iter().map(|t| g.constant(t.clone())).collect();
    let zs_v: Vec<_> = zs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = est.mi_loss(&mut g, &frozen, &zc_v, &zs_v).unwrap();
    let upper = est.club_upper(&zc, &zs).unwrap();
    assert!((g.value(loss).item() + upper).abs() < 1e-6);
}

#[test]
fn identical_conditions_collapse_the_loss_to_zero() {
    let est = estimator_f64(4, 6, 16, 49);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (zc, mut zs) = random_batch(&mut rng, 5, 4, 4, 6);
    let shared = zs[0].clone();
    for z in &mut zs {
        *z = shared.clone();
    }
    let upper = est.club_upper(&zc, &zs).unwrap();
    assert!(upper.abs() < 1e-6, "upper bound {upper} should vanish");
}

#[test]
fn upper_bound_is_batch_order_invariant() {
    let est = estimator_f64(4, 6, 16, 51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (zc, zs) = random_batch(&mut rng, 6, 3, 4, 6);
    let base = est.club_upper(&zc, &zs).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let zc_p: Vec<_> = perm.iter().map(|&i| zc[i].clone()).collect();
    let zs_p: Vec<_> = perm.iter().map(|&i| zs[i].clone()).collect();
    let permuted = est.club_upper(&zc_p, &zs_p).unwrap();
    assert!((base - permuted).abs() < 1e-9, "{base} vs {permuted}");
}

#[test]
fn frozen_estimator_passes_gradients_to_codes_only() {
    let est = estimator_f64(4, 6, 16, 53);
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let (zc, zs) = random_batch(&mut rng, 3, 2, 4, 6);

    let mut g = Graph::new();
    let frozen = est.bind(&mut g, false);
    let zc_v: Vec<_> = zc.iter().map(|t| g.trainable(t.clone())).collect();
    let zs_v: Vec<_> = zs.iter().map(|t| g.trainable(t.clone())).collect();
    let loss = est.mi_loss(&mut g, &frozen, &zc_v, &zs_v).unwrap();
    g.backward(loss).unwrap();

    for (id, name, _) in est.params.iter() {
        assert!(
            g.grad(frozen.var(id)).is_none(),
            "gradient leaked into frozen parameter {name}"
        );
    }
    for (&v, label) in zc_v.iter().zip(std::iter::repeat("content")) {
        assert!(g.grad(v).is_some(), "no gradient for a {label} input");
    }
    for (&v, label) in zs_v.iter().zip(std::iter::repeat("condition")) {
        assert!(g.grad(v).is_some(), "no gradient for a {label} input");
    }
}

// ── statistics-net lower bound ──

#[test]
fn constant_statistics_net_scores_zero() {
    let mut est = estimator_f64(4, 6, 16, 55);
    let zero_ids: Vec<_> = est
        .params
        .iter()
        .filter(|(_, name, _)| name.starts_with("t."))
        .map(|(id, _, t)| (id, Tensor::zeros(t.shape())))
        .collect();
    for (id, z) in zero_ids {
        est.params.set(id, z).unwrap();
    }
    // Constant offset c cancels between the joint and marginal terms.
    let out_b = est.params.by_name("t.out.b").unwrap();
    est.params
        .set(out_b, Tensor::from_vec(&[1], vec![0.7]).unwrap())
        .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let (zc, zs) = random_batch(&mut rng, 5, 3, 4, 6);
    let lower = est.mine_lower(&zc, &zs, 123).unwrap();
    assert!(lower.abs() < 1e-9, "constant scores gave {lower}");
}

#[test]
fn lower_bound_requires_a_real_batch() {
    let est = estimator_f64(4, 6, 16, 57);
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    let (zc, zs) = random_batch(&mut rng, 1, 3, 4, 6);
    assert!(est.mine_lower(&zc, &zs, 0).is_err());
}

#[test]
fn batch_shape_mismatches_are_rejected() {
    let mut est = estimator_f64(4, 6, 16, 59);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    let (zc, zs) = random_batch(&mut rng, 3, 2, 4, 6);

    let empty: Vec<Tensor<f64>> = vec![];
    assert!(est.cmi_train_step(&empty, &[], &mut opt, 0).is_err());
    assert!(est.cmi_train_step(&zc[..2], &zs, &mut opt, 0).is_err());

    let (bad_zc, _) = random_batch(&mut rng, 3, 2, 5, 6);
    assert!(est.cmi_train_step(&bad_zc, &zs, &mut opt, 0).is_err());
    let (_, bad_zs) = random_batch(&mut rng, 3, 2, 4, 7);
    assert!(est.cmi_train_step(&zc, &bad_zs, &mut opt, 0).is_err());
}

// ── joint training step ──

#[test]
fn gap_penalty_is_the_hinge_of_the_reported_bounds() {
    let mut est = estimator_f64(4, 6, 24, 61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    for step in 0..20 {
        let (zc, zs) = random_batch(&mut rng, 6, 2, 4, 6);
        let rep = est.cmi_train_step(&zc, &zs, &mut opt, step).unwrap();
        let e = rep.estimates;
        let hinge = (e.lower - e.upper).max(0.0);
        assert!(
            (e.gap_penalty - hinge).abs() < 1e-9,
            "step {step}: gap {} vs hinge {hinge}",
            e.gap_penalty
        );
        assert!((e.t_loss + e.lower).abs() < 1e-9);
        assert!(rep.stepped);
    }
}

#[test]
fn density_fit_improves_over_early_steps() {
    let mut est: Estimator<f32> = {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        Estimator::new(MiConfig::new(4, 4, 32), &mut rng).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    let (zc, zs) = gaussian_pairs(&mut rng, 64, 4, 0.5);
    let mut nll = Vec::new();
    for step in 0..50 {
        let rep = est.cmi_train_step(&zc, &zs, &mut opt, step).unwrap();
        nll.push(rep.estimates.q_nll);
    }
    let head: f64 = nll[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = nll[45..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < head,
        "density fit did not improve: first {head}, last {tail}"
    );
}

#[test]
fn training_trajectory_is_seed_deterministic() {
    let run = || {
        let mut est: Estimator<f32> = {
            let mut rng = ChaCha8Rng::seed_from_u64(65);
            Estimator::new(MiConfig::new(3, 3, 16), &mut rng).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
        let mut out = Vec::new();
        for step in 0..10 {
            let (zc, zs) = gaussian_pairs(&mut rng, 16, 3, 0.3);
            let rep = est.cmi_train_step(&zc, &zs, &mut opt, step).unwrap();
            out.push(rep.estimates);
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn estimates_stay_finite_under_extreme_codes() {
    let mut est = estimator_f64(4, 6, 16, 67);
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    let zc: Vec<_> = (0..3)
        .map(|i| Tensor::full(&[4, 2], (i as f64 - 1.0) * 1e6))
        .collect();
    let zs: Vec<_> = (0..3)
        .map(|i| Tensor::full(&[6, 1], (1 - i as i64) as f64 * 1e6))
        .collect();
    let rep = est.cmi_train_step(&zc, &zs, &mut opt, 7).unwrap();
    let e = rep.estimates;
    for v in [e.upper, e.lower, e.q_nll, e.t_loss, e.gap_penalty] {
        assert!(v.is_finite(), "non-finite estimate under extreme inputs");
    }
    assert!(rep.stepped);
}

#[test]
fn ema_corrected_marginal_still_trains() {
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    let mut cfg = MiConfig::new(4, 4, 16);
    cfg.marginal_ema = Some(0.99);
    let mut est: Estimator<f64> = Estimator::new(cfg, &mut rng).unwrap();
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    for step in 0..10 {
        let (zc, zs) = gaussian_pairs(&mut rng, 16, 4, 0.5);
        let rep = est.cmi_train_step(&zc, &zs, &mut opt, step).unwrap();
        assert!(rep.stepped);
        assert!(rep.estimates.lower.is_finite());
    }
}

// ── calibration on analytic Gaussian MI ──

/// Correlated pairs: z_S = ρ·z_C + √(1−ρ²)·ε per dimension, giving
/// true MI = −(d/2)·ln(1−ρ²).
fn gaussian_pairs<T: vconv_core::Scalar>(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    rho: f64,
) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
    let noise = (1.0 - rho * rho).sqrt();
    let mut zc = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| rho * v + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        zc.push(Tensor::from_vec(&[d, 1], x.iter().map(|&v| T::from_f64(v)).collect()).unwrap());
        zs.push(Tensor::from_vec(&[d, 1], y.iter().map(|&v| T::from_f64(v)).collect()).unwrap());
    }
    (zc, zs)
}

struct Calibration {
    upper: f64,
    lower: f64,
    hinge: f64,
}

/// Joint training on fresh correlated batches, then both bounds read
/// off large held-out batches.
fn calibrate(rho: f64, d: usize, steps: usize, seed: u64) -> Calibration {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est: Estimator<f32> =
        Estimator::new(MiConfig::new(d, d, 64), &mut init_rng).unwrap();
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-3), &est.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    for step in 0..steps {
        let (zc, zs) = gaussian_pairs(&mut rng, 128, d, rho);
        let rep = est.cmi_train_step(&zc, &zs, &mut opt, step as u64).unwrap();
        assert!(rep.stepped, "estimator step {step} skipped");
    }
    let mut upper = 0.0;
    let mut lower = 0.0;
    let rounds = 4;
    for r in 0..rounds {
        let (zc, zs) = gaussian_pairs(&mut rng, 1024, d, rho);
        upper += est.club_upper(&zc, &zs).unwrap();
        lower += est.mine_lower(&zc, &zs, 1000 + r).unwrap();
    }
    upper /= rounds as f64;
    lower /= rounds as f64;
    Calibration {
        upper,
        lower,
        hinge: (lower - upper).max(0.0),
    }
}

fn true_mi(rho: f64, d: usize) -> f64 {
    -(d as f64 / 2.0) * (1.0 - rho * rho).ln()
}

fn assert_bracket(rho: f64, d: usize, steps: usize, seed: u64) -> Calibration {
    let mi = true_mi(rho, d);
    let c = calibrate(rho, d, steps, seed);
    assert!(
        c.upper >= mi - 0.1,
        "ρ={rho}: upper {:.4} under true {mi:.4} − 0.1",
        c.upper
    );
    assert!(
        c.lower <= mi + 0.05,
        "ρ={rho}: lower {:.4} over true {mi:.4} + 0.05",
        c.lower
    );
    if rho >= 0.3 {
        assert!(
            c.lower >= 0.6 * mi,
            "ρ={rho}: lower {:.4} under 0.6·true ({:.4})",
            c.lower,
            0.6 * mi
        );
    }
    assert!(c.hinge < 0.02, "ρ={rho}: hinge residual {:.4}", c.hinge);
    c
}

#[test]
fn gaussian_bracket_independent() {
    let c = assert_bracket(0.0, 4, 1500, 70);
    // Independent variables: the lower estimate sits near zero.
    assert!(
        (-0.05..=0.1).contains(&c.lower),
        "independent-data lower bound {:.4} strayed from 0",
        c.lower
    );
}

#[test]
fn gaussian_bracket_rho_03() {
    assert_bracket(0.3, 4, 1500, 71);
}

#[test]
fn gaussian_bracket_rho_05() {
    assert_bracket(0.5, 4, 1500, 72);
}

#[test]
fn gaussian_bracket_rho_07() {
    assert_bracket(0.7, 4, 2500, 73);
}

#[test]
fn gaussian_bracket_scalar_dimension() {
    assert_bracket(0.5, 1, 1500, 74);
}
