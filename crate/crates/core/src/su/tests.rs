use super::*;
use approx::assert_abs_diff_eq;
use ndarray::array;

fn small(task: Task, seed: u64) -> SuModel {
    let mut m = SuModel::new(task, SuArch { input_dim: 5, hidden: 6, d: 3, decoder_hidden: 4 }, &mut Rng64::from_seed(seed)).unwrap();
    m.channel = ChannelSpec::new(3, 0.3).unwrap();
    m
}

fn toy_features(n: usize, seed: u64) -> (SourceFeatures, Vec<usize>) {
    let mut rng = Rng64::from_seed(seed);
    let mu = rng.normal_matrix(n, 5);
    let sigma = Array2::from_shape_simple_fn((n, 5), || 0.1 + 0.2 * rng.uniform());
    let labels = (0..n).map(|i| usize::from(mu[[i, 0]] + mu[[i, 1]] > 0.0)).collect();
    (SourceFeatures { mu, sigma: Some(sigma) }, labels)
}

/// Trapezoid quadrature of `int p log(p/q)` for scalar Gaussians against
/// `N(0, 1)`.
fn kl_quadrature(mu: f64, sigma: f64) -> f64 {
    let (lo, hi, n) = (mu - 14.0 * sigma, mu + 14.0 * sigma, 200_000);
    let h = (hi - lo) / n as f64;
    let logp = |x: f64| -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let logq = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * logp(x).exp() * (logp(x) - logq(x))
        })
        .sum::<f64>()
        * h
}

#[test]
fn gaussian_kl_oracles() {
    assert_eq!(kl_gaussian(&[0.0; 4], &[1.0; 4]).unwrap(), 0.0);
    assert_abs_diff_eq!(kl_gaussian(&[1.0], &[1.0]).unwrap(), 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(kl_gaussian(&[0.0], &[2.0]).unwrap(), 0.806853, epsilon = 1e-6);
    for &(m, s) in &[(1.0, 1.0), (0.0, 2.0), (-0.7, 0.3), (2.5, 1.4)] {
        assert_abs_diff_eq!(kl_gaussian(&[m], &[s]).unwrap(), kl_quadrature(m, s), epsilon = 1e-6);
    }
    assert!(kl_gaussian(&[0.0], &[0.0]).is_err());
    assert!(kl_gaussian(&[0.0], &[-1.0]).is_err());
}

#[test]
fn loguniform_values() {
    let (v, clamped) = kl_loguniform(&[1.0], &[1.0]).unwrap();
    let exact = 0.63576 / (1.0 + (-1.87320f64).exp()) - 0.5 * 2f64.ln();
    assert_abs_diff_eq!(v, exact, epsilon = 1e-14);
    assert_abs_diff_eq!(v, 0.20458, epsilon = 1e-4);
    assert_eq!(clamped, 0);
    // alpha = 1e8 sits on the clamp edge and is not counted.
    let (v, _) = kl_loguniform(&[1.0], &[1e4]).unwrap();
    assert_abs_diff_eq!(v, LOGUNIFORM_K1, epsilon = 1e-6);
    let (v, clamped) = kl_loguniform(&[0.0, 1e-12], &[0.5, 1.0]).unwrap();
    assert_eq!(clamped, 2);
    assert_abs_diff_eq!(v, 2.0 * loguniform_term(ALPHA_MAX.ln()), epsilon = 1e-12);
}

#[test]
fn loguniform_tracks_monte_carlo_reference() {
    let mut rng = Rng64::from_seed(99);
    for &alpha in &[0.01f64, 0.1, 1.0, 10.0, 100.0] {
        let n = 400_000;
        let sd = alpha.sqrt();
        let mean_log: f64 = (0..n).map(|_| (1.0 + sd * rng.normal()).abs().ln()).sum::<f64>() / n as f64;
        let reference = 0.5 * alpha.ln() - mean_log;
        let formula = loguniform_term(alpha.ln());
        assert!((formula - reference).abs() <= 0.02, "alpha {alpha}: {formula} vs {reference}");
    }
}

#[test]
fn loguniform_rate_term_is_a_bounded_below_divergence() {
    let mut prev = f64::INFINITY;
    for k in -16..=16 {
        let alpha = 10f64.powf(f64::from(k) * 0.5);
        let lat = GaussianLatent::new(array![[1.0]], array![[alpha.sqrt()]]).unwrap();
        let v = kl_terms(PriorFamily::LogUniform, &lat).unwrap().per_row[0];
        assert_abs_diff_eq!(v, LOGUNIFORM_K1 - loguniform_term(alpha.ln()), epsilon = 1e-12);
        assert!(v >= 0.0 && v < prev, "alpha {alpha}: {v}");
        prev = v;
    }
    assert!(prev < 1e-3);
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mu = array![[0.4, -0.8, 0.05]];
    let sigma = array![[0.3, 0.9, 0.2]];
    for family in [PriorFamily::Gaussian, PriorFamily::LogUniform] {
        let t = kl_terms(family, &GaussianLatent::new(mu.clone(), sigma.clone()).unwrap()).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let eval = |dm: f64, ds: f64| {
                let mut m = mu.clone();
                let mut s = sigma.clone();
                m[[0, j]] += dm;
                s[[0, j]] += ds;
                kl_terms(family, &GaussianLatent::new(m, s).unwrap()).unwrap().per_row[0]
            };
            let fd_mu = (eval(h, 0.0) - eval(-h, 0.0)) / (2.0 * h);
            let fd_sigma = (eval(0.0, h) - eval(0.0, -h)) / (2.0 * h);
            assert_abs_diff_eq!(fd_mu, t.d_mu[[0, j]], epsilon = 1e-6);
            assert_abs_diff_eq!(fd_sigma, t.d_sigma[[0, j]], epsilon = 1e-6);
        }
    }
}

#[test]
fn loss_breakdown_identity_and_lambda_zero() {
    let m = small(Task::Binary, 1);
    let (f, labels) = toy_features(20, 2);
    let mut rng = Rng64::from_seed(3);
    let c = f.draw(&(0..20).collect::<Vec<_>>(), &mut rng);
    let noise = SuNoise::draw(20, &m.channel, 2, &mut rng);
    let support = rng.normal_matrix(8, 3);
    let omega = Array1::from_iter((0..8).map(|_| 0.3 * rng.normal()));
    let prior = PriorState {
        mode: PriorMode::IopmGaussian,
        ratio: Some(DreModel::from_parts(support, omega, 1.0, 1.0).unwrap()),
    };
    let (b, _) = su_loss_with_noise(&m, &c, &labels, &prior, 0.3, &noise).unwrap();
    assert!(b.ratio_term != 0.0);
    assert!((b.total - (-b.llh + b.lambda * (b.kl - b.ratio_term))).abs() <= 1e-12);
    let (z, _) = su_loss_with_noise(&m, &c, &labels, &prior, 0.0, &noise).unwrap();
    assert_eq!(z.total, -z.llh);
    assert!(z.kl > 0.0);
}

fn su_param_mut(m: &mut SuModel, net: usize, idx: usize) -> &mut f64 {
    let n = match net {
        0 => &mut m.trunk,
        1 => &mut m.mu_head,
        2 => &mut m.sigma_head,
        _ => &mut m.decoder,
    };
    let mut k = idx;
    for l in n.layers_mut() {
        if k < l.weights.len() {
            return l.weights.iter_mut().nth(k).unwrap();
        }
        k -= l.weights.len();
        if k < l.biases.len() {
            return &mut l.biases[k];
        }
        k -= l.biases.len();
    }
    panic!("index out of range")
}

#[test]
fn gradient_matches_finite_differences() {
    for (task, mode) in [(Task::Binary, PriorMode::EpGaussian), (Task::Digit, PriorMode::IopmLogUniform)] {
        let m = small(task, 4);
        let (f, _) = toy_features(12, 5);
        let labels: Vec<usize> = (0..12).map(|i| i % task.head_dim().max(2)).collect();
        let mut rng = Rng64::from_seed(6);
        let c = f.draw(&(0..12).collect::<Vec<_>>(), &mut rng);
        let noise = SuNoise::draw(12, &m.channel, 2, &mut rng);
        let prior = PriorState {
            mode,
            ratio: Some(DreModel::from_parts(rng.normal_matrix(5, 3), Array1::from_elem(5, 0.2), 1.0, 1.0).unwrap()),
        };
        let lambda = 0.5;
        let (_, g) = su_loss_with_noise(&m, &c, &labels, &prior, lambda, &noise).unwrap();
        // The ratio term is excluded from gradients, so compare against the
        // objective without it.
        let objective = |mm: &SuModel| {
            let (b, _) = su_loss_with_noise(mm, &c, &labels, &prior, lambda, &noise).unwrap();
            b.total + lambda * b.ratio_term
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (net, set) in g.sets().iter().enumerate() {
            for (idx, &a) in set.values().enumerate() {
                let mut up = m.clone();
                *su_param_mut(&mut up, net, idx) += h;
                let mut dn = m.clone();
                *su_param_mut(&mut dn, net, idx) -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
            }
        }
        assert!(worst <= 1e-4, "{mode}: worst relative error {worst}");
    }
}

fn quick_cfg(prior: PriorMode) -> SuConfig {
    SuConfig {
        epochs: 3,
        batch: 16,
        prior,
        dre_samples: 60,
        calibration_rows: 32,
        lambda: 0.05,
        ..Default::default()
    }
}

#[test]
fn ratio_term_does_not_change_the_trajectory() {
    let (f, labels) = toy_features(80, 7);
    let run = |mode: PriorMode| {
        let mut m = small(Task::Binary, 8);
        let metrics = train_su(&mut m, &f, &labels, None, &quick_cfg(mode), &SeedStream::new(9)).unwrap();
        (m, metrics)
    };
    let (ep, ep_metrics) = run(PriorMode::EpGaussian);
    let (iopm, iopm_metrics) = run(PriorMode::IopmGaussian);
    assert_eq!(ep.to_checkpoint().to_bytes(), iopm.to_checkpoint().to_bytes());
    assert!(iopm_metrics[2].ratio_term != 0.0);
    for (a, b) in ep_metrics.iter().zip(&iopm_metrics) {
        assert_eq!(a.llh.to_bits(), b.llh.to_bits());
        assert_eq!(a.kl.to_bits(), b.kl.to_bits());
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let (f, labels) = toy_features(200, 10);
    let cfg = SuConfig {
        epochs: 30,
        lr: 0.3,
        ..quick_cfg(PriorMode::EpGaussian)
    };
    let run = || {
        let mut m = small(Task::Binary, 11);
        let eval = EvalSet { features: &f, labels: &labels };
        let metrics = train_su(&mut m, &f, &labels, Some(eval), &cfg, &SeedStream::new(12)).unwrap();
        (m, metrics)
    };
    let (m1, a) = run();
    let (m2, b) = run();
    assert_eq!(a, b);
    assert_eq!(m1, m2);
    assert!(a.last().unwrap().test_error.unwrap() < 0.3, "{:?}", a.last());
    assert!(a.last().unwrap().llh > a[0].llh);
}

#[test]
fn calibration_hits_target_snr() {
    let mut m = small(Task::Digit, 13);
    let (f, _) = toy_features(500, 14);
    calibrate_channel(&mut m, &f, 10.0, 500, &mut Rng64::from_seed(15)).unwrap();
    let mut rng = Rng64::from_seed(15);
    let idx = random_rows(500, 500, &mut rng);
    let c = f.draw(&idx, &mut rng);
    let lat = m.encode(&c).unwrap();
    let eps = rng.normal_matrix(lat.batch(), lat.dim());
    let p = lat.sample_with(&eps).unwrap().mapv(|v| v * v).mean().unwrap();
    assert_abs_diff_eq!(10.0 * (p / m.channel.noise_std.powi(2)).log10(), 10.0, epsilon = 1e-9);
}

#[test]
fn evaluation_edge_cases() {
    let mut m = small(Task::Digit, 16);
    let last = m.decoder.layers_mut().last_mut().unwrap();
    last.weights.fill(0.0);
    last.biases.fill(0.0);
    let (f, _) = toy_features(100, 17);
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let err = evaluate_task(&m, &f, &labels, 2, &mut Rng64::from_seed(18), false).unwrap();
    assert_abs_diff_eq!(err, 0.9, epsilon = 1e-12);

    let mut m = small(Task::Binary, 19);
    m.channel = ChannelSpec::new(3, 0.0).unwrap();
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let one = evaluate_task(&m, &f, &labels, 1, &mut Rng64::from_seed(20), true).unwrap();
    let many = evaluate_task(&m, &f, &labels, 5, &mut Rng64::from_seed(21), true).unwrap();
    assert_eq!(one, many);
    assert!((0.0..=1.0).contains(&one));
    assert!(evaluate_task(&m, &f, &labels, 0, &mut Rng64::from_seed(0), true).is_err());
}

#[test]
fn checkpoint_roundtrip_and_roles() {
    let m = small(Task::Digit, 22);
    let ckpt = m.to_checkpoint();
    assert_eq!(ckpt.role, "SU2");
    let back = SuModel::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn prior_mode_names_roundtrip() {
    for mode in PriorMode::ALL {
        assert_eq!(mode.to_string().parse::<PriorMode>().unwrap(), mode);
    }
    assert!("gaussian".parse::<PriorMode>().is_err());
}

#[test]
fn loguniform_reference_samples_stay_in_range() {
    let x = PriorFamily::LogUniform.sample(2000, 3, &mut Rng64::from_seed(23));
    assert!(x.iter().all(|v| (LOGUNIFORM_RANGE.0..=LOGUNIFORM_RANGE.1).contains(&v.abs())));
    let positive = x.iter().filter(|v| **v > 0.0).count() as f64 / 6000.0;
    assert!((positive - 0.5).abs() < 0.03);
}
