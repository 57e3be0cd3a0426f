use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use surebridge::nmeans::scalar_fit_latent;
use surebridge::regression::{
    conditional_posterior, conditional_posterior_primal, posterior_summary, posterior_summary_with,
    regression_diagnostics, ModelConfig, NoiseModel, RegressionEngine, SummaryOptions,
};
use surebridge::{LatentDraws, StableIndex};

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let b = gaussian_matrix(n, n, seed);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn cfg(alpha: f64, nu: f64, noise: NoiseModel, draws: usize) -> ModelConfig {
    ModelConfig {
        alpha,
        nu,
        noise,
        draws,
        seed: 11,
    }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn rel_err_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn identity_design_matches_scalar_conditional_mean() {
    let n = 7;
    let y = gaussian_vector(n, 1) * 2.0;
    let t: Vec<f64> = (0..n).map(|i| 0.2 + i as f64 * 0.7).collect();
    let c = cfg(1.0, 1.7, NoiseModel::Scalar(0.8), 10);
    let cond = conditional_posterior(&DMatrix::identity(n, n), &y, &c, &t).unwrap();
    for i in 0..n {
        let expected = c.nu * y[i] / (0.8 * t[i] + c.nu);
        assert!((cond.beta_mean[i] - expected).abs() < 1e-12);
        let expected_var = 0.8 * c.nu / (0.8 * t[i] + c.nu);
        assert!((cond.fitted_cov[(i, i)] - expected_var).abs() < 1e-12);
    }
}

#[test]
fn constant_latent_scale_is_ridge() {
    let (n, p) = (12, 30);
    let x = gaussian_matrix(n, p, 2);
    let y = gaussian_vector(n, 3);
    let sigma2 = 0.7;
    let c = cfg(0.8, 2.5, NoiseModel::Scalar(sigma2), 10);
    let t_const = 1.9;
    let cond = conditional_posterior(&x, &y, &c, &vec![t_const; p]).unwrap();
    let mut gram = x.transpose() * &x;
    for i in 0..p {
        gram[(i, i)] += t_const * sigma2 / c.nu;
    }
    let ridge = gram.cholesky().unwrap().solve(&(x.transpose() * &y));
    assert!(rel_err_v(&cond.beta_mean, &ridge) < 1e-8);
}

#[test]
fn woodbury_routes_agree() {
    let (n, p) = (8, 20);
    for seed in 0..5 {
        let x = gaussian_matrix(n, p, 10 + seed);
        let y = gaussian_vector(n, 20 + seed);
        let t: Vec<f64> = LatentDraws::generate(StableIndex::bridge(0.9).unwrap(), 1, p, seed)
            .unwrap()
            .row(0)
            .to_vec();
        for noise in [NoiseModel::Scalar(1.3), NoiseModel::Full(spd(n, 30 + seed))] {
            let c = cfg(0.9, 0.6, noise, 1);
            let cond = conditional_posterior(&x, &y, &c, &t).unwrap();
            let (mean, cov) = conditional_posterior_primal(&x, &y, &c, &t).unwrap();
            assert!(rel_err_v(&cond.beta_mean, &mean) < 1e-8);
            assert!(rel_err(&cond.beta_cov, &cov) < 1e-8);
            assert!(rel_err_v(&cond.fitted_mean, &(&x * &cond.beta_mean)) < 1e-10);
            let projected = &x * &cond.beta_cov * x.transpose();
            assert!(rel_err(&cond.fitted_cov, &projected) < 1e-8);
            let sigma = c.noise.matrix(n);
            let diff = (&cond.v_mat - &sigma / c.nu - &cond.a_mat).amax();
            assert!(diff <= 4.0 * f64::EPSILON * cond.v_mat.amax());
        }
    }
}

#[test]
fn conditional_input_validation() {
    let x = gaussian_matrix(4, 3, 1);
    let y = gaussian_vector(4, 2);
    let c = cfg(1.0, 1.0, NoiseModel::Scalar(1.0), 1);
    assert!(conditional_posterior(&x, &y, &c, &[1.0, 1.0]).is_err());
    assert!(conditional_posterior(&x, &y, &c, &[1.0, -1.0, 1.0]).is_err());
    assert!(conditional_posterior(&x, &gaussian_vector(5, 1), &c, &[1.0; 3]).is_err());
    let bad = cfg(1.0, 1.0, NoiseModel::Full(DMatrix::from_element(4, 4, 1.0)), 1);
    assert!(conditional_posterior(&x, &y, &bad, &[1.0; 3]).is_err());
}

/// Independent mixture oracle: one Cholesky-route conditional posterior per draw,
/// log-sum-exp weights, and explicit moment assembly.
struct Oracle {
    weights: Vec<f64>,
    log_marginal: f64,
    beta_mean: DVector<f64>,
    fitted_mean: DVector<f64>,
    fitted_cov: DMatrix<f64>,
    beta_second: DMatrix<f64>,
}

fn oracle(x: &DMatrix<f64>, y: &DVector<f64>, c: &ModelConfig, draws: &LatentDraws) -> Oracle {
    let conds: Vec<_> = (0..draws.rows())
        .map(|j| conditional_posterior(x, y, c, draws.row(j)).unwrap())
        .collect();
    let max = conds
        .iter()
        .map(|c| c.log_cond_marginal)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = conds.iter().map(|c| (c.log_cond_marginal - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let (n, p) = (x.nrows(), x.ncols());
    let mut beta_mean = DVector::zeros(p);
    let mut fitted_mean = DVector::zeros(n);
    let mut fitted_second = DMatrix::zeros(n, n);
    let mut beta_second = DMatrix::zeros(p, p);
    for (w, c) in weights.iter().zip(&conds) {
        beta_mean += &c.beta_mean * *w;
        fitted_mean += &c.fitted_mean * *w;
        fitted_second += (&c.fitted_cov + &c.fitted_mean * c.fitted_mean.transpose()) * *w;
        beta_second += (&c.beta_cov + &c.beta_mean * c.beta_mean.transpose()) * *w;
    }
    let fitted_cov = fitted_second - &fitted_mean * fitted_mean.transpose();
    Oracle {
        weights,
        log_marginal: max + (total / draws.rows() as f64).ln(),
        beta_mean,
        fitted_mean,
        fitted_cov,
        beta_second,
    }
}

#[test]
fn spectral_engine_matches_direct_oracle() {
    let (n, p, j) = (6, 9, 40);
    let x = gaussian_matrix(n, p, 5);
    let y = gaussian_vector(n, 6) * 1.5;
    for noise in [NoiseModel::Scalar(0.6), NoiseModel::Full(spd(n, 7))] {
        let c = cfg(1.2, 0.4, noise, j);
        let draws = c.generate_draws(p).unwrap();
        let o = oracle(&x, &y, &c, &draws);
        let engine = RegressionEngine::new(&x, &y, &c.noise, c.alpha, &draws).unwrap();
        assert!(engine.is_cached());
        let s = engine
            .summary(
                c.nu,
                SummaryOptions {
                    fitted_cov: true,
                    beta_second_moment: true,
                },
            )
            .unwrap();
        for (a, b) in s.weights.iter().zip(&o.weights) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((s.log_marginal_hat - o.log_marginal).abs() < 1e-10);
        assert!(rel_err_v(&s.beta_mean, &o.beta_mean) < 1e-9);
        assert!(rel_err_v(&s.fitted_mean, &o.fitted_mean) < 1e-9);
        let fc = s.fitted_cov.as_ref().unwrap();
        assert!(rel_err(fc, &o.fitted_cov) < 1e-9);
        assert!((s.fitted_cov_trace - o.fitted_cov.trace()).abs() < 1e-9 * o.fitted_cov.trace());
        assert!(rel_err(s.beta_second_moment.as_ref().unwrap(), &o.beta_second) < 1e-9);

        // Fitted-value identities on the engine's own output.
        assert!(rel_err_v(&s.fitted_mean, &(&x * &s.beta_mean)) < 1e-12);
        let var_beta = s.beta_second_moment.as_ref().unwrap() - &s.beta_mean * s.beta_mean.transpose();
        assert!(rel_err(fc, &(&x * var_beta * x.transpose())) < 1e-10);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let eig = fc.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -1e-8 * eig.max());

        let uncached = RegressionEngine::with_cache_limit(&x, &y, &c.noise, c.alpha, &draws, 0).unwrap();
        assert!(!uncached.is_cached());
        let e1 = engine.evaluate(c.nu).unwrap();
        let e2 = uncached.evaluate(c.nu).unwrap();
        assert_eq!(e1.fitted_mean, e2.fitted_mean);
        assert_eq!(e1.fitted_cov_trace, e2.fitted_cov_trace);
        assert!(rel_err_v(&e1.fitted_mean, &s.fitted_mean) < 1e-10);

        let both = SummaryOptions {
            fitted_cov: true,
            beta_second_moment: true,
        };
        let d = posterior_summary_with(&x, &y, &c, &draws, both).unwrap();
        assert!((d.log_marginal_hat - s.log_marginal_hat).abs() < 1e-10);
        assert!(rel_err_v(&d.beta_mean, &s.beta_mean) < 1e-9);
        assert!(rel_err_v(&d.fitted_mean, &s.fitted_mean) < 1e-9);
        assert!(rel_err(d.fitted_cov.as_ref().unwrap(), fc) < 1e-9);
        assert!((d.fitted_cov_trace - s.fitted_cov_trace).abs() < 1e-9 * s.fitted_cov_trace);
        assert!(rel_err(d.beta_second_moment.as_ref().unwrap(), &o.beta_second) < 1e-9);
        let lean = posterior_summary_with(&x, &y, &c, &draws, SummaryOptions::default()).unwrap();
        assert!(lean.fitted_cov.is_none() && lean.beta_second_moment.is_none());
        assert_eq!(lean.fitted_cov_trace, d.fitted_cov_trace);
    }
}

#[test]
fn grid_evaluation_matches_single_evaluations() {
    let (n, p, j) = (7, 12, 60);
    let x = gaussian_matrix(n, p, 41);
    let y = gaussian_vector(n, 42) * 2.0;
    let c = cfg(0.8, 1.0, NoiseModel::Full(spd(n, 43)), j);
    let draws = c.generate_draws(p).unwrap();
    let engine = RegressionEngine::new(&x, &y, &c.noise, c.alpha, &draws).unwrap();
    let nus = [1e-3, 0.1, 1.0, 30.0, 1e4];
    let many = engine.evaluate_many(&nus).unwrap();
    for (nu, ev) in nus.iter().zip(many) {
        let ev = ev.unwrap();
        let single = engine.evaluate(*nu).unwrap();
        assert!(rel_err_v(&ev.fitted_mean, &single.fitted_mean) < 1e-12);
        assert!((ev.fitted_cov_trace - single.fitted_cov_trace).abs() < 1e-12 * single.fitted_cov_trace);
        let direct = posterior_summary(&x, &y, &ModelConfig { nu: *nu, ..c.clone() }, &draws).unwrap();
        assert!(rel_err_v(&ev.fitted_mean, &direct.fitted_mean) < 1e-8);
        assert!((ev.fitted_cov_trace - direct.fitted_cov_trace).abs() < 1e-8 * direct.fitted_cov_trace);
        assert!((ev.log_marginal_hat - direct.log_marginal_hat).abs() < 1e-9);
        assert!((ev.residual_sq - (&y - &direct.fitted_mean).norm_squared()).abs() < 1e-8 * y.norm_squared());
    }
    assert!(engine.evaluate(0.0).is_err());
    assert!(engine.evaluate(f64::NAN).is_err());
}

#[test]
fn zero_response_gives_zero_fit() {
    let x = gaussian_matrix(5, 8, 1);
    let y = DVector::zeros(5);
    let c = cfg(0.7, 1.0, NoiseModel::Scalar(1.0), 50);
    let s = posterior_summary(&x, &y, &c, &c.generate_draws(8).unwrap()).unwrap();
    assert!(s.beta_mean.iter().all(|v| *v == 0.0));
    assert!(s.fitted_mean.iter().all(|v| *v == 0.0));
}

#[test]
fn null_design_fits_nothing() {
    let y = gaussian_vector(4, 9);
    for p in [0, 3] {
        let x = DMatrix::zeros(4, p);
        let c = cfg(1.0, 1.0, NoiseModel::Scalar(2.0), 20);
        let s = posterior_summary(&x, &y, &c, &c.generate_draws(p).unwrap()).unwrap();
        assert_eq!(s.fitted_mean, DVector::zeros(4));
        assert_eq!(s.fitted_cov_trace, 0.0);
        assert_eq!(s.beta_mean.len(), p);
        let expected = -0.5 * (4.0 * (2.0 * std::f64::consts::PI * 2.0).ln() + y.norm_squared() / 2.0);
        assert!((s.log_marginal_hat - expected).abs() < 1e-12);
    }
}

#[test]
fn single_observation_matches_scalar_fit() {
    let y = DVector::from_vec(vec![1.7]);
    let x = DMatrix::identity(1, 1);
    let c = cfg(0.9, 0.8, NoiseModel::Scalar(1.4), 3000);
    let draws = c.generate_draws(1).unwrap();
    let s = posterior_summary(&x, &y, &c, &draws).unwrap();
    let latent: Vec<f64> = draws.column(0).collect();
    let scalar = scalar_fit_latent(1.7, c.nu, 1.4, &latent).unwrap();
    assert!((s.beta_mean[0] - scalar.mean_hat).abs() < 1e-10);
    assert!((s.fitted_cov.unwrap()[(0, 0)] - scalar.variance_hat).abs() < 1e-10);
    assert!((s.log_marginal_hat - scalar.log_marginal_hat).abs() < 1e-10);
}

#[test]
fn identity_design_uses_joint_weights() {
    let n = 4;
    let y = gaussian_vector(n, 4) * 2.0;
    let c = cfg(1.0, 1.1, NoiseModel::Scalar(1.0), 500);
    let draws = c.generate_draws(n).unwrap();
    let s = posterior_summary(&DMatrix::identity(n, n), &y, &c, &draws).unwrap();
    // Joint weights from products of scalar likelihoods.
    let log_w: Vec<f64> = (0..draws.rows())
        .map(|j| {
            (0..n)
                .map(|i| {
                    let v = 1.0 + c.nu / draws.get(j, i);
                    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + y[i] * y[i] / v)
                })
                .sum()
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for i in 0..n {
        let mean: f64 = (0..draws.rows())
            .map(|j| w[j] / total * c.nu * y[i] / (draws.get(j, i) + c.nu))
            .sum();
        assert!((s.beta_mean[i] - mean).abs() < 1e-10);
    }
}

#[test]
fn shifting_log_likelihoods_leaves_summary_unchanged() {
    // A scalar noise model and the equivalent full covariance differ only by
    // the constant in log p(y|t); weights and moments must not move.
    let (n, p) = (5, 7);
    let x = gaussian_matrix(n, p, 40);
    let y = gaussian_vector(n, 41);
    let draws = LatentDraws::generate(StableIndex::bridge(1.0).unwrap(), 100, p, 3).unwrap();
    let a = RegressionEngine::new(&x, &y, &NoiseModel::Scalar(1.0), 1.0, &draws).unwrap();
    let b = RegressionEngine::new(&(&x * 1e3), &(&y * 1e3), &NoiseModel::Scalar(1e6), 1.0, &draws).unwrap();
    let ea = a.evaluate(0.5).unwrap();
    let eb = b.evaluate(0.5).unwrap();
    for (wa, wb) in ea.weights.iter().zip(&eb.weights) {
        assert!((wa - wb).abs() < 1e-14);
    }
    assert!((eb.log_marginal_hat - ea.log_marginal_hat + n as f64 * 1e3f64.ln()).abs() < 1e-9);
    assert!(rel_err_v(&(eb.fitted_mean / 1e3), &ea.fitted_mean) < 1e-12);
    assert!((eb.fitted_cov_trace / 1e6 - ea.fitted_cov_trace).abs() < 1e-12 * ea.fitted_cov_trace);
}

#[test]
fn diagnostics_are_finite_and_ordered() {
    let (n, p) = (10, 25);
    let x = gaussian_matrix(n, p, 50);
    let y = gaussian_vector(n, 51);
    let c = cfg(1.0, 0.5, NoiseModel::Scalar(1.0), 300);
    let draws = c.generate_draws(p).unwrap();
    let d = regression_diagnostics(&x, &y, &c, &draws).unwrap();
    assert!((d.k_moments[0] - 4.0).abs() < 1e-12);
    assert!((d.k_moments[1] - 32.0).abs() < 1e-10);
    assert!(d.c_const > 0.0 && d.c_const.is_finite());
    assert!(d.big_m > 0.0 && d.m_bound > 0.0);
    assert!(d.log_var_bounds.iter().all(|v| v.is_finite()));
    assert!(d.min_log_det_excess > 0.0);
    // m(y) > exp(-y'y/2) C on the same draws.
    let s = posterior_summary(&x, &y, &c, &draws).unwrap();
    assert!(s.log_marginal_hat > -0.5 * y.norm_squared() + d.log_c_const);
}
