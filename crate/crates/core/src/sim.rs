//! Simulation designs and the experiment runner: equicorrelated designs, sparse
//! signals, Gaussian or heavy-tailed noise, SURE against out-of-sample SSE.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, BridgeError, Result};
use crate::model::{fit, FitConfig, Method, DEFAULT_DRAWS};
use crate::orthogonal::svd_reduce;
use crate::regression::NoiseModel;
use crate::ridge::RidgeObjective;
use crate::sure::{sure_profile, NuGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianIid,
    /// Student-t scaled to unit variance (`df > 2`).
    StudentT {
        df: f64,
    },
    /// Unit-variance Gaussian noise with common correlation `r`.
    GaussianEquicorrelated {
        r: f64,
    },
}

/// How the out-of-sample responses of a replicate are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSet {
    /// Fresh noise on the training design, the risk SURE estimates.
    #[default]
    FreshNoise,
    /// A fresh design of `n` rows and fresh noise.
    FreshDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    /// Signals occupy the last `signal_count` coordinates.
    pub signal_count: usize,
    pub signal_value: f64,
    /// Gaussian perturbation added to every coefficient.
    pub coef_noise_sd: f64,
    pub noise_kind: NoiseKind,
    pub test_set: TestSet,
    pub alpha_grid: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// Monte Carlo size `J` of each fit.
    pub draws: usize,
    pub method: Method,
    /// Noise variance assumed by the fits.
    pub sigma2: f64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            n: 100,
            p: 1000,
            rho: 0.9,
            signal_count: 10,
            signal_value: 10.0,
            coef_noise_sd: 0.1,
            noise_kind: NoiseKind::GaussianIid,
            test_set: TestSet::FreshNoise,
            alpha_grid: vec![0.7],
            replicates: 100,
            seed: 0,
            draws: DEFAULT_DRAWS,
            method: Method::Regression,
            sigma2: 1.0,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(invalid("n and p must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.signal_count > self.p {
            return Err(invalid(format!(
                "{} signals requested but p = {}",
                self.signal_count, self.p
            )));
        }
        if !(self.coef_noise_sd >= 0.0 && self.coef_noise_sd.is_finite() && self.signal_value.is_finite()) {
            return Err(invalid("signal value and coefficient noise sd must be finite, sd >= 0"));
        }
        match self.noise_kind {
            NoiseKind::StudentT { df } if !(df > 2.0 && df.is_finite()) => {
                return Err(invalid(format!("Student-t noise needs df > 2, got {df}")));
            }
            NoiseKind::GaussianEquicorrelated { r } if !(0.0..1.0).contains(&r) => {
                return Err(invalid(format!("noise correlation must lie in [0, 1), got {r}")));
            }
            _ => {}
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 2.0)) {
            return Err(invalid("alpha_grid must be a nonempty subset of (0, 2)"));
        }
        if self.replicates == 0 {
            return Err(invalid("at least one replicate is required"));
        }
        if self.draws < 2 {
            return Err(invalid("at least two Monte Carlo draws are required"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(invalid("sigma2 must be positive and finite"));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn design_from(rng: &mut impl Rng, n: usize, p: usize, rho: f64) -> DMatrix<f64> {
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let g = normal(rng);
        for j in 0..p {
            x[(i, j)] = a * g + b * normal(rng);
        }
    }
    x
}

/// Rows i.i.d. `N(0, (1 - rho) I + rho 1 1^T)` via a shared factor per row.
pub fn gen_equicorrelated_design(n: usize, p: usize, rho: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok(design_from(&mut ChaCha8Rng::seed_from_u64(seed), n, p, rho))
}

fn gen_noise(rng: &mut impl Rng, n: usize, kind: NoiseKind) -> Result<DVector<f64>> {
    Ok(match kind {
        NoiseKind::GaussianIid => DVector::from_fn(n, |_, _| normal(rng)),
        NoiseKind::StudentT { df } => {
            let t = StudentT::new(df).map_err(|e| invalid(e.to_string()))?;
            let scale = ((df - 2.0) / df).sqrt();
            DVector::from_fn(n, |_, _| t.sample(rng) * scale)
        }
        NoiseKind::GaussianEquicorrelated { r } => {
            let g = normal(rng);
            let (a, b) = (r.sqrt(), (1.0 - r).sqrt());
            DVector::from_fn(n, |_, _| a * g + b * normal(rng))
        }
    })
}

fn beta_from(rng: &mut impl Rng, d: &SimDesign) -> DVector<f64> {
    let start = d.p - d.signal_count;
    DVector::from_fn(d.p, |j, _| {
        let base = if j >= start { d.signal_value } else { 0.0 };
        base + d.coef_noise_sd * normal(rng)
    })
}

/// `(y, beta_true)` with `y = X beta + eps`.
pub fn gen_response(x: &DMatrix<f64>, design: &SimDesign, seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
    design.validate()?;
    if x.ncols() != design.p {
        return Err(mismatch(format!(
            "X has {} columns, design has p = {}",
            x.ncols(),
            design.p
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = beta_from(&mut rng, design);
    let eps = gen_noise(&mut rng, x.nrows(), design.noise_kind)?;
    Ok((x * &beta + eps, beta))
}

/// Training and test data of one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    /// Seed for the latent draws of this replicate's fits.
    pub draw_seed: u64,
}

/// Replicate `r` uses stream `r` of the design seed.
pub fn replicate_data(design: &SimDesign, r: usize) -> Result<ReplicateData> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(r as u64);
    let beta = beta_from(&mut rng, design);
    let x = design_from(&mut rng, design.n, design.p, design.rho);
    let y = &x * &beta + gen_noise(&mut rng, design.n, design.noise_kind)?;
    let x_test = match design.test_set {
        TestSet::FreshNoise => x.clone(),
        TestSet::FreshDesign => design_from(&mut rng, design.n, design.p, design.rho),
    };
    let y_test = &x_test * &beta + gen_noise(&mut rng, design.n, design.noise_kind)?;
    let draw_seed = rng.next_u64();
    Ok(ReplicateData {
        x,
        y,
        beta,
        x_test,
        y_test,
        draw_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub alpha: f64,
    pub replicate: usize,
    pub nu_star: f64,
    pub sure: f64,
    pub sse: f64,
    pub fit_seconds: f64,
    pub ess: f64,
    pub low_ess: bool,
    pub ridge_nu: f64,
    pub ridge_sure: f64,
    pub ridge_sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub replicates: usize,
    pub sure_mean: f64,
    pub sure_sd: f64,
    pub sse_mean: f64,
    pub sse_sd: f64,
    pub time_mean: f64,
    pub ridge_sure_mean: f64,
    pub ridge_sse_mean: f64,
    pub ridge_sse_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<AlphaSummary>,
}

/// Sample mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn run_replicate(design: &SimDesign, r: usize) -> Result<Vec<ReplicateRow>> {
    let data = replicate_data(design, r)?;
    let basis = svd_reduce(&data.x, &data.y)?;
    let ridge = RidgeObjective::new(basis, design.sigma2)?;
    let ridge_path = sure_profile(&ridge, &NuGrid::default())?;
    let ridge_fit = ridge.fit(ridge_path.nu_star)?;
    let ridge_sse = (&data.y_test - &data.x_test * &ridge_fit.beta).norm_squared();
    design
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let cfg = FitConfig {
                alpha,
                noise: NoiseModel::Scalar(design.sigma2),
                draws: design.draws,
                seed: data.draw_seed,
                method: Some(design.method),
                nu: None,
                grid: NuGrid::default(),
            };
            let start = Instant::now();
            let model = fit(&data.x, &data.y, &cfg)?;
            let fit_seconds = start.elapsed().as_secs_f64();
            let pred = model.predict_fitted_units(&data.x_test)?;
            Ok(ReplicateRow {
                alpha,
                replicate: r,
                nu_star: model.nu,
                sure: model.sure.expect("scalar noise"),
                sse: (&data.y_test - pred).norm_squared(),
                fit_seconds,
                ess: model.ess,
                low_ess: model.low_ess,
                ridge_nu: ridge_path.nu_star,
                ridge_sure: ridge_path.sure_star,
                ridge_sse,
            })
        })
        .collect()
}

/// Runs every replicate (in parallel) and every alpha; rows are ordered by
/// replicate, then alpha, whatever the completion order.
pub fn run_experiment(design: &SimDesign) -> Result<ExperimentResults> {
    design.validate()?;
    let per_rep: Vec<Vec<ReplicateRow>> = (0..design.replicates)
        .into_par_iter()
        .map(|r| {
            run_replicate(design, r).map_err(|e| BridgeError::Replicate {
                index: r,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ReplicateRow> = per_rep.into_iter().flatten().collect();
    let summary = design
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let sel: Vec<&ReplicateRow> = rows.iter().filter(|r| r.alpha == alpha).collect();
            let col = |f: fn(&ReplicateRow) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (sure_mean, sure_sd) = mean_sd(&col(|r| r.sure));
            let (sse_mean, sse_sd) = mean_sd(&col(|r| r.sse));
            let (time_mean, _) = mean_sd(&col(|r| r.fit_seconds));
            let (ridge_sure_mean, _) = mean_sd(&col(|r| r.ridge_sure));
            let (ridge_sse_mean, ridge_sse_sd) = mean_sd(&col(|r| r.ridge_sse));
            AlphaSummary {
                alpha,
                replicates: sel.len(),
                sure_mean,
                sure_sd,
                sse_mean,
                sse_sd,
                time_mean,
                ridge_sure_mean,
                ridge_sse_mean,
                ridge_sse_sd,
            }
        })
        .collect();
    Ok(ExperimentResults { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub p: usize,
    /// Median wall-clock seconds of the fit over the repeats.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n: usize,
    pub draws: usize,
    pub method: Method,
    pub points: Vec<TimingPoint>,
    /// Least-squares slope of `log seconds` on `log p`.
    pub slope: f64,
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, _) = mean_sd(&lx);
    let (my, _) = mean_sd(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Times complete fits (tuning included) at each `p`, data generation excluded.
/// The signal count grows as `max(p / 100, base.signal_count)`.
pub fn timing_sweep(base: &SimDesign, ps: &[usize], repeats: usize) -> Result<TimingReport> {
    if ps.len() < 2 {
        return Err(invalid("the timing sweep needs at least two values of p"));
    }
    let repeats = repeats.max(1);
    let mut points = Vec::with_capacity(ps.len());
    for &p in ps {
        let design = SimDesign {
            p,
            signal_count: (p / 100).max(base.signal_count).min(p),
            ..base.clone()
        };
        let data = replicate_data(&design, 0)?;
        let cfg = FitConfig {
            alpha: design.alpha_grid[0],
            noise: NoiseModel::Scalar(design.sigma2),
            draws: design.draws,
            seed: data.draw_seed,
            method: Some(design.method),
            nu: None,
            grid: NuGrid::default(),
        };
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            fit(&data.x, &data.y, &cfg)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        points.push(TimingPoint {
            p,
            seconds: times[times.len() / 2],
        });
    }
    let slope = log_log_slope(
        &points.iter().map(|t| t.p as f64).collect::<Vec<_>>(),
        &points.iter().map(|t| t.seconds).collect::<Vec<_>>(),
    );
    Ok(TimingReport {
        n: base.n,
        draws: base.draws,
        method: base.method,
        points,
        slope,
    })
}
