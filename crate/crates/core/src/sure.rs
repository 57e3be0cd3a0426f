//! Stein's unbiased risk estimate over the prior scale `nu`, with common random
//! numbers across `nu` and golden-section refinement of the grid minimiser.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BridgeError, Result};
use crate::orthogonal::OrthogonalEngine;
use crate::regression::{posterior_summary_with, ModelConfig, PosteriorSummary, RegressionEngine, SummaryOptions};
use crate::tilted_stable::LatentDraws;

/// One evaluated value of `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurePoint {
    pub nu: f64,
    /// `||y - y_tilde||^2`.
    pub bias: f64,
    /// `2 tr(Var(X beta | y))`.
    pub dof: f64,
}

impl SurePoint {
    pub fn sure(&self) -> f64 {
        self.bias + self.dof
    }
}

/// A SURE curve in `nu` evaluated on fixed draws.
pub trait SureObjective: Sync {
    /// Natural scale of `nu` for this problem, used to centre the grid.
    fn nu_scale(&self) -> f64;
    /// Evaluates several values at once. Per-entry failures are allowed.
    fn evaluate_many(&self, nus: &[f64]) -> Result<Vec<Result<SurePoint>>>;
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl SureObjective for RegressionEngine<'_> {
    /// `sigma2 / median(d_i^2)`, where the shrinkage factors `nu d^2 / (sigma2 t + nu d^2)`
    /// are of order one.
    fn nu_scale(&self) -> f64 {
        let sigma2 = self.noise_sigma2().unwrap_or(1.0);
        let x = self.design();
        if self.is_null_fit() {
            return sigma2;
        }
        let sv = x.clone().singular_values();
        let d2: Vec<f64> = sv.iter().filter(|s| **s > 0.0).map(|s| s * s).collect();
        sigma2 / median(d2)
    }

    fn evaluate_many(&self, nus: &[f64]) -> Result<Vec<Result<SurePoint>>> {
        if self.noise_sigma2().is_none() {
            return Err(BridgeError::Unsupported(
                "SURE requires a scalar noise covariance sigma2 I".into(),
            ));
        }
        Ok(RegressionEngine::evaluate_many(self, nus)?
            .into_iter()
            .map(|r| {
                r.map(|ev| SurePoint {
                    nu: ev.nu,
                    bias: ev.residual_sq,
                    dof: 2.0 * ev.fitted_cov_trace,
                })
            })
            .collect())
    }
}

impl SureObjective for OrthogonalEngine {
    fn nu_scale(&self) -> f64 {
        let d2: Vec<f64> = self.basis().d.iter().map(|d| d * d).collect();
        self.sigma2() / median(d2)
    }

    fn evaluate_many(&self, nus: &[f64]) -> Result<Vec<Result<SurePoint>>> {
        Ok(nus
            .iter()
            .map(|&nu| {
                self.fit(nu).map(|f| SurePoint {
                    nu,
                    bias: (&self.basis().y - &f.fitted_mean).norm_squared(),
                    dof: 2.0 * f.fitted_cov_trace,
                })
            })
            .collect())
    }
}

/// Grid and refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuGrid {
    /// Grid centre; defaults to the objective's [`SureObjective::nu_scale`].
    pub center: Option<f64>,
    /// Grid spans `[center * low, center * high]`.
    pub low: f64,
    pub high: f64,
    pub points: usize,
    /// Golden-section stops once `(hi - lo) / lo` falls below this.
    pub rel_tol: f64,
    /// Times the grid may be extended when its minimum sits on an end point.
    pub max_extensions: usize,
}

impl Default for NuGrid {
    fn default() -> Self {
        Self {
            center: None,
            low: 1e-4,
            high: 1e4,
            points: 40,
            rel_tol: 0.01,
            max_extensions: 4,
        }
    }
}

impl NuGrid {
    /// Grid over the absolute range `[lo, hi]` with `points` geometric points.
    pub fn absolute(lo: f64, hi: f64, points: usize) -> Self {
        Self {
            center: Some(1.0),
            low: lo,
            high: hi,
            points,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(invalid("the nu grid needs at least two points"));
        }
        if !(self.low > 0.0 && self.high > self.low && self.high.is_finite()) {
            return Err(invalid(format!("grid span [{}, {}] is not valid", self.low, self.high)));
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid("rel_tol must be positive"));
        }
        if let Some(c) = self.center {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid(format!("grid centre must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurePath {
    /// Every successfully evaluated `nu`, ascending.
    pub nu_grid: Vec<f64>,
    pub sure_values: Vec<f64>,
    pub bias_terms: Vec<f64>,
    pub dof_terms: Vec<f64>,
    pub nu_star: f64,
    pub sure_star: f64,
    /// Values of `nu` at which the weights degenerated.
    pub failed_nu: Vec<f64>,
}

impl SurePath {
    /// CSV with header `nu,sure,bias,dof`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("nu,sure,bias,dof\n");
        for k in 0..self.nu_grid.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.nu_grid[k], self.sure_values[k], self.bias_terms[k], self.dof_terms[k]
            ));
        }
        out
    }
}

struct Profile<'o, O: SureObjective + ?Sized> {
    objective: &'o O,
    points: Vec<SurePoint>,
    failed: Vec<f64>,
}

impl<O: SureObjective + ?Sized> Profile<'_, O> {
    fn add(&mut self, nus: &[f64]) -> Result<()> {
        for (nu, r) in nus.iter().zip(self.objective.evaluate_many(nus)?) {
            match r {
                Ok(p) => self.points.push(p),
                Err(BridgeError::Numerical(_)) => self.failed.push(*nu),
                Err(e) => return Err(e),
            }
        }
        self.points.sort_by(|a, b| a.nu.total_cmp(&b.nu));
        self.points.dedup_by(|a, b| a.nu == b.nu);
        Ok(())
    }

    fn value_at(&mut self, nu: f64) -> Result<f64> {
        if let Some(p) = self.points.iter().find(|p| p.nu == nu) {
            return Ok(p.sure());
        }
        self.add(&[nu])?;
        Ok(self
            .points
            .iter()
            .find(|p| p.nu == nu)
            .map_or(f64::INFINITY, |p| p.sure()))
    }

    /// Index of the smallest SURE, the smaller `nu` on ties.
    fn argmin(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, p) in self.points.iter().enumerate() {
            if best.is_none_or(|b| p.sure() < self.points[b].sure()) {
                best = Some(k);
            }
        }
        best
    }
}

/// SURE path over a geometric grid, extended while the minimum sits on an end
/// point, then refined by golden-section search in `log nu`.
pub fn sure_profile<O: SureObjective + ?Sized>(objective: &O, grid: &NuGrid) -> Result<SurePath> {
    grid.validate()?;
    let center = match grid.center {
        Some(c) => c,
        None => objective.nu_scale(),
    };
    if !(center > 0.0 && center.is_finite()) {
        return Err(BridgeError::Numerical(format!("grid centre {center} is not usable")));
    }
    let (lo, hi) = ((center * grid.low).ln(), (center * grid.high).ln());
    let step = (hi - lo) / (grid.points - 1) as f64;
    let initial: Vec<f64> = (0..grid.points).map(|k| (lo + step * k as f64).exp()).collect();
    let mut prof = Profile {
        objective,
        points: Vec::new(),
        failed: Vec::new(),
    };
    prof.add(&initial)?;

    let extra = grid.points / 2;
    let (mut low_end, mut high_end) = (lo, hi);
    for _ in 0..grid.max_extensions {
        let Some(k) = prof.argmin() else { break };
        let nus: Vec<f64> = if k == 0 {
            low_end -= step * extra as f64;
            (0..extra).map(|i| (low_end + step * i as f64).exp()).collect()
        } else if k + 1 == prof.points.len() {
            let start = high_end;
            high_end += step * extra as f64;
            (1..=extra).map(|i| (start + step * i as f64).exp()).collect()
        } else {
            break;
        };
        prof.add(&nus)?;
    }

    let Some(k) = prof.argmin() else {
        return Err(BridgeError::AllDegenerate { failed: prof.failed });
    };
    if k > 0 && k + 1 < prof.points.len() {
        let mut a = prof.points[k - 1].nu.ln();
        let mut b = prof.points[k + 1].nu.ln();
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = prof.value_at(c.exp())?;
        let mut fd = prof.value_at(d.exp())?;
        while (b.exp() - a.exp()) / a.exp() > grid.rel_tol {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = prof.value_at(c.exp())?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = prof.value_at(d.exp())?;
            }
        }
    }

    let k = prof.argmin().expect("at least one point");
    let star = prof.points[k];
    let mut failed = prof.failed;
    failed.sort_by(f64::total_cmp);
    failed.dedup();
    Ok(SurePath {
        nu_grid: prof.points.iter().map(|p| p.nu).collect(),
        sure_values: prof.points.iter().map(|p| p.sure()).collect(),
        bias_terms: prof.points.iter().map(|p| p.bias).collect(),
        dof_terms: prof.points.iter().map(|p| p.dof).collect(),
        nu_star: star.nu,
        sure_star: star.sure(),
        failed_nu: failed,
    })
}

/// `||y - y_tilde||^2 + 2 tr(Var(X beta | y))` for a summary computed under `Sigma = sigma2 I`.
pub fn sure_value(y: &DVector<f64>, summary: &PosteriorSummary, sigma2: f64) -> Result<f64> {
    let Some(s2) = summary.noise_sigma2 else {
        return Err(BridgeError::Unsupported(
            "SURE requires a summary computed under Sigma = sigma2 I".into(),
        ));
    };
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("sigma2 must be positive and finite, got {sigma2}")));
    }
    if (s2 - sigma2).abs() > 1e-12 * sigma2 {
        return Err(invalid(format!(
            "summary was computed with sigma2 = {s2}, not {sigma2}"
        )));
    }
    if y.len() != summary.fitted_mean.len() {
        return Err(crate::error::mismatch("y and fitted values differ in length"));
    }
    let trace = summary.fitted_cov_trace;
    // The Jacobian of y_tilde is Var(X beta | y) Sigma^-1, so the Efron form
    // 2 sigma2 tr(J) must equal 2 tr(Var(X beta | y)).
    if let Some(fc) = &summary.fitted_cov {
        debug_assert!({
            let efron = sigma2 * (fc / sigma2).trace();
            (efron - trace).abs() <= 1e-8 * trace.abs().max(f64::MIN_POSITIVE)
        });
    }
    Ok((y - &summary.fitted_mean).norm_squared() + 2.0 * trace)
}

/// `2 tr(J Sigma)`, where `J` is the central-difference Jacobian of `fitted` at `y`.
pub fn estimate_dof_fd_with<F>(fitted: F, y: &DVector<f64>, sigma: &DMatrix<f64>, step: f64) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(invalid(format!("step must lie in [1e-7, 1e-3], got {step}")));
    }
    let n = y.len();
    if sigma.shape() != (n, n) {
        return Err(crate::error::mismatch("noise covariance does not match y"));
    }
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut up = y.clone();
        up[i] += step;
        let mut down = y.clone();
        down[i] -= step;
        let col = (fitted(&up)? - fitted(&down)?) / (2.0 * step);
        jac.set_column(i, &col);
    }
    Ok(2.0 * (jac * sigma).trace())
}

/// Finite-difference `2 sigma2 sum_i d y_tilde_i / d y_i` (or `2 tr(J Sigma)`) with draws fixed.
pub fn estimate_dof_fd(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    draws: &LatentDraws,
    step: f64,
) -> Result<f64> {
    let sigma = cfg.noise.matrix(x.nrows());
    estimate_dof_fd_with(
        |yy| posterior_summary_with(x, yy, cfg, draws, SummaryOptions::default()).map(|s| s.fitted_mean),
        y,
        &sigma,
        step,
    )
}
