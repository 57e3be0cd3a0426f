//! Closed-form ridge regression with a SURE-tuned penalty, the Gaussian-prior
//! baseline. The penalty is `lambda = sigma2 / nu`, so `nu` is the prior variance
//! and shares its scale with the Bridge fits.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::orthogonal::SvdBasis;
use crate::sure::{SureObjective, SurePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub nu: f64,
    pub beta: DVector<f64>,
    pub fitted: DVector<f64>,
    /// `sigma2 sum_i d_i^2 / (d_i^2 + sigma2 / nu)`, the trace of the fitted covariance.
    pub fitted_cov_trace: f64,
}

#[derive(Debug, Clone)]
pub struct RidgeObjective {
    basis: SvdBasis,
    sigma2: f64,
    ut_y: DVector<f64>,
}

impl RidgeObjective {
    pub fn new(basis: SvdBasis, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(invalid(format!("sigma2 must be positive and finite, got {sigma2}")));
        }
        let ut_y = basis.u.tr_mul(&basis.y);
        Ok(Self { basis, sigma2, ut_y })
    }

    fn shrink(&self, nu: f64) -> DVector<f64> {
        self.basis.d.map(|d| nu * d * d / (self.sigma2 + nu * d * d))
    }

    pub fn fit(&self, nu: f64) -> Result<RidgeFit> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(invalid(format!("nu must be positive and finite, got {nu}")));
        }
        let s = self.shrink(nu);
        let coef = s.component_mul(&self.ut_y);
        let beta_coef = DVector::from_fn(s.len(), |i, _| coef[i] / self.basis.d[i]);
        Ok(RidgeFit {
            nu,
            beta: &self.basis.v * beta_coef,
            fitted: &self.basis.u * coef,
            fitted_cov_trace: self.sigma2 * s.sum(),
        })
    }
}

impl SureObjective for RidgeObjective {
    fn nu_scale(&self) -> f64 {
        let mut d2: Vec<f64> = self.basis.d.iter().map(|d| d * d).collect();
        d2.sort_by(f64::total_cmp);
        self.sigma2 / d2[d2.len() / 2]
    }

    fn evaluate_many(&self, nus: &[f64]) -> Result<Vec<Result<SurePoint>>> {
        Ok(nus
            .iter()
            .map(|&nu| {
                self.fit(nu).map(|f| SurePoint {
                    nu,
                    bias: (&self.basis.y - &f.fitted).norm_squared(),
                    dof: 2.0 * f.fitted_cov_trace,
                })
            })
            .collect())
    }
}
