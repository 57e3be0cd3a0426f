//! Independent numerical oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Posterior mean and second moment of `beta` under `y | beta ~ N(beta, sigma2)`,
/// `beta | t ~ N(0, nu / t)` with `t ~ IG(1, 1/4)`, the `alpha = 1` latent law.
///
/// With `s = 1/t ~ Exp(mean 4)` the marginal of `y` given `s` is `N(0, sigma2 + nu s)`;
/// the integrals over `s` are done by composite Simpson on `[0, 400]`, beyond which
/// the exponential weight is below `e^-100`.
pub fn laplace_quadrature(y: f64, nu: f64, sigma2: f64) -> (f64, f64) {
    let m = 400_000;
    let h = 400.0 / m as f64;
    let mut z = 0.0;
    let mut first = 0.0;
    let mut second = 0.0;
    for k in 0..=m {
        let s = k as f64 * h;
        let var = sigma2 + nu * s;
        let p = (-0.5 * y * y / var - s / 4.0).exp() / (2.0 * PI * var).sqrt();
        let shrink = nu * s / var;
        let mean = shrink * y;
        let cond_var = sigma2 * shrink;
        let c = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        z += c * p;
        first += c * p * mean;
        second += c * p * (cond_var + mean * mean);
    }
    (first / z, second / z)
}
