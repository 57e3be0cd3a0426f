//! Small Monte Carlo helpers: max-shifted weight normalisation and summaries.

/// Self-normalised importance weights from log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub weights: Vec<f64>,
    /// `log(sum_j exp(log_w_j))`.
    pub log_sum: f64,
    pub ess: f64,
}

/// Normalises `exp(log_w)` by subtracting the maximum before exponentiating.
///
/// Returns `None` when no entry is finite.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<NormalizedWeights> {
    let max = log_w
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut weights: Vec<f64> = log_w
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Some(NormalizedWeights {
        weights,
        log_sum: max + total.ln(),
        ess,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of a self-normalised ratio estimate `sum_j w_j h_j`,
/// by the delta method: `sqrt(sum_j w_j^2 (h_j - estimate)^2)`.
pub fn weighted_ratio_se(weights: &[f64], values: &[f64], estimate: f64) -> f64 {
    weights
        .iter()
        .zip(values)
        .map(|(w, h)| w * w * (h - estimate) * (h - estimate))
        .sum::<f64>()
        .sqrt()
}

/// ESS threshold below which weights are flagged as degenerate.
pub fn ess_warning_threshold(draws: usize) -> f64 {
    (draws as f64 / 100.0).max(10.0)
}
