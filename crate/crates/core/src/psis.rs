//! Pareto smoothed importance sampling.
//!
//! The largest importance ratios are replaced by expected order statistics of
//! a generalized Pareto distribution fitted to their excesses over the tail
//! cutpoint. The fitted shape `k_hat` doubles as a reliability diagnostic:
//! estimates above roughly 0.7 mean the importance sampling estimate cannot
//! be trusted.
//!
//! Shape convention: `k > 0` is a heavy (Pareto-like) tail, `k = 0` is the
//! exponential tail and `k < 0` a bounded one.

use serde::Serialize;
use std::io::Write;

use crate::error::{Error, Result};
use crate::stats::log_sum_exp;

/// Minimum number of draws accepted by [`pareto_smooth`].
pub const MIN_DRAWS: usize = 25;
/// Minimum tail size accepted by the generalized Pareto fit.
pub const MIN_TAIL: usize = 5;
/// Base number of grid points for the profile-likelihood fit; the grid gets
/// `floor(sqrt(n))` extra points for a tail of size `n`.
pub const GPD_GRID_POINTS: usize = 30;
/// Strength of the weak prior that pulls `k_hat` toward 0.5 on small tails,
/// in pseudo-observations.
pub const GPD_PRIOR_WEIGHT: f64 = 10.0;
/// Tail values spanning less than this in log space are treated as flat.
pub const DEGENERATE_SPAN: f64 = 1e-12;

/// Generalized Pareto fit to a vector of tail excesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GpdFit {
    pub k_hat: f64,
    pub sigma_hat: f64,
    pub n_tail: usize,
}

/// Smoothed log importance weights with their Pareto diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct PsisResult {
    /// Smoothed log weights on the same scale as the input log ratios
    /// (not normalized).
    pub log_weights: Vec<f64>,
    /// Pareto shape estimate. `-inf` when the tail was flat and no fit was made.
    pub k_hat: f64,
    pub n_tail: usize,
    /// Set when every input ratio was equal; the weights are then uniform.
    pub degenerate: bool,
    /// Largest log ratio left out of the tail.
    pub cutpoint: f64,
}

/// One line of the optional PSIS diagnostic dump.
#[derive(Debug, Clone, Serialize)]
pub struct PsisDiagnostic {
    #[serde(rename = "S")]
    pub draws: usize,
    pub n_tail: usize,
    /// `null` for flat tails.
    pub k_hat: Option<f64>,
    pub cutpoint: f64,
}

impl PsisResult {
    /// Uniform weights for an all-equal input.
    fn degenerate(log_ratios: &[f64], n_tail: usize) -> Self {
        let value = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        PsisResult {
            log_weights: vec![value; log_ratios.len()],
            k_hat: f64::NEG_INFINITY,
            n_tail,
            degenerate: true,
            cutpoint: value,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Log weights normalized to sum to one.
    pub fn normalized_log_weights(&self) -> Vec<f64> {
        let total = log_sum_exp(&self.log_weights);
        self.log_weights.iter().map(|w| w - total).collect()
    }

    /// Importance sampling effective sample size `1 / Σ w̃²` of the
    /// normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        let lw = self.normalized_log_weights();
        1.0 / lw.iter().map(|w| (2.0 * w).exp()).sum::<f64>()
    }

    pub fn diagnostic(&self) -> PsisDiagnostic {
        PsisDiagnostic {
            draws: self.log_weights.len(),
            n_tail: self.n_tail,
            k_hat: self.k_hat.is_finite().then_some(self.k_hat),
            cutpoint: self.cutpoint,
        }
    }

    /// Append this result's diagnostic as one JSON line.
    pub fn write_diagnostic<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *out, &self.diagnostic())?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Number of largest ratios to smooth for `s` draws:
/// `ceil(min(0.2 s, 3 sqrt(s)))`, kept within `[5, s - 1]`.
pub fn tail_length(s: usize) -> Result<usize> {
    if s < MIN_DRAWS {
        return Err(Error::InsufficientDraws {
            needed: MIN_DRAWS,
            got: s,
        });
    }
    let sf = s as f64;
    let len = (0.2 * sf).min(3.0 * sf.sqrt()).ceil() as usize;
    Ok(len.clamp(MIN_TAIL, s - 1))
}

/// Fit a generalized Pareto distribution to strictly positive excesses.
pub fn fit_generalized_pareto(excesses: &[f64]) -> Result<GpdFit> {
    if excesses.len() < MIN_TAIL {
        return Err(Error::InsufficientTail {
            needed: MIN_TAIL,
            got: excesses.len(),
        });
    }
    if let Some(bad) = excesses.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!(
            "excesses must be finite and positive, found {bad}"
        )));
    }
    let mut sorted = excesses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (k_hat, sigma_hat) = profile_fit(&sorted)?;
    if !k_hat.is_finite() || !(sigma_hat > 0.0) {
        return Err(Error::Domain(format!(
            "generalized Pareto fit did not converge (k = {k_hat}, sigma = {sigma_hat})"
        )));
    }
    Ok(GpdFit {
        k_hat,
        sigma_hat,
        n_tail: sorted.len(),
    })
}

/// Profile-likelihood estimator over the reparameterization
/// `theta = -k / sigma`. The posterior mean of `theta` over a fixed grid,
/// weighted by the profile likelihood, gives `k` and `sigma`; `k` is then
/// shrunk toward 0.5 by [`GPD_PRIOR_WEIGHT`] pseudo-observations.
///
/// `x` must be sorted ascending and nonnegative.
fn profile_fit(x: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    let x_max = x[n - 1];
    if !(x_max - x[0] > f64::EPSILON * x_max.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::InsufficientVariation);
    }
    let grid = GPD_GRID_POINTS + (n as f64).sqrt().floor() as usize;
    let mut x_star = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    if x_star <= 0.0 {
        // Ties at the cutpoint; fall back to the smallest positive excess.
        x_star = x.iter().copied().find(|v| *v > 0.0).unwrap_or(x_max);
    }
    const SHAPE_PRIOR: f64 = 3.0;

    let thetas: Vec<f64> = (1..=grid)
        .map(|j| {
            1.0 / x_max + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / SHAPE_PRIOR / x_star
        })
        .collect();
    let log_lik: Vec<f64> = thetas
        .iter()
        .map(|&theta| {
            let a = -theta;
            let k = x.iter().map(|v| (a * v).ln_1p()).sum::<f64>() / n as f64;
            let l = n as f64 * ((a / k).ln() - k - 1.0);
            if l.is_nan() {
                f64::NEG_INFINITY
            } else {
                l
            }
        })
        .collect();
    let norm = log_sum_exp(&log_lik);
    let theta_hat: f64 = thetas
        .iter()
        .zip(&log_lik)
        .map(|(t, l)| t * (l - norm).exp())
        .sum();
    let k = x.iter().map(|v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let nf = n as f64;
    let k = k * nf / (nf + GPD_PRIOR_WEIGHT) + GPD_PRIOR_WEIGHT * 0.5 / (nf + GPD_PRIOR_WEIGHT);
    Ok((if k.is_nan() { f64::INFINITY } else { k }, sigma))
}

/// Quantile function of the generalized Pareto distribution with location 0.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Pareto-smooth a vector of log importance ratios.
pub fn pareto_smooth(log_ratios: &[f64]) -> Result<PsisResult> {
    let s = log_ratios.len();
    let n_tail = tail_length(s)?;
    if let Some(j) = log_ratios.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "log ratio {j} is not finite ({})",
            log_ratios[j]
        )));
    }

    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = log_ratios.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min < DEGENERATE_SPAN {
        return Ok(PsisResult::degenerate(log_ratios, n_tail));
    }

    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| log_ratios[a].total_cmp(&log_ratios[b]));
    let tail_ids = &order[s - n_tail..];
    let cutpoint = log_ratios[order[s - n_tail - 1]];

    let mut log_weights = log_ratios.to_vec();
    let tail_span = log_ratios[tail_ids[n_tail - 1]] - log_ratios[tail_ids[0]];
    if tail_span < DEGENERATE_SPAN {
        return Ok(PsisResult {
            log_weights,
            k_hat: f64::NEG_INFINITY,
            n_tail,
            degenerate: false,
            cutpoint,
        });
    }

    // Work relative to the maximum so exp() cannot overflow.
    let cut_rel = (cutpoint - max).exp();
    let excess: Vec<f64> = tail_ids
        .iter()
        .map(|&id| ((log_ratios[id] - max).exp() - cut_rel).max(0.0))
        .collect();
    let k_hat = match profile_fit(&excess) {
        Ok((k, sigma)) if k.is_finite() => {
            for (z, &id) in tail_ids.iter().enumerate() {
                let p = (z as f64 + 0.5) / n_tail as f64;
                let q = gpd_quantile(p, k, sigma) + cut_rel;
                let smoothed = q.ln();
                log_weights[id] = if smoothed >= 0.0 { max } else { smoothed + max };
            }
            k
        }
        Ok((k, _)) => k,
        // Excesses all equal: nothing to learn from the tail.
        Err(Error::InsufficientVariation) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };

    Ok(PsisResult {
        log_weights,
        k_hat,
        n_tail,
        degenerate: false,
        cutpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Inverse-CDF sampler written independently of `gpd_quantile`.
    fn sample_gpd(n: usize, k: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if k == 0.0 {
                    -sigma * (1.0 - u).ln()
                } else {
                    sigma * ((1.0 - u).powf(-k) - 1.0) / k
                }
            })
            .collect()
    }

    fn gpd_log_lik(x: &[f64], k: f64, sigma: f64) -> f64 {
        let mut ll = -(x.len() as f64) * sigma.ln();
        for &v in x {
            let z = 1.0 + k * v / sigma;
            if z <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll -= (1.0 + 1.0 / k) * z.ln();
        }
        ll
    }

    /// Dense grid search over (k, log sigma).
    fn brute_force_mle(x: &[f64]) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for ki in 0..=120 {
            let k = -0.1 + ki as f64 * 0.01;
            if k.abs() < 1e-9 {
                continue;
            }
            for si in 0..=160 {
                let sigma = (-0.8 + si as f64 * 0.01).exp();
                let ll = gpd_log_lik(x, k, sigma);
                if ll > best.0 {
                    best = (ll, k, sigma);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn tail_length_examples() {
        assert_eq!(tail_length(100).unwrap(), 20);
        assert_eq!(tail_length(4000).unwrap(), 190);
        assert_eq!(tail_length(25).unwrap(), 5);
        assert_eq!(tail_length(1000).unwrap(), 95);
        assert!(matches!(
            tail_length(24),
            Err(Error::InsufficientDraws { needed: 25, got: 24 })
        ));
    }

    #[test]
    fn gpd_recovers_half_shape_and_agrees_with_grid_search() {
        let x = sample_gpd(10_000, 0.5, 1.0, 11);
        let fit = fit_generalized_pareto(&x).unwrap();
        assert!((fit.k_hat - 0.5).abs() < 0.1, "k_hat {}", fit.k_hat);
        assert_eq!(fit.n_tail, 10_000);
        let (k_grid, sigma_grid) = brute_force_mle(&x);
        assert!((fit.k_hat - k_grid).abs() < 0.03, "{} vs grid {}", fit.k_hat, k_grid);
        assert!((fit.sigma_hat / sigma_grid - 1.0).abs() < 0.05);
    }

    #[test]
    fn gpd_recovers_exponential() {
        let x = sample_gpd(10_000, 0.0, 1.0, 12);
        let fit = fit_generalized_pareto(&x).unwrap();
        assert!(fit.k_hat.abs() < 0.05, "k_hat {}", fit.k_hat);
        assert!((fit.sigma_hat - 1.0).abs() < 0.05);
    }

    #[test]
    fn gpd_error_paths() {
        assert!(matches!(
            fit_generalized_pareto(&[1.0; 4]),
            Err(Error::InsufficientTail { .. })
        ));
        assert!(matches!(
            fit_generalized_pareto(&[2.0; 8]),
            Err(Error::InsufficientVariation)
        ));
        assert!(matches!(
            fit_generalized_pareto(&[1.0, 2.0, 0.0, 3.0, 4.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            fit_generalized_pareto(&[1.0, 2.0, -1.0, 3.0, 4.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gpd_error_shrinks_with_sample_size() {
        let mean_err = |n: usize| -> f64 {
            (0..20)
                .map(|seed| {
                    let x = sample_gpd(n, 0.5, 1.0, 100 + seed);
                    (fit_generalized_pareto(&x).unwrap().k_hat - 0.5).abs()
                })
                .sum::<f64>()
                / 20.0
        };
        let (e100, e1000, e10000) = (mean_err(100), mean_err(1000), mean_err(10_000));
        assert!(e100 > e1000 && e1000 > e10000, "{e100} {e1000} {e10000}");
    }

    #[test]
    fn quantile_matches_cdf_inverse() {
        for &k in &[-0.3, 0.0, 0.4, 0.9] {
            for &p in &[0.1, 0.5, 0.95] {
                let q = gpd_quantile(p, k, 2.0);
                let cdf = if k == 0.0 {
                    1.0 - (-q / 2.0).exp()
                } else {
                    1.0 - (1.0 + k * q / 2.0).powf(-1.0 / k)
                };
                assert!((cdf - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_log_ratios_are_degenerate() {
        let res = pareto_smooth(&[0.0; 100]).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.k_hat, f64::NEG_INFINITY);
        assert!(res.log_weights.iter().all(|w| *w == res.log_weights[0]));
    }

    #[test]
    fn extreme_outlier_is_truncated_and_shrunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut lr: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
        let mut sorted = lr.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = 0.5 * (sorted[99] + sorted[100]);
        lr[17] = median + 1e6f64.ln();
        let mut sorted = lr.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let res = pareto_smooth(&lr).unwrap();
        let max_raw = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_smoothed = res.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max_smoothed <= max_raw);
        assert!(res.log_weights[17] < lr[17]);

        // Independent check: the top fitted quantile lies below the sample maximum.
        let n = res.n_tail;
        let cut = res.cutpoint;
        let excess: Vec<f64> = sorted[200 - n..].iter().map(|v| v.exp() - cut.exp()).collect();
        let mut top = excess.clone();
        top.sort_by(|a, b| a.total_cmp(b));
        let fit = fit_generalized_pareto(&top).unwrap();
        let q_top = gpd_quantile((n as f64 - 0.5) / n as f64, fit.k_hat, fit.sigma_hat);
        assert!(q_top < (max_raw.exp() - cut.exp()));
    }

    #[test]
    fn narrow_proposal_gives_large_k() {
        // Target N(0, 1), proposal N(0, 0.4^2): the ratio tail has k = 0.84.
        let proposal = Normal::new(0.0, 0.4).unwrap();
        let reps = 200;
        let mut above = 0;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let lr: Vec<f64> = (0..4000)
                .map(|_| {
                    let th: f64 = proposal.sample(&mut rng);
                    -0.5 * th * th + th * th / 0.32
                })
                .collect();
            if pareto_smooth(&lr).unwrap().k_hat > 0.7 {
                above += 1;
            }
        }
        assert!(above > reps / 2, "{above}/{reps} replications had k > 0.7");
    }

    #[test]
    fn flat_tail_is_not_fitted() {
        let mut lr: Vec<f64> = (0..100).map(|i| -(i as f64) * 0.01).collect();
        for v in lr.iter_mut().take(30) {
            *v = 0.0;
        }
        let res = pareto_smooth(&lr).unwrap();
        assert!(!res.degenerate);
        assert_eq!(res.k_hat, f64::NEG_INFINITY);
        assert_eq!(res.log_weights, lr);
    }

    #[test]
    fn rejects_non_finite_and_short_input() {
        let mut lr = vec![0.5; 30];
        lr[3] = f64::NAN;
        assert!(matches!(pareto_smooth(&lr), Err(Error::Domain(_))));
        assert!(matches!(
            pareto_smooth(&[0.0; 10]),
            Err(Error::InsufficientDraws { .. })
        ));
    }

    #[test]
    fn diagnostic_line_is_json() {
        let lr: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let res = pareto_smooth(&lr).unwrap();
        let mut buf = Vec::new();
        res.write_diagnostic(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["S"], 50);
        assert_eq!(v["n_tail"], 10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn smoothing_invariants(
            lr in prop::collection::vec(-20.0f64..20.0, 25..400),
        ) {
            let res = pareto_smooth(&lr).unwrap();
            prop_assert_eq!(res.log_weights.len(), lr.len());
            prop_assert!(res.log_weights.iter().all(|w| w.is_finite()));

            let max_raw = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for w in &res.log_weights {
                prop_assert!(w.exp() <= max_raw.exp());
            }

            let mut order: Vec<usize> = (0..lr.len()).collect();
            order.sort_by(|&a, &b| lr[a].total_cmp(&lr[b]));
            let body = lr.len() - res.n_tail;
            for &id in &order[..body] {
                prop_assert_eq!(res.log_weights[id], lr[id]);
            }
            for pair in order[body..].windows(2) {
                prop_assert!(res.log_weights[pair[0]] <= res.log_weights[pair[1]]);
            }
        }
    }
}
