//! Small numeric helpers shared across modules.

/// `log(sum(exp(x)))`, stable for large magnitudes. Empty input gives `-inf`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(mean(exp(x)))`.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    log_sum_exp(x) - (x.len() as f64).ln()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator). `NaN` for fewer than two values.
pub fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile (R type 7) of unsorted data.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Effective sample size of a quantity recorded along several chains.
///
/// Uses the multi-chain autocorrelation estimate with Geyer's initial
/// monotone sequence truncation. `chain_lens` gives the length of each
/// consecutive chain segment in `x`. Chains of unequal length are truncated
/// to the shortest.
pub fn effective_sample_size(x: &[f64], chain_lens: &[usize]) -> f64 {
    let total: usize = chain_lens.iter().sum();
    assert_eq!(total, x.len(), "chain lengths must cover the draws");
    let n = chain_lens.iter().copied().min().unwrap_or(0);
    let m = chain_lens.len();
    if n < 4 || m == 0 {
        return x.len() as f64;
    }
    let mut chains = Vec::with_capacity(m);
    let mut offset = 0;
    for &len in chain_lens {
        chains.push(&x[offset..offset + n]);
        offset += len;
    }
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let chain_vars: Vec<f64> = chains
        .iter()
        .zip(&chain_means)
        .map(|(c, &mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w = mean(&chain_vars);
    if !(w > 0.0) {
        return (m * n) as f64;
    }
    let b_over_n = if m > 1 { sd(&chain_means).powi(2) } else { 0.0 };
    let var_plus = w * (n - 1) as f64 / n as f64 + b_over_n;

    let autocov = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for (c, &mu) in chains.iter().zip(&chain_means) {
            let mut s = 0.0;
            for t in 0..n - lag {
                s += (c[t] - mu) * (c[t + lag] - mu);
            }
            acc += s / n as f64;
        }
        acc / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;

    // Geyer: sum pairs while positive, enforcing monotone decrease.
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let draws = (m * n) as f64;
    let ess = draws / tau.max(1.0 / draws.log10().max(1.0));
    ess.min(draws * draws.log10().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn log_sum_exp_matches_naive_at_small_scale() {
        let x = [0.1, -0.3, 1.2];
        let naive: f64 = x.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&x) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn quantile_type7() {
        let x = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ess_of_iid_and_ar1_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let iid: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&iid, &[1000; 4]);
        assert!(ess > 3000.0 && ess < 5000.0, "iid ess {ess}");

        // AR(1) with rho = 0.9 has ESS ≈ n (1 − ρ) / (1 + ρ) ≈ n / 19.
        let mut ar = Vec::with_capacity(4000);
        for _ in 0..4 {
            let mut v = 0.0;
            for _ in 0..1000 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v = 0.9 * v + (1.0f64 - 0.81).sqrt() * z;
                ar.push(v);
            }
        }
        let ess = effective_sample_size(&ar, &[1000; 4]);
        assert!(ess > 100.0 && ess < 400.0, "ar1 ess {ess}");
    }
}
