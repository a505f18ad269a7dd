//! Adaptive random-walk Metropolis.
//!
//! Chains start near the posterior mode found by a damped Newton search,
//! with the inverse negative Hessian as the initial proposal covariance.
//! During warmup the global proposal scale follows a Robbins-Monro
//! recursion toward the target acceptance rate; at mid-warmup the proposal
//! covariance is re-estimated from the chain's own history. The proposal is
//! frozen after warmup.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::model::SamplerConfig;
use crate::seed;

/// Pseudo-observations given to the initial covariance when blending it with
/// the warmup estimate.
const COV_PRIOR_WEIGHT: f64 = 10.0;

pub(crate) struct ChainRun {
    pub draws: Vec<Vec<f64>>,
    pub acceptance: f64,
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn steps(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect()
}

fn gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let h = steps(x);
    let mut xp = x.to_vec();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            xp[i] = x[i] + h[i];
            let up = f(&xp);
            xp[i] = x[i] - h[i];
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h[i])
        }),
    )
}

fn hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], fx: f64) -> DMatrix<f64> {
    let d = x.len();
    let h = steps(x);
    let mut m = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    for i in 0..d {
        xp[i] = x[i] + h[i];
        let up = f(&xp);
        xp[i] = x[i] - h[i];
        let down = f(&xp);
        xp[i] = x[i];
        m[(i, i)] = (up - 2.0 * fx + down) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Damped Newton ascent. Returns the best point found and, when the negative
/// Hessian there is positive definite, its inverse.
pub(crate) fn find_mode(
    log_density: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let f = |x: &[f64]| finite_or_neg_inf(log_density(x));
    let d = start.len();
    let mut x = start.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, None);
    }
    let mut damping = 1e-6;
    for _ in 0..50 {
        let g = gradient(&f, &x);
        let neg_h = -hessian(&f, &x, fx);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = neg_h.clone();
            for i in 0..d {
                a[(i, i)] += damping * a[(i, i)].abs().max(1.0);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&g);
            let candidate: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let fc = f(&candidate);
            if fc.is_finite() && fc >= fx - 1e-12 {
                let gain = fc - fx;
                x = candidate;
                fx = fc;
                damping = (damping * 0.1).max(1e-10);
                improved = gain > 1e-10;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let neg_h = -hessian(&f, &x, fx);
    let cov = neg_h.cholesky().map(|c| c.inverse());
    let cov = cov.filter(|c| c.iter().all(|v| v.is_finite()));
    (x, cov)
}

fn cholesky_or_diag(cov: &DMatrix<f64>) -> DMatrix<f64> {
    match cov.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let d = cov.nrows();
            DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    cov[(i, i)].abs().max(1e-8).sqrt()
                } else {
                    0.0
                }
            })
        }
    }
}

fn empirical_cov(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += DVector::from_column_slice(x);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mean;
        cov += &c * c.transpose();
    }
    cov / (n - 1.0)
}

struct Proposal {
    chol: DMatrix<f64>,
    log_scale: f64,
}

impl Proposal {
    fn propose(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = x.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let step = &self.chol * z * self.log_scale.exp();
        x.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
    }
}

fn run_chain(
    log_density: &(dyn Fn(&[f64]) -> f64 + Sync),
    init: &[f64],
    init_cov: &DMatrix<f64>,
    config: &SamplerConfig,
    kept: usize,
    chain_seed: u64,
) -> ChainRun {
    let f = |x: &[f64]| finite_or_neg_inf(log_density(x));
    let d = init.len();
    let mut rng = seed::rng(chain_seed);
    let mut proposal = Proposal {
        chol: cholesky_or_diag(init_cov),
        log_scale: (2.38 / (d as f64).sqrt()).ln(),
    };

    // Start from a small jitter around the mode, keeping the mode itself if
    // every jittered point is outside the support.
    let mut x = init.to_vec();
    let mut lp = f(&x);
    for _ in 0..20 {
        let jitter = Proposal {
            chol: proposal.chol.clone(),
            log_scale: (0.5f64).ln(),
        };
        let cand = jitter.propose(init, &mut rng);
        let lc = f(&cand);
        if lc.is_finite() {
            x = cand;
            lp = lc;
            break;
        }
    }

    let step = |x: &mut Vec<f64>, lp: &mut f64, proposal: &Proposal, rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let cand = proposal.propose(x, rng);
        let lc = f(&cand);
        let accept_prob = if lc.is_finite() {
            (lc - *lp).exp().min(1.0)
        } else {
            0.0
        };
        let u: f64 = rng.random();
        if u < accept_prob {
            *x = cand;
            *lp = lc;
        }
        accept_prob
    };

    let warmup = config.warmup;
    let half = warmup / 2;
    let mut history = Vec::with_capacity(half / 2 + 1);
    let mut adapt_t = 0usize;
    for t in 0..warmup {
        let a = step(&mut x, &mut lp, &proposal, &mut rng);
        let gain = (adapt_t as f64 + 10.0).powf(-0.6);
        proposal.log_scale += gain * (a - config.target_accept);
        adapt_t += 1;
        if t >= warmup / 4 && t < half {
            history.push(x.clone());
        }
        if t + 1 == half && history.len() > 2 * d + 2 {
            let n = history.len() as f64;
            let emp = empirical_cov(&history);
            let blended = (emp * n + init_cov * COV_PRIOR_WEIGHT) / (n + COV_PRIOR_WEIGHT);
            if let Some(c) = blended.cholesky() {
                proposal.chol = c.l();
                proposal.log_scale = (2.38 / (d as f64).sqrt()).ln();
                adapt_t = 0;
            }
        }
    }

    let total = kept * config.thin;
    let mut accepted = 0.0;
    let mut draws = Vec::with_capacity(kept);
    for it in 0..total {
        accepted += step(&mut x, &mut lp, &proposal, &mut rng);
        if (it + 1) % config.thin == 0 {
            draws.push(x.clone());
        }
    }
    ChainRun {
        draws,
        acceptance: if total > 0 { accepted / total as f64 } else { f64::NAN },
    }
}

/// Run all chains (in parallel) from `init` with proposal covariance
/// `init_cov`. Chain `c` is seeded from `(seed, c)` only, so results do not
/// depend on scheduling.
pub(crate) fn sample(
    log_density: &(dyn Fn(&[f64]) -> f64 + Sync),
    init: &[f64],
    init_cov: &DMatrix<f64>,
    config: &SamplerConfig,
    seed: u64,
) -> Vec<ChainRun> {
    let lens = config.chain_lens();
    lens.par_iter()
        .enumerate()
        .map(|(c, &kept)| {
            let chain_seed = seed::derive(seed, &[seed::stream::CHAIN, c as u64]);
            run_chain(log_density, init, init_cov, config, kept, chain_seed)
        })
        .collect()
}
