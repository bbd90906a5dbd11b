//! The stochastic latent layer of the variational information bottleneck.
//!
//! The encoder emits a per-example diagonal Gaussian p(z|x) = N(μ_z(x),
//! diag σ_z²(x)), parameterized by mean and *log-variance* heads so that
//! σ_z = exp(log_var / 2) is positive by construction. Sampling goes through
//! the reparameterization z = μ + σ ⊙ ε with external standard-normal noise,
//! keeping the path differentiable in μ and σ.
//!
//! The compression rate against the uninformative prior q(z) = N(0, I) has
//! the closed form (per example, averaged over the batch)
//!
//! ```text
//! KL(p(z|x) ‖ q(z)) = ½ · [ Σ σ² + ‖μ‖² − d − Σ log σ² ]
//! ```
//!
//! A Monte-Carlo estimator of the same quantity ships as a test oracle: the
//! closed form is trusted only because the estimator reproduces it.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Element;

/// Per-example Gaussian posterior handles on the tape: `mu` and `log_var`
/// are `[N, d]` nodes emitted by the encoder's projection heads.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLatent {
    pub mu: Var,
    pub log_var: Var,
    pub d: usize,
}

/// The fixed prior q(z): a standard diagonal normal of dimension `d`
/// (zero mean, unit variance, immutable).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub d: usize,
}

/// Draw standard-normal reparameterization noise `[n, d]` as a constant leaf.
pub fn sample_noise<E: Element>(g: &mut Graph<E>, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Var {
    let data: Vec<E> =
        rng::standard_normal_vec(rng, n * d).into_iter().map(E::from_f64).collect();
    g.leaf_data(&[n, d], data, false)
}

/// z = μ + σ ⊙ ε with σ = exp(log_var / 2); differentiable through μ and
/// log_var, not through the noise.
pub fn reparameterize<E: Element>(
    g: &mut Graph<E>,
    latent: &GaussianLatent,
    noise: Var,
) -> Result<Var> {
    if g.shape(noise) != g.shape(latent.mu) {
        return Err(Error::Dimension(format!(
            "reparameterize: noise {:?} vs latent {:?}",
            g.shape(noise),
            g.shape(latent.mu)
        )));
    }
    let half_lv = g.mul_scalar(latent.log_var, E::from_f64(0.5));
    let sigma = g.exp(half_lv);
    let scaled = g.mul(sigma, noise)?;
    g.add(latent.mu, scaled)
}

/// Closed-form KL(p(z|x) ‖ N(0, I)), averaged over the batch; a scalar node.
pub fn kl_to_std_normal<E: Element>(g: &mut Graph<E>, latent: &GaussianLatent) -> Result<Var> {
    let shape = g.shape(latent.mu).to_vec();
    if g.shape(latent.log_var) != shape {
        return Err(Error::Dimension(format!(
            "kl_to_std_normal: mu {:?} vs log_var {:?}",
            shape,
            g.shape(latent.log_var)
        )));
    }
    let n = shape[0];
    // Per element: σ² + μ² − 1 − log σ²; summing and halving gives the
    // per-example formula, dividing by N the batch mean.
    let sigma2 = g.exp(latent.log_var);
    let mu2 = g.mul(latent.mu, latent.mu)?;
    let s = g.add(sigma2, mu2)?;
    let s = g.add_scalar(s, E::from_f64(-1.0));
    let s = g.sub(s, latent.log_var)?;
    let total = g.sum(s);
    Ok(g.mul_scalar(total, E::from_f64(0.5 / n as f64)))
}

/// Value-level closed form over raw `[n, d]` buffers (f64), for oracles.
pub fn kl_closed_form_value(mu: &[f64], log_var: &[f64], n: usize, d: usize) -> f64 {
    debug_assert_eq!(mu.len(), n * d);
    debug_assert_eq!(log_var.len(), n * d);
    let mut acc = 0.0;
    for (&m, &lv) in mu.iter().zip(log_var) {
        acc += lv.exp() + m * m - 1.0 - lv;
    }
    0.5 * acc / n as f64
}

/// Monte-Carlo estimate of the batch-mean KL: draws `n_samples` z per
/// example from p(z|x) and averages log p(z|x) − log q(z). Returns
/// (estimate, standard error). Test oracle only — O(n·d·samples).
pub fn kl_monte_carlo(
    mu: &[f64],
    log_var: &[f64],
    n: usize,
    d: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::Contract(format!(
            "kl_monte_carlo: need at least 1000 samples, got {n_samples}"
        )));
    }
    if mu.len() != n * d || log_var.len() != n * d {
        return Err(Error::Dimension(format!(
            "kl_monte_carlo: buffers {} / {} vs n·d = {}",
            mu.len(),
            log_var.len(),
            n * d
        )));
    }
    let mut rng = rng::stream_rng(seed, rng::streams::MONTE_CARLO);
    // Per draw, with z = μ + σ·ε:
    //   log p(z|x) − log q(z) = ½ Σ_j (z_j² − log σ_j² − ε_j²)
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let total = n * n_samples;
    for ex in 0..n {
        let m = &mu[ex * d..(ex + 1) * d];
        let lv = &log_var[ex * d..(ex + 1) * d];
        let sigma: Vec<f64> = lv.iter().map(|v| (0.5 * v).exp()).collect();
        for _ in 0..n_samples {
            let eps = rng::standard_normal_vec(&mut rng, d);
            let mut term = 0.0;
            for j in 0..d {
                let z = m[j] + sigma[j] * eps[j];
                term += z * z - lv[j] - eps[j] * eps[j];
            }
            let term = 0.5 * term;
            sum += term;
            sum_sq += term * term;
        }
    }
    let mean = sum / total as f64;
    let var = (sum_sq - sum * sum / total as f64) / (total as f64 - 1.0);
    let se = (var / total as f64).sqrt();
    Ok((mean, se))
}

/// Single-task VIB objective: ce + β·kl (both scalar nodes).
pub fn vib_loss<E: Element>(g: &mut Graph<E>, ce: Var, kl: Var, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::Contract(format!("vib_loss: beta must be ≥ 0, got {beta}")));
    }
    if g.value(ce).len() != 1 || g.value(kl).len() != 1 {
        return Err(Error::Contract("vib_loss: ce and kl must be scalars".into()));
    }
    let weighted = g.mul_scalar(kl, E::from_f64(beta));
    g.add(ce, weighted)
}
