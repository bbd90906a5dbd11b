//! Central finite-difference gradient checking.
//!
//! The oracle every backward rule is tested against: bump each input
//! coordinate by ±h, rebuild the forward computation from scratch, and
//! compare (f(x+h) − f(x−h)) / 2h with the analytic gradient. Run at `f64`
//! with h = 1e-5, agreement to a relative error below 1e-5 is expected of
//! every differentiable op and loss term.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
///
/// The per-coordinate relative error is symmetric and scale-aware:
///
/// ```text
/// rel(c) = |ga(c) − fd(c)| / (|ga(c)| + |fd(c)| + 1e-3·S),    S = maxₓ max(|ga|, |fd|)
/// ```
///
/// The `1e-3·S` floor keeps coordinates whose true gradient is far below
/// the case's gradient scale (where the central-difference signal sits at
/// the rounding-noise floor) from dominating, while a systematic backward
/// bug — which perturbs coordinates at scale `S` — still produces rel ≈ 1.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over coordinates of the symmetric relative error above.
    pub max_rel_err: f64,
    /// (input index, coordinate) attaining the max.
    pub worst: (usize, usize),
    /// Total coordinates checked.
    pub coords: usize,
    /// The gradient scale S the floor is taken against.
    pub scale: f64,
}

impl FdReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "finite-difference mismatch: rel err {:.3e} ≥ {:.1e} at input {} coord {} ({} coords)",
            self.max_rel_err,
            tol,
            self.worst.0,
            self.worst.1,
            self.coords
        );
    }
}

/// Check the analytic gradient of `build` (a scalar-valued forward pass over
/// leaves created from `inputs`) against central finite differences with
/// step `h`, over every coordinate of every input.
///
/// `build` must be a pure function of the leaf values — it is re-run
/// 2·(total coordinates) + 1 times.
pub fn finite_difference_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if !t.requires_grad() {
                t = t.with_requires_grad();
            }
            g.leaf(&t)
        })
        .collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("finite_difference_check: loss must be scalar".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    // Gather every (analytic, finite-difference) pair first; the error is
    // normalized against the strongest gradient in the whole sweep.
    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut scale = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;

            let fd = (up - down) / (2.0 * h);
            let ga = analytic[i][c];
            scale = scale.max(fd.abs()).max(ga.abs());
            pairs.push((i, c, ga, fd));
        }
    }

    let mut report = FdReport { max_rel_err: 0.0, worst: (0, 0), coords: pairs.len(), scale };
    let floor = 1e-3 * scale + 1e-12;
    for (i, c, ga, fd) in pairs {
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs() + floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, c);
        }
    }
    Ok(report)
}

/// One named finite-difference result from [`gradient_suite`].
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: FdReport,
}

fn normal_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = crate::rng::standard_normal_vec(rng, n).into_iter().map(|v| v * scale).collect();
    Tensor::from_vec(shape, data).expect("shape matches draw")
}

/// Values with pairwise gaps far larger than the FD step, so max-pool and
/// ReLU stay on one linear piece under ±h bumps.
fn well_separated(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let perm = crate::rng::shuffled_indices(rng, n);
    let jitter = crate::rng::standard_normal_vec(rng, n);
    let data = perm
        .into_iter()
        .zip(jitter)
        .map(|(rank, j)| {
            // Centered half-step off zero so no value sits near the origin.
            rank as f64 * 0.1 - 0.05 * n as f64 + 0.05 + j.clamp(-3.0, 3.0) * 0.003
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches draw")
}

fn random_labels(rng: &mut rand_chacha::ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    use rand::Rng;
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Finite-difference coverage of every differentiable op and every loss
/// path, refreshed from `seed`. Each case re-derives the analytic gradient
/// against the central-difference oracle at h = 1e-5; callers assert the
/// returned reports against their tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    use crate::multitask::{build_loss, LossSpec};
    use crate::vib::{kl_to_std_normal, reparameterize, GaussianLatent};

    let mut rng = crate::rng::stream_rng(seed, 0xFD);
    let h = 1e-5;
    let mut cases = Vec::new();
    let mut run = |name: &'static str,
                   inputs: &[Tensor<f64>],
                   build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = finite_difference_check(inputs, h, build)?;
        cases.push(SuiteCase { name, report });
        Ok(())
    };

    // Square-sum read-out: makes upstream gradients value-dependent.
    fn sq_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    }

    // -- elementwise and shape ops ---------------------------------------
    let x = normal_tensor(&mut rng, &[12], 0.8);
    let y = normal_tensor(&mut rng, &[12], 0.8);
    run("elementwise_chain", &[x, y], &|g, v| {
        // add, sub, mul, neg, scalar ops, exp in one expression.
        let a = g.add(v[0], v[1])?;
        let b = g.sub(v[0], v[1])?;
        let m = g.mul(a, b)?;
        let scaled = g.mul_scalar(m, 0.3);
        let shifted = g.add_scalar(scaled, 0.1);
        let e = g.exp(shifted);
        let n = g.neg(e);
        sq_sum(g, n)
    })?;

    let x = well_separated(&mut rng, &[40]);
    run("relu", &[x], &|g, v| {
        let r = g.relu(v[0]);
        sq_sum(g, r)
    })?;

    let x = normal_tensor(&mut rng, &[3, 8], 1.0);
    run("reshape_select_mean", &[x], &|g, v| {
        let r = g.reshape(v[0], &[4, 6])?;
        let sq = g.mul(r, r)?;
        let picked = g.select(sq, 17)?;
        let m = g.mean(sq);
        g.add(picked, m)
    })?;

    // -- dense ------------------------------------------------------------
    let x = normal_tensor(&mut rng, &[4, 6], 1.0);
    let w = normal_tensor(&mut rng, &[6, 3], 0.5);
    let b = normal_tensor(&mut rng, &[3], 0.5);
    run("dense", &[x, w, b], &|g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        sq_sum(g, y)
    })?;

    // -- conv (both strides the tables use) -------------------------------
    let x = normal_tensor(&mut rng, &[2, 2, 6, 6], 1.0);
    let w = normal_tensor(&mut rng, &[3, 2, 3, 3], 0.4);
    let b = normal_tensor(&mut rng, &[3], 0.3);
    run("conv2d_stride1", &[x, w, b], &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1)?;
        sq_sum(g, y)
    })?;

    let x = normal_tensor(&mut rng, &[1, 1, 7, 7], 1.0);
    let w = normal_tensor(&mut rng, &[2, 1, 5, 5], 0.4);
    let b = normal_tensor(&mut rng, &[2], 0.3);
    run("conv2d_stride2", &[x, w, b], &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2)?;
        sq_sum(g, y)
    })?;

    // -- max pool ----------------------------------------------------------
    let x = well_separated(&mut rng, &[2, 3, 6, 6]);
    run("maxpool2x2", &[x], &|g, v| {
        let y = g.maxpool2x2(v[0])?;
        sq_sum(g, y)
    })?;

    // -- batch norm: train and eval, 2-D and 4-D --------------------------
    let x = normal_tensor(&mut rng, &[8, 4], 1.0);
    let gamma = normal_tensor(&mut rng, &[4], 0.5);
    let beta = normal_tensor(&mut rng, &[4], 0.5);
    run("batchnorm_train_2d", &[x, gamma, beta], &|g, v| {
        let mut stats = crate::graph::BnStats::new(4);
        let y = g.batchnorm(v[0], v[1], v[2], &mut stats, true)?;
        sq_sum(g, y)
    })?;

    let x = normal_tensor(&mut rng, &[8, 4], 1.0);
    let gamma = normal_tensor(&mut rng, &[4], 0.5);
    let beta = normal_tensor(&mut rng, &[4], 0.5);
    run("batchnorm_eval_2d", &[x, gamma, beta], &|g, v| {
        let mut stats = crate::graph::BnStats::new(4);
        let y = g.batchnorm(v[0], v[1], v[2], &mut stats, false)?;
        sq_sum(g, y)
    })?;

    let x = normal_tensor(&mut rng, &[2, 3, 4, 4], 1.0);
    let gamma = normal_tensor(&mut rng, &[3], 0.5);
    let beta = normal_tensor(&mut rng, &[3], 0.5);
    run("batchnorm_train_4d", &[x, gamma, beta], &|g, v| {
        let mut stats = crate::graph::BnStats::new(3);
        let y = g.batchnorm(v[0], v[1], v[2], &mut stats, true)?;
        sq_sum(g, y)
    })?;

    // -- cross entropy ------------------------------------------------------
    let logits = normal_tensor(&mut rng, &[6, 5], 1.5);
    let labels = random_labels(&mut rng, 6, 5);
    let l1 = labels.clone();
    run("softmax_cross_entropy", &[logits], &move |g, v| {
        g.softmax_cross_entropy(v[0], &l1)
    })?;

    // -- reparameterization (z = mu + sigma*eps machinery) ------------------
    let mu = normal_tensor(&mut rng, &[3, 4], 1.0);
    let lv = normal_tensor(&mut rng, &[3, 4], 0.5);
    let noise = normal_tensor(&mut rng, &[3, 4], 1.0);
    run("reparameterize", &[mu, lv], &move |g, v| {
        let eps = g.leaf(&noise);
        let latent = GaussianLatent { mu: v[0], log_var: v[1], d: 4 };
        let z = reparameterize(g, &latent, eps)?;
        sq_sum(g, z)
    })?;

    // -- the three loss equations ------------------------------------------
    let mu = normal_tensor(&mut rng, &[3, 4], 1.0);
    let lv = normal_tensor(&mut rng, &[3, 4], 0.5);
    run("kl_rate_term", &[mu, lv], &|g, v| {
        let latent = GaussianLatent { mu: v[0], log_var: v[1], d: 4 };
        kl_to_std_normal(g, &latent)
    })?;

    let logits_a = normal_tensor(&mut rng, &[5, 4], 1.5);
    let logits_b = normal_tensor(&mut rng, &[5, 3], 1.5);
    let s = normal_tensor(&mut rng, &[2], 0.6);
    let la = random_labels(&mut rng, 5, 4);
    let lb = random_labels(&mut rng, 5, 3);
    let (la2, lb2) = (la.clone(), lb.clone());
    run("uncertainty_weighted_sum", &[logits_a, logits_b, s], &move |g, v| {
        let labels = vec![la2.clone(), lb2.clone()];
        let (total, _) = build_loss(g, &LossSpec::Uwl, &[v[0], v[1]], &labels, None, Some(v[2]))?;
        Ok(total)
    })?;

    let logits_a = normal_tensor(&mut rng, &[5, 4], 1.5);
    let logits_b = normal_tensor(&mut rng, &[5, 3], 1.5);
    let mu = normal_tensor(&mut rng, &[5, 6], 1.0);
    let lv = normal_tensor(&mut rng, &[5, 6], 0.5);
    let s = normal_tensor(&mut rng, &[2], 0.6);
    let (la3, lb3) = (la.clone(), lb.clone());
    run("mtvib_objective", &[logits_a, logits_b, mu, lv, s], &move |g, v| {
        let labels = vec![la3.clone(), lb3.clone()];
        let latent = GaussianLatent { mu: v[2], log_var: v[3], d: 6 };
        let (total, _) = build_loss(
            g,
            &LossSpec::Mtvib { beta: 1e-3 },
            &[v[0], v[1]],
            &labels,
            Some(&latent),
            Some(v[4]),
        )?;
        Ok(total)
    })?;

    let logits_a = normal_tensor(&mut rng, &[5, 4], 1.5);
    let logits_b = normal_tensor(&mut rng, &[5, 3], 1.5);
    run("grid_weighted_sum", &[logits_a, logits_b], &move |g, v| {
        let labels = vec![la.clone(), lb.clone()];
        let (total, _) = build_loss(
            g,
            &LossSpec::Gs { weights: vec![0.3, 0.7] },
            &[v[0], v[1]],
            &labels,
            None,
            None,
        )?;
        Ok(total)
    })?;

    // -- composite block: dense→BN→ReLU→dense→CE (a real model slice) ------
    let x = normal_tensor(&mut rng, &[6, 5], 1.0);
    let w1 = normal_tensor(&mut rng, &[5, 4], 0.6);
    let b1 = normal_tensor(&mut rng, &[4], 0.3);
    let ga = normal_tensor(&mut rng, &[4], 0.5);
    let be = normal_tensor(&mut rng, &[4], 0.5);
    let w2 = normal_tensor(&mut rng, &[4, 3], 0.6);
    let b2 = normal_tensor(&mut rng, &[3], 0.3);
    let lc = random_labels(&mut rng, 6, 3);
    run("dense_bn_relu_ce_stack", &[x, w1, b1, ga, be, w2, b2], &move |g, v| {
        let mut stats = crate::graph::BnStats::new(4);
        let h1 = g.dense(v[0], v[1], v[2])?;
        let h1 = g.batchnorm(h1, v[3], v[4], &mut stats, true)?;
        let h1 = g.relu(h1);
        let logits = g.dense(h1, v[5], v[6])?;
        g.softmax_cross_entropy(logits, &lc)
    })?;

    Ok(cases)
}
