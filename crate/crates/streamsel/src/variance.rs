//! Verification engine: closed-form variance decomposition, Monte-Carlo
//! ground truth, the training-performance identity check, and exhaustive
//! allocation search on tiny instances.

use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StreamselError};
use crate::importance::{
    draw_batch, weighted_gradient_estimate, Candidate, PlanKind, SelectionPlan,
};
use crate::model::PerSampleGradient;
use crate::vecmath::{axpy, dot, sq_dist, sq_norm};

/// Per-class alpha/beta/gamma terms of the batch-gradient variance.
#[derive(Debug, Clone)]
pub struct ClassVarianceTerms {
    pub class: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct VarianceDecomposition {
    pub per_class: Vec<ClassVarianceTerms>,
    /// Trace variance (sum of per-coordinate variances) of the estimator.
    pub total: f64,
}

fn grad_map<'a>(
    cands: &[Candidate],
    grads: &'a [PerSampleGradient],
) -> HashMap<usize, &'a PerSampleGradient> {
    cands
        .iter()
        .zip(grads)
        .map(|(c, g)| (c.id, g))
        .collect()
}

/// Closed-form trace variance of the batch-gradient estimator for a plan.
///
/// Per-class plans use the alpha/beta/gamma decomposition. Flat plans use
/// the single-level analogue. Uniform-without-replacement plans get the
/// finite-population variance of a simple random sample mean, and ranked
/// plans are deterministic (variance zero).
pub fn closed_form_variance(
    plan: &SelectionPlan,
    cands: &[Candidate],
    grads: &[PerSampleGradient],
) -> Result<VarianceDecomposition> {
    let by_id = grad_map(cands, grads);
    let total_pool = cands.len() as f64;
    match &plan.kind {
        PlanKind::PerClass(classes) => {
            let mut per_class = Vec::with_capacity(classes.len());
            let mut total = 0.0;
            for cp in classes {
                let pool = cp.pool as f64;
                let dim = by_id[&cp.sample_ids[0]].grad.len();
                let mut mean = vec![0.0; dim];
                let mut beta = 0.0;
                for (id, &p) in cp.sample_ids.iter().zip(&cp.probs) {
                    let g = by_id
                        .get(id)
                        .ok_or_else(|| {
                            StreamselError::Decomposition(format!("no gradient for sample {id}"))
                        })?;
                    axpy(&mut mean, 1.0 / pool, &g.grad);
                    let sq = g.norm * g.norm;
                    if p <= 0.0 {
                        if sq == 0.0 {
                            continue;
                        }
                        return Err(StreamselError::Decomposition(format!(
                            "zero selection probability for sample {id} with nonzero gradient"
                        )));
                    }
                    beta += sq / (pool * pool * p);
                }
                let gamma = sq_norm(&mean);
                let alpha = if cp.size > 0 {
                    pool * pool / (total_pool * total_pool * cp.size as f64)
                } else if beta - gamma <= 1e-9 * beta.max(1.0) {
                    0.0
                } else {
                    // An unallocated class with genuine spread never gets
                    // drawn; the estimator is degenerate there.
                    f64::INFINITY
                };
                total += if alpha.is_infinite() {
                    f64::INFINITY
                } else {
                    alpha * (beta - gamma).max(0.0)
                };
                per_class.push(ClassVarianceTerms {
                    class: cp.class,
                    alpha,
                    beta,
                    gamma,
                });
            }
            Ok(VarianceDecomposition { per_class, total })
        }
        PlanKind::Flat(flat) => {
            let pool = flat.pool as f64;
            let dim = grads[0].grad.len();
            let mut mean = vec![0.0; dim];
            let mut second = 0.0;
            for (id, &p) in flat.sample_ids.iter().zip(&flat.probs) {
                let g = by_id[id];
                axpy(&mut mean, 1.0 / pool, &g.grad);
                let sq = g.norm * g.norm;
                if p <= 0.0 {
                    if sq == 0.0 {
                        continue;
                    }
                    return Err(StreamselError::Decomposition(format!(
                        "zero selection probability for sample {id} with nonzero gradient"
                    )));
                }
                second += sq / (pool * pool * p);
            }
            let total = (second - sq_norm(&mean)) / flat.draws as f64;
            Ok(VarianceDecomposition {
                per_class: Vec::new(),
                total: total.max(0.0),
            })
        }
        PlanKind::UniformNoReplace { members, draws } => {
            let n = members.len() as f64;
            let dim = grads[0].grad.len();
            let mut mean = vec![0.0; dim];
            for (id, _) in members {
                axpy(&mut mean, 1.0 / n, &by_id[id].grad);
            }
            let s2: f64 = members
                .iter()
                .map(|(id, _)| sq_dist(&by_id[id].grad, &mean))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            let b = *draws as f64;
            let total = if members.len() > 1 {
                (s2 / b) * (1.0 - b / n)
            } else {
                0.0
            };
            Ok(VarianceDecomposition {
                per_class: Vec::new(),
                total: total.max(0.0),
            })
        }
        PlanKind::Ranked { .. } => Ok(VarianceDecomposition {
            per_class: Vec::new(),
            total: 0.0,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct McVarianceEstimate {
    pub draws: usize,
    pub variance: f64,
    pub std_error: f64,
}

fn owned_grad_map(cands: &[Candidate], grads: &[PerSampleGradient]) -> HashMap<usize, Vec<f64>> {
    cands
        .iter()
        .zip(grads)
        .map(|(c, g)| (c.id, g.grad.clone()))
        .collect()
}

fn estimator_draws(
    plan: &SelectionPlan,
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let map = owned_grad_map(cands, grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let batch = draw_batch(plan, &mut rng);
            weighted_gradient_estimate(&batch, &map)
        })
        .collect()
}

fn trace_variance_of(draws: &[Vec<f64>]) -> (Vec<f64>, f64, f64) {
    let n = draws.len() as f64;
    let dim = draws[0].len();
    let mut mean = vec![0.0; dim];
    for d in draws {
        axpy(&mut mean, 1.0 / n, d);
    }
    let devs: Vec<f64> = draws.iter().map(|d| sq_dist(d, &mean)).collect();
    let variance = devs.iter().sum::<f64>() / (n - 1.0);
    let dev_mean = devs.iter().sum::<f64>() / n;
    let dev_var = devs.iter().map(|v| (v - dev_mean) * (v - dev_mean)).sum::<f64>() / (n - 1.0);
    let std_error = (dev_var / n).sqrt();
    (mean, variance, std_error)
}

/// Empirical trace variance of the batch-gradient estimator over `n`
/// independent draws. Deterministic given the seed.
pub fn mc_variance(
    plan: &SelectionPlan,
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    n: usize,
    seed: u64,
) -> Result<McVarianceEstimate> {
    if n < 2 {
        return Err(StreamselError::Argument("need at least 2 draws".into()));
    }
    let draws = estimator_draws(plan, cands, grads, n, seed)?;
    let (_, variance, std_error) = trace_variance_of(&draws);
    Ok(McVarianceEstimate {
        draws: n,
        variance,
        std_error,
    })
}

#[derive(Debug, Clone)]
pub struct DescentIdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual_abs: f64,
    /// |lhs - rhs| / max(|lhs|, |rhs|, 1e-12)
    pub residual_norm: f64,
    pub combined_se: f64,
}

/// Monte-Carlo check of the training-performance identity: the expected
/// one-step reduction in squared distance to a reference point equals
/// 2*lr*(w_t - w_ref)^T gbar - lr^2*||gbar||^2 - lr^2*V[g_hat], with gbar
/// the full-candidate mean gradient. The same draws feed both sides.
pub fn descent_identity_check(
    w_t: &[f64],
    w_ref: &[f64],
    plan: &SelectionPlan,
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    lr: f64,
    n: usize,
    seed: u64,
) -> Result<DescentIdentityReport> {
    if lr < 0.0 {
        return Err(StreamselError::Argument("learning rate must be >= 0".into()));
    }
    let dim = grads[0].grad.len();
    if w_t.len() != dim || w_ref.len() != dim {
        return Err(StreamselError::Shape {
            expected: dim,
            got: w_t.len(),
        });
    }
    let draws = estimator_draws(plan, cands, grads, n, seed)?;
    let (_, variance, se_var) = trace_variance_of(&draws);

    let a: Vec<f64> = w_t.iter().zip(w_ref).map(|(x, y)| x - y).collect();
    let lhs_samples: Vec<f64> = draws
        .iter()
        .map(|g| 2.0 * lr * dot(&a, g) - lr * lr * sq_norm(g))
        .collect();
    let nf = n as f64;
    let lhs = lhs_samples.iter().sum::<f64>() / nf;
    let lhs_var = lhs_samples
        .iter()
        .map(|v| (v - lhs) * (v - lhs))
        .sum::<f64>()
        / (nf - 1.0);
    let se_lhs = (lhs_var / nf).sqrt();

    let mut gbar = vec![0.0; dim];
    for g in grads {
        axpy(&mut gbar, 1.0 / grads.len() as f64, &g.grad);
    }
    let rhs = 2.0 * lr * dot(&a, &gbar) - lr * lr * sq_norm(&gbar) - lr * lr * variance;

    let residual_abs = (lhs - rhs).abs();
    let combined_se = (se_lhs * se_lhs + (lr * lr * se_var) * (lr * lr * se_var)).sqrt();
    Ok(DescentIdentityReport {
        lhs,
        rhs,
        residual_abs,
        residual_norm: residual_abs / lhs.abs().max(rhs.abs()).max(1e-12),
        combined_se,
    })
}

/// Per-class constants of the variance objective under optimal intra-class
/// probabilities: (class, pool, beta_star, gamma).
pub fn class_constants(
    cands: &[Candidate],
    grads: &[PerSampleGradient],
) -> Vec<(usize, usize, f64, f64)> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in cands.iter().enumerate() {
        groups.entry(c.class).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(class, idxs)| {
            let pool = idxs.len();
            let n = pool as f64;
            let mean_norm: f64 = idxs.iter().map(|&i| grads[i].norm).sum::<f64>() / n;
            let beta_star = mean_norm * mean_norm;
            let dim = grads[idxs[0]].grad.len();
            let mut mean = vec![0.0; dim];
            for &i in &idxs {
                axpy(&mut mean, 1.0 / n, &grads[i].grad);
            }
            (class, pool, beta_star, sq_norm(&mean))
        })
        .collect()
}

/// Sum over classes of |S_y|^2 (beta*_y - gamma_y) / (|S|^2 b_y) for a
/// (possibly fractional) allocation. Zero-spread classes contribute zero;
/// unallocated classes with spread make the objective infinite.
pub fn allocation_objective(constants: &[(usize, usize, f64, f64)], alloc: &[f64]) -> f64 {
    let total_pool: usize = constants.iter().map(|&(_, p, _, _)| p).sum();
    let s2 = (total_pool * total_pool) as f64;
    let mut obj = 0.0;
    for (&(_, pool, beta_star, gamma), &b) in constants.iter().zip(alloc) {
        let spread = (beta_star - gamma).max(0.0);
        if spread <= 1e-12 * beta_star.max(1.0) {
            continue;
        }
        if b <= 0.0 {
            return f64::INFINITY;
        }
        obj += (pool * pool) as f64 * spread / (s2 * b);
    }
    obj
}

#[derive(Debug, Clone)]
pub struct AllocationSearch {
    /// (class, size) of the best integer composition.
    pub best: Vec<(usize, usize)>,
    pub best_variance: f64,
    pub compositions: usize,
}

fn count_compositions(total: usize, parts: usize) -> usize {
    // C(total + parts - 1, parts - 1), saturating.
    let mut acc: usize = 1;
    for i in 0..parts - 1 {
        acc = acc.saturating_mul(total + parts - 1 - i) / (i + 1);
    }
    acc
}

/// Enumerate every integer composition of the batch over classes and return
/// the allocation minimizing the closed-form variance with optimal
/// intra-class probabilities.
pub fn exhaustive_allocation_search(
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    batch: usize,
) -> Result<AllocationSearch> {
    if cands.is_empty() {
        return Err(StreamselError::Selection("empty candidate set".into()));
    }
    let constants = class_constants(cands, grads);
    let k = constants.len();
    let count = count_compositions(batch, k);
    if count > 100_000 {
        return Err(StreamselError::Guard(format!(
            "{count} compositions exceed the 1e5 guard"
        )));
    }
    let mut alloc = vec![0usize; k];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut seen = 0usize;
    enumerate_compositions(batch, 0, &mut alloc, &mut |a| {
        seen += 1;
        let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let v = allocation_objective(&constants, &af);
        if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
            best = Some((a.to_vec(), v));
        }
    });
    let (alloc, variance) = best.unwrap();
    Ok(AllocationSearch {
        best: constants
            .iter()
            .zip(alloc)
            .map(|(&(class, _, _, _), b)| (class, b))
            .collect(),
        best_variance: variance,
        compositions: seen,
    })
}

fn enumerate_compositions(
    remaining: usize,
    idx: usize,
    alloc: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if idx == alloc.len() - 1 {
        alloc[idx] = remaining;
        visit(alloc);
        return;
    }
    for b in 0..=remaining {
        alloc[idx] = b;
        enumerate_compositions(remaining - b, idx + 1, alloc, visit);
    }
}

/// Largest variance change caused by moving one batch slot between two
/// classes of an integer allocation. Bounds the rounding gap of the
/// largest-remainder allocation against the exhaustive optimum.
pub fn single_unit_reallocation_delta(
    constants: &[(usize, usize, f64, f64)],
    alloc: &[usize],
) -> f64 {
    let base: Vec<f64> = alloc.iter().map(|&x| x as f64).collect();
    let v0 = allocation_objective(constants, &base);
    let mut delta: f64 = 0.0;
    for from in 0..alloc.len() {
        if alloc[from] == 0 {
            continue;
        }
        for to in 0..alloc.len() {
            if to == from {
                continue;
            }
            let mut moved = base.clone();
            moved[from] -= 1.0;
            moved[to] += 1.0;
            let v = allocation_objective(constants, &moved);
            if v.is_finite() && v0.is_finite() {
                delta = delta.max((v - v0).abs());
            }
        }
    }
    delta
}

/// Random verification instance: each class is a gradient cloud around its
/// own random center with a class-specific spread, so class diversities are
/// heterogeneous. Deterministic given the seed.
pub fn random_instance(
    classes: usize,
    max_per_class: usize,
    dim: usize,
    seed: u64,
) -> (Vec<Candidate>, Vec<PerSampleGradient>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands = Vec::new();
    let mut grads = Vec::new();
    let mut id = 0;
    for class in 0..classes {
        let count = rng.random_range(2..=max_per_class.max(2));
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spread: f64 = rng.random_range(0.1..2.0);
        for _ in 0..count {
            let g: Vec<f64> = center
                .iter()
                .map(|c| c + spread * rng.random_range(-1.0..1.0))
                .collect();
            let norm = sq_norm(&g).sqrt();
            cands.push(Candidate { id, class });
            grads.push(PerSampleGradient {
                sample_id: id,
                grad: g,
                norm,
            });
            id += 1;
        }
    }
    (cands, grads)
}
