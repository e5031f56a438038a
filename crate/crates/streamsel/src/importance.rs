//! Sample/class importance, selection plans for C-IS and the baselines,
//! weighted batch drawing and the unbiased gradient estimator.

use std::collections::{BTreeMap, HashMap};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Result, StreamselError};
use crate::model::{ModelParams, PerSampleGradient};
use crate::vecmath::{axpy, scale, sq_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Cis,
    Is,
    Rs,
    Hl,
    Ll,
    Ce,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "cis" => Ok(Strategy::Cis),
            "is" => Ok(Strategy::Is),
            "rs" => Ok(Strategy::Rs),
            "hl" => Ok(Strategy::Hl),
            "ll" => Ok(Strategy::Ll),
            "ce" => Ok(Strategy::Ce),
            other => Err(StreamselError::Config(format!(
                "unknown strategy '{other}' (expected cis|is|rs|hl|ll|ce)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Cis => "cis",
            Strategy::Is => "is",
            Strategy::Rs => "rs",
            Strategy::Hl => "hl",
            Strategy::Ll => "ll",
            Strategy::Ce => "ce",
        }
    }
}

/// A candidate sample visible to the selector: id plus class.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub id: usize,
    pub class: usize,
}

/// Empirical gradient moments of one class.
#[derive(Debug, Clone)]
pub struct ClassGradientSummary {
    pub class: usize,
    pub count: usize,
    pub mean_grad: Vec<f64>,
    pub mean_norm: f64,
    pub mean_sq_norm: f64,
}

pub fn summarize_class(class: usize, grads: &[&PerSampleGradient]) -> ClassGradientSummary {
    let count = grads.len();
    if count == 0 {
        return ClassGradientSummary {
            class,
            count: 0,
            mean_grad: Vec::new(),
            mean_norm: 0.0,
            mean_sq_norm: 0.0,
        };
    }
    let dim = grads[0].grad.len();
    let mut mean_grad = vec![0.0; dim];
    let mut mean_norm = 0.0;
    let mut mean_sq_norm = 0.0;
    for g in grads {
        axpy(&mut mean_grad, 1.0, &g.grad);
        mean_norm += g.norm;
        mean_sq_norm += g.norm * g.norm;
    }
    let inv = 1.0 / count as f64;
    scale(&mut mean_grad, inv);
    ClassGradientSummary {
        class,
        count,
        mean_grad,
        mean_norm: mean_norm * inv,
        mean_sq_norm: mean_sq_norm * inv,
    }
}

/// Sample importance: the gradient norm.
pub fn sample_importance(g: &PerSampleGradient) -> f64 {
    g.norm
}

/// Class importance in moment form: |S_y| * sqrt(E[||g||]^2 - ||E[g]||^2),
/// the radicand clamped at zero against floating-point noise.
pub fn class_importance(summary: &ClassGradientSummary) -> f64 {
    if summary.count == 0 {
        return 0.0;
    }
    let radicand = (summary.mean_norm * summary.mean_norm - sq_norm(&summary.mean_grad)).max(0.0);
    summary.count as f64 * radicand.sqrt()
}

/// Real-valued allocation targets |B| * I_y / sum(I); falls back to
/// proportional-to-class-size when every importance is zero.
pub fn allocation_targets(
    importances: &[f64],
    class_sizes: &[usize],
    total: usize,
) -> Result<Vec<f64>> {
    if total == 0 {
        return Err(StreamselError::Argument("batch size must be >= 1".into()));
    }
    let sum: f64 = importances.iter().sum();
    let weights: Vec<f64> = if sum > 0.0 {
        importances.to_vec()
    } else {
        let n: usize = class_sizes.iter().sum();
        if n == 0 {
            return Err(StreamselError::Selection("empty candidate set".into()));
        }
        class_sizes.iter().map(|&s| s as f64).collect()
    };
    let wsum: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| total as f64 * w / wsum).collect())
}

/// Largest-remainder rounding of the allocation targets, ties broken by
/// ascending class index. When `cap_to_size` is set (without-replacement
/// sampling), no class may exceed its pool and the excess is redistributed.
pub fn allocate_batch_sizes(
    importances: &[f64],
    class_sizes: &[usize],
    total: usize,
    cap_to_size: bool,
) -> Result<Vec<usize>> {
    let targets = allocation_targets(importances, class_sizes, total)?;
    let mut sizes = largest_remainder(&targets, total);
    if cap_to_size {
        let capacity: usize = class_sizes.iter().sum();
        if total > capacity {
            return Err(StreamselError::Selection(format!(
                "batch {total} exceeds candidate pool {capacity}"
            )));
        }
        loop {
            let mut excess = 0;
            for (s, &cap) in sizes.iter_mut().zip(class_sizes) {
                if *s > cap {
                    excess += *s - cap;
                    *s = cap;
                }
            }
            if excess == 0 {
                break;
            }
            // Hand surplus slots to uncapped classes by target share.
            let mut order: Vec<usize> = (0..sizes.len())
                .filter(|&i| sizes[i] < class_sizes[i])
                .collect();
            order.sort_by(|&a, &b| targets[b].partial_cmp(&targets[a]).unwrap().then(a.cmp(&b)));
            for i in order.into_iter().cycle() {
                if excess == 0 {
                    break;
                }
                if sizes[i] < class_sizes[i] {
                    sizes[i] += 1;
                    excess -= 1;
                }
            }
        }
    }
    Ok(sizes)
}

fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    for i in order {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

/// Intra-class probabilities proportional to gradient norm, uniform when
/// every norm is zero.
pub fn intra_class_probabilities(norms: &[f64]) -> Vec<f64> {
    let sum: f64 = norms.iter().sum();
    if sum > 0.0 {
        norms.iter().map(|n| n / sum).collect()
    } else {
        vec![1.0 / norms.len() as f64; norms.len()]
    }
}

#[derive(Debug, Clone)]
pub struct ClassPlan {
    pub class: usize,
    pub size: usize,
    pub sample_ids: Vec<usize>,
    pub probs: Vec<f64>,
    /// |S_y|, the class's candidate pool size.
    pub pool: usize,
}

#[derive(Debug, Clone)]
pub struct FlatPlan {
    pub sample_ids: Vec<usize>,
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
    pub draws: usize,
    /// |S|, the full candidate pool size.
    pub pool: usize,
}

#[derive(Debug, Clone)]
pub enum PlanKind {
    /// Per-class sizes and probabilities (C-IS and the uniform plan).
    PerClass(Vec<ClassPlan>),
    /// |B| i.i.d. draws from one distribution over all candidates (IS).
    Flat(FlatPlan),
    /// Uniform without replacement over all candidates (RS).
    UniformNoReplace {
        members: Vec<(usize, usize)>,
        draws: usize,
    },
    /// Deterministic top-k pick (HL / LL / CE), already truncated to |B|.
    Ranked { members: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    pub kind: PlanKind,
}

impl SelectionPlan {
    pub fn class_sizes(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        match &self.kind {
            PlanKind::PerClass(classes) => {
                for c in classes {
                    hist.insert(c.class, c.size);
                }
            }
            PlanKind::Flat(flat) => {
                // Expected counts are not integral for a flat plan; report
                // the pool composition instead.
                for &c in &flat.classes {
                    *hist.entry(c).or_insert(0) += 1;
                }
            }
            PlanKind::UniformNoReplace { members, .. } | PlanKind::Ranked { members } => {
                for &(_, c) in members {
                    *hist.entry(c).or_insert(0) += 1;
                }
            }
        }
        hist
    }

    pub fn dump_json(&self) -> serde_json::Value {
        match &self.kind {
            PlanKind::PerClass(classes) => json!({
                "strategy": self.strategy.name(),
                "classes": classes.iter().map(|c| json!({
                    "class": c.class,
                    "size": c.size,
                    "pool": c.pool,
                    "sample_ids": c.sample_ids,
                    "probs": c.probs,
                })).collect::<Vec<_>>(),
            }),
            PlanKind::Flat(flat) => json!({
                "strategy": self.strategy.name(),
                "draws": flat.draws,
                "pool": flat.pool,
                "sample_ids": flat.sample_ids,
                "probs": flat.probs,
            }),
            PlanKind::UniformNoReplace { members, draws } => json!({
                "strategy": self.strategy.name(),
                "draws": draws,
                "members": members.iter().map(|&(id, c)| json!([id, c])).collect::<Vec<_>>(),
            }),
            PlanKind::Ranked { members } => json!({
                "strategy": self.strategy.name(),
                "members": members.iter().map(|&(id, c)| json!([id, c])).collect::<Vec<_>>(),
            }),
        }
    }
}

fn group_by_class(cands: &[Candidate]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in cands.iter().enumerate() {
        groups.entry(c.class).or_default().push(i);
    }
    groups
}

fn check_aligned(cands: &[Candidate], grads: &[PerSampleGradient]) -> Result<()> {
    if cands.is_empty() {
        return Err(StreamselError::Selection("empty candidate set".into()));
    }
    if cands.len() != grads.len() {
        return Err(StreamselError::Argument(format!(
            "{} candidates but {} gradients",
            cands.len(),
            grads.len()
        )));
    }
    Ok(())
}

/// The two-level plan: slots across classes by class importance, samples
/// within a class by gradient norm.
pub fn build_plan_cis(
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    batch: usize,
) -> Result<SelectionPlan> {
    check_aligned(cands, grads)?;
    let groups = group_by_class(cands);
    let mut importances = Vec::with_capacity(groups.len());
    let mut sizes = Vec::with_capacity(groups.len());
    for idxs in groups.values() {
        let refs: Vec<&PerSampleGradient> = idxs.iter().map(|&i| &grads[i]).collect();
        let summary = summarize_class(0, &refs);
        importances.push(class_importance(&summary));
        sizes.push(idxs.len());
    }
    let alloc = allocate_batch_sizes(&importances, &sizes, batch, false)?;
    let classes = groups
        .iter()
        .zip(alloc)
        .map(|((&class, idxs), size)| {
            let norms: Vec<f64> = idxs.iter().map(|&i| grads[i].norm).collect();
            ClassPlan {
                class,
                size,
                sample_ids: idxs.iter().map(|&i| cands[i].id).collect(),
                probs: intra_class_probabilities(&norms),
                pool: idxs.len(),
            }
        })
        .collect();
    Ok(SelectionPlan {
        strategy: Strategy::Cis,
        kind: PlanKind::PerClass(classes),
    })
}

/// Per-class plan with uniform intra-class probabilities and allocation
/// proportional to class size. Used by the verification engine.
pub fn build_plan_uniform(cands: &[Candidate], batch: usize) -> Result<SelectionPlan> {
    if cands.is_empty() {
        return Err(StreamselError::Selection("empty candidate set".into()));
    }
    let groups = group_by_class(cands);
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let importances: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let alloc = allocate_batch_sizes(&importances, &sizes, batch, false)?;
    let classes = groups
        .iter()
        .zip(alloc)
        .map(|((&class, idxs), size)| ClassPlan {
            class,
            size,
            sample_ids: idxs.iter().map(|&i| cands[i].id).collect(),
            probs: vec![1.0 / idxs.len() as f64; idxs.len()],
            pool: idxs.len(),
        })
        .collect();
    Ok(SelectionPlan {
        strategy: Strategy::Rs,
        kind: PlanKind::PerClass(classes),
    })
}

/// Flat importance sampling over all candidates, P(x) proportional to
/// gradient norm, uniform fallback when every norm is zero.
pub fn build_plan_is(
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    batch: usize,
) -> Result<SelectionPlan> {
    check_aligned(cands, grads)?;
    let norms: Vec<f64> = grads.iter().map(|g| g.norm).collect();
    let probs = intra_class_probabilities(&norms);
    Ok(SelectionPlan {
        strategy: Strategy::Is,
        kind: PlanKind::Flat(FlatPlan {
            sample_ids: cands.iter().map(|c| c.id).collect(),
            classes: cands.iter().map(|c| c.class).collect(),
            probs,
            draws: batch,
            pool: cands.len(),
        }),
    })
}

/// Per-candidate model outputs needed by the heuristic baselines.
#[derive(Debug, Clone, Copy)]
pub struct BaselineScore {
    pub loss: f64,
    pub entropy: f64,
}

pub fn build_plan_baseline(
    strategy: Strategy,
    cands: &[Candidate],
    scores: &[BaselineScore],
    batch: usize,
) -> Result<SelectionPlan> {
    if cands.is_empty() {
        return Err(StreamselError::Selection("empty candidate set".into()));
    }
    if batch > cands.len() {
        return Err(StreamselError::Selection(format!(
            "batch {batch} exceeds candidate pool {}",
            cands.len()
        )));
    }
    let members: Vec<(usize, usize)> = cands.iter().map(|c| (c.id, c.class)).collect();
    match strategy {
        Strategy::Rs => Ok(SelectionPlan {
            strategy,
            kind: PlanKind::UniformNoReplace {
                members,
                draws: batch,
            },
        }),
        Strategy::Hl | Strategy::Ll | Strategy::Ce => {
            if scores.len() != cands.len() {
                return Err(StreamselError::Argument(
                    "baseline scores not aligned with candidates".into(),
                ));
            }
            let key = |i: usize| match strategy {
                Strategy::Hl => -scores[i].loss,
                Strategy::Ll => scores[i].loss,
                Strategy::Ce => -scores[i].entropy,
                _ => unreachable!(),
            };
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));
            let picked = order
                .into_iter()
                .take(batch)
                .map(|i| members[i])
                .collect();
            Ok(SelectionPlan {
                strategy,
                kind: PlanKind::Ranked { members: picked },
            })
        }
        Strategy::Cis | Strategy::Is => Err(StreamselError::Argument(
            "cis/is are not ranking baselines".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchEntry {
    pub sample_id: usize,
    pub class: usize,
    pub weight: f64,
}

/// How the unbiased estimator combines the entries.
#[derive(Debug, Clone)]
pub enum BatchKind {
    /// Stratified: per-class means weighted by |S_y|/|S|.
    PerClass {
        pools: BTreeMap<usize, usize>,
        total_pool: usize,
    },
    /// Plain mean of weighted entries.
    Flat,
}

#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pub entries: Vec<BatchEntry>,
    pub kind: BatchKind,
}

fn sample_cdf(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw a weighted batch from a plan. With-replacement draws per class for
/// per-class plans; weights 1/(P * pool) keep the estimator unbiased.
pub fn draw_batch(plan: &SelectionPlan, rng: &mut ChaCha8Rng) -> WeightedBatch {
    match &plan.kind {
        PlanKind::PerClass(classes) => {
            let mut entries = Vec::new();
            let mut pools = BTreeMap::new();
            let mut total_pool = 0;
            for cp in classes {
                pools.insert(cp.class, cp.pool);
                total_pool += cp.pool;
                for _ in 0..cp.size {
                    let i = sample_cdf(&cp.probs, rng);
                    entries.push(BatchEntry {
                        sample_id: cp.sample_ids[i],
                        class: cp.class,
                        weight: 1.0 / (cp.probs[i] * cp.pool as f64),
                    });
                }
            }
            WeightedBatch {
                entries,
                kind: BatchKind::PerClass { pools, total_pool },
            }
        }
        PlanKind::Flat(flat) => {
            let entries = (0..flat.draws)
                .map(|_| {
                    let i = sample_cdf(&flat.probs, rng);
                    BatchEntry {
                        sample_id: flat.sample_ids[i],
                        class: flat.classes[i],
                        weight: 1.0 / (flat.probs[i] * flat.pool as f64),
                    }
                })
                .collect();
            WeightedBatch {
                entries,
                kind: BatchKind::Flat,
            }
        }
        PlanKind::UniformNoReplace { members, draws } => {
            let mut pool: Vec<(usize, usize)> = members.clone();
            let mut entries = Vec::with_capacity(*draws);
            for _ in 0..*draws {
                let i = rng.random_range(0..pool.len());
                let (id, class) = pool.swap_remove(i);
                entries.push(BatchEntry {
                    sample_id: id,
                    class,
                    weight: 1.0,
                });
            }
            WeightedBatch {
                entries,
                kind: BatchKind::Flat,
            }
        }
        PlanKind::Ranked { members } => WeightedBatch {
            entries: members
                .iter()
                .map(|&(id, class)| BatchEntry {
                    sample_id: id,
                    class,
                    weight: 1.0,
                })
                .collect(),
            kind: BatchKind::Flat,
        },
    }
}

/// Unbiased batch-gradient estimate. Per-class batches combine class means
/// weighted by |S_y|/|S|; flat batches take the plain weighted mean.
pub fn weighted_gradient_estimate(
    batch: &WeightedBatch,
    grads: &HashMap<usize, Vec<f64>>,
) -> Result<Vec<f64>> {
    let dim = batch
        .entries
        .first()
        .and_then(|e| grads.get(&e.sample_id))
        .map(Vec::len)
        .ok_or_else(|| StreamselError::Selection("empty batch".into()))?;
    let lookup = |id: usize| -> Result<&Vec<f64>> {
        grads
            .get(&id)
            .ok_or_else(|| StreamselError::Selection(format!("no gradient for sample {id}")))
    };
    match &batch.kind {
        BatchKind::Flat => {
            let mut est = vec![0.0; dim];
            for e in &batch.entries {
                axpy(&mut est, e.weight, lookup(e.sample_id)?);
            }
            scale(&mut est, 1.0 / batch.entries.len() as f64);
            Ok(est)
        }
        BatchKind::PerClass { pools, total_pool } => {
            let mut per_class: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for e in &batch.entries {
                let slot = per_class
                    .entry(e.class)
                    .or_insert_with(|| (vec![0.0; dim], 0));
                axpy(&mut slot.0, e.weight, lookup(e.sample_id)?);
                slot.1 += 1;
            }
            let mut est = vec![0.0; dim];
            for (class, (sum, n)) in per_class {
                let pool = pools[&class] as f64;
                axpy(&mut est, pool / (*total_pool as f64 * n as f64), &sum);
            }
            Ok(est)
        }
    }
}

/// One SGD step on a weighted batch: w <- w - lr * g_hat.
pub fn sgd_step(
    params: &mut ModelParams,
    batch: &WeightedBatch,
    grads: &HashMap<usize, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(StreamselError::Argument("learning rate must be > 0".into()));
    }
    let est = weighted_gradient_estimate(batch, grads)?;
    params.apply_update(&est, lr)
}
