//! The streaming training loop: intake, coarse filter, fine-grained
//! selection, SGD step, and the sequential vs one-round-delay pipelined
//! timing accounting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, StreamKind};
use crate::error::{Result, StreamselError};
use crate::filter::{CandidateBuffer, ClassStreamStats, ScoredCandidate};
use crate::importance::{
    build_plan_baseline, build_plan_cis, build_plan_is, draw_batch, weighted_gradient_estimate,
    BaselineScore, Candidate, SelectionPlan, Strategy, WeightedBatch,
};
use crate::model::{per_sample_gradient, GradScope, ModelParams, PerSampleGradient, Sample};
use crate::stream::{read_csv, MixtureSpec, NoiseSpec, StreamSource};
use crate::variance::closed_form_variance;
use crate::vecmath::{entropy, softmax};

/// Simulated per-operation costs, in abstract seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimingModel {
    pub t_filter: f64,
    pub t_grad: f64,
    pub t_plan: f64,
    pub t_train: f64,
    pub t_sync: f64,
}

impl TimingModel {
    /// Selection lane: filter the window, compute candidate gradients,
    /// build and draw the plan.
    pub fn lane_b(&self, window: usize, candidates: usize) -> f64 {
        window as f64 * self.t_filter + candidates as f64 * self.t_grad + self.t_plan
    }

    /// Training lane: one SGD step on the staged batch.
    pub fn lane_a(&self) -> f64 {
        self.t_train
    }

    /// Alternating execution: both lanes back to back, plus the same
    /// per-round batch/parameter hand-off as the pipelined mode.
    pub fn sequential_round(&self, window: usize, candidates: usize) -> f64 {
        self.lane_b(window, candidates) + self.lane_a() + self.t_sync
    }

    pub fn pipelined_round(&self, window: usize, candidates: usize) -> f64 {
        self.lane_a().max(self.lane_b(window, candidates)) + self.t_sync
    }
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    /// Closed-form trace variance of this round's selection plan.
    pub variance_closed_form: f64,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Cumulative simulated time under each accounting.
    pub seq_time: f64,
    pub pipe_time: f64,
    /// Class histogram of the batch selected this round.
    pub batch_hist: Vec<usize>,
    pub selected_ids: Vec<usize>,
    pub fallback_rs: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a flattened parameter snapshot per round (post-update).
    pub record_params: bool,
    /// Keep the JSON dump of every round's selection plan.
    pub dump_plans: bool,
}

#[derive(Debug)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub final_acc: f64,
    pub final_loss: f64,
    pub param_trace: Vec<Vec<f64>>,
    pub plans: Vec<serde_json::Value>,
}

/// SplitMix64-style seed derivation so every random consumer gets an
/// independent stream from one run seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_STREAM: u64 = 1;
const SALT_HOLDOUT: u64 = 2;
const SALT_INIT: u64 = 3;
const SALT_BOOT: u64 = 4;
const SALT_DRAW: u64 = 5;
/// Class means are a fixed property of the synthetic task, shared by every
/// run so accuracies are comparable across seeds.
const MEANS_SEED: u64 = 0x6d65_616e;

fn mixture_spec(cfg: &ExperimentConfig) -> Result<MixtureSpec> {
    MixtureSpec::with_random_means(
        cfg.model.input_dim(),
        cfg.model.classes(),
        cfg.mean_radius,
        cfg.class_scales.clone(),
        MEANS_SEED,
    )
}

/// The training stream for one (config, seed) pair. Paired across
/// strategies: same seed, same sample sequence.
pub fn make_stream(cfg: &ExperimentConfig, seed: u64) -> Result<StreamSource> {
    let stream_seed = derive_seed(seed, SALT_STREAM);
    match cfg.stream {
        StreamKind::Mixture => Ok(StreamSource::mixture(
            mixture_spec(cfg)?,
            cfg.velocity,
            cfg.noise,
            stream_seed,
        )),
        StreamKind::Csv => {
            let path = cfg.csv_path.as_ref().ok_or_else(|| {
                StreamselError::Config("key 'csv_path': required for stream = csv".into())
            })?;
            StreamSource::replay(read_csv(path)?, cfg.velocity, cfg.noise, stream_seed)
        }
    }
}

/// Clean held-out set, shared across strategies for a given seed.
pub fn make_holdout(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    match cfg.stream {
        StreamKind::Mixture => {
            let mut src = StreamSource::mixture(
                mixture_spec(cfg)?,
                cfg.holdout.max(1),
                NoiseSpec::None,
                derive_seed(seed, SALT_HOLDOUT),
            );
            Ok(src.next_window())
        }
        StreamKind::Csv => {
            let path = cfg.csv_path.as_ref().ok_or_else(|| {
                StreamselError::Config("key 'csv_path': required for stream = csv".into())
            })?;
            let samples = read_csv(path)?;
            let n = samples.len();
            let take = cfg.holdout.max(1).min(n);
            Ok(samples[n - take..].to_vec())
        }
    }
}

/// Argmax-logit accuracy (ties to the lowest class index) and mean loss.
pub fn evaluate(params: &ModelParams, holdout: &[Sample]) -> Result<(f64, f64)> {
    if holdout.is_empty() {
        return Err(StreamselError::Argument("empty held-out set".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for s in holdout {
        let logits = params.forward(&s.features)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        if pred == s.label {
            correct += 1;
        }
        loss_sum += params.loss(s)?;
    }
    let n = holdout.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// Spearman rank correlation with average ranks on ties. Degenerate inputs
/// (a constant side) only correlate when the rankings agree exactly.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StreamselError::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(StreamselError::Probe(format!(
            "{} samples, need at least 3",
            a.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return if ra == rb {
            Ok(1.0)
        } else {
            Err(StreamselError::Probe("degenerate rank vector".into()))
        };
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap().then(i.cmp(&j)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank stability of per-sample importance between two parameter vectors.
pub fn importance_drift_probe(
    params_a: &ModelParams,
    params_b: &ModelParams,
    samples: &[Sample],
) -> Result<f64> {
    if samples.len() < 3 {
        return Err(StreamselError::Probe(format!(
            "{} samples, need at least 3",
            samples.len()
        )));
    }
    let norms = |p: &ModelParams| -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| per_sample_gradient(p, s, GradScope::LastLayer).map(|g| g.norm))
            .collect()
    };
    spearman(&norms(params_a)?, &norms(params_b)?)
}

#[derive(Debug, Clone)]
struct SelectedBatch {
    batch: WeightedBatch,
    samples: HashMap<usize, Sample>,
}

struct SelectionOutcome {
    selected: SelectedBatch,
    variance: f64,
    candidates_scored: usize,
    fallback_rs: bool,
    plan_json: Option<serde_json::Value>,
}

struct RoundState {
    stats: Vec<ClassStreamStats>,
    buffer: CandidateBuffer,
    arrival: u64,
}

/// One selection pass: filter the window into the buffer, snapshot
/// candidates, compute gradients at the given parameter snapshot, build the
/// strategy's plan and draw a weighted batch.
fn select_round(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    state: &mut RoundState,
    params: &ModelParams,
    window: &[Sample],
    draw_seed: u64,
    dump_plan: bool,
) -> Result<SelectionOutcome> {
    for s in window {
        if s.label >= cfg.model.classes() {
            return Err(StreamselError::Label {
                label: s.label,
                classes: cfg.model.classes(),
            });
        }
        let features = params.extract_features(&s.features)?;
        let stats = &mut state.stats[s.label];
        stats.update(&features, cfg.stats_decay);
        let score = stats.score(&features)?;
        state.buffer.admit(ScoredCandidate {
            sample: s.clone(),
            features,
            score,
            arrival: state.arrival,
        });
        state.arrival += 1;
    }

    let mut pool: Vec<Sample> = Vec::new();
    for group in state.buffer.snapshot_by_class().values() {
        for c in group {
            pool.push(c.sample.clone());
        }
    }
    if cfg.clear_after_round {
        state.buffer.clear();
    }
    let mut fallback_rs = false;
    let mut strategy = strategy;
    if pool.is_empty() {
        // A zero-capacity buffer degenerates to random selection over the
        // raw window.
        pool = window.to_vec();
        strategy = Strategy::Rs;
        fallback_rs = true;
    }

    let cands: Vec<Candidate> = pool
        .iter()
        .map(|s| Candidate {
            id: s.id,
            class: s.label,
        })
        .collect();
    let grads: Vec<PerSampleGradient> = pool
        .iter()
        .map(|s| per_sample_gradient(params, s, GradScope::LastLayer))
        .collect::<Result<_>>()?;

    let plan: SelectionPlan = match strategy {
        Strategy::Cis => build_plan_cis(&cands, &grads, cfg.batch_size)?,
        Strategy::Is => build_plan_is(&cands, &grads, cfg.batch_size)?,
        Strategy::Rs => build_plan_baseline(strategy, &cands, &[], cfg.batch_size)?,
        Strategy::Hl | Strategy::Ll | Strategy::Ce => {
            let scores: Vec<BaselineScore> = pool
                .iter()
                .map(|s| {
                    let logits = params.forward(&s.features)?;
                    Ok(BaselineScore {
                        loss: params.loss(s)?,
                        entropy: entropy(&softmax(&logits)),
                    })
                })
                .collect::<Result<_>>()?;
            build_plan_baseline(strategy, &cands, &scores, cfg.batch_size)?
        }
    };
    let variance = closed_form_variance(&plan, &cands, &grads)?.total;
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let batch = draw_batch(&plan, &mut rng);
    let samples: HashMap<usize, Sample> = pool.into_iter().map(|s| (s.id, s)).collect();
    Ok(SelectionOutcome {
        selected: SelectedBatch { batch, samples },
        variance,
        candidates_scored: cands.len(),
        fallback_rs,
        plan_json: dump_plan.then(|| plan.dump_json()),
    })
}

/// Uniform-without-replacement batch from the first window; seeds the
/// pipelined loop, which has no prior round to select for.
fn bootstrap_batch(
    cfg: &ExperimentConfig,
    window: &[Sample],
    seed: u64,
) -> Result<SelectedBatch> {
    let cands: Vec<Candidate> = window
        .iter()
        .map(|s| Candidate {
            id: s.id,
            class: s.label,
        })
        .collect();
    let plan = build_plan_baseline(Strategy::Rs, &cands, &[], cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_BOOT));
    let batch = draw_batch(&plan, &mut rng);
    let samples = window.iter().map(|s| (s.id, s.clone())).collect();
    Ok(SelectedBatch { batch, samples })
}

fn train_step(
    params: &mut ModelParams,
    trained: &SelectedBatch,
    lr: f64,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
    for e in &trained.batch.entries {
        let s = trained.samples.get(&e.sample_id).ok_or_else(|| {
            StreamselError::Selection(format!("no sample for id {}", e.sample_id))
        })?;
        loss_sum += params.loss(s)?;
        if !grads.contains_key(&e.sample_id) {
            grads.insert(
                e.sample_id,
                per_sample_gradient(params, s, GradScope::Full)?.grad,
            );
        }
    }
    let train_loss = loss_sum / trained.batch.entries.len() as f64;
    if lr > 0.0 {
        let est = weighted_gradient_estimate(&trained.batch, &grads)?;
        params.apply_update(&est, lr)?;
    }
    Ok(train_loss)
}

fn lr_at(cfg: &ExperimentConfig, round: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((round / 100) as i32)
}

/// Full training run for one (strategy, seed) pair. `pipelined` trains the
/// batch staged by the previous round's selection; otherwise each round
/// trains its own fresh selection. Both timing accountings are recorded in
/// either mode.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
    pipelined: bool,
    opts: &RunOptions,
) -> Result<RunResult> {
    let mut source = make_stream(cfg, seed)?;
    let holdout = make_holdout(cfg, seed)?;
    let mut params = ModelParams::init(cfg.model, derive_seed(seed, SALT_INIT));
    params.feature_block = cfg.feature_block;
    let classes = cfg.model.classes();
    let mut state = RoundState {
        stats: (0..classes)
            .map(|c| ClassStreamStats::new(c, feature_dim(cfg)))
            .collect(),
        buffer: CandidateBuffer::new(cfg.buffer_capacity),
        arrival: 0,
    };
    let mut staged: Option<SelectedBatch> = None;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut param_trace = Vec::new();
    let mut plans = Vec::new();
    let mut seq_time = 0.0;
    let mut pipe_time = 0.0;

    for round in 0..cfg.rounds {
        let window = source.next_window();
        let snapshot = params.clone();
        let sel = select_round(
            cfg,
            strategy,
            &mut state,
            &snapshot,
            &window,
            derive_seed(derive_seed(seed, SALT_DRAW), round as u64),
            opts.dump_plans,
        )?;

        let trained = if pipelined {
            match staged.replace(sel.selected.clone()) {
                Some(prev) => prev,
                None => bootstrap_batch(cfg, &window, seed)?,
            }
        } else {
            sel.selected.clone()
        };
        let train_loss = train_step(&mut params, &trained, lr_at(cfg, round))?;
        let (test_acc, _) = evaluate(&params, &holdout)?;

        seq_time += cfg
            .timing
            .sequential_round(window.len(), sel.candidates_scored);
        pipe_time += cfg
            .timing
            .pipelined_round(window.len(), sel.candidates_scored);

        let mut batch_hist = vec![0usize; classes];
        let mut selected_ids = Vec::with_capacity(sel.selected.batch.entries.len());
        for e in &sel.selected.batch.entries {
            batch_hist[e.class] += 1;
            selected_ids.push(e.sample_id);
        }
        records.push(RoundRecord {
            round,
            strategy,
            variance_closed_form: sel.variance,
            train_loss,
            test_acc,
            seq_time,
            pipe_time,
            batch_hist,
            selected_ids,
            fallback_rs: sel.fallback_rs,
        });
        if opts.record_params {
            param_trace.push(params.flatten());
        }
        if let Some(p) = sel.plan_json {
            plans.push(p);
        }
    }

    let (final_acc, final_loss) = evaluate(&params, &holdout)?;
    Ok(RunResult {
        strategy,
        seed,
        records,
        final_params: params,
        final_acc,
        final_loss,
        param_trace,
        plans,
    })
}

fn feature_dim(cfg: &ExperimentConfig) -> usize {
    // The filter operates on extracted features; block 0 means raw input.
    match (cfg.model, cfg.feature_block) {
        (_, 0) => cfg.model.input_dim(),
        (crate::model::ModelSpec::Linear { input, .. }, _) => input,
        (crate::model::ModelSpec::Mlp { hidden, .. }, _) => hidden,
    }
}

pub fn batch_hist_string(hist: &[usize]) -> String {
    hist.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(":")
}

pub const METRICS_HEADER: &str =
    "round,strategy,variance_closed_form,train_loss,test_acc,seq_time,pipe_time,batch_hist";

pub fn metrics_csv_line(r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.round,
        r.strategy.name(),
        r.variance_closed_form,
        r.train_loss,
        r.test_acc,
        r.seq_time,
        r.pipe_time,
        batch_hist_string(&r.batch_hist)
    )
}

pub fn write_metrics_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", metrics_csv_line(r))?;
    }
    Ok(())
}

/// First round (1-based) whose held-out accuracy reaches the target, plus
/// the cumulative simulated times at that round.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<(usize, f64, f64)> {
    records
        .iter()
        .find(|r| r.test_acc >= target)
        .map(|r| (r.round + 1, r.seq_time, r.pipe_time))
}
