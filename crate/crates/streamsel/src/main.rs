use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use streamsel::config::ExperimentConfig;
use streamsel::error::{Result, StreamselError};
use streamsel::importance::{
    build_plan_cis, build_plan_is, build_plan_uniform, Candidate, PlanKind, SelectionPlan,
    Strategy,
};
use streamsel::model::PerSampleGradient;
use streamsel::pipeline::{
    rounds_to_target, run_experiment, write_metrics_csv, RunOptions, RunResult,
};
use streamsel::stream::write_csv;
use streamsel::variance::{
    allocation_objective, class_constants, closed_form_variance, exhaustive_allocation_search,
    mc_variance, random_instance, single_unit_reallocation_delta, descent_identity_check,
};

#[derive(Parser)]
#[command(name = "streamsel", version, about = "Streaming data selection experiments")]
struct Cli {
    /// Flat `key = value` experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Also write per-round selection plans as JSON.
    #[arg(long, global = true)]
    dump_plan: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with every configured (strategy, seed) pair; writes metrics
    /// CSVs and a summary JSON.
    Run,
    /// Closed-form vs Monte-Carlo variance, the training-performance
    /// identity, and the exhaustive allocation comparison on a random
    /// instance.
    VarianceCheck {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        batch: usize,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
        /// Corrupt the allocation and report whether variance increased.
        #[arg(long)]
        perturb_alloc: bool,
    },
    /// Allocation optimality: exhaustive integer search plus a random
    /// continuous-relaxation sweep against the analytic allocation.
    AllocCheck {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        batch: usize,
        #[arg(long, default_value_t = 10_000)]
        sweeps: usize,
    },
    /// Materialize a deterministic stream sample as CSV.
    GenData {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Output file; defaults to <out>/stream.csv.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                StreamselError::Config(_) | StreamselError::Guard(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Run => cmd_run(cli),
        Command::VarianceCheck {
            classes,
            per_class,
            dim,
            batch,
            draws,
            perturb_alloc,
        } => cmd_variance_check(cli, classes, per_class, dim, batch, draws, perturb_alloc),
        Command::AllocCheck {
            classes,
            per_class,
            dim,
            batch,
            sweeps,
        } => cmd_alloc_check(cli, classes, per_class, dim, batch, sweeps),
        Command::GenData { samples, ref path } => cmd_gen_data(cli, samples, path.as_deref()),
    }
}

fn run_summary_entry(run: &RunResult, target: f64) -> serde_json::Value {
    let last = run.records.last();
    let tt = rounds_to_target(&run.records, target);
    json!({
        "final_acc": run.final_acc,
        "final_loss": run.final_loss,
        "rounds_to_target": tt.map(|(r, _, _)| r),
        "seq_time_to_target": tt.map(|(_, s, _)| s),
        "pipe_time_to_target": tt.map(|(_, _, p)| p),
        "total_seq_time": last.map(|r| r.seq_time),
        "total_pipe_time": last.map(|r| r.pipe_time),
    })
}

fn cmd_run(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let opts = RunOptions {
        record_params: false,
        dump_plans: cli.dump_plan,
    };
    let mut results: BTreeMap<String, BTreeMap<String, serde_json::Value>> = BTreeMap::new();
    let mut targets: BTreeMap<String, f64> = BTreeMap::new();
    for &seed in &cfg.seeds {
        // Time-to-accuracy target: the paired random-selection run's final
        // accuracy for this seed.
        let rs_run = run_experiment(&cfg, Strategy::Rs, seed, cfg.pipeline, &opts)?;
        let target = rs_run.final_acc;
        targets.insert(seed.to_string(), target);
        for &strategy in &cfg.strategies {
            let owned;
            let run = if strategy == Strategy::Rs {
                &rs_run
            } else {
                owned = run_experiment(&cfg, strategy, seed, cfg.pipeline, &opts)?;
                &owned
            };
            let stem = format!("{}_s{seed}", strategy.name());
            write_metrics_csv(&run.records, &cli.out.join(format!("metrics_{stem}.csv")))?;
            if cli.dump_plan {
                let plans = serde_json::Value::Array(run.plans.clone());
                std::fs::write(
                    cli.out.join(format!("plans_{stem}.json")),
                    format!("{}\n", serde_json::to_string_pretty(&plans)?),
                )?;
            }
            results
                .entry(strategy.name().to_string())
                .or_default()
                .insert(seed.to_string(), run_summary_entry(run, target));
        }
    }
    let summary = json!({
        "strategies": cfg.strategies.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "seeds": cfg.seeds,
        "rounds": cfg.rounds,
        "pipeline": cfg.pipeline,
        "target_acc": targets,
        "results": results,
    });
    std::fs::write(
        cli.out.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

/// Swap the largest and smallest class allocations of a per-class plan;
/// any genuinely heterogeneous optimum gets strictly worse.
fn corrupt_allocation(plan: &SelectionPlan) -> SelectionPlan {
    let mut corrupted = plan.clone();
    if let PlanKind::PerClass(classes) = &mut corrupted.kind {
        if classes.len() >= 2 {
            let hi = (0..classes.len()).max_by_key(|&i| classes[i].size).unwrap();
            let lo = (0..classes.len()).min_by_key(|&i| classes[i].size).unwrap();
            let (a, b) = (classes[hi].size, classes[lo].size);
            classes[hi].size = b;
            classes[lo].size = a;
        }
    }
    corrupted
}

fn cmd_variance_check(
    cli: &Cli,
    classes: usize,
    per_class: usize,
    dim: usize,
    batch: usize,
    draws: usize,
    perturb_alloc: bool,
) -> Result<i32> {
    let seed = cli.seed.unwrap_or(42);
    if classes == 0 || per_class < 2 || dim == 0 || batch == 0 {
        return Err(StreamselError::Config(
            "instance parameters must be positive (per_class >= 2)".into(),
        ));
    }
    let (cands, grads) = random_instance(classes, per_class, dim, seed);
    let mut all_ok = true;
    let mut per_strategy = BTreeMap::new();
    let plans: Vec<(&str, SelectionPlan)> = vec![
        ("cis", build_plan_cis(&cands, &grads, batch)?),
        ("is", build_plan_is(&cands, &grads, batch)?),
        ("uniform", build_plan_uniform(&cands, batch)?),
    ];
    for (name, plan) in &plans {
        let cf = closed_form_variance(plan, &cands, &grads)?.total;
        let mc = mc_variance(plan, &cands, &grads, draws, seed ^ 0xabcd)?;
        let ok = (cf - mc.variance).abs() <= 3.0 * mc.std_error;
        all_ok &= ok;
        per_strategy.insert(
            name.to_string(),
            json!({
                "closed_form": cf,
                "mc": mc.variance,
                "mc_se": mc.std_error,
                "ok": ok,
            }),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let gdim = grads[0].grad.len();
    let w_t: Vec<f64> = (0..gdim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_ref: Vec<f64> = (0..gdim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let th1 = descent_identity_check(
        &w_t,
        &w_ref,
        &plans[0].1,
        &cands,
        &grads,
        0.1,
        draws,
        seed ^ 0x1de4,
    )?;
    let th1_ok = th1.residual_abs <= 5.0 * th1.combined_se;
    all_ok &= th1_ok;

    let cis_cf = closed_form_variance(&plans[0].1, &cands, &grads)?.total;
    let search = exhaustive_allocation_search(&cands, &grads, batch)?;
    let constants = class_constants(&cands, &grads);
    let cis_alloc: Vec<usize> = match &plans[0].1.kind {
        PlanKind::PerClass(cps) => cps.iter().map(|c| c.size).collect(),
        _ => unreachable!(),
    };
    let delta = single_unit_reallocation_delta(&constants, &cis_alloc);
    let alloc_ok = cis_cf <= search.best_variance + delta + 1e-12;
    all_ok &= alloc_ok;

    let mut report = json!({
        "instance_seed": seed,
        "classes": classes,
        "dim": dim,
        "batch": batch,
        "draws": draws,
        "strategies": per_strategy,
        "descent_identity": {
            "lhs": th1.lhs,
            "rhs": th1.rhs,
            "residual_abs": th1.residual_abs,
            "combined_se": th1.combined_se,
            "ok": th1_ok,
        },
        "allocation": {
            "cis_variance": cis_cf,
            "exhaustive_best": search.best_variance,
            "single_unit_delta": delta,
            "compositions": search.compositions,
            "ok": alloc_ok,
        },
        "checks_pass": all_ok,
    });
    if classes == 1 {
        report["note"] = json!("single class: allocation is trivially the whole batch");
    }
    if perturb_alloc {
        let corrupted = corrupt_allocation(&plans[0].1);
        let cv = closed_form_variance(&corrupted, &cands, &grads)?.total;
        report["perturbed_variance"] = json!(cv);
        report["perturbation_worse"] = json!(cv > cis_cf);
    }
    report["checks_pass"] = json!(all_ok);
    let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    std::fs::write(cli.out.join("variance_check.json"), &text)?;
    print!("{text}");
    Ok(if all_ok { 0 } else { 1 })
}

fn cmd_alloc_check(
    cli: &Cli,
    classes: usize,
    per_class: usize,
    dim: usize,
    batch: usize,
    sweeps: usize,
) -> Result<i32> {
    let seed = cli.seed.unwrap_or(42);
    // Largest-remainder rounding can hand a low-importance class zero slots,
    // which degenerates the estimator (infinite closed-form variance) and
    // voids the comparison premise. Walk the instance seed forward until the
    // allocation covers every class with spread, and report the skips.
    let mut instance_seed = seed;
    let mut degenerate_skipped = 0usize;
    let (cands, grads, plan, cis_cf) = loop {
        let (cands, grads) = random_instance(classes, per_class, dim, instance_seed);
        let plan = build_plan_cis(&cands, &grads, batch)?;
        let cf = closed_form_variance(&plan, &cands, &grads)?.total;
        if cf.is_finite() {
            break (cands, grads, plan, cf);
        }
        degenerate_skipped += 1;
        instance_seed += 1;
    };
    let search = exhaustive_allocation_search(&cands, &grads, batch)?;
    let constants = class_constants(&cands, &grads);
    let cis_alloc: Vec<usize> = match &plan.kind {
        PlanKind::PerClass(cps) => cps.iter().map(|c| c.size).collect(),
        _ => unreachable!(),
    };
    let delta = single_unit_reallocation_delta(&constants, &cis_alloc);
    let integer_ok = cis_cf <= search.best_variance + delta + 1e-12;

    // Continuous relaxation: the analytic fractional allocation must not be
    // beaten by any random feasible allocation.
    let continuous = continuous_optimum_check(&cands, &grads, &constants, batch, sweeps, seed)?;
    let all_ok = integer_ok && continuous.1;
    let report = json!({
        "requested_seed": seed,
        "instance_seed": instance_seed,
        "degenerate_skipped": degenerate_skipped,
        "classes": classes,
        "batch": batch,
        "cis_allocation": search_alloc_json(&plan),
        "cis_variance": cis_cf,
        "exhaustive_best": search.best.iter().map(|&(c, b)| json!([c, b])).collect::<Vec<_>>(),
        "exhaustive_best_variance": search.best_variance,
        "single_unit_delta": delta,
        "integer_ok": integer_ok,
        "continuous_objective": continuous.0,
        "continuous_ok": continuous.1,
        "random_sweeps": sweeps,
        "checks_pass": all_ok,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    std::fs::write(cli.out.join("alloc_check.json"), &text)?;
    print!("{text}");
    Ok(if all_ok { 0 } else { 1 })
}

fn search_alloc_json(plan: &SelectionPlan) -> serde_json::Value {
    match &plan.kind {
        PlanKind::PerClass(cps) => cps
            .iter()
            .map(|c| json!([c.class, c.size]))
            .collect::<Vec<_>>()
            .into(),
        _ => json!(null),
    }
}

fn continuous_optimum_check(
    cands: &[Candidate],
    grads: &[PerSampleGradient],
    constants: &[(usize, usize, f64, f64)],
    batch: usize,
    sweeps: usize,
    seed: u64,
) -> Result<(f64, bool)> {
    let importances: Vec<f64> = constants
        .iter()
        .map(|&(_, pool, beta_star, gamma)| pool as f64 * (beta_star - gamma).max(0.0).sqrt())
        .collect();
    let sizes: Vec<usize> = constants.iter().map(|&(_, p, _, _)| p).collect();
    let targets = streamsel::importance::allocation_targets(&importances, &sizes, batch)?;
    let ours = allocation_objective(constants, &targets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa110c);
    let mut ok = true;
    for _ in 0..sweeps {
        let raw: Vec<f64> = (0..constants.len())
            .map(|_| -rng.random::<f64>().max(1e-12).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let alloc: Vec<f64> = raw.iter().map(|r| batch as f64 * r / sum).collect();
        if allocation_objective(constants, &alloc) < ours - 1e-9 {
            ok = false;
            break;
        }
    }
    let _ = (cands, grads);
    Ok((ours, ok))
}

fn cmd_gen_data(cli: &Cli, samples: usize, path: Option<&std::path::Path>) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    let seed = cli.seed.unwrap_or_else(|| cfg.seeds[0]);
    cfg.velocity = samples.max(1);
    cfg.batch_size = cfg.batch_size.min(cfg.velocity);
    let mut source = streamsel::pipeline::make_stream(&cfg, seed)?;
    let window = source.next_window();
    let default_path = cli.out.join("stream.csv");
    let path = path.unwrap_or(&default_path);
    write_csv(&window, path)?;
    println!("wrote {} samples to {}", window.len(), path.display());
    Ok(0)
}
