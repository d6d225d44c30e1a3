//! Command-line surface.
//!
//! Exit codes: 0 success, 2 argument/config errors, 1 runtime failures.
//! `--json` switches machine-readable output on stdout; human-readable
//! tables otherwise. Errors go to stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::commsim::{self, ClusterModel, CommMode};
use crate::error::{Error, Result};
use crate::factorize::{self, FactorizationPlan, RankRatio};
use crate::io::{self, RunConfig};
use crate::layers::gradcheck;
use crate::train;
use crate::zoo::{self, ArchMode, ModelGraph};

#[derive(Parser)]
#[command(
    name = "pufferfish",
    about = "Low-rank pre-factorized training: counting, factorization, training, and allreduce cost modeling",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ArchArgs {
    /// Architecture id (see `count --list`).
    #[arg(long)]
    arch: String,
    /// Rank ratio for hybrid building, e.g. "1/4".
    #[arg(long, default_value = "1/4")]
    rank_ratio: String,
    /// First low-rank layer index; architecture default when omitted.
    #[arg(long)]
    k: Option<usize>,
    /// Tokens per sequence for the sequence models' MAC accounting.
    #[arg(long, default_value_t = 1)]
    seq_len: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC accounting for an architecture.
    Count {
        #[command(flatten)]
        arch: ArchArgs,
        /// vanilla or hybrid.
        #[arg(long, default_value = "vanilla")]
        mode: String,
        /// Per-layer rows in addition to the totals.
        #[arg(long)]
        per_layer: bool,
        #[arg(long)]
        json: bool,
    },
    /// Two-phase training from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and final.ckpt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Factorize a vanilla checkpoint with a plan file.
    Factorize {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON plan {arch_id, k, ratio, exceptions}; architecture default
        /// when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Analytical ring-allreduce cost comparison, vanilla vs hybrid.
    SimulateComm {
        #[command(flatten)]
        arch: ArchArgs,
        /// Node count p >= 2.
        #[arg(long)]
        nodes: usize,
        /// Per-message latency, seconds.
        #[arg(long)]
        alpha: f64,
        /// Per-node bandwidth, bytes/second.
        #[arg(long)]
        beta: f64,
        /// Iterations (allreduce rounds) per epoch.
        #[arg(long)]
        iters: u64,
        /// One flat-buffer allreduce per iteration (default).
        #[arg(long, conflicts_with = "per_layer")]
        flat: bool,
        /// One allreduce per parameterized layer instead.
        #[arg(long)]
        per_layer: bool,
        /// Compute seconds per epoch for the vanilla / hybrid models, used
        /// in the end-to-end projection.
        #[arg(long, default_value_t = 0.0)]
        vanilla_compute: f64,
        #[arg(long, default_value_t = 0.0)]
        hybrid_compute: f64,
        #[arg(long, default_value_t = 90)]
        epochs: u64,
        #[arg(long, default_value_t = 10)]
        warmup_epochs: u64,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference checks of every layer kind's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Parameter/MAC sweep over the first low-rank layer index K.
    SweepK {
        #[command(flatten)]
        arch: ArchArgs,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k_list: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Final-loss sweep over the vanilla warm-up epoch count.
    SweepWarmup {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated warm-up epoch counts.
        #[arg(long, value_delimiter = ',')]
        ewu_list: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
}

pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders --help/--version through the error path too
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_plan_args(arch: &ArchArgs) -> Result<FactorizationPlan> {
    let ratio: RankRatio = arch.rank_ratio.parse()?;
    let model = zoo::build_model(&arch.arch, ArchMode::Vanilla, None)?;
    let mut plan = factorize::default_plan(&model)?;
    plan.ratio = ratio;
    if let Some(k) = arch.k {
        plan.k = k;
    }
    // re-validate with the overrides applied
    factorize::make_plan(&model, plan.k, plan.ratio, plan.exceptions.clone())
}

fn build_pair(arch: &ArchArgs) -> Result<(ModelGraph, ModelGraph)> {
    let plan = parse_plan_args(arch)?;
    let vanilla = zoo::build_model(&arch.arch, ArchMode::Vanilla, None)?;
    let hybrid = zoo::build_model(&arch.arch, ArchMode::Hybrid, Some(&plan))?;
    Ok((vanilla, hybrid))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count {
            arch,
            mode,
            per_layer,
            json,
        } => {
            let mode: ArchMode = mode.parse()?;
            let model = match mode {
                ArchMode::Vanilla => zoo::build_model(&arch.arch, mode, None)?,
                ArchMode::Hybrid => {
                    let plan = parse_plan_args(&arch)?;
                    zoo::build_model(&arch.arch, mode, Some(&plan))?
                }
            };
            let report = model.count_report(arch.seq_len)?;
            if json {
                let mut doc = json!({
                    "arch": report.arch_id,
                    "mode": model.mode,
                    "params": report.total_params,
                    "macs": report.total_macs,
                });
                if per_layer {
                    doc["layers"] = serde_json::to_value(&report.rows)?;
                }
                println!("{}", serde_json::to_string(&doc)?);
            } else {
                if per_layer {
                    println!("{:<28} {:>6} {:>14} {:>16}", "layer", "rank", "params", "macs");
                    for row in &report.rows {
                        let rank = row.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
                        println!(
                            "{:<28} {:>6} {:>14} {:>16}",
                            row.name, rank, row.params, row.macs
                        );
                    }
                }
                println!(
                    "{} ({:?}): {} parameters, {} forward MACs",
                    report.arch_id, model.mode, report.total_params, report.total_macs
                );
            }
            Ok(())
        }
        Command::Train { config, out, json } => {
            let config = RunConfig::load(&config)?;
            let plan = config.plan()?;
            let data = io::load_dataset(&config.dataset)?;
            let model_probe = zoo::build_model(&config.arch_id, ArchMode::Vanilla, None)?;
            let data = data.fit_to_model(&model_probe)?;
            let outcome = train::pufferfish_train(&config.arch_id, &config.train, &plan, &data)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.csv"), train::metrics_csv(&outcome.rows))?;
            io::save_checkpoint(&outcome.model, &out.join("final.ckpt"), config.train.epochs)?;
            let last = outcome.rows.last();
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({
                        "arch": config.arch_id,
                        "epochs": config.train.epochs,
                        "warmup_epochs": config.train.warmup_epochs,
                        "final_loss": last.map(|r| r.loss),
                        "final_metric": last.map(|r| r.metric),
                        "final_params": outcome.model.param_count(),
                        "metrics": out.join("metrics.csv"),
                        "checkpoint": out.join("final.ckpt"),
                    }))?
                );
            } else if let Some(row) = last {
                println!(
                    "trained {} for {} epochs (switch after {}): loss {:.4}, metric {:.4}, {} params",
                    config.arch_id,
                    config.train.epochs,
                    config.train.warmup_epochs,
                    row.loss,
                    row.metric,
                    outcome.model.param_count()
                );
            }
            Ok(())
        }
        Command::Factorize { ckpt, plan, out, json } => {
            let (model, epoch) = io::load_checkpoint(&ckpt)?;
            let plan = match plan {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    serde_json::from_str::<FactorizationPlan>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => factorize::default_plan(&model)?,
            };
            let hybrid = factorize::factorize_model(&model, &plan)?;
            io::save_checkpoint(&hybrid, &out, epoch)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({
                        "arch": hybrid.arch_id,
                        "mode": hybrid.mode,
                        "params_before": model.param_count(),
                        "params_after": hybrid.param_count(),
                        "out": out,
                    }))?
                );
            } else {
                println!(
                    "factorized {}: {} -> {} parameters, wrote {}",
                    hybrid.arch_id,
                    model.param_count(),
                    hybrid.param_count(),
                    out.display()
                );
            }
            Ok(())
        }
        Command::SimulateComm {
            arch,
            nodes,
            alpha,
            beta,
            iters,
            flat: _,
            per_layer,
            vanilla_compute,
            hybrid_compute,
            epochs,
            warmup_epochs,
            json,
        } => {
            let cluster = ClusterModel::new(nodes, alpha, beta)?;
            let (vanilla, hybrid) = build_pair(&arch)?;
            let mode = if per_layer { CommMode::PerLayer } else { CommMode::Flat };
            let report = commsim::speedup_report(
                &vanilla,
                &hybrid,
                &cluster,
                iters,
                vanilla_compute,
                hybrid_compute,
                epochs,
                warmup_epochs,
            )?;
            let (v_s, h_s) = match mode {
                CommMode::Flat => (report.vanilla.seconds_flat, report.hybrid.seconds_flat),
                CommMode::PerLayer => {
                    (report.vanilla.seconds_per_layer, report.hybrid.seconds_per_layer)
                }
            };
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({
                        "arch": arch.arch,
                        "nodes": nodes,
                        "alpha": alpha,
                        "beta": beta,
                        "iters": iters,
                        "aggregation": mode,
                        "vanilla_bytes": report.vanilla.total_bytes,
                        "hybrid_bytes": report.hybrid.total_bytes,
                        "vanilla_comm_seconds": v_s,
                        "hybrid_comm_seconds": h_s,
                        "payload_ratio": report.payload_ratio,
                        "projected_speedup": report.projected_speedup,
                    }))?
                );
            } else {
                println!(
                    "{} on {} nodes (alpha {:.2e}s, beta {:.3e} B/s, {} iters/epoch, {:?}):",
                    arch.arch, nodes, alpha, beta, iters, mode
                );
                println!(
                    "  vanilla: {} bytes/iter, {:.6} s/epoch comm",
                    report.vanilla.total_bytes, v_s
                );
                println!(
                    "  hybrid:  {} bytes/iter, {:.6} s/epoch comm",
                    report.hybrid.total_bytes, h_s
                );
                println!(
                    "  payload ratio {:.4}, projected end-to-end speedup {:.3}x over {} epochs ({} warm-up)",
                    report.payload_ratio, report.projected_speedup, epochs, warmup_epochs
                );
            }
            Ok(())
        }
        Command::Gradcheck { seed, json } => {
            let rows = gradcheck::check_all(seed, gradcheck::DEFAULT_EPS, gradcheck::DEFAULT_TOL)?;
            let all_pass = rows.iter().all(|r| r.pass);
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({"pass": all_pass, "checks": rows}))?
                );
            } else {
                for r in &rows {
                    println!(
                        "{} {:<14} {:<12} max rel err {:.3e}",
                        if r.pass { "PASS" } else { "FAIL" },
                        r.layer,
                        r.param,
                        r.max_rel_err
                    );
                }
                println!("gradcheck: {}", if all_pass { "all passed" } else { "FAILED" });
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::Numerical {
                    what: "gradient check failed".into(),
                    residual: rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
                })
            }
        }
        Command::SweepK { arch, k_list, json } => {
            if k_list.is_empty() {
                return Err(Error::Argument("--k-list must not be empty".into()));
            }
            let ratio: RankRatio = arch.rank_ratio.parse()?;
            let vanilla = zoo::build_model(&arch.arch, ArchMode::Vanilla, None)?;
            let base = vanilla.count_report(arch.seq_len)?;
            let defaults = factorize::default_plan(&vanilla)?;
            let mut rows = Vec::new();
            for k in k_list {
                let plan = factorize::make_plan(&vanilla, k, ratio, defaults.exceptions.clone())?;
                let hybrid = zoo::build_model(&arch.arch, ArchMode::Hybrid, Some(&plan))?;
                let report = hybrid.count_report(arch.seq_len)?;
                rows.push(json!({
                    "k": k,
                    "params": report.total_params,
                    "macs": report.total_macs,
                    "param_reduction": base.total_params - report.total_params,
                }));
            }
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({
                        "arch": arch.arch,
                        "ratio": ratio.to_string(),
                        "vanilla_params": base.total_params,
                        "vanilla_macs": base.total_macs,
                        "sweep": rows,
                    }))?
                );
            } else {
                println!(
                    "{} vanilla: {} params, {} MACs",
                    arch.arch, base.total_params, base.total_macs
                );
                println!("{:>4} {:>14} {:>16} {:>14}", "K", "params", "macs", "saved");
                for r in &rows {
                    println!(
                        "{:>4} {:>14} {:>16} {:>14}",
                        r["k"], r["params"], r["macs"], r["param_reduction"]
                    );
                }
            }
            Ok(())
        }
        Command::SweepWarmup { config, ewu_list, json } => {
            if ewu_list.is_empty() {
                return Err(Error::Argument("--ewu-list must not be empty".into()));
            }
            let base = RunConfig::load(&config)?;
            let plan = base.plan()?;
            let data = io::load_dataset(&base.dataset)?;
            let probe = zoo::build_model(&base.arch_id, ArchMode::Vanilla, None)?;
            let data = data.fit_to_model(&probe)?;
            let mut rows = Vec::new();
            for ewu in ewu_list {
                let mut cfg = base.train.clone();
                cfg.warmup_epochs = ewu;
                cfg.validate()?;
                let outcome = train::pufferfish_train(&base.arch_id, &cfg, &plan, &data)?;
                let last = outcome.rows.last().expect("at least one epoch");
                rows.push(json!({
                    "warmup_epochs": ewu,
                    "final_loss": last.loss,
                    "final_metric": last.metric,
                    "final_params": outcome.model.param_count(),
                }));
            }
            if json {
                println!(
                    "{}",
                    serde_json::to_string(&json!({"arch": base.arch_id, "sweep": rows}))?
                );
            } else {
                println!("{:>6} {:>12} {:>12} {:>14}", "E_wu", "loss", "metric", "params");
                for r in &rows {
                    println!(
                        "{:>6} {:>12} {:>12} {:>14}",
                        r["warmup_epochs"], r["final_loss"], r["final_metric"], r["final_params"]
                    );
                }
            }
            Ok(())
        }
    }
}
