use clap::Args;
use serde::Serialize;

use moeplan::memmodel::{peak_memory, MemoryBreakdown, RematPolicy};
use moeplan::planner::ParallelismPlan;

use crate::commands::simulate::Toggle;
use crate::error::CliError;
use crate::report::{self, ReportEnvelope};
use crate::{Format, Globals};

#[derive(Debug, Args)]
pub struct MemoryArgs {
    /// Selective rematerialization; defaults to `job.remat`.
    #[arg(long, value_enum)]
    pub remat: Option<Toggle>,
}

#[derive(Debug, Serialize)]
struct MemoryResults {
    plan: ParallelismPlan,
    plan_name: String,
    remat: bool,
    breakdown: MemoryBreakdown,
    /// The same plan with every activation stored.
    no_remat: MemoryBreakdown,
    /// Activation bytes saved by rematerialization, percent of `no_remat`.
    activation_reduction_pct: f64,
    total_reduction_pct: f64,
    capacity: u64,
    fits: bool,
}

fn reduction_pct(base: u64, now: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        (base as f64 - now as f64) / base as f64 * 100.0
    }
}

pub fn run(g: &Globals, args: &MemoryArgs, format: Format) -> Result<String, CliError> {
    let cfg = report::load(g)?;
    let plan = ParallelismPlan::from_job(&cfg)?;
    let remat = args.remat.map(|t| t == Toggle::On).unwrap_or(cfg.job.remat);
    let mem = peak_memory(
        &plan,
        &cfg,
        &RematPolicy::from_flag(remat),
        cfg.job.dp_compress,
    )?;
    let base = peak_memory(&plan, &cfg, &RematPolicy::off(), cfg.job.dp_compress)?;
    let results = MemoryResults {
        plan_name: plan.name(),
        plan,
        remat,
        activation_reduction_pct: reduction_pct(base.activations, mem.activations),
        total_reduction_pct: reduction_pct(base.total, mem.total),
        capacity: cfg.cluster.mem_capacity,
        fits: mem.total <= cfg.cluster.mem_capacity,
        breakdown: mem,
        no_remat: base,
    };

    let parts = |m: &MemoryBreakdown| {
        [
            ("params", m.params),
            ("grads", m.grads),
            ("optimizer", m.optimizer),
            ("activations", m.activations),
            ("transient_peak", m.transient_peak),
            ("total", m.total),
        ]
    };
    match format {
        Format::Json => ReportEnvelope::new("memory", Some(&cfg), results).to_json(),
        Format::Csv => {
            let rows: Vec<Vec<String>> = parts(&results.breakdown)
                .iter()
                .zip(parts(&results.no_remat))
                .map(|((k, v), (_, b))| vec![k.to_string(), v.to_string(), b.to_string()])
                .collect();
            report::csv(&["component", "bytes", "no_remat_bytes"], &rows)
        }
        Format::Table => {
            let r = &results;
            let rows: Vec<Vec<String>> = parts(&r.breakdown)
                .iter()
                .zip(parts(&r.no_remat))
                .map(|((k, v), (_, b))| vec![k.to_string(), report::gib(*v), report::gib(b)])
                .collect();
            let mut out = report::fields(&[
                ("plan", r.plan_name.clone()),
                ("remat", if r.remat { "on" } else { "off" }.into()),
            ]);
            out += "\n";
            out += &report::table(&["component", "GiB", "no remat GiB"], &rows);
            out += "\n";
            out += &report::fields(&[
                (
                    "activation reduction %",
                    format!("{:.2}", r.activation_reduction_pct),
                ),
                ("total reduction %", format!("{:.2}", r.total_reduction_pct)),
                ("capacity GiB", report::gib(r.capacity)),
                ("fits", if r.fits { "yes" } else { "no" }.into()),
            ]);
            Ok(out)
        }
    }
}
