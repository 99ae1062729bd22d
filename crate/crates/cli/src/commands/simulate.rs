use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use moeplan::planner::ParallelismPlan;
use moeplan::simsched::{
    simulate, to_trace, Breakdown, PairReport, ScheduleMode, SimOptions, TileOrder,
};

use crate::error::CliError;
use crate::report::{self, ReportEnvelope};
use crate::{Format, Globals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Serial,
    InterOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fuse {
    None,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Order {
    Natural,
    Swizzle,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "inter-op")]
    pub mode: Mode,

    /// Selective rematerialization; defaults to `job.remat`.
    #[arg(long, value_enum)]
    pub remat: Option<Toggle>,

    /// Tile-fuse communication/computation pairs (only those that shorten
    /// the layer are kept). A bare `--fuse` means `all`.
    #[arg(long, value_enum, default_value = "none", num_args = 0..=1, default_missing_value = "all")]
    pub fuse: Fuse,

    /// Search the SM split of SM-driven fused kernels.
    #[arg(long)]
    pub tune_sms: bool,

    /// Tile order inside fused kernels.
    #[arg(long, value_enum, default_value = "swizzle")]
    pub order: Order,

    /// Write the forward+backward layer timeline as trace-event JSON.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PhaseSummary {
    makespan: f64,
    exposed_comm: f64,
    busy_compute: f64,
    breakdown: Breakdown,
}

#[derive(Debug, Serialize)]
struct IterationSummary {
    time: f64,
    mfu: f64,
    /// FlashAttention and GEMMs.
    math: f64,
    exposed_comm: f64,
    other: f64,
    pipeline_bubble: f64,
    dp_sync: f64,
}

#[derive(Debug, Serialize)]
struct SimulateResults {
    plan: ParallelismPlan,
    plan_name: String,
    options: SimOptions,
    layers_per_stage: u64,
    microbatches: u64,
    forward: PhaseSummary,
    backward: PhaseSummary,
    /// Forward plus backward layer makespan.
    makespan: f64,
    exposed_comm: f64,
    iteration: IterationSummary,
    fusions: Vec<PairReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<String>,
}

pub fn run(g: &Globals, args: &SimulateArgs, format: Format) -> Result<String, CliError> {
    let cfg = report::load(g)?;
    let plan = ParallelismPlan::from_job(&cfg)?;
    let opts = SimOptions {
        mode: match args.mode {
            Mode::Serial => ScheduleMode::Serial,
            Mode::InterOp => ScheduleMode::InterOp,
        },
        remat: args.remat.map(|t| t == Toggle::On).unwrap_or(cfg.job.remat),
        fuse: args.fuse == Fuse::All,
        tune_sms: args.tune_sms,
        order: match args.order {
            Order::Natural => TileOrder::Natural,
            Order::Swizzle => TileOrder::Swizzle,
        },
    };
    let sim = simulate(&plan, &cfg, &opts)?;

    if let Some(path) = &args.trace {
        let trace = to_trace(&[("fwd", &sim.forward), ("bwd", &sim.backward)]);
        let text = serde_json::to_string(&trace)?;
        std::fs::write(path, text).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    }

    let (b, bubble, dp_sync) = sim.iteration_breakdown();
    let phase = |t: &moeplan::simsched::Timeline| PhaseSummary {
        makespan: t.makespan,
        exposed_comm: t.exposed_comm,
        busy_compute: t.busy_compute,
        breakdown: t.breakdown,
    };
    let results = SimulateResults {
        plan_name: plan.name(),
        plan,
        options: opts,
        layers_per_stage: sim.layers_per_stage,
        microbatches: sim.microbatches,
        forward: phase(&sim.forward),
        backward: phase(&sim.backward),
        makespan: sim.forward.makespan + sim.backward.makespan,
        exposed_comm: sim.forward.exposed_comm + sim.backward.exposed_comm,
        iteration: IterationSummary {
            time: sim.iteration_time,
            mfu: sim.mfu,
            math: b.math,
            exposed_comm: b.exposed_comm,
            other: b.other,
            pipeline_bubble: bubble,
            dp_sync,
        },
        fusions: sim.fusions.clone(),
        trace: args.trace.as_ref().map(|p| p.display().to_string()),
    };

    match format {
        Format::Json => ReportEnvelope::new("simulate", Some(&cfg), results).to_json(),
        Format::Csv => {
            let r = &results;
            let rows = vec![vec![
                r.plan_name.clone(),
                opts.mode.name().to_string(),
                opts.remat.to_string(),
                opts.fuse.to_string(),
                r.forward.makespan.to_string(),
                r.backward.makespan.to_string(),
                r.makespan.to_string(),
                r.exposed_comm.to_string(),
                r.iteration.time.to_string(),
                r.iteration.mfu.to_string(),
            ]];
            report::csv(
                &[
                    "plan",
                    "mode",
                    "remat",
                    "fuse",
                    "fwd_makespan_s",
                    "bwd_makespan_s",
                    "layer_makespan_s",
                    "layer_exposed_comm_s",
                    "iter_time_s",
                    "mfu",
                ],
                &rows,
            )
        }
        Format::Table => Ok(render_table(&results)),
    }
}

fn render_table(r: &SimulateResults) -> String {
    let o = &r.options;
    let it = &r.iteration;
    let mut out = report::fields(&[
        ("plan", r.plan_name.clone()),
        (
            "options",
            format!(
                "mode={} remat={} fuse={} tune_sms={}",
                o.mode.name(),
                if o.remat { "on" } else { "off" },
                if o.fuse { "all" } else { "none" },
                o.tune_sms
            ),
        ),
        ("layers/stage", r.layers_per_stage.to_string()),
        ("micro-batches", r.microbatches.to_string()),
    ]);
    out += "\nlayer (one micro-batch), ms\n";
    let row = |name: &str, p: &PhaseSummary| {
        vec![
            name.to_string(),
            report::ms(p.makespan),
            report::ms(p.breakdown.math),
            report::ms(p.breakdown.exposed_comm),
            report::ms(p.breakdown.other),
        ]
    };
    out += &report::table(
        &["phase", "makespan", "attn+gemm", "exposed comm", "other"],
        &[row("forward", &r.forward), row("backward", &r.backward)],
    );
    out += "\niteration\n";
    out += &report::fields(&[
        ("time s", format!("{:.4}", it.time)),
        ("mfu %", report::pct(it.mfu)),
        ("attn+gemm s", format!("{:.4}", it.math)),
        ("exposed comm s", format!("{:.4}", it.exposed_comm)),
        ("other s", format!("{:.4}", it.other)),
        ("pipeline bubble s", format!("{:.4}", it.pipeline_bubble)),
        ("dp sync s", format!("{:.4}", it.dp_sync)),
    ]);
    if !r.fusions.is_empty() {
        out += "\nfused pairs, ms\n";
        let rows: Vec<Vec<String>> = r
            .fusions
            .iter()
            .map(|p| {
                vec![
                    p.name.clone(),
                    format!("{:?}", p.phase).to_lowercase(),
                    format!("{:?}", p.path),
                    p.comm_sms.to_string(),
                    p.tiles.to_string(),
                    report::ms(p.unfused_time),
                    report::ms(p.fused_time),
                    format!("{:.2}", p.unfused_time / p.fused_time),
                ]
            })
            .collect();
        out += &report::table(
            &[
                "pair", "phase", "path", "comm sms", "tiles", "unfused", "fused", "speedup",
            ],
            &rows,
        );
    }
    if let Some(t) = &r.trace {
        out += &format!("\ntrace written to {t}\n");
    }
    out
}
