use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use moeplan::commcost::{
    attention_cp_volume, attention_sp_volume, attention_tp_volume, ffn_ep_volume, ffn_tp_volume,
};
use moeplan::config::Config;
use moeplan::planner::{
    enumerate_plans, rank_plans, score_plan, AttnStrategy, FfnKind, ParallelismPlan, PlanScore,
    Rejected,
};
use moeplan::{to_f64, Exact};

use crate::error::CliError;
use crate::report::{self, ReportEnvelope};
use crate::{Format, Globals};

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Show each plan's communication volumes with values substituted.
    #[arg(long)]
    pub explain: bool,

    /// Print only the best N plans.
    #[arg(long, value_name = "N")]
    pub top: Option<usize>,

    /// Also list rejected combinations and why.
    #[arg(long)]
    pub rejected: bool,
}

/// One volume term of a plan, per layer per micro-batch, in elements.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeTerm {
    pub name: String,
    pub formula: String,
    pub substituted: String,
    /// Exact value as a reduced fraction.
    pub elements: Exact,
    pub bytes: f64,
}

#[derive(Debug, Serialize)]
struct RankedPlan {
    rank: usize,
    name: String,
    #[serde(flatten)]
    score: PlanScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    explain: Option<Vec<VolumeTerm>>,
}

#[derive(Debug, Serialize)]
struct PlanResults {
    plans: Vec<RankedPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rejected: Option<Vec<Rejected>>,
}

pub fn volume_terms(plan: &ParallelismPlan, cfg: &Config) -> Result<Vec<VolumeTerm>, CliError> {
    let m = &cfg.model;
    let (b, s, h, n, k, kv) = (
        m.micro_batch,
        m.seq_len,
        m.hidden,
        plan.n,
        m.top_k,
        m.kv_ratio,
    );
    let bytes = cfg.precision.comm_bytes() as f64;
    let term = |name: &str, formula: &str, substituted: String, v: Exact| VolumeTerm {
        name: name.into(),
        formula: formula.into(),
        substituted,
        elements: v,
        bytes: to_f64(&v) * bytes,
    };
    let attn = match plan.attn {
        AttnStrategy::Dp => term(
            "attention_dp",
            "0 (replicated)",
            "0".into(),
            Exact::from_integer(0),
        ),
        AttnStrategy::Tp => term(
            "attention_tp",
            "2*b*s*h*(n-1)/n",
            format!("2*{b}*{s}*{h}*({n}-1)/{n}"),
            attention_tp_volume(b, s, h, n)?,
        ),
        AttnStrategy::Sp => term(
            "attention_sp",
            "(2+2/m)*2*b*s*h*(n-1)/n^2",
            format!("(2+2/{kv})*2*{b}*{s}*{h}*({n}-1)/{n}^2"),
            attention_sp_volume(b, s, h, n, kv)?,
        ),
        AttnStrategy::Cp => term(
            "attention_cp (estimate)",
            "2*b*s*(h/m)*(n-1)/n",
            format!("2*{b}*{s}*({h}/{kv})*({n}-1)/{n}"),
            attention_cp_volume(b, s, h, n, kv)?,
        ),
    };
    let ffn = match plan.ffn {
        FfnKind::Tp => term(
            "ffn_tp",
            "2*b*s*h*(n-1)/n",
            format!("2*{b}*{s}*{h}*({n}-1)/{n}"),
            ffn_tp_volume(b, s, h, n)?,
        ),
        FfnKind::Ep => term(
            "ffn_ep",
            "2*(k/n)*b*s*h*(n-1)/n",
            format!("2*({k}/{n})*{b}*{s}*{h}*({n}-1)/{n}"),
            ffn_ep_volume(b, s, h, n, k)?,
        ),
    };
    Ok(vec![attn, ffn])
}

pub fn run(g: &Globals, args: &PlanArgs, format: Format) -> Result<String, CliError> {
    let cfg = report::load(g)?;
    let e = enumerate_plans(&cfg.model, &cfg.cluster, &cfg.job, &cfg.precision)?;
    let scores: Vec<PlanScore> = e.plans.par_iter().map(|p| score_plan(p, &cfg)).collect();
    let mut ranked = rank_plans(scores);
    if let Some(top) = args.top {
        ranked.truncate(top);
    }
    let plans = ranked
        .into_iter()
        .enumerate()
        .map(|(i, score)| {
            let explain = if args.explain {
                Some(volume_terms(&score.plan, &cfg)?)
            } else {
                None
            };
            Ok(RankedPlan {
                rank: i + 1,
                name: score.plan.name(),
                score,
                explain,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let results = PlanResults {
        plans,
        rejected: args.rejected.then_some(e.rejected),
    };

    match format {
        Format::Json => ReportEnvelope::new("plan", Some(&cfg), results).to_json(),
        Format::Csv => {
            let rows: Vec<Vec<String>> = results.plans.iter().map(csv_row).collect();
            report::csv(&CSV_HEADERS, &rows)
        }
        Format::Table => Ok(render_table(&results)),
    }
}

const CSV_HEADERS: [&str; 11] = [
    "rank",
    "plan",
    "feasible",
    "estimate",
    "mfu",
    "iter_time_s",
    "mem_per_gpu_bytes",
    "critical_path_comm_s",
    "overlappable_comm_s",
    "compute_s",
    "note",
];

fn csv_row(p: &RankedPlan) -> Vec<String> {
    let s = &p.score;
    vec![
        p.rank.to_string(),
        p.name.clone(),
        s.feasible.to_string(),
        s.estimate.to_string(),
        s.mfu.to_string(),
        s.est_iter_time.to_string(),
        s.mem_per_gpu.to_string(),
        s.critical_path_comm.to_string(),
        s.overlappable_comm.to_string(),
        s.compute.to_string(),
        s.note.clone().unwrap_or_default(),
    ]
}

fn render_table(r: &PlanResults) -> String {
    let rows: Vec<Vec<String>> = r
        .plans
        .iter()
        .map(|p| {
            let s = &p.score;
            let mut name = p.name.clone();
            if s.estimate {
                name.push_str(" *");
            }
            vec![
                p.rank.to_string(),
                name,
                if s.feasible { "yes" } else { "no" }.into(),
                report::pct(s.mfu),
                format!("{:.3}", s.est_iter_time),
                report::gib(s.mem_per_gpu),
                report::ms(s.critical_path_comm),
                report::ms(s.overlappable_comm),
                report::ms(s.compute),
                s.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let mut out = report::table(
        &[
            "rank",
            "plan",
            "fits",
            "mfu %",
            "iter s",
            "mem GiB",
            "crit comm ms",
            "hidden comm ms",
            "compute ms",
            "note",
        ],
        &rows,
    );
    if r.plans.iter().any(|p| p.score.estimate) {
        out += "* volume is an estimate; ranked after exact plans\n";
    }
    for p in &r.plans {
        if let Some(terms) = &p.explain {
            out += &format!("\n#{} {}\n", p.rank, p.name);
            for t in terms {
                out += &format!(
                    "  {:<24} {} = {} = {} elements ({:.3} MB)\n",
                    t.name,
                    t.formula,
                    t.substituted,
                    t.elements,
                    t.bytes / 1e6
                );
            }
        }
    }
    if let Some(rej) = &r.rejected {
        out += "\nrejected:\n";
        for x in rej {
            out += &format!("  {:<36} {}\n", x.plan.name(), x.reason);
        }
    }
    out
}
