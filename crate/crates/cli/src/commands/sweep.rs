use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use moeplan::commcost::{ep_dispatch_time, EpPattern, LinkModel};
use moeplan::config::Config;
use moeplan::planner::scale_up_ratio;

use crate::error::CliError;
use crate::report::{self, ReportEnvelope};
use crate::{Format, Globals};

/// Parameters a sweep can vary.
pub const AXES: [&str; 6] = [
    "top_k",
    "n",
    "ffn_hidden",
    "hidden",
    "seq_len",
    "micro_batch",
];

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `NAME=A..B` (inclusive), `NAME=A..B:STEP` or `NAME=V1,V2,...`.
    /// NAME is one of top_k, n, ffn_hidden, hidden, seq_len, micro_batch.
    /// A range with A > B is empty.
    #[arg(long, value_name = "SPEC")]
    pub axis: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisSpec {
    pub name: String,
    pub values: Vec<u64>,
}

fn parse_u64(s: &str, spec: &str) -> Result<u64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("axis `{spec}`: `{s}` is not an unsigned integer")))
}

pub fn parse_axis(spec: &str) -> Result<AxisSpec, CliError> {
    let (name, range) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis `{spec}`: expected NAME=RANGE")))?;
    let name = name.trim();
    if !AXES.contains(&name) {
        return Err(CliError::Usage(format!(
            "unknown axis `{name}`; expected one of {}",
            AXES.join(", ")
        )));
    }
    let range = range.trim();
    let values = if let Some((lo, rest)) = range.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (hi, parse_u64(step, spec)?),
            None => (rest, 1),
        };
        if step == 0 {
            return Err(CliError::Usage(format!("axis `{spec}`: step must be >= 1")));
        }
        let (lo, hi) = (
            parse_u64(lo, spec)?,
            parse_u64(hi.trim_start_matches('='), spec)?,
        );
        (lo..=hi).step_by(step as usize).collect()
    } else if range.is_empty() {
        Vec::new()
    } else {
        range
            .split(',')
            .map(|v| parse_u64(v, spec))
            .collect::<Result<_, _>>()?
    };
    Ok(AxisSpec {
        name: name.to_string(),
        values,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: u64,
    pub n: u64,
    pub top_k: u64,
    pub a2a_time: f64,
    pub ag_rs_time: f64,
    /// Cheaper pattern, ties to a2a.
    pub selected: EpPattern,
    /// Expert compute over EP dispatch time; absent for n = 1.
    pub scale_up_r: Option<f64>,
    pub r_approx: Option<f64>,
    pub tier: Option<String>,
}

fn point(cfg: &Config, axis: &str, value: u64) -> Result<SweepRow, CliError> {
    let mut model = cfg.model.clone();
    let mut n = cfg.job.parallel_size;
    match axis {
        "top_k" => model.top_k = value,
        "n" => n = value,
        "ffn_hidden" => model.ffn_hidden = value,
        "hidden" => model.hidden = value,
        "seq_len" => model.seq_len = value,
        "micro_batch" => model.micro_batch = value,
        _ => unreachable!("axis validated by parse_axis"),
    }
    model.validate()?;
    if n == 0 {
        return Err(CliError::Usage("axis n: values must be >= 1".into()));
    }
    // Groups wider than a node dispatch over the inter-node tier.
    let mut cluster = cfg.cluster.clone();
    if n > cluster.gpus_per_node {
        cluster.intra_bw = cluster.inter_bw;
        cluster.alpha_intra = cluster.alpha_inter;
    }
    let link = LinkModel::from_cluster(&cluster);
    let time = |p| {
        ep_dispatch_time(
            p,
            model.micro_batch,
            model.seq_len,
            model.hidden,
            n,
            model.top_k,
            &link,
            &cfg.precision,
        )
    };
    let a2a = time(EpPattern::A2a)?;
    let ag_rs = time(EpPattern::AgRs)?;
    let scale = if n >= 2 {
        Some(scale_up_ratio(&model, &cfg.cluster, n, &cfg.precision)?)
    } else {
        None
    };
    Ok(SweepRow {
        value,
        n,
        top_k: model.top_k,
        a2a_time: a2a,
        ag_rs_time: ag_rs,
        selected: if ag_rs < a2a {
            EpPattern::AgRs
        } else {
            EpPattern::A2a
        },
        scale_up_r: scale.as_ref().map(|s| s.r),
        r_approx: scale.as_ref().map(|s| s.r_approx),
        tier: scale.map(|s| s.tier),
    })
}

#[derive(Debug, Serialize)]
struct SweepResults {
    axis: String,
    rows: Vec<SweepRow>,
}

pub fn run(g: &Globals, args: &SweepArgs, format: Format) -> Result<String, CliError> {
    let axis = parse_axis(&args.axis)?;
    let cfg = report::load(g)?;
    // Points run in parallel; collect keeps axis order.
    let rows = axis
        .values
        .par_iter()
        .map(|&v| point(&cfg, &axis.name, v))
        .collect::<Result<Vec<_>, _>>()?;
    let results = SweepResults {
        axis: axis.name,
        rows,
    };

    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    match format {
        Format::Json => ReportEnvelope::new("sweep", Some(&cfg), results).to_json(),
        Format::Csv | Format::Table => {
            // `n` and `top_k` are always columns; other axes get one up front.
            let lead = !matches!(results.axis.as_str(), "n" | "top_k");
            let rows: Vec<Vec<String>> = results
                .rows
                .iter()
                .map(|r| {
                    let mut row = if lead {
                        vec![r.value.to_string()]
                    } else {
                        Vec::new()
                    };
                    row.extend([
                        r.n.to_string(),
                        r.top_k.to_string(),
                        r.a2a_time.to_string(),
                        r.ag_rs_time.to_string(),
                        r.selected.name().to_string(),
                        opt(r.scale_up_r),
                        opt(r.r_approx),
                        r.tier.clone().unwrap_or_default(),
                    ]);
                    row
                })
                .collect();
            let mut headers = if lead {
                vec![results.axis.as_str()]
            } else {
                Vec::new()
            };
            headers.extend([
                "n",
                "top_k",
                "a2a_time_s",
                "ag_rs_time_s",
                "selected",
                "scale_up_r",
                "r_approx",
                "tier",
            ]);
            if format == Format::Csv {
                report::csv(&headers, &rows)
            } else {
                Ok(report::table(&headers, &rows))
            }
        }
    }
}
