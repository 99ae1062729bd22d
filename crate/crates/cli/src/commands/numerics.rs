use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use moeplan::numerics::{reduce_trial, ReduceKind, ReduceTrial};

use crate::error::CliError;
use crate::report::{self, ReportEnvelope};
use crate::{Format, Globals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    #[value(name = "ring_bf16", alias = "ring-bf16")]
    RingBf16,
    #[value(name = "a2a_fp32", alias = "a2a-fp32")]
    A2aFp32,
}

impl Scheme {
    fn kind(self) -> ReduceKind {
        match self {
            Scheme::RingBf16 => ReduceKind::RingBf16,
            Scheme::A2aFp32 => ReduceKind::A2aFp32,
        }
    }
}

#[derive(Debug, Args)]
pub struct NumericsArgs {
    /// Number of trials; trial `i` uses seed `base + i`.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,

    #[arg(long, default_value_t = 64)]
    pub ranks: usize,

    /// Elements per rank.
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,

    /// Reduction schemes to report.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "ring_bf16,a2a_fp32"
    )]
    pub schemes: Vec<Scheme>,
}

#[derive(Debug, Serialize)]
struct ErrorRow {
    scheme: ReduceKind,
    format: &'static str,
    trial: u64,
    seed: u64,
    error: f64,
}

#[derive(Debug, Serialize)]
struct NumericsResults {
    base_seed: u64,
    ranks: usize,
    dim: usize,
    rows: Vec<ErrorRow>,
    /// Fraction of trials where a2a_fp32's error is <= ring_bf16's.
    a2a_fp32_win_rate: Option<f64>,
}

/// Seed precedence: `--seed`, then `job.seed` of `--config` if given,
/// then $MOEPLAN_SEED, then 0.
fn base_seed(g: &Globals) -> Result<(u64, Option<moeplan::config::Config>), CliError> {
    if g.config.is_some() {
        let cfg = report::load(g)?;
        return Ok((cfg.job.seed, Some(cfg)));
    }
    Ok((g.seed.or(report::env_seed()?).unwrap_or(0), None))
}

pub fn run(g: &Globals, args: &NumericsArgs, format: Format) -> Result<String, CliError> {
    if args.ranks < 2 {
        return Err(CliError::Usage("--ranks must be >= 2".into()));
    }
    if args.dim == 0 {
        return Err(CliError::Usage("--dim must be >= 1".into()));
    }
    let (base, cfg) = base_seed(g)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.wrapping_add(i)).collect();
    let trials: Vec<ReduceTrial> = seeds
        .par_iter()
        .map(|&s| reduce_trial(s, args.ranks, args.dim))
        .collect::<Result<_, _>>()?;

    let mut schemes: Vec<Scheme> = Vec::new();
    for s in &args.schemes {
        if !schemes.contains(s) {
            schemes.push(*s);
        }
    }
    let mut rows = Vec::new();
    for s in &schemes {
        for (i, t) in trials.iter().enumerate() {
            rows.push(ErrorRow {
                scheme: s.kind(),
                format: "bf16",
                trial: i as u64,
                seed: t.seed,
                error: match s {
                    Scheme::RingBf16 => t.ring_bf16,
                    Scheme::A2aFp32 => t.a2a_fp32,
                },
            });
        }
    }
    let both = schemes.contains(&Scheme::RingBf16) && schemes.contains(&Scheme::A2aFp32);
    let win_rate = (both && !trials.is_empty()).then(|| {
        trials.iter().filter(|t| t.a2a_fp32 <= t.ring_bf16).count() as f64 / trials.len() as f64
    });
    let results = NumericsResults {
        base_seed: base,
        ranks: args.ranks,
        dim: args.dim,
        rows,
        a2a_fp32_win_rate: win_rate,
    };

    match format {
        Format::Json => ReportEnvelope::new("numerics", cfg.as_ref(), results).to_json(),
        Format::Csv | Format::Table => {
            let mut rows: Vec<Vec<String>> = results
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.scheme.name().to_string(),
                        r.format.to_string(),
                        r.trial.to_string(),
                        format!("{:e}", r.error),
                    ]
                })
                .collect();
            if let Some(w) = results.a2a_fp32_win_rate {
                rows.push(vec![
                    "a2a_fp32_win_rate".into(),
                    "bf16".into(),
                    "summary".into(),
                    w.to_string(),
                ]);
            }
            let headers = ["scheme", "format", "trial", "error"];
            if format == Format::Csv {
                report::csv(&headers, &rows)
            } else {
                Ok(report::table(&headers, &rows))
            }
        }
    }
}
