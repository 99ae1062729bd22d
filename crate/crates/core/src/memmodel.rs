//! Per-GPU memory: model states, activations and transient buffers.
//!
//! Per layer and per micro-batch, with `n` the intra-node parallel size,
//! `f = h_ffn/h` and all counts in elements:
//!
//! * all activations: `(2n + 2k + 3kf + 12 + 5/m) bsh/n`
//! * kept under selective rematerialization: `(2kf + 4 + 2/m) bsh/n`
//!
//! [`ACTIVATIONS`] itemizes both sums. The same per-GPU figure is used for
//! every attention layout except DP, whose attention activations are not
//! sharded and so grow `n`-fold.
//!
//! Model states use BF16 parameters, FP32 main gradients and an Adam-style
//! optimizer (FP32 master weights plus two FP32 moments, 12 bytes per
//! parameter), sharded across data-parallel ranks under ZeRO stage 1.

use serde::Serialize;

use crate::config::{Config, DpCompress, ModelConfig};
use crate::exact::int;
use crate::planner::{AttnStrategy, ParallelismPlan};
use crate::{Error, Exact, Result};

/// Coefficient of `bsh/n` as `c + a_n n + a_k k + a_kf kf + a_m / m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coeff {
    pub constant: i128,
    pub per_n: i128,
    pub per_k: i128,
    pub per_kf: i128,
    pub per_inv_m: i128,
}

impl Coeff {
    const fn new(constant: i128, per_n: i128, per_k: i128, per_kf: i128, per_inv_m: i128) -> Self {
        Self {
            constant,
            per_n,
            per_k,
            per_kf,
            per_inv_m,
        }
    }

    pub fn eval(&self, n: u64, k: u64, f: Exact, m: u64) -> Exact {
        int(self.constant as u64)
            + Exact::from_integer(self.per_n) * int(n)
            + Exact::from_integer(self.per_k) * int(k)
            + Exact::from_integer(self.per_kf) * int(k) * f
            + Exact::from_integer(self.per_inv_m) / int(m)
    }
}

/// One tensor produced in a layer's forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Activation {
    pub name: &'static str,
    pub size: Coeff,
    /// Kept for the backward pass under selective rematerialization.
    pub retained: bool,
    pub in_attention: bool,
}

const fn act(name: &'static str, size: Coeff, retained: bool, in_attention: bool) -> Activation {
    Activation {
        name,
        size,
        retained,
        in_attention,
    }
}

/// Forward activations of one MoE layer. Retained tensors are either costly
/// to recompute (attention inputs and outputs, FC1 output) or layer
/// inputs; the rest are re-derived in backward (RMSNorm outputs, the
/// gathered FFN input, the SwiGLU output) or not needed at all.
pub const ACTIVATIONS: [Activation; 20] = [
    act("attn_norm_in", Coeff::new(1, 0, 0, 0, 0), true, true),
    act("attn_norm_out", Coeff::new(1, 0, 0, 0, 0), false, true),
    act("q", Coeff::new(1, 0, 0, 0, 0), false, true),
    act("kv", Coeff::new(0, 0, 0, 0, 2), false, true),
    act("k_rope", Coeff::new(0, 0, 0, 0, 1), false, true),
    act("q_a2a", Coeff::new(1, 0, 0, 0, 0), true, true),
    act("kv_a2a", Coeff::new(0, 0, 0, 0, 2), true, true),
    act("attn_core_out", Coeff::new(1, 0, 0, 0, 0), false, true),
    act("attn_out_a2a", Coeff::new(1, 0, 0, 0, 0), true, true),
    act("out_proj_out", Coeff::new(1, 0, 0, 0, 0), false, true),
    act("attn_residual", Coeff::new(1, 0, 0, 0, 0), false, true),
    act("ffn_norm_in", Coeff::new(1, 0, 0, 0, 0), true, false),
    act("ffn_norm_out", Coeff::new(1, 0, 0, 0, 0), false, false),
    act("ffn_in", Coeff::new(0, 1, 0, 0, 0), false, false),
    act("fc1_in", Coeff::new(0, 0, 1, 0, 0), false, false),
    act("fc1_out", Coeff::new(0, 0, 0, 2, 0), true, false),
    act("fc2_in", Coeff::new(0, 0, 0, 1, 0), false, false),
    act("fc2_out", Coeff::new(0, 0, 1, 0, 0), false, false),
    act("ffn_out_gathered", Coeff::new(0, 1, 0, 0, 0), false, false),
    act("layer_out", Coeff::new(2, 0, 0, 0, 0), false, false),
];

/// Which activations are kept for backward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RematPolicy {
    pub enabled: bool,
    pub retained: Vec<&'static str>,
    pub recompute: Vec<&'static str>,
}

impl RematPolicy {
    /// Selective rematerialization with the fixed retained set.
    pub fn selective() -> Self {
        Self {
            enabled: true,
            retained: ACTIVATIONS
                .iter()
                .filter(|a| a.retained)
                .map(|a| a.name)
                .collect(),
            recompute: ACTIVATIONS
                .iter()
                .filter(|a| !a.retained)
                .map(|a| a.name)
                .collect(),
        }
    }

    /// Keep everything.
    pub fn off() -> Self {
        Self {
            enabled: false,
            retained: ACTIVATIONS.iter().map(|a| a.name).collect(),
            recompute: Vec::new(),
        }
    }

    pub fn from_flag(enabled: bool) -> Self {
        if enabled {
            Self::selective()
        } else {
            Self::off()
        }
    }

    /// Checks that the two sets partition [`ACTIVATIONS`].
    pub fn validate(&self) -> Result<()> {
        for a in &ACTIVATIONS {
            let kept = self.retained.contains(&a.name);
            let redo = self.recompute.contains(&a.name);
            if kept == redo {
                return Err(Error::Config(format!(
                    "activation `{}` must be in exactly one of retained/recompute",
                    a.name
                )));
            }
        }
        let known = |n: &&str| ACTIVATIONS.iter().any(|a| a.name == *n);
        if let Some(bad) = self
            .retained
            .iter()
            .chain(&self.recompute)
            .find(|n| !known(n))
        {
            return Err(Error::Config(format!("unknown activation `{bad}`")));
        }
        Ok(())
    }

    fn keeps(&self, name: &str) -> bool {
        !self.enabled || self.retained.contains(&name)
    }
}

fn check(n: u64, m: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("parallel size n must be >= 1"));
    }
    if m == 0 {
        return Err(Error::domain("kv ratio m must be >= 1"));
    }
    Ok(())
}

fn bsh_over_n(b: u64, s: u64, h: u64, n: u64) -> Exact {
    int(b) * int(s) * int(h) / int(n)
}

/// All forward activations of one layer, in elements per GPU.
pub fn activation_full(b: u64, s: u64, h: u64, n: u64, k: u64, f: Exact, m: u64) -> Result<Exact> {
    check(n, m)?;
    let coeff = int(2) * int(n) + int(2) * int(k) + int(3) * int(k) * f + int(12) + int(5) / int(m);
    Ok(coeff * bsh_over_n(b, s, h, n))
}

/// Activations kept under selective rematerialization, in elements per GPU.
pub fn activation_remat(b: u64, s: u64, h: u64, n: u64, k: u64, f: Exact, m: u64) -> Result<Exact> {
    check(n, m)?;
    let coeff = int(2) * int(k) * f + int(4) + int(2) / int(m);
    Ok(coeff * bsh_over_n(b, s, h, n))
}

/// Activation elements of one layer under `policy`, summed from
/// [`ACTIVATIONS`]. Attention tensors are multiplied by `attn_factor`.
pub fn activation_elements(
    model: &ModelConfig,
    n: u64,
    policy: &RematPolicy,
    attn_factor: u64,
) -> Result<Exact> {
    check(n, model.kv_ratio)?;
    let f = int(model.ffn_hidden) / int(model.hidden);
    let mut total = Exact::from_integer(0);
    for a in ACTIVATIONS.iter().filter(|a| policy.keeps(a.name)) {
        let c = a.size.eval(n, model.top_k, f, model.kv_ratio);
        total += if a.in_attention {
            c * int(attn_factor)
        } else {
            c
        };
    }
    Ok(total * bsh_over_n(model.micro_batch, model.seq_len, model.hidden, n))
}

/// `1 - remat/full` for a model at parallel size `n`.
pub fn remat_reduction(model: &ModelConfig, n: u64) -> Result<Exact> {
    let f = int(model.ffn_hidden) / int(model.hidden);
    let (b, s, h, k, m) = (
        model.micro_batch,
        model.seq_len,
        model.hidden,
        model.top_k,
        model.kv_ratio,
    );
    let full = activation_full(b, s, h, n, k, f, m)?;
    let kept = activation_remat(b, s, h, n, k, f, m)?;
    Ok(Exact::from_integer(1) - kept / full)
}

/// Model-state bytes per GPU, exact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamState {
    /// Parameter count held by the GPU.
    pub param_count: Exact,
    pub params: Exact,
    pub grads: Exact,
    pub optimizer: Exact,
}

/// Parameters of one layer held by one GPU.
pub fn layer_params_per_gpu(model: &ModelConfig, attn: AttnStrategy, n: u64) -> Exact {
    let h = int(model.hidden);
    let attn_params =
        int(2) * h * h * (Exact::from_integer(1) + Exact::from_integer(1) / int(model.kv_ratio));
    let attn_share = match attn {
        AttnStrategy::Tp => attn_params / int(n),
        AttnStrategy::Sp | AttnStrategy::Cp | AttnStrategy::Dp => attn_params,
    };
    let experts = int(model.num_experts) * int(3) * h * int(model.ffn_hidden) / int(n);
    let router = h * int(model.num_experts);
    let norms = int(2) * h;
    attn_share + experts + router + norms
}

/// Parameters, gradients and optimizer states of the most loaded pipeline
/// stage: its layers plus the vocabulary-parallel embedding (first stage)
/// or output head (last stage), which coincide when `pp = 1`.
pub fn param_state_memory(plan: &ParallelismPlan, model: &ModelConfig) -> ParamState {
    let layers = int(model.num_layers / plan.pp);
    let vocab = int(model.vocab_size) * int(model.hidden) / int(plan.n);
    let ends = if plan.pp == 1 { int(2) * vocab } else { vocab };
    let count = layers * layer_params_per_gpu(model, plan.attn, plan.n) + ends;
    let optimizer = count * int(12);
    ParamState {
        param_count: count,
        params: count * int(2),
        grads: count * int(4),
        optimizer: if plan.zero_stage >= 1 {
            optimizer / int(plan.dp)
        } else {
            optimizer
        },
    }
}

/// Micro-batches whose activations one stage holds at the 1F1B steady
/// state. The only place the in-flight assumption lives.
pub fn in_flight_microbatches(pp: u64, microbatches: u64) -> u64 {
    pp.min(microbatches).max(1)
}

/// Per-GPU peak memory in bytes, each component rounded up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryBreakdown {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub transient_peak: u64,
    pub total: u64,
}

fn ceil_u64(x: Exact) -> u64 {
    x.ceil().to_integer() as u64
}

pub fn peak_memory(
    plan: &ParallelismPlan,
    cfg: &Config,
    remat: &RematPolicy,
    dp_compress: DpCompress,
) -> Result<MemoryBreakdown> {
    let model = &cfg.model;
    let state = param_state_memory(plan, model);
    let attn_factor = if plan.attn == AttnStrategy::Dp {
        plan.n
    } else {
        1
    };
    let per_layer = activation_elements(model, plan.n, remat, attn_factor)?;
    let layers_per_stage = model.num_layers / plan.pp;
    let in_flight = in_flight_microbatches(plan.pp, plan.micro_batches(model));
    let activations =
        per_layer * int(layers_per_stage) * int(in_flight) * int(cfg.precision.activation_bytes());
    let transient = match dp_compress {
        DpCompress::Naive => state.grads / int(2),
        DpCompress::Inplace | DpCompress::Off => Exact::from_integer(0),
    };
    let parts = [
        ceil_u64(state.params),
        ceil_u64(state.grads),
        ceil_u64(state.optimizer),
        ceil_u64(activations),
        ceil_u64(transient),
    ];
    Ok(MemoryBreakdown {
        params: parts[0],
        grads: parts[1],
        optimizer: parts[2],
        activations: parts[3],
        transient_peak: parts[4],
        total: parts.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commcost::EpPattern;
    use crate::config::model_preset;
    use crate::planner::FfnKind;

    fn e(n: i128) -> Exact {
        Exact::from_integer(n)
    }

    fn coeff(x: Exact, b: u64, s: u64, h: u64, n: u64) -> Exact {
        x / bsh_over_n(b, s, h, n)
    }

    #[test]
    fn mixtral_coefficients() {
        let f = Exact::new(7, 2);
        assert_eq!(
            coeff(
                activation_full(1, 8192, 4096, 8, 2, f, 4).unwrap(),
                1,
                8192,
                4096,
                8
            ),
            Exact::new(217, 4)
        );
        assert_eq!(
            coeff(
                activation_remat(1, 8192, 4096, 8, 2, f, 4).unwrap(),
                1,
                8192,
                4096,
                8
            ),
            Exact::new(37, 2)
        );
        let f = Exact::new(8, 3);
        assert_eq!(
            coeff(
                activation_full(1, 8192, 6144, 8, 2, f, 6).unwrap(),
                1,
                8192,
                6144,
                8
            ),
            Exact::new(293, 6)
        );
    }

    #[test]
    fn k_zero_drops_expert_terms() {
        let f = Exact::new(7, 2);
        assert_eq!(
            coeff(activation_full(1, 4, 4, 8, 0, f, 4).unwrap(), 1, 4, 4, 8),
            e(16 + 12) + Exact::new(5, 4)
        );
        assert_eq!(
            coeff(activation_remat(1, 4, 4, 8, 0, f, 4).unwrap(), 1, 4, 4, 8),
            e(4) + Exact::new(1, 2)
        );
    }

    #[test]
    fn inventory_sums_to_closed_forms() {
        for name in crate::config::MODEL_PRESETS {
            let m = model_preset(name).unwrap();
            let f = int(m.ffn_hidden) / int(m.hidden);
            for n in [1, 2, 4, 8] {
                let (b, s, h, k, km) = (m.micro_batch, m.seq_len, m.hidden, m.top_k, m.kv_ratio);
                assert_eq!(
                    activation_elements(&m, n, &RematPolicy::off(), 1).unwrap(),
                    activation_full(b, s, h, n, k, f, km).unwrap()
                );
                assert_eq!(
                    activation_elements(&m, n, &RematPolicy::selective(), 1).unwrap(),
                    activation_remat(b, s, h, n, k, f, km).unwrap()
                );
            }
        }
    }

    #[test]
    fn remat_is_strictly_smaller() {
        for n in 2..=16 {
            for k in 0..=8 {
                for (fn_, fd) in [(1, 2), (11, 16), (7, 2), (8, 1)] {
                    for m in [1, 2, 4, 8] {
                        let f = Exact::new(fn_, fd);
                        assert!(
                            activation_remat(1, 1, 1, n, k, f, m).unwrap()
                                < activation_full(1, 1, 1, n, k, f, m).unwrap()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn policies_partition_inventory() {
        RematPolicy::selective().validate().unwrap();
        RematPolicy::off().validate().unwrap();
        let mut bad = RematPolicy::selective();
        bad.recompute.push("fc1_out");
        assert!(bad.validate().is_err());
    }

    fn plan(attn: AttnStrategy, n: u64, dp: u64, zero: u8) -> ParallelismPlan {
        ParallelismPlan {
            attn,
            ffn: FfnKind::Ep,
            ep_pattern: Some(EpPattern::A2a),
            n,
            pp: 1,
            vpp: 1,
            dp,
            zero_stage: zero,
        }
    }

    #[test]
    fn sp_replicates_attention_params() {
        let m = model_preset("mixtral-8x7b").unwrap();
        let sp = param_state_memory(&plan(AttnStrategy::Sp, 8, 4, 1), &m);
        let tp = param_state_memory(&plan(AttnStrategy::Tp, 8, 4, 1), &m);
        let attn = int(2) * int(4096) * int(4096) * Exact::new(5, 4);
        let delta = int(m.num_layers) * attn * Exact::new(7, 8);
        assert_eq!(sp.param_count - tp.param_count, delta);
        let one_sp = param_state_memory(&plan(AttnStrategy::Sp, 1, 4, 1), &m);
        let one_tp = param_state_memory(&plan(AttnStrategy::Tp, 1, 4, 1), &m);
        assert_eq!(one_sp, one_tp);
    }

    #[test]
    fn zero_one_divides_optimizer_by_dp() {
        let m = model_preset("mixtral-8x7b").unwrap();
        let z0 = param_state_memory(&plan(AttnStrategy::Sp, 8, 4, 0), &m);
        let z1 = param_state_memory(&plan(AttnStrategy::Sp, 8, 4, 1), &m);
        assert_eq!(z0.optimizer, z1.optimizer * e(4));
        assert_eq!(z0.params, z1.params);
    }

    #[test]
    fn transient_buffers() {
        let cfg = Config::from_presets("mixtral-8x7b", "h800", 4).unwrap();
        let p = plan(AttnStrategy::Sp, 8, 4, 1);
        let pol = RematPolicy::selective();
        let naive = peak_memory(&p, &cfg, &pol, DpCompress::Naive).unwrap();
        let inplace = peak_memory(&p, &cfg, &pol, DpCompress::Inplace).unwrap();
        let off = peak_memory(&p, &cfg, &pol, DpCompress::Off).unwrap();
        let grads = param_state_memory(&p, &cfg.model).grads;
        assert_eq!(
            naive.transient_peak - inplace.transient_peak,
            (grads / e(2)).ceil().to_integer() as u64
        );
        assert_eq!(inplace.transient_peak, off.transient_peak);
    }

    #[test]
    fn remat_toggle_ratio_and_hand_sum() {
        let cfg = Config::from_presets("mixtral-8x7b", "h800", 4).unwrap();
        let p = plan(AttnStrategy::Sp, 8, 4, 1);
        let on = peak_memory(&p, &cfg, &RematPolicy::selective(), DpCompress::Off).unwrap();
        let off = peak_memory(&p, &cfg, &RematPolicy::off(), DpCompress::Off).unwrap();
        assert_eq!(
            Exact::new(on.activations as i128, off.activations as i128),
            Exact::new(74, 217)
        );
        assert_eq!(
            (on.params, on.grads, on.optimizer),
            (off.params, off.grads, off.optimizer)
        );
        // pp = 1, one micro-batch in flight: 32 layers * 54.25 bsh/8 * 2 bytes.
        let hand = 32 * 8192 * 4096 / 8 * 217 / 4 * 2;
        assert_eq!(off.activations, hand);
        assert_eq!(
            off.total,
            off.params + off.grads + off.optimizer + off.activations
        );
    }
}
