//! Randomized invariants across modules.

use num_traits::Zero;
use proptest::prelude::*;

use moeplan::commcost::{attention_sp_volume, attention_tp_volume, ffn_ep_volume, ffn_tp_volume};
use moeplan::memmodel::{activation_full, activation_remat};
use moeplan::numerics::{
    dequantize, emulate_reduce, quantize, round_to, FloatFormat, Granularity, Matrix, QuantScheme,
    ReduceKind,
};
use moeplan::routing::{build_scatter_map, simulate_routing, RoutingMode};
use moeplan::simsched::{pipeline_iteration_time, simulate_pipeline};
use moeplan::Exact;

fn e(x: u64) -> Exact {
    Exact::from_integer(x as i128)
}

proptest! {
    #[test]
    fn sp_over_tp_is_two_plus_two_over_m_over_n(
        b in 1u64..4, s in 1u64..5000, h in 1u64..9000, n in 2u64..65, m in 1u64..17,
    ) {
        let tp = attention_tp_volume(b, s, h, n).unwrap();
        let sp = attention_sp_volume(b, s, h, n, m).unwrap();
        prop_assert_eq!(sp / tp, (e(2) + e(2) / e(m)) / e(n));
    }

    #[test]
    fn ep_volume_scales_tp_volume_by_k_over_n(
        b in 1u64..4, s in 1u64..5000, h in 1u64..9000, n in 2u64..65, k in 1u64..65,
    ) {
        let ep = ffn_ep_volume(b, s, h, n, k).unwrap();
        let tp = ffn_tp_volume(b, s, h, n).unwrap();
        prop_assert_eq!(ep / tp, e(k) / e(n));
        prop_assert_eq!(ep <= tp, k <= n);
    }

    #[test]
    fn remat_keeps_a_strict_subset(
        n in 1u64..17, k in 1u64..9, f_num in 1u64..64, f_den in 1u64..8, m in 1u64..17,
    ) {
        let f = e(f_num) / e(f_den);
        let full = activation_full(1, 4096, 4096, n, k, f, m).unwrap();
        let kept = activation_remat(1, 4096, 4096, n, k, f, m).unwrap();
        prop_assert!(kept < full);
        prop_assert!(!kept.is_zero());
    }

    #[test]
    fn rounding_is_idempotent(x in -1e6f64..1e6) {
        for fmt in [FloatFormat::Bf16, FloatFormat::E4M3] {
            let r = round_to(fmt, x);
            prop_assert_eq!(round_to(fmt, r), r);
        }
        prop_assert!(round_to(FloatFormat::E4M3, x).abs() <= 448.0);
    }

    #[test]
    fn requantizing_reproduces_codes(
        rows in 1usize..6, cols in 1usize..40, seed in 0u64..1000, group in 1u64..9,
    ) {
        let x = Matrix::from_fn(rows, cols, |r, c| {
            let t = (seed as f64 + 1.0) * (r * 31 + c * 7 + 1) as f64;
            t.sin() * 10f64.powi((r % 4) as i32)
        });
        for g in [
            Granularity::PerTensor,
            Granularity::PerToken,
            Granularity::PerChannel,
            Granularity::Grouped { group_size: group },
        ] {
            let scheme = QuantScheme::new(g, FloatFormat::E4M3);
            let q = quantize(&x, scheme);
            let again = quantize(&dequantize(&q), scheme);
            prop_assert_eq!(&again.codes, &q.codes);
            prop_assert!(q.scales.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn fp32_reduction_ignores_equal_rank_permutations(seed in 0u64..500, ranks in 2usize..9) {
        // Exact sums of BF16 values: order cannot matter.
        let v: Vec<Vec<f64>> = (0..ranks)
            .map(|r| (0..8).map(|j| round_to(FloatFormat::Bf16, ((seed + r as u64 * 13 + j) as f64).cos())).collect())
            .collect();
        let mut rev = v.clone();
        rev.reverse();
        let a = emulate_reduce(&v, ReduceKind::A2aFp32).unwrap();
        let b = emulate_reduce(&rev, ReduceKind::A2aFp32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn scatter_then_gather_restores_every_retained_slot(
        tokens in 1usize..200, seed in 0u64..1000, k in 1u64..4, cf in 0.5f64..2.0,
    ) {
        let (experts, n) = (8u64, 4u64);
        let a = simulate_routing(tokens, experts, k, RoutingMode::Random { seed }, cf, n).unwrap();
        let slots: Vec<usize> = (0..tokens * k as usize).collect();
        let mut seen = vec![false; slots.len()];
        for rank in 0..n {
            let map = build_scatter_map(&a, n, rank).unwrap();
            let rows = map.scatter(&slots);
            for (slot, got) in map.gather(&rows, slots.len()).into_iter().enumerate() {
                if let Some(v) = got {
                    prop_assert_eq!(v, slot);
                    prop_assert!(!seen[slot]);
                    seen[slot] = true;
                }
            }
        }
        prop_assert_eq!(seen.iter().filter(|s| **s).count() as u64, a.retained_slots());
    }

    #[test]
    fn pipeline_closed_form_matches_simulation(
        pp in 1u64..5, vpp in 1u64..3, q in 1u64..4, f in 1u32..50, w in 1u32..50,
    ) {
        // Integer-valued durations keep both sides exact. The closed form takes
        // per-stage times (all chunks), the simulator per-chunk times.
        let mb = pp * q;
        let (f, w) = (f as f64, w as f64);
        let v = vpp as f64;
        let closed = pipeline_iteration_time(v * f, v * w, pp, vpp, mb, 0.0).unwrap();
        let sim = simulate_pipeline(pp, vpp, mb, f, w).unwrap();
        prop_assert_eq!(closed, sim);
    }
}
