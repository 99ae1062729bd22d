//! Token routing, scatter/gather row maps, tile layouts and group balance.
//!
//! Experts live on ranks contiguously: expert `j` is on rank
//! `j / (E/n)`. A token's `k` routed copies are *slots*, numbered
//! `token * k + j`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ROUTING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RoutingMode {
    /// Round robin: token `t` takes experts `t*k .. t*k+k` mod `E`.
    Uniform,
    /// `k` distinct experts uniformly at random.
    Random { seed: u64 },
    /// `k` distinct experts drawn with Zipf weights `1/(j+1)^s`.
    Skewed { zipf_s: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingAssignment {
    pub schema_version: u32,
    pub num_experts: u64,
    pub top_k: u64,
    pub capacity_factor: f64,
    /// Tokens each expert accepts: `ceil(cf * tokens * k / E)`.
    pub capacity: u64,
    pub assignments: Vec<Vec<u64>>,
    pub source_rank: Vec<u64>,
    /// Whole tokens dropped because one of their experts was full.
    pub dropped: Vec<bool>,
}

impl RoutingAssignment {
    pub fn tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn retained_slots(&self) -> u64 {
        self.dropped.iter().filter(|d| !**d).count() as u64 * self.top_k
    }

    pub fn dropped_slots(&self) -> u64 {
        self.dropped.iter().filter(|d| **d).count() as u64 * self.top_k
    }

    /// Retained slots per expert (`e_j`).
    pub fn expert_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_experts as usize];
        for (t, experts) in self.assignments.iter().enumerate() {
            if !self.dropped[t] {
                for &e in experts {
                    counts[e as usize] += 1;
                }
            }
        }
        counts
    }
}

fn zipf_pick(rng: &mut ChaCha8Rng, weights: &[f64], k: usize) -> Vec<u64> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = w
            .iter()
            .rposition(|&v| v > 0.0)
            .expect("k <= E leaves a positive weight");
        for (j, &v) in w.iter().enumerate() {
            if v > 0.0 && x < v {
                pick = j;
                break;
            }
            x -= v;
        }
        w[pick] = 0.0;
        out.push(pick as u64);
    }
    out
}

/// Routes `tokens` tokens spread contiguously over `source_ranks` ranks.
///
/// Tokens are admitted in index order; a token is dropped whole when any
/// of its experts is at capacity, so the highest-index tokens go first.
pub fn simulate_routing(
    tokens: usize,
    num_experts: u64,
    top_k: u64,
    mode: RoutingMode,
    capacity_factor: f64,
    source_ranks: u64,
) -> Result<RoutingAssignment> {
    if num_experts == 0 || top_k == 0 || top_k > num_experts {
        return Err(Error::domain("need 1 <= top_k <= num_experts"));
    }
    if !(capacity_factor.is_finite() && capacity_factor > 0.0) {
        return Err(Error::domain("capacity factor must be > 0"));
    }
    if source_ranks == 0 {
        return Err(Error::domain("need at least one source rank"));
    }
    let (e, k) = (num_experts as usize, top_k as usize);
    let assignments: Vec<Vec<u64>> = match mode {
        RoutingMode::Uniform => (0..tokens)
            .map(|t| (0..k).map(|j| ((t * k + j) % e) as u64).collect())
            .collect(),
        RoutingMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..tokens)
                .map(|_| {
                    sample(&mut rng, e, k)
                        .into_iter()
                        .map(|x| x as u64)
                        .collect()
                })
                .collect()
        }
        RoutingMode::Skewed { zipf_s, seed } => {
            if !(zipf_s.is_finite() && zipf_s >= 0.0) {
                return Err(Error::domain("zipf exponent must be finite and >= 0"));
            }
            let weights: Vec<f64> = (0..e)
                .map(|j| 1.0 / ((j + 1) as f64).powf(zipf_s))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..tokens)
                .map(|_| zipf_pick(&mut rng, &weights, k))
                .collect()
        }
    };
    let capacity = (capacity_factor * (tokens * k) as f64 / e as f64).ceil() as u64;
    let mut load = vec![0u64; e];
    let dropped = assignments
        .iter()
        .map(|experts| {
            if experts.iter().all(|&x| load[x as usize] < capacity) {
                for &x in experts {
                    load[x as usize] += 1;
                }
                false
            } else {
                true
            }
        })
        .collect();
    let source_rank = (0..tokens)
        .map(|t| (t as u64 * source_ranks) / tokens.max(1) as u64)
        .collect();
    Ok(RoutingAssignment {
        schema_version: ROUTING_SCHEMA_VERSION,
        num_experts,
        top_k,
        capacity_factor,
        capacity,
        assignments,
        source_rank,
        dropped,
    })
}

fn experts_per_rank(a: &RoutingAssignment, n: u64) -> Result<u64> {
    if n == 0 || !a.num_experts.is_multiple_of(n) {
        return Err(Error::domain(format!(
            "{} experts cannot be spread evenly over {n} ranks",
            a.num_experts
        )));
    }
    Ok(a.num_experts / n)
}

/// Precomputed row mapping for one rank's scatter and gather.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterMap {
    pub rank: u64,
    /// First expert on this rank.
    pub first_expert: u64,
    /// Input slot -> output row.
    pub row_map: BTreeMap<usize, usize>,
    /// Output row -> input slot.
    pub inverse_map: Vec<usize>,
    /// Rows per local expert.
    pub per_expert_counts: Vec<u64>,
}

impl ScatterMap {
    /// Output rows of local expert `i`.
    pub fn expert_rows(&self, i: usize) -> Range<usize> {
        let start: u64 = self.per_expert_counts[..i].iter().sum();
        start as usize..(start + self.per_expert_counts[i]) as usize
    }

    /// Moves slot-indexed rows into expert-grouped order.
    pub fn scatter<T: Clone>(&self, slots: &[T]) -> Vec<T> {
        self.inverse_map.iter().map(|&s| slots[s].clone()).collect()
    }

    /// Puts expert-ordered rows back at their slots; other slots are `None`.
    pub fn gather<T: Clone>(&self, rows: &[T], num_slots: usize) -> Vec<Option<T>> {
        let mut out = vec![None; num_slots];
        for (&slot, &row) in &self.row_map {
            out[slot] = Some(rows[row].clone());
        }
        out
    }
}

/// Rows for `my_rank`'s experts, grouped by expert and ordered within an
/// expert by (source rank, token).
pub fn build_scatter_map(a: &RoutingAssignment, n: u64, my_rank: u64) -> Result<ScatterMap> {
    if my_rank >= n {
        return Err(Error::domain(format!(
            "rank {my_rank} out of range for {n} ranks"
        )));
    }
    let per = experts_per_rank(a, n)?;
    let first = my_rank * per;
    let k = a.top_k as usize;
    let mut keyed: Vec<(u64, u64, usize, usize)> = Vec::new();
    for (t, experts) in a.assignments.iter().enumerate() {
        if a.dropped[t] {
            continue;
        }
        for (j, &e) in experts.iter().enumerate() {
            if (first..first + per).contains(&e) {
                keyed.push((e, a.source_rank[t], t, t * k + j));
            }
        }
    }
    keyed.sort_unstable();
    let mut counts = vec![0u64; per as usize];
    let mut row_map = BTreeMap::new();
    let mut inverse = Vec::with_capacity(keyed.len());
    for (row, &(e, _, _, slot)) in keyed.iter().enumerate() {
        counts[(e - first) as usize] += 1;
        row_map.insert(slot, row);
        inverse.push(slot);
    }
    Ok(ScatterMap {
        rank: my_rank,
        first_expert: first,
        row_map,
        inverse_map: inverse,
        per_expert_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub expert: u64,
    /// Rows of the expert-grouped buffer.
    pub rows: Range<usize>,
    /// Distinct source ranks the tile waits on, ascending.
    pub dep_ranks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLayout {
    pub schema_version: u32,
    pub tile_rows: usize,
    pub tiles: Vec<Tile>,
    /// Input slot of every row, in tile order.
    pub row_slots: Vec<usize>,
    /// Source rank of every row, in tile order.
    pub row_ranks: Vec<u64>,
}

impl TileLayout {
    pub fn total_dependencies(&self) -> usize {
        self.tiles.iter().map(|t| t.dep_ranks.len()).sum()
    }
}

/// Sum over sequential tiles of the distinct ranks in each tile.
pub fn dependency_total(ranks: &[u64], tile_rows: usize) -> usize {
    ranks
        .chunks(tile_rows.max(1))
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
        .sum()
}

/// Largest rank count for which block order is optimized exactly.
const MAX_EXACT_RANKS: usize = 16;

/// Order of per-rank row blocks that minimizes the dependency total.
///
/// With each rank's rows contiguous, a tile depends on one rank plus one
/// per block boundary strictly inside it, so the best order maximizes the
/// boundaries that land on tile edges. A subset search finds it; among
/// optimal orders the lexicographically smallest (ascending when that is
/// optimal) wins. More than 16 ranks falls back to ascending order.
pub fn order_rank_blocks(counts: &[(u64, usize)], tile_rows: usize) -> Vec<u64> {
    let r = counts.len();
    let t = tile_rows.max(1);
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    if r <= 1 || r > MAX_EXACT_RANKS {
        return sorted.iter().map(|c| c.0).collect();
    }
    let full = (1usize << r) - 1;
    let sum = |mask: usize| -> usize {
        (0..r)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| sorted[i].1)
            .sum()
    };
    let aligned = |mask: usize| -> usize { usize::from(mask != full && sum(mask) % t == 0) };
    // best[mask]: most aligned boundaries achievable after placing `mask`.
    let mut best = vec![0usize; full + 1];
    for mask in (0..full).rev() {
        best[mask] = (0..r)
            .filter(|i| mask >> i & 1 == 0)
            .map(|i| aligned(mask | 1 << i) + best[mask | 1 << i])
            .max()
            .unwrap_or(0);
    }
    let mut order = Vec::with_capacity(r);
    let mut mask = 0usize;
    while mask != full {
        let i = (0..r)
            .find(|&i| {
                mask >> i & 1 == 0 && aligned(mask | 1 << i) + best[mask | 1 << i] == best[mask]
            })
            .expect("some extension attains the optimum");
        order.push(sorted[i].0);
        mask |= 1 << i;
    }
    order
}

/// Lays out each local expert's rows in per-rank blocks (block order from
/// [`order_rank_blocks`], tokens ascending inside a block) and slices
/// them into tiles of `tile_rows`.
pub fn sort_tokens_for_tiles(
    map: &ScatterMap,
    a: &RoutingAssignment,
    tile_rows: usize,
) -> Result<TileLayout> {
    if tile_rows == 0 {
        return Err(Error::domain("tile_rows must be >= 1"));
    }
    let k = a.top_k as usize;
    let mut tiles = Vec::new();
    let mut row_slots = Vec::with_capacity(map.inverse_map.len());
    let mut row_ranks = Vec::with_capacity(map.inverse_map.len());
    for i in 0..map.per_expert_counts.len() {
        let expert = map.first_expert + i as u64;
        let slots = &map.inverse_map[map.expert_rows(i)];
        let mut by_rank: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for &s in slots {
            by_rank.entry(a.source_rank[s / k]).or_default().push(s);
        }
        let counts: Vec<(u64, usize)> = by_rank.iter().map(|(&r, v)| (r, v.len())).collect();
        let base = row_slots.len();
        for rank in order_rank_blocks(&counts, tile_rows) {
            for &s in &by_rank[&rank] {
                row_slots.push(s);
                row_ranks.push(rank);
            }
        }
        let end = row_slots.len();
        let mut start = base;
        while start < end {
            let stop = (start + tile_rows).min(end);
            let mut deps = row_ranks[start..stop].to_vec();
            deps.sort_unstable();
            deps.dedup();
            tiles.push(Tile {
                expert,
                rows: start..stop,
                dep_ranks: deps,
            });
            start = stop;
        }
    }
    Ok(TileLayout {
        schema_version: ROUTING_SCHEMA_VERSION,
        tile_rows,
        tiles,
        row_slots,
        row_ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    /// Retained slots per rank group.
    pub per_group_load: Vec<u64>,
    /// `G * sum_g (load_g / total) * prob_g`; 1 when perfectly balanced.
    pub balance_loss_value: f64,
    /// Slots a group accepts: expert capacity times experts per group.
    pub capacity: u64,
    pub drop_rate: f64,
    /// Retained slots per expert (`e_j`).
    pub per_expert_counts: Vec<u64>,
}

/// Switch-style balance loss computed over groups of co-located experts.
/// `prob_g` is the share of all router choices (dropped or not) that
/// picked group `g`.
pub fn balance_metrics(a: &RoutingAssignment, n: u64) -> Result<BalanceStats> {
    let per = experts_per_rank(a, n)?;
    let counts = a.expert_counts();
    let groups = n as usize;
    let mut load = vec![0u64; groups];
    for (e, &c) in counts.iter().enumerate() {
        load[e / per as usize] += c;
    }
    let mut picks = vec![0u64; groups];
    for experts in &a.assignments {
        for &e in experts {
            picks[(e / per) as usize] += 1;
        }
    }
    let total_load: u64 = load.iter().sum();
    let total_picks: u64 = picks.iter().sum();
    let loss = if total_load == 0 || total_picks == 0 {
        0.0
    } else {
        groups as f64
            * load
                .iter()
                .zip(&picks)
                .map(|(&l, &p)| (l as f64 / total_load as f64) * (p as f64 / total_picks as f64))
                .sum::<f64>()
    };
    let slots = a.tokens() as u64 * a.top_k;
    Ok(BalanceStats {
        per_group_load: load,
        balance_loss_value: loss,
        capacity: a.capacity * per,
        drop_rate: if slots == 0 {
            0.0
        } else {
            a.dropped_slots() as f64 / slots as f64
        },
        per_expert_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual(assignments: Vec<Vec<u64>>, experts: u64, ranks: Vec<u64>) -> RoutingAssignment {
        let t = assignments.len();
        RoutingAssignment {
            schema_version: ROUTING_SCHEMA_VERSION,
            num_experts: experts,
            top_k: assignments[0].len() as u64,
            capacity_factor: 1.0,
            capacity: u64::MAX,
            assignments,
            source_rank: ranks,
            dropped: vec![false; t],
        }
    }

    #[test]
    fn uniform_is_balanced() {
        let a = simulate_routing(64, 8, 2, RoutingMode::Uniform, 1.0, 4).unwrap();
        assert!(a.expert_counts().iter().all(|&c| c == 16));
        assert_eq!(a.dropped_slots(), 0);
        let b = balance_metrics(&a, 4).unwrap();
        assert_eq!(b.balance_loss_value, 1.0);
        assert_eq!(b.drop_rate, 0.0);
    }

    #[test]
    fn random_is_deterministic_and_distinct() {
        let a = simulate_routing(500, 16, 4, RoutingMode::Random { seed: 3 }, 2.0, 8).unwrap();
        let b = simulate_routing(500, 16, 4, RoutingMode::Random { seed: 3 }, 2.0, 8).unwrap();
        assert_eq!(a, b);
        for ex in &a.assignments {
            let mut v = ex.clone();
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), 4);
        }
        assert_eq!(a.retained_slots() + a.dropped_slots(), 500 * 4);
    }

    #[test]
    fn skewed_routing_drops() {
        let a = simulate_routing(
            4096,
            8,
            2,
            RoutingMode::Skewed {
                zipf_s: 1.2,
                seed: 0,
            },
            1.0,
            8,
        )
        .unwrap();
        assert!(balance_metrics(&a, 8).unwrap().drop_rate > 0.0);
        // Dropped tokens are a suffix-heavy set: the first token always fits.
        assert!(!a.dropped[0]);
        let b = balance_metrics(&a, 8).unwrap();
        assert!(b.per_group_load.iter().sum::<u64>() <= b.capacity * 8);
    }

    #[test]
    fn invalid_parameters() {
        assert!(simulate_routing(4, 2, 3, RoutingMode::Uniform, 1.0, 1).is_err());
        assert!(simulate_routing(4, 2, 1, RoutingMode::Uniform, 0.0, 1).is_err());
        assert!(simulate_routing(
            4,
            2,
            1,
            RoutingMode::Skewed {
                zipf_s: f64::NAN,
                seed: 0
            },
            1.0,
            1
        )
        .is_err());
    }

    #[test]
    fn hand_built_scatter_map() {
        let a = manual(
            vec![vec![1], vec![0], vec![0], vec![1]],
            2,
            vec![0, 0, 1, 1],
        );
        let m = build_scatter_map(&a, 2, 0).unwrap();
        assert_eq!(m.row_map, BTreeMap::from([(1, 0), (2, 1)]));
        assert_eq!(m.inverse_map, vec![1, 2]);
        assert!(build_scatter_map(&a, 2, 2).is_err());
        let off = manual(vec![vec![1]; 4], 2, vec![0; 4]);
        assert!(build_scatter_map(&off, 2, 0).unwrap().row_map.is_empty());
    }

    #[test]
    fn scatter_gather_round_trip() {
        for seed in 0..20 {
            let a = simulate_routing(256, 8, 2, RoutingMode::Random { seed }, 1.25, 4).unwrap();
            let slots: Vec<usize> = (0..256 * 2).collect();
            let m = build_scatter_map(&a, 4, seed % 4).unwrap();
            let back = m.gather(&m.scatter(&slots), slots.len());
            for (s, v) in back.iter().enumerate() {
                if let Some(v) = v {
                    assert_eq!(*v, s);
                }
            }
            assert_eq!(back.iter().flatten().count(), m.inverse_map.len());
        }
    }

    #[test]
    fn hand_built_tiles() {
        let a = manual(vec![vec![0]; 4], 1, vec![2, 0, 1, 0]);
        let m = build_scatter_map(&a, 1, 0).unwrap();
        let l = sort_tokens_for_tiles(&m, &a, 2).unwrap();
        assert_eq!(l.row_ranks, vec![0, 0, 1, 2]);
        assert_eq!(l.tiles[0].dep_ranks, vec![0]);
        assert_eq!(l.tiles[1].dep_ranks, vec![1, 2]);
        let one = sort_tokens_for_tiles(&m, &a, 10).unwrap();
        assert_eq!(one.tiles.len(), 1);
        assert_eq!(one.tiles[0].dep_ranks, vec![0, 1, 2]);
        assert!(sort_tokens_for_tiles(&m, &a, 0).is_err());
    }

    #[test]
    fn block_order_beats_ascending_when_it_can() {
        // Ranks [0, 1, 1, 2] in tiles of two: ascending gives 2 + 2, keeping
        // rank 1's pair inside one tile gives 2 + 1.
        let order = order_rank_blocks(&[(0, 1), (1, 2), (2, 1)], 2);
        assert_eq!(order, vec![0, 2, 1]);
        assert_eq!(dependency_total(&[0, 1, 1, 2], 2), 4);
        assert_eq!(dependency_total(&[0, 2, 1, 1], 2), 3);
        assert_eq!(order_rank_blocks(&[(0, 2), (1, 2)], 2), vec![0, 1]);
    }

    #[test]
    fn all_to_one_group_loss() {
        let a = manual(vec![vec![0]; 10], 4, vec![0; 10]);
        assert_eq!(balance_metrics(&a, 4).unwrap().balance_loss_value, 4.0);
    }
}
