//! Ranking evaluation: hit rate and NDCG truncated at 10, stratified by item
//! popularity (overall / head / tail / five buckets), with the sampled-
//! negative protocol (1 target + n sampled negatives per user) or full-catalog
//! ranking behind a flag.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, PopularityPartition, SplitDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    forward_batch, score_candidates, to_vars, AblationFlags, BatchView, ModelParams,
};
use crate::quantizer::SidAssignment;
use crate::rng::Rng;

pub const K_CUTOFF: usize = 10;

/// 1-based rank with pessimistic tie handling: candidates scoring equal to
/// the target count as ranked ahead of it.
pub fn rank_of_target(scores: &[f32], candidates: &[ItemId], target: ItemId) -> Result<usize> {
    let pos = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::InvalidArg(format!("target {target} not in candidate set")))?;
    let ts = scores[pos];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == pos {
            continue;
        }
        if s >= ts {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: 1/log2(rank+1) within the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct GroupMetrics {
    pub hit_at_10: f64,
    pub ndcg_at_10: f64,
    pub n_evaluated: usize,
}

impl GroupMetrics {
    fn add(&mut self, hit: f64, ndcg: f64) {
        self.hit_at_10 += hit;
        self.ndcg_at_10 += ndcg;
        self.n_evaluated += 1;
    }

    fn finish(&mut self) {
        if self.n_evaluated > 0 {
            self.hit_at_10 /= self.n_evaluated as f64;
            self.ndcg_at_10 /= self.n_evaluated as f64;
        }
    }
}

/// Metrics grouped by the popularity group of each user's target item.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub head: GroupMetrics,
    pub tail: GroupMetrics,
    pub buckets: Vec<GroupMetrics>,
    /// Number of sampled negatives per user; None means full-catalog ranking.
    pub n_negatives: Option<usize>,
    pub seed: u64,
}

/// Which leave-one-out role supplies (prefix, target).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

fn user_prefix_target(split: &SplitDataset, row: usize, which: EvalSplit) -> (Vec<ItemId>, ItemId) {
    let u = &split.users[row];
    match which {
        EvalSplit::Valid => (u.valid_input().to_vec(), u.valid_target),
        EvalSplit::Test => (u.test_input(), u.test_target),
    }
}

/// Candidate list for one user: the target first, then negatives sampled
/// uniformly (without replacement) from items outside the user's full
/// history. Deterministic per (seed, user row).
pub fn candidate_set(
    split: &SplitDataset,
    row: usize,
    target: ItemId,
    n_neg: Option<usize>,
    seed: u64,
) -> Vec<ItemId> {
    let history: HashSet<ItemId> = split.users[row].full_sequence().into_iter().collect();
    match n_neg {
        Some(n) => {
            let mut rng = Rng::new(seed).fork(row as u64 + 1);
            let mut cands = Vec::with_capacity(n + 1);
            cands.push(target);
            let mut seen: HashSet<ItemId> = HashSet::with_capacity(n + 1);
            seen.insert(target);
            let catalog = split.n_items;
            while cands.len() < n + 1 && seen.len() + history.len() <= catalog {
                let c = rng.below(catalog) as ItemId;
                if history.contains(&c) || seen.contains(&c) {
                    continue;
                }
                seen.insert(c);
                cands.push(c);
            }
            cands
        }
        None => {
            let mut cands = Vec::with_capacity(split.n_items);
            cands.push(target);
            for i in 0..split.n_items as ItemId {
                if i != target && !history.contains(&i) {
                    cands.push(i);
                }
            }
            cands
        }
    }
}

fn aggregate(
    per_user: &[(usize, ItemId)],
    ranks: &[usize],
    partition: &PopularityPartition,
    n_neg: Option<usize>,
    seed: u64,
) -> MetricsReport {
    let mut overall = GroupMetrics::default();
    let mut head = GroupMetrics::default();
    let mut tail = GroupMetrics::default();
    let mut buckets = vec![GroupMetrics::default(); partition.n_buckets];
    for (&(_, target), &rank) in per_user.iter().zip(ranks) {
        let h = hit_at_k(rank, K_CUTOFF);
        let n = ndcg_at_k(rank, K_CUTOFF);
        overall.add(h, n);
        if partition.is_head[target as usize] {
            head.add(h, n);
        } else {
            tail.add(h, n);
        }
        buckets[partition.bucket[target as usize] as usize].add(h, n);
    }
    overall.finish();
    head.finish();
    tail.finish();
    for b in &mut buckets {
        b.finish();
    }
    MetricsReport {
        overall,
        head,
        tail,
        buckets,
        n_negatives: n_neg,
        seed,
    }
}

/// Evaluate an arbitrary scoring function (user row, candidates) -> scores.
/// The scorer runs in parallel across users; aggregation order is fixed.
pub fn evaluate_with_scorer<F>(
    scorer: F,
    split: &SplitDataset,
    partition: &PopularityPartition,
    which: EvalSplit,
    n_neg: Option<usize>,
    seed: u64,
) -> Result<MetricsReport>
where
    F: Fn(usize, &[ItemId]) -> Vec<f32> + Sync,
{
    let per_user: Vec<(usize, ItemId)> = (0..split.users.len())
        .map(|row| (row, user_prefix_target(split, row, which).1))
        .collect();
    let ranks: Vec<usize> = per_user
        .par_iter()
        .map(|&(row, target)| {
            let cands = candidate_set(split, row, target, n_neg, seed);
            let scores = scorer(row, &cands);
            rank_of_target(&scores, &cands, target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&per_user, &ranks, partition, n_neg, seed))
}

/// Evaluate the trained model: forward all prefixes in chunks, then score
/// each user's candidate set with its own alpha and branch representations.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    params: &ModelParams<f32>,
    sids: &SidAssignment,
    split: &SplitDataset,
    partition: &PopularityPartition,
    which: EvalSplit,
    n_neg: Option<usize>,
    seed: u64,
    flags: &AblationFlags,
) -> Result<MetricsReport> {
    let dims = params.dims();
    if sids.n_items() != split.n_items {
        return Err(Error::Shape(format!(
            "sid assignment covers {} items, split has {}",
            sids.n_items(),
            split.n_items
        )));
    }
    let n_users = split.users.len();
    let d = dims.d;
    let l = dims.levels;
    let chunk = 512usize;

    let mut alphas = vec![0.0f32; n_users * l];
    let mut u_sids = vec![0.0f32; n_users * d];
    let mut u_hids = vec![0.0f32; n_users * d];
    let use_sid = !flags.hid_only;
    let use_hid = !flags.sid_only;

    for start in (0..n_users).step_by(chunk) {
        let end = (start + chunk).min(n_users);
        let prefixes: Vec<Vec<ItemId>> = (start..end)
            .map(|row| user_prefix_target(split, row, which).0)
            .collect();
        let refs: Vec<&[ItemId]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let (seqs, pad, last) = crate::data::pad_prefixes(&refs, dims.max_len, split.n_items);
        let view = BatchView {
            b: end - start,
            t: dims.max_len,
            seqs: &seqs,
            pad_mask: &pad,
            last_pos: &last,
        };
        let mut g: Graph<f32> = Graph::new();
        let pv = to_vars(&mut g, params);
        let out = forward_batch(&mut g, &pv, &dims, &view, sids, flags, None);
        let alpha = g.val(out.alpha);
        alphas[start * l..end * l].copy_from_slice(alpha.data());
        if use_sid {
            let u = g.val(out.u_sid.expect("sid branch"));
            u_sids[start * d..end * d].copy_from_slice(u.data());
        }
        if use_hid {
            let u = g.val(out.u_hid.expect("hid branch"));
            u_hids[start * d..end * d].copy_from_slice(u.data());
        }
    }

    evaluate_with_scorer(
        |row, cands| {
            let alpha = &alphas[row * l..(row + 1) * l];
            let us = if use_sid {
                Some(&u_sids[row * d..(row + 1) * d])
            } else {
                None
            };
            let uh = if use_hid {
                Some(&u_hids[row * d..(row + 1) * d])
            } else {
                None
            };
            score_candidates(params, sids, alpha, us, uh, cands)
                .expect("candidates validated upstream")
        },
        split,
        partition,
        which,
        n_neg,
        seed,
    )
}

/// Mean and sample standard deviation across seed runs, per group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub h10_mean: f64,
    pub h10_std: f64,
    pub n10_mean: f64,
    pub n10_std: f64,
    pub n_evaluated: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Merge per-seed reports into a mean +/- stddev table.
pub fn group_breakdown(reports: &[MetricsReport]) -> Result<SummaryTable> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to merge".into()));
    }
    let n_buckets = reports[0].buckets.len();
    if reports.iter().any(|r| r.buckets.len() != n_buckets) {
        return Err(Error::Shape("reports disagree on bucket count".into()));
    }
    let mut rows = Vec::new();
    let mut push = |group: &str, pick: &dyn Fn(&MetricsReport) -> GroupMetrics| {
        let h: Vec<f64> = reports.iter().map(|r| pick(r).hit_at_10).collect();
        let n: Vec<f64> = reports.iter().map(|r| pick(r).ndcg_at_10).collect();
        let (h10_mean, h10_std) = mean_std(&h);
        let (n10_mean, n10_std) = mean_std(&n);
        rows.push(SummaryRow {
            group: group.to_string(),
            h10_mean,
            h10_std,
            n10_mean,
            n10_std,
            n_evaluated: pick(&reports[0]).n_evaluated,
        });
    };
    push("overall", &|r| r.overall);
    push("head", &|r| r.head);
    push("tail", &|r| r.tail);
    for b in 0..n_buckets {
        push(&format!("bucket{}", b + 1), &|r| r.buckets[b]);
    }
    Ok(SummaryTable {
        seeds: reports.iter().map(|r| r.seed).collect(),
        rows,
    })
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,h10_mean,h10_std,n10_mean,n10_std,n_evaluated\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.group, r.h10_mean, r.h10_std, r.n10_mean, r.n10_std, r.n_evaluated
            ));
        }
        out
    }

    /// Overall / Tail / Head rows, the layout used in reports.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "group", "H@10", "+/-", "N@10", "+/-", "n"
        ));
        for name in ["overall", "tail", "head"] {
            if let Some(r) = self.rows.iter().find(|r| r.group == name) {
                out.push_str(&format!(
                    "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
                    r.group, r.h10_mean, r.h10_std, r.n10_mean, r.n10_std, r.n_evaluated
                ));
            }
        }
        out
    }
}
