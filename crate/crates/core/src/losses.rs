//! Training objectives: pairwise ranking loss, 1-to-1 and code-guided
//! contrastive alignment between the SID and HID item spaces, the masked
//! sequence granularity loss, and their weighted combination.
//!
//! All contrastive losses work on cosine similarities, so they are invariant
//! to uniform positive rescaling of the embeddings.

use std::sync::Arc;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{BatchView, ParamVars};
use crate::quantizer::SidAssignment;
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Positive partners of one anchor within the batch item pool: the anchor
/// itself, code-prefix siblings, and co-occurrence neighbors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSet {
    /// Index of the anchor within the pool.
    pub anchor: usize,
    /// Pool indices, anchor included, sorted ascending.
    pub members: Vec<usize>,
}

/// Loss values for one step, in f64. `total` is computed from the parts, so
/// the decomposition identity holds exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_ca: f64,
    pub l_msg: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Mean over valid positions and negatives of -log sigmoid(s+ - s-).
pub fn rec_loss<S: Scalar>(g: &mut Graph<S>, pos: Var, neg: Var, valid: Arc<Vec<bool>>) -> Var {
    g.pairwise_rank_loss(pos, neg, valid)
}

fn cosine_matrix<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, tau: f64) -> Var {
    let n = g.val(a).shape()[0];
    let m = g.val(b).shape()[0];
    let d = g.val(a).shape()[1];
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let a3 = g.reshape(an, &[1, n, d]);
    let b3 = g.reshape(bn, &[1, m, d]);
    let c = g.bmm(a3, b3, false, true);
    let c = g.reshape(c, &[n, m]);
    g.scale(c, S::from_f64(1.0 / tau))
}

/// 1-to-1 alignment (the ablation baseline): anchor i's positive is item i on
/// the other side; the denominator runs over negatives only (j != i).
pub fn pairwise_alignment_loss<S: Scalar>(
    g: &mut Graph<S>,
    e_sid: Var,
    e_hid: Var,
    tau: f64,
) -> Result<Var> {
    let n = g.val(e_sid).shape()[0];
    if n < 2 {
        return Err(Error::InvalidArg(
            "pairwise alignment needs at least 2 items".into(),
        ));
    }
    let c = cosine_matrix(g, e_sid, e_hid, tau);
    let mut diag = vec![false; n * n];
    let mut off = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag[i * n + j] = true;
            } else {
                off[i * n + j] = true;
            }
        }
    }
    let lse_num = g.logsumexp_masked(c, Arc::new(diag));
    let lse_den = g.logsumexp_masked(c, Arc::new(off));
    let per_anchor = g.sub(lse_den, lse_num);
    Ok(g.mean_all(per_anchor))
}

/// Distinct non-pad items appearing in the batch, sorted, uniformly
/// subsampled down to `cap` when larger.
pub fn batch_item_pool(view: &BatchView<'_>, cap: usize, rng: &mut Rng) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = view
        .seqs
        .iter()
        .zip(view.pad_mask)
        .filter(|&(_, &valid)| valid)
        .map(|(&it, _)| it)
        .collect();
    items.sort_unstable();
    items.dedup();
    if items.len() > cap {
        rng.shuffle(&mut items);
        items.truncate(cap);
        items.sort_unstable();
    }
    items
}

/// Positive set for one anchor: code-prefix siblings (first `p` levels equal)
/// plus items within the co-occurrence window `o` around any occurrence of
/// the anchor in this batch's sequences.
pub fn build_positive_set(
    anchor: usize,
    pool: &[ItemId],
    view: &BatchView<'_>,
    sids: &SidAssignment,
    p: usize,
    o: usize,
) -> PositiveSet {
    assert!(p >= 1 && p <= sids.levels, "p must lie in [1, L]");
    let anchor_item = pool[anchor];
    let mut member_flags = vec![false; pool.len()];
    member_flags[anchor] = true;

    // Code-prefix siblings.
    let prefix = &sids.codes_of(anchor_item as usize)[..p];
    for (j, &it) in pool.iter().enumerate() {
        if j != anchor && &sids.codes_of(it as usize)[..p] == prefix {
            member_flags[j] = true;
        }
    }

    // Co-occurrence window inside this batch's (truncated) sequences.
    if o > 0 {
        let (b, t) = (view.b, view.t);
        for bi in 0..b {
            for ti in 0..t {
                if !view.pad_mask[bi * t + ti] || view.seqs[bi * t + ti] != anchor_item {
                    continue;
                }
                let lo = ti.saturating_sub(o);
                let hi = (ti + o).min(t - 1);
                for tj in lo..=hi {
                    if tj == ti || !view.pad_mask[bi * t + tj] {
                        continue;
                    }
                    let neighbor = view.seqs[bi * t + tj];
                    if let Ok(j) = pool.binary_search(&neighbor) {
                        member_flags[j] = true;
                    }
                }
            }
        }
    }
    PositiveSet {
        anchor,
        members: member_flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(j, _)| j)
            .collect(),
    }
}

pub fn build_positive_sets(
    pool: &[ItemId],
    view: &BatchView<'_>,
    sids: &SidAssignment,
    p: usize,
    o: usize,
) -> Vec<PositiveSet> {
    (0..pool.len())
        .map(|i| build_positive_set(i, pool, view, sids, p, o))
        .collect()
}

fn positive_mask(sets: &[PositiveSet], n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for set in sets {
        for &j in &set.members {
            m[set.anchor * n + j] = true;
        }
    }
    m
}

/// 1-to-many code-guided alignment, both directions summed. For each anchor
/// the numerator aggregates its positive set; the denominator runs over the
/// whole pool (anchor included).
pub fn code_guided_alignment_loss<S: Scalar>(
    g: &mut Graph<S>,
    e_sid: Var,
    e_hid: Var,
    sets: &[PositiveSet],
    tau: f64,
) -> Result<Var> {
    let n = g.val(e_sid).shape()[0];
    if n == 0 {
        return Err(Error::Empty("alignment pool is empty".into()));
    }
    assert_eq!(sets.len(), n, "one positive set per pool item");
    for s in sets {
        assert!(!s.members.is_empty(), "positive set may not be empty");
    }
    let pos = Arc::new(positive_mask(sets, n));
    let all = Arc::new(vec![true; n * n]);

    let mut total: Option<Var> = None;
    for flip in [false, true] {
        let c = if flip {
            cosine_matrix(g, e_hid, e_sid, tau)
        } else {
            cosine_matrix(g, e_sid, e_hid, tau)
        };
        let lse_pos = g.logsumexp_masked(c, pos.clone());
        let lse_all = g.logsumexp_masked(c, all.clone());
        let per_anchor = g.sub(lse_all, lse_pos);
        let mean = g.mean_all(per_anchor);
        total = Some(match total {
            None => mean,
            Some(t) => g.add(t, mean),
        });
    }
    Ok(total.unwrap())
}

/// Symmetric InfoNCE between global and granularity-masked user
/// representations; the denominator includes the positive pair.
pub fn masked_granularity_loss<S: Scalar>(
    g: &mut Graph<S>,
    u: Var,
    u_masked: Var,
    tau: f64,
) -> Result<Var> {
    let n = g.val(u).shape()[0];
    if n == 0 {
        return Err(Error::Empty("masked granularity loss needs users".into()));
    }
    let mut diag = vec![false; n * n];
    for i in 0..n {
        diag[i * n + i] = true;
    }
    let diag = Arc::new(diag);
    let all = Arc::new(vec![true; n * n]);
    let mut total: Option<Var> = None;
    for flip in [false, true] {
        let c = if flip {
            cosine_matrix(g, u_masked, u, tau)
        } else {
            cosine_matrix(g, u, u_masked, tau)
        };
        let lse_num = g.logsumexp_masked(c, diag.clone());
        let lse_den = g.logsumexp_masked(c, all.clone());
        let per_user = g.sub(lse_den, lse_num);
        let mean = g.mean_all(per_user);
        total = Some(match total {
            None => mean,
            Some(t) => g.add(t, mean),
        });
    }
    Ok(total.unwrap())
}

/// Item-level embeddings for alignment: e_sid uses the batch-mean alpha over
/// code levels; e_hid is the plain embedding row.
pub fn alignment_embeddings<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    alpha: Var,
    pool: &[ItemId],
    sids: &SidAssignment,
) -> (Var, Var) {
    let alpha_mean = g.mean_axis0(alpha);
    let mut e_sid: Option<Var> = None;
    for l in 0..pv.e_code.len() {
        let idx: Vec<usize> = pool
            .iter()
            .map(|&it| sids.code(it as usize, l) as usize)
            .collect();
        let rows = g.gather_rows(pv.e_code[l], Arc::new(idx));
        let w = g.index_elem(alpha_mean, l);
        let scaled = g.scale_by(rows, w);
        e_sid = Some(match e_sid {
            None => scaled,
            Some(a) => g.add(a, scaled),
        });
    }
    let hid_idx: Vec<usize> = pool.iter().map(|&it| it as usize).collect();
    let e_hid = g.gather_rows(pv.e_hid, Arc::new(hid_idx));
    (e_sid.expect("at least one level"), e_hid)
}

/// Weighted combination. `None` components were ablated away and contribute
/// neither value nor gradient; the report's total is derived from the parts
/// so the decomposition identity is exact.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    l_rec: Var,
    l_ca: Option<Var>,
    l_msg: Option<Var>,
    beta: f64,
    gamma: f64,
) -> Result<(Var, LossReport)> {
    if beta < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidArg(format!(
            "loss weights must be non-negative, got beta={beta} gamma={gamma}"
        )));
    }
    let mut report = LossReport {
        l_rec: g.val(l_rec).item().to_f64(),
        beta,
        gamma,
        ..LossReport::default()
    };
    let mut total = l_rec;
    if let Some(ca) = l_ca {
        report.l_ca = g.val(ca).item().to_f64();
        let scaled = g.scale(ca, S::from_f64(beta));
        total = g.add(total, scaled);
    }
    if let Some(msg) = l_msg {
        report.l_msg = g.val(msg).item().to_f64();
        let scaled = g.scale(msg, S::from_f64(gamma));
        total = g.add(total, scaled);
    }
    report.total = report.l_rec + beta * report.l_ca + gamma * report.l_msg;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::Mechanism;
    use crate::tensor::Tensor;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let n = rows.len();
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            data.extend(r);
        }
        Tensor::from_vec(&[n, d], data)
    }

    #[test]
    fn rec_loss_hand_values() {
        let mut g: Graph<f64> = Graph::new();
        // equal scores -> ln 2
        let pos = g.input(Tensor::full(&[1, 2], 0.3));
        let neg = g.input(Tensor::full(&[1, 2, 1], 0.3));
        let l = rec_loss(&mut g, pos, neg, Arc::new(vec![true, true]));
        assert!((g.val(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // huge positive margin -> loss ~ 0
        let pos = g.input(Tensor::full(&[1, 1], 50.0));
        let neg = g.input(Tensor::full(&[1, 1, 1], 0.0));
        let l = rec_loss(&mut g, pos, neg, Arc::new(vec![true]));
        assert!(g.val(l).item() < 1e-20);

        // single pair, margin 1 -> ln(1 + e^-1)
        let pos = g.input(Tensor::full(&[1, 1], 1.0));
        let neg = g.input(Tensor::full(&[1, 1, 1], 0.0));
        let l = rec_loss(&mut g, pos, neg, Arc::new(vec![true]));
        assert!((g.val(l).item() - (1.0f64 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((g.val(l).item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn pairwise_alignment_hand_value_at_unit_similarity() {
        // B=2, e_sid_i = e_hid_i, orthogonal across items, tau=1: the
        // negatives-only denominator gives exactly -1.0.
        let mut g: Graph<f64> = Graph::new();
        let e_sid = g.input(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let e_hid = g.input(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let l = pairwise_alignment_loss(&mut g, e_sid, e_hid, 1.0).unwrap();
        assert!((g.val(l).item() - (-1.0)).abs() < 1e-9);
    }

    #[test]
    fn pairwise_alignment_rejects_singletons() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::full(&[1, 3], 1.0));
        let b = g.input(Tensor::full(&[1, 3], 1.0));
        assert!(pairwise_alignment_loss(&mut g, a, b, 1.0).is_err());
    }

    #[test]
    fn contrastive_losses_scale_invariant() {
        let mut rng = Rng::new(1);
        let n = 5;
        let d = 4;
        let base: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let other: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let eval = |c: f64| -> (f64, f64) {
            let mut g: Graph<f64> = Graph::new();
            let a = g.input(Tensor::from_vec(&[n, d], base.iter().map(|&x| c * x).collect()));
            let b = g.input(Tensor::from_vec(
                &[n, d],
                other.iter().map(|&x| c * x).collect(),
            ));
            let l1 = pairwise_alignment_loss(&mut g, a, b, 0.5).unwrap();
            let l2 = masked_granularity_loss(&mut g, a, b, 0.5).unwrap();
            (g.val(l1).item(), g.val(l2).item())
        };
        let (a1, a2) = eval(1.0);
        let (b1, b2) = eval(3.7);
        assert!((a1 - b1).abs() < 1e-9);
        assert!((a2 - b2).abs() < 1e-9);
    }

    #[test]
    fn pairwise_alignment_large_tau_limit() {
        let mut rng = Rng::new(2);
        let n = 4;
        let d = 3;
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::randn(&[n, d], 1.0, &mut rng));
        let b = g.input(Tensor::randn(&[n, d], 1.0, &mut rng));
        let l = pairwise_alignment_loss(&mut g, a, b, 1e7).unwrap();
        assert!(
            (g.val(l).item() - (n as f64 - 1.0).ln()).abs() < 1e-5,
            "tau -> inf limit: {} vs {}",
            g.val(l).item(),
            (n as f64 - 1.0).ln()
        );
    }

    fn window_view() -> (Vec<ItemId>, Vec<bool>, Vec<usize>) {
        // One row: [7, 3, 9, 4, 5, 6]; anchor item 9 at position 2.
        (
            vec![7, 3, 9, 4, 5, 6],
            vec![true; 6],
            vec![5],
        )
    }

    #[test]
    fn positive_set_prefix_and_window() {
        let (seqs, pad, last) = window_view();
        let view = BatchView {
            b: 1,
            t: 6,
            seqs: &seqs,
            pad_mask: &pad,
            last_pos: &last,
        };
        // 10 items, L=2, K=4. Item 9 shares the level-1 prefix with item 5.
        let mut codes = Vec::new();
        for i in 0..10u32 {
            let c1 = if i == 9 || i == 5 { 2 } else { (i % 2) as u32 };
            codes.push(c1);
            codes.push((i % 4) as u32);
        }
        let sids = SidAssignment::new(Mechanism::Rq, 2, 4, codes);
        let pool = batch_item_pool(&view, 256, &mut Rng::new(3));
        assert_eq!(pool, vec![3, 4, 5, 6, 7, 9]);
        let anchor = pool.binary_search(&9).unwrap();

        // o = 0: no co-occurrence members.
        let set0 = build_positive_set(anchor, &pool, &view, &sids, 1, 0);
        let items0: Vec<ItemId> = set0.members.iter().map(|&j| pool[j]).collect();
        assert_eq!(items0, vec![5, 9]); // anchor + prefix sibling

        // o = 2 window around position 2 covers items {7, 3, 4, 5}.
        let set2 = build_positive_set(anchor, &pool, &view, &sids, 1, 2);
        let items2: Vec<ItemId> = set2.members.iter().map(|&j| pool[j]).collect();
        assert_eq!(items2, vec![3, 4, 5, 7, 9]);

        // Exhaustive window-scan oracle.
        let mut oracle: Vec<ItemId> = vec![9, 5]; // anchor + P_C
        for (t, &it) in seqs.iter().enumerate() {
            if it != 9 {
                continue;
            }
            for (t2, &other) in seqs.iter().enumerate() {
                if t2 != t && (t2 as i64 - t as i64).abs() <= 2 {
                    oracle.push(other);
                }
            }
        }
        oracle.sort_unstable();
        oracle.dedup();
        assert_eq!(items2, oracle);

        // p = L: full-tuple collision partners only.
        let set_full = build_positive_set(anchor, &pool, &view, &sids, 2, 0);
        let items_full: Vec<ItemId> = set_full.members.iter().map(|&j| pool[j]).collect();
        // item 5 shares level 1 (code 2) and level 2 (both i%4: 5%4=1, 9%4=1),
        // so it stays a collision partner here.
        assert_eq!(items_full, vec![5, 9]);
    }

    #[test]
    fn code_guided_full_positive_set_is_zero() {
        let mut rng = Rng::new(4);
        let n = 4;
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::randn(&[n, 3], 1.0, &mut rng));
        let b = g.input(Tensor::randn(&[n, 3], 1.0, &mut rng));
        let sets: Vec<PositiveSet> = (0..n)
            .map(|i| PositiveSet {
                anchor: i,
                members: (0..n).collect(),
            })
            .collect();
        let l = code_guided_alignment_loss(&mut g, a, b, &sets, 0.7).unwrap();
        assert!(g.val(l).item().abs() < 1e-12);
    }

    #[test]
    fn code_guided_singleton_sets_equal_similarities_give_2logb() {
        let n = 5;
        let mut g: Graph<f64> = Graph::new();
        // all embeddings identical: every cosine similarity is 1.
        let a = g.input(Tensor::full(&[n, 3], 0.4));
        let b = g.input(Tensor::full(&[n, 3], 0.9));
        let sets: Vec<PositiveSet> = (0..n)
            .map(|i| PositiveSet {
                anchor: i,
                members: vec![i],
            })
            .collect();
        let l = code_guided_alignment_loss(&mut g, a, b, &sets, 1.0).unwrap();
        assert!((g.val(l).item() - 2.0 * (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn code_guided_non_negative_and_superset_monotone() {
        let mut rng = Rng::new(5);
        let n = 6;
        for _ in 0..10 {
            let a_t = Tensor::<f64>::randn(&[n, 4], 1.0, &mut rng);
            let b_t = Tensor::<f64>::randn(&[n, 4], 1.0, &mut rng);
            let small: Vec<PositiveSet> = (0..n)
                .map(|i| PositiveSet {
                    anchor: i,
                    members: vec![i],
                })
                .collect();
            let mut big = small.clone();
            for s in big.iter_mut() {
                let extra = (s.anchor + 1) % n;
                s.members.push(extra);
                s.members.sort_unstable();
            }
            let eval = |sets: &[PositiveSet]| -> f64 {
                let mut g: Graph<f64> = Graph::new();
                let a = g.input(a_t.clone());
                let b = g.input(b_t.clone());
                let l = code_guided_alignment_loss(&mut g, a, b, sets, 0.3).unwrap();
                g.val(l).item()
            };
            let l_small = eval(&small);
            let l_big = eval(&big);
            assert!(l_small >= -1e-12, "loss must be non-negative: {l_small}");
            assert!(
                l_big <= l_small + 1e-9,
                "superset must not increase the loss: {l_big} vs {l_small}"
            );
        }
    }

    #[test]
    fn msg_singleton_batch_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::full(&[1, 4], 0.3));
        let um = g.input(Tensor::full(&[1, 4], -0.7));
        let l = masked_granularity_loss(&mut g, u, um, 0.5).unwrap();
        assert!(g.val(l).item().abs() < 1e-12);
    }

    #[test]
    fn msg_identical_views_give_2logn() {
        let n = 4;
        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::full(&[n, 3], 1.0));
        let um = g.input(Tensor::full(&[n, 3], 1.0));
        let l = masked_granularity_loss(&mut g, u, um, 1.0).unwrap();
        assert!((g.val(l).item() - 2.0 * (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn msg_hand_value_identity_cosine() {
        // N=2, cos matrix [[1,0],[0,1]], tau=1: total = 2 ln(1 + e^-1).
        let mut g: Graph<f64> = Graph::new();
        let u = g.input(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let um = g.input(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let l = masked_granularity_loss(&mut g, u, um, 1.0).unwrap();
        let expect = 2.0 * (1.0f64 + (-1.0f64).exp()).ln();
        assert!((g.val(l).item() - expect).abs() < 1e-9);
        assert!((g.val(l).item() - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn total_loss_combination_and_validation() {
        let mut g: Graph<f64> = Graph::new();
        let lr = g.input(Tensor::scalar(0.7));
        let lca = g.input(Tensor::scalar(0.2));
        let lmsg = g.input(Tensor::scalar(0.05));

        let (_, rep) = total_loss(&mut g, lr, Some(lca), Some(lmsg), 0.5, 0.3).unwrap();
        assert_eq!(rep.total, 0.7 + 0.5 * 0.2 + 0.3 * 0.05);
        assert_eq!(rep.total, rep.l_rec + rep.beta * rep.l_ca + rep.gamma * rep.l_msg);

        // Ablated terms contribute nothing.
        let lr2 = g.input(Tensor::scalar(0.7));
        let (tv, rep2) = total_loss(&mut g, lr2, None, None, 0.5, 0.3).unwrap();
        assert_eq!(rep2.total, 0.7);
        assert_eq!(g.val(tv).item(), 0.7);

        // Doubling beta doubles the contribution exactly.
        let lr3 = g.input(Tensor::scalar(0.7));
        let lca3 = g.input(Tensor::scalar(0.2));
        let (_, rep3) = total_loss(&mut g, lr3, Some(lca3), None, 1.0, 0.3).unwrap();
        assert_eq!(rep3.total - rep2.total, 2.0 * (rep.total - 0.3 * 0.05 - rep2.total));

        // Negative weights rejected.
        let lr4 = g.input(Tensor::scalar(0.7));
        assert!(total_loss(&mut g, lr4, None, None, -0.1, 0.0).is_err());
    }

    #[test]
    fn loss_gradients_match_fd() {
        let mut rng = Rng::new(6);
        let n = 4;
        let d = 3;
        let a0 = Tensor::<f64>::randn(&[n, d], 0.8, &mut rng);
        let b0 = Tensor::<f64>::randn(&[n, d], 0.8, &mut rng);
        let sets: Vec<PositiveSet> = (0..n)
            .map(|i| PositiveSet {
                anchor: i,
                members: if i % 2 == 0 { vec![i, (i + 1) % n] } else { vec![i] },
            })
            .collect();

        for which in 0..3 {
            let eval = |a: &Tensor<f64>,
                        b: &Tensor<f64>,
                        want_grad: bool|
             -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
                let mut g: Graph<f64> = Graph::new();
                let av = g.input(a.clone());
                let bv = g.input(b.clone());
                let l = match which {
                    0 => pairwise_alignment_loss(&mut g, av, bv, 0.4).unwrap(),
                    1 => code_guided_alignment_loss(&mut g, av, bv, &sets, 0.4).unwrap(),
                    _ => masked_granularity_loss(&mut g, av, bv, 0.4).unwrap(),
                };
                let val = g.val(l).item();
                if want_grad {
                    let store = g.backward(l);
                    (
                        val,
                        Some((
                            store.get_or_zeros(av, a.shape()).into_data(),
                            store.get_or_zeros(bv, b.shape()).into_data(),
                        )),
                    )
                } else {
                    (val, None)
                }
            };
            let (_, grads) = eval(&a0, &b0, true);
            let (ga, gb) = grads.unwrap();
            let h = 1e-6;
            for ci in 0..n * d {
                let mut ap = a0.clone();
                ap.data_mut()[ci] += h;
                let mut am = a0.clone();
                am.data_mut()[ci] -= h;
                let fd = (eval(&ap, &b0, false).0 - eval(&am, &b0, false).0) / (2.0 * h);
                let an = ga[ci];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "loss {which} grad a[{ci}]: {an} vs {fd}"
                );

                let mut bp = b0.clone();
                bp.data_mut()[ci] += h;
                let mut bm = b0.clone();
                bm.data_mut()[ci] -= h;
                let fd = (eval(&a0, &bp, false).0 - eval(&a0, &bm, false).0) / (2.0 * h);
                let an = gb[ci];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "loss {which} grad b[{ci}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn pool_caps_and_dedups() {
        let seqs: Vec<ItemId> = vec![5, 5, 9, 2, 2, 2, 7, 8];
        let pad = vec![true, true, true, true, true, true, false, true];
        let last = vec![3, 3];
        let view = BatchView {
            b: 2,
            t: 4,
            seqs: &seqs,
            pad_mask: &pad,
            last_pos: &last,
        };
        let pool = batch_item_pool(&view, 256, &mut Rng::new(7));
        assert_eq!(pool, vec![2, 5, 8, 9]); // 7 is padded out
        let capped = batch_item_pool(&view, 2, &mut Rng::new(7));
        assert_eq!(capped.len(), 2);
        assert!(capped.windows(2).all(|w| w[0] < w[1]));
    }
}
