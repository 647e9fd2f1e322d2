//! Training orchestration: initialization from semantic artifacts, the epoch
//! loop with validation-based early stopping, ablation switches, the
//! finite-difference gradient-check harness, and resumable checkpoints.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalSplit};
use crate::graph::Graph;
use crate::losses::{
    alignment_embeddings, batch_item_pool, build_positive_sets, code_guided_alignment_loss,
    masked_granularity_loss, pairwise_alignment_loss, rec_loss, total_loss, LossReport,
};
use crate::model::{
    self, forward_batch, to_vars, AblationFlags, BatchView, ModelDims, ModelParams, TrainMode,
    DROPOUT,
};
use crate::opt::{Adam, AdamConfig};
use crate::quantizer::{Codebooks, SidAssignment};
use crate::rng::Rng;
use crate::semantics::{reduce_dims, SemanticMatrix};
use crate::tensor::Tensor;

/// Flat training configuration; JSON round-trips reject unknown keys.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    #[serde(rename = "K")]
    pub k_codes: usize,
    /// Code-prefix depth for alignment positives.
    pub p: usize,
    /// Co-occurrence window for alignment positives.
    pub o: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_neg: usize,
    pub seed: u64,
    pub no_fn: bool,
    pub no_mca: bool,
    pub no_ca: bool,
    pub no_msg: bool,
    pub hid_only: bool,
    pub sid_only: bool,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            batch_size: 256,
            max_len: 50,
            d: 64,
            levels: 4,
            k_codes: 128,
            p: 3,
            o: 3,
            beta: 0.5,
            gamma: 0.3,
            tau: 0.1,
            n_neg: 1,
            seed: 42,
            no_fn: false,
            no_mca: false,
            no_ca: false,
            no_msg: false,
            hid_only: false,
            sid_only: false,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if self.p == 0 || self.p > self.levels {
            return Err(Error::Config(format!(
                "p={} must lie in [1, L={}]",
                self.p, self.levels
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_neg == 0 {
            return Err(Error::Config(
                "epochs, batch_size and n_neg must be positive".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.hid_only && self.sid_only {
            return Err(Error::Config(
                "hid_only and sid_only are mutually exclusive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            no_fn: self.no_fn,
            no_mca: self.no_mca,
            no_ca: self.no_ca,
            no_msg: self.no_msg,
            hid_only: self.hid_only,
            sid_only: self.sid_only,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let s = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in s.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

/// Per-step loss record, mirrored into the training-log CSV.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub l_rec: f64,
    pub l_ca: f64,
    pub l_msg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_h10: f64,
    pub val_n10: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_n10: f64,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,l_rec,l_ca,l_msg,total\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                s.step, s.l_rec, s.l_ca, s.l_msg, s.total
            ));
        }
        out
    }
}

/// Initialize model parameters from the prepared artifacts: HID rows from the
/// reduced semantic matrix, code tables from the quantizer codebooks
/// (truncated or zero-padded to d), everything else small-random.
pub fn init_model(
    split: &SplitDataset,
    semantic: &SemanticMatrix,
    sids: &SidAssignment,
    codebooks: &Codebooks,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    if semantic.n_items() != split.n_items {
        return Err(Error::Shape(format!(
            "semantic matrix has {} rows, catalog has {}",
            semantic.n_items(),
            split.n_items
        )));
    }
    if sids.n_items() != split.n_items {
        return Err(Error::Shape(format!(
            "sid assignment covers {} items, catalog has {}",
            sids.n_items(),
            split.n_items
        )));
    }
    if sids.levels != cfg.levels || sids.k_codes != cfg.k_codes {
        return Err(Error::Shape(format!(
            "sid assignment is {}x{}, config expects {}x{}",
            sids.levels, sids.k_codes, cfg.levels, cfg.k_codes
        )));
    }
    if codebooks.levels != cfg.levels || codebooks.k != cfg.k_codes {
        return Err(Error::Shape(format!(
            "codebooks are {}x{}, config expects {}x{}",
            codebooks.levels, codebooks.k, cfg.levels, cfg.k_codes
        )));
    }
    let dims = ModelDims::new(split.n_items, cfg.d, cfg.levels, cfg.k_codes, cfg.max_len)?;
    let mut params = ModelParams::<f32>::random(&dims, rng);
    let d = cfg.d;

    // HID table: dimension-reduced semantic rows; pad row stays zero. The
    // hid_only ablation is the plain collaborative baseline, so it keeps the
    // random table instead of borrowing semantic structure through the init.
    if !cfg.hid_only {
        let reduced = reduce_dims(semantic, cfg.d.min(semantic.dim()))?;
        for i in 0..split.n_items {
            let row = reduced.row(i);
            let dst = &mut params.e_hid.data_mut()[i * d..(i + 1) * d];
            for slot in dst.iter_mut() {
                *slot = 0.0;
            }
            dst[..row.len()].copy_from_slice(row);
        }
    }
    for v in params.e_hid.data_mut()[split.n_items * d..].iter_mut() {
        *v = 0.0;
    }

    // Code tables from the trained codebooks: truncated-SVD projection when
    // d_code > d, zero-padding when d_code < d.
    for l in 0..cfg.levels {
        let table = &codebooks.tables[l];
        let dc = codebooks.d_code;
        let k = codebooks.k;
        let dst = params.e_code[l].data_mut();
        if dc == d {
            dst.copy_from_slice(table.data());
        } else if dc > d {
            let as_matrix = SemanticMatrix::new(k, dc, table.data().to_vec())?;
            let proj = reduce_dims(&as_matrix, d)?;
            dst.copy_from_slice(&proj.data);
        } else {
            for c in 0..k {
                for j in 0..d {
                    dst[c * d + j] = if j < dc { table.data()[c * dc + j] } else { 0.0 };
                }
            }
        }
    }
    Ok(params)
}

/// Mutable training state; the whole struct round-trips through checkpoints.
pub struct TrainerState {
    pub cfg: TrainConfig,
    pub dims: ModelDims,
    pub params: ModelParams<f32>,
    pub adam: Adam<f32>,
    pub rng: Rng,
    pub epoch: usize,
    pub step: usize,
    pub sids: SidAssignment,
}

impl TrainerState {
    pub fn new(
        split: &SplitDataset,
        cfg: &TrainConfig,
        semantic: &SemanticMatrix,
        sids: &SidAssignment,
        codebooks: &Codebooks,
    ) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let params = init_model(split, semantic, sids, codebooks, cfg, &mut rng)?;
        let dims = params.dims();
        let shapes: Vec<Vec<usize>> = params
            .named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                clip_norm: Some(5.0),
                ..AdamConfig::default()
            },
            &shape_refs,
        );
        Ok(TrainerState {
            cfg: cfg.clone(),
            dims,
            params,
            adam,
            rng,
            epoch: 0,
            step: 0,
            sids: sids.clone(),
        })
    }

    /// One optimization step over a batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let cfg = &self.cfg;
        let flags = cfg.flags();
        let view = BatchView {
            b: batch.batch_size,
            t: batch.max_len,
            seqs: &batch.seqs,
            pad_mask: &batch.pad_mask,
            last_pos: &batch.last_pos,
        };
        let msg_level = if flags.no_msg {
            None
        } else {
            Some(self.rng.below(cfg.levels))
        };
        let pool = if flags.no_ca {
            Vec::new()
        } else {
            batch_item_pool(&view, 256, &mut self.rng)
        };

        let mut g: Graph<f32> = Graph::new();
        let pv = to_vars(&mut g, &self.params);
        let mut mode = TrainMode {
            dropout: DROPOUT,
            rng: &mut self.rng,
            msg_level,
        };
        let out = forward_batch(
            &mut g,
            &pv,
            &self.dims,
            &view,
            &self.sids,
            &flags,
            Some(&mut mode),
        );

        let (pos, neg) = model::training_scores(
            &mut g,
            &pv,
            &out,
            &self.dims,
            &view,
            &batch.targets,
            &batch.negatives,
            batch.n_neg,
            &self.sids,
            &flags,
        );
        let valid = Arc::new(batch.pad_mask.clone());
        let l_rec = rec_loss(&mut g, pos, neg, valid);

        let l_ca = if flags.no_ca || pool.is_empty() {
            None
        } else {
            let sets = build_positive_sets(&pool, &view, &self.sids, cfg.p, cfg.o);
            let (e_sid, e_hid) = alignment_embeddings(&mut g, &pv, out.alpha, &pool, &self.sids);
            Some(code_guided_alignment_loss(
                &mut g, e_sid, e_hid, &sets, cfg.tau,
            )?)
        };
        let l_msg = match out.u_sid_masked {
            Some(masked) if !flags.no_msg => {
                let u = out.u_sid.expect("sid branch present with msg");
                Some(masked_granularity_loss(&mut g, u, masked, cfg.tau)?)
            }
            _ => None,
        };

        let (total, report) = total_loss(&mut g, l_rec, l_ca, l_msg, cfg.beta, cfg.gamma)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.step,
                msg: format!(
                    "loss is not finite: rec={} ca={} msg={}",
                    report.l_rec, report.l_ca, report.l_msg
                ),
            });
        }

        let store = g.backward(total);
        let grad_holder = pv.map_named(&mut |_, v| {
            let shape = g.val(*v).shape().to_vec();
            store.get_or_zeros(*v, &shape)
        });
        let mut grads: Vec<Tensor<f32>> = Vec::new();
        grad_holder.map_named(&mut |_, t| grads.push(t.clone()));
        let mut param_refs: Vec<&mut Tensor<f32>> = self
            .params
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        self.adam.step(&mut param_refs, &grads);
        self.step += 1;
        Ok(report)
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ModelParams<f32>,
    pub log: TrainLog,
}

/// Full training run: epoch loop over shuffled batches, per-epoch validation
/// (H@10 / N@10 with 99 sampled negatives), early stopping on validation
/// N@10, best-epoch snapshot returned.
pub fn train(
    split: &SplitDataset,
    cfg: &TrainConfig,
    semantic: &SemanticMatrix,
    sids: &SidAssignment,
    codebooks: &Codebooks,
) -> Result<TrainOutcome> {
    let mut state = TrainerState::new(split, cfg, semantic, sids, codebooks)?;
    let partition = crate::data::popularity_partition(split, 0.2, 5)?;
    let mut log = TrainLog::default();
    let mut best_n10 = f64::NEG_INFINITY;
    let mut best_params = state.params.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let epoch_rng = Rng::new(cfg.seed).fork(0x5eed_0000 + epoch as u64);
        let batches: Vec<Batch> =
            make_batches(split, cfg.max_len, cfg.batch_size, cfg.n_neg, epoch_rng).collect();
        let mut epoch_total = 0.0;
        for batch in &batches {
            let report = state.train_step(batch)?;
            epoch_total += report.total;
            log.steps.push(StepLog {
                step: state.step - 1,
                l_rec: report.l_rec,
                l_ca: report.l_ca,
                l_msg: report.l_msg,
                total: report.total,
            });
        }
        let train_loss = epoch_total / batches.len().max(1) as f64;

        let val = evaluate_model(
            &state.params,
            &state.sids,
            split,
            &partition,
            EvalSplit::Valid,
            Some(99),
            cfg.seed,
            &cfg.flags(),
        )?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_h10: val.overall.hit_at_10,
            val_n10: val.overall.ndcg_at_10,
        });
        if val.overall.ndcg_at_10 > best_n10 {
            best_n10 = val.overall.ndcg_at_10;
            best_params = state.params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    log.best_epoch = best_epoch;
    log.best_val_n10 = best_n10;
    Ok(TrainOutcome {
        params: best_params,
        log,
    })
}

// ---- gradient-check harness ----

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Which objective the checker differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckLoss {
    Rec,
    CodeAlign,
    PairAlign,
    Msg,
    Total,
}

impl GradCheckLoss {
    pub fn name(self) -> &'static str {
        match self {
            GradCheckLoss::Rec => "rec",
            GradCheckLoss::CodeAlign => "code_align",
            GradCheckLoss::PairAlign => "pair_align",
            GradCheckLoss::Msg => "msg",
            GradCheckLoss::Total => "total",
        }
    }
}

/// The tiny deterministic instance used by the gradient suite: 2 users,
/// T = 4, L = 2, K = 4, d = 8, 6 items.
pub struct TinyInstance {
    pub dims: ModelDims,
    pub params: ModelParams<f64>,
    pub sids: SidAssignment,
    pub seqs: Vec<u32>,
    pub pad: Vec<bool>,
    pub last: Vec<usize>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
    pub msg_level: usize,
    pub cfg: TrainConfig,
}

pub fn tiny_instance(seed: u64) -> TinyInstance {
    let dims = ModelDims::new(6, 8, 2, 4, 4).expect("tiny dims");
    let mut rng = Rng::new(seed);
    let params = ModelParams::<f64>::random(&dims, &mut rng);
    let codes: Vec<u32> = (0..dims.n_items * dims.levels)
        .map(|_| rng.below(dims.k_codes) as u32)
        .collect();
    let sids = SidAssignment::new(crate::quantizer::Mechanism::Rq, 2, 4, codes);
    let pad = dims.pad_id() as u32;
    TinyInstance {
        dims,
        params,
        sids,
        seqs: vec![pad, 0, 1, 2, 3, 4, 5, 1],
        pad: vec![false, true, true, true, true, true, true, true],
        last: vec![3, 3],
        targets: vec![pad, 1, 2, 3, 4, 5, 1, 0],
        negatives: vec![pad, 4, 5, 0, 1, 2, 3, 5],
        msg_level: 1,
        cfg: TrainConfig {
            d: 8,
            levels: 2,
            k_codes: 4,
            max_len: 4,
            p: 1,
            o: 1,
            beta: 0.5,
            gamma: 0.3,
            tau: 0.5,
            ..TrainConfig::default()
        },
    }
}

/// Dropout-free f64 loss for the tiny instance. The same graph code as the
/// trainer, so its gradients are what the optimizer consumes.
pub fn tiny_loss(inst: &TinyInstance, params: &ModelParams<f64>, which: GradCheckLoss) -> f64 {
    tiny_loss_with_grads(inst, params, which, None)
}

pub fn tiny_loss_with_grads(
    inst: &TinyInstance,
    params: &ModelParams<f64>,
    which: GradCheckLoss,
    grads_out: Option<&mut Vec<(String, Tensor<f64>)>>,
) -> f64 {
    let view = BatchView {
        b: 2,
        t: 4,
        seqs: &inst.seqs,
        pad_mask: &inst.pad,
        last_pos: &inst.last,
    };
    let flags = AblationFlags::default();
    let cfg = &inst.cfg;
    let mut g: Graph<f64> = Graph::new();
    let pv = to_vars(&mut g, params);
    // Dropout off; fixed mask level for determinism.
    let mut frozen_rng = Rng::new(7);
    let mut mode = TrainMode {
        dropout: 0.0,
        rng: &mut frozen_rng,
        msg_level: Some(inst.msg_level),
    };
    let out = forward_batch(
        &mut g,
        &pv,
        &inst.dims,
        &view,
        &inst.sids,
        &flags,
        Some(&mut mode),
    );

    let need_rec = matches!(which, GradCheckLoss::Rec | GradCheckLoss::Total);
    let need_ca = matches!(which, GradCheckLoss::CodeAlign | GradCheckLoss::Total);
    let need_msg = matches!(which, GradCheckLoss::Msg | GradCheckLoss::Total);

    let l_rec = if need_rec {
        let (pos, neg) = model::training_scores(
            &mut g,
            &pv,
            &out,
            &inst.dims,
            &view,
            &inst.targets,
            &inst.negatives,
            1,
            &inst.sids,
            &flags,
        );
        Some(rec_loss(&mut g, pos, neg, Arc::new(inst.pad.clone())))
    } else {
        None
    };
    let l_ca = if need_ca {
        let mut pool_rng = Rng::new(11);
        let pool = batch_item_pool(&view, 256, &mut pool_rng);
        let sets = build_positive_sets(&pool, &view, &inst.sids, cfg.p, cfg.o);
        let (e_sid, e_hid) = alignment_embeddings(&mut g, &pv, out.alpha, &pool, &inst.sids);
        Some(code_guided_alignment_loss(&mut g, e_sid, e_hid, &sets, cfg.tau).expect("ca loss"))
    } else {
        None
    };
    let l_msg = if need_msg {
        let u = out.u_sid.expect("sid branch");
        let masked = out.u_sid_masked.expect("masked view");
        Some(masked_granularity_loss(&mut g, u, masked, cfg.tau).expect("msg loss"))
    } else {
        None
    };
    let l_pair = if matches!(which, GradCheckLoss::PairAlign) {
        let mut pool_rng = Rng::new(11);
        let pool = batch_item_pool(&view, 256, &mut pool_rng);
        let (e_sid, e_hid) = alignment_embeddings(&mut g, &pv, out.alpha, &pool, &inst.sids);
        Some(pairwise_alignment_loss(&mut g, e_sid, e_hid, cfg.tau).expect("pair loss"))
    } else {
        None
    };

    let loss = match which {
        GradCheckLoss::Rec => l_rec.unwrap(),
        GradCheckLoss::CodeAlign => l_ca.unwrap(),
        GradCheckLoss::PairAlign => l_pair.unwrap(),
        GradCheckLoss::Msg => l_msg.unwrap(),
        GradCheckLoss::Total => {
            let (total, _) = total_loss(&mut g, l_rec.unwrap(), l_ca, l_msg, cfg.beta, cfg.gamma)
                .expect("total loss");
            total
        }
    };
    let val = g.val(loss).item();
    if let Some(out_grads) = grads_out {
        let store = g.backward(loss);
        let named = pv.map_named(&mut |name, v| (name, *v));
        named.map_named(&mut |_, (name, v)| {
            let shape = g.val(*v).shape().to_vec();
            out_grads.push((name.clone(), store.get_or_zeros(*v, &shape)));
        });
    }
    val
}

/// Analytic gradients vs central finite differences (h = 1e-3) on the f64
/// tiny instance, for at least `coords_per_group` random coordinates of every
/// parameter tensor. Any group above `tol` relative error fails.
pub fn grad_check(
    which: GradCheckLoss,
    coords_per_group: usize,
    tol: f64,
    seed: u64,
) -> GradCheckReport {
    let inst = tiny_instance(seed);
    let mut grads = Vec::new();
    tiny_loss_with_grads(&inst, &inst.params, which, Some(&mut grads));
    let grad_map: std::collections::HashMap<String, Tensor<f64>> = grads.into_iter().collect();

    let h = 1e-3;
    let mut rng = Rng::new(seed ^ 0xabcd);
    let mut groups = Vec::new();
    let mut overall = 0.0f64;
    for (name, base) in inst.params.named() {
        let mut worst = 0.0f64;
        let mut worst_coord = 0usize;
        for _ in 0..coords_per_group {
            let ci = rng.below(base.numel());
            let eval = |delta: f64| -> f64 {
                let mut p2 = inst.params.clone();
                for (n, t) in p2.named_mut() {
                    if n == name {
                        t.data_mut()[ci] += delta;
                    }
                }
                tiny_loss(&inst, &p2, which)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grad_map[&name].data()[ci];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_coord = ci;
            }
        }
        overall = overall.max(worst);
        groups.push(GradCheckGroup {
            name: name.clone(),
            max_rel_err: worst,
            worst_coord,
        });
    }
    GradCheckReport {
        loss: which.name().to_string(),
        groups,
        max_rel_err: overall,
        passed: overall <= tol,
    }
}

// ---- checkpoints ----

const CKPT_OPTS: &[u8; 4] = b"OPTS";
const CKPT_RNGS: &[u8; 4] = b"RNGS";
const CKPT_META: &[u8; 4] = b"META";

pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    pub rng_state: [u64; 4],
    pub epoch: usize,
    pub step: usize,
    pub config_hash: u64,
}

/// H2CK model section plus optimizer, generator, and meta sections.
pub fn save_checkpoint(state: &TrainerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let res = (|| -> std::io::Result<()> {
        model::write_params(&state.params, &mut w)?;
        w.write_all(CKPT_OPTS)?;
        w.write_all(&state.adam.t.to_le_bytes())?;
        w.write_all(&(state.adam.m.len() as u32).to_le_bytes())?;
        let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(&state.adam.m) {
            model::write_tensor_section(&mut w, &format!("m.{name}"), t)?;
        }
        for (name, t) in names.iter().zip(&state.adam.v) {
            model::write_tensor_section(&mut w, &format!("v.{name}"), t)?;
        }
        w.write_all(CKPT_RNGS)?;
        for s in state.rng.state() {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(CKPT_META)?;
        w.write_all(&(state.epoch as u64).to_le_bytes())?;
        w.write_all(&(state.step as u64).to_le_bytes())?;
        w.write_all(&state.cfg.hash().to_le_bytes())?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated u64: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|e| Error::Format(format!("truncated section header: {e}")))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected section {:?}, found {:02x?}",
            String::from_utf8_lossy(magic),
            m
        )));
    }
    Ok(())
}

pub fn parse_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let params = model::read_params(&mut r)?;
    expect_magic(&mut r, CKPT_OPTS)?;
    let adam_t = read_u64(&mut r)?;
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)
        .map_err(|e| Error::Format(format!("truncated count: {e}")))?;
    let count = u32::from_le_bytes(cnt) as usize;
    let expected = params.named().len();
    if count != expected {
        return Err(Error::Format(format!(
            "optimizer tracks {count} tensors, model has {expected}"
        )));
    }
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut adam_m = Vec::with_capacity(count);
    for name in &names {
        let (got, t) = model::read_tensor_section(&mut r)?;
        if got != format!("m.{name}") {
            return Err(Error::Format(format!(
                "optimizer section order mismatch: {got} vs m.{name}"
            )));
        }
        adam_m.push(t);
    }
    let mut adam_v = Vec::with_capacity(count);
    for name in &names {
        let (got, t) = model::read_tensor_section(&mut r)?;
        if got != format!("v.{name}") {
            return Err(Error::Format(format!(
                "optimizer section order mismatch: {got} vs v.{name}"
            )));
        }
        adam_v.push(t);
    }
    expect_magic(&mut r, CKPT_RNGS)?;
    let mut rng_state = [0u64; 4];
    for s in rng_state.iter_mut() {
        *s = read_u64(&mut r)?;
    }
    expect_magic(&mut r, CKPT_META)?;
    let epoch = read_u64(&mut r)? as usize;
    let step = read_u64(&mut r)? as usize;
    let config_hash = read_u64(&mut r)?;
    Ok(Checkpoint {
        params,
        adam_t,
        adam_m,
        adam_v,
        rng_state,
        epoch,
        step,
        config_hash,
    })
}

/// Load and re-hydrate a trainer. Refuses to resume when the supplied config
/// hashes differently from the one the checkpoint was written under.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    sids: &SidAssignment,
) -> Result<TrainerState> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt = parse_checkpoint(BufReader::new(f))?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint was written with config hash {:016x}, supplied config hashes to {:016x}",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    let dims = ckpt.params.dims();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: Some(5.0),
            ..AdamConfig::default()
        },
        &ckpt.adam_m
            .iter()
            .map(|t| t.shape())
            .collect::<Vec<_>>(),
    );
    adam.t = ckpt.adam_t;
    adam.m = ckpt.adam_m;
    adam.v = ckpt.adam_v;
    Ok(TrainerState {
        cfg: cfg.clone(),
        dims,
        params: ckpt.params,
        adam,
        rng: Rng::from_state(ckpt.rng_state),
        epoch: ckpt.epoch,
        step: ckpt.step,
        sids: sids.clone(),
    })
}
