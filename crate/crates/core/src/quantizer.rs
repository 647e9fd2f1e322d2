//! Vector quantizers over a semantic matrix: plain VQ, product quantization,
//! and a residual-quantized autoencoder. All three assign every item an
//! L-tuple semantic ID; collisions are kept as-is so the collision and
//! utilization statistics stay meaningful.

#![allow(clippy::needless_range_loop, clippy::large_enum_variant)]

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::opt::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::semantics::SemanticMatrix;
use crate::tensor::Tensor;

pub const SCBK_MAGIC: &[u8; 4] = b"SCBK";
pub const SRQW_MAGIC: &[u8; 4] = b"SRQW";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Vq,
    Pq,
    Rq,
}

impl Mechanism {
    pub fn tag(self) -> u8 {
        match self {
            Mechanism::Vq => 0,
            Mechanism::Pq => 1,
            Mechanism::Rq => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Mechanism::Vq),
            1 => Ok(Mechanism::Pq),
            2 => Ok(Mechanism::Rq),
            other => Err(Error::Format(format!("unknown mechanism tag {other}"))),
        }
    }
}

/// Per-level K x d_code codebooks. VQ has a single level over the whole
/// vector; PQ splits the input into `levels` contiguous sub-vectors of size
/// d_in / levels; RQ quantizes residuals in a shared d_code space.
#[derive(Clone, Debug)]
pub struct Codebooks {
    pub mechanism: Mechanism,
    pub levels: usize,
    pub k: usize,
    pub d_code: usize,
    /// levels tensors of shape [k, d_code].
    pub tables: Vec<Tensor<f32>>,
}

impl Codebooks {
    pub fn table(&self, level: usize) -> &Tensor<f32> {
        &self.tables[level]
    }
}

/// Codes for one item.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticId(pub Vec<u32>);

#[derive(Clone, Debug)]
pub struct SidAssignment {
    pub mechanism: Mechanism,
    pub levels: usize,
    pub k_codes: usize,
    /// n_items * levels codes, row-major.
    codes: Vec<u32>,
    pub collision_rate: f64,
    /// Distinct used tuples / K^levels.
    pub utilization_rate: f64,
    /// Total items / K^levels (the companion accounting of capacity use).
    pub utilization_rate_items: f64,
}

impl SidAssignment {
    pub fn new(mechanism: Mechanism, levels: usize, k_codes: usize, codes: Vec<u32>) -> Self {
        assert!(levels > 0 && k_codes > 0);
        assert_eq!(codes.len() % levels, 0);
        let mut a = SidAssignment {
            mechanism,
            levels,
            k_codes,
            codes,
            collision_rate: 0.0,
            utilization_rate: 0.0,
            utilization_rate_items: 0.0,
        };
        a.collision_rate = collision_rate(&a);
        a.utilization_rate = utilization_rate(&a);
        a.utilization_rate_items = a.n_items() as f64 / (a.k_codes as f64).powi(a.levels as i32);
        a
    }

    pub fn n_items(&self) -> usize {
        self.codes.len() / self.levels
    }

    pub fn codes_of(&self, item: usize) -> &[u32] {
        &self.codes[item * self.levels..(item + 1) * self.levels]
    }

    pub fn code(&self, item: usize, level: usize) -> u32 {
        self.codes[item * self.levels + level]
    }
}

/// Fraction of items whose full L-tuple is shared with at least one other
/// item.
pub fn collision_rate(a: &SidAssignment) -> f64 {
    let n = a.n_items();
    if n == 0 {
        return 0.0;
    }
    let mut groups: HashMap<&[u32], usize> = HashMap::new();
    for i in 0..n {
        *groups.entry(a.codes_of(i)).or_insert(0) += 1;
    }
    let colliding: usize = groups.values().filter(|&&c| c >= 2).sum();
    colliding as f64 / n as f64
}

/// Distinct used tuples over combination capacity K^L, computed in floating
/// point so large K^L cannot overflow.
pub fn utilization_rate(a: &SidAssignment) -> f64 {
    let n = a.n_items();
    if n == 0 {
        return 0.0;
    }
    let mut distinct: HashMap<&[u32], ()> = HashMap::new();
    for i in 0..n {
        distinct.insert(a.codes_of(i), ());
    }
    distinct.len() as f64 / (a.k_codes as f64).powi(a.levels as i32)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn sq_dist_f64(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters are re-seeded to
/// the point currently farthest from its assigned centroid. Deterministic
/// given the generator.
pub fn kmeans(
    points: &[f32],
    m: usize,
    d: usize,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    if k == 0 {
        return Err(Error::InvalidArg("k must be positive".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArg("kmeans needs at least one point".into()));
    }
    assert_eq!(points.len(), m * d);
    let row = |i: usize| &points[i * d..(i + 1) * d];

    // k-means++ seeding.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.below(m);
    centroids.extend(row(first).iter().map(|&x| x as f64));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() < k * d {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.below(m)
        } else {
            let x = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if x < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c_idx = centroids.len() / d;
        centroids.extend(row(pick).iter().map(|&x| x as f64));
        for i in 0..m {
            let nd = sq_dist_f64(row(i), &centroids[c_idx * d..(c_idx + 1) * d]);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; m];
    for _ in 0..iters {
        // Assignment, ties to the lower centroid index.
        for i in 0..m {
            let mut best = f64::INFINITY;
            let mut best_c = 0;
            for c in 0..k {
                let dist = sq_dist_f64(row(i), &centroids[c * d..(c + 1) * d]);
                if dist < best {
                    best = dist;
                    best_c = c;
                }
            }
            assign[i] = best_c;
        }
        // Update.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += points[i * d + j] as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed to the point farthest from its centroid.
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da =
                            sq_dist_f64(row(a), &centroids[assign[a] * d..(assign[a] + 1) * d]);
                        let db =
                            sq_dist_f64(row(b), &centroids[assign[b] * d..(assign[b] + 1) * d]);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                for j in 0..d {
                    centroids[c * d + j] = points[far * d + j] as f64;
                }
                assign[far] = c;
            } else {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centroids.iter().map(|&x| x as f32).collect())
}

fn nearest_code(x: &[f32], table: &Tensor<f32>) -> u32 {
    let k = table.shape()[0];
    let d = table.shape()[1];
    let mut best = f64::INFINITY;
    let mut best_c = 0u32;
    for c in 0..k {
        let dist = sq_dist(x, &table.data()[c * d..(c + 1) * d]);
        if dist < best {
            best = dist;
            best_c = c as u32;
        }
    }
    best_c
}

/// Greedy residual quantization: at each level pick the nearest code for the
/// current residual and subtract it. Ties break toward the lower code index.
pub fn quantize_residual(x: &[f32], cb: &Codebooks) -> Result<(SemanticId, Vec<f32>)> {
    if x.len() != cb.d_code {
        return Err(Error::Shape(format!(
            "input has dim {}, codebooks expect {}",
            x.len(),
            cb.d_code
        )));
    }
    let mut residual: Vec<f32> = x.to_vec();
    let mut codes = Vec::with_capacity(cb.levels);
    for l in 0..cb.levels {
        let c = nearest_code(&residual, &cb.tables[l]);
        codes.push(c);
        let d = cb.d_code;
        let row = &cb.tables[l].data()[c as usize * d..(c as usize + 1) * d];
        for (r, &e) in residual.iter_mut().zip(row) {
            *r -= e;
        }
    }
    Ok((SemanticId(codes), residual))
}

/// Plain VQ: one k-means codebook over whole vectors, L = 1.
pub fn train_vq(m: &SemanticMatrix, k: usize, iters: usize, rng: &mut Rng) -> Result<Codebooks> {
    let table = kmeans(m.data(), m.n_items(), m.dim(), k, iters, rng)?;
    Ok(Codebooks {
        mechanism: Mechanism::Vq,
        levels: 1,
        k,
        d_code: m.dim(),
        tables: vec![Tensor::from_vec(&[k, m.dim()], table)],
    })
}

/// Product quantization: the input splits into `levels` contiguous
/// sub-vectors, each with its own k-means codebook.
pub fn train_pq(
    m: &SemanticMatrix,
    levels: usize,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<Codebooks> {
    if levels == 0 || !m.dim().is_multiple_of(levels) {
        return Err(Error::InvalidArg(format!(
            "input dim {} is not divisible by {} levels",
            m.dim(),
            levels
        )));
    }
    let sub = m.dim() / levels;
    let n = m.n_items();
    let mut tables = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut pts = Vec::with_capacity(n * sub);
        for i in 0..n {
            pts.extend_from_slice(&m.row(i)[l * sub..(l + 1) * sub]);
        }
        let table = kmeans(&pts, n, sub, k, iters, rng)?;
        tables.push(Tensor::from_vec(&[k, sub], table));
    }
    Ok(Codebooks {
        mechanism: Mechanism::Pq,
        levels,
        k,
        d_code: sub,
        tables,
    })
}

#[derive(Clone, Debug)]
pub struct RqVaeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta_vq: f32,
    pub d_code: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub kmeans_iters: usize,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            epochs: 200,
            lr: 1e-3,
            beta_vq: 0.25,
            d_code: 32,
            hidden: 128,
            batch_size: 256,
            kmeans_iters: 25,
        }
    }
}

/// Residual-quantized autoencoder: 2-layer tanh MLP encoder/decoder around
/// greedy residual quantization with straight-through gradients.
#[derive(Clone, Debug)]
pub struct RqVaeModel {
    pub d_in: usize,
    pub hidden: usize,
    pub enc_w1: Tensor<f32>,
    pub enc_b1: Tensor<f32>,
    pub enc_w2: Tensor<f32>,
    pub enc_b2: Tensor<f32>,
    pub dec_w1: Tensor<f32>,
    pub dec_b1: Tensor<f32>,
    pub dec_w2: Tensor<f32>,
    pub dec_b2: Tensor<f32>,
    pub codebooks: Codebooks,
    pub beta_vq: f32,
}

/// Per-epoch loss decomposition from RQ-VAE training.
#[derive(Clone, Debug, Default)]
pub struct RqVaeReport {
    pub recon: Vec<f64>,
    pub codebook: Vec<f64>,
    pub commit: Vec<f64>,
    pub total: Vec<f64>,
}

impl RqVaeModel {
    fn new(d_in: usize, l: usize, k: usize, cfg: &RqVaeConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        let dc = cfg.d_code;
        let s_in = (1.0 / d_in as f64).sqrt();
        let s_h = (1.0 / h as f64).sqrt();
        let s_dc = (1.0 / dc as f64).sqrt();
        RqVaeModel {
            d_in,
            hidden: h,
            enc_w1: Tensor::randn(&[d_in, h], s_in, rng),
            enc_b1: Tensor::zeros(&[h]),
            enc_w2: Tensor::randn(&[h, dc], s_h, rng),
            enc_b2: Tensor::zeros(&[dc]),
            dec_w1: Tensor::randn(&[dc, h], s_dc, rng),
            dec_b1: Tensor::zeros(&[h]),
            dec_w2: Tensor::randn(&[h, d_in], s_h, rng),
            dec_b2: Tensor::zeros(&[d_in]),
            codebooks: Codebooks {
                mechanism: Mechanism::Rq,
                levels: l,
                k,
                d_code: dc,
                tables: vec![Tensor::zeros(&[k, dc]); l],
            },
            beta_vq: cfg.beta_vq,
        }
    }

    /// Plain (graph-free) encoder forward for a row-major [n, d_in] slice.
    pub fn encode(&self, rows: &[f32], n: usize) -> Vec<f32> {
        let h = self.hidden;
        let dc = self.codebooks.d_code;
        let mut out = vec![0.0f32; n * dc];
        for i in 0..n {
            let x = &rows[i * self.d_in..(i + 1) * self.d_in];
            let mut hid = vec![0.0f32; h];
            for (j, hv) in hid.iter_mut().enumerate() {
                let mut acc = self.enc_b1.data()[j] as f64;
                for (f, &xv) in x.iter().enumerate() {
                    acc += xv as f64 * self.enc_w1.data()[f * h + j] as f64;
                }
                *hv = (acc as f32).tanh();
            }
            for j in 0..dc {
                let mut acc = self.enc_b2.data()[j] as f64;
                for (f, &hv) in hid.iter().enumerate() {
                    acc += hv as f64 * self.enc_w2.data()[f * dc + j] as f64;
                }
                out[i * dc + j] = acc as f32;
            }
        }
        out
    }

    fn param_list(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v: Vec<&mut Tensor<f32>> = vec![
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
        ];
        v.extend(self.codebooks.tables.iter_mut());
        v
    }
}

/// Train the RQ-VAE on the raw semantic matrix. Codebooks are initialized by
/// per-level k-means on first-batch residuals; codes unused over a full epoch
/// are re-seeded to random encoder outputs.
pub fn train_rqvae(
    m: &SemanticMatrix,
    l: usize,
    k: usize,
    cfg: &RqVaeConfig,
    rng: &mut Rng,
) -> Result<(RqVaeModel, RqVaeReport)> {
    if l == 0 || k == 0 {
        return Err(Error::InvalidArg("L and K must be positive".into()));
    }
    let n = m.n_items();
    let mut model = RqVaeModel::new(m.dim(), l, k, cfg, rng);

    // Codebook init: k-means per level over first-batch residuals. Row 0 of
    // every level stays pinned to the zero vector so the greedy step can
    // always keep a residual unchanged instead of growing it; this makes
    // residual norms non-increasing for every input.
    let first_n = n.min(cfg.batch_size.max(k));
    let z0 = model.encode(m.data(), first_n);
    let dc = cfg.d_code;
    let mut residuals = z0;
    for level in 0..l {
        let mut table = vec![0.0f32; k * dc];
        if k > 1 {
            let cents = kmeans(&residuals, first_n, dc, k - 1, cfg.kmeans_iters, rng)?;
            table[dc..].copy_from_slice(&cents);
        }
        model.codebooks.tables[level] = Tensor::from_vec(&[k, dc], table);
        for i in 0..first_n {
            let c = nearest_code(
                &residuals[i * dc..(i + 1) * dc],
                &model.codebooks.tables[level],
            ) as usize;
            let trow: Vec<f32> =
                model.codebooks.tables[level].data()[c * dc..(c + 1) * dc].to_vec();
            let r = &mut residuals[i * dc..(i + 1) * dc];
            for (rv, &cv) in r.iter_mut().zip(&trow) {
                *rv -= cv;
            }
        }
    }

    let shapes: Vec<Vec<usize>> = {
        let mut mm = model.clone();
        mm.param_list().iter().map(|t| t.shape().to_vec()).collect()
    };
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::<f32>::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: None,
            ..AdamConfig::default()
        },
        &shape_refs,
    );

    let mut report = RqVaeReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut used = vec![vec![false; k]; l];
        let mut ep = [0.0f64; 4]; // recon, codebook, commit, total
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * m.dim());
            for &i in chunk {
                x.extend_from_slice(m.row(i));
            }
            let losses = rqvae_step(&mut model, &x, b, &mut adam, &mut used)?;
            if !losses.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: batches,
                    msg: "rq-vae loss is not finite".into(),
                });
            }
            for (acc, v) in ep.iter_mut().zip(&losses) {
                *acc += v;
            }
            batches += 1;
        }
        report.recon.push(ep[0] / batches as f64);
        report.codebook.push(ep[1] / batches as f64);
        report.commit.push(ep[2] / batches as f64);
        report.total.push(ep[3] / batches as f64);

        // Dead-code reset: unused codes move to random encoder outputs. The
        // pinned zero code (index 0) is never reseeded.
        for level in 0..l {
            for c in 1..k {
                if used[level][c] {
                    continue;
                }
                let i = rng.below(n);
                let z = model.encode(m.row(i), 1);
                model.codebooks.tables[level].data_mut()[c * dc..(c + 1) * dc]
                    .copy_from_slice(&z);
            }
        }
    }
    Ok((model, report))
}

/// One optimization step; returns (recon, codebook, commit, total).
fn rqvae_step(
    model: &mut RqVaeModel,
    x: &[f32],
    b: usize,
    adam: &mut Adam<f32>,
    used: &mut [Vec<bool>],
) -> Result<[f64; 4]> {
    let d_in = model.d_in;
    let dc = model.codebooks.d_code;
    let l = model.codebooks.levels;
    let beta = model.beta_vq;

    let mut g: Graph<f32> = Graph::new();
    let x_t = Tensor::from_vec(&[b, d_in], x.to_vec());
    let xv = g.input(x_t);
    let enc_w1 = g.input(model.enc_w1.clone());
    let enc_b1 = g.input(model.enc_b1.clone());
    let enc_w2 = g.input(model.enc_w2.clone());
    let enc_b2 = g.input(model.enc_b2.clone());
    let dec_w1 = g.input(model.dec_w1.clone());
    let dec_b1 = g.input(model.dec_b1.clone());
    let dec_w2 = g.input(model.dec_w2.clone());
    let dec_b2 = g.input(model.dec_b2.clone());
    let cb_vars: Vec<_> = model
        .codebooks
        .tables
        .iter()
        .map(|t| g.input(t.clone()))
        .collect();

    // Encoder.
    let h1 = g.matmul(xv, enc_w1);
    let h1 = g.add_bias(h1, enc_b1);
    let h1 = g.tanh(h1);
    let z = g.matmul(h1, enc_w2);
    let z = g.add_bias(z, enc_b2);

    // Greedy quantization on current values (codes chosen outside the graph).
    let z_val = g.val(z).clone();
    let mut codes: Vec<Vec<usize>> = vec![Vec::with_capacity(b); l];
    let mut residual_vals: Vec<Tensor<f32>> = Vec::with_capacity(l);
    let mut cum = vec![0.0f32; b * dc];
    let mut resid = z_val.data().to_vec();
    for level in 0..l {
        residual_vals.push(Tensor::from_vec(&[b, dc], resid.clone()));
        let table = &model.codebooks.tables[level];
        for i in 0..b {
            let c = nearest_code(&resid[i * dc..(i + 1) * dc], table) as usize;
            codes[level].push(c);
            used[level][c] = true;
            let row = &table.data()[c * dc..(c + 1) * dc];
            for j in 0..dc {
                resid[i * dc + j] -= row[j];
                cum[i * dc + j] += row[j];
            }
        }
    }
    let zq_val = Tensor::from_vec(&[b, dc], cum);

    // Straight-through reconstruction path: forward value is z_q, gradient
    // flows through z unchanged.
    let zq_const = g.input(zq_val);
    let offset = g.sub(zq_const, z);
    let offset = g.stop_grad(offset);
    let z_st = g.add(z, offset);

    let h2 = g.matmul(z_st, dec_w1);
    let h2 = g.add_bias(h2, dec_b1);
    let h2 = g.tanh(h2);
    let x_hat = g.matmul(h2, dec_w2);
    let x_hat = g.add_bias(x_hat, dec_b2);

    let diff = g.sub(x_hat, xv);
    let sq = g.mul(diff, diff);
    let recon = g.mean_all(sq);

    // Codebook loss pulls chosen rows toward frozen residuals; commitment
    // pulls the encoder toward frozen codebook rows.
    let mut cb_loss = None;
    let mut commit_loss = None;
    for level in 0..l {
        let idx = std::sync::Arc::new(codes[level].clone());
        let chosen = g.gather_rows(cb_vars[level], idx);
        let r_const = g.input(residual_vals[level].clone());
        let dcb = g.sub(chosen, r_const);
        let dcb2 = g.mul(dcb, dcb);
        let lcb = g.mean_all(dcb2);
        cb_loss = Some(match cb_loss {
            None => lcb,
            Some(acc) => g.add(acc, lcb),
        });

        // Residual as a function of z: z minus the frozen prefix sum.
        let prefix: Tensor<f32> = {
            let mut p = vec![0.0f32; b * dc];
            for ll in 0..level {
                let table = &model.codebooks.tables[ll];
                for i in 0..b {
                    let c = codes[ll][i];
                    for j in 0..dc {
                        p[i * dc + j] += table.data()[c * dc + j];
                    }
                }
            }
            Tensor::from_vec(&[b, dc], p)
        };
        let prefix_c = g.input(prefix);
        let r_var = g.sub(z, prefix_c);
        let chosen_frozen: Tensor<f32> = {
            let table = &model.codebooks.tables[level];
            let mut p = vec![0.0f32; b * dc];
            for i in 0..b {
                let c = codes[level][i];
                p[i * dc..(i + 1) * dc].copy_from_slice(&table.data()[c * dc..(c + 1) * dc]);
            }
            Tensor::from_vec(&[b, dc], p)
        };
        let chosen_c = g.input(chosen_frozen);
        let dcm = g.sub(r_var, chosen_c);
        let dcm2 = g.mul(dcm, dcm);
        let lcm = g.mean_all(dcm2);
        commit_loss = Some(match commit_loss {
            None => lcm,
            Some(acc) => g.add(acc, lcm),
        });
    }
    let cb_loss = cb_loss.unwrap();
    let commit_loss = commit_loss.unwrap();
    let commit_scaled = g.scale(commit_loss, beta);
    let t1 = g.add(recon, cb_loss);
    let total = g.add(t1, commit_scaled);

    let out = [
        g.val(recon).item() as f64,
        g.val(cb_loss).item() as f64,
        g.val(commit_loss).item() as f64,
        g.val(total).item() as f64,
    ];

    let store = g.backward(total);
    let param_vars = [
        enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2, dec_b2,
    ];
    let mut grads: Vec<Tensor<f32>> = Vec::with_capacity(8 + l);
    for (v, t) in param_vars.iter().zip([
        &model.enc_w1,
        &model.enc_b1,
        &model.enc_w2,
        &model.enc_b2,
        &model.dec_w1,
        &model.dec_b1,
        &model.dec_w2,
        &model.dec_b2,
    ]) {
        grads.push(store.get_or_zeros(*v, t.shape()));
    }
    for (v, t) in cb_vars.iter().zip(&model.codebooks.tables) {
        let mut gcb = store.get_or_zeros(*v, t.shape());
        // Row 0 is the pinned zero code; it never trains.
        for slot in gcb.data_mut()[..dc].iter_mut() {
            *slot = 0.0;
        }
        grads.push(gcb);
    }
    let mut params = model.param_list();
    adam.step(&mut params, &grads);
    Ok(out)
}

/// Trained quantizer of any mechanism.
#[derive(Clone, Debug)]
pub enum TrainedQuantizer {
    Vq(Codebooks),
    Pq(Codebooks),
    Rq(RqVaeModel),
}

impl TrainedQuantizer {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            TrainedQuantizer::Vq(_) => Mechanism::Vq,
            TrainedQuantizer::Pq(_) => Mechanism::Pq,
            TrainedQuantizer::Rq(_) => Mechanism::Rq,
        }
    }

    pub fn codebooks(&self) -> &Codebooks {
        match self {
            TrainedQuantizer::Vq(c) | TrainedQuantizer::Pq(c) => c,
            TrainedQuantizer::Rq(m) => &m.codebooks,
        }
    }
}

/// Assign every item its L-tuple semantic ID. A pure function of the trained
/// quantizer and the matrix.
pub fn assign_sids(q: &TrainedQuantizer, m: &SemanticMatrix) -> Result<SidAssignment> {
    let n = m.n_items();
    if n == 0 {
        return Err(Error::Empty("semantic matrix has no rows".into()));
    }
    match q {
        TrainedQuantizer::Vq(cb) => {
            if cb.d_code != m.dim() {
                return Err(Error::Shape(format!(
                    "vq codebook dim {} != matrix dim {}",
                    cb.d_code,
                    m.dim()
                )));
            }
            let codes: Vec<u32> = (0..n)
                .map(|i| nearest_code(m.row(i), &cb.tables[0]))
                .collect();
            Ok(SidAssignment::new(Mechanism::Vq, 1, cb.k, codes))
        }
        TrainedQuantizer::Pq(cb) => {
            if cb.d_code * cb.levels != m.dim() {
                return Err(Error::Shape(format!(
                    "pq expects dim {} (levels {} x {}), matrix has {}",
                    cb.d_code * cb.levels,
                    cb.levels,
                    cb.d_code,
                    m.dim()
                )));
            }
            let sub = cb.d_code;
            let mut codes = Vec::with_capacity(n * cb.levels);
            for i in 0..n {
                for l in 0..cb.levels {
                    codes.push(nearest_code(
                        &m.row(i)[l * sub..(l + 1) * sub],
                        &cb.tables[l],
                    ));
                }
            }
            Ok(SidAssignment::new(Mechanism::Pq, cb.levels, cb.k, codes))
        }
        TrainedQuantizer::Rq(model) => {
            if model.d_in != m.dim() {
                return Err(Error::Shape(format!(
                    "rq encoder expects dim {}, matrix has {}",
                    model.d_in,
                    m.dim()
                )));
            }
            let z = model.encode(m.data(), n);
            let dc = model.codebooks.d_code;
            let mut codes = Vec::with_capacity(n * model.codebooks.levels);
            for i in 0..n {
                let (sid, _) = quantize_residual(&z[i * dc..(i + 1) * dc], &model.codebooks)?;
                codes.extend_from_slice(&sid.0);
            }
            Ok(SidAssignment::new(
                Mechanism::Rq,
                model.codebooks.levels,
                model.codebooks.k,
                codes,
            ))
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32_q(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated field: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// SCBK binary: magic, u8 mechanism, u32 L, u32 K, u32 d_code, then
/// L*K*d_code f32 table data; RQ models append an SRQW section with the
/// encoder/decoder weights and the commitment weight.
pub fn write_quantizer(q: &TrainedQuantizer, mut w: impl Write) -> std::io::Result<()> {
    let cb = q.codebooks();
    w.write_all(SCBK_MAGIC)?;
    w.write_all(&[q.mechanism().tag()])?;
    write_u32(&mut w, cb.levels as u32)?;
    write_u32(&mut w, cb.k as u32)?;
    write_u32(&mut w, cb.d_code as u32)?;
    for t in &cb.tables {
        write_f32s(&mut w, t.data())?;
    }
    if let TrainedQuantizer::Rq(m) = q {
        w.write_all(SRQW_MAGIC)?;
        write_u32(&mut w, m.d_in as u32)?;
        write_u32(&mut w, m.hidden as u32)?;
        w.write_all(&m.beta_vq.to_le_bytes())?;
        for t in [
            &m.enc_w1, &m.enc_b1, &m.enc_w2, &m.enc_b2, &m.dec_w1, &m.dec_b1, &m.dec_w2,
            &m.dec_b2,
        ] {
            write_f32s(&mut w, t.data())?;
        }
    }
    Ok(())
}

pub fn save_quantizer(q: &TrainedQuantizer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_quantizer(q, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_quantizer(mut r: impl Read) -> Result<TrainedQuantizer> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &magic != SCBK_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected SCBK",
            magic
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|e| Error::Format(format!("truncated mechanism: {e}")))?;
    let mech = Mechanism::from_tag(tag[0])?;
    let levels = read_u32_q(&mut r)? as usize;
    let k = read_u32_q(&mut r)? as usize;
    let d_code = read_u32_q(&mut r)? as usize;
    if levels == 0 || k == 0 || d_code == 0 {
        return Err(Error::Format("degenerate codebook shape".into()));
    }
    if levels
        .checked_mul(k)
        .and_then(|x| x.checked_mul(d_code))
        .is_none_or(|x| x > (1 << 30))
    {
        return Err(Error::Format("codebook too large".into()));
    }
    if mech == Mechanism::Vq && levels != 1 {
        return Err(Error::Format(format!("vq must have L=1, found {levels}")));
    }
    let mut tables = Vec::with_capacity(levels);
    for _ in 0..levels {
        let data = read_f32s(&mut r, k * d_code)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("codebook contains NaN/Inf".into()));
        }
        tables.push(Tensor::from_vec(&[k, d_code], data));
    }
    let cb = Codebooks {
        mechanism: mech,
        levels,
        k,
        d_code,
        tables,
    };
    match mech {
        Mechanism::Vq => Ok(TrainedQuantizer::Vq(cb)),
        Mechanism::Pq => Ok(TrainedQuantizer::Pq(cb)),
        Mechanism::Rq => {
            let mut m2 = [0u8; 4];
            r.read_exact(&mut m2)
                .map_err(|e| Error::Format(format!("missing SRQW section: {e}")))?;
            if &m2 != SRQW_MAGIC {
                return Err(Error::Format("expected SRQW section after tables".into()));
            }
            let d_in = read_u32_q(&mut r)? as usize;
            let hidden = read_u32_q(&mut r)? as usize;
            if d_in == 0 || hidden == 0 || d_in > (1 << 20) || hidden > (1 << 20) {
                return Err(Error::Format("degenerate encoder shape".into()));
            }
            let mut beta = [0u8; 4];
            r.read_exact(&mut beta)
                .map_err(|e| Error::Format(format!("truncated beta: {e}")))?;
            let beta_vq = f32::from_le_bytes(beta);
            if !beta_vq.is_finite() {
                return Err(Error::Format("beta_vq is not finite".into()));
            }
            let enc_w1 = Tensor::from_vec(&[d_in, hidden], read_f32s(&mut r, d_in * hidden)?);
            let enc_b1 = Tensor::from_vec(&[hidden], read_f32s(&mut r, hidden)?);
            let enc_w2 = Tensor::from_vec(&[hidden, d_code], read_f32s(&mut r, hidden * d_code)?);
            let enc_b2 = Tensor::from_vec(&[d_code], read_f32s(&mut r, d_code)?);
            let dec_w1 = Tensor::from_vec(&[d_code, hidden], read_f32s(&mut r, d_code * hidden)?);
            let dec_b1 = Tensor::from_vec(&[hidden], read_f32s(&mut r, hidden)?);
            let dec_w2 = Tensor::from_vec(&[hidden, d_in], read_f32s(&mut r, hidden * d_in)?);
            let dec_b2 = Tensor::from_vec(&[d_in], read_f32s(&mut r, d_in)?);
            Ok(TrainedQuantizer::Rq(RqVaeModel {
                d_in,
                hidden,
                enc_w1,
                enc_b1,
                enc_w2,
                enc_b2,
                dec_w1,
                dec_b1,
                dec_w2,
                dec_b2,
                codebooks: cb,
                beta_vq,
            }))
        }
    }
}

pub fn load_quantizer(path: impl AsRef<Path>) -> Result<TrainedQuantizer> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_quantizer(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_points(rng: &mut Rng) -> (Vec<f32>, usize, usize) {
        // Two well-separated 2-d Gaussian blobs, 10 points each.
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.push((rng.normal() * 0.2 - 5.0) as f32);
            pts.push((rng.normal() * 0.2) as f32);
        }
        for _ in 0..10 {
            pts.push((rng.normal() * 0.2 + 5.0) as f32);
            pts.push((rng.normal() * 0.2) as f32);
        }
        (pts, 20, 2)
    }

    #[test]
    fn kmeans_k_equals_m_returns_points() {
        let mut rng = Rng::new(1);
        let pts: Vec<f32> = (0..12)
            .map(|i| i as f32 + (rng.uniform() as f32) * 0.01)
            .collect();
        let cents = kmeans(&pts, 4, 3, 4, 30, &mut rng).unwrap();
        let mut got: Vec<Vec<f32>> = cents.chunks(3).map(|c| c.to_vec()).collect();
        let mut want: Vec<Vec<f32>> = pts.chunks(3).map(|c| c.to_vec()).collect();
        let key = |v: &Vec<f32>| (v[0] * 1000.0) as i64;
        got.sort_by_key(key);
        want.sort_by_key(key);
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let mut rng = Rng::new(2);
        let pts: Vec<f32> = (0..30).map(|_| rng.normal() as f32).collect();
        let cents = kmeans(&pts, 10, 3, 1, 10, &mut rng).unwrap();
        for j in 0..3 {
            let mean: f32 = (0..10).map(|i| pts[i * 3 + j]).sum::<f32>() / 10.0;
            assert!((cents[j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn kmeans_two_blobs_matches_exhaustive_partition_oracle() {
        let mut rng = Rng::new(3);
        let (pts, m, d) = blob_points(&mut rng);
        let cents = kmeans(&pts, m, d, 2, 50, &mut rng).unwrap();
        let sse = |assign: &dyn Fn(usize) -> usize| -> f64 {
            let mut sums = vec![0.0f64; 2 * d];
            let mut counts = [0usize; 2];
            for i in 0..m {
                let c = assign(i);
                counts[c] += 1;
                for j in 0..d {
                    sums[c * d + j] += pts[i * d + j] as f64;
                }
            }
            let mut total = 0.0;
            for i in 0..m {
                let c = assign(i);
                if counts[c] == 0 {
                    continue;
                }
                for j in 0..d {
                    let mu = sums[c * d + j] / counts[c] as f64;
                    total += (pts[i * d + j] as f64 - mu).powi(2);
                }
            }
            total
        };
        // Exhaustive over all 2-partitions (up to symmetry): 2^(m-1) masks.
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << (m - 1)) {
            let f = |i: usize| -> usize {
                if i == 0 {
                    0
                } else {
                    ((mask >> (i - 1)) & 1) as usize
                }
            };
            best = best.min(sse(&f));
        }
        let km_assign = |i: usize| -> usize {
            let a = sq_dist(&pts[i * d..(i + 1) * d], &cents[0..d]);
            let b = sq_dist(&pts[i * d..(i + 1) * d], &cents[d..2 * d]);
            usize::from(b < a)
        };
        let km_sse = sse(&km_assign);
        assert!(
            (km_sse - best).abs() < 1e-6 * best.max(1.0),
            "kmeans SSE {km_sse} vs exhaustive best {best}"
        );
    }

    fn toy_codebooks(l: usize, k: usize, d: usize, rng: &mut Rng) -> Codebooks {
        let tables = (0..l).map(|_| Tensor::randn(&[k, d], 1.0, rng)).collect();
        Codebooks {
            mechanism: Mechanism::Rq,
            levels: l,
            k,
            d_code: d,
            tables,
        }
    }

    #[test]
    fn residual_exact_match_and_zero_codes() {
        let mut rng = Rng::new(4);
        let mut cb = toy_codebooks(3, 4, 2, &mut rng);
        // Zero vector at index 0 of levels 2 and 3.
        for l in 1..3 {
            cb.tables[l].data_mut()[0] = 0.0;
            cb.tables[l].data_mut()[1] = 0.0;
        }
        let x: Vec<f32> = cb.tables[0].data()[2 * 2..3 * 2].to_vec();
        let (sid, resid) = quantize_residual(&x, &cb).unwrap();
        assert_eq!(sid.0[0], 2);
        assert_eq!(sid.0[1], 0);
        assert_eq!(sid.0[2], 0);
        assert!(resid.iter().all(|&r| r.abs() < 1e-6));
    }

    #[test]
    fn residual_l1_is_plain_vq() {
        let mut rng = Rng::new(5);
        let cb = toy_codebooks(1, 8, 3, &mut rng);
        for _ in 0..20 {
            let x: Vec<f32> = (0..3).map(|_| rng.normal() as f32).collect();
            let (sid, _) = quantize_residual(&x, &cb).unwrap();
            assert_eq!(sid.0.len(), 1);
            assert_eq!(sid.0[0], nearest_code(&x, &cb.tables[0]));
        }
    }

    /// Independent greedy oracle: full scan per level, written differently.
    fn greedy_oracle(x: &[f32], cb: &Codebooks) -> (Vec<u32>, Vec<f64>) {
        let mut r: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut codes = Vec::new();
        let mut norms = Vec::new();
        norms.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
        for l in 0..cb.levels {
            let t = &cb.tables[l];
            let d = cb.d_code;
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..cb.k {
                let dist: f64 = (0..d)
                    .map(|j| (r[j] - t.data()[c * d + j] as f64).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            codes.push(best.1 as u32);
            for (j, rv) in r.iter_mut().enumerate() {
                *rv -= cb.tables[l].data()[best.1 * d + j] as f64;
            }
            norms.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        (codes, norms)
    }

    #[test]
    fn residual_matches_greedy_oracle() {
        let mut rng = Rng::new(6);
        let cb = toy_codebooks(2, 4, 2, &mut rng);
        for _ in 0..50 {
            let x: Vec<f32> = (0..2).map(|_| rng.normal() as f32).collect();
            let (sid, resid) = quantize_residual(&x, &cb).unwrap();
            let (codes, norms) = greedy_oracle(&x, &cb);
            assert_eq!(sid.0, codes);
            let final_norm: f64 = resid
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((final_norm - norms.last().unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn residual_norms_non_increasing_with_pinned_zero_code() {
        // Trained codebooks always carry a zero code at index 0, which makes
        // greedy residual norms non-increasing for any input whatsoever.
        let mut rng = Rng::new(61);
        let mut cb = toy_codebooks(3, 5, 4, &mut rng);
        for t in cb.tables.iter_mut() {
            for v in t.data_mut()[..4].iter_mut() {
                *v = 0.0;
            }
        }
        for _ in 0..200 {
            let x: Vec<f32> = (0..4).map(|_| (rng.normal() * 3.0) as f32).collect();
            let (_, norms) = greedy_oracle(&x, &cb);
            for w in norms.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "norms {:?}", norms);
            }
        }
    }

    #[test]
    fn collision_rate_definition() {
        let a = SidAssignment::new(Mechanism::Rq, 2, 8, vec![1, 2, 1, 2, 3, 4]);
        assert!((a.collision_rate - 2.0 / 3.0).abs() < 1e-12);
        let b = SidAssignment::new(Mechanism::Rq, 2, 8, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(b.collision_rate, 0.0);
    }

    #[test]
    fn utilization_rate_definition() {
        // 3 distinct tuples, L=2, K=2 -> 3/4.
        let a = SidAssignment::new(Mechanism::Rq, 2, 2, vec![0, 0, 0, 1, 1, 0]);
        assert!((a.utilization_rate - 0.75).abs() < 1e-12);
        // One tuple used, L=4, K=128 -> 128^-4.
        let b = SidAssignment::new(Mechanism::Rq, 4, 128, vec![5, 6, 7, 8]);
        assert!((b.utilization_rate - 128.0f64.powi(-4)).abs() < 1e-18);
    }

    #[test]
    fn collision_zero_iff_distinct_count_matches() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let n = 30;
            let codes: Vec<u32> = (0..n * 2).map(|_| rng.below(4) as u32).collect();
            let a = SidAssignment::new(Mechanism::Rq, 2, 4, codes);
            let distinct = (a.utilization_rate * (a.k_codes as f64).powi(2)).round() as usize;
            assert_eq!(a.collision_rate == 0.0, distinct == n);
        }
    }

    #[test]
    fn identical_rows_identical_sids_all_mechanisms() {
        let mut rng = Rng::new(8);
        let row: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&row);
        }
        for _ in 0..10 {
            for _ in 0..8 {
                data.push(rng.normal() as f32);
            }
        }
        let m = SemanticMatrix::new(16, 8, data).unwrap();

        let vq = TrainedQuantizer::Vq(train_vq(&m, 4, 20, &mut Rng::new(1)).unwrap());
        let pq = TrainedQuantizer::Pq(train_pq(&m, 2, 4, 20, &mut Rng::new(1)).unwrap());
        let cfg = RqVaeConfig {
            epochs: 5,
            d_code: 4,
            hidden: 16,
            ..RqVaeConfig::default()
        };
        let (rq_model, _) = train_rqvae(&m, 2, 4, &cfg, &mut Rng::new(1)).unwrap();
        let rq = TrainedQuantizer::Rq(rq_model);

        for q in [&vq, &pq, &rq] {
            let a = assign_sids(q, &m).unwrap();
            for i in 1..6 {
                assert_eq!(a.codes_of(0), a.codes_of(i), "{:?}", q.mechanism());
            }
            let b = assign_sids(q, &m).unwrap();
            for i in 0..16 {
                assert_eq!(a.codes_of(i), b.codes_of(i));
            }
        }
    }

    #[test]
    fn pq_requires_divisible_dim() {
        let m = SemanticMatrix::new(4, 6, vec![0.1; 24]).unwrap();
        assert!(train_pq(&m, 4, 2, 5, &mut Rng::new(1)).is_err());
        assert!(train_pq(&m, 3, 2, 5, &mut Rng::new(1)).is_ok());
    }

    #[test]
    fn pq_exact_subvector_match() {
        // Vector (1,0,0,1); both sub-codebooks contain the exact sub-vectors.
        let tables = vec![
            Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.3, 0.3]),
            Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.0, 1.0]),
        ];
        let cb = Codebooks {
            mechanism: Mechanism::Pq,
            levels: 2,
            k: 2,
            d_code: 2,
            tables,
        };
        let m = SemanticMatrix::new(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = assign_sids(&TrainedQuantizer::Pq(cb), &m).unwrap();
        assert_eq!(a.codes_of(0), &[0, 1]);
    }

    fn clustered_matrix(
        n_clusters: usize,
        per_cluster: usize,
        d: usize,
        noise: f64,
        rng: &mut Rng,
    ) -> (SemanticMatrix, Vec<u32>) {
        let mut cents = vec![0.0f64; n_clusters * d];
        for c in cents.iter_mut() {
            *c = rng.normal();
        }
        let n = n_clusters * per_cluster;
        let mut data = vec![0.0f32; n * d];
        let mut labels = vec![0u32; n];
        for i in 0..n {
            let c = i % n_clusters;
            labels[i] = c as u32;
            for j in 0..d {
                data[i * d + j] = (cents[c * d + j] + noise * rng.normal()) as f32;
            }
        }
        (SemanticMatrix::new(n, d, data).unwrap(), labels)
    }

    #[test]
    fn rqvae_reconstructs_noise_free_clusters() {
        let mut rng = Rng::new(9);
        let (m, _) = clustered_matrix(8, 6, 8, 0.0, &mut rng);
        let cfg = RqVaeConfig {
            epochs: 300,
            lr: 3e-3,
            d_code: 8,
            hidden: 64,
            batch_size: 64,
            ..RqVaeConfig::default()
        };
        let (model, report) = train_rqvae(&m, 2, 8, &cfg, &mut Rng::new(10)).unwrap();
        let final_recon = *report.recon.last().unwrap();
        assert!(
            final_recon < 1e-3,
            "reconstruction MSE {final_recon} after training"
        );
        // Loss trends down: last quarter mean below first quarter mean.
        let q = report.total.len() / 4;
        let head: f64 = report.total[..q].iter().sum::<f64>() / q as f64;
        let tail: f64 = report.total[report.total.len() - q..].iter().sum::<f64>() / q as f64;
        assert!(tail < head, "loss did not trend down: {head} -> {tail}");
        let _ = model;
    }

    #[test]
    fn rqvae_beta_zero_kills_commit_term_contribution() {
        let mut rng = Rng::new(11);
        let (m, _) = clustered_matrix(4, 4, 6, 0.05, &mut rng);
        let cfg = RqVaeConfig {
            epochs: 3,
            beta_vq: 0.0,
            d_code: 4,
            hidden: 16,
            ..RqVaeConfig::default()
        };
        let (_, report) = train_rqvae(&m, 2, 4, &cfg, &mut Rng::new(12)).unwrap();
        for e in 0..report.total.len() {
            let expect = report.recon[e] + report.codebook[e];
            // The graph accumulates in f32; allow only f32 addition rounding.
            assert!(
                (report.total[e] - expect).abs() < 1e-6 * expect.abs().max(1.0),
                "epoch {e}: total {} vs recon+codebook {}",
                report.total[e],
                expect
            );
        }
    }

    #[test]
    fn straight_through_gradient_matches_frozen_code_fd() {
        // Freeze codes and the quantization offset at the base point, then
        // check d(recon)/d(x) against central differences in f64.
        let mut rng = Rng::new(13);
        let d_in = 4;
        let dc = 3;
        let h = 8;
        let b = 2;
        let l = 2;
        let to64 = |t: &Tensor<f32>| t.cast::<f64>();
        let model = {
            let cfg = RqVaeConfig {
                d_code: dc,
                hidden: h,
                ..RqVaeConfig::default()
            };
            let mut m = RqVaeModel::new(d_in, l, 4, &cfg, &mut rng);
            for t in m.codebooks.tables.iter_mut() {
                *t = Tensor::randn(&[4, dc], 0.5, &mut rng);
            }
            m
        };
        let x0: Vec<f64> = (0..b * d_in).map(|_| rng.normal() * 0.5).collect();

        // Base-point codes and straight-through offset.
        let x0_f32: Vec<f32> = x0.iter().map(|&v| v as f32).collect();
        let z0 = model.encode(&x0_f32, b);
        let mut resid = z0.clone();
        let mut zq = vec![0.0f32; b * dc];
        for level in 0..l {
            for i in 0..b {
                let c = nearest_code(
                    &resid[i * dc..(i + 1) * dc],
                    &model.codebooks.tables[level],
                ) as usize;
                for j in 0..dc {
                    let e = model.codebooks.tables[level].data()[c * dc + j];
                    resid[i * dc + j] -= e;
                    zq[i * dc + j] += e;
                }
            }
        }
        let offset: Vec<f64> = zq
            .iter()
            .zip(&z0)
            .map(|(&q, &z)| q as f64 - z as f64)
            .collect();

        let forward = |x: &[f64], g_out: Option<&mut Vec<f64>>| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(Tensor::from_vec(&[b, d_in], x.to_vec()));
            let w1 = g.input(to64(&model.enc_w1));
            let b1 = g.input(to64(&model.enc_b1));
            let w2 = g.input(to64(&model.enc_w2));
            let b2 = g.input(to64(&model.enc_b2));
            let dw1 = g.input(to64(&model.dec_w1));
            let db1 = g.input(to64(&model.dec_b1));
            let dw2 = g.input(to64(&model.dec_w2));
            let db2 = g.input(to64(&model.dec_b2));
            let h1 = g.matmul(xv, w1);
            let h1 = g.add_bias(h1, b1);
            let h1 = g.tanh(h1);
            let z = g.matmul(h1, w2);
            let z = g.add_bias(z, b2);
            let off = g.input(Tensor::from_vec(&[b, dc], offset.clone()));
            let z_st = g.add(z, off);
            let h2 = g.matmul(z_st, dw1);
            let h2 = g.add_bias(h2, db1);
            let h2 = g.tanh(h2);
            let xh = g.matmul(h2, dw2);
            let xh = g.add_bias(xh, db2);
            let diff = g.sub(xh, xv);
            let sq = g.mul(diff, diff);
            let loss = g.mean_all(sq);
            let val = g.val(loss).item();
            if let Some(out) = g_out {
                let store = g.backward(loss);
                *out = store.get(xv).unwrap().data().to_vec();
            }
            val
        };

        let mut analytic = Vec::new();
        forward(&x0, Some(&mut analytic));
        let h_fd = 1e-3;
        for ci in 0..b * d_in {
            let mut xp = x0.clone();
            xp[ci] += h_fd;
            let mut xm = x0.clone();
            xm[ci] -= h_fd;
            let fd = (forward(&xp, None) - forward(&xm, None)) / (2.0 * h_fd);
            let an = analytic[ci];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                (an - fd).abs() / denom < 1e-3,
                "coord {ci}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn level1_purity_on_clean_clusters() {
        let mut rng = Rng::new(14);
        let (m, labels) = clustered_matrix(20, 10, 16, 0.0, &mut rng);
        let cfg = RqVaeConfig {
            epochs: 40,
            d_code: 8,
            hidden: 64,
            ..RqVaeConfig::default()
        };
        let (model, _) = train_rqvae(&m, 4, 32, &cfg, &mut Rng::new(15)).unwrap();
        let a = assign_sids(&TrainedQuantizer::Rq(model), &m).unwrap();
        // Majority-cluster fraction per level-1 code, item-weighted.
        let mut per_code: HashMap<u32, HashMap<u32, usize>> = HashMap::new();
        for i in 0..a.n_items() {
            *per_code
                .entry(a.code(i, 0))
                .or_default()
                .entry(labels[i])
                .or_insert(0) += 1;
        }
        let mut pure = 0usize;
        for counts in per_code.values() {
            pure += counts.values().max().unwrap();
        }
        let purity = pure as f64 / a.n_items() as f64;
        assert!(purity >= 0.95, "level-1 purity {purity}");
    }

    #[test]
    fn scbk_round_trip_all_mechanisms() {
        let mut rng = Rng::new(16);
        let (m, _) = clustered_matrix(4, 5, 8, 0.1, &mut rng);
        let vq = TrainedQuantizer::Vq(train_vq(&m, 4, 10, &mut Rng::new(1)).unwrap());
        let pq = TrainedQuantizer::Pq(train_pq(&m, 2, 4, 10, &mut Rng::new(1)).unwrap());
        let cfg = RqVaeConfig {
            epochs: 2,
            d_code: 4,
            hidden: 8,
            ..RqVaeConfig::default()
        };
        let (rqm, _) = train_rqvae(&m, 2, 4, &cfg, &mut Rng::new(1)).unwrap();
        let rq = TrainedQuantizer::Rq(rqm);
        for q in [vq, pq, rq] {
            let mut buf = Vec::new();
            write_quantizer(&q, &mut buf).unwrap();
            let loaded = parse_quantizer(&buf[..]).unwrap();
            assert_eq!(loaded.mechanism(), q.mechanism());
            let a = assign_sids(&q, &m).unwrap();
            let b = assign_sids(&loaded, &m).unwrap();
            for i in 0..m.n_items() {
                assert_eq!(a.codes_of(i), b.codes_of(i));
            }
        }
    }

    #[test]
    fn scbk_bad_magic_rejected() {
        assert!(parse_quantizer(&b"XXXX"[..]).is_err());
    }
}
