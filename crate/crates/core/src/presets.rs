//! Canonical synthetic benchmark: one place defining the dataset, quantizer,
//! and training configurations shared by the acceptance suite and the CLI's
//! ablation runner, so both exercise the same artifact.

use crate::data::{
    leave_one_out_split, popularity_partition, synthesize_dataset, Dataset, PopularityPartition,
    SplitDataset, SynthConfig,
};
use crate::error::Result;
use crate::quantizer::{
    assign_sids, train_rqvae, Codebooks, RqVaeConfig, SidAssignment, TrainedQuantizer,
};
use crate::rng::Rng;
use crate::semantics::SemanticMatrix;
use crate::trainer::TrainConfig;
use crate::Error;

/// Everything deterministic the benchmark variants share.
pub struct BenchmarkArtifacts {
    pub dataset: Dataset,
    pub semantic: SemanticMatrix,
    pub clusters: Vec<u32>,
    pub split: SplitDataset,
    pub partition: PopularityPartition,
    pub quantizer: TrainedQuantizer,
    pub codebooks: Codebooks,
    pub sids: SidAssignment,
}

pub fn benchmark_synth_config() -> SynthConfig {
    SynthConfig::default()
}

pub fn benchmark_quantizer_config() -> RqVaeConfig {
    RqVaeConfig {
        epochs: 80,
        ..RqVaeConfig::default()
    }
}

/// Desk-scale training configuration for the synthetic benchmark.
pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        lr: 1e-3,
        batch_size: 256,
        max_len: 20,
        d: 32,
        levels: 4,
        k_codes: 128,
        p: 3,
        o: 3,
        beta: 0.5,
        gamma: 0.3,
        tau: 0.1,
        n_neg: 1,
        seed,
        patience: 5,
        ..TrainConfig::default()
    }
}

pub const BENCHMARK_VARIANTS: &[&str] = &[
    "full", "no_fn", "no_ca", "no_mca", "no_msg", "hid_only", "sid_only",
];

/// Map a variant name onto a config. `hid_only` is the pure collaborative
/// model (no semantic input anywhere); `sid_only` the pure semantic one.
pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.no_fn = false;
    cfg.no_mca = false;
    cfg.no_ca = false;
    cfg.no_msg = false;
    cfg.hid_only = false;
    cfg.sid_only = false;
    match variant {
        "full" => {}
        "no_fn" => cfg.no_fn = true,
        "no_ca" => cfg.no_ca = true,
        "no_mca" => cfg.no_mca = true,
        "no_msg" => cfg.no_msg = true,
        "hid_only" => {
            cfg.hid_only = true;
            cfg.no_mca = true;
            cfg.no_ca = true;
            cfg.no_msg = true;
        }
        "sid_only" => {
            cfg.sid_only = true;
            cfg.no_ca = true;
            cfg.no_msg = true;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown variant '{other}'; expected one of {BENCHMARK_VARIANTS:?}"
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Build the shared artifacts for a dataset seed: synthetic data, split,
/// popularity partition, trained RQ quantizer, SID assignment.
pub fn build_benchmark(dataset_seed: u64) -> Result<BenchmarkArtifacts> {
    let synth = benchmark_synth_config();
    let mut rng = Rng::new(dataset_seed);
    let (dataset, semantic, clusters) = synthesize_dataset(&synth, &mut rng)?;
    let split = leave_one_out_split(&dataset)?;
    let partition = popularity_partition(&split, 0.2, 5)?;
    let qcfg = benchmark_quantizer_config();
    let base = benchmark_train_config(dataset_seed);
    let (rq, _) = train_rqvae(
        &semantic,
        base.levels,
        base.k_codes,
        &qcfg,
        &mut Rng::new(dataset_seed ^ 0x9a17),
    )?;
    let quantizer = TrainedQuantizer::Rq(rq);
    let sids = assign_sids(&quantizer, &semantic)?;
    let codebooks = quantizer.codebooks().clone();
    Ok(BenchmarkArtifacts {
        dataset,
        semantic,
        clusters,
        split,
        partition,
        quantizer,
        codebooks,
        sids,
    })
}
