//! Behavioral checks of the synthetic generator against the model: the
//! popularity skew controls the head/tail gap of a pure collaborative model,
//! noise-free clusters collapse to shared level-1 codes, and the pure-HID
//! ablation never touches the semantic path.

use h2rec_core::data::{leave_one_out_split, popularity_partition, synthesize_dataset, SynthConfig};
use h2rec_core::eval::{evaluate_model, EvalSplit};
use h2rec_core::quantizer::{assign_sids, train_rqvae, Mechanism, RqVaeConfig, SidAssignment, TrainedQuantizer};
use h2rec_core::rng::Rng;
use h2rec_core::trainer::{train, TrainConfig};

fn head_tail_gap(zipf_s: f64) -> f64 {
    let synth = SynthConfig {
        n_users: 500,
        n_items: 200,
        n_clusters: 8,
        avg_len: 10,
        d_sem: 16,
        zipf_s,
        ..SynthConfig::default()
    };
    let (ds, sem, _) = synthesize_dataset(&synth, &mut Rng::new(21)).unwrap();
    let split = leave_one_out_split(&ds).unwrap();
    let partition = popularity_partition(&split, 0.2, 5).unwrap();
    let qcfg = RqVaeConfig {
        epochs: 10,
        d_code: 8,
        hidden: 16,
        ..RqVaeConfig::default()
    };
    let (rq, _) = train_rqvae(&sem, 2, 16, &qcfg, &mut Rng::new(22)).unwrap();
    let quantizer = TrainedQuantizer::Rq(rq);
    let sids = assign_sids(&quantizer, &sem).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        lr: 2e-3,
        batch_size: 128,
        max_len: 10,
        d: 16,
        levels: 2,
        k_codes: 16,
        p: 1,
        o: 1,
        hid_only: true,
        no_mca: true,
        no_ca: true,
        no_msg: true,
        patience: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&split, &cfg, &sem, &sids, quantizer.codebooks()).unwrap();
    let report = evaluate_model(
        &outcome.params,
        &sids,
        &split,
        &partition,
        EvalSplit::Test,
        Some(50),
        5,
        &cfg.flags(),
    )
    .unwrap();
    report.head.hit_at_10 - report.tail.hit_at_10
}

#[test]
fn flat_popularity_shrinks_pure_hid_head_tail_gap() {
    let gap_flat = head_tail_gap(0.0);
    let gap_skewed = head_tail_gap(1.5);
    assert!(
        gap_flat < gap_skewed,
        "head/tail gap should grow with popularity skew: flat {gap_flat:.4} vs skewed {gap_skewed:.4}"
    );
}

#[test]
fn noise_free_clusters_share_level1_codes() {
    let synth = SynthConfig {
        n_users: 50,
        n_items: 60,
        n_clusters: 6,
        noise: 0.0,
        d_sem: 16,
        ..SynthConfig::default()
    };
    let (_, sem, clusters) = synthesize_dataset(&synth, &mut Rng::new(31)).unwrap();
    let qcfg = RqVaeConfig {
        epochs: 15,
        d_code: 8,
        hidden: 16,
        ..RqVaeConfig::default()
    };
    // K >= n_clusters so codes can separate the clusters.
    let (rq, _) = train_rqvae(&sem, 2, 8, &qcfg, &mut Rng::new(32)).unwrap();
    let sids = assign_sids(&TrainedQuantizer::Rq(rq), &sem).unwrap();
    // Identical vectors within a cluster means identical full SIDs: level-1
    // codes collide within every cluster.
    for c in 0..6u32 {
        let members: Vec<usize> = (0..60).filter(|&i| clusters[i] == c).collect();
        let first = sids.code(members[0], 0);
        for &m in &members[1..] {
            assert_eq!(
                sids.code(m, 0),
                first,
                "cluster {c} level-1 codes diverged"
            );
        }
    }
}

#[test]
fn pure_hid_trainer_never_reads_the_semantic_path() {
    // With hid_only + no_mca + no_ca + no_msg, swapping the SID assignment
    // for a completely different one must not change a single training loss.
    let synth = SynthConfig {
        n_users: 80,
        n_items: 40,
        n_clusters: 4,
        d_sem: 16,
        ..SynthConfig::default()
    };
    let (ds, sem, _) = synthesize_dataset(&synth, &mut Rng::new(41)).unwrap();
    let split = leave_one_out_split(&ds).unwrap();
    let qcfg = RqVaeConfig {
        epochs: 5,
        d_code: 8,
        hidden: 16,
        ..RqVaeConfig::default()
    };
    let (rq, _) = train_rqvae(&sem, 2, 8, &qcfg, &mut Rng::new(42)).unwrap();
    let quantizer = TrainedQuantizer::Rq(rq);
    let sids_real = assign_sids(&quantizer, &sem).unwrap();
    let mut scramble_rng = Rng::new(77);
    let scrambled: Vec<u32> = (0..40 * 2)
        .map(|_| scramble_rng.below(8) as u32)
        .collect();
    let sids_fake = SidAssignment::new(Mechanism::Rq, 2, 8, scrambled);

    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        max_len: 8,
        d: 8,
        levels: 2,
        k_codes: 8,
        p: 1,
        hid_only: true,
        no_mca: true,
        no_ca: true,
        no_msg: true,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train(&split, &cfg, &sem, &sids_real, quantizer.codebooks()).unwrap();
    let b = train(&split, &cfg, &sem, &sids_fake, quantizer.codebooks()).unwrap();
    assert_eq!(a.log.steps.len(), b.log.steps.len());
    for (x, y) in a.log.steps.iter().zip(&b.log.steps) {
        assert_eq!(x.total, y.total, "pure-HID loss depends on SIDs at step {}", x.step);
    }
}
