// Temporary tuning probe for the synthetic benchmark. Not part of the deliverable surface.
use h2rec_core::eval::{evaluate_model, EvalSplit};
use h2rec_core::presets::*;
use h2rec_core::trainer::train;
use std::time::Instant;

fn main() {
    // args: epochs lr beta gamma tau n_neg variants seeds
    let a: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = a[0].parse().unwrap();
    let lr: f64 = a[1].parse().unwrap();
    let beta: f64 = a[2].parse().unwrap();
    let gamma: f64 = a[3].parse().unwrap();
    let tau: f64 = a[4].parse().unwrap();
    let n_neg: usize = a[5].parse().unwrap();
    let variants: Vec<String> = a[6].split(',').map(|s| s.to_string()).collect();
    let seeds: Vec<u64> = a[7].split(',').map(|s| s.parse().unwrap()).collect();
    let p_prefix: usize = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(3);
    let t0 = Instant::now();
    let art = build_benchmark(42).unwrap();
    eprintln!("artifacts: {:?}", t0.elapsed());
    for v in &variants {
        for &seed in &seeds {
            let mut base = benchmark_train_config(seed);
            base.epochs = epochs;
            base.lr = lr;
            base.beta = beta;
            base.gamma = gamma;
            base.tau = tau;
            base.n_neg = n_neg;
            base.p = p_prefix;
            base.patience = 10;
            let cfg = variant_config(&base, v).unwrap();
            let t1 = Instant::now();
            let out = train(&art.split, &cfg, &art.semantic, &art.sids, &art.codebooks).unwrap();
            let report = evaluate_model(
                &out.params, &art.sids, &art.split, &art.partition,
                EvalSplit::Test, Some(99), seed, &cfg.flags(),
            ).unwrap();
            println!(
                "{v} s{seed} e{epochs} lr{lr} b{beta} g{gamma} t{tau} n{n_neg} p{p_prefix}: {:.0?} be={} | ov H {:.4} N {:.4} | hd H {:.4} N {:.4} | tl H {:.4} N {:.4}",
                t1.elapsed(), out.log.best_epoch,
                report.overall.hit_at_10, report.overall.ndcg_at_10,
                report.head.hit_at_10, report.head.ndcg_at_10,
                report.tail.hit_at_10, report.tail.ndcg_at_10,
            );
            if v == "full" {
                for (label, f2) in [
                    ("full/sid-eval", h2rec_core::model::AblationFlags { sid_only: true, ..Default::default() }),
                    ("full/hid-eval", h2rec_core::model::AblationFlags { hid_only: true, ..Default::default() }),
                ] {
                    let r2 = evaluate_model(
                        &out.params, &art.sids, &art.split, &art.partition,
                        EvalSplit::Test, Some(99), seed, &f2,
                    ).unwrap();
                    println!(
                        "  {label}: ov N {:.4} | hd H {:.4} | tl H {:.4}",
                        r2.overall.ndcg_at_10, r2.head.hit_at_10, r2.tail.hit_at_10,
                    );
                }
            }
        }
    }
}
