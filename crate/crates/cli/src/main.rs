//! Operator surface for the dual-branch recommender pipeline: data
//! preparation, quantizer training, SID assignment, model training,
//! evaluation, ablation sweeps, and report merging.
//!
//! Every command validates its inputs before side effects, writes its outputs
//! under a run directory with a manifest, and exits nonzero with a single
//! `error: ...` line on failure. `H2REC_THREADS` caps worker parallelism;
//! `H2REC_SEED` overrides the configured seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use h2rec_core::data::{
    leave_one_out_split, load_interactions, popularity_partition, synthesize_dataset, Dataset,
    SplitDataset, SynthConfig,
};
use h2rec_core::eval::{evaluate_model, group_breakdown, EvalSplit, MetricsReport};
use h2rec_core::presets;
use h2rec_core::quantizer::{
    assign_sids, load_quantizer, save_quantizer, train_pq, train_rqvae, train_vq, RqVaeConfig,
    SidAssignment, TrainedQuantizer,
};
use h2rec_core::semantics::{
    load_semantic_matrix, load_sids, save_semantic_matrix, save_sids, SemanticMatrix,
};
use h2rec_core::trainer::{train, TrainConfig};
use h2rec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "h2rec", version, about = "Dual-branch sequential recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an interactions TSV: split, popularity partition, remap table.
    Prepare {
        /// TSV file: user_id<TAB>item_id<TAB>timestamp
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop users with fewer interactions than this.
        #[arg(long, default_value_t = 3)]
        min_len: usize,
    },
    /// Generate a synthetic long-tail dataset plus semantic embeddings.
    Synth {
        /// Optional JSON file with generator settings; flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        zipf: Option<f64>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        avg_len: Option<usize>,
        #[arg(long)]
        d_sem: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a vector quantizer over a semantic embedding file.
    TrainQuantizer {
        /// SEMB embedding file.
        #[arg(long)]
        emb: PathBuf,
        /// vq | pq | rq
        #[arg(long, default_value = "rq")]
        mech: String,
        /// Number of code levels.
        #[arg(long = "L", default_value_t = 4)]
        levels: usize,
        /// Codebook size per level.
        #[arg(long = "K", default_value_t = 128)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        d_code: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assign semantic IDs and report collision/utilization.
    AssignSids {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        codebooks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual-branch model.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint with sampled negatives or the full catalog.
    Evaluate {
        /// H2CK checkpoint (model parameters).
        #[arg(long)]
        ckpt: PathBuf,
        /// Prepared data directory (from `prepare` or `synth`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sids: PathBuf,
        #[arg(long, default_value_t = 99)]
        negatives: usize,
        /// Rank against every non-history item instead of sampling.
        #[arg(long, default_value_t = false)]
        full_catalog: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate with a branch ablated: none | hid_only | sid_only
        #[arg(long, default_value = "none")]
        branch: String,
        /// Forward with uniform fusion weights (match a no_fn-trained model).
        #[arg(long, default_value_t = false)]
        no_fn: bool,
        /// Forward without cross attention (match a no_mca-trained model).
        #[arg(long, default_value_t = false)]
        no_mca: bool,
    },
    /// Run the ablation grid on the synthetic benchmark.
    Ablate {
        /// Comma-separated variants (default: the full grid).
        #[arg(long, default_value = "full,no_fn,no_ca,no_mca,no_msg,hid_only,sid_only")]
        variants: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "42,43,44")]
        seeds: String,
        /// Dataset seed for the shared synthetic benchmark.
        #[arg(long, default_value_t = 42)]
        dataset_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge per-seed evaluation reports into a mean +/- stddev table.
    Report {
        /// Report JSON files produced by `evaluate`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields; flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared data directory.
    #[arg(long)]
    data: PathBuf,
    /// Semantic-ID TSV.
    #[arg(long)]
    sids: PathBuf,
    /// Trained quantizer (SCBK) for code-table initialization.
    #[arg(long)]
    codebooks: PathBuf,
    /// SEMB semantic embeddings for HID initialization.
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "L")]
    levels: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    o: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_neg: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = false)]
    no_fn: bool,
    #[arg(long, default_value_t = false)]
    no_mca: bool,
    #[arg(long, default_value_t = false)]
    no_ca: bool,
    #[arg(long, default_value_t = false)]
    no_msg: bool,
    #[arg(long, default_value_t = false)]
    hid_only: bool,
    #[arg(long, default_value_t = false)]
    sid_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("H2REC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn env_seed(flag: Option<u64>) -> Option<u64> {
    if let Ok(s) = std::env::var("H2REC_SEED") {
        if let Ok(v) = s.parse::<u64>() {
            return Some(v);
        }
    }
    flag
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Manifest: config hash, seed, and a checksum per artifact in the run dir.
fn write_manifest(dir: &Path, command: &str, config_hash: u64, seed: u64) -> Result<()> {
    let mut artifacts = serde_json::Map::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    names.sort();
    for p in names {
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        artifacts.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            serde_json::json!(format!("{:016x}", fnv64(&bytes))),
        );
    }
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": format!("{config_hash:016x}"),
        "seed": seed,
        "artifacts": artifacts,
    });
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )
}

fn load_data_dir(dir: &Path) -> Result<(Dataset, SplitDataset)> {
    let ds = load_interactions(dir.join("interactions.tsv"), 3)?;
    let split = leave_one_out_split(&ds)?;
    Ok((ds, split))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            interactions,
            out,
            min_len,
        } => {
            let ds = load_interactions(&interactions, min_len)?;
            let split = leave_one_out_split(&ds)?;
            let partition = popularity_partition(&split, 0.2, 5)?;
            mkdirs(&out)?;
            let mut buf = Vec::new();
            h2rec_core::data::write_interactions_tsv(&ds, &mut buf)
                .map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("interactions.tsv"), &buf)?;
            let mut remap = Vec::new();
            h2rec_core::data::write_remap_tsv(&ds.user_remap, &mut remap)
                .map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("user_remap.tsv"), &remap)?;
            let mut remap = Vec::new();
            h2rec_core::data::write_remap_tsv(&ds.item_remap, &mut remap)
                .map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("item_remap.tsv"), &remap)?;
            let stats = serde_json::json!({
                "n_users": ds.sequences.len(),
                "n_items": ds.n_items,
                "head_size": partition.head_size(),
                "avg_length": ds.sequences.iter().map(|s| s.len()).sum::<usize>() as f64
                    / ds.sequences.len() as f64,
            });
            write_file(
                &out.join("stats.json"),
                serde_json::to_string_pretty(&stats).unwrap().as_bytes(),
            )?;
            write_manifest(&out, "prepare", 0, 0)?;
            println!(
                "prepared {} users, {} items -> {}",
                ds.sequences.len(),
                ds.n_items,
                out.display()
            );
            Ok(())
        }
        Command::Synth {
            config,
            out,
            seed,
            users,
            items,
            zipf,
            clusters,
            avg_len,
            d_sem,
            noise,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&s)
                        .map_err(|e| Error::Config(format!("bad synth config: {e}")))?
                }
                None => SynthConfig::default(),
            };
            if let Some(v) = users {
                cfg.n_users = v;
            }
            if let Some(v) = items {
                cfg.n_items = v;
            }
            if let Some(v) = zipf {
                cfg.zipf_s = v;
            }
            if let Some(v) = clusters {
                cfg.n_clusters = v;
            }
            if let Some(v) = avg_len {
                cfg.avg_len = v;
            }
            if let Some(v) = d_sem {
                cfg.d_sem = v;
            }
            if let Some(v) = noise {
                cfg.noise = v;
            }
            let seed = env_seed(seed).unwrap_or(42);
            let mut rng = h2rec_core::rng::Rng::new(seed);
            let (ds, sem, clusters_gt) = synthesize_dataset(&cfg, &mut rng)?;
            mkdirs(&out)?;
            let mut buf = Vec::new();
            h2rec_core::data::write_interactions_tsv(&ds, &mut buf)
                .map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("interactions.tsv"), &buf)?;
            let mut cl = Vec::new();
            h2rec_core::data::write_clusters_tsv(&clusters_gt, &mut cl)
                .map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("clusters.tsv"), &cl)?;
            save_semantic_matrix(&sem, out.join("embeddings.semb"))?;
            write_file(
                &out.join("synth_config.json"),
                serde_json::to_string_pretty(&cfg).unwrap().as_bytes(),
            )?;
            write_manifest(
                &out,
                "synth",
                fnv64(serde_json::to_string(&cfg).unwrap().as_bytes()),
                seed,
            )?;
            println!(
                "synthesized {} users, {} items (seed {seed}) -> {}",
                cfg.n_users,
                cfg.n_items,
                out.display()
            );
            Ok(())
        }
        Command::TrainQuantizer {
            emb,
            mech,
            levels,
            k,
            out,
            d_code,
            epochs,
            seed,
        } => {
            let sem = load_semantic_matrix(&emb, None)?;
            let seed = env_seed(seed).unwrap_or(42);
            let mut rng = h2rec_core::rng::Rng::new(seed);
            let q = match mech.as_str() {
                "vq" => TrainedQuantizer::Vq(train_vq(&sem, k, 50, &mut rng)?),
                "pq" => TrainedQuantizer::Pq(train_pq(&sem, levels, k, 50, &mut rng)?),
                "rq" => {
                    let cfg = RqVaeConfig {
                        epochs,
                        d_code,
                        ..RqVaeConfig::default()
                    };
                    let (model, report) = train_rqvae(&sem, levels, k, &cfg, &mut rng)?;
                    if let Some(last) = report.total.last() {
                        println!("rq-vae final loss {last:.6}");
                    }
                    TrainedQuantizer::Rq(model)
                }
                other => {
                    return Err(Error::InvalidArg(format!(
                        "unknown mechanism '{other}', expected vq|pq|rq"
                    )))
                }
            };
            mkdirs(&out)?;
            save_quantizer(&q, out.join("codebooks.scbk"))?;
            write_manifest(&out, "train-quantizer", 0, seed)?;
            println!("trained {mech} quantizer -> {}", out.display());
            Ok(())
        }
        Command::AssignSids {
            emb,
            codebooks,
            out,
        } => {
            let sem = load_semantic_matrix(&emb, None)?;
            let q = load_quantizer(&codebooks)?;
            let assign = assign_sids(&q, &sem)?;
            mkdirs(&out)?;
            save_sids(&assign, out.join("sids.tsv"))?;
            let report = format!(
                "metric,value\ncollision_rate,{:.6}\nutilization_rate,{:.6}\nutilization_rate_items,{:.6}\n",
                assign.collision_rate, assign.utilization_rate, assign.utilization_rate_items
            );
            write_file(&out.join("sid_stats.csv"), report.as_bytes())?;
            print!("{report}");
            write_manifest(&out, "assign-sids", 0, 0)?;
            Ok(())
        }
        Command::Train(args) => run_train(*args),
        Command::Evaluate {
            ckpt,
            data,
            sids,
            negatives,
            full_catalog,
            seed,
            out,
            branch,
            no_fn,
            no_mca,
        } => {
            if !ckpt.exists() {
                return Err(Error::InvalidArg(format!(
                    "checkpoint not found: {}",
                    ckpt.display()
                )));
            }
            let params = h2rec_core::model::load_params(&ckpt)?;
            let (_, split) = load_data_dir(&data)?;
            let assign = load_sids(&sids)?;
            let partition = popularity_partition(&split, 0.2, 5)?;
            let seed = env_seed(seed).unwrap_or(42);
            let mut flags = h2rec_core::model::AblationFlags {
                no_fn,
                no_mca,
                ..Default::default()
            };
            match branch.as_str() {
                "none" => {}
                "hid_only" => flags.hid_only = true,
                "sid_only" => flags.sid_only = true,
                other => {
                    return Err(Error::InvalidArg(format!(
                        "unknown branch '{other}', expected none|hid_only|sid_only"
                    )))
                }
            }
            let n_neg = if full_catalog { None } else { Some(negatives) };
            let report = evaluate_model(
                &params,
                &assign,
                &split,
                &partition,
                EvalSplit::Test,
                n_neg,
                seed,
                &flags,
            )?;
            mkdirs(&out)?;
            write_file(
                &out.join("report.json"),
                serde_json::to_string_pretty(&report).unwrap().as_bytes(),
            )?;
            let table = group_breakdown(std::slice::from_ref(&report))?;
            write_file(&out.join("report.csv"), table.to_csv().as_bytes())?;
            print!("{}", table.pretty());
            write_manifest(&out, "evaluate", 0, seed)?;
            Ok(())
        }
        Command::Ablate {
            variants,
            seeds,
            dataset_seed,
            out,
        } => {
            let variants: Vec<&str> = variants.split(',').map(|s| s.trim()).collect();
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::InvalidArg(format!("bad seed '{s}'")))
                })
                .collect::<Result<_>>()?;
            mkdirs(&out)?;
            let art = presets::build_benchmark(dataset_seed)?;
            let mut csv = String::from(
                "variant,seed,overall_h10,overall_n10,head_h10,head_n10,tail_h10,tail_n10\n",
            );
            let mut summaries: Vec<(String, Vec<MetricsReport>)> = Vec::new();
            for v in &variants {
                let mut reports = Vec::new();
                for &seed in &seeds {
                    let cfg = presets::variant_config(&presets::benchmark_train_config(seed), v)?;
                    let outcome =
                        train(&art.split, &cfg, &art.semantic, &art.sids, &art.codebooks)?;
                    let report = evaluate_model(
                        &outcome.params,
                        &art.sids,
                        &art.split,
                        &art.partition,
                        EvalSplit::Test,
                        Some(99),
                        seed,
                        &cfg.flags(),
                    )?;
                    csv.push_str(&format!(
                        "{v},{seed},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                        report.overall.hit_at_10,
                        report.overall.ndcg_at_10,
                        report.head.hit_at_10,
                        report.head.ndcg_at_10,
                        report.tail.hit_at_10,
                        report.tail.ndcg_at_10
                    ));
                    println!(
                        "{v} seed={seed}: overall N@10 {:.4} | head N@10 {:.4} | tail N@10 {:.4}",
                        report.overall.ndcg_at_10, report.head.ndcg_at_10, report.tail.ndcg_at_10
                    );
                    reports.push(report);
                }
                summaries.push((v.to_string(), reports));
            }
            write_file(&out.join("ablation_runs.csv"), csv.as_bytes())?;
            let mut merged = String::from(
                "variant,overall_h10,overall_h10_std,overall_n10,overall_n10_std,head_n10,tail_n10\n",
            );
            for (v, reports) in &summaries {
                let t = group_breakdown(reports)?;
                let overall = &t.rows[0];
                let head = t.rows.iter().find(|r| r.group == "head").unwrap();
                let tail = t.rows.iter().find(|r| r.group == "tail").unwrap();
                merged.push_str(&format!(
                    "{v},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    overall.h10_mean,
                    overall.h10_std,
                    overall.n10_mean,
                    overall.n10_std,
                    head.n10_mean,
                    tail.n10_mean
                ));
            }
            write_file(&out.join("ablation_summary.csv"), merged.as_bytes())?;
            write_manifest(&out, "ablate", 0, dataset_seed)?;
            Ok(())
        }
        Command::Report { runs, out } => {
            let mut reports = Vec::new();
            for p in &runs {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let r: MetricsReport = serde_json::from_str(&s)
                    .map_err(|e| Error::Format(format!("bad report {}: {e}", p.display())))?;
                reports.push(r);
            }
            let table = group_breakdown(&reports)?;
            mkdirs(&out)?;
            write_file(&out.join("summary.csv"), table.to_csv().as_bytes())?;
            write_file(
                &out.join("summary.json"),
                serde_json::to_string_pretty(&table).unwrap().as_bytes(),
            )?;
            print!("{}", table.pretty());
            write_manifest(&out, "report", 0, 0)?;
            Ok(())
        }
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&s)?
        }
        None => TrainConfig::default(),
    };
    // Flags win over file values.
    macro_rules! merge {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    merge!(epochs, lr, batch_size, max_len, d, levels, p, o, beta, gamma, tau, n_neg, patience);
    if let Some(v) = args.k {
        cfg.k_codes = v;
    }
    if let Some(v) = env_seed(args.seed) {
        cfg.seed = v;
    }
    cfg.no_fn |= args.no_fn;
    cfg.no_mca |= args.no_mca;
    cfg.no_ca |= args.no_ca;
    cfg.no_msg |= args.no_msg;
    cfg.hid_only |= args.hid_only;
    cfg.sid_only |= args.sid_only;
    cfg.validate()?;

    let (_, split) = load_data_dir(&args.data)?;
    let sids: SidAssignment = load_sids(&args.sids)?;
    let quantizer = load_quantizer(&args.codebooks)?;
    let sem: SemanticMatrix = load_semantic_matrix(&args.emb, Some(split.n_items))?;

    let outcome = train(&split, &cfg, &sem, &sids, quantizer.codebooks())?;
    mkdirs(&args.out)?;
    h2rec_core::model::save_params(&outcome.params, args.out.join("checkpoint.h2ck"))?;
    write_file(
        &args.out.join("train_log.csv"),
        outcome.log.steps_csv().as_bytes(),
    )?;
    let epochs_json: Vec<serde_json::Value> = outcome
        .log
        .epochs
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "val_h10": e.val_h10,
                "val_n10": e.val_n10,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "best_epoch": outcome.log.best_epoch,
        "best_val_n10": outcome.log.best_val_n10,
        "epochs": epochs_json,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).unwrap(),
    });
    write_file(
        &args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    write_file(&args.out.join("config.json"), cfg.to_json().as_bytes())?;
    write_manifest(&args.out, "train", cfg.hash(), cfg.seed)?;
    println!(
        "trained to epoch {} (best val N@10 {:.4}) -> {}",
        outcome.log.best_epoch,
        outcome.log.best_val_n10,
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv64(b"a"), fnv64(b"a"));
        assert_ne!(fnv64(b"a"), fnv64(b"b"));
    }
}
