// scratch experiment driver; not part of the deliverable
use lpd_core::feature_store::{generate_synthetic, Dataset, SyntheticConfig};
use lpd_core::losses::{DclMode, LossConfig, MtrlMode};
use lpd_core::model::Topology;
use lpd_core::retrieval_eval::evaluate_model;
use lpd_core::trainer::{train, EvalRuntime, TrainingConfig};

fn reference_dataset(noise: f64, off_mode: f64, seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        queries: 20,
        clusters_per_query: 3,
        relevant_per_cluster: std::env::var("LPD_REL").map_or(10, |v| v.parse().unwrap()),
        distractors: 1000,
        val_queries: std::env::var("LPD_VALQ").map_or(8, |v| v.parse().unwrap()),
        train_topics: std::env::var("LPD_TOPICS").map_or(256, |v| v.parse().unwrap()),
        captions_per_video: 2,
        text_dims: vec![24, 32, 48],
        video_dims: vec![24, 32, 48, 24, 32, 48],
        latent_dim: 16,
        style_dim: 8,
        noise,
        off_mode_signal: off_mode,
        hard_distractor_fraction: std::env::var("LPD_HARD").map_or(0.5, |v| v.parse().unwrap()),
        noise_spread: std::env::var("LPD_SPREAD").map_or(0.0, |v| v.parse().unwrap()),
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn run(
    ds: &Dataset,
    topology: Topology,
    dcl: DclMode,
    mtrl: MtrlMode,
    seed: u64,
    lr: f64,
    d: usize,
    max_epochs: usize,
) -> (f64, f64, u64, u64) {
    let batch: usize = std::env::var("LPD_BATCH").map_or(64, |v| v.parse().unwrap());
    let cfg = TrainingConfig {
        batch_size: batch,
        initial_lr: lr,
        max_epochs,
        patience: std::env::var("LPD_PATIENCE").map_or(10, |v| v.parse().unwrap()),
        d,
        seed,
        topology,
        loss: LossConfig {
            dcl_mode: dcl,
            mtrl_mode: mtrl,
            ..LossConfig::default()
        },
        eval: EvalRuntime {
            depth: 1000,
            chunk_size: 512,
            threads: 8,
            ..EvalRuntime::default()
        },
        ..TrainingConfig::default()
    };
    let out = train(ds, &cfg, None).unwrap();
    let report = evaluate_model(&out.best_params, ds, &ds.test, &cfg.eval.to_options()).unwrap();
    let iou = report.iou.as_ref().unwrap().mean_off_diagonal;
    (report.map, iou, out.best_epoch, out.final_state.epoch)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("arms");
    let noise: f64 = args.get(2).map_or(0.1, |s| s.parse().unwrap());
    let off_mode: f64 = args.get(3).map_or(0.5, |s| s.parse().unwrap());
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
    let d: usize = args.get(5).map_or(64, |s| s.parse().unwrap());
    let max_epochs: usize = args.get(6).map_or(60, |s| s.parse().unwrap());
    let data_seed: u64 = args.get(7).map_or(7, |s| s.parse().unwrap());
    println!("mode={mode} noise={noise} off={off_mode} lr={lr} d={d} epochs={max_epochs} dseed={data_seed}");

    let ds = reference_dataset(noise, off_mode, data_seed);
    let t0 = std::time::Instant::now();

    match mode {
        "arms" => {
            for (name, topo, dcl, mtrl) in [
                ("lpd  partial ef   ", Topology::FeatureSpecific, DclMode::Partial, MtrlMode::EfGated),
                ("lpd  off     ef   ", Topology::FeatureSpecific, DclMode::Off, MtrlMode::EfGated),
                ("lpd  full    ef   ", Topology::FeatureSpecific, DclMode::Full, MtrlMode::EfGated),
                ("lpd  partial plain", Topology::FeatureSpecific, DclMode::Partial, MtrlMode::PlainSum),
                ("par  partial ef   ", Topology::ParallelHeads, DclMode::Partial, MtrlMode::EfGated),
                ("par  off     ef   ", Topology::ParallelHeads, DclMode::Off, MtrlMode::EfGated),
            ] {
                let (map, iou, best_epoch, total) = run(&ds, topo, dcl, mtrl, 11, lr, d, max_epochs);
                println!(
                    "{name}  mAP {map:.4}  IoU@20 {iou:.4}  best {best_epoch}/{total}  [{:.1}s]",
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "ef" => {
            // criterion-8 style comparison over 3 seeds
            let mut ef_epochs = Vec::new();
            let mut plain_epochs = Vec::new();
            let mut ef_maps = Vec::new();
            let mut plain_maps = Vec::new();
            for seed in [11u64, 12, 13] {
                let (map_e, _, be_e, te) = run(&ds, Topology::FeatureSpecific, DclMode::Partial, MtrlMode::EfGated, seed, lr, d, max_epochs);
                let (map_p, _, be_p, tp) = run(&ds, Topology::FeatureSpecific, DclMode::Partial, MtrlMode::PlainSum, seed, lr, d, max_epochs);
                println!(
                    "seed {seed}: ef mAP {map_e:.4} best {be_e}/{te} | plain mAP {map_p:.4} best {be_p}/{tp}  [{:.1}s]",
                    t0.elapsed().as_secs_f64()
                );
                ef_epochs.push(be_e as f64);
                plain_epochs.push(be_p as f64);
                ef_maps.push(map_e);
                plain_maps.push(map_p);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "mean best epoch: ef {:.1} vs plain {:.1} | mean mAP: ef {:.4} vs plain {:.4}",
                mean(&ef_epochs),
                mean(&plain_epochs),
                mean(&ef_maps),
                mean(&plain_maps)
            );
        }
        "curve" => {
            for (name, mtrl) in [("ef", MtrlMode::EfGated), ("plain", MtrlMode::PlainSum)] {
                let cfg = TrainingConfig {
                    batch_size: std::env::var("LPD_BATCH").map_or(64, |v| v.parse().unwrap()),
                    initial_lr: lr,
                    max_epochs,
                    patience: std::env::var("LPD_PATIENCE").map_or(10, |v| v.parse().unwrap()),
                    d,
                    seed: 11,
                    topology: Topology::FeatureSpecific,
                    loss: LossConfig { dcl_mode: DclMode::Partial, mtrl_mode: mtrl, ..LossConfig::default() },
                    eval: EvalRuntime { depth: 1000, chunk_size: 512, threads: 8, ..EvalRuntime::default() },
                    ..TrainingConfig::default()
                };
                let out = train(&ds, &cfg, None).unwrap();
                let curve: Vec<String> = out.log.lines().skip(1)
                    .filter(|l| !l.ends_with(','))
                    .map(|l| {
                        let mut parts = l.split(',');
                        let _step = parts.next().unwrap();
                        let epoch = parts.next().unwrap();
                        let val = l.rsplit(',').next().unwrap();
                        format!("{epoch}:{:.4}", val.parse::<f64>().unwrap())
                    })
                    .collect();
                println!("{name}: {}", curve.join(" "));
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
