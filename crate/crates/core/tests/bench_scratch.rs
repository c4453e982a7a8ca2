use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zeroseg::model::{Ablation, ModelConfig};
use zeroseg::semantic_space::ClassVocabulary;
use zeroseg::svfe::SvfeOrder;
use zeroseg::synthscene::{dataset, desk_spec};
use zeroseg::tensor::Precision;
use zeroseg::trainer::{eval_with_predictor, evaluate, predict_scene, TrainConfig, Trainer};

fn train_eval(
    tau: f64,
    lr_b: f64,
    lr_s: f64,
    epochs: u32,
    seed: u64,
    ablation: Ablation,
) -> (f64, f64) {
    let spec = desk_spec(0);
    let train_scenes = dataset(&spec, 32, 100).unwrap();
    let eval_scenes = dataset(&spec, 8, 200).unwrap();
    let vocab = ClassVocabulary::new(
        spec.class_names.clone(),
        spec.class_seen.clone(),
        spec.embeddings.clone(),
    )
    .unwrap();

    let config = TrainConfig {
        epochs,
        batch_size: 4,
        lr_backbone: lr_b,
        lr_svfe_sgvf: lr_s,
        tau,
        seed,
        ablation,
        svfe_order: SvfeOrder::PointsFirst,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(
        config,
        ModelConfig::default(),
        Precision::F32,
        "bench".into(),
        String::new(),
    )
    .unwrap();

    let t1 = Instant::now();
    let logs = match trainer.train(&train_scenes, &vocab, None) {
        Ok(l) => l,
        Err(e) => {
            println!("tau={tau} lr=({lr_b},{lr_s}) seed={seed} {ablation:?}: TRAIN ERR {e}");
            return (f64::NAN, f64::NAN);
        }
    };
    let dur = t1.elapsed();
    for log in logs.iter().step_by(6) {
        println!(
            "  ep {:2}  ls {:8.4}  lu {:9.3}  l {:9.3}",
            log.epoch, log.loss_seen, log.loss_unseen, log.loss_total
        );
    }
    let last = logs.last().unwrap();
    println!(
        "  ep {:2}  ls {:8.4}  lu {:9.3}  l {:9.3}",
        last.epoch, last.loss_seen, last.loss_unseen, last.loss_total
    );

    let report = evaluate(&trainer.model, &eval_scenes, &vocab, ablation, "bench", seed).unwrap();

    // Label-shuffled control: same per-scene predictions, shuffled across points.
    let mut ctrl_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let control = eval_with_predictor(&eval_scenes, &vocab, "bench", seed, |scene| {
        let mut pred = predict_scene(&trainer.model, scene, &vocab, ablation)?;
        pred.shuffle(&mut ctrl_rng);
        Ok(pred)
    })
    .unwrap();

    println!(
        "tau={tau} lr=({lr_b},{lr_s}) seed={seed} {ablation:?}: seen {:5.2} unseen {:5.2} | ctrl-unseen {:5.2} | {:.0?}",
        report.miou_seen, report.miou_unseen, control.miou_unseen, dur
    );
    (report.miou_unseen, control.miou_unseen)
}

#[test]
#[ignore]
fn bench_default_scale() {
    for tau in [0.1, 0.5, 1.0] {
        train_eval(tau, 1e-3, 3e-4, 37, 0, Ablation::Full);
    }
}

#[test]
#[ignore]
fn bench_ablations() {
    let tau: f64 = std::env::var("TAU").ok().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: u32 = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(24);
    for seed in [0u64, 1] {
        let mut rows = Vec::new();
        for ab in [Ablation::Full, Ablation::NoImage, Ablation::NoSgvf] {
            rows.push((ab, train_eval(tau, 1e-3, 3e-4, epochs, seed, ab)));
        }
        let full = rows[0].1 .0;
        println!(
            "seed {seed}: full {full:5.2} vs no_image {:5.2} vs no_sgvf {:5.2}",
            rows[1].1 .0, rows[2].1 .0
        );
    }
}
