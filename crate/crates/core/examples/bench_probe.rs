//! Scratch probe for tuning the synthetic benchmark defaults.

use egc_core::infer::{infer_video, InferConfig};
use egc_core::metrics::{frame_metrics, EvalReport};
use egc_core::scenegen::{generate_scene, SceneConfig, VideoSample};
use egc_core::trainer::{train_loop, TrainConfig};

fn dataset(scene: &SceneConfig, n: usize, base_seed: u64) -> Vec<VideoSample> {
    (0..n)
        .map(|i| {
            let cfg = SceneConfig {
                seed: base_seed.wrapping_add(i as u64),
                ..scene.clone()
            };
            generate_scene(&cfg, i as u64).unwrap()
        })
        .collect()
}

fn main() {
    let t0 = std::time::Instant::now();
    let scene = SceneConfig {
        height: 32,
        width: 32,
        channels: 64,
        frames_per_video: 12,
        object_width: 12.0,
        object_height: 9.0,
        object_speed: 1.0,
        feature_separation: std::env::var("SEP").map(|s| s.parse().unwrap()).unwrap_or(2.0),
        position_strength: std::env::var("POS").map(|s| s.parse().unwrap()).unwrap_or(0.5),
        noise_std: std::env::var("NOISE").map(|s| s.parse().unwrap()).unwrap_or(0.5),
        class_jitter: std::env::var("JIT").map(|s| s.parse().unwrap()).unwrap_or(0.0),
        fixation_sigma: 2.0,
        fixation_lock_frames: 3,
        num_objects: 1,
        seed: 0,
    };
    let train_videos = dataset(&scene, 8, 1000);
    let test_videos = dataset(&scene, 4, 2000);

    let cfg = TrainConfig {
        iterations: std::env::var("ITERS").map(|s| s.parse().unwrap()).unwrap_or(2000),
        lr: std::env::var("LR").map(|s| s.parse().unwrap()).unwrap_or(1e-4),
        lambda_intra: std::env::var("LI").map(|s| s.parse().unwrap()).unwrap_or(1.0),
        lambda_inter: std::env::var("LE").map(|s| s.parse().unwrap()).unwrap_or(1.0),
        use_pos: std::env::var("NOPOS").is_err(),
        use_frame_bank: std::env::var("NOFB").is_err(),
        seed: std::env::var("SEED").map(|s| s.parse().unwrap()).unwrap_or(0),
        video_bank_capacity: std::env::var("VBCAP").map(|s| s.parse().unwrap()).unwrap_or(4096),
        frame_bank_capacity: std::env::var("FBCAP").map(|s| s.parse().unwrap()).unwrap_or(4096),
        max_neg: std::env::var("MAXNEG").map(|s| s.parse().unwrap()).unwrap_or(256),
        ..TrainConfig::default()
    };
    let out = train_loop(&train_videos, &cfg).unwrap();
    let t_train = t0.elapsed();

    for snap in &out.snapshots {
        if snap.step % 500 == 0 {
            println!(
                "step {:5}: probe mae {:.4} f {:.4} s {:.4}",
                snap.step, snap.mae, snap.f_measure, snap.s_measure
            );
        }
    }
    let h = &out.history;
    for chunk in h.chunks(h.len() / 10) {
        let m: f64 = chunk.iter().map(|r| r.loss_total).sum::<f64>() / chunk.len() as f64;
        let pce: f64 = chunk.iter().map(|r| r.loss_pce).sum::<f64>() / chunk.len() as f64;
        let intra: f64 = chunk.iter().map(|r| r.loss_intra).sum::<f64>() / chunk.len() as f64;
        let inter: f64 = chunk.iter().map(|r| r.loss_inter).sum::<f64>() / chunk.len() as f64;
        println!("loss avg {m:8.4} pce {pce:8.4} intra {intra:8.4} inter {inter:8.4}");
    }

    let icfg = InferConfig::default();
    let mut frames = Vec::new();
    for v in &test_videos {
        let preds = infer_video(v, &out.params, &cfg, &icfg).unwrap();
        for (p, f) in preds.iter().zip(&v.frames) {
            frames.push(frame_metrics(&p.mask, &f.gt_mask).unwrap());
        }
    }
    let report = EvalReport::from_frames(frames).unwrap();
    println!(
        "TEST: S {:.5}  F {:.5}  MAE {:.6}   (train {:.1?}, total {:.1?})",
        report.s_measure,
        report.f_measure,
        report.mae,
        t_train,
        t0.elapsed()
    );
}
