//! Quick manual throughput probe; not part of the normal suite.
//! Run with: cargo test --test bench_finetune -- --ignored --nocapture

use std::collections::BTreeMap;
use std::time::Instant;

use biqa_core::backbone::{finetune, DeskCnn, TrainConfig, TrainSample};
use biqa_core::dataset::QualityClass;
use biqa_core::imageops::{Crop, RasterImage};
use biqa_core::seeds;

#[test]
#[ignore]
fn finetune_throughput() {
    use rand::Rng;
    let mut rng = seeds::rng_from_seed(1);
    let samples: Vec<TrainSample> = (0..160)
        .map(|i| {
            let pixels: Vec<f32> =
                (0..64 * 64 * 3).map(|_| rng.random_range(-100.0f32..100.0)).collect();
            TrainSample {
                crop: Crop { image: RasterImage::new(64, 64, pixels).unwrap(), origin: (0, 0) },
                class: QualityClass::ALL[i % 5],
            }
        })
        .collect();
    let net = DeskCnn::new(64, 7).unwrap();
    for (iters, batch) in [(50usize, 32usize), (50, 16)] {
        let cfg = TrainConfig {
            iterations: iters,
            batch_size: batch,
            learning_rate: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let outcome = finetune(&net, &samples, &BTreeMap::new(), &cfg).unwrap();
        let dt = start.elapsed().as_secs_f64();
        let per_iter = dt / iters as f64;
        println!(
            "batch {batch}: {iters} iters in {dt:.2}s -> {:.1} ms/iter; 2000 iters ~ {:.0}s; final loss {:.3}",
            per_iter * 1000.0,
            per_iter * 2000.0,
            outcome.loss_curve.last().unwrap()
        );
    }
}
