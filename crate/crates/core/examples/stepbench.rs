//! Wall-clock probe of one pretraining step at the desk-scale shape.

use skdssl::augment::AugmentationConfig;
use skdssl::data::{synthesize, SyntheticSpec};
use skdssl::model::{init_networks, EncoderConfig};
use skdssl::raster::Image;
use skdssl::train::{pretrain_step, PretrainConfig, TrainState};

fn main() {
    let ds = synthesize(&SyntheticSpec::default()).unwrap();
    let cfg = PretrainConfig {
        augment: AugmentationConfig {
            view_size: 64,
            ..AugmentationConfig::default()
        },
        encoder: EncoderConfig {
            input_size: 64,
            ..EncoderConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut state = TrainState::<f32> {
        networks: init_networks(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 0).unwrap(),
        step: 0,
        loss_log: Vec::new(),
    };
    let batch: Vec<(usize, &Image)> = ds.images.iter().enumerate().take(64).collect();
    pretrain_step(&mut state, &batch, 0, &cfg).unwrap();
    let start = std::time::Instant::now();
    let n = 10;
    for e in 0..n {
        pretrain_step(&mut state, &batch, e, &cfg).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!("per-step: {:.3}s  ({:.1}s per 500-step run)", dt, dt * 500.0);
}
