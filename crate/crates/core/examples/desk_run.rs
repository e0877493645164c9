//! Trains one small network on a synthetic dataset and reports test RMSE
//! against the predict-the-mean baseline.
//!
//! `cargo run --example desk_run -- [n] [epochs] [seed] [learning rate]`

use std::time::Instant;

use cyclone_core::dataset::{event_disjoint_split, synth::synth_generate};
use cyclone_core::eval::{evaluate, rmse};
use cyclone_core::network::NetworkConfig;
use cyclone_core::training::{train_model, AdamConfig, TrainConfig, TrainingHyper};

fn main() -> cyclone_core::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n = args.first().copied().unwrap_or(2000.0) as usize;
    let epochs = args.get(1).copied().unwrap_or(10.0) as usize;
    let seed = args.get(2).copied().unwrap_or(0.0) as u64;
    let learning_rate = args.get(3).copied().unwrap_or(1e-3);

    let data = synth_generate(n, 64, seed)?;
    let (train, test) = event_disjoint_split(&data, 0.2, seed)?;
    let hyper = TrainingHyper {
        network: NetworkConfig::small(),
        sampler: Default::default(),
        train: TrainConfig {
            epochs,
            adam: AdamConfig {
                learning_rate,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
    };
    let started = Instant::now();
    let (model, report) = train_model(&train, &hyper, Some(&test), seed)?;
    for r in &report.epochs {
        println!("epoch {:>3}  msle {:.4}  val rmse {:.2}  {:.1}s", r.epoch, r.train_msle, r.val_rmse.unwrap_or(f64::NAN), r.seconds);
    }
    let (eval, _) = evaluate(&model, &test)?;
    let mean = train.wind_speeds().iter().map(|&v| v as f64).sum::<f64>() / train.len() as f64;
    let truth: Vec<f64> = test.wind_speeds().iter().map(|&v| v as f64).collect();
    let baseline = rmse(&vec![mean; truth.len()], &truth)?;
    println!(
        "train {} images / {} speeds, test {}; rmse {:.2} vs baseline {:.2} (ratio {:.3}) in {:.0}s",
        train.len(),
        train.speed_count(),
        test.len(),
        eval.rmse,
        baseline,
        eval.rmse / baseline,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
