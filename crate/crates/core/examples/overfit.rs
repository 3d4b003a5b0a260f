//! Fit one synthetic clip and print J&F as training proceeds.
//!
//! `cargo run --release --example overfit -- [lr] [seed]`

use std::time::Instant;

use refvos::pipeline::evaluate_model;
use refvos::model::{Model, ModelConfig};
use refvos::synth::sample_scene;
use refvos::training::{TrainConfig, Trainer};

fn main() -> refvos::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(Ok(1e-3), |s| s.parse()).expect("lr");
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let (model, mut store) = Model::new(ModelConfig::default(), seed)?;
    let clip = vec![sample_scene(seed, 5, 64)?];
    let mut trainer = Trainer::new(TrainConfig { lr, ..TrainConfig::default() })?;
    let start = Instant::now();
    for step in 0..=300 {
        if step % 25 == 0 {
            let jf = evaluate_model(&model, &store, &clip, None, None)?.summary.jf;
            println!("step {step:>3}  J&F {jf:.4}  ({:.0}s)", start.elapsed().as_secs_f64());
        }
        trainer.step(&model, &mut store, &clip[0].input, &clip[0].masks)?;
    }
    Ok(())
}
