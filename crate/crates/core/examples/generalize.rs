//! Learning curve on held-out clips for one ablation configuration, using
//! the same data and clip order as the run pipeline.
//!
//! `cargo run --release --example generalize -- clips epochs lr frames [mpg] [hga] [seed]`

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refvos::model::Model;
use refvos::pipeline::{derange_queries, evaluate_model, RunConfig};
use refvos::training::Trainer;

fn main() -> refvos::Result<()> {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| a.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mut cfg = RunConfig::default();
    cfg.apply_text(&format!(
        "clips = {}\nepochs = {}\nlr = {}\nframes = {}\nmpg = {}\nhga = {}\nseed = {}\n",
        arg(0, "100"),
        arg(1, "8"),
        arg(2, "1e-3"),
        arg(3, "3"),
        arg(4, "1") != "0",
        arg(5, "1") != "0",
        arg(6, "0"),
    ))?;
    cfg.validate()?;
    let train = cfg.train_set()?;
    let eval = cfg.eval_set()?;
    let (model, mut store) = Model::new(cfg.model_config(), cfg.seed)?;
    let mut trainer = Trainer::new(cfg.train_config())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0de5);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            total += trainer.step(&model, &mut store, &train[i].input, &train[i].masks)?.loss;
        }
        let jf = evaluate_model(&model, &store, &eval, None, None)?.summary.jf;
        println!(
            "epoch {epoch} loss {:.4} eval jf {jf:.4} ({:.0}s)",
            total / train.len() as f64,
            start.elapsed().as_secs_f64()
        );
    }
    let shuffled = evaluate_model(&model, &store, &eval, None, Some(&derange_queries(&eval)))?;
    println!("shuffled jf {:.4}", shuffled.summary.jf);
    Ok(())
}
