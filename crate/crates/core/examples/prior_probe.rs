//! Train one configuration, then report how the mask prior behaves on the
//! held-out clips and what J&F becomes when the dense prompt is replaced by
//! the neutral map at inference.
//!
//! `cargo run --release --example prior_probe -- [clips] [epochs] [seed] [hga]`

use refvos::model::Model;
use refvos::pipeline::{evaluate_model, train_model, RunConfig};

fn main() -> refvos::Result<()> {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| a.get(i).cloned().unwrap_or_else(|| d.to_string());
    let cfg = RunConfig::from_text(&format!(
        "clips = {}\nepochs = {}\nseed = {}\nhga = {}\nframes = 3\nlr = 3e-4\n",
        arg(0, "300"),
        arg(1, "5"),
        arg(2, "0"),
        arg(3, "true"),
    ))?;
    cfg.validate()?;
    let train = cfg.train_set()?;
    let eval = cfg.eval_set()?;
    let (model, store, _) = train_model(&cfg, &train, |_| {}).map_err(|(e, _)| e)?;
    let ev = evaluate_model(&model, &store, &eval, None, None)?;
    println!("J&F {:.4}", ev.summary.jf);

    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    let mut all = Vec::new();
    for (clip, prior) in eval.iter().zip(&ev.priors) {
        let prior = prior.as_ref().expect("prior generated");
        let (frames, g) = (prior.shape()[0], prior.shape()[1]);
        let canvas = clip.masks.shape()[1];
        let cell = canvas / g;
        for t in 0..frames {
            for gy in 0..g {
                for gx in 0..g {
                    let v = prior.data()[(t * g + gy) * g + gx];
                    all.push(v);
                    let hit = (0..cell * cell).any(|k| {
                        let (y, x) = (gy * cell + k / cell, gx * cell + k % cell);
                        clip.masks.data()[(t * canvas + y) * canvas + x] > 0.5
                    });
                    if hit {
                        on += v;
                        n_on += 1;
                    } else {
                        off += v;
                        n_off += 1;
                    }
                }
            }
        }
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    println!("prior mean {mean:.4} std {std:.4}");
    println!(
        "prior on referent cells {:.4}, elsewhere {:.4}",
        on / n_on.max(1) as f64,
        off / n_off.max(1) as f64
    );

    let mut neutral = cfg.model_config();
    neutral.mpg = false;
    let (without, _) = Model::new(neutral, cfg.seed)?;
    let ev = evaluate_model(&without, &store, &eval, None, None)?;
    println!("J&F with the neutral dense prompt: {:.4}", ev.summary.jf);
    Ok(())
}
