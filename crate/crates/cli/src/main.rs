use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use refvos::pipeline::{exit_code, load_config_file, run_pipeline, RunConfig};
use refvos::{Error, Result};

/// Train, evaluate and ablate the referring video segmentation model on
/// synthetic clips. Settings come from defaults, then `--config`, then flags.
#[derive(Parser, Debug)]
#[command(name = "refvos", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// train, eval, infer, gradcheck or ablate.
    #[arg(long)]
    cmd: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training clips.
    #[arg(long)]
    clips: Option<usize>,
    /// Number of held-out evaluation clips.
    #[arg(long)]
    eval_clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_mpg: bool,
    #[arg(long)]
    no_hga: bool,
    #[arg(long)]
    no_ssi: bool,
    #[arg(long)]
    no_sci: bool,
    /// Global-feature patch size: 1, 2 or 4.
    #[arg(long)]
    pg: Option<usize>,
    /// vanilla or masked.
    #[arg(long)]
    global_source: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write mask priors as graymaps.
    #[arg(long)]
    debug_dump: bool,
    /// Boundary tolerance in pixels.
    #[arg(long)]
    tolerance: Option<usize>,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &cli.cmd {
        cfg.command = c.parse()?;
    }
    macro_rules! take {
        ($($field:ident => $target:ident),*) => {
            $(if let Some(v) = cli.$field.clone() { cfg.$target = v; })*
        };
    }
    take!(seed => seed, clips => clips, eval_clips => eval_clips, frames => frames,
          epochs => epochs, lr => lr, pg => pg, out => out);
    if let Some(s) = &cli.global_source {
        cfg.global_source = s.parse()?;
    }
    if cli.tolerance.is_some() {
        cfg.tolerance = cli.tolerance;
    }
    cfg.mpg &= !cli.no_mpg;
    cfg.hga &= !cli.no_hga;
    cfg.s_si &= !cli.no_ssi;
    cfg.s_ci &= !cli.no_sci;
    cfg.debug_dump |= cli.debug_dump;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| run_pipeline(&cfg, |line| eprintln!("{line}")));
    match result {
        Ok(summary) => {
            if let Some(s) = summary.summary {
                println!("J {:.6} F {:.6} J&F {:.6}", s.j, s.f, s.jf);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if let Error::Numerical(_) = e {
                eprintln!("numerical failure; see the output directory for a diagnostic dump");
            }
            ExitCode::from(code as u8)
        }
    }
}
