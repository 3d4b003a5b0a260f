//! Run configuration and the train / eval / infer / gradcheck / ablate
//! commands, including every artifact they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{aggregate, evaluate_clip, BinaryMask, JfScore};
use crate::model::{GlobalSource, MemorySource, Model, ModelConfig};
use crate::nn::{Ctx, ParamStore};
use crate::prior::ContextToggles;
use crate::synth::{clip_seed, dataset_manifest, decode_query, generate_dataset, ClipBatch};
use crate::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor};
use crate::training::{clip_loss, StepReport, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Infer,
    Gradcheck,
    Ablate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Infer => "infer",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "infer" => Command::Infer,
            "gradcheck" => Command::Gradcheck,
            "ablate" => Command::Ablate,
            _ => return Err(Error::Config(format!("unknown command {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    /// Training clips.
    pub clips: usize,
    pub eval_clips: usize,
    pub frames: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mpg: bool,
    pub hga: bool,
    pub s_si: bool,
    pub s_ci: bool,
    pub pg: usize,
    pub global_source: GlobalSource,
    pub out: PathBuf,
    pub debug_dump: bool,
    /// Boundary tolerance in pixels; `None` uses the diagonal rule.
    pub tolerance: Option<usize>,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Train,
            seed: 0,
            clips: 100,
            eval_clips: 50,
            frames: 5,
            epochs: 8,
            lr: 3e-4,
            weight_decay: 0.01,
            mpg: true,
            hga: true,
            s_si: true,
            s_ci: true,
            pg: 2,
            global_source: GlobalSource::Masked,
            out: PathBuf::from("runs/default"),
            debug_dump: false,
            tolerance: None,
            gradcheck_samples: 240,
        }
    }
}

/// Canvas side of the synthetic clips (the segmentation resolution).
pub const CANVAS: usize = 64;

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "cmd",
        "seed",
        "clips",
        "eval_clips",
        "frames",
        "epochs",
        "lr",
        "weight_decay",
        "mpg",
        "hga",
        "ssi",
        "sci",
        "pg",
        "global_source",
        "out",
        "debug_dump",
        "tolerance",
        "gradcheck_samples",
    ];

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "cmd" => self.command = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "clips" => self.clips = parse_value(key, v)?,
            "eval_clips" => self.eval_clips = parse_value(key, v)?,
            "frames" => self.frames = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "mpg" => self.mpg = parse_bool(key, v)?,
            "hga" => self.hga = parse_bool(key, v)?,
            "ssi" => self.s_si = parse_bool(key, v)?,
            "sci" => self.s_ci = parse_bool(key, v)?,
            "pg" => self.pg = parse_value(key, v)?,
            "global_source" => self.global_source = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            "debug_dump" => self.debug_dump = parse_bool(key, v)?,
            "tolerance" => {
                self.tolerance = if v == "auto" { None } else { Some(parse_value(key, v)?) }
            }
            "gradcheck_samples" => self.gradcheck_samples = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file over `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key in [`Self::KEYS`] order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let tol = self.tolerance.map_or("auto".to_string(), |t| t.to_string());
        let values: [String; 18] = [
            self.command.as_str().into(),
            self.seed.to_string(),
            self.clips.to_string(),
            self.eval_clips.to_string(),
            self.frames.to_string(),
            self.epochs.to_string(),
            format!("{:e}", self.lr),
            format!("{:e}", self.weight_decay),
            self.mpg.to_string(),
            self.hga.to_string(),
            self.s_si.to_string(),
            self.s_ci.to_string(),
            self.pg.to_string(),
            self.global_source.as_str().into(),
            self.out.display().to_string(),
            self.debug_dump.to_string(),
            tol,
            self.gradcheck_samples.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > 8 {
            return Err(Error::Config(format!("frames {} outside 1..=8", self.frames)));
        }
        if self.clips == 0 || self.eval_clips == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !matches!(self.pg, 1 | 2 | 4) {
            return Err(Error::Config(format!("pg {} not in {{1, 2, 4}}", self.pg)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mpg: self.mpg,
            hga: self.hga,
            toggles: ContextToggles {
                self_interaction: self.s_si,
                cross_interaction: self.s_ci,
            },
            global_patch: self.pg,
            global_source: self.global_source,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..TrainConfig::default()
        }
    }

    pub fn train_set(&self) -> Result<Vec<ClipBatch>> {
        generate_dataset(self.seed, self.clips, self.frames, CANVAS)
    }

    /// Held-out clips drawn from a seed stream disjoint from training.
    pub fn eval_set(&self) -> Result<Vec<ClipBatch>> {
        generate_dataset(clip_seed(self.seed, usize::MAX), self.eval_clips, self.frames, CANVAS)
    }
}

/// Training progress event.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub clip: usize,
    pub report: StepReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainFailure {
    pub epoch: usize,
    pub step: usize,
    pub clip: usize,
    pub message: String,
}

/// Train a fresh model for `epochs` passes over `clips` in a seeded order.
pub fn train_model(
    cfg: &RunConfig,
    clips: &[ClipBatch],
    mut on_step: impl FnMut(&Progress),
) -> std::result::Result<(Model, ParamStore, Vec<f64>), (Error, Option<TrainFailure>)> {
    let (model, mut store) = Model::new(cfg.model_config(), cfg.seed).map_err(|e| (e, None))?;
    let mut trainer = Trainer::new(cfg.train_config()).map_err(|e| (e, None))?;
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0de5);
    let mut losses = Vec::with_capacity(cfg.epochs * clips.len());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let c = &clips[i];
            match trainer.step(&model, &mut store, &c.input, &c.masks) {
                Ok(report) => {
                    losses.push(report.loss);
                    on_step(&Progress {
                        epoch,
                        step,
                        clip: i,
                        report,
                    });
                }
                Err(e @ Error::Numerical(_)) => {
                    let f = TrainFailure {
                        epoch,
                        step,
                        clip: i,
                        message: e.to_string(),
                    };
                    return Err((e, Some(f)));
                }
                Err(e) => return Err((e, None)),
            }
            step += 1;
        }
    }
    Ok((model, store, losses))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<io::ClipRecord>,
    pub summary: JfScore,
    /// `[T, H_s, W_s]` probabilities per clip.
    pub predictions: Vec<Tensor>,
    /// `[T, g, g]` mask priors per clip, when generated.
    pub priors: Vec<Option<Tensor>>,
}

/// Run inference on every clip; `queries` overrides each clip's tokens.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    clips: &[ClipBatch],
    tolerance: Option<usize>,
    queries: Option<&[Vec<usize>]>,
) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(clips.len());
    let mut predictions = Vec::with_capacity(clips.len());
    let mut priors = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let mut input = c.input.clone();
        if let Some(q) = queries {
            input.tokens = q[i].clone();
        }
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, store);
        let out = model.forward_clip(&cx, &input, MemorySource::Live)?;
        let probs = out.probability_tensor()?;
        if !probs.is_finite() {
            return Err(Error::Numerical(format!("non-finite prediction on clip {i}")));
        }
        records.push(io::ClipRecord {
            clip: i,
            query: decode_query(&input.tokens),
            metrics: evaluate_clip(&probs, &c.masks, tolerance)?,
        });
        predictions.push(probs);
        priors.push(out.m_p.map(|m| m.value()));
    }
    let metrics: Vec<_> = records.iter().map(|r| r.metrics.clone()).collect();
    Ok(Evaluation {
        summary: aggregate(&metrics)?,
        records,
        predictions,
        priors,
    })
}

/// Each clip receives the next clip's query (a cyclic derangement).
pub fn derange_queries(clips: &[ClipBatch]) -> Vec<Vec<usize>> {
    let n = clips.len();
    (0..n).map(|i| clips[(i + 1) % n].input.tokens.clone()).collect()
}

/// Gradient sample points spread evenly over the top-level modules.
pub fn sample_gradcheck_points(store: &ParamStore, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, (name, _)) in store.iter().enumerate() {
        let g = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(i),
            None => groups.push((g, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = store.tensors();
    let total: usize = tensors.iter().map(Tensor::numel).sum();
    let mut points = Vec::with_capacity(count);
    let mut k = 0;
    while points.len() < count.min(total) {
        let (_, members) = &groups[k % groups.len()];
        k += 1;
        let p = members[rng.gen_range(0..members.len())];
        let e = rng.gen_range(0..tensors[p].numel());
        if !points.contains(&(p, e)) {
            points.push((p, e));
        }
    }
    points
}

/// Finite-difference check of the full clip loss with memory replayed from
/// a live pass, so stored entries are constants on both sides.
pub fn model_gradcheck(
    model: &Model,
    store: &ParamStore,
    clip: &ClipBatch,
    points: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let snapshots = {
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, store);
        model.forward_clip(&cx, &clip.input, MemorySource::Live)?.snapshots
    };
    let tcfg = TrainConfig::default();
    finite_difference_check(
        |tape, vars| {
            if vars.len() != store.len() {
                return Err(Error::Contract("gradient check variables misaligned".into()));
            }
            let cx = Ctx::with_vars(tape, vars);
            let out = model.forward_clip(&cx, &clip.input, MemorySource::Replay(&snapshots))?;
            Ok(clip_loss(&out, &clip.masks, &tcfg)?.0)
        },
        store.tensors(),
        Some(points),
        h,
        tol,
    )
}

/// Human-readable gradient check summary.
pub fn gradcheck_report(store: &ParamStore, report: &GradCheckReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "checked = {}", report.checked());
    let _ = writeln!(s, "tolerance = {:e}", report.tolerance);
    let _ = writeln!(s, "max_rel_err = {:e}", report.max_rel_err());
    let _ = writeln!(s, "passed = {}", report.passed());
    for &(p, e, a, n) in &report.samples {
        let id = store.ids().nth(p).expect("sampled from the store");
        let _ = writeln!(s, "{}[{e}] analytic = {a:e} numeric = {n:e}", store.name(id));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub mpg: bool,
    pub hga: bool,
    pub score: JfScore,
}

/// The component table: baseline, +MPG, +HGA, full.
pub fn component_matrix() -> Vec<(&'static str, bool, bool)> {
    vec![
        ("baseline", false, false),
        ("+MPG", true, false),
        ("+HGA", false, true),
        ("full", true, true),
    ]
}

/// Train and evaluate every configuration on shared data and seed.
/// `on_trained` sees each trained model with the held-out clips.
pub fn run_ablation(
    base: &RunConfig,
    matrix: &[(&str, bool, bool)],
    mut on_step: impl FnMut(&str, &Progress),
    mut on_trained: impl FnMut(&AblationRow, &Model, &ParamStore, &[ClipBatch]) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if matrix.len() < 2 {
        return Err(Error::Config("an ablation needs at least two configurations".into()));
    }
    let train = base.train_set()?;
    let eval = base.eval_set()?;
    let mut rows = Vec::with_capacity(matrix.len());
    for &(name, mpg, hga) in matrix {
        let cfg = RunConfig {
            mpg,
            hga,
            ..base.clone()
        };
        cfg.validate()?;
        let (model, store, _) = train_model(&cfg, &train, |p| on_step(name, p)).map_err(|(e, _)| e)?;
        let ev = evaluate_model(&model, &store, &eval, cfg.tolerance, None)?;
        let row = AblationRow {
            name: name.to_string(),
            mpg,
            hga,
            score: ev.summary,
        };
        on_trained(&row, &model, &store, &eval)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::from("configuration  MPG  HGA  J         F         J&F\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<13}  {:<3}  {:<3}  {:.6}  {:.6}  {:.6}",
            r.name,
            mark(r.mpg),
            mark(r.hga),
            r.score.j,
            r.score.f,
            r.score.jf
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub command: Command,
    pub summary: Option<JfScore>,
    pub files: Vec<PathBuf>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.dir.join(rel);
        io::write_file(&p, bytes)?;
        self.files.push(p);
        Ok(())
    }
}

fn write_predictions(art: &mut Artifacts, ev: &Evaluation, debug: bool) -> Result<()> {
    for (c, probs) in ev.predictions.iter().enumerate() {
        for t in 0..probs.shape()[0] {
            let m = BinaryMask::from_probabilities(&probs.slice(0, t, t + 1)?)?;
            art.write(&format!("masks/{}", io::mask_file_name(c, t)), &io::encode_mask_pgm(&m))?;
        }
        if let (true, Some(mp)) = (debug, &ev.priors[c]) {
            for t in 0..mp.shape()[0] {
                let bytes = io::encode_gray_pgm(&mp.slice(0, t, t + 1)?)?;
                art.write(&format!("priors/{}", io::mask_file_name(c, t)), &bytes)?;
            }
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(cfg.model_config(), cfg.seed)?;
    let path = cfg.out.join("checkpoint.bin");
    let bytes = fs::read(&path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    io::load_checkpoint_into(&bytes, &mut store)?;
    Ok((model, store))
}

fn write_manifest(art: &mut Artifacts, cfg: &RunConfig) -> Result<()> {
    let text = format!("# refvos {}\n{}", env!("CARGO_PKG_VERSION"), cfg.to_text());
    art.write("manifest.txt", text.as_bytes())
}

/// Execute `cfg.command`, writing artifacts under `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let mut art = Artifacts {
        dir: cfg.out.clone(),
        files: Vec::new(),
    };
    fs::create_dir_all(&cfg.out)?;
    write_manifest(&mut art, cfg)?;
    let mut summary = None;
    match cfg.command {
        Command::Train => {
            let train = cfg.train_set()?;
            art.write("dataset.txt", dataset_manifest(&train).as_bytes())?;
            let steps_per_epoch = train.len();
            let result = train_model(cfg, &train, |p| {
                if (p.step + 1) % steps_per_epoch == 0 {
                    log(&format!("epoch {} step {} loss {:.6}", p.epoch, p.step + 1, p.report.loss));
                }
            });
            let (model, store, losses) = match result {
                Ok(r) => r,
                Err((e, failure)) => {
                    if let Some(f) = failure {
                        let dump = format!(
                            "epoch = {}\nstep = {}\nclip = {}\nerror = {}\n",
                            f.epoch, f.step, f.clip, f.message
                        );
                        art.write("numerical_failure.txt", dump.as_bytes())?;
                    }
                    return Err(e);
                }
            };
            let loss_log: String = losses.iter().map(|l| format!("{l:.9}\n")).collect();
            art.write("loss.txt", loss_log.as_bytes())?;
            art.write("checkpoint.bin", &io::encode_checkpoint(&store))?;
            art.write("checkpoint_manifest.txt", io::checkpoint_manifest(&store, cfg.seed).as_bytes())?;
            let eval = cfg.eval_set()?;
            let ev = evaluate_model(&model, &store, &eval, cfg.tolerance, None)?;
            art.write("metrics.txt", io::metrics_report(&ev.records, ev.summary)?.as_bytes())?;
            write_predictions(&mut art, &ev, cfg.debug_dump)?;
            summary = Some(ev.summary);
        }
        Command::Eval | Command::Infer => {
            let (model, store) = load_model(cfg)?;
            let eval = cfg.eval_set()?;
            art.write("eval_dataset.txt", dataset_manifest(&eval).as_bytes())?;
            let ev = evaluate_model(&model, &store, &eval, cfg.tolerance, None)?;
            if cfg.command == Command::Eval {
                art.write("metrics.txt", io::metrics_report(&ev.records, ev.summary)?.as_bytes())?;
                summary = Some(ev.summary);
            }
            write_predictions(&mut art, &ev, cfg.debug_dump)?;
        }
        Command::Gradcheck => {
            let small = RunConfig {
                frames: cfg.frames.min(2),
                ..cfg.clone()
            };
            let (model, store) = Model::new(small.model_config(), cfg.seed)?;
            let clip = small.train_set()?.swap_remove(0);
            let points = sample_gradcheck_points(&store, cfg.gradcheck_samples, cfg.seed);
            let report = model_gradcheck(&model, &store, &clip, &points, 1e-5, 1e-4)?;
            art.write("gradcheck.txt", gradcheck_report(&store, &report).as_bytes())?;
            log(&format!(
                "gradcheck: {} samples, max relative error {:e}",
                report.checked(),
                report.max_rel_err()
            ));
            if !report.passed() {
                return Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {:e}",
                    report.max_rel_err()
                )));
            }
        }
        Command::Ablate => {
            let rows = run_ablation(cfg, &component_matrix(), |name, p| {
                if (p.step + 1) % cfg.clips == 0 {
                    log(&format!("{name}: epoch {} loss {:.6}", p.epoch, p.report.loss));
                }
            }, |_, _, _, _| Ok(()))?;
            let table = ablation_table(&rows);
            log(&table);
            art.write("ablation.txt", table.as_bytes())?;
        }
    }
    Ok(RunSummary {
        command: cfg.command,
        summary,
        files: art.files,
    })
}

/// Process exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

/// Read a config file and apply it over the defaults.
pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_text(&text)
}
