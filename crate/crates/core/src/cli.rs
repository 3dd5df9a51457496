//! Command-line driver: `facedet [global flags] <subcommand> [flags]`.
//!
//! Settings resolve in order: built-in defaults, the `--config` file,
//! `--set key=value` overrides, then dedicated flags. Every run writes
//! `manifest.txt` (resolved settings, seed, versions) into `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{match_baseline, match_two_step, MatchConfig};
use crate::data::{
    load_ppm, parse_widerface_annotations, serialize_widerface_annotations, synth_dataset, write_pgm,
    AnnotationRecord, AugConfig, Dataset, SynthConfig,
};
use crate::decode::{bench_decode, parse_detections, write_detections, DecodeConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    average_precision, counted_faces, fp_histogram, histogram_csv, histogram_svg, match_detections, pr_csv,
    pr_curve, pr_svg, DetectionSet, GroundTruth, GroundTruthSet,
};
use crate::geometry::{generate_anchors, iou_matrix, receptive_field, AnchorConfig, AnchorLayer, BBox};
use crate::gradcheck::{run_grad_checks, TOLERANCE};
use crate::toynet::{
    detect_dataset, load_weights, save_weights, train, Matcher, NetConfig, Network, TrainConfig,
};

/// Exit code for a completed run whose check failed or whose pipeline errored.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for bad flags or settings.
pub const EXIT_USAGE: i32 = 2;

/// Score bin edges for false-positive histograms.
pub const FP_EDGES: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Fusion, split heads and two-step matching.
    Fused,
    /// No fusion, shared head, single-threshold matching.
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fused => "fused",
            Variant::Baseline => "baseline",
        }
    }
}

/// Every tunable setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub anchors: AnchorConfig,
    pub matching: MatchConfig,
    pub decode: DecodeConfig,
    /// `seed`, `jobs`, `matcher` and `aug` are filled in by [`RunConfig::train_config`].
    pub train: TrainConfig,
    pub aug_enabled: bool,
    pub aug: AugConfig,
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub variant: Variant,
    pub eval_iou: f64,
    pub fp_score: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let aug = train.aug.clone().unwrap_or_default();
        RunConfig {
            seed: 42,
            jobs: 1,
            anchors: AnchorConfig::default(),
            matching: MatchConfig::default(),
            decode: DecodeConfig::default(),
            train,
            aug_enabled: true,
            aug,
            synth: SynthConfig::default(),
            n_train: 500,
            n_val: 100,
            variant: Variant::Fused,
            eval_iou: 0.5,
            fp_score: 0.8,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u32>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

/// Parses `WxH`.
pub fn parse_size(key: &str, value: &str) -> Result<(u32, u32)> {
    let (w, h) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("{key}: expected WxH, got {value:?}")))?;
    Ok((parse_num(key, w.trim())?, parse_num(key, h.trim())?))
}

fn join(v: impl IntoIterator<Item = u32>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting. `anchors.strides` resets the anchor
    /// sizes to four times each stride.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let s = &mut self.synth;
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "anchors.image" => {
                (self.anchors.image_w, self.anchors.image_h) = parse_size(key, v)?;
            }
            "anchors.strides" => {
                self.anchors.layers = parse_list(key, v)?
                    .into_iter()
                    .map(|stride| AnchorLayer { stride, size: 4 * stride })
                    .collect();
            }
            "anchors.sizes" => {
                let sizes = parse_list(key, v)?;
                if sizes.len() != self.anchors.layers.len() {
                    return Err(Error::Config(format!(
                        "{key}: {} sizes for {} strides",
                        sizes.len(),
                        self.anchors.layers.len()
                    )));
                }
                for (l, size) in self.anchors.layers.iter_mut().zip(sizes) {
                    l.size = size;
                }
            }
            "match.step1_iou" => self.matching.step1_iou = parse_num(key, v)?,
            "match.max_extra_anchors" => self.matching.max_extra_anchors = parse_num(key, v)?,
            "match.step2_iou_floor" => self.matching.step2_iou_floor = parse_num(key, v)?,
            "decode.score_threshold" => self.decode.score_threshold = parse_num(key, v)?,
            "decode.nms_threshold" => self.decode.nms_threshold = parse_num(key, v)?,
            "decode.report_threshold" => self.decode.report_threshold = parse_num(key, v)?,
            "decode.max_detections" => self.decode.max_detections = parse_num(key, v)?,
            "decode.clip_to_image" => self.decode.clip_to_image = parse_bool(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.plateau_patience" => t.plateau_patience = parse_num(key, v)?,
            "train.lr_divisor" => t.lr_divisor = parse_num(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse_num(key, v)?,
            "train.lambda" => t.lambda = parse_num(key, v)?,
            "train.ohem_ratio" => t.ohem_ratio = parse_num(key, v)?,
            "aug.enabled" => self.aug_enabled = parse_bool(key, v)?,
            "aug.crop_min" => self.aug.crop_min = parse_num(key, v)?,
            "aug.crop_max" => self.aug.crop_max = parse_num(key, v)?,
            "aug.output_size" => self.aug.output_size = parse_num(key, v)?,
            "aug.hflip" => self.aug.hflip = parse_num(key, v)?,
            "aug.brightness" => self.aug.brightness = parse_num(key, v)?,
            "synth.width" => s.width = parse_num(key, v)?,
            "synth.height" => s.height = parse_num(key, v)?,
            "synth.faces_min" => s.faces_min = parse_num(key, v)?,
            "synth.faces_max" => s.faces_max = parse_num(key, v)?,
            "synth.size_min" => s.size_min = parse_num(key, v)?,
            "synth.size_max" => s.size_max = parse_num(key, v)?,
            "synth.noise" => s.noise = parse_num(key, v)?,
            "synth.contrast" => s.contrast = parse_num(key, v)?,
            "synth.decoys_min" => s.decoys_min = parse_num(key, v)?,
            "synth.decoys_max" => s.decoys_max = parse_num(key, v)?,
            "data.train" => self.n_train = parse_num(key, v)?,
            "data.val" => self.n_val = parse_num(key, v)?,
            "net.variant" => {
                self.variant = match v {
                    "fused" => Variant::Fused,
                    "baseline" => Variant::Baseline,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected fused or baseline, got {v:?}"
                        )))
                    }
                }
            }
            "eval.iou" => self.eval_iou = parse_num(key, v)?,
            "eval.fp_score" => self.fp_score = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in the order the config file
    /// format lists them.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.synth;
        let a = &self.aug;
        vec![
            ("seed", self.seed.to_string()),
            ("jobs", self.jobs.to_string()),
            ("anchors.image", format!("{}x{}", self.anchors.image_w, self.anchors.image_h)),
            ("anchors.strides", join(self.anchors.layers.iter().map(|l| l.stride))),
            ("anchors.sizes", join(self.anchors.layers.iter().map(|l| l.size))),
            ("match.step1_iou", self.matching.step1_iou.to_string()),
            ("match.max_extra_anchors", self.matching.max_extra_anchors.to_string()),
            ("match.step2_iou_floor", self.matching.step2_iou_floor.to_string()),
            ("decode.score_threshold", self.decode.score_threshold.to_string()),
            ("decode.nms_threshold", self.decode.nms_threshold.to_string()),
            ("decode.report_threshold", self.decode.report_threshold.to_string()),
            ("decode.max_detections", self.decode.max_detections.to_string()),
            ("decode.clip_to_image", self.decode.clip_to_image.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.plateau_patience", t.plateau_patience.to_string()),
            ("train.lr_divisor", t.lr_divisor.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.ohem_ratio", t.ohem_ratio.to_string()),
            ("aug.enabled", self.aug_enabled.to_string()),
            ("aug.crop_min", a.crop_min.to_string()),
            ("aug.crop_max", a.crop_max.to_string()),
            ("aug.output_size", a.output_size.to_string()),
            ("aug.hflip", a.hflip.to_string()),
            ("aug.brightness", a.brightness.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.faces_min", s.faces_min.to_string()),
            ("synth.faces_max", s.faces_max.to_string()),
            ("synth.size_min", s.size_min.to_string()),
            ("synth.size_max", s.size_max.to_string()),
            ("synth.noise", s.noise.to_string()),
            ("synth.contrast", s.contrast.to_string()),
            ("synth.decoys_min", s.decoys_min.to_string()),
            ("synth.decoys_max", s.decoys_max.to_string()),
            ("data.train", self.n_train.to_string()),
            ("data.val", self.n_val.to_string()),
            ("net.variant", self.variant.name().to_string()),
            ("eval.iou", self.eval_iou.to_string()),
            ("eval.fp_score", self.fp_score.to_string()),
        ]
    }

    /// Applies a config file: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.matching.validate()?;
        self.decode.validate()?;
        self.train_config().validate()?;
        self.aug.validate()?;
        self.synth.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("data.train must be at least 1".into()));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval.iou {} outside (0, 1]", self.eval_iou)));
        }
        if !(self.fp_score > 0.0 && self.fp_score < 1.0) {
            return Err(Error::Config(format!("eval.fp_score {} outside (0, 1)", self.fp_score)));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        match self.variant {
            Variant::Fused => NetConfig::default(),
            Variant::Baseline => NetConfig::default().baseline(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let matcher = match self.variant {
            Variant::Fused => Matcher::TwoStep(self.matching),
            Variant::Baseline => Matcher::Baseline {
                iou: self.matching.step1_iou,
            },
        };
        TrainConfig {
            seed: self.seed,
            jobs: self.jobs,
            matcher,
            aug: self.aug_enabled.then(|| self.aug.clone()),
            ..self.train.clone()
        }
    }

    /// The seeded synthetic set, split into training and validation images.
    pub fn synth_split(&self) -> Result<(Dataset, Dataset)> {
        Ok(synth_dataset(&self.synth, self.n_train + self.n_val, self.seed)?.split(self.n_train))
    }
}

#[derive(Parser, Debug)]
#[command(name = "facedet", version, about = "Single-stage face detection toolkit")]
struct Cli {
    /// Settings file of `key = value` lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer anchor counts for an input size
    Anchors {
        #[arg(long, value_name = "WxH")]
        image: Option<String>,
        /// Also write every anchor box
        #[arg(long)]
        dump: bool,
    },
    /// Receptive fields of the toy detector's detection layers
    Rf,
    /// Single-threshold vs two-step matching on a random scene
    MatchDemo {
        #[arg(long, default_value_t = 8)]
        faces: usize,
    },
    /// Finite-difference gradient checks
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train the toy detector on the synthetic training split
    Train,
    /// Run trained weights over images (default: the synthetic validation split)
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Binary PGM or PPM files
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
    },
    /// Average precision and precision-recall curve
    Eval(EvalInput),
    /// Histogram of false-positive scores
    FpHist(EvalInput),
    /// Time baseline and score-first decoding on synthetic outputs
    BenchDecode {
        #[arg(long, default_value_t = 34_125)]
        anchors: usize,
        #[arg(long, default_value_t = 0.01)]
        hot: f64,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
    },
    /// Write the synthetic dataset as PGM images plus a ground-truth file
    Synth {
        /// Images to write (default: data.train + data.val)
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct EvalInput {
    /// Trained weights, scored on the synthetic validation split (repeatable)
    #[arg(long, conflicts_with_all = ["detections", "annotations"])]
    weights: Vec<PathBuf>,
    /// Detection file to score instead of weights
    #[arg(long, requires = "annotations")]
    detections: Option<PathBuf>,
    /// Ground-truth file for `--detections`
    #[arg(long, requires = "detections")]
    annotations: Option<PathBuf>,
}

struct Ctx<'a> {
    cfg: RunConfig,
    out_dir: PathBuf,
    stdout: &'a mut dyn Write,
    manifest_extra: Vec<(String, String)>,
}

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.out_dir.join(name), bytes)?;
        Ok(())
    }

    fn say(&mut self, line: &str) -> Result<()> {
        writeln!(self.stdout, "{line}")?;
        Ok(())
    }

    fn record(&mut self, key: &str, value: impl ToString) {
        self.manifest_extra.push((key.to_string(), value.to_string()));
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Command::Anchors { image: Some(size), .. } = &cli.command {
        (cfg.anchors.image_w, cfg.anchors.image_h) = parse_size("--image", size)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(command: &str, ctx: &Ctx<'_>) -> String {
    let mut m = String::from("# facedet run manifest\n");
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "weights_format = {}", crate::toynet::weights::VERSION);
    for (k, v) in &ctx.manifest_extra {
        let _ = writeln!(m, "{k} = {v}");
    }
    m.push_str(&ctx.cfg.to_text());
    m
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Human-readable progress goes to `stdout`, errors to
/// stderr.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = e.print();
            } else {
                let _ = write!(stdout, "{}", e.render());
            }
            return e.exit_code();
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut ctx = Ctx {
        cfg,
        out_dir: cli.out.clone(),
        stdout,
        manifest_extra: Vec::new(),
    };
    let code = match dispatch(&cli.command, &mut ctx) {
        Ok(passed) => {
            if passed {
                0
            } else {
                EXIT_FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    };
    let _ = ctx.stdout.flush();
    code
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Anchors { .. } => "anchors",
        Command::Rf => "rf",
        Command::MatchDemo { .. } => "match-demo",
        Command::GradCheck { .. } => "grad-check",
        Command::Train => "train",
        Command::Detect { .. } => "detect",
        Command::Eval(_) => "eval",
        Command::FpHist(_) => "fp-hist",
        Command::BenchDecode { .. } => "bench-decode",
        Command::Synth { .. } => "synth",
    }
}

/// `Ok(false)` means the run finished but its check failed.
fn dispatch(cmd: &Command, ctx: &mut Ctx<'_>) -> Result<bool> {
    fs::create_dir_all(&ctx.out_dir)?;
    let passed = match cmd {
        Command::Anchors { dump, .. } => cmd_anchors(ctx, *dump)?,
        Command::Rf => cmd_rf(ctx)?,
        Command::MatchDemo { faces } => cmd_match_demo(ctx, *faces)?,
        Command::GradCheck { instances } => cmd_grad_check(ctx, *instances)?,
        Command::Train => cmd_train(ctx)?,
        Command::Detect { weights, images } => cmd_detect(ctx, weights, images)?,
        Command::Eval(input) => cmd_eval(ctx, input)?,
        Command::FpHist(input) => cmd_fp_hist(ctx, input)?,
        Command::BenchDecode { anchors, hot, repeats } => cmd_bench(ctx, *anchors, *hot, *repeats)?,
        Command::Synth { count } => cmd_synth(ctx, *count)?,
    };
    let m = manifest(command_name(cmd), ctx);
    ctx.write("manifest.txt", m)?;
    Ok(passed)
}

fn cmd_anchors(ctx: &mut Ctx<'_>, dump: bool) -> Result<bool> {
    let a = ctx.cfg.anchors.clone();
    let mut csv = String::from("layer,stride,size,rows,cols,count\n");
    ctx.say(&format!("image {}x{}", a.image_w, a.image_h))?;
    for (i, (l, (r, c))) in a.layers.iter().zip(a.layer_dims()).enumerate() {
        let _ = writeln!(csv, "{i},{},{},{r},{c},{}", l.stride, l.size, r * c);
        ctx.say(&format!(
            "layer {i}: stride {:>3} size {:>3} grid {r}x{c} = {}",
            l.stride,
            l.size,
            r * c
        ))?;
    }
    let total = a.anchor_count();
    let _ = writeln!(csv, "total,,,,,{total}");
    ctx.say(&format!("total {total}"))?;
    ctx.write("anchors.csv", csv)?;
    if dump {
        ctx.write("anchor_boxes.csv", generate_anchors(&a)?.to_csv())?;
    }
    Ok(true)
}

fn cmd_rf(ctx: &mut Ctx<'_>) -> Result<bool> {
    let mut csv = String::from("variant,layer,stride,anchor_size,backbone_rf,detection_rf\n");
    for variant in [Variant::Fused, Variant::Baseline] {
        let cfg = RunConfig {
            variant,
            ..ctx.cfg.clone()
        }
        .net_config();
        let net = Network::<f32>::zeros(&cfg)?;
        for (t, layer) in cfg.anchors.layers.iter().enumerate() {
            let own = receptive_field(&cfg.backbone_stack(t))?.rf_size;
            let det = net.detection_rf(t)?;
            let _ = writeln!(csv, "{},{t},{},{},{own},{det}", variant.name(), layer.stride, layer.size);
            ctx.say(&format!(
                "{:<8} layer {t}: stride {} anchor {} rf {own} -> {det}",
                variant.name(),
                layer.stride,
                layer.size
            ))?;
        }
    }
    ctx.write("rf.csv", csv)?;
    Ok(true)
}

/// Square faces with log-uniform sides in `[4, min(w, h) / 2]`.
fn random_faces(rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32) -> Result<Vec<BBox>> {
    let (w, h) = (f64::from(w), f64::from(h));
    let hi = (w.min(h) / 2.0).max(5.0);
    (0..n)
        .map(|_| {
            let side = rng.random_range(4f64.ln()..hi.ln()).exp().min(w).min(h);
            let x = rng.random_range(0.0..=w - side);
            let y = rng.random_range(0.0..=h - side);
            BBox::new(x, y, x + side, y + side)
        })
        .collect()
}

fn cmd_match_demo(ctx: &mut Ctx<'_>, n_faces: usize) -> Result<bool> {
    let a = ctx.cfg.anchors.clone();
    let grid = generate_anchors(&a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let faces = random_faces(&mut rng, n_faces, a.image_w, a.image_h)?;
    let base = match_baseline(grid.anchors(), &faces, ctx.cfg.matching.step1_iou)?;
    let two = match_two_step(grid.anchors(), &faces, &ctx.cfg.matching)?;
    let table = iou_matrix(&faces, grid.anchors())?;
    let mut csv = String::from("face,x1,y1,x2,y2,best_iou,baseline_anchors,two_step_anchors\n");
    ctx.say("face  side    best_iou  baseline  two-step")?;
    for (g, f) in faces.iter().enumerate() {
        let best = table.row(g).iter().copied().fold(0.0, f64::max);
        let (nb, nt) = (base.per_gt()[g].len(), two.per_gt()[g].len());
        let _ = writeln!(
            csv,
            "{g},{:.2},{:.2},{:.2},{:.2},{best:.4},{nb},{nt}",
            f.x1, f.y1, f.x2, f.y2
        );
        ctx.say(&format!("{g:>4}  {:>6.1}  {best:>8.4}  {nb:>8}  {nt:>8}", f.width()))?;
    }
    ctx.write("match_demo.csv", csv)?;
    ctx.write("match_baseline.csv", base.to_csv())?;
    ctx.write("match_two_step.csv", two.to_csv())?;
    Ok(true)
}

fn cmd_grad_check(ctx: &mut Ctx<'_>, instances: usize) -> Result<bool> {
    let report = run_grad_checks(ctx.cfg.seed, instances)?;
    ctx.write("gradcheck.csv", report.to_csv())?;
    for c in &report.components {
        ctx.say(&format!(
            "{:<16} instances {:>4} checked {:>6} skipped {:>4} max_rel_err {:.3e}",
            c.name, c.instances, c.checked, c.skipped, c.max_rel_err
        ))?;
    }
    let passed = report.passed();
    ctx.say(&format!(
        "max relative error {:.3e} (tolerance {TOLERANCE:e}): {}",
        report.max_rel_err(),
        if passed { "PASS" } else { "FAIL" }
    ))?;
    Ok(passed)
}

fn cmd_train(ctx: &mut Ctx<'_>) -> Result<bool> {
    let (train_set, _) = ctx.cfg.synth_split()?;
    let mut net = crate::toynet::build_network::<f32>(&ctx.cfg.net_config(), ctx.cfg.seed)?;
    let report = train(&mut net, &train_set, &ctx.cfg.train_config())?;
    for e in &report.epochs {
        ctx.say(&format!(
            "epoch {:>3} lr {:e} loss {:.6} (cls {:.6}, reg {:.6})",
            e.epoch, e.lr, e.mean_loss, e.mean_cls, e.mean_reg
        ))?;
    }
    ctx.write("train_log.csv", report.to_csv())?;
    ctx.write("weights.bin", save_weights(&net))?;
    ctx.say(&format!("wrote {} parameters", net.param_count()))?;
    Ok(true)
}

/// Loads weights of either topology.
pub fn load_any_weights(bytes: &[u8]) -> Result<(Network<f32>, Variant)> {
    match load_weights(bytes, &NetConfig::default()) {
        Ok(net) => Ok((net, Variant::Fused)),
        Err(first) => load_weights(bytes, &NetConfig::default().baseline())
            .map(|net| (net, Variant::Baseline))
            .map_err(|_| first),
    }
}

fn read_weights(ctx: &mut Ctx<'_>, path: &Path) -> Result<Network<f32>> {
    let (net, variant) = load_any_weights(&fs::read(path)?)?;
    ctx.record("input.weights", format!("{} ({})", path.display(), variant.name()));
    Ok(net)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_detect(ctx: &mut Ctx<'_>, weights: &Path, images: &[PathBuf]) -> Result<bool> {
    let net = read_weights(ctx, weights)?;
    let data = if images.is_empty() {
        ctx.cfg.synth_split()?.1
    } else {
        let mut d = Dataset::default();
        for p in images {
            d.names.push(file_name(p));
            d.images.push(load_ppm(&fs::read(p)?)?);
            d.boxes.push(Vec::new());
            ctx.record("input.image", p.display());
        }
        d
    };
    let dets = detect_dataset(&net, &data, &ctx.cfg.decode, ctx.cfg.jobs)?;
    let n: usize = dets.values().map(Vec::len).sum();
    ctx.write(
        "detections.txt",
        write_detections(dets.iter().map(|(k, v)| (k.as_str(), v.as_slice()))),
    )?;
    ctx.say(&format!("{n} detections over {} images", data.len()))?;
    Ok(true)
}

fn ground_truth_from(records: &[AnnotationRecord]) -> GroundTruthSet {
    records
        .iter()
        .map(|r| {
            let faces = r
                .faces
                .iter()
                .filter_map(|f| {
                    f.bbox().map(|bbox| GroundTruth {
                        bbox,
                        ignore: f.ignored(),
                    })
                })
                .collect();
            (r.path.clone(), faces)
        })
        .collect()
}

/// `(label, detections, ground truth)` for every requested source.
fn eval_sources(ctx: &mut Ctx<'_>, input: &EvalInput) -> Result<Vec<(String, DetectionSet, GroundTruthSet)>> {
    if let (Some(dp), Some(ap)) = (&input.detections, &input.annotations) {
        let dets: DetectionSet = parse_detections(&fs::read_to_string(dp)?)?.into_iter().collect();
        let gts = ground_truth_from(&parse_widerface_annotations(&fs::read_to_string(ap)?)?);
        ctx.record("input.detections", dp.display());
        ctx.record("input.annotations", ap.display());
        let label = dp.file_stem().map_or("detections".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![(label, dets, gts)]);
    }
    if input.weights.is_empty() {
        return Err(Error::Config("give --weights or --detections with --annotations".into()));
    }
    let (_, val) = ctx.cfg.synth_split()?;
    if val.is_empty() {
        return Err(Error::Config("data.val must be at least 1 to score weights".into()));
    }
    let gts = val.ground_truth();
    let mut out = Vec::new();
    for path in &input.weights {
        let net = read_weights(ctx, path)?;
        let dets = detect_dataset(&net, &val, &ctx.cfg.decode, ctx.cfg.jobs)?;
        let label = path.file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned());
        out.push((label, dets, gts.clone()));
    }
    Ok(out)
}

fn cmd_eval(ctx: &mut Ctx<'_>, input: &EvalInput) -> Result<bool> {
    let mut summary = String::from("source,ap,faces,detections\n");
    for (label, dets, gts) in eval_sources(ctx, input)? {
        let flags = match_detections(&dets, &gts, ctx.cfg.eval_iou)?;
        let curve = pr_curve(&flags, counted_faces(&gts))?;
        let ap = average_precision(&curve);
        let _ = writeln!(summary, "{label},{ap:.6},{},{}", counted_faces(&gts), flags.len());
        ctx.write(&format!("pr_{label}.csv"), pr_csv(&curve))?;
        ctx.write(&format!("pr_{label}.svg"), pr_svg(&curve, &format!("precision-recall: {label}")))?;
        ctx.say(&format!("{label}: AP {ap:.4} over {} faces", counted_faces(&gts)))?;
    }
    ctx.write("eval_summary.csv", summary)?;
    Ok(true)
}

fn cmd_fp_hist(ctx: &mut Ctx<'_>, input: &EvalInput) -> Result<bool> {
    let thr = ctx.cfg.fp_score;
    let mut summary = format!("source,false_positives,false_positives_at_or_above_{thr}\n");
    for (label, dets, gts) in eval_sources(ctx, input)? {
        let flags = match_detections(&dets, &gts, ctx.cfg.eval_iou)?;
        let counts = fp_histogram(&flags, &FP_EDGES);
        let total: usize = counts.iter().sum();
        let high = fp_histogram(&flags, &[thr, 1.0])[0];
        let _ = writeln!(summary, "{label},{total},{high}");
        ctx.write(&format!("fp_hist_{label}.csv"), histogram_csv(&FP_EDGES, &counts))?;
        ctx.write(
            &format!("fp_hist_{label}.svg"),
            histogram_svg(&FP_EDGES, &counts, &format!("false positives: {label}")),
        )?;
        ctx.say(&format!("{label}: {total} false positives, {high} scoring >= {thr}"))?;
    }
    ctx.write("fp_summary.csv", summary)?;
    Ok(true)
}

fn cmd_bench(ctx: &mut Ctx<'_>, anchors: usize, hot: f64, repeats: usize) -> Result<bool> {
    let r = bench_decode(anchors, hot, repeats, ctx.cfg.seed)?;
    ctx.record("bench.anchors", anchors);
    ctx.record("bench.hot", hot);
    ctx.record("bench.repeats", repeats);
    ctx.write("bench_decode.csv", r.to_csv())?;
    ctx.say(&format!(
        "baseline {:.0} ns, improved {:.0} ns, ratio {:.3}; decode ops {} vs {}; paths {}",
        r.baseline.mean_ns,
        r.improved.mean_ns,
        r.time_ratio,
        r.baseline.decode_ops,
        r.improved.decode_ops,
        if r.agreed { "agreed" } else { "DISAGREED" }
    ))?;
    Ok(r.agreed)
}

fn cmd_synth(ctx: &mut Ctx<'_>, count: Option<usize>) -> Result<bool> {
    let n = count.unwrap_or(ctx.cfg.n_train + ctx.cfg.n_val);
    ctx.record("synth.count", n);
    let data = synth_dataset(&ctx.cfg.synth, n, ctx.cfg.seed)?;
    let dir = ctx.out_dir.join("images");
    fs::create_dir_all(&dir)?;
    for (name, img) in data.names.iter().zip(&data.images) {
        fs::write(dir.join(name), write_pgm(img))?;
    }
    ctx.write("annotations.txt", serialize_widerface_annotations(&data.annotations()))?;
    let faces: usize = data.boxes.iter().map(Vec::len).sum();
    ctx.say(&format!("{n} images, {faces} faces"))?;
    Ok(true)
}
