//! Batch CLI: synthetic data generation, training, prediction, scoring and
//! gradient checking. Exit codes: 0 success, 1 check or validation failure,
//! 2 usage error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use nowcast::augment::center_crop;
use nowcast::binning::NUM_BINS;
use nowcast::dataio::{
    parse_manifest, read_tensor, synth_generate, write_tensor, SynthConfig,
};
use nowcast::losses::{grad_check_biased, GradCheckTrial, LossConfig, LossKind};
use nowcast::metrics::{evaluate, render_tsv};
use nowcast::model::{
    end_to_end_grad_check, load_checkpoint, predict, save_checkpoint, train, Arch, EpochStats,
    PipelineConfig, TrainConfig, UNetConfig,
};
use nowcast::{RainBins, Tensor};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Rainfall nowcasting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a history TSV
    Train(TrainArgs),
    /// Run a checkpoint over a dataset, writing one rates tensor per sample
    Predict(PredictArgs),
    /// Score prediction tensors against truth tensors, printing a TSV table
    Score(ScoreArgs),
    /// Finite-difference checks of the analytic gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Geometry,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossFlag {
    Dice,
    MlDice,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_bool(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchFlag {
    Unet2d,
    Unet3d,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Generator seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// desk: fast 32x32 grids; geometry: full 252x252 grids [default: desk]
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Override the preset's sequence count
    #[arg(long)]
    sequences: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest_train.txt and manifest_val.txt
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the history TSV lands at <out>.history.tsv
    #[arg(long)]
    out: PathBuf,
    /// Training objective [default: ml-dice]
    #[arg(long, value_enum)]
    loss: Option<LossFlag>,
    /// Temporal frame interpolation [default: on]
    #[arg(long, value_enum)]
    tfi: Option<Switch>,
    /// Geometric flip augmentation [default: on]
    #[arg(long, value_enum)]
    aug: Option<Switch>,
    /// Network variant [default: unet2d]
    #[arg(long, value_enum)]
    arch: Option<ArchFlag>,
    /// Epoch budget [default: 90]
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key = value file overriding defaults; flags beat the file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for prediction tensors
    #[arg(long)]
    out: PathBuf,
    /// Manifest file name inside the data directory [default: manifest.txt]
    #[arg(long, default_value = "manifest.txt")]
    manifest: String,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory of prediction tensors (*.nwt)
    #[arg(long)]
    pred: PathBuf,
    /// Directory of truth tensors with matching file names
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one objective; default checks both
    #[arg(long, value_enum)]
    loss: Option<LossFlag>,
    /// Restrict the logcosh axis; default checks on and off
    #[arg(long, value_enum)]
    logcosh: Option<Switch>,
    /// Base seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failures carry the exit code they map to: 1 for validation and check
/// failures, 2 for usage errors.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn check(message: impl Into<String>) -> Failure {
        Failure { code: 1, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Failure {
        Failure::check(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let mut cfg = match args.preset {
        Preset::Desk => SynthConfig::desk(args.seed),
        Preset::Geometry => SynthConfig::geometry(args.seed),
    };
    if let Some(n) = args.sequences {
        cfg.sequences = n;
    }
    let entries = synth_generate(&cfg, &args.out)?;
    let bins = RainBins::default();
    let mut histogram = [0u64; NUM_BINS];
    for entry in &entries {
        let targets = read_tensor(&args.out.join(&entry.target_path))?;
        let plane = targets.shape()[1] * targets.shape()[2];
        let t_out = targets.shape()[0] - 1;
        for &r in &targets.data()[..t_out * plane] {
            histogram[bins.quantize(r)?] += 1;
        }
    }
    println!("sequences: {}", entries.len());
    println!("target bin histogram (pixels per bin):");
    for (i, count) in histogram.iter().enumerate() {
        println!("  bin {i}: {count}");
    }
    Ok(())
}

/// Flat `key = value` configuration file; unknown keys are errors.
#[derive(Default)]
struct FileConfig(BTreeMap<String, String>);

const CONFIG_KEYS: &[&str] = &[
    "learning_rate",
    "weight_decay",
    "batch_size",
    "epochs",
    "lr_decay",
    "patience",
    "seed",
    "loss",
    "tfi",
    "aug",
    "arch",
    "depth",
    "base_width",
    "dropout",
    "epsilon",
    "numerator_factor",
    "logcosh",
];

impl FileConfig {
    fn load(path: &Path) -> Result<FileConfig, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::usage(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Failure::usage(format!(
                    "{}:{}: unknown config key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Failure::usage(format!("config key `{key}`: cannot parse `{v}`"))
            }),
        }
    }

    fn parse_switch(&self, key: &str) -> Result<Option<bool>, Failure> {
        match self.0.get(key).map(String::as_str) {
            None => Ok(None),
            Some("on") => Ok(Some(true)),
            Some("off") => Ok(Some(false)),
            Some(v) => Err(Failure::usage(format!(
                "config key `{key}`: expected on/off, got `{v}`"
            ))),
        }
    }
}

fn history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".history.tsv");
    PathBuf::from(s)
}

fn render_history(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\tval_mcsi\n");
    for h in history {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6e}\t{:.5}",
            h.epoch, h.train_loss, h.val_loss, h.lr, h.val_mcsi
        );
    }
    out
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };

    let mut tcfg = TrainConfig::default();
    if let Some(v) = file.parse("learning_rate")? {
        tcfg.learning_rate = v;
    }
    if let Some(v) = file.parse("weight_decay")? {
        tcfg.weight_decay = v;
    }
    if let Some(v) = file.parse("batch_size")? {
        tcfg.batch_size = v;
    }
    if let Some(v) = file.parse("epochs")? {
        tcfg.max_epochs = v;
    }
    if let Some(v) = file.parse("lr_decay")? {
        tcfg.lr_decay = v;
    }
    if let Some(v) = file.parse("patience")? {
        tcfg.patience = v;
    }
    if let Some(v) = file.parse("seed")? {
        tcfg.seed = v;
    }
    if let Some(v) = file.parse("epsilon")? {
        tcfg.loss.epsilon = v;
    }
    if let Some(v) = file.parse("numerator_factor")? {
        tcfg.loss.numerator_factor = v;
    }
    if let Some(v) = file.parse_switch("logcosh")? {
        tcfg.loss.use_logcosh = v;
    }
    match file.0.get("loss").map(String::as_str) {
        None => {}
        Some("dice") => tcfg.loss.loss_kind = LossKind::Dice,
        Some("ml_dice") => tcfg.loss.loss_kind = LossKind::MlDice,
        Some(v) => {
            return Err(Failure::usage(format!(
                "config key `loss`: expected dice/ml_dice, got `{v}`"
            )))
        }
    }
    if let Some(v) = file.parse_switch("tfi")? {
        tcfg.tfi = v;
    }
    if let Some(v) = file.parse_switch("aug")? {
        tcfg.flips = v;
    }

    let mut arch = match file.0.get("arch").map(String::as_str) {
        None => Arch::UNet2d,
        Some(v) => Arch::parse(v).map_err(|e| Failure::usage(e.to_string()))?,
    };
    let depth = file.parse("depth")?.unwrap_or(3usize);
    let base_width = file.parse("base_width")?.unwrap_or(16usize);
    let dropout = file.parse("dropout")?.unwrap_or(0.0f32);

    // explicit flags beat the config file
    if let Some(v) = args.loss {
        tcfg.loss.loss_kind = match v {
            LossFlag::Dice => LossKind::Dice,
            LossFlag::MlDice => LossKind::MlDice,
        };
    }
    if let Some(v) = args.tfi {
        tcfg.tfi = v.as_bool();
    }
    if let Some(v) = args.aug {
        tcfg.flips = v.as_bool();
    }
    if let Some(v) = args.epochs {
        tcfg.max_epochs = v;
    }
    if let Some(v) = args.seed {
        tcfg.seed = v;
    }
    if let Some(v) = args.arch {
        arch = match v {
            ArchFlag::Unet2d => Arch::UNet2d,
            ArchFlag::Unet3d => Arch::UNet3d,
        };
    }

    let train_entries = parse_manifest(&args.data.join("manifest_train.txt"))?;
    let val_entries = parse_manifest(&args.data.join("manifest_val.txt"))?;
    if train_entries.is_empty() || val_entries.is_empty() {
        return Err(Failure::check(
            "training needs non-empty manifest_train.txt and manifest_val.txt",
        ));
    }

    // geometry and channel counts follow the first sample
    let probe = nowcast::dataio::load_sample_ext(&args.data, &train_entries[0])?;
    let (frames_in, bands) = (probe.frames_in(), probe.inputs.shape()[1]);
    let timesteps = probe.timesteps();
    let sat_side = probe.inputs.shape()[2].min(probe.inputs.shape()[3]);
    let radar_side = probe.targets.shape()[1].min(probe.targets.shape()[2]);
    let pipeline = if sat_side >= 252 {
        PipelineConfig::geometry()
    } else {
        if radar_side % sat_side != 0 {
            return Err(Failure::check(format!(
                "radar side {radar_side} is not a multiple of satellite side {sat_side}"
            )));
        }
        PipelineConfig {
            input_crop: sat_side,
            patch_side: sat_side,
            upsample_factor: radar_side / sat_side,
        }
    };
    let cfg = UNetConfig {
        arch,
        in_channels: match arch {
            Arch::UNet2d => frames_in * bands,
            Arch::UNet3d => bands,
        },
        frames_in,
        out_channels: timesteps * NUM_BINS,
        depth,
        base_width,
        dropout,
    };

    let bins = RainBins::default();
    let (state, history) = train(
        &args.data,
        &train_entries,
        &val_entries,
        &cfg,
        &pipeline,
        &tcfg,
        &bins,
    )?;
    save_checkpoint(&args.out, &state)?;
    std::fs::write(history_path(&args.out), render_history(&history))
        .map_err(|e| Failure::check(format!("{}: {e}", history_path(&args.out).display())))?;
    let last = history.last().expect("training ran at least one epoch");
    println!(
        "trained {} epochs; best val loss {:.6}; last val mCSI {:.5}",
        history.len(),
        state.best_val_loss,
        last.val_mcsi
    );
    println!("checkpoint: {}", args.out.display());
    println!("history: {}", history_path(&args.out).display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), Failure> {
    let state = load_checkpoint(&args.ckpt)?;
    let entries = parse_manifest(&args.data.join(&args.manifest))?;
    if entries.is_empty() {
        return Err(Failure::check(format!("{} lists no samples", args.manifest)));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::check(format!("{}: {e}", args.out.display())))?;
    let bins = RainBins::default();
    for entry in &entries {
        let ext = nowcast::dataio::load_sample_ext(&args.data, entry)?;
        let sat_side = ext.inputs.shape()[2].min(ext.inputs.shape()[3]);
        if sat_side < state.pipeline.input_crop {
            return Err(Failure::check(format!(
                "checkpoint expects a {} input crop but {:?} provides only {}x{}",
                state.pipeline.input_crop,
                entry.input_path,
                ext.inputs.shape()[2],
                ext.inputs.shape()[3]
            )));
        }
        // drop the trailing interpolation frame
        let frames_in = ext.frames_in();
        let frame_len: usize = ext.inputs.shape()[1..].iter().product();
        let mut shape = ext.inputs.shape().to_vec();
        shape[0] = frames_in;
        let inputs = Tensor::new(shape, ext.inputs.data()[..frames_in * frame_len].to_vec());
        let rates = predict(&state, &inputs, &bins)?;
        let name = entry
            .target_path
            .file_name()
            .ok_or_else(|| Failure::check(format!("{:?} has no file name", entry.target_path)))?;
        write_tensor(&args.out.join(name), &rates)?;
    }
    println!("wrote {} prediction tensors to {}", entries.len(), args.out.display());
    Ok(())
}

fn tensor_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::check(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "nwt").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Shrinks a truth tensor onto the prediction's grid: drops trailing frames
/// and center-crops, so raw dataset targets can be scored directly.
fn fit_truth(truth: &Tensor, pred_shape: &[usize]) -> Result<Tensor, Failure> {
    let (t, side) = (pred_shape[0], pred_shape[1]);
    if truth.shape() == pred_shape {
        return Ok(truth.clone());
    }
    if truth.shape()[0] < t || truth.shape()[1] < side || truth.shape()[2] < pred_shape[2] {
        return Err(Failure::check(format!(
            "truth shape {:?} cannot cover prediction shape {pred_shape:?}",
            truth.shape()
        )));
    }
    let plane = truth.shape()[1] * truth.shape()[2];
    let leading = Tensor::new(
        vec![t, truth.shape()[1], truth.shape()[2]],
        truth.data()[..t * plane].to_vec(),
    );
    Ok(center_crop(&leading, side)?)
}

fn cmd_score(args: &ScoreArgs) -> Result<(), Failure> {
    let pred_files = tensor_files(&args.pred)?;
    let truth_files = tensor_files(&args.truth)?;
    if pred_files.is_empty() {
        return Err(Failure::check(format!("{}: no .nwt files", args.pred.display())));
    }
    if pred_files.len() != truth_files.len() {
        return Err(Failure::usage(format!(
            "{} predictions vs {} truth files",
            pred_files.len(),
            truth_files.len()
        )));
    }
    let mut preds = Vec::with_capacity(pred_files.len());
    let mut truths = Vec::with_capacity(truth_files.len());
    for (p, t) in pred_files.iter().zip(&truth_files) {
        let pred = read_tensor(p)?;
        if pred.rank() != 3 {
            return Err(Failure::check(format!(
                "{}: predictions must be rank 3, got {:?}",
                p.display(),
                pred.shape()
            )));
        }
        let truth = fit_truth(&read_tensor(t)?, pred.shape())?;
        preds.push(pred);
        truths.push(truth);
    }
    let bins = RainBins::default();
    let report = evaluate(&preds, &truths, &bins)?;
    print!("{}", render_tsv(&report, &bins));
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    // hidden hook: a nonzero bias is added to every analytic derivative so
    // the detector itself can be shown to fail
    let bias: f64 = match std::env::var("NOWCAST_GRADCHECK_BIAS") {
        Ok(v) => v
            .parse()
            .map_err(|_| Failure::usage(format!("NOWCAST_GRADCHECK_BIAS: bad value `{v}`")))?,
        Err(_) => 0.0,
    };
    let kinds: Vec<LossKind> = match args.loss {
        Some(LossFlag::Dice) => vec![LossKind::Dice],
        Some(LossFlag::MlDice) => vec![LossKind::MlDice],
        None => vec![LossKind::Dice, LossKind::MlDice],
    };
    let logcosh_axis: Vec<bool> = match args.logcosh {
        Some(s) => vec![s.as_bool()],
        None => vec![true, false],
    };
    const LOSS_TOL: f64 = 1e-5;
    const NET_TOL: f64 = 1e-2;
    let mut ok = true;
    for &kind in &kinds {
        for &use_logcosh in &logcosh_axis {
            let cfg = LossConfig {
                loss_kind: kind,
                use_logcosh,
                ..LossConfig::default()
            };
            let trial = GradCheckTrial { seed: args.seed, ..GradCheckTrial::default() };
            let err = grad_check_biased(&cfg, &trial, bias);
            let pass = err < LOSS_TOL;
            ok &= pass;
            println!(
                "loss {:7} logcosh {:3}  max rel error {err:.3e}  [{}]",
                match kind {
                    LossKind::Dice => "dice",
                    LossKind::MlDice => "ml_dice",
                },
                if use_logcosh { "on" } else { "off" },
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    let err = end_to_end_grad_check(args.seed, 40, bias);
    let pass = err < NET_TOL;
    ok &= pass;
    println!(
        "tiny-network end-to-end   max rel error {err:.3e}  [{}]",
        if pass { "ok" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::check("gradient check tolerance exceeded"))
    }
}
