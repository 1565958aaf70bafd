//! `gft`: train, evaluate, audit and visualize gradient focal transformers.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gft_core::checkpoint;
use gft_core::config::RunConfig;
use gft_core::data::{self, Dataset};
use gft_core::gradcheck::{self, GradcheckOptions};
use gft_core::model::{GftModel, GftState, ModelConfig};
use gft_core::pps::{self, Routing, SelectionSchedule};
use gft_core::tensor::{flops, Tensor};
use gft_core::train::{self, TrainConfig};
use gft_core::viz;
use gft_core::Error;

use crate::synth::SynthSpec;

#[derive(Parser)]
#[command(name = "gft", version, about = "Vision transformer with attention-gradient patch selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a run log.
    Train(TrainArgs),
    /// Report accuracy and macro precision/recall/F1 of a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the compute cost of a configuration.
    Flops(FlopsArgs),
    /// Write per-stage importance heatmaps and selection masks for one image.
    Heatmap(HeatmapArgs),
    /// Export a synthetic planted-boundary corpus as class directories.
    Synth(SynthArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Directory with one sub-directory of images per class.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic corpus, e.g. `n=320,sigma=0.05,seed=0`.
    #[arg(long)]
    synth: Option<SynthSpec>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: DataSource,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Run log path (JSON lines); defaults to `<out>.runlog.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Keep ratios, e.g. `0.75,0.5,0.25`.
    #[arg(long, value_delimiter = ',')]
    keep: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

impl Profile {
    fn config(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Full => ModelConfig::full(),
        }
    }
}

#[derive(Args)]
#[group(id = "model_source", required = true, multiple = false)]
struct ModelSource {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Freshly initialized model of `--profile`.
    #[arg(long)]
    random: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long, value_delimiter = ',')]
    keep: Option<Vec<f64>>,
    /// Also run a forward pass and count multiplies.
    #[arg(long)]
    measure: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "n=320")]
    synth: SynthSpec,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

/// Failures mapped to distinct exit codes.
enum Failure {
    Core(Error),
    /// Any failure to read a checkpoint, including a missing file.
    Checkpoint(Error),
    GradcheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 2,
                Error::Data(_) | Error::Io { .. } | Error::Image { .. } => 3,
                Error::CheckpointVersion { .. }
                | Error::CheckpointChecksum { .. }
                | Error::CheckpointTruncated(_)
                | Error::CheckpointFormat(_) => 4,
                Error::Diverged { .. } => 6,
            },
            Failure::Checkpoint(_) => 4,
            Failure::GradcheckFailed => 5,
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_checkpoint(path: &Path) -> std::result::Result<(GftModel, GftState), Failure> {
    checkpoint::load(path).map_err(Failure::Checkpoint)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) | Failure::Checkpoint(e) => eprintln!("error: {e}"),
                Failure::GradcheckFailed => eprintln!("error: gradient check failed"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_source(source: &DataSource, model: &ModelConfig, default_seed: u64) -> gft_core::Result<Dataset> {
    match (&source.data, &source.synth) {
        (Some(dir), _) => data::load_image_dir(dir, model.vit.image_size, model.vit.channels),
        (None, Some(spec)) => {
            if model.vit.channels != 1 {
                return Err(Error::Config("synthetic images are single-channel; set channels = 1".into()));
            }
            let task = spec.task(&model.vit, model.vit.num_classes, default_seed);
            data::generate(&task, spec.n)
        }
        (None, None) => unreachable!("clap requires one data source"),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_train_overrides(&mut run.train, &a);
    if let Some(keep) = &a.keep {
        run.model.schedule = SelectionSchedule::new(keep.clone())?;
    }
    let dataset = load_source(&a.source, &run.model, run.train.seed)?;
    if a.source.data.is_some() && dataset.num_classes() != run.model.vit.num_classes {
        log::info!(
            "corpus has {} classes; setting num_classes accordingly",
            dataset.num_classes()
        );
        run.model.vit.num_classes = dataset.num_classes();
    }
    run.validate()?;
    log::info!("training on {} images, {} classes", dataset.len(), dataset.num_classes());

    let mut model = GftModel::new(run.model.clone(), run.train.seed)?;
    let mut state = GftState::new(&model.config);
    let every = run.train.checkpoint_every;
    let out = a.out.clone();
    let log = train::train_with(&mut model, &mut state, &dataset.items, &run.train, |record, m, s| {
        if every > 0 && record.epoch % every == 0 {
            checkpoint::save(m, s, &out)?;
        }
        Ok(())
    });
    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, "runlog.jsonl"));
    let log = match log {
        Ok(log) => log,
        Err(Error::Diverged { epoch, step, loss, log }) => {
            train::write_run_log(&log, &log_path)?;
            return Err(Error::Diverged { epoch, step, loss, log }.into());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(&model, &state, &a.out)?;
    train::write_run_log(&log, &log_path)?;
    if let Some(last) = log.records.last() {
        println!(
            "epochs {} | final loss {:.4} | eval accuracy {}",
            last.epoch,
            last.train_loss,
            last.eval_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("checkpoint {}", a.out.display());
    println!("run log {}", log_path.display());
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, state) = load_checkpoint(&a.ckpt)?;
    let dataset = load_source(&a.source, &model.config, 0)?;
    if let Some(bad) = dataset.items.iter().find(|i| i.label >= model.config.vit.num_classes) {
        return Err(Error::Data(format!("label {} outside the model's classes", bad.label)).into());
    }
    let ev = train::evaluate(&model, &state, &dataset.items, a.batch_size)?;
    let m = &ev.metrics;
    println!("images     {}", dataset.len());
    println!("accuracy   {:.4}", m.accuracy);
    println!("precision  {:.4}", m.precision);
    println!("recall     {:.4}", m.recall);
    println!("f1         {:.4}", m.f1);
    for (stage, r) in ev.boundary_recall.iter().enumerate() {
        if let Some(r) = r {
            println!("stage {} boundary recall {:.4}", stage + 1, r);
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let model = match &a.source.ckpt {
        Some(path) => load_checkpoint(path)?.0,
        None => GftModel::new(a.profile.config(), a.seed)?,
    };
    let opts = GradcheckOptions {
        samples_per_param: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let report = gradcheck::gradcheck(&model, &opts)?;
    for g in &report.groups {
        println!(
            "{:<10} entries {:>4}  max rel error {:.3e}  ({})",
            g.group.to_string(),
            g.entries_checked,
            g.max_rel_error,
            g.worst
        );
    }
    if report.passed() {
        println!("PASS: max relative error {:.3e} < {:.0e}", report.max_rel_error(), report.tolerance);
        Ok(())
    } else {
        println!("FAIL: max relative error {:.3e} >= {:.0e}", report.max_rel_error(), report.tolerance);
        Err(Failure::GradcheckFailed)
    }
}

fn cmd_flops(a: FlopsArgs) -> CmdResult {
    let mut cfg = match (&a.config, a.profile) {
        (Some(path), _) => RunConfig::load(path)?.model,
        (None, Some(p)) => p.config(),
        (None, None) => ModelConfig::desk(),
    };
    if let Some(keep) = &a.keep {
        cfg.schedule = SelectionSchedule::new(keep.clone())?;
    }
    cfg.validate()?;
    let cost = pps::flops_estimate(&cfg);
    let saved = 1.0 - cost.direct_ratio();
    println!("keep ratios           {:?}", cfg.schedule.keep_ratios());
    println!("tokens per layer      {:?}", pps::tokens_per_layer(&cfg));
    println!("baseline MACs         {:.0}", cost.c_base);
    println!("pruned MACs (direct)  {:.0}", cost.direct);
    println!("closed form           {:.0}", cost.closed_form());
    println!("stage shares          {:?}", cost.alphas);
    println!("saved (direct)        {:.2}%", 100.0 * saved);
    println!("saved (closed form)   {:.2}%", 100.0 * (1.0 - cost.closed_form() / cost.c_base));
    println!("attention-only bound  {:.2}%", 100.0 * pps::attention_only_saving(&cfg));
    if a.measure {
        let model = GftModel::new(cfg.clone(), 0)?;
        let mut state = GftState::new(&model.config);
        let v = &cfg.vit;
        let images = Tensor::full(&[1, v.channels, v.image_size, v.image_size], 0.5f32)?;
        let mut pass = model.pass(false);
        flops::reset();
        pass.gft_forward(&images, &mut state, false, &Routing::Importance)?;
        let counted = flops::read() as f64;
        println!("counted MACs          {counted:.0}");
        println!("counter deviation     {:.3}%", 100.0 * (counted - cost.direct).abs() / cost.direct);
    }
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CmdResult {
    let (model, state) = load_checkpoint(&a.ckpt)?;
    let vit = &model.config.vit;
    let pixels = data::load_image(&a.image, vit.image_size, vit.channels)?;
    let mut batch_dims = vec![1];
    batch_dims.extend_from_slice(pixels.dims());
    let images = pixels.reshape(&batch_dims)?;
    let mut frozen = state.clone();
    let mut pass = model.pass(false);
    let out = pass.gft_forward(&images, &mut frozen, false, &Routing::Importance)?;
    let stages = viz::render_stages(&out.stages, 0, &pixels, vit)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, s) in stages.iter().enumerate() {
        let stage = i + 1;
        let write = |name: String, bytes: &[u8]| -> gft_core::Result<()> {
            let path = a.out.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write(format!("stage{stage}_heatmap.pgm"), &s.heatmap_pgm)?;
        write(format!("stage{stage}_mask.txt"), s.mask_txt.as_bytes())?;
        write(format!("stage{stage}_composite.ppm"), &s.composite_ppm)?;
        println!(
            "stage {stage}: kept {} patches, most important patch {}",
            s.mask_txt.lines().count(),
            s.argmax_patch
        );
    }
    let logits = pass.tape.value(out.logits);
    let row = logits.row(0);
    let class = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
    println!("predicted class {class}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let vit = ModelConfig::desk().vit;
    let task = a.synth.task(&vit, a.classes, 0);
    let dataset = data::generate(&task, a.synth.n)?;
    data::export(&dataset, &a.out)?;
    println!("wrote {} images in {} classes to {}", dataset.len(), dataset.num_classes(), a.out.display());
    Ok(())
}
