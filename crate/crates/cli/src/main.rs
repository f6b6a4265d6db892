//! `refgen`: dataset generation, rendering, training, sampling, evaluation
//! and ablation sweeps from one binary.
//!
//! Every subcommand reads an optional TOML run config, applies `--set`
//! overrides and `--seed`, writes the resolved config into its output
//! directory and exits with 0 (ok), 1 (config), 2 (I/O) or 3 (numeric).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use refgen_core::config::RunConfig;
use refgen_core::dataset::{gen_asset, generate_dataset, read_dataset, write_dataset, DatasetConfig, TrainingSample};
use refgen_core::eval::{comparison_csv, evaluate, run_ablation, write_contact_sheet, Variant};
use refgen_core::geometry::{obj, render_viewset, write_mask_png, write_rgb_png, Mesh};
use refgen_core::model::{viewset_patches, Model};
use refgen_core::sampling::euler_sample;
use refgen_core::training::{PreparedSample, StepLog, Trainer};
use refgen_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "refgen", version, about = "Asset-referenced joint RGB + point-map generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; absent keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization, training noise and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: $REFGEN_OUT/<subcommand> or runs/<subcommand>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a filtered dataset and write it as a container directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of accepted samples (dataset.count).
        #[arg(long)]
        count: Option<usize>,
        /// Condition views per sample (dataset.views).
        #[arg(long)]
        views: Option<usize>,
    },
    /// Render the condition views of one asset to PNG files.
    Render {
        #[command(flatten)]
        common: Common,
        /// Seed of a procedural asset [default: the master seed].
        #[arg(long, conflicts_with = "obj")]
        asset_seed: Option<u64>,
        /// Render a Wavefront OBJ mesh instead of a procedural asset.
        #[arg(long)]
        obj: Option<PathBuf>,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train a model; writes train_log.csv and checkpoints/.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-data [default: generate from the config].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one (rgb, point map) pair for a dataset sample's views.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which sample supplies the views and caption.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Caption id replacing the sample's own.
        #[arg(long)]
        caption: Option<u32>,
    },
    /// Evaluate a checkpoint; writes eval.csv and contact_sheet.png.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: held-out poses of the configured assets].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate ablation variants; writes comparison.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants [default: ablation.variants].
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Render { .. } => "render",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn resolve_config(common: &Common, fallback: Option<&Path>, extra: &[String]) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) if path.exists() => RunConfig::load(path)?,
        _ => RunConfig::default(),
    };
    for o in extra.iter().chain(&common.overrides) {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn output_dir(common: &Common, name: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => std::env::var_os("REFGEN_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// `<run>/checkpoints/x.ckpt` -> `<run>/config.toml`.
fn run_config_of(checkpoint: &Path) -> Option<PathBuf> {
    Some(checkpoint.parent()?.parent()?.join("config.toml"))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model.params.load(checkpoint)?;
    Ok(model)
}

fn load_samples(data: Option<&Path>, dataset: &DatasetConfig) -> Result<Vec<TrainingSample>> {
    match data {
        Some(dir) => Ok(read_dataset(dir)?.1),
        None => generate_dataset(dataset),
    }
}

fn log_step(every: usize) -> impl FnMut(&StepLog) {
    move |l: &StepLog| {
        if l.step == 1 || l.step % every == 0 {
            eprintln!("step {:>6}  loss {:.5}  rgb {:.5}  pm {:.5}", l.step, l.total, l.rgb, l.pm);
        }
    }
}

fn write_pair(dir: &Path, prefix: &str, out: &refgen_core::geometry::RenderOutput) -> Result<()> {
    write_rgb_png(&dir.join(format!("{prefix}_rgb.png")), &out.rgb)?;
    write_rgb_png(&dir.join(format!("{prefix}_pointmap.png")), &out.pointmap)?;
    write_mask_png(&dir.join(format!("{prefix}_mask.png")), &out.mask, out.rgb.width, out.rgb.height)
}

fn run(cmd: Command) -> Result<()> {
    let name = cmd.name();
    match &cmd {
        Command::GenData { common, count, views } => {
            let mut extra = vec![];
            extra.extend(count.map(|c| format!("dataset.count={c}")));
            extra.extend(views.map(|v| format!("dataset.views={v}")));
            let cfg = resolve_config(common, None, &extra)?;
            let dir = output_dir(common, name)?;
            let samples = generate_dataset(&cfg.dataset)?;
            write_dataset(&dir, &samples, &cfg.dataset.render)?;
            write_config(&dir, &cfg)?;
            println!("{} samples -> {}", samples.len(), dir.display());
        }
        Command::Render {
            common,
            asset_seed,
            obj: obj_path,
            views,
        } => {
            let extra: Vec<String> = views.map(|v| format!("dataset.views={v}")).into_iter().collect();
            let cfg = resolve_config(common, None, &extra)?;
            let dir = output_dir(common, name)?;
            let mesh: Mesh = match obj_path {
                Some(p) => refgen_core::geometry::normalize_mesh(&obj::read(p)?)?.0,
                None => gen_asset(asset_seed.unwrap_or(cfg.dataset.seed))?.mesh,
            };
            let set = render_viewset(&mesh, cfg.dataset.views, &cfg.dataset.render)?;
            for (k, v) in set.views.iter().enumerate() {
                write_pair(&dir, &format!("view_{k}"), v)?;
            }
            write_config(&dir, &cfg)?;
            println!("{} views -> {}", set.len(), dir.display());
        }
        Command::Train { common, data, resume } => {
            let cfg = resolve_config(common, None, &[])?;
            cfg.validate()?;
            let dir = output_dir(common, name)?;
            write_config(&dir, &cfg)?;
            let samples = load_samples(data.as_deref(), &cfg.dataset)?;
            let prepared = samples
                .iter()
                .map(|s| PreparedSample::new(s, cfg.model.patch))
                .collect::<Result<Vec<_>>>()?;
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let mut trainer = match resume {
                Some(path) => Trainer::resume(model, cfg.train.clone(), path)?,
                None => Trainer::new(model, cfg.train.clone())?,
            };
            let every = (cfg.train.steps / 20).max(1);
            trainer.run(&prepared, Some(&dir), log_step(every))?;
            println!("trained {} steps -> {}", trainer.step, dir.display());
        }
        Command::Sample {
            common,
            checkpoint,
            data,
            index,
            caption,
        } => {
            let cfg = resolve_config(common, run_config_of(checkpoint).as_deref(), &[])?;
            cfg.validate()?;
            let dir = output_dir(common, name)?;
            write_config(&dir, &cfg)?;
            let model = load_model(&cfg, checkpoint)?;
            let samples = load_samples(data.as_deref(), &cfg.dataset)?;
            let sample = samples
                .get(*index)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {index} of {}", samples.len())))?;
            let views = viewset_patches(&sample.views, cfg.model.patch)?;
            let g = euler_sample(&model, &views, caption.unwrap_or(sample.caption_id), &cfg.sample)?;
            write_rgb_png(&dir.join("rgb.png"), &g.rgb)?;
            if let Some(pm) = &g.pointmap {
                write_rgb_png(&dir.join("pointmap.png"), pm)?;
            }
            println!("sample -> {}", dir.display());
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = resolve_config(common, run_config_of(checkpoint).as_deref(), &[])?;
            cfg.validate()?;
            let dir = output_dir(common, name)?;
            write_config(&dir, &cfg)?;
            let model = load_model(&cfg, checkpoint)?;
            let held_out = DatasetConfig {
                count: cfg.eval.samples,
                pose_salt: cfg.dataset.pose_salt.wrapping_add(1),
                ..cfg.dataset.clone()
            };
            let mut samples = load_samples(data.as_deref(), &held_out)?;
            samples.truncate(cfg.eval.samples);
            let (report, generated) = evaluate("eval", &model, &samples, &cfg.sample, &cfg.eval)?;
            report.write_csv(&dir.join("eval.csv"))?;
            write_contact_sheet(&dir.join("contact_sheet.png"), &samples, &generated)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { common, variants } => {
            let mut cfg = resolve_config(common, None, &[])?;
            if !variants.is_empty() {
                cfg.ablation.variants = variants.clone();
            }
            cfg.validate()?;
            let parsed = cfg
                .ablation
                .variants
                .iter()
                .map(|v| Variant::from_str(v))
                .collect::<Result<Vec<_>>>()?;
            let dir = output_dir(common, name)?;
            write_config(&dir, &cfg)?;
            let setup = cfg.ablation_setup();
            let mut reports = vec![];
            for v in parsed {
                eprintln!("variant {v}");
                let res = run_ablation(v, &setup, log_step((setup.ablation.steps / 4).max(1)))?;
                let vdir = dir.join(v.to_string());
                fs::create_dir_all(&vdir)?;
                let vcfg = RunConfig {
                    model: res.model_config.clone(),
                    ..cfg.clone()
                };
                write_config(&vdir, &vcfg)?;
                res.report.write_csv(&vdir.join("eval.csv"))?;
                write_contact_sheet(&vdir.join("contact_sheet.png"), &res.eval_samples, &res.generated)?;
                reports.push(res.report);
            }
            let table = comparison_csv(&reports.iter().collect::<Vec<_>>());
            fs::write(dir.join("comparison.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Io => "io",
        ErrorKind::Numeric => "numeric",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().as_str().map(str::to_string).unwrap_or_else(|| e.to_string());
            eprintln!("refgen error [config]: {}", one_line(&msg));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("refgen error [{}]: {}", kind_name(kind), one_line(&e.to_string()));
            ExitCode::from(exit_code(kind))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
