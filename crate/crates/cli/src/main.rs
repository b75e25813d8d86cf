//! `aufer`: generate data, build AU maps, train, evaluate and export maps.
//!
//! Exit codes: 0 success, 1 data error, 2 configuration error, 3 numerical
//! failure, 64 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aufer_core::cam::{self, CamMethod};
use aufer_core::config::RunConfig;
use aufer_core::metrics::{self, MapKind};
use aufer_core::model::ModelState;
use aufer_core::pnm::{heat_overlay, write_ppm};
use aufer_core::synth::{generate, load_dataset, save_dataset, SplitDataset};
use aufer_core::train::{fit_with, TrainLog};
use aufer_core::{Error, Result};

const USAGE_EXIT: u8 = 64;
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "aufer", version, about = "AU-guided attention alignment for expression classifiers")]
struct Cli {
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Output {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export one AU map (P5 plus raw text) per sample of a split.
    BuildAumaps {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        output: Output,
        /// train, val or test.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a classifier, optionally with attention alignment.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compute accuracy and localization metrics for a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        output: Output,
        /// `all` or a comma list of cam, gradcam, gradcampp, layercam.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Label the report as trained with AU alignment. Defaults to
        /// whether the checkpoint's run used lambda > 0.
        #[arg(long)]
        with_au: Option<bool>,
    },
    /// Write per-class average map grids and per-sample overlays.
    ExportMaps {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to export; repeat for several.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        output: Output,
        /// Map kinds: attention, aumap, or CAM method names; `all` for every one.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Per-sample overlays to write per checkpoint and kind.
        #[arg(long, default_value_t = 6)]
        overlays: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates `out`, refusing a non-empty existing directory without `--force`.
fn prepare_output(output: &Output) -> Result<()> {
    let dir = &output.out;
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?
            .next()
            .is_some();
        if non_empty && !output.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

fn parse_split(s: &str) -> Result<aufer_core::synth::Split> {
    aufer_core::synth::Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
}

fn image_size(data: &SplitDataset) -> Result<(usize, usize)> {
    data.train
        .image_size()
        .or(data.test.image_size())
        .ok_or_else(|| Error::Dataset("dataset has no samples".into()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenData { output, seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            prepare_output(&output)?;
            let data = generate(&cfg.synth())?;
            save_dataset(&data, &output.out)?;
            echo_config(&cfg, &output.out)?;
            eprintln!(
                "wrote {} train / {} val / {} test samples to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                output.out.display()
            );
            Ok(())
        }
        Command::BuildAumaps { data, output, split } => {
            let split = parse_split(&split)?;
            cfg.eval_split = split;
            let ds = load_dataset(&data)?;
            let builder = cfg.au_builder(ds.classes(), image_size(&ds)?)?;
            prepare_output(&output)?;
            let part = ds.get(split);
            for s in &part.samples {
                let map = builder.build_full(&s.landmarks, s.label)?;
                if map.is_zero() {
                    eprintln!(
                        "warning: sample {:05} ({}) has an empty AU set; wrote a zero map",
                        s.id, part.classes[s.label]
                    );
                }
                let stem = format!("{:05}", s.id);
                map.save(&output.out.join(format!("{stem}.pgm")), &output.out.join(format!("{stem}.raw")))?;
            }
            echo_config(&cfg, &output.out)?;
            eprintln!("wrote {} AU maps to {}", part.len(), output.out.display());
            Ok(())
        }
        Command::Train {
            data,
            output,
            lambda,
            layer,
            seed,
            epochs,
        } => {
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = layer {
                cfg.layer = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            let ds = load_dataset(&data)?;
            let size = image_size(&ds)?;
            let mut model = ModelState::init(cfg.model(size, ds.classes().len()))?;
            let builder = cfg.au_builder(ds.classes(), size)?;
            let train_cfg = cfg.train();
            train_cfg.validate()?;
            prepare_output(&output)?;
            echo_config(&cfg, &output.out)?;
            let out = output.out.clone();
            let every = cfg.checkpoint_every;
            let mut log = TrainLog::default();
            let result = fit_with(&mut model, &ds.train, &ds.val, &train_cfg, Some(&builder), |rec, state| {
                log.records.push(rec.clone());
                write_text(&out.join("train_log.tsv"), &log.to_tsv())?;
                eprintln!(
                    "epoch {:>3}  ce {:.4}  r_train {}  acc_val {:.3}  {:.1}s",
                    rec.epoch,
                    rec.ce,
                    rec.r_train.map_or("-".into(), |r| format!("{r:.4}")),
                    rec.acc_val,
                    rec.seconds
                );
                if every > 0 && rec.epoch % every == 0 {
                    state.save(&out.join(format!("checkpoint_e{:03}.ckpt", rec.epoch)))?;
                }
                Ok(())
            });
            let log = result?;
            write_text(&out.join("train_log.tsv"), &log.to_tsv())?;
            model.save(&out.join("final.ckpt"))?;
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            output,
            method,
            split,
            layer,
            with_au,
        } => {
            if let Some(m) = method {
                cfg.set("methods", &m)?;
            }
            if let Some(s) = split {
                cfg.eval_split = parse_split(&s)?;
            }
            let model = ModelState::load(&checkpoint)?;
            if let Some(l) = layer {
                cfg.layer = l;
            } else {
                cfg.layer = model.config().attention_layer;
            }
            let ds = load_dataset(&data)?;
            check_classes(&model, &ds)?;
            let with_au = match with_au {
                Some(v) => v,
                None => trained_with_au(&checkpoint)?,
            };
            let builder = cfg.au_builder(ds.classes(), image_size(&ds)?)?;
            let part = ds.get(cfg.eval_split);
            let methods = checked_methods(&model, &cfg.methods, cfg.layer)?;
            let report = metrics::evaluate(&model, part, cfg.layer, &builder, &methods, with_au)?;
            prepare_output(&output)?;
            write_text(&output.out.join("report.txt"), &report.to_text())?;
            write_text(&output.out.join("table.tsv"), &report.to_table())?;
            echo_config(&cfg, &output.out)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::ExportMaps {
            data,
            checkpoints,
            output,
            kind,
            split,
            layer,
            overlays,
        } => {
            if let Some(s) = split {
                cfg.eval_split = parse_split(&s)?;
            }
            let ds = load_dataset(&data)?;
            let size = image_size(&ds)?;
            let builder = cfg.au_builder(ds.classes(), size)?;
            let part = ds.get(cfg.eval_split);
            let missing = part.missing_classes();
            if !missing.is_empty() {
                return Err(Error::Dataset(format!(
                    "split {} has no samples for classes: {}",
                    cfg.eval_split.as_str(),
                    missing.join(", ")
                )));
            }
            let models = checkpoints
                .iter()
                .map(|p| {
                    let m = ModelState::load(p)?;
                    check_classes(&m, &ds)?;
                    Ok((checkpoint_label(p), m))
                })
                .collect::<Result<Vec<_>>>()?;
            prepare_output(&output)?;
            for (label, model) in &models {
                let l = layer.unwrap_or(model.config().attention_layer);
                cfg.layer = l;
                for k in parse_kinds(&kind, model, l)? {
                    let grid = output.out.join(format!("{label}_{}_grid.ppm", k.name()));
                    metrics::export_class_grid(model, part, l, k, &builder, cfg.panel, &grid)?;
                    write_overlays(model, part, l, k, &builder, overlays, &output.out.join(label))?;
                    eprintln!("wrote {}", grid.display());
                }
            }
            echo_config(&cfg, &output.out)?;
            Ok(())
        }
    }
}

fn check_classes(model: &ModelState, ds: &SplitDataset) -> Result<()> {
    let (h, w, _) = model.config().input_size;
    if model.config().classes != ds.classes().len() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config().classes,
            ds.classes().len()
        )));
    }
    if let Some(size) = ds.train.image_size().or(ds.test.image_size()) {
        if size != (h, w) {
            return Err(Error::Config(format!(
                "checkpoint expects {h}x{w} images, dataset has {}x{}",
                size.0, size.1
            )));
        }
    }
    Ok(())
}

/// Reads `lambda` from the training run's config echo next to the checkpoint.
fn trained_with_au(checkpoint: &Path) -> Result<bool> {
    let echo = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
    if !echo.exists() {
        return Ok(false);
    }
    Ok(RunConfig::load(&echo)?.lambda > 0.0)
}

fn checkpoint_label(p: &Path) -> String {
    let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    match p.parent().and_then(|d| d.file_name()) {
        Some(dir) => format!("{}-{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

/// Drops CAM when the layer or head cannot support it, with a warning.
fn checked_methods(model: &ModelState, methods: &[CamMethod], l: usize) -> Result<Vec<CamMethod>> {
    let mut out = Vec::new();
    for &m in methods {
        if m == CamMethod::Cam
            && (model.config().head != aufer_core::model::Head::GapLinear || l != model.stage_count())
        {
            if methods.len() == 1 {
                return Err(Error::UnsupportedHead { method: m.as_str().into() });
            }
            eprintln!("warning: skipping cam; it needs a gap-linear head at the last stage");
            continue;
        }
        out.push(m);
    }
    Ok(out)
}

fn parse_kinds(kind: &str, model: &ModelState, l: usize) -> Result<Vec<MapKind>> {
    if kind.trim() == "all" {
        let mut kinds = vec![MapKind::Attention, MapKind::AuMap];
        kinds.extend(checked_methods(model, &CamMethod::ALL, l)?.into_iter().map(MapKind::Cam));
        return Ok(kinds);
    }
    kind.split(',').map(MapKind::parse).collect()
}

/// Overlays for the first `count` samples in split order.
fn write_overlays(
    model: &ModelState,
    data: &aufer_core::synth::Dataset,
    l: usize,
    kind: MapKind,
    builder: &aufer_core::au::AuMapBuilder,
    count: usize,
    dir: &Path,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let (res_h, res_w) = model.config().stage_resolution(l)?;
    let layer_builder = builder.with_target((res_h, res_w))?;
    for s in data.samples.iter().take(count) {
        let values = match kind {
            MapKind::Attention => cam::relu_max_normalize(model.attention(&model.forward(&s.image)?, l)?.into_data()),
            MapKind::Cam(m) => cam::extract(model, &s.image, s.label, l, m)?.values,
            MapKind::AuMap => layer_builder.build(&s.landmarks, s.label)?.values().to_vec(),
        };
        let (h, w) = (s.height(), s.width());
        let heat = metrics::resample(&values, res_h, res_w, h, w);
        let img = heat_overlay(s.image.data(), &heat, w, h);
        write_ppm(&dir.join(format!("{:05}_{}.ppm", s.id, kind.name())), &img)?;
    }
    Ok(())
}
