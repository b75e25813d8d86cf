//! Run configuration: `key = value` lines with `#` comments.
//!
//! One flat schema covers data generation, AU maps, the model, training and
//! evaluation. Unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key, so an echoed file reproduces the run on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::au::{default_anchor_table, default_codebook, default_sigma, AuAnchorTable, AuCodebook, AuMapBuilder};
use crate::cam::CamMethod;
use crate::error::{Error, Result};
use crate::model::{parse_stages, AttentionSource, Head, ModelConfig, StageConfig};
use crate::synth::{expression_names, Split, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data generation
    pub samples_per_class: usize,
    pub image_size: (usize, usize),
    pub jitter: f64,
    pub noise: f64,
    pub flip_prob: f64,
    pub split_train: f64,
    pub split_val: f64,
    // AU maps; `None` selects the built-in tables / default sigma
    pub codebook: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub sigma: Option<f64>,
    // model
    pub stages: Vec<StageConfig>,
    pub head: Head,
    pub attention_source: AttentionSource,
    pub input_center: f64,
    pub layer: usize,
    // training
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub checkpoint_every: usize,
    // evaluation and export
    pub eval_split: Split,
    pub methods: Vec<CamMethod>,
    pub panel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            samples_per_class: synth.samples_per_class,
            image_size: synth.image_size,
            jitter: synth.jitter,
            noise: synth.noise,
            flip_prob: synth.flip_prob,
            split_train: synth.split.0,
            split_val: synth.split.1,
            codebook: None,
            anchors: None,
            sigma: None,
            stages: model.stages,
            head: model.head,
            attention_source: model.attention_source,
            input_center: model.input_center,
            layer: model.attention_layer,
            lambda: train.lambda,
            lr: train.lr,
            momentum: train.momentum,
            epochs: train.epochs,
            batch_size: train.batch_size,
            shuffle: train.shuffle,
            checkpoint_every: 5,
            eval_split: Split::Test,
            methods: CamMethod::ALL.to_vec(),
            panel: 64,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "samples_per_class",
    "image_size",
    "jitter",
    "noise",
    "flip_prob",
    "split_train",
    "split_val",
    "codebook",
    "anchors",
    "sigma",
    "stages",
    "head",
    "attention_source",
    "input_center",
    "layer",
    "lambda",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "shuffle",
    "checkpoint_every",
    "eval_split",
    "methods",
    "panel",
];

fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

fn parse_methods(v: &str) -> Result<Vec<CamMethod>> {
    if v.trim() == "all" {
        return Ok(CamMethod::ALL.to_vec());
    }
    v.split(',').map(CamMethod::parse).collect()
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (v != "default").then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("bad value {v:?} for {key}"));
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad())?
            };
        }
        match key.trim() {
            "seed" => self.seed = num!(),
            "samples_per_class" => self.samples_per_class = num!(),
            "image_size" => self.image_size = parse_size(v).ok_or_else(bad)?,
            "jitter" => self.jitter = num!(),
            "noise" => self.noise = num!(),
            "flip_prob" => self.flip_prob = num!(),
            "split_train" => self.split_train = num!(),
            "split_val" => self.split_val = num!(),
            "codebook" => self.codebook = optional_path(v),
            "anchors" => self.anchors = optional_path(v),
            "sigma" => self.sigma = if v == "default" { None } else { Some(num!()) },
            "stages" => self.stages = parse_stages(v).ok_or_else(bad)?,
            "head" => self.head = Head::parse(v)?,
            "attention_source" => self.attention_source = AttentionSource::parse(v)?,
            "input_center" => self.input_center = num!(),
            "layer" => self.layer = num!(),
            "lambda" => self.lambda = num!(),
            "lr" => self.lr = num!(),
            "momentum" => self.momentum = num!(),
            "epochs" => self.epochs = num!(),
            "batch_size" => self.batch_size = num!(),
            "shuffle" => self.shuffle = num!(),
            "checkpoint_every" => self.checkpoint_every = num!(),
            "eval_split" => self.eval_split = Split::parse(v).ok_or_else(bad)?,
            "methods" => self.methods = parse_methods(v)?,
            "panel" => self.panel = num!(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a file's assignments on top of `self`. Errors carry the line.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {}", path.display(), i + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            writeln!(out, "{key} = {}", self.value_of(key)).expect("string write");
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("default".to_string(), |p| p.display().to_string());
        match key {
            "seed" => self.seed.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "image_size" => format!("{}x{}", self.image_size.0, self.image_size.1),
            "jitter" => self.jitter.to_string(),
            "noise" => self.noise.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "split_train" => self.split_train.to_string(),
            "split_val" => self.split_val.to_string(),
            "codebook" => path(&self.codebook),
            "anchors" => path(&self.anchors),
            "sigma" => self.sigma.map_or("default".into(), |s| s.to_string()),
            "stages" => self
                .stages
                .iter()
                .map(|s| format!("{}:{}:{}", s.out_channels, s.conv_count, if s.pool { "pool" } else { "nopool" }))
                .collect::<Vec<_>>()
                .join(","),
            "head" => self.head.as_str().into(),
            "attention_source" => self.attention_source.as_str().into(),
            "input_center" => self.input_center.to_string(),
            "layer" => self.layer.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "shuffle" => self.shuffle.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_split" => self.eval_split.as_str().into(),
            "methods" => self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
            "panel" => self.panel.to_string(),
            _ => unreachable!("key list and match agree"),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            samples_per_class: self.samples_per_class,
            image_size: self.image_size,
            jitter: self.jitter,
            noise: self.noise,
            flip_prob: self.flip_prob,
            split: (self.split_train, self.split_val),
            seed: self.seed,
        }
    }

    pub fn model(&self, input: (usize, usize), classes: usize) -> ModelConfig {
        ModelConfig {
            input_size: (input.0, input.1, 1),
            stages: self.stages.clone(),
            head: self.head,
            classes,
            attention_layer: self.layer,
            attention_source: self.attention_source,
            input_center: self.input_center,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            attention_layer: self.layer,
            seed: self.seed,
            shuffle: self.shuffle,
        }
    }

    pub fn codebook(&self) -> Result<AuCodebook> {
        self.codebook.as_deref().map_or_else(|| Ok(default_codebook()), AuCodebook::load)
    }

    pub fn anchor_table(&self) -> Result<AuAnchorTable> {
        self.anchors.as_deref().map_or_else(|| Ok(default_anchor_table()), AuAnchorTable::load)
    }

    /// AU builder at image resolution; callers retarget it per layer.
    pub fn au_builder(&self, classes: &[String], image: (usize, usize)) -> Result<AuMapBuilder> {
        let sigma = self.sigma.unwrap_or_else(|| default_sigma(image.0, image.1));
        AuMapBuilder::new(self.codebook()?, self.anchor_table()?, classes, sigma, image, image)
    }

    /// The fixed expression order used by the generator.
    pub fn class_names(&self) -> Vec<String> {
        expression_names()
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["lambda=0.5", "methods=gradcam,layercam", "sigma=3.5", "image_size=48x40"]).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("echo")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.methods, vec![CamMethod::GradCam, CamMethod::LayerCam]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("# header\nlambda = 1\nwarmup = 3\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("run.cfg:3") && m.contains("warmup")), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("epochs", "many").is_err());
        assert!(cfg.set("image_size", "64").is_err());
        assert!(cfg.apply_overrides(&["lambda"]).is_err());
    }

    #[test]
    fn every_key_is_settable_from_its_echo() {
        let cfg = RunConfig::default();
        for &k in KEYS {
            let mut c = RunConfig::default();
            c.set(k, &cfg.value_of(k)).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }
}
