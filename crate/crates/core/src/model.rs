//! Small staged CNN classifier exposing per-stage feature stacks.
//!
//! A stage optionally starts with a 2x2 max-pool, then runs `conv_count`
//! 3x3 convolutions (padding 1), each followed by ReLU. The head is either
//! global average pooling plus a linear layer or a flattened linear layer.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    GapLinear,
    FlattenLinear,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::GapLinear => "gap-linear",
            Head::FlattenLinear => "flatten-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "gap-linear" => Ok(Head::GapLinear),
            "flatten-linear" => Ok(Head::FlattenLinear),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

/// Which activation of a stage feeds the attention map. Post-ReLU keeps
/// attention nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSource {
    PostRelu,
    PreRelu,
}

impl AttentionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionSource::PostRelu => "post-relu",
            AttentionSource::PreRelu => "pre-relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "post-relu" => Ok(AttentionSource::PostRelu),
            "pre-relu" => Ok(AttentionSource::PreRelu),
            other => Err(Error::Config(format!("unknown attention source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub conv_count: usize,
    pub pool: bool,
}

impl StageConfig {
    pub const fn new(out_channels: usize, conv_count: usize, pool: bool) -> Self {
        Self {
            out_channels,
            conv_count,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(h, w, channels)`.
    pub input_size: (usize, usize, usize),
    pub stages: Vec<StageConfig>,
    pub head: Head,
    pub classes: usize,
    /// 1-based stage index.
    pub attention_layer: usize,
    pub attention_source: AttentionSource,
    /// Subtracted from every input pixel before the first stage.
    pub input_center: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64, 1),
            stages: vec![
                StageConfig::new(8, 1, false),
                StageConfig::new(16, 1, true),
                StageConfig::new(32, 1, true),
                StageConfig::new(64, 1, true),
                StageConfig::new(64, 1, true),
            ],
            head: Head::GapLinear,
            classes: 6,
            attention_layer: 5,
            attention_source: AttentionSource::PostRelu,
            input_center: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.attention_layer == 0 || self.attention_layer > self.stages.len() {
            return Err(Error::Config(format!(
                "attention_layer {} outside 1..={}",
                self.attention_layer,
                self.stages.len()
            )));
        }
        if !self.input_center.is_finite() {
            return Err(Error::Config("input_center must be finite".into()));
        }
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let (mut h, mut w) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            if s.conv_count > 0 && s.out_channels == 0 {
                return Err(Error::Config(format!("stage {} has zero channels", i + 1)));
            }
            if s.pool {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("stage {} pools a {h}x{w} map", i + 1)));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// `(channels, h, w)` of each stage's output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                if s.pool {
                    h /= 2;
                    w /= 2;
                }
                if s.conv_count > 0 {
                    c = s.out_channels;
                }
                (c, h, w)
            })
            .collect()
    }

    /// Spatial size of stage `l` (1-based).
    pub fn stage_resolution(&self, l: usize) -> Result<(usize, usize)> {
        check_layer(l, self.stages.len())?;
        let (_, h, w) = self.stage_shapes()[l - 1];
        Ok((h, w))
    }

    fn head_inputs(&self) -> usize {
        let (c, h, w) = *self.stage_shapes().last().expect("validated non-empty");
        match self.head {
            Head::GapLinear => c,
            Head::FlattenLinear => c * h * w,
        }
    }

    /// `key = value` lines; parsed back by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let (h, w, c) = self.input_size;
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}", s.out_channels, s.conv_count, if s.pool { "pool" } else { "nopool" }))
            .collect();
        let mut out = String::new();
        writeln!(out, "input = {h}x{w}x{c}").unwrap();
        writeln!(out, "stages = {}", stages.join(",")).unwrap();
        writeln!(out, "head = {}", self.head.as_str()).unwrap();
        writeln!(out, "classes = {}", self.classes).unwrap();
        writeln!(out, "attention_layer = {}", self.attention_layer).unwrap();
        writeln!(out, "attention_source = {}", self.attention_source.as_str()).unwrap();
        writeln!(out, "input_center = {}", self.input_center).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let bad = |k: &str, v: &str| Error::Config(format!("model config: bad value {v:?} for {k}"));
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model config: expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "input" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.trim().parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?;
                    let [h, w, c] = dims[..] else { return Err(bad(k, v)) };
                    cfg.input_size = (h, w, c);
                }
                "stages" => cfg.stages = parse_stages(v).ok_or_else(|| bad(k, v))?,
                "head" => cfg.head = Head::parse(v)?,
                "classes" => cfg.classes = v.parse().map_err(|_| bad(k, v))?,
                "attention_layer" => cfg.attention_layer = v.parse().map_err(|_| bad(k, v))?,
                "attention_source" => cfg.attention_source = AttentionSource::parse(v)?,
                "input_center" => cfg.input_center = v.parse().map_err(|_| bad(k, v))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad(k, v))?,
                other => return Err(Error::Config(format!("model config: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `channels:convs:pool|nopool` items separated by commas.
pub fn parse_stages(v: &str) -> Option<Vec<StageConfig>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let [c, n, p] = parts[..] else { return None };
            let pool = match p {
                "pool" => true,
                "nopool" => false,
                _ => return None,
            };
            Some(StageConfig::new(c.parse().ok()?, n.parse().ok()?, pool))
        })
        .collect()
}

fn check_layer(l: usize, stages: usize) -> Result<()> {
    if l == 0 || l > stages {
        return Err(Error::Parameter(format!("layer {l} outside 1..={stages}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Variables recorded by one forward pass on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub params: Vec<Var>,
    /// Post-ReLU output of each stage.
    pub features: Vec<Var>,
    /// Input to the last ReLU of each stage (equal to `features` for stages
    /// without convolutions).
    pub pre_activations: Vec<Var>,
    pub logits: Var,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
    pub pre_activations: Vec<Tensor>,
}

impl ForwardPass {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Model parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Param>,
}

impl ModelState {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut he = |name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.push(Param {
                name,
                value: Tensor::new(shape, data).expect("sized"),
            });
        };
        let mut c_in = config.input_size.2;
        let mut biases = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            for j in 0..s.conv_count {
                let fan_in = c_in * KERNEL * KERNEL;
                he(
                    format!("stage{}.conv{}.weight", i + 1, j + 1),
                    vec![s.out_channels, c_in, KERNEL, KERNEL],
                    fan_in,
                );
                biases.push((format!("stage{}.conv{}.bias", i + 1, j + 1), s.out_channels));
                c_in = s.out_channels;
            }
        }
        let d = config.head_inputs();
        he("head.weight".into(), vec![config.classes, d], d);
        biases.push(("head.bias".into(), config.classes));
        // Biases are appended after their weights so the layout reads
        // weight, bias per layer.
        let mut ordered = Vec::with_capacity(params.len() * 2);
        for (w, (bname, n)) in params.into_iter().zip(biases) {
            ordered.push(w);
            ordered.push(Param {
                name: bname,
                value: Tensor::zeros(&[n]),
            });
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn stage_count(&self) -> usize {
        self.config.stages.len()
    }

    /// `[classes, d]` head weights.
    pub fn head_weights(&self) -> &Tensor {
        self.param("head.weight").expect("head present")
    }

    /// Records every parameter as a leaf.
    pub fn param_vars(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone().with_requires_grad(requires_grad)))
            .collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.input_size;
        if image.shape() != [c, h, w] {
            return Err(Error::dim(
                "forward",
                "image shape",
                format!("[{c}, {h}, {w}]"),
                format!("{:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Runs stages `from..to` (0-based, half-open) starting at `x`.
    /// Returns per-stage `(pre_activation, feature)` pairs.
    pub fn run_stages(
        &self,
        g: &mut Graph,
        params: &[Var],
        mut x: Var,
        from: usize,
        to: usize,
    ) -> Result<Vec<(Var, Var)>> {
        let mut p = self.conv_param_offset(from);
        let mut out = Vec::with_capacity(to - from);
        for s in &self.config.stages[from..to] {
            if s.pool {
                x = g.maxpool2d(x, 2, 2)?;
            }
            let mut pre = x;
            for _ in 0..s.conv_count {
                pre = g.conv2d(x, params[p], params[p + 1], 1, KERNEL / 2)?;
                x = g.relu(pre);
                p += 2;
            }
            out.push((pre, x));
        }
        Ok(out)
    }

    /// Input after subtracting `input_center`; a no-op when it is 0.
    pub fn center_input(&self, g: &mut Graph, image: Var) -> Var {
        match self.config.input_center {
            0.0 => image,
            c => g.affine(image, 1.0, -c),
        }
    }

    /// Applies the classifier head to last-stage features.
    pub fn run_head(&self, g: &mut Graph, params: &[Var], features: Var) -> Result<Var> {
        let n = params.len();
        let (w, b) = (params[n - 2], params[n - 1]);
        let pooled = match self.config.head {
            Head::GapLinear => g.global_avg_pool(features)?,
            Head::FlattenLinear => {
                let numel = g.value(features).numel();
                g.reshape(features, vec![numel])?
            }
        };
        g.linear(pooled, w, b)
    }

    fn conv_param_offset(&self, stage: usize) -> usize {
        2 * self.config.stages[..stage].iter().map(|s| s.conv_count).sum::<usize>()
    }

    /// Full forward on a graph with the given parameter leaves.
    pub fn trace(&self, g: &mut Graph, params: Vec<Var>, image: Var) -> Result<Trace> {
        self.check_image(g.value(image))?;
        let x = self.center_input(g, image);
        let stages = self.run_stages(g, &params, x, 0, self.stage_count())?;
        let last = stages.last().expect("non-empty").1;
        let logits = self.run_head(g, &params, last)?;
        let (pre_activations, features) = stages.into_iter().unzip();
        Ok(Trace {
            params,
            features,
            pre_activations,
            logits,
        })
    }

    /// Inference forward pass; parameters are recorded as constants.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let params = self.param_vars(&mut g, false);
        let x = g.constant(image.clone());
        let t = self.trace(&mut g, params, x)?;
        Ok(ForwardPass {
            logits: g.value(t.logits).clone(),
            features: t.features.iter().map(|&v| g.value(v).clone()).collect(),
            pre_activations: t.pre_activations.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// The stage-`l` activation selected by the config's attention source.
    pub fn attention_input(&self, trace: &Trace, l: usize) -> Result<Var> {
        check_layer(l, self.stage_count())?;
        Ok(match self.config.attention_source {
            AttentionSource::PostRelu => trace.features[l - 1],
            AttentionSource::PreRelu => trace.pre_activations[l - 1],
        })
    }

    /// Attention `T_l` as a differentiable graph value.
    pub fn attention_var(&self, g: &mut Graph, trace: &Trace, l: usize) -> Result<Var> {
        let f = self.attention_input(trace, l)?;
        g.channel_mean(f)
    }

    /// Attention `T_l` from a plain forward pass.
    pub fn attention(&self, pass: &ForwardPass, l: usize) -> Result<Tensor> {
        check_layer(l, self.stage_count())?;
        let f = match self.config.attention_source {
            AttentionSource::PostRelu => &pass.features[l - 1],
            AttentionSource::PreRelu => &pass.pre_activations[l - 1],
        };
        channel_mean_value(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checkpoint layout (little-endian):
    /// magic `AUFERCKP`, u32 version, u64 config length + config text,
    /// u32 parameter count, then per parameter u32 name length + name,
    /// u32 rank, u64 dims, f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| r.err("config is not utf-8"))?;
        let config = ModelConfig::parse(cfg_text)?;
        let expected = ModelState::init(config.clone())?;
        let count = r.u32()? as usize;
        if count != expected.params.len() {
            return Err(r.err(format!(
                "checkpoint holds {count} parameters, config implies {}",
                expected.params.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for want in &expected.params {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("bad name"))?;
            if name != want.name {
                return Err(r.err(format!("expected parameter {}, found {name}", want.name)));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != want.value.shape() {
                return Err(r.err(format!("{name}: shape {shape:?}, expected {:?}", want.value.shape())));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Param {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last parameter"));
        }
        Ok(Self { config, params })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AUFERCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::data(self.path, 0, format!("byte {}: {}", self.pos, msg.into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Channel mean of a `[n, h, w]` value outside any graph.
pub fn channel_mean_value(f: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let m = g.channel_mean(v)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            input_size: (8, 8, 1),
            stages: vec![StageConfig::new(2, 1, false), StageConfig::new(3, 1, true)],
            classes: 3,
            attention_layer: 2,
            input_center: 0.0,
            seed,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_resolutions_halve_per_stage() {
        let cfg = ModelConfig::default();
        let res: Vec<usize> = cfg.stage_shapes().iter().map(|s| s.1).collect();
        assert_eq!(res, vec![64, 32, 16, 8, 4]);
        let m = ModelState::init(cfg).unwrap();
        let pass = m.forward(&Tensor::zeros(&[1, 64, 64])).unwrap();
        assert_eq!(pass.features.len(), 5);
        assert_eq!(pass.features[4].shape(), &[64, 4, 4]);
        assert_eq!(pass.logits.shape(), &[6]);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(tiny(1)).unwrap();
        assert_eq!(a, ModelState::init(tiny(1)).unwrap());
        assert_ne!(a, ModelState::init(tiny(2)).unwrap());
        assert!(a.params().iter().filter(|p| p.name.ends_with("bias")).all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ModelState::init(ModelConfig { stages: vec![], ..tiny(0) }).is_err());
        assert!(ModelState::init(ModelConfig { classes: 1, ..tiny(0) }).is_err());
        assert!(ModelState::init(ModelConfig { attention_layer: 3, ..tiny(0) }).is_err());
    }

    #[test]
    fn zero_image_gives_equal_logits() {
        let m = ModelState::init(tiny(3)).unwrap();
        let pass = m.forward(&Tensor::zeros(&[1, 8, 8])).unwrap();
        let l = pass.logits.data();
        assert!(l.iter().all(|&v| v == l[0]));
        assert!(m.attention(&pass, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let m = ModelState::init(tiny(4)).unwrap();
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 4, 8])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn attention_rejects_bad_layer() {
        let m = ModelState::init(tiny(4)).unwrap();
        let pass = m.forward(&Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(matches!(m.attention(&pass, 0), Err(Error::Parameter(_))));
        assert!(matches!(m.attention(&pass, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn conv_weights_reach_attention() {
        // A finite-difference nudge of one stage-2 weight moves T_2.
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i * 7 % 11) as f64) / 11.0).collect()).unwrap();
        let m = ModelState::init(tiny(5)).unwrap();
        let base = m.attention(&m.forward(&x).unwrap(), 2).unwrap();
        let mut moved = m.clone();
        let w = moved.param_mut("stage2.conv1.weight").unwrap();
        for v in w.data_mut() {
            *v += 1e-3;
        }
        let after = moved.attention(&moved.forward(&x).unwrap(), 2).unwrap();
        let diff: f64 = base.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = ModelConfig {
            head: Head::FlattenLinear,
            attention_source: AttentionSource::PreRelu,
            ..tiny(6)
        };
        let m = ModelState::init(cfg).unwrap();
        let back = ModelState::from_bytes(&m.to_bytes(), Path::new("ck")).unwrap();
        assert_eq!(back, m);
        let x = Tensor::filled(&[1, 8, 8], 0.3);
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(ModelState::from_bytes(&bytes, Path::new("ck")).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny(9);
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::parse("depth = 3").is_err());
    }

    #[test]
    fn centering_shifts_the_input() {
        let plain = ModelState::init(tiny(8)).unwrap();
        let centered = ModelState::init(ModelConfig {
            input_center: 0.25,
            ..tiny(8)
        })
        .unwrap();
        let a = plain.forward(&Tensor::filled(&[1, 8, 8], 0.5)).unwrap();
        let b = centered.forward(&Tensor::filled(&[1, 8, 8], 0.75)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_stage_passes_input_through() {
        let cfg = ModelConfig {
            input_size: (1, 1, 1),
            stages: vec![StageConfig::new(1, 0, false)],
            classes: 2,
            attention_layer: 1,
            input_center: 0.0,
            ..ModelConfig::default()
        };
        let m = ModelState::init(cfg).unwrap();
        assert_eq!(m.parameter_count(), 4);
        let pass = m.forward(&Tensor::filled(&[1, 1, 1], 0.5)).unwrap();
        assert_eq!(pass.features[0].data(), &[0.5]);
    }
}
