//! Joint training: cross-entropy plus `lambda * (1 - R(T_l, A))`.
//!
//! Each sample gets its own graph. Per-sample roots are pre-weighted so the
//! summed parameter gradients equal the gradient of the batch objective:
//! mean cross-entropy plus `lambda` times the mean alignment penalty over
//! samples whose AU map is nonzero.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::au::{AuMap, AuMapBuilder};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{argmax, ModelState};
use crate::synth::{Dataset, Sample};
use crate::tensor::{Graph, Tensor, Var, COSINE_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// 1-based stage whose attention is aligned.
    pub attention_layer: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            attention_layer: 5,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `CE(logits, y) + lambda * (1 - R(t_l, a))` for one sample. The alignment
/// term is not recorded at all when `lambda` is 0 or `a` is all-zero.
pub fn joint_loss(g: &mut Graph, logits: Var, y: usize, t_l: Var, a: &AuMap, lambda: f64) -> Result<Var> {
    weighted_loss(g, logits, y, t_l, Some(a), 1.0, lambda)
}

fn check_resolution(g: &Graph, t_l: Var, a: &AuMap) -> Result<()> {
    let shape = g.value(t_l).shape();
    if shape != [a.height(), a.width()] {
        return Err(Error::dim(
            "joint_loss",
            "AU map resolution",
            format!("{shape:?}"),
            format!("[{}, {}]", a.height(), a.width()),
        ));
    }
    Ok(())
}

fn weighted_loss(
    g: &mut Graph,
    logits: Var,
    y: usize,
    t_l: Var,
    a: Option<&AuMap>,
    w_ce: f64,
    w_align: f64,
) -> Result<Var> {
    let ce = g.softmax_cross_entropy(logits, y)?;
    let mut root = if w_ce == 1.0 { ce } else { g.affine(ce, w_ce, 0.0) };
    if let Some(a) = a {
        check_resolution(g, t_l, a)?;
        if w_align != 0.0 && !a.is_zero() {
            let target = g.constant(a.to_tensor());
            let r = g.cosine_sim_map(t_l, target, COSINE_EPS)?;
            let penalty = g.affine(r, -w_align, w_align);
            root = g.add(root, penalty)?;
        }
    }
    Ok(root)
}

/// Momentum buffers for SGD: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: &ModelState) -> Self {
        Self {
            velocity: state.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Vec<f64>], lr: f64, momentum: f64) {
        for ((p, v), g) in state.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// One training example; `au` is `None` on alignment-free runs.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: usize,
    pub image: &'a Tensor,
    pub label: usize,
    pub au: Option<&'a AuMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Objective value on the batch before the update.
    pub loss: f64,
    pub ce_sum: f64,
    /// Sum of R and count over samples with a nonzero AU map.
    pub r_sum: f64,
    pub r_count: usize,
    pub correct: usize,
}

/// One SGD-with-momentum update on the mean batch loss.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Sgd,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let layer = cfg.attention_layer;
    let n_align = batch.iter().filter(|b| b.au.is_some_and(|a| !a.is_zero())).count();
    let w_ce = 1.0 / batch.len() as f64;
    let w_align = if n_align > 0 { cfg.lambda / n_align as f64 } else { 0.0 };
    let mut grads: Vec<Vec<f64>> = state.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut stats = StepStats {
        loss: 0.0,
        ce_sum: 0.0,
        r_sum: 0.0,
        r_count: 0,
        correct: 0,
    };
    for item in batch {
        let mut g = Graph::new();
        let params = state.param_vars(&mut g, true);
        let x = g.constant(item.image.clone());
        let trace = state.trace(&mut g, params, x)?;
        let t_l = state.attention_var(&mut g, &trace, layer)?;
        let root = weighted_loss(&mut g, trace.logits, item.label, t_l, item.au, w_ce, w_align)?;

        let logits = g.value(trace.logits).data();
        let ce = ce_value(logits, item.label);
        let non_finite = |value: f64| Error::NonFinite {
            epoch: 0,
            sample: item.id,
            value,
        };
        if !ce.is_finite() {
            return Err(non_finite(ce));
        }
        stats.ce_sum += ce;
        if argmax(logits) == item.label {
            stats.correct += 1;
        }
        if let Some(a) = item.au.filter(|a| !a.is_zero()) {
            let r = crate::tensor::cosine_similarity(g.value(t_l).data(), a.values(), COSINE_EPS);
            if !r.is_finite() {
                return Err(non_finite(r));
            }
            stats.r_sum += r;
            stats.r_count += 1;
        }
        let loss = g.value(root).item()?;
        if !loss.is_finite() {
            return Err(non_finite(loss));
        }
        stats.loss += loss;

        g.backward(root)?;
        for (acc, &p) in grads.iter_mut().zip(&trace.params) {
            if let Some(gp) = g.grad(p) {
                acc.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
            }
        }
    }
    opt.step(state, &grads, cfg.lr, cfg.momentum);
    Ok(stats)
}

fn ce_value(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    max + total.ln() - logits[y]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    /// Mean `1 - R` over training samples with nonzero AU maps.
    pub align: Option<f64>,
    pub r_train: Option<f64>,
    pub r_val: Option<f64>,
    pub acc_val: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tce\talign\tr_train\tr_val\tacc_val\tseconds";

    /// Tab-separated records under a header line. The seconds column is
    /// wall-clock and differs between otherwise identical runs.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
                r.epoch,
                r.ce,
                opt_cell(r.align),
                opt_cell(r.r_train),
                opt_cell(r.r_val),
                r.acc_val,
                r.seconds
            )
            .expect("string write");
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn check_compatible(state: &ModelState, data: &Dataset, what: &str) -> Result<()> {
    let cfg = state.config();
    if data.classes.len() != cfg.classes {
        return Err(Error::Config(format!(
            "{what} set has {} classes, model has {}",
            data.classes.len(),
            cfg.classes
        )));
    }
    let (h, w, c) = cfg.input_size;
    for s in &data.samples {
        if s.image.shape() != [c, h, w] {
            return Err(Error::Config(format!(
                "{what} sample {} has shape {:?}, model expects [{c}, {h}, {w}]",
                s.id,
                s.image.shape()
            )));
        }
        if s.label >= cfg.classes {
            return Err(Error::Config(format!("{what} sample {} has label {}", s.id, s.label)));
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs of seeded mini-batches.
///
/// With `aligner = None` no AU map is ever built and the objective is plain
/// cross-entropy. With an aligner, maps are built per training sample on the
/// fly; validation maps serve only the logged `r_val` measurement.
/// `on_epoch` runs after every epoch (checkpointing, progress).
pub fn fit_with<F>(
    state: &mut ModelState,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    aligner: Option<&AuMapBuilder>,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&EpochRecord, &ModelState) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    check_compatible(state, train, "training")?;
    check_compatible(state, val, "validation")?;
    let layer = cfg.attention_layer;
    let resolution = state
        .config()
        .stage_resolution(layer)
        .map_err(|_| Error::Config(format!("attention_layer {layer} outside the model's stages")))?;
    let builder = aligner.map(|b| b.with_target(resolution)).transpose()?;
    if let Some(b) = &builder {
        if b.classes() != train.classes.as_slice() {
            return Err(Error::Config("AU builder classes differ from the dataset's".into()));
        }
    }

    let mut opt = Sgd::new(state);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut ce_sum, mut r_sum, mut r_count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let maps: Vec<Option<AuMap>> = match &builder {
                Some(b) => samples.iter().map(|s| b.build(&s.landmarks, s.label).map(Some)).collect::<Result<_>>()?,
                None => vec![None; samples.len()],
            };
            let batch: Vec<BatchItem<'_>> = samples
                .iter()
                .zip(&maps)
                .map(|(s, a)| BatchItem {
                    id: s.id,
                    image: &s.image,
                    label: s.label,
                    au: a.as_ref(),
                })
                .collect();
            let stats = train_step(state, &mut opt, &batch, cfg).map_err(|e| match e {
                Error::NonFinite { sample, value, .. } => Error::NonFinite { epoch, sample, value },
                other => other,
            })?;
            ce_sum += stats.ce_sum;
            r_sum += stats.r_sum;
            r_count += stats.r_count;
        }
        let seconds = start.elapsed().as_secs_f64();
        let r_train = (r_count > 0).then(|| r_sum / r_count as f64);
        let r_val = match &builder {
            Some(b) => Some(metrics::att_cos(state, val, layer, b)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            ce: ce_sum / train.len() as f64,
            align: r_train.map(|r| 1.0 - r),
            r_train,
            r_val,
            acc_val: metrics::accuracy(state, val)?,
            seconds,
        };
        on_epoch(&record, state)?;
        log.records.push(record);
    }
    Ok(log)
}

pub fn fit(
    state: &mut ModelState,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    aligner: Option<&AuMapBuilder>,
) -> Result<TrainLog> {
    fit_with(state, train, val, cfg, aligner, |_, _| Ok(()))
}
