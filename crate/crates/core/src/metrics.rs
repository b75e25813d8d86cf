//! Classification accuracy, attention/CAM localization cosines, and
//! per-class average maps.
//!
//! Localization scores compare a max-normalized candidate map against the
//! AU map of the sample's true label at the same stage resolution. The
//! reference map is a measurement target only. Samples whose reference
//! is all-zero are left out of the mean; an all-zero candidate scores 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::au::{AuMap, AuMapBuilder};
use crate::cam::{self, relu_max_normalize, CamMethod};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::pnm::{heat_overlay, RgbImage};
use crate::synth::Dataset;
use crate::tensor::{cosine_similarity, COSINE_EPS};

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(state: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("accuracy needs a non-empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in &data.samples {
        if state.forward(&s.image)?.predicted() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn layer_builder(state: &ModelState, l: usize, builder: &AuMapBuilder) -> Result<AuMapBuilder> {
    builder.with_target(state.config().stage_resolution(l)?)
}

fn scored_mean(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Per-sample attention cosines; `None` where the reference map is zero.
pub fn att_cos_scores(state: &ModelState, data: &Dataset, l: usize, builder: &AuMapBuilder) -> Result<Vec<Option<f64>>> {
    let b = layer_builder(state, l, builder)?;
    data.samples
        .iter()
        .map(|s| {
            let a = b.build(&s.landmarks, s.label)?;
            if a.is_zero() {
                return Ok(None);
            }
            let t = state.attention(&state.forward(&s.image)?, l)?;
            let t = relu_max_normalize(t.into_data());
            Ok(Some(cosine_similarity(&t, a.values(), COSINE_EPS)))
        })
        .collect()
}

pub fn att_cos(state: &ModelState, data: &Dataset, l: usize, builder: &AuMapBuilder) -> Result<f64> {
    let scores: Vec<f64> = att_cos_scores(state, data, l, builder)?.into_iter().flatten().collect();
    Ok(scored_mean(&scores))
}

/// Mean cosine between `method`'s map for the true class and the AU map.
pub fn cam_cos(
    state: &ModelState,
    data: &Dataset,
    method: CamMethod,
    l: usize,
    builder: &AuMapBuilder,
) -> Result<f64> {
    let b = layer_builder(state, l, builder)?;
    let mut scores = Vec::with_capacity(data.len());
    for s in &data.samples {
        let a = b.build(&s.landmarks, s.label)?;
        if a.is_zero() {
            continue;
        }
        let m = cam::extract(state, &s.image, s.label, l, method)?;
        scores.push(cosine_similarity(&m.values, a.values(), COSINE_EPS));
    }
    Ok(scored_mean(&scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cl: f64,
    pub cam_cos: BTreeMap<CamMethod, f64>,
    pub att_cos: f64,
    pub layer: usize,
    pub with_au: bool,
    /// Samples counted for `cl`.
    pub n_samples: usize,
    /// Samples with a nonzero reference map, counted for the cosines.
    pub n_scored: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "layer = {}", self.layer).unwrap();
        writeln!(out, "with_au = {}", self.with_au).unwrap();
        writeln!(out, "n_samples = {}", self.n_samples).unwrap();
        writeln!(out, "n_scored = {}", self.n_scored).unwrap();
        writeln!(out, "cl = {}", self.cl).unwrap();
        writeln!(out, "att_cos = {}", self.att_cos).unwrap();
        for (m, v) in &self.cam_cos {
            writeln!(out, "cam_cos.{m} = {v}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricsReport {
            cl: 0.0,
            cam_cos: BTreeMap::new(),
            att_cos: 0.0,
            layer: 0,
            with_au: false,
            n_samples: 0,
            n_scored: 0,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report: expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("report: bad value {v:?} for {k}"));
            match k {
                "layer" => r.layer = v.parse().map_err(|_| bad())?,
                "with_au" => r.with_au = v.parse().map_err(|_| bad())?,
                "n_samples" => r.n_samples = v.parse().map_err(|_| bad())?,
                "n_scored" => r.n_scored = v.parse().map_err(|_| bad())?,
                "cl" => r.cl = v.parse().map_err(|_| bad())?,
                "att_cos" => r.att_cos = v.parse().map_err(|_| bad())?,
                _ => match k.strip_prefix("cam_cos.") {
                    Some(m) => {
                        r.cam_cos.insert(CamMethod::parse(m)?, v.parse().map_err(|_| bad())?);
                    }
                    None => return Err(Error::Config(format!("report: unknown key {k:?}"))),
                },
            }
        }
        Ok(r)
    }

    pub const TABLE_HEADER: &'static str = "method\twith_au\tcl\tcam_cos\tatt_cos";

    /// One row per CAM method, Table-1 style.
    pub fn table_rows(&self) -> Vec<String> {
        self.cam_cos
            .iter()
            .map(|(m, v)| format!("{m}\t{}\t{}\t{v}\t{}", self.with_au, self.cl, self.att_cos))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{}\n", Self::TABLE_HEADER);
        for row in self.table_rows() {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Computes the full report in one pass over `data`.
pub fn evaluate(
    state: &ModelState,
    data: &Dataset,
    l: usize,
    builder: &AuMapBuilder,
    methods: &[CamMethod],
    with_au: bool,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation needs a non-empty dataset".into()));
    }
    let b = layer_builder(state, l, builder)?;
    let mut correct = 0usize;
    let mut att = Vec::new();
    let mut cams: BTreeMap<CamMethod, Vec<f64>> = methods.iter().map(|&m| (m, Vec::new())).collect();
    for s in &data.samples {
        let pass = state.forward(&s.image)?;
        if pass.predicted() == s.label {
            correct += 1;
        }
        let a = b.build(&s.landmarks, s.label)?;
        if a.is_zero() {
            continue;
        }
        let t = relu_max_normalize(state.attention(&pass, l)?.into_data());
        att.push(cosine_similarity(&t, a.values(), COSINE_EPS));
        let needs_grad = methods.iter().any(|&m| m != CamMethod::Cam);
        let grads = if needs_grad {
            Some(cam::layer_gradients(state, &s.image, s.label, l)?)
        } else {
            None
        };
        for (&m, scores) in cams.iter_mut() {
            let map = match (&grads, m) {
                (Some((f, g)), m) if m != CamMethod::Cam => cam::cam_from_gradients(m, f, g, s.label, l)?,
                _ => cam::extract(state, &s.image, s.label, l, m)?,
            };
            scores.push(cosine_similarity(&map.values, a.values(), COSINE_EPS));
        }
    }
    Ok(MetricsReport {
        cl: correct as f64 / data.len() as f64,
        cam_cos: cams.into_iter().map(|(m, v)| (m, scored_mean(&v))).collect(),
        att_cos: scored_mean(&att),
        layer: l,
        with_au,
        n_samples: data.len(),
        n_scored: att.len(),
    })
}

/// What a per-class average is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Attention,
    Cam(CamMethod),
    /// Reference AU maps of the true labels.
    AuMap,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Attention => "attention",
            MapKind::Cam(m) => m.as_str(),
            MapKind::AuMap => "aumap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "attention" => Ok(MapKind::Attention),
            "aumap" => Ok(MapKind::AuMap),
            other => CamMethod::parse(other).map(MapKind::Cam),
        }
    }
}

/// Mean of per-sample maps, grouped by true class in class order.
/// `builder` is only consulted for [`MapKind::AuMap`].
pub fn per_class_average_maps(
    state: &ModelState,
    data: &Dataset,
    l: usize,
    kind: MapKind,
    builder: &AuMapBuilder,
) -> Result<Vec<AuMap>> {
    let missing = data.missing_classes();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("no samples for classes: {}", missing.join(", "))));
    }
    let (h, w) = state.config().stage_resolution(l)?;
    let b = if kind == MapKind::AuMap { Some(layer_builder(state, l, builder)?) } else { None };
    let k = data.classes.len();
    let mut sums = vec![vec![0.0; h * w]; k];
    let mut counts = vec![0usize; k];
    for s in &data.samples {
        let values = match kind {
            MapKind::Attention => relu_max_normalize(state.attention(&state.forward(&s.image)?, l)?.into_data()),
            MapKind::Cam(m) => cam::extract(state, &s.image, s.label, l, m)?.values,
            MapKind::AuMap => b.as_ref().expect("built above").build(&s.landmarks, s.label)?.values().to_vec(),
        };
        sums[s.label].iter_mut().zip(&values).for_each(|(a, v)| *a += v);
        counts[s.label] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(sum, n)| {
            let values = sum.into_iter().map(|v| (v / n as f64).clamp(0.0, 1.0)).collect();
            AuMap::from_values(h, w, values)
        })
        .collect()
}

/// Per-class mean input image, `[h * w]` each, for overlay bases.
pub fn per_class_mean_images(data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let missing = data.missing_classes();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("no samples for classes: {}", missing.join(", "))));
    }
    let n = data.samples[0].image.numel();
    let mut sums = vec![vec![0.0; n]; data.classes.len()];
    let mut counts = vec![0usize; data.classes.len()];
    for s in &data.samples {
        sums[s.label].iter_mut().zip(s.image.data()).for_each(|(a, v)| *a += v);
        counts[s.label] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

/// Bilinear resampling of a row-major plane with pixel-center alignment.
pub fn resample(values: &[f64], h: usize, w: usize, h2: usize, w2: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize, n2: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n as f64 / n2 as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(h2 * w2);
    for r in 0..h2 {
        let (r0, r1, fr) = coord(r, h, h2);
        for c in 0..w2 {
            let (c0, c1, fc) = coord(c, w, w2);
            let top = values[r0 * w + c0] * (1.0 - fc) + values[r0 * w + c1] * fc;
            let bottom = values[r1 * w + c0] * (1.0 - fc) + values[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// One row of `panel x panel` overlays, one per map, left to right.
/// `bases` are `(h, w)` planes drawn under the heat maps.
pub fn class_grid(maps: &[AuMap], bases: &[Vec<f64>], base_size: (usize, usize), panel: usize) -> Result<RgbImage> {
    if maps.len() != bases.len() {
        return Err(Error::Parameter(format!("{} maps but {} base images", maps.len(), bases.len())));
    }
    if panel == 0 {
        return Err(Error::Parameter("panel size must be >= 1".into()));
    }
    let mut grid = RgbImage::new(panel * maps.len(), panel);
    for (i, (m, base)) in maps.iter().zip(bases).enumerate() {
        let heat = resample(m.values(), m.height(), m.width(), panel, panel);
        let base = resample(base, base_size.0, base_size.1, panel, panel);
        let tile = heat_overlay(&base, &heat, panel, panel);
        for r in 0..panel {
            for c in 0..panel {
                grid.put(r, i * panel + c, tile.get(r, c));
            }
        }
    }
    Ok(grid)
}

/// Writes the per-class P6 grid for `kind`.
pub fn export_class_grid(
    state: &ModelState,
    data: &Dataset,
    l: usize,
    kind: MapKind,
    builder: &AuMapBuilder,
    panel: usize,
    path: &Path,
) -> Result<Vec<AuMap>> {
    let maps = per_class_average_maps(state, data, l, kind, builder)?;
    let bases = per_class_mean_images(data)?;
    let size = data.image_size().expect("non-empty after class check");
    crate::pnm::write_ppm(path, &class_grid(&maps, &bases, size, panel)?)?;
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StageConfig};
    use crate::synth::{generate, SynthConfig};

    fn setup() -> (ModelState, Dataset, AuMapBuilder) {
        let data = generate(&SynthConfig {
            samples_per_class: 2,
            image_size: (32, 32),
            split: (1.0, 0.0),
            ..SynthConfig::default()
        })
        .unwrap();
        let m = ModelState::init(ModelConfig {
            input_size: (32, 32, 1),
            stages: vec![StageConfig::new(4, 1, false), StageConfig::new(6, 1, true)],
            attention_layer: 2,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let b = AuMapBuilder::with_defaults(data.classes(), (32, 32), (32, 32)).unwrap();
        (m, data.train, b)
    }

    #[test]
    fn report_text_round_trip() {
        let (m, data, b) = setup();
        let r = evaluate(&m, &data, 2, &b, &CamMethod::ALL, false).unwrap();
        assert_eq!(r.n_samples, 12);
        assert_eq!(r.cam_cos.len(), 4);
        assert_eq!(MetricsReport::parse(&r.to_text()).unwrap(), r);
        assert_eq!(r.to_table().lines().count(), 5);
        for v in r.cam_cos.values().chain([&r.att_cos, &r.cl]) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn evaluate_agrees_with_single_metrics() {
        let (m, data, b) = setup();
        let r = evaluate(&m, &data, 2, &b, &CamMethod::ALL, false).unwrap();
        assert_eq!(r.att_cos, att_cos(&m, &data, 2, &b).unwrap());
        assert_eq!(r.cl, accuracy(&m, &data).unwrap());
        for meth in CamMethod::ALL {
            assert_eq!(r.cam_cos[&meth], cam_cos(&m, &data, meth, 2, &b).unwrap());
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let (m, data, b) = setup();
        let before = m.clone();
        evaluate(&m, &data, 2, &b, &CamMethod::ALL, true).unwrap();
        per_class_average_maps(&m, &data, 2, MapKind::Attention, &b).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn averages_are_idempotent_and_detect_missing_classes() {
        let (m, mut data, b) = setup();
        let once = per_class_average_maps(&m, &data, 2, MapKind::Attention, &b).unwrap();
        let copy = data.samples.clone();
        data.samples.extend(copy);
        let twice = per_class_average_maps(&m, &data, 2, MapKind::Attention, &b).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        data.samples.retain(|s| s.label != 4);
        match per_class_average_maps(&m, &data, 2, MapKind::Attention, &b) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("Sadness")),
            other => panic!("expected missing-class error, got {other:?}"),
        }
    }

    #[test]
    fn grid_has_one_panel_per_class() {
        let (m, data, b) = setup();
        let maps = per_class_average_maps(&m, &data, 2, MapKind::AuMap, &b).unwrap();
        let bases = per_class_mean_images(&data).unwrap();
        let grid = class_grid(&maps, &bases, (32, 32), 24).unwrap();
        assert_eq!((grid.width, grid.height), (6 * 24, 24));
    }

    #[test]
    fn resample_identity_and_constant() {
        let v: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(resample(&v, 3, 4, 3, 4), v);
        assert!(resample(&[0.4; 4], 2, 2, 7, 5).iter().all(|&x| (x - 0.4).abs() < 1e-15));
    }

    #[test]
    fn perfect_and_disjoint_attention_scores() {
        let a = [0.0, 1.0, 0.5, 0.0];
        assert!((cosine_similarity(&a, &a, COSINE_EPS) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0, 0.0], &a, COSINE_EPS), 0.0);
        assert_eq!(cosine_similarity(&[0.0; 4], &a, COSINE_EPS), 0.0);
    }
}
