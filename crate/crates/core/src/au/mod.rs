//! Spatial action-unit maps built from facial landmarks and a class label.
//!
//! The class label selects an AU subset from an [`AuCodebook`]; every AU is
//! placed on the face through landmark combinations from an
//! [`AuAnchorTable`]; each resulting point is rendered as an isotropic
//! Gaussian and the blobs are max-composed into an [`AuMap`].

mod landmarks;
mod tables;

use std::fmt::Write as _;
use std::path::Path;

pub use landmarks::{LandmarkSet, Point, FLIP_PERMUTATION, LANDMARK_COUNT};
pub use tables::{
    default_anchor_table, default_codebook, AnchorSpec, AuAnchorTable, AuCodebook, AuId, Side,
    DEFAULT_ANCHORS, DEFAULT_CODEBOOK,
};

use crate::error::{Error, Result};
use crate::pnm::{self, GrayImage};
use crate::tensor::Tensor;

/// Gaussian width used when none is configured: 8% of the shorter side.
pub fn default_sigma(h: usize, w: usize) -> f64 {
    0.08 * h.min(w) as f64
}

/// Nonnegative `h x w` map, max-normalized to 1 unless empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AuMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl AuMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    /// Wraps raw values, checking the size and `[0, 1]` range.
    pub fn from_values(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::dim("AuMap", "value count", h * w, values.len()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("map value {bad} outside [0, 1]")));
        }
        Ok(Self { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.w + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.values.clone()).expect("sizes agree")
    }

    fn normalize(&mut self) {
        let m = self.max();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.w,
            height: self.h,
            pixels: self.values.iter().map(|&v| pnm::quantize(v)).collect(),
        }
    }

    pub fn to_raw_text(&self) -> String {
        planar_to_raw_text(self.h, self.w, &self.values)
    }

    pub fn from_raw_text(text: &str, path: &Path) -> Result<Self> {
        let (h, w, values) = planar_from_raw_text(text, path)?;
        Self::from_values(h, w, values)
    }

    pub fn save(&self, pgm_path: &Path, raw_path: &Path) -> Result<()> {
        pnm::write_pgm(pgm_path, &self.to_gray())?;
        std::fs::write(raw_path, self.to_raw_text()).map_err(|e| Error::io(raw_path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_text(&text, path)
    }
}

/// `h w` header line, then one row of space-separated values per line.
/// Values print in shortest round-trip form, so parsing is exact.
pub fn planar_to_raw_text(h: usize, w: usize, values: &[f64]) -> String {
    let mut out = format!("{h} {w}\n");
    for row in values.chunks(w.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    out
}

pub fn planar_from_raw_text(text: &str, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(path, 1, "empty map file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::data(path, 1, format!("bad header {header:?}")))?;
    let [h, w] = dims[..] else {
        return Err(Error::data(path, 1, "header must be `h w`"));
    };
    let mut values = Vec::with_capacity(h * w);
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::data(path, i + 1, format!("bad value {tok:?}")))?;
            values.push(v);
        }
    }
    if values.len() != h * w {
        return Err(Error::data(
            path,
            text.lines().count(),
            format!("expected {} values, found {}", h * w, values.len()),
        ));
    }
    Ok((h, w, values))
}

/// Image positions of one AU: one point per anchor spec.
pub fn au_positions(landmarks: &LandmarkSet, au: AuId, table: &AuAnchorTable) -> Result<Vec<Point>> {
    let specs = table
        .get(au)
        .ok_or_else(|| Error::UnknownAu(au.to_string()))?;
    Ok(specs.iter().map(|s| s.locate(landmarks)).collect())
}

/// Max-composition of unit-peak Gaussians (width `sigma` pixels) at the
/// given normalized positions, evaluated at pixel centers and renormalized
/// to a global maximum of exactly 1.
pub fn render_au_map(positions: &[Point], sigma: f64, h: usize, w: usize) -> Result<AuMap> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Parameter(format!("map size must be >= 1, got {h}x{w}")));
    }
    let mut map = AuMap::zeros(h, w);
    if positions.is_empty() {
        return Ok(map);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let centers: Vec<(f64, f64)> = positions.iter().map(|p| p.to_pixels(h, w)).collect();
    for r in 0..h {
        for c in 0..w {
            let mut best = 0.0f64;
            for &(pr, pc) in &centers {
                let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                best = best.max((-d2 * inv).exp());
            }
            map.values[r * w + c] = best;
        }
    }
    if map.is_zero() {
        // Extremely narrow blobs can underflow between pixel centers.
        for &(pr, pc) in &centers {
            let r = pr.round().clamp(0.0, (h - 1) as f64) as usize;
            let c = pc.round().clamp(0.0, (w - 1) as f64) as usize;
            map.values[r * w + c] = 1.0;
        }
    }
    map.normalize();
    Ok(map)
}

/// The AU map for one image and its expression label.
pub fn build_au_map(
    landmarks: &LandmarkSet,
    expression: &str,
    codebook: &AuCodebook,
    table: &AuAnchorTable,
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<AuMap> {
    let aus = codebook.get(expression).ok_or_else(|| {
        Error::Config(format!("codebook has no entry for expression {expression:?}"))
    })?;
    let mut points = Vec::new();
    for &au in aus {
        points.extend(au_positions(landmarks, au, table)?);
    }
    render_au_map(&points, sigma, h, w)
}

/// Shrinks a map by block averaging (exact divisors) or area-weighted
/// averaging (otherwise), then renormalizes to max 1.
pub fn downsample_map(map: &AuMap, h2: usize, w2: usize) -> Result<AuMap> {
    if h2 == 0 || w2 == 0 || h2 > map.h || w2 > map.w {
        return Err(Error::Parameter(format!(
            "cannot resample {}x{} to {h2}x{w2}: only downsampling is supported",
            map.h, map.w
        )));
    }
    if (h2, w2) == (map.h, map.w) {
        return Ok(map.clone());
    }
    let mut out = AuMap::zeros(h2, w2);
    if map.h % h2 == 0 && map.w % w2 == 0 {
        let (bh, bw) = (map.h / h2, map.w / w2);
        let area = (bh * bw) as f64;
        for r in 0..h2 {
            for c in 0..w2 {
                let mut s = 0.0;
                for dr in 0..bh {
                    for dc in 0..bw {
                        s += map.at(r * bh + dr, c * bw + dc);
                    }
                }
                out.values[r * w2 + c] = s / area;
            }
        }
    } else {
        let row_w = overlap_weights(map.h, h2);
        let col_w = overlap_weights(map.w, w2);
        for (r, rws) in row_w.iter().enumerate() {
            for (c, cws) in col_w.iter().enumerate() {
                let mut s = 0.0;
                let mut area = 0.0;
                for &(sr, wr) in rws {
                    for &(sc, wc) in cws {
                        s += wr * wc * map.at(sr, sc);
                        area += wr * wc;
                    }
                }
                out.values[r * w2 + c] = s / area;
            }
        }
    }
    out.normalize();
    Ok(out)
}

/// For each output cell along one axis, the source cells it covers and the
/// overlap length of each.
fn overlap_weights(n: usize, n2: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / n2 as f64;
    (0..n2)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Builds AU maps for class indices of a fixed class list, at image
/// resolution and then downsampled to a target (attention) resolution.
#[derive(Debug, Clone)]
pub struct AuMapBuilder {
    codebook: AuCodebook,
    table: AuAnchorTable,
    classes: Vec<String>,
    sigma: f64,
    image: (usize, usize),
    target: (usize, usize),
}

impl AuMapBuilder {
    pub fn new(
        codebook: AuCodebook,
        table: AuAnchorTable,
        classes: &[String],
        sigma: f64,
        image: (usize, usize),
        target: (usize, usize),
    ) -> Result<Self> {
        codebook.validate(&table)?;
        if let Some(missing) = classes.iter().find(|c| codebook.get(c).is_none()) {
            return Err(Error::Config(format!(
                "codebook has no entry for class {missing:?}"
            )));
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
        }
        if target.0 > image.0 || target.1 > image.1 || target.0 == 0 || target.1 == 0 {
            return Err(Error::Parameter(format!(
                "target resolution {target:?} must not exceed image {image:?}"
            )));
        }
        Ok(Self {
            codebook,
            table,
            classes: classes.to_vec(),
            sigma,
            image,
            target,
        })
    }

    /// Default codebook and anchors with the default sigma.
    pub fn with_defaults(classes: &[String], image: (usize, usize), target: (usize, usize)) -> Result<Self> {
        Self::new(
            default_codebook(),
            default_anchor_table(),
            classes,
            default_sigma(image.0, image.1),
            image,
            target,
        )
    }

    pub fn with_target(&self, target: (usize, usize)) -> Result<Self> {
        Self::new(
            self.codebook.clone(),
            self.table.clone(),
            &self.classes,
            self.sigma,
            self.image,
            target,
        )
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.target
    }

    pub fn codebook(&self) -> &AuCodebook {
        &self.codebook
    }

    pub fn table(&self) -> &AuAnchorTable {
        &self.table
    }

    pub fn expression(&self, label: usize) -> Result<&str> {
        self.classes.get(label).map(String::as_str).ok_or(Error::Index {
            op: "AuMapBuilder",
            index: label,
            len: self.classes.len(),
        })
    }

    /// Map at image resolution.
    pub fn build_full(&self, landmarks: &LandmarkSet, label: usize) -> Result<AuMap> {
        let expr = self.expression(label)?;
        build_au_map(
            landmarks,
            expr,
            &self.codebook,
            &self.table,
            self.sigma,
            self.image.0,
            self.image.1,
        )
    }

    /// Map at the target resolution.
    pub fn build(&self, landmarks: &LandmarkSet, label: usize) -> Result<AuMap> {
        let full = self.build_full(landmarks, label)?;
        downsample_map(&full, self.target.0, self.target.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &AuMap, b: &AuMap) -> f64 {
        let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        let na: f64 = a.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn landmarks_with(overrides: &[(usize, Point)]) -> LandmarkSet {
        let mut pts = vec![Point::new(0.5, 0.5); LANDMARK_COUNT];
        for &(i, p) in overrides {
            pts[i] = p;
        }
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn cheek_anchor_is_midpoint_of_47_and_11() {
        let lm = landmarks_with(&[(47, Point::new(0.7, 0.5)), (11, Point::new(0.9, 0.8))]);
        let table = default_anchor_table();
        let pts = au_positions(&lm, AuId(6), &table).unwrap();
        assert_eq!(pts.len(), 2);
        let right = pts[1];
        assert!((right.x - 0.8).abs() < 1e-15 && (right.y - 0.65).abs() < 1e-15);
    }

    #[test]
    fn single_landmark_spec_and_clamping() {
        let lm = landmarks_with(&[(3, Point::new(0.25, 0.75)), (4, Point::new(1.0, 1.0))]);
        let mut table = AuAnchorTable::new();
        table.insert(AuId(99), AnchorSpec::new(Side::Center, vec![(3, 1.0)]).unwrap());
        assert_eq!(au_positions(&lm, AuId(99), &table).unwrap(), vec![Point::new(0.25, 0.75)]);

        // Negative weights can push the combination outside the square.
        table.insert(
            AuId(98),
            AnchorSpec::new(Side::Center, vec![(4, 2.0), (3, -1.0)]).unwrap(),
        );
        let p = au_positions(&lm, AuId(98), &table).unwrap()[0];
        assert_eq!(p, Point::new(1.0, 1.0));
    }

    #[test]
    fn unknown_au_is_named() {
        let lm = landmarks_with(&[]);
        let err = au_positions(&lm, AuId(41), &default_anchor_table()).unwrap_err();
        assert!(err.to_string().contains("AU41"));
    }

    #[test]
    fn render_examples() {
        let empty = render_au_map(&[], 2.0, 8, 8).unwrap();
        assert!(empty.is_zero());

        // Pixel (2, 5) of an 8x8 grid has center (5.5/8, 2.5/8).
        let p = Point::new(5.5 / 8.0, 2.5 / 8.0);
        let one = render_au_map(&[p], 1.5, 8, 8).unwrap();
        assert_eq!(one.at(2, 5), 1.0);
        assert_eq!(one.argmax(), (2, 5));
        assert!(one.at(2, 6) < 1.0 && one.at(2, 7) < one.at(2, 6));
        assert!((one.at(2, 6) - one.at(3, 5)).abs() < 1e-15);

        let two = render_au_map(&[p, p], 1.5, 8, 8).unwrap();
        assert_eq!(two, one);

        assert!(render_au_map(&[p], 0.0, 8, 8).is_err());
        assert!(render_au_map(&[p], -1.0, 8, 8).is_err());
    }

    #[test]
    fn narrow_blob_still_peaks_at_one() {
        let p = Point::new(0.01, 0.99);
        let m = render_au_map(&[p], 1e-3, 16, 16).unwrap();
        assert_eq!(m.max(), 1.0);
    }

    #[test]
    fn build_examples() {
        let book = default_codebook();
        let table = default_anchor_table();
        let lm = crate::synth::canonical_landmarks();
        let neutral = build_au_map(&lm, "Neutral", &book, &table, 5.0, 64, 64).unwrap();
        assert!(neutral.is_zero());

        let mut solo = AuCodebook::new();
        solo.insert("x", vec![AuId(16)]);
        let m = build_au_map(&lm, "x", &solo, &table, 5.0, 64, 64).unwrap();
        let direct = render_au_map(&[lm.points()[57]], 5.0, 64, 64).unwrap();
        assert_eq!(m, direct);

        // Happiness (AU6, AU12) and surprise (AU1, AU2, AU5, AU26) share no AU.
        let happy = build_au_map(&lm, "happiness", &book, &table, 5.12, 64, 64).unwrap();
        let surprise = build_au_map(&lm, "surprise", &book, &table, 5.12, 64, 64).unwrap();
        let c = cosine(&happy, &surprise);
        assert!(c < 1.0 && c < 0.5, "{c}");

        assert!(matches!(
            build_au_map(&lm, "contempt", &book, &table, 5.0, 64, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn downsample_examples() {
        let lm = crate::synth::canonical_landmarks();
        let m = build_au_map(&lm, "fear", &default_codebook(), &default_anchor_table(), 5.0, 32, 32)
            .unwrap();
        assert_eq!(downsample_map(&m, 32, 32).unwrap(), m);

        let c = AuMap::from_values(4, 6, vec![0.25; 24]).unwrap();
        let d = downsample_map(&c, 2, 3).unwrap();
        assert!(d.values().iter().all(|&v| v == 1.0));
        let d = downsample_map(&c, 3, 4).unwrap();
        assert!(d.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let spike = AuMap::from_values(4, 4, v).unwrap();
        let d = downsample_map(&spike, 2, 2).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0, 0.0, 0.0]);

        assert!(matches!(downsample_map(&spike, 8, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn area_weights_cover_each_axis_once() {
        for (n, n2) in [(7, 3), (64, 5), (10, 10), (9, 2)] {
            let w = overlap_weights(n, n2);
            let mut cover = vec![0.0; n];
            for cells in &w {
                for &(s, o) in cells {
                    cover[s] += o;
                }
            }
            let scale = n2 as f64 / n as f64;
            for c in cover {
                assert!((c * scale - scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_text_round_trip_is_exact() {
        let lm = crate::synth::canonical_landmarks();
        let m = build_au_map(&lm, "anger", &default_codebook(), &default_anchor_table(), 5.12, 64, 64)
            .unwrap();
        let back = AuMap::from_raw_text(&m.to_raw_text(), Path::new("m.txt")).unwrap();
        assert_eq!(back, m);
        assert!(AuMap::from_raw_text("2 2\n0 0 0\n", Path::new("m.txt")).is_err());
    }

    #[test]
    fn builder_rejects_classes_without_entries() {
        let classes = vec!["anger".to_string(), "boredom".to_string()];
        assert!(matches!(
            AuMapBuilder::with_defaults(&classes, (64, 64), (4, 4)),
            Err(Error::Config(_))
        ));
    }
}
