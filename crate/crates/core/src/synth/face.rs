//! Canonical face template, AU-driven deformations and rasterization.

use crate::au::{AuId, LandmarkSet, Point, FLIP_PERMUTATION, LANDMARK_COUNT};

/// Landmark coordinates are snapped to this dyadic grid so that mirroring
/// (`x -> 1 - x`) is exact in floating point.
pub const COORD_GRID: f64 = (1u64 << 20) as f64;

pub(crate) fn snap(v: f64) -> f64 {
    ((v.clamp(0.0, 1.0)) * COORD_GRID).round() / COORD_GRID
}

/// The neutral, frontal 68-point face.
pub fn canonical_landmarks() -> LandmarkSet {
    let mut p = [Point::new(0.0, 0.0); LANDMARK_COUNT];

    // Jaw: lower half-ellipse from the image-left temple to the right one.
    for (i, pt) in p.iter_mut().enumerate().take(17) {
        let phi = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        *pt = Point::new(0.5 + 0.36 * phi.cos(), 0.42 + 0.46 * phi.sin());
    }
    // Image-left brow, outer (17) to inner (21).
    for (k, i) in (17..=21).enumerate() {
        let t = k as f64 / 4.0;
        let x = 0.22 + 0.22 * t;
        let y = 0.30 - 0.03 * (std::f64::consts::PI * t).sin();
        p[i] = Point::new(x, y);
    }
    // Nose bridge and nostrils.
    for (k, i) in (27..=30).enumerate() {
        p[i] = Point::new(0.5, 0.36 + 0.06 * k as f64);
    }
    p[31] = Point::new(0.44, 0.58);
    p[32] = Point::new(0.47, 0.59);
    p[33] = Point::new(0.50, 0.595);
    // Image-left eye: outer corner, two upper, inner corner, two lower.
    p[36] = Point::new(0.26, 0.38);
    p[37] = Point::new(0.305, 0.355);
    p[38] = Point::new(0.355, 0.355);
    p[39] = Point::new(0.40, 0.38);
    p[40] = Point::new(0.355, 0.405);
    p[41] = Point::new(0.305, 0.405);
    // Mouth, outer contour then inner.
    p[48] = Point::new(0.38, 0.72);
    p[49] = Point::new(0.42, 0.70);
    p[50] = Point::new(0.46, 0.69);
    p[51] = Point::new(0.50, 0.695);
    p[57] = Point::new(0.50, 0.77);
    p[58] = Point::new(0.46, 0.765);
    p[59] = Point::new(0.42, 0.75);
    p[60] = Point::new(0.40, 0.72);
    p[61] = Point::new(0.45, 0.715);
    p[62] = Point::new(0.50, 0.715);
    p[66] = Point::new(0.50, 0.725);
    p[67] = Point::new(0.45, 0.725);

    // Snap the left half and midline, then mirror onto the right half so the
    // template is exactly symmetric.
    const LEFT: [usize; 29] = [
        0, 1, 2, 3, 4, 5, 6, 7, 17, 18, 19, 20, 21, 31, 32, 36, 37, 38, 39, 40, 41, 48, 49, 50,
        58, 59, 60, 61, 67,
    ];
    for q in p.iter_mut() {
        *q = Point::new(snap(q.x), snap(q.y));
    }
    for i in LEFT {
        p[FLIP_PERMUTATION[i]] = Point::new(1.0 - p[i].x, p[i].y);
    }
    let points = p.to_vec();
    LandmarkSet::new(points).expect("template lies in the unit square")
}

/// One AU's landmark displacements in units of [`DEFORM_SCALE`]; each group
/// is a connected set of landmarks moved together.
struct Deformation {
    groups: &'static [&'static [(usize, f64, f64)]],
}

/// Displacement unit in normalized coordinates (~2.2 px at 64x64).
pub const DEFORM_SCALE: f64 = 0.035;

fn deformation(au: AuId) -> Deformation {
    const NONE: &[&[(usize, f64, f64)]] = &[];
    let groups: &'static [&'static [(usize, f64, f64)]] = match au.0 {
        // inner brow raiser
        1 => &[
            &[(21, 0.0, -1.0), (20, 0.0, -0.6)],
            &[(22, 0.0, -1.0), (23, 0.0, -0.6)],
        ],
        // outer brow raiser
        2 => &[
            &[(17, 0.0, -1.0), (18, 0.0, -0.6)],
            &[(26, 0.0, -1.0), (25, 0.0, -0.6)],
        ],
        // brow lowerer: inner brows down and together
        4 => &[
            &[(21, 0.35, 0.9), (20, 0.15, 0.45)],
            &[(22, -0.35, 0.9), (23, -0.15, 0.45)],
        ],
        // upper lid raiser
        5 => &[
            &[(37, 0.0, -0.6), (38, 0.0, -0.6)],
            &[(43, 0.0, -0.6), (44, 0.0, -0.6)],
        ],
        // lid tightener: lower lids up
        7 => &[
            &[(40, 0.0, -0.45), (41, 0.0, -0.45)],
            &[(46, 0.0, -0.45), (47, 0.0, -0.45)],
        ],
        // lip corner puller
        12 => &[
            &[(48, -0.5, -1.0), (60, -0.4, -0.8), (49, -0.2, -0.4), (59, -0.2, -0.4)],
            &[(54, 0.5, -1.0), (64, 0.4, -0.8), (53, 0.2, -0.4), (55, 0.2, -0.4)],
        ],
        // lip corner depressor
        15 => &[
            &[(48, 0.0, 1.0), (60, 0.0, 0.8), (49, 0.0, 0.3), (59, 0.0, 0.3)],
            &[(54, 0.0, 1.0), (64, 0.0, 0.8), (53, 0.0, 0.3), (55, 0.0, 0.3)],
        ],
        // lower lip depressor
        16 => &[&[
            (57, 0.0, 0.8),
            (56, 0.0, 0.7),
            (58, 0.0, 0.7),
            (66, 0.0, 0.6),
            (65, 0.0, 0.5),
            (67, 0.0, 0.5),
        ]],
        // lip stretcher
        20 => &[
            &[(48, -1.0, 0.1), (60, -0.8, 0.1), (49, -0.3, 0.0), (59, -0.3, 0.0)],
            &[(54, 1.0, 0.1), (64, 0.8, 0.1), (53, 0.3, 0.0), (55, 0.3, 0.0)],
        ],
        // lip tightener: lips pressed thin
        23 => &[&[
            (50, 0.0, 0.35),
            (51, 0.0, 0.35),
            (52, 0.0, 0.35),
            (56, 0.0, -0.35),
            (57, 0.0, -0.35),
            (58, 0.0, -0.35),
        ]],
        // jaw drop: chin and lower lip move down, mouth opens
        26 => &[
            &[
                (8, 0.0, 1.5),
                (7, 0.0, 1.0),
                (9, 0.0, 1.0),
                (6, 0.0, 0.5),
                (10, 0.0, 0.5),
            ],
            &[
                (57, 0.0, 1.5),
                (56, 0.0, 1.3),
                (58, 0.0, 1.3),
                (55, 0.0, 0.8),
                (59, 0.0, 0.8),
                (66, 0.0, 1.4),
                (65, 0.0, 1.2),
                (67, 0.0, 1.2),
            ],
        ],
        _ => NONE,
    };
    Deformation { groups }
}

/// Local texture cues rendered at an AU site rather than landmark motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Texture {
    /// Raised cheek: bright bulge.
    CheekBulge,
    /// Nose wrinkle: short dark horizontal creases.
    Wrinkles,
}

fn textures(au: AuId) -> &'static [(Texture, &'static [(usize, f64)])] {
    match au.0 {
        6 => &[
            (Texture::CheekBulge, &[(40, 0.5), (5, 0.5)]),
            (Texture::CheekBulge, &[(47, 0.5), (11, 0.5)]),
        ],
        9 => &[(Texture::Wrinkles, &[(28, 0.5), (29, 0.5)])],
        _ => &[],
    }
}

/// Applies the AUs of one expression to the template, scaled by `intensity`.
pub fn deform(base: &LandmarkSet, aus: &[AuId], intensity: f64) -> LandmarkSet {
    let mut pts = base.points().to_vec();
    for &au in aus {
        for group in deformation(au).groups {
            for &(i, dx, dy) in *group {
                pts[i].x += dx * DEFORM_SCALE * intensity;
                pts[i].y += dy * DEFORM_SCALE * intensity;
            }
        }
    }
    let pts = pts.into_iter().map(Point::clamp_unit).collect();
    LandmarkSet::new(pts).expect("clamped")
}

/// Centers of every class-conditioned change for the given AUs, measured on
/// the deformed landmarks: the displacement-weighted centroid of each moved
/// landmark group and the position of each texture cue.
pub fn deformation_sites(deformed: &LandmarkSet, aus: &[AuId]) -> Vec<Point> {
    let mut sites = Vec::new();
    for &au in aus {
        for group in deformation(au).groups {
            let (mut x, mut y, mut wsum) = (0.0, 0.0, 0.0);
            for &(i, dx, dy) in *group {
                let w = dx.hypot(dy);
                let p = deformed.points()[i];
                x += w * p.x;
                y += w * p.y;
                wsum += w;
            }
            sites.push(Point::new(x / wsum, y / wsum));
        }
        for (_, combo) in textures(au) {
            sites.push(combo_point(deformed, combo));
        }
    }
    sites
}

fn combo_point(lm: &LandmarkSet, combo: &[(usize, f64)]) -> Point {
    let (mut x, mut y) = (0.0, 0.0);
    for &(i, w) in combo {
        x += w * lm.points()[i].x;
        y += w * lm.points()[i].y;
    }
    Point::new(x, y)
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

const BACKGROUND: f64 = 0.25;
const SKIN: f64 = 0.62;
const BROW: f64 = 0.12;
const EYE: f64 = 0.08;
const LIP: f64 = 0.32;
const MOUTH_INTERIOR: f64 = 0.04;
const NOSE: f64 = 0.40;

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

type Pix = (f64, f64);

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![BACKGROUND; h * w],
        }
    }

    /// Pixel-index coordinates (col, row) of a normalized point.
    fn to_px(&self, p: Point) -> Pix {
        (p.x * self.w as f64 - 0.5, p.y * self.h as f64 - 0.5)
    }

    fn blend(&mut self, r: usize, c: usize, value: f64, alpha: f64) {
        let v = &mut self.px[r * self.w + c];
        *v = *v * (1.0 - alpha) + value * alpha;
    }

    fn fill_polygon(&mut self, poly: &[Pix], value: f64) {
        for r in 0..self.h {
            for c in 0..self.w {
                let q = (c as f64, r as f64);
                let d = polygon_edge_distance(poly, q);
                let inside = point_in_polygon(poly, q);
                let cov = if inside { 0.5 + d } else { 0.5 - d }.clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(r, c, value, cov);
                }
            }
        }
    }

    fn stroke(&mut self, line: &[Pix], half_width: f64, value: f64) {
        for r in 0..self.h {
            for c in 0..self.w {
                let q = (c as f64, r as f64);
                let d = line
                    .windows(2)
                    .map(|s| segment_distance(s[0], s[1], q))
                    .fold(f64::INFINITY, f64::min);
                let cov = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(r, c, value, cov);
                }
            }
        }
    }

    fn blob(&mut self, center: Pix, radius: f64, delta: f64) {
        for r in 0..self.h {
            for c in 0..self.w {
                let d2 = (c as f64 - center.0).powi(2) + (r as f64 - center.1).powi(2);
                let v = &mut self.px[r * self.w + c];
                *v += delta * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
}

fn segment_distance(a: Pix, b: Pix, q: Pix) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((q.0 - a.0) * vx + (q.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (q.0 - a.0 - t * vx).hypot(q.1 - a.1 - t * vy)
}

fn polygon_edge_distance(poly: &[Pix], q: Pix) -> f64 {
    (0..poly.len())
        .map(|i| segment_distance(poly[i], poly[(i + 1) % poly.len()], q))
        .fold(f64::INFINITY, f64::min)
}

fn point_in_polygon(poly: &[Pix], q: Pix) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > q.1) != (b.1 > q.1) && q.0 < (b.0 - a.0) * (q.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Renders a face for the landmarks; `aus` adds texture cues. Output is a
/// row-major `h x w` plane, not yet noised or clamped.
pub fn render_face(lm: &LandmarkSet, aus: &[AuId], h: usize, w: usize) -> Vec<f64> {
    let mut cv = Canvas::new(h, w);
    let px = |i: usize| cv_point(lm, i, h, w);

    // Head: jaw contour closed by an arc over the forehead.
    let mut head: Vec<Pix> = (0..=16).map(px).collect();
    let (l, r) = (px(0), px(16));
    let top = 0.06 * h as f64;
    let (cx, cy) = ((l.0 + r.0) / 2.0, (l.1 + r.1) / 2.0);
    let (rx, ry) = ((r.0 - l.0) / 2.0, cy - top);
    for k in 1..16 {
        let phi = std::f64::consts::PI * k as f64 / 16.0;
        head.push((cx + rx * phi.cos(), cy - ry * phi.sin()));
    }
    cv.fill_polygon(&head, SKIN);

    for tex in aus.iter().flat_map(|&au| textures(au)) {
        let center = cv.to_px(combo_point(lm, tex.1));
        match tex.0 {
            Texture::CheekBulge => cv.blob(center, 0.05 * w as f64, 0.28),
            Texture::Wrinkles => {
                let half = 0.06 * w as f64;
                let gap = 0.035 * h as f64;
                for k in -1..=1 {
                    let y = center.1 + k as f64 * gap;
                    cv.stroke(&[(center.0 - half, y), (center.0 + half, y)], 0.35, 0.2);
                }
            }
        }
    }

    let brow_l: Vec<Pix> = (17..=21).map(px).collect();
    let brow_r: Vec<Pix> = (22..=26).map(px).collect();
    cv.stroke(&brow_l, 1.0, BROW);
    cv.stroke(&brow_r, 1.0, BROW);

    let eye_l: Vec<Pix> = (36..=41).map(px).collect();
    let eye_r: Vec<Pix> = (42..=47).map(px).collect();
    cv.fill_polygon(&eye_l, EYE);
    cv.fill_polygon(&eye_r, EYE);

    let bridge: Vec<Pix> = (27..=30).map(px).collect();
    cv.stroke(&bridge, 0.5, NOSE);
    let nostrils: Vec<Pix> = (31..=35).map(px).collect();
    cv.stroke(&nostrils, 0.6, NOSE);

    let outer: Vec<Pix> = (48..=59).map(px).collect();
    cv.fill_polygon(&outer, LIP);
    let inner: Vec<Pix> = (60..=67).map(px).collect();
    cv.fill_polygon(&inner, MOUTH_INTERIOR);

    cv.px
}

fn cv_point(lm: &LandmarkSet, i: usize, h: usize, w: usize) -> Pix {
    let p = lm.points()[i];
    (p.x * w as f64 - 0.5, p.y * h as f64 - 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::au::{au_positions, default_anchor_table, default_codebook};

    #[test]
    fn template_is_mirror_symmetric() {
        let lm = canonical_landmarks();
        assert_eq!(lm.flipped(), lm);
    }

    #[test]
    fn template_has_face_layout() {
        let p = canonical_landmarks();
        let p = p.points();
        assert!(p[8].y > p[57].y && p[57].y > p[51].y && p[51].y > p[30].y);
        assert!(p[30].y > p[39].y && p[39].y > p[21].y);
        assert!(p[36].x < p[39].x && p[39].x < p[42].x && p[42].x < p[45].x);
        assert!(p[48].x < p[54].x);
        assert!(p[47].y > p[44].y);
    }

    #[test]
    fn deformations_sit_on_class_anchors() {
        let book = default_codebook();
        let table = default_anchor_table();
        let base = canonical_landmarks();
        let px = 64.0;
        for expr in ["anger", "disgust", "fear", "happiness", "sadness", "surprise"] {
            let aus = book.get(expr).unwrap();
            let lm = deform(&base, aus, 1.0);
            let anchors: Vec<Point> = aus
                .iter()
                .flat_map(|&au| au_positions(&lm, au, &table).unwrap())
                .collect();
            let sites = deformation_sites(&lm, aus);
            assert!(!sites.is_empty());
            for s in sites {
                let nearest = anchors
                    .iter()
                    .map(|a| a.distance(s) * px)
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest < 3.0, "{expr}: site {s:?} is {nearest:.2}px from anchors");
            }
        }
    }

    #[test]
    fn every_default_au_has_a_visible_change() {
        let base = canonical_landmarks();
        let neutral = render_face(&base, &[], 64, 64);
        for au in [1, 2, 4, 5, 6, 7, 9, 12, 15, 16, 20, 23, 26] {
            let aus = [AuId(au)];
            let lm = deform(&base, &aus, 1.0);
            let img = render_face(&lm, &aus, 64, 64);
            let diff: f64 = img.iter().zip(&neutral).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 3.0, "AU{au} changes the image by only {diff}");
        }
    }
}
