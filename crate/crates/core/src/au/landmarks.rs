use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;

/// Point in normalized image coordinates: `x` grows rightwards, `y` downwards,
/// pixel `(r, c)` of an `h x w` image has its center at
/// `((c + 0.5) / w, (r + 0.5) / h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn clamp_unit(self) -> Self {
        Self::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }

    /// Position in fractional pixel-index units for an `h x w` grid.
    pub fn to_pixels(self, h: usize, w: usize) -> (f64, f64) {
        (self.y * h as f64 - 0.5, self.x * w as f64 - 0.5)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Left/right partner of every index in the 0-indexed 68-point convention
/// (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67).
pub const FLIP_PERMUTATION: [usize; LANDMARK_COUNT] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, // jaw
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, // brows
    27, 28, 29, 30, 35, 34, 33, 32, 31, // nose
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, // eyes
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, // outer lip
    64, 63, 62, 61, 60, 67, 66, 65, // inner lip
];

/// The 68 facial keypoints of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Parameter(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y))
        {
            return Err(Error::Parameter(format!(
                "landmark {i} at ({}, {}) lies outside the unit square",
                points[i].x, points[i].y
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Option<Point> {
        self.points.get(index).copied()
    }

    /// Mirror about the vertical image axis, re-indexing left/right parts.
    pub fn flipped(&self) -> Self {
        let points = FLIP_PERMUTATION
            .iter()
            .map(|&src| {
                let p = self.points[src];
                Point::new(1.0 - p.x, p.y)
            })
            .collect();
        Self { points }
    }

    /// Every point moved by `(dx, dy)` and clamped to the unit square.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| Point::new(p.x + dx, p.y + dy).clamp_unit())
            .collect();
        Self { points }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(LANDMARK_COUNT * 24);
        for p in &self.points {
            writeln!(out, "{} {}", p.x, p.y).expect("string write");
        }
        out
    }

    /// Parses 68 `x y` lines; `path` only labels error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        let mut lines = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            lines += 1;
            let mut fields = line.split_whitespace();
            let mut coord = |name: &str| -> Result<f64> {
                let raw = fields
                    .next()
                    .ok_or_else(|| Error::data(path, i + 1, format!("missing {name} coordinate")))?;
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::data(path, i + 1, format!("bad {name} coordinate {raw:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::data(path, i + 1, format!("{name} = {v} outside [0, 1]")));
                }
                Ok(v)
            };
            let x = coord("x")?;
            let y = coord("y")?;
            if fields.next().is_some() {
                return Err(Error::data(path, i + 1, "expected exactly two fields"));
            }
            points.push(Point::new(x, y));
        }
        if lines != LANDMARK_COUNT {
            return Err(Error::data(
                path,
                lines,
                format!("expected {LANDMARK_COUNT} landmark lines, found {lines}"),
            ));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
