use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::landmarks::{LandmarkSet, Point, LANDMARK_COUNT};
use crate::error::{Error, Result};

/// A FACS action unit number, written `AU<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AuId(pub u16);

impl fmt::Display for AuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.0)
    }
}

impl FromStr for AuId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let digits = s
            .strip_prefix("AU")
            .or_else(|| s.strip_prefix("au"))
            .or_else(|| s.strip_prefix("Au"))
            .unwrap_or(s);
        digits
            .parse()
            .map(AuId)
            .map_err(|_| Error::UnknownAu(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Center,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            "center" => Ok(Side::Center),
            other => Err(Error::Config(format!("unknown anchor side {other:?}"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Center => "center",
        })
    }
}

/// One AU location: a convex combination of landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub side: Side,
    pub combo: Vec<(usize, f64)>,
}

impl AnchorSpec {
    pub fn new(side: Side, combo: Vec<(usize, f64)>) -> Result<Self> {
        if combo.is_empty() {
            return Err(Error::Config("anchor combination is empty".into()));
        }
        if let Some(&(idx, _)) = combo.iter().find(|(i, _)| *i >= LANDMARK_COUNT) {
            return Err(Error::Config(format!(
                "landmark index {idx} outside 0..{LANDMARK_COUNT}"
            )));
        }
        let total: f64 = combo.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "anchor weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { side, combo })
    }

    /// The weighted landmark position, clamped to the unit square.
    pub fn locate(&self, landmarks: &LandmarkSet) -> Point {
        let (mut x, mut y) = (0.0, 0.0);
        for &(idx, w) in &self.combo {
            let p = landmarks.points()[idx];
            x += w * p.x;
            y += w * p.y;
        }
        Point::new(x, y).clamp_unit()
    }
}

/// Landmark-anchored positions for every known AU.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuAnchorTable {
    anchors: BTreeMap<AuId, Vec<AnchorSpec>>,
}

impl AuAnchorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, au: AuId, spec: AnchorSpec) {
        self.anchors.entry(au).or_default().push(spec);
    }

    pub fn get(&self, au: AuId) -> Option<&[AnchorSpec]> {
        self.anchors.get(&au).map(Vec::as_slice)
    }

    pub fn contains(&self, au: AuId) -> bool {
        self.anchors.contains_key(&au)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AuId, &[AnchorSpec])> {
        self.anchors.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Parses lines of `AUn: side=left|right|center; combo=(idx:weight, ...)`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::data(path, i + 1, msg);
            let (au, rest) = line
                .split_once(':')
                .ok_or_else(|| at("expected `AUn: side=...; combo=(...)`".into()))?;
            let au: AuId = au.parse().map_err(|e: Error| at(e.to_string()))?;
            let mut side = None;
            let mut combo = None;
            for field in rest.split(';') {
                let field = field.trim();
                if field.is_empty() {
                    continue;
                }
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| at(format!("expected key=value, got {field:?}")))?;
                match key.trim() {
                    "side" => side = Some(value.parse::<Side>().map_err(|e| at(e.to_string()))?),
                    "combo" => combo = Some(parse_combo(value).map_err(at)?),
                    other => return Err(at(format!("unknown anchor field {other:?}"))),
                }
            }
            let spec = AnchorSpec::new(
                side.ok_or_else(|| at("missing side".into()))?,
                combo.ok_or_else(|| at("missing combo".into()))?,
            )
            .map_err(|e| at(e.to_string()))?;
            table.insert(au, spec);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (au, specs) in &self.anchors {
            for spec in specs {
                let combo: Vec<String> = spec.combo.iter().map(|(i, w)| format!("{i}:{w}")).collect();
                out.push_str(&format!("{au}: side={}; combo=({})\n", spec.side, combo.join(", ")));
            }
        }
        out
    }
}

fn parse_combo(value: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    let inner = value
        .trim()
        .strip_prefix('(')
        .and_then(|v| v.strip_suffix(')'))
        .ok_or_else(|| format!("combo must be parenthesised, got {value:?}"))?;
    inner
        .split(',')
        .map(|pair| {
            let (idx, w) = pair
                .split_once(':')
                .ok_or_else(|| format!("expected idx:weight, got {pair:?}"))?;
            let idx = idx
                .trim()
                .parse()
                .map_err(|_| format!("bad landmark index {idx:?}"))?;
            let w = w.trim().parse().map_err(|_| format!("bad weight {w:?}"))?;
            Ok((idx, w))
        })
        .collect()
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Expression name to the ordered list of AUs that characterise it.
/// Names are stored lower-case and matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuCodebook {
    entries: Vec<(String, Vec<AuId>)>,
}

impl AuCodebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, expression: &str, aus: Vec<AuId>) {
        let key = expression.trim().to_lowercase();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = aus,
            None => self.entries.push((key, aus)),
        }
    }

    pub fn get(&self, expression: &str) -> Option<&[AuId]> {
        let key = expression.trim().to_lowercase();
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn expressions(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Every AU referenced by the codebook must have an anchor, and only
    /// `neutral` may have an empty list.
    pub fn validate(&self, table: &AuAnchorTable) -> Result<()> {
        for (expr, aus) in &self.entries {
            if aus.is_empty() && expr != "neutral" {
                return Err(Error::Config(format!(
                    "codebook entry {expr:?} lists no action units"
                )));
            }
            if let Some(missing) = aus.iter().find(|au| !table.contains(**au)) {
                return Err(Error::Config(format!(
                    "codebook entry {expr:?} uses {missing}, which has no anchor"
                )));
            }
        }
        Ok(())
    }

    /// Parses lines of `expression: AU1,AU2,...`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut book = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (expr, list) = line
                .split_once(':')
                .ok_or_else(|| Error::data(path, i + 1, "expected `expression: AU1,AU2,...`"))?;
            if expr.trim().is_empty() {
                return Err(Error::data(path, i + 1, "empty expression name"));
            }
            let aus = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<AuId>())
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::data(path, i + 1, e.to_string()))?;
            book.insert(expr, aus);
        }
        Ok(book)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (expr, aus) in &self.entries {
            let list: Vec<String> = aus.iter().map(AuId::to_string).collect();
            out.push_str(&format!("{expr}: {}\n", list.join(",")));
        }
        out
    }
}

/// Shipped codebook. The associations are the standard basic-expression AU
/// sets from the FACS literature and can be replaced by any file in the same
/// format.
pub const DEFAULT_CODEBOOK: &str = "\
# expression -> action units
# Replaceable defaults drawn from the FACS literature.
anger: AU4,AU5,AU7,AU23
disgust: AU9,AU15,AU16
fear: AU1,AU2,AU4,AU5,AU7,AU20,AU26
happiness: AU6,AU12
sadness: AU1,AU4,AU15
surprise: AU1,AU2,AU5,AU26
neutral:
";

/// Shipped anchor table, 0-indexed 68-point convention. "left"/"right" are
/// image sides. The right cheek is the midpoint of landmarks 47 and 11; the
/// left cheek mirrors it onto 40 and 5.
pub const DEFAULT_ANCHORS: &str = "\
# AU: side; combination of landmark indices with weights summing to 1
AU1: side=left; combo=(20:0.5, 21:0.5)
AU1: side=right; combo=(22:0.5, 23:0.5)
AU2: side=left; combo=(17:0.5, 18:0.5)
AU2: side=right; combo=(25:0.5, 26:0.5)
AU4: side=left; combo=(21:1)
AU4: side=right; combo=(22:1)
AU5: side=left; combo=(37:0.5, 38:0.5)
AU5: side=right; combo=(43:0.5, 44:0.5)
AU6: side=left; combo=(40:0.5, 5:0.5)
AU6: side=right; combo=(47:0.5, 11:0.5)
AU7: side=left; combo=(40:0.5, 41:0.5)
AU7: side=right; combo=(46:0.5, 47:0.5)
AU9: side=center; combo=(28:0.5, 29:0.5)
AU12: side=left; combo=(48:1)
AU12: side=right; combo=(54:1)
AU15: side=left; combo=(48:1)
AU15: side=right; combo=(54:1)
AU16: side=center; combo=(57:1)
AU20: side=left; combo=(48:1)
AU20: side=right; combo=(54:1)
AU23: side=center; combo=(51:0.5, 57:0.5)
AU26: side=center; combo=(8:1)
AU26: side=center; combo=(57:1)
";

pub fn default_codebook() -> AuCodebook {
    AuCodebook::parse(DEFAULT_CODEBOOK, Path::new("<default codebook>"))
        .expect("default codebook parses")
}

pub fn default_anchor_table() -> AuAnchorTable {
    AuAnchorTable::parse(DEFAULT_ANCHORS, Path::new("<default anchors>"))
        .expect("default anchor table parses")
}
