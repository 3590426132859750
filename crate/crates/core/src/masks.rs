//! Letter-shaped inclusions for synthetic coefficients.
//!
//! Glyphs are plain PBM (P1) bitmaps shipped under `masks/`. A glyph is
//! stretched over a rectangle of the domain; the resulting indicator can be
//! mollified by convolving it with a Gaussian of standard deviation
//! `smoothing`, which keeps the coefficient continuous while retaining the
//! letter's shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpatialField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    D,
    Omega,
}

impl Letter {
    fn source(self) -> &'static str {
        match self {
            Letter::A => include_str!("../masks/A.pbm"),
            Letter::B => include_str!("../masks/B.pbm"),
            Letter::D => include_str!("../masks/D.pbm"),
            Letter::Omega => include_str!("../masks/Omega.pbm"),
        }
    }

    pub fn glyph(self) -> Glyph {
        Glyph::parse_pbm(self.source()).expect("shipped glyphs are well-formed")
    }
}

/// Binary bitmap, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl Glyph {
    /// Parses ASCII PBM (`P1`); `#` starts a comment that runs to the end of the line.
    pub fn parse_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let bad = |why: &str| Error::Config(format!("malformed PBM glyph: {why}"));
        if tokens.next() != Some("P1") {
            return Err(bad("missing P1 magic"));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("missing dimensions"))
        };
        let width = dim()?;
        let height = dim()?;
        if width == 0 || height == 0 {
            return Err(bad("empty bitmap"));
        }
        // pixels may also be packed without separators
        let pixels: Vec<bool> = tokens.flat_map(str::chars).map(|c| c == '1').collect();
        if pixels.len() != width * height {
            return Err(bad(&format!("expected {} pixels, found {}", width * height, pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixel(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col]
    }
}

/// A glyph placed on `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterPlacement {
    pub letter: Letter,
    /// `[x0, x1, y0, y1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Gaussian mollification length; 0 keeps sharp edges.
    #[serde(default)]
    pub smoothing: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of `N(p, s^2)` that falls in `[lo, hi]`.
fn interval_mass(p: f64, lo: f64, hi: f64, s: f64) -> f64 {
    normal_cdf((hi - p) / s) - normal_cdf((lo - p) / s)
}

impl LetterPlacement {
    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.bbox;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Config(format!("letter box {:?} is empty", self.bbox)));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Config(format!("smoothing must be >= 0, got {}", self.smoothing)));
        }
        Ok(())
    }

    /// Mollified indicator of the letter at `(x, y)`, in `[0, 1]`.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        if self.smoothing == 0.0 {
            return if self.contains(x, y) { 1.0 } else { 0.0 };
        }
        let glyph = self.letter.glyph();
        let [x0, x1, y0, y1] = self.bbox;
        let pw = (x1 - x0) / glyph.width as f64;
        let ph = (y1 - y0) / glyph.height as f64;
        let s = self.smoothing;
        let cols: Vec<f64> = (0..glyph.width)
            .map(|c| interval_mass(x, x0 + c as f64 * pw, x0 + (c + 1) as f64 * pw, s))
            .collect();
        let mut acc = 0.0;
        for row in 0..glyph.height {
            let top = y1 - row as f64 * ph;
            let my = interval_mass(y, top - ph, top, s);
            if my == 0.0 {
                continue;
            }
            for (col, mx) in cols.iter().enumerate() {
                if glyph.pixel(row, col) {
                    acc += my * mx;
                }
            }
        }
        acc.clamp(0.0, 1.0)
    }

    /// Sharp pixel indicator (used for contrast metrics).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let glyph = self.letter.glyph();
        let [x0, x1, y0, y1] = self.bbox;
        if x < x0 || x >= x1 || y <= y0 || y > y1 {
            return false;
        }
        let col = (((x - x0) / (x1 - x0)) * glyph.width as f64) as usize;
        let row = (((y1 - y) / (y1 - y0)) * glyph.height as f64) as usize;
        glyph.pixel(row.min(glyph.height - 1), col.min(glyph.width - 1))
    }

    pub fn mask(&self, grid: &Grid) -> Vec<bool> {
        let mut out = Vec::with_capacity(grid.n_space());
        for j in 0..=grid.ny() {
            for i in 0..=grid.nx() {
                out.push(self.contains(grid.x(i), grid.y(j)));
            }
        }
        out
    }
}

/// `background` outside the inclusion and `level` inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionSpec {
    pub background: f64,
    #[serde(default)]
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letter: Option<LetterPlacement>,
}

impl InclusionSpec {
    pub fn constant(value: f64) -> Self {
        Self {
            background: value,
            level: value,
            letter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.background >= 0.0 && self.level >= 0.0) {
            return Err(Error::Config("coefficient levels must be non-negative".into()));
        }
        if let Some(l) = &self.letter {
            l.validate()?;
        }
        Ok(())
    }

    pub fn field(&self, grid: &Grid) -> SpatialField {
        match &self.letter {
            None => SpatialField::constant(grid, self.background),
            Some(l) => SpatialField::from_fn(grid, |x, y| {
                self.background + (self.level - self.background) * l.coverage(x, y)
            }),
        }
    }

    pub fn mask(&self, grid: &Grid) -> Option<Vec<bool>> {
        self.letter.as_ref().map(|l| l.mask(grid))
    }
}
