//! Field files and run archives.
//!
//! A field file holds `ncomp` arrays on a tensor grid: the 8-byte magic
//! `SIRFLD01`, four little-endian `u32` extents `(ncomp, Nt+1, Ny+1, Nx+1)`,
//! six little-endian `f64` header values `(a, b, A, T, 0, 0)` and then the
//! data as little-endian `f64` in `(component, k, j, i)` order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, SpatialField};

pub const MAGIC: &[u8; 8] = b"SIRFLD01";
const HEADER_LEN: usize = 8 + 4 * 4 + 6 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    /// `(ncomp, Nt+1, Ny+1, Nx+1)`.
    pub dims: [usize; 4],
    /// `(a, b, A, T)`.
    pub domain: [f64; 4],
    pub data: Vec<f64>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn domain_of(g: &Grid) -> [f64; 4] {
    [g.a(), g.b(), g.half_width(), g.t_final()]
}

impl FieldFile {
    pub fn new(dims: [usize; 4], domain: [f64; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!("{dims:?} needs {n} values, got {}", data.len())));
        }
        if dims.iter().any(|d| u32::try_from(*d).is_err()) {
            return Err(Error::ShapeMismatch(format!("extent in {dims:?} exceeds u32")));
        }
        Ok(Self { dims, domain, data })
    }

    pub fn from_space_time(fields: &[&ScalarField]) -> Result<Self> {
        let g = match fields.first() {
            Some(f) => *f.grid(),
            None => return Err(Error::ShapeMismatch("no components".into())),
        };
        let mut data = Vec::with_capacity(fields.len() * g.n_nodes());
        for f in fields {
            if *f.grid() != g {
                return Err(Error::ShapeMismatch("components live on different grids".into()));
            }
            data.extend_from_slice(f.values());
        }
        Self::new([fields.len(), g.nt() + 1, g.ny() + 1, g.nx() + 1], domain_of(&g), data)
    }

    /// Spatial components are stored with a single time level.
    pub fn from_spatial(fields: &[&SpatialField]) -> Result<Self> {
        let g = match fields.first() {
            Some(f) => *f.grid(),
            None => return Err(Error::ShapeMismatch("no components".into())),
        };
        let mut data = Vec::with_capacity(fields.len() * g.n_space());
        for f in fields {
            if *f.grid() != g {
                return Err(Error::ShapeMismatch("components live on different grids".into()));
            }
            data.extend_from_slice(f.values());
        }
        Self::new([fields.len(), 1, g.ny() + 1, g.nx() + 1], domain_of(&g), data)
    }

    pub fn ncomp(&self) -> usize {
        self.dims[0]
    }

    fn comp_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.comp_len();
        &self.data[c * n..(c + 1) * n]
    }

    fn check_extents(&self, grid: &Grid, nt1: usize) -> Result<()> {
        let want = [nt1, grid.ny() + 1, grid.nx() + 1];
        if self.dims[1..] != want {
            return Err(Error::ShapeMismatch(format!(
                "file extents {:?} do not match grid {:?}",
                &self.dims[1..],
                want
            )));
        }
        Ok(())
    }

    pub fn to_space_time(&self, grid: &Grid) -> Result<Vec<ScalarField>> {
        self.check_extents(grid, grid.nt() + 1)?;
        (0..self.ncomp())
            .map(|c| ScalarField::from_values(grid, self.component(c).to_vec()))
            .collect()
    }

    pub fn to_spatial(&self, grid: &Grid) -> Result<Vec<SpatialField>> {
        self.check_extents(grid, 1)?;
        (0..self.ncomp())
            .map(|c| SpatialField::from_values(grid, self.component(c).to_vec()))
            .collect()
    }

    /// Time of level `k`; a single level is taken to be the snapshot `T/2`.
    pub fn time(&self, k: usize) -> f64 {
        let t = self.domain[3];
        if self.dims[1] <= 1 {
            t / 2.0
        } else {
            t * k as f64 / (self.dims[1] - 1) as f64
        }
    }

    fn coord(&self, axis: usize, n: usize) -> f64 {
        let [a, b, half, _] = self.domain;
        let (lo, hi, len) = match axis {
            2 => (-half, half, self.dims[2]),
            _ => (a, b, self.dims[3]),
        };
        if len <= 1 {
            lo
        } else {
            lo + (hi - lo) * n as f64 / (len - 1) as f64
        }
    }

    /// The level whose time is within half a step of `t`.
    pub fn level_at(&self, t: f64) -> Result<usize> {
        let levels = self.dims[1];
        if levels == 0 {
            return Err(Error::InvalidParameter("field has no time levels".into()));
        }
        let k = (0..levels)
            .min_by(|a, b| (self.time(*a) - t).abs().total_cmp(&(self.time(*b) - t).abs()))
            .expect("non-empty");
        let half = if levels > 1 { self.domain[3] / (levels - 1) as f64 / 2.0 } else { f64::INFINITY };
        if (self.time(k) - t).abs() > half + 1e-12 {
            return Err(Error::InvalidParameter(format!("t = {t} is outside [0, {}]", self.domain[3])));
        }
        Ok(k)
    }

    /// All components at level `k`, as a single-level file.
    pub fn time_slice(&self, k: usize) -> Result<Self> {
        if k >= self.dims[1] {
            return Err(Error::InvalidParameter(format!("level {k} out of range 0..{}", self.dims[1])));
        }
        let plane = self.dims[2] * self.dims[3];
        let mut data = Vec::with_capacity(self.ncomp() * plane);
        for c in 0..self.ncomp() {
            let start = c * self.comp_len() + k * plane;
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        let mut domain = self.domain;
        // a single level reads back as T/2, so rescale T to keep the time
        domain[3] = 2.0 * self.time(k);
        Self::new([self.ncomp(), 1, self.dims[2], self.dims[3]], domain, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.domain.iter().chain(&[0.0, 0.0]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(format_err(path, "missing SIRFLD01 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let dims = [u32_at(8), u32_at(12), u32_at(16), u32_at(20)];
        let domain = [f64_at(24), f64_at(32), f64_at(40), f64_at(48)];
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| format_err(path, "extents overflow"))?;
        if bytes.len() - HEADER_LEN != 8 * n {
            return Err(format_err(
                path,
                format!("extents {dims:?} need {} data bytes, found {}", 8 * n, bytes.len() - HEADER_LEN),
            ));
        }
        let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { dims, domain, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Lossless text form: a `#` header line with the extents and domain,
    /// a column line, then one row per value with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let [nc, nt1, ny1, nx1] = self.dims;
        let [a, b, half, t] = self.domain;
        let mut s = format!(
            "# SIRFLD01 ncomp={nc} nt1={nt1} ny1={ny1} nx1={nx1} a={a:.16e} b={b:.16e} A={half:.16e} T={t:.16e}\n"
        );
        s.push_str("component,k,j,i,x,y,t,value\n");
        let mut n = 0;
        for c in 0..nc {
            for k in 0..nt1 {
                let tk = self.time(k);
                for j in 0..ny1 {
                    let y = self.coord(2, j);
                    for i in 0..nx1 {
                        let x = self.coord(3, i);
                        let _ = writeln!(s, "{c},{k},{j},{i},{x:.16e},{y:.16e},{tk:.16e},{:.16e}", self.data[n]);
                        n += 1;
                    }
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# SIRFLD01"))
            .ok_or_else(|| format_err(path, "missing `# SIRFLD01` header line"))?;
        let mut keys = std::collections::HashMap::new();
        for tok in header.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| format_err(path, format!("bad header token `{tok}`")))?;
            keys.insert(k, v);
        }
        let get = |k: &str| keys.get(k).copied().ok_or_else(|| format_err(path, format!("header lacks `{k}`")));
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| format_err(path, format!("bad `{k}`"))) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| format_err(path, format!("bad `{k}`"))) };
        let dims = [int("ncomp")?, int("nt1")?, int("ny1")?, int("nx1")?];
        let domain = [real("a")?, real("b")?, real("A")?, real("T")?];
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for (line_no, line) in lines.enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let v = line
                .rsplit(',')
                .next()
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| format_err(path, format!("line {}: no value", line_no + 2)))?;
            data.push(v);
        }
        Self::new(dims, domain, data).map_err(|e| format_err(path, e.to_string()))
    }

    /// Legacy VTK structured points, one scalar array per component, with
    /// time as the third axis.
    pub fn to_vtk(&self) -> String {
        let [nc, nt1, ny1, nx1] = self.dims;
        let [a, b, half, t] = self.domain;
        let step = |lo: f64, hi: f64, n: usize| if n > 1 { (hi - lo) / (n - 1) as f64 } else { 1.0 };
        let origin_t = if nt1 == 1 { t / 2.0 } else { 0.0 };
        let mut s = String::from("# vtk DataFile Version 3.0\nsirconvex field\nASCII\nDATASET STRUCTURED_POINTS\n");
        let _ = writeln!(s, "DIMENSIONS {nx1} {ny1} {nt1}");
        let _ = writeln!(s, "ORIGIN {a:.16e} {:.16e} {origin_t:.16e}", -half);
        let _ = writeln!(s, "SPACING {:.16e} {:.16e} {:.16e}", step(a, b, nx1), step(-half, half, ny1), step(0.0, t, nt1));
        let _ = writeln!(s, "POINT_DATA {}", nt1 * ny1 * nx1);
        for c in 0..nc {
            let _ = writeln!(s, "SCALARS component{c} double 1\nLOOKUP_TABLE default");
            for v in self.component(c) {
                let _ = writeln!(s, "{v:.16e}");
            }
        }
        s
    }
}

/// Output directory of one command. Every archive carries the full
/// configuration and a JSON description of its contents.
pub struct Archive {
    dir: PathBuf,
}

impl Archive {
    pub fn create(dir: &Path, cfg: &RunConfig, meta: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        let archive = Self { dir: dir.to_path_buf() };
        archive.write_json("meta.json", meta)?;
        Ok(archive)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.join("config.toml").is_file() {
            return Err(Error::Config(format!("{} is not an archive (no config.toml)", dir.display())));
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.path("config.toml"), &[])
    }

    pub fn write_field(&self, name: &str, f: &FieldFile) -> Result<()> {
        f.write(&self.path(name))
    }

    pub fn read_field(&self, name: &str) -> Result<FieldFile> {
        FieldFile::read(&self.path(name))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        fs::write(self.path(name), text + "\n")?;
        Ok(())
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.path(name);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        Ok(())
    }
}
