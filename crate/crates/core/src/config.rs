//! Run configuration (TOML) for the synthetic pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convexification::XiMode;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::masks::{InclusionSpec, Letter, LetterPlacement};
use crate::optimizer::OptimizerConfig;
use crate::recovery::CoefficientMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub a: f64,
    pub b: f64,
    /// `A` in `y in (-A, A)`.
    pub half_width: f64,
    pub t_final: f64,
}

/// `background + amplitude * exp(-width |x - center|^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub center: [f64; 2],
    #[serde(default)]
    pub width: f64,
    #[serde(default)]
    pub background: f64,
}

impl Bump {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.center[0]).powi(2) + (y - self.center[1]).powi(2);
        self.background + self.amplitude * (-self.width * r2).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub s: Bump,
    pub i: Bump,
    pub r: Bump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    pub s: [f64; 2],
    pub i: [f64; 2],
    pub r: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    /// Noise intensity of the underlying random walk; `c = eta^2 / 2`.
    pub eta: f64,
    pub velocity: VelocityConfig,
    pub initial: InitialConfig,
    pub beta: InclusionSpec,
    pub gamma: InclusionSpec,
    #[serde(default = "default_picard")]
    pub picard: usize,
    #[serde(default = "default_solver_tolerance")]
    pub solver_tolerance: f64,
}

fn default_picard() -> usize {
    1
}
fn default_solver_tolerance() -> f64 {
    1e-12
}

impl ForwardConfig {
    pub fn c(&self) -> f64 {
        self.eta * self.eta / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kappa_floor")]
    pub kappa_floor: f64,
}

fn default_kappa_floor() -> f64 {
    crate::observation::DEFAULT_KAPPA_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub lambda: f64,
    pub xi: f64,
    #[serde(default)]
    pub xi_mode: XiMode,
    #[serde(default)]
    pub coefficients: CoefficientMode,
    /// Half-width factor of the thin cylinder used for population metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_eta: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub forward: ForwardConfig,
    pub observation: ObservationConfig,
    pub inversion: InversionConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Shared box for the letter inclusions.
pub const LETTER_BOX: [f64; 4] = [0.3, 0.9, -0.35, 0.35];
pub const LETTER_SMOOTHING: f64 = 0.03;

impl RunConfig {
    fn with_letters(beta: (Letter, f64), gamma: (Letter, f64)) -> Self {
        let letter = |(l, level): (Letter, f64)| InclusionSpec {
            background: 0.1,
            level,
            letter: Some(LetterPlacement {
                letter: l,
                bbox: LETTER_BOX,
                smoothing: LETTER_SMOOTHING,
            }),
        };
        Self {
            domain: DomainConfig {
                a: 0.1,
                b: 1.1,
                half_width: 0.5,
                t_final: 1.0,
            },
            forward: ForwardConfig {
                nx: 80,
                ny: 80,
                nt: 320,
                eta: 0.01,
                velocity: VelocityConfig {
                    s: [0.2, 0.2],
                    i: [0.2, 0.2],
                    r: [0.2, 0.2],
                },
                initial: InitialConfig {
                    s: Bump {
                        amplitude: 0.6,
                        center: [0.6, 0.0],
                        width: 10.0,
                        background: 0.1,
                    },
                    i: Bump {
                        amplitude: 0.6,
                        center: [0.7, 0.1],
                        width: 35.0,
                        background: 0.1,
                    },
                    r: Bump {
                        amplitude: 0.0,
                        center: [0.0, 0.0],
                        width: 0.0,
                        background: 0.0,
                    },
                },
                beta: letter(beta),
                gamma: letter(gamma),
                picard: default_picard(),
                solver_tolerance: default_solver_tolerance(),
            },
            observation: ObservationConfig {
                nx: 20,
                ny: 20,
                nt: 10,
                sigma: 0.0,
                seed: 1,
                kappa_floor: default_kappa_floor(),
            },
            inversion: InversionConfig {
                lambda: 3.0,
                xi: 0.01,
                xi_mode: XiMode::Practice,
                coefficients: CoefficientMode::Snapshot,
                metric_eta: Some(0.01),
                optimizer: OptimizerConfig::default(),
            },
            output: default_output(),
        }
    }

    /// Letter 'A' in the infection rate, capital omega in the recovery rate.
    pub fn test1() -> Self {
        Self::with_letters((Letter::A, 0.6), (Letter::Omega, 0.4))
    }

    /// Letter 'B' in the infection rate, 'D' in the recovery rate.
    pub fn test2() -> Self {
        Self::with_letters((Letter::B, 0.4), (Letter::D, 0.6))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `key.path=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::parse(text);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn fine_grid(&self) -> Result<Grid> {
        let d = &self.domain;
        Grid::new(d.a, d.b, d.half_width, d.t_final, self.forward.nx, self.forward.ny, self.forward.nt)
    }

    pub fn coarse_grid(&self) -> Result<Grid> {
        let d = &self.domain;
        let o = &self.observation;
        Grid::new(d.a, d.b, d.half_width, d.t_final, o.nx, o.ny, o.nt)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let fine = self.fine_grid().map_err(cfg_err)?;
        let coarse = self.coarse_grid().map_err(cfg_err)?;
        fine.nesting_strides(&coarse).map_err(cfg_err)?;
        if !(self.forward.eta > 0.0) {
            return Err(Error::Config("forward.eta must be positive".into()));
        }
        self.forward.beta.validate()?;
        self.forward.gamma.validate()?;
        if !(0.0..=0.2).contains(&self.observation.sigma) {
            return Err(Error::Config("observation.sigma must lie in [0, 0.2]".into()));
        }
        if !(self.inversion.lambda >= 0.0 && self.inversion.xi >= 0.0) {
            return Err(Error::Config("inversion.lambda and inversion.xi must be >= 0".into()));
        }
        self.inversion.optimizer.validate().map_err(cfg_err)?;
        Ok(())
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// taken as a bare string if that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
