//! Numerical probes: the Volterra-Carleman ratio, error against `lambda`, and
//! convexity of `J` along random segments.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::InversionConfig;
use crate::convexification::{cwf_eval, Functional};
use crate::error::{Error, Result};
use crate::grid::{quadrature_weights, volterra_integral, Grid, ScalarField};
use crate::observation::ObservationSet;
use crate::optimizer::{initial_guess, ConstraintSet};
use crate::pipeline::invert;
use crate::recovery::{error_metrics, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolterraRow {
    pub lambda: f64,
    pub rho: f64,
    pub lambda_rho: f64,
}

/// `rho(lambda) = sum (V f)^2 phi / sum f^2 phi` with `V f = int_{T/2}^t f`.
///
/// The balanced weight is used in place of `phi`; the constant factor
/// cancels. A vanishing denominator gives `rho = 0`.
pub fn volterra_probe(f: &ScalarField, lambdas: &[f64]) -> Result<Vec<VolterraRow>> {
    let g = f.grid();
    let vf = volterra_integral(f);
    let quad = quadrature_weights(g);
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("probe needs lambda > 0, got {lambda}")));
        }
        let (_, weight) = cwf_eval(lambda, g)?;
        let (mut num, mut den) = (0.0, 0.0);
        for ((q, w), (a, b)) in quad.values().iter().zip(weight.values()).zip(vf.values().iter().zip(f.values())) {
            num += q * w * a * a;
            den += q * w * b * b;
        }
        let rho = if den < 1e-300 { 0.0 } else { num / den };
        rows.push(VolterraRow {
            lambda,
            rho,
            lambda_rho: lambda * rho,
        });
    }
    Ok(rows)
}

/// A few random space-time Fourier modes plus a random offset.
pub fn random_smooth_field(grid: &Grid, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<[f64; 7]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let offset = rng.gen_range(-0.5..0.5);
    ScalarField::from_fn(grid, |x, y, t| {
        offset
            + modes
                .iter()
                .map(|m| m[0] * (m[1] * x + m[2]).sin() * (m[3] * y + m[4]).sin() * (m[5] * t + m[6]).sin())
                .sum::<f64>()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub beta_l2: f64,
    pub beta_max: f64,
    pub gamma_l2: f64,
    pub gamma_max: f64,
    pub j: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Failure message if the inversion at this `lambda` errored.
    pub outcome: std::result::Result<SweepMetrics, String>,
}

/// Inverts `obs` once per `lambda` and scores against `truth`. Failures are
/// recorded in the row and do not stop the sweep.
pub fn lambda_sweep(obs: &ObservationSet, truth: &GroundTruth, inv: &InversionConfig, lambdas: &[f64]) -> Vec<SweepRow> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = inv.clone();
            cfg.lambda = lambda;
            let outcome = invert(&cfg, obs)
                .and_then(|run| {
                    let m = error_metrics(&run.reconstruction, truth, cfg.metric_eta)?;
                    let last = run.minimized.trace.last();
                    Ok(SweepMetrics {
                        beta_l2: m.beta.l2,
                        beta_max: m.beta.max,
                        gamma_l2: m.gamma.l2,
                        gamma_max: m.gamma.max,
                        j: last.j,
                        grad_norm: last.grad_norm,
                        iterations: last.iter,
                        converged: run.minimized.trace.converged(),
                    })
                })
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("lambda = {lambda}: {e}");
            }
            SweepRow { lambda, outcome }
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "lambda,beta_l2,beta_max,gamma_l2,gamma_max,J,grad_norm,iterations,converged,error")?;
    for r in rows {
        match &r.outcome {
            Ok(m) => writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},",
                r.lambda, m.beta_l2, m.beta_max, m.gamma_l2, m.gamma_max, m.j, m.grad_norm, m.iterations, m.converged
            )?,
            Err(e) => writeln!(out, "{},,,,,,,,,\"{}\"", r.lambda, e.replace('"', "'"))?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConfig {
    pub trials: usize,
    /// Samples per segment, at least 9.
    pub points: usize,
    /// Half-width of the uniform perturbation of the free values around the starting point.
    pub radius: f64,
    pub seed: u64,
    /// Second differences below `-tolerance` count as violations.
    pub tolerance: f64,
}

impl Default for ConvexityConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            points: 9,
            radius: 0.1,
            seed: 0,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityTrial {
    pub trial: usize,
    pub min_second_difference: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub trials: Vec<ConvexityTrial>,
    pub violations: usize,
}

impl ConvexityReport {
    pub fn violation_rate(&self) -> f64 {
        self.violations as f64 / self.trials.len().max(1) as f64
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "trial,min_second_difference,violated")?;
        for t in &self.trials {
            writeln!(out, "{},{:e},{}", t.trial, t.min_second_difference, t.violated)?;
        }
        Ok(())
    }
}

/// Samples `J` along segments between random admissible pairs near the
/// initial guess and reports the smallest second difference of each.
pub fn convexity_probe(
    functional: &Functional<'_>,
    constraints: &ConstraintSet,
    cfg: &ConvexityConfig,
) -> Result<ConvexityReport> {
    if cfg.trials == 0 || cfg.points < 9 {
        return Err(Error::InvalidParameter("convexity probe needs trials >= 1 and points >= 9".into()));
    }
    let z0 = constraints.eliminate(&initial_guess(constraints));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut endpoint = || -> Vec<f64> { z0.iter().map(|v| v + cfg.radius * rng.gen_range(-1.0..1.0)).collect() };
        let (z1, z2) = (endpoint(), endpoint());
        let mut values = Vec::with_capacity(cfg.points);
        for n in 0..cfg.points {
            let s = n as f64 / (cfg.points - 1) as f64;
            let z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + s * (b - a)).collect();
            values.push(functional.value(&constraints.expand(&z)?)?.total);
        }
        let min = values
            .windows(3)
            .map(|w| w[0] - 2.0 * w[1] + w[2])
            .fold(f64::INFINITY, f64::min);
        trials.push(ConvexityTrial {
            trial,
            min_second_difference: min,
            violated: min < -cfg.tolerance,
        });
    }
    let violations = trials.iter().filter(|t| t.violated).count();
    Ok(ConvexityReport { trials, violations })
}
