//! From a minimizer `W` back to coefficients and populations, plus error
//! metrics against known truth.

use serde::{Deserialize, Serialize};

use crate::convexification::WField;
use crate::error::{Error, Result};
use crate::grid::{quadrature_weights, spatial_quadrature_weights, volterra_apply, Grid, ScalarField, SpatialField};
use crate::observation::ObservationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    /// `beta = v1(T/2) r1 + r2`, where the Volterra terms vanish.
    #[default]
    Snapshot,
    /// Average of `(v1 - V w1) r1 + r2` over all time levels.
    TimeAveraged,
}

pub fn recover_coefficients(w: &WField, obs: &ObservationSet, mode: CoefficientMode) -> Result<(SpatialField, SpatialField)> {
    let g = *w.grid();
    if g != obs.grid {
        return Err(Error::ShapeMismatch("W and observations live on different grids".into()));
    }
    let ns = g.n_space();
    let [r1, r2, r3, r4] = [0, 1, 2, 3].map(|m| obs.r[m].values());
    let mut beta = vec![0.0; ns];
    let mut gamma = vec![0.0; ns];
    match mode {
        CoefficientMode::Snapshot => {
            let k0 = g.snapshot_index() * ns;
            let (v1, v3) = (&w.comp(0)[k0..k0 + ns], &w.comp(2)[k0..k0 + ns]);
            for s in 0..ns {
                beta[s] = v1[s] * r1[s] + r2[s];
                gamma[s] = v3[s] * r3[s] + r4[s];
            }
        }
        CoefficientMode::TimeAveraged => {
            let n = g.n_nodes();
            let mut iw1 = vec![0.0; n];
            let mut iw3 = vec![0.0; n];
            volterra_apply(&g, w.comp(3), &mut iw1);
            volterra_apply(&g, w.comp(5), &mut iw3);
            let (v1, v3) = (w.comp(0), w.comp(2));
            let levels = (g.nt() + 1) as f64;
            for idx in 0..n {
                let s = idx % ns;
                beta[s] += ((v1[idx] - iw1[idx]) * r1[s] + r2[s]) / levels;
                gamma[s] += ((v3[idx] - iw3[idx]) * r3[s] + r4[s]) / levels;
            }
        }
    }
    Ok((SpatialField::from_values(&g, beta)?, SpatialField::from_values(&g, gamma)?))
}

/// `rho = int_{T/2}^t v + p` for the three populations.
pub fn recover_populations(w: &WField, obs: &ObservationSet) -> Result<[ScalarField; 3]> {
    let g = *w.grid();
    if g != obs.grid {
        return Err(Error::ShapeMismatch("W and observations live on different grids".into()));
    }
    let ns = g.n_space();
    let mut out = Vec::with_capacity(3);
    for m in 0..3 {
        let mut v = vec![0.0; g.n_nodes()];
        volterra_apply(&g, w.comp(m), &mut v);
        let p = obs.p[m].values();
        for (idx, x) in v.iter_mut().enumerate() {
            *x += p[idx % ns];
        }
        out.push(ScalarField::from_values(&g, v)?);
    }
    Ok(out.try_into().expect("three populations"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionMeta {
    pub lambda: f64,
    pub xi: f64,
    pub sigma: f64,
    pub grid: [usize; 3],
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub beta: SpatialField,
    pub gamma: SpatialField,
    pub rho: [ScalarField; 3],
    pub meta: ReconstructionMeta,
}

/// Known answer on the inversion grid.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub beta: SpatialField,
    pub gamma: SpatialField,
    pub rho: [ScalarField; 3],
    /// Letter masks for the contrast estimates.
    pub beta_mask: Option<Vec<bool>>,
    pub gamma_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    /// Relative trapezoid L2 error.
    pub l2: f64,
    /// `max |recon - truth| / max |truth|`.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub beta: FieldError,
    pub gamma: FieldError,
    pub rho: [FieldError; 3],
    /// Relative L2 errors of the populations on the thin cylinder around `T/2`.
    pub rho_eta: Option<[f64; 3]>,
    /// Mean inside the letter over mean outside, recon and truth.
    pub beta_contrast: Option<(f64, f64)>,
    pub gamma_contrast: Option<(f64, f64)>,
}

impl MetricTable {
    /// One row per field; the population rows carry the thin-cylinder error
    /// and the coefficient rows the contrast pair when available.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(out, "field,l2,max,l2_eta,contrast_recon,contrast_truth")?;
        for (name, e, c) in [("beta", self.beta, self.beta_contrast), ("gamma", self.gamma, self.gamma_contrast)] {
            writeln!(out, "{name},{:e},{:e},,{},{}", e.l2, e.max, opt(c.map(|c| c.0)), opt(c.map(|c| c.1)))?;
        }
        for (m, name) in ["rho_s", "rho_i", "rho_r"].iter().enumerate() {
            let e = self.rho[m];
            writeln!(out, "{name},{:e},{:e},{},,", e.l2, e.max, opt(self.rho_eta.map(|r| r[m])))?;
        }
        Ok(())
    }
}

fn relative_errors(recon: &[f64], truth: &[f64], weights: &[f64], mask: Option<&[bool]>) -> FieldError {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut dmax: f64 = 0.0;
    let mut tmax: f64 = 0.0;
    for n in 0..truth.len() {
        if mask.is_some_and(|m| !m[n]) {
            continue;
        }
        let d = recon[n] - truth[n];
        num += weights[n] * d * d;
        den += weights[n] * truth[n] * truth[n];
        dmax = dmax.max(d.abs());
        tmax = tmax.max(truth[n].abs());
    }
    // fall back to absolute errors against a zero truth
    FieldError {
        l2: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        max: if tmax > 0.0 { dmax / tmax } else { dmax },
    }
}

/// Relative L2(Omega) and max errors of a spatial field.
pub fn spatial_error(recon: &SpatialField, truth: &SpatialField) -> Result<FieldError> {
    if recon.grid() != truth.grid() {
        return Err(Error::ShapeMismatch("fields on different grids".into()));
    }
    let w = spatial_quadrature_weights(truth.grid());
    Ok(relative_errors(recon.values(), truth.values(), w.values(), None))
}

/// Relative L2 error on `Q_T`, or on `Omega x [(1-eta) T/2, (1+eta) T/2]` when `eta` is given.
pub fn space_time_error(recon: &ScalarField, truth: &ScalarField, eta: Option<f64>) -> Result<FieldError> {
    if recon.grid() != truth.grid() {
        return Err(Error::ShapeMismatch("fields on different grids".into()));
    }
    let g = truth.grid();
    let w = quadrature_weights(g);
    let mask: Option<Vec<bool>> = eta.map(|eta| {
        let half = g.t_final() / 2.0;
        let ns = g.n_space();
        (0..g.n_nodes())
            .map(|n| (g.t(n / ns) - half).abs() <= eta * half + 1e-12)
            .collect()
    });
    Ok(relative_errors(recon.values(), truth.values(), w.values(), mask.as_deref()))
}

/// Mean of `f` inside the mask divided by its mean outside.
pub fn contrast(f: &SpatialField, mask: &[bool]) -> Option<f64> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in f.values().iter().zip(mask) {
        if *m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 || so == 0.0 {
        return None;
    }
    Some((si / ni as f64) / (so / no as f64))
}

pub fn error_metrics(recon: &Reconstruction, truth: &GroundTruth, eta: Option<f64>) -> Result<MetricTable> {
    let mut rho = [FieldError { l2: 0.0, max: 0.0 }; 3];
    for m in 0..3 {
        rho[m] = space_time_error(&recon.rho[m], &truth.rho[m], None)?;
    }
    let rho_eta = match eta {
        Some(e) => {
            let mut r = [0.0; 3];
            for m in 0..3 {
                r[m] = space_time_error(&recon.rho[m], &truth.rho[m], Some(e))?.l2;
            }
            Some(r)
        }
        None => None,
    };
    let pair = |r: &SpatialField, t: &SpatialField, m: &Option<Vec<bool>>| {
        m.as_ref().and_then(|m| Some((contrast(r, m)?, contrast(t, m)?)))
    };
    Ok(MetricTable {
        beta: spatial_error(&recon.beta, &truth.beta)?,
        gamma: spatial_error(&recon.gamma, &truth.gamma)?,
        rho,
        rho_eta,
        beta_contrast: pair(&recon.beta, &truth.beta, &truth.beta_mask),
        gamma_contrast: pair(&recon.gamma, &truth.gamma, &truth.gamma_mask),
    })
}

/// Values of a fine-grid spatial field at the nodes of a nested coarse grid.
pub fn restrict_spatial(fine: &SpatialField, coarse: &Grid) -> Result<SpatialField> {
    let (sx, sy, _) = fine.grid().nesting_strides(coarse)?;
    let mut v = Vec::with_capacity(coarse.n_space());
    for j in 0..=coarse.ny() {
        for i in 0..=coarse.nx() {
            v.push(fine.at(j * sy, i * sx));
        }
    }
    SpatialField::from_values(coarse, v)
}

/// Values of a fine-grid space-time field at the nodes of a nested coarse grid.
pub fn restrict_space_time(fine: &ScalarField, coarse: &Grid) -> Result<ScalarField> {
    let (sx, sy, st) = fine.grid().nesting_strides(coarse)?;
    let mut v = Vec::with_capacity(coarse.n_nodes());
    for k in 0..=coarse.nt() {
        for j in 0..=coarse.ny() {
            for i in 0..=coarse.nx() {
                v.push(fine.at(k * st, j * sy, i * sx));
            }
        }
    }
    ScalarField::from_values(coarse, v)
}
