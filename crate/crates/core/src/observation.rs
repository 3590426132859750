//! Measurement side of the inverse problem: restriction of forward fields to
//! the observation grid, multiplicative noise, spline differentiation, the
//! coefficient fields `r1..r4` that eliminate `beta` and `gamma`, and the
//! Cauchy vectors `F` (on `x = b`) and `G` (on all sides).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{NeumannData, SirFields};
use crate::grid::{Grid, Side, SpatialField, Velocity};
use crate::spline::NaturalCubicSpline;

/// Default lower bound accepted for `min(|p1|, |p2|)`.
pub const DEFAULT_KAPPA_FLOOR: f64 = 1e-3;

/// Time series on the four sides of the rectangle, one `(k, m)` array per
/// side in [`Side::ALL`] order, `m` running along the side.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    grid: Grid,
    sides: [Vec<f64>; 4],
}

fn side_slot(side: Side) -> usize {
    match side {
        Side::Bottom => 0,
        Side::Top => 1,
        Side::Left => 2,
        Side::Right => 3,
    }
}

impl BoundaryData {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            sides: Side::ALL.map(|s| vec![0.0; (grid.nt() + 1) * s.len(grid)]),
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Side, f64, f64, f64) -> f64) -> Self {
        let sides = Side::ALL.map(|s| {
            let mut v = Vec::with_capacity((grid.nt() + 1) * s.len(grid));
            for k in 0..=grid.nt() {
                for m in 0..s.len(grid) {
                    let (x, y) = s.point(grid, m);
                    v.push(f(s, x, y, grid.t(k)));
                }
            }
            v
        });
        Self { grid: *grid, sides }
    }

    pub fn side(&self, side: Side) -> &[f64] {
        &self.sides[side_slot(side)]
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Vec<f64> {
        &mut self.sides[side_slot(side)]
    }

    #[inline]
    pub fn get(&self, side: Side, k: usize, m: usize) -> f64 {
        self.sides[side_slot(side)][k * side.len(&self.grid) + m]
    }

    pub fn is_zero(&self) -> bool {
        self.sides.iter().all(|s| s.iter().all(|v| *v == 0.0))
    }

    fn map_series(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let nt1 = self.grid.nt() + 1;
        let mut out = Self::zeros(&self.grid);
        for side in Side::ALL {
            let len = side.len(&self.grid);
            let src = self.side(side);
            let dst = out.side_mut(side);
            for m in 0..len {
                let series: Vec<f64> = (0..nt1).map(|k| src[k * len + m]).collect();
                for (k, v) in f(&series)?.into_iter().enumerate() {
                    dst[k * len + m] = v;
                }
            }
        }
        Ok(out)
    }
}

/// Known model coefficients entering the transformed system.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownModel {
    pub c: f64,
    pub q_s: Velocity,
    pub q_i: Velocity,
    pub q_r: Velocity,
}

impl KnownModel {
    pub fn constant_velocity(grid: &Grid, c: f64, q: [(f64, f64); 3]) -> Self {
        Self {
            c,
            q_s: Velocity::constant(grid, q[0].0, q[0].1),
            q_i: Velocity::constant(grid, q[1].0, q[1].1),
            q_r: Velocity::constant(grid, q[2].0, q[2].1),
        }
    }
}

/// Snapshot, Dirichlet traces on `x = b` and Neumann fluxes, before any
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservations {
    pub grid: Grid,
    /// `rho(., T/2)` for S, I, R.
    pub snapshot: [SpatialField; 3],
    /// Traces on `x = b`, `(k, j)` order.
    pub dirichlet: [Vec<f64>; 3],
    pub neumann: [BoundaryData; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Extracts the measured data from forward fields. When `obs_grid` is
/// coarser than the forward grid the values are taken by nodal subsampling.
pub fn sample_observations(
    fields: &SirFields,
    obs_grid: &Grid,
    neumann: &NeumannData,
) -> Result<RawObservations> {
    let fine = *fields.rho_s.grid();
    let (sx, sy, st) = fine.nesting_strides(obs_grid)?;
    let g = obs_grid;
    let kf = g.snapshot_index() * st;
    let snapshot = [&fields.rho_s, &fields.rho_i, &fields.rho_r].map(|f| {
        let mut v = Vec::with_capacity(g.n_space());
        for j in 0..=g.ny() {
            for i in 0..=g.nx() {
                v.push(f.at(kf, j * sy, i * sx));
            }
        }
        SpatialField::from_values(g, v).expect("shape")
    });
    let dirichlet = [&fields.rho_s, &fields.rho_i, &fields.rho_r].map(|f| {
        let mut v = Vec::with_capacity((g.nt() + 1) * (g.ny() + 1));
        for k in 0..=g.nt() {
            for j in 0..=g.ny() {
                v.push(f.at(k * st, j * sy, fine.nx()));
            }
        }
        v
    });
    let neumann = [0, 1, 2].map(|m| BoundaryData::from_fn(g, |side, x, y, t| neumann.eval(side, x, y, t)[m]));
    Ok(RawObservations {
        grid: *g,
        snapshot,
        dirichlet,
        neumann,
    })
}

/// Multiplies the snapshot and the Dirichlet traces by `1 + sigma * zeta`
/// with independent `zeta ~ U[-1, 1]` per node. Fluxes are left clean.
pub fn add_noise(raw: &RawObservations, spec: NoiseSpec) -> Result<RawObservations> {
    if !(spec.sigma >= 0.0) || spec.sigma > 0.2 {
        return Err(Error::InvalidParameter(format!(
            "noise level must lie in [0, 0.2], got {}",
            spec.sigma
        )));
    }
    if spec.sigma == 0.0 {
        return Ok(raw.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = raw.clone();
    for p in out.snapshot.iter_mut() {
        for v in p.values_mut() {
            *v *= 1.0 + spec.sigma * rng.gen_range(-1.0..=1.0);
        }
    }
    for f in out.dirichlet.iter_mut() {
        for v in f.iter_mut() {
            *v *= 1.0 + spec.sigma * rng.gen_range(-1.0..=1.0);
        }
    }
    Ok(out)
}

/// First and second derivatives at the sample nodes of the natural cubic
/// spline through `series` (uniform step `h`). Both come from the same
/// spline.
pub fn spline_time_derivatives(series: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if series.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "spline differentiation needs at least 4 samples, got {}",
            series.len()
        )));
    }
    let s = NaturalCubicSpline::uniform(0.0, h, series)?;
    Ok((s.knot_derivatives(), s.knot_second_derivatives().to_vec()))
}

/// Applies `op` (returning knot derivatives of a spline) along every x-line
/// (`axis_x = true`) or y-line of a spatial array.
fn along_lines(
    grid: &Grid,
    values: &[f64],
    axis_x: bool,
    op: impl Fn(&NaturalCubicSpline) -> Vec<f64>,
) -> Vec<f64> {
    let (nx1, ny1) = (grid.nx() + 1, grid.ny() + 1);
    let mut out = vec![0.0; values.len()];
    if axis_x {
        for j in 0..ny1 {
            let line = &values[j * nx1..(j + 1) * nx1];
            let s = NaturalCubicSpline::uniform(grid.a(), grid.hx(), line).expect("uniform knots");
            out[j * nx1..(j + 1) * nx1].copy_from_slice(&op(&s));
        }
    } else {
        for i in 0..nx1 {
            let line: Vec<f64> = (0..ny1).map(|j| values[j * nx1 + i]).collect();
            let s = NaturalCubicSpline::uniform(-grid.half_width(), grid.hy(), &line).expect("uniform knots");
            for (j, v) in op(&s).into_iter().enumerate() {
                out[j * nx1 + i] = v;
            }
        }
    }
    out
}

/// `s_xx + s_yy` from natural cubic splines along x-lines and y-lines.
pub fn spline_spatial_laplacian(p: &SpatialField) -> SpatialField {
    let g = p.grid();
    let sxx = along_lines(g, p.values(), true, |s| s.knot_second_derivatives().to_vec());
    let syy = along_lines(g, p.values(), false, |s| s.knot_second_derivatives().to_vec());
    let v = sxx.iter().zip(&syy).map(|(a, b)| a + b).collect();
    SpatialField::from_values(g, v).expect("shape")
}

/// `d_x(p q_x) + d_y(p q_y)` with spline first derivatives.
pub fn spline_divergence(p: &SpatialField, q: &Velocity) -> SpatialField {
    let g = p.grid();
    let px: Vec<f64> = p.values().iter().zip(q.qx.values()).map(|(a, b)| a * b).collect();
    let py: Vec<f64> = p.values().iter().zip(q.qy.values()).map(|(a, b)| a * b).collect();
    let dx = along_lines(g, &px, true, |s| s.knot_derivatives());
    let dy = along_lines(g, &py, false, |s| s.knot_derivatives());
    let v = dx.iter().zip(&dy).map(|(a, b)| a + b).collect();
    SpatialField::from_values(g, v).expect("shape")
}

/// The fields `r1..r4` of the coefficient elimination together with the
/// measured `kappa = min(|p1|, |p2|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RCoefficients {
    pub r: [SpatialField; 4],
    pub kappa: f64,
}

/// `r1 = -1/(p1 p2)`, `r2 = -r1 [c lap p1 - div(p1 q_S)]`, `r3 = 1/p2`,
/// `r4 = -r3 [c lap p3 - div(p3 q_R)]`, derivatives from splines.
pub fn build_r_coefficients(
    p: &[SpatialField; 3],
    q_s: &Velocity,
    q_r: &Velocity,
    c: f64,
    kappa_floor: f64,
) -> Result<RCoefficients> {
    let g = p[0].grid();
    let mut kappa = f64::INFINITY;
    let mut worst = (0, 0);
    for j in 0..=g.ny() {
        for i in 0..=g.nx() {
            let v = p[0].at(j, i).abs().min(p[1].at(j, i).abs());
            if v < kappa {
                kappa = v;
                worst = (j, i);
            }
        }
    }
    if !(kappa >= kappa_floor) {
        return Err(Error::KappaViolation {
            i: worst.1,
            j: worst.0,
            value: kappa,
            floor: kappa_floor,
        });
    }
    let lap1 = spline_spatial_laplacian(&p[0]);
    let lap3 = spline_spatial_laplacian(&p[2]);
    let div1 = spline_divergence(&p[0], q_s);
    let div3 = spline_divergence(&p[2], q_r);
    let n = g.n_space();
    let (mut r1, mut r2, mut r3, mut r4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..n {
        let (p1, p2) = (p[0].values()[s], p[1].values()[s]);
        r1[s] = -1.0 / (p1 * p2);
        r2[s] = -r1[s] * (c * lap1.values()[s] - div1.values()[s]);
        r3[s] = 1.0 / p2;
        r4[s] = -r3[s] * (c * lap3.values()[s] - div3.values()[s]);
    }
    let mk = |v| SpatialField::from_values(g, v).expect("shape");
    Ok(RCoefficients {
        r: [mk(r1), mk(r2), mk(r3), mk(r4)],
        kappa,
    })
}

/// Everything the convexification functional consumes.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub grid: Grid,
    pub model: KnownModel,
    pub p: [SpatialField; 3],
    /// Dirichlet traces on `x = b`, `(k, j)` order.
    pub f: [Vec<f64>; 3],
    pub dt_f: [Vec<f64>; 3],
    pub dtt_f: [Vec<f64>; 3],
    pub g: [BoundaryData; 3],
    pub dt_g: [BoundaryData; 3],
    pub dtt_g: [BoundaryData; 3],
    pub r: [SpatialField; 4],
    pub kappa: f64,
    pub sigma: f64,
}

impl ObservationSet {
    /// Component `comp` (0..6) of `F = (f1', f2', f3', f1'', f2'', f3'')` at `(y_j, t_k)`.
    #[inline]
    pub fn dirichlet_vector(&self, comp: usize, k: usize, j: usize) -> f64 {
        let idx = k * (self.grid.ny() + 1) + j;
        if comp < 3 {
            self.dt_f[comp][idx]
        } else {
            self.dtt_f[comp - 3][idx]
        }
    }

    /// Component `comp` (0..6) of `G = (g1', g2', g3', g1'', g2'', g3'')`.
    #[inline]
    pub fn neumann_vector(&self, comp: usize, side: Side, k: usize, m: usize) -> f64 {
        if comp < 3 {
            self.dt_g[comp].get(side, k, m)
        } else {
            self.dtt_g[comp - 3].get(side, k, m)
        }
    }
}

/// Splines, `r`-fields and Cauchy vectors from (possibly noisy) raw data.
pub fn build_cauchy_vectors(
    raw: &RawObservations,
    model: &KnownModel,
    sigma: f64,
    kappa_floor: f64,
) -> Result<ObservationSet> {
    let g = raw.grid;
    let ny1 = g.ny() + 1;
    let nt1 = g.nt() + 1;
    let rc = build_r_coefficients(&raw.snapshot, &model.q_s, &model.q_r, model.c, kappa_floor)?;

    let mut dt_f: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nt1 * ny1]);
    let mut dtt_f: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nt1 * ny1]);
    for m in 0..3 {
        for j in 0..ny1 {
            let series: Vec<f64> = (0..nt1).map(|k| raw.dirichlet[m][k * ny1 + j]).collect();
            let (d1, d2) = spline_time_derivatives(&series, g.ht())?;
            for k in 0..nt1 {
                dt_f[m][k * ny1 + j] = d1[k];
                dtt_f[m][k * ny1 + j] = d2[k];
            }
        }
    }
    let mut dt_g: [BoundaryData; 3] = std::array::from_fn(|_| BoundaryData::zeros(&g));
    let mut dtt_g: [BoundaryData; 3] = std::array::from_fn(|_| BoundaryData::zeros(&g));
    for m in 0..3 {
        if raw.neumann[m].is_zero() {
            continue;
        }
        dt_g[m] = raw.neumann[m].map_series(|s| Ok(spline_time_derivatives(s, g.ht())?.0))?;
        dtt_g[m] = raw.neumann[m].map_series(|s| Ok(spline_time_derivatives(s, g.ht())?.1))?;
    }
    Ok(ObservationSet {
        grid: g,
        model: model.clone(),
        p: raw.snapshot.clone(),
        f: raw.dirichlet.clone(),
        dt_f,
        dtt_f,
        g: raw.neumann.clone(),
        dt_g,
        dtt_g,
        r: rc.r,
        kappa: rc.kappa,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarField;

    fn grid() -> Grid {
        Grid::new(0.1, 1.1, 0.5, 1.0, 20, 20, 10).unwrap()
    }

    fn constant_fields(grid: &Grid, c: f64) -> SirFields {
        let f = ScalarField::from_fn(grid, |_, _, _| c);
        SirFields {
            rho_s: f.clone(),
            rho_i: f.clone(),
            rho_r: f,
        }
    }

    #[test]
    fn constant_fields_give_constant_observations() {
        let g = grid();
        let raw = sample_observations(&constant_fields(&g, 0.4), &g, &NeumannData::Zero).unwrap();
        for m in 0..3 {
            assert!(raw.snapshot[m].values().iter().all(|v| *v == 0.4));
            assert!(raw.dirichlet[m].iter().all(|v| *v == 0.4));
            assert!(raw.neumann[m].is_zero());
        }
    }

    #[test]
    fn restriction_is_nodal_subsampling() {
        let fine = Grid::new(0.1, 1.1, 0.5, 1.0, 40, 40, 20).unwrap();
        let coarse = grid();
        let f = ScalarField::from_fn(&fine, |x, y, t| x + 10.0 * y + 100.0 * t);
        let fields = SirFields {
            rho_s: f.clone(),
            rho_i: f.clone(),
            rho_r: f.clone(),
        };
        let raw = sample_observations(&fields, &coarse, &NeumannData::Zero).unwrap();
        assert_eq!(raw.snapshot[0].at(3, 7), f.at(10, 6, 14));
        assert_eq!(raw.dirichlet[1][4 * 21 + 5], f.at(8, 10, 40));
        let odd = Grid::new(0.1, 1.1, 0.5, 1.0, 15, 20, 10).unwrap();
        assert!(sample_observations(&fields, &odd, &NeumannData::Zero).is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_noise_is_bounded() {
        let g = grid();
        let raw = sample_observations(&constant_fields(&g, 1.0), &g, &NeumannData::Zero).unwrap();
        let same = add_noise(&raw, NoiseSpec { sigma: 0.0, seed: 1 }).unwrap();
        assert_eq!(same, raw);
        let noisy = add_noise(&raw, NoiseSpec { sigma: 0.05, seed: 1 }).unwrap();
        for m in 0..3 {
            for v in noisy.dirichlet[m].iter().chain(noisy.snapshot[m].values()) {
                assert!((0.95..=1.05).contains(v));
            }
        }
        assert_ne!(noisy, raw);
        let again = add_noise(&raw, NoiseSpec { sigma: 0.05, seed: 1 }).unwrap();
        assert_eq!(noisy, again);
        assert!(add_noise(&raw, NoiseSpec { sigma: 0.3, seed: 1 }).is_err());
    }

    #[test]
    fn spline_time_derivatives_examples() {
        let t: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let (d1, d2) = spline_time_derivatives(&t, 0.1).unwrap();
        assert!(d1.iter().all(|v| (v - 1.0).abs() < 1e-13));
        assert!(d2.iter().all(|v| v.abs() < 1e-12));

        let cube: Vec<f64> = t.iter().map(|t| t.powi(3)).collect();
        let (_, d2) = spline_time_derivatives(&cube, 0.1).unwrap();
        let err: Vec<f64> = d2.iter().zip(&t).map(|(s, t)| (s - 6.0 * t).abs()).collect();
        let boundary = err[0].max(err[10]);
        let interior = err[1..10].iter().cloned().fold(0.0, f64::max);
        assert!(interior < boundary, "interior {interior} boundary {boundary}");

        assert!(spline_time_derivatives(&[0.0, 1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn spline_laplacian_examples() {
        let g = grid();
        let c = SpatialField::constant(&g, 0.7);
        assert!(spline_spatial_laplacian(&c).values().iter().all(|v| *v == 0.0));

        // natural end conditions bias a few nodes next to each edge; the
        // bias decays like (2 - sqrt 3)^n, so a wide margin is needed for 1e-10
        let big = Grid::new(0.0, 1.0, 0.5, 1.0, 80, 80, 2).unwrap();
        let q = SpatialField::from_fn(&big, |x, y| x * x + y * y);
        let lap = spline_spatial_laplacian(&q);
        for j in 20..=60 {
            for i in 20..=60 {
                assert!((lap.at(j, i) - 4.0).abs() < 1e-10, "{}", lap.at(j, i));
            }
        }
        let affine = SpatialField::from_fn(&g, |x, y| 1.0 + 2.0 * x - 3.0 * y);
        assert!(spline_spatial_laplacian(&affine).values().iter().all(|v| v.abs() < 1e-11));
        let q = Velocity::constant(&g, 0.2, 0.2);
        for v in spline_divergence(&affine, &q).values() {
            assert!((v - 0.2 * (2.0 - 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn r_coefficient_examples() {
        let g = grid();
        let q = Velocity::constant(&g, 0.0, 0.0);
        let one = SpatialField::constant(&g, 1.0);
        let zero = SpatialField::zeros(&g);
        let rc = build_r_coefficients(&[one.clone(), one.clone(), zero.clone()], &q, &q, 0.1, 1e-3).unwrap();
        for s in 0..g.n_space() {
            assert_eq!(rc.r[0].values()[s], -1.0);
            assert_eq!(rc.r[1].values()[s], 0.0);
            assert_eq!(rc.r[2].values()[s], 1.0);
            assert_eq!(rc.r[3].values()[s], 0.0);
        }
        let two = SpatialField::constant(&g, 2.0);
        let half = SpatialField::constant(&g, 0.5);
        let rc = build_r_coefficients(&[two, half, zero.clone()], &q, &q, 0.1, 1e-3).unwrap();
        assert_eq!(rc.r[0].values()[0], -1.0);
        assert_eq!(rc.r[2].values()[0], 2.0);

        let mut dip = one.clone();
        dip.values_mut()[g.sidx(4, 9)] = 1e-6;
        match build_r_coefficients(&[one, dip, zero], &q, &q, 0.1, 1e-3) {
            Err(Error::KappaViolation { i, j, .. }) => assert_eq!((i, j), (9, 4)),
            other => panic!("expected kappa violation, got {other:?}"),
        }
    }

    #[test]
    fn cauchy_vectors_examples() {
        let g = grid();
        let model = KnownModel::constant_velocity(&g, 5e-5, [(0.2, 0.2); 3]);
        let f = ScalarField::from_fn(&g, |x, y, t| 0.5 + 0.1 * x + 0.05 * y + 0.2 * t);
        let fields = SirFields {
            rho_s: f.clone(),
            rho_i: f.clone(),
            rho_r: f,
        };
        let raw = sample_observations(&fields, &g, &NeumannData::Zero).unwrap();
        let obs = build_cauchy_vectors(&raw, &model, 0.0, 1e-3).unwrap();
        for k in 0..=g.nt() {
            for j in 0..=g.ny() {
                for comp in 0..3 {
                    assert!((obs.dirichlet_vector(comp, k, j) - 0.2).abs() < 1e-12);
                    assert!(obs.dirichlet_vector(comp + 3, k, j).abs() < 1e-12);
                }
            }
        }
        for side in Side::ALL {
            for comp in 0..6 {
                assert_eq!(obs.neumann_vector(comp, side, 3, 2), 0.0);
            }
        }
    }
}
