//! Carleman-weighted Tikhonov functional for the transformed SIR system.
//!
//! The unknown is `W = (v1, v2, v3, w1, w2, w3)` where `v = d_t rho` and
//! `w = d_t^2 rho`. With `V` the Volterra integral from `T/2`,
//!
//! ```text
//! rho_S = V v1 + p1,   rho_I = V v2 + p2
//! B     = (v1 - V w1) r1 + r2          (infection rate in terms of W)
//! G     = (v3 - V w3) r3 + r4          (recovery rate in terms of W)
//! X     = v1 rho_I + rho_S v2
//! Y     = w1 rho_I + 2 v1 v2 + rho_S w2
//!
//! P1 = -div(v1 q_S) - B X      P4 = -div(w1 q_S) - B Y
//! P2 = -div(v2 q_I) + B X      P5 = -div(w2 q_I) + B Y
//! P3 = -div(v3 q_R) + G v2     P6 = -div(w3 q_R) + G w2
//!
//! L(W) = W_t - c lap W - P(W)
//! J(W) = e^{-2 lambda b^2} sum_n omega_n phi_lambda |L(W)|^2 + xi ||W||^2
//! ```
//!
//! `||W||` is a discrete norm with values, first differences in x, y, t and
//! second differences in space (including the mixed one), all weighted by
//! the trapezoid rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    divergence_accumulate, laplacian_accumulate, quadrature_weights, stencil_accumulate,
    volterra_apply, volterra_transpose_accumulate, Deriv, Grid, ScalarField, AXIS_T, AXIS_X,
    AXIS_Y,
};
use crate::observation::ObservationSet;

pub const N_COMPONENTS: usize = 6;

/// `lambda * b^2` above this is rejected since `exp(2 lambda b^2)` would overflow.
pub const MAX_LAMBDA_B2: f64 = 300.0;

/// The six-component unknown, stored component-major then `(k, j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WField {
    grid: Grid,
    values: Vec<f64>,
}

impl WField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            values: vec![0.0; N_COMPONENTS * grid.n_nodes()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != N_COMPONENTS * grid.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "W needs {} values, got {}",
                N_COMPONENTS * grid.n_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn from_components(components: [ScalarField; 6]) -> Result<Self> {
        let grid = *components[0].grid();
        let mut values = Vec::with_capacity(N_COMPONENTS * grid.n_nodes());
        for c in components {
            if c.grid() != &grid {
                return Err(Error::ShapeMismatch("W components on different grids".into()));
            }
            values.extend_from_slice(c.values());
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn comp(&self, m: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[m * n..(m + 1) * n]
    }
    pub fn comp_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.grid.n_nodes();
        &mut self.values[m * n..(m + 1) * n]
    }
    pub fn component(&self, m: usize) -> ScalarField {
        ScalarField::from_values(&self.grid, self.comp(m).to_vec()).expect("shape")
    }

    #[inline]
    pub fn at(&self, m: usize, k: usize, j: usize, i: usize) -> f64 {
        self.values[m * self.grid.n_nodes() + self.grid.idx(k, j, i)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the raw node values.
    pub fn l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum XiMode {
    /// Any `xi >= 0`.
    #[default]
    Practice,
    /// `xi / 2` must lie in `[exp(-lambda T^2 / 4), 1/2)`.
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub lambda: f64,
    pub xi: f64,
    /// Right end `b` of the x-interval; enters the balancing factor.
    pub b: f64,
    pub c: f64,
    pub mode: XiMode,
}

impl CarlemanParams {
    pub fn practice(lambda: f64, xi: f64, grid: &Grid, c: f64) -> Self {
        Self {
            lambda,
            xi,
            b: grid.b(),
            c,
            mode: XiMode::Practice,
        }
    }

    /// Smallest admissible `xi = 2 exp(-lambda T^2 / 4)` of the theory regime.
    pub fn theory(lambda: f64, grid: &Grid, c: f64) -> Self {
        Self {
            lambda,
            xi: 2.0 * (-lambda * grid.t_final().powi(2) / 4.0).exp(),
            b: grid.b(),
            c,
            mode: XiMode::Theory,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.xi >= 0.0) {
            return Err(Error::InvalidParameter(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.lambda * self.b * self.b > MAX_LAMBDA_B2 {
            return Err(Error::WeightOverflow(self.lambda * self.b * self.b));
        }
        if self.mode == XiMode::Theory {
            let lo = (-self.lambda * grid.t_final().powi(2) / 4.0).exp();
            let half = self.xi / 2.0;
            // relative slack so the value produced by `theory` is accepted
            if half < lo * (1.0 - 1e-12) || half >= 0.5 {
                return Err(Error::InvalidParameter(format!(
                    "theory mode needs xi/2 in [{lo:e}, 0.5), got {half:e}"
                )));
            }
        }
        Ok(())
    }
}

/// Carleman weight `phi = exp(2 lambda (x^2 - (t - T/2)^2))` and the balanced
/// weight `exp(-2 lambda b^2) phi`, which is at most 1 and equals 1 on
/// `{x = b, t = T/2}`.
pub fn cwf_eval(lambda: f64, grid: &Grid) -> Result<(ScalarField, ScalarField)> {
    let b = grid.b();
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda * b * b > MAX_LAMBDA_B2 {
        return Err(Error::WeightOverflow(lambda * b * b));
    }
    let half = grid.t_final() / 2.0;
    let phi = ScalarField::from_fn(grid, |x, _, t| (2.0 * lambda * (x * x - (t - half).powi(2))).exp());
    // exponent combined before exp so that the maximum is exactly 1
    let balanced = ScalarField::from_fn(grid, |x, _, t| {
        (2.0 * lambda * (x * x - b * b - (t - half).powi(2))).exp()
    });
    Ok((phi, balanced))
}

fn check_grids(w: &WField, obs: &ObservationSet) -> Result<()> {
    if w.grid() != &obs.grid {
        return Err(Error::ShapeMismatch("W and observations live on different grids".into()));
    }
    Ok(())
}

/// Pointwise quantities shared by the residual and its adjoint.
struct Forward {
    rho_s: Vec<f64>,
    rho_i: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    /// `P` components.
    p: [Vec<f64>; 6],
    /// `L(W)` components.
    l: [Vec<f64>; 6],
}

fn velocity_of(obs: &ObservationSet, m: usize) -> (&[f64], &[f64]) {
    let q = match m % 3 {
        0 => &obs.model.q_s,
        1 => &obs.model.q_i,
        _ => &obs.model.q_r,
    };
    (q.qx.values(), q.qy.values())
}

fn evaluate(w: &WField, obs: &ObservationSet) -> Forward {
    let g = w.grid();
    let n = g.n_nodes();
    let ns = g.n_space();
    let shape = g.shape();
    let c = obs.model.c;
    let (v1, v2, v3, w1, w2, w3) = (w.comp(0), w.comp(1), w.comp(2), w.comp(3), w.comp(4), w.comp(5));

    let mut int_v1 = vec![0.0; n];
    let mut int_v2 = vec![0.0; n];
    let mut int_w1 = vec![0.0; n];
    let mut int_w3 = vec![0.0; n];
    volterra_apply(g, v1, &mut int_v1);
    volterra_apply(g, v2, &mut int_v2);
    volterra_apply(g, w1, &mut int_w1);
    volterra_apply(g, w3, &mut int_w3);

    let (p1, p2) = (obs.p[0].values(), obs.p[1].values());
    let [r1, r2, r3, r4] = [0, 1, 2, 3].map(|m| obs.r[m].values());

    let mut rho_s = vec![0.0; n];
    let mut rho_i = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut gamma = vec![0.0; n];
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    for idx in 0..n {
        let s = idx % ns;
        rho_s[idx] = int_v1[idx] + p1[s];
        rho_i[idx] = int_v2[idx] + p2[s];
        beta[idx] = (v1[idx] - int_w1[idx]) * r1[s] + r2[s];
        gamma[idx] = (v3[idx] - int_w3[idx]) * r3[s] + r4[s];
        xs[idx] = v1[idx] * rho_i[idx] + rho_s[idx] * v2[idx];
        ys[idx] = w1[idx] * rho_i[idx] + 2.0 * v1[idx] * v2[idx] + rho_s[idx] * w2[idx];
    }

    let mut p: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    let mut l: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for m in 0..N_COMPONENTS {
        let (qx, qy) = velocity_of(obs, m);
        let mut div = vec![0.0; n];
        divergence_accumulate(g, w.comp(m), qx, qy, &mut div, shape, 1.0, false);
        for idx in 0..n {
            let reaction = match m {
                0 => -beta[idx] * xs[idx],
                1 => beta[idx] * xs[idx],
                2 => gamma[idx] * v2[idx],
                3 => -beta[idx] * ys[idx],
                4 => beta[idx] * ys[idx],
                _ => gamma[idx] * w2[idx],
            };
            p[m][idx] = -div[idx] + reaction;
        }
        let lm = &mut l[m];
        stencil_accumulate(w.comp(m), lm, shape, AXIS_T, Deriv::First, g.ht(), 1.0, false);
        laplacian_accumulate(g, w.comp(m), lm, shape, -c, false);
        for idx in 0..n {
            lm[idx] -= p[m][idx];
        }
    }
    Forward {
        rho_s,
        rho_i,
        beta,
        gamma,
        x: xs,
        y: ys,
        p,
        l,
    }
}

/// The nonlinear part `P(W)` of the transformed system.
pub fn assemble_p(w: &WField, obs: &ObservationSet) -> Result<[ScalarField; 6]> {
    check_grids(w, obs)?;
    let f = evaluate(w, obs);
    let g = *w.grid();
    Ok(f.p.map(|v| ScalarField::from_values(&g, v).expect("shape")))
}

/// `L(W) = W_t - c lap W - P(W)` at every node.
pub fn residual(w: &WField, obs: &ObservationSet) -> Result<[ScalarField; 6]> {
    check_grids(w, obs)?;
    let f = evaluate(w, obs);
    let g = *w.grid();
    Ok(f.l.map(|v| ScalarField::from_values(&g, v).expect("shape")))
}

/// Trapezoid `L2(Q_T)` norm of `L(W)` over the nodes selected by `mask`
/// (all nodes when `None`).
pub fn residual_norm(w: &WField, obs: &ObservationSet, mask: Option<&dyn Fn(usize, usize, usize) -> bool>) -> Result<f64> {
    check_grids(w, obs)?;
    let g = *w.grid();
    let f = evaluate(w, obs);
    let q = quadrature_weights(&g);
    let mut acc = 0.0;
    for k in 0..=g.nt() {
        for j in 0..=g.ny() {
            for i in 0..=g.nx() {
                if mask.map_or(true, |m| m(k, j, i)) {
                    let idx = g.idx(k, j, i);
                    let sq: f64 = f.l.iter().map(|l| l[idx] * l[idx]).sum();
                    acc += q.values()[idx] * sq;
                }
            }
        }
    }
    Ok(acc.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JValue {
    pub total: f64,
    /// Weighted residual term, balancing factor included.
    pub fidelity: f64,
    /// `xi * ||W||^2`.
    pub regularization: f64,
    /// `||W||^2` itself.
    pub norm_sq: f64,
}

/// The discrete functional bound to one observation set.
pub struct Functional<'a> {
    obs: &'a ObservationSet,
    params: CarlemanParams,
    /// Trapezoid weight times balanced Carleman weight.
    fidelity_weight: Vec<f64>,
    quad: Vec<f64>,
    fidelity_scale: f64,
}

impl<'a> Functional<'a> {
    pub fn new(obs: &'a ObservationSet, params: CarlemanParams) -> Result<Self> {
        params.validate(&obs.grid)?;
        let g = obs.grid;
        let (_, balanced) = cwf_eval(params.lambda, &g)?;
        let quad = quadrature_weights(&g).into_values();
        let fidelity_weight = quad.iter().zip(balanced.values()).map(|(a, b)| a * b).collect();
        Ok(Self {
            obs,
            params,
            fidelity_weight,
            quad,
            fidelity_scale: 1.0,
        })
    }

    /// Multiplies the residual term (0 leaves only the regularization).
    pub fn with_fidelity_scale(mut self, scale: f64) -> Self {
        self.fidelity_scale = scale;
        self
    }

    pub fn params(&self) -> &CarlemanParams {
        &self.params
    }

    pub fn observations(&self) -> &ObservationSet {
        self.obs
    }

    pub fn grid(&self) -> &Grid {
        &self.obs.grid
    }

    pub fn value(&self, w: &WField) -> Result<JValue> {
        check_grids(w, self.obs)?;
        let f = evaluate(w, self.obs);
        Ok(self.combine(self.fidelity_sum(&f), self.norm_sq(w)))
    }

    pub fn value_and_gradient(&self, w: &WField) -> Result<(JValue, WField)> {
        check_grids(w, self.obs)?;
        let f = evaluate(w, self.obs);
        let value = self.combine(self.fidelity_sum(&f), self.norm_sq(w));
        let mut grad = WField::zeros(w.grid());
        if self.fidelity_scale != 0.0 {
            self.fidelity_gradient(w, &f, &mut grad);
        }
        if self.params.xi != 0.0 {
            self.norm_gradient(w, &mut grad);
        }
        Ok((value, grad))
    }

    fn combine(&self, fidelity: f64, norm_sq: f64) -> JValue {
        let fidelity = self.fidelity_scale * fidelity;
        let regularization = self.params.xi * norm_sq;
        JValue {
            total: fidelity + regularization,
            fidelity,
            regularization,
            norm_sq,
        }
    }

    fn fidelity_sum(&self, f: &Forward) -> f64 {
        let mut acc = 0.0;
        for (idx, w) in self.fidelity_weight.iter().enumerate() {
            let sq: f64 = f.l.iter().map(|l| l[idx] * l[idx]).sum();
            acc += w * sq;
        }
        acc
    }

    /// Discrete `||W||^2`.
    pub fn norm_sq(&self, w: &WField) -> f64 {
        let g = w.grid();
        let n = g.n_nodes();
        let mut acc = 0.0;
        let mut buf = vec![0.0; n];
        for m in 0..N_COMPONENTS {
            let u = w.comp(m);
            acc += weighted_sq(&self.quad, u);
            for op in norm_operators(g) {
                buf.iter_mut().for_each(|v| *v = 0.0);
                op.apply(g, u, &mut buf, 1.0, false);
                acc += weighted_sq(&self.quad, &buf);
            }
        }
        acc
    }

    fn norm_gradient(&self, w: &WField, grad: &mut WField) {
        let g = *w.grid();
        let n = g.n_nodes();
        let xi2 = 2.0 * self.params.xi;
        let mut buf = vec![0.0; n];
        for m in 0..N_COMPONENTS {
            let u = w.comp(m).to_vec();
            let out = grad.comp_mut(m);
            for idx in 0..n {
                out[idx] += xi2 * self.quad[idx] * u[idx];
            }
            for op in norm_operators(&g) {
                buf.iter_mut().for_each(|v| *v = 0.0);
                op.apply(&g, &u, &mut buf, 1.0, false);
                for idx in 0..n {
                    buf[idx] *= xi2 * self.quad[idx];
                }
                op.apply(&g, &buf, out, 1.0, true);
            }
        }
    }

    fn fidelity_gradient(&self, w: &WField, f: &Forward, grad: &mut WField) {
        let g = *w.grid();
        let n = g.n_nodes();
        let ns = g.n_space();
        let shape = g.shape();
        let c = self.obs.model.c;
        let scale = 2.0 * self.fidelity_scale;

        // seeds dJ/dL
        let a: [Vec<f64>; 6] = std::array::from_fn(|m| {
            f.l[m]
                .iter()
                .zip(&self.fidelity_weight)
                .map(|(l, w)| scale * w * l)
                .collect()
        });

        // linear part: L_m contains d_t W_m - c lap W_m + div(W_m q_m)
        for m in 0..N_COMPONENTS {
            let (qx, qy) = velocity_of(self.obs, m);
            let out = grad.comp_mut(m);
            stencil_accumulate(&a[m], out, shape, AXIS_T, Deriv::First, g.ht(), 1.0, true);
            laplacian_accumulate(&g, &a[m], out, shape, -c, true);
            divergence_accumulate(&g, &a[m], qx, qy, out, shape, 1.0, true);
        }

        // reaction part: L1 += B X, L2 -= B X, L3 -= G v2, L4 += B Y, L5 -= B Y, L6 -= G w2
        let (v1, v2, w1, w2) = (w.comp(0), w.comp(1), w.comp(3), w.comp(4));
        let [r1, _, r3, _] = [0, 1, 2, 3].map(|m| self.obs.r[m].values());
        let mut bar: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
        let mut rho_s_bar = vec![0.0; n];
        let mut rho_i_bar = vec![0.0; n];
        let mut int_w1_bar = vec![0.0; n];
        let mut int_w3_bar = vec![0.0; n];
        for idx in 0..n {
            let s = idx % ns;
            let ax = a[0][idx] - a[1][idx];
            let ay = a[3][idx] - a[4][idx];
            let b_bar = ax * f.x[idx] + ay * f.y[idx];
            let x_bar = ax * f.beta[idx];
            let y_bar = ay * f.beta[idx];
            let g_bar = -a[2][idx] * v2[idx] - a[5][idx] * w2[idx];
            bar[1][idx] -= a[2][idx] * f.gamma[idx];
            bar[4][idx] -= a[5][idx] * f.gamma[idx];

            let (rs, ri) = (f.rho_s[idx], f.rho_i[idx]);
            // X = v1 rho_I + rho_S v2
            bar[0][idx] += x_bar * ri;
            bar[1][idx] += x_bar * rs;
            rho_i_bar[idx] += x_bar * v1[idx];
            rho_s_bar[idx] += x_bar * v2[idx];
            // Y = w1 rho_I + 2 v1 v2 + rho_S w2
            bar[3][idx] += y_bar * ri;
            bar[0][idx] += 2.0 * y_bar * v2[idx];
            bar[1][idx] += 2.0 * y_bar * v1[idx];
            bar[4][idx] += y_bar * rs;
            rho_i_bar[idx] += y_bar * w1[idx];
            rho_s_bar[idx] += y_bar * w2[idx];
            // B = (v1 - V w1) r1 + r2, G = (v3 - V w3) r3 + r4
            bar[0][idx] += b_bar * r1[s];
            int_w1_bar[idx] = -b_bar * r1[s];
            bar[2][idx] += g_bar * r3[s];
            int_w3_bar[idx] = -g_bar * r3[s];
        }
        volterra_transpose_accumulate(&g, &rho_s_bar, &mut bar[0]);
        volterra_transpose_accumulate(&g, &rho_i_bar, &mut bar[1]);
        volterra_transpose_accumulate(&g, &int_w1_bar, &mut bar[3]);
        volterra_transpose_accumulate(&g, &int_w3_bar, &mut bar[5]);
        for (m, b) in bar.iter().enumerate() {
            for (o, v) in grad.comp_mut(m).iter_mut().zip(b) {
                *o += v;
            }
        }
    }
}

fn weighted_sq(w: &[f64], u: &[f64]) -> f64 {
    w.iter().zip(u).map(|(a, b)| a * b * b).sum()
}

/// Difference operators entering the regularization norm.
#[derive(Debug, Clone, Copy)]
enum NormOp {
    Single(usize, Deriv),
    Mixed,
}

fn norm_operators(_g: &Grid) -> [NormOp; 6] {
    [
        NormOp::Single(AXIS_X, Deriv::First),
        NormOp::Single(AXIS_Y, Deriv::First),
        NormOp::Single(AXIS_T, Deriv::First),
        NormOp::Single(AXIS_X, Deriv::Second),
        NormOp::Single(AXIS_Y, Deriv::Second),
        NormOp::Mixed,
    ]
}

impl NormOp {
    fn apply(self, g: &Grid, u: &[f64], out: &mut [f64], scale: f64, transpose: bool) {
        let shape = g.shape();
        let h = |axis| match axis {
            AXIS_X => g.hx(),
            AXIS_Y => g.hy(),
            _ => g.ht(),
        };
        match self {
            NormOp::Single(axis, d) => stencil_accumulate(u, out, shape, axis, d, h(axis), scale, transpose),
            NormOp::Mixed => {
                let mut tmp = vec![0.0; u.len()];
                // D_xy = D_x D_y; transpose is D_y^T D_x^T
                let (first, second) = if transpose { (AXIS_X, AXIS_Y) } else { (AXIS_Y, AXIS_X) };
                stencil_accumulate(u, &mut tmp, shape, first, Deriv::First, h(first), 1.0, transpose);
                stencil_accumulate(&tmp, out, shape, second, Deriv::First, h(second), scale, transpose);
            }
        }
    }
}

/// `J(W)` with its fidelity / regularization breakdown.
pub fn functional_j(w: &WField, params: &CarlemanParams, obs: &ObservationSet) -> Result<JValue> {
    Functional::new(obs, *params)?.value(w)
}

/// Gradient of `J` with respect to every node value of `W`.
pub fn gradient_j(w: &WField, params: &CarlemanParams, obs: &ObservationSet) -> Result<WField> {
    Ok(Functional::new(obs, *params)?.value_and_gradient(w)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{BoundaryData, KnownModel};
    use crate::grid::SpatialField;

    fn toy_observations(grid: &Grid) -> ObservationSet {
        let model = KnownModel::constant_velocity(grid, 0.01, [(0.2, 0.2), (0.1, -0.1), (0.0, 0.3)]);
        let sp = |f: &dyn Fn(f64, f64) -> f64| SpatialField::from_fn(grid, f);
        let n = (grid.nt() + 1) * (grid.ny() + 1);
        ObservationSet {
            grid: *grid,
            model,
            p: [
                sp(&|x, y| 0.5 + 0.2 * x * y),
                sp(&|x, y| 0.4 + 0.1 * (x - y).sin()),
                sp(&|x, _| 0.1 * x),
            ],
            f: std::array::from_fn(|_| vec![0.0; n]),
            dt_f: std::array::from_fn(|_| vec![0.0; n]),
            dtt_f: std::array::from_fn(|_| vec![0.0; n]),
            g: std::array::from_fn(|_| BoundaryData::zeros(grid)),
            dt_g: std::array::from_fn(|_| BoundaryData::zeros(grid)),
            dtt_g: std::array::from_fn(|_| BoundaryData::zeros(grid)),
            r: [
                sp(&|x, y| -3.0 - x * y),
                sp(&|x, _| 0.2 + 0.1 * x),
                sp(&|_, y| 2.0 + y),
                sp(&|x, y| 0.1 * (x + y)),
            ],
            kappa: 0.3,
            sigma: 0.0,
        }
    }

    fn random_w(grid: &Grid, seed: u64, amp: f64) -> WField {
        let mut s = seed;
        let v = (0..N_COMPONENTS * grid.n_nodes())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                amp * (((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5)
            })
            .collect();
        WField::from_values(grid, v).unwrap()
    }

    #[test]
    fn cwf_examples() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 20, 20, 10).unwrap();
        let (phi, _) = cwf_eval(0.0, &g).unwrap();
        assert!(phi.values().iter().all(|v| *v == 1.0));

        let (_, balanced) = cwf_eval(3.0, &g).unwrap();
        assert_eq!(balanced.at(5, 7, 20), 1.0);
        assert!(balanced.values().iter().all(|v| *v <= 1.0));

        // x = 0.6 is i = 10, t = 0.75 is k = 3 with ht = 0.25
        let g4 = Grid::new(0.1, 1.1, 0.5, 1.0, 20, 20, 4).unwrap();
        let (phi, balanced) = cwf_eval(3.0, &g4).unwrap();
        let expected = 1.785f64.exp();
        assert!((phi.at(3, 0, 10) / expected - 1.0).abs() < 1e-12);
        let expected_bal = (1.785f64 - 7.26).exp();
        assert!((balanced.at(3, 0, 10) / expected_bal - 1.0).abs() < 1e-12);

        assert!(matches!(cwf_eval(300.0, &g), Err(Error::WeightOverflow(_))));
    }

    #[test]
    fn zero_field_on_constant_data_has_zero_p() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 6, 6, 4).unwrap();
        let mut obs = toy_observations(&g);
        obs.model = KnownModel::constant_velocity(&g, 0.01, [(0.0, 0.0); 3]);
        obs.p = [0.7, 0.3, 0.1].map(|c| SpatialField::constant(&g, c));
        let p = assemble_p(&WField::zeros(&g), &obs).unwrap();
        for comp in p {
            assert!(comp.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_field_zero_data_has_zero_j() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 6, 6, 4).unwrap();
        let mut obs = toy_observations(&g);
        obs.p = std::array::from_fn(|_| SpatialField::zeros(&g));
        obs.r = std::array::from_fn(|_| SpatialField::zeros(&g));
        let params = CarlemanParams::practice(2.0, 1.0, &g, obs.model.c);
        let j = functional_j(&WField::zeros(&g), &params, &obs).unwrap();
        assert_eq!(j.total, 0.0);
    }

    #[test]
    fn j_is_affine_in_xi() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 5, 5, 4).unwrap();
        let obs = toy_observations(&g);
        let w = random_w(&g, 9, 0.5);
        let j1 = functional_j(&w, &CarlemanParams::practice(1.0, 0.01, &g, 0.01), &obs).unwrap();
        let j2 = functional_j(&w, &CarlemanParams::practice(1.0, 0.31, &g, 0.01), &obs).unwrap();
        let norm = Functional::new(&obs, CarlemanParams::practice(1.0, 0.0, &g, 0.01))
            .unwrap()
            .norm_sq(&w);
        assert!(((j2.total - j1.total) - 0.3 * norm).abs() < 1e-12 * j2.total.max(1.0));
        assert!(j1.total >= 0.0 && j1.fidelity >= 0.0 && j1.regularization >= 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 5, 5, 4).unwrap();
        let obs = toy_observations(&g);
        let params = CarlemanParams::practice(2.0, 0.05, &g, obs.model.c);
        let func = Functional::new(&obs, params).unwrap();
        let w = random_w(&g, 3, 1.0);
        let (_, grad) = func.value_and_gradient(&w).unwrap();
        for dir in 0..20 {
            let h = random_w(&g, 100 + dir, 1.0);
            let eps = 1e-5;
            let mut plus = w.clone();
            let mut minus = w.clone();
            for ((p, m), d) in plus.values_mut().iter_mut().zip(minus.values_mut()).zip(h.values()) {
                *p += eps * d;
                *m -= eps * d;
            }
            let fd = (func.value(&plus).unwrap().total - func.value(&minus).unwrap().total) / (2.0 * eps);
            let an: f64 = grad.values().iter().zip(h.values()).map(|(a, b)| a * b).sum();
            assert!(((fd - an) / an.abs().max(1e-12)).abs() < 1e-6, "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn theory_mode_bounds() {
        let g = Grid::new(0.1, 1.1, 0.5, 1.0, 5, 5, 4).unwrap();
        let p = CarlemanParams::theory(3.0, &g, 0.01);
        assert!(p.validate(&g).is_ok());
        let mut bad = p;
        bad.xi = 1.5;
        assert!(bad.validate(&g).is_err());
        bad.xi = 0.1 * p.xi;
        assert!(bad.validate(&g).is_err());
        assert!(CarlemanParams::practice(3.0, 0.0, &g, 0.01).validate(&g).is_ok());
    }
}
