//! Boundary-constraint elimination and the descent loop.
//!
//! Every component of `W` obeys the same affine boundary relations: the
//! Dirichlet trace `F` is pinned on `x = b`, and one-sided second-order
//! normal differences reproduce the Neumann trace `G` on the other sides
//! and, combined with the pinned column, on `x = b` as well:
//!
//! ```text
//! y = -A :  W_0      = (4 W_1 - W_2 + 2 hy G) / 3
//! y =  A :  W_Ny     = (4 W_{Ny-1} - W_{Ny-2} + 2 hy G) / 3
//! x =  a :  W_0      = (4 W_1 - W_2 + 2 hx G) / 3
//! x =  b :  W_Nx     = F,   W_{Nx-1} = (W_{Nx-2} + 3 F - 2 hx G) / 4
//! ```
//!
//! The free unknowns are the nodes with `1 <= i <= Nx-2`, `1 <= j <= Ny-1`
//! at every time level. The y-relations are applied first on the columns
//! `1..=Nx-2`, then the x-relations on every row, so corner nodes belong to
//! the x-relations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::convexification::{Functional, WField, N_COMPONENTS};
use crate::error::{Error, Result};
use crate::grid::{quadrature_weights, Grid, Side};
use crate::observation::ObservationSet;

/// Affine boundary relations and the data they carry.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    grid: Grid,
    /// `F` per component, `(k, j)` order.
    dirichlet: Vec<Vec<f64>>,
    /// `G` per component and side, `(k, m)` order.
    neumann: Vec<[Vec<f64>; 4]>,
}

fn side_slot(side: Side) -> usize {
    match side {
        Side::Bottom => 0,
        Side::Top => 1,
        Side::Left => 2,
        Side::Right => 3,
    }
}

impl ConstraintSet {
    /// Relations with zero boundary data.
    pub fn homogeneous(grid: &Grid) -> Self {
        let nt1 = grid.nt() + 1;
        Self {
            grid: *grid,
            dirichlet: vec![vec![0.0; nt1 * (grid.ny() + 1)]; N_COMPONENTS],
            neumann: (0..N_COMPONENTS)
                .map(|_| Side::ALL.map(|s| vec![0.0; nt1 * s.len(grid)]))
                .collect(),
        }
    }

    pub fn from_observations(obs: &ObservationSet) -> Self {
        let g = obs.grid;
        let mut cs = Self::homogeneous(&g);
        for comp in 0..N_COMPONENTS {
            for k in 0..=g.nt() {
                for j in 0..=g.ny() {
                    cs.dirichlet[comp][k * (g.ny() + 1) + j] = obs.dirichlet_vector(comp, k, j);
                }
                for side in Side::ALL {
                    let len = side.len(&g);
                    for m in 0..len {
                        cs.neumann[comp][side_slot(side)][k * len + m] = obs.neumann_vector(comp, side, k, m);
                    }
                }
            }
        }
        cs
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_free(&self) -> usize {
        let g = &self.grid;
        N_COMPONENTS * (g.nt() + 1) * (g.ny() - 1) * (g.nx() - 2)
    }

    #[inline]
    fn f(&self, comp: usize, k: usize, j: usize) -> f64 {
        self.dirichlet[comp][k * (self.grid.ny() + 1) + j]
    }

    #[inline]
    fn g(&self, comp: usize, side: Side, k: usize, m: usize) -> f64 {
        self.neumann[comp][side_slot(side)][k * side.len(&self.grid) + m]
    }

    #[inline]
    fn free_index(&self, comp: usize, k: usize, j: usize, i: usize) -> usize {
        let g = &self.grid;
        ((comp * (g.nt() + 1) + k) * (g.ny() - 1) + (j - 1)) * (g.nx() - 2) + (i - 1)
    }

    /// The admissible `W` whose free nodes are `z`.
    pub fn expand(&self, z: &[f64]) -> Result<WField> {
        if z.len() != self.n_free() {
            return Err(Error::ShapeMismatch(format!(
                "free vector needs {} values, got {}",
                self.n_free(),
                z.len()
            )));
        }
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let (hx, hy) = (g.hx(), g.hy());
        let mut w = WField::zeros(&g);
        for comp in 0..N_COMPONENTS {
            let u = w.comp_mut(comp);
            for k in 0..=g.nt() {
                for j in 1..ny {
                    for i in 1..=nx - 2 {
                        u[g.idx(k, j, i)] = z[self.free_index(comp, k, j, i)];
                    }
                }
                for i in 1..=nx - 2 {
                    u[g.idx(k, 0, i)] = (4.0 * u[g.idx(k, 1, i)] - u[g.idx(k, 2, i)]
                        + 2.0 * hy * self.g(comp, Side::Bottom, k, i))
                        / 3.0;
                    u[g.idx(k, ny, i)] = (4.0 * u[g.idx(k, ny - 1, i)] - u[g.idx(k, ny - 2, i)]
                        + 2.0 * hy * self.g(comp, Side::Top, k, i))
                        / 3.0;
                }
                for j in 0..=ny {
                    let f = self.f(comp, k, j);
                    u[g.idx(k, j, nx)] = f;
                    u[g.idx(k, j, nx - 1)] =
                        (u[g.idx(k, j, nx - 2)] + 3.0 * f - 2.0 * hx * self.g(comp, Side::Right, k, j)) / 4.0;
                    u[g.idx(k, j, 0)] = (4.0 * u[g.idx(k, j, 1)] - u[g.idx(k, j, 2)]
                        + 2.0 * hx * self.g(comp, Side::Left, k, j))
                        / 3.0;
                }
            }
        }
        Ok(w)
    }

    /// Free-node values of `w`. Inverse of `expand` on admissible fields.
    pub fn eliminate(&self, w: &WField) -> Vec<f64> {
        let g = self.grid;
        let mut z = vec![0.0; self.n_free()];
        for comp in 0..N_COMPONENTS {
            let u = w.comp(comp);
            for k in 0..=g.nt() {
                for j in 1..g.ny() {
                    for i in 1..=g.nx() - 2 {
                        z[self.free_index(comp, k, j, i)] = u[g.idx(k, j, i)];
                    }
                }
            }
        }
        z
    }

    /// Chain rule through `expand`: maps a gradient with respect to every
    /// node of `W` to the gradient with respect to the free vector.
    pub fn expand_transpose(&self, grad: &WField) -> Vec<f64> {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let mut acc = grad.clone();
        for comp in 0..N_COMPONENTS {
            let u = acc.comp_mut(comp);
            for k in 0..=g.nt() {
                // x-relations in reverse order of application
                for j in 0..=ny {
                    let left = u[g.idx(k, j, 0)];
                    u[g.idx(k, j, 1)] += 4.0 / 3.0 * left;
                    u[g.idx(k, j, 2)] -= left / 3.0;
                    let near = u[g.idx(k, j, nx - 1)];
                    u[g.idx(k, j, nx - 2)] += near / 4.0;
                }
                for i in 1..=nx - 2 {
                    let bottom = u[g.idx(k, 0, i)];
                    u[g.idx(k, 1, i)] += 4.0 / 3.0 * bottom;
                    u[g.idx(k, 2, i)] -= bottom / 3.0;
                    let top = u[g.idx(k, ny, i)];
                    u[g.idx(k, ny - 1, i)] += 4.0 / 3.0 * top;
                    u[g.idx(k, ny - 2, i)] -= top / 3.0;
                }
            }
        }
        self.eliminate(&acc)
    }

    /// Largest absolute violation of any relation by `w`.
    pub fn residual(&self, w: &WField) -> f64 {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let (hx, hy) = (g.hx(), g.hy());
        let mut worst: f64 = 0.0;
        for comp in 0..N_COMPONENTS {
            let u = w.comp(comp);
            let at = |k, j, i| u[g.idx(k, j, i)];
            for k in 0..=g.nt() {
                for i in 1..=nx - 2 {
                    let r0 = 3.0 * at(k, 0, i) - 4.0 * at(k, 1, i) + at(k, 2, i)
                        - 2.0 * hy * self.g(comp, Side::Bottom, k, i);
                    let r1 = 3.0 * at(k, ny, i) - 4.0 * at(k, ny - 1, i) + at(k, ny - 2, i)
                        - 2.0 * hy * self.g(comp, Side::Top, k, i);
                    worst = worst.max(r0.abs() / 3.0).max(r1.abs() / 3.0);
                }
                for j in 0..=ny {
                    let f = self.f(comp, k, j);
                    let r0 = at(k, j, nx) - f;
                    let r1 = 4.0 * at(k, j, nx - 1) - at(k, j, nx - 2) - 3.0 * f
                        + 2.0 * hx * self.g(comp, Side::Right, k, j);
                    let r2 = 3.0 * at(k, j, 0) - 4.0 * at(k, j, 1) + at(k, j, 2)
                        - 2.0 * hx * self.g(comp, Side::Left, k, j);
                    worst = worst.max(r0.abs()).max(r1.abs() / 4.0).max(r2.abs() / 3.0);
                }
            }
        }
        worst
    }
}

/// Linear interpolation `((x - a) / (b - a)) F(y, t)` of the Dirichlet data
/// into the domain, with the boundary layers then made admissible.
pub fn initial_guess(constraints: &ConstraintSet) -> WField {
    let g = *constraints.grid();
    let mut w = WField::zeros(&g);
    for comp in 0..N_COMPONENTS {
        let u = w.comp_mut(comp);
        for k in 0..=g.nt() {
            for j in 0..=g.ny() {
                let f = constraints.f(comp, k, j);
                for i in 0..=g.nx() {
                    u[g.idx(k, j, i)] = (g.x(i) - g.a()) / (g.b() - g.a()) * f;
                }
            }
        }
    }
    constraints
        .expand(&constraints.eliminate(&w))
        .expect("free vector has the right length")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Steepest descent in the free variables.
    Gradient,
    #[default]
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// First trial step of the very first line search.
    pub sigma: f64,
    pub backtrack: f64,
    pub armijo: f64,
    /// Stop once the sup-norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub method: Method,
    /// L-BFGS history length.
    pub memory: usize,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            grad_tol: 1e-2,
            max_iters: 10000,
            method: Method::Lbfgs,
            memory: 10,
            max_halvings: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter("sigma and grad_tol must be positive".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::InvalidParameter(
                "backtracking factor and Armijo constant must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Objective value and gradient at a point of the free space.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub fidelity: f64,
    pub w_norm: f64,
    pub gradient: Vec<f64>,
}

pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, z: &[f64]) -> Result<Evaluation>;
    /// Hook run on every accepted iterate.
    fn accept(&self, _z: &[f64]) {}
    /// Size of `gradient` tested against `grad_tol`.
    fn stationarity(&self, gradient: &[f64]) -> f64 {
        sup_norm(gradient)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub j: f64,
    pub fidelity: f64,
    pub grad_norm: f64,
    pub w_norm: f64,
    /// Accepted step length (0 on the initial row).
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
}

impl Trace {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has the initial row")
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iter,J,fidelity,grad_norm,W_norm,step")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.iter, r.j, r.fidelity, r.grad_norm, r.w_norm, r.step)?;
        }
        Ok(())
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS two-loop recursion on `-g`.
fn lbfgs_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let a = dot(s, &q) / dot(y, s);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y)) = history.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), a) in history.iter().zip(alphas.iter().rev()) {
        let b = dot(y, &q) / dot(y, s);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q
}

/// Descent with Armijo backtracking from `z0`.
///
/// Stops when `obj.stationarity(grad) < grad_tol`, after `max_iters` accepted steps,
/// or when no step satisfying the Armijo condition is found within
/// `max_halvings` reductions (the last accepted iterate is returned).
pub fn minimize_free(obj: &dyn Objective, z0: Vec<f64>, cfg: &OptimizerConfig) -> Result<(Vec<f64>, Trace)> {
    cfg.validate()?;
    if z0.len() != obj.dim() {
        return Err(Error::ShapeMismatch(format!("start has {} values, objective {}", z0.len(), obj.dim())));
    }
    let mut z = z0;
    let mut cur = obj.evaluate(&z)?;
    if !cur.value.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    obj.accept(&z);
    let mut rows = vec![TraceRow {
        iter: 0,
        j: cur.value,
        fidelity: cur.fidelity,
        grad_norm: obj.stationarity(&cur.gradient),
        w_norm: cur.w_norm,
        step: 0.0,
    }];
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut last_step = cfg.sigma;
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=cfg.max_iters {
        if obj.stationarity(&cur.gradient) < cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        let mut accepted = None;
        // second attempt falls back to steepest descent with a fresh history
        for attempt in 0..2 {
            let use_lbfgs = cfg.method == Method::Lbfgs && attempt == 0 && !history.is_empty();
            let d = if use_lbfgs {
                lbfgs_direction(&cur.gradient, &history)
            } else {
                cur.gradient.iter().map(|v| -v).collect()
            };
            let slope = dot(&cur.gradient, &d);
            if !(slope < 0.0) {
                history.clear();
                continue;
            }
            let mut t = if use_lbfgs { 1.0 } else { 2.0 * last_step };
            if iter == 1 && !use_lbfgs {
                t = cfg.sigma;
            }
            for _ in 0..=cfg.max_halvings {
                let trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                let e = obj.evaluate(&trial)?;
                if e.value.is_finite() && e.value <= cur.value + cfg.armijo * t * slope {
                    accepted = Some((trial, e, t));
                    break;
                }
                t *= cfg.backtrack;
            }
            if accepted.is_some() {
                break;
            }
            history.clear();
        }
        let Some((trial, e, t)) = accepted else {
            log::warn!("line search failed at iteration {iter}");
            stop = StopReason::LineSearchFailed;
            break;
        };
        if cfg.method == Method::Lbfgs && cfg.memory > 0 {
            let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = e.gradient.iter().zip(&cur.gradient).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                history.push((s, y));
                if history.len() > cfg.memory {
                    history.remove(0);
                }
            }
        }
        last_step = t;
        z = trial;
        cur = e;
        obj.accept(&z);
        rows.push(TraceRow {
            iter,
            j: cur.value,
            fidelity: cur.fidelity,
            grad_norm: obj.stationarity(&cur.gradient),
            w_norm: cur.w_norm,
            step: t,
        });
        log::debug!("iter {iter}: J = {:e}, |grad| = {:e}", cur.value, obj.stationarity(&cur.gradient));
    }
    if stop == StopReason::MaxIterations && obj.stationarity(&cur.gradient) < cfg.grad_tol {
        stop = StopReason::Converged;
    }
    Ok((z, Trace { rows, stop }))
}

/// `J` restricted to admissible fields, as a function of the free vector.
///
/// Stationarity is measured on the `L2(Q_T)` gradient: each nodal derivative
/// is divided by the trapezoid weight of its node, so the tolerance does not
/// shrink with the cell volume.
pub struct ConstrainedObjective<'a> {
    functional: &'a Functional<'a>,
    constraints: &'a ConstraintSet,
    node_weight: Vec<f64>,
    worst_violation: std::cell::Cell<f64>,
}

impl<'a> ConstrainedObjective<'a> {
    pub fn new(functional: &'a Functional<'a>, constraints: &'a ConstraintSet) -> Result<Self> {
        if functional.grid() != constraints.grid() {
            return Err(Error::ShapeMismatch("functional and constraints on different grids".into()));
        }
        let g = *constraints.grid();
        let q = quadrature_weights(&g);
        let weights = WField::from_components(std::array::from_fn(|_| q.clone()))?;
        Ok(Self {
            functional,
            constraints,
            node_weight: constraints.eliminate(&weights),
            worst_violation: std::cell::Cell::new(0.0),
        })
    }

    /// Largest constraint violation seen over the accepted iterates.
    pub fn worst_violation(&self) -> f64 {
        self.worst_violation.get()
    }
}

impl Objective for ConstrainedObjective<'_> {
    fn dim(&self) -> usize {
        self.constraints.n_free()
    }

    fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let w = self.constraints.expand(z)?;
        let (j, grad) = self.functional.value_and_gradient(&w)?;
        Ok(Evaluation {
            value: j.total,
            fidelity: j.fidelity,
            w_norm: j.norm_sq.sqrt(),
            gradient: self.constraints.expand_transpose(&grad),
        })
    }

    fn stationarity(&self, gradient: &[f64]) -> f64 {
        gradient
            .iter()
            .zip(&self.node_weight)
            .fold(0.0, |m, (g, w)| m.max((g / w).abs()))
    }

    fn accept(&self, z: &[f64]) {
        let w = self.constraints.expand(z).expect("length checked by the optimizer");
        let r = self.constraints.residual(&w);
        self.worst_violation.set(self.worst_violation.get().max(r));
    }
}

/// Result of a constrained minimization.
#[derive(Debug, Clone)]
pub struct Minimized {
    pub w: WField,
    pub trace: Trace,
    /// Largest boundary-relation violation over all accepted iterates.
    pub max_constraint_residual: f64,
}

pub fn minimize(
    functional: &Functional<'_>,
    constraints: &ConstraintSet,
    w0: &WField,
    cfg: &OptimizerConfig,
) -> Result<Minimized> {
    let obj = ConstrainedObjective::new(functional, constraints)?;
    let (z, trace) = minimize_free(&obj, constraints.eliminate(w0), cfg)?;
    if let Some(last) = trace.rows.last() {
        if !last.j.is_finite() {
            return Err(Error::NonFinite { iteration: last.iter });
        }
    }
    Ok(Minimized {
        w: constraints.expand(&z)?,
        trace,
        max_constraint_residual: obj.worst_violation(),
    })
}
