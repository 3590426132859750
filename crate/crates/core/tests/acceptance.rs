//! Acceptance suite.
//!
//! Runs every criterion, prints one verdict line for each and exits with a
//! failure status if any of them fails. Criterion numbers given as
//! arguments restrict the run, e.g. `cargo test --test acceptance -- 3 8`.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sirconvex::config::RunConfig;
use sirconvex::convexification::{residual_norm, CarlemanParams, Functional, WField};
use sirconvex::diagnostics::{random_smooth_field, volterra_probe};
use sirconvex::forward::{solve_forward, NeumannData, SirFields, SirParams};
use sirconvex::grid::{Grid, ScalarField, Side, SpatialField, Velocity};
use sirconvex::observation::{
    build_cauchy_vectors, sample_observations, spline_divergence, spline_spatial_laplacian, spline_time_derivatives,
    KnownModel, ObservationSet, RawObservations,
};
use sirconvex::optimizer::{ConstrainedObjective, ConstraintSet, Objective};
use sirconvex::pipeline::{clean_observations, exact_w, ground_truth, invert, observations_from_raw, run_forward, ForwardRun};
use sirconvex::recovery::{error_metrics, recover_populations, GroundTruth};

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
    /// Compute time attributable to the criterion, including shared runs it
    /// relies on.
    runtime: Duration,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            summary: String::new(),
            details: Vec::new(),
            runtime: Duration::ZERO,
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.details.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
        self.pass &= ok;
    }

    fn note(&mut self, what: impl Into<String>) {
        self.details.push(format!("     {}", what.into()));
    }
}

/// Test-1 forward run on the fine grid and one inversion per `(lambda, sigma)`,
/// shared between criteria.
struct Context {
    test1: Option<(RunConfig, ForwardRun, RawObservations, GroundTruth, Duration)>,
    inversions: HashMap<(u64, u64), Inv>,
}

#[derive(Clone)]
struct Inv {
    lambda: f64,
    sigma: f64,
    outcome: Result<InvResult, String>,
    time: Duration,
}

#[derive(Clone)]
struct InvResult {
    beta_l2: f64,
    converged: bool,
    iterations: usize,
    /// Stationarity reported on the last trace row.
    traced: f64,
    /// Stationarity and raw sup-norm of the free gradient recomputed at the final iterate.
    recomputed: f64,
    raw_sup: f64,
    /// Largest violation over all accepted iterates, as tracked by the optimizer.
    tracked_violation: f64,
    /// Independent check of the final iterate.
    final_violation: f64,
}

impl Context {
    fn test1(&mut self) -> &(RunConfig, ForwardRun, RawObservations, GroundTruth, Duration) {
        self.test1.get_or_insert_with(|| {
            let t = Instant::now();
            let cfg = RunConfig::test1();
            let fwd = run_forward(&cfg).expect("Test-1 forward run");
            let clean = clean_observations(&cfg, &fwd).expect("observations");
            let truth = ground_truth(&cfg, &fwd).expect("ground truth");
            (cfg, fwd, clean, truth, t.elapsed())
        })
    }

    fn inversion(&mut self, lambda: f64, sigma: f64) -> Inv {
        let key = (lambda.to_bits(), sigma.to_bits());
        if let Some(r) = self.inversions.get(&key) {
            return r.clone();
        }
        let (base, _, clean, truth, _) = self.test1();
        let mut cfg = base.clone();
        cfg.inversion.lambda = lambda;
        cfg.observation.sigma = sigma;
        let t = Instant::now();
        let outcome = (|| -> sirconvex::Result<InvResult> {
            let obs = observations_from_raw(&cfg, clean)?;
            let run = invert(&cfg.inversion, &obs)?;
            let m = error_metrics(&run.reconstruction, truth, cfg.inversion.metric_eta)?;
            let params = CarlemanParams::practice(lambda, cfg.inversion.xi, &obs.grid, obs.model.c);
            let func = Functional::new(&obs, params)?;
            let cs = ConstraintSet::from_observations(&obs);
            let obj = ConstrainedObjective::new(&func, &cs)?;
            let e = obj.evaluate(&cs.eliminate(&run.minimized.w))?;
            let trace = &run.minimized.trace;
            Ok(InvResult {
                beta_l2: m.beta.l2,
                converged: trace.converged(),
                iterations: trace.last().iter,
                traced: trace.last().grad_norm,
                recomputed: obj.stationarity(&e.gradient),
                raw_sup: e.gradient.iter().fold(0.0, |a, g| a.max(g.abs())),
                tracked_violation: run.minimized.max_constraint_residual,
                final_violation: boundary_violation(&run.minimized.w, &obs),
            })
        })()
        .map_err(|e| e.to_string());
        let inv = Inv {
            lambda,
            sigma,
            outcome,
            time: t.elapsed(),
        };
        self.inversions.insert(key, inv.clone());
        inv
    }
}

/// Largest violation of the boundary relations, written out directly: the
/// Dirichlet trace on `x = b` and second-order one-sided normal differences
/// on all four sides, as undivided stencil residuals.
fn boundary_violation(w: &WField, obs: &ObservationSet) -> f64 {
    let g = obs.grid;
    let (nx, ny) = (g.nx(), g.ny());
    let (hx, hy) = (g.hx(), g.hy());
    let mut worst: f64 = 0.0;
    for comp in 0..6 {
        let u = |k: usize, j: usize, i: usize| w.at(comp, k, j, i);
        let flux = |side, k, m| obs.neumann_vector(comp, side, k, m);
        for k in 0..=g.nt() {
            for j in 0..=ny {
                worst = worst.max((u(k, j, nx) - obs.dirichlet_vector(comp, k, j)).abs());
                let right = 3.0 * u(k, j, nx) - 4.0 * u(k, j, nx - 1) + u(k, j, nx - 2) - 2.0 * hx * flux(Side::Right, k, j);
                let left = 3.0 * u(k, j, 0) - 4.0 * u(k, j, 1) + u(k, j, 2) - 2.0 * hx * flux(Side::Left, k, j);
                worst = worst.max(right.abs()).max(left.abs());
            }
            for i in 1..=nx - 2 {
                let bottom = 3.0 * u(k, 0, i) - 4.0 * u(k, 1, i) + u(k, 2, i) - 2.0 * hy * flux(Side::Bottom, k, i);
                let top = 3.0 * u(k, ny, i) - 4.0 * u(k, ny - 1, i) + u(k, ny - 2, i) - 2.0 * hy * flux(Side::Top, k, i);
                worst = worst.max(bottom.abs()).max(top.abs());
            }
        }
    }
    worst
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    type Criterion = fn(&mut Context) -> Outcome;
    let criteria: [(usize, &str, Criterion, Option<Duration>); 9] = [
        (1, "gradient matches central differences", gradient_check, Some(Duration::from_secs(30))),
        (2, "transformed residual of W* vanishes under refinement", transform_consistency, Some(Duration::from_secs(600))),
        (3, "forward solver conservation and convergence", forward_solver, None),
        (4, "Carleman weight improves the noiseless reconstruction", cwf_necessity, Some(Duration::from_secs(1800))),
        (5, "stopping rule and boundary relations", stopping_rule, None),
        (6, "recovered populations reproduce the snapshot", snapshot_exactness, None),
        (7, "noisy inversions", noise_robustness, Some(Duration::from_secs(7200))),
        (8, "spline accuracy", spline_accuracy, None),
        (9, "Volterra ratio trend", volterra_trend, None),
    ];
    let mut ctx = Context {
        test1: None,
        inversions: HashMap::new(),
    };
    let mut failed = Vec::new();
    for (n, name, run, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut out = run(&mut ctx);
        out.runtime += start.elapsed();
        if let Some(b) = budget {
            out.check(out.runtime < b, format!("runtime {:.1?} within {:?}", out.runtime, b));
        }
        println!("criterion {n}: {name}");
        for d in &out.details {
            println!("    {d}");
        }
        println!(
            "criterion {n} {}: {} ({:.1?})",
            if out.pass { "PASS" } else { "FAIL" },
            out.summary,
            out.runtime
        );
        if !out.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

/// Smooth positive populations sampled directly on `grid`.
fn smooth_observations(grid: &Grid) -> ObservationSet {
    let fields = SirFields {
        rho_s: ScalarField::from_fn(grid, |x, y, t| 0.6 + 0.2 * (x + 2.0 * y).sin() * (-t).exp()),
        rho_i: ScalarField::from_fn(grid, |x, y, t| 0.3 + 0.1 * (2.0 * x - y).cos() * (1.0 + t * t)),
        rho_r: ScalarField::from_fn(grid, |x, y, t| 0.1 + 0.05 * x * y + 0.1 * t),
    };
    let raw = sample_observations(&fields, grid, &NeumannData::Zero).unwrap();
    let model = KnownModel::constant_velocity(grid, 5e-5, [(0.2, 0.2); 3]);
    build_cauchy_vectors(&raw, &model, 0.0, 1e-3).unwrap()
}

fn gradient_check(_: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let g = Grid::new(0.1, 1.1, 0.5, 1.0, 5, 5, 4).unwrap();
    let obs = smooth_observations(&g);
    let func = Functional::new(&obs, CarlemanParams::practice(3.0, 0.01, &g, obs.model.c)).unwrap();
    let cs = ConstraintSet::from_observations(&obs);
    let obj = ConstrainedObjective::new(&func, &cs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let z = random(obj.dim());
    let e = obj.evaluate(&z).unwrap();
    let value = |v: &[f64]| obj.evaluate(v).unwrap().value;
    let shifted = |d: &[f64], s: f64| -> Vec<f64> { z.iter().zip(d).map(|(a, b)| a + s * b).collect() };
    let central = |d: &[f64], eps: f64| (value(&shifted(d, eps)) - value(&shifted(d, -eps))) / (2.0 * eps);

    let directions = 24;
    let mut worst_rel: f64 = 0.0;
    let mut orders = Vec::new();
    for _ in 0..directions {
        let d = random(obj.dim());
        let an: f64 = e.gradient.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rel = ((central(&d, 1e-5) - an) / an.abs()).abs();
        worst_rel = worst_rel.max(rel);
        let e1 = (central(&d, 4e-2) - an).abs();
        let e2 = (central(&d, 2e-2) - an).abs();
        let e3 = (central(&d, 1e-2) - an).abs();
        orders.push(((e1 / e2).log2() + (e2 / e3).log2()) / 2.0);
    }
    let (lo, hi) = orders.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), o| (l.min(*o), h.max(*o)));
    out.check(worst_rel < 1e-6, format!("{directions} directions, worst relative error {worst_rel:.2e} (< 1e-6)"));
    out.check(lo > 1.8 && hi < 2.2, format!("observed order of the difference error in [{lo:.3}, {hi:.3}] (expect 2)"));
    out.summary = format!("worst relative error {worst_rel:.2e}, order {lo:.2}..{hi:.2}");
    out
}

// ---------------------------------------------------------------- criterion 2

fn transform_consistency(_: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let mut cfg = RunConfig::test1();
    (cfg.forward.nx, cfg.forward.ny, cfg.forward.nt) = (160, 160, 640);
    let fwd = run_forward(&cfg).unwrap();
    let (a, half) = (cfg.domain.a, cfg.domain.half_width);
    let q = cfg.forward.velocity.s;
    out.note(format!("forward run {}x{}x{}", cfg.forward.nx, cfg.forward.ny, cfg.forward.nt));
    let mut norms = Vec::new();
    for n in [10, 20, 40] {
        (cfg.observation.nx, cfg.observation.ny, cfg.observation.nt) = (n, n, n);
        let clean = clean_observations(&cfg, &fwd).unwrap();
        let obs = observations_from_raw(&cfg, &clean).unwrap();
        let g = obs.grid;
        let ws = exact_w(&fwd.solution.fields, &g).unwrap();
        // Zero flux on the inflow sides with c << |q| h starts a kink that
        // travels inward at speed |q|; the natural splines also misrepresent
        // the Laplacian on the top and right rows. Both are excluded.
        let margin = 0.1;
        let smooth = |k: usize, j: usize, i: usize| {
            let (x, y, t) = (g.x(i), g.y(j), g.t(k));
            i < g.nx() && j < g.ny() && x - a > q[0] * t + margin && y + half > q[1] * t + margin
        };
        let masked = residual_norm(&ws, &obs, Some(&smooth)).unwrap();
        let interior = residual_norm(&ws, &obs, Some(&|_, j, i| j > 0 && j < g.ny() && i > 0 && i < g.nx())).unwrap();
        out.note(format!("{n}x{n}x{n}: ||L(W*)|| {masked:.4e} (whole spatial interior {interior:.4e})"));
        norms.push(masked);
    }
    let ratios: Vec<f64> = norms.windows(2).map(|w| w[0] / w[1]).collect();
    for (l, r) in ratios.iter().enumerate() {
        out.check(*r >= 2.0, format!("level {} -> {} decrease factor {r:.3} (>= 2)", l, l + 1));
    }
    out.summary = format!("norms {:.3e}, {:.3e}, {:.3e}; factors {:.2}, {:.2}", norms[0], norms[1], norms[2], ratios[0], ratios[1]);
    out
}

// ---------------------------------------------------------------- criterion 3

fn trapezoid_mass(f: &ScalarField, k: usize) -> f64 {
    let g = f.grid();
    let mut m = 0.0;
    for j in 0..=g.ny() {
        for i in 0..=g.nx() {
            let cx = if i == 0 || i == g.nx() { 0.5 } else { 1.0 };
            let cy = if j == 0 || j == g.ny() { 0.5 } else { 1.0 };
            m += cx * cy * f.at(k, j, i);
        }
    }
    m * g.hx() * g.hy()
}

#[derive(Clone, Copy)]
struct Mode {
    amp: f64,
    kx: f64,
    px: f64,
    ky: f64,
    py: f64,
}

impl Mode {
    fn v(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.kx * x + self.px).sin() * (self.ky * y + self.py).sin()
    }
    fn dx(&self, x: f64, y: f64) -> f64 {
        self.amp * self.kx * (self.kx * x + self.px).cos() * (self.ky * y + self.py).sin()
    }
    fn dy(&self, x: f64, y: f64) -> f64 {
        self.amp * self.ky * (self.kx * x + self.px).sin() * (self.ky * y + self.py).cos()
    }
    fn lap(&self, x: f64, y: f64) -> f64 {
        -(self.kx * self.kx + self.ky * self.ky) * self.v(x, y)
    }
}

/// `c0 + m0(x, y) + t m1(x, y)`: linear in time, so backward Euler is exact
/// in time and only the spatial error remains.
#[derive(Clone, Copy)]
struct SpaceCase {
    c0: f64,
    m0: Mode,
    m1: Mode,
}

impl SpaceCase {
    fn v(&self, x: f64, y: f64, t: f64) -> f64 {
        self.c0 + self.m0.v(x, y) + t * self.m1.v(x, y)
    }
    fn dt(&self, x: f64, y: f64) -> f64 {
        self.m1.v(x, y)
    }
    fn dx(&self, x: f64, y: f64, t: f64) -> f64 {
        self.m0.dx(x, y) + t * self.m1.dx(x, y)
    }
    fn dy(&self, x: f64, y: f64, t: f64) -> f64 {
        self.m0.dy(x, y) + t * self.m1.dy(x, y)
    }
    fn lap(&self, x: f64, y: f64, t: f64) -> f64 {
        self.m0.lap(x, y) + t * self.m1.lap(x, y)
    }
}

fn beta_ms(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (x + y).sin()
}

fn gamma_ms(x: f64, y: f64) -> f64 {
    0.3 + 0.1 * (x * y).cos()
}

/// Outward normal derivative on `side` from the two partial derivatives.
fn outward(side: Side, dx: f64, dy: f64) -> f64 {
    match side {
        Side::Left => -dx,
        Side::Right => dx,
        Side::Bottom => -dy,
        Side::Top => dy,
    }
}

/// Trapezoid `L2(Q_T)` distance between the computed and exact populations.
fn l2_error(fields: &SirFields, grid: &Grid, exact: impl Fn(usize, f64, f64, f64) -> f64) -> f64 {
    let mut err = 0.0;
    let c = |n: usize, m: usize| if n == 0 || n == m { 0.5 } else { 1.0 };
    for (m, f) in fields.components().iter().enumerate() {
        for k in 0..=grid.nt() {
            for j in 0..=grid.ny() {
                for i in 0..=grid.nx() {
                    let w = c(k, grid.nt()) * c(j, grid.ny()) * c(i, grid.nx()) * grid.hx() * grid.hy() * grid.ht();
                    let e = f.at(k, j, i) - exact(m, grid.x(i), grid.y(j), grid.t(k));
                    err += w * e * e;
                }
            }
        }
    }
    err.sqrt()
}

fn manufactured_space(n: usize) -> f64 {
    let grid = Grid::new(0.1, 1.1, 0.5, 1.0, n, n, 8).unwrap();
    let c = 0.01;
    let m = |amp, kx, px, ky, py| Mode { amp, kx, px, ky, py };
    let u = [
        SpaceCase { c0: 1.0, m0: m(0.3, 2.0, 1.0, 3.0, 0.4), m1: m(0.2, 1.0, 0.3, 1.5, 2.0) },
        SpaceCase { c0: 0.6, m0: m(0.2, 2.5, 0.2, 2.0, 1.1), m1: m(0.1, 1.5, 1.0, 2.0, 0.5) },
        SpaceCase { c0: 0.3, m0: m(0.1, 1.0, 0.7, 3.0, 0.2), m1: m(0.1, 2.0, 0.1, 1.0, 1.0) },
    ];
    // q = (a0 + a1 x, b0 + b1 y)
    let vel = [(0.2, 0.1, 0.2, -0.1), (0.1, 0.2, 0.3, 0.1), (0.2, -0.1, 0.1, 0.2)];
    let source = move |x: f64, y: f64, t: f64| -> [f64; 3] {
        let mut out: [f64; 3] = std::array::from_fn(|m| {
            let (a0, a1, b0, b1) = vel[m];
            let f = u[m];
            let div = (a0 + a1 * x) * f.dx(x, y, t) + a1 * f.v(x, y, t) + (b0 + b1 * y) * f.dy(x, y, t) + b1 * f.v(x, y, t);
            f.dt(x, y) - c * f.lap(x, y, t) + div
        });
        let si = beta_ms(x, y) * u[0].v(x, y, t) * u[1].v(x, y, t);
        out[0] += si;
        out[1] -= si;
        out[2] -= gamma_ms(x, y) * u[1].v(x, y, t);
        out
    };
    let flux = move |side: Side, x: f64, y: f64, t: f64| -> [f64; 3] {
        std::array::from_fn(|m| outward(side, u[m].dx(x, y, t), u[m].dy(x, y, t)))
    };
    let velocities = vel.map(|(a0, a1, b0, b1)| Velocity::from_fn(&grid, |x, y| (a0 + a1 * x, b0 + b1 * y)));
    let mut p = SirParams::new(
        c,
        velocities,
        SpatialField::from_fn(&grid, beta_ms),
        SpatialField::from_fn(&grid, gamma_ms),
        std::array::from_fn(|m| SpatialField::from_fn(&grid, |x, y| u[m].v(x, y, 0.0))),
    );
    p.neumann = NeumannData::Function(Arc::new(flux));
    p.source = Some(Arc::new(source));
    // converge the lagged reaction so only the discretization error remains
    p.picard_iterations = 12;
    let sol = solve_forward(&p, &grid).unwrap();
    l2_error(&sol.fields, &grid, |m, x, y, t| u[m].v(x, y, t))
}

/// Spatial quadratics, exact under second-order differences.
#[derive(Clone, Copy)]
struct Quad([f64; 6]);

impl Quad {
    fn v(&self, x: f64, y: f64) -> f64 {
        let a = self.0;
        a[0] + a[1] * x + a[2] * y + a[3] * x * x + a[4] * x * y + a[5] * y * y
    }
    fn dx(&self, x: f64, y: f64) -> f64 {
        let a = self.0;
        a[1] + 2.0 * a[3] * x + a[4] * y
    }
    fn dy(&self, x: f64, y: f64) -> f64 {
        let a = self.0;
        a[2] + a[4] * x + 2.0 * a[5] * y
    }
    fn lap(&self) -> f64 {
        2.0 * (self.0[3] + self.0[5])
    }
}

/// `P0(x, y) + sin(w t) P1(x, y)` with constant velocities: only the time
/// error remains.
fn manufactured_time(nt: usize) -> f64 {
    let n = 10;
    let grid = Grid::new(0.1, 1.1, 0.5, 1.0, n, n, nt).unwrap();
    let c = 0.01;
    let p0 = [
        Quad([1.0, 0.2, -0.1, 0.3, 0.1, -0.2]),
        Quad([0.5, -0.1, 0.2, 0.1, -0.2, 0.3]),
        Quad([0.2, 0.1, 0.1, -0.1, 0.2, 0.1]),
    ];
    let p1 = [
        Quad([0.3, 0.1, 0.2, -0.2, 0.1, 0.1]),
        Quad([0.2, 0.2, -0.1, 0.1, 0.1, -0.1]),
        Quad([0.1, -0.1, 0.1, 0.2, 0.0, 0.1]),
    ];
    let om = [2.0, 3.0, 1.5];
    let val = move |m: usize, x: f64, y: f64, t: f64| p0[m].v(x, y) + (om[m] * t).sin() * p1[m].v(x, y);
    let vx = move |m: usize, x: f64, y: f64, t: f64| p0[m].dx(x, y) + (om[m] * t).sin() * p1[m].dx(x, y);
    let vy = move |m: usize, x: f64, y: f64, t: f64| p0[m].dy(x, y) + (om[m] * t).sin() * p1[m].dy(x, y);
    let vel = [(0.2, 0.2), (0.1, 0.3), (-0.2, 0.1)];
    let source = move |x: f64, y: f64, t: f64| -> [f64; 3] {
        let mut out: [f64; 3] = std::array::from_fn(|m| {
            let dt = om[m] * (om[m] * t).cos() * p1[m].v(x, y);
            let lap = p0[m].lap() + (om[m] * t).sin() * p1[m].lap();
            dt - c * lap + vel[m].0 * vx(m, x, y, t) + vel[m].1 * vy(m, x, y, t)
        });
        let si = beta_ms(x, y) * val(0, x, y, t) * val(1, x, y, t);
        out[0] += si;
        out[1] -= si;
        out[2] -= gamma_ms(x, y) * val(1, x, y, t);
        out
    };
    let flux = move |side: Side, x: f64, y: f64, t: f64| -> [f64; 3] {
        std::array::from_fn(|m| outward(side, vx(m, x, y, t), vy(m, x, y, t)))
    };
    let mut p = SirParams::new(
        c,
        vel.map(|(a, b)| Velocity::constant(&grid, a, b)),
        SpatialField::from_fn(&grid, beta_ms),
        SpatialField::from_fn(&grid, gamma_ms),
        std::array::from_fn(|m| SpatialField::from_fn(&grid, |x, y| val(m, x, y, 0.0))),
    );
    p.neumann = NeumannData::Function(Arc::new(flux));
    p.source = Some(Arc::new(source));
    let sol = solve_forward(&p, &grid).unwrap();
    l2_error(&sol.fields, &grid, val)
}

fn forward_solver(_: &mut Context) -> Outcome {
    let mut out = Outcome::new();

    // mass under pure diffusion with zero flux
    let grid = Grid::new(0.1, 1.1, 0.5, 1.0, 40, 40, 40).unwrap();
    let bump = |cx: f64, cy: f64, w: f64| {
        SpatialField::from_fn(&grid, move |x, y| 0.05 + (-w * ((x - cx).powi(2) + (y - cy).powi(2))).exp())
    };
    let still = Velocity::constant(&grid, 0.0, 0.0);
    let p = SirParams::new(
        0.01,
        [still.clone(), still.clone(), still],
        SpatialField::zeros(&grid),
        SpatialField::zeros(&grid),
        [bump(0.3, 0.0, 20.0), bump(0.9, 0.3, 40.0), bump(0.6, -0.4, 10.0)],
    );
    let sol = solve_forward(&p, &grid).unwrap();
    let mut drift: f64 = 0.0;
    for f in sol.fields.components() {
        let m0 = trapezoid_mass(f, 0);
        for k in 1..=grid.nt() {
            drift = drift.max(((trapezoid_mass(f, k) - m0) / m0).abs());
        }
    }
    out.check(drift < 1e-8, format!("relative mass drift {drift:.2e} (< 1e-8)"));

    // constant state under advection and diffusion
    let mut p = SirParams::new(
        5e-5,
        std::array::from_fn(|_| Velocity::constant(&grid, 0.2, 0.2)),
        SpatialField::zeros(&grid),
        SpatialField::zeros(&grid),
        [0.7, 0.2, 0.1].map(|c| SpatialField::constant(&grid, c)),
    );
    p.picard_iterations = 2;
    let sol = solve_forward(&p, &grid).unwrap();
    let exact = sol
        .fields
        .components()
        .iter()
        .zip([0.7, 0.2, 0.1])
        .all(|(f, c)| f.values().iter().all(|v| *v == c));
    out.check(exact, "constant state preserved bit-exactly");

    let space: Vec<f64> = [10, 20, 40, 80].map(manufactured_space).to_vec();
    let time: Vec<f64> = [10, 20, 40, 80].map(manufactured_time).to_vec();
    for (name, errs, target) in [("space", &space, 4.0), ("time", &time, 2.0)] {
        let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
        let ok = ratios.iter().all(|r| (r / target - 1.0).abs() <= 0.25);
        out.note(format!("{name} errors {:?}", errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()));
        out.check(
            ok,
            format!("{name} refinement ratios {:?} (expect {target} within 25%)", ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()),
        );
    }
    out.summary = format!("mass drift {drift:.1e}, constant state exact: {exact}");
    out
}

// ---------------------------------------------------------------- criterion 4

/// Relative `L2(Omega)` error of beta on noiseless Test 1, recorded from the
/// first complete run of this suite.
const FROZEN_BETA_L2: [(f64, f64); 4] = [(0.0, 24.710579495), (3.0, 26.185898920), (4.0, 27.130644306), (5.0, 27.182882703)];

fn cwf_necessity(ctx: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    out.runtime += ctx.test1().4;
    let mut err = HashMap::new();
    for (lambda, frozen) in FROZEN_BETA_L2 {
        let inv = ctx.inversion(lambda, 0.0);
        out.runtime += inv.time;
        match &inv.outcome {
            Ok(r) => {
                out.note(format!(
                    "lambda {lambda}: beta error {:.9}, {} iterations, converged {}",
                    r.beta_l2, r.iterations, r.converged
                ));
                out.check(
                    (r.beta_l2 / frozen - 1.0).abs() < 1e-6,
                    format!("lambda {lambda} matches frozen value {frozen:.9}"),
                );
                err.insert(lambda as u32, r.beta_l2);
            }
            Err(e) => out.check(false, format!("lambda {lambda} failed: {e}")),
        }
    }
    if let (Some(e0), Some(e3), Some(e4), Some(e5)) = (err.get(&0), err.get(&3), err.get(&4), err.get(&5)) {
        out.check(e3 < e0, format!("error(lambda=3) {e3:.4} < error(lambda=0) {e0:.4}"));
        out.check(e3 <= e4 && e3 <= e5, format!("error(lambda=3) {e3:.4} <= errors at 4, 5 ({e4:.4}, {e5:.4})"));
        out.summary = format!("beta errors 0: {e0:.4}, 3: {e3:.4}, 4: {e4:.4}, 5: {e5:.4}");
    } else {
        out.summary = "inversion failed".into();
    }
    out
}

// ---------------------------------------------------------------- criterion 5

fn stopping_rule(ctx: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let mut runs = Vec::new();
    for lambda in [0.0, 3.0, 4.0, 5.0] {
        runs.push(ctx.inversion(lambda, 0.0));
    }
    for sigma in NOISE {
        runs.push(ctx.inversion(3.0, sigma));
    }
    let mut converged = 0;
    let mut worst_violation: f64 = 0.0;
    for inv in &runs {
        let Ok(r) = &inv.outcome else {
            out.note(format!("lambda {} sigma {}: no result", inv.lambda, inv.sigma));
            continue;
        };
        worst_violation = worst_violation.max(r.tracked_violation).max(r.final_violation);
        out.note(format!(
            "lambda {} sigma {}: converged {}, stationarity traced {:.3e} recomputed {:.3e}, raw sup {:.3e}, violation {:.1e}/{:.1e}",
            inv.lambda, inv.sigma, r.converged, r.traced, r.recomputed, r.raw_sup, r.tracked_violation, r.final_violation
        ));
        if r.converged {
            converged += 1;
            out.check(
                r.recomputed < 1e-2 && r.raw_sup < 1e-2 && r.recomputed == r.traced,
                format!("lambda {} sigma {}: final gradient below 1e-2", inv.lambda, inv.sigma),
            );
        }
    }
    out.check(worst_violation <= 1e-12, format!("largest boundary violation over all iterates {worst_violation:.2e} (<= 1e-12)"));
    out.summary = format!("{converged} of {} runs converged, worst violation {worst_violation:.1e}", runs.len());
    out
}

// ---------------------------------------------------------------- criterion 6

fn snapshot_exactness(ctx: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let (cfg, _, clean, _, _) = ctx.test1();
    let mut noisy = cfg.clone();
    noisy.observation.sigma = 0.03;
    let mut mismatches = 0;
    let mut cases = 0;
    for c in [cfg, &noisy] {
        let obs = observations_from_raw(c, clean).unwrap();
        let g = obs.grid;
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = [1.0, 10.0, 1e3, 1e-3][seed as usize];
            let values = (0..6 * g.n_nodes()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let w = WField::from_values(&g, values).unwrap();
            let rho = recover_populations(&w, &obs).unwrap();
            let k = g.snapshot_index();
            for m in 0..3 {
                for j in 0..=g.ny() {
                    for i in 0..=g.nx() {
                        cases += 1;
                        if rho[m].at(k, j, i).to_bits() != obs.p[m].at(j, i).to_bits() {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    out.check(mismatches == 0, format!("{cases} snapshot values compared bitwise, {mismatches} differ"));
    out.summary = format!("{mismatches} of {cases} values differ");
    out
}

// ---------------------------------------------------------------- criterion 7

const NOISE: [f64; 4] = [0.01, 0.02, 0.03, 0.05];

fn noise_robustness(ctx: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    out.runtime += ctx.test1().4;
    let mut errors = Vec::new();
    for sigma in [0.0].into_iter().chain(NOISE) {
        let inv = ctx.inversion(3.0, sigma);
        out.runtime += inv.time;
        match &inv.outcome {
            Ok(r) => {
                out.check(
                    r.beta_l2.is_finite(),
                    format!("sigma {sigma}: completed, beta error {:.4}, converged {}", r.beta_l2, r.converged),
                );
                errors.push((sigma, r.beta_l2));
            }
            Err(e) => out.check(false, format!("sigma {sigma}: {e}")),
        }
    }
    let at = |s: f64| errors.iter().find(|(x, _)| *x == s).map(|(_, e)| *e);
    if let (Some(e0), Some(e5)) = (at(0.0), at(0.05)) {
        out.check(e5 > e0, format!("error at sigma 0.05 ({e5:.4}) exceeds error at sigma 0 ({e0:.4})"));
    }
    out.summary = errors.iter().map(|(s, e)| format!("{s}: {e:.4}")).collect::<Vec<_>>().join(", ");
    out
}

// ---------------------------------------------------------------- criterion 8

/// Knot derivatives of the natural cubic spline by dense Gaussian
/// elimination on the moment equations.
fn dense_natural_spline_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    a[0][0] = 1.0;
    a[n - 1][n - 1] = 1.0;
    for i in 1..n - 1 {
        a[i][i - 1] = h / 6.0;
        a[i][i] = 2.0 * h / 3.0;
        a[i][i + 1] = h / 6.0;
        a[i][n] = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&r, &s| a[r][c].abs().total_cmp(&a[s][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let m: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                (y[i + 1] - y[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0
            } else {
                (y[i] - y[i - 1]) / h + h * (m[i - 1] + 2.0 * m[i]) / 6.0
            }
        })
        .collect()
}

fn spline_accuracy(_: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let h = 0.1;
    let t: Vec<f64> = (0..=10).map(|k| k as f64 * h).collect();
    let y: Vec<f64> = t.iter().map(|t| t.sin()).collect();
    let (d1, _) = spline_time_derivatives(&y, h).unwrap();
    let oracle = dense_natural_spline_slopes(&y, h);
    let agree = d1.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    out.check(agree < 1e-12, format!("matches a dense natural-spline solve to {agree:.1e}"));
    let errs: Vec<f64> = d1.iter().zip(&t).map(|(d, t)| (d - t.cos()).abs()).collect();
    let interior = errs[1..errs.len() - 1].iter().fold(0.0f64, |a, b| a.max(*b));
    out.note(format!(
        "|s' - cos t| at t = 0.1 .. 0.9: {:?}",
        errs[1..10].iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>()
    ));
    out.check(interior < 1e-3, format!("max interior derivative error {interior:.3e} (< 1e-3)"));

    // affine data
    let affine: Vec<f64> = t.iter().map(|t| 0.3 - 1.7 * t).collect();
    let (a1, a2) = spline_time_derivatives(&affine, h).unwrap();
    let dev1 = a1.iter().fold(0.0f64, |m, v| m.max((v + 1.7).abs()));
    let dev2 = a2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = Grid::new(0.1, 1.1, 0.5, 1.0, 20, 20, 10).unwrap();
    let p = SpatialField::from_fn(&g, |x, y| 0.4 + 0.7 * x - 0.2 * y);
    let lap = spline_spatial_laplacian(&p);
    let dev_lap = lap.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let q = Velocity::constant(&g, 0.2, -0.3);
    let div = spline_divergence(&p, &q);
    let dev_div = div.values().iter().fold(0.0f64, |m, v| m.max((v - (0.2 * 0.7 + 0.3 * 0.2)).abs()));
    let worst = dev1.max(dev2).max(dev_lap).max(dev_div);
    out.check(
        worst < 1e-12,
        format!("affine data: slope {dev1:.1e}, curvature {dev2:.1e}, Laplacian {dev_lap:.1e}, divergence {dev_div:.1e} (< 1e-12)"),
    );
    out.summary = format!("sin t interior error {interior:.2e}, affine deviation {worst:.1e}");
    out
}

// ---------------------------------------------------------------- criterion 9

/// The ratio computed from its definition with the unscaled weight.
fn direct_ratio(f: &ScalarField, lambda: f64) -> f64 {
    let g = f.grid();
    let k0 = g.nt() / 2;
    let c = |n: usize, m: usize| if n == 0 || n == m { 0.5 } else { 1.0 };
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..=g.ny() {
        for i in 0..=g.nx() {
            for k in 0..=g.nt() {
                let (lo, hi, sign) = if k >= k0 { (k0, k, 1.0) } else { (k, k0, -1.0) };
                let v: f64 = sign * (lo..hi).map(|l| 0.5 * g.ht() * (f.at(l, j, i) + f.at(l + 1, j, i))).sum::<f64>();
                let (x, t) = (g.x(i), g.t(k));
                let w = c(i, g.nx()) * c(j, g.ny()) * c(k, g.nt()) * (2.0 * lambda * (x * x - (t - 0.5 * g.t_final()).powi(2))).exp();
                num += w * v * v;
                den += w * f.at(k, j, i).powi(2);
            }
        }
    }
    num / den
}

fn volterra_trend(_: &mut Context) -> Outcome {
    let mut out = Outcome::new();
    let g = RunConfig::test1().coarse_grid().unwrap();
    let lambdas = [2.0, 4.0, 8.0];
    let mut worst_growth: f64 = 0.0;
    let mut worst_agree: f64 = 0.0;
    for seed in 0..10 {
        let f = random_smooth_field(&g, seed);
        let rows = volterra_probe(&f, &lambdas).unwrap();
        for r in &rows {
            worst_agree = worst_agree.max((r.rho / direct_ratio(&f, r.lambda) - 1.0).abs());
        }
        let lr: Vec<f64> = rows.iter().map(|r| r.lambda_rho).collect();
        let growth = lr.windows(2).map(|w| w[1] / w[0]).fold(0.0f64, f64::max);
        worst_growth = worst_growth.max(growth);
        out.note(format!("field {seed}: lambda*rho {:.4} {:.4} {:.4}", lr[0], lr[1], lr[2]));
    }
    out.check(worst_agree < 1e-10, format!("probe agrees with the direct quadrature to {worst_agree:.1e}"));
    out.check(
        worst_growth <= 1.1,
        format!("largest step-to-step growth of lambda*rho {worst_growth:.3} (non-increasing within 10%)"),
    );
    out.summary = format!("largest growth factor {worst_growth:.3}");
    out
}
