//! End-to-end synthetic experiment: forward solve, measurement, inversion,
//! recovery and scoring.

use crate::config::{InversionConfig, RunConfig};
use crate::convexification::{CarlemanParams, Functional, XiMode};
use crate::error::Result;
use crate::forward::{solve_forward, ForwardSolution, NeumannData, SirFields, SirParams};
use crate::grid::{Grid, SpatialField, Velocity};
use crate::observation::{add_noise, build_cauchy_vectors, sample_observations, KnownModel, NoiseSpec, ObservationSet, RawObservations};
use crate::optimizer::{initial_guess, minimize, ConstraintSet, Minimized};
use crate::recovery::{
    error_metrics, recover_coefficients, recover_populations, restrict_space_time, restrict_spatial, GroundTruth,
    MetricTable, Reconstruction, ReconstructionMeta,
};

pub fn sir_params(cfg: &RunConfig, grid: &Grid) -> Result<SirParams> {
    let f = &cfg.forward;
    let vel = |q: [f64; 2]| Velocity::constant(grid, q[0], q[1]);
    let init = &f.initial;
    let mut p = SirParams::new(
        f.c(),
        [vel(f.velocity.s), vel(f.velocity.i), vel(f.velocity.r)],
        f.beta.field(grid),
        f.gamma.field(grid),
        [&init.s, &init.i, &init.r].map(|b| SpatialField::from_fn(grid, |x, y| b.eval(x, y))),
    );
    p.picard_iterations = f.picard;
    p.solver_tolerance = f.solver_tolerance;
    Ok(p)
}

pub fn known_model(cfg: &RunConfig, grid: &Grid) -> KnownModel {
    let v = &cfg.forward.velocity;
    KnownModel::constant_velocity(grid, cfg.forward.c(), [v.s, v.i, v.r].map(|q| (q[0], q[1])))
}

/// Forward solution on the fine grid together with its inputs.
pub struct ForwardRun {
    pub grid: Grid,
    pub params: SirParams,
    pub solution: ForwardSolution,
}

pub fn run_forward(cfg: &RunConfig) -> Result<ForwardRun> {
    cfg.validate()?;
    let grid = cfg.fine_grid()?;
    let params = sir_params(cfg, &grid)?;
    let solution = solve_forward(&params, &grid)?;
    for w in &solution.warnings {
        log::warn!("{} dipped to {:e} at step {}", w.field, w.min, w.step);
    }
    Ok(ForwardRun { grid, params, solution })
}

/// Clean measurements on the inversion grid.
pub fn clean_observations(cfg: &RunConfig, fwd: &ForwardRun) -> Result<RawObservations> {
    sample_observations(&fwd.solution.fields, &cfg.coarse_grid()?, &NeumannData::Zero)
}

/// Noisy measurements turned into the inversion input.
pub fn make_observations(cfg: &RunConfig, fwd: &ForwardRun) -> Result<ObservationSet> {
    let clean = clean_observations(cfg, fwd)?;
    observations_from_raw(cfg, &clean)
}

pub fn observations_from_raw(cfg: &RunConfig, clean: &RawObservations) -> Result<ObservationSet> {
    observations_from_noisy(cfg, &noisy_observations(cfg, clean)?)
}

pub fn noisy_observations(cfg: &RunConfig, clean: &RawObservations) -> Result<RawObservations> {
    let o = &cfg.observation;
    add_noise(
        clean,
        NoiseSpec {
            sigma: o.sigma,
            seed: o.seed,
        },
    )
}

/// Splines, `r`-fields and Cauchy vectors from measured data.
pub fn observations_from_noisy(cfg: &RunConfig, noisy: &RawObservations) -> Result<ObservationSet> {
    let o = &cfg.observation;
    let obs = build_cauchy_vectors(noisy, &known_model(cfg, &noisy.grid), o.sigma, o.kappa_floor)?;
    log::info!("snapshot kappa = {:e}", obs.kappa);
    Ok(obs)
}

pub fn ground_truth(cfg: &RunConfig, fwd: &ForwardRun) -> Result<GroundTruth> {
    truth_from_fields(cfg, &fwd.solution.fields, &fwd.params.beta, &fwd.params.gamma)
}

/// Fine-grid populations and coefficients restricted to the inversion grid.
pub fn truth_from_fields(cfg: &RunConfig, f: &SirFields, beta: &SpatialField, gamma: &SpatialField) -> Result<GroundTruth> {
    let coarse = cfg.coarse_grid()?;
    Ok(GroundTruth {
        beta: restrict_spatial(beta, &coarse)?,
        gamma: restrict_spatial(gamma, &coarse)?,
        rho: [
            restrict_space_time(&f.rho_s, &coarse)?,
            restrict_space_time(&f.rho_i, &coarse)?,
            restrict_space_time(&f.rho_r, &coarse)?,
        ],
        beta_mask: cfg.forward.beta.mask(&coarse),
        gamma_mask: cfg.forward.gamma.mask(&coarse),
    })
}

pub fn carleman_params(inv: &InversionConfig, obs: &ObservationSet) -> CarlemanParams {
    match inv.xi_mode {
        XiMode::Practice => CarlemanParams::practice(inv.lambda, inv.xi, &obs.grid, obs.model.c),
        XiMode::Theory => CarlemanParams::theory(inv.lambda, &obs.grid, obs.model.c),
    }
}

pub struct Inversion {
    pub minimized: Minimized,
    pub reconstruction: Reconstruction,
}

pub fn invert(inv: &InversionConfig, obs: &ObservationSet) -> Result<Inversion> {
    let params = carleman_params(inv, obs);
    let functional = Functional::new(obs, params)?;
    let constraints = ConstraintSet::from_observations(obs);
    let w0 = initial_guess(&constraints);
    let minimized = minimize(&functional, &constraints, &w0, &inv.optimizer)?;
    let (beta, gamma) = recover_coefficients(&minimized.w, obs, inv.coefficients)?;
    let rho = recover_populations(&minimized.w, obs)?;
    let last = minimized.trace.last();
    let g = obs.grid;
    let meta = ReconstructionMeta {
        lambda: params.lambda,
        xi: params.xi,
        sigma: obs.sigma,
        grid: [g.nx(), g.ny(), g.nt()],
        iterations: last.iter,
        converged: minimized.trace.converged(),
        final_grad_norm: last.grad_norm,
    };
    Ok(Inversion {
        minimized,
        reconstruction: Reconstruction { beta, gamma, rho, meta },
    })
}

pub struct PipelineRun {
    pub forward: ForwardRun,
    pub observations: ObservationSet,
    pub inversion: Inversion,
    pub truth: GroundTruth,
    pub metrics: MetricTable,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let forward = run_forward(cfg)?;
    let observations = make_observations(cfg, &forward)?;
    let inversion = invert(&cfg.inversion, &observations)?;
    let truth = ground_truth(cfg, &forward)?;
    let metrics = error_metrics(&inversion.reconstruction, &truth, cfg.inversion.metric_eta)?;
    Ok(PipelineRun {
        forward,
        observations,
        inversion,
        truth,
        metrics,
    })
}

/// `W*` on `coarse`: first and second time derivatives of the fine-grid
/// populations by second-order differences on the fine time step.
pub fn exact_w(fields: &SirFields, coarse: &Grid) -> Result<crate::convexification::WField> {
    let fine = *fields.rho_s.grid();
    let (sx, sy, st) = fine.nesting_strides(coarse)?;
    let h = fine.ht();
    let nt = fine.nt();
    let mut w = crate::convexification::WField::zeros(coarse);
    for (m, f) in fields.components().iter().enumerate() {
        for k in 0..=coarse.nt() {
            let kf = k * st;
            for j in 0..=coarse.ny() {
                for i in 0..=coarse.nx() {
                    let at = |kk: usize| f.at(kk, j * sy, i * sx);
                    let (d1, d2) = if kf == 0 {
                        (
                            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h),
                            (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / (h * h),
                        )
                    } else if kf == nt {
                        (
                            (3.0 * at(nt) - 4.0 * at(nt - 1) + at(nt - 2)) / (2.0 * h),
                            (2.0 * at(nt) - 5.0 * at(nt - 1) + 4.0 * at(nt - 2) - at(nt - 3)) / (h * h),
                        )
                    } else {
                        (
                            (at(kf + 1) - at(kf - 1)) / (2.0 * h),
                            (at(kf + 1) - 2.0 * at(kf) + at(kf - 1)) / (h * h),
                        )
                    };
                    let idx = coarse.idx(k, j, i);
                    w.comp_mut(m)[idx] = d1;
                    w.comp_mut(m + 3)[idx] = d2;
                }
            }
        }
    }
    Ok(w)
}
