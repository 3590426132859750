use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sirconvex::config::RunConfig;
use sirconvex::convexification::Functional;
use sirconvex::diagnostics::{convexity_probe, lambda_sweep, random_smooth_field, volterra_probe, write_sweep_csv, ConvexityConfig};
use sirconvex::forward::{discrete_mass, NeumannData, SirFields};
use sirconvex::grid::{Grid, SpatialField};
use sirconvex::io::{Archive, FieldFile, MAGIC};
use sirconvex::observation::{sample_observations, BoundaryData, ObservationSet, RawObservations};
use sirconvex::optimizer::{ConstraintSet, StopReason};
use sirconvex::pipeline::{carleman_params, invert as run_inversion, noisy_observations, observations_from_noisy, run_forward, truth_from_fields};
use sirconvex::recovery::{error_metrics, GroundTruth, Reconstruction, ReconstructionMeta};
use sirconvex::{Error, Result};

use crate::{ConfigArgs, Format, Probe};

const FORWARD: &str = "forward";
const DATA: &str = "data";
const INVERSION: &str = "inversion";

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(&args.config, &args.set)
}

fn dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.output.join(stage)
}

/// Opens the archive of an earlier stage and checks that it was produced
/// from the same blocks of the configuration.
fn open_stage(cfg: &RunConfig, stage: &str) -> Result<Archive> {
    let path = dir(cfg, stage);
    let archive = Archive::open(&path).map_err(|_| {
        Error::Config(format!("no {stage} archive at {}; run that stage first", path.display()))
    })?;
    let made = archive.config()?;
    let mut differs = Vec::new();
    if made.domain != cfg.domain {
        differs.push("domain");
    }
    if made.forward != cfg.forward {
        differs.push("forward");
    }
    if stage != FORWARD && made.observation != cfg.observation {
        differs.push("observation");
    }
    if !differs.is_empty() {
        return Err(Error::Config(format!(
            "{} was made with different [{}] settings; rerun that stage",
            path.display(),
            differs.join("], [")
        )));
    }
    Ok(archive)
}

fn write_with(archive: &Archive, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(archive.path(name), buf)?;
    Ok(())
}

#[derive(Serialize)]
struct ForwardMeta {
    grid: [usize; 3],
    c: f64,
    max_solver_iterations: usize,
    negative_values: usize,
    /// `min(|S|, |I|)` over the fine grid at `T/2`.
    snapshot_kappa: f64,
    /// Trapezoid mass of S, I, R at `t = 0` and `t = T`.
    mass_initial: [f64; 3],
    mass_final: [f64; 3],
}

pub fn forward(args: &ConfigArgs) -> Result<()> {
    let cfg = load(args)?;
    let run = run_forward(&cfg)?;
    let g = run.grid;
    let f = &run.solution.fields;
    let half = g.snapshot_index();
    let kappa = (0..=g.ny())
        .flat_map(|j| (0..=g.nx()).map(move |i| (j, i)))
        .map(|(j, i)| f.rho_s.at(half, j, i).abs().min(f.rho_i.at(half, j, i).abs()))
        .fold(f64::INFINITY, f64::min);
    log::info!("snapshot kappa = {kappa:e}");
    let mass = |k: usize| f.components().map(|c| discrete_mass(c, k));
    let meta = ForwardMeta {
        grid: [g.nx(), g.ny(), g.nt()],
        c: run.params.c,
        max_solver_iterations: run.solution.max_solver_iterations,
        negative_values: run.solution.warnings.len(),
        snapshot_kappa: kappa,
        mass_initial: mass(0),
        mass_final: mass(g.nt()),
    };
    let archive = Archive::create(&dir(&cfg, FORWARD), &cfg, &meta)?;
    archive.write_field("rho.sirf", &FieldFile::from_space_time(&f.components())?)?;
    archive.write_field("coefficients.sirf", &FieldFile::from_spatial(&[&run.params.beta, &run.params.gamma])?)?;
    println!("forward: {}", archive.dir().display());
    Ok(())
}

fn read_forward(cfg: &RunConfig) -> Result<(SirFields, SpatialField, SpatialField)> {
    let archive = open_stage(cfg, FORWARD)?;
    let fine = cfg.fine_grid()?;
    let [rho_s, rho_i, rho_r]: [_; 3] = archive
        .read_field("rho.sirf")?
        .to_space_time(&fine)?
        .try_into()
        .map_err(|_| Error::ShapeMismatch("rho.sirf must hold three components".into()))?;
    let [beta, gamma]: [_; 2] = archive
        .read_field("coefficients.sirf")?
        .to_spatial(&fine)?
        .try_into()
        .map_err(|_| Error::ShapeMismatch("coefficients.sirf must hold two components".into()))?;
    Ok((SirFields { rho_s, rho_i, rho_r }, beta, gamma))
}

/// Traces on `x = b` as a one-column field file.
fn line_file(g: &Grid, series: &[&[f64]]) -> Result<FieldFile> {
    let data = series.iter().flat_map(|s| s.iter().copied()).collect();
    FieldFile::new(
        [series.len(), g.nt() + 1, g.ny() + 1, 1],
        [g.b(), g.b(), g.half_width(), g.t_final()],
        data,
    )
}

#[derive(Serialize)]
struct DataMeta {
    grid: [usize; 3],
    sigma: f64,
    seed: u64,
    kappa: f64,
}

pub fn make_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load(args)?;
    let (fields, _, _) = read_forward(&cfg)?;
    let coarse = cfg.coarse_grid()?;
    let clean = sample_observations(&fields, &coarse, &NeumannData::Zero)?;
    let noisy = noisy_observations(&cfg, &clean)?;
    let obs = observations_from_noisy(&cfg, &noisy)?;
    let meta = DataMeta {
        grid: [coarse.nx(), coarse.ny(), coarse.nt()],
        sigma: cfg.observation.sigma,
        seed: cfg.observation.seed,
        kappa: obs.kappa,
    };
    let archive = Archive::create(&dir(&cfg, DATA), &cfg, &meta)?;
    archive.write_field("snapshot.sirf", &FieldFile::from_spatial(&noisy.snapshot.each_ref())?)?;
    let d = &noisy.dirichlet;
    archive.write_field("dirichlet.sirf", &line_file(&coarse, &[&d[0], &d[1], &d[2]])?)?;
    archive.write_field("r.sirf", &FieldFile::from_spatial(&obs.r.each_ref())?)?;
    let mut f: Vec<&[f64]> = Vec::new();
    for m in 0..3 {
        f.extend([&obs.f[m][..], &obs.dt_f[m][..], &obs.dtt_f[m][..]]);
    }
    archive.write_field("cauchy.sirf", &line_file(&coarse, &f)?)?;
    println!("data: {} (kappa = {:e})", archive.dir().display(), obs.kappa);
    Ok(())
}

fn read_observations(cfg: &RunConfig) -> Result<ObservationSet> {
    let archive = open_stage(cfg, DATA)?;
    let g = cfg.coarse_grid()?;
    let snapshot: [SpatialField; 3] = archive
        .read_field("snapshot.sirf")?
        .to_spatial(&g)?
        .try_into()
        .map_err(|_| Error::ShapeMismatch("snapshot.sirf must hold three components".into()))?;
    let d = archive.read_field("dirichlet.sirf")?;
    if d.dims != [3, g.nt() + 1, g.ny() + 1, 1] {
        return Err(Error::ShapeMismatch(format!("dirichlet.sirf has extents {:?}", d.dims)));
    }
    let noisy = RawObservations {
        grid: g,
        snapshot,
        dirichlet: [0, 1, 2].map(|c| d.component(c).to_vec()),
        neumann: [0, 1, 2].map(|_| BoundaryData::zeros(&g)),
    };
    observations_from_noisy(cfg, &noisy)
}

#[derive(Serialize, Deserialize)]
struct InversionMeta {
    #[serde(flatten)]
    reconstruction: ReconstructionMeta,
    stop: StopReason,
    max_constraint_residual: f64,
}

pub fn invert(args: &ConfigArgs) -> Result<()> {
    let cfg = load(args)?;
    let obs = read_observations(&cfg)?;
    let run = run_inversion(&cfg.inversion, &obs)?;
    let r = &run.reconstruction;
    let trace = &run.minimized.trace;
    let meta = InversionMeta {
        reconstruction: r.meta.clone(),
        stop: trace.stop,
        max_constraint_residual: run.minimized.max_constraint_residual,
    };
    let archive = Archive::create(&dir(&cfg, INVERSION), &cfg, &meta)?;
    archive.write_field("coefficients.sirf", &FieldFile::from_spatial(&[&r.beta, &r.gamma])?)?;
    archive.write_field("rho.sirf", &FieldFile::from_space_time(&r.rho.each_ref())?)?;
    let w = &run.minimized.w;
    let wg = w.grid();
    let dims = [6, wg.nt() + 1, wg.ny() + 1, wg.nx() + 1];
    let domain = [wg.a(), wg.b(), wg.half_width(), wg.t_final()];
    archive.write_field("w.sirf", &FieldFile::new(dims, domain, w.values().to_vec())?)?;
    write_with(&archive, "trace.csv", |b| trace.write_csv(b))?;
    let last = trace.last();
    println!(
        "inversion: {} ({:?} after {} iterations, stationarity {:e})",
        archive.dir().display(),
        trace.stop,
        last.iter,
        last.grad_norm
    );
    if !trace.converged() {
        return Err(Error::NotConverged {
            reason: format!("{:?}", trace.stop),
            iterations: last.iter,
            grad_norm: last.grad_norm,
        });
    }
    Ok(())
}

fn read_truth(cfg: &RunConfig) -> Result<GroundTruth> {
    let (fields, beta, gamma) = read_forward(cfg)?;
    truth_from_fields(cfg, &fields, &beta, &gamma)
}

pub fn evaluate(args: &ConfigArgs) -> Result<()> {
    let cfg = load(args)?;
    let truth = read_truth(&cfg)?;
    let archive = open_stage(&cfg, INVERSION)?;
    let g = cfg.coarse_grid()?;
    let meta: InversionMeta = archive.read_json("meta.json")?;
    let [beta, gamma]: [_; 2] = archive
        .read_field("coefficients.sirf")?
        .to_spatial(&g)?
        .try_into()
        .map_err(|_| Error::ShapeMismatch("coefficients.sirf must hold two components".into()))?;
    let rho = archive
        .read_field("rho.sirf")?
        .to_space_time(&g)?
        .try_into()
        .map_err(|_| Error::ShapeMismatch("rho.sirf must hold three components".into()))?;
    let recon = Reconstruction {
        beta,
        gamma,
        rho,
        meta: meta.reconstruction,
    };
    let m = error_metrics(&recon, &truth, cfg.inversion.metric_eta)?;
    archive.write_json("metrics.json", &m)?;
    write_with(&archive, "metrics.csv", |b| m.write_csv(b))?;
    println!("beta  relative L2 {:.6e}  max {:.6e}", m.beta.l2, m.beta.max);
    println!("gamma relative L2 {:.6e}  max {:.6e}", m.gamma.l2, m.gamma.max);
    Ok(())
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    lambdas: &'a [f64],
    failures: usize,
}

pub fn sweep_lambda(args: &ConfigArgs, lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Config("--lambdas is empty".into()));
    }
    let cfg = load(args)?;
    let truth = read_truth(&cfg)?;
    let obs = read_observations(&cfg)?;
    let rows = lambda_sweep(&obs, &truth, &cfg.inversion, lambdas);
    let meta = SweepMeta {
        lambdas,
        failures: rows.iter().filter(|r| r.outcome.is_err()).count(),
    };
    let archive = Archive::create(&dir(&cfg, "sweep"), &cfg, &meta)?;
    write_with(&archive, "sweep.csv", |b| write_sweep_csv(&rows, b))?;
    write_sweep_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeMeta<'a> {
    probe: &'a str,
    seed: u64,
}

pub fn probe(probe: Probe) -> Result<()> {
    match probe {
        Probe::Volterra {
            cfg,
            lambdas,
            fields,
            seed,
        } => {
            let cfg = load(&cfg)?;
            let g = cfg.coarse_grid()?;
            let mut csv = String::from("field,lambda,rho,lambda_rho\n");
            for n in 0..fields {
                let f = random_smooth_field(&g, seed.wrapping_add(n as u64));
                for r in volterra_probe(&f, &lambdas)? {
                    csv.push_str(&format!("{n},{},{:e},{:e}\n", r.lambda, r.rho, r.lambda_rho));
                }
            }
            let archive = Archive::create(&dir(&cfg, "probe"), &cfg, &ProbeMeta { probe: "volterra", seed })?;
            archive.write_text("volterra.csv", &csv)?;
            print!("{csv}");
        }
        Probe::Convexity {
            cfg,
            trials,
            points,
            radius,
            seed,
        } => {
            let cfg = load(&cfg)?;
            let obs = read_observations(&cfg)?;
            let functional = Functional::new(&obs, carleman_params(&cfg.inversion, &obs))?;
            let constraints = ConstraintSet::from_observations(&obs);
            let report = convexity_probe(
                &functional,
                &constraints,
                &ConvexityConfig {
                    trials,
                    points,
                    radius,
                    seed,
                    ..ConvexityConfig::default()
                },
            )?;
            let archive = Archive::create(&dir(&cfg, "probe"), &cfg, &ProbeMeta { probe: "convexity", seed })?;
            write_with(&archive, "convexity.csv", |b| report.write_csv(b))?;
            println!("{} of {} segments violate convexity", report.violations, report.trials.len());
        }
    }
    Ok(())
}

pub fn export(input: &Path, format: Format, time: Option<f64>, output: Option<&Path>) -> Result<()> {
    let bytes = fs::read(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
    let mut field = if bytes.starts_with(MAGIC) {
        FieldFile::from_bytes(&bytes, input)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: input.to_path_buf(),
            reason: "neither a field file nor CSV text".into(),
        })?;
        FieldFile::from_csv(&text, input)?
    };
    if let Some(t) = time {
        field = field.time_slice(field.level_at(t)?)?;
    }
    let out = match format {
        Format::Csv => field.to_csv().into_bytes(),
        Format::Vtk => field.to_vtk().into_bytes(),
        Format::Sirf => field.to_bytes(),
    };
    match output {
        Some(p) => fs::write(p, out)?,
        None => std::io::stdout().lock().write_all(&out)?,
    }
    Ok(())
}
