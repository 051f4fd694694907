//! Stage execution: resolves presets and overrides, runs a stage, writes
//! its CSVs and the manifest.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use eqfree::analytic::{pde_residual, rescaled_stats, residual_points, AnalyticParams, Field};
use eqfree::basis::{CoarseState, LegendreBasis};
use eqfree::cdr::{cdr_fixed_point, similarity_exponent, track_rescaling, CdrConfig, Template, TrackingConfig};
use eqfree::cpi::{cpi_run, CpiConfig, CpiSchedule};
use eqfree::io;
use eqfree::observables::{reporting_mesh, restrict_cdf, uniform_mesh, Axis};
use eqfree::probe::{
    newton_solve_p, sparse_point_warnings, BurstEstimator, NewtonConfig, ProbeConfig, QuadratureOracle,
};
use eqfree::rng::{RngStream, StreamRng};
use eqfree::sde::{moment_summary, step, Model, ParticleEnsemble, SdeParams};
use eqfree::stepper::StepperConfig;
use eqfree::Error;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::config::RunConfig;
use crate::presets::{preset, Stage};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Largest relative PDE residual accepted for the exact fields.
pub const RESIDUAL_LIMIT: f64 = 1e-6;
/// Smallest median relative residual the perturbed field must show.
pub const CONTROL_LIMIT: f64 = 1e-2;
pub const ORACLE_LIMIT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn cfg_fail(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Config(m),
        e => Failure::Config(e.to_string()),
    }
}

fn run_fail(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Config(m),
        Error::Numerical(m) => Failure::Numerical(m),
        e => Failure::Numerical(e.to_string()),
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Config(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Residuals,
    Oracle,
    All,
}

/// Command-line values that take precedence over preset and config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub particles: Option<usize>,
    pub system: Option<Model>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub stage: Stage,
    pub preset: String,
    pub config: RunConfig,
}

/// Preset (or the stage default), then the config text, then overrides.
pub fn resolve(
    stage: Stage,
    preset_name: Option<&str>,
    config_text: Option<&str>,
    ov: &Overrides,
) -> Result<Invocation, Failure> {
    let name = preset_name.unwrap_or(stage.default_preset());
    let (owner, mut config) = preset(name).map_err(cfg_fail)?;
    if owner != stage {
        return bad(format!("preset `{name}` belongs to `{}`, not `{}`", owner.name(), stage.name()));
    }
    if let Some(text) = config_text {
        config.overlay_text(text).map_err(cfg_fail)?;
    }
    if let Some(s) = ov.seed {
        config.seed = s;
    }
    match stage {
        Stage::Probe => {
            if let Some(r) = ov.replicas {
                config.probe.replicas = r;
            }
            if let Some(n) = ov.particles {
                config.probe.particles = n;
            }
        }
        Stage::Analytic => {
            if ov.replicas.is_some() || ov.particles.is_some() {
                return bad("`analytic` takes no --replicas or --particles");
            }
        }
        _ => {
            if let Some(r) = ov.replicas {
                config.coarse.replicas = r;
            }
            if let Some(n) = ov.particles {
                config.coarse.particles = n;
            }
        }
    }
    if let Some(m) = ov.system {
        if stage != Stage::Probe {
            return bad("--system only applies to `probe`");
        }
        config.sde.model = m;
    }
    Ok(Invocation {
        stage,
        preset: name.to_string(),
        config,
    })
}

/// What a stage produced besides its files.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub results: Table,
    pub warnings: Vec<String>,
    pub timing: Vec<(String, f64)>,
    /// (file name, sha256 hex) in write order.
    pub outputs: Vec<(String, String)>,
    pub check_failure: Option<String>,
}

impl Report {
    fn result(&mut self, key: &str, v: impl Into<Value>) {
        self.results.insert(key.to_string(), v.into());
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timing.push((phase.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<(String, PathBuf)>,
}

impl Outputs {
    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> eqfree::Result<()>,
    ) -> Result<(), Failure> {
        let path = self.dir.join(name);
        self.written.push((name.to_string(), path.clone()));
        let file = File::create(&path).map_err(|e| Failure::Config(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(run_fail)?;
        w.flush().map_err(|e| Failure::Numerical(format!("writing {}: {e}", path.display())))
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), Failure> {
        self.write(name, |w| io::write_table(w, header, rows))
    }

    fn discard(&self) {
        for (_, p) in &self.written {
            let _ = fs::remove_file(p);
        }
    }

    fn digests(&self) -> Result<Vec<(String, String)>, Failure> {
        self.written
            .iter()
            .map(|(name, p)| Ok((name.clone(), sha256_file(p)?)))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Numerical(format!("reading {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs one stage into `out_dir`. Check failures still leave the outputs
/// and manifest in place; any other failure removes what was written.
pub fn run(inv: &Invocation, out_dir: &Path, check: Option<Check>) -> Result<Report, Failure> {
    if check.is_some() && inv.stage != Stage::Analytic {
        return bad("--check is only available for `analytic`");
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Config(format!("output directory {}: {e}", out_dir.display())))?;
    let mut outputs = Outputs {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    let mut report = Report::default();
    let start = Instant::now();
    let cfg = &inv.config;
    let status = match inv.stage {
        Stage::Simulate => simulate(cfg, &mut outputs, &mut report),
        Stage::Cpi => cpi(cfg, &mut outputs, &mut report),
        Stage::Cdr => cdr(cfg, &mut outputs, &mut report),
        Stage::Probe => probe(cfg, &mut outputs, &mut report),
        Stage::Analytic => analytic(cfg, check, &mut outputs, &mut report),
    };
    report.timing.push(("total".into(), start.elapsed().as_secs_f64()));
    let finished = status.and_then(|_| {
        report.outputs = outputs.digests()?;
        let manifest = manifest_text(inv, &report);
        outputs.write(MANIFEST_FILE, |w| Ok(w.write_all(manifest.as_bytes())?))
    });
    if let Err(e) = finished {
        outputs.discard();
        return Err(e);
    }
    match &report.check_failure {
        Some(m) => Err(Failure::Check(m.clone())),
        None => Ok(report),
    }
}

/// Config echo plus provenance; loading it with `--config` reproduces the run.
pub fn manifest_text(inv: &Invocation, report: &Report) -> String {
    let mut head = Table::new();
    head.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    head.insert("stage".into(), inv.stage.name().into());
    head.insert("preset".into(), inv.preset.clone().into());
    head.insert("seed".into(), Value::Integer(inv.config.seed as i64));
    let mut t = Table::new();
    t.insert("manifest".into(), Value::Table(head));
    t.insert("results".into(), Value::Table(report.results.clone()));
    t.insert(
        "timing".into(),
        Value::Table(report.timing.iter().map(|(k, v)| (format!("{k}_s"), Value::Float(*v))).collect()),
    );
    t.insert(
        "outputs".into(),
        Value::Table(report.outputs.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect()),
    );
    let mut warn = Table::new();
    warn.insert(
        "messages".into(),
        Value::Array(report.warnings.iter().map(|w| w.clone().into()).collect()),
    );
    t.insert("warnings".into(), Value::Table(warn));
    t.extend(inv.config.to_table());
    t.to_string()
}

fn sde_params(cfg: &RunConfig) -> Result<SdeParams, Failure> {
    SdeParams::new(cfg.sde.diffusion, cfg.sde.dt, cfg.sde.model).map_err(cfg_fail)
}

fn stepper_config(cfg: &RunConfig, micro_steps: usize) -> Result<StepperConfig, Failure> {
    if !(1..=20).contains(&cfg.coarse.order) {
        return bad("`coarse.order` must be between 1 and 20");
    }
    let s = StepperConfig {
        sde: sde_params(cfg)?,
        particles: cfg.coarse.particles,
        bands: cfg.coarse.bands,
        order: cfg.coarse.order,
        micro_steps,
        replicas: cfg.coarse.replicas,
        interp: cfg.coarse.interp,
    };
    s.validate().map_err(cfg_fail)?;
    Ok(s)
}

fn check_snapshots(snaps: &[usize], key: &str, widths: &[f64]) -> Result<(), Failure> {
    if snaps.is_empty() || snaps[0] == 0 || snaps.windows(2).any(|w| w[1] <= w[0]) {
        return bad(format!("`{key}` must be positive and strictly increasing"));
    }
    if widths.len() != snaps.len() || widths.iter().any(|w| *w <= 0.0) {
        return bad(format!(
            "`report.diagonal_half_widths` needs one positive width per entry of `{key}`"
        ));
    }
    Ok(())
}

/// The uniform square start drawn from stream 0, and that stream's
/// generator positioned after it.
fn uniform_start(cfg: &RunConfig, half_width: f64) -> Result<(ParticleEnsemble, StreamRng), Failure> {
    if half_width <= 0.0 {
        return bad("`simulate.half_width` must be positive");
    }
    let mut rng = RngStream::new(cfg.seed, 0).rng();
    let ens = ParticleEnsemble::uniform_square(cfg.coarse.particles, half_width, &mut rng);
    Ok((ens, rng))
}

fn check_lift(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.report.lift_particles < 2 * cfg.coarse.bands {
        return bad("`report.lift_particles` must fill every band with at least two particles");
    }
    Ok(())
}

const DIAGONAL_HEADER: [&str; 4] = ["step", "time_s", "s_cm", "F"];
const MOMENTS_HEADER: [&str; 7] = ["step", "time_s", "mean_x_cm", "mean_y_cm", "std_x_cm", "std_y_cm", "corr"];

/// F(s, s) on evenly spaced s over [−half_width, half_width].
pub fn diagonal(ens: &ParticleEnsemble, half_width: f64, points: usize) -> Vec<(f64, f64)> {
    let n = ens.len() as f64;
    uniform_mesh(-half_width, half_width, points)
        .into_iter()
        .map(|s| {
            let below = ens.x.iter().zip(&ens.y).filter(|(x, y)| **x <= s && **y <= s).count();
            (s, below as f64 / n)
        })
        .collect()
}

/// Snapshot outputs shared by `simulate` and `cpi`.
struct SnapshotWriter {
    dt: f64,
    diagonal: Vec<Vec<f64>>,
    moments: Vec<Vec<f64>>,
}

impl SnapshotWriter {
    fn record(
        &mut self,
        out: &mut Outputs,
        ens: &ParticleEnsemble,
        snap: usize,
        half_width: f64,
        points: usize,
    ) -> Result<(), Failure> {
        let t = snap as f64 * self.dt;
        let (gx, gy) = reporting_mesh(ens);
        let grid = restrict_cdf(ens, &gx, &gy).map_err(run_fail)?;
        out.write(&format!("cdf_t{snap}.csv"), |w| io::write_cdf_grid(w, &grid))?;
        for (s, f) in diagonal(ens, half_width, points) {
            self.diagonal.push(vec![snap as f64, t, s, f]);
        }
        let m = moment_summary(ens).map_err(run_fail)?;
        self.moments.push(vec![
            snap as f64,
            t,
            m.mean_x,
            m.mean_y,
            m.std_x,
            m.std_y,
            m.corr.unwrap_or(f64::NAN),
        ]);
        Ok(())
    }

    fn finish(self, out: &mut Outputs) -> Result<(), Failure> {
        out.table("diagonal.csv", &DIAGONAL_HEADER, &self.diagonal)?;
        if self.moments.iter().flatten().any(|v| v.is_nan()) {
            return Err(Failure::Numerical("degenerate snapshot moments".into()));
        }
        out.table("moments.csv", &MOMENTS_HEADER, &self.moments)
    }
}

fn simulate(cfg: &RunConfig, out: &mut Outputs, rep: &mut Report) -> Result<(), Failure> {
    let stepper = stepper_config(cfg, 0)?;
    let snaps = &cfg.simulate.snapshots;
    check_snapshots(snaps, "simulate.snapshots", &cfg.report.diagonal_half_widths)?;
    let basis = LegendreBasis::new(stepper.order);
    let (mut ens, mut rng) = uniform_start(cfg, cfg.simulate.half_width)?;
    let mut snap_out = SnapshotWriter {
        dt: stepper.sde.dt,
        diagonal: Vec::new(),
        moments: Vec::new(),
    };
    let mut done = 0;
    for (k, &snap) in snaps.iter().enumerate() {
        rep.timed(&format!("evolve_t{snap}"), || step(&mut ens, &stepper.sde, &mut rng, snap - done))
            .map_err(run_fail)?;
        done = snap;
        out.write(&format!("ensemble_t{snap}.csv"), |w| io::write_ensemble(w, &ens))?;
        let state = CoarseState::restrict(&ens, stepper.bands, cfg.coarse.orientation, &basis).map_err(run_fail)?;
        out.write(&format!("coefficients_t{snap}.csv"), |w| io::write_coefficients(w, &state))?;
        snap_out.record(out, &ens, snap, cfg.report.diagonal_half_widths[k], cfg.report.diagonal_points)?;
    }
    rep.result("particles", Value::Integer(ens.len() as i64));
    rep.result("micro_steps", Value::Integer(done as i64));
    snap_out.finish(out)
}

fn coefficient_header(count: usize) -> Vec<String> {
    ["step".to_string(), "time_s".to_string()]
        .into_iter()
        .chain((0..count).map(|k| format!("c{k}")))
        .collect()
}

fn cpi(cfg: &RunConfig, out: &mut Outputs, rep: &mut Report) -> Result<(), Failure> {
    let c = &cfg.cpi;
    let schedule = CpiSchedule {
        heal: c.heal,
        record: c.record,
        horizon: c.horizon,
    };
    schedule.validate().map_err(cfg_fail)?;
    let stepper = stepper_config(cfg, schedule.micro_steps())?;
    check_snapshots(&c.snapshots, "cpi.snapshots", &cfg.report.diagonal_half_widths)?;
    if c.snapshots.last().is_some_and(|s| *s > c.total_steps) {
        return bad("`cpi.snapshots` must not exceed `cpi.total_steps`");
    }
    check_lift(cfg)?;
    let basis = LegendreBasis::new(stepper.order);
    let (start, _) = uniform_start(cfg, cfg.simulate.half_width)?;
    let initial = CoarseState::restrict(&start, stepper.bands, cfg.coarse.orientation, &basis).map_err(run_fail)?;
    let run_cfg = CpiConfig {
        stepper,
        schedule,
        anchor: c.anchor,
        suppress_even: c.suppress_even,
        repair_bound: c.repair_bound,
    };
    let run = rep
        .timed("projective", || {
            cpi_run(&initial, &run_cfg, &basis, c.total_steps, &c.snapshots, RngStream::new(cfg.seed, 1))
        })
        .map_err(run_fail)?;
    let dt = run_cfg.stepper.sde.dt;
    let width = initial.beta.len() * (initial.order() + 1);
    let header = coefficient_header(width);
    let rows: Vec<Vec<f64>> = run
        .trajectory
        .iter()
        .map(|(s, st)| [*s as f64, *s as f64 * dt].into_iter().chain(st.flat()).collect())
        .collect();
    out.table("trajectory.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    let mut snap_out = SnapshotWriter {
        dt,
        diagonal: Vec::new(),
        moments: Vec::new(),
    };
    let lift_stream = RngStream::new(cfg.seed, 2);
    for (k, (snap, state)) in run.snapshots.iter().enumerate() {
        out.write(&format!("coefficients_t{snap}.csv"), |w| io::write_coefficients(w, state))?;
        let mut rng = lift_stream.fork(k as u64).rng();
        let (ens, _) = state
            .lift(&basis, cfg.report.lift_particles, &mut rng, cfg.coarse.interp)
            .map_err(run_fail)?;
        snap_out.record(out, &ens, *snap, cfg.report.diagonal_half_widths[k], cfg.report.diagonal_points)?;
    }
    snap_out.finish(out)?;
    rep.result("speedup", run.speedup());
    rep.result("micro_steps", Value::Integer(run.micro_steps as i64));
    rep.result("simulated_steps", Value::Integer(run.simulated_steps as i64));
    rep.result("active_coefficients", Value::Integer(run.active_coefficients as i64));
    rep.warnings.extend(run.warnings);
    Ok(())
}

fn cdr(cfg: &RunConfig, out: &mut Outputs, rep: &mut Report) -> Result<(), Failure> {
    let d = &cfg.cdr;
    let stepper = stepper_config(cfg, d.micro_steps)?;
    let template = Template::new(d.template_e, d.template_m).map_err(cfg_fail)?;
    if !(d.p > 0.0) || d.half_width <= 0.0 {
        return bad("`cdr.p` and `cdr.half_width` must be positive");
    }
    if d.track && cfg.coarse.orientation.marginal_axis != Axis::X {
        return bad("`cdr.track` needs `coarse.orientation = \"marginal-x\"`");
    }
    check_lift(cfg)?;
    let basis = LegendreBasis::new(stepper.order);
    let hw = d.half_width;
    let initial = CoarseState::from_icdfs(
        |f| 2.0 * hw * f - hw,
        |f| 2.0 * hw * f - hw,
        stepper.bands,
        cfg.coarse.orientation,
        &basis,
    );
    let run_cfg = CdrConfig {
        stepper,
        template,
        p: d.p,
        max_iterations: d.max_iterations,
        tolerance: d.tolerance,
        consecutive: d.consecutive,
    };
    let trace = rep
        .timed("renormalize", || cdr_fixed_point(&initial, &run_cfg, &basis, RngStream::new(cfg.seed, 0)))
        .map_err(run_fail)?;
    out.write("trace.csv", |w| io::write_trace(w, &trace.iterations))?;
    out.write("coefficients.csv", |w| io::write_coefficients(w, &trace.state))?;
    let (marginal, _, _) = trace.state.icdfs(&basis, cfg.coarse.particles).map_err(run_fail)?;
    out.write("marginal_icdf.csv", |w| io::write_icdf(w, &marginal))?;
    let mut rng = RngStream::new(cfg.seed, 2).rng();
    let (ens, _) = trace
        .state
        .lift(&basis, cfg.report.lift_particles, &mut rng, cfg.coarse.interp)
        .map_err(run_fail)?;
    let (gx, gy) = reporting_mesh(&ens);
    let grid = restrict_cdf(&ens, &gx, &gy).map_err(run_fail)?;
    out.write("cdf.csv", |w| io::write_cdf_grid(w, &grid))?;

    let last = trace.last();
    rep.result("converged", trace.converged);
    rep.result("iterations", Value::Integer(trace.iterations.len() as i64));
    let rows: Vec<io::TraceRow> = trace
        .iterations
        .iter()
        .map(|it| io::TraceRow {
            iter: it.iter,
            a_loop: it.a_loop,
            a_cum: it.a_cum,
            std_x: it.moments.std_x,
            std_y: it.moments.std_y,
            corr: it.moments.corr,
        })
        .collect();
    let (sx, sy, rho) = settled_statistics(&rows).map_err(run_fail)?;
    rep.result("std_x", sx);
    rep.result("std_y", sy);
    rep.result("corr", rho);
    rep.result("a_cum", last.a_cum);
    if !trace.converged {
        rep.warnings.push(format!(
            "coefficient change stayed above {} within {} iterations (last {:.3e})",
            d.tolerance,
            trace.iterations.len(),
            last.change
        ));
    }
    if d.track {
        let checkpoints = &d.track_checkpoints;
        if checkpoints.len() < 2 || checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return bad("`cdr.track_checkpoints` needs at least two positive, increasing entries");
        }
        let tracking = TrackingConfig {
            diffusion: cfg.sde.diffusion,
            dt: cfg.sde.dt,
            particles: d.track_particles,
            heal: d.track_heal,
        };
        let samples = rep
            .timed("track", || {
                track_rescaling(&trace.state, &template, &basis, &tracking, checkpoints, RngStream::new(cfg.seed, 3))
            })
            .map_err(run_fail)?;
        let rows: Vec<Vec<f64>> = samples.iter().map(|(t, a)| vec![*t, *a]).collect();
        out.table("tracking.csv", &["t_s", "A"], &rows)?;
        let t1 = samples[1].0;
        let t2 = samples.last().unwrap().0;
        let alpha = similarity_exponent(&samples, t1, t2).map_err(run_fail)?;
        rep.result("alpha", alpha);
    }
    Ok(())
}

/// Mean (σ_X, σ_Y, ρ) over the second half of a renormalization trace.
/// Single iterates carry a few percent of template-quantile noise in σ_Y.
pub fn settled_statistics(rows: &[io::TraceRow]) -> eqfree::Result<(f64, f64, f64)> {
    let tail = &rows[rows.len() / 2..];
    if tail.is_empty() {
        return Err(Error::Invalid("empty trace".into()));
    }
    let n = tail.len() as f64;
    let mut acc = (0.0, 0.0, 0.0);
    for r in tail {
        let Some(c) = r.corr else {
            return Err(Error::Numerical(format!("iteration {} has undefined correlation", r.iter)));
        };
        acc = (acc.0 + r.std_x / n, acc.1 + r.std_y / n, acc.2 + c / n);
    }
    Ok(acc)
}

fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    let p = &cfg.probe;
    ProbeConfig {
        sigma: p.sigma,
        scale: p.scale,
        points: p.points,
        newton: NewtonConfig {
            p0: p.p0,
            max_iterations: p.max_iterations,
            h_p: p.h_p,
            tolerance: p.tolerance,
            burn_in: p.burn_in,
            max_step: p.max_step,
            noise_floor: p.noise_floor,
        },
    }
}

fn probe(cfg: &RunConfig, out: &mut Outputs, rep: &mut Report) -> Result<(), Failure> {
    let pc = probe_config(cfg);
    pc.validate().map_err(cfg_fail)?;
    let p = &cfg.probe;
    if p.burst_steps == 0 || p.particles == 0 || p.replicas == 0 {
        return bad("`probe.burst_steps`, `probe.particles` and `probe.replicas` must be positive");
    }
    let mut est = BurstEstimator {
        sde: sde_params(cfg)?,
        burst_steps: p.burst_steps,
        particles: p.particles,
        replicas: p.replicas,
        stream: RngStream::new(cfg.seed, 0),
    };
    rep.warnings.extend(sparse_point_warnings(&pc, p.particles));
    let result = rep.timed("newton", || newton_solve_p(&pc, &mut est)).map_err(run_fail)?;
    out.write("probe.csv", |w| io::write_probe(w, &result.rows))?;
    rep.result("p", result.p);
    rep.result("a", result.a);
    rep.result("alpha", result.alpha);
    rep.result("converged", result.converged);
    rep.result("model", cfg.sde.model.name());
    rep.warnings.extend(result.warnings);
    Ok(())
}

const RESIDUAL_HEADER: [&str; 7] = ["case", "x_cm", "y_cm", "t_s", "residual", "max_term", "relative"];

/// The three residual cases: exact field/system pairs, then the control.
pub const RESIDUAL_CASES: [(Field, Model); 3] = [
    (Field::SelfSimilar, Model::DiffusiveX),
    (Field::Asymptotic, Model::DiffusiveXY),
    (Field::PerturbedSelfSimilar, Model::DiffusiveX),
];

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn analytic(cfg: &RunConfig, check: Option<Check>, out: &mut Outputs, rep: &mut Report) -> Result<(), Failure> {
    let a = &cfg.analytic;
    let params = AnalyticParams::new(a.diffusion, a.t0, a.c).map_err(cfg_fail)?;
    if a.points == 0 {
        return bad("`analytic.points` must be positive");
    }
    let mut rows = Vec::new();
    let mut relative = [Vec::new(), Vec::new(), Vec::new()];
    rep.timed("residuals", || -> Result<(), Failure> {
        for (case, (field, model)) in RESIDUAL_CASES.iter().enumerate() {
            let mut rng = RngStream::new(cfg.seed, case as u64).rng();
            for (x, y, t) in residual_points(*field, &params, a.points, &mut rng) {
                let r = pde_residual(*field, *model, x, y, t, &params).map_err(run_fail)?;
                relative[case].push(r.relative());
                rows.push(vec![case as f64, x, y, t, r.residual, r.max_term, r.relative()]);
            }
        }
        Ok(())
    })?;
    out.table("residuals.csv", &RESIDUAL_HEADER, &rows)?;
    let (sx, sy, rho) = rescaled_stats(&params);
    out.table("rescaled_stats.csv", &["std_x_cm", "std_y_cm", "corr"], &[vec![sx, sy, rho]])?;
    let worst = |v: &[f64]| v.iter().fold(0.0f64, |m, r| m.max(*r));
    let worst_x = worst(&relative[0]);
    let worst_xy = worst(&relative[1]);
    let control = median(&mut relative[2]);
    rep.result("residual_max_diffusive_x", worst_x);
    rep.result("residual_max_diffusive_xy", worst_xy);
    rep.result("control_median", control);

    let mut oracle = QuadratureOracle {
        diffusion: a.diffusion,
        model: Model::DiffusiveX,
        tolerance: 1e-12,
    };
    let mut pc = probe_config(cfg);
    pc.newton.tolerance = Some(1e-10);
    pc.validate().map_err(cfg_fail)?;
    let solved = rep.timed("oracle", || newton_solve_p(&pc, &mut oracle)).map_err(run_fail)?;
    out.write("oracle_probe.csv", |w| io::write_probe(w, &solved.rows))?;
    rep.result("oracle_p", solved.p);
    rep.result("oracle_a", solved.a);

    let mut failures = Vec::new();
    if matches!(check, Some(Check::Residuals | Check::All)) {
        if !(worst_x < RESIDUAL_LIMIT && worst_xy < RESIDUAL_LIMIT) {
            failures.push(format!(
                "relative residuals {worst_x:.2e} (diffusive-x), {worst_xy:.2e} (diffusive-xy) not below {RESIDUAL_LIMIT:e}"
            ));
        }
        if !(control > CONTROL_LIMIT) {
            failures.push(format!("perturbed-field median residual {control:.2e} not above {CONTROL_LIMIT:e}"));
        }
    }
    if matches!(check, Some(Check::Oracle | Check::All))
        && !((solved.p - 3.0).abs() < ORACLE_LIMIT && (solved.a + 2.0).abs() < ORACLE_LIMIT)
    {
        failures.push(format!("oracle probe gave p = {}, a = {}", solved.p, solved.a));
    }
    if !failures.is_empty() {
        rep.check_failure = Some(failures.join("; "));
    }
    Ok(())
}

/// Every preset in turn, each into its own subdirectory of `out_dir`. The
/// probe presets run for both systems unless `ov.system` picks one.
pub fn run_all(config_text: Option<&str>, ov: &Overrides, out_dir: &Path) -> Result<Vec<(String, Report)>, Failure> {
    let mut plan: Vec<(String, Invocation)> = Vec::new();
    let stage_ov = Overrides {
        system: None,
        ..ov.clone()
    };
    for name in crate::presets::PRESETS {
        let (stage, _) = preset(name).map_err(cfg_fail)?;
        if stage == Stage::Probe {
            let systems = match ov.system {
                Some(m) => vec![m],
                None => vec![Model::DiffusiveX, Model::DiffusiveXY],
            };
            for m in systems {
                let o = Overrides {
                    system: Some(m),
                    ..stage_ov.clone()
                };
                plan.push((format!("{name}-{}", m.name()), resolve(stage, Some(name), config_text, &o)?));
            }
        } else {
            let o = if stage == Stage::Analytic {
                Overrides {
                    seed: ov.seed,
                    ..Overrides::default()
                }
            } else {
                stage_ov.clone()
            };
            plan.push((name.to_string(), resolve(stage, Some(name), config_text, &o)?));
        }
    }
    let mut reports = Vec::new();
    for (dir, inv) in plan {
        let check = (inv.stage == Stage::Analytic).then_some(Check::All);
        let report = run(&inv, &out_dir.join(&dir), check)?;
        reports.push((dir, report));
    }
    Ok(reports)
}
