//! Run configuration. The file format is sectioned `key = value` text (a
//! TOML subset); a manifest is itself a valid config, since the sections
//! `manifest`, `results`, `timing`, `outputs` and `warnings` are skipped on
//! load.
//!
//! ```text
//! [run]       seed
//! [sde]       diffusion (cm/s^½), dt (s), model ("diffusive-x" | "diffusive-xy")
//! [coarse]    particles, replicas, bands, order, interp, orientation ("marginal-x" | "marginal-y")
//! [report]    lift_particles, diagonal_points, diagonal_half_widths (cm)
//! [simulate]  half_width (cm), snapshots
//! [cpi]       heal, record, horizon, anchor, suppress_even, repair_bound, total_steps, snapshots
//! [cdr]       half_width, template_e (cm), template_m, p, micro_steps, max_iterations,
//!             tolerance, consecutive, track, track_particles, track_heal, track_checkpoints
//! [probe]     sigma (cm), scale, points, burst_steps, particles, replicas, p0,
//!             max_iterations, h_p, tolerance ("none" or a number), burn_in, max_step, noise_floor
//! [analytic]  diffusion, t0 (s), c (1/s), points
//! ```

use eqfree::cpi::Anchor;
use eqfree::observables::{Axis, Interp, Orientation};
use eqfree::sde::Model;
use eqfree::{Error, Result};
use toml::{Table, Value};

/// Sections carried by manifests that do not configure anything.
pub const IGNORED_SECTIONS: [&str; 5] = ["manifest", "results", "timing", "outputs", "warnings"];

#[derive(Clone, Debug, PartialEq)]
pub struct SdeSection {
    pub diffusion: f64,
    pub dt: f64,
    pub model: Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseSection {
    pub particles: usize,
    pub replicas: usize,
    pub bands: usize,
    pub order: usize,
    pub interp: Interp,
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSection {
    /// Particles lifted from a coarse state to report its CDF.
    pub lift_particles: usize,
    pub diagonal_points: usize,
    /// One per snapshot.
    pub diagonal_half_widths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSection {
    pub half_width: f64,
    pub snapshots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpiSection {
    pub heal: usize,
    pub record: usize,
    pub horizon: usize,
    pub anchor: Anchor,
    pub suppress_even: bool,
    pub repair_bound: f64,
    pub total_steps: usize,
    pub snapshots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdrSection {
    pub half_width: f64,
    pub template_e: f64,
    pub template_m: f64,
    pub p: f64,
    pub micro_steps: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub consecutive: usize,
    pub track: bool,
    pub track_particles: usize,
    pub track_heal: usize,
    pub track_checkpoints: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    pub sigma: f64,
    pub scale: f64,
    pub points: [(f64, f64); 2],
    pub burst_steps: usize,
    pub particles: usize,
    pub replicas: usize,
    pub p0: f64,
    pub max_iterations: usize,
    pub h_p: f64,
    pub tolerance: Option<f64>,
    pub burn_in: usize,
    pub max_step: f64,
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticSection {
    pub diffusion: f64,
    pub t0: f64,
    pub c: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sde: SdeSection,
    pub coarse: CoarseSection,
    pub report: ReportSection,
    pub simulate: SimulateSection,
    pub cpi: CpiSection,
    pub cdr: CdrSection,
    pub probe: ProbeSection,
    pub analytic: AnalyticSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sde: SdeSection {
                diffusion: 5.0,
                dt: 0.01,
                model: Model::DiffusiveX,
            },
            coarse: CoarseSection {
                particles: 2000,
                replicas: 1,
                bands: 20,
                order: 5,
                interp: Interp::NearestBand,
                orientation: Orientation::MARGINAL_Y,
            },
            report: ReportSection {
                lift_particles: 20_000,
                diagonal_points: 41,
                diagonal_half_widths: vec![40.0, 100.0, 180.0],
            },
            simulate: SimulateSection {
                half_width: 10.0,
                snapshots: vec![300, 600, 900],
            },
            cpi: CpiSection {
                heal: 10,
                record: 10,
                horizon: 10,
                anchor: Anchor::Fitted,
                suppress_even: true,
                repair_bound: 0.05,
                total_steps: 900,
                snapshots: vec![300, 600, 900],
            },
            cdr: CdrSection {
                half_width: 10.0,
                template_e: -2.832,
                template_m: 0.4,
                p: 3.0,
                micro_steps: 100,
                max_iterations: 30,
                tolerance: 1e-2,
                consecutive: 3,
                track: false,
                track_particles: 40_000_000,
                track_heal: 1000,
                track_checkpoints: vec![100, 200, 300],
            },
            probe: ProbeSection {
                sigma: 4.0,
                scale: 2.0,
                points: [(-2.0, -2.0), (3.0, 3.0)],
                burst_steps: 3,
                particles: 9000,
                replicas: 5000,
                p0: 5.0,
                max_iterations: 9,
                h_p: 0.05,
                tolerance: None,
                burn_in: 3,
                max_step: 3.0,
                noise_floor: 2.0,
            },
            analytic: AnalyticSection {
                diffusion: 5.0,
                t0: 0.0,
                c: 0.2,
                points: 20,
            },
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn float(v: &Value, path: &str) -> Result<f64> {
    let x = match v {
        Value::Float(f) => *f,
        Value::Integer(i) => *i as f64,
        _ => return config_err(format!("`{path}` must be a number")),
    };
    if x.is_finite() {
        Ok(x)
    } else {
        config_err(format!("`{path}` must be finite"))
    }
}

fn count(v: &Value, path: &str) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => config_err(format!("`{path}` must be a non-negative integer")),
    }
}

fn flag(v: &Value, path: &str) -> Result<bool> {
    v.as_bool()
        .map_or_else(|| config_err(format!("`{path}` must be true or false")), Ok)
}

fn text<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str()
        .map_or_else(|| config_err(format!("`{path}` must be a string")), Ok)
}

fn list<'a>(v: &'a Value, path: &str) -> Result<&'a [Value]> {
    v.as_array()
        .map_or_else(|| config_err(format!("`{path}` must be an array")), |a| Ok(a.as_slice()))
}

fn counts(v: &Value, path: &str) -> Result<Vec<usize>> {
    list(v, path)?.iter().map(|e| count(e, path)).collect()
}

fn floats(v: &Value, path: &str) -> Result<Vec<f64>> {
    list(v, path)?.iter().map(|e| float(e, path)).collect()
}

fn point_pair(v: &Value, path: &str) -> Result<[(f64, f64); 2]> {
    let pts = list(v, path)?
        .iter()
        .map(|p| match floats(p, path)?.as_slice() {
            [x, y] => Ok((*x, *y)),
            _ => config_err(format!("`{path}` entries must be [x, y] pairs")),
        })
        .collect::<Result<Vec<_>>>()?;
    match pts.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => config_err(format!("`{path}` must hold exactly two points")),
    }
}

/// Wraps library parse errors (which name the bad value) with the key.
fn parsed<T>(r: Result<T>, path: &str) -> Result<T> {
    r.map_err(|e| Error::Config(format!("`{path}`: {e}")))
}

fn orientation_name(o: Orientation) -> &'static str {
    match o.marginal_axis {
        Axis::X => "marginal-x",
        Axis::Y => "marginal-y",
    }
}

fn parse_orientation(s: &str, path: &str) -> Result<Orientation> {
    match s {
        "marginal-x" => Ok(Orientation::MARGINAL_X),
        "marginal-y" => Ok(Orientation::MARGINAL_Y),
        _ => config_err(format!("`{path}`: unknown orientation `{s}` (marginal-x, marginal-y)")),
    }
}

impl RunConfig {
    /// Parses config text and applies it on top of `self`.
    pub fn overlay_text(&mut self, src: &str) -> Result<()> {
        let table: Table = src
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config does not parse: {}", e.message())))?;
        self.overlay(&table)
    }

    pub fn overlay(&mut self, table: &Table) -> Result<()> {
        for (section, value) in table {
            if IGNORED_SECTIONS.contains(&section.as_str()) {
                continue;
            }
            let Value::Table(keys) = value else {
                return config_err(format!("unknown key `{section}`: settings belong in a section"));
            };
            for (key, v) in keys {
                self.set(section, key, v)?;
            }
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &Value) -> Result<()> {
        let path = format!("{section}.{key}");
        let p = path.as_str();
        match (section, key) {
            ("run", "seed") => match v {
                Value::Integer(i) if *i >= 0 => self.seed = *i as u64,
                _ => return config_err(format!("`{p}` must be a non-negative integer")),
            },
            ("sde", "diffusion") => self.sde.diffusion = float(v, p)?,
            ("sde", "dt") => self.sde.dt = float(v, p)?,
            ("sde", "model") => self.sde.model = parsed(Model::parse(text(v, p)?), p)?,
            ("coarse", "particles") => self.coarse.particles = count(v, p)?,
            ("coarse", "replicas") => self.coarse.replicas = count(v, p)?,
            ("coarse", "bands") => self.coarse.bands = count(v, p)?,
            ("coarse", "order") => self.coarse.order = count(v, p)?,
            ("coarse", "interp") => self.coarse.interp = parsed(Interp::parse(text(v, p)?), p)?,
            ("coarse", "orientation") => self.coarse.orientation = parse_orientation(text(v, p)?, p)?,
            ("report", "lift_particles") => self.report.lift_particles = count(v, p)?,
            ("report", "diagonal_points") => self.report.diagonal_points = count(v, p)?,
            ("report", "diagonal_half_widths") => self.report.diagonal_half_widths = floats(v, p)?,
            ("simulate", "half_width") => self.simulate.half_width = float(v, p)?,
            ("simulate", "snapshots") => self.simulate.snapshots = counts(v, p)?,
            ("cpi", "heal") => self.cpi.heal = count(v, p)?,
            ("cpi", "record") => self.cpi.record = count(v, p)?,
            ("cpi", "horizon") => self.cpi.horizon = count(v, p)?,
            ("cpi", "anchor") => self.cpi.anchor = parsed(Anchor::parse(text(v, p)?), p)?,
            ("cpi", "suppress_even") => self.cpi.suppress_even = flag(v, p)?,
            ("cpi", "repair_bound") => self.cpi.repair_bound = float(v, p)?,
            ("cpi", "total_steps") => self.cpi.total_steps = count(v, p)?,
            ("cpi", "snapshots") => self.cpi.snapshots = counts(v, p)?,
            ("cdr", "half_width") => self.cdr.half_width = float(v, p)?,
            ("cdr", "template_e") => self.cdr.template_e = float(v, p)?,
            ("cdr", "template_m") => self.cdr.template_m = float(v, p)?,
            ("cdr", "p") => self.cdr.p = float(v, p)?,
            ("cdr", "micro_steps") => self.cdr.micro_steps = count(v, p)?,
            ("cdr", "max_iterations") => self.cdr.max_iterations = count(v, p)?,
            ("cdr", "tolerance") => self.cdr.tolerance = float(v, p)?,
            ("cdr", "consecutive") => self.cdr.consecutive = count(v, p)?,
            ("cdr", "track") => self.cdr.track = flag(v, p)?,
            ("cdr", "track_particles") => self.cdr.track_particles = count(v, p)?,
            ("cdr", "track_heal") => self.cdr.track_heal = count(v, p)?,
            ("cdr", "track_checkpoints") => self.cdr.track_checkpoints = counts(v, p)?,
            ("probe", "sigma") => self.probe.sigma = float(v, p)?,
            ("probe", "scale") => self.probe.scale = float(v, p)?,
            ("probe", "points") => self.probe.points = point_pair(v, p)?,
            ("probe", "burst_steps") => self.probe.burst_steps = count(v, p)?,
            ("probe", "particles") => self.probe.particles = count(v, p)?,
            ("probe", "replicas") => self.probe.replicas = count(v, p)?,
            ("probe", "p0") => self.probe.p0 = float(v, p)?,
            ("probe", "max_iterations") => self.probe.max_iterations = count(v, p)?,
            ("probe", "h_p") => self.probe.h_p = float(v, p)?,
            ("probe", "tolerance") => {
                self.probe.tolerance = match v {
                    Value::String(s) if s == "none" => None,
                    _ => Some(float(v, p)?),
                }
            }
            ("probe", "burn_in") => self.probe.burn_in = count(v, p)?,
            ("probe", "max_step") => self.probe.max_step = float(v, p)?,
            ("probe", "noise_floor") => self.probe.noise_floor = float(v, p)?,
            ("analytic", "diffusion") => self.analytic.diffusion = float(v, p)?,
            ("analytic", "t0") => self.analytic.t0 = float(v, p)?,
            ("analytic", "c") => self.analytic.c = float(v, p)?,
            ("analytic", "points") => self.analytic.points = count(v, p)?,
            _ => return config_err(format!("unknown key `{path}`")),
        }
        Ok(())
    }

    /// Every setting, as sections ready to render.
    pub fn to_table(&self) -> Table {
        fn int(v: usize) -> Value {
            Value::Integer(v as i64)
        }
        fn ints(v: &[usize]) -> Value {
            Value::Array(v.iter().map(|x| int(*x)).collect())
        }
        fn fl(v: &[f64]) -> Value {
            Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
        }
        fn section(entries: Vec<(&str, Value)>) -> Value {
            Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
        }
        let s = Value::String;
        let mut t = Table::new();
        t.insert("run".into(), section(vec![("seed", Value::Integer(self.seed as i64))]));
        t.insert(
            "sde".into(),
            section(vec![
                ("diffusion", Value::Float(self.sde.diffusion)),
                ("dt", Value::Float(self.sde.dt)),
                ("model", s(self.sde.model.name().into())),
            ]),
        );
        let c = &self.coarse;
        t.insert(
            "coarse".into(),
            section(vec![
                ("particles", int(c.particles)),
                ("replicas", int(c.replicas)),
                ("bands", int(c.bands)),
                ("order", int(c.order)),
                ("interp", s(c.interp.name().into())),
                ("orientation", s(orientation_name(c.orientation).into())),
            ]),
        );
        let r = &self.report;
        t.insert(
            "report".into(),
            section(vec![
                ("lift_particles", int(r.lift_particles)),
                ("diagonal_points", int(r.diagonal_points)),
                ("diagonal_half_widths", fl(&r.diagonal_half_widths)),
            ]),
        );
        let m = &self.simulate;
        t.insert(
            "simulate".into(),
            section(vec![
                ("half_width", Value::Float(m.half_width)),
                ("snapshots", ints(&m.snapshots)),
            ]),
        );
        let c = &self.cpi;
        t.insert(
            "cpi".into(),
            section(vec![
                ("heal", int(c.heal)),
                ("record", int(c.record)),
                ("horizon", int(c.horizon)),
                ("anchor", s(c.anchor.name().into())),
                ("suppress_even", Value::Boolean(c.suppress_even)),
                ("repair_bound", Value::Float(c.repair_bound)),
                ("total_steps", int(c.total_steps)),
                ("snapshots", ints(&c.snapshots)),
            ]),
        );
        let d = &self.cdr;
        t.insert(
            "cdr".into(),
            section(vec![
                ("half_width", Value::Float(d.half_width)),
                ("template_e", Value::Float(d.template_e)),
                ("template_m", Value::Float(d.template_m)),
                ("p", Value::Float(d.p)),
                ("micro_steps", int(d.micro_steps)),
                ("max_iterations", int(d.max_iterations)),
                ("tolerance", Value::Float(d.tolerance)),
                ("consecutive", int(d.consecutive)),
                ("track", Value::Boolean(d.track)),
                ("track_particles", int(d.track_particles)),
                ("track_heal", int(d.track_heal)),
                ("track_checkpoints", ints(&d.track_checkpoints)),
            ]),
        );
        let p = &self.probe;
        t.insert(
            "probe".into(),
            section(vec![
                ("sigma", Value::Float(p.sigma)),
                ("scale", Value::Float(p.scale)),
                ("points", Value::Array(p.points.iter().map(|(x, y)| fl(&[*x, *y])).collect())),
                ("burst_steps", int(p.burst_steps)),
                ("particles", int(p.particles)),
                ("replicas", int(p.replicas)),
                ("p0", Value::Float(p.p0)),
                ("max_iterations", int(p.max_iterations)),
                ("h_p", Value::Float(p.h_p)),
                ("tolerance", p.tolerance.map_or_else(|| s("none".into()), Value::Float)),
                ("burn_in", int(p.burn_in)),
                ("max_step", Value::Float(p.max_step)),
                ("noise_floor", Value::Float(p.noise_floor)),
            ]),
        );
        let a = &self.analytic;
        t.insert(
            "analytic".into(),
            section(vec![
                ("diffusion", Value::Float(a.diffusion)),
                ("t0", Value::Float(a.t0)),
                ("c", Value::Float(a.c)),
                ("points", int(a.points)),
            ]),
        );
        t
    }

    pub fn to_text(&self) -> String {
        self.to_table().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.probe.tolerance = Some(1e-3);
        c.cdr.template_e = -0.283;
        c.sde.dt = 0.1 + 0.2;
        let mut back = RunConfig::default();
        back.overlay_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let err = c.overlay_text("[cdr]\ntemplate_q = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("cdr.template_q"), "{err}");
        let err = c.overlay_text("[nosuch]\nkey = 1\n").unwrap_err();
        assert!(err.to_string().contains("nosuch.key"), "{err}");
        let err = c.overlay_text("seed = 3\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.overlay_text("[sde]\nmodel = \"ballistic\"\n").unwrap_err().to_string().contains("sde.model"));
        assert!(c.overlay_text("[coarse]\nparticles = -4\n").is_err());
        assert!(c.overlay_text("[probe]\npoints = [[1.0, 2.0]]\n").is_err());
        assert!(c.overlay_text("[sde]\ndt = nan\n").is_err());
        assert!(c.overlay_text("[sde\n").is_err());
    }

    #[test]
    fn manifest_sections_are_skipped() {
        let mut c = RunConfig::default();
        c.overlay_text("[manifest]\nversion = \"x\"\n[timing]\ntotal_s = 1.0\n[run]\nseed = 9\n").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn integers_are_accepted_for_floats() {
        let mut c = RunConfig::default();
        c.overlay_text("[sde]\ndiffusion = 4\n").unwrap();
        assert_eq!(c.sde.diffusion, 4.0);
    }
}
