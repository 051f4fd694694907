//! Coarse projective integration: short replica-averaged micro bursts, a
//! least-squares slope for every active coefficient, and a forward-Euler jump.

use crate::basis::{is_suppressed_mode, CoarseState, LegendreBasis};
use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::stepper::{record_replicas, StepperConfig};

/// Cycle layout in micro steps: `heal` discarded steps, `record` recorded
/// steps, then a projective jump of `horizon` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpiSchedule {
    pub heal: usize,
    pub record: usize,
    pub horizon: usize,
}

impl CpiSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.record < 2 {
            return invalid("at least two recorded steps are needed for a slope");
        }
        Ok(())
    }

    pub fn micro_steps(&self) -> usize {
        self.heal + self.record
    }

    pub fn cycle_steps(&self) -> usize {
        self.heal + self.record + self.horizon
    }

    /// Simulated time per unit of micro-simulation time.
    pub fn speedup(&self) -> f64 {
        self.cycle_steps() as f64 / self.micro_steps() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// Least-squares fitted value at the last recorded time.
    Fitted,
    /// Last recorded sample.
    Raw,
}

impl Anchor {
    pub fn name(self) -> &'static str {
        match self {
            Anchor::Fitted => "fitted",
            Anchor::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fitted" => Ok(Anchor::Fitted),
            "raw" => Ok(Anchor::Raw),
            _ => invalid(format!("unknown anchor `{s}` (expected fitted or raw)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: Vec<f64>,
    /// Fitted value at the last recorded time.
    pub endpoint: Vec<f64>,
    /// Last recorded sample.
    pub last: Vec<f64>,
}

/// Ordinary least-squares line through each coefficient's series.
/// `series[k]` holds every coefficient at time `k·dt`.
pub fn fit_slope(series: &[Vec<f64>], dt: f64) -> Result<SlopeFit> {
    let n = series.len();
    if n < 2 {
        return invalid("slope fit needs at least two samples");
    }
    let k = series[0].len();
    if series.iter().any(|s| s.len() != k) {
        return invalid("series samples have different lengths");
    }
    let t_mean = 0.5 * (n - 1) as f64 * dt;
    let sxx: f64 = (0..n).map(|i| (i as f64 * dt - t_mean).powi(2)).sum();
    let t_last = (n - 1) as f64 * dt;
    let mut slope = vec![0.0; k];
    let mut endpoint = vec![0.0; k];
    for j in 0..k {
        let mean = series.iter().map(|s| s[j]).sum::<f64>() / n as f64;
        let sxy: f64 = series
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64 * dt - t_mean) * (s[j] - mean))
            .sum();
        slope[j] = sxy / sxx;
        endpoint[j] = mean + slope[j] * (t_last - t_mean);
    }
    Ok(SlopeFit {
        slope,
        endpoint,
        last: series[n - 1].clone(),
    })
}

/// Forward-Euler extrapolation over `span` seconds from the chosen anchor.
pub fn project_forward(
    state: &CoarseState,
    fit: &SlopeFit,
    span: f64,
    anchor: Anchor,
) -> Result<CoarseState> {
    let width = state.order() + 1;
    if fit.slope.len() != state.beta.len() * width {
        return invalid("slope vector does not match the state's shape");
    }
    let base = match anchor {
        Anchor::Fitted => &fit.endpoint,
        Anchor::Raw => &fit.last,
    };
    let flat: Vec<f64> = base.iter().zip(&fit.slope).map(|(b, s)| b + span * s).collect();
    CoarseState::new(flat.chunks(width).map(|c| c.to_vec()).collect(), state.orientation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpiConfig {
    pub stepper: StepperConfig,
    pub schedule: CpiSchedule,
    pub anchor: Anchor,
    pub suppress_even: bool,
    /// Relative monotone-repair magnitude above which a warning is logged.
    pub repair_bound: f64,
}

#[derive(Clone, Debug)]
pub struct CpiRun {
    /// (micro step count reached, state) after every cycle, starting with the
    /// initial state at step 0.
    pub trajectory: Vec<(usize, CoarseState)>,
    pub snapshots: Vec<(usize, CoarseState)>,
    pub warnings: Vec<String>,
    /// Micro steps actually simulated per replica.
    pub micro_steps: usize,
    pub simulated_steps: usize,
    pub active_coefficients: usize,
}

impl CpiRun {
    pub fn speedup(&self) -> f64 {
        self.simulated_steps as f64 / self.micro_steps as f64
    }
}

fn suppress(state: &mut CoarseState, on: bool) {
    if on {
        state.suppress_even_modes();
    }
}

/// Runs projective cycles from step 0 to `total_steps`, shortening the jump
/// (or the whole cycle) where needed so that every snapshot step is hit
/// exactly. Cycle `c` draws from `stream.fork(c)`.
pub fn cpi_run(
    initial: &CoarseState,
    cfg: &CpiConfig,
    basis: &LegendreBasis,
    total_steps: usize,
    snapshot_steps: &[usize],
    stream: RngStream,
) -> Result<CpiRun> {
    cfg.schedule.validate()?;
    cfg.stepper.validate()?;
    let sched = cfg.schedule;
    let dt = cfg.stepper.sde.dt;
    let mut snaps: Vec<usize> = snapshot_steps.iter().copied().filter(|&s| s <= total_steps).collect();
    snaps.sort_unstable();
    snaps.dedup();

    let mut state = initial.clone();
    suppress(&mut state, cfg.suppress_even);
    let mut t = 0;
    let mut run = CpiRun {
        trajectory: vec![(0, state.clone())],
        snapshots: Vec::new(),
        warnings: Vec::new(),
        micro_steps: 0,
        simulated_steps: 0,
        active_coefficients: state.active_count(cfg.suppress_even),
    };
    let mut next_snap = 0;
    if snaps.first() == Some(&0) {
        run.snapshots.push((0, state.clone()));
        next_snap = 1;
    }
    let mut cycle = 0u64;
    while t < total_steps {
        let target = snaps.get(next_snap).copied().unwrap_or(total_steps);
        let room = target - t;
        let cycle_stream = stream.fork(cycle);
        let (mut next, repair, micro) = if room >= sched.micro_steps() {
            let times: Vec<usize> = (sched.heal + 1..=sched.micro_steps()).collect();
            let rec = record_replicas(&state, &cfg.stepper, basis, cycle_stream, &times)?;
            let series: Vec<Vec<f64>> = rec.states.iter().map(|s| s.flat()).collect();
            let mut fit = fit_slope(&series, dt)?;
            if cfg.suppress_even {
                let width = state.order() + 1;
                for (i, s) in fit.slope.iter_mut().enumerate() {
                    if is_suppressed_mode(i % width) {
                        *s = 0.0;
                    }
                }
            }
            let jump = sched.horizon.min(room - sched.micro_steps());
            let next = project_forward(&state, &fit, jump as f64 * dt, cfg.anchor)?;
            (next, rec.repair, sched.micro_steps() + jump)
        } else {
            let rec = record_replicas(&state, &cfg.stepper, basis, cycle_stream, &[room])?;
            (rec.states[0].clone(), rec.repair, room)
        };
        suppress(&mut next, cfg.suppress_even);
        if repair > cfg.repair_bound {
            run.warnings.push(format!(
                "cycle {cycle} (step {t}): monotone repair {repair:.3e} exceeds bound {:.3e}",
                cfg.repair_bound
            ));
        }
        run.micro_steps += micro.min(sched.micro_steps()).min(room);
        run.simulated_steps += micro;
        t += micro;
        state = next;
        run.trajectory.push((t, state.clone()));
        if t == target && next_snap < snaps.len() {
            run.snapshots.push((t, state.clone()));
            next_snap += 1;
        }
        cycle += 1;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{Interp, Orientation};
    use crate::sde::{Model, SdeParams};

    #[test]
    fn slope_of_exact_line() {
        let s = vec![vec![0.0], vec![1.0], vec![2.0]];
        let f = fit_slope(&s, 1.0).unwrap();
        assert!((f.slope[0] - 1.0).abs() < 1e-15);
        assert!((f.endpoint[0] - 2.0).abs() < 1e-15);
        let c = fit_slope(&[vec![4.0], vec![4.0], vec![4.0]], 0.5).unwrap();
        assert_eq!(c.slope, vec![0.0]);
        assert!(fit_slope(&[vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn slope_matches_normal_equations() {
        let ys = [0.0, 1.1, 1.9, 3.05];
        let s: Vec<Vec<f64>> = ys.iter().map(|&v| vec![v]).collect();
        let f = fit_slope(&s, 1.0).unwrap();
        // t = 0..3: Σt = 6, Σt² = 14, Σy = 6.05, Σty = 14.05
        let n = 4.0;
        let b = (n * 14.05 - 6.0 * 6.05) / (n * 14.0 - 36.0);
        let a = (6.05 - b * 6.0) / n;
        assert!((f.slope[0] - b).abs() < 1e-14);
        assert!((f.endpoint[0] - (a + 3.0 * b)).abs() < 1e-14);
        let f2 = fit_slope(&s, 0.01).unwrap();
        assert!((f2.slope[0] - b / 0.01).abs() < 1e-10);
    }

    fn two_row(v: f64) -> CoarseState {
        CoarseState::new(vec![vec![v, 1.0], vec![0.0, 2.0]], Orientation::MARGINAL_Y).unwrap()
    }

    #[test]
    fn projection_cases() {
        let s = two_row(0.0);
        let series: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, 1.0, 0.5, 2.0]).collect();
        let f = fit_slope(&series, 0.1).unwrap();
        let p = project_forward(&s, &f, 0.0, Anchor::Fitted).unwrap();
        assert_eq!(p.flat(), f.endpoint);
        let p = project_forward(&s, &f, 0.3, Anchor::Fitted).unwrap();
        assert!((p.beta[0][0] - 7.0).abs() < 1e-12);
        assert_eq!(p.beta[1], vec![0.5, 2.0]);
        let zero = SlopeFit {
            slope: vec![0.0; 4],
            endpoint: s.flat(),
            last: s.flat(),
        };
        assert_eq!(project_forward(&s, &zero, 5.0, Anchor::Raw).unwrap(), s);
    }

    #[test]
    fn schedule_bookkeeping() {
        let s = CpiSchedule {
            heal: 10,
            record: 10,
            horizon: 10,
        };
        assert_eq!(s.speedup(), 1.5);
        assert!(CpiSchedule { heal: 0, record: 1, horizon: 0 }.validate().is_err());
    }

    #[test]
    fn run_hits_snapshots_and_counts_steps() {
        let b = LegendreBasis::new(5);
        let init = CoarseState::from_icdfs(|f| 20.0 * f - 10.0, |f| 20.0 * f - 10.0, 4, Orientation::MARGINAL_Y, &b);
        let cfg = CpiConfig {
            stepper: StepperConfig {
                sde: SdeParams::new(5.0, 0.01, Model::DiffusiveX).unwrap(),
                particles: 200,
                bands: 4,
                order: 5,
                micro_steps: 0,
                replicas: 1,
                interp: Interp::NearestBand,
            },
            schedule: CpiSchedule {
                heal: 2,
                record: 3,
                horizon: 5,
            },
            anchor: Anchor::Fitted,
            suppress_even: true,
            repair_bound: 1.0,
        };
        let run = cpi_run(&init, &cfg, &b, 30, &[10, 20, 30], RngStream::new(5, 0)).unwrap();
        let steps: Vec<usize> = run.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(steps, vec![10, 20, 30]);
        assert_eq!(run.simulated_steps, 30);
        assert_eq!(run.micro_steps, 15);
        assert_eq!(run.speedup(), 2.0);
        assert_eq!(run.active_coefficients, 20);
        for (_, s) in &run.trajectory {
            assert_eq!(s.beta[2][2], 0.0);
            assert_eq!(s.beta[0][4], 0.0);
        }
        let again = cpi_run(&init, &cfg, &b, 30, &[10, 20, 30], RngStream::new(5, 0)).unwrap();
        assert_eq!(again.snapshots, run.snapshots);
    }
}
