//! The coarse time-stepper: lift, evolve, restrict, project, averaged over
//! independent replicas.

use rayon::prelude::*;

use crate::basis::{CoarseState, LegendreBasis};
use crate::error::{invalid, Result};
use crate::observables::{IcdfSamples, Interp};
use crate::rng::RngStream;
use crate::sde::{step, SdeParams};

#[derive(Clone, Debug, PartialEq)]
pub struct StepperConfig {
    pub sde: SdeParams,
    /// Particles per replica.
    pub particles: usize,
    pub bands: usize,
    pub order: usize,
    pub micro_steps: usize,
    pub replicas: usize,
    pub interp: Interp,
}

impl StepperConfig {
    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        if self.bands == 0 {
            return invalid("bands must be at least 1");
        }
        if self.particles < 2 * self.bands {
            return invalid(format!(
                "{} particles cannot fill {} bands of at least two",
                self.particles, self.bands
            ));
        }
        if self.replicas == 0 {
            return invalid("replicas must be at least 1");
        }
        Ok(())
    }
}

/// Replica-averaged coefficients at a sequence of recording times.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub states: Vec<CoarseState>,
    /// Standard error of each flattened coefficient, per recording time.
    /// Zero when only one replica ran.
    pub std_errors: Vec<Vec<f64>>,
    /// Largest relative monotone repair needed while lifting.
    pub repair: f64,
}

/// Lifts every replica from `state`, evolves it and restricts after each of
/// the (non-decreasing) micro-step counts in `record_after`. Replica `r` uses
/// stream `stream.replica(r)`; averages accumulate in replica order.
pub fn record_replicas(
    state: &CoarseState,
    cfg: &StepperConfig,
    basis: &LegendreBasis,
    stream: RngStream,
    record_after: &[usize],
) -> Result<Recorded> {
    cfg.validate()?;
    if state.bands() != cfg.bands || state.order() != cfg.order || basis.order() != cfg.order {
        return invalid(format!(
            "state has {} bands of order {}, basis order {}, config expects {} bands of order {}",
            state.bands(),
            state.order(),
            basis.order(),
            cfg.bands,
            cfg.order
        ));
    }
    if record_after.windows(2).any(|w| w[1] < w[0]) {
        return invalid("recording times must be non-decreasing");
    }
    let rows = state.beta.len();
    let width = state.order() + 1;
    let k = rows * width;
    let mut sum = vec![vec![0.0; k]; record_after.len()];
    let mut sum_sq = vec![vec![0.0; k]; record_after.len()];
    let mut repair = 0.0f64;
    let per_replica = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.replica(r).rng();
            let (mut ens, rep) = state.lift(basis, cfg.particles, &mut rng, cfg.interp)?;
            let mut done = 0;
            let mut flats = Vec::with_capacity(record_after.len());
            for &target in record_after {
                step(&mut ens, &cfg.sde, &mut rng, target - done)?;
                done = target;
                flats.push(CoarseState::restrict(&ens, state.bands(), state.orientation, basis)?.flat());
            }
            Ok((flats, rep))
        })
        .collect::<Result<Vec<_>>>()?;
    for (flats, rep) in per_replica {
        repair = repair.max(rep);
        for (j, flat) in flats.iter().enumerate() {
            for (i, v) in flat.iter().enumerate() {
                sum[j][i] += v;
                sum_sq[j][i] += v * v;
            }
        }
    }
    let n = cfg.replicas as f64;
    let mut states = Vec::with_capacity(record_after.len());
    let mut std_errors = Vec::with_capacity(record_after.len());
    for (s, sq) in sum.iter().zip(&sum_sq) {
        let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
        let se = if cfg.replicas > 1 {
            mean.iter()
                .zip(sq)
                .map(|(m, q)| ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
                .collect()
        } else {
            vec![0.0; k]
        };
        let beta = mean.chunks(width).map(|c| c.to_vec()).collect();
        states.push(CoarseState::new(beta, state.orientation)?);
        std_errors.push(se);
    }
    Ok(Recorded {
        states,
        std_errors,
        repair,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: CoarseState,
    pub std_error: Vec<f64>,
    pub repair: f64,
}

/// One application of the coarse time-stepper over `cfg.micro_steps`.
pub fn coarse_step(
    state: &CoarseState,
    cfg: &StepperConfig,
    basis: &LegendreBasis,
    stream: RngStream,
) -> Result<StepOutput> {
    let mut rec = record_replicas(state, cfg, basis, stream, &[cfg.micro_steps])?;
    Ok(StepOutput {
        state: rec.states.pop().unwrap(),
        std_error: rec.std_errors.pop().unwrap(),
        repair: rec.repair,
    })
}

/// Ranks used when comparing reconstructed ICDFs.
pub const COMPARISON_RANKS: usize = 199;

/// Largest sup-norm difference between the reconstructed ICDFs of two states.
pub fn icdf_distance(a: &CoarseState, b: &CoarseState, basis: &LegendreBasis) -> Result<f64> {
    if a.beta.len() != b.beta.len() {
        return invalid("states have different band counts");
    }
    let ranks = IcdfSamples::midpoint_ranks(COMPARISON_RANKS);
    let mut worst = 0.0f64;
    for (ra, rb) in a.beta.iter().zip(&b.beta) {
        let (sa, _) = basis.reconstruct(ra, &ranks)?;
        let (sb, _) = basis.reconstruct(rb, &ranks)?;
        for (x, y) in sa.values().iter().zip(sb.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Sup-norm ICDF error of lift followed by restriction, with no evolution.
pub fn roundtrip_error(
    state: &CoarseState,
    cfg: &StepperConfig,
    basis: &LegendreBasis,
    stream: RngStream,
) -> Result<f64> {
    let cfg = StepperConfig {
        micro_steps: 0,
        ..cfg.clone()
    };
    let out = coarse_step(state, &cfg, basis, stream)?;
    icdf_distance(state, &out.state, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::Orientation;
    use crate::sde::Model;

    fn cfg(replicas: usize, micro_steps: usize, diffusion: f64) -> StepperConfig {
        StepperConfig {
            sde: SdeParams::new(diffusion, 0.01, Model::DiffusiveX).unwrap(),
            particles: 400,
            bands: 4,
            order: 5,
            micro_steps,
            replicas,
            interp: Interp::NearestBand,
        }
    }

    fn uniform_state(b: &LegendreBasis) -> CoarseState {
        CoarseState::from_icdfs(|f| 20.0 * f - 10.0, |f| 20.0 * f - 10.0, 4, Orientation::MARGINAL_Y, b)
    }

    #[test]
    fn zero_steps_is_round_trip() {
        let b = LegendreBasis::new(5);
        let s = uniform_state(&b);
        let stream = RngStream::new(4, 0);
        let out = coarse_step(&s, &cfg(1, 0, 5.0), &b, stream).unwrap();
        let mut rng = stream.replica(0).rng();
        let (e, _) = s.lift(&b, 400, &mut rng, Interp::NearestBand).unwrap();
        let direct = CoarseState::restrict(&e, 4, Orientation::MARGINAL_Y, &b).unwrap();
        assert_eq!(out.state, direct);
    }

    #[test]
    fn frozen_x_leaves_y_unchanged() {
        let b = LegendreBasis::new(5);
        // marginal y uniform, all x at zero
        let s = CoarseState::from_icdfs(|f| 20.0 * f - 10.0, |_| 0.0, 4, Orientation::MARGINAL_Y, &b);
        let out0 = coarse_step(&s, &cfg(1, 0, 0.0), &b, RngStream::new(1, 0)).unwrap();
        let out = coarse_step(&s, &cfg(1, 50, 0.0), &b, RngStream::new(1, 0)).unwrap();
        assert_eq!(out.state.beta[0], out0.state.beta[0]);
    }

    #[test]
    fn deterministic_and_replica_averaged() {
        let b = LegendreBasis::new(5);
        let s = uniform_state(&b);
        let a = coarse_step(&s, &cfg(3, 5, 5.0), &b, RngStream::new(9, 0)).unwrap();
        let c = coarse_step(&s, &cfg(3, 5, 5.0), &b, RngStream::new(9, 0)).unwrap();
        assert_eq!(a.state, c.state);
        let singles: Vec<CoarseState> = (0..3)
            .map(|r| {
                let mut rng = RngStream::new(9, r).rng();
                let (mut e, _) = s.lift(&b, 400, &mut rng, Interp::NearestBand).unwrap();
                step(&mut e, &cfg(1, 5, 5.0).sde, &mut rng, 5).unwrap();
                CoarseState::restrict(&e, 4, Orientation::MARGINAL_Y, &b).unwrap()
            })
            .collect();
        for (i, row) in a.state.beta.iter().enumerate() {
            for (q, v) in row.iter().enumerate() {
                let m = singles.iter().map(|s| s.beta[i][q]).sum::<f64>() / 3.0;
                assert!((v - m).abs() < 1e-12);
            }
        }
        assert!(a.std_error.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn more_replicas_shrink_round_trip_error() {
        let b = LegendreBasis::new(5);
        let s = uniform_state(&b);
        let e1 = roundtrip_error(&s, &cfg(1, 0, 5.0), &b, RngStream::new(3, 0)).unwrap();
        let e50 = roundtrip_error(&s, &cfg(50, 0, 5.0), &b, RngStream::new(3, 0)).unwrap();
        assert!(e50 < e1, "{e50} {e1}");
    }

    #[test]
    fn rejects_bad_config() {
        let b = LegendreBasis::new(5);
        let s = uniform_state(&b);
        let mut c = cfg(1, 0, 5.0);
        c.particles = 7;
        assert!(coarse_step(&s, &c, &b, RngStream::new(1, 0)).is_err());
        c.particles = 400;
        c.replicas = 0;
        assert!(coarse_step(&s, &c, &b, RngStream::new(1, 0)).is_err());
    }
}
