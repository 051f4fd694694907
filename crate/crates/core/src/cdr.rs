//! Coarse dynamic renormalization: evolve, pin the x-quantile at level `m` to
//! the template position `e` by an anisotropic rescaling, restrict, repeat.
//! A self-similar solution appears as a fixed point of this map, and the
//! history of scale factors yields the similarity exponent.

use rayon::prelude::*;

use crate::basis::{CoarseState, LegendreBasis};
use crate::error::{invalid, Error, Result};
use crate::observables::Axis;
use crate::rng::RngStream;
use crate::sde::{moment_summary, step, MomentSummary, ParticleEnsemble};
use crate::stepper::StepperConfig;

/// Pinning condition: the x-marginal CDF equals `m` at `x = e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Template {
    /// cm, negative.
    pub e: f64,
    /// Probability in (0, 0.5).
    pub m: f64,
}

impl Template {
    pub fn new(e: f64, m: f64) -> Result<Self> {
        if !(e < 0.0) || !e.is_finite() {
            return invalid(format!("template position must be negative, got {e}"));
        }
        if !(m > 0.0 && m < 0.5) {
            return invalid(format!("template level must lie in (0, 0.5), got {m}"));
        }
        Ok(Self { e, m })
    }
}

/// The order statistic of rank ⌈mN⌉.
pub fn quantile_at(values: &[f64], m: f64) -> f64 {
    let n = values.len();
    let k = ((m * n as f64).ceil() as usize).clamp(1, n);
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Scale factor that maps the x-quantile at `m` onto `e`.
pub fn template_factor(x: &[f64], template: &Template) -> Result<f64> {
    if x.is_empty() {
        return invalid("template needs a non-empty ensemble");
    }
    let q = quantile_at(x, template.m);
    if q >= 0.0 {
        return Err(Error::Numerical(format!(
            "x-quantile at level {} is {q} >= 0; a negative template position cannot be reached",
            template.m
        )));
    }
    Ok(q / template.e)
}

/// (x/A, y/A^p).
pub fn rescale(ensemble: &mut ParticleEnsemble, factor: f64, p: f64) {
    let fy = factor.powf(p);
    for v in &mut ensemble.x {
        *v /= factor;
    }
    for v in &mut ensemble.y {
        *v /= fy;
    }
}

pub fn template_rescale(
    ensemble: &ParticleEnsemble,
    template: &Template,
    p: f64,
) -> Result<(ParticleEnsemble, f64)> {
    let a = template_factor(&ensemble.x, template)?;
    let mut out = ensemble.clone();
    rescale(&mut out, a, p);
    Ok((out, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdrConfig {
    /// `micro_steps` is the evolution time per renormalization loop.
    pub stepper: StepperConfig,
    pub template: Template,
    pub p: f64,
    pub max_iterations: usize,
    /// Relative L2 change of the coefficient vector counted as settled.
    pub tolerance: f64,
    /// Settled iterations in a row required for convergence.
    pub consecutive: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdrIteration {
    pub iter: usize,
    pub a_loop: f64,
    pub a_cum: f64,
    /// Replica-averaged coefficients after rescaling, flattened row-major.
    pub beta: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Relative L2 change of `beta` from the previous iteration.
    pub change: f64,
    /// Moments of the pooled rescaled particles.
    pub moments: MomentSummary,
}

#[derive(Clone, Debug)]
pub struct RenormTrace {
    pub iterations: Vec<CdrIteration>,
    pub converged: bool,
    pub state: CoarseState,
}

impl RenormTrace {
    pub fn last(&self) -> &CdrIteration {
        self.iterations.last().expect("trace has at least one iteration")
    }
}

const A_CUM_LIMIT: f64 = 1e6;

fn evolve_replicas(
    state: &CoarseState,
    cfg: &StepperConfig,
    basis: &LegendreBasis,
    stream: RngStream,
    replicas: usize,
) -> Result<Vec<ParticleEnsemble>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.replica(r).rng();
            let (mut ens, _) = state.lift(basis, cfg.particles, &mut rng, cfg.interp)?;
            step(&mut ens, &cfg.sde, &mut rng, cfg.micro_steps)?;
            Ok(ens)
        })
        .collect()
}

fn pooled_x(parts: &[ParticleEnsemble]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.x.iter().copied()).collect()
}

/// One renormalization loop: lift and evolve every replica, rescale all of
/// them by the factor the pooled particles need, restrict and average.
pub fn renormalize_once(
    state: &CoarseState,
    cfg: &CdrConfig,
    basis: &LegendreBasis,
    stream: RngStream,
) -> Result<(CoarseState, Vec<f64>, f64, MomentSummary)> {
    cfg.stepper.validate()?;
    let mut parts = evolve_replicas(state, &cfg.stepper, basis, stream, cfg.stepper.replicas)?;
    let a = template_factor(&pooled_x(&parts), &cfg.template)?;
    let width = state.order() + 1;
    let k = state.beta.len() * width;
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    for ens in &mut parts {
        rescale(ens, a, cfg.p);
        let s = CoarseState::restrict(ens, state.bands(), state.orientation, basis)?;
        for (i, v) in s.beta.iter().flatten().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = parts.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let se = mean
        .iter()
        .zip(&sum_sq)
        .map(|(m, q)| {
            if n > 1.0 {
                ((q / n - m * m).max(0.0) / (n - 1.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let moments = moment_summary(&ParticleEnsemble::pooled(&parts))?;
    let next = CoarseState::new(mean.chunks(width).map(|c| c.to_vec()).collect(), state.orientation)?;
    Ok((next, se, a, moments))
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = new.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

/// Direct fixed-point iteration; iteration `i` (from 1) draws from
/// `stream.fork(i)`.
pub fn cdr_fixed_point(
    initial: &CoarseState,
    cfg: &CdrConfig,
    basis: &LegendreBasis,
    stream: RngStream,
) -> Result<RenormTrace> {
    if cfg.consecutive == 0 || cfg.max_iterations == 0 {
        return invalid("max iterations and consecutive count must be positive");
    }
    let mut state = initial.clone();
    let mut a_cum = 1.0;
    let mut iterations = Vec::new();
    let mut settled = 0;
    let mut converged = false;
    for i in 1..=cfg.max_iterations {
        let (next, se, a, moments) = renormalize_once(&state, cfg, basis, stream.fork(i as u64))?;
        a_cum *= a;
        if !(a_cum > 1.0 / A_CUM_LIMIT && a_cum < A_CUM_LIMIT) {
            return Err(Error::Numerical(format!(
                "cumulative rescaling factor {a_cum:e} left [1e-6, 1e6] at iteration {i}"
            )));
        }
        let change = relative_change(&next.flat(), &state.flat());
        settled = if change < cfg.tolerance { settled + 1 } else { 0 };
        iterations.push(CdrIteration {
            iter: i,
            a_loop: a,
            a_cum,
            beta: next.flat(),
            std_error: se,
            change,
            moments,
        });
        state = next;
        if settled >= cfg.consecutive {
            converged = true;
            break;
        }
    }
    Ok(RenormTrace {
        iterations,
        converged,
        state,
    })
}

/// Settings for following A(t) after convergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingConfig {
    pub diffusion: f64,
    pub dt: f64,
    /// x values lifted from the converged marginal.
    pub particles: usize,
    /// Micro steps run before the t = 0 rescale.
    pub heal: usize,
}

/// Evolves the converged shape without further rescaling and reports the
/// template scale A(t) at each checkpoint (in micro steps, increasing),
/// normalized so that A = 1 at step 0.
///
/// The template reads x only and the x update of both models is a Gaussian
/// random walk that y never feeds into, so only x is evolved, one Gaussian
/// draw per particle per checkpoint interval (the exact law of that many
/// micro steps). This is what makes tens of millions of particles affordable;
/// A_t by backward differences is very sensitive to template noise.
///
/// The lifted x values first run `heal` micro steps and are rescaled onto
/// the template; that instant is t = 0. A freshly lifted polynomial ICDF
/// has a distorted centre that diffusion takes a while to smooth out, and
/// the template quantile sits right in it.
///
/// Every particle is paired with its mirror image −x driven by the negated
/// noise, so the template is read from x together with −x. This removes
/// the location noise of the template quantile.
pub fn track_rescaling(
    state: &CoarseState,
    template: &Template,
    basis: &LegendreBasis,
    cfg: &TrackingConfig,
    checkpoints: &[usize],
    stream: RngStream,
) -> Result<Vec<(f64, f64)>> {
    if state.orientation.marginal_axis != Axis::X {
        return invalid("tracking needs the x marginal");
    }
    if !(cfg.diffusion >= 0.0 && cfg.dt > 0.0 && cfg.particles > 0) {
        return invalid("tracking needs D >= 0, dt > 0 and at least one particle");
    }
    if checkpoints.first() == Some(&0) || checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("checkpoints must be positive and strictly increasing");
    }
    let (marginal, _, _) = state.icdfs(basis, cfg.particles)?;
    let mut x = marginal.values().to_vec();
    let mut scratch = Vec::with_capacity(x.len());
    let mut rng = stream.rng();
    let mut walk = |x: &mut [f64], steps: usize| {
        let sd = cfg.diffusion * (steps as f64 * cfg.dt).sqrt();
        for v in x.iter_mut() {
            *v += sd * rng.standard_normal();
        }
    };
    walk(&mut x, cfg.heal);
    let a0 = mirrored_quantile(&x, template.m, &mut scratch)? / template.e;
    for v in &mut x {
        *v /= a0;
    }
    let mut out = vec![(0.0, 1.0)];
    let mut done = 0;
    for &c in checkpoints {
        walk(&mut x, c - done);
        done = c;
        let a = mirrored_quantile(&x, template.m, &mut scratch)? / template.e;
        out.push((c as f64 * cfg.dt, a));
    }
    Ok(out)
}

/// Order statistic ⌈2mN⌉ of the values together with their negatives.
fn mirrored_quantile(x: &[f64], m: f64, scratch: &mut Vec<f64>) -> Result<f64> {
    scratch.clear();
    scratch.extend(x.iter().map(|v| v.abs()));
    let n = scratch.len();
    let k = ((2.0 * m * n as f64).ceil() as usize).clamp(1, n);
    let (_, q, _) = scratch.select_nth_unstable_by(n - k, f64::total_cmp);
    let q = -*q;
    if !(q < 0.0) {
        return Err(Error::Numerical(format!(
            "mirrored x-quantile at level {m} is {q}; a negative template position cannot be reached"
        )));
    }
    Ok(q)
}

/// α = (t₂ − t₁)/(A(t₂)/A_t(t₂) − A(t₁)/A_t(t₁)) with A_t the backward
/// difference from the preceding sample. `samples` are (t, A) in time order.
pub fn similarity_exponent(samples: &[(f64, f64)], t1: f64, t2: f64) -> Result<f64> {
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return invalid("sample times must be strictly increasing");
    }
    if samples.windows(2).any(|w| !(w[1].1 > w[0].1)) {
        return Err(Error::Numerical("A(t) is not increasing; the similarity exponent is undefined".into()));
    }
    let find = |t: f64| {
        samples
            .iter()
            .position(|s| (s.0 - t).abs() <= 1e-9 * t.abs().max(1.0))
            .filter(|&i| i > 0)
            .ok_or_else(|| Error::Invalid(format!("no sample with a predecessor at t = {t}")))
    };
    let ratio = |i: usize| {
        let (t, a) = samples[i];
        let (tp, ap) = samples[i - 1];
        a / ((a - ap) / (t - tp))
    };
    let (i1, i2) = (find(t1)?, find(t2)?);
    let denom = ratio(i2) - ratio(i1);
    if denom == 0.0 {
        return Err(Error::Numerical("A/A_t is identical at both times".into()));
    }
    Ok((t2 - t1) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{Interp, Orientation};
    use crate::rng::standard_normal_quantile;
    use crate::sde::{Model, SdeParams};

    #[test]
    fn template_validation() {
        assert!(Template::new(1.0, 0.4).is_err());
        assert!(Template::new(-1.0, 0.5).is_err());
        assert!(Template::new(-1.0, 0.0).is_err());
        assert!(Template::new(-2.832, 0.4).is_ok());
    }

    #[test]
    fn quantile_rank_is_ceiling() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile_at(&v, 0.4), 2.0);
        assert_eq!(quantile_at(&v, 0.41), 3.0);
        assert_eq!(quantile_at(&v, 0.01), 1.0);
    }

    #[test]
    fn satisfied_template_is_identity() {
        let x = vec![-4.0, -2.0, 1.0, 3.0, 5.0];
        let e = ParticleEnsemble::new(x.clone(), x.clone()).unwrap();
        let (out, a) = template_rescale(&e, &Template::new(-2.0, 0.4).unwrap(), 3.0).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(out, e);
    }

    #[test]
    fn scaling_equivariance() {
        let t = Template::new(-1.5, 0.3).unwrap();
        let e = ParticleEnsemble::new(vec![-3.0, -1.0, 0.5, 2.0], vec![1.0, -2.0, 4.0, 0.0]).unwrap();
        let mut big = e.clone();
        for v in &mut big.x {
            *v *= 2.0;
        }
        for v in &mut big.y {
            *v *= 8.0;
        }
        let (o1, a1) = template_rescale(&e, &t, 3.0).unwrap();
        let (o2, a2) = template_rescale(&big, &t, 3.0).unwrap();
        assert!((a2 - 2.0 * a1).abs() < 1e-15);
        for (p, q) in o1.x.iter().zip(&o2.x).chain(o1.y.iter().zip(&o2.y)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_template_errors() {
        let e = ParticleEnsemble::new(vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        assert!(template_rescale(&e, &Template::new(-1.0, 0.4).unwrap(), 3.0).is_err());
    }

    #[test]
    fn gaussian_quantile_calibration() {
        let sx = 5.0 * 5f64.sqrt();
        let n = 200_000;
        let x: Vec<f64> = (0..n).map(|i| sx * standard_normal_quantile((i as f64 + 0.5) / n as f64)).collect();
        let a = template_factor(&x, &Template::new(-2.832, 0.4).unwrap()).unwrap();
        assert!((a - 1.0).abs() < 2e-3, "{a}");
    }

    #[test]
    fn table_arithmetic() {
        let s = [(0.0, 1.0), (1.0, 1.10268), (3.0, 1.27793)];
        // backward differences over unequal spacing: 0.10268 and 0.17525/2
        let alpha = similarity_exponent(&s, 1.0, 3.0).unwrap();
        assert!((alpha - 0.520).abs() < 1e-3, "{alpha}");
    }

    #[test]
    fn power_law_recovers_exponent() {
        // With A_t exact the formula is an identity; with backward
        // differences it converges as the spacing shrinks.
        let alpha = 0.37;
        let h = 1e-6;
        let a = |t: f64| (1.0 + t).powf(alpha);
        let s = [(1.0 - h, a(1.0 - h)), (1.0, a(1.0)), (3.0 - h, a(3.0 - h)), (3.0, a(3.0))];
        let got = similarity_exponent(&s, 1.0, 3.0).unwrap();
        assert!((got - alpha).abs() < 1e-6, "{got}");
        let exact = |t: f64| a(t) / (alpha * (1.0 + t).powf(alpha - 1.0));
        assert!(((3.0 - 1.0) / (exact(3.0) - exact(1.0)) - alpha).abs() < 1e-12);
    }

    #[test]
    fn non_monotone_history_errors() {
        let s = [(0.0, 1.0), (1.0, 0.9), (2.0, 1.2)];
        assert!(similarity_exponent(&s, 1.0, 2.0).is_err());
        let s = [(0.0, 1.0), (1.0, 1.1)];
        assert!(similarity_exponent(&s, 0.0, 1.0).is_err());
    }

    fn small_cfg() -> CdrConfig {
        CdrConfig {
            stepper: StepperConfig {
                sde: SdeParams::new(5.0, 0.01, Model::DiffusiveX).unwrap(),
                particles: 400,
                bands: 4,
                order: 5,
                micro_steps: 20,
                replicas: 4,
                interp: Interp::NearestBand,
            },
            template: Template::new(-2.832, 0.4).unwrap(),
            p: 3.0,
            max_iterations: 3,
            tolerance: 1e-2,
            consecutive: 3,
        }
    }

    #[test]
    fn trace_bookkeeping_and_determinism() {
        let b = LegendreBasis::new(5);
        let init = CoarseState::from_icdfs(|f| 20.0 * f - 10.0, |f| 20.0 * f - 10.0, 4, Orientation::MARGINAL_X, &b);
        let cfg = small_cfg();
        let t1 = cdr_fixed_point(&init, &cfg, &b, RngStream::new(3, 0)).unwrap();
        let t2 = cdr_fixed_point(&init, &cfg, &b, RngStream::new(3, 0)).unwrap();
        assert_eq!(t1.iterations, t2.iterations);
        let mut prod = 1.0;
        for it in &t1.iterations {
            prod *= it.a_loop;
            assert!((it.a_cum - prod).abs() < 1e-12 * prod);
        }
        assert_eq!(t1.iterations.len(), 3);
    }

    #[test]
    fn template_holds_after_each_rescale() {
        let b = LegendreBasis::new(5);
        let init = CoarseState::from_icdfs(|f| 20.0 * f - 10.0, |f| 20.0 * f - 10.0, 4, Orientation::MARGINAL_X, &b);
        let cfg = small_cfg();
        let mut parts = evolve_replicas(&init, &cfg.stepper, &b, RngStream::new(1, 0), 4).unwrap();
        let a = template_factor(&pooled_x(&parts), &cfg.template).unwrap();
        for e in &mut parts {
            rescale(e, a, 3.0);
        }
        let q = quantile_at(&pooled_x(&parts), 0.4);
        assert!((q - cfg.template.e).abs() < 1e-12);
    }

    #[test]
    fn tracking_starts_at_one() {
        let b = LegendreBasis::new(5);
        let g = |f: f64| 10.0 * standard_normal_quantile(f);
        let init = CoarseState::from_icdfs(g, g, 4, Orientation::MARGINAL_X, &b);
        let cfg = TrackingConfig { diffusion: 5.0, dt: 0.01, particles: 20_000, heal: 100 };
        let t = Template::new(-2.832, 0.4).unwrap();
        let s = track_rescaling(&init, &t, &b, &cfg, &[100, 300], RngStream::new(2, 0)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], (0.0, 1.0));
        assert!(s[2].1 > s[1].1 && s[1].1 > 1.0);
    }

    #[test]
    fn tracking_follows_square_root_law() {
        // Gaussian x marginal sitting on the template: σ = e/Φ⁻¹(m), so the
        // template scale grows as √(1 + t D²/σ²)
        let b = LegendreBasis::new(5);
        let t = Template::new(-2.832, 0.4).unwrap();
        let sigma = t.e / standard_normal_quantile(t.m);
        let g = move |f: f64| sigma * standard_normal_quantile(f);
        let init = CoarseState::from_icdfs(g, g, 4, Orientation::MARGINAL_X, &b);
        let cfg = TrackingConfig { diffusion: 5.0, dt: 0.01, particles: 10_000_000, heal: 1000 };
        let s = track_rescaling(&init, &t, &b, &cfg, &[100, 200, 300], RngStream::new(4, 0)).unwrap();
        let s0 = sigma * sigma / 25.0;
        for &(time, a) in &s[1..] {
            assert!((a - (1.0 + time / s0).sqrt()).abs() < 4e-3, "{time} {a}");
        }
    }

    #[test]
    fn mirrored_quantile_matches_explicit_union() {
        let x = [0.3, -1.2, 2.5, -0.7, 1.9];
        let mut union: Vec<f64> = x.iter().flat_map(|&v| [v, -v]).collect();
        union.sort_by(f64::total_cmp);
        let mut scratch = Vec::new();
        for m in [0.05, 0.1, 0.25, 0.4, 0.49] {
            let k = (m * union.len() as f64).ceil() as usize;
            assert_eq!(mirrored_quantile(&x, m, &mut scratch).unwrap(), union[k - 1]);
        }
    }
}
