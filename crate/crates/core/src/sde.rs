//! Micro-simulators for Brownian particles in a linear shear flow.
//!
//! Both models advect `y` with velocity `x` (`dY = X dt`) and diffuse `x`;
//! [`Model::DiffusiveXY`] also diffuses `y`. The update is the explicit
//! Euler–Maruyama step, which is exact in distribution per step for these
//! linear dynamics.

use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    DiffusiveX,
    DiffusiveXY,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::DiffusiveX => "diffusive-x",
            Model::DiffusiveXY => "diffusive-xy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffusive-x" => Ok(Model::DiffusiveX),
            "diffusive-xy" => Ok(Model::DiffusiveXY),
            _ => invalid(format!("unknown model `{s}` (expected diffusive-x or diffusive-xy)")),
        }
    }

    /// Normal draws consumed per particle per step.
    pub fn draws_per_step(self) -> usize {
        match self {
            Model::DiffusiveX => 1,
            Model::DiffusiveXY => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeParams {
    /// Noise amplitude, cm/s^(1/2).
    pub diffusion: f64,
    /// Time step, s.
    pub dt: f64,
    pub model: Model,
    /// Named model parameters; neither built-in model uses any.
    pub extra: Vec<(String, f64)>,
}

impl SdeParams {
    pub fn new(diffusion: f64, dt: f64, model: Model) -> Result<Self> {
        let p = Self {
            diffusion,
            dt,
            model,
            extra: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return invalid(format!("diffusion must be finite and >= 0, got {}", self.diffusion));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be finite and > 0, got {}", self.dt));
        }
        Ok(())
    }
}

/// Particle positions in cm, stored as parallel arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return invalid(format!("x has {} entries but y has {}", x.len(), y.len()));
        }
        if x.is_empty() {
            return invalid("ensemble must contain at least one particle");
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return invalid("ensemble positions must be finite");
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn point_source(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
        }
    }

    /// `n` particles uniform on the square (-half, half)², x drawn before y.
    pub fn uniform_square(n: usize, half: f64, rng: &mut StreamRng) -> Self {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            x.push(half * (2.0 * rng.uniform() - 1.0));
            y.push(half * (2.0 * rng.uniform() - 1.0));
        }
        Self { x, y }
    }

    /// Concatenates ensembles in order.
    pub fn pooled(parts: &[ParticleEnsemble]) -> Self {
        let n = parts.iter().map(|p| p.len()).sum();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for p in parts {
            x.extend_from_slice(&p.x);
            y.extend_from_slice(&p.y);
        }
        Self { x, y }
    }
}

/// Advances the ensemble in place by `n_steps` steps.
///
/// Per step and particle the draws are taken in the order η_X, then η_Y
/// (DiffusiveXY only), and the y update uses the pre-step x. Consecutive calls
/// on the same generator reproduce a single call with the summed step count.
pub fn step(
    ensemble: &mut ParticleEnsemble,
    params: &SdeParams,
    rng: &mut StreamRng,
    n_steps: usize,
) -> Result<()> {
    advance(ensemble, params, n_steps, || rng.standard_normal())
}

/// [`step`] with an arbitrary source of standard normal draws, consumed in
/// the same order.
pub fn advance(
    ensemble: &mut ParticleEnsemble,
    params: &SdeParams,
    n_steps: usize,
    mut normal: impl FnMut() -> f64,
) -> Result<()> {
    let dt = params.dt;
    let kick = params.diffusion * dt.sqrt();
    for s in 0..n_steps {
        let mut finite = true;
        match params.model {
            Model::DiffusiveX => {
                for (x, y) in ensemble.x.iter_mut().zip(ensemble.y.iter_mut()) {
                    let eta = normal();
                    *y += *x * dt;
                    *x += kick * eta;
                    finite &= x.is_finite() & y.is_finite();
                }
            }
            Model::DiffusiveXY => {
                for (x, y) in ensemble.x.iter_mut().zip(ensemble.y.iter_mut()) {
                    let eta_x = normal();
                    let eta_y = normal();
                    *y += *x * dt + kick * eta_y;
                    *x += kick * eta_x;
                    finite &= x.is_finite() & y.is_finite();
                }
            }
        }
        if !finite {
            return Err(Error::NonFinite { step: s });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSummary {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub cov_xy: f64,
    /// `None` when either axis has zero variance.
    pub corr: Option<f64>,
}

/// Unbiased sample moments (two-pass).
pub fn moment_summary(ensemble: &ParticleEnsemble) -> Result<MomentSummary> {
    let n = ensemble.len();
    if n < 2 {
        return invalid("moment summary needs at least two particles");
    }
    let nf = n as f64;
    let mean_x = ensemble.x.iter().sum::<f64>() / nf;
    let mean_y = ensemble.y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in ensemble.x.iter().zip(&ensemble.y) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = nf - 1.0;
    let corr = if sxx > 0.0 && syy > 0.0 {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    };
    Ok(MomentSummary {
        mean_x,
        mean_y,
        std_x: (sxx / denom).sqrt(),
        std_y: (syy / denom).sqrt(),
        cov_xy: sxy / denom,
        corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn zero_noise_single_step() {
        let p = SdeParams::new(0.0, 0.01, Model::DiffusiveX).unwrap();
        let mut e = ParticleEnsemble::new(vec![1.0], vec![0.0]).unwrap();
        step(&mut e, &p, &mut RngStream::new(1, 0).rng(), 1).unwrap();
        assert_eq!(e.x, vec![1.0]);
        assert!((e.y[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_is_identity() {
        let p = SdeParams::new(5.0, 0.01, Model::DiffusiveXY).unwrap();
        let mut r = RngStream::new(3, 0).rng();
        let e0 = ParticleEnsemble::uniform_square(50, 10.0, &mut r);
        let mut e = e0.clone();
        step(&mut e, &p, &mut r, 0).unwrap();
        assert_eq!(e, e0);
    }

    #[test]
    fn draw_count_matches_model() {
        for (model, per) in [(Model::DiffusiveX, 1u128), (Model::DiffusiveXY, 2)] {
            let p = SdeParams::new(5.0, 0.01, model).unwrap();
            let mut e = ParticleEnsemble::point_source(17);
            let mut r = RngStream::new(9, 4).rng();
            step(&mut e, &p, &mut r, 5).unwrap();
            assert_eq!(r.words_consumed(), per * 17 * 5);
        }
    }

    #[test]
    fn split_batches_match_single_batch() {
        let p = SdeParams::new(5.0, 0.01, Model::DiffusiveXY).unwrap();
        let mut a = ParticleEnsemble::point_source(64);
        let mut b = a.clone();
        let mut ra = RngStream::new(11, 2).rng();
        let mut rb = RngStream::new(11, 2).rng();
        step(&mut a, &p, &mut ra, 30).unwrap();
        step(&mut b, &p, &mut rb, 13).unwrap();
        step(&mut b, &p, &mut rb, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_reports_step() {
        let p = SdeParams::new(1e300, 1e10, Model::DiffusiveX).unwrap();
        let mut e = ParticleEnsemble::new(vec![1e300], vec![0.0]).unwrap();
        let err = step(&mut e, &p, &mut RngStream::new(1, 0).rng(), 10).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0 }));
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        assert!(SdeParams::new(-1.0, 0.01, Model::DiffusiveX).is_err());
        assert!(SdeParams::new(1.0, 0.0, Model::DiffusiveX).is_err());
        assert!(ParticleEnsemble::new(vec![1.0], vec![]).is_err());
        assert!(ParticleEnsemble::new(vec![], vec![]).is_err());
        assert!(ParticleEnsemble::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn moments_of_two_point_sets() {
        let e = ParticleEnsemble::new(vec![1.0, -1.0], vec![1.0, -1.0]).unwrap();
        let m = moment_summary(&e).unwrap();
        assert!((m.std_x - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.std_y - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.corr, Some(1.0));
        let e = ParticleEnsemble::new(vec![1.0, -1.0], vec![-1.0, 1.0]).unwrap();
        assert_eq!(moment_summary(&e).unwrap().corr, Some(-1.0));
        let e = ParticleEnsemble::new(vec![1.0, 1.0], vec![-1.0, 1.0]).unwrap();
        assert_eq!(moment_summary(&e).unwrap().corr, None);
        assert!(moment_summary(&ParticleEnsemble::point_source(1)).is_err());
    }

    #[test]
    fn model_names_round_trip() {
        for m in [Model::DiffusiveX, Model::DiffusiveXY] {
            assert_eq!(Model::parse(m.name()).unwrap(), m);
        }
        assert!(Model::parse("brownian").is_err());
    }
}
