//! Equation-free detection of scale invariance.
//!
//! The unknown macroscopic operator is applied to a product-Gaussian test CDF
//! by lifting particles from it, running a short burst of the micro-simulator
//! and differencing the empirical CDF. Newton's method then looks for the
//! exponent `p` for which the operator commutes with the anisotropic
//! rescaling `(x, y) → (x/A, y/A^p)` up to a factor `A^a`.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::quadrature::integrate_below;
use crate::rng::{standard_normal_cdf, standard_normal_pdf, standard_normal_quantile, RngStream};
use crate::sde::{advance, Model, ParticleEnsemble, SdeParams};

/// Test CDF Φ(x/σx)·Φ(y/σy).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductGaussian {
    pub scale_x: f64,
    pub scale_y: f64,
}

impl ProductGaussian {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        standard_normal_cdf(x / self.scale_x) * standard_normal_cdf(y / self.scale_y)
    }

    /// f(x/A, y/A^p).
    pub fn rescaled(&self, scale: f64, p: f64) -> Self {
        Self {
            scale_x: self.scale_x * scale,
            scale_y: self.scale_y * scale.powf(p),
        }
    }
}

/// One test CDF and the points the operator is wanted at.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCase {
    pub cdf: ProductGaussian,
    pub points: Vec<(f64, f64)>,
}

/// Operator estimate at one point. `replicas` holds per-replica values for
/// stochastic estimators (empty for deterministic ones).
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub replicas: Vec<f64>,
}

impl Estimate {
    pub fn std_error(&self) -> f64 {
        let n = self.replicas.len();
        if n < 2 {
            return 0.0;
        }
        let var = self.replicas.iter().map(|v| (v - self.value).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Estimates the macroscopic operator applied to test CDFs. All cases in one
/// call share their random numbers, and the `label` selects an independent
/// draw for each call.
pub trait OperatorEstimator {
    fn estimate(&mut self, cases: &[ProbeCase], label: u64) -> Result<Vec<Vec<Estimate>>>;
}

/// Particle-burst estimator: y is lifted at the ranks (i − s)/N with one
/// uniform shift s per replica, x by inverse transform of a uniform, and the
/// operator is the replica-averaged (F̂(δ) − F̂(0))/δ counted on the same
/// particles. The random shift keeps F̂(0) unbiased; on a fixed rank grid
/// its step-function error would be amplified by 1/δ.
#[derive(Clone, Debug)]
pub struct BurstEstimator {
    pub sde: SdeParams,
    pub burst_steps: usize,
    pub particles: usize,
    pub replicas: usize,
    pub stream: RngStream,
}

impl BurstEstimator {
    fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        if self.burst_steps == 0 || self.particles == 0 || self.replicas == 0 {
            return invalid("burst steps, particles and replicas must all be positive");
        }
        Ok(())
    }
}

impl OperatorEstimator for BurstEstimator {
    fn estimate(&mut self, cases: &[ProbeCase], label: u64) -> Result<Vec<Vec<Estimate>>> {
        self.validate()?;
        let n = self.particles;
        let delta = self.burst_steps as f64 * self.sde.dt;
        let noise_len = n * self.burst_steps * self.sde.model.draws_per_step();
        let base = self.stream.fork(label);
        let sde = &self.sde;
        let burst_steps = self.burst_steps;
        // rows: replica, case, point
        let rows = (0..self.replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = base.replica(r).rng();
                let shift = rng.uniform();
                let ranks: Vec<f64> = (0..n)
                    .map(|i| standard_normal_quantile((i as f64 + shift) / n as f64))
                    .collect();
                let lifted: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
                let noise: Vec<f64> = (0..noise_len).map(|_| rng.standard_normal()).collect();
                let mut ens = ParticleEnsemble::point_source(n);
                let mut row = Vec::with_capacity(cases.len());
                for case in cases {
                    for i in 0..n {
                        ens.x[i] = case.cdf.scale_x * lifted[i];
                        ens.y[i] = case.cdf.scale_y * ranks[i];
                    }
                    let before = count_below(&ens, &case.points);
                    let mut draws = noise.iter();
                    advance(&mut ens, sde, burst_steps, || *draws.next().unwrap())?;
                    let after = count_below(&ens, &case.points);
                    row.push(
                        before
                            .iter()
                            .zip(after)
                            .map(|(b, a)| (a as f64 - *b as f64) / (n as f64 * delta))
                            .collect::<Vec<f64>>(),
                    );
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut per_replica: Vec<Vec<Vec<f64>>> = cases
            .iter()
            .map(|c| vec![Vec::with_capacity(self.replicas); c.points.len()])
            .collect();
        for row in rows {
            for (case, vals) in per_replica.iter_mut().zip(row) {
                for (pt, v) in case.iter_mut().zip(vals) {
                    pt.push(v);
                }
            }
        }
        Ok(per_replica
            .into_iter()
            .map(|pts| {
                pts.into_iter()
                    .map(|reps| Estimate {
                        value: reps.iter().sum::<f64>() / reps.len() as f64,
                        replicas: reps,
                    })
                    .collect()
            })
            .collect())
    }
}

fn count_below(ens: &ParticleEnsemble, points: &[(f64, f64)]) -> Vec<usize> {
    points
        .iter()
        .map(|&(px, py)| {
            ens.x
                .iter()
                .zip(&ens.y)
                .filter(|(x, y)| **x <= px && **y <= py)
                .count()
        })
        .collect()
}

/// Deterministic estimator: evaluates the explicit CDF-level operator
/// −x F_y + ∫_{−∞}^x F_y dx' + (D²/2) F_xx (+ (D²/2) F_yy for y-diffusion)
/// with the integral done by adaptive quadrature.
#[derive(Clone, Debug)]
pub struct QuadratureOracle {
    pub diffusion: f64,
    pub model: Model,
    pub tolerance: f64,
}

impl QuadratureOracle {
    pub fn apply(&self, f: &ProductGaussian, x: f64, y: f64) -> Result<f64> {
        let (sx, sy) = (f.scale_x, f.scale_y);
        let (zx, zy) = (x / sx, y / sy);
        let dens_y = standard_normal_pdf(zy) / sy;
        let f_y = standard_normal_cdf(zx) * dens_y;
        let f_xx = -zx * standard_normal_pdf(zx) / (sx * sx) * standard_normal_cdf(zy);
        let f_yy = -zy * standard_normal_pdf(zy) / (sy * sy) * standard_normal_cdf(zx);
        let swept = dens_y
            * integrate_below(|t| standard_normal_cdf(t / sx), x, 0.0, sx, self.tolerance)?;
        let half_d2 = 0.5 * self.diffusion * self.diffusion;
        let diffusive_y = match self.model {
            Model::DiffusiveX => 0.0,
            Model::DiffusiveXY => half_d2 * f_yy,
        };
        Ok(-x * f_y + swept + half_d2 * f_xx + diffusive_y)
    }
}

impl OperatorEstimator for QuadratureOracle {
    fn estimate(&mut self, cases: &[ProbeCase], _label: u64) -> Result<Vec<Vec<Estimate>>> {
        cases
            .iter()
            .map(|c| {
                c.points
                    .iter()
                    .map(|&(x, y)| {
                        Ok(Estimate {
                            value: self.apply(&c.cdf, x, y)?,
                            replicas: Vec::new(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonConfig {
    pub p0: f64,
    pub max_iterations: usize,
    /// Central-difference step for dR/dp.
    pub h_p: f64,
    /// Stop once |Δp| falls below this; `None` always runs `max_iterations`.
    pub tolerance: Option<f64>,
    /// Iterates with index below this are excluded from the median summary.
    pub burn_in: usize,
    /// Largest allowed |Δp| per iteration.
    pub max_step: f64,
    /// Abort when |dR/dp| is within this many standard errors of zero.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Test CDF scale σ, cm.
    pub sigma: f64,
    /// Rescaling factor A.
    pub scale: f64,
    pub points: [(f64, f64); 2],
    pub newton: NewtonConfig,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale != 1.0) {
            return invalid("rescaling factor A must be positive and different from 1");
        }
        if !(self.sigma > 0.0) {
            return invalid("test scale must be positive");
        }
        if self.points[0] == self.points[1] {
            return invalid("probe points must be distinct");
        }
        let n = &self.newton;
        if !(n.h_p > 0.0 && n.max_step > 0.0 && n.p0.is_finite()) {
            return invalid("Newton step sizes must be positive and p0 finite");
        }
        Ok(())
    }

    pub fn base(&self) -> ProductGaussian {
        ProductGaussian {
            scale_x: self.sigma,
            scale_y: self.sigma,
        }
    }

    fn case(&self, p: f64) -> ProbeCase {
        let a = self.scale;
        ProbeCase {
            cdf: self.base().rescaled(a, p),
            points: self
                .points
                .iter()
                .map(|&(u, v)| (u * a, v * a.powf(p)))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub iter: usize,
    pub p: f64,
    pub a: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProbeReport {
    pub rows: Vec<ProbeRow>,
    pub p: f64,
    pub a: f64,
    pub alpha: f64,
    /// True when the Newton tolerance was met; the summary is then the last
    /// iterate, otherwise the median of iterates from `burn_in` on.
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub fn alpha_from_a(a: f64) -> Result<f64> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::Numerical(format!("similarity exponent undefined for a = {a}")));
    }
    Ok(-1.0 / a)
}

fn exponent_a(rescaled: f64, base: f64, scale: f64) -> Result<f64> {
    let ratio = rescaled / base;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Numerical(format!(
            "operator ratio {ratio:e} is not positive; the estimate is noise dominated"
        )));
    }
    Ok(ratio.ln() / scale.ln())
}

/// a such that D(f_{A,p})(x₁, y₁) = A^a · D(f)(u₁, v₁).
pub fn compute_a(p: f64, cfg: &ProbeConfig, est: &mut dyn OperatorEstimator, label: u64) -> Result<f64> {
    cfg.validate()?;
    let base = ProbeCase {
        cdf: cfg.base(),
        points: vec![cfg.points[0]],
    };
    let out = est.estimate(&[base, cfg.case(p)], label)?;
    exponent_a(out[1][0].value, out[0][0].value, cfg.scale)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Expected particle count below each probe point of the unscaled test CDF.
pub fn sparse_point_warnings(cfg: &ProbeConfig, particles: usize) -> Vec<String> {
    let f = cfg.base();
    cfg.points
        .iter()
        .filter_map(|&(u, v)| {
            let expected = particles as f64 * f.value(u, v);
            (expected < 10.0).then(|| {
                format!("probe point ({u}, {v}) expects {expected:.2} particles below it; estimates will be noisy")
            })
        })
        .collect()
}

/// Newton iteration on R(p) = D(f_{A,p})(x₂,y₂) − D(f_{A,p})(x₁,y₁)·D(f)(u₂,v₂)/D(f)(u₁,v₁)
/// with (x_i, y_i) = (u_i A, v_i A^p). Every iterate evaluates the unscaled
/// test function and p − h, p, p + h on common random numbers, so the
/// estimation noise largely cancels in the ratios and differences.
pub fn newton_solve_p(cfg: &ProbeConfig, est: &mut dyn OperatorEstimator) -> Result<ScaleProbeReport> {
    cfg.validate()?;
    let nc = &cfg.newton;
    let base_case = ProbeCase {
        cdf: cfg.base(),
        points: cfg.points.to_vec(),
    };
    let mut rows = Vec::new();
    let mut p = nc.p0;
    let mut converged = false;
    for it in 0..=nc.max_iterations {
        let cases = [
            base_case.clone(),
            cfg.case(p - nc.h_p),
            cfg.case(p),
            cfg.case(p + nc.h_p),
        ];
        let mut e = est.estimate(&cases, it as u64)?;
        let base = e.remove(0);
        let (d1, d2) = (base[0].value, base[1].value);
        if d1 == 0.0 {
            return Err(Error::Numerical("operator vanishes at the first probe point".into()));
        }
        let ratio = d2 / d1;
        let a = exponent_a(e[1][0].value, d1, cfg.scale)?;
        rows.push(ProbeRow { iter: it, p, a });
        if converged || it == nc.max_iterations {
            break;
        }
        let residual = e[1][1].value - e[1][0].value * ratio;
        let slope_of = |lo: f64, hi: f64, lo1: f64, hi1: f64| ((hi - lo) - ratio * (hi1 - lo1)) / (2.0 * nc.h_p);
        let slope = slope_of(e[0][1].value, e[2][1].value, e[0][0].value, e[2][0].value);
        let reps = e[1][0].replicas.len();
        if reps > 1 {
            let per: Vec<f64> = (0..reps)
                .map(|r| {
                    slope_of(
                        e[0][1].replicas[r],
                        e[2][1].replicas[r],
                        e[0][0].replicas[r],
                        e[2][0].replicas[r],
                    )
                })
                .collect();
            let se = Estimate {
                value: slope,
                replicas: per,
            }
            .std_error();
            if slope.abs() < nc.noise_floor * se {
                return Err(Error::Numerical(format!(
                    "dR/dp = {slope:.3e} is within {} standard errors ({se:.3e}) of zero at iteration {it}; increase replicas",
                    nc.noise_floor
                )));
            }
        } else if slope == 0.0 {
            return Err(Error::Numerical(format!("dR/dp vanished at iteration {it}")));
        }
        let dp = (-residual / slope).clamp(-nc.max_step, nc.max_step);
        p += dp;
        if !p.is_finite() {
            return Err(Error::Numerical("Newton iterate is not finite".into()));
        }
        if let Some(tol) = nc.tolerance {
            converged = dp.abs() < tol;
        }
    }
    let (p_sum, a_sum) = if converged {
        let last = rows.last().unwrap();
        (last.p, last.a)
    } else {
        let tail: Vec<&ProbeRow> = rows.iter().filter(|r| r.iter >= nc.burn_in).collect();
        if tail.is_empty() {
            return invalid("burn-in leaves no iterates to summarize");
        }
        (
            median(&mut tail.iter().map(|r| r.p).collect::<Vec<_>>()),
            median(&mut tail.iter().map(|r| r.a).collect::<Vec<_>>()),
        )
    };
    Ok(ScaleProbeReport {
        rows,
        p: p_sum,
        a: a_sum,
        alpha: alpha_from_a(a_sum)?,
        converged,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(model: Model) -> QuadratureOracle {
        QuadratureOracle {
            diffusion: 5.0,
            model,
            tolerance: 1e-12,
        }
    }

    fn set1() -> ProbeConfig {
        ProbeConfig {
            sigma: 4.0,
            scale: 2.0,
            points: [(-2.0, -2.0), (3.0, 3.0)],
            newton: NewtonConfig {
                p0: 5.0,
                max_iterations: 12,
                h_p: 0.05,
                tolerance: Some(1e-6),
                burn_in: 3,
                max_step: 3.0,
                noise_floor: 2.0,
            },
        }
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_from_a(-2.0).unwrap(), 0.5);
        assert_eq!(alpha_from_a(-1.0).unwrap(), 1.0);
        assert_eq!(alpha_from_a(-4.0).unwrap(), 0.25);
        assert!(alpha_from_a(0.0).is_err());
    }

    #[test]
    fn oracle_swept_integral_matches_closed_form() {
        let o = oracle(Model::DiffusiveX);
        let f = ProductGaussian { scale_x: 4.0, scale_y: 3.0 };
        for &(x, y) in &[(-2.0, -2.0), (3.0, 1.0), (9.0, -4.0)] {
            let sx = 4.0;
            let sweep = x * standard_normal_cdf(x / sx) + sx * standard_normal_pdf(x / sx);
            let dens = standard_normal_pdf(y / 3.0) / 3.0;
            let f_y = standard_normal_cdf(x / sx) * dens;
            let f_xx = -(x / sx) * standard_normal_pdf(x / sx) / 16.0 * standard_normal_cdf(y / 3.0);
            let want = -x * f_y + dens * sweep + 12.5 * f_xx;
            assert!((o.apply(&f, x, y).unwrap() - want).abs() < 1e-11);
        }
    }

    #[test]
    fn oracle_far_left_is_zero() {
        let o = oracle(Model::DiffusiveX);
        let f = ProductGaussian { scale_x: 4.0, scale_y: 4.0 };
        assert!(o.apply(&f, -80.0, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn oracle_newton_finds_three_and_minus_two() {
        for cfg in [set1(), ProbeConfig { sigma: 5.0, scale: 2.5, points: [(-3.0, -3.0), (4.0, 4.0)], ..set1() }] {
            let r = newton_solve_p(&cfg, &mut oracle(Model::DiffusiveX)).unwrap();
            assert!(r.converged);
            assert!(r.rows.len() <= 7, "{:?}", r.rows);
            assert!((r.p - 3.0).abs() < 1e-4, "{}", r.p);
            assert!((r.a + 2.0).abs() < 1e-4, "{}", r.a);
            assert!((r.alpha * r.a + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_compute_a_at_three() {
        let a = compute_a(3.0, &set1(), &mut oracle(Model::DiffusiveX), 0).unwrap();
        assert!((a + 2.0).abs() < 1e-6);
    }

    #[test]
    fn burst_agrees_with_oracle() {
        let sde = SdeParams::new(5.0, 0.01, Model::DiffusiveX).unwrap();
        let mut burst = BurstEstimator {
            sde,
            burst_steps: 1,
            particles: 9000,
            replicas: 400,
            stream: RngStream::new(17, 0),
        };
        let case = ProbeCase {
            cdf: ProductGaussian { scale_x: 4.0, scale_y: 4.0 },
            points: vec![(-2.0, -2.0), (3.0, 3.0)],
        };
        let est = burst.estimate(std::slice::from_ref(&case), 1).unwrap();
        let o = oracle(Model::DiffusiveX);
        for (e, &(x, y)) in est[0].iter().zip(&case.points) {
            let want = o.apply(&case.cdf, x, y).unwrap();
            assert!((e.value - want).abs() < 3.0 * e.std_error(), "{} {want} {}", e.value, e.std_error());
        }
    }

    #[test]
    fn zero_noise_burst_sees_drift_only() {
        let sde = SdeParams::new(0.0, 0.01, Model::DiffusiveX).unwrap();
        let mut burst = BurstEstimator {
            sde,
            burst_steps: 1,
            particles: 20_000,
            replicas: 40,
            stream: RngStream::new(2, 0),
        };
        let case = ProbeCase {
            cdf: ProductGaussian { scale_x: 4.0, scale_y: 4.0 },
            points: vec![(0.0, 1.0), (-60.0, 0.0)],
        };
        let est = burst.estimate(std::slice::from_ref(&case), 0).unwrap();
        let drift = QuadratureOracle {
            diffusion: 0.0,
            model: Model::DiffusiveX,
            tolerance: 1e-12,
        }
        .apply(&case.cdf, 0.0, 1.0)
        .unwrap();
        assert!(drift > 0.0 && est[0][0].value > 0.0);
        assert!((est[0][0].value - drift).abs() < 0.1 * drift);
        assert_eq!(est[0][1].value, 0.0);
    }

    #[test]
    fn sparse_points_warn() {
        let mut cfg = set1();
        assert!(sparse_point_warnings(&cfg, 9000).is_empty());
        cfg.points[0] = (-20.0, -20.0);
        assert_eq!(sparse_point_warnings(&cfg, 9000).len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = set1();
        c.scale = 1.0;
        assert!(c.validate().is_err());
        let mut c = set1();
        c.points[1] = c.points[0];
        assert!(c.validate().is_err());
    }
}
