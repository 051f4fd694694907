//! Closed-form distributions for the shear-flow systems and residual checks.
//!
//! With `s = t − t₀`, the point-source solution under x-diffusion alone is a
//! Gaussian with Var X = D²s, conditional mean of y given x equal to xs/2 and
//! conditional variance D²s³/12. With y-diffusion as well the conditional
//! variance becomes D²s(1 + s²/12), which approaches the former for large s.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::quadrature::{integrate_below, integrate_line};
use crate::rng::StreamRng;
use crate::sde::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticParams {
    /// cm·s^(-1/2)
    pub diffusion: f64,
    /// Blow-up time, s.
    pub t0: f64,
    /// Similarity rate, 1/s.
    pub c: f64,
}

impl AnalyticParams {
    pub fn new(diffusion: f64, t0: f64, c: f64) -> Result<Self> {
        if !(diffusion > 0.0 && c > 0.0 && t0.is_finite()) {
            return invalid("analytic parameters need D > 0, c > 0 and finite t0");
        }
        Ok(Self { diffusion, t0, c })
    }

    fn elapsed(&self, t: f64) -> Result<f64> {
        let s = t - self.t0;
        if s > 0.0 {
            Ok(s)
        } else {
            invalid(format!("time {t} is not after the blow-up time {}", self.t0))
        }
    }
}

/// Which closed-form field to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    /// Exact solution of the x-diffusive system.
    SelfSimilar,
    /// Exact solution of the xy-diffusive system.
    Asymptotic,
    /// The self-similar form with the conditional exponent 6 replaced by 5;
    /// solves neither system.
    PerturbedSelfSimilar,
}

fn gaussian_shear(x: f64, y: f64, s: f64, d: f64, cond_var: f64) -> f64 {
    let var_x = d * d * s;
    let dy = y - 0.5 * x * s;
    (-(dy * dy) / (2.0 * cond_var) - x * x / (2.0 * var_x)).exp()
        / (2.0 * PI * (var_x * cond_var).sqrt())
}

pub fn pdf_selfsimilar(x: f64, y: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    let s = p.elapsed(t)?;
    let d2 = p.diffusion * p.diffusion;
    Ok(3f64.sqrt() / (PI * d2 * s * s)
        * (-(6.0 * (y - 0.5 * x * s).powi(2) / (d2 * s.powi(3)) + x * x / (2.0 * d2 * s))).exp())
}

pub fn pdf_asymptotic(x: f64, y: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    let s = p.elapsed(t)?;
    let d2 = p.diffusion * p.diffusion;
    Ok(gaussian_shear(x, y, s, p.diffusion, d2 * s * (1.0 + s * s / 12.0)))
}

fn pdf_perturbed(x: f64, y: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    let s = p.elapsed(t)?;
    let d2 = p.diffusion * p.diffusion;
    Ok(3f64.sqrt() / (PI * d2 * s * s)
        * (-(5.0 * (y - 0.5 * x * s).powi(2) / (d2 * s.powi(3)) + x * x / (2.0 * d2 * s))).exp())
}

pub fn pdf(field: Field, x: f64, y: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    match field {
        Field::SelfSimilar => pdf_selfsimilar(x, y, t, p),
        Field::Asymptotic => pdf_asymptotic(x, y, t, p),
        Field::PerturbedSelfSimilar => pdf_perturbed(x, y, t, p),
    }
}

/// (std x, conditional std of y given x) at elapsed time `s`.
fn widths(field: Field, s: f64, d: f64) -> (f64, f64) {
    let cond = match field {
        Field::Asymptotic => d * (s * (1.0 + s * s / 12.0)).sqrt(),
        _ => d * (s.powi(3) / 12.0).sqrt(),
    };
    (d * s.sqrt(), cond)
}

const CDF_TOL: f64 = 1e-8;

/// Joint CDF by iterated adaptive quadrature of the density.
pub fn cdf(field: Field, x: f64, y: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    let s = p.elapsed(t)?;
    let (sx, sc) = widths(field, s, p.diffusion);
    let failure = std::cell::RefCell::new(None);
    let outer = integrate_below(
        |xx| {
            let inner = integrate_below(
                |yy| pdf(field, xx, yy, t, p).unwrap_or(0.0),
                y,
                0.5 * xx * s,
                sc,
                0.1 * CDF_TOL,
            );
            match inner {
                Ok(v) => v,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    0.0
                }
            }
        },
        x,
        0.0,
        sx,
        CDF_TOL,
    )?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(outer.clamp(0.0, 1.0)),
    }
}

/// Density of the rescaled coordinates u = x/(c s)^{1/2}, v = y/(c s)^{3/2}
/// at time `t`.
pub fn rescaled_pdf_at(field: Field, u: f64, v: f64, t: f64, p: &AnalyticParams) -> Result<f64> {
    let s = p.elapsed(t)?;
    let cs = p.c * s;
    Ok(pdf(field, u * cs.sqrt(), v * cs.powf(1.5), t, p)? * cs * cs)
}

/// Time-invariant rescaled family of the self-similar solution.
pub fn rescaled_pdf(u: f64, v: f64, p: &AnalyticParams) -> f64 {
    let (c, d2) = (p.c, p.diffusion * p.diffusion);
    3f64.sqrt() * c * c / (PI * d2)
        * (-(6.0 * (v - 0.5 * u / c).powi(2) * c.powi(3) / d2 + u * u * c / (2.0 * d2))).exp()
}

pub fn rescaled_cdf(u: f64, v: f64, p: &AnalyticParams) -> Result<f64> {
    // s chosen so that c·s = 1: the rescaled family is the field at that time.
    let shifted = AnalyticParams { t0: 0.0, ..*p };
    cdf(Field::SelfSimilar, u, v, 1.0 / p.c, &shifted)
}

/// (σ_X, σ_Y, ρ) of the rescaled family.
pub fn rescaled_stats(p: &AnalyticParams) -> (f64, f64, f64) {
    let d = p.diffusion;
    (d / p.c.sqrt(), d / (3f64.sqrt() * p.c.powf(1.5)), 0.5 * 3f64.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureMoments {
    pub mass: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub corr: f64,
}

/// Moments of a 2D density by iterated quadrature over the whole plane.
pub fn quadrature_moments(
    density: impl Fn(f64, f64) -> f64,
    scale_x: f64,
    scale_y: f64,
    tol: f64,
) -> Result<QuadratureMoments> {
    let moment = |g: &dyn Fn(f64, f64) -> f64| {
        integrate_line(
            |x| {
                integrate_line(|y| density(x, y) * g(x, y), 0.0, scale_y, tol).unwrap_or(f64::NAN)
            },
            0.0,
            scale_x,
            tol,
        )
    };
    let mass = moment(&|_, _| 1.0)?;
    let mean_x = moment(&|x, _| x)?;
    let mean_y = moment(&|_, y| y)?;
    let exx = moment(&|x, _| x * x)?;
    let eyy = moment(&|_, y| y * y)?;
    let exy = moment(&|x, y| x * y)?;
    let var_x = exx - mean_x * mean_x;
    let var_y = eyy - mean_y * mean_y;
    Ok(QuadratureMoments {
        mass,
        mean_x,
        mean_y,
        var_x,
        var_y,
        corr: (exy - mean_x * mean_y) / (var_x * var_y).sqrt(),
    })
}

/// Residual of ∂P/∂t + x ∂P/∂y − (D²/2)∂²P/∂x² (− (D²/2)∂²P/∂y² for the
/// xy-diffusive model), with the largest individual term for scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub residual: f64,
    pub max_term: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        self.residual.abs() / self.max_term
    }
}

const FD_FRACTION: f64 = 2e-3;

fn d1(g: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-g(2.0 * h) + 8.0 * g(h) - 8.0 * g(-h) + g(-2.0 * h)) / (12.0 * h)
}

fn d2(g: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-g(2.0 * h) + 16.0 * g(h) - 30.0 * g(0.0) + 16.0 * g(-h) - g(-2.0 * h)) / (12.0 * h * h)
}

/// Fourth-order central finite-difference residual at (x, y, t).
pub fn pde_residual(
    field: Field,
    model: Model,
    x: f64,
    y: f64,
    t: f64,
    p: &AnalyticParams,
) -> Result<Residual> {
    let s = p.elapsed(t)?;
    let (sx, sc) = widths(field, s, p.diffusion);
    let (hx, hy, ht) = (FD_FRACTION * sx, FD_FRACTION * sc, FD_FRACTION * s);
    let f = |dx: f64, dy: f64, dt: f64| pdf(field, x + dx, y + dy, t + dt, p).unwrap_or(f64::NAN);
    let half_d2 = 0.5 * p.diffusion * p.diffusion;
    let dt_term = d1(|h| f(0.0, 0.0, h), ht);
    let adv = x * d1(|h| f(0.0, h, 0.0), hy);
    let diff_x = half_d2 * d2(|h| f(h, 0.0, 0.0), hx);
    let diff_y = match model {
        Model::DiffusiveX => 0.0,
        Model::DiffusiveXY => half_d2 * d2(|h| f(0.0, h, 0.0), hy),
    };
    let residual = dt_term + adv - diff_x - diff_y;
    let max_term = [dt_term, adv, diff_x, diff_y]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Residual { residual, max_term })
}

/// Random evaluation points (x, y, t) spread over the bulk of the field for
/// elapsed times in [0.5, 5] s.
pub fn residual_points(
    field: Field,
    p: &AnalyticParams,
    count: usize,
    rng: &mut StreamRng,
) -> Vec<(f64, f64, f64)> {
    (0..count)
        .map(|_| {
            let s = 0.5 + 4.5 * rng.uniform();
            let (sx, sc) = widths(field, s, p.diffusion);
            let x = sx * rng.standard_normal();
            let y = 0.5 * x * s + sc * rng.standard_normal();
            (x, y, p.t0 + s)
        })
        .collect()
}

/// Relative residual of the scale-invariance identity
/// L[g](A u, A^p v) = A^a L[P](u, v) for g(x, y) = P(x/A, y/A^p), where L is
/// the x-diffusive shear operator −x ∂_y + (D²/2)∂²_x, at one point.
pub fn scaling_identity_residual(
    density: impl Fn(f64, f64) -> f64,
    diffusion: f64,
    scale: f64,
    p: f64,
    a: f64,
    u: f64,
    v: f64,
    h: (f64, f64),
) -> f64 {
    let half_d2 = 0.5 * diffusion * diffusion;
    let op = |g: &dyn Fn(f64, f64) -> f64, x: f64, y: f64, hx: f64, hy: f64| {
        -x * d1(|e| g(x, y + e), hy) + half_d2 * d2(|e| g(x + e, y), hx)
    };
    let g = |x: f64, y: f64| density(x / scale, y / scale.powf(p));
    let lhs = op(&g, scale * u, scale.powf(p) * v, h.0 * scale, h.1 * scale.powf(p));
    let rhs = scale.powf(a) * op(&density, u, v, h.0, h.1);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn params() -> AnalyticParams {
        AnalyticParams::new(5.0, 0.0, 0.2).unwrap()
    }

    #[test]
    fn rejects_times_before_blow_up() {
        let p = AnalyticParams::new(5.0, 1.0, 0.2).unwrap();
        assert!(pdf_selfsimilar(0.0, 0.0, 1.0, &p).is_err());
        assert!(pdf_asymptotic(0.0, 0.0, 0.5, &p).is_err());
        assert!(AnalyticParams::new(0.0, 0.0, 0.2).is_err());
    }

    #[test]
    fn selfsimilar_matches_generic_gaussian() {
        let p = params();
        for &(x, y, t) in &[(1.0, 2.0, 1.5), (-3.0, 0.5, 4.0), (0.0, 0.0, 0.7)] {
            let d = p.diffusion;
            let want = gaussian_shear(x, y, t, d, d * d * t.powi(3) / 12.0);
            assert!((pdf_selfsimilar(x, y, t, &p).unwrap() - want).abs() < 1e-15 * want.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn ridge_of_selfsimilar_density() {
        let p = params();
        let (x, t) = (2.0, 3.0);
        let at = |y: f64| pdf_selfsimilar(x, y, t, &p).unwrap();
        let peak = 0.5 * x * t;
        assert!(at(peak) > at(peak + 1e-3) && at(peak) > at(peak - 1e-3));
    }

    #[test]
    fn selfsimilar_moments_by_quadrature() {
        let p = params();
        let t: f64 = 2.0;
        let m = quadrature_moments(
            |x, y| pdf_selfsimilar(x, y, t, &p).unwrap(),
            5.0 * t.sqrt(),
            5.0 * t.powf(1.5),
            1e-10,
        )
        .unwrap();
        assert!((m.mass - 1.0).abs() < 1e-6);
        assert!((m.var_x - 25.0 * t).abs() < 1e-5);
        assert!((m.var_y - 25.0 * t.powi(3) / 3.0).abs() < 1e-4);
        assert!((m.corr - 0.75f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn asymptotic_moments_by_quadrature() {
        let p = params();
        let t: f64 = 2.0;
        let m = quadrature_moments(
            |x, y| pdf_asymptotic(x, y, t, &p).unwrap(),
            5.0 * t.sqrt(),
            5.0 * t.powf(1.5),
            1e-10,
        )
        .unwrap();
        assert!((m.mass - 1.0).abs() < 1e-6);
        assert!((m.var_x - 25.0 * t).abs() < 1e-5);
        // conditional variance D²s(1 + s²/12) plus the shear-induced spread D²s³/4
        let want = 25.0 * t * (1.0 + t * t / 12.0) + 25.0 * t.powi(3) / 4.0;
        assert!((m.var_y - want).abs() < 1e-4, "{} {want}", m.var_y);
    }

    #[test]
    fn cdf_limits_and_monotonicity() {
        let p = params();
        let t = 1.0;
        assert!((cdf(Field::SelfSimilar, 200.0, 500.0, t, &p).unwrap() - 1.0).abs() < 1e-7);
        assert!(cdf(Field::SelfSimilar, -200.0, 3.0, t, &p).unwrap() < 1e-7);
        let a = cdf(Field::SelfSimilar, 0.0, 0.0, t, &p).unwrap();
        let b = cdf(Field::SelfSimilar, 1.0, 0.0, t, &p).unwrap();
        let c = cdf(Field::SelfSimilar, 1.0, 1.0, t, &p).unwrap();
        assert!(a <= b && b <= c);
        // P(X<0, Y<0) for correlation ρ: 1/4 + asin(ρ)/(2π)
        let want = 0.25 + (0.75f64.sqrt()).asin() / (2.0 * PI);
        assert!((a - want).abs() < 1e-7);
    }

    #[test]
    fn rescaled_family_is_time_invariant() {
        let p = AnalyticParams::new(5.0, -1.0, 0.2).unwrap();
        for &(u, v) in &[(0.0, 0.0), (5.0, 20.0), (-8.0, -30.0)] {
            let a = rescaled_pdf_at(Field::SelfSimilar, u, v, 1.0, &p).unwrap();
            let b = rescaled_pdf_at(Field::SelfSimilar, u, v, 7.0, &p).unwrap();
            let fam = rescaled_pdf(u, v, &p);
            assert!((a - b).abs() < 1e-14 * fam.max(1e-300) && (a - fam).abs() < 1e-12 * fam.max(1e-300) + 1e-300);
        }
        let (sx, sy, rho) = rescaled_stats(&params());
        assert!((sx - 11.1803).abs() < 1e-4);
        assert!((sy - 32.2749).abs() < 1e-4);
        assert!((rho - 0.86603).abs() < 1e-5);
    }

    #[test]
    fn asymptotic_approaches_selfsimilar_family() {
        let p = params();
        let mut last = f64::INFINITY;
        for s in [1.0, 10.0, 100.0] {
            let gap = [(0.0, 0.0), (5.0, 20.0), (-10.0, -10.0)]
                .iter()
                .map(|&(u, v)| {
                    (rescaled_pdf_at(Field::Asymptotic, u, v, s, &p).unwrap() - rescaled_pdf(u, v, &p)).abs()
                })
                .fold(0.0, f64::max);
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn residuals_vanish_for_exact_fields() {
        let p = params();
        let mut rng = RngStream::new(26, 0).rng();
        for (field, model) in [(Field::SelfSimilar, Model::DiffusiveX), (Field::Asymptotic, Model::DiffusiveXY)] {
            for (x, y, t) in residual_points(field, &p, 20, &mut rng) {
                let r = pde_residual(field, model, x, y, t, &p).unwrap();
                assert!(r.relative() < 1e-6, "{field:?} {x} {y} {t} {r:?}");
            }
        }
    }

    #[test]
    fn residual_detects_wrong_field() {
        let p = params();
        let mut rng = RngStream::new(27, 0).rng();
        // the perturbed residual changes sign, so single points can sit near
        // a zero crossing; the median must be far off
        let mut rel: Vec<f64> = residual_points(Field::SelfSimilar, &p, 20, &mut rng)
            .into_iter()
            .map(|(x, y, t)| {
                pde_residual(Field::PerturbedSelfSimilar, Model::DiffusiveX, x, y, t, &p)
                    .unwrap()
                    .relative()
            })
            .collect();
        rel.sort_by(f64::total_cmp);
        assert!(rel[10] > 1e-2, "{rel:?}");
        // the wrong operator also fails
        let r = pde_residual(Field::SelfSimilar, Model::DiffusiveXY, 1.0, 1.0, 2.0, &p).unwrap();
        assert!(r.relative() > 1e-2);
    }

    #[test]
    fn scaling_identity_holds_for_three_and_minus_two() {
        let p = params();
        let density = |u: f64, v: f64| pdf_selfsimilar(u, v, 1.3, &p).unwrap();
        for scale in [2.0, 2.5] {
            let r = scaling_identity_residual(density, 5.0, scale, 3.0, -2.0, 1.0, 2.0, (0.05, 0.02));
            assert!(r < 1e-6, "{r}");
            let wrong = scaling_identity_residual(density, 5.0, scale, 2.5, -2.0, 1.0, 2.0, (0.05, 0.02));
            assert!(wrong > 1e-2);
        }
    }
}
