//! Adaptive Gauss–Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

const MAX_INTERVALS: usize = 4000;

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive bisection: repeatedly splits the interval with the
/// largest error estimate until the summed estimate meets `tol`.
fn adapt(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut parts = vec![(a, b, gk15(f, a, b))];
    loop {
        let (total, err) = parts
            .iter()
            .fold((0.0, 0.0), |(v, e), &(_, _, (pv, pe))| (v + pv, e + pe));
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand on [{a}, {b}]")));
        }
        if err <= tol || err <= 1e-14 * f64::abs(total) {
            return Ok(total);
        }
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::Numerical(format!(
                "quadrature on [{a}, {b}] stalled at error {err:e} (tolerance {tol:e})"
            )));
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(Error::Numerical(format!(
                "quadrature on [{a}, {b}] cannot subdivide further (error {err:e})"
            )));
        }
        parts.push((lo, mid, gk15(f, lo, mid)));
        parts.push((mid, hi, gk15(f, mid, hi)));
    }
}

/// ∫_a^b f with absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    adapt(&f, a, b, tol)
}

/// ∫_{-∞}^upper f for an integrand concentrated around `centre` with width
/// `scale`. Both tails are mapped onto finite intervals that cluster nodes
/// near `centre`.
pub fn integrate_below(
    f: impl Fn(f64) -> f64,
    upper: f64,
    centre: f64,
    scale: f64,
    tol: f64,
) -> Result<f64> {
    let split = upper.min(centre);
    let lower_tail = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        let v = f(split - scale * (1.0 - t) / t) * scale / (t * t);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mut total = adapt(&lower_tail, 0.0, 1.0, if upper > centre { 0.5 * tol } else { tol })?;
    if upper > centre {
        let d = upper - centre;
        let t_max = d / (d + scale);
        let rise = |t: f64| {
            let one_minus = 1.0 - t;
            f(centre + scale * t / one_minus) * scale / (one_minus * one_minus)
        };
        total += adapt(&rise, 0.0, t_max, 0.5 * tol)?;
    }
    Ok(total)
}

/// ∫_{-∞}^{∞} f for an integrand concentrated around `centre`.
pub fn integrate_line(f: impl Fn(f64) -> f64, centre: f64, scale: f64, tol: f64) -> Result<f64> {
    let lower = integrate_below(&f, centre, centre, scale, 0.5 * tol)?;
    let upper = integrate_below(|x| f(2.0 * centre - x), centre, centre, scale, 0.5 * tol)?;
    Ok(lower + upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_low_degree() {
        let v = integrate(|x| x.powi(7) - 3.0 * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - (256.0 / 8.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn smooth_and_peaked_integrands() {
        let v = integrate(f64::exp, 0.0, 1.0, 1e-13).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        let v = integrate(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-9).unwrap();
        let want = 2.0 * 100.0 * (100.0f64).atan();
        assert!((v - want).abs() < 1e-7);
    }

    #[test]
    fn gaussian_tails() {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = integrate_below(pdf, 0.0, 0.0, 1.0, 1e-12).unwrap();
        assert!((v - 0.5).abs() < 1e-11);
        for upper in [-3.0, 1.0, 40.0] {
            let v = integrate_below(pdf, upper, 0.0, 1.0, 1e-12).unwrap();
            assert!((v - crate::rng::standard_normal_cdf(upper)).abs() < 1e-11);
        }
        let v = integrate_line(|x| pdf((x - 3.0) / 2.0) / 2.0, 3.0, 2.0, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-11);
    }
}
