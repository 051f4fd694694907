//! Restriction (particles to CDF/ICDF observables) and lifting (observables
//! back to particles).

use crate::error::{invalid, Result};
use crate::rng::StreamRng;
use crate::sde::ParticleEnsemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::X => Axis::Y,
            Axis::Y => Axis::X,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            _ => invalid(format!("unknown axis `{s}` (expected x or y)")),
        }
    }
}

/// Which coordinate carries the marginal ICDF; the other is conditioned on
/// quantile bands of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub marginal_axis: Axis,
}

impl Orientation {
    pub const MARGINAL_X: Orientation = Orientation {
        marginal_axis: Axis::X,
    };
    pub const MARGINAL_Y: Orientation = Orientation {
        marginal_axis: Axis::Y,
    };

    pub fn conditional_axis(self) -> Axis {
        self.marginal_axis.other()
    }

    fn split<'a>(self, e: &'a ParticleEnsemble) -> (&'a [f64], &'a [f64]) {
        match self.marginal_axis {
            Axis::X => (&e.x, &e.y),
            Axis::Y => (&e.y, &e.x),
        }
    }

    fn join(self, marginal: Vec<f64>, conditional: Vec<f64>) -> ParticleEnsemble {
        match self.marginal_axis {
            Axis::X => ParticleEnsemble {
                x: marginal,
                y: conditional,
            },
            Axis::Y => ParticleEnsemble {
                x: conditional,
                y: marginal,
            },
        }
    }
}

/// Sampled quantile function: values at strictly increasing ranks in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct IcdfSamples {
    ranks: Vec<f64>,
    values: Vec<f64>,
}

impl IcdfSamples {
    /// Checks ranks and finiteness. Monotonicity of the values is not
    /// enforced here so that unrepaired reconstructions can be represented;
    /// see [`IcdfSamples::is_monotone`].
    pub fn new(ranks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if ranks.len() != values.len() {
            return invalid(format!(
                "{} ranks but {} values",
                ranks.len(),
                values.len()
            ));
        }
        if ranks.is_empty() {
            return invalid("ICDF needs at least one sample");
        }
        if ranks.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return invalid("ICDF ranks must lie in the open interval (0, 1)");
        }
        if ranks.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("ICDF ranks must be strictly increasing");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("ICDF values must be finite");
        }
        Ok(Self { ranks, values })
    }

    /// Midpoint ranks (i − 0.5)/n for i = 1..=n.
    pub fn midpoint_ranks(n: usize) -> Vec<f64> {
        let nf = n as f64;
        (1..=n).map(|i| (i as f64 - 0.5) / nf).collect()
    }

    /// Order-statistic ICDF of already sorted values.
    pub fn from_sorted(values: Vec<f64>) -> Result<Self> {
        Self::new(Self::midpoint_ranks(values.len()), values)
    }

    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }

    /// Piecewise-linear interpolant, extended linearly past the end samples.
    pub fn eval(&self, f: f64) -> f64 {
        let r = &self.ranks;
        let v = &self.values;
        let n = r.len();
        if n == 1 {
            return v[0];
        }
        let i = r.partition_point(|&q| q < f).clamp(1, n - 1);
        let t = (f - r[i - 1]) / (r[i] - r[i - 1]);
        v[i - 1] + t * (v[i] - v[i - 1])
    }
}

/// Conditional ICDFs of the conditional axis within equal-count rank bands of
/// the marginal axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFamily {
    pub orientation: Orientation,
    /// Marginal-axis level representing each band, cm.
    pub levels: Vec<f64>,
    pub bands: Vec<IcdfSamples>,
}

impl ConditionalFamily {
    pub fn band_count(&self) -> usize {
        self.bands.len()
    }
}

/// Empirical joint CDF on a rectangular mesh. `values[r * grid_x.len() + c]`
/// is the CDF at `(grid_x[c], grid_y[r])`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfGrid {
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    pub values: Vec<f64>,
}

impl CdfGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_x.len() + col]
    }
}

fn check_grid(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return invalid(format!("{name} must be non-empty"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{name} must be finite"));
    }
    if g.windows(2).any(|w| w[1] < w[0]) {
        return invalid(format!("{name} must be sorted ascending"));
    }
    Ok(())
}

/// Counts particles with `x_i <= gx` and `y_i <= gy` at every mesh point and
/// reports `(N_f - 0.5)/N`, clamped at zero for empty corners.
pub fn restrict_cdf(ensemble: &ParticleEnsemble, grid_x: &[f64], grid_y: &[f64]) -> Result<CdfGrid> {
    if ensemble.is_empty() {
        return invalid("cannot restrict an empty ensemble");
    }
    check_grid("grid_x", grid_x)?;
    check_grid("grid_y", grid_y)?;
    let (nx, ny) = (grid_x.len(), grid_y.len());
    // Bucket (r, c) holds particles first counted at mesh point (r, c); the
    // extra row/column collects particles beyond the mesh.
    let mut counts = vec![0u32; (ny + 1) * (nx + 1)];
    for (&x, &y) in ensemble.x.iter().zip(&ensemble.y) {
        let c = grid_x.partition_point(|&g| g < x);
        let r = grid_y.partition_point(|&g| g < y);
        counts[r * (nx + 1) + c] += 1;
    }
    let n = ensemble.len() as f64;
    let mut cum = vec![0u32; ny * nx];
    for r in 0..ny {
        let mut row_sum = 0u32;
        for c in 0..nx {
            row_sum += counts[r * (nx + 1) + c];
            let above = if r > 0 { cum[(r - 1) * nx + c] } else { 0 };
            cum[r * nx + c] = row_sum + above;
        }
    }
    let values = cum
        .into_iter()
        .map(|k| (k as f64 - 0.5).max(0.0) / n)
        .collect();
    Ok(CdfGrid {
        grid_x: grid_x.to_vec(),
        grid_y: grid_y.to_vec(),
        values,
    })
}

/// Uniform mesh of `points` nodes per axis spanning `[lo, hi]`.
pub fn uniform_mesh(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + h * i as f64).collect()
}

/// The 41 × 41 reporting mesh over the ensemble's bounding box.
pub fn reporting_mesh(ensemble: &ParticleEnsemble) -> (Vec<f64>, Vec<f64>) {
    let bounds = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)))
    };
    let (x0, x1) = bounds(&ensemble.x);
    let (y0, y1) = bounds(&ensemble.y);
    (uniform_mesh(x0, x1, 41), uniform_mesh(y0, y1, 41))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Order-statistic ICDF of the marginal coordinate.
pub fn marginal_icdf(ensemble: &ParticleEnsemble, orientation: Orientation) -> Result<IcdfSamples> {
    if ensemble.len() < 2 {
        return invalid("marginal ICDF needs at least two particles");
    }
    let (m, _) = orientation.split(ensemble);
    IcdfSamples::from_sorted(sorted(m))
}

/// Splits particles into `bands` equal-count bands by marginal rank (the
/// remainder joins the last band) and returns each band's conditional ICDF.
pub fn conditional_icdfs(
    ensemble: &ParticleEnsemble,
    bands: usize,
    orientation: Orientation,
) -> Result<ConditionalFamily> {
    let n = ensemble.len();
    if bands == 0 {
        return invalid("band count must be at least 1");
    }
    if n < 2 * bands {
        return invalid(format!("{bands} bands need at least {} particles, got {n}", 2 * bands));
    }
    let (m, c) = orientation.split(ensemble);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[a].total_cmp(&m[b]).then(a.cmp(&b)));
    let width = n / bands;
    let half = n / (2 * bands);
    let mut levels = Vec::with_capacity(bands);
    let mut family = Vec::with_capacity(bands);
    for k in 0..bands {
        let lo = k * width;
        let hi = if k + 1 == bands { n } else { lo + width };
        levels.push(m[order[lo + half - 1]]);
        let mut vals: Vec<f64> = order[lo..hi].iter().map(|&i| c[i]).collect();
        vals.sort_by(f64::total_cmp);
        family.push(IcdfSamples::from_sorted(vals)?);
    }
    Ok(ConditionalFamily {
        orientation,
        levels,
        bands: family,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    /// Use the band the particle's marginal rank falls in.
    NearestBand,
    /// Blend the two bands whose centre ranks bracket the particle's rank.
    LinearBetweenBands,
}

impl Interp {
    pub fn name(self) -> &'static str {
        match self {
            Interp::NearestBand => "nearest-band",
            Interp::LinearBetweenBands => "linear-between-bands",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest-band" => Ok(Interp::NearestBand),
            "linear-between-bands" => Ok(Interp::LinearBetweenBands),
            _ => invalid(format!("unknown interpolation `{s}`")),
        }
    }
}

/// Builds `n` particles: marginal coordinates at the deterministic ranks
/// (i − 0.5)/n, conditional coordinates by inverse transform of one uniform
/// per particle, drawn in particle order.
pub fn lift(
    marginal: &IcdfSamples,
    family: &ConditionalFamily,
    n: usize,
    rng: &mut StreamRng,
    interp: Interp,
) -> Result<ParticleEnsemble> {
    let bands = family.band_count();
    if n == 0 {
        return invalid("lift needs n >= 1");
    }
    if bands == 0 {
        return invalid("conditional family is empty");
    }
    if n < bands {
        return invalid(format!("cannot lift {n} particles into {bands} bands"));
    }
    if !marginal.is_monotone() || family.bands.iter().any(|b| !b.is_monotone()) {
        return invalid("lift requires monotone ICDFs (apply monotone repair first)");
    }
    let width = n / bands;
    let nf = n as f64;
    let mut m = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let rank = (i as f64 + 0.5) / nf;
        m.push(marginal.eval(rank));
        let u = rng.uniform();
        let v = match interp {
            Interp::NearestBand => family.bands[(i / width).min(bands - 1)].eval(u),
            Interp::LinearBetweenBands => {
                let pos = rank * bands as f64 - 0.5;
                if pos <= 0.0 {
                    family.bands[0].eval(u)
                } else if pos >= (bands - 1) as f64 {
                    family.bands[bands - 1].eval(u)
                } else {
                    let k = pos.floor() as usize;
                    let w = pos - k as f64;
                    (1.0 - w) * family.bands[k].eval(u) + w * family.bands[k + 1].eval(u)
                }
            }
        };
        c.push(v);
    }
    Ok(family.orientation.join(m, c))
}
