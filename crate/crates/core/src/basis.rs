//! Orthonormal shifted-Legendre representation of quantile functions.

use crate::error::{invalid, Result};
use crate::observables::{
    conditional_icdfs, marginal_icdf, ConditionalFamily, IcdfSamples, Interp, Orientation,
};
use crate::rng::StreamRng;
use crate::sde::ParticleEnsemble;

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let derivative = |x: f64| {
        let (p, p_prev) = legendre_pair(n, x);
        (p, nf * (x * p - p_prev) / (x * x - 1.0))
    };
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = derivative(x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = derivative(x);
        let w = 1.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// (P_n(x), P_{n-1}(x)) by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut p_prev, mut p) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// θ_0..θ_order at `f`, written into `out`.
pub fn basis_values(order: usize, f: f64, out: &mut [f64]) {
    let x = 2.0 * f - 1.0;
    let (mut p_prev, mut p) = (1.0, x);
    out[0] = 1.0;
    if order >= 1 {
        out[1] = 3f64.sqrt() * x;
    }
    for q in 2..=order {
        let qf = q as f64;
        let next = ((2.0 * qf - 1.0) * x * p - (qf - 1.0) * p_prev) / qf;
        p_prev = p;
        p = next;
        out[q] = (2.0 * qf + 1.0).sqrt() * p;
    }
}

#[derive(Clone, Debug)]
pub struct LegendreBasis {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// θ_q at each node, node-major.
    table: Vec<f64>,
}

pub const QUADRATURE_NODES: usize = 64;

impl LegendreBasis {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(QUADRATURE_NODES);
        let mut table = vec![0.0; nodes.len() * (order + 1)];
        for (i, &f) in nodes.iter().enumerate() {
            basis_values(order, f, &mut table[i * (order + 1)..(i + 1) * (order + 1)]);
        }
        Self {
            order,
            nodes,
            weights,
            table,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Coefficients of an arbitrary quantile function.
    pub fn project_fn(&self, icdf: impl Fn(f64) -> f64) -> Vec<f64> {
        let k = self.order + 1;
        let mut beta = vec![0.0; k];
        for (i, (&f, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = w * icdf(f);
            for (b, t) in beta.iter_mut().zip(&self.table[i * k..(i + 1) * k]) {
                *b += v * t;
            }
        }
        beta
    }

    /// Coefficients of the piecewise-linear interpolant of the samples.
    pub fn project(&self, icdf: &IcdfSamples) -> Result<Vec<f64>> {
        if icdf.len() < 2 {
            return invalid("projection needs at least two ICDF samples");
        }
        Ok(self.project_fn(|f| icdf.eval(f)))
    }

    /// Σ β_q θ_q(f) at each rank, without repair.
    pub fn evaluate(&self, coefficients: &[f64], ranks: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; self.order + 1];
        ranks
            .iter()
            .map(|&f| {
                basis_values(self.order, f, &mut theta);
                coefficients.iter().zip(&theta).map(|(b, t)| b * t).sum()
            })
            .collect()
    }

    /// Series evaluation followed by monotone repair. Returns the repaired
    /// samples and the largest pointwise change the repair made.
    pub fn reconstruct(&self, coefficients: &[f64], ranks: &[f64]) -> Result<(IcdfSamples, f64)> {
        if coefficients.len() != self.order + 1 {
            return invalid(format!(
                "expected {} coefficients, got {}",
                self.order + 1,
                coefficients.len()
            ));
        }
        let raw = self.evaluate(coefficients, ranks);
        let repaired = monotone_repair(&raw);
        let change = raw
            .iter()
            .zip(&repaired)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok((IcdfSamples::new(ranks.to_vec(), repaired)?, change))
    }
}

/// Least-squares closest non-decreasing sequence (pool adjacent violators).
pub fn monotone_repair(values: &[f64]) -> Vec<f64> {
    // Each block: (sum, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 <= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, c0 + c1);
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, c) in blocks {
        out.extend(std::iter::repeat_n(s / c as f64, c));
    }
    out
}

/// Coefficients of the marginal ICDF (row 0) and the band conditionals
/// (rows 1..=M).
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseState {
    pub beta: Vec<Vec<f64>>,
    pub orientation: Orientation,
}

/// Number of ranks the conditional ICDFs are reconstructed on before lifting.
pub const CONDITIONAL_RESOLUTION: usize = 512;

impl CoarseState {
    pub fn new(beta: Vec<Vec<f64>>, orientation: Orientation) -> Result<Self> {
        if beta.len() < 2 {
            return invalid("coarse state needs a marginal row and at least one band");
        }
        let k = beta[0].len();
        if k == 0 || beta.iter().any(|r| r.len() != k) {
            return invalid("coefficient rows must be non-empty and of equal length");
        }
        if beta.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("coefficients must be finite");
        }
        Ok(Self { beta, orientation })
    }

    pub fn bands(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn order(&self) -> usize {
        self.beta[0].len() - 1
    }

    /// Restriction followed by projection.
    pub fn restrict(
        ensemble: &ParticleEnsemble,
        bands: usize,
        orientation: Orientation,
        basis: &LegendreBasis,
    ) -> Result<Self> {
        let marginal = marginal_icdf(ensemble, orientation)?;
        let family = conditional_icdfs(ensemble, bands, orientation)?;
        let mut beta = Vec::with_capacity(bands + 1);
        beta.push(basis.project(&marginal)?);
        for b in &family.bands {
            beta.push(basis.project(b)?);
        }
        Ok(Self { beta, orientation })
    }

    /// Same quantile functions in every band (independent coordinates).
    pub fn from_icdfs(
        marginal: impl Fn(f64) -> f64,
        conditional: impl Fn(f64) -> f64,
        bands: usize,
        orientation: Orientation,
        basis: &LegendreBasis,
    ) -> Self {
        let m = basis.project_fn(marginal);
        let c = basis.project_fn(conditional);
        let mut beta = vec![m];
        beta.extend(std::iter::repeat_n(c, bands));
        Self { beta, orientation }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.beta.iter().flatten().copied().collect()
    }

    /// Zeroes even modes q ≥ 2 in every row.
    pub fn suppress_even_modes(&mut self) {
        for row in &mut self.beta {
            for (q, b) in row.iter_mut().enumerate() {
                if is_suppressed_mode(q) {
                    *b = 0.0;
                }
            }
        }
    }

    /// Coefficients that take part in time extrapolation.
    pub fn active_count(&self, suppress_even: bool) -> usize {
        let per_row = (0..=self.order())
            .filter(|&q| !(suppress_even && is_suppressed_mode(q)))
            .count();
        per_row * self.beta.len()
    }

    /// Reconstructs the marginal at `n` midpoint ranks and the conditionals
    /// at [`CONDITIONAL_RESOLUTION`] ranks. The second value is the largest
    /// repair made, relative to the marginal's range.
    pub fn icdfs(&self, basis: &LegendreBasis, n: usize) -> Result<(IcdfSamples, ConditionalFamily, f64)> {
        let (marginal, mut worst) = basis.reconstruct(&self.beta[0], &IcdfSamples::midpoint_ranks(n))?;
        let ranks = IcdfSamples::midpoint_ranks(CONDITIONAL_RESOLUTION);
        let mut bands = Vec::with_capacity(self.bands());
        for row in &self.beta[1..] {
            let (s, r) = basis.reconstruct(row, &ranks)?;
            worst = worst.max(r);
            bands.push(s);
        }
        let m = self.bands();
        let levels = (0..m)
            .map(|k| marginal.eval((k as f64 + 0.5) / m as f64))
            .collect();
        let span = marginal.values()[marginal.len() - 1] - marginal.values()[0];
        let rel = if span > 0.0 { worst / span } else { worst };
        let family = ConditionalFamily {
            orientation: self.orientation,
            levels,
            bands,
        };
        Ok((marginal, family, rel))
    }

    /// Lifts `n` particles; returns the ensemble and the relative repair.
    pub fn lift(
        &self,
        basis: &LegendreBasis,
        n: usize,
        rng: &mut StreamRng,
        interp: Interp,
    ) -> Result<(ParticleEnsemble, f64)> {
        let (marginal, family, repair) = self.icdfs(basis, n)?;
        Ok((crate::observables::lift(&marginal, &family, n, rng, interp)?, repair))
    }
}

pub fn is_suppressed_mode(q: usize) -> bool {
    q >= 2 && q % 2 == 0
}
