//! Debiased Sinkhorn divergence between uniform point clouds.
//!
//! Ground cost is `C(x, y) = ½‖x − y‖²` and the entropic temperature is
//! `ε = blur²`. Potentials are updated in the log domain and ε is annealed
//! geometrically from `½·diameter²` down to the target, which keeps the
//! iteration stable at blur values as small as `1e-5`. Cross-term updates
//! are over-relaxed.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Configuration of the entropic solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornParams {
    /// Length scale; the temperature is `blur^p`.
    pub blur: f64,
    /// Cost exponent. Only `2` is supported.
    pub p: u32,
    /// Multiplicative ε decrease per annealing level, in `(0, 1)`.
    pub scaling: f64,
    /// Maximum number of annealing levels.
    pub max_outer: usize,
    /// Maximum number of potential updates per annealing level.
    pub max_inner: usize,
    /// Sup-norm change of the potentials below which the final level stops.
    pub dual_tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            blur: 1e-5,
            p: 2,
            scaling: 0.5,
            max_outer: 200,
            max_inner: 100,
            dual_tol: 1e-6,
        }
    }
}

impl SinkhornParams {
    pub fn with_blur(blur: f64) -> Self {
        Self {
            blur,
            ..Self::default()
        }
    }

    /// Entropic regularization temperature `blur^p`.
    pub fn eps(&self) -> f64 {
        self.blur.powi(self.p as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p != 2 {
            return Err(Error::Config(format!(
                "sinkhorn exponent p must be 2, got {}",
                self.p
            )));
        }
        if !(self.blur.is_finite() && self.blur > 0.0) || !(self.eps() > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn blur must be positive with blur^2 > 0, got {}",
                self.blur
            )));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::Config(format!(
                "sinkhorn scaling must lie in (0, 1), got {}",
                self.scaling
            )));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config(
                "sinkhorn iteration budgets must be positive".into(),
            ));
        }
        if !(self.dual_tol > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn dual_tol must be positive, got {}",
                self.dual_tol
            )));
        }
        Ok(())
    }

    /// Annealing temperatures, ending exactly at `eps()`.
    ///
    /// Starts at `½·diameter²` (or at the target when that is already
    /// smaller) and keeps at most `max_outer` levels, dropping the
    /// coarsest ones first.
    pub fn schedule(&self, diameter: f64) -> Vec<f64> {
        let target = self.eps();
        let start = 0.5 * diameter * diameter;
        let mut levels = Vec::new();
        let mut eps = start;
        while eps > target {
            levels.push(eps);
            eps *= self.scaling;
        }
        levels.push(target);
        if levels.len() > self.max_outer {
            levels.drain(..levels.len() - self.max_outer);
        }
        levels
    }
}

/// Uniformly weighted point cloud stored row-major in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    len: usize,
    dim: usize,
}

impl PointCloud {
    pub fn from_f32_rows(rows: &[f32], dim: usize) -> Result<Self> {
        Self::from_f64_rows(rows.iter().map(|&v| f64::from(v)).collect(), dim)
    }

    pub fn from_f64_rows(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("point cloud dimension is zero".into()));
        }
        if points.is_empty() {
            return Err(Error::Precondition("point cloud is empty".into()));
        }
        if points.len() % dim != 0 {
            return Err(Error::shape(dim, points.len() % dim));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite coordinate in point cloud row {}",
                pos / dim
            )));
        }
        let len = points.len() / dim;
        Ok(Self { points, len, dim })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Canonical order used to orient a pair before solving.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.len.cmp(&other.len).then_with(|| {
            self.points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

fn half_sq_dist(x: &[f64], y: &[f64]) -> f64 {
    0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Cost matrix `C[i][j] = ½‖a_i − b_j‖²`, row-major `a.len() × b.len()`.
pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let mut cost = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let x = a.point(i);
        cost.extend((0..b.len()).map(|j| half_sq_dist(x, b.point(j))));
    }
    cost
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

/// Largest pairwise Euclidean distance within the union of the clouds.
pub fn diameter(clouds: &[&PointCloud]) -> f64 {
    let points: Vec<&[f64]> = clouds
        .iter()
        .flat_map(|c| (0..c.len()).map(move |i| c.point(i)))
        .collect();
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.max(half_sq_dist(points[i], points[j]));
        }
    }
    (2.0 * best).sqrt()
}

/// Terms this far below the largest exponent cannot change the f64 sum.
const UNDERFLOW: f64 = -50.0;

/// `out[i] = −ε·log Σ_j w·exp((pot_j − cost[i][j]) / ε)` for uniform
/// weights `w = exp(log_w)`.
fn softmin(eps: f64, cost: &[f64], log_w: f64, pot: &[f64], out: &mut [f64]) {
    let cols = pot.len();
    let inv = 1.0 / eps;
    let cutoff = UNDERFLOW * eps;
    for (i, slot) in out.iter_mut().enumerate() {
        let row = &cost[i * cols..(i + 1) * cols];
        let max = pot
            .iter()
            .zip(row)
            .map(|(p, c)| p - c)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, c) in pot.iter().zip(row) {
            let d = p - c - max;
            if d > cutoff {
                sum += (d * inv).exp();
            }
        }
        *slot = -(max + eps * (log_w + sum.ln()));
    }
}

fn sup_change(prev: &[f64], next: &[f64]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Intermediate levels only need to warm-start the next one, so they stop
/// once the potentials move less than a fixed fraction of the temperature.
fn level_tol(params: &SinkhornParams, eps: f64, last: bool) -> f64 {
    if last {
        params.dual_tol
    } else {
        params.dual_tol.max(LEVEL_REL_TOL * eps)
    }
}

const LEVEL_REL_TOL: f64 = 1e-1;

/// Over-relaxation factor of the cross updates; any value in (0, 2) keeps
/// the fixed point. Plain updates crawl once ε is small against the cost
/// gaps.
const OVER_RELAXATION: f64 = 1.8;

/// `current ← current + ω·(update − current)`; returns the sup-norm size of
/// the plain step.
fn relax(current: &mut [f64], update: &[f64]) -> f64 {
    let change = sup_change(current, update);
    for (c, u) in current.iter_mut().zip(update) {
        *c += OVER_RELAXATION * (u - *c);
    }
    change
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Solution of one entropic transport problem between uniform measures.
#[derive(Clone, Debug)]
pub struct EntropicTransport {
    /// Dual objective `⟨α, f⟩ + ⟨β, g⟩`, which equals `OT_ε` at convergence.
    pub cost: f64,
    /// Potential on the first measure.
    pub f: Vec<f64>,
    /// Potential on the second measure.
    pub g: Vec<f64>,
    pub eps: f64,
    pub converged: bool,
    pub levels: usize,
    pub iterations: usize,
}

impl EntropicTransport {
    /// Transport plan induced by the potentials, row-major `n_a × n_b`.
    pub fn plan(&self, a: &PointCloud, b: &PointCloud) -> Vec<f64> {
        let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
        let cost = cost_matrix(a, b);
        let mut plan = Vec::with_capacity(cost.len());
        for i in 0..a.len() {
            for j in 0..b.len() {
                let c = cost[i * b.len() + j];
                plan.push(wa * wb * ((self.f[i] + self.g[j] - c) / self.eps).exp());
            }
        }
        plan
    }
}

/// Entropic optimal transport `OT_ε(α, β)` between uniform clouds.
///
/// The pair is solved in a canonical orientation so that swapping the
/// arguments swaps the potentials and leaves the cost bitwise unchanged.
pub fn entropic_transport(
    a: &PointCloud,
    b: &PointCloud,
    params: &SinkhornParams,
) -> Result<EntropicTransport> {
    params.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    if a.canonical_cmp(b) == Ordering::Greater {
        let mut t = solve_cross(b, a, params);
        std::mem::swap(&mut t.f, &mut t.g);
        return Ok(t);
    }
    Ok(solve_cross(a, b, params))
}

fn solve_cross(a: &PointCloud, b: &PointCloud, params: &SinkhornParams) -> EntropicTransport {
    let (n, m) = (a.len(), b.len());
    let cost = cost_matrix(a, b);
    let cost_t = transpose(&cost, n, m);
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let schedule = params.schedule(diameter(&[a, b]));

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut update_f = vec![0.0; n];
    let mut update_g = vec![0.0; m];
    // Initial potentials are the softmin against zero at the coarsest level.
    softmin(schedule[0], &cost, log_b, &g, &mut f);
    softmin(schedule[0], &cost_t, log_a, &f, &mut g);

    let mut iterations = 0;
    let mut converged = false;
    for (level, &eps) in schedule.iter().enumerate() {
        let last = level + 1 == schedule.len();
        for _ in 0..params.max_inner {
            softmin(eps, &cost, log_b, &g, &mut update_f);
            let change_f = relax(&mut f, &update_f);
            softmin(eps, &cost_t, log_a, &f, &mut update_g);
            let change_g = relax(&mut g, &update_g);
            iterations += 1;
            // Stop on the size of the plain (unrelaxed) update.
            let change = change_f.max(change_g);
            if change <= level_tol(params, eps, last) {
                converged = last;
                break;
            }
        }
    }

    // A final plain update leaves g the exact soft c-transform of f, so
    // the dual objective below is evaluated on a consistent pair.
    let eps = *schedule.last().expect("schedule is never empty");
    softmin(eps, &cost, log_b, &g, &mut f);
    softmin(eps, &cost_t, log_a, &f, &mut g);

    EntropicTransport {
        cost: mean(&f) + mean(&g),
        f,
        g,
        eps: params.eps(),
        converged,
        levels: schedule.len(),
        iterations,
    }
}

/// Half of the symmetric self-transport cost, `½·OT_ε(α, α)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfTransport {
    pub half_cost: f64,
    pub converged: bool,
}

/// Solves `OT_ε(α, α)` with averaged symmetric updates `f ← ½(f + softmin(f))`.
pub fn self_transport(a: &PointCloud, params: &SinkhornParams) -> Result<SelfTransport> {
    params.validate()?;
    let n = a.len();
    let cost = cost_matrix(a, a);
    let log_a = -(n as f64).ln();
    let schedule = params.schedule(diameter(&[a]));

    let mut f = vec![0.0; n];
    let mut next = vec![0.0; n];
    softmin(schedule[0], &cost, log_a, &f.clone(), &mut f);
    let mut converged = false;
    for (level, &eps) in schedule.iter().enumerate() {
        let last = level + 1 == schedule.len();
        for _ in 0..params.max_inner {
            softmin(eps, &cost, log_a, &f, &mut next);
            for (nx, fx) in next.iter_mut().zip(&f) {
                *nx = 0.5 * (*nx + fx);
            }
            let change = sup_change(&f, &next);
            std::mem::swap(&mut f, &mut next);
            if change <= level_tol(params, eps, last) {
                converged = last;
                break;
            }
        }
    }
    Ok(SelfTransport {
        half_cost: mean(&f),
        converged,
    })
}

/// Debiased divergence value with its convergence status.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub converged: bool,
}

/// Combines a cross term with the two self terms, clamping at zero.
pub fn debias(cross: &EntropicTransport, self_a: &SelfTransport, self_b: &SelfTransport) -> Divergence {
    let value = (cross.cost - (self_a.half_cost + self_b.half_cost)).max(0.0);
    Divergence {
        value,
        converged: cross.converged && self_a.converged && self_b.converged,
    }
}

/// `S_ε(α, β) = OT_ε(α, β) − ½OT_ε(α, α) − ½OT_ε(β, β)`, clamped to `≥ 0`.
///
/// Reaching the iteration budget is not an error: the best estimate is
/// returned with `converged == false`.
pub fn sinkhorn_divergence(
    a: &PointCloud,
    b: &PointCloud,
    params: &SinkhornParams,
) -> Result<Divergence> {
    let cross = entropic_transport(a, b, params)?;
    let self_a = self_transport(a, params)?;
    let self_b = self_transport(b, params)?;
    Ok(debias(&cross, &self_a, &self_b))
}
