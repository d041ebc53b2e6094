//! Killed random walk quantities on a finite [`Geometry`]: Green matrices,
//! entrance probabilities, hitting kernels, harmonic extensions, and the trace
//! Dirichlet form on a finite site set.
//!
//! The walk takes each of the 2d nearest-neighbor steps with probability
//! (1−θ)/2d and dies with probability θ at every step; it also dies on entering
//! the absorbing set (and, in box mode, on stepping out of the box). All
//! quantities reduce to linear systems in the sparse operator A = I − (1−θ)P
//! restricted to the non-absorbed sites; A is symmetric positive definite with
//! condition number at most (2−θ)/θ, so plain conjugate gradients converge
//! quickly and deterministically.

use crate::lattice::{Geometry, Mode};
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Relative residual at which linear solves terminate.
const CG_REL_TOL: f64 = 1e-12;
const CG_MAX_ITER: usize = 100_000;

/// Mass and absorbing set of the killed walk.
#[derive(Debug, Clone)]
pub struct WalkParams {
    theta: f64,
    killed: Vec<usize>,
}

impl WalkParams {
    /// Uniform killing with mass θ ∈ (0,1] and an absorbing vertex set.
    /// The massless walk (θ = 0) is excluded.
    pub fn new(theta: f64, mut killed: Vec<usize>) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::config(format!(
                "mass must lie in (0,1], got {theta}"
            )));
        }
        killed.sort_unstable();
        killed.dedup();
        Ok(WalkParams { theta, killed })
    }

    /// Uniform killing only (U = ∅).
    pub fn massive(theta: f64) -> Result<Self> {
        Self::new(theta, Vec::new())
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// The absorbing set U (sorted).
    pub fn killed(&self) -> &[usize] {
        &self.killed
    }

    /// Same mass, absorbing set U ∪ extra.
    pub fn with_extra_killed(&self, extra: &[usize]) -> Result<WalkParams> {
        let mut killed = self.killed.clone();
        killed.extend_from_slice(extra);
        WalkParams::new(self.theta, killed)
    }
}

/// Truncation margin (in lattice steps) for approximating ℤᵈ quantities on a
/// box with absorbing halo: ⌈(10/θ)·ln 10⌉, which keeps the truncation error
/// of the Green function below 10⁻¹⁰/θ since g(x,y) ≤ (1−θ)^|x−y|/θ.
pub fn default_margin(theta: f64) -> i64 {
    ((10.0 / theta) * 10f64.ln()).ceil() as i64
}

/// The sparse operator A = I − (1−θ)P on the non-absorbed sites of a geometry.
/// Vectors are full-length; absorbed entries are pinned to zero.
pub(crate) struct KilledOperator<'a> {
    geom: &'a Geometry,
    step: f64,
    pub active: Vec<bool>,
}

impl<'a> KilledOperator<'a> {
    pub fn new(geom: &'a Geometry, params: &WalkParams) -> Self {
        Self::with_removed(geom, params, &[])
    }

    /// Operator with absorbing set U ∪ removed.
    pub fn with_removed(geom: &'a Geometry, params: &WalkParams, removed: &[usize]) -> Self {
        let mut active = vec![true; geom.len()];
        for &u in params.killed() {
            active[u] = false;
        }
        for &u in removed {
            active[u] = false;
        }
        KilledOperator {
            geom,
            step: (1.0 - params.theta) / (2.0 * geom.dim() as f64),
            active,
        }
    }

    /// Per-step probability (1−θ)/2d.
    pub fn step(&self) -> f64 {
        self.step
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            if !self.active[i] {
                *yi = 0.0;
                continue;
            }
            let mut acc = 0.0;
            self.geom.for_each_neighbor(i, |n| {
                if self.active[n] {
                    acc += x[n];
                }
            });
            *yi = x[i] - self.step * acc;
        }
    }

    /// Solves A x = b by conjugate gradients. `b` must vanish on absorbed sites.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = b.len();
        let bs: f64 = b.iter().map(|v| v * v).sum();
        if bs == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        for (i, ri) in r.iter_mut().enumerate() {
            if !self.active[i] {
                *ri = 0.0;
            }
        }
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rs: f64 = r.iter().map(|v| v * v).sum();
        let target = CG_REL_TOL * CG_REL_TOL * bs;
        let mut iter = 0;
        while rs > target {
            if iter >= CG_MAX_ITER {
                return Err(Error::SolverFailure(format!(
                    "conjugate gradients stalled at relative residual {:.3e}; \
                     this cannot happen for positive mass and signals an indexing bug",
                    (rs / bs).sqrt()
                )));
            }
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rs / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rs_new / rs;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs = rs_new;
            iter += 1;
        }
        Ok(x)
    }
}

fn validate_sites(geom: &Geometry, params: &WalkParams, sites: &[usize]) -> Result<()> {
    for &s in sites {
        if s >= geom.len() {
            return Err(Error::config(format!("site index {s} out of range")));
        }
        if params.killed().binary_search(&s).is_ok() {
            return Err(Error::config(format!(
                "site {s} lies in the absorbing set"
            )));
        }
    }
    let mut sorted = sites.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sites.len() {
        return Err(Error::config("site list contains duplicates"));
    }
    Ok(())
}

/// Dense symmetric positive-definite Green matrix g_{θ,U}(x,y) on an ordered
/// finite index set.
#[derive(Debug, Clone)]
pub struct GreenOperator {
    sites: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl GreenOperator {
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn record(&self, geom: &Geometry, theta: f64) -> GreenRecord {
        GreenRecord {
            schema: GREEN_SCHEMA.to_string(),
            dim: geom.dim(),
            mode: geom.mode(),
            theta,
            index: self.sites.iter().map(|&s| geom.coord(s)).collect(),
            matrix: self.matrix.transpose().as_slice().to_vec(),
        }
    }
}

pub const GREEN_SCHEMA: &str = "green-operator/v1";
pub const TRACE_SCHEMA: &str = "trace-form/v1";

/// JSON-serializable form of a Green matrix: coordinate index list plus the
/// row-major matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreenRecord {
    pub schema: String,
    pub dim: usize,
    pub mode: Mode,
    pub theta: f64,
    pub index: Vec<Vec<i64>>,
    pub matrix: Vec<f64>,
}

impl GreenRecord {
    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.index.len();
        DMatrix::from_row_slice(k, k, &self.matrix)
    }
}

/// Trace Dirichlet form data on an ordered site set K: symmetric conductances
/// c^tr(x,y), killing weights κ^tr(x), and self-return probabilities r(x).
#[derive(Debug, Clone)]
pub struct TraceForm {
    sites: Vec<usize>,
    conductance: DMatrix<f64>,
    killing: Vec<f64>,
    self_return: Vec<f64>,
}

impl TraceForm {
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// c^tr(x,y) = P^x[H̃_K < ∞, X_{H̃_K} = y] for x ≠ y; zero on the diagonal.
    pub fn conductance(&self) -> &DMatrix<f64> {
        &self.conductance
    }

    /// κ^tr(x) = P^x[H̃_K = ∞].
    pub fn killing(&self) -> &[f64] {
        &self.killing
    }

    /// r(x) = P^x[H̃_K < ∞, X_{H̃_K} = x].
    pub fn self_return(&self) -> &[f64] {
        &self.self_return
    }

    /// Matrix of the quadratic form: A_xx = κ^tr(x) + Σ_{y≠x} c^tr(x,y),
    /// A_xy = −c^tr(x,y). Satisfies A · G|_K = I.
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        let k = self.sites.len();
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            let mut diag = self.killing[i];
            for j in 0..k {
                if i != j {
                    diag += self.conductance[(i, j)];
                    a[(i, j)] = -self.conductance[(i, j)];
                }
            }
            a[(i, i)] = diag;
        }
        a
    }

    /// Quadratic form value ½Σ c^tr (f(y)−f(x))² + Σ κ^tr f(x)².
    pub fn energy(&self, f: &[f64]) -> f64 {
        let k = self.sites.len();
        let mut e = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                let d = f[j] - f[i];
                e += self.conductance[(i, j)] * d * d;
            }
            e += self.killing[i] * f[i] * f[i];
        }
        e
    }

    pub fn record(&self, geom: &Geometry, theta: f64) -> TraceRecord {
        TraceRecord {
            schema: TRACE_SCHEMA.to_string(),
            dim: geom.dim(),
            mode: geom.mode(),
            theta,
            index: self.sites.iter().map(|&s| geom.coord(s)).collect(),
            conductance: self.conductance.transpose().as_slice().to_vec(),
            killing: self.killing.clone(),
            self_return: self.self_return.clone(),
        }
    }
}

/// JSON-serializable form of a trace Dirichlet form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema: String,
    pub dim: usize,
    pub mode: Mode,
    pub theta: f64,
    pub index: Vec<Vec<i64>>,
    pub conductance: Vec<f64>,
    pub killing: Vec<f64>,
    pub self_return: Vec<f64>,
}

/// Full Green column g_{θ,U}(·, y).
pub fn green_column(geom: &Geometry, params: &WalkParams, y: usize) -> Result<Vec<f64>> {
    validate_sites(geom, params, &[y])?;
    let op = KilledOperator::new(geom, params);
    let mut b = vec![0.0; geom.len()];
    b[y] = 1.0;
    op.solve(&b)
}

/// Green matrix on the index set `sites`, by one linear solve per site.
pub fn green_matrix(geom: &Geometry, params: &WalkParams, sites: &[usize]) -> Result<GreenOperator> {
    if sites.is_empty() {
        return Err(Error::config("index set must be nonempty"));
    }
    validate_sites(geom, params, sites)?;
    let op = KilledOperator::new(geom, params);
    let k = sites.len();
    let mut m = DMatrix::zeros(k, k);
    let mut b = vec![0.0; geom.len()];
    for (j, &y) in sites.iter().enumerate() {
        b[y] = 1.0;
        let col = op.solve(&b)?;
        b[y] = 0.0;
        for (i, &x) in sites.iter().enumerate() {
            m[(i, j)] = col[x];
        }
    }
    // Columns are solved independently; the result is symmetric to solver
    // tolerance. Make it exact so downstream factorizations see an SPD matrix.
    let m = (&m + m.transpose()) * 0.5;
    Ok(GreenOperator {
        sites: sites.to_vec(),
        matrix: m,
    })
}

/// Hitting kernel of K under P_{θ,U}: for each y ∈ K the full field
/// x ↦ P^x_{θ,U}[H_K < ∞, X_{H_K} = y].
#[derive(Debug, Clone)]
pub struct HittingKernel {
    sites: Vec<usize>,
    columns: Vec<Vec<f64>>,
}

impl HittingKernel {
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// P^x[H_K < ∞, X_{H_K} = y] for the `j`-th site y of K.
    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    /// Harmonic extension μ_x = Σ_y P^x[H_K<∞, X_{H_K}=y] φ_y of boundary
    /// values on K; equals the boundary value on K itself.
    pub fn extend(&self, boundary: &[f64]) -> Vec<f64> {
        let n = self.columns[0].len();
        let mut mu = vec![0.0; n];
        for (col, &phi) in self.columns.iter().zip(boundary) {
            if phi == 0.0 {
                continue;
            }
            for (m, &p) in mu.iter_mut().zip(col) {
                *m += p * phi;
            }
        }
        mu
    }

    /// P^x[H_K < ∞].
    pub fn entrance_probability(&self, x: usize) -> f64 {
        self.columns.iter().map(|c| c[x]).sum()
    }
}

/// Computes the hitting kernel of K by one solve per site of K.
pub fn hitting_kernel(
    geom: &Geometry,
    params: &WalkParams,
    sites: &[usize],
) -> Result<HittingKernel> {
    if sites.is_empty() {
        return Err(Error::config("hitting set must be nonempty"));
    }
    validate_sites(geom, params, sites)?;
    let op = KilledOperator::with_removed(geom, params, sites);
    let step = op.step();
    let mut columns = Vec::with_capacity(sites.len());
    for &y in sites {
        let mut b = vec![0.0; geom.len()];
        geom.for_each_neighbor(y, |w| {
            if op.active[w] {
                b[w] += step;
            }
        });
        let mut u = op.solve(&b)?;
        // Entrance at time zero: the kernel is δ on K itself.
        u[y] = 1.0;
        columns.push(u);
    }
    Ok(HittingKernel {
        sites: sites.to_vec(),
        columns,
    })
}

/// Entrance probability P^x_{θ,U}[H_K < ∞].
pub fn hitting_probability(
    geom: &Geometry,
    params: &WalkParams,
    x: usize,
    sites: &[usize],
) -> Result<f64> {
    if sites.is_empty() {
        return Err(Error::config("hitting set must be nonempty"));
    }
    validate_sites(geom, params, sites)?;
    if sites.contains(&x) {
        return Ok(1.0);
    }
    validate_sites(geom, params, &[x])?;
    let op = KilledOperator::with_removed(geom, params, sites);
    let step = op.step();
    let mut b = vec![0.0; geom.len()];
    for &y in sites {
        geom.for_each_neighbor(y, |w| {
            if op.active[w] {
                b[w] += step;
            }
        });
    }
    let v = op.solve(&b)?;
    Ok(v[x])
}

/// Harmonic extension of boundary values on K (convenience wrapper around
/// [`hitting_kernel`]).
pub fn harmonic_extension(
    geom: &Geometry,
    params: &WalkParams,
    sites: &[usize],
    boundary: &[f64],
) -> Result<Vec<f64>> {
    if boundary.len() != sites.len() {
        return Err(Error::config("boundary values must match the site list"));
    }
    Ok(hitting_kernel(geom, params, sites)?.extend(boundary))
}

/// Trace Dirichlet form on K: conductances by first-step decomposition and one
/// linear solve per site, killing weights from the escape probability.
pub fn trace_form(geom: &Geometry, params: &WalkParams, sites: &[usize]) -> Result<TraceForm> {
    if sites.is_empty() {
        return Err(Error::config("index set must be nonempty"));
    }
    validate_sites(geom, params, sites)?;
    let k = sites.len();
    let op = KilledOperator::with_removed(geom, params, sites);
    let step = op.step();
    let in_k = |w: usize| sites.contains(&w);

    // u_y(z) = P^z[H_K < ∞, X_{H_K} = y]; v = Σ_y u_y.
    let mut v = vec![0.0; geom.len()];
    let mut c = DMatrix::zeros(k, k);
    for (j, &y) in sites.iter().enumerate() {
        let mut b = vec![0.0; geom.len()];
        geom.for_each_neighbor(y, |w| {
            if op.active[w] {
                b[w] += step;
            }
        });
        let u = op.solve(&b)?;
        for (i, &x) in sites.iter().enumerate() {
            let mut acc = 0.0;
            geom.for_each_neighbor(x, |w| {
                if w == y {
                    acc += 1.0;
                } else if op.active[w] {
                    acc += u[w];
                }
            });
            c[(i, j)] = step * acc;
        }
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi += ui;
        }
    }

    let asym = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| (c[(i, j)] - c[(j, i)]).abs())
        .fold(0.0f64, f64::max);
    if asym > 1e-9 {
        return Err(Error::SolverFailure(format!(
            "trace conductances asymmetric by {asym:.3e}; reversibility violated"
        )));
    }
    let c = (&c + c.transpose()) * 0.5;

    // κ^tr(x) = θ plus the mass of first steps that die in U (or leave the
    // box) or walk off without ever returning to K.
    let theta = params.theta();
    let mut killing = Vec::with_capacity(k);
    let mut self_return = Vec::with_capacity(k);
    for (i, &x) in sites.iter().enumerate() {
        let mut kappa = theta;
        let mut reported = 0usize;
        geom.for_each_neighbor(x, |w| {
            reported += 1;
            if op.active[w] {
                kappa += step * (1.0 - v[w]);
            } else if !in_k(w) {
                // First step straight into the absorbing set U.
                kappa += step;
            }
        });
        // Steps leaving a box are absorbed by the halo.
        kappa += step * (2 * geom.dim() - reported) as f64;
        killing.push(kappa);
        self_return.push(c[(i, i)]);
    }
    let mut c = c;
    for i in 0..k {
        c[(i, i)] = 0.0;
    }
    Ok(TraceForm {
        sites: sites.to_vec(),
        conductance: c,
        killing,
        self_return,
    })
}

/// Max residual of the strong Markov decomposition
/// g_{θ,U}(x,y) = g_{θ,U∪K}(x,y) + Σ_{z∈K} P^x_{θ,U}[H_K<∞, X_{H_K}=z]·g_{θ,U}(z,y)
/// over the sampled (x,y) pairs.
pub fn markov_decomposition_check(
    geom: &Geometry,
    params: &WalkParams,
    sites: &[usize],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if sites.is_empty() {
        // Empty decomposition: both Green functions coincide.
        return Ok(0.0);
    }
    validate_sites(geom, params, sites)?;
    let kernel = hitting_kernel(geom, params, sites)?;
    let params_uk = params.with_extra_killed(sites)?;
    let mut worst = 0.0f64;
    for &(x, y) in pairs {
        validate_sites(geom, params, &[y])?;
        let g_u = green_column(geom, params, y)?;
        let g_uk = if sites.contains(&x) || sites.contains(&y) {
            0.0
        } else {
            green_column(geom, &params_uk, y)?[x]
        };
        let mut decomposed = g_uk;
        for (j, &z) in sites.iter().enumerate() {
            decomposed += kernel.column(j)[x] * g_u[z];
        }
        worst = worst.max((g_u[x] - decomposed).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn origin(geom: &Geometry) -> usize {
        geom.index(&vec![0; geom.dim()])
    }

    #[test]
    fn theta_one_green_is_identity() {
        let geom = Geometry::torus(3, 3).unwrap();
        let params = WalkParams::massive(1.0).unwrap();
        let sites: Vec<usize> = vec![0, 5, 17, 100];
        let g = green_matrix(&geom, &params, &sites).unwrap();
        for i in 0..sites.len() {
            for j in 0..sites.len() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g.entry(i, j), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn absorbed_site_has_zero_green() {
        let geom = Geometry::zd_box(2, 6).unwrap();
        let z = geom.index(&[1, 0]);
        let params = WalkParams::new(0.4, vec![z]).unwrap();
        let y = geom.index(&[3, 2]);
        let col = green_column(&geom, &params, y).unwrap();
        assert_eq!(col[z], 0.0);
    }

    #[test]
    fn massless_rejected() {
        assert!(WalkParams::massive(0.0).is_err());
        assert!(WalkParams::massive(-0.1).is_err());
        assert!(WalkParams::massive(1.1).is_err());
    }

    /// Truncated Neumann series oracle: g(0,0) = Σ_{n≤60} (1−θ)ⁿ P₀[Xₙ=0] on a
    /// box so large that 60 steps cannot reach the halo, so the oracle equals
    /// the ℤᵈ series up to the 2⁻⁶⁰ tail.
    #[test]
    fn green_diagonal_matches_neumann_series() {
        let geom = Geometry::zd_box(3, 61).unwrap();
        let theta = 0.5;
        let params = WalkParams::massive(theta).unwrap();
        let o = origin(&geom);

        let n = geom.len();
        let mut p = vec![0.0f64; n];
        p[o] = 1.0;
        let mut next = vec![0.0f64; n];
        let mut series = p[o];
        let step_weight = 1.0 / 6.0;
        for step in 1..=60 {
            for slot in next.iter_mut() {
                *slot = 0.0;
            }
            for (i, &pi) in p.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                let w = pi * step_weight;
                geom.for_each_neighbor(i, |nb| next[nb] += w);
            }
            std::mem::swap(&mut p, &mut next);
            series += (1.0 - theta).powi(step) * p[o];
        }

        let g = green_matrix(&geom, &params, &[o]).unwrap();
        assert_abs_diff_eq!(
            g.entry(0, 0),
            series,
            epsilon = 2f64.powi(-60) * 4.0 + 1e-10
        );
    }

    #[test]
    fn hitting_probability_trivials() {
        let geom = Geometry::zd_box(3, 5).unwrap();
        let o = origin(&geom);
        let x = geom.index(&[1, 0, 0]);
        let k = vec![o];
        let p1 = WalkParams::massive(1.0).unwrap();
        assert_eq!(hitting_probability(&geom, &p1, o, &k).unwrap(), 1.0);
        assert_eq!(hitting_probability(&geom, &p1, x, &k).unwrap(), 0.0);
    }

    /// Entrance-probability identity: P^x[H_K<∞] = Σ_y g(x,y) · P^y[H̃_K=∞],
    /// with the two sides assembled from independent solves.
    #[test]
    fn entrance_probability_identity() {
        for geom in [Geometry::zd_box(2, 10).unwrap(), Geometry::torus(3, 4).unwrap()] {
            let params = WalkParams::massive(0.5).unwrap();
            let o = origin(&geom);
            let k: Vec<usize> = geom.ball(o, 1).unwrap().into_iter().take(4).collect();
            let tf = trace_form(&geom, &params, &k).unwrap();
            let x = geom.index(&vec![3; geom.dim()]);
            let direct = hitting_probability(&geom, &params, x, &k).unwrap();
            let mut via_green = 0.0;
            for (j, &y) in k.iter().enumerate() {
                let col = green_column(&geom, &params, y).unwrap();
                via_green += col[x] * tf.killing()[j];
            }
            assert_abs_diff_eq!(direct, via_green, epsilon = 1e-9);
        }
    }

    #[test]
    fn harmonic_extension_basics() {
        let geom = Geometry::zd_box(2, 8).unwrap();
        let params = WalkParams::massive(0.4).unwrap();
        let k = vec![geom.index(&[0, 0]), geom.index(&[1, 0])];
        let zero = harmonic_extension(&geom, &params, &k, &[0.0, 0.0]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let ones = harmonic_extension(&geom, &params, &k, &[1.0, 1.0]).unwrap();
        let x = geom.index(&[4, -2]);
        let hit = hitting_probability(&geom, &params, x, &k).unwrap();
        assert_abs_diff_eq!(ones[x], hit, epsilon = 1e-10);
        // |μ| ≤ max |φ| · P[H_K < ∞]
        let mixed = harmonic_extension(&geom, &params, &k, &[1.0, -1.0]).unwrap();
        assert!(mixed[x].abs() <= hit + 1e-12);
        assert_eq!(mixed[k[0]], 1.0);
        assert_eq!(mixed[k[1]], -1.0);
    }

    #[test]
    fn trace_form_theta_one() {
        let geom = Geometry::torus(2, 4).unwrap();
        let params = WalkParams::massive(1.0).unwrap();
        let k = vec![0, 3, 20];
        let tf = trace_form(&geom, &params, &k).unwrap();
        for i in 0..k.len() {
            assert_abs_diff_eq!(tf.killing()[i], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(tf.self_return()[i], 0.0, epsilon = 1e-14);
            for j in 0..k.len() {
                assert_abs_diff_eq!(tf.conductance()[(i, j)], 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn killing_dominates_theta_and_mass_splits() {
        for theta in [0.2, 0.5, 0.9] {
            let geom = Geometry::torus(2, 5).unwrap();
            let params = WalkParams::massive(theta).unwrap();
            let o = origin(&geom);
            let mut k = geom.ball(o, 1).unwrap();
            k.truncate(5);
            let tf = trace_form(&geom, &params, &k).unwrap();
            for (i, _) in k.iter().enumerate() {
                assert!(tf.killing()[i] >= theta - 1e-12);
                let total: f64 = tf.killing()[i]
                    + tf.self_return()[i]
                    + (0..k.len())
                        .filter(|&j| j != i)
                        .map(|j| tf.conductance()[(i, j)])
                        .sum::<f64>();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn singleton_killing_inverts_green_diagonal() {
        let geom = Geometry::zd_box(3, 7).unwrap();
        let params = WalkParams::massive(0.5).unwrap();
        let o = origin(&geom);
        let tf = trace_form(&geom, &params, &[o]).unwrap();
        let g = green_matrix(&geom, &params, &[o]).unwrap();
        assert_abs_diff_eq!(tf.killing()[0], 1.0 / g.entry(0, 0), epsilon = 1e-10);
    }

    #[test]
    fn precision_inverts_green() {
        for geom in [Geometry::zd_box(2, 9).unwrap(), Geometry::torus(3, 4).unwrap()] {
            let params = WalkParams::massive(0.3).unwrap();
            let o = origin(&geom);
            let k: Vec<usize> = geom.ball(o, 1).unwrap();
            let g = green_matrix(&geom, &params, &k).unwrap();
            let tf = trace_form(&geom, &params, &k).unwrap();
            let product = tf.precision_matrix() * g.matrix();
            let id = DMatrix::<f64>::identity(k.len(), k.len());
            let err = (&product - id).abs().max();
            assert!(err < 1e-9, "A·G−I deviates by {err:.3e}");
        }
    }

    #[test]
    fn markov_decomposition_trivials_and_random() {
        let geom = Geometry::zd_box(3, 6).unwrap();
        let params = WalkParams::massive(0.5).unwrap();
        assert_eq!(
            markov_decomposition_check(&geom, &params, &[], &[(0, 1)]).unwrap(),
            0.0
        );
        let k: Vec<usize> = vec![
            geom.index(&[0, 0, 0]),
            geom.index(&[1, 0, 0]),
            geom.index(&[0, -2, 1]),
            geom.index(&[2, 2, 0]),
        ];
        // x inside K: the hitting distribution is δ_x and the killed Green
        // function vanishes, so the residual collapses.
        let res = markov_decomposition_check(&geom, &params, &k, &[(k[1], geom.index(&[3, 3, 3]))])
            .unwrap();
        assert!(res < 1e-10, "immediate-hit residual {res:.3e}");
        let pairs: Vec<(usize, usize)> = (0..20)
            .map(|i| {
                (
                    geom.index(&[(i % 5) - 2, (i % 3) - 1, 4 - (i % 4)]),
                    geom.index(&[-(i % 4), (i % 5) - 2, i % 2]),
                )
            })
            .collect();
        let res = markov_decomposition_check(&geom, &params, &k, &pairs).unwrap();
        assert!(res <= 1e-8, "strong Markov residual {res:.3e}");
    }

    #[test]
    fn green_decreases_in_theta() {
        let geom = Geometry::zd_box(2, 8).unwrap();
        let o = origin(&geom);
        let x = geom.index(&[2, 1]);
        let mut prev: Option<(f64, f64)> = None;
        for theta in [0.2, 0.35, 0.5, 0.65, 0.8, 0.95] {
            let params = WalkParams::massive(theta).unwrap();
            let col = green_column(&geom, &params, o).unwrap();
            if let Some((d, off)) = prev {
                assert!(col[o] < d);
                assert!(col[x] < off);
            }
            prev = Some((col[o], col[x]));
        }
    }

    #[test]
    fn green_decays_exponentially() {
        let geom = Geometry::zd_box(2, 14).unwrap();
        let o = origin(&geom);
        for theta in [0.3, 0.7] {
            let params = WalkParams::massive(theta).unwrap();
            let col = green_column(&geom, &params, o).unwrap();
            let pts: Vec<(f64, f64)> = (1..=8)
                .map(|r| (r as f64, col[geom.index(&[r, 0])].ln()))
                .collect();
            let n = pts.len() as f64;
            let sx: f64 = pts.iter().map(|p| p.0).sum();
            let sy: f64 = pts.iter().map(|p| p.1).sum();
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            assert!(
                slope < -theta,
                "decay rate {slope:.3} too shallow for theta={theta}"
            );
        }
    }

    #[test]
    fn records_round_trip() {
        let geom = Geometry::torus(2, 4).unwrap();
        let params = WalkParams::massive(0.6).unwrap();
        let k = vec![0, 9, 33];
        let g = green_matrix(&geom, &params, &k).unwrap();
        let rec = g.record(&geom, 0.6);
        let json = serde_json::to_string(&rec).unwrap();
        let back: GreenRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.schema, GREEN_SCHEMA);
        assert_eq!(back.matrix(), g.matrix().clone_owned());
        let tf = trace_form(&geom, &params, &k).unwrap();
        let trec = tf.record(&geom, 0.6);
        let json = serde_json::to_string(&trec).unwrap();
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.killing, tf.killing());
    }
}
