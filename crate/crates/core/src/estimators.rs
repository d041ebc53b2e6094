//! Seeded Monte Carlo estimation of level-set observables: crossing-probability
//! curves on boxes and annulus-event curves on tori, conditional influences,
//! the covariance form of the level derivative, threshold location, and the
//! decay/sharpness fits on either side of it.
//!
//! Replicas are embarrassingly parallel; replica r of every experiment draws
//! from the stream `(seed, label, salt..., r)`, and aggregation reduces
//! per-replica results in replica order, so output is independent of worker
//! count. Curve estimators evaluate the whole level grid on each sample
//! through the critical-level sweep, which makes estimated curves exactly
//! monotone in the level.

use crate::field::{BoxSampler, FieldSampler, TorusSampler, DEFAULT_CHOLESKY_CAP};
use crate::lattice::Geometry;
use crate::levelset::{annulus_event, CrossingSweep, IncreasingEvent, OccupationField};
use crate::oracle::quadrature::{normal_upper, normal_upper_inv};
use crate::rng;
use crate::walks::{self, default_margin, WalkParams};
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};

pub const CURVE_SCHEMA: &str = "curve-table/v1";
pub const THRESHOLD_SCHEMA: &str = "threshold-report/v1";

/// A Monte Carlo value with its sample count, standard error and 95% interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub n: usize,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    /// Proportion estimate. The interval is the normal approximation away from
    /// the edges and Clopper–Pearson when fewer than eight successes or
    /// failures were observed.
    pub fn proportion(successes: usize, n: usize) -> Estimate {
        assert!(successes <= n && n > 0);
        let p = successes as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let (lo, hi) = if successes < 8 || n - successes < 8 {
            clopper_pearson(successes, n, 0.95)
        } else {
            ((p - 1.96 * se).max(0.0), (p + 1.96 * se).min(1.0))
        };
        Estimate {
            value: p,
            n,
            se,
            lo,
            hi,
        }
    }

    pub fn with_normal_interval(value: f64, n: usize, se: f64) -> Estimate {
        Estimate {
            value,
            n,
            se,
            lo: value - 1.96 * se,
            hi: value + 1.96 * se,
        }
    }
}

/// Two-sided Clopper–Pearson interval at the given confidence.
pub fn clopper_pearson(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let k = successes as f64;
    let nf = n as f64;
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, nf - k + 1.0)
            .expect("valid parameters")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        Beta::new(k + 1.0, nf - k)
            .expect("valid parameters")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// One-sided upper Clopper–Pearson bound, used for zero-success rows.
pub fn clopper_pearson_upper(successes: usize, n: usize, confidence: f64) -> f64 {
    if successes == n {
        return 1.0;
    }
    Beta::new(successes as f64 + 1.0, (n - successes) as f64)
        .expect("valid parameters")
        .inverse_cdf(confidence)
}

/// One row of an estimated curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub theta: f64,
    pub scale: i64,
    pub level: f64,
    pub n: usize,
    pub successes: usize,
    pub p_hat: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Estimated crossing or annulus curve, one row per level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveTable {
    pub schema: String,
    pub shared_seed: bool,
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    fn from_counts(
        theta: f64,
        scale: i64,
        levels: &[f64],
        counts: &[usize],
        n: usize,
        shared_seed: bool,
    ) -> CurveTable {
        let rows = levels
            .iter()
            .zip(counts)
            .map(|(&level, &k)| {
                let e = Estimate::proportion(k, n);
                CurveRow {
                    theta,
                    scale,
                    level,
                    n,
                    successes: k,
                    p_hat: e.value,
                    se: e.se,
                    lo: e.lo,
                    hi: e.hi,
                }
            })
            .collect();
        CurveTable {
            schema: CURVE_SCHEMA.to_string(),
            shared_seed,
            rows,
        }
    }

    /// Fixed CSV schema: `theta,L,h,n,p_hat,se,lo,hi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,L,h,n,p_hat,se,lo,hi\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.theta, r.scale, r.level, r.n, r.p_hat, r.se, r.lo, r.hi
            ));
        }
        out
    }

    pub fn merged(tables: Vec<CurveTable>) -> CurveTable {
        let shared = tables.iter().all(|t| t.shared_seed);
        let rows = tables.into_iter().flat_map(|t| t.rows).collect();
        CurveTable {
            schema: CURVE_SCHEMA.to_string(),
            shared_seed: shared,
            rows,
        }
    }
}

/// Field source for crossing-curve estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Spectral sampling on a torus of half-side 2L + margin; wrap-around
    /// images sit at distance ≥ 2·margin from the observation window.
    Torus,
    /// Dense factorization on the box of radius 2L + margin with absorbing
    /// halo; only feasible below the factorization cap.
    DenseBox,
}

/// Parameters of one crossing-curve experiment at fixed (θ, L).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PCurveConfig {
    pub dim: usize,
    pub theta: f64,
    pub scale: i64,
    pub levels: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    /// Truncation margin; defaults to ⌈(10/θ)·ln 10⌉.
    pub margin: Option<i64>,
    pub sampler: SamplerKind,
}

impl PCurveConfig {
    pub fn new(dim: usize, theta: f64, scale: i64, levels: Vec<f64>, replicas: usize, seed: u64) -> Self {
        PCurveConfig {
            dim,
            theta,
            scale,
            levels,
            replicas,
            seed,
            margin: None,
            sampler: SamplerKind::Torus,
        }
    }

    pub fn margin(&self) -> i64 {
        self.margin.unwrap_or_else(|| default_margin(self.theta))
    }
}

fn validate_curve_config(levels: &[f64], replicas: usize, scale: i64, theta: f64) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::config("level grid must be nonempty"));
    }
    if replicas == 0 {
        return Err(Error::config("at least one replica required"));
    }
    if scale < 1 {
        return Err(Error::config("scale must be at least 1"));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config("mass must lie in (0,1]"));
    }
    Ok(())
}

/// Per-replica critical levels of the crossing B(0,L) ↔ S(0,2L): the largest
/// h at which the crossing holds in replica r. Everything about the p-curve is
/// a function of these.
pub fn p_curve_critical_levels(cfg: &PCurveConfig) -> Result<Vec<f64>> {
    validate_curve_config(&cfg.levels, cfg.replicas, cfg.scale, cfg.theta)?;
    let margin = cfg.margin();
    let radius = 2 * cfg.scale + margin;
    let (geom, sampler): (Geometry, Box<dyn FieldSampler>) = match cfg.sampler {
        SamplerKind::Torus => {
            let geom = Geometry::torus(cfg.dim, radius)?;
            let sampler = TorusSampler::new(&geom, cfg.theta)?;
            (geom, Box::new(sampler))
        }
        SamplerKind::DenseBox => {
            let geom = Geometry::zd_box(cfg.dim, radius)?;
            let params = WalkParams::massive(cfg.theta)?;
            let sampler = BoxSampler::new(&geom, &params, DEFAULT_CHOLESKY_CAP)?;
            (geom, Box::new(sampler))
        }
    };
    let origin = geom.index(&vec![0; cfg.dim]);
    let window = geom.ball(origin, 2 * cfg.scale)?;
    let inner = geom.ball(origin, cfg.scale)?;
    let outer = geom.sphere(origin, 2 * cfg.scale)?;
    let sweep = CrossingSweep::new(&geom, window, &inner, &outer)?;
    let theta_bits = cfg.theta.to_bits();
    let sampler = &*sampler;
    let sweep = &sweep;
    Ok((0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(
                cfg.seed,
                "pcurve",
                &[theta_bits, cfg.scale as u64, r as u64],
            );
            let values = sampler.sample_values(&mut rng);
            sweep.critical_level(&values)
        })
        .collect())
}

/// Crossing-probability curve with shared-sample coupling across the grid.
pub fn estimate_p_curve(cfg: &PCurveConfig) -> Result<CurveTable> {
    let critical = p_curve_critical_levels(cfg)?;
    let counts: Vec<usize> = cfg
        .levels
        .iter()
        .map(|&h| critical.iter().filter(|&&c| c >= h).count())
        .collect();
    Ok(CurveTable::from_counts(
        cfg.theta,
        cfg.scale,
        &cfg.levels,
        &counts,
        cfg.replicas,
        true,
    ))
}

/// Independent reference simulator: i.i.d. Bernoulli site percolation on the
/// same crossing geometry, parametrized by the site density. No Gaussian
/// machinery is involved; rows carry the density in the level column and
/// θ = 1 for bookkeeping.
pub fn estimate_p_curve_bernoulli(
    dim: usize,
    scale: i64,
    densities: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<CurveTable> {
    validate_curve_config(densities, replicas, scale, 1.0)?;
    if densities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("site densities must lie in [0,1]"));
    }
    let geom = Geometry::zd_box(dim, 2 * scale)?;
    let origin = geom.index(&vec![0; dim]);
    let window = geom.ball(origin, 2 * scale)?;
    let inner = geom.ball(origin, scale)?;
    let outer = geom.sphere(origin, 2 * scale)?;
    let sweep = CrossingSweep::new(&geom, window, &inner, &outer)?;
    let sweep = &sweep;
    let len = geom.len();
    // Site open at density p iff u ≤ p; sweeping -u makes the critical level
    // -u*, so the crossing holds at density p iff p ≥ u*.
    let critical_density: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "bernoulli-pcurve", &[scale as u64, r as u64]);
            let values: Vec<f64> = (0..len).map(|_| -rng.random::<f64>()).collect();
            -sweep.critical_level(&values)
        })
        .collect();
    let counts: Vec<usize> = densities
        .iter()
        .map(|&p| critical_density.iter().filter(|&&u| u <= p).count())
        .collect();
    Ok(CurveTable::from_counts(
        1.0,
        scale,
        densities,
        &counts,
        replicas,
        true,
    ))
}

/// Parameters of one annulus-event experiment on the torus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QCurveConfig {
    pub dim: usize,
    pub theta: f64,
    /// Mesh L of the annulus geometry.
    pub mesh: i64,
    /// Scale factor ℓ.
    pub scale: i64,
    /// Torus half-side L̄ (must satisfy 4ℓL < 2L̄).
    pub half_side: i64,
    pub levels: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
}

/// Annulus-event curve q(h) = ℙ[some B(x,ℓL) ↔ S(x,2ℓL) crossing], evaluated
/// on every level of the grid per torus sample.
pub fn estimate_q_curve(cfg: &QCurveConfig) -> Result<CurveTable> {
    validate_curve_config(&cfg.levels, cfg.replicas, cfg.mesh, cfg.theta)?;
    let geom = Geometry::torus(cfg.dim, cfg.half_side)?;
    // Validates the annulus preconditions.
    crate::levelset::AnnulusEvent::new(&geom, cfg.mesh, cfg.scale)?;
    let sampler = TorusSampler::new(&geom, cfg.theta)?;
    let mut levels = cfg.levels.clone();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let theta_bits = cfg.theta.to_bits();
    let counts: Vec<usize> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(
                cfg.seed,
                "qcurve",
                &[theta_bits, cfg.mesh as u64, cfg.half_side as u64, r as u64],
            );
            let values = sampler.sample_values(&mut rng);
            // The event is decreasing in h: find the largest index still on.
            let mut hit = vec![0usize; levels.len()];
            for (i, &h) in levels.iter().enumerate().rev() {
                let occ = OccupationField::from_level(&geom, &values, h);
                if annulus_event(&occ, cfg.mesh, cfg.scale).expect("validated") {
                    for slot in hit.iter_mut().take(i + 1) {
                        *slot = 1;
                    }
                    break;
                }
            }
            hit
        })
        .reduce(
            || vec![0usize; levels.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    Ok(CurveTable::from_counts(
        cfg.theta,
        cfg.mesh,
        &levels,
        &counts,
        cfg.replicas,
        true,
    ))
}

/// Exact sampler of the field restricted to an index set K, via Cholesky of
/// the Green matrix on K. This is the marginal the event estimators need.
pub struct MarginalSampler {
    sites: Vec<usize>,
    factor: DMatrix<f64>,
    diag: Vec<f64>,
}

impl MarginalSampler {
    pub fn new(geom: &Geometry, params: &WalkParams, sites: &[usize]) -> Result<Self> {
        let g = walks::green_matrix(geom, params, sites)?;
        let diag = (0..sites.len()).map(|i| g.entry(i, i)).collect();
        let chol = Cholesky::new(g.matrix().clone())
            .ok_or_else(|| Error::Degenerate("Green matrix on K is not positive definite".into()))?;
        Ok(MarginalSampler {
            sites: sites.to_vec(),
            factor: chol.l(),
            diag,
        })
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// Marginal variance g(x,x) of the `i`-th site.
    pub fn variance(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let k = self.sites.len();
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.factor * z
    }
}

fn delta_se_influence(n: f64, m_ax: f64, m_a: f64, m_x: f64) -> f64 {
    let v = m_x * (1.0 - m_x);
    let g_ax = 1.0 / v;
    let g_a = -m_x / v;
    let g_x = (-m_a * v - (m_ax - m_a * m_x) * (1.0 - 2.0 * m_x)) / (v * v);
    // Covariances of the three moment estimators (all means of indicators).
    let c_axax = m_ax * (1.0 - m_ax);
    let c_axa = m_ax * (1.0 - m_a);
    let c_axx = m_ax * (1.0 - m_x);
    let c_aa = m_a * (1.0 - m_a);
    let c_ax = m_ax - m_a * m_x;
    let c_xx = m_x * (1.0 - m_x);
    let var = g_ax * g_ax * c_axax
        + g_a * g_a * c_aa
        + g_x * g_x * c_xx
        + 2.0 * g_ax * g_a * c_axa
        + 2.0 * g_ax * g_x * c_axx
        + 2.0 * g_a * g_x * c_ax;
    (var.max(0.0) / n).sqrt()
}

/// Conditional influence I(A^h, x) = Var(ξ_x)⁻¹·Cov(1_{A^h}, ξ_x), estimated
/// from exact K-marginal samples as a ratio of moments with delta-method
/// error. Rejects levels at which the indicator variance degenerates.
pub fn estimate_influence(
    geom: &Geometry,
    params: &WalkParams,
    event: &dyn IncreasingEvent,
    x: usize,
    level: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    let sites = event.sites();
    let x_local = sites
        .iter()
        .position(|&s| s == x)
        .ok_or_else(|| Error::config("influence site must belong to the event's index set"))?;
    let sampler = MarginalSampler::new(geom, params, sites)?;
    let sd = sampler.variance(x_local).sqrt();
    let p_open = normal_upper(level / sd);
    if p_open * (1.0 - p_open) < 1e-12 {
        return Err(Error::Degenerate(format!(
            "Var(ξ_x) = {:.2e} below 1e-12 at level {level}",
            p_open * (1.0 - p_open)
        )));
    }
    let (n_ax, n_a, n_x) = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "influence", &[x as u64, r as u64]);
            let phi = sampler.sample(&mut rng);
            let open: Vec<bool> = phi.iter().map(|&v| v >= level).collect();
            let a = event.occurs(&open);
            let ox = open[x_local];
            ((a && ox) as usize, a as usize, ox as usize)
        })
        .reduce(|| (0, 0, 0), |u, v| (u.0 + v.0, u.1 + v.1, u.2 + v.2));
    let n = replicas as f64;
    let (m_ax, m_a, m_x) = (n_ax as f64 / n, n_a as f64 / n, n_x as f64 / n);
    if m_x * (1.0 - m_x) < 1e-12 {
        return Err(Error::Degenerate(
            "observed indicator variance degenerate".into(),
        ));
    }
    let value = (m_ax - m_a * m_x) / (m_x * (1.0 - m_x));
    let se = delta_se_influence(n, m_ax, m_a, m_x);
    Ok(Estimate::with_normal_interval(value, replicas, se))
}

/// Influence of a site for an event on the full geometry, estimated from
/// whole-field samples (used for the translation-invariant annulus event).
pub fn estimate_influence_field(
    sampler: &dyn FieldSampler,
    event: &dyn IncreasingEvent,
    x: usize,
    level: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    let (n_ax, n_a, n_x) = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "influence-field", &[x as u64, r as u64]);
            let values = sampler.sample_values(&mut rng);
            let open: Vec<bool> = event.sites().iter().map(|&s| values[s] >= level).collect();
            let a = event.occurs(&open);
            let ox = values[x] >= level;
            ((a && ox) as usize, a as usize, ox as usize)
        })
        .reduce(|| (0, 0, 0), |u, v| (u.0 + v.0, u.1 + v.1, u.2 + v.2));
    let n = replicas as f64;
    let (m_ax, m_a, m_x) = (n_ax as f64 / n, n_a as f64 / n, n_x as f64 / n);
    if m_x * (1.0 - m_x) < 1e-12 {
        return Err(Error::Degenerate(
            "observed indicator variance degenerate".into(),
        ));
    }
    let value = (m_ax - m_a * m_x) / (m_x * (1.0 - m_x));
    let se = delta_se_influence(n, m_ax, m_a, m_x);
    Ok(Estimate::with_normal_interval(value, replicas, se))
}

/// Difference of two influences on shared samples, with batch-mean error
/// (the shared-sample correlation makes the per-influence errors dependent).
pub fn estimate_influence_difference_field(
    sampler: &dyn FieldSampler,
    event: &dyn IncreasingEvent,
    x: usize,
    y: usize,
    level: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    const BATCHES: usize = 50;
    if replicas < 10 * BATCHES {
        return Err(Error::config("need at least 500 replicas for batch means"));
    }
    let per_batch = replicas / BATCHES;
    let used = per_batch * BATCHES;
    let batch_values: Vec<f64> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut counts = [0usize; 5];
            for i in 0..per_batch {
                let r = (b * per_batch + i) as u64;
                let mut rng = rng::stream(seed, "influence-diff", &[r]);
                let values = sampler.sample_values(&mut rng);
                let open: Vec<bool> =
                    event.sites().iter().map(|&s| values[s] >= level).collect();
                let a = event.occurs(&open);
                let ox = values[x] >= level;
                let oy = values[y] >= level;
                counts[0] += (a && ox) as usize;
                counts[1] += (a && oy) as usize;
                counts[2] += a as usize;
                counts[3] += ox as usize;
                counts[4] += oy as usize;
            }
            let n = per_batch as f64;
            let (m_ax, m_ay, m_a, m_x, m_y) = (
                counts[0] as f64 / n,
                counts[1] as f64 / n,
                counts[2] as f64 / n,
                counts[3] as f64 / n,
                counts[4] as f64 / n,
            );
            let ix = (m_ax - m_a * m_x) / (m_x * (1.0 - m_x)).max(1e-12);
            let iy = (m_ay - m_a * m_y) / (m_y * (1.0 - m_y)).max(1e-12);
            ix - iy
        })
        .collect();
    let mean: f64 = batch_values.iter().sum::<f64>() / BATCHES as f64;
    let var: f64 = batch_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (BATCHES - 1) as f64;
    let se = (var / BATCHES as f64).sqrt();
    Ok(Estimate::with_normal_interval(mean, used, se))
}

/// −dℙ[A^h]/dh estimated as the sample covariance of 1_{A^h} with
/// Σ_{x∈K} κ^tr_x φ_x, from exact K-marginal samples.
pub fn estimate_level_derivative(
    geom: &Geometry,
    params: &WalkParams,
    event: &dyn IncreasingEvent,
    level: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    let sites = event.sites();
    let sampler = MarginalSampler::new(geom, params, sites)?;
    let trace = walks::trace_form(geom, params, sites)?;
    let kappa = trace.killing().to_vec();
    let pairs: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "level-derivative", &[r as u64]);
            let phi = sampler.sample(&mut rng);
            let open: Vec<bool> = phi.iter().map(|&v| v >= level).collect();
            let a = event.occurs(&open) as u8 as f64;
            let s: f64 = kappa.iter().zip(phi.iter()).map(|(k, v)| k * v).sum();
            (a, s)
        })
        .collect();
    let n = replicas as f64;
    let mean_a: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_s: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs
        .iter()
        .map(|p| (p.0 - mean_a) * (p.1 - mean_s))
        .sum::<f64>()
        / n;
    let var_cov: f64 = pairs
        .iter()
        .map(|p| ((p.0 - mean_a) * (p.1 - mean_s) - cov).powi(2))
        .sum::<f64>()
        / n;
    Ok(Estimate::with_normal_interval(
        cov,
        replicas,
        (var_cov / n).sqrt(),
    ))
}

/// Central finite difference of ℙ[A^h] across h ± δh on shared samples.
pub fn estimate_derivative_finite_difference(
    geom: &Geometry,
    params: &WalkParams,
    event: &dyn IncreasingEvent,
    level: f64,
    dh: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    if dh <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let sampler = MarginalSampler::new(geom, params, event.sites())?;
    // Indicators are nested: the difference is itself a Bernoulli variable.
    let gap: usize = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "derivative-fd", &[r as u64]);
            let phi = sampler.sample(&mut rng);
            let lo: Vec<bool> = phi.iter().map(|&v| v >= level - dh).collect();
            let hi: Vec<bool> = phi.iter().map(|&v| v >= level + dh).collect();
            (event.occurs(&lo) && !event.occurs(&hi)) as usize
        })
        .sum();
    let q = Estimate::proportion(gap, replicas);
    Ok(Estimate::with_normal_interval(
        q.value / (2.0 * dh),
        replicas,
        q.se / (2.0 * dh),
    ))
}

// ---------------------------------------------------------------------------
// Threshold location and fits
// ---------------------------------------------------------------------------

/// Weighted least squares y ≈ a + b·x. Returns (a, b, se_b, weighted SSR).
fn wls(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> (f64, f64, f64, f64) {
    let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let swy: f64 = w.iter().zip(ys).map(|(w, y)| w * y).sum();
    let swxx: f64 = w.iter().zip(xs).map(|(w, x)| w * x * x).sum();
    let swxy: f64 = w
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| w * x * y)
        .sum();
    let denom = sw * swxx - swx * swx;
    let b = (sw * swxy - swx * swy) / denom;
    let a = (swy - b * swx) / sw;
    let se_b = (sw / denom).sqrt();
    let ssr: f64 = w
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| w * (y - a - b * x).powi(2))
        .sum();
    (a, b, se_b, ssr)
}

fn chi2_upper95(dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("valid dof")
        .inverse_cdf(0.95)
}

/// One data row entering a fit: scale, replica count, successes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitRow {
    pub scale: i64,
    pub n: usize,
    pub successes: usize,
}

/// Power-law fit 1 − p ≈ C₀·L^(−ε) below the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharpnessFit {
    pub level: f64,
    pub rows: Vec<FitRow>,
    pub c0: f64,
    pub epsilon: f64,
    pub epsilon_se: f64,
    /// One-sided 95% lower confidence bound for ε.
    pub epsilon_lo95: f64,
    pub weighted_ssr: f64,
    pub dof: usize,
    /// ε is reported as established only when it is significantly positive and
    /// the residual test does not reject the power law.
    pub accepted: bool,
}

/// Fits 1 − p_L ≈ C₀ L^(−ε) by weighted least squares in log coordinates.
/// Rows are (L, n, successes) at a fixed level.
pub fn fit_sharpness(level: f64, rows: &[(i64, usize, usize)]) -> Result<SharpnessFit> {
    if rows.len() < 3 {
        return Err(Error::config("sharpness fit needs at least three scales"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut sigmas = Vec::new();
    for &(scale, n, k) in rows {
        // Saturated rows (p̂ = 1) carry no usable log-failure value; treat
        // them as one failure short and widen the error bar accordingly.
        let fails = (n - k).max(1);
        let q = fails as f64 / n as f64;
        xs.push((scale as f64).ln());
        ys.push(q.ln());
        sigmas.push(((1.0 - q) / (n as f64 * q)).sqrt().max(1e-6));
    }
    let (a, b, se_b, ssr) = wls(&xs, &ys, &sigmas);
    let epsilon = -b;
    let dof = rows.len() - 2;
    let residual_ok = dof == 0 || ssr <= chi2_upper95(dof);
    let lo95 = epsilon - 1.645 * se_b;
    Ok(SharpnessFit {
        level,
        rows: rows
            .iter()
            .map(|&(scale, n, successes)| FitRow { scale, n, successes })
            .collect(),
        c0: a.exp(),
        epsilon,
        epsilon_se: se_b,
        epsilon_lo95: lo95,
        weighted_ssr: ssr,
        dof,
        accepted: epsilon > 0.0 && lo95 > 0.0 && residual_ok,
    })
}

/// Stretched-exponential fit p ≈ c·exp(−c′·L^ρ) above the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub level: f64,
    pub rows: Vec<FitRow>,
    pub c: f64,
    pub c_prime: f64,
    pub c_prime_se: f64,
    /// One-sided 95% lower confidence bound for c′.
    pub c_prime_lo95: f64,
    pub rho: f64,
    pub weighted_ssr: f64,
    pub dof: usize,
    /// Scales whose rows had no successes; such rows enter through their
    /// one-sided Clopper–Pearson bound with a widened error bar.
    pub censored_scales: Vec<i64>,
    pub accepted: bool,
}

/// Fits log p_L ≈ log c − c′·L^ρ with ρ profiled over (0,1].
pub fn fit_decay(level: f64, rows: &[(i64, usize, usize)]) -> Result<DecayFit> {
    if rows.len() < 3 {
        return Err(Error::config("decay fit needs at least three scales"));
    }
    let mut censored = Vec::new();
    let mut scales = Vec::new();
    let mut ys = Vec::new();
    let mut sigmas = Vec::new();
    for &(scale, n, k) in rows {
        scales.push(scale as f64);
        if k == 0 {
            // Zero successes: only an upper bound on p is known.
            let p = clopper_pearson_upper(0, n, 0.95);
            ys.push(p.ln());
            sigmas.push(1.5);
            censored.push(scale);
        } else {
            let p = k as f64 / n as f64;
            ys.push(p.ln());
            sigmas.push(((1.0 - p) / (n as f64 * p)).sqrt().max(1e-6));
        }
    }
    let mut best: Option<(f64, f64, f64, f64, f64)> = None;
    for step in 1..=20 {
        let rho = step as f64 * 0.05;
        let xs: Vec<f64> = scales.iter().map(|&l| -l.powf(rho)).collect();
        let (a, b, se_b, ssr) = wls(&xs, &ys, &sigmas);
        if best.map_or(true, |(_, _, _, _, best_ssr)| ssr < best_ssr) {
            best = Some((rho, a, b, se_b, ssr));
        }
    }
    let (rho, a, c_prime, se, ssr) = best.expect("grid is nonempty");
    let dof = rows.len().saturating_sub(3);
    let residual_ok = dof == 0 || ssr <= chi2_upper95(dof);
    let lo95 = c_prime - 1.645 * se;
    Ok(DecayFit {
        level,
        rows: rows
            .iter()
            .map(|&(scale, n, successes)| FitRow { scale, n, successes })
            .collect(),
        c: a.exp(),
        c_prime,
        c_prime_se: se,
        c_prime_lo95: lo95,
        rho,
        weighted_ssr: ssr,
        dof,
        censored_scales: censored,
        accepted: c_prime > 0.0 && lo95 > 0.0 && residual_ok,
    })
}

/// Level at which the curve reaches probability `target`, by linear
/// interpolation on the (monotone) estimated curve.
pub fn level_at_probability(rows: &[CurveRow], target: f64) -> Option<f64> {
    let mut sorted: Vec<&CurveRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.level.partial_cmp(&b.level).expect("finite levels"));
    for w in sorted.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if (hi.p_hat <= target && target <= lo.p_hat) && lo.p_hat != hi.p_hat {
            let frac = (lo.p_hat - target) / (lo.p_hat - hi.p_hat);
            return Some(lo.level + frac * (hi.level - lo.level));
        }
    }
    None
}

/// Width of the transition window: distance in h between the 0.75- and
/// 0.25-crossings of the curve.
pub fn transition_width(rows: &[CurveRow]) -> Option<f64> {
    let upper = level_at_probability(rows, 0.75)?;
    let lower = level_at_probability(rows, 0.25)?;
    Some(lower - upper)
}

/// Empirical threshold report: the located level, the per-scale curves, the
/// fits on both sides, and the per-scale transition widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub schema: String,
    pub theta: f64,
    pub gamma: f64,
    pub h_double_star: f64,
    pub scales: Vec<i64>,
    pub curves: Vec<CurveRow>,
    pub transition_widths: Vec<(i64, f64)>,
    pub sharpness: Option<SharpnessFit>,
    pub decay: Option<DecayFit>,
}

/// Smallest grid level at which the largest-scale curve drops below γ while
/// the per-scale values at that level are non-increasing in the scale (the
/// finite-size surrogate for the liminf in the threshold definition).
pub fn locate_h_double_star(tables: &[CurveTable], gamma: f64) -> Result<f64> {
    if tables.len() < 3 {
        return Err(Error::config("need curves at three scales or more"));
    }
    let mut by_scale: Vec<&CurveTable> = tables.iter().collect();
    by_scale.sort_by_key(|t| t.rows.first().map(|r| r.scale).unwrap_or(0));
    let largest = by_scale.last().expect("nonempty");
    let mut levels: Vec<f64> = largest.rows.iter().map(|r| r.level).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let p_at = |table: &CurveTable, h: f64| -> Option<f64> {
        table
            .rows
            .iter()
            .find(|r| r.level == h)
            .map(|r| r.p_hat)
    };
    let mut saw_above = false;
    for &h in &levels {
        let p_large = p_at(largest, h).expect("level from this table");
        if p_large >= gamma {
            saw_above = true;
            continue;
        }
        let ps: Vec<f64> = by_scale
            .iter()
            .map(|t| p_at(t, h))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::config("curves must share the level grid"))?;
        if ps.windows(2).all(|w| w[1] <= w[0]) {
            return Ok(h);
        }
        saw_above = true;
    }
    Err(Error::GridNonInformative {
        all_above: saw_above,
    })
}

/// Experiment description for [`threshold_report`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub dim: usize,
    pub theta: f64,
    pub scales: Vec<i64>,
    pub levels: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub margin: Option<i64>,
    pub gamma: f64,
    /// Offset from the located threshold at which the two fits run.
    pub fit_gap: f64,
}

/// Runs the full threshold pipeline: per-scale shared-sample curves, threshold
/// location, and the sharpness/decay fits at the configured offsets. The
/// critical levels from the curve stage are reused to evaluate the offset
/// levels without re-simulation.
pub fn threshold_report(cfg: &ThresholdConfig) -> Result<ThresholdReport> {
    if cfg.scales.len() < 3 || cfg.scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("scales must be increasing, three or more"));
    }
    let mut levels = cfg.levels.clone();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let mut criticals = Vec::new();
    let mut tables = Vec::new();
    for &scale in &cfg.scales {
        let pcfg = PCurveConfig {
            dim: cfg.dim,
            theta: cfg.theta,
            scale,
            levels: levels.clone(),
            replicas: cfg.replicas,
            seed: cfg.seed,
            margin: cfg.margin,
            sampler: SamplerKind::Torus,
        };
        let crit = p_curve_critical_levels(&pcfg)?;
        let counts: Vec<usize> = levels
            .iter()
            .map(|&h| crit.iter().filter(|&&c| c >= h).count())
            .collect();
        tables.push(CurveTable::from_counts(
            cfg.theta, scale, &levels, &counts, cfg.replicas, true,
        ));
        criticals.push(crit);
    }
    let h_double_star = locate_h_double_star(&tables, cfg.gamma)?;

    let rows_at = |h: f64| -> Vec<(i64, usize, usize)> {
        cfg.scales
            .iter()
            .zip(&criticals)
            .map(|(&scale, crit)| {
                (
                    scale,
                    crit.len(),
                    crit.iter().filter(|&&c| c >= h).count(),
                )
            })
            .collect()
    };
    let sharpness = fit_sharpness(h_double_star - cfg.fit_gap, &rows_at(h_double_star - cfg.fit_gap)).ok();
    let decay = fit_decay(h_double_star + cfg.fit_gap, &rows_at(h_double_star + cfg.fit_gap)).ok();
    let transition_widths = cfg
        .scales
        .iter()
        .zip(&tables)
        .filter_map(|(&scale, t)| transition_width(&t.rows).map(|w| (scale, w)))
        .collect();
    Ok(ThresholdReport {
        schema: THRESHOLD_SCHEMA.to_string(),
        theta: cfg.theta,
        gamma: cfg.gamma,
        h_double_star,
        scales: cfg.scales.clone(),
        curves: tables.into_iter().flat_map(|t| t.rows).collect(),
        transition_widths,
        sharpness,
        decay,
    })
}

/// Threshold in density units from the Bernoulli reference pipeline: runs the
/// same location rule on i.i.d. site percolation curves.
pub fn locate_bernoulli_threshold(
    dim: usize,
    scales: &[i64],
    densities: &[f64],
    gamma: f64,
    replicas: usize,
    seed: u64,
) -> Result<f64> {
    // The crossing probability increases in the density; the location rule
    // expects curves decreasing in the level, so run it on reversed densities
    // (level = -density).
    let mut tables = Vec::new();
    for &scale in scales {
        let t = estimate_p_curve_bernoulli(dim, scale, densities, replicas, seed)?;
        let rows = t
            .rows
            .into_iter()
            .map(|mut r| {
                r.level = -r.level;
                r
            })
            .collect();
        tables.push(CurveTable {
            schema: CURVE_SCHEMA.to_string(),
            shared_seed: true,
            rows,
        });
    }
    locate_h_double_star(&tables, gamma).map(|h| -h)
}

/// Converts a level to the Bernoulli site density Φ̄(h) and back.
pub fn level_to_density(h: f64) -> f64 {
    normal_upper(h)
}

pub fn density_to_level(p: f64) -> f64 {
    normal_upper_inv(p)
}
