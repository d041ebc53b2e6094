//! The verification checks themselves, each an exact computation on a small
//! instance with an explicit pass criterion and a reported margin.

use super::quadrature::{normal_pdf, orthant_bounds, Quadrature};
use crate::lattice::Geometry;
use crate::levelset::{enumerate_monotone_tables, ExplicitEvent, IncreasingEvent};
use crate::walks::{self, TraceForm, WalkParams};
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// One verification outcome: margins are oriented so that larger is better and
/// negative means violation beyond tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub instance: String,
    pub margin: f64,
    pub pass: bool,
}

/// Per-orthant probability masses of the level-set configuration on K, under
/// the Gaussian with covariance G|_K.
#[derive(Debug, Clone)]
pub struct ExactEventProb {
    pub sites: Vec<usize>,
    pub levels: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Mass of {ξ = ω on K} indexed by the bit pattern of ω.
    pub masses: Vec<f64>,
}

impl ExactEventProb {
    pub fn compute(
        quad: &Quadrature,
        geom: &Geometry,
        params: &WalkParams,
        sites: &[usize],
        levels: &[f64],
    ) -> Result<Self> {
        let k = sites.len();
        if k == 0 || k > super::MAX_QUAD_SITES {
            return Err(Error::config(format!(
                "exact event probabilities support 1 ≤ |K| ≤ {}",
                super::MAX_QUAD_SITES
            )));
        }
        if levels.len() != k {
            return Err(Error::config("one level per site required"));
        }
        let cov = walks::green_matrix(geom, params, sites)?.matrix().clone();
        Self::from_covariance(quad, sites.to_vec(), cov, levels.to_vec())
    }

    /// Masses from an explicit covariance (used when two geometries share K).
    pub fn from_covariance(
        quad: &Quadrature,
        sites: Vec<usize>,
        cov: DMatrix<f64>,
        levels: Vec<f64>,
    ) -> Result<Self> {
        let k = sites.len();
        let per_orthant = Quadrature {
            abs_tol: quad.abs_tol / (1u64 << k) as f64,
            ..*quad
        };
        let mut masses = Vec::with_capacity(1 << k);
        for pattern in 0..(1u64 << k) {
            let (lo, hi) = orthant_bounds(&levels, pattern);
            masses.push(per_orthant.rectangle_prob(&cov, &lo, &hi)?);
        }
        Ok(ExactEventProb {
            sites,
            levels,
            cov,
            masses,
        })
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// ℙ[A^h] for the event with the given truth table.
    pub fn event_prob(&self, table: u64) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(cfg, _)| table >> *cfg & 1 == 1)
            .map(|(_, m)| m)
            .sum()
    }

    /// ℙ[ξ_x = 1].
    pub fn open_prob(&self, x: usize) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(cfg, _)| *cfg >> x & 1 == 1)
            .map(|(_, m)| m)
            .sum()
    }

    /// Conditional influence I(A^h, x) = Var(ξ_x)⁻¹ · Cov(1_A, ξ_x).
    pub fn influence(&self, table: u64, x: usize) -> f64 {
        let p_open = self.open_prob(x);
        let p_event = self.event_prob(table);
        let joint: f64 = self
            .masses
            .iter()
            .enumerate()
            .filter(|(cfg, _)| table >> *cfg & 1 == 1 && *cfg >> x & 1 == 1)
            .map(|(_, m)| m)
            .sum();
        (joint - p_event * p_open) / (p_open * (1.0 - p_open))
    }

    /// E[1_{A^h} φ_x] by boundary-face integration over the member orthants.
    pub fn event_restricted_mean(&self, quad: &Quadrature, table: u64, x: usize) -> Result<f64> {
        let k = self.sites.len();
        let mut total = 0.0;
        for cfg in 0..(1u64 << k) {
            if table >> cfg & 1 == 0 {
                continue;
            }
            let (lo, hi) = orthant_bounds(&self.levels, cfg);
            total += quad.restricted_mean(&self.cov, &lo, &hi, x)?;
        }
        Ok(total)
    }
}

/// Convenience wrapper: ℙ_θ[A^h] for an explicit event on K.
pub fn exact_event_prob(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    event: &ExplicitEvent,
    levels: &[f64],
) -> Result<f64> {
    let eep = ExactEventProb::compute(quad, geom, params, event.sites(), levels)?;
    Ok(eep.event_prob(event.table()))
}

// ---------------------------------------------------------------------------
// FKG lattice condition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FkgLatticeReport {
    pub pairs: usize,
    pub min_margin: f64,
    pub pass: bool,
}

/// Verifies Q(ω∨ω′)·Q(ω∧ω′) ≥ Q(ω)·Q(ω′) over all ordered configuration
/// pairs on K, within the quadrature tolerance.
pub fn check_fkg_lattice(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    sites: &[usize],
    level: f64,
) -> Result<FkgLatticeReport> {
    if sites.len() > 3 {
        return Err(Error::config("lattice condition checked for |K| ≤ 3"));
    }
    let levels = vec![level; sites.len()];
    let eep = ExactEventProb::compute(quad, geom, params, sites, &levels)?;
    let k = sites.len();
    let mut min_margin = f64::INFINITY;
    let mut pairs = 0;
    for a in 0..(1u64 << k) {
        for b in 0..(1u64 << k) {
            let lhs = eep.masses[(a | b) as usize] * eep.masses[(a & b) as usize];
            let rhs = eep.masses[a as usize] * eep.masses[b as usize];
            min_margin = min_margin.min(lhs - rhs);
            pairs += 1;
        }
    }
    Ok(FkgLatticeReport {
        pairs,
        min_margin,
        pass: min_margin >= -quad.abs_tol,
    })
}

// ---------------------------------------------------------------------------
// Holley Hamiltonian inequality
// ---------------------------------------------------------------------------

/// A finite Gibbs instance with pinning potentials: trace form on V, weight λ,
/// level profile, open-pinned and closed-pinned site classes, and the
/// distinguished site x that carries V₊ in H⁺ and V₋ in H⁻.
#[derive(Debug, Clone)]
pub struct HolleyInstance {
    pub trace: TraceForm,
    pub lambda: f64,
    pub levels: Vec<f64>,
    pub open_pinned: Vec<usize>,
    pub closed_pinned: Vec<usize>,
    pub distinguished: usize,
}

fn v_plus(t: f64) -> f64 {
    (-t).max(0.0)
}

fn v_minus(t: f64) -> f64 {
    t.max(0.0)
}

impl HolleyInstance {
    /// H^±(φ) = E^tr(φ,φ) + λ[Σ_𝒪 V₊ + Σ_{𝒞∖x} V₋ + V_±(φ_x − h_x)].
    pub fn hamiltonian(&self, plus: bool, phi: &[f64]) -> f64 {
        let mut h = self.trace.energy(phi);
        for &i in &self.open_pinned {
            h += self.lambda * v_plus(phi[i] - self.levels[i]);
        }
        for &i in &self.closed_pinned {
            h += self.lambda * v_minus(phi[i] - self.levels[i]);
        }
        let x = self.distinguished;
        let vx = phi[x] - self.levels[x];
        h += self.lambda * if plus { v_plus(vx) } else { v_minus(vx) };
        h
    }

    /// H⁺(φ∨φ′) + H⁻(φ∧φ′) − H⁺(φ) − H⁻(φ′), evaluated term by term.
    ///
    /// Single-site terms common to H⁺ and H⁻ cancel as multisets, so only the
    /// interaction cross terms and the distinguished-site potential survive;
    /// this regrouping is exact algebra and keeps the reported violation free
    /// of cancellation noise from the large Hamiltonian totals.
    pub fn quartet_violation(&self, phi: &[f64], phi2: &[f64]) -> f64 {
        let n = phi.len();
        let c = self.trace.conductance();
        let mut diff = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let cij = c[(i, j)];
                if cij == 0.0 {
                    continue;
                }
                let da = phi[i] - phi2[i];
                let db = phi[j] - phi2[j];
                if da * db < 0.0 {
                    diff += 2.0 * cij * da * db;
                }
            }
        }
        let x = self.distinguished;
        let (a, b) = (phi[x] - self.levels[x], phi2[x] - self.levels[x]);
        diff += self.lambda
            * (v_plus(a.max(b)) + v_minus(a.min(b)) - v_plus(a) - v_minus(b));
        diff
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolleyReport {
    pub samples: usize,
    pub max_violation: f64,
    pub pass: bool,
}

/// Evaluates the Hamiltonian inequality on random real pairs; the inequality
/// is exact, so any violation beyond 10⁻¹² indicates a broken instance.
pub fn check_holley(
    instance: &HolleyInstance,
    samples: usize,
    seed: u64,
) -> Result<HolleyReport> {
    let n = instance.levels.len();
    let mut rng = crate::rng::stream(seed, "holley", &[]);
    let mut max_violation = f64::NEG_INFINITY;
    let draw = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5)
            .collect()
    };
    for _ in 0..samples {
        let phi = draw(&mut rng);
        let phi2 = draw(&mut rng);
        max_violation = max_violation.max(instance.quartet_violation(&phi, &phi2));
    }
    Ok(HolleyReport {
        samples,
        max_violation,
        pass: max_violation <= 1e-12,
    })
}

// ---------------------------------------------------------------------------
// Conditional stochastic domination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalDominationReport {
    pub events_checked: usize,
    pub min_difference: f64,
    pub pass: bool,
}

/// Conditioning on {ξ = ω on K} versus {ξ = ω^x on K}: every increasing event
/// on the probe sites must become more likely when x is opened.
#[allow(clippy::too_many_arguments)]
pub fn check_stochastic_domination(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    cond_sites: &[usize],
    probe_sites: &[usize],
    level: f64,
    omega: u64,
    x_local: usize,
) -> Result<ConditionalDominationReport> {
    let k = cond_sites.len();
    let kp = probe_sites.len();
    if k > 3 || kp > 3 || k + kp > 5 {
        return Err(Error::config(
            "conditional domination checked for |K| ≤ 3 and |K ∪ K′| ≤ 5",
        ));
    }
    let mut joint_sites = cond_sites.to_vec();
    joint_sites.extend_from_slice(probe_sites);
    let levels = vec![level; k + kp];
    let eep = ExactEventProb::compute(quad, geom, params, &joint_sites, &levels)?;

    let cond_mass = |omega: u64| -> f64 {
        (0..(1u64 << kp))
            .map(|pi| eep.masses[(omega | pi << k) as usize])
            .sum()
    };
    let cond_prob = |omega: u64, table: u64, mass: f64| -> f64 {
        (0..(1u64 << kp))
            .filter(|pi| table >> pi & 1 == 1)
            .map(|pi| eep.masses[(omega | pi << k) as usize])
            .sum::<f64>()
            / mass
    };

    let omega_up = omega | 1 << x_local;
    let mass_lo = cond_mass(omega);
    let mass_hi = cond_mass(omega_up);
    if mass_lo < 1e-8 || mass_hi < 1e-8 {
        return Err(Error::Degenerate(format!(
            "conditioning mass below 1e-8 (got {mass_lo:.2e} / {mass_hi:.2e})"
        )));
    }

    let mut min_difference = f64::INFINITY;
    let mut events_checked = 0;
    for table in enumerate_monotone_tables(kp) {
        let diff = cond_prob(omega_up, table, mass_hi) - cond_prob(omega, table, mass_lo);
        min_difference = min_difference.min(diff);
        events_checked += 1;
    }
    Ok(ConditionalDominationReport {
        events_checked,
        min_difference,
        pass: min_difference >= -quad.abs_tol,
    })
}

// ---------------------------------------------------------------------------
// Level-derivative formula
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RussoReport {
    pub finite_difference: f64,
    pub covariance_form: f64,
    pub residual: f64,
    pub richardson_coefficient: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the central finite difference of h ↦ ℙ[A^h] against the exact
/// expectation E[1_{A^h} Σ_x κ^tr_x φ_x], both by quadrature. The finite
/// difference carries an O(δh²) bias whose coefficient is estimated by
/// Richardson extrapolation and folded into the tolerance.
pub fn check_russo(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    event: &ExplicitEvent,
    level: f64,
    dh: f64,
) -> Result<RussoReport> {
    let sites = event.sites();
    if sites.len() > 5 {
        return Err(Error::config("derivative check supports |K| ≤ 5"));
    }
    let prob_at = |h: f64| -> Result<f64> {
        let eep = ExactEventProb::compute(quad, geom, params, sites, &vec![h; sites.len()])?;
        Ok(eep.event_prob(event.table()))
    };
    let fd_full = (prob_at(level - dh)? - prob_at(level + dh)?) / (2.0 * dh);
    let fd_half = (prob_at(level - dh / 2.0)? - prob_at(level + dh / 2.0)?) / dh;
    let richardson = (fd_full - fd_half) / (0.75 * dh * dh);

    let trace = walks::trace_form(geom, params, sites)?;
    let eep = ExactEventProb::compute(quad, geom, params, sites, &vec![level; sites.len()])?;
    let mut covariance_form = 0.0;
    for (i, &kappa) in trace.killing().iter().enumerate() {
        covariance_form += kappa * eep.event_restricted_mean(quad, event.table(), i)?;
    }
    let residual = (fd_full - covariance_form).abs();
    let tolerance = richardson.abs() * dh * dh + 2.0 * quad.abs_tol;
    Ok(RussoReport {
        finite_difference: fd_full,
        covariance_form,
        residual,
        richardson_coefficient: richardson,
        tolerance,
        pass: residual <= tolerance,
    })
}

// ---------------------------------------------------------------------------
// Product-measure pivotality at θ = 1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PivotalReport {
    pub max_residual: f64,
    pub pass: bool,
}

/// At θ = 1 the field is i.i.d. and E[1_{A^h} φ_x] = f(h)·ℙ[x pivotal for A^h]
/// for increasing A. The left side uses the single-site Gaussian identity
/// E[φ; φ ≥ h] = f(h); the right side enumerates the product measure.
pub fn check_theta1_pivotal(event: &dyn IncreasingEvent, level: f64) -> Result<PivotalReport> {
    let k = event.sites().len();
    if k == 0 || k > 12 {
        return Err(Error::config("pivotal check supports 1 ≤ |K| ≤ 12"));
    }
    let p_open = super::normal_upper(level);
    let f_h = normal_pdf(level);
    let mut cfg = vec![false; k];
    let mut max_residual = 0.0f64;
    for x in 0..k {
        let mut lhs = 0.0;
        let mut piv_prob = 0.0;
        for bits in 0..(1u64 << k) {
            for (i, c) in cfg.iter_mut().enumerate() {
                *c = bits >> i & 1 == 1;
            }
            // Probability of the configuration off x.
            let mut weight = 1.0;
            for (i, &c) in cfg.iter().enumerate() {
                if i != x {
                    weight *= if c { p_open } else { 1.0 - p_open };
                }
            }
            if event.occurs(&cfg) {
                // E[φ; φ ≥ h] = f(h), E[φ; φ < h] = −f(h).
                lhs += weight * if cfg[x] { f_h } else { -f_h };
            }
            if bits >> x & 1 == 0 {
                cfg[x] = true;
                let with = event.occurs(&cfg);
                cfg[x] = false;
                let without = event.occurs(&cfg);
                if with != without {
                    piv_prob += weight;
                }
            }
        }
        max_residual = max_residual.max((lhs - f_h * piv_prob).abs());
    }
    Ok(PivotalReport {
        max_residual,
        pass: max_residual <= 1e-10,
    })
}

// ---------------------------------------------------------------------------
// Pointwise domination of influences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominationRow {
    pub level: f64,
    pub site: usize,
    pub derivative_term: f64,
    pub influence: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominationReport {
    pub rows: Vec<DominationRow>,
    pub skipped: usize,
    pub c1_hat: f64,
    pub summed_form_ok: bool,
    pub pass: bool,
}

/// Per-site ratio E[1_{A^h} κ^tr_x φ_x] / I(A^h, x) across a level grid inside
/// (−M, M); the smallest ratio is the empirical domination constant ĉ₁.
pub fn check_domination(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    event: &ExplicitEvent,
    levels: &[f64],
    m_bound: f64,
) -> Result<DominationReport> {
    let sites = event.sites();
    if sites.len() > 4 {
        return Err(Error::config("domination check supports |K| ≤ 4"));
    }
    if levels.iter().any(|h| h.abs() >= m_bound) {
        return Err(Error::config("level grid must lie inside (−M, M)"));
    }
    let trace = walks::trace_form(geom, params, sites)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut c1_hat = f64::INFINITY;
    let mut summed_form_ok = true;
    for &h in levels {
        let eep = ExactEventProb::compute(quad, geom, params, sites, &vec![h; sites.len()])?;
        let mut sum_terms = 0.0;
        let mut sum_infl = 0.0;
        for i in 0..sites.len() {
            let term = trace.killing()[i] * eep.event_restricted_mean(quad, event.table(), i)?;
            let infl = eep.influence(event.table(), i);
            sum_terms += term;
            sum_infl += infl;
            if infl < 1e-8 {
                skipped += 1;
                continue;
            }
            let ratio = term / infl;
            c1_hat = c1_hat.min(ratio);
            rows.push(DominationRow {
                level: h,
                site: sites[i],
                derivative_term: term,
                influence: infl,
                ratio,
            });
        }
        if c1_hat.is_finite() && sum_terms < c1_hat * sum_infl - 10.0 * quad.abs_tol {
            summed_form_ok = false;
        }
    }
    let pass = c1_hat.is_finite() && c1_hat > 0.0 && summed_form_ok && !rows.is_empty();
    Ok(DominationReport {
        rows,
        skipped,
        c1_hat,
        summed_form_ok,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Influence-theorem calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceInstance {
    pub label: String,
    pub variance: f64,
    pub max_influence: f64,
    pub total_influence: f64,
    /// ‖I‖∞ · |K| / (Var · log |K|)
    pub c_infinity: f64,
    /// ‖I‖₁ / (Var · log(1/2‖I‖∞)), present only when ‖I‖∞ < 1/2.
    pub c_l1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceTheoremReport {
    pub instances: Vec<InfluenceInstance>,
    pub min_c_infinity: f64,
    pub min_c_l1: Option<f64>,
    pub pass: bool,
}

/// Computes the two influence-theorem calibration constants on each instance;
/// the universal constant they bound is non-constructive, so only positivity
/// is asserted and the minima are reported.
pub fn check_influence_theorem(
    quad: &Quadrature,
    instances: &[(String, Geometry, WalkParams, ExplicitEvent, f64)],
) -> Result<InfluenceTheoremReport> {
    let mut out = Vec::new();
    for (label, geom, params, event, h) in instances {
        let k = event.sites().len();
        if k < 2 {
            // log |K| = 0: the ℓ∞ bound is vacuous.
            continue;
        }
        let eep =
            ExactEventProb::compute(quad, geom, params, event.sites(), &vec![*h; k])?;
        let p = eep.event_prob(event.table());
        let variance = p * (1.0 - p);
        let influences: Vec<f64> = (0..k).map(|i| eep.influence(event.table(), i)).collect();
        let max_influence = influences.iter().cloned().fold(f64::MIN, f64::max);
        let total_influence: f64 = influences.iter().sum();
        let c_infinity = max_influence * k as f64 / (variance * (k as f64).ln());
        let c_l1 = if max_influence < 0.5 && max_influence > 0.0 {
            Some(total_influence / (variance * (1.0 / (2.0 * max_influence)).ln()))
        } else {
            None
        };
        out.push(InfluenceInstance {
            label: label.clone(),
            variance,
            max_influence,
            total_influence,
            c_infinity,
            c_l1,
        });
    }
    if out.is_empty() {
        return Err(Error::config("no usable influence instances"));
    }
    let min_c_infinity = out.iter().map(|i| i.c_infinity).fold(f64::INFINITY, f64::min);
    let min_c_l1 = out
        .iter()
        .filter_map(|i| i.c_l1)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    let pass = min_c_infinity > 0.0 && min_c_l1.map_or(true, |v| v > 0.0);
    Ok(InfluenceTheoremReport {
        instances: out,
        min_c_infinity,
        min_c_l1,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Square-root trick
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqrtTrickReport {
    pub sup_prob: f64,
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
}

/// sup_i ℙ[A_i] ≥ 1 − (1 − ℙ[⋃ A_i])^{1/n} for increasing events on a common
/// index set.
pub fn check_sqrt_trick(
    quad: &Quadrature,
    geom: &Geometry,
    params: &WalkParams,
    sites: &[usize],
    tables: &[u64],
    level: f64,
) -> Result<SqrtTrickReport> {
    if tables.is_empty() {
        return Err(Error::config("at least one event required"));
    }
    for &t in tables {
        // Monotonicity gate; membership in the family is the caller's claim.
        ExplicitEvent::new(sites.to_vec(), t)?;
    }
    let eep = ExactEventProb::compute(quad, geom, params, sites, &vec![level; sites.len()])?;
    let sup_prob = tables
        .iter()
        .map(|&t| eep.event_prob(t))
        .fold(f64::MIN, f64::max);
    let union = tables.iter().fold(0u64, |acc, &t| acc | t);
    let p_union = eep.event_prob(union);
    let bound = 1.0 - (1.0 - p_union).powf(1.0 / tables.len() as f64);
    let slack = sup_prob - bound;
    Ok(SqrtTrickReport {
        sup_prob,
        bound,
        slack,
        pass: slack >= -quad.abs_tol,
    })
}

// ---------------------------------------------------------------------------
// Boundary-condition comparison
// ---------------------------------------------------------------------------

/// An increasing event pinned to coordinates near the origin, instantiable on
/// any geometry large enough to contain it.
#[derive(Debug, Clone)]
pub struct LocalEvent {
    pub coords: Vec<Vec<i64>>,
    pub table: u64,
}

impl LocalEvent {
    pub fn support_radius(&self) -> i64 {
        self.coords
            .iter()
            .flat_map(|c| c.iter().map(|v| v.abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn sites_on(&self, geom: &Geometry) -> Vec<usize> {
        self.coords.iter().map(|c| geom.index(c)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeBcRow {
    pub scale: i64,
    pub prob_torus: f64,
    pub prob_box: f64,
    pub exact_gap: f64,
    pub mc_gap: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeBcReport {
    pub rows: Vec<ChangeBcRow>,
    pub slope: f64,
    pub slope_upper95: f64,
    pub monotone_within_3se: bool,
    pub pass: bool,
}

/// |ℙ^torus[A^h] − ℙ^box[A^h]| at matched scales: exact gaps by quadrature
/// drive the log-linear decay fit; a shared-noise Monte Carlo coupling of the
/// two K-marginals (same Gaussian driver through either Cholesky factor)
/// confirms the gaps are non-increasing within sampling error.
pub fn check_change_bc(
    quad: &Quadrature,
    dim: usize,
    theta: f64,
    scales: &[i64],
    event: &LocalEvent,
    level: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<ChangeBcReport> {
    if scales.len() < 3 {
        return Err(Error::config("need at least three scales for the fit"));
    }
    let radius = event.support_radius();
    let params = WalkParams::massive(theta)?;
    let mut rows = Vec::new();
    for (si, &scale) in scales.iter().enumerate() {
        if scale < 4 * radius.max(1) {
            return Err(Error::config(
                "event support too close to the boundary at this scale",
            ));
        }
        let torus = Geometry::torus(dim, scale)?;
        let boxed = Geometry::zd_box(dim, scale)?;
        let k = event.coords.len();
        let levels = vec![level; k];
        let sites_t = event.sites_on(&torus);
        let sites_b = event.sites_on(&boxed);
        let cov_t = walks::green_matrix(&torus, &params, &sites_t)?.matrix().clone();
        let cov_b = walks::green_matrix(&boxed, &params, &sites_b)?.matrix().clone();
        let eep_t =
            ExactEventProb::from_covariance(quad, sites_t, cov_t.clone(), levels.clone())?;
        let eep_b =
            ExactEventProb::from_covariance(quad, sites_b, cov_b.clone(), levels.clone())?;
        let prob_torus = eep_t.event_prob(event.table);
        let prob_box = eep_b.event_prob(event.table);

        let chol_t = Cholesky::new(cov_t)
            .ok_or_else(|| Error::Degenerate("torus covariance not SPD".into()))?;
        let chol_b = Cholesky::new(cov_b)
            .ok_or_else(|| Error::Degenerate("box covariance not SPD".into()))?;
        let ev = ExplicitEvent::new((0..k).collect(), event.table)?;
        let mut rng = crate::rng::stream(seed, "change-bc", &[si as u64]);
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut open_t = vec![false; k];
        let mut open_b = vec![false; k];
        for _ in 0..mc_samples {
            let z = DVector::from_iterator(
                k,
                (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let phi_t = chol_t.l() * &z;
            let phi_b = chol_b.l() * &z;
            for i in 0..k {
                open_t[i] = phi_t[i] >= level;
                open_b[i] = phi_b[i] >= level;
            }
            let d = (ev.occurs(&open_t) as i64 - ev.occurs(&open_b) as i64) as f64;
            sum += d;
            sum_sq += d * d;
        }
        let n = mc_samples as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        rows.push(ChangeBcRow {
            scale,
            prob_torus,
            prob_box,
            exact_gap: (prob_torus - prob_box).abs(),
            mc_gap: mean.abs(),
            mc_se: (var / n).sqrt(),
        });
    }

    // Ordinary least squares of ln(gap) on the scale.
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.scale as f64, r.exact_gap.max(1e-300).ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let ssr: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let dof = (pts.len() - 2).max(1) as f64;
    let se = (ssr / dof / (sxx - sx * sx / n)).sqrt();
    let t95 = StudentsT::new(0.0, 1.0, dof)
        .expect("valid dof")
        .inverse_cdf(0.95);
    let slope_upper95 = slope + t95 * se;

    let mut monotone_within_3se = true;
    for w in rows.windows(2) {
        let combined = (w[0].mc_se.powi(2) + w[1].mc_se.powi(2)).sqrt();
        if w[1].mc_gap > w[0].mc_gap + 3.0 * combined {
            monotone_within_3se = false;
        }
    }
    let pass = monotone_within_3se && slope_upper95 < 0.0;
    Ok(ChangeBcReport {
        rows,
        slope,
        slope_upper95,
        monotone_within_3se,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Default verification suite
// ---------------------------------------------------------------------------

fn record(name: &str, instance: String, margin: f64, pass: bool) -> CheckRecord {
    CheckRecord {
        name: name.to_string(),
        instance,
        margin,
        pass,
    }
}

fn failed(name: &str, instance: String, err: &Error) -> CheckRecord {
    CheckRecord {
        name: name.to_string(),
        instance: format!("{instance} [error: {err}]"),
        margin: f64::NAN,
        pass: false,
    }
}

/// Runs every check on its default instances. Failures never abort the rest
/// of the suite.
pub fn run_verification_suite(seed: u64) -> Vec<CheckRecord> {
    let quad = Quadrature::default();
    let mut records = Vec::new();

    // FKG lattice condition on three collinear sites.
    {
        let geom = Geometry::zd_box(2, 8).expect("valid geometry");
        let sites = vec![
            geom.index(&[-1, 0]),
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
        ];
        for theta in [0.3, 0.7, 1.0] {
            let params = WalkParams::massive(theta).expect("valid mass");
            for h in [-1.0, 0.0, 1.0] {
                let inst = format!("theta={theta} h={h} collinear |K|=3");
                match check_fkg_lattice(&quad, &geom, &params, &sites, h) {
                    Ok(r) => records.push(record("fkg-lattice", inst, r.min_margin, r.pass)),
                    Err(e) => records.push(failed("fkg-lattice", inst, &e)),
                }
            }
        }
    }

    // Holley Hamiltonian inequality on an 8-site window.
    {
        let geom = Geometry::torus(2, 4).expect("valid geometry");
        let params = WalkParams::massive(0.5).expect("valid mass");
        let mut sites = geom.ball(geom.index(&[0, 0]), 1).expect("valid ball");
        sites.truncate(8);
        match walks::trace_form(&geom, &params, &sites) {
            Ok(trace) => {
                for lambda in [1.0, 10.0, 100.0] {
                    let instance = HolleyInstance {
                        trace: trace.clone(),
                        lambda,
                        levels: vec![0.2; sites.len()],
                        open_pinned: vec![0, 2],
                        closed_pinned: vec![1],
                        distinguished: 3,
                    };
                    let inst = format!("|V|=8 lambda={lambda}");
                    match check_holley(&instance, 100_000, seed) {
                        Ok(r) => records.push(record(
                            "holley-hamiltonian",
                            inst,
                            -r.max_violation,
                            r.pass,
                        )),
                        Err(e) => records.push(failed("holley-hamiltonian", inst, &e)),
                    }
                }
            }
            Err(e) => records.push(failed("holley-hamiltonian", "trace form".into(), &e)),
        }
    }

    // Conditional stochastic domination with exhaustive increasing probes.
    {
        let geom = Geometry::zd_box(2, 7).expect("valid geometry");
        let params = WalkParams::massive(0.5).expect("valid mass");
        let cond = vec![geom.index(&[0, 0]), geom.index(&[1, 0])];
        let probe = vec![geom.index(&[0, 1]), geom.index(&[1, 1])];
        for (omega, x_local) in [(0b00u64, 0usize), (0b10, 0), (0b01, 1)] {
            let inst = format!("omega={omega:02b} x={x_local}");
            match check_stochastic_domination(
                &quad, &geom, &params, &cond, &probe, 0.1, omega, x_local,
            ) {
                Ok(r) => records.push(record(
                    "conditional-domination",
                    inst,
                    r.min_difference,
                    r.pass,
                )),
                Err(e) => records.push(failed("conditional-domination", inst, &e)),
            }
        }
    }

    // Level-derivative formula.
    {
        let geom = Geometry::zd_box(2, 9).expect("valid geometry");
        let dictator = ExplicitEvent::dictator(vec![geom.index(&[0, 0])], 0).expect("dictator");
        let params1 = WalkParams::massive(1.0).expect("valid mass");
        let inst = "theta=1 dictator h=0".to_string();
        match check_russo(&quad, &geom, &params1, &dictator, 0.0, 1e-3) {
            Ok(r) => records.push(record(
                "level-derivative",
                inst,
                r.tolerance - r.residual,
                r.pass,
            )),
            Err(e) => records.push(failed("level-derivative", inst, &e)),
        }
        let sites = vec![
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
            geom.index(&[0, 1]),
        ];
        let two_of_three = ExplicitEvent::from_predicate(sites, |c| {
            c.iter().filter(|&&b| b).count() >= 2
        })
        .expect("monotone");
        let params = WalkParams::massive(0.5).expect("valid mass");
        let inst = "theta=0.5 two-of-three h=0.3".to_string();
        match check_russo(&quad, &geom, &params, &two_of_three, 0.3, 1e-3) {
            Ok(r) => records.push(record(
                "level-derivative",
                inst,
                r.tolerance - r.residual,
                r.pass,
            )),
            Err(e) => records.push(failed("level-derivative", inst, &e)),
        }
    }

    // Product-measure pivotality at theta = 1.
    {
        let geom = Geometry::zd_box(2, 3).expect("valid geometry");
        let dictator = ExplicitEvent::dictator(vec![geom.index(&[0, 0])], 0).expect("dictator");
        match check_theta1_pivotal(&dictator, 0.4) {
            Ok(r) => records.push(record(
                "theta1-pivotal",
                "dictator h=0.4".into(),
                -r.max_residual,
                r.pass,
            )),
            Err(e) => records.push(failed("theta1-pivotal", "dictator".into(), &e)),
        }
        let window: Vec<usize> = vec![
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
            geom.index(&[0, 1]),
            geom.index(&[1, 1]),
        ];
        let crossing = crate::levelset::CrossingEvent::new(
            &geom,
            window.clone(),
            &[window[0], window[2]],
            &[window[1], window[3]],
        )
        .expect("valid crossing");
        match check_theta1_pivotal(&crossing, 0.0) {
            Ok(r) => records.push(record(
                "theta1-pivotal",
                "2x2 crossing h=0".into(),
                -r.max_residual,
                r.pass,
            )),
            Err(e) => records.push(failed("theta1-pivotal", "2x2 crossing".into(), &e)),
        }
    }

    // Pointwise influence domination.
    {
        let geom = Geometry::zd_box(2, 8).expect("valid geometry");
        let params = WalkParams::massive(0.5).expect("valid mass");
        let sites = vec![
            geom.index(&[-1, 0]),
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
        ];
        let event = ExplicitEvent::from_predicate(sites, |c| c[1] && (c[0] || c[2]))
            .expect("monotone");
        let inst = "theta=0.5 center-and-a-neighbor".to_string();
        match check_domination(&quad, &geom, &params, &event, &[-1.0, 0.0, 1.0], 2.0) {
            Ok(r) => records.push(record("influence-domination", inst, r.c1_hat, r.pass)),
            Err(e) => records.push(failed("influence-domination", inst, &e)),
        }
    }

    // Influence-theorem calibration.
    {
        let geom = Geometry::zd_box(2, 8).expect("valid geometry");
        let sites3 = vec![
            geom.index(&[-1, 0]),
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
        ];
        let majority = ExplicitEvent::from_predicate(sites3.clone(), |c| {
            c.iter().filter(|&&b| b).count() >= 2
        })
        .expect("monotone");
        let dictator = ExplicitEvent::dictator(sites3, 1).expect("dictator");
        let torus = Geometry::torus(2, 2).expect("valid geometry");
        let cycle: Vec<usize> = (0..4).map(|y| torus.index(&[0, y])).collect();
        let cycle_event = ExplicitEvent::from_predicate(cycle, |c| {
            (0..4).any(|i| c[i] && c[(i + 1) % 4])
        })
        .expect("monotone");
        let instances = vec![
            (
                "dictator-3".to_string(),
                geom.clone(),
                WalkParams::massive(1.0).expect("valid"),
                dictator,
                0.0,
            ),
            (
                "majority-3-product".to_string(),
                geom.clone(),
                WalkParams::massive(1.0).expect("valid"),
                majority.clone(),
                0.0,
            ),
            (
                "majority-3-massive".to_string(),
                geom,
                WalkParams::massive(0.5).expect("valid"),
                majority,
                0.0,
            ),
            (
                "adjacent-pair-on-cycle".to_string(),
                torus,
                WalkParams::massive(0.5).expect("valid"),
                cycle_event,
                0.0,
            ),
        ];
        match check_influence_theorem(&quad, &instances) {
            Ok(r) => records.push(record(
                "influence-theorem",
                format!("{} instances", r.instances.len()),
                r.min_c_infinity,
                r.pass,
            )),
            Err(e) => records.push(failed("influence-theorem", "default family".into(), &e)),
        }
    }

    // Square-root trick.
    {
        let geom = Geometry::zd_box(2, 8).expect("valid geometry");
        let params = WalkParams::massive(0.5).expect("valid mass");
        let sites = vec![
            geom.index(&[0, 0]),
            geom.index(&[1, 0]),
            geom.index(&[0, 1]),
        ];
        let a1 = ExplicitEvent::from_predicate(sites.clone(), |c| c[0] && c[1]).expect("monotone");
        let a2 = ExplicitEvent::from_predicate(sites.clone(), |c| c[0] && c[2]).expect("monotone");
        let pairs: Vec<(String, Vec<u64>)> = vec![
            ("single-event".into(), vec![a1.table()]),
            ("duplicated-event".into(), vec![a1.table(), a1.table()]),
            ("correlated-pair".into(), vec![a1.table(), a2.table()]),
        ];
        for (inst, tables) in pairs {
            match check_sqrt_trick(&quad, &geom, &params, &sites, &tables, 0.2) {
                Ok(r) => records.push(record("sqrt-trick", inst, r.slack, r.pass)),
                Err(e) => records.push(failed("sqrt-trick", inst, &e)),
            }
        }
    }

    // Boundary-condition comparison.
    {
        let event = LocalEvent {
            coords: vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]],
            table: plaquette_crossing_table(),
        };
        let inst = "plaquette crossing theta=0.2".to_string();
        match check_change_bc(&quad, 2, 0.2, &[4, 6, 8, 12, 16], &event, 0.2, 200_000, seed) {
            Ok(r) => records.push(record(
                "boundary-comparison",
                inst,
                -r.slope_upper95,
                r.pass,
            )),
            Err(e) => records.push(failed("boundary-comparison", inst, &e)),
        }
    }

    records
}

/// Left column {sites 0,2} connected to right column {sites 1,3} inside the
/// 2×2 plaquette with sites ordered (0,0),(1,0),(0,1),(1,1); adjacency is
/// 0–1, 2–3 horizontal and 0–2, 1–3 vertical.
pub fn plaquette_crossing_table() -> u64 {
    let adjacency = [[1usize, 2], [0, 3], [3, 0], [2, 1]];
    let mut table = 0u64;
    for cfg in 0..16u64 {
        let open = |i: usize| cfg >> i & 1 == 1;
        let mut seen = [false; 4];
        let mut stack = Vec::new();
        for start in [0, 2] {
            if open(start) {
                seen[start] = true;
                stack.push(start);
            }
        }
        let mut connected = false;
        while let Some(v) = stack.pop() {
            if v == 1 || v == 3 {
                connected = true;
                break;
            }
            for &nb in &adjacency[v] {
                if open(nb) && !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        if connected {
            table |= 1 << cfg;
        }
    }
    table
}
