//! Exact samplers for the massive Gaussian free field.
//!
//! On a torus the covariance operator is circulant, so sampling is done in the
//! frequency domain: white noise is transformed, scaled by the per-frequency
//! standard deviation of the [`SpectralProfile`], and transformed back. On a
//! box with absorbing halo (and optional interior absorbing set) the precision
//! matrix I − (1−θ)P is assembled densely and factorized once; each sample is a
//! triangular solve against fresh white noise.
//!
//! The conditional sampler realizes the domain Markov decomposition
//! φ = φ̃ + μ: subtracting the harmonic extension of the sampled values on K
//! from an unconditional sample leaves an exact sample of the field killed on
//! K, to which the harmonic extension of the pinned values is added back.

use crate::lattice::{Geometry, Mode};
use crate::rng;
use crate::walks::{self, HittingKernel, WalkParams};
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;

/// Default cap on the number of active sites a dense factorization will accept.
pub const DEFAULT_CHOLESKY_CAP: usize = 4096;

/// A realized field configuration with its generating stream.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub values: Vec<f64>,
    pub seed: u64,
    pub stream_id: String,
}

/// Per-frequency variances 1/(1 − (1−θ)λ_k) of the torus field, where
/// λ_k = (1/d) Σ_i cos(π k_i / L̄) are the transition-operator eigenvalues.
#[derive(Debug, Clone)]
pub struct SpectralProfile {
    theta: f64,
    variances: Vec<f64>,
}

impl SpectralProfile {
    pub fn new(geom: &Geometry, theta: f64) -> Result<Self> {
        let Mode::Torus { .. } = geom.mode() else {
            return Err(Error::config("spectral profile requires a torus"));
        };
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::config(
                "the periodic field measure is not well-defined without mass",
            ));
        }
        let side = geom.side() as usize;
        let d = geom.dim();
        let axis_cos: Vec<f64> = (0..side)
            .map(|k| (2.0 * std::f64::consts::PI * k as f64 / side as f64).cos())
            .collect();
        let mut variances = vec![0.0; geom.len()];
        let mut freq = vec![0usize; d];
        for v in variances.iter_mut() {
            let lambda: f64 = freq.iter().map(|&k| axis_cos[k]).sum::<f64>() / d as f64;
            *v = 1.0 / (1.0 - (1.0 - theta) * lambda);
            for axis in (0..d).rev() {
                freq[axis] += 1;
                if freq[axis] < side {
                    break;
                }
                freq[axis] = 0;
            }
        }
        Ok(SpectralProfile { theta, variances })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Variance per frequency, flattened in the same row-major order as the
    /// vertex indexing.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Anything that yields exact field samples on a fixed geometry.
pub trait FieldSampler: Sync {
    fn geometry(&self) -> &Geometry;
    fn theta(&self) -> f64;
    /// One exact sample, one value per vertex.
    fn sample_values(&self, rng: &mut ChaCha12Rng) -> Vec<f64>;
}

/// Samples a field and records its provenance stream.
pub fn sample_field(
    sampler: &dyn FieldSampler,
    seed: u64,
    label: &str,
    salt: &[u64],
) -> FieldSample {
    let mut rng = rng::stream(seed, label, salt);
    FieldSample {
        values: sampler.sample_values(&mut rng),
        seed,
        stream_id: rng::stream_id(seed, label, salt),
    }
}

/// Frequency-domain sampler for the torus field (U = ∅).
#[derive(Clone)]
pub struct TorusSampler {
    geom: Geometry,
    theta: f64,
    sigma: Vec<f64>,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl TorusSampler {
    pub fn new(geom: &Geometry, theta: f64) -> Result<Self> {
        let profile = SpectralProfile::new(geom, theta)?;
        let sigma = profile.variances().iter().map(|v| v.sqrt()).collect();
        let mut planner = FftPlanner::new();
        let side = geom.side() as usize;
        Ok(TorusSampler {
            geom: geom.clone(),
            theta,
            sigma,
            fft_fwd: planner.plan_fft_forward(side),
            fft_inv: planner.plan_fft_inverse(side),
        })
    }

    /// Applies the 1-D transform along every axis of the flattened array.
    fn transform(&self, data: &mut [Complex<f64>], fft: &Arc<dyn Fft<f64>>) {
        let d = self.geom.dim();
        let side = self.geom.side() as usize;
        let n = data.len();
        // Last axis is contiguous; process() handles the buffer in chunks.
        fft.process(data);
        let mut line = vec![Complex::default(); side];
        let mut stride = 1usize;
        for _ in 1..d {
            stride *= side;
            let block = stride * side;
            for base_block in (0..n).step_by(block) {
                for off in 0..stride {
                    let base = base_block + off;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride];
                    }
                    fft.process(&mut line);
                    for (j, slot) in line.iter().enumerate() {
                        data[base + j * stride] = *slot;
                    }
                }
            }
        }
    }
}

impl FieldSampler for TorusSampler {
    fn geometry(&self) -> &Geometry {
        &self.geom
    }

    fn theta(&self) -> f64 {
        self.theta
    }

    fn sample_values(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let n = self.geom.len();
        let mut data: Vec<Complex<f64>> = (0..n)
            .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
            .collect();
        self.transform(&mut data, &self.fft_fwd);
        for (v, s) in data.iter_mut().zip(&self.sigma) {
            *v *= *s;
        }
        self.transform(&mut data, &self.fft_inv);
        let scale = 1.0 / n as f64;
        data.iter().map(|c| c.re * scale).collect()
    }
}

/// Dense-factorization sampler for a box with absorbing halo and an optional
/// interior absorbing set.
pub struct BoxSampler {
    geom: Geometry,
    theta: f64,
    active: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
}

impl BoxSampler {
    pub fn new(geom: &Geometry, params: &WalkParams, cap: usize) -> Result<Self> {
        let Mode::Box { .. } = geom.mode() else {
            return Err(Error::config("box sampler requires box mode"));
        };
        let killed = params.killed();
        let active: Vec<usize> = (0..geom.len())
            .filter(|i| killed.binary_search(i).is_err())
            .collect();
        if active.len() > cap {
            return Err(Error::SizeCap {
                size: active.len(),
                cap,
            });
        }
        let mut slot = vec![usize::MAX; geom.len()];
        for (s, &i) in active.iter().enumerate() {
            slot[i] = s;
        }
        let m = active.len();
        let step = (1.0 - params.theta()) / (2.0 * geom.dim() as f64);
        let mut q = DMatrix::zeros(m, m);
        for (s, &i) in active.iter().enumerate() {
            q[(s, s)] = 1.0;
            geom.for_each_neighbor(i, |nb| {
                if slot[nb] != usize::MAX {
                    q[(s, slot[nb])] = -step;
                }
            });
        }
        let chol = Cholesky::new(q).ok_or_else(|| {
            Error::SolverFailure(
                "precision matrix not positive definite; signals an indexing bug".into(),
            )
        })?;
        Ok(BoxSampler {
            geom: geom.clone(),
            theta: params.theta(),
            active,
            chol,
        })
    }
}

impl FieldSampler for BoxSampler {
    fn geometry(&self) -> &Geometry {
        &self.geom
    }

    fn theta(&self) -> f64 {
        self.theta
    }

    fn sample_values(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let m = self.active.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // Cov(L⁻ᵀ z) = (L Lᵀ)⁻¹ = Q⁻¹ = G.
        let y = self
            .chol
            .l()
            .tr_solve_lower_triangular(&z)
            .expect("triangular factor is invertible");
        let mut values = vec![0.0; self.geom.len()];
        for (s, &i) in self.active.iter().enumerate() {
            values[i] = y[s];
        }
        values
    }
}

/// Domain-Markov conditional sampler: fields pinned to prescribed values on K.
pub struct ConditionalSampler<S: FieldSampler> {
    base: S,
    sites: Vec<usize>,
    kernel: HittingKernel,
}

impl<S: FieldSampler> ConditionalSampler<S> {
    /// `params` must carry the mass and absorbing set of the base sampler's
    /// field law; K must be disjoint from the absorbing set.
    pub fn new(base: S, params: &WalkParams, sites: &[usize]) -> Result<Self> {
        let kernel = walks::hitting_kernel(base.geometry(), params, sites)?;
        Ok(ConditionalSampler {
            base,
            sites: sites.to_vec(),
            kernel,
        })
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// Exact sample of the field conditioned on φ = pinned on K.
    pub fn sample_values(&self, pinned: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
        assert_eq!(pinned.len(), self.sites.len());
        let mut phi = self.base.sample_values(rng);
        let correction: Vec<f64> = self
            .sites
            .iter()
            .zip(pinned)
            .map(|(&s, &p)| p - phi[s])
            .collect();
        let mu = self.kernel.extend(&correction);
        for (v, m) in phi.iter_mut().zip(&mu) {
            *v += m;
        }
        for (&s, &p) in self.sites.iter().zip(pinned) {
            phi[s] = p;
        }
        phi
    }

    /// The residual field φ̃ = φ − μ(φ|_K), distributed as the field killed on
    /// K and independent of the values on K.
    pub fn sample_residual(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        self.sample_values(&vec![0.0; self.sites.len()], rng)
    }
}

const DUMP_MAGIC: &[u8; 8] = b"GFFFLD01";

/// Header of the flat binary field dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub dim: usize,
    pub mode: Mode,
    pub theta: f64,
    pub seed: u64,
    pub count: usize,
}

/// JSON sidecar accompanying a binary field dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub schema: String,
    #[serde(flatten)]
    pub header: DumpHeader,
    pub stream_id: String,
    pub config_hash: Option<String>,
}

pub const DUMP_SCHEMA: &str = "field-dump/v1";

/// Writes the binary dump: magic, header fields, then row-major f64 payload,
/// all little-endian.
pub fn write_dump<W: Write>(
    mut w: W,
    geom: &Geometry,
    theta: f64,
    sample: &FieldSample,
) -> std::io::Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(geom.dim() as u32).to_le_bytes())?;
    let (mode_tag, size_param) = match geom.mode() {
        Mode::Box { radius } => (0u32, radius),
        Mode::Torus { half_side } => (1u32, half_side),
    };
    w.write_all(&mode_tag.to_le_bytes())?;
    w.write_all(&size_param.to_le_bytes())?;
    w.write_all(&theta.to_le_bytes())?;
    w.write_all(&sample.seed.to_le_bytes())?;
    w.write_all(&(sample.values.len() as u64).to_le_bytes())?;
    for v in &sample.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a binary dump written by [`write_dump`].
pub fn read_dump<R: Read>(mut r: R) -> std::io::Result<(DumpHeader, Vec<f64>)> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(bad("not a field dump"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let mode_tag = u32::from_le_bytes(b4);
    r.read_exact(&mut b8)?;
    let size_param = i64::from_le_bytes(b8);
    let mode = match mode_tag {
        0 => Mode::Box { radius: size_param },
        1 => Mode::Torus {
            half_side: size_param,
        },
        _ => return Err(bad("unknown geometry mode")),
    };
    r.read_exact(&mut b8)?;
    let theta = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok((
        DumpHeader {
            dim,
            mode,
            theta,
            seed,
            count,
        },
        values,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walks::green_matrix;

    fn covariance(samples: &[Vec<f64>], a: usize, b: usize) -> f64 {
        let n = samples.len() as f64;
        let ma: f64 = samples.iter().map(|s| s[a]).sum::<f64>() / n;
        let mb: f64 = samples.iter().map(|s| s[b]).sum::<f64>() / n;
        samples.iter().map(|s| (s[a] - ma) * (s[b] - mb)).sum::<f64>() / n
    }

    #[test]
    fn spectral_profile_bounds() {
        for theta in [0.1, 0.5, 1.0] {
            let geom = Geometry::torus(3, 3).unwrap();
            let p = SpectralProfile::new(&geom, theta).unwrap();
            for &v in p.variances() {
                assert!(v > 0.0);
                assert!(v <= 1.0 / theta + 1e-12);
                assert!(v >= 1.0 / (2.0 - theta) - 1e-12);
            }
        }
        assert!(SpectralProfile::new(&Geometry::torus(2, 4).unwrap(), 0.0).is_err());
    }

    #[test]
    fn torus_theta_one_is_iid_standard() {
        let geom = Geometry::torus(3, 2).unwrap();
        let sampler = TorusSampler::new(&geom, 1.0).unwrap();
        let n = 100_000;
        let mut rng = crate::rng::stream(11, "field-test-iid", &[]);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample_values(&mut rng)).collect();
        let nf = n as f64;
        let band_mean = 3.0 / nf.sqrt();
        let band_var = 3.0 * (2.0 / nf).sqrt();
        for site in 0..geom.len() {
            let mean: f64 = samples.iter().map(|s| s[site]).sum::<f64>() / nf;
            assert!(mean.abs() < band_mean, "site {site} mean {mean}");
            let var = covariance(&samples, site, site);
            assert!((var - 1.0).abs() < band_var, "site {site} var {var}");
        }
        let c = covariance(&samples, 0, 13);
        assert!(c.abs() < 3.0 / nf.sqrt());
    }

    #[test]
    fn torus_covariance_matches_green_solve() {
        let geom = Geometry::torus(2, 3).unwrap();
        let theta = 0.5;
        let sampler = TorusSampler::new(&geom, theta).unwrap();
        let n = 200_000;
        let mut rng = crate::rng::stream(5, "field-test-cov", &[]);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample_values(&mut rng)).collect();
        let origin = geom.index(&[0, 0]);
        let probes = [
            origin,
            geom.index(&[1, 0]),
            geom.index(&[1, 1]),
            geom.index(&[2, -3]),
            geom.index(&[-2, 2]),
        ];
        let params = WalkParams::massive(theta).unwrap();
        let mut sites = probes.to_vec();
        sites.sort_unstable();
        sites.dedup();
        let pos = |s: usize| sites.iter().position(|&v| v == s).unwrap();
        let g = green_matrix(&geom, &params, &sites).unwrap();
        for &x in &probes {
            let emp = covariance(&samples, origin, x);
            let exact = g.entry(pos(origin), pos(x));
            let var_prod = g.entry(pos(origin), pos(origin)) * g.entry(pos(x), pos(x));
            let se = ((var_prod + exact * exact) / n as f64).sqrt();
            assert!(
                (emp - exact).abs() < 3.0 * se,
                "cov(0,{x}) = {emp} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn box_sampler_zero_on_absorbed_and_matches_green() {
        let geom = Geometry::zd_box(2, 2).unwrap();
        let dead = geom.index(&[1, 1]);
        let theta = 0.5;
        let params = WalkParams::new(theta, vec![dead]).unwrap();
        let sampler = BoxSampler::new(&geom, &params, DEFAULT_CHOLESKY_CAP).unwrap();
        let n = 200_000;
        let mut rng = crate::rng::stream(4, "field-test-box", &[]);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample_values(&mut rng)).collect();
        assert!(samples.iter().all(|s| s[dead] == 0.0));
        let sites = vec![geom.index(&[0, 0]), geom.index(&[1, 0]), geom.index(&[-2, -1])];
        let g = green_matrix(&geom, &params, &sites).unwrap();
        for i in 0..sites.len() {
            for j in i..sites.len() {
                let emp = covariance(&samples, sites[i], sites[j]);
                let exact = g.entry(i, j);
                let se = ((g.entry(i, i) * g.entry(j, j) + exact * exact) / n as f64).sqrt();
                assert!(
                    (emp - exact).abs() < 3.0 * se,
                    "cov({i},{j}) = {emp} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn box_sampler_respects_cap() {
        let geom = Geometry::zd_box(3, 10).unwrap();
        let params = WalkParams::massive(0.5).unwrap();
        match BoxSampler::new(&geom, &params, 100) {
            Err(Error::SizeCap { size, cap }) => {
                assert_eq!(size, geom.len());
                assert_eq!(cap, 100);
            }
            _ => panic!("expected size-cap refusal"),
        }
    }

    #[test]
    fn conditional_sampler_pins_exactly_and_has_killed_law() {
        let geom = Geometry::torus(2, 3).unwrap();
        let theta = 0.4;
        let params = WalkParams::massive(theta).unwrap();
        let k = vec![geom.index(&[0, 0]), geom.index(&[2, -1])];
        let base = TorusSampler::new(&geom, theta).unwrap();
        let cond = ConditionalSampler::new(base, &params, &k).unwrap();
        let mut rng = crate::rng::stream(9, "field-test-cond", &[]);
        let pinned = [0.7, -1.3];
        for _ in 0..100 {
            let s = cond.sample_values(&pinned, &mut rng);
            assert_eq!(s[k[0]], 0.7);
            assert_eq!(s[k[1]], -1.3);
        }
        // Residual-field covariance equals the Green function killed on K.
        let n = 150_000;
        let samples: Vec<Vec<f64>> = (0..n).map(|_| cond.sample_residual(&mut rng)).collect();
        let params_k = params.with_extra_killed(&k).unwrap();
        let probes = vec![geom.index(&[1, 0]), geom.index(&[-1, 2]), geom.index(&[1, 1])];
        let gk = green_matrix(&geom, &params_k, &probes).unwrap();
        for i in 0..probes.len() {
            for j in i..probes.len() {
                let emp = covariance(&samples, probes[i], probes[j]);
                let exact = gk.entry(i, j);
                let se = ((gk.entry(i, i) * gk.entry(j, j) + exact * exact) / n as f64).sqrt();
                assert!(
                    (emp - exact).abs() < 3.0 * se,
                    "residual cov({i},{j}) = {emp} vs {exact}"
                );
            }
        }
    }

    /// Tower check: drawing φ|_K from its marginal and then the conditional
    /// field reproduces the unconditional covariance.
    #[test]
    fn conditional_tower_property() {
        let geom = Geometry::torus(2, 3).unwrap();
        let theta = 0.6;
        let params = WalkParams::massive(theta).unwrap();
        let k = vec![geom.index(&[0, 0]), geom.index(&[1, 0])];
        let gk = green_matrix(&geom, &params, &k).unwrap();
        let chol = Cholesky::new(gk.matrix().clone()).unwrap();
        let base = TorusSampler::new(&geom, theta).unwrap();
        let cond = ConditionalSampler::new(base, &params, &k).unwrap();
        let mut rng = crate::rng::stream(21, "field-test-tower", &[]);
        let n = 150_000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z =
                    DVector::from_iterator(2, (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let boundary = chol.l() * z;
                cond.sample_values(boundary.as_slice(), &mut rng)
            })
            .collect();
        let sites = vec![k[0], geom.index(&[0, 1]), geom.index(&[-2, -2])];
        let g = green_matrix(&geom, &params, &sites).unwrap();
        for i in 0..sites.len() {
            for j in i..sites.len() {
                let emp = covariance(&samples, sites[i], sites[j]);
                let exact = g.entry(i, j);
                let se = ((g.entry(i, i) * g.entry(j, j) + exact * exact) / n as f64).sqrt();
                assert!(
                    (emp - exact).abs() < 3.0 * se,
                    "tower cov({i},{j}) = {emp} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let geom = Geometry::torus(3, 2).unwrap();
        let sampler = TorusSampler::new(&geom, 0.3).unwrap();
        let a = sample_field(&sampler, 42, "dump", &[7]);
        let b = sample_field(&sampler, 42, "dump", &[7]);
        assert_eq!(a.values, b.values);
        assert_eq!(a.stream_id, b.stream_id);
        let c = sample_field(&sampler, 42, "dump", &[8]);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn dump_round_trip() {
        let geom = Geometry::torus(2, 2).unwrap();
        let sampler = TorusSampler::new(&geom, 0.8).unwrap();
        let sample = sample_field(&sampler, 5, "dump", &[]);
        let mut buf = Vec::new();
        write_dump(&mut buf, &geom, 0.8, &sample).unwrap();
        let (header, values) = read_dump(buf.as_slice()).unwrap();
        assert_eq!(header.dim, 2);
        assert_eq!(header.mode, Mode::Torus { half_side: 2 });
        assert_eq!(header.theta, 0.8);
        assert_eq!(header.seed, 5);
        assert_eq!(values, sample.values);
    }
}
