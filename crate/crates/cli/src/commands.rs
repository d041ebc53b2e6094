//! Subcommand implementations. Each writes its artifacts through the
//! [`Writer`](crate::output::Writer) so every output carries the config hash
//! and seed.

use crate::config::ExperimentConfig;
use crate::output::Writer;
use anyhow::{anyhow, Context, Result};
use gffls::estimators::{
    self, CurveTable, PCurveConfig, SamplerKind, ThresholdConfig, ThresholdReport,
};
use gffls::field::{self, TorusSampler};
use gffls::lattice::Geometry;
use gffls::oracle;
use gffls::walks::default_margin;
use gffls::Error;

fn sampler_kind(config: &ExperimentConfig) -> SamplerKind {
    if config.sampler == "dense-box" {
        SamplerKind::DenseBox
    } else {
        SamplerKind::Torus
    }
}

pub fn pcurve(config: &ExperimentConfig, seed: u64, writer: &Writer) -> Result<()> {
    let levels = config.levels();
    let mut tables = Vec::new();
    for &theta in &config.theta {
        for &scale in &config.scales {
            let cfg = PCurveConfig {
                dim: config.dim,
                theta,
                scale,
                levels: levels.clone(),
                replicas: config.replicas,
                seed,
                margin: config.margin,
                sampler: sampler_kind(config),
            };
            tables.push(estimators::estimate_p_curve(&cfg)?);
        }
    }
    let merged = CurveTable::merged(tables);
    let csv = writer.csv("pcurve.csv", estimators::CURVE_SCHEMA, "pcurve", &merged.to_csv())?;
    let json = writer.json("pcurve.json", estimators::CURVE_SCHEMA, "pcurve", &merged)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

pub fn qcurve(config: &ExperimentConfig, seed: u64, writer: &Writer) -> Result<()> {
    let levels = config.levels();
    let multiplier = config.torus_multiplier();
    let mut tables = Vec::new();
    for &theta in &config.theta {
        for &scale in &config.scales {
            let cfg = estimators::QCurveConfig {
                dim: config.dim,
                theta,
                mesh: scale,
                scale: config.ell,
                half_side: multiplier * scale,
                levels: levels.clone(),
                replicas: config.replicas,
                seed,
            };
            tables.push(estimators::estimate_q_curve(&cfg)?);
        }
    }
    let merged = CurveTable::merged(tables);
    let csv = writer.csv("qcurve.csv", estimators::CURVE_SCHEMA, "qcurve", &merged.to_csv())?;
    let json = writer.json("qcurve.json", estimators::CURVE_SCHEMA, "qcurve", &merged)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

/// Extends a sorted grid by its own span in the indicated direction.
fn widen(levels: &[f64], upward: bool) -> Vec<f64> {
    let lo = levels[0];
    let hi = *levels.last().expect("nonempty grid");
    let step = levels
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
        .max(1e-6);
    let span = (hi - lo).max(step);
    let mut out = levels.to_vec();
    let mut h = if upward { hi + step } else { lo - step };
    while (h - lo).abs() <= span * 2.0 + 1e-12 && (h - hi).abs() <= span * 2.0 + 1e-12 {
        out.push(h);
        h += if upward { step } else { -step };
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    out
}

fn run_threshold_for_theta(
    config: &ExperimentConfig,
    theta: f64,
    seed: u64,
) -> Result<ThresholdReport> {
    let mut levels = config.levels();
    for attempt in 0..3 {
        let cfg = ThresholdConfig {
            dim: config.dim,
            theta,
            scales: config.scales.clone(),
            levels: levels.clone(),
            replicas: config.replicas,
            seed,
            margin: config.margin,
            gamma: config.gamma,
            fit_gap: config.fit_gap,
        };
        match estimators::threshold_report(&cfg) {
            Ok(report) => return Ok(report),
            Err(Error::GridNonInformative { all_above }) if attempt < 2 => {
                eprintln!(
                    "threshold: level grid non-informative (all {} gamma), widening {}",
                    if all_above { "above" } else { "below" },
                    if all_above { "upward" } else { "downward" },
                );
                levels = widen(&levels, all_above);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(anyhow!(
        "level grid stayed non-informative after widening twice; adjust the configured grid"
    ))
}

pub fn threshold(config: &ExperimentConfig, seed: u64, writer: &Writer) -> Result<()> {
    for &theta in &config.theta {
        let report = run_threshold_for_theta(config, theta, seed)?;
        let curves = CurveTable {
            schema: estimators::CURVE_SCHEMA.to_string(),
            shared_seed: true,
            rows: report.curves.clone(),
        };
        let tag = format!("{theta}").replace('.', "_");
        writer.csv(
            &format!("threshold-curves-theta-{tag}.csv"),
            estimators::CURVE_SCHEMA,
            "threshold",
            &curves.to_csv(),
        )?;
        let path = writer.json(
            &format!("threshold-theta-{tag}.json"),
            estimators::THRESHOLD_SCHEMA,
            "threshold",
            &report,
        )?;
        println!(
            "theta={theta}: h** = {:.4} (gamma = {}), report at {}",
            report.h_double_star,
            report.gamma,
            path.display()
        );
        if let Some(s) = &report.sharpness {
            println!(
                "  sharpness at h = {:.3}: epsilon = {:.3} ± {:.3} (accepted: {})",
                s.level, s.epsilon, s.epsilon_se, s.accepted
            );
        }
        if let Some(d) = &report.decay {
            println!(
                "  decay at h = {:.3}: c' = {:.3} ± {:.3}, rho = {:.2} (accepted: {})",
                d.level, d.c_prime, d.c_prime_se, d.rho, d.accepted
            );
        }
    }
    Ok(())
}

/// Runs the oracle suite; returns true when every check passed.
pub fn verify(seed: u64, writer: &Writer) -> Result<bool> {
    let records = oracle::run_verification_suite(seed);
    let mut all_pass = true;
    for r in &records {
        println!(
            "{} {:28} margin {:>12.3e}  [{}]",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.margin,
            r.instance
        );
        all_pass &= r.pass;
    }
    #[derive(serde::Serialize)]
    struct VerifyPayload<'a> {
        all_pass: bool,
        checks: &'a [oracle::CheckRecord],
    }
    let path = writer.json(
        "verify.json",
        "verification-report/v1",
        "verify",
        VerifyPayload {
            all_pass,
            checks: &records,
        },
    )?;
    println!(
        "{}/{} checks passed; report at {}",
        records.iter().filter(|r| r.pass).count(),
        records.len(),
        path.display()
    );
    Ok(all_pass)
}

pub fn dump_field(config: &ExperimentConfig, seed: u64, writer: &Writer) -> Result<()> {
    let theta = config.theta[0];
    let scale = config.scales[0];
    let margin = config.margin.unwrap_or_else(|| default_margin(theta));
    let geom = Geometry::torus(config.dim, 2 * scale + margin).context("dump geometry")?;
    let sampler = TorusSampler::new(&geom, theta)?;
    let sample = field::sample_field(&sampler, seed, "dump-field", &[]);
    let mut bytes = Vec::new();
    field::write_dump(&mut bytes, &geom, theta, &sample)?;
    let bin = writer.raw("field.bin", &bytes)?;
    let sidecar = field::DumpSidecar {
        schema: field::DUMP_SCHEMA.to_string(),
        header: field::DumpHeader {
            dim: config.dim,
            mode: geom.mode(),
            theta,
            seed,
            count: sample.values.len(),
        },
        stream_id: sample.stream_id.clone(),
        config_hash: None,
    };
    let json = writer.json("field.json", field::DUMP_SCHEMA, "dump-field", &sidecar)?;
    println!("wrote {} and {}", bin.display(), json.display());
    Ok(())
}
