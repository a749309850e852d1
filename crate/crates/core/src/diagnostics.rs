//! Invariant battery run against a trained model.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flows::{decoder_forward, decoder_left_inverse, gin_block_forward, IMAGE_TOLERANCE};
use crate::model::{elbo_gradient_check, standard_normal, Mode, PiVaeParams};
use crate::ndmath::{log_abs_det, numeric_jacobian, rng_stream, DenseArray, DEFAULT_STEP};
use crate::priors::{check_conditions, LabelColumn, SUFFICIENT_STATS};

pub const LOG_DET_TOLERANCE: f64 = 1e-6;
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    fn bounded(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        let status = if value <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name: name.into(), status, value: Some(value), tolerance: Some(tolerance), detail }
    }

    fn failed(name: &str, detail: String) -> Self {
        Self { name: name.into(), status: CheckStatus::Fail, value: None, tolerance: None, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
    /// No check failed (skipped checks do not count against this).
    pub all_passed: bool,
}

/// Largest `|ln |det J||` over every decoder coupling block at random inputs.
fn gin_log_det(params: &PiVaeParams, seed: u64) -> Result<CheckResult> {
    let n = params.obs_dim();
    let mut rng = rng_stream(seed, 20);
    let mut worst: f64 = 0.0;
    for block in &params.decoder.blocks {
        for _ in 0..3 {
            let x = standard_normal(&mut rng, 1, n);
            let jac = numeric_jacobian(|v| gin_block_forward(v, block, &params.store).expect("valid block"), &x, DEFAULT_STEP)?;
            worst = worst.max(log_abs_det(&jac)?.abs());
        }
    }
    let detail = format!("{} blocks, 3 random inputs each", params.decoder.blocks.len());
    Ok(CheckResult::bounded("gin_log_det", worst, LOG_DET_TOLERANCE, detail))
}

/// Largest coordinate error of `f^-1(f(z))` over standard-normal latents.
fn decoder_roundtrip(params: &PiVaeParams, seed: u64) -> Result<CheckResult> {
    let z = standard_normal(&mut rng_stream(seed, 21), 50, params.latent_dim());
    let rates = decoder_forward(&z, &params.decoder, &params.store)?;
    let mut worst = 0.0f64;
    for i in 0..z.rows() {
        match decoder_left_inverse(&DenseArray::row(rates.row_slice(i))?, &params.decoder, &params.store) {
            Ok(back) => worst = back.data().iter().zip(z.row_slice(i)).fold(worst, |m, (a, b)| m.max((a - b).abs())),
            Err(e) => return Ok(CheckResult::failed("decoder_roundtrip", format!("latent {i}: {e}"))),
        }
    }
    Ok(CheckResult::bounded("decoder_roundtrip", worst, ROUNDTRIP_TOLERANCE, format!("{} latents, image tolerance {IMAGE_TOLERANCE:e}", z.rows())))
}

/// Label rows probing the prior: class combinations, or evenly spaced continuous values.
fn probe_labels(params: &PiVaeParams, count: usize) -> Vec<Vec<f64>> {
    let spec = &params.config.labels;
    if spec.is_discrete_only() {
        return (0..spec.class_combinations().min(count)).map(|c| spec.combination_row(c)).collect();
    }
    (0..count)
        .map(|i| {
            let mut cont = 0;
            spec.columns
                .iter()
                .map(|c| match c {
                    LabelColumn::Discrete { classes } => (i % classes) as f64,
                    LabelColumn::Continuous => {
                        let (lo, hi) = params.label_support[cont];
                        cont += 1;
                        lo + (hi - lo) * (i as f64 + 0.5) / count as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// ELBO gradient against central differences on 4 rows sampled from the model.
fn gradient(params: &PiVaeParams, seed: u64) -> Result<CheckResult> {
    let mut rng = rng_stream(seed, 22);
    let z = standard_normal(&mut rng, 4, params.latent_dim());
    let rates = decoder_forward(&z, &params.decoder, &params.store)?;
    let counts = DenseArray::new(
        rates.shape().to_vec(),
        rates.data().iter().map(|&r| Poisson::new(r).map(|d| d.sample(&mut rng)).unwrap_or(0.0)).collect(),
    )?;
    let labels = match params.mode() {
        Mode::PiVae => {
            let probes = probe_labels(params, 4);
            let rows: Vec<Vec<f64>> = (0..4).map(|i| probes[i % probes.len()].clone()).collect();
            Some(DenseArray::from_rows(&rows)?)
        }
        Mode::Vae => None,
    };
    let eps = standard_normal(&mut rng, 4, params.latent_dim());
    let entries = elbo_gradient_check(params, &counts, labels.as_ref(), &eps, DEFAULT_STEP)?;
    let worst = entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let (value, detail) = match worst {
        Some(e) => (e.max_rel_error, format!("{} parameter groups, worst {}", entries.len(), e.name)),
        None => (0.0, "no parameters".into()),
    };
    Ok(CheckResult::bounded("elbo_gradient", value, GRADIENT_TOLERANCE, detail))
}

/// Invertibility of the natural-parameter difference matrix of the label prior.
fn prior_conditions(params: &PiVaeParams) -> Result<CheckResult> {
    let name = "label_prior_conditions";
    let Some(prior) = &params.prior else {
        return Ok(CheckResult { name: name.into(), status: CheckStatus::Skipped, value: None, tolerance: None, detail: "model has no label prior".into() });
    };
    let need = params.latent_dim() * SUFFICIENT_STATS + 1;
    let probes = probe_labels(params, need);
    if probes.len() < need {
        return Ok(CheckResult::failed(name, format!("{} distinct labels available, {need} needed", probes.len())));
    }
    let r = check_conditions(prior, &params.store, &probes)?;
    let status = if r.invertible { CheckStatus::Pass } else { CheckStatus::Fail };
    Ok(CheckResult {
        name: name.into(),
        status,
        value: Some(r.condition_number),
        tolerance: None,
        detail: format!("rank {} of {}, determinant {:e}", r.rank, need - 1, r.determinant),
    })
}

pub fn run_checks(params: &PiVaeParams, seed: u64) -> Result<CheckReport> {
    let checks = vec![gin_log_det(params, seed)?, decoder_roundtrip(params, seed)?, gradient(params, seed)?, prior_conditions(params)?];
    let all_passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    Ok(CheckReport { checks, all_passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::priors::LabelSpec;

    #[test]
    fn fresh_model_passes() {
        for (labels, mode) in [(LabelSpec::discrete(5), Mode::PiVae), (LabelSpec::continuous(1), Mode::PiVae), (LabelSpec::discrete(2), Mode::Vae)] {
            let mut p = PiVaeParams::init(ModelConfig { obs_dim: 8, latent_dim: 2, labels, mode }, 3).unwrap();
            p.label_support = vec![(0.0, 6.0); p.label_support.len()];
            p.perturb(0.05, 2);
            let r = run_checks(&p, 0).unwrap();
            assert!(r.all_passed, "{r:#?}");
        }
    }

    #[test]
    fn too_few_classes_fail_conditions() {
        let p = PiVaeParams::init(ModelConfig { obs_dim: 8, latent_dim: 2, labels: LabelSpec::discrete(3), mode: Mode::PiVae }, 3).unwrap();
        let r = prior_conditions(&p).unwrap();
        assert_eq!(r.status, CheckStatus::Fail);
    }
}
