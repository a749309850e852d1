use std::f64::consts::PI;

use pivae_core::eval::residual_psd;
use pivae_core::model::standard_normal;
use pivae_core::ndmath::{rng_stream, DenseArray};
use pivae_core::priors::GaussParams;
use pivae_core::recognition::posterior_product;
use pivae_core::synth::{simulate, SynthConfig, SynthMode};
use pivae_core::{Error, Result};

/// Rates are only needed for the scatter plot, so the observation side stays small.
const DEMO_NEURONS: usize = 4;
pub const MAX_SAMPLES: usize = 20_000;

pub fn simulate_latents(mode: &str, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mode = match mode {
        "discrete" => SynthMode::Discrete,
        "continuous" => SynthMode::Continuous,
        other => return Err(Error::Argument(format!("unknown mode {other:?}"))),
    };
    if samples > MAX_SAMPLES {
        return Err(Error::Argument(format!("at most {MAX_SAMPLES} samples")));
    }
    let cfg = SynthConfig { mode, samples, obs_dim: DEMO_NEURONS, seed, ..SynthConfig::default() };
    let ds = simulate(&cfg)?;
    Ok((0..samples).flat_map(|i| [ds.latents.get(i, 0), ds.latents.get(i, 1), ds.labels.get(i, 0)]).collect())
}

fn density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

pub fn posterior_product_curves(enc_mean: f64, enc_var: f64, prior_mean: f64, prior_var: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(enc_var > 0.0 && prior_var > 0.0) {
        return Err(Error::Value("variances must be positive".into()));
    }
    if points < 2 || !(lo < hi) {
        return Err(Error::Argument("need lo < hi and at least 2 points".into()));
    }
    let enc = GaussParams::new(vec![enc_mean], vec![enc_var.ln()])?;
    let prior = GaussParams::new(vec![prior_mean], vec![prior_var.ln()])?;
    let post = posterior_product(&enc, &prior)?;
    let (pm, pv) = (post.mean[0], post.var()[0]);
    let xs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let mut out = xs.clone();
    out.extend(xs.iter().map(|&x| density(x, enc_mean, enc_var)));
    out.extend(xs.iter().map(|&x| density(x, prior_mean, prior_var)));
    out.extend(xs.iter().map(|&x| density(x, pm, pv)));
    out.extend([pm, pv]);
    Ok(out)
}

pub fn sinusoid_psd(freq_hz: f64, sampling_rate: f64, noise_sd: f64, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples > 1 << 16 {
        return Err(Error::Argument("at most 65536 samples".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Value("noise level must be nonnegative".into()));
    }
    let noise = standard_normal(&mut rng_stream(seed, 0), samples, 1);
    let data = (0..samples)
        .map(|i| (2.0 * PI * freq_hz * i as f64 / sampling_rate).sin() + noise_sd * noise.data()[i])
        .collect();
    let series = DenseArray::new(vec![samples, 1], data)?;
    let r = residual_psd(&series, &DenseArray::zeros(&[samples, 1]), sampling_rate)?;
    let mut out = r.freqs.clone();
    out.extend((0..r.freqs.len()).map(|k| r.psd.get(k, 0)));
    out.extend([r.total_power[0], r.mean_square[0]]);
    Ok(out)
}
