//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layout of each is given
//! on the function. The pure Rust versions live in [`demo`] so they can be
//! tested natively.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: pivae_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Synthetic latents and labels: `[z1, z2, label]` per sample.
#[wasm_bindgen]
pub fn simulate_latents(mode: &str, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::simulate_latents(mode, samples, seed).map_err(js)
}

/// Encoder, prior and product densities on a grid, followed by the product mean and variance:
/// `[x_0..x_{p-1}, enc.., prior.., product.., mean, var]`.
#[wasm_bindgen]
pub fn posterior_product_curves(
    enc_mean: f64,
    enc_var: f64,
    prior_mean: f64,
    prior_var: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    demo::posterior_product_curves(enc_mean, enc_var, prior_mean, prior_var, lo, hi, points).map_err(js)
}

/// Welch spectrum of a noisy sinusoid: `[f_0..f_{F-1}, psd_0..psd_{F-1}, total_power, mean_square]`.
#[wasm_bindgen]
pub fn sinusoid_psd(freq_hz: f64, sampling_rate: f64, noise_sd: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::sinusoid_psd(freq_hz, sampling_rate, noise_sd, samples, seed).map_err(js)
}
