//! wasm-bindgen exports for the static browser demo.
//!
//! Three interactive operations over the built-in demo population: the
//! nested-versus-product envelope curves, the marginal CDF bound process
//! with its QTE hulls, and the non-refutation surface over the
//! `(gamma, lambda)` rectangle. Payloads are plain JS objects produced with
//! `serde_wasm_bindgen`.

mod demo;

pub use demo::{bound_process, envelope_curves, frontier_surface};

use wasm_bindgen::prelude::*;

fn to_js<T: serde::Serialize>(value: Result<T, String>) -> Result<JsValue, JsValue> {
    let value = value.map_err(|msg| JsValue::from_str(&msg))?;
    serde_wasm_bindgen::to_value(&value).map_err(|err| JsValue::from_str(&err.to_string()))
}

/// Nested and product-relaxation envelopes of the event probability.
#[wasm_bindgen(js_name = envelopeCurves)]
pub fn envelope_curves_js(
    gamma: f64,
    lambda: f64,
    e: f64,
    n_points: usize,
) -> Result<JsValue, JsValue> {
    to_js(demo::envelope_curves(gamma, lambda, e, n_points))
}

/// CDF bound process and QTE interval hulls of the demo population.
#[wasm_bindgen(js_name = boundProcess)]
pub fn bound_process_js(gamma: f64, lambda: f64, taus: Vec<f64>) -> Result<JsValue, JsValue> {
    to_js(demo::bound_process(gamma, lambda, &taus))
}

/// Non-refutation surface over `[1, gamma_max] x [1, lambda_max]`.
#[wasm_bindgen(js_name = frontierSurface)]
pub fn frontier_surface_js(
    gamma_max: f64,
    lambda_max: f64,
    mesh: usize,
    tau: f64,
) -> Result<JsValue, JsValue> {
    to_js(demo::frontier_surface(gamma_max, lambda_max, mesh, tau))
}
