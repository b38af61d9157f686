//! Browser bindings: protect an image with the toy extractor stack, apply a
//! countermeasure, and preview the toy animation of an image.

use animguard::animate::ToyAnimator;
use animguard::extractors::toy::ToyStackBuilder;
use animguard::extractors::ExtractorBundle;
use animguard::io::{from_rgba8_bytes, to_rgba8_bytes};
use animguard::pgd::{protect_with_observer, ProtectionConfig};
use animguard::robustness::{apply_countermeasure, CountermeasureKind};
use animguard::tensor::{linf_norm, ImageTensor};
use wasm_bindgen::prelude::*;

const DEMO_SEMANTIC_RESOLUTION: usize = 32;

fn demo_stack(seed: u64) -> animguard::Result<ExtractorBundle> {
    ToyStackBuilder::new(seed).semantic_resolution(DEMO_SEMANTIC_RESOLUTION).build()
}

fn js(e: animguard::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Protected {
    rgba: Vec<u8>,
    losses: Vec<f64>,
    linf: f64,
}

#[wasm_bindgen]
impl Protected {
    /// Protected image as RGBA bytes.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Total objective per iteration.
    #[wasm_bindgen(getter)]
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Largest absolute perturbation, in 0..1 units.
    #[wasm_bindgen(getter)]
    pub fn linf(&self) -> f64 {
        self.linf
    }
}

pub fn protect_image(
    width: usize,
    height: usize,
    rgba: &[u8],
    budget_255: f64,
    iterations: usize,
    seed: u64,
) -> animguard::Result<Protected> {
    let x = from_rgba8_bytes(width, height, rgba)?;
    let cfg = ProtectionConfig { eta: budget_255 / 255.0, iterations, frames: 2, seed, ..ProtectionConfig::default() };
    let mut losses = Vec::with_capacity(iterations);
    let out = protect_with_observer(&x, &cfg, &demo_stack(seed)?, |rec, _| losses.push(rec.breakdown.total))?;
    Ok(Protected { rgba: to_rgba8_bytes(&out.protected), losses, linf: linf_norm(&out.delta) })
}

pub fn countermeasure_image(width: usize, height: usize, rgba: &[u8], kind: &str, param: f64) -> animguard::Result<Vec<u8>> {
    let x = from_rgba8_bytes(width, height, rgba)?;
    let kind: CountermeasureKind = kind.parse()?;
    Ok(to_rgba8_bytes(&apply_countermeasure(kind, param, &x)?))
}

/// `count` frames of the toy animation, concatenated as RGBA.
pub fn animate_image(width: usize, height: usize, rgba: &[u8], count: usize, seed: u64) -> animguard::Result<Vec<u8>> {
    let x = from_rgba8_bytes(width, height, rgba)?;
    let animator = ToyAnimator::new(demo_stack(seed)?, seed)?.frames(count)?;
    let video = animator.animate(&x, seed)?;
    Ok(video.frames().iter().flat_map(|f: &ImageTensor| to_rgba8_bytes(f)).collect())
}

/// Runs the protection loop with the toy stack; `budget_255` is in 1/255 units.
#[wasm_bindgen]
pub fn protect(width: usize, height: usize, rgba: &[u8], budget_255: f64, iterations: usize, seed: u64) -> Result<Protected, JsError> {
    protect_image(width, height, rgba, budget_255, iterations, seed).map_err(js)
}

/// Applies `jpeg`, `blur`, `noise`, `median`, or `bits` at `param`.
#[wasm_bindgen]
pub fn countermeasure(width: usize, height: usize, rgba: &[u8], kind: &str, param: f64) -> Result<Vec<u8>, JsError> {
    countermeasure_image(width, height, rgba, kind, param).map_err(js)
}

#[wasm_bindgen]
pub fn animate(width: usize, height: usize, rgba: &[u8], count: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    animate_image(width, height, rgba, count, seed).map_err(js)
}
