//! Browser bindings: augmentation preview with magnitude spectra, the fusion
//! heatmaps of a randomly initialized model, and the contrastive loss curve.
//!
//! Every binding takes plain numbers or JSON text and returns JSON text, so
//! the page needs no generated type definitions. The `*_json` functions hold
//! the logic and are usable (and tested) natively.

use btsf_core::augment::{apply_policy, AugmentPolicy, PolicyKind};
use btsf_core::encoders::{to_spectral, EncoderConfig, SpectralRepr};
use btsf_core::fusion::{bilinear_pool_full, FusionConfig};
use btsf_core::loss::{tuple_loss, LossConfig};
use btsf_core::model::{Model, ModelConfig};
use ndarray::{Array2, ArrayView2};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn rows(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn univariate(signal: &[f64]) -> Result<Array2<f64>, String> {
    if signal.len() < 2 {
        return Err("signal needs at least two samples".into());
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err("signal contains non-finite values".into());
    }
    Ok(Array2::from_shape_vec((1, signal.len()), signal.to_vec()).expect("length matches"))
}

/// Applies the policy described by `policy` (for example
/// `{"kind":"dropout","rate":0.1}`) and returns both series with their
/// magnitude spectra.
pub fn augment_preview_json(signal: &[f64], policy: &str, seed: u32) -> Result<Value, String> {
    let x = univariate(signal)?;
    let kind: PolicyKind = serde_json::from_str(policy).map_err(|e| format!("policy: {e}"))?;
    let policy = AugmentPolicy::new(kind, u64::from(seed)).map_err(|e| e.to_string())?;
    let y = apply_policy(x.view(), &policy).map_err(|e| e.to_string())?;
    let spectrum = |a: &Array2<f64>| {
        to_spectral(a.view(), SpectralRepr::Magnitude)
            .map(|s| s.row(0).to_vec())
            .map_err(|e| e.to_string())
    };
    Ok(json!({
        "original": signal,
        "augmented": y.row(0).to_vec(),
        "spectrum": spectrum(&x)?,
        "augmented_spectrum": spectrum(&y)?,
    }))
}

/// Encodes `signal` with a model initialized from `seed` and returns the
/// initial temporal and spectral maps, the full `[d × d]` bilinear pooling of
/// the two and the fused `[l × d]` joint feature after `loops` iterations.
pub fn fusion_heatmap_json(
    signal: &[f64],
    seed: u32,
    d: usize,
    m: usize,
    n: usize,
    l: usize,
    loops: usize,
) -> Result<Value, String> {
    let x = univariate(signal)?;
    let config = ModelConfig {
        in_channels: 1,
        encoder: EncoderConfig {
            d,
            m,
            n,
            ..EncoderConfig::default()
        },
        fusion: FusionConfig {
            l,
            loops,
            ..FusionConfig::default()
        },
    };
    let min_len = config.encoder.min_length();
    if signal.len() < min_len {
        return Err(format!("signal of {} samples is shorter than the encoder minimum {min_len}", signal.len()));
    }
    let model = Model::init(config, u64::from(seed)).map_err(|e| e.to_string())?;
    let f = model.features(x.view()).map_err(|e| e.to_string())?;
    let full = bilinear_pool_full(f.f_t0.view(), f.f_s0.view()).map_err(|e| e.to_string())?;
    Ok(json!({
        "temporal": rows(f.f_t0.view()),
        "spectral": rows(f.f_s0.view()),
        "full_pooling": rows(full.view()),
        "joint": rows(f.joint.view()),
    }))
}

/// Loss of one anchor as `s_pos` sweeps `[-1, 1]` with `n_negatives`
/// negatives all at similarity `s_neg`.
pub fn loss_curve_json(n_negatives: usize, s_neg: f64, temperature: f64, points: usize) -> Result<Value, String> {
    if n_negatives == 0 || points < 2 {
        return Err("need at least one negative and two points".into());
    }
    let config = LossConfig {
        temperature,
        ..LossConfig::default()
    };
    let negatives = vec![s_neg; n_negatives];
    let mut s_pos = Vec::with_capacity(points);
    let mut loss = Vec::with_capacity(points);
    for i in 0..points {
        let s = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
        let value = tuple_loss(s, &negatives, &config).map_err(|e| e.to_string())?.loss;
        s_pos.push(s);
        loss.push(value);
    }
    Ok(json!({ "s_pos": s_pos, "loss": loss }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn augment_preview(signal: Vec<f64>, policy: &str, seed: u32) -> Result<String, JsError> {
    to_js(augment_preview_json(&signal, policy, seed))
}

#[wasm_bindgen]
pub fn fusion_heatmap(
    signal: Vec<f64>,
    seed: u32,
    d: usize,
    m: usize,
    n: usize,
    l: usize,
    loops: usize,
) -> Result<String, JsError> {
    to_js(fusion_heatmap_json(&signal, seed, d, m, n, l, loops))
}

#[wasm_bindgen]
pub fn loss_curve(n_negatives: usize, s_neg: f64, temperature: f64, points: usize) -> Result<String, JsError> {
    to_js(loss_curve_json(n_negatives, s_neg, temperature, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(t: usize, period: f64) -> Vec<f64> {
        (0..t)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period).sin())
            .collect()
    }

    #[test]
    fn preview_keeps_length_and_spectrum_peak() {
        let x = sine(64, 8.0);
        let v = augment_preview_json(&x, r#"{"kind":"jitter","sigma":0.0}"#, 1).unwrap();
        assert_eq!(v["augmented"].as_array().unwrap().len(), 64);
        let spectrum: Vec<f64> = serde_json::from_value(v["spectrum"].clone()).unwrap();
        let peak = (0..spectrum.len()).max_by(|&a, &b| spectrum[a].total_cmp(&spectrum[b])).unwrap();
        assert_eq!(peak, 8);
        assert_eq!(v["spectrum"], v["augmented_spectrum"]);
    }

    #[test]
    fn preview_rejects_bad_policies() {
        let x = sine(32, 4.0);
        assert!(augment_preview_json(&x, r#"{"kind":"dropout","rate":1.5}"#, 0).is_err());
        assert!(augment_preview_json(&x, r#"{"kind":"nope"}"#, 0).is_err());
        assert!(augment_preview_json(&[1.0], r#"{"kind":"rotation"}"#, 0).is_err());
    }

    #[test]
    fn heatmap_shapes() {
        let v = fusion_heatmap_json(&sine(64, 8.0), 3, 6, 4, 5, 3, 2).unwrap();
        let shape = |k: &str| {
            let a = v[k].as_array().unwrap();
            (a.len(), a[0].as_array().unwrap().len())
        };
        assert_eq!(shape("temporal"), (4, 6));
        assert_eq!(shape("spectral"), (5, 6));
        assert_eq!(shape("full_pooling"), (6, 6));
        assert_eq!(shape("joint"), (3, 6));
        assert!(fusion_heatmap_json(&sine(4, 2.0), 3, 6, 4, 5, 3, 2).is_err());
    }

    #[test]
    fn loss_curve_decreases_in_s_pos() {
        let v = loss_curve_json(3, 0.2, 0.1, 21).unwrap();
        let loss: Vec<f64> = serde_json::from_value(v["loss"].clone()).unwrap();
        assert!(loss.windows(2).all(|w| w[1] < w[0]));
        let at_neg = loss[12];
        assert!((at_neg - 4f64.ln()).abs() < 1e-12);
    }
}
