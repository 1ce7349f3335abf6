//! Applying a quantization scheme to a whole model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::affine::{fit_affine, AffineIntParams, AffineMode};
use super::codebook::build_codebook;
use super::fixed::{fit_fixed_point, quantize_fixed_slice, FixedPointParams};
use super::saturation::calibrate_saturation;
use crate::error::{config_err, Error, Result};
use crate::model::{LayerWeights, Model};
use crate::tensor::{Element, Tensor4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    Fixed { bits: u32 },
    Affine { bits: u32 },
    Symmetric { bits: u32 },
    Codebook { k: usize },
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Fixed { bits } => write!(f, "fixed:{bits}"),
            Scheme::Affine { bits } => write!(f, "affine:{bits}"),
            Scheme::Symmetric { bits } => write!(f, "symmetric:{bits}"),
            Scheme::Codebook { k } => write!(f, "codebook:{k}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| config_err!("scheme `{s}` should look like fixed:8, affine:8 or codebook:16"))?;
        let n: u32 = n.parse().map_err(|_| config_err!("scheme `{s}`: `{n}` is not a number"))?;
        match kind {
            "fixed" | "affine" | "symmetric" if !(2..=32).contains(&n) => {
                Err(config_err!("scheme `{s}`: bits must be in 2..=32"))
            }
            "fixed" => Ok(Scheme::Fixed { bits: n }),
            "affine" => Ok(Scheme::Affine { bits: n }),
            "symmetric" => Ok(Scheme::Symmetric { bits: n }),
            "codebook" if (1..=65536).contains(&n) => Ok(Scheme::Codebook { k: n as usize }),
            "codebook" => Err(config_err!("scheme `{s}`: codebook size must be in 1..=65536")),
            _ => Err(config_err!("unknown scheme `{kind}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub weights: bool,
    pub activations: bool,
}

impl FromStr for Targets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = Targets {
            weights: false,
            activations: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "weights" => t.weights = true,
                "activations" => t.activations = true,
                _ => return Err(config_err!("unknown quantization target `{part}`")),
            }
        }
        if !t.weights && !t.activations {
            return Err(config_err!("no quantization targets given"));
        }
        Ok(t)
    }
}

impl fmt::Display for Targets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.weights, self.activations) {
            (true, true) => f.write_str("weights,activations"),
            (true, false) => f.write_str("weights"),
            (false, true) => f.write_str("activations"),
            (false, false) => f.write_str(""),
        }
    }
}

/// Parameters used for one weight array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerQuant {
    /// Left untouched (e.g. an all-zero layer).
    None,
    Fixed(FixedPointParams),
    Affine(AffineIntParams),
    Codebook { centroids: Vec<f32>, requested_k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActKind {
    Fixed(FixedPointParams),
    Affine(AffineIntParams),
}

/// Simulated activation quantizer: clip, quantize, dequantize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub kind: ActKind,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub coverage: f64,
}

impl ActQuant {
    pub fn apply(&self, x: f32) -> f32 {
        let x = (x as f64).clamp(self.clip_lo, self.clip_hi);
        (match &self.kind {
            ActKind::Fixed(p) => p.quantize(x),
            ActKind::Affine(p) => p.dequantize(p.quantize(x)),
        }) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantInfo {
    pub scheme: Scheme,
    pub targets: Targets,
    pub include_head: bool,
    pub ceil_compat: bool,
    pub seed: u64,
    pub layers: Vec<LayerQuant>,
    pub head: LayerQuant,
    /// Weights clipped by fixed-point saturation.
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantOptions {
    /// Also quantize the classifier head.
    pub include_head: bool,
    pub coverage_targets: Vec<f64>,
    pub seed: u64,
    /// Literal `ceil` rounding for affine codes.
    pub ceil_compat: bool,
    /// Activation values sampled per layer for calibration.
    pub max_calibration_samples: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            include_head: true,
            coverage_targets: vec![0.999, 0.9999],
            seed: 0,
            ceil_compat: false,
            max_calibration_samples: 200_000,
        }
    }
}

/// Quantize-dequantizes `values` in place, leaving zeros exactly zero.
fn quantize_linear(values: &mut [f32], scheme: Scheme, opts: &QuantOptions, saturated: &mut usize) -> Result<LayerQuant> {
    let nonzero: Vec<f64> = values.iter().filter(|v| **v != 0.0).map(|&v| v as f64).collect();
    if nonzero.is_empty() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return Ok(LayerQuant::None);
    }
    match scheme {
        Scheme::Fixed { bits } => {
            let p = fit_fixed_point(&nonzero, bits)?;
            let (q, sat) = quantize_fixed_slice(&nonzero, &p);
            *saturated += sat;
            let mut it = q.into_iter();
            for v in values.iter_mut().filter(|v| **v != 0.0) {
                *v = it.next().expect("one code per nonzero") as f32;
            }
            Ok(LayerQuant::Fixed(p))
        }
        Scheme::Affine { bits } | Scheme::Symmetric { bits } => {
            let mode = if matches!(scheme, Scheme::Affine { .. }) {
                AffineMode::Asymmetric
            } else {
                AffineMode::Symmetric
            };
            let mut p = fit_affine(&nonzero, bits, mode)?;
            p.ceil_compat = opts.ceil_compat;
            for v in values.iter_mut().filter(|v| **v != 0.0) {
                *v = p.dequantize(p.quantize(*v as f64)) as f32;
            }
            Ok(LayerQuant::Affine(p))
        }
        Scheme::Codebook { .. } => unreachable!("codebooks are handled separately"),
    }
}

fn sample_values(x: &Tensor4D<f32>, max: usize) -> Vec<f64> {
    let stride = x.len().div_ceil(max.max(1)).max(1);
    x.data().iter().step_by(stride).map(|&v| v as f64).collect()
}

fn act_quantizer(samples: &[f64], scheme: Scheme, opts: &QuantOptions) -> Result<ActQuant> {
    let bits = match scheme {
        Scheme::Fixed { bits } | Scheme::Affine { bits } | Scheme::Symmetric { bits } => bits,
        Scheme::Codebook { .. } => return Err(config_err!("codebook quantization does not apply to activations")),
    };
    let policy = calibrate_saturation(samples, &opts.coverage_targets, bits)?;
    let (lo, hi) = (policy.clip_lo, policy.clip_hi);
    let kind = match scheme {
        Scheme::Fixed { bits } => ActKind::Fixed(fit_fixed_point(&[lo, hi], bits)?),
        Scheme::Affine { bits } => {
            let mut p = AffineIntParams::from_range(lo, hi, bits, AffineMode::Asymmetric)?;
            p.ceil_compat = opts.ceil_compat;
            ActKind::Affine(p)
        }
        Scheme::Symmetric { bits } => ActKind::Affine(AffineIntParams::from_range(lo, hi, bits, AffineMode::Symmetric)?),
        Scheme::Codebook { .. } => unreachable!(),
    };
    Ok(ActQuant {
        kind,
        clip_lo: lo,
        clip_hi: hi,
        coverage: policy.coverage,
    })
}

/// Returns a quantized copy of `model`. Activation quantizers are calibrated
/// layer by layer on `calibration` (inputs to later layers already see the
/// quantizers of earlier ones).
pub fn apply_quantization(
    model: &Model,
    scheme: Scheme,
    targets: Targets,
    calibration: Option<&Tensor4D<f32>>,
    opts: &QuantOptions,
) -> Result<Model> {
    if targets.activations && matches!(scheme, Scheme::Codebook { .. }) {
        return Err(config_err!("codebook quantization does not apply to activations"));
    }
    if targets.activations && calibration.is_none() {
        return Err(config_err!("activation quantization needs calibration data"));
    }
    let mut out = model.clone();
    let mut saturated = 0;
    let mut layer_quant = vec![LayerQuant::None; out.layers.len()];
    let mut head_quant = LayerQuant::None;

    if targets.weights {
        for (i, layer) in out.layers.iter_mut().enumerate() {
            layer_quant[i] = match scheme {
                Scheme::Codebook { k } => {
                    let kernel = layer.weights.csr(&layer.shape)?.into_owned();
                    if kernel.values().is_empty() {
                        layer.weights = LayerWeights::Csr(kernel);
                        LayerQuant::None
                    } else {
                        let values: Vec<f64> = kernel.values().iter().map(|v| v.to_f64()).collect();
                        let pin = values.contains(&0.0);
                        let cb = build_codebook(&values, k, opts.seed.wrapping_add(i as u64), pin)?;
                        let kernel = kernel.with_values(cb.decode())?;
                        let q = LayerQuant::Codebook {
                            centroids: cb.centroids.iter().map(|c| c.to_f32()).collect(),
                            requested_k: k,
                        };
                        layer.weights = LayerWeights::Codebook { kernel, codebook: cb };
                        q
                    }
                }
                _ => match &mut layer.weights {
                    LayerWeights::Dense(w) => quantize_linear(w.data_mut(), scheme, opts, &mut saturated)?,
                    LayerWeights::Csr(k) => {
                        let mut values = k.values().to_vec();
                        let q = quantize_linear(&mut values, scheme, opts, &mut saturated)?;
                        *k = k.with_values(values)?;
                        q
                    }
                    LayerWeights::Codebook { .. } => {
                        return Err(config_err!("layer {} is already codebook-quantized", layer.name));
                    }
                },
            };
        }
        if opts.include_head {
            head_quant = match scheme {
                Scheme::Codebook { k } => {
                    let values: Vec<f64> = out.head_w.iter().map(|&v| v as f64).collect();
                    let cb = build_codebook(&values, k, opts.seed.wrapping_add(out.layers.len() as u64), values.contains(&0.0))?;
                    out.head_w = cb.decode();
                    LayerQuant::Codebook {
                        centroids: cb.centroids.iter().map(|c| c.to_f32()).collect(),
                        requested_k: k,
                    }
                }
                _ => quantize_linear(&mut out.head_w, scheme, opts, &mut saturated)?,
            };
        }
    }

    if let (true, Some(x)) = (targets.activations, calibration) {
        let mut a = x.clone();
        let n_layers = out.layers.len();
        for i in 0..n_layers {
            let q = act_quantizer(&sample_values(&a, opts.max_calibration_samples), scheme, opts)?;
            out.layers[i].act_quant = Some(q);
            a = forward_features(&out, x, i)?;
        }
        let feats = pooled_features(&a);
        out.head_act_quant = Some(act_quantizer(&feats, scheme, opts)?);
    }

    out.quant = Some(QuantInfo {
        scheme,
        targets,
        include_head: opts.include_head,
        ceil_compat: opts.ceil_compat,
        seed: opts.seed,
        layers: layer_quant,
        head: head_quant,
        saturated,
    });
    out.validate()?;
    Ok(out)
}

/// Activations after layer `last` (ReLU applied).
fn forward_features(model: &Model, x: &Tensor4D<f32>, last: usize) -> Result<Tensor4D<f32>> {
    let mut a = x.clone();
    for layer in &model.layers[..=last] {
        if let Some(q) = &layer.act_quant {
            a = a.map(|v| q.apply(v));
        }
        let dense = crate::dense::ConvLayerDense::new(
            layer.weights.dense()?.into_owned(),
            layer.bias.clone(),
            layer.shape.with_batch(a.dims()[0]),
        )?;
        a = crate::dense::conv_dense_direct(&a, &dense)?.map(|v| v.max(0.0));
    }
    Ok(a)
}

fn pooled_features(a: &Tensor4D<f32>) -> Vec<f64> {
    let [n, k, _, _] = a.dims();
    let mut out = Vec::with_capacity(n * k);
    for img in 0..n {
        for ch in 0..k {
            let p = a.plane(img, ch);
            out.push(p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64);
        }
    }
    out
}
