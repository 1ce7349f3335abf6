//! Inference-side network: conv layers with dense, CSR or codebook weight
//! storage, optional activation quantizers, and a dense classifier head.

use std::borrow::Cow;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::csr::{build_csr, decompress, CsrKernel};
use crate::data::{Dataset, SyntheticConfig};
use crate::dense::{conv_dense_direct, conv_dense_gemm, ConvLayerDense};
use crate::engine::{conv_sparse_auto, EnginePlan};
use crate::error::{config_err, invariant_err, shape_err, Result};
use crate::harness::{Algorithm, LayerChoice, NetworkConfig};
use crate::nn::{NetSpec, ToyNet};
use crate::quant::codebook::Codebook;
use crate::quant::{ActQuant, QuantInfo};
use crate::shape::ConvShape;
use crate::tensor::{DType, Element, Tensor4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Dense,
    Csr,
    Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(Tensor4D<f32>),
    Csr(CsrKernel<f32>),
    /// CSR structure whose values decode from the codebook.
    Codebook {
        kernel: CsrKernel<f32>,
        codebook: Codebook,
    },
}

impl LayerWeights {
    pub fn storage(&self) -> Storage {
        match self {
            LayerWeights::Dense(_) => Storage::Dense,
            LayerWeights::Csr(_) => Storage::Csr,
            LayerWeights::Codebook { .. } => Storage::Codebook,
        }
    }

    pub fn dense(&self) -> Result<Cow<'_, Tensor4D<f32>>> {
        match self {
            LayerWeights::Dense(w) => Ok(Cow::Borrowed(w)),
            LayerWeights::Csr(k) | LayerWeights::Codebook { kernel: k, .. } => Ok(Cow::Owned(decompress(k)?)),
        }
    }

    pub fn csr(&self, shape: &ConvShape) -> Result<Cow<'_, CsrKernel<f32>>> {
        match self {
            LayerWeights::Dense(w) => Ok(Cow::Owned(build_csr(w, shape)?)),
            LayerWeights::Csr(k) | LayerWeights::Codebook { kernel: k, .. } => Ok(Cow::Borrowed(k)),
        }
    }

    /// Fraction of weights that are zero.
    pub fn sparsity(&self) -> f64 {
        match self {
            LayerWeights::Dense(w) => w.count_zeros() as f64 / w.len() as f64,
            LayerWeights::Csr(k) | LayerWeights::Codebook { kernel: k, .. } => {
                let total = k.out_channels() * k.shape().filter_volume();
                let nnz = k.values().iter().filter(|v| !v.is_zero()).count();
                (total - nnz) as f64 / total as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// Layer geometry with batch 1.
    pub shape: ConvShape,
    pub weights: LayerWeights,
    pub bias: Vec<f32>,
    /// Quantize-dequantize applied to this layer's input.
    pub act_quant: Option<ActQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetSpec,
    pub layers: Vec<ConvLayer>,
    /// `classes × features`, row-major.
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    pub head_act_quant: Option<ActQuant>,
    pub quant: Option<QuantInfo>,
    /// Dataset the model was trained on, so calibration and validation data
    /// can be regenerated.
    pub dataset: Option<SyntheticConfig>,
    /// Free-form settings echoed into the manifest.
    pub provenance: serde_json::Value,
}

impl Model {
    pub fn from_toynet(net: &ToyNet, dataset: Option<SyntheticConfig>) -> Result<Self> {
        let layers = net
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w: Vec<f32> = c
                    .weights
                    .iter()
                    .zip(&c.mask)
                    .map(|(&w, &m)| if m { w as f32 } else { 0.0 })
                    .collect();
                Ok(ConvLayer {
                    name: format!("conv{i}"),
                    shape: c.shape,
                    weights: LayerWeights::Dense(Tensor4D::from_vec(c.shape.weight_dims(), w)?),
                    bias: c.bias.iter().map(|&b| b as f32).collect(),
                    act_quant: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            spec: net.spec.clone(),
            layers,
            head_w: net.head_w.iter().map(|&w| w as f32).collect(),
            head_b: net.head_b.iter().map(|&b| b as f32).collect(),
            head_act_quant: None,
            quant: None,
            dataset,
            provenance: serde_json::Value::Null,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn features(&self) -> usize {
        self.layers.last().map(|l| l.shape.out_channels).unwrap_or(0)
    }

    /// Checks that layer shapes chain and every array has the right length.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.spec.conv_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(shape_err!(
                "network spec has {} convolutions, model has {}",
                shapes.len(),
                self.layers.len()
            ));
        }
        for (layer, want) in self.layers.iter().zip(&shapes) {
            if layer.shape != *want {
                return Err(shape_err!("layer {} has shape {:?}, expected {want:?}", layer.name, layer.shape));
            }
            if layer.bias.len() != want.out_channels {
                return Err(shape_err!("layer {} bias length {}", layer.name, layer.bias.len()));
            }
            match &layer.weights {
                LayerWeights::Dense(w) => {
                    if w.dims() != want.weight_dims() {
                        return Err(shape_err!("layer {} weight extents {:?}", layer.name, w.dims()));
                    }
                }
                LayerWeights::Csr(k) => check_kernel(&layer.name, k, want)?,
                LayerWeights::Codebook { kernel, codebook } => {
                    check_kernel(&layer.name, kernel, want)?;
                    codebook.validate()?;
                    if codebook.assignments.len() != kernel.values().len() {
                        return Err(invariant_err!(
                            "layer {}: {} codebook indices for {} stored values",
                            layer.name,
                            codebook.assignments.len(),
                            kernel.values().len()
                        ));
                    }
                    if codebook.decode() != kernel.values() {
                        return Err(invariant_err!("layer {}: values do not decode from the codebook", layer.name));
                    }
                }
            }
        }
        let (k, classes) = (self.features(), self.classes());
        if self.head_w.len() != k * classes || self.head_b.len() != classes {
            return Err(shape_err!("classifier head does not match {k} features × {classes} classes"));
        }
        Ok(())
    }

    /// Weighted sparsity over all conv weights.
    pub fn weighted_sparsity(&self) -> f64 {
        let (mut zeros, mut total) = (0.0, 0.0);
        for l in &self.layers {
            let n = (l.shape.out_channels * l.shape.filter_volume()) as f64;
            zeros += l.weights.sparsity() * n;
            total += n;
        }
        zeros / total
    }

    /// Converts every conv layer to CSR storage. Codebook layers are kept.
    pub fn to_csr(&self) -> Result<Model> {
        let mut m = self.clone();
        for l in &mut m.layers {
            if let LayerWeights::Dense(w) = &l.weights {
                l.weights = LayerWeights::Csr(build_csr(w, &l.shape)?);
            }
        }
        Ok(m)
    }

    /// Logits, `N × classes` row-major. Without a configuration every layer
    /// runs dense-direct in f32.
    pub fn forward(&self, x: &Tensor4D<f32>, config: Option<&NetworkConfig>) -> Result<Vec<f32>> {
        let [n, c, h, w] = x.dims();
        if [c, h, w] != self.spec.input {
            return Err(shape_err!("input {:?} does not match network input {:?}", x.dims(), self.spec.input));
        }
        if let Some(cfg) = config {
            if cfg.layers.len() != self.layers.len() {
                return Err(config_err!(
                    "configuration covers {} layers, model has {}",
                    cfg.layers.len(),
                    self.layers.len()
                ));
            }
        }
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(q) = &layer.act_quant {
                a = a.map(|v| q.apply(v));
            }
            let choice = config.map(|c| &c.layers[i]);
            a = run_layer(layer, &a, choice)?.map(|v| v.max(0.0));
        }
        let k = self.features();
        let plane = a.len() / (n * k);
        let mut logits = Vec::with_capacity(n * self.classes());
        for img in 0..n {
            let mut feat: Vec<f32> = (0..k)
                .map(|ch| a.plane(img, ch).iter().sum::<f32>() / plane as f32)
                .collect();
            if let Some(q) = &self.head_act_quant {
                feat.iter_mut().for_each(|v| *v = q.apply(*v));
            }
            for o in 0..self.classes() {
                let row = &self.head_w[o * k..(o + 1) * k];
                logits.push(self.head_b[o] + row.iter().zip(&feat).map(|(w, v)| w * v).sum::<f32>());
            }
        }
        Ok(logits)
    }

    pub fn predict(&self, x: &Tensor4D<f32>, config: Option<&NetworkConfig>) -> Result<Vec<usize>> {
        let logits = self.forward(x, config)?;
        Ok(logits
            .chunks(self.classes())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }

    /// Accuracy over a dataset, evaluated in chunks of `batch` images.
    pub fn accuracy(&self, data: &Dataset, config: Option<&NetworkConfig>, batch: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(config_err!("cannot score an empty dataset"));
        }
        let mut correct = 0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let preds = self.predict(&data.to_tensor::<f32>(chunk), config)?;
            correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == data.labels[i]).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn check_kernel(name: &str, k: &CsrKernel<f32>, want: &ConvShape) -> Result<()> {
    if k.shape() != want {
        return Err(shape_err!("layer {name}: CSR shape {:?} differs from {want:?}", k.shape()));
    }
    k.validate()
}

fn run_typed<T: Element>(layer: &ConvLayer, x: &Tensor4D<f32>, alg: Algorithm, plan: Option<EnginePlan>) -> Result<Tensor4D<f32>> {
    let xt: Tensor4D<T> = x.cast();
    let bias: Vec<T> = layer.bias.iter().map(|&b| T::from_f64(b as f64)).collect();
    let shape = layer.shape.with_batch(x.dims()[0]);
    let y = match alg {
        Algorithm::SparseDirect => {
            let kernel = layer.weights.csr(&layer.shape)?.cast::<T>();
            let plan = plan.unwrap_or(EnginePlan {
                sub_batch_size: 1,
                worker_count: 0,
                profile: T::DTYPE,
            });
            conv_sparse_auto(&xt, &kernel, &bias, &plan)?
        }
        Algorithm::DenseDirect | Algorithm::DenseGemm => {
            let dense = ConvLayerDense::new(layer.weights.dense()?.cast::<T>(), bias, shape)?;
            if alg == Algorithm::DenseDirect {
                conv_dense_direct(&xt, &dense)?
            } else {
                conv_dense_gemm(&xt, &dense)?
            }
        }
    };
    Ok(y.cast())
}

fn run_layer(layer: &ConvLayer, x: &Tensor4D<f32>, choice: Option<&LayerChoice>) -> Result<Tensor4D<f32>> {
    let Some(choice) = choice else {
        return run_typed::<f32>(layer, x, Algorithm::DenseDirect, None);
    };
    if choice.name != layer.name {
        return Err(config_err!("configuration layer {} does not match model layer {}", choice.name, layer.name));
    }
    let plan = (choice.algorithm == Algorithm::SparseDirect)
        .then(|| EnginePlan::new(choice.sub_batch_size, choice.worker_count, choice.dtype))
        .transpose()?;
    match choice.dtype {
        DType::F32 => run_typed::<f32>(layer, x, choice.algorithm, plan),
        DType::F16 => run_typed::<f16>(layer, x, choice.algorithm, plan),
        DType::F64 => Err(config_err!("layer {}: f64 is not an inference profile", layer.name)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ToyNet, Dataset) {
        let cfg = SyntheticConfig {
            samples_per_class: 5,
            height: 6,
            width: 6,
            ..Default::default()
        };
        let data = cfg.generate().unwrap();
        let net = ToyNet::new(NetSpec::two_conv([3, 6, 6], 4), 1).unwrap();
        (net, data)
    }

    #[test]
    fn matches_training_net() {
        let (net, data) = small();
        let model = Model::from_toynet(&net, None).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let logits = model.forward(&data.to_tensor(&idx), None).unwrap();
        for (i, row) in logits.chunks(4).enumerate() {
            let want = net.logits(data.image(i)).unwrap();
            for (a, b) in row.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn csr_storage_gives_same_logits() {
        let (mut net, data) = small();
        for (i, m) in net.convs[1].mask.iter_mut().enumerate() {
            *m = i % 4 == 0;
        }
        net.convs[1].apply_mask();
        let dense = Model::from_toynet(&net, None).unwrap();
        let csr = dense.to_csr().unwrap();
        assert!((csr.layers[1].weights.sparsity() - 0.75).abs() < 1e-12);
        let x = data.to_tensor::<f32>(&[0, 1, 2]);
        assert_eq!(dense.forward(&x, None).unwrap(), csr.forward(&x, None).unwrap());
    }

    #[test]
    fn rejects_wrong_input() {
        let (net, _) = small();
        let model = Model::from_toynet(&net, None).unwrap();
        assert!(model.forward(&Tensor4D::zeros([1, 3, 5, 6]), None).is_err());
    }
}
