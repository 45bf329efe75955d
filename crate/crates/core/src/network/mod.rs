//! A small frozen-weight convolutional classifier with an optional spectral
//! adaptation layer, plus the backward passes needed to adapt it.

mod checkpoint;
mod layers;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use layers::{
    channel_stats, BatchNorm, BnCache, BnMode, Conv2d, Layer, LayerCache, Linear, MapShape,
    ParamGrad, SpectralLayer, BN_EPS, BN_MOMENTUM,
};

use crate::error::{Error, Result};
use crate::filter::SpectralFilter;
use crate::pca::{self, IncrementalPca, PcaBasis};
use crate::tensor::{Matrix, Tensor4};

/// Which parameters a backward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptTarget {
    /// The spectral filter's `γ`.
    Filter,
    /// Every batch-norm scale and shift (the TENT-style modulators).
    BnAffine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Adapt(AdaptTarget),
    /// All trainable weights; used only for supervised training.
    All,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

impl ForwardCache {
    pub fn layer(&self, i: usize) -> Option<&LayerCache> {
        self.layers.get(i)
    }
}

/// Output of [`Model::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    /// Flattened adaptation-parameter gradient, when an adaptation target was requested.
    pub adapt: Vec<f64>,
    /// Per-layer gradients for [`GradTarget::All`], empty otherwise.
    pub layers: Vec<ParamGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input: MapShape,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(input: MapShape, layers: Vec<Layer>) -> Result<Self> {
        let model = Self { input, layers };
        model.shapes()?;
        if model.output_shape()?.h != 1 || model.output_shape()?.w != 1 {
            return Err(Error::shape(
                "Model::new",
                model.output_shape()?.to_string(),
                "Cx1x1 logits".to_string(),
            ));
        }
        if model.layers.iter().filter(|l| matches!(l, Layer::Spectral(_))).count() > 1 {
            return Err(Error::InvalidArgument("at most one adaptation layer".into()));
        }
        Ok(model)
    }

    /// conv(3→8) → BN → ReLU → conv(8→8) → BN → ReLU → flatten → linear, unpadded
    /// 3×3 kernels, He-normal weights drawn from `seed`.
    pub fn reference(input: MapShape, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 8;
        let mut conv = |in_c: usize, out_c: usize| {
            let fan_in = (in_c * 9) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            Conv2d {
                in_c,
                out_c,
                kernel: 3,
                padding: 0,
                weight: (0..out_c * in_c * 9).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; out_c],
            }
        };
        let c1 = conv(input.c, width);
        let c2 = conv(width, width);
        let flat = width * input.h.saturating_sub(4) * input.w.saturating_sub(4);
        if flat == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {input} too small for two unpadded 3x3 convolutions"
            )));
        }
        let dist = Normal::new(0.0, (1.0 / flat as f64).sqrt()).expect("positive std");
        let linear = Linear {
            in_f: flat,
            out_f: n_classes,
            weight: (0..flat * n_classes).map(|_| dist.sample(&mut rng)).collect(),
            bias: vec![0.0; n_classes],
        };
        Self::new(
            input,
            vec![
                Layer::Conv2d(c1),
                Layer::BatchNorm(BatchNorm::new(width)),
                Layer::Relu,
                Layer::Conv2d(c2),
                Layer::BatchNorm(BatchNorm::new(width)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(linear),
            ],
        )
    }

    /// Insertion index used by default: right after the first conv block's activation.
    pub fn default_insertion_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Relu))
            .map_or(0, |i| i + 1)
    }

    pub fn input_shape(&self) -> MapShape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Shape entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<MapShape>> {
        let mut shapes = vec![self.input];
        for l in &self.layers {
            let next = l.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<MapShape> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    pub fn n_classes(&self) -> usize {
        self.output_shape().map(|s| s.c).unwrap_or(0)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if MapShape::of(x) != self.input {
            return Err(Error::shape(
                "Model::forward",
                x.shape().to_string(),
                format!("model input {}", self.input),
            ));
        }
        if x.shape().n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(&cur)?;
            caches.push(c);
            cur = y;
        }
        let n = x.shape().n;
        let logits = Matrix::new(n, self.n_classes(), cur.into_data())?;
        Ok((logits, ForwardCache { layers: caches, batch: n }))
    }

    /// Inference only.
    pub fn logits(&self, x: &Tensor4) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, x: &Tensor4, upto: usize) -> Result<Tensor4> {
        self.check_input(x)?;
        if upto > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix of {upto} layers in a {}-layer model",
                self.layers.len()
            )));
        }
        let mut cur = x.clone();
        for l in &self.layers[..upto] {
            cur = l.forward(&cur)?.0;
        }
        Ok(cur)
    }

    /// Back-propagates `loss_grad = ∂loss/∂logits` down to the lowest layer
    /// holding requested parameters. Frozen weights get no gradient buffers
    /// unless `target` is [`GradTarget::All`].
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Matrix, target: GradTarget) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("forward cache was produced by a different model"));
        }
        if loss_grad.shape() != (cache.batch, self.n_classes()) {
            return Err(Error::shape(
                "Model::backward",
                loss_grad.shape_str(),
                format!("{}x{}", cache.batch, self.n_classes()),
            ));
        }
        let stop = match target {
            GradTarget::All => 0,
            GradTarget::Adapt(AdaptTarget::Filter) => self
                .spectral_index()
                .ok_or_else(|| Error::InvalidArgument("model has no adaptation layer".into()))?,
            GradTarget::Adapt(AdaptTarget::BnAffine) => self
                .layers
                .iter()
                .position(|l| matches!(l, Layer::BatchNorm(_)))
                .ok_or_else(|| Error::InvalidArgument("model has no batch-norm layer".into()))?,
        };
        let n = cache.batch;
        let last = *self.shapes()?.last().expect("non-empty");
        let mut grad = Tensor4::new(last.batch(n), loss_grad.data().to_vec())?;
        let mut per_layer = vec![ParamGrad::None; self.layers.len()];
        for i in (stop..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let want_params = match target {
                GradTarget::All => true,
                GradTarget::Adapt(AdaptTarget::Filter) => matches!(layer, Layer::Spectral(_)),
                GradTarget::Adapt(AdaptTarget::BnAffine) => matches!(layer, Layer::BatchNorm(_)),
            };
            let (gin, pg) = layer.backward(&cache.layers[i], &grad, i > stop, want_params)?;
            per_layer[i] = pg;
            match gin {
                Some(g) => grad = g,
                None => break,
            }
        }
        let mut out = Gradients::default();
        match target {
            GradTarget::All => out.layers = per_layer,
            GradTarget::Adapt(AdaptTarget::Filter) => {
                for pg in per_layer {
                    if let ParamGrad::Spectral { gamma } = pg {
                        out.adapt = gamma;
                    }
                }
            }
            GradTarget::Adapt(AdaptTarget::BnAffine) => {
                for pg in per_layer {
                    if let ParamGrad::Bn { scale, shift } = pg {
                        out.adapt.extend(scale);
                        out.adapt.extend(shift);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Index of the adaptation layer, if present.
    pub fn spectral_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Spectral(_)))
    }

    pub fn spectral(&self) -> Option<&SpectralLayer> {
        self.layers.iter().find_map(|l| match l {
            Layer::Spectral(s) => Some(s),
            _ => None,
        })
    }

    pub fn spectral_mut(&mut self) -> Option<&mut SpectralLayer> {
        self.layers.iter_mut().find_map(|l| match l {
            Layer::Spectral(s) => Some(s),
            _ => None,
        })
    }

    /// Returns a copy with the adaptation layer inserted before layer `j`.
    pub fn insert_ttawpca(&self, j: usize, basis: PcaBasis, filter: SpectralFilter) -> Result<Model> {
        if self.spectral_index().is_some() {
            return Err(Error::InvalidArgument("model already has an adaptation layer".into()));
        }
        if j > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "insertion index {j} beyond {} layers",
                self.layers.len()
            )));
        }
        let at = self.shapes()?[j];
        if at.features() != basis.features() {
            return Err(Error::shape(
                "insert_ttawpca",
                format!("layer {j} output {at} (p = {})", at.features()),
                format!("basis with p = {}", basis.features()),
            ));
        }
        if filter.len() != basis.rank() {
            return Err(Error::shape(
                "insert_ttawpca",
                format!("basis of rank {}", basis.rank()),
                format!("filter with {} modes", filter.len()),
            ));
        }
        let mut layers = self.layers.clone();
        layers.insert(j, Layer::Spectral(SpectralLayer { basis, filter }));
        Ok(Model {
            input: self.input,
            layers,
        })
    }

    /// Returns the model without its adaptation layer, and the removed layer.
    pub fn remove_ttawpca(&self) -> Result<(Model, SpectralLayer)> {
        let idx = self
            .spectral_index()
            .ok_or_else(|| Error::InvalidArgument("model has no adaptation layer".into()))?;
        let mut layers = self.layers.clone();
        let Layer::Spectral(s) = layers.remove(idx) else {
            unreachable!("index points at the spectral layer")
        };
        Ok((
            Model {
                input: self.input,
                layers,
            },
            s,
        ))
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for l in &mut self.layers {
            if let Layer::BatchNorm(b) = l {
                b.mode = mode;
            }
        }
    }

    pub fn bn_channels(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::BatchNorm(b) => b.channels,
                _ => 0,
            })
            .sum()
    }

    /// Number of parameters exposed to adaptation for `target`.
    pub fn adaptation_param_count(&self, target: AdaptTarget) -> usize {
        match target {
            AdaptTarget::Filter => self.spectral().map_or(0, |s| s.filter.len()),
            AdaptTarget::BnAffine => 2 * self.bn_channels(),
        }
    }

    /// Current adaptation parameters, flattened. BN layers contribute their
    /// scales then their shifts, layer by layer.
    pub fn adaptation_params(&self, target: AdaptTarget) -> Vec<f64> {
        match target {
            AdaptTarget::Filter => self.spectral().map(|s| s.filter.gamma().to_vec()).unwrap_or_default(),
            AdaptTarget::BnAffine => {
                let mut out = Vec::with_capacity(self.adaptation_param_count(target));
                for l in &self.layers {
                    if let Layer::BatchNorm(b) = l {
                        out.extend(&b.scale);
                        out.extend(&b.shift);
                    }
                }
                out
            }
        }
    }

    pub fn set_adaptation_params(&mut self, target: AdaptTarget, params: &[f64]) -> Result<()> {
        let want = self.adaptation_param_count(target);
        if params.len() != want {
            return Err(Error::shape(
                "set_adaptation_params",
                format!("{want} parameters"),
                format!("{} values", params.len()),
            ));
        }
        match target {
            AdaptTarget::Filter => self
                .spectral_mut()
                .ok_or_else(|| Error::InvalidArgument("model has no adaptation layer".into()))?
                .filter
                .set_gamma(params),
            AdaptTarget::BnAffine => {
                let mut off = 0;
                for l in &mut self.layers {
                    if let Layer::BatchNorm(b) = l {
                        let c = b.channels;
                        b.scale.copy_from_slice(&params[off..off + c]);
                        b.shift.copy_from_slice(&params[off + c..off + 2 * c]);
                        off += 2 * c;
                    }
                }
                Ok(())
            }
        }
    }

    /// SHA-256 over every frozen weight in layer order: convolution and
    /// linear weights, BN running statistics, and (when `include_bn_affine`)
    /// BN scale/shift. The PCA basis counts as frozen; filter `γ` does not.
    pub fn weights_hash(&self, include_bn_affine: bool) -> String {
        let mut h = Sha256::new();
        let mut put = |tag: &[u8], xs: &[f64]| {
            h.update(tag);
            h.update((xs.len() as u64).to_le_bytes());
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        for l in &self.layers {
            match l {
                Layer::Conv2d(c) => {
                    put(b"conv.w", &c.weight);
                    put(b"conv.b", &c.bias);
                }
                Layer::BatchNorm(b) => {
                    put(b"bn.mean", &b.running_mean);
                    put(b"bn.var", &b.running_var);
                    if include_bn_affine {
                        put(b"bn.scale", &b.scale);
                        put(b"bn.shift", &b.shift);
                    }
                }
                Layer::Linear(lin) => {
                    put(b"linear.w", &lin.weight);
                    put(b"linear.b", &lin.bias);
                }
                Layer::Spectral(s) => {
                    put(b"pca.mean", s.basis.mean());
                    put(b"pca.components", s.basis.components().data());
                    put(b"pca.s", s.basis.singular_values());
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash of every frozen weight (θ), including BN modulators.
    pub fn theta_hash(&self) -> String {
        self.weights_hash(true)
    }
}

/// Fits the PCA of layer-`j` activations over `source`. With `streamed`
/// each batch is folded into an [`IncrementalPca`] and dropped; otherwise
/// the activations are concatenated and fitted at once.
pub fn fit_pca_from_source(
    model: &Model,
    source: &[Tensor4],
    j: usize,
    rank: usize,
    streamed: bool,
) -> Result<PcaBasis> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("no source batches".into()));
    }
    let p = model.shapes()?.get(j).map(MapShape::features).ok_or_else(|| {
        Error::InvalidArgument(format!("layer index {j} beyond the model"))
    })?;
    let to_matrix = |b: &Tensor4| -> Result<Matrix> {
        let a = model.forward_prefix(b, j)?;
        Matrix::new(a.shape().n, p, a.into_data())
    };
    if streamed {
        let mut inc = IncrementalPca::new(p, rank)?;
        for b in source {
            inc.update(&to_matrix(b)?)?;
        }
        inc.finalize()
    } else {
        let mut all = to_matrix(&source[0])?;
        for b in &source[1..] {
            all = all.vstack(&to_matrix(b)?)?;
        }
        pca::fit(&all, rank)
    }
}

#[cfg(test)]
mod tests;
