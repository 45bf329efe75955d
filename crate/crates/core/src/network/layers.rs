use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{self, FilterCache, SpectralFilter};
use crate::par;
use crate::pca::PcaBasis;
use crate::tensor::{FeatureShape, Matrix, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-sample spatial shape `(c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn batch(&self, n: usize) -> FeatureShape {
        FeatureShape::new(n, self.c, self.h, self.w)
    }

    pub fn of(t: &Tensor4) -> Self {
        let s = t.shape();
        Self::new(s.c, s.h, s.w)
    }
}

impl std::fmt::Display for MapShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `out_c × in_c × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Normalise with the stored running statistics.
    FrozenStats,
    /// Normalise with the statistics of the current batch.
    BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub running_mean: Vec<f64>,
    /// Biased (population) variance.
    pub running_var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            eps: BN_EPS,
            mode: BnMode::FrozenStats,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// `out_f × in_f`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The adaptation layer: flatten, filter in the PCA basis, unflatten.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralLayer {
    pub basis: PcaBasis,
    pub filter: SpectralFilter,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Flatten,
    Linear(Linear),
    Spectral(SpectralLayer),
}

/// What a layer kept from its forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv { input: Tensor4 },
    Bn(BnCache),
    Relu { output: Tensor4 },
    Flatten { shape: MapShape },
    Linear { input: Tensor4 },
    Spectral { cache: FilterCache },
}

#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Parameter gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    None,
    Conv { weight: Vec<f64>, bias: Vec<f64> },
    Bn { scale: Vec<f64>, shift: Vec<f64> },
    Linear { weight: Vec<f64>, bias: Vec<f64> },
    Spectral { gamma: Vec<f64> },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch-norm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::Spectral(_) => "ttawpca",
        }
    }

    pub fn output_shape(&self, input: MapShape) -> Result<MapShape> {
        let mismatch = |want: String| Err(Error::shape(self.name(), input.to_string(), want));
        match self {
            Layer::Conv2d(c) => {
                if input.c != c.in_c {
                    return mismatch(format!("{} input channels", c.in_c));
                }
                let (h, w) = (input.h + 2 * c.padding, input.w + 2 * c.padding);
                if h < c.kernel || w < c.kernel {
                    return mismatch(format!("kernel {}", c.kernel));
                }
                Ok(MapShape::new(c.out_c, h - c.kernel + 1, w - c.kernel + 1))
            }
            Layer::BatchNorm(b) => {
                if input.c != b.channels {
                    return mismatch(format!("{} channels", b.channels));
                }
                Ok(input)
            }
            Layer::Relu => Ok(input),
            Layer::Flatten => Ok(MapShape::new(input.features(), 1, 1)),
            Layer::Linear(l) => {
                if input.features() != l.in_f {
                    return mismatch(format!("{} input features", l.in_f));
                }
                Ok(MapShape::new(l.out_f, 1, 1))
            }
            Layer::Spectral(s) => {
                if input.features() != s.basis.features() {
                    return mismatch(format!("basis with p = {}", s.basis.features()));
                }
                Ok(input)
            }
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, LayerCache)> {
        let in_shape = MapShape::of(x);
        let out_shape = self.output_shape(in_shape)?;
        let n = x.shape().n;
        match self {
            Layer::Conv2d(c) => Ok((conv_forward(c, x, out_shape), LayerCache::Conv { input: x.clone() })),
            Layer::BatchNorm(b) => {
                let (y, cache) = bn_forward(b, x);
                Ok((y, LayerCache::Bn(cache)))
            }
            Layer::Relu => {
                let data = x.data().iter().map(|v| v.max(0.0)).collect();
                let y = Tensor4::new(x.shape(), data)?;
                Ok((y.clone(), LayerCache::Relu { output: y }))
            }
            Layer::Flatten => Ok((
                x.clone().reshaped(out_shape.batch(n))?,
                LayerCache::Flatten { shape: in_shape },
            )),
            Layer::Linear(l) => Ok((linear_forward(l, x, n), LayerCache::Linear { input: x.clone() })),
            Layer::Spectral(s) => {
                let m = Matrix::new(n, in_shape.features(), x.data().to_vec())?;
                let (y, cache) = filter::apply(&s.basis, &s.filter, &m)?;
                Ok((
                    Tensor4::new(x.shape(), y.into_data())?,
                    LayerCache::Spectral { cache },
                ))
            }
        }
    }

    /// Propagates `grad_out` back through the layer. Parameter gradients are
    /// computed only when `want_params` is set.
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Tensor4,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor4>, ParamGrad)> {
        match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Conv { input }) => {
                let gin = want_input.then(|| conv_backward_input(c, grad_out, input.shape()));
                let pg = if want_params {
                    let (weight, bias) = conv_backward_params(c, input, grad_out);
                    ParamGrad::Conv { weight, bias }
                } else {
                    ParamGrad::None
                };
                Ok((gin, pg))
            }
            (Layer::BatchNorm(b), LayerCache::Bn(bc)) => {
                let (gin, scale, shift) = bn_backward(b, bc, grad_out, want_input);
                let pg = if want_params {
                    ParamGrad::Bn { scale, shift }
                } else {
                    ParamGrad::None
                };
                Ok((gin, pg))
            }
            (Layer::Relu, LayerCache::Relu { output }) => {
                let gin = want_input.then(|| {
                    let data = grad_out
                        .data()
                        .iter()
                        .zip(output.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    Tensor4::new(grad_out.shape(), data).expect("same shape")
                });
                Ok((gin, ParamGrad::None))
            }
            (Layer::Flatten, LayerCache::Flatten { shape }) => {
                let gin = if want_input {
                    Some(grad_out.clone().reshaped(shape.batch(grad_out.shape().n))?)
                } else {
                    None
                };
                Ok((gin, ParamGrad::None))
            }
            (Layer::Linear(l), LayerCache::Linear { input }) => {
                let gin = want_input.then(|| linear_backward_input(l, grad_out, input.shape()));
                let pg = if want_params {
                    let (weight, bias) = linear_backward_params(l, input, grad_out);
                    ParamGrad::Linear { weight, bias }
                } else {
                    ParamGrad::None
                };
                Ok((gin, pg))
            }
            (Layer::Spectral(s), LayerCache::Spectral { cache }) => {
                let n = grad_out.shape().n;
                let g = Matrix::new(n, s.basis.features(), grad_out.data().to_vec())?;
                let fg = filter::apply_backward(&s.basis, &s.filter, cache, &g, want_input)?;
                let gin = match fg.input {
                    Some(m) => Some(Tensor4::new(grad_out.shape(), m.into_data())?),
                    None => None,
                };
                let pg = if want_params {
                    ParamGrad::Spectral { gamma: fg.gamma }
                } else {
                    ParamGrad::None
                };
                Ok((gin, pg))
            }
            _ => Err(Error::StaleCache("layer cache does not match layer kind")),
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor4, out: MapShape) -> Tensor4 {
    let s = x.shape();
    let n = s.n;
    let mut y = Tensor4::zeros(out.batch(n));
    let k = c.kernel;
    let pad = c.padding as isize;
    par::for_each_chunk_mut(y.data_mut(), out.features(), |b, dst| {
        let src = x.sample(b);
        for o in 0..c.out_c {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut acc = c.bias[o];
                    for i in 0..c.in_c {
                        for ky in 0..k {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += c.weight[((o * c.in_c + i) * k + ky) * k + kx]
                                    * src[(i * s.h + iy as usize) * s.w + ix as usize];
                            }
                        }
                    }
                    dst[(o * out.h + oy) * out.w + ox] = acc;
                }
            }
        }
    });
    y
}

fn conv_backward_input(c: &Conv2d, g: &Tensor4, in_shape: FeatureShape) -> Tensor4 {
    let gs = g.shape();
    let mut dx = Tensor4::zeros(in_shape);
    let k = c.kernel;
    let pad = c.padding as isize;
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    par::for_each_chunk_mut(dx.data_mut(), in_shape.features(), |b, dst| {
        let gb = g.sample(b);
        for o in 0..c.out_c {
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    let go = gb[(o * gs.h + oy) * gs.w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..c.in_c {
                        for ky in 0..k {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                dst[(i * in_shape.h + iy as usize) * in_shape.w + ix as usize] +=
                                    go * c.weight[((o * c.in_c + i) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv_backward_params(c: &Conv2d, x: &Tensor4, g: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let gs = g.shape();
    let k = c.kernel;
    let pad = c.padding as isize;
    // per-sample partial sums, reduced in sample order
    let partial = par::map_range(xs.n, |b| {
        let mut dw = vec![0.0; c.weight.len()];
        let mut db = vec![0.0; c.out_c];
        let (xb, gb) = (x.sample(b), g.sample(b));
        for o in 0..c.out_c {
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    let go = gb[(o * gs.h + oy) * gs.w + ox];
                    db[o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..c.in_c {
                        for ky in 0..k {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                dw[((o * c.in_c + i) * k + ky) * k + kx] +=
                                    go * xb[(i * xs.h + iy as usize) * xs.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0; c.weight.len()];
    let mut db = vec![0.0; c.out_c];
    for (pw, pb) in partial {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (dw, db)
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_stats(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let hw = s.h * s.w;
    let count = (s.n * hw) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for b in 0..s.n {
        let xb = x.sample(b);
        for ch in 0..s.c {
            mean[ch] += xb[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..s.n {
        let xb = x.sample(b);
        for ch in 0..s.c {
            var[ch] += xb[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn bn_forward(bn: &BatchNorm, x: &Tensor4) -> (Tensor4, BnCache) {
    let s = x.shape();
    let hw = s.h * s.w;
    let batch_stats = bn.mode == BnMode::BatchStats;
    let (batch_mean, batch_var) = if batch_stats {
        channel_stats(x)
    } else {
        (Vec::new(), Vec::new())
    };
    let (mean, var) = if batch_stats {
        (&batch_mean, &batch_var)
    } else {
        (&bn.running_mean, &bn.running_var)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for b in 0..s.n {
        let base = b * s.c * hw;
        for ch in 0..s.c {
            for t in 0..hw {
                let idx = base + ch * hw + t;
                let xh = (x.data()[idx] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[idx] = xh;
                y.data_mut()[idx] = bn.scale[ch] * xh + bn.shift[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
            batch_mean,
            batch_var,
        },
    )
}

fn bn_backward(
    bn: &BatchNorm,
    cache: &BnCache,
    g: &Tensor4,
    want_input: bool,
) -> (Option<Tensor4>, Vec<f64>, Vec<f64>) {
    let s = g.shape();
    let hw = s.h * s.w;
    let mut dscale = vec![0.0; s.c];
    let mut dshift = vec![0.0; s.c];
    for b in 0..s.n {
        let base = b * s.c * hw;
        for ch in 0..s.c {
            for t in 0..hw {
                let idx = base + ch * hw + t;
                dscale[ch] += g.data()[idx] * cache.xhat.data()[idx];
                dshift[ch] += g.data()[idx];
            }
        }
    }
    if !want_input {
        return (None, dscale, dshift);
    }
    let mut dx = Tensor4::zeros(s);
    let count = (s.n * hw) as f64;
    for b in 0..s.n {
        let base = b * s.c * hw;
        for ch in 0..s.c {
            let k = bn.scale[ch] * cache.inv_std[ch];
            for t in 0..hw {
                let idx = base + ch * hw + t;
                dx.data_mut()[idx] = if cache.batch_stats {
                    // dscale = Σ dy·x̂ and dshift = Σ dy already hold the channel sums
                    k * (g.data()[idx] - dshift[ch] / count - cache.xhat.data()[idx] * dscale[ch] / count)
                } else {
                    k * g.data()[idx]
                };
            }
        }
    }
    (Some(dx), dscale, dshift)
}

fn linear_forward(l: &Linear, x: &Tensor4, n: usize) -> Tensor4 {
    let mut y = Tensor4::zeros(FeatureShape::new(n, l.out_f, 1, 1));
    par::for_each_chunk_mut(y.data_mut(), l.out_f, |b, dst| {
        let xb = x.sample(b);
        for (o, out) in dst.iter_mut().enumerate() {
            let mut acc = l.bias[o];
            let wr = &l.weight[o * l.in_f..(o + 1) * l.in_f];
            for (w, v) in wr.iter().zip(xb) {
                acc += w * v;
            }
            *out = acc;
        }
    });
    y
}

fn linear_backward_input(l: &Linear, g: &Tensor4, in_shape: FeatureShape) -> Tensor4 {
    let mut dx = Tensor4::zeros(in_shape);
    par::for_each_chunk_mut(dx.data_mut(), l.in_f, |b, dst| {
        let gb = g.sample(b);
        for (o, go) in gb.iter().enumerate() {
            let wr = &l.weight[o * l.in_f..(o + 1) * l.in_f];
            for (d, w) in dst.iter_mut().zip(wr) {
                *d += go * w;
            }
        }
    });
    dx
}

fn linear_backward_params(l: &Linear, x: &Tensor4, g: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; l.weight.len()];
    let mut db = vec![0.0; l.out_f];
    for b in 0..x.shape().n {
        let (xb, gb) = (x.sample(b), g.sample(b));
        for (o, go) in gb.iter().enumerate() {
            db[o] += go;
            let row = &mut dw[o * l.in_f..(o + 1) * l.in_f];
            for (d, v) in row.iter_mut().zip(xb) {
                *d += go * v;
            }
        }
    }
    (dw, db)
}
