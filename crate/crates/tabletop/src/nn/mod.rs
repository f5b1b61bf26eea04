//! Layers with explicit forward/backward passes, network assembly from a
//! declarative spec, and the softmax cross-entropy head.
//!
//! Convolution is cross-correlation (no kernel flip) over `[c,h,w]`
//! tensors, run through im2col + matmul. Caches live inside each layer
//! and are populated only by train-mode forwards.

mod gradcheck;

pub use gradcheck::{
    central_difference, gradient_check, relative_error, GradCheckReport, ParamCheck,
};

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im, conv_out_dims, im2col, matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of (k-1)/2; output spatial size equals input at stride 1.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative layer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        padding: Padding,
    },
    Maxpool2,
    Dense {
        out_units: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
}

fn default_stride() -> usize {
    1
}

/// Architecture description: ordered layers plus input/output contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[1, h, w]` grayscale input.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Walk the layer chain and return every intermediate output shape.
    /// Rejects inconsistent chains (kernel too large, pooling a 1-pixel
    /// map, dense on unflattened input, wrong final width).
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.len() != 3 || self.input_shape[0] != 1 {
            return Err(Error::Dim(format!(
                "{}: input shape must be [1,h,w], got {:?}",
                self.name, self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::Dim(format!(
                            "{}: layer {idx} conv2d needs [c,h,w] input, got {cur:?}",
                            self.name
                        )));
                    }
                    if padding == Padding::Same && kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "{}: layer {idx} same-padding conv needs an odd kernel, got {kernel}",
                            self.name
                        )));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!(
                            "{}: layer {idx} conv2d extents must be positive",
                            self.name
                        )));
                    }
                    let pad = match padding {
                        Padding::Same => (kernel - 1) / 2,
                        Padding::Valid => 0,
                    };
                    let (oh, ow) = conv_out_dims(cur[1], cur[2], kernel, kernel, stride, pad)?;
                    vec![out_channels, oh, ow]
                }
                LayerSpec::Maxpool2 => {
                    if cur.len() != 3 {
                        return Err(Error::Dim(format!(
                            "{}: layer {idx} maxpool2 needs [c,h,w] input, got {cur:?}",
                            self.name
                        )));
                    }
                    if cur[1] < 2 || cur[2] < 2 {
                        return Err(Error::Dim(format!(
                            "{}: layer {idx} maxpool2 input {}x{} is smaller than its 2x2 window",
                            self.name, cur[1], cur[2]
                        )));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Dense { out_units } => {
                    if cur.len() != 1 {
                        return Err(Error::Dim(format!(
                            "{}: layer {idx} dense needs a flattened input, got {cur:?}",
                            self.name
                        )));
                    }
                    if out_units == 0 {
                        return Err(Error::Config(format!(
                            "{}: layer {idx} dense out_units must be positive",
                            self.name
                        )));
                    }
                    vec![out_units]
                }
                LayerSpec::Relu => cur,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "{}: layer {idx} dropout rate {rate} outside [0,1)",
                            self.name
                        )));
                    }
                    cur
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        match shapes.last() {
            Some(last) if last.as_slice() == [self.classes] => Ok(shapes),
            other => Err(Error::Dim(format!(
                "{}: final layer shape {other:?} does not match {} classes",
                self.name, self.classes
            ))),
        }
    }

    /// Copy of the spec with every dropout rate forced to zero
    /// (gradient-check mode).
    pub fn without_dropout(&self) -> NetworkSpec {
        let mut spec = self.clone();
        for layer in &mut spec.layers {
            if let LayerSpec::Dropout { rate } = layer {
                *rate = 0.0;
            }
        }
        spec
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shape_chain()?;
        let mut total = 0;
        let mut in_shape = self.input_shape.clone();
        for (layer, out_shape) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => total += out_channels * in_shape[0] * kernel * kernel + out_channels,
                LayerSpec::Dense { out_units } => total += in_shape[0] * out_units + out_units,
                _ => {}
            }
            in_shape = out_shape.clone();
        }
        Ok(total)
    }
}

struct ConvCache<T> {
    cols: Tensor<T>,
    in_shape: [usize; 3],
    pad: usize,
}

struct Conv2d<T> {
    weight: Tensor<T>, // [out_c, in_c, kh, kw]
    bias: Tensor<T>,   // [out_c]
    kernel: usize,
    stride: usize,
    padding: Padding,
    cache: Option<ConvCache<T>>,
}

impl<T: Float> Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [out_c, in_c, kh, kw] = [
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        ];
        if x.rank() != 3 || x.shape()[0] != in_c {
            return Err(Error::Dim(format!(
                "conv2d expects [{in_c},h,w] input, got {:?}",
                x.shape()
            )));
        }
        let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pad = match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        };
        let (oh, ow) = conv_out_dims(h, w, kh, kw, self.stride, pad)?;
        let cols = im2col(x, kh, kw, self.stride, pad)?;
        let w_mat = self.weight.clone().reshape(&[out_c, in_c * kh * kw])?;
        let mut out = matmul(&w_mat, &cols)?;
        for o in 0..out_c {
            let b = self.bias.data()[o];
            for v in &mut out.data_mut()[o * oh * ow..(o + 1) * oh * ow] {
                *v = *v + b;
            }
        }
        self.cache = match mode {
            Mode::Train => Some(ConvCache {
                cols,
                in_shape: [in_c, h, w],
                pad,
            }),
            Mode::Eval => None,
        };
        out.reshape(&[out_c, oh, ow])
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv2d backward without train-mode forward".into()))?;
        let [out_c, in_c, kh, kw] = [
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        ];
        if upstream.rank() != 3 || upstream.shape()[0] != out_c {
            return Err(Error::Dim(format!(
                "conv2d upstream shape {:?} does not match {out_c} output channels",
                upstream.shape()
            )));
        }
        let spatial = upstream.shape()[1] * upstream.shape()[2];
        let up_mat = upstream.clone().reshape(&[out_c, spatial])?;

        // db[o] = sum over spatial positions.
        let mut db = Tensor::zeros(&[out_c]);
        for o in 0..out_c {
            let mut acc = T::zero();
            for &v in &up_mat.data()[o * spatial..(o + 1) * spatial] {
                acc = acc + v;
            }
            db.data_mut()[o] = acc;
        }

        let cols_t = transpose2(&cache.cols);
        let dw = matmul(&up_mat, &cols_t)?.reshape(&[out_c, in_c, kh, kw])?;

        let w_mat = self.weight.clone().reshape(&[out_c, in_c * kh * kw])?;
        let dcols = matmul(&transpose2(&w_mat), &up_mat)?;
        let [c, h, w] = cache.in_shape;
        let dx = col2im(&dcols, c, h, w, kh, kw, self.stride, cache.pad)?;
        Ok((dx, dw, db))
    }
}

fn transpose2<T: Float>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = m.data()[i * c + j];
        }
    }
    out
}

struct PoolCache {
    in_shape: [usize; 3],
    /// Flat input index of the winning cell per output position.
    argmax: Vec<usize>,
}

struct MaxPool2 {
    cache: Option<PoolCache>,
}

impl MaxPool2 {
    fn forward<T: Float>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.rank() != 3 {
            return Err(Error::Dim(format!("maxpool2 wants [c,h,w], got {:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::Dim(format!(
                "maxpool2 input {h}x{w} is smaller than its 2x2 window"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    // First-encountered maximum in row-major order wins ties.
                    let mut best_idx = (ch * h + oy * 2) * w + ox * 2;
                    let mut best = x.data()[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = (ch * oh + oy) * ow + ox;
                    out.data_mut()[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some(PoolCache {
                in_shape: [c, h, w],
                argmax,
            }),
            Mode::Eval => None,
        };
        Ok(out)
    }

    fn backward<T: Float>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("maxpool2 backward without train-mode forward".into()))?;
        let [c, h, w] = cache.in_shape;
        if upstream.len() != cache.argmax.len() {
            return Err(Error::Dim(format!(
                "maxpool2 upstream shape {:?} does not match cached forward",
                upstream.shape()
            )));
        }
        let mut dx = Tensor::zeros(&[c, h, w]);
        for (i, &src) in cache.argmax.iter().enumerate() {
            dx.data_mut()[src] = dx.data()[src] + upstream.data()[i];
        }
        Ok(dx)
    }
}

struct Dense<T> {
    weight: Tensor<T>, // [in, out]
    bias: Tensor<T>,   // [out]
    cache: Option<Tensor<T>>,
}

impl<T: Float> Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (in_units, out_units) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.rank() != 1 || x.shape()[0] != in_units {
            return Err(Error::Dim(format!(
                "dense expects [{in_units}] input, got {:?}",
                x.shape()
            )));
        }
        let row = x.clone().reshape(&[1, in_units])?;
        let mut y = matmul(&row, &self.weight)?.reshape(&[out_units])?;
        for (v, &b) in y.data_mut().iter_mut().zip(self.bias.data()) {
            *v = *v + b;
        }
        self.cache = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward without train-mode forward".into()))?;
        let (in_units, out_units) = (self.weight.shape()[0], self.weight.shape()[1]);
        if upstream.rank() != 1 || upstream.shape()[0] != out_units {
            return Err(Error::Dim(format!(
                "dense upstream shape {:?} does not match [{out_units}]",
                upstream.shape()
            )));
        }
        // dW = outer(x, upstream); dx = W . upstream; db = upstream.
        let mut dw = Tensor::zeros(&[in_units, out_units]);
        for i in 0..in_units {
            let xi = x.data()[i];
            for j in 0..out_units {
                dw.data_mut()[i * out_units + j] = xi * upstream.data()[j];
            }
        }
        let mut dx = Tensor::zeros(&[in_units]);
        for i in 0..in_units {
            let mut acc = T::zero();
            for j in 0..out_units {
                acc = acc + self.weight.data()[i * out_units + j] * upstream.data()[j];
            }
            dx.data_mut()[i] = acc;
        }
        Ok((dx, dw, upstream.clone()))
    }
}

struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Float> Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.cache = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        out
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("relu backward without train-mode forward".into()))?;
        // Subgradient at exactly 0 is 0.
        x.zip(upstream, |xi, u| if xi > T::zero() { u } else { T::zero() })
    }
}

struct Dropout<T> {
    rate: f64,
    mask: Option<Tensor<T>>,
}

impl<T: Float> Dropout<T> {
    fn forward<R: Rng>(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.mask = None;
                Ok(x.clone())
            }
            Mode::Train if self.rate == 0.0 => {
                self.mask = Some(Tensor::filled(x.shape(), T::one()));
                Ok(x.clone())
            }
            Mode::Train => {
                // Inverted dropout: survivors scaled by 1/(1-rate).
                let keep_scale = T::from(1.0 / (1.0 - self.rate)).unwrap();
                let mut mask = Tensor::zeros(x.shape());
                for m in mask.data_mut() {
                    if rng.gen::<f64>() >= self.rate {
                        *m = keep_scale;
                    }
                }
                let out = x.zip(&mask, |v, m| v * m)?;
                self.mask = Some(mask);
                Ok(out)
            }
        }
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::State("dropout backward without train-mode forward".into()))?;
        upstream.zip(&mask, |u, m| u * m)
    }
}

struct Flatten {
    in_shape: Option<Vec<usize>>,
}

enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool2(MaxPool2),
    Dense(Dense<T>),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
    Flatten(Flatten),
}

impl<T> Layer<T> {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::MaxPool2(_) => "maxpool",
            Layer::Dense(_) => "dense",
            Layer::Relu(_) => "relu",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten(_) => "flatten",
        }
    }
}

/// A runnable network: the spec plus its parameter/cache state.
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Float> Network<T> {
    /// Build a network with He-uniform weights (bound sqrt(6/fan_in)) and
    /// zero biases, drawn from a ChaCha stream seeded by `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        spec.shape_chain()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cur = spec.input_shape.clone();
        for layer_spec in &spec.layers {
            let layer = match *layer_spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let in_c = cur[0];
                    let fan_in = in_c * kernel * kernel;
                    let weight = he_uniform(&mut rng, &[out_channels, in_c, kernel, kernel], fan_in);
                    let pad = match padding {
                        Padding::Same => (kernel - 1) / 2,
                        Padding::Valid => 0,
                    };
                    let (oh, ow) = conv_out_dims(cur[1], cur[2], kernel, kernel, stride, pad)?;
                    cur = vec![out_channels, oh, ow];
                    Layer::Conv2d(Conv2d {
                        weight,
                        bias: Tensor::zeros(&[out_channels]),
                        kernel,
                        stride,
                        padding,
                        cache: None,
                    })
                }
                LayerSpec::Maxpool2 => {
                    cur = vec![cur[0], cur[1] / 2, cur[2] / 2];
                    Layer::MaxPool2(MaxPool2 { cache: None })
                }
                LayerSpec::Dense { out_units } => {
                    let in_units = cur[0];
                    let weight = he_uniform(&mut rng, &[in_units, out_units], in_units);
                    cur = vec![out_units];
                    Layer::Dense(Dense {
                        weight,
                        bias: Tensor::zeros(&[out_units]),
                        cache: None,
                    })
                }
                LayerSpec::Relu => Layer::Relu(Relu { cache: None }),
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout { rate, mask: None }),
                LayerSpec::Flatten => {
                    cur = vec![cur.iter().product()];
                    Layer::Flatten(Flatten { in_shape: None })
                }
            };
            layers.push(layer);
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Run the network; returns raw logits of width `classes`.
    pub fn forward<R: Rng>(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Conv2d(l) => l.forward(&cur, mode)?,
                Layer::MaxPool2(l) => l.forward(&cur, mode)?,
                Layer::Dense(l) => l.forward(&cur, mode)?,
                Layer::Relu(l) => l.forward(&cur, mode),
                Layer::Dropout(l) => l.forward(&cur, mode, rng)?,
                Layer::Flatten(l) => {
                    l.in_shape = match mode {
                        Mode::Train => Some(cur.shape().to_vec()),
                        Mode::Eval => None,
                    };
                    let flat = cur.len();
                    cur.reshape(&[flat])?
                }
            };
        }
        Ok(cur)
    }

    /// Forward in eval mode and capture the output of every conv layer.
    pub fn conv_activations(&mut self, x: &Tensor<T>) -> Result<Vec<(usize, usize, Tensor<T>)>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng as _;
        let _ = &mut rng;
        let mut cur = x.clone();
        let mut maps = Vec::new();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            cur = match layer {
                Layer::Conv2d(l) => {
                    let out = l.forward(&cur, Mode::Eval)?;
                    maps.push((idx, out.shape()[0], out.clone()));
                    out
                }
                Layer::MaxPool2(l) => l.forward(&cur, Mode::Eval)?,
                Layer::Dense(l) => l.forward(&cur, Mode::Eval)?,
                Layer::Relu(l) => l.forward(&cur, Mode::Eval),
                Layer::Dropout(_) => cur,
                Layer::Flatten(_) => {
                    let flat = cur.len();
                    cur.reshape(&[flat])?
                }
            };
        }
        Ok(maps)
    }

    /// Backpropagate from `dlogits`; returns gradients aligned with
    /// [`Network::parameters`]. Consumes the caches of the last
    /// train-mode forward.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads_rev: Vec<Vec<Tensor<T>>> = Vec::new();
        let mut upstream = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            match layer {
                Layer::Conv2d(l) => {
                    let (dx, dw, db) = l.backward(&upstream)?;
                    grads_rev.push(vec![dw, db]);
                    upstream = dx;
                }
                Layer::MaxPool2(l) => {
                    upstream = l.backward(&upstream)?;
                    grads_rev.push(vec![]);
                }
                Layer::Dense(l) => {
                    let (dx, dw, db) = l.backward(&upstream)?;
                    grads_rev.push(vec![dw, db]);
                    upstream = dx;
                }
                Layer::Relu(l) => {
                    upstream = l.backward(&upstream)?;
                    grads_rev.push(vec![]);
                }
                Layer::Dropout(l) => {
                    upstream = l.backward(&upstream)?;
                    grads_rev.push(vec![]);
                }
                Layer::Flatten(l) => {
                    let shape = l.in_shape.take().ok_or_else(|| {
                        Error::State("flatten backward without train-mode forward".into())
                    })?;
                    upstream = upstream.reshape(&shape)?;
                    grads_rev.push(vec![]);
                }
            }
        }
        Ok(grads_rev.into_iter().rev().flatten().collect())
    }

    /// Named parameter tensors in layer order, weight before bias.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(l) => {
                    out.push((format!("{}{}.weight", layer.kind(), i), &l.weight));
                    out.push((format!("{}{}.bias", layer.kind(), i), &l.bias));
                }
                Layer::Dense(l) => {
                    out.push((format!("{}{}.weight", layer.kind(), i), &l.weight));
                    out.push((format!("{}{}.bias", layer.kind(), i), &l.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d(l) => {
                    out.push((format!("conv{i}.weight"), &mut l.weight));
                    out.push((format!("conv{i}.bias"), &mut l.bias));
                }
                Layer::Dense(l) => {
                    out.push((format!("dense{i}.weight"), &mut l.weight));
                    out.push((format!("dense{i}.bias"), &mut l.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replace parameters from `(name, tensor)` pairs, e.g. a loaded
    /// checkpoint. Names and shapes must match exactly.
    pub fn set_parameters(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        let mut targets = self.parameters_mut();
        if targets.len() != params.len() {
            return Err(Error::Dim(format!(
                "parameter count mismatch: network has {}, got {}",
                targets.len(),
                params.len()
            )));
        }
        for ((name, target), (src_name, src)) in targets.iter_mut().zip(params) {
            if name != src_name {
                return Err(Error::Parse(format!(
                    "parameter name mismatch: expected {name}, got {src_name}"
                )));
            }
            if target.shape() != src.shape() {
                return Err(Error::Dim(format!(
                    "parameter {name} shape {:?} does not match {:?}",
                    src.shape(),
                    target.shape()
                )));
            }
            **target = src.clone();
        }
        Ok(())
    }
}

fn he_uniform<T: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from(rng.gen_range(-bound..bound)).unwrap();
    }
    t
}

/// Numerically stable softmax + cross-entropy head.
///
/// Returns `(loss, probs, dlogits)` where `dlogits = probs - onehot(label)`.
pub fn softmax_xent<T: Float>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if logits.rank() != 1 || logits.shape()[0] < 2 {
        return Err(Error::Dim(format!(
            "softmax_xent wants at least 2 logits, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[0];
    if label >= k {
        return Err(Error::Dim(format!("label {label} out of range for {k} classes")));
    }
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut probs = logits.map(|v| (v - max).exp());
    let mut sum = T::zero();
    for &p in probs.data() {
        sum = sum + p;
    }
    for p in probs.data_mut() {
        *p = *p / sum;
    }
    let loss = -(probs.data()[label].ln());
    if !loss.is_finite() {
        return Err(Error::Numeric("softmax cross-entropy loss is not finite".into()));
    }
    let mut dlogits = probs.clone();
    dlogits.data_mut()[label] = dlogits.data()[label] - T::one();
    Ok((loss, probs, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_with(
        weight: Tensor<f64>,
        bias: Tensor<f64>,
        kernel: usize,
        padding: Padding,
    ) -> Conv2d<f64> {
        Conv2d {
            weight,
            bias,
            kernel,
            stride: 1,
            padding,
            cache: None,
        }
    }

    /// Naive sliding-window cross-correlation oracle.
    fn conv_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (in_c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (out_c, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[out_c, oh, ow]);
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..in_c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wid as isize {
                                    acc += x.at3(i, iy as usize, ix as usize)
                                        * w.data()[((o * in_c + i) * kh + ky as usize) * kw
                                            + kx as usize];
                                }
                            }
                        }
                    }
                    out.set3(o, oy, ox, acc + b.data()[o]);
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_valid_2x2_identity_kernel() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut conv = conv_with(w, Tensor::zeros(&[1]), 2, Padding::Valid);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_forward_zero_weights_gives_bias() {
        let x = Tensor::from_vec(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let mut conv = conv_with(w, b, 3, Padding::Same);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
        assert!(y.data()[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::from_vec(
            &[3, 16, 16],
            (0..3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[8, 3, 3, 3],
            (0..8 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(&[8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let oracle = conv_naive(&x, &w, &b, 1, 1);
        let mut conv = conv_with(w, b, 3, Padding::Same);
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), oracle.shape());
        for (a, o) in y.data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-6, "{a} vs {o}");
        }
    }

    #[test]
    fn conv_backward_scalar_chain_rule() {
        // 1x1 input, 1x1 kernel: dx = w*u, dw = x*u, db = u.
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let mut conv = conv_with(w, Tensor::zeros(&[1]), 1, Padding::Valid);
        conv.forward(&x, Mode::Train).unwrap();
        let up = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let (dx, dw, db) = conv.backward(&up).unwrap();
        assert_eq!(dx.data(), &[3.0]);
        assert_eq!(dw.data(), &[2.0]);
        assert_eq!(db.data(), &[1.0]);
    }

    #[test]
    fn conv_backward_zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let mut conv = conv_with(w, Tensor::zeros(&[3]), 3, Padding::Same);
        conv.forward(&x, Mode::Train).unwrap();
        let up = Tensor::zeros(&[3, 4, 4]);
        let (dx, dw, db) = conv.backward(&up).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_requires_forward_cache() {
        let w = Tensor::zeros(&[1, 1, 1, 1]);
        let mut conv = conv_with(w, Tensor::zeros(&[1]), 1, Padding::Valid);
        let up = Tensor::zeros(&[1, 1, 1]);
        assert!(matches!(conv.backward(&up), Err(Error::State(_))));
    }

    #[test]
    fn maxpool_basic_and_floor_semantics() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut pool = MaxPool2 { cache: None };
        let y = pool.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[4.0]);

        let x5: Tensor<f64> = Tensor::zeros(&[1, 5, 5]);
        let y5 = pool.forward(&x5, Mode::Eval).unwrap();
        assert_eq!(y5.shape(), &[1, 2, 2]);
    }

    #[test]
    fn maxpool_backward_scatters_to_argmax() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut pool = MaxPool2 { cache: None };
        pool.forward(&x, Mode::Train).unwrap();
        let up = Tensor::from_vec(&[1, 1, 1], vec![7.0]).unwrap();
        let dx = pool.backward(&up).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn maxpool_ties_route_to_single_first_cell() {
        // Constant input: every window ties; first cell in row-major order wins.
        let x = Tensor::filled(&[1, 4, 4], 3.5);
        let mut pool = MaxPool2 { cache: None };
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
        let up = Tensor::filled(&[1, 2, 2], 1.0);
        let dx = pool.backward(&up).unwrap();
        assert_eq!(dx.data().iter().filter(|&&v| v != 0.0).count(), 4);
        assert_eq!(dx.at3(0, 0, 0), 1.0);
        assert_eq!(dx.at3(0, 0, 2), 1.0);
        assert_eq!(dx.at3(0, 2, 0), 1.0);
        assert_eq!(dx.at3(0, 2, 2), 1.0);
    }

    #[test]
    fn maxpool_too_small_errors() {
        let x: Tensor<f64> = Tensor::zeros(&[1, 1, 4]);
        let mut pool = MaxPool2 { cache: None };
        assert!(matches!(pool.forward(&x, Mode::Eval), Err(Error::Dim(_))));
    }

    #[test]
    fn dense_row_selection() {
        let x = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut dense = Dense {
            weight: w,
            bias: Tensor::zeros(&[2]),
            cache: None,
        };
        let y = dense.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_zero_weights_returns_bias() {
        let x = Tensor::from_vec(&[3], vec![9.0, 9.0, 9.0]).unwrap();
        let mut dense = Dense {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(),
            cache: None,
        };
        let y = dense.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0]);
    }

    #[test]
    fn relu_forward_backward_and_idempotence() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut relu = Relu { cache: None };
        let y = relu.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let up = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        let dx = relu.backward(&up).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 5.0]);

        let yy = relu.forward(&y, Mode::Eval);
        assert_eq!(yy.data(), y.data());
    }

    #[test]
    fn dropout_eval_is_identity_and_rate_zero_is_identity() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut drop = Dropout {
            rate: 0.3,
            mask: None,
        };
        let y = drop.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());

        let mut drop0 = Dropout {
            rate: 0.0,
            mask: None,
        };
        let y0 = drop0.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(y0.data(), x.data());
    }

    #[test]
    fn dropout_keep_frequency_monte_carlo() {
        let n = 1_000_000;
        let x = Tensor::filled(&[n], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut drop = Dropout {
            rate: 0.3,
            mask: None,
        };
        let y = drop.forward(&x, Mode::Train, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        let freq = kept as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.005, "keep frequency {freq}");
        // Survivors are scaled by 1/(1-rate).
        let survivor = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.7).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = Tensor::filled(&[8], 0.3f64);
        let (loss, probs, _) = softmax_xent(&logits, 2).unwrap();
        for &p in probs.data() {
            assert!((p - 0.125).abs() < 1e-12);
        }
        assert!((loss - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_extreme_logits_stable() {
        let logits = Tensor::from_vec(&[2], vec![1000.0f64, 0.0]).unwrap();
        let (loss, probs, _) = softmax_xent(&logits, 0).unwrap();
        assert!(probs.all_finite());
        assert!((probs.data()[0] - 1.0).abs() < 1e-9);
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn softmax_probs_sum_to_one_and_label_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Tensor<f32> =
            Tensor::from_vec(&[8], (0..8).map(|_| rng.gen_range(-4.0f32..4.0)).collect()).unwrap();
        let (_, probs, _) = softmax_xent(&logits, 7).unwrap();
        let sum: f32 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(softmax_xent(&logits, 8).is_err());
    }

    #[test]
    fn network_build_and_shape_chain_rejects_bad_specs() {
        let spec = NetworkSpec {
            name: "tiny".into(),
            input_shape: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Maxpool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 5 },
            ],
            classes: 5,
        };
        assert!(spec.shape_chain().is_ok());
        assert!(Network::<f32>::build(&spec, 0).is_ok());

        let mut bad = spec.clone();
        bad.classes = 3;
        assert!(bad.shape_chain().is_err());

        let mut even = spec.clone();
        even.layers[0] = LayerSpec::Conv2d {
            out_channels: 4,
            kernel: 4,
            stride: 1,
            padding: Padding::Same,
        };
        assert!(even.shape_chain().is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let spec = NetworkSpec {
            name: "pure".into(),
            input_shape: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Maxpool2,
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { out_units: 4 },
            ],
            classes: 4,
        };
        let mut net: Network<f32> = Network::build(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::filled(&[1, 8, 8], 0.25f32);
        let y1 = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        let y2 = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn set_parameters_roundtrip() {
        let spec = NetworkSpec {
            name: "roundtrip".into(),
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 3 },
            ],
            classes: 3,
        };
        let src: Network<f32> = Network::build(&spec, 123).unwrap();
        let mut dst: Network<f32> = Network::build(&spec, 456).unwrap();
        let params: Vec<(String, Tensor<f32>)> = src
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        dst.set_parameters(&params).unwrap();
        for ((_, a), (_, b)) in src.parameters().iter().zip(dst.parameters()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
