//! Layer implementations. Each layer caches whatever its backward pass
//! needs during a train-mode forward; backward without a prior forward is an
//! error.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{matmul, s, Mode, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Dense(Dense<F>),
    Conv3x3(Conv3x3<F>),
    MaxPool2(MaxPool2),
    Relu(Relu),
    BatchNorm(BatchNorm<F>),
    Dropout(Dropout),
    GlobalAvgPool(GlobalAvgPool),
}

impl<F: Scalar> Layer<F> {
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        match self {
            Layer::Dense(l) => l.forward(x, mode),
            Layer::Conv3x3(l) => l.forward(x, mode),
            Layer::MaxPool2(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::GlobalAvgPool(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Dense(l) => l.backward(dy),
            Layer::Conv3x3(l) => l.backward(dy),
            Layer::MaxPool2(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::GlobalAvgPool(l) => l.backward(dy),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        match self {
            Layer::Dense(l) => {
                f(format!("{}.w", l.name), &mut l.w);
                f(format!("{}.b", l.name), &mut l.b);
            }
            Layer::Conv3x3(l) => {
                f(format!("{}.w", l.name), &mut l.w);
                f(format!("{}.b", l.name), &mut l.b);
            }
            Layer::BatchNorm(l) => {
                f(format!("{}.gamma", l.name), &mut l.gamma);
                f(format!("{}.beta", l.name), &mut l.beta);
            }
            _ => {}
        }
    }

    /// Every persisted buffer, parameters first, then auxiliary state
    /// (batch-norm running statistics). Checkpoint order.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, &mut Vec<F>)) {
        match self {
            Layer::Dense(l) => {
                f(format!("{}.w", l.name), &mut l.w.data);
                f(format!("{}.b", l.name), &mut l.b.data);
            }
            Layer::Conv3x3(l) => {
                f(format!("{}.w", l.name), &mut l.w.data);
                f(format!("{}.b", l.name), &mut l.b.data);
            }
            Layer::BatchNorm(l) => {
                f(format!("{}.gamma", l.name), &mut l.gamma.data);
                f(format!("{}.beta", l.name), &mut l.beta.data);
                f(format!("{}.running_mean", l.name), &mut l.running_mean);
                f(format!("{}.running_var", l.name), &mut l.running_var);
            }
            _ => {}
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv3x3(_) => "conv3x3",
            Layer::MaxPool2(_) => "maxpool2",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Dropout(_) => "dropout",
            Layer::GlobalAvgPool(_) => "globalavgpool",
        }
    }
}

fn shape_err(layer: &str, expected: String, got: &Tensor<impl Scalar>) -> Error {
    Error::Shape {
        layer: layer.into(),
        expected,
        got: got.shape_string(),
    }
}

fn backward_without_forward(layer: &str) -> Error {
    Error::invalid(format!("backward without forward in layer `{layer}`"))
}

/// Fully connected layer. Input features are the flattened `C*H*W`; output
/// is (B, out, 1, 1). Weight layout is (out, in).
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    cache_x: Option<Tensor<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(name: String, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_features as f64).sqrt();
        let w: Vec<F> = (0..out_features * in_features)
            .map(|_| s(rng.gen_range(-limit..limit)))
            .collect();
        Dense {
            name,
            in_features,
            out_features,
            w: Tensor::param([out_features, in_features, 1, 1], w),
            b: Tensor::param([out_features, 1, 1, 1], vec![F::zero(); out_features]),
            cache_x: None,
        }
    }

    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        if x.features() != self.in_features {
            return Err(shape_err(
                &self.name,
                format!("(B, {}) features", self.in_features),
                x,
            ));
        }
        let batch = x.batch();
        let x2 = x.view2(batch, self.in_features);
        let w2 = self.w.view2(self.out_features, self.in_features);
        let mut y = matmul(&x2, &w2.t());
        for mut row in y.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v = *v + self.b.data[o];
            }
        }
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        let (data, _) = y.into_raw_vec_and_offset();
        Ok(Tensor::from_vec([batch, self.out_features, 1, 1], data))
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self
            .cache_x
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let batch = x.batch();
        let x2 = x.view2(batch, self.in_features);
        let dy2 = dy.view2(batch, self.out_features);

        let dw = matmul(&dy2.t(), &x2);
        for (g, d) in self.w.grad_mut().iter_mut().zip(dw.iter()) {
            *g = *g + *d;
        }
        for (o, g) in self.b.grad_mut().iter_mut().enumerate() {
            let mut sum = F::zero();
            for b in 0..batch {
                sum = sum + dy2[(b, o)];
            }
            *g = *g + sum;
        }
        let w2 = self.w.view2(self.out_features, self.in_features);
        let dx = matmul(&dy2, &w2);
        let (data, _) = dx.into_raw_vec_and_offset();
        Ok(Tensor::from_vec(x.shape(), data))
    }
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    in_shape: [usize; 4],
    /// One (in_c*9, H*W) column matrix per sample.
    cols: Vec<Array2<F>>,
}

/// 3x3 convolution, stride 1, zero padding 1 (same spatial size). Weight
/// layout is (out_c, in_c*9); implemented as per-sample im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv3x3<F: Scalar> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    cache: Option<ConvCache<F>>,
}

impl<F: Scalar> Conv3x3<F> {
    pub fn new(name: String, in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * 9;
        let limit = (6.0 / fan_in as f64).sqrt();
        let w: Vec<F> = (0..out_channels * fan_in)
            .map(|_| s(rng.gen_range(-limit..limit)))
            .collect();
        Conv3x3 {
            name,
            in_channels,
            out_channels,
            w: Tensor::param([out_channels, fan_in, 1, 1], w),
            b: Tensor::param([out_channels, 1, 1, 1], vec![F::zero(); out_channels]),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let [batch, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(shape_err(
                &self.name,
                format!("(B, {}, H, W)", self.in_channels),
                x,
            ));
        }
        let w2 = self.w.view2(self.out_channels, self.in_channels * 9);
        let sample_len = c * h * w;
        let out_len = self.out_channels * h * w;

        let per_sample: Vec<(Vec<F>, Array2<F>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let xs = &x.data[bi * sample_len..(bi + 1) * sample_len];
                let col = im2col(xs, c, h, w);
                let mut y = matmul(&w2, &col.view());
                for (o, mut row) in y.rows_mut().into_iter().enumerate() {
                    let bias = self.b.data[o];
                    row.iter_mut().for_each(|v| *v = *v + bias);
                }
                let (y_data, _) = y.into_raw_vec_and_offset();
                (y_data, col)
            })
            .collect();

        let mut data = Vec::with_capacity(batch * out_len);
        let mut cols = Vec::with_capacity(batch);
        for (y, col) in per_sample {
            data.extend_from_slice(&y);
            cols.push(col);
        }
        if mode == Mode::Train {
            self.cache = Some(ConvCache {
                in_shape: x.shape(),
                cols,
            });
        }
        Ok(Tensor::from_vec([batch, self.out_channels, h, w], data))
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let [batch, c, h, w] = cache.in_shape;
        let hw = h * w;
        let out_len = self.out_channels * hw;
        let w2 = self.w.view2(self.out_channels, self.in_channels * 9);

        // Per-sample contributions computed in parallel, then reduced in
        // index order so the result does not depend on scheduling.
        let per_sample: Vec<(Vec<F>, Array2<F>, Vec<F>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let dy_s =
                    ArrayView2::from_shape((self.out_channels, hw), &dy.data[bi * out_len..(bi + 1) * out_len])
                        .expect("dy view");
                let col = &cache.cols[bi];
                let dw = matmul(&dy_s, &col.t());
                let dcol = matmul(&w2.t(), &dy_s);
                let dx = col2im(&dcol, c, h, w);
                let db: Vec<F> = (0..self.out_channels)
                    .map(|o| {
                        let mut sum = F::zero();
                        for j in 0..hw {
                            sum = sum + dy_s[(o, j)];
                        }
                        sum
                    })
                    .collect();
                let (dw_data, _) = dw.into_raw_vec_and_offset();
                (dx, ndarray::Array2::from_shape_vec((self.out_channels, self.in_channels * 9), dw_data).unwrap(), db)
            })
            .collect();

        let mut dx_all = Vec::with_capacity(batch * c * hw);
        {
            let wg = self.w.grad_mut();
            for (_, dw, _) in &per_sample {
                for (g, d) in wg.iter_mut().zip(dw.iter()) {
                    *g = *g + *d;
                }
            }
        }
        {
            let bg = self.b.grad_mut();
            for (_, _, db) in &per_sample {
                for (g, d) in bg.iter_mut().zip(db.iter()) {
                    *g = *g + *d;
                }
            }
        }
        for (dx, _, _) in per_sample {
            dx_all.extend_from_slice(&dx);
        }
        Ok(Tensor::from_vec(cache.in_shape, dx_all))
    }
}

/// Expands one sample (C, H, W) into the (C*9, H*W) column matrix for a 3x3
/// same-pad convolution. Row index is ci*9 + ki*3 + kj.
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize) -> Array2<F> {
    let mut col = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..3usize {
            for kj in 0..3usize {
                let row = ci * 9 + ki * 3 + kj;
                let di = ki as isize - 1;
                let dj = kj as isize - 1;
                for hi in 0..h as isize {
                    let si = hi + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for wi in 0..w as isize {
                        let sj = wi + dj;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        col[(row, hi as usize * w + wi as usize)] =
                            plane[si as usize * w + sj as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im<F: Scalar>(dcol: &Array2<F>, c: usize, h: usize, w: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..3usize {
            for kj in 0..3usize {
                let row = ci * 9 + ki * 3 + kj;
                let di = ki as isize - 1;
                let dj = kj as isize - 1;
                for hi in 0..h as isize {
                    let si = hi + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for wi in 0..w as isize {
                        let sj = wi + dj;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let idx = ci * h * w + si as usize * w + sj as usize;
                        dx[idx] = dx[idx] + dcol[(row, hi as usize * w + wi as usize)];
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Ties go to the first maximum in row-major
/// window order.
#[derive(Debug, Clone)]
pub struct MaxPool2 {
    pub name: String,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2 {
    pub fn new(name: String) -> Self {
        MaxPool2 { name, cache: None }
    }

    fn forward<F: Scalar>(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let [batch, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(shape_err(&self.name, "(B, C, even H, even W)".into(), x));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for bi in 0..batch {
            for ci in 0..c {
                let plane = &x.data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = (2 * i) * w + 2 * j;
                        let mut best = plane[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * i + di) * w + 2 * j + dj;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                        data.push(best);
                        argmax.push(((bi * c + ci) * h * w + best_idx) as u32);
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((x.shape(), argmax));
        }
        Ok(Tensor::from_vec([batch, c, oh, ow], data))
    }

    fn backward<F: Scalar>(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let (in_shape, argmax) = self
            .cache
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let mut dx = vec![F::zero(); in_shape.iter().product()];
        for (g, &slot) in dy.data.iter().zip(&argmax) {
            dx[slot as usize] = dx[slot as usize] + *g;
        }
        Ok(Tensor::from_vec(in_shape, dx))
    }
}

#[derive(Debug, Clone)]
pub struct Relu {
    pub name: String,
    cache: Option<Vec<bool>>,
}

impl Relu {
    pub fn new(name: String) -> Self {
        Relu { name, cache: None }
    }

    fn forward<F: Scalar>(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut data = x.data.clone();
        let mask: Vec<bool> = data.iter().map(|v| *v > F::zero()).collect();
        for (v, &m) in data.iter_mut().zip(&mask) {
            if !m {
                *v = F::zero();
            }
        }
        if mode == Mode::Train {
            self.cache = Some(mask);
        }
        Ok(Tensor::from_vec(x.shape(), data))
    }

    fn backward<F: Scalar>(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let mask = self
            .cache
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let data = dy
            .data
            .iter()
            .zip(&mask)
            .map(|(g, &m)| if m { *g } else { F::zero() })
            .collect();
        Ok(Tensor::from_vec(dy.shape(), data))
    }
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    in_shape: [usize; 4],
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

/// Batch normalization over the channel axis: statistics are taken over
/// (batch, height, width) per channel in train mode, and replaced by running
/// statistics in eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub name: String,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    cache: Option<BnCache<F>>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: String, features: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            name,
            features,
            momentum,
            eps,
            gamma: Tensor::param([features, 1, 1, 1], vec![F::one(); features]),
            beta: Tensor::param([features, 1, 1, 1], vec![F::zero(); features]),
            running_mean: vec![F::zero(); features],
            running_var: vec![F::one(); features],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let [batch, c, h, w] = x.shape();
        if c != self.features {
            return Err(shape_err(
                &self.name,
                format!("(B, {}, H, W)", self.features),
                x,
            ));
        }
        let hw = h * w;
        let mut out = vec![F::zero(); x.len()];
        match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(format!(
                        "layer `{}`: train-mode batch of size {batch} (batch size >= 2 required)",
                        self.name
                    )));
                }
                let m = s::<F>((batch * hw) as f64);
                let mut xhat = vec![F::zero(); x.len()];
                let mut inv_std = vec![F::zero(); c];
                for ci in 0..c {
                    let mut sum = F::zero();
                    let mut sum_sq = F::zero();
                    for bi in 0..batch {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let v = x.data[base + k];
                            sum = sum + v;
                            sum_sq = sum_sq + v * v;
                        }
                    }
                    let mean = sum / m;
                    let var = (sum_sq / m - mean * mean).max(F::zero());
                    let istd = F::one() / (var + s(self.eps)).sqrt();
                    inv_std[ci] = istd;
                    let (g, b) = (self.gamma.data[ci], self.beta.data[ci]);
                    for bi in 0..batch {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let xh = (x.data[base + k] - mean) * istd;
                            xhat[base + k] = xh;
                            out[base + k] = g * xh + b;
                        }
                    }
                    let mom = s::<F>(self.momentum);
                    self.running_mean[ci] =
                        (F::one() - mom) * self.running_mean[ci] + mom * mean;
                    self.running_var[ci] = (F::one() - mom) * self.running_var[ci] + mom * var;
                }
                self.cache = Some(BnCache {
                    in_shape: x.shape(),
                    xhat,
                    inv_std,
                });
            }
            Mode::Eval => {
                for ci in 0..c {
                    let istd = F::one() / (self.running_var[ci] + s(self.eps)).sqrt();
                    let (g, b) = (self.gamma.data[ci], self.beta.data[ci]);
                    let mean = self.running_mean[ci];
                    for bi in 0..batch {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            out[base + k] = g * (x.data[base + k] - mean) * istd + b;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(x.shape(), out))
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let [batch, c, h, w] = cache.in_shape;
        let hw = h * w;
        let m = s::<F>((batch * hw) as f64);
        let mut dx = vec![F::zero(); dy.len()];
        for ci in 0..c {
            let g = self.gamma.data[ci];
            let istd = cache.inv_std[ci];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for bi in 0..batch {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    let d = dy.data[base + k];
                    sum_dy = sum_dy + d;
                    sum_dy_xhat = sum_dy_xhat + d * cache.xhat[base + k];
                }
            }
            self.gamma.grad_mut()[ci] = self.gamma.grad_mut()[ci] + sum_dy_xhat;
            self.beta.grad_mut()[ci] = self.beta.grad_mut()[ci] + sum_dy;
            // dx = gamma * istd / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
            let scale = g * istd / m;
            for bi in 0..batch {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    let d = dy.data[base + k];
                    dx[base + k] =
                        scale * (m * d - sum_dy - cache.xhat[base + k] * sum_dy_xhat);
                }
            }
        }
        Ok(Tensor::from_vec(cache.in_shape, dx))
    }
}

/// Inverted dropout: kept units are scaled by 1/(1-p) in train mode, eval is
/// the identity. Owns its ChaCha stream so results are independent of any
/// other layer's randomness.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub name: String,
    pub p: f64,
    pub rng: ChaCha8Rng,
    cache_keep: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(name: String, p: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout rate {p} out of range [0, 1)"
            )));
        }
        Ok(Dropout {
            name,
            p,
            rng,
            cache_keep: None,
        })
    }

    fn forward<F: Scalar>(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        if mode == Mode::Eval || self.p == 0.0 {
            if mode == Mode::Train {
                self.cache_keep = Some(vec![true; x.len()]);
            }
            return Ok(x.clone());
        }
        let keep_prob = 1.0 - self.p;
        let scale: F = s(1.0 / keep_prob);
        let keep: Vec<bool> = (0..x.len())
            .map(|_| self.rng.gen::<f64>() < keep_prob)
            .collect();
        let data = x
            .data
            .iter()
            .zip(&keep)
            .map(|(v, &k)| if k { *v * scale } else { F::zero() })
            .collect();
        self.cache_keep = Some(keep);
        Ok(Tensor::from_vec(x.shape(), data))
    }

    fn backward<F: Scalar>(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let keep = self
            .cache_keep
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let scale: F = s(1.0 / (1.0 - self.p));
        let data = dy
            .data
            .iter()
            .zip(&keep)
            .map(|(g, &k)| if k && self.p > 0.0 { *g * scale } else if k { *g } else { F::zero() })
            .collect();
        Ok(Tensor::from_vec(dy.shape(), data))
    }
}

/// Collapses (B, C, H, W) to (B, C, 1, 1) by averaging each channel plane.
#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    pub name: String,
    cache: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new(name: String) -> Self {
        GlobalAvgPool { name, cache: None }
    }

    fn forward<F: Scalar>(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let [batch, c, h, w] = x.shape();
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err(&self.name, "(B, C, H>0, W>0)".into(), x));
        }
        let denom = s::<F>(hw as f64);
        let mut data = Vec::with_capacity(batch * c);
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let mut sum = F::zero();
                for k in 0..hw {
                    sum = sum + x.data[base + k];
                }
                data.push(sum / denom);
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x.shape());
        }
        Ok(Tensor::from_vec([batch, c, 1, 1], data))
    }

    fn backward<F: Scalar>(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let in_shape = self
            .cache
            .take()
            .ok_or_else(|| backward_without_forward(&self.name))?;
        let [batch, c, h, w] = in_shape;
        let hw = h * w;
        let denom = s::<F>(hw as f64);
        let mut dx = vec![F::zero(); batch * c * hw];
        for bi in 0..batch {
            for ci in 0..c {
                let g = dy.data[bi * c + ci] / denom;
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    dx[base + k] = g;
                }
            }
        }
        Ok(Tensor::from_vec(in_shape, dx))
    }
}
