//! Minimal dense/convolutional neural engine with reverse-mode gradients.
//!
//! Built for determinism and gradient-checkability rather than generality:
//! the layer set is exactly what the model zoo needs (dense, 3x3 same-pad
//! convolution, 2x2 max pooling, ReLU, batch norm, inverted dropout, global
//! average pooling, concatenation, softmax cross-entropy). Training runs in
//! f32; f64 is reserved for finite-difference gradient checks.
//!
//! Randomness is counter-based: every layer derives its own ChaCha stream
//! from (run seed, layer index), so worker counts and evaluation order never
//! change results.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod netspec;
pub mod optim;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub use layers::Layer;
pub use netspec::{LayerSpec, NetSpec};
pub use optim::SgdMomentum;

/// Float type the engine is generic over (f32 for training, f64 for checks).
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + rand::distributions::uniform::SampleUniform
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting literals into the generic float.
pub fn s<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("finite literal")
}

/// Forward-pass mode. Train mode engages dropout masks and batch statistics;
/// eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major tensor, up to 4-d as (batch, channels, height, width).
/// Vectors are stored as (batch, features, 1, 1). Parameters carry a
/// gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); len],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape");
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// A trainable parameter: same data, plus a zeroed gradient buffer.
    pub fn param(shape: [usize; 4], data: Vec<F>) -> Self {
        let mut t = Tensor::from_vec(shape, data);
        t.grad = Some(vec![F::zero(); t.data.len()]);
        t
    }

    /// Batch vector (B, features, 1, 1).
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let b = rows.len();
        let f = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(b * f);
        for r in rows {
            assert_eq!(r.len(), f, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::from_vec([b, f, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Features per sample (channels * height * width).
    pub fn features(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape_string(&self) -> String {
        format!(
            "({}, {}, {}, {})",
            self.shape[0], self.shape[1], self.shape[2], self.shape[3]
        )
    }

    /// 2-d view of the full buffer.
    pub fn view2(&self, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        debug_assert_eq!(rows * cols, self.data.len());
        ArrayView2::from_shape((rows, cols), &self.data).expect("contiguous view")
    }

    /// Per-sample slice of a (B, features) layout.
    pub fn row(&self, b: usize) -> &[F] {
        let f = self.features();
        &self.data[b * f..(b + 1) * f]
    }

    pub fn grad_mut(&mut self) -> &mut [F] {
        self.grad.as_mut().expect("parameter gradient buffer")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }
}

/// C = A x B via the ndarray GEMM (single-threaded, deterministic).
pub(crate) fn matmul<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut c);
    c
}

/// A straight chain of layers.
#[derive(Debug, Clone)]
pub struct Sequential<F: Scalar> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Sequential<F> {
    pub fn forward(&mut self, input: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, &mut Vec<F>)) {
        for layer in &mut self.layers {
            layer.visit_state(f);
        }
    }
}

#[derive(Debug, Clone)]
struct ConcatCache {
    branch_shapes: Vec<[usize; 4]>,
}

/// A network of parallel input branches whose flattened features are
/// concatenated and fed to a trunk. Single-branch networks are plain chains.
#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    pub branches: Vec<Sequential<F>>,
    pub trunk: Sequential<F>,
    concat_cache: Option<ConcatCache>,
}

impl<F: Scalar> Network<F> {
    pub fn new(branches: Vec<Sequential<F>>, trunk: Sequential<F>) -> Self {
        Network {
            branches,
            trunk,
            concat_cache: None,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.branches.len()
    }

    /// Runs the branches, concatenates their flattened outputs along the
    /// feature axis, and runs the trunk.
    pub fn forward(&mut self, inputs: &[Tensor<F>], mode: Mode) -> Result<Tensor<F>> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Shape {
                layer: "concat".into(),
                expected: format!("{} inputs", self.branches.len()),
                got: format!("{} inputs", inputs.len()),
            });
        }
        let mut outs = Vec::with_capacity(inputs.len());
        for (branch, input) in self.branches.iter_mut().zip(inputs) {
            outs.push(branch.forward(input, mode)?);
        }
        let batch = outs[0].batch();
        for o in &outs {
            if o.batch() != batch {
                return Err(Error::Shape {
                    layer: "concat".into(),
                    expected: format!("batch {batch}"),
                    got: format!("batch {}", o.batch()),
                });
            }
        }
        let widths: Vec<usize> = outs.iter().map(|o| o.features()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for o in &outs {
                data.extend_from_slice(o.row(b));
            }
        }
        self.concat_cache = Some(ConcatCache {
            branch_shapes: outs.iter().map(|o| o.shape()).collect(),
        });
        let merged = Tensor::from_vec([batch, total, 1, 1], data);
        self.trunk.forward(&merged, mode)
    }

    /// Backpropagates through trunk, concat split, and branches. Returns the
    /// gradient w.r.t. each input, in input order.
    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let merged_grad = self.trunk.backward(upstream)?;
        let cache = self
            .concat_cache
            .take()
            .ok_or_else(|| Error::invalid("backward without forward (concat cache empty)"))?;
        let batch = merged_grad.batch();
        let widths: Vec<usize> = cache
            .branch_shapes
            .iter()
            .map(|s| s[1] * s[2] * s[3])
            .collect();
        let mut input_grads = Vec::with_capacity(self.branches.len());
        let mut offset = 0usize;
        for (bi, branch) in self.branches.iter_mut().enumerate() {
            let w = widths[bi];
            let mut part = Vec::with_capacity(batch * w);
            let total: usize = widths.iter().sum();
            for b in 0..batch {
                let row = &merged_grad.data[b * total..(b + 1) * total];
                part.extend_from_slice(&row[offset..offset + w]);
            }
            offset += w;
            let g = Tensor::from_vec(cache.branch_shapes[bi], part);
            input_grads.push(branch.backward(&g)?);
        }
        Ok(input_grads)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for b in &mut self.branches {
            b.visit_params(f);
        }
        self.trunk.visit_params(f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, &mut Vec<F>)) {
        for b in &mut self.branches {
            b.visit_state(f);
        }
        self.trunk.visit_state(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }

    /// Snapshot of every persisted buffer (weights and running statistics).
    pub fn state_blobs(&mut self) -> Vec<Vec<F>> {
        let mut out = Vec::new();
        self.visit_state(&mut |_, v| out.push(v.clone()));
        out
    }

    /// Restores buffers captured by [`Network::state_blobs`].
    pub fn load_state_blobs(&mut self, blobs: &[Vec<F>]) -> Result<()> {
        let mut i = 0usize;
        let mut err = None;
        self.visit_state(&mut |name, v| {
            if err.is_some() {
                return;
            }
            match blobs.get(i) {
                Some(src) if src.len() == v.len() => v.copy_from_slice(src),
                Some(src) => {
                    err = Some(Error::invalid(format!(
                        "state blob {i} ({name}): expected {} values, got {}",
                        v.len(),
                        src.len()
                    )))
                }
                None => err = Some(Error::invalid(format!("missing state blob {i} ({name})"))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != blobs.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} blobs, network expects {i}",
                blobs.len()
            )));
        }
        Ok(())
    }
}
