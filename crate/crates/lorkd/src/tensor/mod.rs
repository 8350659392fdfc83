//! Dense row-major tensors and the hand-written kernels the engine needs.
//!
//! Everything is CPU-side and value-like: a [`Tensor`] owns its buffer, and
//! every operation allocates its result. Kernels use fixed loop orders so a
//! run is bit-reproducible at a fixed thread count.

mod conv;

pub use conv::{conv2d, conv2d_backward, ConvGeometry};

use crate::error::{Error, Result};
use std::fmt;
use std::sync::OnceLock;

/// Element types the engine supports. f32 is the training dtype; f64 exists
/// for gradient-check oracles.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// Lossy conversion from f64; the only way constants enter kernels.
    fn fr(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Dense N-dimensional array, row-major, channels-first for image data.
///
/// Invariants: `data.len() == product(shape)` and every shape entry is
/// strictly positive (rank-0 scalars are allowed; their product is 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("axis {pos} has size 0; shape entries must be strictly positive"),
            ));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, buffer holds {}", shape, want, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids zero-size axes
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let mut off = 0;
        for (c, d) in coords.iter().zip(&self.shape) {
            debug_assert!(c < d);
            off = off * d + c;
        }
        off
    }

    pub fn at(&self, coords: &[usize]) -> T {
        self.data[self.offset(coords)]
    }

    pub fn set(&mut self, coords: &[usize], value: T) {
        let off = self.offset(coords);
        self.data[off] = value;
    }

    /// Same buffer under a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} elements as {:?}", self.data.len(), shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected exactly one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other * s`, in place.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled",
                format!("operand shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * s;
        }
        Ok(())
    }

    /// Element-wise conversion between scalar types (f32 <-> f64 oracles).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::fr(v.to_f64_lossy())).collect(),
        }
    }

    /// Largest absolute elementwise difference, as f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("operand shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors, [m,n]x[n,p] -> [m,p].
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self, other);
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
            ));
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        let (n2, p) = (b.shape[0], b.shape[1]);
        if n != n2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: lhs has {n} columns, rhs has {n2} rows"),
            ));
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            for kk in 0..n {
                let aik = a.data[i * n + kk];
                if aik == T::zero() {
                    continue;
                }
                let brow = &b.data[kk * p..(kk + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        Tensor::new(&[m, p], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "transpose2d",
                format!("expected rank-2 operand, got {:?}", self.shape),
            ));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// Reduction over the given axes; reduced axes are removed from the shape.
    /// Reducing every axis yields a rank-0 scalar.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let ndim = self.shape.len();
        let mut reduce_mask = vec![false; ndim];
        for &ax in axes {
            if ax >= ndim {
                return Err(Error::invalid(
                    "reduce",
                    format!("axis {ax} out of range for rank-{ndim} tensor"),
                ));
            }
            if reduce_mask[ax] {
                return Err(Error::invalid("reduce", format!("axis {ax} listed twice")));
            }
            reduce_mask[ax] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduce_mask)
            .filter(|(_, &m)| !m)
            .map(|(&d, _)| d)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_len];

        let mut coords = vec![0usize; ndim];
        for &v in &self.data {
            // flat output index from the kept coordinates
            let mut oidx = 0;
            for d in 0..ndim {
                if !reduce_mask[d] {
                    oidx = oidx * self.shape[d] + coords[d];
                }
            }
            out[oidx] = match op {
                ReduceOp::Sum | ReduceOp::Mean => out[oidx] + v,
                ReduceOp::Max => out[oidx].max(v),
            };
            // odometer increment, row-major
            for d in (0..ndim).rev() {
                coords[d] += 1;
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count: usize = self
                .shape
                .iter()
                .zip(&reduce_mask)
                .filter(|(_, &m)| m)
                .map(|(&d, _)| d)
                .product();
            let inv = T::one() / T::fr(count as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        Tensor::new(&out_shape, out)
    }

    /// Softmax over the last axis of `logits / tau`, computed with
    /// max-subtraction. `tau` must be strictly positive.
    pub fn softmax_with_temperature(&self, tau: f64) -> Result<Self> {
        if tau <= 0.0 || tau.is_nan() {
            return Err(Error::invalid(
                "softmax_with_temperature",
                format!("tau must be positive, got {tau}"),
            ));
        }
        if self.shape.is_empty() {
            return Err(Error::shape("softmax_with_temperature", "rank-0 tensor has no axis".to_string()));
        }
        let row = *self.shape.last().expect("rank checked above");
        let t = T::fr(tau);
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(row) {
            let m = chunk.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in chunk.iter_mut() {
                *v = ((*v - m) / t).exp();
                sum = sum + *v;
            }
            for v in chunk.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::new(&self.shape, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Central-difference gradient estimate of a scalar function at `x`.
/// The oracle against which every hand-written backward is checked.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: f64,
) -> Result<Tensor<T>> {
    if step <= 0.0 || step.is_nan() {
        return Err(Error::invalid("finite_diff_grad", format!("step must be positive, got {step}")));
    }
    let h = T::fr(step);
    let mut probe = x.clone();
    let mut grad = vec![T::zero(); x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe)?;
        probe.data[i] = orig - h;
        let fm = f(&probe)?;
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f produced a non-finite value while probing element {i}"
            )));
        }
        *g = T::fr((fp.to_f64_lossy() - fm.to_f64_lossy()) / (2.0 * step));
    }
    Tensor::new(x.shape(), grad)
}

/// Internal kernel parallelism cap, read once from LORKD_THREADS (default 1).
pub fn thread_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("LORKD_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Instrumentation for the bench command and the single-pass invariant.
///
/// Counters are thread-local and are incremented by the thread that *calls* a
/// kernel (worker threads never touch them), so parallel test runners see
/// consistent per-thread deltas. FLOP counts are analytic multiply-add tallies
/// (2 flops per multiply-add), not measured.
pub mod counters {
    use std::cell::Cell;

    thread_local! {
        static CONV_LAUNCHES: Cell<u64> = const { Cell::new(0) };
        static CONV_BACKWARD_LAUNCHES: Cell<u64> = const { Cell::new(0) };
        static CONV_FLOPS: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
    pub struct Counters {
        pub conv_launches: u64,
        pub conv_backward_launches: u64,
        pub conv_flops: u64,
    }

    pub fn reset() {
        CONV_LAUNCHES.with(|c| c.set(0));
        CONV_BACKWARD_LAUNCHES.with(|c| c.set(0));
        CONV_FLOPS.with(|c| c.set(0));
    }

    pub fn snapshot() -> Counters {
        Counters {
            conv_launches: CONV_LAUNCHES.with(Cell::get),
            conv_backward_launches: CONV_BACKWARD_LAUNCHES.with(Cell::get),
            conv_flops: CONV_FLOPS.with(Cell::get),
        }
    }

    pub(crate) fn record_conv(flops: u64) {
        CONV_LAUNCHES.with(|c| c.set(c.get() + 1));
        CONV_FLOPS.with(|c| c.set(c.get() + flops));
    }

    pub(crate) fn record_conv_backward(flops: u64) {
        CONV_BACKWARD_LAUNCHES.with(|c| c.set(c.get() + 1));
        CONV_FLOPS.with(|c| c.set(c.get() + flops));
    }
}
