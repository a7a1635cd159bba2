//! Dense row-major tensors and the numerical kernels the decoders are built from.
//!
//! Every kernel is a pure function of its arguments. Spatial tensors are laid
//! out as `C×H×W` with the last axis fastest.

mod conv;
mod gemm;
mod resize;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{conv2d, conv2d_backward, conv2d_backward_parts, conv2d_output_extent, ConvGrads};
pub use resize::{bicubic_resize, bicubic_resize_channels, keys_kernel, BicubicPlan, KEYS_A};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("region error: {0}")]
    Region(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c ← a·b + beta·c` for an `m×k` by `k×n` product with strided
    /// operands and a row-major `c` of row stride `rsc`.
    ///
    /// # Safety
    /// Every strided access must stay inside the pointed-to buffers.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_unchecked(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::Shape(
            "tensor must have at least one axis".into(),
        ));
    }
    if shape.contains(&0) {
        return Err(TensorError::Shape(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::Shape(format!("element count of {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for shapes known statically to be valid.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(TensorError::Shape(format!(
                "expected one element, shape is {:?}",
                self.shape
            ))),
        }
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(TensorError::Index(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return Err(TensorError::Index(format!(
                    "index {index:?} out of bounds for {:?}",
                    self.shape
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn index_of(&self, offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(TensorError::Index(format!(
                "offset {offset} out of bounds for {:?}",
                self.shape
            )));
        }
        let mut rem = offset;
        let mut index = vec![0; self.shape.len()];
        for (slot, &e) in index.iter_mut().zip(&self.shape).rev() {
            *slot = rem % e;
            rem /= e;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Extents of a rank-3 `C×H×W` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::Shape(format!(
                "expected C×H×W, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(TensorError::Shape(format!(
                "expected H×W, got {:?}",
                self.shape
            ))),
        }
    }

    /// One `H×W` slice of a `C×H×W` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor<T>> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(TensorError::Index(format!(
                "channel {c} out of range for {ch} channels"
            )));
        }
        Ok(Tensor {
            shape: vec![h, w],
            data: self.data[c * h * w..(c + 1) * h * w].to_vec(),
        })
    }

    /// Slice `i` along the leading axis.
    pub fn row(&self, i: usize) -> Result<Tensor<T>> {
        let n = self.shape[0];
        if i >= n {
            return Err(TensorError::Index(format!(
                "row {i} out of range for {n} rows"
            )));
        }
        let inner: Vec<usize> = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        let size = self.data.len() / n;
        Ok(Tensor {
            shape: inner,
            data: self.data[i * size..(i + 1) * size].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        same_shape(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Shape(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Rectangular window over the spatial axes, one-based and inclusive;
/// `x` indexes columns and `y` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Region {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x1: 1,
            y1: 1,
            x2: width,
            y2: height,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let Region { x1, y1, x2, y2 } = *self;
        if x1 < 1 || y1 < 1 || x1 > x2 || y1 > y2 || x2 > width || y2 > height {
            return Err(TensorError::Region(format!(
                "region ({x1},{y1},{x2},{y2}) is not inside a {height}×{width} map"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        (self.y2 - self.y1 + 1) * (self.x2 - self.x1 + 1)
    }

    pub fn is_full(&self, height: usize, width: usize) -> bool {
        *self == Region::full(height, width)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x1, self.y1, self.x2, self.y2)
    }
}

impl FromStr for Region {
    type Err = TensorError;

    /// Parses `x1,y1,x2,y2`. Bounds are checked later against a concrete map.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [x1, y1, x2, y2] = parts.as_slice() else {
            return Err(TensorError::Region(format!(
                "expected x1,y1,x2,y2, got {s:?}"
            )));
        };
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| TensorError::Region(format!("invalid coordinate {p:?} in {s:?}")))
        };
        let region = Region::new(num(x1)?, num(y1)?, num(x2)?, num(y2)?);
        if region.x1 < 1 || region.y1 < 1 || region.x1 > region.x2 || region.y1 > region.y2 {
            return Err(TensorError::Region(format!(
                "region {s:?} is empty or not one-based"
            )));
        }
        Ok(region)
    }
}

/// Per-channel mean over a one-based inclusive window of a `C×H×W` map.
pub fn subregion_mean_pool<T: Scalar>(input: &Tensor<T>, region: Region) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    region.validate(h, w)?;
    let norm = T::from_f64(region.area() as f64);
    let data = input.data();
    let out = (0..c)
        .map(|ch| {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let mut acc = T::zero();
            for y in region.y1 - 1..region.y2 {
                for &v in &plane[y * w + region.x1 - 1..y * w + region.x2] {
                    acc += v;
                }
            }
            acc / norm
        })
        .collect();
    Tensor::vector(out)
}

/// Per-channel spatial mean. Shares its summation order with
/// [`subregion_mean_pool`], so the two agree bit-for-bit on the full region.
pub fn mean_pool_spatial<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = input.dims3()?;
    subregion_mean_pool(input, Region::full(h, w))
}

/// Per-channel spatial maximum together with the flat in-plane position of
/// the first maximum.
pub fn max_pool_spatial_with_index<T: Scalar>(
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    let mut values = Vec::with_capacity(c);
    let mut positions = Vec::with_capacity(c);
    for plane in input.data().chunks(h * w) {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        values.push(plane[best]);
        positions.push(best);
    }
    Ok((Tensor::vector(values)?, positions))
}

pub fn max_pool_spatial<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(max_pool_spatial_with_index(input)?.0)
}

/// Affine map `weight · input + bias`.
pub fn linear<T: Scalar>(
    weight: &Tensor<T>,
    input: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = weight.dims2()?;
    if input.shape() != [n] || bias.shape() != [m] {
        return Err(TensorError::Shape(format!(
            "linear: weight {:?}, input {:?}, bias {:?}",
            weight.shape(),
            input.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&wv, &xv)| acc + wv * xv))
        .collect();
    Tensor::vector(out)
}

fn check_finite<T: Scalar>(input: &Tensor<T>) -> Result<()> {
    if !input.all_finite() {
        return Err(TensorError::Numeric("non-finite input".into()));
    }
    Ok(())
}

/// Numerically stable softmax over a vector.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(input)?;
    let max = input
        .data()
        .iter()
        .fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = input.data().iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::new(input.shape(), exps.into_iter().map(|e| e / total).collect())
}

/// Numerically stable log-softmax over a vector.
pub fn log_softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(input)?;
    let max = input
        .data()
        .iter()
        .fold(T::neg_infinity(), |m, &v| m.max(v));
    let total: T = input.data().iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + total.ln();
    Ok(input.map(|v| v - log_z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    OneMinus,
}

impl Unary {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(T::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::OneMinus => T::one() - v,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Tanh => T::one() - y * y,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::OneMinus => -T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Hadamard,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn unary<T: Scalar>(op: Unary, input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| op.apply(v))
}

pub fn binary<T: Scalar>(op: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match op {
        Binary::Add => a.zip_map(b, |x, y| x + y),
        Binary::Hadamard => a.zip_map(b, |x, y| x * y),
    }
}
