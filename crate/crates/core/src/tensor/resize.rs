use super::{Result, Scalar, Tensor, TensorError};

/// Keys cubic convolution coefficient.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

type Taps = [(usize, f64); 4];

/// Four clamped taps per destination coordinate along one axis, using an
/// align-corners mapping of destination onto source coordinates.
fn axis_taps(src: usize, dst: usize) -> Vec<Taps> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let base = pos.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (slot, k) in taps.iter_mut().zip(-1isize..=2) {
                let j = base + k;
                let clamped = j.clamp(0, src as isize - 1) as usize;
                *slot = (clamped, keys_kernel(pos - j as f64));
            }
            taps
        })
        .collect()
}

/// Precomputed separable bicubic resampling from `src` to `dst` extents.
///
/// Resampling is linear in the input, so the same plan also applies the
/// adjoint map used for backpropagation.
#[derive(Debug, Clone)]
pub struct BicubicPlan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<Taps>,
    cols: Vec<Taps>,
}

impl BicubicPlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(TensorError::Shape(format!(
                "bicubic extents must be positive: {src:?} -> {dst:?}"
            )));
        }
        Ok(Self {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        })
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    /// Resamples one `H×W` plane.
    pub fn apply_plane<T: Scalar>(&self, plane: &[T], out: &mut [T]) {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut tmp = vec![T::zero(); sh * dw];
        for y in 0..sh {
            let row = &plane[y * sw..(y + 1) * sw];
            for (x, taps) in self.cols.iter().enumerate() {
                tmp[y * dw + x] = taps
                    .iter()
                    .fold(T::zero(), |acc, &(j, wt)| acc + row[j] * T::from_f64(wt));
            }
        }
        for (y, taps) in self.rows.iter().enumerate() {
            for x in 0..dw {
                out[y * dw + x] = taps.iter().fold(T::zero(), |acc, &(j, wt)| {
                    acc + tmp[j * dw + x] * T::from_f64(wt)
                });
            }
        }
        debug_assert_eq!(out.len(), dh * dw);
    }

    /// Adjoint of [`BicubicPlan::apply_plane`]: scatters a destination-sized
    /// gradient back onto the source grid.
    pub fn adjoint_plane<T: Scalar>(&self, grad: &[T], out: &mut [T]) {
        let (sh, sw) = self.src;
        let dw = self.dst.1;
        let mut tmp = vec![T::zero(); sh * dw];
        for (y, taps) in self.rows.iter().enumerate() {
            for &(j, wt) in taps {
                let wt = T::from_f64(wt);
                for x in 0..dw {
                    tmp[j * dw + x] += grad[y * dw + x] * wt;
                }
            }
        }
        out.fill(T::zero());
        for y in 0..sh {
            for (x, taps) in self.cols.iter().enumerate() {
                let g = tmp[y * dw + x];
                for &(j, wt) in taps {
                    out[y * sw + j] += g * T::from_f64(wt);
                }
            }
        }
    }

    /// Resamples every channel of a `C×H×W` tensor.
    pub fn apply<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = input.dims3()?;
        if (h, w) != self.src {
            return Err(TensorError::Shape(format!(
                "plan expects {:?} planes, got {:?}",
                self.src,
                (h, w)
            )));
        }
        let (dh, dw) = self.dst;
        let mut out = vec![T::zero(); c * dh * dw];
        for (src, dst) in input.data().chunks(h * w).zip(out.chunks_mut(dh * dw)) {
            self.apply_plane(src, dst);
        }
        Tensor::new(&[c, dh, dw], out)
    }

    pub fn adjoint<T: Scalar>(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = grad.dims3()?;
        if (h, w) != self.dst {
            return Err(TensorError::Shape(format!(
                "plan produces {:?} planes, got {:?}",
                self.dst,
                (h, w)
            )));
        }
        let (sh, sw) = self.src;
        let mut out = vec![T::zero(); c * sh * sw];
        for (g, dst) in grad.data().chunks(h * w).zip(out.chunks_mut(sh * sw)) {
            self.adjoint_plane(g, dst);
        }
        Tensor::new(&[c, sh, sw], out)
    }
}

/// Bicubic resize of an `H×W` map (Keys kernel, a = −0.5, clamped edges,
/// align-corners coordinates).
pub fn bicubic_resize<T: Scalar>(input: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = input.dims2()?;
    let plan = BicubicPlan::new((h, w), target)?;
    let mut out = vec![T::zero(); target.0 * target.1];
    plan.apply_plane(input.data(), &mut out);
    Tensor::new(&[target.0, target.1], out)
}

/// Per-channel bicubic resize of a `C×H×W` map.
pub fn bicubic_resize_channels<T: Scalar>(
    input: &Tensor<T>,
    target: (usize, usize),
) -> Result<Tensor<T>> {
    let (_, h, w) = input.dims3()?;
    BicubicPlan::new((h, w), target)?.apply(input)
}
