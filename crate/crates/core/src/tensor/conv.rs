use super::gemm::{gemm, Mat};
use super::{Result, Scalar, Tensor, TensorError};

/// Output extent along one axis for a zero-padded "same" convolution.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (extent + 2 * pad - kernel) / stride + 1
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let [c_out, kc, kh, kw] = *kernel.shape() else {
            return Err(TensorError::Shape(format!(
                "kernel must be C_out×C_in×kh×kw, got {:?}",
                kernel.shape()
            )));
        };
        if kc != c_in {
            return Err(TensorError::Shape(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!(
                "kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("stride must be positive".into()));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: conv2d_output_extent(h, kh, stride),
            ow: conv2d_output_extent(w, kw, stride),
            stride,
        })
    }

    /// Output positions `o` along one axis whose source `o*stride + delta`
    /// falls inside `[0, extent)`.
    fn valid(&self, delta: isize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let lo = if delta >= 0 {
            0
        } else {
            ((-delta) + s - 1) / s
        };
        let last = extent as isize - 1 - delta;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(out_extent as isize)
        };
        let lo = lo.min(hi);
        lo as usize..hi as usize
    }

    /// Calls `f(out_offset, in_offset)` for every output/input pair that a
    /// single kernel tap `(ky, kx)` connects, for one pair of planes.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let dy = ky as isize - ((self.kh - 1) / 2) as isize;
        let dx = kx as isize - ((self.kw - 1) / 2) as isize;
        let ys = self.valid(dy, self.h, self.oh);
        let xs = self.valid(dx, self.w, self.ow);
        if xs.is_empty() {
            return;
        }
        for oy in ys {
            let iy = (oy * self.stride) as isize + dy;
            let ix0 = (xs.start * self.stride) as isize + dx;
            f(
                oy * self.ow + xs.start,
                iy as usize * self.w + ix0 as usize,
                xs.len(),
                self.stride,
            );
        }
    }
}

/// Unfolds every receptive field into a `(C_in·kh·kw) × (oh·ow)` matrix,
/// zero where the field reaches into padding.
fn im2col<T: Scalar>(g: &Geometry, x: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * p];
    for ci in 0..g.c_in {
        let in_plane = &x[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                g.for_each_tap(ky, kx, |o, i, n, s| {
                    for j in 0..n {
                        dst[o + j] = in_plane[i + j * s];
                    }
                });
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], out: &mut [T]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for ci in 0..g.c_in {
        let in_plane = &mut out[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                g.for_each_tap(ky, kx, |o, i, n, s| {
                    for j in 0..n {
                        in_plane[i + j * s] += src[o + j];
                    }
                });
            }
        }
    }
}

/// Zero-padded "same" 2D convolution (cross-correlation) of a `C_in×H×W`
/// map with a `C_out×C_in×kh×kw` kernel bank plus per-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, kernel, stride)?;
    if bias.shape() != [g.c_out] {
        return Err(TensorError::Shape(format!(
            "bias must have {} entries, got {:?}",
            g.c_out,
            bias.shape()
        )));
    }
    let p = g.oh * g.ow;
    let kdim = g.c_in * g.kh * g.kw;
    let cols = im2col(&g, input.data());
    let mut out = vec![T::zero(); g.c_out * p];
    for (plane, &b) in out.chunks_mut(p).zip(bias.data()) {
        plane.fill(b);
    }
    gemm(
        Mat::rows(kernel.data(), g.c_out, kdim),
        Mat::rows(&cols, kdim, p),
        &mut out,
        T::one(),
    );
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias given the
/// upstream gradient of its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let (gi, gk, gb) = conv2d_backward_parts(input, kernel, grad_out, stride, true, true)?;
    Ok(ConvGrads {
        input: gi.expect("requested"),
        kernel: gk.expect("requested"),
        bias: gb,
    })
}

/// Like [`conv2d_backward`], skipping the input or kernel gradient when it
/// is not wanted.
pub fn conv2d_backward_parts<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>)> {
    let g = Geometry::new(input, kernel, stride)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(TensorError::Shape(format!(
            "output gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            [g.c_out, g.oh, g.ow]
        )));
    }
    let p = g.oh * g.ow;
    let kdim = g.c_in * g.kh * g.kw;
    let go = grad_out.data();
    let gb: Vec<T> = go
        .chunks(p)
        .map(|plane| plane.iter().copied().sum())
        .collect();
    let gk = if want_kernel {
        let cols = im2col(&g, input.data());
        let mut gk = vec![T::zero(); g.c_out * kdim];
        gemm(
            Mat::rows(go, g.c_out, p),
            Mat::cols(&cols, p, kdim),
            &mut gk,
            T::zero(),
        );
        Some(Tensor::new(kernel.shape(), gk)?)
    } else {
        None
    };
    let gi = if want_input {
        let mut gcols = vec![T::zero(); kdim * p];
        gemm(
            Mat::cols(kernel.data(), kdim, g.c_out),
            Mat::rows(go, g.c_out, p),
            &mut gcols,
            T::zero(),
        );
        let mut gi = vec![T::zero(); input.len()];
        col2im(&g, &gcols, &mut gi);
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };
    Ok((gi, gk, Tensor::vector(gb)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct summation over zero-padded receptive fields.
    fn brute_force(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
    ) -> Tensor<f64> {
        let (ci, h, w) = input.dims3().unwrap();
        let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (w + 2 * pw - kw) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = bias.data()[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (y * stride + a) as isize - ph as isize;
                                let ix = (x * stride + b) as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += kernel.get(&[o, c, a, b]).unwrap()
                                        * input.get(&[c, iy as usize, ix as usize]).unwrap();
                                }
                            }
                        }
                    }
                    out.set(&[o, y, x], s).unwrap();
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    #[test]
    fn identity_kernel_bank() {
        let x = Tensor::from_fn(&[3, 4, 5], lcg(1));
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.set(&[c, c, 0, 0], 1.0).unwrap();
        }
        assert_eq!(conv2d(&x, &k, &Tensor::zeros(&[3]), 1).unwrap(), x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_extent() {
        let x = Tensor::<f64>::ones(&[1, 15, 15]);
        let k = Tensor::ones(&[1, 1, 5, 5]);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8]);
        assert_eq!(out, brute_force(&x, &k, &Tensor::zeros(&[1]), 2));
    }

    #[test]
    fn errors() {
        let x = Tensor::<f32>::ones(&[2, 3, 3]);
        let bad_channels = Tensor::ones(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &bad_channels, &Tensor::zeros(&[1]), 1),
            Err(TensorError::Shape(_))
        ));
        let even = Tensor::ones(&[1, 2, 2, 3]);
        assert!(matches!(
            conv2d(&x, &even, &Tensor::zeros(&[1]), 1),
            Err(TensorError::Config(_))
        ));
        let k = Tensor::ones(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]), 0),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Tensor::from_fn(&[2, 4, 5], lcg(3));
        let k = Tensor::from_fn(&[3, 2, 3, 3], lcg(4));
        let b = Tensor::from_fn(&[3], lcg(5));
        for stride in [1, 2] {
            let out = conv2d(&x, &k, &b, stride).unwrap();
            let upstream = Tensor::from_fn(out.shape(), lcg(6));
            let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
                let o = conv2d(x, k, b, stride).unwrap();
                o.data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(a, u)| a * u)
                    .sum::<f64>()
            };
            let grads = conv2d_backward(&x, &k, &upstream, stride).unwrap();
            let eps = 1e-6;
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += eps;
                xm.data_mut()[i] -= eps;
                let num = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * eps);
                assert!((num - grads.input.data()[i]).abs() < 1e-7, "input {i}");
            }
            for i in 0..k.len() {
                let (mut kp, mut km) = (k.clone(), k.clone());
                kp.data_mut()[i] += eps;
                km.data_mut()[i] -= eps;
                let num = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * eps);
                assert!((num - grads.kernel.data()[i]).abs() < 1e-7, "kernel {i}");
            }
            for i in 0..3 {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.data_mut()[i] += eps;
                bm.data_mut()[i] -= eps;
                let num = (loss(&x, &k, &bp) - loss(&x, &k, &bm)) / (2.0 * eps);
                assert!((num - grads.bias.data()[i]).abs() < 1e-7, "bias {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn matches_direct_summation(
            ci in 1usize..4, co in 1usize..4, h in 1usize..8, w in 1usize..8,
            kh in prop::sample::select(vec![1usize, 3, 5]), kw in prop::sample::select(vec![1usize, 3, 5]),
            stride in 1usize..3, seed in any::<u64>(),
        ) {
            let x = Tensor::from_fn(&[ci, h, w], lcg(seed));
            let k = Tensor::from_fn(&[co, ci, kh, kw], lcg(seed ^ 0x9e37));
            let b = Tensor::from_fn(&[co], lcg(seed ^ 0x51));
            let fast = conv2d(&x, &k, &b, stride).unwrap();
            let slow = brute_force(&x, &k, &b, stride);
            prop_assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
            }
            if stride == 1 {
                prop_assert_eq!(&fast.shape()[1..], &[h, w]);
            }
        }

        #[test]
        fn linear_in_the_input(h in 1usize..6, w in 1usize..6, a in -3.0f64..3.0, c in -3.0f64..3.0, seed in any::<u64>()) {
            let x = Tensor::from_fn(&[2, h, w], lcg(seed));
            let y = Tensor::from_fn(&[2, h, w], lcg(seed.wrapping_add(1)));
            let k = Tensor::from_fn(&[3, 2, 3, 3], lcg(seed.wrapping_add(2)));
            let zero = Tensor::zeros(&[3]);
            let mix = x.zip_map(&y, |p, q| a * p + c * q).unwrap();
            let lhs = conv2d(&mix, &k, &zero, 1).unwrap();
            let rx = conv2d(&x, &k, &zero, 1).unwrap();
            let ry = conv2d(&y, &k, &zero, 1).unwrap();
            let rhs = rx.zip_map(&ry, |p, q| a * p + c * q).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-5 * (1.0 + r.abs()));
            }
        }
    }
}
