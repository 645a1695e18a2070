//! 2-D convolution as chunked im2col + GEMM, with its own backward pass.
//!
//! Candle's CPU backward for `conv2d` goes through a direct transposed
//! convolution that is several times slower than the forward pass. Here both
//! gradients are GEMMs of the same size as the forward product, and the
//! im2col buffer is bounded by processing output rows in chunks, so very large
//! inputs (1600×1200 and up) never materialize a full column matrix.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use num_traits::{One, Zero};

/// Upper bound on the number of elements in one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (x, k) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}")
        };
        if kc != c_in {
            candle_core::bail!("conv2d channel mismatch: input has {c_in}, kernel expects {kc}")
        }
        if stride == 0 {
            candle_core::bail!("conv2d stride must be positive")
        }
        let out = |i: usize, k: usize| (i + 2 * pad).checked_sub(k).map(|v| v / stride + 1);
        let (Some(oh), Some(ow)) = (out(h, kh), out(w, kw)) else {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")
        };
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        if self.pointwise() {
            return self.oh;
        }
        (CHUNK_ELEMS / (self.ow * self.k()).max(1)).clamp(1, self.oh)
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.rows_per_chunk();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r0| (r0, (r0 + step).min(oh)))
    }
}

trait Elem: Copy + Zero + One + std::ops::AddAssign + Send + Sync + 'static {}
impl Elem for f32 {}
impl Elem for f64 {}

fn parallelism() -> gemm::Parallelism {
    match rayon::current_num_threads() {
        0 | 1 => gemm::Parallelism::None,
        n => gemm::Parallelism::Rayon(n),
    }
}

/// `dst[m×n] (+)= lhs[m×k] · rhs[k×n]`, each operand addressed by (row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    dst_cs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!((m - 1) * dst_rs + (n - 1) * dst_cs < dst.len());
    debug_assert!(k == 0 || (m - 1) * lhs_rs + (k - 1) * lhs_cs < lhs.len());
    debug_assert!(k == 0 || (k - 1) * rhs_rs + (n - 1) * rhs_cs < rhs.len());
    // SAFETY: the debug assertions above spell out the extent each operand
    // is addressed at; callers build slices that cover exactly that extent.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            parallelism(),
        )
    }
}

/// Fills `col` (K-major: `col[k * lc + l]`) for output rows `r0..r1` of one image.
fn im2col<T: Elem>(x: &[T], g: &Geometry, r0: usize, r1: usize, col: &mut [T]) {
    let lc = (r1 - r0) * g.ow;
    let mut k = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[k * lc..(k + 1) * lc];
                for oy in r0..r1 {
                    let row = &mut dst[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                k += 1;
            }
        }
    }
}

/// Scatter-adds a column chunk back onto the image gradient; adjoint of [`im2col`].
fn col2im<T: Elem>(col: &[T], g: &Geometry, r0: usize, r1: usize, gx: &mut [T]) {
    let lc = (r1 - r0) * g.ow;
    let mut k = 0;
    for ci in 0..g.c_in {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[k * lc..(k + 1) * lc];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &src[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

fn forward<T: Elem>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, l) = (g.k(), g.l());
    let mut out = vec![T::zero(); g.batch * g.c_out * l];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * g.rows_per_chunk() * g.ow]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let ob = &mut out[b * g.c_out * l..(b + 1) * g.c_out * l];
        if g.pointwise() {
            matmul(g.c_out, l, k, ob, l, 1, false, w, k, 1, xb, l, 1);
            continue;
        }
        for (r0, r1) in g.chunks() {
            let lc = (r1 - r0) * g.ow;
            im2col(xb, g, r0, r1, &mut col);
            let l0 = r0 * g.ow;
            matmul(g.c_out, lc, k, &mut ob[l0..], l, 1, false, w, k, 1, &col, lc, 1);
        }
    }
    out
}

fn grad_input<T: Elem>(grad: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, l) = (g.k(), g.l());
    let mut gx = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    let mut gcol = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * g.rows_per_chunk() * g.ow]
    };
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * l..(b + 1) * g.c_out * l];
        let gxb = &mut gx[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        if g.pointwise() {
            matmul(k, l, g.c_out, gxb, l, 1, false, w, 1, k, gb, l, 1);
            continue;
        }
        for (r0, r1) in g.chunks() {
            let lc = (r1 - r0) * g.ow;
            let l0 = r0 * g.ow;
            matmul(k, lc, g.c_out, &mut gcol, lc, 1, false, w, 1, k, &gb[l0..], l, 1);
            col2im(&gcol, g, r0, r1, gxb);
        }
    }
    gx
}

fn grad_weight<T: Elem>(x: &[T], grad: &[T], g: &Geometry) -> Vec<T> {
    let (k, l) = (g.k(), g.l());
    let mut gw = vec![T::zero(); g.c_out * k];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * g.rows_per_chunk() * g.ow]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let gb = &grad[b * g.c_out * l..(b + 1) * g.c_out * l];
        if g.pointwise() {
            matmul(g.c_out, k, l, &mut gw, k, 1, true, gb, l, 1, xb, 1, l);
            continue;
        }
        for (r0, r1) in g.chunks() {
            let lc = (r1 - r0) * g.ow;
            let l0 = r0 * g.ow;
            im2col(xb, g, r0, r1, &mut col);
            matmul(g.c_out, k, lc, &mut gw, k, 1, true, &gb[l0..], l, 1, &col, 1, lc);
        }
    }
    gw
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("conv2d operands must be contiguous"),
    }
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F64($body)
            }
            (a, b) => candle_core::bail!(
                "conv2d supports matching f32/f64 operands, got {:?} and {:?}",
                a.dtype(),
                b.dtype()
            ),
        }
    };
}

struct ConvForward {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, w| forward(x, w, &g));
        Ok((out, Shape::from((g.batch, g.c_out, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &ConvGradInput {
                    stride: self.stride,
                    pad: self.pad,
                    x_dims: x.dims().to_vec(),
                },
            )?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(
                &grad,
                &ConvGradWeight {
                    stride: self.stride,
                    pad: self.pad,
                    w_dims: w.dims().to_vec(),
                },
            )?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

struct ConvGradInput {
    stride: usize,
    pad: usize,
    x_dims: Vec<usize>,
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.x_dims, l2.dims(), self.stride, self.pad)?;
        if l1.dims() != [g.batch, g.c_out, g.oh, g.ow] {
            candle_core::bail!("conv2d grad shape {:?} does not match output", l1.dims())
        }
        let out = dispatch2!(s1, l1, s2, l2, |grad, w| grad_input(grad, w, &g));
        Ok((out, Shape::from(self.x_dims.clone())))
    }
}

struct ConvGradWeight {
    stride: usize,
    pad: usize,
    w_dims: Vec<usize>,
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), &self.w_dims, self.stride, self.pad)?;
        if l2.dims() != [g.batch, g.c_out, g.oh, g.ow] {
            candle_core::bail!("conv2d grad shape {:?} does not match output", l2.dims())
        }
        let out = dispatch2!(s1, l1, s2, l2, |x, grad| grad_weight(x, grad, &g));
        Ok((out, Shape::from(self.w_dims.clone())))
    }
}

/// Cross-correlation of `x: (N, C_in, H, W)` with `kernel: (C_out, C_in, kh, kw)`
/// using symmetric zero padding. Matches `torch.nn.functional.conv2d` with
/// `dilation = 1, groups = 1`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, ConvForward { stride, pad: padding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn forward_matches_candle_reference() {
        for &(cin, cout, h, w, k, s, p) in &[
            (3, 5, 9, 7, 3, 1, 1),
            (4, 2, 10, 10, 4, 2, 1),
            (6, 3, 5, 8, 1, 1, 0),
            (2, 4, 12, 11, 7, 1, 3),
            (3, 3, 9, 9, 1, 2, 0),
        ] {
            let x = rand(&[2, cin, h, w], 1);
            let kr = rand(&[cout, cin, k, k], 2);
            let ours = conv2d(&x, &kr, s, p).unwrap();
            let reference = x.conv2d(&kr, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn chunked_forward_matches_single_chunk() {
        // enough output rows to force several chunks
        let x = rand(&[1, 64, 260, 300], 3).to_dtype(DType::F32).unwrap();
        let k = rand(&[8, 64, 3, 3], 4).to_dtype(DType::F32).unwrap();
        let g = Geometry::new(x.dims(), k.dims(), 1, 1).unwrap();
        assert!(g.rows_per_chunk() < g.oh);
        let ours = conv2d(&x, &k, 1, 1).unwrap();
        let reference = x.conv2d(&k, 1, 1, 1, 1).unwrap();
        let d = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let x = Var::from_tensor(&rand(&[2, 3, 7, 6], 5)).unwrap();
            let w = Var::from_tensor(&rand(&[4, 3, k, k], 6)).unwrap();
            let probe = rand(&[2, 4, (7 + 2 * p - k) / s + 1, (6 + 2 * p - k) / s + 1], 7);
            let f = |xv: &Tensor, wv: &Tensor| -> f64 {
                (conv2d(xv, wv, s, p).unwrap() * &probe)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let loss = (conv2d(x.as_tensor(), w.as_tensor(), s, p).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap();
            let grads = loss.backward().unwrap();
            for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
                let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in (0..base.len()).step_by(7) {
                    let eps = 1e-6;
                    let mut plus = base.clone();
                    plus[i] += eps;
                    let mut minus = base.clone();
                    minus[i] -= eps;
                    let shape = var.dims();
                    let tp = Tensor::from_vec(plus, shape, &Device::Cpu).unwrap();
                    let tm = Tensor::from_vec(minus, shape, &Device::Cpu).unwrap();
                    let o = other.as_tensor();
                    let fd = if is_x {
                        (f(&tp, o) - f(&tm, o)) / (2.0 * eps)
                    } else {
                        (f(o, &tp) - f(o, &tm)) / (2.0 * eps)
                    };
                    assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = rand(&[1, 3, 5, 5], 1);
        let k = rand(&[2, 4, 3, 3], 2);
        assert!(conv2d(&x, &k, 1, 1).is_err());
    }
}
