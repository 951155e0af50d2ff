//! Dense NCHW tensors and the convolution kernels (im2col / col2im + gemm)
//! the autodiff tape is built on.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type a [`Tensor`] can hold. Training runs in `f32`; gradient checks
/// and metrics run in `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix view used by [`matmul`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Read the stored row-major `cols x rows` buffer as its transpose.
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical `rows x cols` matrix backed by a row-major `cols x rows` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major.
pub fn matmul<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "output buffer size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: buffer sizes are asserted above and the three slices are
    // distinct borrows, so they cannot overlap.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// True when the column matrix is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + offset` lies in
/// `0..width`, as a half-open range.
fn valid_span(out_len: usize, stride: usize, offset: isize, width: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (width as isize) <= offset {
        0
    } else {
        ((width as isize - 1 - offset) / s + 1).min(out_len as isize)
    };
    let lo = (lo as usize).min(out_len);
    (lo, (hi.max(0) as usize).max(lo))
}

/// Unfold `src` (`C x H x W`) into `dst` (`C*k*k x OH*OW`).
pub fn im2col<T: Element>(src: &[T], geo: &ConvGeometry, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), geo.col_rows() * geo.col_cols());
    im2col_strided(src, geo, dst, geo.col_cols());
}

/// [`im2col`] into a buffer whose rows are `ld` apart, filling the first
/// `OH*OW` entries of each row.
pub fn im2col_strided<T: Element>(src: &[T], geo: &ConvGeometry, dst: &mut [T], ld: usize) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w, k, stride) = (geo.height, geo.width, geo.kernel, geo.stride);
    debug_assert_eq!(src.len(), geo.channels * h * w);
    debug_assert!(ld >= oh * ow);
    let pad = geo.pad as isize;
    for c in 0..geo.channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out_row = &mut dst[row * ld..row * ld + oh * ow];
                let offset = kx as isize - pad;
                let (lo, hi) = valid_span(ow, stride, offset, w);
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let line = &mut out_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = (lo * stride) as isize + offset;
                        let first = first as usize;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src_line[first..first + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src_line[first + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dst` (`C x H x W`).
pub fn col2im<T: Element>(cols: &[T], geo: &ConvGeometry, dst: &mut [T]) {
    debug_assert_eq!(cols.len(), geo.col_rows() * geo.col_cols());
    col2im_strided(cols, geo, dst, geo.col_cols());
}

/// [`col2im`] from a buffer whose rows are `ld` apart.
pub fn col2im_strided<T: Element>(cols: &[T], geo: &ConvGeometry, dst: &mut [T], ld: usize) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w, k, stride) = (geo.height, geo.width, geo.kernel, geo.stride);
    debug_assert_eq!(dst.len(), geo.channels * h * w);
    let pad = geo.pad as isize;
    for c in 0..geo.channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let col_row = &cols[row * ld..row * ld + oh * ow];
                let offset = kx as isize - pad;
                let (lo, hi) = valid_span(ow, stride, offset, w);
                if lo >= hi {
                    continue;
                }
                let first = ((lo * stride) as isize + offset) as usize;
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, &v) in dst_line[first..first + hi - lo].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            let d = &mut dst_line[first + j * stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Dense tensor, always rank 4 in `N x C x H x W` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Only valid for single-element tensors.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Slice of batch item `n`.
    pub fn item_slice(&self, n: usize) -> &[T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_slice_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * per..(n + 1) * per]
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], cin: usize, cout: usize, geo: &ConvGeometry) -> Vec<f64> {
        let (oh, ow, k) = (geo.out_height(), geo.out_width(), geo.kernel);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                if iy < 0 || ix < 0 || iy >= geo.height as isize || ix >= geo.width as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * k + ky) * k + kx]
                                    * x[(ci * geo.height + iy as usize) * geo.width + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2), (7, 1, 3)] {
            let geo = ConvGeometry {
                channels: 2,
                height: 9,
                width: 7,
                kernel: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 9 * 7).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13) % 7) as f64 / 5.0 - 0.5).collect();
            let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
            im2col(&x, &geo, &mut cols);
            let mut out = vec![0.0; 3 * geo.col_cols()];
            matmul(
                MatRef::new(&w, 3, geo.col_rows()),
                MatRef::new(&cols, geo.col_rows(), geo.col_cols()),
                &mut out,
                false,
            );
            let expected = naive_conv(&x, &w, 2, 3, &geo);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let geo = ConvGeometry {
            channels: 3,
            height: 6,
            width: 5,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..90).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..geo.col_rows() * geo.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &geo, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &geo, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_matmul_views() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut out = [0.0f32; 4];
        // a * a^T
        matmul(MatRef::new(&a, 2, 3), MatRef::transposed(&a, 3, 2), &mut out, false);
        assert_eq!(out, [14.0, 32.0, 32.0, 77.0]);
        matmul(MatRef::new(&a, 2, 3), MatRef::transposed(&a, 3, 2), &mut out, true);
        assert_eq!(out, [28.0, 64.0, 64.0, 154.0]);
    }
}
