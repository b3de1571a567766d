//! Dense CPU kernels for the counting network and their backward passes.
//!
//! Feature maps are planar `[channels, height, width]` buffers. Convolutions
//! lower to a single GEMM through im2col.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type the network can run in.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A planar feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Geometry of a square convolution with `same`-style padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, s: &ConvShape, oh: usize, ow: usize) -> Vec<T> {
    let (k, p, st) = (s.k, s.pad() as isize, s.stride);
    let mut cols = vec![T::zero(); s.cin * k * k * oh * ow];
    for c in 0..s.cin {
        let plane = x.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * st) as isize + ky as isize - p;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * st) as isize + kx as isize - p;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
    let (k, p, st) = (s.k, s.pad() as isize, s.stride);
    let mut dx = Tensor::zeros(s.cin, h, w);
    for c in 0..s.cin {
        let plane = dx.plane_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * st) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * st) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, s: &ConvShape, weight: &[T], bias: &[T]) -> Tensor<T> {
    assert_eq!(x.c, s.cin, "conv input channels");
    let (oh, ow) = s.out_dims(x.h, x.w);
    let n = oh * ow;
    let kk = s.cin * s.k * s.k;
    let mut out = Tensor::zeros(s.cout, oh, ow);
    let cols;
    let b: &[T] = if s.is_pointwise() {
        &x.data
    } else {
        cols = im2col(x, s, oh, ow);
        &cols
    };
    T::gemm(
        s.cout, kk, n, T::one(), weight, kk as isize, 1, b, n as isize, 1, T::zero(), &mut out.data,
        n as isize, 1,
    );
    for (co, &bv) in bias.iter().enumerate() {
        for v in out.plane_mut(co) {
            *v = *v + bv;
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &ConvShape,
    weight: &[T],
    dout: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (oh, ow) = (dout.h, dout.w);
    let n = oh * ow;
    let kk = s.cin * s.k * s.k;
    let cols;
    let b: &[T] = if s.is_pointwise() {
        &x.data
    } else {
        cols = im2col(x, s, oh, ow);
        &cols
    };
    // dW += dout · colsᵀ
    T::gemm(
        s.cout, n, kk, T::one(), &dout.data, n as isize, 1, b, 1, n as isize, T::one(), dweight,
        kk as isize, 1,
    );
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = dout.plane(co).iter().fold(*db, |acc, &v| acc + v);
    }
    if !need_dx {
        return None;
    }
    // dcols = Wᵀ · dout
    let mut dcols = vec![T::zero(); kk * n];
    T::gemm(
        kk, s.cout, n, T::one(), weight, 1, kk as isize, &dout.data, n as isize, 1, T::zero(),
        &mut dcols, n as isize, 1,
    );
    if s.is_pointwise() {
        Some(Tensor::from_data(s.cin, x.h, x.w, dcols))
    } else {
        Some(col2im(&dcols, s, x.h, x.w, oh, ow))
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward_inplace<T: Scalar>(dout: &mut Tensor<T>, out: &Tensor<T>) {
    for (d, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Max pooling with a square window equal to its stride; partial windows at
/// the bottom/right edges are kept (ceil mode).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, win: usize) -> (Tensor<T>, Vec<u32>) {
    let oh = x.h.div_ceil(win);
    let ow = x.w.div_ceil(win);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for y in oy * win..((oy + 1) * win).min(x.h) {
                    for xx in ox * win..((ox + 1) * win).min(x.w) {
                        let v = plane[y * x.w + xx];
                        if v > best {
                            best = v;
                            best_i = y * x.w + xx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dout: &Tensor<T>, arg: &[u32], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.c, h, w);
    let n = dout.h * dout.w;
    for c in 0..dout.c {
        let plane = dx.plane_mut(c);
        for i in 0..n {
            let src = arg[c * n + i] as usize;
            plane[src] = plane[src] + dout.data[c * n + i];
        }
    }
    dx
}

/// Offset that centres `inner` inside `outer`, extra cell at the far side.
pub fn center_offset(outer: usize, inner: usize) -> usize {
    (outer - inner) / 2
}

/// Zero-pad every tensor to the largest spatial size and stack channels.
pub fn concat_padded<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let h = parts.iter().map(|t| t.h).max().unwrap_or(0);
    let w = parts.iter().map(|t| t.w).max().unwrap_or(0);
    let c: usize = parts.iter().map(|t| t.c).sum();
    let mut out = Tensor::zeros(c, h, w);
    let mut base = 0;
    for t in parts {
        let (oy, ox) = (center_offset(h, t.h), center_offset(w, t.w));
        for ch in 0..t.c {
            let src = t.plane(ch);
            let dst = out.plane_mut(base + ch);
            for y in 0..t.h {
                dst[(y + oy) * w + ox..(y + oy) * w + ox + t.w].copy_from_slice(&src[y * t.w..(y + 1) * t.w]);
            }
        }
        base += t.c;
    }
    out
}

/// Split a concatenated gradient back into per-part gradients.
pub fn concat_padded_backward<T: Scalar>(dout: &Tensor<T>, shapes: &[(usize, usize, usize)]) -> Vec<Tensor<T>> {
    let mut base = 0;
    shapes
        .iter()
        .map(|&(c, h, w)| {
            let (oy, ox) = (center_offset(dout.h, h), center_offset(dout.w, w));
            let mut t = Tensor::zeros(c, h, w);
            for ch in 0..c {
                let src = dout.plane(base + ch);
                let dst = t.plane_mut(ch);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + oy) * dout.w + ox..(y + oy) * dout.w + ox + w]);
                }
            }
            base += c;
            t
        })
        .collect()
}

type Taps = Vec<(usize, usize, f64)>;

fn taps(in_len: usize, out_len: usize) -> Taps {
    crate::raster::linear_taps(in_len, out_len)
}

/// Bilinear resize of every channel to `(oh, ow)`, half-pixel centred.
pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let ty = taps(x.h, oh);
    let tx = taps(x.w, ow);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                let top = src[y0 * x.w + x0] * gx + src[y0 * x.w + x1] * fx;
                let bot = src[y1 * x.w + x0] * gx + src[y1 * x.w + x1] * fx;
                dst[oy * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(dout: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let ty = taps(h, dout.h);
    let tx = taps(w, dout.w);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let g = dout.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                let v = g[oy * dout.w + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + v * gy * gx;
                dst[y0 * w + x1] = dst[y0 * w + x1] + v * gy * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + v * fy * gx;
                dst[y1 * w + x1] = dst[y1 * w + x1] + v * fy * fx;
            }
        }
    }
    dx
}
