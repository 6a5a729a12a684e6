//! Dense rank-4 storage plus the convolution, pooling and elementwise
//! primitives used by the network, each with an explicit backward pass.
//!
//! Layout is row-major `(n, c, h, w)`. Convolutions are lowered to GEMM
//! through an im2col buffer per sample; per-sample work may run on the rayon
//! pool, and every cross-sample reduction is summed in sample order so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dimensions must be at least 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(c, h, w)` sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense `(n, c, h, w)` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    /// Zero-filled tensor. Panics if a dimension is zero; use
    /// [`Shape4::new`] to validate untrusted sizes first.
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        assert!(!shape.is_empty(), "tensor shape {shape} has a zero dimension");
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        let shape = Shape4::new(shape.n, shape.c, shape.h, shape.w)?;
        if data.len() != shape.len() {
            return Err(Error::Dimension {
                axis: "data length",
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && h < s.h && w < s.w);
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Inverse of [`Tensor4::offset`].
    pub fn unravel(&self, flat: usize) -> (usize, usize, usize, usize) {
        let s = self.shape;
        let w = flat % s.w;
        let rest = flat / s.w;
        let h = rest % s.h;
        let rest = rest / s.h;
        (rest / s.c, rest % s.c, h, w)
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Same data viewed under another shape with an equal element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(samples: &[Tensor4]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * samples.len());
        let mut n = 0;
        for s in samples {
            check_axis("channels", first.c, s.shape.c)?;
            check_axis("height", first.h, s.shape.h)?;
            check_axis("width", first.w, s.shape.w)?;
            data.extend_from_slice(&s.data);
            n += s.shape.n;
        }
        Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w)?, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_axis(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            axis,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn check_same_shape(a: Shape4, b: Shape4) -> Result<()> {
    check_axis("batch", a.n, b.n)?;
    check_axis("channels", a.c, b.c)?;
    check_axis("height", a.h, b.h)?;
    check_axis("width", a.w, b.w)
}

/// Kernel, stride and zero padding of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Parameter(format!("kernel {kernel:?} must be at least 1x1")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter(format!("stride {stride:?} must be at least 1")));
        }
        Ok(ConvSpec {
            kernel,
            stride,
            padding,
        })
    }

    /// Unit stride, no padding.
    pub fn kernel(kh: usize, kw: usize) -> Result<Self> {
        Self::new((kh, kw), (1, 1), (0, 0))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    /// Output `(h, w)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if self.kernel.0 > ph {
            return Err(Error::Dimension {
                axis: "height",
                expected: self.kernel.0,
                actual: ph,
            });
        }
        if self.kernel.1 > pw {
            return Err(Error::Dimension {
                axis: "width",
                expected: self.kernel.1,
                actual: pw,
            });
        }
        Ok((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by im2col and col2im for one sample.
#[derive(Clone, Copy)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.spec.kernel.0 * self.spec.kernel.1
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let cols = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let cols = self.cols();
        x.fill(0.0);
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(input: Shape4, weights: Shape4, bias_len: usize, spec: &ConvSpec) -> Result<Lowering> {
    check_axis("input channels", weights.c, input.c)?;
    check_axis("kernel height", spec.kernel.0, weights.h)?;
    check_axis("kernel width", spec.kernel.1, weights.w)?;
    check_axis("bias", weights.n, bias_len)?;
    let (oh, ow) = spec.output_hw(input.h, input.w)?;
    Ok(Lowering {
        c: input.c,
        h: input.h,
        w: input.w,
        oh,
        ow,
        spec: *spec,
    })
}

/// 2-D cross-correlation. `weights` is `(c_out, c_in, kh, kw)`.
pub fn conv2d_forward(input: &Tensor4, weights: &Tensor4, bias: &[f64], spec: &ConvSpec) -> Result<Tensor4> {
    let geo = conv_geometry(input.shape, weights.shape, bias.len(), spec)?;
    let c_out = weights.shape.n;
    let out_shape = Shape4::new(input.shape.n, c_out, geo.oh, geo.ow)?;
    let mut out = Tensor4::zeros(out_shape);
    let plane = geo.cols();
    let pointwise = spec.is_pointwise();

    out.data
        .par_chunks_mut(out_shape.sample_len())
        .zip(input.data.par_chunks(input.shape.sample_len()))
        .for_each(|(y, x)| {
            for (co, b) in bias.iter().enumerate() {
                y[co * plane..(co + 1) * plane].fill(*b);
            }
            if pointwise {
                gemm(c_out, geo.rows(), plane, &weights.data, false, x, false, 1.0, y);
            } else {
                let mut col = vec![0.0; geo.rows() * plane];
                geo.im2col(x, &mut col);
                gemm(c_out, geo.rows(), plane, &weights.data, false, &col, false, 1.0, y);
            }
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor4, weights: &Tensor4, spec: &ConvSpec, grad_out: &Tensor4) -> Result<ConvGrads> {
    let geo = conv_geometry(input.shape, weights.shape, weights.shape.n, spec)?;
    let c_out = weights.shape.n;
    let expected = Shape4::new(input.shape.n, c_out, geo.oh, geo.ow)?;
    check_same_shape(expected, grad_out.shape)?;

    let plane = geo.cols();
    let k = geo.rows();
    let pointwise = spec.is_pointwise();
    let mut grad_input = Tensor4::zeros(input.shape);

    // Per-sample partial weight gradients, reduced in sample order below.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_input
        .data
        .par_chunks_mut(input.shape.sample_len())
        .zip(input.data.par_chunks(input.shape.sample_len()))
        .zip(grad_out.data.par_chunks(expected.sample_len()))
        .map(|((gx, x), gy)| {
            let mut gw = vec![0.0; c_out * k];
            let gb: Vec<f64> = gy.chunks(plane).map(|row| row.iter().sum()).collect();
            if pointwise {
                gemm(c_out, plane, k, gy, false, x, true, 0.0, &mut gw);
                gemm(k, c_out, plane, &weights.data, true, gy, false, 0.0, gx);
            } else {
                let mut col = vec![0.0; k * plane];
                geo.im2col(x, &mut col);
                gemm(c_out, plane, k, gy, false, &col, true, 0.0, &mut gw);
                gemm(k, c_out, plane, &weights.data, true, gy, false, 0.0, &mut col);
                geo.col2im(&col, gx);
            }
            (gw, gb)
        })
        .collect();

    let mut grad_weights = Tensor4::zeros(weights.shape);
    let mut grad_bias = vec![0.0; c_out];
    for (gw, gb) in &partials {
        for (acc, v) in grad_weights.data.iter_mut().zip(gw) {
            *acc += v;
        }
        for (acc, v) in grad_bias.iter_mut().zip(gb) {
            *acc += v;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Argmax bookkeeping from a max-pool forward pass.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_shape: Shape4,
    output_shape: Shape4,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape4 {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape4 {
        self.output_shape
    }

    /// Flat input offset selected for each output cell.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pooling; padded cells never win. Ties go to the lowest flat index.
///
/// Runs as a row pass then a column pass. Taking the first maximum along
/// each row and then the first maximal row reproduces the lowest flat index
/// over the full window.
pub fn maxpool2d_forward(input: &Tensor4, spec: &ConvSpec) -> Result<(Tensor4, PoolIndices)> {
    let s = input.shape;
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let window = |o: usize, stride: usize, pad: usize, k: usize, len: usize| {
        let start = (o * stride) as isize - pad as isize;
        (start.max(0) as usize, ((start + k as isize).min(len as isize)).max(0) as usize)
    };
    let rows: Vec<(usize, usize)> = (0..oh).map(|oy| window(oy, sh, ph, kh, s.h)).collect();
    let cols: Vec<(usize, usize)> = (0..ow).map(|ox| window(ox, sw, pw, kw, s.w)).collect();
    if let Some(oy) = rows.iter().position(|r| r.0 >= r.1) {
        return Err(Error::Shape(format!("pooling window at output row {oy} covers only padding")));
    }
    if let Some(ox) = cols.iter().position(|c| c.0 >= c.1) {
        return Err(Error::Shape(format!("pooling window at output column {ox} covers only padding")));
    }
    let out_shape = Shape4::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let mut row_best = vec![(0.0f64, 0usize); s.h * ow];

    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        let plane = &input.data[base..base + s.h * s.w];
        for y in 0..s.h {
            let line = &plane[y * s.w..(y + 1) * s.w];
            for (ox, &(x0, x1)) in cols.iter().enumerate() {
                let mut best = (line[x0], x0);
                for (x, &v) in line.iter().enumerate().take(x1).skip(x0 + 1) {
                    if v > best.0 {
                        best = (v, x);
                    }
                }
                row_best[y * ow + ox] = (best.0, y * s.w + best.1);
            }
        }
        for &(y0, y1) in &rows {
            for ox in 0..ow {
                let mut best = row_best[y0 * ow + ox];
                for y in y0 + 1..y1 {
                    let cand = row_best[y * ow + ox];
                    if cand.0 > best.0 {
                        best = cand;
                    }
                }
                out.push(best.0);
                argmax.push(base + best.1);
            }
        }
    }
    Ok((
        Tensor4 {
            shape: out_shape,
            data: out,
        },
        PoolIndices {
            input_shape: s,
            output_shape: out_shape,
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(indices: &PoolIndices, grad_out: &Tensor4) -> Result<Tensor4> {
    check_same_shape(indices.output_shape, grad_out.shape)?;
    let mut grad = Tensor4::zeros(indices.input_shape);
    for (&at, &g) in indices.argmax.iter().zip(&grad_out.data) {
        grad.data[at] += g;
    }
    Ok(grad)
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_shape(a.shape, b.shape)?;
    Ok(Tensor4 {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn scale(a: &Tensor4, factor: f64) -> Tensor4 {
    a.map(|x| x * factor)
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where `x > 0`; the derivative at 0 is taken as 0.
pub fn relu_backward(x: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    check_same_shape(x.shape, grad.shape)?;
    Ok(Tensor4 {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn random(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_vec(s, (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop cross-correlation, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor4, w: &Tensor4, b: &[f64], spec: &ConvSpec) -> Tensor4 {
        let (oh, ow) = spec.output_hw(x.shape.h, x.shape.w).unwrap();
        let mut y = Tensor4::zeros(shape(x.shape.n, w.shape.n, oh, ow));
        for n in 0..x.shape.n {
            for co in 0..w.shape.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..x.shape.c {
                            for ki in 0..spec.kernel.0 {
                                for kj in 0..spec.kernel.1 {
                                    let iy = (oy * spec.stride.0 + ki) as isize - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kj) as isize - spec.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.shape.h && (ix as usize) < x.shape.w {
                                        acc += x.get(n, ci, iy as usize, ix as usize) * w.get(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        y.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor4::filled(shape(1, 1, 3, 3), 2.0);
        let w = Tensor4::filled(shape(1, 1, 1, 1), 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], &ConvSpec::kernel(1, 1).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(shape(2, 3, 5, 6), &mut rng);
        let w = Tensor4::zeros(shape(4, 3, 3, 3));
        let spec = ConvSpec::new((3, 3), (2, 1), (1, 1)).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0; 4], &spec).unwrap();
        assert_eq!(y.shape(), shape(2, 4, 3, 6));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor4::from_vec(shape(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor4::from_vec(shape(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], &ConvSpec::kernel(2, 2).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            ConvSpec::new((3, 3), (1, 1), (1, 1)).unwrap(),
            ConvSpec::new((3, 1), (1, 1), (1, 0)).unwrap(),
            ConvSpec::new((1, 3), (1, 1), (0, 1)).unwrap(),
            ConvSpec::new((1, 13), (1, 1), (0, 6)).unwrap(),
            ConvSpec::new((3, 3), (2, 1), (1, 1)).unwrap(),
            ConvSpec::kernel(1, 1).unwrap(),
        ] {
            let x = random(shape(2, 3, 6, 14), &mut rng);
            let w = random(shape(4, 3, spec.kernel.0, spec.kernel.1), &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let slow = naive_conv(&x, &w, &b, &spec);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let x = Tensor4::zeros(shape(1, 3, 4, 4));
        let w = Tensor4::zeros(shape(2, 2, 3, 3));
        let err = conv2d_forward(&x, &w, &[0.0; 2], &ConvSpec::kernel(3, 3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "input channels", .. }), "{err}");
        let w = Tensor4::zeros(shape(2, 3, 5, 5));
        let err = conv2d_forward(&x, &w, &[0.0; 2], &ConvSpec::kernel(5, 5).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "height", .. }), "{err}");
    }

    #[test]
    fn conv_backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(shape(1, 2, 4, 4), &mut rng);
        let w = random(shape(3, 2, 3, 3), &mut rng);
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1)).unwrap();
        let g = conv2d_backward(&x, &w, &spec, &Tensor4::zeros(shape(1, 3, 4, 4))).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_identity_kernel_passes_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(shape(2, 1, 3, 5), &mut rng);
        let gy = random(shape(2, 1, 3, 5), &mut rng);
        let w = Tensor4::filled(shape(1, 1, 1, 1), 1.0);
        let g = conv2d_backward(&x, &w, &ConvSpec::kernel(1, 1).unwrap(), &gy).unwrap();
        assert_eq!(g.input, gy);
    }

    #[test]
    fn conv_backward_rejects_wrong_grad_shape() {
        let x = Tensor4::zeros(shape(1, 1, 4, 4));
        let w = Tensor4::zeros(shape(1, 1, 3, 3));
        let err = conv2d_backward(&x, &w, &ConvSpec::kernel(3, 3).unwrap(), &Tensor4::zeros(shape(1, 1, 4, 4)))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 4), vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let spec = ConvSpec::new((1, 2), (1, 2), (0, 0)).unwrap();
        let (y, _) = maxpool2d_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn maxpool_constant_and_shape() {
        let x = Tensor4::filled(shape(1, 2, 24, 94), 0.7);
        let spec = ConvSpec::new((3, 3), (2, 1), (1, 1)).unwrap();
        let (y, _) = maxpool2d_forward(&x, &spec).unwrap();
        assert_eq!(y.shape(), shape(1, 2, 12, 94));
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_ties_take_lowest_index() {
        let x = Tensor4::filled(shape(1, 1, 2, 2), 1.0);
        let (_, idx) = maxpool2d_forward(&x, &ConvSpec::kernel(2, 2).unwrap()).unwrap();
        assert_eq!(idx.argmax(), &[0]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor4::from_vec(shape(1, 1, 2, 2), vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (_, idx) = maxpool2d_forward(&x, &ConvSpec::kernel(2, 2).unwrap()).unwrap();
        let g = maxpool2d_backward(&idx, &Tensor4::filled(shape(1, 1, 1, 1), 4.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 4.0, 0.0, 0.0]);
        let z = maxpool2d_backward(&idx, &Tensor4::zeros(shape(1, 1, 1, 1))).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let stale = maxpool2d_backward(&idx, &Tensor4::zeros(shape(1, 1, 2, 1)));
        assert!(matches!(stale, Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_window_must_fit() {
        let x = Tensor4::zeros(shape(1, 1, 2, 2));
        assert!(maxpool2d_forward(&x, &ConvSpec::kernel(3, 3).unwrap()).is_err());
    }

    #[test]
    fn relu_and_its_gradient() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor4::from_vec(shape(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let g = Tensor4::filled(shape(1, 1, 1, 2), 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn add_then_scale_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(shape(1, 1, 1, 10), &mut rng);
        let b = random(shape(1, 1, 1, 10), &mut rng);
        let y = scale(&add(&a, &b).unwrap(), -1.5);
        for i in 0..10 {
            assert_eq!(y.data()[i], (a.data()[i] + b.data()[i]) * -1.5);
        }
        assert!(add(&a, &Tensor4::zeros(shape(1, 1, 2, 5))).is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Shape4::new(1, 0, 2, 2).is_err());
        assert!(Tensor4::from_vec(shape(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        use crate::testutil::{central_diff, dot, rel_err};
        let specs = [
            (ConvSpec::kernel(3, 3).unwrap(), 2, 3, 5, 6),
            (ConvSpec::new((3, 1), (1, 1), (1, 0)).unwrap(), 3, 2, 4, 3),
            (ConvSpec::new((1, 3), (1, 1), (0, 1)).unwrap(), 2, 2, 3, 5),
            (ConvSpec::kernel(1, 1).unwrap(), 4, 3, 2, 2),
            (ConvSpec::new((2, 2), (2, 1), (1, 1)).unwrap(), 2, 2, 4, 4),
        ];
        let mut rng = crate::testutil::rng(11);
        for (spec, c_in, c_out, h, w) in specs {
            let mut x = random(shape(2, c_in, h, w), &mut rng);
            let mut wt = random(shape(c_out, c_in, spec.kernel.0, spec.kernel.1), &mut rng);
            let mut b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d_forward(&x, &wt, &b, &spec).unwrap();
            let g = random(y.shape(), &mut rng);
            let grads = conv2d_backward(&x, &wt, &spec, &g).unwrap();
            let eps = 1e-6;
            for i in 0..x.len() {
                let (xs, ws, bs) = (x.shape(), wt.clone(), b.clone());
                let num = central_diff(x.data_mut(), i, eps, |d| {
                    let xt = Tensor4::from_vec(xs, d.to_vec()).unwrap();
                    dot(&conv2d_forward(&xt, &ws, &bs, &spec).unwrap(), &g)
                });
                assert!(rel_err(grads.input.data()[i], num) < 1e-4);
            }
            for i in 0..wt.len() {
                let (xc, wsh, bs) = (x.clone(), wt.shape(), b.clone());
                let num = central_diff(wt.data_mut(), i, eps, |d| {
                    let wtt = Tensor4::from_vec(wsh, d.to_vec()).unwrap();
                    dot(&conv2d_forward(&xc, &wtt, &bs, &spec).unwrap(), &g)
                });
                assert!(rel_err(grads.weights.data()[i], num) < 1e-4);
            }
            for i in 0..b.len() {
                let (xc, wc) = (x.clone(), wt.clone());
                let num = central_diff(&mut b, i, eps, |d| dot(&conv2d_forward(&xc, &wc, d, &spec).unwrap(), &g));
                assert!(rel_err(grads.bias[i], num) < 1e-4);
            }
        }
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        use crate::testutil::{central_diff, dot, rel_err};
        let mut rng = crate::testutil::rng(5);
        let spec = ConvSpec::new((3, 3), (1, 2), (0, 0)).unwrap();
        // distinct values keep every window away from a tie under perturbation
        let mut x = Tensor4::from_vec(shape(2, 2, 5, 7), {
            let mut v: Vec<f64> = (0..140).map(|i| i as f64 * 0.01).collect();
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            v
        })
        .unwrap();
        let (y, idx) = maxpool2d_forward(&x, &spec).unwrap();
        let g = random(y.shape(), &mut rng);
        let gi = maxpool2d_backward(&idx, &g).unwrap();
        let xs = x.shape();
        for i in 0..x.len() {
            let num = central_diff(x.data_mut(), i, 1e-6, |d| {
                let t = Tensor4::from_vec(xs, d.to_vec()).unwrap();
                dot(&maxpool2d_forward(&t, &spec).unwrap().0, &g)
            });
            assert!(rel_err(gi.data()[i], num) < 1e-4);
        }
    }

    /// Window scan in flat order, first maximum wins.
    fn naive_pool(x: &Tensor4, spec: &ConvSpec) -> (Vec<f64>, Vec<usize>) {
        let s = x.shape();
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        let (mut vals, mut idx) = (Vec::new(), Vec::new());
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best: Option<(f64, usize)> = None;
                        for ky in 0..spec.kernel.0 {
                            for kx in 0..spec.kernel.1 {
                                let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let at = x.offset(n, c, iy as usize, ix as usize);
                                if best.is_none_or(|b| x.data()[at] > b.0) {
                                    best = Some((x.data()[at], at));
                                }
                            }
                        }
                        let b = best.unwrap();
                        vals.push(b.0);
                        idx.push(b.1);
                    }
                }
            }
        }
        (vals, idx)
    }

    proptest::proptest! {
        #[test]
        fn maxpool_matches_window_scan(seed in 0u64..500, k in 1usize..4, st in 1usize..3, pad in 0usize..2) {
            let mut rng = crate::testutil::rng(seed);
            let spec = ConvSpec::new((k, k), (st, 1), (pad.min(k - 1), pad.min(k - 1))).unwrap();
            // few distinct levels so ties are common
            let x = Tensor4::from_vec(shape(2, 2, 5, 6), (0..120).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
            let (y, idx) = maxpool2d_forward(&x, &spec).unwrap();
            let (vals, want) = naive_pool(&x, &spec);
            proptest::prop_assert_eq!(y.data(), &vals[..]);
            proptest::prop_assert_eq!(idx.argmax(), &want[..]);
        }

        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = crate::testutil::rng(seed);
            let spec = ConvSpec::new((3, 3), (1, 1), (1, 1)).unwrap();
            let x1 = random(shape(2, 3, 4, 5), &mut rng);
            let x2 = random(shape(2, 3, 4, 5), &mut rng);
            let w = random(shape(4, 3, 3, 3), &mut rng);
            let zero = [0.0; 4];
            let mix = add(&scale(&x1, alpha), &scale(&x2, beta)).unwrap();
            let lhs = conv2d_forward(&mix, &w, &zero, &spec).unwrap();
            let rhs = add(
                &scale(&conv2d_forward(&x1, &w, &zero, &spec).unwrap(), alpha),
                &scale(&conv2d_forward(&x2, &w, &zero, &spec).unwrap(), beta),
            )
            .unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }

        #[test]
        fn offset_is_row_major(n in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
            let t = Tensor4::zeros(shape(n, c, h, w));
            let mut expected = 0;
            for a in 0..n { for b in 0..c { for y in 0..h { for x in 0..w {
                proptest::prop_assert_eq!(t.offset(a, b, y, x), expected);
                proptest::prop_assert_eq!(t.unravel(expected), (a, b, y, x));
                expected += 1;
            }}}}
        }
    }
}
