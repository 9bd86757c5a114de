//! Custom differentiable operators on top of candle: FFT-backed real DFT and
//! its inverse (each other's adjoint up to a per-bin scale), `atan2`, and a
//! few element-wise helpers with backward passes built from primitive ops.

use std::f64::consts::PI;
use std::sync::Arc;

use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape, Tensor, D,
};
use num_complex::Complex;
use rustfft::num_traits::Float;
use rustfft::{Fft, FftNum, FftPlanner};

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

fn rdft_rows<T: FftNum>(input: &[T], n: usize) -> Vec<T> {
    let bins = n / 2 + 1;
    let rows = input.len() / n;
    let fft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_forward(n);
    let mut out = vec![T::zero(); rows * 2 * bins];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for (r, row) in input.chunks_exact(n).enumerate() {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex::new(v, T::zero());
        }
        fft.process(&mut buf);
        let o = &mut out[r * 2 * bins..(r + 1) * 2 * bins];
        for k in 0..bins {
            o[k] = buf[k].re;
            o[bins + k] = buf[k].im;
        }
    }
    out
}

fn irdft_rows<T: FftNum>(input: &[T], n: usize) -> Vec<T> {
    let bins = n / 2 + 1;
    let rows = input.len() / (2 * bins);
    let ifft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_inverse(n);
    let scale = T::one() / T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); rows * n];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for (r, row) in input.chunks_exact(2 * bins).enumerate() {
        for k in 0..bins {
            buf[k] = Complex::new(row[k], row[bins + k]);
        }
        buf[0].im = T::zero();
        if n % 2 == 0 {
            buf[n / 2].im = T::zero();
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
    out
}

/// Per-bin weights relating the two transforms: `rdft^T = n * irdft(g * s)`
/// and `irdft^T = rdft(g) * c / n`.
fn bin_scale(n: usize, dtype: DType, adjoint_of_rdft: bool) -> Result<Tensor> {
    let bins = n / 2 + 1;
    let mut v = vec![0f64; 2 * bins];
    for k in 0..bins {
        let edge = k == 0 || (n % 2 == 0 && k == bins - 1);
        if adjoint_of_rdft {
            v[k] = if edge { 1.0 } else { 0.5 };
            v[bins + k] = v[k];
        } else {
            v[k] = if edge { 1.0 } else { 2.0 } / n as f64;
            v[bins + k] = if edge { 0.0 } else { 2.0 / n as f64 };
        }
    }
    Tensor::from_vec(v, 2 * bins, &candle_core::Device::Cpu)?.to_dtype(dtype)
}

/// Real DFT over the last dimension: `[.., n] -> [.., 2 * (n/2 + 1)]`, real
/// parts first, then imaginary parts.
struct Rdft {
    n: usize,
}

impl CustomOp1 for Rdft {
    fn name(&self) -> &'static str {
        "rdft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = 2 * (self.n / 2 + 1);
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(rdft_rows(contiguous_slice(d, layout)?, self.n)),
            CpuStorage::F64(d) => CpuStorage::F64(rdft_rows(contiguous_slice(d, layout)?, self.n)),
            _ => candle_core::bail!("rdft: unsupported dtype"),
        };
        Ok((out, Shape::from(out_dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let s = bin_scale(self.n, grad_res.dtype(), true)?;
        let g = grad_res.broadcast_mul(&s)?;
        Ok(Some(irdft(&g, self.n)?.affine(self.n as f64, 0.0)?))
    }
}

/// Inverse of [`Rdft`] with Hermitian completion; imaginary parts of the DC
/// and Nyquist bins are ignored.
struct Irdft {
    n: usize,
}

impl CustomOp1 for Irdft {
    fn name(&self) -> &'static str {
        "irdft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.n;
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(irdft_rows(contiguous_slice(d, layout)?, self.n)),
            CpuStorage::F64(d) => CpuStorage::F64(irdft_rows(contiguous_slice(d, layout)?, self.n)),
            _ => candle_core::bail!("irdft: unsupported dtype"),
        };
        Ok((out, Shape::from(out_dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let s = bin_scale(self.n, grad_res.dtype(), false)?;
        Ok(Some(rdft(grad_res, self.n)?.broadcast_mul(&s)?))
    }
}

pub fn rdft(x: &Tensor, n: usize) -> Result<Tensor> {
    if x.dim(D::Minus1)? != n {
        candle_core::bail!("rdft: last dim {} != {n}", x.dim(D::Minus1)?);
    }
    x.contiguous()?.apply_op1(Rdft { n })
}

pub fn irdft(x: &Tensor, n: usize) -> Result<Tensor> {
    if x.dim(D::Minus1)? != 2 * (n / 2 + 1) {
        candle_core::bail!("irdft: last dim {} does not match n={n}", x.dim(D::Minus1)?);
    }
    x.contiguous()?.apply_op1(Irdft { n })
}

struct Atan2;

fn atan2_vec<T: Float>(y: &[T], x: &[T]) -> Vec<T> {
    y.iter().zip(x).map(|(&a, &b)| a.atan2(b)).collect()
}

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(x)) => {
                CpuStorage::F32(atan2_vec(contiguous_slice(y, l1)?, contiguous_slice(x, l2)?))
            }
            (CpuStorage::F64(y), CpuStorage::F64(x)) => {
                CpuStorage::F64(atan2_vec(contiguous_slice(y, l1)?, contiguous_slice(x, l2)?))
            }
            _ => candle_core::bail!("atan2: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let denom = (x.sqr()? + y.sqr()?)?.affine(1.0, 1e-12)?;
        let gy = (x / &denom)?.mul(grad_res)?;
        let gx = (y.neg()? / &denom)?.mul(grad_res)?;
        Ok((Some(gy), Some(gx)))
    }
}

/// Element-wise `atan2(y, x)` with codomain `(-π, π]`.
pub fn atan2(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    if y.shape() != x.shape() {
        candle_core::bail!("atan2: shape mismatch {:?} vs {:?}", y.shape(), x.shape());
    }
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)
}

/// Maps phase differences into `[-π, π]`; the subtracted multiple of 2π is
/// treated as a constant.
pub fn wrap_phase(x: &Tensor) -> Result<Tensor> {
    let turns = x.detach().affine(1.0 / (2.0 * PI), 0.0)?.round()?;
    x - turns.affine(2.0 * PI, 0.0)?
}

/// Kernel geometry of a 2-D convolution over `[B, H, W, C]` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    fn out_1d(n: usize, k: usize, s: usize, d: usize, p: usize) -> usize {
        let span = d * (k - 1) + 1;
        if n + 2 * p < span {
            0
        } else {
            (n + 2 * p - span) / s + 1
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            Self::out_1d(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0),
            Self::out_1d(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1),
        )
    }

    /// Input row read by output row `oh` at vertical tap `i`.
    fn source_row(&self, oh: usize, i: usize, h: usize) -> Option<usize> {
        let y = (oh * self.stride.0 + i * self.dilation.0).checked_sub(self.padding.0)?;
        (y < h).then_some(y)
    }

    /// Output columns whose horizontal tap `j` lands inside `[0, w)`, with
    /// the input column of the first one.
    fn valid_cols(&self, j: usize, w: usize, wo: usize) -> (usize, usize, usize) {
        let off = j * self.dilation.1;
        let s = self.stride.1;
        let p = self.padding.1;
        let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
        let hi = if w + p <= off { 0 } else { ((w + p - off - 1) / s + 1).min(wo) };
        let first = lo * s + off;
        (lo, hi.max(lo), first.saturating_sub(p))
    }
}

/// Copies `c` values; small fixed widths avoid a `memcpy` call per tap.
#[inline(always)]
fn copy_run<T: Copy>(dst: &mut [T], src: &[T], c: usize) {
    fn fixed<T: Copy, const N: usize>(dst: &mut [T], src: &[T]) {
        dst[..N].copy_from_slice(&src[..N]);
    }
    match c {
        1 => dst[0] = src[0],
        2 => fixed::<T, 2>(dst, src),
        3 => fixed::<T, 3>(dst, src),
        4 => fixed::<T, 4>(dst, src),
        8 => fixed::<T, 8>(dst, src),
        16 => fixed::<T, 16>(dst, src),
        _ => dst[..c].copy_from_slice(&src[..c]),
    }
}

#[inline(always)]
fn add_run<T: Copy + std::ops::AddAssign>(dst: &mut [T], src: &[T], c: usize) {
    fn fixed<T: Copy + std::ops::AddAssign, const N: usize>(dst: &mut [T], src: &[T]) {
        let d: &mut [T; N] = (&mut dst[..N]).try_into().unwrap();
        let s: &[T; N] = (&src[..N]).try_into().unwrap();
        for k in 0..N {
            d[k] += s[k];
        }
    }
    match c {
        1 => dst[0] += src[0],
        2 => fixed::<T, 2>(dst, src),
        3 => fixed::<T, 3>(dst, src),
        4 => fixed::<T, 4>(dst, src),
        8 => fixed::<T, 8>(dst, src),
        16 => fixed::<T, 16>(dst, src),
        _ => {
            for (o, &v) in dst[..c].iter_mut().zip(&src[..c]) {
                *o += v;
            }
        }
    }
}

/// `[B, H, W, C]` to `[B * Ho * Wo, kh * kw * C]`, tap-major then channel.
fn im2col_slice<T: Copy + Default>(x: &[T], dims: [usize; 4], g: &Conv2dGeom) -> Vec<T> {
    let [b, h, w, c] = dims;
    let (ho, wo) = g.out_dims(h, w);
    let row = g.kernel.0 * g.kernel.1 * c;
    let cols: Vec<_> = (0..g.kernel.1).map(|j| g.valid_cols(j, w, wo)).collect();
    let mut out = vec![T::default(); b * ho * wo * row];
    for bi in 0..b {
        for oh in 0..ho {
            let rows: Vec<Option<usize>> = (0..g.kernel.0).map(|i| g.source_row(oh, i, h)).collect();
            let base = (bi * ho + oh) * wo;
            for ow in 0..wo {
                let dst_row = (base + ow) * row;
                for (i, y) in rows.iter().enumerate() {
                    let Some(y) = *y else { continue };
                    let line = (bi * h + y) * w;
                    for (j, &(lo, hi, x0)) in cols.iter().enumerate() {
                        if ow < lo || ow >= hi {
                            continue;
                        }
                        let src = (line + x0 + (ow - lo) * g.stride.1) * c;
                        copy_run(&mut out[dst_row + (i * g.kernel.1 + j) * c..], &x[src..], c);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_slice`]: scatters columns back onto the input grid.
fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(cols: &[T], dims: [usize; 4], g: &Conv2dGeom) -> Vec<T> {
    let [b, h, w, c] = dims;
    let (ho, wo) = g.out_dims(h, w);
    let row = g.kernel.0 * g.kernel.1 * c;
    let ranges: Vec<_> = (0..g.kernel.1).map(|j| g.valid_cols(j, w, wo)).collect();
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for oh in 0..ho {
            let rows: Vec<Option<usize>> = (0..g.kernel.0).map(|i| g.source_row(oh, i, h)).collect();
            let base = (bi * ho + oh) * wo;
            for ow in 0..wo {
                let src_row = (base + ow) * row;
                for (i, y) in rows.iter().enumerate() {
                    let Some(y) = *y else { continue };
                    let line = (bi * h + y) * w;
                    for (j, &(lo, hi, x0)) in ranges.iter().enumerate() {
                        if ow < lo || ow >= hi {
                            continue;
                        }
                        let dst = (line + x0 + (ow - lo) * g.stride.1) * c;
                        add_run(&mut out[dst..], &cols[src_row + (i * g.kernel.1 + j) * c..], c);
                    }
                }
            }
        }
    }
    out
}

struct Im2Col {
    geom: Conv2dGeom,
    dims: [usize; 4],
    adjoint: bool,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        if self.adjoint {
            "col2im"
        } else {
            "im2col"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let [b, h, w, c] = self.dims;
        let (ho, wo) = self.geom.out_dims(h, w);
        let row = self.geom.kernel.0 * self.geom.kernel.1 * c;
        let (out, shape) = match (storage, self.adjoint) {
            (CpuStorage::F32(d), false) => (
                CpuStorage::F32(im2col_slice(contiguous_slice(d, layout)?, self.dims, &self.geom)),
                Shape::from((b * ho * wo, row)),
            ),
            (CpuStorage::F64(d), false) => (
                CpuStorage::F64(im2col_slice(contiguous_slice(d, layout)?, self.dims, &self.geom)),
                Shape::from((b * ho * wo, row)),
            ),
            (CpuStorage::F32(d), true) => (
                CpuStorage::F32(col2im_slice(contiguous_slice(d, layout)?, self.dims, &self.geom)),
                Shape::from((b, h, w, c)),
            ),
            (CpuStorage::F64(d), true) => (
                CpuStorage::F64(col2im_slice(contiguous_slice(d, layout)?, self.dims, &self.geom)),
                Shape::from((b, h, w, c)),
            ),
            _ => candle_core::bail!("{}: unsupported dtype", self.name()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let op = Im2Col {
            adjoint: !self.adjoint,
            ..*self
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

/// Calls `f(out_start, in_start, count, tap)` for every run of output
/// columns whose tap lands inside the input. Within a run the output
/// position advances by 1 and the input position by the column stride.
#[inline(always)]
fn visit_runs(dims: [usize; 4], g: &Conv2dGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [b, h, w, _] = dims;
    let (ho, wo) = g.out_dims(h, w);
    let ranges: Vec<_> = (0..g.kernel.1).map(|j| g.valid_cols(j, w, wo)).collect();
    for bi in 0..b {
        for oh in 0..ho {
            let base = (bi * ho + oh) * wo;
            for i in 0..g.kernel.0 {
                let Some(y) = g.source_row(oh, i, h) else { continue };
                let line = (bi * h + y) * w;
                for (j, &(lo, hi, x0)) in ranges.iter().enumerate() {
                    if hi > lo {
                        f(base + lo, line + x0, hi - lo, i * g.kernel.1 + j);
                    }
                }
            }
        }
    }
}

trait Real: Copy + Default + PartialOrd + std::ops::AddAssign + std::ops::Mul<Output = Self> {}
impl Real for f32 {}
impl Real for f64 {}

/// Direct convolution for narrow layers, where the column matrix would cost
/// more memory traffic than the arithmetic. `CI` is the input width, or 0
/// when it is only known at run time; `CO` is the output width.
fn direct_fwd<T: Real, const CI: usize, const CO: usize>(
    x: &[T],
    w: &[T],
    dims: [usize; 4],
    g: &Conv2dGeom,
) -> Vec<T> {
    let [b, h, wd, cin] = dims;
    let ci_n = if CI == 0 { cin } else { CI };
    let (ho, wo) = g.out_dims(h, wd);
    let step = g.stride.1 * ci_n;
    let mut out = vec![T::default(); b * ho * wo * CO];
    visit_runs(dims, g, |p0, q0, n, tap| {
        let wt = &w[tap * ci_n * CO..(tap + 1) * ci_n * CO];
        let outs = out[p0 * CO..(p0 + n) * CO].chunks_exact_mut(CO);
        for (k, acc) in outs.enumerate() {
            let acc: &mut [T; CO] = acc.try_into().unwrap();
            let q = q0 * ci_n + k * step;
            for (&v, wr) in x[q..q + ci_n].iter().zip(wt.chunks_exact(CO)) {
                for o in 0..CO {
                    acc[o] += v * wr[o];
                }
            }
        }
    });
    out
}

fn direct_grad_input<T: Real, const CI: usize, const CO: usize>(
    gy: &[T],
    w: &[T],
    dims: [usize; 4],
    g: &Conv2dGeom,
) -> Vec<T> {
    let [b, h, wd, cin] = dims;
    let ci_n = if CI == 0 { cin } else { CI };
    let step = g.stride.1 * ci_n;
    // Per tap, transpose to [CO][cin] so the inner loop runs over inputs.
    let taps = g.kernel.0 * g.kernel.1;
    let mut wt = vec![T::default(); w.len()];
    for tap in 0..taps {
        for ci in 0..ci_n {
            for o in 0..CO {
                wt[(tap * CO + o) * ci_n + ci] = w[(tap * ci_n + ci) * CO + o];
            }
        }
    }
    let mut out = vec![T::default(); b * h * wd * ci_n];
    visit_runs(dims, g, |p0, q0, n, tap| {
        let wtap = &wt[tap * CO * ci_n..(tap + 1) * CO * ci_n];
        for (k, gr) in gy[p0 * CO..(p0 + n) * CO].chunks_exact(CO).enumerate() {
            let q = q0 * ci_n + k * step;
            let dst = &mut out[q..q + ci_n];
            for (&gv, wr) in gr.iter().zip(wtap.chunks_exact(ci_n)) {
                for (d, &wv) in dst.iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            }
        }
    });
    out
}

fn direct_grad_weight<T: Real, const CI: usize, const CO: usize>(
    x: &[T],
    gy: &[T],
    dims: [usize; 4],
    g: &Conv2dGeom,
) -> Vec<T> {
    let ci_n = if CI == 0 { dims[3] } else { CI };
    let step = g.stride.1 * ci_n;
    let mut out = vec![T::default(); g.kernel.0 * g.kernel.1 * ci_n * CO];
    let mut acc = vec![T::default(); ci_n * CO];
    visit_runs(dims, g, |p0, q0, n, tap| {
        acc.fill(T::default());
        for (k, gr) in gy[p0 * CO..(p0 + n) * CO].chunks_exact(CO).enumerate() {
            let gr: &[T; CO] = gr.try_into().unwrap();
            let q = q0 * ci_n + k * step;
            for (&v, ar) in x[q..q + ci_n].iter().zip(acc.chunks_exact_mut(CO)) {
                for o in 0..CO {
                    ar[o] += v * gr[o];
                }
            }
        }
        for (o, &a) in out[tap * ci_n * CO..(tap + 1) * ci_n * CO].iter_mut().zip(&acc) {
            *o += a;
        }
    });
    out
}

#[derive(Clone, Copy)]
enum DirectKind {
    Forward,
    GradInput,
    GradWeight,
}

/// The three direct kernels as one op. `dims` is the input shape; `cout`
/// selects the kernel width.
struct DirectConv {
    geom: Conv2dGeom,
    dims: [usize; 4],
    cout: usize,
    kind: DirectKind,
}

const DIRECT_WIDTHS: [usize; 5] = [1, 2, 4, 8, 16];

fn run_direct<T: Real>(op: &DirectConv, a: &[T], b: &[T]) -> Result<Vec<T>> {
    macro_rules! kernels {
        ($ci:literal, $co:literal) => {
            match op.kind {
                DirectKind::Forward => direct_fwd::<T, $ci, $co>(a, b, op.dims, &op.geom),
                DirectKind::GradInput => direct_grad_input::<T, $ci, $co>(a, b, op.dims, &op.geom),
                DirectKind::GradWeight => direct_grad_weight::<T, $ci, $co>(a, b, op.dims, &op.geom),
            }
        };
    }
    macro_rules! by_input {
        ($co:literal) => {
            match op.dims[3] {
                1 => kernels!(1, $co),
                2 => kernels!(2, $co),
                4 => kernels!(4, $co),
                8 => kernels!(8, $co),
                16 => kernels!(16, $co),
                _ => kernels!(0, $co),
            }
        };
    }
    Ok(match op.cout {
        1 => by_input!(1),
        2 => by_input!(2),
        4 => by_input!(4),
        8 => by_input!(8),
        16 => by_input!(16),
        c => candle_core::bail!("direct conv: unsupported width {c}"),
    })
}

impl DirectConv {
    fn out_shape(&self) -> Shape {
        let [b, h, w, c] = self.dims;
        match self.kind {
            DirectKind::Forward => {
                let (ho, wo) = self.geom.out_dims(h, w);
                Shape::from((b, ho, wo, self.cout))
            }
            DirectKind::GradInput => Shape::from((b, h, w, c)),
            DirectKind::GradWeight => Shape::from((self.geom.kernel.0 * self.geom.kernel.1 * c, self.cout)),
        }
    }

    fn with_kind(&self, kind: DirectKind) -> Self {
        Self { kind, ..*self }
    }
}

impl CustomOp2 for DirectConv {
    fn name(&self) -> &'static str {
        "conv2d-direct"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(run_direct(self, contiguous_slice(a, l1)?, contiguous_slice(b, l2)?)?)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(run_direct(self, contiguous_slice(a, l1)?, contiguous_slice(b, l2)?)?)
            }
            _ => candle_core::bail!("conv2d: unsupported dtypes"),
        };
        Ok((out, self.out_shape()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = grad_res.contiguous()?;
        let gx = if x.track_op() {
            Some(g.apply_op2(&w.detach().contiguous()?, self.with_kind(DirectKind::GradInput))?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.detach().contiguous()?.apply_op2(&g, self.with_kind(DirectKind::GradWeight))?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

/// Convolution without bias: `x` `[B, H, W, Cin]`, `weight`
/// `[kh * kw * Cin, Cout]`. The column matrix is rebuilt in the backward pass
/// instead of being kept alive by the graph.
struct Conv2dOp {
    geom: Conv2dGeom,
}

impl Conv2dOp {
    fn columns(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        x.detach().contiguous()?.apply_op1(Im2Col {
            geom: self.geom,
            dims: [b, h, w, c],
            adjoint: false,
        })
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dev = candle_core::Device::Cpu;
        let (x, w) = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => (
                Tensor::from_slice(contiguous_slice(x, l1)?, l1.shape(), &dev)?,
                Tensor::from_slice(contiguous_slice(w, l2)?, l2.shape(), &dev)?,
            ),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => (
                Tensor::from_slice(contiguous_slice(x, l1)?, l1.shape(), &dev)?,
                Tensor::from_slice(contiguous_slice(w, l2)?, l2.shape(), &dev)?,
            ),
            _ => candle_core::bail!("conv2d: unsupported dtypes"),
        };
        let (b, h, wd, _) = x.dims4()?;
        let (ho, wo) = self.geom.out_dims(h, wd);
        let y = self.columns(&x)?.matmul(&w)?;
        let shape = Shape::from((b, ho, wo, w.dim(1)?));
        let out = match y.dtype() {
            DType::F32 => CpuStorage::F32(y.flatten_all()?.to_vec1()?),
            _ => CpuStorage::F64(y.flatten_all()?.to_vec1()?),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, h, wd, c) = x.dims4()?;
        let cout = w.dim(1)?;
        let g = grad_res.contiguous()?.reshape(((), cout))?;
        let gw = if w.track_op() {
            Some(self.columns(x)?.t()?.matmul(&g)?)
        } else {
            None
        };
        let gx = if x.track_op() {
            let gcols = g.matmul(&w.detach().t()?)?;
            Some(gcols.contiguous()?.apply_op1(Im2Col {
                geom: self.geom,
                dims: [b, h, wd, c],
                adjoint: true,
            })?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

/// 2-D convolution of `[B, H, W, Cin]` with a `[kh * kw * Cin, Cout]` kernel.
pub fn conv2d_nhwc(x: &Tensor, weight: &Tensor, geom: Conv2dGeom) -> Result<Tensor> {
    let (_, h, w, c) = x.dims4()?;
    let rows = geom.kernel.0 * geom.kernel.1 * c;
    if weight.dim(0)? != rows {
        candle_core::bail!("conv2d: kernel has {} rows, expected {rows}", weight.dim(0)?);
    }
    let (ho, wo) = geom.out_dims(h, w);
    if ho == 0 || wo == 0 {
        candle_core::bail!("conv2d: input {h}x{w} smaller than kernel span");
    }
    let (b, cout) = (x.dim(0)?, weight.dim(1)?);
    if DIRECT_WIDTHS.contains(&cout) {
        let op = DirectConv {
            geom,
            dims: [b, h, w, c],
            cout,
            kind: DirectKind::Forward,
        };
        return x.contiguous()?.apply_op2(&weight.contiguous()?, op);
    }
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp { geom })
}

fn map_f<F32, F64>(s: &CpuStorage, l: &Layout, f32_op: F32, f64_op: F64) -> Result<CpuStorage>
where
    F32: FnOnce(&[f32]) -> Vec<f32>,
    F64: FnOnce(&[f64]) -> Vec<f64>,
{
    Ok(match s {
        CpuStorage::F32(v) => CpuStorage::F32(f32_op(contiguous_slice(v, l)?)),
        CpuStorage::F64(v) => CpuStorage::F64(f64_op(contiguous_slice(v, l)?)),
        _ => candle_core::bail!("unsupported dtype"),
    })
}

/// Sum over all leading dimensions of a `[.., C]` tensor, giving `[C]`.
struct ColumnSum {
    cols: usize,
}

fn column_sum<T: Real>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for row in x.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let c = self.cols;
        Ok((map_f(s, l, |x| column_sum(x, c), |x| column_sum(x, c))?, Shape::from(c)))
    }
}

/// `x + bias` with `bias` broadcast along the last dimension of `x`.
struct AddBias;

fn add_bias<T: Real>(x: &[T], b: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(b.len()) {
        for (o, &v) in row.iter_mut().zip(b) {
            *o += v;
        }
    }
    out
}

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(add_bias(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(add_bias(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            _ => candle_core::bail!("add-bias: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, b: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gx = x.track_op().then(|| grad_res.clone());
        let gb = if b.track_op() {
            Some(grad_res.contiguous()?.apply_op1(ColumnSum { cols: b.elem_count() })?)
        } else {
            None
        };
        Ok((gx, gb))
    }
}

/// Adds a per-channel `bias` `[C]` to a channels-last tensor `[.., C]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.elem_count();
    if bias.rank() != 1 || x.dims().last() != Some(&c) {
        candle_core::bail!("add_channel_bias: bias {:?} does not match input {:?}", bias.dims(), x.dims());
    }
    x.contiguous()?.apply_op2(&bias.contiguous()?, AddBias)
}

struct LeakyRelu {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (a32, a64) = (self.slope as f32, self.slope);
        let out = map_f(
            s,
            l,
            |x| x.iter().map(|&v| if v > 0.0 { v } else { v * a32 }).collect(),
            |x| x.iter().map(|&v| if v > 0.0 { v } else { v * a64 }).collect(),
        )?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let g = x
            .detach()
            .contiguous()?
            .apply_op2(&grad_res.contiguous()?, LeakyReluGrad { slope: self.slope })?;
        Ok(Some(g))
    }
}

struct LeakyReluGrad {
    slope: f64,
}

fn leaky_grad<T: Real>(x: &[T], g: &[T], slope: T) -> Vec<T> {
    x.iter().zip(g).map(|(&v, &d)| if v > T::default() { d } else { d * slope }).collect()
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(leaky_grad(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                self.slope as f32,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(leaky_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, self.slope))
            }
            _ => candle_core::bail!("leaky-relu: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.detach().max_keepdim(dim)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(dim)?)
}

pub fn mean_abs(x: &Tensor) -> Result<Tensor> {
    x.abs()?.mean_all()
}

/// Scalar value of a single-element tensor as `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    x.to_dtype(DType::F64)?.to_scalar::<f64>()
}
