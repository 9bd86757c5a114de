//! Layers used by the generator and discriminators.
//!
//! Sequence tensors are time-major, `[batch, time, channels]`; 2-D feature
//! maps are `[batch, height, width, channels]`. Convolutions are lowered to
//! im2col plus a single matmul so their backward passes stay matmuls too.
//! Kernels are stored tap-major as `[taps * in_channels, out_channels]`.

use candle_core::{Result, Tensor, D};

use super::ops::{add_channel_bias, conv2d_nhwc, leaky_relu, Conv2dGeom};
use super::params::ParamStore;

/// Every `stride`-th slice along `dim`, starting at `start`, `count` slices.
pub fn take_strided(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return x.narrow(dim, start, count);
    }
    let avail = x.dim(dim)?;
    let need = start + stride * count;
    let x = if need > avail {
        x.pad_with_zeros(dim, 0, need - avail)?
    } else {
        x.clone()
    };
    let part = x.narrow(dim, start, stride * count)?;
    let mut dims = part.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, stride);
    part.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

fn weight_norm(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_keepdim(0)?.affine(1.0, 1e-12)?.sqrt()?;
    v.broadcast_mul(&g.broadcast_div(&norm)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self::dilated(kernel, 1)
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation: 1,
        }
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Plain(Tensor),
    WeightNorm { v: Tensor, g: Tensor },
}

impl Kernel {
    fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cout: usize,
        weight_norm: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (rows as f64).sqrt();
        if weight_norm {
            let v = store
                .uniform(&format!("{name}.weight_v"), &[rows, cout], bound)
                .map_err(to_candle)?;
            let norms = v.sqr()?.sum_keepdim(0)?.sqrt()?;
            let g = store
                .from_values(
                    &format!("{name}.weight_g"),
                    &[1, cout],
                    norms.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?,
                )
                .map_err(to_candle)?;
            Ok(Kernel::WeightNorm { v, g })
        } else {
            let w = store
                .uniform(&format!("{name}.weight"), &[rows, cout], bound)
                .map_err(to_candle)?;
            Ok(Kernel::Plain(w))
        }
    }

    fn weight(&self) -> Result<Tensor> {
        match self {
            Kernel::Plain(w) => Ok(w.clone()),
            Kernel::WeightNorm { v, g } => weight_norm(v, g),
        }
    }
}

pub(crate) fn to_candle(e: crate::Error) -> candle_core::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => candle_core::Error::Msg(other.to_string()),
    }
}

/// 1-D convolution over the time axis of `[B, T, C]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    kernel: Kernel,
    bias: Option<Tensor>,
    spec: ConvSpec,
    cin: usize,
    cout: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        weight_norm: bool,
    ) -> Result<Self> {
        let kernel = Kernel::new(store, name, spec.kernel * cin, cout, weight_norm)?;
        let bound = 1.0 / ((spec.kernel * cin) as f64).sqrt();
        let bias = store
            .uniform(&format!("{name}.bias"), &[cout], bound)
            .map_err(to_candle)?;
        Ok(Self {
            kernel,
            bias: Some(bias),
            spec,
            cin,
            cout,
        })
    }

    /// Point-wise (kernel 1) projection.
    pub fn linear(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(store, name, cin, cout, ConvSpec::same(1), false)
    }

    /// Replaces the kernel and bias with constants (for tests and for
    /// zero-initialised output heads).
    pub fn fill(&mut self, store: &mut ParamStore, name: &str, weight: f64, bias: f64) -> Result<()> {
        let w = store
            .constant(&format!("{name}.weight"), &[self.spec.kernel * self.cin, self.cout], weight)
            .map_err(to_candle)?;
        let b = store
            .constant(&format!("{name}.bias"), &[self.cout], bias)
            .map_err(to_candle)?;
        self.kernel = Kernel::Plain(w);
        self.bias = Some(b);
        Ok(())
    }

    pub fn out_len(&self, t: usize) -> usize {
        let padded = t + 2 * self.spec.padding;
        if padded < self.spec.span() {
            0
        } else {
            (padded - self.spec.span()) / self.spec.stride + 1
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        if c != self.cin {
            candle_core::bail!("conv1d: expected {} input channels, got {c}", self.cin);
        }
        let t_out = self.out_len(t);
        if t_out == 0 {
            candle_core::bail!("conv1d: input of {t} frames is shorter than the kernel span");
        }
        let w = self.kernel.weight()?;
        let mut y = if self.spec.kernel == 1 && self.spec.stride == 1 && self.spec.padding == 0 {
            x.reshape((b * t, c))?.matmul(&w)?
        } else {
            let geom = Conv2dGeom {
                kernel: (1, self.spec.kernel),
                stride: (1, self.spec.stride),
                dilation: (1, self.spec.dilation),
                padding: (0, self.spec.padding),
            };
            conv2d_nhwc(&x.unsqueeze(1)?, &w, geom)?.reshape((b * t_out, self.cout))?
        };
        if let Some(bias) = &self.bias {
            y = add_channel_bias(&y, bias)?;
        }
        y.reshape((b, t_out, self.cout))
    }
}

/// Transposed 1-D convolution, lowered to zero insertion followed by a
/// stride-1 convolution (the stored kernel is the flipped transposed one).
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    conv: Conv1d,
    stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        assert!(padding < kernel, "padding must be smaller than the kernel");
        let spec = ConvSpec {
            kernel,
            stride: 1,
            padding: kernel - 1 - padding,
            dilation: 1,
        };
        Ok(Self {
            conv: Conv1d::new(store, name, cin, cout, spec, false)?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let up = if self.stride == 1 {
            x.clone()
        } else {
            let zeros = x.zeros_like()?;
            let mut parts = vec![x.unsqueeze(2)?];
            for _ in 1..self.stride {
                parts.push(zeros.unsqueeze(2)?);
            }
            Tensor::cat(&parts, 2)?
                .reshape((b, t * self.stride, c))?
                .narrow(1, 0, (t - 1) * self.stride + 1)?
        };
        self.conv.forward(&up)
    }
}

/// Depth-wise convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / (kernel as f64).sqrt();
        let weight = store
            .uniform(&format!("{name}.weight"), &[kernel, channels], bound)
            .map_err(to_candle)?;
        let bias = store
            .uniform(&format!("{name}.bias"), &[channels], bound)
            .map_err(to_candle)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let pad = (self.kernel - 1) / 2;
        let xp = x.pad_with_zeros(1, pad, self.kernel - 1 - pad)?;
        let mut acc = xp.narrow(1, 0, t)?.broadcast_mul(&self.weight.get(0)?)?;
        for k in 1..self.kernel {
            acc = (acc + xp.narrow(1, k, t)?.broadcast_mul(&self.weight.get(k)?)?)?;
        }
        acc.broadcast_add(&self.bias)
    }
}

/// Normalisation over the channel (last) dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store
                .constant(&format!("{name}.gamma"), &[channels], 1.0)
                .map_err(to_candle)?,
            beta: store
                .constant(&format!("{name}.beta"), &[channels], 0.0)
                .map_err(to_candle)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Global response normalisation: per-channel L2 norm over time, divided by
/// its channel mean, with zero-initialised gain and bias.
#[derive(Debug, Clone)]
pub struct Grn {
    gamma: Tensor,
    beta: Tensor,
}

pub const GRN_EPS: f64 = 1e-6;

impl Grn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store
                .constant(&format!("{name}.gamma"), &[channels], 0.0)
                .map_err(to_candle)?,
            beta: store
                .constant(&format!("{name}.beta"), &[channels], 0.0)
                .map_err(to_candle)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gx = x.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
        let nx = gx.broadcast_div(&gx.mean_keepdim(2)?.affine(1.0, GRN_EPS)?)?;
        let scaled = x.broadcast_mul(&nx)?.broadcast_mul(&self.gamma)?;
        (scaled.broadcast_add(&self.beta)? + x)?.contiguous()
    }
}

/// ConvNeXt-V2 block: depth-wise conv, LayerNorm, point-wise expansion, GELU,
/// GRN, point-wise projection, residual.
#[derive(Debug, Clone)]
pub struct ConvNeXtBlock {
    dwconv: DepthwiseConv1d,
    norm: LayerNorm,
    pw1: Conv1d,
    grn: Grn,
    pw2: Conv1d,
}

impl ConvNeXtBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        expansion: usize,
    ) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            dwconv: DepthwiseConv1d::new(store, &format!("{name}.dwconv"), channels, kernel)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            pw1: Conv1d::linear(store, &format!("{name}.pwconv1"), channels, hidden)?,
            grn: Grn::new(store, &format!("{name}.grn"), hidden)?,
            pw2: Conv1d::linear(store, &format!("{name}.pwconv2"), hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dwconv.forward(x)?;
        let h = self.norm.forward(&h)?;
        let h = self.pw1.forward(&h)?.gelu_erf()?;
        let h = self.grn.forward(&h)?;
        let h = self.pw2.forward(&h)?;
        x + h
    }
}

/// Residual block of dilated kernel-3 convolutions (dilations 1 and 3), each
/// preceded by a leaky ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    convs: Vec<Conv1d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let convs = [1, 3]
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv1d::new(
                    store,
                    &format!("{name}.convs.{i}"),
                    channels,
                    channels,
                    ConvSpec::dilated(3, d),
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            let h = conv.forward(&leaky_relu(&x, 0.1)?)?;
            x = (x + h)?;
        }
        Ok(x)
    }
}

/// A feature-extraction block: ConvNeXt-V2, or a residual block of the same
/// width when ConvNeXt is ablated.
#[derive(Debug, Clone)]
pub enum FeatureBlock {
    ConvNeXt(ConvNeXtBlock),
    Residual(ResBlock),
}

impl FeatureBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        use_convnext: bool,
        kernel: usize,
        expansion: usize,
    ) -> Result<Self> {
        if use_convnext {
            Ok(Self::ConvNeXt(ConvNeXtBlock::new(store, name, channels, kernel, expansion)?))
        } else {
            Ok(Self::Residual(ResBlock::new(store, name, channels)?))
        }
    }

    pub fn is_convnext(&self) -> bool {
        matches!(self, Self::ConvNeXt(_))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::ConvNeXt(b) => b.forward(x),
            Self::Residual(b) => b.forward(x),
        }
    }
}

/// Single-head pre-norm self-attention over time with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: LayerNorm,
    qkv: Conv1d,
    out: Conv1d,
    channels: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            qkv: Conv1d::linear(store, &format!("{name}.qkv"), channels, 3 * channels)?,
            out: Conv1d::linear(store, &format!("{name}.out"), channels, channels)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let q = qkv.narrow(2, 0, c)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.contiguous()?;
        let scores = q.matmul(&k.t()?)?.affine(1.0 / (c as f64).sqrt(), 0.0)?;
        let attn = super::ops::softmax(&scores, 2)?;
        let h = attn.matmul(&v)?;
        x + self.out.forward(&h)?
    }
}

/// 2-D convolution over `[B, H, W, C]` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    kernel: Kernel,
    bias: Tensor,
    size: (usize, usize),
    stride: (usize, usize),
    dilation: (usize, usize),
    padding: (usize, usize),
    cin: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        size: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
        weight_norm: bool,
    ) -> Result<Self> {
        let rows = size.0 * size.1 * cin;
        let kernel = Kernel::new(store, name, rows, cout, weight_norm)?;
        let bias = store
            .uniform(&format!("{name}.bias"), &[cout], 1.0 / (rows as f64).sqrt())
            .map_err(to_candle)?;
        Ok(Self {
            kernel,
            bias,
            size,
            stride,
            dilation,
            padding,
            cin,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(3)?;
        if c != self.cin {
            candle_core::bail!("conv2d: expected {} channels, got {c}", self.cin);
        }
        let geom = Conv2dGeom {
            kernel: self.size,
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        };
        add_channel_bias(&conv2d_nhwc(x, &self.kernel.weight()?, geom)?, &self.bias)
    }

    /// Same output as [`Conv2d::forward`] with parameters treated as
    /// constants, so no gradient reaches them.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let geom = Conv2dGeom {
            kernel: self.size,
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        };
        add_channel_bias(&conv2d_nhwc(x, &self.kernel.weight()?.detach(), geom)?, &self.bias.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn direct_conv1d(
        x: &[Vec<f64>],
        w: &[f64],
        bias: &[f64],
        cin: usize,
        cout: usize,
        spec: ConvSpec,
    ) -> Vec<Vec<f64>> {
        // x: [T][C]; w: [(k*cin + c) * cout + o]
        let t = x.len();
        let t_out = (t + 2 * spec.padding - spec.span()) / spec.stride + 1;
        let mut out = vec![vec![0.0; cout]; t_out];
        for (to, row) in out.iter_mut().enumerate() {
            for (o, v) in row.iter_mut().enumerate() {
                let mut acc = bias[o];
                for k in 0..spec.kernel {
                    let pos = (to * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
                    if pos < 0 || pos as usize >= t {
                        continue;
                    }
                    for c in 0..cin {
                        acc += x[pos as usize][c] * w[(k * cin + c) * cout + o];
                    }
                }
                *v = acc;
            }
        }
        out
    }

    #[test]
    fn conv1d_matches_direct_loop() {
        let mut store = ParamStore::with_dtype(3, DType::F64);
        let specs = [
            ConvSpec::same(3),
            ConvSpec::dilated(3, 3),
            ConvSpec::strided(4, 2, 1),
            ConvSpec::strided(5, 3, 2),
        ];
        for (i, spec) in specs.into_iter().enumerate() {
            let conv = Conv1d::new(&mut store, &format!("c{i}"), 3, 2, spec, false).unwrap();
            let xs: Vec<Vec<f64>> = (0..11)
                .map(|t| (0..3).map(|c| ((t * 7 + c * 3) % 5) as f64 - 2.0).collect())
                .collect();
            let flat: Vec<f64> = xs.iter().flatten().cloned().collect();
            let x = Tensor::from_vec(flat, (1, 11, 3), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let w = store.get(&format!("c{i}.weight")).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = store.get(&format!("c{i}.bias")).unwrap().to_vec1::<f64>().unwrap();
            let expect = direct_conv1d(&xs, &w, &b, 3, 2, spec);
            assert_eq!(y.len(), expect.len());
            for (a, e) in y.iter().flatten().zip(expect.iter().flatten()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_length() {
        let mut store = ParamStore::new(1);
        let up = ConvTranspose1d::new(&mut store, "up", 4, 4, 4, 2, 1).unwrap();
        let x = Tensor::ones((2, 7, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[2, 14, 4]);
        let mut store = ParamStore::new(1);
        let down = Conv1d::new(&mut store, "d", 4, 4, ConvSpec::strided(4, 2, 1), false).unwrap();
        assert_eq!(down.forward(&x.pad_with_zeros(1, 0, 1).unwrap()).unwrap().dims(), &[2, 4, 4]);
    }

    #[test]
    fn conv2d_shapes() {
        let mut store = ParamStore::new(1);
        let conv = Conv2d::new(&mut store, "c", 2, 3, (3, 9), (1, 2), (2, 1), (2, 4), true).unwrap();
        let x = Tensor::ones((1, 10, 33, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 10, 17, 3]);
    }

    #[test]
    fn grn_zero_init_is_identity_and_finite_on_zeros() {
        let mut store = ParamStore::new(1);
        let grn = Grn::new(&mut store, "g", 4).unwrap();
        let x = Tensor::zeros((1, 5, 4), DType::F32, &Device::Cpu).unwrap();
        let y = grn.forward(&x).unwrap();
        assert_eq!(y.sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let x = Tensor::arange(0f32, 20.0, &Device::Cpu).unwrap().reshape((1, 5, 4)).unwrap();
        let y = grn.forward(&x).unwrap();
        assert_eq!(y.to_vec3::<f32>().unwrap(), x.to_vec3::<f32>().unwrap());
    }
}
