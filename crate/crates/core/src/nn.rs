//! Minimal layer set over candle tensors. Parameters live in a
//! [`ParamStore`]; each layer keeps handles fetched at construction time.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride: 1, groups: 1 }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn params(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch / self.groups + self.out_ch
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(store, prefix, spec, None)
    }

    /// Same as [`Conv2d::new`] but with all weights and bias zero.
    pub fn zeroed(store: &mut ParamStore, prefix: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(store, prefix, spec, Some(Init::Zeros))
    }

    /// Fan-in initialization scaled down by `scale`.
    pub fn scaled(store: &mut ParamStore, prefix: &str, spec: ConvSpec, scale: f64) -> Result<Self> {
        let fan_in = spec.in_ch / spec.groups * spec.kernel * spec.kernel;
        Self::with_init(store, prefix, spec, Some(Init::Uniform(scale / (fan_in as f64).sqrt())))
    }

    fn with_init(store: &mut ParamStore, prefix: &str, spec: ConvSpec, init: Option<Init>) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = spec.in_ch / spec.groups * k * k;
        let init = init.unwrap_or(Init::fan_in(fan_in));
        let weight = store.get_or_init(
            &format!("{prefix}.weight"),
            &[spec.out_ch, spec.in_ch / spec.groups, k, k],
            init,
        )?;
        let bias = store.get_or_init(&format!("{prefix}.bias"), &[spec.out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, stride: spec.stride, padding: k / 2, groups: spec.groups })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = store.get_or_init(
            &format!("{prefix}.weight"),
            &[in_ch, out_ch, kernel, kernel],
            Init::fan_in(in_ch * kernel * kernel / 4),
        )?;
        let bias = store.get_or_init(&format!("{prefix}.bias"), &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 1, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// `y = x W + b` over the last axis, `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        Self::with_init(store, prefix, inp, out, bias, Init::fan_in(inp))
    }

    pub fn with_init(
        store: &mut ParamStore,
        prefix: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.get_or_init(&format!("{prefix}.weight"), &[inp, out], init)?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{prefix}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_weight(weight: Tensor) -> Self {
        Self { weight, bias: None }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().unwrap();
        let rows = x.elem_count() / inp;
        let y = x.reshape((rows, inp))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.get_or_init(&format!("{prefix}.gamma"), &[dim], Init::Const(1.0))?;
        let beta = store.get_or_init(&format!("{prefix}.beta"), &[dim], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.01)?)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// NCHW -> NHWC
pub fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

/// NHWC -> NCHW
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [-50., 0., 50.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_shapes() {
        let mut store = ParamStore::new(0, DType::F32);
        let c = Conv2d::new(&mut store, "c", ConvSpec::new(16, 32, 3).stride(2).groups(16)).unwrap();
        let x = Tensor::zeros((2, 16, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 32, 4, 4]);
        assert_eq!(store.num_elements(|_| true), ConvSpec::new(16, 32, 3).groups(16).params());
        let d = ConvTranspose2d::new(&mut store, "d", 32, 8, 3).unwrap();
        let y = Tensor::zeros((1, 32, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&y).unwrap().dims(), &[1, 8, 8, 10]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1f64, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn softplus_matches_closed_form() {
        let x = Tensor::new(&[-30f64, -1., 0., 1., 30.], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [-30f64, -1., 0., 1., 30.].iter().zip(y) {
            assert!((yi - (1.0 + xi.exp()).ln()).abs() < 1e-12);
        }
    }
}
