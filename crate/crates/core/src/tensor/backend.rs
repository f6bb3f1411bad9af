use super::kernels::{self, Padding};
use super::{Result, Tensor, TensorError};

/// The op set shared by all three evaluation modes. Network code written
/// against this trait can be evaluated plainly, recorded on a [`super::Tape`]
/// or pushed through dual numbers without change.
pub trait Backend {
    type Value: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// Primal value behind a handle.
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn square(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn silu(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value>;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        k: &Self::Value,
        b: Option<&Self::Value>,
        pad: Padding,
    ) -> Result<Self::Value>;
    fn group_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        groups: usize,
    ) -> Result<Self::Value>;
    /// FiLM modulation `x·(1 + scale_c) + shift_c` on a `[C, H, W]` tensor.
    fn channel_affine(&mut self, x: &Self::Value, scale: &Self::Value, shift: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn upsample2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn downsample2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn stop_gradient(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

pub(crate) fn checked_div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernels::binary("div", a, b, |x, y| x / y)?.check_finite("div")
}

/// Plain evaluation: handles are the tensors themselves.
#[derive(Debug, Default, Clone, Copy)]
pub struct EvalMode;

impl Backend for EvalMode {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::binary("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::binary("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::binary("mul", a, b, |x, y| x * y)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        checked_div(a, b)
    }

    fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(|v| v * v))
    }

    fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(kernels::silu))
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        kernels::linear(x, w, b)
    }

    fn conv2d(&mut self, x: &Tensor, k: &Tensor, b: Option<&Tensor>, pad: Padding) -> Result<Tensor> {
        kernels::conv2d(x, k, b, pad)
    }

    fn group_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
        Ok(kernels::group_norm(x, gamma, beta, groups)?.0)
    }

    fn channel_affine(&mut self, x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        kernels::channel_affine(x, scale, shift)
    }

    fn concat_channels(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        kernels::concat_channels(parts)
    }

    fn upsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::upsample2(x)
    }

    fn downsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::downsample2(x)
    }

    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(x.sum()))
    }

    fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return Err(TensorError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        Ok(Tensor::scalar(x.sum() / x.len() as f64))
    }

    fn stop_gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}
