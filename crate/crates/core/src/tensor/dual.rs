//! Forward-mode differentiation with tensor-valued dual numbers.
//!
//! The tangent path never touches a tape: a JVP computed here is a plain
//! value and can be fed straight into a stop-gradient.

use super::backend::{checked_div, Backend};
use super::kernels::{self, Padding};
use super::{Result, Tensor, TensorError};

/// A primal tensor with its directional derivative. A missing tangent is an
/// exact zero and lets the kernels skip work for constants and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Option<Tensor>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "DualTensor::new",
                lhs: primal.shape().to_vec(),
                rhs: tangent.shape().to_vec(),
            });
        }
        Ok(Self { primal, tangent: Some(tangent) })
    }

    pub fn constant(primal: Tensor) -> Self {
        Self { primal, tangent: None }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    /// Materialized tangent (zeros for constants).
    pub fn tangent(&self) -> Tensor {
        self.tangent.clone().unwrap_or_else(|| Tensor::zeros(self.primal.shape()))
    }

    pub fn is_constant(&self) -> bool {
        self.tangent.is_none()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        let t = self.tangent.unwrap_or_else(|| Tensor::zeros(self.primal.shape()));
        (self.primal, t)
    }
}

fn add_opt(a: Option<Tensor>, b: Option<Tensor>) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(a), Some(b)) => Some(kernels::binary("add", &a, &b, |x, y| x + y)?),
    })
}

/// Tangent of an operand, broadcast to `shape` when the operand is a single
/// element being broadcast.
fn widen(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        t.clone()
    } else {
        Tensor::full(shape, t.item())
    }
}

/// Dual-number evaluation mode.
#[derive(Debug, Default, Clone, Copy)]
pub struct DualMode;

impl Backend for DualMode {
    type Value = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }

    fn value<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.primal
    }

    fn add(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = kernels::binary("add", &a.primal, &b.primal, |x, y| x + y)?;
        let ta = a.tangent.as_ref().map(|t| widen(t, p.shape()));
        let tb = b.tangent.as_ref().map(|t| widen(t, p.shape()));
        Ok(DualTensor { tangent: add_opt(ta, tb)?, primal: p })
    }

    fn sub(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = kernels::binary("sub", &a.primal, &b.primal, |x, y| x - y)?;
        let ta = a.tangent.as_ref().map(|t| widen(t, p.shape()));
        let tb = b.tangent.as_ref().map(|t| widen(t, p.shape()).map(|v| -v));
        Ok(DualTensor { tangent: add_opt(ta, tb)?, primal: p })
    }

    fn mul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = kernels::binary("mul", &a.primal, &b.primal, |x, y| x * y)?;
        let ta = match &a.tangent {
            Some(t) => Some(kernels::binary("mul", t, &b.primal, |x, y| x * y)?),
            None => None,
        };
        let tb = match &b.tangent {
            Some(t) => Some(kernels::binary("mul", &a.primal, t, |x, y| x * y)?),
            None => None,
        };
        let ta = ta.map(|t| widen(&t, p.shape()));
        let tb = tb.map(|t| widen(&t, p.shape()));
        Ok(DualTensor { tangent: add_opt(ta, tb)?, primal: p })
    }

    fn div(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = checked_div(&a.primal, &b.primal)?;
        // d(a/b) = (da - (a/b) db) / b
        let mut num = a.tangent.as_ref().map(|t| widen(t, p.shape()));
        if let Some(tb) = &b.tangent {
            let qtb = kernels::binary("mul", &p, tb, |x, y| -x * y)?;
            num = add_opt(num, Some(qtb))?;
        }
        let tangent = match num {
            Some(n) => Some(checked_div(&n, &b.primal)?),
            None => None,
        };
        Ok(DualTensor { primal: p, tangent })
    }

    fn square(&mut self, a: &DualTensor) -> Result<DualTensor> {
        let tangent = match &a.tangent {
            Some(t) => Some(t.zip_map(&a.primal, |d, x| 2.0 * x * d)?),
            None => None,
        };
        Ok(DualTensor { primal: a.primal.map(|v| v * v), tangent })
    }

    fn silu(&mut self, a: &DualTensor) -> Result<DualTensor> {
        let tangent = match &a.tangent {
            Some(t) => Some(t.zip_map(&a.primal, |d, x| kernels::silu_deriv(x) * d)?),
            None => None,
        };
        Ok(DualTensor { primal: a.primal.map(kernels::silu), tangent })
    }

    fn linear(&mut self, x: &DualTensor, w: &DualTensor, b: Option<&DualTensor>) -> Result<DualTensor> {
        let p = kernels::linear(&x.primal, &w.primal, b.map(|b| &b.primal))?;
        let mut t = match &x.tangent {
            Some(tx) => Some(kernels::linear(tx, &w.primal, None)?),
            None => None,
        };
        if let Some(tw) = &w.tangent {
            t = add_opt(t, Some(kernels::linear(&x.primal, tw, None)?))?;
        }
        if let Some(tb) = b.and_then(|b| b.tangent.as_ref()) {
            let rows = p.len() / tb.len();
            let data = tb.data().repeat(rows);
            t = add_opt(t, Some(Tensor::new(p.shape().to_vec(), data)?))?;
        }
        Ok(DualTensor { primal: p, tangent: t })
    }

    fn conv2d(&mut self, x: &DualTensor, k: &DualTensor, b: Option<&DualTensor>, pad: Padding) -> Result<DualTensor> {
        let p = kernels::conv2d(&x.primal, &k.primal, b.map(|b| &b.primal), pad)?;
        let mut t = match &x.tangent {
            Some(tx) => Some(kernels::conv2d(tx, &k.primal, None, pad)?),
            None => None,
        };
        if let Some(tk) = &k.tangent {
            t = add_opt(t, Some(kernels::conv2d(&x.primal, tk, None, pad)?))?;
        }
        if let Some(tb) = b.and_then(|b| b.tangent.as_ref()) {
            let bias_field = kernels::channel_scale_shift(&Tensor::zeros(p.shape()), None, Some(tb.data()));
            t = add_opt(t, Some(bias_field))?;
        }
        Ok(DualTensor { primal: p, tangent: t })
    }

    fn group_norm(&mut self, x: &DualTensor, gamma: &DualTensor, beta: &DualTensor, groups: usize) -> Result<DualTensor> {
        let (p, cache) = kernels::group_norm(&x.primal, &gamma.primal, &beta.primal, groups)?;
        let mut t = match &x.tangent {
            Some(tx) => {
                let dxhat = kernels::group_norm_normalized_tangent(&cache, tx);
                Some(kernels::channel_scale_shift(&dxhat, Some(gamma.primal.data()), None))
            }
            None => None,
        };
        if let Some(tg) = &gamma.tangent {
            t = add_opt(t, Some(kernels::channel_scale_shift(&cache.normalized, Some(tg.data()), None)))?;
        }
        if let Some(tb) = &beta.tangent {
            t = add_opt(t, Some(kernels::channel_scale_shift(&Tensor::zeros(p.shape()), None, Some(tb.data()))))?;
        }
        Ok(DualTensor { primal: p, tangent: t })
    }

    fn channel_affine(&mut self, x: &DualTensor, scale: &DualTensor, shift: &DualTensor) -> Result<DualTensor> {
        let p = kernels::channel_affine(&x.primal, &scale.primal, &shift.primal)?;
        let mut t = match &x.tangent {
            Some(tx) => {
                let s: Vec<f64> = scale.primal.data().iter().map(|v| 1.0 + v).collect();
                Some(kernels::channel_scale_shift(tx, Some(&s), None))
            }
            None => None,
        };
        if let Some(ts) = &scale.tangent {
            t = add_opt(t, Some(kernels::channel_scale_shift(&x.primal, Some(ts.data()), None)))?;
        }
        if let Some(tb) = &shift.tangent {
            t = add_opt(t, Some(kernels::channel_scale_shift(&Tensor::zeros(p.shape()), None, Some(tb.data()))))?;
        }
        Ok(DualTensor { primal: p, tangent: t })
    }

    fn concat_channels(&mut self, parts: &[&DualTensor]) -> Result<DualTensor> {
        let primals: Vec<&Tensor> = parts.iter().map(|p| &p.primal).collect();
        let p = kernels::concat_channels(&primals)?;
        let tangent = if parts.iter().all(|d| d.is_constant()) {
            None
        } else {
            let tangents: Vec<Tensor> = parts.iter().map(|d| d.tangent()).collect();
            let refs: Vec<&Tensor> = tangents.iter().collect();
            Some(kernels::concat_channels(&refs)?)
        };
        Ok(DualTensor { primal: p, tangent })
    }

    fn upsample2(&mut self, x: &DualTensor) -> Result<DualTensor> {
        let tangent = match &x.tangent {
            Some(t) => Some(kernels::upsample2(t)?),
            None => None,
        };
        Ok(DualTensor { primal: kernels::upsample2(&x.primal)?, tangent })
    }

    fn downsample2(&mut self, x: &DualTensor) -> Result<DualTensor> {
        let tangent = match &x.tangent {
            Some(t) => Some(kernels::downsample2(t)?),
            None => None,
        };
        Ok(DualTensor { primal: kernels::downsample2(&x.primal)?, tangent })
    }

    fn sum(&mut self, x: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: Tensor::scalar(x.primal.sum()),
            tangent: x.tangent.as_ref().map(|t| Tensor::scalar(t.sum())),
        })
    }

    fn mean(&mut self, x: &DualTensor) -> Result<DualTensor> {
        if x.primal.is_empty() {
            return Err(TensorError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        let n = x.primal.len() as f64;
        Ok(DualTensor {
            primal: Tensor::scalar(x.primal.sum() / n),
            tangent: x.tangent.as_ref().map(|t| Tensor::scalar(t.sum() / n)),
        })
    }

    fn stop_gradient(&mut self, x: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor::constant(x.primal.clone()))
    }
}

/// Directional derivative of `f` at `inputs` along `directions`:
/// returns `(f(inputs), d/ds f(inputs + s·directions) at s = 0)`.
pub fn jvp<F>(f: F, inputs: &[Tensor], directions: &[Tensor]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&mut DualMode, &[DualTensor]) -> Result<DualTensor>,
{
    if inputs.len() != directions.len() {
        return Err(TensorError::InvalidArgument {
            op: "jvp",
            msg: format!("{} inputs but {} directions", inputs.len(), directions.len()),
        });
    }
    let duals = inputs
        .iter()
        .zip(directions)
        .map(|(x, d)| DualTensor::new(x.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(f(&mut DualMode, &duals)?.into_parts())
}
