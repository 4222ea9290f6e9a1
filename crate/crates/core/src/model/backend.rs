//! Two evaluation back ends for the same network code: a plain forward pass
//! on owned tensors, and a recording pass on a [`Tape`] for training.

use crate::ad::{BoundParams, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{fastmath, Tensor};

/// Operations the coupling networks need. Parameter blocks are addressed by
/// their slice id in the member's [`ParamStore`].
pub trait Backend {
    type Value: Clone;

    fn value<'v>(&'v self, v: &'v Self::Value) -> Result<&'v Tensor>;
    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// `x * W + b` for parameter slices `weight` and `bias`.
    fn linear(&mut self, x: &Self::Value, weight: usize, bias: usize) -> Result<Self::Value>;
    fn tanh(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn columns(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `out[:, k] = a[:, index[k]]`.
    fn gather(&mut self, a: &Self::Value, index: &[usize]) -> Result<Self::Value>;
}

/// Forward-only evaluation straight from a parameter store.
pub struct EvalBackend<'a> {
    params: &'a ParamStore,
}

impl<'a> EvalBackend<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }
}

impl Backend for EvalBackend<'_> {
    type Value = Tensor;

    fn value<'v>(&'v self, v: &'v Tensor) -> Result<&'v Tensor> {
        Ok(v)
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn linear(&mut self, x: &Tensor, weight: usize, bias: usize) -> Result<Tensor> {
        let w = self.params.tensor(weight);
        crate::error::check_dim("linear layer input", w.rows(), x.cols())?;
        Ok(x.affine(&w, self.params.slice_values(bias)))
    }

    fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        fastmath::tanh_slice(x.data(), out.data_mut());
        Ok(out)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        crate::error::check_dim("elementwise add", a.len(), b.len())?;
        Ok(a.zip_map(b, |x, y| x + y))
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        crate::error::check_dim("elementwise product", a.len(), b.len())?;
        Ok(a.zip_map(b, |x, y| x * y))
    }

    fn columns(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        Ok(a.columns(start, len))
    }

    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        crate::error::check_dim("concat rows", a.rows(), b.rows())?;
        Ok(a.concat_cols(b))
    }

    fn gather(&mut self, a: &Tensor, index: &[usize]) -> Result<Tensor> {
        Ok(a.gather_cols(index))
    }
}

/// Records every operation on a tape so that parameter gradients can be
/// pulled back with [`Tape::backward`].
pub struct TapeBackend<'a> {
    tape: &'a mut Tape,
    params: &'a BoundParams,
}

impl<'a> TapeBackend<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a BoundParams) -> Self {
        Self { tape, params }
    }
}

impl Backend for TapeBackend<'_> {
    type Value = Var;

    fn value<'v>(&'v self, v: &'v Var) -> Result<&'v Tensor> {
        Ok(self.tape.value(*v)?)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    fn linear(&mut self, x: &Var, weight: usize, bias: usize) -> Result<Var> {
        Ok(self.tape.affine(*x, self.params.vars[weight], self.params.vars[bias])?)
    }

    fn tanh(&mut self, x: &Var) -> Result<Var> {
        Ok(self.tape.tanh(*x)?)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.tape.add(*a, *b)?)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.tape.mul(*a, *b)?)
    }

    fn columns(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        Ok(self.tape.columns(*a, start, len)?)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.tape.concat(*a, *b)?)
    }

    fn gather(&mut self, a: &Var, index: &[usize]) -> Result<Var> {
        Ok(self.tape.gather(*a, index)?)
    }
}
