use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape5, Tensor5};

/// Fully connected layer on `(N, C, 1, 1, 1)` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in, 1, 1, 1)`.
    pub weight: Tensor5,
    /// `(1, out, 1, 1, 1)`.
    pub bias: Tensor5,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: Tensor5::kaiming_init((c_out, c_in, 1, 1, 1), c_in, rng)?.requires_grad(),
            bias: Tensor5::zeros((1, c_out, 1, 1, 1))?.requires_grad(),
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        let s = x.shape();
        if s.c != self.c_in() || s.volume() != 1 {
            return Err(Error::ShapeMismatch { expected: Shape5::new(s.n, self.c_in(), 1, 1, 1), actual: s });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor5) -> Result<Tensor5> {
        self.check_input(x)?;
        let n = x.shape().n;
        let (ci, co) = (self.c_in(), self.c_out());
        let mut out = Tensor5::zeros((n, co, 1, 1, 1))?;
        for b in 0..n {
            out.data_mut()[b * co..(b + 1) * co].copy_from_slice(self.bias.data());
        }
        gemm(n, ci, co, 1.0, x.data(), false, self.weight.data(), true, 1.0, out.data_mut());
        out.ensure_finite("linear")?;
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, out_grad: &Tensor5, x: &Tensor5) -> Result<Tensor5> {
        self.check_input(x)?;
        let n = x.shape().n;
        let (ci, co) = (self.c_in(), self.c_out());
        if out_grad.shape() != Shape5::new(n, co, 1, 1, 1) {
            return Err(Error::ShapeMismatch { expected: Shape5::new(n, co, 1, 1, 1), actual: out_grad.shape() });
        }
        gemm(co, n, ci, 1.0, out_grad.data(), true, x.data(), false, 1.0, self.weight.grad_mut());
        let bg = self.bias.grad_mut();
        for b in 0..n {
            for (acc, g) in bg.iter_mut().zip(&out_grad.data()[b * co..(b + 1) * co]) {
                *acc += g;
            }
        }
        let mut dx = Tensor5::zeros(x.shape())?;
        gemm(n, co, ci, 1.0, out_grad.data(), false, self.weight.data(), false, 0.0, dx.data_mut());
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map() {
        let mut l = Linear::new(2, 3, &mut Rng::new(0)).unwrap();
        l.weight = Tensor5::from_vec((3, 2, 1, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        l.bias = Tensor5::from_vec((1, 3, 1, 1, 1), vec![0.5, 0.0, -1.0]).unwrap();
        let x = Tensor5::from_vec((1, 2, 1, 1, 1), vec![1.0, -1.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), &[-0.5, -1.0, -2.0]);
        assert_eq!(l.param_count(), 9);
    }
}
