//! Inverted dropout with a caller-supplied RNG for reproducible masks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::autograd::Backward;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

use super::Mode;

pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        Ok(Dropout { p })
    }

    /// Train mode zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`; eval mode is the identity.
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Tensor<T> {
        if mode == Mode::Eval || self.p == 0.0 {
            return x.clone();
        }
        let scale = T::from_f64(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < self.p {
                    T::ZERO
                } else {
                    scale
                }
            })
            .collect();
        let data: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Tensor::from_op(
            data,
            x.shape(),
            vec![x.clone()],
            Box::new(DropoutBackward {
                mask: Arc::new(mask),
            }),
        )
    }
}

struct DropoutBackward<T> {
    mask: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for DropoutBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| grad.iter().zip(self.mask.iter()).map(|(&g, &m)| g * m).collect())]
    }
}
