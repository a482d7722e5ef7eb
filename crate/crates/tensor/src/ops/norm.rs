use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which axes the normalization statistics are pooled over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per sample and channel, over H x W.
    Instance,
    /// Per channel, over N x H x W (always batch statistics; no running averages).
    Batch,
}

pub const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    /// Normalize NCHW activations and apply a per-channel affine `gamma, beta`.
    pub fn norm_layer(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("norm_layer")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::shape("norm_layer", self.shape(p), &[c]));
            }
        }
        let hw = h * w;
        // Each group is a list of contiguous HW planes sharing statistics.
        let groups: Vec<(usize, Vec<usize>)> = match kind {
            NormKind::Instance => (0..n * c).map(|p| (p % c, vec![p * hw])).collect(),
            NormKind::Batch => (0..c).map(|ch| (ch, (0..n).map(|i| (i * c + ch) * hw).collect())).collect(),
        };
        let eps = T::from_f64(NORM_EPS);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(groups.len());
        for (_, starts) in &groups {
            let count = T::from_f64((starts.len() * hw) as f64);
            let mean = starts.iter().map(|&s| xv[s..s + hw].iter().copied().sum::<T>()).sum::<T>() / count;
            let var = starts
                .iter()
                .map(|&s| xv[s..s + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                .sum::<T>()
                / count;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for &s in starts {
                for i in s..s + hw {
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for (ch, starts) in &groups {
            for &s in starts {
                for i in s..s + hw {
                    out[i] = xhat[i] * gv[*ch] + bv[*ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(
            value,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ((ch, starts), &is) in groups.iter().zip(&inv_std) {
                    let count = T::from_f64((starts.len() * hw) as f64);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for &s in starts {
                        for i in s..s + hw {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    dbeta[*ch] += sum_g;
                    dgamma[*ch] += sum_gx;
                    let k = gamma[*ch] * is / count;
                    for &s in starts {
                        for i in s..s + hw {
                            dx[i] = k * (count * g[i] - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::new(vec![n, c, h, w], dx).unwrap()),
                    args.needs[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
                    args.needs[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_of_constant_channel_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 4.2));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.norm_layer(x, g, b, NormKind::Instance).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_norm_pools_over_samples() {
        let mut tape = Tape::<f64>::new();
        // Two samples, each spatially constant but different: instance norm
        // zeroes both, batch norm separates them.
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.norm_layer(x, g, b, NormKind::Batch).unwrap();
        let d = tape.value(y).data();
        assert!(d[0] < -0.99 && d[3] > 0.99);
    }
}
