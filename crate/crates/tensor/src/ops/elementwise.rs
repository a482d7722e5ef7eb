use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape of the first operand")
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(value, vec![a, b], Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(|args| {
                let (x, y) = (args.inputs[0], args.inputs[1]);
                vec![
                    args.needs[0].then(|| zip_map(args.grad, y, |g, y| g * y)),
                    args.needs[1].then(|| zip_map(args.grad, x, |g, x| g * x)),
                ]
            }),
        ))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        self.record(value, vec![x], Box::new(move |args| vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let x = args.inputs[0];
                vec![Some(zip_map(args.grad, x, |g, v| if v > T::zero() { g } else { g * s }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.record(
            value,
            vec![x],
            Box::new(|args| vec![Some(zip_map(args.grad, args.output, |g, y| g * y * (T::one() - y)))]),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.record(
            value,
            vec![x],
            Box::new(|args| vec![Some(zip_map(args.grad, args.output, |g, y| g * (T::one() - y * y)))]),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.record(
            value,
            vec![x],
            Box::new(|args| vec![Some(zip_map(args.grad, args.inputs[0], |g, v| g * sigmoid(v)))]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            value,
            vec![x],
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_loss("l1_loss", a, b, None, Penalty::Abs)
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_loss("mse_loss", a, b, None, Penalty::Square)
    }

    /// `sum(w * |a - b|) / sum(w)` with a constant weight tensor shaped like `a`.
    /// Returns zero when the weights sum to zero.
    pub fn l1_loss_weighted(&mut self, a: Var, b: Var, w: &Tensor<T>) -> Result<Var> {
        self.weighted_loss("l1_loss", a, b, Some(w), Penalty::Abs)
    }

    pub fn mse_loss_weighted(&mut self, a: Var, b: Var, w: &Tensor<T>) -> Result<Var> {
        self.weighted_loss("mse_loss", a, b, Some(w), Penalty::Square)
    }

    fn weighted_loss(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        w: Option<&Tensor<T>>,
        penalty: Penalty,
    ) -> Result<Var> {
        same_shape(self, op, a, b)?;
        let n = self.value(a).numel();
        let w: Tensor<T> = match w {
            Some(w) if w.shape() != self.shape(a) => return Err(TensorError::shape(op, self.shape(a), w.shape())),
            Some(w) => w.clone(),
            None => Tensor::ones(self.shape(a)),
        };
        let wsum = w.sum();
        let norm = if wsum > T::zero() { T::one() / wsum } else { T::zero() };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut total = T::zero();
        for i in 0..n {
            let d = av[i] - bv[i];
            total += w.data()[i] * penalty.value(d);
        }
        let value = Tensor::scalar(total * norm);
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(move |args| {
                let g = args.grad.item() * norm;
                let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
                let da = Tensor::from_fn(args.inputs[0].shape(), |i| g * w.data()[i] * penalty.slope(av[i] - bv[i]));
                let db = args.needs[1].then(|| da.map(|v| -v));
                vec![Some(da), db]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
enum Penalty {
    Abs,
    Square,
}

impl Penalty {
    fn value<T: Scalar>(self, d: T) -> T {
        match self {
            Penalty::Abs => d.abs(),
            Penalty::Square => d * d,
        }
    }

    fn slope<T: Scalar>(self, d: T) -> T {
        match self {
            Penalty::Abs => {
                if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Penalty::Square => d + d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(sigmoid(-1000.0f32).is_finite());
    }

    #[test]
    fn losses_closed_form() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 3], 0.7));
        let b = tape.constant(Tensor::full(&[2, 3], 0.5));
        let l1 = tape.l1_loss(a, b).unwrap();
        let l2 = tape.mse_loss(a, b).unwrap();
        assert!((tape.value(l1).item() - 0.2).abs() < 1e-12);
        assert!((tape.value(l2).item() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn weighted_loss_ignores_zero_weight_entries() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 100.0]).unwrap(), true);
        let b = tape.constant(Tensor::new(vec![4], vec![0.0, 2.0, 3.0, 0.0]).unwrap());
        let w = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let l = tape.l1_loss_weighted(a, b, &w).unwrap();
        assert!((tape.value(l).item() - 1.0 / 3.0).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data()[3], 0.0);
    }
}
