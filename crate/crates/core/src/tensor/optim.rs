use super::Tensor;
use crate::error::{Error, Result};

/// One parameter slot for [`sgd_momentum_step`].
pub struct SgdParam<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub velocity: &'a mut Tensor,
    /// Weight decay applies only where this is set (conv and linear weights).
    pub decay: bool,
}

/// Momentum SGD without Nesterov:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
///
/// All gradients are checked before any parameter moves, so a non-finite
/// gradient leaves every slot untouched.
pub fn sgd_momentum_step(params: &mut [SgdParam<'_>], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for p in params.iter() {
        if p.value.dims() != p.grad.dims() || p.value.dims() != p.velocity.dims() {
            return Err(Error::shape(format!("sgd slot `{}`", p.name), p.value.dims(), p.grad.dims()));
        }
        if !p.grad.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of `{}`", p.name),
            });
        }
    }
    for p in params.iter_mut() {
        let wd = if p.decay { weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        for ((w, v), g) in values.iter_mut().zip(p.velocity.data_mut()).zip(p.grad.data()) {
            *v = momentum * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f64, mom: f64, wd: f64, decay: bool) {
        let mut slots = [SgdParam {
            name: "p",
            value: p,
            grad: g,
            velocity: v,
            decay,
        }];
        sgd_momentum_step(&mut slots, lr, mom, wd).unwrap();
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::from_fn(&[4], |i| i as f64);
        let g = Tensor::from_fn(&[4], |i| 0.5 - i as f64);
        let mut v = Tensor::zeros(&[4]);
        let before = p.clone();
        step(&mut p, &g, &mut v, 0.1, 0.0, 0.0, true);
        for i in 0..4 {
            assert_eq!(p.data()[i], before.data()[i] - 0.1 * g.data()[i]);
        }
    }

    #[test]
    fn two_momentum_steps_move_by_1_9_g() {
        // v1 = g, v2 = 0.9 g + g; the second step moves by 1.9 g
        let g = Tensor::from_fn(&[3], |i| [0.25, -1.5, 2.0][i]);
        let mut p = Tensor::zeros(&[3]);
        let mut v = Tensor::zeros(&[3]);
        step(&mut p, &g, &mut v, 1.0, 0.9, 0.0, true);
        let after_one = p.clone();
        step(&mut p, &g, &mut v, 1.0, 0.9, 0.0, true);
        for i in 0..3 {
            let delta = p.data()[i] - after_one.data()[i];
            assert!((delta + 1.9 * g.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_slot_ignores_weight_decay() {
        let g = Tensor::from_fn(&[5], |i| (i as f64).sin());
        let mut a = Tensor::full(&[5], 1.3);
        let mut b = a.clone();
        let (mut va, mut vb) = (Tensor::zeros(&[5]), Tensor::zeros(&[5]));
        step(&mut a, &g, &mut va, 0.1, 0.9, 5e-4, false);
        step(&mut b, &g, &mut vb, 0.1, 0.9, 0.0, false);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let mut slots = [SgdParam {
            name: "stage1.conv.weight",
            value: &mut p,
            grad: &g,
            velocity: &mut v,
            decay: true,
        }];
        let err = sgd_momentum_step(&mut slots, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("stage1.conv.weight"));
        assert_eq!(p, Tensor::zeros(&[2]));
    }
}
