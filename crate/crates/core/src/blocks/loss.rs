use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Tolerance on per-pixel probability sums.
pub const NORMALIZATION_TOL: f64 = 1e-4;

/// Checks that `probs [K, H, W]` sums to one over classes at every pixel.
pub fn check_normalized<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    let (k, h, w) = probs.dims3("probabilities")?;
    let n = h * w;
    let d = probs.data();
    for i in 0..n {
        let s: f64 = (0..k).map(|c| d[c * n + i].to_f64_lossy()).sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("class probabilities at pixel {i} sum to {s}")));
        }
    }
    Ok(())
}

/// `1 − (1/K) Σ_c (2 Σ_i p·t + ε) / (Σ_i p + Σ_i t + ε)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(probs) != target.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("probabilities {:?} vs target {:?}", g.shape(probs), target.shape()),
        ));
    }
    check_normalized(g.value(probs))?;
    let k = target.shape()[0];
    let per = target.len() / k;
    let eps = T::of(DICE_EPS);
    let t_sums: Vec<T> = target.data().chunks(per).map(|c| c.iter().copied().sum::<T>() + eps).collect();

    let t = g.constant(target.clone());
    let pt = g.mul(probs, t)?;
    let inter = g.sum_keep0(pt);
    let twice = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(twice, eps);
    let p_sums = g.sum_keep0(probs);
    let t_sums = g.constant(Tensor::new(&[k], t_sums)?);
    let den = g.add(p_sums, t_sums)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio);
    let neg = g.scale(mean, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(p: Tensor<f64>, t: Tensor<f64>) -> f64 {
        let mut g = Graph::inference();
        let pv = g.constant(p);
        let l = dice_loss(&mut g, pv, &t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn perfect_match_is_near_zero() {
        // 2 classes, 4 pixels
        let t = Tensor::new(&[2, 1, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(loss_of(t.clone(), t) <= 1e-4);
    }

    #[test]
    fn disjoint_is_near_one() {
        let t = Tensor::new(&[2, 1, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = Tensor::new(&[2, 1, 4], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(loss_of(p, t) >= 1.0 - 1e-3);
    }

    #[test]
    fn half_probability_on_target_region() {
        // class 0 target covers A = 4 pixels with p = 0.5 there, 0 elsewhere;
        // class 1 takes the complement so each pixel still sums to one.
        let t = Tensor::new(&[2, 1, 8], [[1.0; 4], [0.0; 4], [0.0; 4], [1.0; 4]].concat()).unwrap();
        let p = Tensor::new(&[2, 1, 8], [[0.5; 4], [0.0; 4], [0.5; 4], [1.0; 4]].concat()).unwrap();
        let mut g = Graph::inference();
        let pv = g.constant(p);
        let l = dice_loss(&mut g, pv, &t).unwrap();
        let eps = DICE_EPS;
        let d0 = (2.0 * 2.0 + eps) / (2.0 + 4.0 + eps);
        assert!((d0 - 2.0 / 3.0).abs() < 1e-5);
        let d1 = (2.0 * 4.0 + eps) / (6.0 + 4.0 + eps);
        assert!((g.value(l).item() - (1.0 - (d0 + d1) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_and_mismatched() {
        let t = Tensor::<f64>::zeros(&[2, 1, 2]);
        let mut g = Graph::inference();
        let p = g.constant(Tensor::full(&[2, 1, 2], 0.3));
        assert!(matches!(dice_loss(&mut g, p, &t), Err(Error::Contract(_))));
        let q = g.constant(Tensor::full(&[2, 1, 3], 0.5));
        assert!(matches!(dice_loss(&mut g, q, &t), Err(Error::Shape { .. })));
    }
}
