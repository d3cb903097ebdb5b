//! Dense numeric kernel: tensors, softmax / cross-entropy, affine maps,
//! central finite differences and the pinned PRNG.

mod rng;
mod tensor;

pub use rng::{derive_seed, rng_shuffle, splitmix64, Rng};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-4;

/// Floor applied to the target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::Shape(format!(
            "softmax expects rank 1, got shape {:?}",
            logits.shape()
        )));
    }
    Tensor::vector(softmax_slice(logits.data())?)
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// `-ln probs[target]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, target: usize) -> Result<f64> {
    cross_entropy_slice(probs.data(), target)
}

pub(crate) fn cross_entropy_slice(probs: &[f64], target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or(Error::OutOfRange {
        index: target,
        len: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `y = xᵀW + b` for `x` of length D, `W` of shape D×M and `b` of length M.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::Shape(format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (d, m) = (w.shape()[0], w.shape()[1]);
    if x.len() != d || b.len() != m {
        return Err(Error::Shape(format!(
            "affine: x has {} values, W is {d}x{m}, b has {}",
            x.len(),
            b.len()
        )));
    }
    let mut out = vec![0.0; m];
    affine_into(x.data(), w.data(), b.data(), &mut out);
    Tensor::vector(out)
}

/// Unchecked kernel behind [`affine`]; `w` is row-major `x.len() × out.len()`.
pub(crate) fn affine_into(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = out.len();
    out.copy_from_slice(b);
    for (xi, row) in x.iter().zip(w.chunks_exact(m)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);

        let p = softmax(&v(&[1000.0, 1000.0, 1000.0])).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let p = softmax(&v(&[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (x, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((x - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_slice(&[]), Err(Error::Empty(_))));
        assert!(matches!(softmax_slice(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = v(&[0.25; 4]);
        for t in 0..4 {
            assert!((cross_entropy(&uniform, t).unwrap() - 4f64.ln()).abs() < 1e-15);
        }
        assert_eq!(cross_entropy(&v(&[0.0, 1.0]), 1).unwrap(), 0.0);
        let ce = cross_entropy(&v(&[0.1, 0.7, 0.2]), 1).unwrap();
        assert!((ce - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, 4),
            Err(Error::OutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn cross_entropy_floor_keeps_loss_finite() {
        let ce = cross_entropy_slice(&[1.0, 0.0], 1).unwrap();
        assert!((ce - 300.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn affine_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(vec![2]);
        let x = v(&[1.0, 2.0]);
        assert_eq!(affine(&x, &eye, &zero_b).unwrap().data(), x.data());
        let b = v(&[3.0, 3.0]);
        assert_eq!(affine(&Tensor::zeros(vec![2]), &eye, &b).unwrap().data(), b.data());
        assert_eq!(affine(&x, &eye, &b).unwrap().data(), &[4.0, 5.0]);
        assert!(matches!(affine(&v(&[1.0]), &eye, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let sq = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>();
        let g = finite_diff_grad(sq, &v(&[1.0, -2.0]), FD_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] + 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 3.5, &v(&[0.3, 0.1, 9.0]), FD_STEP).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-9));

        let bad = finite_diff_grad(|_| f64::NAN, &v(&[0.0]), FD_STEP);
        assert!(matches!(bad, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        for trial in 0..10 {
            let n = 2 + trial % 6;
            let x = Tensor::vector((0..n).map(|_| 3.0 * rng.gaussian()).collect()).unwrap();
            let target = rng.below(n);
            let f = |t: &Tensor| {
                let p = softmax_slice(t.data()).unwrap();
                cross_entropy_slice(&p, target).unwrap()
            };
            let mut analytic = softmax_slice(x.data()).unwrap();
            analytic[target] -= 1.0;
            let numeric = finite_diff_grad(f, &x, FD_STEP).unwrap();
            for (a, n) in analytic.iter().zip(numeric.data()) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        proptest! {
            #[test]
            fn softmax_normalizes_and_is_shift_invariant(
                xs in prop::collection::vec(-50.0f64..50.0, 1..20),
                c in -500.0f64..500.0,
            ) {
                let p = softmax_slice(&xs).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
                let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
                let q = softmax_slice(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn cross_entropy_nonnegative(
                xs in prop::collection::vec(-20.0f64..20.0, 1..10),
                seed in any::<u64>(),
            ) {
                let p = softmax_slice(&xs).unwrap();
                let t = Rng::new(seed).below(p.len());
                prop_assert!(cross_entropy_slice(&p, t).unwrap() >= 0.0);
            }
        }
    }
}
