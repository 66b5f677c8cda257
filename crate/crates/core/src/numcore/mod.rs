//! Dense tensors, named parameter sets, a small reverse-mode tape and the
//! parameter-space arithmetic the learners are built from.

pub mod ctc;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Grad, Group, ParamEntry, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_sum_exp, Tensor};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a·x + b·y`, returning `a·x` or `b·y` untouched when the other weight is zero.
#[inline]
fn lincomb<T: Scalar>(a: T, x: T, b: T, y: T) -> T {
    if b == T::zero() {
        a * x
    } else if a == T::zero() {
        b * y
    } else {
        a * x + b * y
    }
}

/// Entrywise `a·p + b·q`.
pub fn axpy_combine<T: Scalar>(a: T, p: &ParamSet<T>, b: T, q: &ParamSet<T>) -> Result<ParamSet<T>> {
    p.check_compatible(q)?;
    let mut out = p.clone();
    for (o, e) in out.entries_mut().iter_mut().zip(q.entries()) {
        for (x, &y) in o.tensor.data_mut().iter_mut().zip(e.tensor.data()) {
            *x = lincomb(a, *x, b, y);
        }
    }
    Ok(out)
}

/// `(1 − η)·x + η·y` kept inside `[min(x, y), max(x, y)]`; exact at η ∈ {0, 1}.
#[inline]
pub fn convex_mix<T: Scalar>(x: T, y: T, eta: T) -> T {
    if eta == T::zero() {
        return x;
    }
    if eta == T::one() {
        return y;
    }
    let v = (T::one() - eta) * x + eta * y;
    v.max(x.min(y)).min(x.max(y))
}

/// One SGD update `p − α·g`. Entries whose mask is `false` are copied unchanged.
pub fn sgd_step<T: Scalar>(
    p: &ParamSet<T>,
    g: &Grad<T>,
    alpha: T,
    mask: Option<&[bool]>,
) -> Result<ParamSet<T>> {
    if !(alpha > T::zero()) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {alpha}")));
    }
    p.check_compatible(g)?;
    if let Some(m) = mask {
        if m.len() != p.len() {
            return Err(Error::StructuralMismatch(format!(
                "mask has {} flags for {} entries",
                m.len(),
                p.len()
            )));
        }
    }
    g.check_finite()?;
    let mut out = p.clone();
    for (k, (o, ge)) in out.entries_mut().iter_mut().zip(g.entries()).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        for (x, &d) in o.tensor.data_mut().iter_mut().zip(ge.tensor.data()) {
            *x = *x - alpha * d;
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// Central-difference gradient of `loss_fn` at `p`, one coordinate at a time.
pub fn finite_diff_grad<T, F>(loss_fn: F, p: &ParamSet<T>, eps: T) -> Result<Grad<T>>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let base = p.flat();
    let mut probe = p.clone();
    let mut grad = vec![T::zero(); base.len()];
    let two_eps = eps + eps;
    let mut work = base.clone();
    for k in 0..base.len() {
        work[k] = base[k] + eps;
        probe.set_flat(&work)?;
        let up = loss_fn(&probe)?;
        work[k] = base[k] - eps;
        probe.set_flat(&work)?;
        let down = loss_fn(&probe)?;
        work[k] = base[k];
        grad[k] = (up - down) / two_eps;
    }
    let mut out = p.zeros_like();
    out.set_flat(&grad)?;
    Ok(out)
}

/// `Σ g1 ⊙ g2` over every entry.
pub fn dot<T: Scalar>(g1: &Grad<T>, g2: &Grad<T>) -> Result<T> {
    g1.check_compatible(g2)?;
    Ok(g1
        .entries()
        .iter()
        .zip(g2.entries())
        .flat_map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()))
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_set(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Group::Encoder, false, Tensor::matrix(1, vals.len(), vals.to_vec()).unwrap())
            .unwrap();
        p
    }

    fn two_entry(enc: &[f64], dec: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("enc", Group::Encoder, false, Tensor::matrix(1, enc.len(), enc.to_vec()).unwrap())
            .unwrap();
        p.push("dec", Group::Decoder, false, Tensor::matrix(1, dec.len(), dec.to_vec()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn axpy_examples() {
        let r = axpy_combine(0.5, &vec_set(&[1.0, 3.0]), 0.5, &vec_set(&[3.0, 5.0])).unwrap();
        assert_eq!(r.flat(), vec![2.0, 4.0]);

        let p = vec_set(&[-0.0, 1.0 / 3.0, 7.25e-300]);
        let q = vec_set(&[1.0, -2.0, 3.0]);
        assert_eq!(axpy_combine(1.0, &p, 0.0, &q).unwrap(), p);
        assert_eq!(axpy_combine(0.0, &p, 1.0, &q).unwrap(), q);
    }

    #[test]
    fn axpy_rejects_mismatch() {
        let err = axpy_combine(1.0, &vec_set(&[1.0]), 1.0, &vec_set(&[1.0, 2.0]));
        assert!(matches!(err, Err(Error::StructuralMismatch(_))));
    }

    #[test]
    fn sgd_examples() {
        let p = vec_set(&[1.0, 1.0]);
        let r = sgd_step(&p, &vec_set(&[1.0, 2.0]), 0.1, None).unwrap();
        assert_eq!(r.flat(), vec![0.9, 0.8]);
        assert_eq!(sgd_step(&p, &vec_set(&[0.0, 0.0]), 0.1, None).unwrap(), p);
    }

    #[test]
    fn sgd_mask_freezes_entries() {
        let p = two_entry(&[1.0, 2.0], &[0.1, 0.2]);
        let g = two_entry(&[1.0, 1.0], &[5.0, 5.0]);
        let r = sgd_step(&p, &g, 0.5, Some(&[true, false])).unwrap();
        assert_eq!(r.get("dec"), p.get("dec"));
        assert_eq!(r.get("enc").unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn sgd_names_nonfinite_entry() {
        let p = two_entry(&[1.0], &[1.0]);
        let g = two_entry(&[0.0], &[f64::NAN]);
        match sgd_step(&p, &g, 0.1, None) {
            Err(Error::NonFinite { entry }) => assert_eq!(entry, "dec"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(sgd_step(&p, &two_entry(&[0.0], &[0.0]), 0.0, None).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let half_sq = |p: &ParamSet<f64>| Ok(p.flat().iter().map(|v| v * v).sum::<f64>() / 2.0);
        let g = finite_diff_grad(half_sq, &vec_set(&[3.0, -1.0]), 1e-5).unwrap();
        for (a, b) in g.flat().iter().zip([3.0, -1.0]) {
            assert!((a - b).abs() < 1e-8);
        }

        let constant = |_: &ParamSet<f64>| Ok(4.2);
        let g = finite_diff_grad(constant, &vec_set(&[1.0, 2.0]), 1e-5).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() < 1e-10));

        let product = |p: &ParamSet<f64>| {
            let v = p.flat();
            Ok(v[0] * v[1])
        };
        let g = finite_diff_grad(product, &vec_set(&[2.0, 5.0]), 1e-5).unwrap();
        assert!((g.flat()[0] - 5.0).abs() < 1e-8 && (g.flat()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&vec_set(&[1.0, 0.0]), &vec_set(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dot(&vec_set(&[1.0, 2.0]), &vec_set(&[3.0, 4.0])).unwrap(), 11.0);
        assert!(dot(&vec_set(&[1.0]), &vec_set(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let mut p = ParamSet::<f32>::new();
        p.push("w", Group::Decoder, true, Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap())
            .unwrap();
        let g = p.map(|_| 1.0);
        let r = sgd_step(&p, &g, 0.5f32, None).unwrap();
        assert_eq!(r.flat(), vec![0.5f32, 0.5]);
    }

    proptest! {
        #[test]
        fn convex_combination_stays_in_hull(
            x in proptest::collection::vec(-1e3f64..1e3, 1..16),
            y in proptest::collection::vec(-1e3f64..1e3, 1..16),
            eta in 0.0f64..=1.0,
        ) {
            let n = x.len().min(y.len());
            for i in 0..n {
                let v = convex_mix(x[i], y[i], eta);
                prop_assert!(v >= x[i].min(y[i]) && v <= x[i].max(y[i]));
            }
            let p = vec_set(&x[..n]);
            let q = vec_set(&y[..n]);
            let r = axpy_combine(1.0 - eta, &p, eta, &q).unwrap();
            for ((&a, &b), &v) in x.iter().zip(&y).zip(r.flat().iter()) {
                let tol = 1e-12 * (a.abs() + b.abs() + 1.0);
                prop_assert!(v >= a.min(b) - tol && v <= a.max(b) + tol);
            }
        }

        #[test]
        fn masked_entries_are_bit_identical(
            enc in proptest::collection::vec(-10.0f64..10.0, 1..8),
            dec in proptest::collection::vec(-10.0f64..10.0, 1..8),
            alpha in 1e-4f64..1.0,
        ) {
            let p = two_entry(&enc, &dec);
            let g = p.map(|v| v.sin() + 0.5);
            let r = sgd_step(&p, &g, alpha, Some(&[false, true])).unwrap();
            prop_assert_eq!(r.get("enc").unwrap().data(), p.get("enc").unwrap().data());
        }

        #[test]
        fn ops_are_deterministic(v in proptest::collection::vec(-5.0f64..5.0, 1..10), a in -2.0f64..2.0) {
            let p = vec_set(&v);
            let q = p.map(|x| x * 0.3 - 1.0);
            let r1 = axpy_combine(a, &p, 1.0 - a, &q).unwrap();
            let r2 = axpy_combine(a, &p, 1.0 - a, &q).unwrap();
            prop_assert_eq!(r1.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            r2.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert!(dot(&p, &p).unwrap() >= 0.0);
        }
    }
}
