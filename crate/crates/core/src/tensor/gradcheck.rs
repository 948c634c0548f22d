//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ParamStore, Tape, Var};

/// A scalar loss that can be built at any precision.
pub trait LossFn {
    fn loss<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a ParamStore<T>) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<T: Scalar, L: LossFn>(loss: &L, params: &ParamStore<T>) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = loss.loss(&mut tape, params)?;
    Ok(tape.value(v).data()[0].as_f64())
}

/// Compares analytic gradients against central differences, both at
/// precision `T`, over every coordinate of every trainable parameter.
pub fn grad_check<T: Scalar, L: LossFn>(loss: &L, params: &ParamStore<T>, eps: f64) -> Result<GradCheckReport> {
    grad_check_against::<T, T, L>(loss, params, eps)
}

/// Analytic gradients at precision `T` checked against central
/// differences evaluated at precision `O` on the same weights.
///
/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator,
/// where `floor` is ten rounding units of `T` at the scale of the largest
/// analytic gradient, and never below 1e-8. Gradients that are zero up to
/// rounding are thus compared on that absolute scale.
pub fn grad_check_against<T: Scalar, O: Scalar, L: LossFn>(
    loss: &L,
    params: &ParamStore<T>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::contract(format!("grad_check eps must lie in (0, 0.1], got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = loss.loss(&mut tape, params)?;
        tape.backward(v)?
    };

    let largest = (0..params.len())
        .filter_map(|id| analytic.param(id))
        .flat_map(|g| g.data().iter().map(|v| v.as_f64().abs()))
        .fold(0.0, f64::max);
    let floor = (10.0 * T::epsilon().as_f64() * largest).max(1e-8);

    let mut oracle: ParamStore<O> = params.cast();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in 0..params.len() {
        if !params.get(id).trainable {
            continue;
        }
        let name = params.get(id).name.clone();
        for i in 0..params.get(id).value.len() {
            let original = oracle.get(id).value.data()[i];
            oracle.get_mut(id).value.data_mut()[i] = original + O::lit(eps);
            let plus = evaluate(loss, &oracle)?;
            oracle.get_mut(id).value.data_mut()[i] = original - O::lit(eps);
            let minus = evaluate(loss, &oracle)?;
            oracle.get_mut(id).value.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.param(id).map_or(0.0, |g| g.data()[i].as_f64());
            let denom = exact.abs().max(numeric.abs()).max(floor);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::AttentionShape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// loss = sum(x W + b)
    struct Linear {
        x: Tensor<f64>,
    }

    impl LossFn for Linear {
        fn loss<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, p: &'a ParamStore<T>) -> Result<Var> {
            let x = tape.constant(self.x.cast());
            let w = tape.param(0, p.get(0));
            let b = tape.param(1, p.get(1));
            let y = tape.dense(x, w, b)?;
            Ok(tape.sum(y))
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::<f64>::new();
        p.push("w", Tensor::truncated_normal(vec![3, 2], 1.0, &mut rng)).unwrap();
        p.push("b", Tensor::zeros(vec![2])).unwrap();
        let lin = Linear {
            x: Tensor::truncated_normal(vec![4, 3], 1.0, &mut rng),
        };
        let r = grad_check(&lin, &p, 1e-4).unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
        assert_eq!(r.coordinates, 8);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let p = ParamStore::<f64>::new();
        let lin = Linear { x: Tensor::zeros(vec![1, 1]) };
        assert!(grad_check(&lin, &p, 0.5).is_err());
        assert!(grad_check(&lin, &p, 0.0).is_err());
    }

    /// Exercises every differentiable op on random inputs.
    struct AllOps {
        x: Tensor<f64>,
        mask: Vec<bool>,
    }

    impl LossFn for AllOps {
        fn loss<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, p: &'a ParamStore<T>) -> Result<Var> {
            let ids = [1usize, 0, 1, 2];
            let table = tape.param(0, p.get(0));
            let e = tape.gather(table, &ids)?;
            let x = tape.constant(self.x.cast());
            let h = tape.add(e, x)?;
            let g = tape.param(1, p.get(1));
            let b = tape.param(2, p.get(2));
            let h = tape.layer_norm(h, g, b, T::lit(1e-12))?;
            let w = tape.param(3, p.get(3));
            let q = tape.matmul(h, w)?;
            let shape = AttentionShape { batch: 2, seq: 2, heads: 2 };
            let a = tape.attention(q, h, h, &self.mask, shape)?;
            let a = tape.gelu(a);
            let s = tape.softmax_rows(a);
            let r = tape.relu(q);
            let c = tape.concat_cols(s, r)?;
            let m = tape.mul(c, c)?;
            let z = tape.scale(m, T::lit(0.7));
            let z = tape.sigmoid(z);
            let rows = tape.gather(z, &[0, 2])?;
            let pick = tape.mean(rows);
            let centered = tape.scale(pick, T::lit(-0.5));
            let pr = tape.sigmoid(centered);
            let loss = tape.bce(pr, &[T::one()], &[T::lit(2.0)])?;
            let extra = tape.sum(m);
            let extra = tape.scale(extra, T::lit(0.1));
            let loss = tape.add(loss, extra)?;
            // keeps every weight's gradient well away from zero
            let qq = tape.mul(q, q)?;
            let reg = tape.sum(qq);
            let reg = tape.scale(reg, T::lit(0.05));
            tape.add(loss, reg)
        }
    }

    #[test]
    fn every_op_matches_finite_differences_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::<f64>::new();
            p.push("table", Tensor::truncated_normal(vec![3, 4], 1.0, &mut rng)).unwrap();
            p.push("gain", Tensor::truncated_normal(vec![4], 1.0, &mut rng)).unwrap();
            p.push("bias", Tensor::truncated_normal(vec![4], 1.0, &mut rng)).unwrap();
            p.push("w", Tensor::truncated_normal(vec![4, 4], 1.0, &mut rng)).unwrap();
            let f = AllOps {
                x: Tensor::truncated_normal(vec![4, 4], 1.0, &mut rng),
                mask: vec![true, seed % 2 == 0, true, true],
            };
            let r = grad_check(&f, &p, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
