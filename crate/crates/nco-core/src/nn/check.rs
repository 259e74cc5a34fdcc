//! Gradient verification by central finite differences.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Deviations below this magnitude are reported as absolute differences.
/// Central differences at h=1e-6 carry a roundoff floor of roughly 1e-10 on
/// a unit-scale objective, so a sub-1e-8 deviation says nothing about the
/// analytic gradient: dividing it by a tiny gradient magnitude would
/// manufacture a large "relative" error out of pure f64 rounding.
const ABS_FALLBACK: f64 = 1e-8;

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Number of coordinates compared.
    pub checked: usize,
    /// Largest error seen, relative where the magnitudes allow it.
    pub max_error: f64,
    /// `(param, coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients against central finite differences.
///
/// `eval` must map parameter tensors to a scalar loss plus one gradient
/// vector per parameter, and must be deterministic: it is invoked twice on
/// the unperturbed parameters first, and any bit-level disagreement aborts
/// the check. Stochastic objectives have to be frozen (fixed actions, fixed
/// targets) before they can be verified this way.
///
/// The error at each coordinate is `|ad - fd| / max(|ad|, |fd|)`, except
/// that deviations smaller than `1e-8` in magnitude are reported absolutely:
/// they sit at the method's own roundoff floor, where a relative measure
/// against a near-zero gradient would be meaningless.
pub fn finite_difference_check<F>(params: &[Tensor], h: f64, mut eval: F) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("step size {h} must be positive")));
    }
    let (loss_a, grads_a) = eval(params)?;
    let (loss_b, grads_b) = eval(params)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss_a,
            second: loss_b,
        });
    }
    if let Some((first, second)) = first_bit_difference(&grads_a, &grads_b) {
        return Err(Error::NonDeterministic { first, second });
    }
    if !loss_a.is_finite() {
        return Err(Error::NonFinite {
            context: "loss under finite-difference check".into(),
        });
    }
    if grads_a.len() != params.len() {
        return Err(Error::Domain(format!(
            "eval returned {} gradients for {} parameters",
            grads_a.len(),
            params.len()
        )));
    }
    for (p, (t, g)) in params.iter().zip(&grads_a).enumerate() {
        if t.len() != g.len() {
            return Err(Error::Domain(format!(
                "gradient {p} has {} entries for {} parameter values",
                g.len(),
                t.len()
            )));
        }
    }

    let mut scratch: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        checked: 0,
        max_error: 0.0,
        worst: None,
    };
    for p in 0..params.len() {
        for c in 0..params[p].len() {
            let base = params[p].data()[c];
            scratch[p].data_mut()[c] = base + h;
            let (loss_plus, _) = eval(&scratch)?;
            scratch[p].data_mut()[c] = base - h;
            let (loss_minus, _) = eval(&scratch)?;
            scratch[p].data_mut()[c] = base;

            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let ad = grads_a[p][c];
            let diff = (ad - fd).abs();
            let err = if diff < ABS_FALLBACK {
                diff
            } else {
                diff / ad.abs().max(fd.abs())
            };
            report.checked += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = Some((p, c));
            }
        }
    }
    Ok(report)
}

/// First pair of gradient entries that differ at the bit level, if any.
fn first_bit_difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<(f64, f64)> {
    if a.len() != b.len() {
        return Some((a.len() as f64, b.len() as f64));
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Some((x.len() as f64, y.len() as f64));
        }
        for (&u, &v) in x.iter().zip(y) {
            if u.to_bits() != v.to_bits() {
                return Some((u, v));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    /// loss = sum(tanh(x) * tanh(x)), a smooth everywhere-differentiable toy.
    fn smooth_eval(params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let x = tape.leaf(&params[0], true);
        let t = x.tanh();
        let loss = t.mul(t)?.sum();
        let value = loss.item();
        tape.backward(loss)?;
        Ok((value, vec![x.grad().expect("leaf gradient")]))
    }

    #[test]
    fn smooth_objective_passes_at_tight_tolerance() {
        let params = vec![Tensor::vector(vec![0.3, -1.1, 0.0, 2.4])];
        let report = finite_difference_check(&params, 1e-6, smooth_eval).unwrap();
        assert_eq!(report.checked, 4);
        assert!(
            report.max_error < 1e-7,
            "max error {} at {:?}",
            report.max_error,
            report.worst
        );
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let params = vec![Tensor::vector(vec![0.5, -0.25])];
        let report = finite_difference_check(&params, 1e-6, |ps| {
            let (loss, mut grads) = smooth_eval(ps)?;
            grads[0][1] += 0.37;
            Ok((loss, grads))
        })
        .unwrap();
        assert!(report.max_error > 1e-2);
        assert_eq!(report.worst, Some((0, 1)));
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let params = vec![Tensor::scalar(1.0)];
        let mut calls = 0usize;
        let err = finite_difference_check(&params, 1e-6, |ps| {
            calls += 1;
            let (loss, grads) = smooth_eval(ps)?;
            Ok((loss + calls as f64 * 1e-3, grads))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn quadratic_form_is_exact_to_truncation_error() {
        // f(x) = x^T A x has a third derivative of zero, so central
        // differences are exact up to floating-point roundoff.
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.25, 0.0, -0.25, 3.0])
            .unwrap();
        let params = vec![Tensor::vector(vec![0.7, -1.3, 0.45])];
        let report = finite_difference_check(&params, 1e-6, |ps| {
            let tape = Tape::new();
            let x = ps[0].data().to_vec();
            let xv = tape.leaf(&Tensor::new(vec![1, 3], x).unwrap(), true);
            let av = tape.constant(&a);
            let loss = xv.matmul(av)?.matmul_nt(xv)?.sum();
            let value = loss.item();
            tape.backward(loss)?;
            Ok((value, vec![xv.grad().expect("grad")]))
        })
        .unwrap();
        assert!(report.max_error < 1e-9, "error {}", report.max_error);
    }

    #[test]
    fn clipped_logit_chain_passes() {
        // scores = 10 * tanh(x W / sqrt(d)), softmax, log-likelihood of one
        // action: the exact shape of the pointer head.
        let params = vec![
            Tensor::vector(vec![0.3, -0.8]),
            Tensor::new(vec![2, 4], vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5, 0.7, -0.6]).unwrap(),
        ];
        let report = finite_difference_check(&params, 1e-6, |ps| {
            let tape = Tape::new();
            let x = tape.leaf(
                &Tensor::new(vec![1, 2], ps[0].data().to_vec()).unwrap(),
                true,
            );
            let w = tape.leaf(&ps[1], true);
            let scores = x.matmul(w)?.scale(1.0 / 2.0_f64.sqrt()).tanh().scale(10.0);
            let probs = scores.softmax_lastdim(None)?;
            let loss = probs.reshape(&[4])?.select(2)?.log()?.scale(-1.0);
            let value = loss.item();
            tape.backward(loss)?;
            Ok((
                value,
                vec![x.grad().expect("grad"), w.grad().expect("grad")],
            ))
        })
        .unwrap();
        assert!(report.max_error < 1e-6, "error {}", report.max_error);
    }

    #[test]
    fn masked_pointer_toy_passes() {
        // Three candidate cities, one masked as visited: a query scores each
        // city embedding, the masked softmax drops city 1, and the loss is
        // the negative log-likelihood of choosing city 2.
        let params = vec![
            Tensor::new(vec![3, 2], vec![0.1, 0.9, -0.4, 0.2, 0.6, -0.7]).unwrap(),
            Tensor::vector(vec![0.5, -0.3]),
        ];
        let report = finite_difference_check(&params, 1e-6, |ps| {
            let tape = Tape::new();
            let emb = tape.leaf(&ps[0], true);
            let q = tape.leaf(&Tensor::new(vec![1, 2], ps[1].data().to_vec()).unwrap(), true);
            let scores = q.matmul_nt(emb)?.tanh().scale(10.0);
            let probs = scores.softmax_lastdim(Some(&[false, true, false]))?;
            let loss = probs.reshape(&[3])?.select(2)?.log()?.scale(-1.0);
            let value = loss.item();
            tape.backward(loss)?;
            Ok((
                value,
                vec![emb.grad().expect("grad"), q.grad().expect("grad")],
            ))
        })
        .unwrap();
        assert!(report.max_error < 1e-6, "error {}", report.max_error);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        type Objective = fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>;

        fn grads(_tape: &Tape, vars: &[crate::nn::Var<'_>]) -> Vec<Vec<f64>> {
            vars.iter().map(|v| v.grad().expect("leaf grad")).collect()
        }

        fn fd_add(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let s = a.add(b)?;
            let loss = s.mul(s)?.sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_sub_mul(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let loss = a.sub(b)?.mul(a)?.mean();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_add_row(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let m = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let loss = m.add_row(b)?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[m, b])))
        }
        fn fd_matmul(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let loss = a.matmul(b)?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_matmul_batched(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true); // [2,2,3]
            let b = tape.leaf(&ps[1], true); // [2,3,2]
            let loss = a.matmul(b)?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_matmul_broadcast(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true); // [2,2,3]
            let b = tape.leaf(&ps[1], true); // [3,2] shared across the batch
            let loss = a.matmul(b)?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_matmul_nt(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let loss = a.matmul_nt(b)?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_log_softmax(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let x = tape.leaf(&ps[0], true);
            let loss = x.softmax_lastdim(None)?.log()?.mean();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[x])))
        }
        fn fd_masked_softmax(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let x = tape.leaf(&ps[0], true); // [2,3]
            let mask = [false, true, false, false, false, true];
            let probs = x.softmax_lastdim(Some(&mask))?;
            let loss = probs.mul(probs)?.sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[x])))
        }
        fn fd_concat_select(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let a = tape.leaf(&ps[0], true);
            let b = tape.leaf(&ps[1], true);
            let cat = tape.concat1(&[a, b])?;
            let loss = cat.tanh().mul(cat.tanh())?.sum().add(cat.select(3)?)?;
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[a, b])))
        }
        fn fd_gather(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let m = tape.leaf(&ps[0], true); // [3,2]
            let loss = m.gather_rows(&[2, 0, 2])?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[m])))
        }
        fn fd_normalize(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let x = tape.leaf(&ps[0], true); // [2,4]
            let g = tape.leaf(&ps[1], true); // [4]
            let b = tape.leaf(&ps[2], true); // [4]
            let y = x.normalize_rows(g, b)?;
            let loss = y.mul(y)?.sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[x, g, b])))
        }
        fn fd_mean_dim0(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let m = tape.leaf(&ps[0], true);
            let loss = m.mean_dim0()?.tanh().sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[m])))
        }
        fn fd_reshape_permute(ps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let x = tape.leaf(&ps[0], true); // [2,3,2]
            let p = x.permute3([2, 0, 1])?; // [2,2,3]
            let loss = p.reshape(&[4, 3])?.tanh().scale(0.5).sum();
            let v = loss.item();
            tape.backward(loss)?;
            Ok((v, grads(&tape, &[x])))
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1207);
        let mut rt = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap()
        };
        let cases: Vec<(&str, Vec<Tensor>, Objective)> = vec![
            ("add", vec![rt(&[5]), rt(&[5])], fd_add),
            ("sub_mul", vec![rt(&[6]), rt(&[6])], fd_sub_mul),
            ("add_row", vec![rt(&[3, 4]), rt(&[4])], fd_add_row),
            ("matmul", vec![rt(&[2, 3]), rt(&[3, 4])], fd_matmul),
            (
                "matmul_batched",
                vec![rt(&[2, 2, 3]), rt(&[2, 3, 2])],
                fd_matmul_batched,
            ),
            (
                "matmul_broadcast",
                vec![rt(&[2, 2, 3]), rt(&[3, 2])],
                fd_matmul_broadcast,
            ),
            (
                "matmul_nt",
                vec![rt(&[2, 2, 3]), rt(&[2, 4, 3])],
                fd_matmul_nt,
            ),
            ("log_softmax", vec![rt(&[2, 4])], fd_log_softmax),
            ("masked_softmax", vec![rt(&[2, 3])], fd_masked_softmax),
            ("concat_select", vec![rt(&[3]), rt(&[2])], fd_concat_select),
            ("gather_rows", vec![rt(&[3, 2])], fd_gather),
            (
                "normalize_rows",
                vec![rt(&[2, 4]), rt(&[4]), rt(&[4])],
                fd_normalize,
            ),
            ("mean_dim0", vec![rt(&[3, 3])], fd_mean_dim0),
            ("reshape_permute", vec![rt(&[2, 3, 2])], fd_reshape_permute),
        ];
        for (name, params, f) in cases {
            let report = finite_difference_check(&params, 1e-6, f)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(
                report.max_error <= 1e-6,
                "{name}: relative error {} at {:?}",
                report.max_error,
                report.worst
            );
        }
    }

    #[test]
    fn near_zero_gradients_use_absolute_comparison() {
        // At x = 0 the gradient of tanh(x)^2 is exactly 0; the relative
        // denominator would blow up without the absolute fallback.
        let params = vec![Tensor::vector(vec![0.0])];
        let report = finite_difference_check(&params, 1e-6, smooth_eval).unwrap();
        assert!(report.max_error < 1e-8);
    }
}
