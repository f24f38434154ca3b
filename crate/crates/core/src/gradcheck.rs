//! Central-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;

/// Max relative error between the analytic gradient of `f` at `x` and its
/// central-difference estimate, over every coordinate of `x`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<'a, F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_indices(f, x, eps, &all)
}

/// Like [`grad_check`], restricted to the coordinates in `indices`.
pub fn grad_check_indices<'a, F>(f: F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidConfig(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&mut tape, xv)?;
        check_scalar(&tape, y)?;
        tape.backward(y)?;
        tape.grad(xv).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; x.len()])
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let xv = tape.constant(probe.clone());
        let y = f(&mut tape, xv)?;
        check_scalar(&tape, y)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Worst relative error of each differentiable tape op, checked on small
/// random operands. Non-scalar outputs are reduced with a fixed random
/// projection so that no gradient is trivially constant.
pub fn kernel_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = RngState::new(seed);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal());
    let (x, w, g) = (rand(&[3, 4]), rand(&[5, 4]), rand(&[4]));
    let (b34, proj34, proj35) = (rand(&[3, 4]), rand(&[3, 4]), rand(&[3, 5]));
    let proj_row = rand(&[2, 4]);
    let table = rand(&[6, 4]);
    let qkv = rand(&[3, 8]);
    let proj38 = rand(&[3, 8]);
    let mut p = rand(&[3, 4]);
    for r in 0..3 {
        let row = &mut p.data_mut()[r * 4..(r + 1) * 4];
        row.iter_mut().for_each(|v| *v = crate::math::exp(*v));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let teacher = rand(&[3, 4]);
    let allow: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    let eps = 1e-6;

    // `⟨proj, y⟩` as a scalar.
    fn project(t: &mut Tape<'_>, y: Var, proj: &Tensor) -> Result<Var> {
        let p = t.constant(proj.clone());
        let m = t.mul(y, p)?;
        Ok(t.sum(m))
    }

    let mut out = Vec::new();
    let mut push = |name, r: Result<f64>| -> Result<()> {
        out.push((name, r?));
        Ok(())
    };
    push("matmul", grad_check(|t, v| {
        let wt = t.constant(Tensor::from_fn(&[4, 5], |i| w.data()[(i % 5) * 4 + i / 5]));
        let y = t.matmul(v, wt)?;
        project(t, y, &proj35)
    }, &x, eps))?;
    push("linear.x", grad_check(|t, v| {
        let wv = t.constant(w.clone());
        let y = t.linear(v, wv)?;
        project(t, y, &proj35)
    }, &x, eps))?;
    push("linear.w", grad_check(|t, v| {
        let xv = t.constant(x.clone());
        let y = t.linear(xv, v)?;
        project(t, y, &proj35)
    }, &w, eps))?;
    push("add", grad_check(|t, v| {
        let bv = t.constant(b34.clone());
        let y = t.add(v, bv)?;
        let y = t.mul(y, y)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("mul", grad_check(|t, v| {
        let y = t.mul(v, v)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("scale", grad_check(|t, v| {
        let y = t.scale(v, -1.7);
        let y = t.mul(y, v)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("silu", grad_check(|t, v| {
        let y = t.silu(v);
        project(t, y, &proj34)
    }, &x, eps))?;
    push("rmsnorm.x", grad_check(|t, v| {
        let gv = t.constant(g.clone());
        let y = t.rmsnorm(v, gv, 1e-6)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("rmsnorm.gain", grad_check(|t, v| {
        let xv = t.constant(x.clone());
        let y = t.rmsnorm(xv, v, 1e-6)?;
        project(t, y, &proj34)
    }, &g, eps))?;
    push("embedding", grad_check(|t, v| {
        let y = t.embedding(v, &[2, 0, 2])?;
        let y = t.mul(y, y)?;
        project(t, y, &proj34)
    }, &table, eps))?;
    push("concat_rows", grad_check(|t, v| {
        let bv = t.constant(b34.clone());
        let y = t.concat_rows(&[v, bv, v])?;
        let y = t.mul(y, y)?;
        t.select_rows(y, &[0, 4, 8]).and_then(|y| project(t, y, &proj34))
    }, &x, eps))?;
    push("select_rows", grad_check(|t, v| {
        let y = t.select_rows(v, &[2, 0])?;
        let y = t.mul(y, y)?;
        project(t, y, &proj_row)
    }, &x, eps))?;
    push("rope", grad_check(|t, v| {
        let y = t.rope(v, &[0, 5, 9], 2, 100.0)?;
        project(t, y, &proj38)
    }, &qkv, eps))?;
    for (name, which) in [("attention.q", 0), ("attention.k", 1), ("attention.v", 2)] {
        push(name, grad_check(|t, v| {
            let c = t.constant(qkv.clone());
            let s = t.scale(c, 0.5);
            let args = match which {
                0 => [v, c, s],
                1 => [c, v, s],
                _ => [c, s, v],
            };
            let y = t.attention(args[0], args[1], args[2], &allow, 2)?;
            project(t, y, &proj38)
        }, &qkv, eps))?;
    }
    push("softmax", grad_check(|t, v| {
        let y = t.softmax(v)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("log_softmax", grad_check(|t, v| {
        let y = t.log_softmax(v)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("kl_divergence", grad_check(|t, v| t.kl_divergence(&p, v), &x, eps))?;
    push("kl_divergence_logits", grad_check(|t, v| t.kl_divergence_logits(&teacher, v), &x, eps))?;
    push("cross_entropy", grad_check(|t, v| t.cross_entropy(v, &[1, 3, 0]), &x, eps))?;
    push("mse", grad_check(|t, v| t.mse(v, &b34), &x, eps))?;
    push("gated_add", grad_check(|t, v| {
        let bv = t.constant(b34.clone());
        let y = t.gated_add(bv, v, &[true, false, true], 2.0)?;
        let y = t.mul(y, y)?;
        project(t, y, &proj34)
    }, &x, eps))?;
    push("weighted_sum", grad_check(|t, v| {
        let a = t.sum(v);
        let sq = t.mul(v, v)?;
        let b = t.sum(sq);
        t.weighted_sum(&[(a, 0.5), (b, -2.0)])
    }, &x, eps))?;
    Ok(out)
}

fn check_scalar(tape: &Tape<'_>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            lhs: v.shape().to_vec(),
            rhs: alloc::vec![1],
        });
    }
    let val = v.data()[0];
    if !val.is_finite() {
        return Err(Error::NonFinite {
            what: format!("grad_check objective ({val})"),
        });
    }
    Ok(val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(&[4], alloc::vec![0.3, -1.0, 2.0, 5.5]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(&[3], alloc::vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param_ref(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(&[1, 2], alloc::vec![0.0, 0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.sum(v);
                Ok(t.scale(s, f64::INFINITY))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn every_kernel_passes() {
        let results = kernel_suite(11).unwrap();
        assert!(results.len() >= 20);
        for (name, err) in results {
            assert!(err <= 1e-6, "{name}: {err:e}");
        }
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
    }
}
