use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Worst element-wise disagreement between analytic and central-difference
/// gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
}

impl FdCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares tape gradients of a scalar-valued graph against central
/// differences, perturbing every element of every leaf. The closure must
/// build the same graph for any tape it is handed; `seed` reproduces
/// stochastic ops (dropout) identically across evaluations.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor<f64>], h: f64, seed: Option<u64>) -> Result<FdCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let fresh = || match seed {
        Some(s) => Tape::with_seed(s),
        None => Tape::new(),
    };

    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = fresh();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = fresh();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::dim("finite_diff_check", "graph output must be scalar".to_string()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].len() {
            let orig = work[li].data()[ei];
            work[li].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[li].data()[ei];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(FdCheck { max_abs_diff: max_abs, max_rel_err: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-6;
    const H: f64 = 1e-5;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn check<F>(f: F, leaves: &[Tensor<f64>])
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>,
    {
        let r = finite_diff_check(f, leaves, H, None).unwrap();
        assert!(r.within(TOL), "max_rel_err {} max_abs {}", r.max_rel_err, r.max_abs_diff);
    }

    #[test]
    fn grad_matmul_chain() {
        let mut r = rng(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let g = t.gelu(c)?;
                t.sum(g)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_matmul_bt_and_transpose() {
        let mut r = rng(2);
        let a = Tensor::randn(&[2, 5], 1.0, &mut r);
        let b = Tensor::randn(&[3, 5], 1.0, &mut r);
        check(
            |t, v| {
                let c = t.matmul_bt(v[0], v[1])?;
                let ct = t.transpose(c)?;
                let s = t.sigmoid(ct)?;
                t.sum(s)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_add_mul_scale_bias() {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 3], 1.0, &mut r);
        let y = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        check(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let m = t.mul(s, v[0])?;
                let sc = t.scale(m, 0.37)?;
                let ab = t.add_bias(sc, v[2])?;
                let th = t.tanh_act(ab)?;
                t.sum(th)
            },
            &[x, y, b],
        );
    }

    #[test]
    fn grad_select_row_and_embed() {
        let mut r = rng(4);
        let table = Tensor::randn(&[5, 3], 1.0, &mut r);
        check(
            |t, v| {
                // repeated id exercises scatter-add accumulation
                let e = t.embed(v[0], &[1, 4, 1])?;
                let row = t.select_row(e, 2)?;
                let g = t.gelu(row)?;
                t.sum(g)
            },
            &[table],
        );
    }

    #[test]
    fn grad_softmax() {
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 4], 2.0, &mut r);
        let w = Tensor::randn(&[3, 4], 1.0, &mut r);
        check(
            move |t, v| {
                let y = t.softmax(v[0])?;
                let c = t.constant(w.clone());
                let m = t.mul(y, c)?;
                t.sum(m)
            },
            &[x],
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut r = rng(6);
        let x = Tensor::randn(&[3, 5], 1.5, &mut r);
        let g = Tensor::randn(&[5], 0.5, &mut r);
        let b = Tensor::randn(&[5], 0.5, &mut r);
        check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            },
            &[x, g, b],
        );
    }

    #[test]
    fn grad_attention_multi_head() {
        let mut r = rng(7);
        let q = Tensor::randn(&[4, 6], 0.8, &mut r);
        let k = Tensor::randn(&[4, 6], 0.8, &mut r);
        let v = Tensor::randn(&[4, 6], 0.8, &mut r);
        let probe = Tensor::randn(&[4, 6], 1.0, &mut r);
        check(
            |t, vars| {
                let o = t.masked_attention(vars[0], vars[1], vars[2], &[1, 1, 1, 0], 2)?;
                let c = t.constant(probe.clone());
                let m = t.mul(o, c)?;
                t.sum(m)
            },
            &[q, k, v],
        );
    }

    #[test]
    fn grad_dropout_with_fixed_seed() {
        let mut r = rng(8);
        let x = Tensor::randn(&[4, 4], 1.0, &mut r);
        let res = finite_diff_check(
            |t, v| {
                let d = t.dropout(v[0], 0.5)?;
                let g = t.gelu(d)?;
                t.sum(g)
            },
            &[x],
            H,
            Some(99),
        )
        .unwrap();
        assert!(res.within(TOL), "max_rel_err {}", res.max_rel_err);
    }

    #[test]
    fn grad_bce_and_focal() {
        let mut r = rng(9);
        let z = Tensor::randn(&[6], 2.0, &mut r);
        let targets = Tensor::vector(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let weights = Tensor::vector(vec![1.5, 1.0, 1.5, 1.0, 2.0, 1.0]);
        for gamma in [0.0, 1.0, 2.0, 3.0] {
            let t2 = targets.clone();
            let w2 = weights.clone();
            let res = finite_diff_check(
                move |t, v| t.focal_with_logits(v[0], &t2, &w2, gamma),
                std::slice::from_ref(&z),
                H,
                None,
            )
            .unwrap();
            assert!(res.within(TOL), "gamma {gamma}: {}", res.max_rel_err);
        }
        let t2 = targets.clone();
        let w2 = weights.clone();
        let res =
            finite_diff_check(move |t, v| t.bce_with_logits(v[0], &t2, &w2), &[z], H, None).unwrap();
        assert!(res.within(TOL), "bce: {}", res.max_rel_err);
    }

    #[test]
    fn grad_focal_analytic_point() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::vector(vec![0.3]));
        let loss = tape
            .focal_with_logits(z, &Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.5]), 3.0)
            .unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap().data()[0];
        assert!((g - 0.4734680660809332).abs() < 1e-14, "{g}");
    }

    #[test]
    fn grad_ops_across_shapes() {
        for (seed, rows, cols) in [(21u64, 1usize, 3usize), (22, 4, 4), (23, 5, 2)] {
            let mut r = rng(seed);
            let x = Tensor::randn(&[rows, cols], 1.0, &mut r);
            let w = Tensor::randn(&[cols, cols], 0.7, &mut r);
            let b = Tensor::randn(&[cols], 0.3, &mut r);
            check(
                |t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let h = t.add_bias(h, v[2])?;
                    let s = t.softmax(h)?;
                    let g = t.gelu(s)?;
                    t.sum(g)
                },
                &[x, w, b],
            );
        }
    }

    #[test]
    fn grad_composite_residual_block() {
        let mut r = rng(10);
        let x = Tensor::randn(&[1, 4], 1.0, &mut r);
        let w1 = Tensor::randn(&[4, 4], 0.5, &mut r);
        let b1 = Tensor::randn(&[4], 0.1, &mut r);
        let w2 = Tensor::randn(&[4, 4], 0.5, &mut r);
        let b2 = Tensor::randn(&[4], 0.1, &mut r);
        check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.gelu(h)?;
                let h = t.matmul(h, v[3])?;
                let h = t.add_bias(h, v[4])?;
                let res = t.add(v[0], h)?;
                let sq = t.mul(res, res)?;
                t.sum(sq)
            },
            &[x, w1, b1, w2, b2],
        );
    }
}
