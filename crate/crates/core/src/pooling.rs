//! Sequence pooling: mean, CLS, attention-weighted, and per-label
//! attention-weighted reduction of an encoded sequence to a single vector.

use rand::Rng;

use crate::diffmath::{Mode, Real, Tape, Tensor, Var, MASK_OFF};
use crate::error::{Error, Result};
use crate::labels::PerLabel;

pub const ATTN_DROPOUT: f64 = 0.1;

/// Bilinear attention-pooling parameters: a query projection applied to the
/// CLS row and a key projection applied to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPoolParams<E> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub dropout: f64,
}

impl<E: Real> AttnPoolParams<E> {
    pub fn init(d_model: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        AttnPoolParams {
            wq: Tensor::randn(&[d_model, d_model], crate::encoder::INIT_STD, rng),
            wk: Tensor::randn(&[d_model, d_model], crate::encoder::INIT_STD, rng),
            dropout,
        }
    }

    pub fn cast<F: Real>(&self) -> AttnPoolParams<F> {
        AttnPoolParams { wq: self.wq.cast(), wk: self.wk.cast(), dropout: self.dropout }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<E>)> {
        vec![(format!("{prefix}.wq"), &self.wq), (format!("{prefix}.wk"), &self.wk)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<E>)> {
        vec![(format!("{prefix}.wq"), &mut self.wq), (format!("{prefix}.wk"), &mut self.wk)]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnPoolVars {
    pub wq: Var,
    pub wk: Var,
    pub dropout: f64,
}

impl AttnPoolVars {
    /// Rebuild from vars laid out in `named()` order (wq, wk).
    pub fn from_ordered(vars: &[Var], dropout: f64) -> Result<Self> {
        if vars.len() != 2 {
            return Err(Error::dim("attn_pool_vars", format!("expected 2 vars, got {}", vars.len())));
        }
        Ok(AttnPoolVars { wq: vars[0], wk: vars[1], dropout })
    }

    pub fn bind<E: Real>(tape: &mut Tape<E>, p: &AttnPoolParams<E>, trainable: bool) -> Self {
        let put = |tape: &mut Tape<E>, t: &Tensor<E>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttnPoolVars {
            wq: put(tape, &p.wq),
            wk: put(tape, &p.wk),
            dropout: p.dropout,
        }
    }
}

fn check_mask(len: usize, mask: &[u8]) -> Result<usize> {
    if mask.len() != len {
        return Err(Error::dim("pool", format!("mask length {} for {} rows", mask.len(), len)));
    }
    let live = mask.iter().filter(|&&m| m == 1).count();
    if live == 0 {
        return Err(Error::usage("pooling over an all-masked sequence"));
    }
    Ok(live)
}

/// Arithmetic mean of the rows where mask == 1, as a 1×d row.
pub fn mean_pool<E: Real>(tape: &mut Tape<E>, h: Var, mask: &[u8]) -> Result<Var> {
    let (rows, _) = {
        let t = tape.value(h);
        (t.rows(), t.cols())
    };
    let live = check_mask(rows, mask)?;
    let inv = E::one() / E::of_usize(live);
    let w: Vec<E> = mask.iter().map(|&m| if m == 1 { inv } else { E::zero() }).collect();
    let w = tape.constant(Tensor::matrix(1, rows, w)?);
    tape.matmul(w, h)
}

/// Row 0 of the sequence, as a 1×d row.
pub fn cls_pool<E: Real>(tape: &mut Tape<E>, h: Var) -> Result<Var> {
    tape.select_row(h, 0)
}

/// CLS-query attention pooling. Returns the pooled 1×d vector and the 1×L
/// attention weights (exactly zero at masked positions).
pub fn attn_pool<E: Real>(
    tape: &mut Tape<E>,
    h: Var,
    mask: &[u8],
    p: &AttnPoolVars,
    mode: Mode,
) -> Result<(Var, Var)> {
    let rows = tape.value(h).rows();
    check_mask(rows, mask)?;
    if mask[0] != 1 {
        return Err(Error::usage("attention pooling requires an unmasked row 0"));
    }
    let d_a = tape.value(p.wq).cols();
    let cls = tape.select_row(h, 0)?;
    let q = tape.matmul(cls, p.wq)?;
    let k = tape.matmul(h, p.wk)?;
    let mut s = tape.matmul_bt(q, k)?;
    s = tape.scale(s, E::one() / E::of_usize(d_a).sqrt())?;
    // Score dropout precedes the mask offset so a dropped score can never
    // unmask a padded position.
    if mode.is_train() && p.dropout > 0.0 {
        s = tape.dropout(s, p.dropout)?;
    }
    let off: Vec<E> = mask
        .iter()
        .map(|&m| if m == 1 { E::zero() } else { E::of_f64(MASK_OFF) })
        .collect();
    let off = tape.constant(Tensor::matrix(1, rows, off)?);
    s = tape.add(s, off)?;
    let weights = tape.softmax(s)?;
    let v = tape.matmul(weights, h)?;
    Ok((v, weights))
}

/// Attention pooling applied independently per label with that label's
/// parameters.
pub fn per_label_attn_pool<E: Real>(
    tape: &mut Tape<E>,
    h: Var,
    mask: &[u8],
    p: &PerLabel<AttnPoolVars>,
    mode: Mode,
) -> Result<PerLabel<(Var, Var)>> {
    Ok(PerLabel::new(
        attn_pool(tape, h, mask, &p.jailbreak, mode)?,
        attn_pool(tape, h, mask, &p.prompt_injection, mode)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[rows, cols], std, &mut rng)
    }

    fn pool_vars(tape: &mut Tape<f64>, wq: Tensor<f64>, wk: Tensor<f64>) -> AttnPoolVars {
        AttnPoolVars {
            wq: tape.leaf(wq),
            wk: tape.leaf(wk),
            dropout: 0.0,
        }
    }

    #[test]
    fn mean_pool_averages_live_rows() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 10.0, 3.0, 30.0, 99.0, 99.0]).unwrap());
        let v = mean_pool(&mut tape, h, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 20.0]);
    }

    #[test]
    fn mean_pool_single_live_row_is_that_row() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(2, 2, vec![5.0, -1.0, 7.0, 7.0]).unwrap());
        let v = mean_pool(&mut tape, h, &[0, 1]).unwrap();
        assert_eq!(tape.value(v).data(), &[7.0, 7.0]);
    }

    #[test]
    fn mean_pool_ignores_masked_row_values() {
        let base = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let mut junk = base.clone();
        junk.data_mut()[4] = 1e12;
        junk.data_mut()[5] = -7.5;
        let mask = [1, 1, 0];
        let mut t1 = Tape::<f64>::new();
        let h1 = t1.leaf(base);
        let v1 = mean_pool(&mut t1, h1, &mask).unwrap();
        let mut t2 = Tape::<f64>::new();
        let h2 = t2.leaf(junk);
        let v2 = mean_pool(&mut t2, h2, &mask).unwrap();
        assert_eq!(t1.value(v1).data(), t2.value(v2).data());
    }

    #[test]
    fn mean_pool_rejects_all_masked() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = mean_pool(&mut tape, h, &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn cls_pool_is_row_zero_regardless_of_rest() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(3, 2, vec![0.5, -2.0, 9.0, 9.0, 8.0, 8.0]).unwrap());
        let v = cls_pool(&mut tape, h).unwrap();
        assert_eq!(tape.value(v).data(), &[0.5, -2.0]);

        let mut t2 = Tape::<f64>::new();
        let h2 = t2.leaf(Tensor::matrix(3, 2, vec![0.5, -2.0, -4.0, 1.0, 2.0, 3.0]).unwrap());
        let v2 = cls_pool(&mut t2, h2).unwrap();
        assert_eq!(t2.value(v2).data(), tape.value(v).data());
    }

    #[test]
    fn zero_query_projection_reduces_to_mean_pool() {
        let h_t = randn(5, 4, 1.0, 7);
        let mask = [1, 1, 1, 1, 0];
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(h_t.clone());
        let p = pool_vars(&mut tape, Tensor::zeros(&[4, 4]), randn(4, 4, 0.5, 8));
        let (v, w) = attn_pool(&mut tape, h, &mask, &p, Mode::Eval).unwrap();
        let m = mean_pool(&mut tape, h, &mask).unwrap();
        for (a, b) in tape.value(v).data().iter().zip(tape.value(m).data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (i, &wi) in tape.value(w).data().iter().enumerate() {
            if mask[i] == 1 {
                assert!((wi - 0.25).abs() < 1e-12);
            } else {
                assert_eq!(wi, 0.0);
            }
        }
    }

    #[test]
    fn single_row_gets_weight_one() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let p = pool_vars(&mut tape, randn(3, 3, 0.5, 1), randn(3, 3, 0.5, 2));
        let (v, w) = attn_pool(&mut tape, h, &[1], &p, Mode::Eval).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(v).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let p = pool_vars(&mut tape, Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let (v, w) = attn_pool(&mut tape, h, &[1, 1], &p, Mode::Eval).unwrap();
        let w = tape.value(w).data().to_vec();
        assert!((w[0] - 0.2689414213699951).abs() < 1e-15);
        assert!((w[1] - 0.7310585786300049).abs() < 1e-15);
        assert!((tape.value(v).data()[0] - 1.7310585786300048).abs() < 1e-15);
    }

    #[test]
    fn weights_form_a_masked_distribution() {
        let h_t = randn(6, 4, 1.0, 11);
        let mask = [1, 1, 1, 0, 1, 0];
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(h_t);
        let p = pool_vars(&mut tape, randn(4, 4, 0.5, 12), randn(4, 4, 0.5, 13));
        let (_, w) = attn_pool(&mut tape, h, &mask, &p, Mode::Eval).unwrap();
        let w = tape.value(w).data();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for (i, &wi) in w.iter().enumerate() {
            assert!(wi >= 0.0);
            if mask[i] == 0 {
                assert_eq!(wi, 0.0);
            }
        }
    }

    #[test]
    fn pooled_vector_is_convex_combination_of_live_rows() {
        let h_t = randn(5, 3, 2.0, 21);
        let mask = [1, 1, 0, 1, 1];
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(h_t.clone());
        let p = pool_vars(&mut tape, randn(3, 3, 0.6, 22), randn(3, 3, 0.6, 23));
        let (v, _) = attn_pool(&mut tape, h, &mask, &p, Mode::Eval).unwrap();
        let v = tape.value(v).data();
        for (c, &vc) in v.iter().enumerate() {
            let live: Vec<f64> = (0..5).filter(|&r| mask[r] == 1).map(|r| h_t.at2(r, c)).collect();
            let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(vc >= lo - 1e-12 && vc <= hi + 1e-12);
        }
    }

    #[test]
    fn rejects_masked_cls_and_all_masked() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::zeros(&[2, 2]));
        let p = pool_vars(&mut tape, Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
        assert!(matches!(attn_pool(&mut tape, h, &[0, 1], &p, Mode::Eval), Err(Error::Usage(_))));
        assert!(matches!(attn_pool(&mut tape, h, &[0, 0], &p, Mode::Eval), Err(Error::Usage(_))));
    }

    #[test]
    fn train_mode_dropout_keeps_masked_weights_zero() {
        let h_t = randn(5, 4, 1.0, 31);
        let mask = [1, 1, 1, 1, 0];
        for seed in 0..20u64 {
            let mut tape = Tape::<f64>::with_seed(seed);
            let h = tape.leaf(h_t.clone());
            let mut p = pool_vars(&mut tape, randn(4, 4, 0.5, 32), randn(4, 4, 0.5, 33));
            p.dropout = 0.5;
            let (_, w) = attn_pool(&mut tape, h, &mask, &p, Mode::Train).unwrap();
            let w = tape.value(w).data();
            assert_eq!(w[4], 0.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_mode_ignores_dropout_rate() {
        let h_t = randn(4, 3, 1.0, 41);
        let run = |dropout: f64| {
            let mut tape = Tape::<f64>::with_seed(9);
            let h = tape.leaf(h_t.clone());
            let mut p = pool_vars(&mut tape, randn(3, 3, 0.5, 42), randn(3, 3, 0.5, 43));
            p.dropout = dropout;
            let (v, _) = attn_pool(&mut tape, h, &[1, 1, 1, 0], &p, Mode::Eval).unwrap();
            tape.value(v).data().to_vec()
        };
        assert_eq!(run(0.0), run(0.9));
    }

    #[test]
    fn per_label_shared_params_give_identical_outputs() {
        let h_t = randn(5, 4, 1.0, 51);
        let mask = [1, 1, 1, 0, 0];
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(h_t);
        let shared = pool_vars(&mut tape, randn(4, 4, 0.5, 52), randn(4, 4, 0.5, 53));
        let p = PerLabel::new(shared, shared);
        let out = per_label_attn_pool(&mut tape, h, &mask, &p, Mode::Eval).unwrap();
        assert_eq!(tape.value(out.jailbreak.0).data(), tape.value(out.prompt_injection.0).data());
        assert_eq!(tape.value(out.jailbreak.1).data(), tape.value(out.prompt_injection.1).data());
    }

    #[test]
    fn per_label_params_are_independent() {
        let h_t = randn(5, 4, 1.0, 61);
        let mask = [1, 1, 1, 1, 1];
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(h_t);
        let zeroed = pool_vars(&mut tape, Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]));
        let generic = pool_vars(&mut tape, randn(4, 4, 0.8, 62), randn(4, 4, 0.8, 63));
        let p = PerLabel::new(zeroed, generic);
        let out = per_label_attn_pool(&mut tape, h, &mask, &p, Mode::Eval).unwrap();
        let m = mean_pool(&mut tape, h, &mask).unwrap();
        let jb = tape.value(out.jailbreak.0).data().to_vec();
        let pi = tape.value(out.prompt_injection.0).data().to_vec();
        for (a, b) in jb.iter().zip(tape.value(m).data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(jb.iter().zip(&pi).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn gradient_check_through_attn_pool() {
        let leaves = vec![randn(4, 3, 0.8, 71), randn(3, 3, 0.5, 72), randn(3, 3, 0.5, 73)];
        let mask = [1u8, 1, 1, 0];
        let report = finite_diff_check(
            |tape, vars| {
                let p = AttnPoolVars { wq: vars[1], wk: vars[2], dropout: 0.0 };
                let (v, _) = attn_pool(tape, vars[0], &mask, &p, Mode::Eval)?;
                tape.sum(v)
            },
            &leaves,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "attn_pool grad rel err {}", report.max_rel_err);
    }
}
