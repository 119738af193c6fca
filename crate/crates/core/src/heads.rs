//! Classification heads: a plain linear head and a deeper head built from
//! residual GELU blocks.

use rand::Rng;

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::encoder::INIT_STD;
use crate::error::Result;

/// `v · W + b` producing one logit per label.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<E> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Real> LinearHead<E> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        LinearHead { w: Tensor::randn(&[d, 2], INIT_STD, rng), b: Tensor::zeros(&[2]) }
    }

    pub fn cast<F: Real>(&self) -> LinearHead<F> {
        LinearHead { w: self.w.cast(), b: self.b.cast() }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<E>)> {
        vec![(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<E>)> {
        vec![(format!("{prefix}.w"), &mut self.w), (format!("{prefix}.b"), &mut self.b)]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearHeadVars {
    pub w: Var,
    pub b: Var,
}

impl LinearHeadVars {
    /// Rebuild from vars laid out in `named()` order (w, b).
    pub fn from_ordered(vars: &[Var]) -> Result<Self> {
        if vars.len() != 2 {
            return Err(crate::error::Error::dim("linear_head_vars", format!("expected 2 vars, got {}", vars.len())));
        }
        Ok(LinearHeadVars { w: vars[0], b: vars[1] })
    }

    pub fn bind<E: Real>(tape: &mut Tape<E>, p: &LinearHead<E>, trainable: bool) -> Self {
        let mut put = |t: &Tensor<E>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        LinearHeadVars { w: put(&p.w), b: put(&p.b) }
    }
}

/// Both label logits from a pooled 1×d row.
pub fn linear_head_forward<E: Real>(tape: &mut Tape<E>, h: &LinearHeadVars, v: Var) -> Result<Var> {
    let z = tape.matmul(v, h.w)?;
    tape.add_bias(z, h.b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<E> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

/// Projection into width h, then residual blocks `x + gelu(x·W1 + b1)·W2 + b2`,
/// then a single-logit output row.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHead<E> {
    pub proj_in: Tensor<E>,
    pub blocks: Vec<ResBlock<E>>,
    pub out: Tensor<E>,
}

impl<E: Real> ResidualHead<E> {
    pub fn init(d: usize, h: usize, n_blocks: usize, rng: &mut impl Rng) -> Self {
        ResidualHead {
            proj_in: Tensor::randn(&[d, h], INIT_STD, rng),
            blocks: (0..n_blocks)
                .map(|_| ResBlock {
                    w1: Tensor::randn(&[h, h], INIT_STD, rng),
                    b1: Tensor::zeros(&[h]),
                    w2: Tensor::randn(&[h, h], INIT_STD, rng),
                    b2: Tensor::zeros(&[h]),
                })
                .collect(),
            out: Tensor::randn(&[h, 1], INIT_STD, rng),
        }
    }

    pub fn cast<F: Real>(&self) -> ResidualHead<F> {
        ResidualHead {
            proj_in: self.proj_in.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock { w1: b.w1.cast(), b1: b.b1.cast(), w2: b.w2.cast(), b2: b.b2.cast() })
                .collect(),
            out: self.out.cast(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![(format!("{prefix}.proj_in"), &self.proj_in)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.w1"), &b.w1));
            out.push((format!("{prefix}.block{i}.b1"), &b.b1));
            out.push((format!("{prefix}.block{i}.w2"), &b.w2));
            out.push((format!("{prefix}.block{i}.b2"), &b.b2));
        }
        out.push((format!("{prefix}.out"), &self.out));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = vec![(format!("{prefix}.proj_in"), &mut self.proj_in)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}.block{i}.w1"), &mut b.w1));
            out.push((format!("{prefix}.block{i}.b1"), &mut b.b1));
            out.push((format!("{prefix}.block{i}.w2"), &mut b.w2));
            out.push((format!("{prefix}.block{i}.b2"), &mut b.b2));
        }
        out.push((format!("{prefix}.out"), &mut self.out));
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct ResidualHeadVars {
    pub proj_in: Var,
    pub blocks: Vec<ResBlockVars>,
    pub out: Var,
}

impl ResidualHeadVars {
    /// Number of tensors in `named()` order for a head with `n_blocks` blocks.
    pub fn var_count(n_blocks: usize) -> usize {
        2 + 4 * n_blocks
    }

    /// Rebuild from vars laid out in `named()` order.
    pub fn from_ordered(vars: &[Var], n_blocks: usize) -> Result<Self> {
        if vars.len() != Self::var_count(n_blocks) {
            return Err(crate::error::Error::dim(
                "residual_head_vars",
                format!("expected {} vars, got {}", Self::var_count(n_blocks), vars.len()),
            ));
        }
        let blocks = (0..n_blocks)
            .map(|i| ResBlockVars {
                w1: vars[1 + 4 * i],
                b1: vars[2 + 4 * i],
                w2: vars[3 + 4 * i],
                b2: vars[4 + 4 * i],
            })
            .collect();
        Ok(ResidualHeadVars { proj_in: vars[0], blocks, out: *vars.last().expect("checked") })
    }

    pub fn bind<E: Real>(tape: &mut Tape<E>, p: &ResidualHead<E>, trainable: bool) -> Self {
        let mut put = |t: &Tensor<E>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        ResidualHeadVars {
            proj_in: put(&p.proj_in),
            blocks: p
                .blocks
                .iter()
                .map(|b| ResBlockVars { w1: put(&b.w1), b1: put(&b.b1), w2: put(&b.w2), b2: put(&b.b2) })
                .collect(),
            out: put(&p.out),
        }
    }
}

/// Single logit (1×1) from a pooled 1×d row.
pub fn residual_head_forward<E: Real>(tape: &mut Tape<E>, h: &ResidualHeadVars, v: Var) -> Result<Var> {
    let mut x = tape.matmul(v, h.proj_in)?;
    for b in &h.blocks {
        let inner = tape.matmul(x, b.w1)?;
        let inner = tape.add_bias(inner, b.b1)?;
        let inner = tape.gelu(inner)?;
        let inner = tape.matmul(inner, b.w2)?;
        let skip = tape.add(x, inner)?;
        x = tape.add_bias(skip, b.b2)?;
    }
    tape.matmul(x, h.out)
}
