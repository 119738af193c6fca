use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::Tensor;

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Train enables stochastic regularization (dropout); Eval disables it.
/// Orthogonal to whether the tape records for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

pub const MASK_OFF: f64 = -1e9;

enum Node<E> {
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: E, out: usize },
    AddBias { x: usize, b: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    MatmulBt { a: usize, b: usize, out: usize },
    Transpose { a: usize, out: usize },
    SelectRow { x: usize, r: usize, out: usize },
    Embed { table: usize, ids: Vec<usize>, out: usize },
    Softmax { x: usize, out: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<E>, inv_std: Vec<E>, out: usize },
    Gelu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Tanh { x: usize, out: usize },
    Dropout { x: usize, mask: Vec<E>, out: usize },
    Attention { q: usize, k: usize, v: usize, n_heads: usize, attn: Vec<E>, out: usize },
    Sum { x: usize, out: usize },
    Bce { logits: usize, targets: Tensor<E>, weights: Tensor<E>, out: usize },
    Focal { logits: usize, targets: Tensor<E>, weights: Tensor<E>, gamma: f64, out: usize },
}

/// Arena-style Wengert list. Ops append values (and, while recording,
/// backward nodes); `backward` walks the list in reverse once.
pub struct Tape<E: Real = f64> {
    vals: Vec<Tensor<E>>,
    requires: Vec<bool>,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    recording: bool,
    done: bool,
    rng: Option<ChaCha8Rng>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape { vals: vec![], requires: vec![], nodes: vec![], grads: vec![], recording: true, done: false, rng: None }
    }

    /// Recording tape with a dropout RNG.
    pub fn with_seed(seed: u64) -> Self {
        let mut t = Self::new();
        t.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        t
    }

    /// Forward-only tape: ops execute but nothing is recorded, so
    /// `backward` is unavailable. Used for frozen inference.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, true)
    }

    /// Non-trainable input (data, masks, fixed coefficients).
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.vals[v.0].shape()),
        }
    }

    fn push(&mut self, t: Tensor<E>, requires: bool) -> Var {
        self.vals.push(t);
        self.requires.push(requires && self.recording);
        Var(self.vals.len() - 1)
    }

    fn wants_grad(&self, ins: &[usize]) -> bool {
        self.recording && ins.iter().any(|&i| self.requires[i])
    }

    /// Non-finite outputs (overflow, NaN) are errors, not silent values.
    fn emit(&mut self, op: &'static str, t: Tensor<E>, requires: bool, node: Option<Node<E>>) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::Training(format!("non-finite value produced by {op}")));
        }
        let v = self.push(t, requires);
        if let Some(n) = node {
            self.nodes.push(n);
        }
        Ok(v)
    }

    // ---- ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[a.0, b.0]);
        let node = rec.then_some(Node::Add { a: a.0, b: b.0, out: self.vals.len() });
        self.emit("add", out, rec, node)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[a.0, b.0]);
        let node = rec.then_some(Node::Mul { a: a.0, b: b.0, out: self.vals.len() });
        self.emit("mul", out, rec, node)
    }

    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data = ta.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[a.0]);
        let node = rec.then_some(Node::Scale { a: a.0, c, out: self.vals.len() });
        self.emit("scale", out, rec, node)
    }

    /// Row-broadcast add: x is [n, d] (or [d]), b is [d].
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[b.0]);
        if tb.rank() != 1 || tx.cols() != tb.len() {
            return Err(Error::dim("add_bias", format!("{:?} vs bias {:?}", tx.shape(), tb.shape())));
        }
        let cols = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % cols]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0, b.0]);
        let node = rec.then_some(Node::AddBias { x: x.0, b: b.0, out: self.vals.len() });
        self.emit("add_bias", out, rec, node)
    }

    /// [n, k] x [k, m] -> [n, m]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let data = mm_nn(ta.data(), tb.data(), n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        let rec = self.wants_grad(&[a.0, b.0]);
        let node = rec.then_some(Node::Matmul { a: a.0, b: b.0, out: self.vals.len() });
        self.emit("matmul", out, rec, node)
    }

    /// [n, k] x [m, k]^T -> [n, m]
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Error::dim("matmul_bt", format!("{:?} x {:?}^T", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let data = mm_nt(ta.data(), tb.data(), n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        let rec = self.wants_grad(&[a.0, b.0]);
        let node = rec.then_some(Node::MatmulBt { a: a.0, b: b.0, out: self.vals.len() });
        self.emit("matmul_bt", out, rec, node)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", ta.shape())));
        }
        let (n, m) = (ta.rows(), ta.cols());
        let out = Tensor::new(vec![m, n], transpose_data(ta.data(), n, m))?;
        let rec = self.wants_grad(&[a.0]);
        let node = rec.then_some(Node::Transpose { a: a.0, out: self.vals.len() });
        self.emit("transpose", out, rec, node)
    }

    /// Row `r` of a [n, d] matrix as [1, d].
    pub fn select_row(&mut self, x: Var, r: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        if tx.rank() != 2 || r >= tx.rows() {
            return Err(Error::dim("select_row", format!("row {} of {:?}", r, tx.shape())));
        }
        let out = Tensor::new(vec![1, tx.cols()], tx.row(r).to_vec())?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::SelectRow { x: x.0, r, out: self.vals.len() });
        self.emit("select_row", out, rec, node)
    }

    /// Gather rows of `table` ([v, d]) by id -> [len, d]. Backward
    /// scatter-adds, so repeated ids accumulate.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.vals[table.0];
        if tt.rank() != 2 {
            return Err(Error::dim("embed", format!("table {:?}", tt.shape())));
        }
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embed", format!("id {} out of range for table with {} rows", bad, v)));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rec = self.wants_grad(&[table.0]);
        let node = rec.then(|| Node::Embed { table: table.0, ids: ids.to_vec(), out: self.vals.len() });
        self.emit("embed", out, rec, node)
    }

    /// Row-wise softmax with max subtraction. Rank-1 input is one row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        if tx.rank() == 0 || tx.rank() > 2 {
            return Err(Error::dim("softmax", format!("{:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![E::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(&tx.data()[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Softmax { x: x.0, out: self.vals.len() });
        self.emit("softmax", out, rec, node)
    }

    /// Per-row normalization of [n, d] (or [d]) with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let (rows, cols) = (tx.rows(), tx.cols());
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let epse = E::of_f64(eps);
        let mut xhat = vec![E::zero(); rows * cols];
        let mut inv_std = vec![E::zero(); rows];
        let mut data = vec![E::zero(); rows * cols];
        let inv_n = E::one() / E::of_usize(cols);
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(E::zero(), |s, &v| s + v) * inv_n;
            let var = row.iter().fold(E::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_n;
            let is = E::one() / (var + epse).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                data[r * cols + c] = xh * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0, gamma.0, beta.0]);
        let node = rec.then_some(Node::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            out: self.vals.len(),
        });
        self.emit("layer_norm", out, rec, node)
    }

    /// Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let inv_sqrt2 = E::of_f64(std::f64::consts::FRAC_1_SQRT_2);
        let half = E::of_f64(0.5);
        let data = tx.data().iter().map(|&v| half * v * (E::one() + (v * inv_sqrt2).erf())).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Gelu { x: x.0, out: self.vals.len() });
        self.emit("gelu", out, rec, node)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Sigmoid { x: x.0, out: self.vals.len() });
        self.emit("sigmoid", out, rec, node)
    }

    pub fn tanh_act(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Tanh { x: x.0, out: self.vals.len() });
        self.emit("tanh", out, rec, node)
    }

    /// Inverted dropout: kept entries scale by 1/(1-rate) so eval needs
    /// no rescaling. Requires a seeded tape; call only in train mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_mut().ok_or_else(|| Error::state("dropout needs a tape seeded via with_seed"))?;
        let keep = 1.0 - rate;
        let inv = E::of_f64(1.0 / keep);
        let tx = &self.vals[x.0];
        let mask: Vec<E> =
            (0..tx.len()).map(|_| if rng.gen::<f64>() < keep { inv } else { E::zero() }).collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Dropout { x: x.0, mask, out: self.vals.len() });
        self.emit("dropout", out, rec, node)
    }

    /// Fused multi-head self-attention over already-projected q/k/v
    /// ([L, d] each). `mask[j] == 0` hides key j from every query via a
    /// -1e9 additive score, which underflows to an exactly-zero weight.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &[u8], n_heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (&self.vals[q.0], &self.vals[k.0], &self.vals[v.0]);
        let shape = tq.shape().to_vec();
        if tk.shape() != shape.as_slice() || tv.shape() != shape.as_slice() || tq.rank() != 2 {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (l, d) = (tq.rows(), tq.cols());
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim("attention", format!("width {} not divisible by {} heads", d, n_heads)));
        }
        if mask.len() != l {
            return Err(Error::dim("attention", format!("mask length {} vs {} rows", mask.len(), l)));
        }
        if !mask.contains(&1) {
            return Err(Error::data("attention mask hides every position"));
        }
        let dh = d / n_heads;
        let scale = E::of_f64(1.0 / (dh as f64).sqrt());
        let off = E::of_f64(MASK_OFF);
        let mut attn = vec![E::zero(); n_heads * l * l];
        let mut data = vec![E::zero(); l * d];
        let mut scores = vec![E::zero(); l];
        for h in 0..n_heads {
            let col0 = h * dh;
            for i in 0..l {
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = E::zero();
                    for c in 0..dh {
                        dot = dot + tq.at2(i, col0 + c) * tk.at2(j, col0 + c);
                    }
                    *s = dot * scale + if mask[j] == 1 { E::zero() } else { off };
                }
                let a_row = &mut attn[(h * l + i) * l..(h * l + i + 1) * l];
                softmax_row(&scores, a_row);
                for (j, &w) in a_row.iter().enumerate() {
                    if w != E::zero() {
                        for c in 0..dh {
                            data[i * d + col0 + c] = data[i * d + col0 + c] + w * tv.at2(j, col0 + c);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![l, d], data)?;
        let rec = self.wants_grad(&[q.0, k.0, v.0]);
        let node = rec.then_some(Node::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            n_heads,
            attn,
            out: self.vals.len(),
        });
        self.emit("attention", out, rec, node)
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let s = tx.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let out = Tensor::scalar(s);
        let rec = self.wants_grad(&[x.0]);
        let node = rec.then_some(Node::Sum { x: x.0, out: self.vals.len() });
        self.emit("sum", out, rec, node)
    }

    /// Weighted binary cross-entropy on logits, averaged over elements:
    /// mean_i w_i * (max(z_i, 0) - z_i * t_i + ln(1 + e^-|z_i|)).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<E>, weights: &Tensor<E>) -> Result<Var> {
        self.check_loss_args("bce", logits, targets, weights)?;
        let tz = &self.vals[logits.0];
        let n = E::of_usize(tz.len());
        let mut acc = E::zero();
        for ((&z, &t), &w) in tz.data().iter().zip(targets.data()).zip(weights.data()) {
            acc = acc + w * (z.max(E::zero()) - z * t + (-z.abs()).exp().ln_1p());
        }
        let out = Tensor::scalar(acc / n);
        let rec = self.wants_grad(&[logits.0]);
        let node = rec.then(|| Node::Bce {
            logits: logits.0,
            targets: targets.clone(),
            weights: weights.clone(),
            out: self.vals.len(),
        });
        self.emit("bce", out, rec, node)
    }

    /// Focal loss on logits, averaged over elements. With s = 2t - 1 and
    /// u = s * z: mean_i w_i * sigmoid(-u_i)^gamma * softplus(-u_i).
    /// gamma = 0 reproduces `bce_with_logits` exactly.
    pub fn focal_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor<E>,
        weights: &Tensor<E>,
        gamma: f64,
    ) -> Result<Var> {
        self.check_loss_args("focal", logits, targets, weights)?;
        if gamma < 0.0 {
            return Err(Error::config(format!("focal gamma {gamma} must be >= 0")));
        }
        let tz = &self.vals[logits.0];
        let n = E::of_usize(tz.len());
        let mut acc = E::zero();
        for ((&z, &t), &w) in tz.data().iter().zip(targets.data()).zip(weights.data()) {
            let s = t + t - E::one();
            let u = s * z;
            let sig_nu = stable_sigmoid(-u);
            let sp = softplus(-u);
            acc = acc + w * pow_gamma(sig_nu, gamma) * sp;
        }
        let out = Tensor::scalar(acc / n);
        let rec = self.wants_grad(&[logits.0]);
        let node = rec.then(|| Node::Focal {
            logits: logits.0,
            targets: targets.clone(),
            weights: weights.clone(),
            gamma,
            out: self.vals.len(),
        });
        self.emit("focal", out, rec, node)
    }

    fn check_loss_args(&self, op: &'static str, logits: Var, targets: &Tensor<E>, weights: &Tensor<E>) -> Result<()> {
        let tz = &self.vals[logits.0];
        if targets.len() != tz.len() || weights.len() != tz.len() {
            return Err(Error::dim(
                op,
                format!("logits {:?}, targets {:?}, weights {:?}", tz.shape(), targets.shape(), weights.shape()),
            ));
        }
        if targets.data().iter().any(|&t| t != E::zero() && t != E::one()) {
            return Err(Error::data(format!("{op} targets must be 0 or 1")));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. One shot per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::state("backward on an inference tape"));
        }
        if self.done {
            return Err(Error::state("backward already ran on this tape"));
        }
        if self.vals[loss.0].len() != 1 {
            return Err(Error::dim("backward", format!("loss shape {:?} is not scalar", self.vals[loss.0].shape())));
        }
        self.done = true;
        self.grads = vec![None; self.vals.len()];
        self.grads[loss.0] = Some(Tensor::filled(self.vals[loss.0].shape(), E::one()));
        for ni in (0..self.nodes.len()).rev() {
            self.step_node(ni);
        }
        Ok(())
    }

    fn step_node(&mut self, ni: usize) {
        let out_idx = match &self.nodes[ni] {
            Node::Add { out, .. }
            | Node::Mul { out, .. }
            | Node::Scale { out, .. }
            | Node::AddBias { out, .. }
            | Node::Matmul { out, .. }
            | Node::MatmulBt { out, .. }
            | Node::Transpose { out, .. }
            | Node::SelectRow { out, .. }
            | Node::Embed { out, .. }
            | Node::Softmax { out, .. }
            | Node::LayerNorm { out, .. }
            | Node::Gelu { out, .. }
            | Node::Sigmoid { out, .. }
            | Node::Tanh { out, .. }
            | Node::Dropout { out, .. }
            | Node::Attention { out, .. }
            | Node::Sum { out, .. }
            | Node::Bce { out, .. }
            | Node::Focal { out, .. } => *out,
        };
        let Some(g) = self.grads[out_idx].take() else { return };
        match &self.nodes[ni] {
            Node::Add { a, b, .. } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Node::Mul { a, b, .. } => {
                let (a, b) = (*a, *b);
                let da = elementwise_mul(&g, &self.vals[b]);
                let db = elementwise_mul(&g, &self.vals[a]);
                self.accum(a, da);
                self.accum(b, db);
            }
            Node::Scale { a, c, .. } => {
                let (a, c) = (*a, *c);
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&v| v * c).collect()).unwrap();
                self.accum(a, da);
            }
            Node::AddBias { x, b, .. } => {
                let (x, b) = (*x, *b);
                let cols = self.vals[b].len();
                let mut db = vec![E::zero(); cols];
                for (i, &v) in g.data().iter().enumerate() {
                    db[i % cols] = db[i % cols] + v;
                }
                self.accum(x, g.clone());
                self.accum(b, Tensor::vector(db));
            }
            Node::Matmul { a, b, .. } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.vals[a].rows(), self.vals[a].cols());
                let m = self.vals[b].cols();
                let da = Tensor::new(vec![n, k], mm_nt(g.data(), self.vals[b].data(), n, m, k)).unwrap();
                let db = Tensor::new(vec![k, m], mm_tn(self.vals[a].data(), g.data(), n, k, m)).unwrap();
                self.accum(a, da);
                self.accum(b, db);
            }
            Node::MatmulBt { a, b, .. } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.vals[a].rows(), self.vals[a].cols());
                let m = self.vals[b].rows();
                let da = Tensor::new(vec![n, k], mm_nn(g.data(), self.vals[b].data(), n, m, k)).unwrap();
                let db = Tensor::new(vec![m, k], mm_tn(g.data(), self.vals[a].data(), n, m, k)).unwrap();
                self.accum(a, da);
                self.accum(b, db);
            }
            Node::Transpose { a, .. } => {
                let a = *a;
                let (m, n) = (g.rows(), g.cols());
                let da = Tensor::new(vec![n, m], transpose_data(g.data(), m, n)).unwrap();
                self.accum(a, da);
            }
            Node::SelectRow { x, r, .. } => {
                let (x, r) = (*x, *r);
                let mut dx = Tensor::zeros(self.vals[x].shape());
                let cols = self.vals[x].cols();
                dx.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                self.accum(x, dx);
            }
            Node::Embed { table, ids, .. } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.vals[table].cols();
                let mut dt = Tensor::zeros(self.vals[table].shape());
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (c, &v) in g.data()[row * d..(row + 1) * d].iter().enumerate() {
                        dst[c] = dst[c] + v;
                    }
                }
                self.accum(table, dt);
            }
            Node::Softmax { x, out } => {
                let (x, out) = (*x, *out);
                let y = &self.vals[out];
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    softmax_backward_row(
                        &y.data()[r * cols..(r + 1) * cols],
                        &g.data()[r * cols..(r + 1) * cols],
                        &mut dx[r * cols..(r + 1) * cols],
                    );
                }
                self.accum(x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Node::LayerNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (xhat, inv_std) = (xhat.clone(), inv_std.clone());
                let tg = self.vals[gamma].clone();
                let (rows, cols) = (self.vals[x].rows(), self.vals[x].cols());
                let inv_n = E::one() / E::of_usize(cols);
                let mut dx = vec![E::zero(); rows * cols];
                let mut dgamma = vec![E::zero(); cols];
                let mut dbeta = vec![E::zero(); cols];
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for c in 0..cols {
                        let dxh = grow[c] * tg.data()[c];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh[c];
                        dgamma[c] = dgamma[c] + grow[c] * xh[c];
                        dbeta[c] = dbeta[c] + grow[c];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for c in 0..cols {
                        let dxh = grow[c] * tg.data()[c];
                        dx[r * cols + c] = inv_std[r] * (dxh - m1 - xh[c] * m2);
                    }
                }
                self.accum(x, Tensor::new(self.vals[x].shape().to_vec(), dx).unwrap());
                self.accum(gamma, Tensor::vector(dgamma));
                self.accum(beta, Tensor::vector(dbeta));
            }
            Node::Gelu { x, .. } => {
                let x = *x;
                let inv_sqrt2 = E::of_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = E::of_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = E::of_f64(0.5);
                let dx: Vec<E> = self.vals[x]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &go)| {
                        let cdf = half * (E::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-(v * v) * half).exp();
                        go * (cdf + v * pdf)
                    })
                    .collect();
                self.accum(x, Tensor::new(self.vals[x].shape().to_vec(), dx).unwrap());
            }
            Node::Sigmoid { x, out } => {
                let (x, out) = (*x, *out);
                let dx: Vec<E> = self.vals[out]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &go)| go * y * (E::one() - y))
                    .collect();
                self.accum(x, Tensor::new(self.vals[x].shape().to_vec(), dx).unwrap());
            }
            Node::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                let dx: Vec<E> = self.vals[out]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &go)| go * (E::one() - y * y))
                    .collect();
                self.accum(x, Tensor::new(self.vals[x].shape().to_vec(), dx).unwrap());
            }
            Node::Dropout { x, mask, .. } => {
                let x = *x;
                let dx: Vec<E> = mask.iter().zip(g.data()).map(|(&m, &go)| go * m).collect();
                self.accum(x, Tensor::new(self.vals[x].shape().to_vec(), dx).unwrap());
            }
            Node::Attention { q, k, v, n_heads, attn, .. } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let attn = attn.clone();
                let (l, d) = (self.vals[q].rows(), self.vals[q].cols());
                let dh = d / n_heads;
                let scale = E::of_f64(1.0 / (dh as f64).sqrt());
                let (tq, tk, tv) = (self.vals[q].clone(), self.vals[k].clone(), self.vals[v].clone());
                let mut dq = vec![E::zero(); l * d];
                let mut dk = vec![E::zero(); l * d];
                let mut dv = vec![E::zero(); l * d];
                let mut da = vec![E::zero(); l];
                let mut ds = vec![E::zero(); l];
                for h in 0..n_heads {
                    let col0 = h * dh;
                    for i in 0..l {
                        let a_row = &attn[(h * l + i) * l..(h * l + i + 1) * l];
                        // dA[i][j] = dot(dO[i, head], V[j, head]); dV via A^T dO
                        for j in 0..l {
                            let mut acc = E::zero();
                            for c in 0..dh {
                                let go = g.data()[i * d + col0 + c];
                                acc = acc + go * tv.at2(j, col0 + c);
                                dv[j * d + col0 + c] = dv[j * d + col0 + c] + a_row[j] * go;
                            }
                            da[j] = acc;
                        }
                        softmax_backward_row(a_row, &da, &mut ds);
                        for j in 0..l {
                            let dsij = ds[j] * scale;
                            if dsij != E::zero() {
                                for c in 0..dh {
                                    dq[i * d + col0 + c] = dq[i * d + col0 + c] + dsij * tk.at2(j, col0 + c);
                                    dk[j * d + col0 + c] = dk[j * d + col0 + c] + dsij * tq.at2(i, col0 + c);
                                }
                            }
                        }
                    }
                }
                self.accum(q, Tensor::new(vec![l, d], dq).unwrap());
                self.accum(k, Tensor::new(vec![l, d], dk).unwrap());
                self.accum(v, Tensor::new(vec![l, d], dv).unwrap());
            }
            Node::Sum { x, .. } => {
                let x = *x;
                let go = g.data()[0];
                self.accum(x, Tensor::filled(self.vals[x].shape(), go));
            }
            Node::Bce { logits, targets, weights, .. } => {
                let logits = *logits;
                let go = g.data()[0];
                let n = E::of_usize(self.vals[logits].len());
                let dz: Vec<E> = self.vals[logits]
                    .data()
                    .iter()
                    .zip(targets.data().iter().zip(weights.data()))
                    .map(|(&z, (&t, &w))| go * w * (stable_sigmoid(z) - t) / n)
                    .collect();
                self.accum(logits, Tensor::new(self.vals[logits].shape().to_vec(), dz).unwrap());
            }
            Node::Focal { logits, targets, weights, gamma, .. } => {
                let (logits, gamma) = (*logits, *gamma);
                let go = g.data()[0];
                let n = E::of_usize(self.vals[logits].len());
                let dz: Vec<E> = self.vals[logits]
                    .data()
                    .iter()
                    .zip(targets.data().iter().zip(weights.data()))
                    .map(|(&z, (&t, &w))| {
                        let s = t + t - E::one();
                        let u = s * z;
                        let sig_u = stable_sigmoid(u);
                        let sig_nu = E::one() - sig_u;
                        let sp = softplus(-u);
                        let gam = E::of_f64(gamma);
                        let dldu = -(w * pow_gamma(sig_nu, gamma) * (gam * sig_u * sp + sig_nu));
                        go * s * dldu / n
                    })
                    .collect();
                self.accum(logits, Tensor::new(self.vals[logits].shape().to_vec(), dz).unwrap());
            }
        }
    }

    fn accum(&mut self, idx: usize, add: Tensor<E>) {
        if !self.requires[idx] {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (dst, &src) in g.data_mut().iter_mut().zip(add.data()) {
                    *dst = *dst + src;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }
}

fn stable_sigmoid<E: Real>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
fn softplus<E: Real>(x: E) -> E {
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

fn pow_gamma<E: Real>(base: E, gamma: f64) -> E {
    if gamma == 0.0 {
        E::one()
    } else {
        base.powf(E::of_f64(gamma))
    }
}

fn softmax_row<E: Real>(x: &[E], out: &mut [E]) {
    let mut mx = x[0];
    for &v in &x[1..] {
        mx = mx.max(v);
    }
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = E::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// dx = y * (dy - sum(dy * y)) for one softmax row.
fn softmax_backward_row<E: Real>(y: &[E], dy: &[E], dx: &mut [E]) {
    let mut dot = E::zero();
    for (&yi, &di) in y.iter().zip(dy) {
        dot = dot + yi * di;
    }
    for ((o, &yi), &di) in dx.iter_mut().zip(y).zip(dy) {
        *o = yi * (di - dot);
    }
}

fn mm_nn<E: Real>(a: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av != E::zero() {
                let brow = &b[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

/// a [n, k] times b [m, k] transposed -> [n, m].
fn mm_nt<E: Real>(a: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// a [n, k] transposed times b [n, m] -> [k, m].
fn mm_tn<E: Real>(a: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != E::zero() {
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

fn transpose_data<E: Real>(a: &[E], n: usize, m: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn elementwise_mul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect()).unwrap()
}
