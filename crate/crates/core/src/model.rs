//! The five guard architectures assembled behind one model type: pooling
//! strategy + head kind per architecture, with shared forward plumbing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{Mode, Real, Tape, Var};
use crate::encoder::{
    encode_from_store, encode_with_vars, EncoderBackend, EncoderConfig, EncoderParams, EncoderVars,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::forests::{Boosted, Forest};
use crate::heads::{
    linear_head_forward, residual_head_forward, LinearHead, LinearHeadVars, ResidualHead,
    ResidualHeadVars,
};
use crate::labels::{Label, PerLabel};
use crate::pooling::{attn_pool, cls_pool, mean_pool, AttnPoolParams, AttnPoolVars, ATTN_DROPOUT};

pub const MAHENDRA_BLOCKS: usize = 2;
pub const RAUDRA_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Sharanga,
    Mahendra,
    Vaishnava,
    Ashwina,
    Raudra,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Sharanga, Arch::Mahendra, Arch::Vaishnava, Arch::Ashwina, Arch::Raudra];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Sharanga => "sharanga",
            Arch::Mahendra => "mahendra",
            Arch::Vaishnava => "vaishnava",
            Arch::Ashwina => "ashwina",
            Arch::Raudra => "raudra",
        }
    }

    pub fn from_name(name: &str) -> Result<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Arch::ALL.iter().map(|a| a.name()).collect();
                Error::config(format!("unknown architecture {name:?}; valid: {}", valid.join(", ")))
            })
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, Arch::Vaishnava | Arch::Ashwina)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pooling<E> {
    Mean,
    Cls,
    Attn(AttnPoolParams<E>),
    PerLabelAttn(PerLabel<AttnPoolParams<E>>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadKind<E> {
    Linear(LinearHead<E>),
    Residual(PerLabel<ResidualHead<E>>),
    Forest(PerLabel<Option<Forest>>),
    Boosted(PerLabel<Option<Boosted>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuardModel<E: Real> {
    pub arch: Arch,
    pub backend: EncoderBackend<E>,
    pub pooling: Pooling<E>,
    pub heads: HeadKind<E>,
    pub thresholds: PerLabel<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Sharanga pools with the mean by default; set for CLS pooling.
    pub sharanga_cls_pooling: bool,
    pub attn_dropout: f64,
    pub thresholds: PerLabel<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            sharanga_cls_pooling: false,
            attn_dropout: ATTN_DROPOUT,
            thresholds: PerLabel::new(0.5, 0.5),
            seed: 0,
        }
    }
}

fn check_thresholds(t: &PerLabel<f64>) -> Result<()> {
    for (label, &v) in t.iter() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::config(format!("{label} threshold must be in (0,1), got {v}")));
        }
    }
    Ok(())
}

pub fn build_model(arch: Arch, cfg: &ModelConfig) -> Result<GuardModel<f64>> {
    cfg.encoder.validate()?;
    check_thresholds(&cfg.thresholds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.encoder.d_model;
    let params = EncoderParams::init(&cfg.encoder, &mut rng);
    let backend = EncoderBackend::Learned { config: cfg.encoder.clone(), params };
    let (pooling, heads) = match arch {
        Arch::Sharanga => {
            let pooling = if cfg.sharanga_cls_pooling { Pooling::Cls } else { Pooling::Mean };
            (pooling, HeadKind::Linear(LinearHead::init(d, &mut rng)))
        }
        Arch::Mahendra => (
            Pooling::Attn(AttnPoolParams::init(d, cfg.attn_dropout, &mut rng)),
            HeadKind::Residual(PerLabel::from_fn(|_| ResidualHead::init(d, d, MAHENDRA_BLOCKS, &mut rng))),
        ),
        Arch::Vaishnava => (Pooling::Cls, HeadKind::Forest(PerLabel::new(None, None))),
        Arch::Ashwina => (Pooling::Cls, HeadKind::Boosted(PerLabel::new(None, None))),
        Arch::Raudra => (
            Pooling::PerLabelAttn(PerLabel::from_fn(|_| AttnPoolParams::init(d, cfg.attn_dropout, &mut rng))),
            HeadKind::Residual(PerLabel::from_fn(|_| ResidualHead::init(d, d, RAUDRA_BLOCKS, &mut rng))),
        ),
    };
    Ok(GuardModel { arch, backend, pooling, heads, thresholds: cfg.thresholds })
}

impl<E: Real> GuardModel<E> {
    pub fn d_model(&self) -> usize {
        self.backend.d_model()
    }

    pub fn max_len(&self) -> usize {
        self.backend.max_len()
    }

    /// All trainable tensors in canonical traversal order: encoder, pooling,
    /// heads. Tree ensembles carry no tensors.
    pub fn named_params(&self) -> Vec<(String, &crate::diffmath::Tensor<E>)> {
        let mut out = Vec::new();
        if let EncoderBackend::Learned { params, .. } = &self.backend {
            out.extend(params.named());
        }
        match &self.pooling {
            Pooling::Mean | Pooling::Cls => {}
            Pooling::Attn(p) => out.extend(p.named("pool")),
            Pooling::PerLabelAttn(p) => {
                for (label, lp) in p.iter() {
                    out.extend(lp.named(&format!("pool.{label}")));
                }
            }
        }
        match &self.heads {
            HeadKind::Linear(h) => out.extend(h.named("head")),
            HeadKind::Residual(h) => {
                for (label, lh) in h.iter() {
                    out.extend(lh.named(&format!("head.{label}")));
                }
            }
            HeadKind::Forest(_) | HeadKind::Boosted(_) => {}
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut crate::diffmath::Tensor<E>)> {
        let mut out = Vec::new();
        if let EncoderBackend::Learned { params, .. } = &mut self.backend {
            out.extend(params.named_mut());
        }
        match &mut self.pooling {
            Pooling::Mean | Pooling::Cls => {}
            Pooling::Attn(p) => out.extend(p.named_mut("pool")),
            Pooling::PerLabelAttn(p) => {
                out.extend(p.jailbreak.named_mut("pool.jailbreak"));
                out.extend(p.prompt_injection.named_mut("pool.prompt_injection"));
            }
        }
        match &mut self.heads {
            HeadKind::Linear(h) => out.extend(h.named_mut("head")),
            HeadKind::Residual(h) => {
                out.extend(h.jailbreak.named_mut("head.jailbreak"));
                out.extend(h.prompt_injection.named_mut("head.prompt_injection"));
            }
            HeadKind::Forest(_) | HeadKind::Boosted(_) => {}
        }
        out
    }

    pub fn freeze<F: Real>(&self) -> GuardModel<F> {
        GuardModel {
            arch: self.arch,
            backend: match &self.backend {
                EncoderBackend::Learned { config, params } => {
                    EncoderBackend::Learned { config: config.clone(), params: params.cast() }
                }
                EncoderBackend::Precomputed(store) => EncoderBackend::Precomputed(store.clone()),
            },
            pooling: match &self.pooling {
                Pooling::Mean => Pooling::Mean,
                Pooling::Cls => Pooling::Cls,
                Pooling::Attn(p) => Pooling::Attn(p.cast()),
                Pooling::PerLabelAttn(p) => Pooling::PerLabelAttn(p.as_ref().map(|lp| lp.cast())),
            },
            heads: match &self.heads {
                HeadKind::Linear(h) => HeadKind::Linear(h.cast()),
                HeadKind::Residual(h) => HeadKind::Residual(h.as_ref().map(|lh| lh.cast())),
                HeadKind::Forest(f) => HeadKind::Forest(f.clone()),
                HeadKind::Boosted(b) => HeadKind::Boosted(b.clone()),
            },
            thresholds: self.thresholds,
        }
    }

    /// Per-label decisions plus the combined flag: malicious iff either label
    /// crosses its threshold.
    pub fn decide(&self, probs: &PerLabel<f64>) -> Decision {
        let flags = PerLabel::from_fn(|l| *probs.get(l) >= *self.thresholds.get(l));
        Decision { malicious: flags.jailbreak || flags.prompt_injection, flags }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub flags: PerLabel<bool>,
    pub malicious: bool,
}

#[derive(Clone, Debug)]
pub enum PoolingVars {
    Mean,
    Cls,
    Attn(AttnPoolVars),
    PerLabelAttn(PerLabel<AttnPoolVars>),
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    Linear(LinearHeadVars),
    Residual(PerLabel<ResidualHeadVars>),
}

/// One tape's view of a neural model: every parameter bound in `named_params`
/// order, plus the typed structure over those vars.
#[derive(Clone, Debug)]
pub struct NeuralVars {
    pub encoder: Option<EncoderVars>,
    pub pooling: PoolingVars,
    pub heads: HeadVars,
    pub flat: Vec<Var>,
}

pub fn bind_neural<E: Real>(tape: &mut Tape<E>, model: &GuardModel<E>, trainable: bool) -> Result<NeuralVars> {
    let named = model.named_params();
    let flat: Vec<Var> = named
        .iter()
        .map(|(_, t)| if trainable { tape.leaf((*t).clone()) } else { tape.constant((*t).clone()) })
        .collect();
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &flat[at..at + n];
        at += n;
        s
    };
    let encoder = match &model.backend {
        EncoderBackend::Learned { config, .. } => {
            let n = 2 + 15 * config.n_layers;
            Some(EncoderVars::from_ordered(take(n), config.n_layers)?)
        }
        EncoderBackend::Precomputed(_) => None,
    };
    let pooling = match &model.pooling {
        Pooling::Mean => PoolingVars::Mean,
        Pooling::Cls => PoolingVars::Cls,
        Pooling::Attn(p) => PoolingVars::Attn(AttnPoolVars::from_ordered(take(2), p.dropout)?),
        Pooling::PerLabelAttn(p) => PoolingVars::PerLabelAttn(PerLabel::new(
            AttnPoolVars::from_ordered(take(2), p.jailbreak.dropout)?,
            AttnPoolVars::from_ordered(take(2), p.prompt_injection.dropout)?,
        )),
    };
    let heads = match &model.heads {
        HeadKind::Linear(_) => HeadVars::Linear(LinearHeadVars::from_ordered(take(2))?),
        HeadKind::Residual(h) => HeadVars::Residual(PerLabel::new(
            ResidualHeadVars::from_ordered(take(ResidualHeadVars::var_count(h.jailbreak.blocks.len())), h.jailbreak.blocks.len())?,
            ResidualHeadVars::from_ordered(
                take(ResidualHeadVars::var_count(h.prompt_injection.blocks.len())),
                h.prompt_injection.blocks.len(),
            )?,
        )),
        HeadKind::Forest(_) | HeadKind::Boosted(_) => {
            return Err(Error::state(format!("{} has tree heads; no neural graph to bind", model.arch)))
        }
    };
    debug_assert_eq!(at, flat.len());
    Ok(NeuralVars { encoder, pooling, heads, flat })
}

#[derive(Clone, Debug)]
pub struct NeuralForward {
    pub logits: PerLabel<Var>,
    pub attention: Option<PerLabel<Var>>,
}

fn encode_on_tape<E: Real>(
    tape: &mut Tape<E>,
    model: &GuardModel<E>,
    vars: &NeuralVars,
    seq: &TokenSequence,
    mode: Mode,
) -> Result<(Var, Vec<u8>)> {
    match (&model.backend, &vars.encoder) {
        (EncoderBackend::Learned { config, .. }, Some(ev)) => {
            let h = encode_with_vars(tape, ev, config, seq, mode)?;
            Ok((h, seq.mask.clone()))
        }
        (EncoderBackend::Precomputed(store), _) => encode_from_store(store, tape, seq),
        _ => Err(Error::state("learned backend bound without encoder vars")),
    }
}

/// Per-label logits (1×1 each) for the neural architectures.
pub fn neural_forward<E: Real>(
    tape: &mut Tape<E>,
    model: &GuardModel<E>,
    vars: &NeuralVars,
    seq: &TokenSequence,
    mode: Mode,
) -> Result<NeuralForward> {
    let (h, mask) = encode_on_tape(tape, model, vars, seq, mode)?;
    let (v_per_label, attention): (PerLabel<Var>, Option<PerLabel<Var>>) = match &vars.pooling {
        PoolingVars::Mean => {
            let v = mean_pool(tape, h, &mask)?;
            (PerLabel::new(v, v), None)
        }
        PoolingVars::Cls => {
            let v = cls_pool(tape, h)?;
            (PerLabel::new(v, v), None)
        }
        PoolingVars::Attn(p) => {
            let (v, w) = attn_pool(tape, h, &mask, p, mode)?;
            (PerLabel::new(v, v), Some(PerLabel::new(w, w)))
        }
        PoolingVars::PerLabelAttn(p) => {
            let (vj, wj) = attn_pool(tape, h, &mask, &p.jailbreak, mode)?;
            let (vp, wp) = attn_pool(tape, h, &mask, &p.prompt_injection, mode)?;
            (PerLabel::new(vj, vp), Some(PerLabel::new(wj, wp)))
        }
    };
    let logits = match &vars.heads {
        HeadVars::Linear(lh) => {
            let z = linear_head_forward(tape, lh, v_per_label.jailbreak)?;
            let zt = tape.transpose(z)?;
            let zj = tape.select_row(zt, 0)?;
            let zp = tape.select_row(zt, 1)?;
            PerLabel::new(zj, zp)
        }
        HeadVars::Residual(hs) => PerLabel::new(
            residual_head_forward(tape, &hs.jailbreak, v_per_label.jailbreak)?,
            residual_head_forward(tape, &hs.prompt_injection, v_per_label.prompt_injection)?,
        ),
    };
    Ok(NeuralForward { logits, attention })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: PerLabel<f64>,
    /// Attention weights per label when the architecture pools by attention.
    pub attention: Option<PerLabel<Vec<f64>>>,
}

/// Deterministic eval-mode forward to probabilities.
pub fn predict<E: Real>(model: &GuardModel<E>, seq: &TokenSequence) -> Result<Prediction> {
    let mut tape = Tape::<E>::inference();
    match &model.heads {
        HeadKind::Forest(_) | HeadKind::Boosted(_) => {
            let features = extract_cls(model, &mut tape, seq)?;
            let probs = match &model.heads {
                HeadKind::Forest(f) => PerLabel::new(
                    require_fitted(Label::Jailbreak, f.jailbreak.as_ref())?.predict_proba(&features)?,
                    require_fitted(Label::PromptInjection, f.prompt_injection.as_ref())?.predict_proba(&features)?,
                ),
                HeadKind::Boosted(b) => PerLabel::new(
                    require_fitted(Label::Jailbreak, b.jailbreak.as_ref())?.predict_proba(&features)?,
                    require_fitted(Label::PromptInjection, b.prompt_injection.as_ref())?.predict_proba(&features)?,
                ),
                _ => unreachable!(),
            };
            Ok(Prediction { probs, attention: None })
        }
        _ => {
            let vars = bind_neural(&mut tape, model, false)?;
            let fwd = neural_forward(&mut tape, model, &vars, seq, Mode::Eval)?;
            let probs = PerLabel::from_fn(|l| {
                let z = *fwd.logits.get(l);
                let p = tape.sigmoid(z).and_then(|p| tape.value(p).item());
                p.map(|v| v.as_f64()).unwrap_or(f64::NAN)
            });
            if probs.jailbreak.is_nan() || probs.prompt_injection.is_nan() {
                return Err(Error::state("forward produced no probability"));
            }
            let attention = fwd.attention.map(|w| PerLabel::from_fn(|l| {
                    tape.value(*w.get(l)).data().iter().map(|v| v.as_f64()).collect()
                }));
            Ok(Prediction { probs, attention })
        }
    }
}

fn require_fitted<T>(label: Label, head: Option<&T>) -> Result<&T> {
    head.ok_or_else(|| Error::state(format!("{label} ensemble is not fitted")))
}

/// CLS feature vector (as f64) for the tree architectures and the two-stage
/// procedure.
pub fn extract_cls<E: Real>(model: &GuardModel<E>, tape: &mut Tape<E>, seq: &TokenSequence) -> Result<Vec<f64>> {
    let cls = match &model.backend {
        EncoderBackend::Learned { config, params } => {
            let vars = crate::encoder::bind(params, tape, false);
            let h = encode_with_vars(tape, &vars, config, seq, Mode::Eval)?;
            tape.select_row(h, 0)?
        }
        EncoderBackend::Precomputed(store) => {
            let (h, _) = encode_from_store(store, tape, seq)?;
            tape.select_row(h, 0)?
        }
    };
    Ok(tape.value(cls).data().iter().map(|v| v.as_f64()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::encoder::tokenize;
    use crate::forests::{fit_forest, ForestConfig};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 259,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len: 32,
                dropout: 0.1,
                layer_norm_eps: 1e-5,
            },
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn seq(text: &str) -> TokenSequence {
        tokenize(text, 32)
    }

    #[test]
    fn arch_names_round_trip_and_unknown_lists_valid() {
        for a in Arch::ALL {
            assert_eq!(Arch::from_name(a.name()).unwrap(), a);
        }
        let err = Arch::from_name("xyz").unwrap_err();
        match err {
            Error::Config(msg) => {
                for a in Arch::ALL {
                    assert!(msg.contains(a.name()), "{msg}");
                }
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn build_shapes_follow_arch() {
        let cfg = toy_config();
        let m = build_model(Arch::Sharanga, &cfg).unwrap();
        assert!(matches!(m.pooling, Pooling::Mean));
        assert!(matches!(m.heads, HeadKind::Linear(_)));
        let m = build_model(Arch::Sharanga, &ModelConfig { sharanga_cls_pooling: true, ..cfg.clone() }).unwrap();
        assert!(matches!(m.pooling, Pooling::Cls));

        let m = build_model(Arch::Mahendra, &cfg).unwrap();
        assert!(matches!(m.pooling, Pooling::Attn(_)));
        match &m.heads {
            HeadKind::Residual(h) => {
                assert_eq!(h.jailbreak.blocks.len(), MAHENDRA_BLOCKS);
                assert_eq!(h.prompt_injection.blocks.len(), MAHENDRA_BLOCKS);
            }
            other => panic!("wrong heads {other:?}"),
        }

        let m = build_model(Arch::Raudra, &cfg).unwrap();
        match (&m.pooling, &m.heads) {
            (Pooling::PerLabelAttn(p), HeadKind::Residual(h)) => {
                assert_ne!(p.jailbreak, p.prompt_injection, "independent parameter sets");
                assert_eq!(h.jailbreak.blocks.len(), RAUDRA_BLOCKS);
            }
            other => panic!("wrong shape {other:?}"),
        }

        let m = build_model(Arch::Vaishnava, &cfg).unwrap();
        assert!(matches!(m.heads, HeadKind::Forest(PerLabel { jailbreak: None, prompt_injection: None })));
        assert!(matches!(m.pooling, Pooling::Cls));
        let m = build_model(Arch::Ashwina, &cfg).unwrap();
        assert!(matches!(m.heads, HeadKind::Boosted(_)));
    }

    #[test]
    fn build_rejects_bad_thresholds() {
        let cfg = ModelConfig { thresholds: PerLabel::new(0.5, 1.0), ..toy_config() };
        assert!(matches!(build_model(Arch::Sharanga, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sharanga_zero_head_gives_half_probabilities() {
        let mut m = build_model(Arch::Sharanga, &toy_config()).unwrap();
        if let HeadKind::Linear(h) = &mut m.heads {
            h.w = Tensor::zeros(&[8, 2]);
            h.b = Tensor::zeros(&[2]);
        }
        let p = predict(&m, &seq("anything at all")).unwrap();
        assert_eq!(p.probs, PerLabel::new(0.5, 0.5));
        assert!(p.attention.is_none());
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        for arch in [Arch::Sharanga, Arch::Mahendra, Arch::Raudra] {
            let m = build_model(arch, &toy_config()).unwrap();
            let s = seq("the same text twice");
            let a = predict(&m, &s).unwrap();
            let b = predict(&m, &s).unwrap();
            assert_eq!(a, b, "{arch}");
            for (_, &p) in a.probs.iter() {
                assert!((0.0..=1.0).contains(&p) && p.is_finite());
            }
        }
    }

    #[test]
    fn attention_weights_surface_per_label() {
        let m = build_model(Arch::Mahendra, &toy_config()).unwrap();
        let p = predict(&m, &seq("look at the weights")).unwrap();
        let w = p.attention.expect("attention pooling exposes weights");
        assert_eq!(w.jailbreak, w.prompt_injection, "one shared distribution");
        assert!((w.jailbreak.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let m = build_model(Arch::Raudra, &toy_config()).unwrap();
        let p = predict(&m, &seq("look at the weights")).unwrap();
        let w = p.attention.expect("attention pooling exposes weights");
        assert_ne!(w.jailbreak, w.prompt_injection, "independent distributions");
    }

    #[test]
    fn unfitted_tree_heads_are_a_state_error() {
        for arch in [Arch::Vaishnava, Arch::Ashwina] {
            let m = build_model(arch, &toy_config()).unwrap();
            let err = predict(&m, &seq("x")).unwrap_err();
            assert!(matches!(err, Error::State(_)), "{arch}: {err:?}");
        }
    }

    #[test]
    fn fitted_forest_forward_composes_exactly() {
        let mut m = build_model(Arch::Vaishnava, &toy_config()).unwrap();
        let texts = ["alpha beta", "gamma delta", "epsilon zeta", "eta theta"];
        let feats: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| extract_cls(&m, &mut Tape::<f64>::inference(), &seq(t)).unwrap())
            .collect();
        let y = [0u8, 1, 0, 1];
        let cfg = ForestConfig { n_estimators: 5, max_depth: 4, ..ForestConfig::default() };
        let forest = fit_forest(&feats, &y, &cfg).unwrap();
        m.heads = HeadKind::Forest(PerLabel::new(Some(forest.clone()), Some(forest.clone())));
        for (i, t) in texts.iter().enumerate() {
            let p = predict(&m, &seq(t)).unwrap();
            let direct = forest.predict_proba(&feats[i]).unwrap();
            assert_eq!(p.probs.jailbreak, direct, "bitwise compose-and-compare");
            assert_eq!(p.probs.prompt_injection, direct);
        }
    }

    #[test]
    fn perturbing_one_head_leaves_other_label_bit_identical() {
        let m = build_model(Arch::Mahendra, &toy_config()).unwrap();
        let s = seq("independence check");
        let before = predict(&m, &s).unwrap();
        let mut m2 = m.clone();
        if let HeadKind::Residual(h) = &mut m2.heads {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            h.jailbreak.out = Tensor::randn(h.jailbreak.out.shape(), 0.3, &mut rng);
        }
        let after = predict(&m2, &s).unwrap();
        assert_ne!(before.probs.jailbreak, after.probs.jailbreak);
        assert_eq!(
            before.probs.prompt_injection.to_bits(),
            after.probs.prompt_injection.to_bits()
        );
    }

    #[test]
    fn raudra_zeroing_one_label_path_gives_half_only_there() {
        let m = build_model(Arch::Raudra, &toy_config()).unwrap();
        let s = seq("zero out the jailbreak path");
        let before = predict(&m, &s).unwrap();
        let mut m2 = m.clone();
        if let (Pooling::PerLabelAttn(p), HeadKind::Residual(h)) = (&mut m2.pooling, &mut m2.heads) {
            p.jailbreak.wq = Tensor::zeros(&[8, 8]);
            p.jailbreak.wk = Tensor::zeros(&[8, 8]);
            for (_, t) in h.jailbreak.named_mut("x") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let after = predict(&m2, &s).unwrap();
        assert_eq!(after.probs.jailbreak, 0.5);
        assert_eq!(
            before.probs.prompt_injection.to_bits(),
            after.probs.prompt_injection.to_bits()
        );
    }

    #[test]
    fn decide_applies_or_rule() {
        let m = build_model(Arch::Sharanga, &toy_config()).unwrap();
        let d = m.decide(&PerLabel::new(0.7, 0.1));
        assert!(d.flags.jailbreak && !d.flags.prompt_injection && d.malicious);
        let d = m.decide(&PerLabel::new(0.1, 0.2));
        assert!(!d.malicious);
        let d = m.decide(&PerLabel::new(0.5, 0.5));
        assert!(d.malicious, "threshold is inclusive");
    }

    #[test]
    fn frozen_f32_model_predicts_in_range() {
        let m = build_model(Arch::Mahendra, &toy_config()).unwrap();
        let frozen: GuardModel<f32> = m.freeze();
        let p64 = predict(&m, &seq("cast me")).unwrap();
        let p32 = predict(&frozen, &seq("cast me")).unwrap();
        assert!((p64.probs.jailbreak - p32.probs.jailbreak).abs() < 1e-4);
        assert!((p64.probs.prompt_injection - p32.probs.prompt_injection).abs() < 1e-4);
    }

    #[test]
    fn named_params_cover_bound_vars_exactly() {
        for arch in [Arch::Sharanga, Arch::Mahendra, Arch::Raudra] {
            let m = build_model(arch, &toy_config()).unwrap();
            let mut tape = Tape::<f64>::new();
            let vars = bind_neural(&mut tape, &m, true).unwrap();
            assert_eq!(vars.flat.len(), m.named_params().len(), "{arch}");
        }
        let m = build_model(Arch::Vaishnava, &toy_config()).unwrap();
        let mut tape = Tape::<f64>::new();
        assert!(matches!(bind_neural(&mut tape, &m, true), Err(Error::State(_))));
        assert_eq!(m.named_params().len(), 2 + 15, "encoder only");
    }
}
