//! Decision trees, random forests, and second-order gradient-boosted trees
//! over plain feature vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Gini,
    Entropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSubsample {
    Sqrt,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub criterion: Criterion,
    pub bootstrap: bool,
    pub feature_subsample: FeatureSubsample,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_estimators: 100,
            max_depth: 20,
            criterion: Criterion::Gini,
            bootstrap: true,
            feature_subsample: FeatureSubsample::Sqrt,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoostConfig {
    pub n_rounds: i64,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub lambda_reg: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            n_rounds: 100,
            max_depth: 6,
            shrinkage: 0.1,
            lambda_reg: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

/// Flat tree node; `left`/`right` index into the owning tree's node list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

pub fn impurity(n_neg: usize, n_pos: usize, criterion: Criterion) -> Result<f64> {
    let n = n_neg + n_pos;
    if n == 0 {
        return Err(Error::usage("impurity of an empty node"));
    }
    let p_pos = n_pos as f64 / n as f64;
    let p_neg = n_neg as f64 / n as f64;
    Ok(match criterion {
        Criterion::Gini => 1.0 - p_neg * p_neg - p_pos * p_pos,
        Criterion::Entropy => {
            let term = |p: f64| if p == 0.0 { 0.0 } else { -p * p.log2() };
            term(p_neg) + term(p_pos)
        }
    })
}

fn check_features(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(|r| r.len()).unwrap_or(0);
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::dim("features", "ragged feature rows"));
    }
    Ok(d)
}

/// Midpoints of adjacent sorted unique values, ascending.
fn candidate_thresholds(values: &mut Vec<f64>) -> Vec<f64> {
    values.sort_unstable_by(f64::total_cmp);
    values.dedup();
    values.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

/// Best (feature, threshold, impurity decrease) over the given features,
/// ties broken by lowest feature index then lowest threshold.
fn best_class_split(
    x: &[Vec<f64>],
    y: &[u8],
    idx: &[usize],
    features: &[usize],
    criterion: Criterion,
) -> Result<Option<(usize, f64, f64)>> {
    let n = idx.len();
    let pos = idx.iter().filter(|&&i| y[i] == 1).count();
    let parent = impurity(n - pos, pos, criterion)?;
    let mut best: Option<(usize, f64, f64)> = None;
    for &f in features {
        let mut vals: Vec<f64> = idx.iter().map(|&i| x[i][f]).collect();
        for thr in candidate_thresholds(&mut vals) {
            let (mut nl, mut pl) = (0usize, 0usize);
            for &i in idx {
                if x[i][f] <= thr {
                    nl += 1;
                    pl += usize::from(y[i] == 1);
                }
            }
            let (nr, pr) = (n - nl, pos - pl);
            let wl = nl as f64 / n as f64;
            let wr = nr as f64 / n as f64;
            let dec = parent
                - wl * impurity(nl - pl, pl, criterion)?
                - wr * impurity(nr - pr, pr, criterion)?;
            // Zero-decrease splits are kept: structure like XOR only
            // separates below a split that is useless on its own.
            if best.map_or(dec >= 0.0, |(_, _, b)| dec > b) {
                best = Some((f, thr, dec));
            }
        }
    }
    Ok(best)
}

struct ClassBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    cfg: TreeConfig,
    nodes: Vec<Node>,
    importances: Vec<f64>,
    rng: Option<ChaCha8Rng>,
}

#[derive(Clone, Copy)]
struct TreeConfig {
    max_depth: usize,
    criterion: Criterion,
    min_samples_split: usize,
    n_sub_features: usize,
}

impl<'a> ClassBuilder<'a> {
    fn split_features(&mut self, d: usize) -> Vec<usize> {
        match &mut self.rng {
            Some(rng) if self.cfg.n_sub_features < d => {
                let mut picked = rand::seq::index::sample(rng, d, self.cfg.n_sub_features).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..d).collect(),
        }
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> Result<usize> {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let leaf = |nodes: &mut Vec<Node>| {
            nodes.push(Node::Leaf { value: pos as f64 / idx.len() as f64 });
            nodes.len() - 1
        };
        if pos == 0 || pos == idx.len() || depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split {
            return Ok(leaf(&mut self.nodes));
        }
        let d = self.x[0].len();
        let features = self.split_features(d);
        let Some((feature, threshold, dec)) =
            best_class_split(self.x, self.y, idx, &features, self.cfg.criterion)?
        else {
            return Ok(leaf(&mut self.nodes));
        };
        self.importances[feature] += dec * idx.len() as f64;
        let (l_idx, r_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 }); // placeholder until children exist
        let left = self.build(&l_idx, depth + 1)?;
        let right = self.build(&r_idx, depth + 1)?;
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        Ok(at)
    }
}

fn fit_class_tree(
    x: &[Vec<f64>],
    y: &[u8],
    idx: &[usize],
    cfg: TreeConfig,
    rng: Option<ChaCha8Rng>,
) -> Result<(Tree, Vec<f64>)> {
    let d = check_features(x)?;
    let mut b = ClassBuilder { x, y, cfg, nodes: Vec::new(), importances: vec![0.0; d], rng };
    b.build(idx, 0)?;
    Ok((Tree { nodes: b.nodes }, b.importances))
}

/// Single greedy tree over all features, no randomness.
pub fn fit_tree(x: &[Vec<f64>], y: &[u8], max_depth: usize, criterion: Criterion) -> Result<Tree> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::dim("fit_tree", format!("{} rows vs {} labels", x.len(), y.len())));
    }
    let idx: Vec<usize> = (0..x.len()).collect();
    let cfg = TreeConfig { max_depth, criterion, min_samples_split: 2, n_sub_features: usize::MAX };
    Ok(fit_class_tree(x, y, &idx, cfg, None)?.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub d: usize,
    importances_raw: Vec<f64>,
}

pub fn fit_forest(x: &[Vec<f64>], y: &[u8], cfg: &ForestConfig) -> Result<Forest> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::dim("fit_forest", format!("{} rows vs {} labels", x.len(), y.len())));
    }
    if cfg.n_estimators == 0 || cfg.max_depth == 0 {
        return Err(Error::config("forest needs n_estimators >= 1 and max_depth >= 1"));
    }
    let d = check_features(x)?;
    let n_sub = match cfg.feature_subsample {
        FeatureSubsample::All => d,
        FeatureSubsample::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
    };
    let tree_cfg = TreeConfig {
        max_depth: cfg.max_depth,
        criterion: cfg.criterion,
        min_samples_split: cfg.min_samples_split,
        n_sub_features: n_sub,
    };
    let fitted: Result<Vec<(Tree, Vec<f64>)>> = (0..cfg.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + t as u64);
            let idx: Vec<usize> = if cfg.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            fit_class_tree(x, y, &idx, tree_cfg, Some(rng))
        })
        .collect();
    let fitted = fitted?;
    let mut importances_raw = vec![0.0; d];
    let mut trees = Vec::with_capacity(fitted.len());
    for (tree, imp) in fitted {
        for (a, b) in importances_raw.iter_mut().zip(&imp) {
            *a += b;
        }
        trees.push(tree);
    }
    Ok(Forest { trees, d, importances_raw })
}

impl Forest {
    /// Mean over trees of the reached leaf's positive fraction.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(Error::state("forest has no fitted trees"));
        }
        if x.len() != self.d {
            return Err(Error::dim("forest", format!("expected {} features, got {}", self.d, x.len())));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn feature_importances(&self) -> Vec<f64> {
        normalize_importances(&self.importances_raw)
    }
}

fn normalize_importances(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return raw.to_vec();
    }
    raw.iter().map(|v| v / total).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct RegBuilder<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    cfg: BoostConfig,
    nodes: Vec<Node>,
    importances: Vec<f64>,
}

impl<'a> RegBuilder<'a> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let gs: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let hs: f64 = idx.iter().map(|&i| self.h[i]).sum();
        -gs / (hs + self.cfg.lambda_reg)
    }

    /// Half the improvement in the second-order objective, per the usual
    /// gain = ½·(G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)) form.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let lam = self.cfg.lambda_reg;
        let g_tot: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let h_tot: f64 = idx.iter().map(|&i| self.h[i]).sum();
        let parent = g_tot * g_tot / (h_tot + lam);
        let mut best: Option<(usize, f64, f64)> = None;
        for f in 0..self.x[0].len() {
            let mut vals: Vec<f64> = idx.iter().map(|&i| self.x[i][f]).collect();
            for thr in candidate_thresholds(&mut vals) {
                let (mut gl, mut hl) = (0.0, 0.0);
                for &i in idx {
                    if self.x[i][f] <= thr {
                        gl += self.g[i];
                        hl += self.h[i];
                    }
                }
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                if hl < self.cfg.min_child_weight || hr < self.cfg.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent);
                if best.map_or(gain > 0.0, |(_, _, b)| gain > b) {
                    best = Some((f, thr, gain));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> usize {
        if depth >= self.cfg.max_depth || idx.len() < 2 {
            let value = self.leaf_value(idx);
            self.nodes.push(Node::Leaf { value });
            return self.nodes.len() - 1;
        }
        let Some((feature, threshold, gain)) = self.best_split(idx) else {
            let value = self.leaf_value(idx);
            self.nodes.push(Node::Leaf { value });
            return self.nodes.len() - 1;
        };
        self.importances[feature] += gain;
        let (l_idx, r_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let left = self.build(&l_idx, depth + 1);
        let right = self.build(&r_idx, depth + 1);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub base_score: f64,
    pub shrinkage: f64,
    pub trees: Vec<Tree>,
    pub d: usize,
    importances_raw: Vec<f64>,
}

pub fn fit_boosted(x: &[Vec<f64>], y: &[u8], cfg: &BoostConfig) -> Result<Boosted> {
    if cfg.n_rounds < 0 {
        return Err(Error::config(format!("n_rounds must be >= 0, got {}", cfg.n_rounds)));
    }
    if !(cfg.shrinkage > 0.0 && cfg.shrinkage <= 1.0) {
        return Err(Error::config(format!("shrinkage must be in (0,1], got {}", cfg.shrinkage)));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::dim("fit_boosted", format!("{} rows vs {} labels", x.len(), y.len())));
    }
    let d = check_features(x)?;
    let p_bar = (y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64).clamp(1e-12, 1.0 - 1e-12);
    let base_score = (p_bar / (1.0 - p_bar)).ln();
    let mut scores = vec![base_score; x.len()];
    let idx: Vec<usize> = (0..x.len()).collect();
    let mut trees = Vec::with_capacity(cfg.n_rounds as usize);
    let mut importances_raw = vec![0.0; d];
    for _ in 0..cfg.n_rounds {
        let p: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let g: Vec<f64> = p.iter().zip(y).map(|(&pi, &yi)| pi - yi as f64).collect();
        let h: Vec<f64> = p.iter().map(|&pi| pi * (1.0 - pi)).collect();
        let mut b = RegBuilder { x, g: &g, h: &h, cfg: *cfg, nodes: Vec::new(), importances: vec![0.0; d] };
        b.build(&idx, 0);
        let tree = Tree { nodes: b.nodes };
        for (s, row) in scores.iter_mut().zip(x) {
            *s += cfg.shrinkage * tree.predict(row);
        }
        for (a, v) in importances_raw.iter_mut().zip(&b.importances) {
            *a += v;
        }
        trees.push(tree);
    }
    Ok(Boosted { base_score, shrinkage: cfg.shrinkage, trees, d, importances_raw })
}

impl Boosted {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::dim("boosted", format!("expected {} features, got {}", self.d, x.len())));
        }
        Ok(self.base_score + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(x)?))
    }

    pub fn feature_importances(&self) -> Vec<f64> {
        normalize_importances(&self.importances_raw)
    }
}

pub fn log_loss(probs: &[f64], y: &[u8]) -> f64 {
    let eps = 1e-15;
    probs
        .iter()
        .zip(y)
        .map(|(&p, &yi)| {
            let p = p.clamp(eps, 1.0 - eps);
            if yi == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / y.len() as f64
}
