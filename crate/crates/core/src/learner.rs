//! Linear decision models and their trainers: an importance-weighted binary
//! classifier and a cost-sensitive multi-action scorer. Both train by
//! full-batch gradient descent with backtracking line search, from zero
//! initialization, so equal inputs give bit-equal models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// L2 penalty on weights; biases are never regularized.
    pub l2: f64,
    /// Carried for interface stability; the optimizer itself is
    /// deterministic and never draws from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 500,
            tol: 1e-8,
            l2: 1e-6,
            seed: 0,
        }
    }
}

/// Per-feature affine normalization baked into every trained model, so a
/// model file carries everything needed to score raw meta-features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Weighted first and second moments. Features with zero weighted
    /// variance keep a unit scale so standardization stays defined.
    pub fn fit_weighted(features: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                found: weights.len(),
            });
        }
        let dim = features[0].len();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZeroImportance);
        }
        // Normalize weights up front: moments built from w_i / sum(w) are
        // unchanged when every importance is rescaled by the same factor.
        let rs: Vec<f64> = weights.iter().map(|&w| w / total).collect();
        let mut mean = vec![0.0; dim];
        for (x, &r) in features.iter().zip(&rs) {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: x.len(),
                });
            }
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += r * v;
            }
        }
        let mut var = vec![0.0; dim];
        for (x, &r) in features.iter().zip(&rs) {
            for ((v, &xi), &m) in var.iter_mut().zip(x).zip(&mean) {
                let d = xi - m;
                *v += r * d * d;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = v.sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let weights = vec![1.0; features.len()];
        Standardizer::fit_weighted(features, &weights)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear score over standardized features; positive score means the
/// positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBinaryModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
}

impl LinearBinaryModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        let z = self.standardizer.apply(x);
        dot(&self.weights, &z) + self.bias
    }
}

/// One linear score per action over standardized features; the routed
/// action is the argmax, ties going to the lowest action index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMultiModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub standardizer: Standardizer,
}

impl LinearMultiModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardizer.apply(x);
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, &b)| dot(w, &z) + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax_lowest(&self.scores(x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; on ties, the lowest index wins.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Importance-weighted binary classification problem over standardized
/// features. The objective is the weighted mean logistic loss
/// `sum_i r_i * softplus(-y_i * s_i) + (l2/2)*|w|^2` where the `r_i` are
/// importances normalized to sum to one, so rescaling every importance by
/// the same factor changes nothing.
pub struct BinaryProblem {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    rs: Vec<f64>,
    l2: f64,
    dim: usize,
}

impl BinaryProblem {
    /// `labels` must be +-1; `importances` nonnegative with positive sum.
    /// Features are standardized with `standardizer` up front.
    pub fn new(
        features: &[Vec<f64>],
        labels: &[f64],
        importances: &[f64],
        standardizer: &Standardizer,
        l2: f64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() || features.len() != importances.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                found: labels.len().min(importances.len()),
            });
        }
        for &y in labels {
            if y != 1.0 && y != -1.0 {
                return Err(Error::InvalidConfig(format!("binary label {y} is not +-1")));
            }
        }
        for &w in importances {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("importance {w} out of range")));
            }
        }
        let total: f64 = importances.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZeroImportance);
        }
        let dim = standardizer.dim();
        let xs = features
            .iter()
            .map(|x| {
                if x.len() != dim {
                    Err(Error::DimensionMismatch {
                        expected: dim,
                        found: x.len(),
                    })
                } else {
                    Ok(standardizer.apply(x))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let rs = importances.iter().map(|&w| w / total).collect();
        Ok(BinaryProblem {
            xs,
            ys: labels.to_vec(),
            rs,
            l2,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parameter layout: `dim` weights followed by the bias.
    pub fn objective(&self, params: &[f64]) -> f64 {
        let (w, b) = params.split_at(self.dim);
        let b = b[0];
        let mut loss = 0.0;
        for ((x, &y), &r) in self.xs.iter().zip(&self.ys).zip(&self.rs) {
            let s = dot(w, x) + b;
            loss += r * softplus(-y * s);
        }
        loss + 0.5 * self.l2 * dot(w, w)
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (w, b) = params.split_at(self.dim);
        let b = b[0];
        let mut grad = vec![0.0; self.dim + 1];
        for ((x, &y), &r) in self.xs.iter().zip(&self.ys).zip(&self.rs) {
            let s = dot(w, x) + b;
            // d/ds softplus(-y*s) = -y * sigmoid(-y*s)
            let pull = -y * sigmoid(-y * s) * r;
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += pull * xi;
            }
            grad[self.dim] += pull;
        }
        for (g, &wi) in grad.iter_mut().zip(w) {
            *g += self.l2 * wi;
        }
        grad
    }

    pub fn solve(&self, config: &TrainConfig, standardizer: Standardizer) -> LinearBinaryModel {
        let params = minimize(
            vec![0.0; self.dim + 1],
            config,
            |p| self.objective(p),
            |p| self.gradient(p),
        );
        let (w, b) = params.split_at(self.dim);
        LinearBinaryModel {
            weights: w.to_vec(),
            bias: b[0],
            standardizer,
        }
    }
}

/// Trains a binary model: fits an importance-weighted standardizer, then
/// minimizes the weighted logistic objective.
pub fn train_binary(
    features: &[Vec<f64>],
    labels: &[f64],
    importances: &[f64],
    config: &TrainConfig,
) -> Result<LinearBinaryModel> {
    let standardizer = Standardizer::fit_weighted(features, importances)?;
    let problem = BinaryProblem::new(features, labels, importances, &standardizer, config.l2)?;
    Ok(problem.solve(config, standardizer))
}

/// Cost-sensitive multi-action problem over standardized features. The
/// objective is the mean smoothed routed cost
/// `(1/n) sum_i sum_a costs_i[a] * softmax_a(scores_i) + (l2/2)*|W|^2`.
pub struct CostProblem {
    xs: Vec<Vec<f64>>,
    costs: Vec<Vec<f64>>,
    l2: f64,
    dim: usize,
    actions: usize,
}

impl CostProblem {
    pub fn new(
        features: &[Vec<f64>],
        costs: &[Vec<f64>],
        standardizer: &Standardizer,
        l2: f64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != costs.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                found: costs.len(),
            });
        }
        let actions = costs[0].len();
        if actions < 2 {
            return Err(Error::InvalidConfig(
                "cost-sensitive training needs at least two actions".into(),
            ));
        }
        for c in costs {
            if c.len() != actions {
                return Err(Error::InconsistentActionSets {
                    expected: actions,
                    found: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("non-finite action cost".into()));
            }
        }
        let dim = standardizer.dim();
        let xs = features
            .iter()
            .map(|x| {
                if x.len() != dim {
                    Err(Error::DimensionMismatch {
                        expected: dim,
                        found: x.len(),
                    })
                } else {
                    Ok(standardizer.apply(x))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CostProblem {
            xs,
            costs: costs.to_vec(),
            l2,
            dim,
            actions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    fn probs(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let block = self.dim + 1;
        let mut scores: Vec<f64> = (0..self.actions)
            .map(|a| {
                let w = &params[a * block..a * block + self.dim];
                dot(w, x) + params[a * block + self.dim]
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in &mut scores {
            *s /= total;
        }
        scores
    }

    /// Parameter layout: `actions` blocks of `dim` weights plus a bias.
    pub fn objective(&self, params: &[f64]) -> f64 {
        let n = self.xs.len() as f64;
        let mut loss = 0.0;
        for (x, c) in self.xs.iter().zip(&self.costs) {
            let p = self.probs(params, x);
            loss += dot(&p, c);
        }
        loss /= n;
        let block = self.dim + 1;
        for a in 0..self.actions {
            let w = &params[a * block..a * block + self.dim];
            loss += 0.5 * self.l2 * dot(w, w);
        }
        loss
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let n = self.xs.len() as f64;
        let block = self.dim + 1;
        let mut grad = vec![0.0; self.actions * block];
        for (x, c) in self.xs.iter().zip(&self.costs) {
            let p = self.probs(params, x);
            let expected = dot(&p, c);
            for a in 0..self.actions {
                // d/ds_a of sum_j p_j c_j = p_a (c_a - expected cost)
                let pull = p[a] * (c[a] - expected) / n;
                for (g, &xi) in grad[a * block..a * block + self.dim].iter_mut().zip(x) {
                    *g += pull * xi;
                }
                grad[a * block + self.dim] += pull;
            }
        }
        for a in 0..self.actions {
            for (g, &wi) in grad[a * block..a * block + self.dim]
                .iter_mut()
                .zip(&params[a * block..a * block + self.dim])
            {
                *g += self.l2 * wi;
            }
        }
        grad
    }

    pub fn solve(&self, config: &TrainConfig, standardizer: Standardizer) -> LinearMultiModel {
        let block = self.dim + 1;
        let params = minimize(
            vec![0.0; self.actions * block],
            config,
            |p| self.objective(p),
            |p| self.gradient(p),
        );
        let weights = (0..self.actions)
            .map(|a| params[a * block..a * block + self.dim].to_vec())
            .collect();
        let biases = (0..self.actions)
            .map(|a| params[a * block + self.dim])
            .collect();
        LinearMultiModel {
            weights,
            biases,
            standardizer,
        }
    }
}

/// Trains a multi-action model on raw features and per-action costs.
pub fn train_multi(
    features: &[Vec<f64>],
    costs: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<LinearMultiModel> {
    let standardizer = Standardizer::fit(features)?;
    let problem = CostProblem::new(features, costs, &standardizer, config.l2)?;
    Ok(problem.solve(config, standardizer))
}

/// Gradient descent with Armijo backtracking. Step halving from 1.0 each
/// iteration; stops on a small gradient, a failed line search, or the
/// iteration cap.
fn minimize<F, G>(mut params: Vec<f64>, config: &TrainConfig, objective: F, gradient: G) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut f = objective(&params);
    for _ in 0..config.max_iters {
        let g = gradient(&params);
        let g2 = dot(&g, &g);
        if g2.sqrt() < config.tol {
            break;
        }
        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..60 {
            let cand: Vec<f64> = params
                .iter()
                .zip(&g)
                .map(|(p, gi)| p - step * gi)
                .collect();
            let fc = objective(&cand);
            if fc <= f - 1e-4 * step * g2 {
                params = cand;
                f = fc;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    params
}
