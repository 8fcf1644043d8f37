//! Small deterministic learner set used for nuisance fitting: a constant
//! predictor, an L2-penalized linear model (logistic link for probability
//! targets, identity link for regression targets), gradient-boosted stumps
//! with squared loss, and a 2-model stacking combiner with convex weights
//! chosen by held-out squared error.
//!
//! Every fit is deterministic given its inputs and seed; there is no data
//! subsampling and all tie-breaks are by fixed scan order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{pairwise_mean, seeded_rng};

const MIN_LEAF: usize = 8;
const MAX_LINEAR_PREDICTOR: f64 = 30.0;

/// Hyperparameters for the penalized linear model (both links).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self {
            l2: 1e-6,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

/// Hyperparameters for gradient-boosted trees (stumps by default).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub l2: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            rounds: 200,
            learning_rate: 0.1,
            depth: 1,
            l2: 1.0,
        }
    }
}

/// How to fit one scalar regression/probability function.
#[derive(Debug, Clone)]
pub enum ModelParams {
    Constant,
    Linear(LinearParams),
    Gbt(GbtParams),
    /// Convex combination of two fits, weighted by held-out squared error
    /// on a seeded `holdout_frac` split, then refit on all rows.
    Stacked {
        first: Box<ModelParams>,
        second: Box<ModelParams>,
        holdout_frac: f64,
    },
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Constant => Ok(()),
            ModelParams::Linear(p) => {
                if p.l2 < 0.0 || !p.l2.is_finite() {
                    return Err(Error::InvalidConfig("linear l2 must be >= 0".into()));
                }
                if p.max_iter == 0 {
                    return Err(Error::InvalidConfig("linear max_iter must be >= 1".into()));
                }
                Ok(())
            }
            ModelParams::Gbt(p) => {
                if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
                    return Err(Error::InvalidConfig(
                        "gbt learning_rate must lie in (0, 1]".into(),
                    ));
                }
                if p.depth == 0 || p.depth > 8 {
                    return Err(Error::InvalidConfig("gbt depth must lie in 1..=8".into()));
                }
                if p.l2 < 0.0 {
                    return Err(Error::InvalidConfig("gbt l2 must be >= 0".into()));
                }
                Ok(())
            }
            ModelParams::Stacked {
                first,
                second,
                holdout_frac,
            } => {
                if !(*holdout_frac > 0.0 && *holdout_frac < 1.0) {
                    return Err(Error::InvalidConfig(
                        "stacker holdout_frac must lie in (0, 1)".into(),
                    ));
                }
                first.validate()?;
                second.validate()
            }
        }
    }
}

/// A fitted scalar-output model.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Constant(f64),
    /// coefficients exclude the intercept, stored separately
    Linear {
        intercept: f64,
        coef: Vec<f64>,
        logistic: bool,
    },
    Gbt(GbtModel),
    Stacked {
        first: Box<FittedModel>,
        second: Box<FittedModel>,
        weight: f64,
    },
}

impl FittedModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Constant(c) => *c,
            FittedModel::Linear {
                intercept,
                coef,
                logistic,
            } => {
                let mut eta = *intercept;
                for (c, v) in coef.iter().zip(x) {
                    eta += c * v;
                }
                eta = eta.clamp(-MAX_LINEAR_PREDICTOR, MAX_LINEAR_PREDICTOR);
                if *logistic {
                    sigmoid(eta)
                } else {
                    eta
                }
            }
            FittedModel::Gbt(m) => m.predict(x),
            FittedModel::Stacked {
                first,
                second,
                weight,
            } => weight * first.predict(x) + (1.0 - weight) * second.predict(x),
        }
    }
}

/// Fits a model for a continuous target (identity link for the linear model).
pub fn fit_regression(
    params: &ModelParams,
    xs: &[&[f64]],
    y: &[f64],
    seed: u64,
) -> Result<FittedModel> {
    fit_impl(params, xs, y, seed, false)
}

/// Fits a model for a {0,1} probability target (logistic link for the
/// linear model; boosted stumps use squared loss and rely on downstream
/// clamping).
pub fn fit_probability(
    params: &ModelParams,
    xs: &[&[f64]],
    y: &[f64],
    seed: u64,
) -> Result<FittedModel> {
    fit_impl(params, xs, y, seed, true)
}

fn fit_impl(
    params: &ModelParams,
    xs: &[&[f64]],
    y: &[f64],
    seed: u64,
    logistic: bool,
) -> Result<FittedModel> {
    debug_assert_eq!(xs.len(), y.len());
    if y.is_empty() {
        return Err(Error::DegenerateArm("empty training set".into()));
    }
    match params {
        ModelParams::Constant => Ok(FittedModel::Constant(pairwise_mean(y))),
        ModelParams::Linear(p) => {
            let dim = xs[0].len();
            if dim == 0 {
                // No covariates: the linear model degenerates to a constant.
                return Ok(FittedModel::Constant(pairwise_mean(y)));
            }
            if logistic {
                fit_logistic_irls(xs, y, p)
            } else {
                fit_ridge(xs, y, p)
            }
        }
        ModelParams::Gbt(p) => fit_gbt(xs, y, p),
        ModelParams::Stacked {
            first,
            second,
            holdout_frac,
        } => fit_stacked(first, second, *holdout_frac, xs, y, seed, logistic),
    }
}

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

// ---------------------------------------------------------------------------
// Penalized linear models
// ---------------------------------------------------------------------------

/// Solves the symmetric positive-definite system `A w = b` in place by
/// Cholesky; `A` is row-major `n x n`.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    // Cholesky factorization A = L L^T, lower triangle stored in `a`.
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::LearnerDivergence(
                "normal equations are not positive definite".into(),
            ));
        }
        let dsqrt = diag.sqrt();
        a[j * n + j] = dsqrt;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / dsqrt;
        }
    }
    // Forward solve L u = b.
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    // Back solve L^T w = u.
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(())
}

/// Ridge regression with unpenalized intercept.
fn fit_ridge(xs: &[&[f64]], y: &[f64], p: &LinearParams) -> Result<FittedModel> {
    let dims = xs[0].len();
    let m = dims + 1;
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for (xi, &yi) in xs.iter().zip(y) {
        gram[0] += 1.0;
        rhs[0] += yi;
        for (j, &vj) in xi.iter().enumerate() {
            gram[(j + 1) * m] += vj;
            gram[j + 1] += vj;
            rhs[j + 1] += vj * yi;
            for (k, &vk) in xi.iter().enumerate() {
                gram[(j + 1) * m + (k + 1)] += vj * vk;
            }
        }
    }
    for j in 1..m {
        gram[j * m + j] += p.l2;
    }
    solve_spd(&mut gram, &mut rhs, m)?;
    Ok(FittedModel::Linear {
        intercept: rhs[0],
        coef: rhs[1..].to_vec(),
        logistic: false,
    })
}

/// Logistic regression by iteratively reweighted least squares with an L2
/// penalty on the slope coefficients.
fn fit_logistic_irls(xs: &[&[f64]], y: &[f64], p: &LinearParams) -> Result<FittedModel> {
    let dims = xs[0].len();
    let m = dims + 1;
    let n = xs.len();
    let mut w = vec![0.0; m];
    let mut eta = vec![0.0; n];

    for _iter in 0..p.max_iter {
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for (i, xi) in xs.iter().enumerate() {
            let mut e = w[0];
            for (j, &vj) in xi.iter().enumerate() {
                e += w[j + 1] * vj;
            }
            e = e.clamp(-MAX_LINEAR_PREDICTOR, MAX_LINEAR_PREDICTOR);
            eta[i] = e;
            let mu = sigmoid(e);
            let wt = (mu * (1.0 - mu)).max(1e-10);
            // working response z = eta + (y - mu)/wt; accumulate X'W X and X'W z
            let z = e + (y[i] - mu) / wt;
            let row = |j: usize| -> f64 {
                if j == 0 {
                    1.0
                } else {
                    xi[j - 1]
                }
            };
            for j in 0..m {
                let rj = row(j) * wt;
                rhs[j] += rj * z;
                for k in 0..m {
                    gram[j * m + k] += rj * row(k);
                }
            }
        }
        for j in 1..m {
            gram[j * m + j] += p.l2;
        }
        let mut new_w = rhs;
        solve_spd(&mut gram, &mut new_w, m)?;
        if new_w.iter().any(|v| !v.is_finite()) {
            return Err(Error::LearnerDivergence("IRLS produced non-finite coefficients".into()));
        }
        let delta = w
            .iter()
            .zip(&new_w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        w = new_w;
        if delta < p.tol {
            break;
        }
    }
    Ok(FittedModel::Linear {
        intercept: w[0],
        coef: w[1..].to_vec(),
        logistic: true,
    })
}

// ---------------------------------------------------------------------------
// Gradient-boosted regression trees (squared loss)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct TreeNode {
    /// usize::MAX marks a leaf
    feature: usize,
    threshold: f64,
    left: u32,
    right: u32,
    /// leaf value, shrinkage already applied
    value: f64,
}

#[derive(Debug, Clone)]
pub struct GbtModel {
    base: f64,
    trees: Vec<Vec<TreeNode>>,
}

impl GbtModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut out = self.base;
        for tree in &self.trees {
            let mut node = 0usize;
            loop {
                let nd = &tree[node];
                if nd.feature == usize::MAX {
                    out += nd.value;
                    break;
                }
                node = if x[nd.feature] <= nd.threshold {
                    nd.left as usize
                } else {
                    nd.right as usize
                };
            }
        }
        out
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

fn fit_gbt(xs: &[&[f64]], y: &[f64], p: &GbtParams) -> Result<FittedModel> {
    let n = xs.len();
    let dims = xs[0].len();
    let base = pairwise_mean(y);
    if p.rounds == 0 || dims == 0 {
        // Zero rounds (or no covariates) is exactly the constant-mean learner.
        return Ok(FittedModel::Constant(base));
    }

    let mut resid: Vec<f64> = y.iter().map(|&v| v - base).collect();
    // Per-feature sort order over all rows, computed once and reused; child
    // node index sets stay sorted by filtering.
    let mut sorted: Vec<Vec<u32>> = Vec::with_capacity(dims);
    for j in 0..dims {
        let mut idx: Vec<u32> = (0..n as u32).collect();
        idx.sort_by(|&a, &b| {
            xs[a as usize][j]
                .partial_cmp(&xs[b as usize][j])
                .expect("finite covariates")
        });
        sorted.push(idx);
    }

    let mut trees = Vec::with_capacity(p.rounds);
    for _round in 0..p.rounds {
        let mut nodes: Vec<TreeNode> = Vec::new();
        let root_rows: Vec<Vec<u32>> = sorted.clone();
        build_node(xs, &resid, root_rows, p, p.depth, &mut nodes);
        // Apply the new tree to the residuals.
        let tree = nodes;
        for (i, xi) in xs.iter().enumerate() {
            let mut node = 0usize;
            loop {
                let nd = &tree[node];
                if nd.feature == usize::MAX {
                    resid[i] -= nd.value;
                    break;
                }
                node = if xi[nd.feature] <= nd.threshold {
                    nd.left as usize
                } else {
                    nd.right as usize
                };
            }
        }
        trees.push(tree);
    }
    Ok(FittedModel::Gbt(GbtModel { base, trees }))
}

/// Grows one node (and recursively its children) from per-feature sorted row
/// lists, returning the node's index in `nodes`. Leaf values carry the
/// learning-rate shrinkage and the L2 leaf penalty.
fn build_node(
    xs: &[&[f64]],
    resid: &[f64],
    rows_by_feature: Vec<Vec<u32>>,
    p: &GbtParams,
    depth_left: usize,
    nodes: &mut Vec<TreeNode>,
) -> u32 {
    let rows = &rows_by_feature[0];
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| resid[i as usize]).sum();

    let make_leaf = |nodes: &mut Vec<TreeNode>| -> u32 {
        let value = p.learning_rate * total / (n as f64 + p.l2);
        nodes.push(TreeNode {
            feature: usize::MAX,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        });
        (nodes.len() - 1) as u32
    };

    if depth_left == 0 || n < 2 * MIN_LEAF {
        return make_leaf(nodes);
    }

    // Exact greedy split: maximize S_L^2/(n_L + l2) + S_R^2/(n_R + l2).
    let parent_score = total * total / (n as f64 + p.l2);
    let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, gain)
    for (j, order) in rows_by_feature.iter().enumerate() {
        let mut left_sum = 0.0;
        for (pos, &i) in order.iter().enumerate().take(n - 1) {
            left_sum += resid[i as usize];
            let n_l = pos + 1;
            if n_l < MIN_LEAF || n - n_l < MIN_LEAF {
                continue;
            }
            let v = xs[i as usize][j];
            let v_next = xs[order[pos + 1] as usize][j];
            if v == v_next {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / (n_l as f64 + p.l2)
                + right_sum * right_sum / ((n - n_l) as f64 + p.l2)
                - parent_score;
            if best.map_or(gain > 1e-12, |(_, _, g)| gain > g) {
                best = Some((j, 0.5 * (v + v_next), gain));
            }
        }
    }

    let Some((feature, threshold, _)) = best else {
        return make_leaf(nodes);
    };

    // Partition every feature's sorted list, preserving order.
    let dims = rows_by_feature.len();
    let mut left_lists = vec![Vec::new(); dims];
    let mut right_lists = vec![Vec::new(); dims];
    for (j, order) in rows_by_feature.iter().enumerate() {
        for &i in order {
            if xs[i as usize][feature] <= threshold {
                left_lists[j].push(i);
            } else {
                right_lists[j].push(i);
            }
        }
    }

    let me = nodes.len();
    nodes.push(TreeNode {
        feature,
        threshold,
        left: 0,
        right: 0,
        value: 0.0,
    });
    let left = build_node(xs, resid, left_lists, p, depth_left - 1, nodes);
    let right = build_node(xs, resid, right_lists, p, depth_left - 1, nodes);
    nodes[me].left = left;
    nodes[me].right = right;
    me as u32
}

// ---------------------------------------------------------------------------
// 2-model stacking
// ---------------------------------------------------------------------------

fn fit_stacked(
    first: &ModelParams,
    second: &ModelParams,
    holdout_frac: f64,
    xs: &[&[f64]],
    y: &[f64],
    seed: u64,
    logistic: bool,
) -> Result<FittedModel> {
    let n = xs.len();
    let n_hold = ((n as f64) * holdout_frac).round() as usize;
    let weight = if n_hold == 0 || n_hold == n {
        0.5
    } else {
        // Seeded permutation; last n_hold indices are held out.
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeded_rng(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let (train_idx, hold_idx) = order.split_at(n - n_hold);
        let sub_x: Vec<&[f64]> = train_idx.iter().map(|&i| xs[i]).collect();
        let sub_y: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
        let m1 = fit_impl(first, &sub_x, &sub_y, seed.wrapping_add(1), logistic)?;
        let m2 = fit_impl(second, &sub_x, &sub_y, seed.wrapping_add(2), logistic)?;
        // Held-out SSE of w*m1 + (1-w)*m2 is quadratic in w; the minimizer is
        // sum (a-b)(y-b) / sum (a-b)^2, clamped into [0, 1].
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in hold_idx {
            let a = m1.predict(xs[i]);
            let b = m2.predict(xs[i]);
            num += (a - b) * (y[i] - b);
            den += (a - b) * (a - b);
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            0.5
        }
    };
    let m1 = fit_impl(first, xs, y, seed.wrapping_add(3), logistic)?;
    let m2 = fit_impl(second, xs, y, seed.wrapping_add(4), logistic)?;
    Ok(FittedModel::Stacked {
        first: Box::new(m1),
        second: Box::new(m2),
        weight,
    })
}
