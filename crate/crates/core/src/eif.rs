//! The efficient influence function of the identified moment value
//! `h(beta, P)`, per-fold estimates built from it, and the cross-fitted
//! estimator with its variance.
//!
//! The uncentered score at one observation is
//!
//! ```text
//! psi = delta(b,x) * a
//!     + rho(x)/deltaA(x) * (2z-1)/pi_z(x)
//!       * ( M(y,b)(1-a) - mu_z(b,x) - (a - lam_z(x)) * delta(b,x) )
//! ```
//!
//! whose population mean is `h(beta, P)` at the true nuisances. The centered
//! influence function subtracts `h(beta, P)`.
//!
//! Determinism: per-fold reductions run over rows in ascending index order
//! with pairwise summation, fold fits derive their seeds from the fold plan,
//! and fold-level parallelism collects into index-addressed slots, so results
//! are bitwise identical for any worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Dataset, FoldPlan, Observation};
use crate::error::{Error, Result};
use crate::moments::MomentSpec;
use crate::numeric::{derive_seed, pairwise_sum, pairwise_sum_col};
use crate::nuisance::{
    fit_nuisances_with, ClipConfig, ClippedProbs, LearnerSpec, MuStrategy, NuisanceAtPoint,
    NuisanceBundle,
};

/// Centered influence-function value `psi - h_center` at one observation.
pub fn eif_evaluate(
    o: &Observation,
    nu: &NuisanceAtPoint,
    beta: &[f64],
    h_center: &[f64],
    moment: &MomentSpec,
    out: &mut [f64],
) -> Result<()> {
    uncentered_score(o, nu, beta, moment, out)?;
    for (v, h) in out.iter_mut().zip(h_center) {
        *v -= h;
    }
    Ok(())
}

/// The uncentered score `psi` (the empirical estimating function).
pub fn uncentered_score(
    o: &Observation,
    nu: &NuisanceAtPoint,
    beta: &[f64],
    moment: &MomentSpec,
    out: &mut [f64],
) -> Result<()> {
    moment.regression_target_into(o.y, o.a, beta, out)?;
    let a = f64::from(o.a);
    let sign = f64::from(2 * i32::from(o.z) - 1);
    let w = nu.rho / nu.delta_a * sign / nu.pi_z(o.z);
    let lam_z = nu.lam_z(o.z);
    let mu_z = nu.mu_z(o.z);
    for c in 0..out.len() {
        let resid = out[c] - mu_z[c] - (a - lam_z) * nu.delta[c];
        out[c] = nu.delta[c] * a + w * resid;
    }
    Ok(())
}

/// Per-fold estimate of `h(beta, P)` and its variance.
#[derive(Debug, Clone, Serialize)]
pub struct FoldEstimate {
    pub fold: usize,
    pub n_k: usize,
    /// Eq-style fold mean of the uncentered score
    pub theta: Vec<f64>,
    /// fold covariance of the score, centered at this fold's theta (row-major d x d)
    pub sigma2: Vec<f64>,
    /// rows where the |deltaA| floor engaged
    pub floored: usize,
}

/// K-fold average of the per-fold estimates.
#[derive(Debug, Clone, Serialize)]
pub struct CrossfitResult {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    /// row-major d x d
    pub sigma: Vec<f64>,
    pub d: usize,
    pub n: usize,
    pub per_fold: Vec<FoldEstimate>,
    pub floored_rows: usize,
}

impl CrossfitResult {
    pub fn theta1(&self) -> f64 {
        self.theta[0]
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma[0]
    }
}

/// Covariate-indexed caches for one fold: the grid-independent probability
/// nuisances, and the affine outcome-regression bases when available, so a
/// grid sweep predicts each model once per row.
pub struct PreparedFold {
    rows: Vec<usize>,
    probs: Vec<ClippedProbs>,
    /// per-row (mu0_base, mu1_base) when the bundle propagates affinely
    mu_base: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    floored: usize,
}

impl PreparedFold {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn floored(&self) -> usize {
        self.floored
    }
}

/// Prediction pass over the fold rows.
pub fn prepare_fold(data: &Dataset, rows: Vec<usize>, bundle: &NuisanceBundle) -> PreparedFold {
    let probs: Vec<ClippedProbs> = rows.iter().map(|&i| bundle.probs_at(&data.row(i).x)).collect();
    let floored = probs.iter().filter(|p| p.floored).count();
    let mu_base = bundle.affine_slope().map(|_| {
        rows.iter()
            .map(|&i| {
                let d = bundle.d();
                let mut b0 = vec![0.0; d];
                let mut b1 = vec![0.0; d];
                bundle.mu_base_into(0, &data.row(i).x, &mut b0);
                bundle.mu_base_into(1, &data.row(i).x, &mut b1);
                (b0, b1)
            })
            .collect()
    });
    PreparedFold {
        rows,
        probs,
        mu_base,
        floored,
    }
}

/// Scores for every row of a prepared fold at one beta, flattened row-major
/// `n_k x d`, in ascending row order.
pub fn fold_scores(
    data: &Dataset,
    pf: &PreparedFold,
    bundle: &NuisanceBundle,
    beta: &[f64],
) -> Result<Vec<f64>> {
    let d = bundle.d();
    let moment = bundle.moment().clone();
    let bound = moment.bound();
    let mut flat = vec![0.0; pf.rows.len() * d];
    let mut nu = NuisanceAtPoint::with_dim(d);
    let slope = bundle.affine_slope();

    for (ri, (&i, p)) in pf.rows.iter().zip(&pf.probs).enumerate() {
        let o = data.row(i);
        nu.rho = p.rho;
        nu.pi1 = p.pi1;
        nu.lam0 = p.lam0;
        nu.lam1 = p.lam1;
        nu.delta_a_raw = p.delta_a_raw;
        nu.delta_a = p.delta_a;
        nu.floored = p.floored;
        match (slope, &pf.mu_base) {
            (Some(s), Some(bases)) => {
                let (b0, b1) = &bases[ri];
                let c0 = s * beta[0] * (1.0 - p.lam0);
                let c1 = s * beta[0] * (1.0 - p.lam1);
                for c in 0..d {
                    nu.mu0[c] = b0[c] + c0;
                    nu.mu1[c] = b1[c] + c1;
                    if let Some(b) = bound {
                        nu.mu0[c] = nu.mu0[c].clamp(-b, b);
                        nu.mu1[c] = nu.mu1[c].clamp(-b, b);
                    }
                }
            }
            _ => {
                bundle.mu_into(0, &o.x, beta, p.lam0, &mut nu.mu0)?;
                bundle.mu_into(1, &o.x, beta, p.lam1, &mut nu.mu1)?;
            }
        }
        for c in 0..d {
            nu.delta[c] = (nu.mu1[c] - nu.mu0[c]) / p.delta_a;
        }
        uncentered_score(o, &nu, beta, &moment, &mut flat[ri * d..(ri + 1) * d])?;
    }
    Ok(flat)
}

/// Eq-style fold estimate: the fold mean of the uncentered score.
pub fn estimate_h_fold(
    data: &Dataset,
    fold_rows: &[usize],
    bundle: &NuisanceBundle,
    beta: &[f64],
) -> Result<Vec<f64>> {
    if fold_rows.is_empty() {
        return Err(Error::EmptyFold);
    }
    let pf = prepare_fold(data, fold_rows.to_vec(), bundle);
    let flat = fold_scores(data, &pf, bundle, beta)?;
    Ok(col_means(&flat, bundle.d(), fold_rows.len()))
}

/// Fold covariance `E_fold[(psi - center)(psi - center)^T]`.
pub fn variance_fold(
    data: &Dataset,
    fold_rows: &[usize],
    bundle: &NuisanceBundle,
    beta: &[f64],
    center: &[f64],
) -> Result<Vec<f64>> {
    if fold_rows.is_empty() {
        return Err(Error::EmptyFold);
    }
    let pf = prepare_fold(data, fold_rows.to_vec(), bundle);
    let flat = fold_scores(data, &pf, bundle, beta)?;
    Ok(centered_cov(&flat, bundle.d(), fold_rows.len(), center))
}

fn col_means(flat: &[f64], d: usize, n: usize) -> Vec<f64> {
    (0..d)
        .map(|c| pairwise_sum_col(flat, d, c) / n as f64)
        .collect()
}

fn centered_cov(flat: &[f64], d: usize, n: usize, center: &[f64]) -> Vec<f64> {
    let mut sigma = vec![0.0; d * d];
    let mut prod = vec![0.0; n];
    for c in 0..d {
        for e in c..d {
            for i in 0..n {
                prod[i] = (flat[i * d + c] - center[c]) * (flat[i * d + e] - center[e]);
            }
            let v = pairwise_sum(&prod) / n as f64;
            sigma[c * d + e] = v;
            sigma[e * d + c] = v;
        }
    }
    sigma
}

/// Fits one nuisance bundle per fold on that fold's complement. Parallel
/// over folds; bundle `k` always gets seed `derive_seed(plan.seed(), k)`.
pub fn fit_fold_bundles(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid: &[Vec<f64>],
    clip: ClipConfig,
) -> Result<Vec<NuisanceBundle>> {
    fit_fold_bundles_with(data, plan, learner, moment, grid, clip, &MuStrategy::Auto)
}

pub fn fit_fold_bundles_with(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid: &[Vec<f64>],
    clip: ClipConfig,
    strategy: &MuStrategy,
) -> Result<Vec<NuisanceBundle>> {
    (0..plan.k())
        .into_par_iter()
        .map(|k| {
            let complement = plan.complement_indices(k);
            let rows: Vec<_> = complement.iter().map(|&i| data.row(i).clone()).collect();
            let train = Dataset::from_rows(rows)?;
            fit_nuisances_with(
                &train,
                learner,
                moment,
                grid,
                clip,
                derive_seed(plan.seed(), k as u64),
                strategy,
            )
        })
        .collect()
}

/// Cross-fitted estimate at one beta from per-fold bundles prepared up
/// front (the Algorithm-style reuse across a grid).
pub fn crossfit_with_bundles(
    data: &Dataset,
    plan: &FoldPlan,
    bundles: &[NuisanceBundle],
    beta: &[f64],
) -> Result<CrossfitResult> {
    let prepared: Vec<PreparedFold> = (0..plan.k())
        .map(|k| prepare_fold(data, plan.fold_indices(k), &bundles[k]))
        .collect();
    crossfit_prepared(data, &prepared, bundles, beta).map(|(r, _)| r)
}

/// As [`crossfit_with_bundles`], also returning each row's uncentered score
/// (indexed by dataset row, each computed under its own fold's bundle).
pub fn crossfit_with_bundles_scores(
    data: &Dataset,
    plan: &FoldPlan,
    bundles: &[NuisanceBundle],
    beta: &[f64],
) -> Result<(CrossfitResult, Vec<f64>)> {
    let prepared: Vec<PreparedFold> = (0..plan.k())
        .map(|k| prepare_fold(data, plan.fold_indices(k), &bundles[k]))
        .collect();
    crossfit_prepared(data, &prepared, bundles, beta)
}

/// Shared core: fold estimates from prepared folds, averaged per the
/// cross-fitting recipe. Returns the result and per-row scores.
pub fn crossfit_prepared(
    data: &Dataset,
    prepared: &[PreparedFold],
    bundles: &[NuisanceBundle],
    beta: &[f64],
) -> Result<(CrossfitResult, Vec<f64>)> {
    let d = bundles[0].d();
    let k = prepared.len();
    let mut per_fold = Vec::with_capacity(k);
    let mut row_scores = vec![0.0; data.n() * d];

    for (fold, pf) in prepared.iter().enumerate() {
        if pf.rows.is_empty() {
            return Err(Error::EmptyFold);
        }
        let flat = fold_scores(data, pf, &bundles[fold], beta)?;
        let n_k = pf.rows.len();
        let theta = col_means(&flat, d, n_k);
        let sigma2 = centered_cov(&flat, d, n_k, &theta);
        for (ri, &i) in pf.rows.iter().enumerate() {
            row_scores[i * d..(i + 1) * d].copy_from_slice(&flat[ri * d..(ri + 1) * d]);
        }
        per_fold.push(FoldEstimate {
            fold,
            n_k,
            theta,
            sigma2,
            floored: pf.floored,
        });
    }

    let avg = |get: &dyn Fn(&FoldEstimate) -> &[f64], len: usize| -> Vec<f64> {
        (0..len)
            .map(|c| {
                let vals: Vec<f64> = per_fold.iter().map(|f| get(f)[c]).collect();
                pairwise_sum(&vals) / k as f64
            })
            .collect()
    };
    let theta = avg(&|f| &f.theta, d);
    let sigma = avg(&|f| &f.sigma2, d * d);
    let floored_rows = per_fold.iter().map(|f| f.floored).sum();

    Ok((
        CrossfitResult {
            beta: beta.to_vec(),
            theta,
            sigma,
            d,
            n: data.n(),
            per_fold,
            floored_rows,
        },
        row_scores,
    ))
}

/// One-shot cross-fitted estimate at a single beta: fit per-fold nuisances
/// on complements, evaluate on folds, average.
pub fn crossfit_estimate(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    beta: &[f64],
    clip: ClipConfig,
) -> Result<CrossfitResult> {
    let grid = vec![beta.to_vec()];
    let bundles = fit_fold_bundles(data, plan, learner, moment, &grid, clip)?;
    crossfit_with_bundles(data, plan, &bundles, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_folds, Observation};
    use crate::nuisance::OracleFunctions;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn worked_nuisance() -> NuisanceAtPoint {
        // rho=0.5, pi1=0.5, mu1=1.0, mu0=0.5, lam1=0.8, lam0=0.4
        // => deltaA=0.4, delta=1.25
        NuisanceAtPoint {
            rho: 0.5,
            pi1: 0.5,
            lam0: 0.4,
            lam1: 0.8,
            delta_a_raw: 0.4,
            delta_a: 0.4,
            floored: false,
            mu0: vec![0.5],
            mu1: vec![1.0],
            delta: vec![1.25],
        }
    }

    #[test]
    fn eif_worked_example_z1_a0() {
        let o = Observation::new(vec![], 1, 0, 2.0).unwrap();
        let nu = worked_nuisance();
        let mut out = [0.0];
        eif_evaluate(&o, &nu, &[0.0], &[0.0], &MomentSpec::mean(), &mut out).unwrap();
        assert_relative_eq!(out[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn eif_worked_example_z0_a1() {
        let o = Observation::new(vec![], 0, 1, 3.0).unwrap();
        let nu = worked_nuisance();
        let mut out = [0.0];
        eif_evaluate(&o, &nu, &[0.0], &[0.0], &MomentSpec::mean(), &mut out).unwrap();
        assert_relative_eq!(out[0], 4.375, epsilon = 1e-12);
    }

    #[test]
    fn eif_residual_free_case() {
        // A=1, Z=1, lam1=1, mu1=0, M(Y,b)(1-A)=0: correction vanishes and
        // the centered value is delta - h_center.
        let o = Observation::new(vec![], 1, 1, 9.0).unwrap();
        let mut nu = worked_nuisance();
        nu.lam1 = 1.0;
        nu.mu1 = vec![0.0];
        nu.mu0 = vec![-0.2];
        nu.delta_a_raw = 0.6;
        nu.delta_a = 0.6;
        nu.delta = vec![(0.0 - -0.2) / 0.6];
        let mut out = [0.0];
        eif_evaluate(&o, &nu, &[0.0], &[0.125], &MomentSpec::mean(), &mut out).unwrap();
        assert_relative_eq!(out[0], nu.delta[0] - 0.125, epsilon = 1e-14);
    }

    fn fixed_oracle() -> Arc<OracleFunctions> {
        Arc::new(OracleFunctions {
            rho: Arc::new(|_| 0.5),
            pi1: Arc::new(|_| 0.5),
            lam0: Arc::new(|_| 0.4),
            lam1: Arc::new(|_| 0.8),
            mu: Arc::new(|z, beta, _x, out| {
                let lam = if z == 1 { 0.8 } else { 0.4 };
                out[0] = (0.5 + 0.5 * f64::from(z)) - beta[0] * (1.0 - lam);
            }),
        })
    }

    #[test]
    fn single_row_fold_estimate_matches_worked_example() {
        let d = Dataset::from_rows(vec![Observation::new(vec![0.0], 1, 0, 2.0).unwrap()]).unwrap();
        let b = NuisanceBundle::oracle(fixed_oracle(), MomentSpec::mean(), ClipConfig::default());
        let theta = estimate_h_fold(&d, &[0], &b, &[0.0]).unwrap();
        assert_relative_eq!(theta[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_fold_rejected() {
        let d = Dataset::from_rows(vec![Observation::new(vec![0.0], 1, 0, 2.0).unwrap()]).unwrap();
        let b = NuisanceBundle::oracle(fixed_oracle(), MomentSpec::mean(), ClipConfig::default());
        assert!(matches!(
            estimate_h_fold(&d, &[], &b, &[0.0]).unwrap_err(),
            Error::EmptyFold
        ));
    }

    #[test]
    fn variance_fold_arithmetic() {
        // psi values {4, 6} with center 5 -> sigma2 = 1; identical rows -> 0.
        let rows = vec![
            Observation::new(vec![0.0], 1, 0, 1.6).unwrap(),
            Observation::new(vec![0.0], 1, 0, 2.4).unwrap(),
        ];
        let d = Dataset::from_rows(rows).unwrap();
        let b = NuisanceBundle::oracle(fixed_oracle(), MomentSpec::mean(), ClipConfig::default());
        // psi = (0.5/0.4)*(1/0.5)*(y - 1.0 + 0.8*1.25) = 2.5*(y - 0) ... check:
        // resid = y - mu1 - (0 - lam1)*delta = y - 1 + 1.0
        // psi = 2.5 * (y + 0) => y=1.6 -> 4, y=2.4 -> 6
        let s = variance_fold(&d, &[0, 1], &b, &[0.0], &[5.0]).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-12);
        let same = Dataset::from_rows(vec![
            Observation::new(vec![0.0], 1, 0, 2.0).unwrap(),
            Observation::new(vec![0.0], 1, 0, 2.0).unwrap(),
        ])
        .unwrap();
        let theta = estimate_h_fold(&same, &[0, 1], &b, &[0.0]).unwrap();
        let s = variance_fold(&same, &[0, 1], &b, &[0.0], &theta).unwrap();
        assert_relative_eq!(s[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn oracle_crossfit_equals_full_sample_mean() {
        // With fold-independent oracle nuisances and balanced folds, the
        // cross-fit average equals the full-sample mean of the score.
        let rows: Vec<Observation> = (0..40)
            .map(|i| {
                Observation::new(
                    vec![i as f64 / 40.0],
                    u8::from(i % 2 == 0),
                    u8::from(i % 3 == 0),
                    (i as f64 * 0.7).sin(),
                )
                .unwrap()
            })
            .collect();
        let data = Dataset::from_rows(rows).unwrap();
        let plan = make_folds(40, 2, 5).unwrap();
        let learner = LearnerSpec::Oracle(fixed_oracle());
        let r = crossfit_estimate(
            &data,
            &plan,
            &learner,
            &MomentSpec::mean(),
            &[0.0],
            ClipConfig::default(),
        )
        .unwrap();
        let b = NuisanceBundle::oracle(fixed_oracle(), MomentSpec::mean(), ClipConfig::default());
        let all: Vec<usize> = (0..40).collect();
        let full = estimate_h_fold(&data, &all, &b, &[0.0]).unwrap();
        assert_relative_eq!(r.theta1(), full[0], epsilon = 1e-12);
        assert_eq!(r.per_fold.len(), 2);
    }

    #[test]
    fn crossfit_deterministic_across_worker_counts() {
        let rows: Vec<Observation> = (0..60)
            .map(|i| {
                Observation::new(
                    vec![(i as f64 * 0.37).fract(), (i as f64 * 0.71).fract()],
                    u8::from((i * 7) % 3 == 0),
                    u8::from((i * 5) % 2 == 0),
                    (i as f64 * 0.13).cos(),
                )
                .unwrap()
            })
            .collect();
        let data = Dataset::from_rows(rows).unwrap();
        let plan = make_folds(60, 3, 42).unwrap();
        let learner = LearnerSpec::ConstantMean;
        let run = || {
            crossfit_estimate(
                &data,
                &plan,
                &learner,
                &MomentSpec::mean(),
                &[0.5],
                ClipConfig::default(),
            )
            .unwrap()
        };
        let base = run();
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let r = pool.install(run);
            assert_eq!(r.theta1().to_bits(), base.theta1().to_bits());
            assert_eq!(r.sigma1().to_bits(), base.sigma1().to_bits());
        }
    }
}
