//! Confidence intervals for the moment value `h(beta, P)` and test-inversion
//! confidence sets for the functional `beta*`, plus the ATT closed form and
//! the direct QTT moment.
//!
//! The acceptance rule compares `sqrt(n) |theta_hat(beta)| / sigma_hat(beta)`
//! against a critical value. Two conventions are provided:
//!
//! - `NormalPaper` (default): the critical value is the `(1-alpha)` standard
//!   normal quantile, used two-sidedly. At level `alpha` this acceptance
//!   region has asymptotic two-sided mass `1 - 2 alpha`.
//! - `ChiSq`: the squared statistic is compared against the `(1-alpha)`
//!   chi-squared(1) quantile, i.e. the critical value is the `(1-alpha/2)`
//!   normal quantile, giving asymptotic mass `1 - alpha`. The multivariate
//!   set always uses the chi-squared rule.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Dataset, FoldPlan};
use crate::eif::{
    crossfit_with_bundles_scores, fit_fold_bundles, fit_fold_bundles_with, prepare_fold,
    crossfit_prepared, CrossfitResult, PreparedFold,
};
use crate::error::{Error, Result};
use crate::moments::MomentSpec;
use crate::numeric::{chi2_quantile, empirical_quantile, normal_quantile, pairwise_mean, pairwise_sum};
use crate::nuisance::{ClipConfig, LearnerSpec, MuStrategy, NuisanceBundle};

/// Which critical value the scalar acceptance rule uses; see module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    NormalPaper,
    ChiSq,
}

impl Convention {
    /// Critical value for `sqrt(n)|theta|/sigma`.
    pub fn critical_value(self, alpha: f64) -> f64 {
        match self {
            Convention::NormalPaper => normal_quantile(1.0 - alpha),
            Convention::ChiSq => chi2_quantile(1.0 - alpha, 1).sqrt(),
        }
    }
}

/// Evaluation grid for the scalar functional.
#[derive(Debug, Clone, Serialize)]
pub enum GridSpec {
    Range { lo: f64, hi: f64, step: f64 },
    Points(Vec<f64>),
}

impl GridSpec {
    pub fn betas(&self) -> Result<Vec<f64>> {
        let pts = match self {
            GridSpec::Range { lo, hi, step } => {
                if !(lo < hi) {
                    return Err(Error::InvalidConfig("grid needs lo < hi".into()));
                }
                if !(*step > 0.0) {
                    return Err(Error::InvalidConfig("grid needs step > 0".into()));
                }
                let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
                (0..count).map(|i| lo + i as f64 * step).collect()
            }
            GridSpec::Points(p) => {
                let mut p = p.clone();
                p.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
                p
            }
        };
        if pts.len() < 3 {
            return Err(Error::InvalidConfig("grid needs at least 3 points".into()));
        }
        Ok(pts)
    }
}

/// Per-grid-point diagnostics of a scalar sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub theta: f64,
    pub sigma2: f64,
    /// `sqrt(n) |theta| / sigma`
    pub stat: f64,
}

/// Accepted set with diagnostics. `Interval` is emitted only when the
/// accepted grid points are contiguous; otherwise the raw `GridSet` is
/// returned with `contiguous = false`.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet {
    pub kind: SetKind,
    pub alpha: f64,
    pub convention: Convention,
    pub n: usize,
    pub contiguous: bool,
    pub diagnostics: Vec<BetaDiagnostic>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SetKind {
    Interval { lo: f64, hi: f64 },
    GridSet { accepted: Vec<Vec<f64>> },
    Empty,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaDiagnostic {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub stat: f64,
    pub accepted: bool,
}

impl ConfidenceSet {
    /// `[min accepted, max accepted]`, the Algorithm-style interval output,
    /// regardless of contiguity. None when empty.
    pub fn hull(&self) -> Option<(f64, f64)> {
        match &self.kind {
            SetKind::Interval { lo, hi } => Some((*lo, *hi)),
            SetKind::GridSet { accepted } => {
                let lo = accepted.first()?.first().copied()?;
                let hi = accepted.last()?.first().copied()?;
                Some((lo, hi))
            }
            SetKind::Empty => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.kind, SetKind::Empty)
    }
}

/// Two-sided confidence interval for `w' h(beta, P)` from a cross-fitted
/// result: `w'theta +- crit * sqrt(w' Sigma w / n)`.
pub fn ci_h(
    r: &CrossfitResult,
    w: &[f64],
    alpha: f64,
    convention: Convention,
) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    let d = r.d;
    debug_assert_eq!(w.len(), d);
    let mut quad = 0.0;
    for c in 0..d {
        for e in 0..d {
            quad += w[c] * r.sigma[c * d + e] * w[e];
        }
    }
    if !(quad > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let center: f64 = w.iter().zip(&r.theta).map(|(a, b)| a * b).sum();
    let half = convention.critical_value(alpha) * (quad / r.n as f64).sqrt();
    Ok((center - half, center + half))
}

/// Cross-fitted `(theta, sigma)` at every grid point, with per-fold
/// nuisances fit once and reused across the grid. Scalar moments only.
pub fn sweep(
    data: &Dataset,
    plan: &FoldPlan,
    bundles: &[NuisanceBundle],
    betas: &[f64],
) -> Result<Vec<SweepPoint>> {
    if bundles[0].d() != 1 {
        return Err(Error::InvalidConfig(
            "scalar sweep requires a one-dimensional moment".into(),
        ));
    }
    let prepared: Vec<PreparedFold> = (0..plan.k())
        .map(|k| prepare_fold(data, plan.fold_indices(k), &bundles[k]))
        .collect();
    let n = data.n() as f64;
    betas
        .par_iter()
        .map(|&b| {
            let (r, _) = crossfit_prepared(data, &prepared, bundles, &[b])?;
            let theta = r.theta[0];
            let sigma2 = r.sigma[0];
            let stat = if sigma2 > 0.0 {
                n.sqrt() * theta.abs() / sigma2.sqrt()
            } else if theta == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            Ok(SweepPoint {
                beta: b,
                theta,
                sigma2,
                stat,
            })
        })
        .collect()
}

/// Thresholds a finished sweep at one level.
pub fn set_from_sweep(
    sweep: &[SweepPoint],
    alpha: f64,
    convention: Convention,
    n: usize,
) -> ConfidenceSet {
    let crit = convention.critical_value(alpha);
    let mut diagnostics = Vec::with_capacity(sweep.len());
    let mut accepted_idx = Vec::new();
    for (i, p) in sweep.iter().enumerate() {
        let accepted = p.stat <= crit;
        if accepted {
            accepted_idx.push(i);
        }
        diagnostics.push(BetaDiagnostic {
            beta: vec![p.beta],
            theta: vec![p.theta],
            sigma: vec![p.sigma2],
            stat: p.stat,
            accepted,
        });
    }
    let mut warnings = Vec::new();
    let contiguous = accepted_idx
        .windows(2)
        .all(|w| w[1] == w[0] + 1);
    let kind = if accepted_idx.is_empty() {
        warnings.push("empty confidence set: no grid point accepted".into());
        SetKind::Empty
    } else if contiguous {
        SetKind::Interval {
            lo: sweep[accepted_idx[0]].beta,
            hi: sweep[*accepted_idx.last().unwrap()].beta,
        }
    } else {
        warnings.push("accepted set is not contiguous on the grid".into());
        SetKind::GridSet {
            accepted: accepted_idx.iter().map(|&i| vec![sweep[i].beta]).collect(),
        }
    };
    ConfidenceSet {
        kind,
        alpha,
        convention,
        n,
        contiguous,
        diagnostics,
        warnings,
    }
}

/// Test inversion for a scalar functional: per-fold nuisances are fit once,
/// every grid beta is tested, and the accepted set is returned.
pub fn invert_functional(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid: &GridSpec,
    alpha: f64,
    clip: ClipConfig,
    convention: Convention,
) -> Result<ConfidenceSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    if moment.d() != 1 {
        return Err(Error::InvalidConfig(
            "invert_functional is one-dimensional; use invert_functional_multi".into(),
        ));
    }
    let betas = grid.betas()?;
    let grid_vecs: Vec<Vec<f64>> = betas.iter().map(|&b| vec![b]).collect();
    let bundles = fit_fold_bundles(data, plan, learner, moment, &grid_vecs, clip)?;
    let sw = sweep(data, plan, &bundles, &betas)?;
    Ok(set_from_sweep(&sw, alpha, convention, data.n()))
}

/// Test inversion for a d-dimensional functional using the chi-squared rule
/// `n * theta' Sigma^{-1} theta <= Q_{1-alpha}(chi^2_d)`.
pub fn invert_functional_multi(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid_points: &[Vec<f64>],
    alpha: f64,
    clip: ClipConfig,
) -> Result<ConfidenceSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    if grid_points.len() < 3 {
        return Err(Error::InvalidConfig("grid needs at least 3 points".into()));
    }
    let d = moment.d();
    let bundles = fit_fold_bundles(data, plan, learner, moment, grid_points, clip)?;
    let prepared: Vec<PreparedFold> = (0..plan.k())
        .map(|k| prepare_fold(data, plan.fold_indices(k), &bundles[k]))
        .collect();
    let q = chi2_quantile(1.0 - alpha, d);
    let n = data.n();

    let diags: Result<Vec<BetaDiagnostic>> = grid_points
        .par_iter()
        .map(|beta| {
            let (r, _) = crossfit_prepared(data, &prepared, &bundles, beta)?;
            let stat = chi2_statistic(&r.theta, &r.sigma, d, n)
                .ok_or(Error::SingularSigma(beta[0]))?;
            Ok(BetaDiagnostic {
                beta: beta.clone(),
                theta: r.theta,
                sigma: r.sigma,
                stat,
                accepted: stat <= q,
            })
        })
        .collect();
    let diagnostics = diags?;

    let accepted: Vec<Vec<f64>> = diagnostics
        .iter()
        .filter(|d| d.accepted)
        .map(|d| d.beta.clone())
        .collect();
    let mut warnings = Vec::new();
    let contiguous = {
        let idx: Vec<usize> = diagnostics
            .iter()
            .enumerate()
            .filter(|(_, d)| d.accepted)
            .map(|(i, _)| i)
            .collect();
        idx.windows(2).all(|w| w[1] == w[0] + 1)
    };
    let kind = if accepted.is_empty() {
        warnings.push("empty confidence set: no grid point accepted".into());
        SetKind::Empty
    } else if d == 1 && contiguous {
        SetKind::Interval {
            lo: accepted[0][0],
            hi: accepted[accepted.len() - 1][0],
        }
    } else {
        SetKind::GridSet { accepted }
    };
    Ok(ConfidenceSet {
        kind,
        alpha,
        convention: Convention::ChiSq,
        n,
        contiguous,
        diagnostics,
        warnings,
    })
}

/// `n * theta' Sigma^{-1} theta` via Cholesky; None when Sigma is singular.
pub fn chi2_statistic(theta: &[f64], sigma: &[f64], d: usize, n: usize) -> Option<f64> {
    // Factor sigma = L L' and solve L v = theta; the statistic is n * |v|^2.
    let mut l = sigma.to_vec();
    for j in 0..d {
        let mut diag = l[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ds = diag.sqrt();
        l[j * d + j] = ds;
        for i in (j + 1)..d {
            let mut v = l[i * d + j];
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / ds;
        }
    }
    let mut v = theta.to_vec();
    for i in 0..d {
        for k in 0..i {
            let vk = v[k];
            v[i] -= l[i * d + k] * vk;
        }
        v[i] /= l[i * d + i];
    }
    Some(n as f64 * v.iter().map(|x| x * x).sum::<f64>())
}

/// Grid point minimizing the test statistic; exact ties break toward the
/// grid midpoint.
pub fn point_estimate(cs: &ConfidenceSet) -> Option<Vec<f64>> {
    if cs.diagnostics.is_empty() {
        return None;
    }
    let d = cs.diagnostics[0].beta.len();
    let mid: Vec<f64> = (0..d)
        .map(|c| {
            let lo = cs.diagnostics.first().unwrap().beta[c];
            let hi = cs.diagnostics.last().unwrap().beta[c];
            0.5 * (lo + hi)
        })
        .collect();
    let dist = |b: &[f64]| -> f64 {
        b.iter()
            .zip(&mid)
            .map(|(x, m)| (x - m) * (x - m))
            .sum::<f64>()
    };
    let mut best: Option<&BetaDiagnostic> = None;
    for diag in &cs.diagnostics {
        best = Some(match best {
            None => diag,
            Some(b) => {
                if diag.stat < b.stat
                    || (diag.stat == b.stat && dist(&diag.beta) < dist(&b.beta))
                {
                    diag
                } else {
                    b
                }
            }
        });
    }
    best.map(|b| b.beta.clone())
}

/// ATT point estimate with a delta-method interval.
#[derive(Debug, Clone, Serialize)]
pub struct AttResult {
    pub att: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// `beta0* = -h(0)/P(A=1)`, the counterfactual mean among the treated
    pub beta0_star: f64,
    /// cross-fitted `h(0)`
    pub h0: f64,
    pub treated_fraction: f64,
    pub result0: CrossfitResult,
}

/// ATT via the closed form: the identification identity gives
/// `E[Y0 | A=1] = -h(0, P) / P(A=1)`, so
/// `ATT = E[Y | A=1] + h(0, P) / P(A=1)`. The variance combines the EIF of
/// `h(0, P)` with the influence functions of the two sample means.
pub fn att_estimate(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    clip: ClipConfig,
    alpha: f64,
    convention: Convention,
) -> Result<AttResult> {
    let moment = MomentSpec::mean();
    let zero = vec![0.0];
    let bundles = fit_fold_bundles(data, plan, learner, &moment, &[zero.clone()], clip)?;
    let (r, scores) = crossfit_with_bundles_scores(data, plan, &bundles, &zero)?;

    let n = data.n();
    let a_vals: Vec<f64> = data.rows().iter().map(|r| f64::from(r.a)).collect();
    let ya_vals: Vec<f64> = data.rows().iter().map(|r| r.y * f64::from(r.a)).collect();
    let m_a = pairwise_mean(&a_vals);
    if m_a == 0.0 {
        return Err(Error::NoTreatedUnits);
    }
    let m_ya = pairwise_mean(&ya_vals);
    let h0 = r.theta[0];
    let beta0_star = -h0 / m_a;
    let att = m_ya / m_a - beta0_star;

    let phi: Vec<f64> = (0..n)
        .map(|i| {
            ((ya_vals[i] - m_ya) + (scores[i] - h0) - att * (a_vals[i] - m_a)) / m_a
        })
        .collect();
    let var = pairwise_mean(&phi.iter().map(|v| v * v).collect::<Vec<_>>());
    let se = (var / n as f64).sqrt();
    let half = convention.critical_value(alpha) * se;
    Ok(AttResult {
        att,
        se,
        ci: (att - half, att + half),
        beta0_star,
        h0,
        treated_fraction: m_a,
        result0: r,
    })
}

/// Direct QTT inversion output. The variance of the plug-in test ignores
/// nuisance-estimation noise (first-order plug-in).
#[derive(Debug, Clone, Serialize)]
pub struct QttResult {
    pub set: ConfidenceSet,
    /// per-fold treated q-quantile of the outcome, fit on each complement
    pub gamma_by_fold: Vec<f64>,
    pub treated_only: bool,
}

/// Direct QTT moment inversion: `gamma_hat` is the empirical treated
/// q-quantile per training complement, and each grid beta is accepted when
/// the sample mean of
/// `(1{Y <= gamma_hat + beta(1-A)} - q) * ((2Z-1)/pi_Z * rho/deltaA)^(1-A)`
/// is within `crit * sd / sqrt(n)` of zero.
pub fn qtt_direct_moment(
    data: &Dataset,
    plan: &FoldPlan,
    learner: &LearnerSpec,
    q: f64,
    grid: &GridSpec,
    alpha: f64,
    clip: ClipConfig,
    convention: Convention,
) -> Result<QttResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig("q must lie strictly in (0,1)".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    let betas = grid.betas()?;
    let n = data.n();
    let treated_only = data.rows().iter().all(|r| r.a == 1);

    // gamma_hat per fold from the complement's treated outcomes
    let mut gamma_by_fold = Vec::with_capacity(plan.k());
    for k in 0..plan.k() {
        let treated: Vec<f64> = plan
            .complement_indices(k)
            .iter()
            .map(|&i| data.row(i))
            .filter(|r| r.a == 1)
            .map(|r| r.y)
            .collect();
        let g = empirical_quantile(&treated, q).ok_or(Error::NoTreatedUnits)?;
        gamma_by_fold.push(g);
    }

    // Row weights: 1 for treated rows; the IV weight otherwise, from the
    // row's own fold bundle. Computed once, reused across the grid.
    let mut weights = vec![0.0; n];
    let mut fold_of_row = vec![0usize; n];
    if treated_only {
        weights.iter_mut().for_each(|w| *w = 1.0);
    } else {
        let bundles = fit_fold_bundles_with(
            data,
            plan,
            learner,
            &MomentSpec::mean(),
            &[],
            clip,
            &MuStrategy::SkipMu,
        )?;
        for k in 0..plan.k() {
            for i in plan.fold_indices(k) {
                fold_of_row[i] = k;
                let r = data.row(i);
                if r.a == 1 {
                    weights[i] = 1.0;
                } else {
                    let p = bundles[k].probs_at(&r.x);
                    let pi_z = if r.z == 1 { p.pi1 } else { 1.0 - p.pi1 };
                    let sign = f64::from(2 * i32::from(r.z) - 1);
                    weights[i] = sign / pi_z * p.rho / p.delta_a;
                }
            }
        }
    }
    for k in 0..plan.k() {
        for i in plan.fold_indices(k) {
            fold_of_row[i] = k;
        }
    }

    let points: Vec<SweepPoint> = betas
        .par_iter()
        .map(|&beta| {
            let scores: Vec<f64> = (0..n)
                .map(|i| {
                    let r = data.row(i);
                    let gamma = gamma_by_fold[fold_of_row[i]];
                    let cut = gamma + beta * f64::from(1 - r.a);
                    (f64::from(r.y <= cut) - q) * weights[i]
                })
                .collect();
            let mean = pairwise_mean(&scores);
            let centered: Vec<f64> = scores.iter().map(|s| (s - mean) * (s - mean)).collect();
            let sd = pairwise_sum(&centered) / n as f64;
            let stat = if sd > 0.0 {
                (n as f64).sqrt() * mean.abs() / sd.sqrt()
            } else if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            SweepPoint {
                beta,
                theta: mean,
                sigma2: sd,
                stat,
            }
        })
        .collect();

    let mut set = set_from_sweep(&points, alpha, convention, n);
    if treated_only {
        set.warnings.push(
            "treated-only data: the direct QTT moment degenerates to a test of the treated quantile"
                .into(),
        );
    }
    Ok(QttResult {
        set,
        gamma_by_fold,
        treated_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stub_result(theta: f64, sigma: f64, n: usize) -> CrossfitResult {
        CrossfitResult {
            beta: vec![0.0],
            theta: vec![theta],
            sigma: vec![sigma],
            d: 1,
            n,
            per_fold: vec![],
            floored_rows: 0,
        }
    }

    #[test]
    fn ci_h_paper_convention_example() {
        // theta=0, Sigma=1, n=100, alpha=0.05 -> +-z_{0.05}/10, z ~ 1.6449
        let r = stub_result(0.0, 1.0, 100);
        let (lo, hi) = ci_h(&r, &[1.0], 0.05, Convention::NormalPaper).unwrap();
        assert_relative_eq!(hi, 1.6448536269514722 / 10.0, epsilon = 1e-9);
        assert_relative_eq!(lo, -hi);
    }

    #[test]
    fn ci_h_degenerate_variance() {
        let r = stub_result(0.0, 0.0, 100);
        assert!(matches!(
            ci_h(&r, &[1.0], 0.05, Convention::NormalPaper).unwrap_err(),
            Error::DegenerateVariance
        ));
    }

    #[test]
    fn ci_h_projects_with_w() {
        let r = CrossfitResult {
            beta: vec![0.0, 0.0],
            theta: vec![2.0, 50.0],
            sigma: vec![1.0, 0.0, 0.0, 9.0],
            d: 2,
            n: 100,
            per_fold: vec![],
            floored_rows: 0,
        };
        let (lo, hi) = ci_h(&r, &[1.0, 0.0], 0.05, Convention::NormalPaper).unwrap();
        // only Sigma_11 = 1 enters
        assert_relative_eq!(hi - lo, 2.0 * 1.6448536269514722 / 10.0, epsilon = 1e-9);
        assert_relative_eq!(0.5 * (hi + lo), 2.0, epsilon = 1e-12);
    }

    fn sweep_from(thetas: &[f64], sigma: f64, n: usize) -> Vec<SweepPoint> {
        thetas
            .iter()
            .enumerate()
            .map(|(i, &t)| SweepPoint {
                beta: i as f64,
                theta: t,
                sigma2: sigma * sigma,
                stat: (n as f64).sqrt() * t.abs() / sigma,
            })
            .collect()
    }

    #[test]
    fn threshold_comparison_accepts_expected_points() {
        // thresholds all 0.2 (sigma chosen so crit*sd/sqrt(n) = 0.2):
        // accepted {1}, interval [1,1]
        let n = 100;
        let crit = Convention::NormalPaper.critical_value(0.05);
        let sigma = 0.2 * (n as f64).sqrt() / crit;
        let sw = sweep_from(&[0.5, 0.1, -0.4], sigma, n);
        let cs = set_from_sweep(&sw, 0.05, Convention::NormalPaper, n);
        match cs.kind {
            SetKind::Interval { lo, hi } => {
                assert_relative_eq!(lo, 1.0);
                assert_relative_eq!(hi, 1.0);
            }
            ref other => panic!("expected interval, got {other:?}"),
        }
    }

    #[test]
    fn all_rejected_is_empty() {
        let sw = sweep_from(&[5.0, 6.0, -7.0], 0.1, 100);
        let cs = set_from_sweep(&sw, 0.05, Convention::NormalPaper, 100);
        assert!(cs.is_empty());
        assert!(cs.hull().is_none());
        assert!(!cs.warnings.is_empty());
    }

    #[test]
    fn noncontiguous_becomes_gridset() {
        let n = 100;
        let crit = Convention::NormalPaper.critical_value(0.05);
        let sigma = 0.2 * (n as f64).sqrt() / crit;
        let sw = sweep_from(&[0.1, 0.5, 0.1], sigma, n);
        let cs = set_from_sweep(&sw, 0.05, Convention::NormalPaper, n);
        assert!(!cs.contiguous);
        match &cs.kind {
            SetKind::GridSet { accepted } => {
                assert_eq!(accepted.len(), 2);
            }
            other => panic!("expected grid set, got {other:?}"),
        }
        assert_eq!(cs.hull(), Some((0.0, 2.0)));
    }

    #[test]
    fn point_estimate_argmin_and_tie_rule() {
        let sw = sweep_from(&[0.5, 0.1, -0.4], 1.0, 100);
        let cs = set_from_sweep(&sw, 0.05, Convention::NormalPaper, 100);
        assert_eq!(point_estimate(&cs).unwrap(), vec![1.0]);
        // two exact minima at beta = 0 and beta = 2; beta = 2 is nearer to
        // the midpoint of [0, 3]
        let sw = sweep_from(&[0.1, 0.5, 0.1, 0.9], 1.0, 100);
        let cs = set_from_sweep(&sw, 0.05, Convention::NormalPaper, 100);
        assert_eq!(point_estimate(&cs).unwrap(), vec![2.0]);
    }

    #[test]
    fn chi2_statistic_worked_example() {
        // diagonal Sigma = I, n = 100, theta = (0.1, 0.1): stat = 2.0
        let stat = chi2_statistic(&[0.1, 0.1], &[1.0, 0.0, 0.0, 1.0], 2, 100).unwrap();
        assert_relative_eq!(stat, 2.0, epsilon = 1e-12);
        assert!(stat <= chi2_quantile(0.95, 2));
        // theta = 0 is always accepted
        let zero = chi2_statistic(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2, 100).unwrap();
        assert_relative_eq!(zero, 0.0);
        // singular Sigma is flagged
        assert!(chi2_statistic(&[0.1], &[0.0], 1, 100).is_none());
    }

    #[test]
    fn chi2_one_dof_matches_squared_normal_rule() {
        // the ChiSq convention's scalar critical value is the sqrt of the
        // chi-squared(1) quantile
        let c = Convention::ChiSq.critical_value(0.05);
        assert_relative_eq!(c * c, chi2_quantile(0.95, 1), epsilon = 1e-9);
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::Range {
            lo: 0.0,
            hi: 1.0,
            step: 0.5
        }
        .betas()
        .is_ok());
        assert!(GridSpec::Range {
            lo: 1.0,
            hi: 0.0,
            step: 0.5
        }
        .betas()
        .is_err());
        assert!(GridSpec::Points(vec![0.0, 1.0]).betas().is_err());
        let b = GridSpec::Range {
            lo: 0.0,
            hi: 1.0,
            step: 0.25,
        }
        .betas()
        .unwrap();
        assert_eq!(b.len(), 5);
        assert_relative_eq!(b[4], 1.0);
    }

    proptest! {
        // Shrinking alpha (larger critical value) can only grow the set.
        #[test]
        fn acceptance_monotone_in_alpha(
            thetas in proptest::collection::vec(-1.0f64..1.0, 5..40),
            a1 in 0.02f64..0.4,
            shrink in 0.1f64..0.9,
        ) {
            let a2 = a1 * shrink; // a2 < a1
            let sw = sweep_from(&thetas, 1.0, 200);
            let big = set_from_sweep(&sw, a1, Convention::NormalPaper, 200);
            let small = set_from_sweep(&sw, a2, Convention::NormalPaper, 200);
            for (d_big, d_small) in big.diagnostics.iter().zip(&small.diagnostics) {
                prop_assert!(!d_big.accepted || d_small.accepted);
            }
        }

        // Interval endpoints are grid members and accepted.
        #[test]
        fn interval_endpoints_belong_to_grid(
            thetas in proptest::collection::vec(-0.3f64..0.3, 5..30),
        ) {
            let sw = sweep_from(&thetas, 2.0, 100);
            let cs = set_from_sweep(&sw, 0.1, Convention::NormalPaper, 100);
            if let SetKind::Interval { lo, hi } = cs.kind {
                let lo_diag = cs.diagnostics.iter().find(|d| d.beta[0] == lo).unwrap();
                let hi_diag = cs.diagnostics.iter().find(|d| d.beta[0] == hi).unwrap();
                prop_assert!(lo_diag.accepted && hi_diag.accepted);
            }
        }
    }
}
