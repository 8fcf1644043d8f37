//! Fitting and evaluation of the nuisance functions
//! `eta = (rho, pi1, mu0, mu1, lam0, lam1)` on held-out data, with clipping
//! to keep the influence-function weights bounded:
//!
//! - `rho(x)  = P(A=1 | X=x)`
//! - `pi1(x)  = P(Z=1 | X=x)`
//! - `lam_z(x) = P(A=1 | Z=z, X=x)`
//! - `mu_z(beta, x) = E[M(Y, beta)(1-A) | Z=z, X=x]`
//!
//! and the derived quantities `deltaA = lam1 - lam0` and
//! `delta = (mu1 - mu0) / deltaA`.
//!
//! When the moment family is affine in beta the outcome regressions are fit
//! once at beta = 0 and propagated along the grid; otherwise one regression
//! per grid point is fit (the default for quantile moments), with an
//! opt-in pooled distributional strategy that fits indicator-CDF regressions
//! on a fixed t-grid and interpolates monotonically.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::{fit_probability, fit_regression, FittedModel, ModelParams};
use crate::moments::{MomentKind, MomentSpec};
use crate::numeric::derive_seed;

/// Clipping configuration enforcing the regularity floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// floor for `pi1`: clipped into `[eps_pi, 1 - eps_pi]`
    pub eps_pi: f64,
    /// floor for `|deltaA|`, sign-preserving
    pub eps_delta_a: f64,
    /// clamp `rho`, `lam_z` into [0, 1]
    pub clamp_prob: bool,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_pi: 0.01,
            eps_delta_a: 0.01,
            clamp_prob: true,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_pi > 0.0 && self.eps_pi < 0.5) {
            return Err(Error::InvalidConfig(
                "eps_pi must lie strictly in (0, 0.5)".into(),
            ));
        }
        if !(self.eps_delta_a > 0.0) {
            return Err(Error::InvalidConfig("eps_delta_a must be positive".into()));
        }
        Ok(())
    }

    /// Sign-preserving floor; exact zero counts as positive.
    pub fn floor_delta_a(&self, v: f64) -> f64 {
        if v >= 0.0 {
            v.max(self.eps_delta_a)
        } else {
            v.min(-self.eps_delta_a)
        }
    }
}

pub type NuisanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type OracleMuFn = Arc<dyn Fn(u8, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Known nuisance functions, plugged in instead of fitting. Used by the
/// simulation oracle layer and by tests.
#[derive(Clone)]
pub struct OracleFunctions {
    pub rho: NuisanceFn,
    pub pi1: NuisanceFn,
    pub lam0: NuisanceFn,
    pub lam1: NuisanceFn,
    /// `mu(z, beta, x, out)` writes `mu_z(beta, x)` into `out`
    pub mu: OracleMuFn,
}

impl fmt::Debug for OracleFunctions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("OracleFunctions {{ .. }}")
    }
}

/// Which learner backs the nuisance fits.
#[derive(Debug, Clone)]
pub enum LearnerSpec {
    ConstantMean,
    /// IRLS logistic for probability targets, ridge for regression targets.
    LogisticRegression(crate::learners::LinearParams),
    GradientBoostedStumps(crate::learners::GbtParams),
    /// Convex 2-model combination chosen by held-out squared error.
    Stacked {
        first: Box<LearnerSpec>,
        second: Box<LearnerSpec>,
        holdout_frac: f64,
    },
    /// Known functions; nothing is fit.
    Oracle(Arc<OracleFunctions>),
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        self.to_model_params().map(|_| ()).or_else(|e| match self {
            LearnerSpec::Oracle(_) => Ok(()),
            _ => Err(e),
        })
    }

    fn to_model_params(&self) -> Result<ModelParams> {
        let params = match self {
            LearnerSpec::ConstantMean => ModelParams::Constant,
            LearnerSpec::LogisticRegression(p) => ModelParams::Linear(*p),
            LearnerSpec::GradientBoostedStumps(p) => ModelParams::Gbt(*p),
            LearnerSpec::Stacked {
                first,
                second,
                holdout_frac,
            } => ModelParams::Stacked {
                first: Box::new(first.to_model_params()?),
                second: Box::new(second.to_model_params()?),
                holdout_frac: *holdout_frac,
            },
            LearnerSpec::Oracle(_) => {
                return Err(Error::InvalidConfig(
                    "oracle learner has no fitting parameters".into(),
                ))
            }
        };
        params.validate()?;
        Ok(params)
    }
}

/// Strategy for the beta-dependence of the outcome regressions.
#[derive(Debug, Clone, PartialEq)]
pub enum MuStrategy {
    /// Affine propagation when the moment decomposes, else per grid point.
    Auto,
    /// One regression per grid point per instrument arm.
    PerBeta,
    /// Fit `E[1{Y<=t}(1-A) | Z, X]` on a t-grid and interpolate
    /// monotonically; quantile moments only.
    PooledCdf { t_grid: Option<Vec<f64>> },
    /// Skip the outcome regressions entirely (weights-only consumers).
    SkipMu,
}

#[derive(Debug)]
enum MuRepr {
    /// `mu_z(beta, x) = base_z(x) + slope * beta * (1 - lam_z(x))`
    Affine {
        mu0_base: Vec<FittedModel>,
        mu1_base: Vec<FittedModel>,
        slope: f64,
    },
    /// grid[i] is a d-vector; models indexed `[grid][coordinate]`
    PerBeta {
        grid: Vec<Vec<f64>>,
        mu0: Vec<Vec<FittedModel>>,
        mu1: Vec<Vec<FittedModel>>,
    },
    PooledCdf {
        t_grid: Vec<f64>,
        c0: Vec<FittedModel>,
        c1: Vec<FittedModel>,
        q: f64,
    },
    None,
}

#[derive(Debug)]
enum BundleRepr {
    Fitted {
        rho: FittedModel,
        pi1: FittedModel,
        lam0: FittedModel,
        lam1: FittedModel,
        mu: MuRepr,
    },
    Oracle(Arc<OracleFunctions>),
}

/// A fitted (or oracle) nuisance sextuple, immutable and shareable across
/// workers. Evaluation applies the clipping rules.
#[derive(Debug)]
pub struct NuisanceBundle {
    repr: BundleRepr,
    moment: MomentSpec,
    clip: ClipConfig,
}

/// Probability nuisances at one covariate point, post-clipping.
#[derive(Debug, Clone, Copy)]
pub struct ClippedProbs {
    pub rho: f64,
    pub pi1: f64,
    pub lam0: f64,
    pub lam1: f64,
    /// `lam1 - lam0` before flooring
    pub delta_a_raw: f64,
    /// after the sign-preserving floor
    pub delta_a: f64,
    pub floored: bool,
}

/// All nuisances evaluated at one `(x, beta)`.
#[derive(Debug, Clone)]
pub struct NuisanceAtPoint {
    pub rho: f64,
    pub pi1: f64,
    pub lam0: f64,
    pub lam1: f64,
    pub delta_a_raw: f64,
    pub delta_a: f64,
    pub floored: bool,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub delta: Vec<f64>,
}

impl NuisanceAtPoint {
    pub fn with_dim(d: usize) -> Self {
        Self {
            rho: 0.0,
            pi1: 0.0,
            lam0: 0.0,
            lam1: 0.0,
            delta_a_raw: 0.0,
            delta_a: 0.0,
            floored: false,
            mu0: vec![0.0; d],
            mu1: vec![0.0; d],
            delta: vec![0.0; d],
        }
    }

    pub fn pi_z(&self, z: u8) -> f64 {
        if z == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    pub fn lam_z(&self, z: u8) -> f64 {
        if z == 1 {
            self.lam1
        } else {
            self.lam0
        }
    }

    pub fn mu_z(&self, z: u8) -> &[f64] {
        if z == 1 {
            &self.mu1
        } else {
            &self.mu0
        }
    }
}

impl NuisanceBundle {
    /// Builds a bundle around known functions without fitting anything.
    pub fn oracle(functions: Arc<OracleFunctions>, moment: MomentSpec, clip: ClipConfig) -> Self {
        Self {
            repr: BundleRepr::Oracle(functions),
            moment,
            clip,
        }
    }

    pub fn d(&self) -> usize {
        self.moment.d()
    }

    pub fn clip(&self) -> &ClipConfig {
        &self.clip
    }

    pub fn moment(&self) -> &MomentSpec {
        &self.moment
    }

    /// The affine propagation slope when this bundle evaluates `mu` as
    /// `base + slope * beta * (1 - lam_z)`; None for grid/pooled strategies.
    pub fn affine_slope(&self) -> Option<f64> {
        match &self.repr {
            BundleRepr::Fitted {
                mu: MuRepr::Affine { slope, .. },
                ..
            } => Some(*slope),
            BundleRepr::Oracle(_) => match self.moment.affine_decomposition() {
                Ok(dec) if dec.exists => Some(dec.slope),
                _ => None,
            },
            _ => None,
        }
    }

    /// Writes the beta-free regression base `mu_z(0, x)` into `out`.
    /// Only meaningful when [`Self::affine_slope`] is Some; the moment-bound
    /// clamp is applied after the caller adds the beta term, mirroring
    /// [`Self::mu_into`].
    pub fn mu_base_into(&self, z: u8, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            BundleRepr::Fitted {
                mu: MuRepr::Affine {
                    mu0_base, mu1_base, ..
                },
                ..
            } => {
                let models = if z == 1 { mu1_base } else { mu0_base };
                for (v, m) in out.iter_mut().zip(models) {
                    *v = m.predict(x);
                }
            }
            BundleRepr::Oracle(f) => {
                let zero = vec![0.0; out.len()];
                (f.mu)(z, &zero, x, out);
            }
            _ => panic!("mu_base_into called on a non-affine bundle"),
        }
    }

    /// Probability nuisances at `x`, clipped.
    pub fn probs_at(&self, x: &[f64]) -> ClippedProbs {
        let (rho, pi1, lam0, lam1) = match &self.repr {
            BundleRepr::Fitted {
                rho,
                pi1,
                lam0,
                lam1,
                ..
            } => (
                rho.predict(x),
                pi1.predict(x),
                lam0.predict(x),
                lam1.predict(x),
            ),
            BundleRepr::Oracle(f) => ((f.rho)(x), (f.pi1)(x), (f.lam0)(x), (f.lam1)(x)),
        };
        self.clip_probs(rho, pi1, lam0, lam1)
    }

    fn clip_probs(&self, rho: f64, pi1: f64, lam0: f64, lam1: f64) -> ClippedProbs {
        let (rho, lam0, lam1) = if self.clip.clamp_prob {
            (
                rho.clamp(0.0, 1.0),
                lam0.clamp(0.0, 1.0),
                lam1.clamp(0.0, 1.0),
            )
        } else {
            (rho, lam0, lam1)
        };
        let pi1 = pi1.clamp(self.clip.eps_pi, 1.0 - self.clip.eps_pi);
        let delta_a_raw = lam1 - lam0;
        let delta_a = self.clip.floor_delta_a(delta_a_raw);
        ClippedProbs {
            rho,
            pi1,
            lam0,
            lam1,
            delta_a_raw,
            delta_a,
            floored: delta_a_raw.abs() < self.clip.eps_delta_a,
        }
    }

    /// Writes `mu_z(beta, x)` into `out`, applying affine propagation or the
    /// grid lookup, then clamping by the moment bound when one exists.
    /// `lam_z` must be the clipped value from the same evaluation.
    pub fn mu_into(&self, z: u8, x: &[f64], beta: &[f64], lam_z: f64, out: &mut [f64]) -> Result<()> {
        match &self.repr {
            BundleRepr::Oracle(f) => match self.moment.affine_decomposition() {
                Ok(dec) if dec.exists => {
                    let zero = vec![0.0; beta.len()];
                    (f.mu)(z, &zero, x, out);
                    let c = dec.slope * beta[0] * (1.0 - lam_z);
                    for v in out.iter_mut() {
                        *v += c;
                    }
                }
                _ => (f.mu)(z, beta, x, out),
            },
            BundleRepr::Fitted { mu, .. } => match mu {
                MuRepr::Affine {
                    mu0_base,
                    mu1_base,
                    slope,
                } => {
                    let models = if z == 1 { mu1_base } else { mu0_base };
                    let c = slope * beta[0] * (1.0 - lam_z);
                    for (v, m) in out.iter_mut().zip(models) {
                        *v = m.predict(x) + c;
                    }
                }
                MuRepr::PerBeta { grid, mu0, mu1 } => {
                    let idx = grid_index(grid, beta)?;
                    let models = if z == 1 { &mu1[idx] } else { &mu0[idx] };
                    for (v, m) in out.iter_mut().zip(models) {
                        *v = m.predict(x);
                    }
                }
                MuRepr::PooledCdf { t_grid, c0, c1, q } => {
                    let models = if z == 1 { c1 } else { c0 };
                    let mut cdf: Vec<f64> = models.iter().map(|m| m.predict(x)).collect();
                    isotonic_nondecreasing(&mut cdf);
                    for v in cdf.iter_mut() {
                        *v = v.clamp(0.0, 1.0);
                    }
                    let c_at = interp_clamped(t_grid, &cdf, beta[0]);
                    out[0] = (1.0 - q) * (1.0 - lam_z) - c_at;
                }
                MuRepr::None => {
                    return Err(Error::InvalidConfig(
                        "bundle was fitted without outcome regressions".into(),
                    ))
                }
            },
        }
        if let Some(bound) = self.moment.bound() {
            for v in out.iter_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
        Ok(())
    }

    /// Full evaluation at `(x, beta)` into a reusable output.
    pub fn eval_into(&self, x: &[f64], beta: &[f64], out: &mut NuisanceAtPoint) -> Result<()> {
        let p = self.probs_at(x);
        out.rho = p.rho;
        out.pi1 = p.pi1;
        out.lam0 = p.lam0;
        out.lam1 = p.lam1;
        out.delta_a_raw = p.delta_a_raw;
        out.delta_a = p.delta_a;
        out.floored = p.floored;
        self.mu_into(0, x, beta, p.lam0, &mut out.mu0)?;
        self.mu_into(1, x, beta, p.lam1, &mut out.mu1)?;
        for c in 0..self.d() {
            out.delta[c] = (out.mu1[c] - out.mu0[c]) / p.delta_a;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], beta: &[f64]) -> Result<NuisanceAtPoint> {
        let mut out = NuisanceAtPoint::with_dim(self.d());
        self.eval_into(x, beta, &mut out)?;
        Ok(out)
    }
}

fn grid_index(grid: &[Vec<f64>], beta: &[f64]) -> Result<usize> {
    // Exact match first (inference passes the grid values through verbatim),
    // then a tight relative tolerance.
    if let Some(i) = grid.iter().position(|g| g.as_slice() == beta) {
        return Ok(i);
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    grid.iter()
        .position(|g| g.iter().zip(beta).all(|(&a, &b)| close(a, b)))
        .ok_or(Error::BetaNotOnGrid(beta.first().copied().unwrap_or(f64::NAN)))
}

/// Pool-adjacent-violators: projects onto nondecreasing sequences in place.
fn isotonic_nondecreasing(v: &mut [f64]) {
    let n = v.len();
    // (value, weight) blocks
    let mut vals = Vec::with_capacity(n);
    let mut wts: Vec<usize> = Vec::with_capacity(n);
    for &x in v.iter() {
        vals.push(x);
        wts.push(1);
        while vals.len() > 1 && vals[vals.len() - 2] > vals[vals.len() - 1] {
            let (v2, w2) = (vals.pop().unwrap(), wts.pop().unwrap());
            let last = vals.len() - 1;
            let w1 = wts[last];
            vals[last] = (vals[last] * w1 as f64 + v2 * w2 as f64) / (w1 + w2) as f64;
            wts[last] = w1 + w2;
        }
    }
    let mut i = 0;
    for (&val, &w) in vals.iter().zip(&wts) {
        for _ in 0..w {
            v[i] = val;
            i += 1;
        }
    }
}

/// Linear interpolation with clamped extrapolation.
fn interp_clamped(ts: &[f64], ys: &[f64], t: f64) -> f64 {
    if t <= ts[0] {
        return ys[0];
    }
    if t >= ts[ts.len() - 1] {
        return ys[ys.len() - 1];
    }
    let hi = ts.partition_point(|&v| v < t);
    let lo = hi - 1;
    if ts[hi] == ts[lo] {
        return ys[lo];
    }
    let w = (t - ts[lo]) / (ts[hi] - ts[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

/// Fits all six nuisances on `train` using the default strategy (affine
/// propagation when the moment decomposes, per-grid-point otherwise).
pub fn fit_nuisances(
    train: &Dataset,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid: &[Vec<f64>],
    clip: ClipConfig,
    seed: u64,
) -> Result<NuisanceBundle> {
    fit_nuisances_with(train, learner, moment, grid, clip, seed, &MuStrategy::Auto)
}

/// As [`fit_nuisances`] with an explicit outcome-regression strategy.
pub fn fit_nuisances_with(
    train: &Dataset,
    learner: &LearnerSpec,
    moment: &MomentSpec,
    grid: &[Vec<f64>],
    clip: ClipConfig,
    seed: u64,
    strategy: &MuStrategy,
) -> Result<NuisanceBundle> {
    clip.validate()?;
    if train.n() == 0 {
        return Err(Error::DegenerateArm("empty training set".into()));
    }

    if let LearnerSpec::Oracle(f) = learner {
        return Ok(NuisanceBundle::oracle(f.clone(), moment.clone(), clip));
    }
    let params = learner.to_model_params()?;

    let rows = train.rows();
    let has = |f: &dyn Fn(&crate::dataset::Observation) -> bool| rows.iter().any(|r| f(r));
    if !has(&|r| r.z == 0) || !has(&|r| r.z == 1) {
        return Err(Error::DegenerateArm("an instrument arm is absent".into()));
    }
    if !has(&|r| r.a == 0) || !has(&|r| r.a == 1) {
        return Err(Error::DegenerateArm("a treatment value is absent".into()));
    }

    let xs_all: Vec<&[f64]> = rows.iter().map(|r| r.x.as_slice()).collect();
    let z_target: Vec<f64> = rows.iter().map(|r| f64::from(r.z)).collect();
    let a_target: Vec<f64> = rows.iter().map(|r| f64::from(r.a)).collect();

    let pi1 = fit_probability(&params, &xs_all, &z_target, derive_seed(seed, 1))?;
    let rho = fit_probability(&params, &xs_all, &a_target, derive_seed(seed, 2))?;

    let arm = |zv: u8| -> (Vec<&[f64]>, Vec<f64>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut a = Vec::new();
        let mut idx = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            if r.z == zv {
                xs.push(r.x.as_slice());
                a.push(f64::from(r.a));
                idx.push(i);
            }
        }
        (xs, a, idx)
    };
    let (xs0, a0, idx0) = arm(0);
    let (xs1, a1, idx1) = arm(1);
    let lam0 = fit_probability(&params, &xs0, &a0, derive_seed(seed, 3))?;
    let lam1 = fit_probability(&params, &xs1, &a1, derive_seed(seed, 4))?;

    let d = moment.d();
    // Regression target M(y, beta)(1-a) for one arm and coordinate.
    let mu_target = |idx: &[usize], beta: &[f64], coord: usize| -> Result<Vec<f64>> {
        let mut out = vec![0.0; d];
        let mut t = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = &rows[i];
            moment.regression_target_into(r.y, r.a, beta, &mut out)?;
            t.push(out[coord]);
        }
        Ok(t)
    };

    let effective = match strategy {
        MuStrategy::Auto => match moment.affine_decomposition() {
            Ok(dec) if dec.exists => MuStrategy::Auto, // affine below
            _ => MuStrategy::PerBeta,
        },
        other => other.clone(),
    };

    let mu = match &effective {
        MuStrategy::Auto => {
            let dec = moment.affine_decomposition()?;
            let zero = vec![0.0; d];
            let mut mu0_base = Vec::with_capacity(d);
            let mut mu1_base = Vec::with_capacity(d);
            for c in 0..d {
                let t0 = mu_target(&idx0, &zero, c)?;
                let t1 = mu_target(&idx1, &zero, c)?;
                mu0_base.push(fit_regression(&params, &xs0, &t0, derive_seed(seed, 10 + 2 * c as u64))?);
                mu1_base.push(fit_regression(&params, &xs1, &t1, derive_seed(seed, 11 + 2 * c as u64))?);
            }
            MuRepr::Affine {
                mu0_base,
                mu1_base,
                slope: dec.slope,
            }
        }
        MuStrategy::PerBeta => {
            if grid.is_empty() {
                return Err(Error::InvalidConfig(
                    "per-beta outcome regressions need a nonempty grid".into(),
                ));
            }
            let fits: Result<Vec<(Vec<FittedModel>, Vec<FittedModel>)>> = grid
                .par_iter()
                .enumerate()
                .map(|(gi, beta)| {
                    if beta.len() != d {
                        return Err(Error::InvalidConfig(format!(
                            "grid point {gi} has dimension {} but the moment has d={d}",
                            beta.len()
                        )));
                    }
                    let mut m0 = Vec::with_capacity(d);
                    let mut m1 = Vec::with_capacity(d);
                    for c in 0..d {
                        let t0 = mu_target(&idx0, beta, c)?;
                        let t1 = mu_target(&idx1, beta, c)?;
                        let s = 1000 + 2 * (gi * d + c) as u64;
                        m0.push(fit_regression(&params, &xs0, &t0, derive_seed(seed, s))?);
                        m1.push(fit_regression(&params, &xs1, &t1, derive_seed(seed, s + 1))?);
                    }
                    Ok((m0, m1))
                })
                .collect();
            let (mu0, mu1) = fits?.into_iter().unzip();
            MuRepr::PerBeta {
                grid: grid.to_vec(),
                mu0,
                mu1,
            }
        }
        MuStrategy::PooledCdf { t_grid } => {
            let MomentKind::Quantile { q } = *moment.kind() else {
                return Err(Error::InvalidConfig(
                    "pooled CDF strategy applies to quantile moments only".into(),
                ));
            };
            let ts = match t_grid {
                Some(ts) => ts.clone(),
                None => default_t_grid(grid)?,
            };
            let mut c0 = Vec::with_capacity(ts.len());
            let mut c1 = Vec::with_capacity(ts.len());
            for (ti, &t) in ts.iter().enumerate() {
                let target = |idx: &[usize]| -> Vec<f64> {
                    idx.iter()
                        .map(|&i| {
                            let r = &rows[i];
                            f64::from(r.y <= t) * f64::from(1 - r.a)
                        })
                        .collect()
                };
                let s = 5000 + 2 * ti as u64;
                c0.push(fit_probability(&params, &xs0, &target(&idx0), derive_seed(seed, s))?);
                c1.push(fit_probability(&params, &xs1, &target(&idx1), derive_seed(seed, s + 1))?);
            }
            MuRepr::PooledCdf {
                t_grid: ts,
                c0,
                c1,
                q,
            }
        }
        MuStrategy::SkipMu => MuRepr::None,
    };

    Ok(NuisanceBundle {
        repr: BundleRepr::Fitted {
            rho,
            pi1,
            lam0,
            lam1,
            mu,
        },
        moment: moment.clone(),
        clip,
    })
}

fn default_t_grid(grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut ts: Vec<f64> = grid.iter().map(|b| b[0]).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    ts.dedup();
    if ts.len() < 2 {
        return Err(Error::InvalidConfig(
            "pooled CDF strategy needs at least two distinct grid points".into(),
        ));
    }
    const MAX_T: usize = 33;
    if ts.len() > MAX_T {
        let n = ts.len();
        let picked: Vec<f64> = (0..MAX_T)
            .map(|i| ts[i * (n - 1) / (MAX_T - 1)])
            .collect();
        Ok(picked)
    } else {
        Ok(ts)
    }
}

/// How often the `|deltaA|` floor engaged over a dataset's covariates.
#[derive(Debug, Clone, Serialize)]
pub struct WeakIvReport {
    pub n: usize,
    pub floored_fraction: f64,
    pub min_abs_delta_a: f64,
    pub median_abs_delta_a: f64,
}

pub fn weak_iv_diagnostic(bundle: &NuisanceBundle, d: &Dataset) -> WeakIvReport {
    let mut abs: Vec<f64> = Vec::with_capacity(d.n());
    let mut floored = 0usize;
    for r in d.rows() {
        let p = bundle.probs_at(&r.x);
        abs.push(p.delta_a_raw.abs());
        floored += usize::from(p.floored);
    }
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite deltaA"));
    let n = abs.len();
    WeakIvReport {
        n,
        floored_fraction: floored as f64 / n as f64,
        min_abs_delta_a: abs.first().copied().unwrap_or(f64::NAN),
        median_abs_delta_a: if n == 0 { f64::NAN } else { abs[n / 2] },
    }
}
