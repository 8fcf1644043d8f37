//! Data-generating processes, ground-truth computation, and coverage
//! experiments.
//!
//! Three generator families:
//! - the continuous two-covariate DGP with a logistic instrument and an
//!   exponential treatment-assignment model (clamped at probability 1, with
//!   the clamp rate reported);
//! - finite discrete-oracle laws built from a multiplicative assignment
//!   mechanism `P(A=1|Z,U,X) = g1(Z,X) g2(U,X)`, which satisfy the
//!   identification assumptions exactly and support full enumeration;
//! - generalized latent-index generators (multiplicative, additive,
//!   monotone) used for contrast experiments.
//!
//! Everything is deterministic per seed: each replicate derives its own RNG
//! stream by counter, so results are independent of worker count.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{make_folds, Dataset, Observation};
use crate::error::{Error, Result};
use crate::inference::{set_from_sweep, sweep, Convention, GridSpec};
use crate::law::{DiscreteLaw, LawAtom};
use crate::moments::{MomentKind, MomentSpec};
use crate::numeric::{derive_seed, normal_cdf, pairwise_mean, seeded_rng};
use crate::nuisance::{ClipConfig, LearnerSpec, OracleFunctions};
use crate::eif::fit_fold_bundles;

/// Latent quantities carried next to each generated row, for oracle use only.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Latent {
    pub u: f64,
    pub y0: f64,
    pub y1: f64,
}

/// A generated sample plus its latents and the clamp count of the
/// treatment-assignment probability.
#[derive(Debug)]
pub struct GeneratedData {
    pub data: Dataset,
    pub latent: Vec<Latent>,
    pub clamp_count: usize,
}

/// Which data-generating process to draw from.
#[derive(Debug, Clone)]
pub enum DgpSpec {
    /// The continuous simulation DGP; see [`paper_continuous_row`].
    PaperContinuous,
    DiscreteOracle(DiscreteOracleSpec),
    /// `A^z = 1{g(z) * U >= eps_z}`, `eps_z ~ Unif[0,1]`, discrete `U`.
    GlimMultiplicative { g0: f64, g1: f64, u_support: Vec<f64> },
    /// `A^z = 1{g(z) + U >= eps_z}` (contrast stub).
    GlimAdditive { g0: f64, g1: f64, u_support: Vec<f64> },
    /// `A^z = 1{g(z) + U >= 1}` with `g1 >= g0` (contrast stub).
    GlimMonotone { g0: f64, g1: f64, u_support: Vec<f64> },
}

impl DgpSpec {
    pub fn glim_multiplicative(g0: f64, g1: f64) -> Self {
        DgpSpec::GlimMultiplicative {
            g0,
            g1,
            u_support: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// A finite multiplicative-IV law: `X` and `U` on finite supports,
/// `P(Z=1|X) = pi1(x)`, `P(A=1|Z,U,X) = g1(z,x) * g2(u,x)`, and
/// deterministic counterfactual outcomes `y0(x,u)`, `y1(x,u)`.
#[derive(Debug, Clone)]
pub struct DiscreteOracleSpec {
    /// (value, probability) of each x-atom
    pub x_atoms: Vec<(Vec<f64>, f64)>,
    /// (value, probability) of each u-atom; independent of X and Z
    pub u_atoms: Vec<(f64, f64)>,
    /// P(Z=1|X=x) per x-atom
    pub pi1: Vec<f64>,
    /// [g1(0,x), g1(1,x)] per x-atom
    pub g1: Vec<[f64; 2]>,
    /// g2(u,x) indexed [x][u]
    pub g2: Vec<Vec<f64>>,
    /// y0(x,u) indexed [x][u]
    pub y0: Vec<Vec<f64>>,
    /// y1(x,u) indexed [x][u]
    pub y1: Vec<Vec<f64>>,
}

impl DiscreteOracleSpec {
    /// Smallest law with a nondegenerate instrument and genuine confounding:
    /// trivial X, two-point U, g1 = (1, 0.5), g2 = (0.8, 0.4),
    /// y0 = 1 + u, y1 = 2 + u.
    pub fn default_law() -> Self {
        Self {
            x_atoms: vec![(vec![], 1.0)],
            u_atoms: vec![(0.0, 0.5), (1.0, 0.5)],
            pi1: vec![0.5],
            g1: vec![[1.0, 0.5]],
            g2: vec![vec![0.8, 0.4]],
            y0: vec![vec![1.0, 2.0]],
            y1: vec![vec![2.0, 3.0]],
        }
    }

    /// Variant with shifted assignment and outcome levels.
    pub fn variant_shifted() -> Self {
        Self {
            x_atoms: vec![(vec![], 1.0)],
            u_atoms: vec![(0.0, 0.5), (1.0, 0.5)],
            pi1: vec![0.6],
            g1: vec![[1.0, 0.7]],
            g2: vec![vec![0.9, 0.3]],
            y0: vec![vec![0.5, 2.5]],
            y1: vec![vec![2.0, 2.75]],
        }
    }

    /// Variant with a binary covariate modulating everything.
    pub fn variant_two_covariates() -> Self {
        Self {
            x_atoms: vec![(vec![0.0], 0.4), (vec![1.0], 0.6)],
            u_atoms: vec![(0.0, 0.5), (1.0, 0.5)],
            pi1: vec![0.35, 0.65],
            g1: vec![[1.0, 0.5], [1.0, 0.4]],
            g2: vec![vec![0.9, 0.5], vec![0.7, 0.35]],
            y0: vec![vec![1.0, 2.0], vec![0.0, 1.5]],
            y1: vec![vec![2.5, 3.0], vec![1.0, 2.0]],
        }
    }

    /// Variant with a three-point confounder.
    pub fn variant_three_u() -> Self {
        Self {
            x_atoms: vec![(vec![], 1.0)],
            u_atoms: vec![(0.0, 0.3), (1.0, 0.4), (2.0, 0.3)],
            pi1: vec![0.45],
            g1: vec![[1.0, 0.6]],
            g2: vec![vec![0.9, 0.6, 0.3]],
            y0: vec![vec![1.0, 1.5, 2.0]],
            y1: vec![vec![2.0, 2.25, 3.5]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.x_atoms.len();
        if nx == 0 || self.u_atoms.is_empty() {
            return Err(Error::InvalidConfig("law needs x- and u-atoms".into()));
        }
        let sum_x: f64 = self.x_atoms.iter().map(|(_, p)| p).sum();
        let sum_u: f64 = self.u_atoms.iter().map(|(_, p)| p).sum();
        if (sum_x - 1.0).abs() > 1e-9 || (sum_u - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "x and u probabilities must each sum to 1".into(),
            ));
        }
        if self.pi1.len() != nx
            || self.g1.len() != nx
            || self.g2.len() != nx
            || self.y0.len() != nx
            || self.y1.len() != nx
        {
            return Err(Error::InvalidConfig("per-x tables must align".into()));
        }
        for j in 0..nx {
            if !(self.pi1[j] > 0.0 && self.pi1[j] < 1.0) {
                return Err(Error::InvalidConfig(
                    "pi1 must be strictly interior".into(),
                ));
            }
            for z in 0..2 {
                for (ui, _) in self.u_atoms.iter().enumerate() {
                    let p = self.g1[j][z] * self.g2[j][ui];
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidConfig(format!(
                            "g1*g2 = {p} escapes [0,1] at x-atom {j}, z={z}, u-atom {ui}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `g1(1,x) = g1(0,x)` everywhere: the instrument moves nothing.
    pub fn is_weak_instrument(&self) -> bool {
        self.g1.iter().all(|g| g[0] == g[1])
    }

    /// Full joint atom table with the observed law derived by consistency.
    pub fn exact_law(&self) -> Result<DiscreteLaw> {
        self.validate()?;
        let mut atoms = Vec::new();
        for (j, (xv, px)) in self.x_atoms.iter().enumerate() {
            for (ui, (uv, pu)) in self.u_atoms.iter().enumerate() {
                for z in 0u8..2 {
                    let pz = if z == 1 { self.pi1[j] } else { 1.0 - self.pi1[j] };
                    let pa1 = self.g1[j][z as usize] * self.g2[j][ui];
                    for a in 0u8..2 {
                        let pa = if a == 1 { pa1 } else { 1.0 - pa1 };
                        let prob = px * pu * pz * pa;
                        if prob > 0.0 {
                            atoms.push(LawAtom {
                                x: xv.clone(),
                                u: *uv,
                                z,
                                a,
                                y0: self.y0[j][ui],
                                y1: self.y1[j][ui],
                                prob,
                            });
                        }
                    }
                }
            }
        }
        DiscreteLaw::new(atoms)
    }
}

/// Bridges a discrete-oracle spec to the enumeration layer.
pub fn exact_law(spec: &DgpSpec) -> Result<DiscreteLaw> {
    match spec {
        DgpSpec::DiscreteOracle(s) => s.exact_law(),
        _ => Err(Error::InvalidConfig(
            "exact_law is defined for discrete-oracle specs only".into(),
        )),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Standard normal draw by Box-Muller; consumes exactly two uniforms.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One row of the continuous DGP. Returns (obs, latent, clamped).
fn paper_continuous_row<R: Rng>(rng: &mut R) -> (Observation, Latent, bool) {
    let x1: f64 = rng.gen();
    let x2: f64 = rng.gen();
    let u: f64 = rng.gen();
    let pz = sigmoid(-1.0 + 0.5 * x1 + x2);
    let z = u8::from(rng.gen::<f64>() < pz);
    let exponent =
        (1.0 + x1 + x2 + 0.5 * x1 * x2) / 2.0 * f64::from(z) - x1 - 0.5 * x2 - u / 3.0;
    let pa_raw = exponent.exp();
    let clamped = pa_raw > 1.0;
    let pa = pa_raw.min(1.0);
    let a = u8::from(rng.gen::<f64>() < pa);
    let y1 = (x1 + x1 * x1 / 3.0 + x2 + x1 * x2 + f64::from(z)) * (u / 3.0).exp() + normal(rng);
    let y0 = (x1 + x2) * ((u + 0.5) / 5.0).exp() + normal(rng);
    let y = if a == 1 { y1 } else { y0 };
    (
        Observation {
            x: vec![x1, x2],
            z,
            a,
            y,
        },
        Latent { u, y0, y1 },
        clamped,
    )
}

fn glim_assignment_prob(spec: &DgpSpec, z: u8, u: f64) -> Result<f64> {
    match spec {
        DgpSpec::GlimMultiplicative { g0, g1, .. } => {
            let g = if z == 1 { *g1 } else { *g0 };
            let p = g * u;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidGlim(format!("g(z)*u = {p} escapes [0,1]")));
            }
            Ok(p)
        }
        DgpSpec::GlimAdditive { g0, g1, .. } => {
            let g = if z == 1 { *g1 } else { *g0 };
            let p = g + u;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidGlim(format!("g(z)+u = {p} escapes [0,1]")));
            }
            Ok(p)
        }
        DgpSpec::GlimMonotone { g0, g1, .. } => {
            if g1 < g0 {
                return Err(Error::InvalidGlim("monotone GLIM needs g1 >= g0".into()));
            }
            let g = if z == 1 { *g1 } else { *g0 };
            Ok(f64::from(g + u >= 1.0))
        }
        _ => unreachable!("not a GLIM spec"),
    }
}

/// Draws `n` observations from the DGP. Deterministic per seed and
/// independent of worker count.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<GeneratedData> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded_rng(seed);
    match spec {
        DgpSpec::PaperContinuous => {
            let mut rows = Vec::with_capacity(n);
            let mut latent = Vec::with_capacity(n);
            let mut clamp_count = 0;
            for _ in 0..n {
                let (o, l, c) = paper_continuous_row(&mut rng);
                rows.push(o);
                latent.push(l);
                clamp_count += usize::from(c);
            }
            Ok(GeneratedData {
                data: Dataset::from_rows(rows)?,
                latent,
                clamp_count,
            })
        }
        DgpSpec::DiscreteOracle(s) => {
            let law = s.exact_law()?;
            let (data, lat) = law.sample(n, &mut rng);
            Ok(GeneratedData {
                data,
                latent: lat
                    .into_iter()
                    .map(|(u, y0, y1)| Latent { u, y0, y1 })
                    .collect(),
                clamp_count: 0,
            })
        }
        DgpSpec::GlimMultiplicative { u_support, .. }
        | DgpSpec::GlimAdditive { u_support, .. }
        | DgpSpec::GlimMonotone { u_support, .. } => {
            if u_support.is_empty() {
                return Err(Error::InvalidGlim("empty u support".into()));
            }
            // Validate up front over the whole support.
            for &u in u_support {
                glim_assignment_prob(spec, 0, u)?;
                glim_assignment_prob(spec, 1, u)?;
            }
            let mut rows = Vec::with_capacity(n);
            let mut latent = Vec::with_capacity(n);
            for _ in 0..n {
                let u = u_support[rng.gen_range(0..u_support.len())];
                let z = u8::from(rng.gen::<f64>() < 0.5);
                let pa = glim_assignment_prob(spec, z, u)?;
                let a = u8::from(rng.gen::<f64>() < pa);
                let y0 = 1.0 + u + normal(&mut rng);
                let y1 = 2.0 + u + normal(&mut rng);
                rows.push(Observation {
                    x: vec![],
                    z,
                    a,
                    y: if a == 1 { y1 } else { y0 },
                });
                latent.push(Latent { u, y0, y1 });
            }
            Ok(GeneratedData {
                data: Dataset::from_rows(rows)?,
                latent,
                clamp_count: 0,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Exact nuisances for the continuous DGP
// ---------------------------------------------------------------------------

fn paper_base_exponent(z: u8, x: &[f64]) -> f64 {
    (1.0 + x[0] + x[1] + 0.5 * x[0] * x[1]) / 2.0 * f64::from(z) - x[0] - 0.5 * x[1]
}

/// True `P(A=1 | Z=z, X=x)` for the clamped assignment model, integrating
/// `min(1, e^{c - u/3})` over `U ~ Unif[0,1]`.
pub fn paper_lambda(z: u8, x: &[f64]) -> f64 {
    let c = paper_base_exponent(z, x);
    let u0 = (3.0 * c).clamp(0.0, 1.0);
    u0 + 3.0 * c.exp() * ((-u0 / 3.0).exp() - (-1.0f64 / 3.0).exp())
}

/// True `P(Z=1 | X=x)`.
pub fn paper_pi1(x: &[f64]) -> f64 {
    sigmoid(-1.0 + 0.5 * x[0] + x[1])
}

/// True `P(A=1 | X=x)`.
pub fn paper_rho(x: &[f64]) -> f64 {
    let p = paper_pi1(x);
    p * paper_lambda(1, x) + (1.0 - p) * paper_lambda(0, x)
}

fn paper_y0_mean(x: &[f64], u: f64) -> f64 {
    (x[0] + x[1]) * ((u + 0.5) / 5.0).exp()
}

/// Gauss-Legendre nodes/weights on [0, 1].
fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on Legendre polynomials over [-1, 1], then affine map.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(t) and P'_n(t)
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let step = p1 / dp;
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes[i] = t;
        weights[i] = w;
        nodes[n - 1 - i] = -t;
        weights[n - 1 - i] = w;
    }
    // map [-1,1] -> [0,1]
    for i in 0..n {
        nodes[i] = 0.5 * (nodes[i] + 1.0);
        weights[i] *= 0.5;
    }
    (nodes, weights)
}

/// Exact nuisance functions for the continuous DGP: closed-form
/// probabilities and quadrature outcome regressions. Built-in moment
/// families only.
pub fn paper_oracle_functions(moment: &MomentSpec) -> Result<Arc<OracleFunctions>> {
    let kind = moment.kind().clone();
    match kind {
        MomentKind::Custom { .. } => Err(Error::InvalidConfig(
            "continuous-DGP oracle supports built-in moments only".into(),
        )),
        _ => {
            let (nodes, weights) = gauss_legendre_unit(64);
            let mu = Arc::new(move |z: u8, beta: &[f64], x: &[f64], out: &mut [f64]| {
                let c = paper_base_exponent(z, x);
                let mut acc = 0.0;
                for (&u, &w) in nodes.iter().zip(&weights) {
                    let p_a = (c - u / 3.0).exp().min(1.0);
                    let m0 = paper_y0_mean(x, u);
                    let m_val = match kind {
                        MomentKind::Mean => m0 - beta[0],
                        MomentKind::Quantile { q } => 1.0 - normal_cdf(beta[0] - m0) - q,
                        MomentKind::CdfAt { y0 } => normal_cdf(y0 - m0) - beta[0],
                        MomentKind::Custom { .. } => unreachable!(),
                    };
                    acc += w * (1.0 - p_a) * m_val;
                }
                out[0] = acc;
            });
            Ok(Arc::new(OracleFunctions {
                rho: Arc::new(|x| paper_rho(x)),
                pi1: Arc::new(|x| paper_pi1(x)),
                lam0: Arc::new(|x| paper_lambda(0, x)),
                lam1: Arc::new(|x| paper_lambda(1, x)),
                mu,
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// The functional of `P(Y0 | A=1)` being targeted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TargetFunctional {
    Mean,
    Quantile(f64),
    CdfAt(f64),
}

impl TargetFunctional {
    pub fn from_moment(m: &MomentSpec) -> Result<Self> {
        match m.kind() {
            MomentKind::Mean => Ok(TargetFunctional::Mean),
            MomentKind::Quantile { q } => Ok(TargetFunctional::Quantile(*q)),
            MomentKind::CdfAt { y0 } => Ok(TargetFunctional::CdfAt(*y0)),
            MomentKind::Custom { .. } => Err(Error::InvalidConfig(
                "no oracle truth for custom moments".into(),
            )),
        }
    }

    pub fn moment(&self) -> MomentSpec {
        match self {
            TargetFunctional::Mean => MomentSpec::mean(),
            TargetFunctional::Quantile(q) => MomentSpec::quantile(*q).expect("validated q"),
            TargetFunctional::CdfAt(y0) => MomentSpec::cdf_at(*y0),
        }
    }
}

/// Oracle value of the target functional, exact for discrete laws and
/// Monte Carlo (with a batched standard error) otherwise.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleTruth {
    pub beta_star: f64,
    pub mc_se: f64,
    pub mc_n: usize,
}

pub fn oracle_truth(
    spec: &DgpSpec,
    functional: &TargetFunctional,
    mc_n: usize,
    seed: u64,
) -> Result<OracleTruth> {
    if let DgpSpec::DiscreteOracle(s) = spec {
        let law = s.exact_law()?;
        let beta_star = match functional {
            TargetFunctional::Mean => law.counterfactual_mean_treated()?,
            TargetFunctional::Quantile(q) => law.counterfactual_quantile_treated(*q)?,
            TargetFunctional::CdfAt(y0) => law.counterfactual_cdf_treated(*y0)?,
        };
        return Ok(OracleTruth {
            beta_star,
            mc_se: 0.0,
            mc_n: 0,
        });
    }

    // Monte Carlo over (A, Y0) draws, batched for a standard error.
    const BATCHES: usize = 20;
    let mut rng = seeded_rng(seed);
    let mut treated_y0: Vec<f64> = Vec::new();
    let mut batch_of: Vec<usize> = Vec::new();
    for i in 0..mc_n {
        let (a, y0) = match spec {
            DgpSpec::PaperContinuous => {
                let (o, l, _) = paper_continuous_row(&mut rng);
                (o.a, l.y0)
            }
            _ => {
                let g = generate(spec, 1, derive_seed(seed, i as u64))?;
                (g.data.row(0).a, g.latent[0].y0)
            }
        };
        if a == 1 {
            treated_y0.push(y0);
            batch_of.push(i * BATCHES / mc_n);
        }
    }
    if treated_y0.is_empty() {
        return Err(Error::NoTreatedUnits);
    }
    let estimate = |vals: &[f64]| -> f64 {
        match functional {
            TargetFunctional::Mean => pairwise_mean(vals),
            TargetFunctional::Quantile(q) => {
                crate::numeric::empirical_quantile(vals, *q).expect("nonempty")
            }
            TargetFunctional::CdfAt(y0) => {
                vals.iter().filter(|&&v| v <= *y0).count() as f64 / vals.len() as f64
            }
        }
    };
    let beta_star = estimate(&treated_y0);
    let mut batch_estimates = Vec::with_capacity(BATCHES);
    for b in 0..BATCHES {
        let vals: Vec<f64> = treated_y0
            .iter()
            .zip(&batch_of)
            .filter(|(_, &bo)| bo == b)
            .map(|(&v, _)| v)
            .collect();
        if !vals.is_empty() {
            batch_estimates.push(estimate(&vals));
        }
    }
    let bm = pairwise_mean(&batch_estimates);
    let bvar = batch_estimates
        .iter()
        .map(|v| (v - bm) * (v - bm))
        .sum::<f64>()
        / (batch_estimates.len().max(2) - 1) as f64;
    Ok(OracleTruth {
        beta_star,
        mc_se: (bvar / batch_estimates.len() as f64).sqrt(),
        mc_n,
    })
}

// ---------------------------------------------------------------------------
// Coverage experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub dgp: DgpSpec,
    pub functional: TargetFunctional,
    /// oracle truth the intervals must cover
    pub beta_star: f64,
    pub ns: Vec<usize>,
    pub alphas: Vec<f64>,
    pub reps: usize,
    pub k_folds: usize,
    pub learner: LearnerSpec,
    pub grid: GridSpec,
    pub clip: ClipConfig,
    pub convention: Convention,
    pub seed: u64,
}

/// One (n, alpha) coverage summary.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageCell {
    pub n: usize,
    pub alpha: f64,
    pub reps: usize,
    pub covered: usize,
    /// replicates whose accepted set was empty (counted as non-coverage)
    pub empties: usize,
    /// replicates that failed outright (degenerate fits; non-coverage)
    pub failures: usize,
    pub coverage: f64,
    pub mc_se: f64,
    pub mean_width: f64,
}

/// Coverage across (n, alpha) cells. The wall-clock runtime is kept out of
/// the serialized form so that reports are byte-identical across runs and
/// worker counts.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub beta_star: f64,
    pub cells: Vec<CoverageCell>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Runs the replicated coverage experiment: per replicate, draw data, fit
/// per-fold nuisances once, sweep the grid, and threshold at every level.
/// Replicates run in parallel with counter-derived seeds.
pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<CoverageReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidConfig("reps must be >= 1".into()));
    }
    if cfg.k_folds < 2 {
        return Err(Error::InvalidFoldCount {
            n: usize::MAX,
            k: cfg.k_folds,
        });
    }
    let started = Instant::now();
    let betas = cfg.grid.betas()?;
    let grid_vecs: Vec<Vec<f64>> = betas.iter().map(|&b| vec![b]).collect();
    let moment = cfg.functional.moment();

    let mut cells = Vec::new();
    for &n in &cfg.ns {
        let n_seed = derive_seed(cfg.seed, n as u64);
        // Per replicate: per-alpha (covered, width) or None when the set is
        // empty; Err(()) records an outright failure.
        type RepOutcome = std::result::Result<Vec<Option<(bool, f64)>>, ()>;
        let outcomes: Vec<RepOutcome> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = derive_seed(n_seed, rep as u64);
                let run = || -> Result<Vec<Option<(bool, f64)>>> {
                    let gen = generate(&cfg.dgp, n, rep_seed)?;
                    let plan = make_folds(n, cfg.k_folds, derive_seed(rep_seed, 1))?;
                    let bundles = fit_fold_bundles(
                        &gen.data,
                        &plan,
                        &cfg.learner,
                        &moment,
                        &grid_vecs,
                        cfg.clip,
                    )?;
                    let sw = sweep(&gen.data, &plan, &bundles, &betas)?;
                    Ok(cfg
                        .alphas
                        .iter()
                        .map(|&alpha| {
                            let set = set_from_sweep(&sw, alpha, cfg.convention, n);
                            set.hull().map(|(lo, hi)| {
                                (lo <= cfg.beta_star && cfg.beta_star <= hi, hi - lo)
                            })
                        })
                        .collect())
                };
                run().map_err(|_| ())
            })
            .collect();

        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            let mut covered = 0usize;
            let mut empties = 0usize;
            let mut failures = 0usize;
            let mut widths = Vec::new();
            for oc in &outcomes {
                match oc {
                    Err(()) => failures += 1,
                    Ok(per_alpha) => match per_alpha[ai] {
                        None => empties += 1,
                        Some((cov, width)) => {
                            covered += usize::from(cov);
                            widths.push(width);
                        }
                    },
                }
            }
            let coverage = covered as f64 / cfg.reps as f64;
            cells.push(CoverageCell {
                n,
                alpha,
                reps: cfg.reps,
                covered,
                empties,
                failures,
                coverage,
                mc_se: (coverage * (1.0 - coverage) / cfg.reps as f64).sqrt(),
                mean_width: if widths.is_empty() {
                    f64::NAN
                } else {
                    pairwise_mean(&widths)
                },
            });
        }
    }
    Ok(CoverageReport {
        beta_star: cfg.beta_star,
        cells,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn paper_logistic_instrument_probability() {
        // P(Z=1 | X=(0,0)) = exp(-1)/(1+exp(-1))
        assert_relative_eq!(
            paper_pi1(&[0.0, 0.0]),
            (-1.0f64).exp() / (1.0 + (-1.0f64).exp()),
            epsilon = 1e-12
        );
        assert_relative_eq!(paper_pi1(&[0.0, 0.0]), 0.2689414213699951, epsilon = 1e-12);
    }

    #[test]
    fn z0_arm_never_clamps() {
        // exponent at z=0 is -x1 - x2/2 - u/3 <= 0 on the support
        let mut rng = seeded_rng(3);
        for _ in 0..2000 {
            let x1: f64 = rng.gen();
            let x2: f64 = rng.gen();
            let u: f64 = rng.gen();
            let e = -x1 - 0.5 * x2 - u / 3.0;
            assert!(e.exp() <= 1.0);
        }
    }

    #[test]
    fn generation_deterministic_per_seed() {
        let a = generate(&DgpSpec::PaperContinuous, 50, 9).unwrap();
        let b = generate(&DgpSpec::PaperContinuous, 50, 9).unwrap();
        let c = generate(&DgpSpec::PaperContinuous, 50, 10).unwrap();
        assert_eq!(a.data.rows(), b.data.rows());
        assert_ne!(a.data.rows(), c.data.rows());
        assert_eq!(a.clamp_count, b.clamp_count);
    }

    #[test]
    fn paper_lambda_matches_monte_carlo() {
        // lam_z(x) from the closed form vs a direct Monte Carlo; the first
        // point has a fully clamped z=1 arm (lam1 = 1), the second doesn't.
        for x in [[0.3, 0.7], [0.9, 0.9]] {
            let mut rng = seeded_rng(4);
            let m = 400_000;
            let mut hits = [0usize; 2];
            for _ in 0..m {
                let u: f64 = rng.gen();
                for z in 0..2u8 {
                    let p = (paper_base_exponent(z, &x) - u / 3.0).exp().min(1.0);
                    if rng.gen::<f64>() < p {
                        hits[z as usize] += 1;
                    }
                }
            }
            for z in 0..2u8 {
                let emp = hits[z as usize] as f64 / m as f64;
                let truth = paper_lambda(z, &x);
                let tol = (4.0 * (truth * (1.0 - truth) / m as f64).sqrt()).max(1e-9);
                assert!(
                    (emp - truth).abs() <= tol,
                    "z={z}, x={x:?}: emp={emp}, truth={truth}"
                );
            }
        }
        assert_relative_eq!(paper_lambda(1, &[0.3, 0.7]), 1.0, epsilon = 1e-12);
        assert!(paper_lambda(1, &[0.9, 0.9]) < 1.0);
    }

    #[test]
    fn quadrature_mu_matches_monte_carlo() {
        let moment = MomentSpec::quantile(0.5).unwrap();
        let oracle = paper_oracle_functions(&moment).unwrap();
        let x = [0.4, 0.6];
        let beta = [1.2];
        let mut out = [0.0];
        (oracle.mu)(1, &beta, &x, &mut out);
        // Monte Carlo of E[(1{Y0 >= beta} - q)(1-A) | Z=1, X=x]
        let mut rng = seeded_rng(5);
        let m = 400_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let u: f64 = rng.gen();
            let p = (paper_base_exponent(1, &x) - u / 3.0).exp().min(1.0);
            let a = rng.gen::<f64>() < p;
            let y0 = paper_y0_mean(&x, u) + normal(&mut rng);
            if !a {
                acc += f64::from(y0 >= beta[0]) - 0.5;
            }
        }
        let emp = acc / m as f64;
        assert!(
            (emp - out[0]).abs() < 0.005,
            "quadrature {} vs MC {emp}",
            out[0]
        );
    }

    #[test]
    fn default_discrete_law_is_valid_and_confounded() {
        let spec = DiscreteOracleSpec::default_law();
        let law = spec.exact_law().unwrap();
        // P(A=1) = mean_z g1(z) * mean_u g2(u) = 0.75 * 0.6
        assert_relative_eq!(law.treated_prob(), 0.45, epsilon = 1e-12);
        // E[Y0 | A=1] = 4/3 by direct enumeration
        assert_relative_eq!(
            law.counterfactual_mean_treated().unwrap(),
            4.0 / 3.0,
            epsilon = 1e-12
        );
        // ATT = 1 exactly (y1 - y0 = 1 for every atom)
        assert_relative_eq!(law.att_truth().unwrap(), 1.0, epsilon = 1e-12);
        assert!(!spec.is_weak_instrument());
    }

    #[test]
    fn lambda_ratio_is_g1_ratio_for_any_g2() {
        // The multiplicative structure makes lam1/lam0 = g1(1)/g1(0)
        // regardless of g2.
        for g2 in [vec![0.8, 0.4], vec![0.5, 0.25]] {
            let mut spec = DiscreteOracleSpec::default_law();
            spec.g2 = vec![g2];
            let law = spec.exact_law().unwrap();
            let ratio = law.lam_x(0, 1).unwrap() / law.lam_x(0, 0).unwrap();
            assert_relative_eq!(ratio, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn weak_instrument_flagged() {
        let mut spec = DiscreteOracleSpec::default_law();
        spec.g1 = vec![[1.0, 1.0]];
        assert!(spec.is_weak_instrument());
        let law = spec.exact_law().unwrap();
        assert!(matches!(
            law.h_of_beta_exact(&MomentSpec::mean(), &[0.0]).unwrap_err(),
            Error::ZeroDeltaA(_)
        ));
    }

    #[test]
    fn glim_multiplicative_ratio_by_stratum() {
        // g(0)=0.5, g(1)=1.0: empirical P(A=1|Z=1,u)/P(A=1|Z=0,u) -> 2
        // for every u-stratum.
        let spec = DgpSpec::glim_multiplicative(0.5, 1.0);
        let g = generate(&spec, 1_000_000, 13).unwrap();
        let mut counts: std::collections::BTreeMap<u64, [[usize; 2]; 2]> = Default::default();
        for (row, lat) in g.data.rows().iter().zip(&g.latent) {
            let key = (lat.u * 1000.0).round() as u64;
            let cell = counts.entry(key).or_default();
            cell[row.z as usize][0] += 1;
            cell[row.z as usize][1] += usize::from(row.a == 1);
        }
        for (key, cell) in counts {
            let p0 = cell[0][1] as f64 / cell[0][0] as f64;
            let p1 = cell[1][1] as f64 / cell[1][0] as f64;
            let u = key as f64 / 1000.0;
            let se = 3.0
                * ((p1 * (1.0 - p1) / cell[1][0] as f64) + (p0 * (1.0 - p0) / cell[0][0] as f64))
                    .sqrt();
            assert!(
                (p1 / p0 - 2.0).abs() < 3.0 * se / p0 + 0.02,
                "u={u}: ratio {} not near 2",
                p1 / p0
            );
            // and the level matches g(z)*u
            assert!((p0 - 0.5 * u).abs() < 0.01, "u={u}: p0={p0}");
        }
    }

    #[test]
    fn glim_validity_enforced() {
        let bad = DgpSpec::GlimMultiplicative {
            g0: 0.5,
            g1: 1.5,
            u_support: vec![1.0],
        };
        assert!(matches!(
            generate(&bad, 10, 0).unwrap_err(),
            Error::InvalidGlim(_)
        ));
        let bad_mono = DgpSpec::GlimMonotone {
            g0: 0.9,
            g1: 0.2,
            u_support: vec![0.5],
        };
        assert!(matches!(
            generate(&bad_mono, 10, 0).unwrap_err(),
            Error::InvalidGlim(_)
        ));
    }

    #[test]
    fn discrete_oracle_truths_are_exact() {
        let spec = DgpSpec::DiscreteOracle(DiscreteOracleSpec::default_law());
        let t = oracle_truth(&spec, &TargetFunctional::Mean, 0, 0).unwrap();
        assert_relative_eq!(t.beta_star, 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(t.mc_se, 0.0);
        // Y0 | A=1 puts mass 2/3 on 1.0: the median is 1
        let t = oracle_truth(&spec, &TargetFunctional::Quantile(0.5), 0, 0).unwrap();
        assert_relative_eq!(t.beta_star, 1.0);
        let t = oracle_truth(&spec, &TargetFunctional::CdfAt(1.5), 0, 0).unwrap();
        assert_relative_eq!(t.beta_star, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn continuous_truth_batched_se() {
        let t = oracle_truth(
            &DgpSpec::PaperContinuous,
            &TargetFunctional::Quantile(0.5),
            100_000,
            7,
        )
        .unwrap();
        assert!(t.mc_se > 0.0 && t.mc_se < 0.05);
        assert!(t.beta_star > 0.5 && t.beta_star < 2.0, "median {}", t.beta_star);
    }

    #[test]
    fn single_replicate_report_shape() {
        let spec = DgpSpec::DiscreteOracle(DiscreteOracleSpec::default_law());
        let law = DiscreteOracleSpec::default_law().exact_law().unwrap();
        let oracle = {
            let arc = std::sync::Arc::new(law);
            arc.oracle_functions(&MomentSpec::mean())
        };
        let cfg = CoverageConfig {
            dgp: spec,
            functional: TargetFunctional::Mean,
            beta_star: 4.0 / 3.0,
            ns: vec![120],
            alphas: vec![0.1],
            reps: 1,
            k_folds: 2,
            learner: LearnerSpec::Oracle(oracle),
            grid: GridSpec::Range {
                lo: 0.0,
                hi: 3.0,
                step: 0.1,
            },
            clip: ClipConfig::default(),
            convention: Convention::ChiSq,
            seed: 5,
        };
        let rep = coverage_experiment(&cfg).unwrap();
        assert_eq!(rep.cells.len(), 1);
        let cell = &rep.cells[0];
        assert_eq!(cell.reps, 1);
        assert!(cell.covered == 0 || cell.covered == 1);
    }
}
