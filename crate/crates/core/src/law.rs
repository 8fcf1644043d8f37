//! Finite discrete laws over `(x, u, z, a, y0, y1)` with exact enumeration
//! of everything the estimator targets: the identified moment value, the
//! counterfactual moment among the treated, the influence function's mean,
//! the second-order remainder in both its definitional and product forms,
//! and the multiple-robustness configurations.
//!
//! These laws are the test oracles. A law built from a multiplicative
//! treatment-assignment mechanism satisfies the identification assumptions
//! by construction, so identities that the theory promises must hold here to
//! machine precision.

use std::sync::Arc;

use rand::Rng;

use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::moments::MomentSpec;
use crate::nuisance::OracleFunctions;
use crate::numeric::pairwise_sum;

const DELTA_A_TINY: f64 = 1e-12;

/// One support point of the joint law. The observed outcome is
/// `y = a*y1 + (1-a)*y0` (consistency).
#[derive(Debug, Clone)]
pub struct LawAtom {
    pub x: Vec<f64>,
    pub u: f64,
    pub z: u8,
    pub a: u8,
    pub y0: f64,
    pub y1: f64,
    pub prob: f64,
}

impl LawAtom {
    pub fn y(&self) -> f64 {
        if self.a == 1 {
            self.y1
        } else {
            self.y0
        }
    }
}

/// A validated finite law with its x-marginal grouping precomputed.
#[derive(Debug, Clone)]
pub struct DiscreteLaw {
    atoms: Vec<LawAtom>,
    x_vals: Vec<Vec<f64>>,
    x_of: Vec<usize>,
    px: Vec<f64>,
}

impl DiscreteLaw {
    pub fn new(atoms: Vec<LawAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::DegenerateLaw("no atoms".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateLaw(format!(
                "atom probabilities sum to {total}, not 1"
            )));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.prob < 0.0 {
                return Err(Error::DegenerateLaw(format!("atom {i} has negative probability")));
            }
            if a.z > 1 || a.a > 1 {
                return Err(Error::DegenerateLaw(format!("atom {i} has non-binary z or a")));
            }
        }
        let mut x_vals: Vec<Vec<f64>> = Vec::new();
        let mut x_of = Vec::with_capacity(atoms.len());
        for a in &atoms {
            let idx = match x_vals.iter().position(|v| v == &a.x) {
                Some(i) => i,
                None => {
                    x_vals.push(a.x.clone());
                    x_vals.len() - 1
                }
            };
            x_of.push(idx);
        }
        let mut px = vec![0.0; x_vals.len()];
        for (a, &j) in atoms.iter().zip(&x_of) {
            px[j] += a.prob;
        }
        Ok(Self {
            atoms,
            x_vals,
            x_of,
            px,
        })
    }

    pub fn atoms(&self) -> &[LawAtom] {
        &self.atoms
    }

    pub fn n_x(&self) -> usize {
        self.x_vals.len()
    }

    pub fn x_val(&self, j: usize) -> &[f64] {
        &self.x_vals[j]
    }

    pub fn p_x(&self, j: usize) -> f64 {
        self.px[j]
    }

    pub fn treated_prob(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.a == 1)
            .map(|a| a.prob)
            .sum()
    }

    fn x_index(&self, x: &[f64]) -> Option<usize> {
        self.x_vals
            .iter()
            .position(|v| v.as_slice() == x)
            .or_else(|| {
                self.x_vals.iter().position(|v| {
                    v.iter()
                        .zip(x)
                        .all(|(&a, &b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0))
                })
            })
    }

    // -- exact conditional nuisances per x-atom ---------------------------

    pub fn pi1_x(&self, j: usize) -> f64 {
        let num: f64 = self
            .atoms
            .iter()
            .zip(&self.x_of)
            .filter(|(a, &xj)| xj == j && a.z == 1)
            .map(|(a, _)| a.prob)
            .sum();
        num / self.px[j]
    }

    pub fn rho_x(&self, j: usize) -> f64 {
        let num: f64 = self
            .atoms
            .iter()
            .zip(&self.x_of)
            .filter(|(a, &xj)| xj == j && a.a == 1)
            .map(|(a, _)| a.prob)
            .sum();
        num / self.px[j]
    }

    /// `P(A=1 | Z=z, X=x_j)`; errors if the arm has zero probability.
    pub fn lam_x(&self, j: usize, z: u8) -> Result<f64> {
        let mut arm = 0.0;
        let mut hit = 0.0;
        for (a, &xj) in self.atoms.iter().zip(&self.x_of) {
            if xj == j && a.z == z {
                arm += a.prob;
                if a.a == 1 {
                    hit += a.prob;
                }
            }
        }
        if arm <= 0.0 {
            return Err(Error::DegenerateLaw(format!(
                "instrument arm z={z} has zero probability at x-atom {j}"
            )));
        }
        Ok(hit / arm)
    }

    /// `E[M(Y, beta)(1-A) | Z=z, X=x_j]`.
    pub fn mu_x(&self, j: usize, z: u8, moment: &MomentSpec, beta: &[f64]) -> Result<Vec<f64>> {
        let d = moment.d();
        let mut arm = 0.0;
        let mut acc = vec![0.0; d];
        let mut m = vec![0.0; d];
        for (a, &xj) in self.atoms.iter().zip(&self.x_of) {
            if xj == j && a.z == z {
                arm += a.prob;
                if a.a == 0 {
                    moment.evaluate_into(a.y(), beta, &mut m)?;
                    for c in 0..d {
                        acc[c] += a.prob * m[c];
                    }
                }
            }
        }
        if arm <= 0.0 {
            return Err(Error::DegenerateLaw(format!(
                "instrument arm z={z} has zero probability at x-atom {j}"
            )));
        }
        for c in 0..d {
            acc[c] /= arm;
        }
        Ok(acc)
    }

    /// All six true nuisances tabulated per x-atom.
    pub fn true_nuisances(&self, moment: &MomentSpec, beta: &[f64]) -> Result<XNuisances> {
        let nx = self.n_x();
        let mut nu = XNuisances::zeros(nx, moment.d());
        for j in 0..nx {
            nu.rho[j] = self.rho_x(j);
            nu.pi1[j] = self.pi1_x(j);
            nu.lam0[j] = self.lam_x(j, 0)?;
            nu.lam1[j] = self.lam_x(j, 1)?;
            nu.mu0[j] = self.mu_x(j, 0, moment, beta)?;
            nu.mu1[j] = self.mu_x(j, 1, moment, beta)?;
        }
        Ok(nu)
    }

    /// Exact identified moment value
    /// `h(beta, P) = E[ (mu1 - mu0)/deltaA * rho ]` by enumeration over the
    /// x-atoms. Errors when some x-atom has `deltaA = 0` or a missing arm.
    pub fn h_of_beta_exact(&self, moment: &MomentSpec, beta: &[f64]) -> Result<Vec<f64>> {
        let d = moment.d();
        let mut acc = vec![0.0; d];
        for j in 0..self.n_x() {
            let lam0 = self.lam_x(j, 0)?;
            let lam1 = self.lam_x(j, 1)?;
            let delta_a = lam1 - lam0;
            if delta_a.abs() < DELTA_A_TINY {
                return Err(Error::ZeroDeltaA(j));
            }
            let rho = self.rho_x(j);
            let mu0 = self.mu_x(j, 0, moment, beta)?;
            let mu1 = self.mu_x(j, 1, moment, beta)?;
            for c in 0..d {
                acc[c] += self.px[j] * (mu1[c] - mu0[c]) / delta_a * rho;
            }
        }
        Ok(acc)
    }

    /// `E[M(Y0, beta) | A=1]` by counterfactual enumeration — the left side
    /// of the identification identity.
    pub fn counterfactual_moment_treated(
        &self,
        moment: &MomentSpec,
        beta: &[f64],
    ) -> Result<Vec<f64>> {
        let pa = self.treated_prob();
        if pa <= 0.0 {
            return Err(Error::NoTreatedUnits);
        }
        let d = moment.d();
        let mut acc = vec![0.0; d];
        let mut m = vec![0.0; d];
        for a in &self.atoms {
            if a.a == 1 {
                moment.evaluate_into(a.y0, beta, &mut m)?;
                for c in 0..d {
                    acc[c] += a.prob * m[c];
                }
            }
        }
        for c in 0..d {
            acc[c] /= pa;
        }
        Ok(acc)
    }

    /// Mean of `Y0` among the treated.
    pub fn counterfactual_mean_treated(&self) -> Result<f64> {
        self.moment_of_treated(|a| a.y0, |v| v)
    }

    /// `P(Y0 <= y | A=1)`.
    pub fn counterfactual_cdf_treated(&self, y: f64) -> Result<f64> {
        self.moment_of_treated(|a| a.y0, |v| f64::from(v <= y))
    }

    fn moment_of_treated(
        &self,
        value: impl Fn(&LawAtom) -> f64,
        transform: impl Fn(f64) -> f64,
    ) -> Result<f64> {
        let pa = self.treated_prob();
        if pa <= 0.0 {
            return Err(Error::NoTreatedUnits);
        }
        let acc: f64 = self
            .atoms
            .iter()
            .filter(|a| a.a == 1)
            .map(|a| a.prob * transform(value(a)))
            .sum();
        Ok(acc / pa)
    }

    /// inf-type q-quantile of `Y0` among the treated.
    pub fn counterfactual_quantile_treated(&self, q: f64) -> Result<f64> {
        self.quantile_treated(q, |a| a.y0)
    }

    /// inf-type q-quantile of `Y1` among the treated (equals the observed
    /// treated quantile by consistency).
    pub fn treated_quantile_y1(&self, q: f64) -> Result<f64> {
        self.quantile_treated(q, |a| a.y1)
    }

    fn quantile_treated(&self, q: f64, value: impl Fn(&LawAtom) -> f64) -> Result<f64> {
        let pa = self.treated_prob();
        if pa <= 0.0 {
            return Err(Error::NoTreatedUnits);
        }
        let mut pts: Vec<(f64, f64)> = self
            .atoms
            .iter()
            .filter(|a| a.a == 1)
            .map(|a| (value(a), a.prob / pa))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite outcomes"));
        let mut cum = 0.0;
        for (v, p) in &pts {
            cum += p;
            if cum + 1e-12 >= q {
                return Ok(*v);
            }
        }
        Ok(pts.last().expect("nonempty treated support").0)
    }

    /// True ATT `E[Y1 - Y0 | A=1]`.
    pub fn att_truth(&self) -> Result<f64> {
        self.moment_of_treated(|a| a.y1 - a.y0, |v| v)
    }

    // -- EIF enumeration ---------------------------------------------------

    /// `E_P[psi_eta(O)]` for an arbitrary nuisance tabulation `eta`.
    pub fn expected_uncentered_eif(
        &self,
        nu: &XNuisances,
        moment: &MomentSpec,
        beta: &[f64],
    ) -> Result<Vec<f64>> {
        let d = moment.d();
        let mut m = vec![0.0; d];
        let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(self.atoms.len()); d];
        for (atom, &j) in self.atoms.iter().zip(&self.x_of) {
            moment.regression_target_into(atom.y(), atom.a, beta, &mut m)?;
            let delta_a = nu.delta_a(j);
            if delta_a.abs() < DELTA_A_TINY {
                return Err(Error::ZeroDeltaA(j));
            }
            let a = f64::from(atom.a);
            let sign = f64::from(2 * i32::from(atom.z) - 1);
            let pi_z = if atom.z == 1 { nu.pi1[j] } else { 1.0 - nu.pi1[j] };
            let w = nu.rho[j] / delta_a * sign / pi_z;
            let lam_z = if atom.z == 1 { nu.lam1[j] } else { nu.lam0[j] };
            let mu_z = if atom.z == 1 { &nu.mu1[j] } else { &nu.mu0[j] };
            for c in 0..d {
                let delta = (nu.mu1[j][c] - nu.mu0[j][c]) / delta_a;
                let psi = delta * a + w * (m[c] - mu_z[c] - (a - lam_z) * delta);
                terms[c].push(atom.prob * psi);
            }
        }
        Ok(terms.iter().map(|t| pairwise_sum(t)).collect())
    }

    /// `h(beta, P_bar)` for nuisances tabulated on this law's x-marginal.
    pub fn h_bar(&self, nu: &XNuisances) -> Vec<f64> {
        let d = nu.d;
        let mut acc = vec![0.0; d];
        for j in 0..self.n_x() {
            let delta_a = nu.delta_a(j);
            for c in 0..d {
                acc[c] += self.px[j] * (nu.mu1[j][c] - nu.mu0[j][c]) / delta_a * nu.rho[j];
            }
        }
        acc
    }

    /// Mean of the centered influence function at the truth; zero by theory.
    pub fn eif_mean_at_truth(&self, moment: &MomentSpec, beta: &[f64]) -> Result<Vec<f64>> {
        let nu = self.true_nuisances(moment, beta)?;
        let h = self.h_of_beta_exact(moment, beta)?;
        let mut e = self.expected_uncentered_eif(&nu, moment, beta)?;
        for c in 0..e.len() {
            e[c] -= h[c];
        }
        Ok(e)
    }

    /// Exact population variance of the centered influence function at the
    /// true nuisances (d = 1 moments).
    pub fn eif_variance_at_truth(&self, moment: &MomentSpec, beta: &[f64]) -> Result<f64> {
        let nu = self.true_nuisances(moment, beta)?;
        let h = self.h_of_beta_exact(moment, beta)?[0];
        let mut m = vec![0.0; 1];
        let mut acc = 0.0;
        for (atom, &j) in self.atoms.iter().zip(&self.x_of) {
            moment.regression_target_into(atom.y(), atom.a, beta, &mut m)?;
            let delta_a = nu.delta_a(j);
            let a = f64::from(atom.a);
            let sign = f64::from(2 * i32::from(atom.z) - 1);
            let pi_z = if atom.z == 1 { nu.pi1[j] } else { 1.0 - nu.pi1[j] };
            let w = nu.rho[j] / delta_a * sign / pi_z;
            let lam_z = if atom.z == 1 { nu.lam1[j] } else { nu.lam0[j] };
            let mu_z = if atom.z == 1 { nu.mu1[j][0] } else { nu.mu0[j][0] };
            let delta = (nu.mu1[j][0] - nu.mu0[j][0]) / delta_a;
            let psi = delta * a + w * (m[0] - mu_z - (a - lam_z) * delta);
            acc += atom.prob * (psi - h) * (psi - h);
        }
        Ok(acc)
    }

    /// Second-order remainder `R(P_bar, P)` computed two ways:
    /// the definitional `h_bar - h + E_P[centered-at-h_bar EIF]`, and the
    /// displayed product-form expansion. The two must agree.
    pub fn remainder_exact(
        &self,
        nu_bar: &XNuisances,
        moment: &MomentSpec,
        beta: &[f64],
    ) -> Result<RemainderCheck> {
        let d = moment.d();
        let truth = self.true_nuisances(moment, beta)?;
        let h = self.h_of_beta_exact(moment, beta)?;
        let hb = self.h_bar(nu_bar);
        let e_psi = self.expected_uncentered_eif(nu_bar, moment, beta)?;
        // E_P[hdot(beta, O, P_bar)] = E_P[psi_bar] - h_bar
        let definitional: Vec<f64> = (0..d)
            .map(|c| hb[c] - h[c] + (e_psi[c] - hb[c]))
            .collect();

        let mut product = vec![0.0; d];
        for j in 0..self.n_x() {
            let da_bar = nu_bar.delta_a(j);
            if da_bar.abs() < DELTA_A_TINY {
                return Err(Error::ZeroDeltaA(j));
            }
            let da = truth.delta_a(j);
            let rho_bar = nu_bar.rho[j];
            let pi1_bar = nu_bar.pi1[j];
            for c in 0..d {
                let delta_bar = (nu_bar.mu1[j][c] - nu_bar.mu0[j][c]) / da_bar;
                let delta = (truth.mu1[j][c] - truth.mu0[j][c]) / da;
                let term1 = (delta_bar - delta)
                    * (rho_bar / da_bar * (da_bar - da) - (rho_bar - truth.rho[j]));
                let num1 = (nu_bar.mu1[j][c] - truth.mu1[j][c])
                    - delta_bar * (nu_bar.lam1[j] - truth.lam1[j]);
                let num0 = (nu_bar.mu0[j][c] - truth.mu0[j][c])
                    - delta_bar * (nu_bar.lam0[j] - truth.lam0[j]);
                let term2 = rho_bar / da_bar
                    * (pi1_bar - truth.pi1[j])
                    * (num1 / pi1_bar + num0 / (1.0 - pi1_bar));
                product[c] += self.px[j] * (term1 + term2);
            }
        }
        Ok(RemainderCheck {
            definitional,
            product_form: product,
        })
    }

    /// Bias of the uncentered-EIF mean under the three correct-specification
    /// configurations (perturbing everything else by `eps`), plus one
    /// violating configuration expected to be biased.
    pub fn robustness_suite(
        &self,
        moment: &MomentSpec,
        beta: &[f64],
        eps: f64,
    ) -> Result<RobustnessReport> {
        let truth = self.true_nuisances(moment, beta)?;
        let h = self.h_of_beta_exact(moment, beta)?;
        let d = moment.d();

        let bias_of = |nu: &XNuisances| -> Result<Vec<f64>> {
            let e = self.expected_uncentered_eif(nu, moment, beta)?;
            Ok((0..d).map(|c| e[c] - h[c]).collect())
        };

        // Deterministic per-atom, per-slot bump in [-1, 1].
        let bump = |j: usize, slot: usize| -> f64 {
            (2.399963 * (j as f64 + 1.0) * (slot as f64 + 1.0) + 0.7 * slot as f64).cos()
        };
        let pclamp = |v: f64| v.clamp(0.02, 0.98);

        // Config 1: delta and pi1 true; rho, lambdas, mu0 perturbed, mu1
        // reconstructed to keep delta fixed.
        let mut c1 = truth.clone();
        for j in 0..self.n_x() {
            c1.rho[j] = pclamp(truth.rho[j] + eps * bump(j, 0));
            c1.lam0[j] = pclamp(truth.lam0[j] + eps * bump(j, 1));
            c1.lam1[j] = pclamp(truth.lam1[j] + eps * bump(j, 2));
            let da_bar = c1.delta_a(j);
            for c in 0..d {
                let delta = (truth.mu1[j][c] - truth.mu0[j][c]) / truth.delta_a(j);
                c1.mu0[j][c] = truth.mu0[j][c] + eps * bump(j, 3 + c);
                c1.mu1[j][c] = c1.mu0[j][c] + delta * da_bar;
            }
        }

        // Config 2: delta, lam0, mu0 true; pi1, rho, lam1 perturbed, mu1
        // reconstructed to keep delta fixed.
        let mut c2 = truth.clone();
        for j in 0..self.n_x() {
            c2.pi1[j] = pclamp(truth.pi1[j] + eps * bump(j, 4));
            c2.rho[j] = pclamp(truth.rho[j] + eps * bump(j, 5));
            c2.lam1[j] = pclamp(truth.lam1[j] + eps * bump(j, 6));
            let da_bar = c2.delta_a(j);
            for c in 0..d {
                let delta = (truth.mu1[j][c] - truth.mu0[j][c]) / truth.delta_a(j);
                c2.mu1[j][c] = truth.mu0[j][c] + delta * da_bar;
            }
        }

        // Config 3: deltaA, pi1, rho true; lambdas shifted in parallel and
        // both mu's perturbed freely (so delta is wrong).
        let mut c3 = truth.clone();
        for j in 0..self.n_x() {
            let shift = eps * bump(j, 7);
            let l0 = pclamp(truth.lam0[j] + shift);
            c3.lam0[j] = l0;
            c3.lam1[j] = l0 + truth.delta_a(j);
            for c in 0..d {
                c3.mu0[j][c] = truth.mu0[j][c] + eps * bump(j, 8 + c);
                c3.mu1[j][c] = truth.mu1[j][c] + eps * bump(j, 9 + c);
            }
        }

        // Violation: pi1 and mu1 (hence delta) jointly wrong.
        let mut v = truth.clone();
        for j in 0..self.n_x() {
            v.pi1[j] = pclamp(truth.pi1[j] + eps);
            for c in 0..d {
                v.mu1[j][c] = truth.mu1[j][c] + eps;
            }
        }

        Ok(RobustnessReport {
            config_biases: vec![bias_of(&c1)?, bias_of(&c2)?, bias_of(&c3)?],
            violation_bias: bias_of(&v)?,
        })
    }

    // -- QTT enumeration ---------------------------------------------------

    /// Enumerated expectation of the direct QTT moment
    /// `(1{Y <= gamma + beta (1-A)} - q) * ((2Z-1)/pi_Z * rho/deltaA)^(1-A)`.
    pub fn qtt_moment_expectation(&self, q: f64, gamma: f64, beta: f64) -> Result<f64> {
        let mut acc = Vec::with_capacity(self.atoms.len());
        for (atom, &j) in self.atoms.iter().zip(&self.x_of) {
            let ind = f64::from(atom.y() <= gamma + beta * f64::from(1 - atom.a)) - q;
            let weight = if atom.a == 1 {
                1.0
            } else {
                let lam0 = self.lam_x(j, 0)?;
                let lam1 = self.lam_x(j, 1)?;
                let delta_a = lam1 - lam0;
                if delta_a.abs() < DELTA_A_TINY {
                    return Err(Error::ZeroDeltaA(j));
                }
                let pi1 = self.pi1_x(j);
                let pi_z = if atom.z == 1 { pi1 } else { 1.0 - pi1 };
                let sign = f64::from(2 * i32::from(atom.z) - 1);
                sign / pi_z * self.rho_x(j) / delta_a
            };
            acc.push(atom.prob * ind * weight);
        }
        Ok(pairwise_sum(&acc))
    }

    /// `(gamma*, beta*)` for the direct QTT moment: the treated q-quantile
    /// of `Y1` and the quantile gap of the two counterfactual laws.
    pub fn qtt_truth(&self, q: f64) -> Result<(f64, f64)> {
        let gamma = self.treated_quantile_y1(q)?;
        let q0 = self.counterfactual_quantile_treated(q)?;
        Ok((gamma, q0 - gamma))
    }

    // -- bridges to the sample world ----------------------------------------

    /// Expands the law into a dataset whose empirical distribution equals it
    /// exactly; every atom's probability must be an integer multiple of
    /// `1/total`.
    pub fn expand_to_dataset(&self, total: usize) -> Result<Dataset> {
        let mut rows = Vec::with_capacity(total);
        for (i, a) in self.atoms.iter().enumerate() {
            let count_f = a.prob * total as f64;
            let count = count_f.round();
            if (count_f - count).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "atom {i} probability {} is not a multiple of 1/{total}",
                    a.prob
                )));
            }
            for _ in 0..count as usize {
                rows.push(Observation {
                    x: a.x.clone(),
                    z: a.z,
                    a: a.a,
                    y: a.y(),
                });
            }
        }
        if rows.len() != total {
            return Err(Error::InvalidConfig(format!(
                "expansion produced {} rows, expected {total}",
                rows.len()
            )));
        }
        Dataset::from_rows(rows)
    }

    /// Draws `n` i.i.d. observations (plus their latents) from the law.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (Dataset, Vec<(f64, f64, f64)>) {
        let mut cum = Vec::with_capacity(self.atoms.len());
        let mut acc = 0.0;
        for a in &self.atoms {
            acc += a.prob;
            cum.push(acc);
        }
        let mut rows = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let idx = cum.partition_point(|&c| c < u).min(self.atoms.len() - 1);
            let a = &self.atoms[idx];
            rows.push(Observation {
                x: a.x.clone(),
                z: a.z,
                a: a.a,
                y: a.y(),
            });
            latents.push((a.u, a.y0, a.y1));
        }
        (
            Dataset::from_rows(rows).expect("law atoms are valid rows"),
            latents,
        )
    }

    /// Oracle nuisance functions backed by this law's exact conditionals.
    /// Covariates are matched to x-atoms by (near-)exact equality.
    pub fn oracle_functions(self: &Arc<Self>, moment: &MomentSpec) -> Arc<OracleFunctions> {
        let law = self.clone();
        let must_idx = move |law: &DiscreteLaw, x: &[f64]| -> usize {
            law.x_index(x)
                .expect("oracle evaluated at a covariate value outside the law's support")
        };
        let l1 = law.clone();
        let l2 = law.clone();
        let l3 = law.clone();
        let l4 = law.clone();
        let l5 = law.clone();
        let m = moment.clone();
        let f1 = must_idx.clone();
        let f2 = must_idx.clone();
        let f3 = must_idx.clone();
        let f4 = must_idx.clone();
        Arc::new(OracleFunctions {
            rho: Arc::new(move |x| l1.rho_x(f1(&l1, x))),
            pi1: Arc::new(move |x| l2.pi1_x(f2(&l2, x))),
            lam0: Arc::new(move |x| l3.lam_x(f3(&l3, x), 0).expect("arm present")),
            lam1: Arc::new(move |x| l4.lam_x(f4(&l4, x), 1).expect("arm present")),
            mu: Arc::new(move |z, beta, x, out| {
                let j = must_idx(&l5, x);
                let v = l5.mu_x(j, z, &m, beta).expect("arm present");
                out.copy_from_slice(&v);
            }),
        })
    }
}

/// Nuisance values tabulated on a law's x-atoms; either the truth or a
/// perturbation of it.
#[derive(Debug, Clone)]
pub struct XNuisances {
    pub rho: Vec<f64>,
    pub pi1: Vec<f64>,
    pub lam0: Vec<f64>,
    pub lam1: Vec<f64>,
    /// indexed `[x-atom][coordinate]`
    pub mu0: Vec<Vec<f64>>,
    pub mu1: Vec<Vec<f64>>,
    pub d: usize,
}

impl XNuisances {
    pub fn zeros(nx: usize, d: usize) -> Self {
        Self {
            rho: vec![0.0; nx],
            pi1: vec![0.0; nx],
            lam0: vec![0.0; nx],
            lam1: vec![0.0; nx],
            mu0: vec![vec![0.0; d]; nx],
            mu1: vec![vec![0.0; d]; nx],
            d,
        }
    }

    pub fn delta_a(&self, j: usize) -> f64 {
        self.lam1[j] - self.lam0[j]
    }
}

#[derive(Debug, Clone)]
pub struct RemainderCheck {
    pub definitional: Vec<f64>,
    pub product_form: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    /// biases under the three correct-specification configurations
    pub config_biases: Vec<Vec<f64>>,
    /// bias under the designated violating configuration
    pub violation_bias: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Single-x law matching the worked two-arm example: pi1 = 0.5,
    /// lam1 = 0.8, lam0 = 0.4, and mu built from two outcome levels.
    fn two_arm_law() -> DiscreteLaw {
        // For z=1: A=1 w.p. 0.8; untreated mass 0.2 all at y0 = 0.5
        //   => E[M(Y,0)(1-A)|Z=1] = 0.2*0.5 = 0.1 for the mean moment
        // For z=0: A=1 w.p. 0.4; untreated mass 0.6 at y0 = 0.5
        //   => E[M(Y,0)(1-A)|Z=0] = 0.6*0.5 = 0.3
        let mut atoms = Vec::new();
        for (z, lam) in [(1u8, 0.8), (0u8, 0.4)] {
            atoms.push(LawAtom {
                x: vec![],
                u: 0.0,
                z,
                a: 1,
                y0: 0.5,
                y1: 2.0,
                prob: 0.5 * lam,
            });
            atoms.push(LawAtom {
                x: vec![],
                u: 0.0,
                z,
                a: 0,
                y0: 0.5,
                y1: 2.0,
                prob: 0.5 * (1.0 - lam),
            });
        }
        DiscreteLaw::new(atoms).unwrap()
    }

    #[test]
    fn worked_h_value() {
        // h = ((0.1 - 0.3)/0.4) * rho with rho = 0.5*0.8 + 0.5*0.4 = 0.6
        let law = two_arm_law();
        let h = law.h_of_beta_exact(&MomentSpec::mean(), &[0.0]).unwrap();
        assert_relative_eq!(h[0], -0.3, epsilon = 1e-12);
        assert_relative_eq!(law.rho_x(0), 0.6, epsilon = 1e-12);
        assert_relative_eq!(law.mu_x(0, 1, &MomentSpec::mean(), &[0.0]).unwrap()[0], 0.1);
        assert_relative_eq!(law.mu_x(0, 0, &MomentSpec::mean(), &[0.0]).unwrap()[0], 0.3);
    }

    #[test]
    fn irrelevant_instrument_is_zero_delta_a() {
        // Z independent of (A, Y): lam1 = lam0 -> ZeroDeltaA
        let mut atoms = Vec::new();
        for z in [0u8, 1] {
            for a in [0u8, 1] {
                atoms.push(LawAtom {
                    x: vec![],
                    u: 0.0,
                    z,
                    a,
                    y0: 1.0,
                    y1: 2.0,
                    prob: 0.25,
                });
            }
        }
        let law = DiscreteLaw::new(atoms).unwrap();
        assert!(matches!(
            law.h_of_beta_exact(&MomentSpec::mean(), &[0.0]).unwrap_err(),
            Error::ZeroDeltaA(0)
        ));
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let atoms = vec![LawAtom {
            x: vec![],
            u: 0.0,
            z: 0,
            a: 0,
            y0: 0.0,
            y1: 0.0,
            prob: 0.5,
        }];
        assert!(DiscreteLaw::new(atoms).is_err());
    }

    #[test]
    fn expansion_reproduces_the_law_exactly() {
        let law = two_arm_law();
        // probabilities are multiples of 1/10: 0.4, 0.1, 0.2, 0.3
        let d = law.expand_to_dataset(10).unwrap();
        assert_eq!(d.n(), 10);
        let treated = d.rows().iter().filter(|r| r.a == 1).count();
        assert_eq!(treated, 6); // 0.4 + 0.2 = 0.6
        assert!(law.expand_to_dataset(7).is_err());
    }

    #[test]
    fn remainder_vanishes_at_truth() {
        let law = two_arm_law();
        let m = MomentSpec::mean();
        let truth = law.true_nuisances(&m, &[0.3]).unwrap();
        let r = law.remainder_exact(&truth, &m, &[0.3]).unwrap();
        assert_relative_eq!(r.definitional[0], 0.0, epsilon = 1e-13);
        assert_relative_eq!(r.product_form[0], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn mu1_only_perturbation_keeps_remainder_zero() {
        // everything true except mu1 += eps: both remainder factors vanish
        let law = two_arm_law();
        let m = MomentSpec::mean();
        let mut nu = law.true_nuisances(&m, &[0.0]).unwrap();
        nu.mu1[0][0] += 0.05;
        let r = law.remainder_exact(&nu, &m, &[0.0]).unwrap();
        assert_relative_eq!(r.definitional[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(r.product_form[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sampling_matches_law_frequencies() {
        let law = two_arm_law();
        let mut rng = crate::numeric::seeded_rng(11);
        let (d, latents) = law.sample(20_000, &mut rng);
        let frac_treated =
            d.rows().iter().filter(|r| r.a == 1).count() as f64 / d.n() as f64;
        assert!((frac_treated - 0.6).abs() < 0.02);
        assert_eq!(latents.len(), 20_000);
    }
}
