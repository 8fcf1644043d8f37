//! Moment-function families `M(y, beta)` whose conditional-on-treated mean
//! implicitly defines the target functional, plus the affine-in-beta
//! decomposition that lets the outcome regressions be fit once instead of
//! once per grid point.
//!
//! Built-in families (all one-dimensional):
//! - mean:       `M(y, b) = y - b`
//! - quantile q: `M(y, b) = 1{y >= b} - q`   (ties count as >=)
//! - cdf at y0:  `M(y, b) = 1{y <= y0} - b`
//!
//! Custom moments may be vector-valued and must declare a sup-norm bound,
//! which is enforced at every evaluation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Vector-valued custom moment: writes `M(y, beta)` into `out` (length `d`).
pub type CustomMomentFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum MomentKind {
    Mean,
    Quantile { q: f64 },
    CdfAt { y0: f64 },
    Custom {
        f: CustomMomentFn,
        d: usize,
        bound: f64,
    },
}

impl fmt::Debug for MomentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentKind::Mean => write!(f, "Mean"),
            MomentKind::Quantile { q } => write!(f, "Quantile(q={q})"),
            MomentKind::CdfAt { y0 } => write!(f, "CdfAt(y0={y0})"),
            MomentKind::Custom { d, bound, .. } => write!(f, "Custom(d={d}, bound={bound})"),
        }
    }
}

/// A moment family together with its output dimension.
#[derive(Debug, Clone)]
pub struct MomentSpec {
    kind: MomentKind,
}

impl MomentSpec {
    pub fn mean() -> Self {
        Self {
            kind: MomentKind::Mean,
        }
    }

    /// `q` must be strictly interior to (0, 1).
    pub fn quantile(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "quantile level q={q} must lie strictly in (0,1)"
            )));
        }
        Ok(Self {
            kind: MomentKind::Quantile { q },
        })
    }

    pub fn cdf_at(y0: f64) -> Self {
        Self {
            kind: MomentKind::CdfAt { y0 },
        }
    }

    /// Custom vector moment with declared dimension and sup-norm bound.
    pub fn custom(d: usize, bound: f64, f: CustomMomentFn) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("custom moment needs d >= 1".into()));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidConfig(
                "custom moment needs a finite positive bound".into(),
            ));
        }
        Ok(Self {
            kind: MomentKind::Custom { f, d, bound },
        })
    }

    pub fn kind(&self) -> &MomentKind {
        &self.kind
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        match &self.kind {
            MomentKind::Custom { d, .. } => *d,
            _ => 1,
        }
    }

    /// Sup-norm bound on `M`, when one is declared or structural.
    /// Indicator families are bounded by 1; the mean family is unbounded.
    pub fn bound(&self) -> Option<f64> {
        match &self.kind {
            MomentKind::Mean => None,
            MomentKind::Quantile { .. } | MomentKind::CdfAt { .. } => Some(1.0),
            MomentKind::Custom { bound, .. } => Some(*bound),
        }
    }

    /// Evaluates `M(y, beta)` into `out` (length `d`).
    pub fn evaluate_into(&self, y: f64, beta: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(beta.len(), self.d());
        debug_assert_eq!(out.len(), self.d());
        match &self.kind {
            MomentKind::Mean => out[0] = y - beta[0],
            MomentKind::Quantile { q } => out[0] = f64::from(y >= beta[0]) - q,
            MomentKind::CdfAt { y0 } => out[0] = f64::from(y <= *y0) - beta[0],
            MomentKind::Custom { f, bound, .. } => {
                f(y, beta, out);
                for &v in out.iter() {
                    if !(v.abs() <= *bound) {
                        return Err(Error::UnboundedCustomMoment {
                            y,
                            bound: *bound,
                            value: v.abs(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Scalar convenience for one-dimensional moments.
    pub fn evaluate1(&self, y: f64, beta: f64) -> Result<f64> {
        let mut out = [0.0];
        self.evaluate_into(y, &[beta], &mut out)?;
        Ok(out[0])
    }

    /// The nuisance-regression target `M(y, beta) * (1 - a)`.
    pub fn regression_target_into(
        &self,
        y: f64,
        a: u8,
        beta: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.evaluate_into(y, beta, out)?;
        let w = f64::from(1 - a);
        for v in out.iter_mut() {
            *v *= w;
        }
        Ok(())
    }

    /// Scalar convenience for one-dimensional moments.
    pub fn regression_target1(&self, y: f64, a: u8, beta: f64) -> Result<f64> {
        let mut out = [0.0];
        self.regression_target_into(y, a, &[beta], &mut out)?;
        Ok(out[0])
    }

    /// Affine-in-beta structure of the regression target, when it exists:
    /// `M(y, b)(1-a) = M(y, 0)(1-a) + slope * b * (1-a)` for every `y, a, b`.
    ///
    /// Mean and CdfAt decompose with slope -1; the quantile family does not
    /// (beta sits inside the indicator). Custom moments are rejected since
    /// their structure is opaque.
    pub fn affine_decomposition(&self) -> Result<AffineDecomposition> {
        match &self.kind {
            MomentKind::Mean | MomentKind::CdfAt { .. } => Ok(AffineDecomposition {
                exists: true,
                slope: -1.0,
            }),
            MomentKind::Quantile { .. } => Ok(AffineDecomposition {
                exists: false,
                slope: 0.0,
            }),
            MomentKind::Custom { .. } => Err(Error::NotDecomposable),
        }
    }
}

/// See [`MomentSpec::affine_decomposition`]. The base regression target is
/// `M(y, 0)(1-a)`, obtained by evaluating the family at beta = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDecomposition {
    pub exists: bool,
    /// `c(beta) = slope * beta` multiplies `(1 - a)`; -1 for the built-ins.
    pub slope: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mean_moment_arithmetic() {
        let m = MomentSpec::mean();
        assert_relative_eq!(m.evaluate1(2.0, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn quantile_indicator_cases() {
        let m = MomentSpec::quantile(0.5).unwrap();
        assert_relative_eq!(m.evaluate1(1.0, 2.0).unwrap(), -0.5);
        // ties count as >=
        assert_relative_eq!(m.evaluate1(2.0, 2.0).unwrap(), 0.5);
    }

    #[test]
    fn cdf_indicator_cases() {
        let m = MomentSpec::cdf_at(0.0);
        assert_relative_eq!(m.evaluate1(-1.0, 0.3).unwrap(), 0.7);
        assert_relative_eq!(m.evaluate1(1.0, 0.3).unwrap(), -0.3);
    }

    #[test]
    fn quantile_level_must_be_interior() {
        assert!(MomentSpec::quantile(0.0).is_err());
        assert!(MomentSpec::quantile(1.0).is_err());
    }

    #[test]
    fn regression_target_zeroed_for_treated() {
        let m = MomentSpec::mean();
        assert_relative_eq!(m.regression_target1(2.0, 1, 0.0).unwrap(), 0.0);
        assert_relative_eq!(m.regression_target1(2.0, 0, 0.5).unwrap(), 1.5);
        let q = MomentSpec::quantile(0.5).unwrap();
        assert_relative_eq!(q.regression_target1(3.0, 0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn decomposition_flags() {
        let mean = MomentSpec::mean().affine_decomposition().unwrap();
        assert!(mean.exists);
        assert_relative_eq!(mean.slope, -1.0);
        let cdf = MomentSpec::cdf_at(0.0).affine_decomposition().unwrap();
        assert!(cdf.exists);
        assert_relative_eq!(cdf.slope, -1.0);
        let q = MomentSpec::quantile(0.5)
            .unwrap()
            .affine_decomposition()
            .unwrap();
        assert!(!q.exists);
    }

    #[test]
    fn custom_not_decomposable() {
        let m = MomentSpec::custom(1, 10.0, Arc::new(|y, b, out| out[0] = y - b[0])).unwrap();
        assert!(matches!(
            m.affine_decomposition().unwrap_err(),
            Error::NotDecomposable
        ));
    }

    #[test]
    fn custom_bound_enforced() {
        let m = MomentSpec::custom(1, 1.0, Arc::new(|y, _, out| out[0] = y)).unwrap();
        assert!(m.evaluate1(0.5, 0.0).is_ok());
        assert!(matches!(
            m.evaluate1(5.0, 0.0).unwrap_err(),
            Error::UnboundedCustomMoment { .. }
        ));
    }

    proptest! {
        // For decomposable families the target difference is
        // slope * beta * (1-a) for all inputs (up to one rounding of y - b).
        #[test]
        fn affine_identity_exact(
            y in -50.0f64..50.0,
            beta in -20.0f64..20.0,
            a in 0u8..=1,
            y0 in -5.0f64..5.0,
        ) {
            for spec in [MomentSpec::mean(), MomentSpec::cdf_at(y0)] {
                let dec = spec.affine_decomposition().unwrap();
                prop_assert!(dec.exists);
                let at_beta = spec.regression_target1(y, a, beta).unwrap();
                let at_zero = spec.regression_target1(y, a, 0.0).unwrap();
                let c = dec.slope * beta * f64::from(1 - a);
                let tol = 1e-13 * (1.0 + y.abs() + beta.abs());
                prop_assert!((at_beta - at_zero - c).abs() <= tol);
            }
        }

        // Indicator families stay in [-1, 1]; the mean family stays in
        // [L - beta, U - beta] for outcomes in [L, U].
        #[test]
        fn range_bounds(y in -10.0f64..10.0, beta in -10.0f64..10.0, q in 0.01f64..0.99) {
            let qm = MomentSpec::quantile(q).unwrap().evaluate1(y, beta).unwrap();
            prop_assert!((-1.0..=1.0).contains(&qm));
            let cm = MomentSpec::cdf_at(0.0).evaluate1(y, beta).unwrap();
            prop_assert!((-11.0..=11.0).contains(&cm));
            let mm = MomentSpec::mean().evaluate1(y, beta).unwrap();
            prop_assert!(mm >= -10.0 - beta && mm <= 10.0 - beta);
        }

        // The quantile moment is monotone nonincreasing in beta.
        #[test]
        fn quantile_monotone_in_beta(y in -10.0f64..10.0, b1 in -10.0f64..10.0, db in 0.0f64..5.0) {
            let m = MomentSpec::quantile(0.3).unwrap();
            let lo = m.evaluate1(y, b1).unwrap();
            let hi = m.evaluate1(y, b1 + db).unwrap();
            prop_assert!(hi <= lo);
        }
    }
}
