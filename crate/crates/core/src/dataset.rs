//! Data ingestion, validation, and fold-partition management for
//! cross-fitting.
//!
//! A [`Dataset`] is a validated, immutable table of observations
//! `(x, z, a, y)` with a binary instrument `z` and binary treatment `a`.
//! Construction is the only place validation happens; everything downstream
//! assumes the invariants hold. A [`FoldPlan`] is a seeded balanced partition
//! of row indices used by the cross-fitting estimator.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::seeded_rng;

/// One observed unit: covariates, instrument, treatment, outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub z: u8,
    pub a: u8,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, z: u8, a: u8, y: f64) -> Result<Self> {
        if z > 1 {
            return Err(Error::NonBinaryColumn {
                column: "instrument".into(),
                row: 0,
                value: z.to_string(),
            });
        }
        if a > 1 {
            return Err(Error::NonBinaryColumn {
                column: "treatment".into(),
                row: 0,
                value: a.to_string(),
            });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                column: "<constructed>".into(),
                row: 0,
            });
        }
        Ok(Self { x, z, a, y })
    }
}

/// Validated table of observations sharing one covariate dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: Vec<Observation>,
    p: usize,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from rows, checking dimension agreement.
    pub fn from_rows(rows: Vec<Observation>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyDataset);
        };
        let p = first.x.len();
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    row: i,
                    found: r.x.len(),
                });
            }
        }
        let covariate_names = (1..=p).map(|j| format!("x{j}")).collect();
        Ok(Self {
            rows,
            p,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Observation {
        &self.rows[i]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    fn set_covariate_names(&mut self, names: Vec<String>) {
        debug_assert_eq!(names.len(), self.p);
        self.covariate_names = names;
    }

    /// Writes the dataset as CSV with columns `y,a,z,x1..xp`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string(), "a".to_string(), "z".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.y.to_string(), r.a.to_string(), r.z.to_string()];
            rec.extend(r.x.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Outcome transform applied at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    #[default]
    None,
    /// `y <- log(1 + y)`; requires all raw outcomes nonnegative.
    Log1p,
}

/// Which columns play which role. Covariates are either an explicit list or
/// every column whose name starts with a prefix; matching is name-based so
/// the loader is robust to column reordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub covariates: CovariateSpec,
    #[serde(default)]
    pub transform: OutcomeTransform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateSpec {
    List(Vec<String>),
    Prefix { prefix: String },
}

/// Loads a UTF-8, header-row CSV per the schema. Missing values and
/// non-numeric cells are hard errors; `z` and `a` must be exactly 0 or 1.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

/// Same as [`load_csv`] but from any reader (used heavily in tests).
pub fn load_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(&schema.outcome)?;
    let a_idx = find(&schema.treatment)?;
    let z_idx = find(&schema.instrument)?;

    let (x_idx, x_names): (Vec<usize>, Vec<String>) = match &schema.covariates {
        CovariateSpec::List(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                idx.push(find(name)?);
            }
            (idx, names.clone())
        }
        CovariateSpec::Prefix { prefix } => {
            let pairs: Vec<(usize, String)> = headers
                .iter()
                .enumerate()
                .filter(|(i, h)| {
                    h.starts_with(prefix.as_str())
                        && *i != y_idx
                        && *i != a_idx
                        && *i != z_idx
                })
                .map(|(i, h)| (i, h.clone()))
                .collect();
            pairs.into_iter().unzip()
        }
    };

    let parse_f64 = |field: &str, column: &str, row: usize| -> Result<f64> {
        let v: f64 = field
            .trim()
            .parse()
            .map_err(|_| Error::NonFiniteValue {
                column: column.to_string(),
                row,
            })?;
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                column: column.to_string(),
                row,
            });
        }
        Ok(v)
    };
    let parse_bin = |field: &str, column: &str, row: usize| -> Result<u8> {
        match field.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::NonBinaryColumn {
                column: column.to_string(),
                row,
                value: other.to_string(),
            }),
        }
    };

    let mut rows = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let mut y = parse_f64(get(y_idx), &schema.outcome, row_no)?;
        let a = parse_bin(get(a_idx), &schema.treatment, row_no)?;
        let z = parse_bin(get(z_idx), &schema.instrument, row_no)?;
        let mut x = Vec::with_capacity(x_idx.len());
        for (j, &ci) in x_idx.iter().enumerate() {
            x.push(parse_f64(get(ci), &x_names[j], row_no)?);
        }
        if schema.transform == OutcomeTransform::Log1p {
            if y < 0.0 {
                return Err(Error::NegativeOutcomeForLog1p {
                    row: row_no,
                    value: y,
                });
            }
            y = y.ln_1p();
        }
        rows.push(Observation { x, z, a, y });
    }

    let mut d = Dataset::from_rows(rows)?;
    d.set_covariate_names(x_names);
    Ok(d)
}

/// Seeded balanced partition of `[n]` into `K` folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    /// assignment[i] = fold index of row i
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Row indices of fold `k`, ascending (fixes the summation order).
    pub fn fold_indices(&self, k: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == k)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row indices of the complement of fold `k`, ascending.
    pub fn complement_indices(&self, k: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Uniform random balanced partition: a seeded Fisher-Yates shuffle of the
/// indices followed by contiguous blocks, so fold sizes differ by at most 1.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::InvalidFoldCount { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = n / k;
    let extra = n % k;
    let mut assignment = vec![0usize; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &row in &order[pos..pos + size] {
            assignment[row] = fold;
        }
        pos += size;
    }
    Ok(FoldPlan {
        k,
        assignment,
        seed,
    })
}

/// Fraction of treated units, `(1/n) sum a_i`. Errors when no unit is
/// treated since every downstream use divides by it.
pub fn empirical_treated_fraction(d: &Dataset) -> Result<f64> {
    let count = d.rows().iter().filter(|r| r.a == 1).count();
    if count == 0 {
        return Err(Error::NoTreatedUnits);
    }
    Ok(count as f64 / d.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn schema() -> CsvSchema {
        CsvSchema {
            outcome: "y".into(),
            treatment: "a".into(),
            instrument: "z".into(),
            covariates: CovariateSpec::Prefix { prefix: "x".into() },
            transform: OutcomeTransform::None,
        }
    }

    #[test]
    fn single_row_parse() {
        let d = load_csv_reader("y,a,z,x1\n2,1,0,0.5".as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 1);
        assert_eq!(d.p(), 1);
        assert_eq!(d.row(0).y, 2.0);
        assert_eq!(d.row(0).a, 1);
        assert_eq!(d.row(0).z, 0);
        assert_eq!(d.row(0).x, vec![0.5]);
    }

    #[test]
    fn log1p_transform() {
        let mut s = schema();
        s.transform = OutcomeTransform::Log1p;
        let d = load_csv_reader("y,a,z,x1\n2,1,0,0.5".as_bytes(), &s).unwrap();
        assert_relative_eq!(d.row(0).y, 3.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log1p_rejects_negative_outcomes() {
        let mut s = schema();
        s.transform = OutcomeTransform::Log1p;
        let err = load_csv_reader("y,a,z,x1\n-1,1,0,0.5".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::NegativeOutcomeForLog1p { row: 0, .. }));
    }

    #[test]
    fn nonbinary_treatment_rejected() {
        let err = load_csv_reader("y,a,z,x1\n2,2,0,0.5".as_bytes(), &schema()).unwrap_err();
        match err {
            Error::NonBinaryColumn { column, row, value } => {
                assert_eq!(column, "a");
                assert_eq!(row, 0);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_named() {
        let err = load_csv_reader("y,a,x1\n2,1,0.5".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "z"));
    }

    #[test]
    fn explicit_covariate_list_order() {
        let mut s = schema();
        s.covariates = CovariateSpec::List(vec!["x2".into(), "x1".into()]);
        let d = load_csv_reader("y,a,z,x1,x2\n2,1,0,0.5,7\n".as_bytes(), &s).unwrap();
        // order follows the schema list, not the file
        assert_eq!(d.row(0).x, vec![7.0, 0.5]);
    }

    #[test]
    fn non_numeric_value_rejected() {
        let err = load_csv_reader("y,a,z,x1\nfoo,1,0,0.5".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }));
    }

    #[test]
    fn folds_balanced_even() {
        let plan = make_folds(4, 2, 17).unwrap();
        assert_eq!(plan.fold_indices(0).len(), 2);
        assert_eq!(plan.fold_indices(1).len(), 2);
    }

    #[test]
    fn folds_balanced_remainder() {
        let plan = make_folds(5, 2, 17).unwrap();
        let mut sizes = vec![plan.fold_indices(0).len(), plan.fold_indices(1).len()];
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 3]);
    }

    #[test]
    fn fold_count_validated() {
        assert!(matches!(
            make_folds(3, 4, 1).unwrap_err(),
            Error::InvalidFoldCount { n: 3, k: 4 }
        ));
        assert!(matches!(
            make_folds(10, 1, 1).unwrap_err(),
            Error::InvalidFoldCount { .. }
        ));
    }

    #[test]
    fn folds_partition_exhaustively() {
        let n = 103;
        let plan = make_folds(n, 7, 99).unwrap();
        let mut seen = vec![0usize; n];
        for k in 0..7 {
            for i in plan.fold_indices(k) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn folds_deterministic_per_seed() {
        let a = make_folds(50, 5, 123).unwrap();
        let b = make_folds(50, 5, 123).unwrap();
        let c = make_folds(50, 5, 124).unwrap();
        assert_eq!(a.assignment(), b.assignment());
        assert_ne!(a.assignment(), c.assignment());
    }

    #[test]
    fn treated_fraction_counts() {
        let rows = vec![
            Observation::new(vec![], 0, 1, 0.0).unwrap(),
            Observation::new(vec![], 0, 0, 0.0).unwrap(),
            Observation::new(vec![], 1, 1, 0.0).unwrap(),
            Observation::new(vec![], 1, 0, 0.0).unwrap(),
        ];
        let d = Dataset::from_rows(rows).unwrap();
        assert_relative_eq!(empirical_treated_fraction(&d).unwrap(), 0.5);
    }

    #[test]
    fn treated_fraction_all_treated() {
        let rows = vec![Observation::new(vec![], 0, 1, 0.0).unwrap(); 3];
        let d = Dataset::from_rows(rows).unwrap();
        assert_relative_eq!(empirical_treated_fraction(&d).unwrap(), 1.0);
    }

    #[test]
    fn treated_fraction_degenerate() {
        let rows = vec![Observation::new(vec![], 0, 0, 0.0).unwrap(); 3];
        let d = Dataset::from_rows(rows).unwrap();
        assert!(matches!(
            empirical_treated_fraction(&d).unwrap_err(),
            Error::NoTreatedUnits
        ));
    }

    #[test]
    fn csv_round_trip_identity() {
        let src = "y,a,z,x1,x2\n2.25,1,0,0.5,-3\n-1.5,0,1,0.125,4\n";
        let d1 = load_csv_reader(src.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        d1.write_csv(&mut buf).unwrap();
        let d2 = load_csv_reader(buf.as_slice(), &schema()).unwrap();
        assert_eq!(d1.rows(), d2.rows());
    }
}
