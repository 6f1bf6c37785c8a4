//! Observation container, column roles and CSV ingestion.
//!
//! A [`Dataset`] is a set of named real columns of equal length plus a role
//! map telling the estimators which column plays which part (outcome,
//! treatment, instrument, covariates, and optional truth columns used by
//! oracle runs). Row order is the observation index used by fold assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::moment::MomentModel;

/// Semantic role of a column. Covariate and truth indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Outcome,
    OutcomePre,
    Treatment,
    Instrument,
    Covariate(usize),
    TruthEta(usize),
    TruthTheta,
}

impl Role {
    /// Roles that can define groups in nuisance specs. A model that groups
    /// on one of them requires its column to hold only 0/1 values.
    pub fn is_indicator(&self) -> bool {
        matches!(self, Role::Treatment | Role::Instrument)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Outcome => write!(f, "outcome"),
            Role::OutcomePre => write!(f, "outcome_pre"),
            Role::Treatment => write!(f, "treatment"),
            Role::Instrument => write!(f, "instrument"),
            Role::Covariate(j) => write!(f, "covariate_{j}"),
            Role::TruthEta(j) => write!(f, "truth_eta_{j}"),
            Role::TruthTheta => write!(f, "truth_theta"),
        }
    }
}

impl serde::Serialize for Role {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl FromStr for Role {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let indexed = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                .filter(|&j| j >= 1)
        };
        match s {
            "outcome" => Ok(Role::Outcome),
            "outcome_pre" => Ok(Role::OutcomePre),
            "treatment" => Ok(Role::Treatment),
            "instrument" => Ok(Role::Instrument),
            "truth_theta" => Ok(Role::TruthTheta),
            _ => {
                if let Some(j) = indexed("covariate_") {
                    Ok(Role::Covariate(j))
                } else if let Some(j) = indexed("truth_eta_") {
                    Ok(Role::TruthEta(j))
                } else {
                    Err(DataError::UnknownRole(s.to_string()))
                }
            }
        }
    }
}

pub type RoleMap = BTreeMap<Role, String>;

/// Parses `role=column` pairs as given on the command line.
pub fn parse_role_assignment(s: &str) -> Result<(Role, String), DataError> {
    let (role, column) = s
        .split_once('=')
        .ok_or_else(|| DataError::UnknownRole(s.to_string()))?;
    Ok((role.trim().parse()?, column.trim().to_string()))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: column `{0}` not found")]
    MissingColumn(String),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("parse error at row {row}, column `{column}`: cannot read {value:?} as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("validation error at row {row}: column `{column}` has a missing or non-finite value")]
    NonFinite { row: usize, column: String },
    #[error("column `{column}` has {len} rows, expected {expected}")]
    Length { column: String, len: usize, expected: usize },
    #[error("dataset has no covariate roles")]
    NoCovariates,
    #[error("covariate roles must be contiguous from covariate_1; covariate_{0} is missing")]
    CovariateGap(usize),
    #[error("covariate roles map to the same column `{0}`")]
    DuplicateCovariate(String),
    #[error("dataset has no rows")]
    Empty,
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One observation as seen by the moment functions. Roles absent from the
/// dataset read as NaN.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub outcome: f64,
    pub outcome_pre: f64,
    pub treatment: f64,
    pub instrument: f64,
    pub x: &'a [f64],
}

impl Observation<'_> {
    pub fn role_value(&self, role: Role) -> f64 {
        match role {
            Role::Outcome => self.outcome,
            Role::OutcomePre => self.outcome_pre,
            Role::Treatment => self.treatment,
            Role::Instrument => self.instrument,
            Role::Covariate(j) => self.x.get(j - 1).copied().unwrap_or(f64::NAN),
            Role::TruthEta(_) | Role::TruthTheta => f64::NAN,
        }
    }
}

/// Immutable, validated table of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    roles: BTreeMap<Role, usize>,
    d_x: usize,
    // Row-major n × d_x copy of the covariate block.
    x: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from named columns and a role map, enforcing every
    /// invariant (equal lengths, finite values, contiguous distinct
    /// covariates).
    pub fn new(columns: Vec<(String, Vec<f64>)>, roles: RoleMap) -> Result<Self, DataError> {
        let n_rows = columns.first().map(|c| c.1.len()).ok_or(DataError::Empty)?;
        if n_rows == 0 {
            return Err(DataError::Empty);
        }
        let mut names = Vec::with_capacity(columns.len());
        let mut data = Vec::with_capacity(columns.len());
        for (name, values) in columns {
            if names.contains(&name) {
                return Err(DataError::DuplicateColumn(name));
            }
            if values.len() != n_rows {
                return Err(DataError::Length { column: name, len: values.len(), expected: n_rows });
            }
            names.push(name);
            data.push(values);
        }

        let mut resolved = BTreeMap::new();
        for (role, column) in &roles {
            let idx = names
                .iter()
                .position(|n| n == column)
                .ok_or_else(|| DataError::MissingColumn(column.clone()))?;
            resolved.insert(*role, idx);
        }

        for &idx in resolved.values() {
            for (row, &v) in data[idx].iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite { row, column: names[idx].clone() });
                }
            }
        }

        let covariates: Vec<usize> = resolved
            .iter()
            .filter_map(|(r, _)| match r {
                Role::Covariate(j) => Some(*j),
                _ => None,
            })
            .collect();
        if covariates.is_empty() {
            return Err(DataError::NoCovariates);
        }
        let d_x = covariates.len();
        for j in 1..=d_x {
            if !resolved.contains_key(&Role::Covariate(j)) {
                return Err(DataError::CovariateGap(j));
            }
        }
        let cov_idx: Vec<usize> = (1..=d_x).map(|j| resolved[&Role::Covariate(j)]).collect();
        for (a, &ia) in cov_idx.iter().enumerate() {
            if cov_idx[a + 1..].contains(&ia) {
                return Err(DataError::DuplicateCovariate(names[ia].clone()));
            }
        }

        let mut x = Vec::with_capacity(n_rows * d_x);
        for i in 0..n_rows {
            for &c in &cov_idx {
                x.push(data[c][i]);
            }
        }

        Ok(Dataset { n_rows, names, columns: data, roles: resolved, d_x, x })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains_key(&role)
    }

    pub fn role_column(&self, role: Role) -> Option<&[f64]> {
        self.roles.get(&role).map(|&i| self.columns[i].as_slice())
    }

    pub fn role_map(&self) -> RoleMap {
        self.roles.iter().map(|(r, &i)| (*r, self.names[i].clone())).collect()
    }

    /// Row-major n × d_x covariate matrix.
    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        let get = |r: Role| self.roles.get(&r).map_or(f64::NAN, |&c| self.columns[c][i]);
        Observation {
            outcome: get(Role::Outcome),
            outcome_pre: get(Role::OutcomePre),
            treatment: get(Role::Treatment),
            instrument: get(Role::Instrument),
            x: self.covariate_row(i),
        }
    }

    /// Row-major n × p matrix of the truth nuisance columns, if all p exist.
    pub fn truth_eta(&self, p: usize) -> Option<Vec<f64>> {
        let cols: Option<Vec<&[f64]>> = (1..=p).map(|j| self.role_column(Role::TruthEta(j))).collect();
        let cols = cols?;
        let mut out = Vec::with_capacity(self.n_rows * p);
        for i in 0..self.n_rows {
            out.extend(cols.iter().map(|c| c[i]));
        }
        Some(out)
    }

    pub fn truth_theta(&self) -> Option<f64> {
        self.role_column(Role::TruthTheta).map(|c| c[0])
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).collect())
            .collect();
        let mut x = Vec::with_capacity(rows.len() * self.d_x);
        for &i in rows {
            x.extend_from_slice(self.covariate_row(i));
        }
        Dataset {
            n_rows: rows.len(),
            names: self.names.clone(),
            columns,
            roles: self.roles.clone(),
            d_x: self.d_x,
            x,
        }
    }

    /// Returns a copy with one cell replaced; used by mutation tests and
    /// sensitivity checks. Indicator constraints are re-checked.
    pub fn with_value(&self, column: &str, row: usize, value: f64) -> Result<Dataset, DataError> {
        let mut cols: Vec<(String, Vec<f64>)> =
            self.names.iter().cloned().zip(self.columns.iter().cloned()).collect();
        let c = cols
            .iter_mut()
            .find(|(n, _)| n == column)
            .ok_or_else(|| DataError::MissingColumn(column.to_string()))?;
        c.1[row] = value;
        Dataset::new(cols, self.role_map())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        let mut record = Vec::with_capacity(self.names.len());
        for i in 0..self.n_rows {
            record.clear();
            record.extend(self.columns.iter().map(|c| format!("{}", c[i])));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a UTF-8, comma-separated file with a header row and binds roles.
pub fn load_csv<P: AsRef<Path>>(path: P, roles: &RoleMap) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, roles)
}

pub fn read_csv<R: Read>(reader: R, roles: &RoleMap) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for column in roles.values() {
        if !headers.contains(column) {
            return Err(DataError::MissingColumn(column.clone()));
        }
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row,
                column: headers[j].clone(),
                value: cell.to_string(),
            })?;
            columns[j].push(v);
        }
    }
    Dataset::new(headers.into_iter().zip(columns).collect(), roles.clone())
}

/// Role map inferred from conventional column names: `Y`, `Y0`, `A` or `D`
/// (treatment), `Z`, `X1..Xd`, `eta_1..eta_p`, `theta`.
pub fn conventional_roles(headers: &[String]) -> RoleMap {
    let mut roles = RoleMap::new();
    let has = |name: &str| headers.iter().any(|h| h == name);
    if has("Y") {
        roles.insert(Role::Outcome, "Y".into());
    }
    if has("Y0") {
        roles.insert(Role::OutcomePre, "Y0".into());
    }
    if has("A") {
        roles.insert(Role::Treatment, "A".into());
    } else if has("D") {
        roles.insert(Role::Treatment, "D".into());
    }
    if has("Z") {
        roles.insert(Role::Instrument, "Z".into());
    }
    let mut j = 1;
    while has(&format!("X{j}")) {
        roles.insert(Role::Covariate(j), format!("X{j}"));
        j += 1;
    }
    let mut j = 1;
    while has(&format!("eta_{j}")) {
        roles.insert(Role::TruthEta(j), format!("eta_{j}"));
        j += 1;
    }
    if has("theta") {
        roles.insert(Role::TruthTheta, "theta".into());
    }
    roles
}

/// A reason the dataset cannot be used with a model.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    MissingRole { role: Role, model: String },
    /// A column the model splits into groups holds a value other than 0/1.
    NonBinary { role: Role, column: String, row: usize, value: f64, model: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::MissingRole { role, model } => {
                write!(f, "model {model} requires role `{role}`, which the dataset does not map")
            }
            ValidationIssue::NonBinary { role, column, row, value, model } => write!(
                f,
                "model {model} uses `{role}` as a 0/1 indicator, but column `{column}` has {value} at row {row}"
            ),
        }
    }
}

/// Checks every role referenced by the model's moment functions and nuisance
/// specs, and that every grouping column is 0/1. Collects all violations
/// rather than stopping at the first.
pub fn validate_for_model(dataset: &Dataset, model: &MomentModel) -> Result<(), Vec<ValidationIssue>> {
    let name = model.id().to_string();
    let mut issues: Vec<ValidationIssue> = model
        .required_roles()
        .into_iter()
        .filter(|r| !dataset.has_role(*r))
        .map(|role| ValidationIssue::MissingRole { role, model: name.clone() })
        .collect();
    let mut grouping: Vec<Role> = model.nuisance_specs().iter().filter_map(|s| s.group().map(|g| g.role)).collect();
    grouping.sort();
    grouping.dedup();
    for role in grouping {
        let Some(col) = dataset.role_column(role) else { continue };
        if let Some((row, &value)) = col.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            issues.push(ValidationIssue::NonBinary {
                role,
                column: dataset.role_map()[&role].clone(),
                row,
                value,
                model: name.clone(),
            });
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::{catalog_model, ModelId};

    fn roles(pairs: &[(Role, &str)]) -> RoleMap {
        pairs.iter().map(|(r, c)| (*r, c.to_string())).collect()
    }

    #[test]
    fn loads_small_file() {
        let text = "Y,A,X1\n1.5,1,0.1\n2,0,0.2\n-1,1,0.3\n0,0,0.4\n";
        let ds = read_csv(
            text.as_bytes(),
            &roles(&[(Role::Outcome, "Y"), (Role::Treatment, "A"), (Role::Covariate(1), "X1")]),
        )
        .unwrap();
        assert_eq!(ds.n_rows(), 4);
        assert_eq!(ds.d_x(), 1);
        assert_eq!(ds.observation(2).outcome, -1.0);
        assert_eq!(ds.covariate_row(3), &[0.4]);
    }

    #[test]
    fn grouping_column_must_be_binary() {
        let text = "Y,A,X1\n1,1,0.1\n2,2,0.2\n";
        let rm = roles(&[(Role::Outcome, "Y"), (Role::Treatment, "A"), (Role::Covariate(1), "X1")]);
        let ds = read_csv(text.as_bytes(), &rm).unwrap();
        let issues = validate_for_model(&ds, &catalog_model(ModelId::Ate)).unwrap_err();
        assert!(
            matches!(&issues[..], [ValidationIssue::NonBinary { row: 1, column, .. }] if column == "A"),
            "{issues:?}"
        );
        // a continuous treatment is fine where no nuisance groups on it
        assert!(validate_for_model(&ds, &catalog_model(ModelId::Plm)).is_ok());
    }

    #[test]
    fn missing_column_is_named() {
        let text = "Y,A,X1\n1,1,0.1\n";
        let err = read_csv(
            text.as_bytes(),
            &roles(&[(Role::Instrument, "Z"), (Role::Covariate(1), "X1")]),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(ref c) if c == "Z"), "{err}");
        assert!(err.to_string().contains('Z'));
    }

    #[test]
    fn parse_error_has_position() {
        let text = "Y,X1\n1,0.1\n1,abc\n";
        let err = read_csv(text.as_bytes(), &roles(&[(Role::Outcome, "Y"), (Role::Covariate(1), "X1")]))
            .unwrap_err();
        assert!(matches!(err, DataError::Parse { row: 1, ref column, .. } if column == "X1"));
    }

    #[test]
    fn covariate_rules() {
        let cols = vec![("Y".to_string(), vec![1.0]), ("X".to_string(), vec![0.0])];
        let err = Dataset::new(cols.clone(), roles(&[(Role::Outcome, "Y")])).unwrap_err();
        assert!(matches!(err, DataError::NoCovariates));
        let err = Dataset::new(cols.clone(), roles(&[(Role::Covariate(2), "X")])).unwrap_err();
        assert!(matches!(err, DataError::CovariateGap(1)));
        let err = Dataset::new(cols, roles(&[(Role::Covariate(1), "X"), (Role::Covariate(2), "X")]))
            .unwrap_err();
        assert!(matches!(err, DataError::DuplicateCovariate(_)));
    }

    #[test]
    fn role_parsing() {
        assert_eq!("covariate_3".parse::<Role>().unwrap(), Role::Covariate(3));
        assert_eq!("truth_eta_2".parse::<Role>().unwrap(), Role::TruthEta(2));
        assert!("covariate_0".parse::<Role>().is_err());
        assert!("bogus".parse::<Role>().is_err());
        let (r, c) = parse_role_assignment("outcome=Y").unwrap();
        assert_eq!((r, c.as_str()), (Role::Outcome, "Y"));
        for r in [Role::Outcome, Role::OutcomePre, Role::Instrument, Role::TruthTheta, Role::Covariate(7)] {
            assert_eq!(r.to_string().parse::<Role>().unwrap(), r);
        }
    }

    fn tiny(pairs: &[(Role, &str)]) -> Dataset {
        let cols = ["Y", "Y0", "A", "Z", "X1"]
            .iter()
            .map(|n| (n.to_string(), vec![0.0, 1.0]))
            .collect();
        Dataset::new(cols, roles(pairs)).unwrap()
    }

    #[test]
    fn validate_reports_missing_roles() {
        let no_treat = tiny(&[(Role::Outcome, "Y"), (Role::Covariate(1), "X1")]);
        let errs = validate_for_model(&no_treat, &catalog_model(ModelId::Ate)).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(matches!(errs[0], ValidationIssue::MissingRole { role: Role::Treatment, .. }));

        let late = tiny(&[
            (Role::Outcome, "Y"),
            (Role::Treatment, "A"),
            (Role::Instrument, "Z"),
            (Role::Covariate(1), "X1"),
        ]);
        assert!(validate_for_model(&late, &catalog_model(ModelId::Late)).is_ok());

        let errs = validate_for_model(&no_treat, &catalog_model(ModelId::Plm)).unwrap_err();
        assert_eq!(errs.len(), 1);

        // Every missing role is reported, not only the first.
        let bare = tiny(&[(Role::Covariate(1), "X1")]);
        let errs = validate_for_model(&bare, &catalog_model(ModelId::Late)).unwrap_err();
        assert_eq!(errs.len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let cols = vec![
            ("Y".to_string(), vec![1.0 / 3.0, -2.5e-7, 123456.789012345]),
            ("A".to_string(), vec![1.0, 0.0, 1.0]),
            ("X1".to_string(), vec![0.1, 0.2, std::f64::consts::PI]),
        ];
        let rm = roles(&[(Role::Outcome, "Y"), (Role::Treatment, "A"), (Role::Covariate(1), "X1")]);
        let ds = Dataset::new(cols, rm.clone()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &rm).unwrap();
        assert_eq!(ds, back);
    }
}
