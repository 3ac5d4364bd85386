//! Column-major node feature table.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Covariate,
    Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentType {
    Binary,
    Continuous,
}

impl TreatmentType {
    pub fn as_str(self) -> &'static str {
        match self {
            TreatmentType::Binary => "binary",
            TreatmentType::Continuous => "continuous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
}

/// One row per node, columns are covariates plus at most one treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    schema: Vec<ColumnSpec>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(schema: Vec<ColumnSpec>, columns: Vec<Vec<f64>>) -> Result<Self> {
        check_len(schema.len(), columns.len())?;
        let n_rows = columns.first().map_or(0, Vec::len);
        let mut names = HashSet::new();
        for (spec, col) in schema.iter().zip(&columns) {
            if !names.insert(spec.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate column '{}'", spec.name)));
            }
            check_len(n_rows, col.len())?;
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("column '{}'", spec.name)));
            }
        }
        if schema.iter().filter(|s| s.role == ColumnRole::Treatment).count() > 1 {
            return Err(Error::InvalidConfig("more than one treatment column".into()));
        }
        Ok(FeatureMatrix {
            schema,
            columns,
            n_rows,
        })
    }

    /// Covariates in the given order followed by the treatment column.
    pub fn from_parts(
        covariates: Vec<(String, Vec<f64>)>,
        treatment: (String, Vec<f64>),
    ) -> Result<Self> {
        let mut schema = Vec::with_capacity(covariates.len() + 1);
        let mut columns = Vec::with_capacity(covariates.len() + 1);
        for (name, col) in covariates {
            schema.push(ColumnSpec {
                name,
                role: ColumnRole::Covariate,
            });
            columns.push(col);
        }
        schema.push(ColumnSpec {
            name: treatment.0,
            role: ColumnRole::Treatment,
        });
        columns.push(treatment.1);
        Self::new(schema, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.schema.iter().map(|s| s.name.as_str())
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s.name == name)
    }

    pub fn column_by_name(&self, name: &str) -> Result<&[f64]> {
        self.index_of(name)
            .map(|j| self.column(j))
            .ok_or_else(|| Error::SchemaMismatch(format!("no column '{name}'")))
    }

    pub fn treatment_index(&self) -> Option<usize> {
        self.schema.iter().position(|s| s.role == ColumnRole::Treatment)
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment_index().map(|j| self.column(j))
    }

    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&j| self.schema[j].role == ColumnRole::Covariate)
            .collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// A copy with the treatment column set to `value` on every row.
    pub fn with_treatment(&self, value: f64) -> Result<Self> {
        let j = self
            .treatment_index()
            .ok_or_else(|| Error::SchemaMismatch("no treatment column".into()))?;
        if !value.is_finite() {
            return Err(Error::NonFinite("treatment value".into()));
        }
        let mut out = self.clone();
        out.columns[j] = vec![value; self.n_rows];
        Ok(out)
    }

    /// A copy with the treatment column replaced.
    pub fn with_treatment_values(&self, values: Vec<f64>) -> Result<Self> {
        let j = self
            .treatment_index()
            .ok_or_else(|| Error::SchemaMismatch("no treatment column".into()))?;
        check_len(self.n_rows, values.len())?;
        let mut out = self.clone();
        out.columns[j] = values;
        Ok(out)
    }

    pub fn drop_columns(&self, names: &[&str]) -> Result<Self> {
        for name in names {
            if self.index_of(name).is_none() {
                return Err(Error::SchemaMismatch(format!("no column '{name}'")));
            }
        }
        let keep: Vec<usize> = (0..self.n_cols())
            .filter(|&j| !names.contains(&self.schema[j].name.as_str()))
            .collect();
        Ok(FeatureMatrix {
            schema: keep.iter().map(|&j| self.schema[j].clone()).collect(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            n_rows: self.n_rows,
        })
    }

    pub fn rename(&self, names: Vec<String>) -> Result<Self> {
        check_len(self.n_cols(), names.len())?;
        let schema = names
            .into_iter()
            .zip(&self.schema)
            .map(|(name, s)| ColumnSpec { name, role: s.role })
            .collect();
        Self::new(schema, self.columns.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        FeatureMatrix {
            schema: self.schema.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            n_rows: rows.len(),
        }
    }

    /// Reorders columns to match `schema`, failing if any name or role
    /// differs.
    pub fn align_to(&self, schema: &[ColumnSpec]) -> Result<Self> {
        if schema.len() != self.n_cols() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} columns, got {}",
                schema.len(),
                self.n_cols()
            )));
        }
        let mut columns = Vec::with_capacity(schema.len());
        for spec in schema {
            let j = self
                .index_of(&spec.name)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing column '{}'", spec.name)))?;
            if self.schema[j].role != spec.role {
                return Err(Error::SchemaMismatch(format!("role of '{}' differs", spec.name)));
            }
            columns.push(self.columns[j].clone());
        }
        Ok(FeatureMatrix {
            schema: schema.to_vec(),
            columns,
            n_rows: self.n_rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::from_parts(
            vec![("x1".into(), vec![1.0, 2.0, 3.0]), ("x2".into(), vec![0.5, 0.5, 0.0])],
            ("a".into(), vec![0.0, 1.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn roles_and_access() {
        let f = sample();
        assert_eq!(f.n_rows(), 3);
        assert_eq!(f.treatment_index(), Some(2));
        assert_eq!(f.covariate_indices(), vec![0, 1]);
        assert_eq!(f.row(1), vec![2.0, 0.5, 1.0]);
        assert_eq!(f.with_treatment(7.0).unwrap().treatment().unwrap(), &[7.0; 3]);
    }

    #[test]
    fn rejects_bad_tables() {
        let dup = FeatureMatrix::from_parts(
            vec![("a".into(), vec![1.0])],
            ("a".into(), vec![0.0]),
        );
        assert!(dup.is_err());
        let nan = FeatureMatrix::from_parts(vec![("x".into(), vec![f64::NAN])], ("a".into(), vec![0.0]));
        assert!(matches!(nan, Err(Error::NonFinite(_))));
        let ragged = FeatureMatrix::from_parts(vec![("x".into(), vec![1.0, 2.0])], ("a".into(), vec![0.0]));
        assert!(ragged.is_err());
    }

    #[test]
    fn drop_and_align() {
        let f = sample();
        let d = f.drop_columns(&["x2"]).unwrap();
        assert_eq!(d.names().collect::<Vec<_>>(), vec!["x1", "a"]);
        assert!(f.drop_columns(&["nope"]).is_err());
        let mut schema = f.schema().to_vec();
        schema.swap(0, 1);
        let a = f.align_to(&schema).unwrap();
        assert_eq!(a.column(0), f.column(1));
        assert!(d.align_to(f.schema()).is_err());
    }
}
