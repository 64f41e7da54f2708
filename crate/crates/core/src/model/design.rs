//! Fixed-effect design matrix: dummy coding with reference categories
//! dropped, heat interactions as elementwise products, deterministic column
//! order.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{Panel, PanelRow};
use crate::model::{FixedTerm, ModelSpec, SpecError};

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("panel has no rows")]
    EmptyPanel,
    #[error("empty design cells (no row activates): {}", .0.join(", "))]
    EmptyCells(Vec<String>),
    #[error("constant design columns (every row activates, collinear with the intercept): {}", .0.join(", "))]
    ConstantColumns(Vec<String>),
}

/// Sparse 0/1 design matrix in compressed row form. Every stored entry is
/// an implicit 1.0; `names` and the column order follow the linear-predictor
/// term order of the model definition.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    /// Per-row offset (ln population, or 0 when the offset is disabled).
    pub offset: Vec<f64>,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Columns active (value 1) in row `i`, ascending.
    pub fn row_cols(&self, i: usize) -> &[u32] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.n_cols);
        for i in 0..self.n_rows() {
            for &j in self.row_cols(i) {
                m[(i, j as usize)] = 1.0;
            }
        }
        m
    }
}

/// Column labels contributed by one term, in order.
fn term_columns(term: FixedTerm) -> Vec<String> {
    fn cats(prefix: &str, levels: std::ops::RangeInclusive<u8>) -> Vec<String> {
        levels.map(|l| format!("{prefix}{l}")).collect()
    }
    match term {
        FixedTerm::Intercept => vec!["intercept".into()],
        FixedTerm::ExtremeHeat => vec!["extreme_heat".into()],
        FixedTerm::Q4Humidity => vec!["q4_humidity".into()],
        FixedTerm::Pm10Categories => cats("pm10_cat", 2..=3),
        FixedTerm::No2Categories => cats("no2_cat", 2..=3),
        FixedTerm::O3Categories => cats("o3_cat", 2..=4),
        FixedTerm::IncomeQuartiles => cats("income_q", 2..=4),
        FixedTerm::GiniQuartiles => cats("gini_q", 2..=4),
        FixedTerm::Pct65Quartiles => cats("pct65_q", 2..=4),
        term => {
            let parent = term
                .interaction_parent()
                .expect("non-interaction terms are handled above");
            term_columns(parent)
                .into_iter()
                .map(|c| format!("extreme_heat:{c}"))
                .collect()
        }
    }
}

/// Within-term index of the column a row activates, if any.
fn active_column(term: FixedTerm, row: &PanelRow) -> Option<usize> {
    fn dummy(level: u8) -> Option<usize> {
        (level >= 2).then(|| level as usize - 2)
    }
    let heat = row.extreme_heat_lagged == 1;
    match term {
        FixedTerm::Intercept => Some(0),
        FixedTerm::ExtremeHeat => heat.then_some(0),
        FixedTerm::Q4Humidity => (row.q4_humidity_lagged == 1).then_some(0),
        FixedTerm::Pm10Categories => dummy(row.pm10_cat),
        FixedTerm::No2Categories => dummy(row.no2_cat),
        FixedTerm::O3Categories => dummy(row.o3_cat),
        FixedTerm::IncomeQuartiles => dummy(row.income_q),
        FixedTerm::GiniQuartiles => dummy(row.gini_q),
        FixedTerm::Pct65Quartiles => dummy(row.pct65_q),
        term => {
            let parent = term
                .interaction_parent()
                .expect("non-interaction terms are handled above");
            if heat {
                active_column(parent, row)
            } else {
                None
            }
        }
    }
}

/// Build the fixed-effect design for `panel` under `spec`.
///
/// Columns follow the term order of `spec.fixed_terms` with reference
/// categories dropped; interaction columns are the heat indicator times the
/// parent dummy. Fails listing any column no row activates (an empty data
/// cell makes the coefficient unidentifiable), or any non-intercept column
/// every row activates.
pub fn build_design(panel: &Panel, spec: &ModelSpec) -> Result<DesignMatrix, DesignError> {
    spec.validate()?;
    if panel.rows.is_empty() {
        return Err(DesignError::EmptyPanel);
    }

    let mut names: Vec<String> = Vec::new();
    let mut term_starts: Vec<(FixedTerm, usize)> = Vec::new();
    for &term in &spec.fixed_terms {
        term_starts.push((term, names.len()));
        names.extend(term_columns(term));
    }
    let n_cols = names.len();

    let n_rows = panel.rows.len();
    let mut row_ptr = Vec::with_capacity(n_rows + 1);
    let mut cols: Vec<u32> = Vec::new();
    let mut offset = Vec::with_capacity(n_rows);
    let mut activation_counts = vec![0usize; n_cols];
    row_ptr.push(0);
    for row in &panel.rows {
        for &(term, start) in &term_starts {
            if let Some(local) = active_column(term, row) {
                let col = start + local;
                activation_counts[col] += 1;
                cols.push(col as u32);
            }
        }
        row_ptr.push(cols.len());
        offset.push(if spec.use_population_offset { row.log_offset } else { 0.0 });
    }

    let empty: Vec<String> = names
        .iter()
        .zip(&activation_counts)
        .filter(|(_, &c)| c == 0)
        .map(|(n, _)| n.clone())
        .collect();
    if !empty.is_empty() {
        return Err(DesignError::EmptyCells(empty));
    }
    let constant: Vec<String> = names
        .iter()
        .zip(&activation_counts)
        .skip(1) // the intercept is constant by construction
        .filter(|(_, &c)| c == n_rows)
        .map(|(n, _)| n.clone())
        .collect();
    if !constant.is_empty() && spec.fixed_terms.contains(&FixedTerm::Intercept) {
        return Err(DesignError::ConstantColumns(constant));
    }

    Ok(DesignMatrix { names, offset, n_cols, row_ptr, cols })
}
