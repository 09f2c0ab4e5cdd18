//! Method-of-moments estimation over score samples.
//!
//! Perturbations are treated as uniformly likely, so the first moment is the
//! plain mean and the second is the population variance (divisor = sample
//! count). Variance uses the two-pass form: mean first, then squared
//! deviations from it.

use serde::{Deserialize, Serialize};

use crate::domain::ScoreMatrix;
use crate::reliability::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MomentsError {
    #[error("empty sample")]
    EmptySample,
    #[error("unknown perturbation row {0:?}")]
    UnknownRow(String),
    #[error("row {row:?} has {count} missing values")]
    MissingValues { row: String, count: usize },
}

/// Mean metric of one perturbation row over the dataset's examples.
pub fn aggregate_row(matrix: &ScoreMatrix, perturbation_id: &str) -> Result<f64, MomentsError> {
    let index = matrix
        .row_index(perturbation_id)
        .ok_or_else(|| MomentsError::UnknownRow(perturbation_id.to_string()))?;
    aggregate_row_at(matrix, index)
}

fn aggregate_row_at(matrix: &ScoreMatrix, index: usize) -> Result<f64, MomentsError> {
    let row = matrix.row(index);
    let missing = row.iter().filter(|v| v.is_none()).count();
    if missing > 0 {
        return Err(MomentsError::MissingValues {
            row: matrix.perturbation_ids()[index].clone(),
            count: missing,
        });
    }
    let cells: Vec<f64> = row.iter().map(|v| v.expect("checked above")).collect();
    first_moment(&cells)
}

/// Row aggregates for every perturbation, in row order.
///
/// Fails on the first incomplete row; use [`ScoreMatrix::incomplete_rows`]
/// to list all of them.
pub fn aggregate_rows(matrix: &ScoreMatrix) -> Result<Vec<f64>, MomentsError> {
    (0..matrix.row_count())
        .map(|i| aggregate_row_at(matrix, i))
        .collect()
}

pub fn first_moment(scores: &[f64]) -> Result<f64, MomentsError> {
    if scores.is_empty() {
        return Err(MomentsError::EmptySample);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn second_moment(scores: &[f64]) -> Result<f64, MomentsError> {
    let mean = first_moment(scores)?;
    let sum_sq: f64 = scores.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok(sum_sq / scores.len() as f64)
}

/// Order statistics plus moments, for box plots and summary tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Summary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

pub fn summary(scores: &[f64]) -> Result<Summary, MomentsError> {
    if scores.is_empty() {
        return Err(MomentsError::EmptySample);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        count: sorted.len(),
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean: first_moment(scores)?,
        variance: second_moment(scores)?,
    })
}
