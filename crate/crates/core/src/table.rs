//! Memory-table factors: exemplar storage and opinion search over the stored
//! memories.

use thiserror::Error;

use crate::graph::Value;
use crate::kernels::{ColumnKernel, KernelError};

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("memory table has no rows")]
    Empty,
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("row {row} column {col}: cell kind differs from column kind")]
    MixedColumn { row: usize, col: usize },
    #[error("row index {index} out of range for table with {rows} rows")]
    OutOfRange { index: usize, rows: usize },
    #[error("{got} column summaries for a factor of width {expected}")]
    Width { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// An `L x n` array of variable values, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTable {
    n_cols: usize,
    cells: Vec<Value>,
}

impl MemoryTable {
    pub fn new(rows: Vec<Vec<Value>>) -> Result<Self, TableError> {
        let first = rows.first().ok_or(TableError::Empty)?;
        let n_cols = first.len();
        let mut cells = Vec::with_capacity(rows.len() * n_cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(TableError::Ragged {
                    row: r,
                    got: row.len(),
                    expected: n_cols,
                });
            }
            for (c, v) in row.iter().enumerate() {
                if !v.same_kind(&first[c]) {
                    return Err(TableError::MixedColumn { row: r, col: c });
                }
            }
            cells.extend_from_slice(row);
        }
        Ok(MemoryTable { n_cols, cells })
    }

    /// One-row table, the representation of an evidence factor.
    pub fn single(row: Vec<Value>) -> Self {
        MemoryTable {
            n_cols: row.len(),
            cells: row,
        }
    }

    pub fn n_rows(&self) -> usize {
        if self.n_cols == 0 {
            0
        } else {
            self.cells.len() / self.n_cols
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[Value] {
        &self.cells[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Value]> {
        self.cells.chunks_exact(self.n_cols.max(1))
    }

    pub fn cells(&self) -> &[Value] {
        &self.cells
    }

    /// Whether `vote` equals some row, seen through the optional column map.
    pub fn contains(&self, vote: &[Value], columns: Option<&[usize]>) -> bool {
        self.rows().any(|row| row_matches(row, columns, vote))
    }
}

fn project(row: &[Value], columns: Option<&[usize]>) -> Vec<Value> {
    match columns {
        Some(c) => c.iter().map(|&j| row[j]).collect(),
        None => row.to_vec(),
    }
}

fn row_matches(row: &[Value], columns: Option<&[usize]>, vote: &[Value]) -> bool {
    match columns {
        Some(c) => c.len() == vote.len() && c.iter().zip(vote).all(|(&j, v)| row[j] == *v),
        None => row == vote,
    }
}

/// Row `index` of the table as a full vote vector.
pub fn table_vote_row(
    table: &MemoryTable,
    columns: Option<&[usize]>,
    index: usize,
) -> Result<Vec<Value>, TableError> {
    if index >= table.n_rows() {
        return Err(TableError::OutOfRange {
            index,
            rows: table.n_rows(),
        });
    }
    Ok(project(table.row(index), columns))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableOpinion {
    pub opinion: Vec<Value>,
    /// Summed incremental cost of the opinion.
    pub cost: f64,
    /// Cost gap to the best distinct alternative; `+inf` when the table holds a
    /// single distinct memory.
    pub confidence: f64,
    pub satisfied: bool,
}

/// Opinion of a table factor given per-column kernels (one per neighbor, in
/// neighbor order).
pub fn table_opinion(
    table: &MemoryTable,
    columns: Option<&[usize]>,
    kernels: &[ColumnKernel],
    previous: Option<&[Value]>,
) -> Result<TableOpinion, TableError> {
    let width = columns.map_or(table.n_cols(), |c| c.len());
    if kernels.len() != width {
        return Err(TableError::Width {
            got: kernels.len(),
            expected: width,
        });
    }
    if table.n_rows() == 0 {
        return Err(TableError::Empty);
    }
    let row_cost = |row: &[Value]| -> Result<f64, KernelError> {
        let mut s = 0.0;
        match columns {
            Some(c) => {
                for (k, &j) in kernels.iter().zip(c) {
                    s += k.eval(&row[j])?;
                }
            }
            None => {
                for (k, v) in kernels.iter().zip(row) {
                    s += k.eval(v)?;
                }
            }
        }
        Ok(s)
    };
    let costs = table
        .rows()
        .map(row_cost)
        .collect::<Result<Vec<_>, _>>()?;

    let mut best = 0;
    for (r, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = r;
        }
    }
    let mut opinion = project(table.row(best), columns);
    let mut cost = costs[best];

    if let Some(prev) = previous {
        // stickiness: keep the current vote when it is among the optimizers
        let prev_cost = kernels
            .iter()
            .zip(prev)
            .map(|(k, v)| k.eval(v))
            .sum::<Result<f64, _>>()?;
        if prev_cost <= cost {
            opinion = prev.to_vec();
            cost = prev_cost;
        }
    }

    let mut second = f64::INFINITY;
    for (r, &c) in costs.iter().enumerate() {
        if c < second && !row_matches(table.row(r), columns, &opinion) {
            second = c;
        }
    }
    let confidence = if second.is_finite() {
        (second - cost).max(0.0)
    } else {
        f64::INFINITY
    };
    let satisfied = previous.is_some_and(|p| p == opinion.as_slice());
    Ok(TableOpinion {
        opinion,
        cost,
        confidence,
        satisfied,
    })
}
