//! Test-time table perturbations: row addition, row permutation, column
//! permutation and cell replacement, with size-dependent magnitudes.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::QaExample;
use crate::table::{CellCoord, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    #[serde(rename = "ra")]
    RowAddition,
    #[serde(rename = "rp")]
    RowPermutation,
    #[serde(rename = "cp")]
    ColumnPermutation,
    #[serde(rename = "cr")]
    CellReplacement,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::RowAddition,
        PerturbationKind::RowPermutation,
        PerturbationKind::ColumnPermutation,
        PerturbationKind::CellReplacement,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PerturbationKind::RowAddition => "ra",
            PerturbationKind::RowPermutation => "rp",
            PerturbationKind::ColumnPermutation => "cp",
            PerturbationKind::CellReplacement => "cr",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn needs_donors(self) -> bool {
        matches!(self, PerturbationKind::RowAddition | PerturbationKind::CellReplacement)
    }
}

/// How the cell-replacement percentages are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementScale {
    /// 0.02, 0.05, 0.10, 0.12 of the cells.
    #[default]
    Fraction,
    /// 0.02%, 0.05%, 0.1%, 0.12% of the cells, still at least one.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
    #[serde(default)]
    pub scale: ReplacementScale,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PerturbError {
    #[error("no donor table with {0} columns")]
    NoCompatibleDonor(usize),
    #[error("donor pool is empty")]
    EmptyDonorPool,
    #[error("donor pool has no cell content different from cell {0}")]
    NoDistinctContent(CellCoord),
}

/// Magnitude bucket of a table with `m` cells.
pub fn magnitude_bucket(m: usize) -> usize {
    match m {
        0..=150 => 0,
        151..=300 => 1,
        301..=450 => 2,
        _ => 3,
    }
}

pub fn rows_to_add(m: usize) -> usize {
    [1, 2, 5, 8][magnitude_bucket(m)]
}

pub fn replacement_fraction(m: usize, scale: ReplacementScale) -> f64 {
    let f = [0.02, 0.05, 0.10, 0.12][magnitude_bucket(m)];
    match scale {
        ReplacementScale::Fraction => f,
        ReplacementScale::Literal => f / 100.0,
    }
}

pub fn cells_to_replace(m: usize, scale: ReplacementScale) -> usize {
    ((replacement_fraction(m, scale) * m as f64).round() as usize).max(1)
}

/// A perturbed table plus the maps back to the original.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub table: Table,
    /// Original data row (1-based) of each new data row; `None` if inserted.
    pub row_origin: Vec<Option<usize>>,
    /// Original column of each new column.
    pub col_origin: Vec<usize>,
    /// Replaced cells, in new coordinates.
    pub replaced: Vec<CellCoord>,
}

impl Perturbed {
    fn identity(table: Table) -> Self {
        Self {
            row_origin: (1..=table.n_rows()).map(Some).collect(),
            col_origin: (0..table.n_cols()).collect(),
            replaced: Vec::new(),
            table,
        }
    }

    /// Where an original cell ended up.
    pub fn map_cell(&self, orig: CellCoord) -> Option<CellCoord> {
        let col = self.col_origin.iter().position(|&c| c == orig.col)?;
        let row = if orig.row == 0 {
            0
        } else {
            self.row_origin.iter().position(|&r| r == Some(orig.row))? + 1
        };
        Some(CellCoord::new(row, col))
    }
}

fn rebuild(header: Vec<String>, rows: Vec<Vec<String>>) -> Table {
    Table::new(header, rows).expect("perturbations preserve table invariants")
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inserts one contiguous block of donor rows at a random position.
pub fn row_addition<R: Rng + ?Sized>(table: &Table, donors: &[Table], rng: &mut R) -> Result<Perturbed, PerturbError> {
    let n_cols = table.n_cols();
    let mut compatible: Vec<&Table> = donors.iter().filter(|d| d.n_cols() == n_cols && *d != table).collect();
    if compatible.is_empty() {
        return Err(PerturbError::NoCompatibleDonor(n_cols));
    }
    let n = rows_to_add(table.cell_count());
    compatible.shuffle(rng);
    let mut block: Vec<Vec<String>> = Vec::with_capacity(n);
    for donor in compatible.iter().cycle().take(compatible.len() * n) {
        if block.len() == n {
            break;
        }
        let take = (n - block.len()).min(donor.n_rows());
        for i in index::sample(rng, donor.n_rows(), take) {
            block.push(donor.rows()[i].clone());
        }
    }
    let at = rng.gen_range(0..=table.n_rows());
    let (header, mut rows) = table.clone().into_parts();
    let mut origin: Vec<Option<usize>> = (1..=rows.len()).map(Some).collect();
    rows.splice(at..at, block.iter().cloned());
    origin.splice(at..at, std::iter::repeat_n(None, block.len()));
    Ok(Perturbed {
        table: rebuild(header, rows),
        row_origin: origin,
        col_origin: (0..n_cols).collect(),
        replaced: Vec::new(),
    })
}

pub fn row_permutation<R: Rng + ?Sized>(table: &Table, rng: &mut R) -> Perturbed {
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    order.shuffle(rng);
    let rows = order.iter().map(|&i| table.rows()[i].clone()).collect();
    Perturbed {
        table: rebuild(table.header().to_vec(), rows),
        row_origin: order.iter().map(|&i| Some(i + 1)).collect(),
        col_origin: (0..table.n_cols()).collect(),
        replaced: Vec::new(),
    }
}

pub fn column_permutation<R: Rng + ?Sized>(table: &Table, rng: &mut R) -> Perturbed {
    let mut order: Vec<usize> = (0..table.n_cols()).collect();
    order.shuffle(rng);
    let pick = |row: &[String]| order.iter().map(|&c| row[c].clone()).collect::<Vec<_>>();
    Perturbed {
        table: rebuild(pick(table.header()), table.rows().iter().map(|r| pick(r)).collect()),
        row_origin: (1..=table.n_rows()).map(Some).collect(),
        col_origin: order,
        replaced: Vec::new(),
    }
}

/// Replaces `k` distinct data cells with differing content drawn from donor
/// data cells.
pub fn cell_replacement<R: Rng + ?Sized>(
    table: &Table,
    donors: &[Table],
    scale: ReplacementScale,
    rng: &mut R,
) -> Result<Perturbed, PerturbError> {
    let pool: Vec<&str> = donors
        .iter()
        .flat_map(|d| d.rows().iter().flatten().map(String::as_str))
        .collect();
    if pool.is_empty() {
        return Err(PerturbError::EmptyDonorPool);
    }
    let data_cells = table.n_rows() * table.n_cols();
    let k = cells_to_replace(table.cell_count(), scale).min(data_cells);
    let (header, mut rows) = table.clone().into_parts();
    let mut replaced = Vec::with_capacity(k);
    for flat in index::sample(rng, data_cells, k) {
        let at = CellCoord::new(flat / table.n_cols() + 1, flat % table.n_cols());
        let current = &rows[at.row - 1][at.col];
        let choices: Vec<&str> = pool.iter().copied().filter(|c| c != current).collect();
        let Some(new) = choices.choose(rng) else {
            return Err(PerturbError::NoDistinctContent(at));
        };
        rows[at.row - 1][at.col] = new.to_string();
        replaced.push(at);
    }
    replaced.sort();
    Ok(Perturbed {
        table: rebuild(header, rows),
        replaced,
        ..Perturbed::identity(table.clone())
    })
}

pub fn perturb_table<R: Rng + ?Sized>(
    table: &Table,
    spec: &PerturbationSpec,
    donors: &[Table],
    rng: &mut R,
) -> Result<Perturbed, PerturbError> {
    match spec.kind {
        PerturbationKind::RowAddition => row_addition(table, donors, rng),
        PerturbationKind::RowPermutation => Ok(row_permutation(table, rng)),
        PerturbationKind::ColumnPermutation => Ok(column_permutation(table, rng)),
        PerturbationKind::CellReplacement => cell_replacement(table, donors, spec.scale, rng),
    }
}

/// Perturbs an example's table, keeping question and answer, with gold cells
/// carried to their new coordinates. The stream is the example id.
pub fn perturb_example(ex: &QaExample, spec: &PerturbationSpec, donors: &[Table]) -> Result<QaExample, PerturbError> {
    let mut rng = rng_for(spec.seed, ex.id as u64);
    let p = perturb_table(&ex.table, spec, donors, &mut rng)?;
    let gold_cells = ex.gold_cells.iter().filter_map(|&c| p.map_cell(c)).collect();
    Ok(QaExample {
        table: p.table,
        gold_cells,
        ..ex.clone()
    })
}

/// `100 * (clean - perturbed) / clean`; `None` when `clean` is not positive.
pub fn relative_drop(clean: f64, perturbed: f64) -> Option<f64> {
    (clean > 0.0).then(|| 100.0 * (clean - perturbed) / clean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, tag: &str) -> Table {
        let header = (0..cols).map(|c| format!("h{c}")).collect();
        let rows = (0..rows)
            .map(|r| (0..cols).map(|c| format!("{tag}{r}x{c}")).collect())
            .collect();
        Table::new(header, rows).unwrap()
    }

    #[test]
    fn threshold_table() {
        assert_eq!(rows_to_add(150), 1);
        assert_eq!(rows_to_add(151), 2);
        assert_eq!(rows_to_add(300), 2);
        assert_eq!(rows_to_add(450), 5);
        assert_eq!(rows_to_add(451), 8);
        assert_eq!(cells_to_replace(100, ReplacementScale::Fraction), 2);
        assert_eq!(cells_to_replace(40, ReplacementScale::Fraction), 1);
        assert_eq!(cells_to_replace(1000, ReplacementScale::Fraction), 120);
        assert_eq!(cells_to_replace(400, ReplacementScale::Literal), 1);
    }

    #[test]
    fn row_addition_inserts_a_block() {
        let t = grid(3, 2, "a");
        let donors = [grid(5, 2, "d"), grid(4, 3, "x")];
        let p = row_addition(&t, &donors, &mut rng_for(1, 0)).unwrap();
        assert_eq!(p.table.n_rows(), 4);
        let orig: Vec<usize> = p.row_origin.iter().flatten().copied().collect();
        assert_eq!(orig, [1, 2, 3]);
        assert!(p.table.rows().iter().any(|r| r[0].starts_with('d')));
        assert_eq!(
            row_addition(&t, &donors[1..], &mut rng_for(1, 0)).unwrap_err(),
            PerturbError::NoCompatibleDonor(2)
        );
    }

    #[test]
    fn one_row_permutation_is_identity() {
        let t = grid(1, 3, "a");
        assert_eq!(row_permutation(&t, &mut rng_for(3, 0)).table, t);
    }

    #[test]
    fn relative_drop_examples() {
        assert_eq!(relative_drop(50.0, 45.0), Some(10.0));
        assert_eq!(relative_drop(50.0, 50.0), Some(0.0));
        assert_eq!(relative_drop(0.0, 10.0), None);
    }

    #[test]
    fn map_cell_follows_permutations() {
        let t = grid(4, 3, "a");
        let p = column_permutation(&t, &mut rng_for(5, 0));
        for r in 0..=4 {
            for c in 0..3 {
                let at = CellCoord::new(r, c);
                assert_eq!(p.table.cell(p.map_cell(at).unwrap()), t.cell(at));
            }
        }
    }
}
