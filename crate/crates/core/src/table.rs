//! Table data model and its flattening into a marked-up token sequence.
//!
//! A table `[year, score] / [2006, 38-12]` flattens to
//! `[HEAD]: year | score [ROW] 1: 2006 | 38-12`. Every token of the
//! flattened form is tagged either with the cell it came from or with the
//! marker it belongs to, which makes the flattening invertible.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{tokenize, Vocabulary};

pub const HEAD_MARKER: &str = "[HEAD]";
pub const ROW_MARKER: &str = "[ROW]";
pub const SEPARATOR: &str = "|";
pub const CELL_DELIMITER: &str = "||";

const RESERVED: [&str; 4] = [HEAD_MARKER, ROW_MARKER, CELL_DELIMITER, SEPARATOR];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("table must have at least one column and one data row")]
    Empty,
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("cell ({row}, {col}) contains reserved marker {marker:?}")]
    ReservedMarker { row: usize, col: usize, marker: &'static str },
    #[error("cell ({row}, {col}) has leading or trailing whitespace")]
    UntrimmedCell { row: usize, col: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StructureError {
    #[error("token {pos}: expected {expected}")]
    Unexpected { pos: usize, expected: &'static str },
    #[error("token {pos} is tagged with cell {found} but the marker structure implies {implied}")]
    CoordMismatch { pos: usize, found: CellCoord, implied: CellCoord },
    #[error("token map has {map} entries for {tokens} tokens")]
    LengthMismatch { map: usize, tokens: usize },
    #[error("rebuilt table is invalid: {0}")]
    Table(#[from] TableError),
}

/// Rectangular grid of cell strings with a header row.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;
    fn try_from(raw: RawTable) -> Result<Self, TableError> {
        Table::new(raw.header, raw.rows)
    }
}

impl From<Table> for RawTable {
    fn from(t: Table) -> Self {
        RawTable {
            header: t.header,
            rows: t.rows,
        }
    }
}

/// Cell position; row 0 is the header, data rows are `1..=n_rows`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCoord {
    pub row: usize,
    pub col: usize,
}

impl CellCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn is_header(&self) -> bool {
        self.row == 0
    }
}

impl fmt::Display for CellCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

fn check_cell(text: &str, row: usize, col: usize) -> Result<(), TableError> {
    for marker in RESERVED {
        if text.contains(marker) {
            return Err(TableError::ReservedMarker { row, col, marker });
        }
    }
    if text.trim() != text {
        return Err(TableError::UntrimmedCell { row, col });
    }
    Ok(())
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        if header.is_empty() || rows.is_empty() {
            return Err(TableError::Empty);
        }
        let n_col = header.len();
        for (c, h) in header.iter().enumerate() {
            check_cell(h, 0, c)?;
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_col {
                return Err(TableError::Ragged {
                    row: r + 1,
                    expected: n_col,
                    found: row.len(),
                });
            }
            for (c, cell) in row.iter().enumerate() {
                check_cell(cell, r + 1, c)?;
            }
        }
        Ok(Self { header, rows })
    }

    /// Convenience constructor from string slices.
    pub fn from_strs(header: &[&str], rows: &[&[&str]]) -> Result<Self, TableError> {
        Self::new(
            header.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    /// Number of cells including the header row.
    pub fn cell_count(&self) -> usize {
        (self.n_rows() + 1) * self.n_cols()
    }

    pub fn cell(&self, at: CellCoord) -> &str {
        if at.row == 0 {
            &self.header[at.col]
        } else {
            &self.rows[at.row - 1][at.col]
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Data-row coordinates of all cells in column `col`.
    pub fn column_coords(&self, col: usize) -> impl Iterator<Item = CellCoord> + '_ {
        (1..=self.n_rows()).map(move |r| CellCoord::new(r, col))
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<Vec<String>>) {
        (self.header, self.rows)
    }
}

/// Provenance of one table token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenTag {
    /// `[HEAD]` and its trailing colon.
    Head,
    /// `[ROW]`, the 1-based row number and its colon.
    Row(usize),
    Separator,
    Cell(CellCoord),
}

impl TokenTag {
    pub fn cell(&self) -> Option<CellCoord> {
        match self {
            TokenTag::Cell(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_marker(&self) -> bool {
        !matches!(self, TokenTag::Cell(_))
    }

    /// Short textual form used in score dumps: `h`, `r3`, `s`, `c1:2`.
    pub fn code(&self) -> String {
        match self {
            TokenTag::Head => "h".into(),
            TokenTag::Row(k) => format!("r{k}"),
            TokenTag::Separator => "s".into(),
            TokenTag::Cell(c) => format!("c{}:{}", c.row, c.col),
        }
    }
}

/// The table region of a model input.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedTable {
    pub tokens: Vec<u32>,
    pub token_cell_map: Vec<TokenTag>,
    pub flat_text: String,
    /// Byte range of each token inside `flat_text`.
    pub spans: Vec<Range<usize>>,
}

impl LinearizedTable {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_text(&self, i: usize) -> &str {
        &self.flat_text[self.spans[i].clone()]
    }

    /// Text of every cell, keyed by coordinate, rebuilt from token spans.
    pub fn cell_texts(&self) -> Vec<(CellCoord, String)> {
        let mut out: Vec<(CellCoord, Range<usize>)> = Vec::new();
        for (tag, span) in self.token_cell_map.iter().zip(&self.spans) {
            if let TokenTag::Cell(c) = tag {
                match out.last_mut() {
                    Some((last, r)) if last == c => r.end = span.end,
                    _ => out.push((*c, span.clone())),
                }
            }
        }
        out.into_iter()
            .map(|(c, r)| (c, self.flat_text[r].to_string()))
            .collect()
    }
}

/// Model input: question tokens followed by the table region.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    /// `|Q_tokens|`: the table region is `ids[boundary..]`.
    pub boundary: usize,
    pub table: LinearizedTable,
}

impl EncodedInput {
    pub fn table_len(&self) -> usize {
        self.ids.len() - self.boundary
    }
}

/// Flattens a table with `[HEAD]`/`[ROW] k:` markers and ` | ` separators.
pub fn flatten_table(table: &Table) -> String {
    let mut out = String::new();
    out.push_str(HEAD_MARKER);
    out.push_str(": ");
    out.push_str(&table.header.join(" | "));
    for (i, row) in table.rows.iter().enumerate() {
        out.push(' ');
        out.push_str(ROW_MARKER);
        out.push_str(&format!(" {}: ", i + 1));
        out.push_str(&row.join(" | "));
    }
    out
}

fn push_tokens(
    text: &str,
    tag: TokenTag,
    flat: &mut String,
    pieces: &mut Vec<(String, Range<usize>, TokenTag)>,
) {
    let base = flat.len();
    flat.push_str(text);
    for (tok, span) in tokenize(text) {
        pieces.push((tok, base + span.start..base + span.end, tag));
    }
}

/// Tokenizes the flattened table, tagging every token with its provenance.
pub fn linearize_table(table: &Table, vocab: &Vocabulary) -> LinearizedTable {
    let mut flat = String::new();
    let mut pieces = Vec::new();
    push_tokens(HEAD_MARKER, TokenTag::Head, &mut flat, &mut pieces);
    push_tokens(":", TokenTag::Head, &mut flat, &mut pieces);
    let emit_row = |cells: &[String], row: usize, flat: &mut String, pieces: &mut Vec<_>| {
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                flat.push(' ');
                push_tokens(SEPARATOR, TokenTag::Separator, flat, pieces);
            }
            flat.push(' ');
            push_tokens(cell, TokenTag::Cell(CellCoord::new(row, c)), flat, pieces);
        }
    };
    emit_row(&table.header, 0, &mut flat, &mut pieces);
    for (i, row) in table.rows.iter().enumerate() {
        let k = i + 1;
        flat.push(' ');
        push_tokens(ROW_MARKER, TokenTag::Row(k), &mut flat, &mut pieces);
        flat.push(' ');
        push_tokens(&format!("{k}:"), TokenTag::Row(k), &mut flat, &mut pieces);
        emit_row(row, k, &mut flat, &mut pieces);
    }
    debug_assert_eq!(flat, flatten_table(table));
    let mut tokens = Vec::with_capacity(pieces.len());
    let mut tags = Vec::with_capacity(pieces.len());
    let mut spans = Vec::with_capacity(pieces.len());
    for (tok, span, tag) in pieces {
        tokens.push(vocab.id(&tok));
        tags.push(tag);
        spans.push(span);
    }
    LinearizedTable {
        tokens,
        token_cell_map: tags,
        flat_text: flat,
        spans,
    }
}

/// Builds `I_tokens = (Q_tokens ; T_tokens)`; no separator token is inserted
/// between question and table.
pub fn tokenize_linearize(table: &Table, question: &str, vocab: &Vocabulary) -> EncodedInput {
    let q_ids = vocab.encode(question);
    let lin = linearize_table(table, vocab);
    let boundary = q_ids.len();
    let mut ids = q_ids;
    ids.extend_from_slice(&lin.tokens);
    EncodedInput {
        ids,
        boundary,
        table: lin,
    }
}

/// Inverse of [`linearize_table`], driven by the marker structure.
pub fn reconstruct_table(lin: &LinearizedTable) -> Result<Table, StructureError> {
    if lin.token_cell_map.len() != lin.tokens.len() || lin.spans.len() != lin.tokens.len() {
        return Err(StructureError::LengthMismatch {
            map: lin.token_cell_map.len(),
            tokens: lin.tokens.len(),
        });
    }
    let n = lin.tokens.len();
    let tag = |i: usize| lin.token_cell_map[i];
    let text = |i: usize| lin.token_text(i);

    let mut pos = 0;
    if n < 2 || text(0) != HEAD_MARKER || tag(0) != TokenTag::Head {
        return Err(StructureError::Unexpected { pos: 0, expected: "[HEAD]" });
    }
    if text(1) != ":" || tag(1) != TokenTag::Head {
        return Err(StructureError::Unexpected { pos: 1, expected: "':' after [HEAD]" });
    }
    pos += 2;

    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut row_idx = 0usize;
    loop {
        // One row: cells separated by separator tokens, until a row marker or the end.
        let mut cells = Vec::new();
        let mut col = 0usize;
        let mut cell_span: Option<Range<usize>> = None;
        while pos < n {
            match tag(pos) {
                TokenTag::Cell(c) => {
                    let implied = CellCoord::new(row_idx, col);
                    if c != implied {
                        return Err(StructureError::CoordMismatch { pos, found: c, implied });
                    }
                    let s = lin.spans[pos].clone();
                    cell_span = Some(match cell_span {
                        Some(r) => r.start..s.end,
                        None => s,
                    });
                    pos += 1;
                }
                TokenTag::Separator => {
                    cells.push(cell_span.take().map(|r| lin.flat_text[r].to_string()).unwrap_or_default());
                    col += 1;
                    pos += 1;
                }
                TokenTag::Row(_) => break,
                TokenTag::Head => {
                    return Err(StructureError::Unexpected { pos, expected: "cell, separator or [ROW]" })
                }
            }
        }
        cells.push(cell_span.take().map(|r| lin.flat_text[r].to_string()).unwrap_or_default());
        grid.push(cells);
        if pos >= n {
            break;
        }
        // Row marker: `[ROW]`, `k`, `:`.
        row_idx += 1;
        let expect_row = TokenTag::Row(row_idx);
        let k = row_idx.to_string();
        let ok = pos + 2 < n
            && tag(pos) == expect_row
            && text(pos) == ROW_MARKER
            && tag(pos + 1) == expect_row
            && text(pos + 1) == k
            && tag(pos + 2) == expect_row
            && text(pos + 2) == ":";
        if !ok {
            return Err(StructureError::Unexpected { pos, expected: "[ROW] k :" });
        }
        pos += 3;
    }
    let mut it = grid.into_iter();
    let header = it.next().unwrap_or_default();
    Ok(Table::new(header, it.collect())?)
}
