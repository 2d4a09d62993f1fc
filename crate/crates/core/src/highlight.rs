//! Deterministic cell highlighting from template parsing statements, and
//! binary cell scores by exact content match.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::table::{CellCoord, LinearizedTable, Table, TokenTag, CELL_DELIMITER};

/// Which cells a statement (or question) asks for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Rows whose `column` holds one of `values`; emits the predicate cell and
    /// the `read` cells of each such row.
    Rows {
        column: String,
        values: Vec<String>,
        read: Vec<String>,
    },
    /// Whole columns, row by row.
    Columns(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighlightResult {
    pub highlighted: Vec<String>,
    pub matched_coords: BTreeSet<CellCoord>,
    pub eta_cell: Vec<f64>,
}

impl HighlightResult {
    /// Highlighted strings joined by the cell delimiter.
    pub fn joined(&self) -> String {
        self.highlighted.join(&format!(" {CELL_DELIMITER} "))
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Patterns {
    rows: Regex,
    count: Regex,
    columns: Regex,
    q_sum: Regex,
    q_lookup: Regex,
    q_count: Regex,
    q_argmax: Regex,
    q_compare: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| {
        let re = |s: &str| Regex::new(s).expect("static pattern");
        Patterns {
            rows: re(r"^to find the answer, look at the column (.+?) for the rows? with value (.+?)(?: or (.+?))? and (?:read|compare|add) the column (.+)$"),
            count: re(r"^to find the answer, look at the column (.+?) and count rows with value (.+)$"),
            columns: re(r"^to find the answer, look at the columns (.+?) and (.+?) and find the highest (.+)$"),
            q_sum: re(r"^what is the total (.+?) when (.+?) is (.+?)\s*\?$"),
            q_lookup: re(r"^what is the (.+?) when (.+?) is (.+?)\s*\?$"),
            q_count: re(r"^how many rows have (.+?)\s*\?$"),
            q_argmax: re(r"^which (.+?) has the highest (.+?)\s*\?$"),
            q_compare: re(r"^which (.+?) has more (.+?), (.+?) or (.+?)\s*\?$"),
        }
    })
}

/// Parses a template parsing statement; `None` if it follows no template.
pub fn parse_statement(statement: &str) -> Option<Selection> {
    let s = normalize(statement);
    let p = patterns();
    if let Some(c) = p.rows.captures(&s) {
        let mut values = vec![c[2].to_string()];
        if let Some(b) = c.get(3) {
            values.push(b.as_str().to_string());
        }
        return Some(Selection::Rows {
            column: c[1].to_string(),
            values,
            read: vec![c[4].to_string()],
        });
    }
    if let Some(c) = p.count.captures(&s) {
        return Some(Selection::Rows {
            column: c[1].to_string(),
            values: vec![c[2].to_string()],
            read: Vec::new(),
        });
    }
    if let Some(c) = p.columns.captures(&s) {
        return Some(Selection::Columns(vec![c[1].to_string(), c[2].to_string()]));
    }
    None
}

/// Reads the same criteria straight from a question; column names are
/// resolved against the table header where the phrasing is ambiguous.
pub fn parse_question(question: &str, table: &Table) -> Option<Selection> {
    let q = normalize(question);
    let p = patterns();
    if let Some(c) = p.q_sum.captures(&q) {
        return Some(Selection::Rows {
            column: c[2].to_string(),
            values: vec![c[3].to_string()],
            read: vec![c[1].to_string()],
        });
    }
    if let Some(c) = p.q_lookup.captures(&q) {
        return Some(Selection::Rows {
            column: c[2].to_string(),
            values: vec![c[3].to_string()],
            read: vec![c[1].to_string()],
        });
    }
    if let Some(c) = p.q_compare.captures(&q) {
        return Some(Selection::Rows {
            column: c[1].to_string(),
            values: vec![c[3].to_string(), c[4].to_string()],
            read: vec![c[2].to_string()],
        });
    }
    if let Some(c) = p.q_argmax.captures(&q) {
        return Some(Selection::Columns(vec![c[1].to_string(), c[2].to_string()]));
    }
    if let Some(c) = p.q_count.captures(&q) {
        let rest = &c[1];
        let column = table
            .header()
            .iter()
            .filter(|h| rest.starts_with(&format!("{} ", normalize(h))))
            .max_by_key(|h| h.len())?;
        let value = rest[normalize(column).len() + 1..].to_string();
        return Some(Selection::Rows {
            column: column.clone(),
            values: vec![value],
            read: Vec::new(),
        });
    }
    None
}

fn find_column(table: &Table, name: &str) -> Option<usize> {
    let n = normalize(name);
    let found = table.header().iter().position(|h| normalize(h) == n);
    if found.is_none() {
        log::warn!("statement names column {name:?}, which the table does not have");
    }
    found
}

/// Cells selected by `sel`, in row-major order. A missing column yields an
/// empty selection.
pub fn select_cells(table: &Table, sel: &Selection) -> Vec<CellCoord> {
    match sel {
        Selection::Rows { column, values, read } => {
            let Some(c) = find_column(table, column) else { return Vec::new() };
            let Some(read) = read.iter().map(|r| find_column(table, r)).collect::<Option<Vec<_>>>() else {
                return Vec::new();
            };
            let mut cols: Vec<usize> = read;
            cols.push(c);
            cols.sort_unstable();
            cols.dedup();
            let values: Vec<String> = values.iter().map(|v| normalize(v)).collect();
            (1..=table.n_rows())
                .filter(|&r| values.contains(&normalize(table.cell(CellCoord::new(r, c)))))
                .flat_map(|r| cols.iter().map(move |&k| CellCoord::new(r, k)))
                .collect()
        }
        Selection::Columns(names) => {
            let Some(mut cols) = names.iter().map(|n| find_column(table, n)).collect::<Option<Vec<_>>>() else {
                return Vec::new();
            };
            cols.sort_unstable();
            cols.dedup();
            (1..=table.n_rows())
                .flat_map(|r| cols.iter().map(move |&k| CellCoord::new(r, k)))
                .collect()
        }
    }
}

fn strings_of(table: &Table, coords: &[CellCoord]) -> Vec<String> {
    coords.iter().map(|&c| normalize(table.cell(c))).collect()
}

/// Contents of every cell satisfying the statement's criteria; empty when
/// the statement is unparseable or names a missing column.
pub fn highlight_cells(table: &Table, statement: &str) -> Vec<String> {
    match parse_statement(statement) {
        Some(sel) => strings_of(table, &select_cells(table, &sel)),
        None => {
            log::warn!("statement follows no known template: {statement:?}");
            Vec::new()
        }
    }
}

/// Highlighting driven by the raw question instead of a statement.
pub fn highlight_cells_from_question(table: &Table, question: &str) -> Vec<String> {
    match parse_question(question, table) {
        Some(sel) => strings_of(table, &select_cells(table, &sel)),
        None => Vec::new(),
    }
}

/// Data cells whose full content equals some highlighted string.
pub fn matched_coords(table: &Table, highlighted: &[String]) -> BTreeSet<CellCoord> {
    let wanted: BTreeSet<String> = highlighted.iter().map(|h| normalize(h)).filter(|h| !h.is_empty()).collect();
    (1..=table.n_rows())
        .flat_map(|r| (0..table.n_cols()).map(move |c| CellCoord::new(r, c)))
        .filter(|&c| wanted.contains(&normalize(table.cell(c))))
        .collect()
}

/// 1 on every token of a data cell whose content exactly matches a
/// highlighted string, 0 elsewhere (markers and header cells included).
pub fn assign_cell_scores(lin: &LinearizedTable, highlighted: &[String]) -> Vec<f64> {
    let wanted: BTreeSet<String> = highlighted.iter().map(|h| normalize(h)).filter(|h| !h.is_empty()).collect();
    if wanted.is_empty() {
        return vec![0.0; lin.len()];
    }
    let hits: BTreeSet<CellCoord> = lin
        .cell_texts()
        .into_iter()
        .filter(|(c, text)| !c.is_header() && wanted.contains(&normalize(text)))
        .map(|(c, _)| c)
        .collect();
    lin.token_cell_map
        .iter()
        .map(|tag| match tag {
            TokenTag::Cell(c) if hits.contains(c) => 1.0,
            _ => 0.0,
        })
        .collect()
}

pub fn highlight(table: &Table, lin: &LinearizedTable, statement: &str) -> HighlightResult {
    let highlighted = highlight_cells(table, statement);
    finish(table, lin, highlighted)
}

pub fn highlight_question(table: &Table, lin: &LinearizedTable, question: &str) -> HighlightResult {
    let highlighted = highlight_cells_from_question(table, question);
    finish(table, lin, highlighted)
}

fn finish(table: &Table, lin: &LinearizedTable, highlighted: Vec<String>) -> HighlightResult {
    HighlightResult {
        matched_coords: matched_coords(table, &highlighted),
        eta_cell: assign_cell_scores(lin, &highlighted),
        highlighted,
    }
}

/// One row of the highlighter audit dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub example_id: usize,
    pub statement: String,
    pub highlighted: Vec<String>,
    pub matched_coords: Vec<CellCoord>,
}
