//! Synthetic table-QA tasks with gold answers, gold cells and template
//! parsing statements.
//!
//! Every example is generated from its own ChaCha stream (`seed`, index), so
//! datasets can be sharded by index range without changing their contents.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{CellCoord, Table};

pub const DATASET_SCHEMA: &str = "tabrel.dataset";
pub const DATASET_VERSION: u32 = 1;

/// Upper cell-count edges of the six size bins; the last bin is open.
pub const SIZE_BIN_EDGES: [usize; 5] = [25, 50, 100, 200, 500];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Lookup,
    Count,
    ArgmaxLookup,
    Comparison,
    Sum,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Lookup,
        TaskKind::Count,
        TaskKind::ArgmaxLookup,
        TaskKind::Comparison,
        TaskKind::Sum,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Numericity {
    Numeric,
    NonNumeric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    Retrieval,
    Aggregation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnswerType {
    pub numericity: Numericity,
    pub operation: Operation,
}

/// Structured criteria behind a question, by column name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Criteria {
    Lookup { key: String, value: String, target: String },
    Count { column: String, value: String },
    ArgmaxLookup { key: String, number: String },
    Comparison { key: String, number: String, a: String, b: String },
    Sum { column: String, value: String, number: String },
}

impl Criteria {
    pub fn kind(&self) -> TaskKind {
        match self {
            Criteria::Lookup { .. } => TaskKind::Lookup,
            Criteria::Count { .. } => TaskKind::Count,
            Criteria::ArgmaxLookup { .. } => TaskKind::ArgmaxLookup,
            Criteria::Comparison { .. } => TaskKind::Comparison,
            Criteria::Sum { .. } => TaskKind::Sum,
        }
    }

    /// Every column the criteria refer to.
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Criteria::Lookup { key, target, .. } => vec![key, target],
            Criteria::Count { column, .. } => vec![column],
            Criteria::ArgmaxLookup { key, number } => vec![key, number],
            Criteria::Comparison { key, number, .. } => vec![key, number],
            Criteria::Sum { column, number, .. } => vec![column, number],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: usize,
    pub table: Table,
    pub question: String,
    pub answer: String,
    pub gold_cells: BTreeSet<CellCoord>,
    pub parsing_statement: String,
    pub answer_type: AnswerType,
    pub task_kind: TaskKind,
    pub criteria: Criteria,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    /// Unique per row; identifies rows in questions.
    Key,
    /// Small closed set of repeated values.
    Category,
    /// Integers in `range`.
    Number,
    /// Free-form strings, e.g. game scores.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnPool {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub values: Vec<String>,
    /// Inclusive integer range for `Number` columns.
    #[serde(default)]
    pub range: (i64, i64),
}

impl ColumnPool {
    fn listed(name: &str, kind: ColumnKind, values: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            kind,
            values,
            range: (0, 0),
        }
    }

    fn number(name: &str, lo: i64, hi: i64) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Number,
            values: Vec::new(),
            range: (lo, hi),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self.kind {
            ColumnKind::Number => rng.gen_range(self.range.0..=self.range.1).to_string(),
            _ => self.values.choose(rng).cloned().unwrap_or_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub lookup: f64,
    pub count: f64,
    pub argmax_lookup: f64,
    pub comparison: f64,
    pub sum: f64,
}

impl TaskWeights {
    pub fn only(kind: TaskKind) -> Self {
        let mut w = Self {
            lookup: 0.0,
            count: 0.0,
            argmax_lookup: 0.0,
            comparison: 0.0,
            sum: 0.0,
        };
        *w.get_mut(kind) = 1.0;
        w
    }

    pub fn get(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Lookup => self.lookup,
            TaskKind::Count => self.count,
            TaskKind::ArgmaxLookup => self.argmax_lookup,
            TaskKind::Comparison => self.comparison,
            TaskKind::Sum => self.sum,
        }
    }

    fn get_mut(&mut self, kind: TaskKind) -> &mut f64 {
        match kind {
            TaskKind::Lookup => &mut self.lookup,
            TaskKind::Count => &mut self.count,
            TaskKind::ArgmaxLookup => &mut self.argmax_lookup,
            TaskKind::Comparison => &mut self.comparison,
            TaskKind::Sum => &mut self.sum,
        }
    }
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            lookup: 0.4,
            count: 0.2,
            argmax_lookup: 0.15,
            comparison: 0.15,
            sum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub pools: Vec<ColumnPool>,
    /// Fraction of non-gold rows that copy the gold row's values outside the
    /// criteria columns.
    pub distractor_fraction: f64,
    pub weights: TaskWeights,
    pub seed: u64,
}

/// Two-syllable names; every combination is a distinct single token.
fn syllable_names(first: &[&str], second: &[&str]) -> Vec<String> {
    first
        .iter()
        .flat_map(|a| second.iter().map(move |b| format!("{a}{b}")))
        .collect()
}

pub fn default_pools() -> Vec<ColumnPool> {
    let words = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut scores = Vec::new();
    for a in (0..50).step_by(7) {
        for b in (0..40).step_by(6) {
            scores.push(format!("{a}-{b}"));
        }
    }
    vec![
        ColumnPool::listed(
            "player",
            ColumnKind::Key,
            syllable_names(
                &["ka", "lo", "mi", "ra", "to", "ve", "zu", "be", "do", "fi"],
                &["ren", "mar", "sol", "tin", "vak", "dul", "pex", "gom", "lir", "nos"],
            ),
        ),
        ColumnPool::listed(
            "team",
            ColumnKind::Key,
            syllable_names(
                &["north", "east", "west", "south", "red", "blue", "gold", "iron", "storm", "river"],
                &["hawks", "wolves", "lions", "bears", "foxes", "owls", "sharks", "bulls", "rams", "jets"],
            ),
        ),
        ColumnPool::listed("result", ColumnKind::Category, words(&["win", "loss", "draw"])),
        ColumnPool::listed("tv", ColumnKind::Category, words(&["cbs", "nbc", "fox", "espn", "abc"])),
        ColumnPool::listed("venue", ColumnKind::Category, words(&["home", "away", "neutral"])),
        ColumnPool::listed(
            "conference",
            ColumnKind::Category,
            words(&["east", "west", "north", "south"]),
        ),
        ColumnPool::number("points", 0, 99),
        ColumnPool::number("goals", 0, 30),
        ColumnPool::number("year", 1990, 2023),
        ColumnPool::number("rank", 1, 60),
        ColumnPool::listed("score", ColumnKind::Text, scores),
    ]
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_rows: 2,
            max_rows: 70,
            min_cols: 3,
            max_cols: 7,
            pools: default_pools(),
            distractor_fraction: 0.2,
            weights: TaskWeights::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.min_rows == 0 || self.min_rows > self.max_rows {
            return err(format!("row range {}..={} is empty or starts at 0", self.min_rows, self.max_rows));
        }
        if self.min_cols < 3 || self.min_cols > self.max_cols {
            return err(format!(
                "column range {}..={} must be non-empty and start at 3 or more",
                self.min_cols, self.max_cols
            ));
        }
        if self.max_cols > self.pools.len() {
            return err(format!("max_cols {} exceeds the {} column pools", self.max_cols, self.pools.len()));
        }
        let names: BTreeSet<&str> = self.pools.iter().map(|p| p.name.as_str()).collect();
        if names.len() != self.pools.len() {
            return err("column pool names must be distinct".into());
        }
        for kind in [ColumnKind::Key, ColumnKind::Category, ColumnKind::Number] {
            if !self.pools.iter().any(|p| p.kind == kind) {
                return err(format!("no {kind:?} column pool"));
            }
        }
        for p in &self.pools {
            match p.kind {
                ColumnKind::Key if p.values.iter().collect::<BTreeSet<_>>().len() < self.max_rows => {
                    return err(format!("key pool {} has fewer than max_rows distinct values", p.name));
                }
                ColumnKind::Number if p.range.0 > p.range.1 => {
                    return err(format!("number pool {} has an empty range", p.name));
                }
                ColumnKind::Category | ColumnKind::Text if p.values.is_empty() => {
                    return err(format!("pool {} has no values", p.name));
                }
                _ => {}
            }
        }
        let w = TaskKind::ALL.map(|k| self.weights.get(k));
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return err("task weights must be finite and non-negative".into());
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err("task weights must sum to 1".into());
        }
        let needs_two = self.weights.argmax_lookup > 0.0 || self.weights.comparison > 0.0;
        if needs_two && self.min_rows < 2 {
            return err("argmax and comparison tasks need at least 2 rows".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return err("distractor_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Size bin of a table by cell count `(N_row + 1) * N_col`.
pub fn size_bin(table: &Table) -> usize {
    size_bin_for_cells(table.cell_count())
}

pub fn size_bin_for_cells(cells: usize) -> usize {
    SIZE_BIN_EDGES.iter().position(|&e| cells <= e).unwrap_or(SIZE_BIN_EDGES.len())
}

pub fn parse_number(s: &str) -> Option<i64> {
    s.trim().parse().ok()
}

/// Template criteria statement naming every criteria column and value.
pub fn make_parsing_statement(criteria: &Criteria) -> String {
    let lead = "to find the answer, look at the column";
    match criteria {
        Criteria::Lookup { key, value, target } => {
            format!("{lead} {key} for the rows with value {value} and read the column {target}")
        }
        Criteria::Count { column, value } => format!("{lead} {column} and count rows with value {value}"),
        Criteria::ArgmaxLookup { key, number } => {
            format!("{lead}s {key} and {number} and find the highest {number}")
        }
        Criteria::Comparison { key, number, a, b } => {
            format!("{lead} {key} for the rows with value {a} or {b} and compare the column {number}")
        }
        Criteria::Sum { column, value, number } => {
            format!("{lead} {column} for the rows with value {value} and add the column {number}")
        }
    }
}

pub fn make_question(criteria: &Criteria) -> String {
    match criteria {
        Criteria::Lookup { key, value, target } => format!("what is the {target} when {key} is {value}?"),
        Criteria::Count { column, value } => format!("how many rows have {column} {value}?"),
        Criteria::ArgmaxLookup { key, number } => format!("which {key} has the highest {number}?"),
        Criteria::Comparison { key, number, a, b } => format!("which {key} has more {number}, {a} or {b}?"),
        Criteria::Sum { column, value, number } => format!("what is the total {number} when {column} is {value}?"),
    }
}

fn col(table: &Table, name: &str) -> Option<usize> {
    table.column_index(name)
}

fn rows_where<'a>(table: &'a Table, c: usize, values: &'a [&str]) -> impl Iterator<Item = usize> + 'a {
    (1..=table.n_rows()).filter(move |&r| values.contains(&table.cell(CellCoord::new(r, c))))
}

fn number_at(table: &Table, r: usize, c: usize) -> Option<i64> {
    parse_number(table.cell(CellCoord::new(r, c)))
}

/// The answer and gold cells of `criteria` on `table`, by scanning the whole
/// table. `None` when the criteria have no well-defined answer.
pub fn solve(table: &Table, criteria: &Criteria) -> Option<(String, BTreeSet<CellCoord>)> {
    match criteria {
        Criteria::Lookup { key, value, target } => {
            let (k, t) = (col(table, key)?, col(table, target)?);
            let rows: Vec<usize> = rows_where(table, k, &[value]).collect();
            let [r] = rows[..] else { return None };
            let at = CellCoord::new(r, t);
            Some((table.cell(at).to_string(), BTreeSet::from([at])))
        }
        Criteria::Count { column, value } => {
            let c = col(table, column)?;
            let gold: BTreeSet<CellCoord> = rows_where(table, c, &[value]).map(|r| CellCoord::new(r, c)).collect();
            (!gold.is_empty()).then(|| (gold.len().to_string(), gold))
        }
        Criteria::ArgmaxLookup { key, number } => {
            let (k, n) = (col(table, key)?, col(table, number)?);
            let vals: Vec<(usize, i64)> = (1..=table.n_rows())
                .map(|r| number_at(table, r, n).map(|v| (r, v)))
                .collect::<Option<_>>()?;
            let best = vals.iter().map(|x| x.1).max()?;
            let top: Vec<usize> = vals.iter().filter(|x| x.1 == best).map(|x| x.0).collect();
            let [r] = top[..] else { return None };
            let answer = table.cell(CellCoord::new(r, k)).to_string();
            Some((answer, BTreeSet::from([CellCoord::new(r, k), CellCoord::new(r, n)])))
        }
        Criteria::Comparison { key, number, a, b } => {
            let (k, n) = (col(table, key)?, col(table, number)?);
            let find = |v: &str| {
                let rows: Vec<usize> = rows_where(table, k, &[v]).collect();
                match rows[..] {
                    [r] => Some(r),
                    _ => None,
                }
            };
            let (ra, rb) = (find(a)?, find(b)?);
            let (va, vb) = (number_at(table, ra, n)?, number_at(table, rb, n)?);
            if va == vb || ra == rb {
                return None;
            }
            let winner = if va > vb { a } else { b };
            let gold = [ra, rb]
                .into_iter()
                .flat_map(|r| [CellCoord::new(r, k), CellCoord::new(r, n)])
                .collect();
            Some((winner.clone(), gold))
        }
        Criteria::Sum { column, value, number } => {
            let (c, n) = (col(table, column)?, col(table, number)?);
            let rows: Vec<usize> = rows_where(table, c, &[value]).collect();
            if rows.is_empty() {
                return None;
            }
            let total: i64 = rows.iter().map(|&r| number_at(table, r, n)).sum::<Option<i64>>()?;
            Some((total.to_string(), rows.into_iter().map(|r| CellCoord::new(r, n)).collect()))
        }
    }
}

/// Recomputes the answer from the gold cells alone.
pub fn interpret_gold(table: &Table, criteria: &Criteria, gold: &BTreeSet<CellCoord>) -> Option<String> {
    let text = |c: &CellCoord| table.cell(*c).to_string();
    match criteria {
        Criteria::Lookup { .. } => {
            let mut it = gold.iter();
            let only = it.next()?;
            it.next().is_none().then(|| text(only))
        }
        Criteria::Count { .. } => Some(gold.len().to_string()),
        Criteria::ArgmaxLookup { key, number } | Criteria::Comparison { key, number, .. } => {
            let (k, n) = (col(table, key)?, col(table, number)?);
            let rows: BTreeSet<usize> = gold.iter().map(|c| c.row).collect();
            let best = rows
                .iter()
                .filter(|&&r| gold.contains(&CellCoord::new(r, n)) && gold.contains(&CellCoord::new(r, k)))
                .max_by_key(|&&r| number_at(table, r, n))?;
            Some(table.cell(CellCoord::new(*best, k)).to_string())
        }
        Criteria::Sum { .. } => gold
            .iter()
            .map(|c| parse_number(table.cell(*c)))
            .sum::<Option<i64>>()
            .map(|t| t.to_string()),
    }
}

fn answer_type(table: &Table, criteria: &Criteria, answer: &str) -> AnswerType {
    let operation = match criteria.kind() {
        TaskKind::Count | TaskKind::Sum => Operation::Aggregation,
        _ => Operation::Retrieval,
    };
    let numeric = match criteria {
        Criteria::Lookup { target, .. } => col(table, target)
            .map(|t| (1..=table.n_rows()).all(|r| number_at(table, r, t).is_some()))
            .unwrap_or(false),
        Criteria::Count { .. } | Criteria::Sum { .. } => true,
        _ => parse_number(answer).is_some(),
    };
    AnswerType {
        numericity: if numeric { Numericity::Numeric } else { Numericity::NonNumeric },
        operation,
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn pick_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for k in TaskKind::ALL {
            acc += self.cfg.weights.get(k);
            if x < acc {
                return k;
            }
        }
        *TaskKind::ALL
            .iter()
            .rev()
            .find(|&&k| self.cfg.weights.get(k) > 0.0)
            .expect("validated weights")
    }

    /// Example `index` of the dataset; independent of every other index.
    pub fn example(&self, index: usize) -> QaExample {
        let mut rng = self.rng_for(index);
        let kind = self.pick_kind(&mut rng);
        // Rejection loop: resample until the criteria have a unique answer.
        for _ in 0..1000 {
            if let Some(ex) = self.try_example(index, kind, &mut rng) {
                return ex;
            }
        }
        panic!("generator failed to produce a {kind:?} example after 1000 attempts");
    }

    pub fn generate(&self, n: usize) -> Vec<QaExample> {
        (0..n).map(|i| self.example(i)).collect()
    }

    fn try_example(&self, id: usize, kind: TaskKind, rng: &mut ChaCha8Rng) -> Option<QaExample> {
        let cfg = &self.cfg;
        let n_rows = rng.gen_range(cfg.min_rows..=cfg.max_rows);
        let n_cols = rng.gen_range(cfg.min_cols..=cfg.max_cols);
        let of_kind = |k: ColumnKind| cfg.pools.iter().filter(move |p| p.kind == k).collect::<Vec<_>>();
        let key = *of_kind(ColumnKind::Key).choose(rng)?;
        let cat = *of_kind(ColumnKind::Category).choose(rng)?;
        let num = *of_kind(ColumnKind::Number).choose(rng)?;
        let mut chosen = vec![key, cat, num];
        let mut rest: Vec<&ColumnPool> = cfg
            .pools
            .iter()
            .filter(|p| p.kind != ColumnKind::Key && !chosen.iter().any(|c| c.name == p.name))
            .collect();
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(n_cols.saturating_sub(3)));
        chosen.shuffle(rng);

        let mut keys = key.values.clone();
        keys.shuffle(rng);
        let mut rows: Vec<Vec<String>> = (0..n_rows)
            .map(|r| {
                chosen
                    .iter()
                    .map(|p| if p.kind == ColumnKind::Key { keys[r].clone() } else { p.draw(rng) })
                    .collect()
            })
            .collect();
        let ci = |p: &ColumnPool| chosen.iter().position(|c| c.name == p.name).expect("chosen column");
        let (kc, cc) = (ci(key), ci(cat));

        let pick_row = |rng: &mut ChaCha8Rng| rng.gen_range(0..n_rows);
        let criteria = match kind {
            TaskKind::Lookup => {
                let r = pick_row(rng);
                let targets: Vec<usize> = (0..chosen.len()).filter(|&c| c != kc).collect();
                let t = *targets.choose(rng)?;
                Criteria::Lookup {
                    key: key.name.clone(),
                    value: rows[r][kc].clone(),
                    target: chosen[t].name.clone(),
                }
            }
            TaskKind::Count => Criteria::Count {
                column: cat.name.clone(),
                value: rows[pick_row(rng)][cc].clone(),
            },
            TaskKind::ArgmaxLookup => Criteria::ArgmaxLookup {
                key: key.name.clone(),
                number: num.name.clone(),
            },
            TaskKind::Comparison => {
                if n_rows < 2 {
                    return None;
                }
                let pair: Vec<usize> = rand::seq::index::sample(rng, n_rows, 2).into_vec();
                Criteria::Comparison {
                    key: key.name.clone(),
                    number: num.name.clone(),
                    a: rows[pair[0]][kc].clone(),
                    b: rows[pair[1]][kc].clone(),
                }
            }
            TaskKind::Sum => Criteria::Sum {
                column: cat.name.clone(),
                value: rows[pick_row(rng)][cc].clone(),
                number: num.name.clone(),
            },
        };

        // Near-miss distractors: copy the gold row outside the criteria columns.
        let criteria_cols: Vec<usize> = criteria
            .columns()
            .iter()
            .filter_map(|n| chosen.iter().position(|c| c.name == *n))
            .chain([kc])
            .collect();
        let table = Table::new(chosen.iter().map(|p| p.name.clone()).collect(), rows.clone()).ok()?;
        let (_, gold) = solve(&table, &criteria)?;
        if let Some(g) = gold.iter().next() {
            let source = rows[g.row - 1].clone();
            for r in 0..n_rows {
                if gold.iter().any(|c| c.row == r + 1) || !rng.gen_bool(cfg.distractor_fraction) {
                    continue;
                }
                for (c, v) in source.iter().enumerate() {
                    if !criteria_cols.contains(&c) {
                        rows[r][c] = v.clone();
                    }
                }
            }
        }
        let table = Table::new(chosen.iter().map(|p| p.name.clone()).collect(), rows).ok()?;
        let (answer, gold_cells) = solve(&table, &criteria)?;
        let answer_type = answer_type(&table, &criteria, &answer);
        Some(QaExample {
            id,
            question: make_question(&criteria),
            parsing_statement: make_parsing_statement(&criteria),
            answer,
            gold_cells,
            answer_type,
            task_kind: kind,
            criteria,
            table,
        })
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig, n: usize) -> Result<Vec<QaExample>, SynthError> {
    if n == 0 {
        return Err(SynthError::Config("n must be at least 1".into()));
    }
    Ok(Generator::new(cfg.clone())?.generate(n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub count: usize,
    pub generator: Option<GeneratorConfig>,
}

pub fn write_dataset<W: Write>(
    mut out: W,
    examples: &[QaExample],
    generator: Option<&GeneratorConfig>,
) -> Result<(), SynthError> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        count: examples.len(),
        generator: generator.cloned(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<QaExample>), SynthError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| SynthError::Format("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(SynthError::Format(format!(
            "unsupported dataset header {} v{}",
            header.schema, header.version
        )));
    }
    let mut examples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    if examples.len() != header.count {
        return Err(SynthError::Format(format!(
            "header announces {} examples, found {}",
            header.count,
            examples.len()
        )));
    }
    Ok((header, examples))
}
