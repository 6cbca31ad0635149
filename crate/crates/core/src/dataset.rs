//! Abundance matrices, design matrices and the complete/missing/discarded split.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Delimited text flavour of an input or output table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Tsv,
    Csv,
}

impl TableFormat {
    /// `.csv` maps to CSV, everything else to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => TableFormat::Csv,
            _ => TableFormat::Tsv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            TableFormat::Tsv => b'\t',
            TableFormat::Csv => b',',
        }
    }
}

/// A labelled numeric table as read from disk; `None` marks a missing cell.
#[derive(Debug, Clone)]
pub(crate) struct LabeledTable {
    pub col_ids: Vec<String>,
    pub row_ids: Vec<String>,
    pub cells: Vec<Option<f64>>,
}

fn parse_err(path: &Path, line: usize, column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column,
        msg: msg.into(),
    }
}

fn check_unique(ids: &[String], kind: &'static str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { kind, id: id.clone() });
        }
    }
    Ok(())
}

pub(crate) fn read_table(path: &Path, format: TableFormat, row_kind: &'static str, col_kind: &'static str) -> Result<LabeledTable> {
    let file = std::fs::File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let mut header: Option<Vec<String>> = None;
    let mut row_ids = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_err(
                    path,
                    line,
                    (*len as usize).min(*expected_len as usize) + 1,
                    format!("ragged row: expected {expected_len} fields, found {len}"),
                ),
                _ => parse_err(path, line, 0, e.to_string()),
            }
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if header.is_none() {
            if rec.len() < 2 {
                return Err(parse_err(path, line, 1, "header needs an id column and at least one data column"));
            }
            header = Some(rec.iter().map(str::to_owned).collect());
            continue;
        }
        row_ids.push(rec[0].to_owned());
        for (j, field) in rec.iter().enumerate().skip(1) {
            if field.is_empty() || field == "NA" {
                cells.push(None);
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => cells.push(Some(v)),
                _ => {
                    return Err(parse_err(path, line, j + 1, format!("non-numeric value `{field}`")));
                }
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(path, 1, 1, "empty table"))?;
    let mut header = header.into_iter();
    header.next();
    let col_ids: Vec<String> = header.collect();
    check_unique(&col_ids, col_kind)?;
    check_unique(&row_ids, row_kind)?;
    Ok(LabeledTable {
        col_ids,
        row_ids,
        cells,
    })
}

/// p × n log-abundance matrix with an observation mask. Missing cells hold
/// NaN in `y` and `false` in the mask; no other value ever stands for "missing".
#[derive(Debug, Clone)]
pub struct ObservedMatrix {
    p: usize,
    n: usize,
    y: Vec<f64>,
    mask: Vec<bool>,
    metabolite_ids: Vec<String>,
    sample_ids: Vec<String>,
}

/// Equal when ids, masks and observed values agree exactly.
impl PartialEq for ObservedMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p
            && self.n == other.n
            && self.mask == other.mask
            && self.metabolite_ids == other.metabolite_ids
            && self.sample_ids == other.sample_ids
            && self.y.iter().zip(&other.y).zip(&self.mask).all(|((a, b), &m)| !m || a.to_bits() == b.to_bits())
    }
}

impl ObservedMatrix {
    /// Builds from row-major cells, `None` meaning missing.
    pub fn from_cells(cells: Vec<Option<f64>>, metabolite_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let p = metabolite_ids.len();
        let n = sample_ids.len();
        if cells.len() != p * n {
            return Err(Error::InvalidInput(format!("expected {} cells for a {p}x{n} matrix, got {}", p * n, cells.len())));
        }
        if n == 0 {
            return Err(Error::InvalidInput("matrix has no samples".into()));
        }
        check_unique(&metabolite_ids, "metabolite")?;
        check_unique(&sample_ids, "sample")?;
        let mut y = Vec::with_capacity(cells.len());
        let mut mask = Vec::with_capacity(cells.len());
        for c in cells {
            match c {
                Some(v) if v.is_finite() => {
                    y.push(v);
                    mask.push(true);
                }
                Some(v) => return Err(Error::InvalidInput(format!("non-finite observed value {v}"))),
                None => {
                    y.push(f64::NAN);
                    mask.push(false);
                }
            }
        }
        Ok(Self {
            p,
            n,
            y,
            mask,
            metabolite_ids,
            sample_ids,
        })
    }

    /// Fully observed matrix from a row-major slice.
    pub fn complete(values: &[f64], metabolite_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        Self::from_cells(values.iter().map(|&v| Some(v)).collect(), metabolite_ids, sample_ids)
    }

    pub(crate) fn from_parts_unchecked(p: usize, n: usize, y: Vec<f64>, mask: Vec<bool>, metabolite_ids: Vec<String>, sample_ids: Vec<String>) -> Self {
        debug_assert_eq!(y.len(), p * n);
        debug_assert!(y.iter().zip(&mask).all(|(v, &m)| m == v.is_finite()));
        Self {
            p,
            n,
            y,
            mask,
            metabolite_ids,
            sample_ids,
        }
    }

    pub fn n_metabolites(&self) -> usize {
        self.p
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn metabolite_ids(&self) -> &[String] {
        &self.metabolite_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Row `g` of y; missing cells are NaN.
    pub fn row(&self, g: usize) -> &[f64] {
        &self.y[g * self.n..(g + 1) * self.n]
    }

    pub fn mask_row(&self, g: usize) -> &[bool] {
        &self.mask[g * self.n..(g + 1) * self.n]
    }

    pub fn get(&self, g: usize, i: usize) -> Option<f64> {
        let k = g * self.n + i;
        self.mask[k].then_some(self.y[k])
    }

    pub fn is_observed(&self, g: usize, i: usize) -> bool {
        self.mask[g * self.n + i]
    }

    pub fn n_observed(&self, g: usize) -> usize {
        self.mask_row(g).iter().filter(|&&m| m).count()
    }

    pub fn n_missing_total(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Observed values of row `g`.
    pub fn observed(&self, g: usize) -> impl Iterator<Item = f64> + '_ {
        self.row(g).iter().zip(self.mask_row(g)).filter(|(_, &m)| m).map(|(&v, _)| v)
    }

    pub fn load(path: &Path, format: TableFormat) -> Result<Self> {
        let t = read_table(path, format, "metabolite", "sample")?;
        Self::from_cells(t.cells, t.row_ids, t.col_ids)
    }

    /// Writes the matrix; finite values use the shortest round-trip
    /// representation so that `load` reproduces them bit for bit.
    pub fn write(&self, path: &Path, format: TableFormat, metadata: &[String]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out, format, metadata)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write, format: TableFormat, metadata: &[String]) -> Result<()> {
        let d = format.delimiter() as char;
        for m in metadata {
            writeln!(out, "# {m}")?;
        }
        write!(out, "metabolite")?;
        for s in &self.sample_ids {
            write!(out, "{d}{s}")?;
        }
        writeln!(out)?;
        for g in 0..self.p {
            write!(out, "{}", self.metabolite_ids[g])?;
            for v in self.row(g) {
                if v.is_finite() {
                    write!(out, "{d}{v:?}")?;
                } else {
                    write!(out, "{d}NA")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Rows restricted to `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut y = Vec::with_capacity(idx.len() * self.n);
        let mut mask = Vec::with_capacity(idx.len() * self.n);
        for &g in idx {
            y.extend_from_slice(self.row(g));
            mask.extend_from_slice(self.mask_row(g));
        }
        Self {
            p: idx.len(),
            n: self.n,
            y,
            mask,
            metabolite_ids: idx.iter().map(|&g| self.metabolite_ids[g].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
        }
    }
}

/// Class assigned to a metabolite by its missing fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaboliteClass {
    Complete,
    Missing,
    Discarded,
}

impl MetaboliteClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaboliteClass::Complete => "complete",
            MetaboliteClass::Missing => "missing",
            MetaboliteClass::Discarded => "discarded",
        }
    }
}

/// Complete (< 5% missing), missing (5% to 50% inclusive) and discarded (> 50%).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetabolitePartition {
    pub complete: Vec<usize>,
    pub missing: Vec<usize>,
    pub discarded: Vec<usize>,
    classes: Vec<MetaboliteClass>,
}

impl MetabolitePartition {
    pub fn class_of(&self, g: usize) -> MetaboliteClass {
        self.classes[g]
    }

    /// Complete and missing metabolites in index order.
    pub fn analyzed(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&g| self.classes[g] != MetaboliteClass::Discarded).collect()
    }
}

/// Exact integer comparison of the missing fraction against the thresholds.
pub fn classify(n_missing: usize, n: usize) -> MetaboliteClass {
    if n_missing * 20 < n {
        MetaboliteClass::Complete
    } else if n_missing * 2 <= n {
        MetaboliteClass::Missing
    } else {
        MetaboliteClass::Discarded
    }
}

pub fn partition_metabolites(m: &ObservedMatrix) -> MetabolitePartition {
    let n = m.n_samples();
    let classes: Vec<MetaboliteClass> = (0..m.n_metabolites()).map(|g| classify(n - m.n_observed(g), n)).collect();
    let pick = |c| (0..classes.len()).filter(|&g| classes[g] == c).collect::<Vec<_>>();
    MetabolitePartition {
        complete: pick(MetaboliteClass::Complete),
        missing: pick(MetaboliteClass::Missing),
        discarded: pick(MetaboliteClass::Discarded),
        classes,
    }
}

/// n × d covariate matrix whose first `n_interest` columns are the covariates
/// of interest. An intercept must lie in its column span.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    names: Vec<String>,
    n_interest: usize,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, names: Vec<String>, n_interest: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if names.len() != d {
            return Err(Error::InvalidInput(format!("{} column names for {d} columns", names.len())));
        }
        if d == 0 || n_interest == 0 || n_interest > d {
            return Err(Error::InvalidInput(format!("need 1..={d} covariates of interest, got {n_interest}")));
        }
        if n <= d {
            return Err(Error::InvalidInput(format!("design has {n} rows but {d} columns")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        let sv = x.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if sv.min() <= smax * 1e-10 * (n as f64) {
            return Err(Error::RankDeficient("design matrix is not of full column rank".into()));
        }
        let dm = Self { x, names, n_interest };
        if !dm.includes_intercept() {
            return Err(Error::InvalidInput("design must contain an intercept (the ones vector must lie in its column span)".into()));
        }
        Ok(dm)
    }

    /// Treatment-style design `[x_interest..., 1]`.
    pub fn with_intercept(interest: &DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (n, d1) = interest.shape();
        let mut x = DMatrix::from_element(n, d1 + 1, 1.0);
        x.view_mut((0, 0), (n, d1)).copy_from(interest);
        let mut names = names;
        names.push("intercept".into());
        Self::new(x, names, d1)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_interest(&self) -> usize {
        self.n_interest
    }

    pub fn interest_cols(&self) -> std::ops::Range<usize> {
        0..self.n_interest
    }

    pub fn nuisance_cols(&self) -> std::ops::Range<usize> {
        self.n_interest..self.x.ncols()
    }

    /// Whether the ones vector lies in the column span of X.
    pub fn includes_intercept(&self) -> bool {
        let n = self.x.nrows();
        let ones = nalgebra::DVector::from_element(n, 1.0);
        let q = self.x.clone().qr().q();
        let resid = &ones - &q * (q.transpose() * &ones);
        resid.norm() <= 1e-8 * (n as f64).sqrt()
    }

    /// (XᵀX)⁻¹.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        let g = self.x.transpose() * &self.x;
        g.cholesky().expect("full-rank design").inverse()
    }

    /// Reads a design table with one row per sample, reorders rows to
    /// `sample_order` and puts the named interest columns first.
    pub fn load(path: &Path, format: TableFormat, interest: &[String], sample_order: &[String]) -> Result<Self> {
        let t = read_table(path, format, "sample", "covariate")?;
        let d = t.col_ids.len();
        if t.cells.iter().any(Option::is_none) {
            return Err(Error::InvalidInput(format!("{}: design matrix may not contain missing values", path.display())));
        }
        let mut order = Vec::with_capacity(d);
        for name in interest {
            let j = t
                .col_ids
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidInput(format!("covariate of interest `{name}` not found in {}", path.display())))?;
            order.push(j);
        }
        if order.is_empty() {
            order.push(0);
        }
        let n_interest = order.len();
        let rest: Vec<usize> = (0..d).filter(|j| !order.contains(j)).collect();
        order.extend(rest);
        let n = sample_order.len();
        let pos: std::collections::HashMap<&str, usize> = t.row_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if t.row_ids.len() != n {
            return Err(Error::InvalidInput(format!("design has {} samples, abundance matrix has {n}", t.row_ids.len())));
        }
        let mut x = DMatrix::zeros(n, d);
        for (i, s) in sample_order.iter().enumerate() {
            let src = *pos
                .get(s.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("sample `{s}` missing from design {}", path.display())))?;
            for (jj, &j) in order.iter().enumerate() {
                x[(i, jj)] = t.cells[src * d + j].expect("checked above");
            }
        }
        let names = order.iter().map(|&j| t.col_ids[j].clone()).collect();
        Self::new(x, names, n_interest)
    }

    pub fn write(&self, path: &Path, format: TableFormat, sample_ids: &[String]) -> Result<()> {
        let d = format.delimiter() as char;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "sample")?;
        for c in &self.names {
            write!(out, "{d}{c}")?;
        }
        writeln!(out)?;
        for (i, s) in sample_ids.iter().enumerate() {
            write!(out, "{s}")?;
            for j in 0..self.x.ncols() {
                write!(out, "{d}{:?}", self.x[(i, j)])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}
