//! CSV input tables and output writers.
//!
//! Rows and columns in error messages are 1-based and count the header as
//! row 1, so they match what a spreadsheet shows.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Weekly returns: a date column followed by one column per asset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnsTable {
    /// Column names, date column included.
    pub header: Vec<String>,
    pub dates: Vec<String>,
    /// `n × d` returns.
    pub values: DMatrix<f64>,
}

impl ReturnsTable {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

fn data_error(row: Option<usize>, column: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Data {
        row,
        column,
        msg: msg.into(),
    }
}

fn read_all(path: &Path) -> Result<String> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| data_error(None, None, format!("cannot read `{}`: {e}", path.display())))?;
    Ok(text)
}

/// Header plus numeric cells from column `skip` on.
struct Parsed {
    header: Vec<String>,
    leading: Vec<Vec<String>>,
    rows: Vec<Vec<f64>>,
}

fn parse_table(text: &str, skip: usize, min_cols: usize) -> Result<Parsed> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(r) => r
            .map_err(|e| data_error(Some(1), None, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect(),
        None => return Err(data_error(None, None, "empty file")),
    };
    if header.len() < min_cols {
        return Err(data_error(
            Some(1),
            None,
            format!("need at least {min_cols} columns, found {}", header.len()),
        ));
    }
    let mut leading = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| data_error(Some(row), None, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(data_error(
                Some(row),
                None,
                format!("expected {} cells, found {}", header.len(), rec.len()),
            ));
        }
        leading.push(rec.iter().take(skip).map(str::to_string).collect());
        let mut vals = Vec::with_capacity(rec.len() - skip);
        for (j, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell
                .parse()
                .map_err(|_| data_error(Some(row), Some(j + 1), format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(data_error(Some(row), Some(j + 1), format!("non-finite value `{cell}`")));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(data_error(None, None, "no data rows"));
    }
    Ok(Parsed { header, leading, rows })
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Parse returns from CSV text: header row, date in the first column.
pub fn parse_returns_csv(text: &str) -> Result<ReturnsTable> {
    let p = parse_table(text, 1, 2)?;
    Ok(ReturnsTable {
        header: p.header,
        dates: p.leading.into_iter().map(|mut l| l.remove(0)).collect(),
        values: to_matrix(&p.rows),
    })
}

pub fn load_returns_csv(path: &Path) -> Result<ReturnsTable> {
    parse_returns_csv(&read_all(path)?)
}

/// All-numeric table with a header row.
pub fn load_numeric_csv(path: &Path, min_cols: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let p = parse_table(&read_all(path)?, 0, min_cols)?;
    Ok((p.header, to_matrix(&p.rows)))
}

/// Regression table: features in every column but the last, target in the last.
pub fn load_regression_csv(path: &Path) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (_, m) = load_numeric_csv(path, 2)?;
    let d = m.ncols() - 1;
    Ok((m.columns(0, d).into_owned(), m.column(d).into_owned()))
}

/// Cell of an output table.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(u64),
    Num(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // shortest representation that parses back to the same value
            Cell::Num(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// Rectangular table with a header.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Contract(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io(format!("cannot create `{}`: {e}", path.display())))?;
        let mut buf = BufWriter::new(file);
        self.write_to(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("csv output is utf-8")
    }
}

/// Write a matrix as CSV with the given header.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut t = Table::new(header.to_vec());
    for i in 0..m.nrows() {
        t.push(m.row(i).iter().map(|&v| Cell::Num(v)).collect())?;
    }
    t.write_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_returns() {
        let t = parse_returns_csv("date,A,B\n2011-01-07,0.01,-0.02\n2011-01-14,0.0,0.03\n2011-01-21,-0.01,0.02\n")
            .unwrap();
        assert_eq!((t.n(), t.dim()), (3, 2));
        assert_eq!(t.dates[1], "2011-01-14");
        assert_eq!(t.values[(2, 1)], 0.02);
    }

    #[test]
    fn na_cell_located() {
        match parse_returns_csv("date,A,B\nd1,0.1,0.2\nd2,NA,0.1\n") {
            Err(Error::Data { row, column, .. }) => assert_eq!((row, column), (Some(3), Some(2))),
            other => panic!("unexpected {other:?}"),
        }
        match parse_returns_csv("date,A,B\nd1,0.1,NaN\n") {
            Err(Error::Data { row, column, .. }) => assert_eq!((row, column), (Some(2), Some(3))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_and_ragged() {
        match parse_returns_csv("date,A,B\n") {
            Err(Error::Data { msg, .. }) => assert_eq!(msg, "no data rows"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_returns_csv("date,A,B\nd1,0.1\n") {
            Err(Error::Data { row, .. }) => assert_eq!(row, Some(2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_returns_csv("date\nd1\n").is_err());
    }

    #[test]
    fn numbers_round_trip() {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        let x = 0.1 + 0.2;
        t.push(vec![Cell::Num(x), Cell::Empty]).unwrap();
        let s = t.to_csv_string();
        let cell = s.lines().nth(1).unwrap().split(',').next().unwrap();
        assert_eq!(cell.parse::<f64>().unwrap(), x);
        assert!(t.push(vec![Cell::Empty]).is_err());
    }
}
