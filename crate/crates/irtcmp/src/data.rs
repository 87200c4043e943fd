//! Categorical item-response datasets: CSV ingestion, validation, summaries.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An N x J matrix of integer-coded categorical responses.
///
/// Cell values for item `j` lie in `0..categories[j]`. Rows are i.i.d.
/// persons; the matrix is immutable after construction and safe to share
/// across parallel workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    n_persons: usize,
    n_items: usize,
    categories: Vec<usize>,
    cells: Vec<u8>, // row-major
}

impl ResponseMatrix {
    /// Build a matrix from row-major cells, inferring `K_j` as
    /// (max observed code) + 1 for each item.
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        Self::with_categories(rows, None)
    }

    /// Build a matrix with explicit per-item category counts. Declared
    /// categories may exceed the observed maximum (unobserved categories are
    /// structurally allowed).
    pub fn with_categories(rows: Vec<Vec<u8>>, categories: Option<Vec<usize>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyData("no rows".into()));
        }
        let n_items = rows[0].len();
        if n_items == 0 {
            return Err(Error::EmptyData("no items".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_items {
                return Err(Error::ShapeMismatch(format!(
                    "row {} has {} cells, expected {}",
                    i,
                    r.len(),
                    n_items
                )));
            }
        }
        let inferred: Vec<usize> = (0..n_items)
            .map(|j| rows.iter().map(|r| r[j] as usize + 1).max().unwrap())
            .collect();
        let categories = match categories {
            Some(k) => {
                if k.len() != n_items {
                    return Err(Error::ShapeMismatch(format!(
                        "{} category counts for {} items",
                        k.len(),
                        n_items
                    )));
                }
                for (j, (&kj, &obs)) in k.iter().zip(&inferred).enumerate() {
                    if kj < obs {
                        return Err(Error::CsvCell {
                            row: 0,
                            col: j,
                            msg: format!("observed code {} exceeds declared K={}", obs - 1, kj),
                        });
                    }
                }
                k
            }
            None => inferred,
        };
        for (j, &kj) in categories.iter().enumerate() {
            if kj < 2 {
                return Err(Error::DegenerateItem { item: j });
            }
        }
        let mut cells = Vec::with_capacity(rows.len() * n_items);
        for r in &rows {
            cells.extend_from_slice(r);
        }
        Ok(Self { n_persons: rows.len(), n_items, categories, cells })
    }

    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Per-item category counts K_j.
    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    #[inline]
    pub fn response(&self, person: usize, item: usize) -> u8 {
        self.cells[person * self.n_items + item]
    }

    /// One person's responses as a row slice.
    #[inline]
    pub fn row(&self, person: usize) -> &[u8] {
        let start = person * self.n_items;
        &self.cells[start..start + self.n_items]
    }

    /// Per-item, per-category frequency table. Counts for each item sum to N.
    pub fn summarize(&self) -> Vec<Vec<usize>> {
        let mut table: Vec<Vec<usize>> =
            self.categories.iter().map(|&k| vec![0usize; k]).collect();
        for i in 0..self.n_persons {
            for j in 0..self.n_items {
                table[j][self.response(i, j) as usize] += 1;
            }
        }
        table
    }

    /// Write the matrix as a headerless CSV of integer codes.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = File::create(path.as_ref()).map_err(|e| Error::Io {
            path: path.as_ref().display().to_string(),
            source: e,
        })?;
        let mut buf = String::new();
        for i in 0..self.n_persons {
            for j in 0..self.n_items {
                if j > 0 {
                    buf.push(',');
                }
                buf.push_str(&self.response(i, j).to_string());
            }
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::Io {
            path: path.as_ref().display().to_string(),
            source: e,
        })
    }
}

/// Options controlling CSV ingestion.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub header: bool,
    pub na_codes: Vec<String>,
    /// Override the inferred per-item category counts (uniform K for all items).
    pub categories: Option<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { header: false, na_codes: vec!["NA".into(), "".into()], categories: None }
    }
}

/// Result of loading a CSV file: the complete-case matrix plus the number of
/// rows removed by listwise deletion.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub matrix: ResponseMatrix,
    pub dropped_rows: usize,
}

/// Load a response matrix from a CSV of non-negative integer codes.
///
/// Rows containing any missing cell (a token in `na_codes`) are dropped and
/// counted. `K_j` is inferred as (max observed code) + 1 unless overridden.
pub fn load_csv<P: AsRef<Path>>(path: P, options: &CsvOptions) -> Result<CsvLoad> {
    let file = File::open(path.as_ref()).map_err(|e| Error::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows: Vec<Vec<u8>> = Vec::new();
    let mut dropped = 0usize;
    for (ridx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::CsvCell {
            row: ridx + 1,
            col: 0,
            msg: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        let mut missing = false;
        for (cidx, field) in record.iter().enumerate() {
            if options.na_codes.iter().any(|na| na == field) {
                missing = true;
                continue;
            }
            let v: u8 = field.parse().map_err(|_| Error::CsvCell {
                row: ridx + 1,
                col: cidx + 1,
                msg: format!("cell {:?} is not a non-negative integer code", field),
            })?;
            row.push(v);
        }
        if missing {
            dropped += 1;
        } else {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyData(format!(
            "{}: no complete rows ({} dropped)",
            path.as_ref().display(),
            dropped
        )));
    }
    let categories = options.categories.map(|k| vec![k; rows[0].len()]);
    let matrix = ResponseMatrix::with_categories(rows, categories)?;
    Ok(CsvLoad { matrix, dropped_rows: dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_small_csv() {
        let f = write_temp("0,1\n1,0\n1,1\n");
        let loaded = load_csv(f.path(), &CsvOptions::default()).unwrap();
        assert_eq!(loaded.matrix.n_persons(), 3);
        assert_eq!(loaded.matrix.n_items(), 2);
        assert_eq!(loaded.matrix.categories(), &[2, 2]);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.matrix.row(2), &[1, 1]);
    }

    #[test]
    fn listwise_deletion_counts_dropped_rows() {
        let f = write_temp("0,1\nNA,0\n1,1\n");
        let loaded = load_csv(f.path(), &CsvOptions::default()).unwrap();
        assert_eq!(loaded.matrix.n_persons(), 2);
        assert_eq!(loaded.dropped_rows, 1);
    }

    #[test]
    fn non_integer_cell_is_an_error_with_location() {
        let f = write_temp("0,1\n1,x\n");
        let err = load_csv(f.path(), &CsvOptions::default()).unwrap_err();
        match err {
            Error::CsvCell { row, col, .. } => {
                assert_eq!(row, 2);
                assert_eq!(col, 2);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn constant_column_is_degenerate() {
        let f = write_temp("0,1\n0,0\n0,1\n");
        let err = load_csv(f.path(), &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateItem { item: 0 }));
    }

    #[test]
    fn declared_categories_allow_unobserved_codes() {
        let f = write_temp("0,1\n1,0\n");
        let opts = CsvOptions { categories: Some(4), ..CsvOptions::default() };
        let loaded = load_csv(f.path(), &opts).unwrap();
        assert_eq!(loaded.matrix.categories(), &[4, 4]);
    }

    #[test]
    fn summarize_counts_per_item() {
        let m = ResponseMatrix::new(vec![vec![0, 1], vec![1, 0], vec![1, 1]]).unwrap();
        let table = m.summarize();
        assert_eq!(table[0], vec![1, 2]);
        assert_eq!(table[1], vec![1, 2]);
    }

    #[test]
    fn summarize_handles_unobserved_category() {
        let rows = vec![vec![0, 1]; 7];
        let m = ResponseMatrix::with_categories(rows, Some(vec![2, 2])).unwrap();
        let table = m.summarize();
        assert_eq!(table[0], vec![7, 0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_csv("/nonexistent/file.csv", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(
            proptest::collection::vec(0u8..4, 3), 2..20)) {
            // make every column non-degenerate by appending rows with codes 0 and 3
            let mut rows = rows;
            rows.push(vec![0, 0, 0]);
            rows.push(vec![3, 3, 3]);
            let m = ResponseMatrix::new(rows).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            m.save_csv(f.path()).unwrap();
            let loaded = load_csv(f.path(), &CsvOptions::default()).unwrap();
            prop_assert_eq!(&loaded.matrix, &m);
        }

        #[test]
        fn summarize_sums_to_n(rows in proptest::collection::vec(
            proptest::collection::vec(0u8..3, 4), 1..30)) {
            let mut rows = rows;
            rows.push(vec![2, 2, 2, 2]);
            let n = rows.len();
            let m = ResponseMatrix::new(rows).unwrap();
            for counts in m.summarize() {
                prop_assert_eq!(counts.iter().sum::<usize>(), n);
            }
        }
    }
}
