//! Dataset CSV files: a header `x_1..x_d, y_1..y_T`, one row per input, an
//! empty `y` cell marking an unobserved entry.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use morcgp::Dataset;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// Shortest decimal string that parses back to the same value; empty for NaN.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn numbered(prefix: &str, name: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

/// Splits a header into `(d, T)`, requiring `x_1..x_d` followed by `y_1..y_T`.
fn parse_header(header: &csv::StringRecord, path: &str, need_outputs: bool) -> CliResult<(usize, usize)> {
    let bad = |message: String| CliError::Parse { path: path.to_string(), line: 1, message };
    let mut d = 0;
    let mut t = 0;
    for (k, name) in header.iter().enumerate() {
        if t == 0 && numbered("x_", name) == Some(d + 1) {
            d += 1;
        } else if d > 0 && numbered("y_", name) == Some(t + 1) {
            t += 1;
        } else if !need_outputs && d > 0 && t == 0 {
            // Query files may carry trailing columns; only the inputs are read.
            break;
        } else {
            return Err(bad(format!("unexpected column {} `{name}`; expected x_1..x_d then y_1..y_T", k + 1)));
        }
    }
    if d == 0 {
        return Err(bad("header has no x_1 column".into()));
    }
    if need_outputs && t == 0 {
        return Err(bad("header has no y_1 column".into()));
    }
    Ok((d, t))
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(source)
}

fn parse_cell(cell: &str, path: &str, line: u64, column: usize) -> CliResult<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CliError::Parse {
        path: path.to_string(),
        line,
        message: format!("column {column}: `{cell}` is not a finite number"),
    })
}

/// Reads a dataset; `path` only labels error messages.
pub fn read_dataset<R: Read>(source: R, path: &str) -> CliResult<Dataset> {
    let mut rdr = reader(source);
    let header = rdr.headers().map_err(|e| csv_error(e, path))?.clone();
    let (d, t) = parse_header(&header, path, true)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut mask = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, path))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + t {
            return Err(CliError::Parse {
                path: path.to_string(),
                line,
                message: format!("expected {} cells, found {}", d + t, record.len()),
            });
        }
        for c in 0..d {
            x.push(parse_cell(&record[c], path, line, c + 1)?);
        }
        let mut any = false;
        for c in d..d + t {
            if record[c].is_empty() {
                y.push(f64::NAN);
                mask.push(false);
            } else {
                y.push(parse_cell(&record[c], path, line, c + 1)?);
                mask.push(true);
                any = true;
            }
        }
        if !any {
            return Err(CliError::Parse { path: path.to_string(), line, message: "row has no observed output".into() });
        }
    }
    let n = mask.len() / t;
    if n == 0 {
        return Err(CliError::Parse { path: path.to_string(), line: 1, message: "no data rows".into() });
    }
    let data = Dataset::new(
        DMatrix::from_row_slice(n, d, &x),
        DMatrix::from_row_slice(n, t, &y),
        DMatrix::from_row_slice(n, t, &mask),
    )?;
    let counts: Vec<usize> = (0..t).map(|c| data.observed_in_channel(c).len()).collect();
    log::info!("{path}: {n} rows, observed entries per channel {counts:?}");
    Ok(data)
}

/// Reads the `x_1..x_d` columns of a query file.
pub fn read_inputs<R: Read>(source: R, path: &str) -> CliResult<DMatrix<f64>> {
    let mut rdr = reader(source);
    let header = rdr.headers().map_err(|e| csv_error(e, path))?.clone();
    let (d, _) = parse_header(&header, path, false)?;
    let mut x = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, path))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::Parse {
                path: path.to_string(),
                line,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        for c in 0..d {
            x.push(parse_cell(&record[c], path, line, c + 1)?);
        }
    }
    if x.is_empty() {
        return Err(CliError::Parse { path: path.to_string(), line: 1, message: "no data rows".into() });
    }
    Ok(DMatrix::from_row_slice(x.len() / d, d, &x))
}

fn csv_error(e: csv::Error, path: &str) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::Parse { path: path.to_string(), line, message: e.to_string() }
}

pub fn load_csv(path: &Path) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_dataset(file, &path.display().to_string())
}

pub fn load_inputs(path: &Path) -> CliResult<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_inputs(file, &path.display().to_string())
}

pub fn column_names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|k| format!("{prefix}_{k}")).collect()
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_table<W: Write>(sink: W, header: &[String], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()
}

pub fn save_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_table(file, header, rows).map_err(|e| CliError::io(path, e))
}

/// Input columns followed by `matrix` columns, one row per input.
pub fn rows_with_inputs(x: &DMatrix<f64>, blocks: &[&DMatrix<f64>]) -> Vec<Vec<String>> {
    (0..x.nrows())
        .map(|i| {
            let mut row: Vec<String> = x.row(i).iter().map(|v| fmt_f64(*v)).collect();
            for b in blocks {
                row.extend(b.row(i).iter().map(|v| fmt_f64(*v)));
            }
            row
        })
        .collect()
}

pub fn write_dataset<W: Write>(sink: W, data: &Dataset) -> std::io::Result<()> {
    let mut header = column_names("x", data.d());
    header.extend(column_names("y", data.t()));
    let y = DMatrix::from_fn(data.n(), data.t(), |i, t| if data.is_observed(i, t) { data.y(i, t) } else { f64::NAN });
    write_table(sink, &header, &rows_with_inputs(data.inputs(), &[&y]))
}

pub fn save_csv(path: &Path, data: &Dataset) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_dataset(file, data).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> CliResult<Dataset> {
        read_dataset(text.as_bytes(), "mem.csv")
    }

    #[test]
    fn complete_rows_give_full_mask() {
        let d = parse("x_1,y_1,y_2\n0.5,1,2\n1.5,3,4\n").unwrap();
        assert_eq!((d.n(), d.d(), d.t()), (2, 1, 2));
        assert!(d.mask().iter().all(|m| *m));
        assert_eq!(d.y(1, 0), 3.0);
    }

    #[test]
    fn empty_cell_is_unobserved() {
        let d = parse("x_1,x_2,y_1,y_2\n0,1,1,\n1,2,3,4\n").unwrap();
        assert!(!d.is_observed(0, 1));
        assert_eq!(d.mask().iter().filter(|m| !**m).count(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |r: CliResult<Dataset>| match r {
            Err(CliError::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        };
        assert_eq!(line_of(parse("x_1,y_1\n1,2\n3\n")), 3);
        assert_eq!(line_of(parse("x_1,y_1\n1,2\n3,abc\n")), 3);
        assert_eq!(line_of(parse("x_1,y_1,y_2\n1,,\n")), 2);
        assert_eq!(line_of(parse("x_1,z_1\n1,2\n")), 1);
        assert_eq!(line_of(parse("y_1,x_1\n1,2\n")), 1);
        assert_eq!(line_of(parse("x_1,y_1\n")), 1);
    }

    #[test]
    fn query_ignores_trailing_columns() {
        let x = read_inputs("x_1,y_1\n0.25,9\n0.75,\n".as_bytes(), "q.csv").unwrap();
        assert_eq!(x.shape(), (2, 1));
        assert_eq!(x[(1, 0)], 0.75);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            rows in proptest::collection::vec(
                (proptest::collection::vec(-1e6f64..1e6, 2), proptest::collection::vec(proptest::option::of(-1e9f64..1e9), 3)),
                1..20,
            )
        ) {
            let n = rows.len();
            let x = DMatrix::from_fn(n, 2, |i, j| rows[i].0[j]);
            let mut mask = DMatrix::from_fn(n, 3, |i, t| rows[i].1[t].is_some());
            let y = DMatrix::from_fn(n, 3, |i, t| rows[i].1[t].unwrap_or(f64::NAN));
            for i in 0..n {
                mask[(i, 0)] |= (0..3).all(|t| !mask[(i, t)]);
            }
            let y = DMatrix::from_fn(n, 3, |i, t| if mask[(i, t)] && y[(i, t)].is_nan() { 0.5 } else { y[(i, t)] });
            let data = Dataset::new(x, y, mask).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &data).unwrap();
            let back = read_dataset(buf.as_slice(), "mem.csv").unwrap();
            prop_assert_eq!(back.inputs(), data.inputs());
            prop_assert_eq!(back.mask(), data.mask());
            for i in 0..n {
                for t in 0..3 {
                    if data.is_observed(i, t) {
                        prop_assert_eq!(back.y(i, t).to_bits(), data.y(i, t).to_bits());
                    }
                }
            }
        }
    }
}
