//! Headerless CSV for matrices: one row per line, comma separated,
//! written with 17 significant digits so values round-trip exactly.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn parse_matrix_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                let field = field.trim();
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("`{field}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {} fields, found {}", first.len(), row.len()),
                });
            }
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("field {} is not finite", j + 1),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no matrix rows found".into(),
        });
    }
    Matrix::from_rows(&rows)
}

pub fn read_matrix_csv<R: BufRead>(mut reader: R) -> Result<Matrix> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_matrix_csv(&text)
}

pub fn format_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    w.write_all(format_matrix_csv(m).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Matrix::from_fn(3, 2, |i, j| ((i * 2 + j) as f64 + 0.1).ln() / 3.0);
        let back = parse_matrix_csv(&format_matrix_csv(&m)).unwrap();
        assert_eq!(back.to_bits(), m.to_bits());
    }

    #[test]
    fn accepts_plain_literals_and_blank_lines() {
        let m = parse_matrix_csv("1, 2\n\n3,4e0\n").unwrap();
        assert_eq!(m, Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    }

    #[test]
    fn malformed_input_names_the_line() {
        let err = parse_matrix_csv("1,2\n3,x\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        let err = parse_matrix_csv("1,2\n3\n").unwrap_err();
        assert!(err.to_string().contains("expected 2 fields"));
        assert!(parse_matrix_csv("\n\n").is_err());
        assert!(parse_matrix_csv("1,inf\n").is_err());
    }
}
