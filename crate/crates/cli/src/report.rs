//! Tabular reports written as CSV with LF line endings and a fixed float
//! format, so identical runs produce identical bytes.

use std::path::Path;

use vqrefine::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

/// Nine significant digits; plain notation for moderate magnitudes and
/// exponent notation outside them.
pub fn format_float(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0.00000000".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let s = format!("{:.*}", (8 - mag).max(0) as usize, v);
        // Rounding can carry into a new digit (9.999999999 -> 10.0000000);
        // reformat at the carried magnitude to keep nine digits.
        let digits = s.chars().filter(|c| c.is_ascii_digit()).count() - leading_zeros(&s);
        if digits > 9 && mag < 9 {
            return format!("{:.*}", (7 - mag).max(0) as usize, v);
        }
        s
    } else {
        format!("{v:.8e}")
    }
}

fn leading_zeros(s: &str) -> usize {
    s.trim_start_matches('-').chars().take_while(|&c| c == '0' || c == '.').filter(|&c| c == '0').count()
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::shape(format!("row of {} cells for {} columns", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let err = |e: csv::Error| Error::Domain(format!("csv encoding: {e}"));
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output of UTF-8 input is UTF-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(1.0), "1.00000000");
        assert_eq!(format_float(0.5), "0.500000000");
        assert_eq!(format_float(-0.125), "-0.125000000");
        assert_eq!(format_float(123.456), "123.456000");
        assert_eq!(format_float(9.9999999999), "10.0000000");
        assert_eq!(format_float(0.0), "0.00000000");
        assert_eq!(format_float(1.5e-7), "1.50000000e-7");
        assert_eq!(format_float(f64::NAN), "nan");
    }

    #[test]
    fn empty_report_is_header_only() {
        let t = Table::new(&["method", "accuracy"]);
        assert_eq!(t.to_csv().unwrap(), "method,accuracy\n");
    }

    #[test]
    fn rows_render_with_lf_and_quoting() {
        let mut t = Table::new(&["method", "n", "accuracy"]);
        t.push(vec!["+LoRA".into(), 200usize.into(), 0.25.into()]).unwrap();
        t.push(vec!["a,b".into(), 1usize.into(), 1.0.into()]).unwrap();
        assert_eq!(t.to_csv().unwrap(), "method,n,accuracy\n+LoRA,200,0.250000000\n\"a,b\",1,1.00000000\n");
        assert!(t.push(vec![1.0.into()]).is_err());
    }
}
