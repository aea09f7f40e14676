use std::fmt::Write as _;

use crate::{poisson_pmf, poisson_tail};

/// Published grid for λ3 = 8, ε = 10, τ = 1, rows k3 = 1..=10.
/// Columns: P(E ≥ k3), P(M=12), P(M=14), P(M=16).
pub const REFERENCE_TABLE1: [[f64; 4]; 10] = [
    [0.999665, 0.094749, 0.052060, 0.021692],
    [0.996981, 0.094494, 0.051920, 0.021633],
    [0.986246, 0.093477, 0.051361, 0.021400],
    [0.957620, 0.090764, 0.049870, 0.020779],
    [0.900368, 0.085337, 0.046889, 0.019537],
    [0.808764, 0.076655, 0.042118, 0.017549],
    [0.686626, 0.065079, 0.035757, 0.014899],
    [0.547039, 0.051849, 0.028488, 0.011870],
    [0.407453, 0.038618, 0.021219, 0.008841],
    [0.283376, 0.026858, 0.014757, 0.006149],
];

/// A labelled numeric grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub label_header: String,
    pub headers: Vec<String>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.label_header);
        for h in &self.headers {
            out.push(',');
            out.push_str(h);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.rows) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Rows k3 = 1..=10 for λ3 = 8, ε = 10, τ = 1.
pub fn emit_table1() -> Table {
    let ms = [12u64, 14, 16];
    let mut rows = Vec::new();
    for k3 in 1..=10u64 {
        let tail = poisson_tail(k3, 8.0);
        let mut row = vec![tail];
        row.extend(ms.iter().map(|&m| poisson_pmf(m, 10.0) * tail));
        rows.push(row);
    }
    Table {
        label_header: "k3".into(),
        headers: vec!["P(E>=k3)".into(), "P(M=12)".into(), "P(M=14)".into(), "P(M=16)".into()],
        labels: (1..=10).map(|k| k.to_string()).collect(),
        rows,
    }
}

/// A cell of [`emit_table1`] that differs from [`REFERENCE_TABLE1`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub row: usize,
    pub col: usize,
    pub expected: f64,
    pub actual: f64,
}

pub fn verify_table1(table: &Table, tol: f64) -> Vec<Mismatch> {
    let mut out = Vec::new();
    for (r, expected_row) in REFERENCE_TABLE1.iter().enumerate() {
        for (c, &expected) in expected_row.iter().enumerate() {
            let actual = table.rows.get(r).and_then(|row| row.get(c)).copied().unwrap_or(f64::NAN);
            let close = (actual - expected).abs() <= tol;
            if !close {
                out.push(Mismatch { row: r, col: c, expected, actual });
            }
        }
    }
    out
}

/// Grid of `P(E ≥ k3)` with one row per k3 and one column per rate.
pub fn emit_fig7_sweep(rates: &[f64], k3_values: &[u64]) -> Table {
    Table {
        label_header: "k3".into(),
        headers: rates.iter().map(|l| format!("lambda={l}")).collect(),
        labels: k3_values.iter().map(|k| k.to_string()).collect(),
        rows: k3_values.iter().map(|&k| rates.iter().map(|&l| poisson_tail(k, l)).collect()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn table1_rows() {
        let t = emit_table1();
        let expect5 = [0.900368, 0.085337, 0.046889, 0.019537];
        let expect10 = [0.283376, 0.026858, 0.014757, 0.006149];
        for c in 0..4 {
            assert_abs_diff_eq!(t.rows[4][c], expect5[c], epsilon = 1e-6);
            assert_abs_diff_eq!(t.rows[9][c], expect10[c], epsilon = 1e-6);
        }
        assert!(verify_table1(&t, 1e-6).is_empty());
    }

    #[test]
    fn table1_columns_decrease() {
        let t = emit_table1();
        for c in 0..4 {
            for r in 1..t.rows.len() {
                assert!(t.rows[r][c] < t.rows[r - 1][c]);
            }
        }
    }

    #[test]
    fn verify_flags_perturbation() {
        let mut t = emit_table1();
        t.rows[2][1] += 2e-6;
        let bad = verify_table1(&t, 1e-6);
        assert_eq!(bad.len(), 1);
        assert_eq!((bad[0].row, bad[0].col), (2, 1));
    }

    #[test]
    fn csv_shape() {
        let csv = emit_table1().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "k3,P(E>=k3),P(M=12),P(M=14),P(M=16)");
        assert!(lines[3].starts_with("3,0.986246,"));
    }

    #[test]
    fn fig7_cells() {
        let t = emit_fig7_sweep(&[0.0, 4.0, 8.0], &[1, 3]);
        assert_abs_diff_eq!(t.rows[1][2], 0.986246, epsilon = 1e-6);
        assert_eq!(t.rows[0][0], 0.0);
        assert_eq!(t.rows[1][0], 0.0);
    }
}
