//! Finite differences shared by normal estimation and divergence.
//!
//! Interior points use central differences; the first and last samples of
//! each row or column fall back to one-sided differences.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    OneSided,
    Periodic,
}

/// d/du along rows, scaled by `1 / pitch`.
pub(crate) fn d_du(
    values: &[f64],
    width: usize,
    height: usize,
    pitch: f64,
    boundary: Boundary,
) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for v in 0..height {
        let row = &values[v * width..(v + 1) * width];
        diff_line(row, |i, d| out[v * width + i] = d / pitch, boundary);
    }
    out
}

/// d/dv along columns, scaled by `1 / pitch`.
pub(crate) fn d_dv(
    values: &[f64],
    width: usize,
    height: usize,
    pitch: f64,
    boundary: Boundary,
) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut col = vec![0.0; height];
    for u in 0..width {
        for v in 0..height {
            col[v] = values[v * width + u];
        }
        diff_line(&col, |i, d| out[i * width + u] = d / pitch, boundary);
    }
    out
}

fn diff_line(line: &[f64], mut put: impl FnMut(usize, f64), boundary: Boundary) {
    let n = line.len();
    if n == 1 {
        put(0, 0.0);
        return;
    }
    for i in 1..n - 1 {
        put(i, 0.5 * (line[i + 1] - line[i - 1]));
    }
    match boundary {
        Boundary::OneSided => {
            put(0, line[1] - line[0]);
            put(n - 1, line[n - 1] - line[n - 2]);
        }
        Boundary::Periodic => {
            put(0, 0.5 * (line[1] - line[n - 1]));
            put(n - 1, 0.5 * (line[0] - line[n - 2]));
        }
    }
}
