//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Smallest eigenvalue of the symmetric part of `m`. Returns `+inf` for an empty matrix.
pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = symmetrized(m);
    sym.symmetric_eigenvalues().min()
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Locates `t` on an ascending grid: returns `(j, w)` such that the linear
/// interpolant is `(1-w) * y[j] + w * y[j+1]`. Values outside the grid clamp.
pub fn locate(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    debug_assert!(n >= 1);
    if n == 1 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, 0.0);
    }
    // partition_point gives the first index with times[i] > t
    let hi = times.partition_point(|&x| x <= t);
    let j = hi - 1;
    let span = times[j + 1] - times[j];
    let w = if span > 0.0 { (t - times[j]) / span } else { 0.0 };
    (j, w)
}

pub fn lerp_matrix(values: &[DMatrix<f64>], j: usize, w: f64) -> DMatrix<f64> {
    if w == 0.0 || j + 1 >= values.len() {
        values[j].clone()
    } else {
        &values[j] * (1.0 - w) + &values[j + 1] * w
    }
}

pub fn lerp_vector(values: &[DVector<f64>], j: usize, w: f64) -> DVector<f64> {
    if w == 0.0 || j + 1 >= values.len() {
        values[j].clone()
    } else {
        &values[j] * (1.0 - w) + &values[j + 1] * w
    }
}

pub fn lerp_scalar(values: &[f64], j: usize, w: f64) -> f64 {
    if w == 0.0 || j + 1 >= values.len() {
        values[j]
    } else {
        values[j] * (1.0 - w) + values[j + 1] * w
    }
}

/// Ascending union of grids; points closer than `eps` are merged (the first kept).
pub fn merge_grids(mut points: Vec<f64>, eps: f64) -> Vec<f64> {
    points.sort_by(|a, b| a.partial_cmp(b).expect("NaN in time grid"));
    let mut out: Vec<f64> = Vec::with_capacity(points.len());
    for p in points {
        match out.last() {
            Some(&last) if (p - last).abs() <= eps => {}
            _ => out.push(p),
        }
    }
    out
}
