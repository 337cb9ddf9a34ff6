//! Small dense linear-algebra helpers for diagnostics and data generation.

/// `ln |det(a)|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        acc += p.abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    acc
}

/// Sample covariance (divisor `n - 1`) of row-major data.
pub fn covariance(data: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in data.chunks(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for r in &mut cov {
        r.iter_mut().for_each(|c| *c /= denom);
    }
    cov
}

/// Frobenius distance between `m` and the identity.
pub fn frobenius_to_identity(m: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let d = v - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

/// Per-column z-scoring of row-major data.
pub fn standardize(data: &[f64], dim: usize) -> Vec<f64> {
    let cov = covariance(data, dim);
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    data.chunks(dim)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i]) / cov[i][i].sqrt().max(f64::MIN_POSITIVE))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Modified Gram-Schmidt on the rows of a square matrix.
pub fn orthonormalize_rows(m: &mut [Vec<f64>]) {
    for i in 0..m.len() {
        for j in 0..i {
            let proj: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = m.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= proj * b;
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|v| *v /= norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_of_known_matrices() {
        assert!((log_abs_det(vec![vec![2.0, 0.0], vec![0.0, 3.0]]) - 6f64.ln()).abs() < 1e-14);
        // det = 1*4 - 2*3 = -2
        assert!((log_abs_det(vec![vec![1.0, 2.0], vec![3.0, 4.0]]) - 2f64.ln()).abs() < 1e-14);
        assert_eq!(log_abs_det(vec![vec![1.0, 2.0], vec![2.0, 4.0]]), f64::NEG_INFINITY);
    }

    #[test]
    fn gram_schmidt_is_orthonormal() {
        let mut m = vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        orthonormalize_rows(&mut m);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_of_small_sample() {
        let data = [1.0, 2.0, 3.0, 6.0, 5.0, 10.0];
        let c = covariance(&data, 2);
        assert!((c[0][0] - 4.0).abs() < 1e-12);
        assert!((c[1][1] - 16.0).abs() < 1e-12);
        assert!((c[0][1] - 8.0).abs() < 1e-12);
    }
}
