//! Small dense least-squares solver.

/// Solves `min ||A x - y||` where `cols` are the columns of `A`, by modified
/// Gram-Schmidt QR. Returns `None` for rank-deficient designs.
pub(crate) fn least_squares(cols: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = cols.len();
    let n = y.len();
    if k == 0 || n < k || cols.iter().any(|c| c.len() != n) {
        return None;
    }
    let mut q: Vec<Vec<f64>> = cols.to_vec();
    let mut r = vec![vec![0.0; k]; k];
    for j in 0..k {
        for i in 0..j {
            let d = dot(&q[i], &q[j]);
            r[i][j] = d;
            let qi = q[i].clone();
            for (a, b) in q[j].iter_mut().zip(&qi) {
                *a -= d * b;
            }
        }
        let norm = dot(&q[j], &q[j]).sqrt();
        let scale = dot(&cols[j], &cols[j]).sqrt();
        if !(norm > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return None;
        }
        r[j][j] = norm;
        for a in q[j].iter_mut() {
            *a /= norm;
        }
    }
    let qty: Vec<f64> = q.iter().map(|qj| dot(qj, y)).collect();
    let mut x = vec![0.0; k];
    for j in (0..k).rev() {
        let s: f64 = ((j + 1)..k).map(|l| r[j][l] * x[l]).sum();
        x[j] = (qty[j] - s) / r[j][j];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
