//! Oracles coded separately from the library so the two can disagree.
#![allow(dead_code)]

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows. Plain textbook implementation: sweep all
/// off-diagonal entries, rotate each to zero, repeat until the
/// off-diagonal mass is negligible.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    for row in a {
        assert_eq!(row.len(), n, "matrix must be square");
    }
    for i in 0..n {
        for j in 0..n {
            assert!(
                (a[i][j] - a[j][i]).abs() < 1e-9,
                "matrix must be symmetric"
            );
        }
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    for _sweep in 0..300 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = m[p][p];
                let aqq = m[q][q];
                let apq = m[p][q];
                m[p][p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                m[q][q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                m[p][q] = 0.0;
                m[q][p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = m[i][p];
                    let aiq = m[i][q];
                    m[i][p] = c * aip - s * aiq;
                    m[p][i] = m[i][p];
                    m[i][q] = s * aip + c * aiq;
                    m[q][i] = m[i][q];
                }
                for row in v.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (values, vectors)
}

/// Covariance matrix of row-observations with the n-1 divisor, computed
/// longhand.
pub fn covariance_oracle(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let dim = rows[0].len();
    assert!(n > 1, "covariance needs at least two observations");
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in rows {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for r in &mut cov {
        for x in r.iter_mut() {
            *x /= (n - 1) as f64;
        }
    }
    cov
}

/// Average precision computed the long way from raw distances.
///
/// Sorts (distance, index) pairs ascending with ties broken by index,
/// walks the scored prefix (`ratio` of the relevant count, at least one
/// item, at most the pool), sums precision at each relevant hit and
/// divides by the best achievable hit count in that prefix.
pub fn ap_oracle(dists: &[f64], relevant: &[bool], ratio: f64) -> f64 {
    assert_eq!(dists.len(), relevant.len());
    let total_rel = relevant.iter().filter(|&&r| r).count();
    assert!(total_rel > 0, "oracle needs a relevant item");
    let mut cutoff = (ratio * total_rel as f64).round() as usize;
    if cutoff == 0 {
        cutoff = 1;
    }
    if cutoff > dists.len() {
        cutoff = dists.len();
    }
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &item) in order.iter().take(cutoff).enumerate() {
        if relevant[item] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / total_rel.min(cutoff) as f64
}
