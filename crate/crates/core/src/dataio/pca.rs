//! Principal component analysis for region features.
//!
//! Raw region descriptors can be wide; projecting them onto the top
//! principal directions keeps the attention input small. The basis is
//! found by power iteration with deflation on the sample covariance
//! (divisor `n - 1`), which is plenty at the dimensionalities involved and
//! keeps everything dependency-free and deterministic.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

use super::{ZslDataset, ZslImage};

/// A fitted PCA basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// Mean of the training samples.
    pub mean: Vector,
    /// One orthonormal principal direction per row, descending variance.
    pub components: Matrix,
    /// Sample variance along each component.
    pub variances: Vector,
}

const POWER_ITERS: usize = 1000;
const CONVERGENCE: f64 = 1e-14;

fn covariance(samples: &[Vector], mean: &Vector) -> Matrix {
    let p = mean.len();
    let mut cov = Matrix::zeros(p, p);
    for x in samples {
        for r in 0..p {
            let xr = x.get(r) - mean.get(r);
            if xr == 0.0 {
                continue;
            }
            for c in 0..p {
                cov.add_at(r, c, xr * (x.get(c) - mean.get(c)));
            }
        }
    }
    cov.scale(1.0 / (samples.len() - 1) as f64)
}

/// Orthonormalizes `v` against `rows` of the component matrix; returns the
/// norm left afterwards.
fn orthogonalize(v: &mut Vector, components: &Matrix, rows: usize) -> f64 {
    for j in 0..rows {
        let row = components.row(j);
        let dot: f64 = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        for (slot, &r) in v.data_mut().iter_mut().zip(row) {
            *slot -= dot * r;
        }
    }
    v.norm()
}

/// Flips the vector so its largest-magnitude entry is positive (ties go to
/// the lowest index), making the basis sign-deterministic.
fn fix_sign(v: &mut Vector) {
    let mut pivot = 0;
    for i in 1..v.len() {
        if v.get(i).abs() > v.get(pivot).abs() {
            pivot = i;
        }
    }
    if v.get(pivot) < 0.0 {
        for x in v.data_mut() {
            *x = -*x;
        }
    }
}

/// Fits a PCA basis to the samples.
///
/// Needs at least two samples (sample covariance) and
/// `1 <= n_components <= dim`. When the data has lower rank than the
/// requested component count, the trailing components are an arbitrary
/// orthonormal completion with variance zero.
pub fn pca_fit(samples: &[Vector], n_components: usize) -> Result<PcaBasis> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(
            "pca needs at least two samples".to_string(),
        ));
    }
    let p = samples[0].len();
    if samples.iter().any(|s| s.len() != p) {
        return Err(Error::InvalidArgument(
            "pca samples must share one dimension".to_string(),
        ));
    }
    if n_components == 0 || n_components > p {
        return Err(Error::InvalidArgument(format!(
            "component count must lie in 1..={p}, got {n_components}"
        )));
    }

    let mut mean = Vector::zeros(p);
    for s in samples {
        mean.add_assign(s);
    }
    let mean = mean.scale(1.0 / samples.len() as f64);
    let mut work = covariance(samples, &mean);
    let scale0 = work
        .data()
        .iter()
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(1.0);

    let mut components = Matrix::zeros(n_components, p);
    let mut variances = Vector::zeros(n_components);
    for j in 0..n_components {
        // Start from the basis vector with the largest remaining diagonal
        // mass; deterministic, and essentially never orthogonal to the
        // leading eigenvector.
        let mut pivot = 0;
        for i in 1..p {
            if work.get(i, i) > work.get(pivot, pivot) {
                pivot = i;
            }
        }
        let mut v = Vector::zeros(p);
        v.set(pivot, 1.0);
        orthogonalize(&mut v, &components, j);

        let mut degenerate = work.get(pivot, pivot) <= CONVERGENCE * scale0;
        if !degenerate {
            let mut prev = v.clone();
            for _ in 0..POWER_ITERS {
                let mut next = work.mul_vec(&prev)?;
                let norm = orthogonalize(&mut next, &components, j);
                if norm <= CONVERGENCE * scale0 {
                    degenerate = true;
                    break;
                }
                let next = next.scale(1.0 / norm);
                let drift = 1.0 - next.dot(&prev)?.abs();
                prev = next;
                if drift < CONVERGENCE {
                    break;
                }
            }
            v = prev;
        }
        if degenerate {
            // Exhausted the data's rank: complete the basis with any unit
            // vector orthogonal to what we have.
            let mut found = false;
            for i in 0..p {
                let mut cand = Vector::zeros(p);
                cand.set(i, 1.0);
                let norm = orthogonalize(&mut cand, &components, j);
                if norm > 1e-6 {
                    v = cand.scale(1.0 / norm);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Validation(
                    "could not complete an orthonormal pca basis".to_string(),
                ));
            }
            fix_sign(&mut v);
            components.set_row(j, &v);
            variances.set(j, 0.0);
            continue;
        }
        let cv = work.mul_vec(&v)?;
        let lambda = v.dot(&cv)?.max(0.0);
        fix_sign(&mut v);
        components.set_row(j, &v);
        variances.set(j, lambda);
        // Deflate.
        for r in 0..p {
            for c in 0..p {
                work.add_at(r, c, -lambda * v.get(r) * v.get(c));
            }
        }
    }
    Ok(PcaBasis {
        mean,
        components,
        variances,
    })
}

/// Projects one sample onto the basis: coefficients of the centered
/// sample along each component.
pub fn pca_project(basis: &PcaBasis, x: &Vector) -> Result<Vector> {
    let centered = x.sub(&basis.mean)?;
    basis.components.mul_vec(&centered)
}

/// Replaces every image's region features with their PCA projection.
///
/// The basis is fitted on all regions of all images (each region is one
/// sample); classes, semantics and splits pass through untouched. The
/// resulting dataset has `p = n_components`.
pub fn pca_reduce_dataset(ds: &ZslDataset, n_components: usize) -> Result<ZslDataset> {
    ds.validate()?;
    let mut samples = Vec::with_capacity(ds.images.len() * ds.m);
    for img in &ds.images {
        for col in 0..ds.m {
            samples.push(img.regions.col(col));
        }
    }
    let basis = pca_fit(&samples, n_components)?;
    let images = ds
        .images
        .iter()
        .map(|img| {
            let mut regions = Matrix::zeros(n_components, ds.m);
            for col in 0..ds.m {
                let projected = pca_project(&basis, &img.regions.col(col))?;
                regions.set_col(col, &projected);
            }
            Ok(ZslImage {
                id: img.id,
                class_id: img.class_id,
                regions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ZslDataset {
        p: n_components,
        m: ds.m,
        q: ds.q,
        classes: ds.classes.clone(),
        images,
        seen: ds.seen.clone(),
        unseen: ds.unseen.clone(),
    }
    .canonicalize()
}
