use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen};
use crate::quantize::ItemRep;
use crate::scalar::Scalar;

/// Fitted principal-component projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca<T> {
    pub mean: Vec<T>,
    /// `target_d` unit axes, each of the input dimension.
    pub components: Vec<Vec<T>>,
    /// Eigenvalues of the kept axes divided by total variance.
    pub explained_variance_ratio: Vec<T>,
}

impl<T: Scalar> Pca<T> {
    pub fn project(&self, x: &[T]) -> Vec<T> {
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        self.components.iter().map(|c| dot(c, &centered)).collect()
    }

    pub fn reconstruct(&self, z: &[T]) -> Vec<T> {
        let mut out = self.mean.clone();
        for (&coef, axis) in z.iter().zip(&self.components) {
            for (o, &a) in out.iter_mut().zip(axis) {
                *o = *o + coef * a;
            }
        }
        out
    }
}

/// PCA fitted on all items jointly. Each axis is oriented so that its
/// largest-magnitude component is positive (first such index on ties).
pub fn reduce_dim<T: Scalar>(
    reps: &[ItemRep<T>],
    target_d: usize,
) -> Result<(Vec<ItemRep<T>>, Pca<T>)> {
    let Some(first) = reps.first() else {
        return Err(Error::Argument("no representations to reduce".into()));
    };
    let d = first.vector.len();
    if target_d == 0 || target_d > d {
        return Err(Error::Argument(format!(
            "target dimension {target_d} must lie in [1, {d}]"
        )));
    }
    if reps.len() < target_d + 1 {
        return Err(Error::Argument(format!(
            "need at least {} items for {target_d} components, got {}",
            target_d + 1,
            reps.len()
        )));
    }
    let n = T::lit(reps.len() as f64);
    let mut mean = vec![T::zero(); d];
    for r in reps {
        if r.vector.len() != d {
            return Err(Error::Dimension {
                item: r.item,
                expected: d,
                found: r.vector.len(),
            });
        }
        for (m, &x) in mean.iter_mut().zip(&r.vector) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut cov = vec![T::zero(); d * d];
    for r in reps {
        let c: Vec<T> = r.vector.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] = cov[i * d + j] + c[i] * c[j];
            }
        }
    }
    let denom = n - T::one();
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let total: T = values.iter().map(|&v| v.max(T::zero())).sum();
    let tol = values[0].abs().max(T::min_positive_value()) * T::epsilon() * T::lit(1e3 * d as f64);
    let rank = values.iter().filter(|&&v| v > tol).count();
    if rank < target_d {
        return Err(Error::DegenerateCovariance {
            rank,
            requested: target_d,
        });
    }
    let components: Vec<Vec<T>> = (0..target_d)
        .map(|k| {
            let mut axis = vectors[k * d..(k + 1) * d].to_vec();
            let mut lead = 0;
            for (i, a) in axis.iter().enumerate() {
                if a.abs() > axis[lead].abs() {
                    lead = i;
                }
            }
            if axis[lead] < T::zero() {
                for a in &mut axis {
                    *a = -*a;
                }
            }
            axis
        })
        .collect();
    let pca = Pca {
        mean,
        components,
        explained_variance_ratio: values[..target_d].iter().map(|&v| v / total).collect(),
    };
    let out = reps
        .iter()
        .map(|r| ItemRep {
            item: r.item,
            vector: pca.project(&r.vector),
        })
        .collect();
    Ok((out, pca))
}
