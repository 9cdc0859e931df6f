//! Principal component projection for key and query vectors.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::IndexError;

/// Centering mean plus the top principal directions as orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `output_dim x input_dim`.
    pub components: Vec<f64>,
    /// Eigenvalues of the kept components, descending.
    pub explained_variance: Vec<f64>,
}

/// Fits a projection onto the `out_dim` leading eigenvectors of the centered
/// covariance of row-major `data`. Each component is sign-normalized so that
/// its largest-magnitude entry is positive.
pub fn fit_pca(data: &[f32], dim: usize, out_dim: usize) -> Result<PcaProjection, IndexError> {
    if dim == 0 || data.is_empty() {
        return Err(IndexError::Empty);
    }
    if out_dim == 0 || out_dim > dim {
        return Err(IndexError::InvalidConfig(format!(
            "d_pca={out_dim} must be in [1, {dim}]"
        )));
    }
    let rows = data.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += f64::from(*v);
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let centered = DMatrix::from_fn(rows, dim, |i, j| f64::from(data[i * dim + j]) - mean[j]);
    let cov = centered.tr_mul(&centered) / rows as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(out_dim * dim);
    let mut explained = Vec::with_capacity(out_dim);
    for &c in order.iter().take(out_dim) {
        let col = eig.eigenvectors.column(c);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
        explained.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaProjection {
        input_dim: dim,
        output_dim: out_dim,
        mean,
        components,
        explained_variance: explained,
    })
}

impl PcaProjection {
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        self.components
            .chunks_exact(self.input_dim)
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((w, v), m)| w * (f64::from(*v) - m))
                    .sum::<f64>() as f32
            })
            .collect()
    }

    pub fn apply_all(&self, data: &[f32]) -> Vec<f32> {
        data.chunks_exact(self.input_dim)
            .flat_map(|row| self.apply(row))
            .collect()
    }

    /// Maps a reduced vector back into the input space.
    pub fn reconstruct(&self, y: &[f32]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &v) in self.components.chunks_exact(self.input_dim).zip(y) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += w * f64::from(v);
            }
        }
        out
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_orthonormal() {
        let data: Vec<f32> = (0..200).map(|i| ((i * 37 % 101) as f32).sin()).collect();
        let p = fit_pca(&data, 4, 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = p.component(a).iter().zip(p.component(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn points_on_a_line_reconstruct_exactly() {
        let dir = [1.0f32, -2.0, 0.5];
        let data: Vec<f32> = (0..30)
            .flat_map(|t| {
                let t = t as f32 * 0.25 - 3.0;
                dir.iter().map(move |d| 1.0 + t * d).collect::<Vec<_>>()
            })
            .collect();
        let p = fit_pca(&data, 3, 1).unwrap();
        for row in data.chunks_exact(3) {
            let back = p.reconstruct(&p.apply(row));
            let err: f64 = back.iter().zip(row).map(|(a, b)| (a - f64::from(*b)).powi(2)).sum();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn out_of_range_dims() {
        assert!(fit_pca(&[1.0, 2.0], 2, 0).is_err());
        assert!(fit_pca(&[1.0, 2.0], 2, 3).is_err());
    }
}
