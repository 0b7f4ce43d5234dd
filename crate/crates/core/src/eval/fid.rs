//! Frechet distance between Gaussian fits of image features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gateway::remote::RemoteFeatures;
use crate::image::Image;
use crate::seed;

pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Average-pools the image to a `grid x grid` RGB thumbnail and applies a
/// seeded Gaussian projection.
#[derive(Debug, Clone)]
pub struct LinearExtractor {
    grid: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl LinearExtractor {
    pub fn new(seed: u64, grid: usize, dim: usize) -> Result<Self> {
        if grid == 0 || dim == 0 {
            return Err(Error::InvalidInput("extractor grid and dim must be positive".into()));
        }
        let d_in = grid * grid * 3;
        let mut rng = seed::rng(seed::derive(&[&seed.to_le_bytes(), b"linear-extractor"]));
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights = (0..dim * d_in)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self { grid, dim, weights })
    }

    pub fn pooled(&self, image: &Image) -> Vec<f64> {
        pool(image, self.grid)
    }
}

/// Mean RGB over a `grid x grid` partition, scaled to `[0, 1]`.
pub fn pool(image: &Image, grid: usize) -> Vec<f64> {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut sums = vec![0.0; grid * grid * 3];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..h {
        let gy = y * grid / h.max(1);
        for x in 0..w {
            let gx = x * grid / w.max(1);
            let cell = gy * grid + gx;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += image.rgb[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            for c in 0..3 {
                sums[cell * 3 + c] /= n as f64;
            }
        }
    }
    sums
}

impl FeatureExtractor for LinearExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let x = self.pooled(image);
        Ok(self
            .weights
            .chunks_exact(x.len())
            .map(|row| crate::tensor::dot(row, &x))
            .collect())
    }
}

/// Remote extractor, e.g. an Inception network behind the backend protocol.
pub struct RemoteExtractor {
    pub features: RemoteFeatures,
    pub dim: usize,
}

impl FeatureExtractor for RemoteExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let f = self.features.extract(image)?;
        crate::tensor::check_dim("remote features", self.dim, f.len())?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    /// Unbiased (`n - 1`) covariance.
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("empty feature vectors".into()));
        }
        for f in features {
            crate::tensor::check_dim("feature vector", d, f.len())?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("feature vector".into()));
            }
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[j]);
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }
}

/// Square root of a symmetric PSD matrix; negative eigenvalues (from
/// round-off or rank deficiency) are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut clamped = false;
    let roots = eig.eigenvalues.map(|l| {
        if l < -1e-9 * scale {
            clamped = true;
        }
        l.max(0.0).sqrt()
    });
    if clamped {
        log::warn!("covariance square root: clamped negative eigenvalues to zero");
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn one_sided(a: &GaussianFit, b: &GaussianFit) -> f64 {
    let ra = sqrt_psd(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let cross = sqrt_psd(&inner).trace();
    let dm = &a.mean - &b.mean;
    dm.dot(&dm) + a.cov.trace() + b.cov.trace() - 2.0 * cross
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, symmetrized and
/// clamped at zero.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    crate::tensor::check_dim("gaussian fit", a.mean.len(), b.mean.len())?;
    let d = 0.5 * (one_sided(a, b) + one_sided(b, a));
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}

pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianFit::fit(a)?, &GaussianFit::fit(b)?)
}

pub fn extract_all(images: &[Image], extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| extractor.extract(i)).collect()
}

pub fn fid_pair(set_a: &[Image], set_b: &[Image], extractor: &dyn FeatureExtractor) -> Result<f64> {
    fid_from_features(&extract_all(set_a, extractor)?, &extract_all(set_b, extractor)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let imgs: Vec<Image> = (0..6).map(|i| Image::synthetic(i, 8, 8)).collect();
        let ex = LinearExtractor::new(1, 4, 5).unwrap();
        assert!(fid_pair(&imgs, &imgs, &ex).unwrap().abs() < 1e-6);
    }

    #[test]
    fn pooling_averages_cells() {
        let img = Image::new(2, 2, vec![0, 0, 0, 255, 255, 255, 0, 0, 0, 255, 255, 255]).unwrap();
        assert_eq!(pool(&img, 1), vec![0.5; 3]);
    }

    #[test]
    fn rejects_tiny_sets() {
        assert!(GaussianFit::fit(&[vec![1.0]]).is_err());
    }
}
