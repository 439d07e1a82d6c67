//! Fréchet distance over projected clip features, PSNR and loss-curve
//! smoothness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAX_FEATURES: usize = 16;

/// Fixed projection from flattened clips to `m` features; rows orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub projection: DMatrix<f64>,
    pub seed: u64,
}

impl FeatureSpec {
    pub fn new(input_len: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > MAX_FEATURES || m > input_len {
            return Err(Error::invalid(format!(
                "feature count {m} must be in [1, min({MAX_FEATURES}, {input_len})]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = Tensor::randn(&[input_len, m], 1.0, &mut rng);
        let basis = DMatrix::from_row_slice(input_len, m, gauss.data());
        let q = basis.qr().q();
        Ok(FeatureSpec {
            projection: q.transpose(),
            seed,
        })
    }

    pub fn features(&self) -> usize {
        self.projection.nrows()
    }

    pub fn input_len(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, clip: &Tensor) -> Result<DVector<f64>> {
        if clip.len() != self.input_len() {
            return Err(Error::shape(
                "toy_fvd",
                format!("clip of {} values, projection expects {}", clip.len(), self.input_len()),
            ));
        }
        Ok(&self.projection * DVector::from_column_slice(clip.data()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    /// Sample mean and unbiased covariance.
    pub fn fit(samples: &[DVector<f64>]) -> Result<Self> {
        let n = samples.len();
        let m = samples.first().map_or(0, |s| s.len());
        if n < m + 1 || n < 2 {
            return Err(Error::invalid(format!(
                "Gaussian fit over {m} features needs at least {} samples, got {n}",
                (m + 1).max(2)
            )));
        }
        let mut mean = DVector::zeros(m);
        for s in samples {
            mean += s;
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(m, m);
        for s in samples {
            let c = s - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(GaussianFit { mean, cov })
    }
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa-μb‖² + tr(Σa + Σb - 2(Σa Σb)^{1/2})`, with the cross term evaluated as
/// `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})` on a symmetrized product, negative
/// eigenvalues floored at zero.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> f64 {
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross
}

fn fit_set(clips: &[Tensor], spec: &FeatureSpec, label: &str) -> Result<GaussianFit> {
    let need = spec.features() + 1;
    if clips.len() < need {
        return Err(Error::invalid(format!(
            "set {label} has {} clips; toy FVD with {} features needs at least {need}",
            clips.len(),
            spec.features()
        )));
    }
    let shape = clips[0].shape();
    let feats = clips
        .iter()
        .map(|c| {
            if c.shape() != shape {
                return Err(Error::shape(
                    "toy_fvd",
                    format!("set {label} mixes shapes {shape:?} and {:?}", c.shape()),
                ));
            }
            spec.project(c)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianFit::fit(&feats)
}

/// Fréchet distance between Gaussian fits of projected clips.
pub fn toy_fvd(set_a: &[Tensor], set_b: &[Tensor], spec: &FeatureSpec) -> Result<f64> {
    let a = fit_set(set_a, spec, "a")?;
    let b = fit_set(set_b, spec, "b")?;
    if set_a[0].shape() != set_b[0].shape() {
        return Err(Error::shape(
            "toy_fvd",
            format!("{:?} vs {:?}", set_a[0].shape(), set_b[0].shape()),
        ));
    }
    Ok(frechet_distance(&a, &b))
}

/// `10·log10(1 / MSE)` for signals in `[0, 1]`; `+∞` when identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean, over every run of `window` consecutive first differences, of their
/// population variance.
pub fn smoothness(trace: &[f64], window: usize) -> Result<f64> {
    if window < 2 || trace.len() <= window {
        return Err(Error::invalid(format!(
            "smoothness needs trace length > window >= 2, got {} and {window}",
            trace.len()
        )));
    }
    let diffs: Vec<f64> = trace.windows(2).map(|w| w[1] - w[0]).collect();
    let runs = diffs.len() - window + 1;
    let total: f64 = diffs
        .windows(window)
        .map(|w| {
            let mean = w.iter().sum::<f64>() / window as f64;
            w.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / window as f64
        })
        .sum();
    Ok(total / runs as f64)
}
