//! Closed-form linear-VAE machinery: objective terms, gradients, critical
//! points and the exact beta-response functions used as ground truth by the
//! rest of the crate.
//!
//! The model is x | z ~ N(Dz + mu, I), q(z|x) = N(E(x - mu), C) with diagonal
//! C shared across data points and the observation variance fixed to 1, so
//! beta is the only trade-off knob. Dataset expectations of quadratic forms
//! are evaluated exactly as traces against the sample covariance S, and
//! gradients are reported for the dataset-total loss (factor N).

use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, DenseMatrix, DiagonalVector, SpectrumDecomp};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Parameters of the linear VAE. `enc` is k x d, `dec` is d x k, `cov` holds
/// the k strictly positive diagonal entries of the shared posterior
/// covariance.
#[derive(Debug, Clone)]
pub struct LinearVaeParams {
    pub enc: DenseMatrix,
    pub cov: DiagonalVector,
    pub dec: DenseMatrix,
    pub mean: Vec<f64>,
}

impl LinearVaeParams {
    pub fn latent_dim(&self) -> usize {
        self.enc.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let op = "LinearVaeParams::validate";
        let (k, d) = (self.latent_dim(), self.data_dim());
        if self.dec.rows() != d || self.dec.cols() != k {
            return Err(Error::dimension(op, "decoder shape must be d x k"));
        }
        if self.cov.dim() != k {
            return Err(Error::dimension(op, "covariance dim must equal latent dim"));
        }
        if self.mean.len() != d {
            return Err(Error::dimension(op, "mean dim must equal data dim"));
        }
        if k > d {
            return Err(Error::dimension(op, "latent dim must not exceed data dim"));
        }
        if !self.cov.all_positive() {
            return Err(Error::domain(op, "covariance entries must be strictly positive"));
        }
        Ok(())
    }
}

/// First and second moments of a dataset; `cov` is the biased sample
/// covariance around `mean`.
#[derive(Debug, Clone)]
pub struct DatasetMoments {
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
    pub count: usize,
}

impl DatasetMoments {
    pub fn from_data(data: &DenseMatrix) -> Result<Self> {
        let (n, d) = (data.rows(), data.cols());
        if n == 0 {
            return Err(Error::dimension("DatasetMoments::from_data", "empty dataset"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let cov = sample_covariance(data, &mean)?;
        Ok(Self { mean, cov, count: n })
    }

    /// Moments with covariance U diag(lambda) U^T rebuilt from a spectrum and
    /// zero mean; used by the purely analytic paths.
    pub fn from_spectrum(spectrum: &SpectrumDecomp) -> Self {
        Self {
            mean: vec![0.0; spectrum.source_dim],
            cov: spectrum.reconstruct(),
            count: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_shapes(params: &LinearVaeParams, moments: &DatasetMoments, op: &'static str) -> Result<()> {
    params.validate()?;
    if moments.dim() != params.data_dim() {
        return Err(Error::dimension(op, "moments dim must equal data dim"));
    }
    Ok(())
}

/// Dataset-average KL divergence between the variational posterior and the
/// standard normal prior, in nats:
/// (1/2)(-sum log C_i + tr(E^T E S) + sum C_i - k).
pub fn kl_closed_form(params: &LinearVaeParams, moments: &DatasetMoments) -> Result<f64> {
    check_shapes(params, moments, "kl_closed_form")?;
    let k = params.latent_dim();
    let c = params.cov.entries();
    // tr(E^T E S) = sum_i e_i^T S e_i over rows of E.
    let es = params.enc.matmul(&moments.cov);
    let tr_ees: f64 = (0..k)
        .map(|i| crate::linalg::dot(es.row(i), params.enc.row(i)))
        .sum();
    let log_det: f64 = c.iter().map(|v| v.ln()).sum();
    Ok(0.5 * (-log_det + tr_ees + params.cov.sum() - k as f64))
}

/// Dataset-average expected negative log-likelihood under the posterior:
/// (1/2)(tr(D C D^T) + tr((I - DE) S (I - DE)^T)) + (d/2) log 2 pi.
pub fn distortion_closed_form(params: &LinearVaeParams, moments: &DatasetMoments) -> Result<f64> {
    check_shapes(params, moments, "distortion_closed_form")?;
    let d = params.data_dim();
    // tr(D C D^T) = sum_j C_j * ||d_j||^2 over columns of D.
    let col_norms = params.dec.gram_diag();
    let tr_dcd: f64 = col_norms
        .iter()
        .zip(params.cov.entries())
        .map(|(n2, c)| n2 * c)
        .sum();
    let de = params.dec.matmul(&params.enc);
    let m = DenseMatrix::identity(d).sub(&de);
    let ms = m.matmul(&moments.cov);
    let tr_msm: f64 = (0..d).map(|i| crate::linalg::dot(ms.row(i), m.row(i))).sum();
    Ok(0.5 * (tr_dcd + tr_msm) + 0.5 * d as f64 * LN_2PI)
}

/// distortion + beta * rate, the beta-VAE objective in nats.
pub fn beta_objective(params: &LinearVaeParams, moments: &DatasetMoments, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::domain("beta_objective", "beta must be positive"));
    }
    Ok(distortion_closed_form(params, moments)? + beta * kl_closed_form(params, moments)?)
}

/// Gradient of the dataset-total loss with respect to the diagonal posterior
/// covariance: (N/2)((D^T D)_ii + beta - beta / C_i).
pub fn grad_c(params: &LinearVaeParams, moments: &DatasetMoments, beta: f64) -> Result<DiagonalVector> {
    check_shapes(params, moments, "grad_c")?;
    if !(beta > 0.0) {
        return Err(Error::domain("grad_c", "beta must be positive"));
    }
    let n = moments.count as f64;
    let dtd = params.dec.gram_diag();
    Ok(DiagonalVector::new(
        dtd.iter()
            .zip(params.cov.entries())
            .map(|(g, c)| 0.5 * n * (g + beta - beta / c))
            .collect(),
    ))
}

/// Gradient of the dataset-total loss with respect to the encoder weight:
/// N (D^T D E S + beta E S - D^T S).
pub fn grad_e(params: &LinearVaeParams, moments: &DatasetMoments, beta: f64) -> Result<DenseMatrix> {
    check_shapes(params, moments, "grad_e")?;
    if !(beta > 0.0) {
        return Err(Error::domain("grad_e", "beta must be positive"));
    }
    let n = moments.count as f64;
    let es = params.enc.matmul(&moments.cov);
    let dt = params.dec.transpose();
    let dtd = dt.matmul(&params.dec);
    let term = dtd.matmul(&es).add(&es.scale(beta)).sub(&dt.matmul(&moments.cov));
    Ok(term.scale(n))
}

/// Covariance response C*(beta) = beta (diag(D^T D) + beta I)^{-1}.
pub fn optimal_c(dec: &DenseMatrix, beta: f64) -> Result<DiagonalVector> {
    if !(beta > 0.0) {
        return Err(Error::domain("optimal_c", "beta must be positive"));
    }
    Ok(DiagonalVector::new(
        dec.gram_diag().iter().map(|g| beta / (g + beta)).collect(),
    ))
}

/// Encoder response E*(beta) = (D^T D + beta I)^{-1} D^T.
pub fn optimal_e(dec: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
    if !(beta > 0.0) {
        return Err(Error::domain("optimal_e", "beta must be positive"));
    }
    let dt = dec.transpose();
    let dtd = dt.matmul(dec);
    dtd.solve_spd_shifted(beta, &dt)
}

/// Decoder response D*(beta): column i is U_i * max(0, lambda_i - beta)^(1/2)
/// over the top-k eigenpairs (rotation fixed to the identity).
pub fn optimal_d(spectrum: &SpectrumDecomp, beta: f64, k: usize) -> Result<DenseMatrix> {
    let op = "optimal_d";
    if !(beta > 0.0) {
        return Err(Error::domain(op, "beta must be positive"));
    }
    if k > spectrum.source_dim {
        return Err(Error::dimension(op, "latent dim exceeds spectrum dim"));
    }
    let d = spectrum.source_dim;
    let mut out = DenseMatrix::zeros(d, k);
    for j in 0..k {
        let scale = (spectrum.eigvals.entries()[j] - beta).max(0.0).sqrt();
        for i in 0..d {
            out.set(i, j, spectrum.eigvecs.get(i, j) * scale);
        }
    }
    Ok(out)
}

/// Exact (rate, distortion) point of the jointly optimal linear VAE at the
/// given beta, evaluated through the three response functions.
pub fn analytic_rd_point(spectrum: &SpectrumDecomp, beta: f64, k: usize) -> Result<(f64, f64)> {
    let dec = optimal_d(spectrum, beta, k)?;
    let enc = optimal_e(&dec, beta)?;
    let cov = optimal_c(&dec, beta)?;
    let moments = DatasetMoments::from_spectrum(spectrum);
    let params = LinearVaeParams { enc, cov, dec, mean: moments.mean.clone() };
    let rate = kl_closed_form(&params, &moments)?;
    let distortion = distortion_closed_form(&params, &moments)?;
    Ok((rate, distortion))
}
