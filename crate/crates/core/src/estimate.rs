//! DML1, DML2, their oracle versions, the variance estimator and intervals.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::crossfit::{CrossFitEvaluations, FoldPartition};
use crate::data::Dataset;
use crate::moment::MomentModel;
use crate::normal;

/// Relative size of |Σψ^a| below which a fold (or the whole sample) is
/// treated as non-identified.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("fold {fold} is non-identified: |sum psi_a| = {value:e} over {size} rows")]
    FoldDegenerate { fold: usize, size: usize, value: f64 },
    #[error("sample is non-identified: |sum psi_a| = {value:e} over {n} rows")]
    GlobalDegenerate { n: usize, value: f64 },
    #[error("nuisance matrix has {eta} rows and p = {p}, dataset has {n} rows and the model p = {model_p}")]
    Shape { n: usize, eta: usize, p: usize, model_p: usize },
    #[error("oracle estimates need truth_eta_1..truth_eta_{p} columns")]
    MissingTruth { p: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    #[serde(rename = "DML1")]
    Dml1,
    #[serde(rename = "DML2")]
    Dml2,
    #[serde(rename = "ORACLE1")]
    Oracle1,
    #[serde(rename = "ORACLE2")]
    Oracle2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dml1, Method::Dml2, Method::Oracle1, Method::Oracle2];

    pub fn is_oracle(self) -> bool {
        matches!(self, Method::Oracle1 | Method::Oracle2)
    }

    /// Fold-average (DML1-style) aggregation.
    pub fn is_fold_average(self) -> bool {
        matches!(self, Method::Dml1 | Method::Oracle1)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dml1 => "DML1",
            Method::Dml2 => "DML2",
            Method::Oracle1 => "ORACLE1",
            Method::Oracle2 => "ORACLE2",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DML1" => Ok(Method::Dml1),
            "DML2" => Ok(Method::Dml2),
            "ORACLE1" => Ok(Method::Oracle1),
            "ORACLE2" => Ok(Method::Oracle2),
            _ => Err(format!("unknown method `{s}` (expected dml1, dml2, oracle1, oracle2)")),
        }
    }
}

/// How DML1 combines the per-fold solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FoldWeighting {
    /// `K⁻¹Σθ̃_k`
    #[default]
    Unweighted,
    /// `Σ(n_k/n)θ̃_k`
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlEstimate {
    pub method: Method,
    pub theta_hat: f64,
    pub sigma2_hat: f64,
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    pub per_fold_theta: Option<Vec<f64>>,
    pub ci: (f64, f64),
    pub flags: u64,
}

/// Flat JSON record of an estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRecord {
    pub method: Method,
    pub theta_hat: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    pub flags: u64,
}

impl DmlEstimate {
    pub fn se(&self) -> f64 {
        (self.sigma2_hat / self.n as f64).sqrt()
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.ci.0 <= theta && theta <= self.ci.1
    }

    /// Replaces σ̂² (for instance by a known design variance) and rebuilds
    /// the interval.
    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2_hat = sigma2;
        self.ci = confidence_interval(self.theta_hat, sigma2, self.n, self.alpha);
        self
    }

    pub fn record(&self) -> EstimateRecord {
        EstimateRecord {
            method: self.method,
            theta_hat: self.theta_hat,
            se: self.se(),
            ci_lower: self.ci.0,
            ci_upper: self.ci.1,
            k: self.k,
            n: self.n,
            alpha: self.alpha,
            flags: self.flags,
        }
    }
}

/// `ψ^a(W_i, η_i)` and `ψ^b(W_i, η_i)` for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiValues {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PsiValues {
    pub fn compute(dataset: &Dataset, model: &MomentModel, eta: &[f64]) -> Result<Self, EstimateError> {
        let n = dataset.n_rows();
        let p = model.p();
        if eta.len() != n * p {
            return Err(EstimateError::Shape { n, eta: eta.len() / p.max(1), p, model_p: p });
        }
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let obs = dataset.observation(i);
            let e = &eta[i * p..(i + 1) * p];
            a.push(model.psi_a(&obs, e));
            b.push(model.psi_b(&obs, e));
        }
        Ok(PsiValues { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }
}

fn check_alpha(alpha: f64) -> Result<(), EstimateError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(EstimateError::BadAlpha(alpha))
    }
}

fn global_ratio(psi: &PsiValues) -> Result<f64, EstimateError> {
    let n = psi.n();
    let sa: f64 = psi.a.iter().sum();
    let sb: f64 = psi.b.iter().sum();
    if !(sa.abs() >= DEGENERACY_TOL * n as f64) {
        return Err(EstimateError::GlobalDegenerate { n, value: sa.abs() });
    }
    Ok(sb / sa)
}

/// `σ̂² = n⁻¹Σm̂_i² / (n⁻¹Σψ̂^a_i)²`
pub fn sigma2_from_psi(psi: &PsiValues, theta: f64) -> Result<f64, EstimateError> {
    let n = psi.n() as f64;
    let mean_a = psi.a.iter().sum::<f64>() / n;
    if !(mean_a.abs() >= DEGENERACY_TOL) {
        return Err(EstimateError::GlobalDegenerate { n: psi.n(), value: mean_a.abs() * n });
    }
    let mean_m2 = psi.a.iter().zip(&psi.b).map(|(a, b)| (b - a * theta).powi(2)).sum::<f64>() / n;
    Ok(mean_m2 / (mean_a * mean_a))
}

pub fn sigma2_hat(dataset: &Dataset, model: &MomentModel, eta: &[f64], theta_hat: f64) -> Result<f64, EstimateError> {
    sigma2_from_psi(&PsiValues::compute(dataset, model, eta)?, theta_hat)
}

/// `θ̂ ∓ z_{1−α/2}·√(σ̂²/n)`
pub fn confidence_interval(theta_hat: f64, sigma2_hat: f64, n: usize, alpha: f64) -> (f64, f64) {
    let half = normal::quantile(1.0 - alpha / 2.0) * (sigma2_hat / n as f64).sqrt();
    (theta_hat - half, theta_hat + half)
}

/// Fold-average estimator from precomputed ψ values.
pub fn dml1_from_psi(
    psi: &PsiValues,
    partition: &FoldPartition,
    alpha: f64,
    weighting: FoldWeighting,
    method: Method,
) -> Result<DmlEstimate, EstimateError> {
    check_alpha(alpha)?;
    let n = psi.n();
    if partition.n() != n {
        return Err(EstimateError::Shape { n, eta: partition.n(), p: 0, model_p: 0 });
    }
    let k = partition.k();
    let mut sa = vec![0.0; k];
    let mut sb = vec![0.0; k];
    for i in 0..n {
        let f = partition.fold_of(i);
        sa[f] += psi.a[i];
        sb[f] += psi.b[i];
    }
    let sizes = partition.sizes();
    let mut per_fold = Vec::with_capacity(k);
    for f in 0..k {
        if !(sa[f].abs() >= DEGENERACY_TOL * sizes[f] as f64) {
            return Err(EstimateError::FoldDegenerate { fold: f + 1, size: sizes[f], value: sa[f].abs() });
        }
        per_fold.push(sb[f] / sa[f]);
    }
    let theta_hat = match weighting {
        FoldWeighting::Unweighted => per_fold.iter().sum::<f64>() / k as f64,
        FoldWeighting::SizeWeighted => {
            per_fold.iter().zip(sizes).map(|(t, &s)| t * s as f64).sum::<f64>() / n as f64
        }
    };
    let sigma2 = sigma2_from_psi(psi, theta_hat)?;
    Ok(DmlEstimate {
        method,
        theta_hat,
        sigma2_hat: sigma2,
        k,
        n,
        alpha,
        per_fold_theta: Some(per_fold),
        ci: confidence_interval(theta_hat, sigma2, n, alpha),
        flags: 0,
    })
}

/// Pooled-moment estimator from precomputed ψ values.
pub fn dml2_from_psi(psi: &PsiValues, k: usize, alpha: f64, method: Method) -> Result<DmlEstimate, EstimateError> {
    check_alpha(alpha)?;
    let theta_hat = global_ratio(psi)?;
    let sigma2 = sigma2_from_psi(psi, theta_hat)?;
    let n = psi.n();
    Ok(DmlEstimate {
        method,
        theta_hat,
        sigma2_hat: sigma2,
        k,
        n,
        alpha,
        per_fold_theta: None,
        ci: confidence_interval(theta_hat, sigma2, n, alpha),
        flags: 0,
    })
}

pub fn dml1(
    dataset: &Dataset,
    model: &MomentModel,
    eta: &CrossFitEvaluations,
    partition: &FoldPartition,
    alpha: f64,
) -> Result<DmlEstimate, EstimateError> {
    dml1_weighted(dataset, model, eta, partition, alpha, FoldWeighting::Unweighted)
}

pub fn dml1_weighted(
    dataset: &Dataset,
    model: &MomentModel,
    eta: &CrossFitEvaluations,
    partition: &FoldPartition,
    alpha: f64,
    weighting: FoldWeighting,
) -> Result<DmlEstimate, EstimateError> {
    let psi = PsiValues::compute(dataset, model, eta.eta_hat())?;
    let mut est = dml1_from_psi(&psi, partition, alpha, weighting, Method::Dml1)?;
    est.flags = eta.total_flags();
    Ok(est)
}

pub fn dml2(
    dataset: &Dataset,
    model: &MomentModel,
    eta: &CrossFitEvaluations,
    alpha: f64,
) -> Result<DmlEstimate, EstimateError> {
    let psi = PsiValues::compute(dataset, model, eta.eta_hat())?;
    let mut est = dml2_from_psi(&psi, eta.k(), alpha, Method::Dml2)?;
    est.flags = eta.total_flags();
    Ok(est)
}

/// ORACLE1 and ORACLE2: the same estimators at the true nuisance values.
pub fn oracle_estimates(
    dataset: &Dataset,
    model: &MomentModel,
    partition: &FoldPartition,
    alpha: f64,
) -> Result<(DmlEstimate, DmlEstimate), EstimateError> {
    let p = model.p();
    let eta = dataset.truth_eta(p).ok_or(EstimateError::MissingTruth { p })?;
    let psi = PsiValues::compute(dataset, model, &eta)?;
    let o1 = dml1_from_psi(&psi, partition, alpha, FoldWeighting::Unweighted, Method::Oracle1)?;
    let o2 = dml2_from_psi(&psi, partition.k(), alpha, Method::Oracle2)?;
    Ok((o1, o2))
}
