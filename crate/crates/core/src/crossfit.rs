//! Fold partitions and out-of-fold nuisance evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{validate_for_model, DataError, Dataset, ValidationIssue};
use crate::kernel::{bandwidth, KernelError, KernelOrder, KernelSpec, NwEnsemble};
use crate::moment::MomentModel;

#[derive(Debug, Error)]
pub enum CrossFitError {
    #[error("fold count K = {k} must satisfy 2 <= K <= n = {n}")]
    FoldCount { n: usize, k: usize },
    #[error("fold assignment must use every label 0..{k} and nothing else")]
    BadAssignment { k: usize },
    #[error("partition covers {partition} rows but the dataset has {dataset}")]
    SizeMismatch { partition: usize, dataset: usize },
    #[error("dataset does not fit the model: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationIssue>),
    #[error("oracle nuisance needs truth_eta_1..truth_eta_{p} columns")]
    MissingTruth { p: usize },
    #[error("fold {fold}, component {component}, row {row}: {source}")]
    Kernel {
        fold: usize,
        component: usize,
        row: usize,
        #[source]
        source: KernelError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Assignment of rows to K folds. Fold labels are 0-based internally and
/// 1-based in exported files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    k: usize,
    assignment: Vec<usize>,
    sizes: Vec<usize>,
}

impl FoldPartition {
    /// Seeded uniform permutation of the rows cut into K contiguous blocks;
    /// the first `n mod K` blocks get one extra row.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self, CrossFitError> {
        if k < 2 || k > n {
            return Err(CrossFitError::FoldCount { n, k });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (base, extra) = (n / k, n % k);
        let mut assignment = vec![0; n];
        let mut pos = 0;
        for fold in 0..k {
            let size = base + usize::from(fold < extra);
            for &row in &perm[pos..pos + size] {
                assignment[row] = fold;
            }
            pos += size;
        }
        Self::from_assignment(assignment, k)
    }

    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self, CrossFitError> {
        let n = assignment.len();
        if k < 2 || k > n {
            return Err(CrossFitError::FoldCount { n, k });
        }
        let mut sizes = vec![0; k];
        for &f in &assignment {
            if f >= k {
                return Err(CrossFitError::BadAssignment { k });
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(CrossFitError::BadAssignment { k });
        }
        Ok(FoldPartition { k, assignment, sizes })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignment[row]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

pub fn partition_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition, CrossFitError> {
    FoldPartition::new(n, k, seed)
}

/// How the nuisance values are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuisanceConfig {
    /// Nadaraya–Watson with bandwidth `c·n0^{−φ₀}`, shared by all components.
    Kernel {
        order: KernelOrder,
        c: f64,
        phi0: f64,
        propensity_floor: Option<f64>,
    },
    /// Read the dataset's truth_eta columns.
    Oracle,
}

/// Out-of-fold nuisance values, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitEvaluations {
    p: usize,
    k: usize,
    // Row-major n × p.
    eta_hat: Vec<f64>,
    flags: Vec<u32>,
    n0_per_fold: Vec<usize>,
    fold_id: Vec<usize>,
}

impl CrossFitEvaluations {
    /// Wraps an externally computed η̂ matrix (row-major n × p).
    pub fn from_matrix(eta_hat: Vec<f64>, p: usize, partition: &FoldPartition) -> Result<Self, CrossFitError> {
        let n = partition.n();
        if eta_hat.len() != n * p {
            return Err(CrossFitError::SizeMismatch { partition: n, dataset: eta_hat.len() / p.max(1) });
        }
        Ok(CrossFitEvaluations {
            p,
            k: partition.k(),
            eta_hat,
            flags: vec![0; n],
            n0_per_fold: partition.sizes().iter().map(|s| n - s).collect(),
            fold_id: partition.assignment().to_vec(),
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.flags.len()
    }

    pub fn eta_hat(&self) -> &[f64] {
        &self.eta_hat
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.eta_hat[i * self.p..(i + 1) * self.p]
    }

    /// Number of floored components per row.
    pub fn flags(&self) -> &[u32] {
        &self.flags
    }

    pub fn total_flags(&self) -> u64 {
        self.flags.iter().map(|&f| f as u64).sum()
    }

    pub fn n0_per_fold(&self) -> &[usize] {
        &self.n0_per_fold
    }

    /// CSV with columns eta_1..eta_p and a 1-based fold_id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.p).map(|j| format!("eta_{j}")).collect();
        header.push("fold_id".into());
        w.write_record(&header).map_err(DataError::from)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push((self.fold_id[i] + 1).to_string());
            w.write_record(&rec).map_err(DataError::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// For each fold, fits every nuisance component on the fold's complement and
/// evaluates it at the fold's covariates.
pub fn crossfit_nuisance(
    dataset: &Dataset,
    model: &MomentModel,
    partition: &FoldPartition,
    config: &NuisanceConfig,
) -> Result<CrossFitEvaluations, CrossFitError> {
    validate_for_model(dataset, model).map_err(CrossFitError::Validation)?;
    let n = dataset.n_rows();
    if partition.n() != n {
        return Err(CrossFitError::SizeMismatch { partition: partition.n(), dataset: n });
    }
    let p = model.p();
    let (order, c, phi0, floor) = match *config {
        NuisanceConfig::Oracle => {
            let eta = dataset.truth_eta(p).ok_or(CrossFitError::MissingTruth { p })?;
            return CrossFitEvaluations::from_matrix(eta, p, partition);
        }
        NuisanceConfig::Kernel { order, c, phi0, propensity_floor } => (order, c, phi0, propensity_floor),
    };

    let mut eta_hat = vec![0.0; n * p];
    let mut flags = vec![0u32; n];
    let mut n0_per_fold = Vec::with_capacity(partition.k());
    for fold in 0..partition.k() {
        let train = partition.complement(fold);
        let rows = partition.members(fold);
        let n0 = train.len();
        n0_per_fold.push(n0);
        let kernel = KernelSpec::new(order, bandwidth(c, n0, phi0), dataset.d_x()).map_err(|source| {
            CrossFitError::Kernel { fold: fold + 1, component: 0, row: rows[0], source }
        })?;
        let ens = NwEnsemble::fit(model.nuisance_specs(), dataset, &train, kernel, floor).map_err(|source| {
            CrossFitError::Kernel { fold: fold + 1, component: 0, row: rows[0], source }
        })?;
        let results: Vec<_> = rows
            .par_iter()
            .map_init(
                || (vec![0.0; p], Vec::new()),
                |(out, sums), &i| {
                    ens.eval_into(dataset.covariate_row(i), out, sums).map(|f| (out.clone(), f.floored))
                },
            )
            .collect();
        for (&i, res) in rows.iter().zip(results) {
            let (vals, fl) = res.map_err(|source| {
                let component = match &source {
                    KernelError::EmptyNeighborhood { component, .. } => *component,
                    _ => 0,
                };
                CrossFitError::Kernel { fold: fold + 1, component, row: i, source }
            })?;
            eta_hat[i * p..(i + 1) * p].copy_from_slice(&vals);
            flags[i] = fl;
        }
    }
    Ok(CrossFitEvaluations {
        p,
        k: partition.k(),
        eta_hat,
        flags,
        n0_per_fold,
        fold_id: partition.assignment().to_vec(),
    })
}
