//! Simulation designs with analytic truths and a deterministic Monte Carlo
//! runner.
//!
//! Replication `r` draws its data from `replication_seed(seed, r)` and its
//! fold partitions from `partition_seed(fold_seed, r, K)`, so results do not
//! depend on how replications are scheduled across workers.

use std::fmt;
use std::io::Write;
use std::num::NonZeroUsize;
use std::str::FromStr;
use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::crossfit::{crossfit_nuisance, FoldPartition, NuisanceConfig};
use crate::data::{Dataset, Role, RoleMap};
use crate::estimate::{dml1_from_psi, dml2_from_psi, DmlEstimate, FoldWeighting, Method, PsiValues};
use crate::kernel::KernelOrder;
use crate::moment::{catalog_model, ModelId, MomentModel};
use crate::normal;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Data seed of replication `r` (0-based).
pub fn replication_seed(master: u64, r: usize) -> u64 {
    mix64(master.wrapping_add((r as u64 + 1).wrapping_mul(GOLDEN)))
}

/// Partition seed of replication `r` for fold count `k`.
pub fn partition_seed(fold_seed: u64, r: usize, k: usize) -> u64 {
    mix64(replication_seed(fold_seed, r) ^ (k as u64).wrapping_mul(GOLDEN))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DesignName {
    #[serde(rename = "ATT_DID")]
    AttDid,
    #[serde(rename = "LATE")]
    Late,
}

impl fmt::Display for DesignName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignName::AttDid => "ATT_DID",
            DesignName::Late => "LATE",
        })
    }
}

impl FromStr for DesignName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "att-did" => Ok(DesignName::AttDid),
            "late" => Ok(DesignName::Late),
            _ => Err(format!("unknown design `{s}` (expected att-did or late)")),
        }
    }
}

impl DesignName {
    pub fn model_id(self) -> ModelId {
        match self {
            DesignName::AttDid => ModelId::AttDid,
            DesignName::Late => ModelId::Late,
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Dataset {
        match self {
            DesignName::AttDid => gen_att_did(n, seed),
            DesignName::Late => gen_late(n, seed),
        }
    }

    pub fn theta0(self) -> f64 {
        0.0
    }

    /// Asymptotic variance σ² of the design at the truth.
    pub fn sigma2(self) -> f64 {
        match self {
            DesignName::AttDid => att_did_sigma2(),
            DesignName::Late => late_sigma2(),
        }
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn att_did_f_reg(x: &[f64]) -> f64 {
    210.0 + 6.85 * x[0] + 3.425 * (x[1] + x[2] + x[3])
}

pub fn att_did_propensity(x: &[f64]) -> f64 {
    logistic(0.25 * (-x[0] + 0.5 * x[1] - 0.25 * x[2] - 0.1 * x[3]))
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Poisson draw by CDF inversion.
fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> f64 {
    let u: f64 = rng.random();
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf && p > 0.0 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k as f64
}

fn role_map(pairs: &[(Role, &str)]) -> RoleMap {
    pairs.iter().map(|(r, c)| (*r, c.to_string())).collect()
}

/// Two-period panel with a logistic propensity and true ATT = 0.
/// Columns: Y, Y0, A, X1..X4, eta_1, eta_2, theta.
pub fn gen_att_did(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..10).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let x: [f64; 4] = std::array::from_fn(|_| rng.random());
        let f = att_did_f_reg(&x);
        let p = att_did_propensity(&x);
        let a = bernoulli(&mut rng, p);
        let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let (e0, e10, e11, ev) = (e[0], e[1], e[2], e[3]);
        let v = a * f + ev;
        let y0 = f + v + e0;
        let y1 = 2.0 * f + v + if a == 1.0 { e11 } else { e10 };
        let row = [y1, y0, a, x[0], x[1], x[2], x[3], f, 1.0 / (1.0 - p), 0.0];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let names = ["Y", "Y0", "A", "X1", "X2", "X3", "X4", "eta_1", "eta_2", "theta"];
    let roles = role_map(&[
        (Role::Outcome, "Y"),
        (Role::OutcomePre, "Y0"),
        (Role::Treatment, "A"),
        (Role::Covariate(1), "X1"),
        (Role::Covariate(2), "X2"),
        (Role::Covariate(3), "X3"),
        (Role::Covariate(4), "X4"),
        (Role::TruthEta(1), "eta_1"),
        (Role::TruthEta(2), "eta_2"),
        (Role::TruthTheta, "theta"),
    ]);
    Dataset::new(names.iter().map(|s| s.to_string()).zip(cols).collect(), roles).expect("valid design data")
}

/// The six true nuisance values of the instrument design at `x`.
pub fn late_truth(x: f64) -> [f64; 6] {
    let lam = (x / 2.0).exp();
    let lo = normal::cdf(x - 0.5);
    let hi = normal::cdf(x + 0.5);
    let mean_y = lam + 2.0 * lo + (1.0 - hi);
    [mean_y, mean_y, hi, lo, 1.0 / lo, 1.0 / (1.0 - lo)]
}

/// Binary instrument with always-, never-takers and compliers, Poisson
/// outcomes and true LATE = 0. Columns: Y, D, Z, X1, eta_1..eta_6, theta.
pub fn gen_late(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..11).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let x: f64 = rng.random();
        let v: f64 = rng.sample(StandardNormal);
        let d1 = v <= x + 0.5;
        let d0 = v <= x - 0.5;
        let z = bernoulli(&mut rng, normal::cdf(x - 0.5));
        let lam = (x / 2.0).exp();
        let xi1 = poisson(&mut rng, lam);
        let xi2 = poisson(&mut rng, lam);
        let xi3 = poisson(&mut rng, 2.0);
        let xi4 = poisson(&mut rng, 1.0);
        let shared = if d1 && d0 {
            xi3
        } else if !d1 && !d0 {
            xi4
        } else {
            0.0
        };
        let d = if z == 1.0 { d1 } else { d0 };
        let y = if d { xi1 + shared } else { xi2 + shared };
        let t = late_truth(x);
        let row = [y, f64::from(u8::from(d)), z, x, t[0], t[1], t[2], t[3], t[4], t[5], 0.0];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let names = ["Y", "D", "Z", "X1", "eta_1", "eta_2", "eta_3", "eta_4", "eta_5", "eta_6", "theta"];
    let mut pairs = vec![
        (Role::Outcome, "Y"),
        (Role::Treatment, "D"),
        (Role::Instrument, "Z"),
        (Role::Covariate(1), "X1"),
        (Role::TruthTheta, "theta"),
    ];
    let eta_names = ["eta_1", "eta_2", "eta_3", "eta_4", "eta_5", "eta_6"];
    pairs.extend(eta_names.iter().enumerate().map(|(j, s)| (Role::TruthEta(j + 1), *s)));
    Dataset::new(names.iter().map(|s| s.to_string()).zip(cols).collect(), role_map(&pairs))
        .expect("valid design data")
}

fn gauss_legendre(points: usize) -> GaussLegendre {
    GaussLegendre::new(NonZeroUsize::new(points).expect("positive degree"))
}

/// `σ² = E[2p/(1−p)] / E[p]²` by 4-d Gauss–Legendre quadrature on [0,1]⁴.
pub fn att_did_sigma2() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| {
        let rule = gauss_legendre(16);
        let nodes: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for &(a, wa) in &nodes {
            for &(b, wb) in &nodes {
                for &(c, wc) in &nodes {
                    for &(d, wd) in &nodes {
                        let w = wa * wb * wc * wd;
                        let p = att_did_propensity(&[a, b, c, d]);
                        num += w * 2.0 * p / (1.0 - p);
                        den += w * p;
                    }
                }
            }
        }
        num / (den * den)
    })
}

/// Conditional variance of Y given X = x (identical under both instrument values).
pub fn late_outcome_variance(x: f64) -> f64 {
    let lam = (x / 2.0).exp();
    let pa = normal::cdf(x - 0.5);
    let pn = 1.0 - normal::cdf(x + 0.5);
    let pc = 1.0 - pa - pn;
    let mu = lam + 2.0 * pa + pn;
    let second = pa * ((lam + 2.0) + (lam + 2.0).powi(2)) + pc * (lam + lam * lam) + pn * ((lam + 1.0) + (lam + 1.0).powi(2));
    second - mu * mu
}

/// `σ² = E[m²] / E[ψ^a]²` at the truth, by Gauss–Legendre quadrature on [0,1].
pub fn late_sigma2() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| {
        let rule = gauss_legendre(64);
        let e_m2 = rule.integrate(0.0, 1.0, |x| {
            let pi = normal::cdf(x - 0.5);
            late_outcome_variance(x) * (1.0 / pi + 1.0 / (1.0 - pi))
        });
        let e_a = rule.integrate(0.0, 1.0, |x| normal::cdf(x + 0.5) - normal::cdf(x - 0.5));
        e_m2 / (e_a * e_a)
    })
}

/// Variance used for oracle intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleVariance {
    DesignTrue,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDesign {
    pub name: DesignName,
    pub n: usize,
    pub k_grid: Vec<usize>,
    pub c_grid: Vec<f64>,
    #[serde(serialize_with = "ser_order")]
    pub order: KernelOrder,
    pub phi0: f64,
    pub reps: usize,
    pub seed: u64,
    /// Seed for fold partitions; defaults to `seed`.
    pub fold_seed: Option<u64>,
    pub alpha: f64,
    pub methods: Vec<Method>,
    pub strict: bool,
    pub oracle_variance: OracleVariance,
    pub propensity_floor: Option<f64>,
}

fn ser_order<S: serde::Serializer>(o: &KernelOrder, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u32(o.order())
}

impl McDesign {
    /// Desk-scale configuration of each design (n = 1000, 500 replications).
    pub fn standard(name: DesignName) -> Self {
        let (c, order, phi0) = match name {
            DesignName::AttDid => (0.62, KernelOrder::Six, 1.0 / 16.0),
            DesignName::Late => (0.53, KernelOrder::Two, 0.2),
        };
        McDesign {
            name,
            n: 1000,
            k_grid: vec![2, 5, 10, 20],
            c_grid: vec![c],
            order,
            phi0,
            reps: 500,
            seed: 7,
            fold_seed: None,
            alpha: 0.05,
            methods: Method::ALL.to_vec(),
            strict: false,
            oracle_variance: OracleVariance::DesignTrue,
            propensity_floor: None,
        }
    }

    pub fn theta0(&self) -> f64 {
        self.name.theta0()
    }

    fn fold_seed(&self) -> u64 {
        self.fold_seed.unwrap_or(self.seed)
    }

    /// Cells in output order: K, then c, then method.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &k in &self.k_grid {
            for &c in &self.c_grid {
                for &method in &self.methods {
                    out.push(CellKey { method, k, c });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellKey {
    pub method: Method,
    #[serde(rename = "K")]
    pub k: usize,
    pub c: f64,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} K={} c={}", self.method, self.k, self.c)
    }
}

#[derive(Debug, Error)]
pub enum McError {
    #[error("need at least 2 replications, got {0}")]
    TooFewReps(usize),
    #[error("invalid design: {0}")]
    Design(String),
    #[error("replication {rep} (seed {seed}), cell {cell}: {message}")]
    Strict { rep: usize, seed: u64, cell: String, message: String },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok { theta_hat: f64, covers: bool, floored: bool },
    Failed(String),
}

/// All cell outcomes of one replication, in [`McDesign::cells`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub outcomes: Vec<CellOutcome>,
}

/// Runs replication `r` of the design.
pub fn run_replication(design: &McDesign, model: &MomentModel, r: usize) -> Replication {
    let seed = replication_seed(design.seed, r);
    let data = design.name.generate(design.n, seed);
    let theta0 = design.theta0();
    let true_sigma2 = design.name.sigma2();
    let p = model.p();
    let truth = data.truth_eta(p).expect("design data carries truth");
    let oracle_psi = PsiValues::compute(&data, model, &truth).expect("truth has model arity");
    let oracle_var = |e: DmlEstimate| match design.oracle_variance {
        OracleVariance::DesignTrue => e.with_sigma2(true_sigma2),
        OracleVariance::Estimated => e,
    };

    let mut outcomes = Vec::with_capacity(design.cells().len());
    for &k in &design.k_grid {
        let partition = FoldPartition::new(design.n, k, partition_seed(design.fold_seed(), r, k))
            .map_err(|e| e.to_string());
        for &c in &design.c_grid {
            let needs_fit = design.methods.iter().any(|m| !m.is_oracle());
            let fitted: Option<Result<(PsiValues, bool), String>> = needs_fit.then(|| {
                let part = partition.as_ref().map_err(Clone::clone)?;
                let cfg = NuisanceConfig::Kernel {
                    order: design.order,
                    c,
                    phi0: design.phi0,
                    propensity_floor: design.propensity_floor,
                };
                let ev = crossfit_nuisance(&data, model, part, &cfg).map_err(|e| e.to_string())?;
                let psi = PsiValues::compute(&data, model, ev.eta_hat()).map_err(|e| e.to_string())?;
                Ok((psi, ev.total_flags() > 0))
            });
            for &method in &design.methods {
                let est: Result<(DmlEstimate, bool), String> = match method {
                    Method::Dml1 | Method::Dml2 => {
                        let (psi, floored) = match fitted.as_ref().expect("fit computed") {
                            Ok(v) => v,
                            Err(msg) => {
                                outcomes.push(CellOutcome::Failed(msg.clone()));
                                continue;
                            }
                        };
                        let e = if method == Method::Dml1 {
                            let part = partition.as_ref().expect("partition built before fit");
                            dml1_from_psi(psi, part, design.alpha, FoldWeighting::Unweighted, method)
                        } else {
                            dml2_from_psi(psi, k, design.alpha, method)
                        };
                        e.map(|e| (e, *floored)).map_err(|e| e.to_string())
                    }
                    Method::Oracle1 => partition.as_ref().map_err(Clone::clone).and_then(|part| {
                        dml1_from_psi(&oracle_psi, part, design.alpha, FoldWeighting::Unweighted, method)
                            .map(|e| (oracle_var(e), false))
                            .map_err(|e| e.to_string())
                    }),
                    Method::Oracle2 => dml2_from_psi(&oracle_psi, k, design.alpha, method)
                        .map(|e| (oracle_var(e), false))
                        .map_err(|e| e.to_string()),
                };
                outcomes.push(match est {
                    Ok((e, floored)) => CellOutcome::Ok { theta_hat: e.theta_hat, covers: e.covers(theta0), floored },
                    Err(msg) => CellOutcome::Failed(msg),
                });
            }
        }
    }
    Replication { rep: r, seed, outcomes }
}

/// Summary statistics of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStats {
    pub reps_used: usize,
    pub scaled_bias: f64,
    pub scaled_bias_se: f64,
    pub scaled_mse: f64,
    pub scaled_mse_se: f64,
    pub coverage_pct: f64,
    pub coverage_se: f64,
    pub bias: f64,
    pub bias_se: f64,
    pub mse: f64,
    pub mse_se: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let r = v.len() as f64;
    let mean = v.iter().sum::<f64>() / r;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Scaled bias `√n(mean θ̂ − θ₀)`, scaled MSE `n·mean(θ̂ − θ₀)²`, coverage in
/// percent, and their Monte Carlo standard errors.
pub fn summarize(theta_hats: &[f64], covers: &[bool], theta0: f64, n: usize) -> CellStats {
    let reps = theta_hats.len();
    let rn = n as f64;
    let err: Vec<f64> = theta_hats.iter().map(|t| t - theta0).collect();
    let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
    let (bias, bias_se) = mean_and_se(&err);
    let (mse, mse_se) = mean_and_se(&sq);
    let cov = covers.iter().filter(|&&c| c).count() as f64 / covers.len() as f64;
    CellStats {
        reps_used: reps,
        scaled_bias: rn.sqrt() * bias,
        scaled_bias_se: rn.sqrt() * bias_se,
        scaled_mse: rn * mse,
        scaled_mse_se: rn * mse_se,
        coverage_pct: 100.0 * cov,
        coverage_se: 100.0 * (cov * (1.0 - cov) / covers.len() as f64).sqrt(),
        bias,
        bias_se,
        mse,
        mse_se,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub stats: CellStats,
    /// Share of replications that failed in this cell.
    pub flag_rate: f64,
    /// Share of replications where the propensity floor fired.
    pub floored_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub design: McDesign,
    pub theta0: f64,
    pub true_sigma2: f64,
    pub cells: Vec<McCell>,
}

impl McSummary {
    pub fn cell(&self, method: Method, k: usize, c: f64) -> Option<&McCell> {
        self.cells.iter().find(|cell| cell.key.method == method && cell.key.k == k && cell.key.c == c)
    }

    /// Long-format CSV: design, method, K, c, metric, value, mc_se, flag_rate.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["design", "method", "K", "c", "metric", "value", "mc_se", "flag_rate"])?;
        let design = self.design.name.to_string();
        for cell in &self.cells {
            let s = &cell.stats;
            let metrics: [(&str, f64, f64); 7] = [
                ("scaled_bias", s.scaled_bias, s.scaled_bias_se),
                ("scaled_mse", s.scaled_mse, s.scaled_mse_se),
                ("coverage_pct", s.coverage_pct, s.coverage_se),
                ("bias", s.bias, s.bias_se),
                ("mse", s.mse, s.mse_se),
                ("reps_used", s.reps_used as f64, 0.0),
                ("floored_rate", cell.floored_rate, 0.0),
            ];
            for (name, value, se) in metrics {
                w.write_record([
                    design.clone(),
                    cell.key.method.to_string(),
                    cell.key.k.to_string(),
                    cell.key.c.to_string(),
                    name.to_string(),
                    value.to_string(),
                    se.to_string(),
                    cell.flag_rate.to_string(),
                ])?;
            }
        }
        w.flush()
    }
}

fn validate(design: &McDesign) -> Result<(), McError> {
    if design.reps < 2 {
        return Err(McError::TooFewReps(design.reps));
    }
    if design.k_grid.is_empty() || design.c_grid.is_empty() || design.methods.is_empty() {
        return Err(McError::Design("K grid, c grid and methods must be non-empty".into()));
    }
    if let Some(&k) = design.k_grid.iter().find(|&&k| k < 2 || k > design.n) {
        return Err(McError::Design(format!("K = {k} outside [2, n = {}]", design.n)));
    }
    if design.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(McError::Design("bandwidth constants must be positive".into()));
    }
    if !(design.alpha > 0.0 && design.alpha < 1.0) {
        return Err(McError::Design(format!("alpha = {} outside (0, 1)", design.alpha)));
    }
    Ok(())
}

/// Runs every replication on a pool of `workers` threads. The output is a
/// pure function of the design.
pub fn run_replications(design: &McDesign, workers: usize) -> Result<Vec<Replication>, McError> {
    validate(design)?;
    let model = catalog_model(design.name.model_id());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| McError::Pool(e.to_string()))?;
    let reps: Vec<Replication> =
        pool.install(|| (0..design.reps).into_par_iter().map(|r| run_replication(design, &model, r)).collect());
    if design.strict {
        let cells = design.cells();
        for rep in &reps {
            if let Some((j, CellOutcome::Failed(msg))) =
                rep.outcomes.iter().enumerate().find(|(_, o)| matches!(o, CellOutcome::Failed(_)))
            {
                return Err(McError::Strict {
                    rep: rep.rep,
                    seed: rep.seed,
                    cell: cells[j].to_string(),
                    message: msg.clone(),
                });
            }
        }
    }
    Ok(reps)
}

pub fn summarize_replications(design: &McDesign, reps: &[Replication]) -> McSummary {
    let theta0 = design.theta0();
    let cells = design
        .cells()
        .into_iter()
        .enumerate()
        .map(|(j, key)| {
            let mut thetas = Vec::with_capacity(reps.len());
            let mut covers = Vec::with_capacity(reps.len());
            let mut floored = 0usize;
            for rep in reps {
                if let CellOutcome::Ok { theta_hat, covers: cv, floored: fl } = rep.outcomes[j] {
                    thetas.push(theta_hat);
                    covers.push(cv);
                    floored += usize::from(fl);
                }
            }
            let total = reps.len() as f64;
            McCell {
                key,
                stats: summarize(&thetas, &covers, theta0, design.n),
                flag_rate: (reps.len() - thetas.len()) as f64 / total,
                floored_rate: floored as f64 / total,
            }
        })
        .collect();
    McSummary { design: design.clone(), theta0, true_sigma2: design.name.sigma2(), cells }
}

pub fn run_monte_carlo(design: &McDesign, workers: usize) -> Result<McSummary, McError> {
    let reps = run_replications(design, workers)?;
    Ok(summarize_replications(design, &reps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(replication_seed(7, 0), replication_seed(7, 0));
        assert_ne!(replication_seed(7, 0), replication_seed(7, 1));
        assert_ne!(partition_seed(7, 0, 2), partition_seed(7, 0, 5));
        assert_eq!(mix64(0), 0);
    }

    #[test]
    fn poisson_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| poisson(&mut rng, 1.6)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (1.6f64 / n as f64).sqrt();
        assert!((mean - 1.6).abs() < 4.0 * se);
        assert!((var - 1.6).abs() < 0.05);
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0; 5], &[true; 5], 1.0, 100);
        assert_eq!((s.scaled_bias, s.scaled_mse, s.coverage_pct), (0.0, 0.0, 100.0));
        let n = 400;
        let d = 1.0 / (n as f64).sqrt();
        let s = summarize(&[2.0 - d, 2.0 + d, 2.0 - d, 2.0 + d], &[true; 4], 2.0, n);
        assert!(s.scaled_bias.abs() < 1e-12);
        assert!((s.scaled_mse - 1.0).abs() < 1e-12);
        let covers: Vec<bool> = (0..500).map(|i| i % 20 != 0).collect();
        let s = summarize(&vec![0.0; 500], &covers, 0.0, 10);
        assert!((s.coverage_pct - 95.0).abs() < 1e-12);
        assert!((s.coverage_se - 0.9747).abs() < 1e-4);
    }

    #[test]
    fn att_did_data_shape() {
        let ds = gen_att_did(50, 3);
        assert_eq!(ds.n_rows(), 50);
        assert_eq!(ds.d_x(), 4);
        assert_eq!(ds.truth_theta(), Some(0.0));
        assert!(crate::data::validate_for_model(&ds, &catalog_model(ModelId::AttDid)).is_ok());
        assert_eq!(ds, gen_att_did(50, 3));
    }

    #[test]
    fn late_data_shape() {
        let ds = gen_late(50, 3);
        assert_eq!(ds.d_x(), 1);
        assert!(ds.truth_eta(6).is_some());
        assert!(crate::data::validate_for_model(&ds, &catalog_model(ModelId::Late)).is_ok());
    }

    #[test]
    fn complier_share_positive() {
        for i in 0..=100 {
            let t = late_truth(i as f64 / 100.0);
            assert!(t[2] - t[3] > 0.0);
        }
    }

    #[test]
    fn design_variances() {
        // Plain midpoint-rule cross-checks of the Gauss–Legendre values.
        let m = 2000;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..m {
            let x = (i as f64 + 0.5) / m as f64;
            let pi = normal::cdf(x - 0.5);
            num += late_outcome_variance(x) * (1.0 / pi + 1.0 / (1.0 - pi));
            den += normal::cdf(x + 0.5) - normal::cdf(x - 0.5);
        }
        let mid = (num / m as f64) / (den / m as f64).powi(2);
        assert!((late_sigma2() - mid).abs() < 1e-5 * mid);

        let g: usize = 12;
        let (mut num, mut den) = (0.0, 0.0);
        for idx in 0..g * g * g * g {
            let x: [f64; 4] = std::array::from_fn(|j| ((idx / g.pow(j as u32)) % g) as f64 / g as f64 + 0.5 / g as f64);
            let p = att_did_propensity(&x);
            num += 2.0 * p / (1.0 - p);
            den += p;
        }
        let cells = (g * g * g * g) as f64;
        let mid = (num / cells) / (den / cells).powi(2);
        assert!((att_did_sigma2() - mid).abs() < 1e-4 * mid);
    }

    #[test]
    fn strict_mode_reports_cell() {
        let mut d = McDesign::standard(DesignName::Late);
        d.n = 40;
        d.reps = 2;
        d.k_grid = vec![20];
        d.c_grid = vec![0.001];
        d.methods = vec![Method::Dml2];
        d.strict = true;
        match run_monte_carlo(&d, 1) {
            Err(McError::Strict { rep, cell, .. }) => {
                assert_eq!(rep, 0);
                assert_eq!(cell, "DML2 K=20 c=0.001");
            }
            other => panic!("{other:?}"),
        }
        d.strict = false;
        let s = run_monte_carlo(&d, 1).unwrap();
        assert_eq!(s.cells[0].flag_rate, 1.0);
    }

    #[test]
    fn two_replications_average() {
        let mut d = McDesign::standard(DesignName::Late);
        d.n = 200;
        d.reps = 2;
        d.k_grid = vec![2, 5];
        let model = catalog_model(ModelId::Late);
        let s = run_monte_carlo(&d, 1).unwrap();
        let r0 = run_replication(&d, &model, 0);
        let r1 = run_replication(&d, &model, 1);
        for (j, cell) in s.cells.iter().enumerate() {
            let (CellOutcome::Ok { theta_hat: a, .. }, CellOutcome::Ok { theta_hat: b, .. }) =
                (&r0.outcomes[j], &r1.outcomes[j])
            else {
                panic!("replication failed");
            };
            assert!((cell.stats.bias - (a + b) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle2_ignores_fold_seed() {
        let mut d = McDesign::standard(DesignName::Late);
        d.n = 100;
        d.reps = 3;
        d.methods = vec![Method::Oracle1, Method::Oracle2];
        let a = run_monte_carlo(&d, 1).unwrap();
        d.fold_seed = Some(99);
        let b = run_monte_carlo(&d, 1).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            if x.key.method == Method::Oracle2 {
                assert_eq!(x.stats, y.stats);
            }
        }
        assert!(a.cells.iter().zip(&b.cells).any(|(x, y)| x.key.method == Method::Oracle1 && x.stats != y.stats));
    }
}
