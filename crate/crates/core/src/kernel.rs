//! Higher-order Gaussian product kernels, Nadaraya–Watson nuisance fits and
//! the first-order influence decomposition of those fits.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::data::{Dataset, Observation};
use crate::moment::{NuisanceComponentSpec, NuisanceKind};

/// Normalized kernel sums below this value count as an empty neighborhood.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("unsupported kernel order {0} (expected 2, 4 or 6)")]
    UnsupportedOrder(u32),
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("empty training set")]
    EmptyTraining,
    #[error("empty neighborhood / bandwidth too small at x = {x:?} (component {component})")]
    EmptyNeighborhood { x: Vec<f64>, component: usize },
    #[error("density f(x) = {f} is not positive at x = {x:?}")]
    DensitySupport { x: Vec<f64>, f: f64 },
    #[error("regression truth does not match nuisance kind {0:?}")]
    TruthMismatch(NuisanceKind),
}

/// Gaussian-based kernel of order 2, 4 or 6 (Hermite construction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelOrder {
    Two,
    Four,
    Six,
}

impl KernelOrder {
    pub fn from_order(s: u32) -> Result<Self, KernelError> {
        match s {
            2 => Ok(KernelOrder::Two),
            4 => Ok(KernelOrder::Four),
            6 => Ok(KernelOrder::Six),
            _ => Err(KernelError::UnsupportedOrder(s)),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            KernelOrder::Two => 2,
            KernelOrder::Four => 4,
            KernelOrder::Six => 6,
        }
    }

    /// Polynomial factor multiplying φ(u), as a function of u².
    #[inline]
    fn poly(self, u2: f64) -> f64 {
        match self {
            KernelOrder::Two => 1.0,
            KernelOrder::Four => 0.5 * (3.0 - u2),
            KernelOrder::Six => 0.125 * (15.0 - 10.0 * u2 + u2 * u2),
        }
    }

    pub fn eval(self, u: f64) -> f64 {
        self.poly(u * u) * crate::normal::pdf(u)
    }
}

impl fmt::Display for KernelOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.order())
    }
}

pub fn univariate_kernel(s: u32, u: f64) -> Result<f64, KernelError> {
    Ok(KernelOrder::from_order(s)?.eval(u))
}

/// `h = c·n0^{−φ₀}`
pub fn bandwidth(c: f64, n0: usize, phi0: f64) -> f64 {
    c * (n0 as f64).powf(-phi0)
}

/// Product kernel `K_h(x) = h^{−d} Π K(x_ℓ/h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    order: KernelOrder,
    h: f64,
    d_x: usize,
    // h^{−d}(2π)^{−d/2}
    norm: f64,
}

impl KernelSpec {
    pub fn new(order: KernelOrder, h: f64, d_x: usize) -> Result<Self, KernelError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(KernelError::BadBandwidth(h));
        }
        let norm = (h * (2.0 * PI).sqrt()).powi(-(d_x as i32));
        Ok(KernelSpec { order, h, d_x, norm })
    }

    pub fn order(&self) -> KernelOrder {
        self.order
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    /// `K_h(x − y)`
    #[inline]
    pub fn weight(&self, x: &[f64], y: &[f64]) -> f64 {
        let inv_h = 1.0 / self.h;
        let mut sq = 0.0;
        let mut poly = 1.0;
        for (a, b) in x.iter().zip(y) {
            let u = (a - b) * inv_h;
            let u2 = u * u;
            sq += u2;
            poly *= self.order.poly(u2);
        }
        self.norm * poly * (-0.5 * sq).exp()
    }
}

/// Several nuisance components fitted on the same training rows with one
/// kernel. Kernel weights are computed once per training point and shared by
/// every component; identical weight columns are stored once.
#[derive(Debug, Clone)]
pub struct NwEnsemble {
    kernel: KernelSpec,
    kinds: Vec<NuisanceKind>,
    // Row-major n_train × d_x.
    x_train: Vec<f64>,
    // Row-major n_train × n_cols, unique weight columns.
    columns: Vec<f64>,
    n_cols: usize,
    // (numerator column, denominator column) per component.
    slots: Vec<(usize, usize)>,
    // Column of ones, used for the propensity floor.
    ones: usize,
    propensity_floor: Option<f64>,
}

/// Value of one evaluation of an ensemble.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalFlags {
    /// Number of components whose Type-3 denominator was floored.
    pub floored: u32,
}

impl NwEnsemble {
    pub fn fit(
        specs: &[NuisanceComponentSpec],
        dataset: &Dataset,
        train_idx: &[usize],
        kernel: KernelSpec,
        propensity_floor: Option<f64>,
    ) -> Result<Self, KernelError> {
        if train_idx.is_empty() {
            return Err(KernelError::EmptyTraining);
        }
        let n_train = train_idx.len();
        let mut x_train = Vec::with_capacity(n_train * dataset.d_x());
        for &i in train_idx {
            x_train.extend_from_slice(dataset.covariate_row(i));
        }

        let mut raw: Vec<Vec<f64>> = vec![vec![1.0; n_train]];
        let mut slots = Vec::with_capacity(specs.len());
        let intern = |col: Vec<f64>, raw: &mut Vec<Vec<f64>>| -> usize {
            match raw.iter().position(|c| *c == col) {
                Some(k) => k,
                None => {
                    raw.push(col);
                    raw.len() - 1
                }
            }
        };
        for spec in specs {
            let (num, den): (Vec<f64>, Vec<f64>) = train_idx
                .iter()
                .map(|&i| spec.ratio_weights(&dataset.observation(i)))
                .unzip();
            let a = intern(num, &mut raw);
            let b = intern(den, &mut raw);
            slots.push((a, b));
        }
        let n_cols = raw.len();
        let mut columns = Vec::with_capacity(n_train * n_cols);
        for r in 0..n_train {
            columns.extend(raw.iter().map(|c| c[r]));
        }
        Ok(NwEnsemble {
            kernel,
            kinds: specs.iter().map(|s| s.kind()).collect(),
            x_train,
            columns,
            n_cols,
            slots,
            ones: 0,
            propensity_floor,
        })
    }

    pub fn n_components(&self) -> usize {
        self.slots.len()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.len() / self.kernel.d_x.max(1)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// Evaluates every component at `x` into `out`, using `sums` as scratch
    /// space of length at least the number of unique weight columns.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64], sums: &mut Vec<f64>) -> Result<EvalFlags, KernelError> {
        let d = self.kernel.d_x;
        let n_train = self.columns.len() / self.n_cols;
        sums.clear();
        sums.resize(self.n_cols, 0.0);
        for r in 0..n_train {
            let w = self.kernel.weight(x, &self.x_train[r * d..(r + 1) * d]);
            let row = &self.columns[r * self.n_cols..(r + 1) * self.n_cols];
            for (s, c) in sums.iter_mut().zip(row) {
                *s += w * c;
            }
        }
        let n0 = n_train as f64;
        let mut flags = EvalFlags::default();
        for (j, (&(a, b), kind)) in self.slots.iter().zip(&self.kinds).enumerate() {
            let num = sums[a];
            let mut den = sums[b];
            if let (NuisanceKind::InvGroupProb, Some(eps)) = (kind, self.propensity_floor) {
                let floor = eps * sums[self.ones];
                if den < floor {
                    den = floor;
                    flags.floored += 1;
                }
            }
            if !((den / n0).abs() >= DENOMINATOR_GUARD) {
                return Err(KernelError::EmptyNeighborhood { x: x.to_vec(), component: j + 1 });
            }
            out[j] = num / den;
        }
        Ok(flags)
    }

    pub fn eval(&self, x: &[f64]) -> Result<(Vec<f64>, EvalFlags), KernelError> {
        let mut out = vec![0.0; self.n_components()];
        let mut sums = Vec::new();
        let flags = self.eval_into(x, &mut out, &mut sums)?;
        Ok((out, flags))
    }
}

/// Single-component Nadaraya–Watson fit.
#[derive(Debug, Clone)]
pub struct NwFit {
    spec: NuisanceComponentSpec,
    inner: NwEnsemble,
}

impl NwFit {
    pub fn spec(&self) -> &NuisanceComponentSpec {
        &self.spec
    }

    pub fn kernel(&self) -> &KernelSpec {
        self.inner.kernel()
    }

    /// `η̂(x)`, with a flag set when the propensity floor was applied.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, bool), KernelError> {
        let (v, flags) = self.inner.eval(x)?;
        Ok((v[0], flags.floored > 0))
    }
}

pub fn nw_fit(
    spec: &NuisanceComponentSpec,
    dataset: &Dataset,
    train_idx: &[usize],
    kernel: KernelSpec,
    propensity_floor: Option<f64>,
) -> Result<NwFit, KernelError> {
    let inner = NwEnsemble::fit(std::slice::from_ref(spec), dataset, train_idx, kernel, propensity_floor)?;
    Ok(NwFit { spec: spec.clone(), inner })
}

pub type RealFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// True regression functions behind one nuisance component, by type.
#[derive(Clone)]
pub enum RegressionTruth {
    /// `η₀(x) = E[R | X = x]`
    Type1 { eta0: RealFn },
    /// `g₁(x) = E[R·1{G} | X = x]`, `g₂(x) = E[1{G} | X = x]`, `η₀ = g₁/g₂`
    Type2 { g1: RealFn, g2: RealFn },
    /// `g₂(x) = E[1{G} | X = x]`, `η₀ = 1/g₂`
    Type3 { g2: RealFn },
}

impl RegressionTruth {
    fn kind(&self) -> NuisanceKind {
        match self {
            RegressionTruth::Type1 { .. } => NuisanceKind::CondMean,
            RegressionTruth::Type2 { .. } => NuisanceKind::GroupCondMean,
            RegressionTruth::Type3 { .. } => NuisanceKind::InvGroupProb,
        }
    }

    pub fn eta0(&self, x: &[f64]) -> f64 {
        match self {
            RegressionTruth::Type1 { eta0 } => eta0(x),
            RegressionTruth::Type2 { g1, g2 } => g1(x) / g2(x),
            RegressionTruth::Type3 { g2 } => 1.0 / g2(x),
        }
    }
}

/// `δ_n(W, x)` and `b_n(W, x)` of a kernel nuisance fit with bandwidth
/// `h = C_h·n0^{−φ₀}`, normalized so that
/// `η̂(x) − η₀(x) ≈ n0^{−1/2−φ₁}Σδ_n(W_ℓ, x) + n0^{−1−φ₂}Σb_n(W_ℓ, x)`.
#[derive(Clone)]
pub struct InfluenceTerms {
    spec: NuisanceComponentSpec,
    kernel: KernelSpec,
    n0: usize,
    phi1: f64,
    phi2: f64,
    delta_scale: f64,
    bias_scale: f64,
    density: RealFn,
    truth: RegressionTruth,
}

pub fn influence_terms(
    spec: &NuisanceComponentSpec,
    kernel: KernelSpec,
    n0: usize,
    phi0: f64,
    density: RealFn,
    truth: RegressionTruth,
) -> Result<InfluenceTerms, KernelError> {
    if truth.kind() != spec.kind() {
        return Err(KernelError::TruthMismatch(spec.kind()));
    }
    let d = kernel.d_x as f64;
    let s = kernel.order.order() as f64;
    let h = kernel.h;
    let c_h = h * (n0 as f64).powf(phi0);
    Ok(InfluenceTerms {
        spec: spec.clone(),
        kernel,
        n0,
        phi1: (1.0 - d * phi0) / 2.0,
        phi2: s * phi0,
        delta_scale: c_h.powf(-d / 2.0) * h.powf(d / 2.0),
        bias_scale: c_h.powf(s) * h.powf(-s),
        density,
        truth,
    })
}

impl InfluenceTerms {
    /// `(φ₁, φ₂)`
    pub fn rates(&self) -> (f64, f64) {
        (self.phi1, self.phi2)
    }

    fn weight_over_f(&self, obs: &Observation<'_>, x: &[f64]) -> Result<f64, KernelError> {
        let f = (self.density)(x);
        if !(f > 0.0) {
            return Err(KernelError::DensitySupport { x: x.to_vec(), f });
        }
        Ok(self.kernel.weight(x, obs.x) / f)
    }

    pub fn delta(&self, obs: &Observation<'_>, x: &[f64]) -> Result<f64, KernelError> {
        let kf = self.weight_over_f(obs, x)?;
        let (num, den) = self.spec.ratio_weights(obs);
        let core = match &self.truth {
            RegressionTruth::Type1 { eta0 } => num - eta0(obs.x),
            RegressionTruth::Type2 { g1, g2 } => {
                (num - g1(obs.x)) - self.truth.eta0(x) * (den - g2(obs.x))
            }
            RegressionTruth::Type3 { g2 } => -self.truth.eta0(x).powi(2) * (den - g2(obs.x)),
        };
        Ok(self.delta_scale * core * kf)
    }

    pub fn bias(&self, obs: &Observation<'_>, x: &[f64]) -> Result<f64, KernelError> {
        let kf = self.weight_over_f(obs, x)?;
        let core = match &self.truth {
            RegressionTruth::Type1 { eta0 } => eta0(obs.x) - eta0(x),
            RegressionTruth::Type2 { g1, g2 } => {
                (g1(obs.x) - g1(x)) - self.truth.eta0(x) * (g2(obs.x) - g2(x))
            }
            RegressionTruth::Type3 { g2 } => -self.truth.eta0(x).powi(2) * (g2(obs.x) - g2(x)),
        };
        Ok(self.bias_scale * core * kf)
    }

    /// `n0^{−1/2−φ₁}Σδ_n + n0^{−1−φ₂}Σb_n` over the training sample.
    pub fn linear_approximation(&self, sample: &[Observation<'_>], x: &[f64]) -> Result<f64, KernelError> {
        let n0 = self.n0 as f64;
        let mut sd = 0.0;
        let mut sb = 0.0;
        for o in sample {
            sd += self.delta(o, x)?;
            sb += self.bias(o, x)?;
        }
        Ok(n0.powf(-0.5 - self.phi1) * sd + n0.powf(-1.0 - self.phi2) * sb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Role, RoleMap};
    use crate::moment::{GroupIndicator, Response};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(y: &[f64], x: &[f64]) -> Dataset {
        let roles: RoleMap = [(Role::Outcome, "Y".to_string()), (Role::Covariate(1), "X1".to_string())].into();
        Dataset::new(vec![("Y".into(), y.to_vec()), ("X1".into(), x.to_vec())], roles).unwrap()
    }

    fn type1() -> NuisanceComponentSpec {
        NuisanceComponentSpec::cond_mean(Response::role(Role::Outcome))
    }

    fn all_rows(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    // Composite Simpson on [−12, 12].
    fn quad(f: impl Fn(f64) -> f64) -> f64 {
        let n = 24_000;
        let (a, b) = (-12.0, 12.0);
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn kernel_moments() {
        for s in [2u32, 4, 6] {
            let k = KernelOrder::from_order(s).unwrap();
            assert!((quad(|u| k.eval(u)) - 1.0).abs() < 1e-8, "order {s}");
            for j in 1..s {
                assert!(quad(|u| u.powi(j as i32) * k.eval(u)).abs() < 1e-6, "order {s}, j {j}");
            }
            assert!(quad(|u| u.powi(s as i32) * k.eval(u)).abs() > 0.1);
        }
        assert!((quad(|u| u.powi(4) * KernelOrder::Four.eval(u)) + 3.0).abs() < 1e-8);
        assert!((quad(|u| u.powi(6) * KernelOrder::Six.eval(u)) - 15.0).abs() < 1e-8);
    }

    #[test]
    fn kernel_values() {
        assert!((univariate_kernel(2, 0.0).unwrap() - 0.3989422804).abs() < 1e-10);
        assert!((univariate_kernel(6, 0.0).unwrap() - 0.7480167757).abs() < 1e-10);
        assert!(univariate_kernel(4, 3f64.sqrt()).unwrap().abs() < 1e-15);
        assert_eq!(univariate_kernel(3, 0.0), Err(KernelError::UnsupportedOrder(3)));
    }

    #[test]
    fn product_kernel_matches_univariate_product() {
        let k = KernelSpec::new(KernelOrder::Six, 0.7, 3).unwrap();
        let x = [0.1, -0.4, 1.3];
        let y = [0.5, 0.2, 0.9];
        let want: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| KernelOrder::Six.eval((a - b) / 0.7) / 0.7)
            .product();
        assert!((k.weight(&x, &y) - want).abs() < 1e-14 * want.abs().max(1.0));
    }

    #[test]
    fn bandwidth_values() {
        assert_eq!(bandwidth(1.0, 1234, 0.0), 1.0);
        assert!((bandwidth(0.62, 2700, 1.0 / 16.0) - 0.62 * (-(2700f64).ln() / 16.0).exp()).abs() < 1e-15);
        assert!((bandwidth(0.62, 2700, 1.0 / 16.0) - 0.378383).abs() < 1e-6);
        assert!((bandwidth(0.53, 2000, 0.2) - 0.115896).abs() < 1e-6);
        assert!(KernelSpec::new(KernelOrder::Two, 0.0, 1).is_err());
    }

    #[test]
    fn single_point_fit() {
        let ds = dataset(&[5.0], &[0.3]);
        let k = KernelSpec::new(KernelOrder::Two, 0.2, 1).unwrap();
        let fit = nw_fit(&type1(), &ds, &[0], k, None).unwrap();
        assert_eq!(fit.eval(&[0.3]).unwrap(), (5.0, false));
    }

    #[test]
    fn symmetric_pair_fit() {
        let ds = dataset(&[0.0, 2.0], &[-0.4, 0.4]);
        for order in [KernelOrder::Two, KernelOrder::Four, KernelOrder::Six] {
            let k = KernelSpec::new(order, 0.3, 1).unwrap();
            let fit = nw_fit(&type1(), &ds, &[0, 1], k, None).unwrap();
            assert!((fit.eval(&[0.0]).unwrap().0 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let ds = dataset(&y, &x);
        let k = KernelSpec::new(KernelOrder::Two, 0.2, 1).unwrap();
        let fit = nw_fit(&type1(), &ds, &all_rows(n), k, None).unwrap();
        for g in 0..=50 {
            let x0 = g as f64 / 50.0;
            // Plain weighted average with exp(−u²/2) weights.
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                let u = (x0 - x[i]) / 0.2;
                let w = (-u * u / 2.0).exp();
                num += w * y[i];
                den += w;
            }
            assert!((fit.eval(&[x0]).unwrap().0 - num / den).abs() < 1e-10);
        }
    }

    fn treat_dataset(y: &[f64], a: &[f64], x: &[f64]) -> Dataset {
        let roles: RoleMap = [
            (Role::Outcome, "Y".to_string()),
            (Role::Treatment, "A".to_string()),
            (Role::Covariate(1), "X1".to_string()),
        ]
        .into();
        Dataset::new(
            vec![("Y".into(), y.to_vec()), ("A".into(), a.to_vec()), ("X1".into(), x.to_vec())],
            roles,
        )
        .unwrap()
    }

    #[test]
    fn group_types_match_direct_sums() {
        let y = [1.0, 4.0, 2.0, 7.0, 3.0];
        let a = [1.0, 0.0, 1.0, 1.0, 0.0];
        let x = [0.1, 0.3, 0.45, 0.6, 0.9];
        let ds = treat_dataset(&y, &a, &x);
        let k = KernelSpec::new(KernelOrder::Two, 0.25, 1).unwrap();
        let g1 = GroupIndicator::new(Role::Treatment, 1);
        let t2 = NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), g1);
        let t3 = NuisanceComponentSpec::inv_group_prob(g1);
        let ens = NwEnsemble::fit(&[t2, t3], &ds, &all_rows(5), k, None).unwrap();
        let x0 = [0.5];
        let w: Vec<f64> = x.iter().map(|v| k.weight(&x0, &[*v])).collect();
        let sk: f64 = w.iter().sum();
        let ska: f64 = w.iter().zip(&a).map(|(w, a)| w * a).sum();
        let skya: f64 = (0..5).map(|i| w[i] * y[i] * a[i]).sum();
        let (v, _) = ens.eval(&x0).unwrap();
        assert!((v[0] - skya / ska).abs() < 1e-14);
        assert!((v[1] - sk / ska).abs() < 1e-14);
    }

    #[test]
    fn weight_columns_are_shared() {
        let ds = treat_dataset(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0], &[0.1, 0.2, 0.3]);
        let g1 = GroupIndicator::new(Role::Treatment, 1);
        let g0 = GroupIndicator::new(Role::Treatment, 0);
        let specs = [
            NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), g1),
            NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), g0),
            NuisanceComponentSpec::inv_group_prob(g1),
            NuisanceComponentSpec::inv_group_prob(g0),
        ];
        let k = KernelSpec::new(KernelOrder::Two, 0.3, 1).unwrap();
        let ens = NwEnsemble::fit(&specs, &ds, &all_rows(3), k, None).unwrap();
        // ones, Y·A, A, Y·(1−A), 1−A
        assert_eq!(ens.n_cols, 5);
    }

    #[test]
    fn empty_neighborhood_error() {
        let ds = dataset(&[1.0, 2.0], &[0.0, 0.1]);
        let k = KernelSpec::new(KernelOrder::Two, 0.01, 1).unwrap();
        let fit = nw_fit(&type1(), &ds, &[0, 1], k, None).unwrap();
        match fit.eval(&[5.0]) {
            Err(KernelError::EmptyNeighborhood { x, component }) => {
                assert_eq!(x, vec![5.0]);
                assert_eq!(component, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(nw_fit(&type1(), &ds, &[], k, None).unwrap_err(), KernelError::EmptyTraining);
    }

    #[test]
    fn propensity_floor_counts() {
        // Only untreated rows near x = 0: the treated share there is ~0.
        let ds = treat_dataset(&[0.0; 4], &[0.0, 0.0, 0.0, 1.0], &[0.0, 0.01, 0.02, 3.0]);
        let t3 = NuisanceComponentSpec::inv_group_prob(GroupIndicator::new(Role::Treatment, 1));
        let k = KernelSpec::new(KernelOrder::Two, 0.1, 1).unwrap();
        let guarded = nw_fit(&t3, &ds, &all_rows(4), k, Some(0.05)).unwrap();
        let (v, floored) = guarded.eval(&[0.0]).unwrap();
        assert!(floored);
        assert!((v - 20.0).abs() < 1e-12);
        let bare = nw_fit(&t3, &ds, &all_rows(4), k, None).unwrap();
        assert!(matches!(bare.eval(&[0.0]), Err(KernelError::EmptyNeighborhood { .. })));
    }

    proptest! {
        #[test]
        fn shift_equivariance(shift in -50.0f64..50.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 4.0).collect();
            let a: Vec<f64> = (0..30).map(|i| (i % 2) as f64).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let k = KernelSpec::new(KernelOrder::Four, 0.3, 1).unwrap();
            let g = GroupIndicator::new(Role::Treatment, 1);
            let specs = [type1(), NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), g)];
            let e0 = NwEnsemble::fit(&specs, &treat_dataset(&y, &a, &x), &all_rows(30), k, None).unwrap();
            let e1 = NwEnsemble::fit(&specs, &treat_dataset(&ys, &a, &x), &all_rows(30), k, None).unwrap();
            for x0 in [0.1, 0.5, 0.77] {
                let (v0, _) = e0.eval(&[x0]).unwrap();
                let (v1, _) = e1.eval(&[x0]).unwrap();
                for j in 0..2 {
                    prop_assert!((v1[j] - v0[j] - shift).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn scale_equivariance(scale in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let k0 = KernelSpec::new(KernelOrder::Six, 0.25, 1).unwrap();
            let k1 = KernelSpec::new(KernelOrder::Six, 0.25 * scale, 1).unwrap();
            let f0 = nw_fit(&type1(), &dataset(&y, &x), &all_rows(25), k0, None).unwrap();
            let f1 = nw_fit(&type1(), &dataset(&y, &xs), &all_rows(25), k1, None).unwrap();
            for x0 in [0.2, 0.5, 0.9] {
                let v0 = f0.eval(&[x0]).unwrap().0;
                let v1 = f1.eval(&[x0 * scale]).unwrap().0;
                prop_assert!((v0 - v1).abs() < 1e-10 * v0.abs().max(1.0));
            }
        }
    }

    fn propensity(x: &[f64]) -> f64 {
        crate::normal::cdf(x[0] - 0.5)
    }

    fn draw_z(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let z: Vec<f64> = x
            .iter()
            .map(|&v| if rng.random::<f64>() < propensity(&[v]) { 1.0 } else { 0.0 })
            .collect();
        (x, z)
    }

    #[test]
    fn consistency_trend() {
        let rmse = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, z) = draw_z(&mut rng, n);
            let ds = dataset(&z, &x);
            let k = KernelSpec::new(KernelOrder::Two, bandwidth(0.53, n, 0.2), 1).unwrap();
            let fit = nw_fit(&type1(), &ds, &all_rows(n), k, None).unwrap();
            let mut s = 0.0;
            for g in 0..20 {
                let x0 = 0.2 + 0.6 * g as f64 / 19.0;
                s += (fit.eval(&[x0]).unwrap().0 - propensity(&[x0])).powi(2);
            }
            (s / 20.0).sqrt()
        };
        let small: f64 = (0..20).map(|s| rmse(500, s)).sum::<f64>() / 20.0;
        let large: f64 = (0..20).map(|s| rmse(5000, 100 + s)).sum::<f64>() / 20.0;
        assert!(large < small, "{large} vs {small}");
    }

    fn type1_terms(n0: usize) -> InfluenceTerms {
        let k = KernelSpec::new(KernelOrder::Two, bandwidth(0.53, n0, 0.2), 1).unwrap();
        influence_terms(
            &type1(),
            k,
            n0,
            0.2,
            Arc::new(|_| 1.0),
            RegressionTruth::Type1 { eta0: Arc::new(propensity) },
        )
        .unwrap()
    }

    #[test]
    fn rates_for_scalar_second_order() {
        let (p1, p2) = type1_terms(2000).rates();
        assert!((p1 - 0.4).abs() < 1e-15 && (p2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn noiseless_response_has_zero_delta() {
        let t = type1_terms(500);
        let x = [0.3];
        let y = propensity(&x);
        let o = Observation { outcome: y, outcome_pre: f64::NAN, treatment: f64::NAN, instrument: f64::NAN, x: &x };
        assert_eq!(t.delta(&o, &[0.35]).unwrap(), 0.0);
        assert_eq!(t.bias(&o, &x).unwrap(), 0.0);
    }

    #[test]
    fn delta_has_conditional_mean_zero() {
        let t = type1_terms(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xw = [0.45];
        let draws: Vec<f64> = (0..40_000)
            .map(|_| {
                let z = if rng.random::<f64>() < propensity(&xw) { 1.0 } else { 0.0 };
                let o = Observation { outcome: z, outcome_pre: f64::NAN, treatment: f64::NAN, instrument: f64::NAN, x: &xw };
                t.delta(&o, &[0.5]).unwrap()
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (var / n).sqrt(), "{mean}");
    }

    #[test]
    fn linear_term_reduces_to_plain_sums() {
        let n0 = 300;
        let t = type1_terms(n0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, z) = draw_z(&mut rng, n0);
        let obs: Vec<Observation> = (0..n0)
            .map(|i| Observation {
                outcome: z[i],
                outcome_pre: f64::NAN,
                treatment: f64::NAN,
                instrument: f64::NAN,
                x: std::slice::from_ref(&x[i]),
            })
            .collect();
        let x0 = [0.4];
        let k = KernelSpec::new(KernelOrder::Two, bandwidth(0.53, n0, 0.2), 1).unwrap();
        let direct: f64 = (0..n0)
            .map(|i| (z[i] - propensity(&x0)) * k.weight(&x0, &[x[i]]))
            .sum::<f64>()
            / n0 as f64;
        let lin = t.linear_approximation(&obs, &x0).unwrap();
        assert!((lin - direct).abs() < 1e-12);
    }

    #[test]
    fn density_and_truth_errors() {
        let k = KernelSpec::new(KernelOrder::Two, 0.3, 1).unwrap();
        let t = influence_terms(&type1(), k, 10, 0.2, Arc::new(|_| 0.0), RegressionTruth::Type1 { eta0: Arc::new(propensity) })
            .unwrap();
        let x = [0.3];
        let o = Observation { outcome: 1.0, outcome_pre: f64::NAN, treatment: f64::NAN, instrument: f64::NAN, x: &x };
        assert!(matches!(t.delta(&o, &x), Err(KernelError::DensitySupport { .. })));
        let mismatch = influence_terms(&type1(), k, 10, 0.2, Arc::new(|_| 1.0), RegressionTruth::Type3 { g2: Arc::new(propensity) });
        assert!(matches!(mismatch, Err(KernelError::TruthMismatch(_))));
    }
}
