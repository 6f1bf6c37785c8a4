//! Moment functions linear in the target parameter,
//! `m(W, θ, η) = ψ^b(W, η) − ψ^a(W, η)·θ`, and the built-in catalog.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Observation, Role};

pub type PsiFn = Arc<dyn Fn(&Observation<'_>, &[f64]) -> f64 + Send + Sync>;
/// Known covariate weight `g(X)` used by the weighted ATE.
pub type WeightFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, PartialEq)]
pub enum MomentError {
    #[error("unknown model `{0}` (expected ate, att-did, late, wate, att, plm, plm-iv)")]
    UnknownModel(String),
    #[error("nuisance vector has length {got}, model {model} expects {expected}")]
    Arity { model: String, expected: usize, got: usize },
    #[error("invalid nuisance spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate weight: estimated E[g(X)] = {0} is not positive")]
    DegenerateWeight(f64),
    #[error("population Λ needs a WATE model with a weight function")]
    NotWate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum ModelId {
    Ate,
    AttDid,
    Late,
    Wate,
    Att,
    Plm,
    PlmIv,
    Custom(String),
}

impl ModelId {
    pub const CATALOG: [ModelId; 7] = [
        ModelId::Ate,
        ModelId::AttDid,
        ModelId::Late,
        ModelId::Wate,
        ModelId::Att,
        ModelId::Plm,
        ModelId::PlmIv,
    ];
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::Ate => write!(f, "ATE"),
            ModelId::AttDid => write!(f, "ATT_DID"),
            ModelId::Late => write!(f, "LATE"),
            ModelId::Wate => write!(f, "WATE"),
            ModelId::Att => write!(f, "ATT"),
            ModelId::Plm => write!(f, "PLM"),
            ModelId::PlmIv => write!(f, "PLM_IV"),
            ModelId::Custom(name) => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for ModelId {
    type Err = MomentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ate" => Ok(ModelId::Ate),
            "att-did" => Ok(ModelId::AttDid),
            "late" => Ok(ModelId::Late),
            "wate" => Ok(ModelId::Wate),
            "att" => Ok(ModelId::Att),
            "plm" => Ok(ModelId::Plm),
            "plm-iv" => Ok(ModelId::PlmIv),
            _ => Err(MomentError::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    /// `E[R | X]`
    CondMean,
    /// `E[R | X, G = g]`
    GroupCondMean,
    /// `1 / P(G = g | X)`
    InvGroupProb,
}

/// Signed sum of role columns, e.g. `outcome − outcome_pre`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Response {
    terms: Vec<(f64, Role)>,
}

impl Response {
    pub fn role(role: Role) -> Self {
        Response { terms: vec![(1.0, role)] }
    }

    pub fn difference(plus: Role, minus: Role) -> Self {
        Response { terms: vec![(1.0, plus), (-1.0, minus)] }
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.terms.iter().map(|t| t.1)
    }

    pub fn eval(&self, obs: &Observation<'_>) -> f64 {
        self.terms.iter().map(|(s, r)| s * obs.role_value(*r)).sum()
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, r)) in self.terms.iter().enumerate() {
            match (i, *s < 0.0) {
                (0, false) => write!(f, "{r}")?,
                (0, true) => write!(f, "-{r}")?,
                (_, false) => write!(f, " + {r}")?,
                (_, true) => write!(f, " - {r}")?,
            }
        }
        Ok(())
    }
}

/// `1{role = value}` for a binary role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupIndicator {
    pub role: Role,
    pub value: u8,
}

impl GroupIndicator {
    pub fn new(role: Role, value: u8) -> Self {
        GroupIndicator { role, value }
    }

    pub fn eval(&self, obs: &Observation<'_>) -> f64 {
        let v = obs.role_value(self.role);
        if self.value == 1 {
            v
        } else {
            1.0 - v
        }
    }
}

/// Definition of one nuisance component η₀,ⱼ as a regression on the covariates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceComponentSpec {
    kind: NuisanceKind,
    response: Option<Response>,
    group: Option<GroupIndicator>,
}

impl NuisanceComponentSpec {
    pub fn new(
        kind: NuisanceKind,
        response: Option<Response>,
        group: Option<GroupIndicator>,
    ) -> Result<Self, MomentError> {
        match (kind, &response, &group) {
            (NuisanceKind::CondMean, Some(_), None)
            | (NuisanceKind::GroupCondMean, Some(_), Some(_))
            | (NuisanceKind::InvGroupProb, None, Some(_)) => Ok(()),
            _ => Err(MomentError::InvalidSpec(format!(
                "{kind:?} with response {} and group indicator {}",
                if response.is_some() { "present" } else { "absent" },
                if group.is_some() { "present" } else { "absent" },
            ))),
        }?;
        if let Some(g) = &group {
            if g.value > 1 || !g.role.is_indicator() {
                return Err(MomentError::InvalidSpec(format!(
                    "group indicator must be a binary role with value 0/1, got {}={}",
                    g.role, g.value
                )));
            }
        }
        Ok(NuisanceComponentSpec { kind, response, group })
    }

    pub fn cond_mean(response: Response) -> Self {
        Self::new(NuisanceKind::CondMean, Some(response), None).expect("valid cond_mean spec")
    }

    pub fn group_cond_mean(response: Response, group: GroupIndicator) -> Self {
        Self::new(NuisanceKind::GroupCondMean, Some(response), Some(group))
            .expect("valid group_cond_mean spec")
    }

    pub fn inv_group_prob(group: GroupIndicator) -> Self {
        Self::new(NuisanceKind::InvGroupProb, None, Some(group)).expect("valid inv_group_prob spec")
    }

    pub fn kind(&self) -> NuisanceKind {
        self.kind
    }

    pub fn response(&self) -> Option<&Response> {
        self.response.as_ref()
    }

    pub fn group(&self) -> Option<GroupIndicator> {
        self.group
    }

    /// Per-observation numerator and denominator weights of the kernel
    /// ratio estimator for this component.
    pub fn ratio_weights(&self, obs: &Observation<'_>) -> (f64, f64) {
        let g = self.group.map_or(1.0, |g| g.eval(obs));
        match self.kind {
            NuisanceKind::CondMean => (self.response.as_ref().map_or(0.0, |r| r.eval(obs)), 1.0),
            NuisanceKind::GroupCondMean => (self.response.as_ref().map_or(0.0, |r| r.eval(obs)) * g, g),
            NuisanceKind::InvGroupProb => (1.0, g),
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut out: Vec<Role> = self.response.iter().flat_map(|r| r.roles()).collect();
        out.extend(self.group.map(|g| g.role));
        out
    }
}

/// A linear-in-θ moment model with its nuisance specification.
#[derive(Clone)]
pub struct MomentModel {
    id: ModelId,
    psi_a: PsiFn,
    psi_b: PsiFn,
    nuisance_specs: Vec<NuisanceComponentSpec>,
    psi_a_is_constant: bool,
    psi_roles: Vec<Role>,
    weight: Option<WeightFn>,
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentModel")
            .field("id", &self.id)
            .field("p", &self.p())
            .field("psi_a_is_constant", &self.psi_a_is_constant)
            .field("nuisance_specs", &self.nuisance_specs)
            .finish()
    }
}

#[derive(Debug, Serialize)]
pub struct ModelMetadata {
    pub id: String,
    pub p: usize,
    pub psi_a_is_constant: bool,
    pub nuisance: Vec<NuisanceMetadata>,
}

#[derive(Debug, Serialize)]
pub struct NuisanceMetadata {
    pub kind: NuisanceKind,
    pub response: Option<String>,
    pub group: Option<String>,
}

impl MomentModel {
    /// Library-level custom model. `psi_roles` lists the roles the two
    /// ψ-functions read directly (nuisance-spec roles are added automatically).
    pub fn custom(
        name: &str,
        psi_a: PsiFn,
        psi_b: PsiFn,
        nuisance_specs: Vec<NuisanceComponentSpec>,
        psi_roles: Vec<Role>,
        psi_a_is_constant: bool,
    ) -> Self {
        MomentModel {
            id: ModelId::Custom(name.to_string()),
            psi_a,
            psi_b,
            nuisance_specs,
            psi_a_is_constant,
            psi_roles,
            weight: None,
        }
    }

    pub fn id(&self) -> &ModelId {
        &self.id
    }

    pub fn p(&self) -> usize {
        self.nuisance_specs.len()
    }

    pub fn nuisance_specs(&self) -> &[NuisanceComponentSpec] {
        &self.nuisance_specs
    }

    pub fn psi_a_is_constant(&self) -> bool {
        self.psi_a_is_constant
    }

    pub fn weight_function(&self) -> Option<&WeightFn> {
        self.weight.as_ref()
    }

    #[inline]
    pub fn psi_a(&self, obs: &Observation<'_>, eta: &[f64]) -> f64 {
        (self.psi_a)(obs, eta)
    }

    #[inline]
    pub fn psi_b(&self, obs: &Observation<'_>, eta: &[f64]) -> f64 {
        (self.psi_b)(obs, eta)
    }

    /// Roles the model needs from a dataset, deduplicated and sorted.
    pub fn required_roles(&self) -> Vec<Role> {
        let mut roles = self.psi_roles.clone();
        for spec in &self.nuisance_specs {
            roles.extend(spec.roles());
        }
        roles.sort();
        roles.dedup();
        roles
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            id: self.id.to_string(),
            p: self.p(),
            psi_a_is_constant: self.psi_a_is_constant,
            nuisance: self
                .nuisance_specs
                .iter()
                .map(|s| NuisanceMetadata {
                    kind: s.kind,
                    response: s.response.as_ref().map(|r| r.to_string()),
                    group: s.group.map(|g| format!("{}={}", g.role, g.value)),
                })
                .collect(),
        }
    }
}

/// `m(W, θ, η) = ψ^b(W, η) − ψ^a(W, η)·θ`
pub fn eval_moment(
    model: &MomentModel,
    obs: &Observation<'_>,
    theta: f64,
    eta: &[f64],
) -> Result<f64, MomentError> {
    if eta.len() != model.p() {
        return Err(MomentError::Arity {
            model: model.id.to_string(),
            expected: model.p(),
            got: eta.len(),
        });
    }
    Ok(model.psi_b(obs, eta) - model.psi_a(obs, eta) * theta)
}

/// `g(X) = X₁`, the built-in weighted-ATE weight.
pub fn first_covariate_weight() -> WeightFn {
    Arc::new(|x: &[f64]| x[0])
}

fn aipw_core(obs: &Observation<'_>, d: f64, eta: &[f64]) -> f64 {
    eta[0] - eta[1] + d * (obs.outcome - eta[0]) * eta[2] - (1.0 - d) * (obs.outcome - eta[1]) * eta[3]
}

fn ate_specs(indicator: Role) -> Vec<NuisanceComponentSpec> {
    vec![
        NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), GroupIndicator::new(indicator, 1)),
        NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), GroupIndicator::new(indicator, 0)),
        NuisanceComponentSpec::inv_group_prob(GroupIndicator::new(indicator, 1)),
        NuisanceComponentSpec::inv_group_prob(GroupIndicator::new(indicator, 0)),
    ]
}

/// Weighted ATE with a caller-supplied known weight `g(X)`.
pub fn wate_with_weight(weight: WeightFn) -> MomentModel {
    let gb = weight.clone();
    let ga = weight.clone();
    MomentModel {
        id: ModelId::Wate,
        psi_a: Arc::new(move |o, _| ga(o.x)),
        psi_b: Arc::new(move |o, e| gb(o.x) * aipw_core(o, o.treatment, e)),
        nuisance_specs: ate_specs(Role::Treatment),
        psi_a_is_constant: false,
        psi_roles: vec![Role::Outcome, Role::Treatment],
        weight: Some(weight),
    }
}

/// Returns the catalog model for `id`. Panics on `ModelId::Custom`; use
/// [`lookup_model`] for fallible lookup.
pub fn catalog_model(id: ModelId) -> MomentModel {
    lookup_model(&id).expect("catalog id")
}

pub fn lookup_model(id: &ModelId) -> Result<MomentModel, MomentError> {
    let model = match id {
        ModelId::Ate => MomentModel {
            id: ModelId::Ate,
            psi_a: Arc::new(|_, _| 1.0),
            psi_b: Arc::new(|o, e| aipw_core(o, o.treatment, e)),
            nuisance_specs: ate_specs(Role::Treatment),
            psi_a_is_constant: true,
            psi_roles: vec![Role::Outcome, Role::Treatment],
            weight: None,
        },
        ModelId::AttDid => MomentModel {
            id: ModelId::AttDid,
            psi_a: Arc::new(|o, _| o.treatment),
            psi_b: Arc::new(|o, e| {
                let dy = o.outcome - o.outcome_pre - e[0];
                o.treatment * dy + (1.0 - o.treatment) * (1.0 - e[1]) * dy
            }),
            nuisance_specs: vec![
                NuisanceComponentSpec::group_cond_mean(
                    Response::difference(Role::Outcome, Role::OutcomePre),
                    GroupIndicator::new(Role::Treatment, 0),
                ),
                NuisanceComponentSpec::inv_group_prob(GroupIndicator::new(Role::Treatment, 0)),
            ],
            psi_a_is_constant: false,
            psi_roles: vec![Role::Outcome, Role::OutcomePre, Role::Treatment],
            weight: None,
        },
        ModelId::Late => {
            let z1 = GroupIndicator::new(Role::Instrument, 1);
            let z0 = GroupIndicator::new(Role::Instrument, 0);
            MomentModel {
                id: ModelId::Late,
                psi_a: Arc::new(|o, e| {
                    let z = o.instrument;
                    e[2] - e[3] + z * (o.treatment - e[2]) * e[4] - (1.0 - z) * (o.treatment - e[3]) * e[5]
                }),
                psi_b: Arc::new(|o, e| {
                    let z = o.instrument;
                    e[0] - e[1] + z * (o.outcome - e[0]) * e[4] - (1.0 - z) * (o.outcome - e[1]) * e[5]
                }),
                nuisance_specs: vec![
                    NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), z1),
                    NuisanceComponentSpec::group_cond_mean(Response::role(Role::Outcome), z0),
                    NuisanceComponentSpec::group_cond_mean(Response::role(Role::Treatment), z1),
                    NuisanceComponentSpec::group_cond_mean(Response::role(Role::Treatment), z0),
                    NuisanceComponentSpec::inv_group_prob(z1),
                    NuisanceComponentSpec::inv_group_prob(z0),
                ],
                psi_a_is_constant: false,
                psi_roles: vec![Role::Outcome, Role::Treatment, Role::Instrument],
                weight: None,
            }
        }
        ModelId::Wate => wate_with_weight(first_covariate_weight()),
        ModelId::Att => MomentModel {
            id: ModelId::Att,
            psi_a: Arc::new(|o, _| o.treatment),
            psi_b: Arc::new(|o, e| {
                let r = o.outcome - e[0];
                o.treatment * r + (1.0 - o.treatment) * (1.0 - e[1]) * r
            }),
            nuisance_specs: vec![
                NuisanceComponentSpec::group_cond_mean(
                    Response::role(Role::Outcome),
                    GroupIndicator::new(Role::Treatment, 0),
                ),
                NuisanceComponentSpec::inv_group_prob(GroupIndicator::new(Role::Treatment, 0)),
            ],
            psi_a_is_constant: false,
            psi_roles: vec![Role::Outcome, Role::Treatment],
            weight: None,
        },
        ModelId::Plm => MomentModel {
            id: ModelId::Plm,
            psi_a: Arc::new(|o, e| (o.treatment - e[1]).powi(2)),
            psi_b: Arc::new(|o, e| (o.outcome - e[0]) * (o.treatment - e[1])),
            nuisance_specs: vec![
                NuisanceComponentSpec::cond_mean(Response::role(Role::Outcome)),
                NuisanceComponentSpec::cond_mean(Response::role(Role::Treatment)),
            ],
            psi_a_is_constant: false,
            psi_roles: vec![Role::Outcome, Role::Treatment],
            weight: None,
        },
        ModelId::PlmIv => MomentModel {
            id: ModelId::PlmIv,
            psi_a: Arc::new(|o, e| (o.treatment - e[1]) * (o.instrument - e[2])),
            psi_b: Arc::new(|o, e| (o.outcome - e[0]) * (o.instrument - e[2])),
            nuisance_specs: vec![
                NuisanceComponentSpec::cond_mean(Response::role(Role::Outcome)),
                NuisanceComponentSpec::cond_mean(Response::role(Role::Treatment)),
                NuisanceComponentSpec::cond_mean(Response::role(Role::Instrument)),
            ],
            psi_a_is_constant: false,
            psi_roles: vec![Role::Outcome, Role::Treatment, Role::Instrument],
            weight: None,
        },
        ModelId::Custom(name) => return Err(MomentError::UnknownModel(name.clone())),
    };
    Ok(model)
}

/// Monte Carlo value of `Λ = E[g(X)²{η₀₁(X) − η₀₂(X) − θ₀}] / E[g(X)]²` for
/// the weighted ATE, with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    pub se: f64,
}

pub fn population_lambda_wate<R, S, F1, F2>(
    model: &MomentModel,
    eta01: F1,
    eta02: F2,
    mut sampler: S,
    theta0: f64,
    draws: usize,
    rng: &mut R,
) -> Result<LambdaEstimate, MomentError>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Vec<f64>,
    F1: Fn(&[f64]) -> f64,
    F2: Fn(&[f64]) -> f64,
{
    let g = match (&model.id, &model.weight) {
        (ModelId::Wate, Some(g)) => g.clone(),
        _ => return Err(MomentError::NotWate),
    };
    let mut num = Vec::with_capacity(draws);
    let mut den = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = sampler(rng);
        let gx = g(&x);
        num.push(gx * gx * (eta01(&x) - eta02(&x) - theta0));
        den.push(gx);
    }
    let nf = draws as f64;
    let mean_num = num.iter().sum::<f64>() / nf;
    let mean_den = den.iter().sum::<f64>() / nf;
    if mean_den <= 0.0 {
        return Err(MomentError::DegenerateWeight(mean_den));
    }
    let value = mean_num / (mean_den * mean_den);
    // Linearisation of N/D² around the sample means.
    let a = 1.0 / (mean_den * mean_den);
    let b = -2.0 * mean_num / mean_den.powi(3);
    let lin: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(u, v)| a * (u - mean_num) + b * (v - mean_den))
        .collect();
    let var = lin.iter().map(|l| l * l).sum::<f64>() / (nf - 1.0);
    Ok(LambdaEstimate { value, se: (var / nf).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs<'a>(y: f64, y0: f64, a: f64, z: f64, x: &'a [f64]) -> Observation<'a> {
        Observation { outcome: y, outcome_pre: y0, treatment: a, instrument: z, x }
    }

    #[test]
    fn catalog_arities() {
        let want = [4, 2, 6, 4, 2, 2, 3];
        for (id, p) in ModelId::CATALOG.iter().zip(want) {
            let m = catalog_model(id.clone());
            assert_eq!(m.p(), p, "{id}");
            assert_eq!(m.psi_a_is_constant(), *id == ModelId::Ate, "{id}");
        }
    }

    #[test]
    fn ate_example_row() {
        let m = catalog_model(ModelId::Ate);
        let x = [0.3];
        let o = obs(1.0, f64::NAN, 1.0, f64::NAN, &x);
        let eta = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(m.psi_a(&o, &eta), 1.0);
        assert_eq!(eval_moment(&m, &o, 0.0, &eta).unwrap(), 1.0);
    }

    #[test]
    fn att_did_psi_a_is_treatment() {
        let m = catalog_model(ModelId::AttDid);
        let x = [0.3];
        for a in [0.0, 1.0] {
            let o = obs(5.0, 2.0, a, f64::NAN, &x);
            assert_eq!(m.psi_a(&o, &[0.7, 1.3]), a);
        }
    }

    #[test]
    fn late_psi_b_matches_display() {
        let m = catalog_model(ModelId::Late);
        let x = [0.4];
        let e = [1.1, 0.4, 0.7, 0.2, 2.5, 1.8];
        for (y, d, z) in [(3.0, 1.0, 1.0), (2.0, 0.0, 0.0), (0.0, 1.0, 0.0)] {
            let o = obs(y, f64::NAN, d, z, &x);
            let want = e[0] - e[1] + z * (y - e[0]) * e[4] - (1.0 - z) * (y - e[1]) * e[5];
            assert_eq!(m.psi_b(&o, &e), want);
        }
    }

    #[test]
    fn plm_example_row() {
        let m = catalog_model(ModelId::Plm);
        let x = [12.0];
        let o = obs(2.0, f64::NAN, 1.0, f64::NAN, &x);
        assert_eq!(eval_moment(&m, &o, 1.0, &[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn root_gives_zero() {
        let m = catalog_model(ModelId::Late);
        let x = [0.4];
        let e = [1.1, 0.4, 0.7, 0.2, 2.5, 1.8];
        let o = obs(3.0, f64::NAN, 1.0, 1.0, &x);
        let theta = m.psi_b(&o, &e) / m.psi_a(&o, &e);
        assert!(eval_moment(&m, &o, theta, &e).unwrap().abs() < 1e-12);
    }

    #[test]
    fn arity_mismatch() {
        let m = catalog_model(ModelId::Ate);
        let x = [0.0];
        let o = obs(1.0, 0.0, 1.0, 0.0, &x);
        assert_eq!(
            eval_moment(&m, &o, 0.0, &[1.0, 2.0]),
            Err(MomentError::Arity { model: "ATE".into(), expected: 4, got: 2 })
        );
    }

    #[test]
    fn ids_parse() {
        assert_eq!("late".parse::<ModelId>().unwrap(), ModelId::Late);
        assert_eq!("att-did".parse::<ModelId>().unwrap(), ModelId::AttDid);
        assert_eq!("PLM_IV".parse::<ModelId>().unwrap(), ModelId::PlmIv);
        assert!(matches!("foo".parse::<ModelId>(), Err(MomentError::UnknownModel(_))));
        assert!(lookup_model(&ModelId::Custom("x".into())).is_err());
    }

    #[test]
    fn spec_invariants() {
        assert!(NuisanceComponentSpec::new(
            NuisanceKind::CondMean,
            Some(Response::role(Role::Outcome)),
            Some(GroupIndicator::new(Role::Treatment, 1)),
        )
        .is_err());
        assert!(NuisanceComponentSpec::new(NuisanceKind::InvGroupProb, None, None).is_err());
        assert!(NuisanceComponentSpec::new(
            NuisanceKind::InvGroupProb,
            None,
            Some(GroupIndicator::new(Role::Outcome, 1)),
        )
        .is_err());
    }

    #[test]
    fn metadata_serializes() {
        let json = serde_json::to_string(&catalog_model(ModelId::AttDid).metadata()).unwrap();
        assert!(json.contains("\"p\":2"));
        assert!(json.contains("outcome - outcome_pre"));
        assert!(json.contains("inv_group_prob"));
    }

    #[test]
    fn wate_lambda_unit_weight_is_zero() {
        let m = wate_with_weight(Arc::new(|_| 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // η₀₁ − η₀₂ = 2 + X, θ₀ = E[2 + X] = 2.5 exactly.
        let lam = population_lambda_wate(
            &m,
            |x| 3.0 + x[0],
            |_| 1.0,
            |r: &mut ChaCha8Rng| vec![r.random::<f64>()],
            2.5,
            200_000,
            &mut rng,
        )
        .unwrap();
        assert!(lam.value.abs() < 4.0 * lam.se, "{lam:?}");
    }

    #[test]
    fn wate_lambda_constant_effect_is_zero() {
        let m = catalog_model(ModelId::Wate);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lam = population_lambda_wate(
            &m,
            |_| 1.7,
            |_| 0.2,
            |r: &mut ChaCha8Rng| vec![r.random::<f64>()],
            1.5,
            10_000,
            &mut rng,
        )
        .unwrap();
        assert!(lam.value.abs() < 1e-12);
    }

    #[test]
    fn wate_lambda_closed_form() {
        // g(X) = X, η₀₁ − η₀₂ = X on U[0,1]: θ₀ = 2/3 and Λ = 1/9.
        let oracle = {
            // Composite Simpson on [0,1] for E[X²(X − 2/3)] and E[X].
            let n = 2000;
            let h = 1.0 / n as f64;
            let simpson = |f: &dyn Fn(f64) -> f64| {
                let mut s = f(0.0) + f(1.0);
                for i in 1..n {
                    s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
                }
                s * h / 3.0
            };
            let num = simpson(&|x| x * x * (x - 2.0 / 3.0));
            let den = simpson(&|x| x);
            num / (den * den)
        };
        assert!((oracle - 1.0 / 9.0).abs() < 1e-12);

        let m = catalog_model(ModelId::Wate);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lam = population_lambda_wate(
            &m,
            |x| x[0],
            |_| 0.0,
            |r: &mut ChaCha8Rng| vec![r.random::<f64>()],
            2.0 / 3.0,
            400_000,
            &mut rng,
        )
        .unwrap();
        assert!((lam.value - oracle).abs() < 4.0 * lam.se, "{lam:?}");
        assert!(lam.se < 0.005);
    }

    #[test]
    fn wate_lambda_degenerate_weight() {
        let m = wate_with_weight(Arc::new(|x| -x[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = population_lambda_wate(
            &m,
            |_| 0.0,
            |_| 0.0,
            |r: &mut ChaCha8Rng| vec![r.random::<f64>()],
            0.0,
            100,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, MomentError::DegenerateWeight(_)));
        assert_eq!(
            population_lambda_wate(
                &catalog_model(ModelId::Ate),
                |_| 0.0,
                |_| 0.0,
                |r: &mut ChaCha8Rng| vec![r.random::<f64>()],
                0.0,
                10,
                &mut rng
            ),
            Err(MomentError::NotWate)
        );
    }
}
