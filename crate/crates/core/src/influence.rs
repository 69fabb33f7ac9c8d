//! Influence of biased responses on the unbiased fit, and the selection and
//! weighting rules built on it.
//!
//! Every influence here is taken with the biased user's ability frozen at the
//! value the adaptive test ended with, so a biased response only touches its
//! item's two coordinates. Two solves against the damped Hessian — one with
//! the all-ones vector and one with the total validation gradient — give the
//! component sum and loss influence of every response as dot products.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::cat::{self, ItemBank};
use crate::error::{Error, Result};
use crate::fitting::{self, FitConfig, FittedModel, Weighted};
use crate::model::{dataset_hessian, local_gradient, Interaction, ItemId, ParamVector, UserId};
use crate::par;

const DAMPING_RETRY_START: f64 = 1e-6;
const DAMPING_LIMIT: f64 = 1e2;

/// Cholesky factor of `H + λI` at a fitted parameter vector.
#[derive(Debug, Clone)]
pub struct HessianFactorization {
    chol: Cholesky<f64, Dyn>,
    damping: f64,
    beta: ParamVector,
}

impl HessianFactorization {
    /// Factorizes `h + λI`. On failure λ restarts at 1e-6 and grows tenfold.
    pub fn new(h: DMatrix<f64>, lambda: f64, beta: ParamVector) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() != beta.len() {
            return Err(Error::invalid(format!(
                "Hessian is {}x{} but the parameter vector has {} entries",
                h.nrows(),
                h.ncols(),
                beta.len()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("damping must be nonnegative"));
        }
        let mut damping = lambda;
        let mut retry = DAMPING_RETRY_START;
        loop {
            let mut m = h.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += damping;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(HessianFactorization { chol, damping, beta });
            }
            if retry > DAMPING_LIMIT {
                return Err(Error::Numerical(format!(
                    "Hessian not positive definite with damping up to {DAMPING_LIMIT}"
                )));
            }
            damping = retry.max(damping * 10.0);
            retry = damping * 10.0;
        }
    }

    /// Hessian of the mean training loss at the model, damped by the fit's prior strength.
    pub fn from_model(model: &FittedModel, train: &[Interaction]) -> Result<Self> {
        let h = dataset_hessian(train, &model.beta)?;
        Self::new(h, model.metadata.config.prior_strength, model.beta.clone())
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn beta(&self) -> &ParamVector {
        &self.beta
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim() {
            return Err(Error::invalid(format!("right-hand side has {} entries, expected {}", g.len(), self.dim())));
        }
        Ok(self.chol.solve(&DVector::from_column_slice(g)).as_slice().to_vec())
    }

    /// Item-coordinate gradient of one response with the ability held fixed.
    fn fixed_gradient(&self, z: &Interaction, theta: f64) -> Result<(usize, usize, f64, f64)> {
        let (oa, ob) = self.beta.index().item_offsets(z.item)?;
        let item = self.beta.item(z.item)?;
        let g = local_gradient(z.correct, &item, theta);
        Ok((oa, ob, g.da, g.db))
    }
}

/// Parameter influence `−(H + λI)⁻¹ ∇l(z)` of one biased response.
pub fn if_param(z: &Interaction, theta_fixed: f64, fact: &HessianFactorization) -> Result<Vec<f64>> {
    let (oa, ob, ga, gb) = fact.fixed_gradient(z, theta_fixed)?;
    let mut g = vec![0.0; fact.dim()];
    g[oa] = ga;
    g[ob] = gb;
    let mut v = fact.solve(&g)?;
    v.iter_mut().for_each(|x| *x = -*x);
    Ok(v)
}

/// Summed loss gradient of the validation responses over item coordinates.
///
/// Validation users are not part of the model, so each one's ability is first
/// estimated from all of their responses with the items frozen.
pub fn validation_gradient(val: &[Interaction], beta: &ParamVector) -> Result<Vec<f64>> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation slice"));
    }
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for x in val {
        by_user.entry(x.user).or_default().push(*x);
    }
    let mut grad = vec![0.0; beta.len()];
    for rows in by_user.values() {
        let observed = rows
            .iter()
            .map(|x| Ok((beta.item(x.item)?, x.correct)))
            .collect::<Result<Vec<_>>>()?;
        let theta = cat::estimate_ability(&observed, cat::CAT_PRIOR_STRENGTH)?;
        for x in rows {
            let (oa, ob) = beta.index().item_offsets(x.item)?;
            let g = local_gradient(x.correct, &beta.item(x.item)?, theta);
            grad[oa] += g.da;
            grad[ob] += g.db;
        }
    }
    Ok(grad)
}

/// Loss influence of one response on the validation set; negative means the
/// response is predicted to lower validation loss.
pub fn if_loss(z: &Interaction, theta_fixed: f64, val: &[Interaction], fact: &HessianFactorization) -> Result<f64> {
    let gv = validation_gradient(val, fact.beta())?;
    let v = if_param(z, theta_fixed, fact)?;
    Ok(gv.iter().zip(&v).map(|(a, b)| a * b).sum())
}

/// Sum of the influence components of a user's responses.
pub fn aif_user(interactions: &[Interaction], theta: f64, fact: &HessianFactorization) -> Result<f64> {
    let mut total = 0.0;
    for z in interactions {
        total += if_param(z, theta, fact)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// Precomputed solves for scoring many responses against one factorization.
pub struct InfluenceScorer<'a> {
    fact: &'a HessianFactorization,
    ones: Vec<f64>,
    val: Option<Vec<f64>>,
}

impl<'a> InfluenceScorer<'a> {
    pub fn new(fact: &'a HessianFactorization, val: Option<&[Interaction]>) -> Result<Self> {
        let ones = fact.solve(&vec![1.0; fact.dim()])?;
        let val = match val {
            Some(v) => Some(fact.solve(&validation_gradient(v, fact.beta())?)?),
            None => None,
        };
        Ok(InfluenceScorer { fact, ones, val })
    }

    /// Component sum of `if_param(z)`.
    pub fn component_sum(&self, z: &Interaction, theta: f64) -> Result<f64> {
        let (oa, ob, ga, gb) = self.fact.fixed_gradient(z, theta)?;
        Ok(-(ga * self.ones[oa] + gb * self.ones[ob]))
    }

    pub fn if_loss(&self, z: &Interaction, theta: f64) -> Result<Option<f64>> {
        let Some(u) = &self.val else { return Ok(None) };
        let (oa, ob, ga, gb) = self.fact.fixed_gradient(z, theta)?;
        Ok(Some(-(ga * u[oa] + gb * u[ob])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionInfluence {
    pub user: UserId,
    pub item: ItemId,
    pub correct: bool,
    pub if_param_sum: f64,
    pub if_loss: Option<f64>,
}

impl InteractionInfluence {
    pub fn interaction(&self) -> Interaction {
        Interaction {
            user: self.user,
            item: self.item,
            correct: self.correct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    UserAif,
    IfParam,
    IfLoss,
    GreedyAif,
    If4uRec,
    IpsNb,
    IpsNbIw,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::UserAif,
        Method::IfParam,
        Method::IfLoss,
        Method::GreedyAif,
        Method::If4uRec,
        Method::IpsNb,
        Method::IpsNbIw,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::UserAif => "user-aif",
            Method::IfParam => "if-param",
            Method::IfLoss => "if-loss",
            Method::GreedyAif => "greedy-aif",
            Method::If4uRec => "if4urec",
            Method::IpsNb => "ips-nb",
            Method::IpsNbIw => "ips-nb-iw",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown debiasing method {s:?}")))
    }
}

/// Which biased responses enter retraining, and with what weight.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    None,
    All,
    Users(BTreeSet<UserId>),
    Interactions(BTreeSet<(UserId, ItemId)>),
    /// One weight per biased response, aligned with the biased slice.
    Weights(Vec<f64>),
}

/// Per-response and per-user influence of a biased set.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub rows: Vec<InteractionInfluence>,
    pub aif: BTreeMap<UserId, f64>,
    pub damping: f64,
}

impl InfluenceReport {
    /// Scores every biased response; `theta_biased` holds each user's final adaptive-test estimate.
    pub fn compute(
        fact: &HessianFactorization,
        biased: &[Interaction],
        theta_biased: &BTreeMap<UserId, f64>,
        val: Option<&[Interaction]>,
    ) -> Result<Self> {
        let scorer = InfluenceScorer::new(fact, val)?;
        let rows = par::map(biased, |z| -> Result<InteractionInfluence> {
            let theta = *theta_biased
                .get(&z.user)
                .ok_or_else(|| Error::index(format!("no ability estimate for biased user {}", z.user)))?;
            Ok(InteractionInfluence {
                user: z.user,
                item: z.item,
                correct: z.correct,
                if_param_sum: scorer.component_sum(z, theta)?,
                if_loss: scorer.if_loss(z, theta)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut aif: BTreeMap<UserId, f64> = BTreeMap::new();
        for r in &rows {
            *aif.entry(r.user).or_insert(0.0) += r.if_param_sum;
        }
        Ok(InfluenceReport {
            rows,
            aif,
            damping: fact.damping(),
        })
    }

    pub fn biased(&self) -> Vec<Interaction> {
        self.rows.iter().map(|r| r.interaction()).collect()
    }

    fn loss_values(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.if_loss.ok_or_else(|| Error::invalid("report has no loss influence; pass a validation set")))
            .collect()
    }

    /// Runs a debiasing method and returns its retraining selection and, for
    /// quantile rules, the threshold used.
    pub fn decide(&self, method: Method, params: &MethodParams) -> Result<(Selection, Option<f64>)> {
        Ok(match method {
            Method::UserAif => {
                let (users, eta) = select_users_aif(&self.aif, params.quantile)?;
                (Selection::Users(users), Some(eta))
            }
            Method::IfParam => {
                let (set, eta) = select_interactions_if_param(self, params.quantile)?;
                (Selection::Interactions(set), Some(eta))
            }
            Method::IfLoss => (Selection::Interactions(select_interactions_if_loss(self)?), None),
            Method::GreedyAif => {
                let values: Vec<f64> = self.rows.iter().map(|r| r.if_param_sum).collect();
                let budget = params
                    .greedy_budget
                    .unwrap_or_else(|| (params.quantile * values.len() as f64 - 1e-9).ceil().max(1.0) as usize);
                let picks = greedy_aif(&values, budget.min(values.len()), params.greedy_variant)?;
                let set = picks.into_iter().map(|i| (self.rows[i].user, self.rows[i].item)).collect();
                (Selection::Interactions(set), None)
            }
            Method::If4uRec => (Selection::Weights(if4urec_weights(&self.loss_values()?, params.alpha)?.0), None),
            Method::IpsNb => (Selection::Weights(ips_nb_weights(&self.biased(), IpsVariant::Nb)?), None),
            Method::IpsNbIw => (Selection::Weights(ips_nb_weights(&self.biased(), IpsVariant::NbIw)?), None),
        })
    }

    /// One row per biased response. The last column is the weight, or 1/0 for selected/rejected.
    pub fn write_interactions_csv<W: Write>(&self, mut out: W, selection: &Selection, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "item_id", "if_param_sum", "if_loss", "decision"])?;
        for (i, r) in self.rows.iter().enumerate() {
            let decision = match selection {
                Selection::None => 0.0,
                Selection::All => 1.0,
                Selection::Users(u) => f64::from(u8::from(u.contains(&r.user))),
                Selection::Interactions(s) => f64::from(u8::from(s.contains(&(r.user, r.item)))),
                Selection::Weights(ws) => ws[i],
            };
            w.write_record([
                r.user.to_string(),
                r.item.to_string(),
                r.if_param_sum.to_string(),
                r.if_loss.map(|v| v.to_string()).unwrap_or_default(),
                decision.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_users_csv<W: Write>(
        &self,
        mut out: W,
        selection: &Selection,
        threshold: Option<f64>,
        preamble: &[String],
    ) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        match threshold {
            Some(t) => writeln!(out, "# threshold={t}")?,
            None => writeln!(out, "# threshold=none")?,
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "aif", "selected"])?;
        for (user, aif) in &self.aif {
            let selected = match selection {
                Selection::None => false,
                Selection::All => true,
                Selection::Users(u) => u.contains(user),
                Selection::Interactions(s) => s.iter().any(|(k, _)| k == user),
                Selection::Weights(_) => true,
            };
            w.write_record([user.to_string(), aif.to_string(), u8::from(selected).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyVariant {
    /// Keep the running sum as close to zero as possible.
    Absolute,
    /// Minimize the signed running sum.
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub quantile: f64,
    pub alpha: f64,
    pub greedy_budget: Option<usize>,
    pub greedy_variant: GreedyVariant,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            quantile: 0.25,
            alpha: 1.0,
            greedy_budget: None,
            greedy_variant: GreedyVariant::Absolute,
        }
    }
}

/// Nearest-rank quantile: the ⌈qN⌉-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty set"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("quantile {q} outside (0, 1]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN influence value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Users whose |AIF| is at most the q-quantile of all |AIF| values.
pub fn select_users_aif(aif: &BTreeMap<UserId, f64>, q: f64) -> Result<(BTreeSet<UserId>, f64)> {
    let mags: Vec<f64> = aif.values().map(|v| v.abs()).collect();
    let eta = nearest_rank(&mags, q)?;
    Ok((aif.iter().filter(|(_, v)| v.abs() <= eta).map(|(k, _)| *k).collect(), eta))
}

pub fn select_interactions_if_param(report: &InfluenceReport, q: f64) -> Result<(BTreeSet<(UserId, ItemId)>, f64)> {
    let mags: Vec<f64> = report.rows.iter().map(|r| r.if_param_sum.abs()).collect();
    let eta = nearest_rank(&mags, q)?;
    Ok((
        report
            .rows
            .iter()
            .filter(|r| r.if_param_sum.abs() <= eta)
            .map(|r| (r.user, r.item))
            .collect(),
        eta,
    ))
}

/// Responses predicted to strictly lower validation loss.
pub fn select_interactions_if_loss(report: &InfluenceReport) -> Result<BTreeSet<(UserId, ItemId)>> {
    let values = report.loss_values()?;
    Ok(report
        .rows
        .iter()
        .zip(values)
        .filter(|(_, v)| *v < 0.0)
        .map(|(r, _)| (r.user, r.item))
        .collect())
}

/// Greedy cancellation over component sums; returns picked indices in order.
/// Ties go to the lower index.
pub fn greedy_aif(values: &[f64], budget: usize, variant: GreedyVariant) -> Result<Vec<usize>> {
    if budget > values.len() {
        return Err(Error::invalid(format!("budget {budget} exceeds {} candidates", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite influence value".into()));
    }
    let mut pool: BTreeSet<(OrderedFloat<f64>, usize)> =
        values.iter().enumerate().map(|(i, v)| (OrderedFloat(*v), i)).collect();
    let mut picks = Vec::with_capacity(budget);
    let mut cum = 0.0;
    while picks.len() < budget {
        let chosen = match variant {
            GreedyVariant::Signed => *pool.iter().next().unwrap(),
            GreedyVariant::Absolute => {
                let target = OrderedFloat(-cum);
                let above = pool.range((target, 0)..).next().copied();
                // lowest index among the largest value below the target
                let below = pool
                    .range(..(target, 0))
                    .next_back()
                    .and_then(|(v, _)| pool.range((*v, 0)..).next().copied());
                match (below, above) {
                    (Some(b), Some(a)) => {
                        let (db, da) = ((cum + b.0 .0).abs(), (cum + a.0 .0).abs());
                        if db < da || (db == da && b.1 < a.1) {
                            b
                        } else {
                            a
                        }
                    }
                    (Some(b), None) => b,
                    (None, Some(a)) => a,
                    (None, None) => unreachable!("pool emptied before budget"),
                }
            }
        };
        pool.remove(&chosen);
        cum += chosen.0 .0;
        picks.push(chosen.1);
    }
    Ok(picks)
}

/// Quadratic-time reference for [`greedy_aif`].
pub fn greedy_aif_naive(values: &[f64], budget: usize, variant: GreedyVariant) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut picks = Vec::new();
    let mut cum = 0.0;
    for _ in 0..budget.min(values.len()) {
        let mut best: Option<(f64, usize)> = None;
        for (i, v) in values.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = match variant {
                GreedyVariant::Absolute => (cum + v).abs(),
                GreedyVariant::Signed => cum + v,
            };
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, i));
            }
        }
        let (_, i) = best.unwrap();
        taken[i] = true;
        cum += values[i];
        picks.push(i);
    }
    picks
}

/// Sigmoid weights of normalized loss influence. A zero range gives 0.5
/// everywhere and sets the returned flag.
pub fn if4urec_weights(if_loss: &[f64], alpha: f64) -> Result<(Vec<f64>, bool)> {
    if if_loss.is_empty() {
        return Err(Error::invalid("no loss influence values"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let max = if_loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = if_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return Ok((vec![0.5; if_loss.len()], true));
    }
    // saturated logits would round to exactly 0 or 1
    let open = |w: f64| w.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Ok((if_loss.iter().map(|v| open(1.0 / (1.0 + (alpha * v / range).exp()))).collect(), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpsVariant {
    Nb,
    NbIw,
}

/// Inverse-frequency weights, normalized to mean 1 over `biased`.
pub fn ips_nb_weights(biased: &[Interaction], variant: IpsVariant) -> Result<Vec<f64>> {
    if biased.is_empty() {
        return Err(Error::invalid("empty biased set"));
    }
    let n = biased.len() as f64;
    let mut items: HashMap<ItemId, f64> = HashMap::new();
    let mut users: HashMap<UserId, f64> = HashMap::new();
    for x in biased {
        *items.entry(x.item).or_insert(0.0) += 1.0;
        *users.entry(x.user).or_insert(0.0) += 1.0;
    }
    let raw: Vec<f64> = biased
        .iter()
        .map(|x| {
            let mut prop = items[&x.item] / n;
            if variant == IpsVariant::NbIw {
                prop *= users[&x.user] / n;
            }
            1.0 / prop
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Refits on the unbiased training slice plus the selected biased responses.
/// Biased users get fresh abilities, estimated jointly.
pub fn retrain_with_selection(
    unbiased_train: &[Interaction],
    biased: &[Interaction],
    selection: &Selection,
    val: &[Interaction],
    catalog: Option<&BTreeSet<ItemId>>,
    config: &FitConfig,
) -> Result<FittedModel> {
    let mut rows: Vec<Weighted> = unbiased_train.iter().map(|x| Weighted { x: *x, weight: 1.0 }).collect();
    match selection {
        Selection::None => {}
        Selection::All => rows.extend(biased.iter().map(|x| Weighted { x: *x, weight: 1.0 })),
        Selection::Users(users) => rows.extend(
            biased
                .iter()
                .filter(|x| users.contains(&x.user))
                .map(|x| Weighted { x: *x, weight: 1.0 }),
        ),
        Selection::Interactions(set) => {
            let known: BTreeSet<(UserId, ItemId)> = biased.iter().map(|x| (x.user, x.item)).collect();
            if let Some((u, i)) = set.iter().find(|k| !known.contains(k)) {
                return Err(Error::index(format!("selected response user {u} item {i} is not in the biased set")));
            }
            rows.extend(
                biased
                    .iter()
                    .filter(|x| set.contains(&(x.user, x.item)))
                    .map(|x| Weighted { x: *x, weight: 1.0 }),
            );
        }
        Selection::Weights(ws) => {
            if ws.len() != biased.len() {
                return Err(Error::invalid(format!("{} weights for {} biased responses", ws.len(), biased.len())));
            }
            rows.extend(biased.iter().zip(ws).map(|(x, w)| Weighted { x: *x, weight: *w }));
        }
    }
    fitting::fit_weighted(&rows, val, catalog, None, config)
}

/// Item bank view of a factorization's parameters.
pub fn bank_of(fact: &HessianFactorization) -> ItemBank {
    let (items, _) = fact.beta().unpack();
    ItemBank::new(fact.beta().index().items().iter().copied().zip(items))
}
