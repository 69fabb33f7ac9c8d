//! Joint estimation of item and user parameters.
//!
//! The objective is the weighted mean interaction loss plus an L2 penalty
//! `(λ/2)·(Σ(a_j − 1)² + Σ b_j² + Σ θ_i²)`. Discriminations are optimized on a
//! log scale so they stay positive. Each epoch takes one full-batch gradient
//! step, halving it until the objective decreases, and the run keeps the
//! checkpoint with the best validation loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cat::{self, ItemBank};
use crate::error::{Error, Result};
use crate::model::{interaction_loss, Interaction, ItemId, ItemParams, ParamIndex, ParamVector, UserId};
use crate::par;

const LOG_A_MIN: f64 = -6.9; // a ≈ 1e-3
const LOG_A_MAX: f64 = 3.9; // a ≈ 50
const MAX_HALVINGS: usize = 30;
/// Validation users with fewer responses cannot be split and are skipped.
pub const MIN_VALIDATION_RESPONSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub grad_tolerance: f64,
    pub prior_strength: f64,
    pub patience: usize,
    pub val_holdout_fraction: f64,
    pub rng_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 20.0,
            max_epochs: 2000,
            grad_tolerance: 1e-7,
            prior_strength: 1e-3,
            patience: 20,
            val_holdout_fraction: 0.2,
            rng_seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::Config("grad_tolerance must be positive".into()));
        }
        if !(self.prior_strength >= 0.0 && self.prior_strength.is_finite()) {
            return Err(Error::Config("prior_strength must be nonnegative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.val_holdout_fraction > 0.0 && self.val_holdout_fraction < 1.0) {
            return Err(Error::Config("val_holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub discrimination: f64,
    pub difficulty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub config: FitConfig,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    /// Items with no training responses; they keep their initial values.
    pub flagged_items: Vec<ItemId>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    metadata: FitMetadata,
    item_params: Vec<ItemRecord>,
    user_abilities: Vec<UserRecord>,
}

/// A fitted parameter vector with its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub beta: ParamVector,
    pub metadata: FitMetadata,
}

impl FittedModel {
    pub fn item_params(&self) -> Vec<(ItemId, ItemParams)> {
        let (items, _) = self.beta.unpack();
        self.beta.index().items().iter().copied().zip(items).collect()
    }

    pub fn user_abilities(&self) -> Vec<(UserId, f64)> {
        let (_, thetas) = self.beta.unpack();
        self.beta.index().users().iter().copied().zip(thetas).collect()
    }

    pub fn item_bank(&self) -> ItemBank {
        ItemBank::new(self.item_params())
    }

    /// Difficulties of items that had training data.
    pub fn difficulties(&self) -> BTreeMap<ItemId, f64> {
        let flagged: BTreeSet<ItemId> = self.metadata.flagged_items.iter().copied().collect();
        self.item_params()
            .into_iter()
            .filter(|(id, _)| !flagged.contains(id))
            .map(|(id, p)| (id, p.difficulty))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            metadata: self.metadata.clone(),
            item_params: self
                .item_params()
                .into_iter()
                .map(|(item_id, p)| ItemRecord {
                    item_id,
                    discrimination: p.discrimination,
                    difficulty: p.difficulty,
                })
                .collect(),
            user_abilities: self
                .user_abilities()
                .into_iter()
                .map(|(user_id, theta)| UserRecord { user_id, theta })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        let index = ParamIndex::new(
            doc.item_params.iter().map(|r| r.item_id),
            doc.user_abilities.iter().map(|r| r.user_id),
        );
        if index.n_items() != doc.item_params.len() || index.n_users() != doc.user_abilities.len() {
            return Err(Error::invalid("model document has duplicate ids"));
        }
        let mut items = vec![ItemParams { discrimination: 1.0, difficulty: 0.0 }; index.n_items()];
        for r in &doc.item_params {
            items[index.item_slot(r.item_id).unwrap()] = ItemParams::new(r.discrimination, r.difficulty)?;
        }
        let mut thetas = vec![0.0; index.n_users()];
        for r in &doc.user_abilities {
            thetas[index.user_slot(r.user_id).unwrap()] = r.theta;
        }
        let beta = ParamVector::pack(index, &items, &thetas)?;
        Ok(FittedModel {
            beta,
            metadata: doc.metadata,
        })
    }
}

/// Result of the held-out validation protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOutcome {
    /// Mean loss over all held-out responses; `None` when nothing was scored.
    pub loss: Option<f64>,
    pub users_scored: usize,
    pub users_skipped: usize,
    pub heldout: usize,
}

fn mix_seed(seed: u64, user: UserId) -> u64 {
    // splitmix64 finalizer over (seed, user)
    let mut z = seed ^ (u64::from(user.0)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of held-out responses for a user with `n` responses.
pub fn heldout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil().max(1.0) as usize
}

/// Seeded per-user split into (fit part, held-out part), items in id order before shuffling.
pub fn split_user_responses(rows: &[Interaction], fraction: f64, seed: u64) -> (Vec<Interaction>, Vec<Interaction>) {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|x| x.item);
    let user = rows.first().map(|x| x.user).unwrap_or(UserId(0));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, user));
    rows.shuffle(&mut rng);
    let n_hold = heldout_count(rows.len(), fraction).min(rows.len());
    let held = rows.split_off(rows.len() - n_hold);
    (rows, held)
}

/// With item parameters frozen, fits each validation user's ability on a
/// seeded share of their responses and scores the held-out rest.
pub fn validation_loss(bank: &ItemBank, val: &[Interaction], holdout_fraction: f64, seed: u64) -> Result<ValidationOutcome> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for x in val.iter().filter(|x| bank.contains(x.item)) {
        by_user.entry(x.user).or_default().push(*x);
    }
    let users: Vec<(UserId, Vec<Interaction>)> = by_user.into_iter().collect();
    let per_user: Vec<Result<Option<(f64, usize)>>> = par::map(&users, |(_, rows)| {
        if rows.len() < MIN_VALIDATION_RESPONSES {
            return Ok(None);
        }
        let (fit, held) = split_user_responses(rows, holdout_fraction, seed);
        let observed: Vec<(ItemParams, bool)> = fit.iter().map(|x| (*bank.get(x.item).unwrap(), x.correct)).collect();
        let theta = cat::estimate_ability(&observed, cat::CAT_PRIOR_STRENGTH)?;
        let total: f64 = held
            .iter()
            .map(|x| interaction_loss(x.correct, bank.get(x.item).unwrap(), theta))
            .sum();
        Ok(Some((total, held.len())))
    });
    let mut total = 0.0;
    let mut heldout = 0;
    let mut scored = 0;
    let mut skipped = 0;
    for r in per_user {
        match r? {
            Some((t, n)) => {
                total += t;
                heldout += n;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(ValidationOutcome {
        loss: if heldout > 0 { Some(total / heldout as f64) } else { None },
        users_scored: scored,
        users_skipped: skipped,
        heldout,
    })
}

/// A training response with its loss weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weighted {
    pub x: Interaction,
    pub weight: f64,
}

struct Compiled {
    item: usize,
    user: usize,
    label: f64,
    weight: f64,
}

struct Problem {
    rows: Vec<Compiled>,
    n_items: usize,
    n_users: usize,
    total_weight: f64,
    prior: f64,
}

/// Optimization coordinates: `[ln a_1, b_1, …, θ_1, …]`.
impl Problem {
    fn dim(&self) -> usize {
        2 * self.n_items + self.n_users
    }

    fn to_beta(&self, phi: &[f64]) -> Vec<f64> {
        let mut beta = phi.to_vec();
        for j in 0..self.n_items {
            beta[2 * j] = phi[2 * j].exp();
        }
        beta
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..self.n_items {
            let da = beta[2 * j] - 1.0;
            s += da * da + beta[2 * j + 1] * beta[2 * j + 1];
        }
        for t in &beta[2 * self.n_items..] {
            s += t * t;
        }
        0.5 * self.prior * s
    }

    fn data_loss(&self, beta: &[f64]) -> f64 {
        let off = 2 * self.n_items;
        let mut total = 0.0;
        for r in &self.rows {
            let it = ItemParams {
                discrimination: beta[2 * r.item],
                difficulty: beta[2 * r.item + 1],
            };
            total += r.weight * interaction_loss(r.label > 0.5, &it, beta[off + r.user]);
        }
        total / self.total_weight
    }

    fn objective(&self, beta: &[f64]) -> f64 {
        self.data_loss(beta) + self.penalty(beta)
    }

    /// Gradient in natural coordinates.
    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let off = 2 * self.n_items;
        let mut g = vec![0.0; self.dim()];
        let inv_w = 1.0 / self.total_weight;
        for r in &self.rows {
            let a = beta[2 * r.item];
            let b = beta[2 * r.item + 1];
            let th = beta[off + r.user];
            let resid = (crate::model::sigmoid(a * (th - b)) - r.label) * r.weight * inv_w;
            g[2 * r.item] += resid * (th - b);
            g[2 * r.item + 1] -= resid * a;
            g[off + r.user] += resid * a;
        }
        for j in 0..self.n_items {
            g[2 * j] += self.prior * (beta[2 * j] - 1.0);
            g[2 * j + 1] += self.prior * beta[2 * j + 1];
        }
        for u in 0..self.n_users {
            g[off + u] += self.prior * beta[off + u];
        }
        g
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fits on unweighted training responses. Items are those seen in `train`.
pub fn fit_irt(train: &[Interaction], val: &[Interaction], config: &FitConfig) -> Result<FittedModel> {
    let rows: Vec<Weighted> = train.iter().map(|x| Weighted { x: *x, weight: 1.0 }).collect();
    fit_weighted(&rows, val, None, None, config)
}

/// General fit.
///
/// `catalog` adds items with no training responses; they are flagged and keep
/// their initial values. `warm_start` seeds parameters for ids it knows.
/// An empty `val` disables early stopping.
pub fn fit_weighted(
    train: &[Weighted],
    val: &[Interaction],
    catalog: Option<&BTreeSet<ItemId>>,
    warm_start: Option<&FittedModel>,
    config: &FitConfig,
) -> Result<FittedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(w) = train.iter().find(|w| !(w.weight >= 0.0 && w.weight.is_finite())) {
        return Err(Error::invalid(format!("invalid weight {} for user {}", w.weight, w.x.user)));
    }
    let train_users: BTreeSet<UserId> = train.iter().map(|w| w.x.user).collect();
    if let Some(x) = val.iter().find(|x| train_users.contains(&x.user)) {
        return Err(Error::invalid(format!("validation user {} also appears in training", x.user)));
    }
    let mut seen = std::collections::HashSet::with_capacity(train.len());
    for w in train {
        if !seen.insert((w.x.user, w.x.item)) {
            return Err(Error::invalid(format!("duplicate training response user {} item {}", w.x.user, w.x.item)));
        }
    }

    let mut item_ids: BTreeSet<ItemId> = train.iter().map(|w| w.x.item).collect();
    let trained_items = item_ids.clone();
    if let Some(c) = catalog {
        item_ids.extend(c.iter().copied());
    }
    let index = ParamIndex::new(item_ids.iter().copied(), train_users.iter().copied());
    let flagged: Vec<ItemId> = item_ids.iter().filter(|id| !trained_items.contains(id)).copied().collect();

    let rows: Vec<Compiled> = train
        .iter()
        .map(|w| Compiled {
            item: index.item_slot(w.x.item).unwrap(),
            user: index.user_slot(w.x.user).unwrap(),
            label: w.x.label(),
            weight: w.weight,
        })
        .collect();
    let total_weight: f64 = rows.iter().map(|r| r.weight).sum();
    if !(total_weight > 0.0) {
        return Err(Error::invalid("training weights sum to zero"));
    }
    let problem = Problem {
        rows,
        n_items: index.n_items(),
        n_users: index.n_users(),
        total_weight,
        prior: config.prior_strength,
    };

    // Laplace-smoothed warm start.
    let mut item_counts = vec![(0.0_f64, 0.0_f64); problem.n_items];
    let mut user_counts = vec![(0.0_f64, 0.0_f64); problem.n_users];
    for r in &problem.rows {
        item_counts[r.item].0 += r.label;
        item_counts[r.item].1 += 1.0;
        user_counts[r.user].0 += r.label;
        user_counts[r.user].1 += 1.0;
    }
    let mut phi = vec![0.0; problem.dim()];
    for (j, (c, n)) in item_counts.iter().enumerate() {
        phi[2 * j] = 0.0;
        phi[2 * j + 1] = logit((n - c + 1.0) / (n + 2.0));
    }
    let off = 2 * problem.n_items;
    for (u, (c, n)) in user_counts.iter().enumerate() {
        phi[off + u] = logit((c + 1.0) / (n + 2.0));
    }
    if let Some(init) = warm_start {
        for (id, p) in init.item_params() {
            if let Some(j) = index.item_slot(id) {
                phi[2 * j] = p.discrimination.ln();
                phi[2 * j + 1] = p.difficulty;
            }
        }
        for (id, th) in init.user_abilities() {
            if let Some(u) = index.user_slot(id) {
                phi[off + u] = th;
            }
        }
    }

    let bank_of = |beta: &[f64]| -> ItemBank {
        ItemBank::new(index.items().iter().enumerate().map(|(j, id)| {
            (
                *id,
                ItemParams {
                    discrimination: beta[2 * j],
                    difficulty: beta[2 * j + 1],
                },
            )
        }))
    };
    let use_val = !val.is_empty();
    let val_of = |beta: &[f64]| -> Result<Option<f64>> {
        if !use_val {
            return Ok(None);
        }
        Ok(validation_loss(&bank_of(beta), val, config.val_holdout_fraction, config.rng_seed)?.loss)
    };

    let mut beta = problem.to_beta(&phi);
    let mut current = problem.objective(&beta);
    let mut best_beta = beta.clone();
    let mut best_val = val_of(&beta)?;
    let mut since_best = 0usize;
    let mut epochs = 0usize;

    while epochs < config.max_epochs {
        let g = problem.gradient(&beta);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm <= config.grad_tolerance {
            break;
        }
        // chain rule: ∂F/∂ln a = a ∂F/∂a
        let dir: Vec<f64> = (0..g.len())
            .map(|c| if c < off && c % 2 == 0 { -g[c] * beta[c] } else { -g[c] })
            .collect();
        let mut step = config.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = phi.clone();
            for c in 0..cand.len() {
                cand[c] += step * dir[c];
            }
            for j in 0..problem.n_items {
                cand[2 * j] = cand[2 * j].clamp(LOG_A_MIN, LOG_A_MAX);
            }
            let cand_beta = problem.to_beta(&cand);
            let val = problem.objective(&cand_beta);
            if val < current {
                accepted = Some((cand, cand_beta, val));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_beta, val)) = accepted else {
            break;
        };
        phi = cand;
        beta = cand_beta;
        current = val;
        epochs += 1;

        if use_val {
            let v = val_of(&beta)?;
            log::trace!("epoch {epochs}: objective {current}, validation {v:?}, step {step}");
            match (v, best_val) {
                (Some(v), Some(b)) if v >= b => {
                    since_best += 1;
                    if since_best >= config.patience {
                        break;
                    }
                }
                (Some(_), _) => {
                    best_val = v;
                    best_beta = beta.clone();
                    since_best = 0;
                }
                (None, _) => {
                    best_beta = beta.clone();
                }
            }
        } else {
            best_beta = beta.clone();
        }
    }

    let final_train_loss = problem.data_loss(&best_beta);
    let beta = ParamVector::from_values(index, best_beta)?;
    Ok(FittedModel {
        beta,
        metadata: FitMetadata {
            config: config.clone(),
            epochs_run: epochs,
            final_train_loss,
            final_val_loss: best_val,
            flagged_items: flagged,
            provenance: BTreeMap::new(),
        },
    })
}

fn problem_for(model: &FittedModel, train: &[Weighted]) -> Result<Problem> {
    let index = model.beta.index();
    let rows = train
        .iter()
        .map(|w| {
            Ok(Compiled {
                item: index
                    .item_slot(w.x.item)
                    .ok_or_else(|| Error::index(format!("item {} not in model", w.x.item)))?,
                user: index
                    .user_slot(w.x.user)
                    .ok_or_else(|| Error::index(format!("user {} not in model", w.x.user)))?,
                label: w.x.label(),
                weight: w.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_weight = rows.iter().map(|r| r.weight).sum();
    Ok(Problem {
        rows,
        n_items: index.n_items(),
        n_users: index.n_users(),
        total_weight,
        prior: model.metadata.config.prior_strength,
    })
}

/// Penalized training objective at a model's parameters.
pub fn penalized_objective(model: &FittedModel, train: &[Weighted]) -> Result<f64> {
    Ok(problem_for(model, train)?.objective(model.beta.values()))
}

/// Gradient of the penalized objective at a model's parameters, natural coordinates.
pub fn penalized_gradient(model: &FittedModel, train: &[Weighted]) -> Result<Vec<f64>> {
    Ok(problem_for(model, train)?.gradient(model.beta.values()))
}

/// Convenience lookup of a model's items by id.
pub fn item_map(model: &FittedModel) -> HashMap<ItemId, ItemParams> {
    model.item_params().into_iter().collect()
}
