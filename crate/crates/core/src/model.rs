//! Two-parameter logistic IRT model.
//!
//! The response probability is `σ(a·(θ − b))` with discrimination `a > 0`,
//! difficulty `b` and ability `θ`. All derivatives are taken with respect to
//! the natural coordinates `(a, b, θ)`; the flat parameter vector lays items
//! out as `[a_1, b_1, …, a_Q, b_Q]` followed by one `θ` per trained user.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOSS_CLAMP, 1 - LOSS_CLAMP]` inside the loss.
pub const LOSS_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One observed response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub correct: bool,
}

impl Interaction {
    pub fn new(user: u32, item: u32, correct: bool) -> Self {
        Interaction {
            user: UserId(user),
            item: ItemId(item),
            correct,
        }
    }

    #[inline]
    pub fn label(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub discrimination: f64,
    pub difficulty: f64,
}

impl ItemParams {
    pub fn new(discrimination: f64, difficulty: f64) -> Result<Self> {
        if !(discrimination.is_finite() && discrimination > 0.0) {
            return Err(Error::invalid(format!(
                "discrimination must be finite and positive, got {discrimination}"
            )));
        }
        if !difficulty.is_finite() {
            return Err(Error::invalid(format!("difficulty must be finite, got {difficulty}")));
        }
        Ok(ItemParams {
            discrimination,
            difficulty,
        })
    }

    #[inline]
    pub fn logit(&self, theta: f64) -> f64 {
        self.discrimination * (theta - self.difficulty)
    }

    /// Unchecked response probability.
    #[inline]
    pub fn prob(&self, theta: f64) -> f64 {
        sigmoid(self.logit(theta))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow or cancellation.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `p − x` on the logit scale, so it stays precise when `p` is close to `x`.
#[inline]
fn residual(correct: bool, z: f64) -> f64 {
    if correct {
        -sigmoid(-z)
    } else {
        sigmoid(z)
    }
}

/// Probability of a correct response, with input validation.
pub fn predict_prob(theta: f64, item: &ItemParams) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("theta must be finite, got {theta}")));
    }
    if !(item.discrimination.is_finite() && item.discrimination > 0.0) || !item.difficulty.is_finite() {
        return Err(Error::invalid(format!("invalid item parameters {item:?}")));
    }
    Ok(item.prob(theta))
}

/// Binary cross-entropy of one response.
#[inline]
pub fn interaction_loss(correct: bool, item: &ItemParams, theta: f64) -> f64 {
    // −ln p clamped to p ∈ [ε, 1 − ε], evaluated as a softplus for precision
    let z = item.logit(theta);
    let loss = if correct { softplus(-z) } else { softplus(z) };
    loss.clamp(-(-LOSS_CLAMP).ln_1p(), -LOSS_CLAMP.ln())
}

/// Gradient of one interaction's loss with respect to `(a, b, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGradient {
    pub da: f64,
    pub db: f64,
    pub dtheta: f64,
}

#[inline]
pub fn local_gradient(correct: bool, item: &ItemParams, theta: f64) -> LocalGradient {
    let resid = residual(correct, item.logit(theta));
    let a = item.discrimination;
    LocalGradient {
        da: resid * (theta - item.difficulty),
        db: -a * resid,
        dtheta: a * resid,
    }
}

/// Hessian of one interaction's loss with respect to `(a, b, θ)`, row-major.
#[inline]
pub fn local_hessian(correct: bool, item: &ItemParams, theta: f64) -> [[f64; 3]; 3] {
    let a = item.discrimination;
    let d = theta - item.difficulty;
    let z = item.logit(theta);
    let r = residual(correct, z);
    let w = sigmoid(z) * sigmoid(-z);
    let aa = w * d * d;
    let ab = -a * w * d - r;
    let at = a * w * d + r;
    let bb = w * a * a;
    let bt = -w * a * a;
    let tt = w * a * a;
    [[aa, ab, at], [ab, bb, bt], [at, bt, tt]]
}

/// Maps item and user ids onto offsets of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIndex {
    items: Vec<ItemId>,
    users: Vec<UserId>,
    item_pos: HashMap<ItemId, usize>,
    user_pos: HashMap<UserId, usize>,
}

impl ParamIndex {
    /// Ids are sorted and deduplicated, so the layout is independent of input order.
    pub fn new(items: impl IntoIterator<Item = ItemId>, users: impl IntoIterator<Item = UserId>) -> Self {
        let mut items: Vec<ItemId> = items.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        let mut users: Vec<UserId> = users.into_iter().collect();
        users.sort_unstable();
        users.dedup();
        let item_pos = items.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let user_pos = users.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ParamIndex {
            items,
            users,
            item_pos,
            user_pos,
        }
    }

    pub fn from_interactions(data: &[Interaction]) -> Self {
        Self::new(data.iter().map(|x| x.item), data.iter().map(|x| x.user))
    }

    pub fn len(&self) -> usize {
        2 * self.items.len() + self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_slot(&self, item: ItemId) -> Option<usize> {
        self.item_pos.get(&item).copied()
    }

    pub fn user_slot(&self, user: UserId) -> Option<usize> {
        self.user_pos.get(&user).copied()
    }

    /// Offsets of `(a_j, b_j)`.
    pub fn item_offsets(&self, item: ItemId) -> Result<(usize, usize)> {
        let j = self
            .item_slot(item)
            .ok_or_else(|| Error::index(format!("item {item} is not indexed")))?;
        Ok((2 * j, 2 * j + 1))
    }

    pub fn user_offset(&self, user: UserId) -> Result<usize> {
        let i = self
            .user_slot(user)
            .ok_or_else(|| Error::index(format!("user {user} is not indexed")))?;
        Ok(2 * self.items.len() + i)
    }
}

/// Flat parameter vector paired with its index map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    index: ParamIndex,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(index: ParamIndex, values: Vec<f64>) -> Result<Self> {
        if values.len() != index.len() {
            return Err(Error::index(format!(
                "parameter vector has length {}, index expects {}",
                values.len(),
                index.len()
            )));
        }
        Ok(ParamVector { index, values })
    }

    /// Packs per-item parameters and per-user abilities (both in index order).
    pub fn pack(index: ParamIndex, items: &[ItemParams], thetas: &[f64]) -> Result<Self> {
        if items.len() != index.n_items() || thetas.len() != index.n_users() {
            return Err(Error::index("pack: item or user count does not match the index"));
        }
        let mut values = Vec::with_capacity(index.len());
        for it in items {
            values.push(it.discrimination);
            values.push(it.difficulty);
        }
        values.extend_from_slice(thetas);
        Ok(ParamVector { index, values })
    }

    pub fn unpack(&self) -> (Vec<ItemParams>, Vec<f64>) {
        let nq = self.index.n_items();
        let items = (0..nq)
            .map(|j| ItemParams {
                discrimination: self.values[2 * j],
                difficulty: self.values[2 * j + 1],
            })
            .collect();
        (items, self.values[2 * nq..].to_vec())
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn item(&self, item: ItemId) -> Result<ItemParams> {
        let (oa, ob) = self.index.item_offsets(item)?;
        Ok(ItemParams {
            discrimination: self.values[oa],
            difficulty: self.values[ob],
        })
    }

    pub fn theta(&self, user: UserId) -> Result<f64> {
        Ok(self.values[self.index.user_offset(user)?])
    }

    /// Sparse gradient of one interaction's loss over parameter-vector offsets.
    ///
    /// With `theta_fixed = Some(θ)` the user's ability is taken as a constant
    /// and contributes no coordinate, so the user need not be indexed.
    pub fn interaction_gradient(&self, x: &Interaction, theta_fixed: Option<f64>) -> Result<Vec<(usize, f64)>> {
        let (oa, ob) = self.index.item_offsets(x.item)?;
        let item = ItemParams {
            discrimination: self.values[oa],
            difficulty: self.values[ob],
        };
        match theta_fixed {
            Some(theta) => {
                let g = local_gradient(x.correct, &item, theta);
                Ok(vec![(oa, g.da), (ob, g.db)])
            }
            None => {
                let ou = self.index.user_offset(x.user)?;
                let g = local_gradient(x.correct, &item, self.values[ou]);
                Ok(vec![(oa, g.da), (ob, g.db), (ou, g.dtheta)])
            }
        }
    }

    fn resolve(&self, x: &Interaction) -> Result<(usize, usize, usize)> {
        let (oa, ob) = self.index.item_offsets(x.item)?;
        let ou = self.index.user_offset(x.user)?;
        Ok((oa, ob, ou))
    }
}

fn check_nonempty(data: &[Interaction]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty interaction slice"));
    }
    Ok(())
}

/// Mean interaction loss over `data`.
pub fn dataset_loss(data: &[Interaction], beta: &ParamVector) -> Result<f64> {
    check_nonempty(data)?;
    let mut total = 0.0;
    for x in data {
        let (oa, ob, ou) = beta.resolve(x)?;
        let v = beta.values();
        let item = ItemParams {
            discrimination: v[oa],
            difficulty: v[ob],
        };
        total += interaction_loss(x.correct, &item, v[ou]);
    }
    Ok(total / data.len() as f64)
}

/// Dense gradient of the mean loss.
pub fn dataset_gradient(data: &[Interaction], beta: &ParamVector) -> Result<Vec<f64>> {
    check_nonempty(data)?;
    let n = data.len() as f64;
    let mut grad = vec![0.0; beta.len()];
    for x in data {
        let (oa, ob, ou) = beta.resolve(x)?;
        let v = beta.values();
        let item = ItemParams {
            discrimination: v[oa],
            difficulty: v[ob],
        };
        let g = local_gradient(x.correct, &item, v[ou]);
        grad[oa] += g.da / n;
        grad[ob] += g.db / n;
        grad[ou] += g.dtheta / n;
    }
    Ok(grad)
}

/// Exact Hessian of the mean loss. Each symmetric pair is written from one value.
pub fn dataset_hessian(data: &[Interaction], beta: &ParamVector) -> Result<DMatrix<f64>> {
    check_nonempty(data)?;
    let n = data.len() as f64;
    let dim = beta.len();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for x in data {
        let (oa, ob, ou) = beta.resolve(x)?;
        let v = beta.values();
        let item = ItemParams {
            discrimination: v[oa],
            difficulty: v[ob],
        };
        let local = local_hessian(x.correct, &item, v[ou]);
        let offs = [oa, ob, ou];
        for r in 0..3 {
            h[(offs[r], offs[r])] += local[r][r] / n;
            for c in (r + 1)..3 {
                let val = local[r][c] / n;
                h[(offs[r], offs[c])] += val;
                h[(offs[c], offs[r])] += val;
            }
        }
    }
    Ok(h)
}
