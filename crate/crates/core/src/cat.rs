//! Adaptive-test simulation: real-time ability estimation, information-based
//! item selection, and response oracles.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softplus, ItemId, ItemParams, UserId};

/// Ability estimates are clipped to this magnitude.
pub const THETA_BOUND: f64 = 6.0;
/// Prior precision used for ability estimation during a test (standard normal MAP).
pub const CAT_PRIOR_STRENGTH: f64 = 1.0;
pub const KLI_QUAD_NODES: usize = 41;
pub const KLI_WINDOW_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selector {
    #[serde(rename = "FI")]
    Fi,
    #[serde(rename = "KLI")]
    Kli,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Fi => f.write_str("FI"),
            Selector::Kli => f.write_str("KLI"),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FI" => Ok(Selector::Fi),
            "KLI" => Ok(Selector::Kli),
            other => Err(Error::Config(format!("unknown selector `{other}` (expected FI or KLI)"))),
        }
    }
}

/// Read-only item parameter lookup shared by concurrent sessions.
#[derive(Debug, Clone, Default)]
pub struct ItemBank {
    params: HashMap<ItemId, ItemParams>,
}

impl ItemBank {
    pub fn new(items: impl IntoIterator<Item = (ItemId, ItemParams)>) -> Self {
        ItemBank {
            params: items.into_iter().collect(),
        }
    }

    pub fn get(&self, item: ItemId) -> Option<&ItemParams> {
        self.params.get(&item)
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.params.contains_key(&item)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sorted item ids.
    pub fn ids(&self) -> Vec<ItemId> {
        let mut ids: Vec<ItemId> = self.params.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

#[inline]
fn log_posterior(responses: &[(ItemParams, bool)], prior_strength: f64, theta: f64) -> f64 {
    let mut ll = -0.5 * prior_strength * theta * theta;
    for (item, correct) in responses {
        let z = item.logit(theta);
        // log σ(z) = -softplus(-z)
        ll -= if *correct { softplus(-z) } else { softplus(z) };
    }
    ll
}

#[inline]
/// MAP ability estimate under a `N(0, 1/prior_strength)` prior, by 1-D Newton
/// with step halving. The result is clipped to `±THETA_BOUND`.
pub fn estimate_ability(responses: &[(ItemParams, bool)], prior_strength: f64) -> Result<f64> {
    if !(prior_strength >= 0.0 && prior_strength.is_finite()) {
        return Err(Error::invalid(format!("prior_strength must be nonnegative, got {prior_strength}")));
    }
    if responses.is_empty() {
        if prior_strength == 0.0 {
            return Err(Error::invalid("cannot estimate ability from no responses without a prior"));
        }
        return Ok(0.0);
    }

    let mut theta = 0.0_f64;
    let mut current = log_posterior(responses, prior_strength, theta);
    for _ in 0..100 {
        let mut grad = -prior_strength * theta;
        let mut curv = prior_strength;
        for (item, correct) in responses {
            let p = item.prob(theta);
            let a = item.discrimination;
            grad += a * (if *correct { 1.0 } else { 0.0 } - p);
            curv += a * a * p * (1.0 - p);
        }
        if grad == 0.0 {
            break;
        }
        let mut step = grad / curv.max(1e-12);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = (theta + step).clamp(-THETA_BOUND, THETA_BOUND);
            let val = log_posterior(responses, prior_strength, cand);
            if val >= current {
                let moved = (cand - theta).abs();
                theta = cand;
                current = val;
                accepted = moved > 0.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-13 {
            break;
        }
    }
    Ok(theta)
}

/// Two-parameter Fisher information `a²·p(1−p)`.
#[inline]
pub fn fisher_information(theta: f64, item: &ItemParams) -> f64 {
    let p = item.prob(theta);
    item.discrimination * item.discrimination * p * (1.0 - p)
}

#[inline]
fn bernoulli_kl(p: f64, log_p: f64, log_1mp: f64, z_q: f64) -> f64 {
    // log q = -softplus(-z), log(1-q) = -softplus(z)
    let log_q = -softplus(-z_q);
    let log_1mq = -softplus(z_q);
    p * (log_p - log_q) + (1.0 - p) * (log_1mp - log_1mq)
}

/// Kullback-Leibler information: trapezoid integral over
/// `[θ̂ − δ, θ̂ + δ]` of `KL(p(θ̂) ‖ p(θ))` at `n_quad` equally spaced nodes.
pub fn kli_index(theta_hat: f64, item: &ItemParams, delta: f64, n_quad: usize) -> f64 {
    debug_assert!(delta > 0.0 && n_quad >= 3);
    let z0 = item.logit(theta_hat);
    let p0 = crate::model::sigmoid(z0);
    let log_p0 = -softplus(-z0);
    let log_1mp0 = -softplus(z0);
    let lo = theta_hat - delta;
    let h = 2.0 * delta / (n_quad - 1) as f64;
    let mut sum = 0.0;
    for k in 0..n_quad {
        let theta = lo + h * k as f64;
        let f = bernoulli_kl(p0, log_p0, log_1mp0, item.logit(theta)).max(0.0);
        let w = if k == 0 || k + 1 == n_quad { 0.5 } else { 1.0 };
        sum += w * f;
    }
    sum * h
}

/// Integration half-width for the KLI selector after `n_answered` responses.
pub fn kli_window(n_answered: usize) -> f64 {
    KLI_WINDOW_SCALE / (n_answered.max(1) as f64).sqrt()
}

/// Argmax of the selector's information over `pool`; ties go to the smallest id.
pub fn select_next_item(
    theta_hat: f64,
    pool: &[(ItemId, ItemParams)],
    selector: Selector,
    n_answered: usize,
) -> Result<ItemId> {
    let delta = kli_window(n_answered);
    let mut best: Option<(ItemId, f64)> = None;
    for (id, item) in pool {
        let score = match selector {
            Selector::Fi => fisher_information(theta_hat, item),
            Selector::Kli => kli_index(theta_hat, item, delta, KLI_QUAD_NODES),
        };
        best = match best {
            Some((bid, bs)) if bs > score || (bs == score && bid < *id) => Some((bid, bs)),
            _ => Some((*id, score)),
        };
    }
    best.map(|(id, _)| id).ok_or(Error::PoolExhausted)
}

/// Where simulated responses come from.
#[derive(Debug, Clone)]
pub enum ResponseOracle<'a> {
    /// Bernoulli draws from a known ground truth; deterministic per seed.
    BernoulliFromTruth {
        true_theta: f64,
        truth: &'a ItemBank,
        rng_seed: u64,
    },
    /// Replays a dense response row.
    DenseLookup(&'a HashMap<ItemId, bool>),
}

impl ResponseOracle<'_> {
    pub fn can_answer(&self, item: ItemId) -> bool {
        match self {
            ResponseOracle::BernoulliFromTruth { truth, .. } => truth.contains(item),
            ResponseOracle::DenseLookup(row) => row.contains_key(&item),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatSession {
    pub user_id: UserId,
    pub administered: Vec<ItemId>,
    pub responses: Vec<bool>,
    pub theta_trajectory: Vec<f64>,
    pub selector: Selector,
    pub truncated: bool,
}

impl CatSession {
    /// Final ability estimate, or the prior mode for an empty session.
    pub fn final_theta(&self) -> f64 {
        self.theta_trajectory.last().copied().unwrap_or(0.0)
    }

    /// Ability estimate after `step` responses (`step = 0` is the prior mode).
    pub fn theta_at(&self, step: usize) -> f64 {
        if step == 0 {
            0.0
        } else {
            self.theta_trajectory[(step - 1).min(self.theta_trajectory.len() - 1)]
        }
    }

    pub fn len(&self) -> usize {
        self.administered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.administered.is_empty()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.administered.len();
        if self.responses.len() != n || self.theta_trajectory.len() != n {
            return Err(Error::invalid(format!("session for user {}: ragged columns", self.user_id)));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for item in &self.administered {
            if !seen.insert(*item) {
                return Err(Error::invalid(format!(
                    "session for user {}: item {item} administered twice",
                    self.user_id
                )));
            }
        }
        Ok(())
    }
}

/// Runs one adaptive test of `steps` items drawn from `pool`.
///
/// Starts from `θ̂ = 0` and alternates selection, response and MAP
/// re-estimation. Pool items missing from `bank` are ignored; every pool item
/// must be answerable by the oracle.
pub fn simulate_cat(
    user: UserId,
    oracle: &ResponseOracle<'_>,
    bank: &ItemBank,
    selector: Selector,
    steps: usize,
    pool: &[ItemId],
) -> Result<CatSession> {
    if steps == 0 {
        return Err(Error::invalid("steps must be positive"));
    }
    let mut ids: Vec<ItemId> = pool.iter().copied().filter(|id| bank.contains(*id)).collect();
    ids.sort_unstable();
    ids.dedup();
    if let Some(bad) = ids.iter().find(|id| !oracle.can_answer(**id)) {
        return Err(Error::invalid(format!(
            "pool item {bad} cannot be answered by the oracle for user {user}"
        )));
    }
    let mut remaining: Vec<(ItemId, ItemParams)> = ids.iter().map(|id| (*id, *bank.get(*id).unwrap())).collect();

    let mut rng = match oracle {
        ResponseOracle::BernoulliFromTruth { rng_seed, .. } => Some(ChaCha8Rng::seed_from_u64(*rng_seed)),
        ResponseOracle::DenseLookup(_) => None,
    };

    let mut session = CatSession {
        user_id: user,
        administered: Vec::with_capacity(steps),
        responses: Vec::with_capacity(steps),
        theta_trajectory: Vec::with_capacity(steps),
        selector,
        truncated: false,
    };
    let mut answered: Vec<(ItemParams, bool)> = Vec::with_capacity(steps);
    let mut theta_hat = 0.0;

    for _ in 0..steps {
        if remaining.is_empty() {
            session.truncated = true;
            break;
        }
        let chosen = select_next_item(theta_hat, &remaining, selector, answered.len())?;
        let pos = remaining.iter().position(|(id, _)| *id == chosen).unwrap();
        let (_, params) = remaining.remove(pos);

        let correct = match oracle {
            ResponseOracle::BernoulliFromTruth { true_theta, truth, .. } => {
                let p = truth.get(chosen).unwrap().prob(*true_theta);
                rng.as_mut().unwrap().gen::<f64>() < p
            }
            ResponseOracle::DenseLookup(row) => row[&chosen],
        };

        answered.push((params, correct));
        theta_hat = estimate_ability(&answered, CAT_PRIOR_STRENGTH)?;
        session.administered.push(chosen);
        session.responses.push(correct);
        session.theta_trajectory.push(theta_hat);
    }
    Ok(session)
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionRow {
    session_id: usize,
    user_id: u32,
    step: usize,
    item_id: u32,
    correct: u8,
    theta_hat: f64,
    selector: Selector,
}

/// Writes sessions as CSV rows, one per administered item. `preamble` lines
/// are emitted first as `#` comments.
pub fn write_sessions_csv<W: Write>(mut out: W, sessions: &[CatSession], preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for (sid, s) in sessions.iter().enumerate() {
        for step in 0..s.len() {
            w.serialize(SessionRow {
                session_id: sid,
                user_id: s.user_id.0,
                step: step + 1,
                item_id: s.administered[step].0,
                correct: s.responses[step] as u8,
                theta_hat: s.theta_trajectory[step],
                selector: s.selector,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sessions_csv<R: Read>(input: R) -> Result<Vec<CatSession>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut by_id: BTreeMap<usize, CatSession> = BTreeMap::new();
    for rec in rdr.deserialize::<SessionRow>() {
        let row = rec?;
        if row.correct > 1 {
            return Err(Error::invalid(format!("session {}: correct must be 0 or 1", row.session_id)));
        }
        let s = by_id.entry(row.session_id).or_insert_with(|| CatSession {
            user_id: UserId(row.user_id),
            administered: Vec::new(),
            responses: Vec::new(),
            theta_trajectory: Vec::new(),
            selector: row.selector,
            truncated: false,
        });
        if row.step != s.len() + 1 || s.user_id.0 != row.user_id {
            return Err(Error::invalid(format!(
                "session {}: rows must be contiguous and ordered by step",
                row.session_id
            )));
        }
        s.administered.push(ItemId(row.item_id));
        s.responses.push(row.correct == 1);
        s.theta_trajectory.push(row.theta_hat);
    }
    let sessions: Vec<CatSession> = by_id.into_values().collect();
    for s in &sessions {
        s.check_invariants()?;
    }
    Ok(sessions)
}
