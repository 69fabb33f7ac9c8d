//! Evaluation protocols and bias diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cat::{self, CatSession, ItemBank, ResponseOracle, Selector};
use crate::error::{Error, Result};
use crate::fitting::split_user_responses;
use crate::model::{Interaction, ItemId, ItemParams, UserId};
use crate::par;

/// Area under the ROC curve by rank sums; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n)).clamp(0.0, 1.0))
}

/// Share of thresholded predictions (`score ≥ 0.5`) matching the label.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("accuracy needs equal, nonempty inputs"));
    }
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s >= 0.5) == **l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("rank correlation inputs differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedMetric("rank correlation needs at least 3 pairs".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in rank correlation input".into()));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("rank correlation of a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation over the items both maps share.
pub fn difficulty_rank_corr(estimated: &BTreeMap<ItemId, f64>, truth: &BTreeMap<ItemId, f64>) -> Result<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = estimated
        .iter()
        .filter_map(|(id, b)| truth.get(id).map(|t| (*b, *t)))
        .unzip();
    spearman(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub step: Option<usize>,
    pub value: f64,
    pub std: f64,
    pub n_repeats: usize,
    pub seed_base: u64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalResult {
    pub fn summarize(metric: impl Into<String>, step: Option<usize>, values: &[f64], seed_base: u64) -> Self {
        let (value, std) = mean_std(values);
        EvalResult {
            metric: metric.into(),
            step,
            value,
            std,
            n_repeats: values.len(),
            seed_base,
        }
    }
}

pub fn write_results_csv<W: Write>(mut out: W, results: &[EvalResult], preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "step", "value", "std", "n_repeats"])?;
    for r in results {
        w.write_record([
            r.metric.clone(),
            r.step.map(|s| s.to_string()).unwrap_or_default(),
            r.value.to_string(),
            r.std.to_string(),
            r.n_repeats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSplit {
    pub pool: Vec<ItemId>,
    pub eval: Vec<ItemId>,
}

/// Seeded uniform split of items into adaptive-test pool and evaluation items.
pub fn split_items(items: &[ItemId], pool_fraction: f64, seed: u64) -> Result<ItemSplit> {
    if !(pool_fraction > 0.0 && pool_fraction < 1.0) {
        return Err(Error::invalid("pool fraction must lie in (0, 1)"));
    }
    let mut ids = items.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("need at least two items to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_pool = ((ids.len() as f64 * pool_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut eval = ids.split_off(n_pool);
    ids.sort_unstable();
    eval.sort_unstable();
    Ok(ItemSplit { pool: ids, eval })
}

/// Pooled predictions of the adaptive-test protocol at one step.
#[derive(Debug, Clone, Default)]
struct StepPairs {
    pool: (Vec<f64>, Vec<bool>),
    eval: (Vec<f64>, Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub results: Vec<EvalResult>,
    pub users_scored: usize,
    pub users_skipped: usize,
}

/// Adaptive test on pool items; after each requested step the current
/// estimate predicts the not-yet-administered pool items (`AUC-Pool`) and the
/// eval items (`AUC-Eval`). Predictions are pooled over users.
pub fn cat_auc_protocol(
    bank: &ItemBank,
    test_rows: &BTreeMap<UserId, HashMap<ItemId, bool>>,
    split: &ItemSplit,
    steps: &[usize],
    selector: Selector,
) -> Result<ProtocolOutcome> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(Error::invalid("steps must be a nonempty list of positive counts"));
    }
    if split.pool.iter().any(|i| split.eval.binary_search(i).is_ok()) {
        return Err(Error::invalid("pool and eval items overlap"));
    }
    let max_step = *steps.iter().max().unwrap();
    let users: Vec<(&UserId, &HashMap<ItemId, bool>)> = test_rows.iter().collect();
    let per_user = par::map(&users, |(user, row)| -> Result<Option<Vec<StepPairs>>> {
        let pool: Vec<ItemId> = split
            .pool
            .iter()
            .copied()
            .filter(|i| row.contains_key(i) && bank.contains(*i))
            .collect();
        let eval: Vec<(ItemId, bool)> = split
            .eval
            .iter()
            .filter(|i| bank.contains(**i))
            .filter_map(|i| row.get(i).map(|c| (*i, *c)))
            .collect();
        if pool.len() <= max_step || eval.is_empty() {
            return Ok(None);
        }
        let session = cat::simulate_cat(**user, &ResponseOracle::DenseLookup(row), bank, selector, max_step, &pool)?;
        let mut out = Vec::with_capacity(steps.len());
        for &t in steps {
            let theta = session.theta_at(t);
            let given: std::collections::HashSet<ItemId> = session.administered[..t].iter().copied().collect();
            let mut pairs = StepPairs::default();
            for i in pool.iter().filter(|i| !given.contains(i)) {
                pairs.pool.0.push(bank.get(*i).unwrap().prob(theta));
                pairs.pool.1.push(row[i]);
            }
            for (i, c) in &eval {
                pairs.eval.0.push(bank.get(*i).unwrap().prob(theta));
                pairs.eval.1.push(*c);
            }
            out.push(pairs);
        }
        Ok(Some(out))
    });

    let mut merged = vec![StepPairs::default(); steps.len()];
    let (mut scored, mut skipped) = (0, 0);
    for r in per_user {
        match r? {
            Some(per_step) => {
                scored += 1;
                for (m, p) in merged.iter_mut().zip(per_step) {
                    m.pool.0.extend(p.pool.0);
                    m.pool.1.extend(p.pool.1);
                    m.eval.0.extend(p.eval.0);
                    m.eval.1.extend(p.eval.1);
                }
            }
            None => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::UndefinedMetric("no test user has enough responses for the item split".into()));
    }
    let mut results = Vec::with_capacity(2 * steps.len());
    for (name, pick) in [("auc_pool", 0), ("auc_eval", 1)] {
        for (t, m) in steps.iter().zip(&merged) {
            let (s, l) = if pick == 0 { &m.pool } else { &m.eval };
            results.push(EvalResult::summarize(name, Some(*t), &[auc(s, l)?], 0));
        }
    }
    Ok(ProtocolOutcome {
        results,
        users_scored: scored,
        users_skipped: skipped,
    })
}

/// Frozen items; each user's ability is fitted on a seeded `fraction` of
/// their responses and the rest are predicted. Pooled AUC.
pub fn random_auc_protocol(
    bank: &ItemBank,
    test_rows: &BTreeMap<UserId, HashMap<ItemId, bool>>,
    fraction: f64,
    seed: u64,
) -> Result<ProtocolOutcome> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("fit fraction must lie in (0, 1)"));
    }
    let users: Vec<(&UserId, &HashMap<ItemId, bool>)> = test_rows.iter().collect();
    let per_user = par::map(&users, |(user, row)| -> Result<Option<(Vec<f64>, Vec<bool>)>> {
        let rows: Vec<Interaction> = row
            .iter()
            .filter(|(i, _)| bank.contains(**i))
            .map(|(i, c)| Interaction {
                user: **user,
                item: *i,
                correct: *c,
            })
            .collect();
        if rows.len() < 2 {
            return Ok(None);
        }
        let (fit, held) = split_user_responses(&rows, 1.0 - fraction, seed);
        if fit.is_empty() {
            return Ok(None);
        }
        let observed: Vec<(ItemParams, bool)> = fit.iter().map(|x| (*bank.get(x.item).unwrap(), x.correct)).collect();
        let theta = cat::estimate_ability(&observed, cat::CAT_PRIOR_STRENGTH)?;
        Ok(Some((
            held.iter().map(|x| bank.get(x.item).unwrap().prob(theta)).collect(),
            held.iter().map(|x| x.correct).collect(),
        )))
    });
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut scored, mut skipped) = (0, 0);
    for r in per_user {
        match r? {
            Some((s, l)) => {
                scored += 1;
                scores.extend(s);
                labels.extend(l);
            }
            None => skipped += 1,
        }
    }
    Ok(ProtocolOutcome {
        results: vec![EvalResult::summarize("random_auc", None, &[auc(&scores, &labels)?], seed)],
        users_scored: scored,
        users_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRatio {
    pub item: ItemId,
    pub reference: Option<f64>,
    pub biased: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub ratios: Vec<ItemRatio>,
    /// Estimated vs true difficulties over items seen in the biased data.
    pub difficulty_rank_corr: f64,
    /// Final ability estimate vs mean true difficulty of the items administered.
    pub bias_signature: f64,
}

fn correctness_ratios(data: &[Interaction]) -> BTreeMap<ItemId, f64> {
    let mut counts: BTreeMap<ItemId, (f64, f64)> = BTreeMap::new();
    for x in data {
        let e = counts.entry(x.item).or_insert((0.0, 0.0));
        e.0 += x.label();
        e.1 += 1.0;
    }
    counts.into_iter().map(|(k, (c, n))| (k, c / n)).collect()
}

/// Rank correlation between sessions' final estimates and the mean true
/// difficulty of what they were given.
pub fn bias_signature(sessions: &[CatSession], truth: &BTreeMap<ItemId, f64>) -> Result<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = sessions
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let d: Result<Vec<f64>> = s
                .administered
                .iter()
                .map(|i| truth.get(i).copied().ok_or_else(|| Error::index(format!("no true difficulty for item {i}"))))
                .collect();
            let d = d?;
            Ok((s.final_theta(), d.iter().sum::<f64>() / d.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    spearman(&x, &y)
}

pub fn bias_diagnostics(
    reference: &[Interaction],
    sessions: &[CatSession],
    estimated: &BTreeMap<ItemId, f64>,
    truth: &BTreeMap<ItemId, f64>,
) -> Result<BiasReport> {
    let biased: Vec<Interaction> = sessions
        .iter()
        .flat_map(|s| {
            s.administered.iter().zip(&s.responses).map(|(i, c)| Interaction {
                user: s.user_id,
                item: *i,
                correct: *c,
            })
        })
        .collect();
    let refr = correctness_ratios(reference);
    let bias = correctness_ratios(&biased);
    let mut items: Vec<ItemId> = refr.keys().chain(bias.keys()).chain(truth.keys()).copied().collect();
    items.sort_unstable();
    items.dedup();
    let ratios = items
        .iter()
        .map(|i| ItemRatio {
            item: *i,
            reference: refr.get(i).copied(),
            biased: bias.get(i).copied(),
        })
        .collect();
    let seen: BTreeMap<ItemId, f64> = estimated
        .iter()
        .filter(|(i, _)| bias.contains_key(i))
        .map(|(i, b)| (*i, *b))
        .collect();
    Ok(BiasReport {
        ratios,
        difficulty_rank_corr: difficulty_rank_corr(&seen, truth)?,
        bias_signature: bias_signature(sessions, truth)?,
    })
}

pub fn write_ratios_csv<W: Write>(mut out: W, ratios: &[ItemRatio], preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["item_id", "reference_ratio", "biased_ratio"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in ratios {
        w.write_record([r.item.to_string(), fmt(r.reference), fmt(r.biased)])?;
    }
    w.flush()?;
    Ok(())
}
