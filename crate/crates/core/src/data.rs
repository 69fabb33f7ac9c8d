//! Response datasets, CSV ingestion, synthetic ground truth, user-role
//! splitting and biased-set generation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cat::{self, CatSession, ItemBank, ResponseOracle, Selector};
use crate::error::{Error, Result};
use crate::model::{Interaction, ItemId, ItemParams, UserId};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    UnbiasedTrain,
    UnbiasedVal,
    Biased,
    Test,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::UnbiasedTrain => "unbiased_train",
            Role::UnbiasedVal => "unbiased_val",
            Role::Biased => "biased",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "unbiased_train" | "train" => Ok(Role::UnbiasedTrain),
            "unbiased_val" | "val" => Ok(Role::UnbiasedVal),
            "biased" => Ok(Role::Biased),
            "test" => Ok(Role::Test),
            other => Err(Error::invalid(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Loaded,
    Synthetic { seed: u64 },
    CatSimulated { source: String },
}

/// Sparse `(user, item, correct)` triplets with per-user roles.
///
/// Every interaction's user has exactly one role, every item is in the
/// catalog, and `(user, item)` pairs are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseDataset {
    interactions: Vec<Interaction>,
    roles: BTreeMap<UserId, Role>,
    catalog: BTreeSet<ItemId>,
    provenance: Provenance,
}

impl ResponseDataset {
    pub fn new(
        interactions: Vec<Interaction>,
        roles: BTreeMap<UserId, Role>,
        catalog: BTreeSet<ItemId>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(interactions.len());
        for x in &interactions {
            if !roles.contains_key(&x.user) {
                return Err(Error::invalid(format!("user {} has no role", x.user)));
            }
            if !catalog.contains(&x.item) {
                return Err(Error::invalid(format!("item {} is not in the catalog", x.item)));
            }
            if !seen.insert((x.user, x.item)) {
                return Err(Error::invalid(format!("duplicate response for user {} item {}", x.user, x.item)));
            }
        }
        Ok(ResponseDataset {
            interactions,
            roles,
            catalog,
            provenance,
        })
    }

    pub fn empty() -> Self {
        ResponseDataset {
            interactions: Vec::new(),
            roles: BTreeMap::new(),
            catalog: BTreeSet::new(),
            provenance: Provenance::Loaded,
        }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn roles(&self) -> &BTreeMap<UserId, Role> {
        &self.roles
    }

    pub fn role(&self, user: UserId) -> Option<Role> {
        self.roles.get(&user).copied()
    }

    pub fn catalog(&self) -> &BTreeSet<ItemId> {
        &self.catalog
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn users(&self) -> Vec<UserId> {
        self.roles.keys().copied().collect()
    }

    pub fn users_with_role(&self, role: Role) -> Vec<UserId> {
        self.roles.iter().filter(|(_, r)| **r == role).map(|(u, _)| *u).collect()
    }

    /// Interactions of users holding `role`, in dataset order.
    pub fn slice(&self, role: Role) -> Vec<Interaction> {
        self.interactions
            .iter()
            .filter(|x| self.roles.get(&x.user) == Some(&role))
            .copied()
            .collect()
    }

    /// Per-user response rows.
    pub fn rows(&self) -> BTreeMap<UserId, HashMap<ItemId, bool>> {
        let mut rows: BTreeMap<UserId, HashMap<ItemId, bool>> = BTreeMap::new();
        for x in &self.interactions {
            rows.entry(x.user).or_default().insert(x.item, x.correct);
        }
        rows
    }

    /// Per-user interactions sorted by item id.
    pub fn user_interactions(&self) -> BTreeMap<UserId, Vec<Interaction>> {
        let mut rows: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        for x in &self.interactions {
            rows.entry(x.user).or_default().push(*x);
        }
        for v in rows.values_mut() {
            v.sort_by_key(|x| x.item);
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "item_id", "correct", "role"])?;
        for x in &self.interactions {
            w.write_record([
                x.user.0.to_string(),
                x.item.0.to_string(),
                (x.correct as u8).to_string(),
                self.roles[&x.user].as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `user_id,item_id,correct[,role]`. Lines starting with `#` are skipped.
/// Without a role column every user is `UnbiasedTrain`.
pub fn read_csv<R: Read>(input: R) -> Result<ResponseDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_role = match cols.as_slice() {
        ["user_id", "item_id", "correct"] => false,
        ["user_id", "item_id", "correct", "role"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header user_id,item_id,correct[,role], got {}", cols.join(",")),
            })
        }
    };

    let mut interactions = Vec::new();
    let mut roles: BTreeMap<UserId, Role> = BTreeMap::new();
    let mut catalog = BTreeSet::new();
    let mut seen: HashMap<(UserId, ItemId), usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let perr = |message: String| Error::Parse { line, message };
        let want = if has_role { 4 } else { 3 };
        if rec.len() != want {
            return Err(perr(format!("expected {want} fields, found {}", rec.len())));
        }
        let user: u32 = rec[0].parse().map_err(|_| perr(format!("bad user_id `{}`", &rec[0])))?;
        let item: u32 = rec[1].parse().map_err(|_| perr(format!("bad item_id `{}`", &rec[1])))?;
        let correct = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(perr(format!("correct must be 0 or 1, got `{other}`"))),
        };
        let role = if has_role {
            rec[3].parse::<Role>().map_err(|e| perr(e.to_string()))?
        } else {
            Role::UnbiasedTrain
        };
        let (user, item) = (UserId(user), ItemId(item));
        if let Some(prev) = seen.insert((user, item), line) {
            return Err(perr(format!("duplicate response for user {user} item {item} (first on line {prev})")));
        }
        match roles.get(&user) {
            Some(r) if *r != role => {
                return Err(perr(format!("user {user} has conflicting roles {r} and {role}")));
            }
            _ => {
                roles.insert(user, role);
            }
        }
        catalog.insert(item);
        interactions.push(Interaction { user, item, correct });
    }
    ResponseDataset::new(interactions, roles, catalog, Provenance::Loaded)
}

pub fn load_csv(path: &Path) -> Result<ResponseDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    Dense,
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDistribution {
    pub a_low: f64,
    pub a_high: f64,
    pub b_mean: f64,
    pub b_sd: f64,
    pub theta_mean: f64,
    pub theta_sd: f64,
}

impl Default for SynthDistribution {
    fn default() -> Self {
        SynthDistribution {
            a_low: 0.5,
            a_high: 2.5,
            b_mean: 0.0,
            b_sd: 1.0,
            theta_mean: 0.0,
            theta_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthItem {
    pub item_id: ItemId,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthUser {
    pub user_id: UserId,
    pub theta: f64,
}

/// Ground-truth parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub items: Vec<TruthItem>,
    pub users: Vec<TruthUser>,
    pub distribution: SynthDistribution,
    pub seed: u64,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl SyntheticTruth {
    pub fn item_bank(&self) -> ItemBank {
        ItemBank::new(self.items.iter().map(|t| {
            (
                t.item_id,
                ItemParams {
                    discrimination: t.a,
                    difficulty: t.b,
                },
            )
        }))
    }

    pub fn difficulties(&self) -> BTreeMap<ItemId, f64> {
        self.items.iter().map(|t| (t.item_id, t.b)).collect()
    }

    pub fn thetas(&self) -> BTreeMap<UserId, f64> {
        self.users.iter().map(|u| (u.user_id, u.theta)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Draws a 2PL ground truth and Bernoulli responses. Pure in `(arguments, seed)`.
pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    fill: Fill,
    dist: &SynthDistribution,
    seed: u64,
) -> Result<(ResponseDataset, SyntheticTruth)> {
    if n_users < 1 || n_items < 1 {
        return Err(Error::invalid("n_users and n_items must be at least 1"));
    }
    if let Fill::Fraction(f) = fill {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("fill fraction must lie in (0, 1], got {f}")));
        }
    }
    if !(dist.a_low > 0.0 && dist.a_high > dist.a_low && dist.b_sd > 0.0 && dist.theta_sd > 0.0) {
        return Err(Error::invalid(format!("invalid synthetic distribution {dist:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_dist = Uniform::new(dist.a_low, dist.a_high);
    let b_dist = Normal::new(dist.b_mean, dist.b_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let t_dist = Normal::new(dist.theta_mean, dist.theta_sd).map_err(|e| Error::invalid(e.to_string()))?;

    let items: Vec<TruthItem> = (0..n_items)
        .map(|j| {
            let a = a_dist.sample(&mut rng);
            let b = b_dist.sample(&mut rng);
            TruthItem {
                item_id: ItemId(j as u32),
                a,
                b,
            }
        })
        .collect();
    let users: Vec<TruthUser> = (0..n_users)
        .map(|i| TruthUser {
            user_id: UserId(i as u32),
            theta: t_dist.sample(&mut rng),
        })
        .collect();

    let mut interactions = Vec::with_capacity(n_users * n_items);
    for u in &users {
        for it in &items {
            if let Fill::Fraction(f) = fill {
                if rng.gen::<f64>() >= f {
                    continue;
                }
            }
            let p = ItemParams {
                discrimination: it.a,
                difficulty: it.b,
            }
            .prob(u.theta);
            interactions.push(Interaction {
                user: u.user_id,
                item: it.item_id,
                correct: rng.gen::<f64>() < p,
            });
        }
    }
    let roles = users.iter().map(|u| (u.user_id, Role::UnbiasedTrain)).collect();
    let catalog = items.iter().map(|t| t.item_id).collect();
    let data = ResponseDataset::new(interactions, roles, catalog, Provenance::Synthetic { seed })?;
    let truth = SyntheticTruth {
        items,
        users,
        distribution: *dist,
        seed,
        provenance: BTreeMap::new(),
    };
    Ok((data, truth))
}

/// Per-role user counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleCounts {
    pub unbiased_train: usize,
    pub unbiased_val: usize,
    pub biased: usize,
    pub test: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.unbiased_train + self.unbiased_val + self.biased + self.test
    }
}

/// Seeded disjoint role assignment; users beyond the requested counts are dropped.
pub fn split_roles(dataset: &ResponseDataset, counts: RoleCounts, seed: u64) -> Result<ResponseDataset> {
    let mut users = dataset.users();
    if counts.total() > users.len() {
        return Err(Error::invalid(format!(
            "requested {} users across roles but only {} are available",
            counts.total(),
            users.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let plan = [
        (Role::UnbiasedTrain, counts.unbiased_train),
        (Role::UnbiasedVal, counts.unbiased_val),
        (Role::Biased, counts.biased),
        (Role::Test, counts.test),
    ];
    let mut roles = BTreeMap::new();
    let mut it = users.into_iter();
    for (role, n) in plan {
        for u in it.by_ref().take(n) {
            roles.insert(u, role);
        }
    }
    let interactions = dataset
        .interactions
        .iter()
        .filter(|x| roles.contains_key(&x.user))
        .copied()
        .collect();
    ResponseDataset::new(interactions, roles, dataset.catalog.clone(), dataset.provenance.clone())
}

/// Response source for biased-set generation.
#[derive(Debug, Clone, Copy)]
pub enum OracleSource<'a> {
    /// Replay each biased user's dense row.
    Dense,
    /// Draw from the synthetic truth with per-user seeds `seed + user index`.
    Truth(&'a SyntheticTruth),
}

/// The output of adaptive administration over the biased users.
#[derive(Debug, Clone)]
pub struct BiasedSet {
    pub sessions: Vec<CatSession>,
    pub dataset: ResponseDataset,
}

fn sessions_to_dataset(sessions: &[CatSession], catalog: &BTreeSet<ItemId>, source: &str) -> Result<ResponseDataset> {
    let mut interactions = Vec::new();
    let mut roles = BTreeMap::new();
    for s in sessions {
        roles.insert(s.user_id, Role::Biased);
        for (item, correct) in s.administered.iter().zip(&s.responses) {
            interactions.push(Interaction {
                user: s.user_id,
                item: *item,
                correct: *correct,
            });
        }
    }
    ResponseDataset::new(
        interactions,
        roles,
        catalog.clone(),
        Provenance::CatSimulated {
            source: source.to_string(),
        },
    )
}

/// Rebuilds the biased interaction set from stored sessions.
pub fn biased_set_from_sessions(sessions: Vec<CatSession>, catalog: &BTreeSet<ItemId>) -> Result<BiasedSet> {
    let dataset = sessions_to_dataset(&sessions, catalog, "sessions")?;
    Ok(BiasedSet { sessions, dataset })
}

/// Simulates one adaptive test of `steps` items for every `Biased` user.
pub fn build_biased_set(
    dataset: &ResponseDataset,
    bank: &ItemBank,
    selector: Selector,
    steps: usize,
    oracle: OracleSource<'_>,
    seed: u64,
) -> Result<BiasedSet> {
    let biased = dataset.users_with_role(Role::Biased);
    let rows = dataset.rows();
    let truth_bank = match oracle {
        OracleSource::Truth(t) => Some(t.item_bank()),
        OracleSource::Dense => None,
    };
    let truth_theta = match oracle {
        OracleSource::Truth(t) => t.thetas(),
        OracleSource::Dense => BTreeMap::new(),
    };
    let empty = HashMap::new();
    let sessions: Vec<Result<CatSession>> = par::map_range(biased.len(), |k| {
        let user = biased[k];
        let row = rows.get(&user).unwrap_or(&empty);
        match oracle {
            OracleSource::Dense => {
                let pool: Vec<ItemId> = bank.ids().into_iter().filter(|id| row.contains_key(id)).collect();
                cat::simulate_cat(user, &ResponseOracle::DenseLookup(row), bank, selector, steps, &pool)
            }
            OracleSource::Truth(_) => {
                let tb = truth_bank.as_ref().unwrap();
                let true_theta = *truth_theta
                    .get(&user)
                    .ok_or_else(|| Error::index(format!("user {user} has no ground-truth ability")))?;
                let pool: Vec<ItemId> = bank.ids().into_iter().filter(|id| tb.contains(*id)).collect();
                let o = ResponseOracle::BernoulliFromTruth {
                    true_theta,
                    truth: tb,
                    rng_seed: seed.wrapping_add(k as u64),
                };
                cat::simulate_cat(user, &o, bank, selector, steps, &pool)
            }
        }
    });
    let sessions = sessions.into_iter().collect::<Result<Vec<_>>>()?;
    let dataset = sessions_to_dataset(&sessions, dataset.catalog(), &format!("{selector} x {steps}"))?;
    Ok(BiasedSet { sessions, dataset })
}

/// Non-adaptive control: each biased user answers `steps` items drawn
/// uniformly from their dense row, with abilities re-estimated by `bank`.
pub fn build_random_set(dataset: &ResponseDataset, bank: &ItemBank, steps: usize, seed: u64) -> Result<BiasedSet> {
    let biased = dataset.users_with_role(Role::Biased);
    let rows = dataset.user_interactions();
    let sessions: Vec<Result<CatSession>> = par::map_range(biased.len(), |k| {
        let user = biased[k];
        let mut row: Vec<Interaction> = rows
            .get(&user)
            .map(|r| r.iter().filter(|x| bank.contains(x.item)).copied().collect())
            .unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        row.shuffle(&mut rng);
        let truncated = row.len() < steps;
        row.truncate(steps);
        let mut answered = Vec::with_capacity(row.len());
        let mut traj = Vec::with_capacity(row.len());
        for x in &row {
            answered.push((*bank.get(x.item).unwrap(), x.correct));
            traj.push(cat::estimate_ability(&answered, cat::CAT_PRIOR_STRENGTH)?);
        }
        Ok(CatSession {
            user_id: user,
            administered: row.iter().map(|x| x.item).collect(),
            responses: row.iter().map(|x| x.correct).collect(),
            theta_trajectory: traj,
            selector: Selector::Fi,
            truncated,
        })
    });
    let sessions = sessions.into_iter().collect::<Result<Vec<_>>>()?;
    let dataset = sessions_to_dataset(&sessions, dataset.catalog(), "random")?;
    Ok(BiasedSet { sessions, dataset })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_with_header() {
        let d = read_csv("user_id,item_id,correct\n".as_bytes()).unwrap();
        assert!(d.is_empty());
        assert!(d.catalog().is_empty());
    }

    #[test]
    fn three_rows() {
        let d = read_csv("user_id,item_id,correct\n1,10,1\n1,11,0\n2,10,1\n".as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.catalog().len(), 2);
        assert_eq!(d.role(UserId(2)), Some(Role::UnbiasedTrain));
    }

    #[test]
    fn bad_correct_value_names_line() {
        let err = read_csv("user_id,item_id,correct\n1,10,1\n1,11,2\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("0 or 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_and_role_conflicts_rejected() {
        let dup = read_csv("user_id,item_id,correct\n1,10,1\n1,10,0\n".as_bytes()).unwrap_err();
        assert!(matches!(dup, Error::Parse { line: 3, .. }));
        let conflict = read_csv("user_id,item_id,correct,role\n1,10,1,test\n1,11,0,biased\n".as_bytes()).unwrap_err();
        assert!(matches!(conflict, Error::Parse { line: 3, .. }));
        let short = read_csv("user_id,item_id,correct\n1,10\n".as_bytes()).unwrap_err();
        assert!(matches!(short, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn csv_roundtrip_with_comments() {
        let (d, _) = generate_synthetic(5, 4, Fill::Dense, &SynthDistribution::default(), 3).unwrap();
        let d = split_roles(&d, RoleCounts { unbiased_train: 2, unbiased_val: 1, biased: 1, test: 1 }, 9).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, &["seed=3".into()]).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.interactions(), d.interactions());
        assert_eq!(back.roles(), d.roles());
    }

    #[test]
    fn synthetic_is_seeded_and_dense() {
        let dist = SynthDistribution::default();
        let (d1, t1) = generate_synthetic(20, 7, Fill::Dense, &dist, 42).unwrap();
        let (d2, t2) = generate_synthetic(20, 7, Fill::Dense, &dist, 42).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        assert_eq!(d1.len(), 140);
        let (sparse, _) = generate_synthetic(50, 20, Fill::Fraction(0.3), &dist, 42).unwrap();
        assert!(sparse.len() > 150 && sparse.len() < 450);
        assert!(generate_synthetic(0, 3, Fill::Dense, &dist, 1).is_err());
    }

    #[test]
    fn easiest_item_answered_more_often() {
        let (d, truth) = generate_synthetic(500, 30, Fill::Dense, &SynthDistribution::default(), 8).unwrap();
        let by_b = |cmp: fn(f64, f64) -> bool| {
            let mut best = truth.items[0];
            for t in &truth.items {
                if cmp(t.b, best.b) {
                    best = *t;
                }
            }
            best.item_id
        };
        let easiest = by_b(|x, y| x < y);
        let hardest = by_b(|x, y| x > y);
        let rate = |item: ItemId| {
            let xs: Vec<_> = d.interactions().iter().filter(|x| x.item == item).collect();
            xs.iter().filter(|x| x.correct).count() as f64 / xs.len() as f64
        };
        assert!(rate(easiest) > rate(hardest));
    }

    #[test]
    fn role_split_counts() {
        let (d, _) = generate_synthetic(3050, 2, Fill::Dense, &SynthDistribution::default(), 1).unwrap();
        let counts = RoleCounts {
            unbiased_train: 40,
            unbiased_val: 10,
            biased: 1000,
            test: 2000,
        };
        let s = split_roles(&d, counts, 5).unwrap();
        assert_eq!(s.users_with_role(Role::UnbiasedTrain).len(), 40);
        assert_eq!(s.users_with_role(Role::UnbiasedVal).len(), 10);
        assert_eq!(s.users_with_role(Role::Biased).len(), 1000);
        assert_eq!(s.users_with_role(Role::Test).len(), 2000);
        assert_eq!(split_roles(&d, counts, 5).unwrap(), s);
        let too_many = RoleCounts { test: 2001, ..counts };
        assert!(split_roles(&d, too_many, 5).is_err());
    }
}
