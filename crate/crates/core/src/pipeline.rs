//! Experiment configuration and the stage commands behind the CLI.
//!
//! Each command resolves a [`PipelineConfig`], does its work, and writes
//! files whose first lines carry `# config_hash=…, seed=…`. The hash is taken
//! over the canonical TOML rendering of the config minus the output
//! directory, so two runs that differ only in where they write produce
//! identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cat::{self, CatSession, Selector};
use crate::data::{
    self, Fill, OracleSource, ResponseDataset, Role, RoleCounts, SynthDistribution, SyntheticTruth,
};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::fitting::{self, FitConfig, FittedModel, Weighted};
use crate::influence::{self, HessianFactorization, InfluenceReport, Method, MethodParams, Selection};
use crate::model::{Interaction, ItemId, UserId};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub fit: FitConfig,
    pub cat: CatConfig,
    pub debias: DebiasConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Response CSV; synthetic data is generated when absent.
    pub input: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            input: None,
            truth: None,
            model: None,
            sessions: None,
            init: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Share of cells observed; `None` means dense.
    pub fill_fraction: Option<f64>,
    pub distribution: SynthDistribution,
    pub roles: RoleCounts,
}

impl Default for DataConfig {
    fn default() -> Self {
        let roles = RoleCounts {
            unbiased_train: 40,
            unbiased_val: 10,
            biased: 1000,
            test: 500,
        };
        DataConfig {
            n_users: roles.total(),
            n_items: 185,
            fill_fraction: None,
            distribution: SynthDistribution::default(),
            roles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Replay the biased users' dense rows.
    Dense,
    /// Draw fresh responses from the synthetic truth.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatConfig {
    pub selector: Selector,
    pub steps: usize,
    pub oracle: OracleKind,
}

impl Default for CatConfig {
    fn default() -> Self {
        CatConfig {
            selector: Selector::Kli,
            steps: 30,
            oracle: OracleKind::Dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasConfig {
    /// Methods compared by `pipeline`, in output order.
    pub methods: Vec<String>,
    /// Method run by `debias`.
    pub method: String,
    pub params: MethodParams,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            methods: Variant::ALL.iter().map(|v| v.to_string()).collect(),
            method: Variant::Debias(Method::UserAif).to_string(),
            params: MethodParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    pub pool_fraction: f64,
    pub random_fraction: f64,
    pub n_repeats: usize,
    pub selector: Selector,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: vec![10, 20],
            pool_fraction: 0.7,
            random_fraction: 0.8,
            n_repeats: 5,
            selector: Selector::Kli,
        }
    }
}


impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML with the output directory blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn header(&self) -> Result<String> {
        Ok(format!("config_hash={}, seed={}", self.hash()?, self.seed))
    }

    pub fn provenance(&self) -> Result<BTreeMap<String, String>> {
        Ok([
            ("config_hash".to_string(), self.hash()?),
            ("seed".to_string(), self.seed.to_string()),
        ]
        .into_iter()
        .collect())
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.debias.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.variants()?;
        self.debias.method.parse::<Variant>()?;
        let p = &self.debias.params;
        if !(p.quantile > 0.0 && p.quantile <= 1.0) {
            return Err(Error::Config("debias.params.quantile must lie in (0, 1]".into()));
        }
        if !(p.alpha > 0.0) {
            return Err(Error::Config("debias.params.alpha must be positive".into()));
        }
        if self.cat.steps == 0 {
            return Err(Error::Config("cat.steps must be positive".into()));
        }
        if self.eval.steps.is_empty() || self.eval.steps.contains(&0) {
            return Err(Error::Config("eval.steps must be a nonempty list of positive counts".into()));
        }
        if !(self.eval.pool_fraction > 0.0 && self.eval.pool_fraction < 1.0) {
            return Err(Error::Config("eval.pool_fraction must lie in (0, 1)".into()));
        }
        if !(self.eval.random_fraction > 0.0 && self.eval.random_fraction < 1.0) {
            return Err(Error::Config("eval.random_fraction must lie in (0, 1)".into()));
        }
        if self.eval.n_repeats == 0 {
            return Err(Error::Config("eval.n_repeats must be positive".into()));
        }
        if self.paths.input.is_none() && self.data.roles.total() > self.data.n_users {
            return Err(Error::Config(format!(
                "role counts need {} users but data.n_users is {}",
                self.data.roles.total(),
                self.data.n_users
            )));
        }
        Ok(())
    }
}

/// A row of the comparison table: a training-set recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Unbiased training users only.
    Unbiased,
    /// Biased users only.
    Biased,
    /// Unbiased plus every biased response.
    Union,
    Debias(Method),
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Unbiased,
        Variant::Biased,
        Variant::Union,
        Variant::Debias(Method::IpsNb),
        Variant::Debias(Method::IpsNbIw),
        Variant::Debias(Method::If4uRec),
        Variant::Debias(Method::IfLoss),
        Variant::Debias(Method::IfParam),
        Variant::Debias(Method::GreedyAif),
        Variant::Debias(Method::UserAif),
    ];

    pub fn needs_validation(&self) -> bool {
        matches!(self, Variant::Debias(Method::IfLoss | Method::If4uRec))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Unbiased => f.write_str("unbiased"),
            Variant::Biased => f.write_str("biased"),
            Variant::Union => f.write_str("union"),
            Variant::Debias(m) => m.fmt(f),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.iter().find(|v| v.to_string() == s.to_ascii_lowercase()).copied().ok_or_else(|| {
            let valid: Vec<String> = Variant::ALL.iter().map(|v| v.to_string()).collect();
            Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_file(path: &Path, contents: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, contents)?)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing path: {what}")))
}

/// Roles, reference difficulties and (for synthetic data) the ground truth of one repeat.
pub struct Prepared {
    pub data: ResponseDataset,
    pub truth: Option<SyntheticTruth>,
    pub reference: BTreeMap<ItemId, f64>,
}

fn fill_of(cfg: &DataConfig) -> Fill {
    match cfg.fill_fraction {
        Some(f) => Fill::Fraction(f),
        None => Fill::Dense,
    }
}

/// Generates or loads the data for one seed and assigns roles.
///
/// Without a ground truth the reference difficulties come from fitting the
/// test users' responses, standing in for a large unbiased sample.
pub fn prepare(cfg: &PipelineConfig, seed: u64) -> Result<Prepared> {
    let (data, truth) = match &cfg.paths.input {
        Some(path) => {
            let d = data::load_csv(path)?;
            let truth = match &cfg.paths.truth {
                Some(t) => Some(SyntheticTruth::from_json(&fs::read_to_string(t)?)?),
                None => None,
            };
            let single_role = d.roles().values().all(|r| *r == Role::UnbiasedTrain);
            let d = if single_role { data::split_roles(&d, cfg.data.roles, seed)? } else { d };
            (d, truth)
        }
        None => {
            let (d, t) = data::generate_synthetic(cfg.data.n_users, cfg.data.n_items, fill_of(&cfg.data), &cfg.data.distribution, seed)?;
            (data::split_roles(&d, cfg.data.roles, seed)?, Some(t))
        }
    };
    let reference = match &truth {
        Some(t) => t.difficulties(),
        None => {
            let test = data.slice(Role::Test);
            fitting::fit_irt(&test, &[], &cfg.fit)?.difficulties()
        }
    };
    Ok(Prepared { data, truth, reference })
}

fn unit(rows: &[Interaction]) -> Vec<Weighted> {
    rows.iter().map(|x| Weighted { x: *x, weight: 1.0 }).collect()
}

/// Fit on the unbiased training users, early-stopped on the validation users.
pub fn fit_unbiased(data: &ResponseDataset, cfg: &FitConfig, init: Option<&FittedModel>) -> Result<FittedModel> {
    let train = data.slice(Role::UnbiasedTrain);
    let val = data.slice(Role::UnbiasedVal);
    fitting::fit_weighted(&unit(&train), &val, Some(data.catalog()), init, cfg)
}

pub fn final_thetas(sessions: &[CatSession]) -> BTreeMap<UserId, f64> {
    sessions.iter().map(|s| (s.user_id, s.final_theta())).collect()
}

/// Builds the influence report of a biased set against the unbiased fit.
pub fn influence_report(
    data: &ResponseDataset,
    unbiased: &FittedModel,
    biased: &[Interaction],
    sessions: &[CatSession],
) -> Result<(HessianFactorization, InfluenceReport)> {
    let train = data.slice(Role::UnbiasedTrain);
    let val = data.slice(Role::UnbiasedVal);
    let fact = HessianFactorization::from_model(unbiased, &train)?;
    let report = InfluenceReport::compute(
        &fact,
        biased,
        &final_thetas(sessions),
        if val.is_empty() { None } else { Some(&val) },
    )?;
    Ok((fact, report))
}

/// Outcome of training one variant.
pub struct Trained {
    pub model: FittedModel,
    pub selection: Selection,
    pub threshold: Option<f64>,
    /// Biased responses entering the fit (sum of weights for weighted methods).
    pub biased_mass: f64,
}

pub fn train_variant(
    variant: Variant,
    data: &ResponseDataset,
    unbiased: Option<&FittedModel>,
    biased: &[Interaction],
    report: Option<&InfluenceReport>,
    cfg: &PipelineConfig,
) -> Result<Trained> {
    let train = data.slice(Role::UnbiasedTrain);
    let val = data.slice(Role::UnbiasedVal);
    let catalog = data.catalog();
    let (selection, threshold) = match variant {
        Variant::Unbiased => (Selection::None, None),
        Variant::Union => (Selection::All, None),
        Variant::Biased => {
            let model = fitting::fit_weighted(&unit(biased), &val, Some(catalog), None, &cfg.fit)?;
            return Ok(Trained {
                model,
                selection: Selection::All,
                threshold: None,
                biased_mass: biased.len() as f64,
            });
        }
        Variant::Debias(m) => {
            let report = report.ok_or_else(|| Error::invalid("influence report required"))?;
            report.decide(m, &cfg.debias.params)?
        }
    };
    let biased_mass = match &selection {
        Selection::None => 0.0,
        Selection::All => biased.len() as f64,
        Selection::Users(u) => biased.iter().filter(|x| u.contains(&x.user)).count() as f64,
        Selection::Interactions(s) => s.len() as f64,
        Selection::Weights(w) => w.iter().sum(),
    };
    let model = match (variant, unbiased) {
        (Variant::Unbiased, Some(m)) => m.clone(),
        _ => influence::retrain_with_selection(&train, biased, &selection, &val, Some(catalog), &cfg.fit)?,
    };
    Ok(Trained {
        model,
        selection,
        threshold,
        biased_mass,
    })
}

/// Metrics of one model on one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub rank_corr: f64,
    /// Per evaluation step, in config order.
    pub auc_pool: Vec<f64>,
    pub auc_eval: Vec<f64>,
    pub random_auc: f64,
}

pub fn score_model(model: &FittedModel, data: &ResponseDataset, reference: &BTreeMap<ItemId, f64>, cfg: &PipelineConfig, seed: u64) -> Result<Scores> {
    let rank_corr = eval::difficulty_rank_corr(&model.difficulties(), reference)?;
    let bank = model.item_bank();
    let test_users: BTreeSet<UserId> = data.users_with_role(Role::Test).into_iter().collect();
    let rows: BTreeMap<_, _> = data.rows().into_iter().filter(|(u, _)| test_users.contains(u)).collect();
    let items: Vec<ItemId> = data.catalog().iter().copied().collect();
    let split = eval::split_items(&items, cfg.eval.pool_fraction, seed)?;
    let cat_out = eval::cat_auc_protocol(&bank, &rows, &split, &cfg.eval.steps, cfg.eval.selector)?;
    let n = cfg.eval.steps.len();
    let auc_pool = cat_out.results[..n].iter().map(|r| r.value).collect();
    let auc_eval = cat_out.results[n..].iter().map(|r| r.value).collect();
    let random = eval::random_auc_protocol(&bank, &rows, cfg.eval.random_fraction, seed)?;
    Ok(Scores {
        rank_corr,
        auc_pool,
        auc_eval,
        random_auc: random.results[0].value,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub scores: Scores,
    pub biased_mass: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutcome {
    pub seed: u64,
    /// Rank correlation of final ability vs mean true difficulty administered, adaptive set.
    pub bias_signature: f64,
    /// The same for a size-matched random administration.
    pub random_signature: f64,
    pub biased_rows: usize,
    pub damping: f64,
    pub variants: Vec<VariantOutcome>,
}

impl RepeatOutcome {
    pub fn get(&self, v: Variant) -> Option<&VariantOutcome> {
        self.variants.iter().find(|o| o.variant == v)
    }
}

fn preamble(cfg: &PipelineConfig, extra: &[String]) -> Result<Vec<String>> {
    let mut lines = vec![cfg.header()?];
    lines.extend(extra.iter().cloned());
    Ok(lines)
}

/// One full benchmark repeat: data, unbiased fit, adaptive biased set,
/// influence, every configured variant, and evaluation. With `artifacts`
/// set, stage outputs are written there.
pub fn run_repeat(cfg: &PipelineConfig, seed: u64, artifacts: Option<&Path>) -> Result<RepeatOutcome> {
    let variants = cfg.variants()?;
    let prepared = stage("synth", prepare(cfg, seed))?;
    let data = &prepared.data;
    let unbiased = stage("fit", fit_unbiased(data, &cfg.fit, None))?;
    let bank = unbiased.item_bank();
    let oracle = match (cfg.cat.oracle, &prepared.truth) {
        (OracleKind::Dense, _) => OracleSource::Dense,
        (OracleKind::Truth, Some(t)) => OracleSource::Truth(t),
        (OracleKind::Truth, None) => return Err(Error::Config("cat.oracle = truth needs a ground truth".into())),
    };
    let biased_set = stage("bias", data::build_biased_set(data, &bank, cfg.cat.selector, cfg.cat.steps, oracle, seed))?;
    let random_set = stage("bias", data::build_random_set(data, &bank, cfg.cat.steps, seed))?;
    let truth_b = &prepared.reference;
    let bias_signature = stage("eval", eval::bias_signature(&biased_set.sessions, truth_b))?;
    let random_signature = stage("eval", eval::bias_signature(&random_set.sessions, truth_b))?;
    let biased = biased_set.dataset.interactions().to_vec();

    let needs_report = variants.iter().any(|v| matches!(v, Variant::Debias(_)));
    let report = if needs_report {
        Some(stage("debias", influence_report(data, &unbiased, &biased, &biased_set.sessions))?.1)
    } else {
        None
    };

    if let Some(dir) = artifacts {
        stage("write", write_artifacts(dir, cfg, &prepared, &unbiased, &biased_set.sessions, report.as_ref()))?;
    }

    let mut outcomes = Vec::with_capacity(variants.len());
    for v in variants {
        let trained = stage("debias", train_variant(v, data, Some(&unbiased), &biased, report.as_ref(), cfg))?;
        let scores = stage("eval", score_model(&trained.model, data, &prepared.reference, cfg, seed))?;
        outcomes.push(VariantOutcome {
            variant: v,
            scores,
            biased_mass: trained.biased_mass,
            epochs: trained.model.metadata.epochs_run,
        });
    }
    Ok(RepeatOutcome {
        seed,
        bias_signature,
        random_signature,
        biased_rows: biased.len(),
        damping: report.as_ref().map_or(f64::NAN, |r| r.damping),
        variants: outcomes,
    })
}

fn write_artifacts(
    dir: &Path,
    cfg: &PipelineConfig,
    prepared: &Prepared,
    unbiased: &FittedModel,
    sessions: &[CatSession],
    report: Option<&InfluenceReport>,
) -> Result<()> {
    let pre = preamble(cfg, &[])?;
    prepared.data.write_csv(create(&dir.join("dataset.csv"))?, &pre)?;
    if let Some(t) = &prepared.truth {
        let mut t = t.clone();
        t.provenance = cfg.provenance()?;
        write_file(&dir.join("truth.json"), t.to_json()?)?;
    }
    let mut m = unbiased.clone();
    m.metadata.provenance = cfg.provenance()?;
    write_file(&dir.join("unbiased.json"), m.to_json()?)?;
    cat::write_sessions_csv(create(&dir.join("sessions.csv"))?, sessions, &pre)?;
    if let Some(r) = report {
        let (sel, eta) = r.decide(Method::UserAif, &cfg.debias.params)?;
        let pre = preamble(cfg, &[format!("method=user-aif, quantile={}, damping={}", cfg.debias.params.quantile, r.damping)])?;
        r.write_interactions_csv(create(&dir.join("influence_interactions.csv"))?, &sel, &pre)?;
        r.write_users_csv(create(&dir.join("influence_users.csv"))?, &sel, eta, &pre)?;
    }
    Ok(())
}

fn metric_columns(cfg: &PipelineConfig) -> Vec<String> {
    let mut cols = vec!["rank_corr".to_string()];
    for kind in ["auc_pool", "auc_eval"] {
        for t in &cfg.eval.steps {
            cols.push(format!("{kind}_{t}"));
        }
    }
    cols.push("random_auc".to_string());
    cols
}

fn metric_values(s: &Scores) -> Vec<f64> {
    let mut v = vec![s.rank_corr];
    v.extend(&s.auc_pool);
    v.extend(&s.auc_eval);
    v.push(s.random_auc);
    v
}

/// Methods × metrics table of means and sample standard deviations over repeats.
pub fn write_comparison<W: std::io::Write>(out: W, cfg: &PipelineConfig, repeats: &[RepeatOutcome]) -> Result<()> {
    let mut out = out;
    for line in preamble(cfg, &[format!("n_repeats={}", repeats.len())])? {
        writeln!(out, "# {line}")?;
    }
    let cols = metric_columns(cfg);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string()];
    for c in &cols {
        header.push(c.clone());
        header.push(format!("{c}_std"));
    }
    header.push("n_repeats".into());
    w.write_record(&header)?;
    for v in cfg.variants()? {
        let per_repeat: Vec<Vec<f64>> = repeats
            .iter()
            .filter_map(|r| r.get(v).map(|o| metric_values(&o.scores)))
            .collect();
        let mut rec = vec![v.to_string()];
        for c in 0..cols.len() {
            let vals: Vec<f64> = per_repeat.iter().map(|r| r[c]).collect();
            let (m, s) = eval::mean_std(&vals);
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        rec.push(per_repeat.len().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_long_results<W: std::io::Write>(out: W, cfg: &PipelineConfig, repeats: &[RepeatOutcome]) -> Result<()> {
    let mut out = out;
    for line in preamble(cfg, &[])? {
        writeln!(out, "# {line}")?;
    }
    let cols = metric_columns(cfg);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["repeat", "seed", "method", "metric", "value", "biased_mass", "epochs"])?;
    for (r, rep) in repeats.iter().enumerate() {
        for o in &rep.variants {
            for (c, v) in cols.iter().zip(metric_values(&o.scores)) {
                w.write_record([
                    r.to_string(),
                    rep.seed.to_string(),
                    o.variant.to_string(),
                    c.clone(),
                    v.to_string(),
                    o.biased_mass.to_string(),
                    o.epochs.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_diagnostics<W: std::io::Write>(out: W, cfg: &PipelineConfig, repeats: &[RepeatOutcome]) -> Result<()> {
    let mut out = out;
    for line in preamble(cfg, &[])? {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["repeat", "seed", "biased_rows", "bias_signature", "random_signature", "damping"])?;
    for (r, rep) in repeats.iter().enumerate() {
        w.write_record([
            r.to_string(),
            rep.seed.to_string(),
            rep.biased_rows.to_string(),
            rep.bias_signature.to_string(),
            rep.random_signature.to_string(),
            rep.damping.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All stages for `eval.n_repeats` seeds starting at `seed`.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<Vec<RepeatOutcome>> {
    cfg.validate()?;
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    let mut repeats = Vec::with_capacity(cfg.eval.n_repeats);
    for r in 0..cfg.eval.n_repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let dir = out.join(format!("repeat_{r}"));
        repeats.push(run_repeat(cfg, seed, Some(&dir))?);
    }
    write_comparison(create(&out.join("comparison.csv"))?, cfg, &repeats)?;
    write_long_results(create(&out.join("results.csv"))?, cfg, &repeats)?;
    write_diagnostics(create(&out.join("diagnostics.csv"))?, cfg, &repeats)?;
    Ok(repeats)
}

/// Writes `dataset.csv` (with roles) and `truth.json`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<(ResponseDataset, SyntheticTruth)> {
    cfg.validate()?;
    let (d, mut truth) = data::generate_synthetic(cfg.data.n_users, cfg.data.n_items, fill_of(&cfg.data), &cfg.data.distribution, cfg.seed)?;
    let d = data::split_roles(&d, cfg.data.roles, cfg.seed)?;
    let out = &cfg.paths.out;
    d.write_csv(create(&out.join("dataset.csv"))?, &preamble(cfg, &[])?)?;
    truth.provenance = cfg.provenance()?;
    write_file(&out.join("truth.json"), truth.to_json()?)?;
    Ok((d, truth))
}

fn load_input(cfg: &PipelineConfig) -> Result<ResponseDataset> {
    data::load_csv(require(&cfg.paths.input, "input dataset (--input)")?)
}

fn load_model(path: &Path) -> Result<FittedModel> {
    FittedModel::from_json(&fs::read_to_string(path)?)
}

fn load_truth(cfg: &PipelineConfig) -> Result<Option<SyntheticTruth>> {
    cfg.paths
        .truth
        .as_ref()
        .map(|t| SyntheticTruth::from_json(&fs::read_to_string(t)?))
        .transpose()
}

pub struct FitSummary {
    pub model: FittedModel,
    pub rank_corr: Option<f64>,
}

/// Fits on the unbiased training users and writes `model.json`.
pub fn cmd_fit(cfg: &PipelineConfig) -> Result<FitSummary> {
    cfg.fit.validate()?;
    let data = load_input(cfg)?;
    let init = cfg.paths.init.as_deref().map(load_model).transpose()?;
    let mut model = fit_unbiased(&data, &cfg.fit, init.as_ref())?;
    model.metadata.provenance = cfg.provenance()?;
    fs::create_dir_all(&cfg.paths.out)?;
    write_file(&cfg.paths.out.join("model.json"), model.to_json()?)?;
    let rank_corr = match load_truth(cfg)? {
        Some(t) => Some(eval::difficulty_rank_corr(&model.difficulties(), &t.difficulties())?),
        None => None,
    };
    Ok(FitSummary { model, rank_corr })
}

/// Adaptive tests for the biased users; writes `sessions.csv`.
pub fn cmd_bias(cfg: &PipelineConfig) -> Result<Vec<CatSession>> {
    if cfg.cat.steps == 0 {
        return Err(Error::Config("cat.steps must be positive".into()));
    }
    let data = load_input(cfg)?;
    let model = load_model(require(&cfg.paths.model, "model JSON (--model)")?)?;
    let truth = load_truth(cfg)?;
    let oracle = match (cfg.cat.oracle, &truth) {
        (OracleKind::Dense, _) => OracleSource::Dense,
        (OracleKind::Truth, Some(t)) => OracleSource::Truth(t),
        (OracleKind::Truth, None) => return Err(Error::Config("cat.oracle = truth needs --truth".into())),
    };
    let set = data::build_biased_set(&data, &model.item_bank(), cfg.cat.selector, cfg.cat.steps, oracle, cfg.seed)?;
    let path = cfg.paths.out.join("sessions.csv");
    cat::write_sessions_csv(create(&path)?, &set.sessions, &preamble(cfg, &[])?)?;
    // re-read what was written and check it
    let back = cat::read_sessions_csv(fs::File::open(&path)?)?;
    if back.len() != set.sessions.len() {
        return Err(Error::invalid("session file did not round-trip"));
    }
    Ok(set.sessions)
}

pub struct DebiasSummary {
    pub variant: Variant,
    pub report: Option<InfluenceReport>,
    pub selection: Selection,
    pub threshold: Option<f64>,
    pub model: FittedModel,
}

/// Influence report, selection and retraining for `debias.method`.
pub fn cmd_debias(cfg: &PipelineConfig) -> Result<DebiasSummary> {
    cfg.fit.validate()?;
    let variant: Variant = cfg.debias.method.parse()?;
    let data = load_input(cfg)?;
    let unbiased = load_model(require(&cfg.paths.model, "unbiased model JSON (--model)")?)?;
    let sessions_path = require(&cfg.paths.sessions, "session CSV (--sessions)")?;
    let sessions = cat::read_sessions_csv(fs::File::open(sessions_path)?)?;
    let set = data::biased_set_from_sessions(sessions, data.catalog())?;
    let biased = set.dataset.interactions().to_vec();
    let report = match variant {
        Variant::Debias(_) => Some(influence_report(&data, &unbiased, &biased, &set.sessions)?.1),
        _ => None,
    };
    let trained = train_variant(variant, &data, None, &biased, report.as_ref(), cfg)?;
    let out = &cfg.paths.out;
    let p = &cfg.debias.params;
    let detail = match variant {
        Variant::Debias(Method::UserAif | Method::IfParam) => format!("quantile={}", p.quantile),
        Variant::Debias(Method::If4uRec) => format!("alpha={}", p.alpha),
        Variant::Debias(Method::GreedyAif) => format!(
            "budget={}, variant={:?}",
            p.greedy_budget.map_or("default".to_string(), |b| b.to_string()),
            p.greedy_variant
        ),
        _ => "params=none".to_string(),
    };
    if let Some(r) = &report {
        let pre = preamble(cfg, &[format!("method={variant}, {detail}, damping={}", r.damping)])?;
        r.write_interactions_csv(create(&out.join("influence_interactions.csv"))?, &trained.selection, &pre)?;
        r.write_users_csv(create(&out.join("influence_users.csv"))?, &trained.selection, trained.threshold, &pre)?;
    }
    let mut model = trained.model;
    model.metadata.provenance = cfg.provenance()?;
    model.metadata.provenance.insert("method".into(), variant.to_string());
    write_file(&out.join("retrained.json"), model.to_json()?)?;
    Ok(DebiasSummary {
        variant,
        report,
        selection: trained.selection,
        threshold: trained.threshold,
        model,
    })
}

/// Evaluates a model on the test users over `eval.n_repeats` seeds; writes `metrics.csv`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Vec<EvalResult>> {
    cfg.validate()?;
    let data = load_input(cfg)?;
    let model = load_model(require(&cfg.paths.model, "model JSON (--model)")?)?;
    let reference = load_truth(cfg)?.map(|t| t.difficulties());
    let mut per_metric: Vec<Vec<f64>> = Vec::new();
    for r in 0..cfg.eval.n_repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let scores = score_model(&model, &data, reference.as_ref().unwrap_or(&model.difficulties()), cfg, seed)?;
        let vals = metric_values(&scores);
        if per_metric.is_empty() {
            per_metric = vec![Vec::new(); vals.len()];
        }
        for (c, v) in vals.into_iter().enumerate() {
            per_metric[c].push(v);
        }
    }
    let mut results = Vec::new();
    let n = cfg.eval.steps.len();
    for (c, vals) in per_metric.iter().enumerate() {
        let (name, step) = if c == 0 {
            ("rank_corr", None)
        } else if c <= n {
            ("auc_pool", Some(cfg.eval.steps[c - 1]))
        } else if c <= 2 * n {
            ("auc_eval", Some(cfg.eval.steps[c - 1 - n]))
        } else {
            ("random_auc", None)
        };
        if name == "rank_corr" && reference.is_none() {
            continue;
        }
        results.push(EvalResult::summarize(name, step, vals, cfg.seed));
    }
    eval::write_results_csv(create(&cfg.paths.out.join("metrics.csv"))?, &results, &preamble(cfg, &[])?)?;
    Ok(results)
}
