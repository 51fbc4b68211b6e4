//! Experiment matrix planning, parallel execution with resumable JSONL
//! transcripts, and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    AgentEndpoint, Analyst, ChatClient, Judge, Participant, PublicProduct, RateLimiter,
    RemoteAnalyst, RemoteJudge, RemoteParticipant, RuleAnalyst, RuleJudge, ScriptedParticipant,
    ScriptedPolicy, Side, StallExit, WireLog,
};
use crate::bandit::{
    BanditEnv, BanditError, Checkpoint, EpisodeFeedback, RewardSpec, Schedule, Trainer,
};
use crate::catalog::{derive_budget, load_catalog, sample_indices, BudgetLevel, Product};
use crate::engine::{
    run_negotiation, Clock, EpisodeMeta, NegotiationConfig, Status, Timing, Transcript,
    DEFAULT_T_MAX,
};
use crate::metrics::{emit_report, DealRecord, MetricsOptions, MetricsReport};
use crate::money::Money;
use crate::prompts::{StrategyAction, TemplateSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_MD: &str = "report.md";
pub const HEATMAP_CSV: &str = "heatmap.csv";
pub const TRANSCRIPT_SCHEMA: &str = "1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("the experiment matrix is empty")]
    EmptyMatrix,
    #[error("no completed negotiations in {0}")]
    NoData(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl RunError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::EmptyMatrix => 2,
            RunError::NoData(_) => 4,
            RunError::Io { .. } | RunError::Metrics(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Config

/// Offline stand-in for a model: a fixed concession schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSpec {
    #[serde(default = "default_open")]
    pub open_ratio: f64,
    #[serde(default = "default_step")]
    pub step_ratio: f64,
    /// Buyer only: how far above budget it will still go.
    #[serde(default)]
    pub cap_slack: f64,
    #[serde(default)]
    pub stall_exit: Option<StallExit>,
}

fn default_open() -> f64 {
    0.7
}
fn default_step() -> f64 {
    0.05
}

impl ScriptedSpec {
    fn policy(&self, side: Side, product: &Product, budget: Money) -> ScriptedPolicy {
        match side {
            Side::Buyer => {
                let mut p = ScriptedPolicy::buyer(self.open_ratio, self.step_ratio, budget);
                p.cap_slack = self.cap_slack;
                p.stall_exit = self.stall_exit;
                p
            }
            Side::Seller => ScriptedPolicy::seller(self.step_ratio, product.wholesale_price),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Remote(AgentEndpoint),
    Scripted(ScriptedSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    RuleBased,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSample {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProductSample {
    fn default() -> Self {
        ProductSample { count: 50, seed: 0 }
    }
}

fn default_levels() -> Vec<BudgetLevel> {
    BudgetLevel::ALL.to_vec()
}
fn one() -> u32 {
    1
}
fn default_t_max() -> u32 {
    DEFAULT_T_MAX
}
fn default_parallelism() -> usize {
    4
}
fn default_threshold() -> f64 {
    0.05
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run_seed: u64,
    /// Catalog file, relative to the config file.
    pub catalog: PathBuf,
    /// Template directory; the built-in templates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    pub endpoints: BTreeMap<String, EndpointSpec>,
    pub buyer_models: Vec<String>,
    pub seller_models: Vec<String>,
    #[serde(default)]
    pub products_sample: ProductSample,
    #[serde(default = "default_levels")]
    pub budget_levels: Vec<BudgetLevel>,
    #[serde(default = "one")]
    pub trials_per_cell: u32,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default)]
    pub judge_backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_endpoint: Option<String>,
    #[serde(default)]
    pub analyst_backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyst_endpoint: Option<String>,
    /// Strategy action index given to remote buyers, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buyer_strategy: Option<usize>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Requests per minute across all remote calls; 0 is unlimited.
    #[serde(default)]
    pub rate_limit_rpm: u32,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub abort_threshold: f64,
    #[serde(default)]
    pub clock: Clock,
    #[serde(default)]
    pub record_wire: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_seller: Option<String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.trials_per_cell == 0 {
            return bad("trials_per_cell must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.abort_threshold) {
            return bad(format!("abort_threshold {} outside [0, 1]", self.abort_threshold));
        }
        for (list, what) in [(&self.buyer_models, "buyer_models"), (&self.seller_models, "seller_models")] {
            let mut seen = BTreeSet::new();
            for m in list {
                if !self.endpoints.contains_key(m) {
                    return bad(format!("{what}: {m:?} has no endpoint entry"));
                }
                if !seen.insert(m) {
                    return bad(format!("{what}: {m:?} listed twice"));
                }
            }
        }
        for (name, ep) in &self.endpoints {
            if let EndpointSpec::Remote(e) = ep {
                e.validate().map_err(|m| RunError::Config(format!("endpoint {name}: {m}")))?;
            }
        }
        for (backend, ep, what) in [
            (self.judge_backend, &self.judge_endpoint, "judge"),
            (self.analyst_backend, &self.analyst_endpoint, "analyst"),
        ] {
            if backend == Backend::Remote {
                match ep.as_ref().and_then(|n| self.endpoints.get(n)) {
                    Some(EndpointSpec::Remote(_)) => {}
                    _ => return bad(format!("{what}_backend remote needs a remote {what}_endpoint")),
                }
            }
        }
        if let Some(a) = self.buyer_strategy {
            StrategyAction::from_index(a).map_err(|e| RunError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Hash over the fields that determine results. Output location,
    /// parallelism and rate limit are execution details and left out, so the
    /// same experiment written to two places shares a run id.
    pub fn identity_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 1;
        c.rate_limit_rpm = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn templates(&self) -> Result<TemplateSet, RunError> {
        match &self.templates_dir {
            Some(d) => TemplateSet::from_dir(&self.resolve(d)).map_err(|e| RunError::Config(e.to_string())),
            None => Ok(TemplateSet::default()),
        }
    }

    /// Raw catalog bytes and parsed products.
    pub fn catalog(&self) -> Result<(Vec<u8>, Vec<Product>), RunError> {
        let path = self.resolve(&self.catalog);
        let bytes = fs::read(&path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let products = load_catalog(&bytes).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Ok((bytes, products))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Plan

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub buyer: String,
    pub seller: String,
    /// Position in the catalog.
    pub product_index: usize,
    pub budget_level: BudgetLevel,
    pub trial: u32,
    pub seed: u64,
}

/// Stable per-job seed, so any single job can be rerun on its own.
pub fn job_seed(
    run_seed: u64,
    buyer: &str,
    seller: &str,
    product_index: usize,
    level: BudgetLevel,
    trial: u32,
) -> u64 {
    let key = format!("{run_seed}\x1f{buyer}\x1f{seller}\x1f{product_index}\x1f{level}\x1f{trial}");
    let d = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Buyers × sellers × products × levels × trials, self-pairings included.
/// Ids are `b{buyer}-s{seller}-p{product}-{level}-t{trial}` using list
/// positions.
pub fn plan_jobs(
    cfg: &ExperimentConfig,
    product_indices: &[usize],
) -> Result<Vec<Job>, RunError> {
    let mut jobs = Vec::new();
    for (bi, b) in cfg.buyer_models.iter().enumerate() {
        for (si, s) in cfg.seller_models.iter().enumerate() {
            for (pi, &prod) in product_indices.iter().enumerate() {
                for &level in &cfg.budget_levels {
                    for trial in 0..cfg.trials_per_cell {
                        jobs.push(Job {
                            id: format!("b{bi}-s{si}-p{pi}-{level}-t{trial}"),
                            buyer: b.clone(),
                            seller: s.clone(),
                            product_index: prod,
                            budget_level: level,
                            trial,
                            seed: job_seed(cfg.run_seed, b, s, prod, level, trial),
                        });
                    }
                }
            }
        }
    }
    if jobs.is_empty() {
        return Err(RunError::EmptyMatrix);
    }
    Ok(jobs)
}

/// Sample products per the config and plan the full matrix.
pub fn plan_matrix(cfg: &ExperimentConfig, catalog_len: usize) -> Result<Vec<Job>, RunError> {
    let picked = sample_indices(catalog_len, cfg.products_sample.count, cfg.products_sample.seed);
    plan_jobs(cfg, &picked)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub catalog_hash: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub run_seed: u64,
    pub product_indices: Vec<usize>,
    pub job_count: usize,
    pub versions: BTreeMap<String, String>,
    pub created_at: u64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(
        cfg: &ExperimentConfig,
        catalog_bytes: &[u8],
        templates: &TemplateSet,
        product_indices: Vec<usize>,
        job_count: usize,
    ) -> Self {
        let config_hash = cfg.identity_hash();
        let catalog_hash = sha256_hex(catalog_bytes);
        let prompt_hashes = templates.hashes();
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(catalog_hash.as_bytes());
        for (k, v) in &prompt_hashes {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        let versions = BTreeMap::from([
            ("dealbench".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("transcript_schema".to_string(), TRANSCRIPT_SCHEMA.to_string()),
        ]);
        RunManifest {
            run_id: hex::encode(&h.finalize()[..8]),
            config_hash,
            catalog_hash,
            prompt_hashes,
            run_seed: cfg.run_seed,
            product_indices,
            job_count,
            versions,
            created_at: match cfg.clock {
                Clock::Wall => now_secs(),
                Clock::Logical => 0,
            },
            config: cfg.clone(),
        }
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Agents for a run

/// Everything needed to stand up the agents of one negotiation.
pub struct Backends {
    pub endpoints: BTreeMap<String, EndpointSpec>,
    pub templates: TemplateSet,
    pub limiter: Arc<RateLimiter>,
    pub judge_endpoint: Option<AgentEndpoint>,
    pub analyst_endpoint: Option<AgentEndpoint>,
}

impl Backends {
    pub fn new(cfg: &ExperimentConfig, templates: TemplateSet) -> Self {
        let remote = |backend: Backend, name: &Option<String>| match (backend, name) {
            (Backend::Remote, Some(n)) => match cfg.endpoints.get(n) {
                Some(EndpointSpec::Remote(e)) => Some(e.clone()),
                _ => None,
            },
            _ => None,
        };
        Backends {
            endpoints: cfg.endpoints.clone(),
            templates,
            limiter: Arc::new(RateLimiter::new(cfg.rate_limit_rpm)),
            judge_endpoint: remote(cfg.judge_backend, &cfg.judge_endpoint),
            analyst_endpoint: remote(cfg.analyst_backend, &cfg.analyst_endpoint),
        }
    }

    fn client(&self, ep: &AgentEndpoint, wire: Option<&WireLog>) -> ChatClient {
        let c = ChatClient::new(ep.clone()).with_rate_limiter(self.limiter.clone());
        match wire {
            Some(w) => c.with_wire_log(w.clone()),
            None => c,
        }
    }

    pub fn participant(
        &self,
        model: &str,
        side: Side,
        product: &Product,
        budget: Money,
        strategy: Option<&StrategyAction>,
        wire: Option<&WireLog>,
    ) -> Result<Box<dyn Participant>, String> {
        match self.endpoints.get(model) {
            Some(EndpointSpec::Scripted(s)) => Ok(Box::new(ScriptedParticipant::new(
                model,
                s.policy(side, product, budget),
            ))),
            Some(EndpointSpec::Remote(ep)) => {
                let client = self.client(ep, wire);
                let p = match side {
                    Side::Buyer => RemoteParticipant::buyer(
                        model,
                        client,
                        &self.templates,
                        &PublicProduct::from(product),
                        budget,
                        strategy,
                    ),
                    Side::Seller => RemoteParticipant::seller(model, client, &self.templates, product),
                };
                p.map(|p| Box::new(p) as Box<dyn Participant>).map_err(|e| e.to_string())
            }
            None => Err(format!("no endpoint named {model:?}")),
        }
    }

    pub fn judge(&self, wire: Option<&WireLog>) -> Box<dyn Judge> {
        match &self.judge_endpoint {
            Some(ep) => Box::new(RemoteJudge::new(self.client(ep, wire), &self.templates)),
            None => Box::new(RuleJudge),
        }
    }

    pub fn analyst(&self, wire: Option<&WireLog>) -> Box<dyn Analyst> {
        match &self.analyst_endpoint {
            Some(ep) => Box::new(RemoteAnalyst::new(self.client(ep, wire), &self.templates)),
            None => Box::new(RuleAnalyst),
        }
    }
}

pub struct EpisodeSpec<'a> {
    pub run_id: &'a str,
    pub job_id: &'a str,
    pub buyer: &'a str,
    pub seller: &'a str,
    pub product: &'a Product,
    pub level: BudgetLevel,
    pub seed: u64,
    pub t_max: u32,
    pub clock: Clock,
    pub record_wire: bool,
    pub strategy: Option<StrategyAction>,
}

/// Run one negotiation. Failures come back as aborted transcripts, never as
/// errors.
pub fn run_episode(backends: &Backends, spec: &EpisodeSpec<'_>) -> Transcript {
    let budget = derive_budget(spec.product, spec.level);
    let wire = spec.record_wire.then(WireLog::default);
    let mut cfg = NegotiationConfig::new(spec.product.clone(), budget);
    cfg.t_max = spec.t_max;
    cfg.record_wire = spec.record_wire;
    let meta = EpisodeMeta {
        run_id: spec.run_id.to_string(),
        job_id: spec.job_id.to_string(),
        budget_level: Some(spec.level),
        seed: spec.seed,
        clock: spec.clock,
    };
    let agents = backends
        .participant(spec.buyer, Side::Buyer, spec.product, budget, spec.strategy.as_ref(), wire.as_ref())
        .and_then(|b| {
            backends
                .participant(spec.seller, Side::Seller, spec.product, budget, None, wire.as_ref())
                .map(|s| (b, s))
        });
    let mut t = match agents {
        Ok((mut buyer, mut seller)) => {
            let judge = backends.judge(wire.as_ref());
            let analyst = backends.analyst(wire.as_ref());
            match run_negotiation(&mut buyer, &mut seller, judge.as_ref(), analyst.as_ref(), &cfg, &meta) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("job {} aborted: {}", spec.job_id, e.kind);
                    *e.transcript
                }
            }
        }
        Err(msg) => setup_failure(spec, &cfg, msg),
    };
    if let Some(w) = wire {
        t.wire = w.take();
    }
    t
}

fn setup_failure(spec: &EpisodeSpec<'_>, cfg: &NegotiationConfig, msg: String) -> Transcript {
    let p = spec.product;
    Transcript {
        run_id: spec.run_id.to_string(),
        job_id: spec.job_id.to_string(),
        product_name: p.name.clone(),
        category: p.category,
        budget_level: Some(spec.level),
        beta: cfg.budget,
        retail_price: p.retail_price,
        wholesale_price: p.wholesale_price,
        buyer_model: spec.buyer.to_string(),
        seller_model: spec.seller.to_string(),
        t_max: cfg.t_max,
        turns: Vec::new(),
        status: Status::Aborted,
        outcome: None,
        error: Some(msg),
        seed: spec.seed,
        timestamps: Timing::default(),
        wire: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    /// Stop handing out work after this many jobs. Used to simulate an
    /// interrupted run.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub completed: usize,
    pub aborted: usize,
    pub abort_fraction: f64,
    pub threshold_breached: bool,
    /// False when the run stopped early; reports are only written for
    /// finished runs.
    pub finished: bool,
    pub report: Option<MetricsReport>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.threshold_breached {
            3
        } else if self.finished && self.report.is_none() {
            4
        } else {
            0
        }
    }
}

/// Read persisted transcripts. A torn last line (no trailing newline, or not
/// parseable) is cut off the file so appends stay well formed.
pub fn load_transcripts(path: &Path) -> Result<Vec<Transcript>, RunError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut good_len = 0usize;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[pos..pos + nl];
        pos += nl + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            good_len = pos;
            continue;
        }
        match serde_json::from_slice::<Transcript>(line) {
            Ok(t) => {
                out.push(t);
                good_len = pos;
            }
            Err(e) if pos >= bytes.len() => {
                log::warn!("{}: dropping unreadable last line: {e}", path.display());
                break;
            }
            Err(e) => {
                return Err(RunError::Config(format!(
                    "{}: corrupt transcript line: {e}",
                    path.display()
                )))
            }
        }
    }
    if good_len < bytes.len() {
        log::warn!("{}: truncating {} torn bytes", path.display(), bytes.len() - good_len);
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_len as u64).map_err(io_err(path))?;
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_line(t: &Transcript) -> String {
    let mut s = serde_json::to_string(t).expect("transcript serializes");
    s.push('\n');
    s
}

/// Plan, run and report. Writes the manifest first, appends one line per
/// finished job, skips jobs already on disk, then rewrites the transcript
/// file in plan order and emits reports.
pub fn execute(cfg: &ExperimentConfig, opts: &ExecuteOptions) -> Result<RunSummary, RunError> {
    let (catalog_bytes, products) = cfg.catalog()?;
    let templates = cfg.templates()?;
    let picked = sample_indices(products.len(), cfg.products_sample.count, cfg.products_sample.seed);
    if picked.len() < cfg.products_sample.count {
        log::warn!(
            "catalog has {} products, fewer than the {} requested",
            products.len(),
            cfg.products_sample.count
        );
    }
    let jobs = plan_jobs(cfg, &picked)?;
    let manifest = RunManifest::new(cfg, &catalog_bytes, &templates, picked, jobs.len());

    let dir = cfg.output_path();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = match fs::read(&manifest_path) {
        Ok(b) => {
            let old: RunManifest = serde_json::from_slice(&b)
                .map_err(|e| RunError::Config(format!("{}: {e}", manifest_path.display())))?;
            if old.run_id != manifest.run_id {
                return Err(RunError::Config(format!(
                    "{} belongs to run {}, not {}",
                    dir.display(),
                    old.run_id,
                    manifest.run_id
                )));
            }
            old
        }
        Err(_) => {
            let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            text.push('\n');
            write_atomic(&manifest_path, text.as_bytes())?;
            manifest
        }
    };

    let tpath = dir.join(TRANSCRIPTS_FILE);
    let existing = load_transcripts(&tpath)?;
    let done: BTreeSet<String> = existing.iter().map(|t| t.job_id.clone()).collect();
    let pending: Vec<&Job> = jobs.iter().filter(|j| !done.contains(&j.id)).collect();
    let skipped = jobs.len() - pending.len();
    log::info!(
        "run {}: {} jobs, {} already done, {} workers",
        manifest.run_id,
        jobs.len(),
        skipped,
        cfg.parallelism
    );

    let backends = Backends::new(cfg, templates);
    let sink = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&tpath)
            .map_err(io_err(&tpath))?,
    );
    let limit = opts.stop_after.unwrap_or(usize::MAX).min(pending.len());
    let next = AtomicUsize::new(0);
    let write_error: Mutex<Option<RunError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..cfg.parallelism.min(limit.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= limit {
                    break;
                }
                let job = pending[i];
                let t = run_episode(
                    &backends,
                    &EpisodeSpec {
                        run_id: &manifest.run_id,
                        job_id: &job.id,
                        buyer: &job.buyer,
                        seller: &job.seller,
                        product: &products[job.product_index],
                        level: job.budget_level,
                        seed: job.seed,
                        t_max: cfg.t_max,
                        clock: cfg.clock,
                        record_wire: cfg.record_wire,
                        strategy: cfg.buyer_strategy.and_then(|a| StrategyAction::from_index(a).ok()),
                    },
                );
                let line = to_line(&t);
                let mut f = sink.lock().expect("sink lock");
                if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                    write_error.lock().expect("error lock").get_or_insert(io_err(&tpath)(e));
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                }
            });
        }
    });
    if let Some(e) = write_error.into_inner().expect("error lock") {
        return Err(e);
    }
    drop(sink);

    // Canonical file: one line per planned job, plan order, no duplicates.
    let mut by_id: BTreeMap<String, Transcript> = BTreeMap::new();
    for t in load_transcripts(&tpath)? {
        by_id.entry(t.job_id.clone()).or_insert(t);
    }
    let mut ordered = Vec::with_capacity(jobs.len());
    for j in &jobs {
        if let Some(t) = by_id.remove(&j.id) {
            ordered.push(t);
        }
    }
    let mut text = String::new();
    for t in &ordered {
        text.push_str(&to_line(t));
    }
    write_atomic(&tpath, text.as_bytes())?;

    let aborted = ordered.iter().filter(|t| t.status == Status::Aborted).count();
    let finished = ordered.len() == jobs.len();
    let abort_fraction = aborted as f64 / jobs.len() as f64;
    let mut summary = RunSummary {
        run_dir: dir.clone(),
        planned: jobs.len(),
        executed: limit,
        skipped,
        completed: ordered.len() - aborted,
        aborted,
        abort_fraction,
        threshold_breached: finished && abort_fraction > cfg.abort_threshold,
        finished,
        report: None,
        manifest,
    };
    if finished {
        let opts = MetricsOptions {
            reference_seller: cfg.reference_seller.clone(),
            ..Default::default()
        };
        match aggregate(&dir, &opts) {
            Ok(report) => {
                write_reports(&report, &dir)?;
                summary.report = Some(report);
            }
            Err(RunError::NoData(_)) => log::warn!("no completed negotiations; reports skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Metrics over every transcript in a run directory.
pub fn aggregate(run_dir: &Path, opts: &MetricsOptions) -> Result<MetricsReport, RunError> {
    let deals = deal_records(run_dir)?;
    Ok(MetricsReport::build(&deals, opts))
}

/// Deal records of a run; NoData when nothing completed.
pub fn deal_records(run_dir: &Path) -> Result<Vec<DealRecord>, RunError> {
    let path = run_dir.join(TRANSCRIPTS_FILE);
    if !path.exists() {
        return Err(RunError::NoData(run_dir.to_path_buf()));
    }
    let deals: Vec<DealRecord> = load_transcripts(&path)?
        .iter()
        .map(DealRecord::from_transcript)
        .collect();
    if deals.iter().all(|d| d.aborted) {
        return Err(RunError::NoData(run_dir.to_path_buf()));
    }
    Ok(deals)
}

/// metrics.csv (per cell), report.md and heatmap.csv (long format).
pub fn write_reports(report: &MetricsReport, dir: &Path) -> Result<(), RunError> {
    for (file, format) in [(METRICS_CSV, "csv"), (REPORT_MD, "markdown"), (HEATMAP_CSV, "long")] {
        let body = emit_report(report, format)?;
        write_atomic(&dir.join(file), body.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Live bandit environment

/// Bandit environment that negotiates with configured endpoints: the buyer
/// model gets the strategy prompt for the chosen arm.
pub struct LiveEnv {
    backends: Backends,
    buyer: String,
    seller: String,
    products: Vec<Product>,
    t_max: u32,
    episodes: usize,
}

impl LiveEnv {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let (_, catalog) = cfg.catalog()?;
        let picked = sample_indices(catalog.len(), cfg.products_sample.count, cfg.products_sample.seed);
        let products: Vec<Product> = picked.into_iter().map(|i| catalog[i].clone()).collect();
        let (Some(buyer), Some(seller)) = (cfg.buyer_models.first(), cfg.seller_models.first()) else {
            return Err(RunError::EmptyMatrix);
        };
        if products.is_empty() {
            return Err(RunError::EmptyMatrix);
        }
        Ok(LiveEnv {
            backends: Backends::new(cfg, cfg.templates()?),
            buyer: buyer.clone(),
            seller: seller.clone(),
            products,
            t_max: cfg.t_max,
            episodes: 0,
        })
    }
}

impl BanditEnv for LiveEnv {
    fn run(&mut self, arm: usize, level: BudgetLevel) -> Result<EpisodeFeedback, BanditError> {
        let action = StrategyAction::from_index(arm).map_err(|e| BanditError::Env(e.to_string()))?;
        let product = &self.products[self.episodes % self.products.len()];
        let job_id = format!("opt-{}", self.episodes);
        let t = run_episode(
            &self.backends,
            &EpisodeSpec {
                run_id: "optimize",
                job_id: &job_id,
                buyer: &self.buyer,
                seller: &self.seller,
                product,
                level,
                seed: self.episodes as u64,
                t_max: self.t_max,
                clock: Clock::Wall,
                record_wire: false,
                strategy: Some(action),
            },
        );
        match (t.status, t.outcome) {
            (Status::Completed, Some(o)) => {
                self.episodes += 1;
                Ok(EpisodeFeedback {
                    flags: o.flags,
                    deadlock: o.deadlock,
                })
            }
            _ => Err(BanditError::Env(t.error.unwrap_or_else(|| "episode aborted".into()))),
        }
    }

    fn resume_at(&mut self, episodes: usize) {
        self.episodes = episodes;
    }
}

// ---------------------------------------------------------------------------
// Prompt optimization driver

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_FILE: &str = "best_action.json";

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub schedule: Schedule,
    pub reward: RewardSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Continue from `out_dir/checkpoint.json` when it exists.
    pub resume: bool,
    /// Checkpoint every this many pulls; failures always checkpoint.
    pub checkpoint_every: usize,
    /// Stop after this many pulls in this invocation (interrupt simulation).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestAction {
    pub index: usize,
    pub action: StrategyAction,
    pub theta: f64,
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("bandit: {0}")]
    Bandit(#[from] BanditError),
}

fn save_checkpoint(dir: &Path, cp: &Checkpoint) -> Result<(), RunError> {
    let mut text = serde_json::to_string(cp).expect("checkpoint serializes");
    text.push('\n');
    write_atomic(&dir.join(CHECKPOINT_FILE), text.as_bytes())
}

/// Load a checkpoint written by [`optimize`].
pub fn load_checkpoint(dir: &Path) -> Result<Option<Checkpoint>, RunError> {
    let path = dir.join(CHECKPOINT_FILE);
    match fs::read(&path) {
        Ok(b) => serde_json::from_slice(&b)
            .map(Some)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

/// Train the strategy bandit against `env`, checkpointing into `out_dir`.
/// Returns `None` when stopped early via `stop_after`.
pub fn optimize(
    env: &mut dyn BanditEnv,
    opts: &OptimizeOptions,
) -> Result<Option<BestAction>, OptimizeError> {
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let mut trainer = match (opts.resume, load_checkpoint(&opts.out_dir)?) {
        (true, Some(cp)) => Trainer::from_checkpoint(cp)?,
        _ => Trainer::new(opts.schedule, opts.reward, opts.seed)?,
    };
    env.resume_at(trainer.history.len());
    let every = opts.checkpoint_every.max(1);
    let mut pulls = 0usize;
    while !trainer.is_done() {
        if opts.stop_after.is_some_and(|n| pulls >= n) {
            save_checkpoint(&opts.out_dir, &trainer.checkpoint())?;
            return Ok(None);
        }
        if let Err(e) = trainer.step(env) {
            save_checkpoint(&opts.out_dir, &trainer.checkpoint())?;
            return Err(e.into());
        }
        pulls += 1;
        if trainer.history.len() % every == 0 {
            save_checkpoint(&opts.out_dir, &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&opts.out_dir, &trainer.checkpoint())?;
    let mut lines = String::new();
    for h in &trainer.history {
        lines.push_str(&serde_json::to_string(h).expect("history serializes"));
        lines.push('\n');
    }
    write_atomic(&opts.out_dir.join(HISTORY_FILE), lines.as_bytes())?;
    let index = trainer.state.best_action();
    let best = BestAction {
        index,
        action: StrategyAction::from_index(index).expect("arm index is in range"),
        theta: trainer.state.theta[index],
    };
    let mut text = serde_json::to_string_pretty(&best).expect("serializes");
    text.push('\n');
    write_atomic(&opts.out_dir.join(BEST_FILE), text.as_bytes())?;
    Ok(Some(best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(buyers: usize, sellers: usize) -> ExperimentConfig {
        let endpoints: BTreeMap<String, EndpointSpec> = (0..buyers.max(sellers))
            .map(|i| {
                (
                    format!("m{i}"),
                    EndpointSpec::Scripted(ScriptedSpec {
                        open_ratio: 0.7,
                        step_ratio: 0.05,
                        cap_slack: 0.0,
                        stall_exit: None,
                    }),
                )
            })
            .collect();
        let text = serde_json::json!({
            "catalog": "c.json",
            "endpoints": endpoints,
            "buyer_models": (0..buyers).map(|i| format!("m{i}")).collect::<Vec<_>>(),
            "seller_models": (0..sellers).map(|i| format!("m{i}")).collect::<Vec<_>>(),
        })
        .to_string();
        ExperimentConfig::from_json(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn defaults() {
        let c = cfg(1, 1);
        assert_eq!(c.trials_per_cell, 1);
        assert_eq!(c.t_max, 30);
        assert_eq!(c.budget_levels.len(), 5);
        assert_eq!(c.products_sample.count, 50);
        assert_eq!(c.abort_threshold, 0.05);
    }

    #[test]
    fn matrix_sizes() {
        let c = cfg(9, 9);
        let jobs = plan_jobs(&c, &(0..50).collect::<Vec<_>>()).unwrap();
        assert_eq!(jobs.len(), 20250);
        let ids: BTreeSet<_> = jobs.iter().map(|j| j.id.as_str()).collect();
        assert_eq!(ids.len(), jobs.len());
        let mut one = cfg(1, 1);
        one.budget_levels = vec![BudgetLevel::Mid];
        assert_eq!(plan_jobs(&one, &[3]).unwrap().len(), 1);
        assert!(matches!(plan_jobs(&one, &[]), Err(RunError::EmptyMatrix)));
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = plan_jobs(&cfg(2, 2), &[0, 1]).unwrap();
        let b = plan_jobs(&cfg(2, 2), &[0, 1]).unwrap();
        assert_eq!(a, b);
        let seeds: BTreeSet<u64> = a.iter().map(|j| j.seed).collect();
        assert_eq!(seeds.len(), a.len());
    }

    #[test]
    fn config_errors() {
        let base = |extra: serde_json::Value| {
            let mut v = serde_json::json!({
                "catalog": "c.json",
                "endpoints": {"a": {"kind": "scripted"}},
                "buyer_models": ["a"],
                "seller_models": ["a"],
            });
            for (k, x) in extra.as_object().unwrap() {
                v[k] = x.clone();
            }
            ExperimentConfig::from_json(&v.to_string(), Path::new("."))
        };
        assert!(base(serde_json::json!({})).is_ok());
        for bad in [
            serde_json::json!({"trials_per_cell": 0}),
            serde_json::json!({"parallelism": 0}),
            serde_json::json!({"buyer_models": ["nope"]}),
            serde_json::json!({"seller_models": ["a", "a"]}),
            serde_json::json!({"judge_backend": "remote"}),
            serde_json::json!({"buyer_strategy": 96}),
        ] {
            let e = base(bad.clone()).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn identity_ignores_execution_knobs() {
        let a = cfg(2, 2);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.parallelism = 16;
        assert_eq!(a.identity_hash(), b.identity_hash());
        b.run_seed = 9;
        assert_ne!(a.identity_hash(), b.identity_hash());
    }
}
