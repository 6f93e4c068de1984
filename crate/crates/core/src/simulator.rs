//! Experiment orchestration: data, clients, synchronous rounds, metrics,
//! checkpoints and result artifacts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ClientShard, ClusterLayout, Shift};
use crate::error::{Error, Result};
use crate::model::{self, Arch, ModelParams, OptimizerState};
use crate::protocols::{client_round, ClientRuntime, ProtocolKind, ProtocolSettings, RoundContext, RoundOutput};
use crate::rng::{derive_seed, Stream};
use crate::scalar::Scalar;
use crate::similarity::{sampling_probabilities, Provenance, SimilarityState, TauSchedule, TwoHopRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Label,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Rotation => "rotation",
            ShiftKind::Label => "label",
        }
    }
}

/// Full declarative description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Row label used when reports group runs.
    pub name: String,
    pub protocol: ProtocolKind,
    pub k: usize,
    pub layout: ClusterLayout,
    pub shift: ShiftKind,
    pub rounds: usize,
    pub epochs: usize,
    pub m: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub tau_max: f64,
    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub hidden_dim: usize,
    pub class_separation: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub pens_selection_rounds: usize,
    pub pens_top_fraction: f64,
    pub two_hop: bool,
    pub two_hop_rule: TwoHopRule,
}

impl ExperimentConfig {
    /// A configuration with every documented default filled in.
    pub fn new(protocol: ProtocolKind, layout: ClusterLayout, seed: u64) -> Self {
        let shift = match layout.clusters.first().map(|c| &c.shift) {
            Some(Shift::Labels(_)) => ShiftKind::Label,
            _ => ShiftKind::Rotation,
        };
        Self {
            name: protocol.name().to_string(),
            protocol,
            k: layout.total_clients(),
            layout,
            shift,
            rounds: 200,
            epochs: 3,
            m: 5,
            batch_size: 8,
            learning_rate: 0.01,
            tau: 30.0,
            tau_max: 30.0,
            train_n: 400,
            val_n: 100,
            test_n: 100,
            n_classes: 4,
            dim: 2,
            hidden_dim: 0,
            class_separation: datagen::DEFAULT_CLASS_SEPARATION,
            seed,
            output_dir: None,
            pens_selection_rounds: 20,
            pens_top_fraction: 0.5,
            two_hop: true,
            two_hop_rule: TwoHopRule::MostSimilar,
        }
    }

    pub fn arch(&self) -> Arch {
        Arch::new(self.dim, self.hidden_dim, self.n_classes)
    }

    pub fn tau_schedule(&self) -> TauSchedule {
        match self.protocol {
            ProtocolKind::DacVar => TauSchedule::sigmoid(self.tau_max, self.rounds),
            _ => TauSchedule::constant(self.tau),
        }
    }

    /// Every problem with this configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = [
            ("K", self.k),
            ("E", self.epochs),
            ("batch_size", self.batch_size),
            ("train_n", self.train_n),
            ("val_n", self.val_n),
            ("test_n", self.test_n),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if self.m == 0 && self.protocol != ProtocolKind::Local {
            p.push(format!("m must be >= 1 for protocol {}", self.protocol));
        }
        if self.n_classes < 2 {
            p.push(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.dim < 2 {
            p.push(format!("dim must be >= 2, got {}", self.dim));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            p.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            p.push(format!(
                "class_separation must be positive, got {}",
                self.class_separation
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            p.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tau_max.is_finite() && self.tau_max >= 1.0) {
            p.push(format!("tau_max must be >= 1, got {}", self.tau_max));
        }
        if !(self.pens_top_fraction > 0.0 && self.pens_top_fraction <= 1.0) {
            p.push(format!(
                "pens_top_fraction must be in (0, 1], got {}",
                self.pens_top_fraction
            ));
        }
        if self.protocol == ProtocolKind::Pens && self.pens_selection_rounds == 0 {
            p.push("pens_selection_rounds must be >= 1 for protocol pens".to_string());
        }
        p.extend(self.layout.validate(self.k, self.n_classes));
        for (c, spec) in self.layout.clusters.iter().enumerate() {
            let kind = match spec.shift {
                Shift::Rotation(_) => ShiftKind::Rotation,
                Shift::Labels(_) => ShiftKind::Label,
            };
            if kind != self.shift {
                p.push(format!(
                    "layout cluster {c} is a {} shift but shift = {}",
                    kind.name(),
                    self.shift.name()
                ));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Round settings; `m` is clamped to `K - 1`.
    pub fn settings(&self) -> ProtocolSettings {
        let max_m = self.k.saturating_sub(1);
        if self.m > max_m && self.protocol != ProtocolKind::Local {
            log::warn!("m = {} exceeds K - 1 = {max_m}; clamping", self.m);
        }
        ProtocolSettings {
            kind: self.protocol,
            m: if self.protocol == ProtocolKind::Local {
                0
            } else {
                self.m.min(max_m)
            },
            tau: self.tau_schedule(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            pens_selection_rounds: self.pens_selection_rounds,
            pens_top_fraction: self.pens_top_fraction,
            two_hop: self.two_hop,
            two_hop_rule: self.two_hop_rule,
        }
    }

    fn pool_size(&self) -> usize {
        let per_client = self.train_n + self.val_n + self.test_n;
        match self.shift {
            ShiftKind::Rotation => self.k * per_client,
            ShiftKind::Label => {
                let per_class: usize = self
                    .layout
                    .clusters
                    .iter()
                    .map(|c| match &c.shift {
                        Shift::Labels(set) => (c.clients * per_client).div_ceil(set.len().max(1)),
                        Shift::Rotation(_) => c.clients * per_client,
                    })
                    .sum();
                (per_class + 1) * self.n_classes
            }
        }
    }

    /// Builds the client shards this configuration describes.
    pub fn build_shards<F: Scalar>(&self) -> Result<Vec<ClientShard<F>>> {
        let pool = datagen::generate_base_task_with::<F>(
            self.n_classes,
            self.dim,
            self.pool_size(),
            self.class_separation,
            derive_seed(self.seed, 0, 0, Stream::Data),
        )?;
        datagen::partition_clients(
            &pool,
            &self.layout,
            self.train_n,
            self.val_n,
            self.test_n,
            derive_seed(self.seed, 0, 0, Stream::Partition),
        )
    }
}

/// One merge: client `src` averaged in the model of client `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub round: usize,
    pub src: usize,
    pub dst: usize,
}

/// `counts[x][y]` = rounds in which client `x` merged client `y`'s model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLog {
    pub counts: Vec<Vec<u32>>,
}

impl CommLog {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn record(&mut self, event: &CommEvent) {
        self.counts[event.src][event.dst] += 1;
    }

    pub fn row_sum(&self, x: usize) -> u64 {
        self.counts[x].iter().map(|&c| c as u64).sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.counts.len()).map(|x| self.row_sum(x)).sum()
    }

    /// Fraction of all merges that stayed inside the source's cluster.
    pub fn in_cluster_fraction(&self, cluster_of: &[usize]) -> f64 {
        let mut inside = 0u64;
        let mut total = 0u64;
        for (x, row) in self.counts.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                total += c as u64;
                if cluster_of[x] == cluster_of[y] {
                    inside += c as u64;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        }
    }

    /// CSV with one row per source client, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per-round, per-client diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub client_id: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Probability mass the round's sampling distribution put on same-cluster
    /// peers; `None` when the client did not sample.
    pub in_cluster_probability_mass: Option<f64>,
    pub tau_used: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: usize,
    pub cluster_id: usize,
    pub test_accuracy: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_means: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the cluster means.
    pub std: f64,
}

impl ClusterSummary {
    pub fn from_clients(clients: &[ClientResult], n_clusters: usize) -> Self {
        let mut sums = vec![0.0; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for c in clients {
            sums[c.cluster_id] += c.test_accuracy;
            counts[c.cluster_id] += 1;
        }
        let cluster_means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        let (mean, std) = mean_std(&cluster_means);
        Self {
            cluster_means,
            mean,
            std,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientResult>,
    pub summary: ClusterSummary,
    pub comm_log: CommLog,
    pub metrics: Vec<MetricsRecord>,
    /// In-cluster sampling mass of each client's distribution after the last round.
    pub final_in_cluster_mass: Vec<Option<f64>>,
}

impl ExperimentResult {
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("client_id,cluster_id,test_accuracy,best_val_loss\n");
        for c in &self.clients {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                c.client_id, c.cluster_id, c.test_accuracy, c.best_val_loss
            );
        }
        out
    }

    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.metrics {
            out.push_str(&serde_json::to_string(r).expect("metrics record serializes"));
            out.push('\n');
        }
        out
    }

    /// Mean of [`Self::final_in_cluster_mass`] over clients that sample.
    pub fn mean_final_in_cluster_mass(&self) -> Option<f64> {
        let vals: Vec<f64> = self.final_in_cluster_mass.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Writes `accuracy.csv`, `heatmap.csv`, `metrics.jsonl` and `config.echo`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("accuracy.csv", self.accuracy_csv()),
            ("heatmap.csv", self.comm_log.to_csv()),
            ("metrics.jsonl", self.metrics_jsonl()),
            ("config.echo", crate::config::echo(&self.config)),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// A run in progress. Advance with [`Simulation::step`], persist with
/// [`Simulation::checkpoint`], finish with [`Simulation::finish`].
pub struct Simulation<F> {
    config: ExperimentConfig,
    settings: ProtocolSettings,
    clients: Vec<ClientRuntime<F>>,
    round: usize,
    comm_log: CommLog,
    metrics: Vec<MetricsRecord>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<F: Scalar> Simulation<F> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let shards = config.build_shards::<F>()?;
        let arch = config.arch();
        let lr = F::lit(config.learning_rate);
        let clients = shards
            .into_iter()
            .map(|shard| {
                let seed = derive_seed(config.seed, shard.client_id as u64, 0, Stream::Init);
                ClientRuntime::new(Arc::new(shard), model::init_params(arch, seed), lr, config.k)
            })
            .collect();
        Ok(Self {
            settings: config.settings(),
            comm_log: CommLog::new(config.k),
            clients,
            round: 0,
            metrics: Vec::new(),
            pool: None,
            config,
        })
    }

    /// Runs each round's client updates on `workers` threads (1 = inline).
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.config.rounds
    }

    pub fn clients(&self) -> &[ClientRuntime<F>] {
        &self.clients
    }

    pub fn comm_log(&self) -> &CommLog {
        &self.comm_log
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    /// Runs one synchronous round and commits it.
    pub fn step(&mut self) -> Result<()> {
        let ctx = RoundContext {
            clients: &self.clients,
            round: self.round,
            settings: &self.settings,
            seed: self.config.seed,
        };
        let k = self.clients.len();
        let outputs: Vec<Result<RoundOutput<F>>> = match &self.pool {
            Some(pool) => pool.install(|| (0..k).into_par_iter().map(|i| client_round(&ctx, i)).collect()),
            None => (0..k).map(|i| client_round(&ctx, i)).collect(),
        };
        let outputs: Vec<RoundOutput<F>> = outputs.into_iter().collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(k);
        for out in outputs {
            for e in &out.events {
                self.comm_log.record(e);
            }
            self.metrics.push(out.record);
            next.push(out.client);
        }
        self.clients = next;
        self.round += 1;
        Ok(())
    }

    pub fn run_until(&mut self, round: usize) -> Result<()> {
        while self.round < round.min(self.config.rounds) {
            self.step()?;
        }
        Ok(())
    }

    /// Same-cluster probability mass of client `i`'s next sampling distribution.
    fn current_in_cluster_mass(&self, i: usize) -> Result<Option<f64>> {
        if !self.settings.kind.is_dac() || self.clients.len() < 2 {
            return Ok(self
                .metrics
                .iter()
                .rev()
                .find(|r| r.client_id == i)
                .and_then(|r| r.in_cluster_probability_mass));
        }
        let tau = self.settings.tau.tau_at(self.round);
        let p = sampling_probabilities(&self.clients[i].similarity, F::lit(tau))?;
        let cluster = self.clients[i].cluster();
        Ok(Some(
            p.iter()
                .enumerate()
                .filter(|&(j, _)| j != i && self.clients[j].cluster() == cluster)
                .map(|(_, v)| v.as_f64())
                .sum(),
        ))
    }

    /// Runs any remaining rounds and evaluates every best snapshot on its test set.
    pub fn finish(mut self) -> Result<ExperimentResult> {
        self.run_until(self.config.rounds)?;
        let mut clients = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let snapshot = if c.best_val_loss.is_finite() {
                &c.best_params
            } else {
                &c.params
            };
            let eval = model::evaluate(snapshot, &c.shard.test)?;
            clients.push(ClientResult {
                client_id: c.id(),
                cluster_id: c.cluster(),
                test_accuracy: eval.accuracy.as_f64(),
                best_val_loss: c.best_val_loss.as_f64(),
            });
        }
        let final_in_cluster_mass = (0..self.clients.len())
            .map(|i| self.current_in_cluster_mass(i))
            .collect::<Result<_>>()?;
        Ok(ExperimentResult {
            summary: ClusterSummary::from_clients(&clients, self.config.layout.clusters.len()),
            clients,
            comm_log: self.comm_log,
            metrics: self.metrics,
            final_in_cluster_mass,
            config: self.config,
        })
    }
}

/// Builds, runs and evaluates one experiment; writes artifacts when the
/// config names an output directory.
pub fn run_experiment<F: Scalar>(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with_workers::<F>(config, 1)
}

pub fn run_experiment_with_workers<F: Scalar>(config: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    let result = Simulation::<F>::new(config.clone())?.with_workers(workers)?.finish()?;
    if let Some(dir) = &config.output_dir {
        result.write_artifacts(dir)?;
    }
    Ok(result)
}

/// One run per value of `param`, all with the base seed (unless the swept
/// parameter is the seed). With an output directory each run writes into
/// `<output_dir>/<param>=<value>`.
pub fn run_sweep<F: Scalar>(
    base: &ExperimentConfig,
    param: &str,
    values: &[f64],
    workers: usize,
) -> Result<Vec<ExperimentResult>> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| {
            let mut cfg = crate::config::with_param(base, param, v)?;
            cfg.output_dir = base.output_dir.as_ref().map(|d| d.join(format!("{param}={v}")));
            Ok(cfg)
        })
        .collect::<Result<_>>()?;
    configs
        .iter()
        .map(|cfg| run_experiment_with_workers::<F>(cfg, workers))
        .collect()
}

const CHECKPOINT_FORMAT: &str = "dacsim-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SparseSimilarity<F> {
    /// `(peer, score, provenance, last measured round)` for non-unknown peers.
    entries: Vec<(usize, F, Provenance, Option<usize>)>,
    history: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ClientCheckpoint<F> {
    params: ModelParams<F>,
    optimizer: OptimizerState<F>,
    similarity: SparseSimilarity<F>,
    best_params: ModelParams<F>,
    /// `None` until the first validation.
    best_val_loss: Option<F>,
    pens_neighbors: Option<BTreeSet<usize>>,
    pens_selection_counts: Vec<(usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile<F> {
    format: String,
    version: u32,
    scalar: String,
    config: ExperimentConfig,
    round: usize,
    clients: Vec<ClientCheckpoint<F>>,
    /// Non-zero `(src, dst, count)` cells.
    comm_log: Vec<(usize, usize, u32)>,
    metrics: Vec<MetricsRecord>,
}

fn scalar_name<F: Scalar>() -> &'static str {
    std::any::type_name::<F>()
}

impl<F: Scalar> Simulation<F> {
    /// Serializes the complete run state. Random streams are derived from
    /// `(seed, client, round)`, so the seed and round restore them.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let clients = self
            .clients
            .iter()
            .map(|c| ClientCheckpoint {
                params: c.params.clone(),
                optimizer: c.optimizer.clone(),
                similarity: SparseSimilarity {
                    entries: (0..c.similarity.len())
                        .filter(|&j| c.similarity.provenance[j] != Provenance::Unknown)
                        .map(|j| {
                            (
                                j,
                                c.similarity.scores[j],
                                c.similarity.provenance[j],
                                c.similarity.last_measured_round[j],
                            )
                        })
                        .collect(),
                    history: c.similarity.history.iter().copied().collect(),
                },
                best_params: c.best_params.clone(),
                best_val_loss: c.best_val_loss.is_finite().then_some(c.best_val_loss),
                pens_neighbors: c.pens_neighbors.clone(),
                pens_selection_counts: c
                    .pens_selection_counts
                    .iter()
                    .enumerate()
                    .filter(|&(_, &n)| n > 0)
                    .map(|(j, &n)| (j, n))
                    .collect(),
            })
            .collect();
        let comm_log = self
            .comm_log
            .counts
            .iter()
            .enumerate()
            .flat_map(|(x, row)| {
                row.iter()
                    .enumerate()
                    .filter(|&(_, &c)| c > 0)
                    .map(move |(y, &c)| (x, y, c))
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scalar: scalar_name::<F>().to_string(),
            config: self.config.clone(),
            round: self.round,
            clients,
            comm_log,
            metrics: self.metrics.clone(),
        };
        let body = serde_json::to_vec(&file).map_err(|e| Error::ingestion(path, None, e.to_string()))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Restores a run from [`Simulation::checkpoint`] output. Shards are
    /// regenerated from the stored config. Nothing is returned unless the
    /// whole file validates.
    pub fn resume(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::ingestion(path, None, reason);
        let file: CheckpointFile<F> =
            serde_json::from_slice(&bytes).map_err(|e| bad(format!("unreadable checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                file.format, file.version
            )));
        }
        if file.scalar != scalar_name::<F>() {
            return Err(bad(format!(
                "checkpoint scalar {} does not match {}",
                file.scalar,
                scalar_name::<F>()
            )));
        }
        let config = file.config;
        config
            .validate()
            .map_err(|e| bad(format!("stored config invalid: {e}")))?;
        let k = config.k;
        let arch = config.arch();
        if file.clients.len() != k || file.round > config.rounds {
            return Err(bad(format!(
                "checkpoint holds {} clients at round {} for K = {k}, T = {}",
                file.clients.len(),
                file.round,
                config.rounds
            )));
        }
        let mut comm_log = CommLog::new(k);
        for &(x, y, c) in &file.comm_log {
            if x >= k || y >= k || x == y {
                return Err(bad(format!("comm log cell ({x}, {y}) invalid for K = {k}")));
            }
            comm_log.counts[x][y] = c;
        }

        let shards = config.build_shards::<F>()?;
        let mut clients = Vec::with_capacity(k);
        for (shard, cp) in shards.into_iter().zip(file.clients) {
            let i = shard.client_id;
            let n = arch.param_count();
            if cp.params.arch != arch
                || cp.best_params.arch != arch
                || cp.params.values.len() != n
                || cp.best_params.values.len() != n
                || cp.optimizer.first_moment.len() != n
                || cp.optimizer.second_moment.len() != n
            {
                return Err(bad(format!("client {i}: architecture mismatch with {arch:?}")));
            }
            let mut similarity = SimilarityState::new(i, k);
            for (j, score, prov, last) in cp.similarity.entries {
                if j >= k || j == i {
                    return Err(bad(format!("client {i}: similarity entry {j} invalid")));
                }
                similarity.scores[j] = score;
                similarity.provenance[j] = prov;
                similarity.last_measured_round[j] = last;
            }
            similarity.history = cp.similarity.history.into_iter().collect();
            if similarity.history.iter().any(|&j| j >= k) {
                return Err(bad(format!("client {i}: history out of range")));
            }
            let mut counts = vec![0u32; k];
            for (j, n) in cp.pens_selection_counts {
                *counts
                    .get_mut(j)
                    .ok_or_else(|| bad(format!("client {i}: PENS count index {j}")))? = n;
            }
            clients.push(ClientRuntime {
                shard: Arc::new(shard),
                params: cp.params,
                optimizer: cp.optimizer,
                similarity,
                best_params: cp.best_params,
                best_val_loss: cp.best_val_loss.unwrap_or_else(F::infinity),
                pens_neighbors: cp.pens_neighbors,
                pens_selection_counts: counts,
            });
        }
        Ok(Self {
            settings: config.settings(),
            clients,
            round: file.round,
            comm_log,
            metrics: file.metrics,
            pool: None,
            config,
        })
    }
}
