//! One synchronous communication round per strategy.
//!
//! Every round reads an immutable snapshot of all clients (the state after
//! the previous round) and produces the next state of a single client. The
//! simulator commits all new states together at the round barrier, so clients
//! may be stepped in any order or in parallel.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::ClientShard;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, OptimizerState};
use crate::rng::{self, SimRng, Stream};
use crate::scalar::Scalar;
use crate::similarity::{
    propagate_two_hop, sampling_probabilities, weighted_sample_without_replacement, SimilarityState, TauSchedule,
    TwoHopRule,
};
use crate::simulator::{CommEvent, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Dac,
    DacVar,
    Random,
    Pens,
    Oracle,
    Local,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::Dac,
        ProtocolKind::DacVar,
        ProtocolKind::Random,
        ProtocolKind::Pens,
        ProtocolKind::Oracle,
        ProtocolKind::Local,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Dac => "dac",
            ProtocolKind::DacVar => "dac_var",
            ProtocolKind::Random => "random",
            ProtocolKind::Pens => "pens",
            ProtocolKind::Oracle => "oracle",
            ProtocolKind::Local => "local",
        }
    }

    pub fn is_dac(self) -> bool {
        matches!(self, ProtocolKind::Dac | ProtocolKind::DacVar)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = ProtocolKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown protocol `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Knobs shared by every round of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSettings {
    pub kind: ProtocolKind,
    /// Peers per round, already clamped to `K - 1`.
    pub m: usize,
    pub tau: TauSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub pens_selection_rounds: usize,
    pub pens_top_fraction: f64,
    pub two_hop: bool,
    pub two_hop_rule: TwoHopRule,
}

impl ProtocolSettings {
    /// Peers marked per PENS selection round.
    pub fn pens_top_count(&self) -> usize {
        (self.pens_top_fraction * self.m as f64).floor() as usize
    }
}

/// Everything one client carries between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRuntime<F> {
    pub shard: Arc<ClientShard<F>>,
    pub params: ModelParams<F>,
    pub optimizer: OptimizerState<F>,
    pub similarity: SimilarityState<F>,
    pub best_params: ModelParams<F>,
    pub best_val_loss: F,
    /// Fixed after the PENS selection phase; `None` before.
    pub pens_neighbors: Option<BTreeSet<usize>>,
    pub pens_selection_counts: Vec<u32>,
}

impl<F: Scalar> ClientRuntime<F> {
    pub fn new(shard: Arc<ClientShard<F>>, params: ModelParams<F>, learning_rate: F, k: usize) -> Self {
        let owner = shard.client_id;
        Self {
            optimizer: OptimizerState::new(params.values.len(), learning_rate),
            similarity: SimilarityState::new(owner, k),
            best_params: params.clone(),
            best_val_loss: F::infinity(),
            pens_neighbors: None,
            pens_selection_counts: vec![0; k],
            shard,
            params,
        }
    }

    pub fn id(&self) -> usize {
        self.shard.client_id
    }

    pub fn cluster(&self) -> usize {
        self.shard.cluster_id
    }

    pub fn train_count(&self) -> usize {
        self.shard.train.len()
    }
}

/// Sample-count weighted coordinate mean of `own` and `received`.
pub fn fedavg_merge<F: Scalar>(
    own: (&ModelParams<F>, usize),
    received: &[(&ModelParams<F>, usize)],
) -> Result<ModelParams<F>> {
    let all: Vec<(&ModelParams<F>, usize)> = std::iter::once(own).chain(received.iter().copied()).collect();
    for (p, n) in &all {
        if p.arch != own.0.arch || p.values.len() != own.0.values.len() {
            return Err(Error::contract(format!(
                "cannot merge arch {:?} into {:?}",
                p.arch, own.0.arch
            )));
        }
        if *n == 0 {
            return Err(Error::contract("merge weight (sample count) must be positive"));
        }
    }
    let total: usize = all.iter().map(|(_, n)| n).sum();
    let total = F::from_usize_lossy(total);
    let weights: Vec<F> = all.iter().map(|(_, n)| F::from_usize_lossy(*n) / total).collect();
    let mut values = vec![F::zero(); own.0.values.len()];
    for (c, v) in values.iter_mut().enumerate() {
        let mut acc = F::zero();
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for ((p, _), &w) in all.iter().zip(&weights) {
            let x = p.values[c];
            acc = acc + w * x;
            lo = lo.min(x);
            hi = hi.max(x);
        }
        // rounding can step an ulp outside the inputs' range
        *v = acc.max(lo).min(hi);
    }
    Ok(ModelParams {
        arch: own.0.arch,
        values,
    })
}

/// Snapshot of all clients at the start of `round`.
pub struct RoundContext<'a, F> {
    pub clients: &'a [ClientRuntime<F>],
    pub round: usize,
    pub settings: &'a ProtocolSettings,
    pub seed: u64,
}

impl<F: Scalar> RoundContext<'_, F> {
    pub fn k(&self) -> usize {
        self.clients.len()
    }

    fn sampling_rng(&self, i: usize) -> SimRng {
        rng::rng_for(self.seed, i, self.round, Stream::Sampling)
    }

    fn training_rng(&self, i: usize) -> SimRng {
        rng::rng_for(self.seed, i, self.round, Stream::Training)
    }

    fn in_cluster_mass(&self, i: usize, probabilities: &[F]) -> f64 {
        let cluster = self.clients[i].cluster();
        probabilities
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i && self.clients[j].cluster() == cluster)
            .map(|(_, p)| p.as_f64())
            .sum()
    }

    fn uniform_over(&self, members: impl IntoIterator<Item = usize>) -> Vec<F> {
        let mut p = vec![F::zero(); self.k()];
        let members: Vec<usize> = members.into_iter().collect();
        if members.is_empty() {
            return p;
        }
        let w = F::one() / F::from_usize_lossy(members.len());
        for j in members {
            p[j] = w;
        }
        p
    }
}

/// New state of one client plus what it communicated this round.
#[derive(Debug, Clone)]
pub struct RoundOutput<F> {
    pub client: ClientRuntime<F>,
    pub events: Vec<CommEvent>,
    pub record: MetricsRecord,
}

fn with_context(err: Error, client: usize, round: usize) -> Error {
    match err {
        Error::Diverged(reason) => Error::Training { client, round, reason },
        other => other,
    }
}

/// Merges with `peers`, trains locally, updates the best snapshot.
fn merge_train_evaluate<F: Scalar>(
    ctx: &RoundContext<'_, F>,
    mut client: ClientRuntime<F>,
    peers: &[usize],
    in_cluster_probability_mass: Option<f64>,
    tau_used: Option<f64>,
) -> Result<RoundOutput<F>> {
    let i = client.id();
    if !peers.is_empty() {
        let received: Vec<(&ModelParams<F>, usize)> = peers
            .iter()
            .map(|&k| (&ctx.clients[k].params, ctx.clients[k].train_count()))
            .collect();
        client.params = fedavg_merge((&client.params, client.train_count()), &received)?;
    }
    let mut rng = ctx.training_rng(i);
    let shard = Arc::clone(&client.shard);
    model::train_local(
        &mut client.params,
        &shard.train,
        ctx.settings.epochs,
        ctx.settings.batch_size,
        &mut client.optimizer,
        &mut rng,
    )
    .map_err(|e| with_context(e, i, ctx.round))?;
    if !client.params.is_finite() {
        return Err(Error::Training {
            client: i,
            round: ctx.round,
            reason: "parameters became non-finite".into(),
        });
    }
    let eval = model::evaluate(&client.params, &shard.val)?;
    if !eval.loss.is_finite() {
        return Err(Error::Training {
            client: i,
            round: ctx.round,
            reason: format!("validation loss is {}", eval.loss),
        });
    }
    if eval.loss < client.best_val_loss {
        client.best_val_loss = eval.loss;
        client.best_params = client.params.clone();
    }
    let events = peers
        .iter()
        .map(|&dst| CommEvent {
            round: ctx.round,
            src: i,
            dst,
        })
        .collect();
    Ok(RoundOutput {
        record: MetricsRecord {
            round: ctx.round,
            client_id: i,
            val_loss: eval.loss.as_f64(),
            val_accuracy: eval.accuracy.as_f64(),
            in_cluster_probability_mass,
            tau_used,
        },
        client,
        events,
    })
}

/// Similarity-weighted sampling, scoring, two-hop propagation, merge, train.
pub fn dac_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    let mut client = ctx.clients[i].clone();
    if ctx.k() < 2 || ctx.settings.m == 0 {
        return merge_train_evaluate(ctx, client, &[], None, None);
    }
    let tau = ctx.settings.tau.tau_at(ctx.round);
    let probabilities = sampling_probabilities(&client.similarity, F::lit(tau))?;
    let mass = ctx.in_cluster_mass(i, &probabilities);
    let peers = weighted_sample_without_replacement(&probabilities, ctx.settings.m, &mut ctx.sampling_rng(i))?;

    for &k in &peers {
        let loss = model::dataset_loss(&client.params, &ctx.clients[k].shard.train)?;
        client.similarity.update_measured(k, loss, ctx.round)?;
    }
    if ctx.settings.two_hop {
        let snapshot: Vec<&SimilarityState<F>> = ctx.clients.iter().map(|c| &c.similarity).collect();
        propagate_two_hop(&mut client.similarity, &snapshot, ctx.settings.two_hop_rule);
    }
    merge_train_evaluate(ctx, client, &peers, Some(mass), Some(tau))
}

/// Uniform peer sampling without similarity bookkeeping.
pub fn random_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    let client = ctx.clients[i].clone();
    let probabilities = ctx.uniform_over((0..ctx.k()).filter(|&j| j != i));
    let m = ctx.settings.m.min(ctx.k() - 1);
    let mass = (ctx.k() > 1).then(|| ctx.in_cluster_mass(i, &probabilities));
    let peers = weighted_sample_without_replacement(&probabilities, m, &mut ctx.sampling_rng(i))?;
    merge_train_evaluate(ctx, client, &peers, mass, None)
}

/// Uniform sampling restricted to the ground-truth cluster.
pub fn oracle_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    let client = ctx.clients[i].clone();
    let cluster = client.cluster();
    let members: Vec<usize> = (0..ctx.k())
        .filter(|&j| j != i && ctx.clients[j].cluster() == cluster)
        .collect();
    let m = ctx.settings.m.min(members.len());
    let probabilities = ctx.uniform_over(members);
    let peers = weighted_sample_without_replacement(&probabilities, m, &mut ctx.sampling_rng(i))?;
    merge_train_evaluate(ctx, client, &peers, Some(1.0), None)
}

pub fn local_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    merge_train_evaluate(ctx, ctx.clients[i].clone(), &[], None, None)
}

/// Samples `m` peers uniformly, scores each peer's model on `i`'s training
/// data and returns `(sampled, marked)` where `marked` holds the
/// `top_count` lowest-loss peers (ties to the lower id).
fn pens_score<F: Scalar>(
    clients: &[ClientRuntime<F>],
    i: usize,
    m: usize,
    top_count: usize,
    rng: &mut SimRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = clients.len();
    let mut probabilities = vec![F::zero(); k];
    for (j, p) in probabilities.iter_mut().enumerate() {
        if j != i {
            *p = F::one();
        }
    }
    let sampled = weighted_sample_without_replacement(&probabilities, m.min(k.saturating_sub(1)), rng)?;
    let mut scored: Vec<(F, usize)> = sampled
        .iter()
        .map(|&j| Ok((model::dataset_loss(&clients[j].params, &clients[i].shard.train)?, j)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let marked = scored.iter().take(top_count).map(|&(_, j)| j).collect();
    Ok((sampled, marked))
}

/// Peers selected more often than uniform sampling would select them.
pub fn pens_neighbors_from_counts(counts: &[u32], owner: usize, rounds: usize, top_count: usize) -> BTreeSet<usize> {
    let k = counts.len();
    if k < 2 {
        return BTreeSet::new();
    }
    let expected = rounds as f64 * top_count as f64 / (k - 1) as f64;
    counts
        .iter()
        .enumerate()
        .filter(|&(j, &c)| j != owner && c as f64 > expected)
        .map(|(j, _)| j)
        .collect()
}

/// Runs `rounds` selection rounds against fixed peer models and returns the
/// resulting neighbour set. Models are not updated.
pub fn pens_select<F: Scalar>(
    clients: &[ClientRuntime<F>],
    i: usize,
    rounds: usize,
    m: usize,
    top_fraction: f64,
    rng: &mut SimRng,
) -> Result<BTreeSet<usize>> {
    let top_count = (top_fraction * m as f64).floor() as usize;
    let mut counts = vec![0u32; clients.len()];
    for _ in 0..rounds {
        let (_, marked) = pens_score(clients, i, m, top_count, rng)?;
        for j in marked {
            counts[j] += 1;
        }
    }
    Ok(pens_neighbors_from_counts(&counts, i, rounds, top_count))
}

/// PENS neighbour-selection phase: score sampled peers, count the best ones,
/// merge with the best ones.
pub fn pens_selection_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    let mut client = ctx.clients[i].clone();
    if ctx.k() < 2 {
        return merge_train_evaluate(ctx, client, &[], None, None);
    }
    let (_, marked) = pens_score(
        ctx.clients,
        i,
        ctx.settings.m,
        ctx.settings.pens_top_count(),
        &mut ctx.sampling_rng(i),
    )?;
    for &j in &marked {
        client.pens_selection_counts[j] += 1;
    }
    let probabilities = ctx.uniform_over((0..ctx.k()).filter(|&j| j != i));
    let mass = ctx.in_cluster_mass(i, &probabilities);
    merge_train_evaluate(ctx, client, &marked, Some(mass), None)
}

/// PENS communication phase: uniform sampling inside the fixed neighbour set.
pub fn pens_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    let mut client = ctx.clients[i].clone();
    let neighbors = match &client.pens_neighbors {
        Some(n) => n.clone(),
        None => {
            let n = pens_neighbors_from_counts(
                &client.pens_selection_counts,
                i,
                ctx.settings.pens_selection_rounds,
                ctx.settings.pens_top_count(),
            );
            if n.is_empty() {
                log::warn!("client {i}: PENS selected no neighbours, falling back to local training");
            }
            client.pens_neighbors = Some(n.clone());
            n
        }
    };
    if neighbors.is_empty() {
        return merge_train_evaluate(ctx, client, &[], None, None);
    }
    let m = ctx.settings.m.min(neighbors.len());
    let probabilities = ctx.uniform_over(neighbors);
    let mass = ctx.in_cluster_mass(i, &probabilities);
    let peers = weighted_sample_without_replacement(&probabilities, m, &mut ctx.sampling_rng(i))?;
    merge_train_evaluate(ctx, client, &peers, Some(mass), None)
}

/// Dispatches to the right round function for the configured protocol.
pub fn client_round<F: Scalar>(ctx: &RoundContext<'_, F>, i: usize) -> Result<RoundOutput<F>> {
    match ctx.settings.kind {
        ProtocolKind::Dac | ProtocolKind::DacVar => dac_round(ctx, i),
        ProtocolKind::Random => random_round(ctx, i),
        ProtocolKind::Oracle => oracle_round(ctx, i),
        ProtocolKind::Local => local_round(ctx, i),
        ProtocolKind::Pens if ctx.round < ctx.settings.pens_selection_rounds => pens_selection_round(ctx, i),
        ProtocolKind::Pens => pens_round(ctx, i),
    }
}
