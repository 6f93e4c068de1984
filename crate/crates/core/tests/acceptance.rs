//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.
//!
//! Build with `--release` for representative runtimes; the runtime limits are
//! enforced either way.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use dacsim::datagen::{ClusterLayout, ClusterSpec, Sample, Shift};
use dacsim::model::{self, Arch, ModelParams};
use dacsim::protocols::fedavg_merge;
use dacsim::rng;
use dacsim::similarity::{sampling_probabilities, weighted_sample_without_replacement, SimilarityState, TauSchedule};
use dacsim::simulator::{run_experiment, CommLog, Simulation};
use dacsim::{ExperimentConfig, ExperimentResult, ProtocolKind};

type Outcome = Result<String, String>;

fn layout(spec: &[(f64, usize)]) -> ClusterLayout {
    ClusterLayout::new(
        spec.iter()
            .map(|&(degrees, clients)| ClusterSpec {
                shift: Shift::Rotation(degrees),
                clients,
            })
            .collect(),
    )
}

/// Small-data rotated Gaussian task where collaboration pays off but
/// merging with the wrong cluster hurts.
fn task(protocol: ProtocolKind, layout: ClusterLayout, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(protocol, layout, seed);
    c.rounds = 60;
    c.m = 3;
    c.tau = 30.0;
    c.dim = 20;
    c.train_n = 30;
    c.val_n = 100;
    c.test_n = 100;
    c.class_separation = 3.0;
    c.learning_rate = 0.05;
    c.batch_size = 4;
    c.epochs = 5;
    c
}

fn heterogeneous(protocol: ProtocolKind, seed: u64) -> ExperimentConfig {
    task(protocol, layout(&[(0.0, 14), (180.0, 4), (350.0, 1), (10.0, 1)]), seed)
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult, String> {
    run_experiment::<f64>(cfg).map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed > limit {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::seeded(2024);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for instance in 0..50 {
        let arch = Arch::new(
            rng.random_range(1..=6),
            rng.random_range(0..=8),
            rng.random_range(2..=5),
        );
        let n = rng.random_range(1..=8);
        let batch: Vec<Sample<f64>> = (0..n)
            .map(|_| Sample {
                features: (0..arch.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..arch.n_classes),
            })
            .collect();
        let mut params: ModelParams<f64> = model::init_params(arch, 7 + instance);
        for v in &mut params.values {
            *v += rng.random_range(-0.5..0.5);
        }
        let (_, grad) = model::loss_and_grad(&params, &batch).map_err(|e| e.to_string())?;
        for j in 0..params.values.len() {
            let orig = params.values[j];
            params.values[j] = orig + h;
            let up = model::loss_and_grad(&params, &batch).map_err(|e| e.to_string())?.0;
            params.values[j] = orig - h;
            let down = model::loss_and_grad(&params, &batch).map_err(|e| e.to_string())?.0;
            params.values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = grad[j].abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((grad[j] - numeric).abs() / scale);
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn softmax_closed_form() -> Outcome {
    let mut st = SimilarityState::<f64>::new(0, 3);
    st.update_measured(1, 1.0, 0).map_err(|e| e.to_string())?;
    st.update_measured(2, 2.0, 0).map_err(|e| e.to_string())?;
    let p = sampling_probabilities(&st, 30.0).map_err(|e| e.to_string())?;
    let rel = (p[1] / p[2] / 15f64.exp() - 1.0).abs();
    if rel >= 1e-6 {
        return Err(format!("p_a/p_b off by {rel:.2e} relative"));
    }
    let mut uniform = SimilarityState::<f64>::new(2, 6);
    for j in [0, 1, 3, 4, 5] {
        uniform.update_measured(j, 0.8, 0).map_err(|e| e.to_string())?;
    }
    let p = sampling_probabilities(&uniform, 30.0).map_err(|e| e.to_string())?;
    let dev = p
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != 2)
        .map(|(_, v)| (v - 0.2).abs())
        .fold(0.0, f64::max);
    if dev >= 1e-12 {
        return Err(format!("uniform scores deviate by {dev:.2e}"));
    }
    Ok(format!("ratio error {rel:.2e}, uniform deviation {dev:.2e}"))
}

/// Exact probability of each ordered draw sequence under sequential sampling.
fn sequence_probabilities(p: &[f64], m: usize) -> BTreeMap<Vec<usize>, f64> {
    fn go(p: &[f64], m: usize, prefix: &mut Vec<usize>, prob: f64, out: &mut BTreeMap<Vec<usize>, f64>) {
        if prefix.len() == m {
            out.insert(prefix.clone(), prob);
            return;
        }
        let remaining: f64 = (0..p.len()).filter(|j| !prefix.contains(j)).map(|j| p[j]).sum();
        for j in 0..p.len() {
            if prefix.contains(&j) || p[j] == 0.0 {
                continue;
            }
            prefix.push(j);
            go(p, m, prefix, prob * p[j] / remaining, out);
            prefix.pop();
        }
    }
    let mut out = BTreeMap::new();
    go(p, m, &mut Vec::new(), 1.0, &mut out);
    out
}

fn sampling_oracle() -> Outcome {
    let start = Instant::now();
    let trials = 100_000;
    let mut worst_z = 0.0f64;
    for (case, (p, m)) in [
        (vec![0.1, 0.2, 0.3, 0.4], 2),
        (vec![0.0, 0.5, 0.3, 0.2], 2),
        (vec![0.4, 0.3, 0.2, 0.1], 3),
    ]
    .into_iter()
    .enumerate()
    {
        let exact = sequence_probabilities(&p, m);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut rng = rng::seeded(500 + case as u64);
        for _ in 0..trials {
            let draw = weighted_sample_without_replacement(&p, m, &mut rng).map_err(|e| e.to_string())?;
            *counts.entry(draw).or_default() += 1;
        }
        if let Some(seq) = counts.keys().find(|s| !exact.contains_key(*s)) {
            return Err(format!("impossible sequence {seq:?} drawn from {p:?}"));
        }
        for (seq, &q) in &exact {
            let observed = counts.get(seq).copied().unwrap_or(0) as f64;
            let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
            let z = (observed - trials as f64 * q).abs() / sigma;
            worst_z = worst_z.max(z);
            if z > 3.0 {
                return Err(format!(
                    "sequence {seq:?} of {p:?}: {observed} vs {:.0} ({z:.2} sigma)",
                    trials as f64 * q
                ));
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("worst deviation {worst_z:.2} sigma"))
}

fn subtract(after: &CommLog, before: &CommLog) -> CommLog {
    let mut out = after.clone();
    for (row, prev) in out.counts.iter_mut().zip(&before.counts) {
        for (c, p) in row.iter_mut().zip(prev) {
            *c -= p;
        }
    }
    out
}

fn self_organization() -> Outcome {
    let start = Instant::now();
    let cfg = task(ProtocolKind::Dac, layout(&[(0.0, 10), (180.0, 10)]), 1);
    let mut sim = Simulation::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    sim.run_until(cfg.rounds - 20).map_err(|e| e.to_string())?;
    let before = sim.comm_log().clone();
    let cluster_of: Vec<usize> = sim.clients().iter().map(|c| c.cluster()).collect();
    let result = sim.finish().map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(300))?;
    let mass = result.mean_final_in_cluster_mass().ok_or("no sampling mass recorded")?;
    let fraction = subtract(&result.comm_log, &before).in_cluster_fraction(&cluster_of);
    let msg = format!("in-cluster mass {mass:.4}, final-20-round in-cluster fraction {fraction:.4}");
    if mass > 0.9 && fraction > 0.85 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Heterogeneous {
    /// Per protocol name, per-seed cluster means.
    means: BTreeMap<&'static str, Vec<Vec<f64>>>,
    /// Per-seed across-cluster std for DAC with and without two-hop.
    std_two_hop: Vec<f64>,
    std_no_two_hop: Vec<f64>,
    elapsed: Duration,
}

fn heterogeneous_runs() -> Result<Heterogeneous, String> {
    let start = Instant::now();
    let mut means: BTreeMap<&'static str, Vec<Vec<f64>>> = BTreeMap::new();
    let mut std_two_hop = Vec::new();
    let mut std_no_two_hop = Vec::new();
    for seed in SEEDS {
        for kind in [
            ProtocolKind::Dac,
            ProtocolKind::Random,
            ProtocolKind::Oracle,
            ProtocolKind::Local,
        ] {
            let r = run(&heterogeneous(kind, seed))?;
            if kind == ProtocolKind::Dac {
                std_two_hop.push(r.summary.std);
            }
            means.entry(kind.name()).or_default().push(r.summary.cluster_means);
        }
        let mut cfg = heterogeneous(ProtocolKind::Dac, seed);
        cfg.two_hop = false;
        std_no_two_hop.push(run(&cfg)?.summary.std);
    }
    Ok(Heterogeneous {
        means,
        std_two_hop,
        std_no_two_hop,
        elapsed: start.elapsed(),
    })
}

fn avg(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cluster_avg(runs: &[Vec<f64>], cluster: usize) -> f64 {
    avg(&runs.iter().map(|r| r[cluster]).collect::<Vec<_>>())
}

fn heterogeneous_superiority(h: &Heterogeneous) -> Outcome {
    within(h.elapsed, Duration::from_secs(900))?;
    let mean_over_clusters = |name: &str| avg(&h.means[name].iter().map(|r| avg(r)).collect::<Vec<_>>());
    let (dac, random) = (mean_over_clusters("dac"), mean_over_clusters("random"));
    let (dac_180, random_180) = (cluster_avg(&h.means["dac"], 1), cluster_avg(&h.means["random"], 1));
    let mut problems = Vec::new();
    if dac < random {
        problems.push(format!("mean {:.2} < random {:.2}", 100.0 * dac, 100.0 * random));
    }
    if dac_180 <= random_180 {
        problems.push(format!(
            "180 cluster {:.2} <= random {:.2}",
            100.0 * dac_180,
            100.0 * random_180
        ));
    }
    let mut singletons = Vec::new();
    for c in [2, 3] {
        let (oracle, local) = (cluster_avg(&h.means["oracle"], c), cluster_avg(&h.means["local"], c));
        if oracle > local + 0.02 {
            problems.push(format!(
                "oracle singleton {c} {:.2} > local {:.2} + 2",
                100.0 * oracle,
                100.0 * local
            ));
        }
        singletons.push(format!("{:.2}/{:.2}", 100.0 * oracle, 100.0 * local));
    }
    let msg = format!(
        "mean dac {:.2} vs random {:.2}; 180 cluster dac {:.2} vs random {:.2}; oracle/local singletons {}",
        100.0 * dac,
        100.0 * random,
        100.0 * dac_180,
        100.0 * random_180,
        singletons.join(", ")
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{}: {msg}", problems.join("; ")))
    }
}

fn tau_sweep() -> Outcome {
    let mut per_tau = Vec::new();
    for tau in [1.0, 5.0, 30.0] {
        let mut cfg = heterogeneous(ProtocolKind::Dac, SEEDS[0]);
        cfg.tau = tau;
        per_tau.push(run(&cfg)?.summary.cluster_means);
    }
    let minority = (per_tau[0][1], per_tau[2][1]);
    let majority: Vec<f64> = per_tau.iter().map(|m| m[0]).collect();
    let spread = majority.iter().cloned().fold(f64::MIN, f64::max) - majority.iter().cloned().fold(f64::MAX, f64::min);
    let msg = format!(
        "180 cluster tau=1 {:.2}, tau=30 {:.2}; majority spread {:.2} points",
        100.0 * minority.0,
        100.0 * minority.1,
        100.0 * spread
    );
    if minority.1 > minority.0 && spread < 0.03 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn schedule_endpoints() -> Outcome {
    for (tau_max, total) in [(30.0, 60), (30.0, 200), (5.0, 10), (100.0, 1), (1.5, 1000)] {
        let s = TauSchedule::sigmoid(tau_max, total);
        let first = s.tau_at(0);
        let last = s.tau_at(total);
        if !(1.0..=1.05).contains(&first) {
            return Err(format!("tau_at(0) = {first} for tau_max {tau_max}, T {total}"));
        }
        if last < 0.99 * tau_max {
            return Err(format!("tau_at(T) = {last} for tau_max {tau_max}, T {total}"));
        }
        if let Some(t) = (0..total).find(|&t| s.tau_at(t + 1) < s.tau_at(t)) {
            return Err(format!("decreases after round {t} for tau_max {tau_max}, T {total}"));
        }
    }
    Ok("5 schedules start in [1, 1.05], end >= 0.99 tau_max, never decrease".into())
}

fn ablation_direction(h: &Heterogeneous) -> Outcome {
    let (with, without) = (avg(&h.std_two_hop), avg(&h.std_no_two_hop));
    let msg = format!("std with two-hop {:.2}, without {:.2}", 100.0 * with, 100.0 * without);
    if without >= with {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn check_round_invariants(sim: &Simulation<f64>, prev_best: &mut [f64], cluster_of: &[usize]) -> Result<(), String> {
    let cfg = sim.config();
    let round = sim.round();
    for (i, c) in sim.clients().iter().enumerate() {
        if cfg.protocol.is_dac() {
            let tau = cfg.tau_schedule().tau_at(round);
            let p = sampling_probabilities(&c.similarity, tau).map_err(|e| e.to_string())?;
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("{}: client {i} probabilities sum to {total}", cfg.name));
            }
            if p[i] != 0.0 {
                return Err(format!("{}: client {i} has owner probability {}", cfg.name, p[i]));
            }
            if let Some(j) = (0..p.len()).find(|&j| j != i && p[j] <= 0.0) {
                return Err(format!("{}: client {i} gives peer {j} zero probability", cfg.name));
            }
        }
        let best = c.best_val_loss;
        if best > prev_best[i] {
            return Err(format!(
                "{}: client {i} best val loss rose {} -> {best}",
                cfg.name, prev_best[i]
            ));
        }
        let seen = sim
            .metrics()
            .iter()
            .filter(|r| r.client_id == i)
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        if round > 0 && best != seen {
            return Err(format!(
                "{}: client {i} best val loss {best} != min seen {seen}",
                cfg.name
            ));
        }
        if round > 0 {
            let snapshot = model::evaluate(&c.best_params, &c.shard.val).map_err(|e| e.to_string())?;
            if (snapshot.loss - best).abs() > 1e-9 * best.abs().max(1.0) {
                return Err(format!(
                    "{}: client {i} best snapshot scores {} not {best}",
                    cfg.name, snapshot.loss
                ));
            }
        }
        prev_best[i] = best;
    }
    if cfg.protocol == ProtocolKind::Oracle {
        for (x, row) in sim.comm_log().counts.iter().enumerate() {
            if let Some(y) = (0..row.len()).find(|&y| row[y] > 0 && cluster_of[x] != cluster_of[y]) {
                return Err(format!("oracle: client {x} merged cross-cluster client {y}"));
            }
        }
    }
    // FedAvg of this round's models stays inside their coordinate-wise hull.
    let clients = sim.clients();
    let own = &clients[round % clients.len()];
    let received: Vec<(&ModelParams<f64>, usize)> = clients
        .iter()
        .filter(|c| c.id() != own.id())
        .take(3)
        .map(|c| (&c.params, c.train_count()))
        .collect();
    if !received.is_empty() {
        let merged = fedavg_merge((&own.params, own.train_count()), &received).map_err(|e| e.to_string())?;
        for (j, &v) in merged.values.iter().enumerate() {
            let inputs = std::iter::once(own.params.values[j]).chain(received.iter().map(|(p, _)| p.values[j]));
            let (lo, hi) = inputs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            if v < lo || v > hi {
                return Err(format!(
                    "{}: merged coordinate {j} = {v} outside [{lo}, {hi}]",
                    cfg.name
                ));
            }
        }
    }
    Ok(())
}

fn invariant_suite() -> Outcome {
    let layouts = [
        layout(&[(0.0, 3), (180.0, 2)]),
        layout(&[(0.0, 6), (90.0, 4), (180.0, 2)]),
        layout(&[(0.0, 14), (180.0, 4), (350.0, 1), (10.0, 1)]),
    ];
    let mut runs = 0;
    for (li, l) in layouts.iter().enumerate() {
        for kind in ProtocolKind::ALL {
            let mut cfg = task(kind, l.clone(), 40 + li as u64);
            cfg.rounds = 25;
            cfg.train_n = 20;
            cfg.val_n = 20;
            cfg.test_n = 20;
            cfg.pens_selection_rounds = 8;
            cfg.name = format!("{} layout {li}", kind.name());
            let mut sim = Simulation::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
            let cluster_of: Vec<usize> = sim.clients().iter().map(|c| c.cluster()).collect();
            let mut prev_best = vec![f64::INFINITY; cfg.k];
            check_round_invariants(&sim, &mut prev_best, &cluster_of)?;
            while !sim.is_done() {
                sim.step().map_err(|e| e.to_string())?;
                check_round_invariants(&sim, &mut prev_best, &cluster_of)?;
            }
            let expected_row = match kind {
                ProtocolKind::Dac | ProtocolKind::DacVar | ProtocolKind::Random => Some((cfg.m * cfg.rounds) as u64),
                ProtocolKind::Local => Some(0),
                _ => None,
            };
            if let Some(expected) = expected_row {
                if let Some(x) = (0..cfg.k).find(|&x| sim.comm_log().row_sum(x) != expected) {
                    return Err(format!(
                        "{}: client {x} row sum {} != {expected}",
                        cfg.name,
                        sim.comm_log().row_sum(x)
                    ));
                }
            }
            if let Some(x) = (0..cfg.k).find(|&x| sim.comm_log().counts[x][x] != 0) {
                return Err(format!("{}: client {x} merged with itself", cfg.name));
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, every round checked"))
}

fn artifacts(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    ["accuracy.csv", "heatmap.csv", "metrics.jsonl"]
        .iter()
        .map(|f| {
            std::fs::read(dir.join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| format!("{f}: {e}"))
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for kind in [
        ProtocolKind::Dac,
        ProtocolKind::DacVar,
        ProtocolKind::Pens,
        ProtocolKind::Random,
    ] {
        let mut cfg = heterogeneous(kind, 11);
        cfg.rounds = 30;
        let dirs: Vec<_> = ["a", "b", "resumed"]
            .iter()
            .map(|d| tmp.path().join(kind.name()).join(d))
            .collect();

        for d in &dirs[..2] {
            cfg.output_dir = Some(d.clone());
            run(&cfg)?;
        }
        let reference = artifacts(&dirs[0])?;
        if artifacts(&dirs[1])? != reference {
            return Err(format!("{}: rerun artifacts differ", kind.name()));
        }

        // Workers must not change results either.
        cfg.output_dir = None;
        let parallel = Simulation::<f64>::new(cfg.clone())
            .and_then(|s| s.with_workers(4))
            .and_then(|s| s.finish())
            .map_err(|e| e.to_string())?;
        let parallel_dir = tmp.path().join(kind.name()).join("parallel");
        parallel.write_artifacts(&parallel_dir).map_err(|e| e.to_string())?;
        if artifacts(&parallel_dir)? != reference {
            return Err(format!("{}: 4-worker artifacts differ", kind.name()));
        }

        let ckpt = tmp.path().join(format!("{}.ckpt.json", kind.name()));
        let mut sim = Simulation::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
        sim.run_until(cfg.rounds / 2).map_err(|e| e.to_string())?;
        sim.checkpoint(&ckpt).map_err(|e| e.to_string())?;
        drop(sim);
        let resumed = Simulation::<f64>::resume(&ckpt)
            .and_then(|s| s.finish())
            .map_err(|e| e.to_string())?;
        resumed.write_artifacts(&dirs[2]).map_err(|e| e.to_string())?;
        if artifacts(&dirs[2])? != reference {
            return Err(format!("{}: resumed artifacts differ", kind.name()));
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} protocols byte-identical across reruns, workers and resume at T/2"
    ))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match outcome {
        Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg}"),
        Err(msg) => {
            failures += 1;
            println!("criterion {n:>2} FAIL  {name}: {msg}");
        }
    };
    report(1, "gradient correctness", gradient_check());
    report(2, "softmax closed form", softmax_closed_form());
    report(3, "sampling oracle", sampling_oracle());
    report(4, "cluster self-organization", self_organization());
    let hetero = heterogeneous_runs();
    report(
        5,
        "heterogeneous clusters",
        hetero
            .as_ref()
            .map_err(Clone::clone)
            .and_then(heterogeneous_superiority),
    );
    report(6, "temperature sweep", tau_sweep());
    report(7, "schedule endpoints", schedule_endpoints());
    report(
        8,
        "two-hop ablation",
        hetero.as_ref().map_err(Clone::clone).and_then(ablation_direction),
    );
    report(9, "protocol invariants", invariant_suite());
    report(10, "determinism", determinism());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
