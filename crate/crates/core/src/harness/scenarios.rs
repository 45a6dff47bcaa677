//! Built-in experiment scenarios. Each builds a fresh deployment, drives a
//! deterministic workload and fault schedule over virtual time, and emits
//! CSV timelines plus assertion results.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::ahash::client::{AHashClient, RetryPolicy};
use crate::ahash::store::ChangeRequest;
use crate::ahash::Role;
use crate::client::{StorageClient, Transport};
use crate::codec::Msg;
use crate::content::Content;
use crate::harness::deploy::{Deployment, TopologySpec};
use crate::harness::fsck;
use crate::harness::sample::{take_sample, StateSample};
use crate::harness::{csv, linear_fit_residual, RunOutput};
use crate::hed::sim::NetProfile;
use crate::hed::{CallCtx, WorkerPoolConfig};
use crate::vtime::{fmt_secs, secs, Nanos};

// ---------------------------------------------------------------------
// Depth test
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DepthPoint {
    pub depth: usize,
    pub create_messages: u64,
    pub stat_messages: u64,
    pub create_time: Nanos,
    pub stat_time: Nanos,
}

pub struct DepthResult {
    pub points: Vec<DepthPoint>,
}

impl DepthResult {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    p.depth.to_string(),
                    p.create_messages.to_string(),
                    p.stat_messages.to_string(),
                    fmt_secs(p.create_time),
                    fmt_secs(p.stat_time),
                ]
            })
            .collect();
        csv(
            &["depth", "createMessages", "statMessages", "createTime", "statTime"],
            &rows,
        )
    }

    /// (a, b, max residual): zero residual iff stat message counts are an
    /// exact linear function of depth.
    pub fn stat_fit(&self) -> (f64, f64, f64) {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.depth as f64, p.stat_messages as f64))
            .collect();
        linear_fit_residual(&pts)
    }

    /// The create-vs-stat message gap per depth; constant when healthy.
    pub fn create_minus_stat(&self) -> Vec<i64> {
        self.points
            .iter()
            .map(|p| p.create_messages as i64 - p.stat_messages as i64)
            .collect()
    }

    pub fn total_virtual_time(&self) -> Nanos {
        self.points.iter().map(|p| p.create_time + p.stat_time).sum()
    }
}

/// Create a chain of collections of the given depth, measuring message
/// counts and virtual times of each create and stat.
pub fn run_depth_test(
    seed: u64,
    levels: usize,
    ahash_nodes: usize,
    profile: NetProfile,
) -> DepthResult {
    let spec = TopologySpec {
        seed,
        ahash_nodes,
        profile,
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    d.wait_for_master(secs(20.0));
    d.run_for(secs(2.0));
    let client = d.driver_client("CN=user");

    // Warm every cache on the path (root bootstrap, master discovery).
    client.stat("/").unwrap();
    client.stat("/").unwrap();

    let mut points = Vec::new();
    let mut path = String::new();
    for depth in 1..=levels {
        path.push_str(&format!("/d{depth:03}"));
        let t0 = d.sim.now();
        client.mkdir(&path).unwrap();
        let create_trace = d.sim.trace_stats(client.transport.last_trace());
        let create_time = d.sim.now() - t0;

        let t0 = d.sim.now();
        client.stat(&path).unwrap();
        let stat_trace = d.sim.trace_stats(client.transport.last_trace());
        let stat_time = d.sim.now() - t0;

        points.push(DepthPoint {
            depth,
            create_messages: create_trace.messages,
            stat_messages: stat_trace.messages,
            create_time,
            stat_time,
        });
    }
    d.shutdown();
    DepthResult { points }
}

// ---------------------------------------------------------------------
// Width test
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct WidthPoint {
    pub n: usize,
    pub add_messages: u64,
    /// Total bytes moved by the add, across every service leg.
    pub add_bytes: u64,
    /// Total bytes moved by the stat, across every service leg.
    pub stat_bytes: u64,
    /// Payload bytes of the stat response the client receives.
    pub stat_payload_bytes: u64,
    pub time: Nanos,
}

pub struct WidthResult {
    pub points: Vec<WidthPoint>,
}

impl WidthResult {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    p.n.to_string(),
                    p.add_messages.to_string(),
                    p.add_bytes.to_string(),
                    p.stat_bytes.to_string(),
                    p.stat_payload_bytes.to_string(),
                    fmt_secs(p.time),
                ]
            })
            .collect();
        csv(
            &["n", "addMessages", "addBytes", "statBytes", "statPayloadBytes", "virtualTime"],
            &rows,
        )
    }

    /// Fit of the client-visible stat response payload size against n.
    pub fn stat_fit(&self) -> (f64, f64, f64) {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.n as f64, p.stat_payload_bytes as f64))
            .collect();
        linear_fit_residual(&pts)
    }

    /// First n where creating transfers fewer bytes than stating.
    pub fn crossover(&self) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.add_bytes < p.stat_bytes)
            .map(|p| p.n)
    }
}

/// Add `n_max` fixed-width names to one collection; at each size record
/// the bytes a stat transfers and the bytes the next add transfers.
pub fn run_width_test(seed: u64, n_max: usize) -> WidthResult {
    let d = Deployment::build(TopologySpec {
        seed,
        ..TopologySpec::default()
    });
    d.wait_for_master(secs(20.0));
    d.run_for(secs(2.0));
    let client = d.driver_client("CN=user");
    client.mkdir("/w").unwrap();
    client.stat("/w").unwrap();

    let mut points = Vec::new();
    for n in 0..=n_max {
        let t0 = d.sim.now();
        let stat_resp = client.stat("/w").unwrap();
        let stat_bytes = d.sim.trace_stats(client.transport.last_trace()).bytes;

        client.mkdir(&format!("/w/e{n:05}")).unwrap();
        let add_trace = d.sim.trace_stats(client.transport.last_trace());
        points.push(WidthPoint {
            n,
            add_messages: add_trace.messages,
            add_bytes: add_trace.bytes,
            stat_bytes,
            stat_payload_bytes: stat_resp.encoded_len() as u64,
            time: d.sim.now() - t0,
        });
    }
    d.shutdown();
    WidthResult { points }
}

// ---------------------------------------------------------------------
// Replication scenario
// ---------------------------------------------------------------------

pub struct ReplicationResult {
    pub output: RunOutput,
    pub trajectory: Vec<StateSample>,
    pub initial_distribution: BTreeMap<String, u64>,
    pub final_distribution: BTreeMap<String, u64>,
}

/// 10 size-declared files of 114 MB with 4 replicas each on 5 shepherds;
/// kill the shepherd holding 8 replicas, watch OFFLINE marking and repair,
/// restart it, watch surplus THIRDWHEEL cleanup back to 40 ALIVE.
pub fn run_replication_scenario(seed: u64) -> ReplicationResult {
    let check_period = secs(20.0);
    let spec = TopologySpec {
        seed,
        ahash_nodes: 2,
        librarians: 1,
        bartenders: 1,
        shepherds: 5,
        shepherd_capacity: 3_000 * 1_000_000, // ~26 replicas of 114 MB
        default_needed: 4,
        heartbeat_period: secs(15.0),
        grace: secs(4.0),
        monitor_period: secs(5.0),
        check_period,
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    let mut output = RunOutput::default();
    d.wait_for_master(secs(20.0));
    d.run_for(secs(2.0));

    let client = d.driver_client("CN=user");
    client.mkdir("/repl").unwrap();
    const FILE_SIZE: u64 = 114 * 1_000_000;
    for i in 0..10u64 {
        client
            .put(
                &format!("/repl/file{i:02}"),
                Content::synthetic(9_000 + i, FILE_SIZE),
                Some(4),
            )
            .unwrap();
    }

    // Fine-grained trajectory for assertions; 15 s cadence for the CSV.
    fn advance(d: &Deployment, traj: &mut Vec<StateSample>, until: Nanos) {
        while d.sim.now() < until {
            d.run_for(secs(1.0));
            traj.push(take_sample(d));
        }
    }
    let mut trajectory: Vec<StateSample> = Vec::new();

    // Let the fan-out settle to 40 ALIVE.
    let settle_deadline = d.sim.now() + 6 * check_period;
    loop {
        advance(&d, &mut trajectory, d.sim.now() + secs(5.0));
        let s = trajectory.last().unwrap();
        if s.alive == 40 && s.creating == 0 {
            break;
        }
        assert!(
            d.sim.now() < settle_deadline,
            "initial fan-out never settled: {s:?}"
        );
    }
    let initial_distribution = trajectory.last().unwrap().per_shepherd.clone();
    output.assert_true(
        "initial-40-alive",
        trajectory.last().unwrap().alive == 40,
        format!("{:?}", initial_distribution),
    );

    // Kill the shepherd holding exactly 8 replicas (the reference run's S3).
    let victim_idx = d
        .shepherd_urls
        .iter()
        .position(|url| initial_distribution.get(url).copied().unwrap_or(0) == 8)
        .expect("a shepherd holding exactly 8 replicas");
    let victim_host = d.shepherd_hosts[victim_idx].clone();
    let victim_url = d.shepherd_urls[victim_idx].clone();
    let kill_at = d.sim.now();
    d.sim.kill(&victim_host);

    // Phase 1: OFFLINE marking, then monotone repair back to 40 ALIVE.
    let mut saw_32_8 = false;
    let recovery_deadline = kill_at + 5 * check_period;
    while d.sim.now() < recovery_deadline {
        advance(&d, &mut trajectory, d.sim.now() + secs(1.0));
        let s = trajectory.last().unwrap();
        if s.alive == 32 && s.offline == 8 {
            saw_32_8 = true;
        }
        if s.alive == 40 && s.creating == 0 && s.offline == 8 {
            break;
        }
    }
    output.assert_true(
        "kill-yields-32-alive-8-offline",
        saw_32_8,
        "trajectory must contain the 32 ALIVE + 8 OFFLINE state",
    );
    {
        let s = trajectory.last().unwrap();
        output.assert_true(
            "recovered-to-40-within-5-periods",
            s.alive == 40 && s.offline == 8,
            format!("after recovery window: {s:?}"),
        );
    }
    // ALIVE never decreases once repair starts.
    let alive_after_kill: Vec<u64> = trajectory
        .iter()
        .filter(|s| s.at > kill_at)
        .map(|s| s.alive)
        .collect();
    let min_idx = alive_after_kill
        .iter()
        .enumerate()
        .min_by_key(|(i, v)| (**v, *i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let monotone = alive_after_kill[min_idx..].windows(2).all(|w| w[1] >= w[0]);
    output.assert_true(
        "repair-monotone-nondecreasing",
        monotone,
        format!("alive trajectory after kill: {alive_after_kill:?}"),
    );

    // Phase 2: the shepherd returns; surplus appears as THIRDWHEEL and the
    // system converges to exactly 40 ALIVE on distinct shepherds per file.
    d.sim.restart(&victim_host);
    let restart_at = d.sim.now();
    let mut saw_thirdwheel = false;
    let end_deadline = restart_at + 8 * check_period;
    loop {
        advance(&d, &mut trajectory, d.sim.now() + secs(1.0));
        let s = trajectory.last().unwrap();
        saw_thirdwheel |= s.thirdwheel > 0;
        if s.alive == 40
            && s.thirdwheel == 0
            && s.offline == 0
            && s.creating == 0
            && s.invalid == 0
        {
            break;
        }
        if d.sim.now() >= end_deadline {
            output.assert_true("final-state-reached", false, format!("stuck at {s:?}"));
            break;
        }
    }
    output.assert_true(
        "reappearance-thirdwheel-transient",
        saw_thirdwheel,
        "THIRDWHEEL must appear transiently after the restart",
    );
    let final_sample = trajectory.last().unwrap().clone();
    output.assert_true(
        "final-40-alive",
        final_sample.alive == 40 && final_sample.total() == 40,
        format!("{final_sample:?}"),
    );
    output.assert_true(
        "victim-participates-again",
        final_sample
            .per_shepherd
            .get(&victim_url)
            .copied()
            .unwrap_or(0)
            > 0,
        format!("{:?}", final_sample.per_shepherd),
    );
    let report = fsck::check_deployment(&d, true);
    output.assert_true(
        "fsck-distinct-shepherds-and-counts",
        report.ok(),
        format!("{:?}", report.errors),
    );
    let final_distribution = final_sample.per_shepherd.clone();

    // CSV at the reference cadence of 15 virtual seconds.
    let rows: Vec<Vec<String>> = trajectory
        .iter()
        .filter(|s| s.at % secs(15.0) < secs(1.0))
        .map(|s| {
            vec![
                fmt_secs(s.at),
                s.alive.to_string(),
                s.offline.to_string(),
                s.creating.to_string(),
                s.thirdwheel.to_string(),
                s.invalid.to_string(),
            ]
        })
        .collect();
    output.csv.insert(
        "replication_timeline.csv".to_string(),
        csv(
            &["time", "ALIVE", "OFFLINE", "CREATING", "THIRDWHEEL", "INVALID"],
            &rows,
        ),
    );
    let dist_rows: Vec<Vec<String>> = d
        .shepherd_urls
        .iter()
        .map(|url| {
            vec![
                url.clone(),
                initial_distribution
                    .get(url)
                    .copied()
                    .unwrap_or(0)
                    .to_string(),
                final_distribution.get(url).copied().unwrap_or(0).to_string(),
            ]
        })
        .collect();
    output.csv.insert(
        "replication_distribution.csv".to_string(),
        csv(&["shepherd", "initial", "final"], &dist_rows),
    );

    d.shutdown();
    ReplicationResult {
        output,
        trajectory,
        initial_distribution,
        final_distribution,
    }
}

// ---------------------------------------------------------------------
// Multi-client test
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MultiClientPoint {
    pub clients: usize,
    pub min_time: Nanos,
    pub avg_time: Nanos,
    pub max_time: Nanos,
    pub retries: u64,
}

pub struct MultiClientResult {
    pub points: Vec<MultiClientPoint>,
    pub threshold: usize,
}

impl MultiClientResult {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    p.clients.to_string(),
                    fmt_secs(p.min_time),
                    fmt_secs(p.avg_time),
                    fmt_secs(p.max_time),
                    p.retries.to_string(),
                ]
            })
            .collect();
        csv(&["clients", "minTime", "avgTime", "maxTime", "retries"], &rows)
    }
}

/// Each simulated client opens one connection and creates 50 collections
/// sequentially; the bartender admits `threshold` concurrent connections
/// and queues the rest FIFO (overflow is refused and retried).
pub fn run_multi_client(
    seed: u64,
    threshold: usize,
    client_counts: &[usize],
) -> MultiClientResult {
    let mut points = Vec::new();
    for &clients in client_counts {
        let spec = TopologySpec {
            seed: seed.wrapping_add(clients as u64),
            bartender_pool: WorkerPoolConfig::new(threshold, 25),
            bartender_cpu: 2_000_000, // requests serialize on one processor
            ..TopologySpec::default()
        };
        let d = Deployment::build(spec);
        d.wait_for_master(secs(20.0));
        d.run_for(secs(2.0));

        let setup = d.driver_client("CN=user");
        setup.mkdir("/mc").unwrap();
        for c in 0..clients {
            setup.mkdir(&format!("/mc/c{c:03}")).unwrap();
        }

        let results: Arc<Mutex<Vec<(Nanos, u64)>>> = Arc::new(Mutex::new(Vec::new()));
        for c in 0..clients {
            let host = d.add_client_host("mc");
            let urls = d.bartender_urls.clone();
            let sim = d.sim.clone();
            let results = results.clone();
            d.sim.spawn(&host, "CN=user", move |port| {
                use crate::hed::Runtime;
                let transport = crate::client::SimTransport::new(sim, port.clone(), urls);
                let client = StorageClient::new(transport, 64, secs(0.5), 1);
                let t0 = Runtime::now(&port);
                for k in 0..50 {
                    client
                        .mkdir(&format!("/mc/c{c:03}/k{k:02}"))
                        .expect("create must eventually succeed");
                }
                client.transport.close();
                results
                    .lock()
                    .push((Runtime::now(&port) - t0, client.retries_observed()));
            });
        }
        // Generous horizon; every client finishes long before it.
        let deadline = d.sim.now() + secs(3600.0);
        while results.lock().len() < clients {
            assert!(d.sim.now() < deadline, "multiclient run stalled");
            d.run_for(secs(1.0));
        }
        let finished = results.lock();
        let times: Vec<Nanos> = finished.iter().map(|(t, _)| *t).collect();
        let retries: u64 = finished.iter().map(|(_, r)| *r).sum();
        let min = *times.iter().min().unwrap();
        let max = *times.iter().max().unwrap();
        let avg = times.iter().sum::<Nanos>() / times.len() as u64;
        drop(finished);
        points.push(MultiClientPoint {
            clients,
            min_time: min,
            avg_time: avg,
            max_time: max,
            retries,
        });
        d.shutdown();
    }
    MultiClientResult { points, threshold }
}

// ---------------------------------------------------------------------
// Store benchmark (centralized vs replicated)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Centralized,
    ReplicatedStable,
    ReplicatedUnstableClients,
    ReplicatedUnstableMaster,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::Centralized,
        BenchMode::ReplicatedStable,
        BenchMode::ReplicatedUnstableClients,
        BenchMode::ReplicatedUnstableMaster,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::Centralized => "centralized",
            BenchMode::ReplicatedStable => "replicated-stable",
            BenchMode::ReplicatedUnstableClients => "replicated-unstable-clients",
            BenchMode::ReplicatedUnstableMaster => "replicated-unstable-master",
        }
    }

    pub fn parse(s: &str) -> Option<BenchMode> {
        BenchMode::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct OpStats {
    pub count: usize,
    pub min_time: Nanos,
    pub avg_time: Nanos,
    pub max_time: Nanos,
    pub min_messages: u64,
    pub max_messages: u64,
}

fn op_stats(samples: &[(Nanos, u64)]) -> OpStats {
    if samples.is_empty() {
        return OpStats::default();
    }
    OpStats {
        count: samples.len(),
        min_time: samples.iter().map(|(t, _)| *t).min().unwrap(),
        avg_time: samples.iter().map(|(t, _)| *t).sum::<Nanos>() / samples.len() as u64,
        max_time: samples.iter().map(|(t, _)| *t).max().unwrap(),
        min_messages: samples.iter().map(|(_, m)| *m).min().unwrap(),
        max_messages: samples.iter().map(|(_, m)| *m).max().unwrap(),
    }
}

pub struct BenchResult {
    pub mode: BenchMode,
    pub reads: OpStats,
    pub writes: OpStats,
    /// Verified writes that later disappeared (must stay empty).
    pub lost_writes: Vec<u64>,
}

pub const BENCH_CSV_HEADER: [&str; 8] = [
    "mode", "op", "count", "min", "avg", "max", "minMessages", "maxMessages",
];

impl BenchResult {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let row = |op: &str, s: &OpStats| {
            vec![
                self.mode.name().to_string(),
                op.to_string(),
                s.count.to_string(),
                fmt_secs(s.min_time),
                fmt_secs(s.avg_time),
                fmt_secs(s.max_time),
                s.min_messages.to_string(),
                s.max_messages.to_string(),
            ]
        };
        vec![row("read", &self.reads), row("write", &self.writes)]
    }
}

/// Constant read/write loop with read-back verification for 10 virtual
/// minutes; unstable modes restart a node every 60 virtual seconds.
pub fn run_ahash_bench(seed: u64, mode: BenchMode) -> BenchResult {
    let nodes = if mode == BenchMode::Centralized { 1 } else { 3 };
    let spec = TopologySpec {
        seed,
        ahash_nodes: nodes,
        librarians: 0,
        bartenders: 0,
        shepherds: 0,
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    d.wait_for_master(secs(20.0));
    d.run_for(secs(2.0));

    let store = AHashClient::new(d.ahash_urls.clone(), RetryPolicy::default());
    let port = d.sim.driver_port("CN=admin");
    let mut reads: Vec<(Nanos, u64)> = Vec::new();
    let mut writes: Vec<(Nanos, u64)> = Vec::new();
    let mut verified: BTreeMap<String, u64> = BTreeMap::new();
    let mut lost = Vec::new();

    // Warm up master discovery so measured ops reflect the steady state.
    {
        let ctx = CallCtx {
            caller_dn: "CN=admin",
            trace: 0,
            rt: &port,
        };
        store
            .change_one(&ctx, ChangeRequest::set("bench", "kv", "warmup", "0"))
            .expect("warmup write");
        store.get_one(&ctx, "bench").expect("warmup read");
    }

    let run_until = d.sim.now() + secs(600.0);
    let mut next_restart = d.sim.now() + secs(60.0);
    let mut down_until: Option<(String, Nanos)> = None;
    let mut i = 0u64;
    while d.sim.now() < run_until {
        if let Some((host, at)) = &down_until {
            if d.sim.now() >= *at {
                d.sim.restart(host);
                down_until = None;
            }
        }
        if d.sim.now() >= next_restart && down_until.is_none() {
            next_restart += secs(60.0);
            let victim = match mode {
                BenchMode::ReplicatedUnstableMaster => d
                    .ahash_nodes
                    .iter()
                    .position(|n| n.view().role == Role::Master)
                    .map(|idx| d.ahash_hosts[idx].clone()),
                BenchMode::ReplicatedUnstableClients => {
                    let clients: Vec<String> = d
                        .ahash_nodes
                        .iter()
                        .zip(&d.ahash_hosts)
                        .filter(|(n, _)| n.view().role != Role::Master)
                        .map(|(_, h)| h.clone())
                        .collect();
                    if clients.is_empty() {
                        None
                    } else {
                        Some(
                            clients[(d.sim.rand_u64() % clients.len() as u64) as usize]
                                .clone(),
                        )
                    }
                }
                _ => None,
            };
            if let Some(host) = victim {
                let idx = d.ahash_hosts.iter().position(|h| *h == host).unwrap();
                d.sim.kill(&host);
                d.ahash_nodes[idx].mark_stopped(d.sim.now());
                down_until = Some((host, d.sim.now() + secs(5.0)));
            }
        }

        // One write with read-back verification.
        let key = format!("k{:03}", i % 50);
        let value = i.to_string();
        let trace = d.sim.new_trace();
        let ctx = CallCtx {
            caller_dn: "CN=admin",
            trace,
            rt: &port,
        };
        let t0 = d.sim.now();
        let write_ok = store
            .change_one(&ctx, ChangeRequest::set("bench", "kv", &key, &value))
            .is_ok();
        if write_ok {
            writes.push((d.sim.now() - t0, d.sim.trace_stats(trace).messages));
            // Read the newly written entry to ensure it is stored.
            let back = store
                .get_one(&ctx, "bench")
                .ok()
                .and_then(|o| o.get("kv").and_then(|kv| kv.get(&key)).cloned());
            if back.as_deref() == Some(value.as_str()) {
                verified.insert(key.clone(), i);
            } else {
                lost.push(i);
            }
        }

        // One plain read with its own trace.
        let trace = d.sim.new_trace();
        let ctx = CallCtx {
            caller_dn: "CN=admin",
            trace,
            rt: &port,
        };
        let t0 = d.sim.now();
        if store.get_one(&ctx, "bench").is_ok() {
            reads.push((d.sim.now() - t0, d.sim.trace_stats(trace).messages));
        }

        i += 1;
        d.run_for(secs(1.0));
    }

    // End-of-run sweep: every verified write must still be readable.
    if let Some((host, _)) = &down_until {
        d.sim.restart(host);
    }
    d.run_for(secs(20.0));
    let trace = d.sim.new_trace();
    let ctx = CallCtx {
        caller_dn: "CN=admin",
        trace,
        rt: &port,
    };
    let obj = store.get_one(&ctx, "bench").unwrap_or_default();
    for (key, last_i) in &verified {
        let current: Option<u64> = obj
            .get("kv")
            .and_then(|kv| kv.get(key))
            .and_then(|v| v.parse().ok());
        match current {
            Some(v) if v >= *last_i => {}
            _ => lost.push(*last_i),
        }
    }

    d.shutdown();
    BenchResult {
        mode,
        reads: op_stats(&reads),
        writes: op_stats(&writes),
        lost_writes: lost,
    }
}

// ---------------------------------------------------------------------
// Election safety fuzz
// ---------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct FuzzSummary {
    pub schedules: usize,
    pub violations: Vec<String>,
    pub total_acked_writes: usize,
    pub total_reads: usize,
}

/// Randomized kill/restart/partition schedules over a 3-node store with a
/// write and read workload. Checks: master tenures never overlap, no
/// verified write is lost, reads work against every reachable live
/// replica, and writes fail while no master exists.
pub fn run_election_fuzz(base_seed: u64, schedules: usize) -> FuzzSummary {
    let mut summary = FuzzSummary {
        schedules,
        ..FuzzSummary::default()
    };
    for k in 0..schedules {
        let seed = base_seed.wrapping_add(k as u64);
        match fuzz_one(seed) {
            Ok((acked, reads)) => {
                summary.total_acked_writes += acked;
                summary.total_reads += reads;
            }
            Err(violation) => summary.violations.push(format!("seed {seed}: {violation}")),
        }
    }
    summary
}

fn fuzz_one(seed: u64) -> Result<(usize, usize), String> {
    let spec = TopologySpec {
        seed,
        ahash_nodes: 3,
        librarians: 0,
        bartenders: 0,
        shepherds: 0,
        master_timeout: secs(4.0),
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    let store = AHashClient::new(
        d.ahash_urls.clone(),
        RetryPolicy {
            attempts: 3,
            backoff_base: secs(0.3),
            backoff_cap: secs(1.0),
        },
    );
    let port = d.sim.driver_port("CN=admin");
    let hosts = d.ahash_hosts.clone();
    let mut down: BTreeMap<String, bool> =
        hosts.iter().map(|h| (h.clone(), false)).collect();
    let mut partitioned = false;

    let mut acked: Vec<(Nanos, Nanos, u64)> = Vec::new(); // (start, ack, value)
    let mut reads_done = 0usize;
    let mut read_failures: Vec<String> = Vec::new();

    let horizon = d.sim.now() + secs(60.0);
    let mut i = 0u64;
    while d.sim.now() < horizon {
        match d.sim.rand_u64() % 8 {
            0 => {
                // Kill one live node (never the last one standing).
                let live: Vec<String> = hosts
                    .iter()
                    .filter(|h| !down[h.as_str()])
                    .cloned()
                    .collect();
                if live.len() > 1 {
                    let h = live[(d.sim.rand_u64() % live.len() as u64) as usize].clone();
                    let idx = hosts.iter().position(|x| *x == h).unwrap();
                    d.sim.kill(&h);
                    d.ahash_nodes[idx].mark_stopped(d.sim.now());
                    down.insert(h, true);
                }
            }
            1 => {
                let dead: Vec<String> = hosts
                    .iter()
                    .filter(|h| down[h.as_str()])
                    .cloned()
                    .collect();
                if let Some(h) = dead.first() {
                    d.sim.restart(h);
                    down.insert(h.clone(), false);
                }
            }
            2 => {
                if !partitioned {
                    let lone = hosts[(d.sim.rand_u64() % hosts.len() as u64) as usize].clone();
                    let rest: Vec<String> =
                        hosts.iter().filter(|h| **h != lone).cloned().collect();
                    d.sim.partition(&[vec![lone], rest]);
                    partitioned = true;
                }
            }
            3 => {
                if partitioned {
                    d.sim.heal();
                    partitioned = false;
                }
            }
            _ => {}
        }

        // Write attempt.
        let ctx = CallCtx {
            caller_dn: "CN=admin",
            trace: 0,
            rt: &port,
        };
        let t0 = d.sim.now();
        if store
            .change_one(&ctx, ChangeRequest::set("fz", "kv", "v", &i.to_string()))
            .is_ok()
        {
            acked.push((t0, d.sim.now(), i));
        }

        // Read probe against every node reachable from the driver (the
        // driver is never partitioned; partitions only split store nodes).
        for (host, url) in hosts.iter().zip(&d.ahash_urls) {
            if down[host.as_str()] {
                continue;
            }
            let ctx = CallCtx {
                caller_dn: "CN=admin",
                trace: 0,
                rt: &port,
            };
            if ctx
                .call(
                    url,
                    "get",
                    Msg::map()
                        .field("ids", Msg::List(vec![Msg::str("fz")]))
                        .build(),
                )
                .is_err()
            {
                read_failures.push(format!("read from live {host} failed at {}", d.sim.now()));
            }
            reads_done += 1;
        }

        i += 1;
        d.run_for(secs(1.0));
    }

    // Heal and revive everything, let the survivors converge.
    if partitioned {
        d.sim.heal();
    }
    for h in &hosts {
        if down[h.as_str()] {
            d.sim.restart(h);
        }
    }
    d.run_for(secs(20.0));
    let end = d.sim.now();

    // (a) Master tenures never overlap across distinct nodes.
    let mut reigns: Vec<(Nanos, Nanos, u64, String)> = Vec::new();
    for (node, host) in d.ahash_nodes.iter().zip(&hosts) {
        for r in node.reigns() {
            reigns.push((r.start, r.end.unwrap_or(end), r.term, host.clone()));
        }
    }
    reigns.sort();
    for pair in reigns.windows(2) {
        let (s0, e0, t0, ref h0) = pair[0];
        let (s1, _e1, t1, ref h1) = pair[1];
        if s1 < e0 && h0 != h1 {
            d.shutdown();
            return Err(format!(
                "overlapping masters: {h0} term {t0} [{s0},{e0}) vs {h1} term {t1} from {s1}"
            ));
        }
    }

    // (b) Stores converge byte-identically and no acked write is lost.
    let final_store = d.ahash_nodes[0].store_clone();
    for (node, host) in d.ahash_nodes.iter().zip(&hosts).skip(1) {
        if node.store_clone().canonical_bytes() != final_store.canonical_bytes() {
            d.shutdown();
            return Err(format!("store divergence on {host}"));
        }
    }
    if let Some((_, _, max_acked)) = acked.iter().max_by_key(|(_, _, v)| *v) {
        let current: Option<u64> = final_store
            .get("fz")
            .and_then(|o| o.get("kv"))
            .and_then(|kv| kv.get("v"))
            .and_then(|v| v.parse().ok());
        match current {
            Some(v) if v >= *max_acked => {}
            other => {
                d.shutdown();
                return Err(format!("acked write {max_acked} lost; final {other:?}"));
            }
        }
    }

    // (c) Reads from live replicas always served.
    if let Some(f) = read_failures.first() {
        d.shutdown();
        return Err(f.clone());
    }

    // (d) A write acknowledged entirely outside every master tenure would
    // mean writes were not blocked during the election.
    let covered: Vec<(Nanos, Nanos)> = reigns.iter().map(|(s, e, _, _)| (*s, *e)).collect();
    for (start, finish, value) in &acked {
        let overlaps = covered.iter().any(|(s, e)| start < e && s < finish);
        if !overlaps {
            d.shutdown();
            return Err(format!(
                "write {value} acked at [{start},{finish}] with no master tenure"
            ));
        }
    }

    d.shutdown();
    Ok((acked.len(), reads_done))
}

// ---------------------------------------------------------------------
// Soak
// ---------------------------------------------------------------------

pub struct SoakResult {
    pub output: RunOutput,
    pub write_gaps: Vec<(Nanos, Nanos)>,
}

/// A shortened long-haul run: mixed workload (uploads, deletes, listings)
/// with scheduled master and client store-node restarts; ends with a full
/// integrity check and a write-availability report.
pub fn run_soak(seed: u64, duration: Nanos) -> SoakResult {
    let check_period = secs(60.0);
    let spec = TopologySpec {
        seed,
        ahash_nodes: 3,
        librarians: 1,
        bartenders: 1,
        shepherds: 2,
        shepherd_capacity: 50_000 * 1_000_000,
        default_needed: 2,
        heartbeat_period: secs(60.0),
        grace: secs(60.0),
        monitor_period: secs(15.0),
        check_period,
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    let mut output = RunOutput::default();
    d.wait_for_master(secs(20.0));
    d.run_for(secs(2.0));
    let client = d.driver_client("CN=user");
    client.mkdir("/soak").unwrap();

    let start = d.sim.now();
    let end = start + duration;
    let mut next_upload = start;
    let mut next_delete = start + secs(900.0);
    let mut next_list = start + secs(120.0);
    let hour = secs(3600.0);
    let mut restarts: Vec<(Nanos, bool)> = Vec::new(); // (at, master?)
    let mut t = start + 2 * hour;
    while t < end {
        restarts.push((t, true));
        t += 6 * hour;
    }
    let mut t = start + 5 * hour;
    while t < end {
        restarts.push((t, false));
        t += 6 * hour;
    }
    restarts.sort();

    let mut down: Option<(String, Nanos)> = None;
    let mut uploaded: Vec<String> = Vec::new();
    let mut seq = 0u64;
    let mut write_attempts: Vec<(Nanos, Nanos, bool)> = Vec::new();

    while d.sim.now() < end {
        if let Some((host, at)) = &down {
            if d.sim.now() >= *at {
                d.sim.restart(host);
                down = None;
            }
        }
        if let Some((at, master)) = restarts.first().copied() {
            if d.sim.now() >= at && down.is_none() {
                restarts.remove(0);
                let host = if master {
                    d.ahash_nodes
                        .iter()
                        .position(|n| n.view().role == Role::Master)
                        .map(|i| d.ahash_hosts[i].clone())
                } else {
                    d.ahash_nodes
                        .iter()
                        .zip(&d.ahash_hosts)
                        .find(|(n, _)| n.view().role != Role::Master)
                        .map(|(_, h)| h.clone())
                };
                if let Some(host) = host {
                    let idx = d.ahash_hosts.iter().position(|h| *h == host).unwrap();
                    d.sim.kill(&host);
                    d.ahash_nodes[idx].mark_stopped(d.sim.now());
                    down = Some((host, d.sim.now() + secs(30.0)));
                }
            }
        }

        let now = d.sim.now();
        if now >= next_upload {
            next_upload = now + secs(300.0);
            let ln = format!("/soak/f{seq:05}");
            let t0 = d.sim.now();
            let ok = client
                .put(&ln, Content::synthetic(70_000 + seq, 5_000_000), Some(2))
                .is_ok();
            write_attempts.push((t0, d.sim.now(), ok));
            if ok {
                uploaded.push(ln);
            }
            seq += 1;
        }
        if now >= next_delete && uploaded.len() > 4 {
            next_delete = now + secs(900.0);
            let ln = uploaded.remove(0);
            let t0 = d.sim.now();
            let ok = client.del(&ln).is_ok();
            write_attempts.push((t0, d.sim.now(), ok));
        }
        if now >= next_list {
            next_list = now + secs(120.0);
            let _ = client.list("/soak");
            if let Some(ln) = uploaded.last() {
                let _ = client.stat(ln);
            }
        }
        d.run_for(secs(30.0));
    }

    if let Some((host, _)) = &down {
        d.sim.restart(host);
    }
    // Let deletions, repairs and catch-up settle.
    d.run_for(4 * check_period);

    // Masterless gaps from the recorded tenures.
    let end_now = d.sim.now();
    let mut reigns: Vec<(Nanos, Nanos)> = Vec::new();
    for node in &d.ahash_nodes {
        for r in node.reigns() {
            reigns.push((r.start, r.end.unwrap_or(end_now)));
        }
    }
    reigns.sort();
    let mut gaps: Vec<(Nanos, Nanos)> = Vec::new();
    let mut cursor = start;
    for (s, e) in &reigns {
        if *s > cursor {
            gaps.push((cursor, *s));
        }
        cursor = cursor.max(*e);
    }
    if cursor < end_now {
        gaps.push((cursor, end_now));
    }

    // Write failures may only happen against (or overlapping) a gap.
    let mut bad_failures = Vec::new();
    for (t0, t1, ok) in &write_attempts {
        if *ok {
            continue;
        }
        let overlaps_gap = gaps.iter().any(|(s, e)| t0 < e && s < t1);
        if !overlaps_gap {
            bad_failures.push(format!("write failed at [{t0},{t1}] outside any election"));
        }
    }
    output.assert_true(
        "write-gaps-only-during-elections",
        bad_failures.is_empty(),
        format!("{bad_failures:?}"),
    );

    let report = fsck::check_deployment(&d, true);
    output.assert_true("fsck-clean", report.ok(), format!("{:?}", report.errors));
    output.assert_true(
        "workload-made-progress",
        duration == 0 || (uploaded.len() >= 4 && report.files == uploaded.len()),
        format!("{} files live, {} reachable", uploaded.len(), report.files),
    );

    let gap_rows: Vec<Vec<String>> = gaps
        .iter()
        .map(|(s, e)| vec![fmt_secs(*s), fmt_secs(*e), fmt_secs(e - s)])
        .collect();
    output.csv.insert(
        "soak_gaps.csv".to_string(),
        csv(&["gapStart", "gapEnd", "duration"], &gap_rows),
    );
    d.shutdown();
    SoakResult {
        output,
        write_gaps: gaps,
    }
}
