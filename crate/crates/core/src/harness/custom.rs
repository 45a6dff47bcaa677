//! Declarative scenarios: a config file names the topology, a fault
//! schedule and a light upload workload; the runner executes it on the
//! simulation, samples every 15 virtual seconds and ends with a full
//! integrity check.
//!
//! ```text
//! [scenario]
//! seed = 7
//! duration_secs = 300
//!
//! [topology]
//! ahash = 2
//! librarians = 1
//! bartenders = 1
//! shepherds = 3
//! needed_replicas = 2
//! heartbeat_secs = 15
//!
//! [schedule]
//! 30 = kill shep1
//! 95 = restart shep1
//! 120 = corrupt shep2 0
//! ```

use crate::content::Content;
use crate::harness::deploy::{Deployment, TopologySpec};
use crate::harness::sample::take_sample;
use crate::harness::{csv, fsck, Event, RunOutput, Scenario};
use crate::hed::config::{Config, ConfigError};
use crate::meta::ReplicaState;
use crate::vtime::{fmt_secs, secs};

impl Scenario {
    pub fn from_config(cfg: &Config) -> Result<Scenario, ConfigError> {
        let seed = cfg.get_u64("scenario", "seed", 1)?;
        let name = cfg
            .get("scenario", "name")
            .unwrap_or("custom")
            .to_string();
        let topology = TopologySpec {
            seed,
            ahash_nodes: cfg.get_u64("topology", "ahash", 1)? as usize,
            librarians: cfg.get_u64("topology", "librarians", 1)? as usize,
            bartenders: cfg.get_u64("topology", "bartenders", 1)? as usize,
            shepherds: cfg.get_u64("topology", "shepherds", 2)? as usize,
            shepherd_capacity: cfg.get_u64("topology", "capacity_mb", 100_000)? * 1_000_000,
            default_needed: cfg.get_u64("topology", "needed_replicas", 2)? as u32,
            heartbeat_period: secs(cfg.get_f64("topology", "heartbeat_secs", 15.0)?),
            grace: secs(cfg.get_f64("topology", "grace_secs", 5.0)?),
            monitor_period: secs(cfg.get_f64("topology", "monitor_secs", 5.0)?),
            check_period: secs(cfg.get_f64("topology", "check_secs", 20.0)?),
            master_timeout: secs(cfg.get_f64("topology", "master_timeout_secs", 10.0)?),
            ..TopologySpec::default()
        };
        let mut schedule = Vec::new();
        let duration = secs(cfg.get_f64("scenario", "duration_secs", 120.0)?);
        if let Some(entries) = cfg.section("schedule") {
            for (at, what) in entries {
                let at_ns = secs(at.parse::<f64>().map_err(|_| {
                    ConfigError::Invalid("schedule".into(), at.clone(), what.clone())
                })?);
                let mut parts = what.split_whitespace();
                let event = match (parts.next(), parts.next(), parts.next()) {
                    (Some("kill"), Some(host), _) => Event::KillService(host.to_string()),
                    (Some("restart"), Some(host), _) => Event::RestartService(host.to_string()),
                    (Some("corrupt"), Some(host), nth) => Event::CorruptReplica {
                        host: host.to_string(),
                        nth: nth.and_then(|n| n.parse().ok()).unwrap_or(0),
                    },
                    (Some("sample"), _, _) => Event::Sample,
                    _ => {
                        return Err(ConfigError::Invalid(
                            "schedule".into(),
                            at.clone(),
                            what.clone(),
                        ))
                    }
                };
                schedule.push((at_ns, event));
            }
        }
        schedule.push((duration, Event::Sample));
        schedule.sort_by_key(|(at, _)| *at);
        Ok(Scenario {
            name,
            seed,
            topology,
            schedule,
        })
    }

    /// Execute: periodic uploads, the fault schedule, 15 s samples, and a
    /// final integrity check after the dust settles.
    pub fn run(&self) -> RunOutput {
        let mut output = RunOutput::default();
        let d = Deployment::build(self.topology.clone());
        d.wait_for_master(secs(30.0));
        d.run_for(secs(2.0));
        let client = d.driver_client("CN=user");
        client.mkdir("/data").expect("create workload root");

        let end = self.schedule.last().map(|(at, _)| *at).unwrap_or(0);
        let mut schedule = self.schedule.clone();
        let mut rows = Vec::new();
        let mut next_sample = d.sim.now();
        let mut next_upload = d.sim.now();
        let mut seq = 0u64;
        let start = d.sim.now();

        while d.sim.now() < start + end {
            let now_rel = d.sim.now() - start;
            while let Some((at, event)) = schedule.first().cloned() {
                if at > now_rel {
                    break;
                }
                schedule.remove(0);
                match event {
                    Event::KillService(host) => {
                        if let Some(i) = d.ahash_hosts.iter().position(|h| *h == host) {
                            d.ahash_nodes[i].mark_stopped(d.sim.now());
                        }
                        d.sim.kill(&host);
                    }
                    Event::RestartService(host) => d.sim.restart(&host),
                    Event::CorruptReplica { host, nth } => {
                        if let Some(i) = d.shepherd_hosts.iter().position(|h| *h == host) {
                            let store = d.shepherds[i].store_handle();
                            let refs: Vec<String> = d.shepherds[i]
                                .records()
                                .iter()
                                .filter(|(_, r)| r.state == ReplicaState::Alive)
                                .map(|(k, _)| k.clone())
                                .collect();
                            if let Some(reference) = refs.get(nth) {
                                store.corrupt(reference, 1, 0xff);
                            }
                        }
                    }
                    Event::Sample => {
                        let s = take_sample(&d);
                        rows.push(s);
                    }
                }
            }
            if d.sim.now() >= next_upload {
                next_upload += secs(30.0);
                let ln = format!("/data/f{seq:04}");
                let _ = client.put(&ln, Content::synthetic(31_000 + seq, 2_000_000), None);
                seq += 1;
            }
            if d.sim.now() >= next_sample {
                next_sample += secs(15.0);
                rows.push(take_sample(&d));
            }
            d.run_for(secs(1.0));
        }

        // Settle and check.
        d.run_for(3 * self.topology.check_period);
        rows.push(take_sample(&d));
        let report = fsck::check_deployment(&d, true);
        output.assert_true("fsck", report.ok(), format!("{:?}", report.errors));
        output.assert_true(
            "uploads-landed",
            report.files > 0,
            format!("{} files reachable", report.files),
        );

        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|s| {
                vec![
                    fmt_secs(s.at),
                    s.alive.to_string(),
                    s.offline.to_string(),
                    s.creating.to_string(),
                    s.thirdwheel.to_string(),
                    s.invalid.to_string(),
                    s.messages.to_string(),
                    s.bytes.to_string(),
                ]
            })
            .collect();
        output.csv.insert(
            format!("{}_timeline.csv", self.name),
            csv(
                &["time", "ALIVE", "OFFLINE", "CREATING", "THIRDWHEEL", "INVALID", "messages", "bytes"],
                &csv_rows,
            ),
        );
        d.shutdown();
        output
    }
}
