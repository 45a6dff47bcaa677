//! Builds whole simulated deployments: N store nodes, librarians,
//! bartenders and shepherds on their own hosts, with the trust matrix and
//! timing knobs of the experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::ahash::log::DiskRegistry;
use crate::ahash::{AHashConfig, AHashNode, Role};
use crate::bartender::policy::PolicyRule;
use crate::bartender::{Bartender, BartenderConfig};
use crate::client::{SimTransport, StorageClient};
use crate::hed::sim::{NetProfile, Sim};
use crate::hed::{ServiceSpec, WorkerPoolConfig};
use crate::librarian::{Librarian, LibrarianConfig};
use crate::shepherd::backend::ShepherdDiskRegistry;
use crate::shepherd::{Shepherd, ShepherdConfig};
use crate::vtime::{secs, Nanos};

#[derive(Debug, Clone)]
pub struct TopologySpec {
    pub seed: u64,
    pub ahash_nodes: usize,
    pub librarians: usize,
    pub bartenders: usize,
    pub shepherds: usize,
    pub shepherd_capacity: u64,
    pub default_needed: u32,
    pub profile: NetProfile,
    pub heartbeat_period: Nanos,
    pub grace: Nanos,
    pub monitor_period: Nanos,
    pub check_period: Nanos,
    pub ticket_ttl: Nanos,
    pub master_timeout: Nanos,
    pub bartender_pool: WorkerPoolConfig,
    pub bartender_cpu: Nanos,
    pub root_policy: Vec<PolicyRule>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec {
            seed: 1,
            ahash_nodes: 1,
            librarians: 1,
            bartenders: 1,
            shepherds: 0,
            shepherd_capacity: 100 * 1_000_000_000,
            default_needed: 2,
            profile: NetProfile::LAN,
            heartbeat_period: secs(60.0),
            grace: secs(60.0),
            monitor_period: secs(15.0),
            check_period: secs(60.0),
            ticket_ttl: secs(300.0),
            master_timeout: secs(10.0),
            bartender_pool: WorkerPoolConfig::default(),
            bartender_cpu: 0,
            root_policy: vec![PolicyRule::allow_any_all()],
        }
    }
}

pub struct Deployment {
    pub sim: Sim,
    pub spec: TopologySpec,
    pub ahash_nodes: Vec<Arc<AHashNode>>,
    pub ahash_hosts: Vec<String>,
    pub ahash_urls: Vec<String>,
    pub librarians: Vec<Arc<Librarian>>,
    pub librarian_hosts: Vec<String>,
    pub librarian_urls: Vec<String>,
    pub bartenders: Vec<Arc<Bartender>>,
    pub bartender_hosts: Vec<String>,
    pub bartender_urls: Vec<String>,
    pub shepherds: Vec<Arc<Shepherd>>,
    pub shepherd_hosts: Vec<String>,
    pub shepherd_urls: Vec<String>,
    pub disks: DiskRegistry,
    pub shepherd_disks: ShepherdDiskRegistry,
    client_counter: std::sync::atomic::AtomicU64,
}

fn dns(hosts: &[String]) -> BTreeSet<String> {
    hosts.iter().map(|h| format!("CN={h}")).collect()
}

impl Deployment {
    pub fn build(spec: TopologySpec) -> Deployment {
        let sim = Sim::new(spec.seed);
        let disks = DiskRegistry::new();
        let shepherd_disks = ShepherdDiskRegistry::new();

        let ahash_hosts: Vec<String> =
            (1..=spec.ahash_nodes).map(|i| format!("ahash{i}")).collect();
        let librarian_hosts: Vec<String> =
            (1..=spec.librarians).map(|i| format!("lib{i}")).collect();
        let bartender_hosts: Vec<String> =
            (1..=spec.bartenders).map(|i| format!("bart{i}")).collect();
        let shepherd_hosts: Vec<String> =
            (1..=spec.shepherds).map(|i| format!("shep{i}")).collect();

        let ahash_urls: Vec<String> = ahash_hosts
            .iter()
            .map(|h| format!("sim://{h}/AHash"))
            .collect();
        let librarian_urls: Vec<String> = librarian_hosts
            .iter()
            .map(|h| format!("sim://{h}/Librarian"))
            .collect();
        let bartender_urls: Vec<String> = bartender_hosts
            .iter()
            .map(|h| format!("sim://{h}/Bartender"))
            .collect();
        let shepherd_urls: Vec<String> = shepherd_hosts
            .iter()
            .map(|h| format!("sim://{h}/Shepherd"))
            .collect();

        sim.set_network(spec.profile.latency, spec.profile.bandwidth);

        // Store nodes.
        let peers: BTreeMap<String, String> = ahash_hosts
            .iter()
            .zip(&ahash_urls)
            .map(|(h, u)| (h.clone(), u.clone()))
            .collect();
        let mut ahash_trusted = dns(&ahash_hosts);
        ahash_trusted.extend(dns(&librarian_hosts));
        ahash_trusted.insert("CN=admin".to_string());
        let mut ahash_nodes = Vec::new();
        for (i, host) in ahash_hosts.iter().enumerate() {
            sim.add_host(host, WorkerPoolConfig::default());
            let mut cfg = AHashConfig::new(host, &ahash_urls[i], peers.clone());
            cfg.master_timeout = spec.master_timeout;
            cfg.tick_phase = (i as u64) * 37_000_000;
            let node = AHashNode::new(cfg, disks.disk(host));
            sim.register_service(
                host,
                ServiceSpec {
                    name: "AHash".to_string(),
                    dn: format!("CN={host}"),
                    trusted: ahash_trusted.clone(),
                    service: node.clone(),
                },
            )
            .expect("register ahash");
            ahash_nodes.push(node);
        }

        // Librarians.
        let mut librarian_trusted = dns(&bartender_hosts);
        librarian_trusted.extend(dns(&shepherd_hosts));
        librarian_trusted.extend(dns(&librarian_hosts));
        librarian_trusted.insert("CN=admin".to_string());
        let mut librarians = Vec::new();
        for host in &librarian_hosts {
            sim.add_host(host, WorkerPoolConfig::default());
            let mut cfg = LibrarianConfig::new(ahash_urls.clone());
            cfg.heartbeat_period = spec.heartbeat_period;
            cfg.grace = spec.grace;
            cfg.monitor_period = spec.monitor_period;
            cfg.root_policy = spec.root_policy.clone();
            let lib = Librarian::new(cfg);
            sim.register_service(
                host,
                ServiceSpec {
                    name: "Librarian".to_string(),
                    dn: format!("CN={host}"),
                    trusted: librarian_trusted.clone(),
                    service: lib.clone(),
                },
            )
            .expect("register librarian");
            librarians.push(lib);
        }

        // Bartenders: client ops are public; add_replica trusts shepherds.
        let mut bartender_trusted = dns(&shepherd_hosts);
        bartender_trusted.insert("CN=admin".to_string());
        let mut bartenders = Vec::new();
        for host in &bartender_hosts {
            sim.add_host(host, spec.bartender_pool);
            if spec.bartender_cpu > 0 {
                sim.set_cpu_per_request(host, spec.bartender_cpu);
            }
            let mut cfg = BartenderConfig::new(librarian_urls.clone());
            cfg.default_needed_replicas = spec.default_needed;
            let bart = Bartender::new(cfg);
            sim.register_service(
                host,
                ServiceSpec {
                    name: "Bartender".to_string(),
                    dn: format!("CN={host}"),
                    trusted: bartender_trusted.clone(),
                    service: bart.clone(),
                },
            )
            .expect("register bartender");
            bartenders.push(bart);
        }

        // Shepherds: service ops come from bartenders (and the admin).
        let mut shepherd_trusted = dns(&bartender_hosts);
        shepherd_trusted.insert("CN=admin".to_string());
        let mut shepherds = Vec::new();
        for (i, host) in shepherd_hosts.iter().enumerate() {
            sim.add_host(host, WorkerPoolConfig::default());
            let mut cfg = ShepherdConfig::new(&shepherd_urls[i], &format!("sim://{host}"));
            cfg.librarian_urls = librarian_urls.clone();
            cfg.bartender_urls = bartender_urls.clone();
            cfg.heartbeat_period = spec.heartbeat_period;
            cfg.check_period = spec.check_period;
            cfg.check_phase = secs(1.0) * (i as u64 + 1);
            cfg.ticket_ttl = spec.ticket_ttl;
            let shep = Shepherd::new(cfg, shepherd_disks.disk(host, spec.shepherd_capacity));
            sim.register_service(
                host,
                ServiceSpec {
                    name: "Shepherd".to_string(),
                    dn: format!("CN={host}"),
                    trusted: shepherd_trusted.clone(),
                    service: shep.clone(),
                },
            )
            .expect("register shepherd");
            sim.set_transfer_handler(host, &format!("CN={host}"), shep.clone());
            shepherds.push(shep);
        }

        for host in ahash_hosts
            .iter()
            .chain(&librarian_hosts)
            .chain(&bartender_hosts)
            .chain(&shepherd_hosts)
        {
            sim.start_host(host);
        }

        Deployment {
            sim,
            spec,
            ahash_nodes,
            ahash_hosts,
            ahash_urls,
            librarians,
            librarian_hosts,
            librarian_urls,
            bartenders,
            bartender_hosts,
            bartender_urls,
            shepherds,
            shepherd_hosts,
            shepherd_urls,
            disks,
            shepherd_disks,
            client_counter: std::sync::atomic::AtomicU64::new(0),
        }
    }

    /// Block (in virtual time) until a master exists.
    pub fn wait_for_master(&self, budget: Nanos) -> usize {
        let deadline = self.sim.now() + budget;
        loop {
            if let Some(idx) = self
                .ahash_nodes
                .iter()
                .position(|n| n.view().role == Role::Master)
            {
                return idx;
            }
            assert!(self.sim.now() < deadline, "no master within budget");
            self.sim.run_for(secs(0.2));
        }
    }

    /// A driver-side client handle (runs on the scenario driver activity).
    pub fn driver_client(&self, identity: &str) -> StorageClient<SimTransport> {
        let port = self.sim.driver_port(identity);
        let transport = SimTransport::new(self.sim.clone(), port, self.bartender_urls.clone());
        StorageClient::new(transport, 5, secs(0.5), self.spec.default_needed)
    }

    /// Host name for a dedicated simulated client machine.
    pub fn add_client_host(&self, label: &str) -> String {
        let n = self
            .client_counter
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let host = format!("client-{label}-{n}");
        self.sim.add_host(&host, WorkerPoolConfig::default());
        host
    }

    pub fn run_for(&self, ns: Nanos) {
        self.sim.run_for(ns);
    }

    pub fn shutdown(&self) {
        self.sim.shutdown();
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.sim.shutdown();
    }
}
