//! Deterministic scenario runner: builds full in-process deployments on
//! the simulation transport, injects faults on a virtual-time schedule,
//! samples replica states, asserts invariants, and writes CSV timelines.

pub mod custom;
pub mod deploy;
pub mod fsck;
pub mod sample;
pub mod scenarios;

use std::collections::BTreeMap;
use std::path::Path;

/// A named scenario: topology, fault schedule, seed. Identical
/// (scenario, seed) pairs produce byte-identical outputs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub topology: deploy::TopologySpec,
    pub schedule: Vec<(crate::vtime::Nanos, Event)>,
}

#[derive(Debug, Clone)]
pub enum Event {
    KillService(String),
    RestartService(String),
    /// Flip one byte of the n-th replica on a shepherd host.
    CorruptReplica { host: String, nth: usize },
    Sample,
}

/// One scenario's outputs: CSV files plus an assertion summary.
#[derive(Debug, Default)]
pub struct RunOutput {
    /// file name -> CSV text
    pub csv: BTreeMap<String, String>,
    /// assertion name -> pass/fail with detail
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl RunOutput {
    pub fn assert_true(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failed(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }

    pub fn summary_json(&self) -> String {
        let mut entries = Vec::new();
        for a in &self.assertions {
            entries.push(serde_json::json!({
                "name": a.name,
                "passed": a.passed,
                "detail": a.detail,
            }));
        }
        serde_json::to_string_pretty(&serde_json::json!({
            "passed": self.all_passed(),
            "assertions": entries,
        }))
        .expect("serialize summary")
    }

    /// Write every CSV and the summary into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in &self.csv {
            std::fs::write(dir.join(name), text)?;
        }
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        Ok(())
    }
}

/// Deterministic CSV assembly.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Least-squares exactness helper: fit y = a + b*x over the first two
/// points and return the maximum absolute residual across all points.
pub fn linear_fit_residual(points: &[(f64, f64)]) -> (f64, f64, f64) {
    assert!(points.len() >= 2);
    let (x0, y0) = points[0];
    let (x1, y1) = points[1];
    let b = (y1 - y0) / (x1 - x0);
    let a = y0 - b * x0;
    let mut max_resid: f64 = 0.0;
    for (x, y) in points {
        max_resid = max_resid.max((y - (a + b * x)).abs());
    }
    (a, b, max_resid)
}
