//! Scenario configuration.
//!
//! Scenarios are TOML documents with the sections `[network]`, `[mobility]`,
//! `[access]`, `[replication]`, `[demand.phase.<name>]` and `[output]`, plus a
//! few top-level run keys. Unknown keys are rejected. Overrides use dotted
//! paths such as `replication.s_R=12`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::access::AccessMode;
use crate::error::{Error, Result};
use crate::geometry::{Area, Region};
use crate::replication::ReplicationParams;

pub const SEED_ENV: &str = "REPLISIM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub warmup: f64,
    pub network: NetworkConfig,
    pub mobility: MobilityConfig,
    pub access: AccessConfig,
    pub replication: ReplicationConfig,
    pub demand: DemandConfig,
    pub output: OutputConfig,
    /// One-at-a-time parameter sweeps: dotted key to list of values.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            duration: 10_000.0,
            warmup: 500.0,
            network: NetworkConfig::default(),
            mobility: MobilityConfig::default(),
            access: AccessConfig::default(),
            replication: ReplicationConfig::default(),
            demand: DemandConfig::default(),
            output: OutputConfig::default(),
            sweep: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub nodes: usize,
    pub width: f64,
    pub height: f64,
    pub range: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            nodes: 320,
            width: 200.0,
            height: 200.0,
            range: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    RandomWaypoint,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub speed: f64,
    pub pause: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            model: MobilityModel::RandomWaypoint,
            speed: 3.0,
            pause: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccessConfig {
    pub mode: AccessMode,
    pub hops: u32,
    pub sectors: u32,
    pub sector_timeout: f64,
    pub scan_rounds: u32,
    pub scan_start_angle: f64,
    pub attempt_timeout: f64,
    pub max_attempts: u32,
    pub per_hop_delay: f64,
    pub per_hop_loss: f64,
}

impl Default for AccessConfig {
    fn default() -> Self {
        Self {
            mode: AccessMode::Perfect,
            hops: 5,
            sectors: 5,
            sector_timeout: 0.5,
            scan_rounds: 5,
            scan_start_angle: 0.0,
            attempt_timeout: 2.0,
            max_attempts: 5,
            per_hop_delay: 0.005,
            per_hop_loss: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationConfig {
    pub tau: f64,
    #[serde(rename = "s_R")]
    pub s_ref: f64,
    pub epsilon: f64,
    pub initial_replicas: usize,
    /// When false every expiry is a handover and |C| stays fixed.
    pub adaptive: bool,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            s_ref: 10.0,
            epsilon: 2.0,
            initial_replicas: 1,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub start: f64,
    pub rate: f64,
    /// `[x, y, width, height]`; absent means the whole area.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub phase: BTreeMap<String, PhaseConfig>,
}

impl Default for DemandConfig {
    fn default() -> Self {
        let mut phase = BTreeMap::new();
        phase.insert(
            "base".to_string(),
            PhaseConfig {
                start: 0.0,
                rate: 0.01,
                region: None,
            },
        );
        Self { phase }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// χ² against nodal and spatial uniformity at each snapshot.
    pub chi2: bool,
    /// χ² against a local-search k-median placement (costly on mobile runs).
    pub chi2_optimal: bool,
    pub hop_cdf: bool,
    pub reference_draws: usize,
    pub bins: usize,
    /// Sub-area tracked for χ² and replica fractions, `[x, y, width, height]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 4]>,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub query_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            chi2: true,
            chi2_optimal: false,
            hop_cdf: true,
            reference_draws: 200,
            bins: 10,
            region: None,
            convergence_window: 5,
            convergence_tol: 0.02,
            query_log: true,
        }
    }
}

fn region_from(r: [f64; 4]) -> Region {
    Region {
        x: r[0],
        y: r[1],
        width: r[2],
        height: r[3],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandPhase {
    pub start: f64,
    pub rate: f64,
    pub region: Option<Region>,
}

/// Time-ordered demand phases.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    pub phases: Vec<DemandPhase>,
}

impl DemandProfile {
    pub fn constant(rate: f64) -> Self {
        Self {
            phases: vec![DemandPhase {
                start: 0.0,
                rate,
                region: None,
            }],
        }
    }

    pub fn phase_index_at(&self, t: f64) -> usize {
        self.phases.partition_point(|p| p.start <= t).saturating_sub(1)
    }

    pub fn phase_at(&self, t: f64) -> &DemandPhase {
        &self.phases[self.phase_index_at(t)]
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "document".into()),
            msg: e.message().to_string(),
        })?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: SimConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config {
                    key: offending_key(e.message()),
                    msg: e.message().to_string(),
                })?;
        cfg.validate()?;
        if !cfg.sweep.is_empty() {
            cfg.variants()?;
        }
        Ok(cfg)
    }

    /// Expands `[sweep]` into labelled configurations, one per swept value,
    /// each varying a single key from this base. Without a sweep the base
    /// itself is the only variant, with an empty label.
    pub fn variants(&self) -> Result<Vec<(String, SimConfig)>> {
        if self.sweep.is_empty() {
            return Ok(vec![(String::new(), self.clone())]);
        }
        let mut base = self.clone();
        base.sweep.clear();
        let text = base.to_toml_string();
        let mut out = Vec::new();
        for (key, values) in &self.sweep {
            for v in values {
                let literal = v.to_string();
                let label = format!("{key}={}", literal.trim_matches('"'));
                let cfg = SimConfig::from_toml_str(&text, &[(key.clone(), literal)])?;
                out.push((label, cfg));
            }
        }
        Ok(out)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `REPLISIM_SEED` if set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config {
                key: SEED_ENV.into(),
                msg: format!("not an unsigned integer: {v}"),
            })?;
        }
        Ok(())
    }

    pub fn area(&self) -> Result<Area> {
        Area::new(self.network.width, self.network.height).map_err(|_| Error::Config {
            key: "network.width/height".into(),
            msg: "area must be non-empty".into(),
        })
    }

    pub fn replication_params(&self) -> Result<ReplicationParams> {
        ReplicationParams::new(
            self.replication.tau,
            self.replication.s_ref,
            self.replication.epsilon,
        )
    }

    pub fn demand_profile(&self) -> DemandProfile {
        let mut phases: Vec<DemandPhase> = self
            .demand
            .phase
            .values()
            .map(|p| DemandPhase {
                start: p.start,
                rate: p.rate,
                region: p.region.map(region_from),
            })
            .collect();
        phases.sort_by(|a, b| a.start.total_cmp(&b.start));
        if phases.first().is_none_or(|p| p.start > 0.0) {
            phases.insert(
                0,
                DemandPhase {
                    start: 0.0,
                    rate: 0.0,
                    region: None,
                },
            );
        }
        DemandProfile { phases }
    }

    pub fn tracked_region(&self) -> Option<Region> {
        self.output.region.map(region_from)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.duration > 0.0) {
            return bad("duration", "must be positive");
        }
        if !(self.warmup >= 0.0) || self.warmup > self.duration {
            return bad("warmup", "must lie in [0, duration]");
        }
        if self.network.nodes == 0 {
            return bad("network.nodes", "must be at least 1");
        }
        if !(self.network.width > 0.0 && self.network.height > 0.0) {
            return bad("network.width", "area must be non-empty");
        }
        if !(self.network.range > 0.0) {
            return bad("network.range", "must be positive");
        }
        if self.mobility.model == MobilityModel::RandomWaypoint && !(self.mobility.speed > 0.0) {
            return bad("mobility.speed", "must be positive for random waypoint");
        }
        if !(self.mobility.pause >= 0.0) {
            return bad("mobility.pause", "must be non-negative");
        }
        let a = &self.access;
        if a.hops < 1 {
            return bad("access.hops", "must be at least 1");
        }
        if a.sectors < 1 {
            return bad("access.sectors", "must be at least 1");
        }
        if a.scan_rounds < 1 {
            return bad("access.scan_rounds", "must be at least 1");
        }
        if a.max_attempts < 1 {
            return bad("access.max_attempts", "must be at least 1");
        }
        if !(a.sector_timeout > 0.0) {
            return bad("access.sector_timeout", "must be positive");
        }
        if !(a.attempt_timeout > 0.0) {
            return bad("access.attempt_timeout", "must be positive");
        }
        if !(a.per_hop_delay > 0.0) {
            return bad("access.per_hop_delay", "must be positive");
        }
        if !(0.0..1.0).contains(&a.per_hop_loss) {
            return bad("access.per_hop_loss", "must lie in [0, 1)");
        }
        let r = &self.replication;
        if !(r.tau > 0.0) {
            return bad("replication.tau", "must be positive");
        }
        if !(r.s_ref >= 0.0) {
            return bad("replication.s_R", "must be non-negative");
        }
        if !(r.epsilon >= 0.0) {
            return bad("replication.epsilon", "must be non-negative");
        }
        if r.initial_replicas > self.network.nodes {
            return bad("replication.initial_replicas", "exceeds node count");
        }
        if self.demand.phase.is_empty() {
            return bad("demand.phase", "at least one phase is required");
        }
        for (name, p) in &self.demand.phase {
            if !(p.rate >= 0.0) {
                return bad(&format!("demand.phase.{name}.rate"), "must be non-negative");
            }
            if !(p.start >= 0.0) {
                return bad(&format!("demand.phase.{name}.start"), "must be non-negative");
            }
            if let Some(reg) = p.region {
                if !(reg[2] > 0.0 && reg[3] > 0.0) {
                    return bad(&format!("demand.phase.{name}.region"), "must be non-empty");
                }
            }
        }
        if self.output.bins < 1 {
            return bad("output.bins", "must be at least 1");
        }
        if self.output.convergence_window < 1 {
            return bad("output.convergence_window", "must be at least 1");
        }
        Ok(())
    }
}

fn offending_key(msg: &str) -> String {
    // serde messages quote the field in backticks: "unknown field `foo`, expected ..."
    msg.split('`').nth(1).unwrap_or("document").to_string()
}

/// Sets `dotted.key` in `table`; the value is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            msg: "malformed override key".into(),
        });
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            msg: format!("`{part}` is not a section"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Splits `KEY=VAL`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config {
            key: s.into(),
            msg: "override must be KEY=VAL".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = SimConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.network.nodes, 320);
        assert_eq!(c.replication.s_ref, 10.0);
        assert_eq!(c.access.hops, 5);
        assert_eq!(c.demand_profile().phases.len(), 1);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = SimConfig::from_toml_str("[replication]\nsR = 3\n", &[]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "sR"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(SimConfig::from_toml_str("[bogus]\nx = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let ov = vec![parse_override("replication.s_R=12").unwrap()];
        let c = SimConfig::from_toml_str("", &ov).unwrap();
        assert_eq!(c.replication.s_ref, 12.0);
        let ov = vec![parse_override("access.mode=scan").unwrap()];
        let c = SimConfig::from_toml_str("", &ov).unwrap();
        assert_eq!(c.access.mode, AccessMode::Scan);
        let ov = vec![parse_override("replication.nope=1").unwrap()];
        assert!(SimConfig::from_toml_str("", &ov).is_err());
    }

    #[test]
    fn validation_failures() {
        for (k, v) in [
            ("access.hops", "0"),
            ("access.sectors", "0"),
            ("network.width", "0.0"),
            ("replication.tau", "-1.0"),
        ] {
            let ov = vec![(k.to_string(), v.to_string())];
            match SimConfig::from_toml_str("", &ov) {
                Err(Error::Config { key, .. }) => assert_eq!(key, k),
                other => panic!("{k}: unexpected {other:?}"),
            }
        }
        let neg = "[demand.phase.base]\nstart = 0.0\nrate = -0.1\n";
        assert!(SimConfig::from_toml_str(neg, &[]).is_err());
    }

    #[test]
    fn phases_sorted_by_start() {
        let text = "[demand.phase.b]\nstart = 5000.0\nrate = 0.02\n[demand.phase.a]\nstart = 0.0\nrate = 0.01\n";
        let p = SimConfig::from_toml_str(text, &[]).unwrap().demand_profile();
        assert_eq!(p.phases.len(), 2);
        assert_eq!(p.phase_at(4999.0).rate, 0.01);
        assert_eq!(p.phase_at(5000.0).rate, 0.02);
    }

    #[test]
    fn sweep_expands_one_key_at_a_time() {
        let text = "[sweep]\n\"replication.tau\" = [20.0, 50.0]\n\"access.mode\" = [\"scan\"]\n";
        let c = SimConfig::from_toml_str(text, &[]).unwrap();
        let v = c.variants().unwrap();
        let labels: Vec<&str> = v.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["access.mode=scan", "replication.tau=20.0", "replication.tau=50.0"]);
        assert_eq!(v[0].1.access.mode, AccessMode::Scan);
        assert_eq!(v[0].1.replication.tau, 100.0);
        assert_eq!(v[2].1.replication.tau, 50.0);
        assert!(v.iter().all(|(_, c)| c.sweep.is_empty()));
        let bad = "[sweep]\n\"replication.bogus\" = [1]\n";
        assert!(SimConfig::from_toml_str(bad, &[]).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = SimConfig::default();
        let back = SimConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(c, back);
    }
}
