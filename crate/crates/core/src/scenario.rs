//! Scenario files, workload generation and the run/compare pipeline.
//!
//! A scenario is a versioned JSON document describing hosts, VM profiles,
//! how many of each are spot or on-demand, and how submission delays and
//! runtimes are drawn. The same seed always yields the same workload, so
//! policies can be compared on identical input.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{HlemParams, PolicyKind};
use crate::broker::{BrokerConfig, DynamicVm, SpotParams};
use crate::cloud::{CloudSim, RunResult, VmRequest};
use crate::error::{ConfigError, Error, FieldError, Result};
use crate::infrastructure::{Cloudlet, CloudletId, Host, HostId, HostSpec, VmId, VmSpec};
use crate::kernel::{fnv1a, EngineConfig};
use crate::report::{self, fmt2, Report};
use crate::trace::{self, SchemaMap, SyntheticTraceConfig, TraceOptions, TraceStats};

pub const SCHEMA_VERSION: u32 = 1;

/// Scenarios shipped with the crate, addressable as `bundled:<name>`.
pub const BUNDLED: [(&str, &str); 4] = [
    ("randomly-generated", include_str!("../scenarios/randomly-generated.json")),
    ("restarting-interrupted", include_str!("../scenarios/restarting-interrupted.json")),
    ("comparison", include_str!("../scenarios/comparison.json")),
    ("trace", include_str!("../scenarios/trace.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostGroup {
    pub name: String,
    pub count: u32,
    pub spec: HostSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmProfile {
    pub name: String,
    pub spec: VmSpec,
    #[serde(default)]
    pub spot_count: u32,
    #[serde(default)]
    pub on_demand_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Applied to every spot VM that does not override it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotDefaults {
    pub params: SpotParams,
    pub persistent: bool,
    pub waiting_time: Option<f64>,
}

impl Default for SpotDefaults {
    fn default() -> Self {
        Self { params: SpotParams::default(), persistent: true, waiting_time: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnDemandDefaults {
    pub persistent: bool,
    pub waiting_time: Option<f64>,
}

impl Default for OnDemandDefaults {
    fn default() -> Self {
        Self { persistent: true, waiting_time: None }
    }
}

/// Randomized submissions drawn from the VM profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Spot VMs submitted at time zero; the rest are delayed. All when absent.
    #[serde(default)]
    pub immediate_spot: Option<u32>,
    #[serde(default)]
    pub immediate_on_demand: u32,
    /// Submission delay of the delayed VMs, seconds.
    pub delay: Range,
    /// Runtime of each VM's cloudlet on an otherwise idle VM, seconds.
    pub duration: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    Spot,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudletSpec {
    pub length: f64,
    /// Defaults to the VM's PE count.
    #[serde(default)]
    pub pes: Option<u32>,
    #[serde(default)]
    pub start_delay: f64,
}

/// A hand-written VM, listed before any generated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitVm {
    pub label: String,
    pub kind: KindName,
    /// Profile name; alternative to `spec`.
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub spec: Option<VmSpec>,
    #[serde(default)]
    pub delay: f64,
    #[serde(default)]
    pub cloudlets: Vec<CloudletSpec>,
    /// Adds one cloudlet that runs this many seconds on the idle VM.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub spot: Option<SpotParams>,
    #[serde(default)]
    pub persistent: Option<bool>,
    #[serde(default)]
    pub waiting_time: Option<f64>,
}

/// An externally requested interruption of a named VM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedInterruption {
    pub vm: String,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TraceSource {
    Files {
        machines: PathBuf,
        tasks: PathBuf,
        #[serde(default)]
        schema: Option<PathBuf>,
    },
    Synthetic(SyntheticTraceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub source: TraceSource,
    #[serde(default)]
    pub options: TraceOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub hlem: HlemParams,
    #[serde(default)]
    pub broker: BrokerConfig,
    /// Multiplies host and VM counts.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub hosts: Vec<HostGroup>,
    #[serde(default)]
    pub spot_defaults: SpotDefaults,
    #[serde(default)]
    pub on_demand_defaults: OnDemandDefaults,
    #[serde(default)]
    pub vm_profiles: Vec<VmProfile>,
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub vms: Vec<ExplicitVm>,
    #[serde(default)]
    pub interruptions: Vec<ScriptedInterruption>,
    #[serde(default)]
    pub trace: Option<TraceSection>,
    #[serde(default)]
    pub record_scorecards: bool,
    /// Directory that relative trace paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Hlem
}

fn default_scale() -> f64 {
    1.0
}

fn check_nonneg(errs: &mut Vec<FieldError>, path: &str, v: f64) {
    if !(v >= 0.0 && v.is_finite()) {
        errs.push(FieldError::new(path, format!("must be a finite number >= 0, got {v}")));
    }
}

fn check_spot(errs: &mut Vec<FieldError>, path: &str, p: &SpotParams) {
    check_nonneg(errs, &format!("{path}.minimum_running_time"), p.minimum_running_time);
    check_nonneg(errs, &format!("{path}.warning_time"), p.warning_time);
    check_nonneg(errs, &format!("{path}.hibernation_time"), p.hibernation_time);
}

fn check_range(errs: &mut Vec<FieldError>, path: &str, r: &Range) {
    check_nonneg(errs, &format!("{path}.min"), r.min);
    check_nonneg(errs, &format!("{path}.max"), r.max);
    if r.max < r.min {
        errs.push(FieldError::new(format!("{path}.max"), "must be >= min"));
    }
}

fn check_host(errs: &mut Vec<FieldError>, path: &str, s: &HostSpec) {
    for (name, ok) in [
        ("pes", s.pes > 0),
        ("mips_per_pe", s.mips_per_pe > 0.0 && s.mips_per_pe.is_finite()),
        ("ram", s.ram > 0),
        ("bw", s.bw > 0),
        ("storage", s.storage > 0),
    ] {
        if !ok {
            errs.push(FieldError::new(format!("{path}.{name}"), "must be > 0"));
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates; every problem is reported with its JSON path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError(vec![FieldError::new(if path == "." { "$".into() } else { path }, e.into_inner().to_string())])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file, or a bundled scenario when given `bundled:<name>`.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix("bundled:") {
            let text = bundled(name).ok_or_else(|| {
                let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
                Error::Usage(format!("no bundled scenario `{name}` (available: {})", names.join(", ")))
            })?;
            return Ok(Self::from_json(text)?);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.version != SCHEMA_VERSION {
            errs.push(FieldError::new("version", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.version)));
        }
        if let Err(e) = self.engine.validate() {
            errs.push(FieldError::new("engine", e.to_string()));
        }
        if let Err(e) = self.hlem.validate() {
            errs.push(FieldError::new("hlem", e));
        }
        check_nonneg(&mut errs, "broker.vm_destruction_delay", self.broker.vm_destruction_delay);
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            errs.push(FieldError::new("scale", "must be > 0"));
        }
        if self.hosts.is_empty() && self.trace.is_none() {
            errs.push(FieldError::new("hosts", "at least one host group is required"));
        }
        let mut names = HashSet::new();
        for (i, h) in self.hosts.iter().enumerate() {
            if !names.insert(h.name.as_str()) {
                errs.push(FieldError::new(format!("hosts[{i}].name"), format!("duplicate host group `{}`", h.name)));
            }
            check_host(&mut errs, &format!("hosts[{i}].spec"), &h.spec);
        }
        check_spot(&mut errs, "spot_defaults.params", &self.spot_defaults.params);
        if let Some(w) = self.spot_defaults.waiting_time {
            check_nonneg(&mut errs, "spot_defaults.waiting_time", w);
        }
        if let Some(w) = self.on_demand_defaults.waiting_time {
            check_nonneg(&mut errs, "on_demand_defaults.waiting_time", w);
        }
        let mut profiles = HashSet::new();
        for (i, p) in self.vm_profiles.iter().enumerate() {
            if !profiles.insert(p.name.as_str()) {
                errs.push(FieldError::new(format!("vm_profiles[{i}].name"), format!("duplicate profile `{}`", p.name)));
            }
            if let Some(f) = p.spec.invalid_field() {
                errs.push(FieldError::new(format!("vm_profiles[{i}].spec.{f}"), "must be > 0"));
            }
        }
        if let Some(w) = &self.workload {
            check_range(&mut errs, "workload.delay", &w.delay);
            check_range(&mut errs, "workload.duration", &w.duration);
            let spot: u32 = self.vm_profiles.iter().map(|p| p.spot_count).sum();
            let od: u32 = self.vm_profiles.iter().map(|p| p.on_demand_count).sum();
            if w.immediate_spot.is_some_and(|n| n > spot) {
                errs.push(FieldError::new("workload.immediate_spot", format!("exceeds the {spot} spot VMs in vm_profiles")));
            }
            if w.immediate_on_demand > od {
                errs.push(FieldError::new(
                    "workload.immediate_on_demand",
                    format!("exceeds the {od} on-demand VMs in vm_profiles"),
                ));
            }
        }
        let mut labels = HashSet::new();
        for (i, v) in self.vms.iter().enumerate() {
            let path = format!("vms[{i}]");
            if !labels.insert(v.label.as_str()) {
                errs.push(FieldError::new(format!("{path}.label"), format!("duplicate VM label `{}`", v.label)));
            }
            match (&v.profile, &v.spec) {
                (Some(_), Some(_)) => errs.push(FieldError::new(&path, "give either `profile` or `spec`, not both")),
                (None, None) => errs.push(FieldError::new(&path, "one of `profile` or `spec` is required")),
                (Some(p), None) if !profiles.contains(p.as_str()) => {
                    errs.push(FieldError::new(format!("{path}.profile"), format!("unknown profile `{p}`")))
                }
                (None, Some(s)) => {
                    if let Some(f) = s.invalid_field() {
                        errs.push(FieldError::new(format!("{path}.spec.{f}"), "must be > 0"));
                    }
                }
                _ => {}
            }
            check_nonneg(&mut errs, &format!("{path}.delay"), v.delay);
            if let Some(d) = v.duration {
                check_nonneg(&mut errs, &format!("{path}.duration"), d);
            }
            if let Some(w) = v.waiting_time {
                check_nonneg(&mut errs, &format!("{path}.waiting_time"), w);
            }
            if let Some(s) = &v.spot {
                if v.kind != KindName::Spot {
                    errs.push(FieldError::new(format!("{path}.spot"), "only spot VMs take spot parameters"));
                }
                check_spot(&mut errs, &format!("{path}.spot"), s);
            }
            for (j, c) in v.cloudlets.iter().enumerate() {
                if !(c.length > 0.0 && c.length.is_finite()) {
                    errs.push(FieldError::new(format!("{path}.cloudlets[{j}].length"), "must be > 0"));
                }
                if c.pes == Some(0) {
                    errs.push(FieldError::new(format!("{path}.cloudlets[{j}].pes"), "must be > 0"));
                }
                check_nonneg(&mut errs, &format!("{path}.cloudlets[{j}].start_delay"), c.start_delay);
            }
        }
        for (i, s) in self.interruptions.iter().enumerate() {
            if !labels.contains(s.vm.as_str()) {
                errs.push(FieldError::new(format!("interruptions[{i}].vm"), format!("no VM labelled `{}`", s.vm)));
            }
            check_nonneg(&mut errs, &format!("interruptions[{i}].at"), s.at);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(errs))
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Splits `round(sum(counts) * scale)` across entries by largest remainder;
/// ties go to the earlier entry.
pub fn scale_counts(counts: &[u32], scale: f64) -> Vec<u32> {
    let total: u32 = counts.iter().sum();
    let target = (f64::from(total) * scale).round() as u32;
    let exact: Vec<f64> = counts.iter().map(|c| f64::from(*c) * scale).collect();
    let mut out: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|a, b| (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor())).then(a.cmp(b)));
    for i in order.into_iter().take(target.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Everything a run needs besides the policy.
#[derive(Debug, Clone)]
pub struct Workload {
    pub hosts: Vec<Host>,
    pub requests: Vec<VmRequest>,
    pub interruptions: Vec<(VmId, f64)>,
    pub trace_stats: Option<TraceStats>,
}

impl Workload {
    /// Canonical JSON of the VM list (ids, specs, kinds, delays, cloudlets).
    pub fn describe(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .requests
            .iter()
            .map(|r| {
                serde_json::json!({
                    "id": r.vm.id,
                    "label": r.vm.label,
                    "kind": r.vm.kind,
                    "spec": r.vm.spec,
                    "persistent": r.vm.persistent,
                    "waiting_time": r.vm.waiting_time,
                    "delay": r.vm.submission_delay,
                    "preferred_host": r.vm.preferred_host,
                    "cloudlets": r.cloudlets.iter().map(|c| (c.length, c.pes, c.start_delay)).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::to_string(&items).expect("workload serializes")
    }

    pub fn digest(&self) -> u64 {
        fnv1a(self.describe().as_bytes())
    }
}

fn cloudlet_for(vm: &DynamicVm, duration: f64) -> Cloudlet {
    Cloudlet::new(CloudletId(0), vm.id, (duration * vm.spec.total_mips()).max(1.0), vm.spec.pes)
}

fn make_vm(cfg: &ScenarioConfig, id: VmId, spec: VmSpec, kind: KindName) -> DynamicVm {
    match kind {
        KindName::Spot => {
            let d = cfg.spot_defaults;
            let mut vm = DynamicVm::spot(id, spec, d.params);
            vm.persistent = d.persistent;
            vm.waiting_time = d.waiting_time;
            vm
        }
        KindName::OnDemand => {
            let d = cfg.on_demand_defaults;
            let mut vm = DynamicVm::on_demand(id, spec);
            vm.persistent = d.persistent;
            vm.waiting_time = d.waiting_time;
            vm
        }
    }
}

/// Builds hosts and VMs for `seed`. Explicit VMs come first, then trace
/// VMs, then VMs drawn from the profiles.
pub fn build_workload(cfg: &ScenarioConfig, seed: u64) -> Result<Workload> {
    let mut hosts = Vec::new();
    let mut requests = Vec::new();
    let mut trace_stats = None;

    let host_counts = scale_counts(&cfg.hosts.iter().map(|h| h.count).collect::<Vec<_>>(), cfg.scale);
    let spec_of = |profile: &str| cfg.vm_profiles.iter().find(|p| p.name == profile).map(|p| p.spec);

    for v in &cfg.vms {
        let id = VmId(requests.len() as u32);
        let spec = v.spec.or_else(|| v.profile.as_deref().and_then(spec_of)).expect("validated");
        let mut vm = make_vm(cfg, id, spec, v.kind);
        if let (Some(p), KindName::Spot) = (v.spot, v.kind) {
            vm = DynamicVm { kind: crate::broker::VmKind::Spot(p), ..vm };
        }
        vm.label = v.label.clone();
        vm.submission_delay = v.delay;
        if let Some(p) = v.persistent {
            vm.persistent = p;
        }
        if v.waiting_time.is_some() {
            vm.waiting_time = v.waiting_time;
        }
        let mut cloudlets: Vec<Cloudlet> = v
            .cloudlets
            .iter()
            .map(|c| {
                Cloudlet::new(CloudletId(0), id, c.length, c.pes.unwrap_or(spec.pes)).with_start_delay(c.start_delay)
            })
            .collect();
        if let Some(d) = v.duration {
            cloudlets.push(cloudlet_for(&vm, d));
        }
        requests.push(VmRequest { vm, cloudlets });
    }

    if let Some(t) = &cfg.trace {
        let (machines, tasks) = match &t.source {
            TraceSource::Files { machines, tasks, schema } => {
                let schema = match schema {
                    Some(p) => {
                        let p = cfg.resolve(p);
                        let text = std::fs::read_to_string(&p).map_err(|source| Error::Io { path: p, source })?;
                        SchemaMap::from_json(&text)?
                    }
                    None => SchemaMap::default(),
                };
                (
                    trace::read_machine_events(&cfg.resolve(machines), &schema)?,
                    trace::read_task_events(&cfg.resolve(tasks), &schema)?,
                )
            }
            TraceSource::Synthetic(s) => trace::generate_synthetic_trace(s, seed),
        };
        let w = trace::build_trace_workload(machines, tasks, &t.options, seed)?;
        let offset = requests.len() as u32;
        for mut r in w.requests {
            let id = VmId(r.vm.id.0 + offset);
            r.vm.id = id;
            for c in &mut r.cloudlets {
                c.vm = id;
            }
            requests.push(r);
        }
        hosts = w.hosts;
        trace_stats = Some(w.stats);
    }

    for (g, count) in cfg.hosts.iter().zip(host_counts) {
        for _ in 0..count {
            hosts.push(Host::new(HostId(hosts.len() as u32), g.spec));
        }
    }

    if let Some(w) = &cfg.workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spot = scale_counts(&cfg.vm_profiles.iter().map(|p| p.spot_count).collect::<Vec<_>>(), cfg.scale);
        let od = scale_counts(&cfg.vm_profiles.iter().map(|p| p.on_demand_count).collect::<Vec<_>>(), cfg.scale);
        let mut entries: Vec<(usize, KindName)> = Vec::new();
        for (i, (s, o)) in spot.iter().zip(&od).enumerate() {
            entries.extend(std::iter::repeat((i, KindName::Spot)).take(*s as usize));
            entries.extend(std::iter::repeat((i, KindName::OnDemand)).take(*o as usize));
        }
        entries.shuffle(&mut rng);
        let scaled = |n: u32| (f64::from(n) * cfg.scale).round() as u32;
        let mut spot_left = w.immediate_spot.map_or(u32::MAX, scaled);
        let mut od_left = scaled(w.immediate_on_demand);
        let mut serial = [0u32; 2];
        for (p, kind) in entries {
            let profile = &cfg.vm_profiles[p];
            let id = VmId(requests.len() as u32);
            let mut vm = make_vm(cfg, id, profile.spec, kind);
            let (left, tag, k) = match kind {
                KindName::Spot => (&mut spot_left, "spot", 0),
                KindName::OnDemand => (&mut od_left, "od", 1),
            };
            vm.label = format!("{}-{tag}-{}", profile.name, serial[k]);
            serial[k] += 1;
            vm.submission_delay = if *left > 0 {
                *left -= 1;
                0.0
            } else {
                w.delay.sample(&mut rng)
            };
            let duration = w.duration.sample(&mut rng);
            let cloudlet = cloudlet_for(&vm, duration);
            requests.push(VmRequest { vm, cloudlets: vec![cloudlet] });
        }
    }

    let interruptions = cfg
        .interruptions
        .iter()
        .map(|s| {
            let vm = requests.iter().find(|r| r.vm.label == s.vm).map(|r| r.vm.id).expect("validated");
            (vm, s.at)
        })
        .collect();
    Ok(Workload { hosts, requests, interruptions, trace_stats })
}

/// Command-line overrides of a scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub policy: Option<PolicyKind>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) -> Result<(), ConfigError> {
        if let Some(p) = self.policy {
            cfg.policy = p;
        }
        if let Some(a) = self.alpha {
            cfg.hlem.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}

/// Extra instrumentation for a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Check conservation invariants after every event.
    pub audit: bool,
}

/// Simulates `workload` under `policy`.
pub fn simulate(
    cfg: &ScenarioConfig,
    workload: &Workload,
    policy: PolicyKind,
    opts: RunOptions,
) -> Result<RunResult> {
    let mut sim = CloudSim::new(cfg.engine, workload.hosts.clone(), policy.build(cfg.hlem), cfg.broker)?;
    if opts.audit {
        sim.enable_audit();
    }
    if cfg.record_scorecards {
        sim.record_scorecards();
    }
    for r in &workload.requests {
        sim.submit(r.clone())?;
    }
    for (vm, at) in &workload.interruptions {
        sim.schedule_interruption(*vm, *at)?;
    }
    Ok(sim.run()?)
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub result: RunResult,
    pub report: Report,
    pub trace_stats: Option<TraceStats>,
    pub workload_digest: u64,
}

/// Builds the workload, simulates it under the configured policy and
/// aggregates the report.
pub fn run_scenario(cfg: &ScenarioConfig, overrides: Overrides, opts: RunOptions) -> Result<ScenarioRun> {
    let mut cfg = cfg.clone();
    overrides.apply(&mut cfg)?;
    let workload = build_workload(&cfg, cfg.seed)?;
    log::info!(
        "scenario `{}`: {} hosts, {} VMs, policy {}",
        cfg.name,
        workload.hosts.len(),
        workload.requests.len(),
        cfg.policy
    );
    let result = simulate(&cfg, &workload, cfg.policy, opts)?;
    let report = report::aggregate(&result);
    Ok(ScenarioRun { result, report, trace_stats: workload.trace_stats.clone(), workload_digest: workload.digest() })
}

/// One (seed, policy) cell of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub policy: String,
    pub workload_digest: String,
    pub total_interruptions: u32,
    pub interrupted: u32,
    pub max_interruptions_per_vm: u32,
    pub avg_interruption_s: Option<f64>,
    pub max_interruption_s: Option<f64>,
    pub terminated: u32,
    pub failed: u32,
    pub still_active: u32,
    pub end_time: f64,
}

/// Runs every policy on the same per-seed workload. Rows are ordered by
/// seed, then by the order of `policies`.
pub fn compare_policies(cfg: &ScenarioConfig, policies: &[PolicyKind], seeds: &[u64]) -> Result<Vec<ComparisonRow>> {
    if policies.len() < 2 {
        return Err(Error::Usage("comparison needs at least two policies".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Usage("comparison needs at least one seed".into()));
    }
    let workloads: Vec<Workload> =
        seeds.par_iter().map(|s| build_workload(cfg, *s)).collect::<Result<_>>()?;
    let cells: Vec<(usize, PolicyKind)> =
        (0..seeds.len()).flat_map(|i| policies.iter().map(move |p| (i, *p))).collect();
    cells
        .par_iter()
        .map(|(i, policy)| {
            let w = &workloads[*i];
            let result = simulate(cfg, w, *policy, RunOptions::default())?;
            let s = report::aggregate(&result).summary;
            Ok(ComparisonRow {
                seed: seeds[*i],
                policy: policy.name().to_string(),
                workload_digest: format!("{:016x}", w.digest()),
                total_interruptions: s.total_interruptions,
                interrupted: s.interrupted,
                max_interruptions_per_vm: s.max_interruptions_per_vm,
                avg_interruption_s: s.avg_interruption_s,
                max_interruption_s: s.max_interruption_s,
                terminated: s.terminated,
                failed: s.failed,
                still_active: s.still_active,
                end_time: s.end_time,
            })
        })
        .collect()
}

pub const COMPARISON_HEADERS: [&str; 12] = [
    "seed",
    "policy",
    "workload_digest",
    "total_interruptions",
    "interrupted",
    "max_interruptions_per_vm",
    "avg_interruption_s",
    "max_interruption_s",
    "terminated",
    "failed",
    "still_active",
    "end_time",
];

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String, csv::Error> {
    let opt = |x: Option<f64>| x.map(fmt2).unwrap_or_default();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(COMPARISON_HEADERS)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.policy.clone(),
            r.workload_digest.clone(),
            r.total_interruptions.to_string(),
            r.interrupted.to_string(),
            r.max_interruptions_per_vm.to_string(),
            opt(r.avg_interruption_s),
            opt(r.max_interruption_s),
            r.terminated.to_string(),
            r.failed.to_string(),
            r.still_active.to_string(),
            fmt2(r.end_time),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("CSV fields are UTF-8"))
}
