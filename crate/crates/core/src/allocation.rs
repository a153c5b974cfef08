//! VM placement policies.
//!
//! Every policy runs inside the same dynamic-allocation frame
//! ([`place_vm`]): filter hosts that can take the VM now and pick one; if
//! none can and the VM is on-demand, filter hosts that could take it once
//! their interruptible spot VMs were gone, pick one of those, and name the
//! spot VMs to interrupt there.
//!
//! HLEM scoring weighs the four resource dimensions with the entropy weight
//! method: dimensions whose free capacity varies more across the candidates
//! get more weight, and each host scores the weighted sum of its min-max
//! normalized free capacities.

use serde::{Deserialize, Serialize};

use crate::infrastructure::{Dimension, HostId, Resources, VmId, VmSpec};

/// Number of scored dimensions (CPU, RAM, bandwidth, storage).
pub const DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HlemParams {
    #[serde(default = "default_rc")]
    pub resource_carrying_factor: f64,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_rc() -> f64 {
    0.95
}

fn default_alpha() -> f64 {
    -0.5
}

impl Default for HlemParams {
    fn default() -> Self {
        Self { resource_carrying_factor: 0.95, threshold: 0.0, alpha: -0.5 }
    }
}

impl HlemParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.resource_carrying_factor > 0.0 && self.resource_carrying_factor <= 1.0) {
            return Err("resource_carrying_factor must lie in (0, 1]".into());
        }
        if !self.threshold.is_finite() {
            return Err("threshold must be finite".into());
        }
        if !self.alpha.is_finite() {
            return Err("alpha must be finite".into());
        }
        Ok(())
    }
}

/// A spot VM that may be interrupted for capacity right now.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearableVm {
    pub id: VmId,
    pub demand: Resources,
}

/// What a policy sees of one host at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSnapshot {
    pub id: HostId,
    pub mips_per_pe: f64,
    pub total: Resources,
    pub free: Resources,
    /// Reserved by resident spot VMs (any state).
    pub spot_used: Resources,
    /// Interruptible spot VMs in allocation order.
    pub clearable: Vec<ClearableVm>,
}

impl HostSnapshot {
    /// An empty host.
    pub fn idle(id: HostId, total: Resources, mips_per_pe: f64) -> Self {
        Self { id, mips_per_pe, total, free: total, spot_used: Resources::ZERO, clearable: Vec::new() }
    }

    pub fn clearable_total(&self) -> Resources {
        self.clearable.iter().fold(Resources::ZERO, |acc, c| acc.plus(&c.demand))
    }

    /// Free capacity if every clearable VM were gone.
    pub fn free_after_clearance(&self) -> Resources {
        self.free.plus(&self.clearable_total())
    }

    /// Reserved CPU fraction.
    pub fn cpu_utilization(&self) -> f64 {
        (self.total.pes - self.free.pes) as f64 / self.total.pes as f64
    }

    pub fn cpu_utilization_after_clearance(&self) -> f64 {
        let free = self.free_after_clearance().pes;
        (self.total.pes - free) as f64 / self.total.pes as f64
    }

    /// Free capacity per scored dimension; CPU is counted in MIPS.
    pub fn capacity_vector(free: &Resources, mips_per_pe: f64) -> [f64; DIMS] {
        [free.pes as f64 * mips_per_pe, free.ram as f64, free.bw as f64, free.storage as f64]
    }

    fn mips_ok(&self, spec: &VmSpec) -> bool {
        spec.mips <= self.mips_per_pe
    }

    pub fn fits(&self, spec: &VmSpec) -> bool {
        self.mips_ok(spec) && self.free.covers(&spec.demand())
    }

    pub fn fits_after_clearance(&self, spec: &VmSpec) -> bool {
        self.mips_ok(spec) && self.free_after_clearance().covers(&spec.demand())
    }

    /// Clearable VMs, in allocation order, until enough capacity is freed.
    pub fn select_victims(&self, spec: &VmSpec) -> Option<Vec<VmId>> {
        let demand = spec.demand();
        let mut free = self.free;
        let mut victims = Vec::new();
        for c in &self.clearable {
            if free.covers(&demand) {
                break;
            }
            free = free.plus(&c.demand);
            victims.push(c.id);
        }
        free.covers(&demand).then_some(victims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub vm: VmId,
    pub spec: VmSpec,
    pub spot: bool,
    pub preferred_host: Option<HostId>,
}

/// `R - U * Rc`, with `R` the VM's CPU request and `U` the host's CPU
/// utilization, both as fractions of the host's CPU capacity.
pub fn rs_diff(request: f64, utilization: f64, resource_carrying_factor: f64) -> f64 {
    request - utilization * resource_carrying_factor
}

/// VM CPU request as a fraction of the host's CPU capacity.
pub fn cpu_request_fraction(spec: &VmSpec, host: &HostSnapshot) -> f64 {
    spec.total_mips() / (host.total.pes as f64 * host.mips_per_pe)
}

/// Intermediate and final quantities of one host evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityMatrix {
    pub host_ids: Vec<HostId>,
    /// Free capacity per host and dimension.
    pub capacity: Vec<[f64; DIMS]>,
    pub normalized: Vec<[f64; DIMS]>,
    pub proportion: Vec<[f64; DIMS]>,
    /// `1 / ln(n)`; absent for a single candidate.
    pub k: Option<f64>,
    pub entropy: [f64; DIMS],
    pub variation: [f64; DIMS],
    pub weights: [f64; DIMS],
    pub host_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spot_loads: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted_scores: Option<Vec<f64>>,
}

impl CapacityMatrix {
    pub fn len(&self) -> usize {
        self.host_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host_ids.is_empty()
    }

    /// Scores used for selection: adjusted if present, plain otherwise.
    pub fn selection_scores(&self) -> &[f64] {
        self.adjusted_scores.as_deref().unwrap_or(&self.host_scores)
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Entropy-weight evaluation of `n >= 1` candidates.
///
/// Degenerate cases: a dimension with `max == min` normalizes to 1 for every
/// host; a dimension summing to zero gets uniform proportions; if no
/// dimension varies the weights are `1/D`; a single candidate is not scored
/// (its score is 1).
pub fn evaluate_hosts(host_ids: &[HostId], capacity: &[[f64; DIMS]]) -> CapacityMatrix {
    assert_eq!(host_ids.len(), capacity.len());
    assert!(!host_ids.is_empty(), "evaluate_hosts needs at least one candidate");
    let n = host_ids.len();
    let nf = n as f64;

    let mut normalized = vec![[0.0; DIMS]; n];
    let mut proportion = vec![[0.0; DIMS]; n];
    for d in 0..DIMS {
        let (lo, hi) = capacity.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[d]), hi.max(c[d])));
        let sum: f64 = capacity.iter().map(|c| c[d]).sum();
        for i in 0..n {
            normalized[i][d] = if hi > lo { (capacity[i][d] - lo) / (hi - lo) } else { 1.0 };
            proportion[i][d] = if sum > 0.0 { capacity[i][d] / sum } else { 1.0 / nf };
        }
    }

    if n == 1 {
        return CapacityMatrix {
            host_ids: host_ids.to_vec(),
            capacity: capacity.to_vec(),
            normalized,
            proportion,
            k: None,
            entropy: [1.0; DIMS],
            variation: [0.0; DIMS],
            weights: [1.0 / DIMS as f64; DIMS],
            host_scores: vec![1.0],
            spot_loads: None,
            adjusted_scores: None,
        };
    }

    let k = 1.0 / nf.ln();
    let mut entropy = [0.0; DIMS];
    let mut variation = [0.0; DIMS];
    for d in 0..DIMS {
        let s: f64 = proportion.iter().map(|p| plogp(p[d])).sum();
        entropy[d] = (-k * s).clamp(0.0, 1.0);
        variation[d] = 1.0 - entropy[d];
    }
    let g_sum: f64 = variation.iter().sum();
    let weights = if g_sum > 0.0 {
        let mut w = [0.0; DIMS];
        for d in 0..DIMS {
            w[d] = variation[d] / g_sum;
        }
        w
    } else {
        [1.0 / DIMS as f64; DIMS]
    };
    let host_scores = normalized.iter().map(|c| (0..DIMS).map(|d| weights[d] * c[d]).sum()).collect();

    CapacityMatrix {
        host_ids: host_ids.to_vec(),
        capacity: capacity.to_vec(),
        normalized,
        proportion,
        k: Some(k),
        entropy,
        variation,
        weights,
        host_scores,
        spot_loads: None,
        adjusted_scores: None,
    }
}

/// Weighted fraction of each dimension's total capacity held by spot VMs.
pub fn spot_load(spot_used: &Resources, total: &Resources, weights: &[f64; DIMS]) -> f64 {
    Dimension::ALL
        .iter()
        .zip(weights)
        .map(|(d, w)| {
            let t = total.get(*d) as f64;
            if t > 0.0 {
                w * spot_used.get(*d) as f64 / t
            } else {
                0.0
            }
        })
        .sum()
}

pub fn adjusted_score(host_score: f64, spot_load: f64, alpha: f64) -> f64 {
    host_score * (1.0 + alpha * spot_load)
}

/// Index of the maximum; ties go to the earliest entry.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if *s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Lowest-id host with room for `spec` in every dimension.
pub fn first_fit(spec: &VmSpec, hosts: &[HostSnapshot]) -> Option<HostId> {
    hosts.iter().filter(|h| h.fits(spec)).min_by_key(|h| h.id).map(|h| h.id)
}

/// HLEM host filter.
///
/// Plain mode keeps hosts with room now; clearance mode counts the capacity
/// of interruptible spot VMs as free and evaluates the CPU test against the
/// utilization that would remain.
pub fn filter_hosts<'a>(
    spec: &VmSpec,
    hosts: &'a [HostSnapshot],
    params: &HlemParams,
    consider_spot_clearance: bool,
) -> Vec<&'a HostSnapshot> {
    hosts
        .iter()
        .filter(|h| {
            let (fits, util) = if consider_spot_clearance {
                (h.fits_after_clearance(spec), h.cpu_utilization_after_clearance())
            } else {
                (h.fits(spec), h.cpu_utilization())
            };
            fits && rs_diff(cpu_request_fraction(spec, h), util, params.resource_carrying_factor) > params.threshold
        })
        .collect()
}

/// Audit record of one placement decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScorecard {
    pub vm_id: VmId,
    pub policy: String,
    pub time: f64,
    pub candidates: Vec<HostId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<CapacityMatrix>,
    pub chosen: Option<HostId>,
    pub used_spot_clearance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    Host(HostId),
    /// Interrupt `victims` on `host`, then retry the VM there.
    Clearance { host: HostId, victims: Vec<VmId> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementOutcome {
    pub placement: Placement,
    pub scorecard: Option<PolicyScorecard>,
}

/// Pick among candidates that passed the filter.
pub struct Selection {
    pub index: usize,
    pub matrix: Option<CapacityMatrix>,
}

/// A pluggable placement policy. Implementors decide which hosts qualify
/// and how to rank them; [`place_vm`] supplies the clearance fallback.
pub trait VmAllocationPolicy: Send + Sync {
    fn name(&self) -> &str;

    /// Hosts that qualify, in the order given.
    fn filter<'a>(&self, spec: &VmSpec, hosts: &'a [HostSnapshot], clearance: bool) -> Vec<&'a HostSnapshot> {
        hosts.iter().filter(|h| if clearance { h.fits_after_clearance(spec) } else { h.fits(spec) }).collect()
    }

    /// `candidates` is non-empty. `clearance` says whether capacities should
    /// include interruptible spot VMs.
    fn select(&self, spec: &VmSpec, candidates: &[&HostSnapshot], clearance: bool) -> Selection;
}

#[derive(Debug, Clone, Default)]
pub struct FirstFit;

impl VmAllocationPolicy for FirstFit {
    fn name(&self) -> &str {
        "first-fit"
    }

    fn select(&self, _spec: &VmSpec, candidates: &[&HostSnapshot], _clearance: bool) -> Selection {
        let index = candidates.iter().enumerate().min_by_key(|(_, h)| h.id).map(|(i, _)| i).unwrap_or(0);
        Selection { index, matrix: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Hlem {
    pub params: HlemParams,
    /// Scale scores by spot load.
    pub spot_adjusted: bool,
}

impl Hlem {
    pub fn new(params: HlemParams) -> Self {
        Self { params, spot_adjusted: false }
    }

    pub fn adjusted(params: HlemParams) -> Self {
        Self { params, spot_adjusted: true }
    }

    pub fn score(&self, candidates: &[&HostSnapshot], clearance: bool) -> CapacityMatrix {
        let ids: Vec<HostId> = candidates.iter().map(|h| h.id).collect();
        let caps: Vec<[f64; DIMS]> = candidates
            .iter()
            .map(|h| {
                let free = if clearance { h.free_after_clearance() } else { h.free };
                HostSnapshot::capacity_vector(&free, h.mips_per_pe)
            })
            .collect();
        let mut m = evaluate_hosts(&ids, &caps);
        if self.spot_adjusted {
            let sl: Vec<f64> = candidates.iter().map(|h| spot_load(&h.spot_used, &h.total, &m.weights)).collect();
            let ahs = m.host_scores.iter().zip(&sl).map(|(hs, s)| adjusted_score(*hs, *s, self.params.alpha)).collect();
            m.spot_loads = Some(sl);
            m.adjusted_scores = Some(ahs);
        }
        m
    }
}

impl VmAllocationPolicy for Hlem {
    fn name(&self) -> &str {
        if self.spot_adjusted {
            "hlem-adjusted"
        } else {
            "hlem"
        }
    }

    fn filter<'a>(&self, spec: &VmSpec, hosts: &'a [HostSnapshot], clearance: bool) -> Vec<&'a HostSnapshot> {
        filter_hosts(spec, hosts, &self.params, clearance)
    }

    fn select(&self, _spec: &VmSpec, candidates: &[&HostSnapshot], clearance: bool) -> Selection {
        if candidates.len() == 1 {
            return Selection { index: 0, matrix: None };
        }
        let m = self.score(candidates, clearance);
        let index = argmax(m.selection_scores()).unwrap_or(0);
        Selection { index, matrix: Some(m) }
    }
}

/// Built-in policies by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "first-fit")]
    FirstFit,
    #[serde(rename = "hlem")]
    Hlem,
    #[serde(rename = "hlem-adjusted")]
    HlemAdjusted,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::FirstFit, PolicyKind::Hlem, PolicyKind::HlemAdjusted];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FirstFit => "first-fit",
            PolicyKind::Hlem => "hlem",
            PolicyKind::HlemAdjusted => "hlem-adjusted",
        }
    }

    pub fn build(self, params: HlemParams) -> Box<dyn VmAllocationPolicy> {
        match self {
            PolicyKind::FirstFit => Box::new(FirstFit),
            PolicyKind::Hlem => Box::new(Hlem::new(params)),
            PolicyKind::HlemAdjusted => Box::new(Hlem::adjusted(params)),
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected first-fit, hlem or hlem-adjusted)"))
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn decide(
    policy: &dyn VmAllocationPolicy,
    req: &PlacementRequest,
    hosts: &[HostSnapshot],
    now: f64,
) -> PlacementOutcome {
    let card = |cands: &[&HostSnapshot], m: Option<CapacityMatrix>, chosen: Option<HostId>, clr: bool| PolicyScorecard {
        vm_id: req.vm,
        policy: policy.name().to_string(),
        time: now,
        candidates: cands.iter().map(|h| h.id).collect(),
        matrix: m,
        chosen,
        used_spot_clearance: clr,
    };

    let plain = policy.filter(&req.spec, hosts, false);
    if !plain.is_empty() {
        let sel = policy.select(&req.spec, &plain, false);
        let host = plain[sel.index].id;
        return PlacementOutcome {
            placement: Placement::Host(host),
            scorecard: Some(card(&plain, sel.matrix, Some(host), false)),
        };
    }
    if req.spot {
        return PlacementOutcome { placement: Placement::None, scorecard: None };
    }
    let clear: Vec<&HostSnapshot> =
        policy.filter(&req.spec, hosts, true).into_iter().filter(|h| !h.clearable.is_empty()).collect();
    if clear.is_empty() {
        return PlacementOutcome { placement: Placement::None, scorecard: None };
    }
    let sel = policy.select(&req.spec, &clear, true);
    let chosen = clear[sel.index];
    match chosen.select_victims(&req.spec) {
        Some(victims) => PlacementOutcome {
            placement: Placement::Clearance { host: chosen.id, victims },
            scorecard: Some(card(&clear, sel.matrix, Some(chosen.id), true)),
        },
        None => PlacementOutcome { placement: Placement::None, scorecard: None },
    }
}

/// Runs filter, evaluation and selection for one VM.
///
/// A preferred host is tried on its own first. Spot VMs never trigger a
/// clearance.
pub fn place_vm(
    policy: &dyn VmAllocationPolicy,
    req: &PlacementRequest,
    hosts: &[HostSnapshot],
    now: f64,
) -> PlacementOutcome {
    if let Some(pref) = req.preferred_host {
        if let Some(h) = hosts.iter().find(|h| h.id == pref) {
            let out = decide(policy, req, std::slice::from_ref(h), now);
            if out.placement != Placement::None {
                return out;
            }
        }
    }
    decide(policy, req, hosts, now)
}
