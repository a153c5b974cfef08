//! Cluster-trace ingestion in the 2011 clusterdata format.
//!
//! Two tables are read: machine events (hosts joining and leaving) and task
//! events (task submissions and executions). Tasks are grouped into
//! synthetic VMs keyed by `(user, machine)`; every task becomes one
//! single-PE cloudlet whose length is its scheduled runtime at the
//! reference machine's per-PE speed.
//!
//! Files are headerless, comma-separated, one event per line. Timestamps
//! are microseconds; the simulator works in seconds.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::{DynamicVm, InterruptionBehavior, SpotParams};
use crate::cloud::VmRequest;
use crate::error::IngestError;
use crate::infrastructure::{Cloudlet, CloudletId, Host, HostId, HostSpec, VmId, VmSpec};
use crate::kernel::SimTime;

pub const MICROS_PER_SECOND: f64 = 1e6;

pub fn micros_to_secs(us: u64) -> f64 {
    us as f64 / MICROS_PER_SECOND
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MachineEventKind {
    Add,
    Remove,
    Update,
}

impl MachineEventKind {
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Self::Add),
            1 => Some(Self::Remove),
            2 => Some(Self::Update),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineEvent {
    pub timestamp: u64,
    pub machine_id: u64,
    pub kind: MachineEventKind,
    pub platform: Option<String>,
    /// Normalized CPU capacity.
    pub cpu: Option<f64>,
    /// Normalized memory capacity.
    pub memory: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskEventKind {
    Submit,
    Schedule,
    Evict,
    Fail,
    Finish,
    Kill,
    Lost,
    Update,
}

impl TaskEventKind {
    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Self::Submit,
            1 => Self::Schedule,
            2 => Self::Evict,
            3 => Self::Fail,
            4 => Self::Finish,
            5 => Self::Kill,
            6 => Self::Lost,
            7 | 8 => Self::Update,
            _ => return None,
        })
    }

    pub fn code(self) -> u32 {
        match self {
            Self::Submit => 0,
            Self::Schedule => 1,
            Self::Evict => 2,
            Self::Fail => 3,
            Self::Finish => 4,
            Self::Kill => 5,
            Self::Lost => 6,
            Self::Update => 8,
        }
    }

    /// Ends a scheduled run of the task.
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Evict | Self::Fail | Self::Finish | Self::Kill | Self::Lost)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub timestamp: u64,
    pub job_id: u64,
    pub task_index: u64,
    pub machine_id: Option<u64>,
    pub kind: TaskEventKind,
    pub user: String,
    pub cpu_request: Option<f64>,
    pub memory_request: Option<f64>,
}

impl TaskEvent {
    pub fn key(&self) -> (u64, u64) {
        (self.job_id, self.task_index)
    }
}

/// Zero-based column positions of the machine-events table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineColumns {
    pub timestamp: usize,
    pub machine_id: usize,
    pub event_type: usize,
    pub platform: usize,
    pub cpu: usize,
    pub memory: usize,
}

impl Default for MachineColumns {
    fn default() -> Self {
        Self { timestamp: 0, machine_id: 1, event_type: 2, platform: 3, cpu: 4, memory: 5 }
    }
}

/// Zero-based column positions of the task-events table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskColumns {
    pub timestamp: usize,
    pub job_id: usize,
    pub task_index: usize,
    pub machine_id: usize,
    pub event_type: usize,
    pub user: usize,
    pub cpu_request: usize,
    pub memory_request: usize,
}

impl Default for TaskColumns {
    fn default() -> Self {
        Self {
            timestamp: 0,
            job_id: 2,
            task_index: 3,
            machine_id: 4,
            event_type: 5,
            user: 6,
            cpu_request: 9,
            memory_request: 10,
        }
    }
}

/// Column layout of both tables; defaults to the 2011 schema.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaMap {
    pub machine_events: MachineColumns,
    pub task_events: TaskColumns,
}

impl SchemaMap {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Schema(e.to_string()))
    }
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r)
}

struct Fields<'a> {
    rec: &'a csv::StringRecord,
    path: &'a Path,
    line: u64,
}

impl Fields<'_> {
    fn raw(&self, i: usize) -> Option<&str> {
        self.rec.get(i).map(str::trim).filter(|s| !s.is_empty())
    }

    fn err(&self, message: String) -> IngestError {
        IngestError::Parse { path: self.path.to_path_buf(), line: self.line, message }
    }

    fn parse<T: std::str::FromStr>(&self, i: usize, name: &str) -> Result<Option<T>, IngestError> {
        self.raw(i)
            .map(|s| s.parse::<T>().map_err(|_| self.err(format!("column {i} ({name}): cannot parse `{s}`"))))
            .transpose()
    }

    fn required<T: std::str::FromStr>(&self, i: usize, name: &str) -> Result<T, IngestError> {
        self.parse(i, name)?.ok_or_else(|| self.err(format!("column {i} ({name}) is empty")))
    }
}

fn records<R: Read>(
    reader: R,
    path: &Path,
    mut each: impl FnMut(Fields<'_>) -> Result<(), IngestError>,
) -> Result<(), IngestError> {
    let mut rd = csv_reader(reader);
    let mut rec = csv::StringRecord::new();
    let mut line = 0;
    loop {
        line += 1;
        match rd.read_record(&mut rec) {
            Ok(false) => return Ok(()),
            Ok(true) => each(Fields { rec: &rec, path, line })?,
            Err(e) => return Err(IngestError::Parse { path: path.to_path_buf(), line, message: e.to_string() }),
        }
    }
}

pub fn parse_machine_events<R: Read>(
    reader: R,
    path: &Path,
    schema: &SchemaMap,
) -> Result<Vec<MachineEvent>, IngestError> {
    let c = schema.machine_events;
    let mut out = Vec::new();
    records(reader, path, |f| {
        let code: u32 = f.required(c.event_type, "event type")?;
        let kind = MachineEventKind::from_code(code).ok_or_else(|| f.err(format!("unknown machine event type {code}")))?;
        out.push(MachineEvent {
            timestamp: f.required(c.timestamp, "timestamp")?,
            machine_id: f.required(c.machine_id, "machine id")?,
            kind,
            platform: f.raw(c.platform).map(str::to_string),
            cpu: f.parse(c.cpu, "cpus")?,
            memory: f.parse(c.memory, "memory")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_task_events<R: Read>(reader: R, path: &Path, schema: &SchemaMap) -> Result<Vec<TaskEvent>, IngestError> {
    let c = schema.task_events;
    let mut out = Vec::new();
    records(reader, path, |f| {
        let code: u32 = f.required(c.event_type, "event type")?;
        let kind = TaskEventKind::from_code(code).ok_or_else(|| f.err(format!("unknown task event type {code}")))?;
        out.push(TaskEvent {
            timestamp: f.required(c.timestamp, "timestamp")?,
            job_id: f.required(c.job_id, "job id")?,
            task_index: f.required(c.task_index, "task index")?,
            machine_id: f.parse(c.machine_id, "machine id")?,
            kind,
            user: f.raw(c.user).unwrap_or_default().to_string(),
            cpu_request: f.parse(c.cpu_request, "cpu request")?,
            memory_request: f.parse(c.memory_request, "memory request")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_machine_events(path: &Path, schema: &SchemaMap) -> Result<Vec<MachineEvent>, IngestError> {
    parse_machine_events(open(path)?, path, schema)
}

pub fn read_task_events(path: &Path, schema: &SchemaMap) -> Result<Vec<TaskEvent>, IngestError> {
    parse_task_events(open(path)?, path, schema)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Writes machine events in the 2011 column order.
pub fn write_machine_events<W: Write>(w: W, events: &[MachineEvent]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for e in events {
        w.write_record([
            e.timestamp.to_string(),
            e.machine_id.to_string(),
            e.kind.code().to_string(),
            opt(&e.platform),
            opt(&e.cpu),
            opt(&e.memory),
        ])?;
    }
    w.flush()
}

/// Writes task events in the 2011 column order (13 columns).
pub fn write_task_events<W: Write>(w: W, events: &[TaskEvent]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for e in events {
        w.write_record([
            e.timestamp.to_string(),
            String::new(),
            e.job_id.to_string(),
            e.task_index.to_string(),
            opt(&e.machine_id),
            e.kind.code().to_string(),
            e.user.clone(),
            "0".into(),
            "0".into(),
            opt(&e.cpu_request),
            opt(&e.memory_request),
            String::new(),
            "0".into(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub filled_cpu: u32,
    pub filled_memory: u32,
    /// Events for machines that had not been added yet.
    pub dropped_before_add: u32,
}

/// Most frequent value; ties go to the smaller value.
fn mode(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut counts: BTreeMap<u64, u32> = BTreeMap::new();
    for v in values {
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    let mut best: Option<(u64, u32)> = None;
    for (bits, n) in counts {
        let better = match best {
            None => true,
            Some((b, m)) => n > m || (n == m && f64::from_bits(bits) < f64::from_bits(b)),
        };
        if better {
            best = Some((bits, n));
        }
    }
    best.map(|(b, _)| f64::from_bits(b))
}

/// Time-orders machine events, drops events preceding a machine's first
/// ADD, and fills missing CPU/memory values with the mode among complete
/// machines of the same platform (any platform if none match).
pub fn prepare_machines(mut events: Vec<MachineEvent>) -> Result<(Vec<MachineEvent>, PrepareStats), IngestError> {
    let mut stats = PrepareStats::default();
    events.sort_by_key(|e| e.timestamp);
    let mut added = std::collections::HashSet::new();
    events.retain(|e| {
        if e.kind == MachineEventKind::Add {
            added.insert(e.machine_id);
            true
        } else if added.contains(&e.machine_id) {
            true
        } else {
            stats.dropped_before_add += 1;
            false
        }
    });

    type Get = fn(&MachineEvent) -> Option<f64>;
    let fields: [(&'static str, Get); 2] = [("cpus", |e| e.cpu), ("memory", |e| e.memory)];
    let mut fills: Vec<Vec<Option<f64>>> = Vec::new();
    for (name, get) in fields {
        let missing = events.iter().any(|e| get(e).is_none());
        if !missing {
            fills.push(vec![None; events.len()]);
            continue;
        }
        let global = mode(events.iter().filter_map(get)).ok_or(IngestError::NoValueToFill(name))?;
        let mut by_platform: HashMap<&str, Option<f64>> = HashMap::new();
        let mut col = Vec::with_capacity(events.len());
        for e in &events {
            if get(e).is_some() {
                col.push(None);
                continue;
            }
            let v = match e.platform.as_deref() {
                Some(p) => *by_platform.entry(p).or_insert_with(|| {
                    mode(events.iter().filter(|x| x.platform.as_deref() == Some(p)).filter_map(get))
                }),
                None => None,
            };
            col.push(Some(v.unwrap_or(global)));
        }
        fills.push(col);
    }
    for (i, e) in events.iter_mut().enumerate() {
        if let Some(v) = fills[0][i] {
            e.cpu = Some(v);
            stats.filled_cpu += 1;
        }
        if let Some(v) = fills[1][i] {
            e.memory = Some(v);
            stats.filled_memory += 1;
        }
    }
    Ok((events, stats))
}

/// What to do with a task whose machine cannot be recovered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnresolvedMode {
    /// Drop the task.
    #[default]
    Exclude,
    /// Keep the task; the allocation policy picks the host.
    Policy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconcileStats {
    pub schedule_events: u32,
    /// SCHEDULE events that have a machine after reconciliation.
    pub resolved: u32,
    /// Of `resolved`, those that took the machine from a later event.
    pub inherited: u32,
    pub policy_allocated: u32,
    pub excluded: u32,
    pub scheduled_tasks: u32,
    pub excluded_tasks: u32,
    /// `excluded_tasks` as a percentage of `scheduled_tasks`.
    pub exclusion_pct: f64,
}

/// Fills missing machine ids on SCHEDULE events from the same task's next
/// event that carries one, then excludes or keeps the unresolvable tasks.
pub fn reconcile_tasks(mut events: Vec<TaskEvent>, mode: UnresolvedMode) -> (Vec<TaskEvent>, ReconcileStats) {
    events.sort_by_key(|e| e.timestamp);
    let mut stats = ReconcileStats::default();
    let mut next_machine: HashMap<(u64, u64), u64> = HashMap::new();
    let mut unresolved_tasks = std::collections::HashSet::new();
    let mut scheduled_tasks = std::collections::HashSet::new();
    let mut unresolved_events = 0;
    let mut inherited_by: Vec<(u64, u64)> = Vec::new();
    for e in events.iter_mut().rev() {
        let key = e.key();
        if e.kind == TaskEventKind::Schedule {
            stats.schedule_events += 1;
            scheduled_tasks.insert(key);
            if e.machine_id.is_none() {
                match next_machine.get(&key) {
                    Some(m) => {
                        e.machine_id = Some(*m);
                        inherited_by.push(key);
                    }
                    None => {
                        unresolved_events += 1;
                        unresolved_tasks.insert(key);
                    }
                }
            }
        }
        if let Some(m) = e.machine_id {
            next_machine.insert(key, m);
        }
    }
    stats.scheduled_tasks = scheduled_tasks.len() as u32;
    stats.inherited = inherited_by.len() as u32;
    match mode {
        UnresolvedMode::Policy => {
            stats.policy_allocated = unresolved_events;
            stats.resolved = stats.schedule_events - unresolved_events;
        }
        UnresolvedMode::Exclude => {
            stats.excluded_tasks = unresolved_tasks.len() as u32;
            let before = events.iter().filter(|e| e.kind == TaskEventKind::Schedule).count() as u32;
            events.retain(|e| !unresolved_tasks.contains(&e.key()));
            let after = events.iter().filter(|e| e.kind == TaskEventKind::Schedule).count() as u32;
            stats.excluded = before - after;
            stats.resolved = after;
            stats.inherited = inherited_by.iter().filter(|k| !unresolved_tasks.contains(*k)).count() as u32;
        }
    }
    stats.exclusion_pct = if stats.scheduled_tasks > 0 {
        f64::from(stats.excluded_tasks) * 100.0 / f64::from(stats.scheduled_tasks)
    } else {
        0.0
    };
    (events, stats)
}

/// Maps normalized trace capacities to absolute units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceMachine {
    pub pes: u32,
    pub mips_per_pe: f64,
    pub ram: u64,
    pub bw: u64,
    pub storage: u64,
    /// Bandwidth and storage of each synthetic VM.
    pub vm_bw: u64,
    pub vm_storage: u64,
}

impl Default for ReferenceMachine {
    fn default() -> Self {
        Self { pes: 8, mips_per_pe: 1000.0, ram: 16384, bw: 10_000, storage: 1_000_000, vm_bw: 100, vm_storage: 1024 }
    }
}

/// One task's execution as seen in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub job_id: u64,
    pub task_index: u64,
    pub first_submit: f64,
    pub first_schedule: f64,
    /// Scheduled intervals in seconds; a run still open at the horizon ends there.
    pub intervals: Vec<(f64, f64)>,
    pub evictions: u32,
    pub cpu_request: f64,
    pub memory_request: f64,
}

impl TaskRun {
    pub fn runtime(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }
}

/// Tasks of one user on one machine, packaged as a VM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVm {
    pub user: String,
    /// `None` for tasks left to the allocation policy.
    pub machine_id: Option<u64>,
    pub tasks: Vec<TaskRun>,
    pub submit_at: f64,
    pub end_at: f64,
    pub pes: u32,
    pub ram: u64,
}

fn peak_concurrent(tasks: &[TaskRun], value: impl Fn(&TaskRun) -> f64) -> f64 {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for t in tasks {
        for &(a, b) in &t.intervals {
            points.push((a, value(t)));
            points.push((b, -value(t)));
        }
    }
    // Ends before starts at equal times.
    points.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut cur: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for (_, d) in points {
        cur += d;
        peak = peak.max(cur);
    }
    peak
}

/// Groups scheduled tasks into synthetic VMs keyed by `(user, machine of
/// the task's first SCHEDULE)`. `horizon` closes runs still open at the end.
///
/// A task evicted or failed and scheduled again keeps its cloudlet; its
/// runtime is the sum of its scheduled intervals.
pub fn group_synthetic_vms(events: &[TaskEvent], reference: &ReferenceMachine, horizon: f64) -> Vec<SyntheticVm> {
    struct Acc {
        user: String,
        machine: Option<u64>,
        first_submit: Option<f64>,
        first_schedule: Option<f64>,
        running_since: Option<f64>,
        intervals: Vec<(f64, f64)>,
        evictions: u32,
        cpu: f64,
        mem: f64,
    }
    let mut order: Vec<(u64, u64)> = Vec::new();
    let mut tasks: HashMap<(u64, u64), Acc> = HashMap::new();
    let mut sorted: Vec<&TaskEvent> = events.iter().collect();
    sorted.sort_by_key(|e| e.timestamp);
    for e in sorted {
        let t = micros_to_secs(e.timestamp);
        let acc = tasks.entry(e.key()).or_insert_with(|| {
            order.push(e.key());
            Acc {
                user: e.user.clone(),
                machine: None,
                first_submit: None,
                first_schedule: None,
                running_since: None,
                intervals: Vec::new(),
                evictions: 0,
                cpu: 0.0,
                mem: 0.0,
            }
        });
        if let Some(c) = e.cpu_request {
            acc.cpu = acc.cpu.max(c);
        }
        if let Some(m) = e.memory_request {
            acc.mem = acc.mem.max(m);
        }
        match e.kind {
            TaskEventKind::Submit => {
                acc.first_submit.get_or_insert(t);
            }
            TaskEventKind::Schedule if acc.running_since.is_none() => {
                if acc.first_schedule.is_none() {
                    acc.first_schedule = Some(t);
                    acc.machine = e.machine_id;
                }
                acc.running_since = Some(t);
            }
            k if k.is_terminal() => {
                if let Some(start) = acc.running_since.take() {
                    acc.intervals.push((start, t.max(start)));
                    if matches!(k, TaskEventKind::Evict | TaskEventKind::Fail) {
                        acc.evictions += 1;
                    }
                }
            }
            _ => {}
        }
    }

    let mut groups: BTreeMap<(String, Option<u64>), Vec<TaskRun>> = BTreeMap::new();
    for key in order {
        let mut acc = tasks.remove(&key).expect("every key was inserted");
        let Some(first_schedule) = acc.first_schedule else { continue };
        if let Some(start) = acc.running_since.take() {
            acc.intervals.push((start, horizon.max(start)));
        }
        let run = TaskRun {
            job_id: key.0,
            task_index: key.1,
            first_submit: acc.first_submit.unwrap_or(first_schedule).min(first_schedule),
            first_schedule,
            intervals: acc.intervals,
            evictions: acc.evictions,
            cpu_request: acc.cpu,
            memory_request: acc.mem,
        };
        groups.entry((acc.user, acc.machine)).or_default().push(run);
    }

    groups
        .into_iter()
        .map(|((user, machine_id), tasks)| {
            let submit_at = tasks.iter().map(|t| t.first_submit).fold(f64::INFINITY, f64::min);
            let end_at = tasks
                .iter()
                .flat_map(|t| t.intervals.iter().map(|i| i.1))
                .fold(submit_at, f64::max);
            let cpu = peak_concurrent(&tasks, |t| t.cpu_request);
            let mem = peak_concurrent(&tasks, |t| t.memory_request);
            let pes = ((cpu * f64::from(reference.pes)).ceil() as u32).clamp(1, reference.pes);
            let ram = ((mem * reference.ram as f64).ceil() as u64).clamp(1, reference.ram);
            SyntheticVm { user, machine_id, tasks, submit_at, end_at, pes, ram }
        })
        .collect()
}

/// Hosts from prepared machine events, one per machine id in id order, plus
/// the machine-to-host mapping.
pub fn hosts_from_machines(
    events: &[MachineEvent],
    reference: &ReferenceMachine,
    max_machines: Option<usize>,
) -> (Vec<Host>, HashMap<u64, HostId>) {
    let mut first_add: BTreeMap<u64, &MachineEvent> = BTreeMap::new();
    let mut removed: HashMap<u64, u64> = HashMap::new();
    for e in events {
        match e.kind {
            MachineEventKind::Add => {
                first_add.entry(e.machine_id).or_insert(e);
            }
            MachineEventKind::Remove => {
                removed.entry(e.machine_id).or_insert(e.timestamp);
            }
            MachineEventKind::Update => {}
        }
    }
    let mut hosts = Vec::new();
    let mut map = HashMap::new();
    for (id, add) in first_add.into_iter().take(max_machines.unwrap_or(usize::MAX)) {
        let hid = HostId(hosts.len() as u32);
        let cpu = add.cpu.unwrap_or(1.0);
        let mem = add.memory.unwrap_or(1.0);
        let spec = HostSpec {
            pes: ((cpu * f64::from(reference.pes)).ceil() as u32).max(1),
            mips_per_pe: reference.mips_per_pe,
            ram: ((mem * reference.ram as f64).ceil() as u64).max(1),
            bw: reference.bw,
            storage: reference.storage,
        };
        let mut h = Host::new(hid, spec);
        h.available_from = SimTime(micros_to_secs(add.timestamp));
        h.retired_at = removed.get(&id).filter(|r| **r >= add.timestamp).map(|r| SimTime(micros_to_secs(*r)));
        map.insert(id, hid);
        hosts.push(h);
    }
    (hosts, map)
}

/// Fixed-duration spot VMs added on top of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpotInjection {
    pub count: u32,
    /// Each VM draws one of these runtimes (seconds).
    pub durations: Vec<f64>,
    #[serde(default = "default_injected_spec")]
    pub spec: VmSpec,
    #[serde(default)]
    pub params: SpotParams,
    #[serde(default)]
    pub waiting_time: Option<f64>,
    /// Submission times are uniform in `[start, end]` seconds.
    #[serde(default)]
    pub submit_start: f64,
    #[serde(default)]
    pub submit_end: f64,
}

fn default_injected_spec() -> VmSpec {
    VmSpec::new(1000.0, 1, 1024, 100, 1024)
}

impl Default for SpotInjection {
    fn default() -> Self {
        Self {
            count: 0,
            durations: vec![72_000.0, 144_000.0],
            spec: default_injected_spec(),
            params: SpotParams { interruption_behavior: InterruptionBehavior::Hibernate, ..Default::default() },
            waiting_time: None,
            submit_start: 0.0,
            submit_end: 0.0,
        }
    }
}

/// Spot VMs whose single cloudlet runs exactly one configured duration on
/// an otherwise idle VM. VM ids start at `first_id`.
pub fn inject_spot_workload(cfg: &SpotInjection, seed: u64, first_id: u32) -> Vec<VmRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.count)
        .map(|i| {
            let id = VmId(first_id + i);
            let duration = *cfg.durations.choose(&mut rng).unwrap_or(&0.0);
            let delay = if cfg.submit_end > cfg.submit_start {
                rng.gen_range(cfg.submit_start..=cfg.submit_end)
            } else {
                cfg.submit_start
            };
            let mut vm = DynamicVm::spot(id, cfg.spec, cfg.params);
            vm.label = format!("injected-spot-{i}");
            vm.submission_delay = delay;
            vm.waiting_time = cfg.waiting_time;
            let length = duration * cfg.spec.mips * f64::from(cfg.spec.pes);
            let cloudlet = Cloudlet::new(CloudletId(0), id, length, cfg.spec.pes);
            VmRequest { vm, cloudlets: vec![cloudlet] }
        })
        .collect()
}

/// Ingestion options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceOptions {
    /// Keep events before this many hours.
    #[serde(default)]
    pub slice_hours: Option<f64>,
    /// Keep the machines with the smallest ids.
    #[serde(default)]
    pub max_machines: Option<usize>,
    #[serde(default)]
    pub unresolved: UnresolvedMode,
    #[serde(default)]
    pub reference: ReferenceMachine,
    #[serde(default)]
    pub spot: SpotInjection,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            slice_hours: None,
            max_machines: None,
            unresolved: UnresolvedMode::Exclude,
            reference: ReferenceMachine::default(),
            spot: SpotInjection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub machine_events: u32,
    pub task_events: u32,
    pub hosts: u32,
    pub prepare: PrepareStats,
    pub reconcile: ReconcileStats,
    pub synthetic_vms: u32,
    pub cloudlets: u32,
    pub evictions: u32,
    pub injected_spot_vms: u32,
    pub horizon_s: f64,
}

/// Hosts, VM requests and statistics derived from a trace.
#[derive(Debug, Clone)]
pub struct TraceWorkload {
    pub hosts: Vec<Host>,
    pub requests: Vec<VmRequest>,
    pub stats: TraceStats,
}

/// Full ingestion pipeline: slice, prepare, reconcile, group, inject.
pub fn build_trace_workload(
    machines: Vec<MachineEvent>,
    tasks: Vec<TaskEvent>,
    opts: &TraceOptions,
    seed: u64,
) -> Result<TraceWorkload, IngestError> {
    let mut stats = TraceStats::default();
    let cutoff = opts.slice_hours.map(|h| (h * 3600.0 * MICROS_PER_SECOND) as u64);
    let keep = |ts: u64| cutoff.map_or(true, |c| ts < c);
    let machines: Vec<MachineEvent> = machines.into_iter().filter(|e| keep(e.timestamp)).collect();
    let tasks: Vec<TaskEvent> = tasks.into_iter().filter(|e| keep(e.timestamp)).collect();
    stats.machine_events = machines.len() as u32;
    stats.task_events = tasks.len() as u32;

    let (machines, prep) = prepare_machines(machines)?;
    stats.prepare = prep;
    let (hosts, machine_map) = hosts_from_machines(&machines, &opts.reference, opts.max_machines);
    stats.hosts = hosts.len() as u32;

    let (tasks, rec) = reconcile_tasks(tasks, opts.unresolved);
    stats.reconcile = rec;
    let last = tasks.iter().map(|e| e.timestamp).max().unwrap_or(0);
    let horizon = cutoff.map_or(micros_to_secs(last), micros_to_secs);
    stats.horizon_s = horizon;
    let vms = group_synthetic_vms(&tasks, &opts.reference, horizon);
    stats.synthetic_vms = vms.len() as u32;

    let mut requests = Vec::with_capacity(vms.len());
    for (i, svm) in vms.iter().enumerate() {
        let id = VmId(i as u32);
        let spec = VmSpec::new(opts.reference.mips_per_pe, svm.pes, svm.ram, opts.reference.vm_bw, opts.reference.vm_storage);
        let mut vm = DynamicVm::on_demand(id, spec);
        vm.label = match svm.machine_id {
            Some(m) => format!("{}@{m}", svm.user),
            None => format!("{}@policy", svm.user),
        };
        vm.submission_delay = svm.submit_at;
        vm.preferred_host = svm.machine_id.and_then(|m| machine_map.get(&m).copied());
        let cloudlets = svm
            .tasks
            .iter()
            .map(|t| {
                stats.evictions += t.evictions;
                let length = (t.runtime() * opts.reference.mips_per_pe).max(1.0);
                Cloudlet::new(CloudletId(0), id, length, 1).with_start_delay(t.first_schedule - svm.submit_at)
            })
            .collect::<Vec<_>>();
        stats.cloudlets += cloudlets.len() as u32;
        requests.push(VmRequest { vm, cloudlets });
    }
    let injected = inject_spot_workload(&opts.spot, seed, requests.len() as u32);
    stats.injected_spot_vms = injected.len() as u32;
    requests.extend(injected);
    Ok(TraceWorkload { hosts, requests, stats })
}

/// Reads both tables from disk and runs [`build_trace_workload`].
pub fn load_trace(
    machines: &Path,
    tasks: &Path,
    schema: &SchemaMap,
    opts: &TraceOptions,
    seed: u64,
) -> Result<TraceWorkload, IngestError> {
    let m = read_machine_events(machines, schema)?;
    let t = read_task_events(tasks, schema)?;
    build_trace_workload(m, t, opts, seed)
}

/// Shape of a generated test trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTraceConfig {
    pub tasks: u32,
    pub machines: u32,
    #[serde(default = "default_users")]
    pub users: u32,
    /// Tasks whose SCHEDULE machine can never be recovered.
    #[serde(default)]
    pub unresolvable: u32,
    /// Tasks whose SCHEDULE lacks a machine that a later event supplies.
    #[serde(default)]
    pub recoverable: u32,
    /// Tasks evicted once and scheduled again on the same machine.
    #[serde(default)]
    pub evicted: u32,
    /// Machines whose ADD event lacks CPU or memory.
    #[serde(default)]
    pub incomplete_machines: u32,
    /// Submissions are spread over this many seconds.
    #[serde(default = "default_span")]
    pub span_s: f64,
    #[serde(default = "default_min_runtime")]
    pub min_runtime_s: f64,
    #[serde(default = "default_max_runtime")]
    pub max_runtime_s: f64,
}

fn default_users() -> u32 {
    10
}

fn default_span() -> f64 {
    3600.0
}

fn default_min_runtime() -> f64 {
    60.0
}

fn default_max_runtime() -> f64 {
    900.0
}

impl SyntheticTraceConfig {
    pub fn new(tasks: u32, machines: u32) -> Self {
        Self {
            tasks,
            machines,
            users: default_users(),
            unresolvable: 0,
            recoverable: 0,
            evicted: 0,
            incomplete_machines: 0,
            span_s: default_span(),
            min_runtime_s: default_min_runtime(),
            max_runtime_s: default_max_runtime(),
        }
    }
}

/// Deterministic trace with exactly the requested number of unresolvable,
/// recoverable and evicted tasks.
pub fn generate_synthetic_trace(cfg: &SyntheticTraceConfig, seed: u64) -> (Vec<MachineEvent>, Vec<TaskEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let us = |s: f64| (s * MICROS_PER_SECOND).round() as u64;
    let platforms = ["platform-a", "platform-b"];
    let mut machines: Vec<MachineEvent> = (0..cfg.machines)
        .map(|m| {
            let big = m % 2 == 0;
            MachineEvent {
                timestamp: 0,
                machine_id: 1000 + u64::from(m),
                kind: MachineEventKind::Add,
                platform: Some(platforms[(m % 2) as usize].to_string()),
                cpu: Some(if big { 1.0 } else { 0.5 }),
                memory: Some(if big { 1.0 } else { 0.5 }),
            }
        })
        .collect();
    for e in machines.iter_mut().rev().take(cfg.incomplete_machines as usize) {
        if e.machine_id % 2 == 0 {
            e.cpu = None;
        } else {
            e.memory = None;
        }
    }

    let mut roles: Vec<u8> = Vec::with_capacity(cfg.tasks as usize);
    roles.extend(std::iter::repeat(1).take(cfg.unresolvable as usize));
    roles.extend(std::iter::repeat(2).take(cfg.recoverable as usize));
    roles.extend(std::iter::repeat(3).take(cfg.evicted as usize));
    roles.resize(cfg.tasks as usize, 0);
    roles.shuffle(&mut rng);

    let mut tasks = Vec::new();
    for (i, role) in roles.into_iter().enumerate() {
        let job_id = 5_000_000 + (i / 4) as u64;
        let task_index = (i % 4) as u64;
        let user = format!("user-{}", rng.gen_range(0..cfg.users.max(1)));
        let machine = 1000 + u64::from(rng.gen_range(0..cfg.machines.max(1)));
        let submit = rng.gen_range(0.0..cfg.span_s);
        let start = submit + rng.gen_range(0.0..30.0);
        let runtime = rng.gen_range(cfg.min_runtime_s..=cfg.max_runtime_s);
        let cpu = (rng.gen_range(0.01..0.1f64) * 1e4).round() / 1e4;
        let mem = (rng.gen_range(0.01..0.1f64) * 1e4).round() / 1e4;
        let ev = |t: f64, kind, machine_id| TaskEvent {
            timestamp: us(t),
            job_id,
            task_index,
            machine_id,
            kind,
            user: user.clone(),
            cpu_request: Some(cpu),
            memory_request: Some(mem),
        };
        tasks.push(ev(submit, TaskEventKind::Submit, None));
        match role {
            1 => {
                tasks.push(ev(start, TaskEventKind::Schedule, None));
                tasks.push(ev(start + runtime, TaskEventKind::Finish, None));
            }
            2 => {
                tasks.push(ev(start, TaskEventKind::Schedule, None));
                tasks.push(ev(start + runtime, TaskEventKind::Finish, Some(machine)));
            }
            3 => {
                let cut = runtime / 2.0;
                tasks.push(ev(start, TaskEventKind::Schedule, Some(machine)));
                tasks.push(ev(start + cut, TaskEventKind::Evict, Some(machine)));
                tasks.push(ev(start + cut + 20.0, TaskEventKind::Schedule, Some(machine)));
                tasks.push(ev(start + runtime + 20.0, TaskEventKind::Finish, Some(machine)));
            }
            _ => {
                tasks.push(ev(start, TaskEventKind::Schedule, Some(machine)));
                tasks.push(ev(start + runtime, TaskEventKind::Finish, Some(machine)));
            }
        }
    }
    tasks.sort_by_key(|e| e.timestamp);
    (machines, tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mev(id: u64, kind: MachineEventKind, cpu: Option<f64>, mem: Option<f64>) -> MachineEvent {
        MachineEvent { timestamp: 0, machine_id: id, kind, platform: Some("p".into()), cpu, memory: mem }
    }

    fn tev(t: u64, job: u64, kind: TaskEventKind, machine: Option<u64>, user: &str) -> TaskEvent {
        TaskEvent {
            timestamp: t,
            job_id: job,
            task_index: 0,
            machine_id: machine,
            kind,
            user: user.into(),
            cpu_request: Some(0.1),
            memory_request: Some(0.1),
        }
    }

    #[test]
    fn parses_2011_layout() {
        let text = "0,5,0,HofLGzk1Or,0.5,0.2493\n600000000,5,1,,,\n";
        let ev = parse_machine_events(text.as_bytes(), Path::new("m.csv"), &SchemaMap::default()).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].cpu, Some(0.5));
        assert_eq!(ev[1].kind, MachineEventKind::Remove);
        assert_eq!(ev[1].cpu, None);
        let text = "5611824441,,6251812952,1761,1306108,1,fJYeclskJqPWsAT6TX/r9X5OiIZpSEb2PBGliYAOMxM=,0,0,0.02499,0.07959,0.0003862,1\n";
        let t = parse_task_events(text.as_bytes(), Path::new("t.csv"), &SchemaMap::default()).unwrap();
        assert_eq!(t[0].kind, TaskEventKind::Schedule);
        assert_eq!(t[0].machine_id, Some(1306108));
        assert_eq!(t[0].cpu_request, Some(0.02499));
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let text = "0,1,0,p,0.5,0.5\nabc,1,0,p,0.5,0.5\n";
        let err = parse_machine_events(text.as_bytes(), Path::new("machines.csv"), &SchemaMap::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("machines.csv:2"), "{msg}");
    }

    #[test]
    fn schema_map_reorders_columns() {
        let schema = SchemaMap::from_json(
            r#"{"machine_events": {"timestamp": 5, "machine_id": 0, "event_type": 1, "platform": 2, "cpu": 3, "memory": 4}}"#,
        )
        .unwrap();
        let ev = parse_machine_events("7,0,p,0.25,0.5,100\n".as_bytes(), Path::new("m"), &schema).unwrap();
        assert_eq!((ev[0].timestamp, ev[0].machine_id, ev[0].cpu), (100, 7, Some(0.25)));
        assert!(SchemaMap::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn mode_fill() {
        let ev = vec![
            mev(1, MachineEventKind::Add, Some(0.5), Some(1.0)),
            mev(2, MachineEventKind::Add, Some(0.5), Some(1.0)),
            mev(3, MachineEventKind::Add, None, Some(1.0)),
        ];
        let (out, stats) = prepare_machines(ev).unwrap();
        assert_eq!(out[2].cpu, Some(0.5));
        assert_eq!(stats.filled_cpu, 1);
    }

    #[test]
    fn mode_prefers_same_platform_and_breaks_ties_low() {
        let mut ev = vec![
            mev(1, MachineEventKind::Add, Some(1.0), Some(1.0)),
            mev(2, MachineEventKind::Add, Some(0.25), Some(1.0)),
            mev(3, MachineEventKind::Add, Some(0.5), Some(1.0)),
            mev(4, MachineEventKind::Add, None, Some(1.0)),
            mev(5, MachineEventKind::Add, Some(1.0), Some(1.0)),
        ];
        ev[4].platform = Some("q".into());
        let (out, _) = prepare_machines(ev).unwrap();
        // Platform p has 1.0, 0.25, 0.5 once each: the smallest wins.
        assert_eq!(out[3].cpu, Some(0.25));
    }

    #[test]
    fn complete_machines_are_unchanged() {
        let ev = vec![mev(1, MachineEventKind::Add, Some(0.5), Some(0.5))];
        let (out, stats) = prepare_machines(ev.clone()).unwrap();
        assert_eq!(out, ev);
        assert_eq!(stats, PrepareStats::default());
    }

    #[test]
    fn all_missing_is_an_error() {
        let ev = vec![mev(1, MachineEventKind::Add, None, Some(0.5)), mev(2, MachineEventKind::Add, None, Some(0.5))];
        assert!(matches!(prepare_machines(ev), Err(IngestError::NoValueToFill("cpus"))));
    }

    #[test]
    fn events_before_add_are_dropped() {
        let mut ev = vec![mev(1, MachineEventKind::Update, Some(0.5), Some(0.5))];
        ev.push(MachineEvent { timestamp: 10, ..mev(1, MachineEventKind::Add, Some(0.5), Some(0.5)) });
        let (out, stats) = prepare_machines(ev).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(stats.dropped_before_add, 1);
    }

    #[test]
    fn schedule_inherits_machine_from_later_event() {
        let ev = vec![
            tev(0, 1, TaskEventKind::Submit, None, "u"),
            tev(10, 1, TaskEventKind::Schedule, None, "u"),
            tev(20, 1, TaskEventKind::Finish, Some(7), "u"),
        ];
        let (out, stats) = reconcile_tasks(ev, UnresolvedMode::Exclude);
        assert_eq!(out[1].machine_id, Some(7));
        assert_eq!(stats.inherited, 1);
        assert_eq!(stats.excluded, 0);
    }

    #[test]
    fn unresolvable_tasks_are_counted() {
        let mut ev = Vec::new();
        for job in 0..100 {
            let m = if job < 2 { None } else { Some(3) };
            ev.push(tev(job * 10, job, TaskEventKind::Schedule, m, "u"));
            ev.push(tev(job * 10 + 5, job, TaskEventKind::Finish, m, "u"));
        }
        let (out, s) = reconcile_tasks(ev.clone(), UnresolvedMode::Exclude);
        assert_eq!(s.excluded, 2);
        assert_eq!(s.exclusion_pct, 2.0);
        assert_eq!(s.excluded + s.resolved + s.policy_allocated, s.schedule_events);
        assert_eq!(out.len(), 196);
        let (out, s) = reconcile_tasks(ev, UnresolvedMode::Policy);
        assert_eq!(s.policy_allocated, 2);
        assert_eq!(s.excluded + s.resolved + s.policy_allocated, s.schedule_events);
        assert_eq!(out.len(), 200);
    }

    #[test]
    fn grouping_by_user_and_machine() {
        let ev = vec![
            tev(0, 1, TaskEventKind::Schedule, Some(1), "u1"),
            tev(0, 2, TaskEventKind::Schedule, Some(1), "u1"),
            tev(0, 3, TaskEventKind::Schedule, Some(2), "u1"),
        ];
        let vms = group_synthetic_vms(&ev, &ReferenceMachine::default(), 10.0);
        let sizes: Vec<usize> = vms.iter().map(|v| v.tasks.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert!(group_synthetic_vms(&[], &ReferenceMachine::default(), 0.0).is_empty());
    }

    #[test]
    fn evicted_task_keeps_its_cloudlet() {
        let s = 1_000_000;
        let ev = vec![
            tev(0, 1, TaskEventKind::Submit, None, "u"),
            tev(10 * s, 1, TaskEventKind::Schedule, Some(4), "u"),
            tev(40 * s, 1, TaskEventKind::Evict, Some(4), "u"),
            tev(60 * s, 1, TaskEventKind::Schedule, Some(4), "u"),
            tev(100 * s, 1, TaskEventKind::Finish, Some(4), "u"),
        ];
        let vms = group_synthetic_vms(&ev, &ReferenceMachine::default(), 200.0);
        assert_eq!(vms.len(), 1);
        assert_eq!(vms[0].tasks.len(), 1);
        assert_eq!(vms[0].tasks[0].runtime(), 70.0);
        assert_eq!(vms[0].tasks[0].evictions, 1);
    }

    #[test]
    fn demand_is_peak_concurrent_request() {
        let s = 1_000_000;
        let mut ev = Vec::new();
        for job in 0..3 {
            ev.push(tev(job * 5 * s, job, TaskEventKind::Schedule, Some(1), "u"));
            ev.push(tev((job * 5 + 7) * s, job, TaskEventKind::Finish, Some(1), "u"));
        }
        // Overlaps pairwise only: peak is 2 tasks at 0.1 CPU each.
        let vms = group_synthetic_vms(&ev, &ReferenceMachine::default(), 100.0);
        assert_eq!(vms[0].pes, 2);
        assert_eq!(vms[0].ram, (0.2f64 * 16384.0).ceil() as u64);
    }

    #[test]
    fn injected_spot_lengths_match_duration() {
        let cfg = SpotInjection {
            count: 2,
            durations: vec![72_000.0],
            spec: VmSpec::new(1000.0, 1, 512, 100, 1000),
            ..Default::default()
        };
        let reqs = inject_spot_workload(&cfg, 1, 0);
        assert!(reqs.iter().all(|r| r.cloudlets[0].length == 72_000_000.0));
        assert!(inject_spot_workload(&SpotInjection::default(), 1, 0).is_empty());
        let a: Vec<f64> = inject_spot_workload(&SpotInjection { submit_end: 100.0, ..cfg.clone() }, 9, 0)
            .iter()
            .map(|r| r.vm.submission_delay)
            .collect();
        let b: Vec<f64> = inject_spot_workload(&SpotInjection { submit_end: 100.0, ..cfg }, 9, 0)
            .iter()
            .map(|r| r.vm.submission_delay)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn timestamps_convert_exactly_to_microseconds() {
        for us in [0u64, 1, 600_000_000, 2_506_199_602_822, 123_456_789] {
            let s = micros_to_secs(us);
            assert_eq!((s * MICROS_PER_SECOND).round() as u64, us);
        }
    }

    #[test]
    fn synthetic_trace_round_trips_through_files() {
        let mut cfg = SyntheticTraceConfig::new(200, 5);
        cfg.unresolvable = 4;
        cfg.recoverable = 10;
        cfg.incomplete_machines = 1;
        let (m, t) = generate_synthetic_trace(&cfg, 3);
        let mut mb = Vec::new();
        let mut tb = Vec::new();
        write_machine_events(&mut mb, &m).unwrap();
        write_task_events(&mut tb, &t).unwrap();
        let m2 = parse_machine_events(mb.as_slice(), Path::new("m"), &SchemaMap::default()).unwrap();
        let t2 = parse_task_events(tb.as_slice(), Path::new("t"), &SchemaMap::default()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(t, t2);
        let w = build_trace_workload(m2, t2, &TraceOptions::default(), 3).unwrap();
        assert_eq!(w.stats.reconcile.exclusion_pct, 2.0);
        assert_eq!(w.stats.reconcile.inherited, 10);
        let cloudlets: usize = w.requests.iter().map(|r| r.cloudlets.len()).sum();
        assert_eq!(cloudlets, 196);
    }
}
