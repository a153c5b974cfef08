//! Post-run tables, summary statistics and CSV/JSON export.
//!
//! Column orders are fixed by `schema/columns.json`. CSV durations and
//! timestamps carry two decimals (half away from zero); JSON keeps full
//! precision so it re-parses to the in-memory report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::PolicyScorecard;
use crate::broker::{DynamicVm, VmState};
use crate::cloud::RunResult;
use crate::error::ExportError;
use crate::kernel::SimTime;

/// Column names per table, as committed in the schema file.
pub const COLUMN_SCHEMA: &str = include_str!("../schema/columns.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmReportRow {
    pub vm_id: u32,
    pub label: String,
    pub kind: String,
    pub final_state: VmState,
    pub requested_at: Option<f64>,
    pub created_at: Option<f64>,
    pub destroyed_at: Option<f64>,
    /// Seconds from request to first start.
    pub waiting_s: Option<f64>,
    /// Hosts of each execution period, in order.
    pub host_sequence: Vec<u32>,
    pub interruption_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotReportRow {
    pub vm_id: u32,
    pub final_state: VmState,
    pub interruption_count: u32,
    pub avg_interruption_s: Option<f64>,
    pub min_interruption_s: Option<f64>,
    pub max_interruption_s: Option<f64>,
    /// Execution periods after the first.
    pub redeploy_count: u32,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRow {
    pub vm_id: u32,
    pub kind: String,
    pub period: u32,
    pub host_id: u32,
    pub start: f64,
    pub stop: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPoint {
    pub time: f64,
    pub active_on_demand: u32,
    pub active_spot: u32,
    pub hibernated: u32,
    pub waiting: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub end_time: f64,
    pub total_vms: u32,
    pub on_demand_vms: u32,
    pub on_demand_finished: u32,
    pub on_demand_failed: u32,
    pub spot_vms: u32,
    pub total_interruptions: u32,
    pub max_interruptions_per_vm: u32,
    /// Pooled over every gap of every spot VM.
    pub avg_interruption_s: Option<f64>,
    pub min_interruption_s: Option<f64>,
    pub max_interruption_s: Option<f64>,
    pub completed_without_interruption: u32,
    pub completed_after_interruption: u32,
    /// Spot VMs interrupted at least once.
    pub interrupted: u32,
    /// Spot VMs resumed at least once.
    pub redeployed: u32,
    pub terminated: u32,
    pub failed: u32,
    /// Spot VMs neither finished, terminated nor failed when the run ended.
    pub still_active: u32,
    pub rejected_interruptions: u32,
    pub events_delivered: u64,
}

impl Summary {
    /// Every spot VM lands in exactly one outcome bucket.
    pub fn accounting_holds(&self) -> bool {
        self.completed_without_interruption
            + self.completed_after_interruption
            + self.terminated
            + self.failed
            + self.still_active
            == self.spot_vms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Summary,
    pub vms: Vec<VmReportRow>,
    pub spot: Vec<SpotReportRow>,
    pub executions: Vec<ExecutionRow>,
    pub series: Vec<TimeSeriesPoint>,
}

fn secs(t: Option<SimTime>) -> Option<f64> {
    t.map(SimTime::secs)
}

fn min_max(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let min = xs.iter().copied().reduce(f64::min);
    let max = xs.iter().copied().reduce(f64::max);
    (min, max)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn vm_row(vm: &DynamicVm) -> VmReportRow {
    VmReportRow {
        vm_id: vm.id.0,
        label: vm.label.clone(),
        kind: vm.kind.label().to_string(),
        final_state: vm.state,
        requested_at: secs(vm.requested_at),
        created_at: secs(vm.created_at),
        destroyed_at: secs(vm.destroyed_at),
        waiting_s: match (vm.requested_at, vm.created_at) {
            (Some(r), Some(c)) => Some(c - r),
            _ => None,
        },
        host_sequence: vm.history.hosts().iter().map(|h| h.0).collect(),
        interruption_count: vm.interruption_count,
    }
}

fn spot_row(vm: &DynamicVm) -> SpotReportRow {
    let gaps = vm.history.gaps();
    let (min, max) = min_max(&gaps);
    SpotReportRow {
        vm_id: vm.id.0,
        final_state: vm.state,
        interruption_count: vm.interruption_count,
        avg_interruption_s: vm.history.average_interruption_time(),
        min_interruption_s: min,
        max_interruption_s: max,
        redeploy_count: vm.history.len().saturating_sub(1) as u32,
        completed: vm.state == VmState::Finished,
    }
}

/// Samples VM state counts every `interval` seconds from the transition log.
pub fn time_series(result: &RunResult, interval: f64) -> Vec<TimeSeriesPoint> {
    let mut spot = std::collections::HashMap::new();
    for vm in &result.vms {
        spot.insert(vm.id, vm.is_spot());
    }
    let mut state = std::collections::HashMap::new();
    let mut counts = TimeSeriesPoint { time: 0.0, active_on_demand: 0, active_spot: 0, hibernated: 0, waiting: 0 };
    let bump = |c: &mut TimeSeriesPoint, s: VmState, is_spot: bool, up: bool| {
        let slot = match s {
            VmState::Running | VmState::Warned if is_spot => &mut c.active_spot,
            VmState::Running | VmState::Warned => &mut c.active_on_demand,
            VmState::Hibernated => &mut c.hibernated,
            VmState::Waiting => &mut c.waiting,
            _ => return,
        };
        if up {
            *slot += 1;
        } else {
            *slot -= 1;
        }
    };
    let mut out = Vec::new();
    let mut it = result.log.transitions.iter().peekable();
    let end = result.end_time.secs();
    let mut k = 0u64;
    loop {
        let t = k as f64 * interval;
        if t > end + 1e-9 {
            break;
        }
        while let Some(tr) = it.next_if(|tr| tr.time.secs() <= t) {
            let is_spot = spot[&tr.vm];
            if let Some(prev) = state.insert(tr.vm, tr.to) {
                bump(&mut counts, prev, is_spot, false);
            }
            bump(&mut counts, tr.to, is_spot, true);
        }
        counts.time = t;
        out.push(counts);
        k += 1;
    }
    out
}

/// Builds every table and the summary from a finished run.
pub fn aggregate(result: &RunResult) -> Report {
    let vms: Vec<VmReportRow> = result.vms.iter().map(vm_row).collect();
    let spot_vms: Vec<&DynamicVm> = result.vms.iter().filter(|v| v.is_spot()).collect();
    let spot: Vec<SpotReportRow> = spot_vms.iter().map(|v| spot_row(v)).collect();
    let executions = result
        .vms
        .iter()
        .flat_map(|vm| {
            vm.history.records().iter().enumerate().map(move |(i, r)| ExecutionRow {
                vm_id: vm.id.0,
                kind: vm.kind.label().to_string(),
                period: i as u32,
                host_id: r.host.0,
                start: r.start.secs(),
                stop: secs(r.stop),
            })
        })
        .collect();

    let gaps: Vec<f64> = spot_vms.iter().flat_map(|v| v.history.gaps()).collect();
    let (min_gap, max_gap) = min_max(&gaps);
    let mut s = Summary {
        policy: result.policy.clone(),
        end_time: result.end_time.secs(),
        total_vms: result.vms.len() as u32,
        spot_vms: spot_vms.len() as u32,
        avg_interruption_s: mean(&gaps),
        min_interruption_s: min_gap,
        max_interruption_s: max_gap,
        rejected_interruptions: result.log.rejected_interruptions.len() as u32,
        events_delivered: result.events_delivered,
        ..Default::default()
    };
    for vm in &result.vms {
        if !vm.is_spot() {
            s.on_demand_vms += 1;
            match vm.state {
                VmState::Finished => s.on_demand_finished += 1,
                VmState::Failed => s.on_demand_failed += 1,
                _ => {}
            }
            continue;
        }
        s.total_interruptions += vm.interruption_count;
        s.max_interruptions_per_vm = s.max_interruptions_per_vm.max(vm.interruption_count);
        if vm.interruption_count > 0 {
            s.interrupted += 1;
        }
        if vm.history.len() > 1 {
            s.redeployed += 1;
        }
        match vm.state {
            VmState::Finished if vm.interruption_count == 0 => s.completed_without_interruption += 1,
            VmState::Finished => s.completed_after_interruption += 1,
            VmState::Terminated => s.terminated += 1,
            VmState::Failed => s.failed += 1,
            _ => s.still_active += 1,
        }
    }
    let interval = if result.scheduling_interval > 0.0 { result.scheduling_interval } else { 1.0 };
    Report { summary: s, vms, spot, executions, series: time_series(result, interval) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (expected csv or json)")),
        }
    }
}

/// Two decimals, halves rounded away from zero.
pub fn fmt2(x: f64) -> String {
    format!("{:.2}", (x * 100.0).round() / 100.0)
}

fn opt2(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_default()
}

fn state(s: VmState) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Header rows for each table, in export order.
pub fn headers(table: &str) -> &'static [&'static str] {
    match table {
        "vms" => &[
            "vm_id",
            "label",
            "kind",
            "final_state",
            "requested_at",
            "created_at",
            "destroyed_at",
            "waiting_s",
            "host_sequence",
            "interruption_count",
        ],
        "spot" => &[
            "vm_id",
            "final_state",
            "interruption_count",
            "avg_interruption_s",
            "min_interruption_s",
            "max_interruption_s",
            "redeploy_count",
            "completed",
        ],
        "executions" => &["vm_id", "kind", "period", "host_id", "start", "stop"],
        "series" => &["time", "active_on_demand", "active_spot", "hibernated", "waiting"],
        _ => &[],
    }
}

fn csv_rows(report: &Report, table: &str) -> Vec<Vec<String>> {
    match table {
        "vms" => report
            .vms
            .iter()
            .map(|r| {
                vec![
                    r.vm_id.to_string(),
                    r.label.clone(),
                    r.kind.clone(),
                    state(r.final_state),
                    opt2(r.requested_at),
                    opt2(r.created_at),
                    opt2(r.destroyed_at),
                    opt2(r.waiting_s),
                    r.host_sequence.iter().map(u32::to_string).collect::<Vec<_>>().join(";"),
                    r.interruption_count.to_string(),
                ]
            })
            .collect(),
        "spot" => report
            .spot
            .iter()
            .map(|r| {
                vec![
                    r.vm_id.to_string(),
                    state(r.final_state),
                    r.interruption_count.to_string(),
                    opt2(r.avg_interruption_s),
                    opt2(r.min_interruption_s),
                    opt2(r.max_interruption_s),
                    r.redeploy_count.to_string(),
                    r.completed.to_string(),
                ]
            })
            .collect(),
        "executions" => report
            .executions
            .iter()
            .map(|r| {
                vec![
                    r.vm_id.to_string(),
                    r.kind.clone(),
                    r.period.to_string(),
                    r.host_id.to_string(),
                    fmt2(r.start),
                    opt2(r.stop),
                ]
            })
            .collect(),
        "series" => report
            .series
            .iter()
            .map(|p| {
                vec![
                    fmt2(p.time),
                    p.active_on_demand.to_string(),
                    p.active_spot.to_string(),
                    p.hibernated.to_string(),
                    p.waiting.to_string(),
                ]
            })
            .collect(),
        _ => Vec::new(),
    }
}

/// Renders one table as CSV text (header first, LF line endings).
pub fn to_csv(report: &Report, table: &str) -> Result<String, csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(headers(table))?;
    for row in csv_rows(report, table) {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("CSV fields are UTF-8"))
}

/// Renders one table as `{"<table>": [...]}`.
pub fn to_json(report: &Report, table: &str) -> serde_json::Result<String> {
    let value = match table {
        "vms" => serde_json::to_value(&report.vms)?,
        "spot" => serde_json::to_value(&report.spot)?,
        "executions" => serde_json::to_value(&report.executions)?,
        "series" => serde_json::to_value(&report.series)?,
        _ => serde_json::Value::Array(Vec::new()),
    };
    let mut obj = serde_json::Map::new();
    obj.insert(table.to_string(), value);
    serde_json::to_string_pretty(&serde_json::Value::Object(obj)).map(|s| s + "\n")
}

pub const TABLES: [&str; 4] = ["vms", "spot", "executions", "series"];

fn write(path: &Path, contents: &str) -> Result<(), ExportError> {
    fs::write(path, contents).map_err(|source| ExportError::Io { path: path.to_path_buf(), source })
}

/// Writes the four tables in `format` plus `summary.json` into `out_dir`.
pub fn export(report: &Report, format: Format, out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    fs::create_dir_all(out_dir).map_err(|source| ExportError::Io { path: out_dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for table in TABLES {
        let (path, body) = match format {
            Format::Csv => {
                let p = out_dir.join(format!("{table}.csv"));
                let body = to_csv(report, table).map_err(|source| ExportError::Csv { path: p.clone(), source })?;
                (p, body)
            }
            Format::Json => {
                let p = out_dir.join(format!("{table}.json"));
                let body = to_json(report, table).map_err(|source| ExportError::Json { path: p.clone(), source })?;
                (p, body)
            }
        };
        write(&path, &body)?;
        written.push(path);
    }
    let p = out_dir.join("summary.json");
    let body = serde_json::to_string_pretty(&report.summary)
        .map(|s| s + "\n")
        .map_err(|source| ExportError::Json { path: p.clone(), source })?;
    write(&p, &body)?;
    written.push(p);
    Ok(written)
}

/// One scorecard per line.
pub fn write_scorecards(cards: &[PolicyScorecard], path: &Path) -> Result<(), ExportError> {
    let err = |source| ExportError::Io { path: path.to_path_buf(), source };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(err)?);
    for c in cards {
        let line = serde_json::to_string(c).map_err(|source| ExportError::Json { path: path.to_path_buf(), source })?;
        writeln!(f, "{line}").map_err(err)?;
    }
    f.flush().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{ExecutionHistory, ExecutionRecord, SpotParams};
    use crate::cloud::RunLog;
    use crate::infrastructure::{HostId, VmId, VmSpec};

    fn spot_vm(id: u32, periods: &[(f64, Option<f64>)], state: VmState) -> DynamicVm {
        let mut vm = DynamicVm::spot(VmId(id), VmSpec::new(1000.0, 1, 512, 100, 1000), SpotParams::default());
        vm.history = ExecutionHistory::from_records(
            periods
                .iter()
                .map(|&(a, b)| ExecutionRecord { host: HostId(0), start: SimTime(a), stop: b.map(SimTime) })
                .collect(),
        );
        vm.interruption_count = periods.len().saturating_sub(1) as u32;
        vm.state = state;
        vm
    }

    fn result(vms: Vec<DynamicVm>) -> RunResult {
        RunResult {
            policy: "first-fit".into(),
            end_time: SimTime(100.0),
            scheduling_interval: 10.0,
            fingerprint: 0,
            events_delivered: 0,
            hosts: vec![],
            vms,
            cloudlets: vec![],
            log: RunLog::default(),
        }
    }

    #[test]
    fn counts_interruptions() {
        let r = result(vec![
            spot_vm(0, &[(0.0, Some(5.0)), (10.0, Some(20.0))], VmState::Finished),
            spot_vm(1, &[(0.0, Some(5.0)), (15.0, Some(30.0))], VmState::Finished),
        ]);
        let s = aggregate(&r).summary;
        assert_eq!(s.total_interruptions, 2);
        assert_eq!(s.max_interruptions_per_vm, 1);
        assert!(s.accounting_holds());
    }

    #[test]
    fn no_spot_vms_gives_empty_spot_summary() {
        let mut od = DynamicVm::on_demand(VmId(0), VmSpec::new(1000.0, 1, 512, 100, 1000));
        od.state = VmState::Finished;
        let s = aggregate(&result(vec![od])).summary;
        assert_eq!(s.spot_vms, 0);
        assert_eq!(s.total_interruptions, 0);
        assert_eq!(s.avg_interruption_s, None);
        assert_eq!(s.on_demand_finished, 1);
    }

    #[test]
    fn pooled_gap_statistics() {
        let r = result(vec![
            spot_vm(0, &[(0.0, Some(5.0)), (15.0, Some(20.0))], VmState::Finished),
            spot_vm(1, &[(0.0, Some(5.0)), (25.0, Some(30.0)), (60.0, Some(70.0))], VmState::Finished),
        ]);
        let s = aggregate(&r).summary;
        assert_eq!(s.avg_interruption_s, Some(20.0));
        assert_eq!(s.min_interruption_s, Some(10.0));
        assert_eq!(s.max_interruption_s, Some(30.0));
        assert_eq!(s.completed_after_interruption, 2);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(fmt2(21.1234), "21.12");
        assert_eq!(fmt2(21.125), "21.13");
        assert_eq!(fmt2(0.0), "0.00");
        assert_eq!(fmt2(64.875), "64.88");
    }

    #[test]
    fn empty_table_is_header_only() {
        let rep = aggregate(&result(vec![]));
        assert_eq!(to_csv(&rep, "spot").unwrap(), format!("{}\n", headers("spot").join(",")));
    }

    #[test]
    fn headers_match_schema_file() {
        let schema: serde_json::Value = serde_json::from_str(COLUMN_SCHEMA).unwrap();
        for t in TABLES {
            let cols: Vec<&str> =
                schema[t].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
            assert_eq!(cols, headers(t), "table {t}");
        }
    }

    #[test]
    fn series_counts_follow_transitions() {
        use crate::cloud::Transition;
        let mut r = result(vec![spot_vm(0, &[(10.0, Some(30.0))], VmState::Finished)]);
        let tr = |t: f64, from: Option<VmState>, to| Transition { time: SimTime(t), vm: VmId(0), from, to, host: None };
        r.log.transitions = vec![
            tr(0.0, None, VmState::Waiting),
            tr(10.0, Some(VmState::Waiting), VmState::Running),
            tr(30.0, Some(VmState::Running), VmState::Finished),
        ];
        let s = time_series(&r, 10.0);
        assert_eq!(s.len(), 11);
        assert_eq!(s[0].waiting, 1);
        assert_eq!((s[1].active_spot, s[1].waiting), (1, 0));
        assert_eq!(s[2].active_spot, 1);
        assert_eq!(s[3].active_spot, 0);
    }

    #[test]
    fn export_is_byte_stable_and_round_trips() {
        let r = result(vec![spot_vm(0, &[(0.0, Some(5.123)), (15.0, Some(20.0))], VmState::Finished)]);
        let rep = aggregate(&r);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for fmt in [Format::Csv, Format::Json] {
            let pa = export(&rep, fmt, a.path()).unwrap();
            let pb = export(&rep, fmt, b.path()).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            }
        }
        let spot: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(a.path().join("spot.json")).unwrap()).unwrap();
        let rows: Vec<SpotReportRow> = serde_json::from_value(spot["spot"].clone()).unwrap();
        assert_eq!(rows, rep.spot);
        let summary: Summary =
            serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, rep.summary);
        let csv = fs::read_to_string(a.path().join("executions.csv")).unwrap();
        assert!(csv.contains("0,SPOT,0,0,0.00,5.12\n"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let rep = aggregate(&result(vec![]));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, "x").unwrap();
        let err = export(&rep, Format::Csv, &file.join("sub")).unwrap_err();
        assert!(err.to_string().contains("plain-file"));
    }
}
