//! Experiment driver: data generation, the federated run, metrics CSV, run
//! summary and run-to-run comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::data::{dirichlet_partition, generate, split, PartitionConfig};
use crate::error::{ensure, Error, Result};
use crate::federation::{run, streams, DeviceData, RoundReport, RunOutput};
use crate::gal::GalDecision;
use crate::lora::LoraNetwork;
use crate::mask::ParamCount;
use crate::numeric::SimRng;

pub const CSV_HEADER: &str = "round,sampled_ids,train_loss,weighted_test_acc,server_view_acc,bytes_down,bytes_up,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Synthetic dataset, Dirichlet shards and stratified splits, plus the
/// shared initial network. Independent of the mode.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<(LoraNetwork, Vec<DeviceData>)> {
    let d = &cfg.data;
    let ds = generate(d.num_classes, d.per_class, d.dim, d.class_sep, &mut SimRng::stream(cfg.seed, streams::DATASET))?;
    let shards = dirichlet_partition(
        &ds,
        &PartitionConfig {
            concentration: d.dirichlet_alpha,
            num_devices: cfg.federation.num_devices,
            train_fraction: d.train_fraction,
            seed: cfg.seed,
            min_shard_size: cfg.min_shard_size(),
        },
    )?;
    let devices = shards
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let (train, test) = split(&ds.subset(idx), d.train_fraction, &mut SimRng::stream(cfg.seed, streams::SPLIT | k as u64))?;
            Ok(DeviceData { train: train.into_samples(), test: test.into_samples() })
        })
        .collect::<Result<Vec<_>>>()?;
    let net = LoraNetwork::init(
        d.dim,
        &cfg.model.hidden,
        d.num_classes,
        cfg.model.rank,
        &mut SimRng::stream(cfg.seed, streams::NETWORK),
    )?;
    Ok((net, devices))
}

/// `%.9g`: nine significant digits, trailing zeros dropped.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_csv(reports: &[RoundReport], record_wall_time: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let ids: Vec<String> = r.sampled.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            ids.join(";"),
            format_g9(r.train_loss),
            format_g9(r.weighted_test_acc),
            format_g9(r.server_view_acc),
            r.bytes_down,
            r.bytes_up,
            if record_wall_time { r.wall_ms } else { 0 }
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub gal: GalDecision,
    /// Sample-weighted mean local update ratio per layer.
    pub mean_rho: Vec<f64>,
    pub params: ParamCount,
    pub warmup_epochs: usize,
    pub final_accuracy: Option<f64>,
    pub final_server_view_accuracy: Option<f64>,
    pub total_bytes_down: u64,
    pub total_bytes_up: u64,
}

impl RunSummary {
    fn new(cfg: &ExperimentConfig, out: &RunOutput) -> Self {
        Self {
            mode: cfg.mode,
            seed: cfg.seed,
            rounds: out.reports.len(),
            gal: out.init.gal.clone(),
            mean_rho: out.init.mean_rho.clone(),
            params: out.init.params,
            warmup_epochs: out.init.warmup_epochs,
            final_accuracy: out.reports.last().map(|r| r.weighted_test_acc),
            final_server_view_accuracy: out.reports.last().map(|r| r.server_view_acc),
            total_bytes_down: out.reports.iter().map(|r| r.bytes_down).sum(),
            total_bytes_up: out.reports.iter().map(|r| r.bytes_up).sum(),
        }
    }
}

/// Everything a run produced, before anything touches the disk.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub output: RunOutput,
    pub summary: RunSummary,
    pub csv: String,
}

pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (net, devices) = build_federation(cfg)?;
    let output = run(&cfg.federation_config(), net, devices)?;
    let summary = RunSummary::new(cfg, &output);
    let csv = metrics_csv(&output.reports, cfg.federation.record_wall_time);
    Ok(ExperimentResult { output, summary, csv })
}

/// Runs the experiment and writes the metrics CSV and summary into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    let result = execute(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(METRICS_FILE), &result.csv)?;
    let mut json = serde_json::to_string_pretty(&result.summary)?;
    json.push('\n');
    std::fs::write(out_dir.join(SUMMARY_FILE), json)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub accuracy: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CSV_HEADER {
        return Err(Error::Csv(format!("unexpected header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Csv(format!("line {} has {} fields, expected 8", i + 2, fields.len())));
            }
            let bad = |what: &str| Error::Csv(format!("line {}: bad {what}", i + 2));
            Ok(MetricsRow {
                round: fields[0].parse().map_err(|_| bad("round"))?,
                accuracy: fields[3].parse().map_err(|_| bad("weighted_test_acc"))?,
                bytes_down: fields[5].parse().map_err(|_| bad("bytes_down"))?,
                bytes_up: fields[6].parse().map_err(|_| bad("bytes_up"))?,
            })
        })
        .collect()
}

/// First round whose accuracy reaches `target`, or `None` if it never does.
pub fn rounds_to_target(rows: &[MetricsRow], target: f64) -> Option<usize> {
    rows.iter().find(|r| r.accuracy >= target).map(|r| r.round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetComparison {
    pub target: f64,
    pub a: Option<usize>,
    pub b: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub final_a: f64,
    pub final_b: f64,
    pub targets: Vec<TargetComparison>,
    pub bytes_a: u64,
    pub bytes_b: u64,
}

impl Comparison {
    /// `final_b − final_a`.
    pub fn final_delta(&self) -> f64 {
        self.final_b - self.final_a
    }

    pub fn render(&self) -> String {
        let show = |r: Option<usize>| r.map_or("/".to_string(), |v| v.to_string());
        let mut out = String::new();
        writeln!(out, "final accuracy: a={} b={} delta(b-a)={}", format_g9(self.final_a), format_g9(self.final_b), format_g9(self.final_delta()))
            .unwrap();
        writeln!(out, "total bytes (down+up): a={} b={}", self.bytes_a, self.bytes_b).unwrap();
        writeln!(out, "target,rounds_a,rounds_b").unwrap();
        for t in &self.targets {
            writeln!(out, "{},{},{}", format_g9(t.target), show(t.a), show(t.b)).unwrap();
        }
        out
    }
}

pub fn compare_runs(csv_a: &str, csv_b: &str, targets: &[f64]) -> Result<Comparison> {
    let a = parse_metrics(csv_a)?;
    let b = parse_metrics(csv_b)?;
    ensure!(!a.is_empty() && !b.is_empty(), Csv, "both runs need at least one round");
    let bytes = |rows: &[MetricsRow]| rows.iter().map(|r| r.bytes_down + r.bytes_up).sum();
    Ok(Comparison {
        final_a: a.last().unwrap().accuracy,
        final_b: b.last().unwrap().accuracy,
        targets: targets.iter().map(|&t| TargetComparison { target: t, a: rounds_to_target(&a, t), b: rounds_to_target(&b, t) }).collect(),
        bytes_a: bytes(&a),
        bytes_b: bytes(&b),
    })
}
