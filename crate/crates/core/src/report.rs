//! Report emission: flattens a sweep into plot-ready CSV files and a JSON
//! summary with selected operating points and agreement statistics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::SystemMetrics;
use crate::sweep::{
    select_operating_point, OperatingTarget, SelectedPoint, SweepConfig, SweepResult,
};
use crate::topology::{StageId, Topology};
use crate::trace::{LossSpec, TraceDataset};

/// How often each exact subset of stages is simultaneously correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub stages: Vec<String>,
    pub fraction: f64,
}

/// Empirical correct-subset distribution over all stage subsets, stages
/// ordered cheapest first. Skipped (empty) beyond 10 stages, where the
/// 2^S table stops being a table.
pub fn agreement_table(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
) -> Vec<AgreementRow> {
    let s = topo.len();
    if s > 10 {
        return Vec::new();
    }
    let mut by_cost: Vec<StageId> = topo.stage_ids().collect();
    by_cost.sort_by(|a, b| {
        topo.stage_cost(*a)
            .partial_cmp(&topo.stage_cost(*b))
            .expect("finite costs")
            .then(a.cmp(b))
    });
    let mut counts = vec![0usize; 1 << s];
    for ex in data.examples() {
        let mut mask = 0usize;
        for (bit, &stage) in by_cost.iter().enumerate() {
            if loss.loss(&ex.record(stage).topk, ex.y) == 0.0 {
                mask |= 1 << bit;
            }
        }
        counts[mask] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(mask, &c)| AgreementRow {
            stages: by_cost
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &stage)| topo.name(stage).to_string())
                .collect(),
            fraction: c as f64 / n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OperatingOutcome {
    Selected(SelectedPoint),
    Infeasible,
    NotRequested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_train: usize,
    pub n_test: usize,
    pub terminal_train: SystemMetrics,
    pub terminal_test: SystemMetrics,
    pub budget_point: OperatingOutcome,
    pub tolerance_point: OperatingOutcome,
    pub pareto: Vec<String>,
    pub agreement: Vec<AgreementRow>,
}

fn operating_outcome(result: &SweepResult, target: Option<OperatingTarget>) -> Result<OperatingOutcome> {
    match target {
        None => Ok(OperatingOutcome::NotRequested),
        Some(t) => match select_operating_point(result, t) {
            Ok(p) => Ok(OperatingOutcome::Selected(p)),
            Err(Error::NoFeasiblePoint) => Ok(OperatingOutcome::Infeasible),
            Err(e) => Err(e),
        },
    }
}

fn curve_row(out: &mut String, label: &str, split: &str, m: &SystemMetrics, terminal_time: f64) {
    let speedup = if m.mean_time > 0.0 {
        terminal_time / m.mean_time
    } else {
        f64::INFINITY
    };
    writeln!(
        out,
        "{label},{split},{},{},{},{},{speedup}",
        m.mean_time, m.top1_error, m.topk_error, m.excess_error
    )
    .expect("string write");
}

/// Renders `curve.csv` (one row per point and split), `usage.csv`
/// (per-stage exit and time fractions), and `summary.json`. Returns the
/// paths written. Byte-identical for identical inputs.
pub fn emit_report(
    result: &SweepResult,
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    config: &SweepConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut curve = String::from("lambda,split,mean_time,top1_error,topk_error,excess,speedup\n");
    for p in &result.lambda_points {
        curve_row(
            &mut curve,
            &format!("{}", p.lambda),
            "train",
            &p.train,
            result.terminal_train.mean_time,
        );
        curve_row(
            &mut curve,
            &format!("{}", p.lambda),
            "test",
            &p.test,
            result.terminal_test.mean_time,
        );
    }
    curve_row(
        &mut curve,
        "terminal_only",
        "train",
        &result.terminal_train,
        result.terminal_train.mean_time,
    );
    for b in &result.baselines {
        curve_row(
            &mut curve,
            &b.tag,
            "test",
            &b.metrics,
            result.terminal_test.mean_time,
        );
    }

    let mut usage = String::from("lambda,stage,exit_fraction,time_share\n");
    let usage_rows = |label: &str, m: &SystemMetrics, out: &mut String| {
        for s in topo.stage_ids() {
            let name = topo.name(s);
            writeln!(
                out,
                "{label},{name},{},{}",
                m.exit_fractions[name], m.time_shares[name]
            )
            .expect("string write");
        }
    };
    for p in &result.lambda_points {
        usage_rows(&format!("{}", p.lambda), &p.test, &mut usage);
    }
    for b in &result.baselines {
        if b.tag == "oracle" || b.tag == "terminal_only" {
            usage_rows(&b.tag, &b.metrics, &mut usage);
        }
    }

    let summary = Summary {
        n_train: result.terminal_train.n,
        n_test: result.terminal_test.n,
        terminal_train: result.terminal_train.clone(),
        terminal_test: result.terminal_test.clone(),
        budget_point: operating_outcome(result, config.budget.map(OperatingTarget::Budget))?,
        tolerance_point: operating_outcome(
            result,
            config.tolerance.map(OperatingTarget::Tolerance),
        )?,
        pareto: {
            let candidates = result.pareto_candidates();
            result
                .pareto
                .iter()
                .map(|&i| candidates[i].label.clone())
                .collect()
        },
        agreement: agreement_table(topo, data, loss),
    };
    let summary_json =
        serde_json::to_string_pretty(&summary).expect("summary serializes");

    let files = [
        ("curve.csv", curve),
        ("usage.csv", usage),
        ("summary.json", summary_json),
    ];
    let mut written = Vec::new();
    for (name, content) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::TrainConfig;
    use crate::policy::OverheadSpec;
    use crate::synth::SynthConfig;
    use crate::sweep::run_sweep;

    fn small_pipeline() -> (Topology, TraceDataset, LossSpec, SweepConfig, SweepResult) {
        let mut cfg = SynthConfig::reference();
        cfg.n = 400;
        let (topo, data) = crate::synth::generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        let sweep_cfg = SweepConfig {
            lambda_values: Some(vec![0.0, 10.0]),
            tolerance: Some(0.015),
            ..SweepConfig::default()
        };
        let result = run_sweep(
            &topo,
            &data,
            &sweep_cfg,
            &loss,
            &OverheadSpec::default_for(&topo),
            &TrainConfig::default(),
        )
        .unwrap();
        (topo, data, loss, sweep_cfg, result)
    }

    #[test]
    fn agreement_fractions_sum_to_one_and_match_table() {
        let cfg = SynthConfig::reference();
        let (topo, data) = crate::synth::generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        let table = agreement_table(&topo, &data, &loss);
        assert_eq!(table.len(), 8);
        let total: f64 = table.iter().map(|r| r.fraction).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let all = table
            .iter()
            .find(|r| r.stages == vec!["a", "g", "r"])
            .unwrap();
        assert!((all.fraction - 0.77).abs() < 0.02);
        let none = table.iter().find(|r| r.stages.is_empty()).unwrap();
        assert!((none.fraction - 0.05).abs() < 0.01);
        // Subsets impossible under the generating table stay near zero.
        let weird = table.iter().find(|r| r.stages == vec!["a"]).unwrap();
        assert_eq!(weird.fraction, 0.0);
    }

    #[test]
    fn report_files_are_written_and_consistent() {
        let (topo, data, loss, sweep_cfg, result) = small_pipeline();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&result, &topo, &data, &loss, &sweep_cfg, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let curve = std::fs::read_to_string(&files[0]).unwrap();
        let mut lines = curve.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lambda,split,mean_time,top1_error,topk_error,excess,speedup"
        );
        // Every numeric field parses back to the identical double.
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 7);
            for f in &fields[2..] {
                let v: f64 = f.parse().unwrap();
                assert_eq!(format!("{v}"), **f);
            }
        }
        let usage = std::fs::read_to_string(&files[1]).unwrap();
        // Per point, fractions and shares both sum to one.
        let mut sums: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
        for line in usage.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let entry = sums.entry(fields[0].to_string()).or_insert((0.0, 0.0));
            entry.0 += fields[2].parse::<f64>().unwrap();
            entry.1 += fields[3].parse::<f64>().unwrap();
        }
        for (label, (f, t)) in sums {
            assert!((f - 1.0).abs() < 1e-9, "{label} exit fractions sum {f}");
            assert!((t - 1.0).abs() < 1e-9, "{label} time shares sum {t}");
        }
        let summary: Summary =
            serde_json::from_str(&std::fs::read_to_string(&files[2]).unwrap()).unwrap();
        assert!(matches!(summary.tolerance_point, OperatingOutcome::Selected(_)));
        assert!(matches!(summary.budget_point, OperatingOutcome::NotRequested));
        assert!(!summary.pareto.is_empty());
    }

    #[test]
    fn report_is_byte_deterministic() {
        let (topo, data, loss, sweep_cfg, result) = small_pipeline();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        emit_report(&result, &topo, &data, &loss, &sweep_cfg, dir_a.path()).unwrap();
        emit_report(&result, &topo, &data, &loss, &sweep_cfg, dir_b.path()).unwrap();
        for name in ["curve.csv", "usage.csv", "summary.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
