//! Recorded per-example stage outputs: ranked label lists, meta-features,
//! and prediction entropy, loaded from JSONL and bound to a topology.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{StageId, Topology};

/// Top-k zero/one loss: an example counts as correct when the true label
/// appears among the first `k` ranked labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub k: usize,
}

impl LossSpec {
    pub fn top1() -> Self {
        LossSpec { k: 1 }
    }

    pub fn topk(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("loss top-k must be at least 1".into()));
        }
        Ok(LossSpec { k })
    }

    /// 0.0 when `y` is in the first `k` entries of `ranked`, else 1.0.
    pub fn loss(&self, ranked: &[u32], y: u32) -> f64 {
        let depth = self.k.min(ranked.len());
        if ranked[..depth].contains(&y) {
            0.0
        } else {
            1.0
        }
    }
}

/// Shannon entropy (nats) of a probability vector. Rejects vectors with
/// negative mass or mass not summing to one.
pub fn entropy_of(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::NotAProbabilityVector("empty vector".into()));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::NotAProbabilityVector(format!(
                "component {p} out of range"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotAProbabilityVector(format!(
            "mass sums to {sum}, expected 1"
        )));
    }
    let h = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// What one stage produced for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Ranked predicted labels, best first.
    pub topk: Vec<u32>,
    /// Meta-features the routing policy may condition on.
    pub mf: Vec<f64>,
    /// Entropy of the stage's predictive distribution.
    pub entropy: f64,
}

/// One example with a record for every stage in the topology, indexed by
/// [`StageId`] in topology order.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub y: u32,
    records: Vec<StageRecord>,
}

impl Example {
    pub fn record(&self, s: StageId) -> &StageRecord {
        &self.records[s.0]
    }
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    y: u32,
    stages: BTreeMap<String, StageRecord>,
}

/// A trace bound to a topology: every example carries a record for every
/// stage, and each stage's meta-feature dimension is consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    examples: Vec<Example>,
    feature_dims: Vec<usize>,
}

impl TraceDataset {
    pub fn new(topo: &Topology, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n_stages = topo.len();
        let mut feature_dims = vec![usize::MAX; n_stages];
        for ex in &examples {
            if ex.records.len() != n_stages {
                let missing = ex.records.len().min(n_stages);
                return Err(Error::MissingStageRecord {
                    example: ex.id.clone(),
                    stage: topo.name(StageId(missing)).to_string(),
                });
            }
            for s in topo.stage_ids() {
                let rec = ex.record(s);
                if rec.topk.is_empty() {
                    return Err(Error::MalformedLine {
                        line: 0,
                        reason: format!(
                            "example `{}` has an empty ranked list at stage `{}`",
                            ex.id,
                            topo.name(s)
                        ),
                    });
                }
                let dim = rec.mf.len();
                if feature_dims[s.0] == usize::MAX {
                    feature_dims[s.0] = dim;
                } else if feature_dims[s.0] != dim {
                    return Err(Error::InconsistentFeatureDims {
                        stage: topo.name(s).to_string(),
                        expected: feature_dims[s.0],
                        found: dim,
                    });
                }
            }
        }
        Ok(TraceDataset {
            examples,
            feature_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn feature_dim(&self, s: StageId) -> usize {
        self.feature_dims[s.0]
    }

    /// Fraction of examples whose ranked list at `s` contains the true label.
    pub fn stage_accuracy(&self, s: StageId, loss: &LossSpec) -> f64 {
        let wrong: f64 = self
            .examples
            .iter()
            .map(|ex| loss.loss(&ex.record(s).topk, ex.y))
            .sum();
        1.0 - wrong / self.examples.len() as f64
    }

    /// Deterministic shuffled split into (first, second) where `fraction`
    /// of the examples land in the first part. Both halves stay non-empty.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(TraceDataset, TraceDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::FractionOutOfRange(fraction));
        }
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let cut = ((self.examples.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, self.examples.len().saturating_sub(1));
        if self.examples.len() < 2 {
            return Err(Error::FractionOutOfRange(fraction));
        }
        let first = TraceDataset {
            examples: order[..cut].iter().map(|&i| self.examples[i].clone()).collect(),
            feature_dims: self.feature_dims.clone(),
        };
        let second = TraceDataset {
            examples: order[cut..].iter().map(|&i| self.examples[i].clone()).collect(),
            feature_dims: self.feature_dims.clone(),
        };
        Ok((first, second))
    }

    pub fn save_jsonl(&self, path: &Path, topo: &Topology) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let raw = RawExample {
                id: ex.id.clone(),
                y: ex.y,
                stages: topo
                    .stage_ids()
                    .map(|s| (topo.name(s).to_string(), ex.record(s).clone()))
                    .collect(),
            };
            let line = serde_json::to_string(&raw).expect("record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path, topo: &Topology) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut examples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            let mut records = Vec::with_capacity(topo.len());
            for s in topo.stage_ids() {
                let name = topo.name(s);
                let rec = raw.stages.get(name).ok_or_else(|| Error::MissingStageRecord {
                    example: raw.id.clone(),
                    stage: name.to_string(),
                })?;
                records.push(rec.clone());
            }
            for name in raw.stages.keys() {
                topo.id(name)?;
            }
            examples.push(Example {
                id: raw.id,
                y: raw.y,
                records,
            });
        }
        TraceDataset::new(topo, examples)
    }
}

/// Builder used by the synthesizer and by tests to assemble examples
/// stage by stage in topology order.
pub fn example_from_records(id: String, y: u32, records: Vec<StageRecord>) -> Example {
    Example { id, y, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Topology;
    use proptest::prelude::*;

    fn two_stage_topo() -> Topology {
        Topology::chain(vec!["a".into(), "t".into()], vec![1.0, 4.0]).unwrap()
    }

    fn rec(topk: Vec<u32>, mf: Vec<f64>) -> StageRecord {
        StageRecord {
            topk,
            mf,
            entropy: 0.5,
        }
    }

    fn tiny_dataset(topo: &Topology) -> TraceDataset {
        let examples = (0..10)
            .map(|i| {
                example_from_records(
                    format!("e{i}"),
                    i as u32 % 3,
                    vec![rec(vec![0, 1], vec![0.1]), rec(vec![i as u32 % 3], vec![0.2, 0.3])],
                )
            })
            .collect();
        TraceDataset::new(topo, examples).unwrap()
    }

    #[test]
    fn topk_loss_counts_membership() {
        let l = LossSpec::topk(2).unwrap();
        assert_eq!(l.loss(&[3, 7, 9], 7), 0.0);
        assert_eq!(l.loss(&[3, 7, 9], 9), 1.0);
        assert_eq!(LossSpec::top1().loss(&[3, 7, 9], 3), 0.0);
    }

    #[test]
    fn uniform_distribution_hits_max_entropy() {
        let h = entropy_of(&[0.25; 4]).unwrap();
        assert!((h - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_has_zero_entropy() {
        assert_eq!(entropy_of(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn non_simplex_is_rejected() {
        assert!(matches!(
            entropy_of(&[0.5, 0.6]),
            Err(Error::NotAProbabilityVector(_))
        ));
        assert!(matches!(
            entropy_of(&[-0.1, 1.1]),
            Err(Error::NotAProbabilityVector(_))
        ));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let topo = two_stage_topo();
        let ds = tiny_dataset(&topo);
        let (a1, b1) = ds.split(0.5, 7).unwrap();
        let (a2, b2) = ds.split(0.5, 7).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.len() + b1.len(), ds.len());
        let mut ids: Vec<&str> = a1
            .examples()
            .iter()
            .chain(b1.examples())
            .map(|e| e.id.as_str())
            .collect();
        ids.sort();
        let mut expect: Vec<String> = (0..10).map(|i| format!("e{i}")).collect();
        expect.sort();
        assert_eq!(ids, expect.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn different_seed_changes_split() {
        let topo = two_stage_topo();
        let ds = tiny_dataset(&topo);
        let (a1, _) = ds.split(0.5, 7).unwrap();
        let (a2, _) = ds.split(0.5, 8).unwrap();
        assert_ne!(a1, a2);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        let topo = two_stage_topo();
        let ds = tiny_dataset(&topo);
        assert!(matches!(
            ds.split(0.0, 1),
            Err(Error::FractionOutOfRange(_))
        ));
        assert!(matches!(
            ds.split(1.0, 1),
            Err(Error::FractionOutOfRange(_))
        ));
    }

    #[test]
    fn inconsistent_feature_dims_are_rejected() {
        let topo = two_stage_topo();
        let examples = vec![
            example_from_records("a".into(), 0, vec![rec(vec![0], vec![0.1]), rec(vec![0], vec![0.2])]),
            example_from_records("b".into(), 0, vec![rec(vec![0], vec![0.1, 0.9]), rec(vec![0], vec![0.2])]),
        ];
        assert!(matches!(
            TraceDataset::new(&topo, examples),
            Err(Error::InconsistentFeatureDims { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let topo = two_stage_topo();
        let ds = tiny_dataset(&topo);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        ds.save_jsonl(&path, &topo).unwrap();
        let back = TraceDataset::load_jsonl(&path, &topo).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn missing_stage_record_is_reported() {
        let topo = two_stage_topo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"e0","y":1,"stages":{"a":{"topk":[1],"mf":[0.1],"entropy":0.2}}}"#,
        )
        .unwrap();
        assert!(matches!(
            TraceDataset::load_jsonl(&path, &topo),
            Err(Error::MissingStageRecord { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let topo = two_stage_topo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"e0\",\"y\":1,\"stages\":{\"a\":{\"topk\":[1],\"mf\":[0.1],\"entropy\":0.2},\"t\":{\"topk\":[1],\"mf\":[0.1],\"entropy\":0.2}}}\nnot json\n",
        )
        .unwrap();
        match TraceDataset::load_jsonl(&path, &topo) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn entropy_stays_within_simplex_bounds(raw in proptest::collection::vec(0.01f64..1.0, 2..8)) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let h = entropy_of(&probs).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (probs.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn deeper_topk_never_increases_loss(
            ranked in proptest::collection::vec(0u32..20, 1..10),
            y in 0u32..20,
            k in 1usize..10,
        ) {
            let shallow = LossSpec { k };
            let deep = LossSpec { k: k + 1 };
            prop_assert!(deep.loss(&ranked, y) <= shallow.loss(&ranked, y));
        }
    }
}
