//! Synthetic trace generator. Draws, per example, the subset of stages that
//! predict correctly from a configured agreement table, then emits ranked
//! lists and meta-features whose distribution depends on that correctness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::Topology;
use crate::trace::{example_from_records, StageRecord, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Each stage forwards only to the next one.
    Chain,
    /// Each stage may forward to any later stage.
    CompleteDag,
}

/// One row of the agreement table: with probability `p`, exactly the listed
/// stages rank the true label inside their list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementEntry {
    pub stages: Vec<String>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Stage names in evaluation-cost order, cheapest first.
    pub stages: Vec<String>,
    pub costs: Vec<f64>,
    pub topology: TopologyKind,
    /// Number of examples to draw.
    pub n: usize,
    /// Label alphabet size.
    pub classes: u32,
    /// Length of each stage's ranked label list.
    pub list_len: usize,
    pub agreement: Vec<AgreementEntry>,
    /// Mean shift of the meta-features between correct and incorrect
    /// stage predictions, in units of the features' scale.
    pub separation: f64,
    /// Standard deviation of the meta-feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Three-stage instance with a cheap, a mid, and an expensive stage,
    /// mostly-agreeing predictions, and well-separated meta-features.
    pub fn reference() -> Self {
        SynthConfig {
            stages: vec!["a".into(), "g".into(), "r".into()],
            costs: vec![0.25, 0.70, 2.86],
            topology: TopologyKind::CompleteDag,
            n: 10_000,
            classes: 100,
            list_len: 5,
            agreement: vec![
                AgreementEntry {
                    stages: vec!["a".into(), "g".into(), "r".into()],
                    p: 0.77,
                },
                AgreementEntry {
                    stages: vec!["g".into(), "r".into()],
                    p: 0.10,
                },
                AgreementEntry {
                    stages: vec!["r".into()],
                    p: 0.08,
                },
                AgreementEntry {
                    stages: vec![],
                    p: 0.05,
                },
            ],
            separation: 1.0,
            noise: 0.25,
            seed: 17,
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        match self.topology {
            TopologyKind::Chain => Topology::chain(self.stages.clone(), self.costs.clone()),
            TopologyKind::CompleteDag => {
                Topology::complete_dag(self.stages.clone(), self.costs.clone())
            }
        }
    }

    fn validate(&self, topo: &Topology) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig(
                "need at least two examples to split".into(),
            ));
        }
        if self.list_len == 0 {
            return Err(Error::InvalidConfig("ranked lists cannot be empty".into()));
        }
        if (self.classes as usize) <= self.list_len {
            return Err(Error::InvalidConfig(format!(
                "need more than {} classes to fill ranked lists of that length",
                self.list_len
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad noise {}", self.noise)));
        }
        if !self.separation.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "bad separation {}",
                self.separation
            )));
        }
        let mut total = 0.0;
        for entry in &self.agreement {
            if !(entry.p.is_finite() && entry.p >= 0.0) {
                return Err(Error::InvalidProbabilityTable(format!(
                    "probability {} out of range",
                    entry.p
                )));
            }
            total += entry.p;
            let mut seen = std::collections::BTreeSet::new();
            for name in &entry.stages {
                topo.id(name)?;
                if !seen.insert(name) {
                    return Err(Error::InvalidProbabilityTable(format!(
                        "stage `{name}` listed twice in one subset"
                    )));
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbabilityTable(format!(
                "subset probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::InvalidConfig(format!("bad synth config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthConfig::from_json(&json)
    }
}

/// Draw the configured number of examples. One sequential RNG drives every
/// draw, so equal configs produce byte-identical traces.
pub fn generate(config: &SynthConfig) -> Result<(Topology, TraceDataset)> {
    let topo = config.topology()?;
    config.validate(&topo)?;
    let masks: Vec<Vec<bool>> = config
        .agreement
        .iter()
        .map(|entry| {
            let mut mask = vec![false; topo.len()];
            for name in &entry.stages {
                mask[topo.id(name).expect("validated").0] = true;
            }
            mask
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Feature 0 mimics a prediction entropy (low when confident and right),
    // feature 1 a max-probability logit (high when right).
    let entropy_right = Normal::new(0.5, config.noise).expect("valid normal");
    let entropy_wrong = Normal::new(0.5 + config.separation, config.noise).expect("valid normal");
    let conf_right = Normal::new(2.0, config.noise).expect("valid normal");
    let conf_wrong = Normal::new(2.0 - config.separation, config.noise).expect("valid normal");

    let mut examples = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let roll: f64 = rng.gen();
        let mut acc = 0.0;
        let mut subset = masks.len() - 1;
        for (j, entry) in config.agreement.iter().enumerate() {
            acc += entry.p;
            if roll < acc {
                subset = j;
                break;
            }
        }
        let mask = &masks[subset];
        let y = rng.gen_range(0..config.classes);
        let mut records = Vec::with_capacity(topo.len());
        for s in topo.stage_ids() {
            let correct = mask[s.0];
            let topk = ranked_list(&mut rng, config, y, correct);
            let h = entropy_right_or_wrong(&mut rng, correct, &entropy_right, &entropy_wrong);
            let conf = if correct {
                conf_right.sample(&mut rng)
            } else {
                conf_wrong.sample(&mut rng)
            };
            records.push(StageRecord {
                topk,
                mf: vec![h, conf],
                entropy: h,
            });
        }
        examples.push(example_from_records(format!("e{i}"), y, records));
    }
    let dataset = TraceDataset::new(&topo, examples)?;
    Ok((topo, dataset))
}

fn entropy_right_or_wrong(
    rng: &mut ChaCha8Rng,
    correct: bool,
    right: &Normal<f64>,
    wrong: &Normal<f64>,
) -> f64 {
    let raw = if correct {
        right.sample(rng)
    } else {
        wrong.sample(rng)
    };
    raw.max(0.0)
}

/// Ranked list of `list_len` distinct labels; contains `y` at a uniform
/// position when `correct`, excludes it entirely otherwise.
fn ranked_list(rng: &mut ChaCha8Rng, config: &SynthConfig, y: u32, correct: bool) -> Vec<u32> {
    let len = config.list_len;
    let mut list: Vec<u32> = Vec::with_capacity(len);
    let y_pos = if correct { rng.gen_range(0..len) } else { len };
    for pos in 0..len {
        if pos == y_pos {
            list.push(y);
            continue;
        }
        loop {
            let label = rng.gen_range(0..config.classes);
            if label != y && !list.contains(&label) {
                list.push(label);
                break;
            }
        }
    }
    list
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::LossSpec;

    #[test]
    fn reference_config_round_trips_through_json() {
        let cfg = SynthConfig::reference();
        let back = SynthConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = SynthConfig::reference();
        cfg.n = 50;
        let (_, a) = generate(&cfg).unwrap();
        let (_, b) = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_accuracies_match_the_table() {
        let cfg = SynthConfig::reference();
        let (topo, ds) = generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        // Marginals implied by the table: a 0.77, g 0.87, r 0.95.
        let expect = [0.77, 0.87, 0.95];
        for (s, &e) in topo.stage_ids().zip(expect.iter()) {
            let acc = ds.stage_accuracy(s, &loss);
            assert!(
                (acc - e).abs() < 0.02,
                "stage {} accuracy {acc} far from {e}",
                topo.name(s)
            );
        }
    }

    #[test]
    fn correct_lists_contain_label_and_wrong_lists_do_not() {
        let mut cfg = SynthConfig::reference();
        cfg.n = 500;
        cfg.agreement = vec![
            AgreementEntry {
                stages: vec!["a".into(), "g".into(), "r".into()],
                p: 0.5,
            },
            AgreementEntry {
                stages: vec![],
                p: 0.5,
            },
        ];
        let (topo, ds) = generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        for ex in ds.examples() {
            let losses: Vec<f64> = topo
                .stage_ids()
                .map(|s| loss.loss(&ex.record(s).topk, ex.y))
                .collect();
            // All stages agree per construction of the two-row table.
            assert!(losses.iter().all(|&l| l == losses[0]));
        }
    }

    #[test]
    fn ranked_lists_have_distinct_entries() {
        let mut cfg = SynthConfig::reference();
        cfg.n = 200;
        cfg.classes = 7;
        cfg.list_len = 5;
        let (topo, ds) = generate(&cfg).unwrap();
        for ex in ds.examples() {
            for s in topo.stage_ids() {
                let mut seen = std::collections::BTreeSet::new();
                for &l in &ex.record(s).topk {
                    assert!(seen.insert(l), "duplicate label in ranked list");
                }
            }
        }
    }

    #[test]
    fn probability_table_must_sum_to_one() {
        let mut cfg = SynthConfig::reference();
        cfg.agreement[0].p = 0.5;
        assert!(matches!(
            generate(&cfg),
            Err(Error::InvalidProbabilityTable(_))
        ));
    }

    #[test]
    fn unknown_stage_in_table_is_rejected() {
        let mut cfg = SynthConfig::reference();
        cfg.agreement[0].stages.push("zz".into());
        assert!(matches!(generate(&cfg), Err(Error::UnknownStageId(_))));
    }

    #[test]
    fn features_separate_by_correctness() {
        let cfg = SynthConfig::reference();
        let (topo, ds) = generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        let root = topo.root();
        let (mut h_right, mut n_right, mut h_wrong, mut n_wrong) = (0.0, 0usize, 0.0, 0usize);
        for ex in ds.examples() {
            let rec = ex.record(root);
            if loss.loss(&rec.topk, ex.y) == 0.0 {
                h_right += rec.mf[0];
                n_right += 1;
            } else {
                h_wrong += rec.mf[0];
                n_wrong += 1;
            }
        }
        let gap = h_wrong / n_wrong as f64 - h_right / n_right as f64;
        assert!(
            (gap - cfg.separation).abs() < 0.1,
            "entropy gap {gap} far from configured separation"
        );
    }
}
