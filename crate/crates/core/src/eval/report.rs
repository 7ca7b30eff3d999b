//! Evaluation report: condition × system × metric.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::format_percent;
use crate::corpus::write_file;
use crate::error::{Error, Result};

/// Hits@1 and Hits@10 (percent) over a set of queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub queries: usize,
    pub hits_at_1: f64,
    pub hits_at_10: f64,
}

/// A test condition: the clean test set or one calibrated noisy copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub name: String,
    pub target_wer: f64,
    /// Measured corpus-level WER of the condition (fraction).
    pub wer: f64,
    /// Utterance-level entity error rate (fraction).
    pub eer_utterance_level: f64,
    pub queries: usize,
    pub entity_noise_queries: usize,
    pub non_entity_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    pub label: String,
    pub condition: String,
    pub all: Scores,
    /// Queries whose noise altered an entity span.
    pub entity_noise: Scores,
    pub non_entity: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub conditions: Vec<ConditionSummary>,
    pub results: Vec<SystemResult>,
}

impl EvalReport {
    pub fn result(&self, system: &str, condition: &str) -> Option<&SystemResult> {
        self.results
            .iter()
            .find(|r| r.system == system && r.condition == condition)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Element-wise mean of reports that share systems and conditions.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
        let same_shape = reports.iter().all(|r| {
            r.results.len() == first.results.len()
                && r.conditions.len() == first.conditions.len()
                && r.results
                    .iter()
                    .zip(&first.results)
                    .all(|(a, b)| a.system == b.system && a.condition == b.condition)
                && r.conditions.iter().zip(&first.conditions).all(|(a, b)| a.name == b.name)
        });
        if !same_shape {
            return Err(Error::InvalidArgument("reports cover different systems or conditions".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_n = |f: &dyn Fn(&EvalReport) -> usize| (reports.iter().map(f).sum::<usize>() as f64 / n).round() as usize;
        let scores = |get: &dyn Fn(&EvalReport) -> Scores| Scores {
            queries: avg_n(&|r| get(r).queries),
            hits_at_1: avg(&|r| get(r).hits_at_1),
            hits_at_10: avg(&|r| get(r).hits_at_10),
        };
        let conditions = (0..first.conditions.len())
            .map(|i| ConditionSummary {
                name: first.conditions[i].name.clone(),
                target_wer: first.conditions[i].target_wer,
                wer: avg(&|r| r.conditions[i].wer),
                eer_utterance_level: avg(&|r| r.conditions[i].eer_utterance_level),
                queries: avg_n(&|r| r.conditions[i].queries),
                entity_noise_queries: avg_n(&|r| r.conditions[i].entity_noise_queries),
                non_entity_queries: avg_n(&|r| r.conditions[i].non_entity_queries),
            })
            .collect();
        let results = (0..first.results.len())
            .map(|i| SystemResult {
                system: first.results[i].system.clone(),
                label: first.results[i].label.clone(),
                condition: first.results[i].condition.clone(),
                all: scores(&|r| r.results[i].all),
                entity_noise: scores(&|r| r.results[i].entity_noise),
                non_entity: scores(&|r| r.results[i].non_entity),
            })
            .collect();
        Ok(EvalReport {
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            config_hash: first.config_hash.clone(),
            conditions,
            results,
        })
    }

    /// Plain-text tables: conditions, then Hits@1 / Hits@10 per system and
    /// condition, then the entity/non-entity split of the noisy conditions.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds: {}  config: {}", seeds.join(","), self.config_hash);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>22} {:>8}", "condition", "target", "WER", "EER (utterance-level)", "queries");
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>22} {:>8}",
                c.name,
                format_percent(100.0 * c.target_wer),
                format_percent(100.0 * c.wer),
                format_percent(100.0 * c.eer_utterance_level),
                c.queries
            );
        }
        let _ = writeln!(out);
        let mut header = format!("{:<16}", "system");
        for c in &self.conditions {
            header.push_str(&format!(" {:>17}", format!("{} H@1/H@10", c.name)));
        }
        let _ = writeln!(out, "{header}");
        let mut systems: Vec<(&str, &str)> = Vec::new();
        for r in &self.results {
            if !systems.iter().any(|s| s.0 == r.system) {
                systems.push((&r.system, &r.label));
            }
        }
        for (system, label) in &systems {
            let mut line = format!("{label:<16}");
            for c in &self.conditions {
                match self.result(system, &c.name) {
                    Some(r) => line.push_str(&format!(
                        " {:>17}",
                        format!("{} / {}", format_percent(r.all.hits_at_1), format_percent(r.all.hits_at_10))
                    )),
                    None => line.push_str(&format!(" {:>17}", "-")),
                }
            }
            let _ = writeln!(out, "{line}");
        }
        for c in self.conditions.iter().filter(|c| c.target_wer > 0.0) {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{}: entity noise ({} queries) / non-entity ({} queries), H@1 and H@10",
                c.name, c.entity_noise_queries, c.non_entity_queries
            );
            for (system, label) in &systems {
                if let Some(r) = self.result(system, &c.name) {
                    let _ = writeln!(
                        out,
                        "{label:<16} {:>7} {:>7}   {:>7} {:>7}",
                        format_percent(r.entity_noise.hits_at_1),
                        format_percent(r.entity_noise.hits_at_10),
                        format_percent(r.non_entity.hits_at_1),
                        format_percent(r.non_entity.hits_at_10)
                    );
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, h1: f64) -> EvalReport {
        let s = Scores {
            queries: 3,
            hits_at_1: h1,
            hits_at_10: 100.0 / 3.0,
        };
        EvalReport {
            seeds: vec![seed],
            config_hash: "abc".into(),
            conditions: vec![ConditionSummary {
                name: "wer-0.15".into(),
                target_wer: 0.15,
                wer: 0.1512345678901234,
                eer_utterance_level: 0.3,
                queries: 3,
                entity_noise_queries: 1,
                non_entity_queries: 2,
            }],
            results: vec![SystemResult {
                system: "full".into(),
                label: "Full".into(),
                condition: "wer-0.15".into(),
                all: s,
                entity_noise: s,
                non_entity: s,
            }],
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = report(1, 52.7272727272727);
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
    }

    #[test]
    fn mean_averages_and_collects_seeds() {
        let m = EvalReport::mean(&[report(1, 50.0), report(2, 60.0)]).unwrap();
        assert_eq!(m.seeds, vec![1, 2]);
        assert_eq!(m.result("full", "wer-0.15").unwrap().all.hits_at_1, 55.0);
    }

    #[test]
    fn table_labels_eer_and_uses_two_decimals() {
        let t = report(1, 52.7272).to_table();
        assert!(t.contains("EER (utterance-level)"));
        assert!(t.contains("52.73 / 33.33"));
    }
}
