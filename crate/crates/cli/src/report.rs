//! Ablation tables and metric lines: human-readable text plus one JSON
//! object per line for machines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use kdslu_core::pipeline::{Method, MethodResult};
use serde::{Deserialize, Serialize};

/// One appended metric observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricLine {
    pub run_id: String,
    pub stage: String,
    pub name: String,
    pub step: u64,
    pub value: f64,
}

pub fn parse_metric_line(line: &str) -> Result<MetricLine> {
    let m: MetricLine = serde_json::from_str(line).context("malformed metric line")?;
    if m.name.is_empty() || m.stage.is_empty() {
        bail!("metric line needs a stage and a name");
    }
    Ok(m)
}

/// Parses a metrics log, skipping a torn final line left by an interrupted
/// writer.
pub fn read_metric_lines(text: &str) -> Result<Vec<MetricLine>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        match parse_metric_line(l) {
            Ok(m) => out.push(m),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(e.context(format!("line {}", i + 1))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Per seed, in `seeds` order; `None` when that seed's run failed.
    pub valid: Vec<Option<f64>>,
    pub test: Vec<Option<f64>>,
    pub valid_mean: Option<f64>,
    pub valid_std: Option<f64>,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
}

/// Mean and population standard deviation of the values present.
pub fn mean_std(xs: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (Some(m), Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One row per method in stack order, whatever the seed count.
    pub fn build(methods: &[Method], seeds: &[u64], results: &[MethodResult]) -> Self {
        let index: BTreeMap<(Method, u64), &MethodResult> = results.iter().map(|r| ((r.method, r.seed), r)).collect();
        let rows = methods
            .iter()
            .map(|&method| {
                let get = |f: fn(&MethodResult) -> f64| -> Vec<Option<f64>> {
                    seeds.iter().map(|s| index.get(&(method, *s)).map(|r| f(r))).collect()
                };
                let valid = get(|r| r.valid_accuracy);
                let test = get(|r| r.test_accuracy);
                let (valid_mean, valid_std) = mean_std(&valid);
                let (test_mean, test_std) = mean_std(&test);
                AblationRow { method, seeds: seeds.to_vec(), valid, test, valid_mean, valid_std, test_mean, test_std }
            })
            .collect();
        Self { rows }
    }

    pub fn to_text(&self) -> String {
        let pct = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * s),
            _ => format!("{:>14}", "missing"),
        };
        let mut out = format!("{:<10} {:>14} {:>14}  seeds\n", "method", "valid acc %", "test acc %");
        for r in &self.rows {
            let present = r.test.iter().filter(|t| t.is_some()).count();
            let _ = writeln!(
                out,
                "{:<10} {} {}  {}/{}",
                r.method.label(),
                pct(r.valid_mean, r.valid_std),
                pct(r.test_mean, r.test_std),
                present,
                r.seeds.len()
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("ablation row on line {}", i + 1)))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Whether mean test accuracy never drops by more than `tie` between
    /// adjacent rows.
    pub fn non_decreasing(&self, tie: f64) -> bool {
        let means: Vec<Option<f64>> = self.rows.iter().map(|r| r.test_mean).collect();
        means.windows(2).all(|w| matches!(w, [Some(a), Some(b)] if *b >= *a - tie))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: Method, seed: u64, acc: f64) -> MethodResult {
        MethodResult { method, seed, valid_accuracy: acc, test_accuracy: acc, best_epoch: 1 }
    }

    #[test]
    fn one_row_per_method_regardless_of_seeds() {
        for seeds in [vec![0], vec![0, 1, 2]] {
            let res: Vec<_> = seeds.iter().flat_map(|&s| Method::STACK.map(|m| result(m, s, 0.5))).collect();
            assert_eq!(AblationTable::build(&Method::STACK, &seeds, &res).rows.len(), 5);
        }
        let t = AblationTable::build(&[Method::Baseline], &[3], &[result(Method::Baseline, 3, 0.9)]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].test_mean, Some(0.9));
    }

    #[test]
    fn failed_seeds_are_missing_not_zero() {
        let res = vec![result(Method::Baseline, 0, 0.8), result(Method::Baseline, 2, 0.6)];
        let t = AblationTable::build(&[Method::Baseline], &[0, 1, 2], &res);
        let r = &t.rows[0];
        assert_eq!(r.test, vec![Some(0.8), None, Some(0.6)]);
        assert!((r.test_mean.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.test_std.unwrap() - 0.1).abs() < 1e-12);
        assert!(t.to_text().contains("2/3"));
    }

    #[test]
    fn jsonl_round_trips() {
        let res: Vec<_> = (0..3).flat_map(|s| Method::STACK.map(|m| result(m, s, 0.1 * s as f64 + 0.01))).collect();
        let t = AblationTable::build(&Method::STACK, &[0, 1, 2, 9], &res);
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(AblationTable::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn monotonicity_with_ties() {
        let mk = |accs: &[f64]| {
            let res: Vec<_> = Method::STACK.iter().zip(accs).map(|(&m, &a)| result(m, 0, a)).collect();
            AblationTable::build(&Method::STACK, &[0], &res)
        };
        assert!(mk(&[0.80, 0.85, 0.847, 0.9, 0.95]).non_decreasing(0.005));
        assert!(!mk(&[0.80, 0.85, 0.84, 0.9, 0.95]).non_decreasing(0.005));
    }

    #[test]
    fn metric_lines_parse_and_tolerate_a_torn_tail() {
        let good = r#"{"run_id":"ab-s0","stage":"ft","name":"valid_accuracy","step":3,"value":0.5}"#;
        assert_eq!(parse_metric_line(good).unwrap().step, 3);
        assert!(parse_metric_line(r#"{"run_id":"x","stage":"ft","name":"a","step":1,"value":1,"extra":2}"#).is_err());
        let log = format!("{good}\n{good}\n{{\"run_id\":\"ab");
        assert_eq!(read_metric_lines(&log).unwrap().len(), 2);
        assert!(read_metric_lines(&format!("{good}\nnot json\n{good}\n")).is_err());
    }
}
