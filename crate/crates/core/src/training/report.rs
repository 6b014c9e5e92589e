use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unweighted loss terms, their weights, and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

impl LossReport {
    /// Builds a report and checks `total` against the weighted sum.
    pub fn new(step: usize, terms: Vec<LossTerm>, total: f64) -> Result<Self> {
        let r = Self { step, terms, total };
        let sum = r.weighted_sum();
        if (sum - total).abs() > 1e-9 * sum.abs().max(1.0) {
            return Err(Error::Shape(format!("loss total {total} != weighted sum {sum}")));
        }
        Ok(r)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// Running per-term sums for averaging over a minibatch.
#[derive(Clone, Debug, Default)]
pub(crate) struct TermAccumulator {
    terms: Vec<LossTerm>,
    total: f64,
    count: usize,
}

impl TermAccumulator {
    pub fn add(&mut self, terms: &[(&str, f64, f64)], total: f64) {
        if self.terms.is_empty() {
            self.terms = terms.iter().map(|&(n, _, w)| LossTerm { name: n.into(), value: 0.0, weight: w }).collect();
        }
        for (acc, &(_, v, _)) in self.terms.iter_mut().zip(terms) {
            acc.value += v;
        }
        self.total += total;
        self.count += 1;
    }

    pub fn finish(mut self, step: usize) -> Result<LossReport> {
        let n = self.count.max(1) as f64;
        self.terms.iter_mut().for_each(|t| t.value /= n);
        LossReport::new(step, self.terms, self.total / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_must_match_weighted_terms() {
        let terms = vec![
            LossTerm { name: "a".into(), value: 2.0, weight: 0.5 },
            LossTerm { name: "b".into(), value: 3.0, weight: 2.0 },
        ];
        assert!(LossReport::new(0, terms.clone(), 7.0).is_ok());
        assert!(LossReport::new(0, terms, 7.1).is_err());
    }
}
