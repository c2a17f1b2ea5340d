//! Multi-seed accuracy evaluation over (source, target) domain pairs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::distance::Metric;
use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::mapping::accuracy;
use crate::pipeline::{run_pipeline, AdaptConfig};

/// Which target samples were scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The whole target domain that was clustered.
    Full,
    /// A separate held-out target set.
    HeldOut,
}

/// One adaptation task. Target labels are used for scoring only.
#[derive(Clone, Copy)]
pub struct DomainPair<'a> {
    pub source: &'a EmbeddingSet,
    pub target: &'a EmbeddingSet,
    pub target_test: Option<&'a EmbeddingSet>,
}

impl<'a> DomainPair<'a> {
    pub fn new(source: &'a EmbeddingSet, target: &'a EmbeddingSet) -> Self {
        Self {
            source,
            target,
            target_test: None,
        }
    }

    pub fn split(&self) -> Split {
        if self.target_test.is_some() {
            Split::HeldOut
        } else {
            Split::Full
        }
    }

    pub fn scored_target(&self) -> &'a EmbeddingSet {
        self.target_test.unwrap_or(self.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: String,
    pub target: String,
    pub metric: Metric,
    pub split: Split,
    pub seeds: Vec<u64>,
    /// Top-1 target accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Student-t 95% half-width; absent with fewer than two seeds.
    pub ci95_halfwidth: Option<f64>,
    /// Nearest-source-prototype accuracy on the source domain per seed.
    pub source_accuracies: Vec<f64>,
    pub source_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pairs: Vec<PairReport>,
    pub config_fingerprint: String,
}

/// Mean and two-sided 95% Student-t half-width of `values`.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    // Offsetting by the first value keeps equal inputs exact.
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    (mean, Some(t * (var / n as f64).sqrt()))
}

/// Accuracies of one pipeline run: (target, source self-accuracy).
pub fn score_run(pair: &DomainPair<'_>, seed: u64, cfg: &AdaptConfig) -> Result<(f64, f64)> {
    let scored = pair.scored_target();
    let truth = scored
        .labels()
        .ok_or_else(|| Error::MissingLabels(scored.domain_name().to_owned()))?;
    let source_truth = pair
        .source
        .labels()
        .ok_or_else(|| Error::MissingLabels(pair.source.domain_name().to_owned()))?;
    let run = run_pipeline(pair.source, pair.target, seed, cfg)?;
    let target_acc = accuracy(&run.predict_target(scored)?, truth)?;
    let source_acc = accuracy(&run.predict_source(pair.source)?, source_truth)?;
    Ok((target_acc, source_acc))
}

pub fn summarize(pair: &DomainPair<'_>, metric: Metric, seeds: &[u64], runs: &[(f64, f64)]) -> PairReport {
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let source_accuracies: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (mean, ci95_halfwidth) = mean_ci95(&accuracies);
    let (source_mean, _) = mean_ci95(&source_accuracies);
    PairReport {
        source: pair.source.domain_name().to_owned(),
        target: pair.target.domain_name().to_owned(),
        metric,
        split: pair.split(),
        seeds: seeds.to_vec(),
        accuracies,
        mean,
        ci95_halfwidth,
        source_accuracies,
        source_mean,
    }
}

/// Runs the pipeline for every pair and seed and aggregates accuracies.
pub fn evaluate(pairs: &[DomainPair<'_>], seeds: &[u64], cfg: &AdaptConfig) -> Result<EvaluationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let runs = seeds
            .iter()
            .map(|&seed| score_run(pair, seed, cfg))
            .collect::<Result<Vec<_>>>()?;
        reports.push(summarize(pair, cfg.metric, seeds, &runs));
    }
    Ok(EvaluationReport {
        pairs: reports,
        config_fingerprint: fingerprint::of_json(&(cfg, seeds))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_has_zero_halfwidth() {
        let (mean, hw) = mean_ci95(&[0.8, 0.8, 0.8]);
        assert!((mean - 0.8).abs() < 1e-15);
        assert_eq!(hw, Some(0.0));
    }

    #[test]
    fn single_seed_has_no_interval() {
        assert_eq!(mean_ci95(&[0.7]), (0.7, None));
    }

    #[test]
    fn student_t_halfwidth() {
        // t_{0.975, 2} = 4.302652729911275; sample sd of {1, 2, 3} is 1.
        let (mean, hw) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(mean, 2.0);
        let expected = 4.302652729911275 / 3f64.sqrt();
        assert!((hw.unwrap() - expected).abs() < 1e-9, "{hw:?}");
    }
}
