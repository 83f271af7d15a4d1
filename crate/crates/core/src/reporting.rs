//! Evaluation tables: per-model likelihoods, factor contributions, percent
//! of the possible gain explained, and classical metrics on the
//! baseline-to-gold scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::Stage;
use crate::density::percent_explained;
use crate::error::{Error, Result};
use crate::metrics::{metric_correlations, rescale_metric, MetricCorrelation};

/// Serialized results of one model's fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub model_id: String,
    /// Achieved bits/fixation per fitted stage, in stage order.
    pub stage_lls: Vec<(Stage, f64)>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAnchor {
    pub baseline: f64,
    pub gold: f64,
}

/// Everything [`build_report`] consumes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportInputs {
    pub baseline_ll: Option<f64>,
    pub gold_ll: Option<f64>,
    #[serde(default)]
    pub metric_anchors: BTreeMap<String, MetricAnchor>,
    pub models: Vec<ModelInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAnchors {
    pub baseline_ll: f64,
    pub gold_ll: f64,
    pub possible_gain: f64,
}

/// Likelihood added by each factor; sums to the final stage LL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorContributions {
    pub nonlinearity: f64,
    pub center_bias: Option<f64>,
    pub blur: Option<f64>,
}

impl FactorContributions {
    pub fn total(&self) -> f64 {
        self.nonlinearity + self.center_bias.unwrap_or(0.0) + self.blur.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric_id: String,
    pub raw: f64,
    /// `None` when the metric does not separate baseline from gold.
    pub rescaled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_id: String,
    pub stage_lls: Vec<(Stage, f64)>,
    pub contributions: FactorContributions,
    pub final_ll: f64,
    /// Share of the possible gain (gold − baseline), in percent.
    pub percent_explained: f64,
    /// Share of the gold standard's total information, in percent.
    pub percent_of_gold: f64,
    pub metrics: Vec<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub anchors: DatasetAnchors,
    pub metric_anchors: BTreeMap<String, MetricAnchor>,
    /// Sorted by final LL descending, ties by model id.
    pub models: Vec<ModelReport>,
    /// Rescaled metrics against explained gain; empty below three models.
    pub correlations: Vec<MetricCorrelation>,
}

fn contributions(stage_lls: &[(Stage, f64)]) -> FactorContributions {
    let ll = |s: Stage| stage_lls.iter().find(|(t, _)| *t == s).map(|(_, v)| *v);
    let nonlin = ll(Stage::Nonlin).unwrap_or(stage_lls[0].1);
    let cb = ll(Stage::CenterBias);
    let blur = ll(Stage::Blur);
    FactorContributions {
        nonlinearity: nonlin,
        center_bias: cb.map(|c| c - nonlin),
        blur: blur.map(|b| b - cb.unwrap_or(nonlin)),
    }
}

pub fn build_report(inputs: &ReportInputs) -> Result<EvaluationReport> {
    let baseline_ll = inputs
        .baseline_ll
        .ok_or_else(|| Error::MissingArtifact("baseline log-likelihood".into()))?;
    let gold_ll = inputs
        .gold_ll
        .ok_or_else(|| Error::MissingArtifact("gold standard log-likelihood".into()))?;

    let mut models = Vec::with_capacity(inputs.models.len());
    for m in &inputs.models {
        if m.stage_lls.is_empty() {
            return Err(Error::MissingArtifact(format!("calibration for model {}", m.model_id)));
        }
        let contributions = contributions(&m.stage_lls);
        let final_ll = m.stage_lls.last().expect("non-empty").1;
        let mut metrics = Vec::with_capacity(m.metrics.len());
        for (id, &raw) in &m.metrics {
            let anchor = inputs
                .metric_anchors
                .get(id)
                .ok_or_else(|| Error::MissingArtifact(format!("anchors for metric {id}")))?;
            metrics.push(MetricValue {
                metric_id: id.clone(),
                raw,
                rescaled: rescale_metric(raw, anchor.baseline, anchor.gold).ok(),
            });
        }
        models.push(ModelReport {
            model_id: m.model_id.clone(),
            stage_lls: m.stage_lls.clone(),
            contributions,
            final_ll,
            percent_explained: percent_explained(final_ll, baseline_ll, gold_ll)?,
            percent_of_gold: 100.0 * final_ll / gold_ll,
            metrics,
        });
    }
    models.sort_by(|a, b| {
        b.final_ll
            .partial_cmp(&a.final_ll)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });

    let correlations = if models.len() >= 3 {
        let explained: Vec<f64> = models.iter().map(|m| m.percent_explained / 100.0).collect();
        let mut rescaled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for id in inputs.metric_anchors.keys() {
            let values: Option<Vec<f64>> = models
                .iter()
                .map(|m| m.metrics.iter().find(|v| &v.metric_id == id).and_then(|v| v.rescaled))
                .collect();
            if let Some(v) = values {
                rescaled.insert(id.clone(), v);
            }
        }
        metric_correlations(&explained, &rescaled)?
    } else {
        Vec::new()
    };

    Ok(EvaluationReport {
        anchors: DatasetAnchors {
            baseline_ll,
            gold_ll,
            possible_gain: gold_ll - baseline_ll,
        },
        metric_anchors: inputs.metric_anchors.clone(),
        models,
        correlations,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl EvaluationReport {
    /// Column names of [`Self::csv_rows`]; one column pair per metric.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "model_id",
            "ll_nonlin",
            "ll_center_bias",
            "ll_blur",
            "contribution_nonlin",
            "contribution_center_bias",
            "contribution_blur",
            "final_ll",
            "percent_explained",
            "percent_of_gold",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for id in self.metric_anchors.keys() {
            h.push(format!("{id}_raw"));
            h.push(format!("{id}_rescaled"));
        }
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.models
            .iter()
            .map(|m| {
                let ll = |s: Stage| m.stage_lls.iter().find(|(t, _)| *t == s).map(|(_, v)| *v);
                let mut row = vec![
                    m.model_id.clone(),
                    opt(ll(Stage::Nonlin)),
                    opt(ll(Stage::CenterBias)),
                    opt(ll(Stage::Blur)),
                    m.contributions.nonlinearity.to_string(),
                    opt(m.contributions.center_bias),
                    opt(m.contributions.blur),
                    m.final_ll.to_string(),
                    m.percent_explained.to_string(),
                    m.percent_of_gold.to_string(),
                ];
                for id in self.metric_anchors.keys() {
                    let v = m.metrics.iter().find(|v| &v.metric_id == id);
                    row.push(opt(v.map(|v| v.raw)));
                    row.push(opt(v.and_then(|v| v.rescaled)));
                }
                row
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(id: &str, lls: [f64; 3]) -> ModelInput {
        ModelInput {
            model_id: id.into(),
            stage_lls: Stage::ALL.into_iter().zip(lls).collect(),
            metrics: BTreeMap::new(),
        }
    }

    #[test]
    fn baseline_model_explains_nothing() {
        let inputs = ReportInputs {
            baseline_ll: Some(0.9),
            gold_ll: Some(2.1),
            models: vec![model("base", [0.9, 0.9, 0.9])],
            ..Default::default()
        };
        let r = build_report(&inputs).unwrap();
        let m = &r.models[0];
        assert_eq!(m.percent_explained, 0.0);
        assert_eq!(m.contributions, FactorContributions { nonlinearity: 0.9, center_bias: Some(0.0), blur: Some(0.0) });
        assert!((r.anchors.possible_gain - 1.2).abs() < 1e-15);
    }

    #[test]
    fn two_model_arithmetic() {
        let mut a = model("a", [0.5, 1.0, 1.1]);
        a.metrics.insert("auc".into(), 0.8);
        let mut b = model("b", [0.7, 1.2, 1.3]);
        b.metrics.insert("auc".into(), 0.85);
        let inputs = ReportInputs {
            baseline_ll: Some(0.9),
            gold_ll: Some(2.1),
            metric_anchors: [("auc".to_string(), MetricAnchor { baseline: 0.8, gold: 0.9 })].into(),
            models: vec![a, b],
        };
        let r = build_report(&inputs).unwrap();
        assert_eq!(r.models[0].model_id, "b");
        let b = &r.models[0];
        assert!((b.contributions.total() - 1.3).abs() < 1e-9);
        assert!((b.percent_explained - 100.0 * 0.4 / 1.2).abs() < 1e-9);
        assert!((b.percent_of_gold - 100.0 * 1.3 / 2.1).abs() < 1e-9);
        assert!((b.metrics[0].rescaled.unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(r.models[1].metrics[0].rescaled, Some(0.0));
        assert!(r.correlations.is_empty());
        assert_eq!(r.csv_rows()[0].len(), r.csv_header().len());
    }

    #[test]
    fn ties_sort_by_id_and_missing_artifacts_error() {
        let inputs = ReportInputs {
            baseline_ll: Some(0.0),
            gold_ll: Some(1.0),
            models: vec![model("z", [0.5; 3]), model("a", [0.5; 3])],
            ..Default::default()
        };
        let r = build_report(&inputs).unwrap();
        assert_eq!(r.models.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>(), ["a", "z"]);

        let mut missing = inputs.clone();
        missing.gold_ll = None;
        assert!(matches!(build_report(&missing), Err(Error::MissingArtifact(_))));
        let mut no_anchor = inputs;
        no_anchor.models[0].metrics.insert("kl".into(), 1.0);
        assert!(matches!(build_report(&no_anchor), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn regeneration_from_serialized_inputs_is_idempotent() {
        let inputs = ReportInputs {
            baseline_ll: Some(0.2),
            gold_ll: Some(1.7),
            models: vec![model("a", [0.3, 0.8, 0.9]), model("b", [0.1, 0.4, 0.6]), model("c", [1.0, 1.2, 1.25])],
            ..Default::default()
        };
        let json = serde_json::to_string(&inputs).unwrap();
        let back: ReportInputs = serde_json::from_str(&json).unwrap();
        assert_eq!(build_report(&inputs).unwrap(), build_report(&back).unwrap());
    }
}
