//! Steps shared by the command line and end-to-end checks: preparing
//! splits, scoring a model on a dataset, and choosing input columns and
//! interaction features from a screening model.

use serde::{Deserialize, Serialize};

use crate::dataset::{prepare, Dataset, NormalizationStats, RiskState};
use crate::error::{Error, Result};
use crate::explain::{
    features_from_pairs, importance, interaction_screen, ExplainOptions, FeatureImportance, ImportanceTarget,
    ScreenOptions, ScreenedPair,
};
use crate::metrics::{binary_report, BinaryReport, ClassificationReport};
use crate::models::{Model, Outputs};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fits normalization on `raw` and returns it together with the prepared
/// copy.
pub fn fit_prepare(raw: &Dataset) -> Result<(NormalizationStats, Dataset)> {
    let stats = NormalizationStats::fit(raw)?;
    let data = prepare(raw, &stats)?;
    Ok((stats, data))
}

/// The model's input columns for every row of a prepared dataset.
pub fn model_inputs(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    Ok(model.select_inputs(&data.matrix()?, data.schema.len()))
}

pub fn model_baseline(model: &Model, stats: &NormalizationStats, data: &Dataset) -> Vec<f64> {
    let full = stats.baseline(&data.schema);
    model.spec().features.iter().map(|&j| full[j]).collect()
}

pub fn model_feature_names(model: &Model, data: &Dataset) -> Vec<String> {
    model
        .spec()
        .features
        .iter()
        .map(|&j| data.schema.get(j).abbrev.clone())
        .collect()
}

pub fn predict(model: &Model, data: &Dataset) -> Result<Outputs> {
    if data.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    model.eval(&model_inputs(model, data)?)
}

pub fn state_labels() -> Vec<&'static str> {
    RiskState::ALL.iter().map(|s| s.name()).collect()
}

pub fn classification_report(model: &Model, data: &Dataset) -> Result<ClassificationReport> {
    let out = predict(model, data)?;
    let pred: Vec<usize> = (0..out.rows).map(|r| out.predicted_class(r)).collect();
    ClassificationReport::new(&data.labels(), &pred, &state_labels())
}

/// Report for the stroke head, or `None` for single-objective models.
pub fn stroke_report(model: &Model, data: &Dataset, threshold: f64) -> Result<Option<BinaryReport>> {
    let out = predict(model, data)?;
    let Some(_) = out.stroke_logits else {
        return Ok(None);
    };
    let probs: Vec<f64> = (0..out.rows).map(|r| out.stroke_prob(r).expect("stroke head")).collect();
    let labels: Vec<u8> = data.samples.iter().map(|s| s.stroke()).collect();
    binary_report(&probs, &labels, threshold).map(Some)
}

/// Input columns and interaction features picked from a screening model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePlan {
    /// Schema columns, ascending.
    pub features: Vec<usize>,
    /// Positions within `features` admitted to the interaction layer.
    pub selected: Vec<usize>,
    /// Ranked pairs among `features`, in schema indices.
    pub pairs: Vec<ScreenedPair>,
    /// Present when the columns were cut down by importance.
    pub importance: Option<Vec<FeatureImportance>>,
}

impl FeaturePlan {
    /// Pairs that produced the selection, in rank order.
    pub fn used_pairs(&self) -> Vec<ScreenedPair> {
        let chosen: Vec<usize> = self.selected.iter().map(|&p| self.features[p]).collect();
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for pair in &self.pairs {
            if seen.len() >= chosen.len() {
                break;
            }
            let mut added = false;
            for f in [pair.first, pair.second] {
                if chosen.contains(&f) && !seen.contains(&f) {
                    seen.push(f);
                    added = true;
                }
            }
            if added {
                out.push(pair.clone());
            }
        }
        out
    }
}

fn screening_inputs(screen_model: &Model, stats: &NormalizationStats, data: &Dataset) -> Result<(Vec<String>, Vec<f64>, Vec<f64>)> {
    let d = data.schema.len();
    if screen_model.spec().features != (0..d).collect::<Vec<_>>() {
        return Err(Error::Compat("screening model must take every schema column in order".into()));
    }
    Ok((
        model_feature_names(screen_model, data),
        model_baseline(screen_model, stats, data),
        model_inputs(screen_model, data)?,
    ))
}

/// Schema columns ranked by mean |Shapley value| of a screening model over
/// every column, summed across the risk-state logits.
pub fn rank_features(
    screen_model: &Model,
    stats: &NormalizationStats,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<FeatureImportance>> {
    let (names, baseline, inputs) = screening_inputs(screen_model, stats, data)?;
    let options = ExplainOptions {
        seed,
        ..ExplainOptions::default()
    };
    importance(screen_model, &baseline, &inputs, &names, ImportanceTarget::AllClasses, &options)
}

/// Every screened pair with both members among `within`, best first.
pub fn screen_pairs(
    screen_model: &Model,
    stats: &NormalizationStats,
    data: &Dataset,
    within: &[usize],
    seed: u64,
) -> Result<Vec<ScreenedPair>> {
    let (names, baseline, inputs) = screening_inputs(screen_model, stats, data)?;
    let mut options = ScreenOptions::default();
    options.explain.seed = seed;
    let p = names.len().min(options.max_players);
    options.top_m = p * p.saturating_sub(1) / 2;
    Ok(interaction_screen(screen_model, &baseline, &inputs, &names, &options)?
        .into_iter()
        .filter(|pair| within.contains(&pair.first) && within.contains(&pair.second))
        .collect())
}

/// Picks the model columns (all, or the `top_k` most important) and
/// `qi_features` interaction features from the pairs ranked on a screening
/// model over every schema column.
pub fn plan_features(
    screen_model: &Model,
    stats: &NormalizationStats,
    data: &Dataset,
    top_k: Option<usize>,
    qi_features: usize,
    seed: u64,
) -> Result<FeaturePlan> {
    let d = data.schema.len();
    if let Some(k) = top_k {
        if k < 2 || k > d {
            return Err(Error::Argument(format!("top-k features must lie in 2..={d}, got {k}")));
        }
    }
    if qi_features < 2 {
        return Err(Error::Argument(format!(
            "at least 2 interaction features are needed, got {qi_features}"
        )));
    }
    let (features, ranked) = match top_k {
        Some(k) => {
            let ranked = rank_features(screen_model, stats, data, seed)?;
            let mut top: Vec<usize> = ranked.iter().take(k).map(|f| f.index).collect();
            top.sort_unstable();
            (top, Some(ranked))
        }
        None => ((0..d).collect(), None),
    };
    let pairs = screen_pairs(screen_model, stats, data, &features, seed)?;
    let selected = select_from_pairs(&pairs, &features, qi_features)?;
    Ok(FeaturePlan {
        features,
        selected,
        pairs,
        importance: ranked,
    })
}

/// Positions within `features` of the first `n` distinct pair members.
pub fn select_from_pairs(pairs: &[ScreenedPair], features: &[usize], n: usize) -> Result<Vec<usize>> {
    let chosen = features_from_pairs(pairs, n);
    if chosen.len() < n {
        return Err(Error::Argument(format!(
            "screened pairs cover only {} of the requested {n} interaction features",
            chosen.len()
        )));
    }
    chosen
        .iter()
        .map(|f| {
            features
                .iter()
                .position(|x| x == f)
                .ok_or_else(|| Error::Argument(format!("interaction feature {f} is not a model input")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, synth, SynthConfig};
    use crate::models::{Init, ModelSpec};

    #[test]
    fn plan_respects_top_k_and_feature_count() {
        let ds = synth(&SynthConfig {
            n: 300,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, _) = split(&ds, 0.2, 1).unwrap();
        let (stats, data) = fit_prepare(&train).unwrap();
        let model = Model::new(
            ModelSpec::base_dnn((0..34).collect()),
            Init::Uniform { seed: 3, scale: 0.3 },
        )
        .unwrap();
        let plan = plan_features(&model, &stats, &data, Some(20), 3, 0).unwrap();
        assert_eq!(plan.features.len(), 20);
        assert!(plan.features.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(plan.selected.len(), 3);
        assert!(plan.selected.iter().all(|&p| p < 20));
        assert!(!plan.used_pairs().is_empty());
        for pair in &plan.pairs {
            assert!(plan.features.contains(&pair.first) && plan.features.contains(&pair.second));
        }

        let all = plan_features(&model, &stats, &data, None, 7, 0).unwrap();
        assert_eq!(all.features.len(), 34);
        assert_eq!(all.selected.len(), 7);
        assert!(all.importance.is_none());

        assert!(plan_features(&model, &stats, &data, Some(1), 3, 0).is_err());
        assert!(plan_features(&model, &stats, &data, None, 1, 0).is_err());
    }
}
