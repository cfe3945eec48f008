//! Losses, Adam, and the early-stopped mini-batch training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logit, log_sum_exp, ParamStore, Tape, Tensor, Var};
use crate::dataset::{split, Dataset, RiskState};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::models::{Init, Model, ModelSpec, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Non-improving epochs tolerated before stopping; 0 stops at the first.
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weights of the stroke and risk objectives in the mixture loss.
    pub objective_weights: [f64; 2],
    pub zero_init_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 200,
            batch_size: 64,
            patience: 10,
            seed: 0,
            validation_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            objective_weights: [1.0, 1.0],
            zero_init_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0 && self.epsilon > 0.0;
        if !positive || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, epsilon, max epochs and batch size must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.objective_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("objective weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation of the initial parameters.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_stroke_loss: Option<f64>,
    pub train_risk_loss: Option<f64>,
    pub val_stroke_loss: Option<f64>,
    pub val_risk_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub stopped_at_epoch: usize,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

impl TrainTrace {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epoch",
            "train_loss",
            "val_loss",
            "train_stroke_loss",
            "train_risk_loss",
            "val_stroke_loss",
            "val_risk_loss",
            "val_auc",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                opt(r.train_stroke_loss),
                opt(r.train_risk_loss),
                opt(r.val_stroke_loss),
                opt(r.val_risk_loss),
                opt(r.val_auc),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace writer>", e))?;
        Ok(())
    }
}

/// `-ln softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Binary cross-entropy of a pre-sigmoid logit.
pub fn binary_cross_entropy(logit: f64, y: f64) -> f64 {
    bce_with_logit(logit, y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmoeLoss {
    pub total: f64,
    pub stroke: f64,
    pub risk: f64,
}

fn check_label_consistency(stroke: &[f64], risk: &[usize]) -> Result<()> {
    for (i, (&y, &z)) in stroke.iter().zip(risk).enumerate() {
        if (y == 1.0) != (z == RiskState::Attack.index()) || !(y == 0.0 || y == 1.0) {
            return Err(Error::Data(format!(
                "row {i}: stroke label {y} inconsistent with risk state {z}"
            )));
        }
    }
    Ok(())
}

/// Batch-mean stroke BCE plus batch-mean risk CE, weighted per objective.
pub fn mmoe_loss(
    stroke_logits: &[f64],
    risk_logits: &[f64],
    stroke: &[f64],
    risk: &[usize],
    weights: [f64; 2],
) -> Result<MmoeLoss> {
    let m = stroke.len();
    if stroke_logits.len() != m || risk.len() != m || risk_logits.len() != m * NUM_CLASSES {
        return Err(Error::shape("mmoe_loss", &[stroke_logits.len(), risk_logits.len()], &[m, risk.len()]));
    }
    check_label_consistency(stroke, risk)?;
    let bce = stroke_logits
        .iter()
        .zip(stroke)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / m as f64;
    let ce = risk
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = &risk_logits[r * NUM_CLASSES..(r + 1) * NUM_CLASSES];
            log_sum_exp(row) - row[l]
        })
        .sum::<f64>()
        / m as f64;
    Ok(MmoeLoss {
        total: weighted(bce, weights[0]) + weighted(ce, weights[1]),
        stroke: bce,
        risk: ce,
    })
}

fn weighted(loss: f64, w: f64) -> f64 {
    if w == 1.0 {
        loss
    } else {
        loss * w
    }
}

/// Loss nodes recorded for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub stroke: Option<Var>,
    pub risk: Var,
}

/// Records the forward pass and the training loss of a batch.
pub fn record_loss(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    risk: &[usize],
    stroke: &[f64],
    weights: [f64; 2],
) -> Result<LossVars> {
    let out = model.forward(tape, x)?;
    let risk_loss = tape.softmax_cross_entropy(out.risk_logits, risk)?;
    match out.stroke_logit {
        None => Ok(LossVars {
            total: risk_loss,
            stroke: None,
            risk: risk_loss,
        }),
        Some(logit) => {
            check_label_consistency(stroke, risk)?;
            let stroke_loss = tape.bce_with_logits(logit, stroke)?;
            let a = if weights[0] == 1.0 { stroke_loss } else { tape.scale(stroke_loss, weights[0]) };
            let b = if weights[1] == 1.0 { risk_loss } else { tape.scale(risk_loss, weights[1]) };
            Ok(LossVars {
                total: tape.add(a, b)?,
                stroke: Some(stroke_loss),
                risk: risk_loss,
            })
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (k, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Loss summary of a model over a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub stroke_loss: Option<f64>,
    pub risk_loss: f64,
    pub auc: Option<f64>,
}

struct Prepared {
    inputs: Vec<f64>,
    risk: Vec<usize>,
    stroke: Vec<f64>,
}

impl Prepared {
    fn new(model: &Model, data: &Dataset) -> Result<Self> {
        let full = data.matrix()?;
        Ok(Prepared {
            inputs: model.select_inputs(&full, data.schema.len()),
            risk: data.labels(),
            stroke: data.stroke_labels(),
        })
    }

    fn len(&self) -> usize {
        self.risk.len()
    }
}

fn evaluate_prepared(model: &Model, data: &Prepared, weights: [f64; 2]) -> Result<Evaluation> {
    let out = model.eval(&data.inputs)?;
    let risk_loss = data
        .risk
        .iter()
        .enumerate()
        .map(|(r, &l)| cross_entropy(out.risk_logits_row(r), l))
        .sum::<f64>()
        / data.len() as f64;
    match &out.stroke_logits {
        None => Ok(Evaluation {
            loss: risk_loss,
            stroke_loss: None,
            risk_loss,
            auc: None,
        }),
        Some(logits) => {
            let l = mmoe_loss(logits, &out.risk_logits, &data.stroke, &data.risk, weights)?;
            let labels: Vec<u8> = data.stroke.iter().map(|&y| y as u8).collect();
            Ok(Evaluation {
                loss: l.total,
                stroke_loss: Some(l.stroke),
                risk_loss: l.risk,
                auc: auc(logits, &labels).ok(),
            })
        }
    }
}

/// Mean losses of `model` over a prepared (imputed, normalized) dataset.
pub fn evaluate(model: &Model, data: &Dataset, weights: [f64; 2]) -> Result<Evaluation> {
    evaluate_prepared(model, &Prepared::new(model, data)?, weights)
}

/// Carves a stratified validation split off `data` and trains on the rest.
pub fn train(spec: &ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<(Model, TrainTrace)> {
    config.validate()?;
    let (fit, val) = split(data, config.validation_fraction, config.seed ^ 0x5eed_0f_7a11)?;
    train_with_validation(spec, &fit, &val, config)
}

/// Mini-batch Adam with early stopping on validation loss. Returns the
/// parameters of the best validation epoch (epoch 0 being the initial
/// parameters).
pub fn train_with_validation(
    spec: &ModelSpec,
    fit: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, TrainTrace)> {
    config.validate()?;
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::new(
        spec.clone(),
        Init::Glorot {
            seed: config.seed,
            zero_output: config.zero_init_output,
        },
    )?;
    let fit_data = Prepared::new(&model, fit)?;
    let val_data = Prepared::new(&model, val)?;
    let d = model.input_dim();
    let weights = config.objective_weights;

    let record = |epoch: usize, train: Evaluation, val: Evaluation| EpochRecord {
        epoch,
        train_loss: train.loss,
        val_loss: val.loss,
        train_stroke_loss: train.stroke_loss,
        train_risk_loss: train.stroke_loss.map(|_| train.risk_loss),
        val_stroke_loss: val.stroke_loss,
        val_risk_loss: val.stroke_loss.map(|_| val.risk_loss),
        val_auc: val.auc,
    };

    let initial_val = evaluate_prepared(&model, &val_data, weights)?;
    let initial_fit = evaluate_prepared(&model, &fit_data, weights)?;
    let mut epochs = vec![record(0, initial_fit, initial_val)];
    let mut best = (0usize, initial_val.loss, model.params().clone());
    let mut since_best = 0usize;
    let mut early_stopped = false;

    let mut optimizer = Adam::new(model.params(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut order: Vec<usize> = (0..fit_data.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_stroke, mut sum_risk) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len() * d);
            let mut risk = Vec::with_capacity(chunk.len());
            let mut stroke = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.extend_from_slice(&fit_data.inputs[i * d..(i + 1) * d]);
                risk.push(fit_data.risk[i]);
                stroke.push(fit_data.stroke[i]);
            }
            let x = Tensor::matrix(chunk.len(), d, xs)?;
            let mut tape = Tape::new();
            let loss = record_loss(&mut tape, &model, &x, &risk, &stroke, weights)?;
            let total = tape.value(loss.total).item()?;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            model.params_mut().zero_grad();
            tape.backward(loss.total, model.params_mut())?;
            optimizer.step(model.params_mut());

            let w = chunk.len() as f64;
            sum += total * w;
            sum_risk += tape.value(loss.risk).item()? * w;
            if let Some(s) = loss.stroke {
                sum_stroke += tape.value(s).item()? * w;
            }
        }
        let n = fit_data.len() as f64;
        let has_stroke = model.spec().has_stroke_head();
        let train_eval = Evaluation {
            loss: sum / n,
            stroke_loss: has_stroke.then_some(sum_stroke / n),
            risk_loss: sum_risk / n,
            auc: None,
        };
        let val_eval = evaluate_prepared(&model, &val_data, weights)?;
        if !val_eval.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epochs.push(record(epoch, train_eval, val_eval));

        if val_eval.loss < best.1 {
            best = (epoch, val_eval.loss, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience || config.patience == 0 {
                early_stopped = true;
                break;
            }
        }
    }

    let stopped_at_epoch = epochs.last().map(|r| r.epoch).unwrap_or(0);
    let (best_epoch, _, params) = best;
    let mut params = params;
    params.zero_grad();
    let model = Model::from_parts(spec.clone(), params)?;
    Ok((
        model,
        TrainTrace {
            epochs,
            stopped_at_epoch,
            best_epoch,
            early_stopped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureDef, FeatureKind, FeatureSchema, Sample};
    use rand::Rng;

    #[test]
    fn cross_entropy_closed_forms() {
        assert!(cross_entropy(&[50.0, 0.0, 0.0, 0.0], 0) < 1e-20);
        for label in 0..4 {
            assert!((cross_entropy(&[0.3; 4], label) - 4f64.ln()).abs() < 1e-15);
        }
        assert!((binary_cross_entropy(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((binary_cross_entropy(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(binary_cross_entropy(60.0, 1.0) < 1e-20);
    }

    fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += h;
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_gradients_match_closed_forms_and_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.5];
        let label = 2;
        let fd = finite_difference(|z| cross_entropy(z, label), &logits, 1e-5);
        let probs = crate::autodiff::softmax(&logits);
        for c in 0..4 {
            let closed = probs[c] - if c == label { 1.0 } else { 0.0 };
            assert!((fd[c] - closed).abs() < 1e-8);
        }

        let mut store = ParamStore::new();
        let id = store.insert("z", Tensor::matrix(1, 4, logits.to_vec()).unwrap()).unwrap();
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let l = tape.softmax_cross_entropy(z, &[label]).unwrap();
        tape.backward(l, &mut store).unwrap();
        for c in 0..4 {
            assert!((store.get(id).grad.data()[c] - fd[c]).abs() < 1e-8);
        }

        for (z, y) in [(0.7, 1.0), (-2.0, 0.0), (3.5, 0.0)] {
            let fd = finite_difference(|v| binary_cross_entropy(v[0], y), &[z], 1e-5)[0];
            let closed = crate::autodiff::sigmoid(z) - y;
            assert!((fd - closed).abs() < 1e-8);
        }
    }

    #[test]
    fn mmoe_loss_is_additive() {
        let z = [0, 3, 1];
        let y = [0.0, 1.0, 0.0];
        let perfect_stroke = [-60.0, 60.0, -60.0];
        let perfect_risk = [60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 60.0, 0.0, 60.0, 0.0, 0.0];
        let l = mmoe_loss(&perfect_stroke, &perfect_risk, &y, &z, [1.0, 1.0]).unwrap();
        assert!(l.total < 1e-20);

        let uniform_risk = [0.0; 12];
        let l = mmoe_loss(&perfect_stroke, &uniform_risk, &y, &z, [1.0, 1.0]).unwrap();
        assert!((l.total - 4f64.ln()).abs() < 1e-12);

        let sl = [0.2, -0.4, 1.1];
        let rl = [0.1, 0.2, -0.3, 0.9, 1.0, -1.0, 0.5, 0.0, 0.3, 0.3, 0.3, -2.0];
        let l = mmoe_loss(&sl, &rl, &y, &z, [1.0, 1.0]).unwrap();
        let bce = sl.iter().zip(&y).map(|(&a, &b)| binary_cross_entropy(a, b)).sum::<f64>() / 3.0;
        let ce = (0..3).map(|r| cross_entropy(&rl[r * 4..r * 4 + 4], z[r])).sum::<f64>() / 3.0;
        assert_eq!(l.total, bce + ce);
    }

    #[test]
    fn mmoe_loss_rejects_inconsistent_labels() {
        let r = mmoe_loss(&[0.0], &[0.0; 4], &[1.0], &[2], [1.0, 1.0]);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    fn separable(n: usize, seed: u64) -> Dataset {
        let schema = FeatureSchema::new(
            (0..3)
                .map(|i| FeatureDef {
                    abbrev: format!("f{i}"),
                    name: String::new(),
                    kind: FeatureKind::Continuous,
                    normal_range: None,
                    categories: None,
                })
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                Sample {
                    id: i,
                    features: vec![
                        Some(sign * rng.random_range(1.0..2.5)),
                        Some(rng.random_range(-1.0..1.0)),
                        Some(rng.random_range(-1.0..1.0)),
                    ],
                    risk_state: RiskState::ALL[label],
                }
            })
            .collect();
        Dataset::new(schema, samples).unwrap()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = separable(400, 3);
        let config = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            patience: 200,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&ModelSpec::base_dnn(vec![0, 1, 2]), &data, &config).unwrap();
        assert!(trace.epochs[0].train_loss > 1.0);
        let best = trace.epochs.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
        assert!(best < 0.05, "train loss {best}");
    }

    #[test]
    fn first_record_is_uniform_with_zero_output_layer() {
        let data = separable(200, 4);
        let config = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&ModelSpec::base_dnn(vec![0, 1, 2]), &data, &config).unwrap();
        assert!((trace.epochs[0].train_loss - 4f64.ln()).abs() <= 0.05);
        assert!((trace.epochs[0].val_loss - 4f64.ln()).abs() < 1e-12);
        assert!(trace.epochs.iter().all(|r| r.train_loss >= 0.0 && r.val_loss >= 0.0));
        assert!(trace.epochs.windows(2).all(|w| w[0].epoch < w[1].epoch));
    }

    #[test]
    fn patience_zero_stops_at_first_non_improving_epoch() {
        let data = separable(200, 5);
        let config = TrainConfig {
            learning_rate: 0.5,
            patience: 0,
            max_epochs: 200,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&ModelSpec::base_dnn(vec![0, 1, 2]), &data, &config).unwrap();
        let recs = &trace.epochs;
        let last = recs.len() - 1;
        let best_before = recs[..last].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert!(trace.early_stopped);
        assert!(recs[last].val_loss >= best_before);
        for i in 1..last {
            let prior = recs[..i].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
            assert!(recs[i].val_loss < prior, "epoch {i} did not improve but training continued");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let data = separable(200, 6);
        let config = TrainConfig {
            max_epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let spec = ModelSpec::qidnn(vec![0, 1, 2], vec![0, 1, 2]);
        let (a, ta) = train(&spec, &data, &config).unwrap();
        let (b, tb) = train(&spec, &data, &config).unwrap();
        assert_eq!(ta, tb);
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = separable(100, 7);
        for s in &mut data.samples {
            s.features[0] = Some(s.features[0].unwrap() * 1e200);
        }
        let config = TrainConfig {
            max_epochs: 3,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let r = train(&ModelSpec::base_dnn(vec![0, 1, 2]), &data, &config);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = toml::from_str("learning_rate = 0.01\npatience = 3\n").unwrap();
        assert_eq!(parsed.patience, 3);
        assert_eq!(parsed.batch_size, 64);
    }
}
