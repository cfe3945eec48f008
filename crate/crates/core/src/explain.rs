//! Shapley attributions against a single-baseline value function.
//!
//! A coalition `S` of features is evaluated by feeding the model a hybrid
//! vector: features in `S` come from the explained sample, the rest from the
//! baseline (training means and modes). Class targets are pre-softmax logits.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::RiskState;
use crate::error::{Error, Result};
use crate::models::Model;

/// Largest player count handled by coalition enumeration.
pub const EXACT_MAX_FEATURES: usize = 12;
pub const DEFAULT_PERMUTATIONS: usize = 128;
pub const DEFAULT_TRANSITION_THRESHOLD: f64 = 0.5;

/// Anything that maps a row-major batch of inputs to a row-major batch of
/// explainable outputs.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn num_targets(&self) -> usize;
    fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>>;

    fn target_name(&self, target: usize) -> String {
        format!("output{target}")
    }
}

impl Predictor for Model {
    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }

    fn num_targets(&self) -> usize {
        RiskState::COUNT + usize::from(self.spec().has_stroke_head())
    }

    fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let out = self.eval(inputs)?;
        Ok((0..out.rows).flat_map(|r| out.target_row(r)).collect())
    }

    fn target_name(&self, target: usize) -> String {
        match RiskState::from_index(target) {
            Some(s) => s.name().to_string(),
            None => "stroke".to_string(),
        }
    }
}

/// Wraps a per-row closure as a [`Predictor`].
pub struct FnPredictor<F> {
    dim: usize,
    targets: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnPredictor<F> {
    pub fn new(dim: usize, targets: usize, f: F) -> Self {
        FnPredictor { dim, targets, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Predictor for FnPredictor<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_targets(&self) -> usize {
        self.targets
    }

    fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len() / self.dim * self.targets);
        for row in inputs.chunks(self.dim) {
            let y = (self.f)(row);
            if y.len() != self.targets {
                return Err(Error::shape("predictor output", &[self.targets], &[y.len()]));
            }
            out.extend(y);
        }
        Ok(out)
    }
}

/// `v(S)`: the predictor on the sample with non-coalition players reset to
/// the baseline. Features outside `players` always keep the sample's value.
pub struct ValueFunction<'a, P: Predictor + ?Sized> {
    predictor: &'a P,
    baseline: Vec<f64>,
    sample: Vec<f64>,
    players: Vec<usize>,
}

impl<'a, P: Predictor + ?Sized> ValueFunction<'a, P> {
    pub fn new(predictor: &'a P, baseline: Vec<f64>, sample: Vec<f64>) -> Result<Self> {
        let players = (0..predictor.input_dim()).collect();
        Self::with_players(predictor, baseline, sample, players)
    }

    pub fn with_players(predictor: &'a P, baseline: Vec<f64>, sample: Vec<f64>, players: Vec<usize>) -> Result<Self> {
        let d = predictor.input_dim();
        if baseline.len() != d || sample.len() != d {
            return Err(Error::shape("value function", &[d, d], &[baseline.len(), sample.len()]));
        }
        if players.is_empty() || players.iter().any(|&j| j >= d) {
            return Err(Error::Argument(format!("players must be non-empty positions below {d}")));
        }
        let mut seen = players.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != players.len() {
            return Err(Error::Argument("duplicate players".into()));
        }
        Ok(ValueFunction {
            predictor,
            baseline,
            sample,
            players,
        })
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn players(&self) -> &[usize] {
        &self.players
    }

    pub fn num_targets(&self) -> usize {
        self.predictor.num_targets()
    }

    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    fn hybrid(&self, member: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut x = self.sample.clone();
        for (k, &j) in self.players.iter().enumerate() {
            if !member(k) {
                x[j] = self.baseline[j];
            }
        }
        x
    }

    /// Values of coalitions given as bitmasks over player positions
    /// (row-major `masks x targets`).
    pub fn eval_masks(&self, masks: &[u64]) -> Result<Vec<f64>> {
        let mut rows = Vec::with_capacity(masks.len() * self.sample.len());
        for &m in masks {
            rows.extend(self.hybrid(|k| m >> k & 1 == 1));
        }
        self.predictor.predict(&rows)
    }

    pub fn eval_coalition(&self, members: &[bool]) -> Result<Vec<f64>> {
        self.predictor.predict(&self.hybrid(|k| members[k]))
    }

    /// `v(all players)`: the prediction on the sample.
    pub fn full(&self) -> Result<Vec<f64>> {
        self.predictor.predict(&self.sample)
    }

    /// `v(empty)`: the base value.
    pub fn empty(&self) -> Result<Vec<f64>> {
        self.eval_coalition(&vec![false; self.num_players()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: String,
    pub value: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: Option<usize>,
    pub target: String,
    pub base_value: f64,
    pub prediction: f64,
    pub phi: Vec<Attribution>,
}

impl Explanation {
    pub fn phi_values(&self) -> Vec<f64> {
        self.phi.iter().map(|a| a.phi).collect()
    }

    /// `prediction - base_value - sum(phi)`.
    pub fn additivity_gap(&self) -> f64 {
        self.prediction - self.base_value - self.phi.iter().map(|a| a.phi).sum::<f64>()
    }
}

/// Raw per-player, per-target attributions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyValues {
    /// `phi[target][player]`.
    pub phi: Vec<Vec<f64>>,
    pub base: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl ShapleyValues {
    /// Labels the values; `names[k]` and `values[k]` describe player `k`.
    pub fn explanations<P: Predictor + ?Sized>(
        &self,
        predictor: &P,
        sample_id: Option<usize>,
        names: &[String],
        values: &[f64],
    ) -> Vec<Explanation> {
        self.phi
            .iter()
            .enumerate()
            .map(|(t, phi)| Explanation {
                sample_id,
                target: predictor.target_name(t),
                base_value: self.base[t],
                prediction: self.prediction[t],
                phi: phi
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| Attribution {
                        feature: names[k].clone(),
                        value: values[k],
                        phi: p,
                    })
                    .collect(),
            })
            .collect()
    }
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

/// Coalition enumeration: `phi_j = sum_S |S|!(p-|S|-1)!/p! [v(S+j) - v(S)]`.
pub fn shapley_exact<P: Predictor + ?Sized>(vf: &ValueFunction<P>) -> Result<ShapleyValues> {
    let p = vf.num_players();
    if p > EXACT_MAX_FEATURES {
        return Err(Error::Argument(format!(
            "exact enumeration needs 2^{p} evaluations; at most {EXACT_MAX_FEATURES} features are \
             supported, use the permutation-sampling estimator instead"
        )));
    }
    let t = vf.num_targets();
    let masks: Vec<u64> = (0..1u64 << p).collect();
    let values = vf.eval_masks(&masks)?;
    let fact = factorials(p);
    let weight: Vec<f64> = (0..p).map(|s| fact[s] * fact[p - s - 1] / fact[p]).collect();
    let mut phi = vec![vec![0.0; p]; t];
    for &m in &masks {
        let size = m.count_ones() as usize;
        for j in 0..p {
            if m >> j & 1 == 1 {
                continue;
            }
            let with = (m | 1 << j) as usize;
            let w = weight[size];
            for (c, row) in phi.iter_mut().enumerate() {
                row[j] += w * (values[with * t + c] - values[m as usize * t + c]);
            }
        }
    }
    let full = ((1u64 << p) - 1) as usize;
    Ok(ShapleyValues {
        phi,
        base: values[..t].to_vec(),
        prediction: values[full * t..(full + 1) * t].to_vec(),
    })
}

/// Antithetic permutation sampling: each drawn order is used together with
/// its reverse. Contributions along one order telescope to
/// `v(N) - v(empty)`, so additivity holds for the average too.
pub fn shapley_sampled<P: Predictor + ?Sized>(
    vf: &ValueFunction<P>,
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyValues> {
    if n_permutations < 2 || !n_permutations.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "permutation count must be even and at least 2, got {n_permutations}"
        )));
    }
    let p = vf.num_players();
    let t = vf.num_targets();
    let d = vf.sample.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders = Vec::with_capacity(n_permutations);
    let mut order: Vec<usize> = (0..p).collect();
    for _ in 0..n_permutations / 2 {
        order.shuffle(&mut rng);
        orders.push(order.clone());
        orders.push(order.iter().rev().copied().collect::<Vec<_>>());
    }

    let empty = vf.hybrid(|_| false);
    let mut rows = Vec::with_capacity(n_permutations * p * d);
    for order in &orders {
        let mut x = empty.clone();
        for &k in order {
            let j = vf.players[k];
            x[j] = vf.sample[j];
            rows.extend_from_slice(&x);
        }
    }
    let base = vf.predictor.predict(&empty)?;
    let values = vf.predictor.predict(&rows)?;

    let mut phi = vec![vec![0.0; p]; t];
    for (o, order) in orders.iter().enumerate() {
        let mut prev: &[f64] = &base;
        for (step, &k) in order.iter().enumerate() {
            let at = (o * p + step) * t;
            let cur = &values[at..at + t];
            for c in 0..t {
                phi[c][k] += cur[c] - prev[c];
            }
            prev = cur;
        }
    }
    let n = n_permutations as f64;
    for row in &mut phi {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let last = ((n_permutations - 1) * p + p - 1) * t;
    Ok(ShapleyValues {
        phi,
        base,
        prediction: values[last..last + t].to_vec(),
    })
}

/// Exact when the player count allows it, sampled otherwise.
pub fn shapley_auto<P: Predictor + ?Sized>(
    vf: &ValueFunction<P>,
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyValues> {
    if vf.num_players() <= EXACT_MAX_FEATURES {
        shapley_exact(vf)
    } else {
        shapley_sampled(vf, n_permutations, seed)
    }
}

/// Shapley interaction index by enumeration, `[target][i][j]`, symmetric
/// with a zero diagonal:
/// `I_ij = sum_{S without i,j} |S|!(p-|S|-2)!/(p-1)! [v(S+ij) - v(S+i) - v(S+j) + v(S)]`.
pub fn interaction_exact<P: Predictor + ?Sized>(vf: &ValueFunction<P>) -> Result<Vec<Vec<Vec<f64>>>> {
    let p = vf.num_players();
    if p > EXACT_MAX_FEATURES {
        return Err(Error::Argument(format!(
            "exact interaction index supports at most {EXACT_MAX_FEATURES} features, got {p}; \
             use the sampled variant"
        )));
    }
    let t = vf.num_targets();
    let mut out = vec![vec![vec![0.0; p]; p]; t];
    if p < 2 {
        return Ok(out);
    }
    let masks: Vec<u64> = (0..1u64 << p).collect();
    let v = vf.eval_masks(&masks)?;
    let fact = factorials(p);
    let weight: Vec<f64> = (0..p - 1).map(|s| fact[s] * fact[p - s - 2] / fact[p - 1]).collect();
    for i in 0..p {
        for j in i + 1..p {
            let pair = 1u64 << i | 1u64 << j;
            let mut acc = vec![0.0; t];
            for &m in &masks {
                if m & pair != 0 {
                    continue;
                }
                let w = weight[m.count_ones() as usize];
                let (s, si, sj, sij) = (m as usize, (m | 1 << i) as usize, (m | 1 << j) as usize, (m | pair) as usize);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += w * (v[sij * t + c] - v[si * t + c] - v[sj * t + c] + v[s * t + c]);
                }
            }
            for c in 0..t {
                out[c][i][j] = acc[c];
                out[c][j][i] = acc[c];
            }
        }
    }
    Ok(out)
}

/// Monte-Carlo interaction index: the pair is treated as one merged player
/// in a `p-1` player game and `S` is drawn as its predecessors in a random
/// order of that game.
pub fn interaction_sampled<P: Predictor + ?Sized>(
    vf: &ValueFunction<P>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if n_samples == 0 {
        return Err(Error::Argument("interaction sampling needs at least one draw".into()));
    }
    let p = vf.num_players();
    let t = vf.num_targets();
    let mut out = vec![vec![vec![0.0; p]; p]; t];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..p {
        for j in i + 1..p {
            let mut others: Vec<usize> = (0..p).filter(|&k| k != i && k != j).collect();
            let mut rows = Vec::with_capacity(n_samples * 4 * vf.sample.len());
            for _ in 0..n_samples {
                others.shuffle(&mut rng);
                let cut = rand::Rng::random_range(&mut rng, 0..=others.len());
                let mut member = vec![false; p];
                for &k in &others[..cut] {
                    member[k] = true;
                }
                for (a, b) in [(false, false), (true, false), (false, true), (true, true)] {
                    member[i] = a;
                    member[j] = b;
                    rows.extend(vf.hybrid(|k| member[k]));
                }
            }
            let v = vf.predictor.predict(&rows)?;
            for c in 0..t {
                let mut acc = 0.0;
                for s in 0..n_samples {
                    let at = |q: usize| v[(s * 4 + q) * t + c];
                    acc += at(3) - at(1) - at(2) + at(0);
                }
                out[c][i][j] = acc / n_samples as f64;
                out[c][j][i] = out[c][i][j];
            }
        }
    }
    Ok(out)
}

/// Which outputs an importance ranking aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceTarget {
    /// One output (a class logit or the stroke logit).
    Target(usize),
    /// Sum over the risk-state logits, as in a stacked per-class bar chart.
    AllClasses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub n_permutations: usize,
    pub seed: u64,
    /// Samples explained; larger sets are subsampled with `seed`.
    pub max_samples: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            n_permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
            max_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub index: usize,
    pub mean_abs_phi: f64,
    /// Mean |phi| for every output of the predictor.
    pub per_target: Vec<f64>,
}

fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_5a3b1e);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Per-sample attributions for every row of `inputs` (row-major).
pub fn explain_rows<P: Predictor + ?Sized>(
    predictor: &P,
    baseline: &[f64],
    inputs: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<ShapleyValues>> {
    let d = predictor.input_dim();
    inputs
        .par_chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let vf = ValueFunction::new(predictor, baseline.to_vec(), row.to_vec())?;
            shapley_auto(&vf, n_permutations, sample_seed(seed, i))
        })
        .collect()
}

/// Features ranked by mean absolute Shapley value, descending (ties keep
/// input order).
pub fn importance<P: Predictor + ?Sized>(
    predictor: &P,
    baseline: &[f64],
    inputs: &[f64],
    names: &[String],
    target: ImportanceTarget,
    options: &ExplainOptions,
) -> Result<Vec<FeatureImportance>> {
    let d = predictor.input_dim();
    if names.len() != d || inputs.is_empty() || !inputs.len().is_multiple_of(d) {
        return Err(Error::shape("importance", &[d], &[names.len(), inputs.len()]));
    }
    let t = predictor.num_targets();
    if let ImportanceTarget::Target(c) = target {
        if c >= t {
            return Err(Error::Argument(format!("target {c} out of range for {t} outputs")));
        }
    }
    let chosen = subsample(inputs.len() / d, options.max_samples, options.seed);
    let rows: Vec<f64> = chosen.iter().flat_map(|&i| inputs[i * d..(i + 1) * d].iter().copied()).collect();
    let values = explain_rows(predictor, baseline, &rows, options.n_permutations, options.seed)?;
    let n = values.len() as f64;
    let mut per_target = vec![vec![0.0; t]; d];
    for sv in &values {
        for (c, phi) in sv.phi.iter().enumerate() {
            for (j, v) in phi.iter().enumerate() {
                per_target[j][c] += v.abs() / n;
            }
        }
    }
    let classes = t.min(RiskState::COUNT);
    let mut ranked: Vec<FeatureImportance> = per_target
        .into_iter()
        .enumerate()
        .map(|(j, per)| FeatureImportance {
            feature: names[j].clone(),
            index: j,
            mean_abs_phi: match target {
                ImportanceTarget::Target(c) => per[c],
                ImportanceTarget::AllClasses => per[..classes].iter().sum(),
            },
            per_target: per,
        })
        .collect();
    ranked.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenOptions {
    pub top_m: usize,
    /// Screening is restricted to this many of the most important features.
    pub max_players: usize,
    pub explain: ExplainOptions,
    /// Draws per pair when the sampled interaction index is used.
    pub interaction_samples: usize,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        ScreenOptions {
            top_m: 7,
            max_players: EXACT_MAX_FEATURES,
            explain: ExplainOptions {
                max_samples: 100,
                ..ExplainOptions::default()
            },
            interaction_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenedPair {
    pub first: usize,
    pub second: usize,
    pub first_name: String,
    pub second_name: String,
    /// Mean |interaction index| summed over the risk-state logits.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    /// Input positions of the screened players.
    pub players: Vec<usize>,
    /// Symmetric `players x players`, zero diagonal.
    pub values: Vec<Vec<f64>>,
}

/// Averages |interaction index| over samples for the given players.
pub fn interaction_matrix<P: Predictor + ?Sized>(
    predictor: &P,
    baseline: &[f64],
    inputs: &[f64],
    players: &[usize],
    options: &ScreenOptions,
) -> Result<InteractionMatrix> {
    let d = predictor.input_dim();
    let t = predictor.num_targets().min(RiskState::COUNT);
    let chosen = subsample(inputs.len() / d, options.explain.max_samples, options.explain.seed);
    let per_sample: Vec<Vec<Vec<Vec<f64>>>> = chosen
        .par_iter()
        .map(|&i| {
            let vf = ValueFunction::with_players(
                predictor,
                baseline.to_vec(),
                inputs[i * d..(i + 1) * d].to_vec(),
                players.to_vec(),
            )?;
            if players.len() <= EXACT_MAX_FEATURES {
                interaction_exact(&vf)
            } else {
                interaction_sampled(&vf, options.interaction_samples, sample_seed(options.explain.seed, i))
            }
        })
        .collect::<Result<_>>()?;
    let p = players.len();
    let n = per_sample.len() as f64;
    let mut values = vec![vec![0.0; p]; p];
    for idx in &per_sample {
        for target in idx.iter().take(t) {
            for i in 0..p {
                for j in 0..p {
                    values[i][j] += target[i][j].abs() / n;
                }
            }
        }
    }
    Ok(InteractionMatrix {
        players: players.to_vec(),
        values,
    })
}

/// Ranks feature pairs by interaction magnitude and returns the top `top_m`.
/// With more than `max_players` inputs, the screen runs over the most
/// important features only.
pub fn interaction_screen<P: Predictor + ?Sized>(
    predictor: &P,
    baseline: &[f64],
    inputs: &[f64],
    names: &[String],
    options: &ScreenOptions,
) -> Result<Vec<ScreenedPair>> {
    let d = predictor.input_dim();
    let p = d.min(options.max_players);
    let max_pairs = p * p.saturating_sub(1) / 2;
    if options.top_m == 0 || options.top_m > max_pairs {
        return Err(Error::Argument(format!(
            "top_m must lie in 1..={max_pairs} for {p} screened features, got {}",
            options.top_m
        )));
    }
    let players: Vec<usize> = if d <= options.max_players {
        (0..d).collect()
    } else {
        importance(predictor, baseline, inputs, names, ImportanceTarget::AllClasses, &options.explain)?
            .into_iter()
            .take(p)
            .map(|f| f.index)
            .collect()
    };
    let matrix = interaction_matrix(predictor, baseline, inputs, &players, options)?;
    let mut pairs = Vec::with_capacity(max_pairs);
    for a in 0..p {
        for b in a + 1..p {
            let (i, j) = (players[a].min(players[b]), players[a].max(players[b]));
            pairs.push(ScreenedPair {
                first: i,
                second: j,
                first_name: names[i].clone(),
                second_name: names[j].clone(),
                score: matrix.values[a][b],
            });
        }
    }
    pairs.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then((x.first, x.second).cmp(&(y.first, y.second)))
    });
    pairs.truncate(options.top_m);
    Ok(pairs)
}

/// Distinct members of the ranked pairs, in order of first appearance,
/// until `n` features are collected.
pub fn features_from_pairs(pairs: &[ScreenedPair], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    for pair in pairs {
        for f in [pair.first, pair.second] {
            if out.len() < n && !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Force {
    pub feature: String,
    pub value: f64,
    pub phi: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcePlot {
    pub target: String,
    pub base_value: f64,
    pub prediction: f64,
    /// Non-zero contributions sorted by |phi|, descending.
    pub forces: Vec<Force>,
}

const RED: &str = "#ff0051";
const BLUE: &str = "#008bfb";
const LABELED: usize = 6;

pub fn force_data(explanation: &Explanation) -> ForcePlot {
    let mut forces: Vec<Force> = explanation
        .phi
        .iter()
        .filter(|a| a.phi != 0.0)
        .map(|a| Force {
            feature: a.feature.clone(),
            value: a.value,
            phi: a.phi,
            direction: if a.phi > 0.0 { Direction::Increase } else { Direction::Decrease },
        })
        .collect();
    forces.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()));
    ForcePlot {
        target: explanation.target.clone(),
        base_value: explanation.base_value,
        prediction: explanation.prediction,
        forces,
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl ForcePlot {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target: {}", self.target);
        let _ = writeln!(s, "base value: {:.4}", self.base_value);
        for f in &self.forces {
            let sign = match f.direction {
                Direction::Increase => '+',
                Direction::Decrease => '-',
            };
            let _ = writeln!(s, "  {sign} {:<8} = {:<10.4} phi {:+.4}", f.feature, f.value, f.phi);
        }
        let _ = writeln!(s, "prediction: {:.4}", self.prediction);
        s
    }

    /// Stacked signed segments on one axis: increases (red) push right from
    /// the base value, decreases (blue) push left; both meet at the
    /// prediction.
    pub fn to_svg(&self) -> String {
        let (width, left, right) = (800.0, 40.0, 760.0);
        let pos: f64 = self.forces.iter().filter(|f| f.phi > 0.0).map(|f| f.phi).sum();
        let neg: f64 = self.forces.iter().filter(|f| f.phi < 0.0).map(|f| -f.phi).sum();
        let lo = (self.base_value - neg).min(self.prediction).min(self.base_value);
        let hi = (self.base_value + pos).max(self.prediction).max(self.base_value);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |v: f64| left + (v - lo) / span * (right - left);
        let labeled: Vec<&str> = self.forces.iter().take(LABELED).map(|f| f.feature.as_str()).collect();

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="140" viewBox="0 0 {width} 140" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"  <title>{}</title>"#, xml_escape(&self.target));
        let _ = writeln!(
            s,
            r#"  <text x="{left}" y="18">{}: base {:.4}, prediction {:.4}</text>"#,
            xml_escape(&self.target),
            self.base_value,
            self.prediction
        );

        let mut segments = Vec::new();
        // Increases stack up to the prediction from the left, decreases from the right.
        let mut cursor = self.prediction - pos;
        for f in self.forces.iter().filter(|f| f.phi > 0.0).rev() {
            segments.push((cursor, cursor + f.phi, RED, f));
            cursor += f.phi;
        }
        let mut cursor = self.prediction;
        for f in self.forces.iter().filter(|f| f.phi < 0.0) {
            segments.push((cursor, cursor - f.phi, BLUE, f));
            cursor -= f.phi;
        }
        for (a, b, color, f) in segments {
            let (x0, x1) = (x(a), x(b));
            let _ = writeln!(
                s,
                r#"  <rect x="{:.2}" y="50" width="{:.2}" height="24" fill="{color}" stroke="white" stroke-width="0.5"><title>{} = {} ({:+.4})</title></rect>"#,
                x0,
                (x1 - x0).max(0.0),
                xml_escape(&f.feature),
                f.value,
                f.phi
            );
            if labeled.contains(&f.feature.as_str()) {
                let _ = writeln!(
                    s,
                    r#"  <text x="{:.2}" y="92" text-anchor="middle" fill="{color}">{} = {:.3}</text>"#,
                    (x0 + x1) / 2.0,
                    xml_escape(&f.feature),
                    f.value
                );
            }
        }
        let _ = writeln!(
            s,
            r#"  <line x1="{0:.2}" y1="40" x2="{0:.2}" y2="84" stroke="gray" stroke-dasharray="3,2"/>"#,
            x(self.base_value)
        );
        let _ = writeln!(s, r#"  <text x="{:.2}" y="36" text-anchor="middle" fill="gray">base</text>"#, x(self.base_value));
        let _ = writeln!(
            s,
            r#"  <text x="{:.2}" y="118" text-anchor="middle" font-weight="bold">{:.4}</text>"#,
            x(self.prediction),
            self.prediction
        );
        s.push_str("</svg>\n");
        s
    }
}

/// `(feature value, phi, partner value)` for one feature across explanations.
pub fn dependence_triples(explanations: &[Explanation], feature: &str, partner: &str) -> Result<Vec<(f64, f64, f64)>> {
    explanations
        .iter()
        .map(|e| {
            let f = e.phi.iter().find(|a| a.feature == feature);
            let q = e.phi.iter().find(|a| a.feature == partner);
            match (f, q) {
                (Some(f), Some(q)) => Ok((f.value, f.phi, q.value)),
                _ => Err(Error::NotFound(format!("feature {feature} or {partner} not in explanation"))),
            }
        })
        .collect()
}

pub fn write_dependence_csv<W: Write>(writer: W, feature: &str, partner: &str, triples: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([feature.to_string(), format!("phi_{feature}"), partner.to_string()])?;
    for (a, b, c) in triples {
        w.write_record([a.to_string(), b.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<dependence writer>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTendency {
    pub predicted: usize,
    pub runner_up: usize,
    /// Runner-up score over top score.
    pub ratio: f64,
    pub flagged: bool,
}

/// Flags a tendency toward the runner-up state when its score is at least
/// `threshold` times the top score. Scores must be non-negative.
pub fn transition_tendency(scores: &[f64], threshold: f64) -> Result<TransitionTendency> {
    if scores.len() < 2 || scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Argument("transition tendency needs two or more non-negative scores".into()));
    }
    let predicted = crate::models::argmax(scores);
    let runner_up = (0..scores.len())
        .filter(|&i| i != predicted)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if scores[b] >= scores[i] => Some(b),
            _ => Some(i),
        })
        .expect("at least two scores");
    let ratio = if scores[predicted] > 0.0 { scores[runner_up] / scores[predicted] } else { 0.0 };
    Ok(TransitionTendency {
        predicted,
        runner_up,
        ratio,
        flagged: ratio >= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    fn linear(weights: Vec<f64>) -> FnPredictor<impl Fn(&[f64]) -> Vec<f64> + Sync> {
        let d = weights.len();
        FnPredictor::new(d, 1, move |x: &[f64]| vec![x.iter().zip(&weights).map(|(a, b)| a * b).sum()])
    }

    #[test]
    fn additive_model_by_hand() {
        let f = linear(vec![1.0, 2.0]);
        let vf = ValueFunction::new(&f, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let sv = shapley_exact(&vf).unwrap();
        assert_eq!(sv.phi[0], vec![1.0, 2.0]);
        assert_eq!(sv.base, vec![0.0]);
        assert_eq!(sv.prediction, vec![3.0]);
    }

    #[test]
    fn value_function_endpoints() {
        let f = linear(vec![1.0, -2.0, 0.5]);
        let vf = ValueFunction::new(&f, vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 4.0]).unwrap();
        assert_eq!(vf.full().unwrap(), f.predict(&[2.0, 0.0, 4.0]).unwrap());
        assert_eq!(vf.empty().unwrap(), f.predict(&[1.0, 1.0, 1.0]).unwrap());
    }

    #[test]
    fn enumeration_is_refused_above_threshold() {
        let f = linear(vec![1.0; 13]);
        let vf = ValueFunction::new(&f, vec![0.0; 13], vec![1.0; 13]).unwrap();
        let err = shapley_exact(&vf).unwrap_err();
        assert!(err.to_string().contains("sampling"));
        assert!(interaction_exact(&vf).is_err());
    }

    #[test]
    fn sampled_needs_even_count() {
        let f = linear(vec![1.0; 3]);
        let vf = ValueFunction::new(&f, vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(shapley_sampled(&vf, 3, 0).is_err());
        assert!(shapley_sampled(&vf, 0, 0).is_err());
    }

    #[test]
    fn sampled_matches_exact_on_additive_model() {
        let f = linear(vec![0.3, -1.5, 2.0, 0.0, 4.0]);
        let vf = ValueFunction::new(&f, vec![0.1; 5], vec![1.0, 2.0, -1.0, 5.0, 0.5]).unwrap();
        let exact = shapley_exact(&vf).unwrap();
        for n in [2, 8, 64] {
            let s = shapley_sampled(&vf, n, 11).unwrap();
            for j in 0..5 {
                assert!((s.phi[0][j] - exact.phi[0][j]).abs() < 1e-9);
            }
        }
        assert_eq!(shapley_sampled(&vf, 8, 3).unwrap(), shapley_sampled(&vf, 8, 3).unwrap());
    }

    #[test]
    fn subset_players_keep_other_features_at_sample_value() {
        let f = FnPredictor::new(3, 1, |x: &[f64]| vec![x[0] * x[1] + x[2]]);
        let vf = ValueFunction::with_players(&f, vec![0.0; 3], vec![2.0, 3.0, 5.0], vec![0, 1]).unwrap();
        let sv = shapley_exact(&vf).unwrap();
        assert_eq!(sv.base, vec![5.0]);
        assert_eq!(sv.phi[0], vec![3.0, 3.0]);
    }

    #[test]
    fn interaction_of_product_and_additive_models() {
        let f = FnPredictor::new(3, 1, |x: &[f64]| vec![x[0] * x[1] + 0.5 * x[2]]);
        let vf = ValueFunction::new(&f, vec![0.0; 3], vec![2.0, 3.0, 1.0]).unwrap();
        let idx = interaction_exact(&vf).unwrap();
        assert!((idx[0][0][1] - 6.0).abs() < 1e-12);
        assert_eq!(idx[0][0][1], idx[0][1][0]);
        assert_eq!(idx[0][0][2], 0.0);
        assert_eq!(idx[0][1][1], 0.0);
        let sampled = interaction_sampled(&vf, 16, 1).unwrap();
        assert!((sampled[0][0][1] - 6.0).abs() < 1e-12);

        let g = linear(vec![1.0, -2.0, 3.0, 0.5]);
        let vf = ValueFunction::new(&g, vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for row in &interaction_exact(&vf).unwrap()[0] {
            assert!(row.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn screen_ranks_planted_pair_first() {
        let f = FnPredictor::new(5, 4, |x: &[f64]| {
            let y = x[0] + x[1] - x[2] + 0.4 * x[4] + 1.5 * x[1] * x[3] + 0.2 * x[0] * x[2];
            vec![y, -y, 0.0, 0.5 * y]
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<f64> = (0..5 * 40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let opts = ScreenOptions {
            top_m: 3,
            ..ScreenOptions::default()
        };
        let pairs = interaction_screen(&f, &[0.0; 5], &inputs, &names(5), &opts).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!((pairs[0].first, pairs[0].second), (1, 3));
        assert_eq!((pairs[1].first, pairs[1].second), (0, 2));
        assert!(pairs[2].score < 1e-12);

        let too_many = ScreenOptions {
            top_m: 11,
            ..ScreenOptions::default()
        };
        let err = interaction_screen(&f, &[0.0; 5], &inputs, &names(5), &too_many);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn features_from_pairs_takes_union_in_rank_order() {
        let mk = |a, b| ScreenedPair {
            first: a,
            second: b,
            first_name: String::new(),
            second_name: String::new(),
            score: 0.0,
        };
        let pairs = [mk(3, 5), mk(1, 3), mk(2, 7), mk(0, 9)];
        assert_eq!(features_from_pairs(&pairs, 3), vec![3, 5, 1]);
        assert_eq!(features_from_pairs(&pairs, 6), vec![3, 5, 1, 2, 7, 0]);
    }

    #[test]
    fn importance_ranks_constant_feature_last() {
        let f = FnPredictor::new(4, 1, |x: &[f64]| vec![3.0 * x[0] + x[1] - 0.5 * x[3] + 7.0 * x[2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inputs = Vec::new();
        for _ in 0..30 {
            inputs.extend([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)]);
        }
        let ranked = importance(&f, &[0.0; 4], &inputs, &names(4), ImportanceTarget::Target(0), &ExplainOptions::default()).unwrap();
        let order: Vec<usize> = ranked.iter().map(|r| r.index).collect();
        assert_eq!(order, vec![0, 1, 3, 2]);
        assert_eq!(ranked[3].mean_abs_phi, 0.0);
    }

    #[test]
    fn force_records() {
        let e = Explanation {
            sample_id: Some(1),
            target: "high".into(),
            base_value: 0.2,
            prediction: 0.4,
            phi: vec![
                Attribution { feature: "b".into(), value: 1.0, phi: -0.1 },
                Attribution { feature: "a".into(), value: 2.0, phi: 0.3 },
                Attribution { feature: "c".into(), value: 3.0, phi: 0.0 },
            ],
        };
        assert!(e.additivity_gap().abs() < 1e-15);
        let plot = force_data(&e);
        assert_eq!(plot.forces.len(), 2);
        assert_eq!(plot.forces[0].feature, "a");
        assert_eq!(plot.forces[0].direction, Direction::Increase);
        assert_eq!(plot.forces[1].direction, Direction::Decrease);
        let svg = plot.to_svg();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.find(RED).unwrap() < svg.find(BLUE).unwrap());
        assert!(plot.to_text().contains("prediction: 0.4000"));

        let zero = Explanation {
            phi: vec![Attribution { feature: "a".into(), value: 1.0, phi: 0.0 }],
            prediction: 0.2,
            ..e
        };
        let plot = force_data(&zero);
        assert!(plot.forces.is_empty());
        assert_eq!(plot.prediction, plot.base_value);
        assert!(plot.to_svg().ends_with("</svg>\n"));
    }

    #[test]
    fn transition_rule() {
        let t = transition_tendency(&[0.0, 0.0, 0.40, 0.21], 0.5).unwrap();
        assert_eq!((t.predicted, t.runner_up), (2, 3));
        assert!(t.flagged);
        let t = transition_tendency(&[0.0, 0.0, 3.6051, 0.0], 0.5).unwrap();
        assert_eq!(t.predicted, 2);
        assert!(!t.flagged);
        assert!(transition_tendency(&[1.0], 0.5).is_err());
    }

    #[test]
    fn dependence_export() {
        let e = |v: f64, p: f64, w: f64| Explanation {
            sample_id: None,
            target: "low".into(),
            base_value: 0.0,
            prediction: 0.0,
            phi: vec![
                Attribution { feature: "LSBP".into(), value: v, phi: p },
                Attribution { feature: "Exs".into(), value: w, phi: 0.0 },
            ],
        };
        let triples = dependence_triples(&[e(1.0, 0.5, 0.0), e(2.0, 0.7, 1.0)], "LSBP", "Exs").unwrap();
        assert_eq!(triples, vec![(1.0, 0.5, 0.0), (2.0, 0.7, 1.0)]);
        let mut buf = Vec::new();
        write_dependence_csv(&mut buf, "LSBP", "Exs", &triples).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "LSBP,phi_LSBP,Exs\n1,0.5,0\n2,0.7,1\n");
        assert!(dependence_triples(&[e(1.0, 0.5, 0.0)], "LSBP", "Sm").is_err());
    }

    proptest! {
        #[test]
        fn exact_estimator_is_additive(
            w in prop::collection::vec(-2.0f64..2.0, 6),
            x in prop::collection::vec(-2.0f64..2.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let wc = w.clone();
            let f = FnPredictor::new(6, 2, move |v: &[f64]| {
                let lin: f64 = v.iter().zip(&wc).map(|(a, b)| a * b).sum();
                vec![lin.tanh() + v[0] * v[3], (v[1] - v[2]).max(0.0) * v[5]]
            });
            let vf = ValueFunction::new(&f, b, x).unwrap();
            let sv = shapley_exact(&vf).unwrap();
            for c in 0..2 {
                let gap = sv.prediction[c] - sv.base[c] - sv.phi[c].iter().sum::<f64>();
                prop_assert!(gap.abs() <= 1e-9);
            }
            let s = shapley_sampled(&vf, 6, 1).unwrap();
            for c in 0..2 {
                let gap = s.prediction[c] - s.base[c] - s.phi[c].iter().sum::<f64>();
                prop_assert!(gap.abs() <= 1e-9);
            }
        }
    }
}
