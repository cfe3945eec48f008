//! Planted-rule generator.
//!
//! Features are drawn independently from rough clinical distributions. A
//! risk score built from five linear terms plus scaled pairwise products of
//! standardized features ranks the non-attack samples into low/medium/high;
//! a separate attack score, led by HbA1c and driven mostly by products of
//! lipid and glucose markers, picks the attack samples.
//! Class sizes follow the requested ratios exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, RiskState, Sample};
use crate::error::{Error, Result};

/// Low, medium, high and attack counts of the cleaned screening cohort.
pub const COHORT_CLASS_COUNTS: [usize; 4] = [7221, 5868, 5475, 1967];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    /// Linear terms of the risk score, on standardized features.
    pub linear: Vec<(String, f64)>,
    /// Pairwise products of standardized features, scaled by `interaction_strength`.
    pub pairs: Vec<(String, String, f64)>,
    /// Linear terms of the attack score.
    pub attack: Vec<(String, f64)>,
    /// Pairwise products of standardized features in the attack score.
    #[serde(default)]
    pub attack_pairs: Vec<(String, String, f64)>,
    /// Weight of the risk score inside the attack score.
    pub attack_risk_weight: f64,
}

impl Default for PlantedRule {
    fn default() -> Self {
        let s = |a: &str, w: f64| (a.to_string(), w);
        PlantedRule {
            linear: vec![s("LSBP", 1.0), s("Exs", 0.9), s("Sm", 0.8), s("Wt", 0.7), s("TC", 0.6)],
            pairs: vec![
                ("LSBP".into(), "RSBP".into(), 1.3),
                ("LDBP".into(), "HbA1c".into(), 1.3),
                ("LSBP".into(), "Exs".into(), 0.6),
                ("Sm".into(), "LDBP".into(), 0.5),
                ("HS".into(), "RSBP".into(), 0.5),
            ],
            attack: vec![s("HbA1c", 0.3)],
            attack_pairs: vec![
                ("TC".into(), "LDL-C".into(), 1.0),
                ("HbA1c".into(), "FBG".into(), 1.0),
                ("Hcy".into(), "TG".into(), 1.0),
            ],
            attack_risk_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub class_ratios: [f64; 4],
    pub interaction_strength: f64,
    /// Fraction of samples whose labels are shuffled among themselves.
    pub noise: f64,
    /// Per-cell probability of a missing value (on top of `Ys` for non-smokers).
    pub missing_rate: f64,
    pub seed: u64,
    pub rule: PlantedRule,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: COHORT_CLASS_COUNTS.iter().sum(),
            class_ratios: COHORT_CLASS_COUNTS.map(|c| c as f64),
            interaction_strength: 1.0,
            noise: 0.02,
            missing_rate: 0.0,
            seed: 7,
            rule: PlantedRule::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 40 {
            return Err(Error::Argument(format!("n must be at least 40, got {}", self.n)));
        }
        if self.class_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Argument(format!(
                "class ratios must be positive, got {:?}",
                self.class_ratios
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Argument(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Argument(format!(
                "missing rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if !self.interaction_strength.is_finite() {
            return Err(Error::Argument("interaction strength must be finite".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` samples over the ratios; ties go
/// to the lower class index.
pub fn class_counts(n: usize, ratios: &[f64; 4]) -> [usize; 4] {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts = [0usize; 4];
    for (c, q) in quotas.iter().enumerate() {
        counts[c] = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for c in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    f64::from(u8::from(rng.random::<f64>() < p))
}

fn categorical(rng: &mut ChaCha8Rng, codes: &[i64], probs: &[f64]) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&code, &p) in codes.iter().zip(probs) {
        acc += p;
        if u < acc {
            return code as f64;
        }
    }
    *codes.last().expect("non-empty codes") as f64
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("valid normal").sample(rng)
}

/// Draws one raw feature value by abbreviation. Unknown columns are
/// standard normal.
fn draw(rng: &mut ChaCha8Rng, abbrev: &str, smoking: f64) -> Option<f64> {
    let round1 = |v: f64| (v * 10.0).round() / 10.0;
    let round2 = |v: f64| (v * 100.0).round() / 100.0;
    let v = match abbrev {
        "Arhm" => bernoulli(rng, 0.08),
        "BMI" => round1(normal(rng, 23.5, 3.2).max(14.0)),
        "Edu" => categorical(rng, &[1, 2, 3, 4, 5], &[0.3, 0.3, 0.2, 0.15, 0.05]),
        "Exs" => bernoulli(rng, 0.4),
        "FA" => normal(rng, 56.0, 11.0).clamp(18.0, 95.0).round(),
        "FBG" => round2(normal(rng, 5.4, 0.9).max(2.5)),
        "HbA1c" => round2(normal(rng, 5.8, 0.9).max(3.5)),
        "Hcy" => round1(normal(rng, 12.0, 4.0).max(2.0)),
        "HDL-C" => round2(normal(rng, 1.35, 0.3).max(0.3)),
        "HEH" => bernoulli(rng, 0.3),
        "HS" => bernoulli(rng, 0.1),
        "Ht" => normal(rng, 163.0, 8.0).round(),
        "Wt" => round1(normal(rng, 64.0, 11.0).max(30.0)),
        "LDBP" => normal(rng, 82.0, 10.0).round(),
        "LDL-C" => round2(normal(rng, 2.9, 0.7).max(0.5)),
        "LSBP" => normal(rng, 132.0, 18.0).round(),
        "MV" => categorical(rng, &[1, 2, 3], &[0.5, 0.2, 0.3]),
        "Ret" => bernoulli(rng, 0.35),
        "Sm" => smoking,
        "TC" => round2(normal(rng, 4.8, 0.9).max(1.5)),
        "TG" => round2(LogNormal::new(1.4f64.ln(), 0.4).expect("valid lognormal").sample(rng)),
        "Ys" => {
            if smoking > 0.0 {
                rng.random_range(1..=40) as f64
            } else {
                return None;
            }
        }
        "RSBP" => normal(rng, 131.0, 18.0).round(),
        _ => normal(rng, 0.0, 1.0),
    };
    Some(v)
}

fn standardized_column(samples: &[Vec<Option<f64>>], j: usize) -> Vec<f64> {
    let observed: Vec<f64> = samples.iter().filter_map(|r| r[j]).collect();
    let n = observed.len().max(1) as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let sd = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    samples
        .iter()
        .map(|r| r[j].map(|v| (v - mean) / sd).unwrap_or(0.0))
        .collect()
}

pub fn synth(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = FeatureSchema::stroke_default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;

    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .map(|_| {
            let smoking = categorical(&mut rng, &[0, 1, 2], &[0.6, 0.1, 0.3]);
            schema.abbrevs().map(|a| draw(&mut rng, a, smoking)).collect()
        })
        .collect();

    let z = |abbrev: &str| -> Result<Vec<f64>> { Ok(standardized_column(&rows, schema.require(abbrev)?)) };
    let rule = &config.rule;
    let mut risk = vec![0.0; n];
    for (abbrev, w) in &rule.linear {
        for (r, v) in risk.iter_mut().zip(z(abbrev)?) {
            *r += w * v;
        }
    }
    let mut attack: Vec<f64> = risk.iter().map(|r| rule.attack_risk_weight * r).collect();
    for (abbrev, w) in &rule.attack {
        for (a, v) in attack.iter_mut().zip(z(abbrev)?) {
            *a += w * v;
        }
    }
    for (a, b, w) in &rule.attack_pairs {
        let (za, zb) = (z(a)?, z(b)?);
        for i in 0..n {
            attack[i] += w * za[i] * zb[i];
        }
    }
    if config.interaction_strength != 0.0 {
        for (a, b, w) in &rule.pairs {
            let (za, zb) = (z(a)?, z(b)?);
            for i in 0..n {
                risk[i] += config.interaction_strength * w * za[i] * zb[i];
            }
        }
    }

    let counts = class_counts(n, &config.class_ratios);
    let mut labels = vec![RiskState::Low; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| attack[b].total_cmp(&attack[a]).then(a.cmp(&b)));
    let (attackers, rest) = order.split_at(counts[3]);
    for &i in attackers {
        labels[i] = RiskState::Attack;
    }
    let mut rest = rest.to_vec();
    rest.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]).then(a.cmp(&b)));
    let mut pos = 0;
    for (c, &count) in counts[..3].iter().enumerate() {
        for &i in &rest[pos..pos + count] {
            labels[i] = RiskState::ALL[c];
        }
        pos += count;
    }

    let flips = (config.noise * n as f64).round() as usize;
    if flips > 1 {
        let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n, flips).into_vec();
        let mut shuffled: Vec<RiskState> = chosen.iter().map(|&i| labels[i]).collect();
        shuffled.shuffle(&mut rng);
        for (&i, l) in chosen.iter().zip(shuffled) {
            labels[i] = l;
        }
    }

    let mut samples: Vec<Sample> = rows
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (features, risk_state))| Sample {
            id,
            features,
            risk_state,
        })
        .collect();
    if config.missing_rate > 0.0 {
        for s in &mut samples {
            for v in &mut s.features {
                if rng.random::<f64>() < config.missing_rate {
                    *v = None;
                }
            }
        }
    }
    Dataset::new(schema, samples)
}
