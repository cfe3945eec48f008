//! Feature schema, CSV ingestion, imputation, normalization, stratified
//! splitting, and the planted-rule synthetic generator.

mod schema;
mod synth;

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use schema::{FeatureDef, FeatureKind, FeatureSchema, NormalRange, FILLER_COUNT};
pub use synth::{synth, class_counts, PlantedRule, SynthConfig, COHORT_CLASS_COUNTS};

pub const LABEL_COLUMN: &str = "risk_state";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskState {
    Low = 0,
    Medium = 1,
    High = 2,
    Attack = 3,
}

impl RiskState {
    pub const ALL: [RiskState; 4] = [RiskState::Low, RiskState::Medium, RiskState::High, RiskState::Attack];
    pub const COUNT: usize = 4;

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskState::Low => "low",
            RiskState::Medium => "medium",
            RiskState::High => "high",
            RiskState::Attack => "attack",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Zero-based row of the sample in the file it was loaded from.
    pub id: usize,
    pub features: Vec<Option<f64>>,
    pub risk_state: RiskState,
}

impl Sample {
    /// Stroke occurrence: attack vs. the merged low/medium/high states.
    pub fn stroke(&self) -> u8 {
        u8::from(self.risk_state == RiskState::Attack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    /// Population standard deviation; 1 for constant columns.
    pub std: f64,
    /// Most frequent value, lowest value on ties.
    pub mode: f64,
}

/// Per-feature statistics fitted on non-missing training values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub features: Vec<FeatureStats>,
}

impl NormalizationStats {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let mut features = Vec::with_capacity(ds.schema.len());
        for (j, def) in ds.schema.features().iter().enumerate() {
            let mut values: Vec<f64> = ds.samples.iter().filter_map(|s| s.features[j]).collect();
            if values.is_empty() {
                return Err(Error::Config(format!(
                    "column {:?} has no observed values in the training split",
                    def.abbrev
                )));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            values.sort_by(f64::total_cmp);
            let mut mode = values[0];
            let mut best = 0usize;
            let mut i = 0;
            while i < values.len() {
                let mut j = i;
                while j < values.len() && values[j] == values[i] {
                    j += 1;
                }
                if j - i > best {
                    best = j - i;
                    mode = values[i];
                }
                i = j;
            }
            features.push(FeatureStats { mean, std, mode });
        }
        Ok(NormalizationStats { features })
    }

    /// Value used to fill a missing cell of column `j` in raw units.
    pub fn fill_value(&self, schema: &FeatureSchema, j: usize) -> f64 {
        match schema.get(j).kind {
            FeatureKind::Continuous => self.features[j].mean,
            FeatureKind::Categorical | FeatureKind::Binary => self.features[j].mode,
        }
    }

    pub fn normalize_value(&self, schema: &FeatureSchema, j: usize, raw: f64) -> f64 {
        match schema.get(j).kind {
            FeatureKind::Continuous => (raw - self.features[j].mean) / self.features[j].std,
            FeatureKind::Categorical | FeatureKind::Binary => raw,
        }
    }

    pub fn denormalize_value(&self, schema: &FeatureSchema, j: usize, value: f64) -> f64 {
        match schema.get(j).kind {
            FeatureKind::Continuous => value * self.features[j].std + self.features[j].mean,
            FeatureKind::Categorical | FeatureKind::Binary => value,
        }
    }

    /// The imputation vector in normalized model space: 0 for continuous
    /// columns, the training mode for coded columns.
    pub fn baseline(&self, schema: &FeatureSchema) -> Vec<f64> {
        (0..schema.len())
            .map(|j| self.normalize_value(schema, j, self.fill_value(schema, j)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.features.len() != schema.len() {
                return Err(Error::shape("dataset row", &[schema.len()], &[s.features.len()]));
            }
        }
        Ok(Dataset { schema, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for s in &self.samples {
            counts[s.risk_state.index()] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.risk_state.index()).collect()
    }

    pub fn stroke_labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.stroke())).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.features.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    pub fn find(&self, id: usize) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Row-major feature matrix; fails if any cell is missing.
    pub fn matrix(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len() * self.schema.len());
        for s in &self.samples {
            for (j, v) in s.features.iter().enumerate() {
                match v {
                    Some(v) => out.push(*v),
                    None => {
                        return Err(Error::Data(format!(
                            "sample {} has a missing {:?}; impute first",
                            s.id,
                            self.schema.get(j).abbrev
                        )))
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn row(&self, index: usize) -> Result<Vec<f64>> {
        let s = &self.samples[index];
        s.features
            .iter()
            .map(|v| v.ok_or_else(|| Error::Data(format!("sample {} has missing values", s.id))))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected: Vec<&str> = schema.abbrevs().chain(std::iter::once(LABEL_COLUMN)).collect();
        for (i, name) in header.iter().enumerate() {
            if expected.get(i) != Some(&name) {
                return Err(Error::Parse {
                    row: 0,
                    column: name.to_string(),
                    message: match expected.get(i) {
                        Some(want) => format!("unknown column; expected {want:?} at position {i}"),
                        None => "unknown column beyond the schema".into(),
                    },
                });
            }
        }
        if header.len() != expected.len() {
            return Err(Error::Parse {
                row: 0,
                column: expected[header.len()].to_string(),
                message: "missing column".into(),
            });
        }

        let mut samples = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let row = idx + 1;
            let record = record?;
            if record.len() != expected.len() {
                return Err(Error::Parse {
                    row,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", expected.len(), record.len()),
                });
            }
            let mut features = Vec::with_capacity(schema.len());
            for (j, cell) in record.iter().take(schema.len()).enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    features.push(None);
                    continue;
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => features.push(Some(v)),
                    _ => {
                        return Err(Error::Parse {
                            row,
                            column: schema.get(j).abbrev.clone(),
                            message: format!("non-numeric value {cell:?}"),
                        })
                    }
                }
            }
            let label_cell = record[schema.len()].trim();
            let risk_state = label_cell
                .parse::<usize>()
                .ok()
                .and_then(RiskState::from_index)
                .ok_or_else(|| Error::Parse {
                    row,
                    column: LABEL_COLUMN.into(),
                    message: format!("risk_state {label_cell:?} outside 0..3"),
                })?;
            samples.push(Sample {
                id: idx,
                features,
                risk_state,
            });
        }
        Ok(Dataset {
            schema: schema.clone(),
            samples,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_csv(std::io::BufReader::new(file), schema)
    }

    /// Writes header plus rows; numbers use the shortest representation that
    /// parses back to the identical `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        wtr.write_record(self.schema.abbrevs().chain(std::iter::once(LABEL_COLUMN)))?;
        let mut record = Vec::with_capacity(self.schema.len() + 1);
        for s in &self.samples {
            record.clear();
            record.extend(s.features.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
            record.push(s.risk_state.index().to_string());
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Fills missing cells: continuous columns with the training mean, coded
/// columns with the training mode. Observed cells are untouched.
pub fn impute(ds: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    check_stats(ds, stats)?;
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .enumerate()
                .map(|(j, v)| Some(v.unwrap_or_else(|| stats.fill_value(&ds.schema, j))))
                .collect(),
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        schema: ds.schema.clone(),
        samples,
    })
}

/// Z-scores continuous columns; coded columns pass through as raw codes.
pub fn normalize(ds: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    check_stats(ds, stats)?;
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .enumerate()
                .map(|(j, v)| v.map(|v| stats.normalize_value(&ds.schema, j, v)))
                .collect(),
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        schema: ds.schema.clone(),
        samples,
    })
}

/// Impute then normalize with stats fitted elsewhere (typically the
/// training split).
pub fn prepare(ds: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    normalize(&impute(ds, stats)?, stats)
}

fn check_stats(ds: &Dataset, stats: &NormalizationStats) -> Result<()> {
    if stats.features.len() != ds.schema.len() {
        return Err(Error::shape(
            "normalization stats",
            &[ds.schema.len()],
            &[stats.features.len()],
        ));
    }
    Ok(())
}

/// Stratified split by risk state. Each present class contributes
/// `round(n_c * test_fraction)` samples to the test side, clamped so both
/// sides keep at least one.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: [Vec<usize>; 4] = Default::default();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.risk_state.index()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {} has {} sample(s); at least 2 are needed",
                RiskState::ALL[c].name(),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let take = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}
