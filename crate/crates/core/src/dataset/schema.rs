use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalRange {
    pub lo: f64,
    pub hi: f64,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub abbrev: String,
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_range: Option<NormalRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<i64>>,
}

impl FeatureDef {
    fn continuous(abbrev: &str, name: &str, range: Option<(f64, f64, &str)>) -> Self {
        FeatureDef {
            abbrev: abbrev.into(),
            name: name.into(),
            kind: FeatureKind::Continuous,
            normal_range: range.map(|(lo, hi, unit)| NormalRange {
                lo,
                hi,
                unit: unit.into(),
            }),
            categories: None,
        }
    }

    fn binary(abbrev: &str, name: &str) -> Self {
        FeatureDef {
            abbrev: abbrev.into(),
            name: name.into(),
            kind: FeatureKind::Binary,
            normal_range: None,
            categories: Some(vec![0, 1]),
        }
    }

    fn categorical(abbrev: &str, name: &str, categories: &[i64]) -> Self {
        FeatureDef {
            abbrev: abbrev.into(),
            name: name.into(),
            kind: FeatureKind::Categorical,
            normal_range: None,
            categories: Some(categories.to_vec()),
        }
    }
}

/// Ordered feature dictionary. Column order here is the column order of
/// every CSV and every model input row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<FeatureDef>,
}

/// Number of neutral standard-normal columns appended to the clinical ones.
pub const FILLER_COUNT: usize = 11;

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDef>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Config("schema has no features".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.abbrev.as_str()) {
                return Err(Error::Config(format!("duplicate feature abbreviation {:?}", f.abbrev)));
            }
            if f.abbrev == "risk_state" || f.abbrev.contains(',') {
                return Err(Error::Config(format!("reserved feature abbreviation {:?}", f.abbrev)));
            }
            if f.normal_range.is_some() && f.kind != FeatureKind::Continuous {
                return Err(Error::Config(format!(
                    "normal range given for non-continuous feature {:?}",
                    f.abbrev
                )));
            }
        }
        Ok(FeatureSchema { features })
    }

    /// The 34-column stroke screening schema.
    pub fn stroke_default() -> Self {
        use FeatureDef as F;
        let mut features = vec![
            F::binary("Arhm", "Arrhythmia"),
            F::continuous("BMI", "Body mass index", Some((20.0, 25.0, "kg/m^2"))),
            F::categorical("Edu", "Education", &[1, 2, 3, 4, 5]),
            F::binary("Exs", "Lack of exercise"),
            F::continuous("FA", "Filling age", None),
            F::continuous("FBG", "Fasting blood glucose", Some((3.9, 6.1, "mmol/L"))),
            F::continuous("HbA1c", "Glycosylated hemoglobin", Some((4.0, 6.0, "%"))),
            F::continuous("Hcy", "Homocysteine", Some((5.0, 15.0, "umol/L"))),
            // Union of the sex-specific ranges (female 1.29-1.55, male 1.16-1.42).
            F::continuous("HDL-C", "High density lipoprotein cholesterol", Some((1.16, 1.55, "mmol/L"))),
            F::binary("HEH", "History of hypertension"),
            F::binary("HS", "History of stroke"),
            F::continuous("Ht", "Height", None),
            F::continuous("Wt", "Weight", None),
            F::continuous("LDBP", "Left diastolic blood pressure", Some((60.0, 89.0, "mmHg"))),
            F::continuous("LDL-C", "Low density lipoprotein cholesterol", Some((0.0, 3.37, "mmol/L"))),
            F::continuous("LSBP", "Left systolic blood pressure", Some((80.0, 140.0, "mmHg"))),
            F::categorical("MV", "Meat and vegetable balance", &[1, 2, 3]),
            F::binary("Ret", "Retired"),
            F::categorical("Sm", "Smoking", &[0, 1, 2]),
            F::continuous("TC", "Total cholesterol", Some((3.0, 5.2, "mmol/L"))),
            F::continuous("TG", "Triglyceride", Some((0.6, 1.7, "mmol/L"))),
            F::continuous("Ys", "Years of smoking", None),
            F::continuous("RSBP", "Right systolic blood pressure", Some((80.0, 140.0, "mmHg"))),
        ];
        for i in 1..=FILLER_COUNT {
            features.push(F::continuous(&format!("N{i:02}"), "Neutral filler", None));
        }
        FeatureSchema::new(features).expect("default schema is valid")
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, index: usize) -> &FeatureDef {
        &self.features[index]
    }

    pub fn index_of(&self, abbrev: &str) -> Option<usize> {
        self.features.iter().position(|f| f.abbrev == abbrev)
    }

    pub fn require(&self, abbrev: &str) -> Result<usize> {
        self.index_of(abbrev)
            .ok_or_else(|| Error::Argument(format!("unknown feature {abbrev:?}")))
    }

    pub fn abbrevs(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.abbrev.as_str())
    }

    /// SHA-256 over abbreviations and kinds, hex-encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.features {
            h.update(f.abbrev.as_bytes());
            h.update([0u8]);
            h.update(format!("{:?}", f.kind).as_bytes());
            h.update(*b"\n");
        }
        hex::encode(h.finalize())
    }
}
