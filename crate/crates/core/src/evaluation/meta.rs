//! Standardized mean differences and DerSimonian–Laird random-effects pooling.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEffect {
    pub name: String,
    pub n_t: usize,
    pub n_c: usize,
    /// Hedges' g; positive favours the treatment.
    pub d: f64,
    pub v: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl StudyEffect {
    /// Builds a study from a precomputed effect and variance.
    pub fn from_effect(name: impl Into<String>, d: f64, v: f64) -> Result<Self> {
        if !(v > 0.0 && v.is_finite() && d.is_finite()) {
            return Err(Error::DegenerateStudy(format!(
                "effect {d} with variance {v} is not usable"
            )));
        }
        let half = Z_95 * v.sqrt();
        Ok(Self {
            name: name.into(),
            n_t: 0,
            n_c: 0,
            d,
            v,
            ci_low: d - half,
            ci_high: d + half,
        })
    }

    pub fn significant(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss / (n - 1.0))
}

/// Hedges' g between per-query treatment and control values.
pub fn smd_effect(treatment: &[f64], control: &[f64], name: &str) -> Result<StudyEffect> {
    let (n_t, n_c) = (treatment.len(), control.len());
    if n_t < 2 || n_c < 2 {
        return Err(Error::DegenerateStudy(format!(
            "{name}: need at least two values per group, got {n_t} and {n_c}"
        )));
    }
    let (m_t, var_t) = mean_var(treatment);
    let (m_c, var_c) = mean_var(control);
    let df = (n_t + n_c - 2) as f64;
    let s_pooled = (((n_t - 1) as f64 * var_t + (n_c - 1) as f64 * var_c) / df).sqrt();
    if s_pooled.is_nan() || s_pooled <= 0.0 {
        return Err(Error::DegenerateStudy(format!(
            "{name}: pooled standard deviation is zero"
        )));
    }
    let j = 1.0 - 3.0 / (4.0 * df - 1.0);
    let d = j * (m_t - m_c) / s_pooled;
    let (nt, nc) = (n_t as f64, n_c as f64);
    let v = (nt + nc) / (nt * nc) + d * d / (2.0 * (nt + nc));
    let half = Z_95 * v.sqrt();
    Ok(StudyEffect {
        name: name.to_string(),
        n_t,
        n_c,
        d,
        v,
        ci_low: d - half,
        ci_high: d + half,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub name: String,
    pub d: f64,
    /// `[lo, hi]`
    pub ci: [f64; 2],
    pub lo: f64,
    pub hi: f64,
    pub weight_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub q: f64,
    pub df: usize,
    pub tau2: f64,
    /// Random-effects weights normalized to sum to one, in study order.
    pub weights: Vec<f64>,
    pub summary: f64,
    pub summary_se: f64,
    pub summary_ci: [f64; 2],
    pub rows: Vec<ForestRow>,
}

/// JSON shape consumed by plotting front ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestExport {
    pub studies: Vec<ForestRow>,
    pub tau2: f64,
    pub summary: f64,
    pub summary_ci: [f64; 2],
}

impl MetaResult {
    pub fn forest(&self) -> ForestExport {
        ForestExport {
            studies: self.rows.clone(),
            tau2: self.tau2,
            summary: self.summary,
            summary_ci: self.summary_ci,
        }
    }
}

pub fn dl_random_effects(studies: &[StudyEffect]) -> Result<MetaResult> {
    if studies.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "random-effects pooling needs at least two studies, got {}",
            studies.len()
        )));
    }
    if let Some(s) = studies.iter().find(|s| !(s.v > 0.0 && s.v.is_finite())) {
        return Err(Error::DegenerateStudy(format!("{}: variance {}", s.name, s.v)));
    }
    let w: Vec<f64> = studies.iter().map(|s| 1.0 / s.v).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let d_fe = studies.iter().zip(&w).map(|(s, w)| w * s.d).sum::<f64>() / sw;
    let q: f64 = studies
        .iter()
        .zip(&w)
        .map(|(s, w)| w * (s.d - d_fe) * (s.d - d_fe))
        .sum();
    let df = studies.len() - 1;
    let tau2 = ((q - df as f64) / (sw - sw2 / sw)).max(0.0);
    Ok(pool(studies, tau2, q, df))
}

/// Random-effects summary for a given between-study variance.
pub fn pool(studies: &[StudyEffect], tau2: f64, q: f64, df: usize) -> MetaResult {
    let w_re: Vec<f64> = studies.iter().map(|s| 1.0 / (s.v + tau2)).collect();
    let total: f64 = w_re.iter().sum();
    let summary = studies.iter().zip(&w_re).map(|(s, w)| w * s.d).sum::<f64>() / total;
    let se = (1.0 / total).sqrt();
    let weights: Vec<f64> = w_re.iter().map(|w| w / total).collect();
    let rows = studies
        .iter()
        .zip(&weights)
        .map(|(s, w)| ForestRow {
            name: s.name.clone(),
            d: s.d,
            ci: [s.ci_low, s.ci_high],
            lo: s.ci_low,
            hi: s.ci_high,
            weight_pct: 100.0 * w,
        })
        .collect();
    MetaResult {
        q,
        df,
        tau2,
        weights,
        summary,
        summary_se: se,
        summary_ci: [summary - Z_95 * se, summary + Z_95 * se],
        rows,
    }
}

/// One study in a meta-analysis input file: either per-query values or a
/// precomputed effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StudyInput {
    Values {
        name: String,
        treatment: Vec<f64>,
        control: Vec<f64>,
    },
    Effect {
        name: String,
        d: f64,
        v: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaInput {
    pub studies: Vec<StudyInput>,
}

impl MetaInput {
    pub fn effects(&self) -> Result<Vec<StudyEffect>> {
        self.studies
            .iter()
            .map(|s| match s {
                StudyInput::Values {
                    name,
                    treatment,
                    control,
                } => smd_effect(treatment, control, name),
                StudyInput::Effect { name, d, v } => StudyEffect::from_effect(name.clone(), *d, *v),
            })
            .collect()
    }
}
