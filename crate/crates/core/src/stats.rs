//! Estimates, intervals and pass/fail comparison reports.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::fmt;

/// Running sums for a sample mean. Merging is order-sensitive only through
/// floating-point rounding, and callers merge in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAcc {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl MeanAcc {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, o: &MeanAcc) {
        self.count += o.count;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        ((self.sum_sq - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn se(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Binomial proportion with its plain standard error.
pub fn proportion(successes: u64, trials: u64) -> (f64, f64) {
    let p = successes as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Wilson score interval at confidence `level`.
pub fn wilson_ci(successes: u64, trials: u64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::InvalidArgument("wilson_ci needs at least one trial".into()));
    }
    if successes > trials {
        return Err(Error::InvalidArgument(format!("{successes} successes out of {trials} trials")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0,1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    Ok((lo, hi))
}

/// How far an observation may sit from its prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToleranceRule {
    /// `|obs − pred| ≤ k·se + bias + abs + rel·|pred|`.
    Band { k_se: f64, abs: f64, rel: f64 },
    /// `obs ≤ pred + k·se + bias + abs`.
    AtMost { k_se: f64, abs: f64 },
    /// `lo ≤ obs ≤ hi`; prediction is informational.
    Range { lo: f64, hi: f64 },
}

impl ToleranceRule {
    pub fn se(k: f64) -> Self {
        ToleranceRule::Band { k_se: k, abs: 0.0, rel: 0.0 }
    }

    pub fn se_abs(k: f64, abs: f64) -> Self {
        ToleranceRule::Band { k_se: k, abs, rel: 0.0 }
    }

    pub fn abs(abs: f64) -> Self {
        ToleranceRule::Band { k_se: 0.0, abs, rel: 0.0 }
    }

    pub fn rel(rel: f64) -> Self {
        ToleranceRule::Band { k_se: 0.0, abs: 0.0, rel }
    }

    pub fn allowance(&self, predicted: f64, se: f64, bias: f64) -> f64 {
        match *self {
            ToleranceRule::Band { k_se, abs, rel } => k_se * se + bias + abs + rel * predicted.abs(),
            ToleranceRule::AtMost { k_se, abs } => k_se * se + bias + abs,
            ToleranceRule::Range { .. } => 0.0,
        }
    }

    pub fn passes(&self, observed: f64, predicted: f64, se: f64, bias: f64) -> bool {
        if !observed.is_finite() {
            return false;
        }
        match *self {
            ToleranceRule::Band { .. } => (observed - predicted).abs() <= self.allowance(predicted, se, bias),
            ToleranceRule::AtMost { .. } => observed <= predicted + self.allowance(predicted, se, bias),
            ToleranceRule::Range { lo, hi } => (lo..=hi).contains(&observed),
        }
    }
}

impl fmt::Display for ToleranceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToleranceRule::Band { k_se, abs, rel } => write!(f, "|obs-pred| <= {k_se}se + bias + {abs} + {rel}|pred|"),
            ToleranceRule::AtMost { k_se, abs } => write!(f, "obs <= pred + {k_se}se + bias + {abs}"),
            ToleranceRule::Range { lo, hi } => write!(f, "obs in [{lo}, {hi}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonItem {
    pub name: String,
    pub observed: f64,
    pub predicted: f64,
    pub se: f64,
    pub bias: f64,
    pub rule: ToleranceRule,
    pub verdict: bool,
}

impl ComparisonItem {
    pub fn new(name: impl Into<String>, observed: f64, predicted: f64, se: f64, bias: f64, rule: ToleranceRule) -> Self {
        let verdict = rule.passes(observed, predicted, se, bias);
        Self { name: name.into(), observed, predicted, se, bias, rule, verdict }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub items: Vec<ComparisonItem>,
}

/// One observed value, keyed for alignment with its prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub key: String,
    pub value: f64,
    pub se: f64,
    pub bias: f64,
}

impl ComparisonReport {
    pub fn push(&mut self, item: ComparisonItem) {
        self.items.push(item);
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.verdict)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["name", "observed", "predicted", "se", "bias", "rule", "verdict"])?;
        for i in &self.items {
            out.write_record([
                i.name.clone(),
                i.observed.to_string(),
                i.predicted.to_string(),
                i.se.to_string(),
                i.bias.to_string(),
                i.rule.to_string(),
                if i.verdict { "pass".into() } else { "fail".into() },
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Aligns observations with predictions by key and applies the rule for each key.
/// Keys must match exactly, in the same order.
pub fn compare_report(
    observed: &[Observation],
    predicted: &[(String, f64)],
    rules: &[(String, ToleranceRule)],
) -> Result<ComparisonReport> {
    if observed.len() != predicted.len() {
        return Err(Error::KeyMismatch(format!("{} observed vs {} predicted", observed.len(), predicted.len())));
    }
    let rule_map: BTreeMap<&str, &ToleranceRule> = rules.iter().map(|(k, r)| (k.as_str(), r)).collect();
    let mut report = ComparisonReport::default();
    for (o, (pk, pv)) in observed.iter().zip(predicted) {
        if &o.key != pk {
            return Err(Error::KeyMismatch(format!("observed {:?} paired with predicted {:?}", o.key, pk)));
        }
        let rule = rule_map
            .get(o.key.as_str())
            .or_else(|| rule_map.get("*"))
            .ok_or_else(|| Error::KeyMismatch(format!("no tolerance rule for {:?}", o.key)))?;
        report.push(ComparisonItem::new(o.key.clone(), o.value, *pv, o.se, o.bias, **rule));
    }
    Ok(report)
}
