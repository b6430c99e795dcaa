//! Static candidate filters and candidate-set recall/precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ne_index::Candidate;

/// Comparison slack for similarity thresholds computed from sums.
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum FilterSpec {
    TopK { k: usize },
    Threshold { theta: f64 },
    Std { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    TopK,
    Threshold,
    Std,
}

impl FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Self::TopK),
            "threshold" => Ok(Self::Threshold),
            "std" => Ok(Self::Std),
            other => Err(Error::FilterSpec(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TopK => "topk",
            Self::Threshold => "threshold",
            Self::Std => "std",
        })
    }
}

impl FilterSpec {
    /// Assembles a spec from loose parameters; exactly the parameter the
    /// method uses must be supplied.
    pub fn from_parts(method: FilterMethod, k: Option<usize>, theta: Option<f64>, sigma: Option<f64>) -> Result<Self> {
        let extra = |name: &str| Error::FilterSpec(format!("{name} is not used by method {method}"));
        let missing = |name: &str| Error::FilterSpec(format!("method {method} requires {name}"));
        match method {
            FilterMethod::TopK => {
                if theta.is_some() {
                    return Err(extra("theta"));
                }
                if sigma.is_some() {
                    return Err(extra("sigma"));
                }
                let k = k.ok_or_else(|| missing("k"))?;
                if k == 0 {
                    return Err(Error::FilterSpec("k must be positive".into()));
                }
                Ok(Self::TopK { k })
            }
            FilterMethod::Threshold => {
                if k.is_some() {
                    return Err(extra("k"));
                }
                if sigma.is_some() {
                    return Err(extra("sigma"));
                }
                let theta = theta.ok_or_else(|| missing("theta"))?;
                if !theta.is_finite() || theta < 0.0 {
                    return Err(Error::FilterSpec(format!("theta {theta} must be a nonnegative number")));
                }
                Ok(Self::Threshold { theta })
            }
            FilterMethod::Std => {
                if k.is_some() {
                    return Err(extra("k"));
                }
                if theta.is_some() {
                    return Err(extra("theta"));
                }
                let sigma = sigma.ok_or_else(|| missing("sigma"))?;
                if !sigma.is_finite() || sigma < 0.0 {
                    return Err(Error::FilterSpec(format!("sigma {sigma} must be nonnegative")));
                }
                Ok(Self::Std { sigma })
            }
        }
    }

    pub fn apply(&self, cands: &[Candidate]) -> Vec<Candidate> {
        match *self {
            Self::TopK { k } => filter_topk(cands, k),
            Self::Threshold { theta } => filter_threshold(cands, theta),
            Self::Std { sigma } => filter_std(cands, sigma),
        }
    }
}

/// First `k` candidates of a list already sorted best first.
pub fn filter_topk(cands: &[Candidate], k: usize) -> Vec<Candidate> {
    cands[..k.min(cands.len())].to_vec()
}

/// Candidates with similarity at least `theta`.
pub fn filter_threshold(cands: &[Candidate], theta: f64) -> Vec<Candidate> {
    cands.iter().filter(|c| c.ps >= theta).cloned().collect()
}

/// Keeps the upper tail `ps >= mean + sigma * std` (population standard
/// deviation). Falls back to the single best candidate if nothing passes.
pub fn filter_std(cands: &[Candidate], sigma: f64) -> Vec<Candidate> {
    if cands.is_empty() {
        return Vec::new();
    }
    let n = cands.len() as f64;
    let mean = cands.iter().map(|c| c.ps).sum::<f64>() / n;
    let var = cands.iter().map(|c| (c.ps - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if cands.iter().all(|c| c.ps == cands[0].ps) {
        return cands.to_vec();
    }
    let cut = mean + sigma * std;
    let kept: Vec<Candidate> = cands.iter().filter(|c| c.ps >= cut - EPS).cloned().collect();
    if kept.is_empty() {
        let best = cands
            .iter()
            .min_by(|a, b| crate::ne_index::rank_order(a.ps, a.surface(), b.ps, b.surface()))
            .expect("nonempty");
        return vec![best.clone()];
    }
    kept
}

fn same_entity(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    norm(a) == norm(b)
}

/// Micro-averaged candidate recall and precision.
///
/// Recall is the share of samples whose surviving set contains a gold
/// entity; precision is the share of surviving candidates (counted per
/// occurrence) that equal a gold entity. Surfaces compare
/// case-insensitively.
pub fn candidate_recall_precision<S: AsRef<str>, G: AsRef<str>>(surviving: &[Vec<S>], gold: &[Vec<G>]) -> (f64, f64) {
    assert_eq!(surviving.len(), gold.len(), "one gold set per sample");
    let mut hits = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (kept, gold) in surviving.iter().zip(gold) {
        let is_gold = |s: &S| gold.iter().any(|g| same_entity(s.as_ref(), g.as_ref()));
        let matching = kept.iter().filter(|s| is_gold(s)).count();
        if matching > 0 {
            hits += 1;
        }
        correct += matching;
        total += kept.len();
    }
    let recall = if surviving.is_empty() { 0.0 } else { hits as f64 / surviving.len() as f64 };
    let precision = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (recall, precision)
}
