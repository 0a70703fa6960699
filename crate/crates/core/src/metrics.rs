//! Similarity (normalized Levenshtein complement) and validity (quadratic
//! weighted kappa).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordinal score on the scale `1..=k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrdinalScore {
    value: u32,
    k: u32,
}

impl OrdinalScore {
    pub fn new(value: u32, k: u32) -> Result<Self> {
        if k < 2 {
            return Err(Error::Domain(format!("ordinal scale needs k >= 2, got {k}")));
        }
        if value < 1 || value > k {
            return Err(Error::Domain(format!("score {value} outside 1..={k}")));
        }
        Ok(Self { value, k })
    }

    pub fn value(&self) -> u32 {
        self.value
    }

    pub fn k(&self) -> u32 {
        self.k
    }
}

/// Character-level edit distance (insert, delete, substitute; unit costs).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb {
                diag
            } else {
                1 + diag.min(up).min(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)` in characters; two empty strings are
/// identical (1.0).
pub fn similarity(reference: &str, output: &str) -> f64 {
    let longest = reference.chars().count().max(output.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(reference, output) as f64 / longest as f64
}

/// Quadratic weighted kappa between two equally long score lists on `1..=k`.
///
/// When the expected disagreement is zero (both lists constant and equal) the
/// result is 1.0 if every observation is on the diagonal and 0.0 otherwise.
pub fn qwk(predicted: &[u32], gold: &[u32], k: u32) -> Result<f64> {
    if predicted.len() != gold.len() || predicted.is_empty() {
        return Err(Error::Domain(format!(
            "qwk needs two non-empty lists of equal length, got {} and {}",
            predicted.len(),
            gold.len()
        )));
    }
    if k < 2 {
        return Err(Error::Domain(format!("ordinal scale needs k >= 2, got {k}")));
    }
    if let Some(bad) = predicted.iter().chain(gold).find(|&&s| s < 1 || s > k) {
        return Err(Error::Domain(format!("score {bad} outside 1..={k}")));
    }
    let k = k as usize;
    let n = predicted.len() as f64;
    let mut hist_p = vec![0.0; k];
    let mut hist_g = vec![0.0; k];
    let mut observed_w = 0.0;
    let mut off_diagonal = false;
    let denom = ((k - 1) * (k - 1)) as f64;
    for (&p, &g) in predicted.iter().zip(gold) {
        let (i, j) = (p as usize - 1, g as usize - 1);
        hist_p[i] += 1.0;
        hist_g[j] += 1.0;
        let d = i.abs_diff(j);
        off_diagonal |= d != 0;
        observed_w += (d * d) as f64 / denom;
    }
    observed_w /= n;
    let mut expected_w = 0.0;
    for (i, hp) in hist_p.iter().enumerate() {
        for (j, hg) in hist_g.iter().enumerate() {
            let d = i.abs_diff(j);
            expected_w += (d * d) as f64 / denom * (hp / n) * (hg / n);
        }
    }
    if expected_w == 0.0 {
        return Ok(if off_diagonal { 0.0 } else { 1.0 });
    }
    Ok(1.0 - observed_w / expected_w)
}

/// One output to be scored: strings plus optional ordinal scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub reference: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion: String,
    pub n: usize,
    pub similarity: f64,
    pub qwk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub skipped: usize,
    pub mean_similarity: f64,
    /// Macro average of per-criterion QWK; absent when nothing was scored.
    pub qwk: Option<f64>,
    pub per_criterion: Vec<CriterionReport>,
}

pub const DEFAULT_CRITERION: &str = "default";

/// Aggregate scored outputs.
///
/// With `require_scores`, records lacking a target or achieved score are
/// skipped (and counted); QWK is computed per criterion over all
/// (target, achieved) pairs and then averaged across criteria. Without it,
/// every record contributes to similarity and QWK is only reported when all
/// records carry scores.
pub fn aggregate(records: &[ScoredOutput], k: u32, require_scores: bool) -> Result<EvalReport> {
    let mut groups: BTreeMap<&str, Vec<&ScoredOutput>> = BTreeMap::new();
    let mut skipped = 0;
    for r in records {
        let scored = r.target.is_some() && r.achieved.is_some();
        if require_scores && !scored {
            skipped += 1;
            log::warn!("skipping record without target/achieved scores");
            continue;
        }
        groups
            .entry(r.criterion.as_deref().unwrap_or(DEFAULT_CRITERION))
            .or_default()
            .push(r);
    }
    let n: usize = groups.values().map(Vec::len).sum();
    let mut sim_total = 0.0;
    let mut per_criterion = Vec::new();
    let mut all_scored = n > 0;
    for (criterion, rs) in &groups {
        let sims: f64 = rs.iter().map(|r| similarity(&r.reference, &r.output)).sum();
        sim_total += sims;
        let pairs: Vec<(u32, u32)> = rs
            .iter()
            .filter_map(|r| Some((r.target?, r.achieved?)))
            .collect();
        if pairs.len() != rs.len() {
            all_scored = false;
            continue;
        }
        let (gold, pred): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        per_criterion.push(CriterionReport {
            criterion: criterion.to_string(),
            n: rs.len(),
            similarity: sims / rs.len() as f64,
            qwk: qwk(&pred, &gold, k)?,
        });
    }
    let qwk = if all_scored {
        Some(per_criterion.iter().map(|c| c.qwk).sum::<f64>() / per_criterion.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        n,
        skipped,
        mean_similarity: if n == 0 { 0.0 } else { sim_total / n as f64 },
        qwk,
        per_criterion,
    })
}
