//! Correlation statistics and the meta-evaluation harness.
//!
//! Coefficients are generic over the scalar type (`f32`/`f64` via
//! `num_traits::Float`); the crate-root alias [`crate::Score`] fixes `f64` for
//! the pipeline. Undefined coefficients (zero variance, all pairs tied) are a
//! first-class `None`, never silently 0.

use std::collections::BTreeMap;
use std::path::Path;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Pearson,
    Spearman,
    KendallTauB,
}

impl CoefficientKind {
    pub const ALL: [CoefficientKind; 3] = [
        CoefficientKind::Pearson,
        CoefficientKind::Spearman,
        CoefficientKind::KendallTauB,
    ];
}

fn check_inputs<T: Float>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "correlation inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::Data(format!(
            "correlation needs at least 3 paired values, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("correlation input contains a non-finite value".into()));
    }
    Ok(())
}

/// Sample Pearson coefficient; `None` when either vector has zero variance.
pub fn pearson<T: Float>(a: &[T], b: &[T]) -> Result<Option<T>> {
    check_inputs(a, b)?;
    Ok(pearson_unchecked(a, b))
}

fn pearson_unchecked<T: Float>(a: &[T], b: &[T]) -> Option<T> {
    let n = T::from(a.len()).expect("usize fits in float");
    let mean = |v: &[T]| v.iter().fold(T::zero(), |s, &x| s + x) / n;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = T::zero();
    let mut va = T::zero();
    let mut vb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov = cov + dx * dy;
        va = va + dx * dx;
        vb = vb + dy * dy;
    }
    if va == T::zero() || vb == T::zero() {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Average ranks, ties sharing the mean of their rank positions (midranks).
fn midranks<T: Float>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![T::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share the midrank ((i+1)+(j))/2
        let rank = T::from(i + 1 + j).expect("usize fits in float") / T::from(2).unwrap();
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rho: Pearson over midranks; `None` when either side is constant.
pub fn spearman<T: Float>(a: &[T], b: &[T]) -> Result<Option<T>> {
    check_inputs(a, b)?;
    Ok(pearson_unchecked(&midranks(a), &midranks(b)))
}

/// Merge sort counting strict inversions (left value > right value).
fn merge_count<T: Float>(v: &mut [T]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inversions = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inversions += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    inversions
}

/// Kendall tau-b via a single sort plus inversion counting (O(n log n)).
///
/// tau_b = (C - D) / sqrt((C + D + T_a)(C + D + T_b)) where T_a / T_b count
/// pairs tied only in a / only in b; pairs tied in both enter neither term.
/// `None` when all pairs are tied on either side.
pub fn kendall_tau_b<T: Float>(a: &[T], b: &[T]) -> Result<Option<T>> {
    check_inputs(a, b)?;
    Ok(kendall_unchecked(a, b))
}

fn kendall_unchecked<T: Float>(a: &[T], b: &[T]) -> Option<T> {
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i].partial_cmp(&a[j])
            .expect("finite values")
            .then(b[i].partial_cmp(&b[j]).expect("finite values"))
    });
    let pairs = |run: u64| run * run.saturating_sub(1) / 2;
    let total = pairs(n as u64);
    // Runs of equal a give ties_a; runs of equal (a, b) inside them give ties_both.
    let mut ties_a = 0u64;
    let mut ties_both = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && a[order[j]] == a[order[i]] {
            j += 1;
        }
        ties_a += pairs((j - i) as u64);
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && b[order[m]] == b[order[k]] {
                m += 1;
            }
            ties_both += pairs((m - k) as u64);
            k = m;
        }
        i = j;
    }
    // With rows sorted by (a, b), discordant pairs are exactly the strict
    // inversions of the b sequence.
    let mut b_seq: Vec<T> = order.iter().map(|&i| b[i]).collect();
    let discordant = merge_count(&mut b_seq);
    let mut ties_b = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && b_seq[j] == b_seq[i] {
            j += 1;
        }
        ties_b += pairs((j - i) as u64);
        i = j;
    }
    let denom_a = total - ties_a; // = C + D + T_b
    let denom_b = total - ties_b; // = C + D + T_a
    if denom_a == 0 || denom_b == 0 {
        return None;
    }
    let concordant_minus_discordant =
        total as i128 - ties_a as i128 - ties_b as i128 + ties_both as i128 - 2 * discordant as i128;
    let numerator = T::from(concordant_minus_discordant).expect("pair count fits in float");
    let denominator = (T::from(denom_a).unwrap() * T::from(denom_b).unwrap()).sqrt();
    Some(numerator / denominator)
}

/// Q = pearson + spearman + kendall_tau_b; `None` when any component is undefined.
pub fn q_score<T: Float>(a: &[T], b: &[T]) -> Result<Option<T>> {
    check_inputs(a, b)?;
    Ok(q_unchecked(a, b))
}

fn q_unchecked<T: Float>(a: &[T], b: &[T]) -> Option<T> {
    let g = pearson_unchecked(a, b)?;
    let r = pearson_unchecked(&midranks(a), &midranks(b))?;
    let t = kendall_unchecked(a, b)?;
    Some(g + r + t)
}

fn coefficient<T: Float>(kind: CoefficientKind, a: &[T], b: &[T]) -> Option<T> {
    match kind {
        CoefficientKind::Pearson => pearson_unchecked(a, b),
        CoefficientKind::Spearman => pearson_unchecked(&midranks(a), &midranks(b)),
        CoefficientKind::KendallTauB => kendall_unchecked(a, b),
    }
}

/// Two-sided permutation p-value with +1 smoothing:
/// p = (1 + #{|coef(perm)| >= |coef(observed)|}) / (permutations + 1).
///
/// Replicates are seeded independently, so the parallel reduction is
/// order-independent. `None` when the observed coefficient is undefined.
pub fn p_value<T: Float + Send + Sync>(
    kind: CoefficientKind,
    a: &[T],
    b: &[T],
    permutations: usize,
    seed_value: u64,
) -> Result<Option<f64>> {
    check_inputs(a, b)?;
    if permutations < 1000 {
        return Err(Error::Config(format!(
            "permutation test needs at least 1000 permutations, got {permutations}"
        )));
    }
    let observed = match coefficient(kind, a, b) {
        Some(c) => c.abs(),
        None => return Ok(None),
    };
    let mut master = seed::stream_rng(seed_value, "stats/permutation");
    let replicate_seeds: Vec<u64> = (0..permutations)
        .map(|_| rand::Rng::gen::<u64>(&mut master))
        .collect();
    let at_least_as_extreme = replicate_seeds
        .par_iter()
        .filter(|&&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut permuted = b.to_vec();
            seed::shuffle(&mut permuted, &mut rng);
            // A permuted multiset keeps its variance, so the replicate
            // coefficient stays defined; treat the impossible case as extreme.
            match coefficient(kind, a, &permuted) {
                Some(c) => c.abs() >= observed,
                None => true,
            }
        })
        .count();
    Ok(Some((1 + at_least_as_extreme) as f64 / (permutations + 1) as f64))
}

/// Correlation of an evaluator's predictions against human judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau_b: Option<f64>,
    /// Sum of the three coefficients; `None` when any is undefined.
    pub q: Option<f64>,
    pub p_pearson: Option<f64>,
    pub p_spearman: Option<f64>,
    pub p_kendall_tau_b: Option<f64>,
    /// Number of aligned (prediction, human) pairs.
    pub n: usize,
    /// Dataset instances without a prediction.
    pub excluded: usize,
}

/// Aligns predictions with human scores by instance id and computes all
/// coefficients, Q, and permutation p-values.
///
/// Prediction ids must be a subset of dataset ids; instances without a
/// prediction are counted in `excluded`. The aligned overlap must be >= 3.
pub fn meta_evaluate(
    predictions: &BTreeMap<String, f64>,
    human: &Dataset,
    permutations: usize,
    seed_value: u64,
) -> Result<CorrelationSummary> {
    for id in predictions.keys() {
        if !human.instances.iter().any(|i| &i.id == id) {
            return Err(Error::Data(format!(
                "prediction id '{id}' does not appear in the dataset"
            )));
        }
    }
    let mut predicted = Vec::new();
    let mut judged = Vec::new();
    for inst in &human.instances {
        if let Some(&p) = predictions.get(&inst.id) {
            if !p.is_finite() {
                return Err(Error::Data(format!("prediction for '{}' is not finite", inst.id)));
            }
            predicted.push(p);
            judged.push(inst.human_score);
        }
    }
    if predicted.len() < 3 {
        return Err(Error::Data(format!(
            "insufficient overlap between predictions and dataset ({} aligned pairs, need >= 3)",
            predicted.len()
        )));
    }
    let g = pearson_unchecked(&predicted, &judged);
    let r = pearson_unchecked(&midranks(&predicted), &midranks(&judged));
    let t = kendall_unchecked(&predicted, &judged);
    let q = match (g, r, t) {
        (Some(g), Some(r), Some(t)) => Some(g + r + t),
        _ => None,
    };
    Ok(CorrelationSummary {
        pearson: g,
        spearman: r,
        kendall_tau_b: t,
        q,
        p_pearson: p_value(CoefficientKind::Pearson, &predicted, &judged, permutations, seed_value)?,
        p_spearman: p_value(CoefficientKind::Spearman, &predicted, &judged, permutations, seed_value)?,
        p_kendall_tau_b: p_value(
            CoefficientKind::KendallTauB,
            &predicted,
            &judged,
            permutations,
            seed_value,
        )?,
        n: predicted.len(),
        excluded: human.len() - predicted.len(),
    })
}

/// Reads a prediction file: CSV with header `id,score`.
pub fn read_predictions_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("{}: cannot open: {e}", path.display())),
        _ => Error::Data(format!("{}: {e}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "score" {
        return Err(Error::Data(format!(
            "{}: expected CSV header 'id,score', got '{}'",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut predictions = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
        let id = record
            .get(0)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Data(format!("{}:{line}: missing id", path.display())))?;
        let score: f64 = record
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("{}:{line}: invalid score", path.display())))?;
        if !score.is_finite() {
            return Err(Error::Data(format!("{}:{line}: non-finite score", path.display())));
        }
        if predictions.insert(id.to_string(), score).is_some() {
            return Err(Error::Data(format!("{}:{line}: duplicate id '{id}'", path.display())));
        }
    }
    Ok(predictions)
}

/// Writes predictions in the same CSV layout `read_predictions_csv` accepts.
pub fn write_predictions_csv(predictions: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: cannot create: {e}", path.display())))?;
    writer
        .write_record(["id", "score"])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (id, score) in predictions {
        writer
            .write_record([id.as_str(), &score.to_string()])
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
