//! Accuracy metrics for category discovery.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationState;
use crate::clustering::hungarian;
use crate::data::LabelSpace;
use crate::error::{invalid, Result, SdcError};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Per-instance argmax of the learned classifier.
    #[default]
    Classifier,
    /// KMeans over the whole test batch, matched to categories afterwards.
    Clustering,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Classifier => "classifier",
            InferenceMode::Clustering => "clustering",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(InferenceMode::Classifier),
            "clustering" => Ok(InferenceMode::Clustering),
            other => Err(SdcError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Error counts split by which side (known or novel) the truth and the
/// mapped prediction fall on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Quadrants {
    /// Known instance given the wrong known category.
    pub kk: usize,
    /// Known instance sent to a novel category.
    pub kn: usize,
    /// Novel instance absorbed by a known category.
    pub nk: usize,
    /// Novel instance given the wrong novel category.
    pub nn: usize,
}

impl Quadrants {
    pub fn total(&self) -> usize {
        self.kk + self.kn + self.nk + self.nn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_known: f64,
    pub acc_novel: f64,
    pub h_score: f64,
    pub quadrants: Quadrants,
    pub correct_known: usize,
    pub correct_novel: usize,
    pub n_test: usize,
    /// Prediction id → category id.
    pub mapping: Vec<usize>,
    pub mode: InferenceMode,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    h_score: f64,
    known: f64,
    novel: f64,
    quadrants: &'a Quadrants,
    n_test: usize,
    mode: InferenceMode,
}

impl MetricsReport {
    pub fn accuracy(&self) -> f64 {
        100.0 * (self.correct_known + self.correct_novel) as f64 / self.n_test as f64
    }

    /// Single-line JSON with the headline numbers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ReportJson {
            h_score: self.h_score,
            known: self.acc_known,
            novel: self.acc_novel,
            quadrants: &self.quadrants,
            n_test: self.n_test,
            mode: self.mode,
        })
        .expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode      {}", self.mode.as_str())?;
        writeln!(f, "n_test    {}", self.n_test)?;
        writeln!(f, "known     {:>6.2}", self.acc_known)?;
        writeln!(f, "novel     {:>6.2}", self.acc_novel)?;
        writeln!(f, "h-score   {:>6.2}", self.h_score)?;
        let q = &self.quadrants;
        write!(f, "errors    kk {}  kn {}  nk {}  nn {}", q.kk, q.kn, q.nk, q.nn)
    }
}

/// Harmonic mean of two accuracies, 0 when both are 0.
pub fn h_score(acc_known: f64, acc_novel: f64) -> f64 {
    let s = acc_known + acc_novel;
    if s == 0.0 {
        0.0
    } else {
        2.0 * acc_known * acc_novel / s
    }
}

/// Accuracy-maximizing one-to-one map from prediction ids to categories.
///
/// Prediction ids may exceed `k`; the contingency table is padded to a
/// square so that surplus clusters land on phantom categories `≥ k`, which
/// always count as errors.
pub fn hungarian_map(preds: &[usize], gts: &[usize], k: usize) -> Result<Vec<usize>> {
    if preds.len() != gts.len() {
        return Err(SdcError::DimensionMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    if let Some(&g) = gts.iter().find(|&&g| g >= k) {
        return Err(SdcError::LabelRange {
            label: g as i64,
            total: k,
        });
    }
    let size = preds.iter().map(|&p| p + 1).max().unwrap_or(0).max(k);
    if size == 0 {
        return Ok(Vec::new());
    }
    let mut counts = vec![0usize; size * size];
    for (&p, &g) in preds.iter().zip(gts) {
        counts[p * size + g] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0) as f64;
    let cost = Matrix::from_vec(size, size, counts.iter().map(|&c| top - c as f64).collect())?;
    Ok(hungarian(&cost)?.mapping)
}

/// Hungarian-matched accuracy in percent, overall and on rows whose truth
/// satisfies `focus`.
pub fn clustering_accuracy(
    preds: &[usize],
    gts: &[usize],
    k: usize,
    focus: impl Fn(usize) -> bool,
) -> Result<(f64, f64)> {
    let mapping = hungarian_map(preds, gts, k)?;
    let (mut hit, mut focus_hit, mut focus_n) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(gts) {
        let ok = mapping[p] == g;
        hit += ok as usize;
        if focus(g) {
            focus_n += 1;
            focus_hit += ok as usize;
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok((pct(hit, gts.len()), pct(focus_hit, focus_n)))
}

/// Known/novel accuracy, H-score and error quadrants under `mapping`.
pub fn compute_metrics(
    preds: &[usize],
    gts: &[Option<usize>],
    space: LabelSpace,
    mapping: &[usize],
    mode: InferenceMode,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(SdcError::DimensionMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(SdcError::NoInstances);
    }
    let k = space.total();
    let mut seen = vec![false; mapping.len().max(k)];
    for &c in mapping {
        if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
            return invalid("mapping is not a bijection");
        }
    }
    let mut q = Quadrants::default();
    let (mut ck, mut cn, mut nk, mut nn) = (0, 0, 0, 0);
    for (i, (&p, g)) in preds.iter().zip(gts).enumerate() {
        let g = g.ok_or_else(|| SdcError::InvalidInput(format!("test row {i} has no ground truth")))?;
        if g >= k {
            return Err(SdcError::LabelRange {
                label: g as i64,
                total: k,
            });
        }
        let Some(&mapped) = mapping.get(p) else {
            return invalid(format!("prediction {p} outside mapping of size {}", mapping.len()));
        };
        // phantom categories (>= K) only arise from surplus clusters; treat
        // them as novel-side predictions
        let pred_known = space.is_known(mapped) && mapped < k;
        if space.is_known(g) {
            nk += 1;
            match (mapped == g, pred_known) {
                (true, _) => ck += 1,
                (false, true) => q.kk += 1,
                (false, false) => q.kn += 1,
            }
        } else {
            nn += 1;
            match (mapped == g, pred_known) {
                (true, _) => cn += 1,
                (false, true) => q.nk += 1,
                (false, false) => q.nn += 1,
            }
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let acc_known = pct(ck, nk);
    let acc_novel = pct(cn, nn);
    Ok(MetricsReport {
        acc_known,
        acc_novel,
        h_score: h_score(acc_known, acc_novel),
        quadrants: q,
        correct_known: ck,
        correct_novel: cn,
        n_test: preds.len(),
        mapping: mapping.to_vec(),
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean_known: f64,
    pub std_known: f64,
    pub mean_novel: f64,
    pub std_novel: f64,
    /// `mean_novel - mean_known`.
    pub gap: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Biased-model entropy statistics grouped by the hidden truth.
pub fn entropy_report(state: &CalibrationState, gts: &[usize], space: LabelSpace) -> Result<EntropySummary> {
    entropy_summary(&state.entropies, gts, space)
}

/// [`entropy_report`] on a plain entropy vector.
pub fn entropy_summary(entropies: &[f64], gts: &[usize], space: LabelSpace) -> Result<EntropySummary> {
    if entropies.len() != gts.len() {
        return Err(SdcError::DimensionMismatch {
            expected: entropies.len(),
            got: gts.len(),
        });
    }
    let (known, novel): (Vec<(f64, usize)>, Vec<(f64, usize)>) = entropies
        .iter()
        .copied()
        .zip(gts.iter().copied())
        .partition(|&(_, g)| space.is_known(g));
    if known.is_empty() || novel.is_empty() {
        return invalid("entropy report needs rows from both known and novel categories");
    }
    let (mean_known, std_known) = mean_std(&known.iter().map(|p| p.0).collect::<Vec<_>>());
    let (mean_novel, std_novel) = mean_std(&novel.iter().map(|p| p.0).collect::<Vec<_>>());
    Ok(EntropySummary {
        mean_known,
        std_known,
        mean_novel,
        std_novel,
        gap: mean_novel - mean_known,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    #[test]
    fn published_h_scores() {
        assert_eq!(round2(h_score(82.16, 61.14)), 70.11);
        assert_eq!(round2(h_score(82.08, 77.66)), 79.81);
        assert_eq!(round2(h_score(94.12, 82.02)), 87.65);
        assert_eq!(h_score(0.0, 0.0), 0.0);
        assert!((h_score(63.5, 63.5) - 63.5).abs() < 1e-12);
    }

    #[test]
    fn contingency_example() {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        // cluster 1 holds category 2, cluster 2 holds category 1
        for (p, g) in [(0, 0), (1, 2), (2, 1)] {
            preds.extend([p; 5]);
            gts.extend([g; 5]);
        }
        assert_eq!(hungarian_map(&preds, &gts, 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(hungarian_map(&gts, &gts, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn recovers_permutation() {
        let perm = [3, 0, 4, 1, 2];
        let gts: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let preds: Vec<usize> = gts.iter().map(|&g| perm[g]).collect();
        let map = hungarian_map(&preds, &gts, 5).unwrap();
        for g in 0..5 {
            assert_eq!(map[perm[g]], g);
        }
    }

    #[test]
    fn surplus_clusters_are_errors() {
        let gts = vec![0, 0, 1, 1];
        let preds = vec![0, 2, 1, 1];
        let map = hungarian_map(&preds, &gts, 2).unwrap();
        assert_eq!(map.len(), 3);
        let g: Vec<_> = gts.iter().map(|&x| Some(x)).collect();
        let r = compute_metrics(&preds, &g, LabelSpace::new(1, 1), &map, InferenceMode::Clustering).unwrap();
        assert_eq!(r.correct_known + r.correct_novel, 3);
        assert_eq!(r.quadrants.kn, 1);
    }

    #[test]
    fn quadrants_classify_errors() {
        let space = LabelSpace::new(2, 2);
        let gts = [0, 0, 1, 2, 2, 3, 3, 1];
        let preds = [0, 1, 2, 2, 0, 2, 3, 1];
        let g: Vec<_> = gts.iter().map(|&x| Some(x)).collect();
        let id: Vec<usize> = (0..4).collect();
        let r = compute_metrics(&preds, &g, space, &id, InferenceMode::Classifier).unwrap();
        assert_eq!(
            r.quadrants,
            Quadrants {
                kk: 1,
                kn: 1,
                nk: 1,
                nn: 1
            }
        );
        assert_eq!(r.correct_known, 2);
        assert_eq!(r.correct_novel, 2);
        assert_eq!(r.acc_known, 50.0);
        assert_eq!(r.acc_novel, 50.0);
        assert_eq!(r.h_score, 50.0);
    }

    #[test]
    fn rejects_missing_truth_and_bad_maps() {
        let space = LabelSpace::new(1, 1);
        let id = [0, 1];
        assert!(compute_metrics(&[0], &[None], space, &id, InferenceMode::Classifier).is_err());
        assert!(compute_metrics(&[0], &[Some(0)], space, &[0, 0], InferenceMode::Classifier).is_err());
        assert!(compute_metrics(&[5], &[Some(0)], space, &id, InferenceMode::Classifier).is_err());
    }

    #[test]
    fn json_shape() {
        let g = [Some(0), Some(1)];
        let r = compute_metrics(&[0, 1], &g, LabelSpace::new(1, 1), &[0, 1], InferenceMode::Clustering).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["h_score"], 100.0);
        assert_eq!(v["mode"], "clustering");
        assert_eq!(v["quadrants"]["nk"], 0);
        assert_eq!(v["n_test"], 2);
    }

    #[test]
    fn entropy_extremes() {
        let space = LabelSpace::new(4, 2);
        let ln4 = 4f64.ln();
        let s = entropy_summary(&[ln4, ln4, ln4], &[0, 1, 5], space).unwrap();
        assert!(s.gap.abs() < 1e-12);
        assert!((s.mean_known - ln4).abs() < 1e-12);
        let s = entropy_summary(&[0.0, 0.0, ln4], &[0, 3, 4], space).unwrap();
        assert!((s.gap - ln4).abs() < 1e-12);
        assert!(entropy_summary(&[0.1], &[0], space).is_err());
    }

    proptest! {
        #[test]
        fn h_score_bounds(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let h = h_score(a, b);
            prop_assert!((h - h_score(b, a)).abs() < 1e-12);
            prop_assert!(h <= 2.0 * a.min(b) + 1e-9);
            prop_assert!(h >= a.min(b) - 1e-9);
            prop_assert!(h <= a.max(b) + 1e-9);
        }

        #[test]
        fn relabeling_predictions_keeps_accuracy(seed in 0u64..1000, n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 6;
            let gts: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
            let preds: Vec<usize> = (0..n).map(|i| (i * i + seed as usize) % k).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let relabeled: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let a = clustering_accuracy(&preds, &gts, k, |_| true).unwrap();
            let b = clustering_accuracy(&relabeled, &gts, k, |_| true).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-9);
        }

        #[test]
        fn quadrants_count_errors(seed in 0u64..1000, n in 1usize..80) {
            let space = LabelSpace::new(3, 2);
            let gts: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % 5).collect();
            let preds: Vec<usize> = (0..n).map(|i| (i * i * 7 + seed as usize) % 5).collect();
            let map = hungarian_map(&preds, &gts, 5).unwrap();
            let g: Vec<_> = gts.iter().map(|&x| Some(x)).collect();
            let r = compute_metrics(&preds, &g, space, &map, InferenceMode::Clustering).unwrap();
            let expected = (n as f64 * (1.0 - r.accuracy() / 100.0)).round() as usize;
            prop_assert_eq!(r.quadrants.total(), expected);
            prop_assert_eq!(r.quadrants.total() + r.correct_known + r.correct_novel, n);
            for v in [r.acc_known, r.acc_novel, r.h_score] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }
    }
}
