//! K-means, Hungarian assignment, prototype alignment and estimation of the
//! number of categories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, SdcError};
use crate::numerics::{dot, l2_normalize_rows, squared_distance, Matrix};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    /// Inertia after every assignment step, last entry == `inertia`.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.rows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn kmeans_pp_seed(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = x.row_iter().map(|r| squared_distance(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.row_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, x.row(pick)));
        }
    }
    centers
}

/// Assigns every point to its nearest center (ties to the lower index).
/// Returns the total squared distance and per-point distances.
fn assign(x: &Matrix, centers: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, r) in x.row_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.row_iter().enumerate() {
            let d = squared_distance(r, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// A cluster that loses all its points is re-seeded at the point farthest
/// from its current center.
pub fn kmeans(x: &Matrix, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<KMeansResult> {
    let n = x.rows();
    if k == 0 || k > n {
        return invalid(format!("kmeans needs 1 <= k <= n, got k = {k}, n = {n}"));
    }
    if !x.is_finite() {
        return Err(SdcError::NonFinite("kmeans input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_seed(x, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();

    for _ in 0..max_iters {
        history.push(assign(x, &centers, &mut assignments, &mut dists));

        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (i, r) in x.row_iter().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                let (far, &far_d) = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("n >= 1");
                if far_d > 0.0 {
                    shift = shift.max(squared_distance(centers.row(c), x.row(far)).sqrt());
                    centers.row_mut(c).copy_from_slice(x.row(far));
                    dists[far] = 0.0;
                }
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(squared_distance(centers.row(c), &new).sqrt());
            centers.row_mut(c).copy_from_slice(&new);
        }
        if shift < tol {
            break;
        }
    }
    let inertia = assign(x, &centers, &mut assignments, &mut dists);
    history.push(inertia);
    Ok(KMeansResult {
        centers,
        assignments,
        inertia,
        inertia_history: history,
    })
}

/// A row-to-column matching: row `i` goes to column `mapping[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost matching of every row to a distinct column.
///
/// Square inputs yield a perfect matching. Inputs with fewer rows than
/// columns behave as if padded with constant rows, which leaves the optimal
/// matching of the real rows unchanged. Shortest augmenting paths with
/// potentials, `O(rows² · cols)`.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n > m {
        return invalid(format!("hungarian needs rows <= cols, got {n}x{m}"));
    }
    if !cost.is_finite() {
        return Err(SdcError::NonFinite("hungarian cost matrix".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            mapping[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = mapping.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(Assignment { mapping, total_cost })
}

/// Orders K cluster centers so that the first M line up with the labeled
/// class centroids.
///
/// Matching maximizes total cosine similarity. Matched centers take
/// positions `0..M` in centroid order; the rest follow in ascending
/// original index. All returned rows are unit length.
pub fn align_prototypes(centers: &Matrix, labeled_centroids: &Matrix) -> Result<Matrix> {
    let k = centers.rows();
    let m = labeled_centroids.rows();
    if m > k {
        return invalid(format!("cannot align {m} labeled centroids to {k} centers"));
    }
    let centers = l2_normalize_rows(centers)?;
    if m == 0 {
        return Ok(centers);
    }
    if labeled_centroids.cols() != centers.cols() {
        return Err(SdcError::DimensionMismatch {
            expected: centers.cols(),
            got: labeled_centroids.cols(),
        });
    }
    let centroids = l2_normalize_rows(labeled_centroids)?;
    let mut cost = Matrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            cost[(i, j)] = 1.0 - dot(centroids.row(i), centers.row(j));
        }
    }
    let matched = hungarian(&cost)?.mapping;
    let mut taken = vec![false; k];
    let mut order = Vec::with_capacity(k);
    for &j in &matched {
        taken[j] = true;
        order.push(j);
    }
    order.extend((0..k).filter(|&j| !taken[j]));
    Ok(centers.select_rows(&order))
}

/// Two clusters are treated as fragments of one category when their
/// centers are closer than this many pooled standard deviations, measured
/// along the line joining them. A Gaussian split in two gives about 2.6;
/// distinct categories at separation 6 give at least 5.
pub const FRAGMENT_MERGE_RATIO: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KEstimate {
    pub estimate: usize,
    /// Size of every consolidated group before dropping.
    pub group_sizes: Vec<usize>,
    pub threshold: f64,
}

/// Estimates the number of categories by over-clustering and dropping
/// small clusters.
///
/// Runs k-means with `k_max` clusters, consolidates fragments of the same
/// dense region (see [`FRAGMENT_MERGE_RATIO`]), then counts the groups of
/// at least `drop_ratio · n / k_max` points.
pub fn estimate_k(x: &Matrix, k_max: usize, drop_ratio: f64, seed: u64) -> Result<usize> {
    estimate_k_detailed(x, k_max, drop_ratio, seed).map(|e| e.estimate)
}

pub fn estimate_k_detailed(x: &Matrix, k_max: usize, drop_ratio: f64, seed: u64) -> Result<KEstimate> {
    if !(drop_ratio > 0.0 && drop_ratio < 1.0) {
        return invalid("drop_ratio must lie in (0, 1)");
    }
    if k_max > x.rows() {
        return invalid(format!("k_max {k_max} exceeds the {} points", x.rows()));
    }
    let km = kmeans(x, k_max, 300, 1e-8, seed)?;
    let sizes = km.cluster_sizes();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_max];
    for (i, &a) in km.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut parent: Vec<usize> = (0..k_max).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..k_max {
        for b in a + 1..k_max {
            if sizes[a] == 0 || sizes[b] == 0 {
                continue;
            }
            if are_fragments(x, &km.centers, a, b, &members[a], &members[b]) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[rb] = ra;
                }
            }
        }
    }
    let mut group_sizes = vec![0usize; k_max];
    for c in 0..k_max {
        let root = find(&mut parent, c);
        group_sizes[root] += sizes[c];
    }
    let group_sizes: Vec<usize> = group_sizes.into_iter().filter(|&s| s > 0).collect();
    let threshold = drop_ratio * x.rows() as f64 / k_max as f64;
    let estimate = group_sizes.iter().filter(|&&s| s as f64 >= threshold).count();
    if estimate == 0 {
        return invalid("every cluster was dropped; lower drop_ratio or k_max");
    }
    Ok(KEstimate {
        estimate,
        group_sizes,
        threshold,
    })
}

fn are_fragments(x: &Matrix, centers: &Matrix, a: usize, b: usize, ma: &[usize], mb: &[usize]) -> bool {
    let ca = centers.row(a);
    let cb = centers.row(b);
    let dir: Vec<f64> = cb.iter().zip(ca).map(|(p, q)| p - q).collect();
    let dist = dot(&dir, &dir).sqrt();
    if dist == 0.0 {
        return true;
    }
    let spread = |idx: &[usize], c: &[f64]| -> f64 {
        idx.iter()
            .map(|&i| {
                let p: f64 = x
                    .row(i)
                    .iter()
                    .zip(c)
                    .zip(&dir)
                    .map(|((v, m), d)| (v - m) * d)
                    .sum::<f64>()
                    / dist;
                p * p
            })
            .sum()
    };
    let pooled = ((spread(ma, ca) + spread(mb, cb)) / (ma.len() + mb.len()) as f64).sqrt();
    dist < FRAGMENT_MERGE_RATIO * pooled
}
