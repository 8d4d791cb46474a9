//! Pseudo-label prediction on the unlabeled target set.
//!
//! Pipeline: k-reciprocal re-ranked distances, hierarchical density-based
//! clustering on that distance, then a distance threshold inside each cluster
//! to keep only confident positive pairs.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::scalar::Scalar;

/// Symmetric, nonnegative, zero-diagonal distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T>(Matrix<T>);

impl<T: Scalar> DistanceMatrix<T> {
    /// Validates shape, diagonal, sign and symmetry (within 1e-9).
    pub fn new(m: Matrix<T>) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::ShapeMismatch(format!(
                "distance matrix must be square, got {:?}",
                m.shape()
            )));
        }
        for i in 0..n {
            if m[(i, i)] != T::zero() {
                return Err(Error::Format(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let d = m[(i, j)];
                if !d.is_finite() || d < T::zero() {
                    return Err(Error::Format(format!("invalid distance at ({i},{j})")));
                }
                if (d - m[(j, i)]).abs().as_f64() > 1e-9 {
                    return Err(Error::Format(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self(m))
    }

    /// Plain Euclidean distances between rows.
    pub fn euclidean(features: &Matrix<T>) -> Self {
        let n = features.rows();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let d = euclidean(features.row(i), features.row(j));
                m[(i, j)] = d;
                m[(j, i)] = d;
            }
        }
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Indices whose distance from `i` is within the `(k+1)`-th smallest entry of
/// row `i` (the point itself counts). Ties at the boundary are all included,
/// so exact duplicates always receive identical neighborhoods. Sorted by index.
fn neighbor_set<T: Scalar>(dist: &Matrix<T>, order: &[usize], i: usize, k: usize) -> Vec<usize> {
    let n = order.len();
    let cut = dist[(i, order[k.min(n - 1)])];
    let mut out: Vec<usize> = order
        .iter()
        .copied()
        .take_while(|&j| dist[(i, j)] <= cut)
        .collect();
    out.sort_unstable();
    out
}

fn contains(sorted: &[usize], x: usize) -> bool {
    sorted.binary_search(&x).is_ok()
}

struct Neighborhoods<'a, T> {
    dist: &'a Matrix<T>,
    order: Vec<Vec<usize>>,
}

impl<'a, T: Scalar> Neighborhoods<'a, T> {
    fn new(dist: &'a Matrix<T>) -> Self {
        let n = dist.rows();
        let order = (0..n)
            .map(|i| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| {
                    dist[(i, a)]
                        .partial_cmp(&dist[(i, b)])
                        .expect("finite distances")
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        Self { dist, order }
    }

    fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        neighbor_set(self.dist, &self.order[i], i, k)
    }

    /// `{ j in knn(i, k) : i in knn(j, k) }`.
    fn reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        self.knn(i, k)
            .into_iter()
            .filter(|&j| contains(&self.knn(j, k), i))
            .collect()
    }
}

/// Sparse row: `(column, weight)` sorted by column.
type SparseRow<T> = Vec<(usize, T)>;

/// Re-ranked distance: `(1 - lambda_rr) * jaccard + lambda_rr * euclidean`.
///
/// Rows of `features` are expected to be unit vectors. The Jaccard term
/// compares Gaussian-weighted k-reciprocal neighborhoods (expanded by the
/// two-thirds overlap rule, then averaged over the `k2` nearest neighbors).
pub fn k_reciprocal_distance<T: Scalar>(
    features: &Matrix<T>,
    k1: usize,
    k2: usize,
    lambda_rr: T,
) -> Result<DistanceMatrix<T>> {
    let n = features.rows();
    if n < 2 || k2 < 1 || k2 > k1 || k1 >= n {
        return Err(Error::InvalidK { k1, k2, n });
    }
    if !(T::zero()..=T::one()).contains(&lambda_rr) {
        return Err(Error::InvalidConfig(format!(
            "lambda_rr must lie in [0, 1], got {lambda_rr}"
        )));
    }
    let original = DistanceMatrix::euclidean(features).0;
    let hood = Neighborhoods::new(&original);
    let half = k1.div_ceil(2).max(1);

    let mut v: Vec<SparseRow<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = hood.reciprocal(i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = hood.reciprocal(c, half);
            let overlap = cand.iter().filter(|&&x| contains(&base, x)).count();
            if 3 * overlap > 2 * cand.len() {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let w: Vec<T> = expanded
            .iter()
            .map(|&j| {
                let d = original[(i, j)];
                (-(d * d)).exp()
            })
            .collect();
        let total: T = w.iter().copied().sum();
        v.push(expanded.into_iter().zip(w.into_iter().map(|x| x / total)).collect());
    }

    if k2 > 1 {
        let mut scratch = vec![T::zero(); n];
        let mut touched = vec![false; n];
        let mut qe = Vec::with_capacity(n);
        for i in 0..n {
            let nb = hood.knn(i, k2 - 1);
            for &j in &nb {
                for &(c, x) in &v[j] {
                    scratch[c] += x;
                    touched[c] = true;
                }
            }
            let count = T::count(nb.len());
            let mut row = Vec::new();
            for c in 0..n {
                if touched[c] {
                    row.push((c, scratch[c] / count));
                    scratch[c] = T::zero();
                    touched[c] = false;
                }
            }
            qe.push(row);
        }
        v = qe;
    }

    // Inverted index: for each column, the rows holding a nonzero weight there.
    let mut inv: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate() {
        for &(c, x) in row {
            if x != T::zero() {
                inv[c].push((r, x));
            }
        }
    }

    let mass: Vec<T> = v.iter().map(|row| row.iter().map(|&(_, x)| x).sum()).collect();
    let one = T::one();
    let mut out = Matrix::zeros(n, n);
    let mut overlap = vec![T::zero(); n];
    for i in 0..n {
        overlap.iter_mut().for_each(|x| *x = T::zero());
        for &(c, xi) in &v[i] {
            if xi == T::zero() {
                continue;
            }
            for &(j, xj) in &inv[c] {
                overlap[j] += xi.min(xj);
            }
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            // 1 - Σmin / Σmax; rows carry unit mass so this is 1 - s / (2 - s).
            let s = overlap[j];
            let union = mass[i] + mass[j] - s;
            let jaccard = if union > T::zero() { (one - s / union).max(T::zero()) } else { one };
            out[(i, j)] = (one - lambda_rr) * jaccard + lambda_rr * original[(i, j)];
        }
    }
    Ok(DistanceMatrix(out))
}

/// Cluster label per sample; `-1` marks noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }
}

/// Largest lambda used for zero mutual-reachability distances.
const LAMBDA_CAP: f64 = 1e200;

fn lambda_of(d: f64) -> f64 {
    if d <= 1.0 / LAMBDA_CAP {
        LAMBDA_CAP
    } else {
        1.0 / d
    }
}

#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

/// Hierarchical density-based clustering (HDBSCAN with excess-of-mass
/// selection) on a precomputed distance matrix.
///
/// `min_samples` equals `min_cluster_size`; the core distance of a point is
/// the distance to its `min_cluster_size`-th nearest neighbor counting itself.
/// The root cluster is never selected, except that a zero-diameter input
/// with at least `min_cluster_size` points forms a single cluster.
pub fn density_cluster<T: Scalar>(dist: &DistanceMatrix<T>, min_cluster_size: usize) -> Result<ClusterAssignment> {
    if min_cluster_size < 2 {
        return Err(Error::InvalidConfig("min_cluster_size must be >= 2".into()));
    }
    let n = dist.len();
    if n < min_cluster_size || n < 2 {
        return Ok(ClusterAssignment { labels: vec![-1; n] });
    }
    let d = |i: usize, j: usize| dist.get(i, j).as_f64();

    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| d(i, j)).collect();
            let (_, kth, _) = row.select_nth_unstable_by(min_cluster_size - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect();
    let mreach = |i: usize, j: usize| d(i, j).max(core[i]).max(core[j]);

    // Prim's minimum spanning tree on the dense mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = mreach(current, j);
            if w < best[j] {
                best[j] = w;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, next_w));
        current = next;
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));

    if edges.last().is_none_or(|e| e.2 == 0.0) {
        return Ok(ClusterAssignment { labels: vec![0; n] });
    }

    // Single-linkage dendrogram; internal node ids start at n.
    let total = 2 * n - 1;
    let mut parent_uf: Vec<usize> = (0..total).collect();
    let mut size = vec![1usize; total];
    let mut children = vec![(0usize, 0usize); total];
    let mut merge_dist = vec![0.0f64; total];
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (k, &(a, b, w)) in edges.iter().enumerate() {
        let node = n + k;
        let ra = find(&mut parent_uf, a);
        let rb = find(&mut parent_uf, b);
        parent_uf[ra] = node;
        parent_uf[rb] = node;
        children[node] = (ra, rb);
        size[node] = size[ra] + size[rb];
        merge_dist[node] = w;
    }
    let root = total - 1;

    let leaves_under = |start: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(children[x].1);
                stack.push(children[x].0);
            }
        }
        out
    };

    // Condense the dendrogram. Cluster ids start at n (the root).
    let mut relabel = vec![usize::MAX; total];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut condensed: Vec<CondensedEdge> = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let (l, r) = children[node];
        let lambda = lambda_of(merge_dist[node]);
        let me = relabel[node];
        let big_l = size[l] >= min_cluster_size;
        let big_r = size[r] >= min_cluster_size;
        let fall_out = |sub: usize, condensed: &mut Vec<CondensedEdge>| {
            for p in leaves_under(sub) {
                condensed.push(CondensedEdge { parent: me, child: p, lambda, size: 1 });
            }
        };
        match (big_l, big_r) {
            (true, true) => {
                for c in [l, r] {
                    relabel[c] = next_label;
                    next_label += 1;
                    condensed.push(CondensedEdge { parent: me, child: relabel[c], lambda, size: size[c] });
                    queue.push_back(c);
                }
            }
            (false, false) => {
                fall_out(l, &mut condensed);
                fall_out(r, &mut condensed);
            }
            (true, false) => {
                relabel[l] = me;
                fall_out(r, &mut condensed);
                queue.push_back(l);
            }
            (false, true) => {
                relabel[r] = me;
                fall_out(l, &mut condensed);
                queue.push_back(r);
            }
        }
    }

    let num_clusters = next_label - n;
    let mut birth = vec![0.0f64; num_clusters];
    let mut cluster_parent = vec![usize::MAX; num_clusters];
    for e in condensed.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
        cluster_parent[e.child - n] = e.parent - n;
    }
    let mut stability = vec![0.0f64; num_clusters];
    for e in &condensed {
        let c = e.parent - n;
        stability[c] += (e.lambda - birth[c]) * e.size as f64;
    }

    // Excess-of-mass selection, children before parents (children have larger ids).
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for c in 1..num_clusters {
        kids[cluster_parent[c]].push(c);
    }
    let mut selected = vec![true; num_clusters];
    selected[0] = false;
    for c in (1..num_clusters).rev() {
        let subtree: f64 = kids[c].iter().map(|&k| stability[k]).sum();
        if subtree > stability[c] {
            selected[c] = false;
            stability[c] = subtree;
        } else {
            let mut stack = kids[c].clone();
            while let Some(x) = stack.pop() {
                selected[x] = false;
                stack.extend(kids[x].iter().copied());
            }
        }
    }

    let mut point_parent = vec![0usize; n];
    for e in condensed.iter().filter(|e| e.child < n) {
        point_parent[e.child] = e.parent - n;
    }
    let mut label_of_cluster: BTreeMap<usize, i64> = BTreeMap::new();
    let mut labels = vec![-1i64; n];
    for p in 0..n {
        let mut c = point_parent[p];
        while c != 0 && !selected[c] {
            c = cluster_parent[c];
        }
        if selected[c] {
            let next = label_of_cluster.len() as i64;
            labels[p] = *label_of_cluster.entry(c).or_insert(next);
        }
    }
    Ok(ClusterAssignment { labels })
}

/// Symmetric positive-pair indicator with an empty diagonal, stored as sorted
/// adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    rows: Vec<Vec<usize>>,
}

impl AnnotationMatrix {
    pub fn empty(n: usize) -> Self {
        Self { rows: vec![Vec::new(); n] }
    }

    /// Builds from unordered pairs; self pairs are dropped, duplicates merged.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for (i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange { index: i.max(j), len: n });
            }
            if i != j {
                rows[i].push(j);
                rows[j].push(i);
            }
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        contains(&self.rows[i], j)
    }

    /// Positive partners of `i`, ascending.
    pub fn positives(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Number of unordered positive pairs.
    pub fn num_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_pairs(&self) -> bool {
        self.rows.iter().any(|r| !r.is_empty())
    }

    /// Unordered pairs `(i, j)` with `i < j`, lexicographic.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Pair-list CSV: header `i,j` then one `i<j` pair per line.
    pub fn write_pairs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "j"])?;
        for (i, j) in self.pairs() {
            out.write_record([i.to_string(), j.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Positive iff same non-noise cluster, distinct, and `dist <= alpha`.
pub fn select_positive_pairs<T: Scalar>(
    clusters: &ClusterAssignment,
    dist: &DistanceMatrix<T>,
    alpha: T,
) -> Result<AnnotationMatrix> {
    let n = clusters.labels.len();
    if dist.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: dist.len() });
    }
    if !(alpha > T::zero()) {
        return Err(Error::InvalidConfig("alpha must be positive".into()));
    }
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in clusters.labels.iter().enumerate() {
        if l >= 0 {
            members.entry(l).or_default().push(i);
        }
    }
    let mut pairs = Vec::new();
    for group in members.values() {
        for (a, &i) in group.iter().enumerate() {
            for &j in &group[a + 1..] {
                if dist.get(i, j) <= alpha {
                    pairs.push((i, j));
                }
            }
        }
    }
    AnnotationMatrix::from_pairs(n, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Set when nothing was predicted; `precision` is then reported as 0.
    pub precision_undefined: bool,
    pub predicted_pairs: usize,
    pub true_pairs: usize,
    pub true_positives: usize,
}

/// Precision and recall of predicted pairs against ground-truth identities,
/// counted over unordered pairs.
pub fn pair_metrics(a: &AnnotationMatrix, truth_ids: &[usize]) -> Result<PairMetrics> {
    if truth_ids.len() != a.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: truth_ids.len() });
    }
    let mut group: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in truth_ids {
        *group.entry(t).or_default() += 1;
    }
    let true_pairs: usize = group.values().map(|&c| c * (c.saturating_sub(1)) / 2).sum();
    let predicted = a.num_pairs();
    let tp = a.pairs().filter(|&(i, j)| truth_ids[i] == truth_ids[j]).count();
    let precision_undefined = predicted == 0;
    Ok(PairMetrics {
        precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
        recall: if true_pairs == 0 { 0.0 } else { tp as f64 / true_pairs as f64 },
        precision_undefined,
        predicted_pairs: predicted,
        true_pairs,
        true_positives: tp,
    })
}
