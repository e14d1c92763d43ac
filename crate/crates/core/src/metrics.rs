//! Pseudo-distances between CSI snapshots.
//!
//! Three modes share one provider type:
//!
//! * `timestamp`: `min(v̄ · |Δt|, d_cap)`, the temporal-proximity proxy.
//! * `cir`: a complex squared-cosine dissimilarity between CIRs, averaged
//!   over antennas and scaled into meters.
//! * `fused-geodesic`: shortest paths over a k-NN graph whose edge weights
//!   are the smaller of the two metrics above.
//!
//! The CIR-side metric is a surrogate chosen for its invariances (global
//! phase and scale); it does not attempt to replicate angle-delay-profile
//! metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{complex_taps, Complex, Snapshot};
use crate::tensor::Tensor;

pub fn timestamp_distance(t_n: f64, t_k: f64, speed: f64, cap: f64) -> f64 {
    (speed * (t_n - t_k).abs()).min(cap)
}

/// `1 − |⟨u, v⟩|² / (‖u‖² ‖v‖²)` over the complex taps recovered from the
/// Re/Im channels of two normalized CIRs.
pub fn cir_dissimilarity(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("cir_dissimilarity", x.shape(), y.shape()));
    }
    let u = UnitCir::new(&complex_taps(x))?;
    let v = UnitCir::new(&complex_taps(y))?;
    Ok(u.dissimilarity(&v))
}

/// Complex tap vector scaled to unit norm.
#[derive(Clone, Debug)]
struct UnitCir {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl UnitCir {
    fn new(taps: &[Complex]) -> Result<Self> {
        let norm2: f64 = taps.iter().map(|c| c.re * c.re + c.im * c.im).sum();
        if !(norm2 > 0.0) {
            return Err(Error::Degenerate("zero-norm CIR".into()));
        }
        let s = 1.0 / norm2.sqrt();
        Ok(Self {
            re: taps.iter().map(|c| c.re * s).collect(),
            im: taps.iter().map(|c| c.im * s).collect(),
        })
    }

    fn dissimilarity(&self, other: &UnitCir) -> f64 {
        // ⟨u, v⟩ = Σ conj(u)·v
        let mut re = 0.0;
        let mut im = 0.0;
        for i in 0..self.re.len() {
            re += self.re[i] * other.re[i] + self.im[i] * other.im[i];
            im += self.re[i] * other.im[i] - self.im[i] * other.re[i];
        }
        (1.0 - (re * re + im * im)).clamp(0.0, 1.0)
    }
}

/// Snapshot-level CIR dissimilarity: mean over antennas.
struct SnapshotCirs {
    antennas: Vec<UnitCir>,
}

impl SnapshotCirs {
    fn new(s: &Snapshot) -> Result<Self> {
        Ok(Self {
            antennas: s
                .cirs
                .iter()
                .map(|t| UnitCir::new(&complex_taps(t)))
                .collect::<Result<_>>()?,
        })
    }

    fn dissimilarity(&self, other: &SnapshotCirs) -> f64 {
        let total: f64 = self
            .antennas
            .iter()
            .zip(&other.antennas)
            .map(|(a, b)| a.dissimilarity(b))
            .sum();
        total / self.antennas.len() as f64
    }
}

/// Symmetric matrix with zero diagonal, stored as its strict upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseMatrix {
    n: usize,
    upper: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            upper: vec![0.0; n * n.saturating_sub(1) / 2],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// From a full square matrix; must be symmetric with zero diagonal.
    pub fn from_square(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Validation("pairwise matrix is not square".into()));
            }
            if r[i] != 0.0 {
                return Err(Error::Validation("pairwise matrix has a nonzero diagonal".into()));
            }
            for j in 0..n {
                if r[j] != rows[j][i] || r[j] < 0.0 || r[j].is_nan() {
                    return Err(Error::Validation(format!(
                        "pairwise matrix entry ({i}, {j}) is asymmetric or negative"
                    )));
                }
            }
        }
        Ok(Self::from_fn(n, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            Ordering::Equal => 0.0,
            Ordering::Less => self.upper[self.index(i, j)],
            Ordering::Greater => self.upper[self.index(j, i)],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        assert!(a != b, "diagonal is fixed at zero");
        let idx = self.index(a, b);
        self.upper[idx] = v;
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(i, j)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    /// Per node: `(neighbor, weight)` sorted by neighbor id.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn edge_weight(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency[a]
            .binary_search_by_key(&b, |e| e.0)
            .ok()
            .map(|i| self.adjacency[a][i].1)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Dijkstra from `source`; unreachable nodes are `f64::INFINITY`.
    pub fn shortest_paths_from(&self, source: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
            }
        }

        let mut dist = vec![f64::INFINITY; self.node_count()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Entry(0.0, source));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Entry(nd, v));
                }
            }
        }
        dist
    }
}

/// k-NN graph from a dissimilarity matrix; ties go to the lower index and
/// an edge is kept when it appears in either endpoint's list.
pub fn build_knn_graph(d: &PairwiseMatrix, k: usize) -> Result<KnnGraph> {
    build_knn_graph_with(d.len(), k, |i, row| {
        for (j, r) in row.iter_mut().enumerate() {
            *r = d.get(i, j);
        }
    })
}

/// Same as [`build_knn_graph`], with rows produced on demand by `fill_row`.
/// The diagonal entry of each row is ignored.
pub fn build_knn_graph_with(
    n: usize,
    k: usize,
    mut fill_row: impl FnMut(usize, &mut [f64]),
) -> Result<KnnGraph> {
    if k < 1 || k >= n {
        return Err(Error::Config(format!(
            "k must satisfy 1 ≤ k < {n}, got {k}"
        )));
    }
    let mut adjacency: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    let mut row = vec![0.0; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        fill_row(i, &mut row);
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.select_nth_unstable_by(k - 1, |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            adjacency[i].insert(j, row[j]);
            adjacency[j].insert(i, row[j]);
        }
    }
    Ok(KnnGraph {
        adjacency: adjacency
            .into_iter()
            .map(|m| m.into_iter().collect())
            .collect(),
    })
}

pub fn geodesic_distance(graph: &KnnGraph, n: usize, k: usize) -> Result<f64> {
    let count = graph.node_count();
    if n >= count || k >= count {
        return Err(Error::Validation(format!(
            "node ids ({n}, {k}) out of range for {count} nodes"
        )));
    }
    if n == k {
        return Ok(0.0);
    }
    let d = graph.shortest_paths_from(n)[k];
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Unreachable { from: n, to: k })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    Timestamp,
    Cir,
    FusedGeodesic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub mode: MetricMode,
    /// Assumed movement speed v̄ in m/s.
    pub speed: f64,
    /// Cap on the timestamp metric, meters.
    pub cap: f64,
    pub k: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mode: MetricMode::FusedGeodesic,
            speed: 1.0,
            cap: 5.0,
            k: 10,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !(self.cap > 0.0) {
            return Err(Error::Config("metric speed and cap must be positive".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("metric k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pairwise pseudo-distance oracle `d(n, k)` over one dataset's snapshots.
pub struct PseudoDistanceProvider {
    config: MetricConfig,
    timestamps: Vec<f64>,
    cirs: Vec<SnapshotCirs>,
    /// Meters per unit of CIR dissimilarity.
    cir_scale: f64,
    graph: Option<KnnGraph>,
}

impl std::fmt::Debug for PseudoDistanceProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PseudoDistanceProvider")
            .field("config", &self.config)
            .field("nodes", &self.timestamps.len())
            .field("cir_scale", &self.cir_scale)
            .finish()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl PseudoDistanceProvider {
    pub fn build(config: &MetricConfig, snapshots: &[Snapshot]) -> Result<Self> {
        config.validate()?;
        let n = snapshots.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 snapshots, got {n}")));
        }
        let timestamps: Vec<f64> = snapshots.iter().map(|s| s.timestamp).collect();
        let cirs = if config.mode == MetricMode::Timestamp {
            Vec::new()
        } else {
            snapshots
                .iter()
                .map(SnapshotCirs::new)
                .collect::<Result<Vec<_>>>()?
        };
        let mut provider = Self {
            config: config.clone(),
            timestamps,
            cirs,
            cir_scale: 1.0,
            graph: None,
        };
        if config.mode != MetricMode::Timestamp {
            provider.cir_scale = provider.match_medians()?;
        }
        if config.mode == MetricMode::FusedGeodesic {
            if config.k >= n {
                return Err(Error::Config(format!(
                    "metric k = {} needs more than {} snapshots",
                    config.k, n
                )));
            }
            let weights = provider.fused_edge_matrix();
            provider.graph = Some(build_knn_graph(&weights, config.k)?);
        }
        Ok(provider)
    }

    /// Scale that maps the median CIR dissimilarity of time-adjacent pairs
    /// (offsets `1..=max(1, k/2)`) onto their median timestamp distance.
    fn match_medians(&self) -> Result<f64> {
        let n = self.timestamps.len();
        let reach = (self.config.k / 2).max(1);
        let mut ts = Vec::new();
        let mut cir = Vec::new();
        for i in 0..n {
            for j in i + 1..(i + 1 + reach).min(n) {
                ts.push(self.timestamp_metric(i, j));
                cir.push(self.cirs[i].dissimilarity(&self.cirs[j]));
            }
        }
        let (mt, mc) = (median(&mut ts), median(&mut cir));
        if !(mc > 0.0) {
            return Err(Error::Degenerate(
                "time-adjacent CIRs are identical; cannot calibrate the CIR metric".into(),
            ));
        }
        Ok(mt / mc)
    }

    fn timestamp_metric(&self, n: usize, k: usize) -> f64 {
        timestamp_distance(
            self.timestamps[n],
            self.timestamps[k],
            self.config.speed,
            self.config.cap,
        )
    }

    fn cir_metric(&self, n: usize, k: usize) -> f64 {
        self.cir_scale * self.cirs[n].dissimilarity(&self.cirs[k])
    }

    /// Edge weight `min(timestamp, scale · cir)` between two snapshots.
    pub fn fused_edge_weight(&self, n: usize, k: usize) -> f64 {
        if n == k {
            return 0.0;
        }
        self.timestamp_metric(n, k).min(self.cir_metric(n, k))
    }

    fn fused_edge_matrix(&self) -> PairwiseMatrix {
        PairwiseMatrix::from_fn(self.len(), |i, j| self.fused_edge_weight(i, j))
    }

    pub fn config(&self) -> &MetricConfig {
        &self.config
    }

    pub fn mode(&self) -> MetricMode {
        self.config.mode
    }

    pub fn cir_scale(&self) -> f64 {
        self.cir_scale
    }

    pub fn graph(&self) -> Option<&KnnGraph> {
        self.graph.as_ref()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    fn check(&self, n: usize, k: usize) -> Result<()> {
        if n >= self.len() || k >= self.len() {
            return Err(Error::Validation(format!(
                "indices ({n}, {k}) out of range for {} snapshots",
                self.len()
            )));
        }
        Ok(())
    }

    /// `d(n, k)` in the provider's mode.
    pub fn distance(&self, n: usize, k: usize) -> Result<f64> {
        self.check(n, k)?;
        if n == k {
            return Ok(0.0);
        }
        match self.config.mode {
            MetricMode::Timestamp => Ok(self.timestamp_metric(n, k)),
            MetricMode::Cir => Ok(self.cir_metric(n, k)),
            // lower index as source keeps the result bitwise symmetric
            MetricMode::FusedGeodesic => {
                geodesic_distance(self.graph.as_ref().unwrap(), n.min(k), n.max(k))
            }
        }
    }

    /// `d(n, ·)` for every node with `n` as the source; unreachable entries
    /// are infinite. Geodesic entries may differ from [`Self::distance`] in
    /// the last bit for targets below `n`.
    pub fn distances_from(&self, n: usize) -> Result<Vec<f64>> {
        self.check(n, n)?;
        Ok(match self.config.mode {
            MetricMode::FusedGeodesic => self.graph.as_ref().unwrap().shortest_paths_from(n),
            _ => (0..self.len())
                .map(|k| if k == n { 0.0 } else { self.distance(n, k).unwrap() })
                .collect(),
        })
    }

    /// Full pseudo-distance matrix; unreachable pairs are infinite.
    pub fn matrix(&self) -> PairwiseMatrix {
        let n = self.len();
        let mut m = PairwiseMatrix::zeros(n);
        for i in 0..n {
            let row = self.distances_from(i).expect("index in range");
            for j in i + 1..n {
                m.set(i, j, row[j]);
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    pub n: usize,
    pub k: usize,
    pub distance: f64,
}

/// Uniform index pairs with `n ≠ k`, deterministic per seed. Pairs whose
/// pseudo-distance is unreachable are redrawn.
pub fn sample_training_pairs(
    provider: &PseudoDistanceProvider,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    sample_pairs_with(provider.len(), count, seed, |sources| {
        let mut out = BTreeMap::new();
        for &s in sources {
            out.insert(s, provider.distances_from(s)?);
        }
        Ok(out)
    })
}

/// Pair sampler over a precomputed matrix (for example, a loaded cache).
pub fn sample_training_pairs_from_matrix(
    matrix: &PairwiseMatrix,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    sample_pairs_with(matrix.len(), count, seed, |sources| {
        Ok(sources.iter().map(|&s| (s, matrix.row(s))).collect())
    })
}

const MAX_RESAMPLE_ROUNDS: usize = 64;

fn sample_pairs_with(
    n: usize,
    count: usize,
    seed: u64,
    mut rows: impl FnMut(&[usize]) -> Result<BTreeMap<usize, Vec<f64>>>,
) -> Result<Vec<TrainingPair>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples to form pairs, got {n}")));
    }
    if count < 1 {
        return Err(Error::Config("pair count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    };
    let mut slots: Vec<Option<TrainingPair>> = vec![None; count];
    let mut pending: Vec<usize> = (0..count).collect();
    for _ in 0..MAX_RESAMPLE_ROUNDS {
        if pending.is_empty() {
            break;
        }
        let draws: Vec<(usize, (usize, usize))> =
            pending.iter().map(|&slot| (slot, draw(&mut rng))).collect();
        let mut sources: Vec<usize> = draws.iter().map(|d| d.1 .0.min(d.1 .1)).collect();
        sources.sort_unstable();
        sources.dedup();
        let table = rows(&sources)?;
        pending.clear();
        for (slot, (a, b)) in draws {
            let d = table[&a.min(b)][a.max(b)];
            if d.is_finite() {
                slots[slot] = Some(TrainingPair { n: a, k: b, distance: d });
            } else {
                pending.push(slot);
            }
        }
    }
    if !pending.is_empty() {
        return Err(Error::Config(format!(
            "{} pairs stayed unreachable after {MAX_RESAMPLE_ROUNDS} redraws; the k-NN graph is too fragmented",
            pending.len()
        )));
    }
    Ok(slots.into_iter().map(Option::unwrap).collect())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = 0.5 * (i + j) as f64 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

// ---- cache file -------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"ADPSDIST";

/// Content hash binding a cached matrix to its dataset bytes and metric
/// configuration.
pub fn cache_key(dataset_bytes: &[u8], config: &MetricConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(dataset_bytes);
    h.update(serde_json::to_vec(config).expect("metric config serializes"));
    h.finalize().into()
}

pub fn write_cache(path: &Path, key: &[u8; 32], matrix: &PairwiseMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(48 + 8 * matrix.values().len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(key);
    bytes.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    for v in matrix.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a cached matrix. Returns `Ok(None)` when the file is absent or was
/// built from different inputs.
pub fn read_cache(path: &Path, key: &[u8; 32]) -> Result<Option<PairwiseMatrix>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() < 48 || &bytes[..8] != CACHE_MAGIC {
        return Err(Error::format(path, "not a pseudo-distance cache"));
    }
    if &bytes[8..40] != key {
        return Ok(None);
    }
    let n = u64::from_le_bytes(bytes[40..48].try_into().unwrap()) as usize;
    let expected = n * n.saturating_sub(1) / 2;
    let body = &bytes[48..];
    if body.len() != 8 * expected {
        return Err(Error::format(path, "cache payload length mismatch"));
    }
    let upper = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(PairwiseMatrix { n, upper }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, generate_trajectory, normalize_cir, Environment, CHANNELS, TAPS};

    fn snapshots(n_secs: f64, seed: u64, noise: f64) -> Vec<Snapshot> {
        let mut env = Environment::desk(seed);
        env.noise_std = noise;
        let tr = generate_trajectory(&env, n_secs, 6.6, 1.0, seed + 1).unwrap();
        generate_dataset(&env, &tr).unwrap().snapshots().unwrap()
    }

    fn random_cir(rng: &mut ChaCha8Rng) -> Vec<Complex> {
        (0..TAPS)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn timestamp_metric_regimes() {
        assert_eq!(timestamp_distance(3.0, 3.0, 1.0, 10.0), 0.0);
        assert_eq!(timestamp_distance(0.0, 2.0, 1.0, 10.0), 2.0);
        assert_eq!(timestamp_distance(100.0, 0.0, 1.0, 10.0), 10.0);
    }

    #[test]
    fn cir_dissimilarity_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random_cir(&mut rng);
        let x = normalize_cir(&raw).unwrap();
        assert!(cir_dissimilarity(&x, &x).unwrap().abs() < 1e-12);

        // complex scalar multiple: rotate by 1.1 rad, scale by 0.3
        let c = Complex::from_polar(0.3, 1.1);
        let scaled: Vec<Complex> = raw
            .iter()
            .map(|z| Complex::new(c.re * z.re - c.im * z.im, c.re * z.im + c.im * z.re))
            .collect();
        let y = normalize_cir(&scaled).unwrap();
        assert!(cir_dissimilarity(&x, &y).unwrap().abs() < 1e-12);

        // disjoint supports are orthogonal
        let mut a = vec![Complex::default(); TAPS];
        let mut b = vec![Complex::default(); TAPS];
        a[3] = Complex::new(1.0, 0.5);
        b[7] = Complex::new(-0.2, 1.0);
        let (a, b) = (normalize_cir(&a).unwrap(), normalize_cir(&b).unwrap());
        assert!((cir_dissimilarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cir_dissimilarity_rejects_zero_vector() {
        // every Re/Im value at the midpoint decodes to the zero vector
        let zero = Tensor::full([CHANNELS, TAPS], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normalize_cir(&random_cir(&mut rng)).unwrap();
        assert!(matches!(cir_dissimilarity(&zero, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn knn_complete_triangle() {
        let m = PairwiseMatrix::from_square(&[
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 3.0],
            vec![2.0, 3.0, 0.0],
        ])
        .unwrap();
        let g = build_knn_graph(&m, 2).unwrap();
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.edge_weight(1, 2), Some(3.0));
        assert!(matches!(build_knn_graph(&m, 3), Err(Error::Config(_))));
        assert!(matches!(build_knn_graph(&m, 0), Err(Error::Config(_))));
    }

    #[test]
    fn knn_ties_break_by_lower_index() {
        let m = PairwiseMatrix::from_fn(5, |i, j| if i == 2 || j == 2 { 1.0 } else { 4.0 });
        let g = build_knn_graph(&m, 1).unwrap();
        // node 2 is everybody's nearest; node 2's own pick is node 0
        for other in [0, 1, 3, 4] {
            assert!(g.edge_weight(2, other).is_some());
        }
        let again = build_knn_graph(&m, 1).unwrap();
        assert_eq!(g, again);

        let flat = PairwiseMatrix::from_fn(4, |_, _| 1.0);
        let g = build_knn_graph(&flat, 1).unwrap();
        assert_eq!(g.neighbors(3), &[(0, 1.0)]);
        assert_eq!(g.neighbors(0), &[(1, 1.0), (2, 1.0), (3, 1.0)]);
    }

    /// Brute-force nearest-neighbor scan, independent of the selection code.
    fn brute_knn_edges(m: &PairwiseMatrix, k: usize) -> Vec<(usize, usize)> {
        let n = m.len();
        let mut edges = std::collections::BTreeSet::new();
        for i in 0..n {
            let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (m.get(i, j), j)).collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in cand.iter().take(k) {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        edges.into_iter().collect()
    }

    #[test]
    fn knn_line_topology_is_a_path() {
        let xs = [0.0, 1.0, 2.1, 3.3, 4.6];
        let m = PairwiseMatrix::from_fn(5, |i, j| (xs[i] - xs[j]) as f64);
        let m = PairwiseMatrix::from_fn(5, |i, j| m.get(i, j).abs());
        let g = build_knn_graph(&m, 1).unwrap();
        let mut edges = Vec::new();
        for i in 0..5 {
            for &(j, _) in g.neighbors(i) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
        assert_eq!(edges, brute_knn_edges(&m, 1));
        assert_eq!(edges, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    /// Exhaustive search over simple paths.
    fn brute_shortest(g: &KnnGraph, from: usize, to: usize) -> f64 {
        fn go(g: &KnnGraph, at: usize, to: usize, seen: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if at == to {
                *best = best.min(acc);
                return;
            }
            for &(nb, w) in g.neighbors(at) {
                if !seen[nb] {
                    seen[nb] = true;
                    go(g, nb, to, seen, acc + w, best);
                    seen[nb] = false;
                }
            }
        }
        let mut seen = vec![false; g.node_count()];
        seen[from] = true;
        let mut best = f64::INFINITY;
        go(g, from, to, &mut seen, 0.0, &mut best);
        best
    }

    #[test]
    fn geodesic_matches_path_enumeration_on_12_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let m = PairwiseMatrix::from_fn(12, |_, _| rng.random_range(0.1..5.0));
            let g = build_knn_graph(&m, 3).unwrap();
            for a in 0..12 {
                for b in 0..12 {
                    let brute = brute_shortest(&g, a, b);
                    match geodesic_distance(&g, a, b) {
                        Ok(d) => assert!((d - brute).abs() < 1e-12),
                        Err(Error::Unreachable { .. }) => assert!(brute.is_infinite()),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn geodesic_identity_direct_edge_and_unreachable() {
        let m = PairwiseMatrix::from_square(&[
            vec![0.0, 1.0, 9.0, 9.0],
            vec![1.0, 0.0, 9.0, 9.0],
            vec![9.0, 9.0, 0.0, 1.0],
            vec![9.0, 9.0, 1.0, 0.0],
        ])
        .unwrap();
        let g = build_knn_graph(&m, 1).unwrap();
        assert_eq!(geodesic_distance(&g, 2, 2).unwrap(), 0.0);
        assert_eq!(geodesic_distance(&g, 0, 1).unwrap(), 1.0);
        assert!(matches!(
            geodesic_distance(&g, 0, 3),
            Err(Error::Unreachable { from: 0, to: 3 })
        ));
    }

    #[test]
    fn every_mode_is_symmetric_with_zero_diagonal() {
        let snaps = snapshots(3.1, 3, 0.01);
        assert_eq!(snaps.len(), 20);
        for mode in [MetricMode::Timestamp, MetricMode::Cir, MetricMode::FusedGeodesic] {
            let cfg = MetricConfig {
                mode,
                k: 4,
                ..MetricConfig::default()
            };
            let p = PseudoDistanceProvider::build(&cfg, &snaps).unwrap();
            for i in 0..20 {
                assert_eq!(p.distance(i, i).unwrap(), 0.0);
                for j in 0..20 {
                    let (a, b) = (p.distance(i, j).unwrap(), p.distance(j, i).unwrap());
                    assert_eq!(a, b, "{mode:?} ({i},{j})");
                    assert!(a >= 0.0);
                }
            }
        }
    }

    #[test]
    fn fused_edges_never_exceed_timestamp_edges() {
        let snaps = snapshots(6.0, 4, 0.01);
        let cfg = MetricConfig::default();
        let p = PseudoDistanceProvider::build(&cfg, &snaps).unwrap();
        let g = p.graph().unwrap();
        for i in 0..g.node_count() {
            for &(j, w) in g.neighbors(i) {
                let ts = timestamp_distance(snaps[i].timestamp, snaps[j].timestamp, cfg.speed, cfg.cap);
                assert!(w <= ts);
            }
        }
    }

    #[test]
    fn geodesics_obey_triangle_inequality() {
        let snaps = snapshots(1.7, 5, 0.01);
        assert!(snaps.len() <= 12);
        let cfg = MetricConfig {
            k: 3,
            ..MetricConfig::default()
        };
        let p = PseudoDistanceProvider::build(&cfg, &snaps).unwrap();
        let m = p.matrix();
        let n = m.len();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    assert!(m.get(a, c) <= m.get(a, b) + m.get(b, c) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn pair_sampling_contract() {
        let snaps = snapshots(10.0, 6, 0.01);
        let p = PseudoDistanceProvider::build(&MetricConfig::default(), &snaps).unwrap();
        let a = sample_training_pairs(&p, 200, 17).unwrap();
        let b = sample_training_pairs(&p, 200, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.n != t.k && t.distance >= 0.0));
        for t in &a {
            assert_eq!(t.distance, p.distance(t.n, t.k).unwrap());
        }
        let from_matrix = sample_training_pairs_from_matrix(&p.matrix(), 200, 17).unwrap();
        assert_eq!(from_matrix, a);
        assert!(matches!(
            sample_training_pairs(&p, 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(s > 0.9 && s < 1.0);
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cache");
        let m = PairwiseMatrix::from_fn(7, |i, j| (i * 10 + j) as f64 * 0.1);
        let cfg = MetricConfig::default();
        let key = cache_key(b"dataset-bytes", &cfg);
        assert_eq!(read_cache(&path, &key).unwrap(), None);
        write_cache(&path, &key, &m).unwrap();
        assert_eq!(read_cache(&path, &key).unwrap(), Some(m));
        let other = cache_key(b"dataset-bytes", &MetricConfig { k: 11, ..cfg });
        assert_eq!(read_cache(&path, &other).unwrap(), None);
    }
}
