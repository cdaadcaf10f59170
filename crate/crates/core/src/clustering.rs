//! Fragment feature extraction with a trained encoder, k-means, and
//! per-cluster depressed/healthy composition.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use neuralkit::{seeded_rng, Tensor};

use crate::corpus::{FragmentRef, IndexedSpeaker};
use crate::model::{encode_fragments, fragments_tensor, Model, ModelError};
use crate::training::derive_seed;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("asked for {wanted} {class} fragments but only {available} exist")]
    InsufficientFragments { class: &'static str, wanted: usize, available: usize },
    #[error("all points are identical; cannot form {0} clusters")]
    DegenerateData(usize),
    #[error("need at least {k} points for {k} clusters, got {points}")]
    TooFewPoints { k: usize, points: usize },
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
    #[error("{0} assignments but {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentOrigin {
    pub speaker_id: String,
    pub recording: usize,
    pub start_frame: usize,
}

/// `M x dim` encoder outputs, row-major, with the origin speaker's label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub origins: Vec<FragmentOrigin>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| v as f64).collect()
    }

    /// `speaker_id,label,f0..f<dim-1>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("speaker_id,label");
        for j in 0..self.dim {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", self.origins[i].speaker_id, self.labels[i]));
            for v in self.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Encodes `m / 2` fragments drawn without replacement from the pooled
/// fragments of depressed speakers and `m - m / 2` from healthy speakers.
pub fn extract_features<'a, R: Rng + ?Sized>(
    model: &Model<f32>,
    speakers: impl IntoIterator<Item = &'a IndexedSpeaker>,
    m: usize,
    rng: &mut R,
) -> Result<FeatureSet, ClusterError> {
    let speakers: Vec<&IndexedSpeaker> = speakers.into_iter().collect();
    let pool = |label: u8| -> Vec<(usize, FragmentRef)> {
        speakers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label() == label)
            .flat_map(|(i, s)| s.fragments.iter().map(move |&r| (i, r)))
            .collect()
    };
    let mut picks = Vec::with_capacity(m);
    for (label, class, wanted) in [(1u8, "depressed", m / 2), (0, "healthy", m - m / 2)] {
        let all = pool(label);
        if all.len() < wanted {
            return Err(ClusterError::InsufficientFragments { class, wanted, available: all.len() });
        }
        let mut chosen: Vec<usize> = sample(rng, all.len(), wanted).into_vec();
        chosen.sort_unstable();
        picks.extend(chosen.into_iter().map(|i| all[i]));
    }

    let dim = model.config.feature_dim;
    let mut vectors = Vec::with_capacity(m * dim);
    const CHUNK: usize = 256;
    for chunk in picks.chunks(CHUNK) {
        let per = model.config.n_bands * model.config.n_frames;
        let mut data = Vec::with_capacity(chunk.len() * per);
        for &(s, r) in chunk {
            data.extend_from_slice(fragments_tensor(speakers[s], &[r]).data());
        }
        let x = Tensor::from_vec(&[chunk.len(), model.config.n_bands, model.config.n_frames], data)
            .map_err(ModelError::from)?;
        vectors.extend_from_slice(encode_fragments(model, &x)?.data());
    }
    let labels = picks.iter().map(|&(s, _)| speakers[s].label()).collect();
    let origins = picks
        .iter()
        .map(|&(s, r)| FragmentOrigin {
            speaker_id: speakers[s].speaker_id().to_string(),
            recording: r.recording,
            start_frame: r.start_frame,
        })
        .collect();
    Ok(FeatureSet { vectors, dim, labels, origins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 3, restarts: 20, max_iter: 300, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Index of the winning restart.
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best of `restarts` k-means++ seeded Lloyd runs by inertia; ties go to
/// the earliest restart.
pub fn kmeans(points: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult, ClusterError> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(ClusterError::InvalidConfig(format!("{} values do not form rows of {dim}", points.len())));
    }
    if cfg.k == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(ClusterError::InvalidConfig("k, restarts and max_iter must be positive".into()));
    }
    let n = points.len() / dim;
    if n < cfg.k {
        return Err(ClusterError::TooFewPoints { k: cfg.k, points: n });
    }
    if cfg.k > 1 && points.chunks(dim).all(|p| p == &points[..dim]) {
        return Err(ClusterError::DegenerateData(cfg.k));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[restart as u64]));
        let mut run = lloyd(points, dim, cfg, plus_plus(points, dim, cfg.k, &mut rng), None);
        run.restart = restart;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means++ seeding: each new centre drawn with probability proportional
/// to squared distance from the nearest existing one.
fn plus_plus<R: Rng + ?Sized>(points: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total is positive"))
        } else {
            rng.gen_range(0..n)
        };
        let c = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (d, p) in d2.iter_mut().zip(points.chunks(dim)) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Nearest centroid per point (lowest index on ties) and the total squared
/// distance.
fn assign(points: &[f64], dim: usize, centroids: &[f64], out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (a, p) in out.iter_mut().zip(points.chunks(dim)) {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, c) in centroids.chunks(dim).enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *a = best;
        inertia += best_d;
    }
    inertia
}

fn lloyd(
    points: &[f64],
    dim: usize,
    cfg: &KMeansConfig,
    mut centroids: Vec<f64>,
    mut trace: Option<&mut Vec<f64>>,
) -> KMeansResult {
    let n = points.len() / dim;
    let k = cfg.k;
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let inertia = assign(points, dim, &centroids, &mut assignments);
        if let Some(t) = trace.as_deref_mut() {
            t.push(inertia);
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks(dim).zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in next[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        // an empty cluster takes the point farthest from its own centroid
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .chunks(dim)
                    .zip(&assignments)
                    .enumerate()
                    .filter(|&(_, (_, &a))| counts[a] > 1)
                    .map(|(i, (p, &a))| (i, sq_dist(p, &next[a * dim..(a + 1) * dim])))
                    .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = j;
                    counts[j] = 1;
                    next[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
                }
            }
        }
        let shift = centroids
            .chunks(dim)
            .zip(next.chunks(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    let inertia = assign(points, dim, &centroids, &mut assignments);
    if let Some(t) = trace {
        t.push(inertia);
    }
    KMeansResult { assignments, centroids, inertia, iterations, restart: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    /// Display name after ordering: A, B, C, ...
    pub name: String,
    /// Index into the k-means centroids.
    pub cluster: usize,
    pub size: usize,
    pub depressed: usize,
    pub healthy: usize,
    /// Two-decimal percentages; each pair sums to exactly 100.
    pub depressed_pct: f64,
    pub healthy_pct: f64,
}

impl ClusterComposition {
    /// Hundredths of a percent, so the pair is exact integers.
    fn shares(depressed: usize, size: usize) -> (i64, i64) {
        if size == 0 {
            return (0, 0);
        }
        let healthy = size - depressed;
        let round = |c: usize| ((c as f64 * 10_000.0) / size as f64).round() as i64;
        let (mut d, mut h) = (round(depressed), round(healthy));
        let residue = 10_000 - d - h;
        if depressed >= healthy {
            d += residue;
        } else {
            h += residue;
        }
        (d, h)
    }
}

/// Per-cluster label shares, ordered by descending depressed share (then
/// by cluster index).
pub fn cluster_composition(assignments: &[usize], labels: &[u8]) -> Result<Vec<ClusterComposition>, ClusterError> {
    if assignments.len() != labels.len() {
        return Err(ClusterError::LengthMismatch(assignments.len(), labels.len()));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut size = vec![0usize; k];
    let mut dep = vec![0usize; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        size[a] += 1;
        dep[a] += usize::from(l == 1);
    }
    let mut rows: Vec<(usize, i64, i64)> = (0..k)
        .map(|j| {
            let (d, h) = ClusterComposition::shares(dep[j], size[j]);
            (j, d, h)
        })
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(rank, (j, d, h))| ClusterComposition {
            name: cluster_name(rank),
            cluster: j,
            size: size[j],
            depressed: dep[j],
            healthy: size[j] - dep[j],
            depressed_pct: d as f64 / 100.0,
            healthy_pct: h as f64 / 100.0,
        })
        .collect())
}

fn cluster_name(rank: usize) -> String {
    if rank < 26 {
        char::from(b'A' + rank as u8).to_string()
    } else {
        format!("C{rank}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<ClusterComposition>,
    pub points: usize,
    pub inertia: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl ClusterReport {
    pub fn new(result: &KMeansResult, labels: &[u8], cfg: &KMeansConfig) -> Result<Self, ClusterError> {
        Ok(Self {
            clusters: cluster_composition(&result.assignments, labels)?,
            points: labels.len(),
            inertia: result.inertia,
            seed: cfg.seed,
            restarts: cfg.restarts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per cluster, e.g. `Cluster A: Depressed 64.13% and Healthy 35.87%`.
    pub fn render(&self) -> String {
        self.clusters
            .iter()
            .map(|c| {
                format!(
                    "Cluster {}: Depressed {:.2}% and Healthy {:.2}% ({} fragments)\n",
                    c.name, c.depressed_pct, c.healthy_pct, c.size
                )
            })
            .collect()
    }
}
