//! Big sample blocks split into clustered subsets, one machine per subset,
//! aggregated by the minimum of the per-subset distances.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::machine::{build_kahm, kahm_distance_batch, KahmModel, SampleBlock};

/// Default cap on the number of samples modelled by one machine.
pub const DEFAULT_PART_CAP: usize = 1000;

const KMEANS_MAX_ITERS: usize = 100;

/// A set of machines over clustered subsets of one sample block.
#[derive(Debug, Clone)]
pub struct PartitionedKahm {
    parts: Vec<KahmModel>,
    assignment: Vec<usize>,
    cluster_seed: u64,
}

impl PartitionedKahm {
    pub fn parts(&self) -> &[KahmModel] {
        &self.parts
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    /// Cluster id of each original row.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_seed(&self) -> u64 {
        self.cluster_seed
    }

    pub fn n_samples(&self) -> usize {
        self.assignment.len()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    /// Sum of squared Frobenius norms over parts equals the squared norm of
    /// the original block, so the block norm is recoverable.
    pub fn frobenius_norm(&self) -> f64 {
        self.parts
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn from_parts(parts: Vec<KahmModel>, assignment: Vec<usize>, cluster_seed: u64) -> Self {
        Self { parts, assignment, cluster_seed }
    }
}

/// Seeded k-means with greedy farthest-point initialization.
///
/// The first centroid is a seeded uniform draw; each further centroid is the
/// point farthest from its nearest chosen centroid. Lloyd iterations run to
/// assignment convergence or 100 rounds; an empty cluster steals the point
/// farthest from the centroid of the largest cluster. Deterministic given
/// the seed.
pub fn cluster_split(samples: &SampleBlock, s: usize, seed: u64) -> Vec<usize> {
    let n = samples.n_samples();
    assert!(s >= 1 && s <= n, "cluster count {s} outside 1..={n}");
    if s == 1 {
        return vec![0; n];
    }
    let rows = samples.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Array1<f64>> = Vec::with_capacity(s);
    centroids.push(rows.row(rng.gen_range(0..n)).to_owned());
    let mut nearest_d2 = vec![f64::INFINITY; n];
    while centroids.len() < s {
        let last = centroids.last().unwrap();
        for (i, row) in rows.rows().into_iter().enumerate() {
            let diff = &row - last;
            let d2 = diff.dot(&diff);
            if d2 < nearest_d2[i] {
                nearest_d2[i] = d2;
            }
        }
        let mut far = 0usize;
        let mut far_d2 = f64::NEG_INFINITY;
        for (i, &d2) in nearest_d2.iter().enumerate() {
            if d2 > far_d2 {
                far_d2 = d2;
                far = i;
            }
        }
        centroids.push(rows.row(far).to_owned());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let next = assign_rows(rows, &centroids);
        let mut counts = vec![0usize; s];
        for &a in &next {
            counts[a] += 1;
        }
        let repaired = repair_empty_clusters(rows, next, &mut counts, &centroids);
        let changed = repaired != assignment;
        assignment = repaired;
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            centroid.fill(0.0);
            for (i, row) in rows.rows().into_iter().enumerate() {
                if assignment[i] == c {
                    *centroid += &row;
                }
            }
            *centroid /= counts[c] as f64;
        }
    }
    assignment
}

fn assign_rows(rows: ArrayView2<'_, f64>, centroids: &[Array1<f64>]) -> Vec<usize> {
    rows.rows()
        .into_iter()
        .map(|row| nearest_centroid(row, centroids))
        .collect()
}

fn nearest_centroid(row: ArrayView1<'_, f64>, centroids: &[Array1<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let diff = &row - centroid;
        let d2 = diff.dot(&diff);
        if d2 < best_d2 {
            best_d2 = d2;
            best = c;
        }
    }
    best
}

fn repair_empty_clusters(
    rows: ArrayView2<'_, f64>,
    mut assignment: Vec<usize>,
    counts: &mut [usize],
    centroids: &[Array1<f64>],
) -> Vec<usize> {
    let s = counts.len();
    for empty in 0..s {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..s).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[donor] <= 1 {
            continue;
        }
        let mut steal = None;
        let mut steal_d2 = f64::NEG_INFINITY;
        for (i, row) in rows.rows().into_iter().enumerate() {
            if assignment[i] != donor {
                continue;
            }
            let diff = &row - &centroids[donor];
            let d2 = diff.dot(&diff);
            if d2 > steal_d2 {
                steal_d2 = d2;
                steal = Some(i);
            }
        }
        if let Some(i) = steal {
            assignment[i] = empty;
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    assignment
}

/// Build a partitioned model with the default 1000-sample cap per part.
pub fn build_partitioned(samples: SampleBlock, seed: u64) -> Result<PartitionedKahm> {
    build_partitioned_with_cap(samples, seed, DEFAULT_PART_CAP)
}

/// Build with an explicit cap: the block splits into `ceil(N / cap)` clustered
/// subsets, each modelled by its own machine.
pub fn build_partitioned_with_cap(
    samples: SampleBlock,
    seed: u64,
    cap: usize,
) -> Result<PartitionedKahm> {
    let n = samples.n_samples();
    let cap = cap.max(1);
    let s = n.div_ceil(cap);
    if s == 1 {
        let part = build_kahm(samples)?;
        return Ok(PartitionedKahm {
            parts: vec![part],
            assignment: vec![0; n],
            cluster_seed: seed,
        });
    }
    let assignment = cluster_split(&samples, s, seed);
    let p = samples.dim();
    let mut subsets: Vec<Vec<usize>> = vec![Vec::new(); s];
    for (i, &a) in assignment.iter().enumerate() {
        subsets[a].push(i);
    }
    let parts: Vec<Result<KahmModel>> = subsets
        .par_iter()
        .map(|idx| {
            let mut rows = Array2::<f64>::zeros((idx.len(), p));
            for (r, &i) in idx.iter().enumerate() {
                rows.row_mut(r).assign(&samples.rows().row(i));
            }
            build_kahm(SampleBlock::new(rows)?)
        })
        .collect();
    let mut built = Vec::with_capacity(s);
    for part in parts {
        built.push(part?);
    }
    Ok(PartitionedKahm {
        parts: built,
        assignment,
        cluster_seed: seed,
    })
}

/// Distance from a probe to the partitioned model: the minimum over parts.
pub fn partitioned_distance(pk: &PartitionedKahm, y: ArrayView1<'_, f64>) -> f64 {
    partitioned_distance_batch(pk, y.insert_axis(ndarray::Axis(0)))[0]
}

/// Batch form of [`partitioned_distance`], one probe per row.
pub fn partitioned_distance_batch(pk: &PartitionedKahm, probes: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut min = Array1::from_elem(probes.nrows(), f64::INFINITY);
    for part in &pk.parts {
        let d = kahm_distance_batch(part, probes);
        for (m, v) in min.iter_mut().zip(d.iter()) {
            if *v < *m {
                *m = *v;
            }
        }
    }
    min
}
