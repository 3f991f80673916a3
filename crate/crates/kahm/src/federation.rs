//! Per-class aggregation of client machines into a global model, the induced
//! kernel and predictor, global/local classifiers, and the assumption
//! validation score.
//!
//! A cell is the partitioned machine of one (class, client) sample block.
//! Every query against the global model reduces to distances: the class-c
//! distance of a probe is the minimum over that class's cells, and
//! classification takes the argmin over classes. Nothing but distance values
//! ever crosses a cell boundary.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::machine::SampleBlock;
use crate::partitioned::{
    build_partitioned_with_cap, partitioned_distance_batch, PartitionedKahm, DEFAULT_PART_CAP,
};

/// Labelled, client-attributed samples. Labels are 1-based class ids and
/// clients are 1-based client ids.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    clients: Vec<usize>,
    class_count: usize,
    client_count: usize,
}

impl LabeledDataset {
    pub fn new(
        samples: Array2<f64>,
        labels: Vec<usize>,
        clients: Vec<usize>,
        class_count: usize,
        client_count: usize,
    ) -> Result<Self> {
        let n = samples.nrows();
        if labels.len() != n || clients.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} sample rows but {} labels and {} client ids",
                labels.len(),
                clients.len()
            )));
        }
        if class_count == 0 || client_count == 0 {
            return Err(Error::DomainError("class and client counts must be positive".into()));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::DomainError("samples contain non-finite entries".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l < 1 || l > class_count) {
            return Err(Error::Parse {
                row: i + 1,
                msg: format!("label out of range: {} not in 1..={class_count}", labels[i]),
            });
        }
        if let Some(i) = clients.iter().position(|&q| q < 1 || q > client_count) {
            return Err(Error::Parse {
                row: i + 1,
                msg: format!("client out of range: {} not in 1..={client_count}", clients[i]),
            });
        }
        Ok(Self { samples, labels, clients, class_count, client_count })
    }

    /// Dataset whose rows all belong to a single client.
    pub fn with_single_client(samples: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = samples.nrows();
        Self::new(samples, labels, vec![1; n], class_count, 1)
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clients(&self) -> &[usize] {
        &self.clients
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn client_count(&self) -> usize {
        self.client_count
    }

    /// Replace the client attribution, keeping rows in place.
    pub fn with_clients(&self, clients: Vec<usize>, client_count: usize) -> Result<Self> {
        Self::new(
            self.samples.clone(),
            self.labels.clone(),
            clients,
            self.class_count,
            client_count,
        )
    }
}

/// Row indices grouped by (class, client), ascending within each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassClientIndex {
    index: BTreeMap<(usize, usize), Vec<usize>>,
}

impl ClassClientIndex {
    pub fn get(&self, class: usize, client: usize) -> Option<&[usize]> {
        self.index.get(&(class, client)).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<usize>)> {
        self.index.iter()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Group sample rows by (label, client). Iteration order is ascending in
/// (class, client) and indices within a group are ascending because rows are
/// scanned in order.
pub fn index_by_class_client(data: &LabeledDataset) -> ClassClientIndex {
    let mut index: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..data.n_samples() {
        index
            .entry((data.labels[i], data.clients[i]))
            .or_default()
            .push(i);
    }
    ClassClientIndex { index }
}

/// The (class x client) grid of partitioned machines.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    cells: BTreeMap<(usize, usize), PartitionedKahm>,
    class_count: usize,
    client_count: usize,
    dim: usize,
}

impl GlobalModel {
    pub(crate) fn from_cells(
        cells: BTreeMap<(usize, usize), PartitionedKahm>,
        class_count: usize,
        client_count: usize,
        dim: usize,
    ) -> Self {
        Self { cells, class_count, client_count, dim }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn client_count(&self) -> usize {
        self.client_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, class: usize, client: usize) -> Option<&PartitionedKahm> {
        self.cells.get(&(class, client))
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(usize, usize), &PartitionedKahm)> {
        self.cells.iter()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    fn class_cells(&self, class: usize) -> impl Iterator<Item = (usize, &PartitionedKahm)> {
        self.cells
            .range((class, 0)..=(class, usize::MAX))
            .map(|(&(_, q), pk)| (q, pk))
    }

    /// Classes for which the given client owns a cell, ascending.
    pub fn classes_of_client(&self, client: usize) -> Vec<usize> {
        self.cells
            .keys()
            .filter(|&&(_, q)| q == client)
            .map(|&(c, _)| c)
            .collect()
    }
}

fn mix_seed(seed: u64, class: usize, client: usize) -> u64 {
    // splitmix64 over the combined key, so cell seeds do not depend on any
    // iteration or thread order.
    let mut z = seed
        ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (client as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the per-class global model with the default part cap.
pub fn build_global_model(data: &LabeledDataset, seed: u64) -> Result<GlobalModel> {
    build_global_model_with_cap(data, seed, DEFAULT_PART_CAP)
}

/// Build one partitioned machine per non-empty (class, client) block. Cells
/// are independent and build concurrently; the result is deterministic given
/// the seed.
pub fn build_global_model_with_cap(
    data: &LabeledDataset,
    seed: u64,
    cap: usize,
) -> Result<GlobalModel> {
    let index = index_by_class_client(data);
    for c in 1..=data.class_count {
        let any = index.iter().any(|(&(class, _), _)| class == c);
        if !any {
            return Err(Error::EmptyClass(c));
        }
    }
    let entries: Vec<((usize, usize), Vec<usize>)> = index
        .iter()
        .map(|(&key, rows)| (key, rows.clone()))
        .collect();
    let built: Vec<Result<((usize, usize), PartitionedKahm)>> = entries
        .into_par_iter()
        .map(|((c, q), rows)| {
            let mut block = Array2::<f64>::zeros((rows.len(), data.dim()));
            for (r, &i) in rows.iter().enumerate() {
                block.row_mut(r).assign(&data.samples.row(i));
            }
            let pk = build_partitioned_with_cap(SampleBlock::new(block)?, mix_seed(seed, c, q), cap)?;
            Ok(((c, q), pk))
        })
        .collect();
    let mut cells = BTreeMap::new();
    for item in built {
        let (key, pk) = item?;
        cells.insert(key, pk);
    }
    Ok(GlobalModel {
        cells,
        class_count: data.class_count,
        client_count: data.client_count,
        dim: data.dim(),
    })
}

/// Distance from a probe to class `c` of the global model: the minimum over
/// the class's client cells, infinite when the class has no cells.
pub fn global_distance(gm: &GlobalModel, class: usize, y: ArrayView1<'_, f64>) -> f64 {
    global_distance_batch(gm, class, y.insert_axis(Axis(0)))[0]
}

/// Batch form of [`global_distance`], one probe per row.
pub fn global_distance_batch(gm: &GlobalModel, class: usize, probes: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut min = Array1::from_elem(probes.nrows(), f64::INFINITY);
    for (_, pk) in gm.class_cells(class) {
        let d = partitioned_distance_batch(pk, probes);
        for (m, v) in min.iter_mut().zip(d.iter()) {
            if *v < *m {
                *m = *v;
            }
        }
    }
    min
}

/// The kernel induced by the class-c global model:
/// exp(-Gamma_c(y1)/p) * exp(-Gamma_c(y2)/p).
pub fn induced_kernel(
    gm: &GlobalModel,
    class: usize,
    y1: ArrayView1<'_, f64>,
    y2: ArrayView1<'_, f64>,
) -> f64 {
    predict_score(gm, class, y1) * predict_score(gm, class, y2)
}

/// The class-c predictor exp(-Gamma_c(y)/p); zero when the class is absent.
pub fn predict_score(gm: &GlobalModel, class: usize, y: ArrayView1<'_, f64>) -> f64 {
    let p = gm.dim as f64;
    (-global_distance(gm, class, y) / p).exp()
}

/// Batch form of [`predict_score`].
pub fn predict_score_batch(gm: &GlobalModel, class: usize, probes: ArrayView2<'_, f64>) -> Array1<f64> {
    let p = gm.dim as f64;
    global_distance_batch(gm, class, probes).mapv(|d| (-d / p).exp())
}

/// Outcome of classifying one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Winning class (argmin distance; ties go to the smallest class index).
    pub class_id: usize,
    /// Distance to each class, infinite for classes without cells.
    pub per_class_distance: Vec<f64>,
    /// exp(-distance / p) per class; zero at infinite distance.
    pub per_class_score: Vec<f64>,
    /// Client attaining the per-class minimum, 0 for classes without cells.
    pub argmin_client: Vec<usize>,
}

fn argmin_with_ties(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Classify against every class of the global model.
pub fn classify_global(gm: &GlobalModel, y: ArrayView1<'_, f64>) -> Result<Prediction> {
    if gm.cells.is_empty() {
        return Err(Error::AllClassesEmpty);
    }
    let p = gm.dim as f64;
    let mut per_class_distance = vec![f64::INFINITY; gm.class_count];
    let mut argmin_client = vec![0usize; gm.class_count];
    for c in 1..=gm.class_count {
        let mut best = f64::INFINITY;
        let mut best_q = 0usize;
        for (q, pk) in gm.class_cells(c) {
            let d = partitioned_distance_batch(pk, y.insert_axis(Axis(0)))[0];
            if d < best {
                best = d;
                best_q = q;
            }
        }
        per_class_distance[c - 1] = best;
        argmin_client[c - 1] = best_q;
    }
    let per_class_score: Vec<f64> = per_class_distance.iter().map(|&d| (-d / p).exp()).collect();
    let class_id = argmin_with_ties(&per_class_distance) + 1;
    Ok(Prediction { class_id, per_class_distance, per_class_score, argmin_client })
}

/// Winning classes for a batch of probes under the global classifier.
pub fn classify_global_ids(gm: &GlobalModel, probes: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if gm.cells.is_empty() {
        return Err(Error::AllClassesEmpty);
    }
    let m = probes.nrows();
    let mut dist = Array2::from_elem((m, gm.class_count), f64::INFINITY);
    let per_class: Vec<Array1<f64>> = (1..=gm.class_count)
        .into_par_iter()
        .map(|c| global_distance_batch(gm, c, probes))
        .collect();
    for (c, col) in per_class.into_iter().enumerate() {
        dist.column_mut(c).assign(&col);
    }
    Ok((0..m)
        .map(|i| argmin_with_ties(dist.row(i).as_slice().unwrap()) + 1)
        .collect())
}

/// Classify a probe using only client `q`'s cells; classes the client does
/// not own count as infinitely far.
pub fn classify_local(gm: &GlobalModel, client: usize, y: ArrayView1<'_, f64>) -> Result<Prediction> {
    let ids = classify_local_ids(gm, client, y.insert_axis(Axis(0)))?;
    let p = gm.dim as f64;
    let mut per_class_distance = vec![f64::INFINITY; gm.class_count];
    let mut argmin_client = vec![0usize; gm.class_count];
    for c in 1..=gm.class_count {
        if let Some(pk) = gm.cell(c, client) {
            per_class_distance[c - 1] = partitioned_distance_batch(pk, y.insert_axis(Axis(0)))[0];
            argmin_client[c - 1] = client;
        }
    }
    let per_class_score: Vec<f64> = per_class_distance.iter().map(|&d| (-d / p).exp()).collect();
    Ok(Prediction {
        class_id: ids[0],
        per_class_distance,
        per_class_score,
        argmin_client,
    })
}

/// Batch local classification for client `q`.
pub fn classify_local_ids(gm: &GlobalModel, client: usize, probes: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if client < 1 || client > gm.client_count {
        return Err(Error::DomainError(format!(
            "client {client} outside 1..={}",
            gm.client_count
        )));
    }
    let owned: Vec<usize> = gm.classes_of_client(client);
    if owned.is_empty() {
        return Err(Error::ClientHasNoCells(client));
    }
    let m = probes.nrows();
    let mut dist = Array2::from_elem((m, gm.class_count), f64::INFINITY);
    for c in owned {
        let pk = gm.cell(c, client).expect("owned class has a cell");
        let d = partitioned_distance_batch(pk, probes);
        dist.column_mut(c - 1).assign(&d);
    }
    Ok((0..m)
        .map(|i| argmin_with_ties(dist.row(i).as_slice().unwrap()) + 1)
        .collect())
}

/// Validation score E: the worst training-row residual |1 - exp(-Gamma/p)|
/// over all classes. Near zero when every class's machines reproduce their
/// own training rows.
pub fn assumption_score(gm: &GlobalModel, data: &LabeledDataset) -> Result<f64> {
    if data.dim() != gm.dim {
        return Err(Error::DimensionMismatch(format!(
            "model dimension {} vs data dimension {}",
            gm.dim,
            data.dim()
        )));
    }
    let p = gm.dim as f64;
    let per_class: Vec<f64> = (1..=gm.class_count)
        .into_par_iter()
        .map(|c| {
            let rows: Vec<usize> = (0..data.n_samples()).filter(|&i| data.labels[i] == c).collect();
            if rows.is_empty() {
                return 0.0;
            }
            let mut block = Array2::<f64>::zeros((rows.len(), gm.dim));
            for (r, &i) in rows.iter().enumerate() {
                block.row_mut(r).assign(&data.samples.row(i));
            }
            let d = global_distance_batch(gm, c, block.view());
            d.iter()
                .map(|&g| (1.0 - (-g / p).exp()).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(per_class.into_iter().fold(0.0, f64::max))
}

/// Distance-based lower bound on the class-c predictor at `y`:
/// exp(-(1/p + I^2 / (2 ||Y||_F^2)) ||[y - y^i ...]||_2) evaluated on the
/// argmin client's cell. Defined only when that cell holds a single machine.
pub fn deterministic_lower_bound(gm: &GlobalModel, class: usize, y: ArrayView1<'_, f64>) -> Result<f64> {
    let mut best: Option<(usize, &PartitionedKahm)> = None;
    let mut best_d = f64::INFINITY;
    for (q, pk) in gm.class_cells(class) {
        let d = partitioned_distance_batch(pk, y.insert_axis(Axis(0)))[0];
        if d < best_d {
            best_d = d;
            best = Some((q, pk));
        }
    }
    let (_, pk) = best.ok_or(Error::EmptyClass(class))?;
    if pk.part_count() > 1 {
        return Err(Error::Unsupported(
            "the bound constants belong to a single machine; the argmin cell is partitioned".into(),
        ));
    }
    let part = &pk.parts()[0];
    let n = part.n_samples();
    let p = gm.dim as f64;
    let frob2 = part.frobenius_norm().powi(2);
    let mut diffs = Array2::<f64>::zeros((gm.dim, n));
    for (i, row) in part.samples().rows().rows().into_iter().enumerate() {
        let d = &y - &row;
        diffs.column_mut(i).assign(&d);
    }
    let spectral = linalg::spectral_norm(diffs.view());
    let coeff = 1.0 / p + (n as f64 * n as f64) / (2.0 * frob2);
    Ok((-coeff * spectral).exp())
}
