//! Experimental protocols: non-iid label-skew client partitioning, the
//! single-class-per-client scenario, per-client test views, image
//! preprocessing, and the end-to-end federation run.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federation::{
    assumption_score, build_global_model_with_cap, classify_global_ids, classify_local_ids,
    GlobalModel, LabeledDataset,
};
use crate::partitioned::DEFAULT_PART_CAP;

const ASSIGNMENT_RETRIES: usize = 1000;

/// How training rows are attributed to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Each client draws a fixed fraction of the class labels; rows of a
    /// class are split equally among the clients that drew it.
    LabelSkew,
    /// One client per class owning all of that class's rows.
    SingleClass,
    /// Keep the client ids already present in the training data.
    Passthrough,
}

/// Full description of a client partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub client_count: usize,
    /// Fraction of the class labels each client holds (label-skew mode).
    pub skew_fraction: f64,
    pub seed: u64,
    pub mode: PartitionMode,
}

/// Which classes each client holds, plus the reverse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAssignment {
    classes_of_client: Vec<BTreeSet<usize>>,
    clients_of_class: Vec<Vec<usize>>,
}

impl ClassAssignment {
    pub fn classes_of_client(&self, client: usize) -> &BTreeSet<usize> {
        &self.classes_of_client[client - 1]
    }

    pub fn clients_of_class(&self, class: usize) -> &[usize] {
        &self.clients_of_class[class - 1]
    }

    pub fn client_count(&self) -> usize {
        self.classes_of_client.len()
    }

    fn from_classes(classes_of_client: Vec<BTreeSet<usize>>, class_count: usize) -> Self {
        let mut clients_of_class = vec![Vec::new(); class_count];
        for (qi, classes) in classes_of_client.iter().enumerate() {
            for &c in classes {
                clients_of_class[c - 1].push(qi + 1);
            }
        }
        Self { classes_of_client, clients_of_class }
    }

    /// Derive the assignment actually realized by a dataset's client ids.
    pub fn from_dataset(data: &LabeledDataset) -> Self {
        let mut classes_of_client = vec![BTreeSet::new(); data.client_count()];
        for i in 0..data.n_samples() {
            classes_of_client[data.clients()[i] - 1].insert(data.labels()[i]);
        }
        Self::from_classes(classes_of_client, data.class_count())
    }
}

/// Classes per client in label-skew mode: the skew fraction of the label set,
/// rounded half-up.
pub fn classes_per_client(class_count: usize, skew_fraction: f64) -> usize {
    (skew_fraction * class_count as f64 + 0.5).floor() as usize
}

/// Assign each client `round(skew * C)` distinct classes uniformly at random,
/// redrawing until every class lands on at least one client, then split each
/// class's rows equally among its clients (remainder rows go to the
/// lowest-indexed ones). Rows keep their positions; only client ids change.
pub fn label_skew_partition(
    train: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<(LabeledDataset, ClassAssignment)> {
    if spec.mode != PartitionMode::LabelSkew {
        return Err(Error::InfeasibleSpec("spec mode is not label_skew".into()));
    }
    let c_count = train.class_count();
    let q_count = spec.client_count;
    if q_count == 0 {
        return Err(Error::InfeasibleSpec("client count must be positive".into()));
    }
    if !(spec.skew_fraction > 0.0 && spec.skew_fraction <= 1.0) {
        return Err(Error::InfeasibleSpec(format!(
            "skew fraction {} outside (0, 1]",
            spec.skew_fraction
        )));
    }
    let k = classes_per_client(c_count, spec.skew_fraction);
    if k < 1 {
        return Err(Error::InfeasibleSpec(format!(
            "skew {} of {c_count} classes rounds to zero classes per client",
            spec.skew_fraction
        )));
    }
    if q_count * k < c_count {
        return Err(Error::InfeasibleSpec(format!(
            "{q_count} clients x {k} classes cannot cover {c_count} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment: Option<Vec<BTreeSet<usize>>> = None;
    for _ in 0..ASSIGNMENT_RETRIES {
        let draw: Vec<BTreeSet<usize>> = (0..q_count)
            .map(|_| {
                let mut pool: Vec<usize> = (1..=c_count).collect();
                // Partial Fisher-Yates: the first k entries are the draw.
                for i in 0..k {
                    let j = rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool[..k].iter().copied().collect()
            })
            .collect();
        let mut covered = vec![false; c_count];
        for classes in &draw {
            for &c in classes {
                covered[c - 1] = true;
            }
        }
        if covered.iter().all(|&c| c) {
            assignment = Some(draw);
            break;
        }
    }
    let classes_of_client = assignment.ok_or_else(|| {
        Error::InfeasibleSpec(format!(
            "no class-covering assignment found in {ASSIGNMENT_RETRIES} draws"
        ))
    })?;
    let assignment = ClassAssignment::from_classes(classes_of_client, c_count);

    let mut clients = vec![0usize; train.n_samples()];
    for c in 1..=c_count {
        let owners = assignment.clients_of_class(c);
        let rows: Vec<usize> = (0..train.n_samples())
            .filter(|&i| train.labels()[i] == c)
            .collect();
        if owners.is_empty() || rows.is_empty() {
            continue;
        }
        let m = owners.len();
        let base = rows.len() / m;
        let rem = rows.len() % m;
        let mut cursor = 0usize;
        for (oi, &owner) in owners.iter().enumerate() {
            let take = base + usize::from(oi < rem);
            for &row in &rows[cursor..cursor + take] {
                clients[row] = owner;
            }
            cursor += take;
        }
    }
    let data = train.with_clients(clients, q_count)?;
    Ok((data, assignment))
}

/// One client per class: the client id of each row is its label.
pub fn single_class_partition(train: &LabeledDataset) -> Result<(LabeledDataset, ClassAssignment)> {
    let clients = train.labels().to_vec();
    let data = train.with_clients(clients, train.class_count())?;
    let assignment = ClassAssignment::from_dataset(&data);
    Ok((data, assignment))
}

/// Test rows visible to each client: all rows whose class the client holds.
/// Returns one ascending index list per client.
pub fn client_test_view(test_labels: &[usize], assignment: &ClassAssignment) -> Vec<Vec<usize>> {
    (1..=assignment.client_count())
        .map(|q| {
            let classes = assignment.classes_of_client(q);
            test_labels
                .iter()
                .enumerate()
                .filter(|(_, l)| classes.contains(l))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Flatten integer images row-major and scale pixel values from [0, 255]
/// into [0, 1].
pub fn preprocess_scale_flatten(images: &[Array2<i64>]) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::DomainError("no images".into()));
    }
    let (h, w) = images[0].dim();
    let mut out = Array2::<f64>::zeros((images.len(), h * w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "image {i} is {:?}, expected {:?}",
                img.dim(),
                (h, w)
            )));
        }
        for (k, &v) in img.iter().enumerate() {
            if !(0..=255).contains(&v) {
                return Err(Error::RangeError(format!(
                    "pixel value {v} in image {i} outside [0, 255]"
                )));
            }
            out[[i, k]] = v as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Scale a pre-flattened feature matrix from [0, 255] into [0, 1],
/// rejecting out-of-range entries with a row diagnostic.
pub fn scale_255(features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    for (i, row) in features.rows().into_iter().enumerate() {
        for &v in row {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::RangeError(format!(
                    "feature value {v} at row {} outside [0, 255]",
                    i + 1
                )));
            }
        }
    }
    Ok(features.mapv(|v| v / 255.0))
}

/// Entrywise hyperbolic tangent.
pub fn preprocess_tanh(features: ArrayView2<'_, f64>) -> Array2<f64> {
    features.mapv(f64::tanh)
}

/// Outcome of one federation run.
#[derive(Debug, Clone)]
pub struct FederationReport {
    /// Accuracy of each client's local classifier over its own test view;
    /// a client with an empty view scores 1 vacuously.
    pub per_client_accuracy: Vec<f64>,
    /// Mean of the per-client accuracies.
    pub averaged_accuracy: f64,
    /// Accuracy of the global classifier over the pooled test set.
    pub global_accuracy: f64,
    /// Worst training-row residual of the fitted model.
    pub assumption_e: f64,
    pub runtime_seconds: f64,
}

impl FederationReport {
    /// Stable key=value rendering, without the runtime line.
    pub fn key_values(&self) -> String {
        format!(
            "local_avg={:.6} global={:.6} E={:.6}",
            self.averaged_accuracy, self.global_accuracy, self.assumption_e
        )
    }
}

/// Partition the training data per the spec, build the global model, and
/// score it: per-client local accuracy over client test views (averaged),
/// pooled-test global accuracy, and the assumption score. Client cells are
/// built in isolation from one another; only distances cross cell boundaries
/// during classification.
pub fn run_federation(
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<(FederationReport, GlobalModel)> {
    run_federation_with_cap(train, test, spec, seed, DEFAULT_PART_CAP)
}

pub fn run_federation_with_cap(
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &PartitionSpec,
    seed: u64,
    cap: usize,
) -> Result<(FederationReport, GlobalModel)> {
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch(format!(
            "train dimension {} vs test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let start = Instant::now();
    let (data, assignment) = match spec.mode {
        PartitionMode::LabelSkew => label_skew_partition(train, spec)?,
        PartitionMode::SingleClass => single_class_partition(train)?,
        PartitionMode::Passthrough => {
            let assignment = ClassAssignment::from_dataset(train);
            (train.clone(), assignment)
        }
    };
    let gm = build_global_model_with_cap(&data, seed, cap)?;

    let views = client_test_view(test.labels(), &assignment);
    let mut per_client_accuracy = Vec::with_capacity(views.len());
    for (qi, view) in views.iter().enumerate() {
        if view.is_empty() {
            per_client_accuracy.push(1.0);
            continue;
        }
        let mut probes = Array2::<f64>::zeros((view.len(), test.dim()));
        for (r, &i) in view.iter().enumerate() {
            probes.row_mut(r).assign(&test.samples().row(i));
        }
        let ids = classify_local_ids(&gm, qi + 1, probes.view())?;
        let hits = ids
            .iter()
            .zip(view.iter())
            .filter(|(&id, &i)| id == test.labels()[i])
            .count();
        per_client_accuracy.push(hits as f64 / view.len() as f64);
    }
    let averaged_accuracy =
        per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len().max(1) as f64;

    let global_ids = classify_global_ids(&gm, test.samples())?;
    let global_hits = global_ids
        .iter()
        .zip(test.labels().iter())
        .filter(|(a, b)| a == b)
        .count();
    let global_accuracy = global_hits as f64 / test.n_samples().max(1) as f64;

    let assumption_e = assumption_score(&gm, &data)?;

    Ok((
        FederationReport {
            per_client_accuracy,
            averaged_accuracy,
            global_accuracy,
            assumption_e,
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
        gm,
    ))
}
