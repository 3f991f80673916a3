//! Calculators for every bound the construction admits: Rademacher
//! complexity, generalization error, approximation risk, sample complexity,
//! and a Monte-Carlo estimator of the empirical Rademacher complexity that
//! exercises the 1/sqrt(N) bound directly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::federation::{global_distance_batch, GlobalModel, LabeledDataset};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DomainError(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::DomainError("sample count must be at least 1".into()));
    }
    Ok(())
}

/// Upper bound on the Rademacher complexity of the hypothesis space: 1/sqrt(N).
pub fn rademacher_bound(n: usize) -> Result<f64> {
    check_n(n)?;
    Ok(1.0 / (n as f64).sqrt())
}

/// Upper bound on the Rademacher complexity of the squared-loss family: 2/sqrt(N).
pub fn loss_rademacher_bound(n: usize) -> Result<f64> {
    check_n(n)?;
    Ok(2.0 / (n as f64).sqrt())
}

/// Generalization bound: empirical loss + 4/sqrt(N) + sqrt(log(1/delta)/(2N)),
/// holding with probability at least 1 - delta.
pub fn generalization_bound(n: usize, delta: f64, empirical_loss: f64) -> Result<f64> {
    check_n(n)?;
    check_delta(delta)?;
    if empirical_loss < 0.0 {
        return Err(Error::DomainError(format!(
            "empirical loss must be non-negative, got {empirical_loss}"
        )));
    }
    let nf = n as f64;
    Ok(4.0 / nf.sqrt() + ((1.0 / delta).ln() / (2.0 * nf)).sqrt() + empirical_loss)
}

/// Risk bound for the distance-based predictor under the fitting assumptions:
/// the loss-free generalization bound.
pub fn predictor_risk_bound(n: usize, delta: f64) -> Result<f64> {
    generalization_bound(n, delta, 0.0)
}

/// Samples needed to push the approximation risk below `epsilon` with
/// probability at least 1 - delta:
/// ceil((1/epsilon^2) (4 + sqrt(log(1/delta)/2))^2).
pub fn sample_complexity(epsilon: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0) {
        return Err(Error::DomainError(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    let base = 4.0 + ((1.0 / delta).ln() / 2.0).sqrt();
    Ok(((base * base) / (epsilon * epsilon)).ceil() as u64)
}

/// Inverse of the predictor link: -p log(score) recovers the distance behind
/// a score in (0, 1].
pub fn negative_log_link(score: f64, p: usize) -> Result<f64> {
    if !(score > 0.0 && score <= 1.0) {
        return Err(Error::DomainError(format!("score must lie in (0, 1], got {score}")));
    }
    Ok(-(p as f64) * score.ln())
}

/// One Rademacher sign draw together with the hull vertex attaining the
/// supremum of the corresponding linear functional.
#[derive(Debug, Clone)]
pub struct RademacherProbe {
    /// Sign per sample, each +1 or -1.
    pub signs: Vec<i8>,
    /// Index of the supremum-attaining vertex of the hypothesis hull.
    pub vertex_index: usize,
}

impl RademacherProbe {
    /// Deterministic draw for a (seed, trial) pair; trials use independent
    /// ChaCha streams so any subset can be generated in any order.
    pub fn draw(seed: u64, trial: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let signs = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        Self { signs, vertex_index: 0 }
    }

    /// Supremum of (1/N) sum_i sigma_i f(y^i) over the convex hull spanned by
    /// the vertices K_c(., y^j). The functional is linear, so the supremum is
    /// attained at a vertex: the value is (1/N) max_j (sum_i sigma_i g_i) g_j
    /// where g_i = exp(-Gamma_c(y^i)/p).
    pub fn supremum(&mut self, scores: &[f64]) -> f64 {
        let n = scores.len();
        debug_assert_eq!(self.signs.len(), n);
        let s: f64 = self
            .signs
            .iter()
            .zip(scores.iter())
            .map(|(&sg, &g)| f64::from(sg) * g)
            .sum();
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &g) in scores.iter().enumerate() {
            let v = s * g;
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        self.vertex_index = best;
        best_v / n as f64
    }
}

/// Monte-Carlo estimate of the empirical Rademacher complexity of the class-c
/// hypothesis space over the dataset, with its standard error. Per-trial
/// seeds are derived by counter and the reduction order is fixed, so the
/// result does not depend on thread count.
pub fn empirical_rademacher(
    gm: &GlobalModel,
    class: usize,
    data: &LabeledDataset,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::DomainError("at least one trial is required".into()));
    }
    let n = data.n_samples();
    let p = gm.dim() as f64;
    let gamma = global_distance_batch(gm, class, data.samples());
    let scores: Vec<f64> = gamma.iter().map(|&g| (-g / p).exp()).collect();

    let values: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut probe = RademacherProbe::draw(seed, trial, n);
            probe.supremum(&scores)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / trials as f64;
    let std_error = if trials > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials as f64 - 1.0);
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_error))
}

/// Every bound for a given configuration, as produced by the `bounds`
/// subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub n_samples: usize,
    pub delta: f64,
    pub epsilon: Option<f64>,
    pub empirical_loss: Option<f64>,
    pub rademacher_bound: f64,
    pub loss_rademacher_bound: f64,
    pub generalization_bound: f64,
    pub predictor_risk_bound: f64,
    pub sample_complexity: Option<u64>,
}

impl BoundReport {
    pub fn compute(
        n_samples: usize,
        delta: f64,
        epsilon: Option<f64>,
        empirical_loss: Option<f64>,
    ) -> Result<Self> {
        let loss = empirical_loss.unwrap_or(0.0);
        Ok(Self {
            n_samples,
            delta,
            epsilon,
            empirical_loss,
            rademacher_bound: rademacher_bound(n_samples)?,
            loss_rademacher_bound: loss_rademacher_bound(n_samples)?,
            generalization_bound: generalization_bound(n_samples, delta, loss)?,
            predictor_risk_bound: predictor_risk_bound(n_samples, delta)?,
            sample_complexity: match epsilon {
                Some(eps) => Some(sample_complexity(eps, delta)?),
                None => None,
            },
        })
    }
}

impl std::fmt::Display for BoundReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "n={}", self.n_samples)?;
        writeln!(f, "delta={}", self.delta)?;
        if let Some(loss) = self.empirical_loss {
            writeln!(f, "empirical_loss={loss}")?;
        }
        writeln!(f, "rademacher_bound={:.12}", self.rademacher_bound)?;
        writeln!(f, "loss_rademacher_bound={:.12}", self.loss_rademacher_bound)?;
        writeln!(f, "generalization_bound={:.12}", self.generalization_bound)?;
        writeln!(f, "predictor_risk_bound={:.12}", self.predictor_risk_bound)?;
        if let Some(eps) = self.epsilon {
            writeln!(f, "epsilon={eps}")?;
        }
        if let Some(sc) = self.sample_complexity {
            writeln!(f, "sample_complexity={sc}")?;
        }
        Ok(())
    }
}
