//! Box-constrained multiclass logistic regression split across agents.
//!
//! Parameters are a `J x K` matrix flattened row-major: entry `(j, k)` sits
//! at index `j * K + k`.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{dot, norm2};
use crate::mechanism::{PerturbationMode, SensitivityRecord, SensitivitySource};
use crate::problem::{ConsensusProblem, ConstraintSet, LocalObjective, SmoothnessDescriptor};

/// Samples held by one agent. Labels are class indices; the one-hot row of
/// sample `i` is `e_{labels[i]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticPartition {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LogisticPartition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDataset {
    pub features: usize,
    pub classes: usize,
    pub partitions: Vec<LogisticPartition>,
}

impl LogisticDataset {
    pub fn new(features: usize, classes: usize, partitions: Vec<LogisticPartition>) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::Input(format!(
                "need at least one feature and two classes (J = {features}, K = {classes})"
            )));
        }
        for part in &partitions {
            if part.features.len() != part.labels.len() {
                return Err(dim_mismatch("labels", part.features.len(), part.labels.len()));
            }
            for x in &part.features {
                if x.len() != features {
                    return Err(dim_mismatch("feature row", features, x.len()));
                }
            }
            if let Some(&y) = part.labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Input(format!("label {y} outside 0..{classes}")));
            }
        }
        Ok(Self {
            features,
            classes,
            partitions,
        })
    }

    /// Total sample count `I`.
    pub fn total(&self) -> usize {
        self.partitions.iter().map(LogisticPartition::len).sum()
    }

    pub fn parameter_dimension(&self) -> usize {
        self.features * self.classes
    }
}

/// Logits `x^T z_{.k}` for every class.
pub fn logits(x: &[f64], z: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for (j, xj) in x.iter().enumerate() {
        let row = &z[j * classes..(j + 1) * classes];
        for (o, zk) in out.iter_mut().zip(row) {
            *o += xj * zk;
        }
    }
    out
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueAndGradient {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// `-(1/I) sum_i log softmax(x_i z)_{y_i}` and `(1/I) x^T (softmax(xz) - y)`.
pub fn logistic_value_and_gradient(
    partition: &LogisticPartition,
    total: usize,
    classes: usize,
    z: &[f64],
) -> ValueAndGradient {
    let scale = 1.0 / total.max(1) as f64;
    let mut value = 0.0;
    let mut gradient = vec![0.0; z.len()];
    for (x, &y) in partition.features.iter().zip(&partition.labels) {
        let l = logits(x, z, classes);
        value -= log_softmax_at(&l, y);
        let mut r = softmax(&l);
        r[y] -= 1.0;
        for (j, xj) in x.iter().enumerate() {
            for (k, rk) in r.iter().enumerate() {
                gradient[j * classes + k] += scale * xj * rk;
            }
        }
    }
    ValueAndGradient {
        value: value * scale,
        gradient,
    }
}

/// Mean cross-entropy over a sample set.
pub fn cross_entropy(features: &[Vec<f64>], labels: &[usize], classes: usize, z: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let s: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| -log_softmax_at(&logits(x, z, classes), y))
        .sum();
    s / labels.len() as f64
}

/// Fraction of samples whose largest logit is not the label.
pub fn classification_error(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    z: &[f64],
) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| {
            let l = logits(x, z, classes);
            let best = (0..classes)
                .max_by(|a, b| l[*a].total_cmp(&l[*b]))
                .unwrap_or(0);
            best != y
        })
        .count();
    wrong as f64 / labels.len() as f64
}

/// Local objective of one agent.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    partition: Arc<LogisticPartition>,
    total: usize,
    classes: usize,
    lipschitz: f64,
}

impl LogisticObjective {
    /// `L = (1/I) sum_i ||x_i||^2 / 2`, from the softmax Hessian bound.
    pub fn new(partition: Arc<LogisticPartition>, total: usize, classes: usize) -> Self {
        let sq: f64 = partition.features.iter().map(|x| dot(x, x)).sum();
        let lipschitz = (sq / (2.0 * total.max(1) as f64)).max(f64::MIN_POSITIVE);
        Self {
            partition,
            total,
            classes,
            lipschitz,
        }
    }
}

impl LocalObjective for LogisticObjective {
    fn value(&self, z: &[f64]) -> f64 {
        logistic_value_and_gradient(&self.partition, self.total, self.classes, z).value
    }

    fn subgradient(&self, z: &[f64]) -> Vec<f64> {
        logistic_value_and_gradient(&self.partition, self.total, self.classes, z).gradient
    }

    fn smoothness(&self) -> SmoothnessDescriptor {
        SmoothnessDescriptor::Smooth {
            lipschitz: self.lipschitz,
        }
    }
}

/// Feature space the added sample is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureUniverse {
    /// An explicit finite set of feature vectors.
    Points(Vec<Vec<f64>>),
    /// `||x|| <= 1`, searched over a deterministic candidate set.
    UnitBall,
}

/// `||x|| * max_k ||softmax(z^T x) - e_k||`, the norm of the single-sample
/// gradient term before the `1/(I+1)` factor. Uses
/// `||s - e_k||^2 = ||s||^2 - 2 s_k + 1`.
fn worst_label_term(x: &[f64], z: &[f64], classes: usize) -> f64 {
    let s = softmax(&logits(x, z, classes));
    let min_s = s.iter().copied().fold(f64::INFINITY, f64::min);
    let sq = (dot(&s, &s) - 2.0 * min_s + 1.0).max(0.0);
    norm2(x) * sq.sqrt()
}

/// Candidate feature vectors in the unit ball: coordinate directions, sign
/// patterns (for `J <= 12`), and directions that push each class logit down
/// relative to the others, each at several radii.
pub fn unit_ball_candidates(z: &[f64], features: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for j in 0..features {
        for sign in [1.0, -1.0] {
            let mut d = vec![0.0; features];
            d[j] = sign;
            dirs.push(d);
        }
    }
    if features <= 12 {
        let r = 1.0 / (features as f64).sqrt();
        for mask in 0u32..(1 << features) {
            dirs.push(
                (0..features)
                    .map(|j| if mask & (1 << j) != 0 { r } else { -r })
                    .collect(),
            );
        }
    }
    for k in 0..classes {
        let d: Vec<f64> = (0..features)
            .map(|j| {
                let row = &z[j * classes..(j + 1) * classes];
                let mean = row.iter().sum::<f64>() / classes as f64;
                mean - row[k]
            })
            .collect();
        let n = norm2(&d);
        if n > 0.0 {
            dirs.push(d.iter().map(|v| v / n).collect());
            dirs.push(d.iter().map(|v| -v / n).collect());
        }
    }
    let mut out = Vec::with_capacity(dirs.len() * 4);
    for d in dirs {
        for radius in [0.25, 0.5, 0.75, 1.0] {
            out.push(d.iter().map(|v| v * radius).collect());
        }
    }
    out
}

/// L2 sensitivity of the local gradient to one added sample:
/// `(1/(I+1)) max_{x, k} ||x (softmax(z^T x) - e_k)^T||_F`.
pub fn logistic_sensitivity(
    z: &[f64],
    universe: &FeatureUniverse,
    total: usize,
    features: usize,
    classes: usize,
) -> f64 {
    let best = match universe {
        FeatureUniverse::Points(points) => points
            .iter()
            .map(|x| worst_label_term(x, z, classes))
            .fold(0.0, f64::max),
        FeatureUniverse::UnitBall => unit_ball_candidates(z, features, classes)
            .iter()
            .map(|x| worst_label_term(x, z, classes))
            .fold(0.0, f64::max),
    };
    best / (total as f64 + 1.0)
}

/// Iterate-dependent sensitivity oracle for the engine. Under output
/// perturbation the gradient shift moves the closed-form prox minimizer by
/// at most `1/(1/eta + rho)` times as much.
pub fn logistic_sensitivity_source(
    universe: FeatureUniverse,
    total: usize,
    features: usize,
    classes: usize,
    mode: PerturbationMode,
) -> SensitivitySource {
    let n = features * classes;
    SensitivitySource::dynamic(move |q| {
        let mut d = logistic_sensitivity(q.iterate, &universe, total, features, classes);
        if mode == PerturbationMode::Output {
            d /= 1.0 / q.eta + q.rho;
        }
        SensitivityRecord::from_l2_bound(d, n).expect("sensitivity is finite and nonnegative")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    #[default]
    Iid,
    /// Samples sorted by label before splitting, so agents see few classes.
    LabelSkewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticSpec {
    pub agents: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub features: usize,
    pub classes: usize,
    /// Box half-width `u`.
    pub bound: f64,
    pub partition: PartitionScheme,
    /// Scale of the planted logits; larger means cleaner labels.
    pub signal: f64,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        Self {
            agents: 4,
            samples: 400,
            test_samples: 200,
            features: 5,
            classes: 3,
            bound: 0.1,
            partition: PartitionScheme::Iid,
            signal: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticInstance {
    pub dataset: LogisticDataset,
    pub test_features: Vec<Vec<f64>>,
    pub test_labels: Vec<usize>,
    pub planted: Vec<f64>,
    pub problem: ConsensusProblem,
}

/// Unit-norm Gaussian features, labels drawn from the softmax of a planted
/// parameter scaled by `signal`.
pub fn make_logistic(spec: &LogisticSpec, seed: u64) -> Result<LogisticInstance> {
    if spec.agents == 0 || spec.samples == 0 || spec.features == 0 || spec.classes < 2 {
        return Err(Error::Input(format!("invalid logistic sizes: {spec:?}")));
    }
    if !(spec.bound > 0.0) {
        return Err(Error::Input(format!("box bound must be positive, got {}", spec.bound)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, k) = (spec.features, spec.classes);
    let planted: Vec<f64> = (0..j * k)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut xs = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        for _ in 0..count {
            let raw: Vec<f64> = (0..j).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let n = norm2(&raw).max(f64::MIN_POSITIVE);
            let x: Vec<f64> = raw.iter().map(|v| v / n).collect();
            let l: Vec<f64> = logits(&x, &planted, k)
                .into_iter()
                .map(|v| v * spec.signal)
                .collect();
            let p = softmax(&l);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    y = c;
                    break;
                }
            }
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    };
    let (xs, ys) = draw(spec.samples, &mut rng);
    let (test_features, test_labels) = draw(spec.test_samples, &mut rng);

    let mut order: Vec<usize> = (0..spec.samples).collect();
    match spec.partition {
        PartitionScheme::Iid => order.shuffle(&mut rng),
        PartitionScheme::LabelSkewed => order.sort_by_key(|&i| ys[i]),
    }
    let partitions: Vec<LogisticPartition> = split_even(&order, spec.agents)
        .into_iter()
        .map(|idx| LogisticPartition {
            features: idx.iter().map(|&i| xs[i].clone()).collect(),
            labels: idx.iter().map(|&i| ys[i]).collect(),
        })
        .collect();
    let dataset = LogisticDataset::new(j, k, partitions)?;
    let problem = logistic_problem(&dataset, spec.bound)?;
    Ok(LogisticInstance {
        dataset,
        test_features,
        test_labels,
        planted,
        problem,
    })
}

/// Consensus problem with every agent boxed to `[-u, u]^{JK}`.
pub fn logistic_problem(dataset: &LogisticDataset, bound: f64) -> Result<ConsensusProblem> {
    let n = dataset.parameter_dimension();
    let total = dataset.total();
    let objectives: Vec<Arc<dyn LocalObjective>> = dataset
        .partitions
        .iter()
        .map(|p| {
            Arc::new(LogisticObjective::new(
                Arc::new(p.clone()),
                total,
                dataset.classes,
            )) as Arc<dyn LocalObjective>
        })
        .collect();
    let sets = vec![ConstraintSet::symmetric_box(n, bound)?; objectives.len()];
    ConsensusProblem::new(n, objectives, sets, vec![0.0; n])
}

/// Contiguous chunks whose sizes differ by at most one.
pub(crate) fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Writes one sample per line: features, then the label index.
pub fn write_samples(path: &Path, features: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (x, y) in features.iter().zip(labels) {
        let mut record: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        record.push(y.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format produced by [`write_samples`].
pub fn read_samples(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let fields: Vec<&str> = record.iter().collect();
        let Some((label, xs)) = fields.split_last() else {
            continue;
        };
        let parse_err = |what: &str, s: &str| {
            Error::Input(format!("line {}: bad {what} {s:?}", line + 1))
        };
        let x = xs
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| parse_err("feature", s)))
            .collect::<Result<Vec<_>>>()?;
        let y = label
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err("label", label))?;
        if let Some(first) = features.first().map(Vec::len) {
            if x.len() != first {
                return Err(dim_mismatch(&format!("line {}", line + 1), first, x.len()));
            }
        }
        features.push(x);
        labels.push(y);
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_and_gradient_examples() {
        let part = LogisticPartition {
            features: vec![vec![1.0]],
            labels: vec![0],
        };
        let vg = logistic_value_and_gradient(&part, 1, 2, &[0.0, 0.0]);
        assert!((vg.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(vg.gradient, vec![-0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((s[0] - 1.0).abs() < 1e-15 && s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sensitivity_example_and_scaling() {
        let u = FeatureUniverse::Points(vec![vec![1.0]]);
        let d = logistic_sensitivity(&[0.0, 0.0], &u, 1, 1, 2);
        assert!((d - 1.0 / (2f64.sqrt() * 2.0)).abs() < 1e-15);
        let d3 = logistic_sensitivity(&[0.0, 0.0], &u, 3, 1, 2);
        assert_eq!(d / d3, 2.0);
    }

    #[test]
    fn synthetic_partition_sizes_and_determinism() {
        let spec = LogisticSpec {
            agents: 2,
            samples: 10,
            test_samples: 4,
            ..LogisticSpec::default()
        };
        let a = make_logistic(&spec, 3).unwrap();
        let b = make_logistic(&spec, 3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let sizes: Vec<usize> = a.dataset.partitions.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![5, 5]);
        for p in &a.dataset.partitions {
            for x in &p.features {
                assert!(norm2(x) <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn label_skew_groups_classes() {
        let spec = LogisticSpec {
            agents: 3,
            samples: 90,
            partition: PartitionScheme::LabelSkewed,
            ..LogisticSpec::default()
        };
        let inst = make_logistic(&spec, 1).unwrap();
        let first = &inst.dataset.partitions[0].labels;
        assert!(first.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let xs = vec![vec![0.5, -0.25], vec![0.1, 0.2]];
        let ys = vec![2, 0];
        write_samples(&path, &xs, &ys).unwrap();
        let (rx, ry) = read_samples(&path).unwrap();
        assert_eq!((rx, ry), (xs, ys));
    }
}
