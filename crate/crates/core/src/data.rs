//! Synthetic data and non-IID partitioning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::data(format!("label {y} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: self.features.view(),
            labels: &self.labels,
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Pathological,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    /// Pathological mode only.
    pub classes_per_client: usize,
    /// Dirichlet mode only.
    pub alpha: f64,
    pub train_per_client: usize,
    pub test_per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        if self.train_per_client == 0 || self.test_per_client == 0 {
            return Err(Error::config("every client needs at least one train and one test sample"));
        }
        match self.mode {
            PartitionMode::Pathological => {
                if self.classes_per_client == 0 || self.classes_per_client > num_classes {
                    return Err(Error::config(format!(
                        "classes_per_client must be in [1, {num_classes}], got {}",
                        self.classes_per_client
                    )));
                }
            }
            PartitionMode::Dirichlet => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
                }
            }
        }
        Ok(())
    }
}

/// Gaussian blobs with unit isotropic noise. Class centers are pairwise at
/// least `separation` apart.
pub fn generate_blobs(
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || samples_per_class == 0 || !(separation > 0.0) {
        return Err(Error::config("blob parameters must all be positive"));
    }
    let mut rng = seed::rng(seed, Purpose::Data, 0, 0);
    let centers = blob_centers(num_classes, dims, separation, &mut rng);
    let n = num_classes * samples_per_class;
    let mut features = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for k in 0..samples_per_class {
            let mut row = features.row_mut(c * samples_per_class + k);
            for (x, &mu) in row.iter_mut().zip(center) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = mu + z;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

fn blob_centers(num_classes: usize, dims: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if num_classes <= dims {
        // Scaled, sign-randomized basis vectors: pairwise distance is exactly
        // `separation`.
        let radius = separation / std::f64::consts::SQRT_2;
        let mut axes: Vec<usize> = (0..dims).collect();
        axes.shuffle(rng);
        return axes[..num_classes]
            .iter()
            .map(|&a| {
                let mut c = vec![0.0; dims];
                c[a] = if rng.random_bool(0.5) { radius } else { -radius };
                c
            })
            .collect();
    }
    let mut half_width = separation * (num_classes as f64).powf(1.0 / dims as f64);
    'retry: loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        let mut failures = 0;
        while centers.len() < num_classes {
            let cand: Vec<f64> = (0..dims).map(|_| rng.random_range(-half_width..half_width)).collect();
            let far = centers.iter().all(|c| {
                c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= separation * separation
            });
            if far {
                centers.push(cand);
            } else {
                failures += 1;
                if failures > 1000 {
                    half_width *= 1.25;
                    continue 'retry;
                }
            }
        }
        return centers;
    }
}

/// Splits `total` proportionally to `weights` with largest-remainder rounding.
/// Ties in the remainder go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws shards without replacement given per-client class weights.
struct Pool {
    by_class: Vec<Vec<usize>>,
}

impl Pool {
    fn new(data: &Dataset, rng: &mut ChaCha8Rng) -> Self {
        let mut by_class = data.class_indices();
        for c in &mut by_class {
            c.shuffle(rng);
        }
        Self { by_class }
    }

    fn take(&mut self, class: usize, count: usize) -> Result<Vec<usize>> {
        let left = &mut self.by_class[class];
        if left.len() < count {
            return Err(Error::Partition {
                class,
                available: left.len(),
                requested: count,
            });
        }
        Ok(left.split_off(left.len() - count))
    }
}

fn build_shards(
    data: &Dataset,
    weights: &[Vec<f64>],
    train_per_client: usize,
    test_per_client: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClientShard>> {
    let mut pool = Pool::new(data, rng);
    weights
        .iter()
        .enumerate()
        .map(|(client_id, w)| {
            let train_counts = largest_remainder(w, train_per_client);
            let test_counts = largest_remainder(w, test_per_client);
            let mut train_idx = Vec::with_capacity(train_per_client);
            let mut test_idx = Vec::with_capacity(test_per_client);
            for class in 0..data.num_classes {
                train_idx.extend(pool.take(class, train_counts[class])?);
                test_idx.extend(pool.take(class, test_counts[class])?);
            }
            Ok(ClientShard {
                client_id,
                train: data.subset(&train_idx),
                test: data.subset(&test_idx),
            })
        })
        .collect()
}

/// Shards whose classes are given explicitly, split evenly across each
/// client's class set.
pub fn partition_by_class_sets(
    data: &Dataset,
    class_sets: &[Vec<usize>],
    train_per_client: usize,
    test_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let weights = class_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(Error::config("a client needs at least one class"));
            }
            let mut w = vec![0.0; data.num_classes];
            for &c in set {
                if c >= data.num_classes {
                    return Err(Error::config(format!("class {c} outside [0, {})", data.num_classes)));
                }
                w[c] = 1.0;
            }
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seed::rng(seed, Purpose::Partition, 0, 1);
    build_shards(data, &weights, train_per_client, test_per_client, &mut rng)
}

/// Deals classes from a stream of freshly shuffled class permutations.
/// Each client takes the next `k` distinct classes.
pub fn pathological_class_sets(num_classes: usize, num_clients: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut stream: Vec<usize> = Vec::new();
    let refill = |stream: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        let mut perm: Vec<usize> = (0..num_classes).collect();
        perm.shuffle(rng);
        stream.extend(perm);
    };
    let mut cursor = 0;
    (0..num_clients)
        .map(|_| {
            let mut set = Vec::with_capacity(k);
            while set.len() < k {
                let mut j = cursor;
                loop {
                    if j >= stream.len() {
                        refill(&mut stream, rng);
                    }
                    if !set.contains(&stream[j]) {
                        break;
                    }
                    j += 1;
                }
                stream.swap(cursor, j);
                set.push(stream[cursor]);
                cursor += 1;
            }
            set.sort_unstable();
            set
        })
        .collect()
}

pub fn partition_pathological(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.mode != PartitionMode::Pathological {
        return Err(Error::config("partition_pathological called with a non-pathological spec"));
    }
    spec.validate(data.num_classes)?;
    let mut rng = seed::rng(spec.seed, Purpose::Partition, 0, 0);
    let sets = pathological_class_sets(data.num_classes, spec.num_clients, spec.classes_per_client, &mut rng);
    partition_by_class_sets(data, &sets, spec.train_per_client, spec.test_per_client, spec.seed)
}

/// Log of a Gamma(shape, 1) draw, stable for very small shapes where the
/// draw itself underflows: `G(a) = G(a + 1) * U^(1/a)`.
fn log_gamma_draw(shape: f64, rng: &mut ChaCha8Rng) -> f64 {
    let boosted = Gamma::new(shape + 1.0, 1.0).expect("positive shape");
    let g: f64 = boosted.sample(rng);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    g.ln() + u.ln() / shape
}

/// One Dirichlet(concentration) draw.
pub fn dirichlet_draw(concentration: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let logs: Vec<f64> = concentration.iter().map(|&a| log_gamma_draw(a, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn partition_dirichlet(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.mode != PartitionMode::Dirichlet {
        return Err(Error::config("partition_dirichlet called with a non-Dirichlet spec"));
    }
    spec.validate(data.num_classes)?;
    let hist = data.histogram();
    let total = data.len() as f64;
    let concentration: Vec<f64> = hist.iter().map(|&h| spec.alpha * h as f64 / total).collect();
    if concentration.iter().any(|&a| a <= 0.0) {
        return Err(Error::data("every class needs at least one sample for a Dirichlet prior"));
    }
    let mut rng = seed::rng(spec.seed, Purpose::Partition, 0, 0);
    let weights: Vec<Vec<f64>> = (0..spec.num_clients)
        .map(|_| dirichlet_draw(&concentration, &mut rng))
        .collect();
    build_shards(data, &weights, spec.train_per_client, spec.test_per_client, &mut rng)
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.mode {
        PartitionMode::Pathological => partition_pathological(data, spec),
        PartitionMode::Dirichlet => partition_dirichlet(data, spec),
    }
}

/// `client_id,class,count` rows for every non-zero training count.
pub fn write_partition_viz<W: Write>(shards: &[ClientShard], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["client_id", "class", "count"])?;
    for shard in shards {
        let counts: BTreeMap<usize, usize> = shard
            .train
            .histogram()
            .into_iter()
            .enumerate()
            .filter(|&(_, n)| n > 0)
            .collect();
        for (class, count) in counts {
            w.serialize((shard.client_id, class, count))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_partition_viz(shards: &[ClientShard], path: impl AsRef<Path>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_partition_viz(shards, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: PartitionMode, clients: usize) -> PartitionSpec {
        PartitionSpec {
            mode,
            num_clients: clients,
            classes_per_client: 2,
            alpha: 0.5,
            train_per_client: 50,
            test_per_client: 10,
            seed: 11,
        }
    }

    #[test]
    fn blob_histogram_and_determinism() {
        let a = generate_blobs(3, 4, 17, 5.0, 2).unwrap();
        assert_eq!(a.histogram(), vec![17, 17, 17]);
        assert_eq!(a, generate_blobs(3, 4, 17, 5.0, 2).unwrap());
        assert_ne!(a, generate_blobs(3, 4, 17, 5.0, 3).unwrap());
    }

    #[test]
    fn centers_respect_separation_in_low_dims() {
        let mut rng = seed::rng(0, Purpose::Data, 0, 0);
        let centers = blob_centers(9, 2, 3.0, &mut rng);
        for i in 0..9 {
            for j in 0..i {
                let d: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 3.0);
            }
        }
    }

    #[test]
    fn largest_remainder_hits_total() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.0, 3.0], 7), vec![0, 7]);
    }

    #[test]
    fn pathological_class_sets_have_k_distinct_classes() {
        let mut rng = seed::rng(4, Purpose::Partition, 0, 0);
        let sets = pathological_class_sets(5, 13, 3, &mut rng);
        for s in &sets {
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        let used: std::collections::BTreeSet<_> = sets.iter().flatten().collect();
        assert_eq!(used.len(), 5);
    }

    #[test]
    fn pathological_shards_hold_two_classes() {
        let data = generate_blobs(6, 3, 200, 4.0, 1).unwrap();
        let shards = partition_pathological(&data, &spec(PartitionMode::Pathological, 10)).unwrap();
        for s in &shards {
            let classes: Vec<_> = s.train.histogram().iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect();
            let test_classes: Vec<_> = s.test.histogram().iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect();
            assert_eq!(classes.len(), 2);
            assert_eq!(classes, test_classes);
            assert_eq!(s.train.len(), 50);
            assert_eq!(s.test.len(), 10);
        }
    }

    #[test]
    fn single_client_with_all_classes_matches_source() {
        let data = generate_blobs(4, 2, 30, 4.0, 1).unwrap();
        let mut sp = spec(PartitionMode::Pathological, 1);
        sp.classes_per_client = 4;
        sp.train_per_client = 80;
        sp.test_per_client = 40;
        let shards = partition_pathological(&data, &sp).unwrap();
        assert_eq!(shards[0].train.histogram(), vec![20; 4]);
        assert_eq!(shards[0].test.histogram(), vec![10; 4]);
    }

    #[test]
    fn exhausted_class_is_named() {
        let data = generate_blobs(2, 2, 20, 4.0, 1).unwrap();
        let err = partition_pathological(&data, &spec(PartitionMode::Pathological, 2)).unwrap_err();
        assert!(matches!(err, Error::Partition { .. }));
        assert!(err.to_string().contains("class"));
    }

    #[test]
    fn dirichlet_is_deterministic_with_exact_totals() {
        let data = generate_blobs(4, 2, 400, 4.0, 1).unwrap();
        let sp = spec(PartitionMode::Dirichlet, 8);
        let a = partition_dirichlet(&data, &sp).unwrap();
        assert_eq!(a, partition_dirichlet(&data, &sp).unwrap());
        assert!(a.iter().all(|s| s.train.len() == 50 && s.test.len() == 10));
    }

    #[test]
    fn dirichlet_draw_survives_tiny_alpha() {
        let mut rng = seed::rng(0, Purpose::Partition, 0, 0);
        for _ in 0..100 {
            let q = dirichlet_draw(&[1e-4; 5], &mut rng);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let data = generate_blobs(2, 2, 20, 4.0, 1).unwrap();
        assert!(partition_dirichlet(&data, &spec(PartitionMode::Pathological, 1)).is_err());
        let mut bad = spec(PartitionMode::Dirichlet, 1);
        bad.alpha = 0.0;
        assert!(matches!(partition_dirichlet(&data, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn viz_rows_cover_train_counts() {
        let data = generate_blobs(4, 2, 100, 4.0, 1).unwrap();
        let sets = vec![vec![0, 1], vec![2, 3]];
        let shards = partition_by_class_sets(&data, &sets, 40, 10, 3).unwrap();
        let mut buf = Vec::new();
        write_partition_viz(&shards, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "client_id,class,count\n0,0,20\n0,1,20\n1,2,20\n1,3,20\n");
    }
}
