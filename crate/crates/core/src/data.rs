//! Synthetic clustered tasks and the two label-heterogeneity partitioners.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, WeightedIndex};

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::vecops::argmax;

/// Fraction of each device shard held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// One device's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    pub device_id: usize,
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// Ground-truth concept for synthetic tasks.
    pub true_cluster: Option<usize>,
}

impl DeviceShard {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How labels are spread across devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Dirichlet { alpha: f64 },
    Pathological { labels_per_device: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub devices: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn dirichlet(alpha: f64, devices: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Dirichlet { alpha },
            devices,
            seed,
        }
    }

    pub fn pathological(labels_per_device: usize, devices: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Pathological { labels_per_device },
            devices,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::input("partition needs at least one device"));
        }
        match self.mode {
            PartitionMode::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::input(format!("dirichlet alpha must be positive, got {alpha}")))
            }
            PartitionMode::Pathological { labels_per_device: 0 } => {
                Err(Error::input("labels_per_device must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Devices are dealt round-robin to `k_true` random linear-softmax teachers
/// over a shared standard Gaussian input. Each device gets
/// `samples_per_device` training rows and a quarter as many test rows
/// (an 80/20 split of the generated data).
pub fn make_synthetic_clusters(
    k_true: usize,
    m: usize,
    input_dim: usize,
    num_classes: usize,
    samples_per_device: usize,
    seed: u64,
) -> Result<Vec<DeviceShard>> {
    if k_true == 0 {
        return Err(Error::input("k_true must be at least 1"));
    }
    if m < k_true {
        return Err(Error::input(format!("m = {m} is smaller than k_true = {k_true}")));
    }
    if input_dim == 0 || num_classes < 2 || samples_per_device == 0 {
        return Err(Error::input(
            "synthetic task needs input_dim >= 1, classes >= 2, samples_per_device >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teachers: Vec<Vec<f64>> = (0..k_true)
        .map(|_| {
            (0..num_classes * input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let test_per_device = (samples_per_device / 4).max(1);

    let shards = (0..m)
        .map(|device_id| {
            let concept = device_id % k_true;
            let teacher = &teachers[concept];
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            drng.set_stream(device_id as u64 + 1);
            let mut draw = |n: usize| {
                let mut set = LabeledSet::empty(input_dim, num_classes);
                let mut x = vec![0.0; input_dim];
                let mut logits = vec![0.0; num_classes];
                for _ in 0..n {
                    x.iter_mut().for_each(|v| *v = drng.sample::<f64, _>(StandardNormal));
                    for (o, z) in logits.iter_mut().enumerate() {
                        let row = &teacher[o * input_dim..(o + 1) * input_dim];
                        *z = row.iter().zip(&x).map(|(w, xi)| w * xi).sum();
                    }
                    set.push(&x, argmax(&logits));
                }
                set
            };
            let train = draw(samples_per_device);
            let test = draw(test_per_device);
            DeviceShard {
                device_id,
                train,
                test,
                true_cluster: Some(concept),
            }
        })
        .collect();
    Ok(shards)
}

/// A pooled dataset of `n` examples: balanced labels, each class a unit
/// Gaussian blob around a random mean.
pub fn make_class_mixture(n: usize, input_dim: usize, num_classes: usize, seed: u64) -> Result<LabeledSet> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::input("class mixture needs positive dims"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..num_classes * input_dim)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut set = LabeledSet::empty(input_dim, num_classes);
    let mut x = vec![0.0; input_dim];
    for i in 0..n {
        let y = i % num_classes;
        for (j, v) in x.iter_mut().enumerate() {
            *v = means[y * input_dim + j] + rng.sample::<f64, _>(StandardNormal);
        }
        set.push(&x, y);
    }
    Ok(set)
}

/// Routes each class across devices with Dirichlet(alpha) proportions and
/// returns, per device, the dataset rows it owns.
///
/// Devices are topped up to at least two rows (one train, one test) by
/// taking rows from the currently largest shard.
pub fn dirichlet_rows(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let PartitionMode::Dirichlet { alpha } = spec.mode else {
        return Err(Error::input("dirichlet_rows called with a non-dirichlet spec"));
    };
    let m = spec.devices;
    if labels.len() < 2 * m {
        return Err(Error::input(format!(
            "dataset of {} rows cannot give {m} devices a train and a test row each",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let mut by_class = vec![Vec::new(); num_classes];
    for (row, &y) in labels.iter().enumerate() {
        by_class[y].push(row);
    }

    let mut devices = vec![Vec::new(); m];
    for rows in by_class.iter_mut() {
        let mut props: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = props.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            // every draw underflowed; concentrate on one device
            props.iter_mut().for_each(|p| *p = 0.0);
            props[rng.gen_range(0..m)] = 1.0;
        }
        rows.shuffle(&mut rng);
        if rows.is_empty() {
            continue;
        }
        let pick = WeightedIndex::new(&props).map_err(|e| Error::input(e.to_string()))?;
        for &row in rows.iter() {
            devices[pick.sample(&mut rng)].push(row);
        }
    }

    repair_small_shards(&mut devices, 2);
    for rows in &mut devices {
        rows.sort_unstable();
    }
    Ok(devices)
}

/// Moves rows from the largest shard (lowest index on ties) into any shard
/// holding fewer than `min_rows`.
fn repair_small_shards(devices: &mut [Vec<usize>], min_rows: usize) {
    loop {
        let Some(needy) = devices.iter().position(|d| d.len() < min_rows) else {
            return;
        };
        let donor = (0..devices.len())
            .max_by(|&a, &b| devices[a].len().cmp(&devices[b].len()).then(b.cmp(&a)))
            .unwrap();
        if devices[donor].len() <= min_rows {
            return;
        }
        let row = devices[donor].pop().unwrap();
        devices[needy].push(row);
    }
}

/// Sorts rows by label, cuts each label into contiguous slices, and deals
/// every device `n` slices of `n` distinct labels.
///
/// Device slot `j` of device `i` holds label `(i * n + j) mod C`, which
/// spreads the `m * n` slots over labels as evenly as possible and keeps a
/// device's labels distinct.
pub fn pathological_rows(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let PartitionMode::Pathological { labels_per_device: n } = spec.mode else {
        return Err(Error::input("pathological_rows called with a non-pathological spec"));
    };
    let m = spec.devices;
    if n > num_classes {
        return Err(Error::input(format!(
            "labels_per_device = {n} exceeds the {num_classes} classes"
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (row, &y) in labels.iter().enumerate() {
        by_class[y].push(row);
    }
    let present = by_class.iter().filter(|r| !r.is_empty()).count();
    if m * n < present {
        return Err(Error::input(format!(
            "{m} devices x {n} labels cannot cover all {present} labels present"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);

    // slot owners per label, in dealing order
    let mut owners = vec![Vec::new(); num_classes];
    for (slot_device, &device) in order.iter().enumerate() {
        for j in 0..n {
            owners[(slot_device * n + j) % num_classes].push(device);
        }
    }

    let mut devices = vec![Vec::new(); m];
    for (label, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng);
        let slots = &owners[label];
        if slots.is_empty() {
            continue;
        }
        let base = rows.len() / slots.len();
        let extra = rows.len() % slots.len();
        let mut start = 0;
        for (s, &device) in slots.iter().enumerate() {
            let len = base + usize::from(s < extra);
            devices[device].extend_from_slice(&rows[start..start + len]);
            start += len;
        }
    }
    if let Some(d) = devices.iter().position(|d| d.len() < 2) {
        return Err(Error::input(format!(
            "device {d} received fewer than 2 rows; dataset too small for {m} devices"
        )));
    }
    for rows in &mut devices {
        rows.sort_unstable();
    }
    Ok(devices)
}

pub fn dirichlet_partition(dataset: &LabeledSet, spec: &PartitionSpec) -> Result<Vec<DeviceShard>> {
    let rows = dirichlet_rows(dataset.labels(), dataset.num_classes(), spec)?;
    Ok(into_shards(dataset, rows, spec.seed))
}

pub fn pathological_partition(dataset: &LabeledSet, spec: &PartitionSpec) -> Result<Vec<DeviceShard>> {
    let rows = pathological_rows(dataset.labels(), dataset.num_classes(), spec)?;
    Ok(into_shards(dataset, rows, spec.seed))
}

/// Dispatches on the spec's mode.
pub fn partition(dataset: &LabeledSet, spec: &PartitionSpec) -> Result<Vec<DeviceShard>> {
    match spec.mode {
        PartitionMode::Dirichlet { .. } => dirichlet_partition(dataset, spec),
        PartitionMode::Pathological { .. } => pathological_partition(dataset, spec),
    }
}

fn into_shards(dataset: &LabeledSet, rows: Vec<Vec<usize>>, seed: u64) -> Vec<DeviceShard> {
    rows.into_iter()
        .enumerate()
        .map(|(device_id, rows)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17);
            rng.set_stream(device_id as u64);
            let (train, test) = stratified_split(dataset, &rows, &mut rng);
            DeviceShard {
                device_id,
                train: dataset.subset(&train),
                test: dataset.subset(&test),
                true_cluster: None,
            }
        })
        .collect()
}

/// Splits `rows` (at least two) into train/test with about
/// [`TEST_FRACTION`] held out, allocating the test quota across labels by
/// largest remainder. Both sides are non-empty.
pub fn stratified_split<R: Rng>(dataset: &LabeledSet, rows: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    debug_assert!(rows.len() >= 2);
    let n = rows.len();
    let target = ((TEST_FRACTION * n as f64).round() as usize).clamp(1, n - 1);

    let mut groups = vec![Vec::new(); dataset.num_classes()];
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(rng);
    for &r in &shuffled {
        groups[dataset.label(r)].push(r);
    }
    let mut quota: Vec<usize> = groups
        .iter()
        .map(|g| (TEST_FRACTION * g.len() as f64).floor() as usize)
        .collect();
    let mut assigned: usize = quota.iter().sum();
    let mut by_remainder: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = TEST_FRACTION * groups[a].len() as f64 - quota[a] as f64;
        let rb = TEST_FRACTION * groups[b].len() as f64 - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    while assigned < target {
        let before = assigned;
        for &c in &by_remainder {
            if assigned == target {
                break;
            }
            if quota[c] < groups[c].len() {
                quota[c] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }

    let mut train = Vec::with_capacity(n - target);
    let mut test = Vec::with_capacity(target);
    for (g, q) in groups.iter().zip(&quota) {
        test.extend_from_slice(&g[..*q]);
        train.extend_from_slice(&g[*q..]);
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn flatten(devices: &[Vec<usize>]) -> Vec<usize> {
        let mut all: Vec<usize> = devices.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    #[test]
    fn synthetic_single_concept() {
        let shards = make_synthetic_clusters(1, 6, 4, 3, 20, 1).unwrap();
        assert!(shards.iter().all(|s| s.true_cluster == Some(0)));
        assert!(shards.iter().all(|s| s.train.len() == 20 && s.test.len() == 5));
    }

    #[test]
    fn synthetic_round_robin_counts() {
        let shards = make_synthetic_clusters(4, 20, 4, 3, 10, 1).unwrap();
        let mut counts = BTreeMap::new();
        for s in &shards {
            *counts.entry(s.true_cluster.unwrap()).or_insert(0) += 1;
        }
        assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![5; 4]);
        assert!(make_synthetic_clusters(5, 4, 4, 3, 10, 1).is_err());
        assert_eq!(make_synthetic_clusters(4, 20, 4, 3, 10, 1).unwrap(), shards);
    }

    #[test]
    fn dirichlet_conserves_rows() {
        let data = make_class_mixture(1000, 2, 10, 3).unwrap();
        let spec = PartitionSpec::dirichlet(0.1, 50, 9);
        let rows = dirichlet_rows(data.labels(), 10, &spec).unwrap();
        assert_eq!(flatten(&rows), (0..1000).collect::<Vec<_>>());
        assert!(rows.iter().all(|r| r.len() >= 2));
        let shards = dirichlet_partition(&data, &spec).unwrap();
        assert_eq!(shards.iter().map(DeviceShard::len).sum::<usize>(), 1000);
        assert!(shards.iter().all(|s| !s.train.is_empty() && !s.test.is_empty()));
    }

    #[test]
    fn dirichlet_rejects_tiny_dataset() {
        let data = make_class_mixture(5, 2, 2, 3).unwrap();
        assert!(dirichlet_partition(&data, &PartitionSpec::dirichlet(1.0, 10, 0)).is_err());
        assert!(dirichlet_partition(&data, &PartitionSpec::dirichlet(-1.0, 2, 0)).is_err());
    }

    #[test]
    fn huge_alpha_is_near_iid() {
        let data = make_class_mixture(5000, 2, 10, 3).unwrap();
        let shards = dirichlet_partition(&data, &PartitionSpec::dirichlet(1e6, 10, 4)).unwrap();
        for s in &shards {
            let total = s.len() as f64;
            let mut hist = s.train.histogram();
            for (h, t) in hist.iter_mut().zip(s.test.histogram()) {
                *h += t;
            }
            for h in hist {
                assert!((h as f64 / total - 0.1).abs() < 0.05);
            }
        }
    }

    #[test]
    fn pathological_support_is_exact() {
        let data = make_class_mixture(5000, 2, 10, 3).unwrap();
        let spec = PartitionSpec::pathological(3, 100, 2);
        let rows = pathological_rows(data.labels(), 10, &spec).unwrap();
        assert_eq!(flatten(&rows), (0..5000).collect::<Vec<_>>());
        for r in &rows {
            let mut labels: Vec<usize> = r.iter().map(|&i| data.label(i)).collect();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), 3);
        }
    }

    #[test]
    fn pathological_all_labels() {
        let data = make_class_mixture(400, 2, 4, 3).unwrap();
        let shards = pathological_partition(&data, &PartitionSpec::pathological(4, 10, 1)).unwrap();
        for s in &shards {
            let mut h = s.train.histogram();
            for (a, b) in h.iter_mut().zip(s.test.histogram()) {
                *a += b;
            }
            assert_eq!(h.iter().filter(|&&c| c > 0).count(), 4);
        }
        assert!(pathological_partition(&data, &PartitionSpec::pathological(5, 10, 1)).is_err());
    }

    #[test]
    fn stratified_split_keeps_both_sides() {
        let data = make_class_mixture(20, 2, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, test) = stratified_split(&data, &[0, 1], &mut rng);
        assert_eq!((train.len(), test.len()), (1, 1));
        let rows: Vec<usize> = (0..20).collect();
        let (train, test) = stratified_split(&data, &rows, &mut rng);
        assert_eq!(test.len(), 4);
        assert_eq!(train.len(), 16);
        let test_labels: Vec<usize> = test.iter().map(|&r| data.label(r)).collect();
        assert_eq!(test_labels.iter().filter(|&&y| y == 0).count(), 2);
    }
}
