//! Labeled data, sort-and-shard partitioning, and label-skew measurement.
//!
//! Partitioning sorts samples by label, cuts the sorted sequence into shards
//! of `shard_size` samples (the last shard may be short), shuffles the shards
//! and hands them out to clients. Small shards approach a uniform random
//! split; large shards leave each client with only a few labels.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::child_rng;

const DATASET_MAGIC: &str = "FEDDS";
const DATASET_VERSION: &str = "v1";
const MAX_HEADER_LEN: usize = 256;

/// Spread of the per-class cluster centres relative to unit within-class noise.
pub const SYNTHETIC_CENTRE_SPREAD: f64 = 1.0;

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::Config(format!(
                "dataset needs positive feature and class counts (got {num_features}, {num_classes})"
            )));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::Dimension {
                expected: labels.len() * num_features,
                found: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }
}

/// One client's shard of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: LabeledDataset,
}

impl ClientDataset {
    pub fn n_k(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("label distribution"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Equal,
    NonEqual,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Equal => f.write_str("equal"),
            SplitMode::NonEqual => f.write_str("nonequal"),
        }
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "equal" | "e" => Ok(SplitMode::Equal),
            "nonequal" | "non-equal" | "ne" => Ok(SplitMode::NonEqual),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub shard_size: usize,
    pub split_mode: SplitMode,
    pub num_clients: usize,
    /// Lower bound on a client's share, as a fraction of `total / K`. NonEqual only.
    pub min_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub const DEFAULT_MIN_FRACTION: f64 = 0.2;

    pub fn new(shard_size: usize, split_mode: SplitMode, num_clients: usize, seed: u64) -> Self {
        Self {
            shard_size,
            split_mode,
            num_clients,
            min_fraction: Self::DEFAULT_MIN_FRACTION,
            seed,
        }
    }
}

/// Splits `dataset` across `spec.num_clients` clients by sort-and-shard.
///
/// Equal mode deals `floor(shards / K)` whole shards to every client in
/// round-robin order, breaks the leftover shards into single samples and
/// hands each one to the currently smallest client (lowest id on ties).
/// Client sizes therefore differ by at most `S`.
///
/// NonEqual mode draws a weight in `(min_fraction, 1]` per client, gives each
/// client a floor of `ceil(min_fraction * total / K)` samples and apportions
/// the rest by weight (largest remainder). Clients then take consecutive runs
/// of the shuffled shard sequence, so a shard may straddle two clients.
pub fn partition(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let total = dataset.len();
    let k = spec.num_clients;
    let s = spec.shard_size;
    if total == 0 {
        return Err(Error::Empty("dataset"));
    }
    if s == 0 || k == 0 {
        return Err(Error::Config(format!(
            "shard size and client count must be positive (S={s}, K={k})"
        )));
    }
    let num_shards = total.div_ceil(s);
    if num_shards < k {
        return Err(Error::Config(format!(
            "S={s} cuts {total} samples into {num_shards} shards, fewer than K={k} clients"
        )));
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&i| dataset.label(i));
    let mut shards: Vec<&[usize]> = order.chunks(s).collect();
    let mut rng = child_rng(spec.seed, "partition-shards", 0);
    shards.shuffle(&mut rng);

    let assignments: Vec<Vec<usize>> = match spec.split_mode {
        SplitMode::Equal => deal_equal(&shards, k),
        SplitMode::NonEqual => {
            if !(spec.min_fraction > 0.0 && spec.min_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "min_fraction must lie in (0, 1], got {}",
                    spec.min_fraction
                )));
            }
            deal_nonequal(&shards, total, k, spec.min_fraction, spec.seed)
        }
    };

    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientDataset {
            client_id,
            data: dataset.subset(&idx),
        })
        .collect())
}

fn deal_equal(shards: &[&[usize]], k: usize) -> Vec<Vec<usize>> {
    let per_client = shards.len() / k;
    let whole = per_client * k;
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, shard) in shards[..whole].iter().enumerate() {
        clients[i % k].extend_from_slice(shard);
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = clients
        .iter()
        .enumerate()
        .map(|(id, c)| Reverse((c.len(), id)))
        .collect();
    for &sample in shards[whole..].iter().flat_map(|s| s.iter()) {
        let Reverse((size, id)) = heap.pop().expect("k > 0");
        clients[id].push(sample);
        heap.push(Reverse((size + 1, id)));
    }
    clients
}

fn deal_nonequal(
    shards: &[&[usize]],
    total: usize,
    k: usize,
    min_fraction: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = child_rng(seed, "partition-nonequal", 0);
    // uniform on (min_fraction, 1]
    let weights: Vec<f64> = (0..k)
        .map(|_| 1.0 - rng.random::<f64>() * (1.0 - min_fraction))
        .collect();
    let floor = ((min_fraction * total as f64 / k as f64).ceil() as usize).min(total / k);
    let rest = total - floor * k;
    let weight_sum: f64 = weights.iter().sum();

    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| w / weight_sum * rest as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = rest - counts.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..k).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut sequence = shards.iter().flat_map(|s| s.iter().copied());
    counts
        .iter()
        .map(|&c| sequence.by_ref().take(floor + c).collect())
        .collect()
}

pub fn label_distribution(data: &LabeledDataset) -> Result<LabelDistribution> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut counts = vec![0usize; data.num_classes()];
    for &l in data.labels() {
        counts[l] += 1;
    }
    let n = data.len() as f64;
    Ok(LabelDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Sum over classes of the absolute probability difference. Lies in `[0, 2]`.
pub fn emd(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Dimension {
            expected: a.num_classes(),
            found: b.num_classes(),
        });
    }
    Ok(a.probs
        .iter()
        .zip(&b.probs)
        .map(|(p, q)| (p - q).abs())
        .sum())
}

pub fn mean_partition_emd(clients: &[ClientDataset], reference: &LabelDistribution) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut sum = 0.0;
    for c in clients {
        sum += emd(&label_distribution(&c.data)?, reference)?;
    }
    Ok(sum / clients.len() as f64)
}

/// Balanced class-conditional Gaussian clusters.
///
/// Sample `i` has label `i % num_classes`. Each class has a centre drawn from
/// `N(0, SYNTHETIC_CENTRE_SPREAD^2)` per feature; samples add unit Gaussian
/// noise. Values are rounded to `f32` so the dataset survives a file
/// round-trip bit for bit.
pub fn make_synthetic(
    num_samples: usize,
    num_features: usize,
    num_classes: usize,
    seed: u64,
) -> LabeledDataset {
    let mut centre_rng = child_rng(seed, "synthetic-centres", 0);
    let centre_dist = Normal::new(0.0, SYNTHETIC_CENTRE_SPREAD).expect("finite spread");
    let centres: Vec<f64> = (0..num_classes * num_features)
        .map(|_| centre_dist.sample(&mut centre_rng))
        .collect();

    let mut rng = child_rng(seed, "synthetic-samples", 0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(num_samples * num_features);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let label = i % num_classes;
        let centre = &centres[label * num_features..(label + 1) * num_features];
        for &c in centre {
            let v: f64 = c + noise.sample(&mut rng);
            features.push(f64::from(v as f32));
        }
        labels.push(label);
    }
    LabeledDataset {
        features,
        labels,
        num_features,
        num_classes,
    }
}

/// Stratified hold-out: `1/denominator` of every class goes to the test set.
pub fn train_test_split(
    data: &LabeledDataset,
    denominator: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if denominator < 2 {
        return Err(Error::Config("test split denominator must be at least 2".into()));
    }
    let mut rng = child_rng(seed, "test-split", 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..data.num_classes() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        members.shuffle(&mut rng);
        let n_test = members.len() / denominator;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} samples are too few for a 1/{denominator} test split",
            data.len()
        )));
    }
    Ok((data.subset(&train), data.subset(&test)))
}

/// Serialises a dataset: ASCII header `FEDDS v1 <n> <f> <c>\n`, then per
/// sample `f` little-endian `f32` features and one little-endian `u32` label.
pub fn encode_dataset(data: &LabeledDataset) -> Vec<u8> {
    let header = format!(
        "{DATASET_MAGIC} {DATASET_VERSION} {} {} {}\n",
        data.len(),
        data.num_features(),
        data.num_classes()
    );
    let mut out = Vec::with_capacity(header.len() + data.len() * (data.num_features() + 1) * 4);
    out.extend_from_slice(header.as_bytes());
    for i in 0..data.len() {
        for &v in data.row(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(data.label(i) as u32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() {
        return Err(Error::parse(0, "empty file"));
    }
    let header_end = bytes
        .iter()
        .take(MAX_HEADER_LEN)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(0, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| Error::parse(e.valid_up_to() as u64, "header is not ASCII"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 5 || fields[0] != DATASET_MAGIC || fields[1] != DATASET_VERSION {
        return Err(Error::parse(0, format!("bad header `{header}`")));
    }
    let mut dims = [0usize; 3];
    let mut offset = fields[0].len() + fields[1].len() + 2;
    for (slot, field) in dims.iter_mut().zip(&fields[2..]) {
        *slot = field
            .parse()
            .map_err(|_| Error::parse(offset as u64, format!("bad header field `{field}`")))?;
        offset += field.len() + 1;
    }
    let [n, nf, nc] = dims;
    if n == 0 || nf == 0 || nc == 0 {
        return Err(Error::parse(0, "header counts must be positive"));
    }

    let body_start = header_end + 1;
    let body = &bytes[body_start..];
    let row_bytes = (nf + 1) * 4;
    if body.len() != n * row_bytes {
        let full_rows = (body.len() / row_bytes).min(n);
        return Err(Error::parse(
            (body_start + full_rows * row_bytes) as u64,
            format!(
                "body holds {} bytes, expected {} for {n} rows of {row_bytes} bytes",
                body.len(),
                n * row_bytes
            ),
        ));
    }

    let mut features = Vec::with_capacity(n * nf);
    let mut labels = Vec::with_capacity(n);
    for (r, row) in body.chunks_exact(row_bytes).enumerate() {
        let (feat, label) = row.split_at(nf * 4);
        features.extend(
            feat.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))),
        );
        let label = u32::from_le_bytes(label.try_into().expect("4 bytes")) as usize;
        if label >= nc {
            return Err(Error::parse(
                (body_start + r * row_bytes + nf * 4) as u64,
                format!("label {label} out of range for {nc} classes"),
            ));
        }
        labels.push(label);
    }
    LabeledDataset::new(features, labels, nf, nc)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_dataset(data))?;
    Ok(())
}

/// Partition report: `client_id,n_k,emd` per client and a `mean,,<mean>` footer.
pub fn partition_report_csv(clients: &[ClientDataset], reference: &LabelDistribution) -> Result<String> {
    let mut out = String::from("client_id,n_k,emd\n");
    for c in clients {
        let e = emd(&label_distribution(&c.data)?, reference)?;
        out.push_str(&format!("{},{},{}\n", c.client_id, c.n_k(), e));
    }
    out.push_str(&format!("mean,,{}\n", mean_partition_emd(clients, reference)?));
    Ok(out)
}
