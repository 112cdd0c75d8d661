//! Embedding/label ingestion, labeled-fraction splits, stratified batching,
//! and a Gaussian-cluster generator for hermetic experiments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"CSSDAEMB";
pub const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER_LEN: usize = 8 + 4 * 3;

/// A sentence-level vector. Values are held at `f64` but always originate
/// from (or are rounded to) `f32`, so saving is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("embedding has zero dimensions"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("embedding value {i} is not finite")));
        }
        Ok(Self(values))
    }

    /// Rounds every value to `f32` precision.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub embedding: EmbeddingVector,
    pub label: Option<usize>,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Class names. The fake class is index `k` and never appears in data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::arg("label vocabulary is empty"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::arg("label names must be non-empty"));
            }
            if names[..i].contains(name) {
                return Err(Error::arg(format!("duplicate label name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    /// `c0, c1, ...`, zero-padded so lexical order equals index order.
    pub fn numbered(k: usize) -> Result<Self> {
        let width = k.saturating_sub(1).to_string().len();
        Self::new((0..k).map(|i| format!("c{i:0width$}")))
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn fake_index(&self) -> usize {
        self.k()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    vocab: LabelVocab,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, vocab: LabelVocab) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.embedding.dim())
            .ok_or_else(|| Error::data("dataset has no samples"))?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &samples {
            if s.embedding.dim() != dim {
                return Err(Error::data(format!(
                    "sample {} has dimension {}, expected {dim}",
                    s.id,
                    s.embedding.dim()
                )));
            }
            if let Some(label) = s.label {
                if label >= vocab.k() {
                    return Err(Error::data(format!(
                        "sample {} has label {label} outside 0..{}",
                        s.id,
                        vocab.k()
                    )));
                }
            }
            if !seen.insert(s.id) {
                return Err(Error::data(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            vocab,
            dim,
        })
    }

    /// Pairs embedding rows with a label mapping keyed by row index.
    pub fn assemble(
        embeddings: Vec<EmbeddingVector>,
        labels: &BTreeMap<usize, Option<usize>>,
        vocab: LabelVocab,
    ) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::data(format!(
                "{} embedding rows but {} label rows",
                embeddings.len(),
                labels.len()
            )));
        }
        let samples = embeddings
            .into_iter()
            .enumerate()
            .map(|(id, embedding)| {
                let label = *labels
                    .get(&id)
                    .ok_or_else(|| Error::data(format!("no label row for embedding {id}")))?;
                Ok(Sample {
                    id,
                    embedding,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, vocab)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_labeled()).count()
    }

    pub fn embeddings(&self) -> Vec<EmbeddingVector> {
        self.samples.iter().map(|s| s.embedding.clone()).collect()
    }

    /// Only the labeled samples; `None` if there are none.
    pub fn labeled_only(&self) -> Option<Dataset> {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| s.is_labeled())
            .cloned()
            .collect();
        if samples.is_empty() {
            return None;
        }
        Some(Dataset {
            samples,
            vocab: self.vocab.clone(),
            dim: self.dim,
        })
    }

    /// Stratified random subset of exactly `n` samples, ids preserved.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::arg(format!(
                "cannot take {n} of {} samples",
                self.len()
            )));
        }
        let keep = stratified_pick(&self.samples, n, seed, |s| s.label);
        let samples = self
            .samples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect();
        Dataset::new(samples, self.vocab.clone())
    }

    /// Samples renumbered `0..n` in their current order, as written to disk.
    pub fn renumbered(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(id, s)| Sample { id, ..s.clone() })
            .collect();
        Dataset {
            samples,
            vocab: self.vocab.clone(),
            dim: self.dim,
        }
    }
}

/// Marks `n` of `items` as kept, allocating per stratum by largest
/// remainder and choosing within each stratum by a seeded shuffle.
fn stratified_pick<T, F>(items: &[T], n: usize, seed: u64, stratum: F) -> Vec<bool>
where
    F: Fn(&T) -> Option<usize>,
{
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(stratum(item)).or_default().push(i);
    }
    let total = items.len() as f64;
    let mut quotas: Vec<(usize, f64)> = groups
        .values()
        .map(|members| {
            let exact = n as f64 * members.len() as f64 / total;
            let floor = (exact + 1e-9).floor();
            (floor as usize, exact - floor)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &g in order.iter().take(n.saturating_sub(assigned)) {
        quotas[g].0 += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; items.len()];
    for (members, (quota, _)) in groups.values().zip(&quotas) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(*quota) {
            keep[i] = true;
        }
    }
    keep
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps labels on `ceil(fraction * labeled)` samples, stratified by class,
/// and strips the rest. Already-unlabeled samples stay unlabeled.
pub fn split_scheme(dataset: &Dataset, labeled_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::arg(format!(
            "labeled fraction {labeled_fraction} is outside (0, 1]"
        )));
    }
    let labeled: Vec<&Sample> = dataset.samples.iter().filter(|s| s.is_labeled()).collect();
    let target = fraction_count(labeled_fraction, labeled.len()).min(labeled.len());
    let keep = stratified_pick(&labeled, target, seed, |s| s.label);
    let kept: std::collections::BTreeSet<usize> = labeled
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.id)
        .collect();
    let samples = dataset
        .samples
        .iter()
        .map(|s| Sample {
            label: s.label.filter(|_| kept.contains(&s.id)),
            ..s.clone()
        })
        .collect();
    Dataset::new(samples, dataset.vocab.clone())
}

/// Sample indices (into `Dataset::samples`) of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded per-epoch batching. Labeled and unlabeled pools are shuffled
/// separately and dealt out so every batch carries the global labeled ratio
/// (cumulative rounding); the last batch may be short.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::arg(format!("batch size {batch_size} is below 2")));
    }
    let (mut labeled, mut unlabeled): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.samples[i].is_labeled());
    if labeled.is_empty() {
        return Err(Error::config("dataset has no labeled samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    labeled.shuffle(&mut rng);
    unlabeled.shuffle(&mut rng);

    let n = dataset.len();
    let n_labeled = labeled.len();
    let labeled_before = |pos: usize| pos * n_labeled / n;
    let mut batches = Vec::with_capacity(n.div_ceil(batch_size));
    let (mut li, mut ui) = (0, 0);
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let take_labeled = labeled_before(end) - labeled_before(start);
        let take_unlabeled = (end - start) - take_labeled;
        batches.push(Batch {
            labeled: labeled[li..li + take_labeled].to_vec(),
            unlabeled: unlabeled[ui..ui + take_unlabeled].to_vec(),
        });
        li += take_labeled;
        ui += take_unlabeled;
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub k: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            k: 3,
            dim: 64,
            per_class: 200,
            separation: 10.0,
            noise_sd: 1.0,
            seed: 7,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::arg("synthetic data needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::arg("synthetic data needs dimension at least 2"));
        }
        if self.per_class < 1 {
            return Err(Error::arg("synthetic data needs at least 1 sample per class"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::arg("cluster separation must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::arg("noise standard deviation must be non-negative"));
        }
        Ok(())
    }
}

/// Cluster centres: standard-normal directions rescaled so the closest pair
/// sits exactly `separation` apart.
fn cluster_means(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    loop {
        let means: Vec<Vec<f64>> = (0..params.k)
            .map(|_| {
                (0..params.dim)
                    .map(|_| StandardNormal.sample(&mut *rng))
                    .collect()
            })
            .collect();
        let mut closest = f64::INFINITY;
        for a in 0..params.k {
            for b in a + 1..params.k {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                closest = closest.min(d2.sqrt());
            }
        }
        if closest > 1e-6 {
            let scale = params.separation / closest;
            return means
                .into_iter()
                .map(|m| m.into_iter().map(|x| x * scale).collect())
                .collect();
        }
    }
}

fn draw_cluster_samples(
    params: &SynthParams,
    means: &[Vec<f64>],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(per_class * params.k);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let values: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    (m + params.noise_sd * z) as f32 as f64
                })
                .collect();
            samples.push(Sample {
                id: samples.len(),
                embedding: EmbeddingVector::new(values)?,
                label: Some(label),
            });
        }
    }
    Ok(samples)
}

/// `k` isotropic Gaussian clusters, fully labeled, class-major order.
pub fn synth_clusters(params: &SynthParams) -> Result<Dataset> {
    Ok(synth_with_holdout(params, 0)?.0)
}

/// Like [`synth_clusters`], plus a held-out set of `holdout_per_class`
/// samples per class drawn from the same clusters.
pub fn synth_with_holdout(params: &SynthParams, holdout_per_class: usize) -> Result<(Dataset, Option<Dataset>)> {
    params.validate()?;
    let vocab = LabelVocab::numbered(params.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let means = cluster_means(params, &mut rng);
    let train = draw_cluster_samples(params, &means, params.per_class, &mut rng)?;
    let train = Dataset::new(train, vocab.clone())?;
    let holdout = if holdout_per_class > 0 {
        let test = draw_cluster_samples(params, &means, holdout_per_class, &mut rng)?;
        Some(Dataset::new(test, vocab)?)
    } else {
        None
    };
    Ok((train, holdout))
}

pub fn encode_embeddings(rows: &[EmbeddingVector]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, |r| r.dim());
    if rows.iter().any(|r| r.dim() != dim) {
        return Err(Error::data("embedding rows have differing dimensions"));
    }
    let count = u32::try_from(rows.len()).map_err(|_| Error::data("too many embedding rows"))?;
    let dim_u32 = u32::try_from(dim).map_err(|_| Error::data("embedding dimension too large"))?;
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * rows.len() * dim);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim_u32.to_le_bytes());
    for row in rows {
        for &v in row.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingVector>> {
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(Error::format(format!(
            "embedding file is {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::format("bad magic, not a CSSDAEMB file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != EMBEDDING_VERSION {
        return Err(Error::format(format!("unsupported embedding version {version}")));
    }
    let count = word(12) as usize;
    let dim = word(16) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(EMBEDDING_HEADER_LEN))
        .ok_or_else(|| Error::format("embedding header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "payload holds {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    if count > 0 && dim == 0 {
        return Err(Error::format("embedding dimension is zero"));
    }
    let floats: Vec<f32> = bytes[EMBEDDING_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    floats
        .chunks_exact(dim.max(1))
        .take(count)
        .enumerate()
        .map(|(i, row)| {
            EmbeddingVector::from_f32(row).map_err(|e| Error::data(format!("embedding row {i}: {e}")))
        })
        .collect()
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>> {
    decode_embeddings(&fs::read(path)?)
}

pub fn save_embeddings(path: &Path, rows: &[EmbeddingVector]) -> Result<()> {
    fs::write(path, encode_embeddings(rows)?)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::data(format!("malformed labels csv: {other:?}")),
    }
}

fn read_label_rows(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::data(format!(
            "labels csv header must be `id,label`, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let id = record[0]
            .parse::<usize>()
            .map_err(|_| Error::data(format!("row {}: bad id {:?}", line + 2, &record[0])))?;
        rows.push((id, record[1].to_owned()));
    }
    Ok(rows)
}

/// Every distinct non-empty label in the file, sorted.
pub fn infer_vocab(path: &Path) -> Result<LabelVocab> {
    let mut names: Vec<String> = read_label_rows(path)?
        .into_iter()
        .map(|(_, label)| label)
        .filter(|label| !label.is_empty())
        .collect();
    names.sort();
    names.dedup();
    if names.is_empty() {
        return Err(Error::data("labels file has no labeled rows"));
    }
    LabelVocab::new(names)
}

/// Maps embedding row id to its class (`None` for an empty label).
pub fn load_labels(path: &Path, vocab: &LabelVocab) -> Result<BTreeMap<usize, Option<usize>>> {
    let mut out = BTreeMap::new();
    for (id, label) in read_label_rows(path)? {
        let class = if label.is_empty() {
            None
        } else {
            Some(
                vocab
                    .index_of(&label)
                    .ok_or_else(|| Error::data(format!("row {id}: unknown label {label:?}")))?,
            )
        };
        if out.insert(id, class).is_some() {
            return Err(Error::data(format!("duplicate id {id} in labels file")));
        }
    }
    Ok(out)
}

pub fn save_labels(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "id,label")?;
    for s in dataset.samples() {
        let name = s.label.map_or("", |l| dataset.vocab().names()[l].as_str());
        writeln!(out, "{},{}", s.id, name)?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::from_f32(v).unwrap()
    }

    fn spam_vocab() -> LabelVocab {
        LabelVocab::new(["spam", "promo", "normal"]).unwrap()
    }

    #[test]
    fn embedding_roundtrip_in_order() {
        let rows = vec![row(&[1.0, 2.0, 3.0]), row(&[4.0, 5.0, 6.0])];
        let bytes = encode_embeddings(&rows).unwrap();
        assert_eq!(&bytes[..8], &[0x43, 0x53, 0x53, 0x44, 0x41, 0x45, 0x4D, 0x42]);
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(decode_embeddings(&bytes).unwrap(), rows);
    }

    #[test]
    fn embedding_format_errors() {
        assert!(matches!(decode_embeddings(&[]), Err(Error::Format(_))));
        let mut bytes = encode_embeddings(&[row(&[1.0, 2.0])]).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_embeddings(truncated), Err(Error::Format(_))));
        bytes[8] = 2;
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
        bytes[8] = 1;
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));

        let mut nan = encode_embeddings(&[row(&[1.0, 2.0])]).unwrap();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embeddings(&nan), Err(Error::Data(_))));
    }

    #[test]
    fn labels_parse_and_reject() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "id,label\n0,spam\n1,\n").unwrap();
        let map = load_labels(&path, &spam_vocab()).unwrap();
        assert_eq!(map[&0], Some(0));
        assert_eq!(map[&1], None);

        fs::write(&path, "id,label\n2,viagra\n").unwrap();
        assert!(matches!(load_labels(&path, &spam_vocab()), Err(Error::Data(_))));
        fs::write(&path, "id,label\n0,spam\n0,promo\n").unwrap();
        assert!(matches!(load_labels(&path, &spam_vocab()), Err(Error::Data(_))));
        fs::write(&path, "id,label\nx,spam\n").unwrap();
        assert!(matches!(load_labels(&path, &spam_vocab()), Err(Error::Data(_))));
        fs::write(&path, "id,label\n0,spam,extra\n").unwrap();
        assert!(matches!(load_labels(&path, &spam_vocab()), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_inference_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        fs::write(&path, "id,label\n0,spam\n1,\n2,normal\n3,spam\n").unwrap();
        assert_eq!(infer_vocab(&path).unwrap().names(), &["normal", "spam"]);
        assert_eq!(LabelVocab::numbered(12).unwrap().names()[3], "c03");
        assert_eq!(spam_vocab().fake_index(), 3);
    }

    #[test]
    fn assemble_checks_counts() {
        let rows = vec![row(&[1.0]), row(&[2.0])];
        let labels = BTreeMap::from([(0, Some(0))]);
        assert!(Dataset::assemble(rows, &labels, spam_vocab()).is_err());
    }

    fn clusters(k: usize, per_class: usize) -> Dataset {
        synth_clusters(&SynthParams {
            k,
            per_class,
            dim: 4,
            ..SynthParams::default()
        })
        .unwrap()
    }

    #[test]
    fn split_identity_and_counts() {
        let ds = clusters(2, 50);
        assert_eq!(split_scheme(&ds, 1.0, 3).unwrap(), ds);
        let half = split_scheme(&ds, 0.5, 3).unwrap();
        assert_eq!(half.labeled_count(), 50);
        assert_eq!(half.embeddings(), ds.embeddings());
        assert!(split_scheme(&ds, 0.0, 3).is_err());
        assert!(split_scheme(&ds, 1.5, 3).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let ds = clusters(3, 30);
        let half = split_scheme(&ds, 0.5, 9).unwrap();
        // independent count over the output
        let mut per_class = [0usize; 3];
        for s in half.samples() {
            if let Some(l) = s.label {
                per_class[l] += 1;
            }
        }
        assert_eq!(per_class, [15, 15, 15]);
        assert_eq!(split_scheme(&ds, 0.25, 9).unwrap().labeled_count(), 23);
    }

    #[test]
    fn batches_cover_everything_once() {
        let ds = split_scheme(&clusters(2, 65), 0.5, 1).unwrap();
        let batches = batch_iter(&ds, 64, 4, 0).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let mut all: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.labeled.iter().chain(&b.unlabeled).copied())
            .collect();
        all.sort();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        for b in &batches[..2] {
            assert!((30..=34).contains(&b.labeled.len()));
            assert!(b.labeled.iter().all(|&i| ds.samples()[i].is_labeled()));
        }
        assert_eq!(batches, batch_iter(&ds, 64, 4, 0).unwrap());
        assert_ne!(batches, batch_iter(&ds, 64, 4, 1).unwrap());
    }

    #[test]
    fn batching_errors() {
        let ds = clusters(2, 5);
        assert!(matches!(batch_iter(&ds, 1, 0, 0), Err(Error::Argument(_))));
        let samples = ds
            .samples()
            .iter()
            .map(|s| Sample { label: None, ..s.clone() })
            .collect();
        let unlabeled = Dataset::new(samples, ds.vocab().clone()).unwrap();
        assert!(matches!(batch_iter(&unlabeled, 8, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn synth_counts_and_determinism() {
        let params = SynthParams::default();
        let a = synth_clusters(&params).unwrap();
        assert_eq!(a.len(), 600);
        for c in 0..3 {
            assert_eq!(a.samples().iter().filter(|s| s.label == Some(c)).count(), 200);
        }
        assert_eq!(a, synth_clusters(&params).unwrap());
        assert!(synth_clusters(&SynthParams { k: 1, ..params }).is_err());
        assert!(synth_clusters(&SynthParams { separation: 0.0, ..params }).is_err());
    }

    #[test]
    fn synth_clusters_separable_by_nearest_centroid() {
        let ds = synth_clusters(&SynthParams::default()).unwrap();
        let (k, dim) = (3, ds.dim());
        let mut centroids = vec![vec![0.0; dim]; k];
        for s in ds.samples() {
            let c = s.label.unwrap();
            for (acc, v) in centroids[c].iter_mut().zip(s.embedding.values()) {
                *acc += v / 200.0;
            }
        }
        let correct = ds
            .samples()
            .iter()
            .filter(|s| {
                let nearest = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(s.embedding.values()).map(|(c, v)| (c - v).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(s.embedding.values()).map(|(c, v)| (c - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                Some(nearest) == s.label
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let ds = clusters(3, 4);
        save_embeddings(&path, &ds.embeddings()).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded, ds.embeddings());
        save_embeddings(&path, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
