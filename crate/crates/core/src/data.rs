//! Labeled image sets: synthetic oriented bars, IDX loading, splitting and
//! batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::random::{seeded, stream, StreamRng};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Single-channel images with class labels. `ids` identify examples across
/// splits so that disjointness can be checked.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

/// A batch ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() || ids.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "labeled set needs N×C×H×W images with N labels and N ids (images {:?}, {} labels, {} ids)",
                s,
                labels.len(),
                ids.len()
            )));
        }
        Ok(LabeledSet { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            x: self.images.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch { x: self.images.clone(), labels: self.labels.clone() }
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[&LabeledSet]) -> Result<LabeledSet> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of no sets".into()))?;
        let tail = first.images.shape()[1..].to_vec();
        let mut data = Vec::new();
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        for p in parts {
            if p.images.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", first.images.shape(), p.images.shape()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
            ids.extend_from_slice(&p.ids);
        }
        let mut shape = vec![labels.len()];
        shape.extend(tail);
        LabeledSet::new(Tensor::new(shape, data)?, labels, ids)
    }
}

/// The explainer and audience training and validation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub e_train: LabeledSet,
    pub a_train: LabeledSet,
    pub e_val: LabeledSet,
    pub a_val: LabeledSet,
}

/// Oriented-bar task parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub noise: f64,
    pub seed: u64,
    /// Share one training set and one validation set between explainer and
    /// audience instead of drawing four independent sets.
    pub shared: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { size: 8, classes: 4, n_train: 64, n_val: 64, noise: 0.1, seed: 0, shared: true }
    }
}

/// Bar prototype of class `k` on a `size × size` grid: horizontal, vertical,
/// diagonal and anti-diagonal bars, each two to three pixels thick.
pub fn prototype(k: usize, size: usize) -> Vec<f64> {
    let mid = size / 2;
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let on = match k {
                0 => r + 1 == mid || r == mid,
                1 => c + 1 == mid || c == mid,
                2 => r.abs_diff(c) <= 1,
                _ => (r + c).abs_diff(size - 1) <= 1,
            };
            if on {
                img[r * size + c] = 1.0;
            }
        }
    }
    img
}

struct Generator {
    size: usize,
    classes: usize,
    noise: Option<Normal<f64>>,
    rng: StreamRng,
    next_id: u64,
}

impl Generator {
    fn draw(&mut self, n: usize) -> LabeledSet {
        let px = self.size * self.size;
        let protos: Vec<Vec<f64>> = (0..self.classes).map(|k| prototype(k, self.size)).collect();
        let mut data = Vec::with_capacity(n * px);
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        for &k in &labels {
            for &p in &protos[k] {
                let v = match &self.noise {
                    Some(d) => p + d.sample(&mut self.rng),
                    None => p,
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
        let ids = (self.next_id..self.next_id + n as u64).collect();
        self.next_id += n as u64;
        LabeledSet {
            images: Tensor::from_parts(vec![n, 1, self.size, self.size], data),
            labels,
            ids,
        }
    }
}

/// Synthetic splits plus a held-out test set of `n_test` images, all from
/// one seeded stream.
pub fn generate_synthetic(spec: &SyntheticSpec, n_test: usize) -> Result<(DatasetSplits, LabeledSet)> {
    if !(2..=4).contains(&spec.classes) {
        return Err(Error::InvalidArgument(format!("synthetic task supports 2 to 4 classes, got {}", spec.classes)));
    }
    if spec.size < 4 {
        return Err(Error::InvalidArgument(format!("synthetic images need size ≥ 4, got {}", spec.size)));
    }
    if spec.n_train < spec.classes || spec.n_val < spec.classes {
        return Err(Error::InvalidArgument(format!(
            "each split needs at least {} examples (one per class)",
            spec.classes
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be finite and ≥ 0, got {}", spec.noise)));
    }
    let mut gen = Generator {
        size: spec.size,
        classes: spec.classes,
        noise: (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("checked above")),
        rng: seeded(spec.seed, stream::DATA),
        next_id: 0,
    };
    let splits = if spec.shared {
        let train = gen.draw(spec.n_train);
        let val = gen.draw(spec.n_val);
        DatasetSplits { e_train: train.clone(), a_train: train, e_val: val.clone(), a_val: val }
    } else {
        DatasetSplits {
            e_train: gen.draw(spec.n_train),
            a_train: gen.draw(spec.n_train),
            e_val: gen.draw(spec.n_val),
            a_val: gen.draw(spec.n_val),
        }
    };
    let test = gen.draw(n_test);
    Ok((splits, test))
}

fn read_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_string(),
        needed: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.to_string(), found, expected });
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, N×H×W unsigned bytes) and label
/// file (`0x00000801`, N unsigned bytes) from memory.
pub fn parse_idx(images: &[u8], labels: &[u8], images_name: &str, labels_name: &str) -> Result<LabeledSet> {
    check_magic(images, IDX_IMAGES_MAGIC, images_name)?;
    check_magic(labels, IDX_LABELS_MAGIC, labels_name)?;
    let n = read_u32(images, 4, images_name)? as usize;
    let h = read_u32(images, 8, images_name)? as usize;
    let w = read_u32(images, 12, images_name)? as usize;
    let nl = read_u32(labels, 4, labels_name)? as usize;
    let px_needed = 16 + n * h * w;
    if images.len() < px_needed {
        return Err(Error::Truncated { path: images_name.into(), needed: px_needed, found: images.len() });
    }
    if labels.len() < 8 + nl {
        return Err(Error::Truncated { path: labels_name.into(), needed: 8 + nl, found: labels.len() });
    }
    if n != nl {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let data = images[16..px_needed].iter().map(|&b| b as f64 / 255.0).collect();
    LabeledSet::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        labels[8..8 + n].iter().map(|&b| b as usize).collect(),
        (0..n as u64).collect(),
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, &images_path.display().to_string(), &labels_path.display().to_string())
}

/// Seeded shuffle, then contiguous parts with sizes `round(f_i · n)` (the
/// last part takes the remainder).
pub fn split_fractions(ds: &LabeledSet, fractions: &[f64], seed: u64) -> Result<Vec<LabeledSet>> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::InvalidArgument(format!("split fractions must be ≥ 0, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {total}, expected 1")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, stream::SPLIT));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, &f) in fractions.iter().enumerate() {
        let len = if i + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).round() as usize).min(n - start)
        };
        if len == 0 {
            return Err(Error::EmptySplit { index: i, fraction: f, total: n });
        }
        parts.push(ds.subset(&order[start..start + len]));
        start += len;
    }
    Ok(parts)
}

/// Four pairwise-disjoint splits in the order e_train, a_train, e_val, a_val.
pub fn split_four(ds: &LabeledSet, fractions: [f64; 4], seed: u64) -> Result<DatasetSplits> {
    let mut parts = split_fractions(ds, &fractions, seed)?.into_iter();
    let mut next = || parts.next().expect("four fractions give four parts");
    Ok(DatasetSplits { e_train: next(), a_train: next(), e_val: next(), a_val: next() })
}

/// Endless shuffled batches; every epoch is a fresh permutation, and the
/// final short batch of an epoch is kept.
pub struct BatchIterator<'a> {
    set: &'a LabeledSet,
    batch_size: usize,
    rng: StreamRng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(set: &'a LabeledSet, batch_size: usize, rng: StreamRng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        if set.is_empty() {
            return Err(Error::InvalidArgument("cannot batch an empty set".into()));
        }
        Ok(BatchIterator { set, batch_size, rng, order: Vec::new(), pos: 0 })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.set.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(self.set.batch(&idx))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(n: u32, l: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_LABELS_MAGIC, n] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(l);
        b
    }

    #[test]
    fn noiseless_images_equal_prototypes() {
        let spec = SyntheticSpec { noise: 0.0, ..SyntheticSpec::default() };
        let (s, _) = generate_synthetic(&spec, 8).unwrap();
        for (i, &k) in s.e_train.labels.iter().enumerate() {
            assert_eq!(&s.e_train.images.data()[i * 64..(i + 1) * 64], prototype(k, 8).as_slice());
        }
    }

    #[test]
    fn prototypes_are_distinct_bars() {
        let h = prototype(0, 8);
        assert_eq!(h.iter().sum::<f64>(), 16.0);
        assert_eq!(h[3 * 8], 1.0);
        assert_eq!(h[4 * 8 + 7], 1.0);
        let v = prototype(1, 8);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[7 * 8 + 4], 1.0);
        assert_eq!(prototype(2, 8).iter().sum::<f64>(), 22.0);
        assert_eq!(prototype(3, 8)[7], 1.0);
    }

    #[test]
    fn generation_is_seeded_and_balanced() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec, 16).unwrap(), generate_synthetic(&spec, 16).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec, 16).unwrap(), generate_synthetic(&other, 16).unwrap());
        let (s, test) = generate_synthetic(&spec, 16).unwrap();
        for k in 0..4 {
            assert_eq!(s.e_train.labels.iter().filter(|&&l| l == k).count(), 16);
        }
        let all = [&s.e_train, &s.a_train, &s.e_val, &s.a_val, &test];
        assert!(all.iter().all(|set| set.images.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn unshared_splits_are_disjoint() {
        let spec = SyntheticSpec { shared: false, ..SyntheticSpec::default() };
        let (s, test) = generate_synthetic(&spec, 16).unwrap();
        let mut seen = HashSet::new();
        for set in [&s.e_train, &s.a_train, &s.e_val, &s.a_val, &test] {
            for id in &set.ids {
                assert!(seen.insert(*id));
            }
        }
    }

    #[test]
    fn nearest_prototype_classifier_is_accurate() {
        let spec = SyntheticSpec { n_train: 400, noise: 0.1, seed: 3, ..SyntheticSpec::default() };
        let (s, _) = generate_synthetic(&spec, 4).unwrap();
        let protos: Vec<Vec<f64>> = (0..4).map(|k| prototype(k, 8)).collect();
        let mut hits = 0;
        for (i, &k) in s.e_train.labels.iter().enumerate() {
            let img = &s.e_train.images.data()[i * 64..(i + 1) * 64];
            let d = |p: &Vec<f64>| img.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| d(&protos[a]).partial_cmp(&d(&protos[b])).unwrap()).unwrap();
            hits += (best == k) as usize;
        }
        assert!(hits as f64 / 400.0 >= 0.95);
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let set = parse_idx(&idx_images(2, 1, 3, &[0, 128, 255, 255, 0, 128]), &idx_labels(2, &[3, 1]), "i", "l").unwrap();
        assert_eq!(set.images.shape(), &[2, 1, 1, 3]);
        assert_eq!(set.images.data(), &[0.0, 128.0 / 255.0, 1.0, 1.0, 0.0, 128.0 / 255.0]);
        assert_eq!(set.labels, vec![3, 1]);
    }

    #[test]
    fn idx_empty_and_errors() {
        let empty = parse_idx(&idx_images(0, 28, 28, &[]), &idx_labels(0, &[]), "i", "l").unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.images.shape(), &[0, 1, 28, 28]);

        let bad = parse_idx(&idx_labels(0, &[]), &idx_labels(0, &[]), "i", "l");
        assert!(matches!(bad, Err(Error::BadMagic { found: 0x801, .. })));
        let short = parse_idx(&idx_images(2, 2, 2, &[0; 7]), &idx_labels(2, &[0, 1]), "i", "l");
        assert!(matches!(short, Err(Error::Truncated { needed: 24, found: 23, .. })));
        let header = parse_idx(&IDX_IMAGES_MAGIC.to_be_bytes(), &idx_labels(0, &[]), "i", "l");
        assert!(matches!(header, Err(Error::Truncated { .. })));
        let count = parse_idx(&idx_images(2, 1, 1, &[0, 0]), &idx_labels(1, &[0]), "i", "l");
        assert!(matches!(count, Err(Error::CountMismatch { images: 2, labels: 1 })));
    }

    #[test]
    fn load_idx_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, idx_images(1, 2, 2, &[0, 51, 102, 255])).unwrap();
        std::fs::write(&lp, idx_labels(1, &[2])).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.images.data(), &[0.0, 0.2, 0.4, 1.0]);
        assert!(load_idx(&dir.path().join("missing"), &lp).is_err());
    }

    fn numbered(n: usize) -> LabeledSet {
        LabeledSet::new(
            Tensor::from_fn(&[n, 1, 1, 1], |i| i as f64 / n as f64),
            (0..n).map(|i| i % 3).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quarter_split_sizes_and_errors() {
        let ds = numbered(100);
        let s = split_four(&ds, [0.25; 4], 0).unwrap();
        for part in [&s.e_train, &s.a_train, &s.e_val, &s.a_val] {
            assert_eq!(part.len(), 25);
        }
        assert_eq!(s, split_four(&ds, [0.25; 4], 0).unwrap());
        assert!(matches!(split_four(&ds, [0.5, 0.5, 0.0, 0.0], 0), Err(Error::EmptySplit { index: 2, .. })));
        assert!(split_four(&ds, [0.5, 0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let ds = numbered(10);
        let mut it = BatchIterator::new(&ds, 4, seeded(1, 0)).unwrap();
        for _ in 0..3 {
            let sizes: Vec<usize> = (0..3).map(|_| it.next_indices().len()).collect();
            assert_eq!(sizes, vec![4, 4, 2]);
        }
        let mut it = BatchIterator::new(&ds, 4, seeded(2, 0)).unwrap();
        let mut counts = [0; 10];
        for _ in 0..3 {
            for i in it.next_indices() {
                counts[i] += 1;
            }
        }
        assert_eq!(counts, [1; 10]);
        let mut a = BatchIterator::new(&ds, 3, seeded(5, 0)).unwrap();
        let mut b = BatchIterator::new(&ds, 3, seeded(5, 0)).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next(), b.next());
        }
        let mut big = BatchIterator::new(&ds, 50, seeded(5, 0)).unwrap();
        assert_eq!(big.next().unwrap().labels.len(), 10);
        assert!(BatchIterator::new(&ds, 0, seeded(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_the_source(n in 8usize..200, seed in 0u64..1000, a in 1u32..5, b in 1u32..5, c in 1u32..5, d in 1u32..5) {
            let total = (a + b + c + d) as f64;
            let fr = [a as f64 / total, b as f64 / total, c as f64 / total, d as f64 / total];
            let ds = numbered(n);
            if let Ok(s) = split_four(&ds, fr, seed) {
                let mut ids: Vec<u64> = [&s.e_train, &s.a_train, &s.e_val, &s.a_val]
                    .iter().flat_map(|p| p.ids.clone()).collect();
                ids.sort();
                prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
                for p in [&s.e_train, &s.a_train, &s.e_val, &s.a_val] {
                    for (i, id) in p.ids.iter().enumerate() {
                        prop_assert_eq!(p.images.data()[i], *id as f64 / n as f64);
                    }
                }
            }
        }
    }
}
