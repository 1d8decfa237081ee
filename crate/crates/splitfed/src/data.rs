//! Segment datasets: synthetic spike-train generation, CSV loading, and
//! client sharding.
//!
//! Every segment is 256 single-precision samples with a binary label
//! (0 = normal, 1 = arrhythmia). The synthetic generator stands in for real
//! recordings at desk scale: class 0 has a fixed inter-beat interval per
//! sample (jitter sigma = 1 sample), class 1 draws every interval with a
//! coefficient of variation >= 0.3.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEGMENT_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDataset {
    segments: Vec<Vec<f32>>,
    labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardStrategy {
    Iid,
    LabelSorted,
}

#[derive(Debug, Clone, Copy)]
pub struct ShardSpec {
    pub strategy: ShardStrategy,
    pub shards: usize,
    pub seed: u64,
}

impl SegmentDataset {
    pub fn new(segments: Vec<Vec<f32>>, labels: Vec<u8>) -> Result<Self> {
        if segments.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} segments but {} labels",
                segments.len(),
                labels.len()
            )));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.len() != SEGMENT_LEN {
                return Err(Error::Data(format!(
                    "segment {i} has length {}, expected {SEGMENT_LEN}",
                    s.len()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        Ok(Self { segments, labels })
    }

    pub fn empty() -> Self {
        Self {
            segments: vec![],
            labels: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        &self.segments[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Stacks the given rows into a (batch, 1, 256) tensor plus labels.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(rows.len() * SEGMENT_LEN);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.segments[r]);
            labels.push(self.labels[r] as usize);
        }
        (
            Tensor::new(vec![rows.len(), 1, SEGMENT_LEN], data).expect("fixed-arity rows"),
            labels,
        )
    }

    fn subset(&self, rows: &[usize]) -> Self {
        Self {
            segments: rows.iter().map(|&r| self.segments[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Generates `n` synthetic segments, `positive_rate` of them arrhythmic.
/// Deterministic per seed; amplitudes normalized into [-1, 1].
pub fn synth_generate(n: usize, seed: u64, positive_rate: f64) -> Result<SegmentDataset> {
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(Error::InvalidArgument(format!(
            "positive rate {positive_rate} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (positive_rate * n as f64).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    // Fisher-Yates so shards of a sequential split stay label-mixed
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let noise = Normal::new(0.0f64, 0.05).unwrap();
    let jitter = Normal::new(0.0f64, 1.0).unwrap();
    let mut segments = Vec::with_capacity(n);
    for &label in &labels {
        let mut seg = vec![0.0f32; SEGMENT_LEN];
        let base_interval = rng.gen_range(20.0..30.0f64);
        let cv = 0.4; // irregular-beat coefficient of variation
        let interval_noise = Normal::new(0.0f64, cv * base_interval).unwrap();

        let mut pos = rng.gen_range(0.0..base_interval);
        while (pos as usize) < SEGMENT_LEN {
            add_beat(&mut seg, pos as usize);
            let step = if label == 0 {
                base_interval + jitter.sample(&mut rng)
            } else {
                base_interval + interval_noise.sample(&mut rng)
            };
            pos += step.max(4.0);
        }
        for v in seg.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
        let max = seg.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        for v in seg.iter_mut() {
            *v /= max;
        }
        segments.push(seg);
    }
    SegmentDataset::new(segments, labels)
}

/// A narrow biphasic pulse, QRS-like.
fn add_beat(seg: &mut [f32], center: usize) {
    const SHAPE: [f32; 7] = [-0.15, 0.2, 1.0, 0.3, -0.4, -0.1, 0.05];
    for (k, &a) in SHAPE.iter().enumerate() {
        let idx = center as isize + k as isize - 3;
        if idx >= 0 && (idx as usize) < seg.len() {
            seg[idx as usize] += a;
        }
    }
}

/// Loads a segment CSV: one row per segment, integer label followed by 256
/// decimal floats.
pub fn load_segments(path: impl AsRef<Path>) -> Result<SegmentDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut segments = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: u8 = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("row {}: bad label: {e}", row + 1)))?;
        if label > 1 {
            return Err(Error::Data(format!("row {}: label {label} is not binary", row + 1)));
        }
        let values: Vec<f32> = fields
            .enumerate()
            .map(|(col, f)| {
                f.trim().parse::<f32>().map_err(|e| {
                    Error::Data(format!("row {}, value {}: {e}", row + 1, col + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != SEGMENT_LEN {
            return Err(Error::Data(format!(
                "row {}: {} values, expected {SEGMENT_LEN}",
                row + 1,
                values.len()
            )));
        }
        segments.push(values);
        labels.push(label);
    }
    SegmentDataset::new(segments, labels)
}

/// Writes the CSV format accepted by `load_segments`. Floats are printed
/// with Rust's shortest round-trip formatting, so load(write(ds)) == ds.
pub fn save_segments(ds: &SegmentDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for i in 0..ds.len() {
        write!(file, "{}", ds.label(i))?;
        for v in ds.segment(i) {
            write!(file, ",{v}")?;
        }
        writeln!(file)?;
    }
    Ok(())
}

/// Splits a dataset into disjoint shards covering it exactly, sizes within
/// one of each other. IID shuffles with the shard seed; label-sorted assigns
/// contiguous blocks of the label-stable-sorted order.
pub fn partition_shards(ds: &SegmentDataset, spec: &ShardSpec) -> Result<Vec<SegmentDataset>> {
    if spec.shards == 0 {
        return Err(Error::InvalidArgument("shard count must be >= 1".to_string()));
    }
    if spec.shards > ds.len() {
        return Err(Error::Data(format!(
            "{} shards requested for {} samples",
            spec.shards,
            ds.len()
        )));
    }
    if spec.shards == 1 {
        // a single shard is the identity partition, original order kept
        return Ok(vec![ds.clone()]);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    match spec.strategy {
        ShardStrategy::Iid => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        ShardStrategy::LabelSorted => {
            order.sort_by_key(|&i| ds.label(i));
        }
    }
    let n = ds.len();
    let m = spec.shards;
    let mut shards = Vec::with_capacity(m);
    let mut start = 0usize;
    for s in 0..m {
        // first (n % m) shards get the extra sample
        let size = n / m + usize::from(s < n % m);
        shards.push(ds.subset(&order[start..start + size]));
        start += size;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn empty_generation() {
        let ds = synth_generate(0, 1, 0.5).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_normalized() {
        let a = synth_generate(32, 9, 0.5).unwrap();
        let b = synth_generate(32, 9, 0.5).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert!(a.segment(i).iter().all(|v| v.abs() <= 1.0));
        }
        let c = synth_generate(32, 10, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_rate_within_one_sample() {
        for (n, rate) in [(100usize, 0.5f64), (101, 0.3), (64, 0.0), (64, 1.0)] {
            let ds = synth_generate(n, 3, rate).unwrap();
            let pos = (0..n).filter(|&i| ds.label(i) == 1).count();
            assert!(
                (pos as f64 / n as f64 - rate).abs() <= 1.0 / n as f64,
                "n={n} rate={rate} pos={pos}"
            );
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segments.csv");
        let ds = synth_generate(16, 4, 0.5).unwrap();
        save_segments(&ds, &path).unwrap();
        let back = load_segments(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut row = vec!["1".to_string()];
        row.extend(std::iter::repeat("0.5".to_string()).take(255));
        std::fs::write(&path, row.join(",")).unwrap();
        let err = load_segments(&path).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("255"), "{err}");

        assert!(load_segments(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn small_valid_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        let mk_row = |label: u8| {
            let mut r = vec![label.to_string()];
            r.extend((0..SEGMENT_LEN).map(|i| format!("{}", i as f32 / 256.0)));
            r.join(",")
        };
        std::fs::write(&path, format!("{}\n{}\n", mk_row(0), mk_row(1))).unwrap();
        let ds = load_segments(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(1), 1);
    }

    fn multiset(ds: &SegmentDataset) -> BTreeMap<Vec<u32>, usize> {
        let mut m = BTreeMap::new();
        for i in 0..ds.len() {
            let key: Vec<u32> = ds.segment(i).iter().map(|v| v.to_bits()).collect();
            *m.entry(key).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn sharding_is_a_disjoint_cover() {
        let ds = synth_generate(103, 6, 0.5).unwrap();
        for m in [1usize, 2, 5, 8] {
            let shards = partition_shards(
                &ds,
                &ShardSpec {
                    strategy: ShardStrategy::Iid,
                    shards: m,
                    seed: 1,
                },
            )
            .unwrap();
            assert_eq!(shards.len(), m);
            let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), ds.len());
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

            let mut combined = BTreeMap::new();
            for s in &shards {
                for (k, v) in multiset(s) {
                    *combined.entry(k).or_insert(0) += v;
                }
            }
            assert_eq!(combined, multiset(&ds));
        }
    }

    #[test]
    fn single_shard_is_identity() {
        let ds = synth_generate(10, 2, 0.5).unwrap();
        let shards = partition_shards(
            &ds,
            &ShardSpec {
                strategy: ShardStrategy::LabelSorted,
                shards: 1,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(multiset(&shards[0]), multiset(&ds));
    }

    #[test]
    fn label_sorted_shards_are_nearly_pure() {
        let ds = synth_generate(200, 5, 0.5).unwrap();
        let shards = partition_shards(
            &ds,
            &ShardSpec {
                strategy: ShardStrategy::LabelSorted,
                shards: 2,
                seed: 0,
            },
        )
        .unwrap();
        for s in &shards {
            let pos = (0..s.len()).filter(|&i| s.label(i) == 1).count();
            let majority = pos.max(s.len() - pos) as f64 / s.len() as f64;
            assert!(majority >= 0.9, "majority {majority}");
        }
    }

    #[test]
    fn too_many_shards_rejected() {
        let ds = synth_generate(3, 1, 0.5).unwrap();
        assert!(partition_shards(
            &ds,
            &ShardSpec {
                strategy: ShardStrategy::Iid,
                shards: 4,
                seed: 0
            }
        )
        .is_err());
    }
}
