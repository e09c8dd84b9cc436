//! Datasets: synthetic hierarchical generation, the `BODS` binary format and
//! shuffled mini-batches.
//!
//! # `BODS` layout (little-endian)
//!
//! | field         | type  |
//! |---------------|-------|
//! | magic         | `b"BODS"` |
//! | version       | `u16` (= 1) |
//! | n             | `u64` |
//! | d             | `u32` |
//! | num_classes   | `u32` |
//! | n records     | `d x f32` features, then `u16` label |
//!
//! Features are widened to `f64` on load; saving narrows them to `f32`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;

pub const BODS_MAGIC: &[u8; 4] = b"BODS";
pub const BODS_VERSION: u16 = 1;
const BODS_HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d`, one example per row.
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `hierarchy[class]` is the superclass of `class`, when known.
    pub hierarchy: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "record {i}: label {l} out of range for {num_classes} classes"
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            hierarchy: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Features of the listed examples as a `d x batch` matrix.
    pub fn columns(&self, indices: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(self.dim(), indices.len(), |r, c| {
            self.features[(indices[c], r)]
        })
    }

    /// All features as `d x n`.
    pub fn feature_columns(&self) -> DenseMatrix {
        self.features.transpose()
    }

    /// Superclass labels, if a hierarchy is known.
    pub fn superclass_labels(&self) -> Option<Vec<usize>> {
        let h = self.hierarchy.as_ref()?;
        Some(self.labels.iter().map(|&l| h[l]).collect())
    }
}

/// Parameters of the synthetic two-level class hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchySpec {
    pub seed: u64,
    pub superclasses: usize,
    pub subclasses_per: usize,
    pub dim: usize,
    pub per_class: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
}

impl HierarchySpec {
    pub fn num_classes(&self) -> usize {
        self.superclasses * self.subclasses_per
    }

    pub fn validate(&self) -> Result<()> {
        if self.superclasses == 0 || self.subclasses_per == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "superclasses, subclasses_per and dim must be positive".into(),
            ));
        }
        if !(self.intra_spread >= 0.0 && self.inter_spread > 0.0)
            || !self.intra_spread.is_finite()
            || !self.inter_spread.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "spreads must be finite with intra >= 0 and inter > 0 (got {} and {})",
                self.intra_spread, self.inter_spread
            )));
        }
        Ok(())
    }
}

/// Class centers of a generated hierarchy, one row per fine class.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyCenters {
    pub superclass_centers: DenseMatrix,
    pub class_centers: DenseMatrix,
    pub hierarchy: Vec<usize>,
}

/// Draws superclass centers `~ N(0, inter^2 I)` and, per superclass,
/// subclass centers offset by `N(0, intra^2 I)`.
pub fn hierarchy_centers(spec: &HierarchySpec) -> Result<HierarchyCenters> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed).fork(0);
    let superclass_centers =
        DenseMatrix::gaussian(spec.superclasses, spec.dim, spec.inter_spread, &mut rng);
    let classes = spec.num_classes();
    let hierarchy: Vec<usize> = (0..classes).map(|c| c / spec.subclasses_per).collect();
    let offsets = DenseMatrix::gaussian(classes, spec.dim, spec.intra_spread, &mut rng);
    let class_centers = DenseMatrix::from_fn(classes, spec.dim, |c, j| {
        superclass_centers[(hierarchy[c], j)] + offsets[(c, j)]
    });
    Ok(HierarchyCenters {
        superclass_centers,
        class_centers,
        hierarchy,
    })
}

/// `per_class` unit-variance Gaussian samples around every class center.
///
/// Samples are ordered class by class. `stream` selects an independent
/// sampling stream so train and test splits can share one set of centers.
pub fn sample_from_centers(
    centers: &HierarchyCenters,
    per_class: usize,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    let classes = centers.class_centers.rows();
    let dim = centers.class_centers.cols();
    let mut rng = RngStream::new(seed).fork(stream);
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    let features = DenseMatrix::from_fn(n, dim, |i, j| {
        centers.class_centers[(labels[i], j)] + rng.standard_normal()
    });
    let mut ds = Dataset::new(features, labels, classes)?;
    ds.hierarchy = Some(centers.hierarchy.clone());
    Ok(ds)
}

/// Synthetic dataset whose fine classes are grouped under superclasses.
pub fn generate_hierarchical(spec: &HierarchySpec) -> Result<Dataset> {
    if spec.per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let centers = hierarchy_centers(spec)?;
    sample_from_centers(&centers, spec.per_class, spec.seed, 1)
}

/// Train split of `spec.per_class` and a test split of `test_per_class`
/// examples per class, drawn around the same centers.
pub fn generate_hierarchical_split(
    spec: &HierarchySpec,
    test_per_class: usize,
) -> Result<(Dataset, Dataset)> {
    if spec.per_class == 0 || test_per_class == 0 {
        return Err(Error::InvalidArgument(
            "per-class counts must be positive".into(),
        ));
    }
    let centers = hierarchy_centers(spec)?;
    Ok((
        sample_from_centers(&centers, spec.per_class, spec.seed, 1)?,
        sample_from_centers(&centers, test_per_class, spec.seed, 2)?,
    ))
}

/// Per-dimension mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics over `data`; zero-variance dimensions get
    /// `std = 1`.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot standardize an empty dataset".into(),
            ));
        }
        let n = data.len() as f64;
        let mean: Vec<f64> = data.features.col_sums().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; data.dim()];
        for r in 0..data.len() {
            for (j, v) in data.features.row(r).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.dim() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                left: data.features.shape(),
                right: (1, self.mean.len()),
            });
        }
        for r in 0..data.len() {
            for (j, v) in data.features.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(())
    }
}

/// Writes `data` in `BODS` format.
pub fn encode_bods(data: &Dataset) -> Result<Vec<u8>> {
    if data.num_classes > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit u16 labels",
            data.num_classes
        )));
    }
    let d = u32::try_from(data.dim())
        .map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(BODS_HEADER_LEN + data.len() * (data.dim() * 4 + 2));
    out.extend_from_slice(BODS_MAGIC);
    out.extend_from_slice(&BODS_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&(data.num_classes as u32).to_le_bytes());
    for (i, &label) in data.labels.iter().enumerate() {
        for &v in data.features.row(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(label as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn save_bods(data: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_bods(data)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    decode_bods(&std::fs::read(path)?)
}

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses a `BODS` byte buffer. Never panics on malformed input.
pub fn decode_bods(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < BODS_HEADER_LEN {
        return Err(parse_err(
            bytes.len(),
            format!(
                "header needs {BODS_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != BODS_MAGIC {
        return Err(parse_err(0, "bad magic, expected \"BODS\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BODS_VERSION {
        return Err(parse_err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let d = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")) as usize;
    let num_classes = u32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes")) as usize;
    let record = d * 4 + 2;
    let body = bytes.len() - BODS_HEADER_LEN;
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(record))
        .ok_or_else(|| parse_err(6, format!("record count {n} is too large")))?;
    if body < expected {
        let complete = body / record;
        return Err(parse_err(
            BODS_HEADER_LEN + complete * record,
            format!("truncated: {n} records declared, {complete} complete"),
        ));
    }
    if body > expected {
        return Err(parse_err(
            BODS_HEADER_LEN + expected,
            format!("{} trailing bytes after last record", body - expected),
        ));
    }
    let n = n as usize;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let start = BODS_HEADER_LEN + i * record;
        for j in 0..d {
            let at = start + j * 4;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(parse_err(at, format!("record {i}: non-finite feature {j}")));
            }
            features.push(v as f64);
        }
        let at = start + d * 4;
        let label = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        if label >= num_classes {
            return Err(parse_err(
                at,
                format!("record {i}: label {label} >= num_classes {num_classes}"),
            ));
        }
        labels.push(label);
    }
    let features = DenseMatrix::from_vec(n, d, features)?;
    Ok(Dataset {
        features,
        labels,
        num_classes,
        hierarchy: None,
    })
}

/// One mini-batch: features `d x B` and labels of length `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Epoch-wise shuffled mini-batches. Every epoch is a fresh permutation of
/// the dataset; the last batch of an epoch is short when `B` does not divide
/// `n`.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, rng: RngStream) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut it = Self {
            data,
            batch_size,
            rng,
            order: (0..data.len()).collect(),
            cursor: 0,
            epoch: 0,
        };
        it.rng.shuffle(&mut it.order);
        Ok(it)
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.order.sort_unstable();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Batch {
            features: self.data.columns(&indices),
            labels: indices.iter().map(|&i| self.data.labels[i]).collect(),
            indices,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> HierarchySpec {
        HierarchySpec {
            seed,
            superclasses: 3,
            subclasses_per: 2,
            dim: 4,
            per_class: 5,
            intra_spread: 1.0,
            inter_spread: 5.0,
        }
    }

    #[test]
    fn generation_is_deterministic_and_labelled() {
        let a = generate_hierarchical(&spec(3)).unwrap();
        let b = generate_hierarchical(&spec(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for c in 0..6 {
            assert!(a.labels.contains(&c));
        }
        assert_eq!(a.hierarchy.as_deref(), Some(&[0, 0, 1, 1, 2, 2][..]));
        assert_ne!(a, generate_hierarchical(&spec(4)).unwrap());
    }

    #[test]
    fn zero_intra_spread_collapses_subclasses() {
        let s = HierarchySpec {
            intra_spread: 0.0,
            ..spec(1)
        };
        let c = hierarchy_centers(&s).unwrap();
        assert_eq!(c.class_centers.row(0), c.class_centers.row(1));
        assert_ne!(c.class_centers.row(1), c.class_centers.row(2));
    }

    #[test]
    fn invalid_spreads_are_rejected() {
        let s = HierarchySpec {
            inter_spread: 0.0,
            ..spec(1)
        };
        assert!(generate_hierarchical(&s).is_err());
        let s = HierarchySpec {
            intra_spread: f64::NAN,
            ..spec(1)
        };
        assert!(generate_hierarchical(&s).is_err());
    }

    #[test]
    fn hand_built_file_decodes_exactly() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"BODS");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for v in [1.0f32, -2.5, 0.125] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&3u16.to_le_bytes());
        for v in [0.0f32, 4.0, -0.75] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0u16.to_le_bytes());
        let ds = decode_bods(&bytes).unwrap();
        assert_eq!(
            ds.features,
            DenseMatrix::from_rows(&[[1.0, -2.5, 0.125], [0.0, 4.0, -0.75]])
        );
        assert_eq!(ds.labels, vec![3, 0]);
        assert_eq!(ds.num_classes, 4);
        assert_eq!(encode_bods(&ds).unwrap(), bytes);
    }

    #[test]
    fn label_overflow_names_the_record() {
        let ds = Dataset::new(DenseMatrix::zeros(3, 2), vec![0, 1, 1], 2).unwrap();
        let mut bytes = encode_bods(&ds).unwrap();
        // Rewrite record 2's label to 2 == num_classes.
        let at = BODS_HEADER_LEN + 2 * (2 * 4 + 2) + 8;
        bytes[at..at + 2].copy_from_slice(&2u16.to_le_bytes());
        let err = decode_bods(&bytes).unwrap_err();
        match err {
            Error::Parse { offset, detail } => {
                assert_eq!(offset as usize, at);
                assert!(detail.contains("record 2"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_structured_errors() {
        assert!(matches!(
            decode_bods(b""),
            Err(Error::Parse { offset: 0, .. })
        ));
        let ds = Dataset::new(DenseMatrix::zeros(2, 2), vec![0, 1], 2).unwrap();
        let good = encode_bods(&ds).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_bods(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_bods(&bad),
            Err(Error::Parse { offset: 4, .. })
        ));
        assert!(decode_bods(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_bods(&long).is_err());
        // Absurd record count must not allocate or overflow.
        let mut huge = good.clone();
        huge[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_bods(&huge).is_err());
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let ds = generate_hierarchical(&spec(1)).unwrap();
        let mut it = BatchIterator::new(&ds, ds.len(), RngStream::new(5)).unwrap();
        let b = it.next_batch();
        let mut idx = b.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_every_example_once() {
        let ds = generate_hierarchical(&spec(1)).unwrap();
        let mut it = BatchIterator::new(&ds, 7, RngStream::new(5)).unwrap();
        for _ in 0..3 {
            let mut seen = Vec::new();
            while seen.len() < ds.len() {
                let b = it.next_batch();
                assert!(b.labels.len() <= 7);
                seen.extend(b.indices);
            }
            seen.sort_unstable();
            assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        }
        assert_eq!(it.epoch(), 2);
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = generate_hierarchical(&spec(1)).unwrap();
        let mut a = BatchIterator::new(&ds, 4, RngStream::new(8)).unwrap();
        let mut b = BatchIterator::new(&ds, 4, RngStream::new(8)).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let mut ds = generate_hierarchical(&spec(2)).unwrap();
        let s = Standardizer::fit(&ds).unwrap();
        s.apply(&mut ds).unwrap();
        let again = Standardizer::fit(&ds).unwrap();
        for (m, sd) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-12);
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }
}
