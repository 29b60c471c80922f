//! Datasets of pre-computed embeddings: label spaces, split tags, the two
//! on-disk formats, stratified splitting and a Gaussian-mixture generator.
//!
//! CSV layout:
//!
//! ```text
//! #sdc-embeddings v1 d=<d_in> M=<M> N=<N>
//! id,split,label,f_0,...,f_{d_in-1}
//! ```
//!
//! `split` is one of `L`, `U`, `T`; `label` is an integer or `?`.
//!
//! Binary layout (little endian): magic `SDC1`, `u32` n, d_in, M, N, then
//! n records of `u32` id, `u8` split (0 = L, 1 = U, 2 = T), `i32` label
//! (-1 when unknown) and d_in `f32` features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SdcError};
use crate::numerics::{squared_distance, Matrix};

const CSV_MAGIC: &str = "#sdc-embeddings";
const BIN_MAGIC: &[u8; 4] = b"SDC1";

/// Known categories occupy `0..M`, novel ones `M..M+N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub num_known: usize,
    pub num_novel: usize,
}

impl LabelSpace {
    pub fn new(num_known: usize, num_novel: usize) -> Self {
        Self { num_known, num_novel }
    }

    #[inline]
    pub fn total(&self) -> usize {
        self.num_known + self.num_novel
    }

    pub fn known_ids(&self) -> Range<usize> {
        0..self.num_known
    }

    pub fn novel_ids(&self) -> Range<usize> {
        self.num_known..self.total()
    }

    #[inline]
    pub fn is_known(&self, category: usize) -> bool {
        category < self.num_known
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitTag {
    pub fn code(self) -> char {
        match self {
            SplitTag::Labeled => 'L',
            SplitTag::Unlabeled => 'U',
            SplitTag::Test => 'T',
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "L" => Some(SplitTag::Labeled),
            "U" => Some(SplitTag::Unlabeled),
            "T" => Some(SplitTag::Test),
            _ => None,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            SplitTag::Labeled => 0,
            SplitTag::Unlabeled => 1,
            SplitTag::Test => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SplitTag::Labeled),
            1 => Some(SplitTag::Unlabeled),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.bin` selects the binary format, everything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => DatasetFormat::Binary,
            _ => DatasetFormat::Csv,
        }
    }
}

/// Feature matrix plus per-row id, split tag and (possibly hidden) label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    ids: Vec<u32>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    splits: Vec<SplitTag>,
    label_space: LabelSpace,
}

impl EmbeddingDataset {
    pub fn new(
        ids: Vec<u32>,
        features: Matrix,
        labels: Vec<Option<usize>>,
        splits: Vec<SplitTag>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(SdcError::NoInstances);
        }
        if features.cols() == 0 {
            return invalid("feature dimension must be at least 1");
        }
        for len in [ids.len(), labels.len(), splits.len()] {
            if len != n {
                return Err(SdcError::DimensionMismatch { expected: n, got: len });
            }
        }
        if !features.is_finite() {
            return Err(SdcError::NonFinite("dataset features".into()));
        }
        for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
            match (label, split) {
                (Some(l), _) if l >= label_space.total() => {
                    return Err(SdcError::LabelRange {
                        label: l as i64,
                        total: label_space.total(),
                    })
                }
                (Some(l), SplitTag::Labeled) if !label_space.is_known(l) => {
                    return invalid(format!("row {i}: labeled row carries novel category {l}"))
                }
                (None, SplitTag::Labeled) => return invalid(format!("row {i}: labeled row without a label")),
                _ => {}
            }
        }
        Ok(Self {
            ids,
            features,
            labels,
            splits,
            label_space,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn splits(&self) -> &[SplitTag] {
        &self.splits
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    /// Row indices carrying the given tag, in file order.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Labels of the given rows; fails if any is unknown.
    pub fn labels_at(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|&i| {
                self.labels[i]
                    .ok_or_else(|| SdcError::InvalidInput(format!("row {} (id {}) has no label", i, self.ids[i])))
            })
            .collect()
    }
}

/// Loads a dataset in the given format.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<EmbeddingDataset> {
    let file = File::open(path)?;
    match format {
        DatasetFormat::Csv => read_csv(BufReader::new(file)),
        DatasetFormat::Binary => read_binary(BufReader::new(file)),
    }
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DatasetFormat::Csv => write_csv(ds, &mut w)?,
        DatasetFormat::Binary => write_binary(ds, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, LabelSpace)> {
    let bad = |m: &str| SdcError::Parse {
        line: 1,
        message: m.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(CSV_MAGIC) {
        return Err(bad("missing #sdc-embeddings header"));
    }
    if parts.next() != Some("v1") {
        return Err(bad("unsupported version"));
    }
    let mut field = |key: &str| -> Result<usize> {
        let tok = parts.next().ok_or_else(|| bad("truncated header"))?;
        tok.strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("expected {key}<count>, got {tok}")))
    };
    let d = field("d=")?;
    let m = field("M=")?;
    let n = field("N=")?;
    Ok((d, LabelSpace::new(m, n)))
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<EmbeddingDataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(SdcError::NoInstances),
    };
    let (dim, space) = parse_header(header.trim())?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SdcError::Parse { line: lineno, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 3 {
            return Err(err(format!("expected {} columns, found {}", dim + 3, cols.len())));
        }
        let id: u32 = cols[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad id {:?}", cols[0])))?;
        let split = SplitTag::from_code(cols[1].trim()).ok_or_else(|| err(format!("bad split tag {:?}", cols[1])))?;
        let label = match cols[2].trim() {
            "?" => None,
            s => {
                let l: i64 = s.parse().map_err(|_| err(format!("bad label {s:?}")))?;
                if l < 0 || l as usize >= space.total() {
                    return Err(SdcError::LabelRange {
                        label: l,
                        total: space.total(),
                    });
                }
                Some(l as usize)
            }
        };
        for c in &cols[3..] {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| err(format!("non-numeric feature {c:?}")))?;
            data.push(v);
        }
        ids.push(id);
        splits.push(split);
        labels.push(label);
    }
    if ids.is_empty() {
        return Err(SdcError::NoInstances);
    }
    let features = Matrix::from_vec(ids.len(), dim, data)?;
    EmbeddingDataset::new(ids, features, labels, splits, space)
}

pub fn write_csv<W: Write>(ds: &EmbeddingDataset, w: &mut W) -> Result<()> {
    let space = ds.label_space;
    writeln!(
        w,
        "{CSV_MAGIC} v1 d={} M={} N={}",
        ds.dim(),
        space.num_known,
        space.num_novel
    )?;
    for i in 0..ds.len() {
        write!(w, "{},{},", ds.ids[i], ds.splits[i].code())?;
        match ds.labels[i] {
            Some(l) => write!(w, "{l}")?,
            None => write!(w, "?")?,
        }
        for x in ds.features.row(i) {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<EmbeddingDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(SdcError::Parse {
            line: 0,
            message: "bad magic, expected SDC1".into(),
        });
    }
    let n = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let space = LabelSpace::new(read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
    if n == 0 {
        return Err(SdcError::NoInstances);
    }
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    let mut rec = vec![0u8; 9 + 4 * dim];
    for i in 0..n {
        r.read_exact(&mut rec)?;
        let err = |message: String| SdcError::Parse { line: i + 1, message };
        ids.push(u32::from_le_bytes(rec[0..4].try_into().unwrap()));
        splits.push(SplitTag::from_byte(rec[4]).ok_or_else(|| err(format!("bad split byte {}", rec[4])))?);
        let label = i32::from_le_bytes(rec[5..9].try_into().unwrap());
        labels.push(match label {
            -1 => None,
            l if l < 0 || l as usize >= space.total() => {
                return Err(SdcError::LabelRange {
                    label: i64::from(l),
                    total: space.total(),
                })
            }
            l => Some(l as usize),
        });
        for chunk in rec[9..].chunks_exact(4) {
            data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
        }
    }
    let features = Matrix::from_vec(n, dim, data)?;
    EmbeddingDataset::new(ids, features, labels, splits, space)
}

/// Features are narrowed to `f32`, the on-disk precision of this format.
pub fn write_binary<W: Write>(ds: &EmbeddingDataset, w: &mut W) -> Result<()> {
    w.write_all(BIN_MAGIC)?;
    for v in [ds.len(), ds.dim(), ds.label_space.num_known, ds.label_space.num_novel] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for i in 0..ds.len() {
        w.write_all(&ds.ids[i].to_le_bytes())?;
        w.write_all(&[ds.splits[i].to_byte()])?;
        let label = ds.labels[i].map_or(-1, |l| l as i32);
        w.write_all(&label.to_le_bytes())?;
        for &x in ds.features.row(i) {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Output of [`split_dataset`]: the re-indexed dataset and, for every
/// internal category index, the category id it had in the input.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub dataset: EmbeddingDataset,
    pub original_category: Vec<usize>,
}

/// Stratified known/novel and labeled/unlabeled/test split.
///
/// `ceil(known_category_ratio · K)` categories become known and are
/// re-indexed to `0..M` (ascending original id), the rest to `M..K`.
/// Within each category, `round(test_fraction · n_c)` rows go to the test
/// split and, for known categories, `round(labeled_fraction · n_train)` of
/// the remaining rows are labeled.
pub fn split_dataset(
    ds: &EmbeddingDataset,
    labeled_fraction: f64,
    known_category_ratio: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitOutcome> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return invalid("labeled_fraction must lie in (0, 1)");
    }
    if !(known_category_ratio > 0.0 && known_category_ratio <= 1.0) {
        return invalid("known_category_ratio must lie in (0, 1]");
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return invalid("test_fraction must lie in (0, 1)");
    }
    let k = ds.label_space.total();
    let labels = ds.labels_at(&(0..ds.len()).collect::<Vec<_>>())?;
    // Tolerance keeps e.g. 0.7 · 10 from rounding up to 8.
    let m = ((known_category_ratio * k as f64) - 1e-9).ceil().max(0.0) as usize;
    if m == 0 {
        return invalid("known_category_ratio · K must be at least 1");
    }
    if m >= k {
        return invalid(format!(
            "split leaves no novel categories (M = {m}, K = {k}); discovery needs N >= 1"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut categories: Vec<usize> = (0..k).collect();
    categories.shuffle(&mut rng);
    let mut known: Vec<usize> = categories[..m].to_vec();
    let mut novel: Vec<usize> = categories[m..].to_vec();
    known.sort_unstable();
    novel.sort_unstable();
    let original_category: Vec<usize> = known.iter().chain(&novel).copied().collect();
    let mut internal = vec![0usize; k];
    for (new, &orig) in original_category.iter().enumerate() {
        internal[orig] = new;
    }

    let mut splits = vec![SplitTag::Unlabeled; ds.len()];
    for orig in 0..k {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == orig).collect();
        rows.shuffle(&mut rng);
        let n_test = (test_fraction * rows.len() as f64).round() as usize;
        let (test, train) = rows.split_at(n_test);
        for &i in test {
            splits[i] = SplitTag::Test;
        }
        if internal[orig] < m {
            let n_lab = (labeled_fraction * train.len() as f64).round() as usize;
            if n_lab == 0 {
                return invalid(format!("known category {orig} has no labeled rows after splitting"));
            }
            for &i in &train[..n_lab] {
                splits[i] = SplitTag::Labeled;
            }
        }
    }

    let new_labels = labels.iter().map(|&l| Some(internal[l])).collect();
    let dataset = EmbeddingDataset::new(
        ds.ids.clone(),
        ds.features.clone(),
        new_labels,
        splits,
        LabelSpace::new(m, k - m),
    )?;
    Ok(SplitOutcome {
        dataset,
        original_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_categories: usize,
    pub dim: usize,
    pub points_per_category: usize,
    /// Minimum distance between category means, in units of `within_std`.
    pub center_separation: f64,
    pub within_std: f64,
    /// Side of the hypercube the means are drawn from, in units of
    /// `center_separation · within_std`.
    pub placement_side: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_categories: 8,
            dim: 16,
            points_per_category: 200,
            center_separation: 6.0,
            within_std: 1.0,
            placement_side: 10.0,
            seed: 0,
        }
    }
}

const MEAN_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Samples an isotropic Gaussian mixture.
///
/// Means are drawn uniformly from a centered hypercube of side
/// `placement_side · separation · within_std` and rejected when closer than
/// `separation · within_std` to an earlier mean. Features are rounded to
/// `f32` so the binary format stores them exactly. Every row is tagged
/// unlabeled with its true category; all categories count as known until
/// [`split_dataset`] partitions them.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    if cfg.num_categories == 0 || cfg.dim == 0 {
        return invalid("synthetic data needs at least one category and dimension");
    }
    if !(cfg.center_separation > 0.0) || !(cfg.within_std > 0.0) || !(cfg.placement_side > 0.0) {
        return invalid("center_separation, within_std and placement_side must be positive");
    }
    if cfg.points_per_category < 2 {
        return invalid("points_per_category must be at least 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_dist = cfg.center_separation * cfg.within_std;
    let half_side = 0.5 * cfg.placement_side * min_dist;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_categories);
    while means.len() < cfg.num_categories {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-half_side..half_side)).collect();
            if means.iter().all(|m| squared_distance(m, &cand) >= min_dist * min_dist) {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return invalid(format!(
                "could not place {} means {} apart in {} dimensions",
                cfg.num_categories, min_dist, cfg.dim
            ));
        }
    }

    let n = cfg.num_categories * cfg.points_per_category;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.points_per_category {
            for &mu in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(f64::from((mu + cfg.within_std * z) as f32));
            }
            labels.push(Some(c));
        }
    }
    EmbeddingDataset::new(
        (0..n as u32).collect(),
        Matrix::from_vec(n, cfg.dim, data)?,
        labels,
        vec![SplitTag::Unlabeled; n],
        LabelSpace::new(cfg.num_categories, 0),
    )
}
