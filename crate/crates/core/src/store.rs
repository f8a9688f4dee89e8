//! Embedding matrices and their on-disk store format.
//!
//! A store is a directory with three files:
//!
//! - `manifest`: JSON with `format_version`, `owner_id`, `kind`, `dim`,
//!   `count` and `checksum`
//! - `ids.txt`: one id per line, LF-terminated, UTF-8
//! - `embeddings.bin`: `count * dim` little-endian `f32`, row-major
//!
//! `checksum` is the first 8 bytes of the SHA-256 digest of `embeddings.bin`,
//! read as a big-endian `u64` and written as 16 lowercase hex digits.
//! Rows are unit-normalized at write time so cosine reduces to a dot product.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MllError, Result};
use crate::fsio;

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const IDS_FILE: &str = "ids.txt";
pub const DATA_FILE: &str = "embeddings.bin";

/// Rows whose norm is within this distance of 1 count as unit vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Row-major `f32` matrix with one unique string id per row.
#[derive(Clone)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(MllError::InvalidInput("embedding dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(MllError::InvalidInput(format!(
                "{} values for {} ids of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        let mut dups = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                dups.push(id.clone());
            }
        }
        if !dups.is_empty() {
            dups.sort();
            dups.dedup();
            return Err(MllError::DuplicateId(dups));
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            index,
        })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MllError::InvalidInput("ragged rows".into()));
        }
        Self::new(ids, dim, rows.into_iter().flatten().collect())
    }

    /// A matrix with no rows.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Ids from `wanted` that have no row here, in the order given.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        wanted
            .into_iter()
            .filter(|id| !self.contains(id))
            .map(String::from)
            .collect()
    }

    /// Rows for `ids`, in that order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let missing = self.missing(ids.iter().map(AsRef::as_ref));
        if !missing.is_empty() {
            return Err(MllError::IncompleteEmbeddings(missing));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.get(id.as_ref()).unwrap());
        }
        Self::new(
            ids.iter().map(|s| s.as_ref().to_string()).collect(),
            self.dim,
            data,
        )
    }

    /// Rows of `self` followed by the rows of `other`.
    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if other.dim != self.dim {
            return Err(MllError::InvalidInput(format!(
                "dim mismatch: {} vs {}",
                self.dim, other.dim
            )));
        }
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(ids, self.dim, data)
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Copy with every row scaled to unit norm. Rows already within
    /// [`UNIT_NORM_TOLERANCE`] of unit norm are kept bit-for-bit.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, id) in self.ids.iter().enumerate() {
            let row = &mut out.data[i * self.dim..(i + 1) * self.dim];
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(MllError::InvalidValue(format!(
                    "non-finite value {bad} in row `{id}`"
                )));
            }
            let norm = norm(row);
            if norm == 0.0 {
                return Err(MllError::DegenerateEmbedding(id.clone()));
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                row.iter_mut()
                    .for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
        }
        Ok(out)
    }
}

impl PartialEq for EmbeddingMatrix {
    /// Bitwise comparison of the values, plus ids and dim.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingMatrix")
            .field("count", &self.ids.len())
            .field("dim", &self.dim)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    Image,
    Caption,
    ClassPrompt,
    TaskCaption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub owner_id: String,
    pub kind: StoreKind,
    pub dim: usize,
    pub count: usize,
    pub checksum: String,
}

pub fn checksum(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    format!("{:016x}", u64::from_be_bytes(head))
}

fn encode(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `matrix` as a new store directory at `path`. The directory is
/// assembled under a temporary name and renamed into place.
pub fn write_store(
    path: &Path,
    matrix: &EmbeddingMatrix,
    owner_id: &str,
    kind: StoreKind,
) -> Result<StoreManifest> {
    if path.exists() {
        return Err(MllError::AlreadyExists(path.to_path_buf()));
    }
    if let Some(bad) = matrix
        .ids
        .iter()
        .find(|id| id.is_empty() || id.contains(['\n', '\r']))
    {
        return Err(MllError::InvalidInput(format!(
            "id {bad:?} cannot be stored one-per-line"
        )));
    }
    let normalized = matrix.normalized()?;
    let bytes = encode(&normalized.data);
    let manifest = StoreManifest {
        format_version: STORE_FORMAT_VERSION,
        owner_id: owner_id.to_string(),
        kind,
        dim: normalized.dim,
        count: normalized.len(),
        checksum: checksum(&bytes),
    };
    let mut ids_text = String::new();
    for id in &normalized.ids {
        ids_text.push_str(id);
        ids_text.push('\n');
    }

    let tmp = fsio::temp_sibling(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| MllError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| MllError::io(&tmp, e))?;
    let write = |name: &str, contents: &[u8]| {
        let p = tmp.join(name);
        fs::write(&p, contents).map_err(|e| MllError::io(&p, e))
    };
    write(DATA_FILE, &bytes)?;
    write(IDS_FILE, ids_text.as_bytes())?;
    write(MANIFEST_FILE, fsio::to_canonical_json(&manifest)?.as_bytes())?;
    fs::rename(&tmp, path).map_err(|e| MllError::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<StoreManifest> {
    fsio::read_json(&path.join(MANIFEST_FILE))
}

/// Reads and fully validates a store: sizes, checksum, id uniqueness and
/// unit norms.
pub fn read_store(path: &Path) -> Result<EmbeddingMatrix> {
    read_store_with_manifest(path).map(|(m, _)| m)
}

pub fn read_store_with_manifest(path: &Path) -> Result<(EmbeddingMatrix, StoreManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.format_version != STORE_FORMAT_VERSION {
        return Err(MllError::Format(format!(
            "{}: unsupported store format_version {}",
            path.display(),
            manifest.format_version
        )));
    }
    if manifest.dim == 0 {
        return Err(MllError::Format(format!("{}: dim is zero", path.display())));
    }
    let data_path = path.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| MllError::io(&data_path, e))?;
    let expected_len = manifest.count * manifest.dim * 4;
    if bytes.len() != expected_len {
        return Err(MllError::Format(format!(
            "{}: {} bytes, manifest implies {expected_len}",
            data_path.display(),
            bytes.len()
        )));
    }
    let actual = checksum(&bytes);
    if actual != manifest.checksum {
        return Err(MllError::Corruption {
            path: data_path,
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let ids_path = path.join(IDS_FILE);
    let ids_text = fs::read_to_string(&ids_path).map_err(|e| MllError::io(&ids_path, e))?;
    if !ids_text.is_empty() && !ids_text.ends_with('\n') {
        return Err(MllError::Format(format!(
            "{}: missing final newline",
            ids_path.display()
        )));
    }
    let ids: Vec<String> = ids_text.lines().map(String::from).collect();
    if ids.len() != manifest.count {
        return Err(MllError::Format(format!(
            "{}: {} ids, manifest count {}",
            ids_path.display(),
            ids.len(),
            manifest.count
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = EmbeddingMatrix::new(ids, manifest.dim, data).map_err(|e| match e {
        MllError::DuplicateId(ids) => {
            MllError::Format(format!("{}: duplicate ids {}", path.display(), ids.join(", ")))
        }
        other => other,
    })?;
    for (id, row) in matrix.rows() {
        let n = norm(row);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(MllError::Format(format!(
                "{}: row `{id}` has norm {n}, expected unit",
                path.display()
            )));
        }
    }
    Ok((matrix, manifest))
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MllError::InvalidInput(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MllError::InvalidInput("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unclamped cosine for hot loops where the caller has already checked dims
/// and non-zero norms.
pub(crate) fn cosine_with_norms(a: &[f32], a_norm: f64, b: &[f32], b_norm: f64) -> f64 {
    dot(a, b) / (a_norm * b_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn write_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows(
            ids(2),
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        let path = dir.path().join("s");
        let manifest = write_store(&path, &m, "model-a", StoreKind::Image).unwrap();
        assert_eq!(fs::metadata(path.join(DATA_FILE)).unwrap().len(), 32);
        assert_eq!(manifest.count, 2);
        assert_eq!(manifest.checksum.len(), 16);
        assert_eq!(fs::read_to_string(path.join(IDS_FILE)).unwrap(), "id0\nid1\n");
        assert_eq!(read_store(&path).unwrap(), m);
        assert!(matches!(
            write_store(&path, &m, "model-a", StoreKind::Image),
            Err(MllError::AlreadyExists(_))
        ));
    }

    #[test]
    fn write_scales_to_unit() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows(ids(1), vec![vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        write_store(&dir.path().join("s"), &m, "m", StoreKind::Caption).unwrap();
        let back = read_store(&dir.path().join("s")).unwrap();
        assert_eq!(back.row(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn write_rejects_zero_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let zero = EmbeddingMatrix::from_rows(ids(1), vec![vec![0.0; 4]]).unwrap();
        match write_store(&dir.path().join("z"), &zero, "m", StoreKind::Image) {
            Err(MllError::DegenerateEmbedding(id)) => assert_eq!(id, "id0"),
            other => panic!("unexpected {other:?}"),
        }
        let nan = EmbeddingMatrix::from_rows(ids(1), vec![vec![f32::NAN, 1.0]]).unwrap();
        assert!(matches!(
            write_store(&dir.path().join("n"), &nan, "m", StoreKind::Image),
            Err(MllError::InvalidValue(_))
        ));
        assert!(!dir.path().join("z").exists());
    }

    #[test]
    fn read_detects_truncation_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        let m = EmbeddingMatrix::from_rows(ids(2), vec![vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        write_store(&path, &m, "m", StoreKind::Image).unwrap();

        let bin = path.join(DATA_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_store(&path), Err(MllError::Format(_))));

        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        fs::write(&bin, &flipped).unwrap();
        assert!(matches!(read_store(&path), Err(MllError::Corruption { .. })));

        fs::write(&bin, &bytes).unwrap();
        fs::write(path.join(IDS_FILE), "id0\n").unwrap();
        assert!(matches!(read_store(&path), Err(MllError::Format(_))));
    }

    #[test]
    fn cosine_basics() {
        let e0 = [1.0, 0.0, 0.0, 0.0];
        let e1 = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(cosine(&e0, &e0).unwrap(), 1.0);
        assert_eq!(cosine(&e0, &e1).unwrap(), 0.0);
        assert!(cosine(&e0, &[1.0, 0.0]).is_err());
        assert!(cosine(&e0, &[0.0; 4]).is_err());
    }

    #[test]
    fn cosine_matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Kahan-summed double-precision reference.
            let kahan = |xs: &mut dyn Iterator<Item = f64>| {
                let (mut sum, mut c) = (0.0f64, 0.0f64);
                for x in xs {
                    let y = x - c;
                    let t = sum + y;
                    c = (t - sum) - y;
                    sum = t;
                }
                sum
            };
            let ab = kahan(&mut a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64));
            let aa = kahan(&mut a.iter().map(|x| (*x as f64).powi(2)));
            let bb = kahan(&mut b.iter().map(|x| (*x as f64).powi(2)));
            let expected = ab / (aa.sqrt() * bb.sqrt());
            assert!((cosine(&a, &b).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn lookup_preserves_order() {
        let m = EmbeddingMatrix::from_rows(
            vec!["b".into(), "a".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(m.get("b").unwrap(), m.row(0));
        assert_eq!(m.get("a").unwrap(), m.row(1));
        assert!(EmbeddingMatrix::from_rows(vec!["a".into(), "a".into()], vec![vec![1.0], vec![1.0]]).is_err());
    }

    fn unit_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (1usize..12, 0usize..10, any::<u64>()).prop_map(|(dim, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let mut r: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    r[0] += 2.0;
                    let n = norm(&r);
                    r.iter().map(|v| (*v as f64 / n) as f32).collect()
                })
                .collect();
            EmbeddingMatrix::new(ids(n), dim, rows.into_iter().flatten().collect()).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn store_round_trip_is_bitwise(m in unit_matrix()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s");
            write_store(&path, &m, "owner", StoreKind::Image).unwrap();
            prop_assert_eq!(read_store(&path).unwrap(), m);
        }
    }

    proptest! {

        #[test]
        fn cosine_scale_invariant_and_symmetric(
            a in proptest::collection::vec(-1.0f32..1.0, 8),
            b in proptest::collection::vec(-1.0f32..1.0, 8),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let base = cosine(&a, &b).unwrap();
            prop_assert_eq!(base, cosine(&b, &a).unwrap());
            let sa: Vec<f32> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f32> = b.iter().map(|v| v * beta).collect();
            prop_assert!((cosine(&sa, &sb).unwrap() - base).abs() < 1e-6);
        }
    }
}
