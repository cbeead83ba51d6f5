//! Sentence encoders: a deterministic signed feature-hashing embedder, an
//! HTTP client for external encoders, and a persistent JSONL cache in front
//! of either.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const MIN_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// A fixed-length embedding, either all zeros or unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> EmbeddingVector {
        EmbeddingVector(vec![0.0; dim])
    }

    /// Scales `values` to unit norm; an all-zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> EmbeddingVector {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector(values)
    }

    /// Wraps values as-is, without normalizing.
    pub fn from_raw(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// A sentence encoder φ.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the encoder (not its cache); heads record it so they are
    /// never applied to vectors from a different encoder.
    fn fingerprint(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Signed feature hashing over word unigrams (`w=` prefix) and character
/// trigrams (`c=` prefix) of the lowercased, whitespace-normalized text
/// padded with `^` and `$`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Result<HashedEmbedder> {
        if dim < MIN_DIM {
            return Err(Error::InvalidConfig(format!("dimension {dim} < {MIN_DIM}")));
        }
        Ok(HashedEmbedder { dim })
    }

    /// The hashed features of `text`, in extraction order.
    pub fn features(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        let mut feats: Vec<String> = words.iter().map(|w| format!("w={w}")).collect();
        let padded: Vec<char> = std::iter::once('^')
            .chain(words.join(" ").chars())
            .chain(std::iter::once('$'))
            .collect();
        feats.extend(
            padded
                .windows(3)
                .map(|tri| format!("c={}", tri.iter().collect::<String>())),
        );
        feats
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder { dim: DEFAULT_DIM }
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        sha256_hex(&format!("hashed-fnv1a64-w1c3-v1;dim={}", self.dim))
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut values = vec![0.0; self.dim];
        for f in Self::features(text) {
            let h = fnv1a64(f.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[(h % self.dim as u64) as usize] += sign;
        }
        Ok(EmbeddingVector::normalized(values))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an HTTP encoder speaking `{"texts": [...]}` → `{"vectors": [[...]]}`.
/// Returned vectors are L2-normalized.
pub struct ExternalEmbedder {
    endpoint: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl ExternalEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Result<ExternalEmbedder> {
        if dim < MIN_DIM {
            return Err(Error::InvalidConfig(format!("dimension {dim} < {MIN_DIM}")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        Ok(ExternalEmbedder {
            endpoint: endpoint.into(),
            dim,
            client,
        })
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        sha256_hex(&format!("external;endpoint={};dim={}", self.endpoint, self.dim))
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let unavailable = |e: reqwest::Error| Error::ProviderUnavailable(e.to_string());
        let resp: EmbedResponse = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?
            .json()
            .map_err(unavailable)?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::ProviderUnavailable(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::ProviderUnavailable("non-finite vector".into()));
                }
                Ok(EmbeddingVector::normalized(v))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    text_sha256: String,
    dim: usize,
    values: Vec<f64>,
}

struct CacheState {
    vectors: HashMap<String, EmbeddingVector>,
    file: Option<File>,
}

/// Persistent cache keyed by the SHA-256 of the raw text. The backing file
/// is loaded once at construction and appended to on every miss.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    path: PathBuf,
    state: Mutex<CacheState>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl CachedEmbedder {
    pub fn open(inner: Box<dyn Embedder>, path: impl Into<PathBuf>) -> Result<CachedEmbedder> {
        let path = path.into();
        let mut vectors = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| Error::CacheCorrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason,
                };
                let rec: CacheLine =
                    serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                if rec.text_sha256.len() != 64 || hex::decode(&rec.text_sha256).is_err() {
                    return Err(corrupt("bad text_sha256".into()));
                }
                if rec.values.len() != rec.dim {
                    return Err(corrupt(format!(
                        "dim {} but {} values",
                        rec.dim,
                        rec.values.len()
                    )));
                }
                if rec.dim != inner.dim() {
                    return Err(corrupt(format!(
                        "dim {} but provider dim {}",
                        rec.dim,
                        inner.dim()
                    )));
                }
                vectors.insert(rec.text_sha256, EmbeddingVector::from_raw(rec.values));
            }
        }
        Ok(CachedEmbedder {
            inner,
            path,
            state: Mutex::new(CacheState {
                vectors,
                file: None,
            }),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(state: &mut CacheState, path: &Path, key: &str, v: &EmbeddingVector) -> Result<()> {
        if state.file.is_none() {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            state.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        }
        let line = serde_json::to_string(&CacheLine {
            text_sha256: key.to_string(),
            dim: v.dim(),
            values: v.values().to_vec(),
        })?;
        let file = state.file.as_mut().expect("opened above");
        writeln!(file, "{line}")?;
        Ok(())
    }
}

impl Embedder for CachedEmbedder {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let keys: Vec<String> = texts.iter().map(|t| sha256_hex(t)).collect();
        let mut state = self.state.lock().expect("cache lock");
        let mut missing: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if !state.vectors.contains_key(k) && !missing.iter().any(|&j| keys[j] == *k) {
                missing.push(i);
            }
        }
        self.hits
            .fetch_add(texts.len() - missing.len(), Ordering::Relaxed);
        self.misses.fetch_add(missing.len(), Ordering::Relaxed);
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.embed_batch(&batch)?;
            for (&i, v) in missing.iter().zip(fresh) {
                Self::persist(&mut state, &self.path, &keys[i], &v)?;
                state.vectors.insert(keys[i].clone(), v);
            }
        }
        Ok(keys.iter().map(|k| state.vectors[k].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashed,
    Cached,
    External,
}

/// How to construct φ. A `Cached` provider wraps the external encoder when
/// an endpoint is set and the hashed one otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dimension: usize,
    pub cache_path: Option<PathBuf>,
    pub endpoint: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Hashed,
            dimension: DEFAULT_DIM,
            cache_path: None,
            endpoint: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < MIN_DIM {
            return Err(Error::InvalidConfig(format!(
                "dimension {} < {MIN_DIM}",
                self.dimension
            )));
        }
        match self.kind {
            ProviderKind::External if self.endpoint.is_none() => Err(Error::InvalidConfig(
                "external provider requires an endpoint".into(),
            )),
            ProviderKind::Cached if self.cache_path.is_none() => Err(Error::InvalidConfig(
                "cached provider requires a cache path".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        let base: Box<dyn Embedder> = match &self.endpoint {
            Some(ep) if self.kind != ProviderKind::Hashed => {
                Box::new(ExternalEmbedder::new(ep.clone(), self.dimension)?)
            }
            _ => Box::new(HashedEmbedder::new(self.dimension)?),
        };
        match self.kind {
            ProviderKind::Cached => {
                let path = self.cache_path.clone().expect("validated");
                Ok(Box::new(CachedEmbedder::open(base, path)?))
            }
            _ => Ok(base),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashedEmbedder::default();
        let v = e.embed("").unwrap();
        assert!(v.is_zero());
        assert_eq!(v.dim(), 256);
        assert!(e.embed("   ").unwrap().is_zero());
    }

    #[test]
    fn lowercasing_and_whitespace() {
        let e = HashedEmbedder::default();
        assert_eq!(e.embed("Noon Tomorrow").unwrap(), e.embed("noon tomorrow").unwrap());
        assert_eq!(e.embed("noon  tomorrow ").unwrap(), e.embed("noon tomorrow").unwrap());
    }

    #[test]
    fn features_layout() {
        assert_eq!(
            HashedEmbedder::features("Hi yo"),
            vec!["w=hi", "w=yo", "c=^hi", "c=hi ", "c=i y", "c= yo", "c=yo$"]
        );
        assert_eq!(HashedEmbedder::features("a"), vec!["w=a", "c=^a$"]);
        assert!(HashedEmbedder::features("").is_empty());
    }

    #[test]
    fn unit_norm() {
        let e = HashedEmbedder::new(64).unwrap();
        for t in ["set an alarm", "x", "what is the weather like in paris"] {
            let v = e.embed(t).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_identities() {
        let e = HashedEmbedder::default();
        let v = e.embed("wake me up").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg = EmbeddingVector::from_raw(v.values().iter().map(|x| -x).collect());
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        a[0] = 1.0;
        b[1] = 1.0;
        let (a, b) = (EmbeddingVector::from_raw(a), EmbeddingVector::from_raw(b));
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine(&a, &EmbeddingVector::zeros(8)).unwrap(), 0.0);
        assert!(matches!(
            cosine(&a, &EmbeddingVector::zeros(9)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(HashedEmbedder::new(4).is_err());
        let cfg = ProviderConfig {
            kind: ProviderKind::External,
            ..ProviderConfig::default()
        };
        assert!(matches!(cfg.build(), Err(Error::InvalidConfig(_))));
        let cfg = ProviderConfig {
            kind: ProviderKind::Cached,
            ..ProviderConfig::default()
        };
        assert!(cfg.build().is_err());
    }

    #[test]
    fn cache_hits_and_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let direct = HashedEmbedder::default().embed("wake me at 6 am").unwrap();

        let cache = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path).unwrap();
        let a = cache.embed("wake me at 6 am").unwrap();
        let b = cache.embed("wake me at 6 am").unwrap();
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert_eq!(a, b);
        assert_eq!(a, direct);
        drop(cache);

        // persisted vectors reload bitwise
        let reopened = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path).unwrap();
        assert_eq!(reopened.len(), 1);
        let c = reopened.embed("wake me at 6 am").unwrap();
        assert_eq!(reopened.hits(), 1);
        assert_eq!(
            c.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            direct.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        drop(reopened);

        fs::remove_file(&path).unwrap();
        let fresh = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path).unwrap();
        assert_eq!(fresh.embed("wake me at 6 am").unwrap(), direct);
        assert_eq!(fresh.misses(), 1);
        assert!(path.exists());
    }

    #[test]
    fn cache_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        fs::write(&path, "{\"text_sha256\":\"ab\",\"dim\":256,\"values\":[]}\n").unwrap();
        let r = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path);
        assert!(matches!(r, Err(Error::CacheCorrupt { line: 1, .. })));
        fs::write(&path, "not json\n").unwrap();
        let r = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path);
        assert!(matches!(r, Err(Error::CacheCorrupt { .. })));
        let key = "0".repeat(64);
        fs::write(&path, format!("{{\"text_sha256\":\"{key}\",\"dim\":3,\"values\":[1.0]}}\n"))
            .unwrap();
        let r = CachedEmbedder::open(Box::new(HashedEmbedder::default()), &path);
        assert!(matches!(r, Err(Error::CacheCorrupt { .. })));
    }

    #[test]
    fn fingerprint_ignores_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cached = ProviderConfig {
            kind: ProviderKind::Cached,
            cache_path: Some(dir.path().join("c.jsonl")),
            ..ProviderConfig::default()
        }
        .build()
        .unwrap();
        let plain = ProviderConfig::default().build().unwrap();
        assert_eq!(cached.fingerprint(), plain.fingerprint());
        assert_ne!(
            plain.fingerprint(),
            HashedEmbedder::new(128).unwrap().fingerprint()
        );
    }
}
