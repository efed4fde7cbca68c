//! Compute-once store for Neumann weight vectors, keyed by design
//! fingerprint, sample size and degree, with an optional on-disk cache.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use nalgebra::DMatrix;

use crate::design_matrix::NormalizedDesign;
use crate::error::{Error, Result};
use crate::folding::{degree_table, GramContext, NeumannWeightVector};

/// Environment variable naming the cache directory when no flag is given.
pub const CACHE_ENV: &str = "NEUMANN_RA_WEIGHTS_CACHE";

const MAGIC: &[u8; 8] = b"NRAWGT01";
const HEADER_WORDS: usize = 6;

/// FNV-1a over `(n, p)` and the row-major bytes of `X`.
pub fn fingerprint(x: &DMatrix<f64>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&(x.nrows() as u64).to_le_bytes());
    eat(&(x.ncols() as u64).to_le_bytes());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            eat(&x[(i, j)].to_bits().to_le_bytes());
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub fingerprint: u64,
    pub m: usize,
    pub d: usize,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        format!("w_{:016x}_m{}_d{}.bin", self.fingerprint, self.m, self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCacheEntry {
    pub key: CacheKey,
    pub vector: NeumannWeightVector,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

fn encode(entry: &WeightCacheEntry, p: usize) -> Vec<u8> {
    let xi = &entry.vector.xi;
    let mut buf = Vec::with_capacity(8 * (1 + HEADER_WORDS + xi.len()));
    buf.extend_from_slice(MAGIC);
    for w in [xi.len() as u64, p as u64, entry.key.m as u64, entry.key.d as u64, entry.key.fingerprint, entry.created_at] {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for v in xi {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode(bytes: &[u8], key: CacheKey, n: usize, p: usize) -> Result<WeightCacheEntry> {
    let corrupt = |why: &str| Error::CacheCorrupt(format!("{}: {why}", key.file_name()));
    if bytes.len() < 8 * (1 + HEADER_WORDS) || &bytes[..8] != MAGIC {
        return Err(corrupt("bad header"));
    }
    let word = |k: usize| {
        let off = 8 * (1 + k);
        u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
    };
    let stored = [word(0), word(1), word(2), word(3), word(4)];
    if stored != [n as u64, p as u64, key.m as u64, key.d as u64, key.fingerprint] {
        return Err(corrupt("key mismatch"));
    }
    let body = &bytes[8 * (1 + HEADER_WORDS)..];
    if body.len() != 8 * n {
        return Err(corrupt("truncated"));
    }
    let xi = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(WeightCacheEntry {
        key,
        vector: NeumannWeightVector { d: key.d, m: key.m, xi },
        created_at: word(5),
    })
}

/// Write-temp-then-rename so readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("weights"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// In-memory plus optional on-disk weight store.
#[derive(Debug, Default)]
pub struct WeightService {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<CacheKey, NeumannWeightVector>>,
    computes: AtomicUsize,
}

impl WeightService {
    /// Memory-only store.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }

    /// Explicit directory if given, else the environment variable, else memory only.
    pub fn from_flag_or_env(flag: Option<&Path>) -> Self {
        match flag {
            Some(d) => Self::with_dir(d),
            None => match std::env::var_os(CACHE_ENV) {
                Some(d) if !d.is_empty() => Self::with_dir(PathBuf::from(d)),
                _ => Self::in_memory(),
            },
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Number of engine evaluations performed so far.
    pub fn compute_count(&self) -> usize {
        self.computes.load(Ordering::Relaxed)
    }

    pub fn path_for(&self, key: CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(key.file_name()))
    }

    pub fn get_or_compute(&self, design: &NormalizedDesign, m: usize, d: usize) -> Result<NeumannWeightVector> {
        self.get_or_compute_with(&GramContext::new(design), m, d)
    }

    /// Same as [`get_or_compute`](Self::get_or_compute) but reuses an existing context.
    pub fn get_or_compute_with(&self, ctx: &GramContext, m: usize, d: usize) -> Result<NeumannWeightVector> {
        let n = ctx.n();
        if m == 0 || m > n {
            return Err(Error::InvalidInput(format!("sample size {m} outside 1..={n}")));
        }
        let key = CacheKey { fingerprint: fingerprint(ctx.matrix()), m, d };
        if let Some(v) = self.memory.lock().expect("weight memo poisoned").get(&key) {
            return Ok(v.clone());
        }
        if let Some(path) = self.path_for(key) {
            if path.exists() {
                match fs::read(&path).map_err(Error::from).and_then(|b| decode(&b, key, n, ctx.p())) {
                    Ok(entry) => {
                        debug!("weights cache hit {}", path.display());
                        self.remember(key, &entry.vector);
                        return Ok(entry.vector);
                    }
                    Err(e) => warn!("{e}; recomputing"),
                }
            }
        }
        self.computes.fetch_add(1, Ordering::Relaxed);
        let vector = degree_table(d, ctx)?.weights(m)?;
        if let Some(path) = self.path_for(key) {
            let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|t| t.as_secs()).unwrap_or(0);
            let entry = WeightCacheEntry { key, vector: vector.clone(), created_at };
            write_atomic(&path, &encode(&entry, ctx.p()))?;
        }
        self.remember(key, &vector);
        Ok(vector)
    }

    /// Degrees `0..=max_degree` at one sample size.
    pub fn ladder(&self, ctx: &GramContext, m: usize, max_degree: usize) -> Result<Vec<NeumannWeightVector>> {
        (0..=max_degree).map(|d| self.get_or_compute_with(ctx, m, d)).collect()
    }

    fn remember(&self, key: CacheKey, v: &NeumannWeightVector) {
        self.memory.lock().expect("weight memo poisoned").insert(key, v.clone());
    }
}

/// Load a cache file directly (for inspection and tests).
pub fn load_entry(path: &Path, key: CacheKey, n: usize, p: usize) -> Result<WeightCacheEntry> {
    decode(&fs::read(path)?, key, n, p)
}
