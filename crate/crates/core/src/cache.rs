//! Content-addressed disk cache for sample vectors.
//!
//! Keys are digests of (field context, index, cut points); values embed the
//! context digest and a payload checksum, so a cache entry can never be
//! replayed against a different field or silently corrupted. Writes go
//! through a temp file and an atomic rename; concurrent writers of the same
//! key are idempotent.

use crate::error::{Error, Result};
use crate::field::FieldContext;
use crate::scalar::{CycloScalar, ScalarRecord};
use crate::sums::{eval_sigma_batch, IterIndex, SampleRequest};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheRecord {
    ctx_digest: String,
    index: String,
    cuts: Vec<u64>,
    values: Vec<ScalarRecord>,
    checksum: String,
}

fn payload_checksum(ctx_digest: &str, index: &str, cuts: &[u64], values: &[ScalarRecord]) -> String {
    let mut h = Sha256::new();
    h.update(ctx_digest);
    h.update(";");
    h.update(index);
    h.update(";");
    for c in cuts {
        h.update(c.to_le_bytes());
    }
    h.update(serde_json::to_vec(values).expect("scalar records serialize"));
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Clone, Debug)]
pub struct SampleCache {
    dir: Option<PathBuf>,
}

impl SampleCache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)
                .map_err(|e| Error::Cache(format!("cannot create cache dir: {e}")))?;
        }
        Ok(SampleCache { dir })
    }

    pub fn disabled() -> Self {
        SampleCache { dir: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.dir.is_some()
    }

    fn key(&self, ctx: &FieldContext, index: &IterIndex, cuts: &[u64]) -> String {
        let mut h = Sha256::new();
        h.update(ctx.digest());
        h.update(";");
        h.update(index.canonical_string());
        h.update(";");
        for c in cuts {
            h.update(c.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn load(
        &self,
        ctx: &FieldContext,
        index: &IterIndex,
        cuts: &[u64],
    ) -> Option<Vec<CycloScalar>> {
        let path = self.path_for(&self.key(ctx, index, cuts))?;
        let data = std::fs::read(&path).ok()?;
        let rec: CacheRecord = serde_json::from_slice(&data).ok()?;
        if rec.ctx_digest != ctx.digest() || rec.cuts != cuts {
            return None;
        }
        if payload_checksum(&rec.ctx_digest, &rec.index, &rec.cuts, &rec.values) != rec.checksum {
            return None;
        }
        let mut out = Vec::with_capacity(rec.values.len());
        for r in &rec.values {
            out.push(CycloScalar::from_record(ctx, r).ok()?);
        }
        Some(out)
    }

    pub fn store(
        &self,
        ctx: &FieldContext,
        index: &IterIndex,
        cuts: &[u64],
        values: &[CycloScalar],
    ) -> Result<()> {
        let Some(path) = self.path_for(&self.key(ctx, index, cuts)) else {
            return Ok(());
        };
        let records: Vec<ScalarRecord> = values.iter().map(|v| v.to_record(ctx)).collect();
        let rec = CacheRecord {
            ctx_digest: ctx.digest().to_string(),
            index: index.canonical_string(),
            cuts: cuts.to_vec(),
            checksum: payload_checksum(
                ctx.digest(),
                &index.canonical_string(),
                cuts,
                &records,
            ),
            values: records,
        };
        let dir = path.parent().expect("cache path has a parent");
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .map_err(|e| Error::Cache(format!("temp file: {e}")))?;
        tmp.write_all(&serde_json::to_vec(&rec).expect("cache record serializes"))
            .map_err(|e| Error::Cache(format!("write: {e}")))?;
        tmp.persist(&path).map_err(|e| Error::Cache(format!("rename: {e}")))?;
        Ok(())
    }

    /// Scan the cache directory and report corrupt entries.
    pub fn verify_dir(&self) -> Result<Vec<(PathBuf, String)>> {
        let Some(dir) = &self.dir else {
            return Ok(Vec::new());
        };
        let mut bad = Vec::new();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| Error::Cache(format!("read cache dir: {e}")))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
            .collect();
        paths.sort();
        for path in paths {
            match check_file(&path) {
                Ok(()) => {}
                Err(msg) => bad.push((path, msg)),
            }
        }
        Ok(bad)
    }
}

fn check_file(path: &Path) -> std::result::Result<(), String> {
    let data = std::fs::read(path).map_err(|e| format!("unreadable: {e}"))?;
    let rec: CacheRecord =
        serde_json::from_slice(&data).map_err(|e| format!("unparsable: {e}"))?;
    let want = payload_checksum(&rec.ctx_digest, &rec.index, &rec.cuts, &rec.values);
    if want != rec.checksum {
        return Err("checksum mismatch".to_string());
    }
    Ok(())
}

/// Batched sigma evaluation through the cache: hits are loaded, misses are
/// evaluated in one shared pass and stored back.
pub fn eval_sigma_batch_cached(
    ctx: &FieldContext,
    cache: &SampleCache,
    requests: &[SampleRequest],
    budget: u64,
) -> Result<(Vec<Vec<CycloScalar>>, CacheStats)> {
    let mut stats = CacheStats::default();
    let mut out: Vec<Option<Vec<CycloScalar>>> = vec![None; requests.len()];
    let mut missing: Vec<usize> = Vec::new();
    for (k, req) in requests.iter().enumerate() {
        if let Some(values) = cache.load(ctx, &req.index, &req.cuts) {
            if values.len() == req.cuts.len() {
                stats.hits += 1;
                out[k] = Some(values);
                continue;
            }
        }
        stats.misses += 1;
        missing.push(k);
    }
    if !missing.is_empty() {
        let todo: Vec<SampleRequest> = missing.iter().map(|&k| requests[k].clone()).collect();
        let computed = eval_sigma_batch(ctx, &todo, budget)?;
        for (slot, values) in missing.iter().zip(computed) {
            cache.store(ctx, &requests[*slot].index, &requests[*slot].cuts, &values)?;
            out[*slot] = Some(values);
        }
    }
    Ok((out.into_iter().map(|o| o.unwrap()).collect(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = FieldContext::build(5, 4, 30).unwrap();
        let cache = SampleCache::new(Some(dir.path().to_path_buf())).unwrap();
        let idx = IterIndex::sigma_p(vec![1], vec![2]).unwrap();
        let cuts = vec![5u64, 25, 125];
        let req = SampleRequest { index: idx.clone(), cuts: cuts.clone() };

        let (v1, s1) = eval_sigma_batch_cached(&ctx, &cache, &[req.clone()], 1_000_000).unwrap();
        assert_eq!((s1.hits, s1.misses), (0, 1));
        let (v2, s2) = eval_sigma_batch_cached(&ctx, &cache, &[req.clone()], 1_000_000).unwrap();
        assert_eq!((s2.hits, s2.misses), (1, 0));
        for (a, b) in v1[0].iter().zip(&v2[0]) {
            assert!(a.eq_certified(&ctx, b));
        }
        assert!(cache.verify_dir().unwrap().is_empty());

        // corrupt one byte of the payload
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        let mut data = std::fs::read(&entry).unwrap();
        let pos = data.len() / 2;
        data[pos] = data[pos].wrapping_add(1);
        std::fs::write(&entry, &data).unwrap();
        let bad = cache.verify_dir().unwrap();
        assert_eq!(bad.len(), 1);
        // a corrupted entry is treated as a miss, not used
        let (_, s3) = eval_sigma_batch_cached(&ctx, &cache, &[req], 1_000_000).unwrap();
        assert_eq!(s3.misses, 1);
    }

    #[test]
    fn different_context_never_hits() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SampleCache::new(Some(dir.path().to_path_buf())).unwrap();
        let ctx_a = FieldContext::build(5, 4, 30).unwrap();
        let ctx_b = FieldContext::build(5, 4, 40).unwrap();
        let idx = IterIndex::sigma_p(vec![1], vec![0]).unwrap();
        let req = SampleRequest { index: idx, cuts: vec![25] };
        let _ = eval_sigma_batch_cached(&ctx_a, &cache, &[req.clone()], 1_000_000).unwrap();
        let (_, stats) = eval_sigma_batch_cached(&ctx_b, &cache, &[req], 1_000_000).unwrap();
        assert_eq!((stats.hits, stats.misses), (0, 1));
    }
}
