//! Offline text-embedding store.
//!
//! Shard layout (little-endian):
//! ```text
//! "FLME" | u32 version = 1 | u32 d_t | u32 K | u64 n_samples
//! u64 sample ids[n], strictly increasing
//! f32 payload[n][K][d_t]
//! u64 FNV-1a of every preceding byte
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{f32s_from_le, Reader};
use crate::error::{Error, FormatError, Result};
use crate::facet::embed_multifacet;
use crate::lm::FrozenLm;
use crate::numerics::fnv1a64;
use crate::prompts::PromptSet;

pub const FLME_MAGIC: [u8; 4] = *b"FLME";
pub const FLME_VERSION: u32 = 1;
pub const DEFAULT_SHARD_SIZE: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: u64,
    pub caption: String,
    /// Image path, relative to the corpus file unless absolute.
    pub image: String,
    /// Ground-truth attributes for classification, e.g. `shape -> circle`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
    /// Directory relative image paths resolve against.
    pub root: PathBuf,
}

impl Corpus {
    pub fn new(records: Vec<Record>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id) {
                return Err(FormatError::Malformed(format!("duplicate sample id {}", r.id)).into());
            }
        }
        Ok(Corpus {
            records,
            root: root.into(),
        })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| {
                FormatError::Malformed(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, root)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// One shard of per-sample, per-facet embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingShard {
    pub d_t: usize,
    pub facets: usize,
    pub ids: Vec<u64>,
    pub data: Vec<f32>,
}

impl EmbeddingShard {
    pub fn new(d_t: usize, facets: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FormatError::Malformed(
                "shard sample ids are not strictly increasing".into(),
            )
            .into());
        }
        if data.len() != ids.len() * facets * d_t {
            return Err(Error::shape(
                "embedding shard",
                &[ids.len(), facets, d_t],
                &[data.len()],
            ));
        }
        Ok(EmbeddingShard {
            d_t,
            facets,
            ids,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.ids.len() * 8 + self.data.len() * 4 + 8);
        out.extend_from_slice(&FLME_MAGIC);
        out.extend_from_slice(&FLME_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_t as u32).to_le_bytes());
        out.extend_from_slice(&(self.facets as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FLME_MAGIC)?;
        let version = r.u32("version")?;
        if version != FLME_VERSION {
            return Err(FormatError::BadVersion {
                expected: FLME_VERSION,
                found: version,
            }
            .into());
        }
        if bytes.len() < 8 {
            return Err(FormatError::Truncated("missing checksum".into()).into());
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed }.into());
        }
        let d_t = r.u32("d_t")? as usize;
        let facets = r.u32("facet count")? as usize;
        let n = r.u64("sample count")? as usize;
        let expected = n
            .checked_mul(8 + facets * d_t * 4)
            .and_then(|x| x.checked_add(r.position()))
            .ok_or_else(|| FormatError::Malformed("shard size overflows".into()))?;
        if expected != body.len() {
            return Err(FormatError::Malformed(format!(
                "shard body is {} bytes, header implies {expected}",
                body.len()
            ))
            .into());
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64("sample id")?);
        }
        let payload = r.take(n * facets * d_t * 4, "payload")?;
        Self::new(d_t, facets, ids, f32s_from_le(payload))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `K × d_t` block of a sample.
    pub fn sample(&self, id: u64) -> Option<&[f32]> {
        let i = self.ids.binary_search(&id).ok()?;
        let block = self.facets * self.d_t;
        Some(&self.data[i * block..(i + 1) * block])
    }
}

pub fn read_shard(path: &Path) -> Result<EmbeddingShard> {
    EmbeddingShard::read(path)
}

/// All shards of one caption source, ordered by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    shards: Vec<EmbeddingShard>,
    d_t: usize,
    facets: usize,
}

impl EmbeddingStore {
    pub fn from_shards(mut shards: Vec<EmbeddingShard>) -> Result<Self> {
        shards.retain(|s| !s.is_empty());
        let Some(first) = shards.first() else {
            return Err(Error::Config("embedding store has no samples".into()));
        };
        let (d_t, facets) = (first.d_t, first.facets);
        if shards.iter().any(|s| s.d_t != d_t || s.facets != facets) {
            return Err(FormatError::Malformed("shards disagree on d_t or K".into()).into());
        }
        shards.sort_by_key(|s| s.ids[0]);
        if shards
            .windows(2)
            .any(|w| w[0].ids.last() >= w[1].ids.first())
        {
            return Err(FormatError::Malformed("shards overlap in sample ids".into()).into());
        }
        Ok(EmbeddingStore {
            shards,
            d_t,
            facets,
        })
    }

    /// Reads every `*.flme` file in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "flme") {
                paths.push(path);
            }
        }
        paths.sort();
        let shards = paths
            .iter()
            .map(|p| read_shard(p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_shards(shards)
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn facets(&self) -> usize {
        self.facets
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(EmbeddingShard::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `K × d_t` block of a sample; binary search over shards then ids.
    pub fn sample(&self, id: u64) -> Result<&[f32]> {
        let idx = self.shards.partition_point(|s| *s.ids.last().unwrap() < id);
        self.shards
            .get(idx)
            .and_then(|s| s.sample(id))
            .ok_or(Error::NotFound {
                sample_id: id,
                facet: None,
            })
    }

    pub fn lookup(&self, id: u64, facet: usize) -> Result<&[f32]> {
        if facet >= self.facets {
            return Err(Error::NotFound {
                sample_id: id,
                facet: Some(facet),
            });
        }
        let block = self.sample(id)?;
        Ok(&block[facet * self.d_t..(facet + 1) * self.d_t])
    }
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.flme")
}

/// Embeds every caption under every prompt and writes shards of `shard_size` samples.
pub fn precompute(
    corpus: &Corpus,
    lm: &FrozenLm,
    prompts: &PromptSet,
    shard_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if corpus.is_empty() {
        return Err(Error::Config(
            "cannot precompute embeddings of an empty corpus".into(),
        ));
    }
    if shard_size == 0 {
        return Err(Error::Config("shard size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records: Vec<&Record> = corpus.records.iter().collect();
    records.sort_by_key(|r| r.id);
    let d_t = lm.d_model();
    let mut paths = Vec::new();
    for (index, chunk) in records.chunks(shard_size).enumerate() {
        let blocks = chunk
            .par_iter()
            .map(|r| {
                embed_multifacet(lm, &r.caption, prompts)
                    .map(|e| e.rows.into_data())
                    .map_err(|e| match e {
                        e @ Error::Capacity { .. } => Error::SampleCapacity {
                            sample_id: r.id,
                            source: Box::new(e),
                        },
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = chunk.iter().map(|r| r.id).collect();
        let shard = EmbeddingShard::new(d_t, prompts.len(), ids, blocks.concat())?;
        let path = out_dir.join(shard_file_name(index));
        shard.write(&path)?;
        log::info!("wrote {} ({} samples)", path.display(), shard.len());
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, DEFAULT_LM_SEED};

    fn corpus(n: u64) -> Corpus {
        let records = (0..n)
            .map(|i| Record {
                id: 100 + i * 3,
                caption: if i == 4 {
                    String::new()
                } else {
                    format!("caption number {i} with a blue square")
                },
                image: format!("img_{i}.ppm"),
                labels: BTreeMap::new(),
            })
            .collect();
        Corpus::new(records, "/tmp").unwrap()
    }

    #[test]
    fn shard_partition_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let lm = FrozenLm::init(LmConfig::default(), DEFAULT_LM_SEED).unwrap();
        let prompts = PromptSet::builtin().select(&[1, 7]).unwrap();
        let c = corpus(10);
        let paths = precompute(&c, &lm, &prompts, 4, dir.path()).unwrap();
        let sizes: Vec<usize> = paths.iter().map(|p| read_shard(p).unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let store = EmbeddingStore::open(dir.path()).unwrap();
        assert_eq!(store.len(), 10);
        for r in &c.records {
            let e = embed_multifacet(&lm, &r.caption, &prompts).unwrap();
            for k in 0..2 {
                let got = store.lookup(r.id, k).unwrap();
                assert_eq!(got, e.row(k));
                assert!(got.iter().all(|v| v.is_finite()));
            }
        }
        assert!(matches!(
            store.lookup(101, 0),
            Err(Error::NotFound { sample_id: 101, .. })
        ));
        assert!(matches!(store.lookup(100, 5), Err(Error::NotFound { .. })));

        // rerun is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        let again = precompute(&c, &lm, &prompts, 4, dir2.path()).unwrap();
        for (a, b) in paths.iter().zip(&again) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn shard_roundtrip_and_corruption() {
        let shard = EmbeddingShard::new(
            3,
            2,
            vec![1, 5, 9],
            (0..18).map(|i| i as f32 * 0.25 - 1.0).collect(),
        )
        .unwrap();
        let bytes = shard.to_bytes();
        let back = EmbeddingShard::from_bytes(&bytes).unwrap();
        assert_eq!(back, shard);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[24 + 3 * 8 + 5] ^= 1;
        assert!(matches!(
            EmbeddingShard::from_bytes(&bad),
            Err(Error::Format(FormatError::Checksum { .. }))
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            EmbeddingShard::from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            EmbeddingShard::from_bytes(&bad),
            Err(Error::Format(FormatError::BadVersion { .. }))
        ));
        assert!(EmbeddingShard::new(1, 1, vec![3, 3], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn corpus_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(3);
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, c.to_jsonl()).unwrap();
        let back = Corpus::load_jsonl(&path).unwrap();
        assert_eq!(back.records, c.records);
        assert_eq!(
            back.image_path(&back.records[0]),
            dir.path().join("img_0.ppm")
        );
        std::fs::write(&path, "{\"id\":1,\"caption\":\"a\",\"image\":\"x\"}\n{\"id\":1,\"caption\":\"b\",\"image\":\"y\"}\n").unwrap();
        assert!(Corpus::load_jsonl(&path).is_err());
    }

    #[test]
    fn empty_corpus_and_bad_dir() {
        let lm = FrozenLm::init(LmConfig::default(), 1).unwrap();
        let prompts = PromptSet::default_short();
        let empty = Corpus::default();
        assert!(matches!(
            precompute(&empty, &lm, &prompts, 4, Path::new("/tmp")),
            Err(Error::Config(_))
        ));
        let file = tempfile::NamedTempFile::new().unwrap();
        let under_file = file.path().join("sub");
        assert!(matches!(
            precompute(&corpus(2), &lm, &prompts, 4, &under_file),
            Err(Error::Io { .. })
        ));
    }
}
