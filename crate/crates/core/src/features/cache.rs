//! On-disk embedding cache: binary shards of little-endian f32 vectors plus
//! an `index.csv` with columns `image_id,file,offset,dim,checksum`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::{Error, Result};

/// Everything besides the image id that determines an embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub weights_checksum: String,
    pub preprocess_hash: String,
}

impl CacheKey {
    fn dir_name(&self) -> String {
        let w: String = self.weights_checksum.chars().take(16).collect();
        format!("{w}-{}", self.preprocess_hash)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRow {
    image_id: String,
    file: String,
    offset: u64,
    dim: usize,
    checksum: String,
}

#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    index: BTreeMap<String, IndexRow>,
    shard: String,
}

fn vector_checksum(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl EmbeddingCache {
    /// Open (creating if needed) the cache for `key` under `root`.
    pub fn open(root: &Path, key: &CacheKey) -> Result<Self> {
        let dir = root.join(key.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let key_path = dir.join("key.json");
        if key_path.exists() {
            let text = fs::read_to_string(&key_path).map_err(|e| Error::io(&key_path, e))?;
            let stored: CacheKey = serde_json::from_str(&text)?;
            if &stored != key {
                return Err(Error::invalid(format!("cache {} belongs to a different key", dir.display())));
            }
        } else {
            fs::write(&key_path, serde_json::to_string_pretty(key)?).map_err(|e| Error::io(&key_path, e))?;
        }

        let mut index = BTreeMap::new();
        let index_path = dir.join("index.csv");
        if index_path.exists() {
            let mut rdr = csv::Reader::from_path(&index_path)?;
            for row in rdr.deserialize() {
                let row: IndexRow = row?;
                index.insert(row.image_id.clone(), row);
            }
        }
        let shards = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("shard-"))
            .count();
        Ok(Self {
            dir,
            index,
            shard: format!("shard-{shards:05}.bin"),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    /// Read one vector, verifying its checksum.
    pub fn get(&self, image_id: &str) -> Result<Option<Vec<f32>>> {
        let Some(row) = self.index.get(image_id) else {
            return Ok(None);
        };
        let path = self.dir.join(&row.file);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start(row.offset)).map_err(|e| Error::io(&path, e))?;
        let mut bytes = vec![0u8; row.dim * 4];
        f.read_exact(&mut bytes).map_err(|e| Error::io(&path, e))?;
        if vector_checksum(&bytes) != row.checksum {
            return Err(Error::invalid(format!("cached embedding for {image_id} is corrupt")));
        }
        Ok(Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }

    /// Append vectors to the current shard and persist the index.
    pub fn insert(&mut self, vectors: &[EmbeddingVector]) -> Result<()> {
        if vectors.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(&self.shard);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut offset = f.metadata().map_err(|e| Error::io(&path, e))?.len();
        for v in vectors {
            let bytes: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
            self.index.insert(
                v.source_image_id.clone(),
                IndexRow {
                    image_id: v.source_image_id.clone(),
                    file: self.shard.clone(),
                    offset,
                    dim: v.values.len(),
                    checksum: vector_checksum(&bytes),
                },
            );
            offset += bytes.len() as u64;
        }
        f.flush().map_err(|e| Error::io(&path, e))?;
        self.write_index()
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join("index.csv");
        let tmp = self.dir.join("index.csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            for row in self.index.values() {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CacheKey {
        CacheKey {
            weights_checksum: "ab".repeat(32),
            preprocess_hash: "0011".into(),
        }
    }

    #[test]
    fn round_trip_across_reopen() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = EmbeddingCache::open(tmp.path(), &key()).unwrap();
        c.insert(&[
            EmbeddingVector { source_image_id: "a".into(), values: vec![1.0, -2.5] },
            EmbeddingVector { source_image_id: "b".into(), values: vec![0.0, 3.0] },
        ])
        .unwrap();
        let mut c = EmbeddingCache::open(tmp.path(), &key()).unwrap();
        assert_eq!(c.len(), 2);
        c.insert(&[EmbeddingVector { source_image_id: "c".into(), values: vec![7.0, 8.0] }]).unwrap();
        assert_eq!(c.get("a").unwrap().unwrap(), vec![1.0, -2.5]);
        assert_eq!(c.get("c").unwrap().unwrap(), vec![7.0, 8.0]);
        assert!(c.get("zzz").unwrap().is_none());
        let index = fs::read_to_string(c.dir().join("index.csv")).unwrap();
        assert!(index.starts_with("image_id,file,offset,dim,checksum"));
    }

    #[test]
    fn corruption_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = EmbeddingCache::open(tmp.path(), &key()).unwrap();
        c.insert(&[EmbeddingVector { source_image_id: "a".into(), values: vec![1.0] }]).unwrap();
        let shard = c.dir().join("shard-00000.bin");
        fs::write(&shard, 2.0f32.to_le_bytes()).unwrap();
        assert!(c.get("a").is_err());
    }
}
