//! Binary shard files and their JSON-lines manifest.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header:  "DFNS" | version u32 = 1 | record_count u32 | d_img u32 | d_txt u32
//! record:  id u64 | image f32 x d_img | text f32 x d_txt
//!          | concept u32 (0xFFFFFFFF = unknown) | aligned u8 (0, 1, 0xFF = unknown)
//! ```
//!
//! A manifest (`manifest.jsonl`) lists one shard per line as
//! `{"path": ..., "record_count": ..., "sha256": ...}` with paths relative to
//! the manifest's directory. Shard order in the manifest is the pool order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pool::{Pool, RecordRef, UNKNOWN_CONCEPT};
use crate::error::{Error, Result};

pub const SHARD_MAGIC: [u8; 4] = *b"DFNS";
pub const SHARD_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const ALIGNED_UNKNOWN: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolHeader {
    pub version: u32,
    pub record_count: u32,
    pub d_img: u32,
    pub d_txt: u32,
}

impl PoolHeader {
    fn record_len(&self) -> usize {
        record_len(self.d_img as usize, self.d_txt as usize)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&SHARD_MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.record_count.to_le_bytes());
        out[12..16].copy_from_slice(&self.d_img.to_le_bytes());
        out[16..20].copy_from_slice(&self.d_txt.to_le_bytes());
        out
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_owned(),
                detail: format!("header needs {HEADER_LEN} bytes, found {}", bytes.len()),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != SHARD_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let header = PoolHeader {
            version: word(4),
            record_count: word(8),
            d_img: word(12),
            d_txt: word(16),
        };
        if header.version != SHARD_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_owned(),
                found: header.version,
                expected: SHARD_VERSION,
            });
        }
        Ok(header)
    }
}

fn record_len(d_img: usize, d_txt: usize) -> usize {
    8 + 4 * (d_img + d_txt) + 4 + 1
}

/// Serializes a whole pool as one shard.
pub fn encode_shard(pool: &Pool) -> Result<Vec<u8>> {
    let count = u32::try_from(pool.len())
        .map_err(|_| Error::config(format!("{} records exceed one shard", pool.len())))?;
    let header = PoolHeader {
        version: SHARD_VERSION,
        record_count: count,
        d_img: pool.d_img() as u32,
        d_txt: pool.d_txt() as u32,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + pool.len() * header.record_len());
    out.extend_from_slice(&header.encode());
    for r in pool.iter() {
        out.extend_from_slice(&r.id.to_le_bytes());
        for v in r.image.iter().chain(r.text) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.concept.unwrap_or(UNKNOWN_CONCEPT).to_le_bytes());
        out.push(match r.aligned {
            Some(false) => 0,
            Some(true) => 1,
            None => ALIGNED_UNKNOWN,
        });
    }
    Ok(out)
}

/// Parses shard bytes; `path` only labels errors.
pub fn decode_shard(path: &Path, bytes: &[u8]) -> Result<Pool> {
    let header = PoolHeader::decode(path, bytes)?;
    let (d_img, d_txt) = (header.d_img as usize, header.d_txt as usize);
    let body = &bytes[HEADER_LEN..];
    let expected = header.record_count as usize * header.record_len();
    if body.len() < expected {
        return Err(Error::Truncated {
            path: path.to_owned(),
            detail: format!(
                "{} records need {expected} body bytes, found {}",
                header.record_count,
                body.len()
            ),
        });
    }
    if body.len() > expected {
        return Err(Error::CorruptShard {
            path: path.to_owned(),
            detail: format!("{} trailing bytes after last record", body.len() - expected),
        });
    }

    let mut pool = Pool::with_capacity(d_img, d_txt, header.record_count as usize);
    let mut image = vec![0f32; d_img];
    let mut text = vec![0f32; d_txt];
    for chunk in body.chunks_exact(header.record_len()) {
        let id = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
        let floats = &chunk[8..8 + 4 * (d_img + d_txt)];
        for (dst, src) in image.iter_mut().chain(text.iter_mut()).zip(floats.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
        let tail = &chunk[8 + 4 * (d_img + d_txt)..];
        let concept = match u32::from_le_bytes(tail[..4].try_into().expect("4 bytes")) {
            UNKNOWN_CONCEPT => None,
            k => Some(k),
        };
        let aligned = match tail[4] {
            0 => Some(false),
            1 => Some(true),
            ALIGNED_UNKNOWN => None,
            other => {
                return Err(Error::CorruptShard {
                    path: path.to_owned(),
                    detail: format!("record {id}: invalid aligned byte {other:#04x}"),
                })
            }
        };
        pool.push(RecordRef {
            id,
            image: &image,
            text: &text,
            concept,
            aligned,
        })
        .map_err(|e| Error::CorruptShard {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
    }
    Ok(pool)
}

pub fn write_shard(path: &Path, pool: &Pool) -> Result<String> {
    let bytes = encode_shard(pool)?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_shard(path: &Path) -> Result<Pool> {
    let bytes = read_file(path)?;
    decode_shard(path, &bytes)
}

/// Reads only the header of a shard.
pub fn read_header(path: &Path) -> Result<PoolHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut f)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    PoolHeader::decode(path, &buf)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads shards in order and concatenates them; all must share dimensions.
pub fn read_shards<P: AsRef<Path>>(paths: &[P]) -> Result<Pool> {
    let parts: Vec<Pool> = paths.iter().map(|p| read_shard(p.as_ref())).collect::<Result<_>>()?;
    let Some(first) = parts.first() else {
        return Err(Error::Empty("no shard paths given".into()));
    };
    let (d_img, d_txt) = (first.d_img(), first.d_txt());
    for (p, part) in paths.iter().zip(&parts) {
        check_dims(p.as_ref(), part, d_img, d_txt)?;
    }
    Pool::concat(d_img, d_txt, &parts)
}

fn check_dims(path: &Path, part: &Pool, d_img: usize, d_txt: usize) -> Result<()> {
    if part.d_img() != d_img || part.d_txt() != d_txt {
        return Err(Error::ShardDimensionMismatch {
            path: path.to_owned(),
            expected_img: d_img,
            expected_txt: d_txt,
            found_img: part.d_img(),
            found_txt: part.d_txt(),
        });
    }
    Ok(())
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub record_count: u64,
    pub sha256: String,
}

/// An ordered set of shard files described by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub shards: Vec<ShardEntry>,
    pub d_img: usize,
    pub d_txt: usize,
}

impl ShardSet {
    pub fn total_records(&self) -> u64 {
        self.shards.iter().map(|s| s.record_count).sum()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.shards[i].path)
    }

    /// Opens `dir/manifest.jsonl` (or a manifest file path directly).
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dir, manifest) = if path.is_dir() {
            (path.to_owned(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_owned).unwrap_or_default(),
                path.to_owned(),
            )
        };
        let f = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut shards = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            shards.push(serde_json::from_str::<ShardEntry>(&line)?);
        }
        let Some(first) = shards.first() else {
            return Err(Error::Empty(format!("{} lists no shards", manifest.display())));
        };
        let header = read_header(&dir.join(&first.path))?;
        let set = ShardSet {
            dir,
            shards,
            d_img: header.d_img as usize,
            d_txt: header.d_txt as usize,
        };
        for i in 1..set.shards.len() {
            let p = set.shard_path(i);
            let h = read_header(&p)?;
            if h.d_img as usize != set.d_img || h.d_txt as usize != set.d_txt {
                return Err(Error::ShardDimensionMismatch {
                    path: p,
                    expected_img: set.d_img,
                    expected_txt: set.d_txt,
                    found_img: h.d_img as usize,
                    found_txt: h.d_txt as usize,
                });
            }
        }
        Ok(set)
    }

    /// Reads shard `i`, verifying its checksum and record count.
    pub fn read(&self, i: usize) -> Result<Pool> {
        let path = self.shard_path(i);
        let bytes = read_file(&path)?;
        let digest = sha256_hex(&bytes);
        if digest != self.shards[i].sha256 {
            return Err(Error::ChecksumMismatch {
                path,
                expected: self.shards[i].sha256.clone(),
                found: digest,
            });
        }
        let pool = decode_shard(&path, &bytes)?;
        check_dims(&path, &pool, self.d_img, self.d_txt)?;
        if pool.len() as u64 != self.shards[i].record_count {
            return Err(Error::CorruptShard {
                path,
                detail: format!(
                    "manifest lists {} records, shard holds {}",
                    self.shards[i].record_count,
                    pool.len()
                ),
            });
        }
        Ok(pool)
    }

    /// Loads every shard in manifest order.
    pub fn load(&self) -> Result<Pool> {
        let parts: Vec<Pool> = (0..self.shards.len())
            .into_par_iter()
            .map(|i| self.read(i))
            .collect::<Result<_>>()?;
        Pool::concat(self.d_img, self.d_txt, &parts)
    }

    /// Writes the manifest for `shards` into `dir`.
    pub fn from_entries(dir: &Path, shards: Vec<ShardEntry>, d_img: usize, d_txt: usize) -> Result<Self> {
        let set = ShardSet {
            dir: dir.to_owned(),
            shards,
            d_img,
            d_txt,
        };
        let path = set.manifest_path();
        let mut out = String::new();
        for s in &set.shards {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(set)
    }
}

pub fn shard_file_name(i: usize) -> String {
    format!("shard-{i:05}.dfns")
}

/// Splits `pool` into shards of at most `records_per_shard` records and
/// writes them plus a manifest into `dir`.
pub fn write_shards(pool: &Pool, dir: &Path, records_per_shard: usize) -> Result<ShardSet> {
    if records_per_shard == 0 {
        return Err(Error::config("records_per_shard must be >= 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_shards = pool.len().div_ceil(records_per_shard).max(1);
    let entries = (0..n_shards)
        .into_par_iter()
        .map(|i| {
            let lo = (i * records_per_shard).min(pool.len());
            let hi = ((i + 1) * records_per_shard).min(pool.len());
            let part = pool.slice(lo..hi);
            let name = shard_file_name(i);
            let sha256 = write_shard(&dir.join(&name), &part)?;
            Ok(ShardEntry {
                path: name,
                record_count: part.len() as u64,
                sha256,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ShardSet::from_entries(dir, entries, pool.d_img(), pool.d_txt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pool::Record;

    fn sample_pool(n: usize) -> Pool {
        let recs: Vec<Record> = (0..n as u64)
            .map(|id| Record {
                id: 100 + id,
                image: vec![id as f32 * 0.5, -1.25, 3.0],
                text: vec![0.125, id as f32],
                concept: if id % 4 == 0 { None } else { Some(id as u32) },
                aligned: match id % 3 {
                    0 => Some(true),
                    1 => Some(false),
                    _ => None,
                },
            })
            .collect();
        Pool::from_records(3, 2, &recs).unwrap()
    }

    #[test]
    fn record_layout_is_bit_exact() {
        let rec = Record {
            id: 0x0102_0304_0506_0708,
            image: vec![1.0],
            text: vec![-2.0],
            concept: None,
            aligned: Some(true),
        };
        let bytes = encode_shard(&Pool::from_records(1, 1, &[rec]).unwrap()).unwrap();
        let expected: Vec<u8> = [
            &b"DFNS"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &[8, 7, 6, 5, 4, 3, 2, 1],
            &1.0f32.to_le_bytes(),
            &(-2.0f32).to_le_bytes(),
            &[0xFF, 0xFF, 0xFF, 0xFF],
            &[1],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let bytes = encode_shard(&sample_pool(7)).unwrap();
        let pool = decode_shard(Path::new("mem"), &bytes).unwrap();
        assert_eq!(pool, sample_pool(7));
        assert_eq!(encode_shard(&pool).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_map_to_distinct_errors() {
        let good = encode_shard(&sample_pool(3)).unwrap();
        let p = Path::new("s.dfns");

        let mut magic = good.clone();
        magic[0] = b'X';
        let err = decode_shard(p, &magic).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
        assert!(err.to_string().contains("s.dfns"));

        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(decode_shard(p, &version), Err(Error::VersionMismatch { found: 2, .. })));

        assert!(matches!(decode_shard(p, &good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_shard(p, &good[..10]), Err(Error::Truncated { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_shard(p, &trailing), Err(Error::CorruptShard { .. })));

        let mut aligned = good;
        let last = aligned.len() - 1;
        aligned[last] = 7;
        assert!(matches!(decode_shard(p, &aligned), Err(Error::CorruptShard { .. })));
    }

    #[test]
    fn ten_records_three_per_shard() {
        let dir = tempfile::tempdir().unwrap();
        let set = write_shards(&sample_pool(10), dir.path(), 3).unwrap();
        let sizes: Vec<u64> = set.shards.iter().map(|s| s.record_count).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let reopened = ShardSet::open(dir.path()).unwrap();
        assert_eq!(reopened, set);
        assert_eq!(reopened.load().unwrap(), sample_pool(10));
        let paths: Vec<_> = (0..4).map(|i| set.shard_path(i)).collect();
        assert_eq!(read_shards(&paths).unwrap(), sample_pool(10));
    }

    #[test]
    fn checksum_and_dimension_mismatches_name_the_shard() {
        let dir = tempfile::tempdir().unwrap();
        let set = write_shards(&sample_pool(6), dir.path(), 3).unwrap();
        let path = set.shard_path(1);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 1;
        fs::write(&path, bytes).unwrap();
        match set.read(1) {
            Err(Error::ChecksumMismatch { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }

        let other = tempfile::tempdir().unwrap();
        let odd = Pool::from_records(
            1,
            2,
            &[Record {
                id: 1,
                image: vec![0.0],
                text: vec![0.0, 0.0],
                concept: None,
                aligned: None,
            }],
        )
        .unwrap();
        let odd_path = other.path().join("odd.dfns");
        write_shard(&odd_path, &odd).unwrap();
        let err = read_shards(&[set.shard_path(0), odd_path.clone()]).unwrap_err();
        assert!(matches!(err, Error::ShardDimensionMismatch { ref path, .. } if *path == odd_path));
    }
}
