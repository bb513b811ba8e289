//! Exact top-k retrieval over a labeled embedding corpus, plus its on-disk
//! format.
//!
//! Entries are stored L2-normalized, so a query only needs to be normalized
//! once per call and each score is a plain dot product. Results are ordered by
//! descending score with ties broken by ascending entry id.
//!
//! # Corpus file layout (version 1, all integers little-endian)
//!
//! ```text
//! header:  magic b"RGIX" | version u32 | dim u32 | count u64
//! record:  id u64 | label u8 | dim × f32
//!          | ref_len u32 | image_ref bytes (UTF-8)
//!          | has_subset u8 | [subset_len u32 | subset bytes (UTF-8)]
//! ```

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{self, check_dims, EmbeddingVector, NORMALIZED_TOLERANCE};
use crate::error::{Error, Result};
use crate::label::Label;

pub const MAGIC: [u8; 4] = *b"RGIX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: u64,
    pub embedding: EmbeddingVector,
    pub label: Label,
    pub image_ref: String,
    pub subset: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: Option<usize>,
    entries: Vec<CorpusEntry>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty index with its dimension fixed up front.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&CorpusEntry> {
        self.entries.get(usize::try_from(id).ok()?)
    }

    /// Adds an entry and returns its id. The first insert fixes the index
    /// dimension when it was not set explicitly.
    pub fn insert(
        &mut self,
        embedding: &EmbeddingVector,
        label: Label,
        image_ref: impl Into<String>,
        subset: Option<String>,
    ) -> Result<u64> {
        if let Some(dim) = self.dim {
            check_dims(dim, embedding.dim())?;
        }
        let normalized = embedding::l2_normalize(embedding)?;
        self.dim = Some(embedding.dim());
        let id = self.entries.len() as u64;
        self.entries.push(CorpusEntry {
            id,
            embedding: normalized,
            label,
            image_ref: image_ref.into(),
            subset,
        });
        Ok(id)
    }

    /// Scores every entry against `query`. Index `i` holds the score of id `i`.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        let dim = match self.dim {
            Some(d) if !self.entries.is_empty() => d,
            _ => return Err(Error::EmptyCorpus),
        };
        check_dims(dim, query.dim())?;
        let q = embedding::normalized_f64(query.values())?;
        Ok(self
            .entries
            .iter()
            .map(|e| {
                let s: f64 = e
                    .embedding
                    .values()
                    .iter()
                    .zip(&q)
                    .map(|(&x, &y)| f64::from(x) * y)
                    .sum();
                s.clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Exact top-k by cosine similarity.
    pub fn retrieve_topk(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut hits: Vec<Hit> = self
            .scores(query)?
            .into_iter()
            .enumerate()
            .map(|(i, score)| Hit {
                id: i as u64,
                score,
            })
            .collect();
        let take = k.min(hits.len());
        if take < hits.len() {
            hits.select_nth_unstable_by(take - 1, rank_order);
            hits.truncate(take);
        }
        hits.sort_unstable_by(rank_order);
        Ok(RetrievalResult {
            hits,
            k_requested: k,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self.dim.unwrap_or(0);
        let dim32 = u32::try_from(dim).map_err(|_| Error::Config("dimension exceeds u32".into()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&dim32.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&[e.label.as_u8()])?;
            for v in e.embedding.values() {
                w.write_all(&v.to_le_bytes())?;
            }
            write_str(w, &e.image_ref)?;
            match &e.subset {
                Some(s) => {
                    w.write_all(&[1])?;
                    write_str(w, s)?;
                }
                None => w.write_all(&[0])?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut rd = OffsetReader { inner: r, offset: 0 };

        let magic: [u8; 4] = rd.array("magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = u32::from_le_bytes(rd.array("version")?);
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(rd.array("dim")?) as usize;
        let count = u64::from_le_bytes(rd.array("count")?);
        if dim == 0 && count > 0 {
            return Err(Error::format(8, "zero dimension with non-zero count"));
        }

        let mut index = VectorIndex {
            dim: (dim > 0).then_some(dim),
            entries: Vec::new(),
        };
        for expected_id in 0..count {
            let at = rd.offset;
            let id = u64::from_le_bytes(rd.array("entry id")?);
            if id != expected_id {
                return Err(Error::format(at, format!("expected id {expected_id}, found {id}")));
            }
            let at = rd.offset;
            let [label_byte] = rd.array("label")?;
            let label = Label::from_u8(label_byte)
                .ok_or_else(|| Error::format(at, format!("invalid label byte {label_byte}")))?;
            let at = rd.offset;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_le_bytes(rd.array("embedding")?));
            }
            let mut embedding = EmbeddingVector::new(values)
                .map_err(|e| Error::format(at, format!("invalid embedding: {e}")))?;
            if (embedding.norm() - 1.0).abs() > NORMALIZED_TOLERANCE {
                return Err(Error::format(at, "stored embedding is not unit length"));
            }
            let image_ref = rd.string("image_ref")?;
            let at = rd.offset;
            let subset = match rd.array::<1>("subset flag")? {
                [0] => None,
                [1] => Some(rd.string("subset")?),
                [b] => return Err(Error::format(at, format!("invalid subset flag {b}"))),
            };
            // Already unit length; re-normalizing would change bits.
            embedding.set_normalized();
            index.entries.push(CorpusEntry {
                id,
                embedding,
                label,
                image_ref,
                subset,
            });
        }
        let mut probe = [0u8; 1];
        match rd.inner.read(&mut probe) {
            Ok(0) => Ok(index),
            Ok(_) => Err(Error::format(rd.offset, "trailing bytes after last record")),
            Err(e) => Err(e.into()),
        }
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Config("string exceeds u32 length".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct OffsetReader<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> OffsetReader<'_, R> {
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + got as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u32::from_le_bytes(self.array(what)?) as usize;
        let at = self.offset;
        // Read in bounded chunks so a corrupt length cannot force a huge allocation.
        let mut bytes = Vec::new();
        let mut remaining = len;
        let mut chunk = [0u8; 4096];
        while remaining > 0 {
            let n = remaining.min(chunk.len());
            self.fill(&mut chunk[..n], what)?;
            bytes.extend_from_slice(&chunk[..n]);
            remaining -= n;
        }
        String::from_utf8(bytes).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}
