//! Exact cosine nearest-neighbour search over every entity name.
//!
//! Rows are stored as f32 unit vectors; queries are f64 unit vectors and
//! scores are accumulated in f64 in row order, so the blocked parallel scan
//! and the brute-force oracle compute bit-identical scores.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::KnowledgeBase;
use crate::error::{Error, Result};
use crate::model::{encode_texts, EncodeOptions, Encoder};

const MAGIC: &[u8; 5] = b"NIDX1";
/// Rows scored per parallel task.
const SCAN_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct NameIndex {
    dim: usize,
    vectors: Vec<f32>,
    names: Vec<String>,
    owners: Vec<u32>,
    entities: Vec<String>,
    fingerprint: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkHit {
    pub entity: String,
    pub name: String,
    pub row: usize,
    pub score: f64,
}

/// Scales `v` to unit length; fails on a zero or non-finite vector.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Invalid("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl NameIndex {
    /// Builds an index from raw row vectors, normalizing each one.
    pub fn from_rows(
        rows: &[Vec<f64>],
        names: Vec<String>,
        owners: Vec<String>,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("index needs at least one row".into()));
        }
        if rows.len() != names.len() || rows.len() != owners.len() {
            return Err(Error::Invalid("rows, names and owners differ in length".into()));
        }
        let dim = rows[0].len();
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Invalid("index rows differ in width".into()));
            }
            vectors.extend(normalize(r)?.into_iter().map(|x| x as f32));
        }
        let mut entity_ids: HashMap<String, u32> = HashMap::new();
        let mut entities = Vec::new();
        let owners = owners
            .into_iter()
            .map(|o| {
                *entity_ids.entry(o.clone()).or_insert_with(|| {
                    entities.push(o);
                    (entities.len() - 1) as u32
                })
            })
            .collect();
        Ok(Self {
            dim,
            vectors,
            names,
            owners,
            entities,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn owner(&self, i: usize) -> &str {
        &self.entities[self.owners[i] as usize]
    }

    /// Number of distinct owning entities.
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Cosine of a unit query against row `i`.
    pub fn score(&self, query: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        for (q, &r) in query.iter().zip(self.row(i)) {
            acc += q * r as f64;
        }
        acc
    }

    fn hit(&self, row: usize, score: f64) -> LinkHit {
        LinkHit {
            entity: self.owner(row).to_string(),
            name: self.names[row].clone(),
            row,
            score,
        }
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Invalid(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Top-`k` entities for a unit query, each scored by its best name.
    /// Ties go to the lower row index.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<LinkHit>> {
        self.check_query(query, k)?;
        let n_ent = self.entities.len();
        // best (score, row) per entity, computed per block then merged in block order
        let partial: Vec<Vec<(usize, f64)>> = (0..self.len())
            .step_by(SCAN_BLOCK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + SCAN_BLOCK).min(self.len());
                let mut best: HashMap<u32, (usize, f64)> = HashMap::new();
                for row in start..end {
                    let s = self.score(query, row);
                    best.entry(self.owners[row])
                        .and_modify(|b| {
                            if s > b.1 {
                                *b = (row, s);
                            }
                        })
                        .or_insert((row, s));
                }
                best.into_values().collect()
            })
            .collect();
        let mut best: Vec<Option<(usize, f64)>> = vec![None; n_ent];
        for block in partial {
            for (row, s) in block {
                let slot = &mut best[self.owners[row] as usize];
                match slot {
                    Some((r, b)) if s < *b || (s == *b && row > *r) => {}
                    _ => *slot = Some((row, s)),
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = best.into_iter().flatten().collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let k = k.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_by(order);
        Ok(ranked.into_iter().map(|(row, s)| self.hit(row, s)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.vectors.len() * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            for s in [self.name(i), self.owner(i)] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out.extend_from_slice(&self.fingerprint);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("truncated index file".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a name index (bad magic)".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let m = u32_at(take(4)?);
        let dim = u32_at(take(4)?);
        let n = m.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(truncated)?;
        let vectors: Vec<f32> = take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut names = Vec::with_capacity(m.min(1 << 20));
        let mut owners = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            let mut pair = [String::new(), String::new()];
            for slot in &mut pair {
                let len = u32_at(take(4)?);
                *slot = String::from_utf8(take(len)?.to_vec())
                    .map_err(|_| Error::Format("index string is not UTF-8".into()))?;
            }
            let [name, owner] = pair;
            names.push(name);
            owners.push(owner);
        }
        let fingerprint: [u8; 32] = take(32)?.try_into().unwrap();
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        if m == 0 {
            return Err(Error::Format("index has no rows".into()));
        }
        let mut entity_ids: HashMap<String, u32> = HashMap::new();
        let mut entities = Vec::new();
        let owners = owners
            .into_iter()
            .map(|o| {
                *entity_ids.entry(o.clone()).or_insert_with(|| {
                    entities.push(o);
                    (entities.len() - 1) as u32
                })
            })
            .collect();
        Ok(Self {
            dim,
            vectors,
            names,
            owners,
            entities,
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Encodes every KB name (primary first, then alternatives) into an index.
pub fn build_index<E: Encoder + ?Sized>(
    encoder: &E,
    kb: &KnowledgeBase,
    fingerprint: [u8; 32],
    opts: &EncodeOptions,
) -> Result<NameIndex> {
    if kb.is_empty() {
        return Err(Error::Data("cannot index an empty knowledge base".into()));
    }
    let (names, owners): (Vec<String>, Vec<String>) =
        kb.names().map(|(n, id)| (n.to_string(), id.to_string())).unzip();
    let rows = encode_texts(encoder, &names, opts)?;
    NameIndex::from_rows(&rows, names, owners, fingerprint)
}

/// Unit query vectors for a batch of mentions.
pub fn encode_queries<E: Encoder + ?Sized, S: AsRef<str> + Sync>(
    encoder: &E,
    mentions: &[S],
    opts: &EncodeOptions,
) -> Result<Vec<Vec<f64>>> {
    encode_texts(encoder, mentions, opts)?
        .iter()
        .map(|v| normalize(v))
        .collect()
}

pub fn link<E: Encoder + ?Sized>(mention: &str, encoder: &E, index: &NameIndex, k: usize) -> Result<Vec<LinkHit>> {
    let q = encode_queries(encoder, &[mention], &EncodeOptions::default())?;
    index.search(&q[0], k)
}

/// Ranked hits for many mentions, in input order.
pub fn link_batch<E: Encoder + ?Sized, S: AsRef<str> + Sync>(
    mentions: &[S],
    encoder: &E,
    index: &NameIndex,
    k: usize,
    opts: &EncodeOptions,
) -> Result<Vec<Vec<LinkHit>>> {
    let queries = encode_queries(encoder, mentions, opts)?;
    queries.par_iter().map(|q| index.search(q, k)).collect()
}

/// Reference ranking: score every row, sort all rows, keep each entity's
/// first appearance.
pub fn brute_force_scan(query: &[f64], index: &NameIndex, k: usize) -> Vec<LinkHit> {
    let mut scored: Vec<(usize, f64)> = (0..index.len()).map(|i| (i, index.score(query, i))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (row, s) in scored {
        if out.len() == k {
            break;
        }
        if seen.insert(index.owner(row)) {
            out.push(index.hit(row, s));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(rng: &mut ChaCha8Rng, m: usize, d: usize, entities: usize) -> NameIndex {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let names = (0..m).map(|i| format!("n{i}")).collect();
        let owners = (0..m).map(|_| format!("E{}", rng.random_range(0..entities))).collect();
        NameIndex::from_rows(&rows, names, owners, [7; 32]).unwrap()
    }

    #[test]
    fn unit_rows_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = random_index(&mut rng, 50, 12, 10);
        for i in 0..idx.len() {
            let n: f64 = idx.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let bytes = idx.to_bytes();
        assert_eq!(NameIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(NameIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'M';
        assert!(NameIndex::from_bytes(&bad).is_err());
    }

    #[test]
    fn search_matches_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows: Vec<Vec<f64>> = (0..300).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for i in 0..20 {
            rows[150 + i] = rows[i].clone();
        }
        let names = (0..300).map(|i| format!("n{i}")).collect();
        let owners = (0..300).map(|i| format!("E{}", i % 97)).collect();
        let idx = NameIndex::from_rows(&rows, names, owners, [0; 32]).unwrap();
        for q in 0..40 {
            let query = normalize(&rows[q % 25]).unwrap();
            for k in [1, 5, 200] {
                assert_eq!(idx.search(&query, k).unwrap(), brute_force_scan(&query, &idx, k));
            }
        }
        assert_eq!(idx.search(&normalize(&rows[0]).unwrap(), 1000).unwrap().len(), 97);
    }

    #[test]
    fn singleton_and_bad_queries() {
        let idx = NameIndex::from_rows(&[vec![3.0, 4.0]], vec!["a".into()], vec!["E".into()], [0; 32]).unwrap();
        let hits = idx.search(&[0.6, 0.8], 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entity, "E");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(idx.search(&[1.0, 0.0], 0).is_err());
        assert!(idx.search(&[1.0], 1).is_err());
        assert!(NameIndex::from_rows(&[vec![0.0, 0.0]], vec!["a".into()], vec!["E".into()], [0; 32]).is_err());
    }
}
