//! Approximate top-N retrieval under squared Euclidean distance: an
//! inverted-file index (k-means partitions, top-p probing, exact rescoring)
//! with an exact brute-force oracle, runtime augmentation, and persistence.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datastore::PositionRef;

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("duplicate entry id: game {0} move {1}")]
    DuplicateId(u64, u32),
    #[error("index file format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnError>;

/// Which stored entries a query may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionFilter {
    None,
    /// Reject entries carrying this half tag.
    ExcludeHalf(u8),
    /// Reject entries from this game.
    ExcludeGame(u64),
}

impl ExclusionFilter {
    pub fn admits(&self, r: &PositionRef) -> bool {
        match *self {
            ExclusionFilter::None => true,
            ExclusionFilter::ExcludeHalf(tag) => r.half_tag != tag,
            ExclusionFilter::ExcludeGame(id) => r.game_id != id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexConfig {
    pub partitions: usize,
    /// Partitions probed per query.
    pub probes: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            partitions: 16,
            // high-dimensional keys with little cluster structure need a
            // large probe fraction for good recall
            probes: 12,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

/// sqrt(M) rounded to the nearest power of two, at least 1.
pub fn default_partitions(m: usize) -> usize {
    if m <= 1 {
        return 1;
    }
    let target = (m as f64).sqrt();
    let lower = 1usize << target.log2().floor() as u32;
    let upper = lower * 2;
    if (target - lower as f64) <= (upper as f64 - target) {
        lower
    } else {
        upper
    }
    .min(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    d: usize,
    /// M x d, row-major.
    keys: Vec<f32>,
    entries: Vec<PositionRef>,
    /// P x d, row-major.
    centroids: Vec<f32>,
    /// Key indices per partition.
    members: Vec<Vec<u64>>,
    probes: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Exact full scan over raw keys; ties broken by insertion order. Returns
/// (key index, squared distance), ascending.
pub fn brute_force(keys: &[Vec<f32>], q: &[f32], n: usize) -> Vec<(usize, f32)> {
    let mut scored: Vec<(usize, f32)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (i, sq_dist(k, q)))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(n);
    scored
}

impl RetrievalIndex {
    /// Partition the keys with seeded fixed-iteration k-means. Empty
    /// partitions are reseeded from the largest partition's farthest point.
    pub fn build(keys: &[Vec<f32>], entries: &[PositionRef], cfg: &IndexConfig) -> Result<Self> {
        let m = keys.len();
        let p = cfg.partitions;
        if p == 0 || m < p {
            return Err(AnnError::Config(format!(
                "need M >= P >= 1, got M = {m}, P = {p}"
            )));
        }
        if entries.len() != m {
            return Err(AnnError::Config(format!(
                "{m} keys but {} entry ids",
                entries.len()
            )));
        }
        if !(1..=p).contains(&cfg.probes) {
            return Err(AnnError::Config(format!(
                "probes {} outside 1..={p}",
                cfg.probes
            )));
        }
        let d = keys[0].len();
        if d == 0 || keys.iter().any(|k| k.len() != d) {
            return Err(AnnError::Config("ragged or empty key vectors".into()));
        }
        let mut seen = HashSet::with_capacity(m);
        for e in entries {
            if !seen.insert((e.game_id, e.move_index)) {
                return Err(AnnError::DuplicateId(e.game_id, e.move_index));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut centroids: Vec<f32> = sample(&mut rng, m, p)
            .iter()
            .flat_map(|i| keys[i].iter().copied())
            .collect();
        let mut assignment = vec![0usize; m];
        for _ in 0..cfg.kmeans_iters.max(1) {
            for (i, k) in keys.iter().enumerate() {
                assignment[i] = nearest_row(&centroids, d, k).0;
            }
            let mut counts = vec![0usize; p];
            let mut sums = vec![0.0f64; p * d];
            for (i, k) in keys.iter().enumerate() {
                let c = assignment[i];
                counts[c] += 1;
                for (j, &v) in k.iter().enumerate() {
                    sums[c * d + j] += v as f64;
                }
            }
            for c in 0..p {
                if counts[c] > 0 {
                    for j in 0..d {
                        centroids[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                    }
                } else {
                    // reseed from the largest partition's farthest member
                    let big = (0..p).max_by_key(|&x| counts[x]).unwrap();
                    let far = keys
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| assignment[*i] == big)
                        .max_by(|a, b| {
                            sq_dist(a.1, &centroids[big * d..(big + 1) * d])
                                .total_cmp(&sq_dist(b.1, &centroids[big * d..(big + 1) * d]))
                        })
                        .map(|(i, _)| i)
                        .unwrap();
                    centroids[c * d..(c + 1) * d].copy_from_slice(&keys[far]);
                }
            }
        }
        for (i, k) in keys.iter().enumerate() {
            assignment[i] = nearest_row(&centroids, d, k).0;
        }
        let mut members: Vec<Vec<u64>> = vec![Vec::new(); p];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i as u64);
        }
        // final guarantee: no partition stays empty
        while let Some(empty) = members.iter().position(|l| l.is_empty()) {
            let big = (0..p).max_by_key(|&x| members[x].len()).unwrap();
            let (pos, &far) = members[big]
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    sq_dist(&keys[*a.1 as usize], &centroids[big * d..(big + 1) * d]).total_cmp(
                        &sq_dist(&keys[*b.1 as usize], &centroids[big * d..(big + 1) * d]),
                    )
                })
                .unwrap();
            members[big].remove(pos);
            members[empty].push(far);
            centroids[empty * d..(empty + 1) * d].copy_from_slice(&keys[far as usize]);
        }

        Ok(RetrievalIndex {
            d,
            keys: keys.iter().flatten().copied().collect(),
            entries: entries.to_vec(),
            centroids,
            members,
            probes: cfg.probes,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn partitions(&self) -> usize {
        self.members.len()
    }

    pub fn probes(&self) -> usize {
        self.probes
    }

    pub fn set_probes(&mut self, probes: usize) -> Result<()> {
        if !(1..=self.partitions()).contains(&probes) {
            return Err(AnnError::Config(format!(
                "probes {probes} outside 1..={}",
                self.partitions()
            )));
        }
        self.probes = probes;
        Ok(())
    }

    pub fn entries(&self) -> &[PositionRef] {
        &self.entries
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d..(i + 1) * self.d]
    }

    fn scored_hits(
        &self,
        candidates: impl Iterator<Item = usize>,
        q: &[f32],
        n: usize,
        filter: ExclusionFilter,
    ) -> Vec<(PositionRef, f32)> {
        let mut scored: Vec<(usize, f32)> = candidates
            .filter(|&i| filter.admits(&self.entries[i]))
            .map(|i| (i, sq_dist(self.key(i), q)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        scored
            .into_iter()
            .map(|(i, dist)| (self.entries[i], dist))
            .collect()
    }

    /// Approximate top-N: probe the `probes` partitions with nearest
    /// centroids, score exactly, filter before selection.
    pub fn query(&self, q: &[f32], n: usize, filter: ExclusionFilter) -> Vec<(PositionRef, f32)> {
        let p = self.partitions();
        let mut ranked: Vec<(usize, f32)> = (0..p)
            .map(|c| (c, sq_dist(&self.centroids[c * self.d..(c + 1) * self.d], q)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let candidates = ranked
            .iter()
            .take(self.probes)
            .flat_map(|&(c, _)| self.members[c].iter().map(|&i| i as usize))
            .collect::<Vec<_>>();
        self.scored_hits(candidates.into_iter(), q, n, filter)
    }

    /// Exact top-N over all stored keys (the oracle path).
    pub fn exact_query(
        &self,
        q: &[f32],
        n: usize,
        filter: ExclusionFilter,
    ) -> Vec<(PositionRef, f32)> {
        self.scored_hits(0..self.len(), q, n, filter)
    }

    /// Add keys without refitting: each new key joins its nearest existing
    /// centroid and is queryable immediately.
    pub fn augment(&mut self, new_keys: &[Vec<f32>], new_entries: &[PositionRef]) -> Result<()> {
        if new_keys.len() != new_entries.len() {
            return Err(AnnError::Config(format!(
                "{} keys but {} entry ids",
                new_keys.len(),
                new_entries.len()
            )));
        }
        let mut seen: HashSet<(u64, u32)> = self
            .entries
            .iter()
            .map(|e| (e.game_id, e.move_index))
            .collect();
        for e in new_entries {
            if !seen.insert((e.game_id, e.move_index)) {
                return Err(AnnError::DuplicateId(e.game_id, e.move_index));
            }
        }
        for (k, &e) in new_keys.iter().zip(new_entries) {
            if k.len() != self.d {
                return Err(AnnError::Config(format!(
                    "key length {} != index dim {}",
                    k.len(),
                    self.d
                )));
            }
            let (c, _) = nearest_row(&self.centroids, self.d, k);
            let idx = self.entries.len() as u64;
            self.keys.extend_from_slice(k);
            self.entries.push(e);
            self.members[c].push(idx);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RRIX1");
        for v in [
            self.d as u64,
            self.len() as u64,
            self.partitions() as u64,
            self.probes as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in &self.members {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for &i in list {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        for &v in &self.keys {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&e.game_id.to_le_bytes());
            out.extend_from_slice(&e.move_index.to_le_bytes());
            out.push(e.half_tag);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        let magic = cur.take(5)?;
        if magic != b"RRIX1" {
            return Err(AnnError::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let d = cur.u64()? as usize;
        let m = cur.u64()? as usize;
        let p = cur.u64()? as usize;
        let probes = cur.u64()? as usize;
        if d == 0 || p == 0 || probes == 0 || probes > p {
            return Err(AnnError::Format(format!(
                "inconsistent header d={d} M={m} P={p} p={probes}"
            )));
        }
        let centroids = cur.f32s(p * d)?;
        let mut members = Vec::with_capacity(p);
        let mut covered = 0usize;
        for _ in 0..p {
            let count = cur.u64()? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let i = cur.u64()?;
                if i as usize >= m {
                    return Err(AnnError::Format(format!("member index {i} >= M {m}")));
                }
                list.push(i);
            }
            covered += count;
            members.push(list);
        }
        if covered != m {
            return Err(AnnError::Format(format!(
                "partitions cover {covered} keys, expected {m}"
            )));
        }
        let keys = cur.f32s(m * d)?;
        let mut entries = Vec::with_capacity(m);
        for _ in 0..m {
            let game_id = cur.u64()?;
            let move_index = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            let half_tag = cur.take(1)?[0];
            entries.push(PositionRef {
                game_id,
                move_index,
                half_tag,
            });
        }
        if !cur.done() {
            return Err(AnnError::Format("trailing bytes".into()));
        }
        Ok(RetrievalIndex {
            d,
            keys,
            entries,
            centroids,
            members,
            probes,
        })
    }
}

fn nearest_row(rows: &[f32], d: usize, q: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (c, row) in rows.chunks_exact(d).enumerate() {
        let dist = sq_dist(row, q);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AnnError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
