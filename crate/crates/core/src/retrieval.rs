//! Dense cosine search over VLAD descriptors and maximum-similarity cliques.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, Reader};
use crate::keyframe::{DescriptorMatrix, Keyframe, SequenceDataset};
use crate::par::{self, Exec};
use crate::vlad::VladDescriptor;

pub const INDEX_MAGIC: &[u8; 4] = b"LGIX";
pub const DEFAULT_K_PCT: f64 = 1.0;
pub const DEFAULT_EXCLUSION_WINDOW: u32 = 50;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("keyframe {sequence}/{id} has no VLAD descriptor")]
    MissingVlad { sequence: String, id: u32 },
    #[error("mixed descriptor dimensionalities: {expected} and {found}")]
    MixedDimensions { expected: usize, found: usize },
    #[error("unknown query keyframe {0:?}")]
    UnknownQuery(KeyframeKey),
    #[error("k_pct must be in (0, 100], got {0}")]
    InvalidPercentage(f64),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("truncated or oversized index file {0}")]
    Truncated(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identifies a keyframe across sequences: the ordinal of its sequence in the
/// index (or corpus) plus its id. Ordering is by sequence, then id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyframeKey {
    pub sequence: u32,
    pub id: u32,
}

impl KeyframeKey {
    pub fn new(sequence: u32, id: u32) -> Self {
        KeyframeKey { sequence, id }
    }
}

/// A set of sequences addressed by [`KeyframeKey`]; sequence ordinals are
/// positions in `datasets`.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub datasets: Vec<SequenceDataset>,
}

impl Corpus {
    pub fn new(datasets: Vec<SequenceDataset>) -> Self {
        Corpus { datasets }
    }

    pub fn get(&self, key: KeyframeKey) -> Option<&Keyframe> {
        self.datasets.get(key.sequence as usize)?.keyframe(key.id)
    }

    pub fn keys(&self) -> impl Iterator<Item = KeyframeKey> + '_ {
        self.datasets.iter().enumerate().flat_map(|(s, d)| {
            d.keyframes.iter().map(move |k| KeyframeKey::new(s as u32, k.id))
        })
    }

    pub fn sequence_keys(&self, sequence: u32) -> Vec<KeyframeKey> {
        self.datasets
            .get(sequence as usize)
            .map(|d| d.keyframes.iter().map(|k| KeyframeKey::new(sequence, k.id)).collect())
            .unwrap_or_default()
    }
}

/// Row-aligned matrix of global descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    sequences: Vec<String>,
    keys: Vec<KeyframeKey>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub key: KeyframeKey,
    pub similarity: f64,
}

impl DescriptorIndex {
    /// Assembles an index from explicit rows. Rows are stored as `f32`.
    pub fn from_rows(
        sequences: Vec<String>,
        rows: Vec<(KeyframeKey, &VladDescriptor)>,
    ) -> Result<Self, RetrievalError> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        let mut keys = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (key, v) in rows {
            if v.len() != dim {
                return Err(RetrievalError::MixedDimensions { expected: dim, found: v.len() });
            }
            keys.push(key);
            data.extend(v.values().iter().map(|&x| x as f32));
        }
        Ok(Self::assemble(dim, sequences, keys, data))
    }

    fn assemble(dim: usize, sequences: Vec<String>, keys: Vec<KeyframeKey>, data: Vec<f32>) -> Self {
        let norms = data
            .chunks_exact(dim.max(1))
            .take(keys.len())
            .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        DescriptorIndex { dim, sequences, keys, data, norms }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[KeyframeKey] {
        &self.keys
    }

    pub fn sequences(&self) -> &[String] {
        &self.sequences
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Replaces sequence names (the binary format stores ordinals only).
    pub fn with_sequence_names(mut self, names: Vec<String>) -> Self {
        self.sequences = names;
        self
    }

    /// Rows of one sequence only, keeping keys and names.
    pub fn restrict_to_sequence(&self, sequence: u32) -> DescriptorIndex {
        let mut keys = Vec::new();
        let mut data = Vec::new();
        for (i, &k) in self.keys.iter().enumerate() {
            if k.sequence == sequence {
                keys.push(k);
                data.extend_from_slice(self.row(i));
            }
        }
        Self::assemble(self.dim, self.sequences.clone(), keys, data)
    }

    fn position(&self, key: KeyframeKey) -> Option<usize> {
        // rows are usually sorted by key; fall back to a scan otherwise
        match self.keys.binary_search(&key) {
            Ok(i) => Some(i),
            Err(_) => self.keys.iter().position(|&k| k == key),
        }
    }

    fn similarity_rows(&self, a: usize, b: usize) -> f64 {
        let (na, nb) = (self.norms[a], self.norms[b]);
        if na == 0.0 || nb == 0.0 {
            return -1.0;
        }
        let dot: f64 = self.row(a).iter().zip(self.row(b)).map(|(&x, &y)| x as f64 * y as f64).sum();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        binio::put_u32(&mut w, self.keys.len() as u32)?;
        binio::put_u32(&mut w, self.dim as u32)?;
        for k in &self.keys {
            binio::put_u32(&mut w, k.sequence)?;
            binio::put_u32(&mut w, k.id)?;
        }
        binio::put_f32s(&mut w, &self.data)?;
        w.flush()?;
        Ok(())
    }

    /// Loads an index; sequences are named by their ordinal until renamed with
    /// [`with_sequence_names`](Self::with_sequence_names).
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if !r.magic(INDEX_MAGIC) {
            return Err(RetrievalError::BadMagic(path.to_path_buf()));
        }
        let truncated = || RetrievalError::Truncated(path.to_path_buf());
        let rows = r.u32().ok_or_else(truncated)? as usize;
        let dim = r.u32().ok_or_else(truncated)? as usize;
        if r.remaining() != rows * 8 + rows * dim * 4 {
            return Err(truncated());
        }
        let mut keys = Vec::with_capacity(rows);
        for _ in 0..rows {
            let s = r.u32().ok_or_else(truncated)?;
            let id = r.u32().ok_or_else(truncated)?;
            keys.push(KeyframeKey::new(s, id));
        }
        let data = r.f32_vec(rows * dim).ok_or_else(truncated)?;
        let n_seq = keys.iter().map(|k| k.sequence as usize + 1).max().unwrap_or(0);
        let sequences = (0..n_seq).map(|s| s.to_string()).collect();
        Ok(Self::assemble(dim, sequences, keys, data))
    }
}

/// Indexes every keyframe of `datasets`; the sequence ordinal of a row is the
/// position of its dataset in the slice.
pub fn build_index(datasets: &[SequenceDataset]) -> Result<DescriptorIndex, RetrievalError> {
    let mut rows = Vec::new();
    for (s, d) in datasets.iter().enumerate() {
        for kf in &d.keyframes {
            let v = kf
                .vlad
                .as_ref()
                .ok_or_else(|| RetrievalError::MissingVlad { sequence: d.name.clone(), id: kf.id })?;
            rows.push((KeyframeKey::new(s as u32, kf.id), v));
        }
    }
    DescriptorIndex::from_rows(datasets.iter().map(|d| d.name.clone()).collect(), rows)
}

/// Number of neighbors retrieved for a percentage of the index size.
pub fn neighbors_for_percentage(k_pct: f64, index_size: usize) -> usize {
    ((k_pct / 100.0 * index_size as f64).floor() as usize).max(1)
}

/// Ranks the top `k_pct` percent of the index by cosine similarity to the
/// query, skipping the query itself and same-sequence keyframes whose id is
/// within `exclusion_window` of it. Ties go to the lower key.
pub fn query_topk(
    index: &DescriptorIndex,
    query: KeyframeKey,
    k_pct: f64,
    exclusion_window: u32,
) -> Result<Vec<Neighbor>, RetrievalError> {
    if !(k_pct > 0.0 && k_pct <= 100.0) {
        return Err(RetrievalError::InvalidPercentage(k_pct));
    }
    let q = index.position(query).ok_or(RetrievalError::UnknownQuery(query))?;
    let k = neighbors_for_percentage(k_pct, index.len());
    let mut scored: Vec<Neighbor> = index
        .keys
        .iter()
        .enumerate()
        .filter(|&(_, key)| {
            !(key.sequence == query.sequence && key.id.abs_diff(query.id) <= exclusion_window)
        })
        .map(|(i, &key)| Neighbor { key, similarity: index.similarity_rows(q, i) })
        .collect();
    let by_rank = |a: &Neighbor, b: &Neighbor| b.similarity.total_cmp(&a.similarity).then(a.key.cmp(&b.key));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(scored)
}

/// Fully connected graph over a query keyframe and its retrieved neighbors.
///
/// `nodes[0]` is the query. Edges are index pairs `(a, b)` with `a < b` in
/// lexicographic order, so the `n - 1` query edges come first.
#[derive(Clone, Debug, PartialEq)]
pub struct CliqueGraph {
    pub query: KeyframeKey,
    pub nodes: Vec<KeyframeKey>,
    /// VLAD similarity of each node to the query (1 for the query itself).
    pub similarities: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub query_edge: Vec<bool>,
}

impl CliqueGraph {
    pub fn from_neighbors(query: KeyframeKey, neighbors: &[Neighbor]) -> Self {
        let mut nodes = vec![query];
        let mut similarities = vec![1.0];
        for n in neighbors {
            if !nodes.contains(&n.key) {
                nodes.push(n.key);
                similarities.push(n.similarity);
            }
        }
        let count = nodes.len();
        let mut edges = Vec::with_capacity(count * (count - 1) / 2);
        let mut query_edge = Vec::with_capacity(edges.capacity());
        for a in 0..count {
            for b in a + 1..count {
                edges.push((a, b));
                query_edge.push(a == 0);
            }
        }
        CliqueGraph { query, nodes, similarities, edges, query_edge }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_keys(&self, e: usize) -> (KeyframeKey, KeyframeKey) {
        let (a, b) = self.edges[e];
        (self.nodes[a], self.nodes[b])
    }

    /// Descriptor matrices of the nodes, in node order.
    pub fn node_descriptors<'a>(&self, corpus: &'a Corpus) -> Option<Vec<&'a DescriptorMatrix>> {
        self.nodes.iter().map(|&k| corpus.get(k).map(|kf| &kf.descriptors)).collect()
    }

    /// Reorders the non-query nodes by `perm` (a permutation of `1..n`),
    /// rebuilding edges and flags.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut order = vec![0];
        order.extend_from_slice(perm);
        let neighbors: Vec<Neighbor> = order[1..]
            .iter()
            .map(|&i| Neighbor { key: self.nodes[i], similarity: self.similarities[i] })
            .collect();
        CliqueGraph::from_neighbors(self.query, &neighbors)
    }
}

pub fn build_clique(
    index: &DescriptorIndex,
    query: KeyframeKey,
    k_pct: f64,
    exclusion_window: u32,
) -> Result<CliqueGraph, RetrievalError> {
    let neighbors = query_topk(index, query, k_pct, exclusion_window)?;
    Ok(CliqueGraph::from_neighbors(query, &neighbors))
}

/// Builds cliques for many queries, in query order.
pub fn build_cliques(
    index: &DescriptorIndex,
    queries: &[KeyframeKey],
    k_pct: f64,
    exclusion_window: u32,
    exec: Exec,
) -> Result<Vec<CliqueGraph>, RetrievalError> {
    par::map(exec, queries, |&q| build_clique(index, q, k_pct, exclusion_window))
        .into_iter()
        .collect()
}
