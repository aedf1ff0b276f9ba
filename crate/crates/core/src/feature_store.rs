//! Load, validate, and batch precomputed multi-feature tables, plus the
//! seeded synthetic benchmark generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.tsv        modality<TAB>feature-name<TAB>dim<TAB>vectors-path<TAB>ids-path
//! *.f32               raw little-endian f32, count x dim, row order = ids file
//! *.ids               one id per line, LF-terminated
//! train_pairs.tsv     text-id<TAB>video-id
//! val_qrels.tsv       query-id<TAB>video-id   (presence = relevant)
//! test_qrels.tsv      query-id<TAB>video-id
//! ```
//!
//! All randomness is ChaCha8 seeded from explicit integers, so a given seed
//! produces bit-identical output on every platform.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// splitmix64 step; used to derive independent stream seeds from one root seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(Modality::Text),
            "video" => Some(Modality::Video),
            _ => None,
        }
    }
}

/// Id-indexed table of fixed-dimension raw feature vectors for one named
/// feature of one modality. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub modality: Modality,
    pub name: String,
    pub dim: usize,
    ids: Vec<String>,
    id_index: HashMap<String, usize>,
    vectors: Vec<f32>,
}

impl FeatureTable {
    pub fn new(
        modality: Modality,
        name: impl Into<String>,
        dim: usize,
        ids: Vec<String>,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::Data(format!("feature '{name}': dim must be >= 1")));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "feature '{name}': payload length mismatch ({} values for {} ids x dim {})",
                vectors.len(),
                ids.len(),
                dim
            )));
        }
        let mut id_index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!(
                    "feature '{name}': duplicate id '{id}' at row {i}"
                )));
            }
        }
        for (row, chunk) in vectors.chunks(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "feature '{name}': non-finite value in row {row} (id '{}')",
                    ids[row]
                )));
            }
        }
        Ok(FeatureTable {
            modality,
            name,
            dim,
            ids,
            id_index,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn vector_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|row| self.vector(row))
    }

    pub fn raw(&self) -> &[f32] {
        &self.vectors
    }

    /// Rows gathered by table index into an f64 matrix.
    pub fn gather(&self, rows: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), self.dim);
        for (r, &idx) in rows.iter().enumerate() {
            for (dst, &src) in m.row_mut(r).iter_mut().zip(self.vector(idx)) {
                *dst = src as f64;
            }
        }
        m
    }
}

/// One line of the dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub modality: Modality,
    pub name: String,
    pub dim: usize,
    pub vectors_path: String,
    pub ids_path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                path,
                format!("line {}: expected 5 tab-separated fields", lineno + 1),
            ));
        }
        let modality = Modality::parse(fields[0]).ok_or_else(|| {
            Error::format(
                path,
                format!("line {}: unknown modality '{}'", lineno + 1, fields[0]),
            )
        })?;
        let dim: usize = fields[2].parse().map_err(|_| {
            Error::format(path, format!("line {}: bad dim '{}'", lineno + 1, fields[2]))
        })?;
        entries.push(ManifestEntry {
            modality,
            name: fields[1].to_string(),
            dim,
            vectors_path: fields[3].to_string(),
            ids_path: fields[4].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::format(path, "manifest has no entries"));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.modality.as_str(),
            e.name,
            e.dim,
            e.vectors_path,
            e.ids_path
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load one table per its manifest entry; `base` is the manifest's directory.
pub fn load_feature_table(entry: &ManifestEntry, base: &Path) -> Result<FeatureTable> {
    let ids_path = base.join(&entry.ids_path);
    let ids_text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
    let ids: Vec<String> = ids_text.lines().map(|s| s.to_string()).collect();

    let vec_path = base.join(&entry.vectors_path);
    let file = fs::File::open(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&vec_path, e))?;

    let expected = ids.len() * entry.dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &vec_path,
            format!(
                "payload length mismatch: {} bytes, expected {} ({} ids x dim {} x 4)",
                bytes.len(),
                expected,
                ids.len(),
                entry.dim
            ),
        ));
    }
    let vectors: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    FeatureTable::new(entry.modality, entry.name.clone(), entry.dim, ids, vectors)
}

/// Write a table's vector and id files under `base`.
pub fn write_feature_table(
    table: &FeatureTable,
    base: &Path,
    vectors_path: &str,
    ids_path: &str,
) -> Result<()> {
    let vec_path = base.join(vectors_path);
    let file = fs::File::create(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
    let mut w = BufWriter::new(file);
    for v in table.raw() {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(&vec_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&vec_path, e))?;

    let ids_file = base.join(ids_path);
    let mut out = String::new();
    for id in table.ids() {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(&ids_file, out).map_err(|e| Error::io(&ids_file, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Pairs plus (for val/test) relevance judgments.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub split: Split,
    /// (text-id, video-id)
    pub pairs: Vec<(String, String)>,
    /// query-id -> relevant video-ids
    pub relevance: BTreeMap<String, BTreeSet<String>>,
}

impl PairDataset {
    pub fn empty(split: Split) -> Self {
        PairDataset {
            split,
            pairs: Vec::new(),
            relevance: BTreeMap::new(),
        }
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        match (it.next(), it.next()) {
            (Some(a), Some(b)) => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected two tab-separated ids", lineno + 1),
                ))
            }
        }
    }
    Ok(pairs)
}

pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (a, b) in pairs {
        out.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_qrels(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut rel: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (q, v) in read_pairs(path)? {
        rel.entry(q).or_default().insert(v);
    }
    Ok(rel)
}

pub fn write_qrels(path: &Path, rel: &BTreeMap<String, BTreeSet<String>>) -> Result<()> {
    let mut out = String::new();
    for (q, vids) in rel {
        for v in vids {
            out.push_str(&format!("{q}\t{v}\n"));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A fully loaded dataset: one table per feature per modality plus splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub text_tables: Vec<FeatureTable>,
    pub video_tables: Vec<FeatureTable>,
    pub train: PairDataset,
    pub val: PairDataset,
    pub test: PairDataset,
}

impl Dataset {
    pub fn k1(&self) -> usize {
        self.text_tables.len()
    }

    pub fn k2(&self) -> usize {
        self.video_tables.len()
    }

    pub fn text_dims(&self) -> Vec<usize> {
        self.text_tables.iter().map(|t| t.dim).collect()
    }

    pub fn video_dims(&self) -> Vec<usize> {
        self.video_tables.iter().map(|t| t.dim).collect()
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.tsv");
        let entries = read_manifest(&manifest_path)?;
        let mut text_tables = Vec::new();
        let mut video_tables = Vec::new();
        for entry in &entries {
            let table = load_feature_table(entry, dir)?;
            match table.modality {
                Modality::Text => text_tables.push(table),
                Modality::Video => video_tables.push(table),
            }
        }
        if text_tables.is_empty() || video_tables.is_empty() {
            return Err(Error::Data(
                "dataset needs at least one table per modality".into(),
            ));
        }

        let train = PairDataset {
            split: Split::Train,
            pairs: read_pairs(&dir.join("train_pairs.tsv"))?,
            relevance: BTreeMap::new(),
        };
        let val = PairDataset {
            split: Split::Val,
            pairs: Vec::new(),
            relevance: read_qrels(&dir.join("val_qrels.tsv"))?,
        };
        let test = PairDataset {
            split: Split::Test,
            pairs: Vec::new(),
            relevance: read_qrels(&dir.join("test_qrels.tsv"))?,
        };

        let ds = Dataset {
            text_tables,
            video_tables,
            train,
            val,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for table in self.text_tables.iter().chain(&self.video_tables) {
            let stem = format!("{}_{}", table.modality.as_str(), table.name);
            let vectors_path = format!("{stem}.f32");
            let ids_path = format!("{stem}.ids");
            write_feature_table(table, dir, &vectors_path, &ids_path)?;
            entries.push(ManifestEntry {
                modality: table.modality,
                name: table.name.clone(),
                dim: table.dim,
                vectors_path,
                ids_path,
            });
        }
        write_manifest(&dir.join("manifest.tsv"), &entries)?;
        write_pairs(&dir.join("train_pairs.tsv"), &self.train.pairs)?;
        write_qrels(&dir.join("val_qrels.tsv"), &self.val.relevance)?;
        write_qrels(&dir.join("test_qrels.tsv"), &self.test.relevance)?;
        Ok(())
    }

    /// Every id referenced by a split must exist in all tables of its modality.
    fn validate(&self) -> Result<()> {
        let check_text = |id: &str| -> Result<()> {
            for t in &self.text_tables {
                if t.index_of(id).is_none() {
                    return Err(Error::Data(format!(
                        "text id '{id}' missing from feature '{}'",
                        t.name
                    )));
                }
            }
            Ok(())
        };
        let check_video = |id: &str| -> Result<()> {
            for t in &self.video_tables {
                if t.index_of(id).is_none() {
                    return Err(Error::Data(format!(
                        "video id '{id}' missing from feature '{}'",
                        t.name
                    )));
                }
            }
            Ok(())
        };
        for (t, v) in &self.train.pairs {
            check_text(t)?;
            check_video(v)?;
        }
        for split in [&self.val, &self.test] {
            for (q, vids) in &split.relevance {
                check_text(q)?;
                for v in vids {
                    check_video(v)?;
                }
            }
        }
        // all video tables must list the same collection
        let first_ids: HashSet<&String> = self.video_tables[0].ids().iter().collect();
        for t in &self.video_tables[1..] {
            if t.len() != first_ids.len() || t.ids().iter().any(|id| !first_ids.contains(id)) {
                return Err(Error::Data(format!(
                    "video feature '{}' does not cover the same id set as '{}'",
                    t.name, self.video_tables[0].name
                )));
            }
        }
        Ok(())
    }
}

/// A training mini-batch: row i of every matrix belongs to pair i.
#[derive(Debug, Clone)]
pub struct Batch {
    pub text_ids: Vec<String>,
    pub video_ids: Vec<String>,
    /// k1 matrices, each b x d_i
    pub text_features: Vec<Matrix>,
    /// k2 matrices, each b x d_j
    pub video_features: Vec<Matrix>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.text_ids.len()
    }

    /// Distinct-video / distinct-text invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.video_ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("batch repeats video id '{id}'")));
            }
        }
        let mut seen = HashSet::new();
        for id in &self.text_ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("batch repeats text id '{id}'")));
            }
        }
        Ok(())
    }
}

/// Batches for one epoch, as index lists into `train.pairs`.
///
/// One caption per video per epoch (round-robin over that video's captions),
/// a seeded shuffle, then greedy packing that keeps text ids distinct within
/// a batch. A trailing partial batch is dropped.
pub fn epoch_batches(ds: &Dataset, b: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if b < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    // group pair indices by video, first-seen order
    let mut by_video: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut video_slot: HashMap<&str, usize> = HashMap::new();
    for (i, (_, vid)) in ds.train.pairs.iter().enumerate() {
        match video_slot.get(vid.as_str()) {
            Some(&slot) => by_video[slot].1.push(i),
            None => {
                video_slot.insert(vid, by_video.len());
                by_video.push((by_video.len(), vec![i]));
            }
        }
    }
    if by_video.len() < b {
        return Err(Error::Data(format!(
            "training split has {} distinct videos, need at least {}",
            by_video.len(),
            b
        )));
    }

    let mut chosen: Vec<usize> = by_video
        .iter()
        .map(|(_, pair_idxs)| pair_idxs[(epoch as usize) % pair_idxs.len()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x45504f43 ^ epoch));
    chosen.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut pending = chosen;
    while pending.len() >= b {
        let mut batch = Vec::with_capacity(b);
        let mut texts: HashSet<&str> = HashSet::new();
        let mut rest = Vec::new();
        for idx in pending {
            if batch.len() < b && texts.insert(ds.train.pairs[idx].0.as_str()) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        if batch.len() < b {
            if batches.is_empty() {
                return Err(Error::Data(
                    "cannot assemble a full batch with distinct text ids".into(),
                ));
            }
            break;
        }
        batches.push(batch);
        pending = rest;
    }
    Ok(batches)
}

/// Gather feature rows for the given train-pair indices.
pub fn materialize_batch(ds: &Dataset, pair_indices: &[usize]) -> Result<Batch> {
    let mut text_ids = Vec::with_capacity(pair_indices.len());
    let mut video_ids = Vec::with_capacity(pair_indices.len());
    for &i in pair_indices {
        let (t, v) = &ds.train.pairs[i];
        text_ids.push(t.clone());
        video_ids.push(v.clone());
    }
    let text_features = gather_tables(&ds.text_tables, &text_ids)?;
    let video_features = gather_tables(&ds.video_tables, &video_ids)?;
    let batch = Batch {
        text_ids,
        video_ids,
        text_features,
        video_features,
    };
    batch.check_invariants()?;
    Ok(batch)
}

fn gather_tables(tables: &[FeatureTable], ids: &[String]) -> Result<Vec<Matrix>> {
    tables
        .iter()
        .map(|t| {
            let rows: Result<Vec<usize>> = ids
                .iter()
                .map(|id| {
                    t.index_of(id).ok_or_else(|| {
                        Error::Data(format!("id '{id}' missing from feature '{}'", t.name))
                    })
                })
                .collect();
            Ok(t.gather(&rows?))
        })
        .collect()
}

/// One uniformly sampled batch (the first batch of a fresh epoch shuffle).
pub fn sample_batch(ds: &Dataset, b: usize, seed: u64) -> Result<Batch> {
    let batches = epoch_batches(ds, b, seed, 0)?;
    materialize_batch(ds, &batches[0])
}

/// Cluster-spec for the synthetic desk-scale benchmark.
///
/// Each query's relevant videos are split across `clusters_per_query`
/// visually distinct clusters, and each video feature only carries topic
/// information for the clusters it is informative for, so no single space
/// can separate all modes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub queries: usize,
    pub clusters_per_query: usize,
    pub relevant_per_cluster: usize,
    pub distractors: usize,
    pub val_queries: usize,
    pub train_topics: usize,
    /// captions written per train video (round-robin exercises multi-caption batching)
    pub captions_per_video: usize,
    pub text_dims: Vec<usize>,
    pub video_dims: Vec<usize>,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub noise: f64,
    /// topic-signal fraction a feature keeps on clusters it is NOT
    /// informative for (1 = all features equivalent, 0 = fully mode-blind)
    pub off_mode_signal: f64,
    /// fraction of distractors whose topic is a perturbed copy of a held-out
    /// query topic (near-misses that sit close to the decision boundary)
    pub hard_distractor_fraction: f64,
    /// video-feature noise heterogeneity: video feature noise ramps linearly
    /// from noise*(1-spread) to noise*(1+spread); text features stay at
    /// `noise` (fast- and slow-converging video spaces coexist)
    pub noise_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            queries: 20,
            clusters_per_query: 3,
            relevant_per_cluster: 10,
            distractors: 1000,
            val_queries: 8,
            train_topics: 256,
            captions_per_video: 2,
            text_dims: vec![24, 32, 48],
            video_dims: vec![24, 32, 48, 24, 32, 48],
            latent_dim: 16,
            style_dim: 8,
            noise: 0.1,
            off_mode_signal: 0.5,
            hard_distractor_fraction: 0.5,
            noise_spread: 0.0,
        }
    }
}

impl SyntheticConfig {
    /// noise level of feature `idx` among `count` features of one modality
    fn feature_noise(&self, idx: usize, count: usize) -> f64 {
        if count <= 1 || self.noise_spread == 0.0 {
            return self.noise;
        }
        let ramp = idx as f64 / (count - 1) as f64; // 0..1
        self.noise * (1.0 + self.noise_spread * (2.0 * ramp - 1.0))
    }

    fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.val_queries == 0 || self.train_topics == 0 {
            return Err(Error::Config("query/topic counts must be >= 1".into()));
        }
        if self.clusters_per_query == 0 {
            return Err(Error::Config("clusters per query must be >= 1".into()));
        }
        if self.relevant_per_cluster == 0 {
            return Err(Error::Config(
                "more clusters than relevant items: need >= 1 relevant per cluster".into(),
            ));
        }
        if self.text_dims.is_empty() || self.video_dims.is_empty() {
            return Err(Error::Config("need at least one feature per modality".into()));
        }
        if self.latent_dim == 0 || self.style_dim == 0 {
            return Err(Error::Config("latent/style dims must be >= 1".into()));
        }
        if self.captions_per_video == 0 {
            return Err(Error::Config("captions per video must be >= 1".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.off_mode_signal) {
            return Err(Error::Config("off-mode signal must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_distractor_fraction) {
            return Err(Error::Config("hard-distractor fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_spread) {
            return Err(Error::Config("noise spread must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A video feature j is informative for cluster c iff `j % clusters == c`:
/// with more features than clusters every cluster is covered by several
/// features, but no feature covers every cluster (when clusters > 1).
fn informative(feature: usize, cluster: usize, clusters: usize) -> bool {
    feature % clusters == cluster
}

struct Projections {
    /// per text feature: latent_dim x d_i
    text: Vec<Matrix>,
    /// per video feature: (latent_dim + style_dim) x d_j
    video: Vec<Matrix>,
}

fn random_projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(-1.0..1.0) * scale;
    }
    m
}

fn project(proj: &Matrix, latent: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    debug_assert_eq!(proj.rows(), latent.len());
    let cols = proj.cols();
    let mut out = vec![0.0f64; cols];
    for (k, &z) in latent.iter().enumerate() {
        if z == 0.0 {
            continue;
        }
        for (o, &p) in out.iter_mut().zip(proj.row(k)) {
            *o += z * p;
        }
    }
    out.iter()
        .map(|&v| (v + noise * (rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0))) as f32)
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Generate the synthetic benchmark. Same seed, same bytes.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let clusters = cfg.clusters_per_query;
    let latent = cfg.latent_dim;
    let style = cfg.style_dim;

    let mut proj_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let projections = Projections {
        text: cfg
            .text_dims
            .iter()
            .map(|&d| random_projection(&mut proj_rng, latent, d))
            .collect(),
        video: cfg
            .video_dims
            .iter()
            .map(|&d| random_projection(&mut proj_rng, latent + style, d))
            .collect(),
    };

    // global cluster styles, shared by every topic
    let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let styles: Vec<Vec<f64>> = (0..clusters).map(|_| random_unit(&mut style_rng, style)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));

    let k1 = cfg.text_dims.len();
    let k2 = cfg.video_dims.len();
    let mut text_ids: Vec<String> = Vec::new();
    let mut text_vecs: Vec<Vec<f32>> = vec![Vec::new(); k1];
    let mut video_ids: Vec<String> = Vec::new();
    let mut video_vecs: Vec<Vec<f32>> = vec![Vec::new(); k2];

    let push_text = |id: String,
                         topic: &[f64],
                         rng: &mut ChaCha8Rng,
                         text_ids: &mut Vec<String>,
                         text_vecs: &mut Vec<Vec<f32>>| {
        text_ids.push(id);
        for (i, proj) in projections.text.iter().enumerate() {
            text_vecs[i].extend(project(proj, topic, cfg.noise, rng));
        }
    };

    let push_video = |id: String,
                          topic: &[f64],
                          cluster: usize,
                          rng: &mut ChaCha8Rng,
                          video_ids: &mut Vec<String>,
                          video_vecs: &mut Vec<Vec<f32>>| {
        video_ids.push(id);
        for (j, proj) in projections.video.iter().enumerate() {
            let gain = if informative(j, cluster, clusters) {
                1.0
            } else {
                cfg.off_mode_signal
            };
            let mut latent_vec = Vec::with_capacity(latent + style);
            latent_vec.extend(topic.iter().map(|&t| gain * t));
            latent_vec.extend_from_slice(&styles[cluster]);
            let noise = cfg.feature_noise(j, k2);
            video_vecs[j].extend(project(proj, &latent_vec, noise, rng));
        }
    };

    // train topics: one video per cluster per topic, captions round-robin
    let mut train_pairs: Vec<(String, String)> = Vec::new();
    for m in 0..cfg.train_topics {
        let topic = random_unit(&mut rng, latent);
        for c in 0..clusters {
            let vid = format!("vtrain{m:05}c{c}");
            push_video(vid.clone(), &topic, c, &mut rng, &mut video_ids, &mut video_vecs);
            for cap in 0..cfg.captions_per_video {
                let tid = format!("ttrain{m:05}c{c}x{cap}");
                push_text(tid.clone(), &topic, &mut rng, &mut text_ids, &mut text_vecs);
                train_pairs.push((tid, vid.clone()));
            }
        }
    }

    // evaluation queries: relevant videos spread over all clusters
    let make_queries = |prefix: &str,
                            count: usize,
                            rng: &mut ChaCha8Rng,
                            text_ids: &mut Vec<String>,
                            text_vecs: &mut Vec<Vec<f32>>,
                            video_ids: &mut Vec<String>,
                            video_vecs: &mut Vec<Vec<f32>>|
     -> (BTreeMap<String, BTreeSet<String>>, Vec<Vec<f64>>) {
        let mut relevance = BTreeMap::new();
        let mut topics = Vec::with_capacity(count);
        for q in 0..count {
            let topic = random_unit(rng, latent);
            let qid = format!("{prefix}q{q:04}");
            push_text(qid.clone(), &topic, rng, text_ids, text_vecs);
            let mut rel = BTreeSet::new();
            for c in 0..clusters {
                for r in 0..cfg.relevant_per_cluster {
                    let vid = format!("{prefix}q{q:04}c{c}r{r:03}");
                    push_video(vid.clone(), &topic, c, rng, video_ids, video_vecs);
                    rel.insert(vid);
                }
            }
            relevance.insert(qid, rel);
            topics.push(topic);
        }
        (relevance, topics)
    };

    let (val_relevance, val_topics) = make_queries(
        "val",
        cfg.val_queries,
        &mut rng,
        &mut text_ids,
        &mut text_vecs,
        &mut video_ids,
        &mut video_vecs,
    );
    let (test_relevance, test_topics) = make_queries(
        "test",
        cfg.queries,
        &mut rng,
        &mut text_ids,
        &mut text_vecs,
        &mut video_ids,
        &mut video_vecs,
    );

    // distractors: fresh topics, one cluster each; a configured fraction are
    // near-misses anchored on held-out query topics
    let query_topics: Vec<Vec<f64>> = val_topics.into_iter().chain(test_topics).collect();
    let n_hard = (cfg.distractors as f64 * cfg.hard_distractor_fraction).round() as usize;
    for n in 0..cfg.distractors {
        let fresh = random_unit(&mut rng, latent);
        let topic = if n < n_hard && !query_topics.is_empty() {
            let anchor = &query_topics[rng.gen_range(0..query_topics.len())];
            let mix = rng.gen_range(0.55..0.85);
            let mut t: Vec<f64> = anchor
                .iter()
                .zip(&fresh)
                .map(|(&a, &f)| mix * a + (1.0 - mix) * f)
                .collect();
            let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            for x in t.iter_mut() {
                *x /= norm;
            }
            t
        } else {
            fresh
        };
        let c = n % clusters;
        let vid = format!("vdist{n:06}");
        push_video(vid, &topic, c, &mut rng, &mut video_ids, &mut video_vecs);
    }

    let text_tables: Result<Vec<FeatureTable>> = (0..k1)
        .map(|i| {
            FeatureTable::new(
                Modality::Text,
                format!("txt{i}"),
                cfg.text_dims[i],
                text_ids.clone(),
                std::mem::take(&mut text_vecs[i]),
            )
        })
        .collect();
    let video_tables: Result<Vec<FeatureTable>> = (0..k2)
        .map(|j| {
            FeatureTable::new(
                Modality::Video,
                format!("vid{j}"),
                cfg.video_dims[j],
                video_ids.clone(),
                std::mem::take(&mut video_vecs[j]),
            )
        })
        .collect();

    Ok(Dataset {
        text_tables: text_tables?,
        video_tables: video_tables?,
        train: PairDataset {
            split: Split::Train,
            pairs: train_pairs,
            relevance: BTreeMap::new(),
        },
        val: PairDataset {
            split: Split::Val,
            pairs: Vec::new(),
            relevance: val_relevance,
        },
        test: PairDataset {
            split: Split::Test,
            pairs: Vec::new(),
            relevance: test_relevance,
        },
    })
}
