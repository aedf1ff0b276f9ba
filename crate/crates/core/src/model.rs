//! Multi-space cross-modal model: shared per-feature transforms, per-space
//! attention fusion of the opposite modality, and per-space cosine
//! similarity matrices averaged into one cross-modal score.
//!
//! Two space topologies exist. `FeatureSpecific` anchors each space on one
//! raw feature: space i (i < k1) compares text embedding i against an
//! attention-fused video embedding, space k1+j compares a fused text
//! embedding against video embedding j. `ParallelHeads` instead fuses both
//! modalities in every space with that space's own pair of attention heads,
//! keeping the same space count for controlled comparisons.
//!
//! The backward pass is hand-written and checked against central finite
//! differences (see `trainer::gradcheck`).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_store::{derive_seed, Batch, FeatureTable};
use crate::numerics::{dot, softmax, softmax_backward, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// One space per feature; the space's other end fuses the opposite modality.
    FeatureSpecific,
    /// Every space fuses both modalities with its own head pair.
    ParallelHeads,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::FeatureSpecific => "lpd",
            Topology::ParallelHeads => "parallel-heads",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lpd" | "feature-specific" => Some(Topology::FeatureSpecific),
            "parallel-heads" => Some(Topology::ParallelHeads),
            _ => None,
        }
    }
}

/// tanh(x W + b) layer for one raw feature; shared by every space that
/// consumes the feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransform {
    /// d_i x d
    pub w: Matrix,
    /// d
    pub b: Vec<f64>,
}

/// Linear_{d x 1} attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub u: Vec<f64>,
    pub c: f64,
}

/// All trainable weights.
///
/// Head layout: `FeatureSpecific` stores one head per space (`heads[s]`
/// fuses the modality opposite to space s's anchor feature).
/// `ParallelHeads` stores two per space: `heads[2s]` fuses text,
/// `heads[2s+1]` fuses video.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub topology: Topology,
    pub d: usize,
    pub text_transforms: Vec<FeatureTransform>,
    pub video_transforms: Vec<FeatureTransform>,
    pub heads: Vec<AttentionHead>,
}

impl ModelParams {
    pub fn k1(&self) -> usize {
        self.text_transforms.len()
    }

    pub fn k2(&self) -> usize {
        self.video_transforms.len()
    }

    pub fn spaces(&self) -> usize {
        self.k1() + self.k2()
    }

    pub fn text_dims(&self) -> Vec<usize> {
        self.text_transforms.iter().map(|t| t.w.rows()).collect()
    }

    pub fn video_dims(&self) -> Vec<usize> {
        self.video_transforms.iter().map(|t| t.w.rows()).collect()
    }

    fn head_count_for(topology: Topology, spaces: usize) -> usize {
        match topology {
            Topology::FeatureSpecific => spaces,
            Topology::ParallelHeads => 2 * spaces,
        }
    }

    /// Seeded init: weights symmetric uniform scaled by 1/sqrt(fan-in),
    /// biases zero.
    pub fn init(
        topology: Topology,
        text_dims: &[usize],
        video_dims: &[usize],
        d: usize,
        seed: u64,
    ) -> Result<ModelParams> {
        if text_dims.is_empty() || video_dims.is_empty() {
            return Err(Error::Config("need at least one feature per modality".into()));
        }
        if d == 0 {
            return Err(Error::Config("common dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x494e4954));
        let mut make_transform = |d_in: usize| {
            let scale = 1.0 / (d_in as f64).sqrt();
            let mut w = Matrix::zeros(d_in, d);
            for v in w.data_mut() {
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
            FeatureTransform { w, b: vec![0.0; d] }
        };
        let text_transforms: Vec<_> = text_dims.iter().map(|&di| make_transform(di)).collect();
        let video_transforms: Vec<_> = video_dims.iter().map(|&dj| make_transform(dj)).collect();

        let spaces = text_dims.len() + video_dims.len();
        let head_scale = 1.0 / (d as f64).sqrt();
        let heads: Vec<_> = (0..Self::head_count_for(topology, spaces))
            .map(|_| {
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * head_scale).collect();
                AttentionHead { u, c: 0.0 }
            })
            .collect();

        Ok(ModelParams {
            topology,
            d,
            text_transforms,
            video_transforms,
            heads,
        })
    }

    /// Same shapes, all values zero. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            topology: self.topology,
            d: self.d,
            text_transforms: self
                .text_transforms
                .iter()
                .map(|t| FeatureTransform {
                    w: Matrix::zeros(t.w.rows(), t.w.cols()),
                    b: vec![0.0; t.b.len()],
                })
                .collect(),
            video_transforms: self
                .video_transforms
                .iter()
                .map(|t| FeatureTransform {
                    w: Matrix::zeros(t.w.rows(), t.w.cols()),
                    b: vec![0.0; t.b.len()],
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    u: vec![0.0; h.u.len()],
                    c: 0.0,
                })
                .collect(),
        }
    }

    /// Visit every tensor in the fixed flattening order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, t) in self.text_transforms.iter().enumerate() {
            out.push((format!("text_w{i}"), t.w.data()));
            out.push((format!("text_b{i}"), t.b.as_slice()));
        }
        for (j, t) in self.video_transforms.iter().enumerate() {
            out.push((format!("video_w{j}"), t.w.data()));
            out.push((format!("video_b{j}"), t.b.as_slice()));
        }
        for (s, h) in self.heads.iter().enumerate() {
            out.push((format!("head_u{s}"), h.u.as_slice()));
            out.push((format!("head_c{s}"), std::slice::from_ref(&h.c)));
        }
        out
    }

    /// Visit every tensor mutably, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut idx = 0;
        for t in self.text_transforms.iter_mut() {
            f(idx, t.w.data_mut());
            idx += 1;
            f(idx, t.b.as_mut_slice());
            idx += 1;
        }
        for t in self.video_transforms.iter_mut() {
            f(idx, t.w.data_mut());
            idx += 1;
            f(idx, t.b.as_mut_slice());
            idx += 1;
        }
        for h in self.heads.iter_mut() {
            f(idx, h.u.as_mut_slice());
            idx += 1;
            f(idx, std::slice::from_mut(&mut h.c));
            idx += 1;
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, s) in self.tensors() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.tensors_mut(|_, slice| {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.text_features.len() != self.k1() || batch.video_features.len() != self.k2() {
            return Err(Error::Shape(format!(
                "batch has {}+{} features, model expects {}+{}",
                batch.text_features.len(),
                batch.video_features.len(),
                self.k1(),
                self.k2()
            )));
        }
        for (t, m) in self.text_transforms.iter().zip(&batch.text_features) {
            if m.cols() != t.w.rows() {
                return Err(Error::Shape(format!(
                    "text feature dim {} != transform fan-in {}",
                    m.cols(),
                    t.w.rows()
                )));
            }
        }
        for (t, m) in self.video_transforms.iter().zip(&batch.video_features) {
            if m.cols() != t.w.rows() {
                return Err(Error::Shape(format!(
                    "video feature dim {} != transform fan-in {}",
                    m.cols(),
                    t.w.rows()
                )));
            }
        }
        Ok(())
    }
}

/// Per-space b x b text-by-video similarity matrices plus their mean.
#[derive(Debug, Clone)]
pub struct SpaceSimilarities {
    pub per_space: Vec<Matrix>,
    pub aggregate: Matrix,
}

/// One attention fusion of a set of same-shape embeddings.
#[derive(Debug, Clone)]
pub struct FusionCache {
    /// b x k row-stochastic weights
    pub weights: Matrix,
    /// b x d fused output
    pub fused: Matrix,
}

#[derive(Debug, Clone)]
pub enum SpaceCache {
    /// text-side space: anchor = text embedding i, other end fuses video
    TextSide { video_fusion: FusionCache },
    /// video-side space: anchor = video embedding j, other end fuses text
    VideoSide { text_fusion: FusionCache },
    /// parallel heads: both ends fused
    Parallel {
        text_fusion: FusionCache,
        video_fusion: FusionCache,
    },
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub text_emb: Vec<Matrix>,
    pub video_emb: Vec<Matrix>,
    pub space_caches: Vec<SpaceCache>,
    pub sims: SpaceSimilarities,
}

/// tanh(X W + b), rows are items.
pub fn transform(x: &Matrix, t: &FeatureTransform) -> Result<Matrix> {
    if x.cols() != t.w.rows() {
        return Err(Error::Shape(format!(
            "transform input dim {} != fan-in {}",
            x.cols(),
            t.w.rows()
        )));
    }
    let mut pre = x.matmul(&t.w);
    for r in 0..pre.rows() {
        for (v, &bk) in pre.row_mut(r).iter_mut().zip(&t.b) {
            *v = (*v + bk).tanh();
        }
    }
    Ok(pre)
}

/// Attention-weighted fusion of k same-shape embedding matrices.
///
/// Per item r: logits_f = u . emb_f[r] + c, weights = softmax(logits),
/// fused[r] = sum_f weights_f * emb_f[r].
pub fn fuse(embeddings: &[&Matrix], head: &AttentionHead) -> FusionCache {
    assert!(!embeddings.is_empty(), "fusion needs at least one feature");
    let b = embeddings[0].rows();
    let d = embeddings[0].cols();
    let k = embeddings.len();
    let mut weights = Matrix::zeros(b, k);
    let mut fused = Matrix::zeros(b, d);
    let mut logits = vec![0.0; k];
    for r in 0..b {
        for (f, emb) in embeddings.iter().enumerate() {
            logits[f] = dot(&head.u, emb.row(r)) + head.c;
        }
        let w = softmax(&logits);
        for (f, emb) in embeddings.iter().enumerate() {
            let wf = w[f];
            for (o, &e) in fused.row_mut(r).iter_mut().zip(emb.row(r)) {
                *o += wf * e;
            }
        }
        weights.row_mut(r).copy_from_slice(&w);
    }
    FusionCache { weights, fused }
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), m.row(r)).sqrt()).collect()
}

/// All-pairs cosine: rows of `q` against rows of `c`.
fn cosine_matrix(q: &Matrix, c: &Matrix) -> Matrix {
    let qn = row_norms(q);
    let cn = row_norms(c);
    let mut out = Matrix::zeros(q.rows(), c.rows());
    for r in 0..q.rows() {
        for col in 0..c.rows() {
            let denom = qn[r] * cn[col];
            let v = if denom == 0.0 {
                0.0
            } else {
                dot(q.row(r), c.row(col)) / denom
            };
            out.set(r, col, v);
        }
    }
    out
}

/// Forward pass over a batch: per-space similarity matrices and their mean.
pub fn forward_spaces(batch: &Batch, params: &ModelParams) -> Result<ForwardCache> {
    params.check_batch(batch)?;
    let k1 = params.k1();
    let k2 = params.k2();

    let text_emb: Result<Vec<Matrix>> = batch
        .text_features
        .iter()
        .zip(&params.text_transforms)
        .map(|(x, t)| transform(x, t))
        .collect();
    let text_emb = text_emb?;
    let video_emb: Result<Vec<Matrix>> = batch
        .video_features
        .iter()
        .zip(&params.video_transforms)
        .map(|(x, t)| transform(x, t))
        .collect();
    let video_emb = video_emb?;

    let text_refs: Vec<&Matrix> = text_emb.iter().collect();
    let video_refs: Vec<&Matrix> = video_emb.iter().collect();

    let mut per_space = Vec::with_capacity(k1 + k2);
    let mut space_caches = Vec::with_capacity(k1 + k2);
    match params.topology {
        Topology::FeatureSpecific => {
            for s in 0..k1 + k2 {
                if s < k1 {
                    let video_fusion = fuse(&video_refs, &params.heads[s]);
                    per_space.push(cosine_matrix(&text_emb[s], &video_fusion.fused));
                    space_caches.push(SpaceCache::TextSide { video_fusion });
                } else {
                    let j = s - k1;
                    let text_fusion = fuse(&text_refs, &params.heads[s]);
                    per_space.push(cosine_matrix(&text_fusion.fused, &video_emb[j]));
                    space_caches.push(SpaceCache::VideoSide { text_fusion });
                }
            }
        }
        Topology::ParallelHeads => {
            for s in 0..k1 + k2 {
                let text_fusion = fuse(&text_refs, &params.heads[2 * s]);
                let video_fusion = fuse(&video_refs, &params.heads[2 * s + 1]);
                per_space.push(cosine_matrix(&text_fusion.fused, &video_fusion.fused));
                space_caches.push(SpaceCache::Parallel {
                    text_fusion,
                    video_fusion,
                });
            }
        }
    }

    let aggregate = Matrix::mean_of(&per_space);
    Ok(ForwardCache {
        text_emb,
        video_emb,
        space_caches,
        sims: SpaceSimilarities {
            per_space,
            aggregate,
        },
    })
}

/// Cosine backward over a full similarity matrix.
///
/// `grad` is dL/d(sims); accumulates into dL/dQ and dL/dC.
fn cosine_matrix_backward(
    q: &Matrix,
    c: &Matrix,
    sims: &Matrix,
    grad: &Matrix,
    dq: &mut Matrix,
    dc: &mut Matrix,
) {
    let qn = row_norms(q);
    let cn = row_norms(c);
    for r in 0..q.rows() {
        for col in 0..c.rows() {
            let g = grad.get(r, col);
            if g == 0.0 {
                continue;
            }
            let (nq, nc) = (qn[r], cn[col]);
            if nq == 0.0 || nc == 0.0 {
                continue; // zero-norm convention: zero gradient
            }
            let cosv = sims.get(r, col);
            let inv = 1.0 / (nq * nc);
            let q_row = q.row(r);
            let c_row = c.row(col);
            let dq_row = dq.row_mut(r);
            for k in 0..q_row.len() {
                dq_row[k] += g * (c_row[k] * inv - cosv * q_row[k] / (nq * nq));
            }
            let dc_row = dc.row_mut(col);
            for k in 0..c_row.len() {
                dc_row[k] += g * (q_row[k] * inv - cosv * c_row[k] / (nc * nc));
            }
        }
    }
}

/// Fusion backward: routes dL/d(fused) into the member embeddings and the
/// attention head.
fn fuse_backward(
    embeddings: &[&Matrix],
    head: &AttentionHead,
    cache: &FusionCache,
    d_fused: &Matrix,
    d_embeddings: &mut [Matrix],
    d_head: &mut AttentionHead,
) {
    let b = d_fused.rows();
    let k = embeddings.len();
    let mut d_weights = vec![0.0; k];
    for r in 0..b {
        let df = d_fused.row(r);
        let w = cache.weights.row(r);
        for (f, emb) in embeddings.iter().enumerate() {
            d_weights[f] = dot(df, emb.row(r));
        }
        let d_logits = softmax_backward(w, &d_weights);
        for (f, emb) in embeddings.iter().enumerate() {
            let wf = w[f];
            let dl = d_logits[f];
            let de_row = d_embeddings[f].row_mut(r);
            let e_row = emb.row(r);
            for k_ in 0..de_row.len() {
                de_row[k_] += wf * df[k_] + dl * head.u[k_];
            }
            for (gu, &e) in d_head.u.iter_mut().zip(e_row) {
                *gu += dl * e;
            }
            d_head.c += dl;
        }
    }
}

/// Backward pass: maps dL/d(per-space sims) to parameter gradients.
pub fn backward_spaces(
    batch: &Batch,
    params: &ModelParams,
    cache: &ForwardCache,
    d_sims: &[Matrix],
) -> Result<ModelParams> {
    assert_eq!(d_sims.len(), params.spaces(), "one grad matrix per space");
    let k1 = params.k1();
    let b = batch.size();
    let d = params.d;

    let mut grads = params.zeros_like();
    let mut d_text_emb: Vec<Matrix> = (0..k1).map(|_| Matrix::zeros(b, d)).collect();
    let mut d_video_emb: Vec<Matrix> = (0..params.k2()).map(|_| Matrix::zeros(b, d)).collect();

    let text_refs: Vec<&Matrix> = cache.text_emb.iter().collect();
    let video_refs: Vec<&Matrix> = cache.video_emb.iter().collect();

    for (s, space_cache) in cache.space_caches.iter().enumerate() {
        let sims = &cache.sims.per_space[s];
        let grad = &d_sims[s];
        match space_cache {
            SpaceCache::TextSide { video_fusion } => {
                let mut d_fused = Matrix::zeros(b, d);
                cosine_matrix_backward(
                    &cache.text_emb[s],
                    &video_fusion.fused,
                    sims,
                    grad,
                    &mut d_text_emb[s],
                    &mut d_fused,
                );
                fuse_backward(
                    &video_refs,
                    &params.heads[s],
                    video_fusion,
                    &d_fused,
                    &mut d_video_emb,
                    &mut grads.heads[s],
                );
            }
            SpaceCache::VideoSide { text_fusion } => {
                let j = s - k1;
                let mut d_fused = Matrix::zeros(b, d);
                cosine_matrix_backward(
                    &text_fusion.fused,
                    &cache.video_emb[j],
                    sims,
                    grad,
                    &mut d_fused,
                    &mut d_video_emb[j],
                );
                fuse_backward(
                    &text_refs,
                    &params.heads[s],
                    text_fusion,
                    &d_fused,
                    &mut d_text_emb,
                    &mut grads.heads[s],
                );
            }
            SpaceCache::Parallel {
                text_fusion,
                video_fusion,
            } => {
                let mut d_fused_t = Matrix::zeros(b, d);
                let mut d_fused_v = Matrix::zeros(b, d);
                cosine_matrix_backward(
                    &text_fusion.fused,
                    &video_fusion.fused,
                    sims,
                    grad,
                    &mut d_fused_t,
                    &mut d_fused_v,
                );
                let (head_t, head_v) = (&params.heads[2 * s], &params.heads[2 * s + 1]);
                let (gh_t, gh_v) = {
                    // split_at_mut to borrow both head grads
                    let (a, z) = grads.heads.split_at_mut(2 * s + 1);
                    (&mut a[2 * s], &mut z[0])
                };
                fuse_backward(&text_refs, head_t, text_fusion, &d_fused_t, &mut d_text_emb, gh_t);
                fuse_backward(
                    &video_refs,
                    head_v,
                    video_fusion,
                    &d_fused_v,
                    &mut d_video_emb,
                    gh_v,
                );
            }
        }
    }

    // through tanh into the shared transforms
    for ((x, emb), (d_emb, gt)) in batch
        .text_features
        .iter()
        .zip(&cache.text_emb)
        .zip(d_text_emb.iter().zip(grads.text_transforms.iter_mut()))
    {
        transform_backward(x, emb, d_emb, gt);
    }
    for ((x, emb), (d_emb, gt)) in batch
        .video_features
        .iter()
        .zip(&cache.video_emb)
        .zip(d_video_emb.iter().zip(grads.video_transforms.iter_mut()))
    {
        transform_backward(x, emb, d_emb, gt);
    }
    Ok(grads)
}

fn transform_backward(x: &Matrix, emb: &Matrix, d_emb: &Matrix, grad: &mut FeatureTransform) {
    let mut d_pre = Matrix::zeros(emb.rows(), emb.cols());
    for r in 0..emb.rows() {
        let e = emb.row(r);
        let g = d_emb.row(r);
        let dp = d_pre.row_mut(r);
        for k in 0..e.len() {
            dp[k] = g[k] * (1.0 - e[k] * e[k]);
        }
    }
    let dw = x.matmul_tn(&d_pre);
    for (gw, &v) in grad.w.data_mut().iter_mut().zip(dw.data()) {
        *gw += v;
    }
    for r in 0..d_pre.rows() {
        for (gb, &v) in grad.b.iter_mut().zip(d_pre.row(r)) {
            *gb += v;
        }
    }
}

/// Per-space and aggregate scores of one text query against a collection.
#[derive(Debug, Clone)]
pub struct CollectionScores {
    pub ids: Vec<String>,
    /// spaces x n
    pub per_space: Vec<Vec<f64>>,
    /// n
    pub aggregate: Vec<f64>,
}

/// Score one query (raw text feature vectors) against every item of the
/// collection, streaming in chunks. Bit-identical to the batched forward
/// applied pairwise: chunking never crosses an item boundary.
pub fn score_collection(
    params: &ModelParams,
    query_features: &[Vec<f64>],
    video_tables: &[FeatureTable],
    chunk_size: usize,
) -> Result<CollectionScores> {
    if query_features.len() != params.k1() {
        return Err(Error::Shape(format!(
            "query has {} text features, model expects {}",
            query_features.len(),
            params.k1()
        )));
    }
    if video_tables.len() != params.k2() {
        return Err(Error::Shape(format!(
            "collection has {} video features, model expects {}",
            video_tables.len(),
            params.k2()
        )));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let n = video_tables[0].len();
    for t in &video_tables[1..] {
        if t.ids() != video_tables[0].ids() {
            return Err(Error::Data(format!(
                "video feature '{}' ids misaligned with '{}'",
                t.name, video_tables[0].name
            )));
        }
    }

    // query-side embeddings (1 x d each)
    let mut text_emb = Vec::with_capacity(params.k1());
    for (q, t) in query_features.iter().zip(&params.text_transforms) {
        let x = Matrix::from_vec(1, q.len(), q.clone())?;
        text_emb.push(transform(&x, t)?);
    }
    let text_refs: Vec<&Matrix> = text_emb.iter().collect();

    let k1 = params.k1();
    let spaces = params.spaces();
    // per space: the fixed query-side d-vector (anchor or fused text)
    let query_side: Vec<Vec<f64>> = (0..spaces)
        .map(|s| match params.topology {
            Topology::FeatureSpecific => {
                if s < k1 {
                    text_emb[s].row(0).to_vec()
                } else {
                    fuse(&text_refs, &params.heads[s]).fused.row(0).to_vec()
                }
            }
            Topology::ParallelHeads => fuse(&text_refs, &params.heads[2 * s]).fused.row(0).to_vec(),
        })
        .collect();

    let mut per_space = vec![Vec::with_capacity(n); spaces];
    let mut aggregate = Vec::with_capacity(n);

    let mut start = 0;
    while start < n {
        let end = (start + chunk_size).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let video_feats: Vec<Matrix> = video_tables.iter().map(|t| t.gather(&rows)).collect();
        let video_emb: Result<Vec<Matrix>> = video_feats
            .iter()
            .zip(&params.video_transforms)
            .map(|(x, t)| transform(x, t))
            .collect();
        let video_emb = video_emb?;
        let video_refs: Vec<&Matrix> = video_emb.iter().collect();

        // collection-side matrix per space for this chunk
        for s in 0..spaces {
            let collection_side: Matrix = match params.topology {
                Topology::FeatureSpecific => {
                    if s < k1 {
                        fuse(&video_refs, &params.heads[s]).fused
                    } else {
                        video_emb[s - k1].clone()
                    }
                }
                Topology::ParallelHeads => fuse(&video_refs, &params.heads[2 * s + 1]).fused,
            };
            let q = &query_side[s];
            let qn = dot(q, q).sqrt();
            for item in 0..collection_side.rows() {
                let row = collection_side.row(item);
                let cn = dot(row, row).sqrt();
                let v = if qn == 0.0 || cn == 0.0 {
                    0.0
                } else {
                    dot(q, row) / (qn * cn)
                };
                per_space[s].push(v);
            }
        }
        start = end;
    }

    for item in 0..n {
        let sum: f64 = per_space.iter().map(|space| space[item]).sum();
        aggregate.push(sum / spaces as f64);
    }

    Ok(CollectionScores {
        ids: video_tables[0].ids().to_vec(),
        per_space,
        aggregate,
    })
}

/// Query raw features pulled from the text tables for `query_id`.
pub fn query_features(text_tables: &[FeatureTable], query_id: &str) -> Result<Vec<Vec<f64>>> {
    text_tables
        .iter()
        .map(|t| {
            t.vector_by_id(query_id)
                .map(|v| v.iter().map(|&x| x as f64).collect())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "query id '{query_id}' missing from feature '{}'",
                        t.name
                    ))
                })
        })
        .collect()
}
