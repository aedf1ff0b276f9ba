//! The three training-loss components and their analytic gradients:
//! per-space hardest-negative triplet ranking (ITRL), the partial/full
//! de-correlation loss across space pairs (DcL), and the entropy-gated
//! fair multi-space sum (EF-MTRL).
//!
//! Gradients flow into the per-space similarity matrices; `model` maps them
//! onward to parameters. Entropy gates are per-step constants: no gradient
//! passes through the entropy path, and the finite-difference harness
//! freezes gates accordingly.

use crate::error::{Error, Result};
use crate::model::{ForwardCache, SpaceCache};
use crate::numerics::{histogram_entropy, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DclMode {
    /// correlate only the off-diagonal (negative) entries of each row
    Partial,
    /// correlate full rows, positives included
    Full,
    Off,
}

impl DclMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DclMode::Partial => "partial",
            DclMode::Full => "full",
            DclMode::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "partial" => Some(DclMode::Partial),
            "full" => Some(DclMode::Full),
            "off" => Some(DclMode::Off),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MtrlMode {
    EfGated,
    PlainSum,
}

impl MtrlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MtrlMode::EfGated => "ef",
            MtrlMode::PlainSum => "plain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ef" | "ef-gated" => Some(MtrlMode::EfGated),
            "plain" | "plain-sum" => Some(MtrlMode::PlainSum),
            _ => None,
        }
    }
}

/// Gate comparison against the 1/(k1+k2) threshold. Strict `>` is the
/// literal reading but gates out every space when entropies tie; `>=` is
/// the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateComparison {
    Gte,
    Strict,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub dcl_mode: DclMode,
    pub dcl_weight: f64,
    pub mtrl_mode: MtrlMode,
    pub entropy_bins: usize,
    pub entropy_eps: f64,
    /// None: use 1/(k1+k2)
    pub gate_threshold: Option<f64>,
    pub gate_comparison: GateComparison,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            dcl_mode: DclMode::Partial,
            dcl_weight: 1.0,
            mtrl_mode: MtrlMode::EfGated,
            entropy_bins: 100,
            entropy_eps: 1e-10,
            gate_threshold: None,
            gate_comparison: GateComparison::Gte,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if self.entropy_bins < 2 {
            return Err(Error::Config("entropy bins must be >= 2".into()));
        }
        if batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 (no negatives)".into()));
        }
        // with b-1 = 2 negatives the row Pearson is always +-1 or degenerate
        if self.dcl_mode != DclMode::Off && batch_size < 4 {
            return Err(Error::Config(
                "de-correlation loss needs batch size >= 4".into(),
            ));
        }
        Ok(())
    }

    pub fn threshold_for(&self, spaces: usize) -> f64 {
        self.gate_threshold.unwrap_or(1.0 / spaces as f64)
    }
}

/// Per-space feature entropies, the derived space weights, and the gate
/// decisions.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub gates: Vec<bool>,
}

/// ITRL over one space's b x b similarity matrix (rows = texts, diagonal =
/// positives). Row loss: max(0, margin + hardest_negative - positive).
#[derive(Debug, Clone)]
pub struct ItrlResult {
    pub per_row: Vec<f64>,
    pub mean: f64,
    /// column index of the hardest negative per row
    pub hardest: Vec<usize>,
    /// hinge strictly active per row
    pub active: Vec<bool>,
}

pub fn itrl(sims: &Matrix, margin: f64) -> Result<ItrlResult> {
    let b = sims.rows();
    if b < 2 {
        return Err(Error::Data("ITRL needs at least one negative (b >= 2)".into()));
    }
    assert_eq!(sims.cols(), b, "similarity matrix must be square");
    let mut per_row = Vec::with_capacity(b);
    let mut hardest = Vec::with_capacity(b);
    let mut active = Vec::with_capacity(b);
    for i in 0..b {
        let row = sims.row(i);
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for (j, &v) in row.iter().enumerate() {
            if j != i && v > best {
                best = v;
                best_j = j;
            }
        }
        let violation = margin + best - row[i];
        let loss = violation.max(0.0);
        per_row.push(loss);
        hardest.push(best_j);
        active.push(violation > 0.0);
    }
    let mean = per_row.iter().sum::<f64>() / b as f64;
    Ok(ItrlResult {
        per_row,
        mean,
        hardest,
        active,
    })
}

/// Accumulate `scale * d(itrl mean)/d(sims)` into `grad`. Gradient touches
/// only the positive and the selected hardest negative of each active row.
fn itrl_backward(result: &ItrlResult, scale: f64, grad: &mut Matrix) {
    let b = result.per_row.len();
    let g = scale / b as f64;
    for i in 0..b {
        if result.active[i] {
            grad.add_at(i, result.hardest[i], g);
            grad.add_at(i, i, -g);
        }
    }
}

/// One space pair's de-correlation loss: mean over rows of |pearson| between
/// the two rows' masked entries, computed with mask-weighted moments over
/// the full rows (the matrix form of the diagonal mask). Masked-out entries
/// are excluded from the correlation, not zero-filled.
pub struct DclPairResult {
    pub value: f64,
    /// sign of the row correlation, 0 when degenerate; indexed by row
    pub row_signs: Vec<i8>,
}

pub fn dcl_pair(m: &Matrix, n: &Matrix, mode: DclMode) -> (DclPairResult, Matrix, Matrix) {
    assert!(mode != DclMode::Off, "dcl_pair with mode off");
    let b = m.rows();
    assert_eq!(m.cols(), b);
    assert_eq!((n.rows(), n.cols()), (b, b), "space shape mismatch");
    let include_diag = mode == DclMode::Full;

    let mut grad_m = Matrix::zeros(b, b);
    let mut grad_n = Matrix::zeros(b, b);
    let mut total = 0.0;
    let mut row_signs = Vec::with_capacity(b);

    for i in 0..b {
        let x = m.row(i);
        let y = n.row(i);
        let masked = |j: usize| include_diag || j != i;
        let n_eff = if include_diag { b } else { b - 1 } as f64;

        let mut sx = 0.0;
        let mut sy = 0.0;
        for j in 0..b {
            if masked(j) {
                sx += x[j];
                sy += y[j];
            }
        }
        let mx = sx / n_eff;
        let my = sy / n_eff;

        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        for j in 0..b {
            if masked(j) {
                let xc = x[j] - mx;
                let yc = y[j] - my;
                sxx += xc * xc;
                syy += yc * yc;
                sxy += xc * yc;
            }
        }
        if sxx < 1e-24 || syy < 1e-24 {
            row_signs.push(0); // degenerate row contributes 0
            continue;
        }
        let denom = (sxx * syy).sqrt();
        let p = sxy / denom;
        total += p.abs();
        let sign = if p > 0.0 {
            1.0
        } else if p < 0.0 {
            -1.0
        } else {
            0.0 // subgradient of |.| at 0
        };
        row_signs.push(sign as i8);
        if sign != 0.0 {
            let scale = sign / b as f64;
            for j in 0..b {
                if masked(j) {
                    let xc = x[j] - mx;
                    let yc = y[j] - my;
                    grad_m.add_at(i, j, scale * (yc / denom - p * xc / sxx));
                    grad_n.add_at(i, j, scale * (xc / denom - p * yc / syy));
                }
            }
        }
    }

    (
        DclPairResult {
            value: total / b as f64,
            row_signs,
        },
        grad_m,
        grad_n,
    )
}

/// Unordered space pairs (m < n), the aggregation set for [`dcl_all`].
pub fn space_pairs(spaces: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(spaces * (spaces - 1) / 2);
    for m in 0..spaces {
        for n in m + 1..spaces {
            pairs.push((m, n));
        }
    }
    pairs
}

/// Mean [`dcl_pair`] over all unordered space pairs. A single space yields 0
/// (nothing to decorrelate); training configs reject that upstream.
pub fn dcl_all(spaces: &[Matrix], mode: DclMode) -> (f64, Vec<Matrix>, Vec<i8>) {
    let s = spaces.len();
    let b = spaces[0].rows();
    let mut grads: Vec<Matrix> = (0..s).map(|_| Matrix::zeros(b, b)).collect();
    if s < 2 || mode == DclMode::Off {
        return (0.0, grads, Vec::new());
    }
    let pairs = space_pairs(s);
    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    let mut signs = Vec::with_capacity(pairs.len() * b);
    for &(m, n) in &pairs {
        let (res, gm, gn) = dcl_pair(&spaces[m], &spaces[n], mode);
        total += res.value * inv;
        signs.extend(res.row_signs);
        for (dst, src) in grads[m].data_mut().iter_mut().zip(gm.data()) {
            *dst += src * inv;
        }
        for (dst, src) in grads[n].data_mut().iter_mut().zip(gn.data()) {
            *dst += src * inv;
        }
    }
    (total, grads, signs)
}

/// Values feeding one space's entropy: the dominant-feature embedding
/// (feature-specific) or the stacked fused embeddings (parallel heads),
/// min-max normalized per column over the batch and flattened. A constant
/// column maps to 0.
fn entropy_values(cache: &ForwardCache, space: usize, k1: usize) -> Vec<f64> {
    let sources: Vec<&Matrix> = match &cache.space_caches[space] {
        SpaceCache::TextSide { .. } => vec![&cache.text_emb[space]],
        SpaceCache::VideoSide { .. } => vec![&cache.video_emb[space - k1]],
        SpaceCache::Parallel {
            text_fusion,
            video_fusion,
        } => vec![&text_fusion.fused, &video_fusion.fused],
    };
    let rows: usize = sources.iter().map(|m| m.rows()).sum();
    let d = sources[0].cols();
    let mut out = Vec::with_capacity(rows * d);
    for col in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in &sources {
            for r in 0..m.rows() {
                let v = m.get(r, col);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let range = hi - lo;
        for m in &sources {
            for r in 0..m.rows() {
                let v = if range == 0.0 {
                    0.0
                } else {
                    (m.get(r, col) - lo) / range
                };
                out.push(v);
            }
        }
    }
    out
}

/// Per-space entropies, weights W = softmax(tanh(H)), and gate decisions.
///
/// The gate compares w_s against the threshold in the exact form
/// sum_k exp(x_k - x_s) <= spaces (equivalent to w_s >= 1/spaces via
/// monotonicity), so exactly-tied entropies gate all spaces in under `>=`
/// and none in under strict `>`. An explicit threshold override falls back
/// to comparing the softmax weights directly.
pub fn entropy_weights(cache: &ForwardCache, cfg: &LossConfig) -> EntropyReport {
    let spaces = cache.sims.per_space.len();
    let k1 = cache.text_emb.len();
    let entropies: Vec<f64> = (0..spaces)
        .map(|s| {
            let values = entropy_values(cache, s, k1);
            histogram_entropy(&values, cfg.entropy_bins, cfg.entropy_eps)
        })
        .collect();
    let squashed: Vec<f64> = entropies.iter().map(|&h| h.tanh()).collect();
    let weights = softmax(&squashed);
    let gates: Vec<bool> = if let Some(t) = cfg.gate_threshold {
        weights
            .iter()
            .map(|&w| match cfg.gate_comparison {
                GateComparison::Gte => w >= t,
                GateComparison::Strict => w > t,
            })
            .collect()
    } else {
        (0..spaces)
            .map(|s| {
                let inv_w: f64 = squashed.iter().map(|&x| (x - squashed[s]).exp()).sum();
                match cfg.gate_comparison {
                    GateComparison::Gte => inv_w <= spaces as f64,
                    GateComparison::Strict => inv_w < spaces as f64,
                }
            })
            .collect()
    };
    EntropyReport {
        entropies,
        weights,
        gates,
    }
}

/// Discrete decisions taken inside one loss evaluation. Two evaluations
/// with equal fingerprints lie on the same smooth piece of the loss, which
/// is what makes a finite-difference comparison against the analytic
/// gradient valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossFingerprint {
    pub gates: Vec<bool>,
    /// per gated-in space: (hinge active, hardest index) per row
    pub itrl: Vec<Vec<(bool, usize)>>,
    /// per (space pair, row): sign of the row correlation
    pub dcl_signs: Vec<i8>,
}

/// Total loss, telemetry values, and dL/d(per-space sims).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// ungated per-space ITRL means
    pub itrl_means: Vec<f64>,
    /// the gated (or plain) sum actually entering the total
    pub ef_mtrl: f64,
    pub dcl: f64,
    pub entropy: Option<EntropyReport>,
    pub gates: Vec<bool>,
    pub d_sims: Vec<Matrix>,
    pub fingerprint: LossFingerprint,
}

/// Loss with gates computed from the current embeddings (the training path).
pub fn total_loss(cache: &ForwardCache, cfg: &LossConfig) -> Result<LossOutput> {
    let spaces = cache.sims.per_space.len();
    let (entropy, gates) = match cfg.mtrl_mode {
        MtrlMode::EfGated => {
            let report = entropy_weights(cache, cfg);
            let gates = report.gates.clone();
            (Some(report), gates)
        }
        MtrlMode::PlainSum => (None, vec![true; spaces]),
    };
    let mut out = total_loss_with_gates(cache, cfg, &gates)?;
    out.entropy = entropy;
    Ok(out)
}

/// Loss under externally fixed gate decisions. Gates only select which
/// spaces' ITRL terms enter the sum; DcL always runs over all spaces.
pub fn total_loss_with_gates(
    cache: &ForwardCache,
    cfg: &LossConfig,
    gates: &[bool],
) -> Result<LossOutput> {
    let spaces = cache.sims.per_space.len();
    assert_eq!(gates.len(), spaces);
    let b = cache.sims.aggregate.rows();
    cfg.validate(b)?;

    let mut itrl_means = Vec::with_capacity(spaces);
    let mut itrl_results = Vec::with_capacity(spaces);
    for sims in &cache.sims.per_space {
        let r = itrl(sims, cfg.margin)?;
        itrl_means.push(r.mean);
        itrl_results.push(r);
    }
    let ef_mtrl: f64 = itrl_means
        .iter()
        .zip(gates)
        .filter(|(_, &g)| g)
        .map(|(&m, _)| m)
        .sum();

    let mut d_sims: Vec<Matrix> = (0..spaces).map(|_| Matrix::zeros(b, b)).collect();
    for (s, result) in itrl_results.iter().enumerate() {
        if gates[s] {
            itrl_backward(result, 1.0, &mut d_sims[s]);
        }
    }

    let (dcl, dcl_grads, dcl_signs) = dcl_all(&cache.sims.per_space, cfg.dcl_mode);
    if cfg.dcl_mode != DclMode::Off {
        for (dst, src) in d_sims.iter_mut().zip(&dcl_grads) {
            for (a, &g) in dst.data_mut().iter_mut().zip(src.data()) {
                *a += cfg.dcl_weight * g;
            }
        }
    }

    let total = ef_mtrl + cfg.dcl_weight * dcl;
    let fingerprint = LossFingerprint {
        gates: gates.to_vec(),
        itrl: itrl_results
            .iter()
            .zip(gates)
            .map(|(r, &g)| {
                if g {
                    r.active.iter().copied().zip(r.hardest.iter().copied()).collect()
                } else {
                    Vec::new()
                }
            })
            .collect(),
        dcl_signs,
    };

    Ok(LossOutput {
        total,
        itrl_means,
        ef_mtrl,
        dcl,
        entropy: None,
        gates: gates.to_vec(),
        d_sims,
        fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Batch;
    use crate::model::{forward_spaces, ModelParams, SpaceSimilarities, Topology};
    use crate::numerics::{finite_difference_gradient, pearson, pearson_with_grad, rel_error};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_square(rng: &mut ChaCha8Rng, b: usize) -> Matrix {
        let mut m = Matrix::zeros(b, b);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    /// matrix with given off-diagonal entries per row (cycled) and diagonal
    fn with_rows(b: usize, off_diag: &[f64], diag: f64) -> Matrix {
        let mut m = Matrix::zeros(b, b);
        for i in 0..b {
            let mut it = off_diag.iter().cycle();
            for j in 0..b {
                if i == j {
                    m.set(i, j, diag);
                } else {
                    m.set(i, j, *it.next().unwrap());
                }
            }
        }
        m
    }

    #[test]
    fn itrl_row_examples() {
        // positive 0.5, negatives {0.6, 0.3}: loss 0.3
        let m = Matrix::from_vec(3, 3, vec![0.5, 0.6, 0.3, 0.0, 0.9, -0.5, 0.1, 0.2, 0.9]).unwrap();
        let r = itrl(&m, 0.2).unwrap();
        assert!((r.per_row[0] - 0.3).abs() < 1e-12);
        assert_eq!(r.hardest[0], 1);
        // margin satisfied everywhere: row 2 pos 0.9, negs {0.1,0.2} -> 0
        assert_eq!(r.per_row[2], 0.0);
        assert!(!r.active[2]);

        // tie at the positive: violation = margin
        let m = Matrix::from_vec(2, 2, vec![0.5, 0.5, -1.0, 0.9]).unwrap();
        let r = itrl(&m, 0.2).unwrap();
        assert!((r.per_row[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn itrl_rejects_singleton_batch() {
        let m = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        assert!(itrl(&m, 0.2).is_err());
    }

    #[test]
    fn itrl_nonnegative_and_zero_iff_margin_met() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = rng.gen_range(2..8);
            let m = random_square(&mut rng, b);
            let r = itrl(&m, 0.2).unwrap();
            assert!(r.mean >= 0.0);
            let all_met = (0..b).all(|i| {
                (0..b)
                    .filter(|&j| j != i)
                    .all(|j| m.get(i, j) <= m.get(i, i) - 0.2)
            });
            assert_eq!(r.mean == 0.0, all_met);
        }
    }

    #[test]
    fn itrl_ignores_non_hardest_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_square(&mut rng, 6);
        let r = itrl(&m, 0.2).unwrap();
        let mut m2 = m.clone();
        // shift every non-hardest negative down; value and gradient unchanged
        for i in 0..6 {
            for j in 0..6 {
                if j != i && j != r.hardest[i] {
                    m2.add_at(i, j, -0.05);
                }
            }
        }
        let r2 = itrl(&m2, 0.2).unwrap();
        assert_eq!(r.per_row, r2.per_row);
        assert_eq!(r.hardest, r2.hardest);
        let mut g1 = Matrix::zeros(6, 6);
        let mut g2 = Matrix::zeros(6, 6);
        itrl_backward(&r, 1.0, &mut g1);
        itrl_backward(&r2, 1.0, &mut g2);
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn dcl_pair_identical_spaces_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_square(&mut rng, 6);
        for mode in [DclMode::Partial, DclMode::Full] {
            let (res, ..) = dcl_pair(&m, &m, mode);
            assert!((res.value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dcl_pair_reversed_rows_score_one() {
        // off-diagonals [0.1,0.2,0.3] vs [0.3,0.2,0.1]: |pearson| = 1 per row
        let b = 4;
        let mut m = Matrix::zeros(b, b);
        let mut n = Matrix::zeros(b, b);
        for i in 0..b {
            let fwd = [0.1, 0.2, 0.3];
            let mut fi = fwd.iter();
            let mut ri = fwd.iter().rev();
            for j in 0..b {
                if i == j {
                    m.set(i, j, 0.9);
                    n.set(i, j, 0.8);
                } else {
                    m.set(i, j, *fi.next().unwrap());
                    n.set(i, j, *ri.next().unwrap());
                }
            }
        }
        let (res, ..) = dcl_pair(&m, &n, DclMode::Partial);
        assert!((res.value - 1.0).abs() < 1e-12);
        assert!(res.row_signs.iter().all(|&s| s == -1));
    }

    /// Naive per-row oracle: extract masked entries, call numerics::pearson.
    fn dcl_naive(m: &Matrix, n: &Matrix, mode: DclMode) -> f64 {
        let b = m.rows();
        let mut total = 0.0;
        for i in 0..b {
            let take = |mat: &Matrix| -> Vec<f64> {
                (0..b)
                    .filter(|&j| mode == DclMode::Full || j != i)
                    .map(|j| mat.get(i, j))
                    .collect()
            };
            total += pearson(&take(m), &take(n)).abs();
        }
        total / b as f64
    }

    #[test]
    fn dcl_masked_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m = random_square(&mut rng, 8);
            let n = random_square(&mut rng, 8);
            for mode in [DclMode::Partial, DclMode::Full] {
                let (res, ..) = dcl_pair(&m, &n, mode);
                assert!((res.value - dcl_naive(&m, &n, mode)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dcl_pair_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let m = random_square(&mut rng, 6);
            let n = random_square(&mut rng, 6);
            let (ab, ..) = dcl_pair(&m, &n, DclMode::Partial);
            let (ba, ..) = dcl_pair(&n, &m, DclMode::Partial);
            assert!((ab.value - ba.value).abs() < 1e-14);
            assert!((0.0..=1.0 + 1e-12).contains(&ab.value));
        }
    }

    #[test]
    fn dcl_partial_diagonal_gradient_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_square(&mut rng, 8);
            let n = random_square(&mut rng, 8);
            let (_, gm, gn) = dcl_pair(&m, &n, DclMode::Partial);
            for i in 0..8 {
                assert_eq!(gm.get(i, i), 0.0);
                assert_eq!(gn.get(i, i), 0.0);
            }
        }
    }

    #[test]
    fn dcl_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for mode in [DclMode::Partial, DclMode::Full] {
            let m = random_square(&mut rng, 6);
            let n = random_square(&mut rng, 6);
            let (_, gm, gn) = dcl_pair(&m, &n, mode);
            let mut flat = m.data().to_vec();
            let fd = finite_difference_gradient(
                |p| {
                    let mp = Matrix::from_vec(6, 6, p.to_vec()).unwrap();
                    dcl_pair(&mp, &n, mode).0.value
                },
                &mut flat,
                1e-6,
            );
            for (a, nfd) in gm.data().iter().zip(&fd) {
                assert!(rel_error(*a, *nfd) < 1e-4, "{mode:?} grad m {a} vs {nfd}");
            }
            let mut flat = n.data().to_vec();
            let fd = finite_difference_gradient(
                |p| {
                    let np = Matrix::from_vec(6, 6, p.to_vec()).unwrap();
                    dcl_pair(&m, &np, mode).0.value
                },
                &mut flat,
                1e-6,
            );
            for (a, nfd) in gn.data().iter().zip(&fd) {
                assert!(rel_error(*a, *nfd) < 1e-4, "{mode:?} grad n {a} vs {nfd}");
            }
        }
    }

    #[test]
    fn dcl_gradient_agrees_with_compact_pearson_grad() {
        // scatter of the mask-weighted gradient == gradient of the compact
        // extraction route
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let m = random_square(&mut rng, 5);
        let n = random_square(&mut rng, 5);
        let (_, gm, _) = dcl_pair(&m, &n, DclMode::Partial);
        for i in 0..5 {
            let x: Vec<f64> = (0..5).filter(|&j| j != i).map(|j| m.get(i, j)).collect();
            let y: Vec<f64> = (0..5).filter(|&j| j != i).map(|j| n.get(i, j)).collect();
            let (p, gx, _) = pearson_with_grad(&x, &y);
            let sign = if p > 0.0 { 1.0 } else { -1.0 };
            for (slot, j) in (0..5).filter(|&j| j != i).enumerate() {
                let expect = sign * gx[slot] / 5.0;
                assert!((gm.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dcl_all_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_square(&mut rng, 5);
        let (v, ..) = dcl_all(&[a.clone(), a.clone()], DclMode::Partial);
        assert!((v - 1.0).abs() < 1e-12);

        // three spaces with pairwise values {1, 0, 0} -> mean 1/3
        let x = with_rows(5, &[1.0, 2.0, 3.0, 4.0], 0.5);
        let y = with_rows(5, &[0.0, 1.0, 1.0, 0.0], 0.5);
        let (pair_xy, ..) = dcl_pair(&x, &y, DclMode::Partial);
        assert!(pair_xy.value.abs() < 1e-12);
        let (v, ..) = dcl_all(&[x.clone(), x.clone(), y], DclMode::Partial);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(space_pairs(9).len(), 36);
    }

    #[test]
    fn dcl_single_space_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = random_square(&mut rng, 5);
        let (v, g, _) = dcl_all(std::slice::from_ref(&a), DclMode::Partial);
        assert_eq!(v, 0.0);
        assert!(g[0].data().iter().all(|&x| x == 0.0));
    }

    fn forward_tiny(
        topology: Topology,
        seed: u64,
        b: usize,
    ) -> (Batch, ModelParams, ForwardCache) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_dims = vec![5, 7];
        let video_dims = vec![6, 4, 9];
        let params = ModelParams::init(topology, &text_dims, &video_dims, 8, seed).unwrap();
        let mk = |rng: &mut ChaCha8Rng, d: usize| {
            let mut m = Matrix::zeros(b, d);
            for v in m.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            m
        };
        let batch = Batch {
            text_ids: (0..b).map(|i| format!("t{i}")).collect(),
            video_ids: (0..b).map(|i| format!("v{i}")).collect(),
            text_features: text_dims.iter().map(|&d| mk(&mut rng, d)).collect(),
            video_features: video_dims.iter().map(|&d| mk(&mut rng, d)).collect(),
        };
        let cache = forward_spaces(&batch, &params).unwrap();
        (batch, params, cache)
    }

    #[test]
    fn entropy_identical_spaces_gate_all_under_gte_none_under_strict() {
        let (_, _, mut cache) = forward_tiny(Topology::FeatureSpecific, 21, 6);
        // force identical embeddings in every space
        let proto = cache.text_emb[0].clone();
        for m in cache.text_emb.iter_mut().chain(cache.video_emb.iter_mut()) {
            *m = proto.clone();
        }
        let cfg = LossConfig::default();
        let report = entropy_weights(&cache, &cfg);
        let spaces = report.weights.len();
        for (h, w) in report.entropies.iter().zip(&report.weights) {
            assert_eq!(*h, report.entropies[0]);
            assert!((w - 1.0 / spaces as f64).abs() < 1e-12);
        }
        assert!(report.gates.iter().all(|&g| g));

        let strict = LossConfig {
            gate_comparison: GateComparison::Strict,
            ..LossConfig::default()
        };
        let report = entropy_weights(&cache, &strict);
        assert!(report.gates.iter().all(|&g| !g));
    }

    #[test]
    fn entropy_weights_hand_computed_gate() {
        // H = [4.6, 0.0] -> W ~ [0.731, 0.269]; threshold 0.5 keeps space 1 only
        let w = softmax(&[4.6f64.tanh(), 0.0f64.tanh()]);
        assert!((w[0] - 0.731).abs() < 1e-3);
        assert!((w[1] - 0.269).abs() < 1e-3);
        assert!(w[0] >= 0.5 && w[1] < 0.5);
    }

    #[test]
    fn entropy_weights_sum_to_one_and_permute() {
        let (_, _, cache) = forward_tiny(Topology::FeatureSpecific, 23, 6);
        let cfg = LossConfig::default();
        let report = entropy_weights(&cache, &cfg);
        assert!((report.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // permuting spaces permutes weights identically: swap two text spaces
        // by swapping their embeddings and similarity matrices
        let mut permuted = cache.clone();
        permuted.text_emb.swap(0, 1);
        permuted.sims.per_space.swap(0, 1);
        permuted.space_caches.swap(0, 1);
        let report_p = entropy_weights(&permuted, &cfg);
        assert_eq!(report.weights[0], report_p.weights[1]);
        assert_eq!(report.weights[1], report_p.weights[0]);
        assert_eq!(report.gates[0], report_p.gates[1]);
    }

    #[test]
    fn entropy_constant_embedding_yields_zero() {
        let (_, _, mut cache) = forward_tiny(Topology::FeatureSpecific, 25, 6);
        let rows = cache.text_emb[0].rows();
        let cols = cache.text_emb[0].cols();
        cache.text_emb[0] = Matrix::from_vec(rows, cols, vec![0.37; rows * cols]).unwrap();
        let cfg = LossConfig::default();
        let report = entropy_weights(&cache, &cfg);
        assert!(report.entropies[0].abs() <= 1e-9);
    }

    #[test]
    fn total_loss_plain_no_dcl_reduces_to_itrl_sum() {
        let (_, _, cache) = forward_tiny(Topology::FeatureSpecific, 27, 6);
        let cfg = LossConfig {
            dcl_mode: DclMode::Off,
            mtrl_mode: MtrlMode::PlainSum,
            ..LossConfig::default()
        };
        let out = total_loss(&cache, &cfg).unwrap();
        let expect: f64 = cache
            .sims
            .per_space
            .iter()
            .map(|m| itrl(m, 0.2).unwrap().mean)
            .sum();
        assert!((out.total - expect).abs() < 1e-14);
        assert_eq!(out.dcl, 0.0);
    }

    #[test]
    fn gating_masks_terms_without_changing_values() {
        let (_, _, cache) = forward_tiny(Topology::FeatureSpecific, 29, 6);
        let cfg = LossConfig::default();
        let out = total_loss(&cache, &cfg).unwrap();
        let masked_sum: f64 = out
            .itrl_means
            .iter()
            .zip(&out.gates)
            .filter(|(_, &g)| g)
            .map(|(&v, _)| v)
            .sum();
        assert_eq!(out.ef_mtrl, masked_sum);

        // per-space values equal the plain-sum run's values
        let plain = total_loss(
            &cache,
            &LossConfig {
                mtrl_mode: MtrlMode::PlainSum,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.itrl_means, plain.itrl_means);
    }

    #[test]
    fn all_gates_closed_gives_zero_ef_mtrl() {
        let (_, _, cache) = forward_tiny(Topology::FeatureSpecific, 31, 6);
        let gates = vec![false; 5];
        let cfg = LossConfig {
            dcl_mode: DclMode::Off,
            ..LossConfig::default()
        };
        let out = total_loss_with_gates(&cache, &cfg, &gates).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.d_sims.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn total_loss_rejects_small_batches_for_dcl() {
        let (_, _, cache) = forward_tiny(Topology::FeatureSpecific, 33, 3);
        let cfg = LossConfig::default();
        assert!(total_loss(&cache, &cfg).is_err());
        let off = LossConfig {
            dcl_mode: DclMode::Off,
            ..LossConfig::default()
        };
        assert!(total_loss(&cache, &off).is_ok());
    }

    #[test]
    fn loss_gradient_wrt_sims_matches_fd() {
        // d_sims check in isolation: perturb similarity entries directly
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for mode in [DclMode::Off, DclMode::Partial, DclMode::Full] {
            let spaces: Vec<Matrix> = (0..3).map(|_| random_square(&mut rng, 6)).collect();
            let cfg = LossConfig {
                dcl_mode: mode,
                mtrl_mode: MtrlMode::PlainSum,
                ..LossConfig::default()
            };
            let eval = |flat: &[f64]| -> f64 {
                let mats: Vec<Matrix> = flat
                    .chunks(36)
                    .map(|c| Matrix::from_vec(6, 6, c.to_vec()).unwrap())
                    .collect();
                let mut total = 0.0;
                for m in &mats {
                    total += itrl(m, cfg.margin).unwrap().mean;
                }
                let (dcl, ..) = dcl_all(&mats, mode);
                total + cfg.dcl_weight * dcl
            };

            // analytic via total_loss_with_gates on a synthetic cache
            let cache = ForwardCache {
                text_emb: vec![Matrix::zeros(6, 2)],
                video_emb: vec![Matrix::zeros(6, 2), Matrix::zeros(6, 2)],
                space_caches: vec![],
                sims: SpaceSimilarities {
                    per_space: spaces.clone(),
                    aggregate: Matrix::mean_of(&spaces),
                },
            };
            let out = total_loss_with_gates(&cache, &cfg, &[true; 3]).unwrap();

            let mut flat: Vec<f64> = spaces.iter().flat_map(|m| m.data().to_vec()).collect();
            let fd = finite_difference_gradient(eval, &mut flat, 1e-6);
            let analytic: Vec<f64> = out.d_sims.iter().flat_map(|m| m.data().to_vec()).collect();
            for (a, n) in analytic.iter().zip(&fd) {
                assert!(rel_error(*a, *n) < 1e-4, "{mode:?}: {a} vs {n}");
            }
        }
    }
}
