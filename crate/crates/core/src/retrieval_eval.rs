//! Ranking, AP/mAP, precision@k, and the inter-space IoU diagnostic.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::feature_store::{Dataset, PairDataset};
use crate::model::{query_features, score_collection, ModelParams};
use crate::numerics::Matrix;

/// Descending ranked list with deterministic tie-break (score desc, id asc).
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    /// (item id, score), strictly ordered
    pub items: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }
}

fn ranks_before(a: &(String, f64), b: &(String, f64)) -> bool {
    match b.1.partial_cmp(&a.1).expect("finite scores") {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a.0 < b.0,
    }
}

/// Top-k selection over item scores; equals truncating a full sort.
///
/// Keeps a bounded worst-first heap rather than sorting the whole
/// collection; the full-sort equivalence is covered by tests.
pub fn rank(query_id: &str, ids: &[String], scores: &[f64], depth: usize) -> Result<RankedList> {
    assert_eq!(ids.len(), scores.len());
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad} for query '{query_id}'")));
    }
    let k = depth.min(ids.len());
    // binary heap with "worst of the kept" at the top
    struct Entry(String, f64);
    impl PartialEq for Entry {
        fn eq(&self, other: &Self) -> bool {
            self.1 == other.1 && self.0 == other.0
        }
    }
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // max-heap pops the entry that ranks LAST
            other
                .1
                .partial_cmp(&self.1)
                .unwrap()
                .then_with(|| self.0.cmp(&other.0))
        }
    }
    let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
    for (id, &score) in ids.iter().zip(scores) {
        heap.push(Entry(id.clone(), score));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut items: Vec<(String, f64)> = heap.into_iter().map(|Entry(id, s)| (id, s)).collect();
    items.sort_by(|a, b| {
        if ranks_before(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    Ok(RankedList {
        query_id: query_id.to_string(),
        items,
    })
}

/// Average precision of a ranked list against a judgment set. Unretrieved
/// relevant items contribute zero.
pub fn average_precision(ranked: &RankedList, relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Data(format!(
            "query '{}' has an empty judgment set",
            ranked.query_id
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, (id, _)) in ranked.items.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Fraction of the top-k items that are relevant.
pub fn precision_at_k(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranked
        .items
        .iter()
        .take(k)
        .filter(|(id, _)| relevant.contains(id))
        .count();
    hits as f64 / k as f64
}

/// Mean-over-queries IoU of top-k sets for every space pair, plus the mean
/// off-diagonal entry (the single diversity score).
#[derive(Debug, Clone)]
pub struct IouReport {
    /// (spaces x spaces), symmetric, unit diagonal
    pub matrix: Matrix,
    pub mean_off_diagonal: f64,
}

/// `lists[s][q]` = space s's ranked list for query q.
pub fn inter_space_iou(lists: &[Vec<RankedList>], k: usize) -> Result<IouReport> {
    let spaces = lists.len();
    if spaces < 2 {
        return Err(Error::Data("inter-space IoU needs >= 2 spaces".into()));
    }
    let queries = lists[0].len();
    if queries == 0 {
        return Err(Error::Data("inter-space IoU needs >= 1 query".into()));
    }
    for space_lists in lists {
        if space_lists.len() != queries {
            return Err(Error::Data("per-space query counts differ".into()));
        }
        for l in space_lists {
            if l.items.len() < k {
                return Err(Error::Data(format!(
                    "ranked list depth {} < top-k {k} for query '{}'",
                    l.items.len(),
                    l.query_id
                )));
            }
        }
    }

    let top_sets: Vec<Vec<BTreeSet<&str>>> = lists
        .iter()
        .map(|space_lists| {
            space_lists
                .iter()
                .map(|l| l.items.iter().take(k).map(|(id, _)| id.as_str()).collect())
                .collect()
        })
        .collect();

    let mut matrix = Matrix::zeros(spaces, spaces);
    for i in 0..spaces {
        matrix.set(i, i, 1.0);
        for j in i + 1..spaces {
            let mut acc = 0.0;
            for q in 0..queries {
                let a = &top_sets[i][q];
                let b = &top_sets[j][q];
                let inter = a.intersection(b).count();
                let union = a.union(b).count();
                acc += inter as f64 / union as f64;
            }
            let v = acc / queries as f64;
            matrix.set(i, j, v);
            matrix.set(j, i, v);
        }
    }
    let mut sum = 0.0;
    for i in 0..spaces {
        for j in 0..spaces {
            if i != j {
                sum += matrix.get(i, j);
            }
        }
    }
    let mean_off_diagonal = sum / (spaces * (spaces - 1)) as f64;
    Ok(IouReport {
        matrix,
        mean_off_diagonal,
    })
}

/// Per-query and summary retrieval metrics for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (query id, AP, precision@k)
    pub per_query: Vec<(String, f64, f64)>,
    pub map: f64,
    pub mean_precision_at_k: f64,
    pub precision_k: usize,
    pub iou: Option<IouReport>,
}

impl EvalReport {
    pub fn from_queries(per_query: Vec<(String, f64, f64)>, precision_k: usize) -> EvalReport {
        let n = per_query.len().max(1) as f64;
        let map = per_query.iter().map(|(_, ap, _)| ap).sum::<f64>() / n;
        let mean_p = per_query.iter().map(|(_, _, p)| p).sum::<f64>() / n;
        EvalReport {
            per_query,
            map,
            mean_precision_at_k: mean_p,
            precision_k,
            iou: None,
        }
    }

    /// Per-query CSV: `query_id,ap,p_at_k`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("query_id,ap,p_at_{}\n", self.precision_k);
        for (q, ap, p) in &self.per_query {
            out.push_str(&format!("{q},{ap},{p}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "queries: {}\nmAP: {:.4}\nP@{}: {:.4}{}\n",
            self.per_query.len(),
            self.map,
            self.precision_k,
            self.mean_precision_at_k,
            match &self.iou {
                Some(iou) => format!("\nmean inter-space IoU: {:.4}", iou.mean_off_diagonal),
                None => String::new(),
            }
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// ranking depth for AP (unretrieved relevants score zero)
    pub depth: usize,
    pub precision_k: usize,
    /// top-k for the inter-space IoU sets
    pub iou_k: usize,
    pub chunk_size: usize,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            depth: 1000,
            precision_k: 20,
            iou_k: 20,
            chunk_size: 512,
            threads: 1,
        }
    }
}

/// Per-query scoring output: the aggregate ranked list plus one ranked list
/// per space (at IoU depth).
struct QueryRankings {
    aggregate: RankedList,
    per_space: Vec<RankedList>,
}

fn rank_query(
    params: &ModelParams,
    ds: &Dataset,
    query_id: &str,
    opts: &EvalOptions,
) -> Result<QueryRankings> {
    let feats = query_features(&ds.text_tables, query_id)?;
    let scores = score_collection(params, &feats, &ds.video_tables, opts.chunk_size)?;
    let aggregate = rank(query_id, &scores.ids, &scores.aggregate, opts.depth)?;
    let per_space = scores
        .per_space
        .iter()
        .map(|space_scores| rank(query_id, &scores.ids, space_scores, opts.iou_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryRankings {
        aggregate,
        per_space,
    })
}

/// Rank the collection for every judged query of `split`, scoring queries
/// across worker threads with a deterministic ordered merge, and compute
/// AP, precision@k, and the inter-space IoU diagnostic.
pub fn evaluate_model(
    params: &ModelParams,
    ds: &Dataset,
    split: &PairDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let queries: Vec<&String> = split.relevance.keys().collect();
    if queries.is_empty() {
        return Err(Error::Data("no judged queries in split".into()));
    }
    let threads = opts.threads.max(1).min(queries.len());
    let mut rankings: Vec<Option<QueryRankings>> = Vec::new();
    rankings.resize_with(queries.len(), || None);

    if threads == 1 {
        for (slot, q) in rankings.iter_mut().zip(&queries) {
            *slot = Some(rank_query(params, ds, q, opts)?);
        }
    } else {
        let chunk = queries.len().div_ceil(threads);
        let results: Vec<Result<Vec<QueryRankings>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|qs| {
                    scope.spawn(move || {
                        qs.iter()
                            .map(|q| rank_query(params, ds, q, opts))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut idx = 0;
        for chunk_result in results {
            for r in chunk_result? {
                rankings[idx] = Some(r);
                idx += 1;
            }
        }
    }

    let mut per_query = Vec::with_capacity(queries.len());
    let spaces = params.spaces();
    let mut per_space_lists: Vec<Vec<RankedList>> = (0..spaces).map(|_| Vec::new()).collect();
    for (q, ranking) in queries.iter().zip(rankings) {
        let ranking = ranking.expect("query scored");
        let relevant = &split.relevance[*q];
        let ap = average_precision(&ranking.aggregate, relevant)?;
        let p = precision_at_k(&ranking.aggregate, relevant, opts.precision_k);
        per_query.push(((*q).clone(), ap, p));
        for (s, l) in ranking.per_space.into_iter().enumerate() {
            per_space_lists[s].push(l);
        }
    }

    let mut report = EvalReport::from_queries(per_query, opts.precision_k);
    if spaces >= 2 {
        report.iou = Some(inter_space_iou(&per_space_lists, opts.iou_k)?);
    }
    Ok(report)
}

/// Space labels for IoU reports: dominant feature names for the
/// feature-specific topology, plain indices for parallel heads.
pub fn space_labels(ds: &Dataset, spaces: usize) -> Vec<String> {
    if spaces == ds.k1() + ds.k2() {
        ds.text_tables
            .iter()
            .map(|t| format!("text_{}", t.name))
            .chain(ds.video_tables.iter().map(|t| format!("video_{}", t.name)))
            .collect()
    } else {
        (0..spaces).map(|s| format!("space{s}")).collect()
    }
}

/// IoU matrix as CSV with space labels, for external heatmap plotting.
pub fn iou_to_csv(report: &IouReport, labels: &[String]) -> String {
    let n = report.matrix.rows();
    assert_eq!(labels.len(), n);
    let mut out = String::from("space");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&labels[i]);
        for j in 0..n {
            out.push_str(&format!(",{}", report.matrix.get(i, j)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn list(query: &str, scored: &[(&str, f64)]) -> RankedList {
        RankedList {
            query_id: query.into(),
            items: scored.iter().map(|(id, s)| (id.to_string(), *s)).collect(),
        }
    }

    fn full_sort_oracle(ids: &[String], scores: &[f64], k: usize) -> Vec<String> {
        let mut all: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().cloned()).collect();
        all.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        all.truncate(k);
        all.into_iter().map(|(id, _)| id).collect()
    }

    #[test]
    fn rank_basic_and_ties() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ranked = rank("q", &ids, &[0.9, 0.1, 0.5], 2).unwrap();
        let got: Vec<&str> = ranked.ids().collect();
        assert_eq!(got, vec!["a", "c"]);

        // all-equal scores: ids ascending
        let ranked = rank("q", &ids, &[0.5, 0.5, 0.5], 3).unwrap();
        let got: Vec<&str> = ranked.ids().collect();
        assert_eq!(got, vec!["a", "b", "c"]);

        // k > n returns all n
        let ranked = rank("q", &ids, &[0.1, 0.2, 0.3], 10).unwrap();
        assert_eq!(ranked.items.len(), 3);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let ids: Vec<String> = vec!["a".into()];
        assert!(rank("q", &ids, &[f64::NAN], 1).is_err());
    }

    #[test]
    fn rank_matches_full_sort_oracle_at_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 10_000;
        let ids: Vec<String> = (0..n).map(|i| format!("v{i:05}")).collect();
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..200) as f64) / 100.0).collect();
        for k in [20, 1000] {
            let ranked = rank("q", &ids, &scores, k).unwrap();
            let got: Vec<String> = ranked.ids().map(|s| s.to_string()).collect();
            assert_eq!(got, full_sort_oracle(&ids, &scores, k));
        }
    }

    #[test]
    fn rank_agrees_with_oracle_across_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..300);
            let k = rng.gen_range(1..=n + 5);
            let ids: Vec<String> = (0..n).map(|i| format!("x{i:04}")).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ranked = rank("q", &ids, &scores, k).unwrap();
            let got: Vec<String> = ranked.ids().map(|s| s.to_string()).collect();
            assert_eq!(got, full_sort_oracle(&ids, &scores, k));
        }
    }

    #[test]
    fn ap_definition_cases() {
        let rel: BTreeSet<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        // pattern [1,0,1,0]: (1/1 + 2/3) / 2
        let ranked = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)]);
        let ap = average_precision(&ranked, &rel).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);

        // all relevant first
        let ranked = list("q", &[("a", 0.9), ("c", 0.8), ("b", 0.7)]);
        assert_eq!(average_precision(&ranked, &rel).unwrap(), 1.0);

        // none retrieved
        let ranked = list("q", &[("x", 0.9), ("y", 0.8)]);
        assert_eq!(average_precision(&ranked, &rel).unwrap(), 0.0);

        // empty judgments -> error
        let empty = BTreeSet::new();
        assert!(average_precision(&ranked, &empty).is_err());
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n = 50;
            let ids: Vec<String> = (0..n).map(|i| format!("i{i:03}")).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rel: BTreeSet<String> = ids
                .iter()
                .filter(|_| rng.gen_bool(0.2))
                .cloned()
                .chain(std::iter::once(ids[0].clone()))
                .collect();
            let r1 = rank("q", &ids, &scores, n).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 7.0).collect();
            let r2 = rank("q", &ids, &transformed, n).unwrap();
            let a1 = average_precision(&r1, &rel).unwrap();
            let a2 = average_precision(&r2, &rel).unwrap();
            assert!((a1 - a2).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_at_k_counts_hits() {
        let rel: BTreeSet<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        let ranked = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)]);
        assert_eq!(precision_at_k(&ranked, &rel, 2), 0.5);
        assert_eq!(precision_at_k(&ranked, &rel, 4), 0.5);
        assert_eq!(precision_at_k(&ranked, &rel, 1), 1.0);
    }

    #[test]
    fn iou_identical_disjoint_and_partial() {
        let a: Vec<RankedList> = vec![list(
            "q",
            &(0..20).map(|i| ("x", 1.0 - i as f64 * 0.01)).enumerate().map(|(i, (_, s))| {
                    (Box::leak(format!("a{i}").into_boxed_str()) as &str, s)
                }).collect::<Vec<_>>(),
        )];
        // identical lists
        let report = inter_space_iou(&[a.clone(), a.clone()], 20).unwrap();
        assert_eq!(report.matrix.get(0, 1), 1.0);
        assert_eq!(report.mean_off_diagonal, 1.0);

        // disjoint lists
        let b: Vec<RankedList> = vec![list(
            "q",
            &(0..20)
                .map(|i| (Box::leak(format!("b{i}").into_boxed_str()) as &str, 1.0 - i as f64 * 0.01))
                .collect::<Vec<_>>(),
        )];
        let report = inter_space_iou(&[a.clone(), b], 20).unwrap();
        assert_eq!(report.matrix.get(0, 1), 0.0);

        // overlap of 10 between two top-20 sets: 10/30
        let c: Vec<RankedList> = vec![list(
            "q",
            &(0..20)
                .map(|i| {
                    let id = if i < 10 { format!("a{i}") } else { format!("c{i}") };
                    (Box::leak(id.into_boxed_str()) as &str, 1.0 - i as f64 * 0.01)
                })
                .collect::<Vec<_>>(),
        )];
        let report = inter_space_iou(&[a, c], 20).unwrap();
        assert!((report.matrix.get(0, 1) - 10.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let spaces = 4;
        let queries = 3;
        let lists: Vec<Vec<RankedList>> = (0..spaces)
            .map(|_| {
                (0..queries)
                    .map(|q| {
                        let scored: Vec<(String, f64)> = (0..30)
                            .map(|i| (format!("v{}", rng.gen_range(0..60)), 1.0 - i as f64 * 0.01))
                            .enumerate()
                            .map(|(i, (id, s))| (format!("{id}_{i}"), s))
                            .collect();
                        RankedList {
                            query_id: format!("q{q}"),
                            items: scored,
                        }
                    })
                    .collect()
            })
            .collect();
        let report = inter_space_iou(&lists, 20).unwrap();
        for i in 0..spaces {
            assert_eq!(report.matrix.get(i, i), 1.0);
            for j in 0..spaces {
                let v = report.matrix.get(i, j);
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, report.matrix.get(j, i));
            }
        }
        // depth < k errors
        assert!(inter_space_iou(&lists, 31).is_err());
    }

    #[test]
    fn report_csv_shapes() {
        let report = EvalReport::from_queries(
            vec![("q1".into(), 0.5, 0.25), ("q2".into(), 1.0, 0.5)],
            20,
        );
        assert!((report.map - 0.75).abs() < 1e-12);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("query_id,ap,p_at_20"));
    }
}
