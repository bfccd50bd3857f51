//! Evaluation protocol: per-user 8:1:1 splits, negative sampling, masked
//! top-K ranking, Recall@K / NDCG@K, the learning-rate schedule and early
//! stopping.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-user train / validation / test item lists, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: usize,
    pub items: usize,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl SplitDataset {
    pub fn held_out(&self, split: Split) -> &[Vec<usize>] {
        match split {
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// All training `(user, item)` pairs in user-major order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn train_count(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

/// Splits every user's items 8:1:1 after a seeded shuffle.
///
/// Validation and test each receive `floor(n/10)` items, at least one when
/// the user has three or more; users with fewer than three items keep
/// everything in training.
pub fn split_811(per_user: &[Vec<usize>], items: usize, seed: u64) -> Result<SplitDataset> {
    if per_user.iter().all(Vec::is_empty) {
        return Err(Error::Usage("cannot split an empty interaction set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitDataset {
        users: per_user.len(),
        items,
        train: Vec::with_capacity(per_user.len()),
        valid: Vec::with_capacity(per_user.len()),
        test: Vec::with_capacity(per_user.len()),
    };
    for (u, list) in per_user.iter().enumerate() {
        let mut list = list.clone();
        list.sort_unstable();
        list.dedup();
        if let Some(&bad) = list.iter().find(|&&i| i >= items) {
            return Err(Error::Index(format!("user {u} has item {bad} outside {items} items")));
        }
        let n = list.len();
        let held = if n >= 3 { (n / 10).max(1) } else { 0 };
        list.shuffle(&mut rng);
        let mut valid = list[..held].to_vec();
        let mut test = list[held..2 * held].to_vec();
        let mut train = list[2 * held..].to_vec();
        for v in [&mut train, &mut valid, &mut test] {
            v.sort_unstable();
        }
        out.train.push(train);
        out.valid.push(valid);
        out.test.push(test);
    }
    Ok(out)
}

/// Uniform draw from the items not in `positives` (sorted ascending).
///
/// Tries rejection sampling first and falls back to enumerating the
/// candidates after 100 misses.
pub fn sample_negative<R: Rng>(positives: &[usize], items: usize, rng: &mut R) -> Result<usize> {
    debug_assert!(positives.windows(2).all(|w| w[0] < w[1]));
    if positives.len() >= items {
        return Err(Error::Sampling(format!(
            "user interacted with all {items} items; no negative exists"
        )));
    }
    for _ in 0..100 {
        let j = rng.gen_range(0..items);
        if positives.binary_search(&j).is_err() {
            return Ok(j);
        }
    }
    let candidates: Vec<usize> = (0..items).filter(|j| positives.binary_search(j).is_err()).collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "user interacted with all {items} items; no negative exists"
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` highest scores, skipping `mask` (sorted ascending).
/// Ties go to the smaller index. Fewer than `k` items come back when the
/// mask leaves fewer.
pub fn top_k(scores: &[f64], mask: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::param("K must be at least 1"));
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|i| mask.binary_search(i).is_err()).collect();
    let cmp = by_score_then_index(scores);
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, &cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(&cmp);
    Ok(cand)
}

/// Top-`k` items for user `u` scored by `⟨E_u[u], E_i[i]⟩`.
pub fn rank_topk(e_u: &Tensor, e_i: &Tensor, u: usize, mask: &[usize], k: usize) -> Result<Vec<usize>> {
    if u >= e_u.rows() {
        return Err(Error::Index(format!("user {u} outside {} users", e_u.rows())));
    }
    if e_u.cols() != e_i.cols() {
        return Err(Error::dim(format!(
            "embedding widths {} and {} differ",
            e_u.cols(),
            e_i.cols()
        )));
    }
    top_k(&user_scores(e_u, e_i, u), mask, k)
}

fn user_scores(e_u: &Tensor, e_i: &Tensor, u: usize) -> Vec<f64> {
    let eu = e_u.row(u);
    (0..e_i.rows())
        .map(|i| eu.iter().zip(e_i.row(i)).map(|(a, b)| a * b).sum())
        .collect()
}

/// `(Recall@K, NDCG@K)` of a ranking against a non-empty relevant set,
/// with binary gains.
pub fn recall_ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::param("K must be at least 1"));
    }
    if relevant.is_empty() {
        return Err(Error::Usage("metrics need at least one relevant item".into()));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (p, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((p + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Ok((hits as f64 / relevant.len() as f64, dcg / idcg))
}

/// Mean metrics at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Mean Recall@K and NDCG@K over the users with held-out items in `split`,
/// ranking all items except each user's training positives.
pub fn evaluate(e_u: &Tensor, e_i: &Tensor, data: &SplitDataset, split: Split, ks: &[usize]) -> Result<Vec<AtK>> {
    if e_u.rows() != data.users || e_i.rows() != data.items {
        return Err(Error::dim(format!(
            "embeddings cover {} users x {} items, dataset has {} x {}",
            e_u.rows(),
            e_i.rows(),
            data.users,
            data.items
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::param(format!("cutoffs {ks:?} must be non-empty and positive")));
    }
    let kmax = *ks.iter().max().unwrap();
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut counted = 0usize;
    for (u, relevant) in data.held_out(split).iter().enumerate() {
        if relevant.is_empty() {
            continue;
        }
        let ranked = rank_topk(e_u, e_i, u, &data.train[u], kmax)?;
        for (slot, &k) in sums.iter_mut().zip(ks) {
            let (r, n) = recall_ndcg_at_k(&ranked, relevant, k)?;
            slot.0 += r;
            slot.1 += n;
        }
        counted += 1;
    }
    let denom = counted.max(1) as f64;
    Ok(ks
        .iter()
        .zip(sums)
        .map(|(&k, (r, n))| AtK {
            k,
            recall: r / denom,
            ndcg: n / denom,
        })
        .collect())
}

/// `base · 0.96^floor(epoch / 50)`.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.96f64.powi((epoch / 50) as i32)
}

/// Patience-based early stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_improvement: 0,
            patience,
        }
    }

    /// Records the metric of `epoch`; returns whether training should stop.
    /// Only a strict improvement resets the counter.
    pub fn update(&mut self, epoch: usize, metric: f64) -> Result<bool> {
        if !metric.is_finite() {
            return Err(Error::Numerical(format!("monitored metric is {metric}")));
        }
        if metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        Ok(self.since_improvement >= self.patience)
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }
}

/// Average loss terms over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub bpr: f64,
    pub mmd: f64,
    pub infonce: f64,
    pub reg: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub metrics: Vec<AtK>,
    pub losses: LossSummary,
    pub wall_ms: u64,
    /// Set by ablation runs.
    pub variant: Option<String>,
}

impl MetricsRecord {
    pub fn get(&self, k: usize) -> Option<AtK> {
        self.metrics.iter().copied().find(|m| m.k == k)
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("epoch".into(), json!(self.epoch));
        obj.insert("split".into(), json!(self.split.name()));
        if let Some(v) = &self.variant {
            obj.insert("variant".into(), json!(v));
        }
        for m in &self.metrics {
            obj.insert(format!("recall@{}", m.k), json!(m.recall));
        }
        for m in &self.metrics {
            obj.insert(format!("ndcg@{}", m.k), json!(m.ndcg));
        }
        obj.insert(
            "losses".into(),
            json!({
                "bpr": self.losses.bpr,
                "mmd": self.losses.mmd,
                "infonce": self.losses.infonce,
                "reg": self.losses.reg,
            }),
        );
        obj.insert("wall_ms".into(), json!(self.wall_ms));
        Value::Object(obj)
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_ten_is_eight_one_one() {
        let per_user = vec![(0..10).collect::<Vec<_>>(), vec![3, 4], vec![0, 1, 2]];
        let s = split_811(&per_user, 10, 0).unwrap();
        assert_eq!((s.train[0].len(), s.valid[0].len(), s.test[0].len()), (8, 1, 1));
        assert_eq!((s.train[1].len(), s.valid[1].len(), s.test[1].len()), (2, 0, 0));
        assert_eq!((s.train[2].len(), s.valid[2].len(), s.test[2].len()), (1, 1, 1));
        assert_eq!(s, split_811(&per_user, 10, 0).unwrap());
        assert!(split_811(&[vec![], vec![]], 3, 0).is_err());
    }

    #[test]
    fn negative_is_forced_when_one_item_is_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_negative(&[0], 2, &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_negative(&[0, 1], 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn negatives_are_uniform() {
        // chi-square style check: every count within 3 sigma of expectation
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let positives = [1, 4, 5, 8];
        let items = 10;
        let draws = 100_000;
        let mut counts = vec![0usize; items];
        for _ in 0..draws {
            counts[sample_negative(&positives, items, &mut rng).unwrap()] += 1;
        }
        let p = 1.0 / 6.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if positives.contains(&j) {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - mean).abs() < 3.0 * sd, "item {j}: {c}");
            }
        }
    }

    #[test]
    fn scan_fallback_is_used_for_dense_users() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let positives: Vec<usize> = (0..999).collect();
        for _ in 0..50 {
            assert_eq!(sample_negative(&positives, 1000, &mut rng).unwrap(), 999);
        }
    }

    #[test]
    fn ranking_ties_and_masks() {
        let scores = vec![1.0; 6];
        assert_eq!(top_k(&scores, &[], 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(top_k(&scores, &[0, 2], 3).unwrap(), vec![1, 3, 4]);
        assert_eq!(top_k(&[0.1, 0.9, 0.5], &[0, 1], 5).unwrap(), vec![2]);
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.9], &[], 3).unwrap(), vec![1, 3, 2]);
        assert!(top_k(&scores, &[], 0).is_err());
    }

    #[test]
    fn metric_spot_values() {
        let (r, n) = recall_ndcg_at_k(&[5, 7, 1], &[7], 10).unwrap();
        assert_eq!(r, 1.0);
        assert!((n - 1.0 / 3f64.log2()).abs() < 1e-12);
        let (r, n) = recall_ndcg_at_k(&[2, 1, 9], &[1, 2], 3).unwrap();
        assert_eq!((r, n), (1.0, 1.0));
        let (r, n) = recall_ndcg_at_k(&[0, 1, 2], &[4], 3).unwrap();
        assert_eq!((r, n), (0.0, 0.0));
        assert!(recall_ndcg_at_k(&[0], &[], 3).is_err());
        assert!(recall_ndcg_at_k(&[0], &[0], 0).is_err());
    }

    #[test]
    fn lr_schedule_steps_every_fifty_epochs() {
        assert_eq!(lr_schedule(0, 0.001), 0.001);
        assert_eq!(lr_schedule(49, 0.001), 0.001);
        assert!((lr_schedule(100, 0.001) - 0.0009216).abs() < 1e-15);
    }

    #[test]
    fn early_stopping() {
        let mut s = EarlyStopState::new(20);
        for e in 0..100 {
            assert!(!s.update(e, e as f64).unwrap());
        }
        let mut s = EarlyStopState::new(20);
        s.update(0, 0.5).unwrap();
        for e in 1..20 {
            assert!(!s.update(e, 0.5).unwrap());
        }
        assert!(s.update(20, 0.5).unwrap());
        let mut s = EarlyStopState::new(20);
        s.update(0, 0.5).unwrap();
        for e in 1..19 {
            s.update(e, 0.4).unwrap();
        }
        s.update(19, 0.6).unwrap();
        assert_eq!((s.since_improvement, s.best_epoch), (0, Some(19)));
        assert!(s.update(20, f64::NAN).is_err());
    }

    #[test]
    fn record_json_schema() {
        let rec = MetricsRecord {
            epoch: 3,
            split: Split::Valid,
            metrics: vec![
                AtK {
                    k: 10,
                    recall: 0.1,
                    ndcg: 0.2,
                },
                AtK {
                    k: 20,
                    recall: 0.3,
                    ndcg: 0.4,
                },
            ],
            losses: LossSummary::default(),
            wall_ms: 12,
            variant: None,
        };
        let keys: Vec<String> = rec.to_json().as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            [
                "epoch",
                "split",
                "recall@10",
                "recall@20",
                "ndcg@10",
                "ndcg@20",
                "losses",
                "wall_ms"
            ]
        );
        let v: Value = serde_json::from_str(&rec.to_line()).unwrap();
        assert_eq!(v["recall@20"], 0.3);
        assert_eq!(v["losses"]["bpr"], 0.0);
    }
}
