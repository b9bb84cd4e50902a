//! Label-stratified splits and folds.
//!
//! Both sort each class by id before shuffling, so a plan depends only on
//! the set of (id, label) pairs and the seed, never on input order.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, Labeled};
use crate::error::{Error, Result};

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ids per class, each sorted then shuffled under `seed`.
fn shuffled_by_class<T: Labeled>(items: &[T], seed: u64) -> Result<Vec<(Label, Vec<String>)>> {
    let mut seen = HashSet::with_capacity(items.len());
    let mut groups: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for it in items {
        if !seen.insert(it.id()) {
            return Err(Error::DuplicateId(it.id().to_string()));
        }
        groups.entry(it.label()).or_default().push(it.id().to_string());
    }
    Ok(groups
        .into_iter()
        .map(|(label, mut ids)| {
            ids.sort();
            ids.shuffle(&mut rng_for(seed, label as u64));
            (label, ids)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_fraction: f64,
    pub assignments: BTreeMap<String, Partition>,
}

impl SplitPlan {
    pub fn apply<T: Labeled + Clone>(&self, items: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for it in items {
            match self.assignments.get(it.id()) {
                Some(Partition::Train) => train.push(it.clone()),
                Some(Partition::Test) => test.push(it.clone()),
                None => return Err(Error::IdMismatch(format!("{} not in split plan", it.id()))),
            }
        }
        train.sort_by(|a, b| a.id().cmp(b.id()));
        test.sort_by(|a, b| a.id().cmp(b.id()));
        Ok((train, test))
    }
}

/// Per class, `round(n * test_fraction)` members go to test, clamped so that
/// both sides keep at least one member of every class.
pub fn split_plan<T: Labeled>(items: &[T], test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} not in (0, 1)"
        )));
    }
    let groups = shuffled_by_class(items, seed)?;
    if groups.len() < 2 {
        return Err(Error::TooFewExamples("both classes are required".into()));
    }
    let mut assignments = BTreeMap::new();
    for (label, ids) in groups {
        let n = ids.len();
        if n < 2 {
            return Err(Error::TooFewExamples(format!("class {label} has {n} member(s)")));
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        for (i, id) in ids.into_iter().enumerate() {
            let part = if i < n_test {
                Partition::Test
            } else {
                Partition::Train
            };
            assignments.insert(id, part);
        }
    }
    Ok(SplitPlan {
        seed,
        test_fraction,
        assignments,
    })
}

/// Stratified train/test split; both halves come back sorted by id.
pub fn train_test_split<T: Labeled + Clone>(
    items: &[T],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    split_plan(items, test_fraction, seed)?.apply(items)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// `(train, held_out)` for one fold; both sorted by id.
    pub fn split<T: Labeled + Clone>(&self, items: &[T], fold: usize) -> Result<(Vec<T>, Vec<T>)> {
        if fold >= self.k {
            return Err(Error::InvalidArgument(format!("fold {fold} >= k {}", self.k)));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for it in items {
            match self.assignments.get(it.id()) {
                Some(&f) if f == fold => test.push(it.clone()),
                Some(_) => train.push(it.clone()),
                None => return Err(Error::IdMismatch(format!("{} not in fold plan", it.id()))),
            }
        }
        train.sort_by(|a, b| a.id().cmp(b.id()));
        test.sort_by(|a, b| a.id().cmp(b.id()));
        Ok((train, test))
    }
}

/// Stratified k-fold assignment.
///
/// Each class is dealt round-robin, continuing from the fold where the
/// previous class stopped, so per-class and total fold sizes both differ by
/// at most one.
pub fn make_folds<T: Labeled>(items: &[T], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::TooFewFolds(k));
    }
    let groups = shuffled_by_class(items, seed)?;
    if groups.is_empty() {
        return Err(Error::TooFewExamples("no examples".into()));
    }
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for (label, ids) in groups {
        if ids.len() < k {
            return Err(Error::TooFewExamples(format!(
                "class {label} has {} members for {k} folds",
                ids.len()
            )));
        }
        for id in ids {
            assignments.insert(id, next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan {
        seed,
        k,
        assignments,
    })
}

/// Stratified subsample of `n` items. Class quotas use largest-remainder
/// allocation so they sum to exactly `n`.
pub fn stratified_subsample<T: Labeled + Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > items.len() {
        return Err(Error::InvalidArgument(format!(
            "subsample of {n} from {} items",
            items.len()
        )));
    }
    let groups = shuffled_by_class(items, seed)?;
    let total = items.len() as f64;
    let exact: Vec<f64> = groups
        .iter()
        .map(|(_, ids)| ids.len() as f64 * n as f64 / total)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if quota[i] < groups[i].1.len() {
            quota[i] += 1;
            left -= 1;
        }
    }
    let chosen: HashSet<&str> = groups
        .iter()
        .zip(&quota)
        .flat_map(|((_, ids), &q)| ids.iter().take(q).map(String::as_str))
        .collect();
    let mut out: Vec<T> = items
        .iter()
        .filter(|it| chosen.contains(it.id()))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(neg: usize, pos: usize) -> Vec<(String, Label)> {
        (0..neg)
            .map(|i| (format!("n{i:04}"), Label::NonOffensive))
            .chain((0..pos).map(|i| (format!("o{i:04}"), Label::Offensive)))
            .collect()
    }

    #[test]
    fn smid_scale_split_sizes() {
        let all = items(712, 962);
        let (train, test) = train_test_split(&all, 0.10, 7).unwrap();
        assert!(test.len() == 167 || test.len() == 168, "{}", test.len());
        assert!((1506..=1507).contains(&train.len()));
        assert_eq!(train.len() + test.len(), all.len());
    }

    #[test]
    fn balanced_split_is_exact() {
        let all = items(50, 50);
        let (_, test) = train_test_split(&all, 0.10, 1).unwrap();
        let off = test.iter().filter(|x| x.1 == Label::Offensive).count();
        assert_eq!(off, 5);
        assert_eq!(test.len() - off, 5);
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let all = items(30, 20);
        let a = train_test_split(&all, 0.2, 3).unwrap();
        let b = train_test_split(&all, 0.2, 3).unwrap();
        assert_eq!(a, b);
        let mut rev = all.clone();
        rev.reverse();
        assert_eq!(train_test_split(&rev, 0.2, 3).unwrap(), a);
        assert_ne!(train_test_split(&all, 0.2, 4).unwrap(), a);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            train_test_split(&items(1, 10), 0.1, 0),
            Err(Error::TooFewExamples(_))
        ));
        assert!(matches!(
            train_test_split(&items(0, 10), 0.1, 0),
            Err(Error::TooFewExamples(_))
        ));
        assert!(train_test_split(&items(5, 5), 0.0, 0).is_err());
        assert!(train_test_split(&items(5, 5), 1.0, 0).is_err());
    }

    #[test]
    fn ten_items_five_folds() {
        let plan = make_folds(&items(5, 5), 5, 0).unwrap();
        for f in 0..5 {
            assert_eq!(plan.fold_ids(f).len(), 2);
        }
    }

    #[test]
    fn smid_scale_folds() {
        let all = items(712, 962);
        let plan = make_folds(&all, 10, 11).unwrap();
        for f in 0..10 {
            let (_, held) = plan.split(&all, f).unwrap();
            let off = held.iter().filter(|x| x.1 == Label::Offensive).count();
            let non = held.len() - off;
            assert!((95..=97).contains(&off), "fold {f}: {off}");
            assert!((70..=72).contains(&non), "fold {f}: {non}");
        }
    }

    #[test]
    fn fold_errors() {
        assert!(matches!(make_folds(&items(5, 5), 1, 0), Err(Error::TooFewFolds(1))));
        assert!(matches!(
            make_folds(&items(3, 10), 5, 0),
            Err(Error::TooFewExamples(_))
        ));
        let plan = make_folds(&items(5, 5), 5, 0).unwrap();
        assert!(plan.split(&items(5, 5), 5).is_err());
    }

    #[test]
    fn subsample_quota() {
        let all = items(641, 865);
        let sub = stratified_subsample(&all, 60, 2).unwrap();
        assert_eq!(sub.len(), 60);
        let off = sub.iter().filter(|x| x.1 == Label::Offensive).count();
        // 60 * 865 / 1506 = 34.46
        assert_eq!(off, 34);
        assert!(stratified_subsample(&all, 5000, 2).is_err());
        assert!(stratified_subsample(&all, 0, 2).unwrap().is_empty());
    }

    #[test]
    fn plans_serialize() {
        let plan = make_folds(&items(4, 4), 2, 9).unwrap();
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json["seed"], 9);
        assert_eq!(json["k"], 2);
        assert!(json["assignments"].is_object());
        let back: FoldPlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }

    proptest! {
        #[test]
        fn folds_partition_stratified(
            neg in 2usize..60, pos in 2usize..60, k in 2usize..6, seed in any::<u64>()
        ) {
            prop_assume!(neg >= k && pos >= k);
            let all = items(neg, pos);
            let plan = make_folds(&all, k, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), all.len());
            let mut sizes = vec![0usize; k];
            let mut per_class = vec![[0usize; 2]; k];
            for (id, label) in &all {
                let f = plan.assignments[id];
                sizes[f] += 1;
                per_class[f][*label as usize] += 1;
            }
            let spread = |v: Vec<usize>| v.iter().max().unwrap() - v.iter().min().unwrap();
            prop_assert!(spread(sizes) <= 1);
            prop_assert!(spread(per_class.iter().map(|c| c[0]).collect()) <= 1);
            prop_assert!(spread(per_class.iter().map(|c| c[1]).collect()) <= 1);

            let mut shuffled = all.clone();
            shuffled.rotate_left(seed as usize % all.len());
            prop_assert_eq!(make_folds(&shuffled, k, seed).unwrap(), plan);
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(
            neg in 2usize..80, pos in 2usize..80, frac in 0.05f64..0.95, seed in any::<u64>()
        ) {
            let all = items(neg, pos);
            let (train, test) = train_test_split(&all, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), all.len());
            let t: HashSet<_> = train.iter().map(|x| &x.0).collect();
            prop_assert!(test.iter().all(|x| !t.contains(&x.0)));
        }
    }
}
