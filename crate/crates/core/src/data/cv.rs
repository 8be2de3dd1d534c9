use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;

use super::seeded_permutation;

/// One (train fold, test half) pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvRun {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Repeated two-fold cross-validation over the predefined splits. Each repeat
/// permutes the training set into two folds and the test set into two
/// halves; fold `k` is evaluated on half `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub repeats: usize,
    pub folds: usize,
    pub seed: u64,
    pub runs: Vec<CvRun>,
}

fn halves(n: usize, seed: u64) -> [Vec<usize>; 2] {
    let p = seeded_permutation(n, seed);
    let mid = n / 2;
    let mut a = p[..mid].to_vec();
    let mut b = p[mid..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    [a, b]
}

pub fn make_cv_plan(train_len: usize, test_len: usize, repeats: usize, seed: u64) -> CvPlan {
    let mut runs = Vec::with_capacity(repeats * 2);
    for r in 0..repeats {
        let tr = halves(train_len, derive_seed(seed, "cv-train", r as u64));
        let te = halves(test_len, derive_seed(seed, "cv-test", r as u64));
        for (fold, (train, test)) in tr.into_iter().zip(te).enumerate() {
            runs.push(CvRun {
                repeat: r,
                fold,
                train,
                test,
            });
        }
    }
    CvPlan {
        repeats,
        folds: 2,
        seed,
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_runs_partitioning_both_splits() {
        let plan = make_cv_plan(101, 40, 5, 3);
        assert_eq!(plan.runs.len(), 10);
        for pair in plan.runs.chunks(2) {
            let mut train: Vec<_> = pair.iter().flat_map(|r| r.train.clone()).collect();
            train.sort_unstable();
            assert_eq!(train, (0..101).collect::<Vec<_>>());
            let mut test: Vec<_> = pair.iter().flat_map(|r| r.test.clone()).collect();
            test.sort_unstable();
            assert_eq!(test, (0..40).collect::<Vec<_>>());
            assert_eq!(pair[0].test.len(), 20);
        }
        assert_eq!(plan, make_cv_plan(101, 40, 5, 3));
        assert_ne!(plan.runs[0].train, plan.runs[2].train);
    }
}
