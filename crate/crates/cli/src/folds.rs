use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Case id → fold index.
pub type FoldAssignment = BTreeMap<String, usize>;

/// Patient-level split: ids are sorted, shuffled with `seed`, then dealt
/// round-robin, so fold sizes differ by at most one.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> fuseseg::Result<FoldAssignment> {
    if k < 2 || case_ids.len() < k {
        return Err(fuseseg::Error::TooFewCases { cases: case_ids.len(), folds: k });
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(fuseseg::Error::InvalidManifest("duplicate case ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect())
}

/// Case ids of fold `f` (test) and of every other fold (train).
pub fn split(folds: &FoldAssignment, f: usize) -> (Vec<String>, Vec<String>) {
    let (test, train): (Vec<_>, Vec<_>) = folds.iter().partition(|(_, &k)| k == f);
    (test.into_iter().map(|(id, _)| id.clone()).collect(), train.into_iter().map(|(id, _)| id.clone()).collect())
}
