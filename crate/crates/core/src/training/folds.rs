use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
}

/// Seeded shuffle, then `k` contiguous validation blocks; the first
/// `n mod k` blocks take one extra case. Training ids keep input order.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if case_ids.len() < k {
        return Err(Error::config(format!(
            "{k} folds requested for only {} cases",
            case_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = case_ids.len();
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold_id in 0..k {
        let len = base + usize::from(fold_id < extra);
        let mut in_valid = vec![false; n];
        for &i in &order[start..start + len] {
            in_valid[i] = true;
        }
        folds.push(FoldSpec {
            fold_id,
            valid_ids: order[start..start + len].iter().map(|&i| case_ids[i].clone()).collect(),
            train_ids: (0..n).filter(|&i| !in_valid[i]).map(|i| case_ids[i].clone()).collect(),
        });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    #[test]
    fn brats_sizes() {
        let f = make_folds(&ids(369), 5, 1).unwrap();
        let sizes: Vec<_> = f.iter().map(|f| f.valid_ids.len()).collect();
        assert_eq!(sizes, vec![74, 74, 74, 74, 73]);
        assert!(f.iter().all(|f| f.train_ids.len() + f.valid_ids.len() == 369));
    }

    #[test]
    fn even_split_and_determinism() {
        let a = make_folds(&ids(10), 5, 9).unwrap();
        assert!(a.iter().all(|f| f.valid_ids.len() == 2));
        assert_eq!(a, make_folds(&ids(10), 5, 9).unwrap());
        assert_ne!(a, make_folds(&ids(10), 5, 10).unwrap());
    }

    #[test]
    fn too_many_folds() {
        assert!(make_folds(&ids(3), 5, 0).is_err());
        assert!(make_folds(&ids(3), 1, 0).is_err());
    }
}
