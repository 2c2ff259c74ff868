use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
    pub strata: Vec<String>,
}

/// Training members for a stratum of size `n`: `floor(ratio * n)`, kept
/// within `[1, n - 1]` so both sides are populated.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64 + 1e-9).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Splits `(id, stratum)` pairs so every stratum keeps the same train
/// fraction. Members are sorted by id, then shuffled by a ChaCha20 stream
/// per stratum, so the plan depends only on the input set and `seed`.
pub fn stratified_split(items: &[(String, String)], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, s) in items {
        strata.entry(s.as_str()).or_default().push(id.as_str());
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (stream, (name, members)) in strata.iter_mut().enumerate() {
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "stratum `{name}` has {} member(s); at least 2 are needed",
                members.len()
            )));
        }
        members.sort_unstable();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        members.shuffle(&mut rng);
        let n_train = train_count(members.len(), ratio);
        train_ids.extend(members[..n_train].iter().map(|s| s.to_string()));
        test_ids.extend(members[n_train..].iter().map(|s| s.to_string()));
    }
    train_ids.sort();
    test_ids.sort();
    Ok(SplitPlan {
        train_ids,
        test_ids,
        ratio,
        seed,
        strata: strata.keys().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(counts: &[(&str, usize)]) -> Vec<(String, String)> {
        counts
            .iter()
            .flat_map(|(s, n)| (0..*n).map(move |i| (format!("{s}{i:02}"), s.to_string())))
            .collect()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(train_count(10, 0.7), 7);
        assert_eq!(train_count(28, 0.7), 19);
        assert_eq!(train_count(24, 0.7), 16);
        assert_eq!(train_count(2, 0.7), 1);
        assert_eq!(train_count(3, 0.1), 1);
        assert_eq!(train_count(3, 0.99), 2);
    }

    #[test]
    fn reference_counts() {
        let p = stratified_split(&items(&[("healthy", 10), ("drifted", 24)]), 0.7, 1).unwrap();
        assert_eq!((p.train_ids.len(), p.test_ids.len()), (23, 11));
        let p = stratified_split(&items(&[("healthy", 10), ("drifted", 28)]), 0.7, 1).unwrap();
        assert_eq!(p.train_ids.len(), 26);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let it = items(&[("a", 7), ("b", 9)]);
        let p = stratified_split(&it, 0.7, 5).unwrap();
        assert_eq!(p, stratified_split(&it, 0.7, 5).unwrap());
        let mut rev = it.clone();
        rev.reverse();
        assert_eq!(p, stratified_split(&rev, 0.7, 5).unwrap());
        assert!(p.train_ids.iter().all(|t| !p.test_ids.contains(t)));
        assert_eq!(p.train_ids.len() + p.test_ids.len(), 16);
    }

    #[test]
    fn singleton_stratum_fails() {
        assert!(matches!(
            stratified_split(&items(&[("a", 1), ("b", 5)]), 0.7, 0),
            Err(Error::Stratification(_))
        ));
    }
}
