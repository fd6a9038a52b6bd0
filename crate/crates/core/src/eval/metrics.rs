use std::collections::HashSet;

use crate::error::{Error, Result};

fn check_gt(gt: &HashSet<String>) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Undefined("ground truth is empty".into()));
    }
    Ok(())
}

/// Fraction of ground-truth items found in the first `k` retrieved ids.
pub fn recall_at_k(retrieved: &[String], gt: &HashSet<String>, k: usize) -> Result<f64> {
    check_gt(gt)?;
    let mut seen = HashSet::new();
    let hits = retrieved
        .iter()
        .take(k)
        .filter(|id| gt.contains(*id) && seen.insert(id.as_str()))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Binary-relevance NDCG at cutoff `k`, with ranks counted from 1.
pub fn ndcg_at_k(retrieved: &[String], gt: &HashSet<String>, k: usize) -> Result<f64> {
    check_gt(gt)?;
    let mut seen = HashSet::new();
    let dcg: f64 = retrieved
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| gt.contains(*id) && seen.insert(id.as_str()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..gt.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / ideal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn set(list: &[&str]) -> HashSet<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_computed_values() {
        let r = recall_at_k(&ids(&["a", "x", "y", "z", "w"]), &set(&["a", "b"]), 5).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(ndcg_at_k(&ids(&["s1", "s2"]), &set(&["s1"]), 2).unwrap(), 1.0);
        let n = ndcg_at_k(&ids(&["s2", "s1"]), &set(&["s1"]), 2).unwrap();
        assert!((n - 0.630_929_753_571_457_4).abs() < 1e-12);
        let n = ndcg_at_k(&ids(&["s1", "s3", "s2"]), &set(&["s1", "s2"]), 3).unwrap();
        assert!((n - 0.919_720_789_148_187_6).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_undefined() {
        assert!(matches!(recall_at_k(&ids(&["a"]), &set(&[]), 5), Err(Error::Undefined(_))));
        assert!(ndcg_at_k(&ids(&["a"]), &set(&[]), 5).is_err());
    }

    #[test]
    fn duplicates_in_ranking_count_once() {
        let r = recall_at_k(&ids(&["a", "a"]), &set(&["a", "b"]), 2).unwrap();
        assert_eq!(r, 0.5);
        let n = ndcg_at_k(&ids(&["a", "a"]), &set(&["a"]), 2).unwrap();
        assert_eq!(n, 1.0);
    }
}
