//! Two-rule ranking filter over generated candidates.
//!
//! A candidate should match its own prompt (faithfulness) and should not
//! look like any interest class it is not supposed to depict. The two are
//! combined linearly:
//!
//! ```text
//! composite = faithfulness - class_penalty_weight * max(class similarities)
//! ```
//!
//! where the max skips the candidate's own class and is 0 over an empty set.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{Client, PngBytes};
use crate::prompting::ClassLabel;
use crate::{Error, Result};

pub const DEFAULT_CLASS_PROMPT: &str = "a photo of <object>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
    #[serde(default = "default_weight")]
    pub class_penalty_weight: f64,
    #[serde(default = "default_class_prompt")]
    pub class_prompt_pattern: String,
}

fn default_weight() -> f64 {
    1.0
}

fn default_class_prompt() -> String {
    DEFAULT_CLASS_PROMPT.to_string()
}

impl SelectionPolicy {
    pub fn keep_k(k: usize) -> Self {
        SelectionPolicy {
            keep_k: Some(k),
            keep_fraction: None,
            class_penalty_weight: default_weight(),
            class_prompt_pattern: default_class_prompt(),
        }
    }

    pub fn keep_fraction(fraction: f64) -> Self {
        SelectionPolicy {
            keep_k: None,
            keep_fraction: Some(fraction),
            class_penalty_weight: default_weight(),
            class_prompt_pattern: default_class_prompt(),
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.class_penalty_weight = weight;
        self
    }

    pub fn with_class_prompt(mut self, pattern: impl Into<String>) -> Self {
        self.class_prompt_pattern = pattern.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.keep_k, self.keep_fraction) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidPolicy(
                    "set exactly one of keep_k and keep_fraction, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidPolicy(
                    "one of keep_k and keep_fraction is required".into(),
                ))
            }
            (Some(0), None) => return Err(Error::InvalidPolicy("keep_k must be >= 1".into())),
            (None, Some(f)) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::InvalidPolicy(format!(
                    "keep_fraction must be in (0, 1], got {f}"
                )))
            }
            _ => {}
        }
        if !(self.class_penalty_weight.is_finite() && self.class_penalty_weight >= 0.0) {
            return Err(Error::InvalidPolicy(
                "class_penalty_weight must be finite and >= 0".into(),
            ));
        }
        if self.class_prompt_pattern.matches("<object>").count() != 1 {
            return Err(Error::InvalidPolicy(
                "class_prompt_pattern must contain <object> exactly once".into(),
            ));
        }
        Ok(())
    }

    /// How many of `n` candidates survive.
    pub fn selected_count(&self, n: usize) -> usize {
        match (self.keep_k, self.keep_fraction) {
            (Some(k), _) => k.min(n),
            (None, Some(f)) => fraction_count(f, n),
            (None, None) => n,
        }
    }

    pub fn class_prompt(&self, label: &ClassLabel) -> String {
        self.class_prompt_pattern.replacen("<object>", &label.name, 1)
    }
}

/// `ceil(fraction * n)`, treating products within 1e-9 of an integer as
/// exact so that `0.95 * 600` keeps 570 rather than 571.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let count = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (count.max(0.0) as usize).min(n)
}

/// Provenance key used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateId {
    pub seed: u64,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub id: CandidateId,
    pub image: PngBytes,
    pub prompt: String,
    /// Class this candidate is meant to depict, excluded from the penalty.
    pub own_class: Option<String>,
    pub faithfulness: f64,
    pub class_similarities: BTreeMap<String, f64>,
}

impl ScoredImage {
    pub fn max_class_similarity(&self) -> f64 {
        max_other_similarity(&self.class_similarities, self.own_class.as_deref())
    }
}

fn max_other_similarity(sims: &BTreeMap<String, f64>, exclude: Option<&str>) -> f64 {
    sims.iter()
        .filter(|(name, _)| Some(name.as_str()) != exclude)
        .map(|(_, &s)| s)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        .unwrap_or(0.0)
}

/// `faithfulness - weight * max(similarities to classes other than `exclude`)`.
pub fn composite_score(
    faithfulness: f64,
    class_similarities: &BTreeMap<String, f64>,
    weight: f64,
    exclude: Option<&str>,
) -> f64 {
    faithfulness - weight * max_other_similarity(class_similarities, exclude)
}

/// One row of a selection report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedRow {
    pub candidate_id: String,
    pub faithfulness: f64,
    pub max_class_sim: f64,
    pub composite: f64,
    pub kept: bool,
}

fn order(a: (f64, CandidateId), b: (f64, CandidateId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Sort by composite score descending, ties by `(seed, index)` ascending,
/// and keep the policy's share. Returns the kept candidates in rank order
/// plus a report row for every candidate in rank order.
pub fn rank_with_report(
    candidates: Vec<ScoredImage>,
    policy: &SelectionPolicy,
) -> Result<(Vec<ScoredImage>, Vec<RankedRow>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyBatch);
    }
    policy.validate()?;
    let keep = policy.selected_count(candidates.len());
    let mut scored: Vec<(f64, ScoredImage)> = candidates
        .into_iter()
        .map(|c| {
            let s = composite_score(
                c.faithfulness,
                &c.class_similarities,
                policy.class_penalty_weight,
                c.own_class.as_deref(),
            );
            (s, c)
        })
        .collect();
    scored.sort_by(|a, b| order((a.0, a.1.id), (b.0, b.1.id)));
    let report = scored
        .iter()
        .enumerate()
        .map(|(rank, (s, c))| RankedRow {
            candidate_id: format!("{}_{}", c.id.seed, c.id.index),
            faithfulness: c.faithfulness,
            max_class_sim: c.max_class_similarity(),
            composite: *s,
            kept: rank < keep,
        })
        .collect();
    let kept = scored.into_iter().take(keep).map(|(_, c)| c).collect();
    Ok((kept, report))
}

pub fn rank_and_select(candidates: Vec<ScoredImage>, policy: &SelectionPolicy) -> Result<Vec<ScoredImage>> {
    rank_with_report(candidates, policy).map(|(kept, _)| kept)
}

/// Score each image against `[prompt] ++ [class prompt for each class]`.
/// Calls fan out over the rayon pool; errors carry the batch position.
pub fn score_batch(
    images: Vec<(CandidateId, PngBytes)>,
    prompt: &str,
    own_class: Option<&str>,
    interest: &[ClassLabel],
    policy: &SelectionPolicy,
    gateway: &Client,
) -> Result<Vec<ScoredImage>> {
    let mut texts = vec![prompt.to_string()];
    texts.extend(interest.iter().map(|c| policy.class_prompt(c)));
    images
        .into_par_iter()
        .enumerate()
        .map(|(position, (id, image))| {
            let scores = gateway
                .score_image_text(&image, &texts)
                .map_err(|e| Error::AtPosition {
                    position,
                    source: Box::new(e),
                })?;
            let class_similarities = interest
                .iter()
                .zip(&scores[1..])
                .map(|(c, &s)| (c.name.clone(), s))
                .collect();
            Ok(ScoredImage {
                id,
                image,
                prompt: prompt.to_string(),
                own_class: own_class.map(String::from),
                faithfulness: scores[0],
                class_similarities,
            })
        })
        .collect()
}

/// Write the per-batch audit CSV.
pub fn write_report(path: &Path, rows: &[RankedRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::prompting::label_set;
    use proptest::prelude::*;

    fn cand(seed: u64, index: u32, faith: f64, sims: &[(&str, f64)], own: Option<&str>) -> ScoredImage {
        ScoredImage {
            id: CandidateId { seed, index },
            image: PngBytes(vec![]),
            prompt: String::new(),
            own_class: own.map(String::from),
            faithfulness: faith,
            class_similarities: sims.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Position of each candidate = number of candidates that beat it.
    fn oracle_selection(cands: &[ScoredImage], policy: &SelectionPolicy) -> Vec<CandidateId> {
        let score = |c: &ScoredImage| {
            let max = c
                .class_similarities
                .iter()
                .filter(|(k, _)| Some(k.as_str()) != c.own_class.as_deref())
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let max = if max == f64::NEG_INFINITY { 0.0 } else { max };
            c.faithfulness - policy.class_penalty_weight * max
        };
        let keep = policy.selected_count(cands.len());
        let mut slots: Vec<Option<CandidateId>> = vec![None; cands.len()];
        for c in cands {
            let beaten_by = cands
                .iter()
                .filter(|o| score(o) > score(c) || (score(o) == score(c) && o.id < c.id))
                .count();
            slots[beaten_by] = Some(c.id);
        }
        slots.into_iter().take(keep).map(|s| s.unwrap()).collect()
    }

    #[test]
    fn composite_examples() {
        let sims: BTreeMap<String, f64> = [("cat".to_string(), 0.2), ("dog".to_string(), 0.9)].into();
        let s = composite_score(0.9, &sims, 1.0, Some("dog"));
        assert!((s - 0.7).abs() < 1e-12);
        assert_eq!(composite_score(0.9, &sims, 0.0, None), 0.9);
        assert_eq!(composite_score(0.4, &BTreeMap::new(), 1.0, None), 0.4);
    }

    #[test]
    fn policy_validation() {
        assert!(SelectionPolicy::keep_k(3).validate().is_ok());
        assert!(SelectionPolicy::keep_fraction(1.0).validate().is_ok());
        let both = SelectionPolicy { keep_fraction: Some(0.5), ..SelectionPolicy::keep_k(3) };
        assert!(matches!(both.validate(), Err(Error::InvalidPolicy(_))));
        let neither = SelectionPolicy { keep_k: None, ..SelectionPolicy::keep_k(3) };
        assert!(neither.validate().is_err());
        assert!(SelectionPolicy::keep_fraction(0.0).validate().is_err());
        assert!(SelectionPolicy::keep_fraction(1.2).validate().is_err());
        assert!(SelectionPolicy::keep_k(1).with_weight(-1.0).validate().is_err());
        assert!(SelectionPolicy::keep_k(1).with_class_prompt("no slot").validate().is_err());
    }

    #[test]
    fn full_scale_counts() {
        assert_eq!(SelectionPolicy::keep_k(200).selected_count(500), 200);
        assert_eq!(SelectionPolicy::keep_fraction(0.95).selected_count(600), 570);
        assert_eq!(16 * SelectionPolicy::keep_fraction(0.95).selected_count(600), 9_120);
        assert_eq!(fraction_count(0.5, 3), 2);
        assert_eq!(fraction_count(1.0, 7), 7);
    }

    #[test]
    fn keep_all_is_a_score_permutation() {
        let cands: Vec<_> = (0..5).map(|i| cand(0, i, i as f64 / 10.0, &[], None)).collect();
        let kept = rank_and_select(cands, &SelectionPolicy::keep_k(5)).unwrap();
        let order: Vec<u32> = kept.iter().map(|c| c.id.index).collect();
        assert_eq!(order, [4, 3, 2, 1, 0]);
        let kept = rank_and_select(vec![cand(0, 0, 0.1, &[], None)], &SelectionPolicy::keep_k(9)).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn ties_break_by_provenance() {
        let cands = vec![cand(2, 0, 0.5, &[], None), cand(1, 3, 0.5, &[], None), cand(1, 1, 0.5, &[], None)];
        let kept = rank_and_select(cands, &SelectionPolicy::keep_k(2)).unwrap();
        assert_eq!(kept[0].id, CandidateId { seed: 1, index: 1 });
        assert_eq!(kept[1].id, CandidateId { seed: 1, index: 3 });
    }

    #[test]
    fn empty_batch_errors() {
        assert!(matches!(rank_and_select(vec![], &SelectionPolicy::keep_k(1)), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mock_scoring_penalises_class_mentions() {
        let mock = MockBackend::default();
        let gateway = Client::mock(mock.clone());
        let labels = label_set(&["dog", "cat", "train"]).unwrap();
        let policy = SelectionPolicy::keep_k(1);
        let clean = mock.render_png("blue sky", 1, 0, 64, 64).unwrap();
        let scored = score_batch(
            vec![(CandidateId { seed: 1, index: 0 }, clean)],
            "blue sky",
            None,
            &labels,
            &policy,
            &gateway,
        )
        .unwrap();
        assert_eq!(scored[0].faithfulness, 1.0);
        assert!(scored[0].class_similarities.values().all(|&s| s == 0.0));

        let dirty = mock.render_png("blue sky with a dog", 1, 1, 64, 64).unwrap();
        let clean = mock.render_png("blue sky", 1, 0, 64, 64).unwrap();
        let scored = score_batch(
            vec![(CandidateId { seed: 1, index: 1 }, dirty), (CandidateId { seed: 1, index: 0 }, clean)],
            "blue sky",
            None,
            &labels,
            &policy,
            &gateway,
        )
        .unwrap();
        assert!(scored[0].class_similarities["dog"] > 0.0);
        let kept = rank_and_select(scored, &policy).unwrap();
        assert_eq!(kept[0].id.index, 0);
    }

    #[test]
    fn fixture_batch_of_sixteen_matches_oracle() {
        let mock = MockBackend::default().with_labels(&["dog", "cat"]);
        let gateway = Client::mock(mock.clone());
        let labels = label_set(&["dog", "cat"]).unwrap();
        let policy = SelectionPolicy::keep_k(8);
        let prompts = ["blue sky", "blue sky with a dog", "a cat on blue sky", "empty blue sea"];
        let images: Vec<_> = (0..16u32)
            .map(|i| {
                let p = prompts[i as usize % 4];
                (CandidateId { seed: 5, index: i }, mock.render_png(p, 5, i, 64, 64).unwrap())
            })
            .collect();
        let scored = score_batch(images, "blue sky", None, &labels, &policy, &gateway).unwrap();
        let expected = oracle_selection(&scored, &policy);
        let kept: Vec<_> = rank_and_select(scored, &policy).unwrap().iter().map(|c| c.id).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn report_rows_written() {
        let dir = tempfile::tempdir().unwrap();
        let cands = vec![cand(0, 0, 0.9, &[("dog", 0.2)], None), cand(0, 1, 0.1, &[], None)];
        let (_, rows) = rank_with_report(cands, &SelectionPolicy::keep_k(1)).unwrap();
        let path = dir.path().join("r/report.csv");
        write_report(&path, &rows).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("candidate_id,faithfulness,max_class_sim,composite,kept\n"));
        assert!(text.contains("0_0,0.9,0.2,0.7"));
        assert!(text.contains(",true\n") && text.contains(",false\n"));
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<ScoredImage>, SelectionPolicy)> {
        let raw_cand = (0u64..3, 0u32..4, prop_oneof![Just(0.0), Just(0.5), -1.0f64..1.0],
                    proptest::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 0..3), any::<bool>());
        (proptest::collection::vec(raw_cand, 1..=16), 1usize..20, 0.0f64..2.0, any::<bool>(), 0.05f64..=1.0).prop_map(
            |(raw, k, w, by_k, frac)| {
                let names = ["dog", "cat", "bus"];
                let cands = raw
                    .into_iter()
                    .enumerate()
                    .map(|(i, (seed, _, f, sims, own))| {
                        let sims: Vec<(&str, f64)> = sims.iter().enumerate().map(|(j, s)| (names[j], *s)).collect();
                        cand(seed, i as u32, f, &sims, own.then_some("dog"))
                    })
                    .collect();
                let policy = if by_k { SelectionPolicy::keep_k(k) } else { SelectionPolicy::keep_fraction(frac) };
                (cands, policy.with_weight(w))
            },
        )
    }

    proptest! {
        #[test]
        fn selection_equals_brute_force((cands, policy) in batch_strategy()) {
            let expected = oracle_selection(&cands, &policy);
            let kept: Vec<_> = rank_and_select(cands, &policy).unwrap().iter().map(|c| c.id).collect();
            prop_assert_eq!(kept, expected);
        }

        #[test]
        fn raising_faithfulness_never_lowers_rank((cands, policy) in batch_strategy(), which in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
            let i = which.index(cands.len());
            let target = cands[i].id;
            let all = SelectionPolicy { keep_k: Some(cands.len()), keep_fraction: None, ..policy };
            let rank_of = |cs: Vec<ScoredImage>| rank_and_select(cs, &all).unwrap().iter().position(|c| c.id == target).unwrap();
            let before = rank_of(cands.clone());
            let mut bumped = cands;
            bumped[i].faithfulness += bump;
            prop_assert!(rank_of(bumped) <= before);
        }
    }
}
