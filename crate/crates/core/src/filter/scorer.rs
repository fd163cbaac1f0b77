use serde::{Deserialize, Serialize};

use super::binary::LogisticFilter;
use crate::clip::TwoTowerModel;
use crate::data::{Pool, RecordRef};
use crate::error::{Error, Result};

/// A data filtering network: maps a record to a real-valued quality score.
#[derive(Debug, Clone)]
pub enum Scorer {
    /// Cosine similarity between the two tower embeddings, in `[-1, 1]`.
    Clip(TwoTowerModel),
    /// Probability that the record comes from the positive (curated) pool.
    Binary(LogisticFilter),
    /// The same score for every record; with a threshold below it, a
    /// pass-through filter.
    Constant(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Clip,
    Binary,
    Constant,
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Clip(_) => ScorerKind::Clip,
            Scorer::Binary(_) => ScorerKind::Binary,
            Scorer::Constant(_) => ScorerKind::Constant,
        }
    }

    pub fn score(&self, record: RecordRef<'_>) -> Result<f32> {
        let out = match self {
            Scorer::Clip(model) => model.alignment(record.image, record.text),
            Scorer::Binary(filter) => filter.probability(record.image, record.text),
            Scorer::Constant(v) => Ok(*v),
        };
        out.map_err(|e| Error::Scoring {
            id: record.id,
            source: Box::new(e),
        })
    }

    /// Scores every record of `pool` in order.
    pub fn score_pool(&self, pool: &Pool) -> Result<Vec<f32>> {
        pool.iter().map(|r| self.score(r)).collect()
    }
}

/// Cosine-similarity score of one record under a CLIP scorer.
pub fn score_alignment(scorer: &Scorer, record: RecordRef<'_>) -> Result<f32> {
    scorer.score(record)
}

/// Keeps a record iff its score is strictly greater than `threshold`.
pub fn clip_filter(scorer: &Scorer, record: RecordRef<'_>, threshold: f32) -> Result<bool> {
    Ok(scorer.score(record)? > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn identity_model() -> TwoTowerModel {
        let mut m = TwoTowerModel::init(2, 2, 2, 0);
        m.image_weight = Array2::eye(2);
        m.text_weight = Array2::eye(2);
        m
    }

    fn rec<'a>(image: &'a [f32], text: &'a [f32]) -> RecordRef<'a> {
        RecordRef {
            id: 1,
            image,
            text,
            concept: None,
            aligned: None,
        }
    }

    #[test]
    fn coinciding_and_orthogonal_embeddings() {
        let s = Scorer::Clip(identity_model());
        assert_eq!(score_alignment(&s, rec(&[3.0, 4.0], &[0.6, 0.8])).unwrap(), 1.0);
        assert_eq!(score_alignment(&s, rec(&[1.0, 0.0], &[0.0, 2.0])).unwrap(), 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let s = Scorer::Clip(identity_model());
        let same = rec(&[1.0, 0.0], &[1.0, 0.0]);
        let orth = rec(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(clip_filter(&s, same, 0.3).unwrap());
        assert!(!clip_filter(&s, same, 1.0).unwrap());
        assert!(!clip_filter(&s, orth, 0.3).unwrap());
        assert!(!clip_filter(&Scorer::Constant(0.5), orth, 0.5).unwrap());
    }

    #[test]
    fn scoring_errors_name_the_record() {
        let mut m = identity_model();
        m.image_bias = array![0.0, 0.0];
        let s = Scorer::Clip(m);
        let err = s.score(rec(&[0.0, 0.0], &[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Scoring { id: 1, .. }));
    }
}
