//! Bucket index over a corpus, built once from a frozen twin model.
//!
//! Every segment is filed under the argmax of its right-tower code. A query
//! encodes the current segment with the left tower and looks up the records
//! filed under its most probable buckets.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{sha256_hex, Corpus, SegmentRef};
use crate::twin::{save_checkpoint, Side, TwinError, TwinModel};

pub const INDEX_VERSION: &str = "nbase-index-v1";

#[derive(Debug, Error)]
pub enum BaseError {
    #[error(transparent)]
    Model(#[from] TwinError),
    #[error("no candidate segment other than the query exists")]
    NoCandidates,
    #[error("the base is empty")]
    Empty,
    #[error("top_k must be at least 1")]
    ZeroK,
    #[error("segment {0:?} is not in the corpus")]
    UnknownSegment(SegmentRef),
    #[error("index version {0:?} is not supported")]
    Version(String),
    #[error("index does not match the supplied {0}")]
    Mismatch(&'static str),
    #[error("malformed index: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BaseError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub piece_id: u32,
    pub index: u32,
    pub composer: String,
    pub bucket: usize,
    /// Probability of `bucket` in the segment's right-tower code.
    pub confidence: f64,
}

impl SegmentRecord {
    pub fn reference(&self) -> SegmentRef {
        SegmentRef { piece_id: self.piece_id, index: self.index }
    }
}

/// Argmax with ties resolved toward the lowest index.
pub fn argmax(dist: &[f64]) -> (usize, f64) {
    let mut best = (0, dist[0]);
    for (i, &p) in dist.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

/// Bucket indices ordered by descending probability, ties toward lower index.
pub fn ranked_buckets(dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
}

pub fn assign_bucket(model: &TwinModel, ids: &[u32]) -> std::result::Result<(usize, f64), TwinError> {
    Ok(argmax(&model.encode(Side::Right, ids)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralBase {
    pub model: TwinModel,
    pub corpus: Corpus,
    pub buckets: Vec<Vec<SegmentRecord>>,
    pub checkpoint_hash: String,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub selected: SegmentRecord,
    pub candidates: Vec<SegmentRecord>,
    /// Number of top buckets that had to be searched.
    pub k_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseStats {
    pub histogram: Vec<usize>,
    pub entropy: f64,
    pub per_composer: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexDoc {
    version: String,
    checkpoint_hash: String,
    corpus_fingerprint: String,
    buckets: Vec<Vec<SegmentRecord>>,
}

pub fn checkpoint_hash(model: &TwinModel) -> String {
    sha256_hex(&save_checkpoint(model))
}

impl NeuralBase {
    /// Files every corpus segment under its right-tower bucket. The model is
    /// only read; records within a bucket are ordered by (piece, index).
    pub fn build(model: TwinModel, corpus: Corpus) -> Result<NeuralBase> {
        model.check_fingerprint(&corpus.vocab_fingerprint())?;
        let mut buckets = vec![Vec::new(); model.dims.buckets];
        for seg in corpus.segments() {
            let (bucket, confidence) = assign_bucket(&model, seg.token_ids)?;
            let composer = corpus.pieces[seg.piece_id as usize].composer.clone();
            buckets[bucket].push(SegmentRecord { piece_id: seg.piece_id, index: seg.index, composer, bucket, confidence });
        }
        for b in &mut buckets {
            b.sort_by_key(|r| (r.piece_id, r.index));
        }
        Ok(NeuralBase {
            checkpoint_hash: checkpoint_hash(&model),
            corpus_fingerprint: corpus.content_fingerprint(),
            model,
            corpus,
            buckets,
        })
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records in bucket order.
    pub fn records(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.buckets.iter().flatten()
    }

    pub fn find(&self, r: SegmentRef) -> Option<&SegmentRecord> {
        self.records().find(|rec| rec.reference() == r)
    }

    pub fn tokens(&self, r: SegmentRef) -> Result<&[u32]> {
        self.corpus.segment(r).map(|s| s.token_ids).ok_or(BaseError::UnknownSegment(r))
    }

    /// Retrieves a successor for `current`.
    ///
    /// Searches the `k` most probable buckets of the left-tower code, widening
    /// by one bucket at a time while no candidate other than `current` exists.
    /// Each candidate is drawn with weight equal to the query probability of
    /// its bucket.
    pub fn query_next(&self, current: SegmentRef, k: usize, rng: &mut impl Rng) -> Result<Retrieval> {
        if k == 0 {
            return Err(BaseError::ZeroK);
        }
        if self.is_empty() {
            return Err(BaseError::Empty);
        }
        let query = self.model.encode(Side::Left, self.tokens(current)?)?;
        let ranked = ranked_buckets(&query);
        let mut k_used = k.min(ranked.len());
        let candidates = loop {
            let c: Vec<&SegmentRecord> = ranked[..k_used]
                .iter()
                .flat_map(|&b| &self.buckets[b])
                .filter(|r| r.reference() != current)
                .collect();
            if !c.is_empty() {
                break c;
            }
            if k_used == ranked.len() {
                return Err(BaseError::NoCandidates);
            }
            k_used += 1;
        };
        let weights: Vec<f64> = candidates.iter().map(|r| query[r.bucket]).collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every weight underflowed to zero
            Err(_) => rng.gen_range(0..candidates.len()),
        };
        Ok(Retrieval {
            selected: candidates[pick].clone(),
            candidates: candidates.into_iter().cloned().collect(),
            k_used,
        })
    }

    pub fn stats(&self) -> BaseStats {
        let histogram: Vec<usize> = self.buckets.iter().map(Vec::len).collect();
        let mut per_composer: Vec<(String, usize)> = Vec::new();
        for rec in self.records() {
            match per_composer.iter_mut().find(|(c, _)| *c == rec.composer) {
                Some((_, n)) => *n += 1,
                None => per_composer.push((rec.composer.clone(), 1)),
            }
        }
        per_composer.sort();
        BaseStats { entropy: occupancy_entropy(&histogram), histogram, per_composer }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let doc = IndexDoc {
            version: INDEX_VERSION.to_string(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            buckets: self.buckets.clone(),
        };
        serde_json::to_vec(&doc).expect("index serializes")
    }

    /// Restores a persisted index, checking it against the model and corpus
    /// it was built from.
    pub fn from_json(bytes: &[u8], model: TwinModel, corpus: Corpus) -> Result<NeuralBase> {
        let doc: IndexDoc = serde_json::from_slice(bytes)?;
        if doc.version != INDEX_VERSION {
            return Err(BaseError::Version(doc.version));
        }
        if doc.checkpoint_hash != checkpoint_hash(&model) {
            return Err(BaseError::Mismatch("checkpoint"));
        }
        if doc.corpus_fingerprint != corpus.content_fingerprint() {
            return Err(BaseError::Mismatch("corpus"));
        }
        if doc.buckets.len() != model.dims.buckets {
            return Err(BaseError::Invalid(format!("{} buckets, model has {}", doc.buckets.len(), model.dims.buckets)));
        }
        for (b, recs) in doc.buckets.iter().enumerate() {
            for r in recs {
                if r.bucket != b || corpus.segment(r.reference()).is_none() {
                    return Err(BaseError::Invalid(format!("bad record {r:?} in bucket {b}")));
                }
            }
        }
        Ok(NeuralBase {
            model,
            corpus,
            buckets: doc.buckets,
            checkpoint_hash: doc.checkpoint_hash,
            corpus_fingerprint: doc.corpus_fingerprint,
        })
    }
}

/// Shannon entropy (nats) of bucket occupancy counts.
pub fn occupancy_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h = histogram
        .iter()
        .filter(|&&c| c > 0)
        .fold(0.0, |acc, &c| {
            let p = c as f64 / n;
            acc - p * p.ln()
        });
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{PreprocessConfig, Token, TokenizedPiece};
    use crate::twin::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(pieces: &[(&str, Vec<u8>)], t: usize) -> Corpus {
        let tp: Vec<TokenizedPiece> = pieces
            .iter()
            .map(|(c, ps)| TokenizedPiece {
                composer: c.to_string(),
                title: "t".into(),
                tpq: 480,
                tempo: 500_000,
                tokens: ps.iter().map(|&p| Token::Pitches(vec![p])).collect(),
            })
            .collect();
        Corpus::from_tokenized(PreprocessConfig { segment_length: t, ..Default::default() }, &tp).unwrap()
    }

    fn zero_model(c: &Corpus, buckets: usize) -> TwinModel {
        let dims = Dims { vocab: c.vocab.len(), segment_length: c.segment_length(), h: 2, d: 2, buckets, layers: 1 };
        TwinModel::zeros(dims, c.vocab_fingerprint()).unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), (1, 0.7));
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(ranked_buckets(&[0.2, 0.4, 0.2, 0.2]), [1, 0, 2, 3]);
    }

    #[test]
    fn zero_model_files_everything_in_bucket_zero() {
        let c = corpus(&[("A", vec![60, 62, 64, 65, 67, 69])], 2);
        let m = zero_model(&c, 4);
        assert_eq!(assign_bucket(&m, &[1, 2]).unwrap(), (0, 0.25));
        let base = NeuralBase::build(m, c).unwrap();
        assert_eq!(base.len(), 3);
        assert_eq!(base.buckets[0].len(), 3);
        let st = base.stats();
        assert_eq!(st.histogram, [3, 0, 0, 0]);
        assert_eq!(st.entropy, 0.0);
        assert_eq!(st.per_composer, [("A".to_string(), 3)]);
    }

    #[test]
    fn build_is_deterministic_and_checks_fingerprint() {
        let c = corpus(&[("A", vec![60, 62, 64, 65]), ("B", vec![60, 61, 62, 63])], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims { vocab: c.vocab.len(), segment_length: 2, h: 3, d: 3, buckets: 4, layers: 1 };
        let m = TwinModel::init_uniform(dims, c.vocab_fingerprint(), 0.5, &mut rng).unwrap();
        let a = NeuralBase::build(m.clone(), c.clone()).unwrap();
        let b = NeuralBase::build(m.clone(), c.clone()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.model, m);
        let mut wrong = m;
        wrong.vocab_fingerprint = "x".into();
        assert!(matches!(NeuralBase::build(wrong, c), Err(BaseError::Model(TwinError::Fingerprint { .. }))));
    }

    #[test]
    fn two_segment_base_forces_the_other() {
        let c = corpus(&[("A", vec![60, 62, 64, 65])], 2);
        let base = NeuralBase::build(zero_model(&c, 4), c).unwrap();
        let a = SegmentRef { piece_id: 0, index: 0 };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = base.query_next(a, 1, &mut rng).unwrap();
            assert_eq!(r.selected.reference(), SegmentRef { piece_id: 0, index: 1 });
        }
    }

    #[test]
    fn lone_segment_has_no_candidates() {
        let c = corpus(&[("A", vec![60, 62])], 2);
        let base = NeuralBase::build(zero_model(&c, 2), c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = base.query_next(SegmentRef { piece_id: 0, index: 0 }, 1, &mut rng).unwrap_err();
        assert!(matches!(err, BaseError::NoCandidates));
        assert!(matches!(base.query_next(SegmentRef { piece_id: 0, index: 0 }, 0, &mut rng), Err(BaseError::ZeroK)));
    }

    #[test]
    fn uniform_within_single_bucket() {
        let c = corpus(&[("A", (60..68).collect())], 2);
        let base = NeuralBase::build(zero_model(&c, 3), c).unwrap();
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3000 {
            let r = base.query_next(SegmentRef { piece_id: 0, index: 0 }, 1, &mut rng).unwrap();
            assert_eq!(r.candidates.len(), 3);
            counts[r.selected.index as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for &n in &counts[1..] {
            assert!((n as f64 - 1000.0).abs() < 120.0, "{counts:?}");
        }
    }

    #[test]
    fn index_json_round_trip_and_mismatch() {
        let c = corpus(&[("A", vec![60, 62, 64, 65])], 2);
        let base = NeuralBase::build(zero_model(&c, 2), c.clone()).unwrap();
        let bytes = base.to_json();
        let back = NeuralBase::from_json(&bytes, base.model.clone(), c.clone()).unwrap();
        assert_eq!(back, base);
        let other = corpus(&[("A", vec![60, 62, 64, 66])], 2);
        let m2 = zero_model(&other, 2);
        assert!(matches!(NeuralBase::from_json(&bytes, m2, other), Err(BaseError::Mismatch(_))));
    }

    #[test]
    fn occupancy_entropy_bounds() {
        assert_eq!(occupancy_entropy(&[5, 0, 0]), 0.0);
        assert!((occupancy_entropy(&[2, 2, 2, 2]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(occupancy_entropy(&[]), 0.0);
    }
}
