//! Tag vocabulary, samples, user histories and train/test splitting.

mod checkpoint;
mod corpus_io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corpus_io::{
    load_clusters, load_corpus, load_features, save_clusters, save_corpus, write_atomic, write_features,
    CLUSTERS_FILE, FEATURES_FILE, FEATURES_MAGIC, INTERACTIONS_FILE, VOCAB_FILE,
};
pub use synth::{generate_synthetic, SyntheticCorpus, SyntheticSpec, SyntheticWorld};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Ordered, duplicate-free tag list; a tag's index is its class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if t.is_empty() || t.contains(['\t', '\n', ',']) {
                return Err(Error::Format(format!("invalid tag string {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate tag `{t}`")));
            }
        }
        if tags.is_empty() {
            return Err(Error::Format("empty tag vocabulary".into()));
        }
        Ok(Self { tags, index })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, i: usize) -> &str {
        &self.tags[i]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Vocabulary(tag.to_string()))
    }

    /// Parses a comma-separated tag list; empty input gives an empty set.
    pub fn parse_list(&self, list: &str) -> Result<BTreeSet<usize>> {
        list.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| self.index_of(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub user_id: String,
    pub features: Vec<f64>,
    pub tags: BTreeSet<usize>,
}

impl Sample {
    /// Ground truth as a dense 0/1 vector of length `n`.
    pub fn label_vector(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &t in &self.tags {
            v[t] = 1.0;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: TagVocabulary,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(vocab: TagVocabulary, samples: Vec<Sample>) -> Result<Self> {
        let d = samples.first().map_or(0, |s| s.features.len());
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != d {
                return Err(Error::dim(format!("image `{}` has {} features, expected {d}", s.image_id, s.features.len())));
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(Error::Format(format!("image `{}` has non-finite features", s.image_id)));
            }
            if let Some(&t) = s.tags.iter().find(|&&t| t >= vocab.len()) {
                return Err(Error::Format(format!("image `{}` has tag index {t} >= {}", s.image_id, vocab.len())));
            }
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::Format(format!("duplicate image id `{}`", s.image_id)));
            }
        }
        Ok(Self { vocab, samples })
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Order-independent digest of the corpus contents.
    pub fn digest(&self) -> u64 {
        let mut acc = seed::fnv1a64(self.vocab.tags().join("\n").as_bytes());
        let mut sample_sum: u64 = 0;
        for s in &self.samples {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(s.image_id.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(s.user_id.as_bytes());
            bytes.push(0);
            for f in &s.features {
                bytes.extend_from_slice(&f.to_bits().to_le_bytes());
            }
            for t in &s.tags {
                bytes.extend_from_slice(&(*t as u64).to_le_bytes());
            }
            sample_sum = sample_sum.wrapping_add(seed::fnv1a64(&bytes));
        }
        acc ^= sample_sum.rotate_left(17);
        acc
    }

    /// Deterministic train/test partition of sample indices.
    pub fn split(&self, test_fraction: f64, master_seed: u64) -> Result<Split> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut seed::rng(master_seed, seed::SPLIT));
        let n_test = (self.samples.len() as f64 * test_fraction).round() as usize;
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Split { train, test })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn test_ids<'a>(&self, corpus: &'a Corpus) -> HashSet<&'a str> {
        self.test.iter().map(|&i| corpus.samples[i].image_id.as_str()).collect()
    }
}

/// A user's tag counts and the max-normalized history vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub counts: BTreeMap<usize, u32>,
    pub vector: Vec<f64>,
}

impl UserHistory {
    pub fn from_counts(user_id: impl Into<String>, counts: BTreeMap<usize, u32>, n: usize) -> Result<Self> {
        let mut vector = vec![0.0; n];
        let max = counts.values().copied().max().unwrap_or(0);
        for (&t, &c) in &counts {
            if t >= n {
                return Err(Error::Format(format!("tag index {t} >= vocabulary size {n}")));
            }
            if max > 0 {
                vector[t] = c as f64 / max as f64;
            }
        }
        Ok(Self {
            user_id: user_id.into(),
            counts,
            vector,
        })
    }

    /// History in which every listed tag was used once.
    pub fn from_tags(user_id: impl Into<String>, tags: &BTreeSet<usize>, n: usize) -> Result<Self> {
        Self::from_counts(user_id, tags.iter().map(|&t| (t, 1)).collect(), n)
    }

    pub fn cold_start(user_id: impl Into<String>, n: usize) -> Self {
        Self {
            user_id: user_id.into(),
            counts: BTreeMap::new(),
            vector: vec![0.0; n],
        }
    }
}

/// Counts `user_id`'s tags over `samples`, skipping images in `exclude`,
/// and normalizes by the largest count. Unknown users get the all-zero
/// cold-start vector.
pub fn build_user_history(
    samples: &[Sample],
    user_id: &str,
    exclude: &HashSet<&str>,
    n: usize,
) -> Result<UserHistory> {
    let mut counts = BTreeMap::new();
    for s in samples {
        if s.user_id == user_id && !exclude.contains(s.image_id.as_str()) {
            for &t in &s.tags {
                *counts.entry(t).or_insert(0u32) += 1;
            }
        }
    }
    UserHistory::from_counts(user_id, counts, n)
}

/// Histories for every user appearing in `samples`.
pub fn build_all_histories(
    samples: &[Sample],
    exclude: &HashSet<&str>,
    n: usize,
) -> Result<HashMap<String, UserHistory>> {
    let mut counts: HashMap<&str, BTreeMap<usize, u32>> = HashMap::new();
    for s in samples {
        let entry = counts.entry(s.user_id.as_str()).or_default();
        if !exclude.contains(s.image_id.as_str()) {
            for &t in &s.tags {
                *entry.entry(t).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(u, c)| Ok((u.to_string(), UserHistory::from_counts(u, c, n)?)))
        .collect()
}

/// Stacks per-sample rows into a `batch × width` tensor.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tags: &[&str]) -> TagVocabulary {
        TagVocabulary::new(tags.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn sample(id: &str, user: &str, tags: &[usize]) -> Sample {
        Sample {
            image_id: id.into(),
            user_id: user.into(),
            features: vec![0.0],
            tags: tags.iter().copied().collect(),
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_unknowns() {
        assert!(TagVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = vocab(&["beach", "sea", "sky"]);
        assert_eq!(v.index_of("sea").unwrap(), 1);
        assert!(matches!(v.index_of("cloud"), Err(Error::Vocabulary(t)) if t == "cloud"));
        assert_eq!(v.parse_list("sky, beach").unwrap(), [0, 2].into_iter().collect());
        assert!(v.parse_list("").unwrap().is_empty());
    }

    #[test]
    fn history_count_and_divide() {
        // beach x4, sea x2 over N=3
        let samples = vec![
            sample("i1", "u", &[0, 1]),
            sample("i2", "u", &[0, 1]),
            sample("i3", "u", &[0]),
            sample("i4", "u", &[0]),
            sample("i5", "other", &[2]),
        ];
        let h = build_user_history(&samples, "u", &HashSet::new(), 3).unwrap();
        assert_eq!(h.vector, vec![1.0, 0.5, 0.0]);
        assert_eq!(h.counts[&0], 4);
    }

    #[test]
    fn history_cold_start_and_exclusion() {
        let samples = vec![sample("i1", "u", &[0, 1])];
        let none = build_user_history(&samples, "ghost", &HashSet::new(), 3).unwrap();
        assert_eq!(none.vector, vec![0.0; 3]);
        let excl: HashSet<&str> = ["i1"].into_iter().collect();
        let h = build_user_history(&samples, "u", &excl, 3).unwrap();
        assert_eq!(h.vector, vec![0.0; 3]);
        let all = build_all_histories(&samples, &excl, 3).unwrap();
        assert_eq!(all["u"].vector, vec![0.0; 3]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let samples: Vec<Sample> = (0..100).map(|i| sample(&format!("i{i}"), "u", &[0])).collect();
        let c = Corpus::new(vocab(&["a"]), samples).unwrap();
        let s1 = c.split(0.2, 42).unwrap();
        let s2 = c.split(0.2, 42).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.test.len(), 20);
        let train: HashSet<_> = s1.train.iter().collect();
        assert!(s1.test.iter().all(|i| !train.contains(i)));
    }

    #[test]
    fn corpus_validation() {
        let v = vocab(&["a", "b"]);
        assert!(Corpus::new(v.clone(), vec![sample("x", "u", &[5])]).is_err());
        assert!(Corpus::new(v.clone(), vec![sample("x", "u", &[0]), sample("x", "u", &[1])]).is_err());
        let mut s = sample("x", "u", &[0]);
        s.features = vec![f64::NAN];
        assert!(Corpus::new(v, vec![s]).is_err());
    }

    #[test]
    fn digest_ignores_sample_order() {
        let v = vocab(&["a", "b"]);
        let a = Corpus::new(v.clone(), vec![sample("x", "u", &[0]), sample("y", "w", &[1])]).unwrap();
        let b = Corpus::new(v, vec![sample("y", "w", &[1]), sample("x", "u", &[0])]).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
