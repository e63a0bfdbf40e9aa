//! Synthetic corpus with clustered tagging behavior.
//!
//! Every tag has a random prototype direction in feature space. An image
//! is a weighted mix of a few prototypes (its concept); its features are
//! the mix plus Gaussian noise. Each ground-truth tag slot is filled, with
//! probability `cluster_tag_affinity`, from the owner's cluster-preferred
//! tags, and otherwise by the next most salient concept tag.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Corpus, Sample, TagVocabulary};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Prototypes mixed into one image.
const CONCEPT_EXTRA: usize = 2;
const FEATURE_NOISE: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_clusters: usize,
    pub num_images: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub tags_per_image: (usize, usize),
    pub cluster_tag_affinity: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The corpus the acceptance suite trains on.
    pub fn acceptance() -> Self {
        Self {
            num_users: 200,
            num_clusters: 4,
            num_images: 5000,
            vocab_size: 100,
            feature_dim: 64,
            tags_per_image: (3, 6),
            cluster_tag_affinity: 0.6,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("synthetic spec: {m}")));
        if self.num_users == 0 || self.num_clusters == 0 || self.num_images == 0 {
            return bad("users, clusters and images must be positive");
        }
        if self.num_clusters > self.num_users {
            return bad("more clusters than users");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        let (lo, hi) = self.tags_per_image;
        if lo == 0 || lo > hi {
            return bad("tags_per_image must satisfy 1 <= min <= max");
        }
        if hi + CONCEPT_EXTRA > self.vocab_size {
            return bad("vocabulary too small for tags_per_image");
        }
        if !(0.0..=1.0).contains(&self.cluster_tag_affinity) {
            return bad("cluster_tag_affinity must be in [0, 1]");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("num_users".into(), self.num_users.to_string()),
            ("num_clusters".into(), self.num_clusters.to_string()),
            ("num_images".into(), self.num_images.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            (
                "tags_per_image".into(),
                format!("{},{}", self.tags_per_image.0, self.tags_per_image.1),
            ),
            ("cluster_tag_affinity".into(), format!("{:?}", self.cluster_tag_affinity)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for synth.{key}"));
        let v = value.trim();
        match key {
            "num_users" => self.num_users = v.parse().map_err(|_| bad())?,
            "num_clusters" => self.num_clusters = v.parse().map_err(|_| bad())?,
            "num_images" => self.num_images = v.parse().map_err(|_| bad())?,
            "vocab_size" => self.vocab_size = v.parse().map_err(|_| bad())?,
            "feature_dim" => self.feature_dim = v.parse().map_err(|_| bad())?,
            "tags_per_image" => {
                let (a, b) = v.split_once(',').ok_or_else(bad)?;
                self.tags_per_image = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
            }
            "cluster_tag_affinity" => self.cluster_tag_affinity = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown synth key `{other}`"))),
        }
        Ok(())
    }
}

/// Image concept: tags in decreasing salience and their mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub tags: Vec<usize>,
    pub weights: Vec<f64>,
}

/// The hidden generative structure behind a synthetic corpus.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub prototypes: Vec<Vec<f64>>,
    /// Preferred tags per cluster, most frequent first.
    pub cluster_tags: Vec<Vec<usize>>,
    pub cluster_weights: Vec<Vec<f64>>,
    /// Cluster of each user, indexed like the generated user ids.
    pub user_cluster: Vec<usize>,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let n = spec.vocab_size;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..n)
            .map(|_| (0..spec.feature_dim).map(|_| unit.sample(rng)).collect())
            .collect();

        let pref_size = (n / (2 * spec.num_clusters)).clamp(3, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let cluster_tags: Vec<Vec<usize>> = (0..spec.num_clusters)
            .map(|c| {
                let start = (c * pref_size) % n;
                (0..pref_size).map(|j| perm[(start + j) % n]).collect()
            })
            .collect();
        let cluster_weights = cluster_tags
            .iter()
            .map(|tags| (0..tags.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect())
            .collect();

        let mut order: Vec<usize> = (0..spec.num_users).collect();
        order.shuffle(rng);
        let mut user_cluster = vec![0; spec.num_users];
        for (pos, &u) in order.iter().enumerate() {
            user_cluster[u] = pos % spec.num_clusters;
        }

        Ok(Self {
            spec,
            prototypes,
            cluster_tags,
            cluster_weights,
            user_cluster,
        })
    }

    pub fn draw_concept(&self, rng: &mut Rng) -> Concept {
        let size = self.spec.tags_per_image.1 + CONCEPT_EXTRA;
        let all: Vec<usize> = (0..self.spec.vocab_size).collect();
        let tags: Vec<usize> = all.choose_multiple(rng, size).copied().collect();
        // geometric salience so the ordering is recoverable from features
        let weights = (0..size).map(|r| 0.8f64.powi(r as i32) * rng.random_range(0.9..1.1)).collect();
        Concept { tags, weights }
    }

    /// Concept mix plus noise, rounded to 32-bit precision.
    pub fn features(&self, concept: &Concept, rng: &mut Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
        let norm = concept.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        (0..self.spec.feature_dim)
            .map(|j| {
                let mix: f64 = concept
                    .tags
                    .iter()
                    .zip(&concept.weights)
                    .map(|(&t, w)| w * self.prototypes[t][j])
                    .sum::<f64>()
                    / norm;
                ((mix + noise.sample(rng)) as f32) as f64
            })
            .collect()
    }

    /// Ground-truth tags for an image of `concept` owned by a user in
    /// `cluster`, with `count` tags.
    pub fn assign_tags(&self, concept: &Concept, cluster: usize, count: usize, rng: &mut Rng) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut next_concept = concept.tags.iter();
        let prefs = &self.cluster_tags[cluster];
        let weights = &self.cluster_weights[cluster];
        while out.len() < count {
            let personal = self.spec.cluster_tag_affinity > 0.0
                && rng.random_bool(self.spec.cluster_tag_affinity);
            if personal {
                let avail: Vec<usize> = (0..prefs.len()).filter(|&i| !out.contains(&prefs[i])).collect();
                if let Ok(&i) = avail.choose_weighted(rng, |&i| weights[i]) {
                    out.insert(prefs[i]);
                    continue;
                }
            }
            match next_concept.find(|t| !out.contains(*t)) {
                Some(&t) => {
                    out.insert(t);
                }
                None => break,
            }
        }
        out
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub world: SyntheticWorld,
    /// `(user_id, cluster)` for every generated user.
    pub clusters: Vec<(String, usize)>,
}

pub fn user_name(i: usize, total: usize) -> String {
    format!("user{:0w$}", i, w = digits(total))
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Generates a full corpus; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, seed::DATA);
    let world = SyntheticWorld::new(spec.clone(), &mut rng)?;
    let vocab = TagVocabulary::new(
        (0..spec.vocab_size)
            .map(|i| format!("tag{:0w$}", i, w = digits(spec.vocab_size)))
            .collect(),
    )?;
    let (lo, hi) = spec.tags_per_image;
    let mut samples = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let owner = rng.random_range(0..spec.num_users);
        let concept = world.draw_concept(&mut rng);
        let features = world.features(&concept, &mut rng);
        let count = rng.random_range(lo..=hi);
        let tags = world.assign_tags(&concept, world.user_cluster[owner], count, &mut rng);
        samples.push(Sample {
            image_id: format!("img{:0w$}", i, w = digits(spec.num_images)),
            user_id: user_name(owner, spec.num_users),
            features,
            tags,
        });
    }
    let clusters = (0..spec.num_users)
        .map(|u| (user_name(u, spec.num_users), world.user_cluster[u]))
        .collect();
    Ok(SyntheticCorpus {
        corpus: Corpus::new(vocab, samples)?,
        world,
        clusters,
    })
}
