//! Sentence embeddings, persona and story-style representations, k-means
//! over personality representations, and balanced binary datasets.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{derive_seed, fnv1a};
use crate::tensor::Tensor;
use crate::text::{PersonaUtterance, StoryExample};

/// Maps a token sequence to a fixed-dimension vector. Implementations must be
/// deterministic.
pub trait SentenceEncoder {
    fn kind(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<Vec<f64>>;
}

/// Default encoder: each token hashes to a row of a seeded random matrix
/// with `2^20` rows (generated on demand); the sentence vector is the
/// L2-normalized mean of its token rows.
#[derive(Clone, Debug)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

const HASH_ROWS: u64 = 1 << 20;

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn row(&self, token: &str) -> Vec<f64> {
        let bucket = fnv1a(token.as_bytes()) % HASH_ROWS;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &bucket.to_string()));
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl SentenceEncoder for HashingEncoder {
    fn kind(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence_embed"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, r) in acc.iter_mut().zip(self.row(t)) {
                *a += r;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|a| *a /= norm);
        }
        Ok(acc)
    }
}

/// Mean sentence embedding of one persona's utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaRepr {
    pub id: usize,
    pub vector: Vec<f64>,
    pub count: usize,
}

/// Mean sentence embedding over all story sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryStyleRepr {
    pub vector: Vec<f64>,
    pub count: usize,
}

impl PersonaRepr {
    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.vector.clone())
    }
}

impl StoryStyleRepr {
    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.vector.clone())
    }
}

fn mean_embedding<'a, I>(sentences: I, encoder: &dyn SentenceEncoder) -> Result<(Vec<f64>, usize)>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut acc = vec![0.0; encoder.dim()];
    let mut n = 0usize;
    for s in sentences {
        for (a, e) in acc.iter_mut().zip(encoder.embed(s)?) {
            *a += e;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("mean embedding"));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok((acc, n))
}

/// Arithmetic mean of the utterance embeddings, not renormalized.
pub fn persona_representation<'a, I>(id: usize, utterances: I, encoder: &dyn SentenceEncoder) -> Result<PersonaRepr>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let (vector, count) = mean_embedding(utterances, encoder)?;
    Ok(PersonaRepr { id, vector, count })
}

pub fn story_style_representation(stories: &[StoryExample], encoder: &dyn SentenceEncoder) -> Result<StoryStyleRepr> {
    let sentences = stories.iter().flat_map(|s| s.sentences.iter().map(Vec::as_slice));
    let (vector, count) = mean_embedding(sentences, encoder)?;
    Ok(StoryStyleRepr { vector, count })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each input point.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the initial one.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            total += d;
            j
        })
        .collect();
    (a, total)
}

/// Lloyd's algorithm from a seeded k-means++ (D²-weighted farthest point)
/// initialization, run until the assignment stops changing or `max_iter`
/// updates have been made.
pub fn kmeans_cluster(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    if k == 0 || max_iter == 0 {
        return Err(Error::Config("k and max_iter must be at least 1".into()));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Config("points have differing dimensions".into()));
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect();
    if k > distinct.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} distinct points", distinct.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points.choose(&mut rng).expect("non-empty").clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("k ≤ distinct points");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].clone();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let (mut assignment, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, inertia) = assign(points, &centroids);
        history.push(inertia);
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    let inertia = *history.last().expect("non-empty");
    Ok(ClusterModel { centroids, assignment, inertia, history })
}

/// Best of `restarts` seeded runs by final inertia; ties keep the earlier run.
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let m = kmeans_cluster(points, k, derive_seed(seed, &format!("restart/{r}")), max_iter)?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Labels every utterance of `target_cluster` positive and draws an equal
/// number of negatives, without replacement, from the other utterances.
/// The result is shuffled.
pub fn build_balanced_dataset(
    target_cluster: usize,
    utterances: &[PersonaUtterance],
    seed: u64,
) -> Result<Vec<PersonaUtterance>> {
    let (pos, neg): (Vec<&PersonaUtterance>, Vec<&PersonaUtterance>) =
        utterances.iter().partition(|u| u.cluster == target_cluster);
    if pos.is_empty() {
        return Err(Error::Data(format!("cluster {target_cluster} has no utterances")));
    }
    if neg.len() < pos.len() {
        return Err(Error::Data(format!(
            "cluster {target_cluster}: {} positives but only {} negatives (deficit {})",
            pos.len(),
            neg.len(),
            pos.len() - neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives: Vec<&PersonaUtterance> = neg.choose_multiple(&mut rng, pos.len()).copied().collect();
    let mut out: Vec<PersonaUtterance> = pos
        .iter()
        .map(|u| PersonaUtterance { label: Some(1), ..(*u).clone() })
        .chain(negatives.iter().map(|u| PersonaUtterance { label: Some(0), ..(*u).clone() }))
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// The `n` best clusters by accuracy, best first; ties go to the lower id.
pub fn select_top_clusters(per_cluster_accuracy: &BTreeMap<usize, f64>, n: usize) -> Result<Vec<usize>> {
    if per_cluster_accuracy.len() < n {
        return Err(Error::Config(format!(
            "need {n} clusters to select from, have {}",
            per_cluster_accuracy.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = per_cluster_accuracy.iter().map(|(&k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(n).map(|(k, _)| k).collect())
}
