//! Corpora sampled from the LDA generative process with known topics.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, WeightedIndex};

use crate::corpus::{Corpus, CorpusError, Document, Vocabulary};
use crate::rng::{self, StreamPurpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub vocab_size: usize,
    pub doc_len: usize,
    /// Symmetric Dirichlet concentration of per-document topic proportions.
    pub alpha: f64,
    /// Symmetric Dirichlet concentration of the true topics.
    pub topic_concentration: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 3,
            vocab_size: 20,
            doc_len: 40,
            alpha: 0.1,
            topic_concentration: 0.1,
        }
    }
}

/// A generative model with known topics.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticSpec,
    topics: Array2<f64>,
    word_samplers: Vec<WeightedIndex<f64>>,
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

impl SyntheticModel {
    /// Draws the true topics from the `Topics` stream of `seed`.
    pub fn new(spec: SyntheticSpec, seed: u64) -> Self {
        assert!(spec.topics >= 1 && spec.vocab_size >= 2 && spec.doc_len >= 1);
        assert!(spec.alpha > 0.0 && spec.topic_concentration > 0.0);
        let mut rng = rng::stream(seed, StreamPurpose::Synthetic, u64::MAX);
        let mut flat = Vec::with_capacity(spec.topics * spec.vocab_size);
        for _ in 0..spec.topics {
            flat.extend(dirichlet(
                &mut rng,
                spec.topic_concentration,
                spec.vocab_size,
            ));
        }
        let topics =
            Array2::from_shape_vec((spec.topics, spec.vocab_size), flat).expect("shape matches");
        Self::with_topics(spec, topics)
    }

    pub fn with_topics(spec: SyntheticSpec, topics: Array2<f64>) -> Self {
        assert_eq!(topics.dim(), (spec.topics, spec.vocab_size));
        let word_samplers = topics
            .outer_iter()
            .map(|row| WeightedIndex::new(row.to_vec()).expect("valid topic row"))
            .collect();
        Self {
            spec,
            topics,
            word_samplers,
        }
    }

    pub fn topics(&self) -> &Array2<f64> {
        &self.topics
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build((0..self.spec.vocab_size).map(|v| format!("w{v:03}")))
            .expect("vocab_size >= 2")
    }

    pub fn sample_document<R: Rng + ?Sized>(&self, rng: &mut R) -> Document {
        let theta = dirichlet(rng, self.spec.alpha, self.spec.topics);
        let topic_sampler = WeightedIndex::new(&theta).expect("valid proportions");
        let tokens = (0..self.spec.doc_len).map(|_| {
            let z = topic_sampler.sample(rng);
            self.word_samplers[z].sample(rng)
        });
        Document::from_tokens(tokens.collect::<Vec<_>>()).expect("doc_len >= 1")
    }

    /// `doc_count` documents from the stream `(seed, stream_index)`. Use
    /// different indices for training and held-out sets.
    pub fn sample_corpus(
        &self,
        doc_count: usize,
        seed: u64,
        stream_index: u64,
    ) -> Result<Corpus, CorpusError> {
        let mut rng = rng::stream(seed, StreamPurpose::Synthetic, stream_index);
        let docs = (0..doc_count)
            .map(|_| self.sample_document(&mut rng))
            .collect();
        Corpus::new(docs, self.spec.vocab_size)
    }
}

/// Cosine similarity of the best one-to-one matching between learned and
/// true topic rows, averaged over topics, together with the worst matched
/// pair. Exhaustive over permutations, so meant for small K.
pub fn matched_cosine(learned: &Array2<f64>, truth: &Array2<f64>) -> (f64, f64) {
    assert_eq!(learned.dim(), truth.dim());
    let k = learned.nrows();
    let cos = |a: usize, b: usize| {
        let x = learned.row(a);
        let y = truth.row(b);
        x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
    };
    let sims: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| cos(a, b)).collect())
        .collect();

    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    permute(&mut perm, 0, &mut |p| {
        let values: Vec<f64> = p.iter().enumerate().map(|(a, &b)| sims[a][b]).collect();
        let mean = values.iter().sum::<f64>() / k as f64;
        if mean > best.0 {
            best = (mean, values.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    });
    best
}

fn permute(items: &mut [usize], start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}
