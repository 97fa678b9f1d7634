//! Sparse bag-of-words corpora.
//!
//! On disk a corpus is the UCI bag-of-words layout: three header lines
//! holding `D`, `V` and `NNZ`, followed by `NNZ` lines `docId termId count`
//! with 1-based ids. In memory every id is 0-based.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::rng::{self, StreamPurpose};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("vocabulary needs at least 2 terms, got {0}")]
    VocabularyTooSmall(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: term out of range ({term} > {vocab_size})")]
    TermOutOfRange {
        line: usize,
        term: u64,
        vocab_size: usize,
    },
    #[error("document {0} has no words")]
    EmptyDocument(usize),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("batch size {batch_size} must be in 1..={doc_count}")]
    BatchSize { batch_size: usize, doc_count: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered, duplicate-free list of terms. Term ids are positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Deduplicates `raw_terms`, keeping first occurrences in order.
    pub fn build<I, S>(raw_terms: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut terms = Vec::new();
        let mut index = HashMap::new();
        for term in raw_terms {
            let term = term.into();
            if !index.contains_key(&term) {
                index.insert(term.clone(), terms.len());
                terms.push(term);
            }
        }
        match terms.len() {
            0 => Err(CorpusError::EmptyVocabulary),
            1 => Err(CorpusError::VocabularyTooSmall(1)),
            _ => Ok(Self { terms, index }),
        }
    }

    /// Reads one term per line. Trailing whitespace is dropped and blank
    /// lines are rejected, since they would shift every later id.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut terms = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let term = line.trim_end();
            if term.is_empty() {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    message: "blank vocabulary entry".into(),
                });
            }
            terms.push(term.to_string());
        }
        let len = terms.len();
        let vocab = Self::build(terms)?;
        if vocab.len() != len {
            return Err(CorpusError::Malformed {
                line: len,
                message: "vocabulary file contains duplicate terms".into(),
            });
        }
        Ok(vocab)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for term in &self.terms {
            writeln!(writer, "{term}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }
}

/// A document as `(term_id, count)` pairs sorted by term id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    entries: Vec<(usize, u32)>,
    total_words: u64,
}

impl Document {
    /// Builds a document from possibly unsorted, possibly repeated
    /// `(term_id, count)` pairs. Repeated terms are summed.
    pub fn from_counts<I>(counts: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (usize, u32)>,
    {
        let mut merged = BTreeMap::new();
        for (term, count) in counts {
            if count == 0 {
                return Err(CorpusError::InvalidDocument(format!(
                    "term {term} has zero count"
                )));
            }
            let slot: &mut u32 = merged.entry(term).or_default();
            *slot = slot.checked_add(count).ok_or_else(|| {
                CorpusError::InvalidDocument(format!("count overflow for term {term}"))
            })?;
        }
        let entries: Vec<_> = merged.into_iter().collect();
        let total_words = entries.iter().map(|&(_, c)| u64::from(c)).sum();
        if total_words == 0 {
            return Err(CorpusError::InvalidDocument("document has no words".into()));
        }
        Ok(Self {
            entries,
            total_words,
        })
    }

    /// Builds a document from a token sequence of term ids.
    pub fn from_tokens<I: IntoIterator<Item = usize>>(tokens: I) -> Result<Self, CorpusError> {
        Self::from_counts(tokens.into_iter().map(|t| (t, 1)))
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn total_words(&self) -> u64 {
        self.total_words
    }

    pub fn distinct_terms(&self) -> usize {
        self.entries.len()
    }

    pub fn count_of(&self, term: usize) -> u32 {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn max_term(&self) -> usize {
        self.entries.last().map(|&(t, _)| t).unwrap_or(0)
    }
}

/// Documents paired with the vocabulary size they are indexed against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab_size: usize,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, vocab_size: usize) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        if vocab_size < 2 {
            return Err(CorpusError::VocabularyTooSmall(vocab_size));
        }
        if let Some((d, doc)) = documents
            .iter()
            .enumerate()
            .find(|(_, doc)| doc.max_term() >= vocab_size)
        {
            return Err(CorpusError::InvalidDocument(format!(
                "document {} uses term {} but V = {vocab_size}",
                d + 1,
                doc.max_term()
            )));
        }
        Ok(Self {
            documents,
            vocab_size,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn doc_count(&self) -> usize {
        self.documents.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn total_words(&self) -> u64 {
        self.documents.iter().map(Document::total_words).sum()
    }

    pub fn max_doc_len(&self) -> u64 {
        self.documents
            .iter()
            .map(Document::total_words)
            .max()
            .unwrap_or(0)
    }

    /// Parses the sparse bag-of-words format. Duplicate `(doc, term)`
    /// lines are summed; lines may appear in any order.
    pub fn read_sparse<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut lines = reader
            .lines()
            .enumerate()
            .filter_map(|(i, line)| match line {
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some(Ok((i + 1, l))),
                Err(e) => Some(Err(e)),
            });

        let mut header = [0u64; 3];
        for (slot, name) in header.iter_mut().zip(["D", "V", "NNZ"]) {
            let (line_no, line) = lines.next().transpose()?.ok_or(CorpusError::Malformed {
                line: 0,
                message: format!("missing header value {name}"),
            })?;
            *slot = line.trim().parse().map_err(|_| CorpusError::Malformed {
                line: line_no,
                message: format!("header value {name} is not a nonnegative integer: {line:?}"),
            })?;
        }
        let [doc_count, vocab_size, nnz] = header.map(|x| x as usize);
        if doc_count == 0 || nnz == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        if vocab_size < 2 {
            return Err(CorpusError::VocabularyTooSmall(vocab_size));
        }

        let mut per_doc: Vec<Vec<(usize, u32)>> = vec![Vec::new(); doc_count];
        let mut seen = 0usize;
        for item in lines {
            let (line_no, line) = item?;
            seen += 1;
            if seen > nnz {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("more than NNZ = {nnz} entries"),
                });
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("expected \"docId termId count\", got {line:?}"),
                });
            }
            let parse = |s: &str, what: &str| {
                s.parse::<u64>().map_err(|_| CorpusError::Malformed {
                    line: line_no,
                    message: format!("{what} is not a nonnegative integer: {s:?}"),
                })
            };
            let doc = parse(fields[0], "docId")?;
            let term = parse(fields[1], "termId")?;
            let count = parse(fields[2], "count")?;
            if doc == 0 || doc > doc_count as u64 {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("docId {doc} outside 1..={doc_count}"),
                });
            }
            if term == 0 || term > vocab_size as u64 {
                return Err(CorpusError::TermOutOfRange {
                    line: line_no,
                    term,
                    vocab_size,
                });
            }
            if count == 0 || count > u64::from(u32::MAX) {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("count {count} outside 1..={}", u32::MAX),
                });
            }
            per_doc[(doc - 1) as usize].push(((term - 1) as usize, count as u32));
        }
        if seen < nnz {
            return Err(CorpusError::Malformed {
                line: 0,
                message: format!("header declares NNZ = {nnz} but found {seen} entries"),
            });
        }

        let documents = per_doc
            .into_iter()
            .enumerate()
            .map(|(d, counts)| {
                if counts.is_empty() {
                    return Err(CorpusError::EmptyDocument(d + 1));
                }
                Document::from_counts(counts)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(documents, vocab_size)
    }

    /// Writes the sparse format, one line per distinct `(doc, term)`.
    pub fn write_sparse<W: Write>(&self, mut writer: W) -> io::Result<()> {
        let nnz: usize = self.documents.iter().map(Document::distinct_terms).sum();
        writeln!(writer, "{}", self.documents.len())?;
        writeln!(writer, "{}", self.vocab_size)?;
        writeln!(writer, "{nnz}")?;
        for (d, doc) in self.documents.iter().enumerate() {
            for &(term, count) in doc.entries() {
                writeln!(writer, "{} {} {}", d + 1, term + 1, count)?;
            }
        }
        Ok(())
    }
}

/// Caps a document at `max_len` words by sampling tokens uniformly
/// without replacement from its token multiset. Documents already within
/// the cap are returned unchanged.
pub fn truncate_document<R: Rng + ?Sized>(doc: &Document, max_len: u64, rng: &mut R) -> Document {
    assert!(max_len >= 1, "max_len must be positive");
    if doc.total_words <= max_len {
        return doc.clone();
    }
    let total = doc.total_words as usize;
    let mut picked = index::sample(rng, total, max_len as usize).into_vec();
    picked.sort_unstable();

    let mut entries = Vec::new();
    let mut upper = 0usize;
    let mut cursor = picked.iter().peekable();
    for &(term, count) in &doc.entries {
        upper += count as usize;
        let mut taken = 0u32;
        while cursor.next_if(|&&token| token < upper).is_some() {
            taken += 1;
        }
        if taken > 0 {
            entries.push((term, taken));
        }
    }
    Document {
        entries,
        total_words: max_len,
    }
}

/// Truncation with the per-document stream keyed by `(seed, doc_id)`, so
/// a document is cut the same way every time it is drawn.
pub fn truncate_by_id(doc: &Document, max_len: u64, seed: u64, doc_id: usize) -> Document {
    if doc.total_words <= max_len {
        return doc.clone();
    }
    let mut rng = rng::stream(seed, StreamPurpose::Truncate, doc_id as u64);
    truncate_document(doc, max_len, &mut rng)
}

/// Uniform minibatch sampling without replacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchSpec {
    batch_size: usize,
    sampling_ratio: f64,
    seed: u64,
}

impl MinibatchSpec {
    pub fn new(batch_size: usize, doc_count: usize, seed: u64) -> Result<Self, CorpusError> {
        if batch_size == 0 || batch_size > doc_count {
            return Err(CorpusError::BatchSize {
                batch_size,
                doc_count,
            });
        }
        Ok(Self {
            batch_size,
            sampling_ratio: batch_size as f64 / doc_count as f64,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// `S / D`.
    pub fn sampling_ratio(&self) -> f64 {
        self.sampling_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Document indices of the minibatch for `iteration`, in ascending order.
pub fn sample_minibatch(
    corpus: &Corpus,
    spec: &MinibatchSpec,
    iteration: u64,
) -> Result<Vec<usize>, CorpusError> {
    let doc_count = corpus.doc_count();
    if spec.batch_size > doc_count {
        return Err(CorpusError::BatchSize {
            batch_size: spec.batch_size,
            doc_count,
        });
    }
    let mut rng = rng::stream(spec.seed, StreamPurpose::Batch, iteration);
    let mut batch = index::sample(&mut rng, doc_count, spec.batch_size).into_vec();
    batch.sort_unstable();
    Ok(batch)
}
