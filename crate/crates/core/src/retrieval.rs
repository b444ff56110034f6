//! Corpus storage and Okapi BM25 retrieval over token ids.
//!
//! A term is a token id, so the retriever shares the generator's tokenizer.
//! Anything implementing [`Retriever`] can stand in for BM25.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Result, TokenId};

/// Dense document index assigned in ingestion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DocId(pub u32);

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    /// External identifier, unique within a corpus.
    pub name: String,
    /// Where the document came from (file path, JSONL line, ...).
    pub source: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus, silently dropping documents with no tokens.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut corpus = Self::default();
        let mut seen = BTreeSet::new();
        for doc in docs {
            if doc.tokens.is_empty() {
                continue;
            }
            if !seen.insert(doc.name.clone()) {
                return Err(Error::DuplicateDocument(doc.name));
            }
            corpus.docs.push(doc);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: DocId) -> Option<&Document> {
        self.docs.get(id.0 as usize)
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// One ranked result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub doc: DocId,
    pub score: f64,
}

/// Query tokens in, ranked documents out.
pub trait Retriever {
    /// Exactly `min(top_k, corpus size)` hits, best first, ties by
    /// ascending id.
    fn retrieve(&self, query: &[TokenId], top_k: usize) -> Vec<Hit>;
    fn document(&self, id: DocId) -> Option<&[TokenId]>;
    fn num_docs(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    corpus: Corpus,
    params: Bm25Params,
    /// term → (doc, term frequency), docs ascending.
    postings: BTreeMap<TokenId, Vec<(DocId, u32)>>,
    doc_len: Vec<u32>,
    avgdl: f64,
}

/// Okapi inverse document frequency, always positive.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    num_traits::Float::ln(1.0 + (n - df + 0.5) / (df + 0.5))
}

/// Contribution of one query term occurrence to one document.
pub fn bm25_term(params: Bm25Params, idf: f64, tf: u32, doc_len: u32, avgdl: f64) -> f64 {
    let tf = tf as f64;
    let norm = params.k1 * (1.0 - params.b + params.b * doc_len as f64 / avgdl);
    idf * tf * (params.k1 + 1.0) / (tf + norm)
}

impl Bm25Index {
    pub fn build(corpus: Corpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(Error::Config(alloc::format!("bm25 k1={} b={}", params.k1, params.b)));
        }
        let mut postings: BTreeMap<TokenId, Vec<(DocId, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (i, doc) in corpus.docs.iter().enumerate() {
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in &doc.tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((DocId(i as u32), c));
            }
            doc_len.push(doc.tokens.len() as u32);
        }
        let avgdl = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(Self { corpus, params, postings, doc_len, avgdl })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_freq(&self, term: TokenId) -> usize {
        self.postings.get(&term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, term: TokenId, doc: DocId) -> u32 {
        self.postings
            .get(&term)
            .and_then(|p| p.binary_search_by_key(&doc, |e| e.0).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    pub fn doc_len(&self, doc: DocId) -> usize {
        self.doc_len[doc.0 as usize] as usize
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    /// Scores for every document; repeated query terms count repeatedly.
    pub fn score_all(&self, query: &[TokenId]) -> Vec<f64> {
        let n = self.corpus.len();
        let mut scores = alloc::vec![0.0f64; n];
        for t in query {
            let Some(list) = self.postings.get(t) else { continue };
            let idf = bm25_idf(n, list.len());
            for &(doc, tf) in list {
                scores[doc.0 as usize] += bm25_term(self.params, idf, tf, self.doc_len[doc.0 as usize], self.avgdl);
            }
        }
        scores
    }
}

/// Orders scores descending with ascending-id tie breaks and keeps `top_k`.
pub fn rank(scores: &[f64], top_k: usize) -> Vec<Hit> {
    let mut hits: Vec<Hit> =
        scores.iter().enumerate().map(|(i, &score)| Hit { doc: DocId(i as u32), score }).collect();
    hits.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.doc.cmp(&b.doc),
        o => o,
    });
    hits.truncate(top_k);
    hits
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query: &[TokenId], top_k: usize) -> Vec<Hit> {
        rank(&self.score_all(query), top_k)
    }

    fn document(&self, id: DocId) -> Option<&[TokenId]> {
        self.corpus.get(id).map(|d| d.tokens.as_slice())
    }

    fn num_docs(&self) -> usize {
        self.corpus.len()
    }
}

pub fn build_index(corpus: Corpus) -> Result<Bm25Index> {
    Bm25Index::build(corpus, Bm25Params::default())
}

/// Whether step `n` of a generation that started from a `t`-token prompt
/// is a retrieval boundary.
pub fn should_retrieve(n: usize, t: usize, stride: usize) -> bool {
    debug_assert!(n >= t && stride >= 1);
    (n - t).is_multiple_of(stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalConfig {
    pub stride: usize,
    pub query_len: usize,
    pub top_k: usize,
    /// Retrieved documents are cut to at most this many tokens.
    pub max_evidence: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { stride: 16, query_len: 16, top_k: 1, max_evidence: 128 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.query_len == 0 || self.top_k == 0 {
            return Err(Error::Config(alloc::format!(
                "stride={} query_len={} top_k={} must all be at least 1",
                self.stride, self.query_len, self.top_k
            )));
        }
        Ok(())
    }

    /// The last `query_len` tokens of `seq`.
    pub fn query<'a>(&self, seq: &'a [TokenId]) -> &'a [TokenId] {
        &seq[seq.len().saturating_sub(self.query_len)..]
    }
}

/// Supplies raw (unmarked) evidence documents to a generation loop.
pub trait EvidenceSource {
    /// Up to `k` documents for `query`, best first, each already cut to the
    /// evidence budget.
    fn fetch(&mut self, query: &[TokenId], k: usize) -> Result<Vec<Vec<TokenId>>>;
}

/// BM25 (or any [`Retriever`]) behind the evidence interface.
pub struct RetrieverSource<'a, R: ?Sized> {
    pub retriever: &'a R,
    pub max_evidence: usize,
}

impl<'a, R: Retriever + ?Sized> RetrieverSource<'a, R> {
    pub fn new(retriever: &'a R, max_evidence: usize) -> Self {
        Self { retriever, max_evidence }
    }
}

impl<R: Retriever + ?Sized> EvidenceSource for RetrieverSource<'_, R> {
    fn fetch(&mut self, query: &[TokenId], k: usize) -> Result<Vec<Vec<TokenId>>> {
        self.retriever
            .retrieve(query, k)
            .into_iter()
            .map(|hit| {
                let doc = self.retriever.document(hit.doc).ok_or_else(|| {
                    Error::Invariant(alloc::format!("retriever returned unknown document {}", hit.doc.0))
                })?;
                Ok(doc[..doc.len().min(self.max_evidence)].to_vec())
            })
            .collect()
    }
}

/// Returns the same documents regardless of the query; used for runtime
/// measurements with simulated evidence of a fixed length.
#[derive(Clone, Debug, Default)]
pub struct FixedEvidence {
    pub docs: Vec<Vec<TokenId>>,
}

impl FixedEvidence {
    pub fn new(docs: Vec<Vec<TokenId>>) -> Self {
        Self { docs }
    }

    /// One document of `len` uniformly drawn ids from `0..vocab_base`.
    pub fn random(len: usize, vocab_base: usize, rng: &mut crate::SeededRng) -> Self {
        Self::new(alloc::vec![(0..len).map(|_| rng.range_inclusive(0, vocab_base - 1) as TokenId).collect()])
    }
}

impl EvidenceSource for FixedEvidence {
    fn fetch(&mut self, _query: &[TokenId], k: usize) -> Result<Vec<Vec<TokenId>>> {
        Ok(self.docs.iter().take(k).cloned().collect())
    }
}
