use rand::seq::SliceRandom;
use rand::Rng;

use super::corpus::{Corpus, CLS, MASK, NUM_SPECIALS, SEP};
use crate::error::{Error, Result};

/// Label value at positions that carry no MLM target.
pub const IGNORE: usize = usize::MAX;

pub const MASK_PROB: f64 = 0.15;

/// A framed sentence pair before masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// 1 when B follows A in the same document.
    pub is_next: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// Original token at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<usize>,
    pub is_next: usize,
}

impl Example {
    pub fn num_targets(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Counts of the masking decisions taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskStats {
    pub maskable: usize,
    pub selected: usize,
    pub masked: usize,
    pub kept: usize,
    pub random: usize,
}

impl MaskStats {
    pub fn merge(&mut self, o: &MaskStats) {
        self.maskable += o.maskable;
        self.selected += o.selected;
        self.masked += o.masked;
        self.kept += o.kept;
        self.random += o.random;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenBatch {
    pub examples: Vec<Example>,
    pub stats: MaskStats,
}

impl TokenBatch {
    pub fn num_targets(&self) -> usize {
        self.examples.iter().map(Example::num_targets).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).sum()
    }
}

/// Selects 15% of the non-special tokens; of those 80% become `[MASK]`,
/// 10% stay and 10% become a uniformly drawn non-special token.
pub fn mask_tokens<R: Rng + ?Sized>(pairs: &[NspPair], vocab: usize, rng: &mut R) -> TokenBatch {
    let mut batch = TokenBatch::default();
    for p in pairs {
        let mut tokens = p.tokens.clone();
        let mut labels = vec![IGNORE; tokens.len()];
        let mut maskable = 0;
        for (t, l) in tokens.iter_mut().zip(labels.iter_mut()) {
            if *t < NUM_SPECIALS {
                continue;
            }
            maskable += 1;
            if !rng.random_bool(MASK_PROB) {
                continue;
            }
            batch.stats.selected += 1;
            *l = *t;
            let r: f64 = rng.random();
            if r < 0.8 {
                *t = MASK;
                batch.stats.masked += 1;
            } else if r < 0.9 || vocab <= NUM_SPECIALS {
                batch.stats.kept += 1;
            } else {
                *t = rng.random_range(NUM_SPECIALS..vocab);
                batch.stats.random += 1;
            }
        }
        if maskable == 0 {
            log::warn!("sequence of {} tokens has nothing to mask", tokens.len());
        }
        batch.stats.maskable += maskable;
        batch.examples.push(Example {
            tokens,
            segments: p.segments.clone(),
            labels,
            is_next: p.is_next,
        });
    }
    batch
}

/// `[CLS] A [SEP] B [SEP]`, trimming the longer segment from its end
/// until the pair fits in `max_seq`.
pub fn frame_pair(a: &[usize], b: &[usize], max_seq: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if max_seq < 3 {
        return Err(Error::Config(vec![format!(
            "max_seq ({max_seq}) cannot hold [CLS] and two [SEP]"
        )]));
    }
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb + 3 > max_seq {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut tokens = Vec::with_capacity(la + lb + 3);
    tokens.push(CLS);
    tokens.extend_from_slice(&a[..la]);
    tokens.push(SEP);
    let mut segments = vec![0; tokens.len()];
    tokens.extend_from_slice(&b[..lb]);
    tokens.push(SEP);
    segments.resize(tokens.len(), 1);
    Ok((tokens, segments))
}

/// Draws `count` NSP pairs: half consecutive sentences of one document,
/// half with B taken from a different document. Labels are stratified, so
/// positives number exactly `count / 2` (a coin decides the odd one) and
/// their positions are shuffled.
pub fn make_nsp_pairs<R: Rng + ?Sized>(
    corpus: &Corpus,
    count: usize,
    max_seq: usize,
    rng: &mut R,
) -> Result<Vec<NspPair>> {
    let docs = &corpus.documents;
    if docs.len() < 2 {
        return Err(Error::Config(vec![
            "next-sentence pairs need at least 2 documents (negatives come from another document)".into(),
        ]));
    }
    let multi: Vec<usize> = (0..docs.len()).filter(|&d| docs[d].len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::Config(vec!["no document has 2 consecutive sentences".into()]));
    }
    let positives = count / 2 + usize::from(count % 2 == 1 && rng.random_bool(0.5));
    let mut labels: Vec<bool> = (0..count).map(|i| i < positives).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|positive| {
            let d = multi[rng.random_range(0..multi.len())];
            let i = rng.random_range(0..docs[d].len() - 1);
            let a = &docs[d][i];
            let (b, is_next) = if positive {
                (&docs[d][i + 1], 1)
            } else {
                let mut o = rng.random_range(0..docs.len() - 1);
                if o >= d {
                    o += 1;
                }
                (&docs[o][rng.random_range(0..docs[o].len())], 0)
            };
            let (tokens, segments) = frame_pair(a, b, max_seq)?;
            Ok(NspPair {
                tokens,
                segments,
                is_next,
            })
        })
        .collect()
}
