use std::collections::BTreeMap;

use rand::Rng;

use crate::features::{position_encoding, FeatureSequence};
use crate::kernel::Tensor;
use crate::model::Mode;
use crate::{Error, Result};

/// Normalised, stacked utterances indexed by sentence and speaker.
#[derive(Clone, Debug, Default)]
pub struct ParallelSet {
    dim: usize,
    sentences: BTreeMap<String, BTreeMap<usize, FeatureSequence>>,
}

impl ParallelSet {
    pub fn new(dim: usize) -> Self {
        ParallelSet {
            dim,
            sentences: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, sentence: &str, speaker: usize, features: FeatureSequence) -> Result<()> {
        if features.dim() != self.dim {
            return Err(Error::Shape(format!(
                "utterance {sentence}/{speaker} has {} channels, set expects {}",
                features.dim(),
                self.dim
            )));
        }
        if features.is_empty() {
            return Err(Error::InvalidArgument(format!("utterance {sentence}/{speaker} is empty")));
        }
        self.sentences
            .entry(sentence.to_string())
            .or_default()
            .insert(speaker, features);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.sentences.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, sentence: &str, speaker: usize) -> Result<&FeatureSequence> {
        self.sentences
            .get(sentence)
            .and_then(|s| s.get(&speaker))
            .ok_or_else(|| Error::UnknownSpeaker(format!("no utterance of sentence {sentence} for speaker {speaker}")))
    }

    pub fn speakers_of(&self, sentence: &str) -> Vec<usize> {
        self.sentences
            .get(sentence)
            .map(|s| s.keys().copied().collect())
            .unwrap_or_default()
    }

    fn mean_len(&self, sentence: &str) -> f64 {
        let s = &self.sentences[sentence];
        s.values().map(|f| f.len() as f64).sum::<f64>() / s.len() as f64
    }
}

/// One (sentence, source speaker, target speaker) training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub sentence: String,
    pub src: usize,
    pub trg: usize,
}

/// Draws a length-bucketed set of examples. Pairwise mode always uses the
/// `pair` speakers; the other modes draw an ordered speaker pair per item,
/// same-speaker pairs included.
pub fn sample_items<R: Rng>(
    set: &ParallelSet,
    mode: Mode,
    pair: (usize, usize),
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    let eligible: Vec<&str> = set
        .sentences()
        .filter(|s| {
            let sp = set.speakers_of(s);
            match mode {
                Mode::Pairwise => sp.contains(&pair.0) && sp.contains(&pair.1),
                _ => !sp.is_empty(),
            }
        })
        .collect();
    if eligible.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("no sentence can supply a training pair".into()));
    }
    let anchor = eligible[rng.random_range(0..eligible.len())];
    let reference = set.mean_len(anchor);
    let bucket: Vec<&str> = eligible
        .iter()
        .copied()
        .filter(|s| (set.mean_len(s) - reference).abs() <= 0.25 * reference)
        .collect();
    let mut items = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let sentence = if i == 0 { anchor } else { bucket[rng.random_range(0..bucket.len())] };
        let (src, trg) = match mode {
            Mode::Pairwise => pair,
            _ => {
                let sp = set.speakers_of(sentence);
                (sp[rng.random_range(0..sp.len())], sp[rng.random_range(0..sp.len())])
            }
        };
        items.push(BatchItem {
            sentence: sentence.to_string(),
            src,
            trg,
        });
    }
    Ok(items)
}

/// A zero-padded parallel mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Position-encoded source frames, `b × D × N`.
    pub src: Tensor,
    /// Position-encoded target stream with the leading zero frame, `b × D × M`.
    pub trg_in: Tensor,
    /// Clean target stream with the leading zero frame.
    pub target: Tensor,
    pub src_lens: Vec<usize>,
    /// Target lengths counting the zero frame.
    pub trg_lens: Vec<usize>,
    pub src_speakers: Vec<usize>,
    pub trg_speakers: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    /// 1 for valid frames and 0 for padding, per item.
    pub fn mask(lens: &[usize], padded: usize) -> Vec<Vec<bool>> {
        lens.iter().map(|&l| (0..padded).map(|t| t < l).collect()).collect()
    }
}

fn pad(seqs: &[(&FeatureSequence, usize)], dim: usize, encode: bool) -> Tensor {
    let len = seqs.iter().map(|(s, off)| s.len() + off).max().unwrap_or(0);
    let mut out = Tensor::zeros(&[seqs.len(), dim, len]);
    for (b, (seq, offset)) in seqs.iter().enumerate() {
        let item = out.batch_item_mut(b);
        for c in 0..dim {
            item[c * len + offset..c * len + offset + seq.len()].copy_from_slice(seq.channel(c));
        }
        if encode {
            for c in 0..dim {
                for t in 0..seq.len() + offset {
                    item[c * len + t] += position_encoding(t, c, dim);
                }
            }
        }
    }
    out
}

pub fn make_batch(set: &ParallelSet, items: &[BatchItem]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let dim = set.dim();
    let mut src = Vec::with_capacity(items.len());
    let mut trg = Vec::with_capacity(items.len());
    for it in items {
        src.push((set.get(&it.sentence, it.src)?, 0));
        trg.push((set.get(&it.sentence, it.trg)?, 1));
    }
    Ok(Batch {
        src: pad(&src, dim, true),
        trg_in: pad(&trg, dim, true),
        target: pad(&trg, dim, false),
        src_lens: src.iter().map(|(s, _)| s.len()).collect(),
        trg_lens: trg.iter().map(|(s, _)| s.len() + 1).collect(),
        src_speakers: items.iter().map(|i| i.src).collect(),
        trg_speakers: items.iter().map(|i| i.trg).collect(),
    })
}
