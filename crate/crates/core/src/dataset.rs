//! Corpus records turned into token-level training/eval samples.

use crate::error::Result;
use crate::layout::{Geometry, Vocab};
use crate::synth::{self, Corpus, Split, StudyRecord};
use crate::tokenizer::{fit_codebook, text_encode, vq_encode, Codebook, ReportVocab, ToyImage};

pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;

/// Everything needed to map between raw studies and token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizers {
    pub words: ReportVocab,
    pub codebook: Codebook,
    pub patch: usize,
    pub image_side: usize,
}

impl Tokenizers {
    /// Fits the codebook on training-split images only.
    pub fn fit(corpus: &Corpus, k: usize, patch: usize, seed: u64) -> Result<Self> {
        let images: Vec<ToyImage> = corpus.split(Split::Train).map(|r| r.image.clone()).collect();
        let images = if images.is_empty() {
            corpus.records.iter().map(|r| r.image.clone()).collect()
        } else {
            images
        };
        Ok(Self {
            words: synth::report_vocab(corpus.pathologies()),
            codebook: fit_codebook(&images, k, patch, seed)?,
            patch,
            image_side: synth::IMAGE_SIDE,
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.words.len(), self.codebook.k)
    }

    pub fn geometry(&self, pathologies: usize) -> Geometry {
        let side = self.image_side / self.patch;
        Geometry {
            n_x: side * side,
            n_r: synth::max_report_len(pathologies),
        }
    }

    pub fn encode_image(&self, img: &ToyImage) -> Result<Vec<usize>> {
        vq_encode(img, &self.codebook, self.patch)
    }

    pub fn decode_image(&self, codes: &[usize]) -> Result<ToyImage> {
        crate::tokenizer::vq_decode(codes, &self.codebook, self.patch, self.image_side, self.image_side)
    }

    pub fn encode_report(&self, report: &str) -> Result<Vec<usize>> {
        text_encode(report, &self.words)
    }

    pub fn decode_report(&self, ids: &[usize]) -> Result<String> {
        crate::tokenizer::text_decode(ids, &self.words)
    }
}

/// One study in token form, with its prior study when one exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patient_id: u64,
    pub time_step: u32,
    pub split: Split,
    pub report: Vec<usize>,
    pub image: Vec<usize>,
    pub prior_image: Option<Vec<usize>>,
    pub delta: Option<f64>,
    pub labels: Vec<f64>,
}

impl Sample {
    pub fn has_prior(&self) -> bool {
        self.prior_image.is_some()
    }
}

pub fn tokenize_record(corpus: &Corpus, rec: &StudyRecord, tok: &Tokenizers) -> Result<Sample> {
    let prior = corpus.prior(rec);
    Ok(Sample {
        patient_id: rec.patient_id,
        time_step: rec.time_step,
        split: rec.split,
        report: tok.encode_report(&rec.report)?,
        image: tok.encode_image(&rec.image)?,
        prior_image: prior.map(|p| tok.encode_image(&p.image)).transpose()?,
        delta: prior.and(rec.delta),
        labels: rec.labels.iter().map(|&l| f64::from(l)).collect(),
    })
}

/// Samples of one split, in corpus order.
pub fn tokenize_split(corpus: &Corpus, split: Split, tok: &Tokenizers) -> Result<Vec<Sample>> {
    corpus
        .split(split)
        .map(|r| tokenize_record(corpus, r, tok))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priors_attach_to_second_studies() {
        let corpus = synth::generate_corpus(0, 20, 0.5, 4).unwrap();
        let tok = Tokenizers::fit(&corpus, 16, 4, 0).unwrap();
        let samples = tokenize_split(&corpus, Split::Train, &tok).unwrap();
        assert_eq!(samples.len(), corpus.split(Split::Train).count());
        for s in &samples {
            assert_eq!(s.has_prior(), s.time_step == 1);
            assert_eq!(s.delta.is_some(), s.has_prior());
            assert_eq!(s.image.len(), tok.geometry(4).n_x);
        }
        assert!(samples.iter().any(Sample::has_prior));
    }
}
