//! Aligning corpora with a trained model.

use rayon::prelude::*;

use super::graph::compile_training_graph;
use super::model::{AcousticModel, SpeakerTransform, Stage};
use super::train::lda_features;
use super::viterbi::{viterbi_align, Alignment};
use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::features::{compute_corpus_features, FeatureMatrix, UtteranceFeatures};
use crate::lexicon::Lexicon;
use crate::textgrid::{Interval, Tier, TierKind};

/// Features in the model's space (before any speaker transform).
pub fn model_features(model: &AcousticModel, f: &UtteranceFeatures) -> Result<FeatureMatrix> {
    match (&model.lda, model.stage) {
        (Some(lda), Stage::Lda | Stage::Sat) => lda_features(&f.statics, lda),
        _ => Ok(f.full.clone()),
    }
}

#[derive(Debug, Clone)]
pub struct CorpusAlignment {
    /// In corpus order, for every utterance that aligned.
    pub alignments: Vec<Alignment>,
    /// Utterances that could not be aligned, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Viterbi-align every utterance; the speaker's transform is used when the
/// model has one, the identity otherwise. Out-of-vocabulary words are an
/// error; utterances with no admissible path are reported and skipped.
pub fn align_corpus(model: &AcousticModel, corpus: &Corpus, lexicon: &Lexicon) -> Result<CorpusAlignment> {
    let feats = compute_corpus_features(corpus, &model.feature_config)?;
    let results: Vec<Result<std::result::Result<Alignment, String>>> = corpus
        .utterances
        .par_iter()
        .zip(&feats)
        .map(|(u, f)| {
            let graph = compile_training_graph(&u.words(), lexicon)?;
            let x = model_features(model, f)?;
            let identity;
            let transform = match model.speaker_transforms.get(&u.speaker_id) {
                Some(t) => Some(t),
                None if model.stage == Stage::Sat => {
                    identity = SpeakerTransform::identity(u.speaker_id.clone(), model.dims);
                    Some(&identity)
                }
                None => None,
            };
            match viterbi_align(model, &u.id, &x, &graph, transform, u.duration()) {
                Ok(a) => Ok(Ok(a)),
                Err(e @ Error::NoPath { .. }) => Ok(Err(e.to_string())),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut alignments = Vec::new();
    let mut failures = Vec::new();
    for (u, r) in corpus.utterances.iter().zip(results) {
        match r? {
            Ok(a) => alignments.push(a),
            Err(why) => {
                log::warn!("could not align {}: {why}", u.id);
                failures.push((u.id.clone(), why));
            }
        }
    }
    Ok(CorpusAlignment { alignments, failures })
}

pub fn alignment_tier(alignment: &Alignment) -> Result<Tier> {
    Ok(Tier::new(
        "phones",
        alignment
            .phones
            .iter()
            .map(|p| Interval::new(p.start, p.end, p.phone.clone()))
            .collect(),
    )?
    .with_kind(TierKind::Phone))
}

/// Copies of the aligned utterances with the hypothesis as phone tier.
pub fn with_hypothesis_tiers(corpus: &Corpus, aligned: &CorpusAlignment) -> Result<Corpus> {
    let by_id: std::collections::HashMap<&str, &Alignment> =
        aligned.alignments.iter().map(|a| (a.utterance_id.as_str(), a)).collect();
    let mut utterances: Vec<Utterance> = Vec::new();
    for u in &corpus.utterances {
        if let Some(a) = by_id.get(u.id.as_str()) {
            let mut v = u.clone();
            v.phone_tier = Some(alignment_tier(a)?);
            utterances.push(v);
        }
    }
    Corpus::new(corpus.name.clone(), utterances)
}
