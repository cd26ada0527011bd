//! Linear training graphs: word pronunciations chained with optional silence.

use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, Phone};

use super::model::{PHONE_STATES, SILENCE_STATES};

pub const SILENCE_PHONE: &str = "sil";

/// What sits next to a phone inside the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Neighbor {
    UtteranceEdge,
    WordEdge,
    Phone(Phone),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Phone {
        phone: Phone,
        word: usize,
        left: Neighbor,
        right: Neighbor,
    },
    Silence {
        optional: bool,
    },
}

impl Segment {
    pub fn state_count(&self) -> usize {
        match self {
            Segment::Phone { .. } => PHONE_STATES,
            Segment::Silence { .. } => SILENCE_STATES,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Segment::Phone { phone, .. } => phone,
            Segment::Silence { .. } => SILENCE_PHONE,
        }
    }

    pub fn word(&self) -> Option<usize> {
        match self {
            Segment::Phone { word, .. } => Some(*word),
            Segment::Silence { .. } => None,
        }
    }

    pub fn is_optional(&self) -> bool {
        matches!(self, Segment::Silence { optional: true })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingGraph {
    pub words: Vec<String>,
    pub segments: Vec<Segment>,
}

impl TrainingGraph {
    pub fn emitting_states(&self) -> usize {
        self.segments.iter().filter(|s| !s.is_optional()).map(Segment::state_count).sum()
    }

    pub fn optional_silence_slots(&self) -> usize {
        self.segments.iter().filter(|s| s.is_optional()).count()
    }

    /// Fewest frames any path through the graph needs.
    pub fn min_frames(&self) -> usize {
        self.emitting_states()
    }

    pub fn phones(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| matches!(s, Segment::Phone { .. }))
    }
}

/// First pronunciation of each word, optional silence at both ends and
/// between words. Triphone context is word-internal; word and utterance
/// edges are marked instead.
pub fn compile_training_graph(words: &[String], lexicon: &Lexicon) -> Result<TrainingGraph> {
    if words.is_empty() {
        return Ok(TrainingGraph {
            words: Vec::new(),
            segments: vec![Segment::Silence { optional: false }],
        });
    }
    let mut missing = Vec::new();
    let mut prons = Vec::with_capacity(words.len());
    for w in words {
        match lexicon.get(w).and_then(|p| p.first()) {
            Some(p) if !p.is_empty() => prons.push(p.clone()),
            _ => missing.push(w.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::OutOfVocabulary(missing.join(", ")));
    }
    let last_word = words.len() - 1;
    let mut segments = vec![Segment::Silence { optional: true }];
    for (wi, pron) in prons.iter().enumerate() {
        for (pi, phone) in pron.iter().enumerate() {
            let left = if pi > 0 {
                Neighbor::Phone(pron[pi - 1].clone())
            } else if wi == 0 {
                Neighbor::UtteranceEdge
            } else {
                Neighbor::WordEdge
            };
            let right = if pi + 1 < pron.len() {
                Neighbor::Phone(pron[pi + 1].clone())
            } else if wi == last_word {
                Neighbor::UtteranceEdge
            } else {
                Neighbor::WordEdge
            };
            segments.push(Segment::Phone {
                phone: phone.clone(),
                word: wi,
                left,
                right,
            });
        }
        segments.push(Segment::Silence { optional: true });
    }
    Ok(TrainingGraph {
        words: words.to_vec(),
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        let mut l = Lexicon::default();
        l.insert("bardi", vec!["b".into(), "a".into(), "ɖ".into(), "i".into()]);
        l.insert("abc", vec!["a".into(), "b".into(), "c".into()]);
        l
    }

    #[test]
    fn one_word_three_phones() {
        let g = compile_training_graph(&["abc".into()], &lexicon()).unwrap();
        assert_eq!(g.emitting_states(), 9);
        assert_eq!(g.optional_silence_slots(), 2);
        let first = &g.segments[1];
        assert_eq!(
            first,
            &Segment::Phone {
                phone: "a".into(),
                word: 0,
                left: Neighbor::UtteranceEdge,
                right: Neighbor::Phone("b".into()),
            }
        );
    }

    #[test]
    fn empty_and_oov() {
        let g = compile_training_graph(&[], &lexicon()).unwrap();
        assert_eq!(g.segments, vec![Segment::Silence { optional: false }]);
        match compile_training_graph(&["abc".into(), "zzz".into()], &lexicon()) {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn word_edges_marked() {
        let g = compile_training_graph(&["abc".into(), "bardi".into()], &lexicon()).unwrap();
        let phones: Vec<_> = g.phones().collect();
        assert_eq!(phones.len(), 7);
        match phones[2] {
            Segment::Phone { right, .. } => assert_eq!(right, &Neighbor::WordEdge),
            _ => unreachable!(),
        }
        match phones[3] {
            Segment::Phone { left, word, .. } => {
                assert_eq!(left, &Neighbor::WordEdge);
                assert_eq!(*word, 1);
            }
            _ => unreachable!(),
        }
        assert_eq!(g.optional_silence_slots(), 3);
    }
}
