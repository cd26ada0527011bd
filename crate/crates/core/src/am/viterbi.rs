//! Exact Viterbi search over expanded linear graphs.

use std::collections::HashMap;

use super::graph::{Segment, TrainingGraph};
use super::model::{AcousticModel, ModelKey, SpeakerTransform};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Log-probability charged for entering or skipping an optional silence.
pub const OPTIONAL_SILENCE_LOG_PROB: f64 = -std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedState {
    pub segment: usize,
    pub sub: usize,
    /// Index into the per-frame emission row.
    pub pdf: usize,
    pub self_lp: f64,
    pub forward_lp: f64,
    /// Predecessor states with the full arc log-probability.
    pub preds: Vec<(usize, f64)>,
    /// Log-probability of starting here; `-inf` if not allowed.
    pub init: f64,
    /// Log-probability of ending here; `-inf` if not allowed.
    pub fin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedGraph {
    pub states: Vec<ExpandedState>,
    pub n_pdfs: usize,
}

/// Expand segments into HMM states. `per_segment[i]` lists `(pdf, self-loop
/// probability)` for each emitting state of segment `i`.
pub fn expand(segments: &[Segment], per_segment: &[Vec<(usize, f64)>], n_pdfs: usize) -> ExpandedGraph {
    // (source state or utterance start, forward log-prob, junction log-prob)
    let mut sources: Vec<(Option<usize>, f64, f64)> = vec![(None, 0.0, 0.0)];
    let mut states: Vec<ExpandedState> = Vec::new();
    for (si, (seg, spec)) in segments.iter().zip(per_segment).enumerate() {
        let optional = seg.is_optional();
        let junction = if optional { OPTIONAL_SILENCE_LOG_PROB } else { 0.0 };
        let first = states.len();
        for (sub, &(pdf, p)) in spec.iter().enumerate() {
            let mut st = ExpandedState {
                segment: si,
                sub,
                pdf,
                self_lp: p.ln(),
                forward_lp: (1.0 - p).ln(),
                preds: Vec::new(),
                init: f64::NEG_INFINITY,
                fin: f64::NEG_INFINITY,
            };
            if sub == 0 {
                for &(src, fwd, junc) in &sources {
                    let j = junc + junction;
                    match src {
                        None => st.init = j,
                        Some(s) => st.preds.push((s, fwd + j)),
                    }
                }
            } else {
                let prev = first + sub - 1;
                st.preds.push((prev, states[prev].forward_lp));
            }
            states.push(st);
        }
        let last = states.len() - 1;
        let exit = (Some(last), states[last].forward_lp, 0.0);
        if optional {
            for s in &mut sources {
                s.2 += OPTIONAL_SILENCE_LOG_PROB;
            }
            sources.push(exit);
        } else {
            sources = vec![exit];
        }
    }
    for &(src, _, junc) in &sources {
        if let Some(s) = src {
            states[s].fin = junc;
        }
    }
    ExpandedGraph { states, n_pdfs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    /// Expanded state per frame.
    pub states: Vec<usize>,
    pub score: f64,
}

/// Best path through `graph` for a `frames × n_pdfs` emission table.
pub fn viterbi(graph: &ExpandedGraph, emissions: &[f64], frames: usize) -> Result<ViterbiPath> {
    let n = graph.states.len();
    let np = graph.n_pdfs;
    assert_eq!(emissions.len(), frames * np, "emission table shape");
    if frames == 0 || n == 0 {
        return Err(Error::NoPath { frames, required: 1 });
    }
    let mut prev = vec![f64::NEG_INFINITY; n];
    let mut cur = vec![f64::NEG_INFINITY; n];
    let mut back = vec![u32::MAX; frames * n];
    for (s, st) in graph.states.iter().enumerate() {
        if st.init > f64::NEG_INFINITY {
            prev[s] = st.init + emissions[st.pdf];
        }
    }
    for t in 1..frames {
        let row = &emissions[t * np..(t + 1) * np];
        let bp = &mut back[t * n..(t + 1) * n];
        for (s, st) in graph.states.iter().enumerate() {
            let mut best = prev[s] + st.self_lp;
            let mut arg = s as u32;
            for &(p, lp) in &st.preds {
                let c = prev[p] + lp;
                if c > best {
                    best = c;
                    arg = p as u32;
                }
            }
            if best > f64::NEG_INFINITY {
                cur[s] = best + row[st.pdf];
                bp[s] = arg;
            } else {
                cur[s] = f64::NEG_INFINITY;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (s, st) in graph.states.iter().enumerate() {
        if st.fin > f64::NEG_INFINITY {
            let c = prev[s] + st.fin;
            if c > best.0 {
                best = (c, s);
            }
        }
    }
    if best.1 == usize::MAX || !best.0.is_finite() {
        let required = min_path_frames(graph);
        return Err(Error::NoPath { frames, required });
    }
    let mut path = vec![0; frames];
    let mut s = best.1;
    for t in (0..frames).rev() {
        path[t] = s;
        if t > 0 {
            s = back[t * n + s] as usize;
        }
    }
    Ok(ViterbiPath {
        states: path,
        score: best.0,
    })
}

/// Shortest admissible path length, in frames.
pub fn min_path_frames(graph: &ExpandedGraph) -> usize {
    let n = graph.states.len();
    let mut dist = vec![usize::MAX; n];
    for (s, st) in graph.states.iter().enumerate() {
        if st.init > f64::NEG_INFINITY {
            dist[s] = 1;
        }
        for &(p, _) in &st.preds {
            if dist[p] != usize::MAX {
                dist[s] = dist[s].min(dist[p] + 1);
            }
        }
    }
    graph
        .states
        .iter()
        .enumerate()
        .filter(|(_, st)| st.fin > f64::NEG_INFINITY)
        .map(|(s, _)| dist[s])
        .min()
        .unwrap_or(usize::MAX)
}

/// Score of a given state path, or `None` if the path is not admissible.
pub fn path_score(graph: &ExpandedGraph, emissions: &[f64], path: &[usize]) -> Option<f64> {
    let np = graph.n_pdfs;
    let first = *path.first()?;
    let st0 = &graph.states[first];
    if st0.init == f64::NEG_INFINITY {
        return None;
    }
    let mut score = st0.init + emissions[st0.pdf];
    for t in 1..path.len() {
        let (a, b) = (path[t - 1], path[t]);
        let st = &graph.states[b];
        let lp = if a == b {
            st.self_lp
        } else {
            st.preds.iter().find(|(p, _)| *p == a)?.1
        };
        score = score + lp + emissions[t * np + st.pdf];
    }
    let last = &graph.states[*path.last()?];
    if last.fin == f64::NEG_INFINITY {
        return None;
    }
    Some(score + last.fin)
}

/// An utterance graph resolved against a model.
#[derive(Debug, Clone)]
pub struct UtteranceGraph {
    pub expanded: ExpandedGraph,
    /// Model key and state index for each local pdf.
    pub pdf_keys: Vec<(ModelKey, usize)>,
}

pub fn resolve_graph(model: &AcousticModel, graph: &TrainingGraph) -> Result<UtteranceGraph> {
    let mut index: HashMap<(ModelKey, usize), usize> = HashMap::new();
    let mut pdf_keys = Vec::new();
    let mut per_segment = Vec::with_capacity(graph.segments.len());
    for seg in &graph.segments {
        let key = model.resolve(seg)?;
        let hmm = &model.hmms[&key];
        let spec = hmm
            .states
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let id = *index.entry((key.clone(), i)).or_insert_with(|| {
                    pdf_keys.push((key.clone(), i));
                    pdf_keys.len() - 1
                });
                (id, st.self_loop)
            })
            .collect();
        per_segment.push(spec);
    }
    Ok(UtteranceGraph {
        expanded: expand(&graph.segments, &per_segment, pdf_keys.len()),
        pdf_keys,
    })
}

/// `frames × pdfs` log-likelihood table, with the speaker transform and its
/// Jacobian applied when given.
pub fn emission_table(
    model: &AcousticModel,
    ug: &UtteranceGraph,
    feats: &FeatureMatrix,
    transform: Option<&SpeakerTransform>,
) -> Vec<f64> {
    let np = ug.pdf_keys.len();
    let gmms: Vec<_> = ug.pdf_keys.iter().map(|(k, i)| &model.hmms[k].states[*i].gmm).collect();
    let mut out = vec![0.0; feats.frames() * np];
    let mut buf = vec![0.0; feats.dims()];
    let log_det = transform.map_or(0.0, SpeakerTransform::log_det);
    for t in 0..feats.frames() {
        let x: &[f64] = match transform {
            Some(tr) => {
                tr.apply_row(feats.row(t), &mut buf);
                &buf
            }
            None => feats.row(t),
        };
        for (j, g) in gmms.iter().enumerate() {
            out[t * np + j] = g.log_likelihood(x) + log_det;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPhone {
    pub phone: String,
    pub start: f64,
    pub end: f64,
    pub word: Option<usize>,
    pub first_frame: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub utterance_id: String,
    pub phones: Vec<AlignedPhone>,
    pub log_likelihood: f64,
}

/// Group a state path into segments with frame-snapped times.
pub fn path_to_alignment(
    id: &str,
    graph: &TrainingGraph,
    expanded: &ExpandedGraph,
    path: &ViterbiPath,
    hop: f64,
    origin: f64,
    duration: f64,
) -> Alignment {
    let frames = path.states.len();
    let time = |k: usize| {
        if k == 0 {
            0.0
        } else if k >= frames {
            duration
        } else {
            (origin + k as f64 * hop).min(duration)
        }
    };
    let mut phones: Vec<AlignedPhone> = Vec::new();
    let mut t = 0;
    while t < frames {
        let seg = expanded.states[path.states[t]].segment;
        let mut e = t + 1;
        while e < frames && expanded.states[path.states[e]].segment == seg {
            e += 1;
        }
        let s = &graph.segments[seg];
        phones.push(AlignedPhone {
            phone: s.label().to_owned(),
            start: time(t),
            end: time(e),
            word: s.word(),
            first_frame: t,
            frames: e - t,
        });
        t = e;
    }
    Alignment {
        utterance_id: id.to_owned(),
        phones,
        log_likelihood: path.score,
    }
}

/// Forced alignment of one utterance.
pub fn viterbi_align(
    model: &AcousticModel,
    id: &str,
    feats: &FeatureMatrix,
    graph: &TrainingGraph,
    transform: Option<&SpeakerTransform>,
    duration: f64,
) -> Result<Alignment> {
    if feats.dims() != model.dims {
        return Err(Error::DimensionMismatch {
            expected: model.dims,
            got: feats.dims(),
        });
    }
    let ug = resolve_graph(model, graph)?;
    let required = graph.min_frames();
    if feats.frames() < required {
        return Err(Error::NoPath {
            frames: feats.frames(),
            required,
        });
    }
    let em = emission_table(model, &ug, feats, transform);
    let path = viterbi(&ug.expanded, &em, feats.frames())?;
    Ok(path_to_alignment(id, graph, &ug.expanded, &path, feats.hop, feats.origin, duration))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_phone_segments() -> Vec<Segment> {
        use super::super::graph::Neighbor;
        vec![
            Segment::Phone {
                phone: "a".into(),
                word: 0,
                left: Neighbor::UtteranceEdge,
                right: Neighbor::Phone("b".into()),
            },
            Segment::Phone {
                phone: "b".into(),
                word: 0,
                left: Neighbor::Phone("a".into()),
                right: Neighbor::UtteranceEdge,
            },
        ]
    }

    #[test]
    fn disjoint_supports_split_at_frame_three() {
        let segs = two_phone_segments();
        let spec = vec![vec![(0, 0.5), (1, 0.5), (2, 0.5)], vec![(3, 0.5), (4, 0.5), (5, 0.5)]];
        let g = expand(&segs, &spec, 6);
        // Phone a emits well on frames 0..3 only, phone b on 3..6.
        let mut em = vec![-50.0; 6 * 6];
        for t in 0..6 {
            let (lo, hi) = if t < 3 { (0, 3) } else { (3, 6) };
            for p in lo..hi {
                em[t * 6 + p] = -1.0;
            }
        }
        let path = viterbi(&g, &em, 6).unwrap();
        assert_eq!(path.states, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(path_score(&g, &em, &path.states), Some(path.score));
    }

    #[test]
    fn too_few_frames() {
        let segs = two_phone_segments();
        let spec = vec![vec![(0, 0.5); 3], vec![(1, 0.5); 3]];
        let g = expand(&segs, &spec, 2);
        assert_eq!(min_path_frames(&g), 6);
        assert!(matches!(
            viterbi(&g, &vec![0.0; 5 * 2], 5),
            Err(Error::NoPath { frames: 5, required: 6 })
        ));
    }
}
