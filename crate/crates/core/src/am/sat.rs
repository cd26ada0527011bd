//! Per-speaker diagonal affine feature transforms.

use super::gmm::DiagGmm;
use super::model::SpeakerTransform;

/// Maximum-likelihood `y = a * x + b` per dimension, given each frame's
/// aligned mixture. Component posteriors are taken under `current` (identity
/// if absent). Per dimension the optimum solves `C a^2 - D a - N = 0` for the
/// positive root, with `b` following in closed form. Fewer than `min_frames`
/// frames yields the identity.
pub fn estimate_speaker_transform(
    speaker: &str,
    frames: &[(&[f64], &DiagGmm)],
    current: Option<&SpeakerTransform>,
    min_frames: usize,
) -> SpeakerTransform {
    let dims = frames.first().map_or(0, |(x, _)| x.len());
    if frames.len() < min_frames || dims == 0 {
        log::warn!(
            "speaker {speaker}: {} frames is below {min_frames}; using the identity transform",
            frames.len()
        );
        return SpeakerTransform::identity(speaker, dims);
    }
    let n = frames.len() as f64;
    let mut s0 = vec![0.0; dims];
    let mut s1 = vec![0.0; dims];
    let mut s2 = vec![0.0; dims];
    let mut sm = vec![0.0; dims];
    let mut sxm = vec![0.0; dims];
    let mut y = vec![0.0; dims];
    let mut post = Vec::new();
    for (x, gmm) in frames {
        let xin: &[f64] = match current {
            Some(t) => {
                t.apply_row(x, &mut y);
                &y
            }
            None => x,
        };
        gmm.posteriors(xin, &mut post);
        for (k, &g) in post.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let mean = &gmm.means()[k];
            let var = &gmm.vars()[k];
            for d in 0..dims {
                let w = g / var[d];
                s0[d] += w;
                s1[d] += w * x[d];
                s2[d] += w * x[d] * x[d];
                sm[d] += w * mean[d];
                sxm[d] += w * x[d] * mean[d];
            }
        }
    }
    let mut scale = vec![1.0; dims];
    let mut offset = vec![0.0; dims];
    for d in 0..dims {
        let c = s2[d] - s1[d] * s1[d] / s0[d];
        let dd = sxm[d] - sm[d] * s1[d] / s0[d];
        if !(c > 1e-12) || !c.is_finite() {
            continue;
        }
        let a = (dd + (dd * dd + 4.0 * c * n).sqrt()) / (2.0 * c);
        if !(a > 0.0 && a.is_finite()) {
            continue;
        }
        scale[d] = a;
        offset[d] = (sm[d] - a * s1[d]) / s0[d];
    }
    SpeakerTransform {
        speaker_id: speaker.to_owned(),
        scale,
        offset,
    }
}
