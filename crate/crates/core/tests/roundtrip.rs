mod common;

use alignlab::audio::{read_wav, write_wav, AudioClip};
use alignlab::textgrid::{parse_textgrid, parse_textgrid_bytes, serialize_textgrid, serialize_textgrid_short, Interval, Tier};
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn textgrid_round_trip(g in random_grid()) {
        let long = serialize_textgrid(&g.tiers, g.duration).unwrap();
        prop_assert_eq!(&parse_textgrid(&long).unwrap(), &g);
        let short = serialize_textgrid_short(&g.tiers, g.duration).unwrap();
        prop_assert_eq!(&parse_textgrid(&short).unwrap(), &g);
        prop_assert_eq!(&parse_textgrid_bytes(&utf16le(&long)).unwrap(), &g);
        // Serializing the parse gives the same text back.
        let again = parse_textgrid(&long).unwrap();
        prop_assert_eq!(serialize_textgrid(&again.tiers, again.duration).unwrap(), long);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wav_round_trip(samples in prop::collection::vec(-1.0f64..=1.0, 1..4000), rate in prop::sample::select(vec![8000u32, 16_000, 44_100])) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new(samples, rate).unwrap();
        prop_assert_eq!(write_wav(&clip, &path).unwrap(), 0);
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.sample_rate(), rate);
        prop_assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }
}

#[test]
fn gaps_are_filled_on_write() {
    let t = Tier::new("words", vec![Interval::new(0.0, 1.0, "a"), Interval::new(2.0, 3.0, "b")]).unwrap();
    let g = parse_textgrid(&serialize_textgrid(&[t], 3.0).unwrap()).unwrap();
    let iv = &g.tiers[0].intervals;
    assert_eq!(iv.len(), 3);
    assert_eq!((iv[1].start, iv[1].end, iv[1].label.as_str()), (1.0, 2.0, ""));
}

#[test]
fn clipped_sample_is_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loud.wav");
    let clip = AudioClip::new(vec![0.0, 1.5, -0.25], 16_000).unwrap();
    assert_eq!(write_wav(&clip, &path).unwrap(), 1);
    let back = read_wav(&path).unwrap();
    assert!((back.samples()[1] - 32767.0 / 32768.0).abs() < 1e-12);
}
