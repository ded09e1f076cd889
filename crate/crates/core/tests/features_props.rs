use convs2s::features::{
    compute_speaker_stats, position_encoding, FeatureLayout, FeatureSequence, SpeakerProfile,
};
use convs2s::Real;
use proptest::prelude::*;

fn layout() -> FeatureLayout {
    FeatureLayout { n_mcc: 4 }
}

fn sequence(len: usize, seed: u64) -> FeatureSequence {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let l = layout();
    let mut s = FeatureSequence::zeros(l.dim(), len, 5.0);
    for c in 0..l.vuv() {
        for t in 0..len {
            s.set(c, t, rng.random_range(-3.0..3.0));
        }
    }
    for t in 0..len {
        s.set(l.vuv(), t, if rng.random_bool(0.7) { 1.0 } else { 0.0 });
    }
    s.set(l.vuv(), 0, 1.0);
    s
}

proptest! {
    #[test]
    fn normalize_round_trip(len in 1usize..40, seed in any::<u64>()) {
        let s = sequence(len, seed);
        let p = SpeakerProfile {
            id: 0,
            name: "p".into(),
            mean: (0..5).map(|i| i as Real * 0.7 - 1.0).collect(),
            std: (0..5).map(|i| 0.3 + i as Real * 0.4).collect(),
        };
        let back = s.normalize(&p, &layout()).unwrap().denormalize(&p, &layout()).unwrap();
        for (a, b) in back.data().iter().zip(s.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stack_round_trip(len in 1usize..50, r in 1usize..6, seed in any::<u64>()) {
        let s = sequence(len, seed);
        let st = s.stack_reduce(r).unwrap();
        prop_assert_eq!(st.len(), len.div_ceil(r));
        prop_assert_eq!(st.dim(), s.dim() * r);
        let back = st.unstack(r, Some(len)).unwrap();
        prop_assert_eq!(back.data(), s.data());
    }

    #[test]
    fn interpolation_keeps_voiced_frames(len in 1usize..60, seed in any::<u64>()) {
        let l = layout();
        let s = sequence(len, seed);
        let out = s.interpolate_logf0(&l).unwrap();
        for t in 0..len {
            if s.get(l.vuv(), t) >= 0.5 {
                prop_assert_eq!(out.get(l.logf0(), t), s.get(l.logf0(), t));
            }
        }
        prop_assert_eq!(out.channel(l.vuv()), s.channel(l.vuv()));
    }
}

#[test]
fn normalized_training_data_is_standardised() {
    let l = layout();
    let seqs: Vec<FeatureSequence> = (0..5).map(|i| sequence(40, i)).collect();
    let refs: Vec<&FeatureSequence> = seqs.iter().collect();
    let p = compute_speaker_stats(0, "s", &refs, &l).unwrap();
    let normed: Vec<FeatureSequence> = seqs.iter().map(|s| s.normalize(&p, &l).unwrap()).collect();
    let nrefs: Vec<&FeatureSequence> = normed.iter().collect();
    let q = compute_speaker_stats(0, "s", &nrefs, &l).unwrap();
    for c in 0..l.normalized() {
        assert!(q.mean[c].abs() < 1e-9);
        assert!((q.std[c] - 1.0).abs() < 1e-9);
    }
}

/// Two-pass reference over voiced frames.
#[test]
fn speaker_stats_match_reference() {
    let l = layout();
    let seqs: Vec<FeatureSequence> = (0..3).map(|i| sequence(25, 100 + i)).collect();
    let refs: Vec<&FeatureSequence> = seqs.iter().collect();
    let p = compute_speaker_stats(0, "s", &refs, &l).unwrap();
    for c in 0..l.normalized() {
        let vals: Vec<Real> = seqs
            .iter()
            .flat_map(|s| (0..s.len()).filter(|&t| s.get(l.vuv(), t) >= 0.5).map(move |t| s.get(c, t)))
            .collect();
        let m = vals.iter().sum::<Real>() / vals.len() as Real;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / vals.len() as Real).sqrt();
        assert!((p.mean[c] - m).abs() < 1e-12);
        assert!((p.std[c] - sd).abs() < 1e-12);
    }
}

/// Encodings of positions 0..10000 are pairwise distinct: sort the vectors and
/// compare neighbours.
#[test]
fn position_encoding_is_injective() {
    let dim = 93;
    let mut rows: Vec<Vec<Real>> = (0..10000)
        .map(|p| (0..dim).map(|c| position_encoding(p, c, dim)).collect())
        .collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in rows.windows(2) {
        assert!(w[0] != w[1]);
    }
}

#[test]
fn fseq_round_trip_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let s = sequence(17, 9);
    let path = dir.path().join("a.fseq");
    s.write_fseq(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FSQ1");
    assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4 * 17 * s.dim());
    let back = FeatureSequence::read_fseq(&path).unwrap();
    assert_eq!((back.dim(), back.len(), back.frame_period_ms), (s.dim(), 17, 5.0));
    for (a, b) in back.data().iter().zip(s.data()) {
        assert_eq!(*a, (*b as f32) as Real);
    }
    let bad = dir.path().join("b.fseq");
    std::fs::write(&bad, b"FSQ2xxxx").unwrap();
    assert!(FeatureSequence::read_fseq(&bad).is_err());
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(FeatureSequence::read_fseq(&bad).is_err());
}
