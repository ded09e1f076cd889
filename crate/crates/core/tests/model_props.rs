use convs2s::kernel::{NormMode, Tape, Tensor};
use convs2s::model::{attend, warp, Lens, LayerSpec, Mode, Model, ModelConfig, NetKind, NetworkSpec, Pass};
use convs2s::{Error, Real};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: Mode) -> ModelConfig {
    let mut c = ModelConfig::desk(mode, 6, 3).with_width(8);
    c.embed_dim = 4;
    c
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Eval-mode forward of one network on a fresh tape.
fn run(model: &mut Model, kind: NetKind, x: &Tensor, k: Option<&[usize]>) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.input(x.clone()).unwrap();
    let mut pass = Pass::eval();
    let out = match kind {
        NetKind::SourceEncoder => {
            let (key, val) = model.src_encode(&mut tape, v, k, &mut pass, None).unwrap();
            tape.concat_channels(&[key, val]).unwrap()
        }
        NetKind::TargetEncoder => model.trg_encode(&mut tape, v, k, &mut pass, None).unwrap(),
        NetKind::TargetDecoder => model.trg_decode(&mut tape, v, k, &mut pass, None).unwrap(),
        NetKind::TargetReconstructor => model.trg_reconstruct(&mut tape, v, k, &mut pass, None).unwrap(),
    };
    tape.value(out).clone()
}

fn frames(t: &Tensor, upto: usize) -> Vec<Real> {
    let (b, c, n) = t.dims3().unwrap();
    let mut out = Vec::new();
    for bi in 0..b {
        for ci in 0..c {
            for ni in 0..upto.min(n) {
                out.push(t.data()[(bi * c + ci) * n + ni]);
            }
        }
    }
    out
}

fn perturb(x: &Tensor, frame: usize) -> Tensor {
    let (b, c, n) = x.dims3().unwrap();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            y.data_mut()[(bi * c + ci) * n + frame] += 0.7;
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn networks_preserve_length(n in 1usize..=64) {
        let mut m = Model::new(small(Mode::ManyToMany), 1).unwrap();
        let x = random(&[1, 6, n], n as u64);
        let r = random(&[1, 8, n], n as u64 + 1);
        let k = [1usize];
        prop_assert_eq!(run(&mut m, NetKind::SourceEncoder, &x, Some(&k)).shape().to_vec(), vec![1, 16, n]);
        prop_assert_eq!(run(&mut m, NetKind::TargetEncoder, &x, Some(&k)).shape().to_vec(), vec![1, 8, n]);
        prop_assert_eq!(run(&mut m, NetKind::TargetDecoder, &r, Some(&k)).shape().to_vec(), vec![1, 6, n]);
        prop_assert_eq!(run(&mut m, NetKind::TargetReconstructor, &r, Some(&k)).shape().to_vec(), vec![1, 6, n]);
    }

    #[test]
    fn attention_columns_are_stochastic(n in 1usize..12, m in 1usize..12, seed in 0u64..1000) {
        let mut tape = Tape::new();
        let k = tape.input(random(&[2, 5, n], seed)).unwrap();
        let q = tape.input(random(&[2, 5, m], seed + 7)).unwrap();
        let a = attend(&mut tape, k, q, Lens::default()).unwrap();
        let a = tape.value(a);
        for b in 0..2 {
            for col in 0..m {
                let s: Real = (0..n).map(|row| a.data()[(b * n + row) * m + col]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn speaker_changes_encoder_output() {
    let mut m = Model::new(small(Mode::ManyToMany), 2).unwrap();
    let x = random(&[1, 6, 10], 3);
    let a = run(&mut m, NetKind::SourceEncoder, &x, Some(&[0]));
    let b = run(&mut m, NetKind::SourceEncoder, &x, Some(&[2]));
    assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-6));
    let a = run(&mut m, NetKind::TargetEncoder, &x, Some(&[0]));
    let b = run(&mut m, NetKind::TargetEncoder, &x, Some(&[1]));
    assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn speaker_mode_combinations() {
    let x = random(&[1, 6, 4], 0);
    let cases = [
        (Mode::Pairwise, NetKind::SourceEncoder, true, false),
        (Mode::Pairwise, NetKind::TargetDecoder, true, false),
        (Mode::ManyToMany, NetKind::SourceEncoder, false, false),
        (Mode::AnyToMany, NetKind::SourceEncoder, true, false),
        (Mode::AnyToMany, NetKind::TargetEncoder, false, false),
    ];
    for (mode, kind, give, _) in cases {
        let mut m = Model::new(small(mode), 0).unwrap();
        let mut tape = Tape::new();
        let input = if kind == NetKind::TargetDecoder { random(&[1, 8, 4], 1) } else { x.clone() };
        let v = tape.input(input).unwrap();
        let k = [0usize];
        let sp = if give { Some(&k[..]) } else { None };
        let mut pass = Pass::eval();
        let err = match kind {
            NetKind::SourceEncoder => m.src_encode(&mut tape, v, sp, &mut pass, None).map(|_| ()),
            NetKind::TargetEncoder => m.trg_encode(&mut tape, v, sp, &mut pass, None).map(|_| ()),
            _ => m.trg_decode(&mut tape, v, sp, &mut pass, None).map(|_| ()),
        };
        assert!(matches!(err, Err(Error::Mode(_))), "{mode} {kind:?}");
    }
    // any-to-many encodes any source without a speaker index
    let mut m = Model::new(small(Mode::AnyToMany), 0).unwrap();
    run(&mut m, NetKind::SourceEncoder, &x, None);
}

fn assert_causal(m: &mut Model, kind: NetKind, x: &Tensor, k: Option<&[usize]>) {
    let base = run(m, kind, x, k);
    for t in [0, 3, 9] {
        let moved = run(m, kind, &perturb(x, t), k);
        assert_eq!(frames(&base, t), frames(&moved, t), "{kind:?} leaks frame {t}");
        assert_ne!(frames(&base, t + 1), frames(&moved, t + 1), "{kind:?} ignores frame {t}");
    }
}

#[test]
fn causal_networks_ignore_the_future() {
    let mut rt = Model::new(small(Mode::Realtime), 4).unwrap();
    let x = random(&[2, 6, 12], 5);
    let r = random(&[2, 8, 12], 6);
    let k = [0usize, 2];
    assert_causal(&mut rt, NetKind::SourceEncoder, &x, Some(&k));
    assert_causal(&mut rt, NetKind::TargetEncoder, &x, Some(&k));
    assert_causal(&mut rt, NetKind::TargetDecoder, &r, Some(&k));
    assert_causal(&mut rt, NetKind::TargetReconstructor, &r, Some(&k));
    let mut pw = Model::new(small(Mode::Pairwise), 4).unwrap();
    assert_causal(&mut pw, NetKind::TargetEncoder, &x, None);
    assert_causal(&mut pw, NetKind::TargetDecoder, &r, None);
    assert!(rt.is_causal(NetKind::SourceEncoder));
    assert!(!pw.is_causal(NetKind::SourceEncoder));
}

#[test]
fn default_reconstructor_sees_the_future() {
    let mut m = Model::new(small(Mode::Pairwise), 8).unwrap();
    let r = random(&[1, 8, 12], 9);
    let base = run(&mut m, NetKind::TargetReconstructor, &r, None);
    let moved = run(&mut m, NetKind::TargetReconstructor, &perturb(&r, 8), None);
    assert_ne!(frames(&base, 8), frames(&moved, 8));
}

/// Target encoder, attention, warp and decoder run on a prefix of the target
/// reproduce the prefix of the full run exactly.
#[test]
fn decoding_chain_is_prefix_consistent() {
    for mode in [Mode::Pairwise, Mode::ManyToMany, Mode::Realtime] {
        let mut m = Model::new(small(mode), 10).unwrap();
        let k = [1usize];
        let sp = (mode != Mode::Pairwise).then_some(&k[..]);
        let x = random(&[1, 6, 9], 11);
        let y = random(&[1, 6, 14], 12);
        let chain = |m: &mut Model, y: Tensor| {
            let mut tape = Tape::new();
            let mut pass = Pass::eval();
            let xv = tape.input(x.clone()).unwrap();
            let yv = tape.input(y).unwrap();
            let (key, val) = m.src_encode(&mut tape, xv, sp, &mut pass, None).unwrap();
            let q = m.trg_encode(&mut tape, yv, sp, &mut pass, None).unwrap();
            let a = attend(&mut tape, key, q, Lens::default()).unwrap();
            let r = warp(&mut tape, val, a).unwrap();
            let out = m.trg_decode(&mut tape, r, sp, &mut pass, None).unwrap();
            tape.value(out).clone()
        };
        let full = chain(&mut m, y.clone());
        for p in [1, 5, 13] {
            let part = chain(&mut m, y.slice_time(0, p).unwrap());
            assert_eq!(frames(&part, p), frames(&full, p), "{mode} prefix {p}");
        }
    }
}

#[test]
fn attention_matches_reference_and_edge_cases() {
    let (d, n, m) = (4, 5, 3);
    let kt = random(&[1, d, n], 20);
    let qt = random(&[1, d, m], 21);
    let mut tape = Tape::new();
    let k = tape.input(kt.clone()).unwrap();
    let q = tape.input(qt.clone()).unwrap();
    let a = attend(&mut tape, k, q, Lens::default()).unwrap();
    let a = tape.value(a).clone();
    for col in 0..m {
        let logits: Vec<Real> = (0..n)
            .map(|row| (0..d).map(|c| kt.data()[c * n + row] * qt.data()[c * m + col]).sum::<Real>() / (d as Real).sqrt())
            .collect();
        let z: Real = logits.iter().map(|l| l.exp()).sum();
        for row in 0..n {
            assert!((a.data()[row * m + col] - logits[row].exp() / z).abs() < 1e-12);
        }
    }

    // zero query column gives a uniform column
    let mut tape = Tape::new();
    let k = tape.input(kt.clone()).unwrap();
    let q = tape.input(Tensor::zeros(&[1, d, 2])).unwrap();
    let a = attend(&mut tape, k, q, Lens::default()).unwrap();
    assert!(tape.value(a).data().iter().all(|v| (v - 1.0 / n as Real).abs() < 1e-12));

    // self-similarity of near-orthogonal wide columns peaks on the diagonal
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let (d, n) = (64, 10);
        let mut data: Vec<Real> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in &mut data {
            *v *= 3.0;
        }
        let kq = Tensor::from_vec(&[1, d, n], data).unwrap();
        let mut tape = Tape::new();
        let k = tape.input(kq.clone()).unwrap();
        let q = tape.input(kq).unwrap();
        let a = attend(&mut tape, k, q, Lens::default()).unwrap();
        let a = tape.value(a);
        for col in 0..n {
            let best = (0..n)
                .max_by(|&i, &j| a.data()[i * n + col].total_cmp(&a.data()[j * n + col]))
                .unwrap();
            assert_eq!(best, col);
        }
    }

    let mut tape = Tape::new();
    let k = tape.input(Tensor::zeros(&[1, 3, 4])).unwrap();
    let q = tape.input(Tensor::zeros(&[1, 2, 4])).unwrap();
    assert!(matches!(attend(&mut tape, k, q, Lens::default()), Err(Error::Shape(_))));
}

#[test]
fn warp_cases() {
    let (d, n) = (3, 4);
    let vt = random(&[1, d, n], 30);
    let mut eye = Tensor::zeros(&[1, n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let mut tape = Tape::new();
    let v = tape.input(vt.clone()).unwrap();
    let a = tape.input(eye).unwrap();
    let r = warp(&mut tape, v, a).unwrap();
    assert_eq!(tape.value(r).data(), vt.data());

    // one-hot column selects a value column; random columns match a reference product
    let mut at = random(&[1, n, 2], 31);
    for row in 0..n {
        at.data_mut()[row * 2] = if row == 2 { 1.0 } else { 0.0 };
    }
    let mut tape = Tape::new();
    let v = tape.input(vt.clone()).unwrap();
    let a = tape.input(at.clone()).unwrap();
    let r = warp(&mut tape, v, a).unwrap();
    let r = tape.value(r);
    for c in 0..d {
        assert_eq!(r.data()[c * 2], vt.data()[c * n + 2]);
        let want: Real = (0..n).map(|i| vt.data()[c * n + i] * at.data()[i * 2 + 1]).sum();
        assert!((r.data()[c * 2 + 1] - want).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let v = tape.input(vt).unwrap();
    let a = tape.input(Tensor::zeros(&[1, n + 1, 2])).unwrap();
    assert!(matches!(warp(&mut tape, v, a), Err(Error::Shape(_))));
}

/// Independent count of one network's scalars from its widths.
fn expected_network(input: usize, output: usize, h: usize, emb: usize, kernel: usize, norm_rows: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k + o;
    let norm = 2 * h * norm_rows;
    conv(input + emb, h, 1) + norm + 12 * (2 * conv(h + emb, h, kernel) + 2 * norm) + conv(h + emb, output, 1)
}

#[test]
fn parameter_counts_follow_channel_arithmetic() {
    let d = 93;
    let pw = ModelConfig::full(Mode::Pairwise, d, 2);
    assert_eq!(pw.hidden, 256);
    let count = |c: &ModelConfig, kind| {
        let spec = NetworkSpec::new(kind, c);
        assert_eq!(spec.out_channels().unwrap(), match kind {
            NetKind::SourceEncoder => 2 * c.attn_dim,
            NetKind::TargetEncoder => c.attn_dim,
            _ => d,
        });
        spec.param_count(c.n_speakers)
    };
    assert_eq!(count(&pw, NetKind::SourceEncoder), expected_network(93, 512, 256, 0, 5, 1));
    assert_eq!(count(&pw, NetKind::TargetEncoder), expected_network(93, 256, 256, 0, 3, 1));
    assert_eq!(count(&pw, NetKind::TargetDecoder), expected_network(256, 93, 256, 0, 3, 1));
    assert_eq!(count(&pw, NetKind::TargetReconstructor), expected_network(256, 93, 256, 0, 5, 1));

    let k = 4;
    let mm = ModelConfig::full(Mode::ManyToMany, d, k);
    assert_eq!(mm.hidden, 512);
    assert_eq!(mm.norm, NormMode::ConditionalBatch);
    assert_eq!(count(&mm, NetKind::SourceEncoder), expected_network(93, 1024, 512, 32, 5, k));
    assert_eq!(count(&mm, NetKind::TargetEncoder), expected_network(93, 512, 512, 32, 3, k));
    assert_eq!(count(&mm, NetKind::TargetDecoder), expected_network(512, 93, 512, 32, 3, k));
    assert_eq!(count(&mm, NetKind::TargetReconstructor), expected_network(512, 93, 512, 32, 5, k));

    // desk-width models allocate exactly what the chains predict
    for mode in [Mode::Pairwise, Mode::ManyToMany, Mode::AnyToMany, Mode::Realtime] {
        let m = Model::new(small(mode), 0).unwrap();
        assert_eq!(m.store.numel(), m.param_count(), "{mode}");
    }
}

#[test]
fn embedding_appends_add_their_width() {
    let c = small(Mode::ManyToMany);
    let spec = NetworkSpec::new(NetKind::TargetDecoder, &c);
    let mut width = spec.in_channels;
    let mut appends = 0;
    for l in &spec.layers {
        match *l {
            LayerSpec::AppendEmbedding { width: w } => {
                assert_eq!(w, c.embed_dim);
                width += w;
                appends += 1;
            }
            LayerSpec::Conv { input, output, .. } | LayerSpec::Glu { input, output, .. } => {
                assert_eq!(input, width);
                width = output;
            }
            _ => {}
        }
    }
    assert_eq!(appends, 14);
    let glus: Vec<_> = spec
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Glu { dilation, .. } => Some(*dilation),
            _ => None,
        })
        .collect();
    assert_eq!(glus, [1, 3, 9, 27, 1, 3, 9, 27, 1, 3, 9, 27]);
    let any = NetworkSpec::new(NetKind::SourceEncoder, &small(Mode::AnyToMany));
    assert!(!any.layers.iter().any(|l| matches!(l, LayerSpec::AppendEmbedding { .. })));
}
