use convs2s::features::{FeatureLayout, FeatureSequence};
use convs2s::metrics::*;
use convs2s::Real;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Cheapest path cost over every monotone path, accumulated from the start.
fn brute_force(a: &[Vec<Real>], b: &[Vec<Real>]) -> f64 {
    fn walk(a: &[Vec<Real>], b: &[Vec<Real>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + euclidean(&a[i], &b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn path_cost(a: &[Vec<Real>], b: &[Vec<Real>], p: &DtwPath) -> f64 {
    p.pairs.iter().map(|&(i, j)| euclidean(&a[i], &b[j])).sum()
}

#[test]
fn dtw_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let dim = rng.random_range(1..=4);
        let (a, b) = (frames(n, dim, &mut rng), frames(m, dim, &mut rng));
        let p = dtw_align(&a, &b).unwrap();
        assert_eq!(p.cost, brute_force(&a, &b));
        assert!(p.is_valid(n, m));
        assert!((path_cost(&a, &b, &p) - p.cost).abs() < 1e-12);
    }
}

#[test]
fn dtw_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = frames(9, 5, &mut rng);
    let p = dtw_align(&a, &a).unwrap();
    assert_eq!(p.cost, 0.0);
    assert_eq!(p.pairs, (0..9).map(|i| (i, i)).collect::<Vec<_>>());

    let b: Vec<Vec<Real>> = a.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
    let p = dtw_align(&a, &b).unwrap();
    assert_eq!(p.cost, 0.0);
    assert!(p.is_valid(9, 18));
    for (i, _) in a.iter().enumerate() {
        assert!(p.pairs.contains(&(i, 2 * i)) && p.pairs.contains(&(i, 2 * i + 1)));
    }

    // flat costs: each cell takes its diagonal predecessor, then the one
    // behind in the first sequence
    let z = vec![vec![0.0]; 3];
    let p = dtw_align(&z, &z[..2]).unwrap();
    assert_eq!(p.pairs, vec![(0, 0), (1, 0), (2, 1)]);
    let p = dtw_align(&z[..2], &z).unwrap();
    assert_eq!(p.pairs, vec![(0, 0), (0, 1), (1, 2)]);
    assert!(dtw_align(&[], &a).is_err());
    assert!(dtw_align(&a, &[]).is_err());
}

#[test]
fn mcd_fixtures() {
    let x: Vec<Real> = (0..28).map(|i| i as Real * 0.1).collect();
    assert_eq!(mcd(&x, &x), 0.0);
    let mut y = x.clone();
    y[4] += 1.0;
    let want = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    assert!((mcd(&y, &x) - want).abs() < 1e-9);
    assert!((want - 6.1419).abs() < 1e-4);
    let mut z = x.clone();
    z[0] += 5.0;
    assert_eq!(mcd(&z, &x), 0.0);
}

proptest! {
    #[test]
    fn mcd_is_a_metric(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = frames(3, 28, &mut rng);
        let (a, b, c) = (&v[0], &v[1], &v[2]);
        prop_assert!(mcd(a, b) >= 0.0);
        prop_assert_eq!(mcd(a, b), mcd(b, a));
        prop_assert!(mcd(a, c) <= mcd(a, b) + mcd(b, c) + 1e-9);
    }

    #[test]
    fn lfc_is_affine_invariant(seed in 0u64..100_000, scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let layout = FeatureLayout::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = contour(&layout, 20, &mut rng);
        let c = contour(&layout, 20, &mut rng);
        let p = diagonal(20);
        let base = lfc(&c, &r, &p, &layout).unwrap();
        let (c2, r2) = (affine(&c, &layout, scale, shift), affine(&r, &layout, scale, shift));
        prop_assert!((lfc(&c2, &r2, &p, &layout).unwrap() - base).abs() < 1e-9);
    }
}

fn contour(layout: &FeatureLayout, n: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
    let mut s = FeatureSequence::zeros(layout.dim(), n, 8.0);
    for t in 0..n {
        s.set(layout.logf0(), t, rng.random_range(4.0..6.0));
        s.set(layout.vuv(), t, 1.0);
    }
    s
}

fn affine(s: &FeatureSequence, layout: &FeatureLayout, scale: f64, shift: f64) -> FeatureSequence {
    let mut out = s.clone();
    out.channel_mut(layout.logf0()).iter_mut().for_each(|v| *v = *v * scale + shift);
    out
}

fn diagonal(n: usize) -> DtwPath {
    DtwPath { pairs: (0..n).map(|i| (i, i)).collect(), cost: 0.0 }
}

#[test]
fn lfc_cases() {
    let layout = FeatureLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let r = contour(&layout, 30, &mut rng);
    let p = diagonal(30);
    assert!((lfc(&r, &r, &p, &layout).unwrap() - 1.0).abs() < 1e-12);
    let mean = r.channel(layout.logf0()).iter().sum::<Real>() / 30.0;
    let mut flipped = r.clone();
    flipped.channel_mut(layout.logf0()).iter_mut().for_each(|v| *v = 2.0 * mean - *v);
    assert!((lfc(&flipped, &r, &p, &layout).unwrap() + 1.0).abs() < 1e-12);

    // reference loop over jointly voiced frames, with two converted frames
    // folded onto the last reference frame
    let mut c = contour(&layout, 31, &mut rng);
    for t in [3, 7, 8, 20] {
        c.set(layout.vuv(), t, 0.0);
    }
    let mut rv = r.clone();
    rv.set(layout.vuv(), 11, 0.0);
    let mut pairs: Vec<(usize, usize)> = (0..30).map(|i| (i, i)).collect();
    pairs.push((30, 29));
    let path = DtwPath { pairs, cost: 0.0 };
    let (mut x, mut y) = (vec![], vec![]);
    for j in 0..30 {
        let folded: Vec<usize> = if j == 29 { vec![29, 30] } else { vec![j] };
        let voiced = folded.iter().all(|&i| c.get(layout.vuv(), i) >= 0.5) && rv.get(layout.vuv(), j) >= 0.5;
        if voiced {
            x.push(folded.iter().map(|&i| c.get(layout.logf0(), i)).sum::<Real>() / folded.len() as Real);
            y.push(rv.get(layout.logf0(), j));
        }
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut dx, mut dy) = (0.0, 0.0);
    for k in 0..x.len() {
        num += (x[k] - mx) * (y[k] - my);
        dx += (x[k] - mx).powi(2);
        dy += (y[k] - my).powi(2);
    }
    let want = num / (dx * dy).sqrt();
    assert!((lfc(&c, &rv, &path, &layout).unwrap() - want).abs() < 1e-12);

    let mut silent = r.clone();
    silent.channel_mut(layout.vuv()).iter_mut().skip(1).for_each(|v| *v = 0.0);
    assert!(lfc(&silent, &r, &p, &layout).is_err());
}

/// Path whose converted index advances `rate` frames per reference frame in
/// each segment of `segment` reference frames.
fn stair_path(rates: &[usize], segment: usize) -> DtwPath {
    let mut pairs = vec![(0, 0)];
    let (mut q, mut p) = (0, 0);
    for &rate in rates {
        for _ in 0..segment {
            q += 1;
            p += 1;
            pairs.push((q, p));
            for _ in 1..rate {
                q += 1;
                pairs.push((q, p));
            }
        }
    }
    DtwPath { pairs, cost: 0.0 }
}

#[test]
fn ldr_fixtures() {
    assert_eq!(ldr(&diagonal(32)), None);
    let d = diagonal(100);
    assert!(local_slopes(&d).iter().all(|&s| (s - 1.0).abs() < 1e-12));
    assert_eq!(ldr_deviation(&[ldr(&d).unwrap()]), 0.0);

    // converted twice as fast: each converted frame covers two reference frames
    let layout = FeatureLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let conv = FeatureSequence::new(layout.dim(), 60, 8.0, (0..layout.dim() * 60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut reference = FeatureSequence::zeros(layout.dim(), 120, 8.0);
    for t in 0..120 {
        for c in 0..layout.dim() {
            reference.set(c, t, conv.get(c, t / 2));
        }
    }
    let p = align(&conv, &reference, &layout).unwrap();
    let l = ldr(&p).unwrap();
    assert!((ldr_deviation(&[l]) - 50.0).abs() < 1.0, "{l}");

    // piecewise constant rates 1, 2, 1
    let segment = 40;
    let p = stair_path(&[1, 2, 1], segment);
    let slopes = local_slopes(&p);
    let half = LDR_WINDOW / 2;
    let mut ends = vec![0];
    let mut count = 0;
    for &rate in &[1, 2, 1] {
        count += segment * rate;
        ends.push(count);
    }
    for (k, &rate) in [1.0, 2.0, 1.0].iter().enumerate() {
        for j in ends[k] + half + 1..ends[k + 1].saturating_sub(half) {
            if j >= half && j - half < slopes.len() {
                let s = slopes[j - half];
                assert!((s - rate).abs() < 0.05 * rate, "point {j}: slope {s}, rate {rate}");
            }
        }
    }
}

#[test]
fn swapped_alignment_inverts_the_ratio() {
    let layout = FeatureLayout { n_mcc: 6 };
    let render = |n: usize, rate: f64| {
        let mut s = FeatureSequence::zeros(layout.dim(), n, 8.0);
        for t in 0..n {
            let u = t as f64 * rate;
            for c in 0..6 {
                s.set(c, t, (u * (0.05 + 0.03 * c as f64) + c as f64).sin());
            }
        }
        s
    };
    let a = render(200, 1.0);
    let b = render(150, 200.0 / 150.0);
    let l = ldr(&align(&a, &b, &layout).unwrap()).unwrap();
    let back = ldr(&align(&b, &a, &layout).unwrap()).unwrap();
    assert!((l - 200.0 / 150.0).abs() < 0.1 * l, "{l}");
    assert!((back * l - 1.0).abs() < 0.1, "{back} {l}");
}

#[test]
fn summaries_and_reports() {
    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.ci95 - 1.96 * (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    assert_eq!(Summary::of(&[]).count, 0);
    assert_eq!(Summary::of(&[7.0]).ci95, 0.0);

    let layout = FeatureLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let r = contour(&layout, 50, &mut rng);
    let u = score_utterance("a", &r, &r, &layout).unwrap();
    assert_eq!(u.mcd, 0.0);
    assert!((u.lfc.unwrap() - 1.0).abs() < 1e-12);
    assert!((u.ldr.unwrap() - 1.0).abs() < 1e-12);
    let report = EvaluationReport::from_scores(vec![u.clone(), UtteranceScores { id: "b".into(), mcd: 2.0, lfc: None, ldr: None }]);
    assert_eq!(report.mcd.mean, 1.0);
    assert_eq!(report.lfc.count, 1);
    assert_eq!(report.ldr_deviation.mean, 0.0);
    let text = report.to_json().unwrap();
    let back: EvaluationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);

    let mut other = r.clone();
    other.channel_mut(0).iter_mut().for_each(|v| *v += 1.0);
    assert!((weighted_l1_frames(&other, &r, &layout).unwrap() - 1.0 / 28.0).abs() < 1e-12);
    assert!(weighted_l1_frames(&r, &r.slice_frames(0, 10).unwrap(), &layout).is_err());
    assert_eq!(aligned_weighted_l1(&r, &r, &layout).unwrap(), 0.0);
}
