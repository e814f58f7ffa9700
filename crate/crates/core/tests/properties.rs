use ladmim::eval::{auroc, calibrate, ScoreStats};
use ladmim::hvq::nearest_codes;
use ladmim::lavit::{compute_target_histogram, lavit_loss, make_block_mask, mask_target, MAX_ASPECT, MIN_ASPECT, MIN_BLOCK_AREA};
use ladmim::rng::{Rng, Stream};
use ladmim::tensor::{softmax_rows, Tensor};
use proptest::prelude::*;

/// Brute-force nearest entry: first index attaining the minimum.
fn nearest_oracle(v: &[f64], cb: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in cb.iter().enumerate() {
        let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn pairwise_auroc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut s = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        p += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                s += 1.0;
            } else if scores[i] == scores[j] {
                s += 0.5;
            }
        }
    }
    for &l in labels {
        if !l {
            n += 1;
        }
    }
    s / (p * n) as f64
}

/// Small integer grid values make exact ties common.
fn grid_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i32..=3).prop_map(|v| v as f64 * 0.5), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nearest_codes_match_exhaustive_search(
        (n, k, d, tokens, book) in (1usize..12, 1usize..10, 1usize..5)
            .prop_flat_map(|(n, k, d)| (Just(n), Just(k), Just(d), grid_vec(n * d), grid_vec(k * d)))
    ) {
        let v = Tensor::new(vec![n, d], tokens.clone()).unwrap();
        let cb = Tensor::new(vec![k, d], book.clone()).unwrap();
        let q = nearest_codes(&v, &cb).unwrap();
        let rows: Vec<Vec<f64>> = book.chunks(d).map(<[f64]>::to_vec).collect();
        for i in 0..n {
            let (j, dist) = nearest_oracle(&tokens[i * d..(i + 1) * d], &rows);
            prop_assert_eq!(q.indices[i], j);
            prop_assert_eq!(q.distances[i], dist);
        }
    }

    #[test]
    fn histogram_matches_counting_and_is_permutation_invariant(
        codes in prop::collection::vec(0usize..6, 16),
        picks in prop::collection::btree_set(0usize..16, 1..16),
        seed in any::<u64>(),
    ) {
        let mask: Vec<usize> = picks.into_iter().collect();
        let q = compute_target_histogram(&codes, &mask, 6).unwrap();
        for (n, &qn) in q.iter().enumerate() {
            let count = mask.iter().filter(|&&i| codes[i] == n).count();
            prop_assert_eq!(qn, count as f64 / mask.len() as f64);
        }
        // Shuffle the code values among masked positions.
        let mut vals: Vec<usize> = mask.iter().map(|&i| codes[i]).collect();
        Rng::new(seed, Stream::Data).shuffle(&mut vals);
        let mut shuffled = codes.clone();
        for (&i, &v) in mask.iter().zip(&vals) {
            shuffled[i] = v;
        }
        prop_assert_eq!(compute_target_histogram(&shuffled, &mask, 6).unwrap(), q);
    }

    #[test]
    fn auroc_equals_pairwise_statistic(
        pairs in prop::collection::vec((any::<bool>(), 0u8..6), 2..80)
    ) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let a = auroc(&labels, &scores).unwrap();
        prop_assert_eq!(a, pairwise_auroc(&labels, &scores));
        prop_assert!((0.0..=1.0).contains(&a));
        // Strictly increasing transforms keep the ranking.
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
        prop_assert_eq!(auroc(&labels, &warped).unwrap(), a);
    }

    #[test]
    fn fusion_is_increasing_in_each_score(
        hvq in prop::collection::vec(0.0f64..10.0, 3..20),
        lav in prop::collection::vec(0.0f64..10.0, 3..20),
        a in 0.0f64..10.0, b in 0.0f64..10.0, delta in 1e-3f64..1.0,
    ) {
        let n = hvq.len().min(lav.len());
        let stats: ScoreStats = match calibrate(&hvq[..n], &lav[..n]) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        prop_assert!(stats.fuse(a + delta, b) > stats.fuse(a, b));
        prop_assert!(stats.fuse(a, b + delta) > stats.fuse(a, b));
        prop_assert!(stats.fuse(stats.hvq_mean, stats.lavit_mean).abs() < 1e-12);
    }

    #[test]
    fn block_masks_are_exact_size_rectangle_unions(
        gh in 2usize..10, gw in 2usize..10, ratio in 0.05f64..0.95, seed in any::<u64>()
    ) {
        let n = gh * gw;
        let Ok(target) = mask_target(n, ratio) else { return Ok(()) };
        let m = make_block_mask(gh, gw, ratio, &mut Rng::derive(seed, Stream::Mask, 0)).unwrap();
        prop_assert_eq!(m.indices.len(), target);
        prop_assert!(m.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.indices.iter().all(|&i| i < n));
        for b in &m.blocks {
            prop_assert!(b.top + b.height <= gh && b.left + b.width <= gw);
            prop_assert!(b.height * b.width >= MIN_BLOCK_AREA);
            let aspect = b.height as f64 / b.width as f64;
            prop_assert!((MIN_ASPECT..=MAX_ASPECT).contains(&aspect));
        }
        // Every masked cell lies in some sampled rectangle.
        for &i in &m.indices {
            let (r, c) = (i / gw, i % gw);
            prop_assert!(m.blocks.iter().any(|b| (b.top..b.top + b.height).contains(&r) && (b.left..b.left + b.width).contains(&c)));
        }
    }

    #[test]
    fn lavit_loss_bounds_and_identity(
        logits in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 5), 1..4),
        other in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 5), 4),
    ) {
        let soft = |v: &Vec<f64>| { let mut o = vec![0.0; v.len()]; softmax_rows(v, &mut o, v.len()); o };
        let p: Vec<Vec<f64>> = logits.iter().map(soft).collect();
        let q: Vec<Vec<f64>> = other.iter().take(p.len()).map(soft).collect();
        for row in &p {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        prop_assert_eq!(lavit_loss(&p, &p).unwrap(), 0.0);
        let l = lavit_loss(&p, &q).unwrap();
        prop_assert!(l <= 2.0 * p.len() as f64 + 1e-12);
        prop_assert_eq!(l == 0.0, p == q);
    }
}
