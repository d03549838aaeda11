use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svchange::decoder::{block_weights, DecoderConfig, PairProbMatrix};
use svchange::{decode_consecutive, decode_dp, score_segmentation};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> PairProbMatrix {
    let coarse = rng.random_bool(0.3);
    PairProbMatrix::from_fn(n, 1e-6, |_, _| {
        Ok(if coarse {
            [0.1, 0.5, 0.9][rng.random_range(0..3)]
        } else {
            rng.random::<f64>()
        })
    })
    .unwrap()
}

/// Direct log-likelihood: every pair contributes ln p if it straddles a
/// boundary and ln(1 - p) otherwise.
fn direct_score(p: &PairProbMatrix, cps: &[usize], penalty: f64) -> f64 {
    let seg = |j: usize| 1 + cps.iter().filter(|&&c| c <= j).count();
    let mut s = 0.0;
    for a in 1..=p.n() {
        for b in a + 1..=p.n() {
            let prob = p.get(a - 1, b - 1);
            s += if seg(a) != seg(b) { prob.ln() } else { (1.0 - prob).ln() };
        }
    }
    s - penalty * cps.len() as f64
}

fn enumerate(n: usize) -> Vec<Vec<usize>> {
    let k = n.saturating_sub(1);
    (0u32..1 << k)
        .map(|mask| (0..k).filter(|b| mask >> b & 1 == 1).map(|b| b + 2).collect())
        .collect()
}

#[test]
fn dp_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..500 {
        let n = rng.random_range(1..=12);
        let penalty = if trial % 3 == 0 { rng.random_range(0.0..3.0) } else { 0.0 };
        let p = random_matrix(&mut rng, n);
        let cfg = DecoderConfig {
            change_penalty: penalty,
            ..DecoderConfig::default()
        };
        let got = decode_dp(&p, &cfg);

        let scored: Vec<(f64, Vec<usize>)> = enumerate(n)
            .into_iter()
            .map(|c| (direct_score(&p, &c, penalty), c))
            .collect();
        let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        assert!((got.score - best).abs() <= 1e-9 * best.abs().max(1.0), "trial {trial}");

        let mut tied: Vec<&Vec<usize>> = scored
            .iter()
            .filter(|(s, _)| (s - best).abs() <= 1e-9 * best.abs().max(1.0))
            .map(|(_, c)| c)
            .collect();
        tied.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        if tied.len() == 1 {
            assert_eq!(&got.change_points, tied[0], "trial {trial}");
        } else {
            assert!(tied.contains(&&got.change_points), "trial {trial}");
        }
    }
}

#[test]
fn exact_ties_prefer_fewer_then_smaller() {
    for n in 1..=8 {
        let p = PairProbMatrix::from_fn(n, 1e-6, |_, _| Ok(0.5)).unwrap();
        assert!(decode_dp(&p, &DecoderConfig::default()).change_points.is_empty());
    }
}

#[test]
fn penalty_never_increases_change_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..=15);
        let p = random_matrix(&mut rng, n);
        let mut last = usize::MAX;
        for lambda in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0] {
            let cfg = DecoderConfig {
                change_penalty: lambda,
                ..DecoderConfig::default()
            };
            let k = decode_dp(&p, &cfg).change_points.len();
            assert!(k <= last);
            last = k;
        }
    }
}

#[test]
fn block_weights_agree_with_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..=10);
        let p = random_matrix(&mut rng, n);
        let w = block_weights(&p);
        let constant: f64 = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .map(|(a, b)| p.get(a, b).ln())
            .sum();
        for cps in enumerate(n) {
            let mut bounds = vec![1];
            bounds.extend(&cps);
            bounds.push(n + 1);
            let blocks: f64 = bounds.windows(2).map(|b| w[b[0]][b[1] - 1]).sum();
            let direct = direct_score(&p, &cps, 0.0);
            assert!((constant + blocks - direct).abs() < 1e-9);
            assert!((score_segmentation(&p, &cps, 0.0).unwrap() - direct).abs() < 1e-9);
        }
    }
}

#[test]
fn consecutive_baseline_thresholds_neighbours() {
    let p = PairProbMatrix::from_fn(4, 1e-6, |a, b| Ok(if (a, b) == (1, 2) { 0.8 } else { 0.2 })).unwrap();
    assert_eq!(decode_consecutive(&p, 0.5, 0.0).change_points, vec![3]);
}
