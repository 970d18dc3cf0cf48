//! Evaluation measures against dense brute-force oracles.

mod common;

use common::{case, e_measure_oracle, f_curve_oracle, mae_oracle, prediction, rand_binary, weighted_f_oracle};
use lafb::metrics::{e_measure, f_curve, f_measure, mae, nearest_foreground, report, weighted_f, MetricReport};
use lafb::synthdata::ChallengeLabel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

#[test]
fn every_measure_matches_its_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for _ in 0..60 {
        let (s, g, h, w) = case(&mut rng);
        assert!((mae(&s, &g).unwrap() - mae_oracle(s.data(), g.data())).abs() < TOL);
        let curve = f_curve(&s, &g).unwrap();
        let want = f_curve_oracle(&s, &g);
        assert!(curve.iter().zip(&want).all(|(a, b)| (a - b).abs() < TOL));
        let (fm, fx) = f_measure(&s, &g).unwrap();
        assert!((fm - want.iter().sum::<f64>() / 256.0).abs() < TOL);
        assert!((fx - want.iter().copied().fold(0.0, f64::max)).abs() < TOL);
        let wf = weighted_f(&s, &g).unwrap();
        assert!((wf - weighted_f_oracle(&s, &g, h, w)).abs() < TOL, "{}x{}", h, w);
        assert!((e_measure(&s, &g).unwrap() - e_measure_oracle(&s, &g)).abs() < TOL);
    }
}

#[test]
fn ring_search_agrees_with_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(12..=24), rng.gen_range(12..=24));
        let fg: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
        let (dist, idx) = nearest_foreground(&fg, h, w);
        for i in 0..h * w {
            let best = (0..h * w)
                .filter(|&j| fg[j])
                .map(|j| {
                    let dy = (i / w) as isize - (j / w) as isize;
                    let dx = (i % w) as isize - (j % w) as isize;
                    ((dy * dy + dx * dx) as usize, j)
                })
                .min()
                .unwrap();
            assert_eq!(idx[i], best.1);
            assert_eq!(dist[i], (best.0 as f64).sqrt());
        }
    }
}

fn labels_for(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<ChallengeLabel>> {
    (0..n)
        .map(|_| {
            let mut l: Vec<_> = ChallengeLabel::ALL.into_iter().filter(|_| rng.gen_bool(0.3)).collect();
            if l.is_empty() {
                l.push(ChallengeLabel::ALL[rng.gen_range(0..5)]);
            }
            l
        })
        .collect()
}

#[test]
fn per_challenge_report_equals_filtered_recompute() {
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..12 {
        let g = rand_binary(&[1, 1, 10, 10], 0.3, &mut rng);
        preds.push(prediction(&g, &mut rng));
        gts.push(g);
    }
    let labels = labels_for(12, &mut rng);
    let r = report(&preds, &gts, Some(&labels)).unwrap();
    let pc = r.per_challenge.as_ref().unwrap();
    for c in ChallengeLabel::ALL {
        let keep: Vec<usize> = (0..12).filter(|&i| labels[i].contains(&c)).collect();
        if keep.is_empty() {
            assert!(!pc.contains_key(&c));
            continue;
        }
        let sub = report(
            &keep.iter().map(|&i| preds[i].clone()).collect::<Vec<_>>(),
            &keep.iter().map(|&i| gts[i].clone()).collect::<Vec<_>>(),
            None,
        )
        .unwrap();
        assert_eq!(pc[&c], sub.overall);
        let n = keep.len() as f64;
        let want_mae = keep.iter().map(|&i| mae_oracle(preds[i].data(), gts[i].data())).sum::<f64>() / n;
        assert!((pc[&c].mae - want_mae).abs() < TOL);
        let mut curve = vec![0.0; 256];
        for &i in &keep {
            curve.iter_mut().zip(f_curve_oracle(&preds[i], &gts[i])).for_each(|(a, b)| *a += b / n);
        }
        assert!((pc[&c].f_max - curve.iter().copied().fold(0.0, f64::max)).abs() < TOL);
    }
    assert!(report(&preds, &gts, None).unwrap().per_challenge.is_none());
}

#[test]
fn csv_and_table_share_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(403);
    let g = rand_binary(&[1, 1, 8, 8], 0.4, &mut rng);
    let s = prediction(&g, &mut rng);
    let labels = vec![vec![ChallengeLabel::Li, ChallengeLabel::Td]];
    let r: MetricReport = report(&[s], &[g], Some(&labels)).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf, "full", "synthetic").unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let head: Vec<String> = rows.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&head[..7], ["method", "dataset", "E", "wF", "F_mean", "F_max", "MAE"]);
    assert!(head.contains(&"LI_MAE".to_string()) && head.contains(&"TD_F_max".to_string()));
    assert!(!head.iter().any(|h| h.starts_with("CB_")));
    let table = r.table("full", "synthetic");
    let first: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(first, head.iter().map(String::as_str).collect::<Vec<_>>());

    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path(), "full", "synthetic").unwrap();
    assert!(dir.path().join("metrics.csv").exists() && dir.path().join("metrics.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scores_are_bounded_and_ordered(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, mut gts) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let g = rand_binary(&[1, 1, 9, 7], 0.35, &mut rng);
            preds.push(prediction(&g, &mut rng));
            gts.push(g);
        }
        let labels = labels_for(n, &mut rng);
        let r = report(&preds, &gts, Some(&labels)).unwrap();
        let mut all = vec![r.overall];
        all.extend(r.per_challenge.clone().unwrap().into_values());
        for s in &all {
            for v in [s.e_measure, s.weighted_f, s.f_mean, s.f_max, s.mae] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.f_max >= s.f_mean);
        }

        // reversing the dataset changes nothing beyond rounding
        preds.reverse();
        gts.reverse();
        let rev_labels: Vec<_> = labels.iter().rev().cloned().collect();
        let r2 = report(&preds, &gts, Some(&rev_labels)).unwrap();
        let pairs = std::iter::once((r.overall, r2.overall))
            .chain(r.per_challenge.unwrap().into_values().zip(r2.per_challenge.unwrap().into_values()));
        for (a, b) in pairs {
            prop_assert_eq!(a.count, b.count);
            for (x, y) in [(a.e_measure, b.e_measure), (a.weighted_f, b.weighted_f), (a.f_mean, b.f_mean), (a.f_max, b.f_max), (a.mae, b.mae)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
