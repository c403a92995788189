mod common;

use common::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use sherrylab::backbone::HeadInit;
use sherrylab::retrieval::*;
use sherrylab::*;

fn index(rows: &Array2<f64>, labels: &[String], domain: Domain, prefix: &str) -> FeatureIndex {
    let ids = (0..rows.nrows()).map(|i| format!("{prefix}{i:03}")).collect();
    FeatureIndex::from_features(ids, labels.to_vec(), rows, domain).unwrap()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

struct OracleQuery {
    ap_all: f64,
    ap_at: Vec<f64>,
    prec_at: Vec<f64>,
}

/// Exhaustive reference: each gallery item's rank is the number of items
/// that beat it, then every metric is recomputed from its definition.
fn oracle_query(q: &[f64], g: &FeatureIndex, label: &str, ks: &[usize]) -> Option<OracleQuery> {
    let m = g.len();
    let score = |i: usize| -> f64 {
        let row: Vec<f64> = g.vectors.row(i).iter().map(|&v| v as f64).collect();
        let dot: f64 = q.iter().zip(&row).map(|(a, b)| a * b).sum();
        let qn: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rn: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (qn * rn)
    };
    let scores: Vec<f64> = (0..m).map(score).collect();
    let mut ranked = vec![usize::MAX; m];
    for i in 0..m {
        let pos = (0..m).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && g.ids[j] < g.ids[i])).count();
        ranked[pos] = i;
    }
    let rel: Vec<bool> = ranked.iter().map(|&i| g.labels[i] == label).collect();
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let ap = |cut: usize, denom: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..cut.min(m) {
            if rel[r] {
                let hits_so_far = (0..=r).filter(|&t| rel[t]).count();
                s += hits_so_far as f64 / (r + 1) as f64;
            }
        }
        s / denom as f64
    };
    Some(OracleQuery {
        ap_all: ap(m, total),
        ap_at: ks.iter().map(|&k| ap(k, total.min(k))).collect(),
        prec_at: ks.iter().map(|&k| (0..k.min(m)).filter(|&r| rel[r]).count() as f64 / k as f64).collect(),
    })
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut r = rng(2024);
    for instance in 0..200 {
        let m = r.random_range(1..=50);
        let nq = r.random_range(1..=8);
        let d = r.random_range(2..=6);
        let classes = r.random_range(1..=5);
        let labels = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<String> {
            (0..n).map(|_| format!("c{}", r.random_range(0..classes + 1))).collect()
        };
        let gl = labels(&mut r, m);
        let ql = labels(&mut r, nq);
        let g = index(&gaussian(&mut r, m, d), &gl, Domain::Photo, "g");
        let q = index(&gaussian(&mut r, nq, d), &ql, Domain::Sketch, "q");
        let ks = vec![r.random_range(1..=m), r.random_range(1..=m + 5)];
        let oracle: Vec<OracleQuery> = (0..nq)
            .filter_map(|i| oracle_query(&q.row(i).to_vec(), &g, &ql[i], &[200, 100, ks[0], ks[1]]))
            .collect();
        let report = evaluate(&q, &g, &EvalOptions { ks: ks.clone(), ..Default::default() });
        if oracle.is_empty() {
            assert!(matches!(report, Err(RetrievalError::NoScorableQueries)));
            continue;
        }
        let report = report.unwrap();
        let n = oracle.len() as f64;
        let mean = |f: &dyn Fn(&OracleQuery) -> f64| oracle.iter().map(f).sum::<f64>() / n;
        let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-12, "instance {instance}: {a} vs {b}");
        close(report.map_all, mean(&|o| o.ap_all));
        close(report.map_at_200, mean(&|o| o.ap_at[0]));
        close(report.prec_at_200, mean(&|o| o.prec_at[0]));
        close(report.prec_at_100, mean(&|o| o.prec_at[1]));
        for (j, k) in ks.iter().enumerate() {
            close(report.extra[&format!("map@{k}")], mean(&|o| o.ap_at[2 + j]));
            close(report.extra[&format!("prec@{k}")], mean(&|o| o.prec_at[2 + j]));
        }
        assert_eq!(report.num_queries, oracle.len());
        assert_eq!(report.excluded_queries, nq - oracle.len());
        assert_eq!(report.gallery_size, m);
    }
}

#[test]
fn average_precision_fixtures() {
    let d = ApDenominator::MinRelevantK;
    assert_eq!(average_precision(&[true, true, false, false, false], None, d).unwrap(), 1.0);
    assert_eq!(average_precision(&[true, false, true], None, d).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(average_precision(&[false, true], Some(1), d).unwrap(), 0.0);
    assert_eq!(average_precision(&[false, true], Some(2), d).unwrap(), 0.5);
    assert!(matches!(average_precision(&[false, false], None, d), Err(RetrievalError::NoRelevantItems)));
    // The alternative denominator divides by every relevant item.
    assert_eq!(average_precision(&[true, false, false, true], Some(1), ApDenominator::Relevant).unwrap(), 0.5);
    assert_eq!(average_precision(&[true, false, false, true], Some(1), d).unwrap(), 1.0);
}

fn circle(deg: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((deg.len(), 2), |(i, j)| {
        let t = deg[i].to_radians();
        if j == 0 { t.cos() } else { t.sin() }
    })
}

/// Three queries against six gallery items on the unit circle. Rankings by
/// angular distance: q0 → [A,B,A,C,C,B], q1 → [B,A,A,C,B,C], q2 → [C,B,C,A,A,B].
fn fixture_3x6() -> (FeatureIndex, FeatureIndex) {
    let g = index(&circle(&[0.0, 100.0, 50.0, 200.0, 150.0, 260.0]), &names(&["A", "A", "B", "B", "C", "C"]), Domain::Photo, "g");
    let q = index(&circle(&[10.0, 60.0, 250.0]), &names(&["A", "B", "C"]), Domain::Sketch, "q");
    (q, g)
}

#[test]
fn three_by_six_fixture_matches_hand_computed_report() {
    let (q, g) = fixture_3x6();
    let r = evaluate(&q, &g, &EvalOptions { ks: vec![1, 2, 3], ..Default::default() }).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    // Per-query AP@all: 5/6, (1 + 2/5)/2, 5/6.
    close(r.per_query_ap[0], 5.0 / 6.0);
    close(r.per_query_ap[1], 0.7);
    close(r.per_query_ap[2], 5.0 / 6.0);
    close(r.map_all, 71.0 / 90.0);
    close(r.map_at_200, 71.0 / 90.0);
    close(r.prec_at_100, 0.02);
    close(r.prec_at_200, 0.01);
    close(r.extra["map@1"], 1.0);
    close(r.extra["prec@1"], 1.0);
    close(r.extra["map@2"], 0.5);
    close(r.extra["prec@2"], 0.5);
    close(r.extra["map@3"], 13.0 / 18.0);
    close(r.extra["prec@3"], 5.0 / 9.0);
    assert_eq!((r.num_queries, r.excluded_queries, r.gallery_size), (3, 0, 6));
}

#[test]
fn exact_gallery_gives_perfect_scores() {
    let mut r = rng(1);
    let feats = gaussian(&mut r, 6, 5);
    let labels: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
    let q = index(&feats, &labels, Domain::Sketch, "q");
    let g = index(&feats, &labels, Domain::Photo, "g");
    let rep = evaluate(&q, &g, &EvalOptions { ks: vec![1], ..Default::default() }).unwrap();
    assert_eq!((rep.map_all, rep.map_at_200, rep.extra["map@1"], rep.extra["prec@1"]), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn random_labels_give_half_map() {
    let mut total = 0.0;
    for seed in 0..50 {
        let mut r = rng(seed);
        let m = 400;
        let g_labels: Vec<String> = (0..m).map(|i| format!("c{}", i % 2)).collect();
        let q_labels: Vec<String> = (0..20).map(|i| format!("c{}", i % 2)).collect();
        let g = index(&gaussian(&mut r, m, 8), &g_labels, Domain::Photo, "g");
        let q = index(&gaussian(&mut r, 20, 8), &q_labels, Domain::Sketch, "q");
        total += evaluate(&q, &g, &EvalOptions::default()).unwrap().map_all;
    }
    let mean = total / 50.0;
    assert!((mean - 0.5).abs() <= 0.05, "null mAP {mean}");
}

#[test]
fn queries_without_relevant_items_are_excluded() {
    let g = index(&array![[1.0, 0.0], [0.0, 1.0]], &names(&["A", "B"]), Domain::Photo, "g");
    let q = index(&array![[1.0, 0.0], [0.0, 1.0]], &names(&["A", "Z"]), Domain::Sketch, "q");
    let rep = evaluate(&q, &g, &EvalOptions::default()).unwrap();
    assert_eq!((rep.num_queries, rep.excluded_queries), (1, 1));
    assert_eq!(rep.map_all, 1.0);
}

#[test]
fn rank_examples() {
    let mut r = rng(5);
    let feats = gaussian(&mut r, 5, 4);
    let g = index(&feats, &names(&["a", "b", "c", "d", "e"]), Domain::Photo, "g");
    let hits = rank(g.row(3).view(), &g).unwrap();
    assert_eq!(hits[0], ("g003".to_string(), 1.0));
    assert_eq!(hits.len(), 5);

    // Brute-force argsort: an item's position is the count of strictly higher scores.
    let q = gaussian(&mut r, 1, 4).row(0).to_owned();
    let hits = rank(q.view(), &g).unwrap();
    for (pos, (id, s)) in hits.iter().enumerate() {
        assert_eq!(hits.iter().filter(|(_, t)| t > s).count(), pos, "{id}");
    }

    let flat = index(&array![[0.0, 1.0], [0.0, 2.0], [0.0, -1.0]], &names(&["x", "y", "z"]), Domain::Photo, "g");
    let hits = rank(array![1.0, 0.0].view(), &flat).unwrap();
    assert_eq!(hits.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), vec!["g000", "g001", "g002"]);
    assert!(hits.iter().all(|(_, s)| *s == 0.0));
    assert!(matches!(rank(array![0.0, 0.0].view(), &flat), Err(RetrievalError::ZeroVector)));
}

#[test]
fn sbsr_examples() {
    let mut r = rng(8);
    let one_class = index(&gaussian(&mut r, 6, 3), &names(&["a"; 6]), Domain::Sketch, "s");
    assert_eq!(zs_sbsr_evaluate(&one_class, 2, 0, &EvalOptions::default()).unwrap().map_all, 1.0);

    let labels: Vec<String> = (0..30).map(|i| format!("c{}", i % 3)).collect();
    let sk = index(&gaussian(&mut r, 30, 4), &labels, Domain::Sketch, "s");
    let a = zs_sbsr_evaluate(&sk, 3, 11, &EvalOptions::default()).unwrap();
    assert_eq!(a, zs_sbsr_evaluate(&sk, 3, 11, &EvalOptions::default()).unwrap());
    assert_eq!((a.num_queries, a.gallery_size), (9, 21));
    assert!(matches!(zs_sbsr_evaluate(&sk, 10, 0, &EvalOptions::default()), Err(RetrievalError::InsufficientSketches { .. })));
}

#[test]
fn extract_index_examples() {
    let toy = generate_toy_dataset(&ToySpec { noise_scale: 0.0, seed: 3, ..Default::default() }).unwrap();
    let spec = EncoderSpec { head_init: HeadInit::Identity, ..EncoderSpec::identity((1, 1, 16), 16, 4) };
    let enc = build_encoder(&spec, 0).unwrap();
    let photos = toy.manifest.test_by_domain(Domain::Photo);
    let idx = extract_index(&enc, &photos).unwrap();
    // Without noise every photo is its prototype plus one shared offset of norm 0.5.
    let first = toy.raw_features(photos[0]).unwrap();
    let delta: Vec<f64> = first.iter().zip(toy.prototype(&photos[0].class_name).unwrap()).map(|(r, m)| r - m).collect();
    assert!((delta.iter().map(|v| v * v).sum::<f64>().sqrt() - 0.5).abs() < 1e-5);
    for (i, s) in photos.iter().enumerate() {
        let row = idx.row(i);
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        // The identity encoder sees the affine encoding of mu + delta.
        let mu = toy.prototype(&s.class_name).unwrap();
        let expected: Vec<f64> = mu.iter().zip(&delta).map(|(m, o)| (m + o - toy.affine_lo) / toy.affine_scale).collect();
        let n = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, e) in row.iter().zip(&expected) {
            assert!((a - e / n).abs() < 1e-6);
        }
    }
    // Noiseless samples of one class and domain are duplicates, so their rows agree exactly.
    assert_eq!(idx.vectors.row(0), idx.vectors.row(1));

    let mixed = vec![photos[0], toy.manifest.test_by_domain(Domain::Sketch)[0]];
    assert!(matches!(extract_index(&enc, &mixed), Err(RetrievalError::MixedDomains)));
    assert!(matches!(extract_index(&enc, &[]), Err(RetrievalError::EmptyGallery)));

    let dir = tempfile::tempdir().unwrap();
    idx.save(dir.path()).unwrap();
    assert_eq!(FeatureIndex::load(dir.path()).unwrap(), idx);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_rescaling_leaves_reports_unchanged(seed in 0u64..10_000, exp in -30i32..30) {
        let mut r = rng(seed);
        let gf = gaussian(&mut r, 20, 4);
        let qf = gaussian(&mut r, 5, 4);
        let gl: Vec<String> = (0..20).map(|i| format!("c{}", i % 3)).collect();
        let ql: Vec<String> = (0..5).map(|i| format!("c{}", i % 3)).collect();
        let c = 2f64.powi(exp);
        let opts = EvalOptions { ks: vec![3, 7], ..Default::default() };
        let a = evaluate(&index(&qf, &ql, Domain::Sketch, "q"), &index(&gf, &gl, Domain::Photo, "g"), &opts).unwrap();
        let b = evaluate(&index(&qf.mapv(|v| v * c), &ql, Domain::Sketch, "q"), &index(&gf.mapv(|v| v * c), &gl, Domain::Photo, "g"), &opts).unwrap();
        prop_assert_eq!(a, b);
        let g = index(&gf, &gl, Domain::Photo, "g");
        prop_assert_eq!(rank(qf.row(0), &g).unwrap(), rank(qf.row(0).mapv(|v| v * c).view(), &g).unwrap());
    }

    #[test]
    fn precision_and_ap_bounds(rel in proptest::collection::vec(any::<bool>(), 1..60), k in 1usize..80) {
        let total = rel.iter().filter(|&&r| r).count();
        prop_assert!(precision_at(&rel, k) <= total.min(k) as f64 / k as f64);
        if total > 0 {
            let ap = average_precision(&rel, None, ApDenominator::MinRelevantK).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let sorted = rel.iter().skip_while(|&&r| r).all(|&r| !r);
            prop_assert_eq!(ap == 1.0, sorted);
            let apk = average_precision(&rel, Some(k), ApDenominator::MinRelevantK).unwrap();
            prop_assert!((0.0..=1.0).contains(&apk));
        }
    }
}
