mod common;

use common::{brute_force, random_instance};
use dpa_core::eval::{distance_matrix, evaluate, ranked_list, ranked_rows, write_ranks_csv, DistanceMatrix, Labels, Metric};
use dpa_core::{DpaError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 200 {
        let inst = random_instance(&mut rng);
        for filter in [true, false] {
            let Some((map, minp, cmc)) = brute_force(&inst, filter) else {
                continue;
            };
            let r = evaluate(&inst.matrix(), &inst.labels(), filter).unwrap();
            assert_eq!(r.map, map);
            assert_eq!(r.minp, minp);
            assert_eq!(r.cmc, cmc);
            assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10 && r.rank10 <= r.rank20);
        }
        checked += 1;
    }
}

#[test]
fn monotone_transform_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let mut inst = random_instance(&mut rng);
        for v in inst.dist.iter_mut() {
            *v += rng.gen_range(0.0..0.5);
        }
        let a = evaluate(&inst.matrix(), &inst.labels(), true).unwrap();
        let squared: Vec<f64> = inst.dist.iter().map(|v| v * v).collect();
        let m = DistanceMatrix::new(squared, inst.q, inst.g, Metric::Euclidean).unwrap();
        let b = evaluate(&m, &inst.labels(), true).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.minp, b.minp);
        assert_eq!(a.cmc, b.cmc);
    }
}

fn one_query(row: Vec<f64>, gid: Vec<usize>) -> (DistanceMatrix, Vec<usize>) {
    let g = row.len();
    (DistanceMatrix::new(row, 1, g, Metric::Euclidean).unwrap(), gid)
}

#[test]
fn hand_examples() {
    // Matches at ranks 1 and 3.
    let (m, gid) = one_query(vec![0.1, 0.2, 0.3], vec![0, 1, 0]);
    let cams = [1, 1, 1];
    let l = Labels {
        query_ids: &[0],
        query_cams: &[0],
        gallery_ids: &gid,
        gallery_cams: &cams,
    };
    let r = evaluate(&m, &l, true).unwrap();
    assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.map - 0.8333).abs() < 1e-4);
    assert!((r.minp - 2.0 / 3.0).abs() < 1e-12);

    // Single match at rank 4.
    let (m, gid) = one_query(vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1, 1, 1, 0, 1]);
    let cams = [1; 5];
    let l = Labels {
        query_ids: &[0],
        query_cams: &[0],
        gallery_ids: &gid,
        gallery_cams: &cams,
    };
    let r = evaluate(&m, &l, true).unwrap();
    assert_eq!(r.map, 0.25);
    assert_eq!(r.minp, 0.25);
    assert_eq!(r.per_query[0].first_match_rank, 4);
    assert_eq!(r.cmc, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn perfect_retrieval() {
    let q = Tensor::new(&[2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap();
    let g = Tensor::new(&[4, 2], vec![0.0, 0.1, 5.0, 5.1, 0.1, 0.0, 5.1, 5.0]).unwrap();
    let m = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    let l = Labels {
        query_ids: &[0, 1],
        query_cams: &[0, 0],
        gallery_ids: &[0, 1, 0, 1],
        gallery_cams: &[1, 1, 1, 1],
    };
    let r = evaluate(&m, &l, true).unwrap();
    assert_eq!((r.map, r.minp, r.rank1), (1.0, 1.0, 1.0));
}

#[test]
fn same_camera_matches_are_filtered() {
    let (m, gid) = one_query(vec![0.1, 0.2], vec![0, 0]);
    let l = Labels {
        query_ids: &[0],
        query_cams: &[0],
        gallery_ids: &gid,
        gallery_cams: &[0, 1],
    };
    let r = evaluate(&m, &l, true).unwrap();
    assert_eq!(r.per_query[0].first_match_rank, 1);
    assert_eq!(r.cmc.len(), 2);
    let l2 = Labels {
        gallery_cams: &[0, 0],
        ..l
    };
    assert!(matches!(evaluate(&m, &l2, true), Err(DpaError::NoValidMatch(v)) if v == vec![0]));
    assert!(evaluate(&m, &l2, false).is_ok());
}

#[test]
fn distances() {
    let a = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(distance_matrix(&a, &a, Metric::Euclidean).unwrap().values, vec![0.0]);
    let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let y = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(distance_matrix(&x, &y, Metric::Cosine).unwrap().values, vec![1.0]);
    let b = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(distance_matrix(&a, &b, Metric::Euclidean), Err(DpaError::DimensionMismatch(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = Tensor::new(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let g = Tensor::new(&[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let m = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    let c = distance_matrix(&q, &g, Metric::Cosine).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let (mut s, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..4 {
                let (u, v) = (q.at(&[i, k]), g.at(&[j, k]));
                s += (u - v) * (u - v);
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
            assert!((m.values[i * 5 + j] - s.sqrt()).abs() < 1e-10);
            let cd = 1.0 - dot / (na.sqrt() * nb.sqrt());
            assert!((c.values[i * 5 + j] - cd).abs() < 1e-10);
            assert!((0.0..=2.0).contains(&c.values[i * 5 + j]));
        }
    }
}

#[test]
fn ranked_lists() {
    let m = DistanceMatrix::new(vec![0.5, 0.1, 0.9], 1, 3, Metric::Euclidean).unwrap();
    assert_eq!(ranked_list(&m, 1), vec![vec![1]]);
    assert_eq!(ranked_list(&m, 3), vec![vec![1, 0, 2]]);
    let tied = DistanceMatrix::new(vec![0.3, 0.1, 0.3, 0.1], 1, 4, Metric::Euclidean).unwrap();
    assert_eq!(ranked_list(&tied, 4), vec![vec![1, 3, 0, 2]]);

    let l = Labels {
        query_ids: &[7],
        query_cams: &[0],
        gallery_ids: &[7, 2, 7],
        gallery_cams: &[1, 1, 1],
    };
    let rows = ranked_rows(&m, 2, &l).unwrap();
    let mut buf = Vec::new();
    write_ranks_csv(&mut buf, &rows).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "query,rank,gallery,distance,correct\n0,1,1,0.100000,0\n0,2,0,0.500000,1\n"
    );
}

#[test]
fn metrics_csv_format() {
    let (m, gid) = one_query(vec![0.1, 0.2, 0.3], vec![0, 1, 0]);
    let l = Labels {
        query_ids: &[0],
        query_cams: &[0],
        gallery_ids: &gid,
        gallery_cams: &[1, 1, 1],
    };
    let r = evaluate(&m, &l, true).unwrap();
    let mut buf = Vec::new();
    r.write_metrics_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "mAP,rank1,rank5,rank10,rank20,mINP\n0.833333,1.000000,1.000000,1.000000,1.000000,0.666667\n"
    );
}
