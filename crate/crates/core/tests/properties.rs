use std::path::Path;

use proptest::prelude::*;

use sreclip_core::eval::{classify, h_score};
use sreclip_core::io::{parse_edge_list, ClassGraph, EmbeddingMatrix};
use sreclip_core::losses::{compose, info_loss, srs_loss, LossParts, Phase, TermToggles};
use sreclip_core::tensor::softmax;
use sreclip_core::{RunConfig, Tape, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-3.0f64..3.0, r * c)))
}

fn unit_rows(t: Tensor) -> Option<Tensor> {
    let rows: Option<Vec<Vec<f64>>> = (0..t.rows())
        .map(|r| sreclip_core::tensor::normalized(t.row(r)).ok())
        .collect();
    Tensor::from_rows(&rows?).ok()
}

proptest! {
    #[test]
    fn emb1_round_trip(rows in 0usize..6, dim in 1usize..6, seed in any::<u64>()) {
        let values: Vec<f32> = (0..rows * dim).map(|i| ((seed.wrapping_add(i as u64) % 2001) as f32 - 1000.0) / 7.0).collect();
        let m = EmbeddingMatrix::new(rows, dim, values).unwrap();
        let mut bytes = Vec::new();
        m.encode(&mut bytes);
        prop_assert_eq!(bytes.len(), 12 + 4 * rows * dim);
        let (back, used) = EmbeddingMatrix::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let p = softmax(&x);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn h_score_between_min_and_arithmetic_mean(s in 0.0f64..100.0, u in 0.0f64..100.0) {
        let h = h_score(s, u);
        prop_assert!(h <= (s + u) / 2.0 + 1e-12);
        prop_assert!(h >= s.min(u) - 1e-12);
        prop_assert_eq!(h, h_score(u, s));
    }

    #[test]
    fn classify_ignores_positive_scale((r, c, data) in matrix(6, 5), v in prop::collection::vec(-1.0f64..1.0, 5), scale in 0.01f64..100.0) {
        let p = Tensor::new(r, c, data).unwrap();
        let v = &v[..c];
        prop_assume!(v.iter().any(|&x| x != 0.0));
        prop_assume!((0..r).all(|k| p.row(k).iter().any(|&x| x != 0.0)));
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        prop_assert_eq!(classify(v, &p).unwrap(), classify(&scaled, &p).unwrap());
    }

    #[test]
    fn info_loss_is_bounded((b, d, vdata) in matrix(8, 6), pdata in prop::collection::vec(-1.0f64..1.0, 1..40), scale in 0.1f64..50.0) {
        let classes = (pdata.len() / d).max(1);
        prop_assume!(pdata.len() >= classes * d);
        let Some(v) = unit_rows(Tensor::new(b, d, vdata).unwrap()) else { return Ok(()); };
        let Some(p) = unit_rows(Tensor::new(classes, d, pdata[..classes * d].to_vec()).unwrap()) else { return Ok(()); };
        let mut tape = Tape::new();
        let (vv, pv) = (tape.constant(v), tape.constant(p));
        let loss = info_loss(&mut tape, vv, pv, scale).unwrap();
        let value = tape.value(loss).item();
        let bound = (classes as f64).ln();
        prop_assert!(value >= -bound - 1e-12 && value <= bound + 1e-12, "{} outside ±{}", value, bound);
    }

    #[test]
    fn srs_vanishes_at_the_positive_prototype((c, d, pdata) in matrix(6, 6), picks in prop::collection::vec(0usize..6, 1..5)) {
        let Some(p) = unit_rows(Tensor::new(c, d, pdata).unwrap()) else { return Ok(()); };
        let pos: Vec<usize> = picks.iter().map(|k| k % c).collect();
        let v = p.gather_rows(&pos);
        let mut tape = Tape::new();
        let (vv, pv) = (tape.constant(v), tape.constant(p));
        let loss = srs_loss(&mut tape, vv, pv, &pos).unwrap();
        prop_assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn compose_is_linear_in_beta_and_gamma(parts in prop::array::uniform5(-5.0f64..5.0), beta in 0.0f64..4.0, gamma in 0.0f64..4.0) {
        let parts = LossParts { ce: parts[0], ranking: parts[1], info: parts[2], srs: parts[3], align: parts[4] };
        let on = TermToggles { srs: true, align: true };
        let src = compose(Phase::Source, parts, beta, gamma, on).total;
        prop_assert!((src - (parts.ce + parts.ranking + beta * parts.align + gamma * parts.srs)).abs() <= 1e-12);
        let tgt = compose(Phase::Target, parts, beta, gamma, on).total;
        prop_assert!((tgt - (parts.info + beta * parts.align + gamma * parts.srs)).abs() <= 1e-12);
    }

    #[test]
    fn edge_list_text_round_trips(n in 2usize..12, pairs in prop::collection::vec((0usize..12, 0usize..12), 0..20)) {
        let edges: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
        let g = ClassGraph::new(n, edges, vec![0], Tensor::zeros(n, 2)).unwrap();
        let (nodes, parsed) = parse_edge_list(&g.edge_list_text(), Path::new("mem")).unwrap();
        prop_assert_eq!(nodes, n);
        let again = ClassGraph::new(n, parsed, vec![0], Tensor::zeros(n, 2)).unwrap();
        prop_assert_eq!(again.edges(), g.edges());
    }

    #[test]
    fn config_text_round_trips(beta in 0.0f64..10.0, gamma in 0.0f64..10.0, seed in any::<u64>(), warmup in 0usize..10, gcn in any::<bool>()) {
        let config = RunConfig { beta, gamma, seed, warmup_epochs: warmup, use_gcn: gcn, ..RunConfig::default() };
        let back = RunConfig::parse(&config.to_string()).unwrap();
        prop_assert_eq!(back, config);
    }
}
