// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use latentscm::dist::StepDistribution;
use latentscm::influence::{
    export_graph, normalize_influence, parse_graph_dot, parse_graph_json, sparsify, structure_metrics, GraphFormat,
    InfluenceMatrix,
};
use latentscm::necessity::{solved_fraction_curve, wilson_interval};
use latentscm::readout::kl_divergence;
use latentscm::superposition::{balance, superposition_curve, two_way_softmax};
use latentscm::trace::hexfloat::{format_hex, parse_hex};
use latentscm::trace::StoredDistribution;
use proptest::prelude::*;

fn simplex(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..max_len).prop_filter_map("zero mass", |v| {
        let total: f64 = v.iter().sum();
        (total > 1e-6).then(|| v.iter().map(|x| x / total).collect())
    })
}

fn dist(p: Vec<f64>) -> StepDistribution {
    let support: Arc<[String]> = (0..p.len()).map(|i| i.to_string()).collect::<Vec<_>>().into();
    StepDistribution::new(support, p).unwrap()
}

fn upper_triangle() -> impl Strategy<Value = InfluenceMatrix> {
    (2usize..9).prop_flat_map(|size| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5.0], size * (size - 1) / 2).prop_map(move |cells| {
            let mut triples = Vec::new();
            let mut it = cells.into_iter();
            for t in 1..=size {
                for s in t + 1..=size {
                    triples.push((t, s, it.next().unwrap()));
                }
            }
            InfluenceMatrix::from_triples(size, &triples, 1).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn kl_is_nonnegative(p in simplex(12), seed in any::<u64>()) {
        let n = p.len();
        let q: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|i| ((seed >> (i % 60)) & 0xff) as f64 + 1.0).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        };
        let kl = kl_divergence(&dist(p.clone()), &dist(q.clone())).unwrap();
        prop_assert!(kl >= 0.0);
        let differ = p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6);
        if differ {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn kl_of_identical_is_zero(p in simplex(12)) {
        prop_assert_eq!(kl_divergence(&dist(p.clone()), &dist(p)).unwrap(), 0.0);
    }

    #[test]
    fn solved_fraction_is_monotone(
        budget in 1usize..12,
        raw in prop::collection::vec(prop::option::of(1usize..20), 1..60),
    ) {
        let earliest: Vec<Option<usize>> = raw.into_iter().map(|k| k.filter(|k| *k <= budget)).collect();
        let curve = solved_fraction_curve(&earliest, budget).unwrap();
        prop_assert_eq!(curve.len(), budget);
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hexfloat_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        match format_hex(v) {
            Some(s) => prop_assert_eq!(parse_hex(&s).unwrap().to_bits(), bits),
            None => prop_assert!(!v.is_finite()),
        }
    }

    #[test]
    fn normalized_mass(w in upper_triangle()) {
        let wbar = normalize_influence(&w);
        if w.total() > 0.0 {
            let total = wbar.total();
            prop_assert!((1.0 - 1e-6..=1.0).contains(&total), "{}", total);
        } else {
            prop_assert!(wbar.degenerate);
        }
    }

    #[test]
    fn metric_bounds(w in upper_triangle()) {
        prop_assume!(w.total() > 0.0);
        let size = w.size();
        let wbar = normalize_influence(&w);
        let m = structure_metrics(&wbar, 1, 2, 5);
        for v in [m.locality, m.early_out, m.late_in] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        prop_assert!(m.span >= 1.0 - 1e-9 && m.span <= (size - 1) as f64 + 1e-9);
        prop_assert!((structure_metrics(&wbar, size - 1, 2, 5).locality - 1.0).abs() < 1e-9);
        prop_assert!((structure_metrics(&wbar, 1, size, 2).early_out - 1.0).abs() < 1e-9);
        prop_assert!((structure_metrics(&wbar, 1, 2, 2).late_in - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sparsified_graph_rules(w in upper_triangle(), alpha in 0.0f64..=1.0, c in 1e-3f64..1e3) {
        let g = sparsify(&w, alpha).unwrap();
        let mut sources: Vec<usize> = g.edges.iter().map(|e| e.from).collect();
        sources.dedup();
        prop_assert_eq!(sources.len(), g.edges.len());
        for e in &g.edges {
            prop_assert!(e.from < e.to && e.weight >= alpha * w.max());
        }
        prop_assert_eq!(sparsify(&w.scaled(c).unwrap(), alpha).unwrap().topology(), g.topology());
        prop_assert_eq!(parse_graph_json(&export_graph(&g, GraphFormat::Json).unwrap()).unwrap(), g.clone());
        prop_assert_eq!(parse_graph_dot(&export_graph(&g, GraphFormat::Dot).unwrap()).unwrap(), g);
    }

    #[test]
    fn superposition_bounds(a in 0.0f64..=1.0) {
        let pair = (a, 1.0 - a);
        let ss = superposition_curve(&[pair]).unwrap()[0];
        prop_assert!((0.0..=0.5).contains(&ss));
        prop_assert_eq!(ss, superposition_curve(&[(pair.1, pair.0)]).unwrap()[0]);
        if ss == 0.5 {
            prop_assert_eq!(pair.0, pair.1);
        }
    }

    #[test]
    fn softmax_pair_sums_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (pa, pb) = two_way_softmax(a, b);
        prop_assert!((pa + pb - 1.0).abs() < 1e-12);
        prop_assert_eq!(pa >= pb, a >= b);
    }

    #[test]
    fn balanced_subsets(labels in prop::collection::vec(0usize..2, 2..200), seed in any::<u64>()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let idx = balance(&labels, seed).unwrap();
        let ones = idx.iter().filter(|&&i| labels[i] == 1).count();
        prop_assert_eq!(2 * ones, idx.len());
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn wilson_contains_rate(n in 1usize..500, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n);
        let rate = k as f64 / n as f64;
        prop_assert!(lo <= rate + 1e-12 && rate <= hi + 1e-12);
        prop_assert!(0.0 <= lo && hi <= 1.0);
    }

    #[test]
    fn sparse_encoding_preserves_mass(p in simplex(300)) {
        prop_assume!(p.len() > 64);
        let d = dist(p.clone());
        let expanded = StoredDistribution::encode(&d).expand(p.len()).unwrap();
        prop_assert!((expanded.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        for &i in &order[..64] {
            prop_assert_eq!(expanded[i], p[i]);
        }
    }
}
