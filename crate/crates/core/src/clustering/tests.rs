use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(nodes: Vec<Vec<f64>>, lr0: f64) -> SoMap {
    let n = nodes.len();
    let dim = nodes[0].len();
    let mut cfg = SomConfig::for_nodes(n, dim, 100);
    cfg.lr0 = lr0;
    SoMap::from_nodes(cfg, nodes).unwrap()
}

fn brute_nearest(nodes: &[Vec<f64>], x: &[f64]) -> usize {
    let d: Vec<f64> = nodes
        .iter()
        .map(|n| n.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v == min).unwrap()
}

#[test]
fn grid_factorization() {
    assert_eq!(most_square_grid(10), (5, 2));
    assert_eq!(most_square_grid(9), (3, 3));
    assert_eq!(most_square_grid(7), (7, 1));
    assert_eq!(most_square_grid(20), (5, 4));
}

#[test]
fn bmu_examples() {
    let m = map(vec![vec![0.0, 0.0], vec![10.0, 10.0]], 0.5);
    assert_eq!(m.bmu(&[1.0, 1.0]).unwrap(), 0);
    let m = map(
        vec![
            vec![9.0, 9.0],
            vec![8.0, 8.0],
            vec![1.0, 0.0],
            vec![7.0, 7.0],
            vec![6.0, 6.0],
            vec![-1.0, 0.0],
        ],
        0.5,
    );
    assert_eq!(m.bmu(&[0.0, 0.0]).unwrap(), 2);
    assert!(m.bmu(&[0.0]).is_err());
}

#[test]
fn frozen_map_proposes_nothing() {
    let m = map(vec![vec![0.0, 1.0], vec![2.0, 3.0]], 0.0);
    let r = m.client_step(&[5.0, 5.0]).unwrap();
    assert!(r.deltas.iter().flatten().all(|&d| d == 0.0));
}

#[test]
fn single_node_full_step_lands_on_input() {
    let mut m = map(vec![vec![0.3, -2.0]], 1.0);
    let r = m.client_step(&[1.0, 4.0]).unwrap();
    m.server_round(&[r]).unwrap();
    assert_eq!(m.nodes()[0], vec![1.0, 4.0]);
    assert_eq!(m.iteration(), 1);
}

#[test]
fn input_on_a_node_scores_zero_and_leaves_it() {
    let m = map(vec![vec![1.0, 2.0], vec![5.0, 5.0]], 0.5);
    let r = m.client_step(&[1.0, 2.0]).unwrap();
    assert_eq!(r.score, 0.0);
    assert_eq!(r.bmu, 0);
    assert!(r.deltas[0].iter().all(|&d| d == 0.0));
}

#[test]
fn only_best_report_is_applied() {
    for rule in [SomSelection::GlobalBest, SomSelection::BestPerNode] {
        let mut cfg = SomConfig::for_nodes(2, 1, 100);
        cfg.selection = rule;
        let mut m = SoMap::from_nodes(cfg, vec![vec![0.0], vec![100.0]]).unwrap();
        let near = m.client_step(&[1.0]).unwrap();
        let far = m.client_step(&[3.0]).unwrap();
        assert_eq!((near.score, far.score), (-1.0, -9.0));
        let expect: Vec<Vec<f64>> = m
            .nodes()
            .iter()
            .zip(&near.deltas)
            .map(|(n, d)| vec![n[0] + d[0]])
            .collect();
        m.server_round(&[far, near]).unwrap();
        assert_eq!(m.nodes(), expect.as_slice());
    }
}

#[test]
fn ties_go_to_the_first_report() {
    let m = map(vec![vec![0.0], vec![100.0]], 0.5);
    let a = m.client_step(&[1.0]).unwrap();
    let b = m.client_step(&[-1.0]).unwrap();
    assert_eq!(
        select_winners(&[a.clone(), b.clone()], 2, SomSelection::GlobalBest),
        vec![0]
    );
    assert_eq!(
        select_winners(&[b, a], 2, SomSelection::BestPerNode),
        vec![0]
    );
}

#[test]
fn per_node_rule_applies_one_winner_per_occupied_node() {
    let m = map(vec![vec![0.0], vec![10.0], vec![20.0]], 0.5);
    let reports: Vec<_> = [0.5, 1.5, 9.0, 12.0]
        .iter()
        .map(|&x| m.client_step(&[x]).unwrap())
        .collect();
    assert_eq!(
        select_winners(&reports, 3, SomSelection::BestPerNode),
        vec![0, 2]
    );
    assert_eq!(
        select_winners(&reports, 3, SomSelection::GlobalBest),
        vec![0]
    );
}

#[test]
fn empty_round_is_usage_error() {
    let mut m = map(vec![vec![0.0]], 0.5);
    assert!(matches!(
        m.server_round(&[]).unwrap_err(),
        crate::FedError::Usage(_)
    ));
}

#[test]
fn schedules_decay() {
    let m = map(vec![vec![0.0]; 10], 0.5);
    assert_eq!(m.learning_rate(0), 0.5);
    assert!((m.learning_rate(50) - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
    assert!((m.radius0() - (17.0f64).sqrt() / 2.0).abs() < 1e-15);
    assert!(m.radius(80) < m.radius(10));
}

#[test]
fn neighbourhood_is_gaussian_on_the_grid() {
    let m = map(vec![vec![0.0]; 10], 0.5);
    let r = m.radius(0);
    // 5x2 grid: node 0 at (0,0), node 3 at (1,1).
    let want = (-2.0 / (2.0 * r * r)).exp();
    assert!((m.neighborhood(3, 0, 0) - want).abs() < 1e-15);
    assert_eq!(m.neighborhood(4, 4, 0), 1.0);
}

#[test]
fn separated_clusters_come_out_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = [
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
    ];
    let sigma = 0.1;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..30 {
            points.push(
                c.iter()
                    .map(|v| v + sigma * (rng.random::<f64>() - 0.5) * 3.4)
                    .collect::<Vec<_>>(),
            );
            labels.push(k);
        }
    }
    let cfg = SomConfig::for_nodes(4, 3, 200);
    let mut m = SoMap::new(cfg, 0.0, 1.0, &mut rng).unwrap();
    for _ in 0..200 {
        let reports: Vec<_> = points.iter().map(|p| m.client_step(p).unwrap()).collect();
        m.server_round(&reports).unwrap();
    }
    let assigned: Vec<usize> = points.iter().map(|p| m.bmu(p).unwrap()).collect();
    assert!(purity(&assigned, &labels) >= 0.95);
}

#[test]
fn purity_examples() {
    assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 6, 6]), 1.0);
    assert_eq!(purity(&[0, 0, 0, 0], &[1, 1, 2, 2]), 0.5);
}

#[test]
fn triplet_examples() {
    let (u, p, n) = ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
    assert_eq!(triplet_loss(&u, &p, &n, 1.0), 1.0);
    assert_eq!(triplet_update(&u, &p, &n, 0.1), vec![0.2, -0.2]);
    assert_eq!(triplet_update(&[0.3, 0.7], &p, &p, 0.5), vec![0.3, 0.7]);
}

#[test]
fn prototype_examples() {
    let set = PrototypeSet {
        prototypes: vec![vec![0.0, 0.0], vec![5.0, 5.0]],
        margin: 1.0,
    };
    assert_eq!(set.assign(&[1.0, 1.0]), 0);
    assert_eq!(set.assign(&[5.0, 5.0]), 1);
}

#[test]
fn prototype_update_rules() {
    let mut set = PrototypeSet {
        prototypes: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]],
        margin: 1.0,
    };
    let before = set.clone();
    set.update(&[], 0.1).unwrap();
    assert_eq!(set, before);
    set.update(
        &[
            PrototypeReport {
                assigned: 1,
                gradient: vec![0.0, 0.0],
            },
            PrototypeReport {
                assigned: 2,
                gradient: vec![3.0, -1.0],
            },
            PrototypeReport {
                assigned: 2,
                gradient: vec![-3.0, 1.0],
            },
        ],
        0.1,
    )
    .unwrap();
    assert_eq!(set, before);
    set.update(
        &[
            PrototypeReport {
                assigned: 0,
                gradient: vec![1.0, 2.0],
            },
            PrototypeReport {
                assigned: 0,
                gradient: vec![3.0, 0.0],
            },
        ],
        0.5,
    )
    .unwrap();
    assert_eq!(set.prototypes[0], vec![-1.0, -0.5]);
    assert_eq!(set.prototypes[1], before.prototypes[1]);
}

#[test]
fn negative_sampling_avoids_positive_and_covers_rest() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = PrototypeSet::new(4, 2, 1.0, &mut rng).unwrap();
    let mut seen = [0usize; 4];
    for _ in 0..3000 {
        seen[set.sample_negative(2, &mut rng)] += 1;
    }
    assert_eq!(seen[2], 0);
    for k in [0, 1, 3] {
        assert!((seen[k] as f64 - 1000.0).abs() < 120.0, "{seen:?}");
    }
}

#[test]
fn remap_examples() {
    assert_eq!(
        remap_heads(&[0, 1, 2, 1], &[0, 1, 2, 1], 3),
        vec![Some(0), Some(1), Some(2)]
    );
    assert_eq!(
        remap_heads(&[0, 0, 1, 1], &[1, 1, 0, 0], 2),
        vec![Some(1), Some(0)]
    );
    // overlap[new][old] = [[5,1],[2,4]]
    let mut old = Vec::new();
    let mut new = Vec::new();
    for (n, o, c) in [(0, 0, 5), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
        for _ in 0..c {
            new.push(n);
            old.push(o);
        }
    }
    assert_eq!(remap_heads(&old, &new, 2), vec![Some(0), Some(1)]);
    // everyone moves from node 0 to node 1; node 0 gets a fresh head
    assert_eq!(remap_heads(&[0, 0, 0], &[1, 1, 1], 2), vec![None, Some(0)]);
    let heads = apply_remap(&["a", "b"], &[None, Some(0)], |_| "fresh");
    assert_eq!(heads, vec!["fresh", "a"]);
}

#[test]
fn server_held_points_match_client_reports() {
    for selection in [SomSelection::BestPerNode, SomSelection::GlobalBest] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = SomConfig::for_nodes(6, 5, 40);
        cfg.selection = selection;
        let mut a = SoMap::new(cfg, 0.0, 1.0, &mut rng).unwrap();
        let mut b = a.clone();
        for _ in 0..10 {
            let pts: Vec<Vec<f64>> = (0..9)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..2.0)).collect())
                .collect();
            let reports: Vec<_> = pts.iter().map(|p| a.client_step(p).unwrap()).collect();
            a.server_round(&reports).unwrap();
            let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
            b.train_round(&refs).unwrap();
        }
        for (x, y) in a.nodes().iter().zip(b.nodes()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert_eq!(a.iteration(), b.iteration());
    }
}

fn brute_best_matching(overlap: &[Vec<usize>]) -> usize {
    // Best total overlap over all permutations.
    fn rec(o: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == o.len() {
            return 0;
        }
        let mut best = 0;
        for c in 0..o.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(o[row][c] + rec(o, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    rec(overlap, 0, &mut vec![false; overlap.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nearest_matches_brute_force(seed in any::<u64>(), n in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small integer grid makes exact ties common.
        let nodes: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2..3) as f64).collect()).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2..3) as f64).collect();
        let want = brute_nearest(&nodes, &x);
        prop_assert_eq!(nearest(&nodes, &x), want);
        let set = PrototypeSet { prototypes: nodes.clone(), margin: 1.0 };
        prop_assert_eq!(set.assign(&x), want);
        let cfg = SomConfig::for_nodes(n, d, 10);
        prop_assert_eq!(SoMap::from_nodes(cfg, nodes).unwrap().bmu(&x).unwrap(), want);
    }

    #[test]
    fn triplet_step_is_a_fixed_translation(seed in any::<u64>(), d in 1usize..8, lr in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (u, p, n) = (v(), v(), v());
        let once = triplet_update(&u, &p, &n, lr);
        let twice = triplet_update(&once, &p, &n, lr);
        for i in 0..d {
            let step = lr * 2.0 * (p[i] - n[i]);
            prop_assert!((once[i] - (u[i] + step)).abs() <= 1e-12);
            prop_assert!((twice[i] - (u[i] + 2.0 * step)).abs() <= 1e-12);
        }
    }

    #[test]
    fn remap_is_a_partial_injection(seed in any::<u64>(), nodes in 1usize..6, users in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old: Vec<usize> = (0..users).map(|_| rng.random_range(0..nodes)).collect();
        let new: Vec<usize> = (0..users).map(|_| rng.random_range(0..nodes)).collect();
        let src = remap_heads(&old, &new, nodes);
        let mut used = vec![false; nodes];
        for s in src.iter().flatten() {
            prop_assert!(!used[*s]);
            used[*s] = true;
        }
        if nodes <= 4 {
            let mut overlap = vec![vec![0usize; nodes]; nodes];
            for (o, n) in old.iter().zip(&new) {
                overlap[*n][*o] += 1;
            }
            let greedy: usize = src
                .iter()
                .enumerate()
                .filter_map(|(n, s)| s.map(|o| overlap[n][o]))
                .sum();
            // Greedy matching is a 1/2-approximation of the best matching.
            prop_assert!(2 * greedy >= brute_best_matching(&overlap));
        }
    }
}
