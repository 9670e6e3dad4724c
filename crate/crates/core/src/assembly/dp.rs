//! Max-sum dynamic programming over the skeleton tree.

use crate::body::SkeletonTopology;
use crate::parts::BoneParts;

/// One proposal index per joint (`None` = missing) and the total part score.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub nodes: Vec<Option<usize>>,
    pub score: f64,
}

/// Θ of an assignment: the sum of the scores of bones whose two joints are
/// assigned, accumulated in bone order.
pub fn assignment_score(topology: &SkeletonTopology, parts: &[BoneParts], nodes: &[Option<usize>]) -> Option<f64> {
    let mut total = 0.0;
    for (bone_idx, &(u, v)) in topology.bones().iter().enumerate() {
        if let (Some(ku), Some(kv)) = (nodes[u], nodes[v]) {
            total += parts[bone_idx].score(ku, kv)?;
        }
    }
    Some(total)
}

/// Finds the assignment maximising `Θ = Σ_(u,v)∈B Φ(P_uv)` over the
/// proposals flagged in `available` (indexed `[joint][proposal]`).
///
/// Every joint may also be missing; a missing joint forces its whole subtree
/// to be missing, and pruned parts are never used. Ties prefer "missing",
/// then the lowest proposal index, deciding joints in root-to-leaf order.
/// Returns `None` when the best choice is to leave the root missing.
///
/// `parts[b]` must describe `topology.bones()[b]`.
pub fn dp_best_skeleton(
    topology: &SkeletonTopology,
    parts: &[BoneParts],
    available: &[Vec<bool>],
) -> Option<Assignment> {
    let n = topology.num_joints();
    debug_assert_eq!(parts.len(), topology.bones().len());
    let bone_of_child: Vec<Option<usize>> = (0..n).map(|j| topology.bone_to_parent(j)).collect();

    // subtree[j][k]: best total of the subtree below j given j = proposal k.
    let mut subtree: Vec<Vec<f64>> = available.iter().map(|a| vec![0.0; a.len()]).collect();
    // choice[c][k_parent]: child's state given the parent's proposal.
    let mut choice: Vec<Vec<Option<usize>>> = vec![Vec::new(); n];

    for &j in topology.preorder().iter().rev() {
        let Some(parent) = topology.parent(j) else {
            continue;
        };
        let bp = &parts[bone_of_child[j].expect("non-root joint has a bone")];
        let parent_states = available[parent].len();
        let mut gains = vec![0.0; parent_states];
        let mut choices = vec![None; parent_states];
        for kp in 0..parent_states {
            if !available[parent][kp] {
                continue;
            }
            let mut best = 0.0;
            let mut arg = None;
            for (kc, &avail) in available[j].iter().enumerate() {
                if !avail {
                    continue;
                }
                let Some(phi) = bp.score(kp, kc) else {
                    continue;
                };
                let value = phi + subtree[j][kc];
                if value > best {
                    best = value;
                    arg = Some(kc);
                }
            }
            gains[kp] = best;
            choices[kp] = arg;
        }
        for (total, gain) in subtree[parent].iter_mut().zip(&gains) {
            *total += gain;
        }
        choice[j] = choices;
    }

    let root = topology.root();
    let mut best = 0.0;
    let mut root_state = None;
    for (k, &avail) in available[root].iter().enumerate() {
        if avail && subtree[root][k] > best {
            best = subtree[root][k];
            root_state = Some(k);
        }
    }
    let root_state = root_state?;

    let mut nodes = vec![None; n];
    nodes[root] = Some(root_state);
    for &j in topology.preorder() {
        if let Some(parent) = topology.parent(j) {
            nodes[j] = nodes[parent].and_then(|kp| choice[j][kp]);
        }
    }
    let score = assignment_score(topology, parts, &nodes).expect("assignment uses unpruned parts");
    Some(Assignment { nodes, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::parts::PartProposal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn table(bone: (usize, usize), num_u: usize, num_v: usize, scores: &[Option<f64>]) -> BoneParts {
        let parts = (0..num_u)
            .flat_map(|ku| (0..num_v).map(move |kv| (ku, kv)))
            .map(|(ku, kv)| {
                let s = scores[ku * num_v + kv];
                PartProposal {
                    bone,
                    ku,
                    kv,
                    endpoints: (Point3::origin(), Point3::origin()),
                    score: s.unwrap_or(0.0),
                    pruned: s.is_none(),
                }
            })
            .collect();
        BoneParts {
            bone,
            num_u,
            num_v,
            parts,
        }
    }

    // Exhaustive search over every state vector (missing or a proposal per
    // joint), keeping the lexicographically smallest maximiser in preorder
    // with missing ordered before proposal 0.
    fn brute_force(topology: &SkeletonTopology, parts: &[BoneParts], counts: &[usize]) -> (f64, Vec<Option<usize>>) {
        let n = counts.len();
        let mut state = vec![0usize; n]; // 0 = missing, k + 1 = proposal k
        let mut best = (0.0, vec![None; n]);
        let key = |nodes: &[Option<usize>]| -> Vec<usize> {
            topology.preorder().iter().map(|&j| nodes[j].map_or(0, |k| k + 1)).collect()
        };
        loop {
            let nodes: Vec<Option<usize>> = state.iter().map(|&s| s.checked_sub(1)).collect();
            let feasible = topology.bones().iter().enumerate().all(|(b, &(u, v))| match (nodes[u], nodes[v]) {
                (None, Some(_)) => false,
                (Some(ku), Some(kv)) => parts[b].score(ku, kv).is_some(),
                _ => true,
            });
            if feasible {
                let score = assignment_score(topology, parts, &nodes).unwrap();
                if score > best.0 || (score == best.0 && key(&nodes) < key(&best.1)) {
                    best = (score, nodes);
                }
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                state[i] += 1;
                if state[i] <= counts[i] {
                    break;
                }
                state[i] = 0;
                i += 1;
            }
        }
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> SkeletonTopology {
        let root = rng.random_range(0..n);
        let mut order: Vec<usize> = (0..n).filter(|&j| j != root).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut placed = vec![root];
        let mut bones = Vec::new();
        for j in order {
            let parent = placed[rng.random_range(0..placed.len())];
            bones.push((parent, j));
            placed.push(j);
        }
        SkeletonTopology::new(n, root, bones).unwrap()
    }

    pub(crate) fn random_instance(seed: u64) -> (SkeletonTopology, Vec<BoneParts>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=5);
        let topology = random_tree(&mut rng, n);
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=4)).collect();
        let parts = topology
            .bones()
            .iter()
            .map(|&(u, v)| {
                let scores: Vec<Option<f64>> = (0..counts[u] * counts[v])
                    .map(|_| {
                        if rng.random_bool(0.1) {
                            None
                        } else {
                            // dyadic values keep every sum exact, so ties are real
                            Some(rng.random_range(0..=16) as f64 / 16.0)
                        }
                    })
                    .collect();
                table((u, v), counts[u], counts[v], &scores)
            })
            .collect();
        (topology, parts, counts)
    }

    #[test]
    fn one_proposal_per_joint() {
        let topo = crate::body::default_topology();
        let parts: Vec<BoneParts> = topo
            .bones()
            .iter()
            .enumerate()
            .map(|(i, &b)| table(b, 1, 1, &[Some(0.1 + 0.05 * i as f64)]))
            .collect();
        let avail = vec![vec![true]; 15];
        let a = dp_best_skeleton(&topo, &parts, &avail).unwrap();
        assert!(a.nodes.iter().all(|n| *n == Some(0)));
        let expected: f64 = (0..14).map(|i| 0.1 + 0.05 * i as f64).sum();
        assert!((a.score - expected).abs() < 1e-12);
    }

    #[test]
    fn chain_matches_enumeration() {
        let topo = SkeletonTopology::new(3, 0, vec![(0, 1), (1, 2)]).unwrap();
        let parts = vec![
            table((0, 1), 2, 2, &[Some(0.5), Some(0.1), Some(0.2), Some(0.9)]),
            table((1, 2), 2, 2, &[Some(0.3), Some(0.8), Some(0.6), Some(0.05)]),
        ];
        let avail = vec![vec![true; 2]; 3];
        let a = dp_best_skeleton(&topo, &parts, &avail).unwrap();
        let (best, nodes) = brute_force(&topo, &parts, &[2, 2, 2]);
        assert_eq!(a.score, best);
        assert_eq!(a.nodes, nodes);
        // 0.9 + 0.6 beats 0.5 + 0.8
        assert_eq!(a.nodes, vec![Some(1), Some(1), Some(0)]);
    }

    #[test]
    fn empty_pool_gives_no_skeleton() {
        let topo = SkeletonTopology::new(2, 0, vec![(0, 1)]).unwrap();
        let parts = vec![table((0, 1), 0, 0, &[])];
        assert!(dp_best_skeleton(&topo, &parts, &[vec![], vec![]]).is_none());
    }

    #[test]
    fn unavailable_proposals_are_skipped() {
        let topo = SkeletonTopology::new(2, 0, vec![(0, 1)]).unwrap();
        let parts = vec![table((0, 1), 1, 2, &[Some(0.9), Some(0.4)])];
        let a = dp_best_skeleton(&topo, &parts, &[vec![true], vec![false, true]]).unwrap();
        assert_eq!(a.nodes, vec![Some(0), Some(1)]);
        assert_eq!(a.score, 0.4);
    }

    #[test]
    fn zero_parts_connect_only_when_needed() {
        // 0 - 1 - 2 : a zero-score bone is used to reach a scoring subtree
        let topo = SkeletonTopology::new(3, 0, vec![(0, 1), (1, 2)]).unwrap();
        let parts = vec![table((0, 1), 1, 1, &[Some(0.0)]), table((1, 2), 1, 1, &[Some(0.5)])];
        let avail = vec![vec![true]; 3];
        let a = dp_best_skeleton(&topo, &parts, &avail).unwrap();
        assert_eq!(a.nodes, vec![Some(0), Some(0), Some(0)]);
        // but a dangling zero-score leaf stays missing
        let parts = vec![table((0, 1), 1, 1, &[Some(0.5)]), table((1, 2), 1, 1, &[Some(0.0)])];
        let a = dp_best_skeleton(&topo, &parts, &avail).unwrap();
        assert_eq!(a.nodes, vec![Some(0), Some(0), None]);
    }

    #[test]
    fn random_instances_match_enumeration() {
        for seed in 0..300 {
            let (topo, parts, counts) = random_instance(seed);
            let avail: Vec<Vec<bool>> = counts.iter().map(|&c| vec![true; c]).collect();
            let (best, nodes) = brute_force(&topo, &parts, &counts);
            match dp_best_skeleton(&topo, &parts, &avail) {
                Some(a) => {
                    assert_eq!(a.score, best, "seed {seed}");
                    assert_eq!(a.nodes, nodes, "seed {seed}");
                }
                None => assert!(nodes.iter().all(Option::is_none), "seed {seed}"),
            }
        }
    }
}
