//! Evaluation against reference skeletons: PCK curves, node and skeleton
//! accuracy, and nested camera subsets for camera-count studies.

use crate::assembly::Skeleton;
use crate::geometry::{Camera, Point3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_OUTLIER_CM: f64 = 5.0;
/// Cost given to pairings where either skeleton lacks a head.
const HEADLESS_COST: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference contains no joints")]
    EmptyReference,
    #[error("estimate has {estimated} frames but reference has {reference}")]
    FrameCountMismatch { estimated: usize, reference: usize },
    #[error("cannot sample {k} of {available} cameras")]
    SampleSize { k: usize, available: usize },
    #[error("seed camera {0} is not in the set")]
    UnknownSeedCamera(u32),
}

/// Greedy max-min selection: starts at `start`, then repeatedly adds the
/// point farthest from everything selected (lowest index on ties).
pub fn farthest_point_order(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order = vec![start];
    let mut nearest: Vec<f64> = points.iter().map(|p| (p - points[start]).norm()).collect();
    while order.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        order.push(best);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min((p - points[best]).norm());
        }
    }
    order
}

/// `k` cameras chosen by farthest-point sampling of their centres, starting
/// from `seed_camera` (the lowest id when `None`). The result for `k` is a
/// prefix of the result for `k + 1`.
pub fn sample_cameras(cameras: &[Camera], k: usize, seed_camera: Option<u32>) -> Result<Vec<Camera>, EvalError> {
    if k == 0 || k > cameras.len() {
        return Err(EvalError::SampleSize {
            k,
            available: cameras.len(),
        });
    }
    let mut sorted: Vec<&Camera> = cameras.iter().collect();
    sorted.sort_by_key(|c| c.id());
    let start = match seed_camera {
        Some(id) => sorted
            .iter()
            .position(|c| c.id() == id)
            .ok_or(EvalError::UnknownSeedCamera(id))?,
        None => 0,
    };
    let centres: Vec<Point3> = sorted.iter().map(|c| c.center()).collect();
    Ok(farthest_point_order(&centres, k, start)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect())
}

/// Minimum-cost assignment of rows to columns (O(n³) shortest augmenting
/// paths). Rectangular inputs are allowed; `result[row]` is the assigned
/// column, `None` for rows left over when there are more rows than columns.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let at = |r: usize, c: usize| if r < rows && c < cols { cost[r][c] } else { 0.0 };
    // 1-based potentials and matching, column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        matched_row[0] = r;
        let mut col = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let row = matched_row[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let slack = at(row - 1, c - 1) - u[row] - v[c];
                if slack < min_slack[c] {
                    min_slack[c] = slack;
                    way[c] = col;
                }
                if min_slack[c] < delta {
                    delta = min_slack[c];
                    next = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[matched_row[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_slack[c] -= delta;
                }
            }
            col = next;
            if matched_row[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            matched_row[col] = matched_row[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; rows];
    for c in 1..=n {
        let r = matched_row[c];
        if r >= 1 && r <= rows && c <= cols {
            result[r - 1] = Some(c - 1);
        }
    }
    result
}

/// Pairs each reference skeleton with an estimated one by minimum total head
/// distance. `result[i]` is the estimate matched to `reference[i]`.
pub fn match_skeletons(estimated: &[Skeleton], reference: &[Skeleton]) -> Vec<Option<usize>> {
    let cost: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| {
            estimated
                .iter()
                .map(|e| match (r.head(), e.head()) {
                    (Some(a), Some(b)) => (a - b).norm(),
                    _ => HEADLESS_COST,
                })
                .collect()
        })
        .collect();
    hungarian(&cost)
}

/// Per-reference-skeleton joint errors (metres) after per-frame matching;
/// `None` where the estimate lacks the joint. Reference joints that are
/// themselves missing are skipped.
pub fn joint_errors(estimated: &[Vec<Skeleton>], reference: &[Vec<Skeleton>]) -> Result<Vec<Vec<Option<f64>>>, EvalError> {
    if estimated.len() != reference.len() {
        return Err(EvalError::FrameCountMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    let mut out = Vec::new();
    for (est, refs) in estimated.iter().zip(reference) {
        let matching = match_skeletons(est, refs);
        for (r, m) in refs.iter().zip(matching) {
            let errors = r
                .joints
                .iter()
                .enumerate()
                .filter_map(|(j, rj)| {
                    let rj = rj.as_ref()?;
                    let ej = m.and_then(|k| est[k].joints.get(j).and_then(|e| e.as_ref()));
                    Some(ej.map(|e| (e.position - rj.position).norm()))
                })
                .collect();
            out.push(errors);
        }
    }
    Ok(out)
}

/// Fraction of reference joints whose estimate lies within each threshold
/// (centimetres). Missing estimates count as incorrect.
pub fn pck(estimated: &[Vec<Skeleton>], reference: &[Vec<Skeleton>], thresholds_cm: &[f64]) -> Result<Vec<f64>, EvalError> {
    let errors = joint_errors(estimated, reference)?;
    pck_from_errors(&errors, thresholds_cm)
}

fn pck_from_errors(errors: &[Vec<Option<f64>>], thresholds_cm: &[f64]) -> Result<Vec<f64>, EvalError> {
    let flat: Vec<Option<f64>> = errors.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(thresholds_cm
        .iter()
        .map(|t| {
            let limit = t / 100.0;
            flat.iter().filter(|e| e.is_some_and(|e| e <= limit)).count() as f64 / flat.len() as f64
        })
        .collect())
}

/// `(node accuracy, skeleton accuracy)`: the fraction of reference joints
/// reconstructed within `outlier_cm`, and the fraction of reference
/// skeletons with no joint outside it.
pub fn skeleton_accuracy(
    estimated: &[Vec<Skeleton>],
    reference: &[Vec<Skeleton>],
    outlier_cm: f64,
) -> Result<(f64, f64), EvalError> {
    let errors = joint_errors(estimated, reference)?;
    accuracy_from_errors(&errors, outlier_cm)
}

fn accuracy_from_errors(errors: &[Vec<Option<f64>>], outlier_cm: f64) -> Result<(f64, f64), EvalError> {
    let limit = outlier_cm / 100.0;
    let inlier = |e: &Option<f64>| e.is_some_and(|e| e <= limit);
    let joints: usize = errors.iter().map(Vec::len).sum();
    if joints == 0 {
        return Err(EvalError::EmptyReference);
    }
    let good_joints: usize = errors.iter().map(|s| s.iter().filter(|e| inlier(e)).count()).sum();
    let good_skeletons = errors.iter().filter(|s| s.iter().all(inlier)).count();
    Ok((good_joints as f64 / joints as f64, good_skeletons as f64 / errors.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds_cm: Vec<f64>,
    pub pck: Vec<f64>,
    pub outlier_threshold_cm: f64,
    pub node_accuracy: f64,
    pub skeleton_accuracy: f64,
    /// PCK curve restricted to frames with the given number of people.
    pub pck_by_person_count: BTreeMap<usize, Vec<f64>>,
    pub cameras: Vec<u32>,
    pub frames: usize,
}

impl EvalReport {
    pub fn compute(
        estimated: &[Vec<Skeleton>],
        reference: &[Vec<Skeleton>],
        thresholds_cm: &[f64],
        outlier_cm: f64,
        cameras: Vec<u32>,
    ) -> Result<Self, EvalError> {
        let errors = joint_errors(estimated, reference)?;
        let curve = pck_from_errors(&errors, thresholds_cm)?;
        let (node_accuracy, skeleton_accuracy) = accuracy_from_errors(&errors, outlier_cm)?;
        let mut groups: BTreeMap<usize, Vec<Vec<Option<f64>>>> = BTreeMap::new();
        let mut next = 0;
        for refs in reference {
            let group = groups.entry(refs.len()).or_default();
            group.extend(errors[next..next + refs.len()].iter().cloned());
            next += refs.len();
        }
        let pck_by_person_count = groups
            .into_iter()
            .filter_map(|(count, errs)| pck_from_errors(&errs, thresholds_cm).ok().map(|c| (count, c)))
            .collect();
        Ok(Self {
            thresholds_cm: thresholds_cm.to_vec(),
            pck: curve,
            outlier_threshold_cm: outlier_cm,
            node_accuracy,
            skeleton_accuracy,
            pck_by_person_count,
            cameras,
            frames: reference.len(),
        })
    }

    /// Two columns, `threshold_cm,pck`, one row per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold_cm,pck\n");
        for (t, p) in self.thresholds_cm.iter().zip(&self.pck) {
            let _ = writeln!(out, "{t},{p}");
        }
        out
    }

    /// One row with a `pck@<t>cm` column per threshold.
    pub fn to_wide_csv(&self) -> String {
        let header: Vec<String> = self.thresholds_cm.iter().map(|t| format!("pck@{t}cm")).collect();
        let row: Vec<String> = self.pck.iter().map(f64::to_string).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "frames            {}", self.frames);
        if self.cameras.is_empty() {
            let _ = writeln!(out, "cameras           all");
        } else {
            let _ = writeln!(out, "cameras           {}", self.cameras.len());
        }
        let _ = writeln!(
            out,
            "node accuracy     {:.4}  (outlier > {} cm)",
            self.node_accuracy, self.outlier_threshold_cm
        );
        let _ = writeln!(out, "skeleton accuracy {:.4}", self.skeleton_accuracy);
        let _ = writeln!(out);
        let mut header = String::from("threshold_cm   pck");
        for count in self.pck_by_person_count.keys() {
            let _ = write!(header, "   n={count}");
        }
        let _ = writeln!(out, "{header}");
        for (i, (t, p)) in self.thresholds_cm.iter().zip(&self.pck).enumerate() {
            let mut line = format!("{t:>12}   {p:.4}");
            for curve in self.pck_by_person_count.values() {
                let _ = write!(line, "   {:.4}", curve[i]);
            }
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Distortion;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn skeleton(points: &[Point3]) -> Skeleton {
        let positions: Vec<Option<Point3>> = points.iter().map(|p| Some(*p)).collect();
        Skeleton::from_positions(&positions, None)
    }

    fn person(offset: f64) -> Skeleton {
        let pts: Vec<Point3> = (0..15).map(|j| Point3::new(offset, 0.0, 0.1 * j as f64)).collect();
        skeleton(&pts)
    }

    #[test]
    fn exact_estimate_scores_one() {
        let frames = vec![vec![person(0.0), person(1.0)]; 3];
        assert_eq!(pck(&frames, &frames, &[1.0, 5.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(skeleton_accuracy(&frames, &frames, 5.0).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn half_the_joints_off() {
        let reference = vec![vec![skeleton(&[Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0)])]];
        let estimate = vec![vec![skeleton(&[Point3::new(0.0, 0.0, 0.0), Point3::new(0.03, 0.0, 1.0)])]];
        assert_eq!(pck(&estimate, &reference, &[2.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn one_bad_joint_in_ten_skeletons() {
        let reference: Vec<Vec<Skeleton>> = (0..10).map(|_| vec![person(0.0)]).collect();
        let mut estimate = reference.clone();
        estimate[3][0].joints[7].as_mut().unwrap().position.x += 0.2;
        let (node, skel) = skeleton_accuracy(&estimate, &reference, 5.0).unwrap();
        assert_eq!(node, 149.0 / 150.0);
        assert_eq!(skel, 0.9);
    }

    #[test]
    fn missing_joints_and_people_are_wrong() {
        let reference = vec![vec![person(0.0), person(2.0)]];
        let mut only = person(0.0);
        only.joints[4] = None;
        let estimate = vec![vec![only]];
        let curve = pck(&estimate, &reference, &[10.0]).unwrap();
        assert_eq!(curve, vec![14.0 / 30.0]);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert_eq!(pck(&[vec![]], &[vec![]], &[5.0]), Err(EvalError::EmptyReference));
    }

    #[test]
    fn matching_ignores_estimate_order() {
        let reference = vec![vec![person(0.0), person(1.0), person(2.0)]];
        let estimate = vec![vec![person(2.0), person(0.0), person(1.0)]];
        assert_eq!(pck(&estimate, &reference, &[0.1]).unwrap(), vec![1.0]);
    }

    fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let cols = cost[0].len();
            let free_rows = cost.len() - row;
            let free_cols = used.iter().filter(|u| !**u).count();
            // a row may stay unmatched only if rows outnumber columns
            let mut best = if free_rows > free_cols { go(cost, row + 1, used) } else { f64::INFINITY };
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row][c] + go(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0..20) as f64).collect())
                .collect();
            let assignment = hungarian(&cost);
            let mut seen = vec![false; cols];
            let mut total = 0.0;
            for (r, c) in assignment.iter().enumerate() {
                if let Some(c) = c {
                    assert!(!seen[*c]);
                    seen[*c] = true;
                    total += cost[r][*c];
                }
            }
            assert_eq!(assignment.iter().flatten().count(), rows.min(cols));
            assert_eq!(total, brute_force_assignment(&cost));
        }
    }

    fn camera_at(id: u32, eye: Point3) -> Camera {
        Camera::look_at(id, &eye, &Point3::new(0.0, 0.0, 1.0), &Vector3::z(), 400.0, 640, 480, Distortion::default()).unwrap()
    }

    #[test]
    fn sampling_everything_returns_everything() {
        let cams: Vec<Camera> = (0..5).map(|i| camera_at(i, Point3::new(3.0, i as f64, 1.0))).collect();
        let all = sample_cameras(&cams, 5, None).unwrap();
        let mut ids: Vec<u32> = all.iter().map(Camera::id).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(sample_cameras(&cams, 6, None).is_err());
        assert!(sample_cameras(&cams, 0, None).is_err());
    }

    #[test]
    fn collinear_endpoints_are_picked_first() {
        let cams = vec![
            camera_at(0, Point3::new(3.0, -1.0, 1.0)),
            camera_at(1, Point3::new(3.0, 0.0, 1.0)),
            camera_at(2, Point3::new(3.0, 1.0, 1.0)),
        ];
        let two = sample_cameras(&cams, 2, Some(0)).unwrap();
        assert_eq!(two.iter().map(Camera::id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn report_outputs() {
        let frames = vec![vec![person(0.0)], vec![person(0.0), person(1.0)]];
        let report = EvalReport::compute(&frames, &frames, &[1.0, 2.0], 5.0, vec![0, 1]).unwrap();
        assert_eq!(report.to_csv(), "threshold_cm,pck\n1,1\n2,1\n");
        assert_eq!(report.to_wide_csv(), "pck@1cm,pck@2cm\n1,1\n");
        assert_eq!(report.pck_by_person_count.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert!(report.to_table().contains("skeleton accuracy"));
    }

    proptest! {
        #[test]
        fn subsets_are_nested(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams: Vec<Camera> = (0..30)
                .map(|i| {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let z: f64 = rng.random_range(-0.3..0.9);
                    let r = (1.0 - z * z).sqrt();
                    camera_at(i, Point3::new(3.0 * r * a.cos(), 3.0 * r * a.sin(), 1.0 + 3.0 * z))
                })
                .collect();
            let big = sample_cameras(&cams, 20, None).unwrap();
            for k in [5, 10] {
                let small = sample_cameras(&cams, k, None).unwrap();
                prop_assert_eq!(&small[..], &big[..k]);
            }
        }

        #[test]
        fn pck_is_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference = vec![vec![person(0.0), person(1.5)]];
            let mut estimate = reference.clone();
            for s in &mut estimate[0] {
                for j in s.joints.iter_mut().flatten() {
                    j.position.x += rng.random_range(-0.1..0.1);
                }
            }
            let thresholds: Vec<f64> = (1..=15).map(|t| t as f64).collect();
            let curve = pck(&estimate, &reference, &thresholds).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
