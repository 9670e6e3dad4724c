//! Linking per-frame skeletons into trajectories by head proximity.

use super::Skeleton;
use crate::body::SkeletonTopology;
use crate::geometry::Point3;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConfig {
    /// Largest frame difference still bridged.
    pub max_gap: usize,
    /// Allowed head displacement per frame of gap (metres).
    pub distance_per_frame: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            max_gap: 2,
            distance_per_frame: 0.30,
        }
    }
}

/// One person's skeletons over time, keyed by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTrajectory {
    pub person: u32,
    pub frames: BTreeMap<usize, Skeleton>,
}

impl SkeletonTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Endpoints of bone `bone` at every frame where both joints exist.
    pub fn part_trajectory(&self, topology: &SkeletonTopology, bone: usize) -> BTreeMap<usize, (Point3, Point3)> {
        let (u, v) = topology.bones()[bone];
        self.frames
            .iter()
            .filter_map(|(&t, s)| {
                let pu = s.joints.get(u)?.as_ref()?.position;
                let pv = s.joints.get(v)?.as_ref()?.position;
                Some((t, (pu, pv)))
            })
            .collect()
    }
}

struct Track {
    person: u32,
    last_frame: usize,
    last_head: Point3,
    frames: BTreeMap<usize, Skeleton>,
}

/// Associates skeletons across frames. At every frame, open tracks and new
/// skeletons are paired greedily by increasing head distance, subject to
/// `distance_per_frame × gap`. A track unmatched for `max_gap` frames is
/// closed; an unmatched skeleton starts a new track. Person ids follow
/// track creation order and are written into each skeleton.
pub fn associate_time(frames: &[Vec<Skeleton>], config: &TemporalConfig) -> Vec<SkeletonTrajectory> {
    let mut open: Vec<Track> = Vec::new();
    let mut closed: Vec<Track> = Vec::new();
    let mut next_person = 0u32;

    for (t, skeletons) in frames.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in open.iter().enumerate() {
            let gap = t - track.last_frame;
            let limit = config.distance_per_frame * gap as f64;
            for (si, s) in skeletons.iter().enumerate() {
                if let Some(head) = s.head() {
                    let d = (head - track.last_head).norm();
                    if d <= limit {
                        pairs.push((d, ti, si));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; open.len()];
        let mut skel_used = vec![false; skeletons.len()];
        for (_, ti, si) in pairs {
            if track_used[ti] || skel_used[si] {
                continue;
            }
            track_used[ti] = true;
            skel_used[si] = true;
            let track = &mut open[ti];
            let mut s = skeletons[si].clone();
            s.person = Some(track.person);
            track.last_frame = t;
            track.last_head = s.head().expect("matched skeletons have a head");
            track.frames.insert(t, s);
        }
        for (si, s) in skeletons.iter().enumerate() {
            if skel_used[si] {
                continue;
            }
            let mut s = s.clone();
            s.person = Some(next_person);
            let last_head = s.head().unwrap_or_else(|| Point3::new(f64::NAN, f64::NAN, f64::NAN));
            open.push(Track {
                person: next_person,
                last_frame: t,
                last_head,
                frames: BTreeMap::from([(t, s)]),
            });
            next_person += 1;
        }
        let (keep, done): (Vec<Track>, Vec<Track>) =
            open.into_iter().partition(|tr| t - tr.last_frame < config.max_gap && tr.last_head.x.is_finite());
        open = keep;
        closed.extend(done);
    }
    closed.extend(open);
    closed.sort_by_key(|t| t.person);
    closed
        .into_iter()
        .map(|t| SkeletonTrajectory {
            person: t.person,
            frames: t.frames,
        })
        .collect()
}
