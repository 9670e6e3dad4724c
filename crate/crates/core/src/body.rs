//! Fixed 15-joint skeleton and the bone tree used by every stage.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const NUM_JOINTS: usize = 15;

/// Joints in canonical file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JointId {
    Neck,
    HeadTop,
    BodyCenter,
    ShoulderL,
    ShoulderR,
    ElbowL,
    ElbowR,
    WristL,
    WristR,
    HipL,
    HipR,
    KneeL,
    KneeR,
    AnkleL,
    AnkleR,
}

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::Neck,
        JointId::HeadTop,
        JointId::BodyCenter,
        JointId::ShoulderL,
        JointId::ShoulderR,
        JointId::ElbowL,
        JointId::ElbowR,
        JointId::WristL,
        JointId::WristR,
        JointId::HipL,
        JointId::HipR,
        JointId::KneeL,
        JointId::KneeR,
        JointId::AnkleL,
        JointId::AnkleR,
    ];

    /// The joint used for head correspondence filtering and identity tracking.
    pub const HEAD: JointId = JointId::HeadTop;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<JointId> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Neck => "neck",
            JointId::HeadTop => "head_top",
            JointId::BodyCenter => "body_center",
            JointId::ShoulderL => "shoulder_l",
            JointId::ShoulderR => "shoulder_r",
            JointId::ElbowL => "elbow_l",
            JointId::ElbowR => "elbow_r",
            JointId::WristL => "wrist_l",
            JointId::WristR => "wrist_r",
            JointId::HipL => "hip_l",
            JointId::HipR => "hip_r",
            JointId::KneeL => "knee_l",
            JointId::KneeR => "knee_r",
            JointId::AnkleL => "ankle_l",
            JointId::AnkleR => "ankle_r",
        }
    }

    /// Left/right counterpart; centre joints map to themselves.
    pub fn mirrored(self) -> JointId {
        use JointId::*;
        match self {
            ShoulderL => ShoulderR,
            ShoulderR => ShoulderL,
            ElbowL => ElbowR,
            ElbowR => ElbowL,
            WristL => WristR,
            WristR => WristL,
            HipL => HipR,
            HipR => HipL,
            KneeL => KneeR,
            KneeR => KneeL,
            AnkleL => AnkleR,
            AnkleR => AnkleL,
            other => other,
        }
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology needs at least one joint")]
    Empty,
    #[error("bone ({0}, {1}) references a joint out of range")]
    JointOutOfRange(usize, usize),
    #[error("bone ({0}, {0}) connects a joint to itself")]
    SelfLoop(usize),
    #[error("joint {0} has more than one parent")]
    MultipleParents(usize),
    #[error("expected {expected} bones for {joints} joints, found {found}")]
    EdgeCount {
        joints: usize,
        expected: usize,
        found: usize,
    },
    #[error("joint {0} is not reachable from the root")]
    Unreachable(usize),
}

/// A rooted tree over joint indices `0..num_joints`; bones are `(parent, child)`.
///
/// The reconstruction code works on plain indices so that the assembly DP
/// can also run on small synthetic trees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    num_joints: usize,
    root: usize,
    bones: Vec<(usize, usize)>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    preorder: Vec<usize>,
}

impl SkeletonTopology {
    pub fn new(num_joints: usize, root: usize, bones: Vec<(usize, usize)>) -> Result<Self, TopologyError> {
        if num_joints == 0 {
            return Err(TopologyError::Empty);
        }
        if root >= num_joints {
            return Err(TopologyError::JointOutOfRange(root, root));
        }
        if bones.len() != num_joints - 1 {
            return Err(TopologyError::EdgeCount {
                joints: num_joints,
                expected: num_joints - 1,
                found: bones.len(),
            });
        }
        let mut parent = vec![None; num_joints];
        let mut children = vec![Vec::new(); num_joints];
        for &(p, c) in &bones {
            if p >= num_joints || c >= num_joints {
                return Err(TopologyError::JointOutOfRange(p, c));
            }
            if p == c {
                return Err(TopologyError::SelfLoop(p));
            }
            if parent[c].is_some() || c == root {
                return Err(TopologyError::MultipleParents(c));
            }
            parent[c] = Some(p);
            children[p].push(c);
        }
        let mut preorder = Vec::with_capacity(num_joints);
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            preorder.push(j);
            stack.extend(children[j].iter().rev());
        }
        if preorder.len() != num_joints {
            let missing = (0..num_joints).find(|j| !preorder.contains(j)).unwrap_or(0);
            return Err(TopologyError::Unreachable(missing));
        }
        Ok(Self {
            num_joints,
            root,
            bones,
            parent,
            children,
            preorder,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    /// Depth-first order from the root; every parent precedes its children.
    pub fn preorder(&self) -> &[usize] {
        &self.preorder
    }

    /// Index of the bone whose child is `joint`.
    pub fn bone_to_parent(&self, joint: usize) -> Option<usize> {
        self.bones.iter().position(|&(_, c)| c == joint)
    }
}

/// The skeleton tree rooted at the neck, with an explicit neck to body-centre
/// torso bone.
pub fn default_topology() -> SkeletonTopology {
    use JointId::*;
    let bones = [
        (Neck, HeadTop),
        (Neck, BodyCenter),
        (Neck, ShoulderL),
        (Neck, ShoulderR),
        (ShoulderL, ElbowL),
        (ElbowL, WristL),
        (ShoulderR, ElbowR),
        (ElbowR, WristR),
        (BodyCenter, HipL),
        (BodyCenter, HipR),
        (HipL, KneeL),
        (KneeL, AnkleL),
        (HipR, KneeR),
        (KneeR, AnkleR),
    ];
    SkeletonTopology::new(
        NUM_JOINTS,
        Neck.index(),
        bones.iter().map(|&(p, c)| (p.index(), c.index())).collect(),
    )
    .expect("default topology is a spanning tree")
}

/// Children of `joint` in the given topology.
pub fn children(topology: &SkeletonTopology, joint: JointId) -> Vec<JointId> {
    topology
        .children(joint.index())
        .iter()
        .filter_map(|&c| JointId::from_index(c))
        .collect()
}

/// True for the neck to body-centre bone.
pub fn is_torso_bone(bone: (usize, usize)) -> bool {
    let torso = (JointId::Neck.index(), JointId::BodyCenter.index());
    bone == torso || bone == (torso.1, torso.0)
}
