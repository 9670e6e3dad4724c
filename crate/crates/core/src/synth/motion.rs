//! Articulated bodies driven by parametric motion scripts.

use super::capsule::Capsule;
use crate::body::{default_topology, JointId, NUM_JOINTS};
use crate::geometry::Point3;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

// Segment lengths of a unit-scale body (metres).
const HEAD: f64 = 0.25;
const TORSO: f64 = 0.5;
const SHOULDER: f64 = 0.18;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.26;
const HIP: f64 = 0.10;
const THIGH: f64 = 0.42;
const SHIN: f64 = 0.40;
const ANKLE_HEIGHT: f64 = 0.10;

/// Capsule radius per bone of the default topology, in bone order.
const BONE_RADII: [f64; 14] = [0.10, 0.15, 0.06, 0.06, 0.05, 0.04, 0.05, 0.04, 0.08, 0.08, 0.07, 0.05, 0.07, 0.05];
const TORSO_BONE: usize = 1;

/// Shared motion parameters of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionScript {
    /// Freeze every body at its frame-0 pose.
    pub frozen: bool,
    /// Gait frequency (Hz).
    pub frequency: f64,
    /// Peak arm and leg swing (radians).
    pub swing: f64,
    /// Amplitude of the back-and-forth walk (metres).
    pub walk: f64,
}

impl Default for MotionScript {
    fn default() -> Self {
        Self {
            frozen: false,
            frequency: 0.8,
            swing: 0.5,
            walk: 0.15,
        }
    }
}

/// Per-person randomised body and gait parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actor {
    pub base: Point3,
    pub heading: f64,
    pub scale: f64,
    pub phase: f64,
    pub swing_gain: f64,
    pub abduction: [f64; 2],
    pub twist: f64,
}

impl Actor {
    pub fn random<R: Rng>(rng: &mut R, base: Point3) -> Self {
        Self {
            base,
            heading: rng.random_range(0.0..TAU),
            scale: rng.random_range(0.92..1.08),
            phase: rng.random_range(0.0..TAU),
            swing_gain: rng.random_range(0.6..1.2),
            abduction: [rng.random_range(0.05..0.7), rng.random_range(0.05..0.7)],
            twist: rng.random_range(-0.2..0.2),
        }
    }
}

/// Joint positions and per-bone rigid frames of one body at one instant.
/// Bone `b` moves rigidly with `(origin = joint u, rotation = frames[b])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joints: [Point3; NUM_JOINTS],
    pub frames: Vec<Matrix3<f64>>,
    pub scale: f64,
}

fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Forward kinematics of `actor` at time `time` (seconds).
pub fn pose_at(actor: &Actor, script: &MotionScript, time: f64) -> Pose {
    let t = if script.frozen { 0.0 } else { time };
    let s = actor.scale;
    let w = TAU * script.frequency;
    let gait = w * t + actor.phase;
    let swing = script.swing * actor.swing_gain * gait.sin();

    let yaw = rot(Vector3::z(), actor.heading);
    let forward = yaw * Vector3::x();
    let base = actor.base + forward * (script.walk * (0.5 * gait).sin());

    let pelvis = yaw;
    let torso = yaw * rot(Vector3::z(), actor.twist * gait.sin()) * rot(Vector3::y(), 0.05 + 0.03 * gait.cos());
    let head = torso * rot(Vector3::y(), 0.15 * (0.7 * gait).sin());

    let down = Vector3::new(0.0, 0.0, -1.0);
    let centre = Point3::new(base.x, base.y, s * (ANKLE_HEIGHT + THIGH + SHIN) + 0.01 * (2.0 * gait).sin());
    let neck = centre + torso * Vector3::new(0.0, 0.0, s * TORSO);
    let head_top = neck + head * Vector3::new(0.0, 0.0, s * HEAD);

    let mut joints = [Point3::origin(); NUM_JOINTS];
    let mut frames = vec![Matrix3::identity(); 14];
    joints[JointId::Neck.index()] = neck;
    joints[JointId::HeadTop.index()] = head_top;
    joints[JointId::BodyCenter.index()] = centre;
    frames[0] = head;
    frames[TORSO_BONE] = torso;

    // side: 0 = left (+y in the body frame), 1 = right
    for side in 0..2 {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let (sh, el, wr, hip, kn, an) = if side == 0 {
            (JointId::ShoulderL, JointId::ElbowL, JointId::WristL, JointId::HipL, JointId::KneeL, JointId::AnkleL)
        } else {
            (JointId::ShoulderR, JointId::ElbowR, JointId::WristR, JointId::HipR, JointId::KneeR, JointId::AnkleR)
        };
        let arm_swing = sign * swing;
        let shoulder = neck + torso * Vector3::new(0.0, sign * s * SHOULDER, 0.0);
        let upper = torso * rot(Vector3::x(), -sign * actor.abduction[side]) * rot(Vector3::y(), arm_swing);
        let elbow = shoulder + upper * (down * (s * UPPER_ARM));
        let bend = 0.35 + 0.25 * (1.0 + (gait + sign * 0.5).sin());
        let fore = upper * rot(Vector3::y(), -bend);
        let wrist = elbow + fore * (down * (s * FOREARM));

        let leg_swing = -sign * 0.6 * swing;
        let hip_pos = centre + pelvis * Vector3::new(0.0, sign * s * HIP, 0.0);
        let thigh = pelvis * rot(Vector3::x(), -sign * 0.05) * rot(Vector3::y(), leg_swing);
        let knee = hip_pos + thigh * (down * (s * THIGH));
        let flex = 0.1 + 0.35 * (gait + sign * 1.2).sin().max(0.0);
        let shin = thigh * rot(Vector3::y(), flex);
        let ankle = knee + shin * (down * (s * SHIN));

        joints[sh.index()] = shoulder;
        joints[el.index()] = elbow;
        joints[wr.index()] = wrist;
        joints[hip.index()] = hip_pos;
        joints[kn.index()] = knee;
        joints[an.index()] = ankle;
        // bone order of the default topology
        frames[2 + side] = torso;
        frames[4 + 2 * side] = upper;
        frames[5 + 2 * side] = fore;
        frames[8 + side] = pelvis;
        frames[10 + 2 * side] = thigh;
        frames[11 + 2 * side] = shin;
    }
    Pose { joints, frames, scale: s }
}

impl Pose {
    pub fn capsules(&self) -> Vec<Capsule> {
        default_topology()
            .bones()
            .iter()
            .zip(BONE_RADII)
            .map(|(&(u, v), r)| Capsule::new(self.joints[u], self.joints[v], r * self.scale))
            .collect()
    }

    pub fn torso_capsule(&self) -> Capsule {
        Capsule::new(
            self.joints[JointId::Neck.index()],
            self.joints[JointId::BodyCenter.index()],
            BONE_RADII[TORSO_BONE] * self.scale,
        )
    }

    pub fn bone_radius(&self, bone: usize) -> f64 {
        BONE_RADII[bone] * self.scale
    }

    /// Bounding sphere of every capsule.
    pub fn bounds(&self) -> (Point3, f64) {
        let centre = self.joints[JointId::BodyCenter.index()];
        let radius = self
            .joints
            .iter()
            .map(|j| (j - centre).norm())
            .fold(0.0, f64::max)
            + 0.16 * self.scale;
        (centre, radius)
    }
}
