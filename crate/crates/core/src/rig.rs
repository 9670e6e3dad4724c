//! Camera placement on a panelised dome: every panel carries the same
//! camera pattern, and the pattern is optimised so that each camera sees
//! its neighbours under equal angles from the dome centre.

use crate::geometry::{Camera, Distortion, Point3};
use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DOME_RADIUS: f64 = 2.745;

/// A neighbour reference: `(panel, camera)`.
pub type CameraRef = (usize, usize);

/// Camera layout shared by all panels.
///
/// Camera `i` of panel `p` looks from the dome centre along
/// `panel_rotations[p] · normalize(center + x·axis_u + y·axis_v)` where
/// `(x, y) = base[i] + offsets[i]`, i.e. its position on the reference panel
/// plane pushed out to the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigLayout {
    pub radius: f64,
    pub panel_rotations: Vec<Matrix3<f64>>,
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub base: Vec<Vector2<f64>>,
    pub offsets: Vec<Vector2<f64>>,
    /// `neighbors[p][i]`: the cameras adjacent to camera `i` of panel `p`.
    pub neighbors: Vec<Vec<Vec<CameraRef>>>,
}

impl RigLayout {
    pub fn panels(&self) -> usize {
        self.panel_rotations.len()
    }

    pub fn cameras_per_panel(&self) -> usize {
        self.base.len()
    }

    fn reference_direction(&self, i: usize, offsets: &[Vector2<f64>]) -> Vector3<f64> {
        let q = self.base[i] + offsets[i];
        (self.center + self.axis_u * q.x + self.axis_v * q.y).normalize()
    }

    fn directions_with(&self, offsets: &[Vector2<f64>]) -> Vec<Vec<Vector3<f64>>> {
        let reference: Vec<Vector3<f64>> = (0..self.base.len()).map(|i| self.reference_direction(i, offsets)).collect();
        self.panel_rotations
            .iter()
            .map(|r| reference.iter().map(|d| r * d).collect())
            .collect()
    }

    /// Unit viewing directions from the dome centre, `[panel][camera]`.
    pub fn directions(&self) -> Vec<Vec<Vector3<f64>>> {
        self.directions_with(&self.offsets)
    }

    /// Camera centres relative to the dome centre.
    pub fn positions(&self) -> Vec<Point3> {
        self.directions()
            .into_iter()
            .flatten()
            .map(|d| Point3::from(d * self.radius))
            .collect()
    }

    /// Whether `j ∈ N(i)` implies `i ∈ N(j)`.
    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(p, cams)| {
            cams.iter()
                .enumerate()
                .all(|(i, ns)| ns.iter().all(|&(q, k)| self.neighbors[q][k].contains(&(p, i))))
        })
    }

    /// Cameras aimed at the dome centre, which sits at `dome_center` in world
    /// coordinates. Cameras below `min_height` are skipped; ids are
    /// consecutive in panel-major order.
    pub fn to_cameras(&self, dome_center: &Point3, focal: f64, width: u32, height: u32, min_height: f64) -> Vec<Camera> {
        self.positions()
            .into_iter()
            .map(|p| dome_center + p.coords)
            .filter(|p| p.z >= min_height)
            .enumerate()
            .map(|(id, eye)| {
                let forward = (dome_center - eye).normalize();
                let up = if forward.cross(&Vector3::z()).norm() < 1e-3 { Vector3::x() } else { Vector3::z() };
                Camera::look_at(id as u32, &eye, dome_center, &up, focal, width, height, Distortion::default())
                    .expect("rig camera is valid")
            })
            .collect()
    }
}

/// Angle at the origin between two directions.
pub fn center_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn objective_with(layout: &RigLayout, offsets: &[Vector2<f64>]) -> f64 {
    let dirs = layout.directions_with(offsets);
    let per_panel: Vec<f64> = (0..layout.panels())
        .into_par_iter()
        .map(|p| {
            let mut sum = 0.0;
            for (i, ns) in layout.neighbors[p].iter().enumerate() {
                let angles: Vec<f64> = ns.iter().map(|&(q, k)| center_angle(&dirs[p][i], &dirs[q][k])).collect();
                for (j, aj) in angles.iter().enumerate() {
                    for (k, ak) in angles.iter().enumerate() {
                        if j != k {
                            sum += (aj - ak) * (aj - ak);
                        }
                    }
                }
            }
            sum
        })
        .collect();
    per_panel.iter().sum()
}

/// Sum over panels, cameras and ordered pairs of distinct neighbours of the
/// squared difference of their angles to the camera.
pub fn placement_objective(layout: &RigLayout) -> f64 {
    objective_with(layout, &layout.offsets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step moves the parameters less than this.
    pub step_tolerance: f64,
    /// Central-difference width for the gradient.
    pub gradient_step: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            step_tolerance: 1e-12,
            gradient_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step.
    pub history: Vec<f64>,
}

fn gradient(layout: &RigLayout, offsets: &[Vector2<f64>], h: f64) -> Vec<Vector2<f64>> {
    let mut probe = offsets.to_vec();
    let mut grad = vec![Vector2::zeros(); offsets.len()];
    for i in 0..offsets.len() {
        for axis in 0..2 {
            let original = probe[i][axis];
            probe[i][axis] = original + h;
            let up = objective_with(layout, &probe);
            probe[i][axis] = original - h;
            let down = objective_with(layout, &probe);
            probe[i][axis] = original;
            grad[i][axis] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// Gradient descent with Armijo backtracking on the shared offsets. The
/// objective never increases between accepted steps.
pub fn optimize_placement(layout: &RigLayout, config: &OptimizeConfig) -> (RigLayout, OptimizeReport) {
    let mut offsets = layout.offsets.clone();
    let mut value = objective_with(layout, &offsets);
    let initial = value;
    let mut history = Vec::new();
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < config.max_iterations && value > 0.0 {
        iterations += 1;
        let grad = gradient(layout, &offsets, config.gradient_step);
        let g2: f64 = grad.iter().map(|g| g.norm_squared()).sum();
        if g2 == 0.0 {
            break;
        }
        step *= 2.0;
        let mut accepted = None;
        while step * g2.sqrt() >= config.step_tolerance {
            let candidate: Vec<Vector2<f64>> = offsets.iter().zip(&grad).map(|(o, g)| o - g * step).collect();
            let v = objective_with(layout, &candidate);
            if v <= value - 1e-4 * step * g2 {
                accepted = Some((candidate, v));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, v)) = accepted else { break };
        let moved = step * g2.sqrt();
        offsets = candidate;
        value = v;
        history.push(v);
        if moved < config.step_tolerance {
            break;
        }
    }
    let optimized = RigLayout {
        offsets,
        ..layout.clone()
    };
    let report = OptimizeReport {
        initial_objective: initial,
        final_objective: value,
        iterations,
        history,
    };
    (optimized, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Distances from every camera to its three nearest other cameras.
pub fn report_baselines(positions: &[Point3]) -> Option<BaselineStats> {
    if positions.len() < 2 {
        return None;
    }
    let mut all = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let mut d: Vec<f64> = positions
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| (p - q).norm())
            .collect();
        d.sort_by(f64::total_cmp);
        all.extend(d.into_iter().take(3));
    }
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let max = all.iter().copied().fold(0.0, f64::max);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    Some(BaselineStats { min, mean, max })
}

/// The 20 triangular faces of an icosahedron (outward, counter-clockwise).
fn icosahedron() -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v = Vec::new();
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            v.push(Vector3::new(0.0, a, b));
            v.push(Vector3::new(a, b, 0.0));
            v.push(Vector3::new(b, 0.0, a));
        }
    }
    let edge = 2.0;
    let mut faces = Vec::new();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            for k in j + 1..v.len() {
                let close = |a: usize, b: usize| ((v[a] - v[b]).norm() - edge).abs() < 1e-9;
                if close(i, j) && close(j, k) && close(i, k) {
                    let n = (v[j] - v[i]).cross(&(v[k] - v[i]));
                    faces.push(if n.dot(&(v[i] + v[j] + v[k])) > 0.0 { [i, j, k] } else { [i, k, j] });
                }
            }
        }
    }
    (v, faces)
}

/// The hexagon split into six triangles around its centre, each cut into
/// four; returns the 24 triangles as 2D vertex triples.
fn tessellate_hexagon(circumradius: f64) -> Vec<[Vector2<f64>; 3]> {
    let o = Vector2::zeros();
    let corner = |m: usize| {
        let a = std::f64::consts::TAU * m as f64 / 6.0;
        Vector2::new(a.cos(), a.sin()) * circumradius
    };
    let mut tris = Vec::new();
    for m in 0..6 {
        let (a, b) = (corner(m), corner((m + 1) % 6));
        let (ma, mb, mc) = ((o + a) / 2.0, (o + b) / 2.0, (a + b) / 2.0);
        tris.push([o, ma, mb]);
        tris.push([ma, a, mc]);
        tris.push([mb, mc, b]);
        tris.push([ma, mc, mb]);
    }
    tris
}

/// Initial layout on the 20 hexagons of a truncated icosahedron, 24 cameras
/// per hexagon at the centroids of its triangle tessellation. Neighbours are
/// triangles sharing an edge, on the same or an adjacent hexagon.
pub fn default_layout(radius: f64) -> RigLayout {
    let (ico, faces) = icosahedron();
    let hexagon_corners = |f: &[usize; 3]| -> Vec<Vector3<f64>> {
        let [a, b, c] = f.map(|i| ico[i]);
        vec![
            a + (b - a) / 3.0,
            b + (a - b) / 3.0,
            b + (c - b) / 3.0,
            c + (b - c) / 3.0,
            c + (a - c) / 3.0,
            a + (c - a) / 3.0,
        ]
    };
    let reference = hexagon_corners(&faces[0]);
    let center = reference.iter().sum::<Vector3<f64>>() / 6.0;
    let circumradius = (reference[0] - center).norm();
    let axis_u = (reference[0] - center).normalize();
    let axis_v = center.normalize().cross(&axis_u);

    // rotations taking the reference face onto each face, vertex for vertex
    let frame = |f: &[usize; 3]| Matrix3::from_columns(&[ico[f[0]], ico[f[1]], ico[f[2]]]);
    let reference_inv = frame(&faces[0]).try_inverse().expect("face vertices are independent");
    let panel_rotations: Vec<Matrix3<f64>> = faces.iter().map(|f| frame(f) * reference_inv).collect();

    let triangles = tessellate_hexagon(circumradius);
    let base: Vec<Vector2<f64>> = triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
    let lift = |q: &Vector2<f64>| center + axis_u * q.x + axis_v * q.y;

    // every triangle edge in 3D, keyed by its midpoint
    let mut edges: Vec<(Vector3<f64>, CameraRef)> = Vec::new();
    for (p, rot) in panel_rotations.iter().enumerate() {
        for (i, t) in triangles.iter().enumerate() {
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                edges.push((rot * lift(&((t[a] + t[b]) / 2.0)), (p, i)));
            }
        }
    }
    let tolerance = 1e-9 * circumradius;
    let mut neighbors = vec![vec![Vec::new(); triangles.len()]; panel_rotations.len()];
    for (x, (mx, a)) in edges.iter().enumerate() {
        for (my, b) in &edges[x + 1..] {
            if a != b && (mx - my).norm() < tolerance {
                neighbors[a.0][a.1].push(*b);
                neighbors[b.0][b.1].push(*a);
            }
        }
    }
    for panel in &mut neighbors {
        for ns in panel.iter_mut() {
            ns.sort();
            ns.dedup();
        }
    }

    RigLayout {
        radius,
        panel_rotations,
        center,
        axis_u,
        axis_v,
        offsets: vec![Vector2::zeros(); base.len()],
        base,
        neighbors,
    }
}
