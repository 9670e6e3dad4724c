//! Ray and segment queries against capsules (swept spheres).

use crate::geometry::Point3;
use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Point3,
    pub b: Point3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Point3, b: Point3, radius: f64) -> Self {
        Self { a, b, radius }
    }

    /// Distance from `p` to the capsule axis.
    pub fn axis_distance(&self, p: &Point3) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 { ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (self.a + ab * s)).norm()
    }

    pub fn contains(&self, p: &Point3) -> bool {
        self.axis_distance(p) <= self.radius
    }

    /// Smallest `s > min_s` with `origin + s·dir` on the capsule surface.
    /// `dir` need not be normalised.
    pub fn intersect_ray(&self, origin: &Point3, dir: &Vector3<f64>, min_s: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |s: f64| {
            if s > min_s && best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        };
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let r2 = self.radius * self.radius;
        if len2 > 0.0 {
            // infinite cylinder, then clip to the segment
            let ao = origin - self.a;
            let d_perp = dir - ab * (dir.dot(&ab) / len2);
            let o_perp = ao - ab * (ao.dot(&ab) / len2);
            let qa = d_perp.norm_squared();
            let qb = 2.0 * d_perp.dot(&o_perp);
            let qc = o_perp.norm_squared() - r2;
            if qa > 0.0 {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc >= 0.0 {
                    let root = disc.sqrt();
                    for s in [(-qb - root) / (2.0 * qa), (-qb + root) / (2.0 * qa)] {
                        let axial = (ao + dir * s).dot(&ab) / len2;
                        if (0.0..=1.0).contains(&axial) {
                            consider(s);
                        }
                    }
                }
            }
        }
        for centre in [self.a, self.b] {
            let oc = origin - centre;
            let qa = dir.norm_squared();
            let qb = 2.0 * dir.dot(&oc);
            let qc = oc.norm_squared() - r2;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let root = disc.sqrt();
                consider((-qb - root) / (2.0 * qa));
                consider((-qb + root) / (2.0 * qa));
            }
        }
        best
    }

    /// True if the open segment `from → to` passes through the capsule.
    pub fn blocks_segment(&self, from: &Point3, to: &Point3) -> bool {
        let dir = to - from;
        self.contains(from) || self.intersect_ray(from, &dir, 0.0).is_some_and(|s| s < 1.0)
    }
}
