//! Track families, obstacle placement, and geometric audits.
//!
//! Generation is a pure function of (family, difficulty, seed, geometry):
//! gates are laid out deterministically per family, then obstacles are
//! rejection-sampled near the racing line until every placement constraint
//! holds. The audit re-checks a finished track from scratch, so tests can
//! brute-force the invariants instead of trusting the sampler.

use crate::field::{GateShape, GateSpec};
use crate::{Error, Mat3, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackFamily {
    Zigzag,
    Circular,
    Ellipse,
}

impl TrackFamily {
    /// Loop tracks cycle the target gate for multi-lap flights; the zigzag
    /// ends after its last gate.
    pub fn is_loop(&self) -> bool {
        matches!(self, TrackFamily::Circular | TrackFamily::Ellipse)
    }
}

/// Static scene primitive. Cylinders are vertical with `center` at the axis
/// midpoint and `height` the full z extent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleSpec {
    Sphere { center: Vec3, radius: f64 },
    Cylinder { center: Vec3, radius: f64, height: f64 },
}

impl ObstacleSpec {
    pub fn radius(&self) -> f64 {
        match self {
            ObstacleSpec::Sphere { radius, .. } | ObstacleSpec::Cylinder { radius, .. } => *radius,
        }
    }

    /// Tight axis-aligned bounding box.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        match *self {
            ObstacleSpec::Sphere { center, radius } => {
                let r = Vec3::new(radius, radius, radius);
                (center - r, center + r)
            }
            ObstacleSpec::Cylinder { center, radius, height } => (
                Vec3::new(center.x - radius, center.y - radius, center.z - 0.5 * height),
                Vec3::new(center.x + radius, center.y + radius, center.z + 0.5 * height),
            ),
        }
    }

    /// Conservative point-plus-radius cover for audits: the sphere is exact;
    /// the cylinder is covered by samples along its axis, which slightly
    /// understates clearance near the caps (stricter, never looser).
    pub fn audit_samples(&self) -> Vec<(Vec3, f64)> {
        match *self {
            ObstacleSpec::Sphere { center, radius } => vec![(center, radius)],
            ObstacleSpec::Cylinder { center, radius, height } => {
                let n = 9;
                (0..n)
                    .map(|k| {
                        let z = center.z - 0.5 * height + height * k as f64 / (n - 1) as f64;
                        (Vec3::new(center.x, center.y, z), radius)
                    })
                    .collect()
            }
        }
    }
}

/// Layout constants of the generated tracks. Everything is overridable from
/// the config file; the defaults describe a 40 x 20 m arena.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackGeometry {
    pub arena_x: f64,
    pub arena_y: f64,
    pub arena_z: f64,
    pub gate_width: f64,
    pub gate_height: f64,
    /// Gate center height above ground (m).
    pub gate_z: f64,
    pub n_gates: usize,
    /// Frame bar cross-section edge (m).
    pub frame_thickness: f64,
    pub zigzag_x0: f64,
    pub zigzag_dx: f64,
    pub zigzag_amplitude: f64,
    pub circle_radius: f64,
    pub ellipse_a: f64,
    pub ellipse_b: f64,
    /// Spawn distance behind the first gate (m).
    pub start_back: f64,
    pub obstacles_per_level: usize,
    pub obstacle_r_min: f64,
    pub obstacle_r_max: f64,
    /// Required gap between obstacle surfaces and the straight racing line.
    pub corridor_clear: f64,
    /// Required gap between obstacle surfaces and any gate frame rectangle.
    pub aperture_clear: f64,
    /// Required gap between obstacle surfaces and the spawn point.
    pub start_clear: f64,
    /// Minimum spacing between consecutive gate centers (m).
    pub min_gate_spacing: f64,
}

impl Default for TrackGeometry {
    fn default() -> Self {
        TrackGeometry {
            arena_x: 40.0,
            arena_y: 20.0,
            arena_z: 5.0,
            gate_width: 1.4,
            gate_height: 1.4,
            gate_z: 1.5,
            n_gates: 4,
            frame_thickness: 0.05,
            zigzag_x0: 8.0,
            zigzag_dx: 8.0,
            zigzag_amplitude: 3.5,
            circle_radius: 7.0,
            ellipse_a: 10.0,
            ellipse_b: 5.5,
            start_back: 2.5,
            obstacles_per_level: 2,
            obstacle_r_min: 0.25,
            obstacle_r_max: 0.55,
            corridor_clear: 0.5,
            aperture_clear: 0.3,
            start_clear: 1.0,
            min_gate_spacing: 3.0,
        }
    }
}

impl TrackGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_x", self.arena_x),
            ("arena_y", self.arena_y),
            ("arena_z", self.arena_z),
            ("gate_width", self.gate_width),
            ("gate_height", self.gate_height),
            ("gate_z", self.gate_z),
            ("frame_thickness", self.frame_thickness),
            ("zigzag_dx", self.zigzag_dx),
            ("circle_radius", self.circle_radius),
            ("ellipse_a", self.ellipse_a),
            ("ellipse_b", self.ellipse_b),
            ("start_back", self.start_back),
            ("obstacle_r_min", self.obstacle_r_min),
            ("obstacle_r_max", self.obstacle_r_max),
            ("min_gate_spacing", self.min_gate_spacing),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("track.{name} must be positive, got {v}")));
            }
        }
        if self.n_gates < 2 {
            return Err(Error::Config(format!("track.n_gates must be at least 2, got {}", self.n_gates)));
        }
        if self.obstacle_r_min > self.obstacle_r_max {
            return Err(Error::Config("track.obstacle_r_min exceeds obstacle_r_max".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            Vec3::new(0.0, -0.5 * self.arena_y, 0.0),
            Vec3::new(self.arena_x, 0.5 * self.arena_y, self.arena_z),
        )
    }
}

/// A generated scene: ordered gates, obstacles, spawn point, and bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackSpec {
    pub family: TrackFamily,
    pub gates: Vec<GateSpec>,
    pub obstacles: Vec<ObstacleSpec>,
    pub difficulty: u8,
    pub seed: u64,
    pub bounds: (Vec3, Vec3),
    pub start: Vec3,
    pub frame_thickness: f64,
}

/// Gate frame as a rotation matrix with columns (normal, side, up).
pub fn gate_axes(g: &GateSpec) -> Mat3 {
    Mat3::from_columns(&[g.normal, g.side(), g.up])
}

/// Distance from a point to the segment `a..b`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Distance from a point to the filled frame rectangle of a gate (the
/// aperture plus its bars, a planar slab in the gate's plane).
pub fn point_gate_rect_distance(p: Vec3, g: &GateSpec, frame_thickness: f64) -> f64 {
    let local = gate_axes(g).transpose() * (p - g.center);
    let hw = 0.5 * g.width + frame_thickness;
    let hh = 0.5 * g.height + frame_thickness;
    let dy = (local.y.abs() - hw).max(0.0);
    let dz = (local.z.abs() - hh).max(0.0);
    (local.x * local.x + dy * dy + dz * dz).sqrt()
}

/// The straight-line racing path: spawn to each gate in order, closing the
/// loop for circular families.
pub fn racing_line(track: &TrackSpec) -> Vec<(Vec3, Vec3)> {
    let mut pts = vec![track.start];
    pts.extend(track.gates.iter().map(|g| g.center));
    if track.family.is_loop() {
        pts.push(track.gates[0].center);
    }
    pts.windows(2).map(|w| (w[0], w[1])).collect()
}

fn family_gates(family: TrackFamily, geo: &TrackGeometry) -> Vec<GateSpec> {
    let up = Vec3::new(0.0, 0.0, 1.0);
    let cx = 0.5 * geo.arena_x;
    match family {
        TrackFamily::Zigzag => (0..geo.n_gates)
            .map(|k| {
                let y = geo.zigzag_amplitude * if k % 2 == 0 { 1.0 } else { -1.0 };
                GateSpec {
                    center: Vec3::new(geo.zigzag_x0 + geo.zigzag_dx * k as f64, y, geo.gate_z),
                    normal: Vec3::new(1.0, 0.0, 0.0),
                    up,
                    width: geo.gate_width,
                    height: geo.gate_height,
                    shape: GateShape::Rect,
                }
            })
            .collect(),
        TrackFamily::Circular => (0..geo.n_gates)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / geo.n_gates as f64;
                GateSpec {
                    center: Vec3::new(
                        cx + geo.circle_radius * th.cos(),
                        geo.circle_radius * th.sin(),
                        geo.gate_z,
                    ),
                    normal: Vec3::new(-th.sin(), th.cos(), 0.0),
                    up,
                    width: geo.gate_width,
                    height: geo.gate_height,
                    shape: GateShape::Rect,
                }
            })
            .collect(),
        TrackFamily::Ellipse => (0..geo.n_gates)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / geo.n_gates as f64;
                let tangent = Vec3::new(-geo.ellipse_a * th.sin(), geo.ellipse_b * th.cos(), 0.0);
                GateSpec {
                    center: Vec3::new(
                        cx + geo.ellipse_a * th.cos(),
                        geo.ellipse_b * th.sin(),
                        geo.gate_z,
                    ),
                    normal: tangent / tangent.norm(),
                    up,
                    width: geo.gate_width,
                    height: geo.gate_height,
                    shape: GateShape::Rect,
                }
            })
            .collect(),
    }
}

/// Build a track. Deterministic in `seed`; obstacle count is
/// `difficulty * obstacles_per_level`.
pub fn generate_track(
    family: TrackFamily,
    difficulty: u8,
    seed: u64,
    geo: &TrackGeometry,
) -> Result<TrackSpec> {
    geo.validate()?;
    if difficulty > 9 {
        return Err(Error::Config(format!("difficulty must be 0..=9, got {difficulty}")));
    }
    let gates = family_gates(family, geo);
    for g in &gates {
        g.validate()?;
    }
    let start = gates[0].center - gates[0].normal * geo.start_back;
    let mut track = TrackSpec {
        family,
        gates,
        obstacles: Vec::new(),
        difficulty,
        seed,
        bounds: geo.bounds(),
        start,
        frame_thickness: geo.frame_thickness,
    };
    audit_gates(&track, geo)?;

    let segments = racing_line(&track);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = difficulty as usize * geo.obstacles_per_level;
    for idx in 0..want {
        let mut placed = false;
        for _ in 0..400 {
            let cand = sample_obstacle(idx, &segments, geo, &mut rng);
            if obstacle_fits(&cand, &track, geo) {
                track.obstacles.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place obstacle {idx} of {want} after 400 attempts \
                 (family {family:?}, difficulty {difficulty}, seed {seed})"
            )));
        }
    }
    audit_track(&track, geo)?;
    Ok(track)
}

fn sample_obstacle(
    idx: usize,
    segments: &[(Vec3, Vec3)],
    geo: &TrackGeometry,
    rng: &mut ChaCha8Rng,
) -> ObstacleSpec {
    let (a, b) = segments[rng.gen_range(0..segments.len())];
    let anchor = a + (b - a) * rng.gen_range(0.15..0.85);
    let radius = rng.gen_range(geo.obstacle_r_min..=geo.obstacle_r_max);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let dist = rng.gen_range(radius + geo.corridor_clear + 0.05..radius + geo.corridor_clear + 1.8);
    let x = anchor.x + dist * phi.cos();
    let y = anchor.y + dist * phi.sin();
    if idx % 2 == 0 {
        let z = (geo.gate_z + rng.gen_range(-1.0..1.0)).max(radius + 0.05);
        ObstacleSpec::Sphere { center: Vec3::new(x, y, z), radius }
    } else {
        let height = rng.gen_range(1.2..(geo.arena_z - 0.2).min(2.8));
        ObstacleSpec::Cylinder { center: Vec3::new(x, y, 0.5 * height), radius, height }
    }
}

fn obstacle_fits(cand: &ObstacleSpec, track: &TrackSpec, geo: &TrackGeometry) -> bool {
    audit_obstacle(cand, track, geo).is_ok()
}

fn audit_gates(track: &TrackSpec, geo: &TrackGeometry) -> Result<()> {
    for w in track.gates.windows(2) {
        let d = (w[1].center - w[0].center).norm();
        if d < geo.min_gate_spacing {
            return Err(Error::Config(format!(
                "consecutive gates {d:.2} m apart, need {} m",
                geo.min_gate_spacing
            )));
        }
    }
    if track.family.is_loop() && track.gates.len() >= 2 {
        let d = (track.gates[0].center - track.gates[track.gates.len() - 1].center).norm();
        if d < geo.min_gate_spacing {
            return Err(Error::Config(format!(
                "loop-closing gates {d:.2} m apart, need {} m",
                geo.min_gate_spacing
            )));
        }
    }
    Ok(())
}

fn audit_obstacle(ob: &ObstacleSpec, track: &TrackSpec, geo: &TrackGeometry) -> Result<()> {
    let (lo, hi) = track.bounds;
    let (blo, bhi) = ob.aabb();
    for k in 0..3 {
        if blo[k] < lo[k] - 1e-12 || bhi[k] > hi[k] + 1e-12 {
            return Err(Error::Config(format!("obstacle leaves the arena: {ob:?}")));
        }
    }
    let segments = racing_line(track);
    for (p, r) in ob.audit_samples() {
        for g in &track.gates {
            let d = point_gate_rect_distance(p, g, track.frame_thickness);
            if d < r + geo.aperture_clear {
                return Err(Error::Config(format!(
                    "obstacle within {d:.2} m of a gate frame, need {:.2}",
                    r + geo.aperture_clear
                )));
            }
        }
        for &(a, b) in &segments {
            let d = point_segment_distance(p, a, b);
            if d < r + geo.corridor_clear {
                return Err(Error::Config(format!(
                    "obstacle within {d:.2} m of the racing line, need {:.2}",
                    r + geo.corridor_clear
                )));
            }
        }
        if (p - track.start).norm() < r + geo.start_clear {
            return Err(Error::Config("obstacle too close to the spawn point".into()));
        }
        for other in &track.obstacles {
            for (q, rq) in other.audit_samples() {
                if (p - q).norm() < r + rq + 0.2 {
                    return Err(Error::Config("obstacles too close together".into()));
                }
            }
        }
    }
    Ok(())
}

/// Full invariant re-check of a finished track.
pub fn audit_track(track: &TrackSpec, geo: &TrackGeometry) -> Result<()> {
    for g in &track.gates {
        g.validate()?;
    }
    audit_gates(track, geo)?;
    // Each obstacle is audited against a view of the track that excludes it,
    // so pairwise checks do not compare an obstacle with itself.
    for (i, ob) in track.obstacles.iter().enumerate() {
        let mut rest = track.clone();
        rest.obstacles = track
            .obstacles
            .iter()
            .enumerate()
            .filter(|(j, _)| *j < i)
            .map(|(_, o)| *o)
            .collect();
        audit_obstacle(ob, &rest, geo)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo() -> TrackGeometry {
        TrackGeometry::default()
    }

    #[test]
    fn difficulty_zero_has_no_obstacles() {
        for fam in [TrackFamily::Zigzag, TrackFamily::Circular, TrackFamily::Ellipse] {
            let t = generate_track(fam, 0, 7, &geo()).unwrap();
            assert!(t.obstacles.is_empty());
            assert_eq!(t.gates.len(), 4);
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = generate_track(TrackFamily::Circular, 6, 42, &geo()).unwrap();
        let b = generate_track(TrackFamily::Circular, 6, 42, &geo()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_track(TrackFamily::Circular, 6, 43, &geo()).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn obstacle_count_follows_the_difficulty_ladder() {
        for lvl in [1_u8, 3, 6, 9] {
            let t = generate_track(TrackFamily::Zigzag, lvl, 11, &geo()).unwrap();
            assert_eq!(t.obstacles.len(), 2 * lvl as usize);
        }
    }

    #[test]
    fn zigzag_alternates_and_keeps_spacing() {
        let t = generate_track(TrackFamily::Zigzag, 0, 1, &geo()).unwrap();
        let ys: Vec<f64> = t.gates.iter().map(|g| g.center.y).collect();
        assert_eq!(ys, vec![3.5, -3.5, 3.5, -3.5]);
        for w in t.gates.windows(2) {
            assert!((w[1].center - w[0].center).norm() >= 3.0);
        }
        assert!((t.start - Vec3::new(5.5, 3.5, 1.5)).norm() < 1e-12);
    }

    #[test]
    fn loop_families_point_gates_along_the_traversal_direction() {
        for fam in [TrackFamily::Circular, TrackFamily::Ellipse] {
            let t = generate_track(fam, 0, 3, &geo()).unwrap();
            assert!(fam.is_loop());
            for (k, g) in t.gates.iter().enumerate() {
                // The tangent normal should have positive alignment with the
                // chord to the next gate (weaker on eccentric ellipses).
                let next = t.gates[(k + 1) % t.gates.len()].center;
                let to_next = (next - g.center).normalize();
                assert!(g.normal.dot(&to_next) > 0.3, "gate {k} faces away from the track");
            }
        }
    }

    #[test]
    fn hard_tracks_pass_the_full_audit_across_seeds() {
        let g = geo();
        for seed in 0..40 {
            for fam in [TrackFamily::Zigzag, TrackFamily::Circular, TrackFamily::Ellipse] {
                let t = generate_track(fam, 9, seed, &g)
                    .unwrap_or_else(|e| panic!("{fam:?} seed {seed}: {e}"));
                audit_track(&t, &g).unwrap();
                assert_eq!(t.obstacles.len(), 18);
            }
        }
    }

    #[test]
    fn audit_rejects_a_planted_aperture_blocker() {
        let g = geo();
        let mut t = generate_track(TrackFamily::Zigzag, 0, 5, &g).unwrap();
        let gate = t.gates[1];
        t.obstacles.push(ObstacleSpec::Sphere { center: gate.center, radius: 0.4 });
        assert!(audit_track(&t, &g).is_err());
    }

    #[test]
    fn invalid_difficulty_and_geometry_are_rejected() {
        assert!(generate_track(TrackFamily::Zigzag, 10, 0, &geo()).is_err());
        let mut bad = geo();
        bad.n_gates = 1;
        assert!(generate_track(TrackFamily::Zigzag, 0, 0, &bad).is_err());
        let mut tight = geo();
        tight.zigzag_dx = 1.0; // 1 m spacing violates the 3 m invariant
        tight.zigzag_amplitude = 0.1;
        assert!(generate_track(TrackFamily::Zigzag, 0, 0, &tight).is_err());
    }

    #[test]
    fn point_segment_distance_basics() {
        let a = Vec3::zeros();
        let b = Vec3::new(10.0, 0.0, 0.0);
        assert_eq!(point_segment_distance(Vec3::new(5.0, 3.0, 0.0), a, b), 3.0);
        assert_eq!(point_segment_distance(Vec3::new(-4.0, 0.0, 0.0), a, b), 4.0);
        assert_eq!(point_segment_distance(Vec3::new(13.0, 4.0, 0.0), a, b), 5.0);
    }

    #[test]
    fn gate_rect_distance_measures_the_filled_frame_slab() {
        let g = GateSpec::upright(Vec3::new(5.0, 0.0, 1.5), 1.0, 1.0);
        // 2 m in front of the center: pure normal offset.
        assert!((point_gate_rect_distance(Vec3::new(7.0, 0.0, 1.5), &g, 0.05) - 2.0).abs() < 1e-12);
        // In-plane beyond the frame edge: lateral overhang only.
        let d = point_gate_rect_distance(Vec3::new(5.0, 1.0, 1.5), &g, 0.05);
        assert!((d - (1.0 - 0.55)).abs() < 1e-12);
        // Inside the aperture: zero.
        assert_eq!(point_gate_rect_distance(Vec3::new(5.0, 0.1, 1.4), &g, 0.05), 0.0);
    }
}
