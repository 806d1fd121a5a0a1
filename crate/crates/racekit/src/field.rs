//! Gate-induced magnetostatic guidance fields.
//!
//! Each gate aperture carries a virtual current loop. The loop's field is the
//! exact finite-segment Biot-Savart sum, so it is divergence-free, threads
//! the aperture, and decays like a dipole far away. The attractive vector
//! field `u_A` tempers the field magnitude and scales it by a
//! velocity-alignment factor; the trainer injects `u_A` into the position
//! gradient channel, it is never part of the recorded loss.
//!
//! All field evaluation is plain `f64` (the injection consumes detached
//! positions and velocities), so nothing here touches the tape.

use crate::{Error, Result, Vec3};
use serde::{Deserialize, Serialize};

/// Loop geometry of a gate aperture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    /// Rectangular loop spanning width x height.
    Rect,
    /// Circular loop of diameter `width` (height is ignored), polygonized
    /// for field evaluation.
    Circle,
}

/// One racing gate: an aperture in a plane, traversed along `+normal`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateSpec {
    pub center: Vec3,
    /// Unit traversal direction (out of the aperture plane).
    pub normal: Vec3,
    /// Unit in-plane "up" direction, orthogonal to `normal`.
    pub up: Vec3,
    /// Aperture width (m), measured along `up x normal`... see [`GateSpec::side`].
    pub width: f64,
    /// Aperture height (m), measured along `up`.
    pub height: f64,
    pub shape: GateShape,
}

impl GateSpec {
    /// Axis-aligned upright gate facing `+x`, the common case in tests.
    pub fn upright(center: Vec3, width: f64, height: f64) -> Self {
        GateSpec {
            center,
            normal: Vec3::new(1.0, 0.0, 0.0),
            up: Vec3::new(0.0, 0.0, 1.0),
            width,
            height,
            shape: GateShape::Rect,
        }
    }

    /// In-plane lateral axis. `(side, up, normal)` is right-handed, so a loop
    /// circulating through the returned corners in order generates a field
    /// along `+normal` at the center.
    pub fn side(&self) -> Vec3 {
        self.up.cross(&self.normal)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(self.normal.iter()).chain(self.up.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("gate has non-finite geometry".into()));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-9 || (self.up.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "gate normal/up must be unit vectors (|n| = {}, |u| = {})",
                self.normal.norm(),
                self.up.norm()
            )));
        }
        if self.normal.dot(&self.up).abs() > 1e-9 {
            return Err(Error::Config("gate normal and up must be orthogonal".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Config(format!(
                "gate aperture must have positive extent, got {} x {}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Loop corner positions in circulation order (field at the center points
    /// along `+normal`). Rectangles return 4 corners; circles a regular
    /// polygon with `circle_segments` vertices.
    pub fn loop_vertices(&self, circle_segments: usize) -> Vec<Vec3> {
        let s = self.side();
        match self.shape {
            GateShape::Rect => {
                let hw = 0.5 * self.width;
                let hh = 0.5 * self.height;
                vec![
                    self.center + s * hw - self.up * hh,
                    self.center + s * hw + self.up * hh,
                    self.center - s * hw + self.up * hh,
                    self.center - s * hw - self.up * hh,
                ]
            }
            GateShape::Circle => {
                let r = 0.5 * self.width;
                let n = circle_segments.max(3);
                (0..n)
                    .map(|k| {
                        let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                        self.center + s * (r * th.cos()) + self.up * (r * th.sin())
                    })
                    .collect()
            }
        }
    }
}

/// Field shaping constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Virtual current strength (T*m, absorbing mu_0 I / 4 pi).
    pub c_i: f64,
    /// Magnitude tempering exponent: u_A scales like |B|^(1 - lambda_a).
    pub lambda_a: f64,
    /// Alignment denominator regularizer.
    pub epsilon: f64,
    /// Polygonization of circular loops.
    pub circle_segments: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { c_i: 2e-5, lambda_a: 0.3, epsilon: 1e-5, circle_segments: 16 }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_i.is_finite() && self.c_i > 0.0) {
            return Err(Error::Config(format!("field.c_i must be positive, got {}", self.c_i)));
        }
        if !(self.lambda_a.is_finite() && (0.0..=1.0).contains(&self.lambda_a)) {
            return Err(Error::Config(format!(
                "field.lambda_a must lie in [0, 1], got {}",
                self.lambda_a
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("field.epsilon must be positive, got {}", self.epsilon)));
        }
        if self.circle_segments < 3 {
            return Err(Error::Config(format!(
                "field.circle_segments must be at least 3, got {}",
                self.circle_segments
            )));
        }
        Ok(())
    }
}

/// Squared-distance floor below which a point counts as lying on a segment's
/// axis and the (singular) segment field is taken to be zero.
const AXIS_FLOOR: f64 = 1e-24;

/// Exact field of one finite straight segment carrying unit circulation from
/// `r1` to `r2`, scaled by `c_i`:
///
/// `B = c_i * [l . ((r1-p)/|r1-p| - (r2-p)/|r2-p|)] * (l x d) / |d|^2`
///
/// with `l` the unit segment direction and `d` the perpendicular foot vector
/// from `p` to the segment's carrier line. Points on the line (including the
/// endpoints) return zero instead of NaN.
pub fn segment_field(p: Vec3, r1: Vec3, r2: Vec3, c_i: f64) -> Vec3 {
    let seg = r2 - r1;
    let len = seg.norm();
    if len < 1e-12 {
        return Vec3::zeros();
    }
    let l = seg / len;
    let a = r1 - p;
    let b = r2 - p;
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Vec3::zeros();
    }
    // Perpendicular foot vector from p to the carrier line.
    let t = l.dot(&(p - r1));
    let d = (r1 + l * t) - p;
    let d2 = d.norm_squared();
    if d2 < AXIS_FLOOR {
        return Vec3::zeros();
    }
    let scalar = l.dot(&(a / na - b / nb));
    l.cross(&d) * (c_i * scalar / d2)
}

/// Superposed loop field of one gate at `p`.
pub fn gate_field(p: Vec3, gate: &GateSpec, cfg: &FieldConfig) -> Vec3 {
    let verts = gate.loop_vertices(cfg.circle_segments);
    let mut b = Vec3::zeros();
    for k in 0..verts.len() {
        let r1 = verts[k];
        let r2 = verts[(k + 1) % verts.len()];
        b += segment_field(p, r1, r2, cfg.c_i);
    }
    b
}

/// Superposed field of several gates (used only for field dumps; training
/// evaluates the current target gate alone).
pub fn total_field(p: Vec3, gates: &[GateSpec], cfg: &FieldConfig) -> Vec3 {
    let mut b = Vec3::zeros();
    for g in gates {
        b += gate_field(p, g, cfg);
    }
    b
}

/// Attractive vector field at `(p, v)` for one gate:
///
/// `u_A = (1 - v.B / (|v||B| + eps)) * B / |B|^lambda_a`
///
/// The alignment factor fades the pull as the velocity aligns with the field
/// (approaching 2 when anti-aligned); the `|B|^lambda_a` division tempers the
/// near-gate spike while preserving direction. Zero field maps to zero pull.
pub fn attractive_field(p: Vec3, v: Vec3, gate: &GateSpec, cfg: &FieldConfig) -> Vec3 {
    let b = gate_field(p, gate, cfg);
    attractive_from_field(b, v, cfg)
}

/// The `u_A` shaping applied to an already-evaluated field vector.
pub fn attractive_from_field(b: Vec3, v: Vec3, cfg: &FieldConfig) -> Vec3 {
    let bn = b.norm();
    if bn <= 0.0 {
        return Vec3::zeros();
    }
    let align = 1.0 - v.dot(&b) / (v.norm() * bn + cfg.epsilon);
    b * (align / bn.powf(cfg.lambda_a))
}

/// Uniform-grid field dump. Rows are `x,y,z,bx,by,bz,ax,ay,az` with `b` the
/// superposed gate field and `a` the attractive field evaluated at rest
/// (v = 0). Iteration order is x fastest, then y, then z. A single-sample
/// axis is placed at the interval midpoint. Returns the number of rows.
pub fn dump_grid<W: std::io::Write>(
    gates: &[GateSpec],
    lo: Vec3,
    hi: Vec3,
    res: (usize, usize, usize),
    cfg: &FieldConfig,
    out: &mut W,
) -> Result<usize> {
    let (nx, ny, nz) = res;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Config(format!("field dump grid must be non-empty, got {res:?}")));
    }
    for k in 0..3 {
        if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] <= hi[k]) {
            return Err(Error::Config(format!(
                "field dump bounds must be finite and ordered, got {lo:?}..{hi:?}"
            )));
        }
    }
    let axis = |lo: f64, hi: f64, n: usize, i: usize| -> f64 {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    writeln!(out, "x,y,z,bx,by,bz,ax,ay,az")?;
    let mut rows = 0;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = Vec3::new(
                    axis(lo.x, hi.x, nx, ix),
                    axis(lo.y, hi.y, ny, iy),
                    axis(lo.z, hi.z, nz, iz),
                );
                let b = total_field(p, gates, cfg);
                let a = attractive_from_field(b, Vec3::zeros(), cfg);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    p.x, p.y, p.z, b.x, b.y, b.z, a.x, a.y, a.z
                )?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::assert_close;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_gate() -> GateSpec {
        GateSpec::upright(Vec3::zeros(), 1.0, 1.0)
    }

    fn fcfg() -> FieldConfig {
        FieldConfig::default()
    }

    // Frozen closed form: each side of a unit square contributes
    // 2*sqrt(2)*c_i at the center, all four add along +normal.
    #[test]
    fn unit_square_center_field_is_eight_root_two() {
        let cfg = fcfg();
        let g = unit_gate();
        let b = gate_field(Vec3::zeros(), &g, &cfg);
        let want = 8.0 * 2.0_f64.sqrt() * cfg.c_i;
        assert!((b.norm() - want).abs() <= 1e-12 * want);
        let dir = b / b.norm();
        assert!((dir - g.normal).norm() < 1e-12);
    }

    #[test]
    fn single_segment_center_contribution() {
        let cfg = fcfg();
        let b = segment_field(
            Vec3::zeros(),
            Vec3::new(0.5, -0.5, 0.0),
            Vec3::new(0.5, 0.5, 0.0),
            cfg.c_i,
        );
        // Gate plane here is xy, so this side pushes along +z.
        assert_close(b.z, 2.0 * 2.0_f64.sqrt() * cfg.c_i, 1e-13, 0.0);
        assert!(b.x.abs() < 1e-20 && b.y.abs() < 1e-20);
    }

    #[test]
    fn points_on_segment_axis_produce_zero_field() {
        let c = fcfg().c_i;
        let r1 = Vec3::new(0.0, -1.0, 0.0);
        let r2 = Vec3::new(0.0, 1.0, 0.0);
        for p in [
            Vec3::new(0.0, 0.0, 0.0),  // on the wire
            Vec3::new(0.0, 1.0, 0.0),  // endpoint
            Vec3::new(0.0, 3.0, 0.0),  // on the carrier line beyond the end
        ] {
            let b = segment_field(p, r1, r2, c);
            assert_eq!(b, Vec3::zeros());
        }
    }

    #[test]
    fn field_is_linear_in_current() {
        let g = unit_gate();
        let mut cfg = fcfg();
        let p = Vec3::new(0.7, 0.3, -0.2);
        let b1 = gate_field(p, &g, &cfg);
        cfg.c_i *= 3.5;
        let b2 = gate_field(p, &g, &cfg);
        assert!((b2 - b1 * 3.5).norm() < 1e-18);
    }

    // The finite-segment loop field is a curl, so its divergence vanishes
    // identically; central differences must agree to roundoff levels.
    #[test]
    fn loop_field_is_divergence_free() {
        let cfg = fcfg();
        let g = GateSpec::upright(Vec3::new(1.0, -0.5, 1.5), 1.4, 1.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 100 {
            let p = Vec3::new(
                rng.gen_range(-4.0..6.0),
                rng.gen_range(-5.0..4.0),
                rng.gen_range(-3.0..6.0),
            );
            // Stay off the wires so the 1/rho spike cannot wreck the stencil.
            if (p - g.center).norm() < 0.3 {
                continue;
            }
            let mut div = 0.0;
            for k in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[k] += h;
                lo[k] -= h;
                div += (gate_field(hi, &g, &cfg)[k] - gate_field(lo, &g, &cfg)[k]) / (2.0 * h);
            }
            let bn = gate_field(p, &g, &cfg).norm();
            assert!(bn > 0.0);
            let rel = div.abs() * h / bn;
            assert!(rel < 1e-6, "divergence {div} at {p:?} (rel {rel})");
            checked += 1;
        }
    }

    #[test]
    fn far_field_decays_like_inverse_cube() {
        let cfg = fcfg();
        let g = unit_gate();
        let r = 50.0 * g.width;
        let b1 = gate_field(g.center + g.normal * r, &g, &cfg).norm();
        let b2 = gate_field(g.center + g.normal * (2.0 * r), &g, &cfg).norm();
        let ratio = b2 / b1;
        assert!((ratio - 0.125).abs() < 0.05 * 0.125, "ratio {ratio}");
    }

    #[test]
    fn field_is_mirror_symmetric_through_the_gate_plane() {
        let cfg = fcfg();
        let g = unit_gate();
        for t in [0.2, 0.9, 2.7] {
            let bf = gate_field(g.center + g.normal * t, &g, &cfg);
            let bb = gate_field(g.center - g.normal * t, &g, &cfg);
            assert!((bf - bb).norm() < 1e-18);
        }
    }

    // Regular 16-gon loop center field: 2 n c tan(pi/n) / R.
    #[test]
    fn circle_loop_center_matches_polygon_closed_form() {
        let cfg = fcfg();
        let mut g = unit_gate();
        g.shape = GateShape::Circle;
        g.width = 2.4; // radius 1.2
        let b = gate_field(g.center, &g, &cfg);
        let n = cfg.circle_segments as f64;
        let want = 2.0 * n * cfg.c_i * (std::f64::consts::PI / n).tan() / 1.2;
        assert_close(b.norm(), want, 1e-12, 0.0);
        assert!((b / b.norm() - g.normal).norm() < 1e-12);
    }

    #[test]
    fn alignment_factor_fades_parallel_velocity_and_boosts_antiparallel() {
        let cfg = fcfg();
        let g = unit_gate();
        let p = Vec3::new(-0.8, 0.1, 0.05);
        let b = gate_field(p, &g, &cfg);
        let speed = 5.0;
        let u0 = attractive_field(p, Vec3::zeros(), &g, &cfg);
        let upar = attractive_field(p, b / b.norm() * speed, &g, &cfg);
        let uanti = attractive_field(p, -b / b.norm() * speed, &g, &cfg);
        // At rest the factor is exactly 1; aligned/anti-aligned velocities
        // scale it by 1 -/+ s|B|/(s|B| + eps).
        let vb = speed * b.norm();
        let shrink = vb / (vb + cfg.epsilon);
        assert_close(upar.norm() / u0.norm(), 1.0 - shrink, 1e-9, 0.0);
        assert_close(uanti.norm() / u0.norm(), 1.0 + shrink, 1e-9, 0.0);
        assert!(upar.norm() < 0.05 * u0.norm(), "parallel pull should fade");
        // Direction always follows B.
        assert!(u0.normalize().dot(&(b / b.norm())) > 1.0 - 1e-12);
    }

    #[test]
    fn attractive_field_of_zero_field_is_zero() {
        let cfg = fcfg();
        assert_eq!(attractive_from_field(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), &cfg), Vec3::zeros());
    }

    #[test]
    fn dump_grid_emits_header_and_rows() {
        let cfg = fcfg();
        let g = unit_gate();
        let mut buf = Vec::new();
        let rows =
            dump_grid(&[g], Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), (3, 2, 2), &cfg, &mut buf)
                .unwrap();
        assert_eq!(rows, 12);
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,z,bx,by,bz,ax,ay,az");
        assert_eq!(lines.count(), 12);
    }

    #[test]
    fn gate_validation_rejects_bad_frames() {
        let mut g = unit_gate();
        g.up = Vec3::new(0.0, 0.0, 2.0);
        assert!(g.validate().is_err());
        let mut g2 = unit_gate();
        g2.up = Vec3::new(1.0, 0.0, 0.0); // parallel to normal
        assert!(g2.validate().is_err());
        let mut g3 = unit_gate();
        g3.width = 0.0;
        assert!(g3.validate().is_err());
        assert!(unit_gate().validate().is_ok());
    }

    proptest! {
        // |u_A| = alignment * |B|^(1 - lambda_a) with alignment in [0, 2]
        // (up to the epsilon regularizer).
        #[test]
        fn attractive_magnitude_respects_tempered_bound(
            px in -3.0f64..3.0, py in -3.0f64..3.0, pz in -3.0f64..3.0,
            vx in -8.0f64..8.0, vy in -8.0f64..8.0, vz in -8.0f64..8.0,
        ) {
            let cfg = fcfg();
            let g = unit_gate();
            let p = Vec3::new(px, py, pz);
            let v = Vec3::new(vx, vy, vz);
            let b = gate_field(p, &g, &cfg);
            prop_assume!(b.norm() > 1e-14);
            let ua = attractive_field(p, v, &g, &cfg);
            let bound = 2.0 * b.norm().powf(1.0 - cfg.lambda_a);
            prop_assert!(ua.norm() <= bound * (1.0 + 1e-9));
        }

        // Swapping circulation endpoints flips the field sign exactly.
        #[test]
        fn segment_field_is_antisymmetric_in_direction(
            px in -2.0f64..2.0, py in -2.0f64..2.0, pz in 0.1f64..2.0,
        ) {
            let p = Vec3::new(px, py, pz);
            let r1 = Vec3::new(-0.7, -0.2, 0.0);
            let r2 = Vec3::new(0.6, 0.4, 0.0);
            let b = segment_field(p, r1, r2, 2e-5);
            let br = segment_field(p, r2, r1, 2e-5);
            prop_assert!((b + br).norm() <= 1e-12 * b.norm().max(1e-30));
        }
    }
}
