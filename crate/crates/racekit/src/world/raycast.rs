//! Analytic ray intersections and nearest-surface queries.
//!
//! The depth camera and the collision checker share these kernels. Every
//! intersection is closed-form (no marching), so rendered depths are exact
//! to roundoff, and every nearest-point query returns the true closest
//! surface point of its primitive. Ray directions must be unit length; the
//! returned t is then the Euclidean hit distance.

use crate::{Mat3, Vec3};

/// Oriented box: `center + axes * local` with `local` in `[-half, half]`.
/// The axes matrix holds the box's unit axes as columns.
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec3,
    pub axes: Mat3,
    pub half: Vec3,
}

/// Treat |d| below this as a ray parallel to a slab.
const PARALLEL_EPS: f64 = 1e-300;

/// Nearest positive hit distance of a unit ray with a sphere.
pub fn ray_sphere(o: Vec3, d: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = center - o;
    let b = oc.dot(&d);
    let disc = b * b - (oc.norm_squared() - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = b - s;
    if t > 0.0 {
        Some(t)
    } else {
        let t2 = b + s;
        (t2 > 0.0).then_some(t2)
    }
}

/// Nearest positive hit of a unit ray with a closed vertical cylinder
/// (axis through `(cx, cy)`, z in `[z0, z1]`, both end caps solid).
pub fn ray_cylinder(o: Vec3, d: Vec3, cx: f64, cy: f64, z0: f64, z1: f64, radius: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    // Lateral surface.
    let ox = o.x - cx;
    let oy = o.y - cy;
    let a = d.x * d.x + d.y * d.y;
    if a > PARALLEL_EPS {
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let z = o.z + t * d.z;
                if z >= z0 && z <= z1 {
                    consider(t);
                }
            }
        }
    }
    // End caps.
    if d.z.abs() > PARALLEL_EPS {
        for zc in [z0, z1] {
            let t = (zc - o.z) / d.z;
            let hx = o.x + t * d.x - cx;
            let hy = o.y + t * d.y - cy;
            if hx * hx + hy * hy <= radius * radius {
                consider(t);
            }
        }
    }
    best
}

/// Nearest positive hit of a unit ray with an oriented box (slab method in
/// the box frame). A ray starting inside reports the exit face.
pub fn ray_obb(o: Vec3, d: Vec3, obb: &Obb) -> Option<f64> {
    let ol = obb.axes.transpose() * (o - obb.center);
    let dl = obb.axes.transpose() * d;
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        if dl[k].abs() < PARALLEL_EPS {
            if ol[k].abs() > obb.half[k] {
                return None;
            }
        } else {
            let inv = 1.0 / dl[k];
            let mut a = (-obb.half[k] - ol[k]) * inv;
            let mut b = (obb.half[k] - ol[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            tmin = tmin.max(a);
            tmax = tmax.min(b);
        }
    }
    if tmax < tmin || tmax <= 0.0 {
        return None;
    }
    Some(if tmin > 0.0 { tmin } else { tmax })
}

/// Signed distance and closest surface point of a sphere. Negative distance
/// means `p` is inside. A query at the exact center resolves along +x.
pub fn nearest_on_sphere(p: Vec3, center: Vec3, radius: f64) -> (f64, Vec3) {
    let u = p - center;
    let n = u.norm();
    if n < 1e-12 {
        return (-radius, center + Vec3::new(radius, 0.0, 0.0));
    }
    (n - radius, center + u * (radius / n))
}

/// Signed distance and closest surface point of a closed vertical cylinder.
/// On-axis interior queries resolve radially along +x.
pub fn nearest_on_cylinder(p: Vec3, cx: f64, cy: f64, z0: f64, z1: f64, radius: f64) -> (f64, Vec3) {
    let wx = p.x - cx;
    let wy = p.y - cy;
    let rn = (wx * wx + wy * wy).sqrt();
    let inside_z = p.z >= z0 && p.z <= z1;
    let inside_r = rn <= radius;
    if inside_z && inside_r {
        // Interior: pop out through the cheapest face.
        let (dir_x, dir_y) = if rn < 1e-12 { (1.0, 0.0) } else { (wx / rn, wy / rn) };
        let side = radius - rn;
        let down = p.z - z0;
        let up = z1 - p.z;
        let m = side.min(down).min(up);
        let q = if m == side {
            Vec3::new(cx + dir_x * radius, cy + dir_y * radius, p.z)
        } else if m == down {
            Vec3::new(p.x, p.y, z0)
        } else {
            Vec3::new(p.x, p.y, z1)
        };
        return (-m, q);
    }
    let cz = p.z.clamp(z0, z1);
    if inside_r {
        // Above or below, radially within: closest is the cap disk.
        return ((p.z - cz).abs(), Vec3::new(p.x, p.y, cz));
    }
    let qx = cx + wx * (radius / rn);
    let qy = cy + wy * (radius / rn);
    let dr = rn - radius;
    let dz = p.z - cz;
    ((dr * dr + dz * dz).sqrt(), Vec3::new(qx, qy, cz))
}

/// Signed distance and closest surface point of an oriented box.
pub fn nearest_on_obb(p: Vec3, obb: &Obb) -> (f64, Vec3) {
    let l = obb.axes.transpose() * (p - obb.center);
    let inside = (0..3).all(|k| l[k].abs() <= obb.half[k]);
    if inside {
        // Distance to the nearest face, popped outward along that axis.
        let mut best_k = 0;
        let mut best = f64::INFINITY;
        for k in 0..3 {
            let gap = obb.half[k] - l[k].abs();
            if gap < best {
                best = gap;
                best_k = k;
            }
        }
        let mut q = l;
        q[best_k] = obb.half[best_k] * if l[best_k] >= 0.0 { 1.0 } else { -1.0 };
        return (-best, obb.center + obb.axes * q);
    }
    let q = Vec3::new(
        l.x.clamp(-obb.half.x, obb.half.x),
        l.y.clamp(-obb.half.y, obb.half.y),
        l.z.clamp(-obb.half.z, obb.half.z),
    );
    ((l - q).norm(), obb.center + obb.axes * q)
}
