//! Parametric sprite shapes and fill textures.
//!
//! Each category owns a shape family, and in matched-texture mode the
//! same-index texture family, so class identity is carried by geometry
//! and pattern rather than color. Membership tests are exact at pixel
//! centers; masks come from the same test that renders, so they agree
//! with the drawn extent by construction.

pub const N_FAMILIES: usize = 10;

pub const FAMILY_NAMES: [&str; N_FAMILIES] = [
    "circle", "square", "triangle", "ring", "cross", "star", "ellipse", "pentagon", "hbar",
    "crescent",
];

/// World placement of a sprite, in pixel units.
#[derive(Clone, Copy, Debug)]
pub struct SpritePose {
    pub cx: f64,
    pub cy: f64,
    /// Circumradius: every family fits in the unit disc scaled by this.
    pub radius: f64,
    pub angle: f64,
}

impl SpritePose {
    /// Map a pixel-center point into sprite-local coordinates where the
    /// shape occupies (a subset of) the unit disc.
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (s, c) = (-self.angle).sin_cos();
        ((dx * c - dy * s) / self.radius, (dx * s + dy * c) / self.radius)
    }
}

pub fn shape_contains(family: usize, pose: &SpritePose, px: f64, py: f64) -> bool {
    let (u, v) = pose.local(px, py);
    if u * u + v * v > 1.0 {
        return false;
    }
    match family {
        0 => true,
        1 => u.abs().max(v.abs()) <= 0.72,
        2 => in_regular_polygon(u, v, 3),
        3 => {
            let r2 = u * u + v * v;
            r2 >= 0.55 * 0.55
        }
        4 => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
        5 => {
            let r = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let p = (theta * 5.0 / std::f64::consts::TAU).rem_euclid(1.0);
            let tip = (2.0 * p - 1.0).abs();
            r <= 0.45 + 0.55 * tip
        }
        6 => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
        7 => in_regular_polygon(u, v, 5),
        8 => {
            ((u.abs() - 0.62).abs() <= 0.24 && v.abs() <= 0.95)
                || (u.abs() <= 0.62 && v.abs() <= 0.22)
        }
        9 => {
            let iu = u - 0.42;
            iu * iu + v * v >= 0.62 * 0.62
        }
        _ => unreachable!("family index out of range"),
    }
}

fn in_regular_polygon(u: f64, v: f64, n: u32) -> bool {
    let r = (u * u + v * v).sqrt();
    if r < 1e-12 {
        return true;
    }
    let sector = std::f64::consts::TAU / n as f64;
    // vertex at angle pi/2 so triangles and pentagons point up
    let theta = (v.atan2(u) - std::f64::consts::FRAC_PI_2).rem_euclid(sector) - sector / 2.0;
    let apothem = (sector / 2.0).cos();
    r * theta.cos() <= apothem
}

/// Two-tone fill pattern in sprite-local coordinates; true selects the
/// brighter tone. Patterns rotate and translate with the sprite.
pub fn texture_on(family: usize, u: f64, v: f64, salt: u64) -> bool {
    let parity = |x: f64| (x.floor() as i64).rem_euclid(2) == 0;
    match family {
        0 => true,
        1 => parity(v * 2.4),
        2 => parity(u * 2.4),
        3 => parity((u + v) * 1.8),
        4 => parity(u * 1.6) == parity(v * 1.6),
        5 => {
            let cu = (u * 1.6).rem_euclid(1.0) - 0.5;
            let cv = (v * 1.6).rem_euclid(1.0) - 0.5;
            cu * cu + cv * cv > 0.28 * 0.28
        }
        6 => parity((u * u + v * v).sqrt() * 2.8),
        7 => parity(v.atan2(u) / std::f64::consts::TAU * 6.0),
        8 => {
            let cell = (((u * 2.2).floor() as i64 as u64).wrapping_mul(0x9e3779b97f4a7c15))
                ^ (((v * 2.2).floor() as i64 as u64).wrapping_mul(0xc2b2ae3d27d4eb4f))
                ^ salt;
            let h = crate::hash::derive_seed(cell, 0);
            h & 1 == 0
        }
        9 => u + 0.5 * v > 0.0,
        _ => unreachable!("family index out of range"),
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(family: usize) -> f64 {
        let pose = SpritePose {
            cx: 0.0,
            cy: 0.0,
            radius: 1.0,
            angle: 0.3,
        };
        let n = 400;
        let mut hits = 0usize;
        for iy in 0..n {
            for ix in 0..n {
                let x = -1.2 + 2.4 * (ix as f64 + 0.5) / n as f64;
                let y = -1.2 + 2.4 * (iy as f64 + 0.5) / n as f64;
                if shape_contains(family, &pose, x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 * (2.4 * 2.4) / (n * n) as f64
    }

    #[test]
    fn every_family_has_positive_area_inside_unit_disc() {
        for f in 0..N_FAMILIES {
            let a = area(f);
            assert!(a > 0.3, "family {f} area {a}");
            assert!(a < std::f64::consts::PI + 0.05, "family {f} area {a}");
        }
    }

    #[test]
    fn families_are_pairwise_distinct() {
        // overlap of membership grids must differ for every pair
        let pose = SpritePose {
            cx: 0.0,
            cy: 0.0,
            radius: 1.0,
            angle: 0.0,
        };
        let grid = |f: usize| -> Vec<bool> {
            let mut g = Vec::new();
            for iy in 0..64 {
                for ix in 0..64 {
                    let x = -1.1 + 2.2 * (ix as f64 + 0.5) / 64.0;
                    let y = -1.1 + 2.2 * (iy as f64 + 0.5) / 64.0;
                    g.push(shape_contains(f, &pose, x, y));
                }
            }
            g
        };
        let grids: Vec<Vec<bool>> = (0..N_FAMILIES).map(grid).collect();
        for a in 0..N_FAMILIES {
            for b in (a + 1)..N_FAMILIES {
                let diff = grids[a].iter().zip(&grids[b]).filter(|(x, y)| x != y).count();
                assert!(diff > 100, "families {a} and {b} differ on {diff} cells");
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!(g[1] > 0.99 && g[0] < 0.01 && g[2] < 0.01);
    }
}
