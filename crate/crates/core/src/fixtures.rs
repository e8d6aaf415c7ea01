//! Built-in synthetic microstructures, so the whole pipeline runs without
//! external data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volgrid::{PhaseMapping, PhaseVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    /// Overlapping spheres (active material) wrapped in shells (binder) in pore.
    Spheres,
    /// Layers normal to z with fibres along x between them; anisotropic.
    Lamellae,
}

pub const SPHERE_RADIUS: f64 = 6.5;
pub const SHELL_THICKNESS: f64 = 2.0;
pub const COATED_FRACTION: f64 = 0.5;
/// Expected number of sphere centres per voxel.
const SPHERE_DENSITY: f64 = 0.43 / (4.0 / 3.0 * std::f64::consts::PI * 6.5 * 6.5 * 6.5);

pub fn palette(kind: FixtureKind) -> Vec<String> {
    let names: &[&str] = match kind {
        FixtureKind::Spheres => &["pore", "am", "binder"],
        FixtureKind::Lamellae => &["matrix", "lamella", "fibre"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// HR → LR phase merge used when simulating the low-res scan: binder is
/// invisible at low resolution and reads as pore.
pub fn lr_merge(kind: FixtureKind) -> PhaseMapping {
    match kind {
        FixtureKind::Spheres => PhaseMapping::new(vec![0, 1, 0]).expect("valid map"),
        FixtureKind::Lamellae => PhaseMapping::identity(3),
    }
}

pub fn build(kind: FixtureKind, side: usize, seed: u64) -> Result<PhaseVolume> {
    match kind {
        FixtureKind::Spheres => spheres(side, seed),
        FixtureKind::Lamellae => lamellae(side, seed),
    }
}

/// Labels: 0 pore, 1 active material (inside any sphere), 2 binder (within
/// the shell of a coated sphere but inside none). About half the spheres are
/// coated, so all three phases touch. Centres may lie outside the box so the
/// structure is statistically uniform up to the faces.
pub fn spheres(side: usize, seed: u64) -> Result<PhaseVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = SPHERE_RADIUS + SHELL_THICKNESS;
    let span = side as f64 + 2.0 * outer;
    let n = (SPHERE_DENSITY * span.powi(3)).round() as usize;
    let centres: Vec<([f64; 3], bool)> =
        (0..n).map(|_| ([0; 3].map(|_| rng.random::<f64>() * span - outer), rng.random_bool(COATED_FRACTION))).collect();
    let mut inside = vec![false; side * side * side];
    let mut shell = vec![false; side * side * side];
    for (c, coated) in &centres {
        let lo = c.map(|v| (v - outer).floor().max(0.0) as usize);
        let hi = c.map(|v| ((v + outer).ceil().max(0.0) as usize).min(side));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let p = [x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1], z as f64 + 0.5 - c[2]];
                    let r = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                    let i = x + side * (y + side * z);
                    inside[i] |= r < SPHERE_RADIUS * SPHERE_RADIUS;
                    shell[i] |= *coated && r < outer * outer;
                }
            }
        }
    }
    let labels = inside.iter().zip(&shell).map(|(&a, &b)| if a { 1 } else if b { 2 } else { 0 }).collect();
    PhaseVolume::new([side; 3], 1.0, labels, palette(FixtureKind::Spheres))
}

/// Lamellae of thickness 3 every 8 voxels along z (with a per-layer random
/// offset), plus fibres of radius 1.5 running along x through the matrix.
pub fn lamellae(side: usize, seed: u64) -> Result<PhaseVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = vec![false; side];
    let mut z = rng.random_range(0..8);
    while z < side {
        for k in z..(z + 3).min(side) {
            layer[k] = true;
        }
        z += 6 + rng.random_range(0..5);
    }
    let n_fibres = side * side / 40;
    let fibres: Vec<(f64, f64)> = (0..n_fibres).map(|_| (rng.random::<f64>() * side as f64, rng.random::<f64>() * side as f64)).collect();
    let mut fibre = vec![false; side * side];
    for &(cy, cz) in &fibres {
        for zz in 0..side {
            for yy in 0..side {
                let (dy, dz) = (yy as f64 + 0.5 - cy, zz as f64 + 0.5 - cz);
                if dy * dy + dz * dz < 2.25 {
                    fibre[yy + side * zz] = true;
                }
            }
        }
    }
    PhaseVolume::from_fn([side; 3], 1.0, palette(FixtureKind::Lamellae), |_, y, z| {
        if layer[z] {
            1
        } else if fibre[y + side * z] {
            2
        } else {
            0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{interphase_surface_area, volume_fraction};

    #[test]
    fn sphere_fractions_are_balanced() {
        let v = spheres(64, 1).unwrap();
        let f: Vec<f64> = (0..3).map(|p| volume_fraction(&v, p).unwrap()).collect();
        assert!(f.iter().all(|&x| x > 0.15 && x < 0.6), "{f:?}");
        assert_eq!(v, spheres(64, 1).unwrap());
        assert_ne!(v, spheres(64, 2).unwrap());
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!(interphase_surface_area(&v, a, b).unwrap() > 0.01, "{a}|{b}");
        }
    }

    #[test]
    fn lamellae_are_anisotropic() {
        let v = lamellae(32, 3).unwrap();
        for z in 0..32 {
            let l = v.get(0, 0, z) == 1;
            assert!((0..32).all(|y| (0..32).all(|x| (v.get(x, y, z) == 1) == l)));
        }
        let f: Vec<f64> = (0..3).map(|p| volume_fraction(&v, p).unwrap()).collect();
        assert!(f.iter().all(|&x| x > 0.05), "{f:?}");
    }
}
