//! Synthetic test volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::volume::{Geometry, Grid, LabelVolume, Volume};

/// Two nested spheres centred in the volume: class 2 (radius `0.15 * d`)
/// inside class 1 (radius `0.3 * d`), where `d` is the smallest physical
/// extent. Intensities 0 / 100 / 200 plus Gaussian noise of std `noise`.
pub fn sphere_phantom(geom: Geometry, noise: f32, seed: u64) -> Result<(Volume, LabelVolume)> {
    let ext = geom.physical_extent();
    let d = ext.iter().copied().fold(f64::INFINITY, f64::min);
    let center = ext.map(|e| e / 2.0);
    let labels = Grid::from_fn(geom, |x, y, z| {
        let p = [x, y, z];
        let r2: f64 = (0..3)
            .map(|a| ((p[a] as f64 + 0.5) * geom.spacing[a] - center[a]).powi(2))
            .sum();
        if r2 <= (0.15 * d).powi(2) {
            2
        } else if r2 <= (0.3 * d).powi(2) {
            1
        } else {
            0
        }
    });
    let labels = LabelVolume::new(labels, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, noise.max(0.0)).expect("finite std");
    let data = labels
        .data()
        .iter()
        .map(|&c| 100.0 * c as f32 + if noise > 0.0 { dist.sample(&mut rng) } else { 0.0 })
        .collect();
    Ok((Grid::new(geom, data)?, labels))
}
