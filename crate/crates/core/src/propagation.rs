//! Scribble-to-supervoxel label propagation and the static edge boundary.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scribble::ScribbleSet;
use crate::supervoxel::SupervoxelMap;
use crate::volume::{BinaryVolume, Grid, LabelVolume, Volume};

/// Dense pseudo mask plus the mask of voxels whose supervoxel received
/// exactly one scribble class.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub mask: LabelVolume,
    pub confident: BinaryVolume,
}

impl PseudoLabels {
    pub fn confident_count(&self) -> usize {
        self.confident.count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Hit {
    Untouched,
    Unique(u16),
    Conflict,
}

/// Paints every supervoxel hit by a single scribble class with that class.
/// Supervoxels hit by no scribble or by several classes stay unconfident
/// with mask value 0.
pub fn propagate(scribbles: &ScribbleSet, sv: &SupervoxelMap) -> Result<PseudoLabels> {
    let geom = *sv.geometry();
    scribbles
        .geometry()
        .check_same_shape(&geom, "scribbles vs supervoxels")?;
    let ids = sv.ids().data();
    let mut hits = vec![Hit::Untouched; sv.count()];
    for (i, class) in scribbles.iter() {
        let h = &mut hits[ids[i] as usize];
        *h = match *h {
            Hit::Untouched => Hit::Unique(class),
            Hit::Unique(c) if c == class => Hit::Unique(c),
            _ => Hit::Conflict,
        };
    }
    let (mask, confident): (Vec<u16>, Vec<bool>) = ids
        .iter()
        .map(|&id| match hits[id as usize] {
            Hit::Unique(c) => (c, true),
            _ => (0, false),
        })
        .unzip();
    Ok(PseudoLabels {
        mask: LabelVolume::from_vec(geom, mask, scribbles.num_classes())?,
        confident: Grid::new(geom, confident)?,
    })
}

/// Source of the pseudo static boundary.
pub trait EdgeDetector {
    fn detect(&self, vol: &Volume) -> Result<BinaryVolume>;
}

/// Per-slice gradient magnitude with non-maximum suppression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientEdges {
    pub threshold: f64,
}

impl Default for GradientEdges {
    fn default() -> Self {
        Self { threshold: 0.2 }
    }
}

impl EdgeDetector for GradientEdges {
    fn detect(&self, vol: &Volume) -> Result<BinaryVolume> {
        static_boundary(vol, self.threshold)
    }
}

/// Edges computed elsewhere (e.g. by a learned detector) and loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEdges(pub BinaryVolume);

impl EdgeDetector for PrecomputedEdges {
    fn detect(&self, vol: &Volume) -> Result<BinaryVolume> {
        self.0
            .geometry()
            .check_same_shape(vol.geometry(), "precomputed edges vs image")?;
        Ok(self.0.clone())
    }
}

/// Stacks per-slice 2D edge maps into a binary boundary volume.
pub fn static_boundary(vol: &Volume, threshold: f64) -> Result<BinaryVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "edge threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let [nx, ny, _] = vol.shape();
    let mut out = vec![false; vol.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, dst)| {
            let slice: Vec<f64> = vol.slice(z).iter().map(|&v| v as f64).collect();
            dst.copy_from_slice(&slice_edges(&slice, nx, ny, threshold));
        });
    Grid::new(*vol.geometry(), out)
}

/// Edge map of one `w * h` slice.
///
/// Central-difference gradient with replicated border, magnitude min-max
/// normalised over the slice, suppression of pixels that are not maximal
/// along the gradient direction quantised to 0/45/90/135 degrees, then
/// `normalised magnitude >= threshold`. Along the direction `d`, a pixel must
/// be `>=` its neighbour at `-d` and `>` its neighbour at `+d`, so a plateau
/// two pixels wide keeps exactly its `+d` side.
pub fn slice_edges(slice: &[f64], w: usize, h: usize, threshold: f64) -> Vec<bool> {
    let at = |x: usize, y: usize| slice[x + w * y];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = x + w * y;
            gx[i] = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            gy[i] = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            mag[i] = gx[i].hypot(gy[i]);
        }
    }
    let (lo, hi) = mag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![false; w * h];
    }
    for m in &mut mag {
        *m = (*m - lo) / range;
    }
    let m_at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[x as usize + w * y as usize]
        }
    };
    let mut edges = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = x + w * y;
            let m = mag[i];
            if m < threshold {
                continue;
            }
            let (dx, dy) = quantized_direction(gx[i], gy[i]);
            let (xi, yi) = (x as isize, y as isize);
            edges[i] = m >= m_at(xi - dx, yi - dy) && m > m_at(xi + dx, yi + dy);
        }
    }
    edges
}

/// Nearest of the four pixel axes to the gradient direction (sign-free).
fn quantized_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if angle >= 180.0 {
        angle -= 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn sv(shape: [usize; 3], f: impl FnMut(usize, usize, usize) -> u32) -> SupervoxelMap {
        SupervoxelMap::new(Grid::from_fn(Geometry::isotropic(shape), f)).unwrap()
    }

    #[test]
    fn single_cell_takes_the_scribble_class() {
        let map = sv([3, 3, 2], |_, _, _| 0);
        let mut s = ScribbleSet::new(*map.geometry(), 2).unwrap();
        s.insert(4, 1).unwrap();
        let pl = propagate(&s, &map).unwrap();
        assert!(pl.mask.data().iter().all(|&v| v == 1));
        assert!(pl.confident.data().iter().all(|&b| b));
    }

    #[test]
    fn conflicting_classes_are_excluded() {
        let map = sv([4, 2, 1], |x, _, _| u32::from(x >= 2));
        let mut s = ScribbleSet::new(*map.geometry(), 3).unwrap();
        s.insert(0, 1).unwrap();
        s.insert(1, 2).unwrap();
        s.insert(2, 2).unwrap();
        s.insert(3, 2).unwrap();
        let pl = propagate(&s, &map).unwrap();
        assert_eq!(pl.mask.data(), &[0, 0, 2, 2, 0, 0, 2, 2]);
        assert_eq!(
            pl.confident.data(),
            &[false, false, true, true, false, false, true, true]
        );
    }

    #[test]
    fn no_scribbles_means_no_confidence() {
        let map = sv([2, 2, 2], |x, _, _| x as u32);
        let s = ScribbleSet::new(*map.geometry(), 2).unwrap();
        assert_eq!(propagate(&s, &map).unwrap().confident_count(), 0);
    }

    #[test]
    fn shape_mismatch() {
        let map = sv([2, 2, 2], |_, _, _| 0);
        let s = ScribbleSet::new(Geometry::isotropic([2, 2, 1]), 2).unwrap();
        assert!(matches!(propagate(&s, &map), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn constant_slice_has_no_edges() {
        let vol = Volume::filled(Geometry::isotropic([8, 8, 2]), 3.0);
        let b = static_boundary(&vol, 0.2).unwrap();
        assert_eq!(b.count(), 0);
    }

    #[test]
    fn vertical_step_marks_one_column() {
        for (lo, hi) in [(0.0, 1.0), (5.0, -2.0)] {
            let vol = Volume::from_fn(Geometry::isotropic([16, 16, 2]), |x, _, _| if x < 7 { lo } else { hi });
            let b = static_boundary(&vol, 0.2).unwrap();
            for z in 0..2 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(b.get(x, y, z), x == 7, "({x},{y},{z})");
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_domain() {
        let vol = Volume::filled(Geometry::isotropic([2, 2, 1]), 0.0);
        assert!(static_boundary(&vol, 0.0).is_err());
        assert!(static_boundary(&vol, 1.0).is_err());
    }

    #[test]
    fn precomputed_edges_checked_against_image() {
        let vol = Volume::filled(Geometry::isotropic([2, 2, 1]), 0.0);
        let edges = PrecomputedEdges(BinaryVolume::filled(Geometry::isotropic([2, 2, 2]), true));
        assert!(edges.detect(&vol).is_err());
        let ok = PrecomputedEdges(BinaryVolume::filled(Geometry::isotropic([2, 2, 1]), true));
        assert_eq!(ok.detect(&vol).unwrap().count(), 4);
    }
}
