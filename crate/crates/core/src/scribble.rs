//! Scribble annotations and their simulation from dense masks.
//!
//! Foreground scribbles are per-slice skeletons of each class; the
//! background scribble is the outer contour of the foreground dilated by a
//! fixed in-plane margin. Both are computed slice by slice along z.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::morphology::Plane;
use crate::nifti::{NiftiImage, VoxelData};
use crate::volume::{Geometry, LabelVolume};

/// Value marking an unannotated voxel in scribble files.
pub const UNANNOTATED: u8 = 255;

/// Sparse `(voxel index, class)` annotations on a host geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ScribbleSet {
    geom: Geometry,
    num_classes: u16,
    entries: BTreeMap<usize, u16>,
}

impl ScribbleSet {
    pub fn new(geom: Geometry, num_classes: u16) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "scribbles need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            geom,
            num_classes,
            entries: BTreeMap::new(),
        })
    }

    /// Adds one annotation. Re-adding the same class is a no-op; a different
    /// class on an annotated voxel is an error.
    pub fn insert(&mut self, index: usize, class: u16) -> Result<()> {
        if index >= self.geom.len() {
            return Err(Error::InvalidParameter(format!(
                "scribble index {index} outside volume of {} voxels",
                self.geom.len()
            )));
        }
        if class >= self.num_classes {
            return Err(Error::InvalidParameter(format!(
                "scribble class {class} >= {} classes",
                self.num_classes
            )));
        }
        match self.entries.get(&index) {
            Some(&prev) if prev != class => Err(Error::InvalidParameter(format!(
                "voxel {index} scribbled as both class {prev} and {class}"
            ))),
            _ => {
                self.entries.insert(index, class);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: &ScribbleSet) -> Result<()> {
        other.geom.check_same_shape(&self.geom, "merging scribbles")?;
        for (&i, &c) in &other.entries {
            self.insert(i, c)?;
        }
        Ok(())
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<u16> {
        self.entries.get(&index).copied()
    }

    /// Entries in ascending voxel order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u16)> + '_ {
        self.entries.iter().map(|(&i, &c)| (i, c))
    }

    /// Dense uint8 image with [`UNANNOTATED`] for unlabelled voxels.
    pub fn to_nifti(&self) -> Result<NiftiImage> {
        if self.num_classes > UNANNOTATED as u16 {
            return Err(Error::InvalidParameter(format!(
                "{} classes collide with the unannotated marker {UNANNOTATED}",
                self.num_classes
            )));
        }
        let mut data = vec![UNANNOTATED; self.geom.len()];
        for (&i, &c) in &self.entries {
            data[i] = c as u8;
        }
        NiftiImage::new(self.geom, VoxelData::U8(data))
    }

    /// Inverse of [`ScribbleSet::to_nifti`]. Without `num_classes` the count
    /// is `max annotated class + 1` (at least 2).
    pub fn from_nifti(img: &NiftiImage, num_classes: Option<u16>) -> Result<Self> {
        let grid = img.to_u16_grid()?;
        let annotated = || grid.data().iter().copied().filter(|&v| v != UNANNOTATED as u16);
        let n = match num_classes {
            Some(n) => n,
            None => annotated().max().map_or(2, |m| (m + 1).max(2)),
        };
        let mut set = Self::new(img.geom, n)?;
        for (i, &v) in grid.data().iter().enumerate() {
            if v != UNANNOTATED as u16 {
                set.insert(i, v)?;
            }
        }
        Ok(set)
    }
}

impl crate::nifti::ToNifti for ScribbleSet {
    fn to_nifti(&self) -> Result<NiftiImage> {
        ScribbleSet::to_nifti(self)
    }
}

fn slice_plane(gt: &LabelVolume, z: usize, pred: impl Fn(u16) -> bool) -> Plane {
    let [nx, ny, _] = gt.shape();
    let n = nx * ny;
    let data = gt.data()[z * n..(z + 1) * n].iter().map(|&v| pred(v)).collect();
    Plane::new(nx, ny, data)
}

/// Skeleton of one binary slice: alternate a 3x3 closing (restricted to the
/// original mask) with one thinning iteration until the result repeats,
/// then finish with plain thinning and break any remaining 2x2 blocks.
pub fn skeletonize(mask: &Plane) -> Plane {
    let mut seen = std::collections::HashSet::new();
    let mut cur = mask.clone();
    let cap = 2 * (mask.w + mask.h) + 4;
    for _ in 0..cap {
        let next = cur.close().and(mask).thin_once();
        if next == cur || !seen.insert(next.clone()) {
            cur = next;
            break;
        }
        cur = next;
    }
    cur.thin().break_2x2_blocks()
}

fn foreground_classes(gt: &LabelVolume) -> Vec<u16> {
    let mut present = vec![false; gt.num_classes() as usize];
    for &v in gt.data() {
        present[v as usize] = true;
    }
    (1..gt.num_classes()).filter(|&c| present[c as usize]).collect()
}

/// Per class and axial slice, the skeleton of the class region.
pub fn simulate_foreground_scribbles(gt: &LabelVolume) -> Result<ScribbleSet> {
    let classes = foreground_classes(gt);
    if classes.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let geom = *gt.geometry();
    let nz = geom.shape[2];
    let n = geom.slice_len();
    let jobs: Vec<(u16, usize)> = classes
        .iter()
        .flat_map(|&c| (0..nz).map(move |z| (c, z)))
        .collect();
    let parts: Vec<(u16, usize, Plane)> = jobs
        .par_iter()
        .filter_map(|&(c, z)| {
            let mask = slice_plane(gt, z, |v| v == c);
            (mask.count() > 0).then(|| (c, z, skeletonize(&mask)))
        })
        .collect();
    let mut set = ScribbleSet::new(geom, gt.num_classes())?;
    for (c, z, skel) in parts {
        for (i, &on) in skel.data.iter().enumerate() {
            if on {
                set.insert(z * n + i, c)?;
            }
        }
    }
    Ok(set)
}

/// Per axial slice with foreground: the voxels of the foreground dilated by
/// `margin` (Chebyshev, in-plane) that touch the outside of the dilated
/// region through an in-image 8-neighbour, labelled as class 0.
pub fn simulate_background_scribble(gt: &LabelVolume, margin: usize) -> Result<ScribbleSet> {
    if margin == 0 {
        return Err(Error::InvalidParameter("background margin must be >= 1".into()));
    }
    let geom = *gt.geometry();
    let [nx, ny, nz] = geom.shape;
    let n = nx * ny;
    let rings: Vec<(usize, Vec<usize>)> = (0..nz)
        .into_par_iter()
        .filter_map(|z| {
            let fg = slice_plane(gt, z, |v| v != 0);
            if fg.count() == 0 {
                return None;
            }
            let grown = fg.dilate(margin);
            let mut ring = Vec::new();
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    if !grown.get(x, y) || fg.get(x, y) {
                        continue;
                    }
                    let touches_outside = (-1..=1).any(|dy| {
                        (-1..=1).any(|dx| {
                            let (qx, qy) = (x + dx, y + dy);
                            qx >= 0 && qy >= 0 && qx < nx as isize && qy < ny as isize && !grown.get(qx, qy)
                        })
                    });
                    if touches_outside {
                        ring.push(x as usize + nx * y as usize);
                    }
                }
            }
            Some((z, ring))
        })
        .collect();
    if rings.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut set = ScribbleSet::new(geom, gt.num_classes())?;
    for (z, ring) in rings {
        for i in ring {
            set.insert(z * n + i, 0)?;
        }
    }
    Ok(set)
}

/// Foreground skeletons plus the background contour.
pub fn simulate_scribbles(gt: &LabelVolume, margin: usize) -> Result<ScribbleSet> {
    let mut set = simulate_foreground_scribbles(gt)?;
    set.merge(&simulate_background_scribble(gt, margin)?)?;
    Ok(set)
}
