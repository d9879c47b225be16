//! Shared volumetric data model.
//!
//! Every grid stores its voxels in a flat vector, x fastest, then y, then z:
//! `index = x + nx * (y + ny * z)`. All difference operators, supervoxel code
//! and the network rely on this fixed layout. Multi-channel volumes stack
//! whole channels one after another (channel-major).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid shape plus physical voxel spacing in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "every dimension must be positive, got {shape:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        Ok(Self { shape, spacing })
    }

    /// Unit spacing geometry; panics on a zero dimension.
    pub fn isotropic(shape: [usize; 3]) -> Self {
        Self::new(shape, [1.0; 3]).expect("non-zero shape")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn physical_extent(&self) -> [f64; 3] {
        [
            self.shape[0] as f64 * self.spacing[0],
            self.shape[1] as f64 * self.spacing[1],
            self.shape[2] as f64 * self.spacing[2],
        ]
    }

    pub fn same_shape(&self, other: &Geometry) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn check_same_shape(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    /// Calls `f` with the flat index of each in-bounds face neighbour.
    #[inline]
    pub fn for_each_face_neighbor(&self, index: usize, mut f: impl FnMut(usize)) {
        let [x, y, z] = self.coords(index);
        let [nx, ny, nz] = self.shape;
        let sx = 1;
        let sy = nx;
        let sz = nx * ny;
        if x > 0 {
            f(index - sx);
        }
        if x + 1 < nx {
            f(index + sx);
        }
        if y > 0 {
            f(index - sy);
        }
        if y + 1 < ny {
            f(index + sy);
        }
        if z > 0 {
            f(index - sz);
        }
        if z + 1 < nz {
            f(index + sz);
        }
    }
}

/// Element types that may live in a [`Grid`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    fn is_valid(&self) -> bool {
        true
    }
}

impl Voxel for f32 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

impl Voxel for f64 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

impl Voxel for bool {}
impl Voxel for u8 {}
impl Voxel for u16 {}
impl Voxel for u32 {}
impl Voxel for i16 {}

/// Placement of the source grid inside the output of [`Grid::crop_or_pad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Output coordinate of the source's first voxel; negative values crop.
    Corner([i64; 3]),
    /// Centre the source in the target, flooring odd differences.
    Center,
}

/// Immutable single-channel 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geom: Geometry,
    data: Vec<T>,
}

/// Scalar intensity image.
pub type Volume = Grid<f32>;
/// Binary mask (pseudo boundary, confidence mask).
pub type BinaryVolume = Grid<bool>;

impl<T: Voxel> Grid<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::InvalidVolume(format!(
                "invalid voxel value {:?} at index {bad}",
                data[bad]
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        Self {
            data: vec![value; geom.len()],
            geom,
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [nx, ny, nz] = geom.shape;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same voxels, different spacing.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        Ok(Self {
            geom: Geometry::new(self.geom.shape, spacing)?,
            data: self.data.clone(),
        })
    }

    /// Crops and/or zero-pads to `target`; spacing is unchanged.
    ///
    /// Output voxel `p` copies source voxel `p - origin` when that lies inside
    /// the source and holds `T::default()` otherwise.
    pub fn crop_or_pad(&self, target: [usize; 3], origin: Origin) -> Result<Self> {
        let geom = Geometry::new(target, self.geom.spacing)?;
        let offset = match origin {
            Origin::Corner(o) => o,
            Origin::Center => {
                let mut o = [0i64; 3];
                for a in 0..3 {
                    o[a] = (target[a] as i64 - self.geom.shape[a] as i64).div_euclid(2);
                }
                o
            }
        };
        let mut data = vec![T::default(); geom.len()];
        let [sx, sy, sz] = self.geom.shape;
        // Output range along one axis that maps into the source.
        let span = |a: usize, n_src: usize| -> (usize, usize) {
            let lo = offset[a].max(0);
            let hi = (offset[a] + n_src as i64).min(target[a] as i64);
            if hi <= lo {
                (0, 0)
            } else {
                (lo as usize, hi as usize)
            }
        };
        let (x0, x1) = span(0, sx);
        let (y0, y1) = span(1, sy);
        let (z0, z1) = span(2, sz);
        if x1 > x0 {
            let src_x0 = (x0 as i64 - offset[0]) as usize;
            let width = x1 - x0;
            for z in z0..z1 {
                let src_z = (z as i64 - offset[2]) as usize;
                for y in y0..y1 {
                    let src_y = (y as i64 - offset[1]) as usize;
                    let s = self.geom.index(src_x0, src_y, src_z);
                    let d = geom.index(x0, y, z);
                    data[d..d + width].copy_from_slice(&self.data[s..s + width]);
                }
            }
        }
        Ok(Self { geom, data })
    }

    /// The axial slice `z` as a row-major `nx * ny` buffer.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.geom.slice_len();
        &self.data[z * n..(z + 1) * n]
    }
}

impl Grid<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Intensities min-max scaled to `[0, 1]`; a constant volume maps to zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = self.min_max();
        let lo = lo as f64;
        let range = hi as f64 - lo;
        if range > 0.0 {
            self.data.iter().map(|&v| (v as f64 - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Integer class map with `num_classes` classes; class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid<u16>,
    num_classes: u16,
}

impl LabelVolume {
    pub fn new(grid: Grid<u16>, num_classes: u16) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidVolume(format!(
                "a label volume needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = grid.data().iter().find(|&&v| v >= num_classes) {
            return Err(Error::InvalidVolume(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { grid, num_classes })
    }

    pub fn from_vec(geom: Geometry, data: Vec<u16>, num_classes: u16) -> Result<Self> {
        Self::new(Grid::new(geom, data)?, num_classes)
    }

    /// Number of classes inferred as `max label + 1` (at least 2).
    pub fn infer_classes(grid: Grid<u16>) -> Self {
        let max = grid.data().iter().copied().max().unwrap_or(0);
        let num_classes = (max + 1).max(2);
        Self { grid, num_classes }
    }

    #[inline]
    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    #[inline]
    pub fn grid(&self) -> &Grid<u16> {
        &self.grid
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        self.grid.geometry()
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    #[inline]
    pub fn data(&self) -> &[u16] {
        self.grid.data()
    }

    pub fn mask(&self, class: u16) -> BinaryVolume {
        self.grid.map(|v| v == class)
    }

    pub fn contains(&self, class: u16) -> bool {
        self.grid.data().contains(&class)
    }

    pub fn crop_or_pad(&self, target: [usize; 3], origin: Origin) -> Result<Self> {
        Ok(Self {
            grid: self.grid.crop_or_pad(target, origin)?,
            num_classes: self.num_classes,
        })
    }
}

/// Multi-channel `f64` volume, channel-major. Used for loss gradients and
/// as the storage behind [`ProbVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVolume {
    geom: Geometry,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelVolume {
    pub fn new(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidVolume("zero channels".into()));
        }
        if data.len() != geom.len() * channels {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match {} channels of shape {:?}",
                data.len(),
                channels,
                geom.shape
            )));
        }
        Ok(Self {
            geom,
            channels,
            data,
        })
    }

    pub fn zeros(geom: Geometry, channels: usize) -> Self {
        Self {
            data: vec![0.0; geom.len() * channels],
            geom,
            channels,
        }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.geom.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.geom.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, index: usize) -> f64 {
        self.data[c * self.geom.len() + index]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scales every entry by `k`.
    pub fn scaled(mut self, k: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= k);
        self
    }
}

/// Per-voxel class probabilities (or a single-channel probability map).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume(ChannelVolume);

impl ProbVolume {
    /// Largest tolerated deviation of a per-voxel channel sum from one.
    pub const SUM_TOLERANCE: f64 = 1e-5;

    /// Checks that every value is in `[0, 1]` and, for two or more channels,
    /// that each voxel's channels sum to one.
    pub fn new(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        let inner = ChannelVolume::new(geom, channels, data)?;
        if let Some(bad) = inner
            .data
            .iter()
            .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidVolume(format!(
                "probability {} at flat index {bad} is outside [0, 1]",
                inner.data[bad]
            )));
        }
        if channels > 1 {
            for i in 0..geom.len() {
                let s: f64 = (0..channels).map(|c| inner.at(c, i)).sum();
                if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                    return Err(Error::InvalidVolume(format!(
                        "channel sum {s} at voxel {i} is not 1"
                    )));
                }
            }
        }
        Ok(Self(inner))
    }

    /// Wraps raw values without the range and simplex checks. Losses accept
    /// arbitrary finite inputs, which finite-difference probes rely on.
    pub fn from_raw(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(ChannelVolume::new(geom, channels, data)?))
    }

    /// One-hot encoding of a label volume.
    pub fn one_hot(labels: &LabelVolume) -> Self {
        let geom = *labels.geometry();
        let n = labels.num_classes() as usize;
        let mut out = ChannelVolume::zeros(geom, n);
        let len = geom.len();
        for (i, &c) in labels.data().iter().enumerate() {
            out.data[c as usize * len + i] = 1.0;
        }
        Self(out)
    }

    /// Per-voxel argmax, lowest class winning ties.
    pub fn argmax(&self) -> Result<LabelVolume> {
        let geom = *self.0.geometry();
        let n = self.0.channels();
        let data = (0..geom.len())
            .map(|i| {
                let mut best = 0;
                for c in 1..n {
                    if self.0.at(c, i) > self.0.at(best, i) {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        LabelVolume::from_vec(geom, data, n.max(2) as u16)
    }

    pub fn as_channels(&self) -> &ChannelVolume {
        &self.0
    }

    pub fn into_channels(self) -> ChannelVolume {
        self.0
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        self.0.geometry()
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        self.0.channel(c)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn crop_or_pad(&self, target: [usize; 3], origin: Origin) -> Result<Self> {
        let geom = *self.0.geometry();
        let mut out = Vec::with_capacity(target[0] * target[1] * target[2] * self.channels());
        for c in 0..self.channels() {
            let g = Grid::new(geom, self.channel(c).to_vec())?;
            out.extend(g.crop_or_pad(target, origin)?.into_data());
        }
        Self::from_raw(Geometry::new(target, geom.spacing)?, self.channels(), out)
    }
}
