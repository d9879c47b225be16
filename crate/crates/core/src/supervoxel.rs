//! Anisotropy-aware 3D SLIC supervoxels.
//!
//! Clustering runs in physical space: spatial distances are measured in
//! millimetres, so a volume with 4 mm slices and 1 mm pixels gets
//! supervoxels that span four times as many voxels in-plane as along z.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{NiftiImage, ToNifti, VoxelData};
use crate::volume::{Geometry, Grid, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    /// Requested number of supervoxels.
    pub k: usize,
    /// Weight of the spatial term relative to intensity (`m`).
    #[serde(default = "default_compactness")]
    pub compactness: f64,
    /// Number of assignment rounds.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Stop early once no center moves more than this many mm; 0 disables.
    #[serde(default)]
    pub epsilon_conv: f64,
}

fn default_compactness() -> f64 {
    10.0
}

fn default_iterations() -> usize {
    10
}

impl SlicParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            compactness: default_compactness(),
            iterations: default_iterations(),
            epsilon_conv: 0.0,
        }
    }

    /// Defaults with one supervoxel per thousand voxels.
    pub fn for_geometry(geom: &Geometry) -> Self {
        Self::new((geom.len() / 1000).max(1))
    }

    fn validate(&self, voxels: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        if self.k > voxels {
            return Err(Error::KTooLarge { k: self.k, voxels });
        }
        if !(self.compactness.is_finite() && self.compactness > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "compactness must be > 0, got {}",
                self.compactness
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if !(self.epsilon_conv >= 0.0) {
            return Err(Error::InvalidParameter("epsilon_conv must be >= 0".into()));
        }
        Ok(())
    }
}

/// Partition of a volume into `count` supervoxels with IDs `0..count`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelMap {
    ids: Grid<u32>,
    count: usize,
}

impl SupervoxelMap {
    /// Validates that IDs are exactly `0..max+1`, each used at least once.
    pub fn new(ids: Grid<u32>) -> Result<Self> {
        let count = ids.data().iter().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; count];
        for &v in ids.data() {
            seen[v as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidVolume(format!(
                "supervoxel ID {missing} is unused; IDs must be contiguous"
            )));
        }
        Ok(Self { ids, count })
    }

    #[inline]
    pub fn ids(&self) -> &Grid<u32> {
        &self.ids
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        self.ids.geometry()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &v in self.ids.data() {
            sizes[v as usize] += 1;
        }
        sizes
    }

    /// Reads IDs stored as non-negative integers of any supported datatype.
    pub fn from_nifti(img: &NiftiImage) -> Result<Self> {
        let raw: Vec<f64> = match &img.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        let mut ids = Vec::with_capacity(raw.len());
        for v in raw {
            if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                return Err(Error::InvalidVolume(format!("{v} is not a supervoxel ID")));
            }
            ids.push(v as u32);
        }
        Self::new(Grid::new(img.geom, ids)?)
    }
}

impl ToNifti for SupervoxelMap {
    /// int16; more than 32767 supervoxels cannot be stored.
    fn to_nifti(&self) -> Result<NiftiImage> {
        if self.count > i16::MAX as usize {
            return Err(Error::InvalidVolume(format!(
                "{} supervoxels do not fit in an int16 ID map",
                self.count
            )));
        }
        NiftiImage::new(
            *self.geometry(),
            VoxelData::I16(self.ids.data().iter().map(|&v| v as i16).collect()),
        )
    }
}

/// A cluster center in voxel-index coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub pos: [f64; 3],
    pub intensity: f64,
}

/// Clustering state after the last assignment round, before connectivity
/// enforcement. `labels` index into `centers`.
#[derive(Clone, Debug)]
pub struct SlicClusters {
    pub labels: Grid<u32>,
    pub centers: Vec<Center>,
    /// Grid interval `S` in mm.
    pub step_mm: f64,
    /// Min-max normalised intensities the clustering ran on.
    pub intensities: Vec<f64>,
}

/// Grid interval `S = (physical volume / k)^(1/3)` in mm.
pub fn grid_step(geom: &Geometry, k: usize) -> f64 {
    let [ex, ey, ez] = geom.physical_extent();
    (ex * ey * ez / k as f64).cbrt()
}

fn gradient_energy(norm: &[f64], geom: &Geometry, x: usize, y: usize, z: usize) -> f64 {
    let [nx, ny, nz] = geom.shape;
    let at = |x: usize, y: usize, z: usize| norm[geom.index(x, y, z)];
    let dx = at((x + 1).min(nx - 1), y, z) - at(x.saturating_sub(1), y, z);
    let dy = at(x, (y + 1).min(ny - 1), z) - at(x, y.saturating_sub(1), z);
    let dz = at(x, y, (z + 1).min(nz - 1)) - at(x, y, z.saturating_sub(1));
    dx * dx + dy * dy + dz * dz
}

fn initial_centers(norm: &[f64], geom: &Geometry, step: f64) -> Vec<Center> {
    let extent = geom.physical_extent();
    let mut per_axis = [1usize; 3];
    for a in 0..3 {
        per_axis[a] = ((extent[a] / step).round() as usize).clamp(1, geom.shape[a]);
    }
    let coord = |a: usize, i: usize| (i as f64 + 0.5) * geom.shape[a] as f64 / per_axis[a] as f64 - 0.5;
    let [nx, ny, nz] = geom.shape;
    let mut centers = Vec::with_capacity(per_axis.iter().product());
    for iz in 0..per_axis[2] {
        for iy in 0..per_axis[1] {
            for ix in 0..per_axis[0] {
                let mut pos = [coord(0, ix), coord(1, iy), coord(2, iz)];
                let r = [
                    pos[0].round() as usize,
                    pos[1].round() as usize,
                    pos[2].round() as usize,
                ];
                // Move to the lowest-gradient voxel of the 3x3x3 neighbourhood,
                // but only when it is strictly better than the seed voxel and
                // stays inside the center's own grid cell.
                let seed = pos;
                let inside = |v: [usize; 3]| {
                    (0..3).all(|a| {
                        let half = geom.shape[a] as f64 / per_axis[a] as f64 / 2.0;
                        (v[a] as f64 - seed[a]).abs() < half
                    })
                };
                let mut best = gradient_energy(norm, geom, r[0], r[1], r[2]);
                let mut best_voxel = None;
                for z in r[2].saturating_sub(1)..=(r[2] + 1).min(nz - 1) {
                    for y in r[1].saturating_sub(1)..=(r[1] + 1).min(ny - 1) {
                        for x in r[0].saturating_sub(1)..=(r[0] + 1).min(nx - 1) {
                            let g = gradient_energy(norm, geom, x, y, z);
                            if g < best && inside([x, y, z]) {
                                best = g;
                                best_voxel = Some([x, y, z]);
                            }
                        }
                    }
                }
                let v = best_voxel.unwrap_or(r);
                if best_voxel.is_some() {
                    pos = [v[0] as f64, v[1] as f64, v[2] as f64];
                }
                centers.push(Center {
                    pos,
                    intensity: norm[geom.index(v[0], v[1], v[2])],
                });
            }
        }
    }
    centers
}

/// Buckets centers into cubic cells of side `S` mm so each voxel only
/// inspects centers whose `±S` window can contain it.
struct CenterIndex {
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
    step: f64,
    spacing: [f64; 3],
}

impl CenterIndex {
    fn new(centers: &[Center], geom: &Geometry, step: f64) -> Self {
        let extent = geom.physical_extent();
        let dims = [
            (extent[0] / step).ceil() as usize + 1,
            (extent[1] / step).ceil() as usize + 1,
            (extent[2] / step).ceil() as usize + 1,
        ];
        let mut index = Self {
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            step,
            spacing: geom.spacing,
        };
        for (j, c) in centers.iter().enumerate() {
            let cell = index.cell_of(c.pos);
            let flat = index.flat(cell);
            index.cells[flat].push(j as u32);
        }
        index
    }

    fn cell_of(&self, pos: [f64; 3]) -> [usize; 3] {
        let mut cell = [0; 3];
        for a in 0..3 {
            let c = ((pos[a] + 0.5) * self.spacing[a] / self.step).floor();
            cell[a] = (c.max(0.0) as usize).min(self.dims[a] - 1);
        }
        cell
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    fn for_each_candidate(&self, pos: [f64; 3], mut f: impl FnMut(usize)) {
        let c = self.cell_of(pos);
        let range = |a: usize| c[a].saturating_sub(1)..=(c[a] + 1).min(self.dims[a] - 1);
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    for &j in &self.cells[self.flat([x, y, z])] {
                        f(j as usize);
                    }
                }
            }
        }
    }
}

/// Whether a voxel lies in the `±S` mm search window of a center.
#[inline]
pub fn in_window(center: &Center, voxel: [f64; 3], spacing: [f64; 3], step: f64) -> bool {
    (0..3).all(|a| ((voxel[a] - center.pos[a]) * spacing[a]).abs() <= step)
}

#[inline]
fn distance_sq(
    center: &Center,
    voxel: [f64; 3],
    intensity: f64,
    spacing: [f64; 3],
    spatial_weight: f64,
) -> f64 {
    let di = intensity - center.intensity;
    let mut ds = 0.0;
    for a in 0..3 {
        let d = (voxel[a] - center.pos[a]) * spacing[a];
        ds += d * d;
    }
    di * di + ds * spatial_weight
}

fn assign(
    norm: &[f64],
    geom: &Geometry,
    centers: &[Center],
    step: f64,
    compactness: f64,
    labels: &mut [u32],
) {
    let index = CenterIndex::new(centers, geom, step);
    let spatial_weight = (compactness / step).powi(2);
    let spacing = geom.spacing;
    let [nx, ny, _] = geom.shape;
    labels
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = geom.index(x, y, z);
                    let pos = [x as f64, y as f64, z as f64];
                    let mut best = (f64::INFINITY, u32::MAX);
                    index.for_each_candidate(pos, |j| {
                        let c = &centers[j];
                        if in_window(c, pos, spacing, step) {
                            let d = distance_sq(c, pos, norm[i], spacing, spatial_weight);
                            if (d, j as u32) < best {
                                best = (d, j as u32);
                            }
                        }
                    });
                    if best.1 == u32::MAX {
                        // Not covered by any window: fall back to the global nearest center.
                        for (j, c) in centers.iter().enumerate() {
                            let d = distance_sq(c, pos, norm[i], spacing, spatial_weight);
                            if d < best.0 {
                                best = (d, j as u32);
                            }
                        }
                    }
                    slice[x + nx * y] = best.1;
                }
            }
        });
}

/// Recomputes centers as member means; returns the largest shift in mm.
fn update_centers(norm: &[f64], geom: &Geometry, labels: &[u32], centers: &mut [Center]) -> f64 {
    let mut sums = vec![[0.0f64; 5]; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        let [x, y, z] = geom.coords(i);
        let s = &mut sums[l as usize];
        s[0] += x as f64;
        s[1] += y as f64;
        s[2] += z as f64;
        s[3] += norm[i];
        s[4] += 1.0;
    }
    let mut max_shift: f64 = 0.0;
    for (c, s) in centers.iter_mut().zip(&sums) {
        if s[4] == 0.0 {
            continue;
        }
        let pos = [s[0] / s[4], s[1] / s[4], s[2] / s[4]];
        let shift = (0..3)
            .map(|a| ((pos[a] - c.pos[a]) * geom.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        max_shift = max_shift.max(shift);
        c.pos = pos;
        c.intensity = s[3] / s[4];
    }
    max_shift
}

/// SLIC clustering without connectivity enforcement.
///
/// Runs `iterations` assignment rounds with a center update between
/// consecutive rounds, so the returned labels are consistent with the
/// returned centers.
pub fn slic_clusters(vol: &Volume, params: &SlicParams) -> Result<SlicClusters> {
    let geom = *vol.geometry();
    params.validate(geom.len())?;
    let norm = vol.normalized();
    let step = grid_step(&geom, params.k);
    let mut centers = initial_centers(&norm, &geom, step);
    let mut labels = vec![0u32; geom.len()];
    for round in 0..params.iterations {
        assign(&norm, &geom, &centers, step, params.compactness, &mut labels);
        if round + 1 == params.iterations {
            break;
        }
        let shift = update_centers(&norm, &geom, &labels, &mut centers);
        if params.epsilon_conv > 0.0 && shift <= params.epsilon_conv {
            assign(&norm, &geom, &centers, step, params.compactness, &mut labels);
            break;
        }
    }
    Ok(SlicClusters {
        labels: Grid::new(geom, labels)?,
        centers,
        step_mm: step,
        intensities: norm,
    })
}

/// Full SLIC: clustering followed by connectivity enforcement with an
/// orphan threshold of `S³/4` mm³.
pub fn slic3d(vol: &Volume, params: &SlicParams) -> Result<SupervoxelMap> {
    let clusters = slic_clusters(vol, params)?;
    let geom = *vol.geometry();
    let min_voxels = clusters.step_mm.powi(3) / 4.0 / geom.voxel_volume();
    Ok(relabel_connected(&clusters.labels, min_voxels))
}

/// Splits every ID into 6-connected components and merges components of
/// fewer than `S³/4` mm³ into their largest neighbour, where `S` is the
/// grid interval implied by the map's supervoxel count.
pub fn enforce_connectivity(map: &SupervoxelMap) -> SupervoxelMap {
    let geom = map.geometry();
    let min_voxels = geom.len() as f64 / (4.0 * map.count() as f64);
    relabel_connected(map.ids(), min_voxels)
}

struct Components {
    of_voxel: Vec<u32>,
    sizes: Vec<usize>,
}

fn label_components(labels: &Grid<u32>) -> Components {
    let geom = labels.geometry();
    let data = labels.data();
    let mut of_voxel = vec![u32::MAX; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..data.len() {
        if of_voxel[seed] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let label = data[seed];
        of_voxel[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            geom.for_each_face_neighbor(i, |n| {
                if of_voxel[n] == u32::MAX && data[n] == label {
                    of_voxel[n] = id;
                    queue.push_back(n);
                }
            });
        }
        sizes.push(size);
    }
    Components { of_voxel, sizes }
}

/// Connected-component relabelling with small-component merging.
///
/// Components with fewer than `min_voxels` voxels are merged, smallest
/// first, into the adjacent component with the most voxels (lowest index on
/// ties). Output IDs follow first appearance in memory order.
pub fn relabel_connected(labels: &Grid<u32>, min_voxels: f64) -> SupervoxelMap {
    let geom = *labels.geometry();
    let comps = label_components(labels);
    let n = comps.sizes.len();
    let [nx, ny, _] = geom.shape;

    let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for i in 0..geom.len() {
        let [x, y, z] = geom.coords(i);
        let a = comps.of_voxel[i] as usize;
        let mut link = |j: usize| {
            let b = comps.of_voxel[j] as usize;
            if a != b {
                adjacent[a].insert(b);
                adjacent[b].insert(a);
            }
        };
        if x + 1 < nx {
            link(i + 1);
        }
        if y + 1 < ny {
            link(i + nx);
        }
        if z + 1 < geom.shape[2] {
            link(i + nx * ny);
        }
    }

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = comps.sizes.clone();
    let small = |s: usize| (s as f64) < min_voxels;
    let mut queue: BTreeSet<(usize, usize)> = (0..n).filter(|&c| small(size[c])).map(|c| (size[c], c)).collect();

    while let Some((s, root)) = queue.pop_first() {
        debug_assert_eq!(s, size[root]);
        let Some(target) = adjacent[root]
            .iter()
            .copied()
            .max_by(|&a, &b| size[a].cmp(&size[b]).then(b.cmp(&a)))
        else {
            continue;
        };
        let was_small = small(size[target]);
        if was_small {
            queue.remove(&(size[target], target));
        }
        parent[root] = target;
        size[target] += size[root];
        let neighbours = std::mem::take(&mut adjacent[root]);
        for nb in neighbours {
            adjacent[nb].remove(&root);
            if nb != target {
                adjacent[nb].insert(target);
                adjacent[target].insert(nb);
            }
        }
        adjacent[target].remove(&root);
        if small(size[target]) {
            queue.insert((size[target], target));
        }
    }

    let find = |mut c: usize| {
        while parent[c] != c {
            c = parent[c];
        }
        c
    };
    let mut new_id = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut ids = Vec::with_capacity(geom.len());
    for &c in &comps.of_voxel {
        let r = find(c as usize);
        if new_id[r] == u32::MAX {
            new_id[r] = next;
            next += 1;
        }
        ids.push(new_id[r]);
    }
    SupervoxelMap {
        ids: Grid::new(geom, ids).expect("length preserved"),
        count: next as usize,
    }
}
