//! Overlap and surface-distance metrics: Dice, precision and HD95 in mm.
//!
//! Undefined results (an empty region) are `None`, never 0 or infinity, and
//! are left out of class means.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume};

fn counts(pred: &LabelVolume, gt: &LabelVolume, c: u16) -> Result<(usize, usize, usize)> {
    pred.geometry().check_same_shape(gt.geometry(), "prediction vs ground truth")?;
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both sets are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, c: u16) -> Result<f64> {
    let (p, g, both) = counts(pred, gt, c)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    })
}

/// `TP / (TP + FP)`; `None` when the predicted set is empty.
pub fn precision(pred: &LabelVolume, gt: &LabelVolume, c: u16) -> Result<Option<f64>> {
    let (p, _, both) = counts(pred, gt, c)?;
    Ok((p > 0).then(|| both as f64 / p as f64))
}

/// Set voxels with a 6-neighbour outside the set or lying on the image border.
pub fn boundary_voxels(mask: &[bool], geom: &Geometry) -> Vec<usize> {
    let [nx, ny, nz] = geom.shape;
    let mut out = Vec::new();
    for (i, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let [x, y, z] = geom.coords(i);
        let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        let mut edge = border;
        if !edge {
            geom.for_each_face_neighbor(i, |j| edge |= !mask[j]);
        }
        if edge {
            out.push(i);
        }
    }
    out
}

/// 1D lower envelope of parabolas over samples `f` at positions `k * h`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], zs: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = start;
    zs[0] = f64::NEG_INFINITY;
    zs[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let intersect = |p: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
        // zs[0] is -inf, so this stops at k = 0 at the latest.
        let mut s = intersect(v[k]);
        while s <= zs[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        zs[k] = s;
        zs[k + 1] = f64::INFINITY;
    }
    let mut j = 0;
    for q in 0..n {
        while zs[j + 1] < pos(q) {
            j += 1;
        }
        let d = pos(q) - pos(v[j]);
        out[q] = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel, honouring anisotropic spacing. All infinite without seeds.
pub fn squared_edt(seeds: &[bool], geom: &Geometry) -> Vec<f64> {
    let mut d: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let [nx, ny, nz] = geom.shape;
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = geom.shape[axis];
        let h = geom.spacing[axis];
        let stride = strides[axis];
        // Start index of every line along `axis`.
        let starts: Vec<usize> = (0..nz)
            .flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| (x, y, z))))
            .filter(|&(x, y, z)| [x, y, z][axis] == 0)
            .map(|(x, y, z)| x + nx * (y + ny * z))
            .collect();
        let lines: Vec<(usize, Vec<f64>)> = starts
            .par_iter()
            .map_init(
                || (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]),
                |(f, v, zs), &s| {
                    for (k, slot) in f.iter_mut().enumerate() {
                        *slot = d[s + k * stride];
                    }
                    let mut out = vec![0.0; n];
                    edt_1d(f, h, &mut out, v, zs);
                    (s, out)
                },
            )
            .collect();
        for (s, line) in lines {
            for (k, val) in line.into_iter().enumerate() {
                d[s + k * stride] = val;
            }
        }
    }
    d
}

/// Percentile `q ∈ [0,1]` of sorted values with linear interpolation at
/// rank `q (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Pooled directed boundary distances in mm, both directions.
pub fn boundary_distances(pred: &LabelVolume, gt: &LabelVolume, c: u16) -> Result<Option<Vec<f64>>> {
    let geom = *pred.geometry();
    geom.check_same_shape(gt.geometry(), "prediction vs ground truth")?;
    let p = pred.mask(c);
    let g = gt.mask(c);
    let bp = boundary_voxels(p.data(), &geom);
    let bg = boundary_voxels(g.data(), &geom);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let seeds = |idx: &[usize]| {
        let mut s = vec![false; geom.len()];
        for &i in idx {
            s[i] = true;
        }
        s
    };
    let to_g = squared_edt(&seeds(&bg), &geom);
    let to_p = squared_edt(&seeds(&bp), &geom);
    let mut d: Vec<f64> = bp.iter().map(|&i| to_g[i].sqrt()).collect();
    d.extend(bg.iter().map(|&i| to_p[i].sqrt()));
    Ok(Some(d))
}

/// 95th percentile of the pooled bidirectional boundary distances (mm);
/// `None` when either class region is empty.
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, c: u16) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt, c)?.and_then(|mut d| {
        d.sort_by(f64::total_cmp);
        percentile_sorted(&d, 0.95)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub class: u16,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean: MeanMetrics,
    pub undefined: Vec<UndefinedMetric>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class metrics for foreground classes `1..N` and their means.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    pred.geometry().check_same_shape(gt.geometry(), "prediction vs ground truth")?;
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    let mut classes = Vec::new();
    let mut undefined = Vec::new();
    for c in 1..gt.num_classes() {
        let m = ClassMetrics {
            class: c,
            dice: dice(pred, gt, c)?,
            hd95_mm: hd95(pred, gt, c)?,
            precision: precision(pred, gt, c)?,
        };
        if m.hd95_mm.is_none() {
            undefined.push(UndefinedMetric { class: c, metric: "hd95_mm".into() });
        }
        if m.precision.is_none() {
            undefined.push(UndefinedMetric { class: c, metric: "precision".into() });
        }
        classes.push(m);
    }
    let mean = MeanMetrics {
        dice: mean(classes.iter().map(|m| Some(m.dice))),
        hd95_mm: mean(classes.iter().map(|m| m.hd95_mm)),
        precision: mean(classes.iter().map(|m| m.precision)),
    };
    Ok(MetricsReport { classes, mean, undefined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(geom: Geometry, f: impl FnMut(usize, usize, usize) -> u16) -> LabelVolume {
        LabelVolume::new(crate::volume::Grid::from_fn(geom, f), 2).unwrap()
    }

    #[test]
    fn shifted_block_dice() {
        let g = Geometry::isotropic([8, 8, 1]);
        let p = labels(g, |x, y, _| u16::from((1..4).contains(&x) && (1..4).contains(&y)));
        let q = labels(g, |x, y, _| u16::from((2..5).contains(&x) && (1..4).contains(&y)));
        assert!((dice(&p, &q, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision(&p, &q, 1).unwrap(), Some(6.0 / 9.0));
        let empty = labels(g, |_, _, _| 0);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&p, &empty, 1).unwrap(), 0.0);
        assert_eq!(precision(&empty, &p, 1).unwrap(), None);
        assert_eq!(hd95(&empty, &p, 1).unwrap(), None);
    }

    #[test]
    fn parallel_planes_are_six_mm_apart() {
        let g = Geometry::new([5, 5, 8], [1.0, 1.0, 2.0]).unwrap();
        let p = labels(g, |_, _, z| u16::from(z == 2));
        let q = labels(g, |_, _, z| u16::from(z == 5));
        assert_eq!(hd95(&p, &q, 1).unwrap(), Some(6.0));
        assert_eq!(hd95(&p, &p, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn edt_matches_brute_force() {
        let g = Geometry::new([7, 5, 4], [0.7, 1.3, 2.9]).unwrap();
        let seeds: Vec<bool> = (0..g.len()).map(|i| (i * 31) % 17 == 3).collect();
        let d = squared_edt(&seeds, &g);
        for i in 0..g.len() {
            let a = g.coords(i);
            let best = (0..g.len())
                .filter(|&j| seeds[j])
                .map(|j| {
                    let b = g.coords(j);
                    (0..3)
                        .map(|k| ((a[k] as f64 - b[k] as f64) * g.spacing[k]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d[i] - best).abs() < 1e-9, "voxel {i}: {} vs {best}", d[i]);
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 0.95), Some(9.5));
        assert_eq!(percentile_sorted(&[3.0], 0.95), Some(3.0));
        assert_eq!(percentile_sorted(&[], 0.95), None);
    }

    #[test]
    fn report_excludes_undefined_from_means() {
        let g = Geometry::isotropic([4, 4, 1]);
        let gt = LabelVolume::new(crate::volume::Grid::from_fn(g, |x, _, _| (x / 2) as u16 + u16::from(x == 3)), 3).unwrap();
        let pred = LabelVolume::new(crate::volume::Grid::from_fn(g, |x, _, _| u16::from(x >= 2)), 3).unwrap();
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.classes.len(), 2);
        assert_eq!(r.classes[1].precision, None);
        assert!(r.undefined.contains(&UndefinedMetric { class: 2, metric: "precision".into() }));
        assert_eq!(r.mean.precision, r.classes[0].precision);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["mean"].get("hd95_mm").is_some());
    }
}
