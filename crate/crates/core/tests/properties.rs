use proptest::prelude::*;

use scribsup::losses::{boundary_loss, partial_ce, AbParams, active_boundary_loss};
use scribsup::metrics::{dice, evaluate, hd95, precision};
use scribsup::nifti::{NiftiImage, ToNifti};
use scribsup::propagation::{propagate, PseudoLabels};
use scribsup::scribble::ScribbleSet;
use scribsup::supervoxel::{slic3d, SlicParams, SupervoxelMap};
use scribsup::{Geometry, Grid, LabelVolume, Origin, ProbVolume, Volume};

fn geometry() -> impl Strategy<Value = Geometry> {
    ([2usize..7, 2usize..7, 1usize..5], [0.5f64..3.0, 0.5f64..3.0, 0.5f64..5.0])
        .prop_map(|(shape, spacing)| Geometry::new(shape, spacing).unwrap())
}

fn labels(n: u16) -> impl Strategy<Value = LabelVolume> {
    geometry().prop_flat_map(move |g| {
        proptest::collection::vec(0..n, g.len()).prop_map(move |d| LabelVolume::from_vec(g, d, n).unwrap())
    })
}

fn label_pair(n: u16) -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    geometry().prop_flat_map(move |g| {
        let v = proptest::collection::vec(0..n, g.len());
        (v.clone(), v).prop_map(move |(a, b)| {
            (LabelVolume::from_vec(g, a, n).unwrap(), LabelVolume::from_vec(g, b, n).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_and_hd95_are_symmetric((p, g) in label_pair(3)) {
        for c in 1..3 {
            prop_assert_eq!(dice(&p, &g, c).unwrap(), dice(&g, &p, c).unwrap());
            prop_assert_eq!(hd95(&p, &g, c).unwrap(), hd95(&g, &p, c).unwrap());
            let d = dice(&p, &g, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            if let Some(pr) = precision(&p, &g, c).unwrap() {
                prop_assert!((0.0..=1.0).contains(&pr));
            }
        }
    }

    #[test]
    fn self_comparison_is_perfect(l in labels(3)) {
        let r = evaluate(&l, &l).unwrap();
        for m in &r.classes {
            prop_assert_eq!(m.dice, 1.0);
            prop_assert!(m.hd95_mm.is_none_or(|h| h == 0.0));
            prop_assert!(m.precision.is_none_or(|p| p == 1.0));
        }
    }

    #[test]
    fn pad_then_crop_restores(l in labels(4), pad in [0usize..4, 0usize..4, 0usize..3]) {
        let shape = l.shape();
        let target = [shape[0] + pad[0], shape[1] + pad[1], shape[2] + pad[2]];
        let big = l.crop_or_pad(target, Origin::Center).unwrap();
        let off = [0, 1, 2].map(|a| -((target[a] as i64 - shape[a] as i64).div_euclid(2)));
        prop_assert_eq!(big.crop_or_pad(shape, Origin::Corner(off)).unwrap(), l);
    }

    #[test]
    fn nifti_label_roundtrip(l in labels(7)) {
        let bytes = l.to_nifti().unwrap().to_bytes().unwrap();
        let back = NiftiImage::from_bytes(&bytes).unwrap().to_labels(Some(7)).unwrap();
        prop_assert_eq!(back.data(), l.data());
    }

    #[test]
    fn propagation_is_constant_per_supervoxel(
        (ids, scrib) in geometry().prop_flat_map(|g| (
            proptest::collection::vec(0u32..5, g.len()),
            proptest::collection::vec(proptest::option::weighted(0.2, 0u16..3), g.len()),
        ).prop_map(move |(a, b)| (Grid::new(g, a).unwrap(), b)))
    ) {
        // compact IDs
        let mut order: Vec<u32> = ids.data().to_vec();
        order.sort_unstable();
        order.dedup();
        let ids = ids.map(|v| order.binary_search(&v).unwrap() as u32);
        let sv = SupervoxelMap::new(ids).unwrap();
        let mut s = ScribbleSet::new(*sv.geometry(), 3).unwrap();
        for (i, c) in scrib.iter().enumerate() {
            if let Some(c) = c {
                s.insert(i, *c).unwrap();
            }
        }
        let pl = propagate(&s, &sv).unwrap();
        let mut first = vec![None; sv.count()];
        for (i, &id) in sv.ids().data().iter().enumerate() {
            let v = (pl.mask.data()[i], pl.confident.data()[i]);
            match first[id as usize] {
                None => first[id as usize] = Some(v),
                Some(w) => prop_assert_eq!(w, v),
            }
            // a confident voxel's class was scribbled somewhere in its supervoxel
            if v.1 {
                prop_assert!(s.iter().any(|(j, c)| sv.ids().data()[j] == id && c == v.0));
            }
        }
    }

    #[test]
    fn slic_partitions_random_volumes(
        (vol, k) in geometry().prop_flat_map(|g| (
            proptest::collection::vec(-50.0f32..50.0, g.len()),
            1usize..=g.len().min(20),
        ).prop_map(move |(d, k)| (Volume::new(g, d).unwrap(), k)))
    ) {
        let map = slic3d(&vol, &SlicParams::new(k)).unwrap();
        prop_assert_eq!(map.sizes().iter().sum::<usize>(), vol.len());
        prop_assert!(map.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn losses_are_nonnegative_and_finite(
        (p, l) in geometry().prop_flat_map(|g| (
            proptest::collection::vec(0.01f64..1.0, 2 * g.len()),
            proptest::collection::vec(0u16..2, g.len()),
        ).prop_map(move |(w, l)| {
            let n = g.len();
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                let s = w[i] + w[n + i];
                data[i] = w[i] / s;
                data[n + i] = w[n + i] / s;
            }
            (ProbVolume::new(g, 2, data).unwrap(), LabelVolume::from_vec(g, l, 2).unwrap())
        }))
    ) {
        let g = *p.geometry();
        let pl = PseudoLabels { mask: l.clone(), confident: Grid::filled(g, true) };
        let ce = partial_ce(&p, &pl).unwrap();
        prop_assert!(ce.value >= 0.0 && ce.value.is_finite());
        let b = ProbVolume::new(g, 1, p.channel(1).to_vec()).unwrap();
        let bry = boundary_loss(&b, &l.mask(1)).unwrap();
        prop_assert!(bry.value >= 0.0 && bry.value.is_finite());
        let image = Volume::from_fn(g, |x, y, z| (x * 3 + y + z * 7) as f32);
        let ab = active_boundary_loss(&p, &image, &AbParams::default()).unwrap();
        prop_assert!(ab.value >= 0.0 && ab.grad.is_finite());
    }
}
