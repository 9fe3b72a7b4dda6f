use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use boxcast::box_core::{
    enumerate_equivalent_params, euler_zyx_from_matrix, BoxCodec, BoxParams, Normalizer, Quaternion, Quantizer,
    SymmetryMode, NUM_PARAMS,
};
use boxcast::geometry::{intersection_volume, iog, iou, voxel_iou_oracle};
use boxcast::metrics::f1;

fn angles() -> impl Strategy<Value = [f64; 3]> {
    (-PI..PI, -1.5..1.5f64, -PI..PI).prop_map(|(y, p, r)| [y, p, r])
}

fn any_box() -> impl Strategy<Value = BoxParams> {
    (
        prop::array::uniform3(0.05..2.0f64),
        prop::array::uniform3(-1.0..1.0f64),
        angles(),
    )
        .prop_map(|(d, c, e)| BoxParams::new(d, c, e))
}

/// A box near `a`, so that pairs overlap often.
fn pair() -> impl Strategy<Value = (BoxParams, BoxParams)> {
    (any_box(), prop::array::uniform3(-0.6..0.6f64), prop::array::uniform3(0.05..2.0f64), angles()).prop_map(
        |(a, off, d, e)| {
            let c = [0, 1, 2].map(|i| a.center[i] + off[i]);
            (a, BoxParams::new(d, c, e))
        },
    )
}

fn rigid(b: &BoxParams, r: &Rotation3<f64>, t: &Vector3<f64>) -> BoxParams {
    let c = r * b.center_vec() + t;
    let m = r.matrix() * b.rotation().matrix();
    BoxParams::new(b.dims, c.into(), euler_zyx_from_matrix(&m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in pair()) {
        let ab = iou(&a, &b);
        prop_assert!((ab - iou(&b, &a)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        let v = intersection_volume(&a, &b);
        prop_assert!(v <= a.volume().min(b.volume()) * (1.0 + 1e-9));
    }

    #[test]
    fn iog_agrees_with_intersection((a, b) in pair()) {
        let v = intersection_volume(&a, &b);
        prop_assert!((iog(&a, &b) * b.volume() - v).abs() < 1e-9);
        prop_assert!((iog(&b, &a) * a.volume() - v).abs() < 1e-9);
        prop_assert!(f1(iou(&a, &b), iog(&a, &b)) <= 1.0 + 1e-12);
    }

    #[test]
    fn rigid_motion_preserves_overlap((a, b) in pair(), e in angles(), t in prop::array::uniform3(-3.0..3.0f64)) {
        let r = Rotation3::from_euler_angles(e[2], e[1], e[0]);
        let t = Vector3::from(t);
        let (ra, rb) = (rigid(&a, &r, &t), rigid(&b, &r, &t));
        prop_assert!((iou(&a, &b) - iou(&ra, &rb)).abs() < 1e-6);
        prop_assert!((iog(&a, &b) - iog(&ra, &rb)).abs() < 1e-6);
    }

    #[test]
    fn equivalent_parameterizations_are_the_same_box(b in any_box()) {
        for mode in [SymmetryMode::None, SymmetryMode::FullSo3] {
            for alt in enumerate_equivalent_params(&b, mode) {
                prop_assert!((iou(&b, &alt) - 1.0).abs() < 1e-6);
            }
        }
        let yaw_only = BoxParams::with_yaw(b.dims, b.center, b.euler_zyx[0]);
        let alts = enumerate_equivalent_params(&yaw_only, SymmetryMode::Yaw);
        prop_assert_eq!(alts.len(), 4);
        for alt in alts {
            prop_assert!((iou(&yaw_only, &alt) - 1.0).abs() < 1e-6);
            prop_assert_eq!(&alt.euler_zyx[1..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn normalize_round_trip(b in any_box(), s in prop::array::uniform3(0.01..5.0f64), o in prop::array::uniform3(-5.0..5.0f64)) {
        let n = Normalizer::fixed(s, o).unwrap();
        let back = n.denormalize_box(&n.normalize_box(&b));
        for i in 0..3 {
            prop_assert!((back.dims[i] - b.dims[i]).abs() < 1e-9);
            prop_assert!((back.center[i] - b.center[i]).abs() < 1e-9);
            prop_assert_eq!(back.euler_zyx[i], b.euler_zyx[i]);
        }
    }

    #[test]
    fn quaternion_euler_round_trip(e in angles()) {
        let q = Quaternion::from_euler_zyx(e);
        prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        prop_assert!(q.w >= 0.0);
        let back = q.to_euler_zyx();
        for i in 0..3 {
            prop_assert!((back[i] - e[i]).abs() < 1e-9, "{:?} vs {:?}", back, e);
        }
        let r = BoxParams::new([1.0; 3], [0.0; 3], e).rotation();
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        prop_assert!((r.matrix() * r.matrix().transpose() - nalgebra::Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn quantization_error_is_at_most_half_a_bin(
        d in prop::array::uniform3(0.01..0.99f64),
        c in prop::array::uniform3(-0.99..0.99f64),
        e in angles(),
        bins in 2u32..600,
    ) {
        let codec = BoxCodec::new(Normalizer::identity(), Quantizer::with_bins(bins), SymmetryMode::None);
        let b = BoxParams::new(d, c, e).canonical(SymmetryMode::None);
        let qb = codec.quantize(&b);
        prop_assert!(!qb.any_overflow());
        let back = codec.dequantize(&qb).unwrap();
        let (v, w) = (b.to_array(), back.to_array());
        for p in 0..NUM_PARAMS {
            let half = codec.quantizer.bin_width(p) / 2.0;
            prop_assert!((v[p] - w[p]).abs() <= half * (1.0 + 1e-9), "param {} off by {}", p, (v[p] - w[p]).abs());
        }
        prop_assert_eq!(codec.quantize(&back).indices, qb.indices);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_overlap_matches_voxels((a, b) in pair()) {
        let (vi, vg) = voxel_iou_oracle(&a, &b, 128);
        prop_assert!((iou(&a, &b) - vi).abs() <= 0.02);
        prop_assert!((iog(&a, &b) - vg).abs() <= 0.02);
    }

    #[test]
    fn thin_boxes_match_voxels(a in any_box(), thin in 0.01..0.05f64, e in angles()) {
        let b = BoxParams::new([a.dims[0], thin, a.dims[2]], a.center, e);
        let (vi, vg) = voxel_iou_oracle(&a, &b, 128);
        prop_assert!((iou(&a, &b) - vi).abs() <= 0.02);
        prop_assert!((iog(&a, &b) - vg).abs() <= 0.02);
    }
}
