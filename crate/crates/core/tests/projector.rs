mod common;

use std::f64::consts::{PI, TAU};

use common::*;
use ctnode::geometry::{ConeGeometry, FanGeometry, Geometry};
use ctnode::projector::{back_project, forward_project, op_norm_estimate, Sinogram};
use ctnode::volume::{Volume, VolumeGrid};
use nalgebra::DVector;
use proptest::prelude::*;

fn fan(n_angles: usize, n_det: usize, pix: f64, range: f64) -> Geometry {
    FanGeometry::new(n_angles, n_det, 40.0, 30.0, range)
        .unwrap()
        .with_pixel_size(pix)
        .unwrap()
        .into()
}

fn cone(n_angles: usize, rows: usize, cols: usize, h: f64) -> Geometry {
    ConeGeometry::new(n_angles, rows, cols, 30.0, 20.0, 1.0, TAU)
        .unwrap()
        .with_trajectory_height(h)
        .into()
}

fn adjoint_mismatch(grid: &VolumeGrid, geom: &Geometry, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Volume::from_vec(grid, random_vec(&mut r, grid.len())).unwrap();
    let y = Sinogram::from_vec(geom, random_vec(&mut r, geom.n_rays())).unwrap();
    let ax = forward_project(&x, geom).unwrap();
    let aty = back_project(&y, grid).unwrap();
    (dot(&ax.data, &y.data) - dot(&x.data, &aty.data)).abs() / (norm(&ax.data) * norm(&y.data))
}

fn check_dense(grid: &VolumeGrid, geom: &Geometry) {
    let m = naive_joseph_matrix(grid, geom);
    assert!(m.iter().any(|&v| v != 0.0));
    let mut r = rng(3);
    for _ in 0..3 {
        let x = random_vec(&mut r, grid.len());
        let want = &m * DVector::from_vec(x.clone());
        let got = forward_project(&Volume::from_vec(grid, x).unwrap(), geom).unwrap();
        assert!(max_abs_diff(&got.data, want.as_slice()) < 1e-10);

        let y = random_vec(&mut r, geom.n_rays());
        let want = m.transpose() * DVector::from_vec(y.clone());
        let got = back_project(&Sinogram::from_vec(geom, y).unwrap(), grid).unwrap();
        assert!(max_abs_diff(&got.data, want.as_slice()) < 1e-10);
    }
}

#[test]
fn matches_dense_tent_matrix_2d() {
    let grid = VolumeGrid::square(8, 1.0).unwrap();
    check_dense(&grid, &fan(7, 13, 1.0, TAU));
    // short scan including its end angle, anisotropic detector sampling
    check_dense(&grid, &fan(5, 9, 1.7, 0.8 * PI));
}

#[test]
fn matches_dense_tent_matrix_3d() {
    let grid = VolumeGrid::cube(4, 1.0).unwrap();
    check_dense(&grid, &cone(5, 6, 7, 0.0));
    check_dense(&grid, &cone(3, 5, 5, 0.7));
}

#[test]
fn matches_dense_tent_matrix_off_center_voxels() {
    let mut grid = VolumeGrid::new(&[6, 5], 0.8).unwrap();
    grid.origin = [0.3, -0.6, 0.0];
    check_dense(&grid, &fan(7, 11, 1.0, TAU));
}

#[test]
fn adjoint_identity_2d_and_3d() {
    let g2 = VolumeGrid::square(24, 1.0).unwrap();
    let f = fan(18, 35, 1.0, TAU);
    let g3 = VolumeGrid::cube(10, 1.0).unwrap();
    let c = cone(9, 8, 12, 0.0);
    for seed in 0..5 {
        assert!(adjoint_mismatch(&g2, &f, seed) < 1e-12);
        assert!(adjoint_mismatch(&g3, &c, seed) < 1e-12);
    }
}

#[test]
fn uniform_disk_central_chord() {
    // central ray through a disk of radius R sees 2R·μ
    let n = 64;
    let grid = VolumeGrid::square(n, 1.0).unwrap();
    let (r0, mu) = (20.0, 0.02);
    let data = (0..n * n)
        .map(|i| {
            let (x, y) = (grid.center(0, i % n), grid.center(1, i / n));
            if x * x + y * y <= r0 * r0 {
                mu
            } else {
                0.0
            }
        })
        .collect();
    let x = Volume::from_vec(&grid, data).unwrap();
    let geom: Geometry = FanGeometry::new(12, 65, 200.0, 100.0, TAU).unwrap().into();
    let p = forward_project(&x, &geom).unwrap();
    for a in 0..12 {
        let central = p.projection(a)[32];
        assert!((central - 2.0 * r0 * mu).abs() < 0.05 * 2.0 * r0 * mu, "{central}");
    }
}

#[test]
fn empty_geometry_misses_are_zero() {
    let grid = VolumeGrid::square(8, 1.0).unwrap();
    // detector pixels far beyond the grid shadow
    let geom: Geometry = FanGeometry::new(4, 3, 40.0, 40.0, TAU)
        .unwrap()
        .with_pixel_size(60.0)
        .unwrap()
        .into();
    let p = forward_project(&Volume::filled(&grid, 1.0), &geom).unwrap();
    for a in 0..4 {
        let row = p.projection(a);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[2], 0.0);
        assert!(row[1] > 0.0);
    }
}

#[test]
fn op_norm_matches_dense_singular_value() {
    let grid = VolumeGrid::square(8, 1.0).unwrap();
    let geom = fan(7, 13, 1.0, TAU);
    let m = naive_joseph_matrix(&grid, &geom);
    let sigma = m.clone().svd(false, false).singular_values.max();
    let est = op_norm_estimate(&geom, &grid, 100).unwrap();
    assert!(est <= sigma * (1.0 + 1e-12));
    assert!((est - sigma).abs() < 1e-6 * sigma, "{est} vs {sigma}");
    let short = op_norm_estimate(&geom, &grid, 3).unwrap();
    assert!(short <= est * (1.0 + 1e-12));
}

#[test]
fn mismatched_dims_rejected() {
    let g3 = VolumeGrid::cube(4, 1.0).unwrap();
    let x = Volume::zeros(&g3);
    assert!(forward_project(&x, &fan(4, 5, 1.0, TAU)).is_err());
    let y = Sinogram::zeros(&fan(4, 5, 1.0, TAU));
    assert!(back_project(&y, &g3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_holds_for_random_fans(
        n in 3usize..12,
        n_angles in 1usize..9,
        n_det in 1usize..20,
        pix in 0.3f64..3.0,
        range in 0.5f64..TAU,
        seed in 0u64..1000,
    ) {
        let grid = VolumeGrid::new(&[n, n + 1], 1.0).unwrap();
        let geom = fan(n_angles, n_det, pix, range);
        prop_assert!(adjoint_mismatch(&grid, &geom, seed) < 1e-12);
    }

    #[test]
    fn forward_is_linear_and_nonnegative(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grid = VolumeGrid::cube(5, 1.0).unwrap();
        let geom = cone(4, 5, 6, 0.3);
        let mut r = rng(seed);
        let x = random_vec(&mut r, grid.len());
        let y = random_vec(&mut r, grid.len());
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let ax = forward_project(&Volume::from_vec(&grid, x.clone()).unwrap(), &geom).unwrap();
        let ay = forward_project(&Volume::from_vec(&grid, y).unwrap(), &geom).unwrap();
        let ac = forward_project(&Volume::from_vec(&grid, combo).unwrap(), &geom).unwrap();
        for i in 0..ac.data.len() {
            let want = a * ax.data[i] + b * ay.data[i];
            prop_assert!((ac.data[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
        let pos: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let ap = forward_project(&Volume::from_vec(&grid, pos).unwrap(), &geom).unwrap();
        prop_assert!(ap.data.iter().all(|&v| v >= 0.0));
    }
}
