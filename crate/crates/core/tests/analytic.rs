mod common;

use std::f64::consts::{PI, TAU};

use common::*;
use ctnode::analytic::{analytic_reconstruct, fbp_fan, fdk_cone, ram_lak_tap, ramp_filter, Window};
use ctnode::geometry::{ConeGeometry, FanGeometry, Geometry};
use ctnode::projector::{forward_project, Sinogram};
use ctnode::volume::{Volume, VolumeGrid};

fn interior_mean(v: &Volume, radius: f64, z: f64) -> f64 {
    let [nx, ny, nz] = v.grid.shape3();
    let (mut s, mut n) = (0.0, 0);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = v.grid.voxel_position(ix, iy, iz);
                if p[0].hypot(p[1]) < radius && (v.grid.dims() == 2 || (p[2] - z).abs() < 0.5 * v.grid.voxel_size) {
                    s += v.get(ix, iy, iz);
                    n += 1;
                }
            }
        }
    }
    s / n as f64
}

fn disk_fan(n_angles: usize) -> Geometry {
    FanGeometry::new(n_angles, 367, 500.0, 500.0, TAU)
        .unwrap()
        .with_pixel_size(2.0)
        .unwrap()
        .into()
}

#[test]
fn ramp_impulse_and_constant_rows() {
    let n = 33;
    let mut row = vec![0.0; n];
    row[16] = 1.0;
    let out = ramp_filter(&row, 0.5, Window::RamLak);
    assert_eq!(out.len(), n);
    for (j, v) in out.iter().enumerate() {
        let k = j as isize - 16;
        let want = if k == 0 {
            1.0 / (4.0 * 0.25)
        } else if k % 2 == 0 {
            0.0
        } else {
            -1.0 / (PI * PI * (k * k) as f64 * 0.25)
        };
        assert!((v - want).abs() < 1e-12, "k={k}: {v} vs {want}");
        assert_eq!(ram_lak_tap(k, 0.5), want);
    }
    assert!(ramp_filter(&[0.0; 17], 1.0, Window::Hann).iter().all(|&v| v == 0.0));

    // DC suppression grows with row length; the 1e-3 level needs ~1000 taps
    let mean = |len: usize| {
        let out = ramp_filter(&vec![2.0; len], 1.0, Window::RamLak);
        (out.iter().sum::<f64>() / len as f64).abs() / 2.0
    };
    let (m64, m256, m1024) = (mean(64), mean(256), mean(1024));
    assert!(m64 > m256 && m256 > m1024);
    assert!(m1024 < 1e-3, "{m1024}");
}

#[test]
fn ramp_is_linear_and_shift_invariant() {
    let mut r = rng(5);
    let a = random_vec(&mut r, 40);
    let b = random_vec(&mut r, 40);
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - y).collect();
    let (fa, fb, fs) = (
        ramp_filter(&a, 1.3, Window::Hann),
        ramp_filter(&b, 1.3, Window::Hann),
        ramp_filter(&sum, 1.3, Window::Hann),
    );
    for i in 0..40 {
        assert!((fs[i] - (2.0 * fa[i] - fb[i])).abs() < 1e-12);
    }
    let mut imp = vec![0.0; 64];
    imp[20] = 1.0;
    let f1 = ramp_filter(&imp, 1.0, Window::Hann);
    imp[20] = 0.0;
    imp[27] = 1.0;
    let f2 = ramp_filter(&imp, 1.0, Window::Hann);
    for j in 0..40 {
        assert!((f1[j] - f2[j + 7]).abs() < 1e-12);
    }
}

#[test]
fn zero_inputs_give_zero_volumes() {
    let g2 = VolumeGrid::square(16, 1.0).unwrap();
    let p = Sinogram::zeros(&disk_fan(10));
    assert!(fbp_fan(&p, &g2, Window::RamLak).unwrap().data.iter().all(|&v| v == 0.0));
    let g3 = VolumeGrid::cube(8, 1.0).unwrap();
    let c: Geometry = ConeGeometry::new(6, 8, 8, 50.0, 50.0, 2.0, TAU).unwrap().into();
    let p = Sinogram::zeros(&c);
    assert!(fdk_cone(&p, &g3, Window::Hann).unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn geometry_type_mismatch_rejected() {
    let g2 = VolumeGrid::square(8, 1.0).unwrap();
    let g3 = VolumeGrid::cube(8, 1.0).unwrap();
    let c: Geometry = ConeGeometry::new(6, 8, 8, 50.0, 50.0, 2.0, TAU).unwrap().into();
    assert!(fbp_fan(&Sinogram::zeros(&c), &g3, Window::Hann).is_err());
    assert!(fdk_cone(&Sinogram::zeros(&disk_fan(4)), &g2, Window::Hann).is_err());
}

#[test]
fn uniform_disk_dense_and_sparse_view() {
    let grid = VolumeGrid::square(256, 1.0).unwrap();
    let truth = ball(&grid, [0.0; 3], 0.2 * 128.0, 0.02);
    let dense = fbp_fan(&forward_project(&truth, &disk_fan(360)).unwrap(), &grid, Window::RamLak).unwrap();
    let m = interior_mean(&dense, 0.8 * 0.2 * 128.0, 0.0);
    assert!((m - 0.02).abs() < 0.05 * 0.02, "interior mean {m}");

    let sparse = fbp_fan(&forward_project(&truth, &disk_fan(30)).unwrap(), &grid, Window::RamLak).unwrap();
    assert!(rmse(&sparse.data, &truth.data) > rmse(&dense.data, &truth.data));
}

#[test]
fn fdk_centered_ball() {
    let grid = VolumeGrid::cube(64, 1.0).unwrap();
    let truth = ball(&grid, [0.0; 3], 12.0, 0.03);
    let geom: Geometry = ConeGeometry::new(120, 48, 48, 128.0, 128.0, 2.0, TAU).unwrap().into();
    let rec = fdk_cone(&forward_project(&truth, &geom).unwrap(), &grid, Window::RamLak).unwrap();
    // voxel centers sit at ±0.5 mm around the midplane
    let m = interior_mean(&rec, 0.8 * 12.0, 0.5);
    assert!((m - 0.03).abs() < 0.1 * 0.03, "central-slice mean {m}");
}

/// Flat cylinders of radius 14 mm and 4 mm height centered at each `zc`.
fn slabs(grid: &VolumeGrid, zcs: &[f64], value: f64) -> Volume {
    let mut v = Volume::zeros(grid);
    let [nx, ny, nz] = grid.shape3();
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = grid.voxel_position(ix, iy, iz);
                if p[0].hypot(p[1]) <= 14.0 && zcs.iter().any(|zc| (p[2] - zc).abs() <= 2.0) {
                    v.data[grid.index(ix, iy, iz)] = value;
                }
            }
        }
    }
    v
}

#[test]
fn fdk_off_midplane_error_is_larger() {
    let grid = VolumeGrid::cube(48, 1.0).unwrap();
    // slab through the midplane (slice 24 sits at z = 0.5) and one near the top
    let truth = slabs(&grid, &[0.5, 18.5], 0.03);
    let geom: Geometry = ConeGeometry::new(90, 64, 64, 60.0, 60.0, 2.0, TAU).unwrap().into();
    let rec = fdk_cone(&forward_project(&truth, &geom).unwrap(), &grid, Window::RamLak).unwrap();
    let slice_err = |iz: usize| {
        let (_, _, a) = rec.slice(2, iz);
        let (_, _, b) = truth.slice(2, iz);
        rmse(&a, &b)
    };
    let (top, mid) = (slice_err(42), slice_err(24));
    assert!(top > mid, "top {top} vs mid {mid}");
}

#[test]
fn pipeline_is_linear() {
    let grid = VolumeGrid::square(32, 1.0).unwrap();
    let geom: Geometry = FanGeometry::new(20, 60, 80.0, 60.0, TAU).unwrap().into();
    let mut r = rng(9);
    let a = Sinogram::from_vec(&geom, random_vec(&mut r, geom.n_rays())).unwrap();
    let b = Sinogram::from_vec(&geom, random_vec(&mut r, geom.n_rays())).unwrap();
    let c = Sinogram::from_vec(&geom, a.data.iter().zip(&b.data).map(|(x, y)| 3.0 * x + 0.5 * y).collect()).unwrap();
    let (ra, rb, rc) = (
        fbp_fan(&a, &grid, Window::Hann).unwrap(),
        fbp_fan(&b, &grid, Window::Hann).unwrap(),
        fbp_fan(&c, &grid, Window::Hann).unwrap(),
    );
    let want: Vec<f64> = ra.data.iter().zip(&rb.data).map(|(x, y)| 3.0 * x + 0.5 * y).collect();
    assert!(max_abs_diff(&rc.data, &want) < 1e-10 * norm(&want));
}

#[test]
fn single_row_fdk_equals_fbp() {
    let g2 = VolumeGrid::square(24, 1.0).unwrap();
    let g3 = VolumeGrid::new(&[24, 24, 1], 1.0).unwrap();
    let fan: Geometry = FanGeometry::new(36, 50, 70.0, 50.0, TAU)
        .unwrap()
        .with_pixel_size(1.2)
        .unwrap()
        .into();
    let cone: Geometry = ConeGeometry::new(36, 1, 50, 70.0, 50.0, 1.2, TAU).unwrap().into();
    let mut r = rng(2);
    let data = random_vec(&mut r, fan.n_rays());
    let f = fbp_fan(&Sinogram::from_vec(&fan, data.clone()).unwrap(), &g2, Window::RamLak).unwrap();
    let c = fdk_cone(&Sinogram::from_vec(&cone, data).unwrap(), &g3, Window::RamLak).unwrap();
    assert!(max_abs_diff(&f.data, &c.data) < 1e-8 * f.data.iter().fold(0.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn midplane_fdk_close_to_fbp() {
    let g2 = VolumeGrid::square(48, 1.0).unwrap();
    let g3 = VolumeGrid::new(&[48, 48, 9], 1.0).unwrap();
    let disk = ball(&g2, [4.0, -3.0, 0.0], 14.0, 0.03);
    // odd row count: one detector row lies in the midplane
    let mut truth3 = Volume::zeros(&g3);
    for i in 0..48 * 48 {
        truth3.data[4 * 48 * 48 + i] = disk.data[i];
    }
    let fan: Geometry = FanGeometry::new(60, 90, 100.0, 100.0, TAU).unwrap().with_pixel_size(1.5).unwrap().into();
    let cone: Geometry = ConeGeometry::new(60, 17, 90, 100.0, 100.0, 1.5, TAU).unwrap().into();
    let r2 = fbp_fan(&forward_project(&disk, &fan).unwrap(), &g2, Window::RamLak).unwrap();
    let r3 = analytic_reconstruct(&forward_project(&truth3, &cone).unwrap(), &g3, Window::RamLak).unwrap();
    let (_, _, mid) = r3.slice(2, 4);
    let e3 = rmse(&mid, &disk.data);
    let e2 = rmse(&r2.data, &disk.data);
    assert!(e3 < 1.5 * e2, "fdk {e3} vs fbp {e2}");
}
