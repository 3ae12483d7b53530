//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use ctnode::geometry::Geometry;
use ctnode::volume::VolumeGrid;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source point and unit direction of every ray, rebuilt from the scanner
/// description alone (angle-major, then detector row, then column).
pub fn rays(geom: &Geometry) -> Vec<([f64; 3], [f64; 3])> {
    let mut out = Vec::new();
    let (n_angles, rows, cols, sd, dd, pix, h, range) = match geom {
        Geometry::Fan(f) => (
            f.n_angles,
            1,
            f.n_detectors,
            f.source_distance,
            f.detector_distance,
            f.detector_pixel_size,
            0.0,
            f.angular_range,
        ),
        Geometry::Cone(c) => (
            c.n_angles,
            c.detector_rows,
            c.detector_cols,
            c.source_distance,
            c.detector_distance,
            c.detector_pixel_size,
            c.trajectory_height,
            c.angular_range,
        ),
    };
    let cone = matches!(geom, Geometry::Cone(_));
    let full = ((range.1 - range.0) - std::f64::consts::TAU).abs() < 1e-12;
    for a in 0..n_angles {
        let beta = if full {
            range.0 + a as f64 * (range.1 - range.0) / n_angles as f64
        } else if n_angles == 1 {
            range.0
        } else {
            range.0 + a as f64 * (range.1 - range.0) / (n_angles - 1) as f64
        };
        let src = [sd * beta.cos(), sd * beta.sin(), h];
        // detector center opposite the source, u along the tangent
        let center = [-dd * beta.cos(), -dd * beta.sin(), h];
        let tangent = [-beta.sin(), beta.cos()];
        for r in 0..rows {
            let v = if cone { (r as f64 - (rows as f64 - 1.0) / 2.0) * pix } else { 0.0 };
            for c in 0..cols {
                let u = (c as f64 - (cols as f64 - 1.0) / 2.0) * pix;
                let pt = [center[0] + u * tangent[0], center[1] + u * tangent[1], center[2] + v];
                let d = [pt[0] - src[0], pt[1] - src[1], pt[2] - src[2]];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                out.push((src, [d[0] / n, d[1] / n, d[2] / n]));
            }
        }
    }
    out
}

fn hat(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Dense system matrix of Joseph's method written as a sum of tent
/// functions: on every voxel-center plane normal to the dominant ray axis,
/// voxel `v` receives `Δ/|d_drive| · Π hat(f_k − v_k)` over the other axes.
pub fn naive_joseph_matrix(grid: &VolumeGrid, geom: &Geometry) -> DMatrix<f64> {
    let shape = grid.shape3();
    let dims = grid.dims();
    let vs = grid.voxel_size;
    let lo: Vec<f64> = (0..3).map(|k| grid.origin[k] - 0.5 * (shape[k] as f64 - 1.0) * vs).collect();
    let all = rays(geom);
    let mut m = DMatrix::zeros(all.len(), grid.len());
    for (r, (o, d)) in all.iter().enumerate() {
        let mut drive = 0;
        for k in 1..dims {
            if d[k].abs() > d[drive].abs() {
                drive = k;
            }
        }
        let w = vs / d[drive].abs();
        for iz in 0..shape[2] {
            for iy in 0..shape[1] {
                for ix in 0..shape[0] {
                    let idx = [ix, iy, iz];
                    let plane = lo[drive] + idx[drive] as f64 * vs;
                    let t = (plane - o[drive]) / d[drive];
                    let mut val = w;
                    for k in 0..dims {
                        if k != drive {
                            let f = (o[k] + t * d[k] - lo[k]) / vs;
                            val *= hat(f - idx[k] as f64);
                        }
                    }
                    m[(r, ix + shape[0] * (iy + shape[1] * iz))] += val;
                }
            }
        }
    }
    m
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Disk (2D) or ball (3D) with `value` inside, area-weighted by 4×
/// supersampling per axis.
pub fn ball(grid: &VolumeGrid, center: [f64; 3], radius: f64, value: f64) -> ctnode::volume::Volume {
    let shape = grid.shape3();
    let dims = grid.dims();
    let s = 4;
    let mut data = vec![0.0; grid.len()];
    for iz in 0..shape[2] {
        for iy in 0..shape[1] {
            for ix in 0..shape[0] {
                let c = grid.voxel_position(ix, iy, iz);
                let mut hit = 0;
                let zs = if dims == 3 { s } else { 1 };
                for a in 0..s {
                    for b in 0..s {
                        for k in 0..zs {
                            let off = |q: usize| ((q as f64 + 0.5) / s as f64 - 0.5) * grid.voxel_size;
                            let p = [c[0] + off(a), c[1] + off(b), if dims == 3 { c[2] + off(k) } else { 0.0 }];
                            let d2 = (p[0] - center[0]).powi(2)
                                + (p[1] - center[1]).powi(2)
                                + if dims == 3 { (p[2] - center[2]).powi(2) } else { 0.0 };
                            if d2 <= radius * radius {
                                hit += 1;
                            }
                        }
                    }
                }
                data[grid.index(ix, iy, iz)] = value * hit as f64 / (s * s * zs) as f64;
            }
        }
    }
    ctnode::volume::Volume::from_vec(grid, data).unwrap()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}
