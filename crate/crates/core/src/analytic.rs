//! Analytic reconstruction: fan-beam FBP and cone-beam FDK.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{ConeGeometry, FanGeometry, Geometry};
use crate::par;
use crate::projector::Sinogram;
use crate::volume::{Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    #[default]
    #[serde(rename = "ram-lak")]
    RamLak,
    #[serde(rename = "hann")]
    Hann,
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ram-lak" | "ramlak" => Ok(Window::RamLak),
            "hann" => Ok(Window::Hann),
            _ => Err(format!("unknown window '{s}' (expected ram-lak or hann)")),
        }
    }
}

/// Discrete Ram-Lak tap at integer offset `k`.
pub fn ram_lak_tap(k: isize, pixel_size: f64) -> f64 {
    let d2 = pixel_size * pixel_size;
    if k == 0 {
        0.25 / d2
    } else if k % 2 == 0 {
        0.0
    } else {
        -1.0 / (std::f64::consts::PI.powi(2) * (k * k) as f64 * d2)
    }
}

/// Precomputed ramp filter for rows of fixed length.
///
/// The kernel is the exact spatial Ram-Lak sequence, transformed on a
/// zero-padded grid at least twice the row length so the circular FFT
/// convolution equals the linear one.
pub struct RampFilter {
    len: usize,
    response: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(len: usize, pixel_size: f64, window: Window) -> Self {
        let n_fft = (2 * len.max(1)).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_fft);
        let inv = planner.plan_fft_inverse(n_fft);
        let mut kernel = vec![Complex::new(0.0, 0.0); n_fft];
        for k in -(len as isize - 1)..=(len as isize - 1) {
            kernel[k.rem_euclid(n_fft as isize) as usize].re = ram_lak_tap(k, pixel_size);
        }
        fwd.process(&mut kernel);
        if window == Window::Hann {
            for (i, h) in kernel.iter_mut().enumerate() {
                let f = i.min(n_fft - i) as f64 / n_fft as f64;
                *h *= 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos());
            }
        }
        // fold the inverse-FFT normalization into the response
        let scale = 1.0 / n_fft as f64;
        kernel.iter_mut().for_each(|h| *h *= scale);
        Self {
            len,
            response: kernel,
            fwd,
            inv,
        }
    }

    /// Filters `row` in place.
    pub fn apply(&self, row: &mut [f64]) {
        assert_eq!(row.len(), self.len, "ramp filter built for a different length");
        let mut buf = vec![Complex::new(0.0, 0.0); self.response.len()];
        for (b, &r) in buf.iter_mut().zip(row.iter()) {
            b.re = r;
        }
        self.fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inv.process(&mut buf);
        for (r, b) in row.iter_mut().zip(&buf) {
            *r = b.re;
        }
    }
}

/// Convolves one detector row with the (optionally apodized) ramp kernel.
pub fn ramp_filter(row: &[f64], pixel_size: f64, window: Window) -> Vec<f64> {
    let mut out = row.to_vec();
    RampFilter::new(row.len(), pixel_size, window).apply(&mut out);
    out
}

/// Linear interpolation into `row` at continuous index `f`, zero outside.
#[inline]
fn lerp(row: &[f64], f: f64) -> f64 {
    if !(f > -1.0 && f < row.len() as f64) {
        return 0.0;
    }
    let j0 = f.floor() as isize;
    let w = f - j0 as f64;
    let mut v = 0.0;
    if j0 >= 0 {
        v += (1.0 - w) * row[j0 as usize];
    }
    if ((j0 + 1) as usize) < row.len() && w > 0.0 {
        v += w * row[(j0 + 1) as usize];
    }
    v
}

/// Filtered projections rescaled to a virtual detector through the
/// isocenter. Returns (filtered data, virtual pixel size).
fn filter_projections(
    p: &Sinogram,
    rows: usize,
    cols: usize,
    source_distance: f64,
    detector_distance: f64,
    pixel_size: f64,
    window: Window,
) -> (Vec<f64>, f64) {
    let mag = (source_distance + detector_distance) / source_distance;
    let du = pixel_size / mag;
    let filter = RampFilter::new(cols, du, window);
    let ds2 = source_distance * source_distance;
    let mut q = p.data.clone();
    par::for_each_chunk_mut(&mut q, cols, |r, row| {
        let v = ((r % rows) as f64 - 0.5 * (rows as f64 - 1.0)) * du;
        for (j, e) in row.iter_mut().enumerate() {
            let u = (j as f64 - 0.5 * (cols as f64 - 1.0)) * du;
            *e *= source_distance / (ds2 + u * u + v * v).sqrt();
        }
        filter.apply(row);
        row.iter_mut().for_each(|e| *e *= du);
    });
    (q, du)
}

fn check_fan(p: &Sinogram, grid: &VolumeGrid) -> Result<FanGeometry> {
    match &p.geom {
        Geometry::Fan(g) if grid.dims() == 2 => Ok(g.clone()),
        Geometry::Fan(_) => Err(invalid("fan-beam FBP needs a 2D grid")),
        Geometry::Cone(_) => Err(invalid("fbp_fan needs a fan-beam sinogram")),
    }
}

fn check_cone(p: &Sinogram, grid: &VolumeGrid) -> Result<ConeGeometry> {
    match &p.geom {
        Geometry::Cone(g) if grid.dims() == 3 => Ok(g.clone()),
        Geometry::Cone(_) => Err(invalid("FDK needs a 3D grid")),
        Geometry::Fan(_) => Err(invalid("fdk_cone needs a cone-beam sinogram")),
    }
}

/// Fan-beam filtered backprojection for flat detectors, full 360° scans.
pub fn fbp_fan(p: &Sinogram, grid: &VolumeGrid, window: Window) -> Result<Volume> {
    let g = check_fan(p, grid)?;
    let (q, du) = filter_projections(
        p,
        1,
        g.n_detectors,
        g.source_distance,
        g.detector_distance,
        g.detector_pixel_size,
        window,
    );
    let ds = g.source_distance;
    let half = 0.5 * (g.n_detectors as f64 - 1.0);
    let trig: Vec<(f64, f64)> = (0..g.n_angles).map(|i| g.angle(i).sin_cos()).collect();
    let scale = 0.5 * g.angular_increment();
    let nx = grid.nx();
    let mut out = Volume::zeros(grid);
    par::for_each_chunk_mut(&mut out.data, nx, |iy, row| {
        let y = grid.center(1, iy);
        for (ix, v) in row.iter_mut().enumerate() {
            let x = grid.center(0, ix);
            let mut acc = 0.0;
            for (a, &(s, c)) in trig.iter().enumerate() {
                let l = ds - (x * c + y * s);
                let u = ds * (-x * s + y * c) / l;
                let mag = ds / l;
                let proj = &q[a * g.n_detectors..(a + 1) * g.n_detectors];
                acc += mag * mag * lerp(proj, u / du + half);
            }
            // +0.0 normalizes negative zeros
            *v = acc * scale + 0.0;
        }
    });
    Ok(out)
}

/// Feldkamp-Davis-Kress reconstruction on a circular cone-beam orbit.
pub fn fdk_cone(p: &Sinogram, grid: &VolumeGrid, window: Window) -> Result<Volume> {
    let g = check_cone(p, grid)?;
    let (rows, cols) = (g.detector_rows, g.detector_cols);
    let (q, du) = filter_projections(
        p,
        rows,
        cols,
        g.source_distance,
        g.detector_distance,
        g.detector_pixel_size,
        window,
    );
    let ds = g.source_distance;
    let (hu, hv) = (0.5 * (cols as f64 - 1.0), 0.5 * (rows as f64 - 1.0));
    let trig: Vec<(f64, f64)> = (0..g.n_angles).map(|i| g.angle(i).sin_cos()).collect();
    let scale = 0.5 * g.angular_increment();
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = Volume::zeros(grid);
    par::for_each_chunk_mut(&mut out.data, nx * ny, |iz, slab| {
        let z = grid.center(2, iz) - g.trajectory_height;
        for iy in 0..ny {
            let y = grid.center(1, iy);
            for ix in 0..nx {
                let x = grid.center(0, ix);
                let mut acc = 0.0;
                for (a, &(s, c)) in trig.iter().enumerate() {
                    let l = ds - (x * c + y * s);
                    let mag = ds / l;
                    let fu = mag * (-x * s + y * c) / du + hu;
                    let fv = mag * z / du + hv;
                    if !(fv > -1.0 && fv < rows as f64) {
                        continue;
                    }
                    let proj = &q[a * rows * cols..(a + 1) * rows * cols];
                    let r0 = fv.floor() as isize;
                    let w = fv - r0 as f64;
                    let mut val = 0.0;
                    if r0 >= 0 {
                        let r = r0 as usize;
                        val += (1.0 - w) * lerp(&proj[r * cols..(r + 1) * cols], fu);
                    }
                    if ((r0 + 1) as usize) < rows && w > 0.0 {
                        let r = (r0 + 1) as usize;
                        val += w * lerp(&proj[r * cols..(r + 1) * cols], fu);
                    }
                    acc += mag * mag * val;
                }
                slab[iy * nx + ix] = acc * scale + 0.0;
            }
        }
    });
    Ok(out)
}

/// FBP or FDK depending on the sinogram's geometry.
pub fn analytic_reconstruct(p: &Sinogram, grid: &VolumeGrid, window: Window) -> Result<Volume> {
    match p.geom {
        Geometry::Fan(_) => fbp_fan(p, grid, window),
        Geometry::Cone(_) => fdk_cone(p, grid, window),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_row() {
        let out = ramp_filter(&[0.0; 17], 0.7, Window::Hann);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_gives_closed_form_taps() {
        let n = 33;
        let d = 0.8;
        let mut row = vec![0.0; n];
        row[16] = 1.0;
        let out = ramp_filter(&row, d, Window::RamLak);
        assert!((out[16] - 1.0 / (4.0 * d * d)).abs() < 1e-12);
        for k in 1..=16usize {
            let want = if k % 2 == 0 {
                0.0
            } else {
                -1.0 / (std::f64::consts::PI.powi(2) * (k * k) as f64 * d * d)
            };
            assert!((out[16 + k] - want).abs() < 1e-12, "tap {k}");
            assert!((out[16 - k] - want).abs() < 1e-12, "tap -{k}");
        }
    }

    #[test]
    fn hann_attenuates_high_frequencies() {
        let row: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let sharp = ramp_filter(&row, 1.0, Window::RamLak);
        let soft = ramp_filter(&row, 1.0, Window::Hann);
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(e(&soft) < 0.1 * e(&sharp));
    }

    #[test]
    fn window_parse() {
        assert_eq!("hann".parse::<Window>().unwrap(), Window::Hann);
        assert!("cosine".parse::<Window>().is_err());
    }
}
