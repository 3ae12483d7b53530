//! Image quality metrics restricted to a mask.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::volume::Volume;

fn check(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<()> {
    a.ensure_same_shape(b)?;
    if let Some(m) = mask {
        a.ensure_same_shape(m)?;
        if !m.data.iter().any(|&v| v > 0.0) {
            return Err(invalid("mask is empty"));
        }
    }
    Ok(())
}

fn in_mask(mask: Option<&Volume>, i: usize) -> bool {
    mask.is_none_or(|m| m.data[i] > 0.0)
}

/// Root mean squared difference over masked voxels.
pub fn rmse(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<f64> {
    check(a, b, mask)?;
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.data.len() {
        if in_mask(mask, i) {
            s += (a.data[i] - b.data[i]).powi(2);
            n += 1;
        }
    }
    Ok((s / n as f64).sqrt())
}

/// `20·log10(data_range / rmse)`; `+∞` for identical inputs.
pub fn psnr(a: &Volume, b: &Volume, mask: Option<&Volume>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(invalid("data_range must be > 0"));
    }
    Ok(psnr_from_rmse(rmse(a, b, mask)?, data_range))
}

pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (data_range / rmse).log10()
    }
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_TAPS] {
    let r = (SSIM_TAPS / 2) as f64;
    let mut w = [0.0; SSIM_TAPS];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable truncated Gaussian smoothing along the active axes.
fn smooth(data: &[f64], shape: [usize; 3], dims: usize, taps: &[f64; SSIM_TAPS]) -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as isize;
    let strides = [1, shape[0], shape[0] * shape[1]];
    let mut cur = data.to_vec();
    for axis in 0..dims {
        let n = shape[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, o) in next.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % shape[axis]) as isize;
            let mut s = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let q = pos + k as isize - r;
                if q >= 0 && q < n {
                    s += w * cur[(i as isize + (q - pos) * strides[axis] as isize) as usize];
                }
            }
            *o = s;
        }
        cur = next;
    }
    cur
}

/// Mean local SSIM (Gaussian window σ = 1.5, 11 taps per axis) over
/// window centers inside the mask. Windows are truncated at the volume
/// boundary and renormalized.
pub fn ssim(a: &Volume, b: &Volume, mask: Option<&Volume>, data_range: f64) -> Result<f64> {
    check(a, b, mask)?;
    if !(data_range > 0.0) {
        return Err(invalid("data_range must be > 0"));
    }
    let shape = a.grid.shape3();
    let dims = a.grid.dims();
    let taps = gaussian_taps();
    let norm = smooth(&vec![1.0; a.data.len()], shape, dims, &taps);
    let local = |v: Vec<f64>| -> Vec<f64> {
        smooth(&v, shape, dims, &taps)
            .into_iter()
            .zip(&norm)
            .map(|(x, n)| x / n)
            .collect()
    };
    let mu_a = local(a.data.clone());
    let mu_b = local(b.data.clone());
    let e_aa = local(a.data.iter().map(|v| v * v).collect());
    let e_bb = local(b.data.iter().map(|v| v * v).collect());
    let e_ab = local(a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.data.len() {
        if !in_mask(mask, i) {
            continue;
        }
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        s += num / den;
        n += 1;
    }
    Ok(s / n as f64)
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else if *v < 0.0 {
        s.serialize_str("-inf")
    } else {
        s.serialize_str("nan")
    }
}

fn de_finite_or_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => Ok(f64::NAN),
        },
    }
}

/// One metrics record; PSNR of identical volumes is written as `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub rmse: f64,
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "de_finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub runtime_seconds: f64,
}

/// RMSE, PSNR and SSIM of `recon` against `reference`, with `data_range`
/// taken as the reference maximum.
pub fn evaluate(method: &str, recon: &Volume, reference: &Volume, mask: Option<&Volume>, runtime_seconds: f64) -> Result<MetricsReport> {
    let range = reference.max();
    let range = if range > 0.0 { range } else { 1.0 };
    let r = rmse(recon, reference, mask)?;
    Ok(MetricsReport {
        method: method.to_string(),
        rmse: r,
        psnr: psnr_from_rmse(r, range),
        ssim: ssim(recon, reference, mask, range)?,
        runtime_seconds,
    })
}
