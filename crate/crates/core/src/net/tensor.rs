//! Channel-major feature maps and the per-layer kernels (forward + VJP).

use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Periodic,
}

/// `channels × nz × ny × nx`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn spatial(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Source index for a kernel offset, or `None` when it lands in zero padding.
#[inline]
fn wrap(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else if padding == Padding::Periodic {
        Some(i.rem_euclid(n as isize) as usize)
    } else {
        None
    }
}

/// Visits every (dst_row, src_row, dx) triple of one kernel tap: `dst` rows
/// are output positions, `src` rows the input rows shifted by `(dy, dz)`.
#[inline]
fn for_each_row_pair<F: FnMut(usize, usize)>(shape: [usize; 3], dy: isize, dz: isize, padding: Padding, mut f: F) {
    let [_, ny, nz] = shape;
    for z in 0..nz {
        let Some(zs) = wrap(z as isize + dz, nz, padding) else { continue };
        for y in 0..ny {
            let Some(ys) = wrap(y as isize + dy, ny, padding) else { continue };
            f(z * ny + y, zs * ny + ys);
        }
    }
}

/// `dst[x] += w · src[x + dx]` over one row.
#[inline]
fn row_gather(dst: &mut [f64], src: &[f64], dx: isize, w: f64, padding: Padding) {
    let n = dst.len() as isize;
    let lo = (-dx).max(0);
    let hi = (n - dx).min(n);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s = &src[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        for (d, v) in dst[lo..hi].iter_mut().zip(s) {
            *d += w * v;
        }
    }
    if padding == Padding::Periodic {
        for x in (0..lo.max(0).min(n)).chain(hi.max(0)..n) {
            let xs = (x + dx).rem_euclid(n) as usize;
            dst[x as usize] += w * src[xs];
        }
    }
}

/// Transpose of [`row_gather`]: `gsrc[x + dx] += w · gdst[x]`.
#[inline]
fn row_scatter(gsrc: &mut [f64], gdst: &[f64], dx: isize, w: f64, padding: Padding) {
    let n = gdst.len() as isize;
    let lo = (-dx).max(0);
    let hi = (n - dx).min(n);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s = &mut gsrc[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        for (d, v) in s.iter_mut().zip(&gdst[lo..hi]) {
            *d += w * v;
        }
    }
    if padding == Padding::Periodic {
        for x in (0..lo.max(0).min(n)).chain(hi.max(0)..n) {
            let xs = (x + dx).rem_euclid(n) as usize;
            gsrc[xs] += w * gdst[x as usize];
        }
    }
}

/// `Σ_x a[x] · b[x + dx]` over valid positions.
#[inline]
fn row_corr(a: &[f64], b: &[f64], dx: isize, padding: Padding) -> f64 {
    let n = a.len() as isize;
    let lo = (-dx).max(0);
    let hi = (n - dx).min(n);
    let mut s = 0.0;
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let bs = &b[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        s += a[lo..hi].iter().zip(bs).map(|(x, y)| x * y).sum::<f64>();
    }
    if padding == Padding::Periodic {
        for x in (0..lo.max(0).min(n)).chain(hi.max(0)..n) {
            s += a[x as usize] * b[(x + dx).rem_euclid(n) as usize];
        }
    }
    s
}

/// Kernel geometry: taps per axis and their offsets.
#[derive(Clone, Copy, Debug)]
pub struct KernelShape {
    pub k: usize,
    pub dims: usize,
}

impl KernelShape {
    pub fn volume(&self) -> usize {
        self.k.pow(self.dims as u32)
    }

    /// `(dx, dy, dz)` for flat tap index `t` (x fastest).
    #[inline]
    fn offset(&self, t: usize) -> (isize, isize, isize) {
        let r = (self.k / 2) as isize;
        let k = self.k;
        let dx = (t % k) as isize - r;
        let dy = ((t / k) % k) as isize - r;
        let dz = if self.dims == 3 { (t / (k * k)) as isize - r } else { 0 };
        (dx, dy, dz)
    }
}

/// Same-size convolution (cross-correlation). `weight` is
/// `[cout][cin][tap]`, `bias` is `[cout]`.
pub fn conv_forward(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    ks: KernelShape,
    padding: Padding,
) -> Tensor {
    let cin = input.channels;
    let taps = ks.volume();
    let n = input.spatial();
    let nx = input.shape[0];
    let mut out = Tensor::zeros(cout, input.shape);
    par::for_each_chunk_mut(&mut out.data, n, |co, dst| {
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let src = input.channel(ci);
            for t in 0..taps {
                let w = weight[(co * cin + ci) * taps + t];
                if w == 0.0 {
                    continue;
                }
                let (dx, dy, dz) = ks.offset(t);
                for_each_row_pair(input.shape, dy, dz, padding, |rd, rs| {
                    row_gather(
                        &mut dst[rd * nx..(rd + 1) * nx],
                        &src[rs * nx..(rs + 1) * nx],
                        dx,
                        w,
                        padding,
                    );
                });
            }
        }
    });
    out
}

/// VJP of [`conv_forward`]. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv_vjp(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    ks: KernelShape,
    padding: Padding,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cin = input.channels;
    let cout = grad_out.channels;
    let taps = ks.volume();
    let n = input.spatial();
    let nx = input.shape[0];

    let mut grad_in = Tensor::zeros(cin, input.shape);
    par::for_each_chunk_mut(&mut grad_in.data, n, |ci, gsrc| {
        for co in 0..cout {
            let gdst = grad_out.channel(co);
            for t in 0..taps {
                let w = weight[(co * cin + ci) * taps + t];
                if w == 0.0 {
                    continue;
                }
                let (dx, dy, dz) = ks.offset(t);
                for_each_row_pair(input.shape, dy, dz, padding, |rd, rs| {
                    row_scatter(
                        &mut gsrc[rs * nx..(rs + 1) * nx],
                        &gdst[rd * nx..(rd + 1) * nx],
                        dx,
                        w,
                        padding,
                    );
                });
            }
        }
    });

    let mut grad_w = vec![0.0; cout * cin * taps];
    par::for_each_chunk_mut(&mut grad_w, cin * taps, |co, gw| {
        let gdst = grad_out.channel(co);
        for ci in 0..cin {
            let src = input.channel(ci);
            for t in 0..taps {
                let (dx, dy, dz) = ks.offset(t);
                let mut s = 0.0;
                for_each_row_pair(input.shape, dy, dz, padding, |rd, rs| {
                    s += row_corr(&gdst[rd * nx..(rd + 1) * nx], &src[rs * nx..(rs + 1) * nx], dx, padding);
                });
                gw[ci * taps + t] = s;
            }
        }
    });
    let grad_b = (0..cout).map(|co| grad_out.channel(co).iter().sum()).collect();
    (grad_in, grad_w, grad_b)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Subgradient 0 at exactly 0.
pub fn relu_vjp(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data.iter_mut().zip(&input.data) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

fn halved(shape: [usize; 3], dims: usize) -> [usize; 3] {
    let mut s = shape;
    for d in s.iter_mut().take(dims) {
        *d /= 2;
    }
    s
}

fn doubled(shape: [usize; 3], dims: usize) -> [usize; 3] {
    let mut s = shape;
    for d in s.iter_mut().take(dims) {
        *d *= 2;
    }
    s
}

/// Parent cell of fine position `(x, y, z)`.
#[inline]
fn coarse_index(x: usize, y: usize, z: usize, coarse: [usize; 3], dims: usize) -> usize {
    let zc = if dims == 3 { z / 2 } else { z };
    (zc * coarse[1] + y / 2) * coarse[0] + x / 2
}

/// 2× average pooling over the active dims; sides must be even.
pub fn pool_forward(input: &Tensor, dims: usize) -> Tensor {
    let coarse = halved(input.shape, dims);
    let mut out = Tensor::zeros(input.channels, coarse);
    let cells = (1usize << dims) as f64;
    let [nx, ny, nz] = input.shape;
    let nc = out.spatial();
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = &mut out.data[c * nc..(c + 1) * nc];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    dst[coarse_index(x, y, z, coarse, dims)] += src[(z * ny + y) * nx + x] / cells;
                }
            }
        }
    }
    out
}

pub fn pool_vjp(fine_shape: [usize; 3], grad_out: &Tensor, dims: usize) -> Tensor {
    let coarse = grad_out.shape;
    let mut g = Tensor::zeros(grad_out.channels, fine_shape);
    let cells = (1usize << dims) as f64;
    let [nx, ny, nz] = fine_shape;
    let nf = g.spatial();
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = &mut g.data[c * nf..(c + 1) * nf];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    dst[(z * ny + y) * nx + x] = src[coarse_index(x, y, z, coarse, dims)] / cells;
                }
            }
        }
    }
    g
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_forward(input: &Tensor, dims: usize) -> Tensor {
    let fine = doubled(input.shape, dims);
    let mut out = Tensor::zeros(input.channels, fine);
    let [nx, ny, nz] = fine;
    let nf = out.spatial();
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = &mut out.data[c * nf..(c + 1) * nf];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    dst[(z * ny + y) * nx + x] = src[coarse_index(x, y, z, input.shape, dims)];
                }
            }
        }
    }
    out
}

pub fn upsample_vjp(coarse_shape: [usize; 3], grad_out: &Tensor, dims: usize) -> Tensor {
    let mut g = Tensor::zeros(grad_out.channels, coarse_shape);
    let [nx, ny, nz] = grad_out.shape;
    let nc = g.spatial();
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = &mut g.data[c * nc..(c + 1) * nc];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    dst[coarse_index(x, y, z, coarse_shape, dims)] += src[(z * ny + y) * nx + x];
                }
            }
        }
    }
    g
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        shape: a.shape,
        data,
    }
}

/// Splits a gradient of `[a, b]` back into its parts.
pub fn split(g: &Tensor, a_channels: usize) -> (Tensor, Tensor) {
    let cut = a_channels * g.spatial();
    (
        Tensor {
            channels: a_channels,
            shape: g.shape,
            data: g.data[..cut].to_vec(),
        },
        Tensor {
            channels: g.channels - a_channels,
            shape: g.shape,
            data: g.data[cut..].to_vec(),
        },
    )
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn channel_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, (var + INSTANCE_NORM_EPS).sqrt())
}

/// Per-channel normalization with learned affine `scale`, `shift`.
pub fn instance_norm_forward(input: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let mut out = input.clone();
    let n = input.spatial();
    for c in 0..input.channels {
        let (mean, sd) = channel_stats(input.channel(c));
        for v in &mut out.data[c * n..(c + 1) * n] {
            *v = scale[c] * (*v - mean) / sd + shift[c];
        }
    }
    out
}

/// Returns `(grad_input, grad_scale, grad_shift)`.
pub fn instance_norm_vjp(input: &Tensor, scale: &[f64], grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = input.spatial();
    let nf = n as f64;
    let mut gin = Tensor::zeros(input.channels, input.shape);
    let mut gscale = vec![0.0; input.channels];
    let mut gshift = vec![0.0; input.channels];
    for c in 0..input.channels {
        let x = input.channel(c);
        let g = grad_out.channel(c);
        let (mean, sd) = channel_stats(x);
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
        gscale[c] = g.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        gshift[c] = g.iter().sum();
        let gh: Vec<f64> = g.iter().map(|v| v * scale[c]).collect();
        let m1 = gh.iter().sum::<f64>() / nf;
        let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
        for (i, o) in gin.data[c * n..(c + 1) * n].iter_mut().enumerate() {
            *o = (gh[i] - m1 - xhat[i] * m2) / sd;
        }
    }
    (gin, gscale, gshift)
}
