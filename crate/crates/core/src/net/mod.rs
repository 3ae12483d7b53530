//! Trainable regularizer: a small encoder-decoder CNN with hand-written
//! forward pass and vector-Jacobian products.
//!
//! A [`Network`] is a flat program of [`Layer`]s over one running feature
//! map plus a stack of saved skips. [`NetArch::build`] emits the standard
//! U-shaped program; tests build arbitrary programs directly.

pub mod tensor;

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::Volume;
pub use tensor::{Padding, Tensor};
use tensor::KernelShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { cin: usize, cout: usize, kernel: usize },
    InstanceNorm { channels: usize },
    Relu,
    /// 2× average pooling.
    Pool,
    /// 2× nearest-neighbour upsampling.
    Upsample,
    /// Saves the current feature map for a later [`Layer::Concat`].
    Push,
    /// Pops the last saved map `s` and replaces the current map `c` with `[s, c]`.
    Concat,
}

impl Layer {
    fn param_len(&self, dims: usize) -> usize {
        match *self {
            Layer::Conv { cin, cout, kernel } => cout * cin * kernel.pow(dims as u32) + cout,
            Layer::InstanceNorm { channels } => 2 * channels,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub n_levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub dims: usize,
    #[serde(default = "default_convs")]
    pub convs_per_block: usize,
    #[serde(default)]
    pub instance_norm: bool,
    #[serde(default = "default_padding")]
    pub padding: Padding,
}

fn default_convs() -> usize {
    2
}

fn default_padding() -> Padding {
    Padding::Zero
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            n_levels: 2,
            base_channels: 4,
            kernel_size: 3,
            dims: 2,
            convs_per_block: 2,
            instance_norm: false,
            padding: Padding::Zero,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 {
            return Err(invalid("n_levels must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid("kernel_size must be odd"));
        }
        if self.dims != 2 && self.dims != 3 {
            return Err(invalid("dims must be 2 or 3"));
        }
        if self.base_channels == 0 {
            return Err(invalid("base_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Network> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut ch = 1;
        let block = |layers: &mut Vec<Layer>, ch: &mut usize, out: usize| {
            for _ in 0..self.convs_per_block {
                layers.push(Layer::Conv {
                    cin: *ch,
                    cout: out,
                    kernel: self.kernel_size,
                });
                if self.instance_norm {
                    layers.push(Layer::InstanceNorm { channels: out });
                }
                layers.push(Layer::Relu);
                *ch = out;
            }
        };
        for level in 0..self.n_levels {
            if level > 0 {
                layers.push(Layer::Pool);
            }
            block(&mut layers, &mut ch, self.base_channels << level);
            if level + 1 < self.n_levels {
                layers.push(Layer::Push);
            }
        }
        let mut skip_channels: Vec<usize> = Vec::new();
        {
            // replay channel counts at each Push to size the decoder convs
            let mut c = 1;
            for l in &layers {
                match *l {
                    Layer::Conv { cout, .. } => c = cout,
                    Layer::Push => skip_channels.push(c),
                    _ => {}
                }
            }
        }
        for level in (0..self.n_levels - 1).rev() {
            layers.push(Layer::Upsample);
            layers.push(Layer::Concat);
            ch += skip_channels.pop().unwrap_or(0);
            block(&mut layers, &mut ch, self.base_channels << level);
        }
        layers.push(Layer::Conv {
            cin: ch,
            cout: 1,
            kernel: 1,
        });
        Network::new(self.dims, self.padding, layers, Some(*self))
    }
}

/// Flat parameter vector plus the per-layer offsets into it.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub dims: usize,
    pub padding: Padding,
    pub layers: Vec<Layer>,
    pub arch: Option<NetArch>,
    offsets: Vec<usize>,
    n_params: usize,
}

/// Cached forward pass: the input of every layer and the final output.
struct Trace {
    inputs: Vec<Tensor>,
    output: Tensor,
}

impl Network {
    pub fn new(dims: usize, padding: Padding, layers: Vec<Layer>, arch: Option<NetArch>) -> Result<Self> {
        if dims != 2 && dims != 3 {
            return Err(invalid("dims must be 2 or 3"));
        }
        let mut ch = 1;
        let mut stack = Vec::new();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut n = 0;
        for l in &layers {
            offsets.push(n);
            n += l.param_len(dims);
            match *l {
                Layer::Conv { cin, cout, kernel } => {
                    if cin != ch {
                        return Err(invalid(format!("conv expects {cin} channels, gets {ch}")));
                    }
                    if kernel % 2 == 0 {
                        return Err(invalid("kernel size must be odd"));
                    }
                    ch = cout;
                }
                Layer::InstanceNorm { channels } if channels != ch => {
                    return Err(invalid("instance norm channel count mismatch"));
                }
                Layer::Push => stack.push(ch),
                Layer::Concat => {
                    ch += stack.pop().ok_or_else(|| invalid("concat without saved skip"))?;
                }
                _ => {}
            }
        }
        if ch != 1 {
            return Err(invalid(format!("network must end with 1 channel, ends with {ch}")));
        }
        if !stack.is_empty() {
            return Err(invalid("unconsumed skip connection"));
        }
        Ok(Self {
            dims,
            padding,
            layers,
            arch,
            offsets,
            n_params: n,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn n_pools(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Pool)).count()
    }

    fn params_of<'a>(&self, layer: usize, params: &'a [f64]) -> &'a [f64] {
        let off = self.offsets[layer];
        &params[off..off + self.layers[layer].param_len(self.dims)]
    }

    /// He-initialized hidden convolutions, unit-scale instance norms, and an
    /// all-zero final convolution, drawn deterministically from `seed`.
    pub fn init_params(&self, seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.n_params];
        let last_conv = self.layers.iter().rposition(|l| matches!(l, Layer::Conv { .. }));
        for (i, l) in self.layers.iter().enumerate() {
            let off = self.offsets[i];
            match *l {
                Layer::Conv { cin, cout, kernel } => {
                    if Some(i) == last_conv {
                        continue;
                    }
                    let taps = kernel.pow(self.dims as u32);
                    let std = (2.0 / (cin * taps) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in &mut values[off..off + cout * cin * taps] {
                        *v = normal.sample(&mut rng);
                    }
                }
                Layer::InstanceNorm { channels } => {
                    values[off..off + channels].iter_mut().for_each(|v| *v = 1.0);
                }
                _ => {}
            }
        }
        NetParams { values }
    }

    fn check_input(&self, params: &NetParams, x: &Volume) -> Result<()> {
        if params.len() != self.n_params {
            return Err(invalid(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                self.n_params
            )));
        }
        if x.grid.dims() != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "{}D network applied to {}D volume",
                self.dims,
                x.grid.dims()
            )));
        }
        let factor = 1usize << self.n_pools();
        if x.grid.shape.iter().any(|&n| n % factor != 0) {
            return Err(Error::ShapeMismatch(format!(
                "volume sides {:?} must be multiples of {factor}",
                x.grid.shape
            )));
        }
        Ok(())
    }

    fn to_tensor(x: &Volume) -> Tensor {
        Tensor {
            channels: 1,
            shape: x.grid.shape3(),
            data: x.data.clone(),
        }
    }

    fn run(&self, params: &[f64], x: Tensor, keep: bool) -> Trace {
        let ks = |kernel| KernelShape { k: kernel, dims: self.dims };
        let mut cur = x;
        let mut stack: Vec<Tensor> = Vec::new();
        let mut inputs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let next = match *l {
                Layer::Conv { cin, cout, kernel } => {
                    let p = self.params_of(i, params);
                    let nw = cout * cin * ks(kernel).volume();
                    tensor::conv_forward(&cur, &p[..nw], &p[nw..], cout, ks(kernel), self.padding)
                }
                Layer::InstanceNorm { channels } => {
                    let p = self.params_of(i, params);
                    tensor::instance_norm_forward(&cur, &p[..channels], &p[channels..])
                }
                Layer::Relu => tensor::relu_forward(&cur),
                Layer::Pool => tensor::pool_forward(&cur, self.dims),
                Layer::Upsample => tensor::upsample_forward(&cur, self.dims),
                Layer::Push => {
                    stack.push(cur.clone());
                    cur.clone()
                }
                Layer::Concat => {
                    let skip = stack.pop().expect("validated skip stack");
                    tensor::concat(&skip, &cur)
                }
            };
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        Trace { inputs, output: cur }
    }

    /// `N_θ(x)`; same shape as `x`.
    pub fn forward(&self, params: &NetParams, x: &Volume) -> Result<Volume> {
        self.check_input(params, x)?;
        let out = self.run(&params.values, Self::to_tensor(x), false).output;
        Volume::from_vec(&x.grid, out.data)
    }

    /// Unchecked forward on a raw buffer of spatial shape `shape`.
    pub(crate) fn forward_raw(&self, params: &[f64], shape: [usize; 3], x: &[f64]) -> Vec<f64> {
        let t = Tensor {
            channels: 1,
            shape,
            data: x.to_vec(),
        };
        self.run(params, t, false).output.data
    }

    /// Unchecked forward + VJP on raw buffers: returns `(N(x), gθ, gx)`.
    pub(crate) fn forward_vjp_raw(
        &self,
        params: &[f64],
        shape: [usize; 3],
        x: &[f64],
        cotangent: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = |d: &[f64]| Tensor {
            channels: 1,
            shape,
            data: d.to_vec(),
        };
        self.backward(params, t(x), t(cotangent))
    }

    /// Validates the pair `(params, grid)` once so raw calls can skip it.
    pub fn check_grid(&self, params: &NetParams, grid: &crate::volume::VolumeGrid) -> Result<()> {
        self.check_input(params, &Volume::zeros(grid))
    }

    /// Returns `(N_θ(x), (∂N/∂θ)ᵀ c, (∂N/∂x)ᵀ c)` for cotangent `c`.
    pub fn forward_vjp(
        &self,
        params: &NetParams,
        x: &Volume,
        cotangent: &Volume,
    ) -> Result<(Volume, Vec<f64>, Volume)> {
        self.check_input(params, x)?;
        if cotangent.grid.shape != x.grid.shape {
            return Err(Error::ShapeMismatch("cotangent shape differs from input".into()));
        }
        let (out, gp, gx) = self.backward(&params.values, Self::to_tensor(x), Self::to_tensor(cotangent));
        Ok((
            Volume::from_vec(&x.grid, out)?,
            gp,
            Volume::from_vec(&x.grid, gx)?,
        ))
    }

    fn backward(&self, params: &[f64], x: Tensor, cotangent: Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ks = |kernel| KernelShape { k: kernel, dims: self.dims };
        let trace = self.run(params, x, true);
        let mut grad_params = vec![0.0; self.n_params];
        let mut g = cotangent;
        let mut skip_grads: Vec<Tensor> = Vec::new();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            g = match *l {
                Layer::Conv { cin, cout, kernel } => {
                    let p = self.params_of(i, params);
                    let nw = cout * cin * ks(kernel).volume();
                    let (gi, gw, gb) = tensor::conv_vjp(input, &p[..nw], &g, ks(kernel), self.padding);
                    let off = self.offsets[i];
                    grad_params[off..off + nw].copy_from_slice(&gw);
                    grad_params[off + nw..off + nw + cout].copy_from_slice(&gb);
                    gi
                }
                Layer::InstanceNorm { channels } => {
                    let p = self.params_of(i, params);
                    let (gi, gs, gb) = tensor::instance_norm_vjp(input, &p[..channels], &g);
                    let off = self.offsets[i];
                    grad_params[off..off + channels].copy_from_slice(&gs);
                    grad_params[off + channels..off + 2 * channels].copy_from_slice(&gb);
                    gi
                }
                Layer::Relu => tensor::relu_vjp(input, &g),
                Layer::Pool => tensor::pool_vjp(input.shape, &g, self.dims),
                Layer::Upsample => tensor::upsample_vjp(input.shape, &g, self.dims),
                Layer::Concat => {
                    let (gs, gc) = tensor::split(&g, g.channels - input.channels);
                    skip_grads.push(gs);
                    gc
                }
                Layer::Push => {
                    let gs = skip_grads.pop().expect("matching concat");
                    let mut g = g;
                    g.data.iter_mut().zip(&gs.data).for_each(|(a, b)| *a += b);
                    g
                }
            };
        }
        (trace.output.data, grad_params, g.data)
    }

    /// `((∂N/∂θ)ᵀ c, (∂N/∂x)ᵀ c)`.
    pub fn vjp(&self, params: &NetParams, x: &Volume, cotangent: &Volume) -> Result<(Vec<f64>, Volume)> {
        let (_, gp, gx) = self.forward_vjp(params, x, cotangent)?;
        Ok((gp, gx))
    }

    /// True when the final projection is identically zero, i.e. `N_θ ≡ 0`.
    pub fn output_is_zero(&self, params: &NetParams) -> bool {
        match self.layers.iter().rposition(|l| matches!(l, Layer::Conv { .. })) {
            Some(i) => self.params_of(i, &params.values).iter().all(|&v| v == 0.0),
            None => false,
        }
    }
}

const PARAM_MAGIC: &[u8; 4] = b"CTNP";
const PARAM_VERSION: u32 = 1;

fn padding_code(p: Padding) -> u32 {
    match p {
        Padding::Zero => 0,
        Padding::Periodic => 1,
    }
}

/// Writes `magic, version, n_levels, base_channels, kernel_size, dims,
/// convs_per_block, instance_norm, padding, n_params` (u32 LE) followed by
/// all parameters in layer order as f64 LE.
pub fn write_params<W: Write>(mut w: W, arch: &NetArch, params: &NetParams) -> Result<()> {
    let net = arch.build()?;
    if net.n_params() != params.len() {
        return Err(invalid("parameter count does not match architecture"));
    }
    w.write_all(PARAM_MAGIC)?;
    let header = [
        PARAM_VERSION,
        arch.n_levels as u32,
        arch.base_channels as u32,
        arch.kernel_size as u32,
        arch.dims as u32,
        arch.convs_per_block as u32,
        arch.instance_norm as u32,
        padding_code(arch.padding),
        params.len() as u32,
    ];
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(NetArch, NetParams)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let mut words = [0u32; 9];
    for wd in words.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *wd = u32::from_le_bytes(b);
    }
    if words[0] != PARAM_VERSION {
        return Err(Error::Format(format!("unsupported parameter version {}", words[0])));
    }
    let arch = NetArch {
        n_levels: words[1] as usize,
        base_channels: words[2] as usize,
        kernel_size: words[3] as usize,
        dims: words[4] as usize,
        convs_per_block: words[5] as usize,
        instance_norm: words[6] != 0,
        padding: if words[7] == 1 { Padding::Periodic } else { Padding::Zero },
    };
    let n = words[8] as usize;
    if arch.build()?.n_params() != n {
        return Err(Error::Format("parameter count disagrees with header architecture".into()));
    }
    let mut values = vec![0.0; n];
    let mut b = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok((arch, NetParams { values }))
}

pub fn save_params(path: &Path, arch: &NetArch, params: &NetParams) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(f, arch, params)
}

pub fn load_params(path: &Path) -> Result<(NetArch, NetParams)> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
