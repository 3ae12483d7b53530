//! Volume/sinogram files and slice exports.
//!
//! Both file kinds are a 64-byte little-endian header followed by the
//! payload as f32 LE, with a JSON sidecar (`<file>.json`) next to them.
//! Volume header: magic `CTV1`, u32 dims, u32 nx, ny, nz, f32 voxel size,
//! f32 origin[3]. Sinogram header: magic `CTS1`, u32 kind (0 fan, 1 cone),
//! u32 n_angles, rows, cols, f32 pixel size. The sidecar carries the full
//! geometry, which the header alone cannot.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::projector::Sinogram;
use crate::volume::{Volume, VolumeGrid};

pub const HEADER_LEN: usize = 64;
const VOLUME_MAGIC: &[u8; 4] = b"CTV1";
const SINOGRAM_MAGIC: &[u8; 4] = b"CTS1";

/// Display window of slice exports (mm⁻¹).
pub const DISPLAY_WINDOW: (f64, f64) = (0.0, 0.06);

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub format: String,
    pub dtype: String,
    pub grid: VolumeGrid,
    /// Reconstruction method that produced the volume, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Acquisition geometry the volume belongs to; defines its FOV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramSidecar {
    pub format: String,
    pub dtype: String,
    pub geometry: Geometry,
    /// Grid the data were simulated on, when known.
    #[serde(default)]
    pub recon_grid: Option<VolumeGrid>,
}

struct Header([u8; HEADER_LEN], usize);

impl Header {
    fn new(magic: &[u8; 4]) -> Self {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(magic);
        Header(h, 4)
    }
    fn u32(&mut self, v: usize) {
        self.0[self.1..self.1 + 4].copy_from_slice(&(v as u32).to_le_bytes());
        self.1 += 4;
    }
    fn f32(&mut self, v: f64) {
        self.0[self.1..self.1 + 4].copy_from_slice(&(v as f32).to_le_bytes());
        self.1 += 4;
    }
}

struct HeaderReader<'a>(&'a [u8], usize);

impl HeaderReader<'_> {
    fn u32(&mut self) -> usize {
        let v = u32::from_le_bytes(self.0[self.1..self.1 + 4].try_into().unwrap());
        self.1 += 4;
        v as usize
    }
}

fn write_payload(path: &Path, header: Header, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    buf.extend_from_slice(&header.0);
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_payload(path: &Path, magic: &[u8; 4]) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "{}: expected {} header",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: truncated payload", path.display())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((bytes[..HEADER_LEN].to_vec(), data))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(f)?)
}

/// Rounds every value through f32, i.e. what a save/load cycle yields.
pub fn quantize(data: &[f64]) -> Vec<f64> {
    data.iter().map(|&v| v as f32 as f64).collect()
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    save_volume_tagged(path, v, None, None)
}

pub fn save_volume_tagged(path: &Path, v: &Volume, method: Option<&str>, geometry: Option<&Geometry>) -> Result<()> {
    let g = &v.grid;
    let mut h = Header::new(VOLUME_MAGIC);
    h.u32(g.dims());
    for n in g.shape3() {
        h.u32(n);
    }
    h.f32(g.voxel_size);
    for o in g.origin {
        h.f32(o);
    }
    write_payload(path, h, &v.data)?;
    write_json(
        &sidecar_path(path),
        &VolumeSidecar {
            format: "CTV1".into(),
            dtype: "f32le".into(),
            grid: g.clone(),
            method: method.map(str::to_string),
            geometry: geometry.cloned(),
        },
    )
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    Ok(load_volume_with_sidecar(path)?.0)
}

pub fn load_volume_with_sidecar(path: &Path) -> Result<(Volume, VolumeSidecar)> {
    let (header, data) = read_payload(path, VOLUME_MAGIC)?;
    let side: VolumeSidecar = read_json(&sidecar_path(path))?;
    let mut r = HeaderReader(&header, 4);
    let dims = r.u32();
    let shape = [r.u32(), r.u32(), r.u32()];
    if dims != side.grid.dims() || shape != side.grid.shape3() {
        return Err(Error::Format(format!("{}: header and sidecar disagree", path.display())));
    }
    Ok((Volume::from_vec(&side.grid, data)?, side))
}

pub fn save_sinogram(path: &Path, p: &Sinogram, recon_grid: Option<&VolumeGrid>) -> Result<()> {
    let mut h = Header::new(SINOGRAM_MAGIC);
    let (kind, rows, cols, pix) = match &p.geom {
        Geometry::Fan(f) => (0, 1, f.n_detectors, f.detector_pixel_size),
        Geometry::Cone(c) => (1, c.detector_rows, c.detector_cols, c.detector_pixel_size),
    };
    h.u32(kind);
    h.u32(p.geom.n_angles());
    h.u32(rows);
    h.u32(cols);
    h.f32(pix);
    write_payload(path, h, &p.data)?;
    write_json(
        &sidecar_path(path),
        &SinogramSidecar {
            format: "CTS1".into(),
            dtype: "f32le".into(),
            geometry: p.geom.clone(),
            recon_grid: recon_grid.cloned(),
        },
    )
}

pub fn load_sinogram(path: &Path) -> Result<(Sinogram, Option<VolumeGrid>)> {
    let (header, data) = read_payload(path, SINOGRAM_MAGIC)?;
    let side: SinogramSidecar = read_json(&sidecar_path(path))?;
    let mut r = HeaderReader(&header, 4);
    let _kind = r.u32();
    let n_angles = r.u32();
    let rows = r.u32();
    let cols = r.u32();
    if n_angles != side.geometry.n_angles() || rows * cols != side.geometry.detector_len() {
        return Err(Error::Format(format!("{}: header and sidecar disagree", path.display())));
    }
    Ok((Sinogram::from_vec(&side.geometry, data)?, side.recon_grid))
}

/// Binary 8-bit PGM of a 2D array, window mapped linearly onto 0..255.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64], window: (f64, f64)) -> Result<()> {
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let span = window.1 - window.0;
    for v in data {
        let g = ((v - window.0) / span * 255.0).round().clamp(0.0, 255.0);
        buf.push(g as u8);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Writes the center slice normal to every axis of `v` (one file for a 2D
/// volume) as `<stem>_axis<k>.pgm`; returns the written paths.
pub fn export_center_slices(dir: &Path, stem: &str, v: &Volume) -> Result<Vec<PathBuf>> {
    let shape = v.grid.shape3();
    let axes: &[usize] = if v.grid.dims() == 2 { &[2] } else { &[0, 1, 2] };
    let mut out = Vec::new();
    for &axis in axes {
        let (rows, cols, data) = v.slice(axis, shape[axis] / 2);
        let path = dir.join(format!("{stem}_axis{axis}.pgm"));
        write_pgm(&path, rows, cols, &data, DISPLAY_WINDOW)?;
        out.push(path);
    }
    Ok(out)
}
