//! On-disk formats: binary trajectory files, complex image datasets,
//! reconstructor checkpoints, and training logs.
//!
//! Trajectories travel as a small self-describing binary format (magic
//! `KTRJ1`) carrying the geometry and hardware limits they were designed
//! for, so downstream commands need no side channel. Images are raw
//! little-endian `f32` interleaved real/imaginary pairs with a JSON
//! sidecar, one file per image. Checkpoints store the flattened parameter
//! vector next to a JSON description of the layer shapes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ComplexImage, HardwareLimits, ImagingGeometry, Trajectory};
use crate::recon::DenoiserParams;
use crate::trainer::StepRecord;

const TRAJECTORY_MAGIC: &[u8; 5] = b"KTRJ1";
pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

/// A trajectory together with the imaging geometry and hardware limits it
/// was designed under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub trajectory: Trajectory,
    pub geometry: ImagingGeometry,
    pub limits: HardwareLimits,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes a trajectory file: magic, version, `Nc`, `Ns`, `N` as `u32`,
/// then `fov`, `g_max`, `s_max`, raster and dwell times as `f64`, then the
/// coordinate payload shot-major with `x` before `y`.
pub fn write_trajectory(path: &Path, file: &TrajectoryFile) -> Result<()> {
    let (nc, ns, _) = file.trajectory.shots().dim();
    let mut buf = Vec::with_capacity(5 + 4 * 4 + 5 * 8 + nc * ns * 16);
    buf.extend_from_slice(TRAJECTORY_MAGIC);
    push_u32(&mut buf, TRAJECTORY_FORMAT_VERSION);
    push_u32(&mut buf, nc as u32);
    push_u32(&mut buf, ns as u32);
    push_u32(&mut buf, file.geometry.matrix_size() as u32);
    push_f64(&mut buf, file.geometry.fov());
    push_f64(&mut buf, file.limits.g_max);
    push_f64(&mut buf, file.limits.s_max);
    push_f64(&mut buf, file.limits.raster_time);
    push_f64(&mut buf, file.limits.dwell_time);
    for v in file.trajectory.shots().iter() {
        push_f64(&mut buf, *v);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a trajectory file, re-validating every invariant (magic, version,
/// payload length, coordinate range, positive limits).
pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile> {
    let data = fs::read(path)?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    if r.take(5)? != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a trajectory file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported trajectory format version {version}"
        )));
    }
    let nc = r.u32()? as usize;
    let ns = r.u32()? as usize;
    let n = r.u32()? as usize;
    let fov = r.f64()?;
    // the header stores the four limit fields that shape the feasible set;
    // the gyromagnetic ratio is a physical constant and not serialized
    let limits = HardwareLimits {
        g_max: r.f64()?,
        s_max: r.f64()?,
        raster_time: r.f64()?,
        dwell_time: r.f64()?,
        ..HardwareLimits::default()
    };
    let mut coords = Vec::with_capacity(nc * ns * 2);
    for _ in 0..nc * ns * 2 {
        coords.push(r.f64()?);
    }
    if r.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            data.len() - r.pos
        )));
    }
    let shots = Array3::from_shape_vec((nc, ns, 2), coords)
        .map_err(|e| Error::Format(format!("bad payload shape: {e}")))?;
    let file = TrajectoryFile {
        trajectory: Trajectory::new(shots)?,
        geometry: ImagingGeometry::new(n, fov)?,
        limits,
    };
    file.limits.validate()?;
    Ok(file)
}

/// Sidecar describing an on-disk image dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    /// Image side length.
    pub n: usize,
    /// Number of images.
    pub count: usize,
    /// Free-form acquisition tag.
    pub contrast: String,
}

fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:05}.bin"))
}

/// Writes a dataset directory: `dataset.json` plus one raw image file per
/// entry (row-major little-endian `f32` real/imaginary pairs).
pub fn write_dataset(dir: &Path, images: &[ComplexImage], contrast: &str) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Config("dataset must contain at least one image".into()));
    }
    let n = images[0].side();
    if images.iter().any(|img| img.side() != n) {
        return Err(Error::Shape("dataset images must share one side length".into()));
    }
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        n,
        count: images.len(),
        contrast: contrast.to_string(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut buf = Vec::with_capacity(n * n * 8);
    for (i, img) in images.iter().enumerate() {
        buf.clear();
        for z in img.data().iter() {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        fs::write(image_path(dir, i), &buf)?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<ComplexImage>, DatasetMeta)> {
    let meta_text = fs::read_to_string(dir.join("dataset.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    if meta.n == 0 || meta.count == 0 {
        return Err(Error::Format("dataset sidecar lists no images".into()));
    }
    let expected = meta.n * meta.n * 8;
    let mut images = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let path = image_path(dir, i);
        let bytes = fs::read(&path)?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{} has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let mut img = ComplexImage::zeros(meta.n);
        for (z, chunk) in img.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            let re = f32::from_le_bytes(chunk[..4].try_into().unwrap());
            let im = f32::from_le_bytes(chunk[4..].try_into().unwrap());
            *z = Complex64::new(re as f64, im as f64);
        }
        images.push(img);
    }
    Ok((images, meta))
}

/// JSON sidecar for a reconstructor checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    /// `(out_channels, in_channels, kh, kw)` per convolution layer.
    pub layer_shapes: Vec<(usize, usize, usize, usize)>,
    pub num_params: usize,
}

const CHECKPOINT_FORMAT: &str = "denoiser-v1";

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes the flattened parameter vector (little-endian `f64`) plus a JSON
/// sidecar describing the layer shapes.
pub fn write_denoiser(bin: &Path, params: &DenoiserParams) -> Result<()> {
    let flat = params.to_flat();
    let mut buf = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin, buf)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        layer_shapes: params.layer_shapes(),
        num_params: flat.len(),
    };
    fs::write(sidecar_path(bin), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_denoiser`], verifying the sidecar
/// against the fixed architecture.
pub fn read_denoiser(bin: &Path) -> Result<DenoiserParams> {
    let meta_text = fs::read_to_string(sidecar_path(bin))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?}",
            meta.format
        )));
    }
    let reference = DenoiserParams::init(0);
    if meta.layer_shapes != reference.layer_shapes() || meta.num_params != reference.num_params() {
        return Err(Error::Format(
            "checkpoint layer shapes do not match the fixed architecture".into(),
        ));
    }
    let bytes = fs::read(bin)?;
    if bytes.len() != meta.num_params * 8 {
        return Err(Error::Format(format!(
            "checkpoint has {} bytes, expected {}",
            bytes.len(),
            meta.num_params * 8
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenoiserParams::from_flat(&flat)
}

/// Writes the whole training log as JSON lines, one record per step.
pub fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for record in log {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
