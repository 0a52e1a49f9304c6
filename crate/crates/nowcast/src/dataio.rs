//! On-disk formats and the synthetic dataset generator.
//!
//! Tensor container: magic "NWTF", version u32, dtype u32 (1 = f32),
//! rank u32, dims as u64 each, then row-major little-endian f32 payload.
//! Checkpoints bundle many named tensors plus a text metadata block under
//! the magic "NWCK".

use crate::augment::SampleExt;
use crate::binning::RainBins;
use crate::metrics::{self, ScoreReport};
use crate::tensor::{RngState, Tensor};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"NWTF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NWCK";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: bad magic {found:?}", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{}: unsupported format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{}: unsupported dtype code {dtype}", path.display())]
    UnsupportedDtype { path: PathBuf, dtype: u32 },
    #[error("{}: truncated payload, expected {expected} bytes", path.display())]
    Truncated { path: PathBuf, expected: u64 },
    #[error("{}:{line}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Malformed(String),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, expected: u64) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
    })
}

fn read_tensor_from<R: Read>(r: &mut R, path: &Path) -> Result<Tensor, DataError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, path, 4)?;
    if &magic != TENSOR_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found: magic });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(r, &mut u32buf, path, 4)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    read_exact_or(r, &mut u32buf, path, 4)?;
    let dtype = u32::from_le_bytes(u32buf);
    if dtype != DTYPE_F32 {
        return Err(DataError::UnsupportedDtype { path: path.to_path_buf(), dtype });
    }
    read_exact_or(r, &mut u32buf, path, 4)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        read_exact_or(r, &mut u64buf, path, 8)?;
        dims.push(u64::from_le_bytes(u64buf) as usize);
    }
    let count: usize = dims.iter().product();
    let expected = 4 * count as u64;
    let mut payload = vec![0u8; 4 * count];
    read_exact_or(r, &mut payload, path, expected)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(dims, data))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(24 + 8 * t.rank() + 4 * t.len());
    write_tensor_to(&mut buf, t).expect("vec write cannot fail");
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor_from(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(DataError::Malformed(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            cursor.len()
        )));
    }
    Ok(t)
}

/// Named tensors plus a free-form metadata block.
pub fn write_checkpoint(
    path: &Path,
    metadata: &str,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = metadata.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        write_tensor_to(&mut buf, t).expect("vec write cannot fail");
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, BTreeMap<String, Tensor>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, 4)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found: magic });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(&mut r, &mut u32buf, path, 4)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    read_exact_or(&mut r, &mut u32buf, path, 4)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact_or(&mut r, &mut meta, path, meta_len as u64)?;
    let metadata = String::from_utf8(meta)
        .map_err(|_| DataError::Malformed(format!("{}: metadata is not UTF-8", path.display())))?;
    read_exact_or(&mut r, &mut u32buf, path, 4)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        read_exact_or(&mut r, &mut u32buf, path, 4)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, path, name_len as u64)?;
        let name = String::from_utf8(name)
            .map_err(|_| DataError::Malformed(format!("{}: tensor name is not UTF-8", path.display())))?;
        let t = read_tensor_from(&mut r, path)?;
        tensors.insert(name, t);
    }
    Ok((metadata, tensors))
}

/// One line of a dataset manifest. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub input_path: PathBuf,
    pub target_path: PathBuf,
    pub region_id: u32,
    pub start_index: u32,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let region_id = fields[2].parse().map_err(|_| DataError::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("region id `{}` is not an integer", fields[2]),
        })?;
        let start_index = fields[3].parse().map_err(|_| DataError::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("start index `{}` is not an integer", fields[3]),
        })?;
        entries.push(ManifestEntry {
            input_path: PathBuf::from(fields[0]),
            target_path: PathBuf::from(fields[1]),
            region_id,
            start_index,
        });
    }
    Ok(entries)
}

/// Loads an extended sample: the stored input file carries F_in+1 frames and
/// the target file T+1 frames, the trailing ones feeding interpolation.
pub fn load_sample_ext(base: &Path, entry: &ManifestEntry) -> Result<SampleExt, DataError> {
    let inputs = read_tensor(&base.join(&entry.input_path))?;
    let targets = read_tensor(&base.join(&entry.target_path))?;
    if inputs.rank() != 4 || targets.rank() != 3 {
        return Err(DataError::Malformed(format!(
            "sample {:?}: inputs must be rank 4 and targets rank 3, got {:?} / {:?}",
            entry.input_path,
            inputs.shape(),
            targets.shape()
        )));
    }
    if inputs.shape()[0] < 2 || targets.shape()[0] < 2 {
        return Err(DataError::Malformed(format!(
            "sample {:?}: needs at least 2 input and 2 target frames",
            entry.input_path
        )));
    }
    Ok(SampleExt {
        inputs,
        targets,
        region_id: entry.region_id,
        start_index: entry.start_index,
    })
}

/// Synthetic advecting-rain-cell dataset configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sat_height: usize,
    pub sat_width: usize,
    pub radar_height: usize,
    pub radar_width: usize,
    pub bands: usize,
    pub frames_in: usize,
    pub timesteps: usize,
    pub sequences: usize,
    pub cells: usize,
    pub velocity_max: f32,
    pub amplitude_min: f32,
    pub amplitude_max: f32,
    pub noise_level: f32,
    /// Satellite frames view the cell field this many steps ahead, so past
    /// satellite imagery genuinely predicts future radar.
    pub lead: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Fast equal-resolution grids for training experiments.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            sat_height: 32,
            sat_width: 32,
            radar_height: 32,
            radar_width: 32,
            bands: 3,
            frames_in: 4,
            timesteps: 4,
            sequences: 64,
            cells: 3,
            velocity_max: 3.0,
            amplitude_min: 0.5,
            amplitude_max: 25.0,
            noise_level: 0.02,
            lead: 4,
            seed,
        }
    }

    /// Full-size 252x252 grids exercising the 126 crop / 42 patch / x6
    /// restore geometry. Meant for geometry tests, not training.
    pub fn geometry(seed: u64) -> Self {
        SynthConfig {
            sat_height: 252,
            sat_width: 252,
            radar_height: 252,
            radar_width: 252,
            bands: 3,
            frames_in: 4,
            timesteps: 4,
            sequences: 2,
            cells: 4,
            velocity_max: 3.0,
            amplitude_min: 0.5,
            amplitude_max: 25.0,
            noise_level: 0.02,
            lead: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.amplitude_min < 0.0 || self.amplitude_max < self.amplitude_min {
            return Err(DataError::InvalidConfig(
                "amplitude range must satisfy 0 <= min <= max".into(),
            ));
        }
        if self.amplitude_max <= 15.0 {
            return Err(DataError::InvalidConfig(
                "amplitude_max must exceed the top threshold so every bin occurs".into(),
            ));
        }
        if self.sequences == 0 || self.cells == 0 || self.bands == 0 {
            return Err(DataError::InvalidConfig(
                "sequences, cells and bands must be positive".into(),
            ));
        }
        if self.frames_in == 0 || self.timesteps == 0 {
            return Err(DataError::InvalidConfig(
                "frames_in and timesteps must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct RainCell {
    x: f32,
    y: f32,
    sigma: f32,
    amplitude: f32,
}

struct SequenceScene {
    cells: Vec<RainCell>,
    vx: f32,
    vy: f32,
}

impl SequenceScene {
    fn sample(cfg: &SynthConfig, rng: &mut RngState) -> SequenceScene {
        let cells = (0..cfg.cells)
            .map(|i| RainCell {
                x: rng.uniform_range(0.0, cfg.radar_width as f32),
                y: rng.uniform_range(0.0, cfg.radar_height as f32),
                sigma: rng.uniform_range(
                    cfg.radar_width as f32 / 16.0,
                    cfg.radar_width as f32 / 8.0,
                ),
                // first cell always saturates the top bin somewhere
                amplitude: if i == 0 {
                    rng.uniform_range((cfg.amplitude_max * 0.8).max(16.0), cfg.amplitude_max)
                } else {
                    rng.uniform_range(cfg.amplitude_min, cfg.amplitude_max)
                },
            })
            .collect();
        // speed bounded away from zero so no scene is quasi-static and the
        // persistence predictor stays beatable; direction uniform
        let speed = rng.uniform_range(0.5 * cfg.velocity_max, cfg.velocity_max);
        let angle = rng.uniform_range(0.0, std::f32::consts::TAU);
        let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
        // recenter each track on the middle of the target window so fast
        // cells cross the grid instead of leaving it before targets start
        let t_mid = cfg.frames_in as f32 + cfg.timesteps as f32 / 2.0;
        let mut cells: Vec<RainCell> = cells;
        for cell in &mut cells {
            cell.x -= vx * t_mid;
            cell.y -= vy * t_mid;
        }
        SequenceScene { cells, vx, vy }
    }

    /// Cell field at time `t` on an h x w grid whose pixels map to radar
    /// coordinates through `scale`; `blur` inflates each cell's footprint.
    fn field(&self, t: f32, h: usize, w: usize, scale: f32, blur: f32) -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for cell in &self.cells {
            let cx = cell.x + self.vx * t;
            let cy = cell.y + self.vy * t;
            let s2 = 2.0 * (cell.sigma * blur).powi(2);
            for i in 0..h {
                let dy = i as f32 * scale - cy;
                for j in 0..w {
                    let dx = j as f32 * scale - cx;
                    out[i * w + j] += cell.amplitude * (-(dx * dx + dy * dy) / s2).exp();
                }
            }
        }
        out
    }
}

fn band_affine(band: usize) -> (f32, f32) {
    // fixed per-band gain and offset, mimicking distinct spectral responses
    (0.6 / (band as f32 + 1.0), 0.3 * band as f32)
}

/// Builds one extended sample from a scene. Input frame k views the field
/// `lead` steps ahead of its own time, blurred, per-band affine, plus noise.
fn render_sequence(cfg: &SynthConfig, scene: &SequenceScene, rng: &mut RngState) -> (Tensor, Tensor, Tensor) {
    let f_in = cfg.frames_in;
    let t_out = cfg.timesteps;
    let sat_scale = cfg.radar_width as f32 / cfg.sat_width as f32;
    let mut inputs = Vec::with_capacity((f_in + 1) * cfg.bands * cfg.sat_height * cfg.sat_width);
    for k in 0..=f_in {
        let viewed = scene.field(
            (k + cfg.lead) as f32,
            cfg.sat_height,
            cfg.sat_width,
            sat_scale,
            1.5,
        );
        for b in 0..cfg.bands {
            let (gain, offset) = band_affine(b);
            for &v in &viewed {
                inputs.push(gain * v + offset + cfg.noise_level * rng.normal());
            }
        }
    }
    let mut targets = Vec::with_capacity((t_out + 1) * cfg.radar_height * cfg.radar_width);
    for k in 0..=t_out {
        targets.extend(scene.field(
            (f_in + k) as f32,
            cfg.radar_height,
            cfg.radar_width,
            1.0,
            1.0,
        ));
    }
    // radar aligned with the last input frame, the persistence predictor
    let persist = scene.field(
        (f_in - 1) as f32,
        cfg.radar_height,
        cfg.radar_width,
        1.0,
        1.0,
    );
    (
        Tensor::new(
            vec![f_in + 1, cfg.bands, cfg.sat_height, cfg.sat_width],
            inputs,
        ),
        Tensor::new(
            vec![t_out + 1, cfg.radar_height, cfg.radar_width],
            targets,
        ),
        Tensor::new(vec![1, cfg.radar_height, cfg.radar_width], persist),
    )
}

/// Writes `inputs/`, `targets/`, `persist/`, `manifest.txt` and the
/// train/val split manifests. Byte-identical for identical configs.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    cfg.validate()?;
    for sub in ["inputs", "targets", "persist"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(io_err(out_dir))?;
    }
    let root = RngState::from_seed(cfg.seed);
    let mut manifest = String::from("# input\ttarget\tregion\tstart\n");
    let mut train = String::from("# input\ttarget\tregion\tstart\n");
    let mut val = String::from("# input\ttarget\tregion\tstart\n");
    let mut entries = Vec::with_capacity(cfg.sequences);
    for seq in 0..cfg.sequences {
        let mut rng = root.derive(seq as u64);
        let scene = SequenceScene::sample(cfg, &mut rng);
        let (inputs, targets, persist) = render_sequence(cfg, &scene, &mut rng);
        let input_rel = format!("inputs/{seq:04}.nwt");
        let target_rel = format!("targets/{seq:04}.nwt");
        write_tensor(&out_dir.join(&input_rel), &inputs)?;
        write_tensor(&out_dir.join(&target_rel), &targets)?;
        write_tensor(&out_dir.join(format!("persist/{seq:04}.nwt")), &persist)?;
        let region = (seq % 4) as u32;
        let line = format!("{input_rel}\t{target_rel}\t{region}\t{seq}\n");
        manifest.push_str(&line);
        if seq % 4 == 3 {
            val.push_str(&line);
        } else {
            train.push_str(&line);
        }
        entries.push(ManifestEntry {
            input_path: PathBuf::from(input_rel),
            target_path: PathBuf::from(target_rel),
            region_id: region,
            start_index: seq as u32,
        });
    }
    fs::write(out_dir.join("manifest.txt"), manifest).map_err(io_err(out_dir))?;
    fs::write(out_dir.join("manifest_train.txt"), train).map_err(io_err(out_dir))?;
    fs::write(out_dir.join("manifest_val.txt"), val).map_err(io_err(out_dir))?;
    Ok(entries)
}

/// Path of the stored persistence frame matching a target file.
fn persist_path(entry: &ManifestEntry) -> Result<PathBuf, DataError> {
    let name = entry.target_path.file_name().ok_or_else(|| {
        DataError::Malformed(format!("target path {:?} has no file name", entry.target_path))
    })?;
    Ok(PathBuf::from("persist").join(name))
}

/// Scores the forecaster that repeats the last observed radar frame.
pub fn persistence_baseline(
    base: &Path,
    entries: &[ManifestEntry],
    bins: &RainBins,
) -> Result<ScoreReport, DataError> {
    let mut preds = Vec::with_capacity(entries.len());
    let mut truths = Vec::with_capacity(entries.len());
    for entry in entries {
        let persist_file = base.join(persist_path(entry)?);
        if !persist_file.exists() {
            return Err(DataError::Malformed(format!(
                "no persistence frame for {:?}; expected {}",
                entry.target_path,
                persist_file.display()
            )));
        }
        let last = read_tensor(&persist_file)?;
        let targets = read_tensor(&base.join(&entry.target_path))?;
        let t_out = targets.shape()[0] - 1; // trailing frame is the TFI extension
        let (h, w) = (targets.shape()[1], targets.shape()[2]);
        let mut pred = Vec::with_capacity(t_out * h * w);
        for _ in 0..t_out {
            pred.extend_from_slice(last.data());
        }
        preds.push(Tensor::new(vec![t_out, h, w], pred));
        truths.push(Tensor::new(
            vec![t_out, h, w],
            targets.data()[..t_out * h * w].to_vec(),
        ));
    }
    Ok(metrics::evaluate(&preds, &truths, bins)?)
}
