//! Loading, saving and preconditioning of 2D+time stacks.
//!
//! Stacks live on disk as one binary PGM (P5) per slice, named by a printf
//! style pattern such as `frame_%04d.pgm`, next to an optional `stack.txt`
//! sidecar holding `width`, `height`, `frames` and `pixel_size`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Frame, ImageStack, IntensityRange, Mask};

/// Default file name pattern for stack slices.
pub const FRAME_PATTERN: &str = "frame_%04d.pgm";
/// Name of the metadata sidecar written next to the slices.
pub const SIDECAR: &str = "stack.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::param("bit_depth", format!("{other} (expected 8 or 16)"))),
        }
    }

    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Fraction of pixels treated as the bright spot-noise peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramCropParams {
    pub p_noise: f64,
}

/// Target interval for [`rescale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleTarget {
    Unit,
    Byte,
}

// ---------------------------------------------------------------------------
// PGM / PPM

/// Reads a binary PGM (P5), maxval up to 65535.
pub fn read_pgm(path: &Path) -> Result<(Frame, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("invalid {what} {s:?}")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    if bytes.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    let raster = &bytes[pos..pos + need];
    let data: Vec<f64> = if bpp == 1 {
        raster.iter().map(|&b| b as f64).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    Ok((Frame::from_vec(width, height, data)?, maxval as u32))
}

/// Writes a binary PGM. Values are rounded and clamped to `0..=maxval`.
pub fn write_pgm(path: &Path, frame: &Frame, depth: BitDepth) -> Result<()> {
    let maxval = depth.maxval();
    let mut out = Vec::with_capacity(frame.len() * 2 + 32);
    write!(out, "P5\n{} {}\n{}\n", frame.width(), frame.height(), maxval)
        .expect("write to vec");
    for &v in frame.data() {
        let q = v.round().clamp(0.0, maxval as f64) as u32;
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a binary PPM (P6) from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(rgb).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Frame patterns

#[derive(Debug, Clone)]
struct FramePattern {
    dir: PathBuf,
    prefix: String,
    suffix: String,
    pad: usize,
}

impl FramePattern {
    fn parse(pattern: &str) -> Result<Self> {
        let path = Path::new(pattern);
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::param("path_pattern", pattern.to_string()))?;
        let start = name
            .find('%')
            .ok_or_else(|| Error::param("path_pattern", format!("{pattern}: no %d placeholder")))?;
        let rest = &name[start + 1..];
        let d = rest
            .find('d')
            .ok_or_else(|| Error::param("path_pattern", format!("{pattern}: no %d placeholder")))?;
        let spec = &rest[..d];
        let pad = if spec.is_empty() {
            0
        } else {
            spec.trim_start_matches('0').parse::<usize>().map_err(|_| {
                Error::param("path_pattern", format!("{pattern}: bad width {spec:?}"))
            })?
        };
        Ok(FramePattern {
            dir,
            prefix: name[..start].to_string(),
            suffix: rest[d + 1..].to_string(),
            pad,
        })
    }

    fn file_name(&self, index: usize) -> PathBuf {
        self.dir.join(format!(
            "{}{:0width$}{}",
            self.prefix,
            index,
            self.suffix,
            width = self.pad
        ))
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        let mid = name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if mid.is_empty() || !mid.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        mid.parse().ok()
    }
}

/// Stack metadata sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackMeta {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub pixel_size: f64,
}

pub fn write_sidecar(path: &Path, meta: &StackMeta) -> Result<()> {
    let text = format!(
        "width={}\nheight={}\nframes={}\npixel_size={}\n",
        meta.width, meta.height, meta.frames, meta.pixel_size
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<StackMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| bad(format!("missing key {k}")))
            .map(String::as_str)
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| bad(format!("invalid {k}")))
    };
    Ok(StackMeta {
        width: int("width")?,
        height: int("height")?,
        frames: int("frames")?,
        pixel_size: get("pixel_size")?
            .parse()
            .map_err(|_| bad("invalid pixel_size".into()))?,
    })
}

/// Loads every slice matching `path_pattern` (e.g. `dir/frame_%04d.pgm`).
///
/// Indices must be consecutive starting from the smallest one found. Pixel
/// size comes from the sidecar when present, otherwise 1.
pub fn load_stack(path_pattern: &str, bit_depth: BitDepth) -> Result<ImageStack> {
    let pattern = FramePattern::parse(path_pattern)?;
    let entries = fs::read_dir(&pattern.dir).map_err(|e| Error::io(&pattern.dir, e))?;
    let mut indices: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| pattern.index_of(n)))
        .collect();
    indices.sort_unstable();
    indices.dedup();
    let first = *indices
        .first()
        .ok_or_else(|| Error::NoFrames(path_pattern.to_string()))?;
    for (offset, &idx) in indices.iter().enumerate() {
        if idx != first + offset {
            return Err(Error::MissingFrame {
                pattern: path_pattern.to_string(),
                index: first + offset,
            });
        }
    }

    let mut frames = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let path = pattern.file_name(idx);
        let (frame, maxval) = read_pgm(&path)?;
        if bit_depth == BitDepth::Eight && maxval > 255 {
            return Err(Error::Format {
                path,
                reason: format!("maxval {maxval} exceeds 8-bit depth"),
            });
        }
        if let Some(prev) = frames.first().map(Frame::dims) {
            if frame.dims() != prev {
                return Err(Error::DimensionMismatch {
                    expected: prev,
                    found: frame.dims(),
                });
            }
        }
        frames.push(frame);
    }

    let sidecar = pattern.dir.join(SIDECAR);
    let pixel_size = if sidecar.exists() {
        let meta = read_sidecar(&sidecar)?;
        let (w, h) = frames[0].dims();
        if (meta.width, meta.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (meta.width, meta.height),
                found: (w, h),
            });
        }
        if meta.frames != frames.len() {
            return Err(Error::Format {
                path: sidecar,
                reason: format!("sidecar declares {} frames, found {}", meta.frames, frames.len()),
            });
        }
        meta.pixel_size
    } else {
        1.0
    };
    ImageStack::new(frames, pixel_size, IntensityRange::Raw)
}

/// The integer stack that [`save_stack`] followed by [`load_stack`] would
/// give back: unit-range data scaled by the depth's maxval, everything
/// rounded and clamped.
pub fn quantize(stack: &ImageStack, depth: BitDepth) -> ImageStack {
    let maxval = depth.maxval() as f64;
    let scale = match stack.range {
        IntensityRange::Unit => maxval,
        _ => 1.0,
    };
    let frames = stack
        .frames()
        .iter()
        .map(|f| f.map(|v| (v * scale).round().clamp(0.0, maxval)))
        .collect();
    stack
        .with_frames(frames, IntensityRange::Raw)
        .expect("quantize preserves dimensions")
}

/// Loads the stack stored in `dir` under the default frame pattern.
pub fn load_stack_dir(dir: &Path, bit_depth: BitDepth) -> Result<ImageStack> {
    load_stack(&dir.join(FRAME_PATTERN).to_string_lossy(), bit_depth)
}

/// Writes `stack` into `dir` as `frame_%04d.pgm` plus the sidecar.
///
/// Unit-range stacks are scaled by the depth's maxval; other stacks are
/// written as rounded integers.
pub fn save_stack(dir: &Path, stack: &ImageStack, depth: BitDepth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pattern = FramePattern::parse(&dir.join(FRAME_PATTERN).to_string_lossy())?;
    let scale = match stack.range {
        IntensityRange::Unit => depth.maxval() as f64,
        _ => 1.0,
    };
    for (k, frame) in stack.frames().iter().enumerate() {
        let path = pattern.file_name(k);
        if scale == 1.0 {
            write_pgm(&path, frame, depth)?;
        } else {
            write_pgm(&path, &frame.map(|v| v * scale), depth)?;
        }
    }
    write_sidecar(
        &dir.join(SIDECAR),
        &StackMeta {
            width: stack.width(),
            height: stack.height(),
            frames: stack.len(),
            pixel_size: stack.pixel_size,
        },
    )
}

/// Writes binary masks into `dir` as 8-bit PGMs holding 0 and 255.
pub fn save_masks(dir: &Path, masks: &[Mask], pixel_size: f64) -> Result<()> {
    let frames = masks.iter().map(|m| m.to_frame().map(|v| v * 255.0)).collect();
    let stack = ImageStack::new(frames, pixel_size, IntensityRange::Raw)?;
    save_stack(dir, &stack, BitDepth::Eight)
}

/// Reads masks written by [`save_masks`]; any non-zero sample is inside.
pub fn load_masks(dir: &Path) -> Result<Vec<Mask>> {
    let stack = load_stack_dir(dir, BitDepth::Eight)?;
    Ok(stack.frames().iter().map(|f| f.threshold(0.0)).collect())
}

// ---------------------------------------------------------------------------
// Preconditioning

/// Maximum intensity projection along z. `volumes[θ][z]` is one z-plane.
pub fn max_projection(volumes: &[Vec<Frame>], pixel_size: f64) -> Result<ImageStack> {
    let mut frames = Vec::with_capacity(volumes.len());
    for planes in volumes {
        let (first, rest) = planes
            .split_first()
            .ok_or(Error::Empty("z-range of a slice"))?;
        let mut out = first.clone();
        for plane in rest {
            if plane.dims() != out.dims() {
                return Err(Error::DimensionMismatch {
                    expected: out.dims(),
                    found: plane.dims(),
                });
            }
            for (o, &v) in out.data_mut().iter_mut().zip(plane.data()) {
                if v > *o {
                    *o = v;
                }
            }
        }
        frames.push(out);
    }
    ImageStack::new(frames, pixel_size, IntensityRange::Raw)
}

/// Removes a small bright noise peak from one integer-valued frame.
///
/// Counting pixels downward from the maximum intensity, `I*` is the first
/// present intensity whose descending count reaches `N_tot · p_noise`. The
/// fewer-than-`N_noise` pixels brighter than `I*` are set to `I*`, the
/// largest intensity that survives the crop.
pub fn histogram_crop_frame(frame: &Frame, params: HistogramCropParams) -> Result<Frame> {
    let p = params.p_noise;
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::param("p_noise", format!("{p} outside [0, 1]")));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in frame.data() {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::param(
                "intensities",
                format!("histogram crop needs integer intensities, found {v}"),
            ));
        }
        *counts.entry(v as i64).or_default() += 1;
    }
    let n_noise = frame.len() as f64 * p;
    let mut descending = 0usize;
    let mut cut = None;
    for (&value, &count) in counts.iter().rev() {
        descending += count;
        if descending as f64 >= n_noise {
            cut = Some(value);
            break;
        }
    }
    let cut = cut.ok_or_else(|| Error::param("p_noise", "crop level falls below the minimum intensity"))?;
    let cut_f = cut as f64;
    Ok(frame.map(|v| if v > cut_f { cut_f } else { v }))
}

/// Applies [`histogram_crop_frame`] to every slice independently.
pub fn histogram_crop(stack: &ImageStack, params: HistogramCropParams) -> Result<ImageStack> {
    let frames = stack
        .frames()
        .iter()
        .map(|f| histogram_crop_frame(f, params))
        .collect::<Result<Vec<_>>>()?;
    stack.with_frames(frames, stack.range)
}

/// Global min–max rescale of the whole stack onto `[0, 1]` or `[0, 255]`.
///
/// The byte target rounds to integers. A constant stack maps to 0.
pub fn rescale(stack: &ImageStack, target: RescaleTarget) -> ImageStack {
    let (lo, hi) = stack.min_max();
    let span = hi - lo;
    let (top, range) = match target {
        RescaleTarget::Unit => (1.0, IntensityRange::Unit),
        RescaleTarget::Byte => (255.0, IntensityRange::Byte),
    };
    let frames = stack
        .frames()
        .iter()
        .map(|f| {
            f.map(|v| {
                let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
                match target {
                    RescaleTarget::Unit => t,
                    RescaleTarget::Byte => (t * top).round(),
                }
            })
        })
        .collect();
    stack
        .with_frames(frames, range)
        .expect("rescale preserves dimensions")
}
