//! On-disk formats: RVIM range images, binary PLY point clouds, scene
//! manifests and raw float planes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::{BeamTable, LidarPoint, Pose, RangeImage};

const RVIM_MAGIC: &[u8; 4] = b"RVIM";
const RVIM_VERSION: u32 = 1;

pub fn write_rvim<W: Write>(mut out: W, img: &RangeImage) -> Result<()> {
    out.write_all(RVIM_MAGIC)?;
    out.write_all(&RVIM_VERSION.to_le_bytes())?;
    out.write_all(&(img.height() as u32).to_le_bytes())?;
    out.write_all(&(img.width() as u32).to_le_bytes())?;
    for plane in [&img.depth, &img.intensity, &img.raydrop] {
        write_f32_plane(&mut out, plane)?;
    }
    Ok(())
}

pub fn read_rvim<R: Read>(mut input: R) -> Result<RangeImage> {
    let mut head = [0u8; 16];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::format("RVIM", "truncated header"))?;
    if &head[..4] != RVIM_MAGIC {
        return Err(Error::format("RVIM", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RVIM_VERSION {
        return Err(Error::format("RVIM", format!("unsupported version {version}")));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let n = h
        .checked_mul(w)
        .filter(|n| *n <= 1 << 28)
        .ok_or_else(|| Error::format("RVIM", "image too large"))?;
    let mut planes = Vec::with_capacity(3);
    for _ in 0..3 {
        planes.push(read_f32_plane(&mut input, n).map_err(|_| Error::format("RVIM", "truncated data"))?);
    }
    let raydrop = planes.pop().unwrap();
    let intensity = planes.pop().unwrap();
    let depth = planes.pop().unwrap();
    RangeImage::from_channels(h, w, depth, intensity, raydrop)
        .map_err(|e| Error::format("RVIM", e.to_string()))
}

pub fn save_rvim(path: impl AsRef<Path>, img: &RangeImage) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_rvim(&mut f, img)?;
    f.flush()?;
    Ok(())
}

pub fn load_rvim(path: impl AsRef<Path>) -> Result<RangeImage> {
    read_rvim(BufReader::new(File::open(path)?))
}

pub(crate) fn write_f32_plane<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32_plane<R: Read>(input: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Write a bare little-endian float32 plane (no header).
pub fn save_f32_plane(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_f32_plane(&mut f, values)?;
    f.flush()?;
    Ok(())
}

/// Binary PGM of a boolean grid (255 = set).
pub fn save_mask_pgm(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_ply<W: Write>(mut out: W, points: &[LidarPoint]) -> Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        points.len()
    )?;
    let mut buf = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Read a binary little-endian PLY whose first element is `vertex` with
/// scalar properties including `x`, `y`, `z` (and optionally `intensity`).
pub fn read_ply<R: BufRead>(mut input: R) -> Result<Vec<LidarPoint>> {
    let bad = |m: &str| Error::format("PLY", m.to_string());
    let mut line = String::new();
    let next_line = |input: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        if input.read_line(line)? == 0 {
            return Err(Error::format("PLY", "unexpected end of header"));
        }
        Ok(())
    };
    next_line(&mut input, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing 'ply' signature"));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    let mut saw_format = false;
    loop {
        next_line(&mut input, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad("only binary_little_endian is supported"));
                }
                saw_format = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if count.is_some() {
                    in_vertex = false;
                    continue;
                }
                if *name != "vertex" {
                    return Err(bad("first element must be 'vertex'"));
                }
                count = Some(n.parse().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties unsupported")),
            ["property", ty, name] => {
                if in_vertex {
                    let ty = PlyScalar::parse(ty).ok_or_else(|| bad("unknown property type"))?;
                    props.push((name.to_string(), ty));
                }
            }
            _ => return Err(bad(&format!("unexpected header line '{}'", line.trim_end()))),
        }
    }
    if !saw_format {
        return Err(bad("missing format line"));
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex needs x, y, z")),
    };
    let ii = find("intensity");
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, t) in &props {
        offsets.push(stride);
        stride += t.size();
    }
    let mut buf = vec![0u8; count.checked_mul(stride).ok_or_else(|| bad("too many vertices"))?];
    input
        .read_exact(&mut buf)
        .map_err(|_| bad("truncated vertex data"))?;
    let field = |rec: &[u8], k: usize| props[k].1.read(&rec[offsets[k]..]);
    Ok(buf
        .chunks_exact(stride.max(1))
        .take(count)
        .map(|rec| LidarPoint::new(
            field(rec, ix),
            field(rec, iy),
            field(rec, iz),
            ii.map_or(0.0, |k| field(rec, k)),
        ))
        .collect())
}

pub fn save_ply(path: impl AsRef<Path>, points: &[LidarPoint]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_ply(&mut f, points)?;
    f.flush()?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<Vec<LidarPoint>> {
    read_ply(BufReader::new(File::open(path)?))
}

/// One frame entry of a manifest: pose and scan path relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub pose: [f64; 16],
    pub scan: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub timestamp: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// Scene manifest: beam layout plus a list of posed scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub beams: Vec<f64>,
    pub width: usize,
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    pub fn beam_table(&self) -> Result<BeamTable> {
        BeamTable::new(self.beams.clone(), self.width)
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.frames
            .iter()
            .map(|f| Pose::from_row_major(&f.pose, f.timestamp))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A posed scan held in memory.
#[derive(Clone, Debug)]
pub struct Frame {
    pub pose: Pose,
    pub scan: RangeImage,
}

/// Manifest contents with every scan loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub beams: BeamTable,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let beams = manifest.beam_table()?;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for entry in &manifest.frames {
            let pose = Pose::from_row_major(&entry.pose, entry.timestamp)?;
            let scan = load_scan(&base.join(&entry.scan), &beams)?;
            if scan.dims() != (beams.height(), beams.width()) {
                return Err(Error::DimensionMismatch {
                    expected: (beams.height(), beams.width()),
                    got: scan.dims(),
                });
            }
            frames.push(Frame { pose, scan });
        }
        Ok(Self { beams, frames })
    }

    /// Write scans as `<dir>/<prefix>_<i>.rvim` and a manifest at `manifest_path`.
    pub fn save(&self, manifest_path: impl AsRef<Path>, scan_dir: &str, prefix: &str) -> Result<Manifest> {
        let manifest_path = manifest_path.as_ref();
        let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        std::fs::create_dir_all(base.join(scan_dir))?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let rel = format!("{scan_dir}/{prefix}_{i:04}.rvim");
            save_rvim(base.join(&rel), &f.scan)?;
            frames.push(FrameEntry {
                pose: f.pose.to_row_major(),
                scan: rel,
                timestamp: f.pose.timestamp,
            });
        }
        let manifest = Manifest {
            beams: self.beams.elevations().to_vec(),
            width: self.beams.width(),
            frames,
        };
        manifest.save(manifest_path)?;
        Ok(manifest)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

/// Load a scan referenced by a manifest; `.ply` scans (sensor frame) are
/// projected with the manifest's beam table.
fn load_scan(path: &Path, beams: &BeamTable) -> Result<RangeImage> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        crate::rangeview::project_points(&load_ply(path)?, beams)
    } else {
        load_rvim(path)
    }
}
