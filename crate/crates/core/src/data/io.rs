use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{byte_to_unit, unit_to_byte};
use super::{DataError, GrayImage, ProbePose, Sweep, SweepFrame};

const MANIFEST: &str = "manifest.json";
const FRAMES_DIR: &str = "frames";

/// `manifest.json` of a sweep directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub pixel_spacing_mm: f64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    pub time_s: f64,
    pub pose_mm: [f64; 3],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Encodes an image as binary 8-bit PGM (`P5`, maxval 255).
pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<(), DataError> {
    let mut buf = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    buf.extend(image.data().iter().map(|&v| unit_to_byte(v)));
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes).map_err(|reason| DataError::CorruptPgm {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    let mut pos = 0;
    let mut next_token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    if magic != "P5" {
        return Err(format!("bad magic `{magic}`"));
    }
    let mut num = |what: &str| -> Result<usize, String> {
        next_token()?
            .parse::<usize>()
            .map_err(|_| format!("bad {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        ));
    }
    GrayImage::new(width, height, raster.iter().map(|&b| byte_to_unit(b)).collect())
        .ok_or_else(|| "empty image".to_string())
}

fn frame_file(index: usize) -> String {
    format!("{FRAMES_DIR}/{index:06}.pgm")
}

/// Writes `manifest.json` and `frames/%06d.pgm` under `dir`.
///
/// Images are stored at 8 bits, so the round trip is exact for frames whose
/// intensities are multiples of 1/255 (everything the phantom generator emits).
pub fn save_sweep(sweep: &Sweep, dir: &Path) -> Result<(), DataError> {
    sweep.validate()?;
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let mut entries = Vec::with_capacity(sweep.len());
    for f in &sweep.frames {
        let file = frame_file(f.frame_index);
        write_pgm(&f.image, &dir.join(&file))?;
        entries.push(FrameEntry {
            index: f.frame_index,
            file,
            time_s: f.time_s,
            pose_mm: f.pose.position,
        });
    }
    let manifest = Manifest {
        id: sweep.id.clone(),
        pixel_spacing_mm: sweep.pixel_spacing_mm,
        frames: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_sweep(dir: &Path) -> Result<Sweep, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| DataError::Manifest { path, source })?;

    let listed: BTreeSet<PathBuf> = manifest.frames.iter().map(|e| dir.join(&e.file)).collect();
    for e in &manifest.frames {
        let p = dir.join(&e.file);
        if !p.is_file() {
            return Err(DataError::ManifestMismatch(format!(
                "frame {} lists missing file {}",
                e.index,
                p.display()
            )));
        }
    }
    let frames_dir = dir.join(FRAMES_DIR);
    if frames_dir.is_dir() {
        for entry in fs::read_dir(&frames_dir).map_err(io_err(&frames_dir))? {
            let p = entry.map_err(io_err(&frames_dir))?.path();
            if p.extension().is_some_and(|e| e == "pgm") && !listed.contains(&p) {
                return Err(DataError::ManifestMismatch(format!(
                    "{} is not listed in the manifest",
                    p.display()
                )));
            }
        }
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, e) in manifest.frames.iter().enumerate() {
        if e.index != i {
            return Err(DataError::ManifestMismatch(format!(
                "entry {i} has index {}, expected {i}",
                e.index
            )));
        }
        frames.push(SweepFrame {
            image: read_pgm(&dir.join(&e.file))?,
            time_s: e.time_s,
            pose: ProbePose {
                position: e.pose_mm,
            },
            frame_index: e.index,
        });
    }
    let sweep = Sweep {
        id: manifest.id,
        frames,
        pixel_spacing_mm: manifest.pixel_spacing_mm,
    };
    sweep.validate()?;
    Ok(sweep)
}
