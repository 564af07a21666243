//! File formats for rendered captures and evaluation curves: PFM float
//! images for Stokes channels and normal maps, PNG previews with fixed
//! mappings, and CSV curve tables. PFM payloads are 32-bit floats in
//! little-endian order (negative scale header), rows bottom to top.

use std::fs::{create_dir_all, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use image::{GrayImage, RgbImage};
use sha2::{Digest, Sha256};

use crate::geometry::Direction;
use crate::polarization::{aolp, dolp, StokesVector};
use crate::scene::{CurveBin, PolarimetricImage};
use crate::{Error, Result};

/// Sidecar metadata written next to the PFM channels.
#[derive(serde::Serialize, serde::Deserialize)]
struct ImageMeta {
    version: u32,
    spec_hash: String,
    width: u32,
    height: u32,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn write_pfm(path: &Path, width: u32, height: u32, channels: u32, data: &[f32]) -> Result<()> {
    debug_assert_eq!(data.len() as u32, width * height * channels);
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{magic}\n{width} {height}\n-1.0\n")?;
    let row = (width * channels) as usize;
    // PFM stores the bottom row first.
    for y in (0..height as usize).rev() {
        for &v in &data[y * row..(y + 1) * row] {
            w.write_f32::<LE>(v)?;
        }
    }
    Ok(())
}

fn read_pfm(path: &Path) -> Result<(u32, u32, u32, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let token = |r: &mut BufReader<File>| -> Result<String> {
        let mut out = String::new();
        loop {
            let mut byte = [0u8; 1];
            if r.read(&mut byte)? == 0 {
                return Err(bad("truncated header"));
            }
            let c = byte[0] as char;
            if c.is_whitespace() {
                if out.is_empty() {
                    continue;
                }
                return Ok(out);
            }
            out.push(c);
        }
    };
    let magic = token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let width: u32 = token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let height: u32 = token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&mut r)?.parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > 64_000_000 {
        return Err(bad("unreasonable dimensions"));
    }
    let row = (width * channels) as usize;
    let mut data = vec![0f32; row * height as usize];
    for y in (0..height as usize).rev() {
        for slot in &mut data[y * row..(y + 1) * row] {
            *slot = r.read_f32::<LE>()?;
        }
    }
    Ok((width, height, channels, data))
}

/// Writes an image as `<stem>.s0.pfm`, `.s1.pfm`, `.s2.pfm`, a 3-channel
/// `<stem>.normals.pfm`, and a `<stem>.meta.json` sidecar. Masked pixels
/// are zero in every file, including the normal map, which is what the
/// reader uses to reconstruct the mask. Returns the written paths.
pub fn write_image(img: &PolarimetricImage, stem: &Path) -> Result<Vec<PathBuf>> {
    let (w, h) = (img.width, img.height);
    let npx = (w * h) as usize;
    let mut paths = Vec::new();
    for (ext, pick) in [
        ("s0", 0usize),
        ("s1", 1),
        ("s2", 2),
    ] {
        let chan: Vec<f32> = (0..npx)
            .map(|i| {
                if !img.mask[i] {
                    return 0.0;
                }
                let s = img.stokes[i];
                [s.s0, s.s1, s.s2][pick] as f32
            })
            .collect();
        let path = stem.with_extension(format!("{ext}.pfm"));
        write_pfm(&path, w, h, 1, &chan)?;
        paths.push(path);
    }
    let normals: Vec<f32> = (0..npx)
        .flat_map(|i| {
            if img.mask[i] {
                let n = img.normals[i];
                [n.x as f32, n.y as f32, n.z as f32]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let npath = stem.with_extension("normals.pfm");
    write_pfm(&npath, w, h, 3, &normals)?;
    paths.push(npath);
    let meta = ImageMeta {
        version: 1,
        spec_hash: img.spec_hash.clone(),
        width: w,
        height: h,
    };
    let mpath = stem.with_extension("meta.json");
    ensure_parent(&mpath)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(&mpath)?), &meta)
        .map_err(|e| Error::Format(format!("writing {}: {e}", mpath.display())))?;
    paths.push(mpath);
    Ok(paths)
}

/// Reads an image written by `write_image`. The mask comes from the normal
/// map: a zero normal marks a masked pixel, and masked Stokes vectors are
/// forced to zero so the in-memory invariant holds whatever the files say.
pub fn read_image(stem: &Path) -> Result<PolarimetricImage> {
    let mpath = stem.with_extension("meta.json");
    let meta: ImageMeta = serde_json::from_reader(BufReader::new(File::open(&mpath)?))
        .map_err(|e| Error::Format(format!("reading {}: {e}", mpath.display())))?;
    if meta.version != 1 {
        return Err(Error::Format(format!(
            "unsupported image version {}",
            meta.version
        )));
    }
    let mut chans: Vec<Vec<f32>> = Vec::new();
    for ext in ["s0", "s1", "s2"] {
        let path = stem.with_extension(format!("{ext}.pfm"));
        let (w, h, c, data) = read_pfm(&path)?;
        if (w, h, c) != (meta.width, meta.height, 1) {
            return Err(Error::Format(format!(
                "{}: geometry mismatch with sidecar",
                path.display()
            )));
        }
        chans.push(data);
    }
    let npath = stem.with_extension("normals.pfm");
    let (w, h, c, ndata) = read_pfm(&npath)?;
    if (w, h, c) != (meta.width, meta.height, 3) {
        return Err(Error::Format(format!(
            "{}: geometry mismatch with sidecar",
            npath.display()
        )));
    }
    let npx = (w * h) as usize;
    let mut img = PolarimetricImage {
        width: w,
        height: h,
        stokes: Vec::with_capacity(npx),
        normals: Vec::with_capacity(npx),
        mask: Vec::with_capacity(npx),
        spec_hash: meta.spec_hash,
    };
    let up = Direction { x: 0.0, y: 0.0, z: 1.0 };
    for i in 0..npx {
        let (nx, ny, nz) = (
            ndata[3 * i] as f64,
            ndata[3 * i + 1] as f64,
            ndata[3 * i + 2] as f64,
        );
        let valid = (nx * nx + ny * ny + nz * nz).sqrt() > 0.5;
        if valid {
            img.normals.push(Direction::new(nx, ny, nz));
            img.stokes.push(StokesVector::new(
                chans[0][i] as f64,
                chans[1][i] as f64,
                chans[2][i] as f64,
                0.0,
            ));
        } else {
            img.normals.push(up);
            img.stokes.push(StokesVector::default());
        }
        img.mask.push(valid);
    }
    Ok(img)
}

fn save_gray(path: &Path, width: u32, height: u32, px: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    GrayImage::from_raw(width, height, px)
        .expect("buffer sized to the image")
        .save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

/// Intensity preview: s0 scaled by `exposure` (the valid-pixel maximum when
/// None), gamma 1/2.2, masked pixels black.
pub fn write_intensity_png(
    img: &PolarimetricImage,
    path: &Path,
    exposure: Option<f64>,
) -> Result<()> {
    let peak = exposure.unwrap_or_else(|| {
        img.stokes
            .iter()
            .zip(&img.mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s.s0)
            .fold(0.0, f64::max)
    });
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let px = img
        .stokes
        .iter()
        .zip(&img.mask)
        .map(|(s, &m)| {
            if !m {
                return 0;
            }
            let v = (s.s0 * scale).clamp(0.0, 1.0).powf(1.0 / 2.2);
            (v * 255.0).round() as u8
        })
        .collect();
    save_gray(path, img.width, img.height, px)
}

/// DoLP preview: [0, 1] mapped linearly to the gray ramp.
pub fn write_dolp_png(img: &PolarimetricImage, path: &Path) -> Result<()> {
    let px = img
        .stokes
        .iter()
        .zip(&img.mask)
        .map(|(s, &m)| {
            let d = if m { dolp(*s).unwrap_or(0.0) } else { 0.0 };
            (d.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    save_gray(path, img.width, img.height, px)
}

/// AoLP preview: orientation in (-pi/2, pi/2] mapped to the hue wheel at
/// full saturation; masked or unpolarized pixels black.
pub fn write_aolp_png(img: &PolarimetricImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut px = Vec::with_capacity(img.stokes.len() * 3);
    for (s, &m) in img.stokes.iter().zip(&img.mask) {
        let rgb = if m && dolp(*s).map(|d| d > 1e-9).unwrap_or(false) {
            let a = aolp(*s).unwrap_or(0.0);
            let hue = (a / std::f64::consts::PI + 0.5).clamp(0.0, 1.0);
            hue_to_rgb(hue)
        } else {
            [0, 0, 0]
        };
        px.extend_from_slice(&rgb);
    }
    RgbImage::from_raw(img.width, img.height, px)
        .expect("buffer sized to the image")
        .save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

/// Hue in [0, 1] to fully saturated RGB.
fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let h = (hue * 6.0).rem_euclid(6.0);
    let x = 1.0 - (h.rem_euclid(2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Writes curve bins as CSV with the `angle_deg,value,count` header.
pub fn write_curve_csv(bins: &[CurveBin], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "angle_deg,value,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.angle_deg, b.value, b.count)?;
    }
    Ok(())
}

/// Reads a curve CSV back; used by recomputation checks.
pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveBin>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "angle_deg,value,count" {
        return Err(Error::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut field = || {
            cols.next().ok_or_else(|| {
                Error::Format(format!("{}: short row {}", path.display(), ln + 2))
            })
        };
        let angle_deg: f64 = field()?.trim().parse().map_err(|e| {
            Error::Format(format!("{}: row {}: {e}", path.display(), ln + 2))
        })?;
        let value: f64 = field()?.trim().parse().map_err(|e| {
            Error::Format(format!("{}: row {}: {e}", path.display(), ln + 2))
        })?;
        let count: usize = field()?.trim().parse().map_err(|e| {
            Error::Format(format!("{}: row {}: {e}", path.display(), ln + 2))
        })?;
        out.push(CurveBin {
            angle_deg,
            value,
            count,
        });
    }
    Ok(out)
}

/// SHA-256 of a file, hex encoded; manifests use it to pin inputs.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
