//! On-disk scene layout:
//!
//! ```text
//! <dir>/images/<id>.png          8-bit RGB
//! <dir>/sparse_depth/<id>.psdm   depth raster
//! <dir>/dense_depth/<id>.psdm    depth raster (scale-ambiguous)
//! <dir>/poses.txt                images/<id>.png qw qx qy qz tx ty tz
//! <dir>/intrinsics.txt           images/<id>.png fx fy cx cy width height
//! <dir>/split.txt                <id> train|test
//! ```
//!
//! Depth rasters: 16-byte header (`b"PSDM"`, width u32, height u32, reserved
//! u32, little endian) followed by `width * height` little-endian f32 values.
//! Invalid pixels are stored as 0.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{
    compute_descriptor, DepthMap, ImageBuffer, SceneDatabase, SceneRecord, Split,
    DEFAULT_DESCRIPTOR_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

pub const DEPTH_MAGIC: &[u8; 4] = b"PSDM";
const HEADER_LEN: usize = 16;

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + depth.len() * 4);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&depth.width.to_le_bytes());
    buf.extend_from_slice(&depth.height.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for (d, &ok) in depth.depth.iter().zip(&depth.valid) {
        let v = if ok { *d as f32 } else { 0.0 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptDepth {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != DEPTH_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height) = (word(4), word(8));
    let n = width as usize * height as usize;
    let expected = HEADER_LEN + n * 4;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes for {width}x{height}, found {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DepthMap::from_values(width, height, values))
}

fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let raw: Vec<u8> = img
        .data
        .iter()
        .flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    image::save_buffer(path, &raw, img.width, img.height, image::ExtendedColorType::Rgb8).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageBuffer::from_fn(w, h, |u, v| {
        img.get_pixel(u, v).0.map(|c| c as f64 / 255.0)
    }))
}

/// Writes an image as 8-bit PNG.
pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_png(path, img)
}

fn write_text(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn id_from_image_path(path: &Path, name: &str) -> Result<String> {
    name.strip_prefix("images/")
        .and_then(|s| s.strip_suffix(".png"))
        .map(String::from)
        .ok_or_else(|| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("unexpected image path {name:?}"),
        })
}

pub fn save_scene(db: &SceneDatabase, dir: &Path) -> Result<()> {
    for sub in ["images", "sparse_depth", "dense_depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for r in db.records() {
        write_png(&dir.join(r.image_path()), &r.image)?;
        write_depth(&dir.join(format!("sparse_depth/{}.psdm", r.id)), &r.sparse_depth)?;
        write_depth(&dir.join(format!("dense_depth/{}.psdm", r.id)), &r.dense_depth_affine)?;
    }
    let recs = db.records();
    write_text(&dir.join("poses.txt"), recs.iter().map(|r| r.pose.to_line(&r.image_path())))?;
    write_text(
        &dir.join("intrinsics.txt"),
        recs.iter().map(|r| format!("{} {}", r.image_path(), r.intrinsics.to_line())),
    )?;
    write_text(
        &dir.join("split.txt"),
        recs.iter().map(|r| format!("{} {}", r.id, r.split.as_str())),
    )
}

pub fn load_scene(dir: &Path) -> Result<SceneDatabase> {
    load_scene_with(dir, DEFAULT_DESCRIPTOR_DIM)
}

/// Loads a scene and recomputes descriptors of length `descriptor_dim`.
pub fn load_scene_with(dir: &Path, descriptor_dim: usize) -> Result<SceneDatabase> {
    let poses_path = dir.join("poses.txt");
    let intr_path = dir.join("intrinsics.txt");
    let split_path = dir.join("split.txt");
    let bad = |path: &PathBuf, reason: String| Error::CorruptFile {
        path: path.clone(),
        reason,
    };

    let mut intrinsics = std::collections::HashMap::new();
    for line in read_lines(&intr_path)? {
        let (name, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad(&intr_path, format!("malformed line {line:?}")))?;
        let k: Intrinsics = rest.parse().map_err(|e| bad(&intr_path, e))?;
        intrinsics.insert(id_from_image_path(&intr_path, name)?, k);
    }
    let mut splits = std::collections::HashMap::new();
    for line in read_lines(&split_path)? {
        let mut it = line.split_whitespace();
        let (Some(id), Some(s), None) = (it.next(), it.next(), it.next()) else {
            return Err(bad(&split_path, format!("malformed line {line:?}")));
        };
        let split: Split = s.parse().map_err(|e| bad(&split_path, e))?;
        splits.insert(id.to_string(), split);
    }

    let mut records = Vec::new();
    for line in read_lines(&poses_path)? {
        let (name, pose): (String, Pose) =
            Pose::parse_line(&line).map_err(|e| bad(&poses_path, e))?;
        let id = id_from_image_path(&poses_path, &name)?;
        let k = *intrinsics
            .get(&id)
            .ok_or_else(|| bad(&intr_path, format!("missing intrinsics for {id}")))?;
        let split = *splits
            .get(&id)
            .ok_or_else(|| bad(&split_path, format!("missing split for {id}")))?;
        let image = read_png(&dir.join(&name))?;
        let sparse_depth = read_depth(&dir.join(format!("sparse_depth/{id}.psdm")))?;
        let dense_depth_affine = read_depth(&dir.join(format!("dense_depth/{id}.psdm")))?;
        let descriptor = compute_descriptor(&image, descriptor_dim);
        records.push(SceneRecord {
            id,
            split,
            image,
            sparse_depth,
            dense_depth_affine,
            pose,
            intrinsics: k,
            descriptor,
            true_depth: None,
            corruption: None,
        });
    }
    SceneDatabase::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec};

    #[test]
    fn depth_raster_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.psdm");
        let mut d = DepthMap::invalid(3, 2);
        d.set(0, 1.5);
        d.set(4, 1234.0625);
        d.set(5, (0.1f32) as f64);
        write_depth(&path, &d).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, d);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PSDM");
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn truncated_depth_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.psdm");
        write_depth(&path, &DepthMap::invalid(4, 4)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_depth(&path) {
            Err(Error::CorruptDepth { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected CorruptDepth, got {other:?}"),
        }
        fs::write(&path, b"PSD").unwrap();
        assert!(matches!(read_depth(&path), Err(Error::CorruptDepth { .. })));
        fs::write(&path, b"XXXX000000000000").unwrap();
        assert!(matches!(read_depth(&path), Err(Error::CorruptDepth { .. })));
    }

    #[test]
    fn scene_round_trip() {
        let spec = SceneSpec::biased_street().with_counts(6, 2).with_size(24, 16);
        let db = generate_scene(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&db, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.len(), db.len());
        for (a, b) in db.records().iter().zip(back.records()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.intrinsics, b.intrinsics);
            // generated images sit on the 8-bit grid
            assert_eq!(a.image, b.image);
            assert_eq!(a.descriptor, b.descriptor);
            assert_eq!(a.sparse_depth, b.sparse_depth);
            for (x, y) in a.dense_depth_affine.depth.iter().zip(&b.dense_depth_affine.depth) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // a loaded scene re-saves to identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        save_scene(&back, dir2.path()).unwrap();
        for name in ["poses.txt", "intrinsics.txt", "split.txt", "dense_depth/00001.psdm"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap()
            );
        }
        let again = load_scene(dir2.path()).unwrap();
        assert_eq!(again.record(1).dense_depth_affine, back.record(1).dense_depth_affine);
    }

    #[test]
    fn png_quantization_bound() {
        let img = ImageBuffer::from_fn(7, 5, |u, v| [u as f64 / 7.0, v as f64 / 5.0, 0.333]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(err.to_string().contains("intrinsics.txt"), "{err}");
    }
}
