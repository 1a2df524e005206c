//! Point-cloud file formats.
//!
//! `bin_xyzi` is the common automotive dump layout: consecutive little-endian
//! 32-bit float quadruples (x, y, z, intensity). `ascii_xyz` is one
//! whitespace-separated triple per line with `#` comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointFormat {
    BinXyzi,
    AsciiXyz,
}

pub fn load_points(path: &Path, format: PointFormat) -> Result<PointCloud> {
    match format {
        PointFormat::BinXyzi => load_bin(path),
        PointFormat::AsciiXyz => load_ascii(path),
    }
}

fn load_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|chunk| {
            let f = |o: usize| f32::from_le_bytes(chunk[o..o + 4].try_into().expect("4 bytes"));
            Point3::with_intensity(f64::from(f(0)), f64::from(f(4)), f64::from(f(8)), f(12))
        })
        .collect();
    Ok(PointCloud::new(points))
}

fn load_ascii(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{}: expected 3 coordinates, found {}",
                path.display(),
                line_no + 1,
                tokens.len()
            )));
        }
        let mut xyz = [0.0f64; 3];
        for (axis, token) in tokens.iter().enumerate() {
            xyz[axis] = token.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}:{}: bad number {token:?}",
                    path.display(),
                    line_no + 1
                ))
            })?;
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud::new(points))
}

pub fn save_points(cloud: &PointCloud, path: &Path, format: PointFormat) -> Result<()> {
    match format {
        PointFormat::BinXyzi => {
            let mut bytes = Vec::with_capacity(cloud.len() * 16);
            for p in &cloud.points {
                bytes.extend_from_slice(&(p.x as f32).to_le_bytes());
                bytes.extend_from_slice(&(p.y as f32).to_le_bytes());
                bytes.extend_from_slice(&(p.z as f32).to_le_bytes());
                bytes.extend_from_slice(&p.intensity.unwrap_or(0.0).to_le_bytes());
            }
            fs::write(path, bytes)?;
        }
        PointFormat::AsciiXyz => {
            let mut out = Vec::new();
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
            }
            fs::write(path, out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_byte_file_is_one_origin_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        std::fs::write(&path, [0u8; 16]).unwrap();
        let cloud = load_points(&path, PointFormat::BinXyzi).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], Point3::with_intensity(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn truncated_binary_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [0u8; 17]).unwrap();
        let err = load_points(&path, PointFormat::BinXyzi).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn bin_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        // Coordinates chosen exactly representable in f32.
        let cloud = PointCloud::new(vec![
            Point3::with_intensity(1.5, -2.25, 0.125, 0.75),
            Point3::with_intensity(-51.25, 3.0, -5.0, 0.0),
        ]);
        save_points(&cloud, &path, PointFormat::BinXyzi).unwrap();
        let loaded = load_points(&path, PointFormat::BinXyzi).unwrap();
        assert_eq!(loaded, cloud);
        // Saving the loaded cloud reproduces the file bytes.
        let path2 = dir.path().join("cloud2.bin");
        save_points(&loaded, &path2, PointFormat::BinXyzi).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn ascii_parses_comments_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        std::fs::write(&path, "# header\n1.0 2.0 3.0\n\n4 5 6 # trailing comment\n").unwrap();
        let cloud = load_points(&path, PointFormat::AsciiXyz).unwrap();
        assert_eq!(cloud.points, vec![Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)]);

        std::fs::write(&path, "1.0 two 3.0\n").unwrap();
        assert!(matches!(load_points(&path, PointFormat::AsciiXyz), Err(Error::Parse(_))));
        std::fs::write(&path, "1.0 2.0\n").unwrap();
        assert!(matches!(load_points(&path, PointFormat::AsciiXyz), Err(Error::Parse(_))));
    }
}
