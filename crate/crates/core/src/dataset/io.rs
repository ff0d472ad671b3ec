//! On-disk layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/parts/<shape_id>_p<NN>.bin    n_pc × 3 little-endian f64, row-major
//! ```
//!
//! Poses (`w x y z tx ty tz`) and contact points (`x y z`) are decimal text
//! in shortest round-trip form, so reloading is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Contact, ShapeRecord};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, Vec3};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "ccs-fracture-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    n_pc: usize,
    shapes: Vec<ShapeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeEntry {
    id: String,
    category: String,
    n_parts: usize,
    parts: Vec<PartEntry>,
    contacts: Vec<ContactEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartEntry {
    file: String,
    pose: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactEntry {
    i: usize,
    j: usize,
    on_i: String,
    on_j: String,
}

fn vec3_text(v: Vec3) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn parse_vec3(s: &str) -> std::result::Result<Vec3, String> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected 3 numbers, found {}", v.len()))
}

pub fn save_dataset(records: &[ShapeRecord], dir: &Path) -> Result<()> {
    let parts_dir = dir.join("parts");
    fs::create_dir_all(&parts_dir).map_err(|e| Error::io(&parts_dir, e))?;
    let n_pc = records.first().map_or(0, ShapeRecord::n_pc);
    let mut shapes = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        if rec.n_pc() != n_pc {
            return Err(Error::Contract(format!("{}: n_pc {} differs from {n_pc}", rec.shape_id, rec.n_pc())));
        }
        let mut parts = Vec::with_capacity(rec.n_parts());
        for (i, (cloud, pose)) in rec.parts.iter().zip(&rec.gt_poses).enumerate() {
            let file = format!("parts/{}_p{i:02}.bin", rec.shape_id);
            let bytes: Vec<u8> = cloud.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            parts.push(PartEntry {
                file,
                pose: pose.to_text(),
            });
        }
        shapes.push(ShapeEntry {
            id: rec.shape_id.clone(),
            category: rec.category.clone(),
            n_parts: rec.n_parts(),
            parts,
            contacts: rec
                .contacts
                .iter()
                .map(|c| ContactEntry {
                    i: c.i,
                    j: c.j,
                    on_i: vec3_text(c.on_i),
                    on_j: vec3_text(c.on_j),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        n_pc,
        shapes,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ShapeRecord>> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::parse(&mpath, field, e.into_inner().to_string())
    })?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::parse(&mpath, "format", format!("expected {FORMAT_NAME:?}, found {:?}", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::parse(
            &mpath,
            "version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", manifest.version),
        ));
    }

    let mut out = Vec::with_capacity(manifest.shapes.len());
    for (s, shape) in manifest.shapes.iter().enumerate() {
        let field = |f: String| format!("shapes[{s}].{f}");
        if shape.n_parts != shape.parts.len() {
            return Err(Error::parse(
                &mpath,
                field("n_parts".into()),
                format!("{} declared, {} listed", shape.n_parts, shape.parts.len()),
            ));
        }
        let mut parts = Vec::with_capacity(shape.parts.len());
        let mut poses = Vec::with_capacity(shape.parts.len());
        for (p, part) in shape.parts.iter().enumerate() {
            let pose = Pose::from_text(&part.pose).map_err(|m| Error::parse(&mpath, field(format!("parts[{p}].pose")), m))?;
            let path: PathBuf = dir.join(&part.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != manifest.n_pc * 3 * 8 {
                return Err(Error::parse(
                    &path,
                    "payload",
                    format!("{} bytes, expected {}", bytes.len(), manifest.n_pc * 24),
                ));
            }
            let flat: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            parts.push(PointCloud::from_flat(&flat)?);
            poses.push(pose);
        }
        let contacts = shape
            .contacts
            .iter()
            .enumerate()
            .map(|(c, e)| {
                let on = |v: &str, name: &str| {
                    parse_vec3(v).map_err(|m| Error::parse(&mpath, field(format!("contacts[{c}].{name}")), m))
                };
                Ok(Contact {
                    i: e.i,
                    j: e.j,
                    on_i: on(&e.on_i, "on_i")?,
                    on_j: on(&e.on_j, "on_j")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = ShapeRecord {
            shape_id: shape.id.clone(),
            category: shape.category.clone(),
            parts,
            gt_poses: poses,
            contacts,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenConfig};

    fn corpus() -> Vec<ShapeRecord> {
        generate_dataset(&GenConfig {
            n_pc: 16,
            dense_points: 1024,
            cuts_max: 4,
            count: 3,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let recs = corpus();
        save_dataset(&recs, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), recs);
    }

    #[test]
    fn missing_part_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let recs = corpus();
        save_dataset(&recs, dir.path()).unwrap();
        let victim = dir.path().join(format!("parts/{}_p01.bin", recs[1].shape_id));
        fs::remove_file(&victim).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Io { path, .. }) => assert_eq!(path, victim),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&corpus(), dir.path()).unwrap();
        let m = dir.path().join("manifest.json");
        let text = fs::read_to_string(&m).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { field, .. }) if field == "version"));
    }

    #[test]
    fn malformed_field_is_located() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&corpus(), dir.path()).unwrap();
        let m = dir.path().join("manifest.json");
        let text = fs::read_to_string(&m).unwrap().replacen("\"n_parts\": ", "\"n_parts\": \"x\", \"_\": ", 1);
        fs::write(&m, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { file, field, .. }) => {
                assert_eq!(file, m);
                assert!(field.starts_with("shapes[0]"), "{field}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
