//! ASCII PLY export with a per-vertex part id.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn write_ply<W: Write>(mut w: W, parts: &[PointCloud]) -> std::io::Result<()> {
    let total: usize = parts.iter().map(PointCloud::len).sum();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {total}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property int part")?;
    writeln!(w, "end_header")?;
    for (id, part) in parts.iter().enumerate() {
        for p in part.points() {
            writeln!(w, "{} {} {} {}", p[0], p[1], p[2], id)?;
        }
    }
    Ok(())
}

pub fn save_ply(path: &Path, parts: &[PointCloud]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(std::io::BufWriter::new(f), parts).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_part_ids() {
        let a = PointCloud::new(vec![[0.0, 0.5, 1.0]]).unwrap();
        let b = PointCloud::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &[a, b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("element vertex 3\n"));
        assert!(text.contains("property int part\n"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body, ["0 0.5 1 0", "1 2 3 1", "4 5 6 1"]);
    }
}
