//! File formats: ASCII PLY point clouds, query grids, and CSV outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Color, Point3, PointCloud, Vector3};
use crate::gp::FieldSample;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Ply { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.display().to_string(), source }
}

/// Writes an ASCII PLY with double-precision coordinates and, when the cloud
/// carries them, `uchar` colors.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    write_ply_to(&mut w, cloud).map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

pub fn write_ply_to<W: Write>(w: &mut W, cloud: &PointCloud) -> std::io::Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if cloud.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        // `{:?}` prints the shortest representation that round-trips.
        match cloud.color(i) {
            Some([r, g, b]) => writeln!(w, "{:?} {:?} {:?} {r} {g} {b}", p.x, p.y, p.z)?,
            None => writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Reads the vertex element of an ASCII PLY. Non-finite coordinates are kept;
/// callers decide whether to drop them.
pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    read_ply_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_ply_from<R: BufRead>(reader: R, name: &str) -> Result<PointCloud, IoError> {
    let err = |line: usize, message: String| IoError::Ply { path: name.to_string(), line, message };
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String), IoError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((n, Err(e))) => Err(err(n, e.to_string())),
            None => Err(err(0, format!("unexpected end of file while reading {what}"))),
        }
    };

    let (n, magic) = next("header")?;
    if magic.trim() != "ply" {
        return Err(err(n, "missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (n, line) = next("header")?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err(n, format!("unsupported format '{other}', only ascii is read"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(n, format!("bad element count '{count}'")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", ..] => {
                let e = elements.last_mut().ok_or_else(|| err(n, "property before element".into()))?;
                e.properties.push("list".into());
            }
            ["property", _ty, prop] => {
                let e = elements.last_mut().ok_or_else(|| err(n, "property before element".into()))?;
                e.properties.push(prop.to_string());
            }
            _ => return Err(err(n, format!("unrecognized header line '{line}'"))),
        }
    }

    let mut cloud = PointCloud::new();
    for e in &elements {
        if e.name != "vertex" {
            for _ in 0..e.count {
                next(&e.name)?;
            }
            continue;
        }
        let idx = |name: &str| e.properties.iter().position(|p| p == name);
        let (Some(ix), Some(iy), Some(iz)) = (idx("x"), idx("y"), idx("z")) else {
            return Err(err(0, "vertex element lacks x, y, z".into()));
        };
        if e.properties.iter().any(|p| p == "list") {
            return Err(err(0, "list properties on vertices are not supported".into()));
        }
        let rgb = match (idx("red"), idx("green"), idx("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        let mut points = Vec::with_capacity(e.count);
        let mut colors: Vec<Color> = Vec::new();
        for _ in 0..e.count {
            let (n, line) = next("vertex data")?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != e.properties.len() {
                return Err(err(n, format!("expected {} values, found {}", e.properties.len(), tokens.len())));
            }
            let num = |i: usize| tokens[i].parse::<f64>().map_err(|_| err(n, format!("bad number '{}'", tokens[i])));
            points.push(Point3::new(num(ix)?, num(iy)?, num(iz)?));
            if let Some(ch) = rgb {
                let mut c = [0u8; 3];
                for (k, &i) in ch.iter().enumerate() {
                    c[k] = tokens[i].parse().map_err(|_| err(n, format!("bad color '{}'", tokens[i])))?;
                }
                colors.push(c);
            }
        }
        cloud = if rgb.is_some() { PointCloud::with_colors(points, colors) } else { PointCloud::from_points(points) };
    }
    Ok(cloud)
}

/// A rectangular grid of query points on a plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGrid {
    pub origin: [f64; 3],
    /// In-plane directions; normalized on use.
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub spacing: f64,
    pub u_count: usize,
    pub v_count: usize,
}

impl QueryGrid {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        let grid: QueryGrid = serde_json::from_str(&text)?;
        grid.validate().map_err(|message| IoError::Format { path: path.display().to_string(), message })?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), String> {
        let u = Vector3::from(self.u_axis);
        let v = Vector3::from(self.v_axis);
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err("spacing must be positive".into());
        }
        if u.norm() == 0.0 || v.norm() == 0.0 || u.normalize().cross(&v.normalize()).norm() < 1e-9 {
            return Err("axes must be non-zero and not parallel".into());
        }
        if self.u_count == 0 || self.v_count == 0 {
            return Err("grid counts must be positive".into());
        }
        Ok(())
    }

    /// Points in row-major order (v outer, u inner).
    pub fn points(&self) -> Vec<Point3> {
        let o = Point3::from(self.origin);
        let u = Vector3::from(self.u_axis).normalize() * self.spacing;
        let v = Vector3::from(self.v_axis).normalize() * self.spacing;
        (0..self.v_count).flat_map(|j| (0..self.u_count).map(move |i| o + u * i as f64 + v * j as f64)).collect()
    }
}

/// Writes `x,y,z,distance,gx,gy,gz` rows.
pub fn write_samples_csv(path: &Path, points: &[Point3], samples: &[FieldSample]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z", "distance", "gx", "gy", "gz"])?;
    for (p, s) in points.iter().zip(samples) {
        let g = s.gradient;
        w.write_record([p.x, p.y, p.z, s.distance, g.x, g.y, g.z].map(|v| v.to_string()))?;
    }
    w.flush().map_err(file_err(path))
}

/// Writes `k,x,y,z` rows.
pub fn write_trajectory_csv(path: &Path, waypoints: &[Point3]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "x", "y", "z"])?;
    for (k, p) in waypoints.iter().enumerate() {
        w.write_record([k.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
    }
    w.flush().map_err(file_err(path))
}

/// Writes `iteration,cost` rows.
pub fn write_cost_csv(path: &Path, costs: &[f64]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "cost"])?;
    for (k, c) in costs.iter().enumerate() {
        w.write_record([k.to_string(), c.to_string()])?;
    }
    w.flush().map_err(file_err(path))
}

/// Writes serializable rows with a header derived from the field names.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(file_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let cloud = PointCloud::with_colors(
            vec![Point3::new(0.1, -2.0 / 3.0, 1e-17), Point3::new(f64::MAX, 3.0, -0.0)],
            vec![[1, 2, 3], [255, 0, 128]],
        );
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.colors, cloud.colors);

        let plain = PointCloud::from_points(vec![Point3::new(1.0, 2.0, 3.0)]);
        write_ply(&path, &plain).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points, plain.points);
        assert!(back.colors.is_none());
    }

    #[test]
    fn reads_foreign_headers_and_nan() {
        let text =
            "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty float nx\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n1 2 3 0\nnan 0 0 1\n3 0 1 2\n";
        let cloud = read_ply_from(text.as_bytes(), "mem").unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0], Point3::new(1.0, 2.0, 3.0));
        assert!(cloud.points[1].x.is_nan());
    }

    #[test]
    fn malformed_ply_reports_line() {
        let bad = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\n\
                   end_header\n0 0 0\n1 oops 2\n";
        match read_ply_from(bad.as_bytes(), "mem") {
            Err(IoError::Ply { line, .. }) => assert_eq!(line, 9),
            other => panic!("unexpected {other:?}"),
        }
        let short =
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\n\
                     end_header\n0 0 0\n";
        assert!(read_ply_from(short.as_bytes(), "mem").is_err());
        let binary = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(read_ply_from(binary.as_bytes(), "mem").is_err());
        assert!(read_ply_from("hello\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn grid_points() {
        let g = QueryGrid {
            origin: [0.0, 0.0, 1.0],
            u_axis: [2.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
            spacing: 0.5,
            u_count: 3,
            v_count: 2,
        };
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[2], Point3::new(1.0, 0.0, 1.0));
        assert_eq!(pts[3], Point3::new(0.0, 0.5, 1.0));
        let mut bad = g.clone();
        bad.v_axis = [4.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&path, &[Point3::new(0.0, 1.0, 2.5)]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "k,x,y,z\n0,0,1,2.5\n");
        write_cost_csv(&path, &[3.0, 1.5]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "iteration,cost\n0,3\n1,1.5\n");
    }
}
