//! XYZ, ASCII PLY and OFF readers/writers.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use super::{CloudError, Point, PointCloud};
use crate::util::{atomic_write, format_sig};

/// Significant digits used for every coordinate written as text.
pub const TEXT_DIGITS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    Off,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        ext.parse().ok()
    }
}

impl FromStr for CloudFormat {
    type Err = CloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            "off" => Ok(CloudFormat::Off),
            other => Err(CloudError::InvalidParameter(format!("unknown cloud format '{other}'"))),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CloudError {
    CloudError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load(path: &Path, format: CloudFormat) -> Result<PointCloud, CloudError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse(&text, format)
}

pub fn save(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), CloudError> {
    atomic_write(path, serialize(cloud, format).as_bytes()).map_err(|e| io_error(path, e))
}

pub fn parse(text: &str, format: CloudFormat) -> Result<PointCloud, CloudError> {
    let points = match format {
        CloudFormat::Xyz => parse_xyz(text)?,
        CloudFormat::Ply => parse_ply(text)?,
        CloudFormat::Off => parse_off(text)?,
    };
    PointCloud::new(points)
}

pub fn serialize(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    match format {
        CloudFormat::Xyz => {}
        CloudFormat::Ply => {
            let _ = write!(
                out,
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
                cloud.len()
            );
        }
        CloudFormat::Off => {
            let _ = write!(out, "OFF\n{} 0 0\n", cloud.len());
        }
    }
    for p in cloud {
        let _ = writeln!(
            out,
            "{} {} {}",
            format_sig(p.x, TEXT_DIGITS),
            format_sig(p.y, TEXT_DIGITS),
            format_sig(p.z, TEXT_DIGITS)
        );
    }
    out
}

fn parse_error(line: usize, reason: impl Into<String>) -> CloudError {
    CloudError::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_number(token: &str, line: usize) -> Result<f64, CloudError> {
    let value: f64 = token
        .parse()
        .map_err(|_| parse_error(line, format!("'{token}' is not a number")))?;
    if !value.is_finite() {
        return Err(parse_error(line, format!("'{token}' is not finite")));
    }
    Ok(value)
}

fn parse_point(fields: &[&str], line: usize) -> Result<Point, CloudError> {
    if fields.len() != 3 {
        return Err(parse_error(
            line,
            format!("expected 3 coordinates, found {}", fields.len()),
        ));
    }
    Ok(Vector3::new(
        parse_number(fields[0], line)?,
        parse_number(fields[1], line)?,
        parse_number(fields[2], line)?,
    ))
}

fn parse_xyz(text: &str) -> Result<Vec<Point>, CloudError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        points.push(parse_point(&fields, i + 1)?);
    }
    Ok(points)
}

/// Numbered non-blank lines, with comments stripped.
fn content_lines<'a>(text: &'a str, comment: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    text.lines()
        .enumerate()
        .map(move |(i, l)| {
            let l = match l.find(comment) {
                Some(at) => &l[..at],
                None => l,
            };
            (i + 1, l.trim())
        })
        .filter(|(_, l)| !l.is_empty())
}

fn parse_count(token: &str, line: usize) -> Result<usize, CloudError> {
    token
        .parse()
        .map_err(|_| parse_error(line, format!("'{token}' is not a count")))
}

fn parse_off(text: &str) -> Result<Vec<Point>, CloudError> {
    let mut lines = content_lines(text, "#");
    let (first_no, first) = lines.next().ok_or_else(|| parse_error(1, "missing OFF header"))?;
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| parse_error(first_no, "missing OFF magic"))?
        .trim();
    let (counts_no, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| parse_error(first_no + 1, "missing counts line"))?
    } else {
        (first_no, rest)
    };
    let counts: Vec<&str> = counts.split_whitespace().collect();
    if counts.is_empty() || counts.len() > 3 {
        return Err(parse_error(counts_no, "expected 'vertices faces edges' counts"));
    }
    let vertices = parse_count(counts[0], counts_no)?;
    let mut points = Vec::with_capacity(vertices);
    for _ in 0..vertices {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_error(counts_no, format!("expected {vertices} vertex lines")))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        points.push(parse_point(&fields, no)?);
    }
    Ok(points)
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(text: &str) -> Result<Vec<Point>, CloudError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_error(1, "missing ply magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(CloudError::UnsupportedElement(format!("ply format '{other}'")));
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: parse_count(count, no)?,
                properties: Vec::new(),
            }),
            ["property", rest @ ..] => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_error(no, "property before any element"))?;
                if element.name == "vertex" {
                    match rest {
                        [ty, name] if matches!(*ty, "float" | "float32" | "double" | "float64") => {
                            element.properties.push(name.to_string())
                        }
                        _ => {
                            return Err(CloudError::UnsupportedElement(format!(
                                "vertex property '{}'",
                                rest.join(" ")
                            )))
                        }
                    }
                } else {
                    element.properties.push(rest.join(" "));
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_error(no, format!("unrecognized header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(parse_error(1, "missing end_header"));
    }
    let vertex_index = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| CloudError::UnsupportedElement("ply without a vertex element".into()))?;
    let vertex = &elements[vertex_index];
    if vertex.properties != ["x", "y", "z"] {
        return Err(CloudError::UnsupportedElement(format!(
            "vertex properties must be exactly x y z, found '{}'",
            vertex.properties.join(" ")
        )));
    }
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut points = Vec::with_capacity(vertex.count);
    for (i, element) in elements.iter().enumerate() {
        for _ in 0..element.count {
            let (no, l) = body
                .next()
                .ok_or_else(|| parse_error(0, format!("ply body ends inside element '{}'", element.name)))?;
            if i == vertex_index {
                let fields: Vec<&str> = l.split_whitespace().collect();
                points.push(parse_point(&fields, no)?);
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn random_cloud(n: usize) -> PointCloud {
        let mut rng = seeded_rng(5);
        PointCloud::new(
            (0..n)
                .map(|_| Vector3::new(rng.random(), rng.random(), rng.random::<f64>() - 0.5))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_in_every_format() {
        let cloud = random_cloud(100);
        let dir = tempfile::tempdir().unwrap();
        for (format, name) in [(CloudFormat::Xyz, "a.xyz"), (CloudFormat::Ply, "a.ply"), (CloudFormat::Off, "a.off")] {
            let path = dir.path().join(name);
            save(&cloud, &path, format).unwrap();
            let back = load(&path, format).unwrap();
            assert_eq!(back.len(), cloud.len());
            for (a, b) in cloud.iter().zip(back.iter()) {
                assert!((a - b).amax() < 1e-6);
            }
            assert_eq!(CloudFormat::from_path(&path), Some(format));
        }
    }

    #[test]
    fn xyz_short_line_reports_its_line_number() {
        let err = parse("# header\n0 0 0\n\n1.0 2.0\n", CloudFormat::Xyz).unwrap_err();
        match err {
            CloudError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xyz_rejects_garbage_and_nan() {
        assert!(matches!(parse("1 2 x\n", CloudFormat::Xyz), Err(CloudError::Parse { line: 1, .. })));
        assert!(matches!(parse("1 2 nan\n", CloudFormat::Xyz), Err(CloudError::Parse { line: 1, .. })));
        assert!(matches!(parse("# nothing\n", CloudFormat::Xyz), Err(CloudError::Empty)));
    }

    #[test]
    fn minimal_off() {
        let cloud = parse("OFF\n1 0 0\n0.5 0.5 0.5\n", CloudFormat::Off).unwrap();
        assert_eq!(cloud.points(), &[Vector3::new(0.5, 0.5, 0.5)]);
    }

    #[test]
    fn off_ignores_faces_and_accepts_inline_counts() {
        let text = "OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(parse(text, CloudFormat::Off).unwrap().len(), 3);
        assert!(parse("OFF\n2 0 0\n0 0 0\n", CloudFormat::Off).is_err());
        assert!(parse("COFF\n1 0 0\n0 0 0\n", CloudFormat::Off).is_err());
    }

    #[test]
    fn ply_with_faces_is_accepted() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let cloud = parse(text, CloudFormat::Ply).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud[1], Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn ply_rejects_unknown_vertex_properties_and_binary() {
        let extra = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n0 0 0 255\n";
        assert!(matches!(parse(extra, CloudFormat::Ply), Err(CloudError::UnsupportedElement(_))));
        let binary = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(parse(binary, CloudFormat::Ply), Err(CloudError::UnsupportedElement(_))));
    }

    #[test]
    fn xyz_writer_uses_nine_digits_and_lf() {
        let cloud = PointCloud::from_rows(&[[1.0 / 3.0, 0.0, -2.5]]).unwrap();
        assert_eq!(serialize(&cloud, CloudFormat::Xyz), "0.333333333 0 -2.5\n");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load(Path::new("/nonexistent/cloud.xyz"), CloudFormat::Xyz).unwrap_err();
        assert!(matches!(err, CloudError::Io { .. }));
    }
}
