//! ASCII XYZ and PLY readers/writers.
//!
//! Coordinates are written with 9 significant digits; labels, when present,
//! go in a trailing integer column (XYZ) or a `uchar anomaly` property (PLY).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// `%.9g`-style formatting.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let mut s = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    };
    // the fixed branch can round up into the next decade; trim either way
    if let Some(epos) = s.find('e') {
        let (mant, e) = s.split_at(epos);
        let mant = trim_zeros(mant);
        s = format!("{mant}{e}");
    } else {
        s = trim_zeros(&s).to_string();
    }
    s
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn xyz_to_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    let labels = cloud.labels();
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{} {} {}", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.z));
        if let Some(l) = labels {
            let _ = write!(out, " {}", u8::from(l[i]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_xyz(id: &str, text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut label_cols: Option<bool> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 or 4 columns, found {}", fields.len()),
            });
        }
        let has_label = fields.len() == 4;
        if *label_cols.get_or_insert(has_label) != has_label {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "inconsistent label column".into(),
            });
        }
        let mut xyz = [0.0; 3];
        for (slot, f) in xyz.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad coordinate `{f}`"),
            })?;
        }
        points.push(Point3::from_array(xyz));
        if has_label {
            labels.push(parse_label(fields[3], lineno + 1)?);
        }
    }
    if label_cols == Some(true) {
        PointCloud::with_labels(id, points, labels)
    } else {
        PointCloud::new(id, points)
    }
}

fn parse_label(f: &str, line: usize) -> Result<bool> {
    match f {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse {
            line,
            msg: format!("label must be 0 or 1, found `{f}`"),
        }),
    }
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&stem(path), &fs::read_to_string(path)?)
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, xyz_to_string(cloud))?;
    Ok(())
}

pub fn ply_to_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40 + 200);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.labels().is_some() {
        out.push_str("property uchar anomaly\n");
    }
    out.push_str("end_header\n");
    out.push_str(&xyz_to_string(cloud));
    out
}

pub fn parse_ply(id: &str, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(bad(1, "missing `ply` magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(bad(i + 1, "only ascii PLY is supported"));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| bad(i + 1, "bad vertex count"))?,
                    );
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(bad(i + 1, "list properties on vertices are not supported"));
                }
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(bad(i + 1, "unrecognized header line")),
        }
    }
    if !header_done {
        return Err(bad(0, "missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| bad(0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad(0, "vertex element lacks x/y/z")),
    };
    let cl = col("anomaly");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        if points.len() == n {
            break;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < props.len() {
            return Err(bad(i + 1, "short vertex row"));
        }
        let num = |c: usize| {
            toks[c]
                .parse::<f64>()
                .map_err(|_| bad(i + 1, "bad number"))
        };
        points.push(Point3::new(num(cx)?, num(cy)?, num(cz)?));
        if let Some(c) = cl {
            labels.push(parse_label(toks[c], i + 1)?);
        }
    }
    if points.len() != n {
        return Err(bad(0, "fewer vertex rows than declared"));
    }
    if cl.is_some() {
        PointCloud::with_labels(id, points, labels)
    } else {
        PointCloud::new(id, points)
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&stem(path), &fs::read_to_string(path)?)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, ply_to_string(cloud))?;
    Ok(())
}

/// Dispatches on extension (`.ply`, anything else is XYZ).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => read_xyz(path),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => write_ply(path, cloud),
        _ => write_xyz(path, cloud),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-0.5), "-0.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig9(9.9999999999), "10");
    }

    #[test]
    fn xyz_with_labels() {
        let c = parse_xyz("a", "0 0 0 1\n1 2 3 0\n").unwrap();
        assert_eq!(c.labels(), Some(&[true, false][..]));
        assert_eq!(xyz_to_string(&c), "0 0 0 1\n1 2 3 0\n");
        assert!(parse_xyz("a", "0 0 0 1\n1 2 3\n").is_err());
        assert!(parse_xyz("a", "0 0\n").is_err());
    }

    #[test]
    fn ply_header_variants() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float y\n\
                    property float x\nproperty float z\nproperty uchar anomaly\nelement face 0\n\
                    property list uchar int vertex_indices\nend_header\n1 2 3 0\n4 5 6 1\n";
        let c = parse_ply("p", text).unwrap();
        assert_eq!(c.points()[0], Point3::new(2.0, 1.0, 3.0));
        assert_eq!(c.labels(), Some(&[false, true][..]));
        assert!(parse_ply("p", "ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }

    proptest! {
        #[test]
        fn text_formats_round_trip_to_nine_digits(
            pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3, any::<bool>()), 1..40)
        ) {
            let points: Vec<Point3> = pts.iter().map(|t| Point3::new(t.0, t.1, t.2)).collect();
            let labels: Vec<bool> = pts.iter().map(|t| t.3).collect();
            let cloud = PointCloud::with_labels("r", points, labels).unwrap();
            for back in [
                parse_xyz("r", &xyz_to_string(&cloud)).unwrap(),
                parse_ply("r", &ply_to_string(&cloud)).unwrap(),
            ] {
                prop_assert_eq!(back.labels(), cloud.labels());
                for (a, b) in back.points().iter().zip(cloud.points()) {
                    for (u, v) in a.to_array().iter().zip(b.to_array()) {
                        prop_assert!((u - v).abs() <= 1e-8 * v.abs().max(1e-30) + 1e-300);
                    }
                }
            }
        }
    }
}
