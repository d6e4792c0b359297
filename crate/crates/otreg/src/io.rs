//! Point cloud, flow and report file formats.
//!
//! Clouds are stored as ASCII PLY or headed CSV with columns
//! `x,y,z[,weight][,radius][,f0..f{D-1}]`; flows as CSV with columns
//! `vx,vy,vz,confidence`. All numbers are written with 17 significant
//! digits, which round-trips `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::WeightedPointCloud;
use crate::matching::MatchingField;
use crate::{Error, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_field(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {what} value '{tok}'")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {what} value '{tok}'")));
    }
    Ok(v)
}

#[derive(Default)]
struct Columns {
    x: usize,
    y: usize,
    z: usize,
    weight: Option<usize>,
    radius: Option<usize>,
    features: Vec<usize>, // f0..f{D-1} in order
}

fn resolve_columns(names: &[&str], line: usize) -> Result<Columns> {
    let mut cols = Columns::default();
    let mut seen_xyz = [false; 3];
    let mut feats: Vec<(usize, usize)> = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        match name.trim() {
            "x" => {
                cols.x = idx;
                seen_xyz[0] = true;
            }
            "y" => {
                cols.y = idx;
                seen_xyz[1] = true;
            }
            "z" => {
                cols.z = idx;
                seen_xyz[2] = true;
            }
            "weight" => cols.weight = Some(idx),
            "radius" => cols.radius = Some(idx),
            other => {
                if let Some(num) = other.strip_prefix('f').and_then(|s| s.parse::<usize>().ok()) {
                    feats.push((num, idx));
                } else {
                    return Err(parse_err(line, format!("unknown column '{other}'")));
                }
            }
        }
    }
    if !seen_xyz.iter().all(|&b| b) {
        return Err(parse_err(line, "missing one of the x, y, z columns"));
    }
    feats.sort_unstable();
    for (expect, (num, idx)) in feats.iter().enumerate() {
        if *num != expect {
            return Err(parse_err(line, format!("feature columns must be f0..fK, found f{num}")));
        }
        cols.features.push(*idx);
    }
    Ok(cols)
}

struct ParsedRows {
    positions: Vec<[f64; 3]>,
    weights: Vec<f64>,
    radii: Vec<f64>,
    features: Vec<f64>,
}

fn parse_rows<'a>(
    rows: impl Iterator<Item = (usize, &'a str)>,
    cols: &Columns,
    n_cols: usize,
) -> Result<ParsedRows> {
    let mut out = ParsedRows {
        positions: Vec::new(),
        weights: Vec::new(),
        radii: Vec::new(),
        features: Vec::new(),
    };
    for (line, row) in rows {
        let toks: Vec<&str> = row.split([',', ' ', '\t']).filter(|t| !t.is_empty()).collect();
        if toks.len() != n_cols {
            return Err(parse_err(line, format!("expected {n_cols} fields, found {}", toks.len())));
        }
        let p = [
            parse_field(toks[cols.x], line, "x")?,
            parse_field(toks[cols.y], line, "y")?,
            parse_field(toks[cols.z], line, "z")?,
        ];
        out.positions.push(p);
        let w = match cols.weight {
            Some(i) => parse_field(toks[i], line, "weight")?,
            None => 1.0,
        };
        if w < 0.0 {
            return Err(parse_err(line, format!("negative weight {w}")));
        }
        out.weights.push(w);
        if let Some(i) = cols.radius {
            let r = parse_field(toks[i], line, "radius")?;
            if r <= 0.0 {
                return Err(parse_err(line, format!("non-positive radius {r}")));
            }
            out.radii.push(r);
        }
        for &i in &cols.features {
            out.features.push(parse_field(toks[i], line, "feature")?);
        }
    }
    Ok(out)
}

fn build_cloud(rows: ParsedRows, dim: usize) -> Result<WeightedPointCloud> {
    let mut cloud = WeightedPointCloud::new(rows.positions, rows.weights)?;
    if !rows.radii.is_empty() {
        cloud = cloud.with_radii(rows.radii)?;
    }
    if dim > 0 {
        // rows that are already unit norm are kept bit-exact (files written
        // by this crate round-trip); anything else is normalised
        cloud = match cloud.clone().with_features(dim, rows.features.clone()) {
            Ok(c) => c,
            Err(_) => cloud.with_features_normalized(dim, rows.features)?,
        };
    }
    Ok(cloud)
}

fn read_cloud_csv(text: &str) -> Result<WeightedPointCloud> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let cols = resolve_columns(&names, 1)?;
    let dim = cols.features.len();
    let n_cols = names.len();
    let rows = lines.filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l));
    build_cloud(parse_rows(rows, &cols, n_cols)?, dim)
}

fn read_cloud_ply(text: &str) -> Result<WeightedPointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, magic) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if magic != "ply" {
        return Err(parse_err(1, "not a ply file"));
    }
    let mut names: Vec<&str> = Vec::new();
    let mut vertex_count: Option<usize> = None;
    let mut header_end = 0;
    let mut saw_format = false;
    for (line, l) in lines.by_ref() {
        if l == "end_header" {
            header_end = line;
            break;
        }
        if l.starts_with("comment") || l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix("format ") {
            if rest.trim() != "ascii 1.0" {
                return Err(parse_err(line, "only ascii 1.0 ply is supported"));
            }
            saw_format = true;
        } else if let Some(rest) = l.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let count = parts
                .next()
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| parse_err(line, "element without a count"))?;
            if kind == "vertex" {
                vertex_count = Some(count);
            } else if count > 0 {
                return Err(parse_err(line, format!("unsupported element '{kind}'")));
            }
        } else if let Some(rest) = l.strip_prefix("property ") {
            let mut parts = rest.split_whitespace();
            let ty = parts.next().unwrap_or("");
            if !matches!(ty, "float" | "double" | "float32" | "float64") {
                return Err(parse_err(line, format!("unsupported property type '{ty}'")));
            }
            names.push(parts.next().ok_or_else(|| parse_err(line, "property without a name"))?);
        } else {
            return Err(parse_err(line, format!("unrecognised header line '{l}'")));
        }
    }
    if header_end == 0 || !saw_format {
        return Err(parse_err(1, "truncated ply header"));
    }
    let count =
        vertex_count.ok_or_else(|| parse_err(header_end, "missing vertex element"))?;
    let cols = resolve_columns(&names, header_end)?;
    let dim = cols.features.len();
    let data: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty()).collect();
    if data.len() != count {
        return Err(parse_err(
            header_end,
            format!("vertex element declares {count} rows, file has {}", data.len()),
        ));
    }
    build_cloud(parse_rows(data.into_iter(), &cols, names.len())?, dim)
}

/// Read a cloud from CSV or ASCII PLY, dispatching on the `.ply` extension.
pub fn read_cloud(path: &Path) -> Result<WeightedPointCloud> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        read_cloud_ply(&text)
    } else {
        read_cloud_csv(&text)
    }
}

/// Write a cloud as CSV or ASCII PLY, dispatching on the `.ply` extension.
pub fn write_cloud(cloud: &WeightedPointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    let dim = cloud.features().map(|f| f.dim()).unwrap_or(0);
    let ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let mut names = vec!["x".to_string(), "y".to_string(), "z".to_string(), "weight".to_string()];
    if cloud.radii().is_some() {
        names.push("radius".to_string());
    }
    for k in 0..dim {
        names.push(format!("f{k}"));
    }
    if ply {
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", cloud.len());
        for name in &names {
            let _ = writeln!(out, "property double {name}");
        }
        out.push_str("end_header\n");
    } else {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    let sep = if ply { " " } else { "," };
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let mut fields = vec![fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]), fmt_f64(cloud.weights()[i])];
        if let Some(r) = cloud.radii() {
            fields.push(fmt_f64(r[i]));
        }
        if let Some(f) = cloud.features() {
            fields.extend(f.row(i).iter().map(|v| fmt_f64(*v)));
        }
        out.push_str(&fields.join(sep));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a matching field; row `i` corresponds to source row `i`.
pub fn write_flow(field: &MatchingField, path: &Path) -> Result<()> {
    let mut out = String::from("vx,vy,vz,confidence\n");
    for (v, w) in field.vectors().iter().zip(field.confidences()) {
        let _ = writeln!(out, "{},{},{},{}", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2]), fmt_f64(*w));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<MatchingField> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty flow file"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names != ["vx", "vy", "vz", "confidence"] {
        return Err(parse_err(1, "flow header must be vx,vy,vz,confidence"));
    }
    let mut vectors = Vec::new();
    let mut confidences = Vec::new();
    for (i, l) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let line = i + 1;
        let toks: Vec<&str> = l.split(',').collect();
        if toks.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", toks.len())));
        }
        vectors.push([
            parse_field(toks[0], line, "vx")?,
            parse_field(toks[1], line, "vy")?,
            parse_field(toks[2], line, "vz")?,
        ]);
        let w = parse_field(toks[3], line, "confidence")?;
        if w < 0.0 {
            return Err(parse_err(line, format!("negative confidence {w}")));
        }
        confidences.push(w);
    }
    MatchingField::new(vectors, confidences)
}

/// Landmarks are plain clouds; only the positions are used.
pub fn read_landmarks(path: &Path) -> Result<Vec<[f64; 3]>> {
    Ok(read_cloud(path)?.positions().to_vec())
}

pub fn write_points(points: &[[f64; 3]], path: &Path) -> Result<()> {
    let mut out = String::from("x,y,z\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat `key = value` report, the machine-readable output format.
pub fn write_key_values(pairs: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}
