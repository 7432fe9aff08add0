//! Text cloud files.
//!
//! ```text
//! # category 0
//! # parts 2
//! x y z label
//! ```
//!
//! Coordinates carry 17 significant digits so a write/read round trip is
//! bit-exact. Other `#` lines are comments. Clouds without labels or
//! category simply omit the label column or the header.

use std::fmt::Write as _;
use std::path::Path;

use stn_core::PointCloud;

use crate::error::{io_err, DataError, Result};

pub fn format_cloud(cloud: &PointCloud, num_parts: Option<usize>) -> String {
    let mut s = String::with_capacity(cloud.len() * 80);
    if let Some(c) = cloud.category() {
        writeln!(s, "# category {c}").unwrap();
    }
    if let Some(p) = num_parts {
        writeln!(s, "# parts {p}").unwrap();
    }
    for (i, p) in cloud.points().iter().enumerate() {
        write!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).unwrap();
        if let Some(labels) = cloud.part_labels() {
            write!(s, " {}", labels[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// A parsed cloud plus the part count from its header, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudFile {
    pub cloud: PointCloud,
    pub num_parts: Option<usize>,
}

fn header_value(rest: &str, line: usize) -> Result<usize> {
    rest.trim().parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("expected a non-negative integer, got '{}'", rest.trim()),
    })
}

pub fn parse_cloud(text: &str) -> Result<CloudFile> {
    let mut category = None;
    let mut num_parts = None;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(rest) = comment.strip_prefix("category ") {
                category = Some(header_value(rest, line)?);
            } else if let Some(rest) = comment.strip_prefix("parts ") {
                num_parts = Some(header_value(rest, line)?);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 'x y z [label]', got {} fields", fields.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for (d, f) in fields[..3].iter().enumerate() {
            p[d] = f.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("bad coordinate '{f}'"),
            })?;
            if !p[d].is_finite() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("non-finite coordinate '{f}'"),
                });
            }
        }
        if fields.len() == 4 {
            let label: usize = fields[3].parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("bad label '{}'", fields[3]),
            })?;
            if let Some(parts) = num_parts {
                if label >= parts {
                    return Err(DataError::LabelOutOfRange { line, label, parts });
                }
            }
            labels.push(label);
        }
        if !labels.is_empty() && labels.len() != points.len() + 1 {
            return Err(DataError::Parse {
                line,
                msg: "either every point or no point carries a label".into(),
            });
        }
        points.push(p);
    }
    let mut cloud = PointCloud::new(points)?;
    if !labels.is_empty() {
        let parts = num_parts.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
        cloud = cloud.with_labels(labels, parts)?;
    }
    if let Some(c) = category {
        cloud = cloud.with_category(c);
    }
    Ok(CloudFile { cloud, num_parts })
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, num_parts: Option<usize>) -> Result<()> {
    std::fs::write(path, format_cloud(cloud, num_parts)).map_err(io_err(path))
}

pub fn read_cloud(path: &Path) -> Result<CloudFile> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_cloud(&text).map_err(|e| DataError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}
