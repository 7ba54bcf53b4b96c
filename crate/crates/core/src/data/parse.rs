//! Text annotation formats: 14-point curved boxes and generic polygon lists.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fox::TextAnnotation;
use crate::geometry::{Point, Polygon};

/// Marker that flags an instance as "do not care".
pub const IGNORE_TAG: &str = "###";
pub const CTW_POINTS: usize = 14;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// One instance per line: 28 comma-separated integers, the 7 top points left
/// to right followed by the 7 bottom points right to left.
pub fn parse_ctw_polygons(text: &str) -> Result<Vec<TextAnnotation>> {
    numbered_lines(text)
        .map(|(ln, line)| {
            let vals = line
                .split(',')
                .map(|t| {
                    let t = t.trim();
                    t.parse::<i64>()
                        .map_err(|_| parse_err(ln, format!("'{t}' is not an integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 2 * CTW_POINTS {
                return Err(parse_err(
                    ln,
                    format!("expected {} integers, found {}", 2 * CTW_POINTS, vals.len()),
                ));
            }
            let pts: Vec<Point> = vals.chunks(2).map(|c| Point::new(c[0] as f64, c[1] as f64)).collect();
            let half = CTW_POINTS / 2;
            let top = pts[..half].to_vec();
            let bottom: Vec<Point> = pts[half..].iter().rev().copied().collect();
            TextAnnotation::from_lines(top, bottom, false).map_err(|e| parse_err(ln, e.to_string()))
        })
        .collect()
}

/// One instance per line: an even number (at least six) of comma-separated
/// coordinates, optionally followed by `,###` to mark it ignored. Top and
/// bottom lines are recovered from the polygon shape.
pub fn parse_polygon_list(text: &str) -> Result<Vec<TextAnnotation>> {
    numbered_lines(text)
        .map(|(ln, line)| {
            let mut toks: Vec<&str> = line.split(',').map(str::trim).collect();
            let ignore = toks.last() == Some(&IGNORE_TAG);
            if ignore {
                toks.pop();
            }
            let vals = toks
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(ln, format!("'{t}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() % 2 == 1 {
                return Err(parse_err(ln, format!("odd coordinate count {}", vals.len())));
            }
            if vals.len() < 6 {
                return Err(parse_err(ln, format!("{} coordinates, need at least 6", vals.len())));
            }
            let pts = vals.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
            let poly = Polygon::new(pts).map_err(|e| parse_err(ln, e.to_string()))?;
            TextAnnotation::from_polygon(poly, ignore).map_err(|e| parse_err(ln, e.to_string()))
        })
        .collect()
}

fn push_coords(out: &mut String, pts: &[Point]) {
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{},{}", p.x, p.y);
    }
}

/// Inverse of [`parse_ctw_polygons`] for annotations with 7-point lines.
pub fn serialize_ctw(anns: &[TextAnnotation]) -> Result<String> {
    let mut out = String::new();
    for (i, a) in anns.iter().enumerate() {
        let v = &a.boundary.vertices;
        if v.len() != CTW_POINTS {
            return Err(Error::Contract(format!(
                "instance {i} has {} vertices, the format needs {CTW_POINTS}",
                v.len()
            )));
        }
        if let Some(p) = v.iter().find(|p| p.x.fract() != 0.0 || p.y.fract() != 0.0) {
            return Err(Error::Contract(format!("instance {i} has non-integer vertex {p:?}")));
        }
        push_coords(&mut out, v);
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`parse_polygon_list`]: boundary coordinates plus `,###` for
/// ignored instances.
pub fn serialize_polygon_list(anns: &[TextAnnotation]) -> String {
    let mut out = String::new();
    for a in anns {
        push_coords(&mut out, &a.boundary.vertices);
        if a.ignore {
            out.push(',');
            out.push_str(IGNORE_TAG);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_line() {
        let a = parse_polygon_list("0,0,10,0,10,10,0,10\n").unwrap();
        assert_eq!(a.len(), 1);
        assert!(!a[0].ignore);
        assert_eq!(a[0].boundary.area(), 100.0);
        let a = parse_polygon_list("0,0,10,0,10,10,0,10,###").unwrap();
        assert!(a[0].ignore);
    }

    #[test]
    fn errors_name_the_line() {
        match parse_polygon_list("1,2,3") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_polygon_list("\n0,0,10,0,10,10,0,10\n0,0,x,0,1,1") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_ctw_polygons("1,2,3") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(parse_ctw_polygons("").unwrap().is_empty());
        assert!(parse_polygon_list("\n  \n").unwrap().is_empty());
    }
}
