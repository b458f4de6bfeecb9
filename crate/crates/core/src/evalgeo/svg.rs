use std::f64::consts::{PI, TAU};
use std::fmt::Write;

use super::geometry::{sketches, Curve, Point2};
use super::EvalError;
use crate::cadseq::CadSequence;

fn fmt_point(p: Point2) -> String {
    // SVG y grows downwards
    format!("{:.6} {:.6}", p[0], 1.0 - p[1])
}

/// Curves of sketch `index` (in extrusion order) as SVG 1.1 in profile
/// coordinates: one element per curve inside a `0 0 1 1` view box.
pub fn export_svg(seq: &CadSequence, index: usize) -> Result<String, EvalError> {
    let all = sketches(seq);
    let sk = all.get(index).ok_or(EvalError::NoSuchSketch {
        index,
        count: all.len(),
    })?;
    let mut out = String::new();
    out.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 1 1\" \
         width=\"512\" height=\"512\">\n",
    );
    out.push_str("<g fill=\"none\" stroke=\"black\" stroke-width=\"0.004\">\n");
    for curve in sk.loops.iter().flatten() {
        let line = match *curve {
            Curve::Line { from, to } => {
                format!("<path d=\"M {} L {}\"/>", fmt_point(from), fmt_point(to))
            }
            Curve::Arc { from, to, sweep, ccw } => {
                let r = (curve.length() / sweep).abs();
                if sweep < 1e-9 || (sweep - TAU).abs() < 1e-9 || !r.is_finite() {
                    format!("<path d=\"M {} L {}\"/>", fmt_point(from), fmt_point(to))
                } else {
                    format!(
                        "<path d=\"M {} A {r:.6} {r:.6} 0 {} {} {}\"/>",
                        fmt_point(from),
                        u8::from(sweep > PI),
                        // the y flip turns counter-clockwise into negative sweep
                        u8::from(!ccw),
                        fmt_point(to)
                    )
                }
            }
            Curve::Circle { center, radius } => {
                let c = fmt_point(center);
                let (cx, cy) = c.split_once(' ').unwrap_or_default();
                format!("<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{radius:.6}\"/>")
            }
        };
        let _ = writeln!(out, "{line}");
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}
