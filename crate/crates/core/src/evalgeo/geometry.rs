use std::f64::consts::{PI, TAU};

use log::warn;

use super::EvalError;
use crate::cadseq::{dequantize, validate, CadSequence, CommandKind, SlotName};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

/// Copies of each profile along the extrusion axis.
pub const EXTRUDE_OFFSETS: usize = 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A sketch curve in profile coordinates, `[0, 1]^2` before scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Curve {
    Line { from: Point2, to: Point2 },
    /// Sweep in radians; counter-clockwise when `ccw`.
    Arc { from: Point2, to: Point2, sweep: f64, ccw: bool },
    Circle { center: Point2, radius: f64 },
}

const DEGENERATE: f64 = 1e-12;

fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Curve {
    /// Center, radius and start angle of an arc with a usable sweep.
    fn arc_frame(from: Point2, to: Point2, sweep: f64, ccw: bool) -> (Point2, f64, f64) {
        let d = dist(from, to);
        let mid = [(from[0] + to[0]) / 2.0, (from[1] + to[1]) / 2.0];
        let left = [-(to[1] - from[1]) / d, (to[0] - from[0]) / d];
        // signed offset of the center from the chord midpoint, positive to the left
        let h = (d / 2.0) / (sweep / 2.0).tan() * if ccw { 1.0 } else { -1.0 };
        let c = [mid[0] + h * left[0], mid[1] + h * left[1]];
        let radius = (d / 2.0) / (sweep / 2.0).sin();
        (c, radius, (from[1] - c[1]).atan2(from[0] - c[0]))
    }

    fn is_straight_arc(sweep: f64) -> bool {
        sweep < 1e-9 || (sweep - TAU).abs() < 1e-9
    }

    pub fn is_degenerate(&self) -> bool {
        match *self {
            Curve::Line { from, to } | Curve::Arc { from, to, .. } => dist(from, to) < DEGENERATE,
            Curve::Circle { radius, .. } => radius < DEGENERATE,
        }
    }

    pub fn length(&self) -> f64 {
        match *self {
            Curve::Line { from, to } => dist(from, to),
            Curve::Arc { from, to, sweep, ccw } => {
                if Self::is_straight_arc(sweep) || dist(from, to) < DEGENERATE {
                    dist(from, to)
                } else {
                    Self::arc_frame(from, to, sweep, ccw).1 * sweep
                }
            }
            Curve::Circle { radius, .. } => TAU * radius,
        }
    }

    /// Point at arc-length fraction `u` in `[0, 1]`.
    pub fn point(&self, u: f64) -> Point2 {
        let lerp = |a: Point2, b: Point2| [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        match *self {
            Curve::Line { from, to } => lerp(from, to),
            Curve::Arc { from, to, sweep, ccw } => {
                if Self::is_straight_arc(sweep) || dist(from, to) < DEGENERATE {
                    return lerp(from, to);
                }
                let (c, r, a0) = Self::arc_frame(from, to, sweep, ccw);
                let a = a0 + u * sweep * if ccw { 1.0 } else { -1.0 };
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            }
            Curve::Circle { center, radius } => {
                let a = u * TAU;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }
}

/// Extrusion parameters in model units and radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrusion {
    pub theta: f64,
    pub phi: f64,
    pub gamma: f64,
    pub origin: Point3,
    pub scale: f64,
    pub e1: f64,
    pub e2: f64,
    pub boolean: u8,
    pub extent: u8,
}

impl Extrusion {
    /// Profile point `p` lifted to the plane at height `z` along its normal.
    pub fn embed(&self, p: Point2, z: f64) -> Point3 {
        let r = plane_rotation(self.theta, self.phi, self.gamma);
        let local = [self.scale * (p[0] - 0.5), self.scale * (p[1] - 0.5), z];
        let mut out = self.origin;
        for (i, o) in out.iter_mut().enumerate() {
            *o += (0..3).map(|j| r[i][j] * local[j]).sum::<f64>();
        }
        out
    }

    /// Heights of the profile copies, from `-e1` to `+e2`.
    pub fn offsets(&self) -> [f64; EXTRUDE_OFFSETS] {
        let mut z = [0.0; EXTRUDE_OFFSETS];
        for (j, v) in z.iter_mut().enumerate() {
            *v = -self.e1 + (self.e1 + self.e2) * j as f64 / (EXTRUDE_OFFSETS - 1) as f64;
        }
        z
    }
}

/// `Rz(phi) Ry(theta) Rz(gamma)`: `(theta, phi)` are the spherical angles of
/// the plane normal and `gamma` spins the plane about it. All zero is the
/// world XY plane.
pub fn plane_rotation(theta: f64, phi: f64, gamma: f64) -> [[f64; 3]; 3] {
    let rz = |a: f64| [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [
        [theta.cos(), 0.0, theta.sin()],
        [0.0, 1.0, 0.0],
        [-theta.sin(), 0.0, theta.cos()],
    ];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(mul(rz(phi), ry), rz(gamma))
}

/// Closed loops consumed by one extrusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub loops: Vec<Vec<Curve>>,
    pub extrusion: Extrusion,
}

fn xy(cmd: &crate::cadseq::Command) -> Point2 {
    let v = |s| dequantize(cmd.get(s).unwrap_or(0));
    [v(SlotName::X), v(SlotName::Y)]
}

/// Curves of a loop. Each line or arc starts where the previous non-circle
/// curve of the loop ends, wrapping around so the loop closes.
fn build_loop(cmds: &[&crate::cadseq::Command]) -> Vec<Curve> {
    let ends: Vec<Option<Point2>> = cmds
        .iter()
        .map(|c| (c.kind() != CommandKind::Circle).then(|| xy(c)))
        .collect();
    let start = |i: usize| -> Point2 {
        let n = cmds.len();
        (1..=n)
            .map(|k| (i + n - k) % n)
            .find_map(|j| ends[j])
            .unwrap_or([0.0, 0.0])
    };
    cmds.iter()
        .enumerate()
        .map(|(i, c)| match c.kind() {
            CommandKind::Line => Curve::Line {
                from: start(i),
                to: xy(c),
            },
            CommandKind::Arc => Curve::Arc {
                from: start(i),
                to: xy(c),
                sweep: dequantize(c.get(SlotName::Alpha).unwrap_or(0)) * TAU,
                ccw: c.get(SlotName::F) == Some(1),
            },
            _ => Curve::Circle {
                center: xy(c),
                radius: dequantize(c.get(SlotName::R).unwrap_or(0)),
            },
        })
        .collect()
}

/// Splits a sequence into its extruded sketches. Curves outside a loop and
/// loops never extruded are dropped.
pub fn sketches(seq: &CadSequence) -> Vec<Sketch> {
    let mut out = Vec::new();
    let mut loops: Vec<Vec<&crate::cadseq::Command>> = Vec::new();
    for c in seq.commands() {
        match c.kind() {
            CommandKind::Sol => loops.push(Vec::new()),
            CommandKind::Line | CommandKind::Arc | CommandKind::Circle => {
                if let Some(l) = loops.last_mut() {
                    l.push(c);
                }
            }
            CommandKind::Extrude => {
                let v = |s| dequantize(c.get(s).unwrap_or(0));
                let extrusion = Extrusion {
                    theta: v(SlotName::Theta) * PI,
                    phi: v(SlotName::Phi) * TAU,
                    gamma: v(SlotName::Gamma) * TAU,
                    origin: [v(SlotName::Px), v(SlotName::Py), v(SlotName::Pz)],
                    scale: v(SlotName::S),
                    e1: v(SlotName::E1),
                    e2: v(SlotName::E2),
                    boolean: c.get(SlotName::B).unwrap_or(0),
                    extent: c.get(SlotName::U).unwrap_or(0),
                };
                let built = loops
                    .drain(..)
                    .filter(|l| !l.is_empty())
                    .map(|l| build_loop(&l))
                    .collect();
                out.push(Sketch {
                    loops: built,
                    extrusion,
                });
            }
            CommandKind::Eos => break,
        }
    }
    out
}

/// Splits `n` into integer shares proportional to `weights`; leftover
/// units go to the largest fractional parts, earlier index first on ties.
fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = n.saturating_sub(shares.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(left) {
        shares[i] += 1;
    }
    shares
}

/// [`sample_points`] that also returns the number of degenerate curves
/// that were skipped.
pub fn sample_points_counted(
    seq: &CadSequence,
    n_per_model: usize,
) -> Result<(PointCloud, usize), EvalError> {
    let report = validate(seq);
    if !report.valid {
        let rules: Vec<&str> = report.violations.iter().map(|v| v.rule.id()).collect();
        return Err(EvalError::InvalidSequence(rules.join(", ")));
    }
    let mut degenerate = 0;
    let mut units: Vec<(Extrusion, Curve, f64)> = Vec::new();
    let mut weights = Vec::new();
    for sk in sketches(seq) {
        let offsets = sk.extrusion.offsets();
        for curve in sk.loops.iter().flatten() {
            if curve.is_degenerate() {
                degenerate += 1;
                continue;
            }
            let w = sk.extrusion.scale * curve.length();
            for &z in &offsets {
                units.push((sk.extrusion, *curve, z));
                weights.push(w);
            }
        }
    }
    if degenerate > 0 {
        warn!("skipped {degenerate} degenerate curves");
    }
    let shares = largest_remainder(n_per_model, &weights);
    let mut points = Vec::with_capacity(n_per_model);
    for ((ext, curve, z), k) in units.iter().zip(shares) {
        for j in 0..k {
            let u = (j as f64 + 0.5) / k as f64;
            points.push(ext.embed(curve.point(u), *z));
        }
    }
    Ok((PointCloud { points }, degenerate))
}

/// Points spread along every sketch curve of a valid model and copied at
/// [`EXTRUDE_OFFSETS`] heights between `-e1` and `+e2`. Points per curve
/// follow its scaled length by largest-remainder allocation, so the total is
/// exactly `n_per_model` unless all curves are degenerate. Booleans and the
/// extent type are ignored.
pub fn sample_points(seq: &CadSequence, n_per_model: usize) -> Result<PointCloud, EvalError> {
    sample_points_counted(seq, n_per_model).map(|(c, _)| c)
}
