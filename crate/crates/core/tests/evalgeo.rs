use std::f64::consts::{LN_2, PI, TAU};
use std::slice;

use cadiff::cadseq::synth::{random_sequence, SynthConfig};
use cadiff::cadseq::{dequantize, CadSequence, Command};
use cadiff::evalgeo::{
    chamfer, export_svg, jsd, metrics, plane_rotation, sample_points, sample_points_counted,
    EvalError, MetricsConfig, PointCloud, EXTRUDE_OFFSETS,
};
use cadiff::rng::substream;
use rand::Rng;

/// Identity plane near the cube center, extruded by `e1` only.
fn extrude(e1: u8) -> Command {
    Command::extrude([0, 0, 0, 128, 128, 128, SCALE, e1, 0, 0, 0])
}

const SCALE: u8 = 254;

/// World position of a profile coordinate under [`extrude`].
fn world(v: u8) -> f64 {
    dequantize(128) + dequantize(SCALE) * (dequantize(v) - 0.5)
}

fn square() -> CadSequence {
    CadSequence::new(vec![
        Command::sol(),
        Command::line(255, 0),
        Command::line(255, 255),
        Command::line(0, 255),
        Command::line(0, 0),
        extrude(100),
        Command::eos(),
    ])
}

fn circle(x: u8, y: u8, r: u8) -> CadSequence {
    CadSequence::new(vec![Command::sol(), Command::circle(x, y, r), extrude(60), Command::eos()])
}

fn corpus(n: usize, seed: u64) -> Vec<CadSequence> {
    let mut rng = substream(seed, &[]);
    let cfg = SynthConfig {
        max_commands: 9,
        ..SynthConfig::default()
    };
    (0..n).map(|_| random_sequence(&mut rng, &cfg)).collect()
}

fn cfg(points: usize) -> MetricsConfig {
    MetricsConfig {
        points_per_model: points,
        ..MetricsConfig::default()
    }
}

#[test]
fn square_points_lie_on_its_edges() {
    let cloud = sample_points(&square(), 2000).unwrap();
    assert_eq!(cloud.len(), 2000);
    let (lo, hi) = (world(0), world(255));
    let z0 = dequantize(128);
    let e1 = dequantize(100);
    let mut heights = std::collections::BTreeSet::new();
    for p in &cloud.points {
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "{p:?}");
        let on_edge = (p[0] - lo).abs() < 1e-12
            || (p[0] - hi).abs() < 1e-12
            || (p[1] - lo).abs() < 1e-12
            || (p[1] - hi).abs() < 1e-12;
        assert!(on_edge, "{p:?}");
        assert!(p[2] <= z0 + 1e-12 && p[2] >= z0 - e1 - 1e-12);
        heights.insert((p[2] * 1e9).round() as i64);
    }
    assert_eq!(heights.len(), EXTRUDE_OFFSETS);
}

#[test]
fn circle_points_keep_their_radius() {
    let cloud = sample_points(&circle(100, 140, 60), 500).unwrap();
    assert_eq!(cloud.len(), 500);
    let c = [world(100), world(140)];
    let r = dequantize(SCALE) * dequantize(60);
    for p in &cloud.points {
        assert!(((p[0] - c[0]).hypot(p[1] - c[1]) - r).abs() < 1e-12);
    }
}

#[test]
fn degenerate_curves_are_skipped_and_counted() {
    let seq = CadSequence::new(vec![
        Command::sol(),
        Command::circle(10, 10, 0),
        Command::sol(),
        Command::circle(100, 100, 20),
        extrude(10),
        Command::eos(),
    ]);
    let (cloud, skipped) = sample_points_counted(&seq, 100).unwrap();
    assert_eq!((cloud.len(), skipped), (100, 1));
    let bad = CadSequence::new(vec![Command::sol(), Command::eos()]);
    assert!(matches!(sample_points(&bad, 10), Err(EvalError::InvalidSequence(_))));
}

fn apply(r: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        o[i] = (0..3).map(|j| r[i][j] * v[j]).sum();
    }
    o
}

fn close(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn rotation_maps_canonical_axes() {
    let (ex, ey, ez) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    let id = plane_rotation(0.0, 0.0, 0.0);
    assert!(close(apply(id, ex), ex) && close(apply(id, ey), ey) && close(apply(id, ez), ez));
    // normal along +x, then along +y
    assert!(close(apply(plane_rotation(PI / 2.0, 0.0, 0.0), ez), ex));
    assert!(close(apply(plane_rotation(PI / 2.0, PI / 2.0, 0.0), ez), ey));
    assert!(close(apply(plane_rotation(PI, 0.0, 0.0), ez), [0.0, 0.0, -1.0]));
    // gamma spins the plane about its normal
    let spin = plane_rotation(0.0, 0.0, PI / 2.0);
    assert!(close(apply(spin, ex), ey) && close(apply(spin, ez), ez));

    let mut rng = substream(2, &[]);
    for _ in 0..50 {
        let (t, p, g) = (rng.random_range(0.0..PI), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
        let r = plane_rotation(t, p, g);
        let n = apply(r, ez);
        assert!(close(n, [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]));
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }
}

fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let mut total = 0.0;
    for (x, y) in [(a, b), (b, a)] {
        let mut s = 0.0;
        for p in &x.points {
            let mut best = f64::INFINITY;
            for q in &y.points {
                let d: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
                if d < best {
                    best = d;
                }
            }
            s += best;
        }
        total += s / x.len() as f64;
    }
    total
}

#[test]
fn chamfer_matches_brute_force() {
    let single = |p: [f64; 3]| PointCloud { points: vec![p] };
    assert_eq!(chamfer(&single([0.0; 3]), &single([1.0, 0.0, 0.0])).unwrap(), 2.0);
    let mut rng = substream(4, &[]);
    for _ in 0..20 {
        let mut cloud = || PointCloud {
            points: (0..50)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        };
        let (a, b) = (cloud(), cloud());
        assert_eq!(chamfer(&a, &b).unwrap(), brute_chamfer(&a, &b));
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }
    assert_eq!(chamfer(&PointCloud::default(), &single([0.0; 3])), Err(EvalError::EmptyCloud));
}

#[test]
fn metrics_of_a_corpus_against_itself() {
    let x = corpus(12, 1);
    let r = metrics(&x, &x, &x, &cfg(300)).unwrap();
    assert_eq!((r.cov, r.mmd, r.jsd, r.invalidity), (100.0, 0.0, 0.0, 0.0));
    assert_eq!(r.novelty, 0.0);
    let mut dup = x.clone();
    dup.extend(x.iter().take(3).cloned());
    let r = metrics(&dup, &dup, &[], &cfg(200)).unwrap();
    assert_eq!((r.cov, r.mmd, r.jsd), (100.0, 0.0, 0.0));
    assert_eq!(r.novelty, 100.0);
}

#[test]
fn shuffled_copy_is_fully_covered() {
    let x = corpus(10, 2);
    let mut y = x.clone();
    y.reverse();
    y.swap(0, 3);
    let c = cfg(200);
    let clouds = |s: &[CadSequence]| -> Vec<PointCloud> {
        s.iter().map(|q| sample_points(q, 200).unwrap()).collect()
    };
    let (gx, gy) = (clouds(&x), clouds(&y));
    let mut covered = [false; 10];
    for g in &gx {
        let row: Vec<f64> = gy.iter().map(|r| brute_chamfer(g, r)).collect();
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.iter().enumerate().filter(|(_, &d)| d == m).for_each(|(j, _)| covered[j] = true);
    }
    let expect = 10.0 * covered.iter().filter(|&&b| b).count() as f64;
    let r = metrics(&x, &y, &[], &c).unwrap();
    assert_eq!(r.cov, expect);
    assert_eq!(r.cov, 100.0);
}

#[test]
fn uniqueness_counts_models_seen_exactly_once() {
    let s = square();
    let r = metrics(&vec![s.clone(); 5], slice::from_ref(&s), &[], &cfg(100)).unwrap();
    assert_eq!(r.unique, 0.0);
    let c = circle(100, 100, 40);
    let r = metrics(slice::from_ref(&s), slice::from_ref(&c), slice::from_ref(&c), &cfg(100)).unwrap();
    assert_eq!((r.novelty, r.unique), (100.0, 100.0));
    let r = metrics(&[s.clone(), s.clone(), c.clone()], &[c], &[], &cfg(100)).unwrap();
    assert!((r.unique - 100.0 / 3.0).abs() < 1e-12);
}

#[test]
fn invalid_samples_raise_invalidity() {
    let mut gen = corpus(9, 3);
    gen.push(CadSequence::new(vec![Command::line(1, 2), Command::eos()]));
    let r = metrics(&gen, &corpus(4, 4), &[], &cfg(100)).unwrap();
    assert_eq!(r.invalidity, 10.0);
    let bad = vec![CadSequence::new(vec![Command::eos()])];
    assert_eq!(metrics(&bad, &gen, &[], &cfg(100)), Err(EvalError::NoGeometry));
    assert_eq!(metrics(&[], &gen, &[], &cfg(100)), Err(EvalError::EmptyList("generated")));
}

#[test]
fn jsd_is_bounded() {
    let near = PointCloud { points: vec![[0.01; 3]; 10] };
    let far = PointCloud { points: vec![[0.99; 3]; 10] };
    let (near_s, far_s) = (slice::from_ref(&near), slice::from_ref(&far));
    assert!((jsd(near_s, far_s, 28) - LN_2).abs() < 1e-12);
    assert_eq!(jsd(near_s, near_s, 28), 0.0);
    let mixed = PointCloud { points: vec![[0.01; 3], [0.99; 3]] };
    let v = jsd(&[mixed], &[near], 28);
    assert!(v > 0.0 && v < LN_2);
}

#[test]
fn svg_has_one_element_per_curve() {
    let svg = export_svg(&square(), 0).unwrap();
    assert_eq!(svg.matches("<path").count(), 4);
    assert_eq!(svg, export_svg(&square(), 0).unwrap());
    let svg = export_svg(&circle(128, 128, 51), 0).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
    assert!(svg.contains(&format!("r=\"{:.6}\"", dequantize(51))));
    assert_eq!(
        export_svg(&square(), 1),
        Err(EvalError::NoSuchSketch { index: 1, count: 1 })
    );
    let arc = CadSequence::new(vec![
        Command::sol(),
        Command::arc(255, 128, 128, 1),
        Command::line(0, 128),
        extrude(10),
        Command::eos(),
    ]);
    let svg = export_svg(&arc, 0).unwrap();
    assert!(svg.contains(" A "), "{svg}");
}
