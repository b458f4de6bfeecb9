use std::collections::{HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use super::geometry::{sample_points, PointCloud};
use super::EvalError;
use crate::cadseq::{validate, CadSequence};
use crate::par::{map_range, Exec};

/// Symmetric Chamfer distance: mean squared distance from each point of one
/// cloud to its nearest neighbour in the other, summed over both directions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let one_way = |x: &PointCloud, y: &PointCloud| {
        let total: f64 = x
            .points
            .iter()
            .map(|p| {
                y.points
                    .iter()
                    .map(|q| {
                        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / x.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

fn occupancy(clouds: &[PointCloud], res: usize) -> Vec<f64> {
    let mut h = vec![0.0; res * res * res];
    let cell = |v: f64| ((v * res as f64).floor().max(0.0) as usize).min(res - 1);
    for p in clouds.iter().flat_map(|c| &c.points) {
        h[(cell(p[0]) * res + cell(p[1])) * res + cell(p[2])] += 1.0;
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

/// Jensen-Shannon divergence (natural log) between the pooled occupancy
/// histograms of two populations on a `res^3` grid over the unit cube.
/// Points outside the cube fall into the nearest boundary cell.
pub fn jsd(a: &[PointCloud], b: &[PointCloud], res: usize) -> f64 {
    let p = occupancy(a, res.max(1));
    let q = occupancy(b, res.max(1));
    let kl = |x: f64, m: f64| if x > 0.0 { x * (x / m).ln() } else { 0.0 };
    p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let m = 0.5 * (pi + qi);
            0.5 * kl(pi, m) + 0.5 * kl(qi, m)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub points_per_model: usize,
    pub jsd_resolution: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            points_per_model: 2000,
            jsd_resolution: 28,
            exec: Exec::default(),
        }
    }
}

/// COV, novelty, unique and invalidity are percentages; MMD is the Chamfer
/// distance times 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cov: f64,
    pub mmd: f64,
    pub jsd: f64,
    pub novelty: f64,
    pub unique: f64,
    pub invalidity: f64,
}

fn clouds(seqs: &[&CadSequence], cfg: &MetricsConfig) -> Vec<PointCloud> {
    map_range(cfg.exec, seqs.len(), |i| {
        sample_points(seqs[i], cfg.points_per_model).unwrap_or_default()
    })
    .into_iter()
    .filter(|c| !c.is_empty())
    .collect()
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Scores `generated` against `reference` and `train`.
///
/// Invalidity counts every generated sequence; the other metrics use the
/// valid ones. Unique is the share of valid samples whose token sequence
/// occurs exactly once among them; novelty the share absent from `train`.
/// A reference model is covered when it is a nearest neighbour (ties
/// included) of some generated model under Chamfer distance.
pub fn metrics(
    generated: &[CadSequence],
    reference: &[CadSequence],
    train: &[CadSequence],
    cfg: &MetricsConfig,
) -> Result<MetricsReport, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::EmptyList("generated"));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyList("reference"));
    }
    let valid: Vec<&CadSequence> = generated.iter().filter(|s| validate(s).valid).collect();
    let invalidity = percent(generated.len() - valid.len(), generated.len());

    let mut counts: HashMap<Vec<u16>, usize> = HashMap::new();
    for s in &valid {
        *counts.entry(s.token_key()).or_default() += 1;
    }
    let once = valid.iter().filter(|s| counts[&s.token_key()] == 1).count();
    let seen: HashSet<Vec<u16>> = train.iter().map(CadSequence::token_key).collect();
    let novel = valid.iter().filter(|s| !seen.contains(&s.token_key())).count();

    let refs: Vec<&CadSequence> = reference.iter().filter(|s| validate(s).valid).collect();
    if refs.len() < reference.len() {
        warn!("ignoring {} invalid reference models", reference.len() - refs.len());
    }
    let gen_clouds = clouds(&valid, cfg);
    let ref_clouds = clouds(&refs, cfg);
    if gen_clouds.is_empty() || ref_clouds.is_empty() {
        return Err(EvalError::NoGeometry);
    }
    let nr = ref_clouds.len();
    let dist = map_range(cfg.exec, gen_clouds.len() * nr, |k| {
        chamfer(&gen_clouds[k / nr], &ref_clouds[k % nr])
    })
    .into_iter()
    .collect::<Result<Vec<f64>, _>>()?;

    let mut covered = vec![false; nr];
    for row in dist.chunks(nr) {
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        for (c, &d) in covered.iter_mut().zip(row) {
            *c |= d == m;
        }
    }
    let mmd = (0..nr)
        .map(|r| dist.chunks(nr).map(|row| row[r]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / nr as f64;

    Ok(MetricsReport {
        cov: percent(covered.iter().filter(|&&c| c).count(), nr),
        mmd: 100.0 * mmd,
        jsd: jsd(&gen_clouds, &ref_clouds, cfg.jsd_resolution),
        novelty: percent(novel, valid.len()),
        unique: percent(once, valid.len()),
        invalidity,
    })
}
