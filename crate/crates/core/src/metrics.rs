//! Structural measures of an emergent lexicon: Hausdorff distances between
//! trajectories, A/P/R coherence and topographic maps with their ρ scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::referents::Referent;
use crate::sensorimotor::Trajectory;

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// `max_{a∈from} min_{b∈to} |a-b|²`, abandoning a row once it cannot raise the max.
fn directed2(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let mut worst = 0.0f64;
    for &a in from {
        let mut nearest = f64::INFINITY;
        for &b in to {
            let d = dist2(a, b);
            if d < nearest {
                nearest = d;
                if nearest <= worst {
                    break;
                }
            }
        }
        worst = worst.max(nearest);
    }
    worst
}

/// Symmetric Hausdorff distance between two point sequences.
pub fn hausdorff(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::InvalidInput("hausdorff of an empty trajectory".into()));
    }
    Ok(directed2(&a.points, &b.points).max(directed2(&b.points, &a.points)).sqrt())
}

/// One produced utterance, labelled for grouping.
#[derive(Clone, Debug)]
pub struct Sample {
    pub agent: usize,
    pub referent: usize,
    /// Perspective index, or repetition index when referents have a single view.
    pub perspective: usize,
    pub trajectory: Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    /// Across agents, same referent and perspective.
    pub agents: f64,
    /// Across perspectives, same agent and referent.
    pub perspectives: f64,
    /// Across referents, same agent and perspective.
    pub referents: f64,
}

/// Mean distance over all pairs that share `key` but differ in `varying`.
/// Distances are summed in sorted order so the value does not depend on sample order.
fn pooled<K: Ord, V: PartialEq>(samples: &[Sample], key: impl Fn(&Sample) -> K, varying: impl Fn(&Sample) -> V) -> Result<f64> {
    let mut groups: BTreeMap<K, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(key(s)).or_default().push(s);
    }
    let mut dists = Vec::new();
    for members in groups.values() {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                if varying(a) != varying(b) {
                    dists.push(hausdorff(&a.trajectory, &b.trajectory)?);
                }
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::InvalidInput("no group has two comparable samples".into()));
    }
    dists.sort_by(f64::total_cmp);
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

pub fn coherence_a(samples: &[Sample]) -> Result<f64> {
    pooled(samples, |s| (s.referent, s.perspective), |s| s.agent)
}

pub fn coherence_p(samples: &[Sample]) -> Result<f64> {
    pooled(samples, |s| (s.agent, s.referent), |s| s.perspective)
}

pub fn coherence_r(samples: &[Sample]) -> Result<f64> {
    pooled(samples, |s| (s.agent, s.perspective), |s| s.referent)
}

pub fn coherence(samples: &[Sample]) -> Result<Coherence> {
    Ok(Coherence {
        agents: coherence_a(samples)?,
        perspectives: coherence_p(samples)?,
        referents: coherence_r(samples)?,
    })
}

/// Membership of a compositional referent relative to the map's feature pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    /// Both features: R[i,j].
    Both,
    /// Feature i only: R[i,X].
    First,
    /// Feature j only: R[X,j].
    Second,
    /// Neither: R[X,X].
    Neither,
}

impl Tag {
    pub fn of(r: Referent, i: usize, j: usize) -> Tag {
        match (r.contains(i), r.contains(j)) {
            (true, true) => Tag::Both,
            (true, false) => Tag::First,
            (false, true) => Tag::Second,
            (false, false) => Tag::Neither,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Tag::Both => "R[i,j]",
            Tag::First => "R[i,X]",
            Tag::Second => "R[X,j]",
            Tag::Neither => "R[X,X]",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Tag::Both => "green",
            Tag::First => "blue",
            Tag::Second => "orange",
            Tag::Neither => "black",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopographicPoint {
    pub agent: usize,
    pub referent: Referent,
    pub tag: Tag,
    /// Distances to the utterance of feature i and of feature j.
    pub x: f64,
    pub y: f64,
}

/// Places every compositional utterance by its distances to the two
/// single-feature reference utterances. `references[f]` is the reference for feature `f`.
pub fn topographic_map(
    i: usize,
    j: usize,
    agent: usize,
    references: &[Trajectory],
    compositions: &[(Referent, Trajectory)],
) -> Result<Vec<TopographicPoint>> {
    let (ri, rj) = match (references.get(i), references.get(j)) {
        (Some(a), Some(b)) if i != j => (a, b),
        _ => {
            return Err(Error::InvalidInput(format!(
                "missing single-feature utterance for pair ({i}, {j})"
            )))
        }
    };
    compositions
        .iter()
        .map(|(r, t)| {
            Ok(TopographicPoint {
                agent,
                referent: *r,
                tag: Tag::of(*r, i, j),
                x: hausdorff(ri, t)?,
                y: hausdorff(rj, t)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Barycenters {
    pub both: [f64; 2],
    pub first: [f64; 2],
    pub second: [f64; 2],
    pub neither: [f64; 2],
}

pub fn barycenters(points: &[TopographicPoint]) -> Result<Barycenters> {
    let center = |tag: Tag| -> Result<[f64; 2]> {
        let group: Vec<&TopographicPoint> = points.iter().filter(|p| p.tag == tag).collect();
        if group.is_empty() {
            return Err(Error::InvalidInput(format!("no {} points in the map", tag.label())));
        }
        let n = group.len() as f64;
        Ok([
            group.iter().map(|p| p.x).sum::<f64>() / n,
            group.iter().map(|p| p.y).sum::<f64>() / n,
        ])
    };
    Ok(Barycenters {
        both: center(Tag::Both)?,
        first: center(Tag::First)?,
        second: center(Tag::Second)?,
        neither: center(Tag::Neither)?,
    })
}

fn norm(p: [f64; 2]) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

/// `|h_ij| - |h_k|` for whichever single-feature barycenter `h_k` lies nearest
/// to `h_ij`; on a tie the smaller norm is used.
pub fn rho(b: &Barycenters) -> f64 {
    let d1 = dist2(b.both, b.first);
    let d2 = dist2(b.both, b.second);
    let nearest = if d1 < d2 {
        norm(b.first)
    } else if d2 < d1 {
        norm(b.second)
    } else {
        norm(b.first).min(norm(b.second))
    };
    norm(b.both) - nearest
}

pub fn topographic_score(points: &[TopographicPoint]) -> Result<f64> {
    Ok(rho(&barycenters(points)?))
}
