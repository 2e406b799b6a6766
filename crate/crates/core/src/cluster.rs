//! Capacity-bounded clustering of training points and the shared query rule.
//!
//! Both the per-frame field and the persistent store partition their points
//! into small local GPs. Summing occupancy across independently solved
//! clusters double counts overlapping support and drives the reverted
//! distance to zero near dense surfaces, so a query instead takes the
//! minimum reverted distance over clusters, visiting candidates in order of
//! their bounding-box distance.
//!
//! A cluster's reverted distance can undercut its box distance: a dense patch
//! extrapolates like a wide blob, and a sparse one overshoots between its
//! points. With [`ClusterFloor::BoundingBox`] every cluster's distance is
//! raised to at least its box distance less a slack. The box order then gives an exact
//! branch-and-bound, and the result is capped at the reach of the nearest
//! clusters (no training point lies beyond the nearest farthest corner), so
//! clusters past that reach are skipped without changing the answer. With
//! [`ClusterFloor::None`] the same stopping rules are only heuristics.
//!
//! Small clusters keep the per-model solve well conditioned. Dense clusters of
//! many points get large, mixed-sign weights whose sum inflates far-field
//! occupancy and shortens the reverted distance.

use crate::geometry::{Aabb, Point3, Vector3};
use crate::gp::{build_local_gp, outward_direction, FieldSample, GpError, KernelParams, LocalGpModel};

/// Default maximum number of training points per local model of the
/// persistent store, which answers far-field queries.
pub const DEFAULT_LEAF_CAPACITY: usize = 8;

/// Default capacity for the per-frame field. It only corrects points near the
/// observed surface, where larger models interpolate better between pixels.
pub const FRAME_LEAF_CAPACITY: usize = 32;

/// Octant subdivision stops at this depth; leftovers are chunked.
const MAX_SPLIT_DEPTH: usize = 24;

/// How the gradient is resolved when the best distance is clamped to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Use the direction of the occupancy summed over every cluster within the
    /// gather radius. Well defined on and inside surfaces.
    #[default]
    Full,
    /// Keep the argmin cluster's gradient. Cheaper; fine when a zero distance
    /// makes the gradient irrelevant (fusion).
    Argmin,
}

/// Lower bound on each cluster's distance before the minimum is taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterFloor {
    /// Raw reverted distances.
    None,
    /// At least the distance to the cluster's bounding box minus `slack`.
    /// Continuous in the query point and exact to search. A slack of about
    /// the point spacing lets the field interpolate across the gaps between
    /// neighbouring boxes; with zero slack those gaps read as free space.
    BoundingBox { slack: f64 },
}

impl ClusterFloor {
    fn slack(self) -> Option<f64> {
        match self {
            ClusterFloor::None => None,
            ClusterFloor::BoundingBox { slack } => Some(slack.max(0.0)),
        }
    }
}

/// Splits the points of one cell into groups of at most `capacity` by
/// recursive octant subdivision of `cell`. Output order is deterministic.
pub fn split_to_capacity(points: Vec<Point3>, cell: Aabb, capacity: usize) -> Vec<Vec<Point3>> {
    assert!(capacity > 0, "capacity must be positive");
    let mut out = Vec::new();
    split_rec(points, cell, capacity, 0, &mut out);
    out
}

fn split_rec(points: Vec<Point3>, cell: Aabb, capacity: usize, depth: usize, out: &mut Vec<Vec<Point3>>) {
    if points.is_empty() {
        return;
    }
    if points.len() <= capacity {
        out.push(points);
        return;
    }
    if depth >= MAX_SPLIT_DEPTH {
        out.extend(points.chunks(capacity).map(|c| c.to_vec()));
        return;
    }
    let c = cell.center();
    let mut children: [Vec<Point3>; 8] = Default::default();
    for p in points {
        let idx = usize::from(p.x >= c.x) | usize::from(p.y >= c.y) << 1 | usize::from(p.z >= c.z) << 2;
        children[idx].push(p);
    }
    for (idx, child) in children.into_iter().enumerate() {
        let mut lo = cell.min;
        let mut hi = c;
        for axis in 0..3 {
            if idx >> axis & 1 == 1 {
                lo[axis] = c[axis];
                hi[axis] = cell.max[axis];
            }
        }
        split_rec(child, Aabb::new(lo, hi), capacity, depth + 1, out);
    }
}

/// A spatial bucket (grid cell or octree leaf) with one model per cluster.
#[derive(Debug, Clone)]
pub struct ClusterGroup {
    bounds: Aabb,
    models: Vec<LocalGpModel>,
}

impl ClusterGroup {
    /// Partitions `points` (all inside `cell`) and trains one model per part.
    pub fn build(points: Vec<Point3>, cell: Aabb, capacity: usize, params: &KernelParams) -> Result<Self, GpError> {
        let models = split_to_capacity(points, cell, capacity)
            .iter()
            .map(|part| build_local_gp(part, params))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_models(models))
    }

    /// Wraps already trained models.
    pub fn from_models(models: Vec<LocalGpModel>) -> Self {
        let mut bounds = Aabb::empty();
        for m in &models {
            bounds.grow_box(m.bounds());
        }
        Self { bounds, models }
    }

    /// Bounding box of all training points in the group.
    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn models(&self) -> &[LocalGpModel] {
        &self.models
    }

    pub fn point_count(&self) -> usize {
        self.models.iter().map(LocalGpModel::len).sum()
    }
}

/// Minimum-over-clusters query against a set of candidate groups.
///
/// Groups farther than the gather radius (`3l`) are ignored; with nothing in
/// range the far sentinel is returned.
pub fn evaluate<'a, I>(
    groups: I,
    x: &Point3,
    params: &KernelParams,
    mode: GradientMode,
    floor: ClusterFloor,
) -> FieldSample
where
    I: IntoIterator<Item = &'a ClusterGroup>,
{
    let radius = params.max_distance();
    let mut near: Vec<(f64, &ClusterGroup)> = groups
        .into_iter()
        .filter_map(|g| {
            let d = g.bounds.distance(x);
            (d < radius).then_some((d, g))
        })
        .collect();
    if near.is_empty() {
        return FieldSample::far(params);
    }
    near.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Every point of a cluster lies within the far corner of its box, so the
    // nearest training point is no farther than `reach`.
    let mut reach = f64::INFINITY;
    for &(gd, g) in &near {
        if gd > reach {
            break;
        }
        for m in &g.models {
            reach = reach.min(m.bounds().max_distance(x));
        }
    }

    // Lower bound of a cluster's floored distance given its box distance.
    let slack = floor.slack();
    let lower = |box_distance: f64| box_distance - slack.unwrap_or(0.0);
    let cap = reach.min(radius);
    // A cluster can only matter if its lower bound beats the best so far and
    // does not exceed the cap. Ties with the cap are kept for their gradient.
    let hopeless = |lower: f64, best: f64| lower >= best || (slack.is_some() && lower > cap);
    let mut best = f64::INFINITY;
    let mut best_sample = FieldSample::far(params);
    let mut order: Vec<(f64, usize)> = Vec::new();
    'groups: for &(gd, g) in &near {
        if hopeless(lower(gd), best) || (slack.is_none() && gd > reach) {
            break;
        }
        order.clear();
        let limit = best.min(radius);
        order.extend(g.models.iter().enumerate().filter_map(|(i, m)| {
            let d = m.bounds().distance(x);
            let keep = match slack {
                Some(_) => !hopeless(lower(d), best) && d < radius,
                None => d < limit && d <= reach,
            };
            keep.then_some((d, i))
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(cd, i) in &order {
            if hopeless(lower(cd), best) {
                break;
            }
            let model = &g.models[i];
            let (occ, grad) = model.infer_occupancy(x);
            let d = crate::gp::revert_distance(occ, params);
            let floor_value = if slack.is_some() { lower(cd) } else { 0.0 };
            let candidate = d.max(floor_value);
            if candidate < best {
                best = candidate;
                best_sample = if candidate == d {
                    FieldSample::from_occupancy(occ, &grad, params)
                } else {
                    box_sample(model.bounds(), x, candidate, params)
                };
                if best == 0.0 {
                    break 'groups;
                }
            }
        }
    }
    if !best.is_finite() && slack.is_none() {
        return FieldSample::far(params);
    }
    let mut sample = best_sample;
    if slack.is_some() && sample.distance > cap {
        sample.distance = cap;
        sample.occupancy = occupancy_at(cap, params);
    }
    if best == 0.0 && mode == GradientMode::Full {
        let mut occ_sum = 0.0;
        let mut grad_sum = Vector3::zeros();
        for &(_, g) in &near {
            for m in &g.models {
                if m.bounds().distance(x) < radius {
                    let (o, gr) = m.infer_occupancy(x);
                    occ_sum += o;
                    grad_sum += gr;
                }
            }
        }
        let (gradient, defined) = outward_direction(occ_sum, &grad_sum);
        sample.gradient = gradient;
        sample.gradient_defined = defined;
    }
    sample
}

/// Occupancy that reverts to `distance`.
fn occupancy_at(distance: f64, params: &KernelParams) -> f64 {
    let l = params.lengthscale;
    params.signal_variance * (-distance * distance / (2.0 * l * l)).exp()
}

/// The sample of a cluster whose reverted distance undercuts its floor:
/// the floor value, pointing away from the nearest box point.
fn box_sample(bounds: &Aabb, x: &Point3, distance: f64, params: &KernelParams) -> FieldSample {
    let gradient = (x - bounds.closest_point(x)).normalize();
    FieldSample {
        distance,
        gradient,
        gradient_defined: true,
        occupancy: occupancy_at(distance, params),
        variance: None,
    }
}
