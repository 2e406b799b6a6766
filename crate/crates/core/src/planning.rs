//! Consumers of the distance field: a reactive avoidance step and a
//! covariant gradient trajectory optimizer for a sphere-approximated body.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

use crate::field::DistanceField;
use crate::geometry::{Point3, Vector3};
use crate::gp::FieldSample;

#[derive(Debug, Error, PartialEq)]
pub enum PlanningError {
    #[error("invalid planner parameters: {0}")]
    Config(String),
    #[error("a trajectory needs at least 2 waypoints, got {0}")]
    TooShort(usize),
    #[error("non-finite waypoint at index {0}")]
    NonFiniteWaypoint(usize),
    #[error("endpoint {waypoint} is in collision: sphere {sphere} has distance {distance:.4} <= clearance {epsilon}")]
    EndpointInCollision { waypoint: usize, sphere: usize, distance: f64, epsilon: f64 },
    #[error("cost became non-finite at iteration {iteration} (smoothness {smoothness}, obstacle {obstacle})")]
    NonFiniteCost { iteration: usize, smoothness: f64, obstacle: f64 },
}

/// Wraps a field and counts the points it is asked about.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<F: DistanceField> DistanceField for CountingField<F> {
    fn query(&self, x: &Point3) -> FieldSample {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.query(x)
    }

    fn query_batch(&self, xs: &[Point3]) -> Vec<FieldSample> {
        self.count.fetch_add(xs.len(), Ordering::Relaxed);
        self.inner.query_batch(xs)
    }
}

// ---------------------------------------------------------------------------
// Reactive avoidance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactiveParams {
    /// Distance at which repulsion starts, meters.
    pub d_safe: f64,
    /// Distance of full repulsion, meters.
    pub d_min: f64,
    pub step_size: f64,
    pub goal_tolerance: f64,
}

impl Default for ReactiveParams {
    fn default() -> Self {
        Self { d_safe: 0.3, d_min: 0.1, step_size: 0.05, goal_tolerance: 1e-3 }
    }
}

impl ReactiveParams {
    pub fn validate(&self) -> Result<(), PlanningError> {
        if !(self.d_min > 0.0 && self.d_min < self.d_safe && self.d_safe.is_finite()) {
            return Err(PlanningError::Config(format!(
                "need 0 < d_min < d_safe, got d_min = {}, d_safe = {}",
                self.d_min, self.d_safe
            )));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(PlanningError::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.goal_tolerance.is_finite() && self.goal_tolerance >= 0.0) {
            return Err(PlanningError::Config(format!("goal tolerance must be >= 0, got {}", self.goal_tolerance)));
        }
        Ok(())
    }
}

/// Repulsion weight: 0 beyond `d_safe`, 1 below `d_min`, linear in between.
pub fn repulsion_weight(distance: f64, params: &ReactiveParams) -> f64 {
    ((params.d_safe - distance) / (params.d_safe - params.d_min)).clamp(0.0, 1.0)
}

/// `v_att` rotated 90° about world z, or about x when `v_att` is vertical.
fn perpendicular(v_att: &Vector3) -> Vector3 {
    let axis = if v_att.cross(&Vector3::z()).norm() > 1e-9 { Vector3::z() } else { Vector3::x() };
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), std::f64::consts::FRAC_PI_2);
    r * v_att
}

/// Blends the field gradient (repulsive) with the goal direction (attractive).
///
/// Returns a unit vector, or zero once within `goal_tolerance` of the goal.
/// When the two directions are exactly opposed the repulsive vector is
/// replaced by the perpendicular tie-break direction, so the blend can never
/// cancel or trap the agent on the line through the obstacle.
pub fn reactive_step(x_s: &Point3, x_g: &Point3, sample: &FieldSample, params: &ReactiveParams) -> Vector3 {
    let to_goal = x_g - x_s;
    let dist = to_goal.norm();
    if dist <= params.goal_tolerance || dist == 0.0 {
        return Vector3::zeros();
    }
    let v_att = to_goal / dist;
    let w = repulsion_weight(sample.distance, params);
    if w == 0.0 {
        return v_att;
    }
    let mut v_rep = sample.gradient;
    if w > 0.0 && v_rep.dot(&v_att) <= -1.0 + 1e-12 {
        v_rep = perpendicular(&v_att);
    }
    let blend = v_rep * w + v_att * (1.0 - w);
    let n = blend.norm();
    if n < 1e-12 {
        return perpendicular(&v_att);
    }
    blend / n
}

/// Result of a reactive rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub path: Vec<Point3>,
    pub reached: bool,
    /// Smallest queried distance along the path.
    pub min_clearance: f64,
    pub steps: usize,
}

/// Incremental reactive controller. Callers can update the field between
/// steps (for example by integrating a new frame).
#[derive(Debug, Clone)]
pub struct ReactiveStepper {
    goal: Point3,
    params: ReactiveParams,
    path: Vec<Point3>,
    min_clearance: f64,
    reached: bool,
}

impl ReactiveStepper {
    pub fn new(start: Point3, goal: Point3, params: ReactiveParams) -> Result<Self, PlanningError> {
        params.validate()?;
        let reached = (goal - start).norm() <= params.goal_tolerance;
        Ok(Self { goal, params, path: vec![start], min_clearance: f64::INFINITY, reached })
    }

    pub fn position(&self) -> Point3 {
        *self.path.last().expect("path is never empty")
    }

    pub fn reached(&self) -> bool {
        self.reached
    }

    pub fn min_clearance(&self) -> f64 {
        self.min_clearance
    }

    pub fn steps(&self) -> usize {
        self.path.len() - 1
    }

    /// Queries the field at the current position and moves one step.
    /// Returns `true` once the goal is reached.
    pub fn step<F: DistanceField + ?Sized>(&mut self, field: &F) -> bool {
        let x = self.position();
        let sample = field.query(&x);
        self.min_clearance = self.min_clearance.min(sample.distance);
        if self.reached {
            return true;
        }
        let v = reactive_step(&x, &self.goal, &sample, &self.params);
        if v == Vector3::zeros() {
            self.reached = true;
            return true;
        }
        let len = self.params.step_size.min((self.goal - x).norm());
        let next = x + v * len;
        self.path.push(next);
        if (self.goal - next).norm() <= self.params.goal_tolerance {
            self.reached = true;
            let s = field.query(&next);
            self.min_clearance = self.min_clearance.min(s.distance);
        }
        self.reached
    }

    pub fn finish(self) -> Rollout {
        let steps = self.steps();
        Rollout { path: self.path, reached: self.reached, min_clearance: self.min_clearance, steps }
    }
}

/// Follows the reactive direction field from `start` for at most `max_steps`.
pub fn reactive_rollout<F: DistanceField + ?Sized>(
    start: Point3,
    goal: Point3,
    field: &F,
    params: &ReactiveParams,
    max_steps: usize,
) -> Result<Rollout, PlanningError> {
    let mut stepper = ReactiveStepper::new(start, goal, *params)?;
    while !stepper.reached() && stepper.steps() < max_steps {
        stepper.step(field);
    }
    if stepper.reached() && stepper.min_clearance.is_infinite() {
        stepper.step(field);
    }
    Ok(stepper.finish())
}

// ---------------------------------------------------------------------------
// Trajectory optimization

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<Point3>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Point3>) -> Result<Self, PlanningError> {
        if waypoints.len() < 2 {
            return Err(PlanningError::TooShort(waypoints.len()));
        }
        if let Some(i) = waypoints.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(PlanningError::NonFiniteWaypoint(i));
        }
        Ok(Self { waypoints })
    }

    /// `n` evenly spaced waypoints from `a` to `b`, endpoints exact.
    pub fn straight_line(a: Point3, b: Point3, n: usize) -> Result<Self, PlanningError> {
        if n < 2 {
            return Err(PlanningError::TooShort(n));
        }
        let mut pts: Vec<Point3> = (0..n).map(|k| a + (b - a) * (k as f64 / (n - 1) as f64)).collect();
        pts[n - 1] = b;
        Self::new(pts)
    }

    pub fn waypoints(&self) -> &[Point3] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Unit tangent at each waypoint (central differences, one-sided at the ends).
    fn tangents(&self) -> Vec<Vector3> {
        let w = &self.waypoints;
        let n = w.len();
        (0..n)
            .map(|k| {
                let d = w[(k + 1).min(n - 1)] - w[k.saturating_sub(1)];
                let len = d.norm();
                if len > 1e-12 {
                    d / len
                } else {
                    Vector3::x()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySphere {
    /// Offset in the path frame: x along the tangent, y horizontal, z completing the frame.
    pub offset: [f64; 3],
    pub radius: f64,
}

/// Collision geometry carried along the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereBody {
    pub spheres: Vec<BodySphere>,
}

impl Default for SphereBody {
    fn default() -> Self {
        Self::along_tangent(3, 0.05, 0.05)
    }
}

impl SphereBody {
    pub fn new(spheres: Vec<BodySphere>) -> Result<Self, PlanningError> {
        let body = Self { spheres };
        body.validate()?;
        Ok(body)
    }

    /// `count` spheres of `radius` centered on the waypoint, spaced by `spacing` along the tangent.
    pub fn along_tangent(count: usize, radius: f64, spacing: f64) -> Self {
        let mid = (count as f64 - 1.0) / 2.0;
        let spheres =
            (0..count).map(|i| BodySphere { offset: [(i as f64 - mid) * spacing, 0.0, 0.0], radius }).collect();
        Self { spheres }
    }

    /// A 29-sphere chain approximating a manipulator sweep: a column of
    /// spheres of shrinking radius stacked along the path-frame z axis.
    pub fn arm_chain() -> Self {
        let spheres = (0..29)
            .map(|i| {
                let t = i as f64 / 28.0;
                BodySphere { offset: [0.0, 0.0, 0.04 * i as f64], radius: 0.06 - 0.03 * t }
            })
            .collect();
        Self { spheres }
    }

    pub fn validate(&self) -> Result<(), PlanningError> {
        if self.spheres.is_empty() {
            return Err(PlanningError::Config("body needs at least one sphere".into()));
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius.is_finite() && s.radius > 0.0) || !s.offset.iter().all(|v| v.is_finite()) {
                return Err(PlanningError::Config(format!("sphere {i} needs a finite positive radius and offset")));
            }
        }
        Ok(())
    }

    /// World centers of every sphere at every waypoint, waypoint-major.
    pub fn centers(&self, traj: &Trajectory) -> Vec<Point3> {
        let tangents = traj.tangents();
        let mut out = Vec::with_capacity(traj.len() * self.spheres.len());
        for (w, t) in traj.waypoints.iter().zip(&tangents) {
            let frame = path_frame(t);
            for s in &self.spheres {
                out.push(w + frame * Vector3::from(s.offset));
            }
        }
        out
    }
}

/// Rotation whose x axis is the tangent and whose y axis is horizontal when possible.
fn path_frame(t: &Vector3) -> nalgebra::Matrix3<f64> {
    let up = if t.cross(&Vector3::z()).norm() > 1e-6 { Vector3::z() } else { Vector3::x() };
    let y = up.cross(t).normalize();
    let z = t.cross(&y);
    nalgebra::Matrix3::from_columns(&[*t, y, z])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChompParams {
    /// Obstacle clearance ε of the hinge cost, meters.
    pub epsilon: f64,
    /// Smoothness weight λ.
    pub smoothness_weight: f64,
    pub obstacle_weight: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this.
    pub tolerance: f64,
}

impl Default for ChompParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            smoothness_weight: 1.0,
            obstacle_weight: 1.0,
            learning_rate: 0.05,
            max_iterations: 300,
            tolerance: 1e-9,
        }
    }
}

impl ChompParams {
    pub fn validate(&self) -> Result<(), PlanningError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(PlanningError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return Err(PlanningError::Config(format!(
                "smoothness weight must be >= 0, got {}",
                self.smoothness_weight
            )));
        }
        if !(self.obstacle_weight.is_finite() && self.obstacle_weight >= 0.0) {
            return Err(PlanningError::Config(format!("obstacle weight must be >= 0, got {}", self.obstacle_weight)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PlanningError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.max_iterations == 0 {
            return Err(PlanningError::Config("max iterations must be >= 1".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(PlanningError::Config(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Hinge obstacle cost of a signed clearance `d`.
pub fn obstacle_cost(d: f64, epsilon: f64) -> f64 {
    if d >= epsilon {
        0.0
    } else if d >= 0.0 {
        (epsilon - d).powi(2) / (2.0 * epsilon)
    } else {
        epsilon / 2.0 - d
    }
}

/// Derivative of [`obstacle_cost`] with respect to `d`.
pub fn obstacle_cost_derivative(d: f64, epsilon: f64) -> f64 {
    if d >= epsilon {
        0.0
    } else if d >= 0.0 {
        -(epsilon - d) / epsilon
    } else {
        -1.0
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The gradient vanished (already optimal).
    Stationary,
    /// An accepted step lowered the cost by less than the tolerance.
    Converged,
    /// Backtracking shrank the step to nothing without a decrease.
    StepExhausted,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChompResult {
    pub trajectory: Trajectory,
    /// Cost after every accepted iterate, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// Field queries per cost evaluation.
    pub queries_per_evaluation: usize,
}

struct Evaluation {
    smoothness: f64,
    obstacle: f64,
    gradient: Vec<Vector3>,
}

impl Evaluation {
    fn total(&self) -> f64 {
        self.smoothness + self.obstacle
    }
}

fn evaluate_cost<F: DistanceField + ?Sized>(
    traj: &Trajectory,
    body: &SphereBody,
    field: &F,
    params: &ChompParams,
    with_gradient: bool,
) -> Evaluation {
    let w = &traj.waypoints;
    let n = w.len();
    let mut gradient = vec![Vector3::zeros(); n];
    let mut smoothness = 0.0;
    for k in 1..n - 1 {
        let a = (w[k + 1] - w[k]) - (w[k] - w[k - 1]);
        smoothness += a.norm_squared();
        if with_gradient {
            let g = a * (2.0 * params.smoothness_weight);
            gradient[k - 1] += g;
            gradient[k] -= g * 2.0;
            gradient[k + 1] += g;
        }
    }
    smoothness *= params.smoothness_weight;

    let centers = body.centers(traj);
    let samples = field.query_batch(&centers);
    let m = body.spheres.len();
    let mut obstacle = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let r = body.spheres[i % m].radius;
        let d = s.distance - r;
        obstacle += obstacle_cost(d, params.epsilon);
        if with_gradient && s.gradient_defined {
            gradient[i / m] += s.gradient * (params.obstacle_weight * obstacle_cost_derivative(d, params.epsilon));
        }
    }
    obstacle *= params.obstacle_weight;
    Evaluation { smoothness, obstacle, gradient }
}

/// Interior block of `DᵀD` for the second-difference operator `D`, scaled so
/// that its inverse maps a unit impulse at the middle waypoint to a unit
/// displacement there.
fn preconditioner(n: usize) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let m = n.checked_sub(2)?;
    if m == 0 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    // Full DᵀD is pentadiagonal with stencil (1, -4, 6, -4, 1), reduced at
    // the ends; restrict it to interior waypoints 1..=n-2.
    let full = |i: usize, j: usize| -> f64 {
        let mut v = 0.0;
        for r in 1..n - 1 {
            let coef = |c: usize| -> f64 {
                if c + 1 == r || c == r + 1 {
                    1.0
                } else if c == r {
                    -2.0
                } else {
                    0.0
                }
            };
            v += coef(i) * coef(j);
        }
        v
    };
    for i in 0..m {
        for j in i.saturating_sub(2)..(i + 3).min(m) {
            a[(i, j)] = full(i + 1, j + 1);
        }
    }
    let chol = Cholesky::new(a)?;
    let mut e = nalgebra::DVector::zeros(m);
    e[m / 2] = 1.0;
    let peak = chol.solve(&e)[m / 2];
    Some((chol, peak))
}

/// Minimizes smoothness plus hinge obstacle cost over the interior waypoints.
///
/// Steps are preconditioned by the inverse smoothness operator and accepted
/// only if they do not raise the cost; otherwise the learning rate is halved
/// and the step retried. Endpoints are never touched.
pub fn chomp_optimize<F: DistanceField + ?Sized>(
    init: &Trajectory,
    body: &SphereBody,
    field: &F,
    params: &ChompParams,
) -> Result<ChompResult, PlanningError> {
    params.validate()?;
    body.validate()?;
    let n = init.len();
    let m = body.spheres.len();

    // Endpoints must start collision free.
    let centers = body.centers(init);
    for (wp, base) in [(0usize, 0usize), (n - 1, (n - 1) * m)] {
        let samples = field.query_batch(&centers[base..base + m]);
        for (sphere, s) in samples.iter().enumerate() {
            if !(s.distance > params.epsilon) {
                return Err(PlanningError::EndpointInCollision {
                    waypoint: wp,
                    sphere,
                    distance: s.distance,
                    epsilon: params.epsilon,
                });
            }
        }
    }

    let mut current = init.clone();
    let mut eval = evaluate_cost(&current, body, field, params, true);
    check_finite(&eval, 0)?;
    let mut history = vec![eval.total()];
    let Some((chol, peak)) = preconditioner(n) else {
        return Ok(ChompResult {
            trajectory: current,
            cost_history: history,
            iterations: 0,
            stop: StopReason::Stationary,
            queries_per_evaluation: n * m,
        });
    };

    let mut lr = params.learning_rate;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    while iterations < params.max_iterations {
        let interior = &eval.gradient[1..n - 1];
        let gmax = interior.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if !(gmax >= 1e-12) {
            stop = StopReason::Stationary;
            break;
        }
        let mut g = DMatrix::<f64>::zeros(n - 2, 3);
        for (i, v) in interior.iter().enumerate() {
            for c in 0..3 {
                g[(i, c)] = v[c];
            }
        }
        let step = chol.solve(&g) / peak;
        iterations += 1;
        let mut accepted = false;
        while lr > 1e-12 {
            let mut pts = current.waypoints.clone();
            for (i, p) in pts[1..n - 1].iter_mut().enumerate() {
                *p -= Vector3::new(step[(i, 0)], step[(i, 1)], step[(i, 2)]) * lr;
            }
            let candidate = Trajectory { waypoints: pts };
            let next = evaluate_cost(&candidate, body, field, params, true);
            check_finite(&next, iterations)?;
            if next.total() <= eval.total() {
                let decrease = eval.total() - next.total();
                current = candidate;
                eval = next;
                history.push(eval.total());
                accepted = true;
                if decrease < params.tolerance {
                    stop = StopReason::Converged;
                }
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            stop = StopReason::StepExhausted;
            break;
        }
        if stop == StopReason::Converged {
            break;
        }
    }
    Ok(ChompResult { trajectory: current, cost_history: history, iterations, stop, queries_per_evaluation: n * m })
}

fn check_finite(eval: &Evaluation, iteration: usize) -> Result<(), PlanningError> {
    if eval.total().is_finite() {
        Ok(())
    } else {
        Err(PlanningError::NonFiniteCost { iteration, smoothness: eval.smoothness, obstacle: eval.obstacle })
    }
}
