//! Deterministic planar simulator and synthetic demonstration generator for
//! the reach-the-target-around-an-obstacle task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demonstrations::{DemoCorpus, DemoPoint, DemoSource, Demonstration, Outcome};
use crate::dynamics::{DynamicsKind, DynamicsModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Box2 {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn distance_to_center(&self, p: &[f64]) -> f64 {
        ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.distance_to_center(p) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
    /// Further obstacles used only for collision checks and scoring.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_obstacles: Vec<Disk>,
    pub start_region: Box2,
    pub target: [f64; 2],
    pub target_radius: f64,
    pub workspace: Box2,
    pub dt: f64,
    pub max_steps: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            obstacle_center: [0.5, 0.4],
            obstacle_radius: 0.1,
            extra_obstacles: Vec::new(),
            start_region: Box2 {
                min: [0.05, 0.15],
                max: [0.05, 0.85],
            },
            target: [0.9, 0.6],
            target_radius: 0.05,
            workspace: Box2 {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            dt: 0.02,
            max_steps: 500,
        }
    }
}

impl Scenario {
    pub fn obstacle(&self) -> Disk {
        Disk {
            center: self.obstacle_center,
            radius: self.obstacle_radius,
        }
    }

    pub fn obstacles(&self) -> impl Iterator<Item = Disk> + '_ {
        std::iter::once(self.obstacle()).chain(self.extra_obstacles.iter().copied())
    }

    pub fn in_collision(&self, p: &[f64]) -> bool {
        self.obstacles().any(|d| d.contains(p))
    }

    pub fn at_target(&self, p: &[f64]) -> bool {
        ((p[0] - self.target[0]).powi(2) + (p[1] - self.target[1]).powi(2)).sqrt() <= self.target_radius
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.obstacle_radius > 0.0) || self.extra_obstacles.iter().any(|d| !(d.radius > 0.0)) {
            return bad("obstacle radius must be positive");
        }
        if self.obstacles().any(|d| !self.workspace.contains(d.center)) {
            return bad("obstacle must lie inside the workspace");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.workspace.width() > 0.0 && self.workspace.height() > 0.0) {
            return bad("workspace must have positive area");
        }
        if !(self.target_radius > 0.0) {
            return bad("target radius must be positive");
        }
        Ok(())
    }
}

/// Follows a list of planar waypoints at constant speed.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointController {
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    /// Switch to steering straight at this point once the robot is within
    /// `switch_distance` of it (used for deliberately failing demos).
    pub divert: Option<Divert>,
    /// Heading gain for the unicycle.
    pub heading_gain: f64,
    next: usize,
    diverted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divert {
    pub aim: [f64; 2],
    pub switch_distance: f64,
}

impl WaypointController {
    pub fn new(waypoints: Vec<[f64; 2]>, speed: f64) -> Self {
        Self {
            waypoints,
            speed,
            divert: None,
            heading_gain: 4.0,
            next: 0,
            diverted: false,
        }
    }

    pub fn with_divert(mut self, divert: Divert) -> Self {
        self.divert = Some(divert);
        self
    }

    fn goal(&mut self, p: [f64; 2], reach: f64) -> [f64; 2] {
        if let Some(d) = self.divert {
            let dist = ((p[0] - d.aim[0]).powi(2) + (p[1] - d.aim[1]).powi(2)).sqrt();
            if self.diverted || dist <= d.switch_distance {
                self.diverted = true;
                return d.aim;
            }
        }
        while self.next + 1 < self.waypoints.len() {
            let w = self.waypoints[self.next];
            if ((p[0] - w[0]).powi(2) + (p[1] - w[1]).powi(2)).sqrt() <= reach {
                self.next += 1;
            } else {
                break;
            }
        }
        self.waypoints[self.next.min(self.waypoints.len() - 1)]
    }

    /// Control for the current state.
    pub fn control(&mut self, model: &DynamicsModel, x: &[f64], dt: f64) -> Vec<f64> {
        let p = [x[0], x[1]];
        let goal = self.goal(p, (self.speed * dt).max(1e-9) * 1.5);
        let (dx, dy) = (goal[0] - p[0], goal[1] - p[1]);
        let dist = (dx * dx + dy * dy).sqrt();
        match model.kind {
            DynamicsKind::Integrator2d => {
                if dist < 1e-12 {
                    vec![0.0, 0.0]
                } else {
                    vec![self.speed * dx / dist, self.speed * dy / dist]
                }
            }
            DynamicsKind::Unicycle => {
                let want = dy.atan2(dx);
                let err = wrap_angle(want - x[2]);
                vec![self.speed * err.cos().max(0.0), self.heading_gain * err]
            }
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += tau;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ReachedTarget,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub points: Vec<DemoPoint>,
    pub termination: Termination,
}

/// Simulates `controller` from `start` until the target is reached, the
/// robot enters an obstacle (the colliding state is the last point), or
/// `max_steps` elapse.
pub fn rollout(
    scenario: &Scenario,
    model: &DynamicsModel,
    controller: &mut WaypointController,
    start: &[f64],
) -> Result<Rollout> {
    scenario.check()?;
    let mut x = start.to_vec();
    let mut points = Vec::new();
    let zero = vec![0.0; model.control_dim()];
    if scenario.in_collision(&x) || scenario.at_target(&x) {
        let termination = if scenario.in_collision(&x) {
            Termination::Collision
        } else {
            Termination::ReachedTarget
        };
        points.push(DemoPoint { x, u: zero, t: 0 });
        return Ok(Rollout { points, termination });
    }
    for t in 0..scenario.max_steps {
        let u = controller.control(model, &x, scenario.dt);
        let step = model.step(&x, &u, scenario.dt)?;
        points.push(DemoPoint {
            x: x.clone(),
            u: step.applied.clone(),
            t: t as u64,
        });
        x = step.state;
        let t_next = (t + 1) as u64;
        if scenario.in_collision(&x) {
            points.push(DemoPoint { x, u: step.applied, t: t_next });
            return Ok(Rollout { points, termination: Termination::Collision });
        }
        if scenario.at_target(&x) {
            points.push(DemoPoint { x, u: zero, t: t_next });
            return Ok(Rollout { points, termination: Termination::ReachedTarget });
        }
    }
    Ok(Rollout { points, termination: Termination::Timeout })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Distance to the obstacle center.
    Center,
    /// Distance to the obstacle surface.
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_safe: usize,
    pub n_semisafe: usize,
    pub n_failed: usize,
    /// How many of the failed demos retrace a successful demo before
    /// veering into the obstacle.
    pub n_prefix_overlap: usize,
    pub seed: u64,
    pub speed: f64,
    /// Closest-approach range (to the obstacle center) for safe detours.
    pub safe_clearance: [f64; 2],
    /// Closest-approach range for semisafe, near-grazing detours.
    pub semisafe_clearance: [f64; 2],
    /// Largest lateral offset of the aim point for failing demos.
    pub failed_offset: f64,
    /// Prefix-overlap failures leave their successful twin once they are
    /// within the twin's closest approach plus this margin of the obstacle.
    pub prefix_switch_margin: f64,
    pub reward_scale: f64,
    pub r_f: f64,
    pub distance_mode: DistanceMode,
    pub dynamics: DynamicsKind,
    pub max_attempts: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_safe: 6,
            n_semisafe: 6,
            n_failed: 6,
            n_prefix_overlap: 1,
            seed: 7,
            speed: 0.5,
            safe_clearance: [0.25, 0.35],
            semisafe_clearance: [0.13, 0.17],
            failed_offset: 0.07,
            prefix_switch_margin: 0.01,
            reward_scale: 5.0,
            r_f: -0.5,
            distance_mode: DistanceMode::Center,
            dynamics: DynamicsKind::Integrator2d,
            max_attempts: 100,
        }
    }
}

impl GenSpec {
    /// Credit-assignment preset: every failure replays a successful demo and
    /// veers into the obstacle near that demo's closest approach.
    pub fn prefix_overlap() -> Self {
        Self {
            n_safe: 4,
            n_semisafe: 6,
            n_failed: 6,
            n_prefix_overlap: 6,
            ..Self::default()
        }
    }

    /// Looks up a named preset: `default` or `prefix_overlap`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "prefix_overlap" => Ok(Self::prefix_overlap()),
            other => Err(Error::InvalidArgument(format!("unknown scenario preset '{other}'"))),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.speed > 0.0) {
            return bad("speed must be positive");
        }
        if !(self.r_f < 0.0) {
            return bad("failure reward must be negative");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward scale must be positive");
        }
        if self.n_prefix_overlap > self.n_failed {
            return bad("n_prefix_overlap exceeds n_failed");
        }
        if self.n_prefix_overlap > 0 && self.n_safe + self.n_semisafe == 0 {
            return bad("prefix-overlap failures need at least one successful demo");
        }
        if !(self.safe_clearance[0] <= self.safe_clearance[1])
            || !(self.semisafe_clearance[0] <= self.semisafe_clearance[1])
        {
            return bad("clearance ranges must be ordered");
        }
        Ok(())
    }
}

/// Safety reward of a finished trajectory.
pub fn label_reward(points: &[DemoPoint], termination: Termination, scenario: &Scenario, spec: &GenSpec) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot label an empty trajectory".into()));
    }
    if termination != Termination::ReachedTarget {
        return Ok(spec.r_f);
    }
    let obstacle = scenario.obstacle();
    let min_d = points
        .iter()
        .map(|p| obstacle.distance_to_center(&p.x))
        .fold(f64::INFINITY, f64::min);
    let d = match spec.distance_mode {
        DistanceMode::Center => min_d,
        DistanceMode::Boundary => (min_d - obstacle.radius).max(0.0),
    };
    Ok(d * spec.reward_scale)
}

fn min_center_distance(points: &[DemoPoint], scenario: &Scenario) -> f64 {
    let o = scenario.obstacle();
    points.iter().map(|p| o.distance_to_center(&p.x)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Safe,
    Semisafe,
}

impl Class {
    fn name(&self) -> &'static str {
        match self {
            Class::Safe => "safe",
            Class::Semisafe => "semisafe",
        }
    }
}

/// Recipe for one successful demo, kept so prefix-overlap failures can
/// replay it.
#[derive(Debug, Clone)]
struct Recipe {
    start: Vec<f64>,
    waypoints: Vec<[f64; 2]>,
    closest: f64,
}

struct Generator<'a> {
    scenario: &'a Scenario,
    spec: &'a GenSpec,
    model: DynamicsModel,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn sample_start(&mut self) -> Vec<f64> {
        let r = &self.scenario.start_region;
        let mut s: Vec<f64> = (0..2)
            .map(|i| {
                if r.max[i] > r.min[i] {
                    self.rng.gen_range(r.min[i]..=r.max[i])
                } else {
                    r.min[i]
                }
            })
            .collect();
        if self.model.kind == DynamicsKind::Unicycle {
            let t = self.scenario.target;
            s.push((t[1] - s[1]).atan2(t[0] - s[0]));
        }
        s
    }

    /// A detour waypoint beside the obstacle, `clearance` from its center,
    /// on the side given by `side` (±1) of the start→target line.
    fn detour(&self, start: &[f64], clearance: f64, side: f64) -> [f64; 2] {
        let c = self.scenario.obstacle_center;
        let t = self.scenario.target;
        let (dx, dy) = (t[0] - start[0], t[1] - start[1]);
        let n = (dx * dx + dy * dy).sqrt().max(1e-12);
        let normal = [-dy / n * side, dx / n * side];
        [c[0] + clearance * normal[0], c[1] + clearance * normal[1]]
    }

    fn run(&self, start: &[f64], ctrl: &mut WaypointController) -> Result<Rollout> {
        rollout(self.scenario, &self.model, ctrl, start)
    }

    fn successful(&mut self, class: Class) -> Result<(Rollout, Recipe)> {
        let range = match class {
            Class::Safe => self.spec.safe_clearance,
            _ => self.spec.semisafe_clearance,
        };
        for _ in 0..self.spec.max_attempts {
            let start = self.sample_start();
            let want = self.rng.gen_range(range[0]..=range[1]);
            let side = if self.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // the path cuts inside the waypoint; widen it until the closest
            // approach matches the wanted clearance
            let mut clearance = want;
            for _ in 0..20 {
                let wp = vec![self.detour(&start, clearance, side), self.scenario.target];
                let mut ctrl = WaypointController::new(wp.clone(), self.spec.speed);
                let r = self.run(&start, &mut ctrl)?;
                if r.termination != Termination::ReachedTarget {
                    break;
                }
                let d = min_center_distance(&r.points, self.scenario);
                if d >= range[0] && d <= range[1] && !r.points.iter().any(|p| self.scenario.in_collision(&p.x)) {
                    return Ok((r, Recipe { start, waypoints: wp, closest: d }));
                }
                clearance += want - d;
                if !(0.0..2.0).contains(&clearance) {
                    break;
                }
            }
        }
        Err(Error::Generation {
            class: class.name(),
            attempts: self.spec.max_attempts,
        })
    }

    fn failed(&mut self, twin: Option<&Recipe>) -> Result<Rollout> {
        let c = self.scenario.obstacle_center;
        for _ in 0..self.spec.max_attempts {
            let mut ctrl;
            let start;
            if let Some(rec) = twin {
                start = rec.start.clone();
                let off = self.rng.gen_range(-0.3..=0.3) * self.scenario.obstacle_radius;
                let aim = [c[0] + off, c[1] - off];
                ctrl = WaypointController::new(rec.waypoints.clone(), self.spec.speed).with_divert(Divert {
                    aim,
                    switch_distance: rec.closest + self.spec.prefix_switch_margin,
                });
            } else {
                start = self.sample_start();
                let off = self.rng.gen_range(-self.spec.failed_offset..=self.spec.failed_offset);
                let aim = self.detour(&start, off.abs(), off.signum());
                ctrl = WaypointController::new(vec![aim, self.scenario.target], self.spec.speed);
            }
            let r = self.run(&start, &mut ctrl)?;
            if r.termination == Termination::Collision {
                return Ok(r);
            }
        }
        Err(Error::Generation {
            class: "failed",
            attempts: self.spec.max_attempts,
        })
    }
}

fn to_demo(id: String, reward: f64, r: Rollout) -> Demonstration {
    Demonstration {
        id,
        reward,
        source: DemoSource::Synthetic,
        outcome: Some(if reward < 0.0 { Outcome::Failure } else { Outcome::Success }),
        points: r.points,
    }
}

/// Generates a labeled corpus. A pure function of its arguments.
pub fn generate(scenario: &Scenario, spec: &GenSpec) -> Result<DemoCorpus> {
    scenario.check()?;
    spec.check()?;
    let mut g = Generator {
        scenario,
        spec,
        model: DynamicsModel::new(spec.dynamics),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut demos = Vec::new();
    let mut recipes = Vec::new();
    for (class, count) in [(Class::Safe, spec.n_safe), (Class::Semisafe, spec.n_semisafe)] {
        for i in 0..count {
            let (r, rec) = g.successful(class)?;
            let reward = label_reward(&r.points, r.termination, scenario, spec)?;
            demos.push(to_demo(format!("{}-{i:02}", class.name()), reward, r));
            recipes.push(rec);
        }
    }
    for i in 0..spec.n_failed {
        let (id, r) = if i < spec.n_prefix_overlap {
            // cycle through the successful demos, closest-grazing ones first
            let rec = recipes[recipes.len() - 1 - (i % recipes.len())].clone();
            (format!("overlap-{i:02}"), g.failed(Some(&rec))?)
        } else {
            (format!("failed-{:02}", i - spec.n_prefix_overlap), g.failed(None)?)
        };
        let reward = label_reward(&r.points, r.termination, scenario, spec)?;
        demos.push(to_demo(id, reward, r));
    }
    Ok(DemoCorpus::new(spec.dynamics, demos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[[f64; 2]]) -> Vec<DemoPoint> {
        xs.iter()
            .enumerate()
            .map(|(i, p)| DemoPoint {
                x: p.to_vec(),
                u: vec![0.0, 0.0],
                t: i as u64,
            })
            .collect()
    }

    #[test]
    fn straight_line_stops_at_first_collision() {
        let sc = Scenario {
            target: [0.9, 0.4],
            ..Scenario::default()
        };
        let m = DynamicsModel::integrator2d();
        let mut ctrl = WaypointController::new(vec![[0.9, 0.4]], 0.5);
        let r = rollout(&sc, &m, &mut ctrl, &[0.1, 0.4]).unwrap();
        assert_eq!(r.termination, Termination::Collision);
        let o = sc.obstacle();
        let last = r.points.last().unwrap();
        assert!(o.distance_to_center(&last.x) <= 0.1);
        assert!(r.points[..r.points.len() - 1].iter().all(|p| !o.contains(&p.x)));
        // each step moves 0.01 along x, so the first state inside is x = 0.4
        assert!((last.x[0] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn start_at_target_is_a_single_point() {
        let sc = Scenario::default();
        let m = DynamicsModel::integrator2d();
        let mut ctrl = WaypointController::new(vec![sc.target], 0.5);
        let r = rollout(&sc, &m, &mut ctrl, &sc.target).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.termination, Termination::ReachedTarget);
    }

    #[test]
    fn wide_detour_reaches_target() {
        let sc = Scenario {
            target: [0.9, 0.4],
            ..Scenario::default()
        };
        let m = DynamicsModel::integrator2d();
        let mut ctrl = WaypointController::new(vec![[0.5, 0.7], [0.9, 0.4]], 0.5);
        let r = rollout(&sc, &m, &mut ctrl, &[0.1, 0.4]).unwrap();
        assert_eq!(r.termination, Termination::ReachedTarget);
        assert!(r.points.iter().all(|p| !sc.in_collision(&p.x)));
    }

    #[test]
    fn reward_labels() {
        let sc = Scenario::default();
        let spec = GenSpec::default();
        let p = pts(&[[0.2, 0.4], [0.5, 0.7], [0.9, 0.6]]);
        assert_eq!(label_reward(&p, Termination::Collision, &sc, &spec).unwrap(), -0.5);
        assert_eq!(label_reward(&p, Termination::Timeout, &sc, &spec).unwrap(), -0.5);
        assert!((label_reward(&p, Termination::ReachedTarget, &sc, &spec).unwrap() - 1.5).abs() < 1e-12);
        let graze = pts(&[[0.5, 0.52]]);
        assert!((label_reward(&graze, Termination::ReachedTarget, &sc, &spec).unwrap() - 0.6).abs() < 1e-12);
        let boundary = GenSpec {
            distance_mode: DistanceMode::Boundary,
            ..GenSpec::default()
        };
        assert!((label_reward(&p, Termination::ReachedTarget, &sc, &boundary).unwrap() - 1.0).abs() < 1e-12);
        assert!(label_reward(&[], Termination::Collision, &sc, &spec).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec {
            n_safe: 5,
            n_semisafe: 3,
            n_failed: 4,
            seed: 7,
            ..GenSpec::default()
        };
        let a = generate(&Scenario::default(), &spec).unwrap();
        let b = generate(&Scenario::default(), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.demos.len(), 12);
        let c = generate(&Scenario::default(), &GenSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_classes_have_expected_geometry() {
        let sc = Scenario::default();
        let spec = GenSpec::default();
        let corpus = generate(&sc, &spec).unwrap();
        let o = sc.obstacle();
        let band = sc.obstacle_radius + sc.dt * spec.speed;
        let (mut safe_min, mut semi_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for d in &corpus.demos {
            if d.is_failure() {
                assert_eq!(d.reward, spec.r_f);
                let last = d.points.last().unwrap();
                assert!(o.distance_to_center(&last.x) <= band);
                assert!(d.points[..d.points.len() - 1].iter().all(|p| !o.contains(&p.x)));
            } else {
                assert!(d.points.iter().all(|p| !sc.in_collision(&p.x)));
                assert!(sc.at_target(&d.points.last().unwrap().x));
                if d.id.starts_with("safe") {
                    safe_min = safe_min.min(d.reward);
                } else {
                    semi_max = semi_max.max(d.reward);
                }
            }
        }
        assert!(safe_min > semi_max);
        assert!(corpus.demos.iter().any(|d| d.id.starts_with("overlap")));
        assert!(corpus.validate().is_empty());
    }

    #[test]
    fn overlap_failures_retrace_a_successful_demo() {
        let corpus = generate(&Scenario::default(), &GenSpec::prefix_overlap()).unwrap();
        let overlap: Vec<_> = corpus.demos.iter().filter(|d| d.id.starts_with("overlap")).collect();
        assert_eq!(overlap.len(), 6);
        for f in overlap {
            let twin = corpus
                .demos
                .iter()
                .filter(|d| !d.is_failure())
                .find(|d| d.points[0].x == f.points[0].x)
                .expect("failure shares its start with a successful demo");
            let half = f.points.len() / 2;
            for (a, b) in f.points[..half].iter().zip(&twin.points) {
                assert!((a.x[0] - b.x[0]).abs() < 1e-12 && (a.x[1] - b.x[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unicycle_corpus() {
        let spec = GenSpec {
            dynamics: DynamicsKind::Unicycle,
            n_safe: 2,
            n_semisafe: 2,
            n_failed: 2,
            ..GenSpec::default()
        };
        let corpus = generate(&Scenario::default(), &spec).unwrap();
        assert_eq!(corpus.dynamics, DynamicsKind::Unicycle);
        assert!(corpus.demos.iter().all(|d| d.points.iter().all(|p| p.x.len() == 3)));
    }

    #[test]
    fn invalid_inputs() {
        let bad_scenario = Scenario {
            obstacle_radius: 0.0,
            ..Scenario::default()
        };
        assert!(generate(&bad_scenario, &GenSpec::default()).is_err());
        let bad_spec = GenSpec {
            n_prefix_overlap: 10,
            n_failed: 2,
            ..GenSpec::default()
        };
        assert!(generate(&Scenario::default(), &bad_spec).is_err());
        assert!(GenSpec::preset("nope").is_err());
    }

    #[test]
    fn impossible_class_is_named() {
        let spec = GenSpec {
            semisafe_clearance: [0.0, 0.01],
            max_attempts: 3,
            ..GenSpec::default()
        };
        match generate(&Scenario::default(), &spec) {
            Err(Error::Generation { class, .. }) => assert_eq!(class, "semisafe"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
