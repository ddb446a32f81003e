//! Single-integrator motion planning in `[0,1]²` past a divider with a wide
//! and a narrow slit.
//!
//! Obstacles and the goal are absorbing: the state freezes where the motion
//! segment first enters them. Entering an obstacle costs `∞`; entering the goal
//! ends the path, whose cost is the length travelled up to the entry point.

use nalgebra::{dvector, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::system::{ControlSystem, NoiseSource};

/// Axis-aligned closed rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x_min <= other.x_max && other.x_min <= self.x_max && self.y_min <= other.y_max && other.y_min <= self.y_max
    }

    /// Smallest `s ∈ [0,1]` with `p + s(q − p)` in the rectangle (slab method).
    pub fn first_hit(&self, p: &DVector<f64>, q: &DVector<f64>) -> Option<f64> {
        let mut lo: f64 = 0.0;
        let mut hi: f64 = 1.0;
        for (axis, (min, max)) in [(0, (self.x_min, self.x_max)), (1, (self.y_min, self.y_max))] {
            let d = q[axis] - p[axis];
            if d == 0.0 {
                if p[axis] < min || p[axis] > max {
                    return None;
                }
            } else {
                let a = (min - p[axis]) / d;
                let b = (max - p[axis]) / d;
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
                if lo > hi {
                    return None;
                }
            }
        }
        Some(lo)
    }
}

/// Which opening a path crossed the divider through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Passage {
    Wide,
    Narrow,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlitGeometry {
    pub divider_x: f64,
    pub divider_half_thickness: f64,
    pub wide_center: f64,
    pub wide_half_width: f64,
    pub narrow_center: f64,
    pub narrow_half_width: f64,
    pub start: [f64; 2],
    pub goal: Rect,
    pub horizon: usize,
    /// Per-step bound on `‖u‖₂`; longer inputs are scaled down.
    pub max_step: f64,
    /// Thickness of the walls surrounding `[0,1]²`.
    pub wall_thickness: f64,
}

impl Default for SlitGeometry {
    fn default() -> Self {
        Self {
            divider_x: 0.5,
            divider_half_thickness: 0.01,
            wide_center: 0.7,
            wide_half_width: 0.08,
            narrow_center: 0.35,
            narrow_half_width: 0.02,
            start: [0.1, 0.5],
            goal: Rect::new(0.85, 0.95, 0.1, 0.2),
            horizon: 40,
            max_step: 0.05,
            wall_thickness: 1.0,
        }
    }
}

impl SlitGeometry {
    pub fn validate(&self) -> Result<(), String> {
        let slits = [
            (self.narrow_center, self.narrow_half_width, "narrow"),
            (self.wide_center, self.wide_half_width, "wide"),
        ];
        for (c, h, name) in slits {
            if h <= 0.0 || c - h < 0.0 || c + h > 1.0 {
                return Err(format!("{name} slit does not fit in [0,1]"));
            }
        }
        let (a, b) = (&slits[0], &slits[1]);
        if (a.0 - b.0).abs() < a.1 + b.1 {
            return Err("slits overlap".into());
        }
        if self.max_step <= 0.0 || self.horizon == 0 {
            return Err("max_step and horizon must be positive".into());
        }
        let world = self.obstacles();
        if world.iter().any(|o| o.intersects(&self.goal)) {
            return Err("goal intersects an obstacle".into());
        }
        let s = dvector![self.start[0], self.start[1]];
        if world.iter().any(|o| o.contains(&s)) || self.goal.contains(&s) {
            return Err("start lies in an absorbing set".into());
        }
        Ok(())
    }

    /// Boundary walls and the three divider pieces.
    pub fn obstacles(&self) -> Vec<Rect> {
        let w = self.wall_thickness;
        let mut out = vec![
            Rect::new(-w, 0.0, -w, 1.0 + w),
            Rect::new(1.0, 1.0 + w, -w, 1.0 + w),
            Rect::new(-w, 1.0 + w, -w, 0.0),
            Rect::new(-w, 1.0 + w, 1.0, 1.0 + w),
        ];
        let mut gaps = [
            (self.narrow_center - self.narrow_half_width, self.narrow_center + self.narrow_half_width),
            (self.wide_center - self.wide_half_width, self.wide_center + self.wide_half_width),
        ];
        gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (x0, x1) = (self.divider_x - self.divider_half_thickness, self.divider_x + self.divider_half_thickness);
        let mut lo = 0.0;
        for (a, b) in gaps {
            out.push(Rect::new(x0, x1, lo, a));
            lo = b;
        }
        out.push(Rect::new(x0, x1, lo, 1.0));
        out
    }
}

/// What happens along one motion segment.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: DVector<f64>,
    pub cost: f64,
    pub collided: bool,
    pub reached_goal: bool,
}

#[derive(Debug, Clone)]
pub struct DoubleSlitWorld {
    pub geometry: SlitGeometry,
    obstacles: Vec<Rect>,
}

impl DoubleSlitWorld {
    pub fn new(geometry: SlitGeometry) -> Result<Self, String> {
        geometry.validate()?;
        let obstacles = geometry.obstacles();
        Ok(Self { geometry, obstacles })
    }

    pub fn obstacles(&self) -> &[Rect] {
        &self.obstacles
    }

    pub fn in_goal(&self, x: &DVector<f64>) -> bool {
        self.geometry.goal.contains(x)
    }

    pub fn in_obstacle(&self, x: &DVector<f64>) -> bool {
        self.obstacles.iter().any(|o| o.contains(x))
    }

    pub fn is_absorbed(&self, x: &DVector<f64>) -> bool {
        self.in_goal(x) || self.in_obstacle(x)
    }

    pub fn clip_input(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = u.norm();
        if n > self.geometry.max_step {
            u * (self.geometry.max_step / n)
        } else {
            u.clone()
        }
    }

    /// Advances one step with segment-level collision and goal detection.
    pub fn advance(&self, x: &DVector<f64>, u: &DVector<f64>) -> StepOutcome {
        if self.in_goal(x) {
            return StepOutcome { next: x.clone(), cost: 0.0, collided: false, reached_goal: true };
        }
        if self.in_obstacle(x) {
            return StepOutcome { next: x.clone(), cost: f64::INFINITY, collided: true, reached_goal: false };
        }
        let d = self.clip_input(u);
        if d.iter().any(|v| !v.is_finite()) {
            return StepOutcome { next: x.clone(), cost: f64::INFINITY, collided: true, reached_goal: false };
        }
        let q = x + &d;
        let hit = self.obstacles.iter().filter_map(|o| o.first_hit(x, &q)).fold(f64::INFINITY, f64::min);
        let goal = self.geometry.goal.first_hit(x, &q).unwrap_or(f64::INFINITY);
        if hit <= 1.0 && hit <= goal {
            StepOutcome { next: x + &d * hit, cost: f64::INFINITY, collided: true, reached_goal: false }
        } else if goal <= 1.0 {
            let mut next = x + &d * goal;
            // land inside the closed rectangle despite rounding
            next[0] = next[0].clamp(self.geometry.goal.x_min, self.geometry.goal.x_max);
            next[1] = next[1].clamp(self.geometry.goal.y_min, self.geometry.goal.y_max);
            StepOutcome { next, cost: goal * d.norm(), collided: false, reached_goal: true }
        } else {
            let cost = d.norm();
            StepOutcome { next: q, cost, collided: false, reached_goal: false }
        }
    }

    /// Deterministic cost of an input sequence from `x`, and the passage used.
    /// Sequences that end outside the goal cost `∞`.
    pub fn sequence_cost(&self, x: &DVector<f64>, inputs: &[DVector<f64>]) -> (f64, Passage) {
        let mut x = x.clone();
        let mut cost = 0.0;
        let mut passage = Passage::None;
        for u in inputs {
            let out = self.advance(&x, u);
            if passage == Passage::None {
                passage = self.crossing(&x, &out.next);
            }
            cost += out.cost;
            x = out.next;
            if out.collided {
                return (f64::INFINITY, passage);
            }
            if out.reached_goal {
                return (cost, passage);
            }
        }
        if self.in_goal(&x) {
            (cost, passage)
        } else {
            (f64::INFINITY, passage)
        }
    }

    /// Passage of a segment through the divider's center line, if any.
    pub fn crossing(&self, a: &DVector<f64>, b: &DVector<f64>) -> Passage {
        let g = &self.geometry;
        let (xa, xb) = (a[0] - g.divider_x, b[0] - g.divider_x);
        if xa == xb || xa * xb > 0.0 {
            return Passage::None;
        }
        let s = xa / (xa - xb);
        let y = a[1] + s * (b[1] - a[1]);
        if (y - g.wide_center).abs() <= g.wide_half_width {
            Passage::Wide
        } else if (y - g.narrow_center).abs() <= g.narrow_half_width {
            Passage::Narrow
        } else {
            Passage::None
        }
    }

    /// First passage along a state path.
    pub fn passage(&self, states: &[DVector<f64>]) -> Passage {
        states
            .windows(2)
            .map(|w| self.crossing(&w[0], &w[1]))
            .find(|p| *p != Passage::None)
            .unwrap_or(Passage::None)
    }

    /// Whether any motion segment of a path meets an obstacle.
    pub fn path_collides(&self, states: &[DVector<f64>]) -> bool {
        states.windows(2).any(|w| self.obstacles.iter().any(|o| o.first_hit(&w[0], &w[1]).is_some()))
    }
}

impl ControlSystem for DoubleSlitWorld {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.geometry.horizon
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, _noise: &mut dyn NoiseSource) -> DVector<f64> {
        self.advance(x, u).next
    }

    fn stage_cost(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        if self.in_obstacle(x) && !self.in_goal(x) {
            // already latched at ∞ on the entering step
            return 0.0;
        }
        self.advance(x, u).cost
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        if self.in_goal(x) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    fn sample_initial(&self, _rng: &mut dyn RngCore) -> DVector<f64> {
        dvector![self.geometry.start[0], self.geometry.start[1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::NullNoise;

    fn world() -> DoubleSlitWorld {
        DoubleSlitWorld::new(SlitGeometry::default()).unwrap()
    }

    #[test]
    fn default_geometry_is_valid() {
        let w = world();
        assert_eq!(w.obstacles().len(), 7);
        assert!(!w.obstacles().iter().any(|o| o.intersects(&w.geometry.goal)));
    }

    #[test]
    fn free_straight_path_costs_its_length() {
        let w = DoubleSlitWorld::new(SlitGeometry { start: [0.6, 0.5], ..SlitGeometry::default() }).unwrap();
        let x0 = dvector![0.6, 0.5];
        // head straight for the goal corner region at (0.9, 0.15)
        let target = dvector![0.9, 0.15];
        let dir = (&target - &x0) / (&target - &x0).norm() * 0.05;
        let inputs = vec![dir; 20];
        let (c, _) = w.sequence_cost(&x0, &inputs);
        // enters the goal's top edge y = 0.2
        let s = (0.5 - 0.2) / (0.5 - 0.15);
        let entry = &x0 + (&target - &x0) * s;
        assert!((c - (&entry - &x0).norm()).abs() < 1e-12);
    }

    #[test]
    fn segment_through_divider_between_slits_collides() {
        let w = world();
        let a = dvector![0.48, 0.5];
        let b = dvector![0.52, 0.5];
        assert!(!w.in_obstacle(&a) && !w.in_obstacle(&b));
        let out = w.advance(&a, &(&b - &a));
        assert!(out.collided);
        assert_eq!(out.cost, f64::INFINITY);
        assert!((out.next[0] - 0.49).abs() < 1e-12);
        // frozen afterwards
        let later = w.step(1, &out.next, &dvector![0.05, 0.0], &mut NullNoise);
        assert_eq!(later, out.next);
    }

    #[test]
    fn passing_through_wide_slit_is_free() {
        let w = world();
        let a = dvector![0.48, 0.7];
        let out = w.advance(&a, &dvector![0.04, 0.0]);
        assert!(!out.collided);
        assert_eq!(w.crossing(&a, &out.next), Passage::Wide);
    }

    #[test]
    fn goal_is_absorbing() {
        let w = world();
        let inside = dvector![0.9, 0.15];
        let out = w.advance(&inside, &dvector![0.05, 0.0]);
        assert_eq!(out.cost, 0.0);
        assert_eq!(out.next, inside);
        assert_eq!(w.stage_cost(3, &inside, &dvector![0.03, 0.0]), 0.0);
        assert_eq!(w.terminal_cost(&inside), 0.0);
        assert_eq!(w.terminal_cost(&dvector![0.2, 0.2]), f64::INFINITY);
    }

    #[test]
    fn inputs_are_clipped() {
        let w = world();
        let out = w.advance(&dvector![0.2, 0.5], &dvector![1.0, 0.0]);
        assert!((out.next[0] - 0.25).abs() < 1e-15);
        assert!((out.cost - 0.05).abs() < 1e-15);
    }

    #[test]
    fn slab_method_first_hit() {
        let r = Rect::new(0.0, 1.0, 0.0, 1.0);
        assert_eq!(r.first_hit(&dvector![-1.0, 0.5], &dvector![3.0, 0.5]), Some(0.25));
        assert_eq!(r.first_hit(&dvector![-1.0, 2.0], &dvector![3.0, 2.0]), None);
        assert_eq!(r.first_hit(&dvector![0.5, 0.5], &dvector![0.6, 0.6]), Some(0.0));
        assert_eq!(r.first_hit(&dvector![2.0, 0.0], &dvector![0.0, 2.0]), Some(0.5));
    }
}
