//! Damped 2-D point mass in a U-shaped maze with a dense goal-distance reward.

use serde::{Deserialize, Serialize};

use super::{Environment, EpisodeEnd, SimRng, StepOutcome};
use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, ModalityDims};

/// Axis-aligned wall block `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Wall {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub width: f64,
    pub height: f64,
    pub walls: Vec<Wall>,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub damping: f64,
    pub dt: f64,
    pub horizon: usize,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self {
            width: 5.0,
            height: 5.0,
            walls: vec![Wall {
                x0: 0.0,
                y0: 2.25,
                x1: 3.5,
                y1: 2.75,
            }],
            start: [1.0, 1.0],
            goal: [1.0, 4.0],
            damping: 0.9,
            dt: 0.1,
            horizon: 300,
        }
    }
}

impl MazeSpec {
    pub fn blocked(&self, p: [f64; 2]) -> bool {
        p[0] < 0.0
            || p[1] < 0.0
            || p[0] > self.width
            || p[1] > self.height
            || self.walls.iter().any(|w| w.contains(p))
    }
}

/// Dense reward `exp(-||achieved - desired||_2)`.
pub fn maze_reward(achieved: [f64; 2], desired: [f64; 2]) -> f64 {
    let dx = achieved[0] - desired[0];
    let dy = achieved[1] - desired[1];
    (-(dx * dx + dy * dy).sqrt()).exp()
}

#[derive(Debug, Clone)]
pub struct MazeEnv {
    spec: MazeSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> Self {
        let pos = spec.start;
        Self {
            spec,
            pos,
            vel: [0.0; 2],
            t: 0,
        }
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Environment for MazeEnv {
    fn env_id(&self) -> String {
        "maze".into()
    }

    fn dims(&self) -> ModalityDims {
        ModalityDims {
            state_dim: 4,
            action_dim: 2,
            action_kind: ActionKind::Continuous,
        }
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.pos = self.spec.start;
        self.vel = [0.0; 2];
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64], _rng: &mut SimRng) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::usage("maze episode already finished"));
        }
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::usage(format!("maze expects a finite 2-D force, got {action:?}")));
        }
        let s = &self.spec;
        let mut vel = [0.0; 2];
        let mut next = [0.0; 2];
        for i in 0..2 {
            vel[i] = s.damping * self.vel[i] + s.dt * action[i].clamp(-1.0, 1.0);
            next[i] = self.pos[i] + s.dt * vel[i];
        }
        if s.blocked(next) {
            self.vel = [0.0; 2];
        } else {
            self.pos = next;
            self.vel = vel;
        }
        self.t += 1;
        let done = self.is_done();
        Ok(StepOutcome {
            observation: self.observe(),
            reward: maze_reward(self.pos, self.spec.goal),
            done,
            end: done.then_some(EpisodeEnd::Horizon),
        })
    }

    fn is_done(&self) -> bool {
        self.t >= self.spec.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn reward_at_goal_and_at_ln2() {
        assert_eq!(maze_reward([1.0, 4.0], [1.0, 4.0]), 1.0);
        let d = std::f64::consts::LN_2;
        assert!((maze_reward([1.0 + d, 4.0], [1.0, 4.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reward_decreases_with_distance() {
        let g = [0.0, 0.0];
        let mut last = maze_reward(g, g);
        for i in 1..100 {
            let r = maze_reward([i as f64 * 0.05, 0.0], g);
            assert!(r < last && r > 0.0);
            last = r;
        }
    }

    #[test]
    fn wall_blocks_motion() {
        let spec = MazeSpec::default();
        let mut env = MazeEnv::new(spec);
        let mut rng = SimRng::seed_from_u64(0);
        env.reset(&mut rng);
        for _ in 0..300 {
            let out = env.step(&[0.0, 1.0], &mut rng).unwrap();
            assert!(out.reward > 0.0 && out.reward <= 1.0);
        }
        // pushing straight up from the start never crosses the internal wall
        assert!(env.position()[1] < 2.25);
        assert!(env.is_done());
    }
}
