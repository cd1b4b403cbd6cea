//! A planar push world: square sprites, an optional square agent, and
//! optional random drift.
//!
//! Positions are square centers in pixel units. Pixel `i` spans `[i, i + 1)`,
//! and a square of side `s` at `x` covers the pixels whose centers fall in
//! `[x - s/2, x + s/2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const ACTION_BOUND: f64 = 2.0;
pub const AGENT_LEVEL: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// 1 renders grayscale, 3 replicates the gray level across RGB.
    pub channels: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    pub agent_size: usize,
    /// An agent is present and actions move it.
    pub action_conditioned: bool,
    /// Sprites drift with random velocities.
    pub stochastic: bool,
    pub drift_resample_prob: f64,
    pub max_drift_speed: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 32,
            width: 32,
            channels: 1,
            sprites: 2,
            sprite_size: 6,
            agent_size: 4,
            action_conditioned: true,
            stochastic: true,
            drift_resample_prob: 0.1,
            max_drift_speed: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn action_dim(&self) -> usize {
        if self.action_conditioned {
            2
        } else {
            0
        }
    }

    /// Gray level of sprite `i`: evenly spaced in `[0.35, 0.75]`.
    pub fn sprite_level(&self, i: usize) -> f32 {
        if self.sprites <= 1 {
            0.5
        } else {
            0.35 + 0.4 * i as f32 / (self.sprites - 1) as f32
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub x: f64,
    pub y: f64,
    pub size: usize,
    pub level: f32,
    pub vx: f64,
    pub vy: f64,
}

impl Sprite {
    fn clip(&mut self, cfg: &WorldConfig) -> (bool, bool) {
        let half = self.size as f64 / 2.0;
        let (cx, cy) = (
            self.x.clamp(half, cfg.width as f64 - half),
            self.y.clamp(half, cfg.height as f64 - half),
        );
        let hit = (cx != self.x, cy != self.y);
        self.x = cx;
        self.y = cy;
        hit
    }
}

/// What happened during one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepEvents {
    /// Per sprite: it overlapped the agent and was pushed.
    pub pushed: Vec<bool>,
    /// Per sprite: its drift velocity was resampled.
    pub resampled: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub agent: Option<(f64, f64)>,
    pub sprites: Vec<Sprite>,
    rng: ChaCha8Rng,
}

/// Whether two axis-aligned squares share positive area.
pub fn squares_overlap(a: (f64, f64), sa: usize, b: (f64, f64), sb: usize) -> bool {
    let reach = (sa + sb) as f64 / 2.0;
    (a.0 - b.0).abs() < reach && (a.1 - b.1).abs() < reach
}

impl World {
    /// A world with explicit contents; `seed` drives drift.
    pub fn new(config: WorldConfig, agent: Option<(f64, f64)>, sprites: Vec<Sprite>, seed: u64) -> Self {
        World {
            config,
            agent,
            sprites,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Random initial state.
    pub fn random(config: WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = config.sprite_size as f64 / 2.0;
        let sprites = (0..config.sprites)
            .map(|i| {
                let (vx, vy) = if config.stochastic {
                    random_velocity(&mut rng, config.max_drift_speed)
                } else {
                    (0.0, 0.0)
                };
                Sprite {
                    x: rng.random_range(half..=config.width as f64 - half),
                    y: rng.random_range(half..=config.height as f64 - half),
                    size: config.sprite_size,
                    level: config.sprite_level(i),
                    vx,
                    vy,
                }
            })
            .collect();
        let agent = config.action_conditioned.then(|| {
            (
                rng.random_range(0.0..=(config.width - 1) as f64),
                rng.random_range(0.0..=(config.height - 1) as f64),
            )
        });
        World {
            config,
            agent,
            sprites,
            rng,
        }
    }

    pub fn step(&self, action: [f64; 2]) -> World {
        self.step_with_events(action).0
    }

    pub fn step_with_events(&self, action: [f64; 2]) -> (World, StepEvents) {
        let cfg = self.config;
        let mut next = self.clone();
        let mut events = StepEvents {
            pushed: vec![false; self.sprites.len()],
            resampled: vec![false; self.sprites.len()],
        };
        if let Some((ax, ay)) = self.agent {
            let dx = action[0].clamp(-ACTION_BOUND, ACTION_BOUND);
            let dy = action[1].clamp(-ACTION_BOUND, ACTION_BOUND);
            let agent = (
                (ax + dx).clamp(0.0, (cfg.width - 1) as f64),
                (ay + dy).clamp(0.0, (cfg.height - 1) as f64),
            );
            next.agent = Some(agent);
            for (s, pushed) in next.sprites.iter_mut().zip(&mut events.pushed) {
                if squares_overlap(agent, cfg.agent_size, (s.x, s.y), s.size) {
                    s.x += dx;
                    s.y += dy;
                    s.clip(&cfg);
                    *pushed = true;
                }
            }
        }
        if cfg.stochastic {
            for (s, resampled) in next.sprites.iter_mut().zip(&mut events.resampled) {
                if next.rng.random_bool(cfg.drift_resample_prob) {
                    (s.vx, s.vy) = random_velocity(&mut next.rng, cfg.max_drift_speed);
                    *resampled = true;
                }
                s.x += s.vx;
                s.y += s.vy;
                let (hit_x, hit_y) = s.clip(&cfg);
                if hit_x {
                    s.vx = -s.vx;
                }
                if hit_y {
                    s.vy = -s.vy;
                }
            }
        }
        (next, events)
    }

    /// Background 0, sprites in order, the agent last at full intensity.
    pub fn render(&self) -> Tensor<f32> {
        let cfg = &self.config;
        let mut gray = vec![0f32; cfg.height * cfg.width];
        let mut paint = |x: f64, y: f64, size: usize, level: f32| {
            let half = size as f64 / 2.0;
            let (r0, r1) = covered(y - half, y + half, cfg.height);
            let (c0, c1) = covered(x - half, x + half, cfg.width);
            for r in r0..r1 {
                for c in c0..c1 {
                    gray[r * cfg.width + c] = level;
                }
            }
        };
        for s in &self.sprites {
            paint(s.x, s.y, s.size, s.level);
        }
        if let Some((ax, ay)) = self.agent {
            paint(ax, ay, cfg.agent_size, AGENT_LEVEL);
        }
        let c = cfg.channels;
        let data = gray.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
        Tensor::new(vec![cfg.height, cfg.width, c], data).expect("render shape")
    }
}

fn random_velocity(rng: &mut ChaCha8Rng, max: f64) -> (f64, f64) {
    (rng.random_range(-max..=max), rng.random_range(-max..=max))
}

/// Pixel index range whose centers `i + 0.5` fall in `[lo, hi)`, clipped to `[0, n)`.
pub fn covered(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let first = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().clamp(0.0, n as f64);
    let first = (first as usize).min(n);
    (first, (end as usize).max(first))
}

/// Uniform actions in the action box.
pub fn random_action(rng: &mut impl Rng) -> [f64; 2] {
    [
        rng.random_range(-ACTION_BOUND..=ACTION_BOUND),
        rng.random_range(-ACTION_BOUND..=ACTION_BOUND),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> WorldConfig {
        WorldConfig {
            stochastic: false,
            ..WorldConfig::default()
        }
    }

    fn sprite(x: f64, y: f64, size: usize, level: f32) -> Sprite {
        Sprite {
            x,
            y,
            size,
            level,
            vx: 0.0,
            vy: 0.0,
        }
    }

    #[test]
    fn free_space_move() {
        let w = World::new(quiet(), Some((10.0, 10.0)), vec![sprite(25.0, 25.0, 6, 0.5)], 0);
        let n = w.step([2.0, 0.0]);
        assert_eq!(n.agent, Some((12.0, 10.0)));
        assert_eq!(n.sprites, w.sprites);
    }

    #[test]
    fn agent_is_clipped_at_the_wall() {
        let w = World::new(quiet(), Some((31.0, 5.0)), vec![], 0);
        assert_eq!(w.step([2.0, 0.0]).agent, Some((31.0, 5.0)));
        // Out-of-range actions are clipped to the box first.
        let w = World::new(quiet(), Some((10.0, 10.0)), vec![], 0);
        assert_eq!(w.step([5.0, -7.0]).agent, Some((12.0, 8.0)));
    }

    #[test]
    fn overlapping_sprite_is_pushed() {
        let w = World::new(quiet(), Some((10.0, 10.0)), vec![sprite(14.0, 10.0, 6, 0.5)], 0);
        let (n, ev) = w.step_with_events([1.5, 0.0]);
        assert_eq!(ev.pushed, vec![true]);
        assert_eq!((n.sprites[0].x, n.sprites[0].y), (15.5, 10.0));
        // Pushing into the wall clips the sprite so it stays inside.
        let w = World::new(quiet(), Some((27.0, 10.0)), vec![sprite(29.0, 10.0, 6, 0.5)], 0);
        assert_eq!(w.step([2.0, 0.0]).sprites[0].x, 29.0);
    }

    #[test]
    fn empty_world_renders_black() {
        let cfg = WorldConfig {
            sprites: 0,
            action_conditioned: false,
            ..quiet()
        };
        let w = World::random(cfg, 3);
        assert!(w.render().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sprite_covers_its_area() {
        let w = World::new(quiet(), None, vec![sprite(4.0, 4.0, 4, 0.5)], 0);
        let img = w.render();
        assert_eq!(img.data().iter().filter(|&&v| v == 0.5).count(), 16);
        assert_eq!(img.data().iter().filter(|&&v| v != 0.0).count(), 16);
        // Rows and columns 2..6.
        assert_eq!(img.data()[2 * 32 + 2], 0.5);
        assert_eq!(img.data()[5 * 32 + 5], 0.5);
        assert_eq!(img.data()[6 * 32 + 5], 0.0);
    }

    #[test]
    fn agent_occludes_sprites() {
        let w = World::new(quiet(), Some((4.0, 4.0)), vec![sprite(4.0, 4.0, 6, 0.5)], 0);
        let img = w.render();
        assert_eq!(img.data()[4 * 32 + 4], AGENT_LEVEL);
        assert_eq!(img.data().iter().filter(|&&v| v == AGENT_LEVEL).count(), 16);
        assert_eq!(img.data().iter().filter(|&&v| v == 0.5).count(), 20);
    }

    #[test]
    fn drift_resample_frequency() {
        let cfg = WorldConfig {
            sprites: 1,
            action_conditioned: false,
            ..WorldConfig::default()
        };
        let mut w = World::random(cfg, 11);
        let n = 100_000;
        let mut count = 0;
        for _ in 0..n {
            let (next, ev) = w.step_with_events([0.0, 0.0]);
            count += ev.resampled[0] as usize;
            w = next;
        }
        let freq = count as f64 / n as f64;
        assert!((freq - 0.1).abs() < 0.005, "{freq}");
    }

    #[test]
    fn quiet_world_is_a_function_of_actions() {
        let a = World::random(quiet(), 5);
        let b = World::random(quiet(), 5);
        let (mut a, mut b) = (a, b);
        for i in 0..20 {
            let act = [(i as f64 * 0.7).sin() * 2.0, (i as f64 * 1.3).cos() * 2.0];
            a = a.step(act);
            b = b.step(act);
        }
        assert_eq!(a.render(), b.render());
        assert_eq!(a.sprites, b.sprites);
    }

    #[test]
    fn rgb_replicates_gray() {
        let cfg = WorldConfig {
            channels: 3,
            ..quiet()
        };
        let img = World::new(cfg, None, vec![sprite(4.0, 4.0, 4, 0.5)], 0).render();
        assert_eq!(img.shape(), &[32, 32, 3]);
        assert_eq!(&img.data()[(2 * 32 + 2) * 3..(2 * 32 + 3) * 3], &[0.5, 0.5, 0.5]);
    }
}
