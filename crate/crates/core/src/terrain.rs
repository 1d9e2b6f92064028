//! Procedural terrain: four terrain families over a fixed-size block, a
//! difficulty ladder, per-terrain command ranges, and the promotion/demotion
//! rules that drive the per-environment curriculum.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Block length in metres.
pub const BLOCK_LENGTH: f64 = 10.0;
/// Heightfield cell size in metres.
pub const RESOLUTION: f64 = 0.05;
/// Stair tread width in metres.
pub const STAIR_WIDTH: f64 = 0.31;
/// Highest curriculum level.
pub const MAX_LEVEL: u8 = 9;

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("difficulty {0} out of range 0..=9")]
    InvalidDifficulty(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Plane,
    UniformNoise,
    DiscreteObstacles,
    Stairs,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 4] = [
        TerrainKind::Plane,
        TerrainKind::UniformNoise,
        TerrainKind::DiscreteObstacles,
        TerrainKind::Stairs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Plane => "plane",
            TerrainKind::UniformNoise => "uniform_noise",
            TerrainKind::DiscreteObstacles => "discrete_obstacles",
            TerrainKind::Stairs => "stairs",
        }
    }
}

impl std::str::FromStr for TerrainKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plane" => Ok(TerrainKind::Plane),
            "uniform_noise" => Ok(TerrainKind::UniformNoise),
            "discrete_obstacles" => Ok(TerrainKind::DiscreteObstacles),
            "stairs" => Ok(TerrainKind::Stairs),
            other => Err(format!("unknown terrain kind '{other}'")),
        }
    }
}

/// A generated heightfield block. Immutable after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub kind: TerrainKind,
    pub difficulty: u8,
    pub block_center_x: f64,
    pub seed: u64,
    /// Piecewise-constant cell heights covering the block.
    heights: Vec<f64>,
}

/// Per-episode outcome summary consumed by [`curriculum_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumRecord {
    /// Did the robot pass the centre of its terrain block this episode?
    pub crossed_center: bool,
    /// Mean per-step tracking reward over the episode divided by the maximum
    /// achievable value; in [0, 1].
    pub tracking_reward_ratio: f64,
    /// Distance travelled along the commanded direction, metres.
    pub distance_traveled: f64,
    /// Command speed times the nominal episode duration, metres.
    pub commanded_distance: f64,
}

impl Terrain {
    /// Generate a terrain block. Deterministic in `(kind, difficulty, seed)`.
    ///
    /// Difficulty scales each family linearly so that level 9 reaches the
    /// evaluation geometry: 14 cm stair rises and ±15 cm obstacles.
    pub fn generate(kind: TerrainKind, difficulty: u8, seed: u64) -> Result<Terrain, TerrainError> {
        Self::generate_at(kind, difficulty, seed, 0.0)
    }

    /// Same as [`Terrain::generate`] with an explicit block centre.
    pub fn generate_at(
        kind: TerrainKind,
        difficulty: u8,
        seed: u64,
        block_center_x: f64,
    ) -> Result<Terrain, TerrainError> {
        if difficulty > MAX_LEVEL {
            return Err(TerrainError::InvalidDifficulty(difficulty));
        }
        let n_cells = (BLOCK_LENGTH / RESOLUTION).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (difficulty + 1) as f64;
        let heights = match kind {
            TerrainKind::Plane => vec![0.0; n_cells],
            TerrainKind::UniformNoise => {
                let amp = 0.025 * d;
                (0..n_cells).map(|_| rng.gen_range(-amp..=amp)).collect()
            }
            TerrainKind::Stairs => {
                // Ascending stairs from the block start; cells take the value
                // of the tread under their centre.
                let rise = 0.014 * d;
                (0..n_cells)
                    .map(|i| {
                        let x_local = (i as f64 + 0.5) * RESOLUTION;
                        rise * (x_local / STAIR_WIDTH).floor()
                    })
                    .collect()
            }
            TerrainKind::DiscreteObstacles => {
                let h = 0.015 * d;
                let mut cells = vec![0.0; n_cells];
                // A dozen boxes or pits of random width scattered over the
                // block; later placements overwrite earlier ones.
                for _ in 0..12 {
                    let width = rng.gen_range(0.4..=1.2);
                    let start = rng.gen_range(0.0..BLOCK_LENGTH - width);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let lo = (start / RESOLUTION) as usize;
                    let hi = ((start + width) / RESOLUTION) as usize;
                    for cell in cells.iter_mut().take(hi.min(n_cells)).skip(lo) {
                        *cell = sign * h;
                    }
                }
                cells
            }
        };
        debug_assert!(heights.iter().all(|h| h.is_finite()));
        Ok(Terrain {
            kind,
            difficulty,
            block_center_x,
            seed,
            heights,
        })
    }

    /// Piecewise-constant height lookup; x outside the block clamps to the
    /// nearest edge cell.
    pub fn height_at(&self, x: f64) -> f64 {
        let x0 = self.block_center_x - BLOCK_LENGTH / 2.0;
        let idx = ((x - x0) / RESOLUTION).floor();
        let idx = (idx.max(0.0) as usize).min(self.heights.len() - 1);
        self.heights[idx]
    }

    pub fn block_start_x(&self) -> f64 {
        self.block_center_x - BLOCK_LENGTH / 2.0
    }

    pub fn block_end_x(&self) -> f64 {
        self.block_center_x + BLOCK_LENGTH / 2.0
    }

    pub fn max_abs_height(&self) -> f64 {
        self.heights.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    /// Export as `x height` pairs, one cell per line, for plotting.
    pub fn export_grid(&self) -> String {
        let x0 = self.block_start_x();
        let mut out = String::with_capacity(self.heights.len() * 16);
        for (i, h) in self.heights.iter().enumerate() {
            let x = x0 + (i as f64 + 0.5) * RESOLUTION;
            out.push_str(&format!("{x} {h}\n"));
        }
        out
    }
}

/// Advance a per-environment curriculum level from an episode outcome.
///
/// Promotion requires crossing the block centre with a tracking ratio above
/// 0.8; demotion triggers when the robot covered less than half the
/// commanded distance. Promotion is checked first and wins if both fire.
pub fn curriculum_update(level: u8, record: &CurriculumRecord) -> u8 {
    debug_assert!((0.0..=1.0).contains(&record.tracking_reward_ratio));
    debug_assert!(record.distance_traveled >= 0.0 && record.commanded_distance >= 0.0);
    if record.crossed_center && record.tracking_reward_ratio > 0.8 {
        (level + 1).min(MAX_LEVEL)
    } else if record.distance_traveled < 0.5 * record.commanded_distance {
        level.saturating_sub(1)
    } else {
        level
    }
}

/// Per-terrain command speed range in m/s.
pub fn command_range(kind: TerrainKind) -> (f64, f64) {
    match kind {
        TerrainKind::Plane | TerrainKind::UniformNoise => (-1.0, 2.5),
        TerrainKind::Stairs | TerrainKind::DiscreteObstacles => (-0.5, 2.0),
    }
}

/// Draw a forward-velocity command for an episode on `kind`.
pub fn sample_command<R: Rng>(kind: TerrainKind, _difficulty: u8, rng: &mut R) -> f64 {
    let (lo, hi) = command_range(kind);
    rng.gen_range(lo..=hi)
}
