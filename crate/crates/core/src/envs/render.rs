use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::layout::{Cell, MazeLayout, COLS, NUM_CELLS, ROWS};
use crate::SeedRng;

/// Pixels per cell side in frame mode.
pub const CELL_PX: usize = 8;
pub const FRAME_H: usize = ROWS * CELL_PX;
pub const FRAME_W: usize = COLS * CELL_PX;
/// Side of the exogenous noise tile.
pub const NOISE_TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// 36-dim indicator of the agent cell.
    Onehot,
    /// RGB frame, `3 x 48 x 48`, channels first.
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Off,
    /// One random tile per episode.
    Image,
    /// A fresh tile every step from the episode's stream.
    Video,
}

/// Everything rendering depends on; small enough to store per transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsKey {
    pub agent: Cell,
    pub goal: Option<Cell>,
    pub step: u32,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Renderer {
    pub mode: ObsMode,
    pub noise: NoiseMode,
}

impl Renderer {
    pub fn clean_dim(&self) -> usize {
        match self.mode {
            ObsMode::Onehot => NUM_CELLS,
            ObsMode::Frame => 3 * FRAME_H * FRAME_W,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match (self.noise, self.mode) {
            (NoiseMode::Off, _) => 0,
            (_, ObsMode::Onehot) => NOISE_TILE * NOISE_TILE,
            (_, ObsMode::Frame) => FRAME_H * FRAME_W,
        }
    }

    pub fn dim(&self) -> usize {
        self.clean_dim() + self.noise_dim()
    }

    /// Writes the observation into `out` (length [`Renderer::dim`]); the
    /// clean block comes first, the exogenous block last.
    pub fn render_into(&self, layout: &MazeLayout, key: &ObsKey, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.dim());
        let (clean, noise) = out.split_at_mut(self.clean_dim());
        clean.fill(0.0);
        match self.mode {
            ObsMode::Onehot => clean[key.agent.index()] = 1.0,
            ObsMode::Frame => draw_frame(layout, key, clean),
        }
        if self.noise != NoiseMode::Off {
            let tile = self.noise_tile(key);
            match self.mode {
                ObsMode::Onehot => noise.copy_from_slice(&tile),
                ObsMode::Frame => {
                    let scale = FRAME_H / NOISE_TILE;
                    for y in 0..FRAME_H {
                        for x in 0..FRAME_W {
                            noise[y * FRAME_W + x] = tile[(y / scale) * NOISE_TILE + x / scale];
                        }
                    }
                }
            }
        }
    }

    pub fn render(&self, layout: &MazeLayout, key: &ObsKey) -> Vec<f32> {
        let mut out = vec![0.0; self.dim()];
        self.render_into(layout, key, &mut out);
        out
    }

    /// `16 x 16` values in `[0, 1)`: fixed per episode in image mode, one
    /// tile per step (at word offset `step * 256`) in video mode.
    pub fn noise_tile(&self, key: &ObsKey) -> Vec<f32> {
        let mut rng = SeedRng::seed_from_u64(key.noise_seed);
        if self.noise == NoiseMode::Video {
            rng.set_word_pos(key.step as u128 * (NOISE_TILE * NOISE_TILE) as u128);
        }
        (0..NOISE_TILE * NOISE_TILE).map(|_| rng.random::<f32>()).collect()
    }
}

const FLOOR: [f32; 3] = [0.0, 0.0, 0.0];
const WALL: [f32; 3] = [0.0, 0.0, 1.0];
const AGENT: [f32; 3] = [1.0, 0.0, 0.0];
const GOAL: [f32; 3] = [0.0, 1.0, 0.0];

fn draw_frame(layout: &MazeLayout, key: &ObsKey, px: &mut [f32]) {
    let plane = FRAME_H * FRAME_W;
    let mut put = |y: usize, x: usize, color: [f32; 3]| {
        for (ch, v) in color.into_iter().enumerate() {
            px[ch * plane + y * FRAME_W + x] = v;
        }
    };
    let fill = |put: &mut dyn FnMut(usize, usize, [f32; 3]), cell: Cell, inset: usize, color: [f32; 3]| {
        for y in cell.row * CELL_PX + inset..(cell.row + 1) * CELL_PX - inset {
            for x in cell.col * CELL_PX + inset..(cell.col + 1) * CELL_PX - inset {
                put(y, x, color);
            }
        }
    };
    for c in Cell::all() {
        fill(&mut put, c, 0, FLOOR);
    }
    // A wall is a 2-px line straddling the shared border of its two cells.
    for (a, b) in layout.walls() {
        if a.row == b.row {
            let x = b.col * CELL_PX;
            for y in a.row * CELL_PX..(a.row + 1) * CELL_PX {
                put(y, x - 1, WALL);
                put(y, x, WALL);
            }
        } else {
            let y = b.row * CELL_PX;
            for x in a.col * CELL_PX..(a.col + 1) * CELL_PX {
                put(y - 1, x, WALL);
                put(y, x, WALL);
            }
        }
    }
    if let Some(goal) = key.goal {
        fill(&mut put, goal, 2, GOAL);
    }
    fill(&mut put, key.agent, 2, AGENT);
}
