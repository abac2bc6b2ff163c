//! 6x6 maze tasks (open grid, spiral corridor, spiral with a loop) and
//! their observations with optional exogenous noise.

mod layout;
mod maze;
mod render;

pub use layout::{
    spiral_order, Cell, Edge, GridWorld, LayoutGenerator, LayoutRegistry, LoopWorld, MazeLayout, SpiralWorld, COLS,
    LOOP_OPENING, NUM_CELLS, ROWS,
};
pub use maze::{Action, GoalRule, MazeEnv, MazeState, StepOutcome, CENTER};
pub use render::{NoiseMode, ObsKey, ObsMode, Renderer, CELL_PX, FRAME_H, FRAME_W, NOISE_TILE};
