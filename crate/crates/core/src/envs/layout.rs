use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::{Error, Result};

pub const ROWS: usize = 6;
pub const COLS: usize = 6;
pub const NUM_CELLS: usize = ROWS * COLS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn index(self) -> usize {
        self.row * COLS + self.col
    }

    pub fn from_index(i: usize) -> Self {
        Self::new(i / COLS, i % COLS)
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..NUM_CELLS).map(Cell::from_index)
    }

    fn neighbours(self) -> impl Iterator<Item = Cell> {
        let (r, c) = (self.row as isize, self.col as isize);
        [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            .into_iter()
            .filter(|&(r, c)| r >= 0 && c >= 0 && (r as usize) < ROWS && (c as usize) < COLS)
            .map(|(r, c)| Cell::new(r as usize, c as usize))
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Unordered pair of adjacent cells, stored with the smaller cell first.
pub type Edge = (Cell, Cell);

fn edge(a: Cell, b: Cell) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// A 6x6 maze: the set of blocked cell-to-cell edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeLayout {
    pub kind: String,
    walls: BTreeSet<Edge>,
}

impl MazeLayout {
    /// Builds a layout and checks every cell is reachable.
    pub fn new(kind: impl Into<String>, walls: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let kind = kind.into();
        let mut set = BTreeSet::new();
        for (a, b) in walls {
            if !a.neighbours().any(|n| n == b) {
                return Err(Error::config(format!("wall {a}-{b} in `{kind}` joins non-adjacent cells")));
            }
            set.insert(edge(a, b));
        }
        let layout = Self { kind, walls: set };
        let reached = layout.distances_from(Cell::new(0, 0)).iter().filter(|d| d.is_some()).count();
        if reached != NUM_CELLS {
            return Err(Error::config(format!(
                "layout `{}` leaves {} cells unreachable",
                layout.kind,
                NUM_CELLS - reached
            )));
        }
        Ok(layout)
    }

    pub fn walls(&self) -> &BTreeSet<Edge> {
        &self.walls
    }

    pub fn blocked(&self, a: Cell, b: Cell) -> bool {
        self.walls.contains(&edge(a, b))
    }

    /// Open neighbours of `cell`.
    pub fn moves(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        cell.neighbours().filter(move |&n| !self.blocked(cell, n))
    }

    /// Undirected adjacency lists indexed by cell index.
    pub fn reachable_graph(&self) -> Vec<Vec<usize>> {
        Cell::all()
            .map(|c| self.moves(c).map(Cell::index).collect())
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.reachable_graph().iter().map(Vec::len).sum::<usize>() / 2
    }

    /// BFS distances from `start`; `None` for unreachable cells.
    pub fn distances_from(&self, start: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; NUM_CELLS];
        dist[start.index()] = Some(0);
        let mut q = VecDeque::from([start]);
        while let Some(c) = q.pop_front() {
            let d = dist[c.index()].expect("queued cells have distances");
            for n in self.moves(c) {
                if dist[n.index()].is_none() {
                    dist[n.index()] = Some(d + 1);
                    q.push_back(n);
                }
            }
        }
        dist
    }

    pub fn shortest_path_len(&self, from: Cell, to: Cell) -> usize {
        self.distances_from(from)[to.index()].expect("layouts are connected")
    }

    /// Golden-file text: a header, then one line per grid row listing the
    /// walls whose first cell lies in that row.
    pub fn dump(&self) -> String {
        let mut out = format!("# layout {} {}x{} walls {}\n", self.kind, ROWS, COLS, self.walls.len());
        for r in 0..ROWS {
            let _ = write!(out, "{r}:");
            for (a, b) in self.walls.iter().filter(|(a, _)| a.row == r) {
                let _ = write!(out, " {a}-{b}");
            }
            out.push('\n');
        }
        out
    }
}

/// Produces a named layout.
pub trait LayoutGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(&self) -> Result<MazeLayout>;
}

/// Open 6x6 grid.
pub struct GridWorld;

/// Single corridor winding clockwise inward from the top-left corner.
pub struct SpiralWorld;

/// The spiral with one wall removed at its bottom-right, closing a cycle.
pub struct LoopWorld;

/// Cells in clockwise inward order starting at (0, 0).
pub fn spiral_order() -> Vec<Cell> {
    let (mut top, mut bottom, mut left, mut right) = (0isize, ROWS as isize - 1, 0isize, COLS as isize - 1);
    let mut out = Vec::with_capacity(NUM_CELLS);
    let mut push = |r: isize, c: isize| out.push(Cell::new(r as usize, c as usize));
    while top <= bottom && left <= right {
        for c in left..=right {
            push(top, c);
        }
        for r in top + 1..=bottom {
            push(r, right);
        }
        if top < bottom {
            for c in (left..right).rev() {
                push(bottom, c);
            }
        }
        if left < right {
            for r in (top + 1..bottom).rev() {
                push(r, left);
            }
        }
        top += 1;
        bottom -= 1;
        left += 1;
        right -= 1;
    }
    out
}

fn spiral_walls() -> BTreeSet<Edge> {
    let order = spiral_order();
    let corridor: BTreeSet<Edge> = order.windows(2).map(|w| edge(w[0], w[1])).collect();
    Cell::all()
        .flat_map(|c| c.neighbours().map(move |n| edge(c, n)))
        .filter(|e| !corridor.contains(e))
        .collect()
}

/// The wall opened by [`LoopWorld`]: between the inner ring's bottom-right
/// cell and the outer ring cell below it.
pub const LOOP_OPENING: Edge = (Cell::new(ROWS - 2, COLS - 2), Cell::new(ROWS - 1, COLS - 2));

impl LayoutGenerator for GridWorld {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn generate(&self) -> Result<MazeLayout> {
        MazeLayout::new("grid", [])
    }
}

impl LayoutGenerator for SpiralWorld {
    fn name(&self) -> &'static str {
        "spiral"
    }

    fn generate(&self) -> Result<MazeLayout> {
        MazeLayout::new("spiral", spiral_walls())
    }
}

impl LayoutGenerator for LoopWorld {
    fn name(&self) -> &'static str {
        "loop"
    }

    fn generate(&self) -> Result<MazeLayout> {
        let mut walls = spiral_walls();
        walls.remove(&LOOP_OPENING);
        MazeLayout::new("loop", walls)
    }
}

/// Name -> layout generator.
pub struct LayoutRegistry {
    generators: BTreeMap<&'static str, Box<dyn LayoutGenerator>>,
}

impl LayoutRegistry {
    pub fn empty() -> Self {
        Self {
            generators: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(GridWorld));
        r.register(Box::new(SpiralWorld));
        r.register(Box::new(LoopWorld));
        r
    }

    pub fn register(&mut self, g: Box<dyn LayoutGenerator>) {
        self.generators.insert(g.name(), g);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.generators.keys().copied().collect()
    }

    pub fn build(&self, name: &str) -> Result<MazeLayout> {
        self.generators
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown env `{name}`; known: {}", self.names().join(", "))))?
            .generate()
    }
}
