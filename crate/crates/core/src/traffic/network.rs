//! Grid topology, lane assignment, signal phases and route sampling.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    pub fn opposite(self) -> Heading {
        Heading::from_index(self.index() + 2)
    }

    /// Grid offset `(drow, dcol)`; rows grow southward, columns eastward.
    fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub fn turn(self, h: Heading) -> Heading {
        match self {
            Movement::Left => h.left(),
            Movement::Through => h,
            Movement::Right => h.right(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const N_PHASES: usize = 8;

/// Movements released by each phase, as `(travel heading, movement)` pairs.
/// Right turns are never signal-controlled.
pub const PHASES: [[(Heading, Movement); 2]; N_PHASES] = [
    [(Heading::East, Movement::Through), (Heading::West, Movement::Through)],
    [(Heading::North, Movement::Through), (Heading::South, Movement::Through)],
    [(Heading::East, Movement::Left), (Heading::West, Movement::Left)],
    [(Heading::North, Movement::Left), (Heading::South, Movement::Left)],
    [(Heading::East, Movement::Through), (Heading::East, Movement::Left)],
    [(Heading::West, Movement::Through), (Heading::West, Movement::Left)],
    [(Heading::North, Movement::Through), (Heading::North, Movement::Left)],
    [(Heading::South, Movement::Through), (Heading::South, Movement::Left)],
];

pub fn phase_permits(phase: usize, heading: Heading, movement: Movement) -> bool {
    movement == Movement::Right || PHASES[phase].contains(&(heading, movement))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Entry,
    Internal,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkInfo {
    pub kind: LinkKind,
    pub heading: Heading,
    /// Intersection at the downstream end; `None` for exit links.
    pub to_node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub rows: usize,
    pub cols: usize,
    pub lanes: usize,
    pub links: Vec<LinkInfo>,
    /// `incoming[node][heading]`: link entering `node` while travelling `heading`.
    pub incoming: Vec<[usize; 4]>,
    /// `outgoing[node][heading]`: link leaving `node` in direction `heading`.
    pub outgoing: Vec<[usize; 4]>,
}

impl Network {
    pub fn grid(rows: usize, cols: usize, lanes: usize) -> Self {
        let n = rows * cols;
        let mut links = Vec::with_capacity(4 * n + 2 * (rows + cols));
        for node in 0..n {
            for h in Heading::ALL {
                let upstream = neighbor(rows, cols, node, h.opposite());
                links.push(LinkInfo {
                    kind: if upstream.is_some() {
                        LinkKind::Internal
                    } else {
                        LinkKind::Entry
                    },
                    heading: h,
                    to_node: Some(node),
                });
            }
        }
        let incoming: Vec<[usize; 4]> = (0..n)
            .map(|node| [0, 1, 2, 3].map(|h| node * 4 + h))
            .collect();
        let mut outgoing = vec![[0usize; 4]; n];
        for node in 0..n {
            for h in Heading::ALL {
                outgoing[node][h.index()] = match neighbor(rows, cols, node, h) {
                    Some(m) => incoming[m][h.index()],
                    None => {
                        links.push(LinkInfo {
                            kind: LinkKind::Exit,
                            heading: h,
                            to_node: None,
                        });
                        links.len() - 1
                    }
                };
            }
        }
        Self {
            rows,
            cols,
            lanes,
            links,
            incoming,
            outgoing,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn entry_links(&self) -> impl Iterator<Item = usize> + '_ {
        self.links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LinkKind::Entry)
            .map(|(i, _)| i)
    }

    /// Lane used by vehicles about to perform `movement`: left turns keep to
    /// lane 0, through traffic to lane 1 and right turns to lane 2, folded
    /// onto the available lanes.
    pub fn lane_for(&self, movement: Movement) -> usize {
        movement.index().min(self.lanes - 1)
    }

    pub fn lane_id(&self, link: usize, lane: usize) -> usize {
        link * self.lanes + lane
    }

    pub fn n_lane_slots(&self) -> usize {
        self.links.len() * self.lanes
    }

    /// Link reached after performing `movement` at the downstream end of `link`.
    pub fn next_link(&self, link: usize, movement: Movement) -> Option<usize> {
        let info = self.links[link];
        let node = info.to_node?;
        Some(self.outgoing[node][movement.turn(info.heading).index()])
    }

    /// Movements at each intersection from `entry` to an exit link. Turns
    /// happen with total probability `turn_prob` (split evenly left/right);
    /// after `rows + cols + 2` intersections only through movements remain,
    /// so every route terminates.
    pub fn sample_route<R: Rng + ?Sized>(&self, entry: usize, turn_prob: f64, rng: &mut R) -> Vec<Movement> {
        let cap = self.rows + self.cols + 2;
        let mut route = Vec::new();
        let mut link = entry;
        while self.links[link].kind != LinkKind::Exit {
            let u: f64 = rng.random();
            let m = if route.len() >= cap || u >= turn_prob {
                Movement::Through
            } else if u < turn_prob / 2.0 {
                Movement::Left
            } else {
                Movement::Right
            };
            route.push(m);
            link = self.next_link(link, m).expect("non-exit link ends at a node");
        }
        route
    }
}

fn neighbor(rows: usize, cols: usize, node: usize, h: Heading) -> Option<usize> {
    let (r, c) = ((node / cols) as i64, (node % cols) as i64);
    let (dr, dc) = h.delta();
    let (nr, nc) = (r + dr, c + dc);
    (nr >= 0 && nc >= 0 && nr < rows as i64 && nc < cols as i64).then(|| nr as usize * cols + nc as usize)
}
