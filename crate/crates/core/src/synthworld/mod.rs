//! Synthetic videos: objects moving on a small grid with scripted dialogs
//! whose answers are computed exactly from the world.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod dataset;
pub mod dialog;
pub mod oracle;
pub mod render;

pub use dataset::{build_splits, gen_dataset, Dataset, GenParams, Splits, Stats};
pub use dialog::{gen_dialog, Family, Turn};
pub use render::{render_features, Features};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Ball,
    Cone,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Ball, Shape::Cone];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Ball => "ball",
            Shape::Cone => "cone",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Cube => "cubes",
            Shape::Ball => "balls",
            Shape::Cone => "cones",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub shape: Shape,
    pub color: Color,
    /// `(x, y)` cell for every frame, including frames where the object is
    /// not visible.
    pub trajectory: Vec<(usize, usize)>,
    /// First and last visible frame, inclusive.
    pub visible: (usize, usize),
}

impl Object {
    pub fn is_visible(&self, frame: usize) -> bool {
        (self.visible.0..=self.visible.1).contains(&frame)
    }

    /// The unique description "`<color> <shape>`".
    pub fn name(&self) -> [&'static str; 2] {
        [self.color.word(), self.shape.word()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Enter,
    Exit,
    Meet,
    Pickup,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub frame: usize,
    pub kind: EventKind,
    pub participants: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub id: String,
    pub grid: usize,
    pub frames: usize,
    pub objects: Vec<Object>,
    pub events: Vec<Event>,
}

impl World {
    pub fn both_visible(&self, a: usize, b: usize, frame: usize) -> bool {
        self.objects[a].is_visible(frame) && self.objects[b].is_visible(frame)
    }

    pub fn colocated(&self, a: usize, b: usize, frame: usize) -> bool {
        self.both_visible(a, b, frame)
            && self.objects[a].trajectory[frame] == self.objects[b].trajectory[frame]
    }

    pub fn meet(&self, a: usize, b: usize) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == EventKind::Meet && e.participants == [a.min(b), a.max(b)])
    }
}

/// Frames two objects must share a cell for to count as a pickup.
pub const PICKUP_FRAMES: usize = 3;

/// Every event implied by the trajectories: one enter per object, an exit
/// for objects that leave before the last frame, a meet at the start of each
/// run of shared cells, and a pickup for runs of at least [`PICKUP_FRAMES`].
pub fn detect_events(objects: &[Object], frames: usize) -> Vec<Event> {
    let mut events = Vec::new();
    for o in objects {
        events.push(Event {
            frame: o.visible.0,
            kind: EventKind::Enter,
            participants: vec![o.id],
        });
        if o.visible.1 + 1 < frames {
            events.push(Event {
                frame: o.visible.1,
                kind: EventKind::Exit,
                participants: vec![o.id],
            });
        }
    }
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let together = |f: usize| {
                a.is_visible(f) && b.is_visible(f) && a.trajectory[f] == b.trajectory[f]
            };
            let mut f = 0;
            while f < frames {
                if !together(f) {
                    f += 1;
                    continue;
                }
                let start = f;
                while f < frames && together(f) {
                    f += 1;
                }
                let pair = vec![a.id.min(b.id), a.id.max(b.id)];
                events.push(Event {
                    frame: start,
                    kind: EventKind::Meet,
                    participants: pair.clone(),
                });
                if f - start >= PICKUP_FRAMES {
                    events.push(Event {
                        frame: start,
                        kind: EventKind::Pickup,
                        participants: pair,
                    });
                }
            }
        }
    }
    events.sort();
    events
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n: usize,
    pub frames: usize,
    pub grid: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            n: 6,
            frames: 20,
            grid: 6,
        }
    }
}

const WORLD_RETRIES: usize = 100;

fn interpolate(keys: &[(usize, (usize, usize))], frames: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .map(|f| {
            let i = keys.iter().rposition(|&(k, _)| k <= f).expect("first key at frame 0");
            let (f0, p0) = keys[i];
            match keys.get(i + 1) {
                None => p0,
                Some(&(f1, p1)) => {
                    let t = (f - f0) as f64 / (f1 - f0) as f64;
                    let lerp = |a: usize, b: usize| (a as f64 + t * (b as f64 - a as f64)).round() as usize;
                    (lerp(p0.0, p1.0), lerp(p0.1, p1.1))
                }
            }
        })
        .collect()
}

fn random_keys(rng: &mut impl Rng, frames: usize, grid: usize) -> Vec<(usize, (usize, usize))> {
    let mut frames_at = vec![0, frames - 1];
    for _ in 0..rng.random_range(0..=2) {
        let f = rng.random_range(1..frames - 1);
        if !frames_at.contains(&f) {
            frames_at.push(f);
        }
    }
    frames_at.sort_unstable();
    frames_at
        .into_iter()
        .map(|f| (f, (rng.random_range(0..grid), rng.random_range(0..grid))))
        .collect()
}

/// A seeded world with distinct (shape, color) pairs, visibility intervals
/// of at least half the frames, and at least one meet.
pub fn gen_world(id: &str, seed: u64, params: WorldParams) -> Result<World> {
    let WorldParams { n, frames, grid } = params;
    if n < 2 || frames < 4 || grid < 3 {
        return Err(Error::Config(format!(
            "world needs n ≥ 2, frames ≥ 4 and grid ≥ 3 (got {n}, {frames}, {grid})"
        )));
    }
    let kinds = Shape::ALL.len() * Color::ALL.len();
    if n > kinds {
        return Err(Error::Config(format!(
            "at most {kinds} objects have distinct shape and color"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_len = frames.div_ceil(2);
    for _ in 0..WORLD_RETRIES {
        let mut pairs: Vec<(Shape, Color)> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .collect();
        pairs.shuffle(&mut rng);
        let mut keys = Vec::with_capacity(n);
        let mut objects: Vec<Object> = pairs[..n]
            .iter()
            .enumerate()
            .map(|(id, &(shape, color))| {
                let len = rng.random_range(min_len..=frames);
                let enter = rng.random_range(0..=frames - len);
                let k = random_keys(&mut rng, frames, grid);
                let trajectory = interpolate(&k, frames);
                keys.push(k);
                Object {
                    id,
                    shape,
                    color,
                    trajectory,
                    visible: (enter, enter + len - 1),
                }
            })
            .collect();

        // Route one object through another's cell at a frame where both are
        // visible.
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let lo = objects[a].visible.0.max(objects[b].visible.0);
        let hi = objects[a].visible.1.min(objects[b].visible.1);
        if lo > hi {
            continue;
        }
        let m = rng.random_range(lo..=hi);
        let target = objects[a].trajectory[m];
        let kb = &mut keys[b];
        match kb.iter_mut().find(|(f, _)| *f == m) {
            Some(k) => k.1 = target,
            None => {
                kb.push((m, target));
                kb.sort_unstable();
            }
        }
        objects[b].trajectory = interpolate(kb, frames);

        let events = detect_events(&objects, frames);
        if events.iter().any(|e| e.kind == EventKind::Meet) {
            return Ok(World {
                id: id.to_string(),
                grid,
                frames,
                objects,
                events,
            });
        }
    }
    Err(Error::Generation(format!(
        "world {id}: no valid layout after {WORLD_RETRIES} attempts"
    )))
}
