//! Templated multi-turn dialogs about a world, answered from the world's
//! ground truth.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Color, Shape, World};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Attribute,
    Location,
    Count,
    Event,
    Coref,
    Copy,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Attribute,
        Family::Location,
        Family::Count,
        Family::Event,
        Family::Coref,
        Family::Copy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attribute => "attribute",
            Family::Location => "location",
            Family::Count => "count",
            Family::Event => "event",
            Family::Coref => "coref",
            Family::Copy => "copy",
        }
    }

    /// Attribute and location questions need the object's own appearance or
    /// position; text priors cannot answer them.
    pub fn fine_grained(self) -> bool {
        matches!(self, Family::Attribute | Family::Location)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub q: Vec<String>,
    pub a: Vec<String>,
    pub family: Family,
    /// Turns since the referent of "it" was introduced; 0 without a pronoun.
    pub coref_distance: usize,
    pub fine_grained: bool,
}

pub const NUMBERS: [&str; 13] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];
pub const ROWS: [&str; 3] = ["top", "middle", "bottom"];
pub const COLUMNS: [&str; 3] = ["left", "center", "right"];

/// Proper names attached to objects by copy questions. Each is rare in any
/// one dataset, so answering requires copying from the question.
pub const NAMES: [&str; 64] = [
    "zog", "bix", "quill", "trun", "mavo", "pell", "dax", "vorn", "kesh", "lumo", "narf", "oxil",
    "pim", "rusk", "sable", "tovi", "umber", "vex", "wendo", "yarl", "zeph", "brin", "corva",
    "drel", "elko", "fenn", "gorm", "hask", "ivo", "jex", "kell", "lorn", "mip", "nox", "orla",
    "prax", "quen", "rell", "sorb", "tavo", "ulm", "vint", "wex", "yolo", "zarn", "bask", "clem",
    "dorn", "esk", "fitz", "grel", "hux", "ilk", "jorn", "kip", "lask", "moxa", "nib", "ozzy",
    "pavo", "rine", "skiv", "tumo", "gav",
];

/// Every word a dialog can contain, in a fixed order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words = vec![
        "what", "color", "shape", "is", "the", "one", "where", "at", "start", "end", "how", "many",
        "objects", "are", "there", "do", "and", "meet", "does", "leave", "before", "it", "named",
        ".", "its", "name", "yes", "no",
    ];
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(Shape::ALL.iter().map(|s| s.plural()));
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(NUMBERS);
    words.extend(ROWS);
    words.extend(COLUMNS);
    words.extend(NAMES);
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    words
}

/// Knobs for the dialog script.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogPolicy {
    /// Chance that a dialog plants a pronoun at least three turns after its
    /// referent was introduced, with only count questions in between.
    pub long_coref: f64,
    /// Relative weights of attribute, location, count, event, coref, copy
    /// for unplanned turns.
    pub weights: [f64; 6],
}

impl Default for DialogPolicy {
    fn default() -> Self {
        DialogPolicy {
            long_coref: 0.8,
            weights: [2.0, 2.0, 1.0, 1.0, 2.0, 1.5],
        }
    }
}

/// Grid region of a cell as `[row, column]` words.
pub fn region(world: &World, (x, y): (usize, usize)) -> [&'static str; 2] {
    [ROWS[y * 3 / world.grid], COLUMNS[x * 3 / world.grid]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum When {
    Start,
    End,
}

impl When {
    fn word(self) -> &'static str {
        match self {
            When::Start => "start",
            When::End => "end",
        }
    }

    fn frame(self, world: &World, obj: usize) -> usize {
        let v = world.objects[obj].visible;
        match self {
            When::Start => v.0,
            When::End => v.1,
        }
    }
}

/// What a pronoun question asks about its referent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Color,
    Shape,
}

impl Slot {
    fn word(self) -> &'static str {
        match self {
            Slot::Color => "color",
            Slot::Shape => "shape",
        }
    }
}

/// The object "it" would refer to, with the turn it was introduced and
/// which attributes have already been asked about.
#[derive(Clone, Copy, Debug)]
struct Referent {
    obj: usize,
    turn: usize,
    asked: [bool; 2],
}

impl Referent {
    fn open(&self) -> Vec<Slot> {
        [Slot::Color, Slot::Shape]
            .into_iter()
            .filter(|w| !self.asked[*w as usize])
            .collect()
    }
}

struct Script<'w> {
    world: &'w World,
    rng: ChaCha8Rng,
    referent: Option<Referent>,
    turns: Vec<Turn>,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl Script<'_> {
    fn unique_shapes(&self) -> Vec<usize> {
        let objs = &self.world.objects;
        (0..objs.len())
            .filter(|&i| objs.iter().filter(|o| o.shape == objs[i].shape).count() == 1)
            .collect()
    }

    fn unique_colors(&self) -> Vec<usize> {
        let objs = &self.world.objects;
        (0..objs.len())
            .filter(|&i| objs.iter().filter(|o| o.color == objs[i].color).count() == 1)
            .collect()
    }

    fn feasible(&self, family: Family) -> bool {
        match family {
            Family::Attribute => !self.unique_shapes().is_empty() || !self.unique_colors().is_empty(),
            Family::Coref => self.referent.is_some_and(|r| !r.open().is_empty()),
            _ => true,
        }
    }

    fn push(&mut self, family: Family, q: Vec<String>, a: Vec<String>, coref_distance: usize) {
        self.turns.push(Turn {
            q,
            a,
            family,
            coref_distance,
            fine_grained: family.fine_grained(),
        });
    }

    /// Marks the object named by the turn just pushed as the referent.
    fn introduce(&mut self, obj: usize, asked: Option<Slot>) {
        let mut r = Referent {
            obj,
            turn: self.turns.len() - 1,
            asked: [false; 2],
        };
        if let Some(w) = asked {
            r.asked[w as usize] = true;
        }
        self.referent = Some(r);
    }

    fn pick_object(&mut self) -> usize {
        self.rng.random_range(0..self.world.objects.len())
    }

    fn pick_when(&mut self) -> When {
        if self.rng.random_bool(0.5) {
            When::Start
        } else {
            When::End
        }
    }

    /// Appends one turn of `family`; the family must be feasible.
    fn ask(&mut self, family: Family) {
        let world = self.world;
        match family {
            Family::Attribute => {
                let by_shape = self.unique_shapes();
                let by_color = self.unique_colors();
                let use_shape = !by_shape.is_empty() && (by_color.is_empty() || self.rng.random_bool(0.5));
                let pool = if use_shape { by_shape } else { by_color };
                let obj = *pool.choose(&mut self.rng).expect("feasible");
                let o = &world.objects[obj];
                let (q, a) = if use_shape {
                    (
                        words(&["what", "color", "is", "the", o.shape.word()]),
                        words(&[o.color.word()]),
                    )
                } else {
                    (
                        words(&["what", "shape", "is", "the", o.color.word(), "one"]),
                        words(&[o.shape.word()]),
                    )
                };
                self.push(family, q, a, 0);
                self.introduce(obj, Some(if use_shape { Slot::Color } else { Slot::Shape }));
            }
            Family::Location => {
                let obj = self.pick_object();
                let when = self.pick_when();
                let [c, s] = world.objects[obj].name();
                let cell = world.objects[obj].trajectory[when.frame(world, obj)];
                let q = words(&["where", "is", "the", c, s, "at", "the", when.word()]);
                self.push(family, q, words(&region(world, cell)), 0);
                self.introduce(obj, None);
            }
            Family::Count => {
                let objs = &world.objects;
                let (q, n) = match self.rng.random_range(0..3) {
                    0 => (words(&["how", "many", "objects", "are", "there"]), objs.len()),
                    1 => {
                        let c = objs[self.pick_object()].color;
                        (
                            words(&["how", "many", c.word(), "objects", "are", "there"]),
                            objs.iter().filter(|o| o.color == c).count(),
                        )
                    }
                    _ => {
                        let s = objs[self.pick_object()].shape;
                        (
                            words(&["how", "many", s.plural(), "are", "there"]),
                            objs.iter().filter(|o| o.shape == s).count(),
                        )
                    }
                };
                self.push(family, q, words(&[NUMBERS[n]]), 0);
            }
            Family::Event => {
                if self.rng.random_bool(0.5) {
                    let meets: Vec<(usize, usize)> = world
                        .events
                        .iter()
                        .filter(|e| e.kind == super::EventKind::Meet)
                        .map(|e| (e.participants[0], e.participants[1]))
                        .collect();
                    let (a, b) = if self.rng.random_bool(0.5) {
                        *meets.choose(&mut self.rng).expect("every world has a meet")
                    } else {
                        let a = self.pick_object();
                        let b = (a + self.rng.random_range(1..world.objects.len())) % world.objects.len();
                        (a, b)
                    };
                    let (a, b) = if self.rng.random_bool(0.5) { (a, b) } else { (b, a) };
                    let [ca, sa] = world.objects[a].name();
                    let [cb, sb] = world.objects[b].name();
                    let q = words(&["do", "the", ca, sa, "and", "the", cb, sb, "meet"]);
                    let ans = if world.meet(a, b) { "yes" } else { "no" };
                    self.push(family, q, words(&[ans]), 0);
                    self.referent = None;
                } else {
                    let obj = self.pick_object();
                    let [c, s] = world.objects[obj].name();
                    let q = words(&["does", "the", c, s, "leave", "before", "the", "end"]);
                    let leaves = world.objects[obj].visible.1 + 1 < world.frames;
                    self.push(family, q, words(&[if leaves { "yes" } else { "no" }]), 0);
                    self.introduce(obj, None);
                }
            }
            Family::Coref => {
                let mut r = self.referent.expect("feasible");
                let slot = *r.open().choose(&mut self.rng).expect("feasible");
                let o = &world.objects[r.obj];
                let answer = match slot {
                    Slot::Color => o.color.word(),
                    Slot::Shape => o.shape.word(),
                };
                let q = words(&["what", slot.word(), "is", "it"]);
                let distance = self.turns.len() - r.turn;
                self.push(family, q, words(&[answer]), distance);
                r.asked[slot as usize] = true;
                self.referent = Some(r);
            }
            Family::Copy => {
                let obj = self.pick_object();
                let name = *NAMES.choose(&mut self.rng).expect("names");
                let [c, s] = world.objects[obj].name();
                let q = words(&["the", c, s, "is", "named", name, ".", "what", "is", "its", "name"]);
                self.push(family, q, words(&[name]), 0);
                self.introduce(obj, None);
            }
        }
    }

    fn ask_random(&mut self, weights: &[f64; 6]) {
        let options: Vec<(Family, f64)> = Family::ALL
            .iter()
            .zip(weights)
            .filter(|(f, &w)| w > 0.0 && self.feasible(**f))
            .map(|(f, &w)| (*f, w))
            .collect();
        let family = options
            .choose_weighted(&mut self.rng, |o| o.1)
            .map(|o| o.0)
            .unwrap_or(Family::Count);
        self.ask(family);
    }

    /// An introduction that leaves at least one attribute open for a later
    /// pronoun.
    fn ask_introduction(&mut self) {
        let family = *[Family::Attribute, Family::Location, Family::Copy, Family::Event]
            .choose(&mut self.rng)
            .expect("non-empty");
        match family {
            Family::Attribute if self.feasible(Family::Attribute) => self.ask(family),
            Family::Location | Family::Copy => self.ask(family),
            _ => {
                // Event questions may mention two objects; use the single
                // object form directly.
                let obj = self.pick_object();
                let [c, s] = self.world.objects[obj].name();
                let q = words(&["does", "the", c, s, "leave", "before", "the", "end"]);
                let leaves = self.world.objects[obj].visible.1 + 1 < self.world.frames;
                self.push(Family::Event, q, words(&[if leaves { "yes" } else { "no" }]), 0);
                self.introduce(obj, None);
            }
        }
    }
}

/// A `turns`-long dialog about `world`.
pub fn gen_dialog(world: &World, turns: usize, policy: &DialogPolicy, seed: u64) -> Result<Vec<Turn>> {
    if turns < 2 {
        return Err(Error::Config(format!("dialogs need at least 2 turns, got {turns}")));
    }
    let mut s = Script {
        world,
        rng: ChaCha8Rng::seed_from_u64(seed),
        referent: None,
        turns: Vec::with_capacity(turns),
    };
    let plan = (turns >= 4 && s.rng.random_bool(policy.long_coref)).then(|| {
        let intro = s.rng.random_range(0..=turns - 4);
        let distance = s.rng.random_range(3..=turns - 1 - intro);
        (intro, intro + distance)
    });
    for t in 0..turns {
        match plan {
            Some((intro, _)) if t == intro => s.ask_introduction(),
            Some((intro, pronoun)) if t > intro && t < pronoun => s.ask(Family::Count),
            Some((_, pronoun)) if t == pronoun => s.ask(Family::Coref),
            _ => s.ask_random(&policy.weights),
        }
    }
    Ok(s.turns)
}
