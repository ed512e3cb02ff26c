//! A second answerer that reads the question text instead of the script
//! that produced it, and recomputes every fact from raw trajectories.
//! Dataset generation refuses any dialog on which the two disagree.

use super::World;
use crate::error::{Error, Result};

/// Answer and pronoun distance for a question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reading {
    pub answer: Vec<String>,
    pub coref_distance: usize,
}

fn find_object(world: &World, color: Option<&str>, shape: Option<&str>) -> Option<usize> {
    let hits: Vec<usize> = world
        .objects
        .iter()
        .filter(|o| color.is_none_or(|c| o.color.word() == c))
        .filter(|o| shape.is_none_or(|s| o.shape.word() == s))
        .map(|o| o.id)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

/// Objects a question names explicitly, by full or partial description.
fn mentions(world: &World, q: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < q.len() {
        if q[i] == "the" {
            let next = q.get(i + 1).copied();
            let after = q.get(i + 2).copied();
            let color = world.objects.iter().find(|o| Some(o.color.word()) == next).map(|o| o.color.word());
            let shape_at = |w: Option<&str>| world.objects.iter().find(|o| Some(o.shape.word()) == w).map(|o| o.shape.word());
            let found = match (color, shape_at(next), shape_at(after)) {
                (Some(c), _, Some(s)) => find_object(world, Some(c), Some(s)),
                (Some(c), _, None) if after == Some("one") => find_object(world, Some(c), None),
                (None, Some(s), _) => find_object(world, None, Some(s)),
                _ => None,
            };
            if let Some(o) = found {
                out.push(o);
            }
        }
        i += 1;
    }
    out
}

fn cell_words(world: &World, obj: usize, start: bool) -> Vec<String> {
    let o = &world.objects[obj];
    let frame = (0..world.frames)
        .filter(|&f| o.is_visible(f))
        .reduce(|a, b| if start { a.min(b) } else { a.max(b) })
        .expect("objects are visible for at least one frame");
    let (x, y) = o.trajectory[frame];
    let third = |v: usize| {
        if 3 * v < world.grid {
            0
        } else if 3 * v < 2 * world.grid {
            1
        } else {
            2
        }
    };
    let rows = ["top", "middle", "bottom"];
    let cols = ["left", "center", "right"];
    vec![rows[third(y)].to_string(), cols[third(x)].to_string()]
}

fn number(n: usize) -> String {
    super::dialog::NUMBERS[n].to_string()
}

/// Answers `questions[t]` given the questions before it.
pub fn answer(world: &World, questions: &[Vec<String>], t: usize) -> Result<Reading> {
    let text: Vec<&str> = questions[t].iter().map(String::as_str).collect();
    let fail = || Error::Generation(format!("oracle cannot read {:?}", questions[t].join(" ")));
    let plain = |answer: Vec<String>| Ok(Reading { answer, coref_distance: 0 });
    match text.as_slice() {
        ["how", "many", "objects", "are", "there"] => plain(vec![number(world.objects.len())]),
        ["how", "many", c, "objects", "are", "there"] => plain(vec![number(
            world.objects.iter().filter(|o| o.color.word() == *c).count(),
        )]),
        ["how", "many", p, "are", "there"] => plain(vec![number(
            world.objects.iter().filter(|o| o.shape.plural() == *p).count(),
        )]),
        ["what", "color", "is", "the", s] => {
            let o = find_object(world, None, Some(s)).ok_or_else(fail)?;
            plain(vec![world.objects[o].color.word().to_string()])
        }
        ["what", "shape", "is", "the", c, "one"] => {
            let o = find_object(world, Some(c), None).ok_or_else(fail)?;
            plain(vec![world.objects[o].shape.word().to_string()])
        }
        ["where", "is", "the", c, s, "at", "the", when] => {
            let o = find_object(world, Some(c), Some(s)).ok_or_else(fail)?;
            plain(cell_words(world, o, *when == "start"))
        }
        ["do", "the", ca, sa, "and", "the", cb, sb, "meet"] => {
            let a = find_object(world, Some(ca), Some(sa)).ok_or_else(fail)?;
            let b = find_object(world, Some(cb), Some(sb)).ok_or_else(fail)?;
            let met = (0..world.frames).any(|f| {
                let (oa, ob) = (&world.objects[a], &world.objects[b]);
                oa.is_visible(f) && ob.is_visible(f) && oa.trajectory[f] == ob.trajectory[f]
            });
            plain(vec![if met { "yes" } else { "no" }.to_string()])
        }
        ["does", "the", c, s, "leave", "before", "the", "end"] => {
            let o = find_object(world, Some(c), Some(s)).ok_or_else(fail)?;
            let leaves = !world.objects[o].is_visible(world.frames - 1);
            plain(vec![if leaves { "yes" } else { "no" }.to_string()])
        }
        ["the", _, _, "is", "named", name, ".", "what", "is", "its", "name"] => plain(vec![name.to_string()]),
        ["what", slot @ ("color" | "shape"), "is", "it"] => {
            // Walk back to the most recent explicit mention; pronoun turns
            // carry no mention of their own.
            for j in (0..t).rev() {
                let prev: Vec<&str> = questions[j].iter().map(String::as_str).collect();
                match mentions(world, &prev).as_slice() {
                    [] => continue,
                    [o] => {
                        let obj = &world.objects[*o];
                        let word = if *slot == "color" { obj.color.word() } else { obj.shape.word() };
                        return Ok(Reading {
                            answer: vec![word.to_string()],
                            coref_distance: t - j,
                        });
                    }
                    _ => return Err(fail()),
                }
            }
            Err(fail())
        }
        _ => Err(fail()),
    }
}
