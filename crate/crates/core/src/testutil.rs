//! Fixtures shared by unit tests across modules.

use rand::Rng;

use crate::data::{EncodedDialog, EncodedTurn};
use crate::tensor::Tensor;

/// Random features and random word ids in `4..vocab`; question lengths 2–4,
/// answer lengths 0–2.
pub fn random_dialog(
    r: &mut impl Rng,
    n: usize,
    f: usize,
    d: usize,
    vocab: usize,
    turns: usize,
) -> EncodedDialog {
    let x = (0..n * f * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let c = (0..f * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let mut present: Vec<bool> = (0..n * f).map(|_| r.random_bool(0.7)).collect();
    present[0] = true;
    let mut words = |len: usize| -> Vec<usize> { (0..len).map(|_| r.random_range(4..vocab)).collect() };
    let turns = (0..turns)
        .map(|_| {
            let ql = 2 + (words(1)[0] % 3);
            let al = words(1)[0] % 3;
            EncodedTurn {
                question: words(ql),
                answer: words(al),
            }
        })
        .collect();
    EncodedDialog {
        id: "test".into(),
        n,
        f,
        d,
        x: Tensor::new(vec![n * f, d], x).unwrap(),
        present,
        c: Tensor::new(vec![f, d], c).unwrap(),
        frames_present: vec![true; f],
        turns,
    }
}
