//! Object and context features for a world.
//!
//! The feature width `d` splits into four equal blocks: shape embedding,
//! color embedding, grid position encoding and frame encoding. Blocks are
//! disjoint, so a row is the sum of the four parts plus a little noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Color, Shape, World};
use crate::error::{Error, Result};

/// Attribute embeddings never change between datasets.
const ATTRIBUTE_SEED: u64 = 0xa77b_0001;
pub const NOISE: f32 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    /// `[N][F][d]`, zero rows where the object is absent.
    pub x: Vec<Vec<Vec<f32>>>,
    pub present: Vec<Vec<bool>>,
    /// `[F][d]`.
    pub c: Vec<Vec<f32>>,
}

fn block(d: usize) -> usize {
    d / 4
}

/// Fixed embedding of length `len` for attribute slot `slot`.
fn attribute_embedding(slot: usize, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(ATTRIBUTE_SEED);
    rng.set_stream(slot as u64);
    let v: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt().max(1e-6);
    let scale = (len as f32).sqrt() / norm;
    v.into_iter().map(|a| a * scale).collect()
}

pub fn shape_embedding(shape: Shape, len: usize) -> Vec<f32> {
    attribute_embedding(shape as usize, len)
}

pub fn color_embedding(color: Color, len: usize) -> Vec<f32> {
    attribute_embedding(16 + color as usize, len)
}

/// Sinusoids of one coordinate: pairs `(sin, cos)` of `v·π(k+1)/(2·range)`.
fn sinusoids(v: f64, range: usize, len: usize) -> impl Iterator<Item = f32> {
    (0..len).map(move |i| {
        let w = std::f64::consts::PI * (i / 2 + 1) as f64 / (2.0 * range as f64);
        (if i % 2 == 0 { (v * w).sin() } else { (v * w).cos() }) as f32
    })
}

/// Half the block encodes x, the other half y.
pub fn position_encoding(x: usize, y: usize, grid: usize, len: usize) -> Vec<f32> {
    let hx = len / 2;
    sinusoids(x as f64, grid, hx)
        .chain(sinusoids(y as f64, grid, len - hx))
        .collect()
}

/// A linear ramp `f/(F−1)` followed by sinusoids of the frame index.
pub fn frame_encoding(frame: usize, frames: usize, len: usize) -> Vec<f32> {
    if len == 0 {
        return Vec::new();
    }
    let ramp = frame as f32 / (frames.max(2) - 1) as f32;
    std::iter::once(ramp)
        .chain(sinusoids(frame as f64, frames, len - 1))
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise depends only on the seed and what is drawn, so identical objects
/// on identical paths render identically.
fn noise(seed: u64, key: [u64; 5], d: usize) -> Vec<f32> {
    let h = key.iter().fold(splitmix(seed), |h, &k| splitmix(h ^ k));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..d).map(|_| rng.random_range(-NOISE..NOISE)).collect()
}

pub fn render_features(world: &World, d: usize, seed: u64) -> Result<Features> {
    if d < 16 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "feature width d = {d} must be a multiple of 4 and at least 16"
        )));
    }
    let b = block(d);
    let frames = world.frames;
    let times: Vec<Vec<f32>> = (0..frames).map(|f| frame_encoding(f, frames, d - 3 * b)).collect();
    let mut x = Vec::with_capacity(world.objects.len());
    let mut present = Vec::with_capacity(world.objects.len());
    for o in &world.objects {
        let shape = shape_embedding(o.shape, b);
        let color = color_embedding(o.color, b);
        let mut rows = Vec::with_capacity(frames);
        let mut mask = Vec::with_capacity(frames);
        for f in 0..frames {
            if !o.is_visible(f) {
                rows.push(vec![0.0; d]);
                mask.push(false);
                continue;
            }
            let (px, py) = o.trajectory[f];
            let eps = noise(
                seed,
                [o.shape as u64, o.color as u64, f as u64, px as u64, py as u64],
                d,
            );
            let row: Vec<f32> = shape
                .iter()
                .chain(&color)
                .chain(&position_encoding(px, py, world.grid, b))
                .chain(&times[f])
                .zip(eps)
                .map(|(v, e)| v + e)
                .collect();
            rows.push(row);
            mask.push(true);
        }
        x.push(rows);
        present.push(mask);
    }
    let c = (0..frames)
        .map(|f| {
            let visible: Vec<usize> = (0..x.len()).filter(|&n| present[n][f]).collect();
            let mut row = vec![0.0f32; d];
            for &n in &visible {
                for (r, v) in row.iter_mut().zip(&x[n][f]) {
                    *r += v;
                }
            }
            if !visible.is_empty() {
                let k = visible.len() as f32;
                row.iter_mut().for_each(|r| *r /= k);
            }
            for (r, t) in row[3 * b..].iter_mut().zip(&times[f]) {
                *r += t;
            }
            row
        })
        .collect();
    Ok(Features { x, present, c })
}
