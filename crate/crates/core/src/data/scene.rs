//! Random scenes and their analytic rendering.
//!
//! Depth is inverse-depth-like: smaller is nearer. Objects are
//! fronto-parallel planes in `[0.1, 0.55]`; the background is a vertical
//! ramp in `[0.6, 1.0]`. Colors are mixed towards a fog color in
//! proportion to depth, and nearer objects tend to be drawn larger.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS, COLORS, EOS, SHAPES};
use crate::model::MaskTarget;
use crate::rng::{keyed_rng, Purpose};
use crate::tensor::Tensor;

pub const MAX_OBJECTS: usize = 4;
pub const NUM_CLASSES: usize = 1 + COLORS.len() * SHAPES.len();

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.90],
];
const GROUND: [f64; 3] = [0.35, 0.42, 0.30];
const FOG: [f64; 3] = [0.78, 0.80, 0.85];
const FOG_STRENGTH: f64 = 0.6;
const MIN_DEPTH_GAP: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels.
    pub size: f64,
    pub depth: f64,
}

impl Object {
    /// Whether the pixel centred at `(x, y)` is covered.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.size);
        match self.shape {
            0 => dx.abs() <= r && dy.abs() <= r,
            1 => dx * dx + dy * dy <= r * r,
            _ => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub side: usize,
    pub objects: Vec<Object>,
    /// Background depth at the top and bottom rows.
    pub bg_top: f64,
    pub bg_bottom: f64,
}

/// Everything a sample carries, all derived from one [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    /// Per-pixel class: 0 for background, else `1 + 3 color + shape`.
    pub classes: Tensor<f32>,
    pub instances: Vec<MaskTarget<f32>>,
    pub caption: Vec<usize>,
}

impl Scene {
    pub fn background_depth(&self, y: f64) -> f64 {
        self.bg_top + (self.bg_bottom - self.bg_top) * y / self.side as f64
    }

    /// Index of the nearest object covering the pixel, if any.
    pub fn nearest(&self, px: usize, py: usize) -> Option<usize> {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.covers(x, y))
            .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
            .map(|(i, _)| i)
    }

    fn visible_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.objects.len()];
        for py in 0..self.side {
            for px in 0..self.side {
                if let Some(i) = self.nearest(px, py) {
                    c[i] += 1;
                }
            }
        }
        c
    }

    fn class_of(o: &Object) -> usize {
        1 + o.color * SHAPES.len() + o.shape
    }
}

fn min_visible(side: usize) -> usize {
    (side * side).div_ceil(40).max(3)
}

/// Draws a scene from `(seed, purpose, index)`. Candidates that break a
/// constraint (occluded objects, three objects of one color, depth planes
/// closer than the minimum gap) are redrawn from the same stream.
pub fn gen_scene(seed: u64, purpose: Purpose, index: u64, side: usize) -> Scene {
    let mut rng = keyed_rng(seed, purpose, index);
    let s = side as f64;
    loop {
        let n = rng.gen_range(1..=MAX_OBJECTS);
        let mut objects: Vec<Object> = Vec::with_capacity(n);
        for _ in 0..n {
            let depth = rng.gen_range(0.10..0.55);
            let nearness = (0.55 - depth) / 0.45;
            let size = s * (0.10 + 0.14 * nearness + rng.gen_range(0.0..0.05));
            let cx = rng.gen_range(size..s - size);
            let cy = rng.gen_range(size..s - size);
            objects.push(Object {
                shape: rng.gen_range(0..SHAPES.len()),
                color: rng.gen_range(0..COLORS.len()),
                cx,
                cy,
                size,
                depth,
            });
        }
        let top = rng.gen_range(0.80..1.00);
        let bottom = rng.gen_range(0.60..top);
        let scene = Scene {
            side,
            objects,
            bg_top: top,
            bg_bottom: bottom,
        };
        let color_ok = (0..COLORS.len()).all(|c| scene.objects.iter().filter(|o| o.color == c).count() <= 2);
        let depth_ok = scene.objects.iter().enumerate().all(|(i, a)| {
            scene.objects[i + 1..].iter().all(|b| (a.depth - b.depth).abs() >= MIN_DEPTH_GAP)
        });
        if color_ok && depth_ok && scene.visible_counts().iter().all(|&c| c >= min_visible(side)) {
            return scene;
        }
    }
}

fn shade(albedo: [f64; 3], depth: f64) -> [f64; 3] {
    let f = FOG_STRENGTH * depth;
    [0, 1, 2].map(|k| albedo[k] * (1.0 - f) + FOG[k] * f)
}

/// `"a <color> <shape>"` mentions joined by `"and"`, left to right.
pub fn caption_tokens(scene: &Scene, vocab: &Vocab) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| scene.objects[a].cx.total_cmp(&scene.objects[b].cx));
    let a = vocab.id("a").expect("vocab");
    let and = vocab.id("and").expect("vocab");
    let mut t = vec![BOS];
    for (k, &i) in order.iter().enumerate() {
        if k > 0 {
            t.push(and);
        }
        let o = &scene.objects[i];
        t.extend([a, vocab.color_id(o.color), vocab.shape_id(o.shape)]);
    }
    t.push(EOS);
    t
}

/// `"the <color> <shape>"`, with `"left"`/`"right"` after `"the"` when
/// another object shares the color.
pub fn phrase_tokens(scene: &Scene, i: usize, vocab: &Vocab) -> Vec<usize> {
    let o = &scene.objects[i];
    let mut t = vec![vocab.id("the").expect("vocab")];
    if let Some(other) = scene.objects.iter().enumerate().find(|(j, p)| *j != i && p.color == o.color) {
        let side = if o.cx < other.1.cx { "left" } else { "right" };
        t.push(vocab.id(side).expect("vocab"));
    }
    t.extend([vocab.color_id(o.color), vocab.shape_id(o.shape)]);
    t
}

pub fn render(scene: &Scene, vocab: &Vocab) -> Sample {
    let s = scene.side;
    let mut image = vec![0f32; s * s * 3];
    let mut depth = vec![0f32; s * s];
    let mut classes = vec![0f32; s * s];
    let mut masks = vec![vec![0f32; s * s]; scene.objects.len()];
    for py in 0..s {
        for px in 0..s {
            let p = py * s + px;
            let (d, rgb) = match scene.nearest(px, py) {
                Some(i) => {
                    let o = &scene.objects[i];
                    masks[i][p] = 1.0;
                    classes[p] = Scene::class_of(o) as f32;
                    (o.depth, shade(PALETTE[o.color], o.depth))
                }
                None => {
                    let d = scene.background_depth(py as f64 + 0.5);
                    (d, shade(GROUND, d))
                }
            };
            depth[p] = d as f32;
            for k in 0..3 {
                image[p * 3 + k] = rgb[k] as f32;
            }
        }
    }
    let instances = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| MaskTarget {
            phrase: phrase_tokens(scene, i, vocab),
            mask: Tensor::new(vec![s, s], m).expect("mask dims"),
        })
        .collect();
    Sample {
        scene: scene.clone(),
        image: Tensor::new(vec![s, s, 3], image).expect("image dims"),
        depth: Tensor::new(vec![s, s], depth).expect("depth dims"),
        classes: Tensor::new(vec![s, s], classes).expect("class dims"),
        instances,
        caption: caption_tokens(scene, vocab),
    }
}

pub fn gen_sample(seed: u64, purpose: Purpose, index: u64, side: usize, vocab: &Vocab) -> Sample {
    render(&gen_scene(seed, purpose, index, side), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: u64) -> Vec<Sample> {
        let v = Vocab::default();
        (0..n).map(|i| gen_sample(0, Purpose::SceneTrain, i, 16, &v)).collect()
    }

    #[test]
    fn deterministic() {
        let v = Vocab::default();
        let a = gen_sample(0, Purpose::SceneTrain, 0, 16, &v);
        let b = gen_sample(0, Purpose::SceneTrain, 0, 16, &v);
        assert_eq!(a, b);
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn scene_constraints() {
        for s in samples(200) {
            let sc = &s.scene;
            assert!((1..=MAX_OBJECTS).contains(&sc.objects.len()));
            for (i, o) in sc.objects.iter().enumerate() {
                assert!(o.cx - o.size >= 0.0 && o.cx + o.size <= 16.0);
                assert!(o.cy - o.size >= 0.0 && o.cy + o.size <= 16.0);
                assert!(sc.objects[i + 1..].iter().all(|p| p.depth != o.depth));
            }
            assert!(s.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn labels_agree_with_brute_force_nearest_surface() {
        for s in samples(100) {
            let sc = &s.scene;
            let side = sc.side;
            for py in 0..side {
                for px in 0..side {
                    let p = py * side + px;
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let bg = sc.background_depth(y);
                    let mut best = (bg, None);
                    for (i, o) in sc.objects.iter().enumerate() {
                        if o.covers(x, y) && o.depth < best.0 {
                            best = (o.depth, Some(i));
                        }
                    }
                    assert_eq!(s.depth.data()[p], best.0 as f32, "depth oracle");
                    let owners: Vec<usize> =
                        (0..sc.objects.len()).filter(|&i| s.instances[i].mask.data()[p] == 1.0).collect();
                    assert_eq!(owners, best.1.into_iter().collect::<Vec<_>>());
                    if best.1.is_some() {
                        assert!(s.depth.data()[p] < bg as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn captions_decode_to_objects_left_to_right() {
        let v = Vocab::default();
        for s in samples(100) {
            let mut objs = s.scene.objects.clone();
            objs.sort_by(|a, b| a.cx.total_cmp(&b.cx));
            let want: Vec<(usize, usize)> = objs.iter().map(|o| (o.color, o.shape)).collect();
            assert_eq!(v.parse_caption(&s.caption).unwrap(), want);
            assert!(s.caption.len() <= 2 + 4 * MAX_OBJECTS);
        }
    }

    #[test]
    fn phrases_identify_one_object() {
        let v = Vocab::default();
        for s in samples(200) {
            let phrases: Vec<_> = s.instances.iter().map(|t| t.phrase.clone()).collect();
            for (i, p) in phrases.iter().enumerate() {
                assert!(phrases[i + 1..].iter().all(|q| q != p), "{:?}", v.decode(p));
                assert!(s.instances[i].mask.data().iter().sum::<f32>() >= min_visible(16) as f32);
            }
        }
    }
}
