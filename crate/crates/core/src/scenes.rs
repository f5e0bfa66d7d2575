//! Toy scenes of colored objects with boxes, captioned by spatial templates.
//!
//! Image y grows downward, so "under" means larger y.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::RegionSet;
use crate::error::{GatError, Result};
use crate::tensor::Tensor;

pub const CATEGORIES: [&str; 8] = ["box", "ball", "cup", "chair", "dog", "cat", "table", "lamp"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const FUNCTION_WORDS: [&str; 5] = ["a", "the", "of", "than", "is"];

const MAX_ATTEMPTS: usize = 100;
/// Prototypes do not depend on the dataset seed.
const PROTOTYPE_SEED: u64 = 0x5eed_0f_c0105;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Under,
    Inside,
    LargerThan,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Under,
        Relation::Inside,
        Relation::LargerThan,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Above => "above",
            Relation::Under => "under",
            Relation::Inside => "inside",
            Relation::LargerThan => "larger_than",
        }
    }

    pub fn from_label(s: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.label() == s)
    }

    /// The caption word that identifies the relation.
    pub fn word(self) -> &'static str {
        self.phrase()[0]
    }

    pub fn from_word(w: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.word() == w)
    }

    pub fn phrase(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Under => &["under"],
            Relation::Inside => &["inside"],
            Relation::LargerThan => &["larger", "than"],
        }
    }

    pub fn antonym(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Under,
            Relation::Under => Relation::Above,
            Relation::Inside => Relation::LargerThan,
            Relation::LargerThan => Relation::Inside,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        BBox::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Non-degenerate and inside the unit square.
    pub fn is_valid(&self) -> bool {
        let b = self.to_array();
        b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn strictly_inside(&self, outer: &BBox) -> bool {
        self.x_min > outer.x_min
            && self.y_min > outer.y_min
            && self.x_max < outer.x_max
            && self.y_max < outer.y_max
    }

    fn x_overlaps(&self, other: &BBox) -> bool {
        self.x_min <= other.x_max && other.x_min <= self.x_max
    }
}

fn horizontal(a: &BBox, b: &BBox) -> Relation {
    if a.center().0 <= b.center().0 {
        Relation::LeftOf
    } else {
        Relation::RightOf
    }
}

/// Relation of `a` to `b`. Priority: inside, then vertical (only for boxes
/// sharing an x-range), then horizontal (x-ranges disjoint), then size.
pub fn relation_oracle(a: &BBox, b: &BBox) -> Relation {
    if a.strictly_inside(b) {
        return Relation::Inside;
    }
    if a.x_overlaps(b) {
        if a.y_min > b.y_max {
            return Relation::Under;
        }
        if a.y_max < b.y_min {
            return Relation::Above;
        }
        if a.area() > b.area() {
            return Relation::LargerThan;
        }
    }
    horizontal(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub color: usize,
    pub bbox: BBox,
}

impl SceneObject {
    pub fn mention(&self) -> [&'static str; 2] {
        [COLORS[self.color], CATEGORIES[self.category]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relation: Relation,
    pub subject: usize,
    pub object: usize,
}

impl SceneSpec {
    /// Index of the object named `color category`.
    pub fn find(&self, color: &str, category: &str) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| COLORS[o.color] == color && CATEGORIES[o.category] == category)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPair {
    pub regions: RegionSet,
    pub references: Vec<Vec<String>>,
    /// Object labels and the declared relation, when known.
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateParams {
    pub seed: u64,
    pub n_scenes: usize,
    /// Inclusive object-count range.
    pub objects: (usize, usize),
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Adds a third reference naming the object first.
    pub reversed_reference: bool,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            seed: 0,
            n_scenes: 100,
            objects: (2, 3),
            feature_dim: 16,
            noise_sigma: 0.1,
            reversed_reference: true,
        }
    }
}

/// Every word the templates can produce, in a fixed order.
pub fn scene_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = FUNCTION_WORDS.to_vec();
    for r in Relation::ALL {
        words.push(r.word());
    }
    words.extend(COLORS);
    words.extend(CATEGORIES);
    words
}

/// Fixed appearance vector for a (category, color) pair: a category
/// direction plus a color direction, both unit-variance Gaussian.
pub fn prototype(category: usize, color: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED ^ d as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let table: Vec<Vec<f64>> = (0..CATEGORIES.len() + COLORS.len())
        .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let cat = &table[category];
    let col = &table[CATEGORIES.len() + color];
    cat.iter().zip(col).map(|(a, b)| a + b).collect()
}

fn random_box(rng: &mut ChaCha8Rng, w: (f64, f64), h: (f64, f64)) -> BBox {
    let bw = rng.random_range(w.0..w.1);
    let bh = rng.random_range(h.0..h.1);
    let x = rng.random_range(0.01..0.99 - bw);
    let y = rng.random_range(0.01..0.99 - bh);
    BBox::new(x, y, x + bw, y + bh)
}

fn centered(cx: f64, w: f64, y0: f64, h: f64) -> BBox {
    let x = (cx - w / 2.0).clamp(0.01, 0.99 - w);
    BBox::new(x, y0, x + w, y0 + h)
}

/// Proposes a `(subject, object)` box pair aimed at `rel`; the caller
/// checks the oracle.
fn propose(rel: Relation, rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    match rel {
        Relation::LeftOf | Relation::RightOf => {
            let a = random_box(rng, (0.1, 0.35), (0.1, 0.4));
            let b = random_box(rng, (0.1, 0.35), (0.1, 0.4));
            (a, b)
        }
        Relation::Above | Relation::Under => {
            let cx = rng.random_range(0.25..0.75);
            let (wa, wb) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
            let (ha, hb): (f64, f64) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3));
            let gap: f64 = rng.random_range(0.02..(0.97 - ha - hb).max(0.03));
            let top = rng.random_range(0.01..(0.99 - ha - hb - gap).max(0.011));
            let (ya, yb) = if rel == Relation::Above {
                (top, top + ha + gap)
            } else {
                (top + hb + gap, top)
            };
            let dx = rng.random_range(-0.05..0.05);
            (centered(cx + dx, wa, ya, ha), centered(cx, wb, yb, hb))
        }
        Relation::Inside => {
            let b = random_box(rng, (0.35, 0.7), (0.35, 0.7));
            let wa = (b.x_max - b.x_min) * rng.random_range(0.2..0.6);
            let ha = (b.y_max - b.y_min) * rng.random_range(0.2..0.6);
            let x = rng.random_range(b.x_min + 0.01..b.x_max - wa - 0.01);
            let y = rng.random_range(b.y_min + 0.01..b.y_max - ha - 0.01);
            (BBox::new(x, y, x + wa, y + ha), b)
        }
        Relation::LargerThan => {
            let b = random_box(rng, (0.1, 0.25), (0.1, 0.25));
            let (wa, ha) = (rng.random_range(0.3..0.5), rng.random_range(0.3..0.5));
            let (cx, cy) = b.center();
            let cx = cx + rng.random_range(-0.15..0.15);
            let cy = cy + rng.random_range(-0.15..0.15);
            let x = (cx - wa / 2.0).clamp(0.01, 0.99 - wa);
            let y = (cy - ha / 2.0).clamp(0.01, 0.99 - ha);
            (BBox::new(x, y, x + wa, y + ha), b)
        }
    }
}

fn place(rel: Relation, rng: &mut ChaCha8Rng) -> Result<(BBox, BBox)> {
    for _ in 0..MAX_ATTEMPTS {
        let (a, b) = propose(rel, rng);
        if a.is_valid() && b.is_valid() && relation_oracle(&a, &b) == rel {
            return Ok((a, b));
        }
    }
    Err(GatError::Generation(format!(
        "no placement for {} after {MAX_ATTEMPTS} attempts",
        rel.label()
    )))
}

fn sentence(parts: &[&[&str]]) -> Vec<String> {
    parts.iter().flat_map(|p| p.iter().map(|w| w.to_string())).collect()
}

/// Template captions for a scene; every one is true of the boxes.
pub fn references(scene: &SceneSpec, reversed: bool) -> Vec<Vec<String>> {
    let s = &scene.objects[scene.subject];
    let o = &scene.objects[scene.object];
    let phrase = scene.relation.phrase();
    let mut refs = vec![
        sentence(&[&["a"], &s.mention(), phrase, &["a"], &o.mention()]),
        sentence(&[&["the"], &s.mention(), &["is"], phrase, &["the"], &o.mention()]),
    ];
    if reversed {
        let back = relation_oracle(&o.bbox, &s.bbox).phrase();
        refs.push(sentence(&[&["a"], &o.mention(), back, &["a"], &s.mention()]));
    }
    refs
}

fn region_set(scene: &SceneSpec, d: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<RegionSet> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = scene.objects.len();
    let mut feats = Vec::with_capacity(n * d);
    let mut boxes = Vec::with_capacity(n);
    for o in &scene.objects {
        let proto = prototype(o.category, o.color, d);
        feats.extend(proto.iter().map(|p| p + noise * normal.sample(rng)));
        boxes.push(o.bbox.to_array());
    }
    RegionSet::from_boxes(Tensor::new(&[n, d], feats)?, &boxes)
}

fn generate_scene(params: &GenerateParams, rng: &mut ChaCha8Rng) -> Result<CaptionPair> {
    let n = rng.random_range(params.objects.0..=params.objects.1);
    let mut kinds: Vec<(usize, usize)> = (0..CATEGORIES.len())
        .flat_map(|c| (0..COLORS.len()).map(move |k| (c, k)))
        .collect();
    kinds.shuffle(rng);
    kinds.truncate(n);

    let relation = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
    let (a, b) = place(relation, rng)?;
    let mut boxes = vec![a, b];
    for _ in 2..n {
        boxes.push(random_box(rng, (0.1, 0.35), (0.1, 0.35)));
    }
    let mut objects: Vec<SceneObject> = kinds
        .iter()
        .zip(&boxes)
        .map(|(&(category, color), &bbox)| SceneObject { category, color, bbox })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    objects = order.iter().map(|&i| objects[i]).collect();
    let subject = order.iter().position(|&i| i == 0).expect("permutation");
    let object = order.iter().position(|&i| i == 1).expect("permutation");

    let scene = SceneSpec { objects, relation, subject, object };
    let regions = region_set(&scene, params.feature_dim, params.noise_sigma, rng)?;
    Ok(CaptionPair {
        regions,
        references: references(&scene, params.reversed_reference),
        scene: Some(scene),
    })
}

/// Deterministic scenes: scene `i` draws from its own stream derived from
/// `(seed, i)`.
pub fn generate(params: &GenerateParams) -> Result<Vec<CaptionPair>> {
    if params.n_scenes == 0 {
        return Err(GatError::Config("n_scenes must be at least 1".into()));
    }
    if params.feature_dim < 8 {
        return Err(GatError::Config("feature_dim must be at least 8".into()));
    }
    let (lo, hi) = params.objects;
    if lo < 2 || hi < lo || hi > CATEGORIES.len() * COLORS.len() {
        return Err(GatError::Config(format!("bad object range {lo}..={hi}")));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(GatError::Config("noise_sigma must be finite and nonnegative".into()));
    }
    (0..params.n_scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            generate_scene(params, &mut rng)
        })
        .collect()
}

/// The relation a caption asserts, resolved against the scene: exactly one
/// relation word, a `color category` mention right before it and one after.
pub fn caption_claim<S: AsRef<str>>(caption: &[S], scene: &SceneSpec) -> Option<(usize, Relation, usize)> {
    let words: Vec<&str> = caption.iter().map(AsRef::as_ref).collect();
    let mut hits = words
        .iter()
        .enumerate()
        .filter_map(|(i, w)| Relation::from_word(w).map(|r| (i, r)));
    let (at, rel) = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    let mention = |i: usize| -> Option<usize> { scene.find(words[i], words[i + 1]) };
    let subject = (0..at.saturating_sub(1)).rev().find_map(mention)?;
    let object = (at + 1..words.len().saturating_sub(1)).find_map(mention)?;
    Some((subject, rel, object))
}

/// True when the caption names two distinct scene objects and the relation
/// word between them holds for their boxes.
pub fn caption_is_spatially_correct<S: AsRef<str>>(caption: &[S], scene: &SceneSpec) -> bool {
    match caption_claim(caption, scene) {
        Some((s, rel, o)) if s != o => {
            relation_oracle(&scene.objects[s].bbox, &scene.objects[o].bbox) == rel
        }
        _ => false,
    }
}

/// Fraction of captions whose relation claim is geometrically true.
pub fn spatial_accuracy<S: AsRef<str>>(predictions: &[Vec<S>], scenes: &[SceneSpec]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(scenes)
        .filter(|(p, s)| caption_is_spatially_correct(p, s))
        .count();
    correct as f64 / predictions.len() as f64
}
