//! Procedural datasets: colored shapes on a black canvas with templated text.
//!
//! A scene holds one to three objects, each in its own quadrant of the canvas.
//! Every label (caption, answer, truth value, class) is computed from the scene
//! that was rendered, so labels agree with the pixels by construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::RawImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

pub const COUNT_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

/// Closed answer set of the question-answering task.
pub const VQA_ANSWERS: [&str; 12] = [
    "zero", "one", "two", "three", "red", "green", "blue", "circle", "square", "triangle", "yes", "no",
];

/// Shape × color classes of the image classification task.
pub const IMGCLS_CLASSES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
    pub dx: i32,
    pub dy: i32,
}

/// Objects sorted by quadrant; at most one per quadrant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.objects.len()
    }

    pub fn count_color(&self, c: Color) -> usize {
        self.objects.iter().filter(|o| o.color == c).count()
    }

    pub fn count_shape(&self, s: ShapeKind) -> usize {
        self.objects.iter().filter(|o| o.shape == s).count()
    }

    pub fn contains(&self, s: ShapeKind, c: Color) -> bool {
        self.objects.iter().any(|o| o.shape == s && o.color == c)
    }

    /// Groups of identical objects, ordered by shape then color, e.g.
    /// "two red circles and one blue square". Scenes with the same objects get
    /// the same caption wherever the objects sit.
    pub fn caption(&self) -> String {
        let mut groups: Vec<(ShapeKind, Color, usize)> = Vec::new();
        for o in &self.objects {
            match groups.iter_mut().find(|g| g.0 == o.shape && g.1 == o.color) {
                Some(g) => g.2 += 1,
                None => groups.push((o.shape, o.color, 1)),
            }
        }
        groups.sort();
        groups
            .iter()
            .map(|&(s, c, n)| {
                let noun = if n == 1 { s.word() } else { s.plural() };
                format!("{} {} {}", COUNT_WORDS[n], c.word(), noun)
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

fn inside(shape: ShapeKind, px: f32, py: f32, cx: f32, cy: f32, r: f32) -> bool {
    match shape {
        ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
        ShapeKind::Square => (px - cx).abs() <= 0.8 * r && (py - cy).abs() <= 0.8 * r,
        ShapeKind::Triangle => {
            let top = cy - r;
            let bottom = cy + 0.8 * r;
            if py < top || py > bottom {
                return false;
            }
            let t = (py - top) / (bottom - top);
            (px - cx).abs() <= t * r
        }
    }
}

/// Draws a scene on a black `size × size` canvas.
pub fn render(scene: &Scene, size: usize) -> RawImage {
    let mut img = RawImage::blank(size, size);
    let half = size as f32 / 2.0;
    let r = 0.34 * half;
    for o in &scene.objects {
        let qx = (o.quadrant % 2) as f32;
        let qy = (o.quadrant / 2) as f32;
        let cx = qx * half + half / 2.0 + o.dx as f32;
        let cy = qy * half + half / 2.0 + o.dy as f32;
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil() as usize).min(size);
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(o.shape, x as f32 + 0.5, y as f32 + 0.5, cx, cy, r) {
                    img.set_pixel(y, x, o.color.rgb());
                }
            }
        }
    }
    img
}

/// Uniform noise quantised to multiples of 1/255.
pub fn noise_image(rng: &mut impl Rng, size: usize) -> RawImage {
    let pixels = (0..size * size * 3)
        .map(|_| rng.random_range(0..=255u32) as f32 / 255.0)
        .collect();
    RawImage::new(size, size, 3, pixels).expect("extent matches")
}

fn random_object(rng: &mut impl Rng, quadrant: usize) -> Object {
    Object {
        shape: SHAPES[rng.random_range(0..3)],
        color: COLORS[rng.random_range(0..3)],
        quadrant,
        dx: rng.random_range(-1..=1),
        dy: rng.random_range(-1..=1),
    }
}

fn random_quadrants(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut q = sample(rng, 4, n).into_vec();
    q.sort_unstable();
    q
}

pub fn random_scene(rng: &mut impl Rng) -> Scene {
    let n = rng.random_range(1..=3);
    let objects = random_quadrants(rng, n)
        .into_iter()
        .map(|q| random_object(rng, q))
        .collect();
    Scene { objects }
}

/// One to three objects that all share `class`'s shape and color.
pub fn class_scene(rng: &mut impl Rng, class: usize) -> Scene {
    let shape = SHAPES[class / 3];
    let color = COLORS[class % 3];
    let n = rng.random_range(1..=3);
    let objects = random_quadrants(rng, n)
        .into_iter()
        .map(|q| Object {
            shape,
            color,
            quadrant: q,
            dx: rng.random_range(-1..=1),
            dy: rng.random_range(-1..=1),
        })
        .collect();
    Scene { objects }
}

pub fn class_label(shape: ShapeKind, color: Color) -> usize {
    let s = SHAPES.iter().position(|&x| x == shape).unwrap();
    let c = COLORS.iter().position(|&x| x == color).unwrap();
    s * 3 + c
}

pub fn answer_id(word: &str) -> usize {
    VQA_ANSWERS.iter().position(|&a| a == word).expect("answer in closed set")
}

/// A question about `scene` and the index of its answer in [`VQA_ANSWERS`].
pub fn ask(scene: &Scene, rng: &mut impl Rng) -> (String, usize) {
    loop {
        match rng.random_range(0..5) {
            0 => return ("how many shapes".into(), answer_id(COUNT_WORDS[scene.count()])),
            1 => {
                let c = COLORS[rng.random_range(0..3)];
                let q = format!("how many {} shapes", c.word());
                return (q, answer_id(COUNT_WORDS[scene.count_color(c)]));
            }
            2 => {
                let (s, c) = if rng.random_bool(0.5) {
                    let o = scene.objects[rng.random_range(0..scene.count())];
                    (o.shape, o.color)
                } else {
                    (SHAPES[rng.random_range(0..3)], COLORS[rng.random_range(0..3)])
                };
                let q = format!("is there a {} {}", c.word(), s.word());
                let a = if scene.contains(s, c) { "yes" } else { "no" };
                return (q, answer_id(a));
            }
            3 => {
                let o = scene.objects[rng.random_range(0..scene.count())];
                if scene.count_shape(o.shape) == 1 {
                    let q = format!("what color is the {}", o.shape.word());
                    return (q, answer_id(o.color.word()));
                }
            }
            _ => {
                let o = scene.objects[rng.random_range(0..scene.count())];
                if scene.count_color(o.color) == 1 {
                    let q = format!("what shape is the {} object", o.color.word());
                    return (q, answer_id(o.shape.word()));
                }
            }
        }
    }
}

/// Statements comparing the shape counts of a left and a right image.
pub const NLVR_STATEMENTS: [&str; 4] = [
    "the left image has more shapes",
    "the left image has fewer shapes",
    "the right image has more shapes",
    "the right image has fewer shapes",
];

pub fn nlvr_truth(statement: usize, left: usize, right: usize) -> bool {
    match statement {
        0 => left > right,
        1 => left < right,
        2 => right > left,
        _ => right < left,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticTask {
    Pairs,
    Images,
    Texts,
    Vqa,
    Nlvr,
    Retrieval,
    ImgCls,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 7] = [
        SyntheticTask::Pairs,
        SyntheticTask::Images,
        SyntheticTask::Texts,
        SyntheticTask::Vqa,
        SyntheticTask::Nlvr,
        SyntheticTask::Retrieval,
        SyntheticTask::ImgCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Pairs => "pairs",
            SyntheticTask::Images => "images",
            SyntheticTask::Texts => "texts",
            SyntheticTask::Vqa => "vqa",
            SyntheticTask::Nlvr => "nlvr",
            SyntheticTask::Retrieval => "retrieval",
            SyntheticTask::ImgCls => "imgcls",
        }
    }

    fn salt(self) -> u64 {
        SyntheticTask::ALL.iter().position(|&t| t == self).unwrap() as u64 + 1
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Pair { image: RawImage, caption: String },
    Image { image: RawImage },
    Text { text: String },
    Vqa { image: RawImage, question: String, answer: usize },
    Nlvr { left: RawImage, right: RawImage, statement: String, label: bool },
    ImgCls { image: RawImage, label: usize },
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for item `index` of `task` under `seed`.
pub fn item_rng(seed: u64, task: SyntheticTask, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index.wrapping_mul(8).wrapping_add(task.salt()))))
}

/// Item `index` of a task; a pure function of `(seed, task, index)`.
///
/// `Retrieval` items are plain pairs here; [`gen_synthetic`] additionally
/// makes their captions distinct.
pub fn generate_item(seed: u64, task: SyntheticTask, index: u64, size: usize) -> Sample {
    let mut rng = item_rng(seed, task, index);
    match task {
        SyntheticTask::Pairs | SyntheticTask::Retrieval => {
            let scene = random_scene(&mut rng);
            Sample::Pair {
                image: render(&scene, size),
                caption: scene.caption(),
            }
        }
        SyntheticTask::Images => Sample::Image {
            image: render(&random_scene(&mut rng), size),
        },
        SyntheticTask::Texts => Sample::Text {
            text: random_scene(&mut rng).caption(),
        },
        SyntheticTask::Vqa => {
            let scene = random_scene(&mut rng);
            let (question, answer) = ask(&scene, &mut rng);
            Sample::Vqa {
                image: render(&scene, size),
                question,
                answer,
            }
        }
        SyntheticTask::Nlvr => {
            let want = rng.random_bool(0.5);
            loop {
                let left = random_scene(&mut rng);
                let right = random_scene(&mut rng);
                let s = rng.random_range(0..NLVR_STATEMENTS.len());
                if nlvr_truth(s, left.count(), right.count()) == want {
                    return Sample::Nlvr {
                        left: render(&left, size),
                        right: render(&right, size),
                        statement: NLVR_STATEMENTS[s].into(),
                        label: want,
                    };
                }
            }
        }
        SyntheticTask::ImgCls => {
            let label = rng.random_range(0..IMGCLS_CLASSES);
            Sample::ImgCls {
                image: render(&class_scene(&mut rng, label), size),
                label,
            }
        }
    }
}

/// Number of distinct captions, the most retrieval items one dataset can hold.
pub const DISTINCT_CAPTIONS: usize = 9 + 45 + 165;

/// `n` items of `task`, deterministic in `seed`.
pub fn gen_synthetic(seed: u64, n: usize, task: SyntheticTask, size: usize) -> Result<Vec<Sample>> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::Config(format!("canvas size {size} must be even and at least 16")));
    }
    if task != SyntheticTask::Retrieval {
        return Ok((0..n as u64).map(|i| generate_item(seed, task, i, size)).collect());
    }
    if n > DISTINCT_CAPTIONS {
        return Err(Error::Config(format!(
            "retrieval datasets hold at most {DISTINCT_CAPTIONS} distinct captions, asked for {n}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut index = 0u64;
    while out.len() < n {
        let mut rng = item_rng(seed, task, index);
        index += 1;
        let scene = random_scene(&mut rng);
        if seen.insert(scene.caption()) {
            out.push(Sample::Pair {
                image: render(&scene, size),
                caption: scene.caption(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_follow_template() {
        let o = |shape, color, quadrant| Object {
            shape,
            color,
            quadrant,
            dx: 0,
            dy: 0,
        };
        let s = Scene {
            objects: vec![
                o(ShapeKind::Circle, Color::Red, 0),
                o(ShapeKind::Square, Color::Blue, 1),
                o(ShapeKind::Circle, Color::Red, 3),
            ],
        };
        assert_eq!(s.caption(), "two red circles and one blue square");
    }

    #[test]
    fn same_seed_same_data() {
        for task in SyntheticTask::ALL {
            assert_eq!(gen_synthetic(7, 20, task, 32).unwrap(), gen_synthetic(7, 20, task, 32).unwrap());
        }
        assert_ne!(
            gen_synthetic(7, 5, SyntheticTask::Pairs, 32).unwrap(),
            gen_synthetic(8, 5, SyntheticTask::Pairs, 32).unwrap()
        );
    }

    #[test]
    fn retrieval_captions_distinct() {
        let items = gen_synthetic(3, 64, SyntheticTask::Retrieval, 32).unwrap();
        let mut caps: Vec<_> = items
            .iter()
            .map(|s| match s {
                Sample::Pair { caption, .. } => caption.clone(),
                _ => unreachable!(),
            })
            .collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 64);
    }

    #[test]
    fn imgcls_has_nine_labels() {
        let items = gen_synthetic(1, 400, SyntheticTask::ImgCls, 32).unwrap();
        let mut labels: Vec<usize> = items
            .iter()
            .map(|s| match s {
                Sample::ImgCls { label, .. } => *label,
                _ => unreachable!(),
            })
            .collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (0..IMGCLS_CLASSES).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_task_is_usage_error() {
        assert!(matches!("segmentation".parse::<SyntheticTask>(), Err(Error::Usage(_))));
        assert_eq!("nlvr".parse::<SyntheticTask>().unwrap(), SyntheticTask::Nlvr);
    }

    #[test]
    fn pixels_are_byte_exact() {
        let img = render(&random_scene(&mut item_rng(0, SyntheticTask::Pairs, 0)), 32);
        assert!(img.pixels.iter().all(|&p| p == 0.0 || p == 1.0));
    }
}
