//! Procedural colored-shape world used as training and evaluation data.
//!
//! Every sample is a pure function of `(seed, index)`. Images are 32×32
//! with one shape near the center; clips are 4 frames of 16×16 with one
//! shape moving 2 px per frame. Programmatic classifiers read attributes
//! back from pixels so generated outputs can be judged.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::VisualArray;
use crate::schedule::{sample_task, MixtureSpec, TaskKind};
use crate::sequence::{Media, PromptTask};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_RADIUS: f64 = 7.0;
pub const VIDEO_SIZE: usize = 16;
pub const VIDEO_FRAMES: usize = 4;
pub const VIDEO_RADIUS: f64 = 3.0;
/// Pixels moved per frame.
pub const VIDEO_SPEED: f64 = 2.0;
/// Pixels moved by a translate edit.
pub const EDIT_SHIFT: f64 = 6.0;
/// A pixel counts as foreground when its brightest channel exceeds this.
pub const FOREGROUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Whether the pixel center offset `(dx, dy)` from the shape center is
    /// inside a shape of radius `r`. Triangles point up.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Unit step in (x, y) with y pointing down.
    pub fn delta(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    pub fn name(self) -> &'static str {
        match self {
            Corner::TopLeft => "top left",
            Corner::TopRight => "top right",
            Corner::BottomLeft => "bottom left",
            Corner::BottomRight => "bottom right",
        }
    }

    /// Shape center for this corner of a square canvas.
    pub fn center(self, size: usize, r: f64) -> (f64, f64) {
        let lo = r + 2.0;
        let hi = size as f64 - r - 2.0;
        match self {
            Corner::TopLeft => (lo, lo),
            Corner::TopRight => (hi, lo),
            Corner::BottomLeft => (lo, hi),
            Corner::BottomRight => (hi, hi),
        }
    }
}

/// One shape on a canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Object {
    fn centered(color: Color, shape: Shape, size: usize, r: f64) -> Self {
        let c = size as f64 / 2.0;
        Object {
            color,
            shape,
            cx: c,
            cy: c,
            r,
        }
    }

    fn moved(self, dir: Direction, by: f64) -> Self {
        let (dx, dy) = dir.delta();
        Object {
            cx: self.cx + dx * by,
            cy: self.cy + dy * by,
            ..self
        }
    }
}

fn draw(v: &mut VisualArray, frame: usize, obj: &Object) {
    for y in 0..v.height {
        for x in 0..v.width {
            let dx = x as f64 + 0.5 - obj.cx;
            let dy = y as f64 + 0.5 - obj.cy;
            if obj.shape.covers(dx, dy, obj.r) {
                v.set_pixel(frame, y, x, obj.color.rgb());
            }
        }
    }
}

/// Single-frame image on a black background.
pub fn render_image(obj: &Object, size: usize) -> VisualArray {
    let mut v = VisualArray::zeros(1, size, size);
    draw(&mut v, 0, obj);
    v
}

/// Clip whose frame `f` shows `obj` moved by `f·speed` along `dir`.
pub fn render_video(obj: &Object, dir: Direction, frames: usize, size: usize) -> VisualArray {
    let mut v = VisualArray::zeros(frames, size, size);
    for f in 0..frames {
        draw(&mut v, f, &obj.moved(dir, f as f64 * VIDEO_SPEED));
    }
    v
}

/// Start position that keeps the whole motion centered on the canvas.
fn motion_start(color: Color, shape: Shape, dir: Direction) -> Object {
    let travel = (VIDEO_FRAMES - 1) as f64 * VIDEO_SPEED;
    Object::centered(color, shape, VIDEO_SIZE, VIDEO_RADIUS).moved(dir, -travel / 2.0)
}

/// Attributes read back from pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reading {
    pub color: Color,
    pub shape: Shape,
    pub centroid: (f64, f64),
    pub pixels: usize,
}

/// Classifies the single shape in frame `f`, or `None` if the frame has
/// fewer than four foreground pixels.
pub fn classify_frame(v: &VisualArray, f: usize) -> Option<Reading> {
    let mut sum = [0.0; 3];
    let (mut sx, mut sy) = (0.0, 0.0);
    let mut n = 0usize;
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..v.height {
        for x in 0..v.width {
            let p = v.pixel(f, y, x);
            if p.iter().cloned().fold(f64::MIN, f64::max) <= FOREGROUND {
                continue;
            }
            for c in 0..3 {
                sum[c] += p[c];
            }
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if n < 4 {
        return None;
    }
    let mean = sum.map(|s| s / n as f64);
    let dist = |c: &Color| {
        let rgb = c.rgb();
        (0..3).map(|i| (rgb[i] - mean[i]).powi(2)).sum::<f64>()
    };
    let color = Color::ALL
        .into_iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        .expect("palette is non-empty");
    let fill = n as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let shape = if fill > 0.9 {
        Shape::Square
    } else if fill > 0.65 {
        Shape::Circle
    } else {
        Shape::Triangle
    };
    Some(Reading {
        color,
        shape,
        centroid: (sx / n as f64, sy / n as f64),
        pixels: n,
    })
}

/// Dominant direction of centroid travel from the first to the last frame;
/// `None` when either end frame is empty or the travel is under one pixel.
pub fn classify_motion(v: &VisualArray) -> Option<Direction> {
    let a = classify_frame(v, 0)?;
    let b = classify_frame(v, v.frames - 1)?;
    let dx = b.centroid.0 - a.centroid.0;
    let dy = b.centroid.1 - a.centroid.1;
    if dx.abs().max(dy.abs()) < 1.0 {
        return None;
    }
    Some(match (dx.abs() >= dy.abs(), dx > 0.0, dy > 0.0) {
        (true, true, _) => Direction::Right,
        (true, false, _) => Direction::Left,
        (false, _, true) => Direction::Down,
        (false, _, false) => Direction::Up,
    })
}

/// Expected output of a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Visual(VisualArray),
    Text(String),
}

/// Ground-truth attributes of the target, for judging generated outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Truth {
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub direction: Option<Direction>,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: TaskKind,
    pub prompt: PromptTask,
    pub media: Media,
    /// Caption, instruction or question. Empty for captioning.
    pub text: String,
    /// Visual inputs in stream order.
    pub conditions: Vec<VisualArray>,
    pub target: Target,
    pub truth: Truth,
}

impl Sample {
    /// Understanding samples that ask a question with a one-word answer.
    pub fn is_qa(&self) -> bool {
        self.prompt == PromptTask::Qa
    }
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.task.name(), self.text)?;
        if let Target::Text(a) = &self.target {
            write!(f, " -> {a:?}")?;
        }
        Ok(())
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> T {
    items[rng.random_range(0..items.len())]
}

fn other_color<R: Rng + ?Sized>(c: Color, rng: &mut R) -> Color {
    let rest: Vec<Color> = Color::ALL.into_iter().filter(|&x| x != c).collect();
    pick(&rest, rng)
}

fn caption(color: Color, shape: Shape) -> String {
    format!("a {} {}", color.name(), shape.name())
}

fn motion_caption(color: Color, shape: Shape, dir: Direction) -> String {
    format!("a {} {} moving {}", color.name(), shape.name(), dir.name())
}

/// Draws one sample of `task`.
pub fn synth_sample<R: Rng + ?Sized>(task: TaskKind, rng: &mut R) -> Sample {
    let color = pick(&Color::ALL, rng);
    let shape = pick(&Shape::ALL, rng);
    let dir = pick(&Direction::ALL, rng);
    let image = |c: Color| render_image(&Object::centered(c, shape, IMAGE_SIZE, IMAGE_RADIUS), IMAGE_SIZE);
    let clip = |c: Color| render_video(&motion_start(c, shape, dir), dir, VIDEO_FRAMES, VIDEO_SIZE);
    let truth = |c: Color, d: Option<Direction>| Truth {
        color: Some(c),
        shape: Some(shape),
        direction: d,
    };
    let gen = |prompt, media, text: String, conditions, target, truth| Sample {
        task,
        prompt,
        media,
        text,
        conditions,
        target: Target::Visual(target),
        truth,
    };
    match task {
        TaskKind::T2I => gen(PromptTask::T2iT2v, Media::Image, caption(color, shape), vec![], image(color), truth(color, None)),
        TaskKind::IEdit => {
            let source = image(color);
            if rng.random_bool(0.5) {
                let to = other_color(color, rng);
                let text = format!("make it {}", to.name());
                gen(PromptTask::X2iX2v, Media::Image, text, vec![source], image(to), truth(to, None))
            } else {
                let obj = Object::centered(color, shape, IMAGE_SIZE, IMAGE_RADIUS).moved(dir, EDIT_SHIFT);
                let text = format!("move it {}", dir.name());
                let target = render_image(&obj, IMAGE_SIZE);
                gen(PromptTask::X2iX2v, Media::Image, text, vec![source], target, truth(color, Some(dir)))
            }
        }
        TaskKind::S2I => {
            let corner = pick(&Corner::ALL, rng);
            let (cx, cy) = corner.center(IMAGE_SIZE, IMAGE_RADIUS);
            let obj = Object {
                cx,
                cy,
                ..Object::centered(color, shape, IMAGE_SIZE, IMAGE_RADIUS)
            };
            let text = format!("put it in the {}", corner.name());
            gen(PromptTask::X2iX2v, Media::Image, text, vec![image(color)], render_image(&obj, IMAGE_SIZE), truth(color, None))
        }
        TaskKind::T2V => {
            let text = motion_caption(color, shape, dir);
            gen(PromptTask::T2iT2v, Media::Video, text, vec![], clip(color), truth(color, Some(dir)))
        }
        TaskKind::I2V => {
            let target = clip(color);
            let first = target.frame(0);
            let text = format!("make it move {}", dir.name());
            gen(PromptTask::X2iX2v, Media::Video, text, vec![first], target, truth(color, Some(dir)))
        }
        TaskKind::VEdit => {
            let to = other_color(color, rng);
            let text = format!("make it {}", to.name());
            gen(PromptTask::X2iX2v, Media::Video, text, vec![clip(color)], clip(to), truth(to, Some(dir)))
        }
        TaskKind::S2V => {
            let reference = render_image(&Object::centered(color, shape, VIDEO_SIZE, VIDEO_RADIUS), VIDEO_SIZE);
            let text = format!("show it moving {}", dir.name());
            gen(PromptTask::X2iX2v, Media::Video, text, vec![reference], clip(color), truth(color, Some(dir)))
        }
        TaskKind::I2T => {
            let (prompt, text, answer) = match rng.random_range(0..3) {
                0 => (PromptTask::Caption, String::new(), caption(color, shape)),
                1 => (PromptTask::Qa, "what color is it?".to_string(), color.name().to_string()),
                _ => (PromptTask::Qa, "what shape is it?".to_string(), shape.name().to_string()),
            };
            understanding(task, prompt, Media::Image, text, vec![image(color)], answer, truth(color, None))
        }
        TaskKind::V2T => {
            let (prompt, text, answer) = match rng.random_range(0..3) {
                0 => (PromptTask::Caption, String::new(), motion_caption(color, shape, dir)),
                1 => (PromptTask::Qa, "which way does it move?".to_string(), dir.name().to_string()),
                _ => (PromptTask::Qa, "what color is it?".to_string(), color.name().to_string()),
            };
            understanding(task, prompt, Media::Video, text, vec![clip(color)], answer, truth(color, Some(dir)))
        }
        TaskKind::X2T => {
            // Half the pairs agree on the asked attribute.
            let same = rng.random_bool(0.5);
            let by_color = rng.random_bool(0.5);
            let (c2, s2) = if by_color {
                (if same { color } else { other_color(color, rng) }, pick(&Shape::ALL, rng))
            } else {
                let s2 = if same {
                    shape
                } else {
                    let rest: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != shape).collect();
                    pick(&rest, rng)
                };
                (pick(&Color::ALL, rng), s2)
            };
            let second = render_image(&Object::centered(c2, s2, IMAGE_SIZE, IMAGE_RADIUS), IMAGE_SIZE);
            let text = format!("are they the same {}?", if by_color { "color" } else { "shape" });
            let answer = if same { "yes" } else { "no" }.to_string();
            understanding(task, PromptTask::Qa, Media::Image, text, vec![image(color), second], answer, Truth::default())
        }
    }
}

fn understanding(
    task: TaskKind,
    prompt: PromptTask,
    media: Media,
    text: String,
    conditions: Vec<VisualArray>,
    answer: String,
    truth: Truth,
) -> Sample {
    Sample {
        task,
        prompt,
        media,
        text,
        conditions,
        target: Target::Text(answer),
        truth,
    }
}

/// Generator for sample `index` of the stream keyed by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample `index` of a mixture stream: the task is drawn from `spec`, then
/// the content, all from one generator keyed by `(seed, index)`.
pub fn sample_at(spec: &MixtureSpec, seed: u64, index: u64) -> Sample {
    let mut rng = sample_rng(seed, index);
    let task = sample_task(spec, &mut rng);
    synth_sample(task, &mut rng)
}

/// Sample `index` of a single-task stream.
pub fn task_sample_at(task: TaskKind, seed: u64, index: u64) -> Sample {
    synth_sample(task, &mut sample_rng(seed, index))
}

/// A visual payload as a flat pixel array with its `(frames, height, width)`
/// layout; pixels are frame-major, then row, column and channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualRecord {
    pub layout: [usize; 3],
    pub data: Vec<f64>,
}

impl From<&VisualArray> for VisualRecord {
    fn from(v: &VisualArray) -> Self {
        VisualRecord {
            layout: [v.frames, v.height, v.width],
            data: v.data.clone(),
        }
    }
}

/// One sample as a self-contained record, for writing datasets to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: TaskKind,
    pub text: String,
    pub conditions: Vec<VisualRecord>,
    pub target_text: Option<String>,
    pub target_visual: Option<VisualRecord>,
    pub color: Option<String>,
    pub shape: Option<String>,
    pub direction: Option<String>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        let (target_text, target_visual) = match &s.target {
            Target::Text(t) => (Some(t.clone()), None),
            Target::Visual(v) => (None, Some(v.into())),
        };
        SampleRecord {
            task: s.task,
            text: s.text.clone(),
            conditions: s.conditions.iter().map(VisualRecord::from).collect(),
            target_text,
            target_visual,
            color: s.truth.color.map(|c| c.name().to_string()),
            shape: s.truth.shape.map(|c| c.name().to_string()),
            direction: s.truth.direction.map(|c| c.name().to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Stage;

    fn visual(t: &Target) -> &VisualArray {
        match t {
            Target::Visual(v) => v,
            Target::Text(_) => panic!("expected a visual target"),
        }
    }

    fn answer(t: &Target) -> &str {
        match t {
            Target::Text(a) => a,
            Target::Visual(_) => panic!("expected a text target"),
        }
    }

    #[test]
    fn classifier_reads_every_rendered_shape() {
        for color in Color::ALL {
            for shape in Shape::ALL {
                let v = render_image(&Object::centered(color, shape, IMAGE_SIZE, IMAGE_RADIUS), IMAGE_SIZE);
                let r = classify_frame(&v, 0).unwrap();
                assert_eq!((r.color, r.shape), (color, shape));
                assert!((r.centroid.0 - 16.0).abs() < 1e-9, "{shape:?} is symmetric in x");
                for dir in Direction::ALL {
                    let clip = render_video(&motion_start(color, shape, dir), dir, VIDEO_FRAMES, VIDEO_SIZE);
                    assert_eq!(classify_motion(&clip), Some(dir));
                    assert_eq!(classify_frame(&clip, 3).unwrap().color, color);
                }
            }
        }
        assert_eq!(classify_frame(&VisualArray::zeros(1, 8, 8), 0), None);
    }

    #[test]
    fn motion_stays_on_canvas() {
        for dir in Direction::ALL {
            let clip = render_video(&motion_start(Color::Red, Shape::Square, dir), dir, VIDEO_FRAMES, VIDEO_SIZE);
            let first = classify_frame(&clip, 0).unwrap();
            for f in 0..VIDEO_FRAMES {
                let r = classify_frame(&clip, f).unwrap();
                assert_eq!(r.pixels, first.pixels, "frame {f} is clipped");
            }
        }
    }

    #[test]
    fn task_schema() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            for task in TaskKind::ALL {
                let s = synth_sample(task, &mut rng);
                assert_eq!(s.task, task);
                let conds = s.conditions.len();
                match task {
                    TaskKind::T2I | TaskKind::T2V => assert_eq!(conds, 0),
                    TaskKind::X2T => assert_eq!(conds, 2),
                    _ => assert_eq!(conds, 1),
                }
                assert_eq!(task.is_generation(), matches!(s.target, Target::Visual(_)));
                let frames = if task.is_video() && task.is_generation() { VIDEO_FRAMES } else { 1 };
                if let Target::Visual(v) = &s.target {
                    assert_eq!(v.frames, frames);
                }
                assert_eq!(s.media == Media::Video, task.is_video(), "{task:?}");
                assert_eq!(s.text.is_empty(), s.prompt == PromptTask::Caption);
            }
        }
    }

    #[test]
    fn edits_follow_the_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let s = synth_sample(TaskKind::IEdit, &mut rng);
            let src = classify_frame(&s.conditions[0], 0).unwrap();
            let out = classify_frame(visual(&s.target), 0).unwrap();
            assert_eq!(src.shape, out.shape);
            if let Some(c) = s.text.strip_prefix("make it ") {
                assert_eq!(Color::parse(c), Some(out.color));
                assert_ne!(src.color, out.color);
                assert_eq!(src.centroid, out.centroid);
            } else {
                let d = Direction::parse(s.text.strip_prefix("move it ").unwrap()).unwrap();
                let (dx, dy) = d.delta();
                assert_eq!(src.color, out.color);
                assert!((out.centroid.0 - src.centroid.0 - dx * EDIT_SHIFT).abs() < 1e-9);
                assert!((out.centroid.1 - src.centroid.1 - dy * EDIT_SHIFT).abs() < 1e-9);
            }
            let v = synth_sample(TaskKind::VEdit, &mut rng);
            let to = Color::parse(v.text.strip_prefix("make it ").unwrap()).unwrap();
            let target = visual(&v.target);
            for f in 0..VIDEO_FRAMES {
                let a = classify_frame(&v.conditions[0], f).unwrap();
                let b = classify_frame(target, f).unwrap();
                assert_eq!((b.color, b.centroid), (to, a.centroid));
            }
            let i2v = synth_sample(TaskKind::I2V, &mut rng);
            assert_eq!(i2v.conditions[0], visual(&i2v.target).frame(0));
            let s2i = synth_sample(TaskKind::S2I, &mut rng);
            let (a, b) = (classify_frame(&s2i.conditions[0], 0).unwrap(), classify_frame(visual(&s2i.target), 0).unwrap());
            assert_eq!((a.color, a.shape), (b.color, b.shape));
        }
    }

    #[test]
    fn answers_match_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s = synth_sample(TaskKind::V2T, &mut rng);
            let clip = &s.conditions[0];
            let seen = classify_frame(clip, 0).unwrap();
            let motion = classify_motion(clip).unwrap();
            let a = answer(&s.target);
            match s.text.as_str() {
                "which way does it move?" => assert_eq!(a, motion.name()),
                "what color is it?" => assert_eq!(a, seen.color.name()),
                _ => assert_eq!(a, motion_caption(seen.color, seen.shape, motion)),
            }
            let s = synth_sample(TaskKind::I2T, &mut rng);
            let seen = classify_frame(&s.conditions[0], 0).unwrap();
            let a = answer(&s.target);
            match s.text.as_str() {
                "what color is it?" => assert_eq!(a, seen.color.name()),
                "what shape is it?" => assert_eq!(a, seen.shape.name()),
                _ => assert_eq!(a, caption(seen.color, seen.shape)),
            }
            let s = synth_sample(TaskKind::X2T, &mut rng);
            let (p, q) = (classify_frame(&s.conditions[0], 0).unwrap(), classify_frame(&s.conditions[1], 0).unwrap());
            let same = if s.text.contains("color") { p.color == q.color } else { p.shape == q.shape };
            assert_eq!(answer(&s.target), if same { "yes" } else { "no" });
        }
    }

    #[test]
    fn redraws_are_identical() {
        let spec = MixtureSpec::for_stage(Stage::Ct2);
        for i in 0..50 {
            assert_eq!(sample_at(&spec, 9, i), sample_at(&spec, 9, i));
        }
        let a: Vec<_> = (0..50).map(|i| sample_at(&spec, 9, i)).collect();
        let b: Vec<_> = (0..50).map(|i| sample_at(&spec, 10, i)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn stream_frequencies_follow_the_mixture() {
        for stage in [Stage::Pt, Stage::Ct3] {
            let spec = MixtureSpec::for_stage(stage);
            let n = 20_000;
            let mut counts = std::collections::HashMap::new();
            for i in 0..n {
                let mut rng = sample_rng(1, i);
                *counts.entry(sample_task(&spec, &mut rng)).or_insert(0usize) += 1;
            }
            let l1: f64 = spec
                .probabilities()
                .iter()
                .map(|(t, p)| (counts.get(t).copied().unwrap_or(0) as f64 / n as f64 - p).abs())
                .sum();
            assert!(l1 < 0.03, "{stage}: {l1}");
        }
    }
}
