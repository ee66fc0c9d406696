//! Synthetic micro-worlds standing in for images, audio clips and videos.
//!
//! Every payload has a fixed template grammar for captions and questions and
//! a ground-truth oracle ([`answer_question`]) that re-derives answers from
//! the scene record alone.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Modality, Sample, TaskDescriptor, TaskType};
use crate::vocab::normalize;

pub const GRID: u8 = 4;
pub const MAX_OBJECTS: usize = 3;
pub const AUDIO_EVENTS: usize = 4;
pub const VIDEO_FRAMES: usize = 4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }
        }
    };
}

word_enum!(Color { Red => "red", Blue => "blue", Green => "green", Yellow => "yellow" });
word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Star => "star" });
word_enum!(Event { Bark => "bark", Horn => "horn", Bell => "bell", Splash => "splash" });
word_enum!(Loudness { Soft => "soft", Loud => "loud" });
word_enum!(Direction { Up => "up", Down => "down", Left => "left", Right => "right" });

pub const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    pub row: u8,
    pub col: u8,
}

impl Object {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// A 4×4 grid holding 1–3 objects with unique colors, shapes and cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageScene {
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SoundEvent {
    pub event: Event,
    pub loudness: Loudness,
}

impl SoundEvent {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.loudness.word(), self.event.word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AudioClip {
    pub events: Vec<SoundEvent>,
}

/// Four frames of the same object set; each object moves one cell per frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoClip {
    pub frames: Vec<ImageScene>,
}

/// Opaque modality input `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Image(ImageScene),
    Audio(AudioClip),
    Video(VideoClip),
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Payload::Image(_) => Modality::Image,
            Payload::Audio(_) => Modality::Audio,
            Payload::Video(_) => Modality::Video,
        }
    }

    /// Canonical JSON used for scene identity and serialization.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("payload serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Payload::Image(s) => validate_image(s),
            Payload::Audio(a) => {
                if a.events.len() != AUDIO_EVENTS {
                    return Err(Error::Malformed(format!(
                        "audio clip has {} events",
                        a.events.len()
                    )));
                }
                Ok(())
            }
            Payload::Video(v) => {
                if v.frames.len() != VIDEO_FRAMES {
                    return Err(Error::Malformed(format!(
                        "video has {} frames",
                        v.frames.len()
                    )));
                }
                for f in &v.frames {
                    validate_image(f)?;
                }
                let first = &v.frames[0];
                for f in &v.frames[1..] {
                    if f.objects.len() != first.objects.len()
                        || f.objects
                            .iter()
                            .zip(&first.objects)
                            .any(|(a, b)| a.color != b.color || a.shape != b.shape)
                    {
                        return Err(Error::Malformed("video frames change object set".into()));
                    }
                }
                for i in 0..first.objects.len() {
                    motion_of(v, i).ok_or_else(|| {
                        Error::Malformed(format!("object {i} does not move one cell per frame"))
                    })?;
                }
                Ok(())
            }
        }
    }
}

fn validate_image(s: &ImageScene) -> Result<()> {
    let n = s.objects.len();
    if !(1..=MAX_OBJECTS).contains(&n) {
        return Err(Error::Malformed(format!("scene has {n} objects")));
    }
    let cells: BTreeSet<_> = s.objects.iter().map(|o| (o.row, o.col)).collect();
    let colors: BTreeSet<_> = s.objects.iter().map(|o| o.color).collect();
    let shapes: BTreeSet<_> = s.objects.iter().map(|o| o.shape).collect();
    if cells.len() != n || colors.len() != n || shapes.len() != n {
        return Err(Error::Malformed("scene objects must have unique cells, colors and shapes".into()));
    }
    if s.objects.iter().any(|o| o.row >= GRID || o.col >= GRID) {
        return Err(Error::Malformed("object outside the grid".into()));
    }
    Ok(())
}

/// Direction of object `i` across the video, if it moves one cell per frame.
pub fn motion_of(v: &VideoClip, i: usize) -> Option<Direction> {
    let a = v.frames.first()?.objects.get(i)?;
    let b = v.frames.get(1)?.objects.get(i)?;
    let dir = match (b.row as i32 - a.row as i32, b.col as i32 - a.col as i32) {
        (-1, 0) => Direction::Up,
        (1, 0) => Direction::Down,
        (0, -1) => Direction::Left,
        (0, 1) => Direction::Right,
        _ => return None,
    };
    for w in v.frames.windows(2) {
        let (p, q) = (w[0].objects.get(i)?, w[1].objects.get(i)?);
        let step = (q.row as i32 - p.row as i32, q.col as i32 - p.col as i32);
        if step != delta(dir) {
            return None;
        }
    }
    Some(dir)
}

fn delta(d: Direction) -> (i32, i32) {
    match d {
        Direction::Up => (-1, 0),
        Direction::Down => (1, 0),
        Direction::Left => (0, -1),
        Direction::Right => (0, 1),
    }
}

/// Spatial relation of `a` with respect to `b`.
pub fn relation(a: &Object, b: &Object) -> &'static str {
    if a.row < b.row {
        "above"
    } else if a.row > b.row {
        "below"
    } else if a.col < b.col {
        "left of"
    } else {
        "right of"
    }
}

pub const RELATIONS: [&str; 4] = ["above", "below", "left of", "right of"];

// ── generation ──────────────────────────────────────────────────────────────

fn distinct<T: Copy>(all: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = all.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v
}

fn random_image(rng: &mut ChaCha8Rng) -> ImageScene {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let colors = distinct(Color::ALL, n, rng);
    let shapes = distinct(Shape::ALL, n, rng);
    let cells: Vec<(u8, u8)> = (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).collect();
    let cells = distinct(&cells, n, rng);
    ImageScene {
        objects: (0..n)
            .map(|i| Object {
                color: colors[i],
                shape: shapes[i],
                row: cells[i].0,
                col: cells[i].1,
            })
            .collect(),
    }
}

fn random_audio(rng: &mut ChaCha8Rng) -> AudioClip {
    AudioClip {
        events: (0..AUDIO_EVENTS)
            .map(|_| SoundEvent {
                event: *Event::ALL.choose(rng).unwrap(),
                loudness: *Loudness::ALL.choose(rng).unwrap(),
            })
            .collect(),
    }
}

fn random_video(rng: &mut ChaCha8Rng) -> VideoClip {
    let last = GRID - 1;
    loop {
        let n = rng.gen_range(1..=MAX_OBJECTS);
        let colors = distinct(Color::ALL, n, rng);
        let shapes = distinct(Shape::ALL, n, rng);
        let starts: Vec<(Direction, u8, u8)> = (0..n)
            .map(|_| {
                let dir = *Direction::ALL.choose(rng).unwrap();
                let free = rng.gen_range(0..GRID);
                match dir {
                    Direction::Up => (dir, last, free),
                    Direction::Down => (dir, 0, free),
                    Direction::Left => (dir, free, last),
                    Direction::Right => (dir, free, 0),
                }
            })
            .collect();
        let frames: Vec<ImageScene> = (0..VIDEO_FRAMES as i32)
            .map(|t| ImageScene {
                objects: (0..n)
                    .map(|i| {
                        let (dir, r, c) = starts[i];
                        let (dr, dc) = delta(dir);
                        Object {
                            color: colors[i],
                            shape: shapes[i],
                            row: (r as i32 + dr * t) as u8,
                            col: (c as i32 + dc * t) as u8,
                        }
                    })
                    .collect(),
            })
            .collect();
        let clip = VideoClip { frames };
        if clip.frames.iter().all(|f| validate_image(f).is_ok()) {
            return clip;
        }
    }
}

fn scene_from_rng(modality: Modality, rng: &mut ChaCha8Rng) -> Payload {
    match modality {
        Modality::Image => Payload::Image(random_image(rng)),
        Modality::Audio => Payload::Audio(random_audio(rng)),
        Modality::Video => Payload::Video(random_video(rng)),
    }
}

/// Deterministic scene for `(modality, seed)`.
pub fn generate_scene(modality: Modality, seed: u64) -> Payload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene_from_rng(modality, &mut rng)
}

// ── captions ────────────────────────────────────────────────────────────────

pub fn render_caption(payload: &Payload) -> String {
    match payload {
        Payload::Image(s) => image_caption(s),
        Payload::Audio(a) => a
            .events
            .iter()
            .map(|e| format!("a {}", e.phrase()))
            .collect::<Vec<_>>()
            .join(" then "),
        Payload::Video(v) => v.frames[0]
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let dir = motion_of(v, i).expect("valid video");
                format!("a {} moves {}", o.phrase(), dir.word())
            })
            .collect::<Vec<_>>()
            .join(" and "),
    }
}

fn image_caption(s: &ImageScene) -> String {
    let o = &s.objects;
    match o.len() {
        1 => format!("a {}", o[0].phrase()),
        2 => format!("a {} {} a {}", o[0].phrase(), relation(&o[0], &o[1]), o[1].phrase()),
        _ => format!(
            "a {} {} a {} and a {}",
            o[0].phrase(),
            relation(&o[0], &o[1]),
            o[1].phrase(),
            o[2].phrase()
        ),
    }
}

/// The captioning instruction for a modality ("describe the image").
pub fn caption_instruction(m: Modality) -> String {
    format!("describe the {}", m.word())
}

// ── questions ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaKind {
    /// "what color is the <shape> ?"
    ColorOf(usize),
    /// "what shape is the <color> object ?"
    ShapeOf(usize),
    /// "what is <relation> a <object> ?" about object `subject`.
    Relation { subject: usize, anchor: usize },
    /// "what is the <ordinal> sound ?"
    SoundAt(usize),
    /// "how loud is the <ordinal> sound ?"
    LoudnessAt(usize),
    /// "which way does the <object> move ?"
    DirectionOf(usize),
    /// "what moves <direction> ?"
    Mover(usize),
}

fn objects_of(payload: &Payload) -> &[Object] {
    match payload {
        Payload::Image(s) => &s.objects,
        Payload::Video(v) => &v.frames[0].objects,
        Payload::Audio(_) => &[],
    }
}

/// Every well-posed question kind for the payload.
pub fn qa_kinds(payload: &Payload) -> Vec<QaKind> {
    let mut kinds = Vec::new();
    match payload {
        Payload::Image(s) => {
            for i in 0..s.objects.len() {
                kinds.push(QaKind::ColorOf(i));
                kinds.push(QaKind::ShapeOf(i));
            }
            for subject in 0..s.objects.len() {
                for anchor in 0..s.objects.len() {
                    let k = QaKind::Relation { subject, anchor };
                    if subject != anchor && render_qa_kind(payload, k).is_some() {
                        kinds.push(k);
                    }
                }
            }
        }
        Payload::Audio(a) => {
            for i in 0..a.events.len() {
                kinds.push(QaKind::SoundAt(i));
                kinds.push(QaKind::LoudnessAt(i));
            }
        }
        Payload::Video(v) => {
            for i in 0..v.frames[0].objects.len() {
                kinds.push(QaKind::DirectionOf(i));
                kinds.push(QaKind::ColorOf(i));
                if render_qa_kind(payload, QaKind::Mover(i)).is_some() {
                    kinds.push(QaKind::Mover(i));
                }
            }
        }
    }
    kinds
}

/// Question/answer for a specific kind; `None` when the kind does not apply
/// or its answer would not be unique.
pub fn render_qa_kind(payload: &Payload, kind: QaKind) -> Option<(String, String)> {
    match (payload, kind) {
        (Payload::Image(_) | Payload::Video(_), QaKind::ColorOf(i)) => {
            let o = objects_of(payload).get(i)?;
            Some((
                format!("what color is the {} ?", o.shape.word()),
                o.color.word().to_string(),
            ))
        }
        (Payload::Image(s), QaKind::ShapeOf(i)) => {
            let o = s.objects.get(i)?;
            Some((
                format!("what shape is the {} object ?", o.color.word()),
                o.shape.word().to_string(),
            ))
        }
        (Payload::Image(s), QaKind::Relation { subject, anchor }) => {
            let (a, b) = (s.objects.get(subject)?, s.objects.get(anchor)?);
            if subject == anchor {
                return None;
            }
            let rel = relation(a, b);
            let matching = s
                .objects
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != anchor && relation(o, b) == rel)
                .count();
            (matching == 1).then(|| (format!("what is {} a {} ?", rel, b.phrase()), a.phrase()))
        }
        (Payload::Audio(a), QaKind::SoundAt(i)) => {
            let e = a.events.get(i)?;
            Some((format!("what is the {} sound ?", ORDINALS[i]), e.phrase()))
        }
        (Payload::Audio(a), QaKind::LoudnessAt(i)) => {
            let e = a.events.get(i)?;
            Some((
                format!("how loud is the {} sound ?", ORDINALS[i]),
                e.loudness.word().to_string(),
            ))
        }
        (Payload::Video(v), QaKind::DirectionOf(i)) => {
            let o = v.frames[0].objects.get(i)?;
            let d = motion_of(v, i)?;
            Some((
                format!("which way does the {} move ?", o.phrase()),
                d.word().to_string(),
            ))
        }
        (Payload::Video(v), QaKind::Mover(i)) => {
            let o = v.frames[0].objects.get(i)?;
            let d = motion_of(v, i)?;
            let same = (0..v.frames[0].objects.len())
                .filter(|&j| motion_of(v, j) == Some(d))
                .count();
            (same == 1).then(|| (format!("what moves {} ?", d.word()), o.phrase()))
        }
        _ => None,
    }
}

/// The default question for a payload: the color of the first object for
/// grids and videos, the first sound for audio.
pub fn render_qa(payload: &Payload) -> (String, String) {
    let kind = match payload {
        Payload::Image(_) => QaKind::ColorOf(0),
        Payload::Audio(_) => QaKind::SoundAt(0),
        Payload::Video(_) => QaKind::DirectionOf(0),
    };
    render_qa_kind(payload, kind).expect("default question is always defined")
}

/// Ground-truth oracle: parse a templated question and answer it from the
/// scene record. `None` for unparseable or ambiguous questions.
pub fn answer_question(payload: &Payload, question: &str) -> Option<String> {
    let norm = normalize(question);
    let w: Vec<&str> = norm.split_whitespace().collect();
    let objects = objects_of(payload);
    let find_shape = |s: &str| {
        let shape = Shape::from_word(s)?;
        objects.iter().find(|o| o.shape == shape)
    };
    match w.as_slice() {
        ["what", "color", "is", "the", s, "?"] => find_shape(s).map(|o| o.color.word().to_string()),
        ["what", "shape", "is", "the", c, "object", "?"] => {
            let color = Color::from_word(c)?;
            objects
                .iter()
                .find(|o| o.color == color)
                .map(|o| o.shape.word().to_string())
        }
        ["what", "is", rest @ .., "?"] if matches!(payload, Payload::Image(_)) => {
            // "<relation> a <color> <shape>"
            let n = rest.len();
            if n < 4 || rest[n - 3] != "a" {
                return None;
            }
            let rel = rest[..n - 3].join(" ");
            let (color, shape) = (Color::from_word(rest[n - 2])?, Shape::from_word(rest[n - 1])?);
            let anchor = objects.iter().position(|o| o.color == color && o.shape == shape)?;
            let hits: Vec<&Object> = objects
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != anchor && relation(o, &objects[anchor]) == rel)
                .map(|(_, o)| o)
                .collect();
            (hits.len() == 1).then(|| hits[0].phrase())
        }
        ["what", "is", "the", ord, "sound", "?"] => {
            let Payload::Audio(a) = payload else { return None };
            let i = ORDINALS.iter().position(|o| o == ord)?;
            a.events.get(i).map(|e| e.phrase())
        }
        ["how", "loud", "is", "the", ord, "sound", "?"] => {
            let Payload::Audio(a) = payload else { return None };
            let i = ORDINALS.iter().position(|o| o == ord)?;
            a.events.get(i).map(|e| e.loudness.word().to_string())
        }
        ["which", "way", "does", "the", c, s, "move", "?"] => {
            let Payload::Video(v) = payload else { return None };
            let (color, shape) = (Color::from_word(c)?, Shape::from_word(s)?);
            let i = objects.iter().position(|o| o.color == color && o.shape == shape)?;
            motion_of(v, i).map(|d| d.word().to_string())
        }
        ["what", "moves", d, "?"] => {
            let Payload::Video(v) = payload else { return None };
            let dir = Direction::from_word(d)?;
            let hits: Vec<usize> = (0..objects.len())
                .filter(|&i| motion_of(v, i) == Some(dir))
                .collect();
            (hits.len() == 1).then(|| objects[hits[0]].phrase())
        }
        _ => None,
    }
}

/// Every terminal the caption/question grammar can emit, as a small corpus.
pub fn grammar_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        out.push(caption_instruction(m));
    }
    let join = |words: Vec<&str>| words.join(" ");
    out.push(join(Color::ALL.iter().map(|c| c.word()).collect()));
    out.push(join(Shape::ALL.iter().map(|c| c.word()).collect()));
    out.push(join(Event::ALL.iter().map(|c| c.word()).collect()));
    out.push(join(Loudness::ALL.iter().map(|c| c.word()).collect()));
    out.push(join(Direction::ALL.iter().map(|c| c.word()).collect()));
    out.push(ORDINALS.join(" "));
    out.push(RELATIONS.join(" "));
    out.push("a and then moves".into());
    out.push("what color is the ?".into());
    out.push("what shape is the object ?".into());
    out.push("what is a ?".into());
    out.push("what is the sound ?".into());
    out.push("how loud is the sound ?".into());
    out.push("which way does the move ?".into());
    out.push("what moves ?".into());
    out
}

// ── datasets ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
        }
    }
}

/// `D_i` with its held-out splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub descriptor: TaskDescriptor,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Stable 64-bit seed for a labelled sub-stream of a run seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn make_sample(payload: Payload, task_type: TaskType, rng: &mut ChaCha8Rng) -> Sample {
    match task_type {
        TaskType::Captioning => Sample {
            input_text: caption_instruction(payload.modality()),
            target_text: render_caption(&payload),
            modality_input: payload,
        },
        TaskType::Qa => {
            let kinds = qa_kinds(&payload);
            let kind = *kinds.choose(rng).expect("every payload has a question");
            let (q, a) = render_qa_kind(&payload, kind).expect("listed kinds render");
            Sample {
                modality_input: payload,
                input_text: q,
                target_text: a,
            }
        }
    }
}

pub fn generate_task_dataset(
    descriptor: &TaskDescriptor,
    sizes: SplitSizes,
    seed: u64,
) -> Result<TaskDataset> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig("split sizes must be positive".into()));
    }
    let total = sizes.train + sizes.val + sizes.test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut scenes = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while scenes.len() < total {
        attempts += 1;
        if attempts > total * 200 {
            return Err(Error::InvalidConfig(format!(
                "cannot draw {total} distinct {} scenes",
                descriptor.modality
            )));
        }
        let scene = generate_scene(descriptor.modality, rng.gen());
        if seen.insert(scene.canonical_json()) {
            scenes.push(scene);
        }
    }
    let mut samples: Vec<Sample> = scenes
        .into_iter()
        .map(|p| make_sample(p, descriptor.task_type, &mut rng))
        .collect();
    let test = samples.split_off(sizes.train + sizes.val);
    let val = samples.split_off(sizes.train);
    Ok(TaskDataset {
        descriptor: descriptor.clone(),
        train: samples,
        val,
        test,
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    modality: Modality,
    scene: Payload,
    input_text: String,
    target_text: String,
    split: Split,
}

pub fn write_dataset<W: Write>(ds: &TaskDataset, mut out: W) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in ds.split(split) {
            let rec = Record {
                modality: s.modality_input.modality(),
                scene: s.modality_input.clone(),
                input_text: s.input_text.clone(),
                target_text: s.target_text.clone(),
                split,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn dataset_bytes(ds: &TaskDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("in-memory write");
    buf
}

pub fn save_dataset(ds: &TaskDataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(descriptor: &TaskDescriptor, path: &Path, seed: u64) -> Result<TaskDataset> {
    let file = std::fs::File::open(path)?;
    let mut ds = TaskDataset {
        descriptor: descriptor.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.scene.modality() != rec.modality || rec.modality != descriptor.modality {
            return Err(Error::Malformed(format!(
                "{}:{}: modality mismatch",
                path.display(),
                n + 1
            )));
        }
        let sample = Sample {
            modality_input: rec.scene,
            input_text: rec.input_text,
            target_text: rec.target_text,
        };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}
