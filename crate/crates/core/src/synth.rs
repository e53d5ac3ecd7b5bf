//! Deterministic class-incremental streams of small shape images.
//!
//! Every class is a coloured shape. A training image of task `t` is
//! annotated only with objects of task `t`; with probability
//! `recurrence_rate` it also shows an object of an earlier task, which is
//! kept in `latent_objects` but not annotated. Evaluation images are fully
//! annotated for every class seen so far.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Annotation, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub shape: Shape,
    /// RGB in [0, 1].
    pub color: [f64; 3],
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        0.9 - 0.8 * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Distinct hue per class, shapes cycling.
pub fn default_archetypes(n: usize) -> Vec<Archetype> {
    const SHAPES: [Shape; 4] = [Shape::Rectangle, Shape::Ellipse, Shape::Triangle, Shape::Cross];
    (0..n).map(|c| Archetype { shape: SHAPES[c % SHAPES.len()], color: hue_to_rgb(c as f64 / n as f64) }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    /// Class ids of each task; pairwise disjoint.
    pub task_classes: Vec<Vec<usize>>,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub recurrence_rate: f64,
    pub height: usize,
    pub width: usize,
    /// Object side length range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Upper bound on annotated objects of the owning task per image.
    pub max_objects: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub archetypes: Vec<Archetype>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self::preset(4, 2, 0)
    }
}

impl StreamSpec {
    /// `n_tasks` tasks of `per_task` consecutive classes, 300 training and
    /// 100 evaluation images each.
    pub fn preset(n_tasks: usize, per_task: usize, seed: u64) -> Self {
        Self {
            task_classes: (0..n_tasks).map(|t| (t * per_task..(t + 1) * per_task).collect()).collect(),
            train_per_task: 300,
            eval_per_task: 100,
            recurrence_rate: 0.6,
            height: 32,
            width: 32,
            min_size: 7,
            max_size: 12,
            max_objects: 2,
            noise: 0.04,
            archetypes: default_archetypes(n_tasks * per_task),
            seed,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.task_classes.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.task_classes.is_empty() {
            return fail("stream needs at least one task".into());
        }
        if self.task_classes.iter().any(Vec::is_empty) {
            return fail("every task needs at least one class".into());
        }
        check_disjoint(&self.task_classes)?;
        let n = self.num_classes();
        if let Some(c) = self.task_classes.iter().flatten().find(|&&c| c >= n) {
            return fail(format!("class id {c} outside 0..{n}"));
        }
        if self.archetypes.len() != n {
            return fail(format!("{} archetypes for {n} classes", self.archetypes.len()));
        }
        if !(0.0..=1.0).contains(&self.recurrence_rate) {
            return fail(format!("recurrence rate {} outside [0, 1]", self.recurrence_rate));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return fail(format!("object sizes {}..={} invalid", self.min_size, self.max_size));
        }
        if self.max_objects == 0 {
            return fail("max_objects must be positive".into());
        }
        // Written so NaN fails too.
        if self.noise.is_nan() || self.noise < 0.0 {
            return fail(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }

    pub fn classes_until(&self, t: usize) -> Vec<usize> {
        self.task_classes[..=t].iter().flatten().copied().collect()
    }
}

fn check_disjoint(sets: &[Vec<usize>]) -> Result<()> {
    for i in 0..sets.len() {
        let a: BTreeSet<usize> = sets[i].iter().copied().collect();
        if a.len() != sets[i].len() {
            return Err(Error::Disjointness(i, i));
        }
        for (j, other) in sets.iter().enumerate().skip(i + 1) {
            if other.iter().any(|c| a.contains(c)) {
                return Err(Error::Disjointness(i, j));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub id: u64,
    /// Row-major H × W × 3 bytes; intensity is `byte / 255`.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
    /// Every rendered object, annotated or not.
    pub latent_objects: Vec<Annotation>,
}

impl SynthImage {
    pub fn to_tensor(&self, height: usize, width: usize) -> Result<Tensor> {
        Tensor::new(&[height, width, 3], self.pixels.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Objects present in the image but missing from its annotations.
    pub fn unannotated(&self) -> Vec<Annotation> {
        self.latent_objects.iter().filter(|o| !self.annotations.contains(o)).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub train: Vec<SynthImage>,
    pub eval: Vec<SynthImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub tasks: Vec<TaskData>,
}

/// A training image as the trainer sees it: pixels and annotations only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: u64,
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// An evaluation image with its full annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: u64,
    pub task: usize,
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_classes(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    pub fn training_view(&self, t: usize) -> Result<Vec<TrainSample>> {
        let task = self.task(t)?;
        task.train
            .iter()
            .map(|img| {
                Ok(TrainSample {
                    id: img.id,
                    image: img.to_tensor(self.spec.height, self.spec.width)?,
                    annotations: img.annotations.clone(),
                })
            })
            .collect()
    }

    /// Evaluation images of tasks `0..=t`.
    pub fn eval_view(&self, t: usize) -> Result<Vec<EvalSample>> {
        self.task(t)?;
        let mut out = Vec::new();
        for (k, task) in self.tasks[..=t].iter().enumerate() {
            for img in &task.eval {
                out.push(EvalSample {
                    id: img.id,
                    task: k,
                    image: img.to_tensor(self.spec.height, self.spec.width)?,
                    annotations: img.annotations.clone(),
                });
            }
        }
        Ok(out)
    }

    fn task(&self, t: usize) -> Result<&TaskData> {
        self.tasks.get(t).ok_or_else(|| Error::Index(format!("task {t} of {}", self.tasks.len())))
    }

    /// Keeps the first `n` tasks.
    pub fn truncated(&self, n: usize) -> Result<TaskStream> {
        if n == 0 || n > self.tasks.len() {
            return Err(Error::Config(format!("cannot keep {n} of {} tasks", self.tasks.len())));
        }
        let mut spec = self.spec.clone();
        spec.task_classes.truncate(n);
        Ok(TaskStream { spec, tasks: self.tasks[..n].to_vec() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Split {
    Train,
    Eval,
}

fn image_seed(stream_seed: u64, task: usize, split: Split, index: usize) -> u64 {
    splitmix64(stream_seed ^ ((task as u64) << 40) ^ ((matches!(split, Split::Eval) as u64) << 39) ^ index as u64)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in [0, 1]² relative to the object box.
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
        Shape::Cross => (u - 0.5).abs() <= 0.18 || (v - 0.5).abs() <= 0.18,
    }
}

/// Pixel rectangle `(x0, y0, side_w, side_h)`.
type Placement = (usize, usize, usize, usize);

fn place(rng: &mut ChaCha8Rng, spec: &StreamSpec, taken: &[Placement]) -> Result<Placement> {
    for _ in 0..PLACEMENT_TRIES {
        let w = rng.gen_range(spec.min_size..=spec.max_size);
        let h = rng.gen_range(spec.min_size..=spec.max_size);
        let x = rng.gen_range(0..=spec.width - w);
        let y = rng.gen_range(0..=spec.height - h);
        let clear = taken.iter().all(|&(ox, oy, ow, oh)| x + w < ox || ox + ow < x || y + h < oy || oy + oh < y);
        if clear {
            return Ok((x, y, w, h));
        }
    }
    Err(Error::Placement(format!(
        "no room for another object after {PLACEMENT_TRIES} tries on a {}×{} grid",
        spec.width, spec.height
    )))
}

fn render(rng: &mut ChaCha8Rng, spec: &StreamSpec, objects: &[(usize, Placement)]) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let base: [f64; 3] = [rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2)];
    let mut px = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            px[(y * w + x) * 3..(y * w + x + 1) * 3].copy_from_slice(&base);
        }
    }
    for &(class, (ox, oy, ow, oh)) in objects {
        let a = spec.archetypes[class];
        for y in oy..oy + oh {
            for x in ox..ox + ow {
                let u = (x - ox) as f64 / (ow - 1).max(1) as f64;
                let v = (y - oy) as f64 / (oh - 1).max(1) as f64;
                if inside(a.shape, u, v) {
                    px[(y * w + x) * 3..(y * w + x + 1) * 3].copy_from_slice(&a.color);
                }
            }
        }
    }
    px.iter()
        .map(|&p| {
            // Box-Muller would be overkill; a centred uniform with matching variance.
            let n = (rng.gen::<f64>() - 0.5) * spec.noise * 12f64.sqrt();
            ((p + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn to_annotation(spec: &StreamSpec, class: usize, (x, y, w, h): Placement) -> Annotation {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    Annotation::new(class, BBox::from_corners(x as f64 / fw, y as f64 / fh, (x + w) as f64 / fw, (y + h) as f64 / fh))
}

fn generate_image(spec: &StreamSpec, t: usize, split: Split, index: usize) -> Result<SynthImage> {
    let seed = image_seed(spec.seed, t, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let current = &spec.task_classes[t];
    let past: Vec<usize> = spec.task_classes[..t].iter().flatten().copied().collect();

    let n_current = rng.gen_range(1..=spec.max_objects);
    let mut objects: Vec<(usize, Placement, bool)> = Vec::new();
    let mut taken = Vec::new();
    for _ in 0..n_current {
        let class = current[rng.gen_range(0..current.len())];
        let p = place(&mut rng, spec, &taken)?;
        taken.push(p);
        objects.push((class, p, true));
    }
    if !past.is_empty() && rng.gen::<f64>() < spec.recurrence_rate {
        let class = past[rng.gen_range(0..past.len())];
        let p = place(&mut rng, spec, &taken)?;
        taken.push(p);
        // Evaluation images are annotated for every seen class.
        objects.push((class, p, split == Split::Eval));
    }
    let placed: Vec<(usize, Placement)> = objects.iter().map(|&(c, p, _)| (c, p)).collect();
    let pixels = render(&mut rng, spec, &placed);
    let latent: Vec<Annotation> = objects.iter().map(|&(c, p, _)| to_annotation(spec, c, p)).collect();
    let annotations = objects.iter().zip(&latent).filter(|((_, _, labelled), _)| *labelled).map(|(_, a)| *a).collect();
    Ok(SynthImage {
        id: ((t as u64) << 32) | ((matches!(split, Split::Eval) as u64) << 31) | index as u64,
        pixels,
        annotations,
        latent_objects: latent,
    })
}

/// Generates every task of `spec`. Identical specs give identical streams.
pub fn generate_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let tasks = (0..spec.n_tasks())
        .map(|t| {
            let gen = |split, n| -> Result<Vec<SynthImage>> {
                (0..n).into_par_iter().map(|i| generate_image(spec, t, split, i)).collect()
            };
            Ok(TaskData {
                classes: spec.task_classes[t].clone(),
                train: gen(Split::Train, spec.train_per_task)?,
                eval: gen(Split::Eval, spec.eval_per_task)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream { spec: spec.clone(), tasks })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        version: u32,
        spec: StreamSpec,
        task_classes: Vec<Vec<usize>>,
    },
    Image {
        task: usize,
        split: String,
        id: u64,
        pixels: String,
        annotations: Vec<Annotation>,
        latent_objects: Vec<Annotation>,
    },
}

fn image_record(task: usize, split: &str, img: &SynthImage) -> Record {
    Record::Image {
        task,
        split: split.to_string(),
        id: img.id,
        pixels: B64.encode(&img.pixels),
        annotations: img.annotations.clone(),
        latent_objects: img.latent_objects.clone(),
    }
}

/// Serializes the stream as JSON lines: a header, then one line per image.
pub fn write_stream<W: Write>(stream: &TaskStream, mut out: W) -> Result<()> {
    let header =
        Record::Header { version: FORMAT_VERSION, spec: stream.spec.clone(), task_classes: stream.task_classes() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (t, task) in stream.tasks.iter().enumerate() {
        for (split, imgs) in [("train", &task.train), ("eval", &task.eval)] {
            for img in imgs {
                serde_json::to_writer(&mut out, &image_record(t, split, img))?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic_with(path, |w| write_stream(stream, w))
}

pub fn read_stream<R: BufRead>(input: R) -> Result<TaskStream> {
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = input.lines().enumerate();
    let (spec, task_classes) = match lines.next() {
        Some((_, line)) => match serde_json::from_str::<Record>(&line?) {
            Ok(Record::Header { version, spec, task_classes }) => {
                if version != FORMAT_VERSION {
                    return Err(parse_err(1, format!("unsupported version {version}")));
                }
                (spec, task_classes)
            }
            Ok(_) => return Err(parse_err(1, "first record must be the header".into())),
            Err(e) => return Err(parse_err(1, e.to_string())),
        },
        None => return Err(parse_err(0, "empty file".into())),
    };
    check_disjoint(&task_classes)?;
    let mut tasks: Vec<TaskData> =
        task_classes.iter().map(|c| TaskData { classes: c.clone(), train: Vec::new(), eval: Vec::new() }).collect();
    let expected = spec.height * spec.width * 3;
    for (i, line) in lines {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        let Record::Image { task, split, id, pixels, annotations, latent_objects } = rec else {
            return Err(parse_err(n, "second header record".into()));
        };
        let data = tasks.get_mut(task).ok_or_else(|| parse_err(n, format!("task {task} not declared in header")))?;
        let pixels = B64.decode(pixels).map_err(|e| parse_err(n, e.to_string()))?;
        if pixels.len() != expected {
            return Err(parse_err(n, format!("{} pixel bytes, expected {expected}", pixels.len())));
        }
        let allowed: BTreeSet<usize> = if split == "eval" {
            task_classes[..=task].iter().flatten().copied().collect()
        } else {
            data.classes.iter().copied().collect()
        };
        if let Some(a) = annotations.iter().find(|a| !allowed.contains(&a.class)) {
            return Err(parse_err(n, format!("annotation of class {} outside task {task}", a.class)));
        }
        for a in annotations.iter().chain(&latent_objects) {
            a.bbox.validate().map_err(|e| parse_err(n, e.to_string()))?;
        }
        let img = SynthImage { id, pixels, annotations, latent_objects };
        match split.as_str() {
            "train" => data.train.push(img),
            "eval" => data.eval.push(img),
            other => return Err(parse_err(n, format!("unknown split '{other}'"))),
        }
    }
    Ok(TaskStream { spec, tasks })
}

pub fn load_stream(path: &Path) -> Result<TaskStream> {
    let f = fs::File::open(path)?;
    read_stream(BufReader::new(f))
}

/// Pairs of annotated boxes within one image overlapping above `threshold`.
pub fn overlapping_annotations(img: &SynthImage, threshold: f64) -> Result<usize> {
    let mut n = 0;
    for (i, a) in img.latent_objects.iter().enumerate() {
        for b in &img.latent_objects[i + 1..] {
            if iou(&a.bbox, &b.bbox)? > threshold {
                n += 1;
            }
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(recurrence: f64) -> StreamSpec {
        StreamSpec { train_per_task: 20, eval_per_task: 5, recurrence_rate: recurrence, ..StreamSpec::preset(2, 2, 3) }
    }

    #[test]
    fn default_preset_shape() {
        let s = StreamSpec::default();
        s.validate().unwrap();
        assert_eq!(s.n_tasks(), 4);
        assert_eq!(s.num_classes(), 8);
        assert_eq!(s.recurrence_rate, 0.6);
        assert_eq!((s.train_per_task, s.eval_per_task), (300, 100));
    }

    #[test]
    fn zero_tasks_rejected() {
        let s = StreamSpec::preset(0, 2, 0);
        assert!(matches!(generate_stream(&s), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_classes_rejected() {
        let mut s = tiny(0.5);
        s.task_classes[1][0] = 0;
        assert!(matches!(s.validate(), Err(Error::Disjointness(0, 1))));
    }

    #[test]
    fn no_recurrence_means_everything_is_annotated() {
        let s = generate_stream(&tiny(0.0)).unwrap();
        for task in &s.tasks {
            for img in &task.train {
                assert_eq!(img.latent_objects, img.annotations);
            }
        }
    }

    #[test]
    fn annotations_stay_within_the_task() {
        let s = generate_stream(&tiny(1.0)).unwrap();
        for (t, task) in s.tasks.iter().enumerate() {
            for img in &task.train {
                assert!(img.annotations.iter().all(|a| task.classes.contains(&a.class)));
                assert!(img.annotations.iter().all(|a| img.latent_objects.contains(a)));
                if t == 1 {
                    assert_eq!(img.unannotated().len(), 1);
                    assert!(s.tasks[0].classes.contains(&img.unannotated()[0].class));
                }
            }
        }
    }

    #[test]
    fn boxes_lie_inside_the_image() {
        let s = generate_stream(&tiny(1.0)).unwrap();
        for task in &s.tasks {
            for img in task.train.iter().chain(&task.eval) {
                assert_eq!(overlapping_annotations(img, 0.0).unwrap(), 0);
                for a in &img.latent_objects {
                    a.bbox.validate().unwrap();
                    let [x0, y0, x1, y1] = a.bbox.corners();
                    assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_stream(&tiny(0.5)).unwrap();
        let b = generate_stream(&tiny(0.5)).unwrap();
        assert_eq!(a, b);
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_stream(&a, &mut x).unwrap();
        write_stream(&b, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn crowded_grid_fails_placement() {
        let s = StreamSpec { height: 8, width: 8, min_size: 7, max_size: 8, max_objects: 2, ..tiny(0.0) };
        // The second object can never fit beside the first.
        let err = (0..20).map(|i| generate_image(&s, 0, Split::Train, i)).find(|r| r.is_err());
        assert!(matches!(err, Some(Err(Error::Placement(_)))));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let s = generate_stream(&tiny(0.5)).unwrap();
        let one = s.truncated(1).unwrap();
        assert_eq!(one.n_tasks(), 1);
        assert_eq!(one.tasks[0], s.tasks[0]);
        assert!(s.truncated(3).is_err());
    }
}
