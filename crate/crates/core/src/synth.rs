//! Deterministic synthetic referring clips: moving coloured shapes, a
//! template query naming one of them, and exact visible-pixel masks.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ClipInput;
use crate::tensor::Tensor;

/// Pixels moved per frame by a non-still object.
pub const SPEED: i64 = 2;
pub const SMALL_EXTENT: i64 = 10;
pub const LARGE_EXTENT: i64 = 16;
pub const QUERY_LEN: usize = 5;

macro_rules! words {
    ($(#[$m:meta])* $name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($word => Some($name::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

words!(ShapeKind { Square => "square", Disc => "disc", Triangle => "triangle" });
words!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
words!(SizeClass { Small => "small", Large => "large" });
words!(Motion { Left => "left", Right => "right", Up => "up", Down => "down", Still => "still" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl SizeClass {
    pub fn extent(self) -> i64 {
        match self {
            SizeClass::Small => SMALL_EXTENT,
            SizeClass::Large => LARGE_EXTENT,
        }
    }
}

impl Motion {
    pub fn velocity(self) -> (i64, i64) {
        match self {
            Motion::Left => (-SPEED, 0),
            Motion::Right => (SPEED, 0),
            Motion::Up => (0, -SPEED),
            Motion::Down => (0, SPEED),
            Motion::Still => (0, 0),
        }
    }
}

/// The fixed query vocabulary; ids are positions in this list.
pub const VOCABULARY: &[&str] = &[
    "<pad>", "red", "green", "blue", "yellow", "small", "large", "square", "disc", "triangle",
    "moving", "left", "right", "up", "down", "still",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

pub fn decode_query(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| VOCABULARY.get(t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    pub motion: Motion,
    /// Top-left corner of the bounding box at frame 0.
    pub x: i64,
    pub y: i64,
}

impl ObjectSpec {
    pub fn attributes(&self) -> (Color, SizeClass, ShapeKind) {
        (self.color, self.size, self.shape)
    }

    /// Bounding-box corner at frame `t`.
    pub fn corner(&self, t: usize) -> (i64, i64) {
        let (vx, vy) = self.motion.velocity();
        (self.x + vx * t as i64, self.y + vy * t as i64)
    }

    /// Whether pixel `(px, py)` is covered at frame `t` (pixel centres).
    pub fn covers(&self, t: usize, px: usize, py: usize) -> bool {
        let (x0, y0) = self.corner(t);
        let s = self.size.extent() as f64;
        let cx = px as f64 + 0.5 - x0 as f64;
        let cy = py as f64 + 0.5 - y0 as f64;
        if cx < 0.0 || cy < 0.0 || cx > s || cy > s {
            return false;
        }
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Disc => {
                let r = s / 2.0;
                (cx - r).powi(2) + (cy - r).powi(2) <= r * r
            }
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => (cx - s / 2.0).abs() <= cy / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub canvas: usize,
    /// Paint order: later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
    pub referent: usize,
}

impl SceneSpec {
    /// Check the scene invariants: unique referent, objects inside the canvas.
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.objects.len()) {
            return Err(Error::Generation(format!("{} objects, expected 2 to 4", self.objects.len())));
        }
        if self.frames == 0 {
            return Err(Error::Generation("scene has no frames".into()));
        }
        let r = self
            .objects
            .get(self.referent)
            .ok_or_else(|| Error::Generation(format!("referent {} out of range", self.referent)))?;
        let matches = self.objects.iter().filter(|o| o.attributes() == r.attributes()).count();
        if matches != 1 {
            return Err(Error::Generation(format!(
                "query \"{} {} {}\" matches {matches} objects",
                r.color, r.size, r.shape
            )));
        }
        let n = self.canvas as i64;
        for (i, o) in self.objects.iter().enumerate() {
            let s = o.size.extent();
            for t in [0, self.frames - 1] {
                let (x, y) = o.corner(t);
                if x < 1 || y < 1 || x + s > n - 1 || y + s > n - 1 {
                    return Err(Error::Generation(format!("object {i} leaves the canvas by frame {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn query_words(&self) -> [&'static str; QUERY_LEN] {
        let r = &self.objects[self.referent];
        [r.color.word(), r.size.word(), r.shape.word(), "moving", r.motion.word()]
    }

    pub fn manifest_row(&self, clip: usize) -> String {
        let objects: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("{}:{}:{}:{}:{}:{}", o.color, o.size, o.shape, o.motion, o.x, o.y))
            .collect();
        format!(
            "clip={clip} seed={} frames={} canvas={} referent={} objects={}",
            self.seed,
            self.frames,
            self.canvas,
            self.referent,
            objects.join(";")
        )
    }
}

/// Token ids of `"<color> <size> <shape> moving <motion>"`.
pub fn generate_query(spec: &SceneSpec) -> Vec<usize> {
    spec.query_words()
        .iter()
        .map(|w| token_id(w).expect("template words are in the vocabulary"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub spec: SceneSpec,
    pub input: ClipInput,
    /// `[T, H_s, W_s]` visible pixels of the referent, 0/1.
    pub masks: Tensor,
}

/// Render the scene at `canvas` and at half resolution.
pub fn generate_clip(spec: &SceneSpec) -> Result<ClipBatch> {
    spec.validate()?;
    let (t, n) = (spec.frames, spec.canvas);
    if n % 2 != 0 {
        return Err(Error::Generation(format!("canvas {n} must be even")));
    }
    let mut frames = Tensor::zeros(&[t, n, n, 3]);
    let mut masks = Tensor::zeros(&[t, n, n]);
    {
        let (f, m) = (frames.data_mut(), masks.data_mut());
        for fi in 0..t {
            for py in 0..n {
                for px in 0..n {
                    let top = spec.objects.iter().rposition(|o| o.covers(fi, px, py));
                    if let Some(k) = top {
                        let at = (fi * n + py) * n + px;
                        f[at * 3..at * 3 + 3].copy_from_slice(&spec.objects[k].color.rgb());
                        m[at] = f64::from(k == spec.referent);
                    }
                }
            }
        }
    }
    let h = n / 2;
    let frames_mm = Tensor::from_fn(&[t, h, h, 3], |i| {
        let c = i % 3;
        let x = (i / 3) % h;
        let y = (i / (3 * h)) % h;
        let fi = i / (3 * h * h);
        let d = frames.data();
        let at = |yy: usize, xx: usize| d[((fi * n + yy) * n + xx) * 3 + c];
        (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0
    });
    Ok(ClipBatch {
        spec: spec.clone(),
        input: ClipInput {
            frames_mm,
            frames_seg: frames,
            tokens: generate_query(spec),
        },
        masks,
    })
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

fn sample_object(rng: &mut ChaCha8Rng, attrs: (Color, SizeClass, ShapeKind), frames: usize, canvas: usize) -> ObjectSpec {
    let (color, size, shape) = attrs;
    let motion = pick(rng, Motion::ALL);
    let s = size.extent();
    let (vx, vy) = motion.velocity();
    let travel = |v: i64| v * (frames as i64 - 1);
    let n = canvas as i64;
    // keep the box inside [1, n-1) at both ends of the trajectory
    let range = |v: i64| {
        let lo = 1 - travel(v).min(0);
        let hi = n - 1 - s - travel(v).max(0);
        (lo, hi)
    };
    let (xl, xh) = range(vx);
    let (yl, yh) = range(vy);
    ObjectSpec {
        shape,
        color,
        size,
        motion,
        x: rng.gen_range(xl..=xh.max(xl)),
        y: rng.gen_range(yl..=yh.max(yl)),
    }
}

fn visible_fraction(spec: &SceneSpec, masks: &Tensor) -> f64 {
    let r = &spec.objects[spec.referent];
    let n = spec.canvas;
    let per = n * n;
    (0..spec.frames)
        .map(|t| {
            let full = (0..per).filter(|&i| r.covers(t, i % n, i / n)).count().max(1);
            let vis = masks.data()[t * per..(t + 1) * per].iter().filter(|&&v| v > 0.5).count();
            vis as f64 / full as f64
        })
        .fold(1.0, f64::min)
}

/// Minimum fraction of the referent left visible after occlusion.
pub const MIN_VISIBLE: f64 = 0.5;

/// Draw a random valid scene. Every distractor shares at least one of
/// colour, size and shape with the referent but not all three.
pub fn sample_scene(seed: u64, frames: usize, canvas: usize) -> Result<ClipBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = 2 * (frames as i64 - 1) * SPEED + LARGE_EXTENT + 2;
    if need > canvas as i64 {
        return Err(Error::Generation(format!(
            "{frames} frames of motion do not fit a {canvas}px canvas"
        )));
    }
    for _ in 0..64 {
        let count = rng.gen_range(2..=4usize);
        let referent = (pick(&mut rng, Color::ALL), pick(&mut rng, SizeClass::ALL), pick(&mut rng, ShapeKind::ALL));
        let mut attrs = vec![referent];
        while attrs.len() < count {
            let a = (pick(&mut rng, Color::ALL), pick(&mut rng, SizeClass::ALL), pick(&mut rng, ShapeKind::ALL));
            let shared = (a.0 == referent.0) as u8 + (a.1 == referent.1) as u8 + (a.2 == referent.2) as u8;
            if (1..3).contains(&shared) {
                attrs.push(a);
            }
        }
        let objects: Vec<ObjectSpec> = attrs.iter().map(|&a| sample_object(&mut rng, a, frames, canvas)).collect();
        let mut order: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let objects: Vec<ObjectSpec> = order.iter().map(|&i| objects[i]).collect();
        let spec = SceneSpec {
            seed,
            frames,
            canvas,
            referent: order.iter().position(|&i| i == 0).expect("referent present"),
            objects,
        };
        let clip = generate_clip(&spec)?;
        if visible_fraction(&spec, &clip.masks) >= MIN_VISIBLE {
            return Ok(clip);
        }
    }
    Err(Error::Generation(format!("seed {seed}: no scene with a visible referent")))
}

/// Per-clip seed derived from the dataset seed (splitmix64).
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul((index as u64).wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(seed: u64, clips: usize, frames: usize, canvas: usize) -> Result<Vec<ClipBatch>> {
    (0..clips).map(|i| sample_scene(clip_seed(seed, i), frames, canvas)).collect()
}

pub fn dataset_manifest(clips: &[ClipBatch]) -> String {
    let mut s = String::new();
    for (i, c) in clips.iter().enumerate() {
        s.push_str(&c.spec.manifest_row(i));
        s.push('\n');
    }
    s
}
