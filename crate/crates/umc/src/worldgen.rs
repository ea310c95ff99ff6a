//! Procedural garment-transfer world: every sample is a (garment image,
//! garment-agnostic structured prompt, target scene image) triple derived
//! deterministically from a seed, with ground truth exact by construction.
//!
//! The world is tiny on purpose — 16x16 garments, three aspect buckets —
//! so CPU training finishes in minutes and the evaluation metrics can
//! recompute the intended image pixel for pixel.

use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::ioutil::{atomic_write, read_to_string};
use crate::ppm;

// ── Palette and id tables ────────────────────────────────────────────

/// Eight maximally separated base colors: the corners of the RGB cube.
pub const PALETTE: [(u8, u8, u8); 8] = [
    (0, 0, 0),       // black
    (255, 0, 0),     // red
    (0, 255, 0),     // green
    (0, 0, 255),     // blue
    (255, 255, 0),   // yellow
    (255, 0, 255),   // magenta
    (0, 255, 255),   // cyan
    (255, 255, 255), // white
];

pub const PALETTE_NAMES: [&str; 8] =
    ["black", "red", "green", "blue", "yellow", "magenta", "cyan", "white"];

/// Side length of the square garment product image.
pub const GARMENT_SIZE: usize = 16;

/// Fixed light-gray product background behind every garment render.
pub const PRODUCT_BG: (u8, u8, u8) = (204, 204, 204);

pub fn complement(rgb: (u8, u8, u8)) -> (u8, u8, u8) {
    (255 - rgb.0, 255 - rgb.1, 255 - rgb.2)
}

macro_rules! id_enum {
    ($name:ident { $($variant:ident = $label:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }

            pub fn from_index(i: usize) -> Result<Self> {
                Self::ALL.get(i).copied().ok_or_else(|| {
                    Error::Data(format!("{} index {} out of range", stringify!($name), i))
                })
            }

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok($name::$variant),)+
                    other => Err(Error::Data(format!(
                        "unknown {} '{}'", stringify!($name), other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

id_enum!(ShapeId { Tee = "tee", Pants = "pants", Skirt = "skirt", Hat = "hat", Bag = "bag" });
id_enum!(PatternId { Solid = "solid", Stripes = "stripes", Checker = "checker", Dots = "dots" });
id_enum!(BackgroundId {
    Studio = "studio",
    Beach = "beach",
    Street = "street",
    Lawn = "lawn",
    Bedroom = "bedroom",
});
id_enum!(PoseId { Standing = "standing", Sitting = "sitting", Walking = "walking" });
id_enum!(RatioId { R1x1 = "1:1", R3x4 = "3:4", R2x3 = "2:3" });

// ── Aspect buckets ───────────────────────────────────────────────────

/// One aspect-ratio bucket: samples in a bucket share image dimensions so
/// batches have uniform shapes. Dimensions are divisible by the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AspectBucket {
    pub ratio: RatioId,
    pub height: usize,
    pub width: usize,
}

/// The three buckets: 1:1 at 16x16, 3:4 at 16x12, 2:3 at 24x16 (H x W).
pub const BUCKETS: [AspectBucket; 3] = [
    AspectBucket { ratio: RatioId::R1x1, height: 16, width: 16 },
    AspectBucket { ratio: RatioId::R3x4, height: 16, width: 12 },
    AspectBucket { ratio: RatioId::R2x3, height: 24, width: 16 },
];

impl AspectBucket {
    pub fn of(ratio: RatioId) -> AspectBucket {
        BUCKETS[ratio.index()]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

// ── Scene specification ──────────────────────────────────────────────

/// Ground truth for one sample: everything the renders and the metrics need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub shape: ShapeId,
    pub base_color: usize,
    pub pattern: PatternId,
    pub background: BackgroundId,
    pub pose: PoseId,
    pub bucket: AspectBucket,
    pub seed: u64,
}

impl SceneSpec {
    pub fn base_rgb(&self) -> (u8, u8, u8) {
        PALETTE[self.base_color]
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed -> spec mapping. Bucket and shape are stratified over
/// consecutive seeds (`seed % 3`, `(seed / 3) % 5`); the remaining attributes
/// come from independent hash streams.
pub fn spec_from_seed(seed: u64) -> SceneSpec {
    let ratio = RatioId::from_index((seed % 3) as usize).unwrap();
    let shape = ShapeId::from_index(((seed / 3) % 5) as usize).unwrap();
    let mut state = seed;
    let base_color = (splitmix64(&mut state) % 8) as usize;
    let pattern = PatternId::from_index((splitmix64(&mut state) % 4) as usize).unwrap();
    let background = BackgroundId::from_index((splitmix64(&mut state) % 5) as usize).unwrap();
    let pose = PoseId::from_index((splitmix64(&mut state) % 3) as usize).unwrap();
    SceneSpec {
        shape,
        base_color,
        pattern,
        background,
        pose,
        bucket: AspectBucket::of(ratio),
        seed,
    }
}

// ── Garment rendering ────────────────────────────────────────────────

/// Boolean garment silhouette on the 16x16 product grid (row-major, y then x).
pub fn garment_mask(shape: ShapeId) -> Vec<bool> {
    let mut mask = vec![false; GARMENT_SIZE * GARMENT_SIZE];
    for y in 0..GARMENT_SIZE {
        for x in 0..GARMENT_SIZE {
            let inside = match shape {
                // sleeves bar plus torso block
                ShapeId::Tee => {
                    ((3..6).contains(&y) && (1..15).contains(&x))
                        || ((3..13).contains(&y) && (4..12).contains(&x))
                }
                // waistband and two legs
                ShapeId::Pants => {
                    ((2..4).contains(&y) && (3..13).contains(&x))
                        || ((4..14).contains(&y) && ((3..7).contains(&x) || (9..13).contains(&x)))
                }
                // trapezoid widening downward
                ShapeId::Skirt => {
                    if (2..13).contains(&y) {
                        let spread = (y - 2) / 2;
                        let lo = 5usize.saturating_sub(spread);
                        let hi = (11 + spread).min(GARMENT_SIZE);
                        (lo..hi).contains(&x)
                    } else {
                        false
                    }
                }
                // dome plus brim
                ShapeId::Hat => {
                    ((2..8).contains(&y) && (4..12).contains(&x))
                        || ((8..10).contains(&y) && (1..15).contains(&x))
                }
                // body plus a handle arc
                ShapeId::Bag => {
                    ((6..14).contains(&y) && (3..13).contains(&x))
                        || ((2..6).contains(&y) && (x == 5 || x == 10))
                        || (y == 2 && (5..11).contains(&x))
                }
            };
            mask[y * GARMENT_SIZE + x] = inside;
        }
    }
    mask
}

/// Pattern color at a garment pixel. Stripes alternate rows with period 2;
/// checker uses 2x2 cells; dots put 2x2 complement squares on a 4-pixel grid.
pub fn pattern_rgb(pattern: PatternId, base: (u8, u8, u8), y: usize, x: usize) -> (u8, u8, u8) {
    let comp = complement(base);
    match pattern {
        PatternId::Solid => base,
        PatternId::Stripes => {
            if y % 2 == 0 {
                base
            } else {
                comp
            }
        }
        PatternId::Checker => {
            if (y / 2 + x / 2) % 2 == 0 {
                base
            } else {
                comp
            }
        }
        PatternId::Dots => {
            if (1..3).contains(&(y % 4)) && (1..3).contains(&(x % 4)) {
                comp
            } else {
                base
            }
        }
    }
}

fn put_rgb(img: &mut Tensor<f32>, w: usize, y: usize, x: usize, rgb: (u8, u8, u8)) {
    let i = (y * w + x) * 3;
    img.data_mut()[i] = ppm::value_of(rgb.0);
    img.data_mut()[i + 1] = ppm::value_of(rgb.1);
    img.data_mut()[i + 2] = ppm::value_of(rgb.2);
}

/// The garment product image: shape mask filled with the pattern over the
/// fixed light-gray product background. Always 16x16x3.
pub fn render_garment(spec: &SceneSpec) -> Tensor<f32> {
    let mask = garment_mask(spec.shape);
    let mut img = Tensor::zeros(vec![GARMENT_SIZE, GARMENT_SIZE, 3]);
    for y in 0..GARMENT_SIZE {
        for x in 0..GARMENT_SIZE {
            let rgb = if mask[y * GARMENT_SIZE + x] {
                pattern_rgb(spec.pattern, spec.base_rgb(), y, x)
            } else {
                PRODUCT_BG
            };
            put_rgb(&mut img, GARMENT_SIZE, y, x, rgb);
        }
    }
    img
}

// ── Backgrounds ──────────────────────────────────────────────────────

/// Deterministic background color at a pixel: a fixed fill plus a simple
/// texture rule per background id.
pub fn background_rgb(bg: BackgroundId, y: usize, x: usize) -> (u8, u8, u8) {
    match bg {
        BackgroundId::Studio => (230, 230, 230),
        BackgroundId::Beach => {
            if y % 4 == 3 {
                (226, 196, 120)
            } else {
                (242, 216, 145)
            }
        }
        BackgroundId::Street => {
            if x % 4 == 0 {
                (88, 88, 94)
            } else {
                (112, 112, 118)
            }
        }
        BackgroundId::Lawn => {
            if (y / 2 + x / 2) % 2 == 0 {
                (96, 176, 80)
            } else {
                (82, 158, 68)
            }
        }
        BackgroundId::Bedroom => {
            if (x + y) % 6 == 0 {
                (198, 168, 150)
            } else {
                (222, 196, 180)
            }
        }
    }
}

/// Full background render for a bucket, before garment compositing.
pub fn render_background(bg: BackgroundId, bucket: AspectBucket) -> Tensor<f32> {
    let (h, w) = bucket.hw();
    let mut img = Tensor::zeros(vec![h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            put_rgb(&mut img, w, y, x, background_rgb(bg, y, x));
        }
    }
    img
}

// ── Placement ────────────────────────────────────────────────────────

/// Garment placement rectangle in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Fixed placement table per (pose, bucket); every rectangle lies fully
/// inside its bucket's image.
pub fn placement_rect(pose: PoseId, ratio: RatioId) -> PlacementRect {
    let (top, left, height, width) = match (ratio, pose) {
        (RatioId::R1x1, PoseId::Standing) => (2, 4, 12, 8),
        (RatioId::R1x1, PoseId::Sitting) => (6, 3, 8, 10),
        (RatioId::R1x1, PoseId::Walking) => (3, 2, 11, 9),
        (RatioId::R3x4, PoseId::Standing) => (2, 2, 12, 8),
        (RatioId::R3x4, PoseId::Sitting) => (6, 1, 8, 10),
        (RatioId::R3x4, PoseId::Walking) => (3, 2, 11, 8),
        (RatioId::R2x3, PoseId::Standing) => (4, 4, 16, 8),
        (RatioId::R2x3, PoseId::Sitting) => (10, 3, 10, 10),
        (RatioId::R2x3, PoseId::Walking) => (5, 3, 14, 9),
    };
    PlacementRect { top, left, height, width }
}

/// Nearest-neighbor source pixel in the 16x16 garment grid for a rectangle
/// offset `(i, j)` inside a `height x width` placement.
fn nn_source(i: usize, j: usize, rect: &PlacementRect) -> (usize, usize) {
    (i * GARMENT_SIZE / rect.height, j * GARMENT_SIZE / rect.width)
}

/// Scene pixels covered by the garment: offsets in the placement rectangle
/// whose nearest-neighbor source lands inside the shape mask.
pub fn garment_region(spec: &SceneSpec) -> Vec<(usize, usize)> {
    let rect = placement_rect(spec.pose, spec.bucket.ratio);
    let mask = garment_mask(spec.shape);
    let mut region = Vec::new();
    for i in 0..rect.height {
        for j in 0..rect.width {
            let (sy, sx) = nn_source(i, j, &rect);
            if mask[sy * GARMENT_SIZE + sx] {
                region.push((rect.top + i, rect.left + j));
            }
        }
    }
    region
}

/// The target model-scene image: background fill/texture with the garment
/// render resampled into the placement rectangle, restricted to the mask.
pub fn render_scene(spec: &SceneSpec) -> Tensor<f32> {
    let (h, w) = spec.bucket.hw();
    let mut img = render_background(spec.background, spec.bucket);
    let rect = placement_rect(spec.pose, spec.bucket.ratio);
    let garment = render_garment(spec);
    let mask = garment_mask(spec.shape);
    for i in 0..rect.height {
        for j in 0..rect.width {
            let (sy, sx) = nn_source(i, j, &rect);
            if mask[sy * GARMENT_SIZE + sx] {
                let src = (sy * GARMENT_SIZE + sx) * 3;
                let dst = ((rect.top + i) * w + (rect.left + j)) * 3;
                for c in 0..3 {
                    img.data_mut()[dst + c] = garment.data()[src + c];
                }
            }
        }
    }
    debug_assert_eq!(img.shape(), [h, w, 3]);
    img
}

// ── Structured prompts ───────────────────────────────────────────────

pub const PROMPT_LEN: usize = 4;
pub const PROMPT_VOCAB: usize = 16;
pub const EOS_TOKEN: usize = 15;

/// Garment-agnostic prompt: `[BG:x][POSE:y][BUCKET:z][EOS]` over a 16-token
/// vocabulary. Ids 0-4 are backgrounds, 5-7 poses, 8-10 buckets, 15 EOS;
/// 11-14 are reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuredPrompt {
    pub tokens: [usize; PROMPT_LEN],
}

/// Prompt from a spec. Depends only on (background, pose, bucket) — never on
/// garment shape, color, or pattern — and is injective on those three fields.
pub fn make_prompt(spec: &SceneSpec) -> StructuredPrompt {
    StructuredPrompt {
        tokens: [
            spec.background.index(),
            5 + spec.pose.index(),
            8 + spec.bucket.ratio.index(),
            EOS_TOKEN,
        ],
    }
}

// ── Sample generation ────────────────────────────────────────────────

/// One generated training/eval sample with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub garment: Tensor<f32>,
    pub prompt: StructuredPrompt,
    pub scene: Tensor<f32>,
    pub spec: SceneSpec,
}

/// Deterministic in the seed: same seed, bit-identical triple.
pub fn generate_sample(seed: u64) -> Sample {
    let spec = spec_from_seed(seed);
    Sample {
        garment: render_garment(&spec),
        prompt: make_prompt(&spec),
        scene: render_scene(&spec),
        spec,
    }
}

// ── Manifest + dataset files ─────────────────────────────────────────

/// One manifest line: the seed, the spec fields, and the two image paths
/// (relative to the manifest's directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub seed: u64,
    pub spec: SceneSpec,
    pub garment_path: String,
    pub scene_path: String,
}

pub const MANIFEST_HEADER: &str = "seed,shape,color,pattern,background,pose,bucket,garment,scene";

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.spec.shape,
            PALETTE_NAMES[self.spec.base_color],
            self.spec.pattern,
            self.spec.background,
            self.spec.pose,
            self.spec.bucket.ratio,
            self.garment_path,
            self.scene_path
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Data(format!("manifest line has {} fields, expected 9", parts.len())));
        }
        let seed: u64 =
            parts[0].parse().map_err(|_| Error::Data(format!("bad seed '{}'", parts[0])))?;
        let color = PALETTE_NAMES
            .iter()
            .position(|n| *n == parts[2])
            .ok_or_else(|| Error::Data(format!("unknown color '{}'", parts[2])))?;
        let spec = SceneSpec {
            shape: ShapeId::parse(parts[1])?,
            base_color: color,
            pattern: PatternId::parse(parts[3])?,
            background: BackgroundId::parse(parts[4])?,
            pose: PoseId::parse(parts[5])?,
            bucket: AspectBucket::of(RatioId::parse(parts[6])?),
            seed,
        };
        Ok(ManifestRecord {
            seed,
            spec,
            garment_path: parts[7].to_string(),
            scene_path: parts[8].to_string(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for r in &self.records {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        atomic_write(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::Data(format!("{}: missing manifest header", path.display()))),
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(ManifestRecord::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { records })
    }
}

/// Generate `count` samples starting at `data_seed`, write PPMs plus the
/// manifest into `dir`. Consecutive seeds stratify buckets exactly when
/// `count` is a multiple of three.
pub fn write_dataset(dir: &Path, data_seed: u64, count: usize) -> Result<(Manifest, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let seed = data_seed + i as u64;
        let sample = generate_sample(seed);
        let garment_path = format!("garment-{seed}.ppm");
        let scene_path = format!("scene-{seed}.ppm");
        ppm::write_ppm(&dir.join(&garment_path), &sample.garment)?;
        ppm::write_ppm(&dir.join(&scene_path), &sample.scene)?;
        records.push(ManifestRecord { seed, spec: sample.spec, garment_path, scene_path });
    }
    let manifest = Manifest { records };
    let manifest_path = dir.join("manifest.csv");
    manifest.write(&manifest_path)?;
    Ok((manifest, manifest_path))
}
