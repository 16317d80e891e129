//! Synthetic word images: bitmap-font layout followed by geometric and
//! photometric degradations, plus the PNG/manifest dataset format.

mod font;
mod image;

pub use font::{FontAtlas, GLYPH_HEIGHT, GLYPH_WIDTH};
pub use image::GrayImage;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::charset::{derive_labels, normalize_word, CharSet, PositionSet};
use crate::error::{Error, Result};

pub const CANVAS_HEIGHT: usize = 32;
pub const CANVAS_WIDTH: usize = 128;
pub const MANIFEST_FILE: &str = "manifest.tsv";

const SUPERSAMPLE: usize = 4;
const MAX_GLYPH_SCALE: f64 = 3.0;
const MARGIN_X: f64 = 4.0;

/// Everything needed to reproduce one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub word: String,
    /// Peak vertical displacement of the sinusoidal baseline, in pixels.
    pub curvature_amplitude: f64,
    /// Degrees, counter-clockwise.
    pub rotation: f64,
    /// 0 keeps the text rectangular; 1 shrinks the right edge to half height.
    pub perspective_skew: f64,
    pub noise_sigma: f64,
    pub blur_radius: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn clean(word: &str, seed: u64) -> Self {
        Self {
            word: word.to_string(),
            curvature_amplitude: 0.0,
            rotation: 0.0,
            perspective_skew: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0.0,
            seed,
        }
    }
}

/// Upper bounds for each degradation. Curvature and rotation are drawn
/// symmetrically around zero, the rest from `[0, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationRanges {
    pub curvature: f64,
    pub rotation: f64,
    pub perspective: f64,
    pub noise_sigma: f64,
    pub blur_radius: f64,
}

impl DegradationRanges {
    pub const fn zero() -> Self {
        Self {
            curvature: 0.0,
            rotation: 0.0,
            perspective: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0.0,
        }
    }

    pub const fn mild() -> Self {
        Self {
            curvature: 2.0,
            rotation: 4.0,
            perspective: 0.15,
            noise_sigma: 0.05,
            blur_radius: 0.5,
        }
    }

    pub const fn moderate() -> Self {
        Self {
            curvature: 4.0,
            rotation: 8.0,
            perspective: 0.3,
            noise_sigma: 0.15,
            blur_radius: 0.8,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "zero" | "none" => Some(Self::zero()),
            "mild" => Some(Self::mild()),
            "moderate" => Some(Self::moderate()),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, word: &str, rng: &mut R) -> SampleSpec {
        let sym = |r: &mut R, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let pos = |r: &mut R, m: f64| if m > 0.0 { r.random_range(0.0..=m) } else { 0.0 };
        SampleSpec {
            word: word.to_string(),
            curvature_amplitude: sym(rng, self.curvature),
            rotation: sym(rng, self.rotation),
            perspective_skew: pos(rng, self.perspective),
            noise_sigma: pos(rng, self.noise_sigma),
            blur_radius: pos(rng, self.blur_radius),
            seed: rng.random(),
        }
    }
}

/// Clean rendering plus the horizontal pixel extent of each glyph.
#[derive(Clone, Debug)]
pub struct Layout {
    pub image: GrayImage,
    pub glyph_boxes: Vec<(f64, f64)>,
    pub scale: f64,
}

/// Places glyphs left to right, centered on the canvas, with anti-aliased
/// edges. No degradations.
pub fn layout_word(word: &str, atlas: &FontAtlas) -> Result<Layout> {
    let word = normalize_word(word);
    let labels = derive_labels(&word, &CharSet, &PositionSet::default())?;
    let classes = &labels.char_classes[..labels.word_len()];
    let (gw, gh) = (atlas.glyph_width() as f64, atlas.glyph_height() as f64);
    let advance = gw + 1.0;
    let units = classes.len() as f64 * advance - 1.0;
    let scale = MAX_GLYPH_SCALE
        .min((CANVAS_WIDTH as f64 - 2.0 * MARGIN_X) / units)
        .min((CANVAS_HEIGHT as f64 - 6.0) / gh);
    let x0 = (CANVAS_WIDTH as f64 - units * scale) / 2.0;
    let y0 = (CANVAS_HEIGHT as f64 - gh * scale) / 2.0;

    let mut img = GrayImage::new(CANVAS_HEIGHT, CANVAS_WIDTH);
    let ss = SUPERSAMPLE as f64;
    let inv = 1.0 / (ss * ss);
    for y in 0..CANVAS_HEIGHT {
        for x in 0..CANVAS_WIDTH {
            let mut hits = 0usize;
            for j in 0..SUPERSAMPLE {
                let v = (y as f64 + (j as f64 + 0.5) / ss - y0) / scale;
                if !(0.0..gh).contains(&v) {
                    continue;
                }
                for i in 0..SUPERSAMPLE {
                    let u = (x as f64 + (i as f64 + 0.5) / ss - x0) / scale;
                    if u < 0.0 {
                        continue;
                    }
                    let slot = (u / advance) as usize;
                    let cu = u - slot as f64 * advance;
                    if slot < classes.len() && cu < gw && atlas.glyph(classes[slot])[v as usize][cu as usize] {
                        hits += 1;
                    }
                }
            }
            img.set(y, x, (hits as f64 * inv) as f32);
        }
    }
    let glyph_boxes = (0..classes.len())
        .map(|k| {
            let a = x0 + k as f64 * advance * scale;
            (a, a + gw * scale)
        })
        .collect();
    Ok(Layout {
        image: img,
        glyph_boxes,
        scale,
    })
}

/// Full pipeline: layout then every degradation in `spec`.
pub fn render_word(spec: &SampleSpec, atlas: &FontAtlas) -> Result<GrayImage> {
    let layout = layout_word(&spec.word, atlas)?;
    Ok(augment_image(&layout.image, spec))
}

/// Curvature, rotation, perspective, noise, blur, in that order. A zero
/// parameter skips its stage, so an all-zero spec returns the input.
pub fn augment_image(image: &GrayImage, spec: &SampleSpec) -> GrayImage {
    let mut img = image.clone();
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    if spec.curvature_amplitude != 0.0 {
        let a = spec.curvature_amplitude;
        img = img.warp(|x, y| (x, y - a * (std::f64::consts::PI * x / w).sin()));
    }
    if spec.rotation != 0.0 {
        let (s, c) = spec.rotation.to_radians().sin_cos();
        // image y points down, so this rotates counter-clockwise on screen
        img = img.warp(|x, y| {
            let (dx, dy) = (x - cx, y - cy);
            (cx + c * dx - s * dy, cy + s * dx + c * dy)
        });
    }
    if spec.perspective_skew != 0.0 {
        let k = spec.perspective_skew.clamp(0.0, 1.0);
        img = img.warp(|x, y| {
            let sc = 1.0 - 0.5 * k * x / w;
            (x, cy + (y - cy) / sc)
        });
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in img.as_mut_slice() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    if spec.blur_radius > 0.0 {
        img = img.gaussian_blur(spec.blur_radius);
    }
    img
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub transcription: String,
}

/// Image list of a dataset. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads `path` (or `path/manifest.tsv` when given a directory).
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let ps = PositionSet::default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (p, t) = line.split_once('\t').ok_or_else(|| Error::Manifest {
                line: i + 1,
                reason: "expected <path>\\t<transcription>".into(),
            })?;
            let transcription = normalize_word(t);
            derive_labels(&transcription, &CharSet, &ps).map_err(|e| Error::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                path: p.to_string(),
                transcription,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn write(&self) -> Result<PathBuf> {
        let file = self.root.join(MANIFEST_FILE);
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.path);
            out.push('\t');
            out.push_str(&e.transcription);
            out.push('\n');
        }
        fs::File::create(&file)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    /// Decodes every image (resized to the canvas when needed).
    pub fn load(&self) -> Result<Vec<(GrayImage, String)>> {
        (0..self.len())
            .map(|i| {
                let img = GrayImage::read_png(&self.image_path(i))?.fit_canvas();
                Ok((img, self.entries[i].transcription.clone()))
            })
            .collect()
    }
}

/// Per-sample generator: the stream index makes each sample independent of
/// generation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `count` samples (word uniform over `vocab`) without touching disk.
pub fn generate_samples(
    count: usize,
    vocab: &[String],
    ranges: &DegradationRanges,
    seed: u64,
    atlas: &FontAtlas,
) -> Result<Vec<(SampleSpec, GrayImage)>> {
    let vocab = checked_vocab(vocab)?;
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let word = &vocab[rng.random_range(0..vocab.len())];
            let spec = ranges.sample(word, &mut rng);
            let img = render_word(&spec, atlas)?;
            Ok((spec, img))
        })
        .collect()
}

/// Writes `count` PNGs under `out_dir/images` and the manifest file.
pub fn generate_dataset(
    count: usize,
    vocab: &[String],
    ranges: &DegradationRanges,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    let atlas = FontAtlas::builtin();
    let vocab = checked_vocab(vocab)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = sample_rng(seed, i as u64);
        let word = &vocab[rng.random_range(0..vocab.len())];
        let spec = ranges.sample(word, &mut rng);
        let img = render_word(&spec, &atlas)?;
        let rel = format!("images/{i:06}.png");
        img.write_png(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            transcription: word.clone(),
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

fn checked_vocab(vocab: &[String]) -> Result<Vec<String>> {
    if vocab.is_empty() {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    let ps = PositionSet::default();
    vocab
        .iter()
        .map(|w| {
            let w = normalize_word(w);
            derive_labels(&w, &CharSet, &ps)?;
            Ok(w)
        })
        .collect()
}

/// One word per line; blank lines and `#` comments are skipped.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    checked_vocab(&words)
}
