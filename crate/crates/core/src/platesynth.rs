//! Synthetic single-row license plates: grammar-driven labels rendered with
//! an embedded bitmap font, light affine jitter and pixel noise.

pub mod font;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charset::CharSet;
use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};
use crate::seed::{self, streams};
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_PATTERN: &str = "DDLLLDD";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";

/// Pattern over `D` (any digit of the charset), `L` (any uppercase letter
/// of the charset) and literal characters.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateGrammar {
    pattern: String,
    charset: CharSet,
    digits: Vec<char>,
    letters: Vec<char>,
}

impl PlateGrammar {
    pub fn new(pattern: &str, charset: CharSet) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Config("plate pattern is empty".into()));
        }
        let digits: Vec<char> = charset.chars().iter().copied().filter(char::is_ascii_digit).collect();
        let letters: Vec<char> = charset.chars().iter().copied().filter(char::is_ascii_uppercase).collect();
        for c in pattern.chars() {
            let ok = match c {
                'D' => !digits.is_empty(),
                'L' => !letters.is_empty(),
                lit => charset.contains(lit),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "pattern symbol {c:?} cannot be produced from charset {charset}"
                )));
            }
        }
        Ok(PlateGrammar {
            pattern: pattern.to_string(),
            charset,
            digits,
            letters,
        })
    }

    pub fn plates() -> Self {
        Self::new(DEFAULT_PATTERN, CharSet::plates()).expect("default grammar is valid")
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn charset(&self) -> &CharSet {
        &self.charset
    }

    pub fn matches(&self, label: &str) -> bool {
        label.chars().count() == self.pattern.chars().count()
            && self.pattern.chars().zip(label.chars()).all(|(p, c)| match p {
                'D' => self.digits.contains(&c),
                'L' => self.letters.contains(&c),
                lit => lit == c,
            })
    }
}

pub fn sample_label(grammar: &PlateGrammar, rng: &mut impl Rng) -> String {
    grammar
        .pattern
        .chars()
        .map(|p| match p {
            'D' => grammar.digits[rng.random_range(0..grammar.digits.len())],
            'L' => grammar.letters[rng.random_range(0..grammar.letters.len())],
            lit => lit,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    /// Size of one font cell in pixels.
    pub cell_w: f64,
    pub cell_h: f64,
    /// Distance between the left edges of consecutive glyphs.
    pub advance: f64,
    /// Width of the country band on the left edge.
    pub band_width: usize,
    /// Minimum gap between the text and the band or the right edge.
    pub margin: f64,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub noise_std: f64,
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub band_color: [f64; 3],
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            width: 1025,
            height: 218,
            cell_w: 12.0,
            cell_h: 13.0,
            advance: 104.0,
            band_width: 90,
            margin: 24.0,
            max_rotation_deg: 2.0,
            max_translation_px: 8.0,
            noise_std: 0.05,
            background: [0.93, 0.93, 0.91],
            foreground: [0.06, 0.06, 0.08],
            band_color: [0.05, 0.22, 0.6],
        }
    }
}

impl RenderParams {
    /// No jitter and no noise.
    pub fn clean() -> Self {
        RenderParams {
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
            noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.cell_w,
            self.cell_h,
            self.advance,
            self.margin,
            self.max_rotation_deg,
            self.max_translation_px,
            self.noise_std,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.cell_w == 0.0 || self.cell_h == 0.0 {
            return Err(Error::Parameter(format!("invalid render parameters {self:?}")));
        }
        let colors = self.background.iter().chain(&self.foreground).chain(&self.band_color);
        if colors.clone().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("colors must lie in [0, 1]".into()));
        }
        if self.width == 0 || self.height == 0 || self.band_width >= self.width {
            return Err(Error::Parameter(format!("canvas {}x{} with band {} is unusable", self.width, self.height, self.band_width)));
        }
        Ok(())
    }
}

/// Unjittered canvas rectangle of one glyph, right and bottom exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphBox {
    pub character: char,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GlyphBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Centred single-row layout of `label` between the band and the right edge.
pub fn layout(label: &str, params: &RenderParams) -> Result<Vec<GlyphBox>> {
    params.validate()?;
    let chars: Vec<char> = label.chars().collect();
    if let Some(c) = chars.iter().find(|c| !font::covered(**c)) {
        return Err(Error::Layout(format!("no glyph for {c:?}")));
    }
    let gw = font::GLYPH_W as f64 * params.cell_w;
    let gh = font::GLYPH_H as f64 * params.cell_h;
    let left = params.band_width as f64 + params.margin;
    let right = params.width as f64 - params.margin;
    let needed = if chars.is_empty() { 0.0 } else { (chars.len() - 1) as f64 * params.advance + gw };
    if needed > right - left || gh + 2.0 * params.margin > params.height as f64 {
        return Err(Error::Layout(format!(
            "label {label:?} needs {needed}x{gh} px but the plate offers {}x{}",
            right - left,
            params.height as f64 - 2.0 * params.margin
        )));
    }
    let x = left + ((right - left) - needed) / 2.0;
    let y0 = (params.height as f64 - gh) / 2.0;
    Ok(chars
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let x0 = x + i as f64 * params.advance;
            GlyphBox {
                character: c,
                x0,
                y0,
                x1: x0 + gw,
                y1: y0 + gh,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateSample {
    pub image: Image,
    pub label: String,
    pub seed: u64,
}

const JITTER_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const LABEL_STREAM: u64 = 3;

/// Renders `label`; every random draw comes from streams keyed by `seed`.
pub fn render_plate(label: &str, params: &RenderParams, seed: u64) -> Result<PlateSample> {
    let boxes = layout(label, params)?;
    let mut jitter = seed::stream(seed, JITTER_STREAM);
    let sym = |rng: &mut rand_chacha::ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let angle = sym(&mut jitter, params.max_rotation_deg).to_radians();
    let (tx, ty) = (sym(&mut jitter, params.max_translation_px), sym(&mut jitter, params.max_translation_px));
    let (cx, cy) = (params.width as f64 / 2.0, params.height as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();

    let (w, h) = (params.width, params.height);
    let plane = w * h;
    let mut data = vec![0.0; plane * 3];
    for y in 0..h {
        for x in 0..w {
            // inverse of rotate-about-centre then translate
            let (dx, dy) = (x as f64 + 0.5 - cx - tx, y as f64 + 0.5 - cy - ty);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let color = if sx >= 0.0 && sx < params.band_width as f64 && sy >= 0.0 && sy < h as f64 {
                params.band_color
            } else if boxes.iter().any(|b| {
                b.contains(sx, sy) && {
                    let col = ((sx - b.x0) / params.cell_w) as usize;
                    let row = ((sy - b.y0) / params.cell_h) as usize;
                    font::ink(b.character, row.min(font::GLYPH_H - 1), col.min(font::GLYPH_W - 1))
                }
            }) {
                params.foreground
            } else {
                params.background
            };
            for c in 0..3 {
                data[c * plane + y * w + x] = color[c];
            }
        }
    }
    if params.noise_std > 0.0 {
        let mut rng = seed::stream(seed, NOISE_STREAM);
        add_pixel_noise(&mut data, params.noise_std, &mut rng);
    }
    let image = Image::new(Tensor4::from_vec(Shape4::new(1, 3, h, w)?, data)?)?;
    Ok(PlateSample {
        image,
        label: label.to_string(),
        seed,
    })
}

/// Adds Gaussian noise to every value and clamps to `[0, 1]`.
pub fn add_pixel_noise(values: &mut [f64], std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    for v in values {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

/// One planned sample: its derived seed and label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedSample {
    pub seed: u64,
    pub label: String,
}

impl PlannedSample {
    pub fn filename(&self) -> String {
        format!("{}_{}.png", self.label, self.seed)
    }
}

pub fn sample_seed(master: u64, index: usize) -> u64 {
    seed::derive_seed(seed::derive_seed(master, streams::DATASET), index as u64)
}

/// Labels and seeds of a dataset without rendering anything.
pub fn plan_dataset(count: usize, grammar: &PlateGrammar, seed: u64) -> Vec<PlannedSample> {
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            PlannedSample {
                seed: s,
                label: sample_label(grammar, &mut seed::stream(s, LABEL_STREAM)),
            }
        })
        .collect()
}

/// Label encoded in a `<label>_<seed>.png` file name.
pub fn label_from_filename(name: &str) -> Option<String> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let (label, seed) = stem.rsplit_once('_')?;
    seed.parse::<u64>().ok()?;
    Some(label.to_string())
}

/// Writes `<out_dir>/images/<label>_<seed>.png` and `<out_dir>/manifest.csv`.
/// On failure every file written by this call is removed again.
pub fn generate_dataset(count: usize, grammar: &PlateGrammar, params: &RenderParams, out_dir: &Path, seed: u64) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    params.validate()?;
    let plan = plan_dataset(count, grammar, seed);
    // layout failures are caught before anything touches the disk
    for p in &plan {
        layout(&p.label, params)?;
    }
    let images = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images)?;
    let results: Vec<(PathBuf, Result<()>)> = plan
        .par_iter()
        .map(|p| {
            let path = images.join(p.filename());
            let r = render_plate(&p.label, params, p.seed).and_then(|s| save_png(&s.image, &path));
            (path, r)
        })
        .collect();
    let manifest = Manifest {
        rows: plan
            .iter()
            .map(|p| ManifestRow {
                filename: p.filename(),
                label: p.label.clone(),
            })
            .collect(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let failure = results
        .iter()
        .find_map(|(_, r)| r.as_ref().err().map(|e| e.to_string()))
        .map(Err)
        .unwrap_or_else(|| manifest.write(&manifest_path).map_err(|e| e.to_string()));
    if let Err(message) = failure {
        for (path, _) in &results {
            let _ = std::fs::remove_file(path);
        }
        let _ = std::fs::remove_file(&manifest_path);
        return Err(Error::Io(std::io::Error::other(message)));
    }
    Ok(manifest)
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Manifest { rows })
    }

    /// Reads `<dir>/manifest.csv` and resolves each file under `<dir>/images`.
    pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
        let m = Self::read(&dir.join(MANIFEST_FILE))?;
        Ok(m.rows
            .into_iter()
            .map(|r| (dir.join(IMAGE_DIR).join(&r.filename), r.label))
            .collect())
    }
}
