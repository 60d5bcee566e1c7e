//! Deterministic synthetic scenes: colored shapes for grounding, bitmap
//! glyph strings for OCR, and a closed caption grammar for description.
//!
//! Every derived string (caption, OCR text, region text, instruction
//! answers) is a pure function of the `SceneSpec`, so ground truth is always
//! recomputable. Images travel in the DBFT tensor container; the manifest is
//! JSON lines with one record per scene.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::tensor::dbft;
use crate::vision::ImageTensor;

pub const IMAGE_SIDE: usize = 64;
pub const MAX_SHAPES: usize = 4;
pub const MAX_GLYPH_STRINGS: usize = 2;
pub const MAX_GLYPH_LEN: usize = 6;

/// Index 0 doubles as the default background.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
];

pub fn color_name(index: usize) -> &'static str {
    PALETTE[index].0
}

const FONT_W: usize = 5;
const FONT_H: usize = 7;
/// Horizontal advance per character: five columns plus one of spacing.
const FONT_ADVANCE: usize = FONT_W + 1;

/// 5x7 bitmaps over A-Z0-9; each byte holds one row in its five low bits,
/// most significant bit leftmost.
fn glyph_rows(c: char) -> Option<[u8; FONT_H]> {
    let rows = match c {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
        'E' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'F' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'G' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        _ => return None,
    };
    Some(rows)
}

/// Pixel width of a rendered glyph string.
pub fn glyph_width(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * FONT_ADVANCE - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Bbox corners are inclusive: `(8,8,24,24)` covers a 17x17 pixel block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphString {
    pub text: String,
    pub x: usize,
    pub y: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    pub glyphs: Vec<GlyphString>,
    pub background: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Err(CoreError::argument("scene_spec", detail));
        if self.background >= PALETTE.len() {
            return err(format!("background color index {} out of palette", self.background));
        }
        if self.shapes.len() > MAX_SHAPES {
            return err(format!("{} shapes exceed the limit of {MAX_SHAPES}", self.shapes.len()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.color >= PALETTE.len() {
                return err(format!("shape {i} color index {} out of palette", s.color));
            }
            let [x1, y1, x2, y2] = s.bbox;
            if x1 > x2 || y1 > y2 || x2 >= IMAGE_SIDE || y2 >= IMAGE_SIDE {
                return err(format!("shape {i} bbox ({x1},{y1},{x2},{y2}) out of bounds"));
            }
        }
        if self.glyphs.len() > MAX_GLYPH_STRINGS {
            return err(format!(
                "{} glyph strings exceed the limit of {MAX_GLYPH_STRINGS}",
                self.glyphs.len()
            ));
        }
        for (i, g) in self.glyphs.iter().enumerate() {
            if g.color >= PALETTE.len() {
                return err(format!("glyph {i} color index {} out of palette", g.color));
            }
            let n = g.text.chars().count();
            if n == 0 || n > MAX_GLYPH_LEN {
                return err(format!("glyph {i} length {n} outside 1..={MAX_GLYPH_LEN}"));
            }
            if let Some(c) = g.text.chars().find(|&c| glyph_rows(c).is_none()) {
                return err(format!("glyph {i} character {c:?} is not in the font"));
            }
            if g.x + glyph_width(n) > IMAGE_SIDE || g.y + FONT_H > IMAGE_SIDE {
                return err(format!("glyph {i} at ({},{}) runs off the image", g.x, g.y));
            }
        }
        Ok(())
    }

    /// Fixed grammar over palette names, shape kinds, and quoted glyph text,
    /// so the character set stays closed.
    pub fn caption(&self) -> String {
        let mut parts: Vec<String> = self
            .shapes
            .iter()
            .map(|s| format!("a {} {}", color_name(s.color), s.kind.name()))
            .collect();
        parts.extend(self.glyphs.iter().map(|g| format!("the text \"{}\"", g.text)));
        if parts.is_empty() {
            return "an empty scene".to_string();
        }
        format!("a scene with {}", list_join(&parts))
    }

    /// Glyph strings in reading order: top-to-bottom, then left-to-right.
    pub fn ocr_text(&self) -> String {
        let mut refs: Vec<&GlyphString> = self.glyphs.iter().collect();
        refs.sort_by_key(|g| (g.y, g.x));
        refs.iter().map(|g| g.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn region_text(&self) -> String {
        self.shapes
            .iter()
            .map(|s| {
                let [x1, y1, x2, y2] = s.bbox;
                format!("{} at ({x1},{y1},{x2},{y2})", s.kind.name())
            })
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// The first kind that occurs exactly once, with its shape; color and
    /// locate questions are only asked when the subject is unambiguous.
    fn unique_kind_shape(&self) -> Option<&Shape> {
        ShapeKind::ALL.iter().find_map(|&k| {
            let mut hits = self.shapes.iter().filter(|s| s.kind == k);
            match (hits.next(), hits.next()) {
                (Some(s), None) => Some(s),
                _ => None,
            }
        })
    }

    /// Rule-derived question/answer pairs; every answer is recomputable from
    /// the spec.
    pub fn instructions(&self) -> Vec<Instruction> {
        let mut out = vec![Instruction {
            question: "how many shapes are in the image?".to_string(),
            answer: self.shapes.len().to_string(),
            kind: InstructionKind::Count,
        }];
        if let Some(s) = self.unique_kind_shape() {
            out.push(Instruction {
                question: format!("what color is the {}?", s.kind.name()),
                answer: color_name(s.color).to_string(),
                kind: InstructionKind::Color,
            });
        }
        let ocr = self.ocr_text();
        if !ocr.is_empty() {
            out.push(Instruction {
                question: "what does the text say?".to_string(),
                answer: ocr,
                kind: InstructionKind::ReadText,
            });
        }
        if let Some(s) = self.unique_kind_shape() {
            let [x1, y1, x2, y2] = s.bbox;
            out.push(Instruction {
                question: format!("where is the {}?", s.kind.name()),
                answer: format!("({x1},{y1},{x2},{y2})"),
                kind: InstructionKind::Locate,
            });
        }
        out
    }

    pub fn tags(&self) -> Vec<String> {
        if self.glyphs.is_empty() {
            Vec::new()
        } else {
            vec!["text-heavy".to_string()]
        }
    }
}

fn list_join(parts: &[String]) -> String {
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionKind {
    Count,
    Color,
    ReadText,
    Locate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub question: String,
    pub answer: String,
    pub kind: InstructionKind,
}

/// Rasterize a validated spec: background fill, then shapes in spec order,
/// then glyphs. Same spec, same pixels.
pub fn render_scene(spec: &SceneSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let bg = PALETTE[spec.background].1;
    let mut px = vec![0.0; IMAGE_SIDE * IMAGE_SIDE * 3];
    for p in px.chunks_exact_mut(3) {
        p.copy_from_slice(&bg);
    }
    for s in &spec.shapes {
        let color = PALETTE[s.color].1;
        let [x1, y1, x2, y2] = s.bbox;
        match s.kind {
            ShapeKind::Square => {
                for y in y1..=y2 {
                    for x in x1..=x2 {
                        put(&mut px, x, y, color);
                    }
                }
            }
            ShapeKind::Circle => {
                let cx = (x1 + x2) as f64 / 2.0;
                let cy = (y1 + y2) as f64 / 2.0;
                let r = (x2 - x1).min(y2 - y1) as f64 / 2.0;
                for y in y1..=y2 {
                    for x in x1..=x2 {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx * dx + dy * dy <= r * r {
                            put(&mut px, x, y, color);
                        }
                    }
                }
            }
            ShapeKind::Triangle => {
                // Apex at the top-center of the bbox, base along its bottom.
                let cx = (x1 + x2) as f64 / 2.0;
                for y in y1..=y2 {
                    let t = if y2 == y1 { 1.0 } else { (y - y1) as f64 / (y2 - y1) as f64 };
                    let half = t * (x2 - x1) as f64 / 2.0;
                    let lo = (cx - half).ceil().max(x1 as f64) as usize;
                    let hi = (cx + half).floor().min(x2 as f64) as usize;
                    for x in lo..=hi {
                        put(&mut px, x, y, color);
                    }
                }
            }
        }
    }
    for g in &spec.glyphs {
        let color = PALETTE[g.color].1;
        for (i, c) in g.text.chars().enumerate() {
            let rows = glyph_rows(c).expect("validated glyph character");
            let ox = g.x + i * FONT_ADVANCE;
            for (r, &bits) in rows.iter().enumerate() {
                for c in 0..FONT_W {
                    if bits & (1 << (FONT_W - 1 - c)) != 0 {
                        put(&mut px, ox + c, g.y + r, color);
                    }
                }
            }
        }
    }
    ImageTensor::from_rows(IMAGE_SIDE, IMAGE_SIDE, px)
}

fn put(px: &mut [f64], x: usize, y: usize, color: [f64; 3]) {
    let o = (y * IMAGE_SIDE + x) * 3;
    px[o..o + 3].copy_from_slice(&color);
}

/// Sample one scene as a pure function of `(seed, index, mix)`. `mix` holds
/// relative weights for square, circle, triangle.
pub fn sample_scene(seed: u64, index: u64, mix: &[f64; 3]) -> Result<SceneSpec> {
    let total: f64 = mix.iter().sum();
    if mix.iter().any(|&w| !(w >= 0.0)) || total <= 0.0 {
        return Err(CoreError::argument(
            "sample_scene",
            format!("mix weights {mix:?} must be nonnegative and not all zero"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let n_shapes = rng.gen_range(1..=MAX_SHAPES);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let mut u = rng.gen::<f64>() * total;
        let mut kind = ShapeKind::Triangle;
        for (k, &w) in ShapeKind::ALL.iter().zip(mix) {
            if u < w {
                kind = *k;
                break;
            }
            u -= w;
        }
        let color = rng.gen_range(1..PALETTE.len());
        let w = rng.gen_range(8..=20);
        let h = if kind == ShapeKind::Square { w } else { rng.gen_range(8..=20) };
        let x1 = rng.gen_range(0..=IMAGE_SIDE - w);
        let y1 = rng.gen_range(0..=IMAGE_SIDE - h);
        shapes.push(Shape { kind, color, bbox: [x1, y1, x1 + w - 1, y1 + h - 1] });
    }

    const CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let n_glyphs = rng.gen_range(0..=MAX_GLYPH_STRINGS);
    let mut glyphs = Vec::with_capacity(n_glyphs);
    for _ in 0..n_glyphs {
        let len = rng.gen_range(1..=MAX_GLYPH_LEN);
        let text: String =
            (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect();
        let color = rng.gen_range(1..PALETTE.len());
        let x = rng.gen_range(0..=IMAGE_SIDE - glyph_width(len));
        let y = rng.gen_range(0..=IMAGE_SIDE - FONT_H);
        glyphs.push(GlyphString { text, x, y, color });
    }

    Ok(SceneSpec { shapes, glyphs, background: 0, seed })
}

/// One manifest line. The scene rides along so every derived field can be
/// recomputed and the pixels re-rendered bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub image: String,
    pub scene: SceneSpec,
    pub caption: String,
    pub ocr_text: String,
    pub region_text: String,
    pub instructions: Vec<Instruction>,
    pub tags: Vec<String>,
    pub sha256: String,
    #[serde(skip)]
    pub image_path: PathBuf,
}

impl DatasetRecord {
    /// Read, checksum, and decode this record's pixels.
    pub fn load_image(&self) -> Result<ImageTensor> {
        let name = || format!("record {} ({})", self.id, self.image);
        let bytes = fs::read(&self.image_path)
            .map_err(|e| CoreError::ingestion(name(), format!("image unreadable: {e}")))?;
        if sha256_hex(&bytes) != self.sha256 {
            return Err(CoreError::ingestion(name(), "image checksum mismatch"));
        }
        let t = dbft::decode(&bytes).map_err(|e| CoreError::ingestion(name(), e.to_string()))?;
        ImageTensor::new(t).map_err(|e| CoreError::ingestion(name(), e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenOptions {
    pub n: usize,
    pub seed: u64,
    pub mix: [f64; 3],
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { n: 5000, seed: 0, mix: [1.0, 1.0, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSummary {
    pub records: usize,
    pub instruction_pairs: usize,
    pub text_heavy: usize,
    pub manifest: PathBuf,
}

/// Write `n` scenes under `dir`: `images/NNNNNN.dbft` plus `manifest.jsonl`.
pub fn generate_dataset(dir: &Path, opts: &GenOptions) -> Result<GenSummary> {
    if opts.n == 0 {
        return Err(CoreError::argument("generate_dataset", "need at least one record"));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = BufWriter::new(fs::File::create(&manifest)?);
    let mut instruction_pairs = 0;
    let mut text_heavy = 0;
    for index in 0..opts.n {
        let scene = sample_scene(opts.seed, index as u64, &opts.mix)?;
        let bytes = dbft::encode(render_scene(&scene)?.pixels());
        let image = format!("images/{index:06}.dbft");
        fs::write(dir.join(&image), &bytes)?;
        let instructions = scene.instructions();
        instruction_pairs += instructions.len();
        let tags = scene.tags();
        text_heavy += usize::from(!scene.glyphs.is_empty());
        let record = DatasetRecord {
            id: index as u64,
            sha256: sha256_hex(&bytes),
            caption: scene.caption(),
            ocr_text: scene.ocr_text(),
            region_text: scene.region_text(),
            instructions,
            tags,
            scene,
            image,
            image_path: PathBuf::new(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(GenSummary { records: opts.n, instruction_pairs, text_heavy, manifest })
}

fn verify_record(line: usize, raw: &str, base: &Path) -> Result<DatasetRecord> {
    let mut record: DatasetRecord = serde_json::from_str(raw).map_err(|e| {
        CoreError::ingestion(format!("manifest line {line}"), format!("bad record: {e}"))
    })?;
    record.image_path = base.join(&record.image);
    let image = record.load_image()?;
    if image.h() != IMAGE_SIDE || image.w() != IMAGE_SIDE {
        return Err(CoreError::ingestion(
            format!("record {} ({})", record.id, record.image),
            format!("image is {}x{}, expected {IMAGE_SIDE}x{IMAGE_SIDE}", image.h(), image.w()),
        ));
    }
    Ok(record)
}

fn scan_dataset(manifest: &Path, mut on_err: impl FnMut(CoreError) -> Result<()>) -> Result<Vec<DatasetRecord>> {
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = fs::File::open(manifest).map_err(|e| {
        CoreError::ingestion(manifest.display().to_string(), format!("manifest unreadable: {e}"))
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let raw = line?;
        if raw.trim().is_empty() {
            continue;
        }
        match verify_record(line_no, &raw, &base) {
            Ok(r) => records.push(r),
            Err(e) => on_err(e)?,
        }
    }
    Ok(records)
}

/// Strict load: every record's image must exist, decode, and match its
/// checksum. Records come back in manifest order; pixels are verified and
/// dropped (re-read them through [`DatasetRecord::load_image`]).
pub fn load_dataset(manifest: &Path) -> Result<Vec<DatasetRecord>> {
    scan_dataset(manifest, Err)
}

/// Permissive load: broken records are skipped and reported alongside the
/// survivors.
pub fn load_dataset_permissive(manifest: &Path) -> Result<(Vec<DatasetRecord>, Vec<CoreError>)> {
    let mut errors = Vec::new();
    let records = scan_dataset(manifest, |e| {
        errors.push(e);
        Ok(())
    })?;
    Ok((records, errors))
}
