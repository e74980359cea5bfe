//! Synthetic two-view cases.
//!
//! Each lesion has a latent position `(x, y)` in a 2-D volume. The CC-like
//! view places it at column `x`, the MLO-like view at column `(x + y) / 2`
//! (projection along a 45° axis); both share row `y` up to a pixel of
//! jitter. Occluded lesions and unlabeled distractors appear in one view
//! only and look the same as lesions, so the other view is what tells them
//! apart.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::PairLabel;
use crate::boxes::{box_iou, BBox, View};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_TAG: &str = "clnet-synth-1";
pub const ANNOTATION_TAG: &str = "clnet-ann-1";

/// Square single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn blank(size: usize) -> Self {
        Image {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    /// `[1×H×W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64).collect();
        Tensor::new(vec![1, self.size, self.size], data).expect("image shape")
    }

    pub fn flip_horizontal(&self) -> Image {
        let s = self.size;
        let mut out = self.clone();
        for r in 0..s {
            for c in 0..s {
                out.pixels[r * s + c] = self.pixels[r * s + (s - 1 - c)];
            }
        }
        out
    }

    /// Translates by whole pixels, filling with zeros.
    pub fn shift(&self, dx: i32, dy: i32) -> Image {
        let s = self.size as i32;
        let mut out = Image::blank(self.size);
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = (r - dy, c - dx);
                if (0..s).contains(&sr) && (0..s).contains(&sc) {
                    out.pixels[(r * s + c) as usize] = self.pixels[(sr * s + sc) as usize];
                }
            }
        }
        out
    }
}

/// Two views of one case, their boxes, and the cross-view correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub seed: u64,
    pub img_c: Image,
    pub img_m: Image,
    pub gt_c: Vec<BBox>,
    pub gt_m: Vec<BBox>,
    /// One entry per lesion: its box index in each view.
    pub pairs: Vec<PairLabel>,
}

impl PairedSample {
    pub fn image(&self, v: View) -> &Image {
        match v {
            View::Cc => &self.img_c,
            View::Mlo => &self.img_m,
        }
    }

    pub fn boxes(&self, v: View) -> &[BBox] {
        match v {
            View::Cc => &self.gt_c,
            View::Mlo => &self.gt_m,
        }
    }

    /// Every pair references a real box, and every box appears exactly once.
    pub fn check_labels(&self) -> Result<()> {
        let mut seen_c = vec![0; self.gt_c.len()];
        let mut seen_m = vec![0; self.gt_m.len()];
        for &(c, m) in &self.pairs {
            if c.is_none() && m.is_none() {
                return Err(Error::contract("pair references no box"));
            }
            for (idx, seen) in [(c, &mut seen_c), (m, &mut seen_m)] {
                if let Some(i) = idx {
                    *seen
                        .get_mut(i)
                        .ok_or_else(|| Error::contract(format!("pair references missing box {i}")))? += 1;
                }
            }
        }
        if seen_c.iter().chain(&seen_m).any(|&k| k != 1) {
            return Err(Error::contract("every box must appear in exactly one pair"));
        }
        Ok(())
    }

    pub fn annotation(&self) -> Annotation {
        Annotation {
            seed: self.seed,
            gt_c: self.gt_c.clone(),
            gt_m: self.gt_m.clone(),
            pairs: self.pairs.clone(),
        }
    }

    /// Mirrors both views left to right. Rows, and therefore the
    /// correspondence, are unchanged.
    pub fn flipped(&self) -> PairedSample {
        let flip = |b: &BBox| BBox { cx: 1.0 - b.cx, ..*b };
        PairedSample {
            img_c: self.img_c.flip_horizontal(),
            img_m: self.img_m.flip_horizontal(),
            gt_c: self.gt_c.iter().map(flip).collect(),
            gt_m: self.gt_m.iter().map(flip).collect(),
            ..self.clone()
        }
    }

    /// Crop jitter: shifts each view horizontally by its own offset and both
    /// vertically by a shared one, keeping rows aligned.
    pub fn shifted(&self, dx_c: i32, dx_m: i32, dy: i32) -> PairedSample {
        let s = self.img_c.size as f64;
        let mv = |b: &BBox, dx: i32| BBox {
            cx: b.cx + dx as f64 / s,
            cy: b.cy + dy as f64 / s,
            ..*b
        };
        PairedSample {
            img_c: self.img_c.shift(dx_c, dy),
            img_m: self.img_m.shift(dx_m, dy),
            gt_c: self.gt_c.iter().map(|b| mv(b, dx_c)).collect(),
            gt_m: self.gt_m.iter().map(|b| mv(b, dx_m)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_lesions: usize,
    pub max_lesions: usize,
    /// Lesion radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Amplitude of uniform background texture noise.
    pub noise: f64,
    /// Probability that a lesion is visible in one view only.
    pub p_occ: f64,
    /// Maximum number of distractor blobs per view.
    pub max_distractors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            min_lesions: 1,
            max_lesions: 3,
            min_radius: 3.0,
            max_radius: 5.5,
            noise: 0.15,
            p_occ: 0.15,
            max_distractors: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_occ) {
            return Err(Error::config("p_occ", "must lie in [0, 1]"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if self.min_lesions > self.max_lesions {
            return Err(Error::config("min_lesions", "exceeds max_lesions"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("min_radius", "need 0 < min_radius <= max_radius"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

const MAX_BOX_IOU: f64 = 0.3;
const MARGIN: f64 = 0.14;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    intensity: f64,
}

impl Blob {
    fn bbox(&self, size: f64) -> BBox {
        BBox::new(self.cx / size, self.cy / size, 2.0 * self.rx / size, 2.0 * self.ry / size)
    }
}

fn random_blob(rng: &mut ChaCha8Rng, cfg: &GenConfig, cx: f64, cy: f64) -> Blob {
    let r = rng.gen_range(cfg.min_radius..=cfg.max_radius);
    let aspect = rng.gen_range(1.0..1.5);
    let (rx, ry) = if rng.gen_bool(0.5) { (r * aspect, r) } else { (r, r * aspect) };
    Blob {
        cx,
        cy,
        rx,
        ry,
        intensity: rng.gen_range(0.55..0.9),
    }
}

/// Jitters size and brightness for the second projection of a lesion.
fn reproject(rng: &mut ChaCha8Rng, b: Blob, cx: f64, cy: f64) -> Blob {
    Blob {
        cx,
        cy,
        rx: b.rx * rng.gen_range(0.85..1.15),
        ry: b.ry * rng.gen_range(0.85..1.15),
        intensity: (b.intensity * rng.gen_range(0.9..1.1)).min(1.0),
    }
}

fn fits(placed: &[BBox], b: BBox) -> bool {
    placed.iter().all(|p| box_iou(*p, b) <= MAX_BOX_IOU)
}

fn render(size: usize, blobs: &[Blob], noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::blank(size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut v = noise * rng.gen::<f64>();
            for b in blobs {
                let dx = (x - b.cx) / b.rx;
                let dy = (y - b.cy) / b.ry;
                let d2 = dx * dx + dy * dy;
                if d2 < 1.0 {
                    v += b.intensity * (1.0 - d2 * d2);
                }
            }
            img.pixels[r * size + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Deterministic synthetic case for `seed`.
pub fn generate_case(seed: u64, cfg: &GenConfig) -> Result<PairedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size as f64;
    let span = MARGIN..(1.0 - MARGIN);
    let k = rng.gen_range(cfg.min_lesions..=cfg.max_lesions);

    let mut blobs_c: Vec<Blob> = Vec::new();
    let mut blobs_m: Vec<Blob> = Vec::new();
    let mut boxes_c: Vec<BBox> = Vec::new();
    let mut boxes_m: Vec<BBox> = Vec::new();
    let mut pairs = Vec::new();
    for _ in 0..k {
        for _ in 0..PLACEMENT_TRIES {
            let (x, y) = (rng.gen_range(span.clone()), rng.gen_range(span.clone()));
            let proto = random_blob(&mut rng, cfg, x * s, y * s);
            let jitter = rng.gen_range(-1i32..=1) as f64;
            let mlo = reproject(&mut rng, proto, (x + y) / 2.0 * s, y * s + jitter);
            let vis = if rng.gen_bool(cfg.p_occ) {
                if rng.gen_bool(0.5) {
                    (true, false)
                } else {
                    (false, true)
                }
            } else {
                (true, true)
            };
            let (bc, bm) = (proto.bbox(s), mlo.bbox(s));
            if (vis.0 && !fits(&boxes_c, bc)) || (vis.1 && !fits(&boxes_m, bm)) {
                continue;
            }
            let mut entry = (None, None);
            if vis.0 {
                entry.0 = Some(boxes_c.len());
                boxes_c.push(bc);
                blobs_c.push(proto);
            }
            if vis.1 {
                entry.1 = Some(boxes_m.len());
                boxes_m.push(bm);
                blobs_m.push(mlo);
            }
            pairs.push(entry);
            break;
        }
    }

    // Distractors avoid lesions but are unlabeled.
    for (blobs, boxes) in [(&mut blobs_c, &boxes_c), (&mut blobs_m, &boxes_m)] {
        let count = rng.gen_range(0..=cfg.max_distractors);
        let mut taken = boxes.clone();
        for _ in 0..count {
            for _ in 0..PLACEMENT_TRIES {
                let (x, y) = (rng.gen_range(span.clone()), rng.gen_range(span.clone()));
                let b = random_blob(&mut rng, cfg, x * s, y * s);
                if fits(&taken, b.bbox(s)) {
                    taken.push(b.bbox(s));
                    blobs.push(b);
                    break;
                }
            }
        }
    }

    let img_c = render(cfg.image_size, &blobs_c, cfg.noise, &mut rng);
    let img_m = render(cfg.image_size, &blobs_m, cfg.noise, &mut rng);
    Ok(PairedSample {
        seed,
        img_c,
        img_m,
        gt_c: boxes_c,
        gt_m: boxes_m,
        pairs,
    })
}

/// `n` cases with seeds `base, base + 1, ...`.
pub fn generate_dataset(base_seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<PairedSample>> {
    (0..n as u64).map(|i| generate_case(base_seed.wrapping_add(i), cfg)).collect()
}

// ----------------------------------------------------------------------------
// Files

type PairJson = (Option<usize>, Option<usize>);

#[derive(Serialize, Deserialize)]
struct SampleLine {
    format: String,
    seed: u64,
    shape: [usize; 2],
    cc: String,
    mlo: String,
    gt_cc: Vec<[f64; 4]>,
    gt_mlo: Vec<[f64; 4]>,
    pairs: Vec<PairJson>,
}

/// Boxes and pair labels without pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub seed: u64,
    pub gt_c: Vec<BBox>,
    pub gt_m: Vec<BBox>,
    pub pairs: Vec<PairLabel>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    format: String,
    seed: u64,
    gt_cc: Vec<[f64; 4]>,
    gt_mlo: Vec<[f64; 4]>,
    pairs: Vec<PairJson>,
}

fn encode_image(img: &Image) -> String {
    let mut bytes = Vec::with_capacity(img.pixels.len() * 4);
    for p in &img.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_image(s: &str, shape: [usize; 2], line: usize) -> Result<Image> {
    let parse = |msg: String| Error::Parse { line, offset: 0, msg };
    let bytes = B64.decode(s).map_err(|e| parse(format!("bad base64 image: {e}")))?;
    if shape[0] != shape[1] || bytes.len() != shape[0] * shape[1] * 4 {
        return Err(parse(format!("image payload of {} bytes for shape {shape:?}", bytes.len())));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image { size: shape[0], pixels })
}

fn boxes_out(b: &[BBox]) -> Vec<[f64; 4]> {
    b.iter().map(|b| b.to_array()).collect()
}

fn boxes_in(b: &[[f64; 4]]) -> Vec<BBox> {
    b.iter().map(|a| BBox::from_slice(a)).collect()
}

pub fn sample_to_line(s: &PairedSample) -> String {
    let line = SampleLine {
        format: DATASET_TAG.into(),
        seed: s.seed,
        shape: [s.img_c.size, s.img_c.size],
        cc: encode_image(&s.img_c),
        mlo: encode_image(&s.img_m),
        gt_cc: boxes_out(&s.gt_c),
        gt_mlo: boxes_out(&s.gt_m),
        pairs: s.pairs.clone(),
    };
    serde_json::to_string(&line).expect("sample serializes")
}

fn json_error(e: serde_json::Error, line: usize) -> Error {
    Error::Parse {
        line,
        offset: e.column(),
        msg: e.to_string(),
    }
}

fn check_tag(tag: &str, want: &str, line: usize) -> Result<()> {
    if tag != want {
        return Err(Error::Parse {
            line,
            offset: 0,
            msg: format!("format tag `{tag}`, expected `{want}`"),
        });
    }
    Ok(())
}

pub fn sample_from_line(text: &str, line: usize) -> Result<PairedSample> {
    let l: SampleLine = serde_json::from_str(text).map_err(|e| json_error(e, line))?;
    check_tag(&l.format, DATASET_TAG, line)?;
    let s = PairedSample {
        seed: l.seed,
        img_c: decode_image(&l.cc, l.shape, line)?,
        img_m: decode_image(&l.mlo, l.shape, line)?,
        gt_c: boxes_in(&l.gt_cc),
        gt_m: boxes_in(&l.gt_mlo),
        pairs: l.pairs,
    };
    s.check_labels().map_err(|e| Error::Parse {
        line,
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok(s)
}

/// One JSON object per line; a file with no lines is an empty dataset.
pub fn write_dataset(path: &Path, samples: &[PairedSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}", sample_to_line(s))?;
    }
    f.flush()?;
    Ok(())
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str, usize) -> Result<T>) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<PairedSample>> {
    read_lines(path, sample_from_line)
}

impl Annotation {
    fn line(&self) -> AnnotationLine {
        AnnotationLine {
            format: ANNOTATION_TAG.into(),
            seed: self.seed,
            gt_cc: boxes_out(&self.gt_c),
            gt_mlo: boxes_out(&self.gt_m),
            pairs: self.pairs.clone(),
        }
    }
}

/// Serializes in the annotation-file line format.
impl Serialize for Annotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.line().serialize(s)
    }
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for a in anns {
        writeln!(f, "{}", serde_json::to_string(a).expect("annotation serializes"))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    read_lines(path, |text, line| {
        let l: AnnotationLine = serde_json::from_str(text).map_err(|e| json_error(e, line))?;
        check_tag(&l.format, ANNOTATION_TAG, line)?;
        Ok(Annotation {
            seed: l.seed,
            gt_c: boxes_in(&l.gt_cc),
            gt_m: boxes_in(&l.gt_mlo),
            pairs: l.pairs,
        })
    })
}
