//! Synthetic HOI scenes, dataset manifests, augmentation and the synthetic
//! teacher embedding.
//!
//! A scene holds one person glyph and one object glyph. Verbs are geometric
//! predicates between the two boxes, expressed in units of the person's
//! height so that scaling and horizontal flips preserve every label.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::CornerBox;
use crate::error::{read_json, write_json, Error, Result};
use crate::label_space::{Article, LabelSpace, ObjectRecord, TripletRecord, VerbRecord};
use crate::tensor::Tensor;
use crate::vlkt::{hoi_prompt, EmbeddingProvider, TeacherEmbedding, TeacherSource, BACKGROUND_PROMPT};

/// Environment variable that overrides the dataset root of every manifest.
pub const DATA_DIR_ENV: &str = "GENHOI_DATA_DIR";

/// Geometric relation between a person box `p` and an object box `o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbRule {
    /// More than half of the object lies inside the person box.
    Overlap,
    /// Person stands on the object: horizontally aligned, the person's feet
    /// inside the object's upper half.
    PersonAbove,
    /// Side by side with a small horizontal gap and shared vertical extent.
    Adjacent,
    /// Object centre above the person's head, close and aligned.
    ObjectAbove,
    /// Separated by a wide gap.
    Apart,
}

fn gap_x(p: &CornerBox, o: &CornerBox) -> f64 {
    (o.x1 - p.x2).max(p.x1 - o.x2)
}

fn gap_y(p: &CornerBox, o: &CornerBox) -> f64 {
    (o.y1 - p.y2).max(p.y1 - o.y2)
}

impl VerbRule {
    pub fn holds(self, p: &CornerBox, o: &CornerBox) -> bool {
        let u = p.height();
        let inside = p.intersection(o) / o.area();
        let dx = (p.center().0 - o.center().0).abs();
        match self {
            VerbRule::Overlap => inside > 0.5,
            VerbRule::PersonAbove => dx <= 0.15 * u && p.y2 >= o.y1 && p.y2 <= o.center().1 && inside <= 0.5,
            VerbRule::Adjacent => {
                let v_overlap = p.y2.min(o.y2) - p.y1.max(o.y1);
                let g = gap_x(p, o);
                v_overlap >= 0.5 * o.height() && (0.0..=0.25 * u).contains(&g)
            }
            VerbRule::ObjectAbove => o.center().1 < p.y1 && dx <= 0.3 * u && o.y2 >= p.y1 - 0.3 * u,
            VerbRule::Apart => gap_x(p, o).max(gap_y(p, o)) >= 0.45 * u,
        }
    }
}

/// Labels of a pair: every valid triplet of `object_id` whose verb rule holds.
pub fn pair_labels(ls: &LabelSpace, rules: &[VerbRule], p: &CornerBox, o: &CornerBox, object_id: usize) -> Vec<usize> {
    ls.triplets()
        .iter()
        .filter(|t| t.object_id == object_id && rules[t.verb_id].holds(p, o))
        .map(|t| t.id)
        .collect()
}

/// Glyph shape of an object category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disc,
    Wheels,
    Diamond,
    Cup,
    Square,
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub glyph: Glyph,
    pub color: [f64; 3],
    /// Width and height ranges in pixels at 64x64.
    pub width: [f64; 2],
    pub height: [f64; 2],
}

/// Toy taxonomy: 4 objects, 5 verbs, 12 valid triplets.
pub fn toy_label_space() -> LabelSpace {
    let objects = [("ball", Article::A), ("bicycle", Article::A), ("kite", Article::A), ("cup", Article::A)]
        .iter()
        .enumerate()
        .map(|(id, (name, article))| ObjectRecord { id, name: name.to_string(), article: *article })
        .collect();
    let verbs = [("hold", "holding"), ("ride", "riding"), ("push", "pushing"), ("throw", "throwing")]
        .iter()
        .enumerate()
        .map(|(id, (n, g))| VerbRecord { id, name: n.to_string(), gerund: Some(g.to_string()), is_no_interaction: false })
        .chain(std::iter::once(VerbRecord {
            id: 4,
            name: "no_interaction".into(),
            gerund: None,
            is_no_interaction: true,
        }))
        .collect();
    // (verb, object)
    let pairs = [(0, 0), (2, 0), (3, 0), (4, 0), (1, 1), (2, 1), (4, 1), (0, 2), (3, 2), (4, 2), (0, 3), (4, 3)];
    let triplets =
        pairs.iter().enumerate().map(|(id, &(verb_id, object_id))| TripletRecord { id, verb_id, object_id }).collect();
    LabelSpace::new(objects, verbs, triplets).expect("toy taxonomy is valid")
}

pub fn toy_verb_rules() -> Vec<VerbRule> {
    vec![VerbRule::Overlap, VerbRule::PersonAbove, VerbRule::Adjacent, VerbRule::ObjectAbove, VerbRule::Apart]
}

pub fn toy_object_styles() -> Vec<ObjectStyle> {
    vec![
        ObjectStyle { glyph: Glyph::Disc, color: [0.85, 0.15, 0.1], width: [8.0, 12.0], height: [8.0, 12.0] },
        ObjectStyle { glyph: Glyph::Wheels, color: [0.1, 0.3, 0.9], width: [14.0, 19.0], height: [9.0, 12.0] },
        ObjectStyle { glyph: Glyph::Diamond, color: [0.1, 0.7, 0.2], width: [9.0, 12.0], height: [12.0, 15.0] },
        ObjectStyle { glyph: Glyph::Cup, color: [0.95, 0.6, 0.05], width: [7.0, 10.0], height: [9.0, 12.0] },
    ]
}

/// Triplets from most to least frequent in the toy taxonomy.
pub fn toy_popularity() -> Vec<usize> {
    vec![4, 0, 10, 8, 5, 3, 1, 9, 6, 2, 11, 7]
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Training triplet frequencies follow `rank^-exponent`.
    pub long_tail_exponent: f64,
    /// Exponent for the test split; `0` gives a balanced test set.
    pub test_long_tail_exponent: f64,
    pub seed: u64,
    /// Triplet ids ordered by decreasing frequency; defaults to the toy order.
    pub popularity: Option<Vec<usize>>,
    pub verb_rules: Vec<VerbRule>,
    pub object_styles: Vec<ObjectStyle>,
    pub retry_budget: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 1600,
            n_test: 400,
            image_size: 64,
            long_tail_exponent: 1.0,
            test_long_tail_exponent: 0.0,
            seed: 0,
            popularity: None,
            verb_rules: toy_verb_rules(),
            object_styles: toy_object_styles(),
            retry_budget: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub human_box: CornerBox,
    pub object_box: CornerBox,
    pub object_id: usize,
    pub hoi_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub label_space_path: String,
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Directory that image files are resolved against: the environment
    /// override if set, else the manifest's own directory.
    pub fn root(manifest_path: &Path) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        }
    }

    /// Checks boxes, ids and labels against the label space.
    pub fn validate(&self, ls: &LabelSpace) -> Result<()> {
        let mut ids = BTreeSet::new();
        for im in &self.images {
            if !ids.insert(im.image_id) {
                return Err(Error::Dataset(format!("duplicate image_id {}", im.image_id)));
            }
            for (k, a) in im.annotations.iter().enumerate() {
                let ctx = || format!("image {} annotation {k}", im.image_id);
                for b in [&a.human_box, &a.object_box] {
                    if !b.is_valid() || !b.within(im.width as f64, im.height as f64) {
                        return Err(Error::Dataset(format!("{}: degenerate or out-of-bounds box {b:?}", ctx())));
                    }
                }
                if a.object_id >= ls.num_objects() {
                    return Err(Error::Dataset(format!("{}: unknown object_id {}", ctx(), a.object_id)));
                }
                for &h in &a.hoi_ids {
                    if h >= ls.num_triplets() || ls.object_of(h) != a.object_id {
                        return Err(Error::Dataset(format!(
                            "{}: hoi_id {h} does not belong to object {}",
                            ctx(),
                            a.object_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Instances per triplet (one count per annotation label).
    pub fn triplet_counts(&self, n: usize) -> Vec<u64> {
        let mut c = vec![0; n];
        for a in self.images.iter().flat_map(|i| &i.annotations) {
            for &h in &a.hoi_ids {
                c[h] += 1;
            }
        }
        c
    }
}

/// An image with its annotations; pixels are `(H*W) x 3` rows in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

struct Canvas<'a> {
    t: &'a mut Tensor,
    w: usize,
    h: usize,
}

impl Canvas<'_> {
    fn paint(&mut self, b: &CornerBox, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let x0 = b.x1.floor().max(0.0) as usize;
        let y0 = b.y1.floor().max(0.0) as usize;
        let x1 = (b.x2.ceil() as usize).min(self.w);
        let y1 = (b.y2.ceil() as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                // pixel centre in box-relative [0, 1] coordinates
                let u = (x as f64 + 0.5 - b.x1) / b.width();
                let v = (y as f64 + 0.5 - b.y1) / b.height();
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && inside(u, v) {
                    self.t.row_mut(y * self.w + x).copy_from_slice(&color);
                }
            }
        }
    }
}

fn draw_person(c: &mut Canvas<'_>, b: &CornerBox) {
    let body = [0.2, 0.2, 0.35];
    let skin = [0.95, 0.75, 0.6];
    c.paint(b, body, |u, v| {
        let torso = (0.3..=0.7).contains(&u) && (0.22..=0.65).contains(&v);
        let arms = (0.3..=0.42).contains(&v);
        let legs = (0.62..=1.0).contains(&v) && ((0.25..=0.45).contains(&u) || (0.55..=0.75).contains(&u));
        torso || arms || legs
    });
    c.paint(b, skin, |u, v| {
        let (du, dv) = ((u - 0.5) / 0.3, (v - 0.11) / 0.11);
        du * du + dv * dv <= 1.0
    });
}

fn draw_object(c: &mut Canvas<'_>, b: &CornerBox, style: &ObjectStyle) {
    let col = style.color;
    match style.glyph {
        Glyph::Disc => c.paint(b, col, |u, v| (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25),
        Glyph::Wheels => c.paint(b, col, |u, v| {
            let wheel = |cu: f64| {
                let r2 = ((u - cu) / 0.25).powi(2) + ((v - 0.62) / 0.38).powi(2);
                (0.45..=1.0).contains(&r2)
            };
            let frame = (0.25..=0.75).contains(&u) && (0.2..=0.35).contains(&v);
            let post = (0.45..=0.55).contains(&u) && v <= 0.62;
            wheel(0.25) || wheel(0.75) || frame || post
        }),
        Glyph::Diamond => c.paint(b, col, |u, v| (u - 0.5).abs() + (v - 0.5).abs() <= 0.5),
        Glyph::Cup => c.paint(b, col, |u, v| {
            let body = (0.0..=0.75).contains(&u) && v >= 0.1;
            let handle = (0.75..=1.0).contains(&u) && (0.3..=0.65).contains(&v) && !(0.8..=0.9).contains(&u);
            body || handle
        }),
        Glyph::Square => c.paint(b, col, |_, _| true),
        Glyph::Ring => c.paint(b, col, |u, v| {
            let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            (0.09..=0.25).contains(&r2)
        }),
    }
}

/// Rasterizes a scene: background, then each person, then each object.
pub fn render(size: usize, annotations: &[Annotation], styles: &[ObjectStyle], rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = [rng.gen_range(0.7..0.95), rng.gen_range(0.7..0.95), rng.gen_range(0.7..0.95)];
    let mut t = Tensor::zeros(size * size, 3);
    for r in 0..size * size {
        for (ch, b) in base.iter().enumerate() {
            t.set(r, ch, (b + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
        }
    }
    let mut c = Canvas { t: &mut t, w: size, h: size };
    for a in annotations {
        draw_person(&mut c, &a.human_box);
    }
    for a in annotations {
        draw_object(&mut c, &a.object_box, &styles[a.object_id]);
    }
    t
}

fn sample_power_law(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Proposes an object box for the given rule relative to person box `p`.
fn propose(rule: VerbRule, p: &CornerBox, ow: f64, oh: f64, size: f64, rng: &mut impl Rng) -> CornerBox {
    let u = p.height();
    let (pcx, _) = p.center();
    let (cx, cy) = match rule {
        VerbRule::Overlap => (pcx + rng.gen_range(-3.0..3.0), p.y1 + u * rng.gen_range(0.35..0.7)),
        VerbRule::PersonAbove => {
            let top = p.y2 - rng.gen_range(0.05..0.45) * oh;
            (pcx + rng.gen_range(-0.12..0.12) * u, top + oh / 2.0)
        }
        VerbRule::Adjacent => {
            let g = rng.gen_range(0.0..0.25) * u;
            let right = rng.gen_bool(0.5);
            let cx = if right { p.x2 + g + ow / 2.0 } else { p.x1 - g - ow / 2.0 };
            (cx, p.y1 + u * rng.gen_range(0.4..0.8))
        }
        VerbRule::ObjectAbove => {
            let y2 = p.y1 + rng.gen_range(-0.28 * u..(oh / 2.0 - 0.5));
            (pcx + rng.gen_range(-0.28..0.28) * u, y2 - oh / 2.0)
        }
        VerbRule::Apart => (rng.gen_range(0.0..size), rng.gen_range(0.0..size)),
    };
    CornerBox::new(cx - ow / 2.0, cy - oh / 2.0, cx + ow / 2.0, cy + oh / 2.0)
}

/// Places one person/object pair realizing `triplet`.
fn sample_pair(
    ls: &LabelSpace,
    spec: &DatasetSpec,
    triplet: usize,
    rng: &mut impl Rng,
) -> Option<Annotation> {
    let size = spec.image_size as f64;
    let k = size / 64.0;
    let t = &ls.triplets()[triplet];
    let rule = spec.verb_rules[t.verb_id];
    let style = &spec.object_styles[t.object_id];
    for _ in 0..spec.retry_budget {
        let pw = rng.gen_range(10.0..14.0) * k;
        let ph = rng.gen_range(22.0..28.0) * k;
        let px = rng.gen_range(0.0..size - pw);
        let py = rng.gen_range(0.0..size - ph);
        let p = CornerBox::new(px, py, px + pw, py + ph).round_to_pixels();
        let ow = rng.gen_range(style.width[0]..style.width[1]) * k;
        let oh = rng.gen_range(style.height[0]..style.height[1]) * k;
        let o = propose(rule, &p, ow, oh, size, rng).round_to_pixels();
        if !o.is_valid() || !o.within(size, size) {
            continue;
        }
        let labels = pair_labels(ls, &spec.verb_rules, &p, &o, t.object_id);
        if labels.contains(&triplet) {
            return Some(Annotation { human_box: p, object_box: o, object_id: t.object_id, hoi_ids: labels });
        }
    }
    None
}

impl CornerBox {
    fn round_to_pixels(&self) -> CornerBox {
        CornerBox::new(self.x1.round(), self.y1.round(), self.x2.round(), self.y2.round())
    }
}

/// Per-image derived seed.
fn image_seed(seed: u64, split: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split.wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ index
}

/// Generates `n` scenes whose primary triplet is drawn from the power law.
pub fn generate_scenes(
    ls: &LabelSpace,
    spec: &DatasetSpec,
    n: usize,
    exponent: f64,
    split: u64,
    first_id: u64,
) -> Result<Vec<SceneSample>> {
    let popularity = spec.popularity.clone().unwrap_or_else(toy_popularity);
    let mut order: Vec<usize> = popularity.clone();
    order.sort_unstable();
    if order != (0..ls.num_triplets()).collect::<Vec<_>>() {
        return Err(Error::Dataset("popularity must be a permutation of all triplet ids".into()));
    }
    if spec.verb_rules.len() != ls.num_verbs() || spec.object_styles.len() != ls.num_objects() {
        return Err(Error::Dataset(format!(
            "{} verb rules / {} object styles for {} verbs / {} objects",
            spec.verb_rules.len(),
            spec.object_styles.len(),
            ls.num_verbs(),
            ls.num_objects()
        )));
    }
    if spec.image_size < 32 {
        return Err(Error::Dataset(format!("image_size {} too small for the glyphs", spec.image_size)));
    }
    let weights: Vec<f64> = (1..=popularity.len()).map(|r| (r as f64).powf(-exponent)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, split, i as u64));
        let triplet = popularity[sample_power_law(&weights, &mut rng)];
        let a = sample_pair(ls, spec, triplet, &mut rng).ok_or_else(|| {
            Error::Dataset(format!(
                "image {i}: could not realize triplet {triplet} within {} attempts",
                spec.retry_budget
            ))
        })?;
        let annotations = vec![a];
        let image = render(spec.image_size, &annotations, &spec.object_styles, &mut rng);
        out.push(SceneSample {
            image_id: first_id + i as u64,
            width: spec.image_size,
            height: spec.image_size,
            image,
            annotations,
        });
    }
    Ok(out)
}

/// Paths written by [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFiles {
    pub label_space: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Writes the label space (with training counts), PNG images and the
/// train/test manifests under `out`.
pub fn generate_dataset(ls: &LabelSpace, spec: &DatasetSpec, out: &Path) -> Result<DatasetFiles> {
    let train = generate_scenes(ls, spec, spec.n_train, spec.long_tail_exponent, 0, 0)?;
    let test = generate_scenes(ls, spec, spec.n_test, spec.test_long_tail_exponent, 1, spec.n_train as u64)?;
    std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    let write = |scenes: &[SceneSample], name: &str| -> Result<(PathBuf, Manifest)> {
        let mut images = Vec::with_capacity(scenes.len());
        for s in scenes {
            let file = format!("images/{:06}.png", s.image_id);
            save_png(&out.join(&file), &s.image, s.width, s.height)?;
            images.push(ImageRecord {
                image_id: s.image_id,
                file,
                width: s.width,
                height: s.height,
                annotations: s.annotations.clone(),
            });
        }
        let m = Manifest { label_space_path: "label_space.json".into(), images };
        let path = out.join(name);
        m.save(&path)?;
        Ok((path, m))
    };
    let (train_manifest, tm) = write(&train, "manifest_train.json")?;
    let (test_manifest, _) = write(&test, "manifest_test.json")?;
    let label_space = out.join("label_space.json");
    ls.save(&label_space, Some(tm.triplet_counts(ls.num_triplets())))?;
    Ok(DatasetFiles { label_space, train_manifest, test_manifest })
}

pub fn save_png(path: &Path, image: &Tensor, width: usize, height: usize) -> Result<()> {
    let img_err = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    if image.shape() != (width * height, 3) {
        return Err(img_err(format!("raster shape {:?} does not match {width}x{height}", image.shape())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut w = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| img_err(e.to_string()))
}

pub fn load_png(path: &Path) -> Result<(Tensor, usize, usize)> {
    let img_err = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let mut t = Tensor::zeros(w * h, 3);
    for i in 0..w * h {
        let px = &buf[i * channels..(i + 1) * channels];
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            t.set(i, c, f64::from(v) / 255.0);
        }
    }
    Ok((t, w, h))
}

/// Loads every image of a manifest.
pub fn load_samples(manifest: &Manifest, root: &Path) -> Result<Vec<SceneSample>> {
    manifest
        .images
        .iter()
        .map(|r| {
            let (image, w, h) = load_png(&root.join(&r.file))?;
            if (w, h) != (r.width, r.height) {
                return Err(Error::Dataset(format!(
                    "image {} is {w}x{h}, manifest says {}x{}",
                    r.image_id, r.width, r.height
                )));
            }
            Ok(SceneSample { image_id: r.image_id, width: w, height: h, image, annotations: r.annotations.clone() })
        })
        .collect()
}

/// Mean of the HOI prompt embeddings of all labels, normalized; the
/// background prompt for unannotated images.
pub fn synthetic_teacher(sample: &SceneSample, ls: &LabelSpace, provider: &dyn EmbeddingProvider) -> Result<TeacherEmbedding> {
    let hois: Vec<usize> = sample.annotations.iter().flat_map(|a| a.hoi_ids.iter().copied()).collect();
    if hois.is_empty() {
        return Ok(TeacherEmbedding::new(provider.embed_text(BACKGROUND_PROMPT)?, TeacherSource::Synthetic));
    }
    let mut acc = vec![0.0; provider.dim()];
    for &h in &hois {
        let t = &ls.triplets()[h];
        let e = provider.embed_text(&hoi_prompt(&ls.verbs()[t.verb_id], &ls.objects()[t.object_id])?)?;
        acc.iter_mut().zip(&e).for_each(|(a, x)| *a += x);
    }
    acc.iter_mut().for_each(|a| *a /= hois.len() as f64);
    Ok(TeacherEmbedding::new(acc, TeacherSource::Synthetic))
}

/// Mirrors the image and its boxes left to right.
pub fn flip_horizontal(s: &SceneSample) -> SceneSample {
    let (w, h) = (s.width, s.height);
    let mut image = Tensor::zeros(w * h, 3);
    for y in 0..h {
        for x in 0..w {
            image.row_mut(y * w + x).copy_from_slice(s.image.row(y * w + (w - 1 - x)));
        }
    }
    let annotations = s
        .annotations
        .iter()
        .map(|a| Annotation {
            human_box: a.human_box.flip_horizontal(w as f64),
            object_box: a.object_box.flip_horizontal(w as f64),
            ..a.clone()
        })
        .collect();
    SceneSample { image, annotations, ..s.clone() }
}

/// Rescales content about the image centre by `factor` (nearest-neighbour),
/// filling uncovered pixels with the corner colour. Returns `None` when a
/// box would leave the image.
pub fn scale_jitter(s: &SceneSample, factor: f64) -> Option<SceneSample> {
    let (w, h) = (s.width as f64, s.height as f64);
    let map = |b: &CornerBox| {
        CornerBox::new(
            (b.x1 - w / 2.0) * factor + w / 2.0,
            (b.y1 - h / 2.0) * factor + h / 2.0,
            (b.x2 - w / 2.0) * factor + w / 2.0,
            (b.y2 - h / 2.0) * factor + h / 2.0,
        )
    };
    let annotations: Vec<Annotation> = s
        .annotations
        .iter()
        .map(|a| Annotation { human_box: map(&a.human_box), object_box: map(&a.object_box), ..a.clone() })
        .collect();
    if annotations.iter().any(|a| !a.human_box.within(w, h) || !a.object_box.within(w, h)) {
        return None;
    }
    let fill = s.image.row(0).to_vec();
    let mut image = Tensor::zeros(s.width * s.height, 3);
    for y in 0..s.height {
        for x in 0..s.width {
            let sx = ((x as f64 + 0.5 - w / 2.0) / factor + w / 2.0).floor();
            let sy = ((y as f64 + 0.5 - h / 2.0) / factor + h / 2.0).floor();
            let src = if sx >= 0.0 && sy >= 0.0 && sx < w && sy < h {
                s.image.row(sy as usize * s.width + sx as usize)
            } else {
                &fill
            };
            image.row_mut(y * s.width + x).copy_from_slice(src);
        }
    }
    Some(SceneSample { image, annotations, ..s.clone() })
}

/// Random flip and scale jitter in `[1 - jitter, 1 + jitter]`.
pub fn augment(s: &SceneSample, jitter: f64, rng: &mut impl Rng) -> SceneSample {
    let mut out = if rng.gen_bool(0.5) { flip_horizontal(s) } else { s.clone() };
    if jitter > 0.0 {
        let f = rng.gen_range(1.0 - jitter..=1.0 + jitter);
        if let Some(j) = scale_jitter(&out, f) {
            out = j;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlkt::SyntheticTextProvider;

    fn small_spec() -> DatasetSpec {
        DatasetSpec { n_train: 60, n_test: 12, ..DatasetSpec::default() }
    }

    #[test]
    fn toy_taxonomy_shape() {
        let ls = toy_label_space();
        assert_eq!((ls.num_objects(), ls.num_verbs(), ls.num_triplets()), (4, 5, 12));
        // every object has a no-interaction triplet
        for o in 0..4 {
            assert!(ls.triplet_id(4, o).is_some());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let ls = toy_label_space();
        let a = generate_scenes(&ls, &small_spec(), 20, 1.5, 0, 0).unwrap();
        let b = generate_scenes(&ls, &small_spec(), 20, 1.5, 0, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_are_sound_and_rules_exclusive() {
        let ls = toy_label_space();
        let spec = small_spec();
        let scenes = generate_scenes(&ls, &spec, 400, 0.0, 0, 0).unwrap();
        let mut seen = BTreeSet::new();
        for s in &scenes {
            for a in &s.annotations {
                let re = pair_labels(&ls, &spec.verb_rules, &a.human_box, &a.object_box, a.object_id);
                assert_eq!(re, a.hoi_ids);
                assert_eq!(a.hoi_ids.len(), 1, "rules overlap for {a:?}");
                seen.extend(a.hoi_ids.iter().copied());
                if a.hoi_ids.iter().any(|&h| ls.verb_of(h) == 3) {
                    assert!(a.object_box.center().1 < a.human_box.center().1);
                }
                if a.hoi_ids.iter().any(|&h| ls.verb_of(h) == 1) {
                    assert!(a.human_box.center().1 < a.object_box.center().1);
                }
            }
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn long_tail_produces_rare_categories() {
        let ls = toy_label_space();
        let spec = DatasetSpec { long_tail_exponent: 2.5, ..DatasetSpec::default() };
        let scenes = generate_scenes(&ls, &spec, 2000, spec.long_tail_exponent, 0, 0).unwrap();
        let mut counts = vec![0u64; 12];
        for a in scenes.iter().flat_map(|s| &s.annotations) {
            for &h in &a.hoi_ids {
                counts[h] += 1;
            }
        }
        let (rare, _) = crate::label_space::rare_split(&counts);
        assert!(rare.len() >= 2, "{counts:?}");
    }

    #[test]
    fn augmentation_preserves_labels() {
        let ls = toy_label_space();
        let spec = small_spec();
        let scenes = generate_scenes(&ls, &spec, 100, 0.0, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in &scenes {
            for t in [flip_horizontal(s), augment(s, 0.1, &mut rng)] {
                for a in &t.annotations {
                    assert!(a.human_box.within(64.0, 64.0) && a.object_box.within(64.0, 64.0));
                    assert_eq!(pair_labels(&ls, &spec.verb_rules, &a.human_box, &a.object_box, a.object_id), a.hoi_ids);
                }
            }
        }
        let f = flip_horizontal(&flip_horizontal(&scenes[0]));
        assert_eq!(f, scenes[0]);
    }

    #[test]
    fn dataset_files_roundtrip() {
        let ls = toy_label_space();
        let dir = tempfile::tempdir().unwrap();
        let files = generate_dataset(&ls, &small_spec(), dir.path()).unwrap();
        let m = Manifest::load(&files.train_manifest).unwrap();
        m.validate(&ls).unwrap();
        let tmp = dir.path().join("copy.json");
        m.save(&tmp).unwrap();
        assert_eq!(Manifest::load(&tmp).unwrap(), m);
        let samples = load_samples(&m, dir.path()).unwrap();
        assert_eq!(samples.len(), 60);
        let fresh = generate_scenes(&ls, &small_spec(), 1, 1.0, 0, 0).unwrap();
        // PNG quantization is at most half a level
        assert!(samples[0].image.max_abs_diff(&fresh[0].image) <= 0.5 / 255.0 + 1e-12);
        let (ls2, counts) = LabelSpace::load(&files.label_space).unwrap();
        assert_eq!(ls2.num_triplets(), 12);
        assert_eq!(counts.unwrap(), m.triplet_counts(12));
    }

    #[test]
    fn manifest_validation_rejects_bad_boxes() {
        let ls = toy_label_space();
        let bad = Manifest {
            label_space_path: "ls.json".into(),
            images: vec![ImageRecord {
                image_id: 1,
                file: "x.png".into(),
                width: 64,
                height: 64,
                annotations: vec![Annotation {
                    human_box: CornerBox::new(5.0, 5.0, 5.0, 20.0),
                    object_box: CornerBox::new(1.0, 1.0, 4.0, 4.0),
                    object_id: 0,
                    hoi_ids: vec![0],
                }],
            }],
        };
        assert!(bad.validate(&ls).is_err());
        let mut wrong_obj = bad.clone();
        wrong_obj.images[0].annotations[0].human_box = CornerBox::new(5.0, 5.0, 9.0, 20.0);
        wrong_obj.images[0].annotations[0].hoi_ids = vec![4];
        assert!(wrong_obj.validate(&ls).is_err());
    }

    #[test]
    fn teacher_examples() {
        let ls = toy_label_space();
        let p = SyntheticTextProvider::new(0, 64).unwrap();
        let a = Annotation {
            human_box: CornerBox::new(0.0, 0.0, 10.0, 20.0),
            object_box: CornerBox::new(2.0, 5.0, 8.0, 10.0),
            object_id: 0,
            hoi_ids: vec![0],
        };
        let s = SceneSample { image_id: 0, width: 64, height: 64, image: Tensor::zeros(1, 3), annotations: vec![a.clone()] };
        let t = synthetic_teacher(&s, &ls, &p).unwrap();
        let direct = p.embed_text("A photo of a person holding a ball").unwrap();
        assert!(t.vector.iter().zip(&direct).all(|(x, y)| (x - y).abs() < 1e-12));
        let twice = SceneSample { annotations: vec![a.clone(), a], ..s.clone() };
        let t2 = synthetic_teacher(&twice, &ls, &p).unwrap();
        assert!(t2.vector.iter().zip(&direct).all(|(x, y)| (x - y).abs() < 1e-12));
        let empty = SceneSample { annotations: vec![], ..s };
        let t3 = synthetic_teacher(&empty, &ls, &p).unwrap();
        assert!((t3.vector.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
}
