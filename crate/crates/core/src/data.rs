//! Dataset machinery: word-level tokenizer, synthetic referring-expression
//! scenes, and line-delimited JSON annotation ingestion.
//!
//! The synthetic generator draws 2 to 5 colored shapes on a small canvas
//! and emits a phrase that provably identifies exactly one of them, either
//! by attributes alone ("the red circle") or through a spatial relation to
//! a uniquely-attributed anchor ("the red circle left of the blue
//! square"). Alignment targets treat every content word of the phrase
//! (colors, shapes, relation words) as referring to the ground-truth box.

use crate::geometry::{BBox, CoverageRule, PatchGrid};
use crate::image_io::{read_image, write_ppm, Image};
use crate::losses::GroundTruth;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Words excluded from alignment targets.
pub const STOP_WORDS: [&str; 5] = ["the", "that", "is", "of", "to"];

/// Reserved id 0 for out-of-vocabulary words.
pub const UNKNOWN_WORD: &str = "<unk>";

/// Dense word -> id map. Ids are assigned by a sorted pass over the unique
/// corpus words, so construction is independent of corpus order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn build<I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut unique = BTreeSet::new();
        for phrase in corpus {
            for w in normalize_words(phrase.as_ref()) {
                unique.insert(w);
            }
        }
        let mut words = Vec::with_capacity(unique.len() + 1);
        words.push(UNKNOWN_WORD.to_string());
        words.extend(unique);
        Self { words }
    }

    /// Rebuild from an id-ordered word list (checkpoint round trips).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNKNOWN_WORD) {
            return Err(Error::Format(format!(
                "vocabulary must reserve id 0 for {UNKNOWN_WORD}"
            )));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> usize {
        // The tail of `words` is sorted; binary search it.
        match self.words[1..].binary_search_by(|w| w.as_str().cmp(word)) {
            Ok(i) => i + 1,
            Err(_) => 0,
        }
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Lowercase and split on any non-alphanumeric character; digits survive
/// as whole tokens.
pub fn normalize_words(phrase: &str) -> Vec<String> {
    phrase
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deterministic ids, truncated to `max_len`; unknown words map to id 0.
pub fn tokenize(phrase: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    normalize_words(phrase)
        .into_iter()
        .take(max_len)
        .map(|w| vocab.id_of(&w))
        .collect()
}

pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter().map(|&id| vocab.word(id)).collect::<Vec<_>>().join(" ")
}

/// Positions of content words: everything that is not a stop word.
pub fn content_positions(words: &[String]) -> Vec<usize> {
    words
        .iter()
        .enumerate()
        .filter(|(_, w)| !STOP_WORDS.contains(&w.as_str()))
        .map(|(i, _)| i)
        .collect()
}

// ── Synthetic scenes ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] =
        [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(&self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Does `a` stand in this relation to `b`? Compared on box centers,
    /// y pointing down.
    pub fn holds(&self, a: &BBox, b: &BBox) -> bool {
        match self {
            Relation::LeftOf => a.cx < b.cx,
            Relation::RightOf => a.cx > b.cx,
            Relation::Above => a.cy < b.cy,
            Relation::Below => a.cy > b.cy,
        }
    }
}

/// One drawn object: attributes plus its pixel-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Pixel corner rectangle [x0, y0, x1, y1).
    pub rect: [usize; 4],
    pub bbox: BBox,
}

impl SceneObject {
    pub fn matches(&self, color: Color, shape: Shape) -> bool {
        self.color == color && self.shape == shape
    }
}

/// A full generated scene; kept for verifying referent uniqueness.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub referent: usize,
}

/// Generator parameters. The defaults draw 2 to 5 disjoint shapes of 12
/// to 28 pixels on a 64 pixel canvas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub canvas: usize,
    pub patch_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size_px: usize,
    pub max_size_px: usize,
    pub max_text_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas: 64,
            patch_size: 8,
            min_objects: 2,
            max_objects: 5,
            min_size_px: 12,
            max_size_px: 28,
            max_text_len: 40,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(Error::Validation("bad object count range".into()));
        }
        if self.min_size_px < 4 || self.max_size_px < self.min_size_px {
            return Err(Error::Validation("bad size range".into()));
        }
        if self.max_size_px + 2 >= self.canvas {
            return Err(Error::Validation("objects larger than the canvas".into()));
        }
        PatchGrid::new(self.canvas, self.canvas, self.patch_size)?;
        Ok(())
    }
}

/// One training/evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub image: Image,
    pub phrase: String,
    pub token_ids: Vec<usize>,
    pub gt: GroundTruth,
}

/// Samples plus the vocabulary they were tokenized with.
#[derive(Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub samples: Vec<GroundingSample>,
    pub patch_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The generator's full word list, fixed up front so every seed shares
/// one vocabulary.
pub fn generator_vocabulary() -> Vocabulary {
    let mut corpus = vec!["the".to_string()];
    corpus.extend(Color::ALL.iter().map(|c| c.word().to_string()));
    corpus.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
    corpus.extend(Relation::ALL.iter().map(|r| r.words().to_string()));
    Vocabulary::build(corpus)
}

fn rects_disjoint(a: &[usize; 4], b: &[usize; 4], gap: usize) -> bool {
    a[2] + gap <= b[0] || b[2] + gap <= a[0] || a[3] + gap <= b[1] || b[3] + gap <= a[1]
}

fn place_objects(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Vec<SceneObject>> {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..50 {
            let size = rng.random_range(spec.min_size_px..=spec.max_size_px);
            let x0 = rng.random_range(1..spec.canvas - size - 1);
            let y0 = rng.random_range(1..spec.canvas - size - 1);
            let rect = [x0, y0, x0 + size, y0 + size];
            if objects.iter().all(|o| rects_disjoint(&o.rect, &rect, 2)) {
                let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
                let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
                let bbox = BBox::from_pixel_xyxy(
                    [rect[0] as f64, rect[1] as f64, rect[2] as f64, rect[3] as f64],
                    spec.canvas,
                    spec.canvas,
                )
                .expect("pixel-aligned box");
                objects.push(SceneObject { shape, color, rect, bbox });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// A phrase identifying exactly one object, or None if the scene offers
/// no unambiguous description of any candidate referent.
fn describe_referent(
    objects: &[SceneObject],
    referent: usize,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let target = &objects[referent];
    let attr_matches: Vec<usize> = (0..objects.len())
        .filter(|&i| objects[i].matches(target.color, target.shape))
        .collect();
    if attr_matches.len() == 1 {
        return Some(format!("the {} {}", target.color.word(), target.shape.word()));
    }

    // Ambiguous attributes: disambiguate through a uniquely-attributed
    // anchor. Try anchor/relation combinations in random order.
    let mut anchors: Vec<usize> = (0..objects.len()).filter(|&i| i != referent).collect();
    anchors.shuffle(rng);
    let mut relations = Relation::ALL.to_vec();
    relations.shuffle(rng);
    for &anchor_idx in &anchors {
        let anchor = &objects[anchor_idx];
        let anchor_unique = objects
            .iter()
            .filter(|o| o.matches(anchor.color, anchor.shape))
            .count()
            == 1;
        if !anchor_unique {
            continue;
        }
        for &rel in &relations {
            let satisfying: Vec<usize> = attr_matches
                .iter()
                .copied()
                .filter(|&i| rel.holds(&objects[i].bbox, &anchor.bbox))
                .collect();
            if satisfying == [referent] {
                return Some(format!(
                    "the {} {} {} the {} {}",
                    target.color.word(),
                    target.shape.word(),
                    rel.words(),
                    anchor.color.word(),
                    anchor.shape.word()
                ));
            }
        }
    }
    None
}

/// Independent truth condition of a generated phrase over a scene:
/// returns the indices of objects the phrase denotes.
pub fn evaluate_phrase(phrase: &str, objects: &[SceneObject]) -> Vec<usize> {
    let words = normalize_words(phrase);
    let lookup_color = |w: &str| Color::ALL.iter().copied().find(|c| c.word() == w);
    let lookup_shape = |w: &str| Shape::ALL.iter().copied().find(|s| s.word() == w);
    let attrs: Vec<(Color, Shape)> = words
        .windows(2)
        .filter_map(|pair| match (lookup_color(&pair[0]), lookup_shape(&pair[1])) {
            (Some(c), Some(s)) => Some((c, s)),
            _ => None,
        })
        .collect();
    let relation = if words.contains(&"left".to_string()) {
        Some(Relation::LeftOf)
    } else if words.contains(&"right".to_string()) {
        Some(Relation::RightOf)
    } else if words.contains(&"above".to_string()) {
        Some(Relation::Above)
    } else if words.contains(&"below".to_string()) {
        Some(Relation::Below)
    } else {
        None
    };
    match (attrs.as_slice(), relation) {
        ([(c, s)], None) => {
            (0..objects.len()).filter(|&i| objects[i].matches(*c, *s)).collect()
        }
        ([(c1, s1), (c2, s2)], Some(rel)) => {
            let anchors: Vec<usize> =
                (0..objects.len()).filter(|&i| objects[i].matches(*c2, *s2)).collect();
            let [anchor] = anchors.as_slice() else { return vec![] };
            (0..objects.len())
                .filter(|&i| {
                    objects[i].matches(*c1, *s1)
                        && rel.holds(&objects[i].bbox, &objects[*anchor].bbox)
                })
                .collect()
        }
        _ => vec![],
    }
}

fn render_scene(spec: &SyntheticSpec, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Image {
    let shade = rng.random_range(0.08..0.22);
    let mut img = Image::filled(spec.canvas, spec.canvas, shade);
    for o in objects {
        let [x0, y0, x1, y1] = o.rect;
        let rgb = o.color.rgb();
        match o.shape {
            Shape::Square => {
                for y in y0..y1 {
                    for x in x0..x1 {
                        img.set_pixel(x, y, rgb);
                    }
                }
            }
            Shape::Circle => {
                let r = (x1 - x0) as f64 / 2.0;
                let ccx = x0 as f64 + r;
                let ccy = y0 as f64 + r;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dx = x as f64 + 0.5 - ccx;
                        let dy = y as f64 + 0.5 - ccy;
                        if dx * dx + dy * dy <= r * r {
                            img.set_pixel(x, y, rgb);
                        }
                    }
                }
            }
            Shape::Triangle => {
                // Apex centered on the top edge, base on the bottom.
                let size = (x1 - x0) as f64;
                for y in y0..y1 {
                    let t = (y as f64 + 0.5 - y0 as f64) / size;
                    let half = t * size / 2.0;
                    let mid = x0 as f64 + size / 2.0;
                    for x in x0..x1 {
                        let cx = x as f64 + 0.5;
                        if (cx - mid).abs() <= half {
                            img.set_pixel(x, y, rgb);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Generate scenes paired with their samples; reproducible from the seed.
pub fn generate_with_scenes(
    spec: &SyntheticSpec,
    count: usize,
) -> Result<Vec<(Scene, GroundingSample)>> {
    spec.validate()?;
    let vocab = generator_vocabulary();
    let grid = PatchGrid::new(spec.canvas, spec.canvas, spec.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(count);
    for sample_idx in 0..count {
        let mut emitted = false;
        for _attempt in 0..100 {
            let Some(objects) = place_objects(spec, &mut rng) else { continue };
            let referent = rng.random_range(0..objects.len());
            let Some(phrase) = describe_referent(&objects, referent, &mut rng) else {
                continue;
            };
            debug_assert_eq!(evaluate_phrase(&phrase, &objects), vec![referent]);
            let image = render_scene(spec, &objects, &mut rng);
            let words = normalize_words(&phrase);
            let token_ids = tokenize(&phrase, &vocab, spec.max_text_len);
            let content: Vec<usize> =
                content_positions(&words).into_iter().filter(|&p| p < token_ids.len()).collect();
            let gt = GroundTruth::new(
                vec![objects[referent].bbox],
                vec![content],
                token_ids.len(),
                &grid,
                CoverageRule::OverlapRatio,
            )?;
            out.push((
                Scene { objects, referent },
                GroundingSample { image, phrase, token_ids, gt },
            ));
            emitted = true;
            break;
        }
        if !emitted {
            return Err(Error::Generation(format!(
                "no unambiguous scene found for sample {sample_idx} after 100 attempts"
            )));
        }
    }
    Ok(out)
}

/// Generate a dataset of referring-expression samples.
pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Dataset> {
    let samples = generate_with_scenes(spec, count)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    Ok(Dataset { vocab: generator_vocabulary(), samples, patch_size: spec.patch_size })
}

// ── Annotation files ────────────────────────────────────────────────

/// One line of the annotation file. Boxes are pixel corner coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_box_map: Option<Vec<Vec<usize>>>,
}

/// Write a dataset as `annotations.jsonl` plus PPM images under
/// `images/`. The token map is written explicitly so ingestion
/// round-trips the ground truth exactly.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut out = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = format!("images/sample_{i:05}.ppm");
        write_ppm(&dir.join(&rel), &s.image)?;
        let record = AnnotationRecord {
            image: rel,
            width: s.image.width,
            height: s.image.height,
            phrase: s.phrase.clone(),
            bbox: s.gt.boxes[0].to_pixel_xyxy(s.image.width, s.image.height),
            token_box_map: Some(s.gt.token_sets.clone()),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(dir.join("annotations.jsonl"), out)?;
    Ok(())
}

/// Read an annotation file and its images. Malformed records are skipped
/// with a logged line number; more than 10% skipped aborts the load.
pub fn ingest(
    annotations_path: &Path,
    images_dir: &Path,
    patch_size: usize,
    max_text_len: usize,
) -> Result<Dataset> {
    let file = fs::File::open(annotations_path)?;
    let reader = BufReader::new(file);
    let mut records: Vec<(usize, AnnotationRecord)> = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<AnnotationRecord>(&line) {
            Ok(r) => records.push((line_no + 1, r)),
            Err(e) => {
                log::warn!("line {}: skipping malformed record: {e}", line_no + 1);
                skipped += 1;
            }
        }
    }

    let vocab = Vocabulary::build(records.iter().map(|(_, r)| r.phrase.as_str()));
    let mut samples = Vec::with_capacity(records.len());
    for (line_no, record) in records {
        match ingest_record(&record, images_dir, &vocab, patch_size, max_text_len) {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("line {line_no}: skipping record: {e}");
                skipped += 1;
            }
        }
    }

    if total == 0 {
        return Err(Error::Format(format!(
            "{}: no records",
            annotations_path.display()
        )));
    }
    if skipped * 10 > total {
        return Err(Error::Format(format!(
            "{skipped} of {total} records skipped; aborting"
        )));
    }
    Ok(Dataset { vocab, samples, patch_size })
}

fn ingest_record(
    record: &AnnotationRecord,
    images_dir: &Path,
    vocab: &Vocabulary,
    patch_size: usize,
    max_text_len: usize,
) -> Result<GroundingSample> {
    let image = read_image(&images_dir.join(&record.image))?;
    if image.width != record.width || image.height != record.height {
        return Err(Error::Format(format!(
            "image is {}x{}, record says {}x{}",
            image.width, image.height, record.width, record.height
        )));
    }
    let bbox = BBox::from_pixel_xyxy(record.bbox, record.width, record.height)?;
    let words = normalize_words(&record.phrase);
    if words.is_empty() {
        return Err(Error::Format("empty phrase".into()));
    }
    let token_ids = tokenize(&record.phrase, vocab, max_text_len);
    let m = token_ids.len();
    let token_set = match &record.token_box_map {
        Some(map) => {
            let [set] = map.as_slice() else {
                return Err(Error::Format(format!(
                    "token_box_map has {} entries for 1 box",
                    map.len()
                )));
            };
            set.clone()
        }
        None => content_positions(&words),
    };
    let token_set: Vec<usize> = token_set.into_iter().filter(|&p| p < m).collect();
    let grid = PatchGrid::new(image.height, image.width, patch_size)?;
    let gt = GroundTruth::new(vec![bbox], vec![token_set], m, &grid, CoverageRule::OverlapRatio)?;
    Ok(GroundingSample { image, phrase: record.phrase.clone(), token_ids, gt })
}
