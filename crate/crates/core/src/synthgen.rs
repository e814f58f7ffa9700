//! Procedural multi-object scenes with labeled logical and structural
//! anomalies.
//!
//! A scene has a fixed set of slots (permitted regions for object centers)
//! and a list of themes; a normal image picks one theme and places the
//! theme's object in every slot with positional jitter. Logical anomalies
//! rearrange or recombine objects that individually look normal; structural
//! anomalies deface a normal scene with small out-of-vocabulary marks.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::{Rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("layout infeasible: {0}")]
    Infeasible(String),
    #[error("anomaly kind {kind} not applicable: {reason}")]
    NotApplicable { kind: AnomalyKind, reason: String },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("image format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

/// Vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectKind {
    pub shape: ShapeKind,
    pub color: Rgb,
    /// Odd side length of the bounding square.
    pub size: u32,
}

impl ObjectKind {
    fn half(&self) -> i32 {
        (self.size / 2) as i32
    }

    /// Whether the pixel at offset `(dx, dy)` from the center is covered.
    pub fn covers(&self, dx: i32, dy: i32) -> bool {
        let h = self.half();
        if dx.abs() > h || dy.abs() > h {
            return false;
        }
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = h as f64 + 0.5;
                ((dx * dx + dy * dy) as f64) <= r * r - 0.25
            }
            // Apex at the top, base at the bottom row.
            ShapeKind::Triangle => 2 * dx.abs() <= dy + h,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= h,
        }
    }
}

/// Inclusive range of allowed object centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Region {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Scene layout rule and rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: Rgb,
    pub vocabulary: Vec<ObjectKind>,
    /// Permitted center region per slot.
    pub slots: Vec<Region>,
    /// Each theme assigns a vocabulary index to every slot.
    pub themes: Vec<Vec<usize>>,
    /// Center regions that stay empty in normal scenes.
    pub free_regions: Vec<Region>,
    /// Colors used only by structural defects.
    pub defect_colors: Vec<Rgb>,
}

impl Default for SceneSpec {
    /// 32x32 canvas, three slots in three quadrants, two color themes, the
    /// bottom-right quadrant left empty.
    fn default() -> Self {
        let red = [220, 50, 50];
        let green = [50, 190, 70];
        let blue = [60, 100, 235];
        let yellow = [225, 200, 40];
        let kind = |shape, color| ObjectKind {
            shape,
            color,
            size: 7,
        };
        let quad = |qx: i32, qy: i32| Region {
            x0: qx * 16 + 4,
            y0: qy * 16 + 4,
            x1: qx * 16 + 11,
            y1: qy * 16 + 11,
        };
        Self {
            width: 32,
            height: 32,
            background: [32, 32, 40],
            vocabulary: vec![
                kind(ShapeKind::Circle, red),
                kind(ShapeKind::Circle, green),
                kind(ShapeKind::Square, red),
                kind(ShapeKind::Square, green),
                kind(ShapeKind::Triangle, blue),
                kind(ShapeKind::Triangle, yellow),
            ],
            slots: vec![quad(0, 0), quad(1, 0), quad(0, 1)],
            // Within a theme every object has its own color.
            themes: vec![vec![0, 3, 4], vec![1, 2, 5]],
            free_regions: vec![quad(1, 1)],
            defect_colors: vec![[250, 250, 250], [255, 130, 0], [230, 0, 230]],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.vocabulary.len() < 3 {
            return Err(SynthError::InvalidSpec("vocabulary needs at least 3 kinds".into()));
        }
        if self.themes.is_empty() || self.slots.is_empty() {
            return Err(SynthError::InvalidSpec("no slots or themes".into()));
        }
        for t in &self.themes {
            if t.len() != self.slots.len() || t.iter().any(|&k| k >= self.vocabulary.len()) {
                return Err(SynthError::InvalidSpec("theme does not match slots".into()));
            }
        }
        for k in &self.vocabulary {
            if k.size % 2 == 0 || k.size == 0 {
                return Err(SynthError::InvalidSpec("object size must be odd".into()));
            }
            if self.defect_colors.contains(&k.color) || k.color == self.background {
                return Err(SynthError::InvalidSpec("defect/background color reused".into()));
            }
        }
        let h = self.max_half();
        for r in self.slots.iter().chain(&self.free_regions) {
            if r.x0 > r.x1 || r.y0 > r.y1 {
                return Err(SynthError::Infeasible(format!("empty region {r:?}")));
            }
            if r.x0 - h < 0
                || r.y0 - h < 0
                || r.x1 + h >= self.width as i32
                || r.y1 + h >= self.height as i32
            {
                return Err(SynthError::Infeasible(format!("region {r:?} leaves the canvas")));
            }
        }
        Ok(())
    }

    fn max_half(&self) -> i32 {
        self.vocabulary.iter().map(ObjectKind::half).max().unwrap_or(0)
    }

    fn color_index(&self, c: Rgb) -> Option<usize> {
        self.vocabulary.iter().position(|k| k.color == c)
    }

    /// Pixel box an object centered anywhere in `r` can touch.
    fn footprint(&self, r: &Region) -> Region {
        let h = self.max_half();
        Region {
            x0: r.x0 - h,
            y0: r.y0 - h,
            x1: r.x1 + h,
            y1: r.y1 + h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    /// Vocabulary index.
    pub kind: usize,
    pub cx: i32,
    pub cy: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Logical,
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    None,
    Missing,
    Extra,
    SwappedPosition,
    WrongCombination,
    Scratch,
    Blob,
}

impl AnomalyKind {
    pub const LOGICAL: [AnomalyKind; 4] = [
        AnomalyKind::Missing,
        AnomalyKind::Extra,
        AnomalyKind::SwappedPosition,
        AnomalyKind::WrongCombination,
    ];
    pub const STRUCTURAL: [AnomalyKind; 2] = [AnomalyKind::Scratch, AnomalyKind::Blob];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyKind::None => "none",
            AnomalyKind::Missing => "missing",
            AnomalyKind::Extra => "extra",
            AnomalyKind::SwappedPosition => "swapped_position",
            AnomalyKind::WrongCombination => "wrong_combination",
            AnomalyKind::Scratch => "scratch",
            AnomalyKind::Blob => "blob",
        }
    }

    pub fn label(&self) -> Label {
        match self {
            AnomalyKind::None => Label::Normal,
            AnomalyKind::Scratch | AnomalyKind::Blob => Label::Structural,
            _ => Label::Logical,
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Logical => "logical",
            Label::Structural => "structural",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&c);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn put(&mut self, x: i32, y: i32, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, c);
        }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, SynthError> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(SynthError::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(SynthError::Format("expected P6 with maxval 255".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| SynthError::Format(format!("bad dimension {s}")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(SynthError::Format("truncated PPM payload".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + n].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub label: Label,
    pub kind: AnomalyKind,
    pub split: Split,
    /// Objects as placed (after any logical edit).
    pub objects: Vec<PlacedObject>,
}

pub fn render(spec: &SceneSpec, objects: &[PlacedObject]) -> RgbImage {
    let mut img = RgbImage::filled(spec.width, spec.height, spec.background);
    for o in objects {
        let k = &spec.vocabulary[o.kind];
        let h = k.half();
        for dy in -h..=h {
            for dx in -h..=h {
                if k.covers(dx, dy) {
                    img.put(o.cx + dx, o.cy + dy, k.color);
                }
            }
        }
    }
    img
}

fn jittered_center(r: &Region, rng: &mut Rng) -> (i32, i32) {
    (
        rng.range_i(r.x0 as i64, r.x1 as i64) as i32,
        rng.range_i(r.y0 as i64, r.y1 as i64) as i32,
    )
}

fn normal_objects(spec: &SceneSpec, rng: &mut Rng) -> Result<(usize, Vec<PlacedObject>), SynthError> {
    spec.validate()?;
    let theme = rng.below(spec.themes.len());
    let objects = spec
        .slots
        .iter()
        .zip(&spec.themes[theme])
        .map(|(r, &kind)| {
            let (cx, cy) = jittered_center(r, rng);
            PlacedObject { kind, cx, cy }
        })
        .collect();
    Ok((theme, objects))
}

pub fn generate_normal(spec: &SceneSpec, rng: &mut Rng) -> Result<LabeledImage, SynthError> {
    let (_, objects) = normal_objects(spec, rng)?;
    Ok(LabeledImage {
        image: render(spec, &objects),
        label: Label::Normal,
        kind: AnomalyKind::None,
        split: Split::Train,
        objects,
    })
}

pub fn generate_logical_anomaly(
    spec: &SceneSpec,
    rng: &mut Rng,
    kind: AnomalyKind,
) -> Result<LabeledImage, SynthError> {
    let (theme, mut objects) = normal_objects(spec, rng)?;
    let not_applicable = |reason: &str| SynthError::NotApplicable {
        kind,
        reason: reason.into(),
    };
    match kind {
        AnomalyKind::Missing => {
            if objects.len() < 2 {
                return Err(not_applicable("layout has a single object"));
            }
            let i = rng.below(objects.len());
            objects.remove(i);
        }
        AnomalyKind::Extra => {
            if spec.free_regions.is_empty() {
                return Err(not_applicable("no free region for an extra object"));
            }
            let src = objects[rng.below(objects.len())].kind;
            let r = spec.free_regions[rng.below(spec.free_regions.len())];
            let (cx, cy) = jittered_center(&r, rng);
            objects.push(PlacedObject { kind: src, cx, cy });
        }
        AnomalyKind::SwappedPosition => {
            let n = objects.len();
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .filter(|&(a, b)| objects[a].kind != objects[b].kind)
                .collect();
            if pairs.is_empty() {
                return Err(not_applicable("no two distinct objects to swap"));
            }
            let (a, b) = pairs[rng.below(pairs.len())];
            let (ra, rb) = (spec.slots[a], spec.slots[b]);
            let (dx, dy) = (rb.x0 - ra.x0, rb.y0 - ra.y0);
            objects[a].cx += dx;
            objects[a].cy += dy;
            objects[b].cx -= dx;
            objects[b].cy -= dy;
        }
        AnomalyKind::WrongCombination => {
            // Swap one slot's kind for the kind another theme uses there,
            // provided it differs and never appears with this theme.
            let mut options = Vec::new();
            for (s, _) in spec.slots.iter().enumerate() {
                for (t, other) in spec.themes.iter().enumerate() {
                    let k = other[s];
                    if t != theme && k != spec.themes[theme][s] && !spec.themes[theme].contains(&k) {
                        options.push((s, k));
                    }
                }
            }
            if options.is_empty() {
                return Err(not_applicable("rule has no alternative combination"));
            }
            let (s, k) = options[rng.below(options.len())];
            objects[s].kind = k;
        }
        _ => return Err(not_applicable("not a logical anomaly kind")),
    }
    Ok(LabeledImage {
        image: render(spec, &objects),
        label: Label::Logical,
        kind,
        split: Split::Test,
        objects,
    })
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i32, i32), (x1, y1): (i32, i32), c: Rgb) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put(x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Side of the square box a scratch is confined to (100 px <= 10% of 32x32).
pub const SCRATCH_BOX: i32 = 10;
/// Largest blob bounding box side.
pub const BLOB_MAX: i32 = 4;

pub fn generate_structural_anomaly(
    spec: &SceneSpec,
    rng: &mut Rng,
    kind: AnomalyKind,
) -> Result<LabeledImage, SynthError> {
    let (_, objects) = normal_objects(spec, rng)?;
    let mut image = render(spec, &objects);
    let color = spec.defect_colors[rng.below(spec.defect_colors.len())];
    let (w, h) = (spec.width as i32, spec.height as i32);
    match kind {
        AnomalyKind::Scratch => {
            let bx = rng.range_i(0, (w - SCRATCH_BOX) as i64) as i32;
            let by = rng.range_i(0, (h - SCRATCH_BOX) as i64) as i32;
            let pt = |rng: &mut Rng| {
                (
                    bx + rng.range_i(0, (SCRATCH_BOX - 1) as i64) as i32,
                    by + rng.range_i(0, (SCRATCH_BOX - 1) as i64) as i32,
                )
            };
            let segments = 2 + rng.below(2);
            let mut a = pt(rng);
            // Keep the first segment long enough to be a scratch.
            let mut b = pt(rng);
            while (a.0 - b.0).abs() + (a.1 - b.1).abs() < SCRATCH_BOX / 2 {
                b = pt(rng);
            }
            draw_line(&mut image, a, b, color);
            for _ in 1..segments {
                a = b;
                b = pt(rng);
                draw_line(&mut image, a, b, color);
            }
        }
        AnomalyKind::Blob => {
            let bw = 3 + rng.below(2) as i32;
            let bh = 3 + rng.below(2) as i32;
            let x0 = rng.range_i(0, (w - bw) as i64) as i32;
            let y0 = rng.range_i(0, (h - bh) as i64) as i32;
            let (cx, cy) = (x0 as f64 + bw as f64 / 2.0, y0 as f64 + bh as f64 / 2.0);
            let (ax, ay) = (bw as f64 / 2.0, bh as f64 / 2.0);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let u = (x as f64 + 0.5 - cx) / ax;
                    let v = (y as f64 + 0.5 - cy) / ay;
                    if u * u + v * v <= 1.0 {
                        image.put(x, y, color);
                    }
                }
            }
        }
        _ => {
            return Err(SynthError::NotApplicable {
                kind,
                reason: "not a structural anomaly kind".into(),
            })
        }
    }
    Ok(LabeledImage {
        image,
        label: Label::Structural,
        kind,
        split: Split::Test,
        objects,
    })
}

/// Generates one image of the given kind from its own seed.
pub fn generate(spec: &SceneSpec, kind: AnomalyKind, seed: u64) -> Result<LabeledImage, SynthError> {
    let mut rng = Rng::new(seed, Stream::Data);
    match kind.label() {
        Label::Normal => generate_normal(spec, &mut rng),
        Label::Logical => generate_logical_anomaly(spec, &mut rng, kind),
        Label::Structural => generate_structural_anomaly(spec, &mut rng, kind),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    /// A slot region holds no object.
    EmptySlot(usize),
    /// Vocabulary-colored pixels in a slot that no single object explains.
    Unexplained(usize),
    /// Vocabulary pixels inside a region that must stay empty, or outside all regions.
    StrayPixels { x: usize, y: usize },
    /// Slot contents do not form any theme.
    NoTheme(Vec<usize>),
}

/// Pixel-level check of the layout rule.
///
/// Pixels in defect colors are treated as unknown (they may occlude objects).
/// Each slot must be explained by exactly one vocabulary object at a
/// permitted center, nothing else may be drawn, and the slot kinds must form
/// a theme. Returns the recovered objects.
pub fn validate_layout(spec: &SceneSpec, img: &RgbImage) -> Result<Vec<PlacedObject>, LayoutViolation> {
    #[derive(Clone, Copy, PartialEq)]
    enum Px {
        Bg,
        Vocab(Rgb),
        Unknown,
    }
    let classify = |x: usize, y: usize| {
        let c = img.get(x, y);
        if c == spec.background {
            Px::Bg
        } else if spec.color_index(c).is_some() {
            Px::Vocab(c)
        } else {
            Px::Unknown
        }
    };
    let mut explained = vec![false; img.width * img.height];
    let mut found = Vec::new();
    for (s, region) in spec.slots.iter().enumerate() {
        let fp = spec.footprint(region);
        let vocab_px: Vec<(i32, i32)> = (fp.y0..=fp.y1)
            .flat_map(|y| (fp.x0..=fp.x1).map(move |x| (x, y)))
            .filter(|&(x, y)| matches!(classify(x as usize, y as usize), Px::Vocab(_)))
            .collect();
        if vocab_px.is_empty() {
            return Err(LayoutViolation::EmptySlot(s));
        }
        let mut hit = None;
        'search: for (ki, k) in spec.vocabulary.iter().enumerate() {
            for cy in region.y0..=region.y1 {
                for cx in region.x0..=region.x1 {
                    let ok_mask = (-k.half()..=k.half()).all(|dy| {
                        (-k.half()..=k.half()).all(|dx| {
                            let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
                            let p = classify(x, y);
                            if k.covers(dx, dy) {
                                p == Px::Vocab(k.color) || p == Px::Unknown
                            } else {
                                p != Px::Vocab(k.color) || !fp.contains(x as i32, y as i32)
                            }
                        })
                    });
                    let all_inside = vocab_px
                        .iter()
                        .all(|&(x, y)| k.covers(x - cx, y - cy));
                    if ok_mask && all_inside {
                        hit = Some(PlacedObject { kind: ki, cx, cy });
                        break 'search;
                    }
                }
            }
        }
        let obj = hit.ok_or(LayoutViolation::Unexplained(s))?;
        for &(x, y) in &vocab_px {
            explained[y as usize * img.width + x as usize] = true;
        }
        found.push(obj);
    }
    for y in 0..img.height {
        for x in 0..img.width {
            if matches!(classify(x, y), Px::Vocab(_)) && !explained[y * img.width + x] {
                return Err(LayoutViolation::StrayPixels { x, y });
            }
        }
    }
    let kinds: Vec<usize> = found.iter().map(|o| o.kind).collect();
    if !spec.themes.contains(&kinds) {
        return Err(LayoutViolation::NoTheme(kinds));
    }
    Ok(found)
}

/// Per-token object label: 0 for background, `1 + vocabulary index` for the
/// object covering most of the token's `patch x patch` window.
pub fn token_kinds(spec: &SceneSpec, objects: &[PlacedObject], patch: usize) -> Vec<usize> {
    let mut owner = vec![0usize; spec.width * spec.height];
    for o in objects {
        let k = &spec.vocabulary[o.kind];
        let h = k.half();
        for dy in -h..=h {
            for dx in -h..=h {
                let (x, y) = (o.cx + dx, o.cy + dy);
                if k.covers(dx, dy) && x >= 0 && y >= 0 && (x as usize) < spec.width && (y as usize) < spec.height {
                    owner[y as usize * spec.width + x as usize] = o.kind + 1;
                }
            }
        }
    }
    let (gw, gh) = (spec.width / patch, spec.height / patch);
    let classes = spec.vocabulary.len() + 1;
    let mut out = Vec::with_capacity(gw * gh);
    for ty in 0..gh {
        for tx in 0..gw {
            let mut counts = vec![0usize; classes];
            for y in ty * patch..(ty + 1) * patch {
                for x in tx * patch..(tx + 1) * patch {
                    counts[owner[y * spec.width + x]] += 1;
                }
            }
            // Any object pixel wins over background; ties go to the lower id.
            let best = (1..classes)
                .filter(|&c| counts[c] > 0)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            out.push(best);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_normal: usize,
    /// Fraction of `train_normal` written with split `val` (calibration).
    pub calib_fraction: f64,
    pub test_normal: usize,
    pub test_logical: usize,
    pub test_structural: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train_normal: 200,
            calib_fraction: 0.2,
            test_normal: 50,
            test_logical: 50,
            test_structural: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub kind: AnomalyKind,
    pub split: Split,
    pub seed: u64,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub counts: DatasetCounts,
    pub images: Vec<ManifestEntry>,
}

pub const MANIFEST_SCHEMA: &str = "ladmim-manifest/1";

/// Image plan: (id, split, kind, per-image seed), in manifest order.
pub fn plan(counts: &DatasetCounts, seed: u64) -> Vec<(String, Split, AnomalyKind, u64)> {
    let n_val = (counts.train_normal as f64 * counts.calib_fraction).round() as usize;
    let n_train = counts.train_normal - n_val.min(counts.train_normal);
    let mut out = Vec::new();
    let mut push = |prefix: &str, split: Split, kind: AnomalyKind, i: usize| {
        let idx = out.len() as u64;
        let s = Rng::derive(seed, Stream::Data, idx).next_u64();
        out.push((format!("{prefix}_{i:04}"), split, kind, s));
    };
    for i in 0..counts.train_normal {
        let split = if i < n_train { Split::Train } else { Split::Val };
        push(&format!("{}_normal", split.as_str()), split, AnomalyKind::None, i);
    }
    for i in 0..counts.test_normal {
        push("test_normal", Split::Test, AnomalyKind::None, i);
    }
    for i in 0..counts.test_logical {
        let k = AnomalyKind::LOGICAL[i % AnomalyKind::LOGICAL.len()];
        push(&format!("test_{}", k.as_str()), Split::Test, k, i);
    }
    for i in 0..counts.test_structural {
        let k = AnomalyKind::STRUCTURAL[i % AnomalyKind::STRUCTURAL.len()];
        push(&format!("test_{}", k.as_str()), Split::Test, k, i);
    }
    out
}

/// Generates every planned image in memory.
pub fn generate_dataset(
    spec: &SceneSpec,
    counts: &DatasetCounts,
    seed: u64,
) -> Result<(Manifest, Vec<LabeledImage>), SynthError> {
    spec.validate()?;
    let planned = plan(counts, seed);
    let images: Vec<LabeledImage> = planned
        .iter()
        .map(|(_, split, kind, s)| {
            generate(spec, *kind, *s).map(|mut li| {
                li.split = *split;
                li
            })
        })
        .collect::<Result<_, _>>()?;
    let entries = planned
        .iter()
        .zip(&images)
        .map(|((id, split, kind, s), li)| ManifestEntry {
            id: id.clone(),
            path: format!("images/{id}.ppm"),
            label: kind.label(),
            kind: *kind,
            split: *split,
            seed: *s,
            objects: li.objects.clone(),
        })
        .collect();
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        seed,
        spec: spec.clone(),
        counts: *counts,
        images: entries,
    };
    Ok((manifest, images))
}

/// Writes `dir/images/*.ppm` and `dir/manifest.json`.
pub fn write_dataset(
    spec: &SceneSpec,
    counts: &DatasetCounts,
    seed: u64,
    dir: &Path,
) -> Result<Manifest, SynthError> {
    let (manifest, images) = generate_dataset(spec, counts, seed)?;
    std::fs::create_dir_all(dir.join("images"))?;
    for (entry, li) in manifest.images.iter().zip(&images) {
        crate::io::write_atomic(&dir.join(&entry.path), &li.image.to_ppm())?;
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    crate::io::write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_image(dir: &Path, entry: &ManifestEntry) -> Result<RgbImage, SynthError> {
    RgbImage::from_ppm(&std::fs::read(dir.join(&entry.path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_objects(spec: &SceneSpec, img: &RgbImage) -> usize {
        // Distinct vocabulary-colored 4-connected components.
        let mut seen = vec![false; img.width * img.height];
        let mut n = 0;
        for y in 0..img.height {
            for x in 0..img.width {
                let c = img.get(x, y);
                if seen[y * img.width + x] || spec.color_index(c).is_none() {
                    continue;
                }
                n += 1;
                let mut stack = vec![(x, y)];
                while let Some((px, py)) = stack.pop() {
                    if seen[py * img.width + px] || img.get(px, py) != c {
                        continue;
                    }
                    seen[py * img.width + px] = true;
                    if px > 0 {
                        stack.push((px - 1, py));
                    }
                    if py > 0 {
                        stack.push((px, py - 1));
                    }
                    if px + 1 < img.width {
                        stack.push((px + 1, py));
                    }
                    if py + 1 < img.height {
                        stack.push((px, py + 1));
                    }
                }
            }
        }
        n
    }

    #[test]
    fn normal_scene_has_three_valid_objects() {
        let spec = SceneSpec::default();
        let li = generate(&spec, AnomalyKind::None, 7).unwrap();
        assert_eq!(count_objects(&spec, &li.image), 3);
        assert_eq!(li.objects.len(), 3);
        assert!(validate_layout(&spec, &li.image).is_ok());
    }

    #[test]
    fn determinism() {
        let spec = SceneSpec::default();
        for kind in [AnomalyKind::None, AnomalyKind::Extra, AnomalyKind::Scratch] {
            assert_eq!(generate(&spec, kind, 11).unwrap(), generate(&spec, kind, 11).unwrap());
        }
    }

    #[test]
    fn validator_accepts_200_normals() {
        let spec = SceneSpec::default();
        for s in 0..200 {
            let li = generate(&spec, AnomalyKind::None, s).unwrap();
            let found = validate_layout(&spec, &li.image).unwrap();
            assert_eq!(found, li.objects, "seed {s}");
        }
    }

    #[test]
    fn missing_drops_one_object() {
        let spec = SceneSpec::default();
        for s in 0..20 {
            let li = generate(&spec, AnomalyKind::Missing, s).unwrap();
            assert_eq!(count_objects(&spec, &li.image), spec.slots.len() - 1);
            assert!(matches!(
                validate_layout(&spec, &li.image),
                Err(LayoutViolation::EmptySlot(_))
            ));
        }
    }

    #[test]
    fn swapped_objects_keep_their_pixels() {
        let spec = SceneSpec::default();
        for s in 0..20 {
            let mut rng = Rng::new(s, Stream::Data);
            let (_, normal) = normal_objects(&spec, &mut rng).unwrap();
            let li = generate(&spec, AnomalyKind::SwappedPosition, s).unwrap();
            let moved: Vec<usize> = (0..normal.len())
                .filter(|&i| normal[i] != li.objects[i])
                .collect();
            assert_eq!(moved.len(), 2);
            let (a, b) = (moved[0], moved[1]);
            assert_eq!(li.objects[a].kind, normal[a].kind);
            assert!(spec.slots[b].contains(li.objects[a].cx, li.objects[a].cy));
            assert!(spec.slots[a].contains(li.objects[b].cx, li.objects[b].cy));
            // Same raster, translated.
            let ka = &spec.vocabulary[normal[a].kind];
            let (dx, dy) = (li.objects[a].cx - normal[a].cx, li.objects[a].cy - normal[a].cy);
            let before = render(&spec, &[normal[a]]);
            let after = render(&spec, &[li.objects[a]]);
            for y in 0..spec.height as i32 {
                for x in 0..spec.width as i32 {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sy >= 0 && sx < 32 && sy < 32 {
                        assert_eq!(
                            after.get(x as usize, y as usize) == ka.color,
                            before.get(sx as usize, sy as usize) == ka.color
                        );
                    }
                }
            }
            assert!(validate_layout(&spec, &li.image).is_err());
        }
    }

    #[test]
    fn wrong_combination_recolors_within_vocabulary() {
        let spec = SceneSpec::default();
        for s in 0..20 {
            let li = generate(&spec, AnomalyKind::WrongCombination, s).unwrap();
            let kinds: Vec<usize> = li.objects.iter().map(|o| o.kind).collect();
            assert!(!spec.themes.contains(&kinds));
            for (slot, &k) in kinds.iter().enumerate() {
                assert!(spec.themes.iter().any(|t| t[slot] == k));
            }
            assert!(matches!(
                validate_layout(&spec, &li.image),
                Err(LayoutViolation::NoTheme(_))
            ));
        }
    }

    #[test]
    fn extra_adds_object_in_free_region() {
        let spec = SceneSpec::default();
        let li = generate(&spec, AnomalyKind::Extra, 3).unwrap();
        assert_eq!(count_objects(&spec, &li.image), 4);
        let last = li.objects.last().unwrap();
        assert!(spec.free_regions[0].contains(last.cx, last.cy));
    }

    #[test]
    fn structural_defects_keep_layout() {
        let spec = SceneSpec::default();
        for s in 0..100 {
            for kind in AnomalyKind::STRUCTURAL {
                let li = generate(&spec, kind, s).unwrap();
                validate_layout(&spec, &li.image).unwrap_or_else(|e| panic!("{kind} {s}: {e:?}"));
                let normal = render(&spec, &li.objects);
                let diff: Vec<(usize, usize)> = (0..32)
                    .flat_map(|y| (0..32).map(move |x| (x, y)))
                    .filter(|&(x, y)| li.image.get(x, y) != normal.get(x, y))
                    .collect();
                assert!(!diff.is_empty() || kind == AnomalyKind::Scratch);
                let (xs, ys): (Vec<_>, Vec<_>) = diff.iter().copied().unzip();
                if let (Some(x0), Some(x1), Some(y0), Some(y1)) =
                    (xs.iter().min(), xs.iter().max(), ys.iter().min(), ys.iter().max())
                {
                    let area = (x1 - x0 + 1) * (y1 - y0 + 1);
                    assert!(area * 10 <= 32 * 32, "{kind} area {area}");
                    if kind == AnomalyKind::Blob {
                        assert!(x1 - x0 < 4 && y1 - y0 < 4);
                    }
                }
                for &(x, y) in &diff {
                    assert!(spec.defect_colors.contains(&li.image.get(x, y)));
                }
            }
        }
    }

    #[test]
    fn inapplicable_kinds() {
        let mut spec = SceneSpec::default();
        spec.slots.truncate(1);
        spec.themes = vec![vec![0], vec![1]];
        let mut rng = Rng::new(0, Stream::Data);
        assert!(matches!(
            generate_logical_anomaly(&spec, &mut rng, AnomalyKind::Missing),
            Err(SynthError::NotApplicable { .. })
        ));
        assert!(generate_logical_anomaly(&spec, &mut rng, AnomalyKind::Blob).is_err());
    }

    #[test]
    fn infeasible_region_rejected() {
        let mut spec = SceneSpec::default();
        spec.slots[0].x0 = 1;
        assert!(matches!(spec.validate(), Err(SynthError::Infeasible(_))));
    }

    #[test]
    fn ppm_roundtrip() {
        let spec = SceneSpec::default();
        let li = generate(&spec, AnomalyKind::Blob, 5).unwrap();
        let back = RgbImage::from_ppm(&li.image.to_ppm()).unwrap();
        assert_eq!(back, li.image);
        assert!(RgbImage::from_ppm(b"P6\n32 32\n255\n\x00").is_err());
    }

    #[test]
    fn token_kinds_cover_objects() {
        let spec = SceneSpec::default();
        let li = generate(&spec, AnomalyKind::None, 1).unwrap();
        let tk = token_kinds(&spec, &li.objects, 4);
        assert_eq!(tk.len(), 64);
        for o in &li.objects {
            let t = (o.cy as usize / 4) * 8 + o.cx as usize / 4;
            assert_eq!(tk[t], o.kind + 1);
        }
        assert_eq!(tk[63], 0);
    }
}
