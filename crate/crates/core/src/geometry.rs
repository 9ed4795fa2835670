//! Landmark-space geometry: similarity fitting, exposed-side detection,
//! image warping and landmark-polygon segmentation.
//!
//! Pixel coordinates are continuous: pixel `(px, py)` covers the square
//! `[px, px + 1) × [py, py + 1)` and its value is taken at the center
//! `(px + 0.5, py + 0.5)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const NUM_LANDMARKS: usize = 68;

pub type Point2 = [f64; 2];

/// Index of each landmark's left/right counterpart under a horizontal flip
/// (iBUG-68 ordering).
pub const MIRROR_INDEX: [usize; NUM_LANDMARKS] = {
    let mut m = [0usize; NUM_LANDMARKS];
    let mut i = 0;
    while i < 17 {
        m[i] = 16 - i;
        i += 1;
    }
    let mut i = 0;
    while i < 5 {
        m[17 + i] = 26 - i;
        m[26 - i] = 17 + i;
        i += 1;
    }
    m[27] = 27;
    m[28] = 28;
    m[29] = 29;
    m[30] = 30;
    m[31] = 35;
    m[32] = 34;
    m[33] = 33;
    m[34] = 32;
    m[35] = 31;
    let eyes = [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)];
    let mut i = 0;
    while i < eyes.len() {
        m[eyes[i].0] = eyes[i].1;
        m[eyes[i].1] = eyes[i].0;
        i += 1;
    }
    let mouth = [
        (48, 54),
        (49, 53),
        (50, 52),
        (51, 51),
        (55, 59),
        (56, 58),
        (57, 57),
        (60, 64),
        (61, 63),
        (62, 62),
        (65, 67),
        (66, 66),
    ];
    let mut i = 0;
    while i < mouth.len() {
        m[mouth[i].0] = mouth[i].1;
        m[mouth[i].1] = mouth[i].0;
        i += 1;
    }
    m
};

/// Landmarks on the vertical midline; they belong to both face halves.
pub const MIDLINE: [usize; 10] = [8, 27, 28, 29, 30, 33, 51, 57, 62, 66];

/// 68 ordered 3D landmarks: x, y in pixels, z relative depth in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet3D {
    points: Vec<[f64; 3]>,
}

impl LandmarkSet3D {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidInput(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Orthographic projection (drops z).
    pub fn to_2d(&self) -> Vec<Point2> {
        self.points.iter().map(|p| [p[0], p[1]]).collect()
    }

    pub fn subset_2d(&self, indices: &[usize]) -> Vec<Point2> {
        indices
            .iter()
            .map(|&i| [self.points[i][0], self.points[i][1]])
            .collect()
    }

    /// Horizontal flip about the vertical line `x = width / 2`, with
    /// left/right landmark indices swapped so the ordering stays valid.
    pub fn mirror(&self, width: f64) -> LandmarkSet3D {
        let points = (0..NUM_LANDMARKS)
            .map(|i| {
                let p = self.points[MIRROR_INDEX[i]];
                [width - p[0], p[1], p[2]]
            })
            .collect();
        LandmarkSet3D { points }
    }

    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<LandmarkSet3D> {
        LandmarkSet3D::new(self.points.iter().map(|&p| f(p)).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 3 values, got {}", lineno + 1, vals.len()),
                ));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        if points.len() != NUM_LANDMARKS {
            return Err(Error::format(
                path,
                format!("expected {NUM_LANDMARKS} landmark rows, got {}", points.len()),
            ));
        }
        LandmarkSet3D::new(points).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `p ↦ scale · R(rotation) · p + translation`, reflection-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2D {
    pub scale: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl Default for Similarity2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity2D {
    pub fn new(scale: f64, rotation: f64, translation: [f64; 2]) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, [0.0, 0.0])
    }

    /// Rotation by `angle` (and scaling) about a fixed `center`.
    pub fn about(center: Point2, scale: f64, angle: f64) -> Self {
        let to_origin = Similarity2D::new(1.0, 0.0, [-center[0], -center[1]]);
        let rs = Similarity2D::new(scale, angle, [0.0, 0.0]);
        let back = Similarity2D::new(1.0, 0.0, center);
        to_origin.then(&rs).then(&back)
    }

    /// Equivalent 2×3 matrix `[s·R | t]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let a = self.scale * cos;
        let b = self.scale * sin;
        [
            [a, -b, self.translation[0]],
            [b, a, self.translation[1]],
        ]
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let m = self.matrix();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &Similarity2D) -> Similarity2D {
        let t = other.apply(self.translation);
        Similarity2D::new(
            self.scale * other.scale,
            self.rotation + other.rotation,
            t,
        )
    }

    pub fn inverse(&self) -> Result<Similarity2D> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::NonInvertible(self.scale));
        }
        let s = 1.0 / self.scale;
        let (sin, cos) = (-self.rotation).sin_cos();
        let [tx, ty] = self.translation;
        let t = [-s * (cos * tx - sin * ty), -s * (sin * tx + cos * ty)];
        Ok(Similarity2D::new(s, -self.rotation, t))
    }
}

/// Closed-form least-squares similarity (no reflection) mapping `src` onto
/// `dst`, minimizing `Σ‖T(src_i) − dst_i‖²`.
///
/// Treating points as complex numbers with centered coordinates `a_i`,
/// `b_i`, the optimum is `s·e^{iθ} = Σ conj(a_i)·b_i / Σ|a_i|²`.
pub fn fit_similarity(src: &[Point2], dst: &[Point2]) -> Result<Similarity2D> {
    if src.len() != dst.len() {
        return Err(Error::shape("fit_similarity", src.len(), dst.len()));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 2 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mean = |pts: &[Point2]| {
        let (sx, sy) = pts
            .iter()
            .fold((0.0, 0.0), |(ax, ay), p| (ax + p[0], ay + p[1]));
        [sx / n, sy / n]
    };
    let ms = mean(src);
    let md = mean(dst);

    let mut var = 0.0;
    let (mut re, mut im) = (0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (ax, ay) = (p[0] - ms[0], p[1] - ms[1]);
        let (bx, by) = (q[0] - md[0], q[1] - md[1]);
        var += ax * ax + ay * ay;
        re += ax * bx + ay * by;
        im += ax * by - ay * bx;
    }
    let spread = src
        .iter()
        .chain(dst)
        .fold(0.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs()));
    if !(var > 1e-24 * (1.0 + spread * spread) * n) {
        return Err(Error::DegenerateGeometry(
            "source points are coincident".into(),
        ));
    }
    let mag = re.hypot(im);
    if !(mag > 0.0) {
        return Err(Error::DegenerateGeometry(
            "no rotation/scale explains the correspondences".into(),
        ));
    }
    let scale = mag / var;
    let rotation = im.atan2(re);
    let (sin, cos) = rotation.sin_cos();
    let translation = [
        md[0] - scale * (cos * ms[0] - sin * ms[1]),
        md[1] - scale * (sin * ms[0] + cos * ms[1]),
    ];
    Ok(Similarity2D::new(scale, rotation, translation))
}

pub fn apply_similarity(points: &[Point2], t: &Similarity2D) -> Vec<Point2> {
    points.iter().map(|&p| t.apply(p)).collect()
}

/// Inverse-mapped bilinear resampling of `img` under `t` onto an
/// `out_h × out_w` canvas. Destinations whose pre-image falls outside the
/// source pixel-center lattice receive `fill`.
pub fn warp_image(
    img: &Image,
    t: &Similarity2D,
    out_h: usize,
    out_w: usize,
    fill: f64,
) -> Result<Image> {
    let inv = t.inverse()?;
    let m = inv.matrix();
    let (c_n, h, w) = img.shape();
    let mut out = Image::filled(c_n, out_h, out_w, fill);
    const SLACK: f64 = 1e-9;
    let max_x = w as f64 - 1.0;
    let max_y = h as f64 - 1.0;
    for py in 0..out_h {
        for px in 0..out_w {
            let dx = px as f64 + 0.5;
            let dy = py as f64 + 0.5;
            let sx = m[0][0] * dx + m[0][1] * dy + m[0][2] - 0.5;
            let sy = m[1][0] * dx + m[1][1] * dy + m[1][2] - 0.5;
            if !(sx >= -SLACK && sx <= max_x + SLACK && sy >= -SLACK && sy <= max_y + SLACK) {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..c_n {
                let top = if fx == 0.0 {
                    img.get(c, y0, x0)
                } else {
                    img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx
                };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bot = if fx == 0.0 {
                        img.get(c, y1, x0)
                    } else {
                        img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx
                    };
                    top * (1.0 - fy) + bot * fy
                };
                out.set(c, py, px, v);
            }
        }
    }
    Ok(out)
}

/// Face half as seen in the image (image-left is the subject's right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Landmark groups used when fitting the alignment transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LandmarkGroup {
    Jaw,
    Brow,
    Eye,
    NoseBridge,
    Nostrils,
    Mouth,
}

impl LandmarkGroup {
    pub fn name(self) -> &'static str {
        match self {
            LandmarkGroup::Jaw => "jaw",
            LandmarkGroup::Brow => "brow",
            LandmarkGroup::Eye => "eye",
            LandmarkGroup::NoseBridge => "bridge",
            LandmarkGroup::Nostrils => "nostrils",
            LandmarkGroup::Mouth => "mouth",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "jaw" => LandmarkGroup::Jaw,
            "brow" => LandmarkGroup::Brow,
            "eye" => LandmarkGroup::Eye,
            "bridge" => LandmarkGroup::NoseBridge,
            "nostrils" => LandmarkGroup::Nostrils,
            "mouth" => LandmarkGroup::Mouth,
            _ => return None,
        })
    }

    /// Indices of this group on the given side (midline points included).
    pub fn indices(self, side: Side) -> Vec<usize> {
        let left: Vec<usize> = match self {
            LandmarkGroup::Jaw => (0..=8).collect(),
            LandmarkGroup::Brow => (17..=21).collect(),
            LandmarkGroup::Eye => (36..=41).collect(),
            LandmarkGroup::NoseBridge => (27..=30).collect(),
            LandmarkGroup::Nostrils => vec![31, 32, 33],
            LandmarkGroup::Mouth => vec![48, 49, 50, 51, 57, 58, 59, 60, 61, 62, 66, 67],
        };
        match side {
            Side::Left => left,
            Side::Right => {
                let mut v: Vec<usize> = left.into_iter().map(|i| MIRROR_INDEX[i]).collect();
                v.sort_unstable();
                v
            }
        }
    }
}

/// Image-left half of the face, midline points included.
const LEFT_HALF: [usize; 39] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, // jaw to chin
    17, 18, 19, 20, 21, // brow
    27, 28, 29, 30, 31, 32, 33, // nose
    36, 37, 38, 39, 40, 41, // eye
    48, 49, 50, 51, 57, 58, 59, // outer lip
    60, 61, 62, 66, 67, // inner lip
];

/// All landmark indices of one face half, midline points included.
pub fn half_indices(side: Side) -> Vec<usize> {
    let mut v: Vec<usize> = match side {
        Side::Left => LEFT_HALF.to_vec(),
        Side::Right => LEFT_HALF.iter().map(|&i| MIRROR_INDEX[i]).collect(),
    };
    v.sort_unstable();
    v
}

fn bbox_area(points: impl Iterator<Item = Point2>) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    (x1 - x0) * (y1 - y0)
}

/// The face half whose projected landmark bounding box is larger.
/// Exact ties resolve to [`Side::Left`].
pub fn exposed_side(ldmk: &LandmarkSet3D) -> Side {
    let area = |side| bbox_area(half_indices(side).into_iter().map(|i| {
        let p = ldmk.point(i);
        [p[0], p[1]]
    }));
    if area(Side::Right) > area(Side::Left) {
        Side::Right
    } else {
        Side::Left
    }
}

/// Facial region classes, in painting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    FaceInterior = 1,
    LeftBrow = 2,
    RightBrow = 3,
    LeftEye = 4,
    RightEye = 5,
    Nose = 6,
    Mouth = 7,
}

pub const NUM_REGIONS: usize = 8;

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [
        Region::Background,
        Region::FaceInterior,
        Region::LeftBrow,
        Region::RightBrow,
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::Mouth,
    ];

    pub fn from_index(i: u8) -> Option<Region> {
        Region::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::FaceInterior => "face",
            Region::LeftBrow => "left_brow",
            Region::RightBrow => "right_brow",
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
        }
    }

    /// Landmark index cycle outlining the region (empty for background).
    pub fn polygon(self) -> Vec<usize> {
        match self {
            Region::Background => vec![],
            Region::FaceInterior => (0..=16).chain((17..=26).rev()).collect(),
            Region::LeftBrow => (17..=21).collect(),
            Region::RightBrow => (22..=26).collect(),
            Region::LeftEye => (36..=41).collect(),
            Region::RightEye => (42..=47).collect(),
            Region::Nose => vec![27, 31, 32, 33, 34, 35],
            Region::Mouth => (48..=59).collect(),
        }
    }
}

/// Per-pixel region labels; the one-hot view is [`SegmentationMap::to_one_hot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![Region::Background as u8; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("SegmentationMap", height * width, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_REGIONS) {
            return Err(Error::InvalidInput(format!("region label {bad} out of range")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> Region {
        Region::ALL[self.labels[y * self.width + x] as usize]
    }

    /// H×W×N one-hot image (N = [`NUM_REGIONS`] channels).
    pub fn to_one_hot(&self) -> Image {
        let mut img = Image::new(NUM_REGIONS, self.height, self.width);
        let n = self.height * self.width;
        for (i, &l) in self.labels.iter().enumerate() {
            img.data_mut()[l as usize * n + i] = 1.0;
        }
        img
    }

    pub fn counts(&self) -> [usize; NUM_REGIONS] {
        let mut c = [0; NUM_REGIONS];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Mean pixel-center position (x, y) of a region, if present.
    pub fn centroid(&self, region: Region) -> Option<Point2> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.labels[y * self.width + x] == region as u8 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }

    /// Text form: one row of space-separated class indices per image row.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.labels.len() * 2);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut labels = Vec::new();
        let mut height = 0;
        let mut width = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::format(path, format!("line {}: ragged row", lineno + 1)))
                }
                _ => {}
            }
            labels.extend(row);
            height += 1;
        }
        let width = width.ok_or_else(|| Error::format(path, "empty segmentation file"))?;
        SegmentationMap::from_labels(height, width, labels)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Even-odd scanline fill sampled at pixel centers. Calls `paint(y, x)`
/// for every covered pixel; parts of the polygon off the canvas are clipped.
pub fn fill_polygon(poly: &[Point2], height: usize, width: usize, mut paint: impl FnMut(usize, usize)) {
    if poly.len() < 3 {
        return;
    }
    let mut xs: Vec<f64> = Vec::with_capacity(poly.len());
    for py in 0..height {
        let yc = py as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if (a[1] <= yc) != (b[1] <= yc) {
                xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // Pixel centers strictly right of the entering crossing and at or
            // left of the leaving one.
            let start = (pair[0] - 0.5).floor() + 1.0;
            let end = (pair[1] - 0.5).floor();
            let start = start.max(0.0);
            let end = end.min(width as f64 - 1.0);
            if end < start {
                continue;
            }
            for px in start as usize..=end as usize {
                paint(py, px);
            }
        }
    }
}

/// Rasterizes the landmark region polygons into a one-hot segmentation;
/// later regions in [`Region::ALL`] overwrite earlier ones.
pub fn rasterize_segmentation(ldmk2d: &[Point2], height: usize, width: usize) -> Result<SegmentationMap> {
    if ldmk2d.len() != NUM_LANDMARKS {
        return Err(Error::InvalidInput(format!(
            "expected {NUM_LANDMARKS} landmarks, got {}",
            ldmk2d.len()
        )));
    }
    let mut seg = SegmentationMap::background(height, width);
    for region in Region::ALL.into_iter().skip(1) {
        let poly: Vec<Point2> = region.polygon().into_iter().map(|i| ldmk2d[i]).collect();
        fill_polygon(&poly, height, width, |y, x| {
            seg.labels[y * width + x] = region as u8;
        });
    }
    Ok(seg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
        d.min(2.0 * std::f64::consts::PI - d)
    }

    #[test]
    fn mirror_table_is_an_involution() {
        for i in 0..NUM_LANDMARKS {
            assert_eq!(MIRROR_INDEX[MIRROR_INDEX[i]], i);
        }
        for &m in &MIDLINE {
            assert_eq!(MIRROR_INDEX[m], m);
        }
        let fixed: Vec<usize> = (0..NUM_LANDMARKS).filter(|&i| MIRROR_INDEX[i] == i).collect();
        assert_eq!(fixed, MIDLINE.to_vec());
    }

    #[test]
    fn halves_are_mirror_images_and_share_midline() {
        let left = half_indices(Side::Left);
        let mut mirrored: Vec<usize> = left.iter().map(|&i| MIRROR_INDEX[i]).collect();
        mirrored.sort_unstable();
        assert_eq!(mirrored, half_indices(Side::Right));
        for m in MIDLINE {
            assert!(left.contains(&m));
        }
        assert_eq!(left.len() * 2 - MIDLINE.len(), NUM_LANDMARKS);
    }

    #[test]
    fn fit_identity_cloud() {
        let pts: Vec<Point2> = vec![[1.0, 2.0], [3.0, -1.0], [0.5, 4.0], [-2.0, 0.0]];
        let t = fit_similarity(&pts, &pts).unwrap();
        assert!(close(t.scale, 1.0, 1e-12));
        assert!(close(t.rotation, 0.0, 1e-12));
        assert!(close(t.translation[0], 0.0, 1e-12) && close(t.translation[1], 0.0, 1e-12));
    }

    #[test]
    fn fit_scaled_shifted_square() {
        let src = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let dst: Vec<Point2> = src.iter().map(|p| [2.0 * p[0] + 3.0, 2.0 * p[1] + 4.0]).collect();
        let t = fit_similarity(&src, &dst).unwrap();
        assert!(close(t.scale, 2.0, 1e-12));
        assert!(close(t.rotation, 0.0, 1e-12));
        assert!(close(t.translation[0], 3.0, 1e-12));
        assert!(close(t.translation[1], 4.0, 1e-12));
    }

    #[test]
    fn fit_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud: Vec<Point2> = (0..10)
            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
            .collect();
        let truth = Similarity2D::new(1.3, 30f64.to_radians(), [5.0, -2.0]);
        let dst = apply_similarity(&cloud, &truth);
        let t = fit_similarity(&cloud, &dst).unwrap();
        assert!(close(t.scale, 1.3, 1e-9));
        assert!(angle_diff(t.rotation, truth.rotation) < 1e-9);
        assert!(close(t.translation[0], 5.0, 1e-9));
        assert!(close(t.translation[1], -2.0, 1e-9));
        let resid: f64 = apply_similarity(&cloud, &t)
            .iter()
            .zip(&dst)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        assert!(resid < 1e-18, "residual {resid}");
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let p = vec![[1.0, 1.0]];
        assert!(matches!(fit_similarity(&p, &p), Err(Error::DegenerateGeometry(_))));
        let same = vec![[2.0, 3.0]; 5];
        let dst = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 2.0], [0.0, 1.0], [3.0, 3.0]];
        assert!(matches!(fit_similarity(&same, &dst), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn fit_excludes_reflections() {
        let src = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5]];
        let dst: Vec<Point2> = src.iter().map(|p| [-p[0], p[1]]).collect();
        let t = fit_similarity(&src, &dst).unwrap();
        let m = t.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!(det > 0.0);
    }

    #[test]
    fn apply_examples() {
        let p = vec![[1.0, 0.0], [3.5, -2.0]];
        assert_eq!(apply_similarity(&p, &Similarity2D::identity()), p);
        let r = Similarity2D::new(1.0, std::f64::consts::FRAC_PI_2, [0.0, 0.0]);
        let q = r.apply([1.0, 0.0]);
        assert!(close(q[0], 0.0, 1e-15) && close(q[1], 1.0, 1e-15));
    }

    #[test]
    fn composition_matches_sequential_application() {
        let a = Similarity2D::new(1.7, 0.4, [3.0, -1.0]);
        let b = Similarity2D::new(0.6, -2.1, [-4.0, 2.5]);
        for p in [[0.0, 0.0], [1.0, 2.0], [-3.0, 7.5]] {
            let seq = b.apply(a.apply(p));
            let comp = a.then(&b).apply(p);
            assert!(close(seq[0], comp[0], 1e-12) && close(seq[1], comp[1], 1e-12));
        }
        let inv = a.inverse().unwrap();
        let p = inv.apply(a.apply([2.0, -5.0]));
        assert!(close(p[0], 2.0, 1e-12) && close(p[1], -5.0, 1e-12));
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = Image::from_fn(3, 6, 5, |c, y, x| ((c * 13 + y * 5 + x * 3) % 7) as f64 / 7.0);
        let out = warp_image(&img, &Similarity2D::identity(), 6, 5, 0.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_integer_translation() {
        let img = Image::from_fn(1, 3, 6, |_, y, x| (1 + y * 6 + x) as f64);
        let t = Similarity2D::new(1.0, 0.0, [2.0, 0.0]);
        let out = warp_image(&img, &t, 3, 6, -1.0).unwrap();
        for y in 0..3 {
            assert_eq!(out.get(0, y, 0), -1.0);
            assert_eq!(out.get(0, y, 1), -1.0);
            for x in 2..6 {
                assert_eq!(out.get(0, y, x), img.get(0, y, x - 2));
            }
        }
    }

    #[test]
    fn warp_quarter_turn_matches_per_pixel_oracle() {
        let img = Image::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = Similarity2D::about([1.0, 1.0], 1.0, std::f64::consts::FRAC_PI_2);
        let out = warp_image(&img, &t, 2, 2, 0.0).unwrap();
        // Oracle: destination center d maps back through the inverse rotation
        // about (1, 1): s = (d_y - 1 + 1, -(d_x - 1) + 1).
        for py in 0..2 {
            for px in 0..2 {
                let (dx, dy) = (px as f64 + 0.5, py as f64 + 0.5);
                let (sx, sy) = (dy, 2.0 - dx);
                let expect = img.get(0, (sy - 0.5).round() as usize, (sx - 0.5).round() as usize);
                assert!(close(out.get(0, py, px), expect, 1e-12));
            }
        }
        assert!(close(out.get(0, 0, 0), 0.3, 1e-12));
    }

    #[test]
    fn warp_rejects_zero_scale() {
        let img = Image::new(1, 2, 2);
        let t = Similarity2D::new(0.0, 0.0, [0.0, 0.0]);
        assert!(matches!(warp_image(&img, &t, 2, 2, 0.0), Err(Error::NonInvertible(_))));
    }

    #[test]
    fn polygon_fill_square() {
        let sq = [[1.0, 1.0], [4.0, 1.0], [4.0, 3.0], [1.0, 3.0]];
        let mut n = 0;
        fill_polygon(&sq, 6, 6, |y, x| {
            assert!((1..3).contains(&y) && (1..4).contains(&x));
            n += 1;
        });
        assert_eq!(n, 6);
    }

    #[test]
    fn segmentation_off_canvas_is_background() {
        let pts: Vec<Point2> = (0..NUM_LANDMARKS)
            .map(|i| [1000.0 + i as f64, 2000.0 + (i % 7) as f64])
            .collect();
        let seg = rasterize_segmentation(&pts, 10, 12).unwrap();
        assert_eq!(seg.counts()[0], 120);
    }

    #[test]
    fn landmark_text_rejects_wrong_row_count() {
        let text = "1 2 3\n4 5 6\n";
        let err = LandmarkSet3D::parse(text, Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn fit_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src: Vec<Point2> = (0..8).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
            let dst: Vec<Point2> = (0..8).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
            let t1 = fit_similarity(&src, &dst).unwrap();
            let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
            let ps: Vec<Point2> = perm.iter().map(|&i| src[i]).collect();
            let pd: Vec<Point2> = perm.iter().map(|&i| dst[i]).collect();
            let t2 = fit_similarity(&ps, &pd).unwrap();
            prop_assert!((t1.scale - t2.scale).abs() < 1e-10);
            prop_assert!(angle_diff(t1.rotation, t2.rotation) < 1e-10);
            prop_assert!((t1.translation[0] - t2.translation[0]).abs() < 1e-9);
            prop_assert!((t1.translation[1] - t2.translation[1]).abs() < 1e-9);
        }

        #[test]
        fn rasterized_maps_are_one_hot(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point2> = (0..NUM_LANDMARKS).map(|_| [rng.gen_range(-4.0..20.0), rng.gen_range(-4.0..20.0)]).collect();
            let seg = rasterize_segmentation(&pts, 16, 16).unwrap();
            let oh = seg.to_one_hot();
            for y in 0..16 {
                for x in 0..16 {
                    let s: f64 = (0..NUM_REGIONS).map(|c| oh.get(c, y, x)).sum();
                    prop_assert_eq!(s, 1.0);
                }
            }
        }
    }
}
