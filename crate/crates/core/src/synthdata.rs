//! Procedural synthetic faces with exact 3D landmarks and segmentation.
//!
//! A mirror-symmetric 68-point template is deformed per identity, rotated
//! by the pose, projected orthographically and painted region by region
//! with the landmark polygon rasterizer. Shading on the face depends on yaw
//! so that pose changes alter texture, not only geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{rasterize_segmentation, LandmarkSet3D, Region, SegmentationMap, MIDLINE, MIRROR_INDEX, NUM_LANDMARKS, NUM_REGIONS};
use crate::image::Image;

/// Largest per-coordinate identity deformation, in face units.
pub const MAX_OFFSET: f64 = 0.08;
/// Face size as a fraction of the canvas side.
pub const FACE_SCALE: f64 = 0.6;
/// Landmarks must keep this fraction of the canvas side from every border.
pub const CANVAS_MARGIN: f64 = 0.1;

const YAW_LIMIT: f64 = 75.0 * std::f64::consts::PI / 180.0;
const PITCH_LIMIT: f64 = 30.0 * std::f64::consts::PI / 180.0;
const ROLL_LIMIT: f64 = 20.0 * std::f64::consts::PI / 180.0;

/// Image-left and midline template points `(index, x, y, z)`; the right
/// half is their mirror image.
const HALF_TEMPLATE: [(usize, f64, f64, f64); 39] = [
    // brow
    (17, -0.38, -0.26, 0.02),
    (18, -0.31, -0.316, 0.05),
    (19, -0.24, -0.34, 0.08),
    (20, -0.17, -0.316, 0.11),
    (21, -0.10, -0.26, 0.14),
    // nose bridge and nostrils
    (27, 0.0, -0.20, 0.20),
    (28, 0.0, -0.13, 0.25),
    (29, 0.0, -0.06, 0.30),
    (30, 0.0, 0.01, 0.35),
    (31, -0.10, 0.08, 0.18),
    (32, -0.05, 0.10, 0.22),
    (33, 0.0, 0.11, 0.25),
    // eye
    (36, -0.31, -0.15, 0.05),
    (37, -0.25, -0.20, 0.09),
    (38, -0.16, -0.20, 0.10),
    (39, -0.10, -0.15, 0.09),
    (40, -0.16, -0.10, 0.10),
    (41, -0.25, -0.10, 0.09),
    // outer lip
    (48, -0.20, 0.27, 0.08),
    (49, -0.12, 0.21, 0.14),
    (50, -0.05, 0.20, 0.17),
    (51, 0.0, 0.21, 0.18),
    (57, 0.0, 0.36, 0.16),
    (58, -0.05, 0.355, 0.15),
    (59, -0.12, 0.33, 0.12),
    // inner lip
    (60, -0.15, 0.27, 0.10),
    (61, -0.05, 0.25, 0.15),
    (62, 0.0, 0.25, 0.16),
    (66, 0.0, 0.29, 0.15),
    (67, -0.05, 0.29, 0.14),
    // jaw, filled in by `canonical_template`
    (0, 0.0, 0.0, 0.0),
    (1, 0.0, 0.0, 0.0),
    (2, 0.0, 0.0, 0.0),
    (3, 0.0, 0.0, 0.0),
    (4, 0.0, 0.0, 0.0),
    (5, 0.0, 0.0, 0.0),
    (6, 0.0, 0.0, 0.0),
    (7, 0.0, 0.0, 0.0),
    (8, 0.0, 0.0, 0.0),
];

fn is_midline(i: usize) -> bool {
    MIDLINE.contains(&i)
}

/// Frontal template in face units (x right, y down, z toward the camera),
/// centered on the origin and exactly mirror-symmetric about `x = 0`.
pub fn canonical_template() -> LandmarkSet3D {
    let mut pts = [[0.0; 3]; NUM_LANDMARKS];
    for &(i, x, y, z) in &HALF_TEMPLATE {
        let p = if i <= 8 {
            // lower half of an ellipse from the left temple to the chin
            let t = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
            let (s, c) = t.sin_cos();
            let x = if i == 8 { 0.0 } else { 0.42 * c };
            [x, -0.05 + 0.5 * s, 0.1 - 0.4 * c.abs()]
        } else {
            [x, y, z]
        };
        pts[i] = p;
        pts[MIRROR_INDEX[i]] = [-p[0], p[1], p[2]];
    }
    LandmarkSet3D::new(pts.to_vec()).expect("template is finite")
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    /// Per-landmark deformation of the template, |δ| ≤ [`MAX_OFFSET`].
    pub offsets: Vec<[f64; 3]>,
    /// Per-class RGB; the background entry is unused (style supplies it).
    pub colors: [[f64; 3]; NUM_REGIONS],
    pub eye_spacing: f64,
    pub mouth_width: f64,
}

impl IdentityParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        let template = canonical_template();
        let eye_spacing = rng.gen_range(0.9..1.1);
        let mouth_width = rng.gen_range(0.85..1.15);
        let face_width = rng.gen_range(0.92..1.08);
        let mut offsets = vec![[0.0; 3]; NUM_LANDMARKS];
        for &(i, ..) in &HALF_TEMPLATE {
            let p = template.point(i);
            let gain = match i {
                0..=16 => face_width,
                36..=47 => eye_spacing,
                48..=67 => mouth_width,
                _ => 1.0,
            };
            let mut d = [
                p[0] * (gain - 1.0) + rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
            ];
            if is_midline(i) {
                d[0] = 0.0;
            }
            for v in &mut d {
                *v = v.clamp(-MAX_OFFSET, MAX_OFFSET);
            }
            offsets[i] = d;
            offsets[MIRROR_INDEX[i]] = [-d[0], d[1], d[2]];
        }
        let r = rng.gen_range(0.6..0.95);
        let g = r * rng.gen_range(0.7..0.9);
        let b = g * rng.gen_range(0.7..0.95);
        let skin = [r, g, b];
        let dark = rng.gen_range(0.2..0.45);
        let mut colors = [[0.0; 3]; NUM_REGIONS];
        colors[Region::FaceInterior as usize] = skin;
        colors[Region::LeftBrow as usize] = skin.map(|c| c * dark);
        colors[Region::RightBrow as usize] = skin.map(|c| c * dark);
        let eye = [rng.gen_range(0.05..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.5)];
        colors[Region::LeftEye as usize] = eye;
        colors[Region::RightEye as usize] = eye;
        let nose = rng.gen_range(0.78..0.9);
        colors[Region::Nose as usize] = skin.map(|c| c * nose);
        colors[Region::Mouth as usize] = [rng.gen_range(0.6..0.9), rng.gen_range(0.2..0.4), rng.gen_range(0.25..0.45)];
        Self {
            offsets,
            colors,
            eye_spacing,
            mouth_width,
        }
    }

    /// The deformed frontal shape in face units.
    pub fn shape(&self) -> LandmarkSet3D {
        let t = canonical_template();
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let (p, d) = (t.point(i), self.offsets[i]);
                [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
            })
            .collect();
        LandmarkSet3D::new(pts).expect("finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleParams {
    pub background: [f64; 3],
    /// Global gain in [0.6, 1.4].
    pub brightness: f64,
    /// Chroma gain around the per-pixel gray level.
    pub saturation: f64,
}

impl StyleParams {
    pub fn neutral() -> Self {
        Self {
            background: [0.5, 0.5, 0.5],
            brightness: 1.0,
            saturation: 1.0,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            background: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            brightness: rng.gen_range(0.6..1.4),
            saturation: rng.gen_range(0.6..1.4),
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        rgb.map(|c| (self.brightness * (gray + self.saturation * (c - gray))).clamp(0.0, 1.0))
    }
}

/// Head rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        let p = Self { yaw, pitch, roll };
        p.validate()?;
        Ok(p)
    }

    pub fn from_degrees(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        Self::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64, lim: f64| v.is_finite() && v.abs() <= lim + 1e-12;
        if ok(self.yaw, YAW_LIMIT) && ok(self.pitch, PITCH_LIMIT) && ok(self.roll, ROLL_LIMIT) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "pose out of range: yaw {:.1}°, pitch {:.1}°, roll {:.1}°",
                self.yaw.to_degrees(),
                self.pitch.to_degrees(),
                self.roll.to_degrees()
            )))
        }
    }

    /// `R = R_roll · R_pitch · R_yaw` acting on column vectors.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&rx, &ry))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn rotate(points: &LandmarkSet3D, r: &[[f64; 3]; 3]) -> LandmarkSet3D {
    points
        .map_points(|p| {
            let mut q = [0.0; 3];
            for (i, qi) in q.iter_mut().enumerate() {
                *qi = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
            }
            q
        })
        .expect("rotation keeps points finite")
}

pub fn transpose3(r: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = r[j][i];
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet3D,
    pub seg: SegmentationMap,
    pub pose: Pose,
    pub identity_id: u64,
    pub style_id: u64,
}

/// Renders one face. Landmarks are in pixel units with depth scaled like
/// x and y; the segmentation is the landmark-polygon rasterization itself.
pub fn render_face(id: &IdentityParams, style: &StyleParams, pose: Pose, h: usize, w: usize) -> Result<Sample> {
    pose.validate()?;
    let scale = FACE_SCALE * h.min(w) as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let rotated = rotate(&id.shape(), &pose.rotation());
    let landmarks = rotated.map_points(|p| [cx + scale * p[0], cy + scale * p[1], scale * p[2]])?;
    let (mx, my) = (CANVAS_MARGIN * w as f64, CANVAS_MARGIN * h as f64);
    if let Some(p) = landmarks
        .points()
        .iter()
        .find(|p| p[0] < mx || p[0] > w as f64 - mx || p[1] < my || p[1] > h as f64 - my)
    {
        return Err(Error::DegenerateGeometry(format!(
            "landmark ({:.2}, {:.2}) leaves the padded {w}x{h} canvas",
            p[0], p[1]
        )));
    }
    let seg = rasterize_segmentation(&landmarks.to_2d(), h, w)?;
    let yaw_shade = 0.25 * pose.yaw.sin();
    let mut image = Image::new(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let label = seg.labels()[y * w + x] as usize;
            let rgb = if label == Region::Background as usize {
                style.background
            } else {
                let u = ((x as f64 + 0.5 - cx) / (0.42 * scale)).clamp(-1.0, 1.0);
                let v = ((y as f64 + 0.5 - cy) / (0.45 * scale)).clamp(-1.0, 1.0);
                let shade = 1.0 + yaw_shade * u - 0.08 * v;
                id.colors[label].map(|c| c * shade)
            };
            let out = style.apply(rgb);
            for (c, v) in out.iter().enumerate() {
                image.set(c, y, x, *v);
            }
        }
    }
    Ok(Sample {
        image,
        landmarks,
        seg,
        pose,
        identity_id: 0,
        style_id: 0,
    })
}

/// Two renders of one identity and style at two poses.
#[allow(clippy::too_many_arguments)]
pub fn make_pair(
    id: &IdentityParams,
    style: &StyleParams,
    pose_a: Pose,
    pose_b: Pose,
    h: usize,
    w: usize,
    identity_id: u64,
    style_id: u64,
) -> Result<(Sample, Sample)> {
    let tag = |mut s: Sample| {
        s.identity_id = identity_id;
        s.style_id = style_id;
        s
    };
    Ok((
        tag(render_face(id, style, pose_a, h, w)?),
        tag(render_face(id, style, pose_b, h, w)?),
    ))
}

/// Axis-aligned occluding rectangle: `(x0, y0, width, height)`.
pub type Rect = (usize, usize, usize, usize);

/// Covers one random rectangle whose area fraction lies in
/// `[min_frac, max_frac]` with a random constant color.
pub fn occlude(img: &Image, rng: &mut impl Rng, min_frac: f64, max_frac: f64) -> Result<(Image, Rect)> {
    let (c, h, w) = img.shape();
    let area = (h * w) as f64;
    if !(0.0 < min_frac && min_frac <= max_frac && max_frac <= 1.0) {
        return Err(Error::InvalidInput(format!("bad occlusion fractions [{min_frac}, {max_frac}]")));
    }
    // every admissible integer rectangle; sample one by target area
    let target = rng.gen_range(min_frac..=max_frac) * area;
    let mut best: Option<(f64, usize, usize)> = None;
    let aspect = rng.gen_range(0.5f64..2.0).sqrt();
    for rh in 1..=h {
        for rw in 1..=w {
            let frac = (rh * rw) as f64 / area;
            if frac < min_frac || frac > max_frac {
                continue;
            }
            let cost = ((rh * rw) as f64 - target).abs() + 0.5 * ((rw as f64 / rh as f64).ln() - 2.0 * aspect.ln()).abs();
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, rh, rw));
            }
        }
    }
    let (_, rh, rw) = best.ok_or_else(|| {
        Error::InvalidInput(format!("no rectangle on a {w}x{h} canvas covers [{min_frac}, {max_frac}]"))
    })?;
    let x0 = rng.gen_range(0..=w - rw);
    let y0 = rng.gen_range(0..=h - rh);
    let color: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = img.clone();
    for (ch, col) in color.iter().enumerate() {
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                out.set(ch, y, x, *col);
            }
        }
    }
    Ok((out, (x0, y0, rw, rh)))
}

/// SplitMix64 finalizer; used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub resolution: usize,
    /// Identities per split.
    pub n_ids: usize,
    pub n_styles: usize,
    /// Items per split.
    pub n_pairs: usize,
    pub max_yaw: f64,
    pub max_pitch: f64,
    pub max_roll: f64,
    pub occlusion_min: f64,
    pub occlusion_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 32,
            n_ids: 8,
            n_styles: 4,
            n_pairs: 64,
            max_yaw: 45f64.to_radians(),
            max_pitch: 15f64.to_radians(),
            max_roll: 10f64.to_radians(),
            occlusion_min: 0.1,
            occlusion_max: 0.3,
        }
    }
}

/// One training item: a paired source/target and an occluded unpaired face.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub source: Sample,
    pub target: Sample,
    pub unpaired: Sample,
    pub occluded: Image,
}

const SALT_SPLIT: u64 = 0x5157;
const SALT_ID: u64 = 0x1d;
const SALT_STYLE: u64 = 0x57;

/// Identity split by hashing: disjoint between train and test for a seed.
pub fn identity_split(seed: u64, id: u64) -> Split {
    if mix(seed ^ SALT_SPLIT, id) & 1 == 0 {
        Split::Train
    } else {
        Split::Test
    }
}

/// The first `n` identity ids that hash into `split`.
pub fn identity_ids(seed: u64, split: Split, n: usize) -> Vec<u64> {
    (0u64..).filter(|&id| identity_split(seed, id) == split).take(n).collect()
}

pub fn identity_params(seed: u64, id: u64) -> IdentityParams {
    IdentityParams::random(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ SALT_ID, id)))
}

pub fn style_params(seed: u64, style: u64) -> StyleParams {
    StyleParams::random(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ SALT_STYLE, style)))
}

impl DatasetConfig {
    fn random_pose(&self, rng: &mut impl Rng) -> Pose {
        let sym = |rng: &mut dyn rand::RngCore, lim: f64| if lim > 0.0 { rng.gen_range(-lim..=lim) } else { 0.0 };
        Pose {
            yaw: sym(rng, self.max_yaw.min(YAW_LIMIT)),
            pitch: sym(rng, self.max_pitch.min(PITCH_LIMIT)),
            roll: sym(rng, self.max_roll.min(ROLL_LIMIT)),
        }
    }

    fn render_random(&self, rng: &mut impl Rng, ids: &[u64], pose_count: usize) -> Result<Vec<Sample>> {
        let id = ids[rng.gen_range(0..ids.len())];
        let style = rng.gen_range(0..self.n_styles.max(1) as u64);
        let (ip, sp) = (identity_params(self.seed, id), style_params(self.seed, style));
        let r = self.resolution;
        let mut out = Vec::with_capacity(pose_count);
        for _ in 0..pose_count {
            // retry poses that leave the canvas; the template never does at
            // the default scale, so this is a safeguard
            let mut attempt = 0;
            let sample = loop {
                match render_face(&ip, &sp, self.random_pose(rng), r, r) {
                    Ok(s) => break s,
                    Err(e) if attempt >= 16 => return Err(e),
                    Err(_) => attempt += 1,
                }
            };
            out.push(Sample {
                identity_id: id,
                style_id: style,
                ..sample
            });
        }
        Ok(out)
    }

    /// Item `index` of `split`; a pure function of the configuration.
    pub fn item(&self, split: Split, index: usize) -> Result<TrainItem> {
        if self.n_ids == 0 {
            return Err(Error::InvalidInput("dataset needs at least one identity".into()));
        }
        let salt = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, salt), index as u64));
        let ids = identity_ids(self.seed, split, self.n_ids);
        let mut pair = self.render_random(&mut rng, &ids, 2)?;
        let unpaired = self.render_random(&mut rng, &ids, 1)?.remove(0);
        let (occluded, _) = occlude(&unpaired.image, &mut rng, self.occlusion_min, self.occlusion_max)?;
        let target = pair.remove(1);
        let source = pair.remove(0);
        Ok(TrainItem {
            source,
            target,
            unpaired,
            occluded,
        })
    }

    pub fn items(&self, split: Split) -> impl Iterator<Item = Result<TrainItem>> + '_ {
        (0..self.n_pairs).map(move |i| self.item(split, i))
    }
}
