//! Alignment preprocessing, training records and the on-disk dataset layout.
//!
//! A dataset directory holds `train/` and `test/`; record `k` of a split is
//! stored as `{k:05}_{role}.{png,ldmk,seg}` for the roles `src`, `tgt`,
//! `unp` and `occ` (the occluded image has no landmark file of its own).

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{
    apply_similarity, exposed_side, fit_similarity, rasterize_segmentation, warp_image, LandmarkGroup, LandmarkSet3D,
    Point2, SegmentationMap, Similarity2D,
};
use crate::image::Image;
use crate::synthdata::{DatasetConfig, Split, TrainItem};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOutput {
    pub i_tf: Image,
    pub ldmk2d_tf: Vec<Point2>,
    pub i_seg_tf: SegmentationMap,
    pub transform: Similarity2D,
}

/// Landmark indices used for the similarity fit on `ldmk_j`'s exposed side.
pub fn fit_indices(ldmk_j: &LandmarkSet3D, groups: &[LandmarkGroup]) -> Vec<usize> {
    let side = exposed_side(ldmk_j);
    let mut idx: Vec<usize> = groups.iter().flat_map(|g| g.indices(side)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Aligns `i` to the target pose: similarity fit of the target's exposed
/// side, warp, and segmentation of the transformed landmarks.
pub fn preprocess(
    i: &Image,
    ldmk_i: &LandmarkSet3D,
    ldmk_j: &LandmarkSet3D,
    groups: &[LandmarkGroup],
    fill: f64,
) -> Result<PreprocessOutput> {
    let idx = fit_indices(ldmk_j, groups);
    let transform = fit_similarity(&ldmk_i.subset_2d(&idx), &ldmk_j.subset_2d(&idx))?;
    let (h, w) = (i.height(), i.width());
    let i_tf = warp_image(i, &transform, h, w, fill)?;
    let ldmk2d_tf = apply_similarity(&ldmk_i.to_2d(), &transform);
    let i_seg_tf = rasterize_segmentation(&ldmk2d_tf, h, w)?;
    Ok(PreprocessOutput {
        i_tf,
        ldmk2d_tf,
        i_seg_tf,
        transform,
    })
}

/// One stored training example. Images are 8-bit quantized so that records
/// built in memory and records read back from disk are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub source: Image,
    pub source_ldmk: LandmarkSet3D,
    pub source_seg: SegmentationMap,
    pub target: Image,
    pub target_ldmk: LandmarkSet3D,
    pub target_seg: SegmentationMap,
    pub unpaired: Image,
    pub unpaired_ldmk: LandmarkSet3D,
    pub unpaired_seg: SegmentationMap,
    pub occluded: Image,
}

fn quantize(img: &Image) -> Result<Image> {
    Image::from_rgb8(img.height(), img.width(), &img.to_rgb8()?)
}

impl PairRecord {
    pub fn from_item(item: TrainItem) -> Result<Self> {
        Ok(Self {
            source: quantize(&item.source.image)?,
            source_ldmk: item.source.landmarks,
            source_seg: item.source.seg,
            target: quantize(&item.target.image)?,
            target_ldmk: item.target.landmarks,
            target_seg: item.target.seg,
            unpaired: quantize(&item.unpaired.image)?,
            unpaired_ldmk: item.unpaired.landmarks,
            unpaired_seg: item.unpaired.seg,
            occluded: quantize(&item.occluded)?,
        })
    }

    pub fn save(&self, dir: &Path, index: usize) -> Result<()> {
        let stem = |role: &str, ext: &str| dir.join(format!("{index:05}_{role}.{ext}"));
        for (role, img, ldmk, seg) in [
            ("src", &self.source, &self.source_ldmk, &self.source_seg),
            ("tgt", &self.target, &self.target_ldmk, &self.target_seg),
            ("unp", &self.unpaired, &self.unpaired_ldmk, &self.unpaired_seg),
        ] {
            img.save_png(&stem(role, "png"))?;
            ldmk.save(&stem(role, "ldmk"))?;
            seg.save(&stem(role, "seg"))?;
        }
        self.occluded.save_png(&stem("occ", "png"))
    }

    pub fn load(dir: &Path, index: usize) -> Result<Self> {
        let stem = |role: &str, ext: &str| dir.join(format!("{index:05}_{role}.{ext}"));
        let png = |role: &str| Image::load_png(&stem(role, "png"));
        let ldmk = |role: &str| LandmarkSet3D::load(&stem(role, "ldmk"));
        let seg = |role: &str| SegmentationMap::load(&stem(role, "seg"));
        let rec = Self {
            source: png("src")?,
            source_ldmk: ldmk("src")?,
            source_seg: seg("src")?,
            target: png("tgt")?,
            target_ldmk: ldmk("tgt")?,
            target_seg: seg("tgt")?,
            unpaired: png("unp")?,
            unpaired_ldmk: ldmk("unp")?,
            unpaired_seg: seg("unp")?,
            occluded: png("occ")?,
        };
        let shape = rec.source.shape();
        let images = [&rec.target, &rec.unpaired, &rec.occluded];
        let segs = [&rec.source_seg, &rec.target_seg, &rec.unpaired_seg];
        if images.iter().any(|i| i.shape() != shape)
            || segs.iter().any(|s| (s.height(), s.width()) != (shape.1, shape.2))
        {
            return Err(Error::format(dir, format!("record {index}: inconsistent image sizes")));
        }
        Ok(rec)
    }
}

/// Worker count for data generation: `POSEFORGE_THREADS` if set, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("POSEFORGE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f(0..n)` on up to `workers` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("data worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// The first `n` records of `split`, generated in memory.
pub fn generate_records(cfg: &DatasetConfig, split: Split, n: usize) -> Result<Vec<PairRecord>> {
    parallel_map(n, worker_count(), |k| PairRecord::from_item(cfg.item(split, k)?))
}

/// Writes `n_train` and `n_test` records under `dir/train` and `dir/test`.
pub fn write_dataset(cfg: &DatasetConfig, dir: &Path, n_train: usize, n_test: usize) -> Result<()> {
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        parallel_map(n, worker_count(), |k| PairRecord::from_item(cfg.item(split, k)?)?.save(&sub, k))?;
    }
    Ok(())
}

/// Reads every consecutively numbered record of `dir/<split>`.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<PairRecord>> {
    let sub = dir.join(split.name());
    if !sub.is_dir() {
        return Err(Error::format(&sub, "missing dataset split directory"));
    }
    let mut n = 0;
    while sub.join(format!("{n:05}_src.png")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::format(&sub, "no records found"));
    }
    parallel_map(n, worker_count(), |k| PairRecord::load(&sub, k))
}
