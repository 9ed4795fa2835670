//! Sampler and inpainting updates, the joint schedule, evaluation and
//! end-to-end editing.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::data::{generate_records, preprocess, PairRecord};
use super::model::TrainState;
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet3D;
use crate::image::Image;
use crate::losses::{
    dice_batch, disc_hinge_loss, gen_adv_loss, generator_total, identity_batch, l1_batch, perceptual_batch,
    sampler_total, tv_batch, GeneratorComponents, LossReport, SamplerComponents,
};
use crate::nn::extractors::IdentityEmbedder;
use crate::nn::pas::{pose_condition, PasCache};
use crate::nn::{adam_step, Matrix, Tensor4};
use crate::sampling::{grid_sample, grid_sample_backward, SamplingMap};
use crate::synthdata::{mix, Split};

const SALT_BATCH: u64 = 0xba7c;
const EVAL_CHUNK: usize = 8;

/// A record with its alignment, conditions and identity features computed
/// once up front.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub i: Image,
    pub j: Image,
    pub i_tf: Image,
    /// One-hot segmentation of the transformed source landmarks.
    pub i_seg_tf: Image,
    pub j_seg: Image,
    pub cond_i: Vec<f64>,
    pub cond_j: Vec<f64>,
    /// Identity features of the source image.
    pub id_i: Vec<f64>,
    pub s: Image,
    pub s_occ: Image,
    pub cond_s: Vec<f64>,
    /// Identity features of the occluded unpaired image.
    pub id_s: Vec<f64>,
}

fn check_resolution(state: &TrainState, img: &Image) -> Result<()> {
    let r = state.cfg.resolution;
    if img.shape() != (3, r, r) {
        return Err(Error::InvalidInput(format!(
            "expected a 3x{r}x{r} image, got {:?}",
            img.shape()
        )));
    }
    Ok(())
}

fn embed_all(state: &TrainState, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let (m, _) = state.identity.embed(&Tensor4::from_images(chunk)?)?;
        out.extend((0..m.rows).map(|r| m.row(r).to_vec()));
    }
    Ok(out)
}

pub fn prepare(state: &TrainState, records: &[PairRecord]) -> Result<Vec<Prepared>> {
    let cfg = &state.cfg;
    let r = cfg.resolution;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        check_resolution(state, &rec.source)?;
        let pre = preprocess(&rec.source, &rec.source_ldmk, &rec.target_ldmk, &cfg.fit_groups, cfg.warp_fill)?;
        out.push(Prepared {
            i: rec.source.clone(),
            j: rec.target.clone(),
            i_tf: pre.i_tf,
            i_seg_tf: pre.i_seg_tf.to_one_hot(),
            j_seg: rec.target_seg.to_one_hot(),
            cond_i: pose_condition(&rec.source_ldmk, r, r),
            cond_j: pose_condition(&rec.target_ldmk, r, r),
            id_i: Vec::new(),
            s: rec.unpaired.clone(),
            s_occ: rec.occluded.clone(),
            cond_s: pose_condition(&rec.unpaired_ldmk, r, r),
            id_s: Vec::new(),
        });
    }
    let ids_i = embed_all(state, &out.iter().map(|p| &p.i).collect::<Vec<_>>())?;
    let ids_s = embed_all(state, &out.iter().map(|p| &p.s_occ).collect::<Vec<_>>())?;
    for ((p, a), b) in out.iter_mut().zip(ids_i).zip(ids_s) {
        p.id_i = a;
        p.id_s = b;
    }
    Ok(out)
}

fn rows(rows: &[&[f64]]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, |r| r.len());
    Matrix::from_vec(rows.len(), cols, rows.concat())
}

fn stack(images: impl IntoIterator<Item = Image>) -> Result<Tensor4> {
    let v: Vec<Image> = images.into_iter().collect();
    Tensor4::from_images(&v.iter().collect::<Vec<_>>())
}

fn non_finite(what: &str, step: u64) -> Error {
    Error::NonFinite(format!("{what} at step {step}"))
}

/// Forward pass of both sampler branches.
pub struct PasPass {
    cache: PasCache,
    maps: Vec<SamplingMap>,
    sources: Vec<Image>,
    pub j_fake: Tensor4,
    pub j_seg_fake: Tensor4,
    pub i_recon: Tensor4,
}

/// Branch A samples the aligned image with its segmentation toward the
/// target landmarks; branch B resamples the untouched source toward its own.
pub fn pas_forward(state: &TrainState, batch: &[&Prepared]) -> Result<PasPass> {
    let b = batch.len();
    let x = Tensor4::from_images(
        &batch.iter().map(|p| &p.i_tf).chain(batch.iter().map(|p| &p.i)).collect::<Vec<_>>(),
    )?;
    let cond = rows(
        &batch
            .iter()
            .map(|p| p.cond_j.as_slice())
            .chain(batch.iter().map(|p| p.cond_i.as_slice()))
            .collect::<Vec<_>>(),
    )?;
    let (out, cache) = state.pas.forward(&state.pas_net.store, &x, &cond)?;
    let maps = state.pas.maps(&out);
    let mut sources = Vec::with_capacity(2 * b);
    for p in batch {
        sources.push(p.i_tf.concat_channels(&p.i_seg_tf)?);
    }
    for p in batch {
        sources.push(p.i.clone());
    }
    let sampled: Vec<Image> = sources
        .iter()
        .zip(&maps)
        .map(|(s, m)| grid_sample(s, m))
        .collect::<Result<_>>()?;
    let j_fake = stack(sampled[..b].iter().map(|s| s.channel_range(0, 3)))?;
    let j_seg_fake = stack(sampled[..b].iter().map(|s| s.channel_range(3, s.channels() - 3)))?;
    let i_recon = stack(sampled[b..].iter().cloned())?;
    Ok(PasPass {
        cache,
        maps,
        sources,
        j_fake,
        j_seg_fake,
        i_recon,
    })
}

/// Sampler loss gradients w.r.t. the sampled outputs.
pub struct PasGrads {
    pub j_fake: Tensor4,
    pub j_seg_fake: Tensor4,
    pub i_recon: Tensor4,
}

pub fn pas_losses(state: &TrainState, pass: &PasPass, batch: &[&Prepared]) -> Result<(LossReport, PasGrads)> {
    let cfg = &state.cfg;
    let j = stack(batch.iter().map(|p| p.j.clone()))?;
    let i = stack(batch.iter().map(|p| p.i.clone()))?;
    let j_seg = stack(batch.iter().map(|p| p.j_seg.clone()))?;
    let (l1_a, mut g_jf) = l1_batch(&pass.j_fake, &j)?;
    let (l1_b, g_ir) = l1_batch(&pass.i_recon, &i)?;
    let mut g_ir = g_ir.map(|g| g * cfg.recon_weight_pas);
    let (seg, g_seg) = dice_batch(&pass.j_seg_fake, &j_seg)?;
    let (per, g_per) = perceptual_batch(&pass.j_fake, &j, &state.perceptual, cfg.perceptual_normalized)?;
    g_jf.add_assign(&g_per);
    let (tv_a, g_tva) = tv_batch(&pass.j_fake, cfg.tv_normalized);
    let (tv_b, g_tvb) = tv_batch(&pass.i_recon, cfg.tv_normalized);
    g_jf.add_assign(&g_tva);
    g_ir.add_assign(&g_tvb);
    let report = sampler_total(&SamplerComponents {
        pix: l1_a + cfg.recon_weight_pas * l1_b,
        seg,
        per,
        tv: tv_a + tv_b,
    });
    if !report.is_finite() {
        return Err(non_finite("sampler loss", state.step));
    }
    Ok((
        report,
        PasGrads {
            j_fake: g_jf,
            j_seg_fake: g_seg,
            i_recon: g_ir,
        },
    ))
}

/// Backpropagates output gradients through the sampling into the sampler
/// and takes one Adam step.
pub fn pas_apply(state: &mut TrainState, pass: &PasPass, grads: &PasGrads) -> Result<()> {
    let b = pass.j_fake.n;
    let r = state.cfg.resolution;
    let mut dmaps = Tensor4::zeros(2 * b, 2, r, r);
    for k in 0..2 * b {
        let g = if k < b {
            grads.j_fake.image(k).concat_channels(&grads.j_seg_fake.image(k))?
        } else {
            grads.i_recon.image(k - b)
        };
        let (_, gm) = grid_sample_backward(&g, &pass.sources[k], &pass.maps[k])?;
        dmaps.sample_mut(k).copy_from_slice(gm.data());
    }
    let net = &mut state.pas_net;
    net.store.zero_grad();
    state.pas.backward(&mut net.store, &pass.cache, &dmaps);
    if !net.store.grads_finite() {
        return Err(non_finite("sampler gradient", state.step));
    }
    adam_step(&mut net.store, &state.cfg.adam(), &mut net.adam);
    Ok(())
}

/// One sampler update on `batch` (both branches, loss, backward, Adam).
pub fn pas_step(state: &mut TrainState, batch: &[&Prepared]) -> Result<LossReport> {
    let pass = pas_forward(state, batch)?;
    let (report, grads) = pas_losses(state, &pass, batch)?;
    pas_apply(state, &pass, &grads)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        })
    }
}

pub struct InpaintReport {
    pub gen: LossReport,
    pub disc: LossReport,
    /// Generator loss gradient w.r.t. its input batch.
    pub input_grad: Tensor4,
}

fn hinge_report(real: &[f64], fake: &[f64]) -> (LossReport, Vec<f64>, Vec<f64>) {
    let (_, gr, gf) = disc_hinge_loss(real, fake);
    let mean = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len().max(1) as f64;
    let report = LossReport::new(vec![
        ("real".into(), mean(real, |r| (1.0 - r).max(0.0))),
        ("fake".into(), mean(fake, |f| (1.0 + f).max(0.0))),
    ]);
    (report, gr, gf)
}

/// One discriminator update followed by one generator update.
///
/// `Pretrain` trains on occluded unpaired faces only. `Joint` stacks the
/// pose branch, the reconstruction branch and the unpaired branch;
/// `sampled` supplies the sampler outputs `(Ĵ_fake, Î_recon)`, and when it
/// is `None` the aligned source and the source itself are used instead
/// (sampler bypassed).
pub fn inpaint_step(
    state: &mut TrainState,
    batch: &[&Prepared],
    phase: Phase,
    sampled: Option<(&Tensor4, &Tensor4)>,
) -> Result<InpaintReport> {
    let cfg = state.cfg.clone();
    let b = batch.len();
    let s_occ = stack(batch.iter().map(|p| p.s_occ.clone()))?;
    let s = stack(batch.iter().map(|p| p.s.clone()))?;
    let s_pose: Vec<&[f64]> = batch.iter().map(|p| p.cond_s.as_slice()).collect();
    let s_full: Vec<Vec<f64>> = batch.iter().map(|p| [p.cond_s.as_slice(), &p.id_s].concat()).collect();
    let (x, target, gen_cond, disc_cond) = match phase {
        Phase::Pretrain => (
            s_occ,
            s.clone(),
            rows(&s_full.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?,
            rows(&s_pose)?,
        ),
        Phase::Joint => {
            let (jf, ir) = match sampled {
                Some((a, c)) => (a.clone(), c.clone()),
                None => (
                    stack(batch.iter().map(|p| p.i_tf.clone()))?,
                    stack(batch.iter().map(|p| p.i.clone()))?,
                ),
            };
            let j = stack(batch.iter().map(|p| p.j.clone()))?;
            let i = stack(batch.iter().map(|p| p.i.clone()))?;
            let full: Vec<Vec<f64>> = batch
                .iter()
                .map(|p| [p.cond_j.as_slice(), &p.id_i].concat())
                .chain(batch.iter().map(|p| [p.cond_i.as_slice(), &p.id_i].concat()))
                .chain(s_full)
                .collect();
            let pose: Vec<&[f64]> = batch
                .iter()
                .map(|p| p.cond_j.as_slice())
                .chain(batch.iter().map(|p| p.cond_i.as_slice()))
                .chain(s_pose)
                .collect();
            (
                Tensor4::concat_n(&[&jf, &ir, &s_occ]),
                Tensor4::concat_n(&[&j, &i, &s]),
                rows(&full.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?,
                rows(&pose)?,
            )
        }
    };

    let (y, gen_cache) = state.unet.forward(&state.gen_net.store, &x, &gen_cond)?;

    // discriminator half-step
    let dnet = &mut state.disc_net;
    state.disc.refresh_spectral(&mut dnet.store);
    for _ in 1..cfg.disc_power_iters {
        state.disc.refresh_spectral(&mut dnet.store);
    }
    let (real, real_cache) = state.disc.forward(&dnet.store, &target, &disc_cond)?;
    let (fake, fake_cache) = state.disc.forward(&dnet.store, &y, &disc_cond)?;
    let (disc_report, g_real, g_fake) = hinge_report(&real, &fake);
    if !disc_report.is_finite() {
        return Err(non_finite("discriminator loss", state.step));
    }
    dnet.store.zero_grad();
    state.disc.backward(&mut dnet.store, &real_cache, &g_real);
    state.disc.backward(&mut dnet.store, &fake_cache, &g_fake);
    if !dnet.store.grads_finite() {
        return Err(non_finite("discriminator gradient", state.step));
    }
    adam_step(&mut dnet.store, &cfg.adam(), &mut dnet.adam);

    // generator half-step against the updated discriminator
    let mut dy = y.zeros_like();
    let mut comp = GeneratorComponents::default();
    let slice_grad = |dy: &mut Tensor4, start: usize, g: &Tensor4| {
        let l = g.sample_len();
        for (d, v) in dy.data[start * l..(start + g.n) * l].iter_mut().zip(&g.data) {
            *d += v;
        }
    };
    let s_off = match phase {
        Phase::Pretrain => 0,
        Phase::Joint => 2 * b,
    };
    {
        let s_rec = y.slice_n(s_off, b);
        let (l1, g) = l1_batch(&s_rec, &s)?;
        comp.pix += l1;
        slice_grad(&mut dy, s_off, &g);
        let (per, g) = perceptual_batch(&s_rec, &s, &state.perceptual, cfg.perceptual_normalized)?;
        comp.per += per;
        slice_grad(&mut dy, s_off, &g);
        let (tv, g) = tv_batch(&s_rec, cfg.tv_normalized);
        comp.tv += tv;
        slice_grad(&mut dy, s_off, &g);
    }
    if phase == Phase::Joint {
        let j = target.slice_n(0, b);
        let i = target.slice_n(b, b);
        let j_out = y.slice_n(0, b);
        let i_out = y.slice_n(b, b);
        let (l1, g) = l1_batch(&j_out, &j)?;
        comp.pix += l1;
        slice_grad(&mut dy, 0, &g);
        let (l1, g) = l1_batch(&i_out, &i)?;
        comp.pix += cfg.lambda_inpaint * l1;
        slice_grad(&mut dy, b, &g.map(|v| v * cfg.lambda_inpaint));
        let (per, g) = perceptual_batch(&j_out, &j, &state.perceptual, cfg.perceptual_normalized)?;
        comp.per += per;
        slice_grad(&mut dy, 0, &g);
        let (id, g) = identity_batch(&j_out, &j, &state.identity)?;
        comp.id = id;
        slice_grad(&mut dy, 0, &g);
        for (start, out) in [(0, &j_out), (b, &i_out)] {
            let (tv, g) = tv_batch(out, cfg.tv_normalized);
            comp.tv += tv;
            slice_grad(&mut dy, start, &g);
        }
        let dnet = &mut state.disc_net;
        let (fake, cache) = state.disc.forward(&dnet.store, &y, &disc_cond)?;
        let (adv, g_adv) = gen_adv_loss(&fake);
        comp.adv = adv;
        dnet.store.set_requires_grad(false);
        let dx_adv = state.disc.backward(&mut dnet.store, &cache, &g_adv);
        dnet.store.set_requires_grad(true);
        dy.add_assign(&dx_adv);
    }
    let gen_report = generator_total(&comp);
    if !gen_report.is_finite() {
        return Err(non_finite("generator loss", state.step));
    }
    let gnet = &mut state.gen_net;
    gnet.store.zero_grad();
    let input_grad = state.unet.backward(&mut gnet.store, &gen_cache, &dy);
    if !gnet.store.grads_finite() {
        return Err(non_finite("generator gradient", state.step));
    }
    adam_step(&mut gnet.store, &cfg.adam(), &mut gnet.adam);
    Ok(InpaintReport {
        gen: gen_report,
        disc: disc_report,
        input_grad,
    })
}

/// Losses recorded for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub pas: Option<LossReport>,
    pub gen: LossReport,
    pub disc: LossReport,
}

impl StepLog {
    /// `step,phase,name=value,...`
    pub fn to_line(&self) -> String {
        let mut s = format!("{},{}", self.step, self.phase);
        if let Some(p) = &self.pas {
            s.push(',');
            s.push_str(&p.to_line("pas_"));
        }
        s.push(',');
        s.push_str(&self.gen.to_line("g_"));
        s.push(',');
        s.push_str(&self.disc.to_line("d_"));
        s
    }
}

/// Batch indices for `step`, drawn with replacement.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, SALT_BATCH), step));
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Runs the next scheduled step: pretraining of the inpainting GAN for the
/// first `pretrain_steps`, then joint sampler and inpainting updates.
pub fn train_step(state: &mut TrainState, data: &[Prepared]) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let step = state.step;
    let idx = batch_indices(state.cfg.seed, step, data.len(), state.cfg.batch_size);
    let batch: Vec<&Prepared> = idx.iter().map(|&k| &data[k]).collect();
    let phase = if step < state.cfg.pretrain_steps as u64 {
        Phase::Pretrain
    } else {
        Phase::Joint
    };
    let (pas, r) = if phase == Phase::Joint && state.cfg.use_pas {
        let pass = pas_forward(state, &batch)?;
        let (report, mut grads) = pas_losses(state, &pass, &batch)?;
        let r = inpaint_step(state, &batch, phase, Some((&pass.j_fake, &pass.i_recon)))?;
        if state.cfg.pas_grad_from_inpaint {
            let b = batch.len();
            grads.j_fake.add_assign(&r.input_grad.slice_n(0, b));
            grads.i_recon.add_assign(&r.input_grad.slice_n(b, b));
        }
        pas_apply(state, &pass, &grads)?;
        (Some(report), r)
    } else {
        (None, inpaint_step(state, &batch, phase, None)?)
    };
    state.step += 1;
    Ok(StepLog {
        step,
        phase,
        pas,
        gen: r.gen,
        disc: r.disc,
    })
}

/// Sampler output for the pose branch only (identity grid when the sampler
/// is disabled): `(Ĵ_fake, J_seg_fake)`.
pub fn sample_pose_branch(state: &TrainState, batch: &[&Prepared]) -> Result<(Tensor4, Tensor4)> {
    let i_tf = stack(batch.iter().map(|p| p.i_tf.clone()))?;
    let seg = stack(batch.iter().map(|p| p.i_seg_tf.clone()))?;
    if !state.cfg.use_pas {
        return Ok((i_tf, seg));
    }
    let cond = rows(&batch.iter().map(|p| p.cond_j.as_slice()).collect::<Vec<_>>())?;
    let (out, _) = state.pas.forward(&state.pas_net.store, &i_tf, &cond)?;
    let mut jf = Vec::with_capacity(batch.len());
    let mut js = Vec::with_capacity(batch.len());
    for (p, m) in batch.iter().zip(state.pas.maps(&out)) {
        jf.push(grid_sample(&p.i_tf, &m)?);
        js.push(grid_sample(&p.i_seg_tf, &m)?);
    }
    Ok((stack(jf)?, stack(js)?))
}

/// Generator output for the pose branch given sampler output `j_fake_in`.
pub fn inpaint_pose_branch(state: &TrainState, batch: &[&Prepared], j_fake_in: &Tensor4) -> Result<Tensor4> {
    let cond: Vec<Vec<f64>> = batch.iter().map(|p| [p.cond_j.as_slice(), &p.id_i].concat()).collect();
    let cond = rows(&cond.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;
    Ok(state.unet.forward(&state.gen_net.store, j_fake_in, &cond)?.0)
}

/// Held-out metrics, each averaged over pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    /// L1(J_fake, J): full edit against the target.
    pub l1_edit: f64,
    /// L1(Ĵ_fake, J): sampler output against the target.
    pub l1_sampled: f64,
    /// L1(I_tf, J): alignment alone.
    pub l1_aligned: f64,
    /// Dice loss of J_seg_fake against J_seg.
    pub dice_sampled: f64,
    /// Dice loss of the identity-grid sample (I_seg_tf) against J_seg.
    pub dice_identity: f64,
}

impl EvalMetrics {
    /// Relative Dice loss reduction over the identity grid.
    pub fn dice_improvement(&self) -> f64 {
        1.0 - self.dice_sampled / self.dice_identity
    }

    pub fn to_line(&self) -> String {
        format!(
            "n={},l1_edit={:.6e},l1_sampled={:.6e},l1_aligned={:.6e},dice_sampled={:.6e},dice_identity={:.6e},dice_improvement={:.6e}",
            self.n,
            self.l1_edit,
            self.l1_sampled,
            self.l1_aligned,
            self.dice_sampled,
            self.dice_identity,
            self.dice_improvement()
        )
    }
}

pub fn evaluate(state: &TrainState, data: &[Prepared]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no evaluation records".into()));
    }
    let mut sums = [0.0; 5];
    for chunk in data.chunks(EVAL_CHUNK) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let w = batch.len() as f64;
        let j = stack(batch.iter().map(|p| p.j.clone()))?;
        let j_seg = stack(batch.iter().map(|p| p.j_seg.clone()))?;
        let i_tf = stack(batch.iter().map(|p| p.i_tf.clone()))?;
        let seg_tf = stack(batch.iter().map(|p| p.i_seg_tf.clone()))?;
        let (jf_in, js) = sample_pose_branch(state, &batch)?;
        let j_fake = inpaint_pose_branch(state, &batch, &jf_in)?;
        sums[0] += w * l1_batch(&j_fake, &j)?.0;
        sums[1] += w * l1_batch(&jf_in, &j)?.0;
        sums[2] += w * l1_batch(&i_tf, &j)?.0;
        sums[3] += w * dice_batch(&js, &j_seg)?.0;
        sums[4] += w * dice_batch(&seg_tf, &j_seg)?.0;
    }
    let n = data.len() as f64;
    let m = EvalMetrics {
        n: data.len(),
        l1_edit: sums[0] / n,
        l1_sampled: sums[1] / n,
        l1_aligned: sums[2] / n,
        dice_sampled: sums[3] / n,
        dice_identity: sums[4] / n,
    };
    if !sums.iter().all(|v| v.is_finite()) {
        return Err(non_finite("evaluation metric", state.step));
    }
    Ok(m)
}

/// Full inference: alignment, sampling, inpainting.
pub fn edit(state: &TrainState, i: &Image, ldmk_i: &LandmarkSet3D, ldmk_j: &LandmarkSet3D) -> Result<Image> {
    check_resolution(state, i)?;
    let cfg = &state.cfg;
    let r = cfg.resolution;
    let pre = preprocess(i, ldmk_i, ldmk_j, &cfg.fit_groups, cfg.warp_fill)?;
    let id = embed_all(state, &[i])?.remove(0);
    let p = Prepared {
        i: i.clone(),
        j: Image::new(3, r, r),
        i_tf: pre.i_tf,
        i_seg_tf: pre.i_seg_tf.to_one_hot(),
        j_seg: Image::new(8, r, r),
        cond_i: pose_condition(ldmk_i, r, r),
        cond_j: pose_condition(ldmk_j, r, r),
        id_i: id,
        s: Image::new(3, r, r),
        s_occ: Image::new(3, r, r),
        cond_s: Vec::new(),
        id_s: Vec::new(),
    };
    let (jf, _) = sample_pose_branch(state, &[&p])?;
    let out = inpaint_pose_branch(state, &[&p], &jf)?;
    let img = out.image(0);
    if !img.data().iter().all(|v| v.is_finite()) {
        return Err(non_finite("edited image", state.step));
    }
    Ok(img)
}

/// Runs scheduled steps until `state.step == total`, handing each log to
/// `on_step`.
pub fn run_schedule(
    state: &mut TrainState,
    data: &[Prepared],
    total: u64,
    mut on_step: impl FnMut(&TrainState, &StepLog) -> Result<()>,
) -> Result<()> {
    while state.step < total {
        let log = train_step(state, data)?;
        on_step(state, &log)?;
    }
    Ok(())
}

/// Outcome of a full in-memory training run.
pub struct RunOutcome {
    pub state: TrainState,
    pub log: Vec<String>,
    pub metrics: EvalMetrics,
}

/// Generates the dataset for `cfg`, trains for the configured schedule and
/// evaluates on the held-out split.
pub fn train_and_evaluate(cfg: &Config) -> Result<RunOutcome> {
    let ds = cfg.dataset();
    let train = generate_records(&ds, Split::Train, cfg.n_pairs)?;
    let test = generate_records(&ds, Split::Test, cfg.n_test_pairs)?;
    let mut state = TrainState::new(cfg.clone())?;
    let train = prepare(&state, &train)?;
    let test = prepare(&state, &test)?;
    let mut log = Vec::with_capacity(cfg.total_steps());
    run_schedule(&mut state, &train, cfg.total_steps() as u64, |_, l| {
        log.push(l.to_line());
        Ok(())
    })?;
    let metrics = evaluate(&state, &test)?;
    Ok(RunOutcome { state, log, metrics })
}
