//! Training loop: mesh pretraining, joint Gaussian/mesh optimization with
//! standard densification, then the mask-loss phase with optional
//! additional densification and per-iteration behind-mesh culling.
//!
//! All randomness (view order, split sampling) is derived from the seed and
//! the iteration number, so a run restored from a checkpoint continues
//! exactly like an uninterrupted one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::compositor::{composite, composite_backward, cull_behind_mesh};
use crate::config::{TrainConfig, TrainSchedule};
use crate::dataset::{Dataset, Split, View};
use crate::error::{Error, Result};
use crate::gaussian::{AdamMoments, Gaussian3D, GaussianSet};
use crate::gaussian_raster::{backward, render, DepthClip, GaussianBackward, RenderBundle};
use crate::image_buf::ImageBuffer;
use crate::linalg::{quat_normalize, Vec3};
use crate::losses::{color_loss, mask_loss, mask_opacity_backward, per_mask_opacity, total_loss, LossReport, Phase};
use crate::masks::{compute_weights, remove_overlapping, Mask};
use crate::mesh::{LayoutMesh, MIN_FACE_AREA};
use crate::mesh_raster::{mesh_backward, rasterize_mesh, MeshGrads, MeshRender};
use crate::metrics::{giou_liou, giou_liou_soft, psnr, ssim, DEFAULT_THETA};
use crate::scalar::{logit, Real};

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Adam moments of the layout mesh parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshMoments<T> {
    pub texture_m: Vec<T>,
    pub texture_v: Vec<T>,
    pub vertices_m: Vec<Vec3<T>>,
    pub vertices_v: Vec<Vec3<T>>,
}

impl<T: Real> MeshMoments<T> {
    pub fn zeros(mesh: &LayoutMesh<T>) -> Self {
        Self {
            texture_m: vec![T::zero(); mesh.texture.data.len()],
            texture_v: vec![T::zero(); mesh.texture.data.len()],
            vertices_m: vec![Vec3::zero(); mesh.vertices.len()],
            vertices_v: vec![Vec3::zero(); mesh.vertices.len()],
        }
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub gaussians: GaussianSet<T>,
    pub mesh: LayoutMesh<T>,
    pub mesh_moments: MeshMoments<T>,
    /// Completed joint iterations.
    pub iteration: usize,
    /// Completed pretraining iterations.
    pub pretrain_done: usize,
    pub gaussian_steps: u64,
    pub mesh_steps: u64,
    pub background: [T; 3],
}

impl<T: Real> TrainState<T> {
    /// Gaussians seeded from colored points: isotropic, scale from the mean
    /// squared distance to the three nearest neighbours.
    pub fn initialize(points: &[([f64; 3], [f64; 3])], mesh: LayoutMesh<T>, cfg: &TrainConfig, background: [f64; 3]) -> Self {
        let mut set = GaussianSet::new(cfg.sh_degree);
        for (i, (p, c)) in points.iter().enumerate() {
            let mut best = [f64::INFINITY; 3];
            for (j, (q, _)) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(f64::total_cmp);
                }
            }
            let finite: Vec<f64> = best.iter().copied().filter(|v| v.is_finite()).collect();
            let mean = if finite.is_empty() { 0.01 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
            let scale = mean.max(1e-7).sqrt();
            let g = Gaussian3D::isotropic(
                Vec3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])),
                T::lit(scale),
                c.map(T::lit),
                T::lit(cfg.init_opacity),
                cfg.sh_degree,
            );
            set.push(g);
        }
        let mesh_moments = MeshMoments::zeros(&mesh);
        Self {
            gaussians: set,
            mesh,
            mesh_moments,
            iteration: 0,
            pretrain_done: 0,
            gaussian_steps: 0,
            mesh_steps: 0,
            background: background.map(T::lit),
        }
    }
}

/// Why the Gaussian count changed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Densify,
    AdditionalDensify,
    OpacityReset,
    Cull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub iteration: usize,
    pub kind: EventKind,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub culled: usize,
    pub count_before: usize,
    pub count_after: usize,
    pub max_alpha_before: f64,
    pub max_alpha_after: f64,
    /// `(parent alpha, child alpha)` for each child created by an additional
    /// densification split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children_alpha: Vec<[f64; 2]>,
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub view: usize,
    pub loss: LossReport,
    pub num_gaussians: usize,
    pub max_alpha: f64,
}

/// Structured log record written every `log_every` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub l1: f64,
    pub dssim: f64,
    pub color: f64,
    pub mask: f64,
    pub total: f64,
    pub num_gaussians: usize,
    /// Histogram of this view's per-mask opacities over ten equal bins.
    pub opacity_histogram: [u32; 10],
    pub events: Vec<Event>,
}

/// Masks of one view after overlap removal, with their loss weights.
#[derive(Clone, Debug)]
struct PreparedMasks {
    masks: Vec<Mask>,
    weights: Vec<f64>,
}

/// Per-view evaluation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub giou: Option<f64>,
    pub liou: Option<f64>,
    pub giou_soft: Option<f64>,
    pub liou_soft: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub giou: Option<f64>,
    pub liou: Option<f64>,
    pub giou_soft: Option<f64>,
    pub liou_soft: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_gaussians: usize,
    pub theta: f64,
    pub views: Vec<ViewMetrics>,
    pub mean: MeanMetrics,
}

/// Renders of one camera in all three modes.
#[derive(Clone, Debug)]
pub struct RenderedModes<T> {
    pub gaussians: RenderBundle<T>,
    pub mesh: MeshRender<T>,
    /// Final composite.
    pub both: ImageBuffer<T>,
}

/// Mesh render with nothing covered, for Gaussians-only runs.
fn empty_mesh_render<T: Real>(w: usize, h: usize) -> MeshRender<T> {
    MeshRender {
        color: ImageBuffer::new(w, h, 3),
        depth: ImageBuffer::filled(w, h, 1, T::infinity()),
        coverage: ImageBuffer::new(w, h, 1),
        aux: Some(vec![None; w * h]),
    }
}

/// Renders a state from a camera: Gaussians over black, the mesh, and the
/// composite over `background`.
pub fn render_state<T: Real>(state: &TrainState<T>, camera: &Camera<T>, clip_eps: Option<T>) -> Result<RenderedModes<T>> {
    let mesh = if state.mesh.faces.is_empty() {
        empty_mesh_render(camera.width, camera.height)
    } else {
        rasterize_mesh(camera, &state.mesh)
    };
    let clip = clip_eps.map(|eps| DepthClip { depth: &mesh.depth, eps });
    let g = render(camera, &state.gaussians, [T::zero(); 3], clip.as_ref());
    let both = composite(&g, &mesh, state.background)?;
    Ok(RenderedModes { gaussians: g, mesh, both })
}

/// Stateless RNG stream for `(seed, purpose, index)`.
fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut s = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s = s.wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    s ^= s >> 31;
    ChaCha8Rng::seed_from_u64(s)
}

#[inline]
fn adam<T: Real>(p: &mut T, g: T, m: &mut T, v: &mut T, lr: T, bc1: T, bc2_sqrt: T) {
    let b1 = T::lit(ADAM_B1);
    let b2 = T::lit(ADAM_B2);
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    let denom = v.sqrt() / bc2_sqrt + T::lit(ADAM_EPS);
    *p -= lr / bc1 * *m / denom;
}

fn bias_corrections<T: Real>(step: u64) -> (T, T) {
    let t = step as i32;
    (T::lit(1.0 - ADAM_B1.powi(t)), T::lit((1.0 - ADAM_B2.powi(t)).sqrt()))
}

/// Per-group learning rates for one Gaussian step.
struct GaussianLr<T> {
    position: T,
    scaling: T,
    rotation: T,
    dc: T,
    rest: T,
    opacity: T,
}

fn adam_gaussian<T: Real>(g: &mut Gaussian3D<T>, grad: &Gaussian3D<T>, mom: &mut AdamMoments<T>, lr: &GaussianLr<T>, bc1: T, bc2: T) {
    for k in 0..3 {
        adam(&mut g.mu[k], grad.mu[k], &mut mom.m.mu[k], &mut mom.v.mu[k], lr.position, bc1, bc2);
        adam(&mut g.log_scale[k], grad.log_scale[k], &mut mom.m.log_scale[k], &mut mom.v.log_scale[k], lr.scaling, bc1, bc2);
    }
    for k in 0..4 {
        adam(&mut g.rot_quat[k], grad.rot_quat[k], &mut mom.m.rot_quat[k], &mut mom.v.rot_quat[k], lr.rotation, bc1, bc2);
    }
    g.rot_quat = quat_normalize(g.rot_quat);
    for k in 0..g.sh_color.len() {
        let rate = if k < 3 { lr.dc } else { lr.rest };
        adam(&mut g.sh_color[k], grad.sh_color[k], &mut mom.m.sh_color[k], &mut mom.v.sh_color[k], rate, bc1, bc2);
    }
    adam(&mut g.logit_opacity, grad.logit_opacity, &mut mom.m.logit_opacity, &mut mom.v.logit_opacity, lr.opacity, bc1, bc2);
}

/// Loss of one view and its gradients.
pub struct LossEval<T> {
    pub loss: LossReport,
    pub gaussians: GaussianBackward<T>,
    /// `None` when the state has no mesh.
    pub mesh: Option<MeshGrads<T>>,
    pub render: RenderedModes<T>,
}

/// Total loss of `state` against `gt` seen from `camera`: the color loss of
/// the composite, plus `lambda_mask` times the mask loss when `phase` is the
/// mask phase. Gradients flow through the composite to Gaussians and mesh,
/// and through the per-mask opacities to the Gaussian opacity map.
pub fn loss_and_grads<T: Real>(
    state: &TrainState<T>,
    camera: &Camera<T>,
    gt: &ImageBuffer<T>,
    masks: Option<(&[Mask], &[f64])>,
    schedule: &TrainSchedule,
    phase: Phase,
    clip: Option<T>,
) -> Result<LossEval<T>> {
    let r = render_state(state, camera, clip)?;
    let (cl, grad_img) = color_loss(&r.both, gt, T::lit(schedule.lambda_dssim))?;
    let mut cg = composite_backward(&r.gaussians, &r.mesh, state.background, &grad_img)?;
    let mut mask_value = 0.0;
    let mut o_values = Vec::new();
    if let Some((masks, weights)) = masks.filter(|(m, _)| !m.is_empty()) {
        let o = per_mask_opacity(&r.gaussians.opacity, masks)?;
        let (ml, go) = mask_loss(&o, weights)?;
        if phase == Phase::MaskLoss {
            mask_opacity_backward(masks, &go, T::lit(schedule.lambda_mask), &mut cg.opacity);
        }
        mask_value = ml.as_f64();
        o_values = o.iter().map(|v| v.as_f64()).collect();
    }
    let color = cl.value.as_f64();
    let total = total_loss(color, mask_value, schedule.lambda_mask, phase);
    let gaussians = backward(&r.gaussians, camera, &state.gaussians, &cg.gauss_color, &cg.opacity)?;
    let mesh = if state.mesh.faces.is_empty() {
        None
    } else {
        Some(mesh_backward(&r.mesh, camera, &state.mesh, &cg.mesh_color)?)
    };
    let loss = LossReport { l1: cl.l1.as_f64(), dssim: cl.dssim.as_f64(), color, mask: mask_value, total, per_mask_opacity: o_values };
    Ok(LossEval { loss, gaussians, mesh, render: r })
}

pub struct Trainer<'a, T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    data: &'a Dataset<T>,
    train_views: Vec<usize>,
    prepared: Vec<Option<PreparedMasks>>,
    extent: f64,
    pub trace: Vec<TraceRow>,
    pub events: Vec<Event>,
    pub records: Vec<LogRecord>,
    pending_events: Vec<Event>,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Fresh run: Gaussians from the dataset's points, layout mesh from the
    /// dataset with zero textures.
    pub fn new(config: TrainConfig, data: &'a Dataset<T>) -> Result<Self> {
        let pts: Vec<([f64; 3], [f64; 3])> = data.points.iter().map(|p| (p.position, p.color)).collect();
        if pts.is_empty() {
            return Err(Error::Dataset("no initialization points".into()));
        }
        let mut mesh = if config.use_mesh { data.layout.clone() } else { LayoutMesh::empty(1, 1) };
        mesh.texture.data.iter_mut().for_each(|v| *v = T::zero());
        let state = TrainState::initialize(&pts, mesh, &config, data.background);
        Self::from_state(config, data, state)
    }

    pub fn from_state(config: TrainConfig, data: &'a Dataset<T>, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        let train_views: Vec<usize> = (0..data.views.len()).filter(|&i| data.views[i].split == Split::Train).collect();
        if train_views.is_empty() {
            return Err(Error::Dataset("dataset has no training views".into()));
        }
        if state.gaussians.sh_degree != config.sh_degree {
            return Err(Error::Config(format!(
                "state has SH degree {} but config asks for {}",
                state.gaussians.sh_degree, config.sh_degree
            )));
        }
        let mut t = Self {
            config,
            state,
            data,
            train_views,
            prepared: Vec::new(),
            extent: data.extent(),
            trace: Vec::new(),
            events: Vec::new(),
            records: Vec::new(),
            pending_events: Vec::new(),
        };
        t.prepare_masks()?;
        Ok(t)
    }

    /// Switches to another configuration mid-run (used to branch ablation
    /// variants from a shared prefix). Mask preprocessing is redone.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        self.prepare_masks()
    }

    pub fn dataset(&self) -> &Dataset<T> {
        self.data
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    fn needs_masks(&self) -> bool {
        let c = &self.config;
        c.use_mesh && c.schedule.lambda_mask > 0.0 && c.schedule.mask_loss_from <= c.schedule.total_iters
    }

    fn prepare_masks(&mut self) -> Result<()> {
        let needs = self.needs_masks();
        let opts = self.config.masks.clone();
        let mut prepared = Vec::with_capacity(self.data.views.len());
        for v in &self.data.views {
            match &v.masks {
                Some(ms) => {
                    let mut ms = ms.clone();
                    ms.masks.retain(|m| m.area() >= opts.min_area.max(1));
                    if opts.remove_overlap {
                        ms = remove_overlapping(&ms, opts.overlap_tau);
                    }
                    let weights = if ms.is_empty() { Vec::new() } else { compute_weights(&ms, opts.weight_scheme) };
                    prepared.push(Some(PreparedMasks { masks: ms.masks, weights }));
                }
                None if needs && v.split == Split::Train => return Err(Error::MissingMasks(v.name.clone())),
                None => prepared.push(None),
            }
        }
        self.prepared = prepared;
        Ok(())
    }

    pub fn phase(&self, it: usize) -> Phase {
        if self.config.mask_loss_active(it) {
            Phase::MaskLoss
        } else {
            Phase::StandardDensification
        }
    }

    /// Training view used at joint iteration `it` (1-based): a fresh
    /// permutation of the training views per epoch.
    pub fn view_for(&self, it: usize) -> usize {
        let n = self.train_views.len();
        let epoch = (it - 1) / n;
        let mut order = self.train_views.clone();
        order.shuffle(&mut rng_for(self.config.seed, 1, epoch as u64));
        order[(it - 1) % n]
    }

    fn view(&self, i: usize) -> &View<T> {
        &self.data.views[i]
    }

    fn position_lr(&self, it: usize) -> T {
        let lr = &self.config.lr;
        let t = (it as f64 / self.config.schedule.total_iters.max(1) as f64).clamp(0.0, 1.0);
        let v = (lr.position_init.ln() * (1.0 - t) + lr.position_final.ln() * t).exp();
        T::lit(v * self.extent)
    }

    fn mesh_adam(&mut self, grads: &MeshGrads<T>, train_vertices: bool) {
        let st = &mut self.state;
        st.mesh_steps += 1;
        let (bc1, bc2) = bias_corrections::<T>(st.mesh_steps);
        let lr = &self.config.lr;
        let tl = st.mesh.texture.texel_len();
        let (dc, rest) = (T::lit(lr.mesh_sh_dc), T::lit(lr.mesh_sh_rest));
        let mm = &mut st.mesh_moments;
        for (i, p) in st.mesh.texture.data.iter_mut().enumerate() {
            let rate = if i % tl < 3 { dc } else { rest };
            adam(p, grads.texture[i], &mut mm.texture_m[i], &mut mm.texture_v[i], rate, bc1, bc2);
        }
        if train_vertices && lr.mesh_vertices > 0.0 {
            let before = st.mesh.vertices.clone();
            let vlr = T::lit(lr.mesh_vertices);
            for (j, p) in st.mesh.vertices.iter_mut().enumerate() {
                for k in 0..3 {
                    adam(&mut p[k], grads.vertices[j][k], &mut mm.vertices_m[j][k], &mut mm.vertices_v[j][k], vlr, bc1, bc2);
                }
            }
            // Faces must stay non-degenerate; a step that breaks this is undone.
            if (0..st.mesh.faces.len()).any(|f| st.mesh.face_area(f).as_f64() <= MIN_FACE_AREA) {
                st.mesh.vertices = before;
            }
        }
    }

    /// Mesh-only optimization of the remaining pretraining iterations.
    pub fn pretrain(&mut self) -> Result<()> {
        while self.state.pretrain_done < self.config.schedule.pretrain_iters {
            self.pretrain_step()?;
        }
        Ok(())
    }

    /// One batched pretraining step; returns the mean color loss.
    pub fn pretrain_step(&mut self) -> Result<f64> {
        if !self.config.use_mesh || self.state.mesh.faces.is_empty() {
            self.state.pretrain_done += 1;
            return Ok(0.0);
        }
        let k = self.state.pretrain_done;
        let batch = self.config.schedule.pretrain_batch;
        let mut order = self.train_views.clone();
        let mut rng = rng_for(self.config.seed, 2, k as u64);
        order.shuffle(&mut rng);
        let lambda = T::lit(self.config.schedule.lambda_dssim);
        let mut grads = MeshGrads::zeros(&self.state.mesh);
        let mut loss = 0.0;
        let chosen: Vec<usize> = (0..batch).map(|b| order[b % order.len()]).collect();
        for &vi in &chosen {
            let view = self.view(vi);
            let m = rasterize_mesh(&view.camera, &self.state.mesh);
            let mut img = m.color.clone();
            for p in 0..img.num_pixels() {
                if !m.is_covered(p) {
                    img.pixel_mut(p).copy_from_slice(&self.state.background);
                }
            }
            let (cl, mut g) = color_loss(&img, &view.image, lambda)?;
            for p in 0..g.num_pixels() {
                if !m.is_covered(p) {
                    g.pixel_mut(p).iter_mut().for_each(|v| *v = T::zero());
                }
            }
            let mg = mesh_backward(&m, &view.camera, &self.state.mesh, &g)?;
            grads.add(&mg);
            loss += cl.value.as_f64();
        }
        grads.scale(T::one() / T::from_usize_lossy(batch));
        self.mesh_adam(&grads, true);
        self.state.pretrain_done += 1;
        Ok(loss / batch as f64)
    }

    /// Runs pretraining (if unfinished) and joint iterations up to `total_iters`.
    pub fn train(&mut self) -> Result<()> {
        self.pretrain()?;
        self.run_until(self.config.schedule.total_iters)
    }

    pub fn run_until(&mut self, it: usize) -> Result<()> {
        let end = it.min(self.config.schedule.total_iters);
        while self.state.iteration < end {
            self.step()?;
        }
        Ok(())
    }

    /// One joint iteration.
    pub fn step(&mut self) -> Result<TraceRow> {
        let it = self.state.iteration + 1;
        let vi = self.view_for(it);
        let phase = self.phase(it);
        let sched = self.config.schedule.clone();
        let view = &self.data.views[vi];
        let cam = &view.camera;
        let clip = self.config.clip_at_mesh.then(|| T::lit(self.config.cull_eps));
        let masks = match self.prepared[vi].as_ref() {
            Some(pm) => Some((pm.masks.as_slice(), pm.weights.as_slice())),
            None if phase == Phase::MaskLoss => return Err(Error::MissingMasks(view.name.clone())),
            None => None,
        };
        let eval = loss_and_grads(&self.state, cam, &view.image, masks, &sched, phase, clip)?;
        let gb = eval.gaussians;
        let additional_on = self.config.additional_densification && it >= sched.additional_densify_from;
        if it < sched.densify_until || additional_on {
            gb.accumulate_into(&mut self.state.gaussians);
        }
        if let Some(mg) = eval.mesh.as_ref().filter(|_| self.config.use_mesh) {
            self.mesh_adam(mg, true);
        }
        self.gaussian_adam(&gb.grads, it);

        // Densification.
        if it < sched.densify_until {
            if it > sched.densify_from && it % sched.densify_every == 0 {
                let prune_big = it > sched.opacity_reset_every;
                self.densify_standard(it, prune_big);
            }
            if it % sched.opacity_reset_every == 0 {
                self.opacity_reset(it);
            }
        } else if additional_on && it % sched.densify_every == 0 && it < sched.total_iters {
            self.densify_additional(it);
        }
        if self.config.use_mesh && !self.state.mesh.faces.is_empty() {
            self.cull(it);
        }

        self.state.iteration = it;
        let row = TraceRow {
            iteration: it,
            phase,
            view: vi,
            loss: eval.loss,
            num_gaussians: self.state.gaussians.len(),
            max_alpha: self.state.gaussians.max_alpha().as_f64(),
        };
        if self.config.log_every > 0 && (it % self.config.log_every == 0 || it == sched.total_iters) {
            let mut hist = [0u32; 10];
            for o in &row.loss.per_mask_opacity {
                hist[((o * 10.0) as usize).min(9)] += 1;
            }
            self.records.push(LogRecord {
                iteration: it,
                phase,
                l1: row.loss.l1,
                dssim: row.loss.dssim,
                color: row.loss.color,
                mask: row.loss.mask,
                total: row.loss.total,
                num_gaussians: row.num_gaussians,
                opacity_histogram: hist,
                events: std::mem::take(&mut self.pending_events),
            });
        }
        let mut slim = row.clone();
        slim.loss.per_mask_opacity.clear();
        self.trace.push(slim);
        Ok(row)
    }

    fn gaussian_adam(&mut self, grads: &[Gaussian3D<T>], it: usize) {
        let position = self.position_lr(it);
        let st = &mut self.state;
        st.gaussian_steps += 1;
        let (bc1, bc2) = bias_corrections::<T>(st.gaussian_steps);
        let lr = &self.config.lr;
        let rates = GaussianLr {
            position,
            scaling: T::lit(lr.scaling),
            rotation: T::lit(lr.rotation),
            dc: T::lit(lr.sh_dc),
            rest: T::lit(lr.sh_rest),
            opacity: T::lit(lr.opacity),
        };
        let set = &mut st.gaussians;
        for ((g, gr), mom) in set.gaussians.iter_mut().zip(grads).zip(set.moments.iter_mut()) {
            adam_gaussian(g, gr, mom, &rates, bc1, bc2);
        }
    }

    fn record(&mut self, e: Event) {
        self.pending_events.push(e.clone());
        self.events.push(e);
    }

    fn mean_grads(&self) -> Vec<f64> {
        let s = &self.state.gaussians;
        s.grad_accum
            .iter()
            .zip(&s.grad_count)
            .map(|(a, &c)| if c == 0 { 0.0 } else { a.as_f64() / c as f64 })
            .collect()
    }

    fn capacity_left(&self) -> usize {
        match self.config.densify.max_gaussians {
            0 => usize::MAX,
            cap => cap.saturating_sub(self.state.gaussians.len()),
        }
    }

    /// Children of a split: positions sampled from the parent, scale / 1.6.
    fn split_children(&self, parent: &Gaussian3D<T>, rng: &mut ChaCha8Rng) -> [Gaussian3D<T>; 2] {
        let s = parent.scale();
        let r = parent.rotation();
        let shrink = T::lit(1.6).ln();
        std::array::from_fn(|_| {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let local = Vec3::new(s.x * T::lit(z[0]), s.y * T::lit(z[1]), s.z * T::lit(z[2]));
            let mut c = parent.clone();
            c.mu = parent.mu + r.mul_vec(local);
            c.log_scale = parent.log_scale.map(|v| v - shrink);
            c
        })
    }

    fn prune_mask(&self, prune_big: bool) -> Vec<bool> {
        let d = &self.config.densify;
        let s = &self.state.gaussians;
        let world = d.max_world_size * self.extent;
        s.gaussians
            .iter()
            .zip(&s.max_radii)
            .map(|(g, r)| {
                let weak = g.alpha().as_f64() < d.min_opacity;
                let big = prune_big && (r.as_f64() > d.max_screen_size || g.scale().max_elem().as_f64() > world);
                !(weak || big)
            })
            .collect()
    }

    /// Clone small and split large high-gradient Gaussians, then prune.
    pub fn densify_standard(&mut self, it: usize, prune_big: bool) {
        let grads = self.mean_grads();
        let d = self.config.densify.clone();
        let before = self.state.gaussians.len();
        let max_before = self.state.gaussians.max_alpha().as_f64();
        let limit = d.percent_dense * self.extent;
        let mut budget = self.capacity_left();
        let mut rng = rng_for(self.config.seed, 3, it as u64);
        let mut clones = Vec::new();
        let mut split_parents = vec![false; before];
        let mut children = Vec::new();
        for (i, g) in self.state.gaussians.gaussians.iter().enumerate() {
            if grads[i] < d.grad_threshold || budget == 0 {
                continue;
            }
            if g.scale().max_elem().as_f64() <= limit {
                clones.push(g.clone());
                budget -= 1;
            } else {
                split_parents[i] = true;
                children.extend(self.split_children(g, &mut rng));
                budget = budget.saturating_sub(1);
            }
        }
        let (n_clone, n_split) = (clones.len(), children.len() / 2);
        let set = &mut self.state.gaussians;
        for g in clones {
            set.push(g);
        }
        let mut keep: Vec<bool> = split_parents.iter().map(|&s| !s).collect();
        keep.resize(set.len(), true);
        set.retain_mask(&keep);
        for g in children {
            set.push(g);
        }
        let keep = self.prune_mask(prune_big);
        let pruned = self.state.gaussians.retain_mask(&keep);
        self.state.gaussians.reset_stats();
        let e = Event {
            iteration: it,
            kind: EventKind::Densify,
            cloned: n_clone,
            split: n_split,
            pruned,
            culled: 0,
            count_before: before,
            count_after: self.state.gaussians.len(),
            max_alpha_before: max_before,
            max_alpha_after: self.state.gaussians.max_alpha().as_f64(),
            children_alpha: Vec::new(),
        };
        self.record(e);
    }

    /// Split every high-gradient Gaussian into two children whose opacity is
    /// `split_opacity_factor` times the parent's, then prune. No reset.
    pub fn densify_additional(&mut self, it: usize) {
        let grads = self.mean_grads();
        let d = self.config.densify.clone();
        let factor = self.config.schedule.split_opacity_factor;
        let before = self.state.gaussians.len();
        let max_before = self.state.gaussians.max_alpha().as_f64();
        let mut budget = self.capacity_left();
        let mut rng = rng_for(self.config.seed, 4, it as u64);
        let mut split_parents = vec![false; before];
        let mut children = Vec::new();
        let mut pairs = Vec::new();
        for (i, g) in self.state.gaussians.gaussians.iter().enumerate() {
            if grads[i] < d.grad_threshold || budget == 0 {
                continue;
            }
            budget -= 1;
            split_parents[i] = true;
            let pa = g.alpha();
            let target = pa * T::lit(factor);
            for mut c in self.split_children(g, &mut rng) {
                c.logit_opacity = logit(target);
                pairs.push([pa.as_f64(), c.alpha().as_f64()]);
                children.push(c);
            }
        }
        let n_split = children.len() / 2;
        let set = &mut self.state.gaussians;
        let keep: Vec<bool> = split_parents.iter().map(|&s| !s).collect();
        set.retain_mask(&keep);
        for g in children {
            set.push(g);
        }
        let keep = self.prune_mask(true);
        let pruned = self.state.gaussians.retain_mask(&keep);
        self.state.gaussians.reset_stats();
        let e = Event {
            iteration: it,
            kind: EventKind::AdditionalDensify,
            cloned: 0,
            split: n_split,
            pruned,
            culled: 0,
            count_before: before,
            count_after: self.state.gaussians.len(),
            max_alpha_before: max_before,
            max_alpha_after: self.state.gaussians.max_alpha().as_f64(),
            children_alpha: pairs,
        };
        self.record(e);
    }

    /// Clamps every opacity to at most `reset_opacity` and clears the
    /// opacity moments.
    pub fn opacity_reset(&mut self, it: usize) {
        let cap = T::lit(self.config.densify.reset_opacity);
        let set = &mut self.state.gaussians;
        let before = set.max_alpha().as_f64();
        for (g, m) in set.gaussians.iter_mut().zip(set.moments.iter_mut()) {
            if g.alpha() > cap {
                g.logit_opacity = logit(cap);
            }
            m.m.logit_opacity = T::zero();
            m.v.logit_opacity = T::zero();
        }
        let n = set.len();
        let after = set.max_alpha().as_f64();
        self.record(Event {
            iteration: it,
            kind: EventKind::OpacityReset,
            cloned: 0,
            split: 0,
            pruned: 0,
            culled: 0,
            count_before: n,
            count_after: n,
            max_alpha_before: before,
            max_alpha_after: after,
            children_alpha: Vec::new(),
        });
    }

    fn cull(&mut self, it: usize) {
        let cams: Vec<Camera<T>> = self.train_views.iter().map(|&i| self.data.views[i].camera.clone()).collect();
        let before = self.state.gaussians.len();
        let alpha = self.state.gaussians.max_alpha().as_f64();
        let n = cull_behind_mesh(&mut self.state.gaussians, &self.state.mesh, T::lit(self.config.cull_eps), &cams);
        if n > 0 {
            self.record(Event {
                iteration: it,
                kind: EventKind::Cull,
                cloned: 0,
                split: 0,
                pruned: 0,
                culled: n,
                count_before: before,
                count_after: self.state.gaussians.len(),
                max_alpha_before: alpha,
                max_alpha_after: self.state.gaussians.max_alpha().as_f64(),
                children_alpha: Vec::new(),
            });
        }
    }

    /// Fraction of per-view masks (after preprocessing) whose mean opacity
    /// lies in `[0.1, 0.9]`, over all training views.
    pub fn mixed_mask_fraction(&self) -> Result<f64> {
        let (mut mixed, mut total) = (0usize, 0usize);
        for &vi in &self.train_views {
            let Some(pm) = self.prepared[vi].as_ref() else { continue };
            if pm.masks.is_empty() {
                continue;
            }
            let g = render(&self.view(vi).camera, &self.state.gaussians, [T::zero(); 3], None);
            for o in per_mask_opacity(&g.opacity, &pm.masks)? {
                let o = o.as_f64();
                total += 1;
                mixed += (0.1..=0.9).contains(&o) as usize;
            }
        }
        Ok(if total == 0 { 0.0 } else { mixed as f64 / total as f64 })
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalReport> {
        evaluate(&self.state, self.data, split, self.config.clip_at_mesh.then_some(self.config.cull_eps))
    }
}

/// PSNR/SSIM of the composite and GIoU/LIoU of the Gaussian opacity map
/// over the views of `split`.
pub fn evaluate<T: Real>(state: &TrainState<T>, data: &Dataset<T>, split: Split, clip_eps: Option<f64>) -> Result<EvalReport> {
    let mut views = Vec::new();
    for v in data.split(split) {
        let r = render_state(state, &v.camera, clip_eps.map(T::lit))?;
        let p = psnr(&r.both, &v.image)?;
        let s = ssim(&r.both, &v.image)?.as_f64();
        let (mut giou, mut liou, mut gs, mut ls) = (None, None, None, None);
        if let Some(layout) = v.layout_region() {
            let (g, l) = giou_liou(&r.gaussians.opacity, &layout, DEFAULT_THETA)?;
            let (a, b) = giou_liou_soft(&r.gaussians.opacity, &layout)?;
            giou = Some(g);
            liou = Some(l);
            gs = Some(a);
            ls = Some(b);
        }
        views.push(ViewMetrics { name: v.name.clone(), psnr: p, ssim: s, giou, liou, giou_soft: gs, liou_soft: ls });
    }
    if views.is_empty() {
        return Err(Error::Dataset(format!("no {split:?} views to evaluate")));
    }
    let n = views.len() as f64;
    let mean_opt = |f: fn(&ViewMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = views.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    let mean = MeanMetrics {
        psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        giou: mean_opt(|v| v.giou),
        liou: mean_opt(|v| v.liou),
        giou_soft: mean_opt(|v| v.giou_soft),
        liou_soft: mean_opt(|v| v.liou_soft),
    };
    Ok(EvalReport { num_gaussians: state.gaussians.len(), theta: DEFAULT_THETA, views, mean })
}
