//! Training configuration (TOML) and the ablation presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{WeightScheme, DEFAULT_MIN_AREA, DEFAULT_OVERLAP_TAU};

/// Phase boundaries and loss weights. Joint iterations are counted from 1
/// after mesh pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub pretrain_iters: usize,
    pub pretrain_batch: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_every: usize,
    pub opacity_reset_every: usize,
    pub mask_loss_from: usize,
    pub additional_densify_from: usize,
    pub total_iters: usize,
    /// D-SSIM weight of the color loss.
    pub lambda_dssim: f64,
    pub lambda_mask: f64,
    /// Opacity of additional-densification children relative to the parent.
    pub split_opacity_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_iters: 1000,
            pretrain_batch: 8,
            densify_from: 500,
            densify_until: 15_000,
            densify_every: 100,
            opacity_reset_every: 3000,
            mask_loss_from: 15_000,
            additional_densify_from: 15_000,
            total_iters: 30_000,
            lambda_dssim: 0.2,
            lambda_mask: 0.5,
            split_opacity_factor: 0.8,
        }
    }
}

/// Adam learning rates per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Position rates are multiplied by the scene extent and decay
    /// exponentially from `position_init` to `position_final`.
    pub position_init: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scaling: f64,
    pub rotation: f64,
    pub mesh_sh_dc: f64,
    pub mesh_sh_rest: f64,
    pub mesh_vertices: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 0.0025,
            sh_rest: 0.0025 / 20.0,
            opacity: 0.05,
            scaling: 0.005,
            rotation: 0.001,
            mesh_sh_dc: 0.0025,
            mesh_sh_rest: 0.0025 / 20.0,
            mesh_vertices: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyParams {
    /// Mean screen-space (NDC) positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians larger than `percent_dense * extent` are split, smaller ones cloned.
    pub percent_dense: f64,
    pub min_opacity: f64,
    /// Screen radius (pixels) above which Gaussians are pruned after the
    /// first opacity reset.
    pub max_screen_size: f64,
    /// World size (fraction of the extent) above which Gaussians are pruned
    /// together with the screen-size rule.
    pub max_world_size: f64,
    pub reset_opacity: f64,
    /// Densification stops adding Gaussians beyond this count (0 = no cap).
    pub max_gaussians: usize,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            grad_threshold: 0.0002,
            percent_dense: 0.01,
            min_opacity: 0.005,
            max_screen_size: 20.0,
            max_world_size: 0.1,
            reset_opacity: 0.01,
            max_gaussians: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskOptions {
    pub weight_scheme: WeightScheme,
    pub remove_overlap: bool,
    pub overlap_tau: f64,
    pub min_area: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            weight_scheme: WeightScheme::SqrtArea,
            remove_overlap: true,
            overlap_tau: DEFAULT_OVERLAP_TAU,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub sh_degree: usize,
    pub init_opacity: f64,
    /// Train with the layout mesh; `false` gives a Gaussians-only baseline.
    pub use_mesh: bool,
    pub additional_densification: bool,
    /// Behind-mesh culling tolerance (m).
    pub cull_eps: f64,
    /// Also drop Gaussians behind the mesh depth at render time.
    pub clip_at_mesh: bool,
    pub log_every: usize,
    pub schedule: TrainSchedule,
    pub lr: LearningRates,
    pub densify: DensifyParams,
    pub masks: MaskOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            sh_degree: 3,
            init_opacity: 0.1,
            use_mesh: true,
            additional_densification: true,
            cull_eps: 0.01,
            clip_at_mesh: false,
            log_every: 100,
            schedule: TrainSchedule::default(),
            lr: LearningRates::default(),
            densify: DensifyParams::default(),
            masks: MaskOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if s.mask_loss_from < s.densify_until {
            return bad("mask_loss_from must not precede densify_until");
        }
        if s.additional_densify_from < s.densify_until {
            return bad("additional_densify_from must not precede densify_until");
        }
        if s.densify_every == 0 || s.opacity_reset_every == 0 {
            return bad("densify_every and opacity_reset_every must be positive");
        }
        if s.pretrain_batch == 0 {
            return bad("pretrain_batch must be positive");
        }
        if !(0.0..=1.0).contains(&s.lambda_dssim) {
            return bad("lambda_dssim must lie in [0, 1]");
        }
        if !(s.lambda_mask >= 0.0) {
            return bad("lambda_mask must be non-negative");
        }
        if !(s.split_opacity_factor > 0.0 && s.split_opacity_factor <= 1.0) {
            return bad("split_opacity_factor must lie in (0, 1]");
        }
        if !(self.masks.overlap_tau > 0.0 && self.masks.overlap_tau <= 1.0) {
            return bad("overlap_tau must lie in (0, 1]");
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::UnsupportedDegree(self.sh_degree));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        Ok(())
    }

    /// Whether the mask loss contributes at joint iteration `it`.
    pub fn mask_loss_active(&self, it: usize) -> bool {
        self.use_mesh && self.schedule.lambda_mask > 0.0 && it >= self.schedule.mask_loss_from
    }

    /// Defaults, then `preset`, then the keys present in `overrides` (a TOML
    /// document with the layout of this struct).
    pub fn compose(preset: Option<Ablation>, overrides: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = preset {
            p.apply(&mut cfg);
        }
        if let Some(text) = overrides {
            let mut base = toml::Value::try_from(&cfg)?;
            let over: toml::Value = toml::from_str(text)?;
            merge(&mut base, over);
            cfg = base.try_into()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Rows of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Joint training without mask loss.
    A,
    /// Mask loss with uniform weights, overlapping masks kept.
    B,
    /// B with overlapping masks removed.
    C,
    /// C with square-root-of-area weights.
    D,
    /// D with additional densification.
    Ours,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::Ours];

    pub fn apply(self, cfg: &mut TrainConfig) {
        let m = &mut cfg.masks;
        m.weight_scheme = WeightScheme::Uniform;
        m.remove_overlap = false;
        cfg.additional_densification = false;
        cfg.schedule.lambda_mask = TrainSchedule::default().lambda_mask;
        match self {
            Ablation::A => cfg.schedule.lambda_mask = 0.0,
            Ablation::B => {}
            Ablation::C => m.remove_overlap = true,
            Ablation::D => {
                m.remove_overlap = true;
                m.weight_scheme = WeightScheme::SqrtArea;
            }
            Ablation::Ours => {
                m.remove_overlap = true;
                m.weight_scheme = WeightScheme::SqrtArea;
                cfg.additional_densification = true;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::A => "A",
            Ablation::B => "B",
            Ablation::C => "C",
            Ablation::D => "D",
            Ablation::Ours => "ours",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Ablation::A),
            "b" => Ok(Ablation::B),
            "c" => Ok(Ablation::C),
            "d" => Ok(Ablation::D),
            "ours" => Ok(Ablation::Ours),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (A, B, C, D, ours)"))),
        }
    }
}
