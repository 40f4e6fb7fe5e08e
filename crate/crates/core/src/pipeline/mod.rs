//! Progressive-resolution flow sampling.
//!
//! Each stage builds its curve, layout and static masks once, then runs its
//! retained steps: reorder tokens into curve order, ask the denoiser for a
//! velocity, restore grid order and take an Euler step. Between stages the
//! last prediction becomes a clean estimate that is upsampled and re-noised to
//! the first noise level of the next stage.

pub mod denoiser;
pub mod flow;
pub mod schedule;

use std::time::Instant;

use ndarray::{Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{compute_beta, AmplifierBias};
use crate::error::{CarveError, Result};
use crate::mask::SelectionParams;
use crate::partition::{build_layout, StaticMasks};
use crate::sfc::{build_curve, GridDims};

pub use denoiser::{DenoiseOutput, Denoiser, GaussianDenoiser, StepContext, ToyTransformer};
pub use flow::{
    denoise_step, gaussian_latent, predict_clean, stage_transition, upsample_area_3d, LatentTensor,
};
pub use schedule::{shifted_sigmas, skip_schedule, SigmaSchedule, StagePlan, StageSpec};

/// Settings shared by every stage of a run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub channels: usize,
    pub block: usize,
    pub p: f64,
    pub seed: u64,
    /// Condition tokens, `n_cond × channels`.
    pub cond: Array2<f32>,
}

impl RunConfig {
    pub fn new(channels: usize, block: usize, p: f64, seed: u64) -> Self {
        Self {
            channels,
            block,
            p,
            seed,
            cond: Array2::zeros((0, channels)),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub dims: GridDims,
    pub tokens: usize,
    pub steps: Vec<usize>,
    pub alpha: f64,
    pub k: f64,
    pub beta: f64,
    pub vision_blocks: usize,
    pub cond_blocks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub stage: usize,
    pub step: usize,
    pub sigma: f64,
    pub effective_sparsity: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub steps: Vec<StepReport>,
    pub nfe: usize,
    pub wall_time_s: f64,
}

pub struct RunOutput {
    pub latent: LatentTensor,
    pub report: RunReport,
}

pub fn run_pipeline(plan: &StagePlan, denoiser: &dyn Denoiser, config: &RunConfig) -> Result<RunOutput> {
    plan.validate()?;
    if config.cond.ncols() != config.channels {
        return Err(CarveError::Shape("condition tokens need one value per channel".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target_cells = plan.target().cells();
    let c = config.channels;
    let n_cond = config.cond.nrows();

    let mut x: Option<LatentTensor> = None;
    let mut stage_reports = Vec::new();
    let mut step_reports = Vec::new();

    for (s, stage) in plan.stages.iter().enumerate() {
        let dims = stage.dims;
        let perm = build_curve(dims)?;
        let layout = build_layout(dims, config.block, n_cond);
        let statics = StaticMasks::build(&layout, dims, &perm)?;
        let positions = perm.apply(&dims.all_coords())?;
        let beta = compute_beta(dims.cells(), target_cells, stage.rho)?;
        let selection = SelectionParams::new(stage.k, config.p)?;
        let sched = shifted_sigmas(&stage.steps, plan.base_steps, stage.alpha)?;

        let mut cur = match x.take() {
            Some(prev) => prev,
            None => gaussian_latent(dims, c, &mut rng),
        };
        let last_stage = s + 1 == plan.stages.len();

        for (i, (sigma, sigma_next)) in sched.pairs().enumerate() {
            let ctx = StepContext {
                stage: s,
                step: stage.steps[i],
                sigma,
                dims,
                layout: &layout,
                perm: &perm,
                statics: &statics,
                positions: &positions,
                selection,
                beta: AmplifierBias(beta as f32),
                cond: config.cond.view(),
            };
            let flat = cur.as_slice().expect("latents are contiguous");
            let tokens = perm.apply_rows(flat, c)?;
            let tokens = ArrayView2::from_shape((dims.cells(), c), &tokens)
                .map_err(|e| CarveError::Shape(e.to_string()))?;
            let out = denoiser.velocity(tokens, &ctx)?;
            if out.velocity.dim() != (dims.cells(), c) {
                return Err(CarveError::Shape(format!(
                    "denoiser returned {:?}, expected ({}, {c})",
                    out.velocity.dim(),
                    dims.cells()
                )));
            }
            let v_flat = perm.invert_rows(out.velocity.as_standard_layout().as_slice().unwrap(), c)?;
            let v = Array4::from_shape_vec((dims.t, dims.h, dims.w, c), v_flat)
                .map_err(|e| CarveError::Shape(e.to_string()))?;

            step_reports.push(StepReport {
                stage: s,
                step: stage.steps[i],
                sigma,
                effective_sparsity: out.effective_sparsity,
            });

            let final_step = i + 1 == sched.steps();
            cur = if final_step && !last_stage {
                predict_clean(cur.view(), v.view(), sigma)?
            } else {
                denoise_step(cur.view(), v.view(), sigma, sigma_next)?
            };
        }

        stage_reports.push(StageReport {
            dims,
            tokens: dims.cells(),
            steps: stage.steps.clone(),
            alpha: stage.alpha,
            k: stage.k,
            beta,
            vision_blocks: layout.vision_blocks,
            cond_blocks: layout.cond_blocks,
        });

        if !last_stage {
            let next = &plan.stages[s + 1];
            let sigma_next = shifted_sigmas(&next.steps[..1], plan.base_steps, next.alpha)?.sigmas[0];
            cur = stage_transition(cur.view(), sigma_next, next.dims, &mut rng)?;
        }
        x = Some(cur);
    }

    Ok(RunOutput {
        latent: x.expect("validated plans have a stage"),
        report: RunReport {
            stages: stage_reports,
            steps: step_reports,
            nfe: plan.nfe(),
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    #[default]
    Gaussian,
    ToyTransformer,
}

/// JSON run description read by the `pipeline` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineFile {
    #[serde(flatten)]
    pub plan: StagePlan,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub denoiser: DenoiserKind,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_block")]
    pub block: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub cond_tokens: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_std")]
    pub std: f64,
}

fn default_channels() -> usize {
    4
}
fn default_block() -> usize {
    128
}
fn default_p() -> f64 {
    0.3
}
fn default_mu() -> f64 {
    0.0
}
fn default_std() -> f64 {
    1.0
}

impl PipelineFile {
    pub fn new(plan: StagePlan) -> Self {
        Self {
            plan,
            seed: 0,
            denoiser: DenoiserKind::Gaussian,
            channels: default_channels(),
            block: default_block(),
            p: default_p(),
            cond_tokens: 0,
            mu: default_mu(),
            std: default_std(),
        }
    }

    /// Runs the described pipeline; condition tokens are drawn from the seed.
    pub fn run(&self) -> Result<RunOutput> {
        let base = GaussianDenoiser::new(self.mu, self.std)?;
        let mut config = RunConfig::new(self.channels, self.block, self.p, self.seed);
        let mut cond_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c0de);
        config.cond = gaussian_latent(
            GridDims {
                t: 1,
                h: 1,
                w: self.cond_tokens.max(1),
            },
            self.channels,
            &mut cond_rng,
        )
        .into_shape_with_order((self.cond_tokens.max(1), self.channels))
        .map_err(|e| CarveError::Shape(e.to_string()))?
        .slice_move(ndarray::s![..self.cond_tokens, ..]);

        match self.denoiser {
            DenoiserKind::Gaussian => run_pipeline(&self.plan, &base, &config),
            DenoiserKind::ToyTransformer => {
                let toy = ToyTransformer::new(base, self.channels, 2, 16, 0.05, self.seed);
                run_pipeline(&self.plan, &toy, &config)
            }
        }
    }
}
