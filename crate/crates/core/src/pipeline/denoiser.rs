//! Velocity predictors driven by the pipeline.

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{carve_attention, AmplifierBias, AttentionInputs};
use crate::analysis::effective_sparsity;
use crate::error::{shape_err, CarveError, Result};
use crate::mask::{build_block_mask, SelectionParams};
use crate::partition::{BlockLayout, StaticMasks};
use crate::sfc::{GridDims, Permutation};

/// Everything a denoiser sees for one step. Tokens and positions are in
/// curve order.
pub struct StepContext<'a> {
    pub stage: usize,
    /// Index into the base step grid.
    pub step: usize,
    pub sigma: f64,
    pub dims: GridDims,
    pub layout: &'a BlockLayout,
    pub perm: &'a Permutation,
    pub statics: &'a StaticMasks,
    /// `(t, h, w)` of the cell at each curve position.
    pub positions: &'a [[usize; 3]],
    pub selection: SelectionParams,
    pub beta: AmplifierBias,
    /// Condition tokens, `n_cond × channels`.
    pub cond: ArrayView2<'a, f32>,
}

pub struct DenoiseOutput {
    /// `cells × channels`, curve order.
    pub velocity: Array2<f32>,
    pub effective_sparsity: Option<f64>,
}

pub trait Denoiser: Sync {
    fn velocity(&self, tokens: ArrayView2<'_, f32>, ctx: &StepContext<'_>) -> Result<DenoiseOutput>;
}

/// Exact flow velocity for data `x₀ ~ N(μ, s²)` per element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDenoiser {
    pub mu: f64,
    pub std: f64,
}

impl GaussianDenoiser {
    pub fn new(mu: f64, std: f64) -> Result<Self> {
        if std.is_nan() || std <= 0.0 {
            return Err(CarveError::Domain(format!("data std {std} must be positive")));
        }
        Ok(Self { mu, std })
    }

    /// `E[x₀ | x_σ = x]`.
    pub fn posterior_mean(&self, x: f64, sigma: f64) -> f64 {
        let a = 1.0 - sigma;
        let s2 = self.std * self.std;
        self.mu + a * s2 * (x - a * self.mu) / (a * a * s2 + sigma * sigma)
    }

    /// `E[ε − x₀ | x_σ = x]`, written without dividing by σ so that σ = 0
    /// yields the limit `−x`.
    pub fn velocity_at(&self, x: f64, sigma: f64) -> f64 {
        let a = 1.0 - sigma;
        let s2 = self.std * self.std;
        (sigma * (x - self.mu) - a * s2 * x) / (a * a * s2 + sigma * sigma)
    }
}

impl Denoiser for GaussianDenoiser {
    fn velocity(&self, tokens: ArrayView2<'_, f32>, ctx: &StepContext<'_>) -> Result<DenoiseOutput> {
        Ok(DenoiseOutput {
            velocity: tokens.mapv(|x| self.velocity_at(x as f64, ctx.sigma) as f32),
            effective_sparsity: None,
        })
    }
}

/// Single block-sparse attention layer on top of the Gaussian velocity.
///
/// Queries, keys and values are fixed random projections of the tokens plus a
/// sinusoidal code of each cell's position; the attention output is projected
/// back to the channels and added to the analytic velocity with weight `gamma`.
pub struct ToyTransformer {
    pub base: GaussianDenoiser,
    pub heads: usize,
    pub head_dim: usize,
    pub gamma: f32,
    channels: usize,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

/// Positional code width added to each token before projection.
const POS_FEATURES: usize = 6;

impl ToyTransformer {
    pub fn new(
        base: GaussianDenoiser,
        channels: usize,
        heads: usize,
        head_dim: usize,
        gamma: f32,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = heads * head_dim;
        let fan_in = channels + POS_FEATURES;
        let mut init = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f32).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        Self {
            base,
            heads,
            head_dim,
            gamma,
            channels,
            wq: init(fan_in, inner),
            wk: init(fan_in, inner),
            wv: init(fan_in, inner),
            wo: init(inner, channels),
        }
    }

    fn features(&self, tokens: ArrayView2<'_, f32>, pos: Option<&[[usize; 3]]>, dims: GridDims) -> Array2<f32> {
        let n = tokens.nrows();
        let mut f = Array2::<f32>::zeros((n, self.channels + POS_FEATURES));
        f.slice_mut(ndarray::s![.., ..self.channels]).assign(&tokens);
        if let Some(pos) = pos {
            let ext = dims.as_array();
            for (i, p) in pos.iter().enumerate() {
                for axis in 0..3 {
                    let phase = std::f32::consts::PI * p[axis] as f32 / ext[axis] as f32;
                    f[[i, self.channels + 2 * axis]] = phase.sin();
                    f[[i, self.channels + 2 * axis + 1]] = phase.cos();
                }
            }
        }
        f
    }

    /// `(heads, padded_len, head_dim)` projection of the padded token features.
    fn project(&self, feats: &Array2<f32>, w: &Array2<f32>, layout: &BlockLayout) -> Array3<f32> {
        let proj = feats.dot(w);
        let mut out = Array3::<f32>::zeros((self.heads, layout.padded_len(), self.head_dim));
        for (row, i) in (0..layout.padded_len()).filter(|&i| layout.is_valid(i)).enumerate() {
            for h in 0..self.heads {
                for d in 0..self.head_dim {
                    out[[h, i, d]] = proj[[row, h * self.head_dim + d]];
                }
            }
        }
        out
    }
}

impl Denoiser for ToyTransformer {
    fn velocity(&self, tokens: ArrayView2<'_, f32>, ctx: &StepContext<'_>) -> Result<DenoiseOutput> {
        let layout = ctx.layout;
        if tokens.nrows() != layout.n_valid || tokens.ncols() != self.channels {
            return shape_err(format!(
                "toy transformer expects {} × {} tokens, got {:?}",
                layout.n_valid,
                self.channels,
                tokens.dim()
            ));
        }
        if ctx.cond.nrows() != layout.n_cond || ctx.cond.ncols() != self.channels {
            return shape_err("condition tokens do not match the layout");
        }
        let vision = self.features(tokens, Some(ctx.positions), ctx.dims);
        let cond = self.features(ctx.cond, None, ctx.dims);
        let feats = ndarray::concatenate(ndarray::Axis(0), &[vision.view(), cond.view()])
            .expect("feature widths agree");

        let q = self.project(&feats, &self.wq, layout);
        let k = self.project(&feats, &self.wk, layout);
        let v = self.project(&feats, &self.wv, layout);
        let (mask, _) = build_block_mask(q.view(), k.view(), layout, ctx.statics, &ctx.selection)?;
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view(), layout)?;
        let attn = carve_attention(&inputs, &mask, ctx.beta)?;

        let mut merged = Array2::<f32>::zeros((layout.n_valid, self.heads * self.head_dim));
        for i in 0..layout.n_valid {
            for h in 0..self.heads {
                for d in 0..self.head_dim {
                    merged[[i, h * self.head_dim + d]] = attn[[h, i, d]];
                }
            }
        }
        let residual = merged.dot(&self.wo);
        let base = tokens.mapv(|x| self.base.velocity_at(x as f64, ctx.sigma) as f32);
        Ok(DenoiseOutput {
            velocity: base + residual * self.gamma,
            effective_sparsity: Some(effective_sparsity(&mask).mean),
        })
    }
}
