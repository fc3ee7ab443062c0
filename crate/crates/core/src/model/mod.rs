//! The full two-branch network, from raw points to per-point logits.
//!
//! ```text
//! points ─ voxelise ─ mini-PointNet ─┬─ SFC-grouped encoder (per shifted grid) ─┐
//!                                    └─ DISCO global encoder ───────────────────┴─ concat
//!        ─ channel attention ─ MLP decoder ─ devoxelise ─ per-point logits
//! ```

mod branches;
mod fusion;
mod layers;

use std::time::{Duration, Instant};

pub use branches::{
    disco_branch, grouped_attention, grouped_transformer_branch, GlobalAttention, GroupExecution,
};
pub use fusion::{
    channel_attention, channel_attention_fuse, decode, ChannelAttention, FusionParams,
};
pub use layers::{LayerNorm, Mlp, TransformerLayerParams};

use crate::error::{LestError, Result};
use crate::grouping::{default_shifts, group_stats, Shift};
use crate::io::PointCloud;
use crate::linalg::Matrix;
use crate::rng::sub_seed;
use crate::voxel::{
    assign_voxels, devoxelize, featurize_voxels, MiniPointNetParams, PointLogits, VoxelGridSpec,
};

/// Switches for the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Run the grouped branch on every configured shift (false: first only).
    pub shifted_grids: bool,
    pub disco_branch: bool,
    pub channel_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            shifted_grids: true,
            disco_branch: true,
            channel_attention: true,
        }
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        shifted_grids: true,
        disco_branch: true,
        channel_attention: true,
    };
    pub const SINGLE_GRID: Self = Self {
        shifted_grids: false,
        ..Self::FULL
    };
    pub const NO_DISCO: Self = Self {
        disco_branch: false,
        ..Self::FULL
    };
    pub const NO_CHANNEL_ATTENTION: Self = Self {
        channel_attention: false,
        ..Self::FULL
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LestConfig {
    pub grid: VoxelGridSpec,
    pub pointnet_hidden: usize,
    /// Voxel channels `C`.
    pub channels: usize,
    /// Attention projection width `D`.
    pub attn_dim: usize,
    pub ffn_hidden: usize,
    /// SFC group capacity `S`.
    pub group_size: usize,
    pub shifts: Vec<Shift>,
    pub layers_per_grid: usize,
    pub disco_layers: usize,
    pub decoder_hidden: usize,
    pub classes: usize,
    pub group_execution: GroupExecution,
    pub global_attention: GlobalAttention,
    pub ablation: Ablation,
    pub seed: u64,
    /// Overrides the derived mini-PointNet seed.
    pub pointnet_seed: Option<u64>,
}

impl Default for LestConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::default(),
            pointnet_hidden: 32,
            channels: 64,
            attn_dim: 32,
            ffn_hidden: 128,
            group_size: 64,
            shifts: default_shifts(64),
            layers_per_grid: 1,
            disco_layers: 1,
            decoder_hidden: 64,
            classes: 20,
            group_execution: GroupExecution::Sequential,
            global_attention: GlobalAttention::Disco,
            ablation: Ablation::FULL,
            seed: 0,
            pointnet_seed: None,
        }
    }
}

impl LestConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let positive = [
            ("pointnet.hidden", self.pointnet_hidden),
            ("pointnet.channels", self.channels),
            ("model.attn_dim", self.attn_dim),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.group_size", self.group_size),
            ("model.layers_per_grid", self.layers_per_grid),
            ("model.disco_layers", self.disco_layers),
            ("model.decoder_hidden", self.decoder_hidden),
            ("model.classes", self.classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LestError::contract(format!("{k} must be positive")));
        }
        if self.shifts.is_empty() {
            return Err(LestError::contract("at least one grid shift is required"));
        }
        Ok(())
    }

    /// Shifts actually run, after the single-grid ablation.
    pub fn active_shifts(&self) -> &[Shift] {
        if self.ablation.shifted_grids {
            &self.shifts
        } else {
            &self.shifts[..1]
        }
    }

    fn fused_width(&self) -> usize {
        if self.ablation.disco_branch {
            2 * self.channels
        } else {
            self.channels
        }
    }
}

/// Every weight of the network, derived deterministically from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct LestParams {
    pub pointnet: MiniPointNetParams,
    /// `grid_layers[g][l]`: layer `l` of shifted grid `g`.
    pub grid_layers: Vec<Vec<TransformerLayerParams>>,
    pub disco_layers: Vec<TransformerLayerParams>,
    pub decoder: FusionParams,
}

impl LestParams {
    pub fn new(cfg: &LestConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let layer = |name: String| {
            TransformerLayerParams::new(
                sub_seed(seed, &name),
                cfg.channels,
                cfg.attn_dim,
                cfg.ffn_hidden,
            )
        };
        Ok(Self {
            pointnet: MiniPointNetParams::new(
                cfg.pointnet_seed
                    .unwrap_or_else(|| sub_seed(seed, "pointnet")),
                cfg.pointnet_hidden,
                cfg.channels,
            ),
            grid_layers: (0..cfg.shifts.len())
                .map(|g| {
                    (0..cfg.layers_per_grid)
                        .map(|l| layer(format!("sfc/grid{g}/layer{l}")))
                        .collect()
                })
                .collect(),
            disco_layers: (0..cfg.disco_layers)
                .map(|l| layer(format!("disco/layer{l}")))
                .collect(),
            decoder: FusionParams::new(
                sub_seed(seed, "decoder"),
                cfg.fused_width(),
                cfg.decoder_hidden,
                cfg.classes,
            ),
        })
    }
}

/// Group count and largest group of one shifted grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSummary {
    pub shift: Shift,
    pub groups: usize,
    pub max_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardReport {
    pub n_points: usize,
    pub kept_points: usize,
    pub dropped_points: usize,
    pub n_voxels: usize,
    pub grids: Vec<GridSummary>,
    /// Channel weights of the fusion step, empty when ablated.
    pub channel_weights: Vec<f64>,
    /// Wall time per stage, monotonic clock, in pipeline order.
    pub timings: Vec<(&'static str, Duration)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: PointLogits,
    pub report: ForwardReport,
}

fn timed<T>(
    timings: &mut Vec<(&'static str, Duration)>,
    stage: &'static str,
    f: impl FnOnce() -> T,
) -> T {
    let start = Instant::now();
    let out = f();
    timings.push((stage, start.elapsed()));
    out
}

/// Voxelise, encode, run both branches, fuse, decode and scatter back.
pub fn forward(cloud: &PointCloud, cfg: &LestConfig, params: &LestParams) -> Result<ForwardOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let voxels = timed(&mut timings, "voxelize", || assign_voxels(cloud, &cfg.grid))?;
    let voxels = timed(&mut timings, "featurize", || {
        featurize_voxels(&voxels, cloud, &params.pointnet)
    })?;
    let x = &voxels.features;

    let (x_sfc, grids) = timed(&mut timings, "sfc_branch", || {
        grouped_transformer_branch(
            &voxels.coords,
            x,
            cfg.group_size,
            cfg.active_shifts(),
            &params.grid_layers,
            cfg.group_execution,
        )
    })?;
    let fused = if cfg.ablation.disco_branch {
        let x_disco = timed(&mut timings, "disco_branch", || {
            disco_branch(x, &params.disco_layers, cfg.global_attention)
        })?;
        x_sfc.hconcat(&x_disco)?
    } else {
        x_sfc
    };
    let (fused, channel_weights) = if cfg.ablation.channel_attention {
        let ca = timed(&mut timings, "channel_attention", || {
            channel_attention(&fused)
        });
        (ca.output, ca.weights)
    } else {
        (fused, Vec::new())
    };
    let voxel_logits: Matrix = timed(&mut timings, "decode", || decode(&fused, &params.decoder))?;
    let logits = timed(&mut timings, "devoxelize", || {
        devoxelize(&voxels, &voxel_logits)
    })?;

    let grids = cfg
        .active_shifts()
        .iter()
        .zip(&grids)
        .map(|(&shift, g)| {
            let s = group_stats(g);
            GridSummary {
                shift,
                groups: s.n_groups(),
                max_size: s.max_size,
            }
        })
        .collect();
    Ok(ForwardOutput {
        logits,
        report: ForwardReport {
            n_points: cloud.len(),
            kept_points: voxels.kept_points(),
            dropped_points: voxels.dropped,
            n_voxels: voxels.len(),
            grids,
            channel_weights,
            timings,
        },
    })
}

/// Runs `f` on a dedicated rayon pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LestError::Invariant(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}
