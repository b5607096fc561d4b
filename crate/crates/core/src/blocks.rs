//! Feature-aggregated bidirectional S6 blocks.
//!
//! One block: project channels to twice the width, split into two chunks,
//! flip one chunk in sequence order, push each chunk through a stack of
//! depthwise causal convolutions with different kernel sizes (outputs
//! summed or concatenated, then SiLU), scan with an S6 kernel, gate with
//! the SiLU of the pre-conv chunk, re-flip the backward half, concatenate
//! and project back.
//!
//! The time-axis variant (TFA, and its single-kernel T variant) scans over
//! time with the channels as features. The channel-axis variant (CFA)
//! pools time down to a fixed width first and scans over the channel axis,
//! producing one value per channel for gating.

use rand::Rng;

use crate::s6::{s6_forward, S6Config, S6Params, ScanMode};
use crate::tensor::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::ops::{PadMode, Pointwise};
use crate::tensor::{invalid, Element, Result, Tensor};

/// Which axis the scan runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAxis {
    Time,
    Channel,
}

/// How the per-kernel conv outputs merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    Sum,
    Concat,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub axis: BlockAxis,
    pub kernels: Vec<usize>,
    pub aggregate: Aggregate,
    /// Pooled temporal width L^a; channel axis only.
    pub pooled_len: usize,
    /// Channel width C of the surrounding model.
    pub channels: usize,
    pub state_dim: usize,
    pub share_directions: bool,
    pub d_skip: bool,
    pub scan_mode: ScanMode,
    /// Alternative CFA reading: run the time-axis pipeline on the pooled
    /// sequence instead of scanning along channels.
    pub cfa_pooled_time: bool,
}

impl BlockConfig {
    pub fn time(channels: usize, kernels: Vec<usize>, state_dim: usize) -> Self {
        Self {
            axis: BlockAxis::Time,
            kernels,
            aggregate: Aggregate::Sum,
            pooled_len: 0,
            channels,
            state_dim,
            share_directions: false,
            d_skip: true,
            scan_mode: ScanMode::Sequential,
            cfa_pooled_time: false,
        }
    }

    pub fn channel(channels: usize, kernels: Vec<usize>, state_dim: usize, pooled_len: usize) -> Self {
        Self {
            axis: BlockAxis::Channel,
            kernels,
            aggregate: Aggregate::Sum,
            pooled_len,
            channels,
            state_dim,
            share_directions: false,
            d_skip: true,
            scan_mode: ScanMode::Sequential,
            cfa_pooled_time: false,
        }
    }

    /// Feature width the in/out projections and the scan see.
    fn width(&self) -> usize {
        match self.axis {
            BlockAxis::Time => self.channels,
            BlockAxis::Channel => {
                if self.cfa_pooled_time {
                    self.channels
                } else {
                    self.pooled_len
                }
            }
        }
    }

    /// Inner scan width: `|K| * W` in concat mode, `W` otherwise.
    fn inner_width(&self) -> usize {
        match self.aggregate {
            Aggregate::Sum => self.width(),
            Aggregate::Concat => self.kernels.len() * self.width(),
        }
    }
}

/// One direction's conv stack and scan kernel.
#[derive(Debug, Clone)]
pub struct DirectionWeights {
    pub convs: Vec<(ParamId, ParamId)>,
    pub s6: S6Params,
}

/// Weights of one bidirectional block.
#[derive(Debug, Clone)]
pub struct BiS6Block {
    pub cfg: BlockConfig,
    pub in_proj_w: ParamId,
    pub in_proj_b: ParamId,
    /// One bundle when directions share weights, two otherwise.
    pub dirs: Vec<DirectionWeights>,
    pub out_proj_w: ParamId,
    pub out_proj_b: ParamId,
}

impl BiS6Block {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.kernels.is_empty() {
            return Err(invalid("bis6", "kernel list must be non-empty"));
        }
        if cfg.kernels.iter().any(|&k| k < 1) {
            return Err(invalid("bis6", "kernel sizes must be >= 1"));
        }
        if cfg.axis == BlockAxis::Channel {
            let kmax = *cfg.kernels.iter().max().expect("non-empty");
            if cfg.pooled_len < kmax {
                return Err(invalid(
                    "bis6",
                    format!("pooled length {} < max kernel {kmax}", cfg.pooled_len),
                ));
            }
        }
        let w = cfg.width();
        let bound = 1.0 / (w as f64).sqrt();
        let in_proj_w = store.add(
            format!("{prefix}.in_proj.weight"),
            Tensor::rand_uniform(vec![2 * w, w], -bound, bound, rng),
            true,
        );
        let in_proj_b =
            store.add(format!("{prefix}.in_proj.bias"), Tensor::zeros(vec![2 * w]), false);
        let n_dirs = if cfg.share_directions { 1 } else { 2 };
        let mut dirs = Vec::with_capacity(n_dirs);
        for di in 0..n_dirs {
            let mut convs = Vec::with_capacity(cfg.kernels.len());
            for (ki, &k) in cfg.kernels.iter().enumerate() {
                let cb = 1.0 / (k as f64).sqrt();
                let cw = store.add(
                    format!("{prefix}.dir{di}.conv{ki}_k{k}.weight"),
                    Tensor::rand_uniform(vec![w, 1, k], -cb, cb, rng),
                    true,
                );
                let cbias = store.add(
                    format!("{prefix}.dir{di}.conv{ki}_k{k}.bias"),
                    Tensor::zeros(vec![w]),
                    false,
                );
                convs.push((cw, cbias));
            }
            let s6 = S6Params::init(
                store,
                &format!("{prefix}.dir{di}.s6"),
                S6Config { inner_dim: cfg.inner_width(), state_dim: cfg.state_dim, d_skip: cfg.d_skip },
                rng,
            );
            dirs.push(DirectionWeights { convs, s6 });
        }
        let inner = cfg.inner_width();
        let ob = 1.0 / ((2 * inner) as f64).sqrt();
        let out_proj_w = store.add(
            format!("{prefix}.out_proj.weight"),
            Tensor::rand_uniform(vec![w, 2 * inner], -ob, ob, rng),
            true,
        );
        let out_proj_b = store.add(format!("{prefix}.out_proj.bias"), Tensor::zeros(vec![w]), false);
        Ok(Self { cfg, in_proj_w, in_proj_b, dirs, out_proj_w, out_proj_b })
    }

    fn dir(&self, which: usize) -> &DirectionWeights {
        if self.cfg.share_directions {
            &self.dirs[0]
        } else {
            &self.dirs[which]
        }
    }

    /// Depthwise causal convs per kernel size along the sequence axis,
    /// merged by sum or channel-concat, then SiLU.
    /// `u` is `[B, S, W]`; output `[B, S, W]` (sum) or `[B, S, |K| W]`.
    fn multi_kernel_aggregate<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        u: Var,
        dir: &DirectionWeights,
    ) -> Result<Var> {
        let width = self.cfg.width();
        let ut = g.transpose12(u)?; // [B, W, S]
        let mut merged: Option<Var> = None;
        for (wk, bk) in &dir.convs {
            let w = g.param(*wk);
            let b = g.param(*bk);
            let conv = g.conv1d(ut, w, Some(b), width, PadMode::Causal)?;
            merged = Some(match (merged, self.cfg.aggregate) {
                (None, _) => conv,
                (Some(acc), Aggregate::Sum) => g.add(acc, conv)?,
                (Some(acc), Aggregate::Concat) => g.concat2(acc, conv, 1)?,
            });
        }
        let agg = g.transpose12(merged.expect("non-empty kernels"))?;
        g.pointwise(agg, Pointwise::Silu)
    }

    /// conv stack -> scan -> gate with silu of the pre-conv chunk.
    fn direction_forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        u: Var,
        dir: &DirectionWeights,
    ) -> Result<Var> {
        let agg = self.multi_kernel_aggregate(g, u, dir)?;
        let scanned = s6_forward(g, agg, &dir.s6, self.cfg.scan_mode)?;
        let mut gate = g.pointwise(u, Pointwise::Silu)?;
        if self.cfg.aggregate == Aggregate::Concat && self.cfg.kernels.len() > 1 {
            gate = g.tile_last(gate, self.cfg.kernels.len())?;
        }
        g.mul(scanned, gate)
    }

    /// in_proj, chunk, flip one chunk, run both directions, re-flip,
    /// concat, out_proj. `u` is `[B, S, W]`; output `[B, S, W]`.
    /// `swap_roles` exchanges which chunk takes the flipped path (used by
    /// the time-reversal symmetry check; a no-op for inference semantics).
    fn bidirectional<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        u: Var,
        swap_roles: bool,
    ) -> Result<Var> {
        let wi = g.param(self.in_proj_w);
        let bi = g.param(self.in_proj_b);
        let two = g.linear(u, wi, Some(bi))?; // [B, S, 2W]
        let (c1, c2) = g.chunk2(two, 2)?;
        let (straight_first, flip_first) = (!swap_roles, swap_roles);

        let res1 = if straight_first {
            self.direction_forward(g, c1, self.dir(0))?
        } else {
            let f = g.flip_axis(c1, 1)?;
            let out = self.direction_forward(g, f, self.dir(1))?;
            g.flip_axis(out, 1)?
        };
        let res2 = if flip_first {
            self.direction_forward(g, c2, self.dir(0))?
        } else {
            let f = g.flip_axis(c2, 1)?;
            let out = self.direction_forward(g, f, self.dir(1))?;
            g.flip_axis(out, 1)?
        };
        let cat = g.concat2(res1, res2, 2)?; // [B, S, 2 * inner]
        let wo = g.param(self.out_proj_w);
        let bo = g.param(self.out_proj_b);
        g.linear(cat, wo, Some(bo))
    }

    /// Time-axis forward: `[B, C, L] -> [B, C, L]`.
    pub fn forward_time<T: Element>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        self.forward_time_internal(g, z, false)
    }

    pub(crate) fn forward_time_internal<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        swap_roles: bool,
    ) -> Result<Var> {
        debug_assert_eq!(self.cfg.axis, BlockAxis::Time);
        let u = g.transpose12(z)?; // [B, L, C]
        let out = self.bidirectional(g, u, swap_roles)?;
        g.transpose12(out)
    }

    /// Channel-axis forward: `[B, C, L] -> [B, C, 1]`.
    ///
    /// Default reading: pool time to `L^a`, then treat the channel axis as
    /// the scan sequence (length C, feature width `L^a`). The gate value
    /// per channel is the mean over the `L^a` features.
    pub fn forward_channel<T: Element>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        debug_assert_eq!(self.cfg.axis, BlockAxis::Channel);
        let (_, _, len) = g.value(z).dims3("cfa")?;
        let la = self.cfg.pooled_len;
        if len < la {
            return Err(invalid("cfa", format!("sequence length {len} < pooled length {la}")));
        }
        let pooled = if len == la { z } else { g.adaptive_avg_pool(z, la)? }; // [B, C, La]
        if self.cfg.cfa_pooled_time {
            // alternative reading: time-axis pipeline on the pooled clip
            let u = g.transpose12(pooled)?; // [B, La, C]
            let out = self.bidirectional(g, u, false)?;
            let back = g.transpose12(out)?; // [B, C, La]
            g.mean_time(back)
        } else {
            // [B, C, La] already is [batch, sequence=C, width=La]
            let out = self.bidirectional(g, pooled, false)?;
            g.mean_time(out)
        }
    }

    /// Dispatch on the configured axis.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        match self.cfg.axis {
            BlockAxis::Time => self.forward_time(g, z),
            BlockAxis::Channel => self.forward_channel(g, z),
        }
    }
}
