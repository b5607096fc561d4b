//! Backbone assembly: embedding, weight-shared recurrent stem, multi-scale
//! branch pyramid, and neck normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Aggregate, BiS6Block, BlockConfig};
use crate::s6::ScanMode;
use crate::tensor::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::ops::{PadMode, Pointwise};
use crate::tensor::{invalid, Element, Result, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Stem blocks use only the temporal path.
    Single,
    /// Temporal path gated by the sigmoid of the channel path.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfaInput {
    /// The channel block reads the temporal block's output (sequential).
    TfaOutput,
    /// The channel block reads the stem block's input (parallel reading).
    BlockInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentSkip {
    /// Iterations chain residually: u_i = Stack(u_{i-1}).
    Chained,
    /// The original input is re-added each pass: u_i = Stack(u_{i-1}) + u_0.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Sum,
    Concat,
}

impl From<AggregateMode> for Aggregate {
    fn from(m: AggregateMode) -> Self {
        match m {
            AggregateMode::Sum => Aggregate::Sum,
            AggregateMode::Concat => Aggregate::Concat,
        }
    }
}

/// Every architectural hyperparameter. Defaults follow the reference
/// configuration (dual structure, one block per module, kernel sets
/// (2,3,4)/(2,4,8), sum aggregation, r = 16).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c_in: usize,
    pub c_emb: usize,
    pub b_e: usize,
    pub b_s: usize,
    pub b_b: usize,
    /// Recurrent iterations of the weight-shared stem stack.
    pub r: usize,
    pub structure: Structure,
    pub k_tfa: Vec<usize>,
    pub k_cfa: Vec<usize>,
    pub aggregate: AggregateMode,
    /// L^a: pooled temporal width inside the channel block.
    pub pooled_len: usize,
    /// State dimension N of every S6 kernel.
    pub state_dim: usize,
    /// Number of halving levels below the base.
    pub pyramid_depth: usize,
    pub include_base_level: bool,
    pub drop_path_rate: f64,
    pub layer_scale_init: f64,
    pub share_directions: bool,
    pub d_skip: bool,
    pub cfa_input: CfaInput,
    pub recurrent_skip: RecurrentSkip,
    pub cfa_pooled_time: bool,
    /// Chunk size for the scan; `None` runs the plain recurrence.
    pub scan_chunk: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_in: 32,
            c_emb: 64,
            b_e: 1,
            b_s: 1,
            b_b: 1,
            r: 16,
            structure: Structure::Dual,
            k_tfa: vec![2, 3, 4],
            k_cfa: vec![2, 4, 8],
            aggregate: AggregateMode::Sum,
            pooled_len: 64,
            state_dim: 16,
            pyramid_depth: 5,
            include_base_level: true,
            drop_path_rate: 0.1,
            layer_scale_init: 1e-4,
            share_directions: false,
            d_skip: true,
            cfa_input: CfaInput::TfaOutput,
            recurrent_skip: RecurrentSkip::Chained,
            cfa_pooled_time: false,
            scan_chunk: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(invalid("config", "r must be >= 1"));
        }
        if self.b_e < 1 || self.b_b < 1 {
            return Err(invalid("config", "b_e and b_b must be >= 1"));
        }
        if self.pyramid_depth < 1 {
            return Err(invalid("config", "pyramid_depth must be >= 1"));
        }
        if self.c_in == 0 || self.c_emb == 0 || self.state_dim == 0 {
            return Err(invalid("config", "widths must be positive"));
        }
        Ok(())
    }

    pub fn scan_mode(&self) -> ScanMode {
        match self.scan_chunk {
            Some(ck) => ScanMode::Chunked(ck),
            None => ScanMode::Sequential,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.pyramid_depth + usize::from(self.include_base_level)
    }

    fn tfa_block_config(&self) -> BlockConfig {
        BlockConfig {
            aggregate: self.aggregate.into(),
            share_directions: self.share_directions,
            d_skip: self.d_skip,
            scan_mode: self.scan_mode(),
            ..BlockConfig::time(self.c_emb, self.k_tfa.clone(), self.state_dim)
        }
    }

    fn cfa_block_config(&self) -> BlockConfig {
        BlockConfig {
            aggregate: self.aggregate.into(),
            share_directions: self.share_directions,
            d_skip: self.d_skip,
            scan_mode: self.scan_mode(),
            cfa_pooled_time: self.cfa_pooled_time,
            ..BlockConfig::channel(self.c_emb, self.k_cfa.clone(), self.state_dim, self.pooled_len)
        }
    }

    /// T-Bi-S6: the single-kernel time block used at every branch level.
    fn branch_block_config(&self) -> BlockConfig {
        BlockConfig {
            share_directions: self.share_directions,
            d_skip: self.d_skip,
            scan_mode: self.scan_mode(),
            ..BlockConfig::time(self.c_emb, vec![4], self.state_dim)
        }
    }
}

/// `(length, stride)` per pyramid level for an input of length `l`.
/// Level d has length ceil(l / 2^d) and stride 2^d.
pub fn pyramid_geometry(l: usize, depth: usize, include_base: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if include_base {
        out.push((l, 1));
    }
    let mut len = l;
    let mut stride = 1;
    for _ in 0..depth {
        len = len.div_ceil(2);
        stride *= 2;
        out.push((len, stride));
    }
    out
}

struct ConvLnRelu {
    conv_w: ParamId,
    conv_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl ConvLnRelu {
    fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        Self {
            conv_w: store.add(
                format!("{prefix}.conv.weight"),
                Tensor::rand_uniform(vec![c_out, c_in, k], -bound, bound, rng),
                true,
            ),
            conv_b: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(vec![c_out]), false),
            ln_g: store.add(format!("{prefix}.ln.gamma"), Tensor::full(vec![c_out], T::one()), false),
            ln_b: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(vec![c_out]), false),
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.conv_w);
        let b = g.param(self.conv_b);
        let conv = g.conv1d(x, w, Some(b), 1, PadMode::Same)?;
        let gamma = g.param(self.ln_g);
        let beta = g.param(self.ln_b);
        let normed = g.layer_norm_channels(conv, gamma, beta, LN_EPS)?;
        g.pointwise(normed, Pointwise::Relu)
    }
}

struct StemBlock {
    tfa: BiS6Block,
    cfa: Option<BiS6Block>,
    ls_gamma: ParamId,
    ls_beta: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    drop_rate: f64,
}

struct BranchBlock {
    t_bis6: BiS6Block,
    ls_gamma: ParamId,
    ls_beta: ParamId,
    drop_rate: f64,
}

struct BranchLevel {
    blocks: Vec<BranchBlock>,
    ln_g: ParamId,
    ln_b: ParamId,
}

/// The full feature extractor. Weights live in the [`ParamStore`] it was
/// initialized into; the struct holds handles plus the config.
pub struct Backbone {
    pub cfg: ModelConfig,
    embed_layers: Vec<ConvLnRelu>,
    stem_blocks: Vec<StemBlock>,
    branch_levels: Vec<BranchLevel>,
    neck_norms: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut embed_layers = Vec::with_capacity(1 + cfg.b_e);
        embed_layers.push(ConvLnRelu::init(store, "embedding.layer0", cfg.c_in, cfg.c_emb, 3, rng));
        for i in 0..cfg.b_e {
            embed_layers.push(ConvLnRelu::init(
                store,
                &format!("embedding.layer{}", i + 1),
                cfg.c_emb,
                cfg.c_emb,
                3,
                rng,
            ));
        }

        // stochastic-depth rates ramp linearly over stem then branch blocks
        let total_blocks = cfg.b_s + cfg.pyramid_depth * cfg.b_b;
        let rate_at = |i: usize| {
            if total_blocks <= 1 {
                0.0
            } else {
                cfg.drop_path_rate * i as f64 / (total_blocks - 1) as f64
            }
        };
        let mut block_idx = 0usize;

        let mut stem_blocks = Vec::with_capacity(cfg.b_s);
        for i in 0..cfg.b_s {
            let prefix = format!("stem.block{i}");
            let tfa = BiS6Block::init(store, &format!("{prefix}.tfa"), cfg.tfa_block_config(), rng)?;
            let cfa = match cfg.structure {
                Structure::Dual => Some(BiS6Block::init(
                    store,
                    &format!("{prefix}.cfa"),
                    cfg.cfa_block_config(),
                    rng,
                )?),
                Structure::Single => None,
            };
            let ls_gamma = store.add(
                format!("{prefix}.scale.gamma"),
                Tensor::full(vec![cfg.c_emb], T::from_f64(cfg.layer_scale_init)),
                false,
            );
            let ls_beta =
                store.add(format!("{prefix}.scale.beta"), Tensor::zeros(vec![cfg.c_emb]), false);
            let ln_g = store.add(
                format!("{prefix}.ln.gamma"),
                Tensor::full(vec![cfg.c_emb], T::one()),
                false,
            );
            let ln_b = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(vec![cfg.c_emb]), false);
            stem_blocks.push(StemBlock {
                tfa,
                cfa,
                ls_gamma,
                ls_beta,
                ln_g,
                ln_b,
                drop_rate: rate_at(block_idx),
            });
            block_idx += 1;
        }

        let mut branch_levels = Vec::with_capacity(cfg.pyramid_depth);
        for d in 0..cfg.pyramid_depth {
            let mut blocks = Vec::with_capacity(cfg.b_b);
            for i in 0..cfg.b_b {
                let prefix = format!("branch.level{d}.block{i}");
                let t_bis6 =
                    BiS6Block::init(store, &format!("{prefix}.tbis6"), cfg.branch_block_config(), rng)?;
                let ls_gamma = store.add(
                    format!("{prefix}.scale.gamma"),
                    Tensor::full(vec![cfg.c_emb], T::from_f64(cfg.layer_scale_init)),
                    false,
                );
                let ls_beta =
                    store.add(format!("{prefix}.scale.beta"), Tensor::zeros(vec![cfg.c_emb]), false);
                blocks.push(BranchBlock { t_bis6, ls_gamma, ls_beta, drop_rate: rate_at(block_idx) });
                block_idx += 1;
            }
            let ln_g = store.add(
                format!("branch.level{d}.ln.gamma"),
                Tensor::full(vec![cfg.c_emb], T::one()),
                false,
            );
            let ln_b =
                store.add(format!("branch.level{d}.ln.beta"), Tensor::zeros(vec![cfg.c_emb]), false);
            branch_levels.push(BranchLevel { blocks, ln_g, ln_b });
        }

        let mut neck_norms = Vec::with_capacity(cfg.num_levels());
        for lv in 0..cfg.num_levels() {
            let ln_g = store.add(
                format!("neck.level{lv}.ln.gamma"),
                Tensor::full(vec![cfg.c_emb], T::one()),
                false,
            );
            let ln_b =
                store.add(format!("neck.level{lv}.ln.beta"), Tensor::zeros(vec![cfg.c_emb]), false);
            neck_norms.push((ln_g, ln_b));
        }

        Ok(Self { cfg: cfg.clone(), embed_layers, stem_blocks, branch_levels, neck_norms })
    }

    /// Embedding: one widening conv then `b_e` same-width convs, each
    /// conv + LN + ReLU. Length is preserved.
    pub fn embed<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut cur = x;
        for layer in &self.embed_layers {
            cur = layer.forward(g, cur)?;
        }
        Ok(cur)
    }

    fn stem_block_forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        blk: &StemBlock,
        u: Var,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let tfa_out = blk.tfa.forward_time(g, u)?;
        let m = match &blk.cfa {
            Some(cfa) => {
                let cfa_in = match self.cfg.cfa_input {
                    CfaInput::TfaOutput => tfa_out,
                    CfaInput::BlockInput => u,
                };
                let raw = cfa.forward_channel(g, cfa_in)?;
                let gate = g.pointwise(raw, Pointwise::Sigmoid)?;
                g.mul_gate(tfa_out, gate)?
            }
            None => tfa_out,
        };
        let gamma = g.param(blk.ls_gamma);
        let beta = g.param(blk.ls_beta);
        let scaled = g.affine_channels(m, gamma, beta)?;
        let dropped = g.drop_path(scaled, blk.drop_rate, rng)?;
        let res = g.add(u, dropped)?;
        let ln_g = g.param(blk.ln_g);
        let ln_b = g.param(blk.ln_b);
        g.layer_norm_channels(res, ln_g, ln_b, LN_EPS)
    }

    /// Apply the stem stack `r` times with the same weights.
    pub fn stem<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut u = z;
        for _ in 0..self.cfg.r {
            for blk in &self.stem_blocks {
                u = self.stem_block_forward(g, blk, u, rng)?;
            }
            if self.cfg.recurrent_skip == RecurrentSkip::Dense && !self.stem_blocks.is_empty() {
                u = g.add(u, z)?;
            }
        }
        Ok(u)
    }

    /// Branch pyramid: optionally the unprocessed base level, then
    /// `pyramid_depth` rounds of blocks + LN + halving max pool.
    pub fn branch<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        rng: &mut impl Rng,
    ) -> Result<Vec<(Var, usize)>> {
        let (_, _, l) = g.value(z).dims3("branch")?;
        if l < (1 << self.cfg.pyramid_depth) {
            return Err(invalid(
                "branch",
                format!("sequence length {l} shorter than 2^{}", self.cfg.pyramid_depth),
            ));
        }
        let mut levels = Vec::with_capacity(self.cfg.num_levels());
        if self.cfg.include_base_level {
            levels.push((z, 1usize));
        }
        let mut cur = z;
        let mut stride = 1usize;
        for level in &self.branch_levels {
            for blk in &level.blocks {
                let m = blk.t_bis6.forward_time(g, cur)?;
                let gamma = g.param(blk.ls_gamma);
                let beta = g.param(blk.ls_beta);
                let scaled = g.affine_channels(m, gamma, beta)?;
                let dropped = g.drop_path(scaled, blk.drop_rate, rng)?;
                cur = g.add(cur, dropped)?;
            }
            let ln_g = g.param(level.ln_g);
            let ln_b = g.param(level.ln_b);
            let normed = g.layer_norm_channels(cur, ln_g, ln_b, LN_EPS)?;
            cur = g.max_pool_k3s2p1(normed)?;
            stride *= 2;
            levels.push((cur, stride));
        }
        Ok(levels)
    }

    /// Per-level layer norm with per-level affine parameters.
    pub fn neck<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        levels: &[(Var, usize)],
    ) -> Result<Vec<(Var, usize)>> {
        let mut out = Vec::with_capacity(levels.len());
        for (i, &(v, stride)) in levels.iter().enumerate() {
            let (ln_g, ln_b) = self.neck_norms[i];
            let gamma = g.param(ln_g);
            let beta = g.param(ln_b);
            out.push((g.layer_norm_channels(v, gamma, beta, LN_EPS)?, stride));
        }
        Ok(out)
    }

    /// Embedding -> stem -> branch -> neck.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<Vec<(Var, usize)>> {
        let z = self.embed(g, x)?;
        let s = self.stem(g, z, rng)?;
        let levels = self.branch(g, s, rng)?;
        self.neck(g, &levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            c_in: 3,
            c_emb: 4,
            state_dim: 2,
            k_tfa: vec![2],
            k_cfa: vec![2],
            pooled_len: 4,
            pyramid_depth: 2,
            r: 1,
            drop_path_rate: 0.0,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::init(&mut store, cfg, &mut rng).unwrap();
        (store, bb)
    }

    #[test]
    fn embed_shape_and_relu_range() {
        let cfg = tiny_cfg();
        let (store, bb) = build(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::rand_uniform(vec![2, 3, 10], -1.0, 1.0, &mut rng));
        let z = bb.embed(&mut g, x).unwrap();
        assert_eq!(g.shape(z), &[2, 4, 10]);
        assert!(g.value(z).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn embed_param_count_delta_for_extra_layer() {
        let cfg1 = tiny_cfg();
        let cfg2 = ModelConfig { b_e: 2, ..tiny_cfg() };
        let (s1, _) = build(&cfg1, 3);
        let (s2, _) = build(&cfg2, 3);
        let embed_count = |s: &ParamStore<f64>| -> usize {
            s.iter()
                .filter(|(_, e)| e.name.starts_with("embedding."))
                .map(|(_, e)| e.value.numel())
                .sum()
        };
        let delta = embed_count(&s2) - embed_count(&s1);
        let c = cfg1.c_emb;
        assert_eq!(delta, c * c * 3 + c + 2 * c, "one extra conv+bias+LN pair");
    }

    #[test]
    fn stem_empty_stack_is_identity() {
        let cfg = ModelConfig { b_s: 0, ..tiny_cfg() };
        let (store, bb) = build(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.input(Tensor::rand_uniform(vec![1, 4, 8], -1.0, 1.0, &mut rng));
        let out = bb.stem(&mut g, z, &mut rng).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn stem_with_zero_scale_reduces_to_repeated_ln() {
        // layer_scale gamma = 0, drop rate 0: StemBlock(u) = LN(u).
        let cfg = ModelConfig { layer_scale_init: 0.0, r: 3, ..tiny_cfg() };
        let (store, bb) = build(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = Tensor::rand_uniform(vec![1, 4, 6], -2.0, 2.0, &mut rng);
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.input(input.clone());
        let out = bb.stem(&mut g, z, &mut rng).unwrap();

        // independent: r-fold LN with unit affine
        let gamma = g.input(Tensor::full(vec![4], 1.0));
        let beta = g.input(Tensor::zeros(vec![4]));
        let mut want = g.input(input);
        for _ in 0..3 {
            want = g.layer_norm_channels(want, gamma, beta, LN_EPS).unwrap();
        }
        let err = g.value(out).max_rel_err(g.value(want));
        assert!(err <= 1e-12, "stem wiring deviates from the residual path: {err}");
    }

    #[test]
    fn pyramid_lengths_and_strides() {
        let got = pyramid_geometry(64, 5, true);
        assert_eq!(
            got,
            vec![(64, 1), (32, 2), (16, 4), (8, 8), (4, 16), (2, 32)],
            "halving contract"
        );
        for l in [63usize, 64, 100] {
            let levels = pyramid_geometry(l, 5, true);
            for (d, &(len, stride)) in levels.iter().enumerate() {
                assert_eq!(stride, 1 << d);
                assert_eq!(len, l.div_ceil(stride), "ceil law for L={l}, d={d}");
            }
        }
    }

    #[test]
    fn branch_matches_geometry_and_rejects_short_inputs() {
        let cfg = ModelConfig { pyramid_depth: 3, ..tiny_cfg() };
        let (store, bb) = build(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.input(Tensor::rand_uniform(vec![1, 4, 21], -1.0, 1.0, &mut rng));
        let levels = bb.branch(&mut g, z, &mut rng).unwrap();
        let want = pyramid_geometry(21, 3, true);
        assert_eq!(levels.len(), want.len());
        for ((v, stride), (wl, ws)) in levels.iter().zip(want) {
            assert_eq!(g.shape(*v), &[1, 4, wl]);
            assert_eq!(*stride, ws);
        }

        let short = g.input(Tensor::zeros(vec![1, 4, 7]));
        assert!(bb.branch(&mut g, short, &mut rng).is_err(), "L=7 < 2^3 must fail");
    }

    #[test]
    fn branch_weights_distinct_per_level() {
        let cfg = ModelConfig { pyramid_depth: 3, ..tiny_cfg() };
        let (store, _) = build(&cfg, 10);
        let per_level: Vec<usize> = (0..3)
            .map(|d| {
                store
                    .iter()
                    .filter(|(_, e)| e.name.starts_with(&format!("branch.level{d}.")))
                    .map(|(_, e)| e.value.numel())
                    .sum()
            })
            .collect();
        assert!(per_level.iter().all(|&n| n > 0));
        assert_eq!(per_level[0], per_level[1]);
        assert_eq!(per_level[1], per_level[2]);
        let total: usize = store
            .iter()
            .filter(|(_, e)| e.name.starts_with("branch."))
            .map(|(_, e)| e.value.numel())
            .sum();
        assert_eq!(total, per_level.iter().sum::<usize>(), "no cross-level sharing");
    }

    #[test]
    fn neck_preserves_shapes_and_is_idempotent_up_to_affine() {
        let cfg = tiny_cfg();
        let (store, bb) = build(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.input(Tensor::rand_uniform(vec![1, 4, 16], -1.0, 1.0, &mut rng));
        let levels = bb.branch(&mut g, z, &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> =
            levels.iter().map(|&(v, _)| g.shape(v).to_vec()).collect();
        let normed = bb.neck(&mut g, &levels).unwrap();
        for (i, &(v, _)) in normed.iter().enumerate() {
            assert_eq!(g.shape(v), &shapes[i][..]);
            // mean over channels ~ 0 at every position (unit affine at init)
            let t = g.value(v);
            let (bsz, ch, len) = (shapes[i][0], shapes[i][1], shapes[i][2]);
            for b in 0..bsz {
                for l in 0..len {
                    let mean: f64 = (0..ch).map(|cc| t.at(&[b, cc, l])).sum::<f64>() / ch as f64;
                    assert!(mean.abs() < 1e-9);
                }
            }
        }
        // Re-normalizing changes values only through the eps regularizer
        // (rescale by ~1 + eps(1 - 1/v)/2), far below any real change.
        let twice = bb.neck(&mut g, &normed).unwrap();
        for (&(a, _), &(b, _)) in normed.iter().zip(&twice) {
            let err = g.value(a).max_rel_err(g.value(b));
            assert!(err <= 1e-3, "double normalization changed values: {err}");
        }
    }

    #[test]
    fn recurrent_iterations_do_not_change_parameter_footprint() {
        let names = |r: usize| -> Vec<(String, usize)> {
            let (store, _) = build(&ModelConfig { r, ..tiny_cfg() }, 13);
            store.iter().map(|(_, e)| (e.name.clone(), e.value.numel())).collect()
        };
        let base = names(1);
        for r in [2usize, 4, 8, 16, 32] {
            assert_eq!(names(r), base, "r={r} must not change the parameter footprint");
        }
    }

    #[test]
    fn dual_minus_single_equals_cfa_parameters() {
        let dual = build(&ModelConfig { structure: Structure::Dual, ..tiny_cfg() }, 14).0;
        let single = build(&ModelConfig { structure: Structure::Single, ..tiny_cfg() }, 14).0;
        let cfa: usize = dual
            .iter()
            .filter(|(_, e)| e.name.contains(".cfa."))
            .map(|(_, e)| e.value.numel())
            .sum();
        assert!(cfa > 0);
        assert_eq!(dual.num_scalars() - single.num_scalars(), cfa);
    }

    #[test]
    fn share_directions_strictly_reduces_parameters() {
        let shared = build(&ModelConfig { share_directions: true, ..tiny_cfg() }, 15).0;
        let full = build(&ModelConfig { share_directions: false, ..tiny_cfg() }, 15).0;
        assert!(shared.num_scalars() < full.num_scalars());
        // sharing removes exactly the dir1 bundles
        let dir1: usize = full
            .iter()
            .filter(|(_, e)| e.name.contains(".dir1."))
            .map(|(_, e)| e.value.numel())
            .sum();
        assert_eq!(full.num_scalars() - shared.num_scalars(), dir1);
    }

    #[test]
    fn kernel_set_monotonicity_in_sum_mode() {
        let base = build(&tiny_cfg(), 16).0;
        let bigger = build(&ModelConfig { k_tfa: vec![2, 5], ..tiny_cfg() }, 16).0;
        let delta = bigger.num_scalars() - base.num_scalars();
        let c = 4usize;
        // one extra depthwise conv (C*k weights + C bias) in each of the
        // two directions of the one TFA block
        assert_eq!(delta, 2 * (c * 5 + c));
    }

    #[test]
    fn full_forward_shapes() {
        let cfg = tiny_cfg();
        let (store, bb) = build(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::rand_uniform(vec![1, 3, 12], -1.0, 1.0, &mut rng));
        let levels = bb.forward(&mut g, x, &mut rng).unwrap();
        let want = pyramid_geometry(12, 2, true);
        assert_eq!(levels.len(), want.len());
        for (&(v, s), (wl, ws)) in levels.iter().zip(want) {
            assert_eq!(g.shape(v), &[1, 4, wl]);
            assert_eq!(s, ws);
        }
    }
}
