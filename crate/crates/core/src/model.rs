//! The trajectory encoder.
//!
//! A sub-view encoder (linear, three `conv → batch norm → leaky ReLU` blocks,
//! linear) turns per-point features into `m = n − 6` sub-view embeddings. A
//! pre-norm attention block (RMSNorm, multi-head self-attention with rotary
//! positions, residual, RMSNorm, SwiGLU feed-forward, residual) mixes them,
//! and a masked average pools the result into one `d`-dimensional vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Mask, NormMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{augment_features, normalize_features, FeatureMatrix, NormStats, Trajectory, FEATURES};
use crate::scalar::Scalar;

/// Number of stacked valid convolutions in the sub-view encoder.
pub const CONV_BLOCKS: usize = 3;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub rope_base: f64,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(128, 8, 1).expect("default config is valid")
    }
}

/// `8d/3` rounded up to a multiple of 8.
pub fn ffn_hidden_for(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

impl ModelConfig {
    pub fn new(d: usize, heads: usize, layers: usize) -> Result<Self> {
        let cfg = Self {
            d,
            heads,
            layers,
            kernel: 3,
            leaky_slope: 0.01,
            rope_base: 10_000.0,
            ffn_hidden: ffn_hidden_for(d),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.ffn_hidden == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.kernel < 1 {
            return bad("kernel must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `1/sqrt(d/h)`
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// Shortest trajectory the encoder accepts.
    pub fn min_points(&self) -> usize {
        CONV_BLOCKS * (self.kernel - 1) + 1
    }

    /// Sub-view count for a trajectory of `n` points.
    pub fn subviews(&self, n: usize) -> usize {
        n.saturating_sub(CONV_BLOCKS * (self.kernel - 1))
    }

    /// Closed-form parameter count of one attention block.
    pub fn block_param_count(&self) -> usize {
        let (d, h) = (self.d, self.heads);
        h * 3 * d * (d / h) + d * d + 2 * d + 3 * d * self.ffn_hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunning<T> {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        }
    }

    fn update(&mut self, s: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&s.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&s.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SvIds {
    lin_in_w: ParamId,
    conv: Vec<ParamId>,
    bn_gamma: Vec<ParamId>,
    bn_beta: Vec<ParamId>,
    lin_out_w: ParamId,
    lin_out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalized features of several trajectories, right-padded to a common
/// length: `features` has shape `(B, L, 7)`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub features: Tensor<T>,
    pub mask: Mask,
}

impl<T: Scalar> Batch<T> {
    pub fn from_features(feats: &[&FeatureMatrix]) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mask = Mask::from_lens(feats.iter().map(|f| f.len()).collect());
        let l = mask.max_len();
        let mut data = vec![T::zero(); feats.len() * l * FEATURES];
        for (b, f) in feats.iter().enumerate() {
            for (t, row) in f.rows.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    data[(b * l + t) * FEATURES + c] = T::from_f64(v);
                }
            }
        }
        Ok(Self {
            features: Tensor::new(&[feats.len(), l, FEATURES], data)?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.batch() == 0
    }
}

/// Output of a forward pass.
pub struct Forward<T> {
    /// `(B, d)` trajectory embeddings.
    pub embeddings: Var,
    /// Graph leaves of the parameters, in store order.
    pub params: Vec<Var>,
    /// Batch-norm statistics observed in train mode (empty in eval mode).
    pub bn_stats: Vec<BatchStats<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    bn: Vec<BnRunning<T>>,
    sv: SvIds,
    blocks: Vec<BlockIds>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: weights uniform in `±1/sqrt(fan_in)`, biases zero, norm
    /// gains one, batch-norm affine `(1, 0)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, k, f) = (config.d, config.kernel, config.ffn_hidden);
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect())
                .expect("shape matches data")
        };
        let sv = SvIds {
            lin_in_w: params.add("sv.lin_in.w".into(), uniform(&[FEATURES, d], FEATURES)),
            conv: (0..CONV_BLOCKS)
                .map(|i| params.add(format!("sv.conv{i}.w"), uniform(&[k, d, d], k * d)))
                .collect(),
            bn_gamma: (0..CONV_BLOCKS)
                .map(|i| params.add(format!("sv.bn{i}.gamma"), Tensor::full(&[d], T::one())))
                .collect(),
            bn_beta: (0..CONV_BLOCKS)
                .map(|i| params.add(format!("sv.bn{i}.beta"), Tensor::zeros(&[d])))
                .collect(),
            lin_out_w: params.add("sv.lin_out.w".into(), uniform(&[d, d], d)),
            lin_out_b: params.add("sv.lin_out.b".into(), Tensor::zeros(&[d])),
        };
        let blocks = (0..config.layers)
            .map(|l| BlockIds {
                attn_norm: params.add(format!("enc{l}.attn_norm.g"), Tensor::full(&[d], T::one())),
                wq: params.add(format!("enc{l}.attn.wq"), uniform(&[d, d], d)),
                wk: params.add(format!("enc{l}.attn.wk"), uniform(&[d, d], d)),
                wv: params.add(format!("enc{l}.attn.wv"), uniform(&[d, d], d)),
                wo: params.add(format!("enc{l}.attn.wo"), uniform(&[d, d], d)),
                ffn_norm: params.add(format!("enc{l}.ffn_norm.g"), Tensor::full(&[d], T::one())),
                w_gate: params.add(format!("enc{l}.ffn.w_gate"), uniform(&[d, f], d)),
                w_up: params.add(format!("enc{l}.ffn.w_up"), uniform(&[d, f], d)),
                w_down: params.add(format!("enc{l}.ffn.w_down"), uniform(&[f, d], f)),
            })
            .collect();
        Ok(Self {
            bn: (0..CONV_BLOCKS).map(|_| BnRunning::new(d)).collect(),
            config,
            params,
            sv,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_running(&self) -> &[BnRunning<T>] {
        &self.bn
    }

    pub fn bn_running_mut(&mut self) -> &mut [BnRunning<T>] {
        &mut self.bn
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats<T>]) {
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s, BN_MOMENTUM);
        }
    }

    /// Same model with another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            bn: self
                .bn
                .iter()
                .map(|r| BnRunning {
                    mean: r.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            sv: self.sv.clone(),
            blocks: self.blocks.clone(),
        }
    }

    /// Replaces parameter values and running statistics; shapes must match.
    pub fn load_state(&mut self, tensors: Vec<Tensor<T>>, bn: Vec<BnRunning<T>>) -> Result<()> {
        if tensors.len() != self.params.len() || bn.len() != self.bn.len() {
            return Err(Error::Shape("parameter set does not match the model layout".into()));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.params.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.params.names[i],
                    t.shape(),
                    self.params.tensors[i].shape()
                )));
            }
        }
        let d = self.config.d;
        if bn.iter().any(|r| r.mean.len() != d || r.var.len() != d) {
            return Err(Error::Shape("batch-norm statistics do not match d".into()));
        }
        self.params.tensors = tensors;
        self.bn = bn;
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.tensors.iter().map(|t| g.input(t.clone())).collect()
    }

    /// Sub-view encoder: `(B, n_max, 7)` → `(B, n_max − 6, d)` plus the mask
    /// of sub-views whose receptive field lies inside the trajectory.
    pub fn svenc_forward(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        batch: &Batch<T>,
        mode: Mode,
    ) -> Result<(Var, Mask, Vec<BatchStats<T>>)> {
        let min = self.config.min_points();
        if let Some(&short) = batch.mask.lens().iter().find(|&&l| l < min) {
            return Err(Error::TooShort {
                id: String::new(),
                len: short,
                min,
            });
        }
        let sv = &self.sv;
        let x = g.constant(batch.features.clone());
        // No input bias: the first batch norm would cancel it.
        let mut h = g.matmul(x, p[sv.lin_in_w.0])?;
        let mut mask = batch.mask.clone();
        let mut stats = Vec::new();
        for i in 0..CONV_BLOCKS {
            h = g.conv1d_valid(h, p[sv.conv[i].0])?;
            mask = mask.after_valid_conv(self.config.kernel);
            let norm_mode = match mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => NormMode::Eval {
                    mean: &self.bn[i].mean,
                    var: &self.bn[i].var,
                },
            };
            let (normed, s) = g.batch_norm_masked(h, &mask, p[sv.bn_gamma[i].0], p[sv.bn_beta[i].0], norm_mode)?;
            stats.extend(s);
            h = g.leaky_relu(normed, self.config.leaky_slope);
        }
        let h = g.matmul(h, p[sv.lin_out_w.0])?;
        let h = g.add(h, p[sv.lin_out_b.0])?;
        Ok((h, mask, stats))
    }

    /// Multi-head self-attention of block `layer` over `x: (B, m, d)`, rotary
    /// positions `offset..offset+m`, padded keys excluded. No causal mask.
    pub fn mhsa_forward(&self, g: &mut Graph<T>, p: &[Var], layer: usize, x: Var, mask: &Mask, offset: usize) -> Result<Var> {
        let ids = &self.blocks[layer];
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let m = g.shape(x)[1];
        let positions: Vec<f64> = (0..m).map(|t| (t + offset) as f64).collect();
        let q = g.matmul(x, p[ids.wq.0])?;
        let k = g.matmul(x, p[ids.wk.0])?;
        let v = g.matmul(x, p[ids.wv.0])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for j in 0..cfg.heads {
            let qj = g.slice_last(q, j * hd, (j + 1) * hd)?;
            let kj = g.slice_last(k, j * hd, (j + 1) * hd)?;
            let vj = g.slice_last(v, j * hd, (j + 1) * hd)?;
            let qj = g.rope(qj, &positions, cfg.rope_base)?;
            let kj = g.rope(kj, &positions, cfg.rope_base)?;
            let kt = g.transpose_last_two(kj)?;
            let scores = g.matmul(qj, kt)?;
            let scores = g.scale(scores, cfg.attn_scale());
            let attn = g.softmax_masked(scores, mask)?;
            heads.push(g.matmul(attn, vj)?);
        }
        let cat = g.concat_last(&heads)?;
        g.matmul(cat, p[ids.wo.0])
    }

    /// `W_down(silu(W_gate x) ⊙ W_up x)`
    fn ffn_forward(&self, g: &mut Graph<T>, p: &[Var], layer: usize, x: Var) -> Result<Var> {
        let ids = &self.blocks[layer];
        let gate = g.matmul(x, p[ids.w_gate.0])?;
        let gate = g.silu(gate);
        let up = g.matmul(x, p[ids.w_up.0])?;
        let h = g.mul(gate, up)?;
        g.matmul(h, p[ids.w_down.0])
    }

    /// Attention blocks and masked average pooling: `(B, m, d)` → `(B, d)`.
    pub fn trajenc_forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, mask: &Mask) -> Result<Var> {
        let mut h = x;
        for layer in 0..self.config.layers {
            let ids = &self.blocks[layer];
            let n1 = g.rms_norm(h, p[ids.attn_norm.0])?;
            let a = self.mhsa_forward(g, p, layer, n1, mask, 0)?;
            let out1 = g.add(h, a)?;
            let n2 = g.rms_norm(out1, p[ids.ffn_norm.0])?;
            let f = self.ffn_forward(g, p, layer, n2)?;
            h = g.add(out1, f)?;
        }
        g.masked_mean(h, mask)
    }

    /// Full forward pass. In train mode batch norm uses batch statistics and
    /// reports them; the caller decides whether to fold them into the model.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode) -> Result<Forward<T>> {
        let params = self.bind(g);
        let (embeddings, bn_stats) = self.forward_with(g, &params, batch, mode)?;
        Ok(Forward {
            embeddings,
            params,
            bn_stats,
        })
    }

    /// Forward pass over caller-provided parameter leaves.
    pub fn forward_with(&self, g: &mut Graph<T>, p: &[Var], batch: &Batch<T>, mode: Mode) -> Result<(Var, Vec<BatchStats<T>>)> {
        if p.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} parameter leaves, got {}", self.params.len(), p.len())));
        }
        let (x, mask, stats) = self.svenc_forward(g, p, batch, mode)?;
        Ok((self.trajenc_forward(g, p, x, &mask)?, stats))
    }

    /// Eval-mode embeddings of normalized feature matrices, processed in
    /// chunks of `chunk` trajectories.
    pub fn embed_features(&self, feats: &[&FeatureMatrix], chunk: usize) -> Result<Vec<Vec<T>>> {
        let d = self.config.d;
        let mut out = Vec::with_capacity(feats.len());
        for part in feats.chunks(chunk.max(1)) {
            let batch = Batch::from_features(part)?;
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &batch, Mode::Eval)?;
            out.extend(g.value(fwd.embeddings).data().chunks(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }
}

/// Features the model consumes for one planar trajectory.
pub fn prepare_features(t: &Trajectory, stats: &NormStats) -> Result<FeatureMatrix> {
    Ok(normalize_features(&augment_features(t)?, stats))
}

/// Eval-mode embedding of one planar trajectory.
pub fn encode<T: Scalar>(t: &Trajectory, model: &Model<T>, stats: &NormStats) -> Result<Vec<T>> {
    let min = model.config().min_points();
    if t.len() < min {
        return Err(Error::TooShort {
            id: t.id.clone(),
            len: t.len(),
            min,
        });
    }
    let f = prepare_features(t, stats)?;
    Ok(model.embed_features(&[&f], 1)?.remove(0))
}

/// Eval-mode embeddings of many planar trajectories, in input order.
pub fn encode_all<T: Scalar>(trajs: &[Trajectory], model: &Model<T>, stats: &NormStats, chunk: usize) -> Result<Vec<Vec<T>>> {
    let min = model.config().min_points();
    if let Some(t) = trajs.iter().find(|t| t.len() < min) {
        return Err(Error::TooShort {
            id: t.id.clone(),
            len: t.len(),
            min,
        });
    }
    let feats = trajs
        .iter()
        .map(|t| prepare_features(t, stats))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    model.embed_features(&refs, chunk)
}
