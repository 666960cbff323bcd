//! Full ViT assembly: patch embedding, positional embedding, stacked blocks
//! with per-layer pruning ratios, and the classification head.
//!
//! Block order is pre-norm: `x + attn(ln1(x))` then `x + mlp(ln2(x))`, with
//! the MLP operating on the already-reduced token set. The head reads the
//! class token, or a size-weighted mean over all tokens for models without
//! one.

use crate::attention::{
    vomix_attention_block, AttentionLayerWeights, AttentionProjections, LayerTrace, PhaseOps,
    TokenState,
};
use crate::error::{Error, Result};
use crate::opcount;
use crate::schedule::PruneSchedule;
use crate::strategy::StrategyConfig;
use crate::tensor::{self, Matrix};
use crate::weights::{manifest, Tensor, WeightStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub classes: usize,
    pub class_token: bool,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide embed dim {}",
                self.heads, self.dim
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_count(&self) -> usize {
        self.patch_count() + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f32 * self.mlp_ratio) as usize
    }

    /// Protected token indices: the class token when the model declares one.
    pub fn default_protected(&self) -> Vec<usize> {
        if self.class_token {
            vec![0]
        } else {
            Vec::new()
        }
    }

    /// Built-in model shapes at the usual resolutions and patch sizes.
    pub fn preset(name: &str) -> Option<ViTConfig> {
        let base = |image_size, patch_size, depth, dim, heads| ViTConfig {
            image_size,
            patch_size,
            channels: 3,
            depth,
            dim,
            heads,
            mlp_ratio: 4.0,
            classes: 1000,
            class_token: true,
        };
        Some(match name {
            "vit-s16-224" => base(224, 16, 12, 384, 6),
            "vit-b16-224" => base(224, 16, 12, 768, 12),
            "vit-l16-224" => base(224, 16, 24, 1024, 16),
            "vit-h14-224" => base(224, 14, 32, 1280, 16),
            "vit-b16-384" => base(384, 16, 12, 768, 12),
            "vit-l16-512" => base(512, 16, 24, 1024, 16),
            "vit-h14-518" => base(518, 14, 32, 1280, 16),
            "vit-tiny" => ViTConfig {
                classes: 10,
                ..base(32, 8, 4, 64, 4)
            },
            _ => return None,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "vit-s16-224",
            "vit-b16-224",
            "vit-l16-224",
            "vit-h14-224",
            "vit-b16-384",
            "vit-l16-512",
            "vit-h14-518",
            "vit-tiny",
        ]
    }
}

/// Per-channel normalization applied when an image is converted to a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Strategy spellings picked up from a config file; CLI flags override
/// them, unset axes fall back to the defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrategyKeys {
    pub selection: Option<String>,
    pub fanout: Option<String>,
    pub feature: Option<String>,
    pub metric: Option<String>,
    pub query_mix: Option<String>,
    pub attn_mix: Option<String>,
}

/// Parses the key=value model/normalization config format. Lines starting
/// with `#` are comments. Required keys: image_size, patch_size, depth,
/// dim, heads. Optional: channels (3), mlp_ratio (4), classes (1000),
/// class_token (true), mean (0.5,0.5,0.5), std (0.5,0.5,0.5), and the
/// strategy axes selection/fanout/feature/metric/query_mix/attn_mix.
pub fn parse_config_str(text: &str) -> Result<(ViTConfig, Normalization, StrategyKeys)> {
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {} is not key=value", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let req_usize = |key: &str| -> Result<usize> {
        map.get(key)
            .ok_or_else(|| Error::Config(format!("config missing key \"{key}\"")))?
            .parse()
            .map_err(|_| Error::Config(format!("config key \"{key}\" is not an integer")))
    };
    let opt_usize = |key: &str, default: usize| -> Result<usize> {
        map.get(key).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| Error::Config(format!("config key \"{key}\" is not an integer")))
        })
    };
    let triple = |key: &str, default: [f32; 3]| -> Result<[f32; 3]> {
        match map.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<f32> = v
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("config key \"{key}\" is not a,b,c")))?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "config key \"{key}\" needs three comma-separated values"
                    )));
                }
                Ok([parts[0], parts[1], parts[2]])
            }
        }
    };
    let cfg = ViTConfig {
        image_size: req_usize("image_size")?,
        patch_size: req_usize("patch_size")?,
        channels: opt_usize("channels", 3)?,
        depth: req_usize("depth")?,
        dim: req_usize("dim")?,
        heads: req_usize("heads")?,
        mlp_ratio: map.get("mlp_ratio").map_or(Ok(4.0), |v| {
            v.parse()
                .map_err(|_| Error::Config("config key \"mlp_ratio\" is not a number".into()))
        })?,
        classes: opt_usize("classes", 1000)?,
        class_token: map.get("class_token").map_or(Ok(true), |v| match v.as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Config(format!(
                "config key \"class_token\" must be true/false, got \"{other}\""
            ))),
        })?,
    };
    cfg.validate()?;
    let norm = Normalization {
        mean: triple("mean", [0.5; 3])?,
        std: triple("std", [0.5; 3])?,
    };
    let strategy = StrategyKeys {
        selection: map.get("selection").cloned(),
        fanout: map.get("fanout").cloned(),
        feature: map.get("feature").cloned(),
        metric: map.get("metric").cloned(),
        query_mix: map.get("query_mix").cloned(),
        attn_mix: map.get("attn_mix").cloned(),
    };
    Ok((cfg, norm, strategy))
}

/// Normalized image, interleaved channels, row-major.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    /// Converts 8-bit interleaved RGB to a normalized tensor:
    /// `(v/255 - mean) / std` per channel.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8], norm: &Normalization) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        let data = bytes
            .chunks_exact(3)
            .flat_map(|px| {
                (0..3).map(move |c| (px[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c])
            })
            .collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub attn: AttentionLayerWeights,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub mlp_up_weight: Matrix,
    pub mlp_up_bias: Vec<f32>,
    pub mlp_down_weight: Matrix,
    pub mlp_down_bias: Vec<f32>,
}

/// Model weights in matrix form, validated against a configuration.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub patch_weight: Matrix,
    pub patch_bias: Vec<f32>,
    pub cls_token: Option<Vec<f32>>,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Vec<f32>,
    pub final_beta: Vec<f32>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f32>,
}

impl ModelWeights {
    /// Validates the store against the configuration's manifest and builds
    /// the matrix views. Missing tensors and shape disagreements get
    /// distinct errors.
    pub fn from_store(cfg: &ViTConfig, store: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        let fetch = |name: &str, dims: &[u64]| -> Result<&Tensor> {
            let t = store.get(name).ok_or_else(|| Error::IncompleteWeights {
                missing: name.to_string(),
            })?;
            if t.dims != dims {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: dims.to_vec(),
                    got: t.dims.clone(),
                });
            }
            Ok(t)
        };
        let matrix = |t: &Tensor| -> Matrix {
            let (r, c) = (t.dims[0] as usize, t.dims[1] as usize);
            Matrix::from_vec(r, c, t.data.clone()).expect("validated dims")
        };

        // Walk the manifest so every required tensor is checked.
        for (name, dims) in manifest(cfg) {
            fetch(&name, &dims)?;
        }

        let d = cfg.dim as u64;
        let n = cfg.token_count() as u64;
        let hidden = cfg.mlp_hidden() as u64;
        let pd = cfg.patch_dim() as u64;
        let vec_of = |name: &str, len: u64| -> Result<Vec<f32>> {
            Ok(fetch(name, &[len])?.data.clone())
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockWeights {
                attn: AttentionLayerWeights {
                    ln_gamma: vec_of(&p("ln1.gamma"), d)?,
                    ln_beta: vec_of(&p("ln1.beta"), d)?,
                    qkv_weight: matrix(fetch(&p("qkv.weight"), &[d, 3 * d])?),
                    qkv_bias: vec_of(&p("qkv.bias"), 3 * d)?,
                    out_weight: matrix(fetch(&p("attn_out.weight"), &[d, d])?),
                    out_bias: vec_of(&p("attn_out.bias"), d)?,
                },
                ln2_gamma: vec_of(&p("ln2.gamma"), d)?,
                ln2_beta: vec_of(&p("ln2.beta"), d)?,
                mlp_up_weight: matrix(fetch(&p("mlp_up.weight"), &[d, hidden])?),
                mlp_up_bias: vec_of(&p("mlp_up.bias"), hidden)?,
                mlp_down_weight: matrix(fetch(&p("mlp_down.weight"), &[hidden, d])?),
                mlp_down_bias: vec_of(&p("mlp_down.bias"), d)?,
            });
        }
        Ok(ModelWeights {
            patch_weight: matrix(fetch("patch_embed.weight", &[pd, d])?),
            patch_bias: vec_of("patch_embed.bias", d)?,
            cls_token: if cfg.class_token {
                Some(vec_of("cls_token", d)?)
            } else {
                None
            },
            pos_embed: matrix(fetch("pos_embed", &[n, d])?),
            blocks,
            final_gamma: vec_of("final_norm.gamma", d)?,
            final_beta: vec_of("final_norm.beta", d)?,
            head_weight: matrix(fetch("head.weight", &[d, cfg.classes as u64])?),
            head_bias: vec_of("head.bias", cfg.classes as u64)?,
        })
    }
}

/// Non-overlapping patches, flattened row-major with interleaved channels,
/// linearly projected; class token prepended when configured; positional
/// embeddings added; every size starts at 1.
pub fn patch_embed(img: &ImageTensor, w: &ModelWeights, cfg: &ViTConfig) -> Result<TokenState> {
    if img.width != cfg.image_size || img.height != cfg.image_size || img.channels != cfg.channels
    {
        return Err(Error::Config(format!(
            "image {}x{}x{} does not match configured {}x{}x{}",
            img.width, img.height, img.channels, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let grid = cfg.grid();
    let p = cfg.patch_size;
    let c = cfg.channels;
    let pd = cfg.patch_dim();
    let mut patches = Matrix::zeros(cfg.patch_count(), pd);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row_mut(gy * grid + gx);
            let mut out = 0;
            for py in 0..p {
                let y = gy * p + py;
                let x0 = (y * img.width + gx * p) * c;
                let src = &img.data[x0..x0 + p * c];
                row[out..out + p * c].copy_from_slice(src);
                out += p * c;
            }
        }
    }
    let projected = tensor::linear(&patches, &w.patch_weight, &w.patch_bias)?;
    let n = cfg.token_count();
    let mut x = Matrix::zeros(n, cfg.dim);
    let mut row0 = 0;
    if let Some(cls) = &w.cls_token {
        x.row_mut(0).copy_from_slice(cls);
        row0 = 1;
    }
    for i in 0..cfg.patch_count() {
        x.row_mut(row0 + i).copy_from_slice(projected.row(i));
    }
    for i in 0..n {
        for (o, &pe) in x.row_mut(i).iter_mut().zip(w.pos_embed.row(i)) {
            *o += pe;
        }
    }
    Ok(TokenState::new(x))
}

/// Which attention path the forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineMode {
    /// Standard ViT blocks; the schedule must be all zeros.
    Vanilla,
    /// Vote&Mix blocks; similarity and voting run in every layer, including
    /// layers with ratio 0.
    VoMix,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: EngineMode,
    pub strategy: StrategyConfig,
    /// Token indices that are never pruned.
    pub protected: Vec<usize>,
    /// Keep mixture weights and size vectors in the traces (needed for
    /// provenance tracking; costs O(N^2) memory per layer).
    pub collect_trace: bool,
}

impl ForwardOptions {
    pub fn vomix(cfg: &ViTConfig) -> Self {
        Self {
            mode: EngineMode::VoMix,
            strategy: StrategyConfig::default(),
            protected: cfg.default_protected(),
            collect_trace: false,
        }
    }

    pub fn vanilla() -> Self {
        Self {
            mode: EngineMode::Vanilla,
            strategy: StrategyConfig::default(),
            protected: Vec::new(),
            collect_trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Vec<f32>,
    pub traces: Vec<LayerTrace>,
    /// Token count before each layer plus the final count (depth+1 entries).
    pub trajectory: Vec<usize>,
    /// Multiplies executed by this pass (thread-local instrumentation).
    pub mac_count: u64,
}

/// Standard pre-norm attention block: `x + proj(attn(ln(x)))`. Kept as an
/// independent route from the Vote&Mix block so the two can check each
/// other at ratio 0.
pub fn vanilla_attention_block(
    x: &Matrix,
    w: &AttentionLayerWeights,
    heads: usize,
) -> Result<Matrix> {
    let d = x.cols();
    let dh = d / heads;
    let n = x.rows();
    let normed = tensor::layer_norm(x, &w.ln_gamma, &w.ln_beta, tensor::LAYER_NORM_EPS)?;
    let qkv = tensor::linear(&normed, &w.qkv_weight, &w.qkv_bias)?;
    let proj = AttentionProjections {
        q: qkv.slice_cols(0, d),
        k: qkv.slice_cols(d, 2 * d),
        v: qkv.slice_cols(2 * d, 3 * d),
        heads,
    };
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut logits = Matrix::zeros(n, n);
    for h in 0..heads {
        let off = h * dh;
        opcount::add((n * n * dh + n * dh) as u64);
        for i in 0..n {
            // Scale the query first; the Vote&Mix route scales the logit.
            let qrow: Vec<f32> = proj.q.row(i)[off..off + dh]
                .iter()
                .map(|&v| v * scale)
                .collect();
            for j in 0..n {
                let mut acc = 0.0f32;
                for (a, b) in qrow.iter().zip(&proj.k.row(j)[off..off + dh]) {
                    acc += a * b;
                }
                logits.set(i, j, acc);
            }
        }
        tensor::row_softmax_in_place(&mut logits)?;
        opcount::add((n * n * dh) as u64);
        for i in 0..n {
            let orow = &mut out.row_mut(i)[off..off + dh];
            for j in 0..n {
                let p = logits.get(i, j);
                for (o, &v) in orow.iter_mut().zip(&proj.v.row(j)[off..off + dh]) {
                    *o += p * v;
                }
            }
        }
    }
    let mut res = tensor::linear(&out, &w.out_weight, &w.out_bias)?;
    for (o, &xi) in res.data_mut().iter_mut().zip(x.data()) {
        *o += xi;
    }
    Ok(res)
}

fn mlp_sub_block(x: &Matrix, bw: &BlockWeights) -> Result<Matrix> {
    let normed = tensor::layer_norm(x, &bw.ln2_gamma, &bw.ln2_beta, tensor::LAYER_NORM_EPS)?;
    let mut up = tensor::linear(&normed, &bw.mlp_up_weight, &bw.mlp_up_bias)?;
    tensor::gelu_in_place(&mut up);
    let mut down = tensor::linear(&up, &bw.mlp_down_weight, &bw.mlp_down_bias)?;
    for (o, &xi) in down.data_mut().iter_mut().zip(x.data()) {
        *o += xi;
    }
    Ok(down)
}

/// Runs the full stack of blocks on an embedded token state.
pub fn forward_state(
    state: TokenState,
    w: &ModelWeights,
    cfg: &ViTConfig,
    sched: &PruneSchedule,
    opts: &ForwardOptions,
) -> Result<ForwardResult> {
    cfg.validate()?;
    if sched.depth() != cfg.depth {
        return Err(Error::Config(format!(
            "schedule has {} layers, model has {}",
            sched.depth(),
            cfg.depth
        )));
    }
    if opts.mode == EngineMode::Vanilla && !sched.is_vanilla() {
        return Err(Error::Config(
            "vanilla engine cannot run a pruning schedule".into(),
        ));
    }
    let start_macs = opcount::total();
    let mut state = state;
    let mut traces = Vec::with_capacity(cfg.depth);
    let mut trajectory = Vec::with_capacity(cfg.depth + 1);
    trajectory.push(state.n());

    for (l, bw) in w.blocks.iter().enumerate() {
        let ratio = sched.ratios()[l];
        let mut trace = match opts.mode {
            EngineMode::VoMix => {
                let (next, trace) = vomix_attention_block(
                    &state,
                    &bw.attn,
                    cfg.heads,
                    ratio,
                    &opts.strategy,
                    &opts.protected,
                    opts.collect_trace,
                )?;
                state = next;
                trace
            }
            EngineMode::Vanilla => {
                let before = opcount::total();
                let x = vanilla_attention_block(&state.x, &bw.attn, cfg.heads)?;
                let n = x.rows();
                state = TokenState {
                    x,
                    sizes: state.sizes,
                    layer: state.layer + 1,
                };
                LayerTrace {
                    layer: l,
                    n_in: n,
                    n_out: n,
                    ratio: 0.0,
                    pruned: Vec::new(),
                    retained: (0..n).collect(),
                    mix_weights: None,
                    sizes_before: None,
                    sizes_after: None,
                    mass_conserved: true,
                    phase_ops: PhaseOps {
                        attention: opcount::total() - before,
                        ..PhaseOps::default()
                    },
                }
            }
        };
        let before_mlp = opcount::total();
        state.x = mlp_sub_block(&state.x, bw)?;
        trace.phase_ops.mlp = opcount::total() - before_mlp;
        trajectory.push(state.n());
        traces.push(trace);
    }

    let normed = tensor::layer_norm(&state.x, &w.final_gamma, &w.final_beta, tensor::LAYER_NORM_EPS)?;
    let pooled: Vec<f32> = if cfg.class_token {
        normed.row(0).to_vec()
    } else {
        // Tokens carry unequal mass after mixing; weight by size share.
        let total: f32 = state.sizes.iter().sum();
        let inv = 1.0 / total;
        opcount::add((state.n() * (cfg.dim + 1)) as u64);
        let mut acc = vec![0.0f32; cfg.dim];
        for i in 0..state.n() {
            let wgt = state.sizes[i] * inv;
            for (a, &v) in acc.iter_mut().zip(normed.row(i)) {
                *a += wgt * v;
            }
        }
        acc
    };
    let pooled_m = Matrix::from_vec(1, cfg.dim, pooled)?;
    let logits = tensor::linear(&pooled_m, &w.head_weight, &w.head_bias)?;

    Ok(ForwardResult {
        logits: logits.into_data(),
        traces,
        trajectory,
        mac_count: opcount::total() - start_macs,
    })
}

/// Embeds an image and runs the block stack.
pub fn forward_image(
    img: &ImageTensor,
    w: &ModelWeights,
    cfg: &ViTConfig,
    sched: &PruneSchedule,
    opts: &ForwardOptions,
) -> Result<ForwardResult> {
    let state = patch_embed(img, w, cfg)?;
    forward_state(state, w, cfg, sched, opts)
}

/// Deterministic random token state for benchmarks and tests.
pub fn seeded_state(n: usize, dim: usize, seed: u64) -> TokenState {
    let mut rng = crate::rng::SplitMix64::new(seed);
    let data = (0..n * dim).map(|_| rng.next_range(-1.0, 1.0)).collect();
    TokenState::new(Matrix::from_vec(n, dim, data).expect("sized"))
}
