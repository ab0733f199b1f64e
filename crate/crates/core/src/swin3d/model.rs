//! Forward pass of the dual-embedding volumetric Swin super-resolution
//! network, recorded on an autodiff [`Tape`].
//!
//! Token tensors are `[N, C]` with `N = h·w·d` in H-W-D raster order; volume
//! tensors are channels-first `[C, H, W, D]`.

use super::config::{ModelConfig, Variant};
use super::params::{deep_prefixes, BoundParams, ParamStore};
use super::window::{
    build_shift_mask, num_windows, window_partition_var, window_reverse_var, RelativePositionIndex,
};
use crate::autodiff::{Tape, Var};
use crate::error::{ConfigError, TensorError};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Precomputed per-grid attention state shared by every layer of a forward
/// pass.
#[derive(Clone, Debug)]
pub struct AttnContext<T> {
    pub grid: [usize; 3],
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub rel_index: RelativePositionIndex,
    /// Shift mask broadcast to `[n_windows, heads, M³, M³]`; `None` disables
    /// masking of shifted layers.
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> AttnContext<T> {
    pub fn new(grid: [usize; 3], window: usize, heads: usize) -> Result<Self, TensorError> {
        let shift = window / 2;
        let mask = build_shift_mask::<T>(grid, window, shift)?;
        let n = window.pow(3);
        let nw = num_windows(grid, window);
        let mut data = Vec::with_capacity(nw * heads * n * n);
        for w in 0..nw {
            let block = &mask.data()[w * n * n..(w + 1) * n * n];
            for _ in 0..heads {
                data.extend_from_slice(block);
            }
        }
        Ok(Self {
            grid,
            window,
            shift,
            heads,
            rel_index: RelativePositionIndex::new(window),
            mask: Some(Tensor::new(vec![nw, heads, n, n], data)?),
        })
    }

    pub fn for_config(cfg: &ModelConfig, grid: [usize; 3]) -> Result<Self, TensorError> {
        Self::new(grid, cfg.window, cfg.heads)
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Handles of one attention layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub rel_bias: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl AttnParams {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Self {
        Self {
            qkv_w: bound.get(&format!("{prefix}.qkv.weight")),
            qkv_b: bound.get(&format!("{prefix}.qkv.bias")),
            rel_bias: bound.get(&format!("{prefix}.rel_bias")),
            proj_w: bound.get(&format!("{prefix}.proj.weight")),
            proj_b: bound.get(&format!("{prefix}.proj.bias")),
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, bound: &BoundParams, name: &str) -> Result<Var, TensorError> {
    let y = tape.matmul(x, bound.get(&format!("{name}.weight")))?;
    tape.add_bias(y, bound.get(&format!("{name}.bias")))
}

fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, bound: &BoundParams, name: &str, stride: usize, pad: usize) -> Result<Var, TensorError> {
    tape.conv3d(
        x,
        bound.get(&format!("{name}.weight")),
        bound.get(&format!("{name}.bias")),
        stride,
        pad,
    )
}

/// `[N, C]` tokens → `[C, h, w, d]` volume.
pub fn tokens_to_volume<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: [usize; 3]) -> Result<Var, TensorError> {
    let c = tape.shape(x)[1];
    let g = tape.reshape(x, &[grid[0], grid[1], grid[2], c])?;
    tape.permute(g, &[3, 0, 1, 2])
}

/// `[C, h, w, d]` volume → `[N, C]` tokens.
pub fn volume_to_tokens<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var, TensorError> {
    let s = tape.shape(v).to_vec();
    let g = tape.permute(v, &[1, 2, 3, 0])?;
    tape.reshape(g, &[s[1] * s[2] * s[3], s[0]])
}

/// Non-overlapping `p³` patches of a `[C, H, W, D]` volume projected to
/// `C_emb` by a stride-`p` convolution, returned as `[N, C_emb]` tokens.
pub fn patch_embed<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, patch: usize) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1..].iter().any(|&d| d % patch != 0) {
        return Err(TensorError::InvalidArgument {
            op: "patch_embed",
            msg: format!("input {s:?} spatial dims must be divisible by patch {patch}"),
        });
    }
    let v = tape.conv3d(x, w, b, patch, 0)?;
    volume_to_tokens(tape, v)
}

/// Multi-head self-attention inside each window of `[n_windows, M³, C]`,
/// with relative position bias and, when `masked`, the shift mask.
pub fn wmsa<T: Scalar>(
    tape: &mut Tape<T>,
    windows: Var,
    p: &AttnParams,
    ctx: &AttnContext<T>,
    masked: bool,
) -> Result<Var, TensorError> {
    let s = tape.shape(windows).to_vec();
    let (nw, n, c) = (s[0], s[1], s[2]);
    let heads = ctx.heads;
    if c % heads != 0 || n != ctx.rel_index.tokens() {
        return Err(TensorError::InvalidArgument {
            op: "wmsa",
            msg: format!("windows {s:?} incompatible with {heads} heads and window {}", ctx.window),
        });
    }
    let d = c / heads;
    let x2 = tape.reshape(windows, &[nw * n, c])?;
    let qkv = tape.matmul(x2, p.qkv_w)?;
    let qkv = tape.add_bias(qkv, p.qkv_b)?;
    let qkv = tape.reshape(qkv, &[nw, n, 3, heads, d])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let t = tape.slice(qkv, 0, i, i + 1)?;
        *part = tape.reshape(t, &[nw, heads, n, d])?;
    }
    let [q, k, v] = parts;
    let q = tape.scale(q, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let logits = tape.matmul(q, kt)?;

    let bias = tape.gather_rows(p.rel_bias, ctx.rel_index.shared())?;
    let bias = tape.permute(bias, &[1, 0])?;
    let bias = tape.reshape(bias, &[heads, n, n])?;
    let bias = tape.expand_leading(bias, nw)?;
    let mut logits = tape.add(logits, bias)?;
    if masked {
        if let Some(mask) = &ctx.mask {
            let m = tape.constant(mask.clone());
            logits = tape.add(logits, m)?;
        }
    }
    let attn = tape.softmax(logits, 3)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[nw * n, c])?;
    let out = tape.matmul(out, p.proj_w)?;
    let out = tape.add_bias(out, p.proj_b)?;
    tape.reshape(out, &[nw, n, c])
}

/// `(S)W-MSA` sub-block: attention over (optionally cyclically shifted)
/// windows of the `[N, C]` token sequence, without the residual.
pub fn windowed_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttnParams,
    ctx: &AttnContext<T>,
    shifted: bool,
) -> Result<Var, TensorError> {
    let c = tape.shape(x)[1];
    let [h, w, d] = ctx.grid;
    let s = ctx.shift as i64;
    let mut g = tape.reshape(x, &[h, w, d, c])?;
    if shifted {
        g = tape.roll3d(g, [-s, -s, -s])?;
    }
    let win = window_partition_var(tape, g, ctx.window)?;
    let win = wmsa(tape, win, p, ctx, shifted)?;
    let mut g = window_reverse_var(tape, win, ctx.grid, ctx.window)?;
    if shifted {
        g = tape.roll3d(g, [s, s, s])?;
    }
    tape.reshape(g, &[h * w * d, c])
}

/// One Swin transformer layer: `x + (S)W-MSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn stl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    shifted: bool,
    ctx: &AttnContext<T>,
) -> Result<Var, TensorError> {
    let eps = T::from_f64(LN_EPS);
    let h = tape.layer_norm(
        x,
        bound.get(&format!("{prefix}.norm1.gamma")),
        bound.get(&format!("{prefix}.norm1.beta")),
        eps,
    )?;
    let attn = AttnParams::from_bound(bound, &format!("{prefix}.attn"));
    let a = windowed_attention(tape, h, &attn, ctx, shifted)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(
        x,
        bound.get(&format!("{prefix}.norm2.gamma")),
        bound.get(&format!("{prefix}.norm2.beta")),
        eps,
    )?;
    let h = linear(tape, h, bound, &format!("{prefix}.mlp.fc1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, bound, &format!("{prefix}.mlp.fc2"))?;
    tape.add(x, h)
}

fn grid_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, bound: &BoundParams, name: &str, grid: [usize; 3]) -> Result<Var, TensorError> {
    let v = tokens_to_volume(tape, x, grid)?;
    let v = conv(tape, v, bound, name, 1, 1)?;
    volume_to_tokens(tape, v)
}

/// Residual Swin transformer block: `l_stl` layers alternating unshifted and
/// shifted windows, a 3×3×3 convolution, and a residual connection.
pub fn rstb_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    l_stl: usize,
    ctx: &AttnContext<T>,
) -> Result<Var, TensorError> {
    let mut y = x;
    for l in 0..l_stl {
        y = stl_forward(tape, y, bound, &format!("{prefix}.stl{l}"), l % 2 == 1, ctx)?;
    }
    let y = grid_conv(tape, y, bound, &format!("{prefix}.conv"), ctx.grid)?;
    tape.add(x, y)
}

/// `k_rstb` residual blocks followed by a 3×3×3 convolution, wrapped in a
/// residual connection.
pub fn deep_feature_extract<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    bound: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    ctx: &AttnContext<T>,
) -> Result<Var, TensorError> {
    let mut y = tokens;
    for r in 0..cfg.k_rstb {
        y = rstb_forward(tape, y, bound, &format!("{prefix}.rstb{r}"), cfg.l_stl, ctx)?;
    }
    let y = grid_conv(tape, y, bound, &format!("{prefix}.conv"), ctx.grid)?;
    tape.add(tokens, y)
}

/// Full network on a `[1, H, W, D]` low-resolution volume, returning the
/// `[1, H, W, D]` reconstruction.
pub fn superformer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    lr: Var,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let s = tape.shape(lr).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(TensorError::InvalidArgument {
            op: "superformer_forward",
            msg: format!("input must be [1, H, W, D], got {s:?}"),
        }
        .into());
    }
    let dims = [s[1], s[2], s[3]];
    cfg.check_input_dims(dims)?;
    let grid = dims.map(|d| d / cfg.patch);
    let ctx = AttnContext::for_config(cfg, grid)?;

    let f0 = conv(tape, lr, bound, "shallow.conv", 1, 1)?;
    let embed = |tape: &mut Tape<T>, x: Var, name: &str| {
        patch_embed(
            tape,
            x,
            bound.get(&format!("{name}.weight")),
            bound.get(&format!("{name}.bias")),
            cfg.patch,
        )
    };
    let (feature_prefix, volume_prefix) = deep_prefixes(cfg);
    let half = T::from_f64(0.5);
    let deep = match cfg.variant {
        Variant::Full => {
            let ef = embed(tape, f0, "embed.feature")?;
            let ev = embed(tape, lr, "embed.volume")?;
            let a = deep_feature_extract(tape, ef, bound, feature_prefix.expect("full"), cfg, &ctx)?;
            let b = deep_feature_extract(tape, ev, bound, volume_prefix.expect("full"), cfg, &ctx)?;
            let sum = tape.add(a, b)?;
            tape.scale(sum, half)?
        }
        Variant::SrFeatures => {
            let ef = embed(tape, f0, "embed.feature")?;
            deep_feature_extract(tape, ef, bound, feature_prefix.expect("feature"), cfg, &ctx)?
        }
        Variant::SrVolume => {
            let ev = embed(tape, lr, "embed.volume")?;
            deep_feature_extract(tape, ev, bound, volume_prefix.expect("volume"), cfg, &ctx)?
        }
        Variant::SrAvg => {
            let ef = embed(tape, f0, "embed.feature")?;
            let ev = embed(tape, lr, "embed.volume")?;
            let sum = tape.add(ef, ev)?;
            let avg = tape.scale(sum, half)?;
            deep_feature_extract(tape, avg, bound, feature_prefix.expect("avg"), cfg, &ctx)?
        }
    };
    let v = tokens_to_volume(tape, deep, grid)?;
    let up = tape.trilinear_resize(v, dims)?;
    let fused = tape.add(up, f0)?;
    let r = conv(tape, fused, bound, "recon.conv3", 1, 1)?;
    let r = tape.leaky_relu(r, T::from_f64(LEAKY_SLOPE))?;
    Ok(conv(tape, r, bound, "recon.conv1", 1, 0)?)
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperFormer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SuperFormer<T> {
    /// Fresh network initialized from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let params = ParamStore::init(&config, config.init_seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ConfigError> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(ConfigError::Invalid(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    /// Binds parameters as leaves and records a forward pass.
    pub fn forward(&self, tape: &mut Tape<T>, lr: Var) -> Result<(Var, BoundParams), ModelError> {
        let bound = self.params.bind(tape);
        let out = superformer_forward(tape, lr, &bound, &self.config)?;
        Ok((out, bound))
    }

    /// Inference on a `[1, H, W, D]` volume.
    pub fn predict(&self, lr: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(lr.clone());
        let (out, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Inference over overlapping cubic tiles of edge `tile`, blended with
    /// weights that ramp linearly across the `overlap` band. Axes no longer
    /// than `tile` are processed whole.
    pub fn predict_tiled(&self, lr: &Tensor<T>, tile: usize, overlap: usize) -> Result<Tensor<T>, ModelError> {
        let s = lr.shape();
        let dims = [s[1], s[2], s[3]];
        self.config.check_input_dims(dims)?;
        let q = self.config.input_multiple();
        if tile == 0 || tile % q != 0 || overlap >= tile {
            return Err(ConfigError::Invalid(format!(
                "tile {tile} must be a positive multiple of {q} larger than the overlap {overlap}"
            ))
            .into());
        }
        if dims.iter().all(|&d| d <= tile) {
            return self.predict(lr);
        }
        let sizes = dims.map(|d| d.min(tile));
        let origins: Vec<Vec<usize>> = (0..3).map(|a| tile_origins(dims[a], sizes[a], overlap)).collect();
        let weights: Vec<Vec<f64>> = (0..3).map(|a| blend_ramp(sizes[a], overlap)).collect();
        let n: usize = dims.iter().product();
        let mut acc = vec![0.0f64; n];
        let mut norm = vec![0.0f64; n];
        for &oh in &origins[0] {
            for &ow in &origins[1] {
                for &od in &origins[2] {
                    let block = Tensor::from_fn(&[1, sizes[0], sizes[1], sizes[2]], |i| {
                        let (h, w, d) = (i / (sizes[1] * sizes[2]), (i / sizes[2]) % sizes[1], i % sizes[2]);
                        lr.data()[((oh + h) * dims[1] + ow + w) * dims[2] + od + d]
                    });
                    let out = self.predict(&block)?;
                    for h in 0..sizes[0] {
                        for w in 0..sizes[1] {
                            for d in 0..sizes[2] {
                                let wt = weights[0][h] * weights[1][w] * weights[2][d];
                                let g = ((oh + h) * dims[1] + ow + w) * dims[2] + od + d;
                                acc[g] += wt * out.data()[(h * sizes[1] + w) * sizes[2] + d].as_f64();
                                norm[g] += wt;
                            }
                        }
                    }
                }
            }
        }
        let data = acc.iter().zip(&norm).map(|(a, w)| T::from_f64(a / w)).collect();
        Ok(Tensor::new(lr.shape().to_vec(), data)?)
    }
}

/// Tile start positions covering `len` with stride `size − overlap`; the
/// last tile is pinned to the end.
fn tile_origins(len: usize, size: usize, overlap: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let stride = size - overlap;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size < len).collect();
    out.push(len - size);
    out
}

/// Per-axis blend weight: rises linearly over the first `overlap` voxels,
/// falls over the last, strictly positive everywhere.
fn blend_ramp(size: usize, overlap: usize) -> Vec<f64> {
    (0..size)
        .map(|i| {
            if overlap == 0 {
                return 1.0;
            }
            let lo = (i as f64 + 0.5) / overlap as f64;
            let hi = (size as f64 - i as f64 - 0.5) / overlap as f64;
            lo.min(hi).min(1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{window_attention_reference, AttnWeights};
    use crate::swin3d::params::param_specs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_store(c: usize, heads: usize, m: usize, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let rows = (2 * m - 1).pow(3);
        p.insert("a.qkv.weight", Tensor::randn(&[c, 3 * c], 0.5, &mut rng));
        p.insert("a.qkv.bias", Tensor::randn(&[3 * c], 0.1, &mut rng));
        p.insert("a.rel_bias", Tensor::randn(&[rows, heads], 0.5, &mut rng));
        p.insert("a.proj.weight", Tensor::randn(&[c, c], 0.5, &mut rng));
        p.insert("a.proj.bias", Tensor::randn(&[c], 0.1, &mut rng));
        p
    }

    fn run_attention(store: &ParamStore<f32>, x: &Tensor<f32>, ctx: &AttnContext<f32>, shifted: bool) -> Tensor<f32> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let p = AttnParams::from_bound(&bound, "a");
        let y = windowed_attention(&mut tape, xv, &p, ctx, shifted).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shifted_attention_matches_physical_partitions() {
        let (c, heads, m) = (8, 2, 4);
        for grid in [[8, 8, 8], [16, 8, 8]] {
            let store = attn_store(c, heads, m, 5);
            let n: usize = grid.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = Tensor::<f32>::randn(&[n, c], 1.0, &mut rng);
            let ctx = AttnContext::new(grid, m, heads).unwrap();
            let w = AttnWeights {
                qkv_w: store.get("a.qkv.weight").unwrap(),
                qkv_b: store.get("a.qkv.bias").unwrap(),
                rel_bias: store.get("a.rel_bias").unwrap(),
                proj_w: store.get("a.proj.weight").unwrap(),
                proj_b: store.get("a.proj.bias").unwrap(),
            };
            for (shifted, shift) in [(false, 0), (true, m / 2)] {
                let fast = run_attention(&store, &x, &ctx, shifted).cast::<f64>();
                let slow = window_attention_reference(&x, &w, grid, m, shift, heads);
                let err = fast.max_abs_diff(&slow);
                assert!(err < 1e-5, "grid {grid:?} shifted {shifted}: {err}");
            }
        }
    }

    #[test]
    fn unshifted_attention_commutes_with_window_translation() {
        let (c, heads, m, grid) = (4, 2, 2, [4, 4, 4]);
        let store = attn_store(c, heads, m, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[64, c], 1.0, &mut rng);
        let ctx = AttnContext::new(grid, m, heads).unwrap();
        let roll = |t: &Tensor<f32>| {
            t.reshape(&[4, 4, 4, c]).unwrap().roll3d([2, 0, 2]).unwrap().reshape(&[64, c]).unwrap()
        };
        let a = roll(&run_attention(&store, &x, &ctx, false));
        let b = run_attention(&store, &roll(&x), &ctx, false);
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn single_window_shift_is_a_relabeling_without_mask() {
        let (c, heads, m, grid) = (4, 2, 2, [2, 2, 2]);
        let mut store = attn_store(c, heads, m, 3);
        store.get_mut("a.rel_bias").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[8, c], 1.0, &mut rng);
        let mut ctx = AttnContext::new(grid, m, heads).unwrap();
        ctx.mask = None;
        let a = run_attention(&store, &x, &ctx, false);
        let b = run_attention(&store, &x, &ctx, true);
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    fn toy_input(size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, size, size, size], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn forward_preserves_shape_and_rejects_bad_dims() {
        let model = SuperFormer::<f32>::new(ModelConfig::toy()).unwrap();
        let y = model.predict(&toy_input(8, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 8]);
        let err = model.predict(&Tensor::zeros(&[1, 8, 6, 8])).unwrap_err();
        assert!(err.to_string().contains("multiples"), "{err}");
    }

    #[test]
    fn zero_residual_outputs_make_stl_and_rstb_identity() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::<f32>::init(&cfg, 7);
        for name in ["attn.proj", "mlp.fc2"] {
            for (k, v) in store.iter_mut() {
                if k.contains(name) {
                    v.data_mut().fill(0.0);
                }
            }
        }
        store.zero_prefix("deep.feature.rstb0.conv");
        let grid = [2, 2, 2];
        let ctx = AttnContext::for_config(&cfg, grid).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = tape.constant(Tensor::randn(&[8, cfg.c_emb], 1.0, &mut rng));
        let s = stl_forward(&mut tape, x, &bound, "deep.feature.rstb0.stl1", true, &ctx).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let r = rstb_forward(&mut tape, x, &bound, "deep.feature.rstb0", cfg.l_stl, &ctx).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
    }

    #[test]
    fn zero_deep_path_leaves_shallow_reconstruction() {
        let cfg = ModelConfig::toy();
        let mut model = SuperFormer::<f32>::new(cfg.clone()).unwrap();
        model.params.zero_prefix("embed.");
        model.params.zero_prefix("deep.");
        let lr = toy_input(8, 1);
        let y = model.predict(&lr).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(lr);
        let f0 = conv(&mut tape, x, &bound, "shallow.conv", 1, 1).unwrap();
        let r = conv(&mut tape, f0, &bound, "recon.conv3", 1, 1).unwrap();
        let r = tape.leaky_relu(r, LEAKY_SLOPE as f32).unwrap();
        let r = conv(&mut tape, r, &bound, "recon.conv1", 1, 0).unwrap();
        assert_eq!(&y, tape.value(r));
    }

    #[test]
    fn variants_differ_and_seed_is_deterministic() {
        let lr = toy_input(8, 2);
        let mut outs = Vec::new();
        for variant in [Variant::SrFeatures, Variant::SrVolume] {
            let cfg = ModelConfig { variant, ..ModelConfig::toy() };
            let a = SuperFormer::<f32>::new(cfg.clone()).unwrap().predict(&lr).unwrap();
            let b = SuperFormer::<f32>::new(cfg).unwrap().predict(&lr).unwrap();
            assert_eq!(a, b);
            outs.push(a);
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
    }

    #[test]
    fn tiles_cover_and_blend() {
        assert_eq!(tile_origins(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(tile_origins(24, 16, 8), vec![0, 8]);
        assert_eq!(tile_origins(8, 16, 8), vec![0]);
        let r = blend_ramp(16, 8);
        assert!(r.iter().all(|&w| w > 0.0 && w <= 1.0));
        assert!(r[0] < r[4] && r[4] < r[7]);
        assert_eq!(r[3], r[12]);
        assert_eq!(blend_ramp(32, 8)[16], 1.0);
    }

    #[test]
    fn tiled_inference_matches_whole_volume_for_pointwise_model() {
        // with every deep and spatial weight zero, the model is pointwise and
        // tiling must be seamless
        let cfg = ModelConfig::toy();
        let mut model = SuperFormer::<f32>::new(cfg).unwrap();
        model.params.zero_prefix("embed.");
        model.params.zero_prefix("deep.");
        for name in ["shallow.conv.weight", "recon.conv3.weight"] {
            let w = model.params.get_mut(name).unwrap();
            let s = w.shape().to_vec();
            let stride = s[2] * s[3] * s[4];
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if i % stride != stride / 2 {
                    *v = 0.0;
                }
            }
        }
        let lr = toy_input(16, 5);
        let whole = model.predict(&lr).unwrap();
        let tiled = model.predict_tiled(&lr, 8, 4).unwrap();
        assert!(whole.max_abs_diff(&tiled) < 1e-5);
    }

    #[test]
    fn gradient_reaches_first_layer() {
        let cfg = ModelConfig::toy();
        let model = SuperFormer::<f32>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(toy_input(8, 3));
        let (y, bound) = model.forward(&mut tape, x).unwrap();
        let t = tape.constant(toy_input(8, 4));
        let loss = tape.l1_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(bound.get("deep.feature.rstb0.stl0.attn.qkv.weight")).unwrap();
        assert!(g.data().iter().any(|v| *v != 0.0));
        assert_eq!(param_specs(&model.config).len(), bound.iter().count());
    }
}
