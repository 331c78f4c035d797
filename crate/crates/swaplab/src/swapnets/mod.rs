//! Three-branch conditional UNet for latent face swapping.
//!
//! The generator is a small two-level UNet ("SwapNet") over `[48, 16, 16]`
//! latents, conditioned four ways at once:
//!
//! - the **target's clean latent** is stacked onto the noisy latent along the
//!   channel axis before the input convolution, whose weight slice for those
//!   extra channels starts at zero;
//! - a **reference encoder** ("FaceNet") — a copy of the SwapNet encoder —
//!   runs on the clean source latent, and its token sequences are fused into
//!   every SwapNet self-attention as extra key/value rows;
//! - an **identity adapter** projects the frozen 8-dim identity embedding to a
//!   few context tokens and adds a second cross-attention read-out whose
//!   output projection starts at zero;
//! - a **pose guider** rasterized-landmark encoder produces a latent-shaped
//!   feature added to the noisy latent, with a zero final layer.
//!
//! All four condition paths are gated by zero-initialized projections, so at
//! initialization the network is a plain unconditional denoiser and each
//! conditioning channel only starts to matter once training pushes weight
//! into its gate. The prediction head is zero-initialized too, which makes
//! the very first prediction the all-zero latent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::codec::{LATENT_CHANNELS, LATENT_SIZE};
use crate::diffcore::Parameterization;
use crate::synthfaces::geometry::IMG_SIZE;
use crate::tensor::{kaiming_uniform, Graph, ParamId, ParamStore, Tensor, Var};
use crate::util::rng_for;
use crate::{Result, SwapLabError};

/// Group count for every group norm in the model; all widths divide it.
const GN_GROUPS: usize = 8;
/// Dimension of the raw sinusoidal timestep features fed to the embedding MLP.
const TIME_FEATURES: usize = 64;
/// Channel widths of the pose guider's two hidden layers.
const GUIDER_WIDTHS: [usize; 2] = [16, 32];
/// Self-attention sites, in forward order. The reference cache carries one
/// token matrix per entry and the identity adapter owns one output gate each.
pub const ATTN_SITES: [&str; 4] = ["enc1", "mid", "dec1", "dec0"];

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyperparameters. The defaults describe the full model; the
/// two `use_*` flags exist for structural ablations that delete a whole
/// condition branch (parameters included) rather than merely silencing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the latent tensors the model denoises.
    pub latent_channels: usize,
    /// UNet widths per resolution level: `[16×16 width, 8×8 width]`.
    pub level_widths: [usize; 2],
    /// Per-head channel count inside every attention op.
    pub attention_head_dim: usize,
    /// Token dimension of the learned context sequence and the id tokens.
    pub context_dim: usize,
    /// Number of learned constant context tokens (stands in for a frozen
    /// prompt embedding — the prompt never varies, so only its size matters).
    pub context_tokens: usize,
    /// Number of identity tokens the adapter projects the embedding into.
    pub id_tokens: usize,
    /// Length of the frozen identity embedding the adapter consumes.
    pub id_embedding_dim: usize,
    /// What the raw head output means (noise or clean latent).
    pub parameterization: Parameterization,
    /// Side length of the latent grid.
    pub latent_size: usize,
    /// Side length of the landmark image (must be 4× the latent side: the
    /// guider downsamples twice).
    pub landmark_size: usize,
    /// Keep the reference-encoder branch (fused self-attention rows).
    pub use_facenet: bool,
    /// Keep the identity-adapter branch (second cross-attention read-out).
    pub use_id_adapter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: LATENT_CHANNELS,
            level_widths: [64, 96],
            attention_head_dim: 16,
            context_dim: 64,
            context_tokens: 8,
            id_tokens: 4,
            id_embedding_dim: 8,
            parameterization: Parameterization::PredictX0,
            latent_size: LATENT_SIZE,
            landmark_size: IMG_SIZE,
            use_facenet: true,
            use_id_adapter: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("attention_head_dim", self.attention_head_dim),
            ("context_dim", self.context_dim),
            ("context_tokens", self.context_tokens),
            ("id_tokens", self.id_tokens),
            ("id_embedding_dim", self.id_embedding_dim),
            ("latent_size", self.latent_size),
            ("landmark_size", self.landmark_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SwapLabError::Shape(format!("model config: {name} must be positive")));
            }
        }
        for w in self.level_widths {
            if w == 0 {
                return Err(SwapLabError::Shape("model config: zero level width".into()));
            }
            if w % self.attention_head_dim != 0 {
                return Err(SwapLabError::Shape(format!(
                    "model config: width {w} not divisible by head dim {}",
                    self.attention_head_dim
                )));
            }
            if w % GN_GROUPS != 0 {
                return Err(SwapLabError::Shape(format!(
                    "model config: width {w} not divisible by {GN_GROUPS} norm groups"
                )));
            }
        }
        if self.landmark_size != 4 * self.latent_size {
            return Err(SwapLabError::Shape(format!(
                "model config: landmark size {} must be 4x the latent size {}",
                self.landmark_size, self.latent_size
            )));
        }
        if self.latent_size % 2 != 0 {
            return Err(SwapLabError::Shape(
                "model config: latent size must be even (one downsample level)".into(),
            ));
        }
        Ok(())
    }

    /// Dimension of the shared timestep embedding.
    fn temb_dim(&self) -> usize {
        4 * self.level_widths[0]
    }

    /// Channel width at a named attention site.
    fn site_width(&self, site: &str) -> usize {
        match site {
            "enc1" | "mid" | "dec1" => self.level_widths[1],
            "dec0" => self.level_widths[0],
            other => panic!("unknown attention site {other}"),
        }
    }

    fn heads(&self, width: usize) -> usize {
        width / self.attention_head_dim
    }
}

// ---------------------------------------------------------------------------
// Condition bundle
// ---------------------------------------------------------------------------

/// Everything the generator is conditioned on for one sample.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Clean latent of the image whose attributes must be kept.
    pub target_latent: Tensor,
    /// Rasterized landmark map of that same image.
    pub landmark_image: Tensor,
    /// Clean latent of the identity-donor image.
    pub source_latent: Tensor,
    /// Frozen-encoder identity embedding of the donor image.
    pub id_embedding: Vec<f64>,
}

impl ConditionBundle {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let lat = vec![cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        if self.target_latent.shape != lat {
            return Err(SwapLabError::Shape(format!(
                "condition bundle: target latent shape {:?}, expected {lat:?}",
                self.target_latent.shape
            )));
        }
        if self.source_latent.shape != lat {
            return Err(SwapLabError::Shape(format!(
                "condition bundle: source latent shape {:?}, expected {lat:?}",
                self.source_latent.shape
            )));
        }
        let lmk = vec![3, cfg.landmark_size, cfg.landmark_size];
        if self.landmark_image.shape != lmk {
            return Err(SwapLabError::Shape(format!(
                "condition bundle: landmark image shape {:?}, expected {lmk:?}",
                self.landmark_image.shape
            )));
        }
        if self.id_embedding.len() != cfg.id_embedding_dim {
            return Err(SwapLabError::Shape(format!(
                "condition bundle: id embedding length {}, expected {}",
                self.id_embedding.len(),
                cfg.id_embedding_dim
            )));
        }
        Ok(())
    }

    /// Enters the bundle into a graph as constants (conditions are data, not
    /// trainables; gradients stop at them).
    pub fn vars(&self, g: &mut Graph, cfg: &ModelConfig) -> Result<ConditionVars> {
        self.validate(cfg)?;
        Ok(ConditionVars {
            target_latent: g.constant(self.target_latent.clone()),
            landmark_image: g.constant(self.landmark_image.clone()),
            source_latent: g.constant(self.source_latent.clone()),
            id_embedding: g.constant(Tensor::new(
                vec![1, self.id_embedding.len()],
                self.id_embedding.clone(),
            )),
        })
    }
}

/// The in-graph view of a [`ConditionBundle`].
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub target_latent: Var,
    pub landmark_image: Var,
    pub source_latent: Var,
    /// Row vector `[1, id_embedding_dim]`.
    pub id_embedding: Var,
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

type Rng = rand_chacha::ChaCha12Rng;

fn reg_conv(s: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut Rng) {
    let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, std::f64::consts::SQRT_2, rng);
    s.register(format!("{name}.w"), w);
    s.register(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn reg_conv_zero(s: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
    s.register(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
    s.register(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn reg_linear(s: &mut ParamStore, name: &str, out: usize, inn: usize, rng: &mut Rng) {
    s.register(format!("{name}.w"), kaiming_uniform(&[out, inn], inn, 1.0, rng));
    s.register(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn reg_linear_zero(s: &mut ParamStore, name: &str, out: usize, inn: usize) {
    s.register(format!("{name}.w"), Tensor::zeros(&[out, inn]));
    s.register(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn reg_norm(s: &mut ParamStore, name: &str, c: usize) {
    s.register(format!("{name}.g"), Tensor::new(vec![c], vec![1.0; c]));
    s.register(format!("{name}.b"), Tensor::zeros(&[c]));
}

fn reg_resblock(s: &mut ParamStore, p: &str, cin: usize, cout: usize, temb: usize, rng: &mut Rng) {
    reg_norm(s, &format!("{p}.gn1"), cin);
    reg_conv(s, &format!("{p}.conv1"), cout, cin, 3, rng);
    reg_linear(s, &format!("{p}.temb"), cout, temb, rng);
    reg_norm(s, &format!("{p}.gn2"), cout);
    reg_conv(s, &format!("{p}.conv2"), cout, cout, 3, rng);
    if cin != cout {
        reg_conv(s, &format!("{p}.skip"), cout, cin, 1, rng);
    }
}

fn reg_attention(s: &mut ParamStore, p: &str, c: usize, d_ctx: usize, rng: &mut Rng) {
    reg_norm(s, &format!("{p}.ln1"), c);
    for proj in ["sq", "sk", "sv", "so"] {
        reg_linear(s, &format!("{p}.{proj}"), c, c, rng);
    }
    reg_norm(s, &format!("{p}.ln2"), c);
    reg_linear(s, &format!("{p}.cq"), c, c, rng);
    reg_linear(s, &format!("{p}.ck"), c, d_ctx, rng);
    reg_linear(s, &format!("{p}.cv"), c, d_ctx, rng);
    reg_linear(s, &format!("{p}.co"), c, c, rng);
}

/// The adapter's own key/value projections are live from the start; only the
/// output projection is a zero gate. Adapter parameters sit under their own
/// `swap.adapter.` prefix — outside the per-block prefixes — precisely so the
/// reference-encoder weight copy never touches them.
fn reg_adapter_site(s: &mut ParamStore, site: &str, c: usize, d_ctx: usize, rng: &mut Rng) {
    reg_linear(s, &format!("swap.adapter.{site}.k"), c, d_ctx, rng);
    reg_linear(s, &format!("swap.adapter.{site}.v"), c, d_ctx, rng);
    reg_linear_zero(s, &format!("swap.adapter.{site}.o"), c, c);
}

/// Builds the full parameter store for a model.
///
/// Zero-initialized gates: the input-convolution slice that reads the target
/// latent, every `swap.adapter.*.o` output projection, the pose guider's last
/// convolution, and the prediction head. The reference encoder starts as a
/// value-copy of the SwapNet encoder blocks (its own input convolution
/// excepted — the two branches read different channel counts).
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "model-init", 0);
    let mut s = ParamStore::new();
    let c_lat = cfg.latent_channels;
    let [w0, w1] = cfg.level_widths;
    let temb = cfg.temb_dim();
    let d_ctx = cfg.context_dim;

    // Timestep embedding trunk (shared by both branches; the reference
    // encoder always evaluates it at t = 0).
    reg_linear(&mut s, "swap.temb.l1", temb, TIME_FEATURES, &mut rng);
    reg_linear(&mut s, "swap.temb.l2", temb, temb, &mut rng);

    // Input convolution over [noisy latent ‖ target latent]: the first
    // c_lat input channels get a live init scaled for the fan-in they alone
    // provide at the start; the target-latent half starts at zero.
    let mut w_in = Tensor::zeros(&[w0, 2 * c_lat, 3, 3]);
    let live = kaiming_uniform(
        &[w0, c_lat, 3, 3],
        c_lat * 9,
        std::f64::consts::SQRT_2,
        &mut rng,
    );
    for o in 0..w0 {
        for i in 0..c_lat {
            for t in 0..9 {
                w_in.data[(o * 2 * c_lat + i) * 9 + t] = live.data[(o * c_lat + i) * 9 + t];
            }
        }
    }
    s.register("swap.conv_in.w", w_in);
    s.register("swap.conv_in.b", Tensor::zeros(&[w0]));

    reg_resblock(&mut s, "swap.enc0.res", w0, w0, temb, &mut rng);
    reg_conv(&mut s, "swap.down0", w1, w0, 3, &mut rng);
    reg_resblock(&mut s, "swap.enc1.res", w1, w1, temb, &mut rng);
    reg_attention(&mut s, "swap.enc1.attn", w1, d_ctx, &mut rng);
    reg_resblock(&mut s, "swap.mid.res1", w1, w1, temb, &mut rng);
    reg_attention(&mut s, "swap.mid.attn", w1, d_ctx, &mut rng);
    reg_resblock(&mut s, "swap.mid.res2", w1, w1, temb, &mut rng);
    reg_resblock(&mut s, "swap.dec1.res", 2 * w1, w1, temb, &mut rng);
    reg_attention(&mut s, "swap.dec1.attn", w1, d_ctx, &mut rng);
    reg_conv(&mut s, "swap.up0", w0, w1, 3, &mut rng);
    reg_resblock(&mut s, "swap.dec0.res", w0 + w0, w0, temb, &mut rng);
    reg_attention(&mut s, "swap.dec0.attn", w0, d_ctx, &mut rng);
    reg_norm(&mut s, "swap.head.gn", w0);
    reg_conv_zero(&mut s, "swap.head.conv", c_lat, w0, 3);

    // Learned constant context tokens.
    s.register(
        "swap.ctx.tokens",
        kaiming_uniform(&[cfg.context_tokens, d_ctx], d_ctx, 1.0, &mut rng),
    );

    if cfg.use_id_adapter {
        reg_linear(
            &mut s,
            "swap.adapter.proj",
            cfg.id_tokens * d_ctx,
            cfg.id_embedding_dim,
            &mut rng,
        );
        reg_norm(&mut s, "swap.adapter.ln", d_ctx);
        for site in ATTN_SITES {
            reg_adapter_site(&mut s, site, cfg.site_width(site), d_ctx, &mut rng);
        }
    }

    // Pose guider: landmark image → latent-shaped feature, final layer zero.
    reg_conv(&mut s, "guider.c1", GUIDER_WIDTHS[0], 3, 3, &mut rng);
    reg_conv(&mut s, "guider.c2", GUIDER_WIDTHS[1], GUIDER_WIDTHS[0], 3, &mut rng);
    reg_conv_zero(&mut s, "guider.c3", c_lat, GUIDER_WIDTHS[1], 3);

    if cfg.use_facenet {
        reg_conv(&mut s, "face.conv_in", w0, c_lat, 3, &mut rng);
        reg_resblock(&mut s, "face.enc0.res", w0, w0, temb, &mut rng);
        reg_conv(&mut s, "face.down0", w1, w0, 3, &mut rng);
        reg_resblock(&mut s, "face.enc1.res", w1, w1, temb, &mut rng);
        reg_attention(&mut s, "face.enc1.attn", w1, d_ctx, &mut rng);
        reg_resblock(&mut s, "face.mid.res1", w1, w1, temb, &mut rng);
        reg_attention(&mut s, "face.mid.attn", w1, d_ctx, &mut rng);
        reg_resblock(&mut s, "face.mid.res2", w1, w1, temb, &mut rng);

        let snapshot = s.clone();
        let mut copied = 0;
        for block in ["enc0", "down0", "enc1", "mid"] {
            copied += s.copy_prefixed(
                &format!("face.{block}"),
                &snapshot,
                &format!("swap.{block}"),
            );
        }
        // 10 per plain resblock, 20 per attention block, 2 for the
        // downsampler: enc0 (10) + down0 (2) + enc1 (30) + mid (60... no:
        // res1+attn+res2 = 40). Miscounting here would mean the encoder
        // replica silently diverges from day one, so it is a hard assert.
        assert_eq!(copied, 10 + 2 + 30 + 40, "reference-encoder weight copy");
    }

    Ok(s)
}

// ---------------------------------------------------------------------------
// In-graph parameter views
// ---------------------------------------------------------------------------

/// All model parameters materialized in a graph, addressable by name.
pub struct ModelVars {
    by_name: HashMap<String, Var>,
    pairs: Vec<(ParamId, Var)>,
}

impl ModelVars {
    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("model parameter {name} missing from the graph"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// `(parameter id, leaf var)` pairs in registration order, for pulling
    /// gradients out after a backward pass.
    pub fn pairs(&self) -> &[(ParamId, Var)] {
        &self.pairs
    }

    /// `(weight, bias)` vars for a linear/conv parameter pair.
    fn wb(&self, name: &str) -> (Var, Var) {
        (self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))
    }

    /// `(gamma, beta)` vars for a norm parameter pair.
    fn gb(&self, name: &str) -> (Var, Var) {
        (self.var(&format!("{name}.g")), self.var(&format!("{name}.b")))
    }
}

/// Enters every parameter into the graph — as leaves when training (gradients
/// flow) or as constants when frozen for inference.
pub fn model_vars(g: &mut Graph, params: &ParamStore, trainable: bool) -> ModelVars {
    let mut by_name = HashMap::new();
    let mut pairs = Vec::new();
    for id in params.ids() {
        let t = params.get(id).clone();
        let v = if trainable { g.leaf(t) } else { g.constant(t) };
        by_name.insert(params.name(id).to_string(), v);
        pairs.push((id, v));
    }
    ModelVars { by_name, pairs }
}

// ---------------------------------------------------------------------------
// Attention pieces
// ---------------------------------------------------------------------------

/// Parameter views for one self-attention sublayer.
pub struct SelfAttnVars {
    pub ln: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

/// Parameter views for one cross-attention sublayer.
pub struct CrossAttnVars {
    pub ln: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

/// Parameter views for one identity-adapter site.
pub struct AdapterSiteVars {
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

fn self_attn_vars(vars: &ModelVars, prefix: &str) -> SelfAttnVars {
    SelfAttnVars {
        ln: vars.gb(&format!("{prefix}.ln1")),
        q: vars.wb(&format!("{prefix}.sq")),
        k: vars.wb(&format!("{prefix}.sk")),
        v: vars.wb(&format!("{prefix}.sv")),
        o: vars.wb(&format!("{prefix}.so")),
    }
}

fn cross_attn_vars(vars: &ModelVars, prefix: &str) -> CrossAttnVars {
    CrossAttnVars {
        ln: vars.gb(&format!("{prefix}.ln2")),
        q: vars.wb(&format!("{prefix}.cq")),
        k: vars.wb(&format!("{prefix}.ck")),
        v: vars.wb(&format!("{prefix}.cv")),
        o: vars.wb(&format!("{prefix}.co")),
    }
}

fn adapter_site_vars(vars: &ModelVars, site: &str) -> AdapterSiteVars {
    AdapterSiteVars {
        k: vars.wb(&format!("swap.adapter.{site}.k")),
        v: vars.wb(&format!("swap.adapter.{site}.v")),
        o: vars.wb(&format!("swap.adapter.{site}.o")),
    }
}

/// Self-attention over `swap_tokens` with optional extra reference rows mixed
/// into the key/value set. Both token groups pass through the same layer
/// norm, then keys and values come from the concatenation while queries come
/// from the swap rows alone. Because each output row of softmax attention
/// depends only on its own query row, this equals forming queries over the
/// full concatenation and keeping the first `n` outputs — the discarded rows
/// are simply never computed.
///
/// With `ref_tokens = None` this is plain self-attention; with the reference
/// rows equal to the swap rows the duplicated key/value pairs renormalize
/// away and the result matches plain self-attention to float precision.
pub fn fused_self_attention(
    g: &mut Graph,
    p: &SelfAttnVars,
    heads: usize,
    swap_tokens: Var,
    ref_tokens: Option<Var>,
) -> Var {
    let qn = g.layer_norm(swap_tokens, p.ln.0, p.ln.1);
    let kvn = match ref_tokens {
        Some(r) => {
            let rn = g.layer_norm(r, p.ln.0, p.ln.1);
            g.concat_rows(qn, rn)
        }
        None => qn,
    };
    let q = g.linear(qn, p.q.0, p.q.1);
    let k = g.linear(kvn, p.k.0, p.k.1);
    let v = g.linear(kvn, p.v.0, p.v.1);
    let a = g.attention(q, k, v, heads);
    g.linear(a, p.o.0, p.o.1)
}

/// Cross-attention into the learned context, plus an optional second
/// read-out into the identity tokens that shares the same queries but uses
/// the adapter's own key/value projections. The adapter's output projection
/// is the zero gate: at initialization the sum equals the base term exactly.
pub fn adapter_cross_attention(
    g: &mut Graph,
    p: &CrossAttnVars,
    adapter: Option<(&AdapterSiteVars, Var)>,
    heads: usize,
    tokens: Var,
    context: Var,
) -> Var {
    let qn = g.layer_norm(tokens, p.ln.0, p.ln.1);
    let q = g.linear(qn, p.q.0, p.q.1);
    let k = g.linear(context, p.k.0, p.k.1);
    let v = g.linear(context, p.v.0, p.v.1);
    let a = g.attention(q, k, v, heads);
    let base = g.linear(a, p.o.0, p.o.1);
    match adapter {
        Some((ap, id_tokens)) => {
            let ik = g.linear(id_tokens, ap.k.0, ap.k.1);
            let iv = g.linear(id_tokens, ap.v.0, ap.v.1);
            let ia = g.attention(q, ik, iv, heads);
            let ia = g.linear(ia, ap.o.0, ap.o.1);
            g.add(base, ia)
        }
        None => base,
    }
}

/// One full attention block: tokenize, fused self-attention (+residual),
/// adapter cross-attention (+residual), back to the spatial layout.
#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    vars: &ModelVars,
    prefix: &str,
    heads: usize,
    hw: usize,
    x: Var,
    ref_tokens: Option<Var>,
    context: Var,
    adapter: Option<(&AdapterSiteVars, Var)>,
) -> Var {
    let sp = self_attn_vars(vars, prefix);
    let cp = cross_attn_vars(vars, prefix);
    let t0 = g.spatial_to_tokens(x);
    let sa = fused_self_attention(g, &sp, heads, t0, ref_tokens);
    let t1 = g.add(t0, sa);
    let ca = adapter_cross_attention(g, &cp, adapter, heads, t1, context);
    let t2 = g.add(t1, ca);
    g.tokens_to_spatial(t2, hw, hw)
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Sinusoidal timestep features `[1, TIME_FEATURES]`: half sines, half
/// cosines over log-spaced frequencies from 1 down to 1e-4.
fn timestep_features(t: usize) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut data = vec![0.0; TIME_FEATURES];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::new(vec![1, TIME_FEATURES], data)
}

/// The shared timestep-embedding MLP: sinusoidal features → linear → silu →
/// linear, producing the `[1, temb_dim]` row every resblock projects from.
fn temb_forward(g: &mut Graph, vars: &ModelVars, t: usize) -> Var {
    let feats = g.constant(timestep_features(t));
    let (w1, b1) = vars.wb("swap.temb.l1");
    let (w2, b2) = vars.wb("swap.temb.l2");
    let h = g.linear(feats, w1, b1);
    let h = g.silu(h);
    g.linear(h, w2, b2)
}

/// Standard pre-norm residual block with a per-block timestep projection
/// added as a channel bias between the two convolutions.
fn resblock(
    g: &mut Graph,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
    temb: Var,
    cin: usize,
    cout: usize,
) -> Var {
    let (g1, b1) = vars.gb(&format!("{prefix}.gn1"));
    let (w1, c1b) = vars.wb(&format!("{prefix}.conv1"));
    let (tw, tb) = vars.wb(&format!("{prefix}.temb"));
    let (g2, b2) = vars.gb(&format!("{prefix}.gn2"));
    let (w2, c2b) = vars.wb(&format!("{prefix}.conv2"));

    let h = g.group_norm(x, g1, b1, GN_GROUPS);
    let h = g.silu(h);
    let h = g.conv2d(h, w1, c1b, 1, 1);
    let tproj = g.linear(temb, tw, tb);
    let h = g.add_channel_bias(h, tproj);
    let h = g.group_norm(h, g2, b2, GN_GROUPS);
    let h = g.silu(h);
    let h = g.conv2d(h, w2, c2b, 1, 1);
    let skip = if cin != cout {
        let (sw, sb) = vars.wb(&format!("{prefix}.skip"));
        g.conv2d(x, sw, sb, 1, 0)
    } else {
        x
    };
    g.add(h, skip)
}

/// Landmark image → latent-shaped guidance feature via two strided
/// convolutions and a zero-initialized pointwise-ish head. At initialization
/// the output is exactly zero, so landmark content cannot influence the
/// generator until training opens the gate.
pub fn pose_guider_forward(g: &mut Graph, vars: &ModelVars, landmark_image: Var) -> Var {
    let (w1, b1) = vars.wb("guider.c1");
    let (w2, b2) = vars.wb("guider.c2");
    let (w3, b3) = vars.wb("guider.c3");
    let h = g.conv2d(landmark_image, w1, b1, 2, 1);
    let h = g.silu(h);
    let h = g.conv2d(h, w2, b2, 2, 1);
    let h = g.silu(h);
    g.conv2d(h, w3, b3, 1, 1)
}

/// Projects the frozen identity embedding to `id_tokens` context-dim tokens:
/// one linear map fanned out across tokens, then a per-token layer norm.
fn id_context_tokens(g: &mut Graph, vars: &ModelVars, cfg: &ModelConfig, id_embedding: Var) -> Var {
    let (pw, pb) = vars.wb("swap.adapter.proj");
    let (lg, lb) = vars.gb("swap.adapter.ln");
    let p = g.linear(id_embedding, pw, pb);
    let p = g.reshape(p, vec![cfg.id_tokens, cfg.context_dim]);
    g.layer_norm(p, lg, lb)
}

// ---------------------------------------------------------------------------
// Reference encoder
// ---------------------------------------------------------------------------

/// Token sequences captured from the reference encoder, one per SwapNet
/// self-attention site, keyed by site name.
pub struct ReferenceCache {
    entries: Vec<(&'static str, Var)>,
}

impl ReferenceCache {
    pub fn get(&self, site: &str) -> Var {
        self.entries
            .iter()
            .find(|(s, _)| *s == site)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| panic!("no reference entry for site {site}"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|&(s, _)| s)
    }
}

/// Runs the reference encoder on the clean source latent (never noised, so
/// the timestep embedding is pinned to t = 0) and captures the token matrix
/// each SwapNet self-attention site will fuse in:
///
/// - `enc1`, `mid`: features right before that block's own self-attention;
/// - `dec1`: the encoder's final output (SwapNet's decoder has no reference
///   twin, so the deepest feature stands in);
/// - `dec0`: the first-level residual output, matching the decoder's
///   16×16 width.
pub fn facenet_extract(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    source_latent: Var,
) -> ReferenceCache {
    let [w0, w1] = cfg.level_widths;
    let half = cfg.latent_size / 2;
    let heads1 = cfg.heads(w1);
    let context = vars.var("swap.ctx.tokens");
    let temb0 = temb_forward(g, vars, 0);

    let (wi, bi) = vars.wb("face.conv_in");
    let h = g.conv2d(source_latent, wi, bi, 1, 1);
    let e0 = resblock(g, vars, "face.enc0.res", h, temb0, w0, w0);
    let dec0_tokens = g.spatial_to_tokens(e0);

    let (wd, bd) = vars.wb("face.down0");
    let d = g.conv2d(e0, wd, bd, 2, 1);
    let e1 = resblock(g, vars, "face.enc1.res", d, temb0, w1, w1);
    let enc1_tokens = g.spatial_to_tokens(e1);
    let a1 = attention_block(g, vars, "face.enc1.attn", heads1, half, e1, None, context, None);

    let m = resblock(g, vars, "face.mid.res1", a1, temb0, w1, w1);
    let mid_tokens = g.spatial_to_tokens(m);
    let m = attention_block(g, vars, "face.mid.attn", heads1, half, m, None, context, None);
    let m = resblock(g, vars, "face.mid.res2", m, temb0, w1, w1);
    let dec1_tokens = g.spatial_to_tokens(m);

    ReferenceCache {
        entries: vec![
            ("enc1", enc1_tokens),
            ("mid", mid_tokens),
            ("dec1", dec1_tokens),
            ("dec0", dec0_tokens),
        ],
    }
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// One conditioned denoiser call. Returns the prediction in both
/// parameterizations: the raw head output is interpreted per
/// `cfg.parameterization` and the other view is derived in-graph with the
/// same floor the scalar conversion helpers use, so gradients flow through
/// whichever view a loss consumes.
pub fn swapnet_forward(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    noisy_latent: Var,
    cond: &ConditionVars,
    t: usize,
    alpha_bar: f64,
) -> Result<(Var, Var)> {
    let lat = vec![cfg.latent_channels, cfg.latent_size, cfg.latent_size];
    if g.value(noisy_latent).shape != lat {
        return Err(SwapLabError::Shape(format!(
            "noisy latent shape {:?}, expected {lat:?}",
            g.value(noisy_latent).shape
        )));
    }
    if g.value(cond.target_latent).shape != lat || g.value(cond.source_latent).shape != lat {
        return Err(SwapLabError::Shape("condition latents mismatch the model".into()));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(SwapLabError::Numeric(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    if cfg.use_facenet && !vars.has("face.conv_in.w") {
        return Err(SwapLabError::Shape(
            "config enables the reference branch but the parameters lack it".into(),
        ));
    }
    if cfg.use_id_adapter && !vars.has("swap.adapter.proj.w") {
        return Err(SwapLabError::Shape(
            "config enables the id adapter but the parameters lack it".into(),
        ));
    }

    let [w0, w1] = cfg.level_widths;
    let full = cfg.latent_size;
    let half = full / 2;
    let (heads0, heads1) = (cfg.heads(w0), cfg.heads(w1));
    let context = vars.var("swap.ctx.tokens");

    // Condition branches.
    let guide = pose_guider_forward(g, vars, cond.landmark_image);
    let guided = g.add(noisy_latent, guide);
    let refs = cfg
        .use_facenet
        .then(|| facenet_extract(g, vars, cfg, cond.source_latent));
    let id_tokens = cfg
        .use_id_adapter
        .then(|| id_context_tokens(g, vars, cfg, cond.id_embedding));
    let adapter_at = |vars: &ModelVars, site: &str| -> Option<(AdapterSiteVars, Var)> {
        id_tokens.map(|idt| (adapter_site_vars(vars, site), idt))
    };
    let ref_at = |site: &str| refs.as_ref().map(|r| r.get(site));

    // Trunk.
    let x = g.concat_channels(guided, cond.target_latent);
    let (wi, bi) = vars.wb("swap.conv_in");
    let x = g.conv2d(x, wi, bi, 1, 1);
    let temb = temb_forward(g, vars, t);

    let e0 = resblock(g, vars, "swap.enc0.res", x, temb, w0, w0);
    let (wd, bd) = vars.wb("swap.down0");
    let d = g.conv2d(e0, wd, bd, 2, 1);
    let e1 = resblock(g, vars, "swap.enc1.res", d, temb, w1, w1);
    let ad = adapter_at(vars, "enc1");
    let a1 = attention_block(
        g, vars, "swap.enc1.attn", heads1, half, e1,
        ref_at("enc1"), context, ad.as_ref().map(|(a, i)| (a, *i)),
    );

    let m = resblock(g, vars, "swap.mid.res1", a1, temb, w1, w1);
    let ad = adapter_at(vars, "mid");
    let m = attention_block(
        g, vars, "swap.mid.attn", heads1, half, m,
        ref_at("mid"), context, ad.as_ref().map(|(a, i)| (a, *i)),
    );
    let m = resblock(g, vars, "swap.mid.res2", m, temb, w1, w1);

    let cat1 = g.concat_channels(m, a1);
    let d1 = resblock(g, vars, "swap.dec1.res", cat1, temb, 2 * w1, w1);
    let ad = adapter_at(vars, "dec1");
    let d1 = attention_block(
        g, vars, "swap.dec1.attn", heads1, half, d1,
        ref_at("dec1"), context, ad.as_ref().map(|(a, i)| (a, *i)),
    );

    let up = g.upsample_nearest_2x(d1);
    let (wu, bu) = vars.wb("swap.up0");
    let up = g.conv2d(up, wu, bu, 1, 1);
    let cat0 = g.concat_channels(up, e0);
    let d0 = resblock(g, vars, "swap.dec0.res", cat0, temb, 2 * w0, w0);
    let ad = adapter_at(vars, "dec0");
    let d0 = attention_block(
        g, vars, "swap.dec0.attn", heads0, full, d0,
        ref_at("dec0"), context, ad.as_ref().map(|(a, i)| (a, *i)),
    );

    let (hg, hb) = vars.gb("swap.head.gn");
    let h = g.group_norm(d0, hg, hb, GN_GROUPS);
    let h = g.silu(h);
    let (hw, hbias) = vars.wb("swap.head.conv");
    let raw = g.conv2d(h, hw, hbias, 1, 1);

    // Derive the complementary parameterization in-graph, mirroring the
    // scalar conversions (same 1e-8 floors; a reciprocal multiply stands in
    // for the divide, which costs at most ~1e-12 relative drift).
    let out = match cfg.parameterization {
        Parameterization::PredictEps => {
            let sa = alpha_bar.sqrt().max(1e-8);
            let sn = (1.0 - alpha_bar).sqrt();
            let scaled = g.scale(raw, sn);
            let num = g.sub(noisy_latent, scaled);
            let x0 = g.scale(num, 1.0 / sa);
            (raw, x0)
        }
        Parameterization::PredictX0 => {
            let sa = alpha_bar.sqrt();
            let sn = (1.0 - alpha_bar).sqrt().max(1e-8);
            let scaled = g.scale(raw, sa);
            let num = g.sub(noisy_latent, scaled);
            let eps = g.scale(num, 1.0 / sn);
            (eps, raw)
        }
    };
    Ok(out)
}
