//! Small vision transformer: patch embedding, class token, pre-norm blocks and
//! the classifier head. The last block is the transferability-weighted one
//! (see [`crate::tam`]).

use rand::Rng;

use crate::adversarial::Discriminator;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tam;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            classes: 4,
            mlp_ratio: 4,
            init_std: INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches R.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per image, R + 1.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Splits an `size x size x channels` image (row-major, channel-last) into
/// non-overlapping `patch x patch` patches in row-major patch order.
pub fn patchify(image: &[f64], size: usize, channels: usize, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image size {size} is not divisible by patch size {patch}"
        )));
    }
    if image.len() != size * size * channels {
        return Err(Error::shape("patchify", &[image.len()], &[size, size, channels]));
    }
    let grid = size / patch;
    let mut patches = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut p = Vec::with_capacity(patch * patch * channels);
            for y in 0..patch {
                let row = gy * patch + y;
                let start = (row * size + gx * patch) * channels;
                p.extend_from_slice(&image[start..start + patch * channels]);
            }
            patches.push(p);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f64>], size: usize, channels: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image size {size} is not divisible by patch size {patch}"
        )));
    }
    let grid = size / patch;
    if patches.len() != grid * grid || patches.iter().any(|p| p.len() != patch * patch * channels) {
        return Err(Error::Validation("patch list does not match the image geometry".into()));
    }
    let mut image = vec![0.0; size * size * channels];
    for (idx, p) in patches.iter().enumerate() {
        let (gy, gx) = (idx / grid, idx % grid);
        for y in 0..patch {
            let start = ((gy * patch + y) * size + gx * patch) * channels;
            image[start..start + patch * channels]
                .copy_from_slice(&p[y * patch * channels..(y + 1) * patch * channels]);
        }
    }
    Ok(image)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], std))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], std))?;
        Ok(Linear { weight, bias: None })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        match self.bias {
            Some(bias) => {
                let b = tape.param(store, bias);
                tape.linear(x, w, b)
            }
            None => tape.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Output of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[n*T, d]` after the output projection.
    pub out: Var,
    /// `[n*heads, T, T]` softmax weights before any transferability weighting.
    pub weights: Var,
}

/// Multi-head scaled dot-product self-attention with separate Q/K/V projections.
/// Head `h` owns columns `h*dh .. (h+1)*dh` of each projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    fn split_heads(&self, tape: &mut Tape, x: Var, n: usize, tokens: usize) -> Result<Var> {
        let (k, dh) = (self.heads, self.head_dim);
        let d = k * dh;
        let mut index = Vec::with_capacity(n * tokens * d);
        for i in 0..n {
            for h in 0..k {
                for t in 0..tokens {
                    let base = (i * tokens + t) * d + h * dh;
                    index.extend(base..base + dh);
                }
            }
        }
        tape.gather(x, index, vec![n * k, tokens, dh])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, n: usize, tokens: usize) -> Result<Var> {
        let (k, dh) = (self.heads, self.head_dim);
        let mut index = Vec::with_capacity(n * tokens * k * dh);
        for i in 0..n {
            for t in 0..tokens {
                for h in 0..k {
                    let base = ((i * k + h) * tokens + t) * dh;
                    index.extend(base..base + dh);
                }
            }
        }
        tape.gather(x, index, vec![n * tokens, k * dh])
    }

    /// Attention over `n` images of `tokens` rows each. With `class_weights`
    /// (`n x tokens`, entry 0 of every image being 1) the class-token row of
    /// every head is multiplied elementwise by that image's weights after the
    /// softmax; the weights are constants on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        n: usize,
        tokens: usize,
        class_weights: Option<&[f64]>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(tape, store, x)?;
        let kx = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, n, tokens)?;
        let kx = self.split_heads(tape, kx, n, tokens)?;
        let v = self.split_heads(tape, v, n, tokens)?;

        let scores = tape.matmul_ex(q, kx, true)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        let weights = tape.softmax(scores);

        let mixed = match class_weights {
            None => weights,
            Some(cw) => {
                let mask = tam::class_row_mask(cw, n, self.heads, tokens)?;
                let mask = tape.constant(mask);
                tape.hadamard(weights, mask)?
            }
        };
        let ctx = tape.matmul(mixed, v)?;
        let ctx = self.merge_heads(tape, ctx, n, tokens)?;
        let out = self.out.forward(tape, store, ctx)?;
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// Pre-norm transformer block: `x' = MSA(LN(x)) + x`, `out = MLP(LN(x')) + x'`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let std = cfg.init_std;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d)?;
        let attn = Attention {
            query: Linear::new(store, rng, &format!("{name}.attn.query"), d, d, std)?,
            // A key bias shifts every score of a query row equally, which the
            // softmax cancels, so the key projection has none.
            key: Linear::without_bias(store, rng, &format!("{name}.attn.key"), d, d, std)?,
            value: Linear::new(store, rng, &format!("{name}.attn.value"), d, d, std)?,
            out: Linear::new(store, rng, &format!("{name}.attn.out"), d, d, std)?,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
        };
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d)?;
        let hidden = d * cfg.mlp_ratio;
        let mlp = Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, hidden, std)?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, d, std)?,
        };
        Ok(Block { ln1, attn, ln2, mlp })
    }

    /// Runs the block on an already normalized input `normed = LN1(x)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_normed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        normed: Var,
        n: usize,
        tokens: usize,
        class_weights: Option<&[f64]>,
    ) -> Result<BlockOutput> {
        let a = self.attn.forward(tape, store, normed, n, tokens, class_weights)?;
        let x = tape.add(a.out, x)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        let out = tape.add(h, x)?;
        Ok(BlockOutput {
            out,
            attention: a.weights,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, n: usize, tokens: usize) -> Result<BlockOutput> {
        let normed = self.ln1.forward(tape, store, x)?;
        self.forward_normed(tape, store, x, normed, n, tokens, None)
    }
}

/// How the last layer weights the class-token attention row.
#[derive(Clone, Copy, Debug)]
pub enum Transferability<'a> {
    /// Plain multi-head attention in the last layer.
    Vanilla,
    /// Weights from the patch discriminator's entropy (requires a probe).
    Discriminator,
    /// Caller-supplied weights, `n x R`, each in `[0, 1]`.
    Fixed(&'a [f64]),
}

/// Patch-level discriminator applied to the normalized patch tokens that enter
/// the last layer, behind a gradient reversal of strength `grl_lambda`.
#[derive(Clone, Copy, Debug)]
pub struct PatchProbe<'a> {
    pub disc: &'a Discriminator,
    pub grl_lambda: f64,
}

#[derive(Clone, Debug)]
pub struct Features {
    pub n: usize,
    /// `[n, d]` final (normalized) class-token states.
    pub class_state: Var,
    /// `[n*R, d]` final (normalized) patch-token states.
    pub patch_states: Var,
    /// Softmax weights of the last layer, `[n*heads, T, T]`.
    pub attention: Var,
    /// `[n*R, 1]` patch discriminator source probabilities, when probed.
    pub patch_probs: Option<Var>,
    /// `n x R` transferabilities used by the last layer, when it was weighted.
    pub transferability: Option<Vec<f64>>,
}

/// Class-token attention of one image in the last layer, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnRecord {
    /// Raw softmax row, `T` entries; entry 0 is the class self-weight.
    pub raw: Vec<f64>,
    /// `R` transferabilities (all ones for the vanilla layer).
    pub transferability: Vec<f64>,
    /// `raw ⊙ [1; t]`, `T` entries.
    pub effective: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    /// Layers 1..L-1.
    pub blocks: Vec<Block>,
    /// Layer L, the transferability adaptation block.
    pub tam: Block,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl VisionTransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let std = config.init_std;
        let patch_embed = Linear::new(store, rng, "patch_embed", config.patch_len(), d, std)?;
        let cls_token = store.register("cls_token", Tensor::zeros(&[1, d]))?;
        let pos_embed = store.register("pos_embed", trunc_normal(rng, &[config.tokens(), d], std))?;
        let blocks = (0..config.depth - 1)
            .map(|i| Block::new(store, rng, &format!("blocks.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let tam = Block::new(store, rng, "tam", config)?;
        let norm = LayerNorm::new(store, "norm", d)?;
        let head = Linear::new(store, rng, "head", d, config.classes, std)?;
        Ok(VisionTransformer {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            tam,
            norm,
            head,
        })
    }

    /// Patch rows of a batch of `n` images, `[n*R, P*P*C]`.
    pub fn patch_matrix(&self, images: &[f64], n: usize) -> Result<Tensor> {
        let cfg = &self.config;
        if images.len() != n * cfg.image_len() {
            return Err(Error::shape("patch_matrix", &[images.len()], &[n, cfg.image_len()]));
        }
        let mut data = Vec::with_capacity(n * cfg.num_patches() * cfg.patch_len());
        for img in images.chunks(cfg.image_len()) {
            for p in patchify(img, cfg.image_size, cfg.channels, cfg.patch_size)? {
                data.extend(p);
            }
        }
        Tensor::new(vec![n * cfg.num_patches(), cfg.patch_len()], data)
    }

    /// `[n*T, d]` token states: class token followed by embedded patches, plus
    /// position embeddings.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: Var, n: usize) -> Result<Var> {
        let r = self.config.num_patches();
        let t = self.config.tokens();
        let d = self.config.embed_dim;
        if tape.shape(patches) != [n * r, self.config.patch_len()] {
            return Err(Error::shape("embed", tape.shape(patches), &[n * r, self.config.patch_len()]));
        }
        let emb = self.patch_embed.forward(tape, store, patches)?;
        let cls = tape.param(store, self.cls_token);
        let cls_rows = tape.gather(cls, (0..n).flat_map(|_| 0..d).collect(), vec![n, d])?;
        let stacked = tape.concat(cls_rows, emb)?;
        let mut index = Vec::with_capacity(n * t * d);
        for i in 0..n {
            index.extend(i * d..(i + 1) * d);
            for p in 0..r {
                let row = n + i * r + p;
                index.extend(row * d..(row + 1) * d);
            }
        }
        let tokens = tape.gather(stacked, index, vec![n * t, d])?;
        let pos = tape.param(store, self.pos_embed);
        let pos_rows = tape.gather(pos, (0..n).flat_map(|_| 0..t * d).collect(), vec![n * t, d])?;
        tape.add(tokens, pos_rows)
    }

    fn select_rows(tape: &mut Tape, x: Var, n: usize, tokens: usize, class_rows: bool) -> Result<Var> {
        let d = tape.shape(x)[1];
        let mut index = Vec::new();
        for i in 0..n {
            if class_rows {
                let row = i * tokens;
                index.extend(row * d..(row + 1) * d);
            } else {
                for t in 1..tokens {
                    let row = i * tokens + t;
                    index.extend(row * d..(row + 1) * d);
                }
            }
        }
        let rows = if class_rows { n } else { n * (tokens - 1) };
        tape.gather(x, index, vec![rows, d])
    }

    /// Embedding, layers 1..L-1, the transferability-weighted last layer and
    /// the final layer norm.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[f64],
        n: usize,
        probe: Option<PatchProbe<'_>>,
        mode: Transferability<'_>,
    ) -> Result<Features> {
        let cfg = &self.config;
        let (r, t) = (cfg.num_patches(), cfg.tokens());
        let patches = self.patch_matrix(images, n)?;
        let patches = tape.constant(patches);
        let mut x = self.embed(tape, store, patches, n)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, n, t)?.out;
        }

        let normed = self.tam.ln1.forward(tape, store, x)?;
        let patch_probs = match probe {
            Some(p) => {
                let rows = Self::select_rows(tape, normed, n, t, false)?;
                let rows = tape.grl(rows, p.grl_lambda);
                Some(p.disc.forward(tape, store, rows)?)
            }
            None => None,
        };
        let transferability = match mode {
            Transferability::Vanilla => None,
            Transferability::Fixed(w) => {
                if w.len() != n * r {
                    return Err(Error::shape("transferability", &[w.len()], &[n, r]));
                }
                Some(w.to_vec())
            }
            Transferability::Discriminator => {
                let probs = patch_probs.ok_or_else(|| {
                    Error::Contract("discriminator transferability needs a patch probe".into())
                })?;
                Some(tam::patch_transferability(tape.data(probs))?.into_inner())
            }
        };
        let class_weights = transferability.as_ref().map(|t| tam::class_weights(t, n, r));
        let last = self
            .tam
            .forward_normed(tape, store, x, normed, n, t, class_weights.as_deref())?;

        let out = self.norm.forward(tape, store, last.out)?;
        let class_state = Self::select_rows(tape, out, n, t, true)?;
        let patch_states = Self::select_rows(tape, out, n, t, false)?;
        Ok(Features {
            n,
            class_state,
            patch_states,
            attention: last.attention,
            patch_probs,
            transferability,
        })
    }

    /// Classifier head on `[n, d]` class states.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, class_state: Var) -> Result<Var> {
        self.head.forward(tape, store, class_state)
    }

    /// Head-averaged class-token attention of image `i` in the last layer.
    pub fn attention_record(&self, tape: &Tape, features: &Features, i: usize) -> AttnRecord {
        let k = self.config.heads;
        let t = self.config.tokens();
        let r = self.config.num_patches();
        let w = tape.data(features.attention);
        let mut raw = vec![0.0; t];
        for h in 0..k {
            let row = &w[(i * k + h) * t * t..][..t];
            raw.iter_mut().zip(row).for_each(|(a, b)| *a += b / k as f64);
        }
        let transferability = match &features.transferability {
            Some(all) => all[i * r..(i + 1) * r].to_vec(),
            None => vec![1.0; r],
        };
        let effective = std::iter::once(raw[0])
            .chain(raw[1..].iter().zip(&transferability).map(|(a, b)| a * b))
            .collect();
        AttnRecord {
            raw,
            transferability,
            effective,
        }
    }
}
