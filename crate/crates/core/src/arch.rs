//! The 4-level hierarchical encoder-decoder with intra-network weight
//! sharing, prompt blocks at skip connections, and on-the-go variant
//! switching.
//!
//! Each encoder/decoder level owns exactly one transformer block; the level's
//! depth comes from applying that block `f` times in sequence (a self loop
//! over shared weights). Switching between DyNet-L and DyNet-S changes only
//! the reuse frequencies, never the parameters, so every variant is served by
//! one checkpoint.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{self, BlockParams};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, uniform01, ParamId, ParamStore};

/// Reuse schedule defining one depth variant over the shared weight set.
/// `reuse_freqs[0..3]` apply symmetrically to encoder and decoder levels
/// 1-3; the fourth entry is the latent (bottom) level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub reuse_freqs: [usize; 4],
    pub base_channels: usize,
}

impl VariantConfig {
    pub fn dynet_l(base_channels: usize) -> Self {
        VariantConfig {
            name: "DyNet-L".to_string(),
            reuse_freqs: [4, 6, 6, 8],
            base_channels,
        }
    }

    pub fn dynet_s(base_channels: usize) -> Self {
        VariantConfig {
            name: "DyNet-S".to_string(),
            reuse_freqs: [2, 3, 3, 4],
            base_channels,
        }
    }

    pub fn custom(name: impl Into<String>, reuse_freqs: [usize; 4], base_channels: usize) -> Self {
        VariantConfig {
            name: name.into(),
            reuse_freqs,
            base_channels,
        }
    }

    /// Reuse frequency of the bottom (latent) level.
    pub fn latent_reuse(&self) -> usize {
        self.reuse_freqs[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.reuse_freqs.iter().any(|&f| f < 1) {
            return Err(Error::config(
                "reuse_freqs",
                format!(
                    "every reuse frequency must be >= 1, got {:?}",
                    self.reuse_freqs
                ),
            ));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels", "must be >= 1"));
        }
        Ok(())
    }
}

/// Prompt-bank sizing for the three skip connections (level 1 to 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Learnable prompt components per bank.
    pub components: usize,
    /// Prompt channel width per skip level.
    pub dims: [usize; 3],
    /// Stored spatial size of each component (resampled to the skip size).
    pub sizes: [usize; 3],
}

pub const PROMPT_COMPONENTS: usize = 5;

/// Full architecture hyper-parameters (variant-independent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub gamma: f64,
    pub heads: [usize; 4],
    pub prompt: PromptConfig,
}

impl ArchConfig {
    /// Declared defaults for a given base width. At C = 48 this is the
    /// preset the cost accounting is calibrated against: gamma 2.66, heads
    /// [1, 2, 4, 8], prompt dims [80, 160, 320] with stored component sizes
    /// [64, 40, 24].
    pub fn with_base_channels(c: usize) -> Self {
        let round4 = |x: f64| ((x / 4.0).round() as usize * 4).max(4);
        let dims = [
            round4(c as f64 * 5.0 / 3.0),
            round4(2.0 * c as f64 * 5.0 / 3.0),
            round4(4.0 * c as f64 * 5.0 / 3.0),
        ];
        ArchConfig {
            base_channels: c,
            gamma: blocks::DEFAULT_GAMMA,
            heads: [1, 2, 4, 8],
            prompt: PromptConfig {
                components: PROMPT_COMPONENTS,
                dims,
                sizes: [64, 40, 24],
            },
        }
    }

    /// Small configuration for smoke tests and toy runs.
    pub fn toy(c: usize) -> Self {
        let mut cfg = Self::with_base_channels(c);
        cfg.prompt.sizes = [16, 12, 8];
        cfg
    }

    /// Channel width at encoder level `l` (1-based; level 4 is the latent).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Channel width of the decoder blocks at level `l` (1-based, levels 1-3).
    /// Level 1 keeps the concatenated width; levels 2 and 3 reduce after the
    /// skip concatenation.
    pub fn decoder_channels(&self, level: usize) -> usize {
        match level {
            1 => 2 * self.base_channels,
            2 => 2 * self.base_channels,
            3 => 4 * self.base_channels,
            _ => panic!("decoder level out of range"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::config(
                "base_channels",
                "must be an even integer >= 2 (downsampling halves channels)",
            ));
        }
        if self.gamma <= 1.0 {
            return Err(Error::config("gamma", "expansion factor must exceed 1"));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let c = if i < 3 {
                self.level_channels(i + 1)
            } else {
                self.level_channels(4)
            };
            if h == 0 || c % h != 0 {
                return Err(Error::config(
                    "heads",
                    format!("heads[{i}] = {h} must divide level width {c}"),
                ));
            }
        }
        for l in 1..=3 {
            let dec = self.decoder_channels(l);
            if dec % self.heads[l - 1] != 0 {
                return Err(Error::config(
                    "heads",
                    format!(
                        "heads[{}] = {} must divide decoder width {dec}",
                        l - 1,
                        self.heads[l - 1]
                    ),
                ));
            }
        }
        if self.prompt.components == 0 {
            return Err(Error::config("prompt.components", "must be >= 1"));
        }
        for l in 1..=3 {
            let c = self.level_channels(l);
            let p = self.prompt.dims[l - 1];
            if p == 0 || self.prompt.sizes[l - 1] == 0 {
                return Err(Error::config("prompt.dims", "prompt dims/sizes must be >= 1"));
            }
            if (c + p) % self.heads[l - 1] != 0 {
                return Err(Error::config(
                    "prompt.dims",
                    format!(
                        "skip width {c} + prompt dim {p} at level {l} must be divisible by heads[{}] = {}",
                        l - 1,
                        self.heads[l - 1]
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// One prompt bank: components plus generation (PGM) and interaction (PIM)
/// weights for a single skip connection.
#[derive(Debug, Clone)]
pub struct PromptBankParams {
    pub components: ParamId,
    pub pgm_linear: ParamId,
    pub pgm_conv: ParamId,
    pub pim_block: BlockParams,
    pub pim_reduce: ParamId,
    pub skip_channels: usize,
    pub dim: usize,
    pub size: usize,
}

impl PromptBankParams {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        skip_channels: usize,
        dim: usize,
        size: usize,
        components: usize,
        heads: usize,
        gamma: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let comps = store.register(
            format!("{prefix}.components"),
            uniform01(rng, &[components, dim, size, size]),
        );
        let pgm_linear = store.register(
            format!("{prefix}.pgm.linear.weight"),
            kaiming_uniform(rng, &[components, skip_channels], skip_channels),
        );
        let pgm_conv = store.register(
            format!("{prefix}.pgm.conv.weight"),
            kaiming_uniform(rng, &[dim, dim, 3, 3], dim * 9),
        );
        let pim_block = BlockParams::register(
            store,
            &format!("{prefix}.pim.block"),
            skip_channels + dim,
            heads,
            gamma,
            rng,
        )?;
        let pim_reduce = store.register(
            format!("{prefix}.pim.reduce.weight"),
            kaiming_uniform(rng, &[skip_channels, skip_channels + dim, 1, 1], skip_channels + dim),
        );
        Ok(PromptBankParams {
            components: comps,
            pgm_linear,
            pgm_conv,
            pim_block,
            pim_reduce,
            skip_channels,
            dim,
            size,
        })
    }
}

/// Every parameter of the model, one `BlockParams` per encoder/decoder level
/// regardless of reuse frequency.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub stem: ParamId,
    pub enc: [BlockParams; 3],
    pub latent: BlockParams,
    pub down: [ParamId; 3],
    pub up: [ParamId; 3],
    pub reduce_l3: ParamId,
    pub reduce_l2: ParamId,
    pub dec: [BlockParams; 3],
    pub prompts: [PromptBankParams; 3],
    pub output: ParamId,
}

/// A model handle: shared weights plus the currently active depth variant.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub layout: ModelWeights,
    active: VariantConfig,
}

impl Model {
    /// Build a model with the declared defaults for the variant's base width.
    pub fn build_model(variant: &VariantConfig, seed: u64) -> Result<Model> {
        let arch = ArchConfig::with_base_channels(variant.base_channels);
        Model::build(&arch, variant.clone(), seed)
    }

    /// Build from an explicit architecture. Weight layout and initial values
    /// depend only on `arch` and `seed`, never on the variant.
    pub fn build(arch: &ArchConfig, variant: VariantConfig, seed: u64) -> Result<Model> {
        arch.validate()?;
        variant.validate()?;
        if variant.base_channels != arch.base_channels {
            return Err(Error::config(
                "base_channels",
                format!(
                    "variant base width {} does not match architecture width {}",
                    variant.base_channels, arch.base_channels
                ),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = arch.base_channels;
        let g = arch.gamma;

        let stem = store.register("stem.weight", kaiming_uniform(&mut rng, &[c, 3, 3, 3], 27));

        let mut enc = Vec::with_capacity(3);
        let mut down = Vec::with_capacity(3);
        for l in 1..=3usize {
            let cl = arch.level_channels(l);
            enc.push(BlockParams::register(
                &mut store,
                &format!("enc{l}"),
                cl,
                arch.heads[l - 1],
                g,
                &mut rng,
            )?);
            down.push(store.register(
                format!("down{l}.weight"),
                kaiming_uniform(&mut rng, &[cl / 2, cl, 3, 3], cl * 9),
            ));
        }
        let latent = BlockParams::register(
            &mut store,
            "latent",
            arch.level_channels(4),
            arch.heads[3],
            g,
            &mut rng,
        )?;

        // decoder side, bottom-up: upsample, fuse with the refined skip, blocks
        let mut prompts = Vec::with_capacity(3);
        let mut up = Vec::with_capacity(3);
        let mut dec = Vec::with_capacity(3);
        let mut reduce_l3 = None;
        let mut reduce_l2 = None;
        for l in (1..=3usize).rev() {
            let cl = arch.level_channels(l);
            let upper = arch.level_channels(l + 1); // channels entering the upsample
            prompts.push(PromptBankParams::register(
                &mut store,
                &format!("prompt{l}"),
                cl,
                arch.prompt.dims[l - 1],
                arch.prompt.sizes[l - 1],
                arch.prompt.components,
                arch.heads[l - 1],
                g,
                &mut rng,
            )?);
            up.push(store.register(
                format!("up{l}.weight"),
                kaiming_uniform(&mut rng, &[2 * upper, upper, 3, 3], upper * 9),
            ));
            let dec_c = arch.decoder_channels(l);
            match l {
                3 => {
                    reduce_l3 = Some(store.register(
                        "reduce3.weight",
                        kaiming_uniform(&mut rng, &[dec_c, 2 * dec_c, 1, 1], 2 * dec_c),
                    ));
                }
                2 => {
                    reduce_l2 = Some(store.register(
                        "reduce2.weight",
                        kaiming_uniform(&mut rng, &[dec_c, 2 * dec_c, 1, 1], 2 * dec_c),
                    ));
                }
                _ => {}
            }
            dec.push(BlockParams::register(
                &mut store,
                &format!("dec{l}"),
                dec_c,
                arch.heads[l - 1],
                g,
                &mut rng,
            )?);
        }
        prompts.reverse(); // index 0 = level 1
        up.reverse();
        dec.reverse();

        let output = store.register(
            "output.weight",
            kaiming_uniform(&mut rng, &[3, 2 * c, 3, 3], 2 * c * 9),
        );

        let layout = ModelWeights {
            stem,
            enc: enc.try_into().unwrap(),
            latent,
            down: down.try_into().unwrap(),
            up: up.try_into().unwrap(),
            reduce_l3: reduce_l3.unwrap(),
            reduce_l2: reduce_l2.unwrap(),
            dec: dec.try_into().unwrap(),
            prompts: prompts.try_into().unwrap(),
            output,
        };
        Ok(Model {
            arch: arch.clone(),
            store,
            layout,
            active: variant,
        })
    }

    pub fn active_variant(&self) -> &VariantConfig {
        &self.active
    }

    /// Change the reuse schedule. No parameters are copied or re-allocated;
    /// only subsequent forwards are affected.
    pub fn switch_variant(&mut self, cfg: VariantConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.base_channels != self.arch.base_channels {
            return Err(Error::config(
                "base_channels",
                format!(
                    "variant base width {} incompatible with model width {}",
                    cfg.base_channels, self.arch.base_channels
                ),
            ));
        }
        self.active = cfg;
        Ok(())
    }

    /// Restore the image through the full pipeline under the active variant.
    pub fn forward(&self, image: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let img = tape.leaf(image.clone());
        let out = self.forward_on_tape(&mut tape, img, &self.active)?;
        Ok(tape.value(out).clone())
    }

    /// Forward pass recorded on an existing tape (used by the trainer).
    pub fn forward_on_tape(&self, tape: &mut Tape, image: Var, variant: &VariantConfig) -> Result<Var> {
        variant.validate()?;
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "model forward",
                "[B, 3, H, W]",
                format!("{shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::argument(
                "image",
                format!(
                    "H and W must be divisible by 8; got {h}x{w}, pad to {}x{}",
                    h.div_ceil(8) * 8,
                    w.div_ceil(8) * 8
                ),
            ));
        }
        let f = variant.reuse_freqs;
        let lw = &self.layout;

        let stem_w = tape.param(lw.stem);
        let x0 = tape.conv2d(image, stem_w, 1, 1);

        // encoder
        let e1 = apply_level(tape, x0, &lw.enc[0], f[0])?;
        let d1w = tape.param(lw.down[0]);
        let x = tape.conv2d(e1, d1w, 1, 1);
        let x = tape.pixel_unshuffle(x, 2);
        let e2 = apply_level(tape, x, &lw.enc[1], f[1])?;
        let d2w = tape.param(lw.down[1]);
        let x = tape.conv2d(e2, d2w, 1, 1);
        let x = tape.pixel_unshuffle(x, 2);
        let e3 = apply_level(tape, x, &lw.enc[2], f[2])?;
        let d3w = tape.param(lw.down[2]);
        let x = tape.conv2d(e3, d3w, 1, 1);
        let x = tape.pixel_unshuffle(x, 2);
        let lat = apply_level(tape, x, &lw.latent, f[3])?;

        // decoder level 3
        let s3 = prompt_refine(tape, e3, &lw.prompts[2])?;
        let u3w = tape.param(lw.up[2]);
        let u = tape.conv2d(lat, u3w, 1, 1);
        let u = tape.pixel_shuffle(u, 2);
        let x = tape.concat_ch(&[u, s3]);
        let r3w = tape.param(lw.reduce_l3);
        let x = tape.conv2d(x, r3w, 0, 1);
        let d3 = apply_level(tape, x, &lw.dec[2], f[2])?;

        // decoder level 2
        let s2 = prompt_refine(tape, e2, &lw.prompts[1])?;
        let u2w = tape.param(lw.up[1]);
        let u = tape.conv2d(d3, u2w, 1, 1);
        let u = tape.pixel_shuffle(u, 2);
        let x = tape.concat_ch(&[u, s2]);
        let r2w = tape.param(lw.reduce_l2);
        let x = tape.conv2d(x, r2w, 0, 1);
        let d2 = apply_level(tape, x, &lw.dec[1], f[1])?;

        // decoder level 1 (no channel reduction; blocks run at 2C)
        let s1 = prompt_refine(tape, e1, &lw.prompts[0])?;
        let u1w = tape.param(lw.up[0]);
        let u = tape.conv2d(d2, u1w, 1, 1);
        let u = tape.pixel_shuffle(u, 2);
        let x = tape.concat_ch(&[u, s1]);
        let d1 = apply_level(tape, x, &lw.dec[0], f[0])?;

        let ow = tape.param(lw.output);
        let correction = tape.conv2d(d1, ow, 1, 1);
        // global residual: the network predicts a correction to the input
        let y = tape.add(image, correction);
        tape.ensure_finite(y, "model forward")?;
        Ok(y)
    }
}

/// Apply one level's shared block `f` times in sequence (the self loop).
pub fn apply_level(tape: &mut Tape, x: Var, block: &BlockParams, f: usize) -> Result<Var> {
    if f < 1 {
        return Err(Error::config(
            "reuse_freqs",
            format!("reuse frequency must be >= 1, got {f}"),
        ));
    }
    let mut cur = x;
    for _ in 0..f {
        cur = blocks::transformer_block_forward(tape, cur, block)?;
    }
    Ok(cur)
}

/// Prompt refinement at a skip connection: PGM generates an input-conditioned
/// prompt from the component bank, PIM fuses it with the skip features.
/// Output shape equals the skip shape.
pub fn prompt_refine(tape: &mut Tape, skip: Var, bank: &PromptBankParams) -> Result<Var> {
    let shape = tape.shape(skip).to_vec();
    if shape.len() != 4 || shape[1] != bank.skip_channels {
        return Err(Error::config(
            "prompt_refine",
            format!(
                "bank expects {} skip channels, got {:?}",
                bank.skip_channels, shape
            ),
        ));
    }
    let (h, w) = (shape[2], shape[3]);

    let lin = tape.param(bank.pgm_linear);
    let comps = tape.param(bank.components);
    let conv = tape.param(bank.pgm_conv);

    let pooled = tape.global_avg_pool(skip);
    let logits = tape.linear(pooled, lin);
    let weights = tape.softmax_last(logits);
    let prompt = tape.weighted_components(weights, comps);
    let prompt = tape.bilinear_resize(prompt, h, w);
    let prompt = tape.conv2d(prompt, conv, 1, 1);

    let cat = tape.concat_ch(&[skip, prompt]);
    let fused = blocks::transformer_block_forward(tape, cat, &bank.pim_block)?;
    let red = tape.param(bank.pim_reduce);
    Ok(tape.conv2d(fused, red, 0, 1))
}

/// PGM weighting for a skip tensor, exposed for verification: softmax over
/// the component logits, one row per batch sample.
pub fn prompt_weights(tape: &mut Tape, skip: Var, bank: &PromptBankParams) -> Var {
    let lin = tape.param(bank.pgm_linear);
    let pooled = tape.global_avg_pool(skip);
    let logits = tape.linear(pooled, lin);
    tape.softmax_last(logits)
}

const _: () = {
    fn assert_send_sync<T: Send + Sync>() {}
    fn check() {
        assert_send_sync::<Model>();
    }
    let _ = check;
};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn toy_model(variant: VariantConfig, seed: u64) -> Model {
        Model::build(&ArchConfig::toy(8), variant, seed).unwrap()
    }

    #[test]
    fn presets_match_published_schedules() {
        assert_eq!(VariantConfig::dynet_l(48).reuse_freqs, [4, 6, 6, 8]);
        assert_eq!(VariantConfig::dynet_s(48).reuse_freqs, [2, 3, 3, 4]);
        assert_eq!(VariantConfig::dynet_l(48).latent_reuse(), 8);
    }

    #[test]
    fn default_arch_at_c48_uses_paper_scale_prompts() {
        let arch = ArchConfig::with_base_channels(48);
        assert_eq!(arch.prompt.dims, [80, 160, 320]);
        assert_eq!(arch.heads, [1, 2, 4, 8]);
    }

    #[test]
    fn invalid_reuse_schedule_names_the_key() {
        let v = VariantConfig::custom("bad", [0, 1, 1, 1], 8);
        match v.validate().unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "reuse_freqs"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn build_is_variant_independent() {
        let l = toy_model(VariantConfig::dynet_l(8), 1234);
        let s = toy_model(VariantConfig::dynet_s(8), 1234);
        let names_l: Vec<_> = l.store.iter().map(|(n, _)| n.to_string()).collect();
        let names_s: Vec<_> = s.store.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names_l, names_s);
        for (ln, lv) in l.store.iter() {
            let id = s.store.lookup(ln).unwrap();
            assert_eq!(lv, s.store.value(id), "values differ for {ln}");
        }
    }

    #[test]
    fn forward_shapes_and_latent_dims() {
        // smoke config: C=8, reuse [1,1,1,1], 16x16 end to end
        let m = toy_model(VariantConfig::custom("smoke", [1, 1, 1, 1], 8), 7);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = randn(&mut rng, &[1, 3, 16, 16]);
        let out = m.forward(&img).unwrap();
        assert_eq!(out.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn forward_rejects_unaligned_sizes() {
        let m = toy_model(VariantConfig::custom("smoke", [1, 1, 1, 1], 8), 7);
        let img = ArrayD::zeros(IxDyn(&[1, 3, 20, 16]));
        let err = m.forward(&img).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("divisible by 8") && msg.contains("24"), "{msg}");
    }

    #[test]
    fn zeroed_output_conv_gives_identity() {
        let mut m = toy_model(VariantConfig::dynet_s(8), 3);
        blocks::zero_param(&mut m.store, m.layout.output);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let img = randn(&mut rng, &[2, 3, 16, 16]);
        let out = m.forward(&img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn switch_variant_round_trip_is_pure_config() {
        let mut m = toy_model(VariantConfig::dynet_l(8), 5);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let img = randn(&mut rng, &[1, 3, 16, 16]);
        let before = m.forward(&img).unwrap();
        m.switch_variant(VariantConfig::dynet_s(8)).unwrap();
        let s_out = m.forward(&img).unwrap();
        m.switch_variant(VariantConfig::dynet_l(8)).unwrap();
        let after = m.forward(&img).unwrap();
        assert_eq!(before, after, "L -> S -> L must be bit-identical");
        assert_ne!(before, s_out, "different depths produce different outputs");
    }

    #[test]
    fn switch_variant_rejects_incompatible_width() {
        let mut m = toy_model(VariantConfig::dynet_l(8), 5);
        let err = m.switch_variant(VariantConfig::dynet_s(16)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn apply_level_composition() {
        let m = toy_model(VariantConfig::dynet_s(8), 9);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 8, 8, 8]);

        // f = 1 equals a single block application
        let mut t1 = Tape::with_params(&m.store);
        let v = t1.leaf(x.clone());
        let once = apply_level(&mut t1, v, &m.layout.enc[0], 1).unwrap();
        let mut t2 = Tape::with_params(&m.store);
        let v2 = t2.leaf(x.clone());
        let single = blocks::transformer_block_forward(&mut t2, v2, &m.layout.enc[0]).unwrap();
        assert_eq!(t1.value(once), t2.value(single));

        // f = 2 equals manual composition, bit-identical
        let mut t3 = Tape::with_params(&m.store);
        let v3 = t3.leaf(x.clone());
        let twice = apply_level(&mut t3, v3, &m.layout.enc[0], 2).unwrap();
        let mut t4 = Tape::with_params(&m.store);
        let v4 = t4.leaf(x);
        let a = blocks::transformer_block_forward(&mut t4, v4, &m.layout.enc[0]).unwrap();
        let b = blocks::transformer_block_forward(&mut t4, a, &m.layout.enc[0]).unwrap();
        assert_eq!(t3.value(twice), t4.value(b));

        let mut t5 = Tape::with_params(&m.store);
        let v5 = t5.leaf(ArrayD::zeros(IxDyn(&[1, 8, 4, 4])));
        assert!(apply_level(&mut t5, v5, &m.layout.enc[0], 0).is_err());
    }

    /// Shared-weight gradient equals the summed per-application gradient of
    /// an unrolled reference with tied copies, for f in {2, 3}.
    #[test]
    fn self_loop_gradient_matches_unrolled_reference() {
        for f in [2usize, 3] {
            let mut shared_store = ParamStore::new();
            let mut rng = ChaCha12Rng::seed_from_u64(100 + f as u64);
            let block = BlockParams::register(
                &mut shared_store,
                "shared",
                8,
                2,
                blocks::DEFAULT_GAMMA,
                &mut rng,
            )
            .unwrap();

            // untied reference: f copies initialized with identical values
            let mut unrolled_store = ParamStore::new();
            let mut copies = Vec::new();
            for i in 0..f {
                let mut r = ChaCha12Rng::seed_from_u64(100 + f as u64);
                let c = BlockParams::register(
                    &mut unrolled_store,
                    &format!("copy{i}"),
                    8,
                    2,
                    blocks::DEFAULT_GAMMA,
                    &mut r,
                )
                .unwrap();
                copies.push(c);
            }

            let mut rng2 = ChaCha12Rng::seed_from_u64(55);
            let x = randn(&mut rng2, &[1, 8, 16, 16]);
            let proj = randn(&mut rng2, &[1, 8, 16, 16]);

            let mut ts = Tape::with_params(&shared_store);
            let v = ts.leaf(x.clone());
            let y = apply_level(&mut ts, v, &block, f).unwrap();
            let loss = ts.dot_const(y, &proj);
            let shared_grads = ts.backward(loss);

            let mut tu = Tape::with_params(&unrolled_store);
            let mut cur = tu.leaf(x.clone());
            for c in &copies {
                cur = blocks::transformer_block_forward(&mut tu, cur, c).unwrap();
            }
            let loss_u = tu.dot_const(cur, &proj);
            let unrolled_grads = tu.backward(loss_u);

            // outputs agree exactly
            assert_eq!(ts.value(y), tu.value(cur));

            // per-tensor: shared gradient == sum over copies
            let per_block = shared_store.len();
            for (j, id) in shared_store.ids().enumerate() {
                let sg = shared_grads[ts.param_var(id).unwrap()]
                    .clone()
                    .expect("shared grad missing");
                let mut sum: Option<ArrayD<f64>> = None;
                for i in 0..f {
                    let uid = crate::params::ParamId(i * per_block + j);
                    let g = unrolled_grads[tu.param_var(uid).unwrap()]
                        .clone()
                        .expect("unrolled grad missing");
                    sum = Some(match sum {
                        None => g,
                        Some(s) => s + &g,
                    });
                }
                let sum = sum.unwrap();
                let num: f64 = sg
                    .iter()
                    .zip(sum.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = sum.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                assert!(
                    num / den < 1e-5,
                    "f={f} param {} rel err {:.2e}",
                    shared_store.name(id),
                    num / den
                );
            }
        }
    }

    #[test]
    fn prompt_weights_sum_to_one_and_components_receive_gradient() {
        let m = toy_model(VariantConfig::dynet_s(8), 21);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let skip = randn(&mut rng, &[2, 8, 16, 16]);

        let mut tape = Tape::with_params(&m.store);
        let sv = tape.leaf(skip.clone());
        let w = prompt_weights(&mut tape, sv, &m.layout.prompts[0]);
        let wv = tape.value(w);
        assert_eq!(wv.shape(), &[2, 5]);
        for row in wv.as_slice().unwrap().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        let mut t2 = Tape::with_params(&m.store);
        let sv2 = t2.leaf(skip.clone());
        let refined = prompt_refine(&mut t2, sv2, &m.layout.prompts[0]).unwrap();
        assert_eq!(t2.shape(refined), &[2, 8, 16, 16]);
        let proj = randn(&mut rng, &[2, 8, 16, 16]);
        let loss = t2.dot_const(refined, &proj);
        let grads = t2.backward(loss);
        let comp_grad = grads[t2.param_var(m.layout.prompts[0].components).unwrap()]
            .as_ref()
            .expect("components receive gradient");
        // every one of the 5 components sees a nonzero gradient
        let k = 5;
        let piece = comp_grad.len() / k;
        let gs = comp_grad.as_slice().unwrap();
        for ki in 0..k {
            let norm: f64 = gs[ki * piece..(ki + 1) * piece]
                .iter()
                .map(|v| v * v)
                .sum();
            assert!(norm > 0.0, "component {ki} got zero gradient");
        }
    }

    #[test]
    fn unique_param_count_is_reuse_invariant() {
        let a = toy_model(VariantConfig::custom("f2", [2, 2, 2, 2], 8), 77);
        let b = toy_model(VariantConfig::custom("f8", [8, 8, 8, 8], 8), 77);
        assert_eq!(a.store.total_len(), b.store.total_len());
    }
}
