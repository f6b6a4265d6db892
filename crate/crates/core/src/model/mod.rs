//! Joint RGB + point-map flow transformer over a mixed token sequence.

mod lora;
mod patch;
mod rotary;
mod tokens;

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use lora::{route_lora, LoraAdapter, Projection, Routes};
pub use patch::{patchify, unpatchify, viewset_patches, ViewPatches};
pub use rotary::{apply_rotary_position, rotary_angles, rotary_table};
pub use tokens::{
    assemble_layout, assemble_sequence, build_attention_mask, Branch, Domain, LayoutSpec, TokenLayout, TokenRole,
    TokenSequence,
};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Element, Mask, ParamId, ParamStore, Tape, Tensor, Var};
use lora::normal_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Condition views the model is built for.
    pub views: usize,
    pub text_tokens: usize,
    pub num_captions: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub rope_theta: f64,
    /// Condition views share one grid shifted left of the target.
    pub shared_positions: bool,
    /// Pointmap queries may not attend to text keys.
    pub text_agnostic_mask: bool,
    pub domain_lora: bool,
    /// Generate and condition on point maps.
    pub pointmap: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 6,
            heads: 4,
            patch: 4,
            image_size: 32,
            views: 4,
            text_tokens: 8,
            num_captions: crate::dataset::NUM_CAPTIONS,
            mlp_ratio: 4,
            lora_rank: 16,
            lora_alpha: 16.0,
            rope_theta: 100.0,
            shared_positions: true,
            text_agnostic_mask: true,
            domain_lora: true,
            pointmap: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.views == 0 || self.num_captions == 0 {
            return bad("dim, depth, heads, views and num_captions must be positive".into());
        }
        if self.dim % self.heads != 0 || (self.dim / self.heads) % 4 != 0 {
            return bad(format!("head dim {} / {} must be a multiple of 4", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return bad("dim must be even".into());
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        if self.lora_rank == 0 || self.mlp_ratio == 0 {
            return bad("lora_rank and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn tokens_per_image(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn layout_spec(&self, text_tokens: usize) -> LayoutSpec {
        LayoutSpec {
            text_tokens,
            grid: self.grid(),
            views: self.views,
            pointmap: self.pointmap,
            shared_positions: self.shared_positions,
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, std: f64) -> Self {
        let weight = if std == 0.0 {
            Tensor::zeros([d_in, d_out])
        } else {
            normal_tensor(rng, [d_in, d_out], std)
        };
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    fn apply<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.weight], Some(bound[self.bias]))
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    qkv: Projection,
    q_norm: ParamId,
    k_norm: ParamId,
    out: Projection,
    fc1: Projection,
    fc2: Projection,
}

/// Network inputs in patch space (see [`patchify`]).
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// Noisy target rgb patches `[tokens, patch_dim]`.
    pub target_rgb: &'a Tensor,
    /// Noisy target pointmap patches; ignored by models without point maps.
    pub target_pm: Option<&'a Tensor>,
    /// Clean condition views; `None` substitutes the null condition.
    pub views: Option<&'a [ViewPatches]>,
    /// Caption id; `None` substitutes the null text.
    pub caption: Option<u32>,
    pub t: f32,
}

/// Velocity prediction for the target blocks.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[tokens, patch_dim]`.
    pub rgb: Var,
    pub pointmap: Option<Var>,
    /// Both target blocks stacked, rgb first.
    pub combined: Var,
    pub layout: TokenLayout,
}

/// Parameters and structure of the transformer.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    captions: ParamId,
    null_text: ParamId,
    null_condition: ParamId,
    domain_embed: ParamId,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
}

/// `[rows, cols]` matrix with orthonormal rows (if rows <= cols) or columns.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let (tall_r, tall_c) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| n.sample(rng));
    let q = g.qr().q();
    Tensor::from_fn([rows, cols], |idx| {
        let (r, c) = (idx / cols, idx % cols);
        (if rows >= cols { q[(r, c)] } else { q[(c, r)] }) as f32
    })
}

fn sinusoid(t: f32, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    let x = t as f64 * 1000.0;
    let freq = move |k: usize| (-(10_000f64.ln()) * k as f64 / half as f64).exp();
    (0..half).map(move |k| (x * freq(k)).cos()).chain((0..half).map(move |k| (x * freq(k)).sin()))
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.dim;
        let rng = &mut rng;
        let patch_embed = Linear {
            weight: p.add("patch_embed.weight", orthogonal(rng, cfg.patch_dim(), d)),
            bias: p.add("patch_embed.bias", Tensor::zeros([d])),
        };
        let captions = p.add("text.captions", normal_tensor(rng, [cfg.num_captions * cfg.text_tokens, d], 0.02));
        let null_text = p.add("text.null", normal_tensor(rng, [cfg.text_tokens.max(1), d], 0.02));
        let null_condition = p.add("condition.null", normal_tensor(rng, [1, d], 0.02));
        let domain_embed = p.add("domain_embed", normal_tensor(rng, [2, d], 0.5));
        let inv = 1.0 / (d as f64).sqrt();
        let time_in = Linear::new(&mut p, rng, "time.fc1", d, d, inv);
        let time_out = Linear::new(&mut p, rng, "time.fc2", d, d, inv);
        let (r, a) = (cfg.lora_rank, cfg.lora_alpha);
        let dl = cfg.domain_lora && cfg.pointmap;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = |s: &str| format!("blocks.{i}.{s}");
                let hidden = d * cfg.mlp_ratio;
                Block {
                    modulation: Linear::new(&mut p, rng, &name("modulation"), 2 * d, 6 * d, 0.0),
                    qkv: Projection::new(&mut p, rng, &name("qkv"), d, 3 * d, r, a, true, dl),
                    q_norm: p.add(name("q_norm"), Tensor::full([cfg.head_dim()], 1.0)),
                    k_norm: p.add(name("k_norm"), Tensor::full([cfg.head_dim()], 1.0)),
                    out: Projection::new(&mut p, rng, &name("out"), d, d, r, a, true, dl),
                    fc1: Projection::new(&mut p, rng, &name("fc1"), d, hidden, r, a, true, dl),
                    fc2: Projection::new(&mut p, rng, &name("fc2"), hidden, d, r, a, true, dl),
                }
            })
            .collect();
        let final_modulation = Linear::new(&mut p, rng, "final.modulation", 2 * d, 2 * d, 0.0);
        let head = Linear::new(&mut p, rng, "final.head", d, cfg.patch_dim(), 0.0);
        Ok(Self {
            cfg,
            params: p,
            patch_embed,
            captions,
            null_text,
            null_condition,
            domain_embed,
            time_in,
            time_out,
            blocks,
            final_modulation,
            head,
        })
    }

    /// Every routed projection, in forward order.
    pub fn projections(&self) -> Vec<&Projection> {
        self.blocks.iter().flat_map(|b| [&b.qkv, &b.out, &b.fc1, &b.fc2]).collect()
    }

    pub fn patch_embed_weight(&self) -> ParamId {
        self.patch_embed.weight
    }

    pub fn caption_table(&self) -> ParamId {
        self.captions
    }

    pub fn null_text(&self) -> ParamId {
        self.null_text
    }

    pub fn null_condition(&self) -> ParamId {
        self.null_condition
    }

    pub fn is_lora_param(&self, id: ParamId) -> bool {
        self.params.name(id).contains(".lora_")
    }

    /// Freeze everything except the LoRA adapters.
    pub fn freeze_base(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            let lora = self.is_lora_param(id);
            self.params.set_trainable(id, lora);
        }
    }

    /// Replace every parameter with `N(0, std)` noise (all zero-initialized
    /// gates, heads and adapters included). Used to exercise every path.
    pub fn randomize_parameters(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).expect("finite std");
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng) as f32);
        }
    }

    /// Timestep embedding for each value of `ts`: sinusoid features through
    /// a two-layer MLP. Returns `[ts.len(), dim]`.
    pub fn time_embedding<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, ts: &[f32]) -> Result<Var> {
        let d = self.cfg.dim;
        let feats: Vec<E> = ts.iter().flat_map(|t| sinusoid(*t, d)).map(E::of_f64).collect();
        let x = tape.constant(Tensor::new([ts.len(), d], feats)?)?;
        let h = self.time_in.apply(tape, bound, x)?;
        let h = tape.silu(h)?;
        self.time_out.apply(tape, bound, h)
    }

    /// Per-token timestep embeddings `[L, dim]` for a layout.
    pub fn token_time_embeddings<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, layout: &TokenLayout) -> Result<Var> {
        let (unique, index) = unique_by(layout.timesteps.iter().map(|t| t.to_bits()));
        let ts: Vec<f32> = unique.iter().map(|b| f32::from_bits(*b)).collect();
        let emb = self.time_embedding(tape, bound, &ts)?;
        tape.gather_rows(emb, index.into())
    }

    /// Embed patch rows with the shared patch projection.
    pub fn embed_patches<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, patches: Var) -> Result<Var> {
        self.patch_embed.apply(tape, bound, patches)
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<()> {
        let want = [self.cfg.tokens_per_image(), self.cfg.patch_dim()];
        let check = |t: &Tensor, what: &str| {
            if t.shape() != want {
                Err(Error::shape("model input", format!("{what} has shape {:?}, expected {want:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        check(input.target_rgb, "target rgb")?;
        if self.cfg.pointmap {
            check(input.target_pm.ok_or_else(|| Error::shape("model input", "missing target pointmap"))?, "target pointmap")?;
        }
        if let Some(views) = input.views {
            if views.len() != self.cfg.views {
                return Err(Error::ViewCount {
                    expected: self.cfg.views,
                    found: views.len(),
                });
            }
            for v in views {
                check(&v.rgb, "condition rgb")?;
                if self.cfg.pointmap {
                    check(&v.pointmap, "condition pointmap")?;
                }
            }
        }
        if let Some(c) = input.caption {
            if c as usize >= self.cfg.num_captions {
                return Err(Error::InvalidArgument(format!("caption id {c} out of range")));
            }
        }
        Ok(())
    }

    /// Embed the inputs and assemble the token sequence.
    pub fn embed_sequence<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, input: &ModelInput<'_>) -> Result<TokenSequence> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let per = cfg.tokens_per_image();
        let text = if cfg.text_tokens == 0 {
            None
        } else {
            Some(match input.caption {
                Some(c) => {
                    let start = c as usize * cfg.text_tokens;
                    let idx: Rc<[usize]> = (start..start + cfg.text_tokens).collect();
                    tape.gather_rows(bound[self.captions], idx)?
                }
                None => bound[self.null_text],
            })
        };
        let mut patches: Vec<&Tensor> = vec![input.target_rgb];
        if cfg.pointmap {
            patches.push(input.target_pm.expect("checked"));
        }
        if let Some(views) = input.views {
            for v in views {
                patches.push(&v.rgb);
                if cfg.pointmap {
                    patches.push(&v.pointmap);
                }
            }
        }
        let mut data = Vec::with_capacity(patches.len() * per * cfg.patch_dim());
        for p in &patches {
            data.extend(p.data().iter().map(|v| E::of_f64(*v as f64)));
        }
        let raw = tape.constant(Tensor::new([patches.len() * per, cfg.patch_dim()], data)?)?;
        let emb = self.embed_patches(tape, bound, raw)?;
        let block = |tape: &mut Tape<E>, b: usize| -> Result<Var> {
            let idx: Rc<[usize]> = (b * per..(b + 1) * per).collect();
            tape.gather_rows(emb, idx)
        };
        let target_rgb = block(tape, 0)?;
        let target_pm = if cfg.pointmap { Some(block(tape, 1)?) } else { None };
        let mut views = Vec::with_capacity(cfg.views);
        let null_block = match input.views {
            Some(_) => None,
            None => Some(tape.gather_rows(bound[self.null_condition], vec![0; per].into())?),
        };
        let first = if cfg.pointmap { 2 } else { 1 };
        let stride = if cfg.pointmap { 2 } else { 1 };
        for v in 0..cfg.views {
            let pair = match null_block {
                Some(n) => (n, cfg.pointmap.then_some(n)),
                None => {
                    let rgb = block(tape, first + v * stride)?;
                    let pm = if cfg.pointmap { Some(block(tape, first + v * stride + 1)?) } else { None };
                    (rgb, pm)
                }
            };
            views.push(pair);
        }
        assemble_sequence(tape, text, target_rgb, target_pm, &views, cfg.grid(), input.t, cfg.shared_positions)
    }

    /// Attention mask the model uses for `layout`.
    pub fn attention_mask(&self, layout: &TokenLayout) -> Mask {
        if self.cfg.text_agnostic_mask {
            build_attention_mask(layout)
        } else {
            Mask::all_allowed([layout.len(), layout.len()])
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, input: &ModelInput<'_>) -> Result<ModelOutput> {
        let seq = self.embed_sequence(tape, bound, input)?;
        self.forward_sequence(tape, bound, seq)
    }

    /// Run the transformer on an assembled sequence.
    pub fn forward_sequence<E: Element>(&self, tape: &mut Tape<E>, bound: &Bound, seq: TokenSequence) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let layout = seq.layout;
        let l = layout.len();

        // conditioning vectors for each distinct (timestep, domain) pair
        let (t_unique, t_index) = unique_by(layout.timesteps.iter().map(|t| t.to_bits()));
        let dom: Vec<usize> = layout.roles.iter().map(|r| (r.domain == Domain::Pointmap) as usize).collect();
        let (keys, token_key) = unique_by(t_index.iter().zip(&dom).map(|(t, d)| (*t, *d)));
        let ts: Vec<f32> = t_unique.iter().map(|b| f32::from_bits(*b)).collect();
        let temb = self.time_embedding(tape, bound, &ts)?;
        let temb = tape.gather_rows(temb, keys.iter().map(|k| k.0).collect())?;
        let demb = tape.gather_rows(bound[self.domain_embed], keys.iter().map(|k| k.1).collect())?;
        let cond = tape.concat_cols(&[temb, demb])?;
        let cond = tape.silu(cond)?;
        let token_key: Rc<[usize]> = token_key.into();

        let mask = self.attention_mask(&layout);
        let rot = rotary_table::<E>(&layout.positions, cfg.head_dim(), cfg.rope_theta)?;
        let routes = Routes::from_layout(&layout);
        let ones = tape.constant(Tensor::full([d], E::one()))?;
        let attn_scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        let mut x = seq.embeddings;
        for b in &self.blocks {
            let m = b.modulation.apply(tape, bound, cond)?;
            let m = tape.gather_rows(m, token_key.clone())?;
            let chunk = |tape: &mut Tape<E>, k: usize| tape.slice_cols(m, k * d, d);
            let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
            let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

            let h = modulate(tape, x, ones, shift1, scale1)?;
            let qkv = route_lora(tape, bound, &b.qkv, h, &routes)?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let q = tape.split_heads(q, cfg.heads)?;
            let k = tape.split_heads(k, cfg.heads)?;
            let v = tape.split_heads(v, cfg.heads)?;
            let q = tape.rmsnorm(q, bound[b.q_norm])?;
            let k = tape.rmsnorm(k, bound[b.k_norm])?;
            let q = tape.rotate_pairs(q, rot.clone())?;
            let k = tape.rotate_pairs(k, rot.clone())?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, attn_scale)?;
            let probs = tape.softmax_lastdim(scores, Some(&mask))?;
            let attn = tape.bmm(probs, v, false)?;
            let attn = tape.merge_heads(attn)?;
            let attn = route_lora(tape, bound, &b.out, attn, &routes)?;
            let attn = tape.mul(attn, gate1)?;
            x = tape.add(x, attn)?;

            let h = modulate(tape, x, ones, shift2, scale2)?;
            let h = route_lora(tape, bound, &b.fc1, h, &routes)?;
            let h = tape.gelu(h)?;
            let h = route_lora(tape, bound, &b.fc2, h, &routes)?;
            let h = tape.mul(h, gate2)?;
            x = tape.add(x, h)?;
        }

        let target: Rc<[usize]> = layout.target_indices().into();
        let xt = tape.gather_rows(x, target.clone())?;
        let fm = self.final_modulation.apply(tape, bound, cond)?;
        let fm = tape.gather_rows(fm, target.iter().map(|&i| token_key[i]).collect())?;
        let shift = tape.slice_cols(fm, 0, d)?;
        let scale = tape.slice_cols(fm, d, d)?;
        let h = modulate(tape, xt, ones, shift, scale)?;
        let combined = self.head.apply(tape, bound, h)?;

        let per = cfg.tokens_per_image();
        let rgb = tape.gather_rows(combined, (0..per).collect())?;
        let pointmap = if cfg.pointmap {
            Some(tape.gather_rows(combined, (per..2 * per).collect())?)
        } else {
            None
        };
        debug_assert_eq!(l, layout.len());
        Ok(ModelOutput {
            rgb,
            pointmap,
            combined,
            layout,
        })
    }
}

/// `rmsnorm(x) * (1 + scale) + shift`, all per token.
fn modulate<E: Element>(tape: &mut Tape<E>, x: Var, ones: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.rmsnorm(x, ones)?;
    let s = tape.add_row(scale, ones)?;
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}

/// Distinct values in first-seen order plus the index of each input value.
fn unique_by<K: Copy + Eq + std::hash::Hash>(items: impl Iterator<Item = K>) -> (Vec<K>, Vec<usize>) {
    let mut seen = HashMap::new();
    let mut unique = Vec::new();
    let index = items
        .map(|k| {
            *seen.entry(k).or_insert_with(|| {
                unique.push(k);
                unique.len() - 1
            })
        })
        .collect();
    (unique, index)
}
