//! Frozen toy two-tower transformer encoder.
//!
//! Both towers are pre-norm transformers over `[prompt slots, input tokens]`.
//! The embedding is read from the first input token after the final layer,
//! normalized, projected into the shared space and scaled to unit length.

use gatelab_autodiff::{Graph, ParamGroup, Parameter, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng;

const LN_EPS: f64 = 1e-5;
const GELU_SLOPE: f64 = 1.702;

/// Number of class-specific tokens in a class name sequence.
pub const CLASS_NAME_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub text_width: usize,
    pub vision_width: usize,
    pub n_heads: usize,
    pub max_prompt_len: usize,
    pub n_word_tokens: usize,
    pub n_patch_tokens: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Logit scale applied to cosine similarities.
    pub logit_scale: f64,
    /// Correlation between the vision and text tower weights. Only used when
    /// both towers have the same width.
    pub tower_correlation: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            text_width: 64,
            vision_width: 64,
            n_heads: 4,
            max_prompt_len: 8,
            n_word_tokens: 16,
            n_patch_tokens: 16,
            embed_dim: 32,
            mlp_ratio: 2,
            vocab_size: 256,
            logit_scale: 20.0,
            tower_correlation: 1.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(LabError::BadValue {
                key: format!("encoder.{key}"),
                reason: reason.to_string(),
            })
        };
        if self.depth < 2 {
            return bad("depth", "must be at least 2");
        }
        if self.n_heads == 0 {
            return bad("n_heads", "must be positive");
        }
        if self.text_width == 0 || !self.text_width.is_multiple_of(self.n_heads) {
            return bad("text_width", "must be a positive multiple of n_heads");
        }
        if self.vision_width == 0 || !self.vision_width.is_multiple_of(self.n_heads) {
            return bad("vision_width", "must be a positive multiple of n_heads");
        }
        if self.max_prompt_len == 0 {
            return bad("max_prompt_len", "must be at least 1");
        }
        if self.n_word_tokens < CLASS_NAME_TOKENS + 1 {
            return bad("n_word_tokens", "too short to hold a class name");
        }
        if self.n_patch_tokens == 0 {
            return bad("n_patch_tokens", "must be positive");
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim", "embed_dim and mlp_ratio must be positive");
        }
        if self.vocab_size < self.n_word_tokens + CLASS_NAME_TOKENS {
            return bad("vocab_size", "too small for the word sequence");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale", "must be positive and finite");
        }
        if !(-1.0..=1.0).contains(&self.tower_correlation) {
            return bad("tower_correlation", "must lie in [-1, 1]");
        }
        Ok(())
    }
}

/// Insertion strength of a prompt slice at one layer.
#[derive(Clone, Copy, Debug)]
pub enum InsertWeight {
    Const(f64),
    Var(Var),
}

/// Prompts entering one layer together with their insertion strength.
///
/// `prompts` is `(N, width)` shared by every sequence or `(S, N, width)`
/// with one slice per sequence.
#[derive(Clone, Copy, Debug)]
pub struct Insertion {
    pub prompts: Var,
    pub weight: InsertWeight,
}

impl Insertion {
    pub fn replace(prompts: Var) -> Self {
        Self {
            prompts,
            weight: InsertWeight::Const(1.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    qkv: Parameter,
    out: Parameter,
    fc1: Parameter,
    fc2: Parameter,
}

#[derive(Clone, Debug)]
pub struct Tower {
    name: &'static str,
    width: usize,
    n_heads: usize,
    blocks: Vec<Block>,
    proj: Parameter,
}

#[derive(Clone, Debug)]
pub struct ClassEmbedding {
    pub class_id: usize,
    pub token_ids: Vec<usize>,
    /// Unit-norm embedding without prompts.
    pub embedding: Vec<f64>,
}

/// Token id sequence naming a class: start token, class-specific tokens drawn
/// deterministically from the class id, then a shared template.
pub fn class_token_ids(class_id: usize, n_word_tokens: usize, vocab_size: usize) -> Vec<usize> {
    let template = n_word_tokens - 1 - CLASS_NAME_TOKENS;
    let first_free = 1 + template;
    let span = (vocab_size - first_free) as u64;
    let mut ids = Vec::with_capacity(n_word_tokens);
    ids.push(0);
    for j in 0..CLASS_NAME_TOKENS as u64 {
        let h = (class_id as u64)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(j.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .rotate_left(29)
            .wrapping_mul(0x94d0_49bb_1331_11eb);
        ids.push(first_free + (h % span) as usize);
    }
    ids.extend(1..first_free);
    ids
}

#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    text: Tower,
    vision: Tower,
    token_embedding: Parameter,
}

fn frozen(name: String, value: Tensor) -> Parameter {
    Parameter::frozen(name, ParamGroup::Backbone, value)
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let draw = |name: &str, shape: &[usize], fan_in: usize| {
            rng::gaussian(&mut rng::stream(seed, name), shape, 1.0 / (fan_in as f64).sqrt())
        };
        let build = |tower: &'static str, width: usize, partner: Option<(&Tower, f64)>| {
            let hidden = width * config.mlp_ratio;
            let mix = |name: String, shape: &[usize], fan_in: usize| {
                let own = draw(&name, shape, fan_in);
                let value = match partner {
                    Some((_, rho)) => {
                        let shared = partner_weight(partner.map(|p| p.0), &name, tower);
                        let mut v = shared.clone();
                        v.scale_in_place(rho);
                        v.axpy((1.0 - rho * rho).max(0.0).sqrt(), &own)
                            .expect("tied towers have identical shapes");
                        v
                    }
                    None => own,
                };
                frozen(name, value)
            };
            let blocks = (0..config.depth)
                .map(|d| Block {
                    qkv: mix(format!("{tower}.{d}.qkv"), &[width, 3 * width], width),
                    out: mix(format!("{tower}.{d}.out"), &[width, width], width),
                    fc1: mix(format!("{tower}.{d}.fc1"), &[width, hidden], width),
                    fc2: mix(format!("{tower}.{d}.fc2"), &[hidden, width], hidden),
                })
                .collect();
            let proj = mix(format!("{tower}.proj"), &[width, config.embed_dim], width);
            Tower {
                name: tower,
                width,
                n_heads: config.n_heads,
                blocks,
                proj,
            }
        };
        let text = build("text", config.text_width, None);
        let tied = config.text_width == config.vision_width && config.tower_correlation != 0.0;
        let vision = if tied {
            build("vision", config.vision_width, Some((&text, config.tower_correlation)))
        } else {
            build("vision", config.vision_width, None)
        };
        let token_embedding = frozen(
            "text.token_embedding".into(),
            rng::gaussian(
                &mut rng::stream(seed, "text.token_embedding"),
                &[config.vocab_size, config.text_width],
                1.0,
            ),
        );
        Ok(Self {
            config,
            text,
            vision,
            token_embedding,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn text_tower(&self) -> &Tower {
        &self.text
    }

    pub fn vision_tower(&self) -> &Tower {
        &self.vision
    }

    /// Every backbone weight, in a fixed order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embedding];
        for tower in [&self.text, &self.vision] {
            for b in &tower.blocks {
                out.extend([&b.qkv, &b.out, &b.fc1, &b.fc2]);
            }
            out.push(&tower.proj);
        }
        out
    }

    /// Embedding table rows for a token sequence, `(T, text_width)`.
    pub fn embed_words(&self, ids: &[usize]) -> Result<Tensor> {
        let w = self.config.text_width;
        let table = self.token_embedding.value.data();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(LabError::invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(&table[id * w..(id + 1) * w]);
        }
        Ok(Tensor::new(vec![ids.len(), w], data)?)
    }

    pub fn class_token_ids(&self, class_id: usize) -> Vec<usize> {
        class_token_ids(class_id, self.config.n_word_tokens, self.config.vocab_size)
    }

    /// Stacked word embeddings for several classes, `(C, T, text_width)`.
    pub fn class_inputs(&self, class_ids: &[usize]) -> Result<Tensor> {
        let (t, w) = (self.config.n_word_tokens, self.config.text_width);
        let mut data = Vec::with_capacity(class_ids.len() * t * w);
        for &c in class_ids {
            data.extend(self.embed_words(&self.class_token_ids(c))?.into_data());
        }
        Ok(Tensor::new(vec![class_ids.len(), t, w], data)?)
    }

    /// Prompt-free class embeddings.
    pub fn class_embeddings(&self, class_ids: &[usize]) -> Result<Vec<ClassEmbedding>> {
        let g = Graph::new();
        let tokens = g.constant(self.class_inputs(class_ids)?)?;
        let emb = g.value(self.encode_text(&g, &[], tokens)?)?;
        Ok(class_ids
            .iter()
            .enumerate()
            .map(|(i, &c)| ClassEmbedding {
                class_id: c,
                token_ids: self.class_token_ids(c),
                embedding: emb.row(i).to_vec(),
            })
            .collect())
    }

    /// Encodes `(S, n_word_tokens, text_width)` word embeddings. `insertions`
    /// holds one entry per layer (missing trailing entries mean no insertion).
    pub fn encode_text(&self, g: &Graph, insertions: &[Option<Insertion>], tokens: Var) -> Result<Var> {
        self.text.encode(g, insertions, tokens)
    }

    /// Encodes `(S, n_patch_tokens, vision_width)` patch tokens.
    pub fn encode_image(&self, g: &Graph, insertions: &[Option<Insertion>], patches: Var) -> Result<Var> {
        self.vision.encode(g, insertions, patches)
    }

    /// Prompt-free image embeddings as a plain tensor, `(S, embed_dim)`.
    pub fn embed_images(&self, patches: Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(patches)?;
        Ok(g.value(self.encode_image(&g, &[], x)?)?)
    }
}

/// Returns the text tower weight corresponding to a vision weight name.
fn partner_weight(text: Option<&Tower>, name: &str, tower: &str) -> Tensor {
    let text = text.expect("partner tower present");
    let suffix = &name[tower.len() + 1..];
    if suffix == "proj" {
        return text.proj.value.clone();
    }
    let (d, field) = suffix.split_once('.').expect("block weight name");
    let b = &text.blocks[d.parse::<usize>().expect("layer index")];
    match field {
        "qkv" => b.qkv.value.clone(),
        "out" => b.out.value.clone(),
        "fc1" => b.fc1.value.clone(),
        _ => b.fc2.value.clone(),
    }
}

impl Tower {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn encode(&self, g: &Graph, insertions: &[Option<Insertion>], tokens: Var) -> Result<Var> {
        let depth = self.blocks.len();
        if insertions.len() > depth {
            return Err(LabError::Shape(format!(
                "{} insertion entries for a {depth}-layer {} tower",
                insertions.len(),
                self.name
            )));
        }
        let tshape = g.shape(tokens)?;
        if tshape.len() != 3 || tshape[2] != self.width {
            return Err(LabError::Shape(format!(
                "{} tower expects (S, T, {}) tokens, got {tshape:?}",
                self.name, self.width
            )));
        }
        let (s, t) = (tshape[0], tshape[1]);

        let mut n_slots = None;
        for ins in insertions.iter().flatten() {
            let n = self.prompt_len(g, ins.prompts, s)?;
            match n_slots {
                None => n_slots = Some(n),
                Some(m) if m != n => {
                    return Err(LabError::Shape(format!(
                        "{} tower prompt length changes from {m} to {n} across layers",
                        self.name
                    )))
                }
                _ => {}
            }
            if let InsertWeight::Const(w) = ins.weight {
                if !(0.0..=1.0).contains(&w) {
                    return Err(LabError::invalid(format!("insertion weight {w} outside [0, 1]")));
                }
            }
        }
        let n = n_slots.unwrap_or(0);

        let mut x = if n > 0 {
            let slots = g.constant(Tensor::zeros(&[s, n, self.width]))?;
            g.concat(&[slots, tokens], 1)?
        } else {
            tokens
        };
        for (d, block) in self.blocks.iter().enumerate() {
            if let Some(Some(ins)) = insertions.get(d) {
                x = self.insert(g, x, ins, s, n, t)?;
            }
            x = self.block(g, block, x)?;
        }
        let first = g.slice(x, 1, n, 1)?;
        let first = g.reshape(first, &[s, self.width])?;
        let h = g.layer_norm(first, LN_EPS)?;
        let proj = g.param(&self.proj)?;
        let z = g.matmul(h, proj)?;
        Ok(g.normalize_rows(z)?)
    }

    fn prompt_len(&self, g: &Graph, prompts: Var, s: usize) -> Result<usize> {
        let shape = g.shape(prompts)?;
        let ok = match shape.as_slice() {
            [_, w] => *w == self.width,
            [b, _, w] => *b == s && *w == self.width,
            _ => false,
        };
        if !ok {
            return Err(LabError::Shape(format!(
                "{} prompts must be (N, {w}) or ({s}, N, {w}), got {shape:?}",
                self.name,
                w = self.width
            )));
        }
        Ok(shape[shape.len() - 2])
    }

    fn insert(&self, g: &Graph, x: Var, ins: &Insertion, s: usize, n: usize, t: usize) -> Result<Var> {
        let mut p = ins.prompts;
        if g.shape(p)?.len() == 2 {
            p = g.broadcast_to(p, &[s, n, self.width])?;
        }
        let slot = match ins.weight {
            InsertWeight::Const(1.0) => p,
            InsertWeight::Const(0.0) => return Ok(x),
            InsertWeight::Const(w) => {
                let prev = g.slice(x, 1, 0, n)?;
                g.add(g.scale(p, w)?, g.scale(prev, 1.0 - w)?)?
            }
            InsertWeight::Var(w) => {
                let prev = g.slice(x, 1, 0, n)?;
                g.add(g.mul(w, p)?, g.mul(g.one_minus(w)?, prev)?)?
            }
        };
        let rest = g.slice(x, 1, n, t)?;
        Ok(g.concat(&[slot, rest], 1)?)
    }

    fn block(&self, g: &Graph, b: &Block, x: Var) -> Result<Var> {
        let w = self.width;
        let dh = w / self.n_heads;
        let h = g.layer_norm(x, LN_EPS)?;
        let qkv = g.matmul(h, g.param(&b.qkv)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for i in 0..self.n_heads {
            let q = g.slice(qkv, 2, i * dh, dh)?;
            let k = g.slice(qkv, 2, w + i * dh, dh)?;
            let v = g.slice(qkv, 2, 2 * w + i * dh, dh)?;
            let scores = g.scale(g.matmul(q, g.transpose_last(k)?)?, scale)?;
            heads.push(g.matmul(g.softmax(scores)?, v)?);
        }
        let attn = g.matmul(g.concat(&heads, 2)?, g.param(&b.out)?)?;
        let x = g.add(x, attn)?;
        let h = g.layer_norm(x, LN_EPS)?;
        let u = g.matmul(h, g.param(&b.fc1)?)?;
        let act = g.mul(u, g.sigmoid(g.scale(u, GELU_SLOPE)?)?)?;
        let m = g.matmul(act, g.param(&b.fc2)?)?;
        Ok(g.add(x, m)?)
    }
}

/// `scale * image @ class^T` over unit-norm embeddings, `(B, C)`.
pub fn logits(g: &Graph, images: Var, classes: Var, scale: f64) -> Result<Var> {
    let cs = g.shape(classes)?;
    if cs.first() == Some(&0) {
        return Err(LabError::invalid("empty class list"));
    }
    let sims = g.matmul(images, g.transpose_last(classes)?)?;
    Ok(g.scale(sims, scale)?)
}

/// Plain-value version of [`logits`] for a single image.
pub fn score(image: &[f64], classes: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(LabError::invalid("empty class list"));
    }
    classes
        .iter()
        .map(|c| {
            if c.len() != image.len() {
                return Err(LabError::Shape(format!(
                    "class embedding of length {} against image of length {}",
                    c.len(),
                    image.len()
                )));
            }
            Ok(scale * c.iter().zip(image).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_tokens_have_fixed_layout() {
        let ids = class_token_ids(3, 16, 256);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[0], 0);
        assert!(ids[1..5].iter().all(|&i| (12..256).contains(&i)));
        assert_eq!(&ids[5..], &(1..12).collect::<Vec<_>>()[..]);
        assert_ne!(class_token_ids(4, 16, 256)[1..5], ids[1..5]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = EncoderConfig {
            text_width: 30,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(LabError::BadValue { .. })));
        let cfg = EncoderConfig {
            depth: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
