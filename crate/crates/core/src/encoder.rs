//! Vision and text towers, multi-scale features, residual adapters and the
//! joint embedding space, plus contrastive pre-training on captions.

use std::path::Path;

use gradtape::nn::{Block, Linear, Mlp};
use gradtape::{
    adamw_step, clip_grad_norm, lr_schedule, normal_init, Graph, OptimState, ParamId, ParamStore, Rng, Tensor, Var,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Header};
use crate::error::{invalid, Error, Result};
use crate::worldgrid::{
    caption_for, make_level, render, tokenize, vocab_size, Cell, Instruction, Observation, Split, TaskId, CHANNELS,
    GRID, MAX_TOKENS, SIDE, TILE,
};

pub const ADAPTER_PREFIX: &str = "adapter.";
const PATCHES: usize = GRID * GRID;
const PATCH_LEN: usize = TILE * TILE * CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub adapter_hidden: usize,
    pub joint_dim: usize,
    pub alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 2,
            heads: 4,
            mlp_hidden: 64,
            adapter_hidden: 64,
            joint_dim: 32,
            alpha: 0.5,
        }
    }
}

impl EncoderConfig {
    /// Width of the pooled multi-scale feature.
    pub fn feature_dim(&self) -> usize {
        (self.blocks + 1) * self.width
    }
}

#[derive(Clone, Debug)]
struct Tower {
    embed: TowerInput,
    pos: ParamId,
    blocks: Vec<Block>,
    proj: Linear,
}

#[derive(Clone, Debug)]
enum TowerInput {
    Patches(Linear),
    Tokens(ParamId),
}

/// Residual two-layer adapter, `f + fc2(gelu(fc1(f)))`. The second layer
/// starts at zero so a fresh adapter is the identity.
#[derive(Clone, Debug)]
struct Adapter {
    mlp: Mlp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub pretrained: bool,
    pub finetuned: bool,
}

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub meta: EncoderMeta,
    vision: Tower,
    text: Tower,
    vision_adapter: Adapter,
    text_adapter: Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

impl EncoderBundle {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.width % config.heads != 0 {
            return Err(invalid("encoder width must be divisible by the head count"));
        }
        let mut rng = Rng::new(seed, 0xE4C0);
        let mut store = ParamStore::new();
        let w = config.width;
        let tower = |store: &mut ParamStore, rng: &mut Rng, name: &str, input: TowerInput, seq: usize| {
            let pos = store.add(format!("{name}.pos"), normal_init(rng, 0.02, &[seq, w]));
            let blocks = (0..config.blocks)
                .map(|b| Block::new(store, rng, &format!("{name}.block{b}"), w, config.heads, config.mlp_hidden))
                .collect();
            let proj = Linear::new(store, rng, &format!("{name}.proj"), config.feature_dim(), config.joint_dim);
            Tower {
                embed: input,
                pos,
                blocks,
                proj,
            }
        };
        let patch = Linear::new(&mut store, &mut rng, "vision.patch", PATCH_LEN, w);
        let vision = tower(&mut store, &mut rng, "vision", TowerInput::Patches(patch), PATCHES);
        let table = store.add("text.tokens", normal_init(&mut rng, 0.02, &[vocab_size(), w]));
        let text = tower(&mut store, &mut rng, "text", TowerInput::Tokens(table), MAX_TOKENS);
        let adapter = |store: &mut ParamStore, rng: &mut Rng, name: &str| {
            let f = config.feature_dim();
            let mlp = Mlp::new(store, rng, name, f, config.adapter_hidden, f);
            *store.get_mut(mlp.fc2.weight) = Tensor::zeros(&[config.adapter_hidden, f]);
            Adapter { mlp }
        };
        let vision_adapter = adapter(&mut store, &mut rng, "adapter.vision");
        let text_adapter = adapter(&mut store, &mut rng, "adapter.text");
        Ok(Self {
            config,
            params: store,
            meta: EncoderMeta::default(),
            vision,
            text,
            vision_adapter,
            text_adapter,
        })
    }

    /// Content hash of every parameter value and the blend weight.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params.fingerprint().as_bytes());
        h.update(self.config.alpha.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Hash of the tower parameters only (everything outside the adapters).
    pub fn tower_fingerprint(&self) -> String {
        self.params.fingerprint_where(|n| !n.starts_with(ADAPTER_PREFIX))
    }

    /// The vision and text adapter parameters, disjoint from the towers.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(ADAPTER_PREFIX))
            .collect()
    }

    /// Makes only the adapters trainable.
    pub fn freeze_towers(&mut self) {
        self.params.set_all_trainable(false);
        self.params.set_trainable_prefix(ADAPTER_PREFIX, true);
    }

    /// Makes only the towers trainable.
    pub fn freeze_adapters(&mut self) {
        self.params.set_all_trainable(true);
        self.params.set_trainable_prefix(ADAPTER_PREFIX, false);
    }

    fn tower(&self, m: Modality) -> (&Tower, &Adapter) {
        match m {
            Modality::Vision => (&self.vision, &self.vision_adapter),
            Modality::Text => (&self.text, &self.text_adapter),
        }
    }

    fn tower_features(&self, g: &mut Graph, m: Modality, input: Var, batch: usize, seq: usize) -> Result<Var> {
        let (tower, _) = self.tower(m);
        let store = &self.params;
        let pos = g.param(store, tower.pos);
        let pos_idx: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();
        let pos = g.gather(pos, &pos_idx)?;
        let mut x = g.add(input, pos)?;
        let mut pools = vec![g.mean_pool(x, seq)?];
        for block in &tower.blocks {
            x = block.forward(g, store, x, batch, seq, false)?;
            pools.push(g.mean_pool(x, seq)?);
        }
        Ok(g.concat_cols(&pools)?)
    }

    /// Multi-scale vision features `[B, feature_dim]` for a batch of frames.
    pub fn vision_features(&self, g: &mut Graph, frames: &[&Observation]) -> Result<Var> {
        for f in frames {
            if !f.in_range() {
                return Err(invalid("observation pixels must lie in [0, 1] with shape 78×78×3"));
            }
        }
        let TowerInput::Patches(patch) = &self.vision.embed else { unreachable!() };
        let patches = g.constant(patchify(frames));
        let x = patch.forward(g, &self.params, patches)?;
        self.tower_features(g, Modality::Vision, x, frames.len(), PATCHES)
    }

    /// Multi-scale text features `[B, feature_dim]` for token sequences.
    pub fn text_features(&self, g: &mut Graph, tokens: &[&[usize]]) -> Result<Var> {
        let TowerInput::Tokens(table) = &self.text.embed else { unreachable!() };
        let mut ids = Vec::with_capacity(tokens.len() * MAX_TOKENS);
        for t in tokens {
            if t.len() != MAX_TOKENS || t.iter().any(|&i| i >= vocab_size()) {
                return Err(invalid("token sequence must hold 16 in-vocabulary ids"));
            }
            ids.extend_from_slice(t);
        }
        let table = g.param(&self.params, *table);
        let x = g.gather(table, &ids)?;
        self.tower_features(g, Modality::Text, x, tokens.len(), MAX_TOKENS)
    }

    /// Adapter blend, projection and normalization: multi-scale features to
    /// unit joint embeddings `[B, joint_dim]`.
    pub fn joint(&self, g: &mut Graph, m: Modality, features: Var) -> Result<Var> {
        let (tower, adapter) = self.tower(m);
        let alpha = self.config.alpha;
        let blended = if alpha == 0.0 {
            features
        } else {
            // α·(f + a(f)) + (1 − α)·f = f + α·a(f)
            let delta = adapter.mlp.forward(g, &self.params, features)?;
            let delta = g.scale(delta, alpha);
            g.add(features, delta)?
        };
        let z = tower.proj.forward(g, &self.params, blended)?;
        Ok(g.l2_normalize(z))
    }

    pub fn encode_images(&self, frames: &[&Observation]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let f = self.vision_features(&mut g, frames)?;
        let z = self.joint(&mut g, Modality::Vision, f)?;
        Ok(rows(g.value(z)))
    }

    pub fn encode_image(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[obs])?.remove(0))
    }

    pub fn encode_text(&self, instruction: &Instruction) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.text_features(&mut g, &[&instruction.token_ids])?;
        let z = self.joint(&mut g, Modality::Text, f)?;
        Ok(rows(g.value(z)).remove(0))
    }

    /// Frozen multi-scale vision features, one row per frame.
    pub fn image_features(&self, frames: &[&Observation]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let f = self.vision_features(&mut g, frames)?;
        Ok(rows(g.value(f)))
    }

    /// Joint embeddings from precomputed multi-scale features.
    pub fn joint_from_features(&self, m: Modality, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let f = g.constant(stack(features)?);
        let z = self.joint(&mut g, m, f)?;
        Ok(rows(g.value(z)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: "encoder".into(),
            fingerprint: self.fingerprint(),
            layout: self.params.layout(),
            config: serde_json::to_value(&self.config).expect("plain struct"),
            meta: serde_json::to_value(&self.meta).expect("plain struct"),
        };
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, flat) = checkpoint::load(path)?;
        if header.kind != "encoder" {
            return Err(invalid(format!("{} holds a `{}` checkpoint, not an encoder", path.display(), header.kind)));
        }
        let config: EncoderConfig =
            serde_json::from_value(header.config.clone()).map_err(|e| invalid(e.to_string()))?;
        let mut bundle = Self::new(config, 0)?;
        checkpoint::restore(&mut bundle.params, &header, &flat)?;
        bundle.meta = serde_json::from_value(header.meta.clone()).map_err(|e| invalid(e.to_string()))?;
        let found = bundle.fingerprint();
        if found != header.fingerprint {
            return Err(Error::Fingerprint {
                expected: header.fingerprint,
                found,
            });
        }
        Ok(bundle)
    }
}

pub(crate) fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

pub(crate) fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(invalid("ragged feature rows"));
    }
    Ok(Tensor::new(vec![rows.len(), d], rows.concat())?)
}

/// `[B·169, 108]` matrix of flattened 6×6×3 tiles in row-major tile order.
fn patchify(frames: &[&Observation]) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * PATCHES * PATCH_LEN);
    for f in frames {
        for tr in 0..GRID {
            for tc in 0..GRID {
                for y in 0..TILE {
                    let o = ((tr * TILE + y) * SIDE + tc * TILE) * CHANNELS;
                    data.extend_from_slice(&f.pixels[o..o + TILE * CHANNELS]);
                }
            }
        }
    }
    Tensor::new(vec![frames.len() * PATCHES, PATCH_LEN], data).expect("patch layout")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// One (frame, caption) pre-training example.
#[derive(Clone, Debug)]
pub struct CaptionPair {
    pub observation: Observation,
    pub caption: String,
}

/// Samples `n` captioned frames across every task and split. About one frame
/// in six puts the agent on an object so the "at the agent" phrase occurs.
pub fn caption_corpus(n: usize, seed: u64) -> Vec<CaptionPair> {
    let mut rng = Rng::new(seed, 0xCA97);
    (0..n)
        .map(|_| {
            let task = TaskId::ALL[rng.below(TaskId::ALL.len())];
            let split = if rng.below(2) == 0 { Split::Train } else { Split::Test };
            let level = make_level(task, split, rng.next_u64() >> 1);
            let agent = if rng.below(6) == 0 {
                level.objects[rng.below(level.objects.len())].cell
            } else {
                let mut cells = level.free_cells();
                cells.push(level.agent_start);
                cells[rng.below(cells.len())]
            };
            CaptionPair {
                observation: render(&level, agent),
                caption: caption_for(&level, agent),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub pairs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            pairs: 5000,
            epochs: 10,
            batch: 16,
            temperature: 0.07,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub fingerprint: String,
}

/// Symmetric in-batch contrastive loss: mean of the image→text and
/// text→image cross-entropies over `z_img·z_txtᵀ / temperature`.
pub fn contrastive_loss(g: &mut Graph, img: Var, txt: Var, temperature: f64) -> Result<Var> {
    let n = g.value(img).rows();
    if n < 2 {
        return Err(invalid("contrastive loss needs at least two pairs per batch"));
    }
    let targets: Vec<usize> = (0..n).collect();
    let l_it = g.matmul_t(img, txt)?;
    let l_it = g.scale(l_it, 1.0 / temperature);
    let l_ti = g.matmul_t(txt, img)?;
    let l_ti = g.scale(l_ti, 1.0 / temperature);
    let a = g.cross_entropy(l_it, &targets)?;
    let b = g.cross_entropy(l_ti, &targets)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

impl EncoderBundle {
    fn batch_loss(&self, g: &mut Graph, batch: &[&CaptionPair], temperature: f64) -> Result<Var> {
        let frames: Vec<&Observation> = batch.iter().map(|p| &p.observation).collect();
        let tokens: Vec<Vec<usize>> = batch.iter().map(|p| tokenize(&p.caption)).collect();
        let token_refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        let fv = self.vision_features(g, &frames)?;
        let zv = self.joint(g, Modality::Vision, fv)?;
        let ft = self.text_features(g, &token_refs)?;
        let zt = self.joint(g, Modality::Text, ft)?;
        contrastive_loss(g, zv, zt, temperature)
    }

    /// Contrastive loss on `pairs` in consecutive batches, without updates.
    pub fn contrastive_eval(&self, pairs: &[CaptionPair], batch: usize, temperature: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in pairs.chunks(batch).filter(|c| c.len() >= 2) {
            let mut g = Graph::new();
            let refs: Vec<&CaptionPair> = chunk.iter().collect();
            let l = self.batch_loss(&mut g, &refs, temperature)?;
            total += g.value(l).item();
            count += 1;
        }
        if count == 0 {
            return Err(invalid("contrastive loss needs at least two pairs per batch"));
        }
        Ok(total / count as f64)
    }

    /// Trains the towers on captioned frames; adapters stay at identity.
    pub fn pretrain_contrastive(&mut self, pairs: &[CaptionPair], cfg: &PretrainConfig) -> Result<PretrainReport> {
        if cfg.batch < 2 || pairs.len() < 2 {
            return Err(invalid("contrastive loss needs at least two pairs per batch"));
        }
        self.freeze_adapters();
        let mut opt = OptimState::new(&self.params, cfg.lr, cfg.weight_decay);
        let mut rng = Rng::new(cfg.seed, 0x9E7);
        let batches_per_epoch = pairs.len().div_ceil(cfg.batch);
        let total = cfg.epochs * batches_per_epoch;
        let warmup = (total / 20).min(total.saturating_sub(1));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut epoch_loss = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut sum = 0.0;
            let mut n = 0;
            for (bi, idx) in order.chunks(cfg.batch).enumerate() {
                if idx.len() < 2 {
                    continue;
                }
                let batch: Vec<&CaptionPair> = idx.iter().map(|&i| &pairs[i]).collect();
                let mut g = Graph::new();
                let loss = self.batch_loss(&mut g, &batch, cfg.temperature)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                let mut grads = g.backward(loss)?.for_store(&self.params);
                clip_grad_norm(&mut grads, 1.0);
                opt.lr = lr_schedule(step.min(total), total, cfg.lr, warmup);
                adamw_step(&mut self.params, &grads, &mut opt)?;
                step += 1;
                sum += lv;
                n += 1;
            }
            epoch_loss.push(sum / n.max(1) as f64);
        }
        self.params.set_all_trainable(true);
        self.meta.pretrained = true;
        Ok(PretrainReport {
            epoch_loss,
            fingerprint: self.fingerprint(),
        })
    }

    /// Fraction of frames whose highest-scoring caption within its batch is
    /// textually identical to its own caption.
    pub fn retrieval_top1(&self, pairs: &[CaptionPair], batch: usize) -> Result<f64> {
        let mut correct = 0;
        let mut total = 0;
        for chunk in pairs.chunks(batch) {
            let frames: Vec<&Observation> = chunk.iter().map(|p| &p.observation).collect();
            let zi = self.encode_images(&frames)?;
            let zt: Vec<Vec<f64>> = chunk
                .iter()
                .map(|p| self.encode_text(&Instruction::new(p.caption.clone())))
                .collect::<Result<_>>()?;
            for (i, z) in zi.iter().enumerate() {
                let best = argmax(zt.iter().map(|t| cosine(z, t)));
                correct += usize::from(chunk[best].caption == chunk[i].caption);
                total += 1;
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Renders the probe frame used for caption discrimination: a single yellow
/// coin in an open room with the agent at `agent`.
pub fn coin_probe(seed: u64) -> (Observation, Cell) {
    let level = make_level(TaskId::Corridor, Split::Test, seed);
    let agent = level.agent_start;
    (render(&level, agent), agent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_places_tiles_in_row_major_order() {
        let mut obs = Observation {
            pixels: vec![0.0; SIDE * SIDE * CHANNELS],
        };
        // top-left pixel of tile (1, 2)
        let o = ((TILE) * SIDE + 2 * TILE) * CHANNELS;
        obs.pixels[o] = 1.0;
        let t = patchify(&[&obs]);
        assert_eq!(t.row(GRID + 2)[0], 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let b = EncoderBundle::new(EncoderConfig::default(), 1).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 96, (0..96).map(|i| i as f64 / 96.0).collect()).unwrap());
        let with = b.joint(&mut g, Modality::Vision, f).unwrap();
        let mut b0 = b.clone();
        b0.config.alpha = 0.0;
        let without = b0.joint(&mut g, Modality::Vision, f).unwrap();
        assert_eq!(g.value(with).data(), g.value(without).data());
    }
}
