//! The dual encoder standing in for a pretrained 3D/text VLM: a per-point
//! patch embedder with center positional encoding, a transformer 3D encoder
//! with class-token readout, and a token-based text encoder, projected into
//! a shared embedding space and frozen after alignment pretraining.

mod blocks;
pub mod pretrain;
pub mod store;

pub use blocks::{LayerNormParams, Linear, TransformerBlock, LN_EPS};

use sha2::{Digest, Sha256};

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::geom::PatchSet;
use crate::rng::{derive, Prng};

/// Fixed handcrafted template length ("a 3D shape of" equivalent ids).
pub const TEMPLATE_LEN: usize = 4;
const SOS: usize = 0;
const EOS: usize = 1;

/// Structural hyperparameters of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// 3D encoder width
    pub d: usize,
    /// text encoder width
    pub d_t: usize,
    /// shared embedding dim
    pub d_s: usize,
    /// 3D encoder depth
    pub blocks_3d: usize,
    /// text encoder depth
    pub text_blocks: usize,
    pub heads: usize,
    /// hidden width of the per-point and positional MLPs
    pub embed_hidden: usize,
    /// softmax temperature, fixed at pretraining time
    pub tau: f64,
    /// category vocabulary in label order
    pub categories: Vec<String>,
    /// reserved context-slot rows in the token table
    pub context_slots: usize,
    pub max_text_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, d_t=64, d_s=32, 3 blocks, 4 heads,
    /// 2 text blocks, tau=0.07.
    pub fn desk(categories: Vec<String>) -> Self {
        ModelConfig {
            d: 64,
            d_t: 64,
            d_s: 32,
            blocks_3d: 3,
            text_blocks: 2,
            heads: 4,
            embed_hidden: 32,
            tau: 0.07,
            categories,
            context_slots: 4,
            max_text_len: 16,
        }
    }

    /// Tiny model for gradient checks and unit tests.
    pub fn micro(categories: Vec<String>, d: usize) -> Self {
        ModelConfig {
            d,
            d_t: d,
            d_s: (d / 2).max(2),
            blocks_3d: 1,
            text_blocks: 1,
            heads: 2,
            embed_hidden: d.max(4) / 2,
            tau: 0.07,
            categories,
            context_slots: 4,
            max_text_len: 16,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn vocab_size(&self) -> usize {
        2 + TEMPLATE_LEN + self.categories.len() + self.context_slots
    }

    pub fn category_token(&self, cat: usize) -> usize {
        2 + TEMPLATE_LEN + cat
    }

    pub fn category_id(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::argument(format!("category '{name}' not in text vocabulary")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 || self.d_t % self.heads != 0 {
            return Err(Error::argument("encoder widths must be divisible by heads"));
        }
        if self.categories.is_empty() {
            return Err(Error::argument("model needs at least one category"));
        }
        if self.max_text_len < TEMPLATE_LEN + 3 {
            return Err(Error::argument("max_text_len too small for the template"));
        }
        Ok(())
    }

    fn to_meta_string(&self) -> String {
        format!(
            "d={};d_t={};d_s={};blocks_3d={};text_blocks={};heads={};embed_hidden={};tau={};context_slots={};max_text_len={};categories={}",
            self.d,
            self.d_t,
            self.d_s,
            self.blocks_3d,
            self.text_blocks,
            self.heads,
            self.embed_hidden,
            self.tau,
            self.context_slots,
            self.max_text_len,
            self.categories.join(",")
        )
    }

    fn from_meta_string(s: &str, path: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk(Vec::new());
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad meta field '{part}'")))?;
            let int = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::format(path, format!("bad integer for {k}")))
            };
            match k {
                "d" => cfg.d = int()?,
                "d_t" => cfg.d_t = int()?,
                "d_s" => cfg.d_s = int()?,
                "blocks_3d" => cfg.blocks_3d = int()?,
                "text_blocks" => cfg.text_blocks = int()?,
                "heads" => cfg.heads = int()?,
                "embed_hidden" => cfg.embed_hidden = int()?,
                "context_slots" => cfg.context_slots = int()?,
                "max_text_len" => cfg.max_text_len = int()?,
                "tau" => {
                    cfg.tau = v
                        .parse()
                        .map_err(|_| Error::format(path, "bad tau value"))?
                }
                "categories" => {
                    cfg.categories = v.split(',').map(|c| c.to_string()).collect()
                }
                other => return Err(Error::format(path, format!("unknown meta key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether an embedding came from the prompted or unprompted path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Prompted,
    Unprompted,
}

pub struct Embedding3D {
    pub vector: Tensor,
    pub source: EmbeddingSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextSource {
    Handcrafted,
    Prompted,
}

pub struct TextEmbedding {
    pub vector: Tensor,
    pub category: u32,
    pub source: TextSource,
}

/// A text-encoder input element: a vocabulary id or an injected raw vector
/// (the learnable context vectors enter this way).
#[derive(Clone)]
pub enum TextToken {
    Id(usize),
    Raw(Tensor),
}

// ── submodules of the dual encoder ──────────────────────────────────────

/// Shared per-point MLP + per-patch max pool, plus a positional MLP over
/// the center coordinates.
pub struct PatchEmbedder {
    pub point_fc1: Linear,
    pub point_fc2: Linear,
    pub pos_fc1: Linear,
    pub pos_fc2: Linear,
}

impl PatchEmbedder {
    fn init(cfg: &ModelConfig, rng: &mut Prng, trainable: bool) -> Self {
        let h = cfg.embed_hidden;
        PatchEmbedder {
            point_fc1: Linear::init("embed.point_fc1", 3, h, 0.5, rng, trainable),
            point_fc2: Linear::init("embed.point_fc2", h, cfg.d, 0.4, rng, trainable),
            pos_fc1: Linear::init("embed.pos_fc1", 3, h, 0.5, rng, trainable),
            pos_fc2: Linear::init("embed.pos_fc2", h, cfg.d, 0.4, rng, trainable),
        }
    }

    /// Token for one patch: maxpool over MLP(points - center) + posMLP(center).
    /// `points` is [k, 3], `center` is [1, 3]; both may carry gradients.
    pub fn token(&self, points: &Tensor, center: &Tensor) -> Tensor {
        let neg_center = center.reshape(&[3]).neg();
        let rel = points.add_bias(&neg_center);
        let h = self.point_fc2.forward(&self.point_fc1.forward(&rel).relu());
        let (pooled, _) = h.max_axis0();
        let pos = self.pos_fc2.forward(&self.pos_fc1.forward(center).relu());
        pooled.add(&pos.reshape(&[pos.numel()]))
    }

    fn params(&self) -> Vec<Parameter> {
        let mut p = self.point_fc1.params();
        p.extend(self.point_fc2.params());
        p.extend(self.pos_fc1.params());
        p.extend(self.pos_fc2.params());
        p
    }
}

pub struct Encoder3d {
    pub cls: Parameter,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    /// projection [d, d_s] into the shared space (no bias)
    pub proj: Parameter,
}

impl Encoder3d {
    fn init(cfg: &ModelConfig, rng: &mut Prng, trainable: bool) -> Self {
        let blocks = (0..cfg.blocks_3d)
            .map(|i| TransformerBlock::init(&format!("enc3d.block{i}"), cfg.d, cfg.heads, rng, trainable))
            .collect();
        Encoder3d {
            cls: Parameter::new(
                "enc3d.cls",
                &[1, cfg.d],
                crate::rng::normal_vec(rng, cfg.d, 0.2),
                trainable,
            ),
            blocks,
            ln_f: LayerNormParams::init("enc3d.ln_f", cfg.d, trainable),
            proj: Parameter::new(
                "enc3d.proj",
                &[cfg.d, cfg.d_s],
                crate::rng::normal_vec(rng, cfg.d * cfg.d_s, 0.15),
                trainable,
            ),
        }
    }

    fn params(&self) -> Vec<Parameter> {
        let mut p = vec![self.cls.clone()];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_f.params());
        p.push(self.proj.clone());
        p
    }
}

pub struct TextEncoder {
    pub tok_table: Parameter,
    pub pos_table: Parameter,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    pub proj: Parameter,
}

impl TextEncoder {
    fn init(cfg: &ModelConfig, rng: &mut Prng, trainable: bool) -> Self {
        let blocks = (0..cfg.text_blocks)
            .map(|i| TransformerBlock::init(&format!("text.block{i}"), cfg.d_t, cfg.heads, rng, trainable))
            .collect();
        TextEncoder {
            tok_table: Parameter::new(
                "text.tok_table",
                &[cfg.vocab_size(), cfg.d_t],
                crate::rng::normal_vec(rng, cfg.vocab_size() * cfg.d_t, 0.3),
                trainable,
            ),
            pos_table: Parameter::new(
                "text.pos_table",
                &[cfg.max_text_len, cfg.d_t],
                crate::rng::normal_vec(rng, cfg.max_text_len * cfg.d_t, 0.05),
                trainable,
            ),
            blocks,
            ln_f: LayerNormParams::init("text.ln_f", cfg.d_t, trainable),
            proj: Parameter::new(
                "text.proj",
                &[cfg.d_t, cfg.d_s],
                crate::rng::normal_vec(rng, cfg.d_t * cfg.d_s, 0.15),
                trainable,
            ),
        }
    }

    fn params(&self) -> Vec<Parameter> {
        let mut p = vec![self.tok_table.clone(), self.pos_table.clone()];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_f.params());
        p.push(self.proj.clone());
        p
    }
}

// ── the dual encoder ────────────────────────────────────────────────────

/// Both encoders plus the temperature. Trainable only during alignment
/// pretraining; wrap in [`FrozenModel`] afterwards.
pub struct DualEncoder {
    pub cfg: ModelConfig,
    pub embedder: PatchEmbedder,
    pub enc3d: Encoder3d,
    pub text: TextEncoder,
    pub tau: Parameter,
}

impl DualEncoder {
    pub fn build(cfg: ModelConfig, seed: u64, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, &[0xE11C]);
        Ok(DualEncoder {
            embedder: PatchEmbedder::init(&cfg, &mut rng, trainable),
            enc3d: Encoder3d::init(&cfg, &mut rng, trainable),
            text: TextEncoder::init(&cfg, &mut rng, trainable),
            tau: Parameter::new("tau", &[1], vec![cfg.tau], false),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.embedder.params();
        p.extend(self.enc3d.params());
        p.extend(self.text.params());
        p.push(self.tau.clone());
        p
    }

    pub fn tau(&self) -> f64 {
        self.tau.value()[0]
    }

    /// Tokens for the original patches of a patch set (constant inputs).
    pub fn embed_patchset(&self, ps: &PatchSet) -> Tensor {
        let rows: Vec<Tensor> = (0..ps.num_patches())
            .map(|i| {
                let k = ps.local_points[i].len();
                let flat: Vec<f64> = ps.local_points[i].iter().flatten().copied().collect();
                let pts = Tensor::constant(&[k, 3], flat);
                let center = Tensor::constant(&[1, 3], ps.centers[i].to_vec());
                self.embedder.token(&pts, &center).reshape(&[1, self.cfg.d])
            })
            .collect();
        Tensor::concat_rows(&rows)
    }

    /// Run the 3D encoder over `[specials; patch tokens]`. Returns the
    /// class-token embedding in the shared space and the post-norm states of
    /// the patch positions (rows `num_special..`).
    pub fn encode_3d_tokens(&self, tokens: &Tensor, num_special: usize) -> (Tensor, Tensor) {
        let s = tokens.shape()[0];
        assert!(s > num_special, "encode_3d: empty patch token sequence");
        let mut x = tokens.clone();
        for b in &self.enc3d.blocks {
            x = b.forward(&x);
        }
        let x = self.enc3d.ln_f.forward(&x);
        let emb = x
            .gather_rows(&[0])
            .matmul(&self.enc3d.proj.leaf())
            .reshape(&[self.cfg.d_s]);
        let patch_rows: Vec<usize> = (num_special..s).collect();
        let feats = x.gather_rows(&patch_rows);
        (emb, feats)
    }

    /// Unprompted pass `[cls; X]`: the 3D embedding z and patch features
    /// f_P from the final layer.
    pub fn unprompted_forward(&self, ps: &PatchSet) -> (Tensor, Tensor) {
        let tokens = self.embed_patchset(ps);
        let seq = Tensor::concat_rows(&[self.enc3d.cls.leaf(), tokens]);
        self.encode_3d_tokens(&seq, 1)
    }

    /// Prompted pass `[cls; x0; tokens]` over already-embedded patch tokens.
    pub fn prompted_encode(&self, prompt_token: &Tensor, patch_tokens: &Tensor) -> Tensor {
        let x0 = prompt_token.reshape(&[1, self.cfg.d]);
        let seq = Tensor::concat_rows(&[self.enc3d.cls.leaf(), x0, patch_tokens.clone()]);
        let (emb, _) = self.encode_3d_tokens(&seq, 2);
        emb
    }

    /// Encode a token sequence that must start with SOS and end with EOS.
    /// The embedding is the projected post-norm state at the EOS position.
    pub fn encode_text(&self, tokens: &[TextToken]) -> Tensor {
        assert!(
            matches!(tokens.first(), Some(TextToken::Id(SOS))),
            "encode_text: sequence must start with SOS"
        );
        assert!(
            matches!(tokens.last(), Some(TextToken::Id(EOS))),
            "encode_text: sequence must end with EOS"
        );
        let s = tokens.len();
        assert!(
            s <= self.cfg.max_text_len,
            "encode_text: sequence length {s} exceeds max {}",
            self.cfg.max_text_len
        );
        let table = self.text.tok_table.leaf();
        let rows: Vec<Tensor> = tokens
            .iter()
            .map(|t| match t {
                TextToken::Id(id) => {
                    assert!(*id < self.cfg.vocab_size(), "encode_text: token id {id} out of vocab");
                    table.gather_rows(&[*id])
                }
                TextToken::Raw(v) => v.reshape(&[1, self.cfg.d_t]),
            })
            .collect();
        let pos_rows: Vec<usize> = (0..s).collect();
        let pos = self.text.pos_table.leaf().gather_rows(&pos_rows);
        let mut x = Tensor::concat_rows(&rows).add(&pos);
        for b in &self.text.blocks {
            x = b.forward(&x);
        }
        let x = self.text.ln_f.forward(&x);
        x.gather_rows(&[s - 1])
            .matmul(&self.text.proj.leaf())
            .reshape(&[self.cfg.d_s])
    }

    /// Handcrafted token sequence for a category: SOS, the fixed template,
    /// the category token, EOS.
    pub fn handcrafted_tokens(&self, cat: usize) -> Vec<TextToken> {
        let mut t = vec![TextToken::Id(SOS)];
        for i in 0..TEMPLATE_LEN {
            t.push(TextToken::Id(2 + i));
        }
        t.push(TextToken::Id(self.cfg.category_token(cat)));
        t.push(TextToken::Id(EOS));
        t
    }

    pub fn handcrafted_embedding(&self, cat: usize) -> TextEmbedding {
        TextEmbedding {
            vector: self.encode_text(&self.handcrafted_tokens(cat)),
            category: cat as u32,
            source: TextSource::Handcrafted,
        }
    }

    /// Template token-table rows, used to initialize the context vectors.
    pub fn template_embedding_rows(&self) -> Vec<Vec<f64>> {
        let table = self.text.tok_table.value();
        (0..TEMPLATE_LEN)
            .map(|i| table[(2 + i) * self.cfg.d_t..(3 + i) * self.cfg.d_t].to_vec())
            .collect()
    }

    pub fn weights_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.params() {
            hasher.update(p.name().as_bytes());
            for &d in p.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for v in p.value() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// The immutable dual encoder: every parameter non-trainable, with the
/// weights digest taken at freeze time.
pub struct FrozenModel {
    enc: DualEncoder,
    hash: [u8; 32],
}

impl FrozenModel {
    pub fn freeze(enc: DualEncoder) -> Self {
        for p in enc.params() {
            p.freeze();
        }
        let hash = enc.weights_hash();
        FrozenModel { enc, hash }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.enc.cfg
    }

    pub fn encoder(&self) -> &DualEncoder {
        &self.enc
    }

    pub fn weights_hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn recompute_weights_hash(&self) -> [u8; 32] {
        self.enc.weights_hash()
    }

    pub fn hash_hex(&self) -> String {
        self.hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat copy of all weights for thread-local rebuilds.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            cfg: self.enc.cfg.clone(),
            params: self
                .enc
                .params()
                .iter()
                .map(|p| (p.name().to_string(), p.value()))
                .collect(),
        }
    }
}

impl std::ops::Deref for FrozenModel {
    type Target = DualEncoder;
    fn deref(&self) -> &DualEncoder {
        &self.enc
    }
}

/// Plain-data copy of a frozen model; `Send + Sync`, rebuildable per thread.
#[derive(Clone)]
pub struct ModelSnapshot {
    pub cfg: ModelConfig,
    pub params: Vec<(String, Vec<f64>)>,
}

impl ModelSnapshot {
    pub fn rebuild(&self) -> FrozenModel {
        let enc = DualEncoder::build(self.cfg.clone(), 0, false).expect("snapshot config is valid");
        let by_name: std::collections::HashMap<&str, &Vec<f64>> =
            self.params.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for p in enc.params() {
            let v = by_name
                .get(p.name())
                .unwrap_or_else(|| panic!("snapshot missing parameter {}", p.name()));
            p.set_value((*v).clone());
        }
        FrozenModel::freeze(enc)
    }
}

pub(crate) fn meta_string(cfg: &ModelConfig) -> String {
    cfg.to_meta_string()
}

pub(crate) fn parse_meta_string(s: &str, path: &str) -> Result<ModelConfig> {
    ModelConfig::from_meta_string(s, path)
}
