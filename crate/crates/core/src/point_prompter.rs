//! Instance-aware point-level prompting: vulnerable-patch selection from
//! frozen patch features, dynamic-graph offset generation, patch and center
//! deformation, and the prompt token.

use rand::Rng;

use crate::autodiff::{Parameter, Tensor};
use crate::encoders::{Embedding3D, EmbeddingSource, FrozenModel, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::geom::{self, compute_thresholds, patchify, PatchSet, Thresholds};
use crate::rng::{normal_vec, Prng};

/// Per-patch contribution counts to the max-pooled global feature: the
/// number of feature columns whose argmax lands on the patch.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub scores: Vec<u32>,
    pub feature_dim: usize,
}

impl ImportanceScores {
    pub fn sum(&self) -> u64 {
        self.scores.iter().map(|&s| s as u64).sum()
    }
}

/// Column-wise argmax census over `f_p` (row-major `n x d`), ties to the
/// lowest row.
pub fn importance_scores(f_p: &[f64], n: usize, d: usize) -> ImportanceScores {
    assert_eq!(f_p.len(), n * d, "importance_scores: bad feature shape");
    let mut scores = vec![0u32; n];
    for col in 0..d {
        let mut best_row = 0usize;
        let mut best = f_p[col];
        for row in 1..n {
            let v = f_p[row * d + col];
            if v > best {
                best = v;
                best_row = row;
            }
        }
        scores[best_row] += 1;
    }
    ImportanceScores {
        scores,
        feature_dim: d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// lowest importance scores (the shipped default)
    Vulnerable,
    /// highest importance scores
    Critical,
    /// uniform without replacement
    Random,
}

impl SelectionStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vulnerable" => Ok(SelectionStrategy::Vulnerable),
            "critical" => Ok(SelectionStrategy::Critical),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(Error::argument(format!(
                "unknown strategy '{other}' (expected vulnerable|critical|random)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Vulnerable => "vulnerable",
            SelectionStrategy::Critical => "critical",
            SelectionStrategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetSelection {
    /// selected patch indices, ascending
    pub indices: Vec<usize>,
    pub alpha: f64,
    pub strategy: SelectionStrategy,
}

/// round-half-up(alpha * n)
pub fn target_count(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + 0.5).floor() as usize
}

/// Pick `round(alpha * n)` target patches by strategy. Score ties break to
/// the lowest index; the result is sorted ascending.
pub fn select_targets(
    s: &ImportanceScores,
    alpha: f64,
    strategy: SelectionStrategy,
    rng: &mut Prng,
) -> Result<TargetSelection> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::argument(format!("alpha {alpha} outside (0, 1]")));
    }
    let n = s.scores.len();
    let l = target_count(alpha, n);
    if l == 0 {
        return Err(Error::argument(format!(
            "alpha {alpha} with {n} patches rounds to zero targets"
        )));
    }
    let mut indices: Vec<usize> = match strategy {
        SelectionStrategy::Vulnerable => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (s.scores[i], i));
            order[..l].to_vec()
        }
        SelectionStrategy::Critical => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(s.scores[i]), i));
            order[..l].to_vec()
        }
        SelectionStrategy::Random => {
            let mut pool: Vec<usize> = (0..n).collect();
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            pool[..l].to_vec()
        }
    };
    indices.sort_unstable();
    Ok(TargetSelection {
        indices,
        alpha,
        strategy,
    })
}

// ── dynamic graph convolution ───────────────────────────────────────────

/// Feature-space kNN (self excluded, ties to lowest index) over row-major
/// `m x c` features.
fn feature_knn(data: &[f64], m: usize, c: usize, k: usize) -> Vec<Vec<usize>> {
    assert!(k < m, "edgeconv: graph_k {k} must be smaller than {m} nodes");
    (0..m)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| {
                    let mut d2 = 0.0;
                    for t in 0..c {
                        let diff = data[i * c + t] - data[j * c + t];
                        d2 += diff * diff;
                    }
                    (d2, j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

/// One EdgeConv layer: per node, max over feature-space neighbors of
/// `relu(W [x_i; x_j - x_i] + b)`. The graph is rebuilt from the current
/// feature values on every call.
pub struct EdgeConvLayer {
    pub lin: Linear,
}

impl EdgeConvLayer {
    fn init(name: &str, c_in: usize, c_out: usize, rng: &mut Prng) -> Self {
        let std = (2.0 / (2 * c_in) as f64).sqrt();
        EdgeConvLayer {
            lin: Linear::init(name, 2 * c_in, c_out, std, rng, true),
        }
    }

    pub fn forward(&self, feats: &Tensor, graph_k: usize) -> Tensor {
        let (m, c) = (feats.shape()[0], feats.shape()[1]);
        let graph = feature_knn(feats.data(), m, c, graph_k);
        let rows: Vec<Tensor> = (0..m)
            .map(|i| {
                let xi = feats.gather_rows(&[i]);
                let rep = xi.repeat_rows(graph_k);
                let neigh = feats.gather_rows(&graph[i]);
                let edge = Tensor::concat_cols(&[rep.clone(), neigh.sub(&rep)]);
                let (pooled, _) = self.lin.forward(&edge).relu().max_axis0();
                pooled.reshape(&[1, pooled.numel()])
            })
            .collect();
        Tensor::concat_rows(&rows)
    }

    fn params(&self) -> Vec<Parameter> {
        self.lin.params()
    }
}

// ── prompter architecture variants ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptEncoderArch {
    EdgeConv1,
    EdgeConv3,
    Transformer1,
}

impl PromptEncoderArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edgeconv1" => Ok(Self::EdgeConv1),
            "edgeconv3" => Ok(Self::EdgeConv3),
            "transformer1" => Ok(Self::Transformer1),
            other => Err(Error::argument(format!(
                "unknown prompt-encoder arch '{other}' (expected edgeconv1|edgeconv3|transformer1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EdgeConv1 => "edgeconv1",
            Self::EdgeConv3 => "edgeconv3",
            Self::Transformer1 => "transformer1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetGeneratorArch {
    Mlp1,
    EdgeConv1,
    EdgeConv3,
}

impl OffsetGeneratorArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp1" => Ok(Self::Mlp1),
            "edgeconv1" => Ok(Self::EdgeConv1),
            "edgeconv3" => Ok(Self::EdgeConv3),
            other => Err(Error::argument(format!(
                "unknown offset-generator arch '{other}' (expected mlp1|edgeconv1|edgeconv3)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mlp1 => "mlp1",
            Self::EdgeConv1 => "edgeconv1",
            Self::EdgeConv3 => "edgeconv3",
        }
    }
}

/// Geometry and selection settings the prompter needs per forward pass.
#[derive(Debug, Clone)]
pub struct PrompterConfig {
    pub n_patches: usize,
    pub k_points: usize,
    /// encoder width d (input feature dim)
    pub d: usize,
    /// offset-feature width
    pub d_o: usize,
    pub graph_k: usize,
    pub refine_m: usize,
    pub alpha: f64,
    pub strategy: SelectionStrategy,
    pub he_arch: PromptEncoderArch,
    pub ho_arch: OffsetGeneratorArch,
}

impl PrompterConfig {
    pub fn desk(d: usize) -> Self {
        PrompterConfig {
            n_patches: 16,
            k_points: 16,
            d,
            d_o: d,
            graph_k: 4,
            refine_m: 4,
            alpha: 0.5,
            strategy: SelectionStrategy::Vulnerable,
            he_arch: PromptEncoderArch::EdgeConv3,
            ho_arch: OffsetGeneratorArch::EdgeConv1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::argument(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.graph_k >= self.n_patches {
            return Err(Error::argument(format!(
                "graph_k {} must be smaller than n {}",
                self.graph_k, self.n_patches
            )));
        }
        if self.refine_m > self.n_patches {
            return Err(Error::argument(format!(
                "refine_m {} exceeds n {}",
                self.refine_m, self.n_patches
            )));
        }
        if self.k_points < 2 {
            return Err(Error::argument("k must be at least 2"));
        }
        if target_count(self.alpha, self.n_patches) == 0 {
            return Err(Error::argument("alpha rounds to zero target patches"));
        }
        Ok(())
    }
}

enum PromptEncoder {
    EdgeConv {
        layers: Vec<EdgeConvLayer>,
        skip_proj: Linear,
    },
    Transformer {
        block: TransformerBlock,
        proj: Linear,
    },
}

enum OffsetGenerator {
    Mlp(Linear),
    EdgeConv(Vec<EdgeConvLayer>),
}

/// All learnable parameters of the point prompter. Offset and center heads
/// are zero-initialized so prompting starts as the identity.
pub struct PrompterParams {
    pub cfg: PrompterConfig,
    he: PromptEncoder,
    ho: OffsetGenerator,
    offset_fc1: Linear,
    offset_fc2: Linear,
    offset_out: Linear,
    center_out: Linear,
    x0_proj: Option<Linear>,
}

impl PrompterParams {
    pub fn init(cfg: PrompterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::derive(seed, &[0x9101]);
        let (d, d_o) = (cfg.d, cfg.d_o);
        let he = match cfg.he_arch {
            PromptEncoderArch::EdgeConv3 => PromptEncoder::EdgeConv {
                layers: vec![
                    EdgeConvLayer::init("prompter.he.ec0", d, d_o, &mut rng),
                    EdgeConvLayer::init("prompter.he.ec1", d_o, d_o, &mut rng),
                    EdgeConvLayer::init("prompter.he.ec2", d_o, d_o, &mut rng),
                ],
                skip_proj: Linear::init(
                    "prompter.he.proj",
                    3 * d_o,
                    d_o,
                    (1.0 / (3 * d_o) as f64).sqrt(),
                    &mut rng,
                    true,
                ),
            },
            PromptEncoderArch::EdgeConv1 => PromptEncoder::EdgeConv {
                layers: vec![EdgeConvLayer::init("prompter.he.ec0", d, d_o, &mut rng)],
                skip_proj: Linear::init(
                    "prompter.he.proj",
                    d_o,
                    d_o,
                    (1.0 / d_o as f64).sqrt(),
                    &mut rng,
                    true,
                ),
            },
            PromptEncoderArch::Transformer1 => PromptEncoder::Transformer {
                block: TransformerBlock::init("prompter.he.tf", d, 4.min(d), &mut rng, true),
                proj: Linear::init(
                    "prompter.he.proj",
                    d,
                    d_o,
                    (1.0 / d as f64).sqrt(),
                    &mut rng,
                    true,
                ),
            },
        };
        let ho = match cfg.ho_arch {
            OffsetGeneratorArch::Mlp1 => OffsetGenerator::Mlp(Linear::init(
                "prompter.ho.fc",
                d_o,
                d_o,
                (2.0 / d_o as f64).sqrt(),
                &mut rng,
                true,
            )),
            OffsetGeneratorArch::EdgeConv1 => OffsetGenerator::EdgeConv(vec![EdgeConvLayer::init(
                "prompter.ho.ec0",
                d_o,
                d_o,
                &mut rng,
            )]),
            OffsetGeneratorArch::EdgeConv3 => OffsetGenerator::EdgeConv(vec![
                EdgeConvLayer::init("prompter.ho.ec0", d_o, d_o, &mut rng),
                EdgeConvLayer::init("prompter.ho.ec1", d_o, d_o, &mut rng),
                EdgeConvLayer::init("prompter.ho.ec2", d_o, d_o, &mut rng),
            ]),
        };
        let k3 = cfg.k_points * 3;
        Ok(PrompterParams {
            he,
            ho,
            offset_fc1: Linear::init("prompter.offset.fc1", d_o, d_o, (2.0 / d_o as f64).sqrt(), &mut rng, true),
            offset_fc2: Linear::init("prompter.offset.fc2", d_o, d_o, (2.0 / d_o as f64).sqrt(), &mut rng, true),
            offset_out: Linear::zeros("prompter.offset.out", d_o, k3, true),
            center_out: Linear::zeros("prompter.center.out", d_o, 3, true),
            x0_proj: if d_o != d {
                Some(Linear::init(
                    "prompter.x0_proj",
                    d_o,
                    d,
                    (1.0 / d_o as f64).sqrt(),
                    &mut rng,
                    true,
                ))
            } else {
                None
            },
            cfg,
        })
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = Vec::new();
        match &self.he {
            PromptEncoder::EdgeConv { layers, skip_proj } => {
                for l in layers {
                    p.extend(l.params());
                }
                p.extend(skip_proj.params());
            }
            PromptEncoder::Transformer { block, proj } => {
                p.extend(block.params());
                p.extend(proj.params());
            }
        }
        match &self.ho {
            OffsetGenerator::Mlp(l) => p.extend(l.params()),
            OffsetGenerator::EdgeConv(layers) => {
                for l in layers {
                    p.extend(l.params());
                }
            }
        }
        p.extend(self.offset_fc1.params());
        p.extend(self.offset_fc2.params());
        p.extend(self.offset_out.params());
        p.extend(self.center_out.params());
        if let Some(l) = &self.x0_proj {
            p.extend(l.params());
        }
        p
    }

    pub fn learnable_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// h_e: multi-scale offset features `f_o` from frozen patch features.
    pub fn prompt_encode(&self, f_p: &Tensor) -> Tensor {
        match &self.he {
            PromptEncoder::EdgeConv { layers, skip_proj } => {
                let mut scales = Vec::with_capacity(layers.len());
                let mut x = f_p.clone();
                for layer in layers {
                    x = layer.forward(&x, self.cfg.graph_k);
                    scales.push(x.clone());
                }
                skip_proj.forward(&Tensor::concat_cols(&scales))
            }
            PromptEncoder::Transformer { block, proj } => proj.forward(&block.forward(f_p)),
        }
    }

    /// Spatial refinement: elementwise max of `f_o` rows over each target's
    /// `refine_m` nearest patch centers (self included).
    pub fn refine_targets(
        &self,
        f_o: &Tensor,
        targets: &TargetSelection,
        centers: &[geom::Point],
    ) -> Tensor {
        let rows: Vec<Tensor> = targets
            .indices
            .iter()
            .map(|&t| {
                let neigh = geom::knn(&centers[t], centers, self.cfg.refine_m, true)
                    .expect("refine_m validated against n");
                let (pooled, _) = f_o.gather_rows(&neigh).max_axis0();
                pooled.reshape(&[1, pooled.numel()])
            })
            .collect();
        Tensor::concat_rows(&rows)
    }

    /// h_o over `[refined target rows; all offset rows]`; only the first l
    /// output rows are kept as the offset tokens O, from which the point
    /// offsets (l, k*3) and center offsets (l, 3) are produced.
    pub fn generate_offsets(&self, refined: &Tensor, f_o: &Tensor) -> (Tensor, Tensor, Tensor) {
        let l = refined.shape()[0];
        let seq = Tensor::concat_rows(&[refined.clone(), f_o.clone()]);
        let out = match &self.ho {
            OffsetGenerator::Mlp(lin) => lin.forward(&seq).relu(),
            OffsetGenerator::EdgeConv(layers) => {
                let mut x = seq;
                for layer in layers {
                    x = layer.forward(&x, self.cfg.graph_k);
                }
                x
            }
        };
        let tokens = out.gather_rows(&(0..l).collect::<Vec<_>>());
        let hidden = self
            .offset_fc2
            .forward(&self.offset_fc1.forward(&tokens).relu())
            .relu();
        let deltas = self.offset_out.forward(&hidden);
        let center_offsets = self.center_out.forward(&tokens);
        (tokens, deltas, center_offsets)
    }

    /// x_0: columnwise max over all offset features, projected to the
    /// encoder width when the offset width differs.
    pub fn prompt_token(&self, f_o: &Tensor) -> Tensor {
        let (pooled, _) = f_o.max_axis0();
        match &self.x0_proj {
            Some(lin) => {
                let row = pooled.reshape(&[1, pooled.numel()]);
                let projected = lin.forward(&row);
                projected.reshape(&[projected.numel()])
            }
            None => pooled,
        }
    }
}

/// Everything about one sample that is constant under a frozen model:
/// patches, thresholds, frozen patch features and tokens, and the
/// unprompted embedding.
pub struct SampleState {
    pub patches: PatchSet,
    pub thresholds: Thresholds,
    /// frozen patch features, row-major n x d
    pub f_p: Vec<f64>,
    /// frozen original patch tokens, row-major n x d
    pub orig_tokens: Vec<f64>,
    /// unprompted shared-space embedding z
    pub z_unprompted: Vec<f64>,
    pub label: u32,
}

impl SampleState {
    pub fn compute(model: &FrozenModel, pc: &crate::geom::PointCloud, n: usize, k: usize) -> Result<Self> {
        let patches = patchify(pc, n, k)?;
        let thresholds = compute_thresholds(pc, &patches);
        let tokens = model.embed_patchset(&patches);
        let seq = Tensor::concat_rows(&[model.enc3d.cls.leaf(), tokens.clone()]);
        let (z, f_p) = model.encode_3d_tokens(&seq, 1);
        Ok(SampleState {
            patches,
            thresholds,
            f_p: f_p.data().to_vec(),
            orig_tokens: tokens.data().to_vec(),
            z_unprompted: z.data().to_vec(),
            label: pc.label.unwrap_or(0),
        })
    }
}

/// Result of the full prompted pipeline for one sample.
pub struct PromptedForward {
    pub z_tilde: Embedding3D,
    pub scores: ImportanceScores,
    pub selection: TargetSelection,
    pub deformed_patches: Vec<Tensor>,
    pub deformed_centers: Vec<Tensor>,
    pub offsets: Tensor,
    pub center_offsets: Tensor,
    pub prompt_token: Tensor,
}

/// patchify → frozen features → score → select → offset features → refine →
/// offsets → deformed patches appended to the originals → encode with
/// `[cls; x0; tokens]`.
pub fn prompted_forward(
    model: &FrozenModel,
    params: &PrompterParams,
    state: &SampleState,
    rng: &mut Prng,
) -> PromptedForward {
    let cfg = &params.cfg;
    let n = state.patches.num_patches();
    let k = state.patches.points_per_patch();
    let d = model.cfg().d;
    assert_eq!(n, cfg.n_patches, "sample has {n} patches, prompter expects {}", cfg.n_patches);

    let f_p = Tensor::constant(&[n, d], state.f_p.clone());
    let scores = importance_scores(state.f_p.as_slice(), n, d);
    let selection = select_targets(&scores, cfg.alpha, cfg.strategy, rng)
        .expect("alpha validated by PrompterConfig");

    let f_o = params.prompt_encode(&f_p);
    let refined = params.refine_targets(&f_o, &selection, &state.patches.centers);
    let (_tokens, deltas, center_offsets) = params.generate_offsets(&refined, &f_o);

    let mut deformed_patches = Vec::with_capacity(selection.indices.len());
    let mut deformed_centers = Vec::with_capacity(selection.indices.len());
    for (row, &t) in selection.indices.iter().enumerate() {
        let flat: Vec<f64> = state.patches.local_points[t].iter().flatten().copied().collect();
        let original = Tensor::constant(&[k, 3], flat);
        let delta = deltas.gather_rows(&[row]).reshape(&[k, 3]);
        deformed_patches.push(original.add(&delta));

        let center = Tensor::constant(&[1, 3], state.patches.centers[t].to_vec());
        let offset = center_offsets.gather_rows(&[row]);
        deformed_centers.push(center.add(&offset));
    }

    let x0 = params.prompt_token(&f_o);
    let orig_tokens = Tensor::constant(&[n, d], state.orig_tokens.clone());
    let deformed_tokens: Vec<Tensor> = deformed_patches
        .iter()
        .zip(&deformed_centers)
        .map(|(pts, c)| model.embedder.token(pts, c).reshape(&[1, d]))
        .collect();
    let mut all_tokens = vec![orig_tokens];
    all_tokens.extend(deformed_tokens);
    let patch_tokens = Tensor::concat_rows(&all_tokens);
    let z_tilde = model.prompted_encode(&x0, &patch_tokens);

    PromptedForward {
        z_tilde: Embedding3D {
            vector: z_tilde,
            source: EmbeddingSource::Prompted,
        },
        scores,
        selection,
        deformed_patches,
        deformed_centers,
        offsets: deltas,
        center_offsets,
        prompt_token: x0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::encoders::{DualEncoder, ModelConfig};
    use crate::rng::{derive, seeded};
    use crate::synthdata::{generate_shape, ShapeSpec, CATEGORIES};

    fn micro_setup(seed: u64) -> (FrozenModel, PrompterParams, SampleState) {
        let cats: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
        let model = FrozenModel::freeze(
            DualEncoder::build(ModelConfig::micro(cats, 16), seed, false).unwrap(),
        );
        let mut cfg = PrompterConfig::desk(16);
        cfg.n_patches = 8;
        cfg.k_points = 4;
        cfg.d_o = 16;
        let params = PrompterParams::init(cfg, seed).unwrap();
        let spec = ShapeSpec {
            category: 2,
            aspect: [0.8, 0.7],
            points: 64,
        };
        let pc = generate_shape(&spec, &mut derive(seed, &[1]));
        let state = SampleState::compute(&model, &pc, 8, 4).unwrap();
        (model, params, state)
    }

    #[test]
    fn importance_scores_match_column_argmax_oracle() {
        let f = vec![1.0, 0.0, 5.0, 2.0, 3.0, 9.0, 1.0, 1.0, 2.0, 2.0, 2.0, 7.0];
        let s = importance_scores(&f, 3, 4);
        assert_eq!(s.scores, vec![1, 2, 1]);
        assert_eq!(s.sum(), 4);
    }

    #[test]
    fn importance_scores_single_row_takes_all() {
        let s = importance_scores(&[0.3, -1.0, 2.0], 1, 3);
        assert_eq!(s.scores, vec![3]);
    }

    #[test]
    fn importance_scores_constant_matrix_ties_to_first_row() {
        let s = importance_scores(&vec![1.0; 12], 3, 4);
        assert_eq!(s.scores, vec![4, 0, 0]);
    }

    #[test]
    fn importance_conservation_on_random_matrices() {
        use rand::Rng;
        let mut rng = seeded(2);
        for _ in 0..300 {
            let n = rng.gen_range(1..=12);
            let d = rng.gen_range(1..=24);
            let f: Vec<f64> = (0..n * d).map(|_| crate::rng::gauss(&mut rng)).collect();
            let s = importance_scores(&f, n, d);
            assert_eq!(s.sum(), d as u64);
            assert!(s.scores.iter().all(|&v| v as usize <= d));
        }
    }

    #[test]
    fn select_targets_vulnerable_tie_break() {
        let s = ImportanceScores {
            scores: vec![1, 2, 1],
            feature_dim: 4,
        };
        let mut rng = seeded(0);
        let sel = select_targets(&s, 1.0 / 3.0, SelectionStrategy::Vulnerable, &mut rng).unwrap();
        assert_eq!(sel.indices, vec![0]);
    }

    #[test]
    fn select_targets_half_of_64_is_32() {
        assert_eq!(target_count(0.5, 64), 32);
        assert_eq!(target_count(0.5, 7), 4); // 3.5 rounds up
    }

    #[test]
    fn select_targets_rejects_zero_targets() {
        let s = ImportanceScores {
            scores: vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            feature_dim: 16,
        };
        let mut rng = seeded(0);
        assert!(select_targets(&s, 0.01, SelectionStrategy::Vulnerable, &mut rng).is_err());
    }

    #[test]
    fn vulnerable_and_critical_are_disjoint_with_distinct_scores() {
        use rand::seq::SliceRandom;
        let mut rng = seeded(5);
        for _ in 0..50 {
            let n = 10;
            let mut vals: Vec<u32> = (0..n as u32).collect();
            vals.shuffle(&mut rng);
            let s = ImportanceScores {
                scores: vals,
                feature_dim: 45,
            };
            let v = select_targets(&s, 0.4, SelectionStrategy::Vulnerable, &mut rng).unwrap();
            let c = select_targets(&s, 0.4, SelectionStrategy::Critical, &mut rng).unwrap();
            assert!(v.indices.iter().all(|i| !c.indices.contains(i)));
        }
    }

    #[test]
    fn select_matches_sort_oracle_on_random_instances() {
        use rand::Rng;
        let mut rng = seeded(6);
        for _ in 0..200 {
            let n = rng.gen_range(2..=16);
            let scores: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let s = ImportanceScores {
                scores: scores.clone(),
                feature_dim: scores.iter().map(|&x| x as usize).sum(),
            };
            let alpha = rng.gen_range(0.1..=1.0);
            let l = target_count(alpha, n);
            if l == 0 {
                continue;
            }
            let got = select_targets(&s, alpha, SelectionStrategy::Vulnerable, &mut rng).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (scores[i], i));
            let mut want = order[..l].to_vec();
            want.sort_unstable();
            assert_eq!(got.indices, want);
        }
    }

    #[test]
    fn edgeconv_two_nodes_see_each_other() {
        let mut rng = seeded(1);
        let layer = EdgeConvLayer::init("t", 2, 3, &mut rng);
        let feats = Tensor::var(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = layer.forward(&feats, 1);
        assert_eq!(out.shape(), &[2, 3]);
        // identical inputs give identical outputs
        let same = Tensor::var(&[3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let out2 = layer.forward(&same, 2);
        let d = out2.data();
        assert_eq!(d[0..3], d[3..6]);
        assert_eq!(d[0..3], d[6..9]);
    }

    #[test]
    fn edgeconv_matches_hand_unrolled_micro_instance() {
        // m=3, c=2, graph_k=1: each node pools over its single nearest
        // neighbor; unroll the linear + relu + max by hand
        let mut rng = seeded(3);
        let layer = EdgeConvLayer::init("t", 2, 2, &mut rng);
        let feats_data = vec![0.0, 0.0, 1.0, 0.0, 10.0, 0.0];
        let feats = Tensor::constant(&[3, 2], feats_data.clone());
        let out = layer.forward(&feats, 1);

        let w = layer.lin.w.value(); // (4, 2)
        let b = layer.lin.b.value();
        // nearest neighbors: node0 -> 1, node1 -> 0, node2 -> 1
        let pairs = [(0usize, 1usize), (1, 0), (2, 1)];
        for (i, (src, nb)) in pairs.iter().enumerate() {
            let xi = [feats_data[src * 2], feats_data[src * 2 + 1]];
            let xj = [feats_data[nb * 2], feats_data[nb * 2 + 1]];
            let edge = [xi[0], xi[1], xj[0] - xi[0], xj[1] - xi[1]];
            for c in 0..2 {
                let mut v = b[c];
                for t in 0..4 {
                    v += edge[t] * w[t * 2 + c];
                }
                let expect = v.max(0.0); // single neighbor: max == the value
                assert!((out.data()[i * 2 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "graph_k 3 must be smaller than 3")]
    fn edgeconv_rejects_graph_as_big_as_nodes() {
        let mut rng = seeded(1);
        let layer = EdgeConvLayer::init("t", 2, 2, &mut rng);
        let feats = Tensor::var(&[3, 2], vec![0.0; 6]);
        let _ = layer.forward(&feats, 3);
    }

    #[test]
    fn refine_extremes() {
        let (_, params, state) = micro_setup(11);
        let n = 8;
        let f_o_data: Vec<f64> = (0..n * 16).map(|i| (i % 7) as f64 - 3.0).collect();
        let f_o = Tensor::constant(&[n, 16], f_o_data.clone());
        let scores = importance_scores(&state.f_p, n, 16);
        let mut rng = seeded(0);
        let sel = select_targets(&scores, 0.5, SelectionStrategy::Vulnerable, &mut rng).unwrap();

        // refine_m = 1 keeps each target's own row
        let mut p1 = params;
        p1.cfg.refine_m = 1;
        let refined = p1.refine_targets(&f_o, &sel, &state.patches.centers);
        for (row, &t) in sel.indices.iter().enumerate() {
            assert_eq!(refined.data()[row * 16..(row + 1) * 16], f_o_data[t * 16..(t + 1) * 16]);
        }

        // refine_m = n gives every target the global columnwise max
        p1.cfg.refine_m = n;
        let refined = p1.refine_targets(&f_o, &sel, &state.patches.centers);
        let mut global = vec![f64::NEG_INFINITY; 16];
        for r in 0..n {
            for c in 0..16 {
                global[c] = global[c].max(f_o_data[r * 16 + c]);
            }
        }
        for row in 0..sel.indices.len() {
            assert_eq!(refined.data()[row * 16..(row + 1) * 16], global[..]);
        }
    }

    #[test]
    fn refine_matches_brute_force_neighbor_max() {
        let (_, mut params, state) = micro_setup(13);
        params.cfg.refine_m = 3;
        let n = 8;
        let mut rng = seeded(4);
        let f_o_data: Vec<f64> = (0..n * 16).map(|_| crate::rng::gauss(&mut rng)).collect();
        let f_o = Tensor::constant(&[n, 16], f_o_data.clone());
        let sel = TargetSelection {
            indices: vec![0, 3, 5],
            alpha: 0.4,
            strategy: SelectionStrategy::Vulnerable,
        };
        let refined = params.refine_targets(&f_o, &sel, &state.patches.centers);
        for (row, &t) in sel.indices.iter().enumerate() {
            // brute force: enumerate all centers by distance
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let da = geom::dist(&state.patches.centers[a], &state.patches.centers[t]);
                let db = geom::dist(&state.patches.centers[b], &state.patches.centers[t]);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            for c in 0..16 {
                let want = order[..3]
                    .iter()
                    .map(|&j| f_o_data[j * 16 + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((refined.data()[row * 16 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_init_heads_give_identity_prompt() {
        let (model, params, state) = micro_setup(17);
        let mut rng = seeded(0);
        let fwd = prompted_forward(&model, &params, &state, &mut rng);
        assert!(fwd.offsets.data().iter().all(|&v| v == 0.0));
        assert!(fwd.center_offsets.data().iter().all(|&v| v == 0.0));
        for (i, &t) in fwd.selection.indices.iter().enumerate() {
            let flat: Vec<f64> = state.patches.local_points[t].iter().flatten().copied().collect();
            let deformed = fwd.deformed_patches[i].data();
            assert_eq!(deformed.len(), flat.len());
            for (a, b) in deformed.iter().zip(&flat) {
                assert_eq!(a.to_bits(), b.to_bits(), "deformed patch differs at init");
            }
        }
    }

    #[test]
    fn prompt_token_is_row_permutation_invariant() {
        let (_, params, _) = micro_setup(19);
        let mut rng = seeded(9);
        let data: Vec<f64> = (0..5 * 16).map(|_| crate::rng::gauss(&mut rng)).collect();
        let f_o = Tensor::constant(&[5, 16], data.clone());
        let x0 = params.prompt_token(&f_o);
        let perm = [4usize, 2, 0, 3, 1];
        let shuffled = f_o.gather_rows(&perm);
        let x0p = params.prompt_token(&shuffled);
        assert_eq!(x0.data(), x0p.data());

        let single = Tensor::constant(&[1, 16], data[..16].to_vec());
        let x0s = params.prompt_token(&single);
        assert_eq!(x0s.data(), &data[..16]);
    }

    #[test]
    fn prompt_token_gradient_routes_to_argmax_rows() {
        let (_, params, _) = micro_setup(23);
        let f_o = Tensor::var(&[3, 16], (0..48).map(|i| i as f64 * 0.1).collect());
        let x0 = params.prompt_token(&f_o);
        backward(&x0.sum_all());
        let g = f_o.grad().unwrap();
        // row 2 has the max in every column; all gradient lands there
        assert!(g[0..32].iter().all(|&v| v == 0.0));
        assert!(g[32..48].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prompted_forward_is_deterministic_and_differs_from_unprompted() {
        let (model, params, state) = micro_setup(29);
        let mut rng = seeded(0);
        let a = prompted_forward(&model, &params, &state, &mut rng);
        let mut rng = seeded(0);
        let b = prompted_forward(&model, &params, &state, &mut rng);
        assert_eq!(a.z_tilde.vector.data(), b.z_tilde.vector.data());
        assert_ne!(a.z_tilde.vector.data(), state.z_unprompted.as_slice());
        // patch count n + l
        let l = a.selection.indices.len();
        assert_eq!(l, 4);
        assert_eq!(a.deformed_patches.len(), l);
    }

    #[test]
    fn end_to_end_gradients_reach_every_parameter_group() {
        let (model, mut params, state) = micro_setup(31);
        // break the zero init so gradients can flow through the offset path
        let mut rng = seeded(55);
        for p in [&params.offset_out.w, &params.center_out.w] {
            p.set_value(normal_vec(&mut rng, p.numel(), 0.05));
        }
        params.cfg.strategy = SelectionStrategy::Vulnerable;
        let mut srng = seeded(0);
        let fwd = prompted_forward(&model, &params, &state, &mut srng);
        let target = Tensor::constant(&[model.cfg().d_s], vec![0.3; model.cfg().d_s]);
        let loss = fwd.z_tilde.vector.cosine_sim(&target).neg();
        backward(&loss);
        for p in params.params() {
            let norm: f64 = p.grad().iter().map(|v| v * v).sum::<f64>();
            assert!(
                norm > 0.0,
                "parameter {} received no gradient",
                p.name()
            );
        }
    }

    #[test]
    fn original_rows_unchanged_by_prompting() {
        let (model, params, state) = micro_setup(37);
        let mut rng = seeded(0);
        let _ = prompted_forward(&model, &params, &state, &mut rng);
        // prompting works on copies; the sample state is immutable by
        // construction, so re-running yields bit-identical originals
        let again = SampleState::compute(
            &model,
            &crate::geom::PointCloud::new(
                state
                    .patches
                    .local_points
                    .iter()
                    .flatten()
                    .copied()
                    .collect::<Vec<_>>(),
            )
            .unwrap(),
            4,
            4,
        );
        assert!(again.is_ok());
    }
}
