//! Learnable context vectors replacing the handcrafted template, plus the
//! cached handcrafted embeddings used by the consistency constraint.

use crate::autodiff::{Parameter, Tensor};
use crate::encoders::{FrozenModel, TextEmbedding, TextSource, TextToken, TEMPLATE_LEN};
use crate::error::Result;
use crate::rng::{derive, gauss};

/// M learnable context vectors, shared across all categories.
pub struct ContextVectors {
    pub v: Parameter,
    pub m: usize,
}

impl ContextVectors {
    /// Initialize from the handcrafted template's token embeddings (cycled
    /// when M differs from the template length) plus gaussian noise.
    pub fn init_from_template(model: &FrozenModel, m: usize, seed: u64, noise_std: f64) -> Self {
        assert!(m >= 1, "need at least one context vector");
        let d_t = model.cfg().d_t;
        let template = model.template_embedding_rows();
        let mut rng = derive(seed, &[0x7E47]);
        let mut data = Vec::with_capacity(m * d_t);
        for i in 0..m {
            let row = &template[i % TEMPLATE_LEN];
            for &v in row {
                data.push(v + gauss(&mut rng) * noise_std);
            }
        }
        ContextVectors {
            v: Parameter::new("text_prompter.v", &[m, d_t], data, true),
            m,
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.v.clone()]
    }

    pub fn learnable_count(&self) -> usize {
        self.v.numel()
    }
}

/// `[SOS; V rows; t_c; EOS]` for one category (length M + 3). The same V
/// leaf is shared across categories within a forward pass.
pub fn build_prompted(
    model: &FrozenModel,
    category: usize,
    v_leaf: &Tensor,
    m: usize,
) -> Result<Vec<TextToken>> {
    let cfg = model.cfg();
    if category >= cfg.num_categories() {
        return Err(crate::error::Error::argument(format!(
            "category id {category} out of range ({} categories)",
            cfg.num_categories()
        )));
    }
    let d_t = cfg.d_t;
    let mut tokens = vec![TextToken::Id(0)];
    for i in 0..m {
        tokens.push(TextToken::Raw(v_leaf.gather_rows(&[i]).reshape(&[d_t])));
    }
    tokens.push(TextToken::Id(cfg.category_token(category)));
    tokens.push(TextToken::Id(1));
    Ok(tokens)
}

/// Prompted text embeddings for every category, recomputed from the current
/// V on each call (V changes between steps).
pub fn prompted_embeddings(model: &FrozenModel, cv: &ContextVectors) -> Vec<TextEmbedding> {
    let v_leaf = cv.v.leaf();
    (0..model.cfg().num_categories())
        .map(|c| {
            let tokens = build_prompted(model, c, &v_leaf, cv.m).expect("category in range");
            TextEmbedding {
                vector: model.encode_text(&tokens),
                category: c as u32,
                source: TextSource::Prompted,
            }
        })
        .collect()
}

/// Handcrafted-template embeddings, computed once at startup and never
/// updated (the encoder is frozen, so they are constant).
pub struct HandcraftedCache {
    vectors: Vec<Vec<f64>>,
}

impl HandcraftedCache {
    pub fn compute(model: &FrozenModel) -> Self {
        let vectors = (0..model.cfg().num_categories())
            .map(|c| model.handcrafted_embedding(c).vector.data().to_vec())
            .collect();
        HandcraftedCache { vectors }
    }

    pub fn num_categories(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, category: usize) -> &[f64] {
        &self.vectors[category]
    }

    /// Constant tensors for use inside loss graphs.
    pub fn as_tensors(&self) -> Vec<Tensor> {
        self.vectors
            .iter()
            .map(|v| Tensor::constant(&[v.len()], v.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::encoders::{DualEncoder, ModelConfig};

    fn micro() -> FrozenModel {
        let cfg = ModelConfig::micro(vec!["a".into(), "b".into(), "c".into()], 8);
        FrozenModel::freeze(DualEncoder::build(cfg, 21, false).unwrap())
    }

    #[test]
    fn prompted_sequence_length_is_m_plus_3() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 1, 0, 0.0);
        let tokens = build_prompted(&model, 0, &cv.v.leaf(), 1).unwrap();
        assert_eq!(tokens.len(), 4);
        let cv4 = ContextVectors::init_from_template(&model, 4, 0, 1e-4);
        let tokens = build_prompted(&model, 2, &cv4.v.leaf(), 4).unwrap();
        assert_eq!(tokens.len(), 7);
    }

    #[test]
    fn categories_share_context_rows() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 2, 3, 1e-4);
        let leaf = cv.v.leaf();
        let a = build_prompted(&model, 0, &leaf, 2).unwrap();
        let b = build_prompted(&model, 1, &leaf, 2).unwrap();
        for i in 1..=2 {
            match (&a[i], &b[i]) {
                (TextToken::Raw(x), TextToken::Raw(y)) => assert_eq!(x.data(), y.data()),
                _ => panic!("expected raw context tokens"),
            }
        }
    }

    #[test]
    fn unknown_category_is_an_argument_error() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 2, 3, 0.0);
        assert!(build_prompted(&model, 9, &cv.v.leaf(), 2).is_err());
    }

    #[test]
    fn changing_v_changes_every_category_embedding() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 4, 5, 1e-4);
        let before = prompted_embeddings(&model, &cv);
        let mut v = cv.v.value();
        v[3] += 0.5;
        cv.v.set_value(v);
        let after = prompted_embeddings(&model, &cv);
        for (b, a) in before.iter().zip(&after) {
            assert_ne!(b.vector.data(), a.vector.data());
            assert_eq!(b.vector.shape(), &[model.cfg().d_s]);
            assert_eq!(a.source, TextSource::Prompted);
        }
    }

    #[test]
    fn frozen_v_gives_constant_embeddings() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 4, 5, 1e-4);
        let a = prompted_embeddings(&model, &cv);
        let b = prompted_embeddings(&model, &cv);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.vector.data(), y.vector.data());
        }
    }

    #[test]
    fn prompted_embedding_gradient_wrt_v_passes_fd() {
        let model = micro();
        let cv = ContextVectors::init_from_template(&model, 2, 7, 1e-4);
        let v = cv.v.clone();
        let model2 = std::rc::Rc::new(model);
        let mc = model2.clone();
        let report = grad_check(
            &[v.clone()],
            move || {
                let leaf = v.leaf();
                let tokens = build_prompted(&mc, 1, &leaf, 2).unwrap();
                let w = mc.encode_text(&tokens);
                w.mul(&w).sum_all()
            },
            1e-5,
        );
        assert!(report.passes(1e-6), "{}", report.summary());
    }

    #[test]
    fn handcrafted_cache_is_write_once_stable() {
        let model = micro();
        let c1 = HandcraftedCache::compute(&model);
        let c2 = HandcraftedCache::compute(&model);
        for cat in 0..c1.num_categories() {
            assert_eq!(c1.vector(cat), c2.vector(cat));
            // equals direct encoding of the fixed template
            let direct = model.handcrafted_embedding(cat);
            assert_eq!(c1.vector(cat), direct.vector.data());
        }
    }
}
