//! The four training objectives and their combination: temperature-scaled
//! cosine classification, prototype attraction, offset regularization with a
//! softened diameter, and text consistency.

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::{self, Thresholds, DIAMETER_SHARPNESS};
use crate::point_prompter::SampleState;

/// Weights of the three regularization terms in the final objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // chosen so the term magnitudes are comparable at init
        LossWeights {
            beta: 1.0,
            gamma: 0.1,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(Error::argument("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar values of each term for logging. `reg` is the softened (trained)
/// value so that `total == ce + beta*proto + gamma*reg + lambda*con` holds
/// exactly; the exact-max violation is reported separately.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub proto: f64,
    pub reg: f64,
    pub con: f64,
    pub total: f64,
}

/// Softmax over cosine similarities divided by the temperature.
pub fn prediction_probs(z: &Tensor, ws: &[Tensor], tau: f64) -> Tensor {
    assert!(ws.len() >= 2, "prediction_probs: need at least 2 categories");
    assert!(tau > 0.0, "prediction_probs: temperature must be positive");
    let rows: Vec<Tensor> = ws
        .iter()
        .map(|w| z.cosine_sim(w).scale(1.0 / tau).reshape(&[1, 1]))
        .collect();
    Tensor::concat_rows(&rows).reshape(&[ws.len()]).softmax()
}

/// Negative log-likelihood of the labeled probability, floored at 1e-12.
pub fn ce_loss(probs: &Tensor, label: usize) -> Tensor {
    assert!(
        label < probs.numel(),
        "ce_loss: label {label} out of range for {} categories",
        probs.numel()
    );
    let p = probs.data()[label];
    if p < 1e-12 {
        eprintln!("warning: ce_loss clamped probability {p:.3e} at 1e-12");
    }
    probs.gather_rows_1d(&[label]).clamp_min(1e-12).ln().neg()
}

/// Fixed per-category means of unprompted train embeddings.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// row per category, each of shared dim
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PrototypeBank {
    pub fn num_categories(&self) -> usize {
        self.prototypes.len()
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (p, &c) in self.prototypes.iter().zip(&self.counts) {
            h.update((c as u64).to_le_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Mean unprompted embedding per category over the train states. Every
/// category must have at least one sample.
pub fn compute_prototypes(
    states: &[&SampleState],
    num_categories: usize,
    category_names: &[String],
) -> Result<PrototypeBank> {
    if states.is_empty() {
        return Err(Error::argument("compute_prototypes: no train samples"));
    }
    let d_s = states[0].z_unprompted.len();
    let mut sums = vec![vec![0.0; d_s]; num_categories];
    let mut counts = vec![0usize; num_categories];
    for s in states {
        let c = s.label as usize;
        counts[c] += 1;
        for (acc, v) in sums[c].iter_mut().zip(&s.z_unprompted) {
            *acc += v;
        }
    }
    for c in 0..num_categories {
        if counts[c] == 0 {
            let name = category_names.get(c).map(|s| s.as_str()).unwrap_or("?");
            return Err(Error::argument(format!(
                "category {c} ('{name}') has no train samples for its prototype"
            )));
        }
        for v in &mut sums[c] {
            *v /= counts[c] as f64;
        }
    }
    Ok(PrototypeBank {
        prototypes: sums,
        counts,
    })
}

/// `1 - cos(z, r_label)`, in [0, 2].
pub fn proto_loss(z: &Tensor, bank: &PrototypeBank, label: usize) -> Tensor {
    assert!(
        label < bank.num_categories(),
        "proto_loss: label {label} has no prototype"
    );
    let r = Tensor::constant(
        &[bank.prototypes[label].len()],
        bank.prototypes[label].clone(),
    );
    z.cosine_sim(&r).neg().affine(1.0, 1.0)
}

/// Log-sum-exp softened maximum pairwise distance of a `[k, 3]` point
/// tensor: smooth everywhere, so its analytic gradient matches central
/// differences, unlike the exact max whose argmax pair switches at ties.
pub fn soft_diameter(points: &Tensor, sharpness: f64) -> Tensor {
    let k = points.shape()[0];
    assert_eq!(points.shape()[1], 3, "soft_diameter: expected [k, 3]");
    if k < 2 {
        return Tensor::constant(&[1], vec![0.0]);
    }
    let xs = points.data();
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    let mut max_d = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let dx = xs[i * 3] - xs[j * 3];
            let dy = xs[i * 3 + 1] - xs[j * 3 + 1];
            let dz = xs[i * 3 + 2] - xs[j * 3 + 2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            max_d = max_d.max(d);
            pairs.push((i, j, d));
        }
    }
    let sum_exp: f64 = pairs.iter().map(|&(_, _, d)| (sharpness * (d - max_d)).exp()).sum();
    let value = max_d + sum_exp.ln() / sharpness;
    let pairs2 = pairs.clone();
    Tensor::from_op(
        "soft_diameter",
        vec![1],
        vec![value],
        vec![points.clone()],
        move |args| {
            let xs = args.parents[0].data();
            let g = args.grad[0];
            let mut out = vec![0.0; xs.len()];
            for &(i, j, d) in &pairs2 {
                if d == 0.0 {
                    continue;
                }
                let w = (sharpness * (d - max_d)).exp() / sum_exp;
                for c in 0..3 {
                    let dir = (xs[i * 3 + c] - xs[j * 3 + c]) / d;
                    out[i * 3 + c] += g * w * dir;
                    out[j * 3 + c] -= g * w * dir;
                }
            }
            vec![Some(out)]
        },
    )
}

/// Trained offset regularizer: mean over deformed patches of the softened
/// size hinge (against the softened threshold, so the identity start is
/// exactly zero) plus the position hinge.
pub fn reg_loss(deformed_patches: &[Tensor], thresholds: &Thresholds) -> Tensor {
    assert!(!deformed_patches.is_empty(), "reg_loss: no deformed patches");
    let mu_pc = Tensor::constant(&[3], thresholds.global_centroid.to_vec());
    let mut terms = Vec::with_capacity(deformed_patches.len());
    for patch in deformed_patches {
        let size = soft_diameter(patch, DIAMETER_SHARPNESS)
            .affine(1.0, -thresholds.g_soft)
            .relu();
        let pos = patch
            .mean_axis0()
            .sub(&mu_pc)
            .norm_l2()
            .affine(1.0, -thresholds.h)
            .relu();
        terms.push(size.add(&pos).reshape(&[1, 1]));
    }
    Tensor::concat_rows(&terms).mean_all()
}

/// Reported metric: mean exact-max threshold violation of the deformed
/// patches (size hinge against the exact diameter threshold plus the
/// position hinge).
pub fn reg_violation_exact(deformed_patches: &[Tensor], thresholds: &Thresholds) -> f64 {
    let mut total = 0.0;
    for patch in deformed_patches {
        let k = patch.shape()[0];
        let pts: Vec<geom::Point> = (0..k)
            .map(|i| {
                let d = patch.data();
                [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]
            })
            .collect();
        let size = (geom::patch_diameter(&pts) - thresholds.g).max(0.0);
        let mu = geom::centroid(&pts).expect("non-empty patch");
        let pos = (geom::dist(&mu, &thresholds.global_centroid) - thresholds.h).max(0.0);
        total += size + pos;
    }
    total / deformed_patches.len() as f64
}

/// `(1/C) * sum(1 - cos(w_c, w~_c))`.
pub fn con_loss(handcrafted: &[Tensor], prompted: &[Tensor]) -> Tensor {
    assert_eq!(
        handcrafted.len(),
        prompted.len(),
        "con_loss: category count mismatch {} vs {}",
        handcrafted.len(),
        prompted.len()
    );
    let terms: Vec<Tensor> = handcrafted
        .iter()
        .zip(prompted)
        .map(|(w, wt)| w.cosine_sim(wt).neg().affine(1.0, 1.0).reshape(&[1, 1]))
        .collect();
    Tensor::concat_rows(&terms).mean_all()
}

/// Weighted combination, keeping the parts for logging.
pub fn total_loss(
    ce: &Tensor,
    proto: &Tensor,
    reg: &Tensor,
    con: &Tensor,
    weights: &LossWeights,
) -> (Tensor, LossBreakdown) {
    let total = ce
        .add(&proto.scale(weights.beta))
        .add(&reg.scale(weights.gamma))
        .add(&con.scale(weights.lambda));
    let breakdown = LossBreakdown {
        ce: ce.item(),
        proto: proto.item(),
        reg: reg.item(),
        con: con.item(),
        total: total.item(),
    };
    (total, breakdown)
}
