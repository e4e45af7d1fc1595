use p3t_core::autodiff::{backward, Tensor};
use p3t_core::encoders::{DualEncoder, ModelConfig};
use p3t_core::geom::patchify;
use p3t_core::synthdata::*;
use p3t_core::rng::derive;

fn main() {
    let cats: Vec<String> = CATEGORIES.iter().map(|s| s.to_string()).collect();
    let cfg = ModelConfig::micro(cats, 16);
    let enc = DualEncoder::build(cfg, 1, true).unwrap();
    // one batch of 8 samples, one per category
    let mut zs = Vec::new();
    for cat in 0..8 {
        let spec = ShapeSpec { category: cat, aspect: [1.4, 1.6], points: 96 };
        let pc = generate_shape(&spec, &mut derive(9, &[cat as u64]));
        let ps = patchify(&pc, 8, 12).unwrap();
        let (z, _) = enc.unprompted_forward(&ps);
        zs.push((z, cat));
    }
    let ws: Vec<Tensor> = (0..8).map(|c| enc.handcrafted_embedding(c).vector).collect();
    let inv_tau = 1.0 / enc.tau();
    let mut terms = Vec::new();
    for (z, label) in &zs {
        let row: Vec<Tensor> = ws.iter().map(|w| z.cosine_sim(w).scale(inv_tau).reshape(&[1,1])).collect();
        let logits = Tensor::concat_rows(&row).reshape(&[8]);
        let p = logits.softmax().gather_rows_1d(&[*label]);
        terms.push(p.clamp_min(1e-12).ln().neg().reshape(&[1,1]));
    }
    let loss = Tensor::concat_rows(&terms).mean_all();
    println!("loss {}", loss.item());
    backward(&loss);
    // print grad norms by param
    for p in enc.params() {
        let g = p.grad();
        let n: f64 = g.iter().map(|v| v*v).sum::<f64>().sqrt();
        println!("{:30} |g| = {:.3e}  seen={}", p.name(), n, p.grad_seen());
    }
    // print cosine spread
    for (z, label) in zs.iter().take(2) {
        let sims: Vec<f64> = ws.iter().map(|w| z.cosine_sim(w).item()).collect();
        println!("label {label} sims {:?}", sims);
    }
}
