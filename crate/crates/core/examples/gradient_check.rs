//! Finite-difference check of the full pre-training objective on a width-8
//! model, one line per parameter tensor.


use miss::gradcheck::check;
use miss::graph::Graph;
use miss::jtm::{encode_fusion, encode_text, project};
use miss::model::{MissModel, ModelConfig, StackConfig};
use miss::objectives::{itc_loss, itm_loss, mlm_loss, CtxVar, ItcInputs, ItcQueues};
use miss::tokenization::{encode, mask_batch, MaskProbs, Mode, Vocab};
use miss::vision::{encode_image, EncoderConfig, ImageTensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> miss::Result<()> {
    let config = ModelConfig {
        vision: EncoderConfig { depth: 1, d: 8, heads: 2, ffn_dim: 16, patch_size: 4, image_size: 8 },
        jtm: StackConfig { depth: 1, heads: 2, ffn_dim: 16 },
        decoder: StackConfig { depth: 1, heads: 2, ffn_dim: 16 },
        max_text_len: 8,
        d_proj: 4,
        init_std: 0.3,
        ..ModelConfig::desk()
    };
    let vocab = Vocab::build(["a red circle", "a blue square", "a green triangle"], 1)?;
    let model = MissModel::new(config, vocab, 0, 0.07)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<ImageTensor> =
        (0..2).map(|_| ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0)))).collect::<miss::Result<_>>()?;
    let captions = vec![encode("a red circle", &model.vocab, Mode::TextCls, 6)?, encode("a blue square", &model.vocab, Mode::TextCls, 6)?];
    let masked = mask_batch(&captions, &model.vocab, &mut rng, &MaskProbs { select_p: 0.5, ..Default::default() })?;
    let cfg = &model.config;
    // momentum features are inputs to the objective, not functions of the online weights
    let unit = |rng: &mut ChaCha8Rng| {
        let mut t = ndarray::Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0f64..1.0));
        for mut r in t.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        t
    };
    let (feat_im, feat_tm) = (unit(&mut rng), unit(&mut rng));

    let report = check(&model.params, &[], 1e-5, |g: &mut Graph, ps| {
        let mut vis = Vec::new();
        let (mut cv, mut ct) = (Vec::new(), Vec::new());
        for (img, cap) in images.iter().zip(&captions) {
            let v = encode_image(g, ps, &cfg.vision, img)?;
            let t = encode_text(g, ps, cfg, cap)?;
            cv.push(g.slice_rows(v, 0, 1));
            ct.push(g.slice_rows(t, 0, 1));
            vis.push(v);
        }
        let (cv, ct) = (g.concat_rows(&cv), g.concat_rows(&ct));
        let image = project(g, ps, "proj.vision", cv)?;
        let text = project(g, ps, "proj.text", ct)?;
        let image_m = g.constant(feat_im.clone());
        let text_m = g.constant(feat_tm.clone());
        let temp = g.param(ps, "temp")?;
        let itc = itc_loss(g, &ItcInputs { image, text, image_m, text_m, temp }, &mut ItcQueues::new(8, 4))?;
        let pos = encode_fusion(g, ps, cfg, &captions[0], vis[0])?;
        let neg = encode_fusion(g, ps, cfg, &captions[1], vis[0])?;
        let rows = [g.slice_rows(pos, 0, 1), g.slice_rows(neg, 0, 1)];
        let cls = g.concat_rows(&rows);
        let itm = itm_loss(g, ps, cls, &[1, 0])?;
        let ctx: Vec<CtxVar> = vis.iter().map(|&v| CtxVar::unmasked(g, v)).collect();
        let mlm = mlm_loss(g, ps, cfg, &masked, &ctx)?;
        let a = g.add(itc.loss, itm.loss);
        Ok(g.add(a, mlm.loss))
    })?;

    let mut worst: f64 = 0.0;
    for r in &report {
        println!("{:<36} rel {:.2e}  abs {:.2e}  |grad| {:.3e}", r.name, r.rel_error, r.max_abs_error, r.analytic_norm);
        if r.max_abs_error >= 1e-8 {
            worst = worst.max(r.rel_error);
        }
    }
    println!("{} tensors, worst relative error {worst:.2e}", report.len());
    Ok(())
}
