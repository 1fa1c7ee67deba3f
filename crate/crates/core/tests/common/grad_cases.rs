//! Finite-difference cases at width 8, shared by the gradient suite and
//! the acceptance run.

use miss::decoder::decode_train;
use miss::gradcheck::{check, ParamCheck};
use miss::jtm::{encode_fusion, encode_text, project};
use miss::objectives::{itc_loss, itm_loss, lm_loss, mlm_loss, CtxVar, ItcInputs, ItcQueues};
use miss::params::ParamStore;
use miss::tokenization::{encode, mask_batch, MaskProbs, Mode};
use miss::vision::encode_image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;
/// Absolute floor for tensors whose true gradient is zero.
pub const FLOOR: f64 = 1e-8;

fn names<'a>(ps: &'a ParamStore, prefix: &str) -> Vec<&'a str> {
    ps.names().filter(|n| n.starts_with(prefix)).collect()
}

pub fn all() -> Vec<(&'static str, Vec<ParamCheck>)> {
    vec![
        ("vision", vision_layer()),
        ("jtm text", jtm_text_mode()),
        ("jtm fusion", jtm_fusion_mode()),
        ("decoder", decoder_layer()),
        ("itc", itc_loss_gradients()),
        ("itm", itm_loss_gradients()),
        ("mlm", mlm_loss_gradients()),
        ("lm", lm_loss_gradients()),
        ("projection", projection_gradients()),
    ]
}

pub fn vision_layer() -> Vec<ParamCheck> {
    let m = tiny_model(1);
    let img = random_image(8, 2);
    let w = random_tensor(5, 8, 3);
    check(&m.params, &names(&m.params, "vision."), H, |g, ps| {
        let v = encode_image(g, ps, &m.config.vision, &img)?;
        let w = g.constant(w.clone());
        let p = g.mul(v, w);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn jtm_text_mode() -> Vec<ParamCheck> {
    let m = tiny_model(4);
    let t = encode("a red circle", &m.vocab, Mode::TextCls, 6).unwrap();
    let w = random_tensor(6, 8, 5);
    let mut list = names(&m.params, "jtm.");
    list.extend(names(&m.params, "text."));
    check(&m.params, &list, H, |g, ps| {
        let x = encode_text(g, ps, &m.config, &t)?;
        let w = g.constant(w.clone());
        let p = g.mul(x, w);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn jtm_fusion_mode() -> Vec<ParamCheck> {
    let m = tiny_model(6);
    let mut ps = m.params.clone();
    ps.insert("probe.image", random_tensor(5, 8, 7));
    let q = encode("is there a blue square", &m.vocab, Mode::EncodeQ, 8).unwrap();
    let w = random_tensor(8, 8, 8);
    let mut list = names(&ps, "jtm.");
    list.push("probe.image");
    check(&ps, &list, H, |g, ps| {
        let img = g.param(ps, "probe.image")?;
        let x = encode_fusion(g, ps, &m.config, &q, img)?;
        let w = g.constant(w.clone());
        let p = g.mul(x, w);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn decoder_layer() -> Vec<ParamCheck> {
    let m = tiny_model(9);
    let mut ps = m.params.clone();
    ps.insert("probe.ctx", random_tensor(4, 8, 10));
    let a = encode("green triangle", &m.vocab, Mode::DecodeA, 6).unwrap();
    let w = random_tensor(6, m.vocab.len(), 11);
    let mut list = names(&ps, "dec.");
    list.push("probe.ctx");
    let mask = [true, true, false, true];
    check(&ps, &list, H, |g, ps| {
        let ctx = g.param(ps, "probe.ctx")?;
        let logits = decode_train(g, ps, &m.config, &a, ctx, &mask)?;
        let w = g.constant(w.clone());
        let p = g.mul(logits, w);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn itc_loss_gradients() -> Vec<ParamCheck> {
    let mut ps = ParamStore::new();
    ps.insert("img", random_tensor(3, 6, 12));
    ps.insert("txt", random_tensor(3, 6, 13));
    ps.insert("w", random_tensor(6, 4, 14));
    ps.insert("temp", ndarray::array![[0.2]]);
    let im = unit_rows(&random_tensor(3, 4, 15));
    let tm = unit_rows(&random_tensor(3, 4, 16));
    let mut queues = ItcQueues::new(8, 4);
    queues.image.push(&unit_rows(&random_tensor(5, 4, 17))).unwrap();
    queues.text.push(&unit_rows(&random_tensor(5, 4, 18))).unwrap();
    check(&ps, &[], H, |g, ps| {
        let w = g.param(ps, "w")?;
        let i = g.param(ps, "img")?;
        let t = g.param(ps, "txt")?;
        let i = g.matmul(i, w);
        let t = g.matmul(t, w);
        let image = g.l2_normalize(i, 1e-12);
        let text = g.l2_normalize(t, 1e-12);
        let image_m = g.constant(im.clone());
        let text_m = g.constant(tm.clone());
        let temp = g.param(ps, "temp")?;
        let mut q = queues.clone();
        Ok(itc_loss(g, &ItcInputs { image, text, image_m, text_m, temp }, &mut q)?.loss)
    })
    .unwrap()
}

pub fn itm_loss_gradients() -> Vec<ParamCheck> {
    let m = tiny_model(24);
    let mut ps = m.params.subset(&["itm."]);
    ps.insert("probe.cls", random_tensor(6, 8, 25));
    let labels = [1, 0, 0, 1, 0, 0];
    check(&ps, &[], H, |g, ps| {
        let cls = g.param(ps, "probe.cls")?;
        Ok(itm_loss(g, ps, cls, &labels)?.loss)
    })
    .unwrap()
}

pub fn mlm_loss_gradients() -> Vec<ParamCheck> {
    let m = tiny_model(26);
    let mut ps = m.params.clone();
    ps.insert("probe.ctx0", random_tensor(5, 8, 27));
    ps.insert("probe.ctx1", random_tensor(5, 8, 28));
    let seqs = vec![
        encode("a red circle in the upper left", &m.vocab, Mode::TextCls, 8).unwrap(),
        encode("blue square", &m.vocab, Mode::TextCls, 8).unwrap(),
    ];
    let probs = MaskProbs { select_p: 0.6, ..Default::default() };
    let masked = mask_batch(&seqs, &m.vocab, &mut ChaCha8Rng::seed_from_u64(3), &probs).unwrap();
    assert!(masked.selected() > 0);
    let mut list = names(&ps, "dec.");
    list.extend(["probe.ctx0", "probe.ctx1"]);
    check(&ps, &list, H, |g, ps| {
        let c0 = g.param(ps, "probe.ctx0")?;
        let c1 = g.param(ps, "probe.ctx1")?;
        let ctx = vec![CtxVar::unmasked(g, c0), CtxVar::unmasked(g, c1)];
        Ok(mlm_loss(g, ps, &m.config, &masked, &ctx)?.loss)
    })
    .unwrap()
}

pub fn lm_loss_gradients() -> Vec<ParamCheck> {
    let m = tiny_model(29);
    let mut ps = m.params.clone();
    ps.insert("probe.image", random_tensor(5, 8, 30));
    let q = encode("is there a square", &m.vocab, Mode::EncodeQ, 8).unwrap();
    let answers = vec![encode("yes", &m.vocab, Mode::DecodeA, 4).unwrap(), encode("green triangle", &m.vocab, Mode::DecodeA, 6).unwrap()];
    let mut list = names(&ps, "dec.");
    list.extend(names(&m.params, "jtm.layers.0.cross_attn"));
    list.push("probe.image");
    check(&ps, &list, H, |g, ps| {
        let img = g.param(ps, "probe.image")?;
        let f = encode_fusion(g, ps, &m.config, &q, img)?;
        let ctx = vec![CtxVar { var: f, mask: q.key_mask() }, CtxVar::unmasked(g, img)];
        lm_loss(g, ps, &m.config, &answers, &ctx)
    })
    .unwrap()
}

pub fn projection_gradients() -> Vec<ParamCheck> {
    let m = tiny_model(31);
    let mut ps = m.params.subset(&["proj."]);
    ps.insert("probe.x", random_tensor(3, 8, 32));
    let w = random_tensor(3, 4, 33);
    check(&ps, &[], H, |g, ps| {
        let x = g.param(ps, "probe.x")?;
        let p = project(g, ps, "proj.vision", x)?;
        let w = g.constant(w.clone());
        let y = g.mul(p, w);
        Ok(g.sum(y))
    })
    .unwrap()
}
