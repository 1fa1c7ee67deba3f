//! Vision encoder, JTM encoder and decoder contracts.

mod common;

use std::collections::BTreeSet;

use common::oracles::{attention_by_hand, causality_sweep};
use common::*;
use miss::decoder::{decode_train, generate, logits, DecoderContext, GenerateOptions, Strategy};
use miss::graph::{softmax_rows, Graph, Tensor};
use miss::jtm::{cross_attention, encode_fusion, encode_text};
use miss::tokenization::{encode, Mode};
use miss::vision::{embed_image, patchify, ImageTensor};
use ndarray::{s, Array3};
use proptest::prelude::*;

#[test]
fn cross_attention_matches_hand_transcription() {
    for seed in 0..20 {
        let q = random_tensor(2, 2, seed);
        let k = random_tensor(2, 2, seed + 100);
        let v = random_tensor(2, 2, seed + 200);
        let b = random_tensor(2, 2, seed + 300);
        let got = cross_attention(&q, &k, &v, &b).unwrap();
        let want = attention_by_hand(&q, &k, &v, &b);
        for (a, w) in got.iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), masked in 0usize..8) {
        let mut t = random_tensor(rows, cols, seed) * 30.0;
        if masked < cols - 1 {
            t.column_mut(masked).fill(-1e9);
        }
        let p = softmax_rows(&t);
        for r in p.rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn output_rows_depend_only_on_geometry(seed in any::<u64>(), grid in 1usize..4) {
        let mut m = tiny_model(3);
        m.set_image_size(4 * grid).unwrap();
        let img = random_image(4 * grid, seed);
        let e = embed_image(&m.params, &m.config.vision, &img).unwrap();
        prop_assert_eq!(e.len(), grid * grid + 1);
    }
}

#[test]
fn patch_and_position_permutation_permutes_outputs() {
    let m = tiny_model(11);
    let cfg = &m.config.vision;
    let img = random_image(8, 12);
    let (a, b) = (0usize, 3usize);
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let mut swapped = img.pixels().clone();
    let (ay, ax) = (a / grid * p, a % grid * p);
    let (by, bx) = (b / grid * p, b % grid * p);
    for c in 0..3 {
        let pa = img.pixels().slice(s![c, ay..ay + p, ax..ax + p]).to_owned();
        let pb = img.pixels().slice(s![c, by..by + p, bx..bx + p]).to_owned();
        swapped.slice_mut(s![c, ay..ay + p, ax..ax + p]).assign(&pb);
        swapped.slice_mut(s![c, by..by + p, bx..bx + p]).assign(&pa);
    }
    let swapped = ImageTensor::new(swapped).unwrap();
    assert_eq!(patchify(&swapped, p).unwrap().row(a), patchify(&img, p).unwrap().row(b));

    let mut ps = m.params.clone();
    let pos = ps.get_mut("vision.pos").unwrap();
    let (ra, rb) = (pos.row(a + 1).to_owned(), pos.row(b + 1).to_owned());
    pos.row_mut(a + 1).assign(&rb);
    pos.row_mut(b + 1).assign(&ra);

    let orig = embed_image(&m.params, cfg, &img).unwrap().0;
    let perm = embed_image(&ps, cfg, &swapped).unwrap().0;
    let map = |r: usize| if r == a + 1 { b + 1 } else if r == b + 1 { a + 1 } else { r };
    for r in 0..orig.nrows() {
        for c in 0..orig.ncols() {
            assert!((perm[[r, c]] - orig[[map(r), c]]).abs() < 1e-10);
        }
    }
}

#[test]
fn pixel_values_do_not_change_row_count() {
    let m = tiny_model(2);
    let zeros = ImageTensor::new(Array3::zeros((3, 8, 8))).unwrap();
    let noise = random_image(8, 9);
    let a = embed_image(&m.params, &m.config.vision, &zeros).unwrap();
    let b = embed_image(&m.params, &m.config.vision, &noise).unwrap();
    assert_eq!(a.0.dim(), b.0.dim());
    assert_ne!(a, b);
}

fn used_params(f: impl Fn(&mut Graph) -> miss::graph::Var) -> BTreeSet<String> {
    let mut g = Graph::new();
    let out = f(&mut g);
    let s = g.sum(out);
    let grads = g.backward(s);
    g.param_grads(&grads).into_keys().collect()
}

#[test]
fn text_and_fusion_share_all_but_cross_attention() {
    let m = tiny_model(5);
    let t = encode("a red circle", &m.vocab, Mode::TextCls, 8).unwrap();
    let img = random_tensor(5, 8, 6);
    let text = used_params(|g| encode_text(g, &m.params, &m.config, &t).unwrap());
    let fusion = used_params(|g| {
        let i = g.constant(img.clone());
        encode_fusion(g, &m.params, &m.config, &t, i).unwrap()
    });
    let cross: BTreeSet<String> = fusion.iter().filter(|n| n.contains(".cross_attn.") || n.contains(".ln_cross.")).cloned().collect();
    assert!(!cross.is_empty());
    let shared: BTreeSet<String> = fusion.difference(&cross).cloned().collect();
    assert_eq!(text, shared);
}

#[test]
fn text_mode_ignores_image_parameters() {
    let m = tiny_model(7);
    let t = encode("is there a blue square", &m.vocab, Mode::TextCls, 8).unwrap();
    let run = |ps: &miss::params::ParamStore| {
        let mut g = Graph::inference();
        let out = encode_text(&mut g, ps, &m.config, &t).unwrap();
        g.value(out).clone()
    };
    let before = run(&m.params);
    let mut ps = m.params.clone();
    for (name, v) in ps.iter_mut() {
        if name.starts_with("vision.") {
            v.mapv_inplace(|x| x * -3.0 + 1.0);
        }
    }
    assert_eq!(before, run(&ps));
}

#[test]
fn fusion_output_depends_on_image() {
    let m = tiny_model(8);
    let t = encode("green triangle", &m.vocab, Mode::EncodeQ, 8).unwrap();
    let run = |img: Tensor| {
        let mut g = Graph::inference();
        let i = g.constant(img);
        let out = encode_fusion(&mut g, &m.params, &m.config, &t, i).unwrap();
        g.value(out).clone()
    };
    assert_ne!(run(random_tensor(5, 8, 1)), run(random_tensor(5, 8, 2)));
}

/// 100 seeded cases, compared bit for bit.
#[test]
fn decoder_is_strictly_causal() {
    causality_sweep(14, 100).unwrap();
}

#[test]
fn decoder_reads_its_context() {
    let m = tiny_model(16);
    let seq = encode("green triangle", &m.vocab, Mode::DecodeA, 6).unwrap();
    let a = logits(&m.params, &m.config, &seq, &DecoderContext::image(random_tensor(5, 8, 17))).unwrap();
    let b = logits(&m.params, &m.config, &seq, &DecoderContext::image(random_tensor(5, 8, 18))).unwrap();
    for r in 0..seq.len() {
        assert_ne!(a.row(r), b.row(r), "position {r} ignores the context");
    }
}

#[test]
fn decode_train_rejects_non_answer_sequences() {
    let m = tiny_model(19);
    let q = encode("green", &m.vocab, Mode::EncodeQ, 4).unwrap();
    let mut g = Graph::new();
    let c = g.constant(random_tensor(5, 8, 20));
    assert!(decode_train(&mut g, &m.params, &m.config, &q, c, &[true; 5]).is_err());
}

#[test]
fn greedy_and_beam_generation_terminate() {
    let m = tiny_model(21);
    let ctx = DecoderContext::image(random_tensor(5, 8, 22));
    for strategy in [Strategy::Greedy, Strategy::Beam(3)] {
        let opts = GenerateOptions { strategy, max_len: 4, ..Default::default() };
        let out = generate(&m.params, &m.config, &m.vocab, &ctx, &opts).unwrap();
        assert!(out.split_whitespace().count() <= 4);
    }
    let yes_no = vec![m.vocab.id("yes"), m.vocab.id("no")];
    let opts = GenerateOptions { allowed: Some(yes_no), min_len: 1, max_len: 1, ..Default::default() };
    let out = generate(&m.params, &m.config, &m.vocab, &ctx, &opts).unwrap();
    assert!(out == "yes" || out == "no", "{out}");
}
