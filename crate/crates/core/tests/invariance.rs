mod common;

use std::collections::HashSet;

use ftclip::ids::{Azimuth, NodeLabel};
use ftclip::model::layers::{biased_masked_attention, AttentionWeights};
use ftclip::model::{image, tree, EncoderOptions, Model};
use ftclip::tensor::{Tape, Tensor};
use ftclip::{mask_unknown, parse_str, FormationTree};
use rand::seq::SliceRandom;
use rand::Rng;

use common::{delete_nodes, max_rel_diff, random_tree, rng, scrambled_model, shuffle_siblings, tiny_config};

const RADICALS: usize = 8;

fn model_f32(seed: u64) -> Model<f32> {
    scrambled_model(tiny_config(), EncoderOptions::default(), RADICALS, seed, 0.3)
}

#[test]
fn encodings_are_unit_norm() {
    let m = model_f32(1);
    let mut r = rng(2);
    for _ in 0..10 {
        let t = random_tree(&mut r, 12, RADICALS as u32, false);
        let e = m.encode_trees(&[&t]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }
    let img = ftclip::GlyphImage::from_pixels(32, 32, (0..1024).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
    let e = m.encode_images(&[&img]).unwrap();
    assert!((e.norm() - 1.0).abs() < 1e-6);
}

#[test]
fn sibling_permutation_invariance() {
    let m = model_f32(3);
    let mut r = rng(4);
    for _ in 0..20 {
        let t = random_tree(&mut r, 15, RADICALS as u32, true);
        let p = shuffle_siblings(&t, &mut r);
        let a = m.encode_trees(&[&t]).unwrap();
        let b = m.encode_trees(&[&p]).unwrap();
        assert!(max_rel_diff(&b, &a) <= 1e-5, "{t:?}");
    }
}

#[test]
fn masking_a_leaf_equals_deleting_it() {
    let m = model_f32(5);
    let mut r = rng(6);
    let mut checked = 0;
    while checked < 20 {
        let t = random_tree(&mut r, 15, RADICALS as u32, true);
        let known: HashSet<u32> = (0..RADICALS as u32).filter(|_| r.random_bool(0.6)).collect();
        let masked = mask_unknown(&t, &known);
        let drop: Vec<usize> = (0..t.len()).filter(|&i| masked.is_masked(i)).collect();
        if drop.is_empty() {
            continue;
        }
        let (pruned, _) = delete_nodes(&t, &drop);
        let a = m.encode_trees(&[&masked]).unwrap();
        let b = m.encode_trees(&[&pruned]).unwrap();
        assert!(max_rel_diff(&a, &b) <= 1e-6);
        checked += 1;
    }
}

#[test]
fn absent_azimuths_get_exactly_zero_bias_gradient() {
    let m = scrambled_model::<f64>(tiny_config(), EncoderOptions::default(), RADICALS, 7, 0.3);
    let mut r = rng(8);
    for _ in 0..20 {
        let t = random_tree(&mut r, 12, RADICALS as u32, true);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape).unwrap();
        let batch = tree::TreeBatch::new(&[&t], &m.options, RADICALS).unwrap();
        let e = tree::encode(&mut tape, &bound, &m.config, &m.options, &batch).unwrap();
        let w = tape.constant(common::random_tensor(1, m.config.d_embed, 9)).unwrap();
        let y = tape.mul(e, w).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(bound.get("tree.azimuth_bias").unwrap()).unwrap();
        let present: HashSet<usize> = (1..t.len()).map(|i| t.azimuth(i).id()).collect();
        for a in 1..Azimuth::COUNT {
            for h in 0..m.config.heads {
                if present.contains(&a) {
                    continue;
                }
                assert_eq!(g.get(h, a), 0.0, "azimuth {a} head {h}");
            }
        }
        if t.len() > 1 {
            assert!((0..m.config.heads).any(|h| g.get(h, 0) != 0.0));
        }
    }
}

#[test]
fn node_inputs_are_label_plus_azimuth() {
    let m = model_f32(10);
    let t = parse_str("⿰ r0 r1").unwrap();
    let batch = tree::TreeBatch::new(&[&t], &m.options, RADICALS).unwrap();
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape).unwrap();
    let h = tree::embed_nodes(&mut tape, &bound, &m.options, &batch).unwrap();
    let node = m.params.get("tree.node_embed").unwrap();
    let az = m.params.get("tree.azimuth_embed").unwrap();
    let rows = [(RADICALS, 0), (0, 1), (1, 2)];
    for (i, (label, azimuth)) in rows.into_iter().enumerate() {
        for c in 0..m.config.d {
            assert_eq!(tape.value(h).get(i, c), node.get(label, c) + az.get(azimuth, c));
        }
    }
    let leaf = parse_str("r3").unwrap();
    let mut zeroed = m.clone();
    for v in zeroed.params.get_mut("tree.azimuth_embed").unwrap().data_mut() {
        *v = 0.0;
    }
    let batch = tree::TreeBatch::new(&[&leaf], &zeroed.options, RADICALS).unwrap();
    let mut tape = Tape::new();
    let bound = zeroed.params.bind(&mut tape).unwrap();
    let h = tree::embed_nodes(&mut tape, &bound, &zeroed.options, &batch).unwrap();
    assert_eq!(tape.value(h).row(0), node.row(3));
}

#[test]
fn single_key_rows_ignore_the_bias() {
    // children of a left-right root attend only to themselves
    let m = scrambled_model::<f64>(tiny_config(), EncoderOptions::default(), RADICALS, 11, 0.3);
    let t = parse_str("⿰ r0 r1").unwrap();
    let batch = tree::TreeBatch::new(&[&t], &m.options, RADICALS).unwrap();
    let run = |bias: Tensor<f64>| {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape).unwrap();
        let h = tree::embed_nodes(&mut tape, &bound, &m.options, &batch).unwrap();
        let w = AttentionWeights::bind(&bound, "tree.layers.0").unwrap();
        let b = tape.constant(bias).unwrap();
        let out = biased_masked_attention(&mut tape, h, batch.pattern.clone(), &w, Some(b), 2).unwrap();
        tape.value(out).clone()
    };
    let a = run(Tensor::zeros(&[2, Azimuth::COUNT]));
    let b = run(common::random_tensor(2, Azimuth::COUNT, 3).map(|v| 4.0 * v));
    assert_eq!(a.row(1), b.row(1));
    assert_eq!(a.row(2), b.row(2));
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn kept_patch_order_does_not_matter() {
    let m = model_f32(12);
    let mut r = rng(13);
    let img = ftclip::GlyphImage::from_pixels(32, 32, (0..1024).map(|_| r.random::<u8>()).collect()).unwrap();
    let patches: Tensor<f32> = image::patchify(&img, 8).unwrap();
    let mut kept: Vec<usize> = image::sample_mask(16, 0.5, &mut r);
    let a = m.encode_patches(&[&patches], &[kept.clone()]).unwrap();
    kept.shuffle(&mut r);
    let b = m.encode_patches(&[&patches], &[kept]).unwrap();
    assert!(max_rel_diff(&b, &a) < 1e-5);
    let c = m.encode_images(&[&img]).unwrap();
    let d = m.encode_images(&[&img]).unwrap();
    assert_eq!(c, d);
}

#[test]
fn batching_does_not_change_encodings() {
    let m = model_f32(14);
    let mut r = rng(15);
    let trees: Vec<FormationTree> = (0..6).map(|_| random_tree(&mut r, 12, RADICALS as u32, false)).collect();
    let refs: Vec<&FormationTree> = trees.iter().collect();
    let all = m.encode_trees(&refs).unwrap();
    for (i, t) in trees.iter().enumerate() {
        let one = m.encode_trees(&[t]).unwrap();
        for c in 0..m.config.d_embed {
            assert!((all.get(i, c) - one.get(0, c)).abs() < 1e-6);
        }
    }
}

#[test]
fn special_node_sees_every_unmasked_node() {
    let options = EncoderOptions {
        special_node: true,
        ..EncoderOptions::default()
    };
    let t = parse_str("⿱ ⿰ r0 r1 r2").unwrap();
    let b = tree::TreeBatch::new(&[&t], &options, RADICALS).unwrap();
    assert_eq!(b.pooled, vec![5]);
    assert_eq!(b.pattern.keys(5), &[0, 1, 2, 3, 4, 5]);
    for q in 0..5 {
        assert!(!b.pattern.keys(q).contains(&5));
    }
    let known: HashSet<u32> = [0, 2].into_iter().collect();
    let masked = mask_unknown(&t, &known);
    let b = tree::TreeBatch::new(&[&masked], &options, RADICALS).unwrap();
    assert_eq!(b.pattern.keys(5), &[0, 1, 2, 4, 5]);
    assert!(matches!(t.label(3), NodeLabel::Radical(1)));
}
