mod common;

use std::collections::HashSet;

use ftclip::checkpoint::{self, CheckpointError};
use ftclip::experiments::{evaluate_split, train_model};
use ftclip::model::{image, EncoderOptions, Model, ModelConfig};
use ftclip::recognizer::{build_gallery, evaluate, recognize, RecognizeError};
use ftclip::synth::{compose_layers, layout, radical_stamps, Rect, CANVAS};
use ftclip::tensor::Tensor;
use ftclip::train::{train_step, Adam, Pair, TrainError, MAX_LOGIT_SCALE};
use ftclip::{
    make_splits, parse_str, FormationType, GlyphDataset, RadicalVocab, Split, SplitProtocol,
    SynthParams,
};

use common::{delete_nodes, rng, scrambled_model, tiny_config};

fn toy_dataset(seed: u64) -> GlyphDataset {
    make_splits(&SynthParams {
        radicals: 10,
        chars: 24,
        renders: 3,
        seed,
        protocol: SplitProtocol::CharZeroShot(16),
    })
    .unwrap()
}

fn toy_batch(ds: &GlyphDataset, n: usize) -> (Vec<ftclip::FormationTree>, Vec<Tensor<f32>>) {
    let trees = ds.characters[..n]
        .iter()
        .map(|c| c.tree(&ds.vocab).unwrap())
        .collect();
    let patches = ds.characters[..n]
        .iter()
        .map(|c| {
            let s = ds.samples.iter().find(|s| s.char_id == c.char_id).unwrap();
            image::patchify(&s.image, 8).unwrap()
        })
        .collect();
    (trees, patches)
}

fn pairs<'a>(trees: &'a [ftclip::FormationTree], patches: &'a [Tensor<f32>]) -> Vec<Pair<'a>> {
    trees
        .iter()
        .zip(patches)
        .map(|(tree, patches)| Pair { tree, patches })
        .collect()
}

fn small_model(radicals: usize) -> Model<f32> {
    Model::init(
        ModelConfig {
            d: 16,
            layers: 2,
            heads: 2,
            d_embed: 16,
            batch: 8,
            epochs: 2,
            ..ModelConfig::default()
        },
        EncoderOptions::default(),
        radicals,
    )
    .unwrap()
}

#[test]
fn loss_descends_on_a_fixed_batch() {
    let ds = toy_dataset(1);
    let (trees, patches) = toy_batch(&ds, 8);
    let batch = pairs(&trees, &patches);
    let mut m = small_model(10);
    let mut opt = Adam::default();
    let mut r = rng(2);
    let first = train_step(&mut m, &mut opt, &batch, &mut r, 3e-4).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut m, &mut opt, &batch, &mut r, 3e-4).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = toy_dataset(1);
    let (trees, patches) = toy_batch(&ds, 4);
    let mut m = small_model(10);
    let before = m.clone();
    let mut opt = Adam::default();
    for _ in 0..3 {
        train_step(&mut m, &mut opt, &pairs(&trees, &patches), &mut rng(3), 0.0).unwrap();
    }
    for (name, t) in before.params.iter() {
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = m.params.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn degenerate_batch_and_logit_clamp() {
    let ds = toy_dataset(1);
    let (trees, patches) = toy_batch(&ds, 4);
    let mut m = small_model(10);
    let mut opt = Adam::default();
    let one = pairs(&trees[..1], &patches[..1]);
    assert_eq!(
        train_step(&mut m, &mut opt, &one, &mut rng(0), 1e-3),
        Err(TrainError::DegenerateBatch(1))
    );
    m.params.get_mut("logit_scale").unwrap().data_mut()[0] = 9.0;
    train_step(&mut m, &mut opt, &pairs(&trees, &patches), &mut rng(0), 1e-3).unwrap();
    assert!(m.params.get("logit_scale").unwrap().item() <= MAX_LOGIT_SCALE as f32);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = toy_dataset(4);
    let run = || {
        let (m, log) = train_model(&ds, &small_model(10).config, EncoderOptions::default(), Some(6), |_| {}).unwrap();
        (m, log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
}

#[test]
fn checkpoint_file_roundtrip_preserves_evaluation() {
    let ds = toy_dataset(5);
    let (m, _) = train_model(&ds, &small_model(10).config, EncoderOptions::default(), Some(4), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ftcp");
    checkpoint::save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
    let a = evaluate_split(&m, &ds, Split::Test).unwrap();
    let b = evaluate_split(&back, &ds, Split::Test).unwrap();
    assert!(a.same_outcome(&b));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        checkpoint::load_checkpoint::<f32>(&path),
        Err(CheckpointError::CorruptHeader(_))
    ));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(checkpoint::load_checkpoint::<f32>(&path), Err(CheckpointError::BadMagic)));
    assert!(matches!(
        checkpoint::load_checkpoint::<f32>(&dir.path().join("missing")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn gallery_masking_and_rows() {
    let vocab = RadicalVocab::numbered(8);
    let m = scrambled_model::<f32>(tiny_config(), EncoderOptions::default(), 8, 6, 0.3);
    let cands = [(0, "⿰ r0 r1"), (1, "⿱ r2 ⿰ r3 r7"), (2, "⿰ r0 r1")];
    let all: HashSet<u32> = (0..8).collect();
    let plain = build_gallery(&cands, &vocab, &m, None).unwrap();
    let masked_all_known = build_gallery(&cands, &vocab, &m, Some(&all)).unwrap();
    assert_eq!(plain.embeddings, masked_all_known.embeddings);
    assert_eq!(plain.embeddings.row(0), plain.embeddings.row(2));
    for i in 0..3 {
        let n: f32 = plain.embeddings.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    let known: HashSet<u32> = (0..7).collect();
    let g = build_gallery(&cands, &vocab, &m, Some(&known)).unwrap();
    assert_eq!(g.len(), 3);
    let (pruned, _) = delete_nodes(&parse_str("⿱ r2 ⿰ r3 r7").unwrap(), &[4]);
    let direct = m.encode_trees(&[&pruned]).unwrap();
    for (a, b) in g.embeddings.row(1).iter().zip(direct.row(0)) {
        assert!((a - b).abs() < 1e-6);
    }

    assert!(matches!(
        build_gallery(&[(9, "⿰ r0")], &vocab, &m, None),
        Err(RecognizeError::ParseFailure { char_id: 9, .. })
    ));
    assert!(matches!(
        build_gallery(&[(4, "r7")], &vocab, &m, Some(&known)),
        Err(RecognizeError::AllMasked(4))
    ));
    assert!(matches!(
        build_gallery::<f32>(&[], &vocab, &m, None),
        Err(RecognizeError::EmptyGallery)
    ));
}

#[test]
fn recognition_rules() {
    let ds = toy_dataset(7);
    let m = scrambled_model::<f32>(tiny_config(), EncoderOptions::default(), 10, 8, 0.3);
    let img = &ds.samples[0].image;
    let one = build_gallery(&[(5, ds.characters[5].ids.as_str())], &ds.vocab, &m, None).unwrap();
    let (id, score) = recognize(img, &one, &m).unwrap();
    assert_eq!(id, 5);
    let e = m.encode_images(&[img]).unwrap();
    let cos: f32 = e.row(0).iter().zip(one.embeddings.row(0)).map(|(a, b)| a * b).sum();
    assert!((score - cos).abs() < 1e-6);

    let cands: Vec<(u32, &str)> = ds.characters.iter().map(|c| (c.char_id, c.ids.as_str())).collect();
    let g = build_gallery(&cands, &ds.vocab, &m, None).unwrap();
    let best = g.best_match(e.row(0)).unwrap().0;
    let scaled: Vec<f32> = e.row(0).iter().map(|v| v * 7.5).collect();
    assert_eq!(g.best_match(&scaled).unwrap().0, best);

    let dup = [(3, "⿰ r0 r1"), (1, "⿰ r0 r1")];
    let g2 = build_gallery(&dup, &ds.vocab, &m, None).unwrap();
    assert_eq!(recognize(img, &g2, &m).unwrap().0, 3);
}

#[test]
fn evaluation_is_repeatable_and_checks_labels() {
    let ds = toy_dataset(9);
    let m = scrambled_model::<f32>(tiny_config(), EncoderOptions::default(), 10, 10, 0.3);
    let a = evaluate_split(&m, &ds, Split::Test).unwrap();
    let b = evaluate_split(&m, &ds, Split::Test).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(a.total, 8 * 3);
    assert_eq!(a.accuracy, a.correct as f64 / a.total as f64);
    assert_eq!(a.per_character.values().map(|c| c.total).sum::<usize>(), a.total);

    let cands: Vec<(u32, &str)> = ds.characters_in(Split::Test).map(|c| (c.char_id, c.ids.as_str())).collect();
    let g = build_gallery(&cands, &ds.vocab, &m, None).unwrap();
    let train_sample = ds.samples_in(Split::Train)[0];
    assert_eq!(
        evaluate(&[(train_sample.char_id, &train_sample.image)], &g, &m),
        Err(RecognizeError::LabelNotInGallery(train_sample.char_id))
    );
}

#[test]
fn untrained_model_is_near_chance() {
    let ds = make_splits(&SynthParams {
        radicals: 20,
        chars: 130,
        renders: 5,
        seed: 11,
        protocol: SplitProtocol::CharZeroShot(30),
    })
    .unwrap();
    let m = Model::<f32>::init(
        ModelConfig {
            d: 32,
            layers: 2,
            heads: 2,
            d_embed: 32,
            ..ModelConfig::default()
        },
        EncoderOptions::default(),
        20,
    )
    .unwrap();
    let r = evaluate_split(&m, &ds, Split::Test).unwrap();
    assert_eq!(r.gallery_size, 100);
    assert_eq!(r.total, 500);
    // 99% binomial interval of Bin(500, 0.01) is [0, 11] hits
    assert!(r.correct <= 11, "{} correct", r.correct);
}

#[test]
fn leaf_ink_stays_inside_its_rectangle() {
    let params = SynthParams::default();
    let ds = make_splits(&params).unwrap();
    let stamps = radical_stamps(params.radicals, params.seed);
    for c in &ds.characters {
        let tree = c.tree(&ds.vocab).unwrap();
        for layer in compose_layers(&tree, &stamps, CANVAS).unwrap() {
            if let Some((x0, y0, x1, y1)) = layer.image.ink_bbox() {
                let r = layer.rect;
                assert!(r.contains(x0, y0) && r.contains(x1, y1), "{} leaf {}", c.ids, layer.node);
            }
        }
    }
}

#[test]
fn layout_bands() {
    let full = Rect::new(0, 0, 32, 32);
    let stamps = radical_stamps(3, 2);
    let layers = compose_layers(&parse_str("⿳ r0 r1 r2").unwrap(), &stamps, 32).unwrap();
    let bands = [(0, 10), (11, 20), (21, 31)];
    for (layer, (lo, hi)) in layers.iter().zip(bands) {
        let (_, y0, _, y1) = layer.image.ink_bbox().unwrap();
        assert!(y0 >= lo && y1 <= hi);
    }
    for f in FormationType::ALL {
        let rects = layout(f, full);
        assert_eq!(rects.len(), f.arity());
        for r in rects {
            assert!(r.x + r.w <= 32 && r.y + r.h <= 32 && r.w > 0 && r.h > 0);
        }
    }
}

#[test]
fn dataset_roundtrip_and_determinism() {
    let params = SynthParams {
        radicals: 12,
        chars: 30,
        renders: 2,
        seed: 7,
        protocol: SplitProtocol::CharZeroShot(20),
    };
    let ds = make_splits(&params).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ds.write(a.path()).unwrap();
    make_splits(&params).unwrap().write(b.path()).unwrap();
    assert_eq!(GlyphDataset::read(a.path()).unwrap(), ds);
    let listing = |d: &std::path::Path| {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in ["", "images"] {
            for e in std::fs::read_dir(d.join(sub)).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    files.push((p.strip_prefix(d).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    assert_eq!(listing(a.path()), listing(b.path()));
}

#[test]
fn split_protocols() {
    let ds = make_splits(&SynthParams {
        radicals: 20,
        chars: 120,
        renders: 1,
        seed: 3,
        protocol: SplitProtocol::CharZeroShot(90),
    })
    .unwrap();
    let train: HashSet<u32> = ds.characters_in(Split::Train).map(|c| c.char_id).collect();
    let test: HashSet<u32> = ds.characters_in(Split::Test).map(|c| c.char_id).collect();
    assert!(train.is_disjoint(&test));
    assert_eq!((train.len(), test.len()), (90, 30));
    let ids: HashSet<&str> = ds.characters.iter().map(|c| c.ids.as_str()).collect();
    assert_eq!(ids.len(), 120);

    let n = 6;
    let ds = make_splits(&SynthParams {
        radicals: 20,
        chars: 120,
        renders: 1,
        seed: 3,
        protocol: SplitProtocol::RadicalZeroShot(n),
    })
    .unwrap();
    let mut count = std::collections::HashMap::new();
    for c in &ds.characters {
        for r in c.tree(&ds.vocab).unwrap().radicals() {
            *count.entry(r).or_insert(0usize) += 1;
        }
    }
    for c in &ds.characters {
        let rare = c.tree(&ds.vocab).unwrap().radicals().any(|r| count[&r] < n);
        assert_eq!(rare, c.split == Split::Test, "{}", c.ids);
    }
    assert!(matches!(
        make_splits(&SynthParams {
            radicals: 1,
            ..SynthParams::default()
        }),
        Err(ftclip::SynthError::InsufficientVocabulary(_))
    ));
}
