#![allow(dead_code)]

use ftclip::ids::{Azimuth, FormationTree, FormationType, IdsToken, NodeLabel};
use ftclip::model::{Model, ModelConfig, EncoderOptions};
use ftclip::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random IDS over all twelve operators. Operators are chosen with
/// probability `p_op` while the depth allows.
pub fn random_ids<R: Rng>(rng: &mut R, max_depth: usize, radicals: u32, p_op: f64) -> Vec<IdsToken> {
    let mut out = Vec::new();
    fn go<R: Rng>(rng: &mut R, depth: usize, radicals: u32, p_op: f64, out: &mut Vec<IdsToken>) {
        if depth > 0 && rng.random_bool(p_op) {
            let f = FormationType::ALL[rng.random_range(0..12)];
            out.push(IdsToken::Operator(f));
            for _ in 0..f.arity() {
                go(rng, depth - 1, radicals, p_op, out);
            }
        } else {
            out.push(IdsToken::Radical(rng.random_range(0..radicals)));
        }
    }
    go(rng, max_depth, radicals, p_op, &mut out);
    out
}

/// Random tree with at most `max_nodes` nodes, rooted at an operator when
/// `operator_root`.
pub fn random_tree<R: Rng>(rng: &mut R, max_nodes: usize, radicals: u32, operator_root: bool) -> FormationTree {
    loop {
        let p = if operator_root { 0.6 } else { 0.5 };
        let tokens = random_ids(rng, 3, radicals, p);
        if tokens.len() > max_nodes || (operator_root && tokens.len() == 1) {
            continue;
        }
        return ftclip::parse(&tokens).expect("generated IDS is valid");
    }
}

/// Copy of `tree` with each node's `masked` flag replaced.
pub fn with_mask(tree: &FormationTree, masked: Vec<bool>) -> FormationTree {
    FormationTree::from_raw_parts(
        tree.nodes().to_vec(),
        tree.parents().to_vec(),
        tree.azimuths().to_vec(),
        masked,
    )
    .unwrap()
}

/// `tree` without the nodes in `drop` (which must be leaves), and the map from
/// old to new indices.
pub fn delete_nodes(tree: &FormationTree, drop: &[usize]) -> (FormationTree, Vec<Option<usize>>) {
    let mut map = vec![None; tree.len()];
    let mut nodes = Vec::new();
    let mut parents = Vec::new();
    let mut azimuths = Vec::new();
    for i in 0..tree.len() {
        if drop.contains(&i) {
            continue;
        }
        map[i] = Some(nodes.len());
        nodes.push(tree.label(i));
        parents.push(tree.parent(i).map(|p| map[p].expect("parent kept")));
        azimuths.push(tree.azimuth(i));
    }
    let n = nodes.len();
    let t = FormationTree::from_raw_parts(nodes, parents, azimuths, vec![false; n]).unwrap();
    (t, map)
}

/// Same tree stored with every node's children visited in a random order.
pub fn shuffle_siblings<R: Rng>(tree: &FormationTree, rng: &mut R) -> FormationTree {
    use rand::seq::SliceRandom;
    let mut order = Vec::with_capacity(tree.len());
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        order.push(i);
        let mut kids = tree.children(i);
        kids.shuffle(rng);
        stack.extend(kids.into_iter().rev());
    }
    let mut new_index = vec![0; tree.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let nodes: Vec<NodeLabel> = order.iter().map(|&o| tree.label(o)).collect();
    let parents = order
        .iter()
        .map(|&o| tree.parent(o).map(|p| new_index[p]))
        .collect();
    let azimuths: Vec<Azimuth> = order.iter().map(|&o| tree.azimuth(o)).collect();
    let masked = order.iter().map(|&o| tree.is_masked(o)).collect();
    FormationTree::from_raw_parts(nodes, parents, azimuths, masked).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 2,
        heads: 2,
        d_embed: 6,
        ..ModelConfig::default()
    }
}

/// Model whose parameters are redrawn from N(0, std²) so that every layer is
/// well inside its nonlinear regime.
pub fn scrambled_model<T: Scalar>(config: ModelConfig, options: EncoderOptions, radicals: usize, seed: u64, std: f64) -> Model<T> {
    let mut m = Model::<T>::init(config, options, radicals).unwrap();
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (name, t) in m.params.iter_mut() {
        if name == "logit_scale" {
            continue;
        }
        for v in t.data_mut() {
            *v += T::lit(normal.sample(&mut r));
        }
    }
    m
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn max_rel_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.norm().to_f64().unwrap().max(1e-30)
}
