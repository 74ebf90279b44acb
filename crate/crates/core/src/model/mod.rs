//! Model configuration, parameter storage and the two encoders.

mod config;
pub mod image;
pub mod layers;
pub mod tree;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::glyph::GlyphImage;
use crate::ids::FormationTree;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub use config::{EncoderOptions, ModelConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {0} is outside the node embedding table")]
    UnknownLabel(String),
    #[error("no trees to encode")]
    EmptyTree,
    #[error("every node of the tree is masked")]
    AllMasked,
    #[error("sequence of {len} tokens exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("image {width}x{height} is not divisible into {patch}px patches")]
    IndivisibleImage {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone())?);
        }
        Ok(Bound { vars })
    }
}

/// Parameter name to tape variable.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

const INIT_STD: f64 = 0.02;

/// Full model: both encoders plus the learnable logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub options: EncoderOptions,
    /// Size of the radical vocabulary the node table was built for.
    pub radicals: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn deterministically from `config.seed`.
    pub fn init(config: ModelConfig, options: EncoderOptions, radicals: usize) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, rows, cols, init) in param_layout(&config, &options, radicals) {
            let data = (0..rows * cols)
                .map(|_| {
                    let v = match init {
                        Init::Normal => loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * INIT_STD {
                                break v;
                            }
                        },
                        Init::Zeros => 0.0,
                        Init::Ones => 1.0,
                        Init::Const(c) => c,
                    };
                    T::lit(v)
                })
                .collect();
            params.insert(name, Tensor::matrix(rows, cols, data)?);
        }
        Ok(Self {
            config,
            options,
            radicals,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            options: self.options,
            radicals: self.radicals,
            params: self.params.cast(),
        }
    }

    /// Checks that the parameter set matches the layout implied by the
    /// configuration.
    pub fn validate_layout(&self) -> Result<()> {
        let layout = param_layout(&self.config, &self.options, self.radicals);
        if layout.len() != self.params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for (name, rows, cols, _) in layout {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.dims() != (rows, cols) {
                return Err(ModelError::InvalidConfig(format!(
                    "`{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Unit-norm embeddings of `trees`, one row each.
    pub fn encode_trees(&self, trees: &[&FormationTree]) -> Result<Tensor<T>> {
        let batch = tree::TreeBatch::new(trees, &self.options, self.radicals)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let out = tree::encode(&mut tape, &bound, &self.config, &self.options, &batch)?;
        Ok(tape.value(out).clone())
    }

    /// Unit-norm embeddings of whole (unmasked) images, one row each.
    pub fn encode_images(&self, images: &[&GlyphImage]) -> Result<Tensor<T>> {
        let patches = images
            .iter()
            .map(|img| image::patchify(img, self.config.patch_px))
            .collect::<Result<Vec<_>>>()?;
        let kept: Vec<Vec<usize>> = patches.iter().map(|p| (0..p.rows()).collect()).collect();
        let refs: Vec<&Tensor<T>> = patches.iter().collect();
        self.encode_patches(&refs, &kept)
    }

    /// Image embeddings from pre-patchified inputs and kept patch indices.
    pub fn encode_patches(&self, patches: &[&Tensor<T>], kept: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let batch = image::ImageBatch::new(patches, kept)?;
        let out = image::encode(&mut tape, &bound, &self.config, &batch)?;
        Ok(tape.value(out).clone())
    }
}

/// Name, rows, cols and initializer of every parameter.
fn param_layout(
    config: &ModelConfig,
    options: &EncoderOptions,
    radicals: usize,
) -> Vec<(String, usize, usize, Init)> {
    let d = config.d;
    let mut out = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, init: Init| {
        out.push((name, rows, cols, init));
    };

    push("tree.node_embed".into(), radicals + 12, d, Init::Normal);
    push(
        "tree.azimuth_embed".into(),
        crate::ids::Azimuth::COUNT,
        d,
        Init::Normal,
    );
    if !options.sequential {
        push(
            "tree.azimuth_bias".into(),
            config.heads,
            crate::ids::Azimuth::COUNT,
            Init::Zeros,
        );
    }
    if options.sequential {
        push("tree.pos_embed".into(), tree::MAX_SEQUENCE, d, Init::Normal);
    }
    if options.sequential || options.special_node {
        push("tree.special".into(), 1, d, Init::Normal);
    }
    for prefix in ["tree", "image"] {
        for l in 0..config.layers {
            let p = format!("{prefix}.layers.{l}");
            push(format!("{p}.ln1.gamma"), 1, d, Init::Ones);
            push(format!("{p}.ln1.beta"), 1, d, Init::Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{w}"), d, d, Init::Normal);
            }
            push(format!("{p}.attn.bo"), 1, d, Init::Zeros);
            push(format!("{p}.ln2.gamma"), 1, d, Init::Ones);
            push(format!("{p}.ln2.beta"), 1, d, Init::Zeros);
            push(format!("{p}.mlp.w1"), d, 4 * d, Init::Normal);
            push(format!("{p}.mlp.b1"), 1, 4 * d, Init::Zeros);
            push(format!("{p}.mlp.w2"), 4 * d, d, Init::Normal);
            push(format!("{p}.mlp.b2"), 1, d, Init::Zeros);
        }
        push(format!("{prefix}.ln_f.gamma"), 1, d, Init::Ones);
        push(format!("{prefix}.ln_f.beta"), 1, d, Init::Zeros);
        push(format!("{prefix}.proj.w"), d, config.d_embed, Init::Normal);
        push(format!("{prefix}.proj.b"), 1, config.d_embed, Init::Zeros);
    }
    let patch_dim = config.patch_px * config.patch_px;
    let patches = (config.image_size / config.patch_px).pow(2);
    push("image.patch.w".into(), patch_dim, d, Init::Normal);
    push("image.patch.b".into(), 1, d, Init::Zeros);
    push("image.pos_embed".into(), patches, d, Init::Normal);
    push("image.cls".into(), 1, d, Init::Normal);
    push(
        "logit_scale".into(),
        1,
        1,
        Init::Const(config.temperature_init),
    );
    out
}
