//! Learnable tensors and their canonical traversal order.
//!
//! [`ModelParams::for_each`] fixes one global parameter order. Initialization,
//! the optimizer, gradient extraction, and checkpoints all walk parameters
//! through it, so tensor identity is positional everywhere.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Real;
use crate::rng::substream;

use super::{ModelConfig, ModelError};

/// Standard deviation of the truncated normal used for every weight matrix.
pub const WEIGHT_STD: f64 = 0.02;

/// One encoder layer. Weight matrices are `[in, out]`, applied as `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_shift: Array1<T>,
    pub ffn_w1: Array2<T>,
    pub ffn_b1: Array1<T>,
    pub ffn_w2: Array2<T>,
    pub ffn_b2: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_shift: Array1<T>,
}

/// Every learnable tensor, plus the config the shapes were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `[d_model, input_channels, patch_kernel]`.
    pub patch_kernel: Array3<T>,
    pub patch_bias: Array1<T>,
    pub class_token: Array1<T>,
    /// `[n_tokens, d_model]`, learned.
    pub pos_embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w1: Array2<T>,
    pub head_b1: Array1<T>,
    pub head_w2: Array2<T>,
    pub head_b2: Array1<T>,
    pub stage_w1: Array2<T>,
    pub stage_b1: Array1<T>,
    pub stage_w2: Array2<T>,
    pub stage_b2: Array1<T>,
    pub apnea_w1: Array2<T>,
    pub apnea_b1: Array1<T>,
    pub apnea_w2: Array2<T>,
    pub apnea_b2: Array1<T>,
}

/// One body shared by the `&` and `&mut` visitors so the order cannot drift.
/// The bool is the weight-decay flag: true only for weight matrices.
macro_rules! visit_fields {
    ($self:ident, $f:ident, $view:ident, $iter:ident) => {
        $f("patch.kernel", true, $self.patch_kernel.$view().into_dyn());
        $f("patch.bias", false, $self.patch_bias.$view().into_dyn());
        $f("class_token", false, $self.class_token.$view().into_dyn());
        $f("pos_embed", false, $self.pos_embed.$view().into_dyn());
        for (i, layer) in $self.layers.$iter().enumerate() {
            $f(&format!("layer{i}.attn.w_q"), true, layer.w_q.$view().into_dyn());
            $f(&format!("layer{i}.attn.b_q"), false, layer.b_q.$view().into_dyn());
            $f(&format!("layer{i}.attn.w_k"), true, layer.w_k.$view().into_dyn());
            $f(&format!("layer{i}.attn.b_k"), false, layer.b_k.$view().into_dyn());
            $f(&format!("layer{i}.attn.w_v"), true, layer.w_v.$view().into_dyn());
            $f(&format!("layer{i}.attn.b_v"), false, layer.b_v.$view().into_dyn());
            $f(&format!("layer{i}.attn.w_o"), true, layer.w_o.$view().into_dyn());
            $f(&format!("layer{i}.attn.b_o"), false, layer.b_o.$view().into_dyn());
            $f(&format!("layer{i}.ln1.gain"), false, layer.ln1_gain.$view().into_dyn());
            $f(&format!("layer{i}.ln1.shift"), false, layer.ln1_shift.$view().into_dyn());
            $f(&format!("layer{i}.ffn.w1"), true, layer.ffn_w1.$view().into_dyn());
            $f(&format!("layer{i}.ffn.b1"), false, layer.ffn_b1.$view().into_dyn());
            $f(&format!("layer{i}.ffn.w2"), true, layer.ffn_w2.$view().into_dyn());
            $f(&format!("layer{i}.ffn.b2"), false, layer.ffn_b2.$view().into_dyn());
            $f(&format!("layer{i}.ln2.gain"), false, layer.ln2_gain.$view().into_dyn());
            $f(&format!("layer{i}.ln2.shift"), false, layer.ln2_shift.$view().into_dyn());
        }
        $f("head.w1", true, $self.head_w1.$view().into_dyn());
        $f("head.b1", false, $self.head_b1.$view().into_dyn());
        $f("head.w2", true, $self.head_w2.$view().into_dyn());
        $f("head.b2", false, $self.head_b2.$view().into_dyn());
        $f("stage.w1", true, $self.stage_w1.$view().into_dyn());
        $f("stage.b1", false, $self.stage_b1.$view().into_dyn());
        $f("stage.w2", true, $self.stage_w2.$view().into_dyn());
        $f("stage.b2", false, $self.stage_b2.$view().into_dyn());
        $f("apnea.w1", true, $self.apnea_w1.$view().into_dyn());
        $f("apnea.b1", false, $self.apnea_b1.$view().into_dyn());
        $f("apnea.w2", true, $self.apnea_w2.$view().into_dyn());
        $f("apnea.b2", false, $self.apnea_b2.$view().into_dyn());
    };
}

impl<T: Real> ModelParams<T> {
    /// All-zero tensors shaped for `config`. Also the shape template for
    /// optimizer state and checkpoint loading.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerParams {
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln1_gain: Array1::zeros(d),
            ln1_shift: Array1::zeros(d),
            ffn_w1: Array2::zeros((d, config.mlp_hidden)),
            ffn_b1: Array1::zeros(config.mlp_hidden),
            ffn_w2: Array2::zeros((config.mlp_hidden, d)),
            ffn_b2: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_shift: Array1::zeros(d),
        };
        ModelParams {
            config: config.clone(),
            patch_kernel: Array3::zeros((d, config.input_channels, config.patch_kernel)),
            patch_bias: Array1::zeros(d),
            class_token: Array1::zeros(d),
            pos_embed: Array2::zeros((config.n_tokens(), d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            head_w1: Array2::zeros((d, config.head_hidden)),
            head_b1: Array1::zeros(config.head_hidden),
            head_w2: Array2::zeros((config.head_hidden, config.head_hidden)),
            head_b2: Array1::zeros(config.head_hidden),
            stage_w1: Array2::zeros((config.head_hidden, config.branch_hidden)),
            stage_b1: Array1::zeros(config.branch_hidden),
            stage_w2: Array2::zeros((config.branch_hidden, config.n_stage_classes)),
            stage_b2: Array1::zeros(config.n_stage_classes),
            apnea_w1: Array2::zeros((config.head_hidden, config.branch_hidden)),
            apnea_b1: Array1::zeros(config.branch_hidden),
            apnea_w2: Array2::zeros((config.branch_hidden, config.n_apnea_classes)),
            apnea_b2: Array1::zeros(config.n_apnea_classes),
        }
    }

    /// Visits `(name, decays, tensor)` in canonical order.
    pub fn for_each<'s, F>(&'s self, mut f: F)
    where
        F: FnMut(&str, bool, ArrayViewD<'s, T>),
    {
        visit_fields!(self, f, view, iter);
    }

    /// Mutable twin of [`Self::for_each`], same order.
    pub fn for_each_mut<'s, F>(&'s mut self, mut f: F)
    where
        F: FnMut(&str, bool, ArrayViewMutD<'s, T>),
    {
        visit_fields!(self, f, view_mut, iter_mut);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, v| n += v.len());
        n
    }

    pub fn ensure_finite(&self) -> Result<(), ModelError> {
        let mut bad = None;
        self.for_each(|name, _, v| {
            if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(ModelError::NonFinite(format!("parameter {name}"))),
            None => Ok(()),
        }
    }
}

fn fill_trunc_normal<T: Real, D: ndarray::Dimension, R: Rng>(
    arr: &mut ndarray::Array<T, D>,
    rng: &mut R,
) {
    let dist = Normal::new(0.0, WEIGHT_STD).expect("positive std");
    let bound = 2.0 * WEIGHT_STD;
    for v in arr.iter_mut() {
        let draw = loop {
            let x = dist.sample(rng);
            if x.abs() <= bound {
                break x;
            }
        };
        *v = T::from_f64(draw);
    }
}

/// Fresh parameters: weight matrices from a truncated normal (resampled past
/// two standard deviations), norm gains at one, everything else zero.
/// Deterministic in `seed`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = substream(seed, "model.init");
    let mut p = ModelParams::zeros(config);
    fill_trunc_normal(&mut p.patch_kernel, &mut rng);
    for layer in &mut p.layers {
        fill_trunc_normal(&mut layer.w_q, &mut rng);
        fill_trunc_normal(&mut layer.w_k, &mut rng);
        fill_trunc_normal(&mut layer.w_v, &mut rng);
        fill_trunc_normal(&mut layer.w_o, &mut rng);
        fill_trunc_normal(&mut layer.ffn_w1, &mut rng);
        fill_trunc_normal(&mut layer.ffn_w2, &mut rng);
        layer.ln1_gain.fill(T::one());
        layer.ln2_gain.fill(T::one());
    }
    fill_trunc_normal(&mut p.head_w1, &mut rng);
    fill_trunc_normal(&mut p.head_w2, &mut rng);
    fill_trunc_normal(&mut p.stage_w1, &mut rng);
    fill_trunc_normal(&mut p.stage_w2, &mut rng);
    fill_trunc_normal(&mut p.apnea_w1, &mut rng);
    fill_trunc_normal(&mut p.apnea_w2, &mut rng);
    Ok(p)
}
