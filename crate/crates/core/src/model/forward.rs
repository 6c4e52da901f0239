//! Tape assembly for the full network.
//!
//! One call builds the whole computation on a [`GradTape`]: patch embedding,
//! class token, positional table, encoder stack, shared head, and both task
//! branches. Training wraps the returned node handles in a loss; evaluation
//! just reads the probability values back off the tape.

use ndarray::{Array2, Array3, Array4, Axis, Ix2, Ix3};
use rand_chacha::ChaCha12Rng;

use crate::numerics::dropout::{stochastic_depth_gate, DepthGate};
use crate::numerics::tape::{GradTape, NodeId};
use crate::numerics::{dropout_mask, Mode, Real};

use super::{ModelConfig, ModelError, ModelParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention maps for one example, `[n_layers, n_heads, tokens, tokens]`,
/// captured after the softmax and before attention dropout. Every row is a
/// probability distribution.
#[derive(Debug, Clone)]
pub struct AttentionBundle {
    pub attention: Array4<f64>,
}

/// Node handles into a tape holding one forward pass.
pub struct ForwardGraph {
    /// `(name, leaf)` pairs in [`ModelParams::for_each`] order.
    pub params: Vec<(String, NodeId)>,
    /// `[batch, n_stage_classes]`, rows on the simplex.
    pub stage_probs: NodeId,
    /// `[batch, n_apnea_classes]`, rows on the simplex.
    pub apnea_probs: NodeId,
    /// One node per encoder layer; value shape `[batch·n_heads, tokens, tokens]`.
    pub attention: Vec<NodeId>,
}

/// Forward values pulled off a finished tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub stage_probs: Array2<T>,
    pub apnea_probs: Array2<T>,
    /// One bundle per example in batch order.
    pub attention: Vec<AttentionBundle>,
}

struct LayerNodes {
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    ln1_gain: NodeId,
    ln1_shift: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln2_gain: NodeId,
    ln2_shift: NodeId,
}

fn apply_dropout<T: Real>(
    tape: &mut GradTape<T>,
    x: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut Option<&mut ChaCha12Rng>,
) -> Result<NodeId, ModelError> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let r = rng.as_deref_mut().expect("train mode carries an rng");
    let shape = tape.value(x).shape().to_vec();
    let mask = dropout_mask::<T, _>(&shape, rate, Mode::Train, r)?;
    Ok(tape.mul_mask(x, mask))
}

/// Residual add with a stochastic depth gate on the branch. A dropped branch
/// leaves the trunk untouched; a kept one is scaled to preserve expectation.
fn gated_residual<T: Real>(
    tape: &mut GradTape<T>,
    trunk: NodeId,
    branch: NodeId,
    survival: f64,
    mode: Mode,
    rng: &mut Option<&mut ChaCha12Rng>,
) -> Result<NodeId, ModelError> {
    let gate: DepthGate<T> = match mode {
        Mode::Eval => DepthGate { keep: true, scale: T::one() },
        Mode::Train => {
            let r = rng.as_deref_mut().expect("train mode carries an rng");
            stochastic_depth_gate(survival, Mode::Train, r)?
        }
    };
    if !gate.keep {
        return Ok(trunk);
    }
    let scaled = if gate.scale == T::one() { branch } else { tape.scale(branch, gate.scale) };
    Ok(tape.add(trunk, scaled))
}

/// `[rows, d_model] -> [batch·n_heads, tokens, head_dim]`.
fn split_heads<T: Real>(
    tape: &mut GradTape<T>,
    x: NodeId,
    b: usize,
    t: usize,
    h: usize,
    dh: usize,
) -> NodeId {
    let x = tape.reshape(x, &[b, t, h, dh]);
    let x = tape.permute(x, &[0, 2, 1, 3]);
    tape.reshape(x, &[b * h, t, dh])
}

/// Inverse of [`split_heads`].
fn merge_heads<T: Real>(
    tape: &mut GradTape<T>,
    x: NodeId,
    b: usize,
    t: usize,
    h: usize,
    dh: usize,
) -> NodeId {
    let x = tape.reshape(x, &[b, h, t, dh]);
    let x = tape.permute(x, &[0, 2, 1, 3]);
    tape.reshape(x, &[b * t, h * dh])
}

fn linear<T: Real>(tape: &mut GradTape<T>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

/// Records the whole forward pass on `tape`.
///
/// Train mode draws dropout masks and depth gates from `rng` and requires it;
/// eval mode never touches it. Branches dropped by a depth gate are still
/// computed so the attention capture always covers every layer.
pub fn build_forward<T: Real>(
    tape: &mut GradTape<T>,
    params: &ModelParams<T>,
    batch: &Array3<T>,
    mode: Mode,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<ForwardGraph, ModelError> {
    let cfg = &params.config;
    cfg.validate()?;
    let (bsz, c, l) = batch.dim();
    if bsz == 0 || c != cfg.input_channels || l != cfg.input_length {
        return Err(ModelError::ShapeMismatch(format!(
            "batch [{bsz}, {c}, {l}], expected [>0, {}, {}]",
            cfg.input_channels, cfg.input_length
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("input batch".into()));
    }
    if params.layers.len() != cfg.n_layers
        || params.class_token.len() != cfg.d_model
        || params.pos_embed.dim() != (cfg.n_tokens(), cfg.d_model)
    {
        return Err(ModelError::ShapeMismatch(
            "parameter tensors disagree with their config".into(),
        ));
    }
    if mode == Mode::Train && rng.is_none() {
        return Err(ModelError::InvalidArgument(
            "train-mode forward requires an rng".into(),
        ));
    }

    let t = cfg.n_tokens();
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let eps = T::from_f64(LAYER_NORM_EPS);
    let attn_scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut param_nodes: Vec<(String, NodeId)> = Vec::new();
    macro_rules! leaf {
        ($name:expr, $arr:expr) => {{
            let id = tape.leaf($arr.clone().into_dyn(), true);
            param_nodes.push(($name, id));
            id
        }};
    }

    let patch_k = leaf!("patch.kernel".into(), params.patch_kernel);
    let patch_b = leaf!("patch.bias".into(), params.patch_bias);
    let cls = leaf!("class_token".into(), params.class_token);
    let pos = leaf!("pos_embed".into(), params.pos_embed);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, lp) in params.layers.iter().enumerate() {
        layers.push(LayerNodes {
            w_q: leaf!(format!("layer{i}.attn.w_q"), lp.w_q),
            b_q: leaf!(format!("layer{i}.attn.b_q"), lp.b_q),
            w_k: leaf!(format!("layer{i}.attn.w_k"), lp.w_k),
            b_k: leaf!(format!("layer{i}.attn.b_k"), lp.b_k),
            w_v: leaf!(format!("layer{i}.attn.w_v"), lp.w_v),
            b_v: leaf!(format!("layer{i}.attn.b_v"), lp.b_v),
            w_o: leaf!(format!("layer{i}.attn.w_o"), lp.w_o),
            b_o: leaf!(format!("layer{i}.attn.b_o"), lp.b_o),
            ln1_gain: leaf!(format!("layer{i}.ln1.gain"), lp.ln1_gain),
            ln1_shift: leaf!(format!("layer{i}.ln1.shift"), lp.ln1_shift),
            ffn_w1: leaf!(format!("layer{i}.ffn.w1"), lp.ffn_w1),
            ffn_b1: leaf!(format!("layer{i}.ffn.b1"), lp.ffn_b1),
            ffn_w2: leaf!(format!("layer{i}.ffn.w2"), lp.ffn_w2),
            ffn_b2: leaf!(format!("layer{i}.ffn.b2"), lp.ffn_b2),
            ln2_gain: leaf!(format!("layer{i}.ln2.gain"), lp.ln2_gain),
            ln2_shift: leaf!(format!("layer{i}.ln2.shift"), lp.ln2_shift),
        });
    }
    let head_w1 = leaf!("head.w1".into(), params.head_w1);
    let head_b1 = leaf!("head.b1".into(), params.head_b1);
    let head_w2 = leaf!("head.w2".into(), params.head_w2);
    let head_b2 = leaf!("head.b2".into(), params.head_b2);
    let stage_w1 = leaf!("stage.w1".into(), params.stage_w1);
    let stage_b1 = leaf!("stage.b1".into(), params.stage_b1);
    let stage_w2 = leaf!("stage.w2".into(), params.stage_w2);
    let stage_b2 = leaf!("stage.b2".into(), params.stage_b2);
    let apnea_w1 = leaf!("apnea.w1".into(), params.apnea_w1);
    let apnea_b1 = leaf!("apnea.b1".into(), params.apnea_b1);
    let apnea_w2 = leaf!("apnea.w2".into(), params.apnea_w2);
    let apnea_b2 = leaf!("apnea.b2".into(), params.apnea_b2);

    let input = tape.constant(batch.clone().into_dyn());
    let conv = tape.conv1d(input, patch_k, patch_b, cfg.patch_stride);
    let tokens = tape.permute(conv, &[0, 2, 1]);
    let tokens = tape.prepend_token(tokens, cls);
    let tokens = tape.add_positional(tokens, pos);
    let mut z = apply_dropout(tape, tokens, cfg.dropout_rate, mode, &mut rng)?;

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for ln in &layers {
        let zf = tape.reshape(z, &[bsz * t, d]);
        let q = linear(tape, zf, ln.w_q, ln.b_q);
        let k = linear(tape, zf, ln.w_k, ln.b_k);
        let v = linear(tape, zf, ln.w_v, ln.b_v);
        let qh = split_heads(tape, q, bsz, t, h, dh);
        let kh = split_heads(tape, k, bsz, t, h, dh);
        let vh = split_heads(tape, v, bsz, t, h, dh);
        let scores = tape.batch_matmul(qh, kh, true);
        let scores = tape.scale(scores, attn_scale);
        let probs = tape.softmax_last(scores);
        attention.push(probs);
        let probs = apply_dropout(tape, probs, cfg.dropout_rate, mode, &mut rng)?;
        let ctx = tape.batch_matmul(probs, vh, false);
        let ctx = merge_heads(tape, ctx, bsz, t, h, dh);
        let proj = linear(tape, ctx, ln.w_o, ln.b_o);
        let branch = tape.reshape(proj, &[bsz, t, d]);
        let sum = gated_residual(tape, z, branch, cfg.stochastic_depth_survival, mode, &mut rng)?;
        let z1 = tape.layer_norm(sum, ln.ln1_gain, ln.ln1_shift, eps);

        let zf = tape.reshape(z1, &[bsz * t, d]);
        let hidden = linear(tape, zf, ln.ffn_w1, ln.ffn_b1);
        let hidden = tape.gelu(hidden);
        let hidden = apply_dropout(tape, hidden, cfg.dropout_rate, mode, &mut rng)?;
        let out = linear(tape, hidden, ln.ffn_w2, ln.ffn_b2);
        let branch = tape.reshape(out, &[bsz, t, d]);
        let sum = gated_residual(tape, z1, branch, cfg.stochastic_depth_survival, mode, &mut rng)?;
        z = tape.layer_norm(sum, ln.ln2_gain, ln.ln2_shift, eps);
    }

    let cls_out = tape.take_token(z, 0);
    let hd = linear(tape, cls_out, head_w1, head_b1);
    let hd = tape.gelu(hd);
    let hd = linear(tape, hd, head_w2, head_b2);

    let s = linear(tape, hd, stage_w1, stage_b1);
    let s = tape.relu(s);
    let s = linear(tape, s, stage_w2, stage_b2);
    let stage_probs = tape.softmax_last(s);

    let a = linear(tape, hd, apnea_w1, apnea_b1);
    let a = tape.relu(a);
    let a = linear(tape, a, apnea_w2, apnea_b2);
    let apnea_probs = tape.softmax_last(a);

    Ok(ForwardGraph { params: param_nodes, stage_probs, apnea_probs, attention })
}

/// Copies the per-layer attention values into per-example bundles.
pub fn collect_attention<T: Real>(
    tape: &GradTape<T>,
    graph: &ForwardGraph,
    config: &ModelConfig,
    batch_size: usize,
) -> Vec<AttentionBundle> {
    let (nl, h, t) = (config.n_layers, config.n_heads, config.n_tokens());
    let mut out = vec![Array4::<f64>::zeros((nl, h, t, t)); batch_size];
    for (li, &nid) in graph.attention.iter().enumerate() {
        let v = tape.value(nid).view().into_dimensionality::<Ix3>().expect("attention rank");
        for (bi, bundle) in out.iter_mut().enumerate() {
            for hi in 0..h {
                let src = v.index_axis(Axis(0), bi * h + hi);
                for ((ti, tj), &s) in src.indexed_iter() {
                    bundle[[li, hi, ti, tj]] = s.to_f64();
                }
            }
        }
    }
    out.into_iter().map(|attention| AttentionBundle { attention }).collect()
}

fn matrix_value<T: Real>(tape: &GradTape<T>, id: NodeId) -> Array2<T> {
    tape.value(id).view().into_dimensionality::<Ix2>().expect("matrix node").to_owned()
}

/// Runs the network once and returns probabilities plus attention maps.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: &Array3<T>,
    mode: Mode,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<ForwardOutput<T>, ModelError> {
    let mut tape = GradTape::new();
    let graph = build_forward(&mut tape, params, batch, mode, rng)?;
    let stage_probs = matrix_value(&tape, graph.stage_probs);
    let apnea_probs = matrix_value(&tape, graph.apnea_probs);
    if stage_probs.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("stage probabilities".into()));
    }
    if apnea_probs.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("apnea probabilities".into()));
    }
    let attention = collect_attention(&tape, &graph, &params.config, batch.dim().0);
    Ok(ForwardOutput { stage_probs, apnea_probs, attention })
}
