//! Toy trainers for the embedder and the rotation residual regressor.
//!
//! Backprop through group convolution, ReLU, pooling and the normalizations
//! is written out by hand; the optimizer is Adam with an exponential
//! learning-rate decay. Weight values are snapped to the f32 grid after
//! every step so a trained network round-trips through the weights file
//! bit-identically. Per-sample gradients are evaluated in parallel and
//! reduced in sample order, so results do not depend on thread scheduling.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icosa::{GroupElement, IcosahedralGroup, GROUP_ORDER, NEIGHBORHOOD_SIZE};

use super::loss::{loss_l1_grad, loss_l2_grad, loss_residual_grad};
use super::{
    concat_features, group_conv, mean_rows, snap_to_f32, ConvLayer, Descriptor, GroupFeature,
    LinearLayer, NetworkWeights, RegressorWeights, LAMBDA,
};

/// One training pair: layer-0 group features of a patch and of its rotated
/// (and possibly perturbed) copy, with the ground-truth rotation between
/// them and its group quantization.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub f0_anchor: GroupFeature,
    pub f0_positive: GroupFeature,
    pub g_plus: GroupElement,
    pub rotation: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative decay factor applied every `lr_decay_epochs`.
    pub lr_decay: f64,
    pub lr_decay_epochs: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_decay: 0.5,
            lr_decay_epochs: 1.8,
            lambda: LAMBDA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: NetworkWeights,
    /// Full-dataset loss before training, then after each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RegressorTrainReport {
    pub regressor: RegressorWeights,
    pub epoch_losses: Vec<f64>,
}

// ---------------------------------------------------------------------------
// forward / backward building blocks
// ---------------------------------------------------------------------------

pub(crate) struct EmbedCache {
    /// Input to each conv layer; `inputs[0]` is f0.
    inputs: Vec<GroupFeature>,
    /// Conv outputs before ReLU.
    pre_relu: Vec<GroupFeature>,
    /// Frobenius norm of the post-ReLU stack output.
    norm: f64,
    /// Normalized final feature.
    pub normalized: GroupFeature,
    pooled_norm: f64,
    pub descriptor: Descriptor,
}

pub(crate) fn embed_forward_cached(
    group: &IcosahedralGroup,
    f0: &GroupFeature,
    layers: &[ConvLayer],
) -> Result<EmbedCache> {
    let mut inputs = vec![f0.clone()];
    let mut pre_relu = Vec::with_capacity(layers.len());
    for layer in layers {
        let pre = group_conv(group, layer, inputs.last().unwrap())?;
        pre_relu.push(pre.clone());
        let mut post = pre;
        super::relu_in_place(&mut post);
        inputs.push(post);
    }
    let post = inputs.last().unwrap().clone();
    let norm = post.frobenius_norm();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateDescriptor);
    }
    let mut normalized = post;
    for v in normalized.as_mut_slice() {
        *v /= norm;
    }
    let pooled = mean_rows(&normalized);
    let pooled_norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pooled_norm <= 0.0 || !pooled_norm.is_finite() {
        return Err(Error::DegenerateDescriptor);
    }
    let descriptor = Descriptor {
        values: pooled.iter().map(|v| v / pooled_norm).collect(),
    };
    Ok(EmbedCache {
        inputs,
        pre_relu,
        norm,
        normalized,
        pooled_norm,
        descriptor,
    })
}

/// Per-layer parameter gradients, same layout as the layers themselves.
#[derive(Clone)]
pub(crate) struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros_conv(layer: &ConvLayer) -> Self {
        LayerGrads {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn zeros_linear(layer: &LinearLayer) -> Self {
        LayerGrads {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

fn conv_backward(
    group: &IcosahedralGroup,
    layer: &ConvLayer,
    input: &GroupFeature,
    d_out: &GroupFeature,
    grads: &mut LayerGrads,
) -> GroupFeature {
    let (n_in, n_out) = (layer.n_in, layer.n_out);
    for g in group.elements() {
        let dout_row = d_out.row(g);
        for j in 0..n_out {
            grads.bias[j] += dout_row[j];
        }
        for i in 0..NEIGHBORHOOD_SIZE {
            let in_row = input.row(group.conv_tap(g, i));
            for (j, &coeff) in dout_row.iter().enumerate() {
                if coeff == 0.0 {
                    continue;
                }
                let wg = &mut grads.weights[(j * NEIGHBORHOOD_SIZE + i) * n_in..][..n_in];
                for (w, x) in wg.iter_mut().zip(in_row) {
                    *w += coeff * x;
                }
            }
        }
    }
    let mut d_in = GroupFeature::zeros(n_in, input.layer());
    let taps = group.neighborhood().to_vec();
    for h in group.elements() {
        // Rows of d_in gather from output rows g with h_i · g = h.
        for (i, &tap) in taps.iter().enumerate() {
            let g = group.compose(group.inverse(tap), h);
            let dout_row = d_out.row(g);
            let d_in_row = d_in.row_mut(h);
            for (j, &coeff) in dout_row.iter().enumerate() {
                if coeff == 0.0 {
                    continue;
                }
                let w = &layer.weights[(j * NEIGHBORHOOD_SIZE + i) * n_in..][..n_in];
                for (o, wv) in d_in_row.iter_mut().zip(w) {
                    *o += coeff * wv;
                }
            }
        }
    }
    d_in
}

fn relu_backward(d: &mut GroupFeature, pre: &GroupFeature) {
    for (g, p) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Backward through the embedder given gradients with respect to the
/// normalized feature and the descriptor. Returns per-layer gradients.
pub(crate) fn embed_backward(
    group: &IcosahedralGroup,
    layers: &[ConvLayer],
    cache: &EmbedCache,
    d_normalized: Option<&GroupFeature>,
    d_descriptor: Option<&[f64]>,
    grads: &mut [LayerGrads],
) {
    let channels = cache.normalized.channels();
    let mut d_f = GroupFeature::zeros(channels, cache.normalized.layer());
    if let Some(df) = d_normalized {
        d_f.as_mut_slice().copy_from_slice(df.as_slice());
    }
    if let Some(dd) = d_descriptor {
        // descriptor = pooled / |pooled|
        let d = &cache.descriptor.values;
        let dot: f64 = d.iter().zip(dd).map(|(a, b)| a * b).sum();
        for c in 0..channels {
            let dv = (dd[c] - d[c] * dot) / cache.pooled_norm;
            // pooled is the row mean of the normalized feature
            let per_row = dv / GROUP_ORDER as f64;
            for g in 0..GROUP_ORDER {
                d_f.as_mut_slice()[g * channels + c] += per_row;
            }
        }
    }
    // normalized = post / norm
    let fdot: f64 = cache.normalized.dot(&d_f);
    let mut d_post = GroupFeature::zeros(channels, 0);
    for ((o, df), f) in d_post
        .as_mut_slice()
        .iter_mut()
        .zip(d_f.as_slice())
        .zip(cache.normalized.as_slice())
    {
        *o = (df - f * fdot) / cache.norm;
    }

    let mut d_current = d_post;
    for (k, layer) in layers.iter().enumerate().rev() {
        relu_backward(&mut d_current, &cache.pre_relu[k]);
        d_current = conv_backward(group, layer, &cache.inputs[k], &d_current, &mut grads[k]);
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

fn pack_conv_params(layers: &[ConvLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unpack_conv_params(layers: &mut [ConvLayer], params: &[f64]) {
    let mut at = 0;
    for l in layers {
        let nw = l.weights.len();
        l.weights.copy_from_slice(&params[at..at + nw]);
        at += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&params[at..at + nb]);
        at += nb;
    }
}

fn pack_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.weights);
        out.extend_from_slice(&g.bias);
    }
    out
}

// ---------------------------------------------------------------------------
// embedder training
// ---------------------------------------------------------------------------

/// Full-dataset descriptor loss under the given weights, treating the whole
/// dataset as one batch (each sample's negatives are the positive
/// descriptors of every other sample).
pub(crate) fn eval_embedder_loss(
    group: &IcosahedralGroup,
    pairs: &[TrainPair],
    layers: &[ConvLayer],
    lambda: f64,
) -> Result<f64> {
    let caches: Vec<(EmbedCache, EmbedCache)> = pairs
        .par_iter()
        .map(|pair| {
            let a = embed_forward_cached(group, &pair.f0_anchor, layers)?;
            let b = embed_forward_cached(group, &pair.f0_positive, layers)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let (anchor, positive) = &caches[i];
        let negs: Vec<&[f64]> = caches
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (_, pos))| pos.descriptor.values.as_slice())
            .collect();
        let (l1, _, _, _) =
            loss_l1_grad(&anchor.descriptor.values, &positive.descriptor.values, &negs)?;
        let (l2, _, _) = loss_l2_grad(
            group,
            &positive.normalized,
            &anchor.normalized,
            pair.g_plus,
        );
        total += lambda * l1 + l2;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains the group-convolution embedder on synthetic patch pairs by
/// minimizing `lambda * l1 + l2`. `widths[0]` must equal the layer-0
/// channel count. Deterministic per seed.
pub fn train_embedder(
    group: &IcosahedralGroup,
    pairs: &[TrainPair],
    widths: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if widths.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least one embedder layer".into(),
        ));
    }
    let mut weights = NetworkWeights::embedder_random(widths, cfg.seed);
    let total_params: usize = weights.embedder.iter().map(|l| l.param_count()).sum();
    let mut adam = Adam::new(total_params);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut epoch_losses =
        vec![eval_embedder_loss(group, pairs, &weights.embedder, cfg.lambda)?];

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * cfg
                .lr_decay
                .powf(epoch as f64 / cfg.lr_decay_epochs.max(1e-9));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let layers = &weights.embedder;
            let caches: Vec<(EmbedCache, EmbedCache)> = chunk
                .par_iter()
                .map(|&i| {
                    let a = embed_forward_cached(group, &pairs[i].f0_anchor, layers)?;
                    let b = embed_forward_cached(group, &pairs[i].f0_positive, layers)?;
                    Ok((a, b))
                })
                .collect::<Result<_>>()?;

            // Loss and gradients with respect to descriptors and features.
            let scale = 1.0 / chunk.len() as f64;
            let n_desc = caches[0].0.descriptor.values.len();
            let mut d_anchor_desc = vec![vec![0.0; n_desc]; chunk.len()];
            let mut d_pos_desc = vec![vec![0.0; n_desc]; chunk.len()];
            let mut d_anchor_feat = Vec::with_capacity(chunk.len());
            let mut d_pos_feat = Vec::with_capacity(chunk.len());
            let mut batch_loss = 0.0;

            for (bi, &i) in chunk.iter().enumerate() {
                let (anchor, positive) = &caches[bi];
                let neg_ids: Vec<usize> = (0..chunk.len()).filter(|&j| j != bi).collect();
                let negs: Vec<&[f64]> = neg_ids
                    .iter()
                    .map(|&j| caches[j].1.descriptor.values.as_slice())
                    .collect();
                let (l1, g_d, g_dp, g_negs) = loss_l1_grad(
                    &anchor.descriptor.values,
                    &positive.descriptor.values,
                    &negs,
                )?;
                let (l2, g_f, g_fp) = loss_l2_grad(
                    group,
                    &positive.normalized,
                    &anchor.normalized,
                    pairs[i].g_plus,
                );
                batch_loss += cfg.lambda * l1 + l2;
                for c in 0..n_desc {
                    d_anchor_desc[bi][c] += scale * cfg.lambda * g_d[c];
                    d_pos_desc[bi][c] += scale * cfg.lambda * g_dp[c];
                }
                for (k, &j) in neg_ids.iter().enumerate() {
                    for c in 0..n_desc {
                        d_pos_desc[j][c] += scale * cfg.lambda * g_negs[k][c];
                    }
                }
                let mut g_f = g_f;
                let mut g_fp = g_fp;
                for v in g_f.as_mut_slice() {
                    *v *= scale;
                }
                for v in g_fp.as_mut_slice() {
                    *v *= scale;
                }
                d_pos_feat.push(g_f);
                d_anchor_feat.push(g_fp);
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "loss became {batch_loss} at epoch {epoch}"
                )));
            }

            // Per-branch backward, then reduce in sample order.
            let layers = &weights.embedder;
            let branch_grads: Vec<Vec<LayerGrads>> = (0..chunk.len())
                .into_par_iter()
                .map(|bi| {
                    let mut grads: Vec<LayerGrads> =
                        layers.iter().map(LayerGrads::zeros_conv).collect();
                    embed_backward(
                        group,
                        layers,
                        &caches[bi].0,
                        Some(&d_anchor_feat[bi]),
                        Some(&d_anchor_desc[bi]),
                        &mut grads,
                    );
                    embed_backward(
                        group,
                        layers,
                        &caches[bi].1,
                        Some(&d_pos_feat[bi]),
                        Some(&d_pos_desc[bi]),
                        &mut grads,
                    );
                    grads
                })
                .collect();
            let mut total_grads: Vec<LayerGrads> =
                layers.iter().map(LayerGrads::zeros_conv).collect();
            for branch in &branch_grads {
                for (t, b) in total_grads.iter_mut().zip(branch) {
                    t.add_assign(b);
                }
            }

            let mut params = pack_conv_params(&weights.embedder);
            let grads = pack_grads(&total_grads);
            adam.step(&mut params, &grads, lr);
            snap_to_f32(&mut params);
            unpack_conv_params(&mut weights.embedder, &params);
        }

        let loss = eval_embedder_loss(group, pairs, &weights.embedder, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "epoch {epoch} loss is {loss}"
            )));
        }
        epoch_losses.push(loss);
    }

    Ok(TrainReport {
        weights,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// regressor training
// ---------------------------------------------------------------------------

pub(crate) struct RegCache {
    conv_inputs: Vec<GroupFeature>,
    conv_pre: Vec<GroupFeature>,
    mlp_inputs: Vec<Vec<f64>>,
    mlp_pre: Vec<Vec<f64>>,
    pub q: [f64; 4],
}

pub(crate) fn regressor_forward_cached(
    group: &IcosahedralGroup,
    reg: &RegressorWeights,
    input: &GroupFeature,
) -> Result<RegCache> {
    let mut conv_inputs = vec![input.clone()];
    let mut conv_pre = Vec::with_capacity(reg.convs.len());
    for layer in &reg.convs {
        let pre = group_conv(group, layer, conv_inputs.last().unwrap())?;
        conv_pre.push(pre.clone());
        let mut post = pre;
        super::relu_in_place(&mut post);
        conv_inputs.push(post);
    }
    let pooled = mean_rows(conv_inputs.last().unwrap());

    let mut mlp_inputs = Vec::with_capacity(reg.mlp.len());
    let mut mlp_pre = Vec::with_capacity(reg.mlp.len());
    let mut x = pooled;
    let last = reg.mlp.len() - 1;
    for (k, layer) in reg.mlp.iter().enumerate() {
        mlp_inputs.push(x.clone());
        let pre = layer.forward(&x);
        mlp_pre.push(pre.clone());
        x = if k < last {
            pre.into_iter().map(|v| v.max(0.0)).collect()
        } else {
            pre
        };
    }
    let q = [x[0], x[1], x[2], x[3]];
    Ok(RegCache {
        conv_inputs,
        conv_pre,
        mlp_inputs,
        mlp_pre,
        q,
    })
}

fn regressor_backward(
    group: &IcosahedralGroup,
    reg: &RegressorWeights,
    cache: &RegCache,
    d_q: &[f64; 4],
    conv_grads: &mut [LayerGrads],
    mlp_grads: &mut [LayerGrads],
) {
    // MLP backward.
    let last = reg.mlp.len() - 1;
    let mut d_out: Vec<f64> = d_q.to_vec();
    for (k, layer) in reg.mlp.iter().enumerate().rev() {
        if k != last {
            for (g, p) in d_out.iter_mut().zip(&cache.mlp_pre[k]) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = &cache.mlp_inputs[k];
        let mut d_in = vec![0.0; layer.n_in];
        for j in 0..layer.n_out {
            let coeff = d_out[j];
            mlp_grads[k].bias[j] += coeff;
            if coeff == 0.0 {
                continue;
            }
            let w = &layer.weights[j * layer.n_in..(j + 1) * layer.n_in];
            let wg = &mut mlp_grads[k].weights[j * layer.n_in..(j + 1) * layer.n_in];
            for c in 0..layer.n_in {
                wg[c] += coeff * input[c];
                d_in[c] += coeff * w[c];
            }
        }
        d_out = d_in;
    }

    // Pooling backward: mean over rows.
    let channels = cache.conv_inputs.last().unwrap().channels();
    let mut d_feat = GroupFeature::zeros(channels, 0);
    for c in 0..channels {
        let per_row = d_out[c] / GROUP_ORDER as f64;
        for g in 0..GROUP_ORDER {
            d_feat.as_mut_slice()[g * channels + c] = per_row;
        }
    }

    // Conv stack backward.
    let mut d_current = d_feat;
    for (k, layer) in reg.convs.iter().enumerate().rev() {
        relu_backward(&mut d_current, &cache.conv_pre[k]);
        d_current = conv_backward(
            group,
            layer,
            &cache.conv_inputs[k],
            &d_current,
            &mut conv_grads[k],
        );
    }
}

/// Mean residual loss of a regressor over prepared (input, rotation, g+)
/// samples.
pub(crate) fn eval_regressor_loss(
    group: &IcosahedralGroup,
    reg: &RegressorWeights,
    samples: &[(GroupFeature, Matrix3<f64>, GroupElement)],
) -> Result<f64> {
    let mut total = 0.0;
    for (input, rotation, g_plus) in samples {
        let cache = regressor_forward_cached(group, reg, input)?;
        let (value, _) = loss_residual_grad(&cache.q, rotation, *g_plus, group)?;
        total += value;
    }
    Ok(total / samples.len() as f64)
}

/// Builds the regressor training input for one pair: the channel-wise
/// concatenation `[f0_q; fl_q; P f0_p; P fl_p]` aligned by `align`.
pub fn regressor_input(
    group: &IcosahedralGroup,
    f0_p: &GroupFeature,
    fl_p: &GroupFeature,
    f0_q: &GroupFeature,
    fl_q: &GroupFeature,
    align: GroupElement,
) -> GroupFeature {
    let p0 = f0_p.permute(group, align);
    let pl = fl_p.permute(group, align);
    concat_features(&[f0_q, fl_q, &p0, &pl])
}

/// Trains the rotation residual regressor on pairs embedded with the given
/// embedder weights. Inputs are aligned with the ground-truth coarse
/// rotation; the loss is the quaternion distance to the true residual.
pub fn train_regressor(
    group: &IcosahedralGroup,
    pairs: &[TrainPair],
    embedder: &NetworkWeights,
    conv_widths: &[usize],
    mlp_hidden: usize,
    cfg: &TrainConfig,
) -> Result<RegressorTrainReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    // Precompute the concatenated, ground-truth-aligned inputs once.
    let samples: Vec<(GroupFeature, Matrix3<f64>, GroupElement)> = pairs
        .par_iter()
        .map(|pair| {
            let fl_a = super::embed(group, &pair.f0_anchor, embedder)?;
            let fl_b = super::embed(group, &pair.f0_positive, embedder)?;
            let input = regressor_input(
                group,
                &pair.f0_anchor,
                &fl_a,
                &pair.f0_positive,
                &fl_b,
                pair.g_plus,
            );
            Ok((input, pair.rotation, pair.g_plus))
        })
        .collect::<Result<_>>()?;

    let n_concat = samples[0].0.channels();
    let mut reg = NetworkWeights::random_regressor(n_concat, conv_widths, mlp_hidden, cfg.seed);
    let conv_params: usize = reg.convs.iter().map(|l| l.param_count()).sum();
    let mlp_params: usize = reg.mlp.iter().map(|l| l.param_count()).sum();
    let mut adam = Adam::new(conv_params + mlp_params);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut epoch_losses = vec![eval_regressor_loss(group, &reg, &samples)?];

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * cfg
                .lr_decay
                .powf(epoch as f64 / cfg.lr_decay_epochs.max(1e-9));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / chunk.len() as f64;
            let reg_ref = &reg;
            let per_sample: Vec<(f64, Vec<LayerGrads>, Vec<LayerGrads>)> = chunk
                .par_iter()
                .map(|&i| {
                    let (input, rotation, g_plus) = &samples[i];
                    let cache = regressor_forward_cached(group, reg_ref, input)?;
                    let (value, mut d_q) =
                        loss_residual_grad(&cache.q, rotation, *g_plus, group)?;
                    for v in &mut d_q {
                        *v *= scale;
                    }
                    let mut conv_grads: Vec<LayerGrads> =
                        reg_ref.convs.iter().map(LayerGrads::zeros_conv).collect();
                    let mut mlp_grads: Vec<LayerGrads> =
                        reg_ref.mlp.iter().map(LayerGrads::zeros_linear).collect();
                    regressor_backward(group, reg_ref, &cache, &d_q, &mut conv_grads, &mut mlp_grads);
                    Ok((value, conv_grads, mlp_grads))
                })
                .collect::<Result<_>>()?;

            let batch_loss: f64 =
                per_sample.iter().map(|(v, _, _)| v).sum::<f64>() / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "regressor loss became {batch_loss} at epoch {epoch}"
                )));
            }
            let mut conv_total: Vec<LayerGrads> =
                reg.convs.iter().map(LayerGrads::zeros_conv).collect();
            let mut mlp_total: Vec<LayerGrads> =
                reg.mlp.iter().map(LayerGrads::zeros_linear).collect();
            for (_, cg, mg) in &per_sample {
                for (t, b) in conv_total.iter_mut().zip(cg) {
                    t.add_assign(b);
                }
                for (t, b) in mlp_total.iter_mut().zip(mg) {
                    t.add_assign(b);
                }
            }

            let mut params = pack_conv_params(&reg.convs);
            params.extend(pack_linear_params(&reg.mlp));
            let mut grads = pack_grads(&conv_total);
            grads.extend(pack_grads(&mlp_total));
            adam.step(&mut params, &grads, lr);
            snap_to_f32(&mut params);
            let split = conv_params;
            unpack_conv_params(&mut reg.convs, &params[..split]);
            unpack_linear_params(&mut reg.mlp, &params[split..]);
        }

        let loss = eval_regressor_loss(group, &reg, &samples)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "regressor epoch {epoch} loss is {loss}"
            )));
        }
        epoch_losses.push(loss);
    }

    Ok(RegressorTrainReport {
        regressor: reg,
        epoch_losses,
    })
}

fn pack_linear_params(layers: &[LinearLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unpack_linear_params(layers: &mut [LinearLayer], params: &[f64]) {
    let mut at = 0;
    for l in layers {
        let nw = l.weights.len();
        l.weights.copy_from_slice(&params[at..at + nw]);
        at += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&params[at..at + nb]);
        at += nb;
    }
}

/// Raw (unnormalized) quaternion predicted by the regressor for a prepared
/// input feature.
pub(crate) fn regressor_quaternion(
    group: &IcosahedralGroup,
    reg: &RegressorWeights,
    input: &GroupFeature,
) -> Result<[f64; 4]> {
    Ok(regressor_forward_cached(group, reg, input)?.q)
}

/// Pooled vector entering the regressor MLP; exposed for equivariance checks.
#[cfg(test)]
pub(crate) fn regressor_pooled_input(
    group: &IcosahedralGroup,
    reg: &RegressorWeights,
    input: &GroupFeature,
) -> Result<Vec<f64>> {
    Ok(regressor_forward_cached(group, reg, input)?.mlp_inputs[0].clone())
}
