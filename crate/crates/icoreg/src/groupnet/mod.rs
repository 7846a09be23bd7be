//! Group features on the icosahedral group and the equivariant embedder.
//!
//! A group feature stores one backbone feature per group rotation as a
//! 60 x n matrix. Rotating the input patch by a group element permutes the
//! rows instead of changing the values, and everything in this module is
//! built to preserve that property: the localized group convolution gathers
//! its 13 taps through the Cayley table, and the pooled descriptor averages
//! over rows, which kills the permutation entirely.

mod loss;
mod train;
mod weights_io;

pub use loss::{
    loss_desc, loss_l1, loss_l1_grad, loss_l2, loss_l2_grad, loss_residual, loss_residual_grad,
    DescSample, LAMBDA,
};
pub use train::{
    regressor_input, train_embedder, train_regressor, RegressorTrainReport, TrainConfig,
    TrainPair, TrainReport,
};
#[cfg(test)]
pub(crate) use train::regressor_pooled_input;
pub(crate) use train::regressor_quaternion as regressor_quaternion_for;
pub use weights_io::{load_weights, save_weights};

use crate::backbone::{Backbone, Patch};
use crate::error::{Error, Result};
use crate::icosa::{GroupElement, IcosahedralGroup, GROUP_ORDER, NEIGHBORHOOD_SIZE};

/// A function f: G -> R^n stored as a row-major 60 x n matrix; row index is
/// the group element index. `layer` tags the position in the embedder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFeature {
    values: Vec<f64>,
    channels: usize,
    layer: u32,
}

impl GroupFeature {
    pub fn zeros(channels: usize, layer: u32) -> Self {
        GroupFeature {
            values: vec![0.0; GROUP_ORDER * channels],
            channels,
            layer,
        }
    }

    /// Builds from exactly 60 equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>], layer: u32) -> Result<Self> {
        if rows.len() != GROUP_ORDER {
            return Err(Error::ShapeMismatch {
                expected: format!("{GROUP_ORDER} rows"),
                got: format!("{} rows", rows.len()),
            });
        }
        let channels = rows[0].len();
        let mut values = Vec::with_capacity(GROUP_ORDER * channels);
        for row in rows {
            if row.len() != channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{channels} channels"),
                    got: format!("{} channels", row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(GroupFeature {
            values,
            channels,
            layer,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn row(&self, g: GroupElement) -> &[f64] {
        &self.values[g.index() * self.channels..(g.index() + 1) * self.channels]
    }

    pub fn row_mut(&mut self, g: GroupElement) -> &mut [f64] {
        &mut self.values[g.index() * self.channels..(g.index() + 1) * self.channels]
    }

    /// Flattened row-major view.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row permutation induced by rotating the input with `m`:
    /// the output row at `g` is the input row at `g·m`. Values move
    /// bit-identically.
    pub fn permute(&self, group: &IcosahedralGroup, m: GroupElement) -> GroupFeature {
        let mut out = GroupFeature::zeros(self.channels, self.layer);
        for g in group.elements() {
            let src = group.compose(g, m);
            out.row_mut(g).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flattened dot product.
    pub fn dot(&self, other: &GroupFeature) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &GroupFeature) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Unit-norm rotation-invariant descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One group convolution layer: weights `w[j][i]` over 13 neighborhood taps,
/// flattened row-major as (output channel, tap, input channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        ConvLayer {
            n_in,
            n_out,
            weights: vec![0.0; n_out * NEIGHBORHOOD_SIZE * n_in],
            bias: vec![0.0; n_out],
        }
    }

    pub fn weight(&self, j: usize, tap: usize, c: usize) -> f64 {
        self.weights[(j * NEIGHBORHOOD_SIZE + tap) * self.n_in + c]
    }

    pub fn weight_mut(&mut self, j: usize, tap: usize, c: usize) -> &mut f64 {
        &mut self.weights[(j * NEIGHBORHOOD_SIZE + tap) * self.n_in + c]
    }

    pub fn bias_mut(&mut self, j: usize) -> &mut f64 {
        &mut self.bias[j]
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// A dense layer of the regressor MLP, weights row-major (n_out, n_in).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        LinearLayer {
            n_in,
            n_out,
            weights: vec![0.0; n_out * n_in],
            bias: vec![0.0; n_out],
        }
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, o) in out.iter_mut().enumerate() {
            let w = &self.weights[j * self.n_in..(j + 1) * self.n_in];
            *o += w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Rotation residual regressor: group convolutions, average pooling, MLP
/// down to a quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorWeights {
    pub convs: Vec<ConvLayer>,
    pub mlp: Vec<LinearLayer>,
}

/// All trainable parameters. The embedder is a stack of group convolution
/// layers (four in the default configuration); the regressor is optional at
/// inference. Parameter values always lie on the f32 grid so the weights
/// file round-trips bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub embedder: Vec<ConvLayer>,
    pub regressor: Option<RegressorWeights>,
}

impl NetworkWeights {
    /// Embedder with uniform init in +-sqrt(6 / (13 n_in + n_out)), seeded.
    /// `widths[0]` is the backbone width; each further entry adds a layer.
    pub fn embedder_random(widths: &[usize], seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut embedder = Vec::new();
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let mut layer = ConvLayer::zeros(n_in, n_out);
            let bound = (6.0 / (NEIGHBORHOOD_SIZE as f64 * n_in as f64 + n_out as f64)).sqrt();
            for v in &mut layer.weights {
                *v = rng.random_range(-bound..bound);
            }
            snap_to_f32(&mut layer.weights);
            embedder.push(layer);
        }
        NetworkWeights {
            embedder,
            regressor: None,
        }
    }

    /// Deterministic inference default: four layers that pass the (always
    /// non-negative) histogram feature through unchanged, so the embedded
    /// feature is the Frobenius-normalized layer-0 feature.
    pub fn identity_passthrough(width: usize) -> Self {
        let mut embedder = Vec::new();
        for _ in 0..4 {
            let mut layer = ConvLayer::zeros(width, width);
            for j in 0..width {
                *layer.weight_mut(j, 0, j) = 1.0; // tap 0 is the identity element
            }
            embedder.push(layer);
        }
        NetworkWeights {
            embedder,
            regressor: None,
        }
    }

    /// Default channel widths for a given backbone width: four layers of 32.
    pub fn default_widths(n0: usize) -> Vec<usize> {
        vec![n0, 32, 32, 32, 32]
    }

    /// Random regressor for the given concatenated input width,
    /// three group convolutions and a three-layer MLP ending in a quaternion.
    pub fn random_regressor(n_concat: usize, conv_widths: &[usize], mlp_hidden: usize, seed: u64) -> RegressorWeights {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut widths = vec![n_concat];
        widths.extend_from_slice(conv_widths);
        let mut convs = Vec::new();
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let mut layer = ConvLayer::zeros(n_in, n_out);
            let bound = (6.0 / (NEIGHBORHOOD_SIZE as f64 * n_in as f64 + n_out as f64)).sqrt();
            for v in &mut layer.weights {
                *v = rng.random_range(-bound..bound);
            }
            snap_to_f32(&mut layer.weights);
            convs.push(layer);
        }
        let mlp_dims = [
            *widths.last().unwrap(),
            mlp_hidden,
            mlp_hidden,
            4, // quaternion
        ];
        let mut mlp = Vec::new();
        for w in mlp_dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let mut layer = LinearLayer::zeros(n_in, n_out);
            let bound = (6.0 / (n_in as f64 + n_out as f64)).sqrt();
            for v in &mut layer.weights {
                *v = rng.random_range(-bound..bound);
            }
            snap_to_f32(&mut layer.weights);
            mlp.push(layer);
        }
        RegressorWeights { convs, mlp }
    }

    /// Checks that layer dimensions chain.
    pub fn validate(&self, n0: usize) -> Result<()> {
        let mut width = n0;
        for (i, layer) in self.embedder.iter().enumerate() {
            if layer.n_in != width {
                return Err(Error::ShapeMismatch {
                    expected: format!("embedder layer {i} input {width}"),
                    got: format!("{}", layer.n_in),
                });
            }
            width = layer.n_out;
        }
        if let Some(reg) = &self.regressor {
            let n_l = width;
            let mut w = 2 * n0 + 2 * n_l;
            for (i, layer) in reg.convs.iter().enumerate() {
                if layer.n_in != w {
                    return Err(Error::ShapeMismatch {
                        expected: format!("regressor conv {i} input {w}"),
                        got: format!("{}", layer.n_in),
                    });
                }
                w = layer.n_out;
            }
            for (i, layer) in reg.mlp.iter().enumerate() {
                if layer.n_in != w {
                    return Err(Error::ShapeMismatch {
                        expected: format!("regressor mlp {i} input {w}"),
                        got: format!("{}", layer.n_in),
                    });
                }
                w = layer.n_out;
            }
            if w != 4 {
                return Err(Error::ShapeMismatch {
                    expected: "quaternion output (4)".into(),
                    got: format!("{w}"),
                });
            }
        }
        Ok(())
    }
}

/// Rounds every parameter through f32, keeping values exactly representable
/// in the weights file.
pub(crate) fn snap_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Layer-0 group feature: one backbone evaluation per group rotation of the
/// patch.
pub fn extract_group_feature(
    patch: &Patch,
    group: &IcosahedralGroup,
    backbone: &dyn Backbone,
) -> Result<GroupFeature> {
    let mut rows = Vec::with_capacity(GROUP_ORDER);
    for g in group.elements() {
        rows.push(backbone.extract(&patch.rotated(group.rotation(g)))?);
    }
    GroupFeature::from_rows(&rows, 0)
}

/// Localized icosahedral group convolution:
/// `out(g)[j] = sum_i w[j][i] . f(h_i g) + b[j]`.
pub fn group_conv(
    group: &IcosahedralGroup,
    layer: &ConvLayer,
    input: &GroupFeature,
) -> Result<GroupFeature> {
    if input.channels != layer.n_in {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", layer.n_in),
            got: format!("{} channels", input.channels),
        });
    }
    let mut out = GroupFeature::zeros(layer.n_out, input.layer + 1);
    for g in group.elements() {
        let out_row = &mut out.values[g.index() * layer.n_out..(g.index() + 1) * layer.n_out];
        out_row.copy_from_slice(&layer.bias);
        for i in 0..NEIGHBORHOOD_SIZE {
            let src = input.row(group.conv_tap(g, i));
            for (j, o) in out_row.iter_mut().enumerate() {
                let w = &layer.weights[(j * NEIGHBORHOOD_SIZE + i) * layer.n_in..][..layer.n_in];
                *o += w.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(out)
}

pub(crate) fn relu_in_place(f: &mut GroupFeature) {
    for v in &mut f.values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Runs the embedder: (group_conv -> ReLU) per layer, then Frobenius
/// normalization of the whole 60 x n matrix.
pub fn embed(
    group: &IcosahedralGroup,
    f0: &GroupFeature,
    weights: &NetworkWeights,
) -> Result<GroupFeature> {
    let mut f = f0.clone();
    for layer in &weights.embedder {
        f = group_conv(group, layer, &f)?;
        relu_in_place(&mut f);
    }
    let norm = f.frobenius_norm();
    if norm <= 0.0 {
        return Err(Error::DegenerateDescriptor);
    }
    for v in &mut f.values {
        *v /= norm;
    }
    Ok(f)
}

/// Column-wise mean over all 60 group elements, L2-normalized. Summation
/// per channel is done in sorted value order so the result is bit-identical
/// under any row permutation of the input.
pub fn pool_descriptor(f: &GroupFeature) -> Result<Descriptor> {
    let n = f.channels;
    let mut pooled = vec![0.0_f64; n];
    let mut column = [0.0_f64; GROUP_ORDER];
    for (c, out) in pooled.iter_mut().enumerate() {
        for g in 0..GROUP_ORDER {
            column[g] = f.values[g * n + c];
        }
        column.sort_unstable_by(f64::total_cmp);
        *out = column.iter().sum::<f64>() / GROUP_ORDER as f64;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::DegenerateDescriptor);
    }
    for v in &mut pooled {
        *v /= norm;
    }
    Ok(Descriptor { values: pooled })
}

/// Convenience: descriptor of a patch under the given weights.
pub fn describe_patch(
    patch: &Patch,
    group: &IcosahedralGroup,
    backbone: &dyn Backbone,
    weights: &NetworkWeights,
) -> Result<(GroupFeature, GroupFeature, Descriptor)> {
    let f0 = extract_group_feature(patch, group, backbone)?;
    let fl = embed(group, &f0, weights)?;
    let d = pool_descriptor(&fl)?;
    Ok((f0, fl, d))
}

/// Average pooling over group elements without normalization; used by the
/// regressor head. Same canonical summation order as [`pool_descriptor`].
pub(crate) fn mean_rows(f: &GroupFeature) -> Vec<f64> {
    let n = f.channels;
    let mut pooled = vec![0.0_f64; n];
    let mut column = [0.0_f64; GROUP_ORDER];
    for (c, out) in pooled.iter_mut().enumerate() {
        for g in 0..GROUP_ORDER {
            column[g] = f.values[g * n + c];
        }
        column.sort_unstable_by(f64::total_cmp);
        *out = column.iter().sum::<f64>() / GROUP_ORDER as f64;
    }
    pooled
}

/// Channel-wise concatenation of group features (same 60-row layout).
pub fn concat_features(parts: &[&GroupFeature]) -> GroupFeature {
    let channels: usize = parts.iter().map(|f| f.channels).sum();
    let mut out = GroupFeature::zeros(channels, 0);
    for g in 0..GROUP_ORDER {
        let row = &mut out.values[g * channels..(g + 1) * channels];
        let mut offset = 0;
        for part in parts {
            row[offset..offset + part.channels]
                .copy_from_slice(&part.values[g * part.channels..(g + 1) * part.channels]);
            offset += part.channels;
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn random_group_feature(channels: usize, seed: u64) -> GroupFeature {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut f = GroupFeature::zeros(channels, 0);
    for v in &mut f.values {
        *v = rng.random_range(-1.0..1.0);
    }
    f
}
