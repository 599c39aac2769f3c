//! Visual and inertial feature encoders.

use emavio_tensor::nn::{gated_activation, linear, lstm_cell, ConvParams, LstmParams};
use emavio_tensor::{Graph, ParamStore, Tensor, TensorError, Var};

use crate::config::ModelConfig;
use crate::data::{FramePair, ImuWindow};
use crate::{Error, Result};

/// Looks up a named parameter and pulls it into the graph.
pub(crate) fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
    Ok(g.param(store, id))
}

fn conv(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<ConvParams> {
    Ok(ConvParams {
        weight: param(g, store, &format!("{prefix}_weight"))?,
        bias: Some(param(g, store, &format!("{prefix}_bias"))?),
    })
}

/// Stacks reference and target channel-wise into a `[2C, H, W]` constant.
pub fn stack_pair(g: &mut Graph, pair: &FramePair, cfg: &ModelConfig) -> Result<Var> {
    let want = [cfg.image_channels, cfg.image_height, cfg.image_width];
    if pair.reference.shape() != want || pair.target.shape() != want {
        return Err(Error::Config(format!(
            "visual encoder: frame pair shapes {:?}/{:?} do not match configured {want:?}",
            pair.reference.shape(),
            pair.target.shape()
        )));
    }
    let mut data = pair.reference.data().to_vec();
    data.extend_from_slice(pair.target.data());
    let shape = [2 * want[0], want[1], want[2]];
    Ok(g.constant(Tensor::new(&shape, data)?))
}

/// Six strided 3x3 conv + ReLU layers, global average pooling and a
/// linear map to `d_v`. Returns `[1, d_v]`.
pub fn encode_visual(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pair: &FramePair,
) -> Result<Var> {
    let mut x = stack_pair(g, pair, cfg)?;
    for (k, &stride) in cfg.visual_strides.iter().enumerate() {
        let c = conv(g, store, &format!("visual.layer{k}.conv"))?;
        x = g.conv2d(x, c.weight, c.bias, stride, 1)?;
        x = g.relu(x);
    }
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let pooled = g.mean_axis(flat, 1)?;
    let pooled = g.reshape(pooled, &[1, shape[0]])?;
    let w = param(g, store, "visual.proj_weight")?;
    let b = param(g, store, "visual.proj_bias")?;
    Ok(linear(g, pooled, w, Some(b))?)
}

/// Weights of one WaveNet layer.
#[derive(Clone, Copy, Debug)]
pub struct WavenetLayerParams {
    pub filter: ConvParams,
    pub gate: ConvParams,
    /// 1x1 convolution on the gated output feeding the residual path.
    pub residual: ConvParams,
    /// 1x1 convolution on the gated output feeding the skip sum.
    pub skip: ConvParams,
}

impl WavenetLayerParams {
    pub fn load(g: &mut Graph, store: &ParamStore, layer: usize) -> Result<Self> {
        let p = format!("inertial.layer{layer}");
        Ok(Self {
            filter: conv(g, store, &format!("{p}.filter"))?,
            gate: conv(g, store, &format!("{p}.gate"))?,
            residual: conv(g, store, &format!("{p}.residual"))?,
            skip: conv(g, store, &format!("{p}.skip"))?,
        })
    }
}

/// Layer `k` of the stack, dilation `2^k`. Returns `(x + residual, skip)`.
pub fn wavenet_layer(
    g: &mut Graph,
    x: Var,
    layer: usize,
    w: &WavenetLayerParams,
) -> Result<(Var, Var)> {
    let z = gated_activation(g, x, w.filter, w.gate, 1 << layer)?;
    let res = g.conv1d_causal(z, w.residual.weight, w.residual.bias, 1)?;
    let skip = g.conv1d_causal(z, w.skip.weight, w.skip.bias, 1)?;
    if g.shape(res) != g.shape(x) {
        return Err(TensorError::ShapeMismatch {
            op: "wavenet_residual",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(res).to_vec(),
        }
        .into());
    }
    Ok((g.add(x, res)?, skip))
}

fn imu_input(g: &mut Graph, cfg: &ModelConfig, window: &ImuWindow) -> Result<Var> {
    if window.samples.shape() != [6, cfg.imu_window] {
        return Err(Error::Contract(format!(
            "inertial encoder: IMU window shape {:?}, expected [6, {}]",
            window.samples.shape(),
            cfg.imu_window
        )));
    }
    Ok(g.constant(window.samples.clone()))
}

/// `ReLU(Σ skip_k)`, the `[C, L]` activations before temporal pooling.
pub fn inertial_activations(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    window: &ImuWindow,
) -> Result<Var> {
    let input = imu_input(g, cfg, window)?;
    let c = conv(g, store, "inertial.input")?;
    let mut x = g.conv1d_causal(input, c.weight, c.bias, 1)?;
    let mut total: Option<Var> = None;
    for k in 0..cfg.wavenet_layers {
        let w = WavenetLayerParams::load(g, store, k)?;
        let (next, skip) = wavenet_layer(g, x, k, &w)?;
        x = next;
        total = Some(match total {
            Some(t) => g.add(t, skip)?,
            None => skip,
        });
    }
    let total = total.ok_or_else(|| Error::Config("inertial encoder needs a layer".into()))?;
    Ok(g.relu(total))
}

/// Inertial feature `[1, d_i]`: WaveNet stack, or an LSTM over the window
/// when `use_wavenet` is off.
pub fn encode_inertial(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    window: &ImuWindow,
) -> Result<Var> {
    let feature = if cfg.use_wavenet {
        let act = inertial_activations(g, store, cfg, window)?;
        let pooled = g.mean_axis(act, 1)?;
        g.reshape(pooled, &[1, cfg.wavenet_channels])?
    } else {
        let input = imu_input(g, cfg, window)?;
        let rows = g.transpose(input)?;
        let w = LstmParams {
            w_ih: param(g, store, "inertial.lstm.w_ih")?,
            w_hh: param(g, store, "inertial.lstm.w_hh")?,
            bias: param(g, store, "inertial.lstm.bias")?,
        };
        let zeros = Tensor::zeros(&[1, cfg.inertial_lstm_hidden]);
        let mut h = g.constant(zeros.clone());
        let mut c = g.constant(zeros);
        for t in 0..cfg.imu_window {
            let x = g.narrow(rows, 0, t, 1)?;
            (h, c) = lstm_cell(g, x, h, c, w)?;
        }
        h
    };
    let w = param(g, store, "inertial.proj_weight")?;
    let b = param(g, store, "inertial.proj_bias")?;
    Ok(linear(g, feature, w, Some(b))?)
}
