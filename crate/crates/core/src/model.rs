//! Full network assembly and its parameter/MAC ledger.

use emavio_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FusionMode, ModelConfig};
use crate::data::{FramePair, ImuWindow, SequenceSample};
use crate::encoders::{encode_inertial, encode_visual};
use crate::fusion::{fuse, fuse_concat, regress_pose};
use crate::geometry::PoseDelta;
use crate::losses::poses_from_tensor;
use crate::{Error, Result};

/// Block prefixes in forward order.
pub const BLOCKS: [&str; 4] = ["visual", "inertial", "fusion", "regressor"];

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Per-pair outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    /// `[1, 6]` relative pose.
    pub pose: Var,
    pub attention: Option<Var>,
}

fn visual_out_sizes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (cfg.image_height, cfg.image_width);
    cfg.visual_strides
        .iter()
        .map(|&s| {
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
            (h, w)
        })
        .collect()
}

impl Model {
    /// Parameter names, shapes and fan-ins, in registration order.
    pub fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize| specs.push((name, shape, fan_in));
        let mut c_in = 2 * cfg.image_channels;
        for (k, &c) in cfg.visual_channels.iter().enumerate() {
            add(format!("visual.layer{k}.conv_weight"), vec![c, c_in, 3, 3], 9 * c_in);
            add(format!("visual.layer{k}.conv_bias"), vec![c], 9 * c_in);
            c_in = c;
        }
        add("visual.proj_weight".into(), vec![cfg.d_v, c_in], c_in);
        add("visual.proj_bias".into(), vec![cfg.d_v], c_in);

        let feature = if cfg.use_wavenet {
            let (c, k) = (cfg.wavenet_channels, cfg.kernel_size);
            add("inertial.input_weight".into(), vec![c, 6, 1], 6);
            add("inertial.input_bias".into(), vec![c], 6);
            for l in 0..cfg.wavenet_layers {
                for branch in ["filter", "gate"] {
                    add(format!("inertial.layer{l}.{branch}_weight"), vec![c, c, k], c * k);
                    add(format!("inertial.layer{l}.{branch}_bias"), vec![c], c * k);
                }
                for branch in ["residual", "skip"] {
                    add(format!("inertial.layer{l}.{branch}_weight"), vec![c, c, 1], c);
                    add(format!("inertial.layer{l}.{branch}_bias"), vec![c], c);
                }
            }
            c
        } else {
            let h = cfg.inertial_lstm_hidden;
            add("inertial.lstm.w_ih".into(), vec![4 * h, 6], 6);
            add("inertial.lstm.w_hh".into(), vec![4 * h, h], h);
            add("inertial.lstm.bias".into(), vec![4 * h], h);
            h
        };
        add("inertial.proj_weight".into(), vec![cfg.d_i, feature], feature);
        add("inertial.proj_bias".into(), vec![cfg.d_i], feature);

        let d = cfg.token_dim();
        match cfg.fusion {
            FusionMode::Lstm => {
                let h = cfg.fusion_lstm_hidden;
                add("fusion.lstm.w_ih".into(), vec![4 * h, d], d);
                add("fusion.lstm.w_hh".into(), vec![4 * h, h], h);
                add("fusion.lstm.bias".into(), vec![4 * h], h);
            }
            mode => {
                for name in ["w_q", "w_k", "w_v", "w_alpha"] {
                    add(format!("fusion.{name}"), vec![d, d], d);
                }
                if mode == FusionMode::Ema {
                    for name in ["m_q1", "m_q2", "m_k1", "m_k2"] {
                        add(format!("fusion.{name}"), vec![cfg.memory_slots, d], d);
                    }
                }
            }
        }

        let (r_in, hidden) = (cfg.regressor_input(), cfg.regressor_hidden);
        add("regressor.fc1_weight".into(), vec![hidden, r_in], r_in);
        add("regressor.fc1_bias".into(), vec![hidden], r_in);
        add("regressor.fc2_weight".into(), vec![6, hidden], hidden);
        add("regressor.fc2_bias".into(), vec![6], hidden);
        specs
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, fan_in) in Self::parameter_specs(cfg) {
            store.insert_uniform(name, &shape, fan_in, &mut rng)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
        })
    }

    /// Every parameter zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, _) in Self::parameter_specs(cfg) {
            store.insert(name, Tensor::zeros(&shape))?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn forward_pair(&self, g: &mut Graph, pair: &FramePair, imu: &ImuWindow) -> Result<PairOutput> {
        forward_pair(g, &self.store, &self.cfg, pair, imu)
    }

    /// Relative poses of every pair, stacked as `[n - 1, 6]`.
    pub fn forward_sequence(&self, g: &mut Graph, sample: &SequenceSample) -> Result<Var> {
        forward_sequence(g, &self.store, &self.cfg, sample)
    }

    /// Predicted relative poses, one per frame pair. Each pair uses its own
    /// graph so memory stays flat on long sequences.
    pub fn predict(&self, sample: &SequenceSample) -> Result<Vec<PoseDelta>> {
        if sample.frames.len() != sample.imu.len() {
            return Err(Error::Config(format!(
                "sequence {}: {} frame pairs but {} IMU windows",
                sample.id,
                sample.frames.len(),
                sample.imu.len()
            )));
        }
        sample
            .frames
            .iter()
            .zip(&sample.imu)
            .map(|(pair, imu)| {
                let mut g = Graph::new();
                let out = self.forward_pair(&mut g, pair, imu)?;
                Ok(poses_from_tensor(g.value(out.pose))[0])
            })
            .collect()
    }

    pub fn ledger(&self) -> Ledger {
        let mut ledger = Ledger::for_config(&self.cfg);
        for block in &mut ledger.blocks {
            block.params = self.store.count_with_prefix(&format!("{}.", block.name));
        }
        ledger
    }
}

/// Encoders, fusion and regressor for one frame pair.
pub fn forward_pair(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pair: &FramePair,
    imu: &ImuWindow,
) -> Result<PairOutput> {
    let fv = encode_visual(g, store, cfg, pair)?;
    let fi = encode_inertial(g, store, cfg, imu)?;
    let tokens = fuse_concat(g, fv, fi, cfg.tokens)?;
    let fused = fuse(g, store, cfg, tokens)?;
    let pose = regress_pose(g, store, fused.features)?;
    Ok(PairOutput {
        pose,
        attention: fused.attention,
    })
}

/// Relative poses of every pair of `sample`, stacked as `[n - 1, 6]`.
pub fn forward_sequence(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &SequenceSample,
) -> Result<Var> {
    if sample.frames.len() != sample.imu.len() || sample.frames.is_empty() {
        return Err(Error::Config(format!(
            "sequence {}: {} frame pairs but {} IMU windows",
            sample.id,
            sample.frames.len(),
            sample.imu.len()
        )));
    }
    let rows = sample
        .frames
        .iter()
        .zip(&sample.imu)
        .map(|(pair, imu)| Ok(forward_pair(g, store, cfg, pair, imu)?.pose))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&rows, 0)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCount {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

/// Parameter counts and multiply-accumulates per forward pass of one pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Ledger {
    pub blocks: Vec<BlockCount>,
}

impl Ledger {
    /// Counts derived from layer shapes alone. Convolution MACs include
    /// padded taps; elementwise work, softmax and normalization are not
    /// counted.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let specs = Model::parameter_specs(cfg);
        let params = |prefix: &str| {
            specs
                .iter()
                .filter(|(n, _, _)| n.starts_with(prefix))
                .map(|(_, s, _)| s.iter().product::<usize>())
                .sum()
        };

        let mut visual = 0;
        let mut c_in = 2 * cfg.image_channels;
        let mut last = c_in;
        for (&c, (h, w)) in cfg.visual_channels.iter().zip(visual_out_sizes(cfg)) {
            visual += h * w * c * c_in * 9;
            c_in = c;
            last = c;
        }
        visual += last * cfg.d_v;

        let l = cfg.imu_window;
        let inertial = if cfg.use_wavenet {
            let c = cfg.wavenet_channels;
            l * 6 * c + cfg.wavenet_layers * (2 * l * c * c * cfg.kernel_size + 2 * l * c * c) + c * cfg.d_i
        } else {
            let h = cfg.inertial_lstm_hidden;
            l * (4 * h * 6 + 4 * h * h) + h * cfg.d_i
        };

        let (s, d, m) = (cfg.tokens, cfg.token_dim(), cfg.memory_slots);
        let attention = 3 * s * d * d + 2 * s * s * d + s * d * d;
        let fusion = match cfg.fusion {
            FusionMode::Lstm => {
                let h = cfg.fusion_lstm_hidden;
                s * (4 * h * d + 4 * h * h)
            }
            FusionMode::SelfAttention => attention,
            FusionMode::Ema => attention + 2 * (s * d * m + s * m * d),
        };

        let regressor = cfg.regressor_input() * cfg.regressor_hidden + cfg.regressor_hidden * 6;
        let macs = [visual, inertial, fusion, regressor];
        Self {
            blocks: BLOCKS
                .iter()
                .zip(macs)
                .map(|(name, macs)| BlockCount {
                    name: name.to_string(),
                    params: params(&format!("{name}.")),
                    macs,
                })
                .collect(),
        }
    }

    pub fn block(&self, name: &str) -> Option<&BlockCount> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.params).sum()
    }

    pub fn total_macs(&self) -> usize {
        self.blocks.iter().map(|b| b.macs).sum()
    }
}

/// `(total parameters, MACs per pair)`.
pub fn param_count(model: &Model) -> (usize, usize) {
    let l = model.ledger();
    (l.total_params(), l.total_macs())
}
