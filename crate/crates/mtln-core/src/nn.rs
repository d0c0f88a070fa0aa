//! The multi-task network: a Link-Net-style encoder/decoder over residual
//! blocks, with the input re-injected at smaller scales, plus a
//! fully-connected head that regresses the 5 normalized ellipse parameters
//! from the bottleneck.
//!
//! Layout for the default config (channels `[8, 16, 32, 64]`, 128x128):
//!
//! ```text
//! image 1x128^2 -> enc1 8x64^2 -> enc2 16x32^2 -> enc3 32x16^2 -> enc4 64x8^2
//!                   ^ input/2 joins enc2  ^ input/4 joins enc3       |
//! logits 1x128^2 <- head <- dec1 8x64^2 <- dec2 16x32^2 <- dec3 32x16^2
//!                                            ellipse head: GAP -> FC -> 5
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Padding, Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    BadConfig(String),
    MissingParam(String),
    Tensor(TensorError),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::BadConfig(msg) => write!(f, "bad network config: {msg}"),
            NnError::MissingParam(name) => write!(f, "parameter {name} missing from model"),
            NnError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for NnError {}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Tensor(e)
    }
}

pub type Result<T> = core::result::Result<T, NnError>;

/// Shape of the network. The number of encoder stages is the length of
/// `channels`; the final ellipse layer always has 5 outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels per encoder stage, shallow to deep.
    pub channels: Vec<usize>,
    /// Hidden widths of the ellipse head between GAP and the 5 outputs.
    pub fc_hidden: Vec<usize>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_h: 128,
            input_w: 128,
            channels: alloc::vec![8, 16, 32, 64],
            fc_hidden: alloc::vec![128, 64],
            seed: 0,
        }
    }
}

/// Number of ellipse parameters the regression head emits.
pub const ELLIPSE_OUTPUTS: usize = 5;

impl NetworkConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if !(2..=8).contains(&s) {
            return Err(NnError::BadConfig(format!(
                "need 2 to 8 encoder stages, got {s}"
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.fc_hidden.iter().any(|&c| c == 0) {
            return Err(NnError::BadConfig(String::from(
                "channel and hidden widths must be positive",
            )));
        }
        let div = 1usize << s;
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(NnError::BadConfig(format!(
                "input {}x{} must be divisible by 2^{s}",
                self.input_h, self.input_w
            )));
        }
        if self.input_h / div == 0 || self.input_w / div == 0 {
            return Err(NnError::BadConfig(format!(
                "input {}x{} collapses before stage {s}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// True for the stages whose input gets a pooled copy of the image
    /// concatenated on: stages 2 and 3 carry the 1/2- and 1/4-scale views.
    fn injects_input(&self, stage: usize) -> bool {
        stage == 2 || stage == 3
    }

    /// Input channel count of an encoder stage.
    fn stage_in_channels(&self, stage: usize) -> usize {
        let base = if stage == 1 {
            1
        } else {
            self.channels[stage - 2]
        };
        base + self.injects_input(stage) as usize
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// All model parameters, keyed by a stable path; iteration order is the
/// lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ModelParams {
    pub fn from_tensors(tensors: BTreeMap<String, ParamTensor>) -> Self {
        ModelParams { tensors }
    }

    pub fn tensors(&self) -> &BTreeMap<String, ParamTensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, ParamTensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::MissingParam(String::from(name)))
    }

    pub fn value_count(&self) -> usize {
        self.tensors.values().map(|t| t.values.len()).sum()
    }

    fn insert_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
    ) {
        let fan_in = ci * k * k;
        self.tensors.insert(
            format!("{name}.k"),
            ParamTensor {
                dims: alloc::vec![co, ci, k, k],
                values: he_uniform(rng, fan_in, co * ci * k * k),
            },
        );
        self.tensors.insert(
            format!("{name}.b"),
            ParamTensor {
                dims: alloc::vec![co],
                values: alloc::vec![0.0; co],
            },
        );
    }

    fn insert_fc(&mut self, rng: &mut ChaCha8Rng, name: &str, dout: usize, din: usize) {
        self.tensors.insert(
            format!("{name}.w"),
            ParamTensor {
                dims: alloc::vec![dout, din],
                values: he_uniform(rng, din, dout * din),
            },
        );
        self.tensors.insert(
            format!("{name}.b"),
            ParamTensor {
                dims: alloc::vec![dout],
                values: alloc::vec![0.0; dout],
            },
        );
    }
}

/// Fan-in-scaled uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = libm::sqrtf(6.0 / fan_in as f32);
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Builds freshly initialized parameters for the config. Deterministic in
/// `config.seed`; the name set depends only on the config shape.
pub fn build_mtln(cfg: &NetworkConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ModelParams::default();
    let s = cfg.stages();

    for i in 1..=s {
        let cin = cfg.stage_in_channels(i);
        let cout = cfg.channels[i - 1];
        p.insert_conv(&mut rng, &format!("enc{i}.conv1"), cout, cin, 3);
        p.insert_conv(&mut rng, &format!("enc{i}.conv2"), cout, cout, 3);
        // Stride 2 plus a channel change: the shortcut always needs a
        // projection in this architecture.
        p.insert_conv(&mut rng, &format!("enc{i}.shortcut"), cout, cin, 1);
    }
    for i in (1..s).rev() {
        let cin = cfg.channels[i] + cfg.channels[i - 1];
        let cout = cfg.channels[i - 1];
        p.insert_conv(&mut rng, &format!("dec{i}.conv1"), cout, cin, 3);
        p.insert_conv(&mut rng, &format!("dec{i}.conv2"), cout, cout, 3);
    }
    let c1 = cfg.channels[0];
    p.insert_conv(&mut rng, "head.conv1", c1, c1, 3);
    p.insert_conv(&mut rng, "head.conv2", 1, c1, 1);

    let mut fc_in = *cfg.channels.last().expect("validated non-empty");
    for (j, &hidden) in cfg.fc_hidden.iter().enumerate() {
        p.insert_fc(&mut rng, &format!("et.fc{}", j + 1), hidden, fc_in);
        fc_in = hidden;
    }
    p.insert_fc(
        &mut rng,
        &format!("et.fc{}", cfg.fc_hidden.len() + 1),
        ELLIPSE_OUTPUTS,
        fc_in,
    );
    Ok(p)
}

/// Loads every parameter onto the tape as a tracked leaf, returning the
/// name-to-id binding used by the forward pass and the optimizer.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> Result<BTreeMap<String, TensorId>> {
    let mut ids = BTreeMap::new();
    for (name, t) in params.tensors() {
        let id = tape.leaf(&t.dims, t.values.clone(), true)?;
        ids.insert(name.clone(), id);
    }
    Ok(ids)
}

fn bound(ids: &BTreeMap<String, TensorId>, name: &str) -> Result<TensorId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| NnError::MissingParam(String::from(name)))
}

/// Residual block: `relu(conv2(relu(conv1(x))) + shortcut(x))`, both convs
/// 3x3, conv1 carrying the stride. The shortcut is a 1x1 stride-matched
/// projection when given, identity otherwise.
pub fn res_block(
    tape: &mut Tape,
    x: TensorId,
    conv1: (TensorId, TensorId),
    conv2: (TensorId, TensorId),
    shortcut: Option<(TensorId, TensorId)>,
    stride: usize,
) -> Result<TensorId> {
    let h1 = tape.conv2d(x, conv1.0, conv1.1, stride, Padding::Same)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.conv2d(h1, conv2.0, conv2.1, 1, Padding::Same)?;
    let sc = match shortcut {
        Some((k, b)) => tape.conv2d(x, k, b, stride, Padding::Same)?,
        None => x,
    };
    let sum = tape.add(h2, sc)?;
    Ok(tape.relu(sum)?)
}

/// Decoder block: `conv2(relu(conv1(concat(upsample2(x), skip))))`.
/// Output spatial dims equal the skip's.
pub fn decoder_block(
    tape: &mut Tape,
    x: TensorId,
    skip: TensorId,
    conv1: (TensorId, TensorId),
    conv2: (TensorId, TensorId),
) -> Result<TensorId> {
    let up = tape.upsample2_nearest(x)?;
    let cat = tape.concat_channels(up, skip)?;
    let h = tape.conv2d(cat, conv1.0, conv1.1, 1, Padding::Same)?;
    let h = tape.relu(h)?;
    Ok(tape.conv2d(h, conv2.0, conv2.1, 1, Padding::Same)?)
}

/// Full forward pass over bound parameters.
///
/// Returns raw segmentation logits (`[1,1,H,W]`; sigmoid is applied by the
/// loss and metrics, not here) and, when `include_ellipse` is set, the
/// 5-vector of normalized ellipse parameter predictions.
pub fn forward_mtln(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    image: TensorId,
    cfg: &NetworkConfig,
    include_ellipse: bool,
) -> Result<(TensorId, Option<TensorId>)> {
    cfg.validate()?;
    let dims = tape.dims(image).to_vec();
    if dims != [1, 1, cfg.input_h, cfg.input_w] {
        return Err(NnError::BadConfig(format!(
            "image dims {dims:?} do not match configured input [1, 1, {}, {}]",
            cfg.input_h, cfg.input_w
        )));
    }
    let s = cfg.stages();

    let conv = |ids: &BTreeMap<String, TensorId>, name: &str| -> Result<(TensorId, TensorId)> {
        Ok((bound(ids, &format!("{name}.k"))?, bound(ids, &format!("{name}.b"))?))
    };

    let mut x = image;
    let mut pooled_input = image;
    let mut skips: Vec<TensorId> = Vec::with_capacity(s - 1);
    for i in 1..=s {
        let input = if cfg.injects_input(i) {
            pooled_input = tape.avg_pool2(pooled_input)?;
            tape.concat_channels(x, pooled_input)?
        } else {
            x
        };
        x = res_block(
            tape,
            input,
            conv(ids, &format!("enc{i}.conv1"))?,
            conv(ids, &format!("enc{i}.conv2"))?,
            Some(conv(ids, &format!("enc{i}.shortcut"))?),
            2,
        )?;
        if i < s {
            skips.push(x);
        }
    }
    let bottleneck = x;

    for i in (1..s).rev() {
        x = decoder_block(
            tape,
            x,
            skips[i - 1],
            conv(ids, &format!("dec{i}.conv1"))?,
            conv(ids, &format!("dec{i}.conv2"))?,
        )?;
    }
    let up = tape.upsample2_nearest(x)?;
    let (hk, hb) = conv(ids, "head.conv1")?;
    let h = tape.conv2d(up, hk, hb, 1, Padding::Same)?;
    let h = tape.relu(h)?;
    let (ok, ob) = conv(ids, "head.conv2")?;
    let logits = tape.conv2d(h, ok, ob, 1, Padding::Same)?;

    let ellipse = if include_ellipse {
        let mut v = tape.global_avg_pool(bottleneck)?;
        let layers = cfg.fc_hidden.len() + 1;
        for j in 1..=layers {
            let w = bound(ids, &format!("et.fc{j}.w"))?;
            let b = bound(ids, &format!("et.fc{j}.b"))?;
            v = tape.fully_connected(v, w, b)?;
            if j < layers {
                v = tape.relu(v)?;
            }
        }
        Some(v)
    } else {
        None
    };

    Ok((logits, ellipse))
}
