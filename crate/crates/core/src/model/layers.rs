//! Parameterized layers. A layer records the slots of its parameters in the
//! owning module's store; binding to a tape happens at call time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ladder::NORM_GROUPS;
use crate::error::Result;
use crate::tensor::nn::{conv_gru_step, GruVars};
use crate::tensor::{Padding, ParamKey, ParamStore, Parameter, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// A module's parameters as seen from one tape.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore<f32>,
    pub group: u32,
}

impl Binding<'_> {
    fn var(&self, tape: &mut Tape<f32>, slot: usize) -> Var {
        let key = ParamKey {
            group: self.group,
            index: slot as u32,
        };
        tape.param(key, self.store.get(slot))
    }

    fn all_frozen(&self, slots: &[usize]) -> bool {
        slots.iter().all(|&s| !self.store.get(s).requires_grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Zero-mean normal with variance `2 / fan_in`.
    He,
    /// Zero-mean normal with variance `1 / fan_in`.
    Lecun,
    Zero,
}

/// Allocates named parameters in a store.
pub struct ParamFactory<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
    /// Kernel extent of every convolution made here.
    pub kernel: usize,
    pub prefix: String,
}

impl ParamFactory<'_> {
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, init: InitKind) -> usize {
        let std = match init {
            InitKind::He => (2.0 / fan_in as f64).sqrt(),
            InitKind::Lecun => (1.0 / fan_in as f64).sqrt(),
            InitKind::Zero => 0.0,
        };
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| {
            if std == 0.0 {
                0.0
            } else {
                (std * rng.sample::<f64, _>(StandardNormal)) as f32
            }
        });
        self.store
            .push(Parameter::new(format!("{}/{name}", self.prefix), value))
    }

    fn filled(&mut self, name: &str, len: usize, v: f32) -> usize {
        self.store.push(Parameter::new(
            format!("{}/{name}", self.prefix),
            Tensor::full(vec![len], v),
        ))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, init: InitKind) -> Conv {
        let k = self.kernel;
        let w = self.weight(&format!("{name}/weight"), vec![k, k, cin, cout], k * k * cin, init);
        let b = self.filled(&format!("{name}/bias"), cout, 0.0);
        Conv { w, b, stride }
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize) -> ConvTranspose {
        // Each output pixel of a stride-2 transposed conv sees on average a
        // quarter of the kernel taps per channel.
        let k = self.kernel;
        let w = self.weight(&format!("{name}/weight"), vec![k, k, cout, cin], (k * k * cin).div_ceil(4), InitKind::He);
        let b = self.filled(&format!("{name}/bias"), cout, 0.0);
        ConvTranspose { w, b }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let gamma = self.filled(&format!("{name}/gamma"), channels, 1.0);
        let beta = self.filled(&format!("{name}/beta"), channels, 0.0);
        Norm { gamma, beta }
    }

    pub fn gru(&mut self, name: &str, input: usize, state: usize) -> Gru {
        let k = self.kernel;
        let mut gate = |gate: &str| {
            let w = self.weight(
                &format!("{name}/{gate}/weight"),
                vec![k, k, input + state, state],
                k * k * (input + state),
                InitKind::Lecun,
            );
            let b = self.filled(&format!("{name}/{gate}/bias"), state, 0.0);
            (w, b)
        };
        let update = gate("update");
        let reset = gate("reset");
        let candidate = gate("candidate");
        Gru {
            update,
            reset,
            candidate,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape<f32>, p: Binding, x: Var) -> Result<Var> {
        let (w, b) = (p.var(tape, self.w), p.var(tape, self.b));
        tape.conv2d(x, w, b, self.stride, Padding::Same)
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    w: usize,
    b: usize,
}

impl ConvTranspose {
    pub fn forward(&self, tape: &mut Tape<f32>, p: Binding, x: Var) -> Result<Var> {
        let (w, b) = (p.var(tape, self.w), p.var(tape, self.b));
        tape.conv2d_transpose(x, w, b, 2)
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    /// Group norm followed by leaky ReLU.
    pub fn forward_act(&self, tape: &mut Tape<f32>, p: Binding, x: Var) -> Result<Var> {
        let (g, b) = (p.var(tape, self.gamma), p.var(tape, self.beta));
        let y = tape.group_norm(x, g, b, NORM_GROUPS, NORM_EPS)?;
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    update: (usize, usize),
    reset: (usize, usize),
    candidate: (usize, usize),
}

impl Gru {
    pub fn step(&self, tape: &mut Tape<f32>, p: Binding, state: Var, input: Var) -> Result<Var> {
        let vars = GruVars {
            update_w: p.var(tape, self.update.0),
            update_b: p.var(tape, self.update.1),
            reset_w: p.var(tape, self.reset.0),
            reset_b: p.var(tape, self.reset.1),
            cand_w: p.var(tape, self.candidate.0),
            cand_b: p.var(tape, self.candidate.1),
        };
        conv_gru_step(tape, state, input, &vars)
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![
            self.update.0,
            self.update.1,
            self.reset.0,
            self.reset.1,
            self.candidate.0,
            self.candidate.1,
        ]
    }
}

/// Downsampling block: strided conv, norm, conv, norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub down: Conv,
    pub down_norm: Norm,
    pub mix: Conv,
    pub mix_norm: Norm,
}

impl Encoder {
    pub fn new(f: &mut ParamFactory, cin: usize, hidden: usize) -> Self {
        Encoder {
            down: f.conv("conv1", cin, hidden, 2, InitKind::He),
            down_norm: f.norm("norm1", hidden),
            mix: f.conv("conv2", hidden, hidden, 1, InitKind::He),
            mix_norm: f.norm("norm2", hidden),
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: Binding, x: Var) -> Result<Var> {
        let y = self.down.forward(tape, p, x)?;
        let y = self.down_norm.forward_act(tape, p, y)?;
        let y = self.mix.forward(tape, p, y)?;
        self.mix_norm.forward_act(tape, p, y)
    }

    pub fn frozen(&self, p: Binding) -> bool {
        let slots: Vec<usize> = [
            self.down.slots(),
            self.down_norm.slots(),
            self.mix.slots(),
            self.mix_norm.slots(),
        ]
        .concat();
        p.all_frozen(&slots)
    }
}

/// Upsampling block: conv over `[h, u]`, norm, transposed conv, norm, head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: Conv,
    pub fuse_norm: Norm,
    pub up: ConvTranspose,
    pub up_norm: Norm,
    pub head: Conv,
    /// The head emits pixels through a sigmoid.
    pub to_pixels: bool,
}

impl Decoder {
    pub fn new(f: &mut ParamFactory, hidden: usize, latent: usize, out: usize, to_pixels: bool) -> Self {
        Decoder {
            fuse: f.conv("conv1", hidden + latent, hidden, 1, InitKind::He),
            fuse_norm: f.norm("norm1", hidden),
            up: f.conv_transpose("up", hidden, hidden),
            up_norm: f.norm("norm2", hidden),
            head: f.conv("head", hidden, out, 1, InitKind::Zero),
            to_pixels,
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: Binding, h: Var, u: Var) -> Result<Var> {
        let x = tape.concat_channels(&[h, u])?;
        let y = self.fuse.forward(tape, p, x)?;
        let y = self.fuse_norm.forward_act(tape, p, y)?;
        let y = self.up.forward(tape, p, y)?;
        let y = self.up_norm.forward_act(tape, p, y)?;
        let y = self.head.forward(tape, p, y)?;
        if self.to_pixels {
            tape.sigmoid(y)
        } else {
            Ok(y)
        }
    }
}

/// Recurrent prior over the next latent: mean and softplus scale heads. The
/// recurrent state has the latent's width, a downsized view of `h`.
#[derive(Clone, Debug)]
pub struct PriorNet {
    pub cell: Gru,
    pub mean_head: Conv,
    pub scale_head: Conv,
}

impl PriorNet {
    pub fn new(f: &mut ParamFactory, hidden: usize, latent: usize, action_dim: usize) -> Self {
        PriorNet {
            cell: f.gru("cell", hidden + action_dim, latent),
            mean_head: f.conv("mean", latent, latent, 1, InitKind::Zero),
            scale_head: f.conv("scale", latent, latent, 1, InitKind::Zero),
        }
    }
}

/// Recurrent posterior over the next latent: mean head only, the scale is fixed.
#[derive(Clone, Debug)]
pub struct PosteriorNet {
    pub cell: Gru,
    pub mean_head: Conv,
}

impl PosteriorNet {
    pub fn new(f: &mut ParamFactory, hidden: usize, latent: usize) -> Self {
        PosteriorNet {
            cell: f.gru("cell", hidden, latent),
            mean_head: f.conv("mean", latent, latent, 1, InitKind::Zero),
        }
    }
}
