//! Peak training memory of greedy versus end-to-end training.
//!
//! A [`StackDescription`] lists, per module, the parameter count and the
//! activation elements each block leaves on the tape for one sample. Costs are
//! composed with the schedule of a training step: encoders run on every frame,
//! recurrent cells on every transition, and heads and decoders on every scored
//! step. Greedy phase `k` keeps module `k`'s activations and the frozen
//! decoders on the gradient path, but only the outputs of frozen encoders.
//! Gradients and Adam's two moments cover trainable parameters only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Episode};
use crate::distributions::{gaussian_log_prob, kl_divergence, sample_reparam, DiagonalGaussian};
use crate::error::{Error, Result};
use crate::model::forward::{posterior_cell, posterior_heads, prior_cell, prior_heads};
use crate::model::{greedy_phase_elbo, GhvaeStack, Horizon, ImageSpec, Ladder, LatentSampler, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Per-sample element counts of one module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub level: usize,
    pub params: usize,
    /// Size of this level's hidden features, the handoff to the next encoder.
    pub hidden: usize,
    /// Size of one latent sample, also the width of the recurrent states.
    pub latent: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub prior_cell: usize,
    pub prior_heads: usize,
    pub posterior_cell: usize,
    pub posterior_heads: usize,
    /// Latent sampling, KL and log-likelihood of this level's objective.
    pub objective: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDescription {
    /// Elements of one input frame.
    pub pixels: usize,
    pub modules: Vec<ModuleCost>,
}

/// How often each block runs per sample in one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub frames: usize,
    pub transitions: usize,
    pub scored: usize,
}

impl Schedule {
    pub fn of(h: Horizon) -> Self {
        Schedule {
            frames: h.window(),
            transitions: h.window() - 1,
            scored: h.horizon,
        }
    }

    /// Every block runs `t` times.
    pub fn uniform(t: usize) -> Self {
        Schedule {
            frames: t,
            transitions: t,
            scored: t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MemMode {
    Greedy { phase: usize },
    E2e,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemBreakdown {
    pub mode: MemMode,
    pub dtype_bytes: usize,
    pub params_bytes: usize,
    pub grads_bytes: usize,
    pub optimizer_bytes: usize,
    pub activations_bytes: usize,
    pub total_bytes: usize,
}

impl MemBreakdown {
    pub fn total_elements(&self) -> usize {
        self.total_bytes / self.dtype_bytes
    }
}

/// Probe every block of `stack` with one sample and record what it retains.
pub fn describe(stack: &GhvaeStack) -> Result<StackDescription> {
    let modules = (1..=stack.depth()).map(|k| probe_module(stack, k)).collect::<Result<_>>()?;
    Ok(StackDescription {
        pixels: stack.image.pixels(),
        modules,
    })
}

/// The same counts as [`describe`], computed from shapes alone so that
/// ladders too large to instantiate can be costed.
pub fn describe_ladder(ladder: &Ladder, config: &ModelConfig) -> StackDescription {
    let img = ladder.image;
    let taps = config.kernel_size * config.kernel_size;
    let action_dim = config.action_dim;
    let conv = |cin: usize, cout: usize| taps * cin * cout + cout;
    let gru = |input: usize, state: usize| 3 * conv(input + state, state);
    let modules = ladder
        .levels
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let k = i + 1;
            let (c, z, a) = (spec.hidden_channels, spec.latent_channels, action_dim);
            let s = spec.height * spec.width;
            let (below, cin) = match i {
                0 => (img.height * img.width, img.channels),
                _ => {
                    let l = ladder.levels[i - 1];
                    (l.height * l.width, l.hidden_channels)
                }
            };
            let out = ladder.decoder_output_channels(k);
            let head = below * out * if k == 1 { 2 } else { 1 };
            let gru_acts = |input: usize| 10 * s * z + 2 * s * (input + z);
            let prior_input = if a > 0 { s * a + s * (c + a) } else { 0 };
            ModuleCost {
                level: k,
                params: conv(cin, c) + conv(c, c) + 4 * c
                    + conv(c + z, c) + conv(c, c) + conv(c, out) + 4 * c
                    + gru(c + a, z) + 2 * conv(z, z)
                    + gru(c, z) + conv(z, z),
                hidden: s * c,
                latent: s * z,
                encoder: 6 * s * c,
                decoder: s * (c + z) + 3 * s * c + 3 * below * c + head,
                prior_cell: prior_input + gru_acts(c + a),
                prior_heads: 4 * s * z,
                posterior_cell: gru_acts(c),
                posterior_heads: s * z,
                objective: 18 * s * z + 2 * img.pixels() + 4,
            }
        })
        .collect();
    StackDescription {
        pixels: img.pixels(),
        modules,
    }
}

fn leaf(tape: &mut Tape<f32>, shape: Vec<usize>) -> crate::tensor::Var {
    tape.leaf(Tensor::zeros(shape), true)
}

fn probe_module(stack: &GhvaeStack, k: usize) -> Result<ModuleCost> {
    let m = stack.module(k);
    let spec = m.spec;
    let input_shape = if k == 1 {
        let i = stack.image;
        vec![1, i.height, i.width, i.channels]
    } else {
        stack.module(k - 1).spec.hidden_shape(1)
    };
    let measure = |f: &dyn Fn(&mut Tape<f32>) -> Result<()>| -> Result<usize> {
        let mut tape = Tape::new();
        f(&mut tape)?;
        Ok(tape.retained_elements())
    };
    let hidden = spec.hidden_shape(1);
    let latent = spec.latent_shape(1);
    let hidden_numel: usize = hidden.iter().product();
    let latent_numel = spec.latent_numel();
    let adim = stack.config.action_dim;
    let action = |tape: &mut Tape<f32>| (adim > 0).then(|| leaf(tape, vec![1, adim]));

    let encoder = measure(&|t| {
        let x = leaf(t, input_shape.clone());
        m.encoder.forward(t, m.binding(), x).map(drop)
    })? - input_shape.iter().product::<usize>();
    let decoder = measure(&|t| {
        let h = leaf(t, hidden.clone());
        let u = leaf(t, latent.clone());
        m.decoder.forward(t, m.binding(), h, u).map(drop)
    })? - hidden_numel
        - latent_numel;
    let prior_cell_n = measure(&|t| {
        let s = leaf(t, latent.clone());
        let h = leaf(t, hidden.clone());
        let a = action(t);
        prior_cell(stack, t, k, s, h, a).map(drop)
    })? - latent_numel
        - hidden_numel
        - adim;
    let prior_heads_n = measure(&|t| {
        let s = leaf(t, latent.clone());
        prior_heads(stack, t, k, s).map(drop)
    })? - latent_numel;
    let posterior_cell_n = measure(&|t| {
        let s = leaf(t, latent.clone());
        let h = leaf(t, hidden.clone());
        posterior_cell(stack, t, k, s, h, crate::model::ExecMode::Train).map(drop)
    })? - latent_numel
        - hidden_numel;
    let posterior_heads_n = measure(&|t| {
        let s = leaf(t, latent.clone());
        posterior_heads(stack, t, k, s).map(drop)
    })? - latent_numel;
    // Concatenated head outputs, the noise, the sample, the KL and the
    // log-likelihood of one scored frame.
    let pixels = stack.image.pixels();
    let image_shape = {
        let i = stack.image;
        vec![1, i.height, i.width, i.channels]
    };
    let objective = measure(&|t| {
        let pm = leaf(t, latent.clone());
        let ps = t.leaf(Tensor::full(latent.clone(), 1.0), true);
        let qm = leaf(t, latent.clone());
        let pm = t.concat_batch(&[pm])?;
        let ps = t.concat_batch(&[ps])?;
        let qm = t.concat_batch(&[qm])?;
        let p = DiagonalGaussian {
            mean: pm,
            std: crate::distributions::Std::Learned(ps),
        };
        let q = DiagonalGaussian::fixed(qm, stack.config.sigma_post)?;
        sample_reparam(t, &q, Tensor::zeros(latent.clone()))?;
        kl_divergence(t, &q, &p)?;
        let target = t.constant(Tensor::zeros(image_shape.clone()));
        let pred = leaf(t, image_shape.clone());
        gaussian_log_prob(t, target, pred, stack.config.sigma_dec).map(drop)
    })? - 3 * latent_numel
        - 2 * pixels;
    Ok(ModuleCost {
        level: k,
        params: m.params.numel(),
        hidden: hidden_numel,
        latent: latent_numel,
        encoder,
        decoder,
        prior_cell: prior_cell_n,
        prior_heads: prior_heads_n,
        posterior_cell: posterior_cell_n,
        posterior_heads: posterior_heads_n,
        objective,
    })
}

/// Activation elements per sample when training module `top` of a stack
/// truncated to `top` levels; `all_encoders` keeps every encoder's internals.
fn activations_per_sample(desc: &StackDescription, top: usize, all_encoders: bool, s: Schedule) -> usize {
    let mods = &desc.modules[..top];
    let m = mods[top - 1];
    let encoders: usize = if all_encoders {
        mods.iter().map(|c| c.encoder).sum()
    } else {
        m.encoder + mods[..top - 1].iter().map(|c| c.hidden).sum::<usize>()
    };
    let decoders: usize = mods.iter().map(|c| c.decoder).sum();
    let features: usize = mods.iter().map(|c| c.hidden).sum();
    s.frames * (desc.pixels + encoders)
        + s.transitions * (m.prior_cell + m.posterior_cell + 2 * m.hidden)
        + s.scored * (m.prior_heads + m.posterior_heads + m.objective + decoders + features + desc.pixels)
        + 2 * m.latent
}

pub fn estimate(
    desc: &StackDescription,
    mode: MemMode,
    batch: usize,
    schedule: Schedule,
    dtype_bytes: usize,
) -> Result<MemBreakdown> {
    let depth = desc.modules.len();
    let (top, trainable, all_encoders) = match mode {
        MemMode::Greedy { phase } => {
            if phase == 0 || phase > depth {
                return Err(Error::invalid(
                    "estimate",
                    format!("no module {phase} in a {depth}-level description"),
                ));
            }
            (phase, desc.modules[phase - 1].params, false)
        }
        MemMode::E2e => {
            if depth == 0 {
                return Err(Error::invalid("estimate", "empty description"));
            }
            (depth, desc.modules.iter().map(|c| c.params).sum(), true)
        }
    };
    let params: usize = desc.modules[..top].iter().map(|c| c.params).sum();
    let acts = batch * activations_per_sample(desc, top, all_encoders, schedule);
    let (p, g, o, a) = (params, trainable, 2 * trainable, acts);
    Ok(MemBreakdown {
        mode,
        dtype_bytes,
        params_bytes: p * dtype_bytes,
        grads_bytes: g * dtype_bytes,
        optimizer_bytes: o * dtype_bytes,
        activations_bytes: a * dtype_bytes,
        total_bytes: (p + g + o + a) * dtype_bytes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SavingsRow {
    pub depth: usize,
    pub e2e_bytes: usize,
    pub greedy_peak_bytes: usize,
    /// Phase at which greedy training peaks.
    pub peak_phase: usize,
    /// `(e2e - greedy_peak) / e2e`.
    pub savings: f64,
}

/// Greedy phases run one after another, so their peak is the max over phases.
pub fn savings(desc: &StackDescription, batch: usize, schedule: Schedule, dtype_bytes: usize) -> Result<SavingsRow> {
    let e2e = estimate(desc, MemMode::E2e, batch, schedule, dtype_bytes)?;
    let mut peak = (0, 0);
    for k in 1..=desc.modules.len() {
        let g = estimate(desc, MemMode::Greedy { phase: k }, batch, schedule, dtype_bytes)?;
        if g.total_bytes > peak.0 {
            peak = (g.total_bytes, k);
        }
    }
    Ok(SavingsRow {
        depth: desc.modules.len(),
        e2e_bytes: e2e.total_bytes,
        greedy_peak_bytes: peak.0,
        peak_phase: peak.1,
        savings: (e2e.total_bytes as f64 - peak.0 as f64) / e2e.total_bytes as f64,
    })
}

/// Ladder of `depth` levels over a 64x64 RGB image: hidden channels double
/// from 4 per level and latents take a quarter of them.
pub fn default_family(depth: usize) -> Result<Ladder> {
    let image = ImageSpec {
        height: 64,
        width: 64,
        channels: 3,
    };
    let channels: Vec<(usize, usize)> = (0..depth).map(|i| (4 << i, 1 << i)).collect();
    Ladder::from_channels(image, &channels)
}

/// Batch and window the savings curve is reported at by default: one sample,
/// two context frames, ten predicted frames.
pub const DEFAULT_BATCH: usize = 1;
pub const DEFAULT_WINDOW: Horizon = Horizon { context: 2, horizon: 10 };

/// Savings for every depth in `depths`, each stack built by `family`.
pub fn savings_curve(
    family: impl Fn(usize) -> Result<Ladder>,
    depths: std::ops::RangeInclusive<usize>,
    config: ModelConfig,
    batch: usize,
    schedule: Schedule,
    dtype_bytes: usize,
) -> Result<Vec<SavingsRow>> {
    depths
        .map(|k| {
            let ladder = family(k)?;
            savings(&describe_ladder(&ladder, &config), batch, schedule, dtype_bytes)
        })
        .collect()
}

pub fn savings_table(rows: &[SavingsRow]) -> String {
    let mut out = format!("{:>5} {:>14} {:>14} {:>5} {:>8}\n", "K", "e2e bytes", "greedy bytes", "peak", "saved");
    for r in rows {
        out.push_str(&format!(
            "{:>5} {:>14} {:>14} {:>5} {:>7.1}%\n",
            r.depth,
            r.e2e_bytes,
            r.greedy_peak_bytes,
            r.peak_phase,
            100.0 * r.savings
        ));
    }
    out
}

/// Elements actually held by one training step of `mode`: every retained
/// tape buffer plus parameters, gradients and Adam moments.
pub fn census(stack: &GhvaeStack, mode: MemMode, batch: usize, horizon: Horizon, seed: u64) -> Result<usize> {
    let depth = stack.depth();
    let top = match mode {
        MemMode::Greedy { phase } if phase >= 1 && phase <= depth => phase,
        MemMode::Greedy { phase } => {
            return Err(Error::invalid("census", format!("no module {phase} in a {depth}-level stack")))
        }
        MemMode::E2e => depth,
    };
    let mut s = stack.clone();
    s.modules.truncate(top);
    match mode {
        MemMode::Greedy { .. } => {
            for m in &mut s.modules {
                let frozen = m.level() != top;
                m.set_frozen(frozen);
            }
        }
        MemMode::E2e => s.modules.iter_mut().for_each(|m| m.set_frozen(false)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = s.image;
    let len = horizon.window();
    let adim = s.config.action_dim;
    let episodes: Vec<Episode> = (0..batch)
        .map(|_| {
            let frames = Tensor::from_fn(vec![len, img.height, img.width, img.channels], |_| rng.random::<f32>());
            let actions = (adim > 0).then(|| Tensor::from_fn(vec![len - 1, adim], |_| rng.random_range(-1.0..1.0)));
            Episode::new(frames, actions, 0)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Episode> = episodes.iter().collect();
    let b = Batch::from_windows(&refs, &vec![0; batch], len)?;
    let mut tape = Tape::new();
    greedy_phase_elbo(&s, &mut tape, top, &b, horizon, &mut LatentSampler::new(seed))?;
    let params: usize = s.modules.iter().map(|m| m.params.numel()).sum();
    let trainable: usize = s.modules.iter().filter(|m| !m.frozen).map(|m| m.params.numel()).sum();
    Ok(tape.retained_elements() + params + 3 * trainable)
}
