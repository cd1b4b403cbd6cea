//! PSNR and SSIM, best-of-S evaluation, and mean ± standard error reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::rollout::{rollout_with, LatentSource, RolloutInput, RolloutMode};
use crate::model::{GhvaeStack, LatentSampler};
use crate::seed;
use crate::tensor::Tensor;

/// Reported for identical frames in place of +inf.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `10 log10(max_val^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sums over every valid window position.
fn filter(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| kernel[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| kernel[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian window positions of `[H, W, C]`
/// frames with values in `[0, 1]`, averaged over channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::invalid("ssim", format!("expected [H, W, C], got {s:?}")));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("frame {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let kernel = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for c in 0..ch {
        let plane = |t: &Tensor<f32>| -> Vec<f64> { t.data().iter().skip(c).step_by(ch).map(|&v| v as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, h, w, &kernel), filter(&y, h, w, &kernel));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &kernel), filter(&yy, h, w, &kernel), filter(&xy, h, w, &kernel));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(N)`; 0 for a single value.
    pub std_error: f64,
}

impl MetricReport {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Data("a metric report needs at least one value".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(MetricReport {
            metric: metric.into(),
            values,
            mean,
            std_error,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub context: usize,
    pub horizon: usize,
    /// Rollouts per episode; each metric keeps the best.
    pub samples: usize,
    pub seed: u64,
    pub mode: RolloutMode,
    pub source: LatentSource,
    /// Episodes evaluated together in one batched rollout.
    pub episodes_per_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context: 2,
            horizon: 10,
            samples: 10,
            seed: 0,
            mode: RolloutMode::Test,
            source: LatentSource::LearnedPrior,
            episodes_per_batch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: EvalConfig,
    pub episodes: usize,
    pub psnr: MetricReport,
    pub ssim: MetricReport,
}

/// Per-episode best-of-S scores, where one rollout's score is its mean over
/// predicted frames.
pub fn evaluate(stack: &GhvaeStack, episodes: &[Episode], cfg: &EvalConfig) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Data("no episodes to evaluate".into()));
    }
    if cfg.samples == 0 || cfg.context == 0 || cfg.episodes_per_batch == 0 {
        return Err(Error::Config("samples, context and episodes_per_batch must be at least 1".into()));
    }
    let need = cfg.context + cfg.horizon;
    if let Some(e) = episodes.iter().find(|e| e.len() < need) {
        return Err(Error::Data(format!(
            "horizon {} after {} context frames exceeds an episode of {} frames",
            cfg.horizon,
            cfg.context,
            e.len()
        )));
    }
    let chunks: Vec<(usize, &[Episode])> = episodes.chunks(cfg.episodes_per_batch).enumerate().collect();
    let scores: Vec<Vec<(f64, f64)>> = chunks
        .par_iter()
        .map(|&(i, chunk)| score_chunk(stack, chunk, cfg, seed::derive(cfg.seed, i as u64)))
        .collect::<Result<_>>()?;
    let (psnrs, ssims): (Vec<f64>, Vec<f64>) = scores.into_iter().flatten().unzip();
    Ok(EvalReport {
        protocol: *cfg,
        episodes: episodes.len(),
        psnr: MetricReport::from_values("psnr", psnrs)?,
        ssim: MetricReport::from_values("ssim", ssims)?,
    })
}

/// Rows `e * samples + s` replicate episode `e` for sample `s`.
fn replicate(items: &[Tensor<f32>], samples: usize) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(items.len() * samples);
    for t in items {
        for _ in 0..samples {
            rows.push(t.clone());
        }
    }
    Tensor::stack(&rows)
}

/// `cfg.samples` rollouts of every episode in `chunk`, batched together.
/// Entry `t` of the result is `[E * samples, H, W, C]` with row `e * samples + s`
/// holding sample `s` of episode `e`.
pub fn sample_rollouts(stack: &GhvaeStack, chunk: &[Episode], cfg: &EvalConfig, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let s = cfg.samples;
    let at = |t: usize| -> Result<Tensor<f32>> {
        replicate(&chunk.iter().map(|e| e.frame(t)).collect::<Vec<_>>(), s)
    };
    let context: Vec<Tensor<f32>> = (0..cfg.context).map(at).collect::<Result<_>>()?;
    let future: Vec<Tensor<f32>> = (cfg.context..cfg.context + cfg.horizon).map(at).collect::<Result<_>>()?;
    let actions: Option<Vec<Tensor<f32>>> = if stack.config.action_dim > 0 {
        let mut acts = Vec::new();
        for t in 0..cfg.context + cfg.horizon - 1 {
            let rows: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|e| {
                    e.actions
                        .as_ref()
                        .map(|a| a.index_axis0(t))
                        .ok_or_else(|| Error::Data("the model takes actions; the episode has none".into()))
                })
                .collect::<Result<_>>()?;
            acts.push(replicate(&rows, s)?);
        }
        Some(acts)
    } else {
        None
    };
    let input = RolloutInput {
        context: &context,
        actions: actions.as_deref(),
        future: Some(&future),
    };
    let mut sampler = LatentSampler::new(seed);
    rollout_with(stack, input, cfg.horizon, cfg.mode, cfg.source, &mut sampler)
}

fn score_chunk(stack: &GhvaeStack, chunk: &[Episode], cfg: &EvalConfig, seed: u64) -> Result<Vec<(f64, f64)>> {
    let s = cfg.samples;
    let preds = sample_rollouts(stack, chunk, cfg, seed)?;
    let mut out = Vec::with_capacity(chunk.len());
    for e in 0..chunk.len() {
        let (mut best_psnr, mut best_ssim) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in 0..s {
            let row = e * s + k;
            let (mut p, mut q) = (0.0, 0.0);
            for (t, pred) in preds.iter().enumerate() {
                let (x, y) = (pred.index_axis0(row), chunk[e].frame(cfg.context + t));
                p += psnr(&x, &y, 1.0)?;
                q += ssim(&x, &y)?;
            }
            best_psnr = best_psnr.max(p / cfg.horizon as f64);
            best_ssim = best_ssim.max(q / cfg.horizon as f64);
        }
        out.push((best_psnr, best_ssim));
    }
    Ok(out)
}

impl EvalReport {
    /// Aligned columns: metric, mean ± standard error, N.
    pub fn table(&self) -> String {
        let rows = [&self.psnr, &self.ssim];
        let mut out = format!(
            "protocol: best-of-{} over {} episodes, {} context frames, horizon {}, {:?} rollouts, {:?}\n",
            self.protocol.samples, self.episodes, self.protocol.context, self.protocol.horizon,
            self.protocol.mode, self.protocol.source
        );
        out.push_str(&format!("{:<8} {:>24} {:>6}\n", "metric", "mean ± standard error", "N"));
        for r in rows {
            let cell = format!("{:.4} ± {:.4}", r.mean, r.std_error);
            out.push_str(&format!("{:<8} {:>24} {:>6}\n", r.metric, cell, r.values.len()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(vec![16, 16, 1], v)
    }

    #[test]
    fn psnr_units() {
        let a = frame(|_| 0.5);
        let b = frame(|_| 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_units() {
        let a = frame(|i| ((i * 37) % 11) as f32 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (zero, one) = (frame(|_| 0.0), frame(|_| 1.0));
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-12);
        let b = frame(|i| ((i * 13) % 7) as f32 / 6.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = Tensor::zeros(vec![8, 8, 1]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn aggregation() {
        let r = MetricReport::from_values("x", vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mean, 2.0);
        assert!((r.std_error - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MetricReport::from_values("x", vec![5.0]).unwrap().std_error, 0.0);
        assert!(MetricReport::from_values("x", vec![]).is_err());
    }
}
