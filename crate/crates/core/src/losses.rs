//! Message and image losses, their weighted composition, and the curriculum
//! that decides when data, corruptions and the log-sum-exp term switch on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, StegoError};
use crate::imaging::ImageTensor;
use crate::message::Message;
use crate::nn::{logsumexp, Graph, Real, Tensor, Var};

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Perceptual image distance.
    pub alpha1: f64,
    /// Image mean squared error.
    pub alpha2: f64,
    /// Log-sum-exp message loss.
    pub alpha3: f64,
    /// Message mean squared error.
    pub alpha4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.5,
            alpha3: 0.1,
            alpha4: 16.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(StegoError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_pred(m_pred: &[f64], m_star: &Message) -> Result<()> {
    if m_pred.len() != m_star.len() {
        return Err(StegoError::invalid(format!(
            "prediction has {} entries, message has {}",
            m_pred.len(),
            m_star.len()
        )));
    }
    if m_pred.iter().any(|v| v.is_nan()) {
        return Err(StegoError::Numeric("NaN in message prediction".into()));
    }
    Ok(())
}

/// `ln Σ exp((m_pred_i − m*_i)²)`, evaluated with the max shift.
pub fn lse_loss(m_pred: &[f64], m_star: &Message) -> Result<f64> {
    check_pred(m_pred, m_star)?;
    let sq: Vec<f64> = m_pred
        .iter()
        .zip(m_star.bits())
        .map(|(&p, &b)| (p - f64::from(b)).powi(2))
        .collect();
    Ok(logsumexp(&sq))
}

/// Gradient of [`lse_loss`] with respect to `m_pred`:
/// `softmax(err²)_i · 2·err_i`.
pub fn lse_loss_grad(m_pred: &[f64], m_star: &Message) -> Result<Vec<f64>> {
    check_pred(m_pred, m_star)?;
    let err: Vec<f64> = m_pred
        .iter()
        .zip(m_star.bits())
        .map(|(&p, &b)| p - f64::from(b))
        .collect();
    let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
    let lse = logsumexp(&sq);
    Ok(err
        .iter()
        .zip(&sq)
        .map(|(e, s)| (s - lse).exp() * 2.0 * e)
        .collect())
}

pub fn message_mse(m_pred: &[f64], m_star: &Message) -> Result<f64> {
    check_pred(m_pred, m_star)?;
    Ok(m_pred
        .iter()
        .zip(m_star.bits())
        .map(|(&p, &b)| (p - f64::from(b)).powi(2))
        .sum::<f64>()
        / m_pred.len() as f64)
}

pub fn image_mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_dims(a, b)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64)
}

pub(crate) fn check_same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(StegoError::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// A perceptual image distance. Implementations that also provide
/// [`PerceptualMetric::graph_loss`] can be trained against.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;

    /// Batched differentiable form over `N × 3 × H × W` inputs, averaged
    /// over the batch. `None` when the metric cannot be differentiated.
    fn graph_loss(&self, _g: &mut Graph<f32>, _a: Var, _b: Var) -> Option<Var> {
        None
    }
}

/// Multi-scale difference energy: at scales 1, 1/2 and 1/4 the mean squared
/// colour difference plus the mean squared horizontal and vertical
/// gradients of the luminance difference. Zero exactly when the images are
/// identical. Not a learned metric.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyPerceptual;

const PROXY_SCALES: usize = 3;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Kernel computing forward differences of luminance along x and y with
/// zero padding beyond the last row and column.
fn luma_gradient_kernel<T: Real>() -> Tensor<T> {
    let mut k = vec![0.0; 2 * 3 * 9];
    for (c, &l) in LUMA.iter().enumerate() {
        let base_x = c * 9;
        k[base_x + 4] = -l;
        k[base_x + 5] = l;
        let base_y = 27 + c * 9;
        k[base_y + 4] = -l;
        k[base_y + 7] = l;
    }
    Tensor::from_f64(&[2, 3, 3, 3], &k)
}

pub fn proxy_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let kernel = g.constant(luma_gradient_kernel());
    let mut diff = g.sub(b, a);
    let mut total: Option<Var> = None;
    for s in 0..PROXY_SCALES {
        if s > 0 {
            diff = g.avg_pool(diff, 2);
        }
        let sq = g.square(diff);
        let colour = g.mean_all(sq);
        let grad = g.conv2d(diff, kernel, None, 1, 1);
        let gsq = g.square(grad);
        // two gradient channels, averaged rather than summed
        let edge = g.mean_all(gsq);
        let edge = g.scale(edge, 2.0);
        let term = g.add(colour, edge);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.expect("at least one scale");
    g.scale(total, 1.0 / PROXY_SCALES as f64)
}

impl PerceptualMetric for ProxyPerceptual {
    fn name(&self) -> &str {
        "perceptual (proxy)"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        check_same_dims(a, b)?;
        let (h, w) = a.dims();
        if h % (1 << (PROXY_SCALES - 1)) != 0 || w % (1 << (PROXY_SCALES - 1)) != 0 {
            return Err(StegoError::invalid("image too small for the perceptual proxy"));
        }
        let mut g = Graph::<f64>::new();
        let va = g.constant(a.to_tensor());
        let vb = g.constant(b.to_tensor());
        let d = proxy_graph(&mut g, va, vb);
        Ok(g.scalar_value(d))
    }

    fn graph_loss(&self, g: &mut Graph<f32>, a: Var, b: Var) -> Option<Var> {
        Some(proxy_graph(g, a, b))
    }
}

/// The metric that always reports zero, for `perceptual = "none"`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoPerceptual;

impl PerceptualMetric for NoPerceptual {
    fn name(&self) -> &str {
        "perceptual (none)"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        check_same_dims(a, b)?;
        Ok(0.0)
    }
}

/// Convenience wrapper around [`ProxyPerceptual`].
pub fn perceptual_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ProxyPerceptual.distance(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    FixedBatch,
    FullData,
    RobustLse,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::FixedBatch => "FIXED_BATCH",
            Phase::FullData => "FULL_DATA",
            Phase::RobustLse => "ROBUST_LSE",
        })
    }
}

/// Starting value of the bit-accuracy moving average, chance level.
pub const EMA_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub phase: Phase,
    pub running_bit_acc: f64,
    pub iteration: u64,
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self {
            phase: Phase::FixedBatch,
            running_bit_acc: EMA_INIT,
            iteration: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumParams {
    pub tau1: f64,
    pub tau2: f64,
    pub ema_decay: f64,
}

impl From<&RunConfig> for CurriculumParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            tau1: c.tau1,
            tau2: c.tau2,
            ema_decay: c.ema_decay,
        }
    }
}

impl CurriculumState {
    /// Folds one batch accuracy into the moving average and promotes at most
    /// one phase.
    pub fn advance(&self, batch_bit_acc: f64, p: CurriculumParams) -> Self {
        let acc = batch_bit_acc.clamp(0.0, 1.0);
        let ema = p.ema_decay * self.running_bit_acc + (1.0 - p.ema_decay) * acc;
        let phase = match self.phase {
            Phase::FixedBatch if ema >= p.tau1 => Phase::FullData,
            Phase::FullData if ema >= p.tau2 => Phase::RobustLse,
            other => other,
        };
        Self {
            phase,
            running_bit_acc: ema,
            iteration: self.iteration + 1,
        }
    }

    /// Whether the log-sum-exp term is part of the loss.
    pub fn lse_active(&self, lse_enabled: bool) -> bool {
        lse_enabled && self.phase == Phase::RobustLse
    }

    pub fn transforms_active(&self, transforms_enabled: bool) -> bool {
        transforms_enabled && self.phase == Phase::RobustLse
    }
}

pub fn advance_curriculum(state: &CurriculumState, batch_bit_acc: f64, config: &RunConfig) -> CurriculumState {
    state.advance(batch_bit_acc, config.into())
}

/// Individual terms of the composite loss, unweighted, and the weighted
/// total. `lse` is `None` while the term is inactive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub perceptual: f64,
    pub image_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lse: Option<f64>,
    pub message_mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(w: &LossWeights, perceptual: f64, image_mse: f64, lse: Option<f64>, message_mse: f64) -> Self {
        let total = w.alpha1 * perceptual
            + w.alpha2 * image_mse
            + lse.map_or(0.0, |v| w.alpha3 * v)
            + w.alpha4 * message_mse;
        Self {
            perceptual,
            image_mse,
            lse,
            message_mse,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.perceptual.is_finite()
            && self.image_mse.is_finite()
            && self.lse.is_none_or(f64::is_finite)
            && self.message_mse.is_finite()
            && self.total.is_finite()
    }
}

/// Composite loss for one image and message with the proxy perceptual
/// term. The log-sum-exp term is included only in [`Phase::RobustLse`].
pub fn total_loss(
    cover: &ImageTensor,
    stego: &ImageTensor,
    m_pred: &[f64],
    m_star: &Message,
    w: &LossWeights,
    state: &CurriculumState,
) -> Result<LossBreakdown> {
    total_loss_with(cover, stego, m_pred, m_star, w, state, &ProxyPerceptual)
}

pub fn total_loss_with(
    cover: &ImageTensor,
    stego: &ImageTensor,
    m_pred: &[f64],
    m_star: &Message,
    w: &LossWeights,
    state: &CurriculumState,
    metric: &dyn PerceptualMetric,
) -> Result<LossBreakdown> {
    let perceptual = if w.alpha1 > 0.0 { metric.distance(cover, stego)? } else { 0.0 };
    let img = image_mse(cover, stego)?;
    let mse = message_mse(m_pred, m_star)?;
    let lse = if state.lse_active(true) { Some(lse_loss(m_pred, m_star)?) } else { None };
    let out = LossBreakdown::compose(w, perceptual, img, lse, mse);
    if !out.is_finite() {
        return Err(StegoError::Numeric(format!("non-finite loss: {out:?}")));
    }
    Ok(out)
}

/// Graph handles of each loss term for a batch.
pub struct GraphLoss {
    pub total: Var,
    pub perceptual: Option<Var>,
    pub image_mse: Var,
    pub lse: Option<Var>,
    pub message_mse: Var,
}

/// Batched composite loss on the tape. `probs` and `targets` are `N × d`;
/// the log-sum-exp is taken per message and averaged over the batch.
pub fn graph_loss(
    g: &mut Graph<f32>,
    cover: Var,
    stego: Var,
    probs: Var,
    targets: Var,
    w: &LossWeights,
    lse_active: bool,
    metric: Option<&dyn PerceptualMetric>,
) -> GraphLoss {
    let d_img = g.sub(stego, cover);
    let sq_img = g.square(d_img);
    let image_mse = g.mean_all(sq_img);
    let d_msg = g.sub(probs, targets);
    let sq_msg = g.square(d_msg);
    let message_mse = g.mean_all(sq_msg);
    let perceptual = match metric {
        Some(m) if w.alpha1 > 0.0 => m.graph_loss(g, cover, stego),
        _ => None,
    };
    let lse = lse_active.then(|| {
        let rows = g.logsumexp_rows(sq_msg);
        g.mean_all(rows)
    });

    let mut total = g.scale(image_mse, w.alpha2);
    let t = g.scale(message_mse, w.alpha4);
    total = g.add(total, t);
    if let Some(p) = perceptual {
        let t = g.scale(p, w.alpha1);
        total = g.add(total, t);
    }
    if let Some(l) = lse {
        let t = g.scale(l, w.alpha3);
        total = g.add(total, t);
    }
    GraphLoss {
        total,
        perceptual,
        image_mse,
        lse,
        message_mse,
    }
}
