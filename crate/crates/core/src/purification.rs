//! Orthogonal projection purification and the speaker / SNR classifiers.

use rand::Rng;

use crate::error::Result;
use crate::layers::{Ctx, Linear};
use crate::substrate::{Graph, ParamStore, Tensor, Var};

/// Representations of one forward pass. Without the projection branch
/// `h_alpha` and `h_beta_star` are absent and `h_gamma` is `h_beta`.
#[derive(Clone, Debug)]
pub struct RepBundle {
    pub h_alpha: Option<Var>,
    pub h_beta: Var,
    pub h_beta_star: Option<Var>,
    pub h_gamma: Var,
    pub mask: Vec<bool>,
}

/// Per frame, the component of `h_beta` along `h_alpha`; zero where
/// `h_alpha` is (numerically) zero.
pub fn project_onto(g: &mut Graph, h_beta: Var, h_alpha: Var) -> Result<Var> {
    g.project_rows(h_beta, h_alpha)
}

/// `h_beta - h_beta_star`.
pub fn purify(g: &mut Graph, h_beta: Var, h_beta_star: Var) -> Result<Var> {
    g.sub(h_beta, h_beta_star)
}

/// Plain-tensor `(h_beta_star, h_gamma)`.
pub fn decompose(h_beta: &Tensor, h_alpha: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::no_grad();
    let b = g.constant(h_beta.clone());
    let a = g.constant(h_alpha.clone());
    let star = project_onto(&mut g, b, a)?;
    let gamma = purify(&mut g, b, star)?;
    Ok((g.value(star).clone(), g.value(gamma).clone()))
}

/// Masked mean pool, then two linear layers with ReLU between.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, n_classes, rng)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.out.d_out
    }

    /// Log-probabilities `[1, n_classes]`.
    pub fn log_probs(&self, g: &mut Graph, ctx: &Ctx, h: Var, mask: &[bool]) -> Result<Var> {
        let pooled = g.masked_mean_rows(h, mask)?;
        let z = self.hidden.forward(g, ctx, pooled)?;
        let z = g.relu(z)?;
        let logits = self.out.forward(g, ctx, z)?;
        g.log_softmax(logits)
    }

    /// Probability vector over classes, evaluated without gradients.
    pub fn probs(&self, store: &ParamStore, h: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let hv = g.constant(h.clone());
        let lp = self.log_probs(&mut g, &Ctx::eval(store), hv, mask)?;
        Ok(g.value(lp).data().iter().map(|v| v.exp()).collect())
    }
}

/// Speaker distribution from `h_alpha`.
pub fn classify_speaker(head: &ClassifierHead, store: &ParamStore, h_alpha: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    head.probs(store, h_alpha, mask)
}

/// Distribution over the five SNR classes, ordered as `SnrLevel::ALL`.
pub fn classify_snr(head: &ClassifierHead, store: &ParamStore, h_alpha: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    head.probs(store, h_alpha, mask)
}
