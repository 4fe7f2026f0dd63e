//! Contrastive log-ratio upper bound of mutual information with a learned
//! diagonal-Gaussian conditional `q(h_gamma | h_beta_star)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::layers::{Ctx, Linear};
use crate::substrate::{diag_gaussian_log_density, Adam, Graph, ParamStore, Tensor, Var};

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;
const DEPTH: usize = 5;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and log-variance networks, each five linear layers with ReLU
/// between, plus their own optimizer.
#[derive(Clone, Debug)]
pub struct ApproxNet {
    pub store: ParamStore,
    pub mean: Vec<Linear>,
    pub logvar: Vec<Linear>,
    pub opt: Adam,
    pub lr: f64,
}

impl ApproxNet {
    pub fn new(d: usize, hidden: usize, lr: f64, seed: u64) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return invalid("approximation network needs positive widths");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut mlp = |name: &str, store: &mut ParamStore| -> Result<Vec<Linear>> {
            (0..DEPTH)
                .map(|i| {
                    let d_in = if i == 0 { d } else { hidden };
                    let d_out = if i == DEPTH - 1 { d } else { hidden };
                    Linear::new(store, &format!("{name}.{i}"), d_in, d_out, &mut rng)
                })
                .collect()
        };
        let mean = mlp("q_mean", &mut store)?;
        let logvar = mlp("q_logvar", &mut store)?;
        Ok(Self {
            store,
            mean,
            logvar,
            opt: Adam::transformer(),
            lr,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean[0].d_in
    }

    /// `(mean, logvar)` rows for condition rows `cond: [T, d]`.
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, cond: Var) -> Result<(Var, Var)> {
        let run = |g: &mut Graph, layers: &[Linear]| -> Result<Var> {
            let mut h = cond;
            for (i, l) in layers.iter().enumerate() {
                h = l.forward(g, ctx, h)?;
                if i + 1 < layers.len() {
                    h = g.relu(h)?;
                }
            }
            Ok(h)
        };
        let mu = run(g, &self.mean)?;
        let lv = run(g, &self.logvar)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, lv))
    }

    /// `log q(x | cond)` for one frame.
    pub fn q_log_density(&self, x: &[f64], cond: &[f64]) -> Result<f64> {
        if x.len() != cond.len() || x.len() != self.dim() {
            return invalid(format!(
                "frame of {} and condition of {} for a {}-d network",
                x.len(),
                cond.len(),
                self.dim()
            ));
        }
        let mut g = Graph::no_grad();
        let c = g.constant(Tensor::row(cond));
        let (mu, lv) = self.forward(&mut g, &Ctx::frozen(&self.store), c)?;
        Ok(diag_gaussian_log_density(x, g.value(mu).data(), g.value(lv).data()))
    }

    /// Mean over samples of the frame-averaged positive log-likelihood.
    pub fn log_likelihood(&self, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let ll = self.positive_ll(&mut g, &Ctx::frozen(&self.store), pairs)?;
        Ok(g.value(ll).item())
    }

    fn positive_ll(&self, g: &mut Graph, ctx: &Ctx, pairs: &[(Tensor, Tensor)]) -> Result<Var> {
        if pairs.is_empty() {
            return invalid("no samples");
        }
        // each frame weighted so samples count equally
        let mut weights = Vec::new();
        for (x, cond) in pairs {
            if x.shape() != cond.shape() || x.rows() == 0 {
                return invalid(format!("sample shapes {:?} and {:?}", x.shape(), cond.shape()));
            }
            let w = 1.0 / (x.rows() * pairs.len()) as f64;
            weights.extend(std::iter::repeat_n(w, x.len()));
        }
        let d = pairs[0].0.cols();
        let rows = weights.len() / d;
        let stack = |sel: fn(&(Tensor, Tensor)) -> &Tensor| -> Result<Tensor> {
            let data = pairs.iter().flat_map(|p| sel(p).data().iter().copied()).collect();
            Tensor::new(vec![rows, d], data)
        };
        let x = g.constant(stack(|p| &p.0)?);
        let c = g.constant(stack(|p| &p.1)?);
        let w = g.constant(Tensor::new(vec![rows, d], weights)?);
        let (mu, lv) = self.forward(g, ctx, c)?;
        let diff = g.sub(x, mu)?;
        let sq = g.mul(diff, diff)?;
        let neg = g.scale(lv, -1.0)?;
        let prec = g.exp(neg)?;
        let maha = g.mul(sq, prec)?;
        let terms = g.add(maha, lv)?;
        let weighted = g.mul(terms, w)?;
        let total = g.sum(weighted)?;
        let ll = g.scale(total, -0.5)?;
        let norm = g.constant(Tensor::scalar(-0.5 * LN_2PI * d as f64));
        g.add(ll, norm)
    }

    /// `n_steps` ascent steps on the positive log-likelihood of
    /// `(h_gamma, h_beta_star)` pairs; returns the likelihood before the last
    /// update (or the current one when `n_steps == 0`).
    pub fn train_q(&mut self, pairs: &[(Tensor, Tensor)], n_steps: usize) -> Result<f64> {
        if n_steps == 0 {
            return self.log_likelihood(pairs);
        }
        let mut last = 0.0;
        for _ in 0..n_steps {
            let grads = {
                let mut g = Graph::new();
                let ll = self.positive_ll(&mut g, &Ctx::eval(&self.store), pairs)?;
                last = g.value(ll).item();
                let loss = g.scale(ll, -1.0)?;
                g.backward(loss)?
            };
            self.opt.step(&mut self.store, &grads, self.lr);
        }
        Ok(last)
    }

    /// CLUB estimate over samples `(h_gamma_i, h_beta_star_i)`: the mean of
    /// positive log-densities minus the mean over all pairs, with frames
    /// aligned up to the shorter sample. The network is frozen; gradients
    /// flow into the representations.
    pub fn estimate_mi(&self, g: &mut Graph, samples: &[(Var, Var)]) -> Result<Var> {
        let n = samples.len();
        if n < 2 {
            return invalid(format!("mutual information needs at least 2 samples, got {n}"));
        }
        let mut spans = Vec::with_capacity(n);
        let mut start = 0;
        for &(x, c) in samples {
            if g.shape(x) != g.shape(c) {
                return invalid(format!("sample shapes {:?} and {:?}", g.shape(x), g.shape(c)));
            }
            let t = g.shape(x)[0];
            spans.push((start, t));
            start += t;
        }
        let xs: Vec<Var> = samples.iter().map(|s| s.0).collect();
        let cs: Vec<Var> = samples.iter().map(|s| s.1).collect();
        let x = g.concat_rows(&xs)?;
        let c = g.concat_rows(&cs)?;
        let (mu, lv) = self.forward(g, &Ctx::frozen(&self.store), c)?;
        let m = g.pairwise_gaussian_log_density(x, mu, lv, &spans)?;
        let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        let pos = g.select(m, &diag)?;
        let pos = g.mean(pos)?;
        let all = g.mean(m)?;
        g.sub(pos, all)
    }

    /// [`estimate_mi`](Self::estimate_mi) on plain tensors.
    pub fn estimate_mi_value(&self, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<(Var, Var)> = pairs
            .iter()
            .map(|(x, c)| (g.constant(x.clone()), g.constant(c.clone())))
            .collect();
        let mi = self.estimate_mi(&mut g, &vars)?;
        Ok(g.value(mi).item())
    }
}
