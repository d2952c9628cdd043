//! Mask-and-replace discrete diffusion over codebook tokens.
//!
//! A clean token is kept, replaced by a uniformly drawn token, or sent to the
//! absorbing `MASK` state (id `K`). The cumulative laws are linear in `t/T`:
//!
//! ```text
//! keep      ᾱ_t = 1 - t/T
//! mask      γ̄_t = (1 - u) t/T
//! replace   K·β̄_t = u t/T
//! ```
//!
//! so `ᾱ_T = 0` and the `t = T` marginal does not depend on the clean token.
//! All probabilities are computed in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// Codebook size `K`; the mask token has id `K`.
    pub vocab: usize,
    /// Share of the corrupted mass that goes to uniform replacement.
    pub u_replace: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 25,
            vocab: 64,
            u_replace: 0.1,
        }
    }
}

impl ScheduleParams {
    pub fn mask_id(&self) -> usize {
        self.vocab
    }
}

/// Per-step and cumulative transition probabilities for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTables {
    pub params: ScheduleParams,
    pub alpha_bar: Vec<f64>,
    pub gamma_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

const NEG_TOL: f64 = -1e-12;

pub fn build_schedule(p: ScheduleParams) -> Result<ScheduleTables> {
    if p.steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if p.vocab == 0 {
        return Err(Error::InvalidSchedule("vocabulary must be non-empty".into()));
    }
    if !p.u_replace.is_finite() || !(0.0..1.0).contains(&p.u_replace) {
        return Err(Error::InvalidSchedule(format!(
            "u_replace {} outside [0, 1)",
            p.u_replace
        )));
    }
    let t_max = p.steps;
    let k = p.vocab as f64;
    let u = p.u_replace;
    let mut tab = ScheduleTables {
        params: p,
        alpha_bar: Vec::with_capacity(t_max + 1),
        gamma_bar: Vec::with_capacity(t_max + 1),
        beta_bar: Vec::with_capacity(t_max + 1),
        alpha: vec![1.0],
        gamma: vec![0.0],
        beta: vec![0.0],
    };
    for t in 0..=t_max {
        let s = t as f64 / t_max as f64;
        let ab = if t == t_max { 0.0 } else { 1.0 - s };
        let gb = (1.0 - u) * s;
        tab.alpha_bar.push(ab);
        tab.gamma_bar.push(gb);
        tab.beta_bar.push((1.0 - ab - gb) / k);
    }
    for t in 1..=t_max {
        let a = if tab.alpha_bar[t] == 0.0 {
            0.0
        } else {
            tab.alpha_bar[t] / tab.alpha_bar[t - 1]
        };
        let g = 1.0 - (1.0 - tab.gamma_bar[t]) / (1.0 - tab.gamma_bar[t - 1]);
        let b = (1.0 - a - g) / k;
        for (name, v) in [("alpha", a), ("gamma", g), ("beta", b)] {
            if v < NEG_TOL || !v.is_finite() {
                return Err(Error::InvalidSchedule(format!("{name}_{t} = {v} is negative")));
            }
        }
        tab.alpha.push(a.max(0.0));
        tab.gamma.push(g.max(0.0));
        tab.beta.push(b.max(0.0));
    }
    Ok(tab)
}

/// Dense row-major square matrix of transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl ProbMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        ProbMatrix { n, data }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn matmul(&self, other: &ProbMatrix) -> ProbMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * other.at(k, j);
                }
            }
        }
        ProbMatrix { n, data }
    }
}

/// Per-token corruption outcome drawn by [`sample_xt_with_events`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Keep,
    Replace,
    Mask,
}

/// A token sequence tagged with its diffusion time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub t: usize,
}

impl ScheduleTables {
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn vocab(&self) -> usize {
        self.params.vocab
    }

    pub fn mask_id(&self) -> usize {
        self.params.vocab
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside [{lo}, {}]",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// `Q_t[from, to]` for `1 <= t <= T`.
    pub fn step_prob(&self, t: usize, from: usize, to: usize) -> f64 {
        let mask = self.mask_id();
        if from == mask {
            return if to == mask { 1.0 } else { 0.0 };
        }
        if to == mask {
            self.gamma[t]
        } else if to == from {
            self.alpha[t] + self.beta[t]
        } else {
            self.beta[t]
        }
    }

    /// `q(z_t = to | z_0 = from)`, with the mask row absorbing.
    pub fn cumulative_prob(&self, t: usize, from: usize, to: usize) -> f64 {
        let mask = self.mask_id();
        if from == mask {
            return if to == mask { 1.0 } else { 0.0 };
        }
        if to == mask {
            self.gamma_bar[t]
        } else if to == from {
            self.alpha_bar[t] + self.beta_bar[t]
        } else {
            self.beta_bar[t]
        }
    }

    /// One-step `(K+1)×(K+1)` row-stochastic transition matrix.
    pub fn one_step_matrix(&self, t: usize) -> Result<ProbMatrix> {
        self.check_t(t, 1)?;
        let n = self.vocab() + 1;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(self.step_prob(t, i, j));
            }
        }
        Ok(ProbMatrix { n, data })
    }

    /// Closed-form `t`-step transition matrix.
    pub fn cumulative_matrix(&self, t: usize) -> Result<ProbMatrix> {
        self.check_t(t, 0)?;
        let n = self.vocab() + 1;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(self.cumulative_prob(t, i, j));
            }
        }
        Ok(ProbMatrix { n, data })
    }

    /// Forward marginal `q(z_t | z_0 = x0)` over `K+1` states.
    ///
    /// The clean token itself carries `ᾱ_t + β̄_t`: uniform replacement can
    /// redraw it.
    pub fn q_xt_given_x0(&self, x0: usize, t: usize) -> Result<Vec<f64>> {
        self.check_t(t, 0)?;
        if x0 >= self.vocab() {
            return Err(Error::InvalidArgument(format!("clean token {x0} must be < K")));
        }
        Ok((0..=self.vocab())
            .map(|j| self.cumulative_prob(t, x0, j))
            .collect())
    }

    /// `q(z_{t-1} | z_t = xt, z_0 = x0)` by Bayes' rule.
    pub fn posterior(&self, xt: usize, x0: usize, t: usize) -> Result<Vec<f64>> {
        self.check_t(t, 1)?;
        if x0 >= self.vocab() || xt > self.vocab() {
            return Err(Error::InvalidArgument(format!("tokens out of range: xt {xt}, x0 {x0}")));
        }
        let mut p: Vec<f64> = (0..=self.vocab())
            .map(|k| self.step_prob(t, k, xt) * self.cumulative_prob(t - 1, x0, k))
            .collect();
        let z: f64 = p.iter().sum();
        if z <= 0.0 {
            return Err(Error::InvalidState(format!(
                "z_t = {xt} is unreachable from z_0 = {x0} at t = {t}"
            )));
        }
        for v in p.iter_mut() {
            *v /= z;
        }
        Ok(p)
    }

    /// Linear structure of `Σ_x0 p(x0) · posterior(xt, x0, t)` for one position.
    pub fn mixture(&self, xt: usize, t: usize) -> Result<PosteriorMixture> {
        self.check_t(t, 1)?;
        let k = self.vocab();
        if xt > k {
            return Err(Error::InvalidArgument(format!("token {xt} out of range")));
        }
        let (ab_prev, bb_prev, gb_prev) = (
            self.alpha_bar[t - 1],
            self.beta_bar[t - 1],
            self.gamma_bar[t - 1],
        );
        let norm: Vec<f64> = (0..k).map(|x| self.cumulative_prob(t, x, xt)).collect();
        if norm.iter().all(|&z| z <= 0.0) {
            return Err(Error::InvalidState(format!("z_t = {xt} unreachable at t = {t}")));
        }
        let inv: Vec<f64> = norm.iter().map(|&z| if z > 0.0 { 1.0 / z } else { 0.0 }).collect();
        let valid: Vec<f64> = norm.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect();
        let diag = (0..k)
            .map(|j| self.step_prob(t, j, xt) * ab_prev * inv[j])
            .collect();
        let spread = (0..=k)
            .map(|j| {
                let base = if j == k { gb_prev } else { bb_prev };
                self.step_prob(t, j, xt) * base
            })
            .collect();
        Ok(PosteriorMixture {
            diag,
            spread,
            inv_norm: inv,
            valid,
        })
    }
}

/// `m_k = (diag_k p_k + spread_k Σ_x inv_norm_x p_x) / Σ_x valid_x p_x`,
/// the model's reverse transition rebuilt from a clean-token distribution `p`.
///
/// Clean tokens that cannot produce the observed `z_t` are dropped and the
/// remaining mass renormalised.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMixture {
    pub diag: Vec<f64>,
    pub spread: Vec<f64>,
    pub inv_norm: Vec<f64>,
    pub valid: Vec<f64>,
}

impl PosteriorMixture {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let k = self.diag.len();
        let w: f64 = (0..k).map(|x| self.inv_norm[x] * p[x]).sum();
        let s: f64 = (0..k).map(|x| self.valid[x] * p[x]).sum();
        (0..=k)
            .map(|j| {
                let d = if j < k { self.diag[j] * p[j] } else { 0.0 };
                (d + self.spread[j] * w) / s
            })
            .collect()
    }

    /// Pulls `∂L/∂m` back to `∂L/∂p`.
    pub fn backward(&self, p: &[f64], m: &[f64], gm: &[f64]) -> Vec<f64> {
        let k = self.diag.len();
        let s: f64 = (0..k).map(|x| self.valid[x] * p[x]).sum();
        let eg: f64 = self.spread.iter().zip(gm).map(|(a, b)| a * b).sum();
        let mg: f64 = m.iter().zip(gm).map(|(a, b)| a * b).sum();
        (0..k)
            .map(|x| (self.diag[x] * gm[x] + self.inv_norm[x] * eg - self.valid[x] * mg) / s)
            .collect()
    }
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// i.i.d. forward corruption of a clean sequence to time `t`.
pub fn sample_xt(x0: &[usize], t: usize, tables: &ScheduleTables, rng: &mut impl Rng) -> Result<Vec<usize>> {
    Ok(sample_xt_with_events(x0, t, tables, rng)?.0)
}

pub fn sample_xt_with_events(
    x0: &[usize],
    t: usize,
    tables: &ScheduleTables,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<Corruption>)> {
    tables.check_t(t, 0)?;
    let k = tables.vocab();
    if let Some(&bad) = x0.iter().find(|&&x| x >= k) {
        return Err(Error::InvalidArgument(format!("clean sequence contains token {bad} >= K")));
    }
    let keep = tables.alpha_bar[t];
    let mask = tables.gamma_bar[t];
    let mut out = Vec::with_capacity(x0.len());
    let mut ev = Vec::with_capacity(x0.len());
    for &x in x0 {
        if t == 0 {
            out.push(x);
            ev.push(Corruption::Keep);
            continue;
        }
        let r: f64 = rng.gen();
        if r < keep {
            out.push(x);
            ev.push(Corruption::Keep);
        } else if r < keep + mask {
            out.push(k);
            ev.push(Corruption::Mask);
        } else {
            out.push(rng.gen_range(0..k));
            ev.push(Corruption::Replace);
        }
    }
    Ok((out, ev))
}

/// Draw from the `t = T` marginal: mask w.p. `γ̄_T`, else a uniform token.
pub fn prior_sample(len: usize, tables: &ScheduleTables, rng: &mut impl Rng) -> TokenSequence {
    let t = tables.steps();
    let k = tables.vocab();
    let mask = tables.gamma_bar[t];
    let tokens = (0..len)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < mask {
                k
            } else {
                rng.gen_range(0..k)
            }
        })
        .collect();
    TokenSequence { tokens, t }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub elbo: f64,
    pub mlm: f64,
    pub total: f64,
}

const LOG_FLOOR: f64 = 1e-300;

/// Variational + masked-token objective for one sequence.
///
/// `logits` holds `L×K` clean-token scores. The variational term is the mean
/// over positions of `KL(q(z_{t-1}|z_t,z_0) ‖ p_θ(z_{t-1}|z_t))`, which at
/// `t = 1` reduces to `-log p_θ(z_0|z_1)`. The masked-token term is the mean
/// cross-entropy over positions where `z_t ≠ z_0` (zero if there are none).
/// Also returns `∂total/∂logits`.
pub fn stage1_objective_with_grad(
    x0: &[usize],
    t: usize,
    xt: &[usize],
    logits: &[f64],
    tables: &ScheduleTables,
    lambda_mlm: f64,
) -> Result<(ObjectiveTerms, Vec<f64>)> {
    let k = tables.vocab();
    let len = x0.len();
    if xt.len() != len || logits.len() != len * k {
        return Err(Error::ShapeMismatch(format!(
            "objective: {len} clean tokens, {} noisy tokens, {} logits for K = {k}",
            xt.len(),
            logits.len()
        )));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in denoiser logits".into()));
    }
    tables.check_t(t, 1)?;
    let n_corrupt = x0.iter().zip(xt).filter(|(a, b)| a != b).count();
    let mut elbo = 0.0;
    let mut mlm = 0.0;
    let mut grad = vec![0.0; len * k];
    let inv_len = 1.0 / len as f64;
    for i in 0..len {
        let row = &logits[i * k..(i + 1) * k];
        let p = softmax_f64(row);
        let q = tables.posterior(xt[i], x0[i], t)?;
        let mix = tables.mixture(xt[i], t)?;
        let m = mix.apply(&p);
        let mut gm = vec![0.0; k + 1];
        for j in 0..=k {
            if q[j] > 0.0 {
                let mj = m[j].max(LOG_FLOOR);
                elbo += inv_len * q[j] * (q[j].ln() - mj.ln());
                gm[j] = -inv_len * q[j] / mj;
            }
        }
        let gp = mix.backward(&p, &m, &gm);
        if xt[i] != x0[i] {
            let w = lambda_mlm / n_corrupt as f64;
            mlm += -p[x0[i]].max(LOG_FLOOR).ln() / n_corrupt as f64;
            let gl = &mut grad[i * k..(i + 1) * k];
            for j in 0..k {
                gl[j] += w * (p[j] - if j == x0[i] { 1.0 } else { 0.0 });
            }
        }
        let dot: f64 = gp.iter().zip(&p).map(|(a, b)| a * b).sum();
        let gl = &mut grad[i * k..(i + 1) * k];
        for j in 0..k {
            gl[j] += p[j] * (gp[j] - dot);
        }
    }
    let elbo = elbo.max(0.0);
    Ok((
        ObjectiveTerms {
            elbo,
            mlm,
            total: elbo + lambda_mlm * mlm,
        },
        grad,
    ))
}

pub fn stage1_objective(
    x0: &[usize],
    t: usize,
    xt: &[usize],
    logits: &[f64],
    tables: &ScheduleTables,
    lambda_mlm: f64,
) -> Result<ObjectiveTerms> {
    Ok(stage1_objective_with_grad(x0, t, xt, logits, tables, lambda_mlm)?.0)
}
