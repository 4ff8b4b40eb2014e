//! Training objective: Gaussian reconstruction likelihood on the decoder and
//! refinement outputs, attention-weighted KL divergence to the labelled
//! mixture component for each stream, and the two classification terms.
//!
//! Value-level functions work on one recording in `f64`; [`objective_graph`]
//! builds the same quantity on the tape, averaged over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::MelChunk;
use crate::gmvae::{Attribute, ChunkBatch, ForwardOut, GaussianSeq, Gmvae, GraphOut, MixturePrior, ModelConfig, Noise};
use crate::nn::{gradcheck, GradcheckOptions, GradcheckReport, Graph, Mat, Mode, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Reconstruction log-likelihood, summed over both outputs (≤ 0).
    pub recon: f64,
    pub kld_s: f64,
    pub kld_t: f64,
    pub ce_s: f64,
    pub ce_t: f64,
    /// Quantity minimized: `-recon + kld_s + kld_t + β·ce_s + γ·ce_t`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(recon: f64, kld_s: f64, kld_t: f64, ce_s: f64, ce_t: f64, beta: f64, gamma: f64) -> Result<Self> {
        let b = Self {
            recon,
            kld_s,
            kld_t,
            ce_s,
            ce_t,
            total: -recon + kld_s + kld_t + beta * ce_s + gamma * ce_t,
        };
        b.check_finite()?;
        Ok(b)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("kld_s", self.kld_s),
            ("kld_t", self.kld_t),
            ("ce_s", self.ce_s),
            ("ce_t", self.ce_t),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name.into()));
            }
        }
        Ok(())
    }
}

/// `log N(X; μ_x, I)` without the constant: `-½ Σ (X - μ_x)²`.
pub fn recon_loglik(target: &[MelChunk], mu_x: &[MelChunk]) -> Result<f64> {
    if target.len() != mu_x.len() {
        return Err(Error::shape(
            "recon_loglik",
            format!("{} target chunks vs {} reconstructed", target.len(), mu_x.len()),
        ));
    }
    let mut sum = 0.0;
    for (a, b) in target.iter().zip(mu_x) {
        if a.data.len() != b.data.len() {
            return Err(Error::shape("recon_loglik", "chunk sizes differ"));
        }
        sum += a.data.iter().zip(&b.data).map(|(&x, &m)| (x as f64 - m as f64).powi(2)).sum::<f64>();
    }
    Ok(-0.5 * sum)
}

/// `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p² I))` for one diagonal posterior row.
pub fn kld_diag_gauss(mu_q: &[f64], log_sigma_q: &[f64], prior_mean: &[f64], prior_var: f64) -> f64 {
    let log_sp = 0.5 * prior_var.ln();
    mu_q.iter()
        .zip(log_sigma_q)
        .zip(prior_mean)
        .map(|((&m, &ls), &mp)| {
            let vq = (2.0 * ls).exp();
            log_sp - ls + (vq + (m - mp) * (m - mp)) / (2.0 * prior_var) - 0.5
        })
        .sum()
}

/// `Σ_n α_n · KL(q_n ‖ p(z | y = label))`.
pub fn weighted_kld(q: &GaussianSeq, alpha: &[f64], prior: &MixturePrior, label: usize) -> Result<f64> {
    if label >= prior.k() {
        return Err(Error::InvalidLabel {
            label,
            classes: prior.k(),
        });
    }
    if alpha.len() != q.mu.rows || q.mu.shape() != q.log_sigma.shape() || q.mu.cols != prior.dim() {
        return Err(Error::shape("weighted_kld", "posterior, weights and prior disagree in shape"));
    }
    Ok((0..q.mu.rows)
        .map(|n| alpha[n] * kld_diag_gauss(q.mu.row(n), q.log_sigma.row(n), prior.mean(label), prior.variance))
        .sum())
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Objective for one recording.
pub fn total_objective(
    fwd: &ForwardOut,
    target: &[MelChunk],
    labels: (usize, usize),
    priors: (&MixturePrior, &MixturePrior),
    cfg: &ModelConfig,
) -> Result<LossBreakdown> {
    let recon = recon_loglik(target, &fwd.refined)? + recon_loglik(target, &fwd.recon)?;
    let kld_s = weighted_kld(&fwd.singer_post, &fwd.alpha_s, priors.0, labels.0)?;
    let kld_t = weighted_kld(&fwd.tech_post, &fwd.alpha_t, priors.1, labels.1)?;
    let ce_s = cross_entropy(&fwd.class_logits_s, labels.0)?;
    let ce_t = cross_entropy(&fwd.class_logits_t, labels.1)?;
    LossBreakdown::assemble(recon, kld_s, kld_t, ce_s, ce_t, cfg.beta, cfg.gamma)
}

/// Tape handles of every objective term.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub recon: Var,
    pub kld_s: Var,
    pub kld_t: Var,
    pub ce_s: Var,
    pub ce_t: Var,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> Result<LossBreakdown> {
        let v = |x| g.scalar(x).to_f64_lossy();
        let b = LossBreakdown {
            recon: v(self.recon),
            kld_s: v(self.kld_s),
            kld_t: v(self.kld_t),
            ce_s: v(self.ce_s),
            ce_t: v(self.ce_t),
            total: v(self.total),
        };
        b.check_finite()?;
        Ok(b)
    }
}

fn graph_recon<T: Scalar>(g: &mut Graph<T>, target: Var, out: Var, inv_batch: T) -> Var {
    let d = g.sub(target, out);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    g.scale(s, -T::from_f64_lossy(0.5) * inv_batch)
}

#[allow(clippy::too_many_arguments)]
fn graph_kld<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    attr: Attribute,
    out: &GraphOut,
    labels: &[usize],
    inv_batch: T,
) -> Result<Var> {
    let s = out.stream(attr);
    let means = g.param(store, &format!("prior_{}.means", attr.prefix()))?;
    let k = g.shape(means).0;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label: bad, classes: k });
    }
    let var = store.value(&format!("prior_{}.var", attr.prefix()))?[0];
    let idx: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, out.steps)).collect();
    let mp = g.gather_rows(means, idx);
    let diff = g.sub(s.mu, mp);
    let sq = g.square(diff);
    let two_ls = g.scale(s.log_sigma, T::from_f64_lossy(2.0));
    let vq = g.exp(two_ls);
    let num = g.add(vq, sq);
    let frac = g.scale(num, T::one() / (T::from_f64_lossy(2.0) * var));
    let t = g.sub(frac, s.log_sigma);
    let c = T::from_f64_lossy(0.5) * var.ln() - T::from_f64_lossy(0.5);
    let t = g.add_scalar(t, c);
    let per_row = g.row_sum(t);
    let weighted = g.mul_col(per_row, s.alpha);
    let sum = g.sum_all(weighted);
    Ok(g.scale(sum, inv_batch))
}

fn graph_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], inv_batch: T) -> Result<Var> {
    let k = g.shape(logits).1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label: bad, classes: k });
    }
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick_cols(lp, labels.to_vec());
    let s = g.sum_all(picked);
    Ok(g.scale(s, -inv_batch))
}

/// Batch-mean objective on the tape. `target` holds the input chunks,
/// shaped like `out.recon`.
pub fn objective_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &GraphOut,
    target: Var,
    labels_s: &[usize],
    labels_t: &[usize],
    cfg: &ModelConfig,
) -> Result<ObjectiveVars> {
    if labels_s.len() != out.batch || labels_t.len() != out.batch {
        return Err(Error::shape("objective", "one label per recording expected"));
    }
    if g.shape(target) != g.shape(out.recon) {
        return Err(Error::shape("objective", "target and reconstruction shapes differ"));
    }
    let inv_b = T::one() / T::from_usize(out.batch).unwrap();
    let r1 = graph_recon(g, target, out.refined, inv_b);
    let r2 = graph_recon(g, target, out.recon, inv_b);
    let recon = g.add(r1, r2);
    let kld_s = graph_kld(g, store, Attribute::Singer, out, labels_s, inv_b)?;
    let kld_t = graph_kld(g, store, Attribute::Technique, out, labels_t, inv_b)?;
    let ce_s = graph_ce(g, out.singer.logits, labels_s, inv_b)?;
    let ce_t = graph_ce(g, out.technique.logits, labels_t, inv_b)?;

    let neg = g.scale(recon, -T::one());
    let mut total = g.add(neg, kld_s);
    total = g.add(total, kld_t);
    let bs = g.scale(ce_s, T::from_f64_lossy(cfg.beta));
    total = g.add(total, bs);
    let gt = g.scale(ce_t, T::from_f64_lossy(cfg.gamma));
    total = g.add(total, gt);
    Ok(ObjectiveVars {
        recon,
        kld_s,
        kld_t,
        ce_s,
        ce_t,
        total,
    })
}

/// Finite-difference check of the full objective at 64-bit precision on a
/// random batch of `batch` recordings with `steps` chunks each. Batch-norm
/// layers run in training mode; reparameterization noise is fixed.
pub fn gradcheck_objective(
    cfg: &ModelConfig,
    batch: usize,
    steps: usize,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let model = Gmvae::new(cfg.clone())?;
    let mut store = model.init_store::<f64>(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);
    let rows = batch * steps * cfg.chunk_frames;
    let data = (0..rows * cfg.n_mels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = ChunkBatch {
        batch,
        steps,
        data: Mat::from_vec(rows, cfg.n_mels, data),
    };
    let noise = Noise::sample(&mut rng, batch * steps, cfg.latent_dim);
    let labels_s: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.k_singers)).collect();
    let labels_t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.k_techniques)).collect();
    gradcheck(&mut store, opts, |g, store| {
        let out = model.forward(g, store, &input, Mode::Train, Some(&noise))?;
        let x = target_var(g, &input.data);
        Ok(objective_graph(g, store, &out, x, &labels_s, &labels_t, cfg)?.total)
    })
}

/// Constant node holding a batch's input chunks.
pub fn target_var<T: Scalar>(g: &mut Graph<T>, data: &Mat<T>) -> Var {
    g.constant(data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmvae::split_outputs;

    #[test]
    fn recon_single_cell() {
        let mut a = MelChunk::zeros();
        a.data[0] = 1.0;
        assert_eq!(recon_loglik(&[a.clone()], &[MelChunk::zeros()]).unwrap(), -0.5);
        assert_eq!(recon_loglik(&[a.clone()], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn kld_worked_value() {
        let v = (-2.0f64).exp();
        let k = kld_diag_gauss(&[1.0], &[0.5 * v.ln()], &[0.0], v);
        assert!((k - 1.0f64.exp().powi(2) / 2.0).abs() < 1e-12);
        assert!(kld_diag_gauss(&[0.3], &[-1.0], &[0.3], (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let prior = MixturePrior::new(Mat::zeros(3, 2), 0.1).unwrap();
        let q = GaussianSeq {
            mu: Mat::zeros(1, 2),
            log_sigma: Mat::zeros(1, 2),
        };
        assert!(matches!(
            weighted_kld(&q, &[1.0], &prior, 3),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn graph_matches_value_level() {
        let cfg = ModelConfig::tiny();
        let model = Gmvae::new(cfg.clone()).unwrap();
        let store = model.init_store::<f64>(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs: Vec<Vec<MelChunk>> = (0..2)
            .map(|_| {
                (0..2)
                    .map(|_| MelChunk {
                        data: (0..MelChunk::LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[MelChunk]> = recs.iter().map(|r| r.as_slice()).collect();
        let batch = ChunkBatch::<f64>::from_recordings(&refs).unwrap();
        let noise = Noise::sample(&mut rng, 4, cfg.latent_dim);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &batch, Mode::Infer, Some(&noise)).unwrap();
        let x = target_var(&mut g, &batch.data);
        let obj = objective_graph(&mut g, &store, &out, x, &[1, 2], &[0, 3], &cfg).unwrap();
        let graph = obj.breakdown(&g).unwrap();

        let priors = (
            MixturePrior::from_store(&store, Attribute::Singer).unwrap(),
            MixturePrior::from_store(&store, Attribute::Technique).unwrap(),
        );
        let fwds = split_outputs(&g, &out);
        let a = total_objective(&fwds[0], &recs[0], (1, 0), (&priors.0, &priors.1), &cfg).unwrap();
        let b = total_objective(&fwds[1], &recs[1], (2, 3), (&priors.0, &priors.1), &cfg).unwrap();
        // chunks round-trip through f32 in ForwardOut, so allow float slack
        let tol = 1e-3 * graph.total.abs().max(1.0);
        assert!((graph.total - (a.total + b.total) / 2.0).abs() < tol);
        assert!((graph.kld_s - (a.kld_s + b.kld_s) / 2.0).abs() < 1e-9);
        assert!((graph.ce_t - (a.ce_t + b.ce_t) / 2.0).abs() < 1e-9);
    }
}
