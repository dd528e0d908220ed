//! The three self-supervised pretraining objectives: momentum-contrast
//! (symmetric InfoNCE with cross-worker key gathering), redundancy reduction
//! (cross-correlation toward identity, averaged across workers), and masked
//! patch reconstruction.
//!
//! Worker parallelism is simulated: shards are processed in ascending worker
//! id and reduced in that order, making every run bit-reproducible.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autograd::{BatchNorm, Binder, Linear, Mode, ParamSet, Tape, Var};

use crate::{Error, Result};

/// Pretraining scalars (config namespace `ssl.*`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SslConfig {
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Redundancy weight λ.
    pub lambda: f64,
    /// Mask ratio γ (γ·N_p must be integral).
    pub gamma: f64,
    /// EMA coefficient of the momentum branch.
    pub momentum: f64,
    /// Simulated worker count N_G.
    pub workers: usize,
    /// Per-worker batch N_b.
    pub per_worker_batch: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda: 5e-3,
            gamma: 0.75,
            momentum: 0.99,
            workers: 1,
            per_worker_batch: 4,
        }
    }
}

impl SslConfig {
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            tau: cfg.f64_or("ssl.tau", d.tau)?,
            lambda: cfg.f64_or("ssl.lambda", d.lambda)?,
            gamma: cfg.f64_or("ssl.gamma", d.gamma)?,
            momentum: cfg.f64_or("ssl.momentum", d.momentum)?,
            workers: cfg.usize_or("ssl.workers", d.workers)?,
            per_worker_batch: cfg.usize_or("ssl.per_worker_batch", d.per_worker_batch)?,
        })
    }
}

/// Column-normalization stabilizer added under the square root.
pub const EPS_VAR: f64 = 1e-5;
/// Per-patch target normalization stabilizer.
pub const EPS_PATCH: f64 = 1e-6;

/// Cosine similarity of two vectors on the tape.
pub fn cosim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na: f64 = tape.value(a).iter().map(|v| v * v).sum();
    let nb: f64 = tape.value(b).iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot = tape.mul(a, b);
    let dot = tape.sum_all(dot);
    let a2 = tape.square(a);
    let a2 = tape.sum_all(a2);
    let na = tape.sqrt(a2);
    let b2 = tape.square(b);
    let b2 = tape.sum_all(b2);
    let nb = tape.sqrt(b2);
    let denom = tape.mul(na, nb);
    Ok(tape.div(dot, denom))
}

/// `−log( exp(CoSim(q, k_pos)/τ) / Σ_j exp(CoSim(q, k_j)/τ) )`, computed
/// through a numerically stable log-softmax.
pub fn info_nce(tape: &mut Tape, q: Var, keys: &[Var], positive: usize, tau: f64) -> Result<Var> {
    if keys.is_empty() {
        return Err(Error::Invalid("info_nce: empty key set".into()));
    }
    if positive >= keys.len() {
        return Err(Error::Invalid(format!(
            "info_nce: positive index {positive} out of {}",
            keys.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Invalid("info_nce: temperature must be positive".into()));
    }
    let sims: Vec<Var> = keys
        .iter()
        .map(|&k| {
            let s = cosim(tape, q, k)?;
            Ok(tape.reshape(s, &[1]))
        })
        .collect::<Result<_>>()?;
    let logits = tape.concat(0, &sims);
    let logits = tape.mul_scalar(logits, 1.0 / tau);
    let logp = tape.log_softmax(logits);
    let pos = tape.select_rows(logp, &[positive]);
    let pos = tape.sum_all(pos);
    Ok(tape.neg(pos))
}

/// One worker's query/key embeddings: `q1[i]`/`k1[i]` come from view 1 of
/// pair `i`, `q2[i]`/`k2[i]` from view 2. Queries are online-branch outputs
/// (encoder → projector → predictor); keys are momentum-branch outputs.
pub struct MocoShard {
    pub q1: Vec<Var>,
    pub q2: Vec<Var>,
    pub k1: Vec<Var>,
    pub k2: Vec<Var>,
}

/// Symmetric per-worker contrastive loss with keys gathered across all
/// workers in ascending id order. Keys are detached on the tape, so the
/// momentum branch never receives gradient. Returns one loss per worker.
pub fn moco_v3_loss(tape: &mut Tape, shards: &[MocoShard], tau: f64) -> Result<Vec<Var>> {
    if shards.is_empty() {
        return Err(Error::Invalid("moco_v3_loss: no shards".into()));
    }
    let n_b = shards[0].q1.len();
    for (w, s) in shards.iter().enumerate() {
        if s.q1.len() != n_b || s.q2.len() != n_b || s.k1.len() != n_b || s.k2.len() != n_b {
            return Err(Error::Shape(format!("moco_v3_loss: shard {w} size mismatch")));
        }
    }
    // gather (and stop-gradient) all keys, ascending worker id
    let all_k1: Vec<Var> = shards
        .iter()
        .flat_map(|s| s.k1.iter())
        .map(|&k| tape.detach(k))
        .collect();
    let all_k2: Vec<Var> = shards
        .iter()
        .flat_map(|s| s.k2.iter())
        .map(|&k| tape.detach(k))
        .collect();
    let mut losses = Vec::with_capacity(shards.len());
    for (w, shard) in shards.iter().enumerate() {
        let mut acc = tape.scalar(0.0);
        for i in 0..n_b {
            let pos = w * n_b + i;
            let a = info_nce(tape, shard.q1[i], &all_k2, pos, tau)?;
            let b = info_nce(tape, shard.q2[i], &all_k1, pos, tau)?;
            let s = tape.add(a, b);
            acc = tape.add(acc, s);
        }
        losses.push(tape.mul_scalar(acc, 2.0 * tau / n_b as f64));
    }
    Ok(losses)
}

/// Zero-mean, unit-variance normalization of each feature column with
/// population (1/N_b) statistics and an `EPS_VAR` stabilizer.
pub fn barlow_normalize(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Invalid(
            "barlow_normalize: need an [N_b >= 2, d] matrix".into(),
        ));
    }
    let d = shape[1];
    let gamma = tape.leaf(autograd::Arr::ones(ndarray::IxDyn(&[d])));
    let beta = tape.leaf(autograd::Arr::zeros(ndarray::IxDyn(&[d])));
    Ok(tape.batch_norm_train(z, gamma, beta, EPS_VAR))
}

/// Redundancy-reduction loss over per-worker normalized view pairs: each
/// worker's cross-correlation `c = (1/N_b)·Ẑ1ᵀ·Ẑ2` is averaged elementwise
/// across workers, then `Σ_k (1−c̄_kk)² + λ·Σ_{k≠l} c̄_kl²`.
pub fn barlow_loss(tape: &mut Tape, pairs: &[(Var, Var)], lambda: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("barlow_loss: no worker pairs".into()));
    }
    let shape0 = tape.value(pairs[0].0).shape().to_vec();
    let d = shape0[1];
    let mut mean_c: Option<Var> = None;
    for &(z1, z2) in pairs {
        let s1 = tape.value(z1).shape().to_vec();
        let s2 = tape.value(z2).shape().to_vec();
        if s1 != s2 || s1[1] != d {
            return Err(Error::Shape("barlow_loss: dimension mismatch across pairs".into()));
        }
        let n_b = s1[0] as f64;
        let z1t = tape.transpose2(z1);
        let c = tape.matmul(z1t, z2);
        let c = tape.mul_scalar(c, 1.0 / n_b);
        mean_c = Some(match mean_c {
            None => c,
            Some(acc) => tape.add(acc, c),
        });
    }
    let mean_c = tape.mul_scalar(mean_c.unwrap(), 1.0 / pairs.len() as f64);
    let eye = tape.leaf(autograd::Arr::from_shape_fn(ndarray::IxDyn(&[d, d]), |ix| {
        if ix[0] == ix[1] {
            1.0
        } else {
            0.0
        }
    }));
    // (I − c̄) squared, weighted 1 on the diagonal and λ off it
    let diff = tape.sub(eye, mean_c);
    let sq = tape.square(diff);
    let weights = tape.leaf(autograd::Arr::from_shape_fn(ndarray::IxDyn(&[d, d]), |ix| {
        if ix[0] == ix[1] {
            1.0
        } else {
            lambda
        }
    }));
    let weighted = tape.mul(sq, weights);
    Ok(tape.sum_all(weighted))
}

/// Which tokens a masked-reconstruction step hides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    /// Permutation of `0..n_p` sorting the scores descending; the first
    /// `(1−γ)·n_p` entries are the kept token indices.
    pub sigma: Vec<usize>,
    pub gamma: f64,
    pub n_p: usize,
}

impl MaskingPlan {
    pub fn kept_count(&self) -> usize {
        self.n_p - self.masked_count()
    }

    pub fn masked_count(&self) -> usize {
        (self.gamma * self.n_p as f64).round() as usize
    }

    /// Original indices of kept tokens, in rank order.
    pub fn kept_indices(&self) -> &[usize] {
        &self.sigma[..self.kept_count()]
    }

    /// Original indices of masked tokens.
    pub fn masked_indices(&self) -> &[usize] {
        &self.sigma[self.kept_count()..]
    }

    /// `rank[i]` = position of token `i` in `sigma`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0usize; self.n_p];
        for (r, &i) in self.sigma.iter().enumerate() {
            rank[i] = r;
        }
        rank
    }
}

/// Build a plan from explicit scores: σ sorts the scores into descending
/// order with a stable tiebreak on index.
pub fn masking_plan_from_scores(scores: &[f64], gamma: f64) -> Result<MaskingPlan> {
    let n_p = scores.len();
    let masked_exact = gamma * n_p as f64;
    if (masked_exact - masked_exact.round()).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "mask ratio {gamma} times {n_p} tokens is not integral"
        )));
    }
    let mut sigma: Vec<usize> = (0..n_p).collect();
    sigma.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(MaskingPlan { sigma, gamma, n_p })
}

/// Draw `α_i ~ U(0,1)` under the seed and sort descending.
pub fn mae_mask(n_p: usize, gamma: f64, seed: u64) -> Result<MaskingPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..n_p).map(|_| rng.gen_range(0.0..1.0)).collect();
    masking_plan_from_scores(&scores, gamma)
}

/// Rebuild the full token sequence: kept (processed) tokens return to their
/// original positions; every masked position receives the learnt token `m`.
pub fn mae_reinsert(tape: &mut Tape, z_tilde: Var, plan: &MaskingPlan, m: Var) -> Result<Var> {
    let shape = tape.value(z_tilde).shape().to_vec();
    if shape[0] != plan.kept_count() {
        return Err(Error::Shape(format!(
            "mae_reinsert: {} processed tokens for {} kept positions",
            shape[0],
            plan.kept_count()
        )));
    }
    let d = shape[1];
    if tape.value(m).len() != d {
        return Err(Error::Shape("mae_reinsert: mask token width mismatch".into()));
    }
    let masked = plan.masked_count();
    let full = if masked == 0 {
        z_tilde
    } else {
        let m = tape.reshape(m, &[d]);
        let mm = tape.repeat_rows(m, masked);
        tape.concat(0, &[z_tilde, mm])
    };
    // row r of `full` is the token of rank r (ranks >= kept are copies of m)
    Ok(tape.select_rows(full, &plan.ranks()))
}

/// Per-patch normalized targets: each row zero-centred and scaled to unit
/// variance independently (population statistics, `EPS_PATCH` stabilizer).
pub fn normalize_patch_targets(y_raw: &Array2<f64>) -> Result<Array2<f64>> {
    let (_, d_p) = y_raw.dim();
    if d_p < 2 {
        return Err(Error::Invalid(
            "patch normalization needs patch dimensionality >= 2".into(),
        ));
    }
    let mut out = y_raw.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + EPS_PATCH).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    Ok(out)
}

/// Masked-only reconstruction loss
/// `(1/(γ·N_p·d_p)) Σ_{masked i} ‖ŷ_i − y_i‖²` against per-patch normalized
/// targets. Unmasked positions contribute nothing.
pub fn mae_loss(
    tape: &mut Tape,
    y_hat: Var,
    y_raw: &Array2<f64>,
    plan: &MaskingPlan,
) -> Result<Var> {
    if plan.masked_count() == 0 {
        return Err(Error::NoMaskedTokens);
    }
    let (n_p, d_p) = y_raw.dim();
    let shape = tape.value(y_hat).shape().to_vec();
    if shape != vec![n_p, d_p] {
        return Err(Error::Shape(format!(
            "mae_loss: prediction {shape:?} vs targets [{n_p}, {d_p}]"
        )));
    }
    let y_norm = normalize_patch_targets(y_raw)?;
    let y = tape.leaf(y_norm.into_dyn());
    let diff = tape.sub(y_hat, y);
    let sq = tape.square(diff);
    let masked = tape.select_rows(sq, plan.masked_indices());
    let total = tape.sum_all(masked);
    Ok(tape.mul_scalar(total, 1.0 / (plan.gamma * n_p as f64 * d_p as f64)))
}

/// Two fully connected layers with batch normalization and ReLU between,
/// used as the contrastive projector and predictor.
pub struct ProjectionMlp {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl ProjectionMlp {
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        init: &mut dyn FnMut(&[usize]) -> autograd::Arr,
    ) -> Self {
        Self {
            fc1: Linear::new(pset, &format!("{name}.fc1"), d_in, d_hidden, init),
            bn: BatchNorm::new(pset, &format!("{name}.bn"), d_hidden),
            fc2: Linear::new(pset, &format!("{name}.fc2"), d_hidden, d_out, init),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        x: Var,
        mode: Mode,
    ) -> Var {
        let h = self.fc1.forward(tape, binder, pset, x);
        let h = self.bn.forward(tape, binder, pset, h, mode);
        let h = tape.relu(h);
        self.fc2.forward(tape, binder, pset, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Arr;
    use ndarray::arr1;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(arr1(v).into_dyn())
    }

    #[test]
    fn cosim_basics() {
        let mut t = Tape::new();
        let e1 = vec_leaf(&mut t, &[1.0, 0.0]);
        let e2 = vec_leaf(&mut t, &[0.0, 1.0]);
        let s = cosim(&mut t, e1, e2).unwrap();
        assert!((t.scalar_value(s)).abs() < 1e-12);
        let a = vec_leaf(&mut t, &[1.0, 1.0]);
        let b = vec_leaf(&mut t, &[2.0, 2.0]);
        let s = cosim(&mut t, a, b).unwrap();
        assert!((t.scalar_value(s) - 1.0).abs() < 1e-12);
        let c = vec_leaf(&mut t, &[-3.0, 0.0]);
        let s = cosim(&mut t, e1, c).unwrap();
        assert!((t.scalar_value(s) + 1.0).abs() < 1e-12);
        let z = vec_leaf(&mut t, &[0.0, 0.0]);
        assert!(matches!(cosim(&mut t, e1, z), Err(Error::ZeroVector)));
    }

    #[test]
    fn info_nce_closed_forms() {
        let mut t = Tape::new();
        let e1 = vec_leaf(&mut t, &[1.0, 0.0]);
        let e2 = vec_leaf(&mut t, &[0.0, 1.0]);
        let l = info_nce(&mut t, e1, &[e1, e2], 0, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((t.scalar_value(l) - expect).abs() < 1e-12);

        // two identical keys: uniform softmax
        let l = info_nce(&mut t, e1, &[e1, e1], 0, 1.0).unwrap();
        assert!((t.scalar_value(l) - 2f64.ln()).abs() < 1e-12);

        // one negative at cosine −1
        let neg = vec_leaf(&mut t, &[-1.0, 0.0]);
        let l = info_nce(&mut t, e1, &[e1, neg], 0, 1.0).unwrap();
        assert!((t.scalar_value(l) - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_positive_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut t = Tape::new();
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = vec_leaf(&mut t, &q);
            let keys: Vec<Var> = (0..5)
                .map(|_| {
                    let k: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    vec_leaf(&mut t, &k)
                })
                .collect();
            let l = info_nce(&mut t, q, &keys, 2, 0.3).unwrap();
            assert!(t.scalar_value(l) >= 0.0);
        }
    }

    #[test]
    fn moco_single_key_is_zero() {
        let mut t = Tape::new();
        let q = vec_leaf(&mut t, &[0.3, 0.7]);
        let k = vec_leaf(&mut t, &[0.1, -0.2]);
        let shard = MocoShard {
            q1: vec![q],
            q2: vec![q],
            k1: vec![k],
            k2: vec![k],
        };
        let losses = moco_v3_loss(&mut t, &[shard], 0.2).unwrap();
        assert_eq!(losses.len(), 1);
        assert!(t.scalar_value(losses[0]).abs() < 1e-12);
    }

    #[test]
    fn moco_symmetric_under_view_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data: Vec<[Vec<f64>; 4]> = Vec::new();
        for _ in 0..3 {
            data.push([0, 1, 2, 3].map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        }
        let build = |swap: bool| {
            let mut t = Tape::new();
            let shard = {
                let mut q1 = vec![];
                let mut q2 = vec![];
                let mut k1 = vec![];
                let mut k2 = vec![];
                for d in &data {
                    let (a, b, c, e) = (
                        t.leaf(arr1(&d[0]).into_dyn()),
                        t.leaf(arr1(&d[1]).into_dyn()),
                        t.leaf(arr1(&d[2]).into_dyn()),
                        t.leaf(arr1(&d[3]).into_dyn()),
                    );
                    if swap {
                        q1.push(b);
                        q2.push(a);
                        k1.push(e);
                        k2.push(c);
                    } else {
                        q1.push(a);
                        q2.push(b);
                        k1.push(c);
                        k2.push(e);
                    }
                }
                MocoShard { q1, q2, k1, k2 }
            };
            let l = moco_v3_loss(&mut t, &[shard], 0.2).unwrap();
            t.scalar_value(l[0])
        };
        assert!((build(false) - build(true)).abs() < 1e-12);
    }

    #[test]
    fn moco_keys_receive_no_gradient() {
        let mut t = Tape::new();
        let q1 = vec_leaf(&mut t, &[0.3, 0.7]);
        let q2 = vec_leaf(&mut t, &[-0.1, 0.5]);
        let k1 = vec_leaf(&mut t, &[0.2, -0.4]);
        let k2 = vec_leaf(&mut t, &[0.9, 0.1]);
        let shard = MocoShard {
            q1: vec![q1],
            q2: vec![q2],
            k1: vec![k1],
            k2: vec![k2],
        };
        let l = moco_v3_loss(&mut t, &[shard], 0.2).unwrap();
        let grads = t.backward(l[0]);
        assert!(grads.get(k1).is_none());
        assert!(grads.get(k2).is_none());
        assert!(grads.get(q1).is_some());
    }

    #[test]
    fn barlow_normalize_examples() {
        let mut t = Tape::new();
        let z = t.leaf(ndarray::arr2(&[[1.0], [3.0]]).into_dyn());
        let zn = barlow_normalize(&mut t, z).unwrap();
        let v = t.value(zn);
        // population std 1, stabilized: values just inside ±1
        assert!((v[[0, 0]] + 1.0).abs() < 1e-4);
        assert!((v[[1, 0]] - 1.0).abs() < 1e-4);

        // idempotence within the stabilizer's tolerance
        let zn2 = barlow_normalize(&mut t, zn).unwrap();
        let v2 = t.value(zn2).clone();
        let v1 = t.value(zn).clone();
        let diff = (&v2 - &v1).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-4);

        // constant column collapses to zero
        let c = t.leaf(ndarray::arr2(&[[5.0], [5.0], [5.0]]).into_dyn());
        let cn = barlow_normalize(&mut t, c).unwrap();
        for x in t.value(cn).iter() {
            assert!(x.abs() < 1e-9);
        }
    }

    #[test]
    fn barlow_loss_examples() {
        // perfect correlation: c = 1 → loss 0
        let mut t = Tape::new();
        let z = t.leaf(ndarray::arr2(&[[-1.0], [1.0]]).into_dyn());
        let l = barlow_loss(&mut t, &[(z, z)], 0.1).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-12);

        // anti-correlation: c = −1 → (1−(−1))² = 4
        let zneg = t.leaf(ndarray::arr2(&[[1.0], [-1.0]]).into_dyn());
        let l = barlow_loss(&mut t, &[(z, zneg)], 0.1).unwrap();
        assert!((t.scalar_value(l) - 4.0).abs() < 1e-12);

        // c̄ = [[1, 0.5], [0.5, 1]] with λ=0.1 → 0.05
        let r2 = 2f64.sqrt();
        let z1 = t.leaf(ndarray::arr2(&[[r2, 0.0], [0.0, r2]]).into_dyn());
        let z2 = t.leaf(
            ndarray::arr2(&[[2.0 / r2, 1.0 / r2], [1.0 / r2, 2.0 / r2]]).into_dyn(),
        );
        let l = barlow_loss(&mut t, &[(z1, z2)], 0.1).unwrap();
        assert!((t.scalar_value(l) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn masking_plan_sorts_descending_with_stable_ties() {
        let plan = masking_plan_from_scores(&[0.1, 0.9, 0.5, 0.3], 0.75).unwrap();
        assert_eq!(plan.sigma, vec![1, 2, 3, 0]);
        assert_eq!(plan.kept_indices(), &[1]);
        assert_eq!(plan.masked_indices(), &[2, 3, 0]);
        // ties break on index
        let plan = masking_plan_from_scores(&[0.5, 0.5, 0.1, 0.5], 0.5).unwrap();
        assert_eq!(plan.sigma, vec![0, 1, 3, 2]);
        // non-integral γ·N_p rejected
        assert!(masking_plan_from_scores(&[0.1, 0.2, 0.3], 0.5).is_err());
        // γ=0 keeps everything
        let plan = masking_plan_from_scores(&[0.2, 0.8], 0.0).unwrap();
        assert_eq!(plan.kept_count(), 2);
    }

    #[test]
    fn mae_mask_deterministic() {
        let a = mae_mask(16, 0.75, 7).unwrap();
        let b = mae_mask(16, 0.75, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked_count(), 12);
    }

    #[test]
    fn mae_reinsert_places_mask_token() {
        let plan = masking_plan_from_scores(&[0.1, 0.9, 0.5, 0.3], 0.75).unwrap();
        let mut t = Tape::new();
        let z = t.leaf(ndarray::arr2(&[[7.0, 8.0]]).into_dyn()); // single kept token
        let m = vec_leaf(&mut t, &[-1.0, -2.0]);
        let full = mae_reinsert(&mut t, z, &plan, m).unwrap();
        let v = t.value(full);
        // kept token 1 returns to position 1; all others are m
        assert_eq!(v[[1, 0]], 7.0);
        assert_eq!(v[[1, 1]], 8.0);
        for &i in &[0usize, 2, 3] {
            assert_eq!(v[[i, 0]], -1.0);
            assert_eq!(v[[i, 1]], -2.0);
        }
    }

    #[test]
    fn mae_reinsert_roundtrip_gamma_zero() {
        let plan = masking_plan_from_scores(&[0.3, 0.9, 0.1], 0.0).unwrap();
        let mut t = Tape::new();
        // kept tokens in rank order: token 1 (0.9), token 0 (0.3), token 2 (0.1)
        let z = t.leaf(ndarray::arr2(&[[10.0], [20.0], [30.0]]).into_dyn());
        let m = vec_leaf(&mut t, &[0.0]);
        let full = mae_reinsert(&mut t, z, &plan, m).unwrap();
        let v = t.value(full);
        assert_eq!(v[[1, 0]], 10.0);
        assert_eq!(v[[0, 0]], 20.0);
        assert_eq!(v[[2, 0]], 30.0);
    }

    #[test]
    fn mae_loss_worked_example() {
        // γ=0.5, N_p=2, d_p=2: masked raw target (0, 2) normalizes to (−1, 1)
        let plan = masking_plan_from_scores(&[0.9, 0.1], 0.5).unwrap();
        assert_eq!(plan.masked_indices(), &[1]);
        let y_raw = ndarray::arr2(&[[0.5, 0.5], [0.0, 2.0]]);
        let mut t = Tape::new();
        let y_hat = t.leaf(ndarray::arr2(&[[0.0, 0.0], [0.0, 0.0]]).into_dyn());
        let l = mae_loss(&mut t, y_hat, &y_raw, &plan).unwrap();
        assert!((t.scalar_value(l) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mae_loss_ignores_unmasked_exactly() {
        let plan = masking_plan_from_scores(&[0.9, 0.1, 0.5, 0.2], 0.5).unwrap();
        let y_raw = ndarray::arr2(&[
            [0.1, 0.9, 0.3],
            [0.2, 0.8, 0.1],
            [0.5, 0.6, 0.4],
            [0.9, 0.2, 0.7],
        ]);
        let base = ndarray::arr2(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [2.0, 2.0, 2.0],
            [3.0, 3.0, 3.0],
        ]);
        let kept = plan.kept_indices().to_vec();
        let mut t = Tape::new();
        let a = t.leaf(base.clone().into_dyn());
        let la = mae_loss(&mut t, a, &y_raw, &plan).unwrap();
        let mut perturbed = base;
        for &i in &kept {
            for j in 0..3 {
                perturbed[[i, j]] += 42.0;
            }
        }
        let b = t.leaf(perturbed.into_dyn());
        let lb = mae_loss(&mut t, b, &y_raw, &plan).unwrap();
        assert_eq!(t.scalar_value(la), t.scalar_value(lb));
    }

    #[test]
    fn mae_loss_rejects_empty_mask_and_thin_patches() {
        let plan = masking_plan_from_scores(&[0.9, 0.1], 0.0).unwrap();
        let y_raw = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let mut t = Tape::new();
        let y_hat = t.leaf(Arr::zeros(ndarray::IxDyn(&[2, 2])));
        assert!(matches!(
            mae_loss(&mut t, y_hat, &y_raw, &plan),
            Err(Error::NoMaskedTokens)
        ));
        let thin = ndarray::arr2(&[[0.5], [0.7]]);
        assert!(normalize_patch_targets(&thin).is_err());
    }
}
