//! Task heads and fine-tuning losses: linear classification with weighted
//! cross-entropy, a shared multi-scale fusion decoder for segmentation and
//! depth, soft Dice, and the scale/shift-invariant depth loss with its
//! multi-scale gradient-matching term.

use ndarray::{Array2, Array3};

use autograd::{Arr, BatchNorm, Binder, Conv2d, Linear, Mode, ParamSet, Tape, Var};

use crate::{Error, Result};

/// Dice stabilizer (numerator and denominator).
pub const EPS_DICE: f64 = 1.0;
/// Relative weight of the gradient-matching term in the depth loss.
pub const GRAD_WEIGHT: f64 = 0.5;
/// Number of dyadic scales in the gradient-matching term.
pub const GRAD_SCALES: usize = 4;

/// Linear classifier over a pooled feature vector.
pub struct ClassifyHead {
    fc: Linear,
}

impl ClassifyHead {
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        d_in: usize,
        classes: usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Self {
        Self {
            fc: Linear::new(pset, name, d_in, classes, init),
        }
    }

    /// `[N, d_in]` features to `[N, classes]` logits.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, pset: &ParamSet, x: Var) -> Var {
        self.fc.forward(tape, binder, pset, x)
    }
}

/// Class-weighted cross-entropy over logits: each sample's negative
/// log-likelihood is scaled by its class weight and the batch is averaged
/// by the total weight.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross-entropy: logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut w_sum = 0.0;
    let mut w = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c || label >= weights.len() {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
        w.push(weights[label]);
        w_sum += weights[label];
        idx.push(i * c + label);
    }
    if w_sum <= 0.0 {
        return Err(Error::Invalid("cross-entropy: zero total class weight".into()));
    }
    let logp = tape.log_softmax(logits);
    let flat = tape.reshape(logp, &[n * c]);
    let picked = tape.select_rows(flat, &idx);
    let wv = tape.leaf(ndarray::arr1(&w).into_dyn());
    let weighted = tape.mul(picked, wv);
    let total = tape.sum_all(weighted);
    let total = tape.neg(total);
    Ok(tape.mul_scalar(total, 1.0 / w_sum))
}

/// Reshape patch tokens `[N, g², D]` into a feature map `[N, D, g, g]`.
pub fn tokens_to_grid(tape: &mut Tape, tokens: Var, g: usize) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    if shape.len() != 3 || shape[1] != g * g {
        return Err(Error::Shape(format!(
            "tokens_to_grid: {shape:?} does not hold a {g}x{g} grid"
        )));
    }
    let x = tape.reshape(tokens, &[shape[0], g, g, shape[2]]);
    Ok(tape.permute(x, &[0, 3, 1, 2]))
}

/// Dense prediction decoder. Feature maps arrive shallow-to-deep; starting
/// from the deepest, each step upsamples to the next skip's resolution,
/// concatenates along channels, and halves the channel count with a 1x1
/// convolution + batch norm + ReLU. A final 1x1 convolution and sigmoid
/// produce a single-channel map at the requested output side.
pub struct FusionDecoder {
    fuse: Vec<(Conv2d, BatchNorm)>,
    head: Conv2d,
    pub out_side: usize,
}

impl FusionDecoder {
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        channels: &[usize],
        out_side: usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Invalid(
                "fusion decoder needs at least two feature levels".into(),
            ));
        }
        let mut fuse = Vec::new();
        let mut ch = *channels.last().unwrap();
        for (lvl, &skip) in channels.iter().enumerate().rev().skip(1) {
            let merged = ch + skip;
            let out = (merged / 2).max(1);
            fuse.push((
                Conv2d::new(pset, &format!("{name}.fuse{lvl}.conv"), merged, out, 1, 1, 0, init),
                BatchNorm::new(pset, &format!("{name}.fuse{lvl}.bn"), out),
            ));
            ch = out;
        }
        let head = Conv2d::new(pset, &format!("{name}.head"), ch, 1, 1, 1, 0, init);
        Ok(Self { fuse, head, out_side })
    }

    /// Maps must match the channel list given at construction, shallow to
    /// deep. Returns sigmoid probabilities `[N, 1, out_side, out_side]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        maps: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        if maps.len() != self.fuse.len() + 1 {
            return Err(Error::Shape(format!(
                "fusion decoder built for {} levels, got {}",
                self.fuse.len() + 1,
                maps.len()
            )));
        }
        let mut x = *maps.last().unwrap();
        for ((conv, bn), &skip) in self.fuse.iter().zip(maps.iter().rev().skip(1)) {
            let target = tape.value(skip).shape().to_vec();
            let cur = tape.value(x).shape().to_vec();
            if cur[2] != target[2] || cur[3] != target[3] {
                x = tape.upsample_bilinear(x, target[2], target[3]);
            }
            let merged = tape.concat(1, &[x, skip]);
            let h = conv.forward(tape, binder, pset, merged);
            let h = bn.forward(tape, binder, pset, h, mode);
            x = tape.relu(h);
        }
        let cur = tape.value(x).shape().to_vec();
        if cur[2] != self.out_side || cur[3] != self.out_side {
            x = tape.upsample_bilinear(x, self.out_side, self.out_side);
        }
        let logits = self.head.forward(tape, binder, pset, x);
        Ok(tape.sigmoid(logits))
    }
}

/// Soft Dice loss, computed per image and averaged over the batch:
/// `1 − (2·Σpg + ε) / (Σp + Σg + ε)` with ε = 1.
pub fn dice_loss(tape: &mut Tape, probs: Var, targets: &Array3<f64>) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let (n, h, w) = targets.dim();
    if shape != vec![n, 1, h, w] {
        return Err(Error::Shape(format!(
            "dice: predictions {shape:?} vs targets [{n}, 1, {h}, {w}]"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut acc = tape.scalar(0.0);
    for i in 0..n {
        let p = tape.slice_axis(probs, 0, i, i + 1);
        let g = tape.leaf(targets.index_axis(ndarray::Axis(0), i).to_owned().into_dyn());
        let g = tape.reshape(g, &[1, 1, h, w]);
        let inter = tape.mul(p, g);
        let inter = tape.sum_all(inter);
        let num = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num, EPS_DICE);
        let ps = tape.sum_all(p);
        let gs = tape.sum_all(g);
        let den = tape.add(ps, gs);
        let den = tape.add_scalar(den, EPS_DICE);
        let dice = tape.div(num, den);
        let one_minus = tape.neg(dice);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        acc = tape.add(acc, one_minus);
    }
    Ok(tape.mul_scalar(acc, 1.0 / n as f64))
}

/// Closed-form least-squares scale and shift aligning a prediction to a
/// target over lens-covered pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsiAlignment {
    pub s: f64,
    pub t: f64,
    /// Set when the system was singular (constant prediction or too few
    /// pixels); the fallback is `s = 0`, `t = mean(target)`.
    pub degenerate: bool,
}

/// Solve `min_{s,t} Σ_lens (s·p + t − y)²` in closed form.
pub fn ssi_align(pred: &Array2<f64>, target: &Array2<f64>, lens: &Array2<f64>) -> Result<SsiAlignment> {
    if pred.dim() != target.dim() || pred.dim() != lens.dim() {
        return Err(Error::Shape("ssi_align: dimension mismatch".into()));
    }
    let (mut a, mut b, mut c, mut d, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((p, y), l) in pred.iter().zip(target.iter()).zip(lens.iter()) {
        if *l > 0.5 {
            a += p * p;
            b += p;
            c += p * y;
            d += y;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::Invalid("ssi_align: empty lens mask".into()));
    }
    let det = a * n - b * b;
    if det.abs() < 1e-12 {
        return Ok(SsiAlignment { s: 0.0, t: d / n, degenerate: true });
    }
    Ok(SsiAlignment {
        s: (n * c - b * d) / det,
        t: (a * d - b * c) / det,
        degenerate: false,
    })
}

fn broadcast_scalar(tape: &mut Tape, s: Var, h: usize, w: usize) -> Var {
    let s = tape.reshape(s, &[1]);
    let rep = tape.repeat_rows(s, h * w);
    tape.reshape(rep, &[h, w])
}

/// Scale/shift-invariant depth loss for one image: the prediction is
/// aligned to the target with differentiable closed-form least squares over
/// lens pixels, then `Σ r²/N_v` plus `GRAD_WEIGHT` times an L1
/// gradient-matching term on the residual at `GRAD_SCALES` dyadic scales.
/// Gradient differences only count where the lens covers both neighbours.
pub fn ssi_mse_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Array2<f64>,
    lens: &Array2<f64>,
) -> Result<Var> {
    let (h, w) = target.dim();
    let shape = tape.value(pred).shape().to_vec();
    if shape != vec![h, w] || lens.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "ssi loss: prediction {shape:?} vs target [{h}, {w}]"
        )));
    }
    let n_v: f64 = lens.iter().filter(|l| **l > 0.5).count() as f64;
    if n_v == 0.0 {
        return Err(Error::Invalid("ssi loss: empty lens mask".into()));
    }
    let lens01 = lens.mapv(|l| if l > 0.5 { 1.0 } else { 0.0 });
    let lv = tape.leaf(lens01.clone().into_dyn());
    let yv = tape.leaf(target.clone().into_dyn());

    // differentiable normal-equation solve over lens pixels
    let pm = tape.mul(pred, lv);
    let p2 = tape.mul(pm, pred);
    let a = tape.sum_all(p2);
    let b = tape.sum_all(pm);
    let py = tape.mul(pm, yv);
    let c = tape.sum_all(py);
    let ym = tape.mul(yv, lv);
    let d_sum: f64 = tape.value(ym).sum();
    let det_val = {
        let av = tape.scalar_value(a);
        let bv = tape.scalar_value(b);
        av * n_v - bv * bv
    };
    let (s, t) = if det_val.abs() < 1e-12 {
        (tape.scalar(0.0), tape.scalar(d_sum / n_v))
    } else {
        let an = tape.mul_scalar(a, n_v);
        let b2 = tape.square(b);
        let det = tape.sub(an, b2);
        let nc = tape.mul_scalar(c, n_v);
        let bd = tape.mul_scalar(b, d_sum);
        let s_num = tape.sub(nc, bd);
        let ad = tape.mul_scalar(a, d_sum);
        let bc = tape.mul(b, c);
        let t_num = tape.sub(ad, bc);
        (tape.div(s_num, det), tape.div(t_num, det))
    };
    let sb = broadcast_scalar(tape, s, h, w);
    let tb = broadcast_scalar(tape, t, h, w);
    let scaled = tape.mul(pred, sb);
    let aligned = tape.add(scaled, tb);
    let resid = tape.sub(aligned, yv);
    let resid = tape.mul(resid, lv);

    let r2 = tape.square(resid);
    let ssi = tape.sum_all(r2);
    let ssi = tape.mul_scalar(ssi, 1.0 / n_v);

    // multi-scale L1 gradient matching on the residual
    let mut grad_term = tape.scalar(0.0);
    let mut r = resid;
    let mut lens_k = lens01;
    let (mut hk, mut wk) = (h, w);
    for k in 0..GRAD_SCALES {
        if k > 0 {
            if hk % 2 != 0 || wk % 2 != 0 || hk < 4 || wk < 4 {
                break;
            }
            let r4 = tape.reshape(r, &[1, 1, hk, wk]);
            let pooled = tape.avg_pool2(r4);
            hk /= 2;
            wk /= 2;
            r = tape.reshape(pooled, &[hk, wk]);
            // a coarse pixel is valid only when all four sources were
            lens_k = Array2::from_shape_fn((hk, wk), |(y, x)| {
                let s = lens_k[[2 * y, 2 * x]]
                    + lens_k[[2 * y, 2 * x + 1]]
                    + lens_k[[2 * y + 1, 2 * x]]
                    + lens_k[[2 * y + 1, 2 * x + 1]];
                if s == 4.0 {
                    1.0
                } else {
                    0.0
                }
            });
        }
        let nk = lens_k.sum();
        if nk < 1.0 {
            continue;
        }
        let vx = Array2::from_shape_fn((hk, wk - 1), |(y, x)| lens_k[[y, x]] * lens_k[[y, x + 1]]);
        let vy = Array2::from_shape_fn((hk - 1, wk), |(y, x)| lens_k[[y, x]] * lens_k[[y + 1, x]]);
        let left = tape.slice_axis(r, 1, 0, wk - 1);
        let right = tape.slice_axis(r, 1, 1, wk);
        let dx = tape.sub(right, left);
        let vxl = tape.leaf(vx.into_dyn());
        let dx = tape.mul(dx, vxl);
        let dx = tape.abs(dx);
        let sx = tape.sum_all(dx);
        let top = tape.slice_axis(r, 0, 0, hk - 1);
        let bot = tape.slice_axis(r, 0, 1, hk);
        let dy = tape.sub(bot, top);
        let vyl = tape.leaf(vy.into_dyn());
        let dy = tape.mul(dy, vyl);
        let dy = tape.abs(dy);
        let sy = tape.sum_all(dy);
        let scale_sum = tape.add(sx, sy);
        let scale_sum = tape.mul_scalar(scale_sum, 1.0 / nk);
        grad_term = tape.add(grad_term, scale_sum);
    }
    let grad_term = tape.mul_scalar(grad_term, GRAD_WEIGHT);
    Ok(tape.add(ssi, grad_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::kaiming_init;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = 5;
            let c = 4;
            let logits = Array2::from_shape_fn((n, c), |_| rng.gen_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..3.0)).collect();
            // naive oracle
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let row: Vec<f64> = logits.row(i).to_vec();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let logp = logits[[i, labels[i]]] - m - z.ln();
                num += -weights[labels[i]] * logp;
                den += weights[labels[i]];
            }
            let expect = num / den;
            let mut t = Tape::new();
            let lv = t.leaf(logits.into_dyn());
            let loss = weighted_cross_entropy(&mut t, lv, &labels, &weights).unwrap();
            assert!((t.scalar_value(loss) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let labels = vec![2usize, 0, 3];
        let weights = vec![0.5, 1.0, 2.0, 1.5];
        let eval = |m: &Array2<f64>| {
            let mut t = Tape::new();
            let lv = t.leaf(m.clone().into_dyn());
            let loss = weighted_cross_entropy(&mut t, lv, &labels, &weights).unwrap();
            t.scalar_value(loss)
        };
        let mut t = Tape::new();
        let lv = t.leaf(logits.clone().into_dyn());
        let loss = weighted_cross_entropy(&mut t, lv, &labels, &weights).unwrap();
        let grads = t.backward(loss);
        let g = grads.get(lv).unwrap().clone();
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..4 {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[[i, j]] += h;
                minus[[i, j]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!((g[[i, j]] - numeric).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dice_extremes() {
        let mut t = Tape::new();
        let target = ndarray::Array3::from_shape_fn((1, 4, 4), |(_, y, x)| {
            if y < 2 && x < 2 {
                1.0
            } else {
                0.0
            }
        });
        // perfect prediction: loss = 1 − (2·4+1)/(4+4+1) = 0 at ε=1? No:
        // (8+1)/(8+1) = 1, so loss 0 exactly.
        let perfect = t.leaf(
            target
                .clone()
                .into_shape_with_order((1, 1, 4, 4))
                .unwrap()
                .into_dyn(),
        );
        let l = dice_loss(&mut t, perfect, &target).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-12);
        // inverted: intersection 0, Σp = 12, Σg = 4 → loss 1 − 1/17
        let wrong_arr = target.mapv(|v| 1.0 - v);
        let wrong = t.leaf(wrong_arr.into_shape_with_order((1, 1, 4, 4)).unwrap().into_dyn());
        let l = dice_loss(&mut t, wrong, &target).unwrap();
        assert!((t.scalar_value(l) - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = ndarray::Array3::from_shape_fn((2, 4, 4), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let pred = ndarray::Array4::from_shape_fn((2, 1, 4, 4), |_| rng.gen_range(0.05..0.95));
        let eval = |p: &ndarray::Array4<f64>| {
            let mut t = Tape::new();
            let pv = t.leaf(p.clone().into_dyn());
            let l = dice_loss(&mut t, pv, &target).unwrap();
            t.scalar_value(l)
        };
        let mut t = Tape::new();
        let pv = t.leaf(pred.clone().into_dyn());
        let l = dice_loss(&mut t, pv, &target).unwrap();
        let g = t.backward(l).get(pv).unwrap().clone();
        let h = 1e-5;
        for i in [(0usize, 0usize, 1usize, 2usize), (1, 0, 3, 3), (0, 0, 0, 0)] {
            let mut plus = pred.clone();
            let mut minus = pred.clone();
            plus[[i.0, i.1, i.2, i.3]] += h;
            minus[[i.0, i.1, i.2, i.3]] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((g[[i.0, i.1, i.2, i.3]] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_decoder_shapes() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(1);
        let dec = FusionDecoder::new(&mut pset, "seg", &[16, 32, 64, 128], 32, &mut init).unwrap();
        let mut t = Tape::new();
        let mut binder = Binder::new();
        let maps: Vec<Var> = [(16usize, 16usize), (32, 8), (64, 4), (128, 2)]
            .iter()
            .map(|&(c, s)| t.leaf(Arr::zeros(ndarray::IxDyn(&[2, c, s, s]))))
            .collect();
        let out = dec
            .forward(&mut t, &mut binder, &mut pset, &maps, Mode::Train)
            .unwrap();
        assert_eq!(t.value(out).shape(), &[2, 1, 32, 32]);
        for v in t.value(out).iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        // wrong level count is rejected
        assert!(dec
            .forward(&mut t, &mut binder, &mut pset, &maps[..3], Mode::Train)
            .is_err());
    }

    #[test]
    fn fusion_decoder_accepts_token_grids() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(2);
        let dec = FusionDecoder::new(&mut pset, "dec", &[8, 8, 8], 16, &mut init).unwrap();
        let mut t = Tape::new();
        let mut binder = Binder::new();
        let maps: Vec<Var> = (0..3)
            .map(|i| {
                let tokens = t.leaf(Arr::from_elem(ndarray::IxDyn(&[1, 16, 8]), 0.1 * i as f64));
                tokens_to_grid(&mut t, tokens, 4).unwrap()
            })
            .collect();
        let out = dec
            .forward(&mut t, &mut binder, &mut pset, &maps, Mode::Train)
            .unwrap();
        assert_eq!(t.value(out).shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn tokens_to_grid_layout() {
        let mut t = Tape::new();
        // one image, 2x2 grid, d=1: token order is row-major over the grid
        let tokens = t.leaf(
            ndarray::Array3::from_shape_vec((1, 4, 1), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let grid = tokens_to_grid(&mut t, tokens, 2).unwrap();
        let v = t.value(grid);
        assert_eq!(v.shape(), &[1, 1, 2, 2]);
        assert_eq!(v[[0, 0, 0, 0]], 1.0);
        assert_eq!(v[[0, 0, 0, 1]], 2.0);
        assert_eq!(v[[0, 0, 1, 0]], 3.0);
        assert_eq!(v[[0, 0, 1, 1]], 4.0);
    }

    #[test]
    fn align_recovers_affine_map() {
        // prediction = 2·y + 3 aligns back with s = 0.5, t = −1.5
        let y = arr2(&[[0.1, 0.4], [0.7, 0.9]]);
        let p = y.mapv(|v| 2.0 * v + 3.0);
        let lens = Array2::ones((2, 2));
        let a = ssi_align(&p, &y, &lens).unwrap();
        assert!(!a.degenerate);
        assert!((a.s - 0.5).abs() < 1e-9);
        assert!((a.t + 1.5).abs() < 1e-9);
    }

    #[test]
    fn align_degenerate_fallback() {
        let y = arr2(&[[0.2, 0.6], [0.4, 0.8]]);
        let p = Array2::from_elem((2, 2), 7.0); // constant: singular system
        let lens = Array2::ones((2, 2));
        let a = ssi_align(&p, &y, &lens).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.s, 0.0);
        assert!((a.t - 0.5).abs() < 1e-9);
        // empty lens errors
        assert!(ssi_align(&p, &y, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn ssi_loss_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let lens = Array2::from_shape_fn((8, 8), |(r, c)| {
            if (r as i32 - 4).pow(2) + (c as i32 - 4).pow(2) <= 16 {
                1.0
            } else {
                0.0
            }
        });
        for &(alpha, beta) in &[(1.0, 0.0), (2.0, 3.0), (0.3, -0.7)] {
            let p = y.mapv(|v| alpha * v + beta);
            let mut t = Tape::new();
            let pv = t.leaf(p.into_dyn());
            let l = ssi_mse_loss(&mut t, pv, &y, &lens).unwrap();
            assert!(
                t.scalar_value(l).abs() < 1e-6,
                "affine ({alpha}, {beta}) gave {}",
                t.scalar_value(l)
            );
        }
    }

    #[test]
    fn ssi_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let lens = Array2::from_shape_fn((8, 8), |(r, c)| {
            if r + c > 2 {
                1.0
            } else {
                0.0
            }
        });
        let p = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let eval = |m: &Array2<f64>| {
            let mut t = Tape::new();
            let pv = t.leaf(m.clone().into_dyn());
            let l = ssi_mse_loss(&mut t, pv, &y, &lens).unwrap();
            t.scalar_value(l)
        };
        let mut t = Tape::new();
        let pv = t.leaf(p.clone().into_dyn());
        let l = ssi_mse_loss(&mut t, pv, &y, &lens).unwrap();
        let g = t.backward(l).get(pv).unwrap().clone();
        let h = 1e-6;
        let mut checked = 0;
        for (r, c) in [(0usize, 0usize), (3, 4), (7, 7), (5, 1), (2, 6)] {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[[r, c]] += h;
            minus[[r, c]] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = g[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < 1e-4,
                "({r}, {c}): analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    #[test]
    fn ssi_loss_masks_uncovered_pixels() {
        let y = Array2::from_shape_fn((4, 4), |(r, c)| 0.1 * (r * 4 + c) as f64);
        let lens = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 1.0 } else { 0.0 });
        let p = y.clone();
        let mut garbage = y.clone();
        for r in 2..4 {
            for c in 0..4 {
                garbage[[r, c]] = 99.0;
            }
        }
        let mut t = Tape::new();
        let a = t.leaf(p.into_dyn());
        let la = ssi_mse_loss(&mut t, a, &y, &lens).unwrap();
        let b = t.leaf(garbage.into_dyn());
        let lb = ssi_mse_loss(&mut t, b, &y, &lens).unwrap();
        assert!((t.scalar_value(la) - t.scalar_value(lb)).abs() < 1e-12);
    }
}
