//! Magnitude pruning baselines: an in-training gradual schedule with a cubic
//! ramp and one-shot hard pruning in three flavours. Biases are never
//! pruned. Magnitude ties are broken by the lowest flat index.

use std::cmp::Ordering;

use crate::decoder::DecoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer binary masks, in model layer order.
pub type PruneMask = Vec<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradualSchedule {
    pub s_final: f64,
    pub t_start: u64,
    pub t_end: u64,
    pub freq: u64,
}

impl GradualSchedule {
    pub fn new(s_final: f64, t_start: u64, t_end: u64, freq: u64) -> Result<Self> {
        if t_start >= t_end || freq == 0 {
            return Err(Error::invalid(format!(
                "gradual schedule needs t_start < t_end and freq >= 1 (got {t_start}, {t_end}, {freq})"
            )));
        }
        check_target(s_final)?;
        Ok(GradualSchedule {
            s_final,
            t_start,
            t_end,
            freq,
        })
    }

    /// Whether masks are recomputed at step `t`.
    pub fn is_update_step(&self, t: u64) -> bool {
        t >= self.t_start && t <= self.t_end && ((t - self.t_start) % self.freq == 0 || t == self.t_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HardScheme {
    ClassBlind,
    ClassUniform,
    ClassDistribution,
}

impl HardScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            HardScheme::ClassBlind => "blind",
            HardScheme::ClassUniform => "uniform",
            HardScheme::ClassDistribution => "distribution",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blind" | "class_blind" => Ok(HardScheme::ClassBlind),
            "uniform" | "class_uniform" => Ok(HardScheme::ClassUniform),
            "distribution" | "class_distribution" => Ok(HardScheme::ClassDistribution),
            _ => Err(Error::invalid(format!("unknown hard-pruning scheme `{s}`"))),
        }
    }
}

fn check_target(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid(format!("target sparsity {s} outside [0, 1)")));
    }
    Ok(())
}

/// Number of entries pruned to reach fraction `s` of `n`.
fn prune_count(s: f64, n: usize) -> usize {
    ((s * n as f64) + 1e-9).floor() as usize
}

/// Cubic ramp from 0 at `t_start` to `s_final` at `t_end`.
pub fn gradual_target(t: u64, sched: &GradualSchedule) -> f64 {
    if t < sched.t_start {
        return 0.0;
    }
    if t >= sched.t_end {
        return sched.s_final;
    }
    let progress = (t - sched.t_start) as f64 / (sched.t_end - sched.t_start) as f64;
    sched.s_final * (1.0 - (1.0 - progress).powi(3))
}

fn by_magnitude(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Extends `mask` so that at least `count` entries of the layer are pruned,
/// removing the smallest-magnitude survivors first.
fn prune_layer_to(weight: &Tensor, mask: &Tensor, count: usize) -> Tensor {
    let mut out = mask.clone();
    let pruned = out.data().iter().filter(|&&m| m == 0.0).count();
    if pruned >= count {
        return out;
    }
    let mut survivors: Vec<(f64, usize)> = weight
        .data()
        .iter()
        .zip(mask.data())
        .enumerate()
        .filter(|(_, (_, &m))| m != 0.0)
        .map(|(i, (&w, _))| (w.abs(), i))
        .collect();
    survivors.sort_by(|&a, &b| by_magnitude(a, b));
    for &(_, i) in survivors.iter().take(count - pruned) {
        out.data_mut()[i] = 0.0;
    }
    out
}

fn current_masks(model: &DecoderModel) -> PruneMask {
    model
        .layers
        .iter()
        .map(|l| l.mask.clone().unwrap_or_else(|| Tensor::full(l.weight.shape(), 1.0)))
        .collect()
}

/// Recomputes the gradual masks at step `t`: each layer is brought to the
/// scheduled sparsity; earlier pruning decisions are kept.
pub fn gradual_update(model: &DecoderModel, t: u64, sched: &GradualSchedule) -> PruneMask {
    let target = gradual_target(t, sched);
    model
        .layers
        .iter()
        .zip(current_masks(model))
        .map(|(l, mask)| prune_layer_to(&l.weight, &mask, prune_count(target, l.weight.len())))
        .collect()
}

fn unmasked(model: &DecoderModel) -> PruneMask {
    model
        .layers
        .iter()
        .map(|l| Tensor::full(l.weight.shape(), 1.0))
        .collect()
}

/// One-shot magnitude pruning of a trained model to overall sparsity
/// `s_final`.
pub fn hard_prune(model: &DecoderModel, s_final: f64, scheme: HardScheme) -> Result<PruneMask> {
    check_target(s_final)?;
    let total = model.weight_count();
    let k = prune_count(s_final, total);
    let mut masks = unmasked(model);
    match scheme {
        HardScheme::ClassBlind => {
            let mut all: Vec<(f64, usize)> = Vec::with_capacity(total);
            for l in &model.layers {
                let base = all.len();
                all.extend(l.weight.data().iter().enumerate().map(|(i, w)| (w.abs(), base + i)));
            }
            all.sort_by(|&a, &b| by_magnitude(a, b));
            let offsets = layer_offsets(model);
            for &(_, flat) in all.iter().take(k) {
                let layer = offsets.partition_point(|&o| o <= flat) - 1;
                masks[layer].data_mut()[flat - offsets[layer]] = 0.0;
            }
        }
        HardScheme::ClassUniform => {
            let counts = uniform_counts(model, s_final, k);
            for (i, l) in model.layers.iter().enumerate() {
                masks[i] = prune_layer_to(&l.weight, &masks[i], counts[i]);
            }
        }
        HardScheme::ClassDistribution => {
            masks = distribution_masks(model, k);
        }
    }
    Ok(masks)
}

fn layer_offsets(model: &DecoderModel) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(model.layers.len());
    let mut acc = 0;
    for l in &model.layers {
        offsets.push(acc);
        acc += l.weight.len();
    }
    offsets
}

/// Per-layer prune counts at ratio `s`, each within one element of
/// `s * n_l`, summing to `k` (largest remainders first).
fn uniform_counts(model: &DecoderModel, s: f64, k: usize) -> Vec<usize> {
    let exact: Vec<f64> = model.layers.iter().map(|l| s * l.weight.len() as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| (e + 1e-9).floor() as usize).collect();
    let mut missing = k.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if missing == 0 {
            break;
        }
        if counts[i] < model.layers[i].weight.len() {
            counts[i] += 1;
            missing -= 1;
        }
    }
    counts
}

fn std_dev(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-layer threshold `c * std_l`, with `c` found by bisection so that the
/// overall count of pruned weights is `k`. Entries exactly at the boundary
/// are settled by (normalised magnitude, layer, index) order.
fn distribution_masks(model: &DecoderModel, k: usize) -> PruneMask {
    let stds: Vec<f64> = model.layers.iter().map(|l| std_dev(&l.weight)).collect();
    let below = |c: f64| -> usize {
        model
            .layers
            .iter()
            .zip(&stds)
            .map(|(l, &s)| l.weight.data().iter().filter(|w| w.abs() < c * s).count())
            .sum()
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while below(hi) < k {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if below(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut masks = unmasked(model);
    let mut pruned = 0;
    let mut boundary: Vec<(f64, usize, usize)> = Vec::new();
    for (li, (l, &s)) in model.layers.iter().zip(&stds).enumerate() {
        for (i, &w) in l.weight.data().iter().enumerate() {
            if w.abs() < lo * s {
                masks[li].data_mut()[i] = 0.0;
                pruned += 1;
            } else {
                let score = if s > 0.0 { w.abs() / s } else { f64::INFINITY };
                boundary.push((score, li, i));
            }
        }
    }
    if pruned < k {
        boundary.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, li, i) in boundary.iter().take(k - pruned) {
            masks[li].data_mut()[i] = 0.0;
        }
    }
    masks
}

/// Installs `masks` on the model and zeroes the pruned weights.
pub fn apply_masks(model: &mut DecoderModel, masks: PruneMask) -> Result<()> {
    if masks.len() != model.layers.len() {
        return Err(Error::invalid("one mask per layer is required"));
    }
    for (l, mask) in model.layers.iter_mut().zip(masks) {
        if mask.shape() != l.weight.shape() {
            return Err(Error::Shape {
                op: "apply_masks",
                left: mask.shape().to_vec(),
                right: l.weight.shape().to_vec(),
            });
        }
        l.mask = Some(mask);
    }
    enforce_masks(model);
    Ok(())
}

/// Re-zeroes every masked weight.
pub fn enforce_masks(model: &mut DecoderModel) {
    for l in &mut model.layers {
        if let Some(mask) = &l.mask {
            for (w, &m) in l.weight.data_mut().iter_mut().zip(mask.data()) {
                if m == 0.0 {
                    *w = 0.0;
                }
            }
        }
    }
}

/// Fraction of masked-out entries over all layers.
pub fn mask_sparsity(masks: &[Tensor]) -> f64 {
    let total: usize = masks.iter().map(Tensor::len).sum();
    let zeros: usize = masks
        .iter()
        .map(|m| m.data().iter().filter(|&&x| x == 0.0).count())
        .sum();
    zeros as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{CellKind, Dims};
    use crate::rng::Rng;

    fn sched() -> GradualSchedule {
        GradualSchedule::new(0.8, 100, 200, 10).unwrap()
    }

    fn model() -> DecoderModel {
        let dims = Dims {
            rnn: 6,
            word: 4,
            attn: 5,
            vocab: 9,
            feat: 3,
            raw: 4,
        };
        DecoderModel::new(dims, CellKind::Lstm, &mut Rng::new(11))
    }

    #[test]
    fn ramp_points() {
        let s = sched();
        assert_eq!(gradual_target(0, &s), 0.0);
        assert_eq!(gradual_target(100, &s), 0.0);
        assert_eq!(gradual_target(200, &s), 0.8);
        assert_eq!(gradual_target(500, &s), 0.8);
        assert!((gradual_target(150, &s) - 0.875 * 0.8).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..300 {
            let v = gradual_target(t, &s);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(GradualSchedule::new(0.5, 10, 10, 1).is_err());
        assert!(GradualSchedule::new(0.5, 0, 10, 0).is_err());
        assert!(GradualSchedule::new(1.0, 0, 10, 1).is_err());
        let s = sched();
        assert!(s.is_update_step(100) && s.is_update_step(110) && s.is_update_step(200));
        assert!(!s.is_update_step(105) && !s.is_update_step(210) && !s.is_update_step(90));
    }

    #[test]
    fn layer_magnitude_order() {
        let w = Tensor::vector(vec![0.1, -0.5, 0.3, -0.2]);
        let m = prune_layer_to(&w, &Tensor::full(&[4], 1.0), prune_count(0.5, 4));
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        let tie = Tensor::vector(vec![0.2, -0.2, 0.2, 0.1]);
        let m = prune_layer_to(&tie, &Tensor::full(&[4], 1.0), 2);
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    fn two_layer_model(a: [f64; 2], b: [f64; 2]) -> DecoderModel {
        // Only the first two entries of the first two layers are small.
        let mut m = model();
        for l in &mut m.layers {
            l.weight = Tensor::full(l.weight.shape(), 100.0);
        }
        m.layers[0].weight.data_mut()[..2].copy_from_slice(&a);
        m.layers[1].weight.data_mut()[..2].copy_from_slice(&b);
        m
    }

    #[test]
    fn blind_prunes_globally_smallest() {
        let m = two_layer_model([1.0, 2.0], [3.0, 4.0]);
        let n = m.weight_count() as f64;
        let masks = hard_prune(&m, 2.0 / n + 1e-12, HardScheme::ClassBlind).unwrap();
        assert_eq!(&masks[0].data()[..2], &[0.0, 0.0]);
        assert_eq!(&masks[1].data()[..2], &[1.0, 1.0]);
    }

    #[test]
    fn uniform_counts_follow_layer_sizes() {
        let m = model();
        let masks = hard_prune(&m, 0.5, HardScheme::ClassUniform).unwrap();
        for (mask, l) in masks.iter().zip(&m.layers) {
            let pruned = mask.data().iter().filter(|&&x| x == 0.0).count() as f64;
            assert!((pruned - 0.5 * l.weight.len() as f64).abs() <= 1.0, "{}", l.name.as_str());
            // the pruned ones are the smallest of that layer
            let max_pruned = l
                .weight
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(_, &k)| k == 0.0)
                .map(|(w, _)| w.abs())
                .fold(0.0, f64::max);
            let min_kept = l
                .weight
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(_, &k)| k == 1.0)
                .map(|(w, _)| w.abs())
                .fold(f64::INFINITY, f64::min);
            assert!(max_pruned <= min_kept);
        }
    }

    #[test]
    fn every_scheme_hits_target_count() {
        let m = model();
        let n = m.weight_count();
        for s in [0.0, 0.3, 0.8, 0.975] {
            for scheme in [HardScheme::ClassBlind, HardScheme::ClassUniform, HardScheme::ClassDistribution] {
                let masks = hard_prune(&m, s, scheme).unwrap();
                let pruned = masks.iter().map(|x| x.data().iter().filter(|&&v| v == 0.0).count()).sum::<usize>();
                assert!((pruned as f64 - s * n as f64).abs() <= 1.0, "{scheme:?} at {s}: {pruned}");
            }
        }
        assert!(hard_prune(&m, 1.0, HardScheme::ClassBlind).is_err());
        assert!(hard_prune(&m, -0.1, HardScheme::ClassUniform).is_err());
    }

    #[test]
    fn distribution_uses_scaled_thresholds() {
        let m = model();
        let masks = hard_prune(&m, 0.6, HardScheme::ClassDistribution).unwrap();
        // every pruned entry has a normalised magnitude no larger than any
        // kept entry's
        let mut max_pruned: f64 = 0.0;
        let mut min_kept = f64::INFINITY;
        for (l, mask) in m.layers.iter().zip(&masks) {
            let s = std_dev(&l.weight);
            for (w, &k) in l.weight.data().iter().zip(mask.data()) {
                if k == 0.0 {
                    max_pruned = max_pruned.max(w.abs() / s);
                } else {
                    min_kept = min_kept.min(w.abs() / s);
                }
            }
        }
        assert!(max_pruned <= min_kept);
    }

    #[test]
    fn gradual_masks_are_monotone_and_reach_target() {
        let mut m = model();
        let s = GradualSchedule::new(0.9, 0, 50, 5).unwrap();
        let mut rng = Rng::new(3);
        let mut prev = unmasked(&m);
        for t in 0..=60 {
            // weights keep moving, as in training
            for l in &mut m.layers {
                for w in l.weight.data_mut() {
                    *w += 0.05 * rng.normal();
                }
            }
            if s.is_update_step(t) {
                let masks = gradual_update(&m, t, &s);
                for (a, b) in prev.iter().zip(&masks) {
                    for (&x, &y) in a.data().iter().zip(b.data()) {
                        assert!(y <= x, "pruned entry regrew at step {t}");
                    }
                }
                apply_masks(&mut m, masks.clone()).unwrap();
                prev = masks;
            }
        }
        for (l, mask) in m.layers.iter().zip(&prev) {
            let pruned = mask.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(pruned, prune_count(0.9, l.weight.len()));
        }
        let unchanged = gradual_update(&m, 55, &s);
        assert_eq!(unchanged, prev);
    }

    #[test]
    fn masked_weights_are_zero() {
        let mut m = model();
        let masks = hard_prune(&m, 0.7, HardScheme::ClassBlind).unwrap();
        apply_masks(&mut m, masks.clone()).unwrap();
        for (l, mask) in m.layers.iter().zip(&masks) {
            for (&w, &k) in l.weight.data().iter().zip(mask.data()) {
                if k == 0.0 {
                    assert_eq!(w, 0.0);
                }
            }
        }
        assert!((mask_sparsity(&masks) - 0.7).abs() < 1.0 / m.weight_count() as f64 + 1e-12);
    }
}
