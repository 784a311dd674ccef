//! Learnable gate logits over every decoder weight matrix.
//!
//! A gated weight is used as `W ⊙ sample(σ(G))`. During training the mask is
//! an unbiased Bernoulli draw; sparsity accounting and the final export use
//! the maximum-likelihood draw (`1` iff `G > 0`). Both sampling steps are
//! differentiated with the straight-through estimator: the sample is treated
//! as the identity, the sigmoid's own derivative is kept.

use crate::autodiff::{sigmoid_scalar, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gate logit initialisation recommended by the ablation over `m`.
pub const DEFAULT_GATE_INIT: f64 = 5.0;
/// Constant learning rate for gate logits.
pub const DEFAULT_GATE_LR: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSampling {
    /// Unbiased draw: keep with probability `σ(g)`.
    Bernoulli,
    /// Maximum-likelihood draw: keep iff `σ(g) > 0.5`.
    MaxLikelihood,
}

/// Settings of the sparsity objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityConfig {
    pub s_target: f64,
    pub lambda_s: f64,
    pub gate_init: f64,
    pub n_max: usize,
    pub gate_lr: f64,
}

impl SparsityConfig {
    pub fn new(s_target: f64, lambda_s: f64, n_max: usize) -> Result<Self> {
        let cfg = SparsityConfig {
            s_target,
            lambda_s,
            gate_init: DEFAULT_GATE_INIT,
            n_max,
            gate_lr: DEFAULT_GATE_LR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.s_target) {
            return Err(Error::invalid(format!(
                "target sparsity {} outside [0, 1)",
                self.s_target
            )));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::invalid(format!("lambda_s {} is negative", self.lambda_s)));
        }
        if self.n_max == 0 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        Ok(())
    }
}

/// Weight matrix paired with a same-shape matrix of gate logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedParameter {
    pub name: String,
    pub weight: Tensor,
    pub gate: Tensor,
    pub frozen: bool,
}

impl GatedParameter {
    /// Gates every weight with the constant logit `init`.
    pub fn new(name: impl Into<String>, weight: Tensor, init: f64) -> Self {
        let gate = Tensor::full(weight.shape(), init);
        GatedParameter {
            name: name.into(),
            weight,
            gate,
            frozen: false,
        }
    }

    pub fn from_parts(name: impl Into<String>, weight: Tensor, gate: Tensor) -> Result<Self> {
        if weight.shape() != gate.shape() {
            return Err(Error::Shape {
                op: "gated parameter",
                left: weight.shape().to_vec(),
                right: gate.shape().to_vec(),
            });
        }
        Ok(GatedParameter {
            name: name.into(),
            weight,
            gate,
            frozen: false,
        })
    }

    pub fn nnz_gates(&self) -> usize {
        count_kept(&self.gate)
    }
}

/// Binary tensor with `P(1) = σ(g)` per entry.
pub fn sample_bernoulli(logits: &Tensor, rng: &mut Rng) -> Tensor {
    logits.map(|g| {
        if rng.bernoulli(sigmoid_scalar(g)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Deterministic draw: 1 iff `g > 0`. A logit of exactly zero is pruned.
pub fn sample_ml(logits: &Tensor) -> Tensor {
    logits.map(ml_keep)
}

fn ml_keep(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn count_kept(logits: &Tensor) -> usize {
    logits.data().iter().filter(|&&g| g > 0.0).count()
}

/// Records `W ⊙ sample(σ(G))` on `graph`. Returns the effective weight and
/// the `σ(G)` node so the sparsity loss can share it.
pub fn gated_weight(
    graph: &mut Graph,
    weight: Var,
    gate: Var,
    sampling: GateSampling,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let probs = graph.sigmoid(gate);
    let sample = match sampling {
        GateSampling::Bernoulli => sample_bernoulli(graph.value(gate), rng),
        GateSampling::MaxLikelihood => sample_ml(graph.value(gate)),
    };
    let mask = graph.straight_through(probs, sample)?;
    let eff = graph.mul(weight, mask)?;
    Ok((eff, probs))
}

/// Training-time effective weight `W ⊙ bern(σ(G))` for a standalone
/// parameter. Gradients reach both `W` and `G` through the returned graph.
pub fn effective_weight_train(
    graph: &mut Graph,
    p: &GatedParameter,
    rng: &mut Rng,
) -> Result<(Var, Var, Var)> {
    let w = graph.param(p.weight.clone());
    let g = if p.frozen {
        graph.constant(p.gate.clone())
    } else {
        graph.param(p.gate.clone())
    };
    let (eff, _) = gated_weight(graph, w, g, GateSampling::Bernoulli, rng)?;
    Ok((eff, w, g))
}

/// `1 - p_nnz / p_total` over the maximum-likelihood masks of all gates.
pub fn sparsity<'a>(gates: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let (mut nnz, mut total) = (0usize, 0usize);
    for g in gates {
        nnz += count_kept(g);
        total += g.len();
    }
    if total == 0 {
        return Err(Error::Empty("no gated parameters"));
    }
    Ok(1.0 - nnz as f64 / total as f64)
}

/// Cosine anneal `½(1 + cos(nπ / n_max))`; steps beyond `n_max` give 0.
pub fn cosine_anneal(n: usize, n_max: usize) -> f64 {
    if n >= n_max {
        return 0.0;
    }
    0.5 * (1.0 + (n as f64 * std::f64::consts::PI / n_max as f64).cos())
}

/// Rounds to a 1e-9 grid, removing the representation error that `1 - s`
/// carries for decimal sparsities such as 0.9 or 0.975.
pub(crate) fn snap(x: f64) -> f64 {
    if x.is_finite() {
        (x * 1e9).round() / 1e9
    } else {
        x
    }
}

/// `max(5, 0.5 / (1 - s_target))`, snapped to 1e-9.
pub fn lambda_heuristic(s_target: f64) -> Result<f64> {
    if !(s_target < 1.0) {
        return Err(Error::invalid(format!(
            "lambda heuristic undefined for target sparsity {s_target}"
        )));
    }
    Ok(f64::max(5.0, snap(0.5 / (1.0 - s_target))))
}

/// Records `(1 - α) |s_target - sparsity|` where the sparsity is counted with
/// maximum-likelihood masks of `(probs, logits)` pairs and differentiated
/// straight through the rounding.
pub fn sparsity_loss(
    graph: &mut Graph,
    gates: &[(Var, Var)],
    s_target: f64,
    n: usize,
    n_max: usize,
) -> Result<Var> {
    if gates.is_empty() {
        return Err(Error::Empty("no gated parameters"));
    }
    let mut nnz: Option<Var> = None;
    let mut total = 0usize;
    for &(probs, logits) in gates {
        let rounded = graph.straight_through(probs, sample_ml(graph.value(logits)))?;
        total += graph.value(logits).len();
        let s = graph.sum(rounded);
        nnz = Some(match nnz {
            None => s,
            Some(acc) => graph.add(acc, s)?,
        });
    }
    let nnz = nnz.expect("at least one gate");
    let density = graph.scale(nnz, 1.0 / total as f64);
    let residual = graph.add_scalar(density, s_target - 1.0);
    let gap = graph.abs(residual);
    Ok(graph.scale(gap, 1.0 - cosine_anneal(n, n_max)))
}

/// `L_c + λ_s L_s`.
pub fn total_loss(graph: &mut Graph, caption_loss: Var, sparsity_loss: Var, lambda_s: f64) -> Result<Var> {
    if lambda_s == 0.0 {
        return Ok(caption_loss);
    }
    let weighted = graph.scale(sparsity_loss, lambda_s);
    graph.add(caption_loss, weighted)
}

/// Final weights `W ⊙ round(σ(G))`; the gates are no longer needed afterwards.
pub fn export_final(p: &GatedParameter) -> Tensor {
    export_weight(&p.weight, &p.gate)
}

pub(crate) fn export_weight(weight: &Tensor, gate: &Tensor) -> Tensor {
    let data = weight
        .data()
        .iter()
        .zip(gate.data())
        .map(|(&w, &g)| if g > 0.0 { w } else { 0.0 })
        .collect();
    Tensor::new(weight.shape().to_vec(), data).expect("gate shape equals weight shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_saturates() {
        let mut rng = Rng::new(0);
        let hi = Tensor::full(&[3, 3], 1000.0);
        let lo = Tensor::full(&[3, 3], -1000.0);
        assert!(sample_bernoulli(&hi, &mut rng).data().iter().all(|&x| x == 1.0));
        assert!(sample_bernoulli(&lo, &mut rng).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bernoulli_mean_at_zero_logit() {
        let mut rng = Rng::new(9);
        let z = Tensor::zeros(&[100_000]);
        let s = sample_bernoulli(&z, &mut rng);
        let mean = s.data().iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn ml_draw_and_tie() {
        let t = Tensor::vector(vec![5.0, -5.0, 0.0]);
        assert_eq!(sample_ml(&t).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ste_gradient_through_bernoulli_and_ml() {
        for sampling in [GateSampling::Bernoulli, GateSampling::MaxLikelihood] {
            let mut g = Graph::new();
            let mut rng = Rng::new(1);
            let w = g.param(Tensor::scalar(2.0));
            let gate = g.param(Tensor::scalar(0.0));
            let (eff, _) = gated_weight(&mut g, w, gate, sampling, &mut rng).unwrap();
            g.backward(eff).unwrap();
            assert_eq!(g.grad(gate).unwrap(), &[0.5]);
        }
    }

    #[test]
    fn effective_weight_saturation() {
        let mut rng = Rng::new(2);
        let w = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut p = GatedParameter::new("w", w.clone(), 1000.0);
        let mut g = Graph::new();
        let (eff, _, _) = effective_weight_train(&mut g, &p, &mut rng).unwrap();
        assert_eq!(g.value(eff), &w);
        p.gate = Tensor::full(&[2, 3], -1000.0);
        let mut g = Graph::new();
        let (eff, _, _) = effective_weight_train(&mut g, &p, &mut rng).unwrap();
        assert!(g.value(eff).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kept_entries_are_bit_exact() {
        let mut rng = Rng::new(3);
        let w = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin() / 3.0);
        let p = GatedParameter::new("w", w.clone(), 0.0);
        let mut g = Graph::new();
        let (eff, _, _) = effective_weight_train(&mut g, &p, &mut rng).unwrap();
        for (e, o) in g.value(eff).data().iter().zip(w.data()) {
            assert!(*e == 0.0 || e.to_bits() == o.to_bits());
        }
    }

    #[test]
    fn sparsity_counts() {
        let init = Tensor::full(&[10, 10], DEFAULT_GATE_INIT);
        assert_eq!(sparsity([&init]).unwrap(), 0.0);
        let neg = Tensor::full(&[10], -5.0);
        assert_eq!(sparsity([&neg]).unwrap(), 1.0);
        let mut a = vec![-1.0; 10];
        let mut b = vec![-1.0; 10];
        a[0] = 1.0;
        a[5] = 2.0;
        b[1] = 0.5;
        b[9] = 3.0;
        let (a, b) = (Tensor::vector(a), Tensor::vector(b));
        assert!((sparsity([&a, &b]).unwrap() - 0.8).abs() < 1e-15);
        assert!(sparsity(std::iter::empty()).is_err());
    }

    #[test]
    fn anneal_points() {
        assert_eq!(cosine_anneal(0, 100), 1.0);
        assert!(cosine_anneal(100, 100).abs() < 1e-12);
        assert!((cosine_anneal(50, 100) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_anneal(150, 100), 0.0);
    }

    #[test]
    fn lambda_values() {
        for (s, want) in [(0.5, 5.0), (0.8, 5.0), (0.9, 5.0), (0.95, 10.0), (0.975, 20.0), (0.99, 50.0)] {
            assert_eq!(lambda_heuristic(s).unwrap(), want);
        }
        assert!((lambda_heuristic(0.93).unwrap() - 0.5 / 0.07).abs() < 1e-9);
        assert!(lambda_heuristic(1.0).is_err());
    }

    fn loss_with(logits: Vec<f64>, s_target: f64, n: usize, n_max: usize) -> f64 {
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(logits));
        let p = g.sigmoid(l);
        let ls = sparsity_loss(&mut g, &[(p, l)], s_target, n, n_max).unwrap();
        g.value(ls).data()[0]
    }

    #[test]
    fn sparsity_loss_values() {
        // 4 of 10 kept -> sparsity 0.6
        let logits: Vec<f64> = (0..10).map(|i| if i < 4 { 1.0 } else { -1.0 }).collect();
        assert_eq!(loss_with(logits.clone(), 0.9, 0, 100), 0.0);
        assert!((loss_with(logits.clone(), 0.9, 50, 100) - 0.15).abs() < 1e-12);
        assert_eq!(loss_with(logits, 0.6, 70, 100), 0.0);
    }

    #[test]
    fn sparsity_loss_gradient_sign_and_scale() {
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]));
        let p = g.sigmoid(l);
        let ls = sparsity_loss(&mut g, &[(p, l)], 0.9, 100, 100).unwrap();
        g.backward(ls).unwrap();
        let grad = g.grad(l).unwrap();
        // Sparsity 0.25 < 0.9: every gate pushed down by σ'(g) / p_total.
        for (x, gr) in [0.0f64, 1.0, 2.0, 3.0].iter().zip(grad) {
            let s = sigmoid_scalar(*x);
            assert!((gr - s * (1.0 - s) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn total_loss_combination() {
        let mut g = Graph::new();
        let lc = g.constant(Tensor::scalar(2.0));
        let ls = g.constant(Tensor::scalar(0.1));
        let t = total_loss(&mut g, lc, ls, 5.0).unwrap();
        assert!((g.value(t).data()[0] - 2.5).abs() < 1e-15);
        let t = total_loss(&mut g, lc, ls, 0.0).unwrap();
        assert_eq!(g.value(t).data()[0], 2.0);
        let zero = g.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut g, lc, zero, 5.0).unwrap();
        assert_eq!(g.value(t).data()[0], 2.0);
    }

    #[test]
    fn export_is_masking_and_idempotent() {
        let w = Tensor::from_fn(&[3, 3], |i| i as f64 + 1.0);
        let p = GatedParameter::new("w", w.clone(), 2.0);
        assert_eq!(export_final(&p), w);
        let mut q = p.clone();
        q.gate = Tensor::from_fn(&[3, 3], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let once = export_final(&q);
        let twice = export_final(&GatedParameter::from_parts("w", once.clone(), q.gate.clone()).unwrap());
        assert_eq!(once, twice);
        assert_eq!(once.count_nonzero(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(SparsityConfig::new(1.0, 5.0, 10).is_err());
        assert!(SparsityConfig::new(0.5, -1.0, 10).is_err());
        assert!(SparsityConfig::new(0.5, 1.0, 0).is_err());
        assert!(SparsityConfig::new(0.0, 0.0, 1).is_ok());
        assert!(GatedParameter::from_parts("x", Tensor::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }
}
