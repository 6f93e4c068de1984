//! Softmax regression / one-hidden-layer ReLU MLP with hand-written
//! backpropagation, Adam, local training and evaluation.
//!
//! Parameters live in one flat vector laid out as
//! `[W1 (hidden x input), b1, W2 (classes x hidden), b2]`, or
//! `[W (classes x input), b]` when there is no hidden layer. The flat layout is
//! what peers exchange and average.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    /// Zero means no hidden layer (softmax regression).
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            n_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim * self.n_classes + self.n_classes
        } else {
            self.input_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.n_classes + self.n_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes < 2 {
            return Err(Error::config(format!(
                "invalid architecture {self:?}: need input_dim >= 1 and n_classes >= 2"
            )));
        }
        Ok(())
    }

    /// Width of the layer feeding the output head.
    fn head_input(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    /// Offsets of the output head (W2, b2) within the flat vector.
    fn head_offsets(&self) -> (usize, usize) {
        let w2 = if self.hidden_dim == 0 {
            0
        } else {
            self.input_dim * self.hidden_dim + self.hidden_dim
        };
        (w2, w2 + self.head_input() * self.n_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<F> {
    pub arch: Arch,
    pub values: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            values: vec![F::zero(); arch.param_count()],
        }
    }

    pub fn from_values(arch: Arch, values: Vec<F>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::contract(format!(
                "{} values given for arch needing {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params<F: Scalar>(arch: Arch, rng_seed: u64) -> ModelParams<F> {
    let mut rng = rng::seeded(rng_seed);
    let mut values = vec![F::zero(); arch.param_count()];
    let mut fill = |slice: &mut [F], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in slice {
            *v = F::lit(rng.random_range(-bound..bound));
        }
    };
    if arch.hidden_dim > 0 {
        let w1 = arch.input_dim * arch.hidden_dim;
        fill(&mut values[..w1], arch.input_dim);
    }
    let (w2, b2) = arch.head_offsets();
    fill(&mut values[w2..b2], arch.head_input());
    ModelParams { arch, values }
}

/// Scratch space for one forward/backward pass.
struct Workspace<F> {
    hidden_pre: Vec<F>,
    hidden: Vec<F>,
    logits: Vec<F>,
}

impl<F: Scalar> Workspace<F> {
    fn new(arch: &Arch) -> Self {
        Self {
            hidden_pre: vec![F::zero(); arch.hidden_dim],
            hidden: vec![F::zero(); arch.hidden_dim],
            logits: vec![F::zero(); arch.n_classes],
        }
    }
}

fn check_dim<F: Scalar>(params: &ModelParams<F>, features: &[F]) -> Result<()> {
    if features.len() != params.arch.input_dim {
        return Err(Error::contract(format!(
            "feature dim {} does not match model input dim {}",
            features.len(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Fills `ws.logits` (and the hidden activations when present).
fn compute_logits<F: Scalar>(params: &ModelParams<F>, features: &[F], ws: &mut Workspace<F>) {
    let arch = params.arch;
    let v = &params.values;
    let head_in: &[F] = if arch.hidden_dim == 0 {
        features
    } else {
        let b1 = arch.input_dim * arch.hidden_dim;
        for h in 0..arch.hidden_dim {
            let row = &v[h * arch.input_dim..(h + 1) * arch.input_dim];
            let pre = dot(row, features) + v[b1 + h];
            ws.hidden_pre[h] = pre;
            ws.hidden[h] = if pre > F::zero() { pre } else { F::zero() };
        }
        &ws.hidden
    };
    let (w2, b2) = arch.head_offsets();
    let width = head_in.len();
    for c in 0..arch.n_classes {
        let row = &v[w2 + c * width..w2 + (c + 1) * width];
        ws.logits[c] = dot(row, head_in) + v[b2 + c];
    }
}

/// In-place softmax with max subtraction; returns log-sum-exp of the input.
fn softmax_in_place<F: Scalar>(logits: &mut [F]) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total = total + *l;
    }
    for l in logits.iter_mut() {
        *l = *l / total;
    }
    max + total.ln()
}

fn log_softmax_at<F: Scalar>(logits: &[F], label: usize) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln();
    logits[label] - lse
}

/// Class probabilities for one input.
pub fn forward<F: Scalar>(params: &ModelParams<F>, features: &[F]) -> Result<Vec<F>> {
    check_dim(params, features)?;
    let mut ws = Workspace::new(&params.arch);
    compute_logits(params, features, &mut ws);
    softmax_in_place(&mut ws.logits);
    Ok(ws.logits)
}

fn check_label<F: Scalar>(params: &ModelParams<F>, sample: &Sample<F>) -> Result<()> {
    if sample.label >= params.arch.n_classes {
        return Err(Error::contract(format!(
            "label {} outside model's {} classes",
            sample.label, params.arch.n_classes
        )));
    }
    check_dim(params, &sample.features)
}

/// Mean cross-entropy over `batch` and its analytic gradient.
pub fn loss_and_grad<F: Scalar>(params: &ModelParams<F>, batch: &[Sample<F>]) -> Result<(F, Vec<F>)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad on an empty batch"));
    }
    let arch = params.arch;
    let v = &params.values;
    let mut grad = vec![F::zero(); v.len()];
    let mut ws = Workspace::new(&arch);
    let mut dhidden = vec![F::zero(); arch.hidden_dim];
    let scale = F::one() / F::from_usize_lossy(batch.len());
    let (w2, b2) = arch.head_offsets();
    let width = arch.head_input();
    let mut loss = F::zero();

    for sample in batch {
        check_label(params, sample)?;
        compute_logits(params, &sample.features, &mut ws);
        let lse = {
            let max = ws.logits.iter().copied().fold(F::neg_infinity(), F::max);
            max + ws.logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln()
        };
        loss = loss + (lse - ws.logits[sample.label]);
        // dL/dlogit = softmax - onehot
        for (c, l) in ws.logits.iter_mut().enumerate() {
            let p = (*l - lse).exp();
            let target = if c == sample.label { F::one() } else { F::zero() };
            *l = (p - target) * scale;
        }
        let head_in: &[F] = if arch.hidden_dim == 0 {
            &sample.features
        } else {
            &ws.hidden
        };
        for c in 0..arch.n_classes {
            let d = ws.logits[c];
            let row = &mut grad[w2 + c * width..w2 + (c + 1) * width];
            for (g, &x) in row.iter_mut().zip(head_in) {
                *g = *g + d * x;
            }
            grad[b2 + c] = grad[b2 + c] + d;
        }
        if arch.hidden_dim > 0 {
            for (h, dh) in dhidden.iter_mut().enumerate() {
                *dh = if ws.hidden_pre[h] > F::zero() {
                    (0..arch.n_classes).fold(F::zero(), |acc, c| acc + v[w2 + c * width + h] * ws.logits[c])
                } else {
                    F::zero()
                };
            }
            let b1 = arch.input_dim * arch.hidden_dim;
            for (h, &dh) in dhidden.iter().enumerate() {
                if dh == F::zero() {
                    continue;
                }
                let row = &mut grad[h * arch.input_dim..(h + 1) * arch.input_dim];
                for (g, &x) in row.iter_mut().zip(&sample.features) {
                    *g = *g + dh * x;
                }
                grad[b1 + h] = grad[b1 + h] + dh;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy of `params` over every sample of `dataset`.
pub fn dataset_loss<F: Scalar>(params: &ModelParams<F>, dataset: &Dataset<F>) -> Result<F> {
    Ok(evaluate(params, dataset)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation<F> {
    pub accuracy: F,
    pub loss: F,
}

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy.
pub fn evaluate<F: Scalar>(params: &ModelParams<F>, dataset: &Dataset<F>) -> Result<Evaluation<F>> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let mut ws = Workspace::new(&params.arch);
    let mut total_loss = F::zero();
    let mut correct = 0usize;
    for sample in &dataset.samples {
        check_label(params, sample)?;
        compute_logits(params, &sample.features, &mut ws);
        total_loss = total_loss - log_softmax_at(&ws.logits, sample.label);
        if argmax(&ws.logits) == sample.label {
            correct += 1;
        }
    }
    let n = F::from_usize_lossy(dataset.len());
    Ok(Evaluation {
        accuracy: F::from_usize_lossy(correct) / n,
        loss: total_loss / n,
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<F> {
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub step_count: u64,
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(len: usize, learning_rate: F) -> Self {
        Self {
            first_moment: vec![F::zero(); len],
            second_moment: vec![F::zero(); len],
            step_count: 0,
            learning_rate,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            epsilon: F::lit(1e-8),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Scalar>(params: &mut ModelParams<F>, grad: &[F], state: &mut OptimizerState<F>) -> Result<()> {
    if grad.len() != params.values.len() || state.first_moment.len() != params.values.len() {
        return Err(Error::contract(format!(
            "adam length mismatch: params {}, grad {}, state {}",
            params.values.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite gradient entry {} at index {pos} (adam step {})",
            grad[pos], state.step_count
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let correction1 = F::one() - state.beta1.powi(t);
    let correction2 = F::one() - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((w, &g), m), s) in params
        .values
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (F::one() - b1) * g;
        *s = b2 * *s + (F::one() - b2) * g * g;
        let m_hat = *m / correction1;
        let s_hat = *s / correction2;
        *w = *w - state.learning_rate * m_hat / (s_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// `epochs` shuffled passes over `train` in mini-batches (last one may be short).
pub fn train_local<F: Scalar>(
    params: &mut ModelParams<F>,
    train: &Dataset<F>,
    epochs: usize,
    batch_size: usize,
    state: &mut OptimizerState<F>,
    rng: &mut SimRng,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::config("local training on an empty train set"));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::config(format!(
            "epochs ({epochs}) and batch_size ({batch_size}) must be >= 1"
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Sample<F>> = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train.samples[i].clone()));
            let (_, grad) = loss_and_grad(params, &batch)?;
            adam_step(params, &grad, state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_base_task;
    use proptest::prelude::*;

    fn sample(features: Vec<f64>, label: usize) -> Sample<f64> {
        Sample { features, label }
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(Arch::new(3, 0, 4).param_count(), 16);
        assert_eq!(Arch::new(3, 5, 4).param_count(), 15 + 5 + 20 + 4);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let arch = Arch::new(4, 3, 2);
        let a: ModelParams<f64> = init_params(arch, 1);
        let b: ModelParams<f64> = init_params(arch, 1);
        let c: ModelParams<f64> = init_params(arch, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // b1 then b2
        assert!(a.values[12..15].iter().all(|&v| v == 0.0));
        assert!(a.values[21..23].iter().all(|&v| v == 0.0));
        let bound = 1.0 / 2.0;
        assert!(a.values[..12].iter().all(|v| v.abs() <= bound));
        assert!(a.values[..12].iter().any(|&v| v != 0.0));

        let lin: ModelParams<f32> = init_params(Arch::new(4, 0, 3), 5);
        assert!(lin.values[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_predict_uniform() {
        let p = ModelParams::<f64>::zeros(Arch::new(3, 2, 4));
        let out = forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert!(out.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_built_logits_favor_class_zero() {
        // W = [[2, 0], [0, 1], [-1, -1]], b = [0.5, 0, 0]
        let arch = Arch::new(2, 0, 3);
        let p = ModelParams::from_values(arch, vec![2.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.5, 0.0, 0.0]).unwrap();
        let x = [1.0, 1.0];
        // direct matrix multiply: logits = (2.5, 1, -2)
        let logits = [2.0 * 1.0 + 0.5, 1.0, -2.0];
        let out = forward(&p, &x).unwrap();
        assert_eq!(argmax(&out), 0);
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (o, l) in out.iter().zip(logits) {
            assert!((o - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = ModelParams::<f64>::zeros(Arch::new(3, 0, 2));
        assert!(matches!(forward(&p, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_params_loss_is_ln_c() {
        let p = ModelParams::<f64>::zeros(Arch::new(2, 3, 5));
        let batch = vec![sample(vec![1.0, 2.0], 3), sample(vec![-1.0, 0.0], 0)];
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-9);
        let ds = Dataset {
            samples: batch,
            n_classes: 5,
        };
        assert!((dataset_loss(&p, &ds).unwrap() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_are_contract_violations() {
        let p = ModelParams::<f64>::zeros(Arch::new(2, 0, 2));
        assert!(matches!(loss_and_grad(&p, &[]), Err(Error::Contract(_))));
        let empty = Dataset {
            samples: vec![],
            n_classes: 2,
        };
        assert!(matches!(evaluate(&p, &empty), Err(Error::Contract(_))));
        assert!(matches!(dataset_loss(&p, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicating_batch_is_invariant() {
        let p: ModelParams<f64> = init_params(Arch::new(3, 4, 3), 9);
        let batch = vec![
            sample(vec![0.3, -1.0, 2.0], 0),
            sample(vec![1.5, 0.2, -0.7], 2),
            sample(vec![-0.4, 0.9, 0.1], 1),
        ];
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (l1, g1) = loss_and_grad(&p, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_model_has_tiny_loss() {
        // logits = 100 * x for a one-hot input: the correct class wins by 100.
        let arch = Arch::new(2, 0, 2);
        let p = ModelParams::from_values(arch, vec![100.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap();
        let ds = Dataset {
            samples: vec![sample(vec![1.0, 0.0], 0), sample(vec![0.0, 1.0], 1)],
            n_classes: 2,
        };
        let e = evaluate(&p, &ds).unwrap();
        assert!(e.loss < 1e-6);
        assert_eq!(e.accuracy, 1.0);
        let (l, _) = loss_and_grad(&p, &ds.samples).unwrap();
        assert!((l - e.loss).abs() < 1e-12);
    }

    #[test]
    fn zero_params_accuracy_is_one_over_c() {
        let ds = generate_base_task::<f64>(4, 3, 400, 2).unwrap();
        let p = ModelParams::zeros(Arch::new(3, 0, 4));
        let e = evaluate(&p, &ds).unwrap();
        assert!((e.accuracy - 0.25).abs() <= 0.05);
        assert!((e.loss - dataset_loss(&p, &ds).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let mut p: ModelParams<f64> = init_params(Arch::new(2, 0, 2), 0);
        let before = p.clone();
        let mut st = OptimizerState::new(p.values.len(), 0.01);
        adam_step(&mut p, &[0.0; 6], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Closed form after one step: m_hat = g, v_hat = g^2, so
        // delta = -lr * g / (|g| + eps).
        let lr = 0.01;
        let g = [3.0, -0.5, 1e-2, -7.0];
        let mut p = ModelParams::<f64>::from_values(Arch::new(1, 0, 2), vec![1.0; 4]).unwrap();
        let mut st = OptimizerState::new(4, lr);
        adam_step(&mut p, &g, &mut st).unwrap();
        for (w, gi) in p.values.iter().zip(g) {
            let expected = 1.0 - lr * gi / (gi.abs() + 1e-8);
            assert!(((w - 1.0) - (expected - 1.0)).abs() <= 1e-6 * lr);
            assert!(((w - 1.0) + lr * gi.signum()).abs() <= 1e-6 * lr);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = ModelParams::<f64>::zeros(Arch::new(1, 0, 2));
        let mut st = OptimizerState::new(4, 0.1);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 0.0, 0.0], &mut st).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(w) = (w - 3)^2 expressed through a 1-parameter "model".
        let arch = Arch::new(1, 0, 2);
        let mut p = ModelParams::<f64>::from_values(arch, vec![-2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(4, 0.1);
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let mut losses = vec![f(p.values[0])];
        for _ in 0..100 {
            let g = 2.0 * (p.values[0] - 3.0);
            adam_step(&mut p, &[g, 0.0, 0.0, 0.0], &mut st).unwrap();
            losses.push(f(p.values[0]));
        }
        for w in losses[5..].windows(2).take(30) {
            assert!(w[1] < w[0], "{w:?}");
        }
        assert!(*losses.last().unwrap() < 0.05 * losses[0]);
    }

    #[test]
    fn train_local_learns_separable_blobs() {
        let ds = generate_base_task::<f64>(2, 2, 200, 11).unwrap();
        let arch = Arch::new(2, 0, 2);
        let mut p = init_params(arch, 3);
        let mut st = OptimizerState::new(arch.param_count(), 0.05);
        let mut rng = rng::seeded(4);
        train_local(&mut p, &ds, 20, 8, &mut st, &mut rng).unwrap();
        assert!(evaluate(&p, &ds).unwrap().accuracy > 0.95);
        assert_eq!(st.step_count, 20 * 25);
    }

    #[test]
    fn train_local_is_deterministic_and_lr_zero_is_identity() {
        let ds = generate_base_task::<f64>(3, 4, 50, 1).unwrap();
        let arch = Arch::new(4, 5, 3);
        let run = |lr: f64| {
            let mut p = init_params(arch, 8);
            let mut st = OptimizerState::new(arch.param_count(), lr);
            train_local(&mut p, &ds, 3, 8, &mut st, &mut rng::seeded(2)).unwrap();
            p
        };
        assert_eq!(run(0.01), run(0.01));
        assert_eq!(run(0.0), init_params(arch, 8));
    }

    #[test]
    fn train_local_rejects_empty_or_zero_settings() {
        let arch = Arch::new(2, 0, 2);
        let mut p = ModelParams::<f64>::zeros(arch);
        let mut st = OptimizerState::new(arch.param_count(), 0.1);
        let empty = Dataset {
            samples: vec![],
            n_classes: 2,
        };
        let mut r = rng::seeded(0);
        assert!(matches!(
            train_local(&mut p, &empty, 1, 8, &mut st, &mut r),
            Err(Error::Config(_))
        ));
        let ds = generate_base_task::<f64>(2, 2, 10, 0).unwrap();
        assert!(train_local(&mut p, &ds, 0, 8, &mut st, &mut r).is_err());
        assert!(train_local(&mut p, &ds, 1, 0, &mut st, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn forward_output_is_normalized(
            seed in 0u64..10_000,
            hidden in 0usize..5,
            x in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let p: ModelParams<f64> = init_params(Arch::new(3, hidden, 4), seed);
            let scaled = ModelParams { arch: p.arch, values: p.values.iter().map(|v| v * 10.0).collect() };
            let out = forward(&scaled, &x).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&v| v >= 0.0));
        }
    }
}
