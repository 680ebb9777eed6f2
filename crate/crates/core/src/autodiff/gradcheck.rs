//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values on inference tapes, so it
//! never touches a backward rule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Reduction, Tape, Var};
use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub entries_per_param: Option<usize>,
    pub seed: u64,
    /// Probes worse than this are retried at smaller steps. A stencil that
    /// straddles a ReLU kink is wrong at that step only, a wrong backward
    /// rule is wrong at every step.
    pub retry_above: f64,
}

const RETRY_SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, entries_per_param: None, seed: 0, retry_above: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval_loss<S: Scalar>(
    store: &ParamStore<S>,
    f: &impl Fn(&mut Tape<'_, S>) -> Result<Var, AutodiffError>,
) -> Result<f64, AutodiffError> {
    let mut tape = Tape::inference(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for entries of the parameters in `ids`.
pub fn check_param_gradients<S: Scalar>(
    store: &ParamStore<S>,
    ids: &[ParamId],
    cfg: GradCheck,
    f: impl Fn(&mut Tape<'_, S>) -> Result<Var, AutodiffError>,
) -> Result<GradReport, AutodiffError> {
    check_param_gradients_with(store, ids, cfg, None, f)
}

/// As [`check_param_gradients`], optionally injecting a backward fault.
pub fn check_param_gradients_with<S: Scalar>(
    store: &ParamStore<S>,
    ids: &[ParamId],
    cfg: GradCheck,
    fault: Option<crate::autodiff::OpKind>,
    f: impl Fn(&mut Tape<'_, S>) -> Result<Var, AutodiffError>,
) -> Result<GradReport, AutodiffError> {
    let analytic = {
        let mut tape = Tape::new(store);
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let loss = f(&mut tape)?;
        tape.backward(loss)?.params
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_store = store.clone();
    let mut report = GradReport::default();
    for &id in ids {
        let n = store.value(id).numel();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(k) = cfg.entries_per_param {
            entries.shuffle(&mut rng);
            entries.truncate(k);
        }
        for idx in entries {
            let original = store.value(id).data()[idx];
            let a = analytic.get(id).data()[idx].as_f64();
            let (mut numeric, mut rel_err) = (f64::NAN, f64::INFINITY);
            for shrink in RETRY_SHRINK {
                let step = cfg.step * shrink;
                let h = S::from_f64_lossy(step);
                probe_store.value_mut(id).data_mut()[idx] = original + h;
                let plus = eval_loss(&probe_store, &f)?;
                probe_store.value_mut(id).data_mut()[idx] = original - h;
                let minus = eval_loss(&probe_store, &f)?;
                probe_store.value_mut(id).data_mut()[idx] = original;
                let n = (plus - minus) / (2.0 * step);
                let e = relative_error(a, n);
                if e < rel_err {
                    (numeric, rel_err) = (n, e);
                }
                if rel_err < cfg.retry_above {
                    break;
                }
            }
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.probes.push(Probe { param: store.name(id).to_string(), index: idx, analytic: a, numeric, rel_err });
        }
    }
    Ok(report)
}

/// Gradient check with respect to a differentiable input tensor.
pub fn check_input_gradients<S: Scalar>(
    store: &ParamStore<S>,
    x: &Tensor<S>,
    cfg: GradCheck,
    f: impl Fn(&mut Tape<'_, S>, Var) -> Result<Var, AutodiffError>,
) -> Result<GradReport, AutodiffError> {
    let analytic = {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let loss = f(&mut tape, xv)?;
        let back = tape.backward(loss)?;
        back.leaf(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: &Tensor<S>| -> Result<f64, AutodiffError> {
        let mut tape = Tape::inference(store);
        let xv = tape.constant(probe.clone());
        let loss = f(&mut tape, xv)?;
        Ok(tape.value(loss).item().as_f64())
    };
    let mut probe = x.clone();
    let mut report = GradReport::default();
    let h = S::from_f64_lossy(cfg.step);
    for idx in 0..x.numel() {
        let original = x.data()[idx];
        probe.data_mut()[idx] = original + h;
        let plus = eval(&probe)?;
        probe.data_mut()[idx] = original - h;
        let minus = eval(&probe)?;
        probe.data_mut()[idx] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic.data()[idx].as_f64();
        let rel_err = relative_error(a, numeric);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        report.probes.push(Probe { param: "input".into(), index: idx, analytic: a, numeric, rel_err });
    }
    Ok(report)
}

/// A smooth, nonlinear scalar of every entry of `y`: random projection to
/// three logits per row followed by cross-entropy. Used as the loss in
/// gradient checks where `sum(y)` would be degenerate (e.g. after layer norm).
pub fn probe_loss<S: Scalar>(tape: &mut Tape<'_, S>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let (rows, cols) = (tape.shape(y)[0], tape.shape(y)[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<S> = (0..cols * 3).map(|_| S::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect();
    let r = tape.constant(Tensor::new(vec![cols, 3], proj)?);
    let logits = tape.matmul(y, r)?;
    let targets: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    tape.cross_entropy(logits, &targets, None, Reduction::Mean)
}
