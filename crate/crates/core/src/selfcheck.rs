//! Finite-difference gradient checks and structural invariants, shared by
//! the unit tests and `taugate check`.

use crate::data::Batch;
use crate::model::checkpoint;
use crate::model::{
    backward, count_trainable, forward, predict, Adapter, AdapterConfig, Backbone, GateMode,
    Method, INPUT_DIM, NUM_CLASSES,
};
use crate::ndcore::{rng_normal, Matrix, Real, Rng};
use crate::train::loss_and_grad;
use crate::Result;

pub const FD_EPS: Real = 1e-3;
pub const FD_BATCH: usize = 8;
const REL_TOL: Real = 1e-2;
const ABS_TOL: Real = 1e-4;
const TINY: Real = 1e-3;

/// Expected trainable counts for the 784→128→128→10 backbone with rank 8.
pub const EXPECTED_PARAMS: [(Method, usize); 7] = [
    (Method::Frozen, 0),
    (Method::BitFit, 266),
    (Method::GainOnly, 256),
    (Method::TauOnly, 256),
    (Method::TauGate, 512),
    (Method::Lora, 10448),
    (Method::FullFt, 118282),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Accepts `analytic` against `numeric` at 1% relative error, or at an
/// absolute 1e-4 when both are below 1e-3 in magnitude.
pub fn grads_agree(analytic: Real, numeric: Real) -> bool {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < TINY {
        diff < ABS_TOL
    } else {
        diff / scale < REL_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub method: Method,
    pub lambda: Real,
    pub checked: usize,
    /// Coordinates skipped because a ReLU changed sign within ±ε.
    pub skipped: usize,
    /// (param name, flat index, analytic, numeric) for each disagreement.
    pub failures: Vec<(&'static str, usize, Real, Real)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub fn random_batch(rng: &mut Rng, n: usize) -> Batch {
    let inputs = rng_normal(rng, n, INPUT_DIM, 0.3, 0.3).map(|v| v.clamp(0.0, 1.0));
    let targets = (0..n).map(|_| rng.below(NUM_CLASSES as u64) as u8).collect();
    Batch { inputs, targets }
}

/// Adapter of kind `method` with every parameter moved off its init so that
/// no gradient path is trivially zero (LoRA's B in particular).
pub fn perturbed_adapter(method: Method, bb: &Backbone, rng: &mut Rng) -> Adapter {
    let mut ad = Adapter::init(method, bb, rng, &AdapterConfig::default());
    for p in ad.params_mut() {
        let noise = rng_normal(rng, p.rows(), p.cols(), 0.0, 0.1);
        for (v, n) in p.as_mut_slice().iter_mut().zip(noise.as_slice()) {
            *v += n;
        }
    }
    ad
}

fn relu_pattern(bb: &Backbone, ad: &Adapter, x: &Matrix) -> Result<Vec<bool>> {
    let t = forward(bb, ad, x, GateMode::Soft)?;
    Ok(t.hidden
        .iter()
        .flat_map(|h| h.z.as_slice().iter().map(|&z| z > 0.0))
        .collect())
}

fn total_loss(bb: &Backbone, ad: &Adapter, batch: &Batch, lambda: Real) -> Result<Real> {
    let t = forward(bb, ad, &batch.inputs, GateMode::Soft)?;
    Ok(loss_and_grad(&t, &batch.targets, lambda).loss)
}

/// Central-difference check of every trainable array, at most
/// `max_coords` sampled coordinates per array.
pub fn grad_check(
    method: Method,
    lambda: Real,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let bb = Backbone::init(&mut rng);
    let mut ad = perturbed_adapter(method, &bb, &mut rng);
    let batch = random_batch(&mut rng, FD_BATCH);

    let trace = forward(&bb, &ad, &batch.inputs, GateMode::Soft)?;
    let out = loss_and_grad(&trace, &batch.targets, lambda);
    let grads = backward(&trace, &bb, &ad, &out.dlogits, out.gate_grads.as_ref())?;
    let base_pattern = relu_pattern(&bb, &ad, &batch.inputs)?;

    let mut report = GradCheck {
        method,
        lambda,
        checked: 0,
        skipped: 0,
        failures: Vec::new(),
    };
    for (k, (name, g)) in grads.iter().enumerate() {
        let n = g.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.below(n as u64) as usize).collect()
        };
        for idx in coords {
            let orig = ad.params_mut()[k].as_slice()[idx];
            ad.params_mut()[k].as_mut_slice()[idx] = orig + FD_EPS;
            let up = total_loss(&bb, &ad, &batch, lambda)?;
            let up_pattern = relu_pattern(&bb, &ad, &batch.inputs)?;
            ad.params_mut()[k].as_mut_slice()[idx] = orig - FD_EPS;
            let down = total_loss(&bb, &ad, &batch, lambda)?;
            let down_pattern = relu_pattern(&bb, &ad, &batch.inputs)?;
            ad.params_mut()[k].as_mut_slice()[idx] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_EPS);
            let analytic = g.as_slice()[idx];
            report.checked += 1;
            if !grads_agree(analytic, numeric) {
                report.failures.push((name, idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}

fn outcome(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Gradient checks for every trainable method (gated ones also with λ > 0),
/// plus the invariants: trainable counts, identity at init, the large-
/// sharpness limit, and checkpoint round trips.
pub fn run_all(max_coords: usize) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();

    for (method, expect) in EXPECTED_PARAMS {
        let bb = Backbone::init(&mut Rng::new(0));
        let ad = Adapter::init(method, &bb, &mut Rng::new(1), &AdapterConfig::default());
        let got = count_trainable(&ad);
        results.push(outcome(
            format!("params/{method}"),
            got == expect,
            format!("{got} trainable, expected {expect}"),
        ));
    }

    for method in Method::ALL {
        if method == Method::Frozen {
            continue;
        }
        let mut lambdas = vec![0.0];
        if method.is_gated() {
            lambdas.push(0.1);
        }
        for lambda in lambdas {
            let r = grad_check(method, lambda, max_coords, 7)?;
            let detail = match r.failures.first() {
                None => format!("{} coords ok, {} skipped at ReLU kinks", r.checked, r.skipped),
                Some((name, idx, a, n)) => format!(
                    "{} of {} coords disagree; first {name}[{idx}] analytic {a:.6e} numeric {n:.6e}",
                    r.failures.len(),
                    r.checked
                ),
            };
            results.push(outcome(format!("grad/{method}/lambda={lambda}"), r.passed(), detail));
        }
    }

    let mut rng = Rng::new(11);
    let bb = Backbone::init(&mut rng);
    let batch = random_batch(&mut rng, 16);
    let frozen = predict(&bb, &Adapter::Frozen, &batch.inputs, GateMode::Soft)?;
    for method in [Method::BitFit, Method::GainOnly, Method::Lora, Method::FullFt] {
        let ad = Adapter::init(method, &bb, &mut rng, &AdapterConfig::default());
        let diff = predict(&bb, &ad, &batch.inputs, GateMode::Soft)?.max_abs_diff(&frozen);
        results.push(outcome(
            format!("identity-at-init/{method}"),
            diff < 1e-12,
            format!("max |Δlogit| {diff:.3e}"),
        ));
    }

    let sharp = AdapterConfig {
        sharpness: 1e6,
        ..AdapterConfig::default()
    };
    let ad = Adapter::init(Method::TauGate, &bb, &mut rng, &sharp);
    let diff = predict(&bb, &ad, &batch.inputs, GateMode::Soft)?.max_abs_diff(&frozen);
    results.push(outcome(
        "sharp-gate-limit/taugate",
        diff < 1e-4,
        format!("max |Δlogit| {diff:.3e} at s=1e6, tau=0"),
    ));

    for method in Method::ALL {
        let ad = perturbed_adapter(method, &bb, &mut rng);
        let (bb2, ad2) = checkpoint::decode(&checkpoint::encode(&bb, &ad))?;
        results.push(outcome(
            format!("checkpoint/{method}"),
            bb2 == bb && ad2 == ad,
            "encode/decode round trip",
        ));
    }

    Ok(results)
}
