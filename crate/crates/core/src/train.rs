//! Loss with the optional gate-sparsity penalty, classical momentum SGD, and
//! the foundation → specialization pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, predict, Adapter, AdapterConfig, AdapterGrads, Backbone, ForwardTrace,
    GateMode, Method, HIDDEN_LAYERS,
};
use crate::ndcore::{Matrix, Real, Rng};

/// Stream ids under the run seed. Every method within a seed sees the same
/// foundation and the same specialization batch order.
pub mod streams {
    pub const BACKBONE_INIT: u64 = 1;
    pub const MIXTURE: u64 = 2;
    pub const FOUNDATION_SHUFFLE: u64 = 3;
    pub const ADAPTER_INIT: u64 = 4;
    pub const ADAPT_SHUFFLE: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate of the foundation run.
    pub lr: Real,
    /// Learning rate of the specialization run; unset means `lr`.
    pub adapt_lr: Option<Real>,
    pub momentum: Real,
    pub batch_size: usize,
    pub foundation_epochs: usize,
    pub adapt_epochs: usize,
    pub lambda_sparsity: Real,
    pub gate_sharpness: Real,
    pub seed: u64,
    pub lora_rank: usize,
    /// Unset means alpha = rank.
    pub lora_alpha: Option<Real>,
    /// Use only the first N training images (desk-scale smoke runs).
    pub train_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            adapt_lr: Some(0.03),
            momentum: 0.9,
            batch_size: 256,
            foundation_epochs: 2,
            adapt_epochs: 1,
            lambda_sparsity: 0.0,
            gate_sharpness: 10.0,
            seed: 0,
            lora_rank: 8,
            lora_alpha: None,
            train_limit: Some(10_000),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML key–value file; absent keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.adapt_lr.is_some_and(|v| !(v > 0.0)) {
            return fail("adapt_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lambda_sparsity >= 0.0) {
            return fail("lambda_sparsity must be non-negative");
        }
        if !(self.gate_sharpness > 0.0) {
            return fail("gate_sharpness must be positive");
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be positive");
        }
        Ok(())
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            sharpness: self.gate_sharpness,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }

    pub fn adapt_lr(&self) -> Real {
        self.adapt_lr.unwrap_or(self.lr)
    }

    pub fn rng(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream)
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Task loss plus the weighted penalty.
    pub loss: Real,
    pub cross_entropy: Real,
    pub penalty: Real,
    pub dlogits: Matrix,
    /// `dL/dg` per hidden layer; `None` when the penalty is off or there are no gates.
    pub gate_grads: Option<[Matrix; HIDDEN_LAYERS]>,
}

/// Mean softmax cross-entropy plus `lambda · Σ_layers mean(g)`, the mean
/// taken over batch and units.
pub fn loss_and_grad(trace: &ForwardTrace, targets: &[u8], lambda: Real) -> LossOutput {
    let logits = &trace.logits;
    let (n, k) = logits.shape();
    assert_eq!(targets.len(), n, "one target per row");
    let mut dlogits = Matrix::zeros(n, k);
    let mut ce = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        assert!(t < k, "target {t} out of range");
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let sum: Real = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        ce += log_z - row[t];
        let out = &mut dlogits.as_mut_slice()[i * k..(i + 1) * k];
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - log_z).exp() / n as Real;
        }
        out[t] -= 1.0 / n as Real;
    }
    ce /= n as Real;

    let (penalty, gate_grads) = match trace.gates() {
        Some(gates) if lambda != 0.0 => {
            let p = lambda * gates.iter().map(|g| g.mean()).sum::<Real>();
            let grads = gates.map(|g| Matrix::filled(g.rows(), g.cols(), lambda / g.len() as Real));
            (p, Some(grads))
        }
        _ => (0.0, None),
    };
    LossOutput {
        loss: ce + penalty,
        cross_entropy: ce,
        penalty,
        dlogits,
        gate_grads,
    }
}

/// One velocity buffer per trainable array, zero-initialized.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn for_adapter(ad: &Adapter) -> Self {
        Self {
            velocity: ad
                .params()
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }
}

/// Heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: Vec<&mut Matrix>,
    grads: &AdapterGrads,
    state: &mut OptimizerState,
    lr: Real,
    momentum: Real,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, (_, g)), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "sgd_step: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Trains `ad`'s parameters in place over `epochs` shuffled passes of `ds`;
/// returns the per-step total loss.
pub fn fit(
    bb: &Backbone,
    ad: &mut Adapter,
    ds: &Dataset,
    epochs: usize,
    lr: Real,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<Real>> {
    let mut losses = Vec::new();
    if matches!(ad, Adapter::Frozen) {
        return Ok(losses);
    }
    let mut state = OptimizerState::for_adapter(ad);
    for _ in 0..epochs {
        for batch in batches(ds, cfg.batch_size, rng, true) {
            let trace = forward(bb, ad, &batch.inputs, GateMode::Soft)?;
            let out = loss_and_grad(&trace, &batch.targets, cfg.lambda_sparsity);
            let grads = backward(&trace, bb, ad, &out.dlogits, out.gate_grads.as_ref())?;
            sgd_step(ad.params_mut(), &grads, &mut state, lr, cfg.momentum)?;
            losses.push(out.loss);
        }
    }
    Ok(losses)
}

/// Trains every backbone weight on the mode mixture; the result is the
/// foundation that the specialization methods then freeze.
pub fn train_foundation(bb: Backbone, mixture: &Dataset, cfg: &TrainConfig) -> Result<Backbone> {
    let scratch = bb.clone();
    let mut ad = Adapter::FullFt(bb);
    let plain = TrainConfig {
        lambda_sparsity: 0.0,
        ..cfg.clone()
    };
    fit(
        &scratch,
        &mut ad,
        mixture,
        cfg.foundation_epochs,
        cfg.lr,
        &plain,
        &mut cfg.rng(streams::FOUNDATION_SHUFFLE),
    )?;
    match ad {
        Adapter::FullFt(trained) => Ok(trained),
        _ => unreachable!(),
    }
}

#[derive(Clone, Debug)]
pub struct Specialization {
    pub adapter: Adapter,
    pub losses: Vec<Real>,
}

/// Fits a fresh adapter of kind `method` on `target` with the backbone frozen.
pub fn specialize(
    bb: &Backbone,
    method: Method,
    target: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Specialization> {
    let mut ad = Adapter::init(method, bb, rng, &cfg.adapter_config());
    let losses = fit(
        bb,
        &mut ad,
        target,
        cfg.adapt_epochs,
        cfg.adapt_lr(),
        cfg,
        &mut cfg.rng(streams::ADAPT_SHUFFLE),
    )?;
    Ok(Specialization {
        adapter: ad,
        losses,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &Matrix, targets: &[u8]) -> usize {
    (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == targets[i] as usize)
        .count()
}

const EVAL_CHUNK: usize = 1000;

pub fn evaluate(bb: &Backbone, ad: &Adapter, test: &Dataset, mode: GateMode) -> Result<Real> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for batch in batches(test, EVAL_CHUNK, &mut Rng::new(0), false) {
        correct += accuracy_from_logits(&predict(bb, ad, &batch.inputs, mode)?, &batch.targets);
    }
    Ok(correct as Real / test.len() as Real)
}
