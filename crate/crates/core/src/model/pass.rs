//! Analytic forward and backward passes for every adapter.
//!
//! Per hidden layer: `z = h_prev·W + b`, `a = relu(z)`, and the adapter's
//! output `h = γ ⊙ a ⊙ g` with `g = σ(s(z − τ))` (soft) or `1[z > τ]`
//! (hard). Adapters without a threshold use `g ≡ 1`, without a gain `γ ≡ 1`.

use std::borrow::Cow;

use super::adapter::GateView;
use super::{Adapter, Backbone, HIDDEN_LAYERS, INPUT_DIM};
use crate::error::{Error, Result};
use crate::ndcore::{
    broadcast_row, elementwise, matmul, matmul_nt, matmul_tn, ElementOp, Matrix, Real, RowOp,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Debug)]
pub struct HiddenTrace {
    /// Layer input (the previous layer's `h`, or the batch itself).
    pub input: Matrix,
    pub z: Matrix,
    pub act: Matrix,
    pub gate: Option<Matrix>,
    pub h: Matrix,
    lora_u: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub hidden: [HiddenTrace; HIDDEN_LAYERS],
    pub logits: Matrix,
    pub gate_mode: GateMode,
    out_lora_u: Option<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    pub fn gates(&self) -> Option<[&Matrix; HIDDEN_LAYERS]> {
        match (&self.hidden[0].gate, &self.hidden[1].gate) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        }
    }
}

/// Named gradients, aligned one-to-one with [`Adapter::params`].
pub type AdapterGrads = Vec<(&'static str, Matrix)>;

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Linear<'a> {
    w: &'a Matrix,
    b: Cow<'a, Matrix>,
    lora: Option<(&'a Matrix, &'a Matrix, Real)>,
}

fn linear<'a>(bb: &'a Backbone, ad: &'a Adapter, layer: usize) -> Result<Linear<'a>> {
    Ok(match ad {
        Adapter::FullFt(own) => {
            let (w, b) = own.layer(layer);
            Linear {
                w,
                b: Cow::Borrowed(b),
                lora: None,
            }
        }
        Adapter::BitFit { bias_delta } => {
            let (w, b) = bb.layer(layer);
            Linear {
                w,
                b: Cow::Owned(elementwise(b, &bias_delta[layer], ElementOp::Add)?),
                lora: None,
            }
        }
        Adapter::Lora(p) => {
            let (w, b) = bb.layer(layer);
            Linear {
                w,
                b: Cow::Borrowed(b),
                lora: Some((&p.a[layer], &p.b[layer], p.scale())),
            }
        }
        _ => {
            let (w, b) = bb.layer(layer);
            Linear {
                w,
                b: Cow::Borrowed(b),
                lora: None,
            }
        }
    })
}

fn affine(x: &Matrix, lin: &Linear<'_>) -> Result<(Matrix, Option<Matrix>)> {
    let mut z = broadcast_row(&matmul(x, lin.w)?, &lin.b, RowOp::Add)?;
    let u = match lin.lora {
        Some((a, b, scale)) => {
            let u = matmul_nt(x, a)?;
            z.axpy(scale, &matmul_nt(&u, b)?)?;
            Some(u)
        }
        None => None,
    };
    Ok((z, u))
}

fn gate_values(z: &Matrix, tau: &Matrix, sharpness: Real, mode: GateMode) -> Result<Matrix> {
    let shifted = broadcast_row(z, &tau.scale(-1.0), RowOp::Add)?;
    Ok(match mode {
        GateMode::Soft => shifted.map(|d| sigmoid(sharpness * d)),
        GateMode::Hard => shifted.map(|d| if d > 0.0 { 1.0 } else { 0.0 }),
    })
}

fn hidden_forward(
    input: Matrix,
    lin: &Linear<'_>,
    view: &GateView<'_>,
    mode: GateMode,
) -> Result<HiddenTrace> {
    let (z, lora_u) = affine(&input, lin)?;
    let act = z.map(|v| v.max(0.0));
    let gate = match view.tau {
        Some(tau) => Some(gate_values(&z, tau, view.sharpness, mode)?),
        None => None,
    };
    let mut h = match view.gamma {
        Some(gamma) => broadcast_row(&act, gamma, RowOp::Mul)?,
        None => act.clone(),
    };
    if let Some(g) = &gate {
        h = elementwise(&h, g, ElementOp::Mul)?;
    }
    Ok(HiddenTrace {
        input,
        z,
        act,
        gate,
        h,
        lora_u,
    })
}

pub fn forward(bb: &Backbone, ad: &Adapter, x: &Matrix, mode: GateMode) -> Result<ForwardTrace> {
    if x.cols() != INPUT_DIM {
        return Err(Error::Shape(format!(
            "forward expects {INPUT_DIM} input features, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    let l1 = hidden_forward(x.clone(), &linear(bb, ad, 0)?, &ad.gate_view(0), mode)?;
    let l2 = hidden_forward(l1.h.clone(), &linear(bb, ad, 1)?, &ad.gate_view(1), mode)?;
    let (logits, out_lora_u) = affine(&l2.h, &linear(bb, ad, 2)?)?;
    Ok(ForwardTrace {
        hidden: [l1, l2],
        logits,
        gate_mode: mode,
        out_lora_u,
    })
}

/// Logits only.
pub fn predict(bb: &Backbone, ad: &Adapter, x: &Matrix, mode: GateMode) -> Result<Matrix> {
    Ok(forward(bb, ad, x, mode)?.logits)
}

struct GradSink(Vec<(&'static str, Matrix)>);

impl GradSink {
    fn put(&mut self, name: &'static str, g: Matrix) {
        self.0.push((name, g));
    }

    fn ordered(mut self, ad: &Adapter) -> AdapterGrads {
        ad.params()
            .iter()
            .map(|(name, p)| {
                let pos = self
                    .0
                    .iter()
                    .position(|(n, _)| n == name)
                    .unwrap_or_else(|| panic!("no gradient computed for {name}"));
                let (n, g) = self.0.swap_remove(pos);
                debug_assert_eq!(g.shape(), p.shape(), "{n}");
                (n, g)
            })
            .collect()
    }
}

const FULL_W: [&str; 3] = ["w1", "w2", "w3"];
const FULL_B: [&str; 3] = ["b1", "b2", "b3"];
const BITFIT: [&str; 3] = ["db1", "db2", "db3"];
const LORA_A: [&str; 3] = ["lora_a1", "lora_a2", "lora_a3"];
const LORA_B: [&str; 3] = ["lora_b1", "lora_b2", "lora_b3"];
const TAU: [&str; 2] = ["tau1", "tau2"];
const GAMMA: [&str; 2] = ["gamma1", "gamma2"];

/// Parameter gradients of linear layer `layer` from `dz`; returns the
/// gradient with respect to the layer input when `need_input` is set.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    ad: &Adapter,
    lin: &Linear<'_>,
    layer: usize,
    input: &Matrix,
    lora_u: Option<&Matrix>,
    dz: &Matrix,
    need_input: bool,
    sink: &mut GradSink,
) -> Result<Option<Matrix>> {
    let mut du = None;
    match ad {
        Adapter::FullFt(_) => {
            sink.put(FULL_W[layer], matmul_tn(input, dz)?);
            sink.put(FULL_B[layer], dz.sum_rows());
        }
        Adapter::BitFit { .. } => sink.put(BITFIT[layer], dz.sum_rows()),
        Adapter::Lora(_) => {
            let (a, b, scale) = lin.lora.expect("lora factors");
            let u = lora_u.expect("lora trace");
            sink.put(LORA_B[layer], matmul_tn(dz, u)?.scale(scale));
            let d = matmul(dz, b)?.scale(scale);
            sink.put(LORA_A[layer], matmul_tn(&d, input)?);
            du = Some((d, a));
        }
        _ => {}
    }
    if !need_input {
        return Ok(None);
    }
    let mut dx = matmul_nt(dz, lin.w)?;
    if let Some((d, a)) = du {
        dx = elementwise(&dx, &matmul(&d, a)?, ElementOp::Add)?;
    }
    Ok(Some(dx))
}

/// From `dL/dh` (and any direct `dL/dg`) to `dL/dz`, emitting gate and gain
/// gradients along the way.
fn hidden_backward(
    trace: &HiddenTrace,
    view: &GateView<'_>,
    layer: usize,
    dh: &Matrix,
    dgate_extra: Option<&Matrix>,
    sink: &mut GradSink,
) -> Result<Matrix> {
    let n = dh.len();
    let d = trace.z.cols();
    let z = trace.z.as_slice();
    let act = trace.act.as_slice();
    let dh = dh.as_slice();
    let gamma = |j: usize| view.gamma.map_or(1.0, |g| g.as_slice()[j]);

    let mut dz = vec![0.0; n];
    match (view.tau, &trace.gate) {
        (Some(_), Some(gate)) => {
            let g = gate.as_slice();
            let s = view.sharpness;
            let mut dtau = Matrix::zeros(1, d);
            let mut dgamma = Matrix::zeros(1, d);
            for i in 0..n {
                let j = i % d;
                let gam = gamma(j);
                let slope = s * g[i] * (1.0 - g[i]);
                let mut dg = dh[i] * gam * act[i];
                if let Some(extra) = dgate_extra {
                    dg += extra.as_slice()[i];
                }
                dgamma.as_mut_slice()[j] += dh[i] * act[i] * g[i];
                dtau.as_mut_slice()[j] -= dg * slope;
                let relu_grad = if z[i] > 0.0 { 1.0 } else { 0.0 };
                dz[i] = dh[i] * gam * relu_grad * g[i] + dg * slope;
            }
            sink.put(TAU[layer], dtau);
            if view.gamma.is_some() {
                sink.put(GAMMA[layer], dgamma);
            }
        }
        _ => {
            let mut dgamma = Matrix::zeros(1, d);
            for i in 0..n {
                let j = i % d;
                dgamma.as_mut_slice()[j] += dh[i] * act[i];
                if z[i] > 0.0 {
                    dz[i] = dh[i] * gamma(j);
                }
            }
            if view.gamma.is_some() {
                sink.put(GAMMA[layer], dgamma);
            }
        }
    }
    Matrix::from_vec(trace.z.rows(), d, dz)
}

/// Gradients of the adapter's trainable parameters given `dL/dlogits` and,
/// optionally, direct gradients `dL/dg` on each hidden layer's gate (the
/// sparsity penalty). Frozen backbone arrays never receive gradients unless
/// the adapter owns a trainable copy of them.
pub fn backward(
    trace: &ForwardTrace,
    bb: &Backbone,
    ad: &Adapter,
    dlogits: &Matrix,
    gate_grads: Option<&[Matrix; HIDDEN_LAYERS]>,
) -> Result<AdapterGrads> {
    if ad.is_gated() && trace.gate_mode == GateMode::Hard {
        return Err(Error::Usage(
            "backward through a hard gate is undefined; train with soft gates".into(),
        ));
    }
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::Shape(format!(
            "dlogits {}x{} vs logits {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            trace.logits.rows(),
            trace.logits.cols()
        )));
    }
    let mut sink = GradSink(Vec::new());
    if matches!(ad, Adapter::Frozen) {
        return Ok(sink.ordered(ad));
    }

    let out = linear(bb, ad, 2)?;
    let mut dh = linear_backward(
        ad,
        &out,
        2,
        &trace.hidden[1].h,
        trace.out_lora_u.as_ref(),
        dlogits,
        true,
        &mut sink,
    )?
    .expect("input grad requested");

    for layer in (0..HIDDEN_LAYERS).rev() {
        let ht = &trace.hidden[layer];
        let extra = gate_grads.map(|g| &g[layer]);
        let dz = hidden_backward(ht, &ad.gate_view(layer), layer, &dh, extra, &mut sink)?;
        let lin = linear(bb, ad, layer)?;
        let next = linear_backward(
            ad,
            &lin,
            layer,
            &ht.input,
            ht.lora_u.as_ref(),
            &dz,
            layer > 0,
            &mut sink,
        )?;
        if let Some(next) = next {
            dh = next;
        }
    }
    Ok(sink.ordered(ad))
}
