//! Gate instrumentation: strongly-active fractions, per-neuron gate masks and
//! their Jaccard overlap, and the compute a hard gate would skip.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{forward, Adapter, Backbone, GateMode, HIDDEN_LAYERS};
use crate::ndcore::{Matrix, Real};

/// Gate values above this count as strongly active.
pub const HIGH_ACT_THRESHOLD: Real = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub mean_gate: [Real; HIDDEN_LAYERS],
    pub high_act_frac: [Real; HIDDEN_LAYERS],
    /// Mean of the per-layer fractions.
    pub avg_high_act_frac: Real,
}

impl GateStats {
    pub fn mean_gate_activity(&self) -> Real {
        self.mean_gate.iter().sum::<Real>() / HIDDEN_LAYERS as Real
    }
}

fn gates(bb: &Backbone, ad: &Adapter, batch: &Batch, mode: GateMode) -> Result<[Matrix; 2]> {
    if !ad.is_gated() {
        return Err(Error::Usage(format!(
            "{} adapter has no gates to inspect",
            ad.method()
        )));
    }
    let trace = forward(bb, ad, &batch.inputs, mode)?;
    let [a, b] = trace.hidden;
    Ok([a.gate.expect("gated"), b.gate.expect("gated")])
}

fn fraction_above(m: &Matrix, t: Real) -> Real {
    if m.is_empty() {
        return 0.0;
    }
    m.as_slice().iter().filter(|&&v| v > t).count() as Real / m.len() as Real
}

/// Soft-gate statistics over every (example, unit) pair of `batch`.
pub fn high_act_fraction(bb: &Backbone, ad: &Adapter, batch: &Batch) -> Result<GateStats> {
    let g = gates(bb, ad, batch, GateMode::Soft)?;
    let high = [
        fraction_above(&g[0], HIGH_ACT_THRESHOLD),
        fraction_above(&g[1], HIGH_ACT_THRESHOLD),
    ];
    Ok(GateStats {
        mean_gate: [g[0].mean(), g[1].mean()],
        high_act_frac: high,
        avg_high_act_frac: (high[0] + high[1]) / 2.0,
    })
}

/// Per-layer set of units, one flag per neuron.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMask {
    pub layers: Vec<Vec<bool>>,
}

impl GateMask {
    pub fn count(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&b| b).count()
    }
}

/// A unit belongs to the mask when its batch-mean soft gate exceeds `threshold`.
pub fn gate_mask(bb: &Backbone, ad: &Adapter, batch: &Batch, threshold: Real) -> Result<GateMask> {
    let g = gates(bb, ad, batch, GateMode::Soft)?;
    let layers = g
        .iter()
        .map(|m| {
            let means = m.sum_rows().scale(1.0 / m.rows().max(1) as Real);
            means.as_slice().iter().map(|&v| v > threshold).collect()
        })
        .collect();
    Ok(GateMask { layers })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOverlap {
    pub per_layer: Vec<Real>,
    pub average: Real,
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets defined as identical.
pub fn jaccard(a: &[bool], b: &[bool]) -> Real {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as Real / union as Real
    }
}

pub fn jaccard_overlap(a: &GateMask, b: &GateMask) -> Result<MaskOverlap> {
    if a.layers.len() != b.layers.len()
        || a.layers.iter().zip(&b.layers).any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::Shape("gate masks have different layer structure".into()));
    }
    let per_layer: Vec<Real> = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| jaccard(x, y))
        .collect();
    let average = per_layer.iter().sum::<Real>() / per_layer.len().max(1) as Real;
    Ok(MaskOverlap { per_layer, average })
}

/// Fraction of (example, unit) pairs whose hard gate is closed, averaged
/// over the hidden layers: the share of hidden units a sparse kernel could skip.
pub fn hard_gate_skip_fraction(bb: &Backbone, ad: &Adapter, batch: &Batch) -> Result<Real> {
    let g = gates(bb, ad, batch, GateMode::Hard)?;
    Ok(g.iter().map(|m| 1.0 - m.mean()).sum::<Real>() / HIDDEN_LAYERS as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, Method, INPUT_DIM};
    use crate::ndcore::{rng_normal, Rng};

    fn setup() -> (Backbone, Batch) {
        let bb = Backbone::init(&mut Rng::new(4));
        let inputs =
            rng_normal(&mut Rng::new(5), 32, INPUT_DIM, 0.2, 0.3).map(|v| v.clamp(0.0, 1.0));
        (
            bb,
            Batch {
                inputs,
                targets: vec![0; 32],
            },
        )
    }

    fn taugate_with_tau(bb: &Backbone, tau: Real) -> Adapter {
        let mut ad = Adapter::init(Method::TauGate, bb, &mut Rng::new(0), &AdapterConfig::default());
        for t in ad.tau_mut().unwrap() {
            *t = Matrix::filled(1, t.cols(), tau);
        }
        ad
    }

    #[test]
    fn extreme_thresholds() {
        let (bb, batch) = setup();
        let closed = taugate_with_tau(&bb, 1e6);
        let open = taugate_with_tau(&bb, -1e6);
        assert_eq!(high_act_fraction(&bb, &closed, &batch).unwrap().avg_high_act_frac, 0.0);
        assert_eq!(high_act_fraction(&bb, &open, &batch).unwrap().avg_high_act_frac, 1.0);
        assert_eq!(hard_gate_skip_fraction(&bb, &open, &batch).unwrap(), 0.0);
        assert_eq!(hard_gate_skip_fraction(&bb, &closed, &batch).unwrap(), 1.0);

        let all = gate_mask(&bb, &open, &batch, 0.9).unwrap();
        assert!(all.layers.iter().all(|l| l.iter().all(|&b| b)));
    }

    #[test]
    fn ungated_adapter_rejected() {
        let (bb, batch) = setup();
        assert!(matches!(
            high_act_fraction(&bb, &Adapter::Frozen, &batch),
            Err(Error::Usage(_))
        ));
        let gain = Adapter::init(Method::GainOnly, &bb, &mut Rng::new(0), &AdapterConfig::default());
        assert!(gate_mask(&bb, &gain, &batch, 0.9).is_err());
    }

    #[test]
    fn threshold_one_gives_empty_mask() {
        let (bb, batch) = setup();
        let ad = taugate_with_tau(&bb, 0.0);
        let m = gate_mask(&bb, &ad, &batch, 1.0).unwrap();
        assert_eq!(m.count(0) + m.count(1), 0);
        assert_eq!(m, gate_mask(&bb, &ad, &batch, 1.0).unwrap());
    }

    #[test]
    fn jaccard_cases() {
        let set = |idx: &[usize]| {
            let mut v = vec![false; 6];
            for &i in idx {
                v[i] = true;
            }
            v
        };
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[1, 2])), 1.0);
        assert_eq!(jaccard(&set(&[0, 1]), &set(&[3, 4])), 0.0);
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 1.0);

        let a = GateMask {
            layers: vec![set(&[1, 2, 3]), set(&[0])],
        };
        let b = GateMask {
            layers: vec![set(&[2, 3, 4]), set(&[5])],
        };
        let o = jaccard_overlap(&a, &b).unwrap();
        assert_eq!(o.per_layer, vec![0.5, 0.0]);
        assert_eq!(o.average, 0.25);
        let short = GateMask {
            layers: vec![set(&[1])],
        };
        assert!(jaccard_overlap(&a, &short).is_err());
    }

    #[test]
    fn skip_fraction_matches_direct_count() {
        let (bb, batch) = setup();
        let mut ad = taugate_with_tau(&bb, 0.0);
        ad.tau_mut().unwrap()[1] = rng_normal(&mut Rng::new(8), 1, 128, 0.0, 0.3);
        let z = forward(&bb, &ad, &batch.inputs, GateMode::Hard).unwrap();
        let taus = ad.tau_mut().unwrap().clone();
        let mut closed = [0usize; 2];
        for l in 0..2 {
            let zl = &z.hidden[l].z;
            for i in 0..zl.rows() {
                for j in 0..zl.cols() {
                    if zl.get(i, j) <= taus[l].get(0, j) {
                        closed[l] += 1;
                    }
                }
            }
        }
        let n = (batch.inputs.rows() * 128) as Real;
        let direct = (closed[0] as Real / n + closed[1] as Real / n) / 2.0;
        let got = hard_gate_skip_fraction(&bb, &ad, &batch).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::ndcore::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn jaccard_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 16), b in proptest::collection::vec(any::<bool>(), 16)) {
                let ab = jaccard(&a, &b);
                prop_assert_eq!(ab, jaccard(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(jaccard(&a, &a), 1.0);
            }

            #[test]
            fn raising_tau_never_raises_high_act(shift in 0.0f64..2.0, seed in 0u64..1000) {
                let (bb, batch) = setup();
                let mut ad = taugate_with_tau(&bb, 0.0);
                for t in ad.tau_mut().unwrap() {
                    *t = rng_normal(&mut Rng::new(seed), 1, t.cols(), 0.0, 0.5);
                }
                let before = high_act_fraction(&bb, &ad, &batch).unwrap();
                for t in ad.tau_mut().unwrap() {
                    *t = t.map(|v| v + shift + 1.0);
                }
                let after = high_act_fraction(&bb, &ad, &batch).unwrap();
                prop_assert!(after.avg_high_act_frac <= before.avg_high_act_frac);
            }

            #[test]
            fn masks_nest_by_threshold(t1 in 0.0f64..1.0, dt in 0.0f64..0.5, seed in 0u64..1000) {
                let (bb, batch) = setup();
                let mut ad = taugate_with_tau(&bb, 0.0);
                for t in ad.tau_mut().unwrap() {
                    *t = rng_normal(&mut Rng::new(seed), 1, t.cols(), 0.0, 0.3);
                }
                let lo = gate_mask(&bb, &ad, &batch, t1).unwrap();
                let hi = gate_mask(&bb, &ad, &batch, t1 + dt).unwrap();
                for (l, h) in lo.layers.iter().zip(&hi.layers) {
                    prop_assert!(h.iter().zip(l).all(|(h, l)| !*h || *l));
                }
            }
        }
    }
}
