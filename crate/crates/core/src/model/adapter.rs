use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Backbone, HIDDEN_DIM, HIDDEN_LAYERS, NUM_CLASSES};
use crate::error::Error;
use crate::ndcore::{rng_normal, Matrix, Real, Rng};

/// Adaptation strategy applied on top of a foundation backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Frozen,
    FullFt,
    BitFit,
    GainOnly,
    TauOnly,
    TauGate,
    Lora,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Frozen,
        Method::BitFit,
        Method::GainOnly,
        Method::TauOnly,
        Method::TauGate,
        Method::Lora,
        Method::FullFt,
    ];

    /// Short identifier used on the command line and in CSV files.
    pub fn name(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::FullFt => "fullft",
            Method::BitFit => "bitfit",
            Method::GainOnly => "gainonly",
            Method::TauOnly => "tauonly",
            Method::TauGate => "taugate",
            Method::Lora => "lora",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Method::TauOnly | Method::TauGate)
    }

    pub fn freezes_backbone(self) -> bool {
        self != Method::FullFt
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Usage(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauGateParams {
    pub tau: [Matrix; HIDDEN_LAYERS],
    pub gamma: [Matrix; HIDDEN_LAYERS],
    pub sharpness: Real,
}

/// Rank-`r` factors per linear layer. The effective weight (stored as
/// `in × out`) is `W + (alpha/r)·(B·A)ᵀ` with `A: r×in`, `B: out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub a: [Matrix; 3],
    pub b: [Matrix; 3],
    pub rank: usize,
    pub alpha: Real,
}

impl LoraParams {
    pub fn scale(&self) -> Real {
        self.alpha / self.rank as Real
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Frozen,
    FullFt(Backbone),
    BitFit { bias_delta: [Matrix; 3] },
    GainOnly { gamma: [Matrix; HIDDEN_LAYERS] },
    TauOnly { tau: [Matrix; HIDDEN_LAYERS], sharpness: Real },
    TauGate(TauGateParams),
    Lora(LoraParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub sharpness: Real,
    pub lora_rank: usize,
    /// Defaults to the rank, i.e. a unit scale on the low-rank delta.
    pub lora_alpha: Option<Real>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            sharpness: 10.0,
            lora_rank: 8,
            lora_alpha: None,
        }
    }
}

pub(super) const LORA_INIT_STD: Real = 0.02;

/// View of one hidden layer's gate parameters.
pub(super) struct GateView<'a> {
    pub tau: Option<&'a Matrix>,
    pub gamma: Option<&'a Matrix>,
    pub sharpness: Real,
}

impl Adapter {
    pub fn init(method: Method, bb: &Backbone, rng: &mut Rng, cfg: &AdapterConfig) -> Self {
        let hidden = |v: Real| [Matrix::filled(1, HIDDEN_DIM, v), Matrix::filled(1, HIDDEN_DIM, v)];
        match method {
            Method::Frozen => Adapter::Frozen,
            Method::FullFt => Adapter::FullFt(bb.clone()),
            Method::BitFit => Adapter::BitFit {
                bias_delta: [
                    Matrix::zeros(1, HIDDEN_DIM),
                    Matrix::zeros(1, HIDDEN_DIM),
                    Matrix::zeros(1, NUM_CLASSES),
                ],
            },
            Method::GainOnly => Adapter::GainOnly { gamma: hidden(1.0) },
            Method::TauOnly => Adapter::TauOnly {
                tau: hidden(0.0),
                sharpness: cfg.sharpness,
            },
            Method::TauGate => Adapter::TauGate(TauGateParams {
                tau: hidden(0.0),
                gamma: hidden(1.0),
                sharpness: cfg.sharpness,
            }),
            Method::Lora => {
                let r = cfg.lora_rank;
                let mut factor = |l: usize| {
                    let (w, _) = bb.layer(l);
                    let a = rng_normal(rng, r, w.rows(), 0.0, LORA_INIT_STD);
                    (a, Matrix::zeros(w.cols(), r))
                };
                let (a1, b1) = factor(0);
                let (a2, b2) = factor(1);
                let (a3, b3) = factor(2);
                Adapter::Lora(LoraParams {
                    a: [a1, a2, a3],
                    b: [b1, b2, b3],
                    rank: r,
                    alpha: cfg.lora_alpha.unwrap_or(r as Real),
                })
            }
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Adapter::Frozen => Method::Frozen,
            Adapter::FullFt(_) => Method::FullFt,
            Adapter::BitFit { .. } => Method::BitFit,
            Adapter::GainOnly { .. } => Method::GainOnly,
            Adapter::TauOnly { .. } => Method::TauOnly,
            Adapter::TauGate(_) => Method::TauGate,
            Adapter::Lora(_) => Method::Lora,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.method().is_gated()
    }

    pub fn sharpness(&self) -> Option<Real> {
        match self {
            Adapter::TauOnly { sharpness, .. } => Some(*sharpness),
            Adapter::TauGate(p) => Some(p.sharpness),
            _ => None,
        }
    }

    /// Trainable arrays with stable names, in a fixed order shared with
    /// [`Adapter::params_mut`] and the gradients returned by `backward`.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Adapter::Frozen => vec![],
            Adapter::FullFt(bb) => super::BACKBONE_NAMES.into_iter().zip(bb.arrays()).collect(),
            Adapter::BitFit { bias_delta: d } => {
                vec![("db1", &d[0]), ("db2", &d[1]), ("db3", &d[2])]
            }
            Adapter::GainOnly { gamma } => vec![("gamma1", &gamma[0]), ("gamma2", &gamma[1])],
            Adapter::TauOnly { tau, .. } => vec![("tau1", &tau[0]), ("tau2", &tau[1])],
            Adapter::TauGate(p) => vec![
                ("tau1", &p.tau[0]),
                ("gamma1", &p.gamma[0]),
                ("tau2", &p.tau[1]),
                ("gamma2", &p.gamma[1]),
            ],
            Adapter::Lora(p) => vec![
                ("lora_a1", &p.a[0]),
                ("lora_b1", &p.b[0]),
                ("lora_a2", &p.a[1]),
                ("lora_b2", &p.b[1]),
                ("lora_a3", &p.a[2]),
                ("lora_b3", &p.b[2]),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Adapter::Frozen => vec![],
            Adapter::FullFt(bb) => bb.arrays_mut().into_iter().collect(),
            Adapter::BitFit { bias_delta: d } => d.iter_mut().collect(),
            Adapter::GainOnly { gamma } => gamma.iter_mut().collect(),
            Adapter::TauOnly { tau, .. } => tau.iter_mut().collect(),
            Adapter::TauGate(p) => {
                let [t1, t2] = &mut p.tau;
                let [g1, g2] = &mut p.gamma;
                vec![t1, g1, t2, g2]
            }
            Adapter::Lora(p) => {
                let [a1, a2, a3] = &mut p.a;
                let [b1, b2, b3] = &mut p.b;
                vec![a1, b1, a2, b2, a3, b3]
            }
        }
    }

    pub(super) fn gate_view(&self, layer: usize) -> GateView<'_> {
        match self {
            Adapter::GainOnly { gamma } => GateView {
                tau: None,
                gamma: Some(&gamma[layer]),
                sharpness: 0.0,
            },
            Adapter::TauOnly { tau, sharpness } => GateView {
                tau: Some(&tau[layer]),
                gamma: None,
                sharpness: *sharpness,
            },
            Adapter::TauGate(p) => GateView {
                tau: Some(&p.tau[layer]),
                gamma: Some(&p.gamma[layer]),
                sharpness: p.sharpness,
            },
            _ => GateView {
                tau: None,
                gamma: None,
                sharpness: 0.0,
            },
        }
    }

    /// Thresholds of a gated adapter, for diagnostics that move them.
    pub fn tau_mut(&mut self) -> Option<&mut [Matrix; HIDDEN_LAYERS]> {
        match self {
            Adapter::TauOnly { tau, .. } => Some(tau),
            Adapter::TauGate(p) => Some(&mut p.tau),
            _ => None,
        }
    }

    pub fn gamma_mut(&mut self) -> Option<&mut [Matrix; HIDDEN_LAYERS]> {
        match self {
            Adapter::GainOnly { gamma } => Some(gamma),
            Adapter::TauGate(p) => Some(&mut p.gamma),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_trainable;

    fn counts() -> Vec<(Method, usize)> {
        let bb = Backbone::init(&mut Rng::new(0));
        let cfg = AdapterConfig::default();
        Method::ALL
            .into_iter()
            .map(|m| (m, count_trainable(&Adapter::init(m, &bb, &mut Rng::new(1), &cfg))))
            .collect()
    }

    #[test]
    fn trainable_counts_match_tables() {
        let expect = [
            (Method::Frozen, 0),
            (Method::BitFit, 266),
            (Method::GainOnly, 256),
            (Method::TauOnly, 256),
            (Method::TauGate, 512),
            (Method::Lora, 10448),
            (Method::FullFt, 118282),
        ];
        assert_eq!(counts(), expect.to_vec());
    }

    #[test]
    fn params_and_params_mut_align() {
        let bb = Backbone::init(&mut Rng::new(0));
        for m in Method::ALL {
            let mut ad = Adapter::init(m, &bb, &mut Rng::new(2), &AdapterConfig::default());
            let shapes: Vec<_> = ad.params().iter().map(|(_, p)| p.shape()).collect();
            let shapes_mut: Vec<_> = ad.params_mut().iter().map(|p| p.shape()).collect();
            assert_eq!(shapes, shapes_mut, "{m}");
        }
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("Tau-Gate".parse::<Method>().unwrap(), Method::TauGate);
        assert!("adam".parse::<Method>().is_err());
    }

    #[test]
    fn init_values() {
        let bb = Backbone::init(&mut Rng::new(0));
        let cfg = AdapterConfig::default();
        match Adapter::init(Method::Lora, &bb, &mut Rng::new(4), &cfg) {
            Adapter::Lora(p) => {
                assert!(p.b.iter().all(|b| b.as_slice().iter().all(|&v| v == 0.0)));
                assert_eq!(p.scale(), 1.0);
                assert_eq!(p.a[0].shape(), (8, 784));
                assert_eq!(p.b[2].shape(), (10, 8));
            }
            other => panic!("{other:?}"),
        }
        match Adapter::init(Method::FullFt, &bb, &mut Rng::new(4), &cfg) {
            Adapter::FullFt(copy) => assert_eq!(copy, bb),
            other => panic!("{other:?}"),
        }
    }
}
