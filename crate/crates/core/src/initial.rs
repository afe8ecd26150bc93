//! Layered initial states: layer `k` (1-based) is a probability measure on
//! `{1..=n_bar} x [C_{k-1}, C_{k-1} + F_k]`, and the initial state mixes the
//! layers with weights `d_k`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::StateMeasure;
use crate::service::TypeBSpec;

/// Per-layer measures: unit atoms at `(1, C_{k-1})`, or explicit atom lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kappas {
    Named(KappaKind),
    Explicit(Vec<Vec<(u64, u64, f64)>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaKind {
    Delta,
}

impl Default for Kappas {
    fn default() -> Self {
        Kappas::Named(KappaKind::Delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub n_bar: u64,
    /// Layer widths `F_k`; `F_1 = 0`. Missing entries count as zero.
    #[serde(rename = "F", default)]
    pub f: Vec<u64>,
    #[serde(default)]
    pub kappas: Kappas,
}

impl InitSpec {
    /// `n_bar = 1`, all `F_k = 0`, unit-atom layers.
    pub fn delta() -> Self {
        InitSpec {
            n_bar: 1,
            f: Vec::new(),
            kappas: Kappas::default(),
        }
    }

    pub fn f(&self, k: usize) -> u64 {
        self.f.get(k - 1).copied().unwrap_or(0)
    }

    /// Elapsed-time window of layer `k`.
    pub fn layer_window(&self, spec: &TypeBSpec, k: usize) -> (u64, u64) {
        let lo = spec.end(k - 1);
        (lo, lo + self.f(k))
    }

    /// `kappa_k` as a measure.
    pub fn layer(&self, spec: &TypeBSpec, k: usize) -> Result<StateMeasure> {
        match &self.kappas {
            Kappas::Named(KappaKind::Delta) => Ok(StateMeasure::point(1, spec.end(k - 1))),
            Kappas::Explicit(layers) => {
                let atoms = layers.get(k - 1).ok_or_else(|| {
                    Error::Weights(format!("no explicit kappa for layer {k}"))
                })?;
                StateMeasure::from_atoms(atoms.iter().copied())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeltaWeights(pub Vec<f64>);

impl DeltaWeights {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Weights("no weights".into()));
        }
        if let Some(x) = d.iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::Weights(format!("negative weight {x}")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Weights(format!("weights sum to {s}, not 1")));
        }
        Ok(DeltaWeights(d))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keeps `d_1..d_{n-1}`, folds the tail `sum_{k >= n} d_k` into entry `n`.
pub fn truncate_weights(delta: &DeltaWeights, n: usize) -> Result<DeltaWeights> {
    if n == 0 {
        return Err(Error::OutOfRange {
            what: "truncation level",
            value: "0".into(),
        });
    }
    let d = &delta.0;
    if n > d.len() {
        return Err(Error::OutOfRange {
            what: "truncation level",
            value: format!("{n} (only {} weights)", d.len()),
        });
    }
    let mut out = d[..n - 1].to_vec();
    out.push(d[n - 1..].iter().sum());
    Ok(DeltaWeights(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// `F_1` must be zero.
    GroundLayerWidth { f1: u64 },
    /// `C_k + F_{k+1} < B_{k+1}` fails.
    LayerOverlap { k: usize, layer_end: u64, next_start: u64 },
    /// `B_{k+1} - (C_k + F_{k+1}) > B_k` fails.
    Growth { k: usize, distance: i128, start: u64 },
    KappaNotNormalized { k: usize, total: f64 },
    KappaOutsideLayer { k: usize, n: u64, tau: u64 },
    TooManyWidths { given: usize, layers: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::GroundLayerWidth { f1 } => write!(f, "F_1 = {f1}, must be 0"),
            Violation::LayerOverlap {
                k,
                layer_end,
                next_start,
            } => write!(
                f,
                "level {k}: layer end C_{k} + F_{} = {layer_end} reaches B_{} = {next_start}",
                k + 1,
                k + 1
            ),
            Violation::Growth { k, distance, start } => write!(
                f,
                "level {k}: B_{} - (C_{k} + F_{}) = {distance} is not above B_{k} = {start}",
                k + 1,
                k + 1
            ),
            Violation::KappaNotNormalized { k, total } => {
                write!(f, "layer {k}: kappa sums to {total}")
            }
            Violation::KappaOutsideLayer { k, n, tau } => {
                write!(f, "layer {k}: atom ({n}, {tau}) outside its layer")
            }
            Violation::TooManyWidths { given, layers } => {
                write!(f, "{given} layer widths for {layers} layers")
            }
        }
    }
}

/// Checks layer separation and the block growth condition for every finite
/// block, and that every layer measure is normalized and inside its layer.
pub fn validate_geometry(init: &InitSpec, spec: &TypeBSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let layers = spec.block_count();
    if init.f.len() > layers {
        out.push(Violation::TooManyWidths {
            given: init.f.len(),
            layers,
        });
    }
    if init.f(1) != 0 {
        out.push(Violation::GroundLayerWidth { f1: init.f(1) });
    }
    for k in 1..layers {
        let layer_end = spec.end(k) + init.f(k + 1);
        let next = spec.start(k + 1);
        if layer_end >= next {
            out.push(Violation::LayerOverlap {
                k,
                layer_end,
                next_start: next,
            });
        }
        let distance = next as i128 - layer_end as i128;
        if distance <= spec.start(k) as i128 {
            out.push(Violation::Growth {
                k,
                distance,
                start: spec.start(k),
            });
        }
    }
    for k in 1..=layers {
        let Ok(kappa) = init.layer(spec, k) else {
            continue;
        };
        let (lo, hi) = init.layer_window(spec, k);
        let total = kappa.total_mass();
        if (total - 1.0).abs() > 1e-12 {
            out.push(Violation::KappaNotNormalized { k, total });
        }
        if kappa.idle_mass() > 0.0 {
            out.push(Violation::KappaOutsideLayer { k, n: 0, tau: 0 });
        }
        for (n, tau, _) in kappa.atoms() {
            if n > init.n_bar || tau < lo || tau > hi {
                out.push(Violation::KappaOutsideLayer { k, n, tau });
            }
        }
    }
    out
}

/// The mixture `sum_k d_k kappa_k`.
pub fn build_nu_delta(init: &InitSpec, spec: &TypeBSpec, delta: &DeltaWeights) -> Result<StateMeasure> {
    if delta.len() > spec.block_count() {
        return Err(Error::Weights(format!(
            "{} weights for {} layers",
            delta.len(),
            spec.block_count()
        )));
    }
    let violations = validate_geometry(init, spec);
    if !violations.is_empty() {
        return Err(Error::Geometry(violations));
    }
    let mut nu = StateMeasure::empty();
    for (i, &d) in delta.as_slice().iter().enumerate() {
        if d > 0.0 {
            nu.add_scaled(&init.layer(spec, i + 1)?, d);
        }
    }
    Ok(nu)
}
