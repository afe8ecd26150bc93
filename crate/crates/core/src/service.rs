//! Sparse integer service-time laws.
//!
//! Atoms `a_1 = 1 < a_2 < ...` carry the masses
//! `p(a_n) = sum_{a_n <= l < a_{n+1}} 2^-l = 2^(1-a_n) - 2^(1-a_{n+1})`,
//! with the last atom taking the whole tail `2^(1-a_last)`. Masses of atoms
//! far out underflow `f64`, so hazards are computed from atom gaps
//! (`q_n = 1 - 2^(a_n - a_{n+1})`) and never from mass ratios.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest atom accepted in a support.
pub const MAX_ATOM: u64 = 1 << 60;

/// Block parametrization `{B_1, C_1, B_2, C_2, ...}` of a sparse support,
/// together with the atoms chosen inside each block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct TypeBSpec {
    blocks: Vec<(u64, u64)>,
    atoms: Vec<Vec<u64>>,
    explicit_atoms: bool,
    last: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawSpec {
    blocks: Vec<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atoms_per_block: Option<Vec<Vec<u64>>>,
    #[serde(default)]
    last: bool,
}

impl TryFrom<RawSpec> for TypeBSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let blocks = raw.blocks.iter().map(|b| (b[0], b[1])).collect();
        TypeBSpec::new(blocks, raw.atoms_per_block, raw.last)
    }
}

impl From<TypeBSpec> for RawSpec {
    fn from(spec: TypeBSpec) -> Self {
        RawSpec {
            blocks: spec.blocks.iter().map(|&(b, c)| [b, c]).collect(),
            atoms_per_block: spec.explicit_atoms.then_some(spec.atoms),
            last: spec.last,
        }
    }
}

impl TypeBSpec {
    /// Validates block geometry and the per-block atom selection. When
    /// `atoms_per_block` is `None` each block contributes the single atom `B_k`.
    pub fn new(
        blocks: Vec<(u64, u64)>,
        atoms_per_block: Option<Vec<Vec<u64>>>,
        last: bool,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidSpec("no blocks".into()));
        }
        let mut prev_end = 0u64;
        for (i, &(b, c)) in blocks.iter().enumerate() {
            let k = i + 1;
            if k == 1 && b != 1 {
                return Err(Error::InvalidSpec(format!("block 1 must start at 1, got {b}")));
            }
            if c < b {
                return Err(Error::InvalidSpec(format!(
                    "block {k}: end {c} is below start {b}"
                )));
            }
            if k > 1 && b <= prev_end {
                return Err(Error::InvalidSpec(format!(
                    "block {k}: start {b} does not exceed previous end {prev_end}"
                )));
            }
            if c > MAX_ATOM {
                return Err(Error::InvalidSpec(format!(
                    "block {k}: end {c} exceeds 2^60"
                )));
            }
            prev_end = c;
        }

        let explicit_atoms = atoms_per_block.is_some();
        let atoms = match atoms_per_block {
            Some(a) => {
                if a.len() != blocks.len() {
                    return Err(Error::InvalidSpec(format!(
                        "{} atom lists for {} blocks",
                        a.len(),
                        blocks.len()
                    )));
                }
                a
            }
            None => blocks.iter().map(|&(b, _)| vec![b]).collect(),
        };

        let mut prev: Option<u64> = None;
        for (i, (sel, &(b, c))) in atoms.iter().zip(&blocks).enumerate() {
            let k = i + 1;
            if sel.is_empty() {
                return Err(Error::EmptyBlock { block: k });
            }
            for &a in sel {
                if a < b || a > c {
                    return Err(Error::AtomOutOfRange {
                        block: k,
                        atom: a,
                        start: b,
                        end: c,
                    });
                }
                if let Some(p) = prev {
                    if a <= p {
                        return Err(Error::NonIncreasing { prev: p, next: a });
                    }
                }
                prev = Some(a);
            }
        }
        if atoms[0][0] != 1 {
            return Err(Error::InvalidSpec("block 1 must select atom 1".into()));
        }

        Ok(TypeBSpec {
            blocks,
            atoms,
            explicit_atoms,
            last,
        })
    }

    /// Single-atom blocks `[B_k, B_k]`.
    pub fn from_starts(starts: &[u64], last: bool) -> Result<Self> {
        TypeBSpec::new(starts.iter().map(|&b| (b, b)).collect(), None, last)
    }

    pub fn blocks(&self) -> &[(u64, u64)] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// `B_k` for 1-based `k`.
    pub fn start(&self, k: usize) -> u64 {
        self.blocks[k - 1].0
    }

    /// `C_k` for 1-based `k`; `C_0 = 0`.
    pub fn end(&self, k: usize) -> u64 {
        if k == 0 {
            0
        } else {
            self.blocks[k - 1].1
        }
    }

    /// `G_k = C_k - B_k`.
    pub fn gap(&self, k: usize) -> u64 {
        let (b, c) = self.blocks[k - 1];
        c - b
    }

    pub fn atoms_in_block(&self, k: usize) -> &[u64] {
        &self.atoms[k - 1]
    }

    pub fn has_explicit_atoms(&self) -> bool {
        self.explicit_atoms
    }

    pub fn is_last(&self) -> bool {
        self.last
    }

    pub fn support(&self) -> Vec<u64> {
        self.atoms.iter().flatten().copied().collect()
    }

    /// Keeps blocks `1..=n` and marks block `n` as the last one.
    pub fn cutoff(&self, n: usize) -> Result<TypeBSpec> {
        if n == 0 || n > self.blocks.len() {
            return Err(Error::OutOfRange {
                what: "cutoff level",
                value: format!("{n} (spec has {} blocks)", self.blocks.len()),
            });
        }
        Ok(TypeBSpec {
            blocks: self.blocks[..n].to_vec(),
            atoms: self.atoms[..n].to_vec(),
            explicit_atoms: self.explicit_atoms,
            last: true,
        })
    }

    /// Appends a block; the atom offsets `atoms - start` are kept when given.
    pub fn push_block(&self, start: u64, end: u64, offsets: Option<&[u64]>, last: bool) -> Result<TypeBSpec> {
        let mut blocks = self.blocks.clone();
        blocks.push((start, end));
        let mut atoms = self.atoms.clone();
        atoms.push(match offsets {
            Some(off) => off.iter().map(|o| start + o).collect(),
            None => vec![start],
        });
        let explicit = self.explicit_atoms || offsets.is_some();
        TypeBSpec::new(blocks, explicit.then_some(atoms), last)
    }

    pub fn build(&self) -> Result<ServiceDistribution> {
        build_distribution(self)
    }
}

/// Integer service-time law on a finite sparse support.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceDistribution {
    atoms: Vec<u64>,
    mass: Vec<f64>,
    log2_mass: Vec<f64>,
    hazard: Vec<f64>,
    mean: f64,
    second_moment: f64,
}

/// Builds the law of a spec whose final block is marked last.
pub fn build_distribution(spec: &TypeBSpec) -> Result<ServiceDistribution> {
    if !spec.is_last() {
        return Err(Error::InvalidSpec(
            "final block is not marked last; apply a cutoff first".into(),
        ));
    }
    ServiceDistribution::from_support(&spec.support())
}

impl ServiceDistribution {
    /// Law on the given strictly increasing support starting at 1.
    pub fn from_support(atoms: &[u64]) -> Result<Self> {
        if atoms.first() != Some(&1) {
            return Err(Error::InvalidSpec("support must start at 1".into()));
        }
        for w in atoms.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::NonIncreasing {
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        if let Some(&a) = atoms.last() {
            if a > MAX_ATOM {
                return Err(Error::InvalidSpec(format!("atom {a} exceeds 2^60")));
            }
        }

        let n = atoms.len();
        let mut mass = Vec::with_capacity(n);
        let mut log2_mass = Vec::with_capacity(n);
        let mut hazard = Vec::with_capacity(n);
        for i in 0..n {
            let a = atoms[i];
            let head = 1.0 - a as f64;
            match atoms.get(i + 1) {
                Some(&next) => {
                    let gap = (next - a) as f64;
                    // 1 - 2^-gap
                    let q = -(-gap * LN_2).exp_m1();
                    hazard.push(q);
                    let l = head + (-(-gap * LN_2).exp()).ln_1p() / LN_2;
                    log2_mass.push(l);
                    // 2^(1-a) - 2^(1-next) without cancellation for small a
                    mass.push(q * head.exp2());
                }
                None => {
                    hazard.push(1.0);
                    log2_mass.push(head);
                    mass.push(head.exp2());
                }
            }
        }

        let mut mean = 0.0;
        let mut second = 0.0;
        for (&a, &p) in atoms.iter().zip(&mass) {
            let a = a as f64;
            mean += a * p;
            second += a * a * p;
        }

        Ok(ServiceDistribution {
            atoms: atoms.to_vec(),
            mass,
            log2_mass,
            hazard,
            mean,
            second_moment: second,
        })
    }

    pub fn support(&self) -> &[u64] {
        &self.atoms
    }

    /// `max(A)`, the largest possible service time.
    pub fn max_service(&self) -> u64 {
        *self.atoms.last().expect("support is nonempty")
    }

    /// `p(k)`; zero off the support. Underflows to zero for atoms beyond ~1075.
    pub fn mass(&self, k: u64) -> f64 {
        match self.atoms.binary_search(&k) {
            Ok(i) => self.mass[i],
            Err(_) => 0.0,
        }
    }

    pub fn log2_mass(&self, k: u64) -> Option<f64> {
        self.atoms.binary_search(&k).ok().map(|i| self.log2_mass[i])
    }

    pub fn masses(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.atoms.iter().copied().zip(self.mass.iter().copied())
    }

    /// Conditional completion probability `p_tau = p(tau) / P(eta >= tau)`.
    pub fn hazard(&self, tau: u64) -> Result<f64> {
        if tau == 0 || tau > self.max_service() {
            return Err(Error::OutOfRange {
                what: "tau",
                value: format!("{tau} (support max {})", self.max_service()),
            });
        }
        Ok(self.hazard_unchecked(tau))
    }

    #[inline]
    pub(crate) fn hazard_unchecked(&self, tau: u64) -> f64 {
        match self.atoms.binary_search(&tau) {
            Ok(i) => self.hazard[i],
            Err(_) => 0.0,
        }
    }

    /// Atoms paired with their hazards.
    pub fn hazards(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.atoms.iter().copied().zip(self.hazard.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Mean remaining service `E(eta - tau | eta > tau)`.
    pub fn remaining_service_mean(&self, tau: u64) -> Result<f64> {
        let j = self.atoms.partition_point(|&a| a <= tau);
        if j == self.atoms.len() {
            return Err(Error::ZeroMass {
                what: format!("eta > {tau}"),
            });
        }
        // weights relative to P(eta >= a_j) = 2^(1 - a_j)
        let base = 1.0 - self.atoms[j] as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in j..self.atoms.len() {
            let w = (self.log2_mass[i] - base).exp2();
            num += (self.atoms[i] - tau) as f64 * w;
            den += w;
        }
        Ok(num / den)
    }
}
