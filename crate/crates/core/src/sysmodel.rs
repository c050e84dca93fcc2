//! Parameterized linear surrogate of a converter-dominated power system.
//!
//! The state matrix is assembled from small dynamic blocks:
//!
//! * damped second-order oscillators `[[0, w], [-w, -2 z w]]`,
//! * first-order lags `-r` on the diagonal,
//! * skew-symmetric coupling entries `A[i][j] = g`, `A[j][i] = -g` between blocks.
//!
//! Every block coefficient (`w`, `z`, `r`, `g`) is a [`Coefficient`]: a constant plus a
//! sum of power-law terms in the operating-point features. The symmetric part of the
//! assembled matrix is negative semidefinite whenever all `z`, `r` are positive, so the
//! spectrum stays in the closed left half-plane for every valid operating point.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Rated power of the converter aggregate used to express SG ratings as shares (MVA).
pub const VSC_RATING_MVA: f64 = 500.0;

/// Base used by the 9-bus configuration for SG ratings and load demands (MVA / MW).
pub const NINE_BUS_SHARE_BASE: f64 = 250.0;

pub const GROUP_VSC_CURRENTS: &str = "VSC currents";
pub const GROUP_VSC_CONTROLLERS: &str = "VSC controllers";
pub const GROUP_SG_MECHANICS: &str = "SG mechanics";
pub const GROUP_SG_EXCITER: &str = "SG exciter";
pub const GROUP_SG_CURRENTS: &str = "SG currents";
pub const GROUP_NETWORK: &str = "Network";

/// SG share for the 3-bus system: `S_SG / (S_SG + S_VSC)` with the converter fixed at 500 MVA.
pub fn sg_share(sg_rating_mva: f64) -> f64 {
    sg_rating_mva / (sg_rating_mva + VSC_RATING_MVA)
}

/// Share relative to the 9-bus base (250 MVA / MW).
pub fn nine_bus_share(value: f64) -> f64 {
    value / NINE_BUS_SHARE_BASE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Dimensionless share in (0, 1].
    Share,
    /// Time constant in seconds, > 0.
    TimeConstant,
    /// Frequency droop slope in (0, 1].
    Droop,
}

impl FeatureKind {
    fn check(self, value: f64) -> std::result::Result<(), &'static str> {
        let ok = value.is_finite()
            && match self {
                FeatureKind::Share | FeatureKind::Droop => value > 0.0 && value <= 1.0,
                FeatureKind::TimeConstant => value > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(match self {
                FeatureKind::Share | FeatureKind::Droop => "(0, 1]",
                FeatureKind::TimeConstant => "(0, inf)",
            })
        }
    }
}

/// Declared feature of a configuration. `min`/`max` bound the operating domain the
/// recipe is documented for (used for the Lipschitz bound and hull checks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl FeaturePoint {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                got: values.len(),
                context: "feature point names/values",
            });
        }
        Ok(FeaturePoint { values, names })
    }

    pub fn for_config(config: &SystemConfig, values: Vec<f64>) -> Result<Self> {
        let point = FeaturePoint::new(config.feature_names(), values)?;
        config.check_point(&point)?;
        Ok(point)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

/// One power-law term `scale * (x[feature] + offset)^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub feature: usize,
    pub scale: f64,
    #[serde(default = "one")]
    pub power: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

impl Term {
    fn value(&self, x: &[f64]) -> f64 {
        self.scale * (x[self.feature] + self.offset).powf(self.power)
    }

    /// Largest |d/dx| over `[lo, hi]`; power laws have monotone derivatives so the
    /// maximum sits at an end point.
    fn slope_bound(&self, lo: f64, hi: f64) -> f64 {
        let d = |x: f64| (self.scale * self.power * (x + self.offset).powf(self.power - 1.0)).abs();
        d(lo).max(d(hi))
    }
}

/// Block coefficient as a smooth function of the features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub base: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl Coefficient {
    pub fn constant(base: f64) -> Self {
        Coefficient {
            base,
            terms: Vec::new(),
        }
    }

    pub fn with(mut self, feature: usize, scale: f64, power: f64) -> Self {
        self.terms.push(Term {
            feature,
            scale,
            power,
            offset: 0.0,
        });
        self
    }

    pub fn with_offset(mut self, feature: usize, scale: f64, power: f64, offset: f64) -> Self {
        self.terms.push(Term {
            feature,
            scale,
            power,
            offset,
        });
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.base + self.terms.iter().map(|t| t.value(x)).sum::<f64>()
    }

    /// Bound on the partial derivative with respect to `feature` over the domain.
    fn slope_bound(&self, feature: usize, domain: &[(f64, f64)]) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.feature == feature)
            .map(|t| t.slope_bound(domain[feature].0, domain[feature].1))
            .sum()
    }

    /// Bound on |value| over the domain (each term bounded independently).
    fn magnitude_bound(&self, domain: &[(f64, f64)]) -> f64 {
        self.base.abs()
            + self
                .terms
                .iter()
                .map(|t| {
                    let (lo, hi) = domain[t.feature];
                    t.value_at(lo).abs().max(t.value_at(hi).abs())
                })
                .sum::<f64>()
    }
}

impl Term {
    fn value_at(&self, x: f64) -> f64 {
        self.scale * (x + self.offset).powf(self.power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Block {
    /// Two states: `[[0, omega], [-omega, -2 zeta omega]]`.
    Oscillator {
        name: String,
        group: String,
        omega: Coefficient,
        zeta: Coefficient,
    },
    /// One state with diagonal entry `-rate`.
    Lag {
        name: String,
        group: String,
        rate: Coefficient,
    },
}

impl Block {
    pub fn n_states(&self) -> usize {
        match self {
            Block::Oscillator { .. } => 2,
            Block::Lag { .. } => 1,
        }
    }

    pub fn group(&self) -> &str {
        match self {
            Block::Oscillator { group, .. } | Block::Lag { group, .. } => group,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Block::Oscillator { name, .. } | Block::Lag { name, .. } => name,
        }
    }
}

/// A state inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRef {
    pub block: usize,
    #[serde(default)]
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub from: StateRef,
    pub to: StateRef,
    pub gain: Coefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub schema_version: u32,
    pub name: String,
    pub n_states: usize,
    pub n_features: usize,
    pub features: Vec<FeatureSpec>,
    pub group_labels: Vec<String>,
    pub block_spec: Vec<Block>,
    pub couplings: Vec<Coupling>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    pub a: DMatrix<f64>,
    pub config_name: String,
    pub features: FeaturePoint,
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

impl SystemConfig {
    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Distinct group labels in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.group_labels
            .iter()
            .filter(|g| seen.insert(g.as_str()))
            .cloned()
            .collect()
    }

    fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.block_spec.len());
        let mut acc = 0;
        for b in &self.block_spec {
            offsets.push(acc);
            acc += b.n_states();
        }
        offsets
    }

    fn state_index(&self, offsets: &[usize], r: StateRef) -> Result<usize> {
        let block = self.block_spec.get(r.block).ok_or_else(|| {
            Error::InvalidConfig(format!("coupling references missing block {}", r.block))
        })?;
        if r.state >= block.n_states() {
            return Err(Error::InvalidConfig(format!(
                "coupling references state {} of block `{}` with {} states",
                r.state,
                block.name(),
                block.n_states()
            )));
        }
        Ok(offsets[r.block] + r.state)
    }

    /// Structural checks: state counts, labels and coupling references.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.features.len() != self.n_features {
            return Err(Error::InvalidConfig(format!(
                "n_features = {} but {} features declared",
                self.n_features,
                self.features.len()
            )));
        }
        let total: usize = self.block_spec.iter().map(Block::n_states).sum();
        if total != self.n_states {
            return Err(Error::InvalidConfig(format!(
                "blocks define {total} states, n_states = {}",
                self.n_states
            )));
        }
        if self.group_labels.len() != self.n_states {
            return Err(Error::InvalidConfig(format!(
                "{} group labels for {} states",
                self.group_labels.len(),
                self.n_states
            )));
        }
        let mut idx = 0;
        for b in &self.block_spec {
            for _ in 0..b.n_states() {
                if self.group_labels[idx] != b.group() {
                    return Err(Error::InvalidConfig(format!(
                        "state {idx} labelled `{}` but block `{}` belongs to `{}`",
                        self.group_labels[idx],
                        b.name(),
                        b.group()
                    )));
                }
                idx += 1;
            }
        }
        let offsets = self.block_offsets();
        let all_coefs = self.coefficients();
        for c in &all_coefs {
            if let Some(t) = c.terms.iter().find(|t| t.feature >= self.n_features) {
                return Err(Error::InvalidConfig(format!(
                    "coefficient term references feature {}",
                    t.feature
                )));
            }
        }
        for c in &self.couplings {
            let i = self.state_index(&offsets, c.from)?;
            let j = self.state_index(&offsets, c.to)?;
            if i == j {
                return Err(Error::InvalidConfig(format!("self-coupling on state {i}")));
            }
        }
        Ok(())
    }

    fn coefficients(&self) -> Vec<&Coefficient> {
        let mut out = Vec::new();
        for b in &self.block_spec {
            match b {
                Block::Oscillator { omega, zeta, .. } => {
                    out.push(omega);
                    out.push(zeta);
                }
                Block::Lag { rate, .. } => out.push(rate),
            }
        }
        out.extend(self.couplings.iter().map(|c| &c.gain));
        out
    }

    pub fn check_point(&self, point: &FeaturePoint) -> Result<()> {
        if point.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: point.len(),
                context: "feature point",
            });
        }
        for (spec, &v) in self.features.iter().zip(&point.values) {
            spec.kind
                .check(v)
                .map_err(|range| Error::FeatureOutOfRange {
                    name: spec.name.clone(),
                    value: v,
                    range,
                })?;
        }
        Ok(())
    }

    fn domain(&self) -> Vec<(f64, f64)> {
        self.features.iter().map(|f| (f.min, f.max)).collect()
    }

    /// Upper bound `L` with `||A(x + e u_f) - A(x)||_F <= L e` for every unit feature
    /// direction `u_f` and every `x` inside the documented feature domain.
    pub fn lipschitz_bound(&self) -> f64 {
        let domain = self.domain();
        (0..self.n_features)
            .map(|f| {
                let mut sq = 0.0;
                for b in &self.block_spec {
                    match b {
                        Block::Oscillator { omega, zeta, .. } => {
                            let dw = omega.slope_bound(f, &domain);
                            let dz = zeta.slope_bound(f, &domain);
                            let w = omega.magnitude_bound(&domain);
                            let z = zeta.magnitude_bound(&domain);
                            let damping = 2.0 * (dz * w + z * dw);
                            sq += 2.0 * dw * dw + damping * damping;
                        }
                        Block::Lag { rate, .. } => {
                            let d = rate.slope_bound(f, &domain);
                            sq += d * d;
                        }
                    }
                }
                for c in &self.couplings {
                    let d = c.gain.slope_bound(f, &domain);
                    sq += 2.0 * d * d;
                }
                sq.sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SystemConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Look up a built-in configuration by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "three_bus" | "3bus" | "3-bus" => Some(Self::three_bus()),
            "nine_bus" | "9bus" | "9-bus" => Some(Self::nine_bus()),
            _ => None,
        }
    }

    /// 22-state, 3-feature system: one SG, one VSC aggregate and a load.
    /// Features: `S_SGshare`, `tau_v` (s), `R`.
    pub fn three_bus() -> Self {
        let mut b = Builder::new();
        let (s, tau, r) = (0, 1, 2);
        add_vsc(&mut b, &VscFeatures { share: &[(s, 1.0)], tau, droop: r });
        add_sg(&mut b, "", s, r, 1.0);
        let [vsc_c1, _vsc_c2, _inner, _pll, volt, droop] = b.vsc_blocks();
        let [em, ..] = b.sg_blocks(0);
        // droop <-> electromechanical swing
        b.couple(droop, 1, em, 1, Coefficient::constant(0.6).with(s, 2.4, 1.0));
        // voltage control <-> exciter
        b.couple(volt, 1, b.sg(0).exciter, 1, Coefficient::constant(1.5).with(s, 2.0, 1.0));
        // grid-side currents <-> stator
        b.couple(vsc_c1, 0, b.sg(0).stator, 0, Coefficient::constant(2.0).with(s, 20.0, 1.0));
        b.finish(
            "three_bus",
            vec![
                spec("S_SGshare", FeatureKind::Share, sg_share(200.0), sg_share(500.0)),
                spec("tau_v", FeatureKind::TimeConstant, 0.01, 1.0),
                spec("R", FeatureKind::Droop, 0.01, 1.0),
            ],
        )
    }

    /// 71-state, 6-feature system: two SGs, one VSC aggregate and a meshed network.
    /// Features: `S_SG1share`, `S_SG2share`, `P_load5share`, `P_load6share`, `tau_v`, `R`.
    /// Load shares act as modifiers of network damping and inter-machine coupling.
    pub fn nine_bus() -> Self {
        let mut b = Builder::new();
        let (s1, s2, p5, p6, tau, r) = (0, 1, 2, 3, 4, 5);
        add_vsc(
            &mut b,
            &VscFeatures {
                share: &[(s1, 0.3), (s2, 0.3)],
                tau,
                droop: r,
            },
        );
        add_sg(&mut b, "1", s1, r, 0.9);
        add_sg(&mut b, "2", s2, r, 1.15);
        let [vsc_c1, _, _, _, volt, droop] = b.vsc_blocks();
        let sg1 = b.sg(0);
        let sg2 = b.sg(1);

        // 19 network branch resonances
        let mut net = Vec::with_capacity(19);
        for k in 0..19 {
            let load = if k % 2 == 0 { p5 } else { p6 };
            let omega = Coefficient::constant(420.0 + 45.0 * k as f64).with(load, 30.0, 1.0);
            let zeta = Coefficient::constant(0.03).with(load, 0.02, 1.0);
            net.push(b.osc(&format!("branch {}", k + 1), GROUP_NETWORK, omega, zeta));
        }
        for k in 0..18 {
            b.couple(
                net[k],
                1,
                net[k + 1],
                1,
                Coefficient::constant(6.0).with(p5, 6.0, 1.0).with(p6, 6.0, 1.0),
            );
        }
        b.couple(net[0], 0, vsc_c1, 0, Coefficient::constant(10.0));
        b.couple(net[9], 0, sg1.stator, 0, Coefficient::constant(2.0).with(s1, 10.0, 1.0));
        b.couple(net[18], 0, sg2.stator, 0, Coefficient::constant(2.0).with(s2, 10.0, 1.0));

        // inter-machine swing coupling strengthened by load demand
        b.couple(
            sg1.em,
            1,
            sg2.em,
            1,
            Coefficient::constant(0.8).with(p5, 2.0, 1.0).with(p6, 2.0, 1.0),
        );
        b.couple(droop, 1, sg1.em, 1, Coefficient::constant(0.4).with(s1, 1.5, 1.0));
        b.couple(droop, 1, sg2.em, 1, Coefficient::constant(0.4).with(s2, 1.5, 1.0));
        b.couple(volt, 1, sg1.exciter, 1, Coefficient::constant(1.0).with(s1, 1.5, 1.0));
        b.couple(volt, 1, sg2.exciter, 1, Coefficient::constant(1.0).with(s2, 1.5, 1.0));
        b.couple(vsc_c1, 0, sg1.stator, 1, Coefficient::constant(1.0).with(s1, 8.0, 1.0));

        b.finish(
            "nine_bus",
            vec![
                spec("S_SG1share", FeatureKind::Share, 0.2, 1.0),
                spec("S_SG2share", FeatureKind::Share, 0.2, 1.0),
                spec("P_load5share", FeatureKind::Share, 0.4, 0.6),
                spec("P_load6share", FeatureKind::Share, 0.2, 0.4),
                spec("tau_v", FeatureKind::TimeConstant, 0.01, 1.0),
                spec("R", FeatureKind::Droop, 0.01, 1.0),
            ],
        )
    }
}

fn spec(name: &str, kind: FeatureKind, a: f64, b: f64) -> FeatureSpec {
    FeatureSpec {
        name: name.to_string(),
        kind,
        min: a.min(b),
        max: a.max(b),
    }
}

/// Block indices of one synchronous generator.
#[derive(Clone, Copy)]
struct SgBlocks {
    em: usize,
    turbine: usize,
    governor: usize,
    exciter: usize,
    avr: usize,
    stator: usize,
    field: usize,
    damper: usize,
}

struct Builder {
    blocks: Vec<Block>,
    couplings: Vec<Coupling>,
    vsc: Vec<usize>,
    sgs: Vec<SgBlocks>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            blocks: Vec::new(),
            couplings: Vec::new(),
            vsc: Vec::new(),
            sgs: Vec::new(),
        }
    }

    fn osc(&mut self, name: &str, group: &str, omega: Coefficient, zeta: Coefficient) -> usize {
        self.blocks.push(Block::Oscillator {
            name: name.to_string(),
            group: group.to_string(),
            omega,
            zeta,
        });
        self.blocks.len() - 1
    }

    fn lag(&mut self, name: &str, group: &str, rate: Coefficient) -> usize {
        self.blocks.push(Block::Lag {
            name: name.to_string(),
            group: group.to_string(),
            rate,
        });
        self.blocks.len() - 1
    }

    fn couple(&mut self, a: usize, sa: usize, b: usize, sb: usize, gain: Coefficient) {
        self.couplings.push(Coupling {
            from: StateRef { block: a, state: sa },
            to: StateRef { block: b, state: sb },
            gain,
        });
    }

    fn vsc_blocks(&self) -> [usize; 6] {
        self.vsc.clone().try_into().expect("six VSC blocks")
    }

    fn sg(&self, i: usize) -> SgBlocks {
        self.sgs[i]
    }

    fn sg_blocks(&self, i: usize) -> [usize; 8] {
        let s = self.sgs[i];
        [
            s.em, s.turbine, s.governor, s.exciter, s.avr, s.stator, s.field, s.damper,
        ]
    }

    fn finish(self, name: &str, features: Vec<FeatureSpec>) -> SystemConfig {
        let group_labels: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.group().to_string(), b.n_states()))
            .collect();
        let cfg = SystemConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: name.to_string(),
            n_states: group_labels.len(),
            n_features: features.len(),
            features,
            group_labels,
            block_spec: self.blocks,
            couplings: self.couplings,
        };
        cfg.validate().expect("built-in configuration is consistent");
        cfg
    }
}

struct VscFeatures<'a> {
    /// (feature index, weight) pairs forming the effective SG share seen by the VSC.
    share: &'a [(usize, f64)],
    tau: usize,
    droop: usize,
}

/// Eleven VSC states: two grid-current resonances (4), inner current loop (1),
/// PLL (2), voltage control (2) and frequency droop (2).
fn add_vsc(b: &mut Builder, f: &VscFeatures) {
    let shared = |base: f64, scale: f64| {
        f.share
            .iter()
            .fold(Coefficient::constant(base), |c, &(i, w)| c.with(i, scale * w, 1.0))
    };
    let c1 = b.osc("grid current d", GROUP_VSC_CURRENTS, shared(300.0, 80.0), shared(0.05, 0.04));
    let c2 = b.osc("grid current q", GROUP_VSC_CURRENTS, shared(150.0, 50.0), Coefficient::constant(0.12));
    let inner = b.lag(
        "inner current loop",
        GROUP_VSC_CONTROLLERS,
        shared(200.0, 200.0).with_offset(f.tau, 25.0, -1.0, 0.1),
    );
    let pll = b.osc("PLL", GROUP_VSC_CONTROLLERS, shared(30.0, 15.0), Coefficient::constant(0.5));
    let volt = b.osc(
        "voltage control",
        GROUP_VSC_CONTROLLERS,
        Coefficient::constant(4.0).with(f.tau, 1.6, -0.5),
        Coefficient::constant(0.15).with(f.tau, 0.3, 1.0),
    );
    let droop = b.osc(
        "frequency droop",
        GROUP_VSC_CONTROLLERS,
        Coefficient::constant(3.0).with(f.droop, 1.2, -0.5),
        Coefficient::constant(0.08).with(f.droop, 0.5, 1.0),
    );
    b.couple(c2, 1, pll, 1, Coefficient::constant(5.0));
    b.couple(inner, 0, c1, 1, Coefficient::constant(15.0));
    b.couple(pll, 1, droop, 1, Coefficient::constant(1.0));
    b.vsc = vec![c1, c2, inner, pll, volt, droop];
}

/// Eleven SG states: mechanics (swing 2, turbine 1, governor 1), exciter (2 + AVR 1)
/// and currents (stator 2, field 1, damper 1). `scale` detunes a second machine.
fn add_sg(b: &mut Builder, tag: &str, share: usize, droop: usize, scale: f64) {
    let label = |g: &str| {
        if tag.is_empty() {
            g.to_string()
        } else {
            g.replacen("SG", &format!("SG{tag}"), 1)
        }
    };
    let mech = label(GROUP_SG_MECHANICS);
    let exc = label(GROUP_SG_EXCITER);
    let cur = label(GROUP_SG_CURRENTS);
    let em = b.osc(
        "electromechanical swing",
        &mech,
        Coefficient::constant(0.0).with(share, 4.0 * scale, -0.5),
        Coefficient::constant(0.06).with(share, 0.1, 1.0),
    );
    let turbine = b.lag("turbine", &mech, Coefficient::constant(2.5 * scale).with(share, 1.0, 1.0));
    let governor = b.lag("governor", &mech, Coefficient::constant(0.2).with(droop, 0.3, 1.0));
    let exciter = b.osc(
        "exciter",
        &exc,
        Coefficient::constant(12.0 * scale).with(share, 10.0, 1.0),
        Coefficient::constant(0.3),
    );
    let avr = b.lag("AVR", &exc, Coefficient::constant(50.0 * scale).with(share, 40.0, 1.0));
    let stator = b.osc(
        "stator",
        &cur,
        Coefficient::constant(377.0 * scale).with(share, 30.0, 1.0),
        Coefficient::constant(0.03),
    );
    let field = b.lag("field", &cur, Coefficient::constant(0.8).with(share, 1.5, 1.0));
    let damper = b.lag("damper", &cur, Coefficient::constant(700.0 * scale).with(share, 100.0, 1.0));
    b.couple(em, 0, turbine, 0, Coefficient::constant(1.0));
    b.couple(turbine, 0, governor, 0, Coefficient::constant(0.2));
    b.couple(avr, 0, exciter, 1, Coefficient::constant(8.0));
    b.couple(field, 0, em, 1, Coefficient::constant(0.5));
    b.couple(damper, 0, stator, 1, Coefficient::constant(30.0));
    b.sgs.push(SgBlocks {
        em,
        turbine,
        governor,
        exciter,
        avr,
        stator,
        field,
        damper,
    });
}

/// Assemble `A(point)` for `config`.
pub fn build_state_matrix(config: &SystemConfig, point: &FeaturePoint) -> Result<StateMatrix> {
    config.check_point(point)?;
    let x = &point.values;
    let n = config.n_states;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let offsets = config.block_offsets();
    for (block, &o) in config.block_spec.iter().zip(&offsets) {
        match block {
            Block::Oscillator {
                name, omega, zeta, ..
            } => {
                let w = omega.eval(x);
                let z = zeta.eval(x);
                if !(w > 0.0 && z > 0.0 && w.is_finite() && z.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "block `{name}` has non-physical omega={w}, zeta={z} at {x:?}"
                    )));
                }
                a[(o, o + 1)] = w;
                a[(o + 1, o)] = -w;
                a[(o + 1, o + 1)] = -2.0 * z * w;
            }
            Block::Lag { name, rate, .. } => {
                let r = rate.eval(x);
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "block `{name}` has non-physical rate={r} at {x:?}"
                    )));
                }
                a[(o, o)] = -r;
            }
        }
    }
    for c in &config.couplings {
        let i = config.state_index(&offsets, c.from)?;
        let j = config.state_index(&offsets, c.to)?;
        let g = c.gain.eval(x);
        if !g.is_finite() {
            return Err(Error::NonFinite("coupling gain"));
        }
        a[(i, j)] += g;
        a[(j, i)] -= g;
    }
    Ok(StateMatrix {
        a,
        config_name: config.name.clone(),
        features: point.clone(),
    })
}

/// One sweep dimension. Usually a single feature; coupled features (e.g. load
/// scenarios that move two demands together) share an axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub features: Vec<usize>,
    /// Each entry holds one value per feature in `features`.
    pub values: Vec<Vec<f64>>,
}

impl GridAxis {
    pub fn single(feature: usize, values: Vec<f64>) -> Self {
        GridAxis {
            features: vec![feature],
            values: values.into_iter().map(|v| vec![v]).collect(),
        }
    }
}

/// Ordered sweep points plus the grid neighbour each point is tracked against.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<FeaturePoint>,
    /// Axis coordinates of every point.
    pub coords: Vec<Vec<usize>>,
    pub axis_lengths: Vec<usize>,
}

impl Sweep {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Grid predecessor: decrement the last non-zero axis coordinate and reset all
    /// later coordinates to zero. Only the first point has none; every other point is
    /// reached from its predecessor by moving along a single axis.
    pub fn predecessor(&self, i: usize) -> Option<usize> {
        let c = &self.coords[i];
        let k = c.iter().rposition(|&v| v > 0)?;
        let mut prev = c.clone();
        prev[k] -= 1;
        for v in prev.iter_mut().skip(k + 1) {
            *v = 0;
        }
        Some(self.flat_index(&prev))
    }

    fn flat_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.axis_lengths)
            .fold(0, |acc, (&c, &len)| acc * len + c)
    }

    /// Stable hash of the swept values, used for DB provenance.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.points {
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Full Cartesian product of one value list per feature, lexicographic over feature
/// index with the last feature varying fastest.
pub fn sweep_grid(config: &SystemConfig, per_feature_values: &[Vec<f64>]) -> Result<Sweep> {
    if per_feature_values.len() != config.n_features {
        return Err(Error::DimensionMismatch {
            expected: config.n_features,
            got: per_feature_values.len(),
            context: "per-feature value lists",
        });
    }
    let axes: Vec<GridAxis> = per_feature_values
        .iter()
        .enumerate()
        .map(|(f, v)| GridAxis::single(f, v.clone()))
        .collect();
    sweep_axes(config, &axes)
}

/// Cartesian product over axes (last axis fastest). Every feature must be covered by
/// exactly one axis.
pub fn sweep_axes(config: &SystemConfig, axes: &[GridAxis]) -> Result<Sweep> {
    let mut owner = vec![None; config.n_features];
    for (a, axis) in axes.iter().enumerate() {
        if axis.values.is_empty() {
            return Err(Error::EmptyInput("grid axis value list"));
        }
        for &f in &axis.features {
            if f >= config.n_features {
                return Err(Error::IndexOutOfRange {
                    index: f,
                    limit: config.n_features,
                });
            }
            if owner[f].replace(a).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "feature {f} appears on more than one grid axis"
                )));
            }
        }
        if let Some(bad) = axis.values.iter().find(|v| v.len() != axis.features.len()) {
            return Err(Error::DimensionMismatch {
                expected: axis.features.len(),
                got: bad.len(),
                context: "grid axis entry",
            });
        }
    }
    if let Some(f) = owner.iter().position(Option::is_none) {
        return Err(Error::InvalidArgument(format!(
            "feature `{}` is not covered by the grid",
            config.features[f].name
        )));
    }

    let lengths: Vec<usize> = axes.iter().map(|a| a.values.len()).collect();
    let total: usize = lengths.iter().product();
    let names = config.feature_names();
    let mut points = Vec::with_capacity(total);
    let mut coords = Vec::with_capacity(total);
    let mut c = vec![0usize; axes.len()];
    for _ in 0..total {
        let mut values = vec![0.0; config.n_features];
        for (axis, &ci) in axes.iter().zip(&c) {
            for (&f, &v) in axis.features.iter().zip(&axis.values[ci]) {
                values[f] = v;
            }
        }
        let point = FeaturePoint::new(names.clone(), values)?;
        config.check_point(&point)?;
        points.push(point);
        coords.push(c.clone());
        for k in (0..c.len()).rev() {
            c[k] += 1;
            if c[k] < lengths[k] {
                break;
            }
            c[k] = 0;
        }
    }
    Ok(Sweep {
        points,
        coords,
        axis_lengths: lengths,
    })
}

/// The 3-bus sweep: 4 SG ratings x 7 voltage time constants x 100 droop values.
pub fn three_bus_axes() -> Vec<GridAxis> {
    let shares = [500.0, 400.0, 300.0, 200.0].iter().map(|&s| sg_share(s)).collect();
    let taus = vec![0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0];
    let droops = (1..=100).map(|i| i as f64 / 100.0).collect();
    vec![
        GridAxis::single(0, shares),
        GridAxis::single(1, taus),
        GridAxis::single(2, droops),
    ]
}

/// The 9-bus sweep: 5 x 5 SG ratings, 3 load scenarios, 7 time constants, 7 droops.
pub fn nine_bus_axes() -> Vec<GridAxis> {
    let ratings: Vec<f64> = [250.0, 200.0, 150.0, 100.0, 50.0]
        .iter()
        .map(|&s| nine_bus_share(s))
        .collect();
    // base demand, then +50 MW at load 5, then +50 MW at load 6
    let scenarios = [(100.0, 50.0), (150.0, 50.0), (100.0, 100.0)]
        .iter()
        .map(|&(p5, p6)| vec![nine_bus_share(p5), nine_bus_share(p6)])
        .collect();
    let taus = vec![0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0];
    let droops = vec![0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0];
    vec![
        GridAxis::single(0, ratings.clone()),
        GridAxis::single(1, ratings),
        GridAxis {
            features: vec![2, 3],
            values: scenarios,
        },
        GridAxis::single(4, taus),
        GridAxis::single(5, droops),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point3(s: f64, tau: f64, r: f64) -> FeaturePoint {
        FeaturePoint::for_config(&SystemConfig::three_bus(), vec![s, tau, r]).unwrap()
    }

    #[test]
    fn builtin_sizes() {
        let c3 = SystemConfig::three_bus();
        assert_eq!(c3.n_states, 22);
        assert_eq!(c3.n_features, 3);
        assert_eq!(c3.groups().len(), 5);
        let c9 = SystemConfig::nine_bus();
        assert_eq!(c9.n_states, 71);
        assert_eq!(c9.n_features, 6);
    }

    #[test]
    fn matrix_shapes_and_determinism() {
        let c3 = SystemConfig::three_bus();
        let p = point3(0.4, 0.3, 0.05);
        let a = build_state_matrix(&c3, &p).unwrap();
        let b = build_state_matrix(&c3, &p).unwrap();
        assert_eq!(a.a.shape(), (22, 22));
        assert!(a.a.iter().zip(b.a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let c9 = SystemConfig::nine_bus();
        let p9 = FeaturePoint::for_config(&c9, vec![0.28, 0.68, 0.5, 0.28, 0.65, 0.02]).unwrap();
        assert_eq!(build_state_matrix(&c9, &p9).unwrap().a.shape(), (71, 71));
    }

    #[test]
    fn symmetric_part_is_negative_semidefinite() {
        let c3 = SystemConfig::three_bus();
        let a = build_state_matrix(&c3, &point3(0.3, 0.01, 0.01)).unwrap().a;
        let s = &a + a.transpose();
        let eig = s.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l <= 1e-9));
    }

    #[test]
    fn rejects_bad_points() {
        let c3 = SystemConfig::three_bus();
        let bad = FeaturePoint::new(c3.feature_names(), vec![0.4, 0.3, 1.5]).unwrap();
        assert!(matches!(
            build_state_matrix(&c3, &bad),
            Err(Error::FeatureOutOfRange { .. })
        ));
        let bad = FeaturePoint::new(c3.feature_names(), vec![0.4, -0.3, 0.5]).unwrap();
        assert!(build_state_matrix(&c3, &bad).is_err());
        let short = FeaturePoint::new(vec!["a".into()], vec![0.5]).unwrap();
        assert!(matches!(
            build_state_matrix(&c3, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn share_encoding() {
        assert!((sg_share(500.0) - 0.5).abs() < 1e-15);
        assert!((sg_share(330.0) - 330.0 / 830.0).abs() < 1e-15);
        assert!((nine_bus_share(70.0) - 0.28).abs() < 1e-15);
        assert!((nine_bus_share(170.0) - 0.68).abs() < 1e-15);
    }

    #[test]
    fn grid_sizes() {
        let c3 = SystemConfig::three_bus();
        assert_eq!(sweep_axes(&c3, &three_bus_axes()).unwrap().len(), 2800);
        let c9 = SystemConfig::nine_bus();
        assert_eq!(sweep_axes(&c9, &nine_bus_axes()).unwrap().len(), 3675);
        let single = sweep_grid(&c3, &[vec![0.4], vec![0.1], vec![0.5]]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.predecessor(0), None);
    }

    #[test]
    fn grid_order_is_lexicographic_last_fastest() {
        let c3 = SystemConfig::three_bus();
        let s = sweep_grid(&c3, &[vec![0.3, 0.4], vec![0.1, 0.2], vec![0.5, 0.6, 0.7]]).unwrap();
        let v: Vec<Vec<f64>> = s.points.iter().map(|p| p.values.clone()).collect();
        assert_eq!(v[0], vec![0.3, 0.1, 0.5]);
        assert_eq!(v[1], vec![0.3, 0.1, 0.6]);
        assert_eq!(v[3], vec![0.3, 0.2, 0.5]);
        assert_eq!(v[6], vec![0.4, 0.1, 0.5]);
        assert_eq!(s.predecessor(1), Some(0));
        assert_eq!(s.predecessor(3), Some(0));
        assert_eq!(s.predecessor(4), Some(3));
        assert_eq!(s.predecessor(6), Some(0));
        assert_eq!(s.predecessor(9), Some(6));
    }

    #[test]
    fn empty_value_list_is_rejected() {
        let c3 = SystemConfig::three_bus();
        assert!(matches!(
            sweep_grid(&c3, &[vec![0.3], vec![], vec![0.5]]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        for cfg in [SystemConfig::three_bus(), SystemConfig::nine_bus()] {
            let back = SystemConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn validation_catches_label_mismatch() {
        let mut cfg = SystemConfig::three_bus();
        cfg.group_labels[0] = "SG currents".into();
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::three_bus();
        cfg.n_states = 21;
        assert!(cfg.validate().is_err());
    }
}
