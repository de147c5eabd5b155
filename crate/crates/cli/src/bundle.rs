//! JSON result bundles and the plain records they are built from.

use std::collections::BTreeMap;

use pre_forge::algebra::{eig_full, CoherenceVector, RMat, RVec, C64};
use pre_forge::constraints::{Ensemble, VerificationReport};
use pre_forge::measurement::{AdaptiveScheme, JumpTarget, SchemeReport};
use pre_forge::model::BlochModel;
use pre_forge::solver::{ScanTable, SolverConfig, StartOutcome};
use pre_forge::symmetry::{InvariantSubspace, SourceKind, SymmetryKind, WignerSymmetry};
use pre_forge::trajectory::{TrajectoryStats, UnconditionalReport};
use serde::{Deserialize, Serialize};

use crate::spec::MESpecFile;
use crate::CliError;

pub const BUNDLE_SCHEMA: &str = "pre-forge/bundle@1";

pub fn rows(m: &RMat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn columns(m: &RMat) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

pub fn from_rows(r: &[Vec<f64>]) -> Result<RMat, CliError> {
    let n = r.len();
    let m = r.first().map_or(0, |x| x.len());
    if r.iter().any(|x| x.len() != m) {
        return Err(CliError::usage("ragged matrix"));
    }
    Ok(RMat::from_fn(n, m, |i, j| r[i][j]))
}

fn pair(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub dim: usize,
    /// Coherence vectors, one per member.
    pub states: Vec<Vec<f64>>,
    /// `kappa[j][k]`: rate from member `k` to member `j`.
    pub kappa: Vec<Vec<f64>>,
    #[serde(default)]
    pub occupations: Vec<f64>,
}

impl EnsembleRecord {
    pub fn from_ensemble(e: &Ensemble) -> Self {
        Self {
            dim: e.dim(),
            states: e.states().iter().map(|x| x.0.iter().copied().collect()).collect(),
            kappa: rows(e.kappa()),
            occupations: e.occupations().iter().copied().collect(),
        }
    }

    /// Occupations are recomputed from the rates.
    pub fn to_ensemble(&self) -> Result<Ensemble, CliError> {
        let states = self
            .states
            .iter()
            .map(|s| CoherenceVector(RVec::from_column_slice(s)))
            .collect();
        Ensemble::new(self.dim, states, from_rows(&self.kappa)?).map_err(CliError::from)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub value: [f64; 2],
    pub algebraic: usize,
    pub geometric: usize,
    pub vectors: Vec<Vec<[f64; 2]>>,
    /// Lengths of the Jordan chains of a defective eigenvalue.
    pub chains: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub dim: usize,
    pub l0: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub x_ss: Vec<f64>,
    pub defective: bool,
    pub spectrum: Vec<ClusterRecord>,
}

impl ModelSummary {
    pub fn new(bm: &BlochModel) -> Result<Self, CliError> {
        let spec = eig_full(&bm.l0)?;
        Ok(Self {
            dim: bm.dim(),
            l0: rows(&bm.l0),
            b: bm.b.iter().copied().collect(),
            x_ss: bm.x_ss.0.iter().copied().collect(),
            defective: spec.is_defective(),
            spectrum: spec
                .clusters
                .iter()
                .map(|c| ClusterRecord {
                    value: pair(c.value),
                    algebraic: c.algebraic,
                    geometric: c.geometric,
                    vectors: c.vectors.iter().map(|v| v.iter().copied().map(pair).collect()).collect(),
                    chains: c.chains.iter().map(|ch| ch.vectors.len()).collect(),
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceRecord {
    pub index: usize,
    pub n: usize,
    /// Orthonormal basis of 𝕴₀, one column per entry.
    pub basis: Vec<Vec<f64>>,
    pub certificate: f64,
    pub witness: Vec<f64>,
    pub sources: Vec<String>,
    pub family: Option<String>,
}

impl SubspaceRecord {
    pub fn new(index: usize, s: &InvariantSubspace) -> Self {
        Self {
            index,
            n: s.n(),
            basis: columns(s.basis_i0()),
            certificate: s.certificate,
            witness: s.witness.iter().copied().collect(),
            sources: s
                .sources
                .iter()
                .map(|src| {
                    let what = match &src.kind {
                        SourceKind::RealEigenvectors(k) => format!("{k} real eigenvector(s)"),
                        SourceKind::ComplexPair(k) => format!("{k} complex pair(s)"),
                        SourceKind::JordanPrefix { chain, rank } => format!("Jordan chain {chain} up to rank {rank}"),
                    };
                    format!("λ = {:.6}{:+.6}i: {what}", src.eigenvalue.re, src.eigenvalue.im)
                })
                .collect(),
            family: s.family.as_ref().map(|f| f.description.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryRecord {
    pub t0: Vec<Vec<f64>>,
    pub kind: SymmetryKind,
    pub tag: Option<String>,
    pub generator: Option<Vec<Vec<f64>>>,
}

impl SymmetryRecord {
    pub fn new(w: &WignerSymmetry) -> Self {
        Self {
            t0: rows(w.t0()),
            kind: w.kind,
            tag: w.generator_tag.clone(),
            generator: w.generator.as_ref().map(rows),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub accepted: usize,
    pub not_converged: usize,
    pub negative_rate: usize,
    pub not_positive: usize,
    pub disconnected: usize,
    pub coincident_members: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: StartOutcome) {
        match o {
            StartOutcome::Accepted => self.accepted += 1,
            StartOutcome::NotConverged => self.not_converged += 1,
            StartOutcome::NegativeRate => self.negative_rate += 1,
            StartOutcome::NotPositive => self.not_positive += 1,
            StartOutcome::Disconnected => self.disconnected += 1,
            StartOutcome::CoincidentMembers => self.coincident_members += 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSection {
    pub k: usize,
    pub graph: String,
    /// `full`, `subspace <i>` or `wigner family`.
    pub reduction: String,
    pub subspace: Option<SubspaceRecord>,
    pub solver: SolverConfig,
    /// Orthogonal maps under which ensembles were counted once.
    pub dedup_maps: Vec<Vec<Vec<f64>>>,
    pub ensembles: Vec<EnsembleRecord>,
    pub family_tags: Vec<Option<String>>,
    pub verification: Vec<VerificationReport>,
    pub rate_vertices: Vec<Vec<f64>>,
    pub starts: OutcomeCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingRecord {
    pub beta: Vec<[f64; 2]>,
    /// `S` as rows of `[re, im]` pairs.
    pub s: Vec<Vec<[f64; 2]>>,
    pub routing: Vec<JumpTarget>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeSection {
    pub detectors: usize,
    pub wlo_factor: f64,
    pub ensemble: EnsembleRecord,
    pub settings: Vec<SettingRecord>,
    pub residual: f64,
    pub report: SchemeReport,
}

impl SchemeSection {
    pub fn new(
        scheme: &AdaptiveScheme,
        ens: &Ensemble,
        wlo_factor: f64,
        report: SchemeReport,
    ) -> Self {
        Self {
            detectors: scheme.n_detectors(),
            wlo_factor,
            ensemble: EnsembleRecord::from_ensemble(ens),
            settings: scheme
                .settings
                .iter()
                .zip(&scheme.jump_map)
                .map(|(s, r)| SettingRecord {
                    beta: s.beta().iter().copied().map(pair).collect(),
                    s: s.s().row_iter().map(|row| row.iter().copied().map(pair).collect()).collect(),
                    routing: r.clone(),
                })
                .collect(),
            residual: scheme.residual,
            report,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySection {
    pub stats: TrajectoryStats,
    pub expected_occupations: Vec<f64>,
    pub occupancy_sigma: Vec<f64>,
    pub empirical_rates: Vec<Vec<f64>>,
    pub unconditional: Option<UnconditionalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanSection {
    pub parameter: String,
    pub table: ScanTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultBundle {
    pub schema: String,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name; `pre-forge rerun` replays them
    /// against the embedded spec.
    pub invocation: Vec<String>,
    pub spec: MESpecFile,
    pub parameters: BTreeMap<String, f64>,
    pub rng_seed: Option<u64>,
    pub model: ModelSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspaces: Option<Vec<SubspaceRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetries: Option<Vec<SymmetryRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSection>,
}

impl ResultBundle {
    pub fn load(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let b: ResultBundle = serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::usage(format!("{path}: field `{}`: {}", e.path(), e.inner()))
        })?;
        if b.schema != BUNDLE_SCHEMA {
            return Err(CliError::usage(format!(
                "{path}: bundle schema \"{}\" is not \"{BUNDLE_SCHEMA}\"",
                b.schema
            )));
        }
        Ok(b)
    }
}

/// Reads an ensemble from a bare record or from the `index`-th search result
/// of a bundle.
pub fn load_ensemble(path: &str, index: usize) -> Result<Ensemble, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
    if value.get("schema").is_some() {
        let bundle = ResultBundle::load(path)?;
        let search = bundle
            .search
            .ok_or_else(|| CliError::usage(format!("{path}: bundle has no search results")))?;
        let rec = search.ensembles.get(index).ok_or_else(|| {
            CliError::usage(format!(
                "{path}: index {index} out of range ({} ensembles)",
                search.ensembles.len()
            ))
        })?;
        return rec.to_ensemble();
    }
    let rec: EnsembleRecord = serde_path_to_error::deserialize(value)
        .map_err(|e| CliError::usage(format!("{path}: field `{}`: {}", e.path(), e.inner())))?;
    rec.to_ensemble()
}
