//! Master-equation spec files.
//!
//! ```json
//! {
//!   "schema": "pre-forge/me-spec@1",
//!   "metadata": { "name": "...", "description": "..." },
//!   "dim": 2,
//!   "parameters": { "gamma": 1.0, "Omega": null },
//!   "hamiltonian": [[[0, 0], ["Omega/2", 0]], [["Omega/2", 0], [0, 0]]],
//!   "lindblads": [ [[[0, 0], [0, 0]], [[0, "sqrt(gamma)"], [0, 0]]] ]
//! }
//! ```
//!
//! Matrix entries are `[re, im]` pairs; each part is a number or an
//! expression over the parameters. A `null` parameter must be bound on the
//! command line with `--param name=value`.

use std::collections::BTreeMap;

use pre_forge::algebra::{CMat, C64};
use pre_forge::model::MasterEquation;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SPEC_SCHEMA: &str = "pre-forge/me-spec@1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
}

pub type Entry = [Scalar; 2];
pub type Matrix = Vec<Vec<Entry>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MESpecFile {
    pub schema: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub dim: usize,
    #[serde(default)]
    pub parameters: BTreeMap<String, Option<f64>>,
    pub hamiltonian: Matrix,
    pub lindblads: Vec<Matrix>,
}

pub const BUILTIN: [(&str, &str); 2] = [
    ("resonance_fluorescence", include_str!("../catalog/resonance_fluorescence.json")),
    ("absorption_emission", include_str!("../catalog/absorption_emission.json")),
];

impl MESpecFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: MESpecFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            CliError::usage(format!(
                "{origin}: line {}, column {}, field `{}`: {inner}",
                inner.line(),
                inner.column(),
                e.path()
            ))
        })?;
        if spec.schema != SPEC_SCHEMA {
            return Err(CliError::usage(format!(
                "{origin}: field `schema`: expected \"{SPEC_SCHEMA}\", found \"{}\"",
                spec.schema
            )));
        }
        Ok(spec)
    }

    /// Reads a file, or a built-in model given as `catalog:<name>`.
    pub fn load(path: &str) -> Result<Self, CliError> {
        if let Some(name) = path.strip_prefix("catalog:") {
            let (_, text) = BUILTIN
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| {
                    let names: Vec<_> = BUILTIN.iter().map(|(n, _)| *n).collect();
                    CliError::usage(format!("unknown catalog model `{name}` (available: {})", names.join(", ")))
                })?;
            return Self::parse(text, path);
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{path}: {e}")))?;
        Self::parse(&text, path)
    }

    /// Parameter values after applying `name=value` overrides.
    pub fn bind(&self, overrides: &[(String, f64)]) -> Result<BTreeMap<String, f64>, CliError> {
        let mut values = BTreeMap::new();
        for (name, v) in &self.parameters {
            if let Some(v) = v {
                values.insert(name.clone(), *v);
            }
        }
        for (name, v) in overrides {
            if !self.parameters.contains_key(name) {
                return Err(CliError::usage(format!("--param {name}: the model has no parameter `{name}`")));
            }
            values.insert(name.clone(), *v);
        }
        if let Some(name) = self.parameters.keys().find(|n| !values.contains_key(*n)) {
            return Err(CliError::usage(format!(
                "parameter `{name}` is unbound; pass --param {name}=<value>"
            )));
        }
        Ok(values)
    }

    pub fn master_equation(&self, values: &BTreeMap<String, f64>) -> Result<MasterEquation, CliError> {
        let h = self.matrix(&self.hamiltonian, "hamiltonian", values)?;
        let cs = self
            .lindblads
            .iter()
            .enumerate()
            .map(|(i, m)| self.matrix(m, &format!("lindblads[{i}]"), values))
            .collect::<Result<Vec<_>, _>>()?;
        MasterEquation::new(h, cs).map_err(CliError::from)
    }

    fn matrix(&self, m: &Matrix, field: &str, values: &BTreeMap<String, f64>) -> Result<CMat, CliError> {
        let d = self.dim;
        if m.len() != d || m.iter().any(|row| row.len() != d) {
            return Err(CliError::usage(format!("field `{field}`: expected a {d}×{d} matrix")));
        }
        let mut out = CMat::zeros(d, d);
        for (i, row) in m.iter().enumerate() {
            for (j, [re, im]) in row.iter().enumerate() {
                let at = |part: &str| format!("{field}[{i}][{j}].{part}");
                out[(i, j)] = C64::new(eval(re, values, &at("re"))?, eval(im, values, &at("im"))?);
            }
        }
        Ok(out)
    }
}

fn eval(s: &Scalar, values: &BTreeMap<String, f64>, field: &str) -> Result<f64, CliError> {
    match s {
        Scalar::Number(v) => Ok(*v),
        Scalar::Expr(text) => {
            let mut ctx = meval::Context::new();
            for (k, v) in values {
                ctx.var(k.as_str(), *v);
            }
            let v = meval::eval_str_with_context(text, ctx).map_err(|e| match e {
                meval::Error::UnknownVariable(name) => {
                    CliError::usage(format!("field `{field}`: unbound symbol `{name}` in \"{text}\""))
                }
                other => CliError::usage(format!("field `{field}`: cannot evaluate \"{text}\": {other}")),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::usage(format!("field `{field}`: \"{text}\" is not finite")))
            }
        }
    }
}

pub fn parse_binding(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v = meval::eval_str(value.trim()).map_err(|e| format!("`{value}`: {e}"))?;
    Ok((name.trim().to_string(), v))
}
