//! Experiment configuration files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dnpsi::diagonalize::LeadingMode;
use dnpsi::discretize::TorusGrid;
use dnpsi::ellipticity::Sector;
use dnpsi::parametrix::ProbeQuantity;
use dnpsi::thermoplate::PlateParams;
use dnpsi::{DNSystem, ScalarSymbol, SymbolExpr};

use crate::CliError;

pub const CONFIG_SCHEMA: &str = "dnpsi-experiment/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckEllipticity,
    FindShift,
    ParametrixProbe,
    Diagonalize,
    ResolventSweep,
    Hinfty,
    PlateDemo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckEllipticity => "check-ellipticity",
            Command::FindShift => "find-shift",
            Command::ParametrixProbe => "parametrix-probe",
            Command::Diagonalize => "diagonalize",
            Command::ResolventSweep => "resolvent-sweep",
            Command::Hinfty => "hinfty",
            Command::PlateDemo => "plate-demo",
        }
    }
}

/// One matrix entry; `null` in the config stands for the zero symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntrySpec {
    pub expr: SymbolExpr,
    /// Defaults to lᵢ + mⱼ.
    #[serde(default)]
    pub order: Option<f64>,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Plate {
        params: PlateParams,
    },
    Matrix {
        dim: usize,
        l: Vec<f64>,
        m: Vec<f64>,
        entries: Vec<Vec<Option<EntrySpec>>>,
    },
}

impl SystemSpec {
    pub fn build(&self) -> Result<DNSystem, CliError> {
        match self {
            SystemSpec::Plate { params } => {
                let ps = dnpsi::thermoplate::build_plate_system(*params)?;
                Ok(ps.system)
            }
            SystemSpec::Matrix { dim, l, m, entries } => {
                if entries.len() != l.len() {
                    return Err(CliError::Input(format!(
                        "entries has {} rows but l has {} components",
                        entries.len(),
                        l.len()
                    )));
                }
                let mut rows = Vec::with_capacity(entries.len());
                for (i, row) in entries.iter().enumerate() {
                    if row.len() != m.len() {
                        return Err(CliError::Input(format!(
                            "row {} of entries has the wrong length",
                            i + 1
                        )));
                    }
                    let mut out = Vec::with_capacity(row.len());
                    for (j, e) in row.iter().enumerate() {
                        out.push(match e {
                            None => ScalarSymbol::zero(*dim),
                            Some(e) => {
                                let order = e.order.unwrap_or(l[i] + m[j]);
                                ScalarSymbol::from_expr(e.expr.clone(), *dim, order, e.delta)?
                            }
                        });
                    }
                    rows.push(out);
                }
                Ok(DNSystem::new(rows, l.clone(), m.clone())?)
            }
        }
    }

    pub fn plate_params(&self) -> Option<PlateParams> {
        match self {
            SystemSpec::Plate { params } => Some(*params),
            SystemSpec::Matrix { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorSpec {
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckSelection {
    Determinant,
    Minors,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.1
}

/// Numeric knobs shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numeric {
    pub threshold: f64,
    /// Fixed R for ellipticity checks; searched when absent.
    pub r: Option<f64>,
    pub check: CheckSelection,
    pub xi_k_min: i32,
    pub xi_k_max: i32,
    pub x_per_axis: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub quantity: ProbeQuantity,
    pub probe_k_min: i32,
    pub probe_k_max: i32,
    pub per_octave: usize,
    pub slope_tolerance: f64,
    pub leading: LeadingMode,
    pub alpha: f64,
    pub alpha_max: f64,
    pub alpha_tolerance: f64,
    pub s: f64,
    pub sweep_k_min: i32,
    pub sweep_k_max: i32,
    pub ray_k_min: i32,
    pub ray_k_max: i32,
    pub perturbation: Option<PerturbationSpec>,
    pub phi: f64,
    pub nodes_per_panel: usize,
    pub t_end: f64,
    pub steps: usize,
    pub record_every: usize,
}

impl Default for Numeric {
    fn default() -> Self {
        Numeric {
            threshold: 1e-6,
            r: None,
            check: CheckSelection::Both,
            xi_k_min: -4,
            xi_k_max: 20,
            x_per_axis: 16,
            n: 2,
            quantity: ProbeQuantity::JMinus1,
            probe_k_min: 4,
            probe_k_max: 12,
            per_octave: 1,
            slope_tolerance: 0.3,
            leading: LeadingMode::Exact,
            alpha: 1.0,
            alpha_max: 1e6,
            alpha_tolerance: 1e-4,
            s: 0.0,
            sweep_k_min: -4,
            sweep_k_max: 15,
            ray_k_min: 20,
            ray_k_max: 30,
            perturbation: None,
            phi: 0.1,
            nodes_per_panel: 8,
            t_end: 1.0,
            steps: 100,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub command: Command,
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub sector: Option<SectorSpec>,
    #[serde(default)]
    pub grid: Option<TorusGrid>,
    #[serde(default)]
    pub numeric: Numeric,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != CONFIG_SCHEMA {
            return Err(CliError::Input(format!(
                "unsupported schema {:?}; expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        if let Some(s) = self.sector {
            Sector::new(s.theta)?;
        }
        if let Some(g) = self.grid {
            TorusGrid::new(g.n, g.npts, g.period)?;
        }
        let needs_system = !matches!(self.command, Command::PlateDemo);
        if needs_system && self.system.is_none() {
            return Err(CliError::Input(format!(
                "command {} needs a system",
                self.command.name()
            )));
        }
        if self.command == Command::PlateDemo {
            if let Some(SystemSpec::Matrix { .. }) = self.system {
                return Err(CliError::Input("plate-demo needs a plate system".into()));
            }
        }
        if matches!(self.command, Command::ResolventSweep | Command::Hinfty) && self.grid.is_none()
        {
            return Err(CliError::Input(format!(
                "command {} needs a grid",
                self.command.name()
            )));
        }
        let n = &self.numeric;
        if n.xi_k_min > n.xi_k_max || n.probe_k_min > n.probe_k_max || n.sweep_k_min > n.sweep_k_max
        {
            return Err(CliError::Input(
                "dyadic ranges must satisfy k_min <= k_max".into(),
            ));
        }
        if n.ray_k_max - n.ray_k_min < 2 {
            return Err(CliError::Input(
                "the large-|lambda| ray needs at least 3 radii".into(),
            ));
        }
        if n.steps == 0 || n.record_every == 0 || n.x_per_axis == 0 || n.nodes_per_panel == 0 {
            return Err(CliError::Input(
                "steps, record_every, x_per_axis and nodes_per_panel must be positive".into(),
            ));
        }
        if !(n.threshold >= 0.0) || !(n.t_end >= 0.0) {
            return Err(CliError::Input(
                "threshold and t_end must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn sector(&self, default_theta: f64) -> Result<Sector, CliError> {
        Ok(Sector::new(
            self.sector.map(|s| s.theta).unwrap_or(default_theta),
        )?)
    }

    pub fn torus(&self) -> Result<Option<TorusGrid>, CliError> {
        match self.grid {
            Some(g) => Ok(Some(TorusGrid::new(g.n, g.npts, g.period)?)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::parse(
            r#"{"schema":"dnpsi-experiment/1","command":"plate-demo","system":{"kind":"plate","params":{"eta":2,"alpha":0.9,"beta":0.75}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.command, Command::PlateDemo);
        assert_eq!(cfg.numeric, Numeric::default());
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let err = ExperimentConfig::parse(r#"{"schema":"v0","command":"plate-demo"}"#).unwrap_err();
        assert!(matches!(err, CliError::Input(_)));
    }

    #[test]
    fn theta_out_of_range_is_rejected() {
        let err = ExperimentConfig::parse(
            r#"{"schema":"dnpsi-experiment/1","command":"plate-demo","sector":{"theta":3.5}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Input(_)));
    }

    #[test]
    fn matrix_system_builds() {
        let spec: SystemSpec = serde_json::from_str(
            r#"{"kind":"matrix","dim":1,"l":[2],"m":[0],"entries":[[{"expr":{"op":"bracket","p":2}}]]}"#,
        )
        .unwrap();
        let sys = spec.build().unwrap();
        assert_eq!(sys.r, vec![2.0]);
    }
}
