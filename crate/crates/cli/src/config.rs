//! Experiment configuration: one JSON document per run, parsed strictly.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use manl_core::annihilation::{kappa_limit, AnnihilationKernel, KernelProfile};
use manl_core::observable::{ObservablePair, TestFunction};
use manl_core::sim::{ProductTest, SimConfig};
use manl_core::solvers::SolverConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Selftest,
    Minkowski,
    Hydro,
    Clt,
    Chaos,
    Expansion,
    Tightness,
    Bg,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Selftest,
        ExperimentKind::Minkowski,
        ExperimentKind::Hydro,
        ExperimentKind::Clt,
        ExperimentKind::Chaos,
        ExperimentKind::Expansion,
        ExperimentKind::Tightness,
        ExperimentKind::Bg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Selftest => "selftest",
            ExperimentKind::Minkowski => "minkowski",
            ExperimentKind::Hydro => "hydro",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Chaos => "chaos",
            ExperimentKind::Expansion => "expansion",
            ExperimentKind::Tightness => "tightness",
            ExperimentKind::Bg => "bg",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

fn indicator() -> KernelProfile {
    KernelProfile::Indicator
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    #[serde(default = "indicator")]
    pub profile: KernelProfile,
    /// Minkowski constant behind `lambda_eff`; `null` takes the closed-form limit.
    #[serde(default)]
    pub kappa: Option<f64>,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { profile: KernelProfile::Indicator, kappa: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Base particle configuration. Experiments pick `n`, `replicas` and `t_end` from their
    /// own parameters and fall back to these.
    pub sim: SimConfig,
    #[serde(default)]
    pub kernel: KernelParams,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ModelConfig {
    pub fn kappa(&self) -> f64 {
        self.kernel.kappa.unwrap_or_else(|| kappa_limit(self.sim.d))
    }

    pub fn sim_for(&self, n: usize, replicas: usize, t_end: f64) -> SimConfig {
        let mut s = self.sim.clone();
        s.n = n;
        s.replicas = replicas;
        s.t_end = t_end;
        s
    }

    pub fn kernel_for(&self, sim: &SimConfig) -> Result<AnnihilationKernel> {
        Ok(sim.kernel()?.with_kappa(self.kappa()).with_profile(self.kernel.profile)?)
    }

    /// Kernel of the limit equations, `delta` only fixes the pair quadrature.
    pub fn kernel_at(&self, n: usize) -> Result<AnnihilationKernel> {
        self.kernel_for(&self.sim_for(n, 1, self.sim.t_end))
    }

    pub fn lambda_eff(&self) -> Result<f64> {
        Ok(self.kernel_at(self.sim.n)?.lambda_eff())
    }

    pub fn initial(&self) -> ObservablePair {
        ObservablePair::new(self.sim.init_plus.profile.clone(), self.sim.init_minus.profile.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.solver.validate()?;
        if let Some(k) = self.kernel.kappa {
            if !(k > 0.0 && k.is_finite()) {
                bail!("kappa must be positive, got {k}");
            }
        }
        self.kernel_at(self.sim.n)?;
        Ok(())
    }
}

/// One `(phi, psi)` pair of a first-order correlation test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossTest {
    pub phi: TestFunction,
    pub psi: TestFunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelftestParams {
    pub n: usize,
    /// Seeds of the pair-conservation runs.
    pub seeds: Vec<u64>,
    /// Lower bound on the particle-steps checked for pair conservation.
    pub particle_steps: u64,
}

impl Default for SelftestParams {
    fn default() -> Self {
        SelftestParams { n: 500, seeds: vec![1, 2, 3], particle_steps: 1_000_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinkowskiParams {
    /// Strictly decreasing; empty picks the defaults for `model.sim.d`.
    pub deltas: Vec<f64>,
    pub quadrature: manl_core::annihilation::QuadratureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftParams {
    pub n: usize,
    pub times: Vec<f64>,
    /// Half-width of the centred difference.
    pub h: f64,
    /// Neumann test functions only: otherwise reflection adds a boundary term to the drift.
    pub observables: Vec<ObservablePair>,
}

impl Default for DriftParams {
    fn default() -> Self {
        DriftParams { n: 1000, times: vec![0.05, 0.1], h: 0.01, observables: neumann_observables() }
    }
}

fn neumann_observables() -> Vec<ObservablePair> {
    vec![
        ones(),
        ObservablePair::new(cos(1, 1.0), cos(1, -1.0)),
        ObservablePair::new(cos(2, 1.0), TestFunction::Sum { terms: vec![TestFunction::constant(0.5), cos(1, 1.0)] }),
    ]
}

fn ones() -> ObservablePair {
    ObservablePair::new(TestFunction::constant(1.0), TestFunction::constant(1.0))
}

fn cos(k: usize, amp: f64) -> TestFunction {
    TestFunction::cos(&[k], amp)
}

fn exp_decay(rate: f64) -> TestFunction {
    TestFunction::Exp { rate: vec![-rate], amp: 1.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HydroParams {
    pub n_values: Option<Vec<usize>>,
    pub replicas: Option<usize>,
    pub t: Option<f64>,
    pub observables: Vec<ObservablePair>,
    pub drift: Option<DriftParams>,
}

impl Default for HydroParams {
    fn default() -> Self {
        HydroParams {
            n_values: Some(vec![250, 1000, 4000]),
            replicas: None,
            t: None,
            observables: vec![
                ones(),
                ObservablePair::new(cos(1, 1.0), cos(1, 1.0)),
                ObservablePair::new(exp_decay(5.0), TestFunction::Zero),
            ],
            drift: Some(DriftParams::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MartingaleParams {
    pub n: usize,
    pub replicas: usize,
    pub t: f64,
}

impl Default for MartingaleParams {
    fn default() -> Self {
        MartingaleParams { n: 1000, replicas: 1000, t: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CltParams {
    pub n: Option<usize>,
    pub replicas: Option<usize>,
    pub t: Option<f64>,
    pub observables: Vec<ObservablePair>,
    pub lambda_off: bool,
    /// Particle count of the run with annihilation switched off.
    pub lambda_off_n: usize,
    pub martingale: Option<MartingaleParams>,
    /// Cosine index cap of the covariance solve; its band compares against twice this.
    pub solver_kmax: usize,
}

impl Default for CltParams {
    fn default() -> Self {
        CltParams {
            n: Some(4000),
            replicas: None,
            t: None,
            observables: neumann_observables(),
            lambda_off: true,
            lambda_off_n: 1000,
            martingale: Some(MartingaleParams::default()),
            solver_kmax: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosParams {
    pub n_values: Option<Vec<usize>>,
    pub replicas: Option<usize>,
    pub t: Option<f64>,
    pub tests: Vec<CrossTest>,
    /// Shift each factor by its mean under the one-particle density, so the product term vanishes.
    pub centre: bool,
}

impl Default for ChaosParams {
    fn default() -> Self {
        ChaosParams {
            n_values: Some(vec![250, 1000, 4000]),
            replicas: None,
            t: None,
            tests: vec![CrossTest { phi: exp_decay(5.0), psi: exp_decay(5.0) }],
            centre: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub n: usize,
    pub replicas: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams { n: 6, replicas: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionParams {
    pub n: Option<usize>,
    pub replicas: Option<usize>,
    /// `null` is a quarter of the solver horizon `T0`.
    pub t: Option<f64>,
    pub tests: Vec<ProductTest>,
    pub centre: bool,
    pub toy: ToyParams,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        let gauss = TestFunction::Gaussian { center: vec![0.0], width: 0.2, amp: 1.0 };
        ExpansionParams {
            n: Some(1000),
            replicas: Some(10_000),
            t: None,
            tests: vec![
                ProductTest { plus: vec![exp_decay(5.0)], minus: vec![exp_decay(5.0)] },
                ProductTest { plus: vec![cos(1, 1.0)], minus: vec![gauss] },
                ProductTest { plus: vec![exp_decay(5.0), exp_decay(5.0)], minus: vec![] },
            ],
            centre: true,
            toy: ToyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TightnessParams {
    pub n: Option<usize>,
    pub replicas: Option<usize>,
    /// Windows are `[start, start + width]`.
    pub start: f64,
    pub windows: Vec<f64>,
    pub observable: ObservablePair,
}

impl Default for TightnessParams {
    fn default() -> Self {
        TightnessParams { n: Some(1000), replicas: None, start: 0.05, windows: vec![0.04, 0.16], observable: ones() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BgParams {
    pub n_values: Option<Vec<usize>>,
    pub replicas: Option<usize>,
    /// `null` is half of the solver horizon `T0`.
    pub t: Option<f64>,
    pub observables: Vec<ObservablePair>,
    /// Angular nodes of the near-interface projection table.
    pub n_theta: usize,
}

impl Default for BgParams {
    fn default() -> Self {
        BgParams {
            n_values: Some(vec![250, 1000, 4000]),
            replicas: None,
            t: None,
            observables: vec![ones()],
            n_theta: 65,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    Selftest(SelftestParams),
    Minkowski(MinkowskiParams),
    Hydro(HydroParams),
    Clt(CltParams),
    Chaos(ChaosParams),
    Expansion(ExpansionParams),
    Tightness(TightnessParams),
    Bg(BgParams),
}

impl Params {
    pub fn default_for(kind: ExperimentKind) -> Params {
        match kind {
            ExperimentKind::Selftest => Params::Selftest(Default::default()),
            ExperimentKind::Minkowski => Params::Minkowski(Default::default()),
            ExperimentKind::Hydro => Params::Hydro(Default::default()),
            ExperimentKind::Clt => Params::Clt(Default::default()),
            ExperimentKind::Chaos => Params::Chaos(Default::default()),
            ExperimentKind::Expansion => Params::Expansion(Default::default()),
            ExperimentKind::Tightness => Params::Tightness(Default::default()),
            ExperimentKind::Bg => Params::Bg(Default::default()),
        }
    }

    pub fn parse(kind: ExperimentKind, v: Value) -> Result<Params> {
        let v = if v.is_null() { Value::Object(Default::default()) } else { v };
        let ctx = || format!("invalid params for experiment {}", kind.name());
        Ok(match kind {
            ExperimentKind::Selftest => Params::Selftest(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Minkowski => Params::Minkowski(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Hydro => Params::Hydro(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Clt => Params::Clt(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Chaos => Params::Chaos(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Expansion => Params::Expansion(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Tightness => Params::Tightness(serde_json::from_value(v).with_context(ctx)?),
            ExperimentKind::Bg => Params::Bg(serde_json::from_value(v).with_context(ctx)?),
        })
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            Params::Selftest(_) => ExperimentKind::Selftest,
            Params::Minkowski(_) => ExperimentKind::Minkowski,
            Params::Hydro(_) => ExperimentKind::Hydro,
            Params::Clt(_) => ExperimentKind::Clt,
            Params::Chaos(_) => ExperimentKind::Chaos,
            Params::Expansion(_) => ExperimentKind::Expansion,
            Params::Tightness(_) => ExperimentKind::Tightness,
            Params::Bg(_) => ExperimentKind::Bg,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentKind,
    model: ModelConfig,
    #[serde(default)]
    params: Value,
    outputs: PathBuf,
    #[serde(default)]
    report_format: ReportFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    pub params: Params,
    pub outputs: PathBuf,
    pub report_format: ReportFormat,
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let raw: RawConfig = serde_json::from_value(v).context("invalid configuration")?;
        let params = Params::parse(raw.experiment, raw.params)?;
        let cfg = ExperimentConfig {
            experiment: raw.experiment,
            model: raw.model,
            params,
            outputs: raw.outputs,
            report_format: raw.report_format,
        };
        cfg.model.validate().context("invalid model")?;
        Ok(cfg)
    }

    /// Reads `path`, applies `key=value` overrides and parses strictly.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut v: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    /// The configuration as a JSON document, with every default filled in.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_value()).expect("configuration serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn default_for(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment: kind,
            model: default_model(),
            params: Params::default_for(kind),
            outputs: PathBuf::from(format!("results/{}", kind.name())),
            report_format: ReportFormat::Csv,
        }
    }
}

/// Desk-scale model: `d = 1`, uniform initial densities, `T = 0.25`.
pub fn default_model() -> ModelConfig {
    let mut sim = SimConfig::new(1, 1000, 0.25);
    sim.replicas = 2000;
    sim.seed = 20_261_014;
    ModelConfig { sim, kernel: KernelParams::default(), solver: SolverConfig::default() }
}

/// Sets `a.b.c = value` in a JSON tree; `value` is read as JSON, or else as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {spec:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, p) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("override {key}: {} is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        node = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace() {
        let mut v = serde_json::json!({"a": {"b": 1}});
        apply_override(&mut v, "a.b=2").unwrap();
        apply_override(&mut v, "a.c.d=[1,2]").unwrap();
        apply_override(&mut v, "e=text").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": 2, "c": {"d": [1, 2]}}, "e": "text"}));
        assert!(apply_override(&mut v, "a.b.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::default_for(kind);
            let back = ExperimentConfig::from_value(cfg.to_value()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }
}
