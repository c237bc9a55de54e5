use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::golden::ValidationPolicy;
use crate::gpusim::presets::{GroupKind, Preset};
use crate::gpusim::{load_program_doc, ProgramSpec};
use crate::hwsim::HwSimConfig;
use crate::model::DeviceConfig;
use crate::noise_study::NoiseStudyConfig;
use crate::segmentation::MarkerSpec;

use super::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "GOLDTRACE_OUT";
pub const DEFAULT_OUT: &str = "goldtrace-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramSource {
    /// AlexNet-8 when neither this nor `path` is given.
    pub preset: Option<Preset>,
    /// Program document, relative to the config file.
    pub path: Option<PathBuf>,
    pub group: GroupKind,
}

impl Default for ProgramSource {
    fn default() -> Self {
        ProgramSource { preset: None, path: None, group: GroupKind::Sm }
    }
}

impl ProgramSource {
    pub fn name(&self) -> String {
        match (&self.path, self.preset) {
            (Some(p), _) => p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
            (None, p) => p.unwrap_or(Preset::AlexNet).name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub golden: usize,
    pub normal: usize,
    pub attack: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes { golden: 100, normal: 100, attack: 100 }
    }
}

/// First seed of each dataset; trace `i` uses `base + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedBases {
    pub golden: u64,
    pub normal: u64,
    pub attack: u64,
}

impl Default for SeedBases {
    fn default() -> Self {
        SeedBases { golden: 0, normal: 1_000_000, attack: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackDoc {
    pub kind: AttackKind,
    #[serde(default)]
    pub target_kernel: Option<usize>,
    /// Defaults to the kind's calibrated magnitude.
    #[serde(default)]
    pub magnitude: Option<f64>,
}

impl AttackDoc {
    pub fn spec(&self, seed: u64) -> AttackSpec {
        let mut s = AttackSpec::new(self.kind, self.target_kernel, seed);
        if let Some(m) = self.magnitude {
            s.magnitude = m;
        }
        s
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude.unwrap_or(self.kind.default_magnitude())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Software,
    Hardware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwStudyConfig {
    pub hardware: HwSimConfig,
    pub presets: Vec<Preset>,
    /// Link bandwidths (packets per cycle) for the overhead rows.
    pub bandwidth_sweep: Vec<f64>,
    pub attacks: Vec<AttackDoc>,
    /// Attacked runs per preset and attack.
    pub trials: usize,
}

impl Default for HwStudyConfig {
    fn default() -> Self {
        HwStudyConfig {
            hardware: HwSimConfig::default(),
            presets: Preset::ALL.to_vec(),
            bandwidth_sweep: vec![0.0015, 0.002, 0.004, 0.008, f64::INFINITY],
            attacks: vec![AttackDoc { kind: AttackKind::BufferOverflow, target_kernel: None, magnitude: None }],
            trials: 10,
        }
    }
}

/// The single document driving every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub program: ProgramSource,
    pub device: DeviceConfig,
    /// Replaces the program's marker.
    pub marker: Option<MarkerSpec>,
    pub policy: ValidationPolicy,
    pub datasets: Sizes,
    pub seeds: SeedBases,
    pub attacks: Vec<AttackDoc>,
    pub mode: Mode,
    /// Windows summed per emitted sample (1 keeps the native rate).
    pub keep_every: usize,
    pub out_dir: Option<PathBuf>,
    pub noise_study: NoiseStudyConfig,
    pub hwsim: HwStudyConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            program: ProgramSource::default(),
            device: DeviceConfig::default(),
            marker: None,
            policy: ValidationPolicy::default(),
            datasets: Sizes::default(),
            seeds: SeedBases::default(),
            attacks: Vec::new(),
            mode: Mode::Software,
            keep_every: 1,
            out_dir: None,
            noise_study: NoiseStudyConfig::default(),
            hwsim: HwStudyConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut c: CampaignConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn check(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        let d = &self.datasets;
        if d.golden == 0 || d.normal == 0 || d.attack == 0 {
            return bad("dataset sizes must be ≥ 1");
        }
        if self.keep_every == 0 {
            return bad("keep_every must be ≥ 1");
        }
        if self.program.preset.is_some() && self.program.path.is_some() {
            return bad("program takes `preset` or `path`, not both");
        }
        self.device.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.hwsim.hardware.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(m) = &self.marker {
            m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// `flag`, else the document's `out_dir`, else `$GOLDTRACE_OUT`, else
    /// `goldtrace-out`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(d) = &self.out_dir {
            return self.base_dir.join(d);
        }
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn program(&self, device: &DeviceConfig) -> Result<ProgramSpec, CliError> {
        let mut program = match (&self.program.path, self.program.preset) {
            (Some(p), _) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                load_program_doc(&text, device)?
            }
            (None, preset) => preset.unwrap_or(Preset::AlexNet).program(self.program.group, device, self.seeds.golden),
        };
        if let Some(m) = &self.marker {
            program.marker = m.clone();
            program.validate()?;
        }
        Ok(program)
    }
}
