use std::fmt;
use std::str::FromStr;

use domainmix_core::cluster::CriteriaFlags;
use domainmix_core::train::{ClassifierInit, RealData, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Ablation rows. The clustering rows run the full model (ACI and the
/// balance loss on) and differ only in which reliability criteria filter
/// the DBSCAN output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "dbscan")]
    Dbscan,
    #[serde(rename = "dbscan_ic")]
    DbscanIc,
    #[serde(rename = "dbscan_q")]
    DbscanQ,
    #[serde(rename = "dbscan_icq")]
    DbscanIcq,
    #[serde(rename = "no_aci")]
    NoAci,
    #[serde(rename = "no_db")]
    NoDb,
    #[serde(rename = "only_A")]
    OnlyA,
    #[serde(rename = "domainmix_labeled")]
    DomainmixLabeled,
    #[serde(rename = "domainmix_unlabeled")]
    DomainmixUnlabeled,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Dbscan,
        Preset::DbscanIc,
        Preset::DbscanQ,
        Preset::DbscanIcq,
        Preset::NoAci,
        Preset::NoDb,
        Preset::OnlyA,
        Preset::DomainmixLabeled,
        Preset::DomainmixUnlabeled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Dbscan => "dbscan",
            Preset::DbscanIc => "dbscan_ic",
            Preset::DbscanQ => "dbscan_q",
            Preset::DbscanIcq => "dbscan_icq",
            Preset::NoAci => "no_aci",
            Preset::NoDb => "no_db",
            Preset::OnlyA => "only_A",
            Preset::DomainmixLabeled => "domainmix_labeled",
            Preset::DomainmixUnlabeled => "domainmix_unlabeled",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Dbscan => "DBSCAN pseudo-labels, no reliability criteria",
            Preset::DbscanIc => "DBSCAN + independence + compactness",
            Preset::DbscanQ => "DBSCAN + quantity",
            Preset::DbscanIcq => "DBSCAN + independence + compactness + quantity",
            Preset::NoAci => "full model with a randomly initialized classifier",
            Preset::NoDb => "full model without the domain balance loss",
            Preset::OnlyA => "synthetic data only",
            Preset::DomainmixLabeled => "full model with ground-truth identities for B",
            Preset::DomainmixUnlabeled => "full model",
        }
    }

    /// Whether the run touches the real-world training split at all.
    pub fn uses_real_data(self) -> bool {
        self != Preset::OnlyA
    }

    /// Applies this preset's overrides on top of `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.criteria = CriteriaFlags::ALL;
        c.classifier_init = ClassifierInit::Adaptive;
        c.real_data = RealData::Unlabeled;
        match self {
            Preset::Dbscan => c.criteria = CriteriaFlags::NONE,
            Preset::DbscanIc => {
                c.criteria = CriteriaFlags {
                    independence: true,
                    compactness: true,
                    quantity: false,
                }
            }
            Preset::DbscanQ => {
                c.criteria = CriteriaFlags {
                    independence: false,
                    compactness: false,
                    quantity: true,
                }
            }
            Preset::DbscanIcq | Preset::DomainmixUnlabeled => {}
            Preset::NoAci => c.classifier_init = ClassifierInit::Random,
            Preset::NoDb => c.loss.lambda_m = 0.0,
            Preset::OnlyA => c.real_data = RealData::None,
            Preset::DomainmixLabeled => c.real_data = RealData::Labeled,
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CliError::UnknownPreset(s.to_string()))
    }
}

/// Parses a comma-separated preset list; `all` expands to every preset.
pub fn parse_presets(s: &str) -> Result<Vec<Preset>, CliError> {
    if s.trim() == "all" {
        return Ok(Preset::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p: Preset = part.parse()?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no preset given".into()));
    }
    Ok(out)
}
