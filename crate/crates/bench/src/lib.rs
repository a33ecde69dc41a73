//! Scenario runner comparing CAKE against the GKMP and LKH baselines.

pub mod closed_form;
pub mod report;
pub mod scenario;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{emit_table, Cell, Check, Format, Report};
pub use scenario::{run_scenario, SECRECY_CHECK};

pub const SEED_ENV: &str = "CAKE_BENCH_SEED";
pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Cake,
    Lkh,
    Gkmp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Create,
    Join,
    MassJoin,
    KeyDownload,
    Leave,
    Merge,
    Split,
    Rekey,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Create,
        Scenario::Join,
        Scenario::MassJoin,
        Scenario::KeyDownload,
        Scenario::Leave,
        Scenario::Merge,
        Scenario::Split,
        Scenario::Rekey,
    ];
}

macro_rules! name_table {
    ($t:ty, $($v:path => $s:literal),+ $(,)?) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(format!("unknown value {s:?}")),
                }
            }
        }
    };
}

name_table!(Scheme, Scheme::Cake => "cake", Scheme::Lkh => "lkh", Scheme::Gkmp => "gkmp");
name_table!(
    Scenario,
    Scenario::Create => "create",
    Scenario::Join => "join",
    Scenario::MassJoin => "mass_join",
    Scenario::KeyDownload => "key_download",
    Scenario::Leave => "leave",
    Scenario::Merge => "merge",
    Scenario::Split => "split",
    Scenario::Rekey => "rekey",
);

/// `p` is the joiner/leaver count, the number of groups for merge and the
/// number of parts for split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scheme: Scheme,
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scheme: Scheme, scenario: Scenario, n: usize) -> Self {
        ScenarioSpec {
            scheme,
            scenario,
            n,
            p: 1,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_p(mut self, p: usize) -> Self {
        self.p = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0} members exceed the capacity of {1}")]
    CapacityExceeded(usize, Scheme),
    #[error("{0} does not define {1}")]
    Unsupported(Scheme, Scenario),
    #[error("invalid parameters: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gc(#[from] cake_core::group_controller::GcError),
    #[error(transparent)]
    Sim(#[from] cake_core::transport_sim::SimError),
    #[error(transparent)]
    Baseline(#[from] cake_core::baselines::BaselineError),
}

/// Seed from the environment, falling back to [`DEFAULT_SEED`].
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED)
}
