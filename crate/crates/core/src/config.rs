//! Run configuration shared by the CLI verbs and the acceptance suites.

use crate::error::{Error, Result};
use crate::field::FieldContext;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub p: u64,
    /// Cyclotomic level `M`.
    pub m_level: u64,
    /// Working precision `P` (base-p digits).
    pub precision: u32,
    /// Jet order `D`.
    pub jet_order: u32,
    /// Node exponent range: grids use `l * q^N` for `N` in `[n_min, n_max]`.
    pub n_min: u32,
    pub n_max: u32,
    /// Override for the solver series length (defaults to `M * q^n_max`).
    pub n_override: Option<u64>,
    pub weight_max: u32,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub format: OutputFormat,
    pub threads: usize,
    /// DP step budget; evaluations beyond this are refused, not attempted.
    pub step_budget: u64,
    /// Cap on fit-system columns (`|basis| * (D+1)`), refused beyond.
    pub column_cap: u64,
    /// p-adic valuation floor of the dense decomposition nodes
    /// (default `f * n_min + 2`).
    pub fit_valuation: Option<u32>,
    /// Held-out nodes per class reserved for certificates.
    pub holdout: u32,
    /// Minimum acceptable certificate valuation (default `2 * f * n_min`).
    pub cert_floor: Option<i64>,
}

impl RunConfig {
    /// Desk-scale defaults at a given `(p, M)`.
    pub fn desk(p: u64, m_level: u64) -> Self {
        RunConfig {
            p,
            m_level,
            precision: 200,
            jet_order: 4,
            n_min: 3,
            n_max: 9,
            n_override: None,
            weight_max: 2,
            cache_dir: None,
            no_cache: false,
            format: OutputFormat::Json,
            threads: 0,
            step_budget: 300_000_000,
            column_cap: 4000,
            fit_valuation: None,
            holdout: 3,
            cert_floor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < self.n_min + self.jet_order + 2 {
            return Err(Error::Config(format!(
                "need n_max >= n_min + D + 2 for held-out certificate nodes (got [{}, {}], D = {})",
                self.n_min, self.n_max, self.jet_order
            )));
        }
        if self.holdout == 0 {
            return Err(Error::Config("holdout must be at least 1".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> Result<FieldContext> {
        self.validate()?;
        FieldContext::build(self.p, self.m_level, self.precision)
    }

    pub fn fit_valuation_for(&self, ctx: &FieldContext) -> u32 {
        self.fit_valuation.unwrap_or(ctx.residue_degree() * self.n_min + 2)
    }

    pub fn cert_floor_for(&self, ctx: &FieldContext) -> i64 {
        self.cert_floor.unwrap_or(2 * ctx.residue_degree() as i64 * self.n_min as i64)
    }

    /// Digest of everything that affects computed values (not output paths).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "p={};M={};P={};D={};N=[{},{}];nov={:?};w={};fit={:?};hold={};floor={:?}",
            self.p,
            self.m_level,
            self.precision,
            self.jet_order,
            self.n_min,
            self.n_max,
            self.n_override,
            self.weight_max,
            self.fit_valuation,
            self.holdout,
            self.cert_floor,
        ));
        format!("{:x}", h.finalize())[..16].to_string()
    }
}
