use std::fmt;

use crate::error::{bail, Result};

/// Per-scale token resolutions `h_1 < h_2 < … < h_N` (tokens per side).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScaleSchedule {
    resolutions: Vec<usize>,
}

impl ScaleSchedule {
    /// A single-scale schedule is accepted so that layouts and plain generation
    /// can be exercised on it; rollout-based training requires at least two scales.
    pub fn new(resolutions: Vec<usize>) -> Result<Self> {
        if resolutions.is_empty() {
            bail!(Config, "scale schedule is empty");
        }
        if resolutions[0] == 0 {
            bail!(Config, "scale resolutions must be positive");
        }
        if let Some(w) = resolutions.windows(2).find(|w| w[0] >= w[1]) {
            bail!(
                Config,
                "scale schedule must be strictly increasing ({} >= {})",
                w[0],
                w[1]
            );
        }
        Ok(Self { resolutions })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let res: std::result::Result<Vec<usize>, _> = text
            .split(',')
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect();
        match res {
            Ok(r) => Self::new(r),
            Err(e) => bail!(Config, "bad scale schedule {text:?}: {e}"),
        }
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Number of scales `N`.
    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Side of scale `i` (zero-based).
    pub fn side(&self, i: usize) -> usize {
        self.resolutions[i]
    }

    pub fn top(&self) -> usize {
        *self.resolutions.last().expect("non-empty")
    }

    /// Total token count `Σ h_i²`.
    pub fn total_tokens(&self) -> usize {
        self.resolutions.iter().map(|h| h * h).sum()
    }

    pub(crate) fn require_rollout(&self) -> Result<()> {
        if self.len() < 2 {
            bail!(
                Usage,
                "this operation needs a schedule with at least two scales"
            );
        }
        Ok(())
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.resolutions.iter().map(|h| h.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
