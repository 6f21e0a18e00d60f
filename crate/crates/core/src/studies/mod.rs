//! Case-study drivers. Each one runs a bundled victim in the backend's
//! victim context and recovers its secret from counter deltas.

pub mod kaslr;
pub mod presets;
pub mod rsa;
pub mod spectre;
pub mod zigzagger;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::counterleak::CounterSelector;
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Spectre,
    Kaslr,
    Rsa,
    Zigzagger,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::Spectre, Study::Kaslr, Study::Rsa, Study::Zigzagger];

    pub fn name(self) -> &'static str {
        match self {
            Study::Spectre => "spectre",
            Study::Kaslr => "kaslr",
            Study::Rsa => "rsa",
            Study::Zigzagger => "zigzagger",
        }
    }

    /// Counter the study leaks, at the index the bundled profiles use.
    pub fn default_selector(self) -> CounterSelector {
        match self {
            Study::Spectre => CounterSelector::new(presets::DIVIDER_INDEX, spectre::DIVIDER_EVENT),
            Study::Kaslr => CounterSelector::new(presets::WALK_INDEX, kaslr::WALK_EVENT),
            Study::Rsa => CounterSelector::new(presets::BRANCH_INDEX, rsa::BRANCH_EVENT),
            Study::Zigzagger => {
                CounterSelector::new(presets::INSTRUCTION_INDEX, zigzagger::INSTRUCTION_EVENT)
            }
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown study `{s}`")))
    }
}
