//! The standard 3+3 rule-based design.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Patients treated and toxicities observed at one panel level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LevelCount {
    pub treated: usize,
    pub toxicities: usize,
}

impl LevelCount {
    fn too_toxic(&self) -> bool {
        self.toxicities >= 2
    }
}

/// Next action of the 3+3 design; level indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "level")]
pub enum Decision {
    Escalate(usize),
    /// Treat three more patients at the current level.
    StayExpand,
    /// Move down one level and expand it to six patients.
    DeEscalate(usize),
    /// Lowest level too toxic: no MTD.
    Stop,
    Declare(usize),
}

/// Applies the 3+3 rules after a cohort has been treated at `current`.
///
/// | at current      | next level too toxic? | decision                                  |
/// |-----------------|-----------------------|-------------------------------------------|
/// | 0/3             | no                    | escalate (declare if top level)           |
/// | 0/3 or 1/3      | yes                   | expand current                            |
/// | 1/3             | —                     | expand current                            |
/// | ≤1/6            | no                    | escalate (declare if top level)           |
/// | ≤1/6            | yes                   | declare current                           |
/// | ≥2/3 or ≥2/6    | —                     | level 1: stop; lower has 6: declare lower; lower has 3: de-escalate |
pub fn three_plus_three_step(counts: &[LevelCount], current: usize) -> Result<Decision> {
    let k_count = counts.len();
    if current == 0 || current > k_count {
        return invalid(format!("current level {current} outside 1..={k_count}"));
    }
    for (k, c) in counts.iter().enumerate() {
        if !matches!(c.treated, 0 | 3 | 6) || c.toxicities > c.treated {
            return invalid(format!(
                "inconsistent counts at level {}: {}/{}",
                k + 1,
                c.toxicities,
                c.treated
            ));
        }
    }
    let here = counts[current - 1];
    if here.treated == 0 {
        return invalid(format!("no patient treated at the current level {current}"));
    }
    if here.too_toxic() {
        if current == 1 {
            return Ok(Decision::Stop);
        }
        let lower = counts[current - 2];
        return Ok(match lower.treated {
            6 => Decision::Declare(current - 1),
            3 => Decision::DeEscalate(current - 1),
            _ => return invalid(format!("level {} below the current one was never treated", current - 1)),
        });
    }
    let next_too_toxic = current < k_count && counts[current].too_toxic();
    Ok(match (here.treated, here.toxicities) {
        (3, 1) => Decision::StayExpand,
        (3, _) if next_too_toxic => Decision::StayExpand,
        (_, _) if next_too_toxic => Decision::Declare(current),
        (_, _) if current == k_count => Decision::Declare(current),
        _ => Decision::Escalate(current + 1),
    })
}
