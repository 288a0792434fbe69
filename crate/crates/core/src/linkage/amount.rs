use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOLS_PER_LIVRE: u64 = 20;
pub const DENIERS_PER_SOL: u64 = 12;
pub const DENIERS_PER_LIVRE: u64 = SOLS_PER_LIVRE * DENIERS_PER_SOL;

/// A sum in livres tournois, always carry-normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Amount {
    pub livres: u64,
    pub sols: u64,
    pub deniers: u64,
}

impl Amount {
    /// Carries excess deniers into sols and excess sols into livres.
    pub fn normalized(livres: u64, sols: u64, deniers: u64) -> Option<Amount> {
        let total = livres
            .checked_mul(DENIERS_PER_LIVRE)?
            .checked_add(sols.checked_mul(DENIERS_PER_SOL)?)?
            .checked_add(deniers)?;
        Some(Amount::from_deniers(total))
    }

    pub fn from_deniers(total: u64) -> Amount {
        Amount {
            livres: total / DENIERS_PER_LIVRE,
            sols: total % DENIERS_PER_LIVRE / DENIERS_PER_SOL,
            deniers: total % DENIERS_PER_SOL,
        }
    }

    pub fn total_deniers(&self) -> u64 {
        self.livres * DENIERS_PER_LIVRE + self.sols * DENIERS_PER_SOL + self.deniers
    }

    pub fn is_normalized(&self) -> bool {
        self.sols < SOLS_PER_LIVRE && self.deniers < DENIERS_PER_SOL
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}# {}s {}d", self.livres, self.sols, self.deniers)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Livres,
    Sols,
    Deniers,
}

fn unit(word: &str) -> Option<Slot> {
    match word {
        "#" | "lt" | "l" | "livre" | "livres" => Some(Slot::Livres),
        "s" | "sol" | "sols" => Some(Slot::Sols),
        "d" | "denier" | "deniers" => Some(Slot::Deniers),
        _ => None,
    }
}

/// Parses `<int>[#|lt|livres] <int>[s|sols] <int>[d|deniers]`, every
/// component optional but at least one present. A number without a unit
/// takes the slot after the previous one. The whole text must match.
///
/// Returns `Ok(None)` for text that is not an amount and an error for a
/// negative component.
pub fn parse_amount(text: &str) -> Result<Option<Amount>> {
    let lowered = text.to_lowercase();
    let mut components: Vec<(u64, Option<Slot>)> = Vec::new();
    for token in lowered.split_whitespace() {
        if token.starts_with('-') && token[1..].starts_with(|c: char| c.is_ascii_digit()) {
            return Err(Error::InvalidArgument(format!("negative amount component in `{text}`")));
        }
        let digits = token.find(|c: char| !c.is_ascii_digit()).unwrap_or(token.len());
        if digits == 0 {
            // A unit word written apart from its number.
            match (unit(token), components.last_mut()) {
                (Some(slot), Some((_, u @ None))) => *u = Some(slot),
                _ => return Ok(None),
            }
            continue;
        }
        let Ok(value) = token[..digits].parse::<u64>() else {
            return Ok(None);
        };
        let suffix = &token[digits..];
        let slot = match suffix {
            "" => None,
            _ => match unit(suffix) {
                Some(slot) => Some(slot),
                None => return Ok(None),
            },
        };
        components.push((value, slot));
    }
    if components.is_empty() {
        return Ok(None);
    }
    let mut slots = [0u64; 3];
    let mut last: Option<Slot> = None;
    for (value, slot) in components {
        let slot = match (slot, last) {
            (Some(slot), _) => slot,
            (None, None) => Slot::Livres,
            (None, Some(Slot::Livres)) => Slot::Sols,
            (None, Some(Slot::Sols)) => Slot::Deniers,
            (None, Some(Slot::Deniers)) => return Ok(None),
        };
        if last.is_some_and(|l| slot <= l) {
            return Ok(None);
        }
        slots[slot as usize] = value;
        last = Some(slot);
    }
    Ok(Amount::normalized(slots[0], slots[1], slots[2]))
}

/// Splits `label amount` text at the first token from which the remainder
/// parses as an amount.
pub fn split_amount(text: &str) -> Result<Option<(String, Amount)>> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    for k in 0..tokens.len() {
        let first = tokens[k].chars().next().unwrap_or(' ');
        let numeric = first.is_ascii_digit()
            || (first == '-' && tokens[k].chars().nth(1).is_some_and(|c| c.is_ascii_digit()));
        if !numeric {
            continue;
        }
        if let Some(amount) = parse_amount(&tokens[k..].join(" "))? {
            return Ok(Some((tokens[..k].join(" "), amount)));
        }
    }
    Ok(None)
}
