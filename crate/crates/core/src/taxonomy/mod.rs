//! Exploitability characteristics of cache-affecting ISA extensions and the
//! attack classes each combination enables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

const EMBEDDED: &str = include_str!("knowledge_base.toml");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("knowledge base: {0}")]
    Parse(String),
    #[error("bad mark `{0}`")]
    Mark(String),
    #[error("bad profile `{0}`: use letters from UIMDS or five 0/1 values")]
    Profile(String),
}

/// The five characteristics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Characteristics {
    /// Usable without privilege.
    pub u: bool,
    /// Moves a line between cache levels.
    pub i: bool,
    /// Moves a line between cache and memory.
    pub m: bool,
    /// Reports a cache state change directly.
    pub d: bool,
    /// Suppresses faults on inaccessible addresses.
    pub s: bool,
}

impl Characteristics {
    pub fn from_bits(bits: u8) -> Self {
        Characteristics {
            u: bits & 1 != 0,
            i: bits & 2 != 0,
            m: bits & 4 != 0,
            d: bits & 8 != 0,
            s: bits & 16 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        [self.u, self.i, self.m, self.d, self.s]
            .iter()
            .enumerate()
            .map(|(k, b)| (*b as u8) << k)
            .sum()
    }
}

/// Accepts a set of letters (`U,I,S` or `uis`) or five positional values
/// (`1,1,0,0,1`).
impl FromStr for Characteristics {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || TaxonomyError::Profile(s.to_string());
        let tokens: Vec<&str> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        let flag = |t: &str| match t.to_ascii_lowercase().as_str() {
            "1" | "true" | "y" => Some(true),
            "0" | "false" | "n" => Some(false),
            _ => None,
        };
        if tokens.len() == 5 && tokens.iter().all(|t| flag(t).is_some()) {
            let v: Vec<bool> = tokens.iter().filter_map(|t| flag(t)).collect();
            return Ok(Characteristics {
                u: v[0],
                i: v[1],
                m: v[2],
                d: v[3],
                s: v[4],
            });
        }
        let mut c = Characteristics::default();
        for ch in tokens.concat().chars() {
            match ch.to_ascii_uppercase() {
                'U' => c.u = true,
                'I' => c.i = true,
                'M' => c.m = true,
                'D' => c.d = true,
                'S' => c.s = true,
                _ => return Err(err()),
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionProfile {
    pub name: String,
    pub characteristics: Characteristics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    CacheAttack,
    NoiseFree,
    FaultlessKaslr,
    FastEvset,
}

impl Attack {
    pub const ALL: [Attack; 4] = [
        Attack::CacheAttack,
        Attack::NoiseFree,
        Attack::FaultlessKaslr,
        Attack::FastEvset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::CacheAttack => "cache_attack",
            Attack::NoiseFree => "noise_free",
            Attack::FaultlessKaslr => "faultless_kaslr",
            Attack::FastEvset => "fast_evset",
        }
    }

    /// Boolean feasibility predicate.
    pub fn feasible(self, c: &Characteristics) -> bool {
        let moves = c.i || c.m;
        match self {
            Attack::CacheAttack => c.u && moves,
            Attack::NoiseFree => c.u && c.d,
            Attack::FaultlessKaslr => c.u && moves && c.s,
            Attack::FastEvset => c.u && c.i,
        }
    }
}

/// Attacks whose predicate holds, in [`Attack::ALL`] order.
pub fn feasible_attacks(c: &Characteristics) -> Vec<Attack> {
    Attack::ALL.into_iter().filter(|a| a.feasible(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    /// Feasible but not demonstrated.
    Unproposed,
    /// Feasible only with additional instructions.
    Extra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    Full,
    Half,
    Empty,
}

/// One table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Mark {
    pub symbol: Symbol,
    pub dagger: bool,
}

impl Mark {
    /// Predicate result with its annotations layered on. Either annotation
    /// implies feasibility; `Extra` adds a dagger and `Unproposed` halves the
    /// circle.
    pub fn compute(core: bool, annotations: &[Annotation]) -> Self {
        let dagger = annotations.contains(&Annotation::Extra);
        let unproposed = annotations.contains(&Annotation::Unproposed);
        let symbol = match (core || !annotations.is_empty(), unproposed) {
            (false, _) => Symbol::Empty,
            (true, true) => Symbol::Half,
            (true, false) => Symbol::Full,
        };
        Mark { symbol, dagger }
    }

    pub fn verdict(&self) -> Verdict {
        match (self.symbol, self.dagger) {
            (Symbol::Empty, _) => Verdict::No,
            (_, true) => Verdict::NeedsExtraInstructions,
            (Symbol::Half, false) => Verdict::FeasibleUnproposed,
            (Symbol::Full, false) => Verdict::Yes,
        }
    }
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.symbol {
            Symbol::Full => "full",
            Symbol::Half => "half",
            Symbol::Empty => "empty",
        };
        if self.dagger {
            write!(f, "{s}+dagger")
        } else {
            f.write_str(s)
        }
    }
}

impl FromStr for Mark {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sym, dagger) = match s.strip_suffix("+dagger") {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        let symbol = match sym {
            "full" => Symbol::Full,
            "half" => Symbol::Half,
            "empty" => Symbol::Empty,
            _ => return Err(TaxonomyError::Mark(s.to_string())),
        };
        Ok(Mark { symbol, dagger })
    }
}

impl TryFrom<String> for Mark {
    type Error = TaxonomyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Mark> for String {
    fn from(m: Mark) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    FeasibleUnproposed,
    NeedsExtraInstructions,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub cache_attack: Verdict,
    pub noise_free: Verdict,
    pub faultless_kaslr: Verdict,
    pub fast_evset: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub characteristics: Characteristics,
    #[serde(default)]
    pub annotations: BTreeMap<Attack, Vec<Annotation>>,
    pub expected: BTreeMap<Attack, Mark>,
}

impl Entry {
    pub fn profile(&self) -> ExtensionProfile {
        ExtensionProfile {
            name: self.name.clone(),
            characteristics: self.characteristics,
        }
    }

    pub fn mark(&self, attack: Attack) -> Mark {
        let ann = self
            .annotations
            .get(&attack)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        Mark::compute(attack.feasible(&self.characteristics), ann)
    }

    pub fn feasibility(&self) -> Feasibility {
        let v = |a| self.mark(a).verdict();
        Feasibility {
            cache_attack: v(Attack::CacheAttack),
            noise_free: v(Attack::NoiseFree),
            faultless_kaslr: v(Attack::FaultlessKaslr),
            fast_evset: v(Attack::FastEvset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    #[serde(rename = "instruction")]
    pub entries: Vec<Entry>,
}

impl KnowledgeBase {
    pub fn embedded() -> Self {
        Self::from_toml(EMBEDDED).expect("embedded knowledge base parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCheck {
    pub attack: Attack,
    pub expected: Option<Mark>,
    pub computed: Mark,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCheck {
    pub name: String,
    pub pass: bool,
    pub cells: Vec<CellCheck>,
}

/// Compares computed marks against each entry's expected marks.
pub fn verify_table(kb: &KnowledgeBase) -> Vec<RowCheck> {
    kb.entries
        .iter()
        .map(|e| {
            let cells: Vec<CellCheck> = Attack::ALL
                .into_iter()
                .map(|attack| CellCheck {
                    attack,
                    expected: e.expected.get(&attack).copied(),
                    computed: e.mark(attack),
                })
                .collect();
            RowCheck {
                name: e.name.clone(),
                pass: cells.iter().all(|c| c.expected == Some(c.computed)),
                cells,
            }
        })
        .collect()
}

/// Whether setting any characteristic bit never removes a feasible attack,
/// over all 32 profiles.
pub fn predicates_monotone() -> bool {
    (0u8..32).all(|bits| {
        let base = Characteristics::from_bits(bits);
        (0..5).all(|k| {
            let more = Characteristics::from_bits(bits | (1 << k));
            Attack::ALL
                .iter()
                .all(|a| !a.feasible(&base) || a.feasible(&more))
        })
    })
}

#[cfg(test)]
mod tests;
