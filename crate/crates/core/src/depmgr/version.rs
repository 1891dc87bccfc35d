//! Version constraints in the pip dialect: `==`, `!=`, `>=`, `<=`, `>`, `<`, `~=`
//! over dotted numeric versions.
//!
//! Conflict detection intersects the two constraints as an interval with
//! point exclusions and then asks whether any version of the finite grid
//! `0.0.0 ..= 20.10.10` lies inside it.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad constraint {text:?}: {reason}")]
pub struct BadConstraint {
    pub text: String,
    pub reason: String,
}

fn bad(text: &str, reason: impl Into<String>) -> BadConstraint {
    BadConstraint {
        text: text.to_string(),
        reason: reason.into(),
    }
}

/// Grid bounds used by [`constraint_conflicts`]: major 0..=20, minor and patch 0..=10.
pub const GRID_MAJOR: u64 = 20;
pub const GRID_MINOR: u64 = 10;
pub const GRID_PATCH: u64 = 10;

/// 1 to 4 dot-separated non-negative integers. Trailing zeros are insignificant.
#[derive(Debug, Clone)]
pub struct Version(Vec<u64>);

impl Version {
    pub fn new(parts: &[u64]) -> Self {
        assert!(
            (1..=4).contains(&parts.len()),
            "version needs 1-4 components"
        );
        Self(parts.to_vec())
    }

    pub fn parts(&self) -> &[u64] {
        &self.0
    }

    fn component(&self, i: usize) -> u64 {
        self.0.get(i).copied().unwrap_or(0)
    }
}

impl FromStr for Version {
    type Err = BadConstraint;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.is_empty() || parts.len() > 4 {
            return Err(bad(s, "version needs 1-4 components"));
        }
        let nums = parts
            .iter()
            .map(|p| {
                if p.is_empty() || !p.chars().all(|c| c.is_ascii_digit()) {
                    Err(bad(s, "version components must be non-negative integers"))
                } else {
                    p.parse::<u64>()
                        .map_err(|_| bad(s, "version component too large"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self(nums))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&text.join("."))
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        (0..4)
            .map(|i| self.component(i).cmp(&other.component(i)))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Version {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Ge,
    Le,
    Gt,
    Lt,
    Compatible,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Eq => "==",
            Op::Ne => "!=",
            Op::Ge => ">=",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Lt => "<",
            Op::Compatible => "~=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub op: Op,
    pub version: Version,
}

impl Clause {
    pub fn matches(&self, v: &Version) -> bool {
        match self.op {
            Op::Eq => v == &self.version,
            Op::Ne => v != &self.version,
            Op::Ge => v >= &self.version,
            Op::Le => v <= &self.version,
            Op::Gt => v > &self.version,
            Op::Lt => v < &self.version,
            Op::Compatible => {
                let (lower, upper) = compatible_bounds(&self.version);
                v >= &lower && v < &upper
            }
        }
    }
}

/// `~=X.Y` is `>=X.Y, <X+1`; `~=X.Y.Z` is `>=X.Y.Z, <X.(Y+1)`.
fn compatible_bounds(v: &Version) -> (Version, Version) {
    let parts = v.parts();
    let mut upper = parts[..parts.len() - 1].to_vec();
    *upper.last_mut().expect("~= needs two components") += 1;
    (v.clone(), Version(upper))
}

/// A conjunction of clauses. No clauses means "latest".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VersionConstraint {
    pub clauses: Vec<Clause>,
}

impl VersionConstraint {
    pub fn latest() -> Self {
        Self::default()
    }

    pub fn is_latest(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn satisfied_by(&self, v: &Version) -> bool {
        self.clauses.iter().all(|c| c.matches(v))
    }
}

impl FromStr for VersionConstraint {
    type Err = BadConstraint;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Ok(Self::latest());
        }
        let mut clauses = Vec::new();
        for piece in compact.split(',') {
            let (op, rest) = [
                ("==", Op::Eq),
                ("!=", Op::Ne),
                (">=", Op::Ge),
                ("<=", Op::Le),
                ("~=", Op::Compatible),
                (">", Op::Gt),
                ("<", Op::Lt),
            ]
            .iter()
            .find_map(|(prefix, op)| piece.strip_prefix(prefix).map(|rest| (*op, rest)))
            .ok_or_else(|| bad(text, format!("clause {piece:?} has no operator")))?;
            let version: Version = rest
                .parse()
                .map_err(|e: BadConstraint| bad(text, e.reason))?;
            if op == Op::Compatible && version.parts().len() < 2 {
                return Err(bad(text, "~= needs at least two version components"));
            }
            clauses.push(Clause { op, version });
        }
        Ok(Self { clauses })
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text: Vec<String> = self
            .clauses
            .iter()
            .map(|c| format!("{}{}", c.op.as_str(), c.version))
            .collect();
        f.write_str(&text.join(","))
    }
}

pub fn constraint_satisfies(version: &str, constraint: &str) -> Result<bool, BadConstraint> {
    let v: Version = version.parse()?;
    let c: VersionConstraint = constraint.parse()?;
    Ok(c.satisfied_by(&v))
}

pub fn constraint_conflicts(a: &str, b: &str) -> Result<bool, BadConstraint> {
    let a: VersionConstraint = a.parse()?;
    let b: VersionConstraint = b.parse()?;
    Ok(!Region::of(&[&a, &b]).meets_grid())
}

#[derive(Debug, Clone)]
struct Bound {
    version: Version,
    inclusive: bool,
}

/// Intersection of clauses as `lower .. upper` minus excluded points.
#[derive(Debug, Clone, Default)]
struct Region {
    lower: Option<Bound>,
    upper: Option<Bound>,
    excluded: Vec<Version>,
}

impl Region {
    fn of(constraints: &[&VersionConstraint]) -> Self {
        let mut region = Region::default();
        for clause in constraints.iter().flat_map(|c| c.clauses.iter()) {
            let v = clause.version.clone();
            match clause.op {
                Op::Eq => {
                    region.raise(v.clone(), true);
                    region.cap(v, true);
                }
                Op::Ne => region.excluded.push(v),
                Op::Ge => region.raise(v, true),
                Op::Gt => region.raise(v, false),
                Op::Le => region.cap(v, true),
                Op::Lt => region.cap(v, false),
                Op::Compatible => {
                    let (lo, hi) = compatible_bounds(&v);
                    region.raise(lo, true);
                    region.cap(hi, false);
                }
            }
        }
        region
    }

    fn raise(&mut self, version: Version, inclusive: bool) {
        let tighter = match &self.lower {
            None => true,
            Some(b) => version > b.version || (version == b.version && !inclusive),
        };
        if tighter {
            self.lower = Some(Bound { version, inclusive });
        }
    }

    fn cap(&mut self, version: Version, inclusive: bool) {
        let tighter = match &self.upper {
            None => true,
            Some(b) => version < b.version || (version == b.version && !inclusive),
        };
        if tighter {
            self.upper = Some(Bound { version, inclusive });
        }
    }

    fn below_upper(&self, v: &Version) -> bool {
        match &self.upper {
            None => true,
            Some(b) if b.inclusive => v <= &b.version,
            Some(b) => v < &b.version,
        }
    }

    /// Walks grid points upward from the lower bound, skipping excluded ones.
    fn meets_grid(&self) -> bool {
        let mut point = match &self.lower {
            None => Some(GridPoint::ZERO),
            Some(b) => GridPoint::ceil(&b.version, !b.inclusive),
        };
        while let Some(p) = point {
            let v = p.version();
            if !self.below_upper(&v) {
                return false;
            }
            if !self.excluded.contains(&v) {
                return true;
            }
            point = p.next();
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridPoint(u64, u64, u64);

impl GridPoint {
    const ZERO: GridPoint = GridPoint(0, 0, 0);

    fn version(self) -> Version {
        Version(vec![self.0, self.1, self.2])
    }

    fn next(self) -> Option<GridPoint> {
        let GridPoint(a, b, c) = self;
        if c < GRID_PATCH {
            Some(GridPoint(a, b, c + 1))
        } else if b < GRID_MINOR {
            Some(GridPoint(a, b + 1, 0))
        } else if a < GRID_MAJOR {
            Some(GridPoint(a + 1, 0, 0))
        } else {
            None
        }
    }

    /// Smallest grid point `>= v` (or `> v` when `strict`).
    fn ceil(v: &Version, strict: bool) -> Option<GridPoint> {
        let (a, b, c) = (v.component(0), v.component(1), v.component(2));
        let tail_nonzero = v.component(3) > 0;
        let candidate = if a > GRID_MAJOR {
            return None;
        } else if b > GRID_MINOR {
            if a == GRID_MAJOR {
                return None;
            }
            GridPoint(a + 1, 0, 0)
        } else if c > GRID_PATCH {
            GridPoint(a, b, GRID_PATCH).next()?
        } else if tail_nonzero {
            GridPoint(a, b, c).next()?
        } else {
            let exact = GridPoint(a, b, c);
            return if strict { exact.next() } else { Some(exact) };
        };
        Some(candidate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Vec<Version> {
        let mut out = Vec::new();
        for a in 0..=GRID_MAJOR {
            for b in 0..=GRID_MINOR {
                for c in 0..=GRID_PATCH {
                    out.push(Version(vec![a, b, c]));
                }
            }
        }
        out
    }

    fn brute_conflicts(a: &VersionConstraint, b: &VersionConstraint) -> bool {
        !grid()
            .iter()
            .any(|v| a.satisfied_by(v) && b.satisfied_by(v))
    }

    #[test]
    fn grid_size() {
        assert_eq!(grid().len(), 21 * 11 * 11);
    }

    #[test]
    fn examples() {
        assert!(constraint_satisfies("1.5.1", ">=1.0,<2.0").unwrap());
        assert!(!constraint_satisfies("2.0", ">=1.0,<2.0").unwrap());
        assert!(constraint_conflicts(">=2.0", "<2.0").unwrap());
        assert!(!constraint_conflicts(">=1.21", "").unwrap());
        assert!(constraint_conflicts(">=1.21", "<1.20").unwrap());
        assert!(!constraint_conflicts("==1.9.5", "<1.10").unwrap());
    }

    #[test]
    fn padding_equality() {
        assert_eq!(
            "1.0".parse::<Version>().unwrap(),
            "1.0.0.0".parse::<Version>().unwrap()
        );
        assert!(constraint_satisfies("1", "==1.0.0").unwrap());
    }

    #[test]
    fn compatible_release() {
        assert!(constraint_satisfies("1.9", "~=1.2").unwrap());
        assert!(!constraint_satisfies("2.0", "~=1.2").unwrap());
        assert!(constraint_satisfies("1.2.9", "~=1.2.3").unwrap());
        assert!(!constraint_satisfies("1.3.0", "~=1.2.3").unwrap());
        assert!("~=1".parse::<VersionConstraint>().is_err());
    }

    #[test]
    fn bad_constraints() {
        for text in ["1.0", ">=1.x", "==", ">=1.2.3.4.5", ">=1..2", "=>1.0"] {
            assert!(text.parse::<VersionConstraint>().is_err(), "{text}");
        }
        assert!(constraint_satisfies("1.0rc1", ">=1").is_err());
    }

    #[test]
    fn off_grid_points() {
        // Only points outside the grid satisfy both.
        assert!(constraint_conflicts(">1.2.10", "<1.3").unwrap());
        assert!(constraint_conflicts(">20.10.10", "").unwrap());
        assert!(constraint_conflicts(">=1.2.3.1", "<=1.2.3.9").unwrap());
        assert!(!constraint_conflicts(">=1.2.3.1", "<=1.2.4").unwrap());
        assert!(constraint_conflicts("==1.2.3,!=1.2.3", "").unwrap());
        assert!(constraint_conflicts("==1.19.5", "<1.20").unwrap());
    }

    fn arb_version() -> impl Strategy<Value = Version> {
        prop::collection::vec(0u64..23, 1..=4).prop_map(Version)
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        (0usize..7, arb_version()).prop_map(|(op, mut version)| {
            let op = [
                Op::Eq,
                Op::Ne,
                Op::Ge,
                Op::Le,
                Op::Gt,
                Op::Lt,
                Op::Compatible,
            ][op];
            if op == Op::Compatible && version.0.len() < 2 {
                version.0.push(0);
            }
            Clause { op, version }
        })
    }

    fn arb_constraint() -> impl Strategy<Value = VersionConstraint> {
        prop::collection::vec(arb_clause(), 0..4).prop_map(|clauses| VersionConstraint { clauses })
    }

    proptest! {
        #[test]
        fn conflicts_match_brute_force(a in arb_constraint(), b in arb_constraint()) {
            let fast = !Region::of(&[&a, &b]).meets_grid();
            prop_assert_eq!(fast, brute_conflicts(&a, &b));
        }

        #[test]
        fn display_roundtrip(c in arb_constraint()) {
            let again: VersionConstraint = c.to_string().parse().unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
