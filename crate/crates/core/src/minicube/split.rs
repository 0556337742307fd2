use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "ood-t")]
    OodT,
    #[serde(rename = "ood-s")]
    OodS,
    #[serde(rename = "ood-st")]
    OodSt,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Val, Split::OodT, Split::OodS, Split::OodSt];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::OodT => "ood-t",
            Split::OodS => "ood-s",
            Split::OodSt => "ood-st",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown split tag {s:?}")))
    }
}

/// One named subset: every (location, year) pair it may draw target windows from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub tag: Split,
    /// Half-open location index range.
    pub locations: [usize; 2],
    pub years: Vec<usize>,
    /// Number of cubes drawn from the subset.
    pub count: usize,
}

impl SubsetSpec {
    pub fn location_ids(&self) -> std::ops::Range<usize> {
        self.locations[0]..self.locations[1]
    }

    fn pairs(&self) -> BTreeSet<(usize, usize)> {
        self.location_ids().flat_map(|l| self.years.iter().map(move |&y| (l, y))).collect()
    }
}

/// Partition of (location, target period) pairs into train / val / test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub subsets: Vec<SubsetSpec>,
}

impl SplitSpec {
    /// 200 train / 20 val / 40 ood-t / 10 ood-s / 10 ood-st cubes over 60 locations and 6 years.
    pub fn desk() -> Self {
        let s = |tag, locations, years: &[usize], count| SubsetSpec { tag, locations, years: years.to_vec(), count };
        Self {
            subsets: vec![
                s(Split::Train, [0, 50], &[0, 1, 2], 200),
                s(Split::Val, [0, 50], &[3], 20),
                s(Split::OodT, [0, 50], &[4, 5], 40),
                s(Split::OodS, [50, 60], &[0, 1, 2], 10),
                s(Split::OodSt, [50, 60], &[4, 5], 10),
            ],
        }
    }

    pub fn get(&self, tag: Split) -> Option<&SubsetSpec> {
        self.subsets.iter().find(|s| s.tag == tag)
    }

    /// Target windows never cross a year boundary, so two subsets can only
    /// share a (location, target period) if they share a (location, year).
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.subsets.iter().enumerate() {
            ensure!(a.locations[0] < a.locations[1], "subset {}: empty location range", a.tag);
            ensure!(!a.years.is_empty(), "subset {}: no years", a.tag);
            for b in &self.subsets[i + 1..] {
                ensure!(a.tag != b.tag, "subset {} listed twice", a.tag);
                let shared: Vec<_> = a.pairs().intersection(&b.pairs()).copied().collect();
                ensure!(
                    shared.is_empty(),
                    "subsets {} and {} are not disjoint: they share (location, year) {:?}",
                    a.tag,
                    b.tag,
                    shared[0]
                );
            }
        }
        let locs = |s: &SubsetSpec| s.location_ids().collect::<BTreeSet<_>>();
        let years = |s: &SubsetSpec| s.years.iter().copied().collect::<BTreeSet<_>>();
        if let Some(train) = self.get(Split::Train) {
            for (tag, same_locs, same_years) in
                [(Split::OodT, true, false), (Split::OodS, false, true), (Split::OodSt, false, false)]
            {
                let Some(test) = self.get(tag) else { continue };
                let share_l = !locs(train).is_disjoint(&locs(test));
                let share_y = !years(train).is_disjoint(&years(test));
                ensure!(
                    share_l == same_locs && share_y == same_years,
                    "subset {tag} must {} locations and {} years with train",
                    if same_locs { "share" } else { "not share" },
                    if same_years { "share" } else { "not share" }
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_split_is_valid() {
        SplitSpec::desk().validate().unwrap();
    }

    #[test]
    fn overlapping_subsets_rejected() {
        let mut spec = SplitSpec::desk();
        spec.subsets[1].years = vec![2, 3];
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("not disjoint"), "{err}");
    }

    #[test]
    fn ood_semantics_checked() {
        let mut spec = SplitSpec::desk();
        spec.subsets[3].locations = [40, 60];
        spec.subsets[3].years = vec![3];
        spec.subsets.remove(1);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tags_roundtrip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }
}
