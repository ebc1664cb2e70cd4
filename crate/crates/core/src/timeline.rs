use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrameGeometry;

/// Ordered, non-overlapping `[start, end)` regions in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    regions: Vec<(f64, f64)>,
}

impl Timeline {
    pub fn empty() -> Self {
        Timeline::default()
    }

    /// Sorts and merges overlapping or touching regions.
    pub fn new(mut regions: Vec<(f64, f64)>) -> Result<Self> {
        for &(s, e) in &regions {
            if !(s.is_finite() && e.is_finite()) || e <= s {
                return Err(Error::Validation(format!("invalid region [{s}, {e})")));
            }
        }
        regions.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(regions.len());
        for (s, e) in regions {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        Ok(Timeline { regions: out })
    }

    pub fn regions(&self) -> &[(f64, f64)] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.regions.iter().map(|(s, e)| e - s).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        let i = self.regions.partition_point(|&(s, _)| s <= t);
        i > 0 && t < self.regions[i - 1].1
    }

    /// Restriction to `[start, end)`.
    pub fn clip(&self, start: f64, end: f64) -> Timeline {
        let regions = self
            .regions
            .iter()
            .filter_map(|&(s, e)| {
                let (s, e) = (s.max(start), e.min(end));
                (e > s).then_some((s, e))
            })
            .collect();
        Timeline { regions }
    }

    /// Speech duration inside `[start, end)`.
    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        self.clip(start, end).duration()
    }

    /// Whether every region lies inside `[0, duration]`.
    pub fn within(&self, duration: f64) -> bool {
        self.regions.first().is_none_or(|r| r.0 >= 0.0)
            && self.regions.last().is_none_or(|r| r.1 <= duration)
    }

    /// Frame labels for a chunk starting at `offset` seconds: frame `t` is
    /// speech iff its center lies inside a region.
    pub fn frame_labels(&self, geometry: &FrameGeometry, offset: f64) -> Vec<u8> {
        (0..geometry.frames)
            .map(|t| self.contains(offset + geometry.center(t)) as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn merges_overlaps_and_touching() {
        let t = Timeline::new(vec![(2.0, 4.0), (1.0, 3.0), (4.0, 5.0), (7.0, 8.0)]).unwrap();
        assert_eq!(t.regions(), &[(1.0, 5.0), (7.0, 8.0)]);
        assert_eq!(t.duration(), 5.0);
        assert!(Timeline::new(vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn membership_is_half_open() {
        let t = Timeline::new(vec![(1.0, 2.0)]).unwrap();
        assert!(!t.contains(0.999));
        assert!(t.contains(1.0));
        assert!(t.contains(1.5));
        assert!(!t.contains(2.0));
    }

    #[test]
    fn straddling_chunk_switches_at_first_center_inside() {
        let g = FrameGeometry {
            frame_period: 0.1,
            origin: 0.05,
            frames: 20,
        };
        let t = Timeline::new(vec![(1.0, 10.0)]).unwrap();
        let y = t.frame_labels(&g, 0.0);
        assert_eq!(&y[..10], &[0; 10]);
        assert_eq!(&y[10..], &[1; 10]);
    }

    proptest! {
        #[test]
        fn normalization_invariants(raw in prop::collection::vec((0.0f64..100.0, 0.01f64..10.0), 0..30)) {
            let t = Timeline::new(raw.iter().map(|&(s, d)| (s, s + d)).collect()).unwrap();
            for w in t.regions().windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
            for &(s, e) in t.regions() {
                prop_assert!(e > s);
            }
            for &(s, d) in &raw {
                prop_assert!(t.contains(s + d / 2.0));
            }
        }
    }
}
