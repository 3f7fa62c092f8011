//! Gini split search for numeric thresholds and categorical level partitions.

use crate::dataset::MAX_CATEGORICAL_LEVELS;
use crate::error::{Result, RfxError};

/// Gains at or below this are treated as no improvement.
pub(crate) const MIN_GAIN: f64 = 1e-12;

/// Node sizes below this use insertion sort during the split scan.
const INSERTION_SORT_CUTOFF: usize = 64;

/// Gini impurity `1 - Σ (c_k / total)^2`.
pub fn gini(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(RfxError::EmptyNode);
    }
    Ok(gini_unchecked(counts, total))
}

#[inline]
pub(crate) fn gini_unchecked(counts: &[f64], total: f64) -> f64 {
    let sq: f64 = counts.iter().map(|c| c * c).sum();
    1.0 - sq / (total * total)
}

/// `I(parent) - (n_L/n) I(left) - (n_R/n) I(right)` from class counts.
pub(crate) fn impurity_decrease(parent: &[f64], left: &[f64]) -> f64 {
    let total: f64 = parent.iter().sum();
    let wl: f64 = left.iter().sum();
    let wr = total - wl;
    if wl <= 0.0 || wr <= 0.0 {
        return 0.0;
    }
    let mut sq_l = 0.0;
    let mut sq_r = 0.0;
    let mut sq_p = 0.0;
    for (p, l) in parent.iter().zip(left) {
        let r = p - l;
        sq_l += l * l;
        sq_r += r * r;
        sq_p += p * p;
    }
    // Expanded form of the weighted child impurities.
    let parent_gini = 1.0 - sq_p / (total * total);
    let children = (wl - sq_l / wl + wr - sq_r / wr) / total;
    parent_gini - children
}

/// One sample as seen by the split scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPoint {
    pub value: f64,
    pub class: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSplit {
    pub threshold: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSplit {
    /// Bit `k` set means level `k` goes left. Bit 0 is always set.
    pub mask: u32,
    pub gain: f64,
    /// Number of partitions evaluated.
    pub examined: usize,
}

fn sort_points(points: &mut [SplitPoint]) {
    if points.len() < INSERTION_SORT_CUTOFF {
        for i in 1..points.len() {
            let mut k = i;
            while k > 0 && points[k - 1].value > points[k].value {
                points.swap(k - 1, k);
                k -= 1;
            }
        }
    } else {
        points.sort_by(|a, b| a.value.total_cmp(&b.value));
    }
}

/// Best `x <= τ` split with τ drawn from the node's unique values.
///
/// Sorts `points` by value. Among equal gains the smallest τ wins. Returns
/// `None` when the feature is constant or no threshold reduces impurity.
pub fn best_threshold_split(points: &mut [SplitPoint], n_classes: usize) -> Option<ThresholdSplit> {
    if points.len() < 2 {
        return None;
    }
    sort_points(points);
    let mut parent = vec![0.0; n_classes];
    for p in points.iter() {
        parent[p.class as usize] += p.weight;
    }
    let mut left = vec![0.0; n_classes];
    let mut best: Option<ThresholdSplit> = None;
    for k in 0..points.len() - 1 {
        let p = points[k];
        left[p.class as usize] += p.weight;
        if points[k + 1].value <= p.value {
            continue;
        }
        let gain = impurity_decrease(&parent, &left);
        if gain > MIN_GAIN && best.is_none_or(|b| gain > b.gain) {
            best = Some(ThresholdSplit {
                threshold: p.value,
                gain,
            });
        }
    }
    best
}

/// Exhaustive search over binary partitions of the categorical levels present
/// in the node.
///
/// With `L` levels present, exactly `2^(L-1) - 1` partitions are examined: the
/// lowest present level is pinned to the left side, and levels absent from
/// the node are routed right (except level 0, which is always placed left so
/// masks are canonical). Among equal gains the numerically smallest mask wins.
pub fn best_garside_split(
    points: &[SplitPoint],
    n_levels: usize,
    n_classes: usize,
    feature: usize,
) -> Result<Option<SubsetSplit>> {
    if n_levels > MAX_CATEGORICAL_LEVELS {
        return Err(RfxError::TooManyLevels {
            feature,
            levels: n_levels,
        });
    }
    let mut table = vec![0.0; n_levels * n_classes];
    for p in points {
        table[p.value as usize * n_classes + p.class as usize] += p.weight;
    }
    let present: Vec<usize> = (0..n_levels)
        .filter(|&k| {
            table[k * n_classes..(k + 1) * n_classes]
                .iter()
                .any(|&w| w > 0.0)
        })
        .collect();
    if present.len() < 2 {
        return Ok(None);
    }
    let mut parent = vec![0.0; n_classes];
    for k in &present {
        for c in 0..n_classes {
            parent[c] += table[k * n_classes + c];
        }
    }

    let anchor = present[0];
    let free = &present[1..];
    let combos: u64 = 1u64 << free.len();
    let mut left: Vec<f64> = table[anchor * n_classes..(anchor + 1) * n_classes].to_vec();
    let mut mask: u32 = (1u32 << anchor) | 1;
    let mut best: Option<(u32, f64)> = None;
    let mut examined = 0usize;
    let mut prev_gray = 0u64;
    // Walk subsets of the free levels in Gray-code order so each step moves one
    // level across. The all-left subset is skipped.
    for s in 0..combos {
        let gray = s ^ (s >> 1);
        if s > 0 {
            let flipped = (gray ^ prev_gray).trailing_zeros() as usize;
            let level = free[flipped];
            let row = &table[level * n_classes..(level + 1) * n_classes];
            if gray & (1 << flipped) != 0 {
                left.iter_mut().zip(row).for_each(|(l, r)| *l += r);
                mask |= 1 << level;
            } else {
                left.iter_mut().zip(row).for_each(|(l, r)| *l -= r);
                mask &= !(1 << level);
            }
            prev_gray = gray;
        }
        if gray == combos - 1 {
            continue;
        }
        examined += 1;
        let gain = impurity_decrease(&parent, &left);
        if gain > MIN_GAIN {
            let better = match best {
                None => true,
                Some((m, g)) => gain > g || (gain == g && mask < m),
            };
            if better {
                best = Some((mask, gain));
            }
        }
    }
    Ok(best.map(|(mask, gain)| SubsetSplit {
        mask,
        gain,
        examined,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(values: &[f64], classes: &[u32]) -> Vec<SplitPoint> {
        values
            .iter()
            .zip(classes)
            .map(|(&value, &class)| SplitPoint {
                value,
                class,
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[5.0, 5.0]).unwrap(), 0.5);
        assert_eq!(gini(&[10.0, 0.0]).unwrap(), 0.0);
        assert!((gini(&[2.0, 1.0, 1.0]).unwrap() - 0.625).abs() < 1e-15);
        assert!(matches!(gini(&[0.0, 0.0]), Err(RfxError::EmptyNode)));
    }

    #[test]
    fn gini_upper_bound() {
        for c in 2..8 {
            let counts = vec![3.0; c];
            let g = gini(&counts).unwrap();
            assert!((g - (1.0 - 1.0 / c as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_threshold_split() {
        let mut p = pts(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1]);
        let s = best_threshold_split(&mut p, 2).unwrap();
        assert!(s.threshold >= 2.0 && s.threshold < 3.0);
        assert!((s.gain - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_has_no_split() {
        let mut p = pts(&[7.0, 7.0, 7.0], &[0, 1, 0]);
        assert!(best_threshold_split(&mut p, 2).is_none());
    }

    #[test]
    fn three_point_scan_matches_hand_oracle() {
        // Parent gini of [2,1] is 4/9. τ=1: left {0} pure, right {1,0} gini 1/2
        // → 4/9 - 2/3 * 1/2 = 1/9. τ=2: left {0,1} gini 1/2, right {0} pure
        // → same 1/9. Equal gains resolve to the smaller τ.
        let mut p = pts(&[1.0, 2.0, 3.0], &[0, 1, 0]);
        let s = best_threshold_split(&mut p, 2).unwrap();
        assert_eq!(s.threshold, 1.0);
        assert!((s.gain - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn weights_act_as_multiplicity() {
        let mut weighted = vec![
            SplitPoint {
                value: 1.0,
                class: 0,
                weight: 2.0,
            },
            SplitPoint {
                value: 2.0,
                class: 1,
                weight: 1.0,
            },
            SplitPoint {
                value: 3.0,
                class: 1,
                weight: 1.0,
            },
        ];
        let mut expanded = pts(&[1.0, 1.0, 2.0, 3.0], &[0, 0, 1, 1]);
        let a = best_threshold_split(&mut weighted, 2).unwrap();
        let b = best_threshold_split(&mut expanded, 2).unwrap();
        assert_eq!(a.threshold, b.threshold);
        assert!((a.gain - b.gain).abs() < 1e-15);
    }

    #[test]
    fn large_node_uses_general_sort() {
        let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64).collect();
        let classes: Vec<u32> = values.iter().map(|&v| u32::from(v >= 120.0)).collect();
        let mut p = pts(&values, &classes);
        let s = best_threshold_split(&mut p, 2).unwrap();
        assert_eq!(s.threshold, 119.0);
        assert!(p.windows(2).all(|w| w[0].value <= w[1].value));
    }

    #[test]
    fn garside_k3_examines_three_partitions() {
        let p = pts(&[0.0, 1.0, 2.0, 0.0, 1.0, 2.0], &[0, 1, 1, 0, 0, 1]);
        let s = best_garside_split(&p, 3, 2, 0).unwrap().unwrap();
        assert_eq!(s.examined, 3);
        assert!(s.mask & 1 == 1);
    }

    #[test]
    fn garside_single_level_is_none() {
        let p = pts(&[2.0, 2.0, 2.0], &[0, 1, 0]);
        assert!(best_garside_split(&p, 4, 2, 0).unwrap().is_none());
    }

    #[test]
    fn garside_rejects_more_than_32_levels() {
        let p = pts(&[0.0, 1.0], &[0, 1]);
        assert!(matches!(
            best_garside_split(&p, 33, 2, 5),
            Err(RfxError::TooManyLevels {
                feature: 5,
                levels: 33
            })
        ));
    }

    #[test]
    fn garside_enumeration_size_matches_combinatorics() {
        for k in 2..=6usize {
            let values: Vec<f64> = (0..k).map(|l| l as f64).collect();
            // Class pattern chosen so at least one partition improves impurity.
            let classes: Vec<u32> = (0..k).map(|l| (l % 2) as u32).collect();
            let s = best_garside_split(&pts(&values, &classes), k, 2, 0)
                .unwrap()
                .unwrap();
            assert_eq!(s.examined, (1 << (k - 1)) - 1, "K={k}");
        }
    }

    /// Brute force over every canonical mask with bit 0 set.
    fn brute_force_best(points: &[SplitPoint], k: usize, c: usize) -> (u32, f64) {
        let mut parent = vec![0.0; c];
        for p in points {
            parent[p.class as usize] += p.weight;
        }
        let mut best = (0u32, f64::NEG_INFINITY);
        for mask in 1u32..(1u32 << k) - 1 {
            if mask & 1 == 0 {
                continue;
            }
            let mut left = vec![0.0; c];
            for p in points {
                if mask >> (p.value as u32) & 1 == 1 {
                    left[p.class as usize] += p.weight;
                }
            }
            let wl: f64 = left.iter().sum();
            let wr: f64 = parent.iter().sum::<f64>() - wl;
            if wl == 0.0 || wr == 0.0 {
                continue;
            }
            let right: Vec<f64> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
            let n = wl + wr;
            let g = gini(&parent).unwrap()
                - wl / n * gini(&left).unwrap()
                - wr / n * gini(&right).unwrap();
            if g > best.1 + 1e-12 {
                best = (mask, g);
            }
        }
        best
    }

    #[test]
    fn garside_k4_matches_brute_force() {
        // Level class counts (class0, class1, class2):
        // L0 (5,1,0)  L1 (0,4,1)  L2 (4,0,2)  L3 (0,1,5)
        let table = [[5, 1, 0], [0, 4, 1], [4, 0, 2], [0, 1, 5]];
        let mut p = Vec::new();
        for (level, row) in table.iter().enumerate() {
            for (class, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    p.push(SplitPoint {
                        value: level as f64,
                        class: class as u32,
                        weight: 1.0,
                    });
                }
            }
        }
        let s = best_garside_split(&p, 4, 3, 0).unwrap().unwrap();
        let (mask, gain) = brute_force_best(&p, 4, 3);
        assert_eq!(s.examined, 7);
        assert_eq!(s.mask, mask);
        assert!((s.gain - gain).abs() < 1e-12);
    }

    #[test]
    fn impurity_decrease_matches_definition() {
        let parent = [4.0, 3.0, 2.0];
        let left = [3.0, 1.0, 0.0];
        let right = [1.0, 2.0, 2.0];
        let expected = gini(&parent).unwrap()
            - 4.0 / 9.0 * gini(&left).unwrap()
            - 5.0 / 9.0 * gini(&right).unwrap();
        assert!((impurity_decrease(&parent, &left) - expected).abs() < 1e-14);
    }
}
