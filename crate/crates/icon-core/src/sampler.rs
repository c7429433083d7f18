//! Key selection on the token grid: farthest point sampling specialized to
//! 2D grids, plus uniform random sampling as the ablation baseline.

use crate::error::{Error, Result};
use crate::maskgrid::TokenMask;
use crate::numerics::Rng;

/// 1-based grid coordinate (row k, column l).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridIndex {
    pub k: usize,
    pub l: usize,
}

impl GridIndex {
    pub fn new(k: usize, l: usize) -> Self {
        GridIndex { k, l }
    }

    /// Row-major flat offset into a `grid_h x grid_w` token grid.
    pub fn flat(&self, grid_w: usize) -> usize {
        (self.k - 1) * grid_w + (self.l - 1)
    }
}

/// Grid distance used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Manhattan,
    Euclidean,
}

impl Metric {
    /// Squared-comparable distance: Manhattan returns |dk| + |dl|, Euclidean
    /// the squared distance (monotone in the true distance, so argmax and
    /// ties are unchanged while arithmetic stays integral).
    fn dist(&self, a: GridIndex, b: GridIndex) -> u64 {
        let dk = a.k.abs_diff(b.k) as u64;
        let dl = a.l.abs_diff(b.l) as u64;
        match self {
            Metric::Manhattan => dk + dl,
            Metric::Euclidean => dk * dk + dl * dl,
        }
    }
}

/// An ordered selection of token positions from one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub indices: Vec<GridIndex>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn region_cells(mask: &TokenMask) -> Vec<GridIndex> {
    let mut cells = Vec::new();
    for k in 0..mask.grid_h {
        for l in 0..mask.grid_w {
            if mask.get(k, l) == 1 {
                cells.push(GridIndex::new(k + 1, l + 1));
            }
        }
    }
    cells
}

fn check_budget(available: usize, requested: usize) -> Result<()> {
    if available == 0 {
        return Err(Error::EmptyRegion);
    }
    if requested > available {
        return Err(Error::RegionExhausted {
            requested,
            available,
        });
    }
    Ok(())
}

/// Farthest point sampling over the cells where `mask == 1`, starting from a
/// uniformly random region cell.
///
/// Each round updates the running distance map against the most recent
/// selection only, then picks the region cell with the largest distance;
/// ties resolve to the first cell in row-major order.
pub fn fps2d(mask: &TokenMask, n: usize, rng: &mut Rng) -> Result<SampleSet> {
    let cells = region_cells(mask);
    check_budget(cells.len(), n)?;
    let start = cells[rng.next_below(cells.len() as u64) as usize];
    fps2d_from(mask, n, start)
}

/// Farthest point sampling with a fixed start cell (the deterministic core
/// of [`fps2d`], also used directly by equivalence tests).
pub fn fps2d_from(mask: &TokenMask, n: usize, start: GridIndex) -> Result<SampleSet> {
    let cells = region_cells(mask);
    check_budget(cells.len(), n)?;
    if start.k == 0
        || start.l == 0
        || start.k > mask.grid_h
        || start.l > mask.grid_w
        || mask.get(start.k - 1, start.l - 1) == 0
    {
        return Err(Error::StartOutsideRegion {
            row: start.k,
            col: start.l,
        });
    }
    let metric = Metric::default();
    let mut selected = Vec::with_capacity(n);
    selected.push(start);
    // Distance map over region cells only; the "infinity" initialization is
    // realized by folding the first update in directly. Selected cells carry
    // distance 0 and can never win the argmax again because every remaining
    // cell is at distance >= 1 from all selections.
    let mut dist: Vec<u64> = cells.iter().map(|&c| metric.dist(c, start)).collect();
    while selected.len() < n {
        let mut best = 0usize;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        let pick = cells[best];
        selected.push(pick);
        for (i, &c) in cells.iter().enumerate() {
            dist[i] = dist[i].min(metric.dist(c, pick));
        }
    }
    Ok(SampleSet { indices: selected })
}

/// Reference implementation: recomputes every cell's distance to the whole
/// selected set from scratch each round. Slower but obviously correct; the
/// incremental version must match it exactly.
pub fn fps_oracle(mask: &TokenMask, n: usize, start: GridIndex) -> Result<SampleSet> {
    let cells = region_cells(mask);
    check_budget(cells.len(), n)?;
    if !cells.contains(&start) {
        return Err(Error::StartOutsideRegion {
            row: start.k,
            col: start.l,
        });
    }
    let metric = Metric::default();
    let mut selected = vec![start];
    while selected.len() < n {
        let mut best: Option<(usize, u64)> = None;
        for (i, &c) in cells.iter().enumerate() {
            if selected.contains(&c) {
                continue;
            }
            let d = selected.iter().map(|&s| metric.dist(c, s)).min().unwrap();
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((i, d)),
            }
        }
        let (i, _) = best.expect("budget check guarantees a free cell");
        selected.push(cells[i]);
    }
    Ok(SampleSet { indices: selected })
}

/// Uniform sampling without replacement from the region (ablation baseline).
pub fn random_sample(mask: &TokenMask, n: usize, rng: &mut Rng) -> Result<SampleSet> {
    let cells = region_cells(mask);
    check_budget(cells.len(), n)?;
    Ok(SampleSet {
        indices: rng.partial_shuffle(&cells, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn full_mask(h: usize, w: usize) -> TokenMask {
        TokenMask::new(h, w, vec![1; h * w]).unwrap()
    }

    #[test]
    fn line_grid_picks_endpoints_then_middle() {
        let mask = full_mask(1, 5);
        let got = fps2d_from(&mask, 3, GridIndex::new(1, 1)).unwrap();
        assert_eq!(
            got.indices,
            vec![
                GridIndex::new(1, 1),
                GridIndex::new(1, 5),
                GridIndex::new(1, 3)
            ]
        );
    }

    #[test]
    fn square_grid_second_pick_is_opposite_corner() {
        let mask = full_mask(4, 4);
        let got = fps2d_from(&mask, 2, GridIndex::new(1, 1)).unwrap();
        assert_eq!(got.indices[1], GridIndex::new(4, 4));
    }

    #[test]
    fn tie_break_is_row_major_first() {
        // From the center of a 3x3 grid all four corners tie at distance 2
        // along with edge midpoints; row-major order reaches (1, 1) first.
        let mask = full_mask(3, 3);
        let got = fps2d_from(&mask, 2, GridIndex::new(2, 2)).unwrap();
        assert_eq!(got.indices[1], GridIndex::new(1, 1));
    }

    #[test]
    fn incremental_matches_oracle_on_all_3x3_masks() {
        for bits in 0u32..512 {
            let data: Vec<u8> = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
            let mask = match TokenMask::new(3, 3, data) {
                Ok(m) => m,
                Err(_) => unreachable!(),
            };
            let cells = super::region_cells(&mask);
            if cells.is_empty() {
                continue;
            }
            for n in 1..=cells.len() {
                for &start in &cells {
                    let fast = fps2d_from(&mask, n, start).unwrap();
                    let slow = fps_oracle(&mask, n, start).unwrap();
                    assert_eq!(
                        fast.indices, slow.indices,
                        "mask bits {bits:09b}, n {n}, start {start:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn incremental_matches_oracle_on_random_8x8_masks() {
        let mut rng = seeded_rng(99);
        let mut cases = 0;
        while cases < 300 {
            let data: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
            let mask = TokenMask::new(8, 8, data).unwrap();
            let cells = super::region_cells(&mask);
            if cells.is_empty() {
                continue;
            }
            let n = 1 + rng.next_below(cells.len() as u64) as usize;
            let start = cells[rng.next_below(cells.len() as u64) as usize];
            let fast = fps2d_from(&mask, n, start).unwrap();
            let slow = fps_oracle(&mask, n, start).unwrap();
            assert_eq!(fast.indices, slow.indices);
            cases += 1;
        }
    }

    #[test]
    fn selections_are_unique_and_inside_region() {
        let mut rng = seeded_rng(7);
        let data: Vec<u8> = (0..36).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mask = TokenMask::new(6, 6, data).unwrap();
        let avail = mask.count_agent();
        if avail == 0 {
            return;
        }
        let got = fps2d(&mask, avail, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for idx in &got.indices {
            assert!(seen.insert(*idx), "duplicate selection {idx:?}");
            assert_eq!(mask.get(idx.k - 1, idx.l - 1), 1);
        }
    }

    #[test]
    fn exhausting_region_selects_everything() {
        let mask = full_mask(2, 3);
        let got = fps2d_from(&mask, 6, GridIndex::new(1, 1)).unwrap();
        assert_eq!(got.len(), 6);
        let mut sorted = got.indices.clone();
        sorted.sort();
        assert_eq!(sorted, super::region_cells(&mask));
    }

    #[test]
    fn budget_and_region_errors() {
        let empty = TokenMask::new(2, 2, vec![0; 4]).unwrap();
        assert!(matches!(
            fps2d(&empty, 1, &mut seeded_rng(0)),
            Err(Error::EmptyRegion)
        ));
        let mask = full_mask(2, 2);
        assert!(matches!(
            fps2d(&mask, 5, &mut seeded_rng(0)),
            Err(Error::RegionExhausted {
                requested: 5,
                available: 4
            })
        ));
        assert!(matches!(
            fps2d_from(&mask, 1, GridIndex::new(3, 1)),
            Err(Error::StartOutsideRegion { .. })
        ));
    }

    #[test]
    fn random_start_lands_in_region_and_is_deterministic() {
        let mut data = vec![0u8; 16];
        data[5] = 1;
        data[9] = 1;
        data[10] = 1;
        let mask = TokenMask::new(4, 4, data).unwrap();
        let a = fps2d(&mask, 2, &mut seeded_rng(31)).unwrap();
        let b = fps2d(&mask, 2, &mut seeded_rng(31)).unwrap();
        assert_eq!(a, b);
        for idx in &a.indices {
            assert_eq!(mask.get(idx.k - 1, idx.l - 1), 1);
        }
    }

    #[test]
    fn random_sample_is_uniform_without_replacement() {
        let mask = full_mask(3, 3);
        let mut rng = seeded_rng(11);
        let got = random_sample(&mask, 9, &mut rng).unwrap();
        let mut sorted = got.indices.clone();
        sorted.sort();
        assert_eq!(sorted, super::region_cells(&mask));

        // Frequency sanity: each cell should be picked roughly equally often
        // when drawing 3 of 9 cells many times.
        let mut counts = [0usize; 9];
        let mut rng = seeded_rng(12);
        let reps = 9000;
        for _ in 0..reps {
            let s = random_sample(&mask, 3, &mut rng).unwrap();
            for idx in &s.indices {
                counts[(idx.k - 1) * 3 + (idx.l - 1)] += 1;
            }
        }
        let expect = reps as f64 / 3.0;
        for &c in &counts {
            assert!(
                (c as f64 - expect).abs() < expect * 0.1,
                "cell count {c} far from expected {expect}"
            );
        }
    }

    #[test]
    fn fps_spreads_wider_than_random_on_average() {
        // Expected minimum pairwise Manhattan distance of 4 picks on a full
        // grid: farthest-point picks must dominate uniform picks.
        fn min_pairwise(set: &SampleSet) -> u64 {
            let mut best = u64::MAX;
            for i in 0..set.indices.len() {
                for j in (i + 1)..set.indices.len() {
                    best = best.min(Metric::Manhattan.dist(set.indices[i], set.indices[j]));
                }
            }
            best
        }
        let mask = full_mask(7, 7);
        let mut fps_total = 0u64;
        let mut rand_total = 0u64;
        for seed in 0..150u64 {
            let mut rng = seeded_rng(seed);
            fps_total += min_pairwise(&fps2d(&mask, 4, &mut rng).unwrap());
            let mut rng = seeded_rng(seed + 10_000);
            rand_total += min_pairwise(&random_sample(&mask, 4, &mut rng).unwrap());
        }
        assert!(
            fps_total >= rand_total,
            "fps min-distance sum {fps_total} < random {rand_total}"
        );
    }

    #[test]
    fn euclidean_metric_differs_where_expected() {
        // Manhattan distance from (1,1): (3,3) is 4, (1,4) is 3 -> picks (3,3).
        // Euclidean squared: (3,3) is 8, (1,4) is 9 -> prefers (1,4).
        assert_eq!(
            Metric::Manhattan.dist(GridIndex::new(1, 1), GridIndex::new(3, 3)),
            4
        );
        assert_eq!(
            Metric::Euclidean.dist(GridIndex::new(1, 1), GridIndex::new(3, 3)),
            8
        );
        assert_eq!(
            Metric::Euclidean.dist(GridIndex::new(1, 1), GridIndex::new(1, 4)),
            9
        );
    }
}
