//! Boxes, overlap measures, and patch-grid coverage.
//!
//! Boxes are axis-aligned rectangles in normalized center-size form
//! (`cx, cy, w, h`, all relative to the image extent, y pointing down).
//! Overlap measures clip the derived corners to the image before
//! integrating, so out-of-frame area never contributes.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Normalized center-size rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::Validation(format!("box center ({cx}, {cy}) outside [0,1]")));
        }
        if w <= 0.0 || h <= 0.0 || w > 1.0 || h > 1.0 {
            return Err(Error::Validation(format!("box extent ({w}, {h}) outside (0,1]")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Corner form without clipping; exact inverse of [`BBox::from_xyxy`].
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Corner form clipped to the image square.
    pub fn clipped_corners(&self) -> (f64, f64, f64, f64) {
        let (x1, y1, x2, y2) = self.corners();
        (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Validation(format!(
                "degenerate corner box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Unclipped corners in pixel units.
    pub fn to_pixel_xyxy(&self, width_px: usize, height_px: usize) -> [f64; 4] {
        let (x1, y1, x2, y2) = self.corners();
        [x1 * width_px as f64, y1 * height_px as f64, x2 * width_px as f64, y2 * height_px as f64]
    }

    pub fn from_pixel_xyxy(xyxy: [f64; 4], width_px: usize, height_px: usize) -> Result<Self> {
        let wf = width_px as f64;
        let hf = height_px as f64;
        Self::from_xyxy(xyxy[0] / wf, xyxy[1] / hf, xyxy[2] / wf, xyxy[3] / hf)
    }

    pub fn area_clipped(&self) -> f64 {
        let (x1, y1, x2, y2) = self.clipped_corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.clipped_corners();
    let (bx1, by1, bx2, by2) = b.clipped_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union on clipped boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area_clipped() + b.area_clipped() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the empty fraction of the smallest enclosing
/// box. Two boxes whose union has zero area after clipping give 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area_clipped() + b.area_clipped() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.clipped_corners();
    let (bx1, by1, bx2, by2) = b.clipped_corners();
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

/// Rule for assigning image patches to a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoverageRule {
    /// A patch belongs to the box when the box covers at least half of the
    /// patch cell. This matches assignments where boxes span many patches.
    #[default]
    OverlapRatio,
    /// Literal IoU(cell, box) >= 0.5; empty for boxes much larger than one
    /// cell, kept selectable for comparison.
    PatchIou,
}

/// Regular grid of square patch cells tiling an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    height_px: usize,
    width_px: usize,
    patch_px: usize,
}

impl PatchGrid {
    pub fn new(height_px: usize, width_px: usize, patch_px: usize) -> Result<Self> {
        if patch_px == 0 || height_px % patch_px != 0 || width_px % patch_px != 0 {
            return Err(Error::Validation(format!(
                "patch side {patch_px} does not tile {width_px}x{height_px}"
            )));
        }
        Ok(Self { height_px, width_px, patch_px })
    }

    pub fn rows(&self) -> usize {
        self.height_px / self.patch_px
    }

    pub fn cols(&self) -> usize {
        self.width_px / self.patch_px
    }

    /// Number of cells, row-major.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized corner rectangle of cell `index`.
    pub fn cell_corners(&self, index: usize) -> (f64, f64, f64, f64) {
        debug_assert!(index < self.len());
        let row = index / self.cols();
        let col = index % self.cols();
        let sx = self.patch_px as f64 / self.width_px as f64;
        let sy = self.patch_px as f64 / self.height_px as f64;
        (col as f64 * sx, row as f64 * sy, (col + 1) as f64 * sx, (row + 1) as f64 * sy)
    }
}

/// Indices of the grid cells assigned to `b` under `rule` (sorted,
/// boundary inclusive).
pub fn patch_coverage_with_rule(grid: &PatchGrid, b: &BBox, rule: CoverageRule) -> Vec<usize> {
    let (bx1, by1, bx2, by2) = b.clipped_corners();
    let box_area = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let mut out = Vec::new();
    for j in 0..grid.len() {
        let (cx1, cy1, cx2, cy2) = grid.cell_corners(j);
        let iw = (cx2.min(bx2) - cx1.max(bx1)).max(0.0);
        let ih = (cy2.min(by2) - cy1.max(by1)).max(0.0);
        let inter = iw * ih;
        let cell_area = (cx2 - cx1) * (cy2 - cy1);
        let keep = match rule {
            CoverageRule::OverlapRatio => inter / cell_area >= 0.5,
            CoverageRule::PatchIou => {
                let union = cell_area + box_area - inter;
                union > 0.0 && inter / union >= 0.5
            }
        };
        if keep {
            out.push(j);
        }
    }
    out
}

/// [`patch_coverage_with_rule`] under the default rule.
pub fn patch_coverage(grid: &PatchGrid, b: &BBox) -> Vec<usize> {
    patch_coverage_with_rule(grid, b, CoverageRule::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        // Corners stay inside the image so clipping is the identity.
        let w = rng.random_range(0.05..0.9);
        let h = rng.random_range(0.05..0.9);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Area-overlap oracle on an n x n raster of cell centers.
    fn rasterized_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let inside = |bx: &BBox, x: f64, y: f64| {
            let (x1, y1, x2, y2) = bx.clipped_corners();
            x >= x1 && x < x2 && y >= y1 && y < y2
        };
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..n {
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                let y = (i as f64 + 0.5) / n as f64;
                let ia = inside(a, x, y);
                let ib = inside(b, x, y);
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
        let left = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let right = BBox::new(0.75, 0.25, 0.5, 0.5).unwrap();
        assert_eq!(iou(&left, &right), 0.0);
    }

    #[test]
    fn iou_matches_rasterization_oracle() {
        let a = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        // Analytic: inter 0.25x0.25, union 0.5 - 0.0625.
        let expected = 0.0625 / 0.4375;
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
        assert!((rasterized_iou(&a, &b, 1000) - iou(&a, &b)).abs() < 1e-3);
    }

    #[test]
    fn giou_identity_and_hull_free_case() {
        let b = BBox::new(0.4, 0.6, 0.3, 0.2).unwrap();
        assert_eq!(giou(&b, &b), 1.0);
        // Two halves: union fills the enclosing box, so the hull penalty
        // vanishes and giou == iou.
        let top = BBox::new(0.5, 0.25, 1.0, 0.5).unwrap();
        let bottom = BBox::new(0.5, 0.75, 1.0, 0.5).unwrap();
        assert_eq!(giou(&top, &bottom), iou(&top, &bottom));
    }

    #[test]
    fn giou_property_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10_000 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let g = giou(&a, &b);
            assert!((-1.0..=1.0).contains(&g), "giou {g} out of range");
            assert!(g <= iou(&a, &b) + 1e-12, "giou exceeds iou");
            assert!((g - giou(&b, &a)).abs() < 1e-12, "giou asymmetric");
            assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12, "iou asymmetric");
            if a != b {
                assert!(g < 1.0);
            }
        }
    }

    #[test]
    fn patch_coverage_full_and_single_cell() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        let whole = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(patch_coverage(&grid, &whole), (0..64).collect::<Vec<_>>());

        // Cell 9 is row 1, col 1: pixels [8,16) x [8,16).
        let cell = BBox::from_xyxy(8.0 / 64.0, 8.0 / 64.0, 16.0 / 64.0, 16.0 / 64.0).unwrap();
        assert_eq!(patch_coverage(&grid, &cell), vec![9]);
    }

    #[test]
    fn patch_coverage_matches_per_cell_rasterization() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        let b = BBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let got = patch_coverage(&grid, &b);

        // Oracle: sample each cell on a 100x100 subgrid and keep cells with
        // at least half their samples inside the box.
        let (bx1, by1, bx2, by2) = b.clipped_corners();
        let mut expected = Vec::new();
        for j in 0..grid.len() {
            let (cx1, cy1, cx2, cy2) = grid.cell_corners(j);
            let mut hits = 0usize;
            for yi in 0..100 {
                for xi in 0..100 {
                    let x = cx1 + (xi as f64 + 0.5) / 100.0 * (cx2 - cx1);
                    let y = cy1 + (yi as f64 + 0.5) / 100.0 * (cy2 - cy1);
                    if x >= bx1 && x < bx2 && y >= by1 && y < by2 {
                        hits += 1;
                    }
                }
            }
            if hits * 2 >= 100 * 100 {
                expected.push(j);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn patch_coverage_monotone_under_box_growth() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let b = random_box(&mut rng);
            let grow = 1.0 + rng.random_range(0.01..0.5);
            let big = BBox::new(b.cx, b.cy, (b.w * grow).min(1.0), (b.h * grow).min(1.0)).unwrap();
            let small_set = patch_coverage(&grid, &b);
            let big_set = patch_coverage(&grid, &big);
            for idx in &small_set {
                assert!(big_set.contains(idx), "growth removed patch {idx}");
            }
        }
    }

    #[test]
    fn patch_coverage_boundary_half_is_included() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        // Covers exactly the left half of cell 0 (pixels [0,4) x [0,8)).
        let half = BBox::from_xyxy(0.0, 0.0, 4.0 / 64.0, 8.0 / 64.0).unwrap();
        assert_eq!(patch_coverage(&grid, &half), vec![0]);
        // Slightly less than half is excluded.
        let less = BBox::from_xyxy(0.0, 0.0, 3.99 / 64.0, 8.0 / 64.0).unwrap();
        assert!(patch_coverage(&grid, &less).is_empty());
    }

    #[test]
    fn patch_iou_rule_differs_for_large_boxes() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        let whole = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        // A 64-cell grid box has IoU 1/64 with each cell: literal IoU
        // assigns nothing, the coverage rule assigns everything.
        assert!(patch_coverage_with_rule(&grid, &whole, CoverageRule::PatchIou).is_empty());
        assert_eq!(patch_coverage_with_rule(&grid, &whole, CoverageRule::OverlapRatio).len(), 64);
        // For a box equal to a single cell the rules agree.
        let cell = BBox::from_xyxy(0.0, 0.0, 8.0 / 64.0, 8.0 / 64.0).unwrap();
        assert_eq!(patch_coverage_with_rule(&grid, &cell, CoverageRule::PatchIou), vec![0]);
    }

    #[test]
    fn box_conversions() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(b.corners(), (0.0, 0.0, 1.0, 1.0));
        let back = BBox::from_xyxy(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(back, b);

        let px = BBox::from_pixel_xyxy([16.0, 16.0, 48.0, 48.0], 64, 64).unwrap();
        assert_eq!(px, BBox::new(0.5, 0.5, 0.5, 0.5).unwrap());

        assert!(matches!(BBox::from_xyxy(0.3, 0.3, 0.3, 0.5), Err(Error::Validation(_))));
        assert!(matches!(BBox::new(0.5, 0.5, 0.0, 0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn grid_requires_exact_tiling() {
        assert!(PatchGrid::new(64, 64, 8).is_ok());
        assert!(matches!(PatchGrid::new(60, 64, 8), Err(Error::Validation(_))));
    }
}
