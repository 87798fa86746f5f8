//! Pixel-space geometry.
//!
//! Boxes use the `(x1, y1, x2, y2)` corner convention with both corners
//! inclusive, so a box `(0, 0, 9, 9)` covers 10 × 10 pixels. Everything is
//! integer; halves are floored.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point ({x}, {y}) lies outside a {width}x{height} frame")]
    OutOfFrame {
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },
    #[error("crop frame at ({x}, {y}) of size {width}x{height} does not fit inside {parent_width}x{parent_height}")]
    FrameOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        parent_width: u32,
        parent_height: u32,
    },
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners are inverted")]
    InvertedBox { x1: u32, y1: u32, x2: u32, y2: u32 },
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDims { width: u32, height: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Axis-aligned box with inclusive corners. Serialized as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self, GeometryError> {
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvertedBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from two arbitrary corners, reordering them as needed.
    pub fn from_corners(a: Point, b: Point) -> Self {
        Self {
            x1: a.x.min(b.x),
            y1: a.y.min(b.y),
            x2: a.x.max(b.x),
            y2: a.y.max(b.y),
        }
    }

    /// Degenerate single-pixel box.
    pub fn at(p: Point) -> Self {
        Self {
            x1: p.x,
            y1: p.y,
            x2: p.x,
            y2: p.y,
        }
    }

    /// Pixel count along x (inclusive).
    pub fn width(&self) -> u32 {
        self.x2 - self.x1 + 1
    }

    /// Pixel count along y (inclusive).
    pub fn height(&self) -> u32 {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(BBox { x1, y1, x2, y2 })
    }

    /// Clip to the pixel grid of `dims`. `None` when nothing remains.
    pub fn clip(&self, dims: ImageDims) -> Option<BBox> {
        self.intersection(&dims.full_box())
    }

    pub fn fits_in(&self, dims: ImageDims) -> bool {
        self.x2 < dims.width && self.y2 < dims.height
    }

    pub fn translate(&self, dx: u32, dy: u32) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;

    fn try_from(raw: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(raw.width, raw.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0,
            y1: 0,
            x2: self.width - 1,
            y2: self.height - 1,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x < self.width && p.y < self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn max_side(&self) -> u32 {
        self.width.max(self.height)
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A crop window expressed in its parent's coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropFrame {
    pub origin: Point,
    pub dims: ImageDims,
}

impl CropFrame {
    /// Frame covering the whole of `dims`.
    pub fn full(dims: ImageDims) -> Self {
        Self {
            origin: Point::new(0, 0),
            dims,
        }
    }

    pub fn fits_in(&self, parent: ImageDims) -> bool {
        self.origin.x as u64 + self.dims.width as u64 <= parent.width as u64
            && self.origin.y as u64 + self.dims.height as u64 <= parent.height as u64
    }

    pub fn check_fits(&self, parent: ImageDims) -> Result<(), GeometryError> {
        if self.fits_in(parent) {
            Ok(())
        } else {
            Err(GeometryError::FrameOutOfBounds {
                x: self.origin.x,
                y: self.origin.y,
                width: self.dims.width,
                height: self.dims.height,
                parent_width: parent.width,
                parent_height: parent.height,
            })
        }
    }

    /// The frame's footprint as a box in parent coordinates.
    pub fn as_box(&self) -> BBox {
        BBox {
            x1: self.origin.x,
            y1: self.origin.y,
            x2: self.origin.x + self.dims.width - 1,
            y2: self.origin.y + self.dims.height - 1,
        }
    }

    /// Express `inner` (given relative to this frame) in this frame's parent.
    pub fn compose(&self, inner: &CropFrame) -> CropFrame {
        CropFrame {
            origin: Point::new(self.origin.x + inner.origin.x, self.origin.y + inner.origin.y),
            dims: inner.dims,
        }
    }
}

/// The chain of crops applied to a base image, outermost first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformStack {
    base: ImageDims,
    frames: Vec<CropFrame>,
}

impl TransformStack {
    pub fn new(base: ImageDims) -> Self {
        Self {
            base,
            frames: Vec::new(),
        }
    }

    pub fn base(&self) -> ImageDims {
        self.base
    }

    pub fn frames(&self) -> &[CropFrame] {
        &self.frames
    }

    /// Number of completed crops.
    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Dimensions of the innermost image.
    pub fn current_dims(&self) -> ImageDims {
        self.frames.last().map_or(self.base, |f| f.dims)
    }

    /// Push a frame expressed in the coordinates of the current innermost image.
    pub fn push(&mut self, frame: CropFrame) -> Result<(), GeometryError> {
        frame.check_fits(self.current_dims())?;
        self.frames.push(frame);
        Ok(())
    }

    /// The innermost frame's footprint in base coordinates.
    pub fn global_frame(&self) -> CropFrame {
        self.frames
            .iter()
            .fold(CropFrame::full(self.base), |acc, f| acc.compose(f))
    }

    fn total_offset(&self) -> (u32, u32) {
        self.frames
            .iter()
            .fold((0, 0), |(x, y), f| (x + f.origin.x, y + f.origin.y))
    }

    /// Map a point in the innermost frame to base coordinates.
    pub fn to_global(&self, p: Point) -> Result<Point, GeometryError> {
        let dims = self.current_dims();
        if !dims.contains(p) {
            return Err(out_of_frame(p.x as i64, p.y as i64, dims));
        }
        let (dx, dy) = self.total_offset();
        Ok(Point::new(p.x + dx, p.y + dy))
    }

    pub fn to_global_box(&self, b: BBox) -> Result<BBox, GeometryError> {
        let a = self.to_global(Point::new(b.x1, b.y1))?;
        let c = self.to_global(Point::new(b.x2, b.y2))?;
        Ok(BBox::from_corners(a, c))
    }

    /// Map a base-coordinate point into the innermost frame.
    pub fn to_local(&self, p: Point) -> Result<Point, GeometryError> {
        let (mut x, mut y) = (p.x as i64, p.y as i64);
        let mut dims = self.base;
        if !dims.contains(p) {
            return Err(out_of_frame(x, y, dims));
        }
        for f in &self.frames {
            x -= f.origin.x as i64;
            y -= f.origin.y as i64;
            dims = f.dims;
            if x < 0 || y < 0 || x >= dims.width as i64 || y >= dims.height as i64 {
                return Err(out_of_frame(x, y, dims));
            }
        }
        Ok(Point::new(x as u32, y as u32))
    }

    /// Map a base-coordinate box into the innermost frame, clipping to it.
    /// `None` if the box lies entirely outside.
    pub fn to_local_box_clipped(&self, b: BBox) -> Option<BBox> {
        let g = self.global_frame();
        let clipped = b.intersection(&g.as_box())?;
        Some(BBox {
            x1: clipped.x1 - g.origin.x,
            y1: clipped.y1 - g.origin.y,
            x2: clipped.x2 - g.origin.x,
            y2: clipped.y2 - g.origin.y,
        })
    }
}

fn out_of_frame(x: i64, y: i64, dims: ImageDims) -> GeometryError {
    GeometryError::OutOfFrame {
        x,
        y,
        width: dims.width,
        height: dims.height,
    }
}

/// Midpoint of a box, floored.
pub fn center(b: BBox) -> Point {
    Point::new(
        ((b.x1 as u64 + b.x2 as u64) / 2) as u32,
        ((b.y1 as u64 + b.y2 as u64) / 2) as u32,
    )
}

/// Boundary-inclusive containment.
pub fn contains(b: BBox, p: Point) -> bool {
    b.x1 <= p.x && p.x <= b.x2 && b.y1 <= p.y && p.y <= b.y2
}

/// Window of `lambda` times the parent's size, centred on the focus box and
/// shifted (never shrunk) to stay inside the parent.
pub fn crop_window(parent: ImageDims, focus: BBox, lambda: f64) -> CropFrame {
    let side = |full: u32| -> u32 { ((lambda * full as f64).round() as u32).clamp(1, full) };
    let width = side(parent.width);
    let height = side(parent.height);
    let c = center(focus);
    let place = |c: u32, size: u32, full: u32| -> u32 {
        let start = c.saturating_sub(size / 2);
        start.min(full - size)
    };
    CropFrame {
        origin: Point::new(
            place(c.x, width, parent.width),
            place(c.y, height, parent.height),
        ),
        dims: ImageDims { width, height },
    }
}

pub fn to_global(stack: &TransformStack, p: Point) -> Result<Point, GeometryError> {
    stack.to_global(p)
}

pub fn to_global_box(stack: &TransformStack, b: BBox) -> Result<BBox, GeometryError> {
    stack.to_global_box(b)
}

/// Intersection over union with inclusive pixel counts.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = a.intersection(&b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    fn stack_of(base: ImageDims, frames: &[(u32, u32, u32, u32)]) -> TransformStack {
        let mut s = TransformStack::new(base);
        for &(x, y, w, h) in frames {
            s.push(CropFrame {
                origin: Point::new(x, y),
                dims: dims(w, h),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(bb(10, 20, 30, 40)), Point::new(20, 30));
        assert_eq!(center(bb(0, 0, 0, 0)), Point::new(0, 0));
        // 7.5 floors to 7; rational check: (5+10)/2 = 15/2, floor = 7
        let (num, den) = (5u64 + 10, 2u64);
        assert_eq!(num / den, 7);
        assert_eq!(center(bb(5, 5, 10, 10)), Point::new(7, 7));
    }

    #[test]
    fn contains_is_inclusive() {
        let b = bb(15, 25, 35, 45);
        assert!(contains(b, Point::new(20, 30)));
        assert!(contains(b, Point::new(15, 25)));
        assert!(contains(b, Point::new(35, 45)));
        assert!(!contains(b, Point::new(36, 30)));
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(5, 0, 4, 0).is_err());
        let parsed: Result<BBox, _> = serde_json::from_str("[5, 0, 4, 3]");
        assert!(parsed.is_err());
    }

    /// Enumerates every origin that keeps the window in bounds and keeps the
    /// one whose centre is closest to the focus centre on each axis.
    fn brute_force_place(parent: ImageDims, focus: BBox, w: u32, h: u32) -> Point {
        let c = center(focus);
        let best = |full: u32, size: u32, target: u32| -> u32 {
            (0..=full - size)
                .min_by_key(|&o| ((o + size / 2) as i64 - target as i64).abs())
                .unwrap()
        };
        Point::new(best(parent.width, w, c.x), best(parent.height, h, c.y))
    }

    #[test]
    fn crop_window_examples() {
        let f = crop_window(dims(1000, 1000), bb(490, 490, 510, 510), 0.5);
        assert_eq!(f.origin, Point::new(250, 250));
        assert_eq!(f.dims, dims(500, 500));

        let f = crop_window(dims(1000, 1000), bb(0, 0, 10, 10), 0.5);
        assert_eq!(f.origin, Point::new(0, 0));
        assert_eq!(f.dims, dims(500, 500));

        let parent = dims(1920, 1080);
        let focus = bb(1900, 1060, 1910, 1070);
        let f = crop_window(parent, focus, 0.6);
        assert_eq!(f.dims, dims(1152, 648));
        assert_eq!(brute_force_place(parent, focus, 1152, 648), Point::new(768, 432));
        assert_eq!(f.origin, Point::new(768, 432));
    }

    #[test]
    fn crop_window_matches_brute_force() {
        let parent = dims(37, 23);
        for lambda in [0.1, 0.33, 0.5, 0.6, 0.9, 1.0] {
            for x in (0..37).step_by(3) {
                for y in (0..23).step_by(2) {
                    let focus = bb(x, y, (x + 4).min(36), (y + 3).min(22));
                    let f = crop_window(parent, focus, lambda);
                    assert!(f.fits_in(parent));
                    let expect = brute_force_place(parent, focus, f.dims.width, f.dims.height);
                    assert_eq!(f.origin, expect, "lambda={lambda} focus={focus}");
                }
            }
        }
    }

    #[test]
    fn crop_window_minimum_is_one_pixel() {
        let f = crop_window(dims(3, 3), bb(1, 1, 1, 1), 0.01);
        assert_eq!(f.dims, dims(1, 1));
        assert_eq!(f.origin, Point::new(1, 1));
    }

    #[test]
    fn to_global_examples() {
        let base = dims(1000, 1000);
        let s = stack_of(base, &[(100, 200, 300, 300)]);
        assert_eq!(s.to_global(Point::new(10, 20)).unwrap(), Point::new(110, 220));
        let s = TransformStack::new(base);
        assert_eq!(s.to_global(Point::new(5, 5)).unwrap(), Point::new(5, 5));
        let s = stack_of(base, &[(100, 200, 300, 300), (50, 60, 100, 100)]);
        assert_eq!(s.to_global(Point::new(1, 2)).unwrap(), Point::new(151, 262));
    }

    #[test]
    fn to_global_rejects_points_outside_innermost_frame() {
        let s = stack_of(dims(100, 100), &[(10, 10, 20, 20)]);
        assert!(matches!(
            s.to_global(Point::new(20, 0)),
            Err(GeometryError::OutOfFrame { .. })
        ));
    }

    #[test]
    fn to_global_box_examples() {
        let base = dims(1000, 1000);
        let s = stack_of(base, &[(100, 200, 300, 300)]);
        assert_eq!(s.to_global_box(bb(0, 0, 10, 10)).unwrap(), bb(100, 200, 110, 210));
        let s = TransformStack::new(base);
        assert_eq!(s.to_global_box(bb(3, 4, 5, 6)).unwrap(), bb(3, 4, 5, 6));
        let s = stack_of(base, &[(7, 9, 50, 50), (3, 4, 10, 10)]);
        assert_eq!(s.to_global_box(bb(1, 1, 2, 2)).unwrap(), bb(11, 14, 12, 15));
    }

    #[test]
    fn push_rejects_oversized_frames() {
        let mut s = TransformStack::new(dims(10, 10));
        let err = s.push(CropFrame {
            origin: Point::new(5, 5),
            dims: dims(6, 2),
        });
        assert!(err.is_err());
        assert_eq!(s.depth(), 0);
    }

    /// Counts shared pixels one by one.
    fn pixel_iou(a: BBox, b: BBox) -> f64 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for x in 0..=a.x2.max(b.x2) {
            for y in 0..=a.y2.max(b.y2) {
                let p = Point::new(x, y);
                let (ia, ib) = (contains(a, p), contains(b, p));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(bb(0, 0, 9, 9), bb(0, 0, 9, 9)), 1.0);
        assert_eq!(iou(bb(0, 0, 9, 9), bb(20, 20, 29, 29)), 0.0);
        let (a, b) = (bb(0, 0, 9, 9), bb(5, 0, 14, 9));
        assert!((pixel_iou(a, b) - 50.0 / 150.0).abs() < 1e-12);
        assert!((iou(a, b) - pixel_iou(a, b)).abs() < 1e-12);
    }

    #[test]
    fn iou_agrees_with_pixel_counting() {
        let boxes = [
            bb(0, 0, 3, 3),
            bb(2, 1, 7, 4),
            bb(3, 3, 3, 3),
            bb(1, 0, 1, 9),
            bb(0, 5, 9, 6),
        ];
        for a in boxes {
            for b in boxes {
                assert!((iou(a, b) - pixel_iou(a, b)).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0u32..500, 0u32..500, 0u32..200, 0u32..200)
                .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
        }

        proptest! {
            #[test]
            fn center_is_contained(b in arb_box()) {
                prop_assert!(contains(b, center(b)));
            }

            #[test]
            fn iou_symmetric(a in arb_box(), b in arb_box()) {
                prop_assert_eq!(iou(a, b), iou(b, a));
                prop_assert_eq!(iou(a, a), 1.0);
                let v = iou(a, b);
                prop_assert!((0.0..=1.0).contains(&v));
            }

            #[test]
            fn crop_window_fits(w in 1u32..3000, h in 1u32..3000, fx in 0.0f64..1.0, fy in 0.0f64..1.0, lambda in 0.001f64..=1.0) {
                let parent = ImageDims::new(w, h).unwrap();
                let p = Point::new((fx * w as f64) as u32, (fy * h as f64) as u32);
                let f = crop_window(parent, BBox::at(p), lambda);
                prop_assert!(f.fits_in(parent));
                prop_assert!(f.dims.width >= 1 && f.dims.height >= 1);
            }

            #[test]
            fn nested_crops_shrink(w in 50u32..3000, h in 50u32..3000, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
                                   l1 in 0.1f64..=1.0, l2 in 0.1f64..=1.0) {
                let base = ImageDims::new(w, h).unwrap();
                let mut s = TransformStack::new(base);
                let p = Point::new((fx * w as f64) as u32, (fy * h as f64) as u32);
                let f1 = crop_window(base, BBox::at(p), l1);
                s.push(f1).unwrap();
                let inner = s.current_dims();
                let f2 = crop_window(inner, inner.full_box(), l2);
                s.push(f2).unwrap();
                let g = s.global_frame();
                let bound_w = l1 * l2 * w as f64 + 1.0;
                let bound_h = l1 * l2 * h as f64 + 1.0;
                prop_assert!((g.dims.width as f64) <= bound_w + 1.0);
                prop_assert!((g.dims.height as f64) <= bound_h + 1.0);
                prop_assert!(g.fits_in(base));
            }

            #[test]
            fn local_global_round_trip(w in 10u32..2000, h in 10u32..2000, seeds in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.2f64..=1.0), 0..4), px in 0.0f64..1.0, py in 0.0f64..1.0) {
                let base = ImageDims::new(w, h).unwrap();
                let mut s = TransformStack::new(base);
                for (fx, fy, lambda) in seeds {
                    let d = s.current_dims();
                    let p = Point::new((fx * d.width as f64) as u32, (fy * d.height as f64) as u32);
                    s.push(crop_window(d, BBox::at(p), lambda)).unwrap();
                }
                let d = s.current_dims();
                let p = Point::new((px * d.width as f64) as u32, (py * d.height as f64) as u32);
                let g = s.to_global(p).unwrap();
                prop_assert!(base.contains(g));
                prop_assert_eq!(s.to_local(g).unwrap(), p);
            }
        }
    }
}
