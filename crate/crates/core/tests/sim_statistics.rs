use bami_core::backend::{sim_ground, DrawKey, SimElement, SimScene};
use bami_core::geometry::{center, BBox, CropFrame, ImageDims, Point, TransformStack};
use bami_core::image_ops::{crop, Raster};

const DRAWS: u32 = 10_000;

fn scene(sigma_rel: f64) -> SimScene {
    let target = SimElement {
        bbox: BBox::new(990, 990, 1009, 1009).unwrap(),
        tag: "target".into(),
        is_target: true,
        color: None,
    };
    let mut s = SimScene::new(ImageDims::new(2000, 2000).unwrap(), vec![target]);
    s.precision_sigma_rel = sigma_rel;
    s.seed = 17;
    s
}

/// Per-axis sample standard deviations of the global center error.
fn error_std(s: &SimScene, img: &Raster, frames: &TransformStack) -> (f64, f64) {
    let truth = center(s.elements[0].bbox);
    let mut dx = Vec::with_capacity(DRAWS as usize);
    let mut dy = Vec::with_capacity(DRAWS as usize);
    for i in 0..DRAWS {
        let key = DrawKey {
            run_seed: 0,
            sample_id: "mc",
            depth: frames.depth(),
            call_index: i,
        };
        let pred = sim_ground(s, "target", img, frames, key).unwrap();
        let p: Point = frames.to_global(pred.anchor(img.dims())).unwrap();
        dx.push(p.x as f64 - truth.x as f64);
        dy.push(p.y as f64 - truth.y as f64);
    }
    (std(&dx), std(&dy))
}

fn std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn error_std_halves_when_frame_halves() {
    let s = scene(0.05);
    let full = bami_core::backend::render_scene(&s);
    let whole = TransformStack::new(full.dims());
    let (fx, fy) = error_std(&s, &full, &whole);

    let frame = CropFrame {
        origin: Point::new(500, 500),
        dims: ImageDims::new(1000, 1000).unwrap(),
    };
    let mut cropped_stack = TransformStack::new(full.dims());
    cropped_stack.push(frame).unwrap();
    let cropped = crop(&full, frame).unwrap();
    let (cx, cy) = error_std(&s, &cropped, &cropped_stack);

    for (big, small, axis) in [(fx, cx, "x"), (fy, cy, "y")] {
        assert!((big / 100.0 - 1.0).abs() < 0.10, "{axis}: full-frame std {big}, expected about 100");
        assert!((small / 50.0 - 1.0).abs() < 0.10, "{axis}: cropped std {small}, expected about 50");
        let ratio = small / big;
        assert!((ratio - 0.5).abs() < 0.05, "{axis}: ratio {ratio}");
    }
}

#[test]
fn error_scales_with_frame_size() {
    // Expected absolute error is proportional to the frame's larger side.
    let s = scene(0.02);
    let full = bami_core::backend::render_scene(&s);
    let mut last = None;
    for side in [2000u32, 1600, 1000, 400] {
        let origin = (2000 - side) / 2;
        let frame = CropFrame {
            origin: Point::new(origin, origin),
            dims: ImageDims::new(side, side).unwrap(),
        };
        let mut stack = TransformStack::new(full.dims());
        if side < 2000 {
            stack.push(frame).unwrap();
        }
        let img = crop(&full, frame).unwrap();
        let (sx, _) = error_std(&s, &img, &stack);
        let per_pixel = sx / side as f64;
        assert!((per_pixel / 0.02 - 1.0).abs() < 0.10, "side {side}: std {sx}");
        if let Some(prev) = last {
            assert!(sx < prev);
        }
        last = Some(sx);
    }
}
