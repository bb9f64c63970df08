use proptest::prelude::*;
use q4dg::grid::{CameraSetting, GridLayout};
use q4dg::heads::{Queries, TrackHead};
use q4dg::losses::{
    camera_loss, chamfer, depth_loss, mask_loss, point_loss, total_loss, tracking_loss, LossParts,
    LossWeights, Reduction, TrackLoss, TrackTargets,
};
use q4dg::numerics::nn::Init;
use q4dg::numerics::{finite_diff_check, Graph, ParamStore, Probe, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

const IMAGE: (usize, usize) = (4, 5);
const FRAMES: usize = 2;
const NPX: usize = FRAMES * 4 * 5;

fn validity(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec((0..NPX).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect())
}

#[test]
fn every_loss_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let cam = store.add("cam", tensor(&[3, 9], uniform(&mut rng, 27, -2.0, 2.0)));
    let depth = store.add("depth", tensor(&[NPX], uniform(&mut rng, NPX, 0.5, 3.0)));
    let points = store.add("points", tensor(&[NPX, 3], uniform(&mut rng, NPX * 3, -1.0, 1.0)));
    let mask = store.add("mask", tensor(&[NPX], uniform(&mut rng, NPX, 0.05, 0.95)));
    let set = store.add("set", tensor(&[5, 3], uniform(&mut rng, 15, -1.0, 1.0)));
    let tr2 = store.add("tr2", tensor(&[6, 2], uniform(&mut rng, 12, 0.0, 8.0)));
    let tr3 = store.add("tr3", tensor(&[6, 3], uniform(&mut rng, 18, -1.0, 1.0)));

    let cam_gt = tensor(&[3, 9], uniform(&mut rng, 27, -2.0, 2.0));
    let depth_gt = Tensor::from_vec(uniform(&mut rng, NPX, 0.5, 3.0));
    let points_gt = tensor(&[NPX, 3], uniform(&mut rng, NPX * 3, -1.0, 1.0));
    let mask_gt = Tensor::from_vec((0..NPX).map(|k| (k % 3 == 0) as u8 as f64).collect());
    let valid = validity(&mut rng);
    let set_gt = uniform(&mut rng, 21, -1.0, 1.0);
    let views = [0usize, 0, 1];
    let gt2 = uniform(&mut rng, 12, 0.0, 8.0);
    let gt3 = uniform(&mut rng, 18, -1.0, 1.0);

    for red in [Reduction::Mean, Reduction::Sum] {
        let checks: Vec<(&str, Box<dyn Fn(&ParamStore, &mut Graph) -> q4dg::Result<q4dg::numerics::Var>>)> = vec![
            ("camera", Box::new(|s, g| {
                let p = g.param(s, cam);
                camera_loss(g, p, &cam_gt, 1.0, red)
            })),
            ("depth", Box::new(|s, g| {
                let p = g.param(s, depth);
                depth_loss(g, p, &depth_gt, &valid, IMAGE, red)
            })),
            ("point", Box::new(|s, g| {
                let p = g.param(s, points);
                point_loss(g, p, &points_gt, &valid, IMAGE, red)
            })),
            ("mask", Box::new(|s, g| {
                let p = g.param(s, mask);
                mask_loss(g, p, &mask_gt, red)
            })),
            ("chamfer", Box::new(|s, g| {
                let p = g.param(s, set);
                chamfer(g, p, &set_gt)
            })),
        ];
        for (name, f) in &checks {
            let r = finite_diff_check(f, &store, 1e-6, Probe::All).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} {red:?}: {r:?}");
        }
        for kind in [TrackLoss::Chamfer, TrackLoss::PerQuery] {
            let targets = TrackTargets {
                views: &views,
                tracks_2d: &gt2,
                tracks_3d: &gt3,
                pixel_scale: 8.0,
            };
            let r = finite_diff_check(
                |s, g: &mut Graph| {
                    let a = g.param(s, tr2);
                    let b = g.param(s, tr3);
                    tracking_loss(g, a, b, &targets, kind, red)
                },
                &store,
                1e-6,
                Probe::All,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "track {kind:?} {red:?}: {r:?}");
        }
    }
}

#[test]
fn losses_vanish_at_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let cam_gt = tensor(&[2, 9], uniform(&mut rng, 18, -1.0, 1.0));
    let p = g.input(cam_gt.clone());
    let l = camera_loss(&mut g, p, &cam_gt, 1.0, Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let valid = validity(&mut rng);
    let d_gt = Tensor::from_vec(uniform(&mut rng, NPX, 0.5, 3.0));
    let p = g.input(d_gt.clone());
    let l = depth_loss(&mut g, p, &d_gt, &valid, IMAGE, Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let m_gt = Tensor::from_vec((0..NPX).map(|k| (k % 2) as f64).collect());
    let p = g.input(m_gt.clone());
    let l = mask_loss(&mut g, p, &m_gt, Reduction::Mean).unwrap();
    assert!(g.value(l).item() >= 0.0 && g.value(l).item() < 2e-7);

    let set = uniform(&mut rng, 12, -1.0, 1.0);
    let p = g.input(tensor(&[4, 3], set.clone()));
    let l = chamfer(&mut g, p, &set).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn unit_values() {
    let mut g = Graph::new();
    let mut r = vec![0.0; 9];
    r[0] = 2.0;
    let p = g.input(tensor(&[1, 9], r));
    let l = camera_loss(&mut g, p, &Tensor::zeros(&[1, 9]), 1.0, Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 1.5);

    let p = g.input(Tensor::full(&[4], 0.5));
    let l = mask_loss(&mut g, p, &Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0]), Reduction::Mean).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-9);

    let p = g.input(tensor(&[1, 1], vec![0.0]));
    let l = chamfer(&mut g, p, &[1.0]).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
}

#[test]
fn total_of_unit_components_uses_default_weights() {
    let mut g = Graph::new();
    let mut parts = LossParts::default();
    let v = [g.scalar(1.0), g.scalar(1.0), g.scalar(1.0), g.scalar(1.0), g.scalar(1.0)];
    parts.cam = Some(v[0]);
    parts.depth = Some(v[1]);
    parts.mask = Some(v[2]);
    parts.point = Some(v[3]);
    parts.track = Some(v[4]);
    let (_, rep) = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
    assert!((rep.total - 3.6).abs() < 1e-12);
    let zero = LossWeights {
        cam: 0.0,
        depth: 0.0,
        mask: 0.0,
        point: 0.0,
        track: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(total_loss(&mut g, &parts, &zero).unwrap().1.total, 0.0);
    let bad = LossWeights {
        depth: -0.1,
        ..LossWeights::default()
    };
    assert!(total_loss(&mut g, &parts, &bad).is_err());
}

#[test]
fn tracking_head_soft_argmax_is_differentiable() {
    let (h, w, patch) = (16, 16, 8);
    let layout = GridLayout::new(1, 2, 2, 2, CameraSetting::MonoDynamic).unwrap();
    let frames = layout.frames();
    let (dim, channels) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let head = {
        let mut init_rng = ChaCha8Rng::seed_from_u64(32);
        let mut init = Init {
            store: &mut store,
            rng: &mut init_rng,
        };
        TrackHead::init(&mut init, dim, channels, 4, 0.1)
    };
    let ft = store.add("ft", tensor(&[layout.tokens(), dim], uniform(&mut rng, layout.tokens() * dim, -1.0, 1.0)));
    let npx = frames * h * w;
    let fd = store.add("fd", tensor(&[npx, channels], uniform(&mut rng, npx * channels, -1.0, 1.0)));
    let depth = store.add("depth", tensor(&[npx], uniform(&mut rng, npx, 1.5, 2.5)));
    let mut cams = Vec::new();
    for _ in 0..frames {
        let q: Vec<f64> = uniform(&mut rng, 4, -0.2, 0.2);
        cams.extend([1.0 + q[0], q[1], q[2], q[3]]);
        cams.extend(uniform(&mut rng, 3, -0.5, 0.5));
        cams.extend([1.1, 0.9]);
    }
    let cameras = store.add("cameras", tensor(&[frames, 9], cams));
    let queries = Queries {
        views: vec![0, 0, 0],
        source_time: 0,
        pixels: vec![[3.3, 4.6], [10.2, 7.7], [12.4, 13.1]],
    };
    let rows = frames * queries.len();
    let w2 = uniform(&mut rng, rows * 2, -1.0, 1.0);
    let w3 = uniform(&mut rng, rows * 3, -1.0, 1.0);
    let report = finite_diff_check(
        |s, g: &mut Graph| {
            let (ftv, fdv, dv, cv) = (g.param(s, ft), g.param(s, fd), g.param(s, depth), g.param(s, cameras));
            let out = head.forward(g, s, ftv, fdv, dv, cv, &layout, (h, w), patch, &queries)?;
            let a = g.input(tensor(&[rows, 2], w2.clone()));
            let b = g.input(tensor(&[rows, 3], w3.clone()));
            let c = g.input(tensor(&[rows, 2], w2.clone()));
            let t2 = g.mul(out.tracks_2d, a);
            let t3 = g.mul(out.tracks_3d, b);
            let tc = g.mul(out.coarse_2d, c);
            let s2 = g.sum(t2);
            let s3 = g.sum(t3);
            let sc = g.sum(tc);
            let s23 = g.add(s2, s3);
            Ok(g.add(s23, sc))
        },
        &store,
        1e-5,
        Probe::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-5.0f64..5.0, 3..30),
        b in prop::collection::vec(-5.0f64..5.0, 3..30),
    ) {
        let (a, b) = (&a[..a.len() / 3 * 3], &b[..b.len() / 3 * 3]);
        let mut g = Graph::new();
        let pa = g.input(tensor(&[a.len() / 3, 3], a.to_vec()));
        let pb = g.input(tensor(&[b.len() / 3, 3], b.to_vec()));
        let ab = chamfer(&mut g, pa, b).unwrap();
        let ba = chamfer(&mut g, pb, a).unwrap();
        let (x, y) = (g.value(ab).item(), g.value(ba).item());
        prop_assert!(x >= 0.0);
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }

    #[test]
    fn garbage_under_invalid_pixels_is_ignored(seed in 0u64..1000, junk in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let valid = validity(&mut rng);
        let gt = uniform(&mut rng, NPX * 3, -1.0, 1.0);
        let pred = uniform(&mut rng, NPX * 3, -1.0, 1.0);
        let mut dirty = gt.clone();
        for k in 0..NPX {
            if valid.data()[k] < 0.5 {
                dirty[k * 3..k * 3 + 3].fill(junk);
            }
        }
        let mut g = Graph::new();
        let p = g.input(tensor(&[NPX, 3], pred));
        let clean = point_loss(&mut g, p, &tensor(&[NPX, 3], gt), &valid, IMAGE, Reduction::Mean).unwrap();
        let noisy = point_loss(&mut g, p, &tensor(&[NPX, 3], dirty), &valid, IMAGE, Reduction::Mean).unwrap();
        prop_assert_eq!(g.value(clean).item().to_bits(), g.value(noisy).item().to_bits());
    }

    #[test]
    fn total_is_linear_in_each_component(k in 0usize..5, base in 0.0f64..3.0, bump in 0.01f64..2.0) {
        let w = LossWeights::default();
        let eval = |x: f64| {
            let mut g = Graph::new();
            let mut vals = [base; 5];
            vals[k] = x;
            let v: Vec<_> = vals.iter().map(|&s| g.scalar(s)).collect();
            let parts = LossParts { cam: Some(v[0]), depth: Some(v[1]), mask: Some(v[2]), point: Some(v[3]), track: Some(v[4]) };
            total_loss(&mut g, &parts, &w).unwrap().1.total
        };
        let slope = (eval(base + bump) - eval(base)) / bump;
        prop_assert!((slope - w.as_array()[k]).abs() < 1e-9);
    }
}
